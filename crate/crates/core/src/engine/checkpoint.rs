//! Binary checkpoint format. All integers and reals are little-endian.
//!
//! ```text
//! magic        8 bytes  "LOBITCKP"
//! version      u32      1
//! w, a, g      u8 x 3   bitwidths, 32 = full precision
//! flags        u8       bit 0 quantize_first, bit 1 quantize_last
//! step         u64      completed optimizer steps
//! seed         u64      gradient-noise seed
//! lr           f64
//! model        u32 length + UTF-8, e.g. "conv:16:3,pool:2,fc;input=1x28x28;classes=10"
//! n_tensors    u32
//! table        per tensor: u32 name length + UTF-8 name, u8 kind (0 param,
//!              1 buffer), u32 rank, rank x u64 dims
//! payload      f64 values of every tensor in table order, then the Adam
//!              first moments of every param in order, then the second moments
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::QConfig;
use crate::error::{Error, Result};
use crate::quant::Precision;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"LOBITCKP";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_NAME: u32 = 1 << 16;
const MAX_RANK: u32 = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub qconfig: QConfig,
    pub step: u64,
    pub seed: u64,
    pub lr: f64,
    pub model: String,
    pub params: Vec<(String, Tensor)>,
    pub buffers: Vec<(String, Tensor)>,
    /// Adam first moments, aligned with `params`.
    pub m: Vec<Tensor>,
    /// Adam second moments, aligned with `params`.
    pub v: Vec<Tensor>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| io_error(path, e))?;
        let mut w = BufWriter::new(file);
        write_checkpoint(&mut w, self)?;
        w.flush().map_err(|e| io_error(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| io_error(path, e))?;
        read_checkpoint(&mut BufReader::new(file))
    }
}

fn io_error(path: &Path, e: std::io::Error) -> Error {
    Error::Checkpoint(format!("{}: {e}", path.display()))
}

fn wr(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    w.write_all(bytes).map_err(|e| Error::Checkpoint(e.to_string()))
}

fn width_byte(p: Precision) -> u8 {
    p.width() as u8
}

fn write_str(w: &mut impl Write, s: &str) -> Result<()> {
    wr(w, &(s.len() as u32).to_le_bytes())?;
    wr(w, s.as_bytes())
}

pub fn write_checkpoint(w: &mut impl Write, ck: &Checkpoint) -> Result<()> {
    if ck.m.len() != ck.params.len() || ck.v.len() != ck.params.len() {
        return Err(Error::Checkpoint("moment count differs from parameter count".into()));
    }
    wr(w, CHECKPOINT_MAGIC)?;
    wr(w, &CHECKPOINT_VERSION.to_le_bytes())?;
    let q = &ck.qconfig;
    let flags = q.quantize_first as u8 | (q.quantize_last as u8) << 1;
    wr(
        w,
        &[width_byte(q.weights), width_byte(q.activations), width_byte(q.gradients), flags],
    )?;
    wr(w, &ck.step.to_le_bytes())?;
    wr(w, &ck.seed.to_le_bytes())?;
    wr(w, &ck.lr.to_le_bytes())?;
    write_str(w, &ck.model)?;
    let tensors: Vec<(&String, u8, &Tensor)> = ck
        .params
        .iter()
        .map(|(n, t)| (n, 0u8, t))
        .chain(ck.buffers.iter().map(|(n, t)| (n, 1u8, t)))
        .collect();
    wr(w, &(tensors.len() as u32).to_le_bytes())?;
    for (name, kind, t) in &tensors {
        write_str(w, name)?;
        wr(w, &[*kind])?;
        wr(w, &(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            wr(w, &(d as u64).to_le_bytes())?;
        }
    }
    let payload = tensors
        .iter()
        .map(|(_, _, t)| *t)
        .chain(ck.m.iter())
        .chain(ck.v.iter());
    for t in payload {
        for v in t.data() {
            wr(w, &v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<'a, R: Read>(&'a mut R);

impl<R: Read> Reader<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.0
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        self.bytes().map(u32::from_le_bytes)
    }

    fn u64(&mut self) -> Result<u64> {
        self.bytes().map(u64::from_le_bytes)
    }

    fn f64(&mut self) -> Result<f64> {
        self.bytes().map(f64::from_le_bytes)
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()?;
        if len > MAX_NAME {
            return Err(Error::Checkpoint(format!("string length {len} too large")));
        }
        let mut buf = vec![0u8; len as usize];
        self.0
            .read_exact(&mut buf)
            .map_err(|e| Error::Checkpoint(format!("truncated checkpoint: {e}")))?;
        String::from_utf8(buf).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("tensor shape {shape:?} overflows")))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape.to_vec(), data)
    }
}

pub fn read_checkpoint(r: &mut impl Read) -> Result<Checkpoint> {
    let mut rd = Reader(r);
    if &rd.bytes::<8>()? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
    }
    let version = rd.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
    }
    let [w, a, g, flags] = rd.bytes::<4>()?;
    let qconfig = QConfig::new(w as u32, a as u32, g as u32)
        .map_err(|e| Error::Checkpoint(format!("bad bitwidths: {e}")))?
        .with_first(flags & 1 != 0)
        .with_last(flags & 2 != 0);
    let step = rd.u64()?;
    let seed = rd.u64()?;
    let lr = rd.f64()?;
    let model = rd.string()?;
    let n = rd.u32()?;
    let mut table = Vec::new();
    for _ in 0..n {
        let name = rd.string()?;
        let kind = rd.u8()?;
        if kind > 1 {
            return Err(Error::Checkpoint(format!("tensor {name} has unknown kind {kind}")));
        }
        let rank = rd.u32()?;
        if rank > MAX_RANK {
            return Err(Error::Checkpoint(format!("tensor {name} has rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| rd.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        table.push((name, kind, shape));
    }
    let mut params = Vec::new();
    let mut buffers = Vec::new();
    for (name, kind, shape) in &table {
        let t = rd.tensor(shape)?;
        if *kind == 0 {
            params.push((name.clone(), t));
        } else {
            buffers.push((name.clone(), t));
        }
    }
    let shapes: Vec<Vec<usize>> = params.iter().map(|(_, t)| t.shape().to_vec()).collect();
    let m = shapes.iter().map(|s| rd.tensor(s)).collect::<Result<Vec<_>>>()?;
    let v = shapes.iter().map(|s| rd.tensor(s)).collect::<Result<Vec<_>>>()?;
    let mut extra = [0u8; 1];
    if rd.0.read(&mut extra).map_err(|e| Error::Checkpoint(e.to_string()))? != 0 {
        return Err(Error::Checkpoint("trailing bytes after checkpoint payload".into()));
    }
    Ok(Checkpoint {
        qconfig,
        step,
        seed,
        lr,
        model,
        params,
        buffers,
        m,
        v,
    })
}
