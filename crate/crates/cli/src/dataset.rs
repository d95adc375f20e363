//! Dataset container files, the synthetic image generator and resizing.
//!
//! A container file holds one array:
//!
//! ```text
//! magic    8 bytes "LOBITDS1"
//! dtype    u8      0 = u8, 1 = u32, 2 = f32, 3 = f64
//! rank     u8
//! dims     rank x u64 (little-endian)
//! payload  product(dims) little-endian values
//! ```
//!
//! A dataset directory contains `train_images.lbd`, `train_labels.lbd`,
//! `test_images.lbd` and `test_labels.lbd`. Images are `[N, C, H, W]` (or
//! `[N, H, W]` for a single channel); `u8` pixels are divided by 255 and
//! floating-point pixels must already lie in `[0, 1]`. Labels are `[N]`
//! integers (`u8` or `u32`).

use std::fmt;
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lobit_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{CliError, Result};

pub const DATASET_MAGIC: &[u8; 8] = b"LOBITDS1";
const MAX_RANK: u8 = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    U8 = 0,
    U32 = 1,
    F32 = 2,
    F64 = 3,
}

impl DType {
    fn from_byte(b: u8) -> Option<Self> {
        Some(match b {
            0 => DType::U8,
            1 => DType::U32,
            2 => DType::F32,
            3 => DType::F64,
            _ => return None,
        })
    }

    fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::U32 | DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// One decoded container file. Values are widened to `f64` as stored.
#[derive(Clone, Debug, PartialEq)]
pub struct RawArray {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

pub fn write_array(path: &Path, dtype: DType, shape: &[usize], values: &[f64]) -> Result<()> {
    if shape.iter().product::<usize>() != values.len() || shape.len() > MAX_RANK as usize {
        return Err(CliError::Runtime(format!(
            "cannot store {} values as {shape:?}",
            values.len()
        )));
    }
    let file = fs::File::create(path).map_err(|e| CliError::io(path.display(), e))?;
    let mut w = BufWriter::new(file);
    let mut bytes = Vec::with_capacity(18 + 8 * shape.len() + dtype.size() * values.len());
    bytes.extend_from_slice(DATASET_MAGIC);
    bytes.push(dtype as u8);
    bytes.push(shape.len() as u8);
    for &d in shape {
        bytes.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in values {
        match dtype {
            DType::U8 => bytes.push(v as u8),
            DType::U32 => bytes.extend_from_slice(&(v as u32).to_le_bytes()),
            DType::F32 => bytes.extend_from_slice(&(v as f32).to_le_bytes()),
            DType::F64 => bytes.extend_from_slice(&v.to_le_bytes()),
        }
    }
    w.write_all(&bytes)
        .and_then(|_| w.flush())
        .map_err(|e| CliError::io(path.display(), e))
}

pub fn read_array(path: &Path) -> Result<RawArray> {
    let file = fs::File::open(path).map_err(|e| CliError::io(path.display(), e))?;
    let mut bytes = Vec::new();
    BufReader::new(file)
        .read_to_end(&mut bytes)
        .map_err(|e| CliError::io(path.display(), e))?;
    parse_array(&bytes).map_err(|msg| CliError::Io(format!("{}: {msg}", path.display())))
}

fn parse_array(bytes: &[u8]) -> std::result::Result<RawArray, String> {
    if bytes.len() < 10 || &bytes[..8] != DATASET_MAGIC {
        return Err("not a dataset container (bad magic)".into());
    }
    let dtype = DType::from_byte(bytes[8]).ok_or_else(|| format!("unknown dtype {}", bytes[8]))?;
    let rank = bytes[9];
    if rank > MAX_RANK {
        return Err(format!("rank {rank} is not supported"));
    }
    let header = 10 + 8 * rank as usize;
    if bytes.len() < header {
        return Err("truncated header".into());
    }
    let shape: Vec<usize> = bytes[10..header]
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect();
    let count = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or("dimensions overflow")?;
    let payload = &bytes[header..];
    if Some(payload.len()) != count.checked_mul(dtype.size()) {
        return Err(format!(
            "payload has {} bytes, shape {shape:?} needs {}",
            payload.len(),
            count.saturating_mul(dtype.size())
        ));
    }
    let values = match dtype {
        DType::U8 => payload.iter().map(|&b| b as f64).collect(),
        DType::U32 => payload
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    Ok(RawArray {
        dtype,
        shape,
        values,
    })
}

/// Images `[N, C, H, W]` in `[0, 1]` with integer labels.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub classes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_shape(&self) -> [usize; 3] {
        let s = self.images.shape();
        [s[1], s[2], s[3]]
    }

    /// The first `n` samples (all of them if fewer).
    pub fn head(&self, n: usize) -> Result<Dataset> {
        let n = n.min(self.len());
        Ok(Dataset {
            images: lobit_core::engine::batch_slice(&self.images, 0, n)?,
            labels: self.labels[..n].to_vec(),
            classes: self.classes,
        })
    }
}

/// Parameters of the synthetic image task.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub train: usize,
    pub test: usize,
    pub size: usize,
    pub channels: usize,
    /// Half-width of the uniform pixel noise.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 10,
            train: 2000,
            test: 1000,
            size: 12,
            channels: 1,
            noise: 0.4,
            seed: 0,
        }
    }
}

/// Where a run's data comes from: `synthetic[:key=value,...]` or a
/// directory of container files.
#[derive(Clone, Debug, PartialEq)]
pub enum DatasetSpec {
    Synthetic(SyntheticSpec),
    Dir(PathBuf),
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic(SyntheticSpec::default())
    }
}

impl fmt::Display for DatasetSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DatasetSpec::Dir(p) => write!(f, "{}", p.display()),
            DatasetSpec::Synthetic(s) => write!(
                f,
                "synthetic:classes={},train={},test={},size={},channels={},noise={},seed={}",
                s.classes, s.train, s.test, s.size, s.channels, s.noise, s.seed
            ),
        }
    }
}

impl FromStr for DatasetSpec {
    type Err = CliError;

    fn from_str(s: &str) -> Result<Self> {
        let Some(rest) = s.strip_prefix("synthetic") else {
            if s.is_empty() {
                return Err(CliError::Config("empty dataset path".into()));
            }
            return Ok(DatasetSpec::Dir(PathBuf::from(s)));
        };
        let mut spec = SyntheticSpec::default();
        let rest = match rest.strip_prefix(':') {
            Some(r) => r,
            None if rest.is_empty() => "",
            None => return Ok(DatasetSpec::Dir(PathBuf::from(s))),
        };
        for kv in rest.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("expected key=value in '{kv}'")))?;
            let bad = || CliError::Config(format!("bad synthetic option {kv}"));
            let int = || v.parse::<usize>().map_err(|_| bad());
            match k {
                "classes" => spec.classes = int()?,
                "train" => spec.train = int()?,
                "test" => spec.test = int()?,
                "size" => spec.size = int()?,
                "channels" => spec.channels = int()?,
                "noise" => spec.noise = v.parse().map_err(|_| bad())?,
                "seed" => spec.seed = v.parse().map_err(|_| bad())?,
                _ => return Err(CliError::Config(format!("unknown synthetic option '{k}'"))),
            }
        }
        if spec.classes < 2 || spec.size < 4 || spec.channels == 0 || spec.train == 0 || spec.test == 0 {
            return Err(CliError::Config(format!(
                "synthetic task needs >= 2 classes, size >= 4, channels >= 1 and nonempty splits: {s}"
            )));
        }
        if !(0.0..=1.0).contains(&spec.noise) {
            return Err(CliError::Config(format!("noise {} outside [0, 1]", spec.noise)));
        }
        Ok(DatasetSpec::Synthetic(spec))
    }
}

/// Train and test splits for `spec`, resized to `resize x resize` if given.
pub fn load_dataset(spec: &DatasetSpec, resize: Option<usize>) -> Result<(Dataset, Dataset)> {
    let (train, test) = match spec {
        DatasetSpec::Synthetic(s) => synthetic(s),
        DatasetSpec::Dir(dir) => {
            let train = load_split(dir, "train")?;
            let test = load_split(dir, "test")?;
            if train.input_shape() != test.input_shape() {
                return Err(CliError::Io(format!(
                    "train images {:?} and test images {:?} differ in shape",
                    train.input_shape(),
                    test.input_shape()
                )));
            }
            let classes = train.classes.max(test.classes);
            (
                Dataset { classes, ..train },
                Dataset { classes, ..test },
            )
        }
    };
    match resize {
        Some(0) => Err(CliError::Config("resize must be positive".into())),
        Some(size) => Ok((resized(train, size), resized(test, size))),
        None => Ok((train, test)),
    }
}

fn resized(d: Dataset, size: usize) -> Dataset {
    Dataset {
        images: resize_bilinear(&d.images, size, size),
        ..d
    }
}

fn load_split(dir: &Path, split: &str) -> Result<Dataset> {
    let images = read_array(&dir.join(format!("{split}_images.lbd")))?;
    let labels = read_array(&dir.join(format!("{split}_labels.lbd")))?;
    let shape = match images.shape.len() {
        3 => vec![images.shape[0], 1, images.shape[1], images.shape[2]],
        4 => images.shape.clone(),
        r => return Err(CliError::Io(format!("{split} images have rank {r}, expected 3 or 4"))),
    };
    if shape.contains(&0) {
        return Err(CliError::Io(format!("{split} images have an empty dimension {shape:?}")));
    }
    if labels.shape.len() != 1 || !matches!(labels.dtype, DType::U8 | DType::U32) {
        return Err(CliError::Io(format!("{split} labels must be a rank-1 integer array")));
    }
    if labels.shape[0] != shape[0] {
        return Err(CliError::Io(format!(
            "{split}: {} images but {} labels",
            shape[0], labels.shape[0]
        )));
    }
    let pixels = match images.dtype {
        DType::U8 => images.values.iter().map(|v| v / 255.0).collect(),
        DType::U32 => return Err(CliError::Io(format!("{split} images cannot be u32"))),
        DType::F32 | DType::F64 => {
            if let Some(v) = images.values.iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(CliError::Io(format!("{split} pixel {v} outside [0, 1]")));
            }
            images.values
        }
    };
    let labels: Vec<usize> = labels.values.iter().map(|&v| v as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    Ok(Dataset {
        images: Tensor::new(shape, pixels).map_err(CliError::from)?,
        labels,
        classes,
    })
}

/// Writes both splits as `f32` images and `u32` labels.
pub fn write_dataset_dir(dir: &Path, train: &Dataset, test: &Dataset) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir.display(), e))?;
    for (split, d) in [("train", train), ("test", test)] {
        write_array(
            &dir.join(format!("{split}_images.lbd")),
            DType::F32,
            d.images.shape(),
            d.images.data(),
        )?;
        let labels: Vec<f64> = d.labels.iter().map(|&l| l as f64).collect();
        write_array(
            &dir.join(format!("{split}_labels.lbd")),
            DType::U32,
            &[labels.len()],
            &labels,
        )?;
    }
    Ok(())
}

/// Bilinear resampling of `[N, C, H, W]` to `[N, C, out_h, out_w]` with
/// pixel centers aligned (half-pixel offsets).
pub fn resize_bilinear(images: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let s = images.shape();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let src = images.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    let coord = |o: usize, out_len: usize, in_len: usize| -> (usize, usize, f64) {
        let x = ((o as f64 + 0.5) * in_len as f64 / out_len as f64 - 0.5).max(0.0);
        let x0 = (x.floor() as usize).min(in_len - 1);
        let x1 = (x0 + 1).min(in_len - 1);
        (x0, x1, x - x0 as f64)
    };
    for plane in 0..n * c {
        let img = &src[plane * h * w..(plane + 1) * h * w];
        for oy in 0..out_h {
            let (y0, y1, fy) = coord(oy, out_h, h);
            for ox in 0..out_w {
                let (x0, x1, fx) = coord(ox, out_w, w);
                let top = img[y0 * w + x0] * (1.0 - fx) + img[y0 * w + x1] * fx;
                let bottom = img[y1 * w + x0] * (1.0 - fx) + img[y1 * w + x1] * fx;
                out.push((top * (1.0 - fy) + bottom * fy).clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out).expect("resize shape")
}

/// Per-class template images: a few Gaussian blobs per channel.
fn prototypes(spec: &SyntheticSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let s = spec.size as f64;
    (0..spec.classes)
        .map(|_| {
            let mut img = vec![0.0; spec.channels * spec.size * spec.size];
            for ch in 0..spec.channels {
                for _ in 0..3 {
                    let cy = rng.gen_range(0.2..0.8) * s;
                    let cx = rng.gen_range(0.2..0.8) * s;
                    let sigma = rng.gen_range(0.08..0.2) * s;
                    let amp = rng.gen_range(0.4..1.0);
                    for y in 0..spec.size {
                        for x in 0..spec.size {
                            let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                            img[(ch * spec.size + y) * spec.size + x] +=
                                amp * (-d2 / (2.0 * sigma * sigma)).exp();
                        }
                    }
                }
            }
            img.iter_mut().for_each(|v| *v = v.min(1.0));
            img
        })
        .collect()
}

fn sample_split(
    spec: &SyntheticSpec,
    protos: &[Vec<f64>],
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Dataset {
    let (c, s) = (spec.channels, spec.size);
    let mut data = Vec::with_capacity(count * c * s * s);
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        let label = i % spec.classes;
        let proto = &protos[label];
        let dy = rng.gen_range(-1i64..=1);
        let dx = rng.gen_range(-1i64..=1);
        let contrast = rng.gen_range(0.6..1.0);
        let background = rng.gen_range(0.0..0.2);
        for ch in 0..c {
            for y in 0..s as i64 {
                for x in 0..s as i64 {
                    let (sy, sx) = (y - dy, x - dx);
                    let base = if sy < 0 || sx < 0 || sy >= s as i64 || sx >= s as i64 {
                        0.0
                    } else {
                        proto[(ch * s + sy as usize) * s + sx as usize]
                    };
                    let noise = if spec.noise > 0.0 {
                        rng.gen_range(-spec.noise..spec.noise)
                    } else {
                        0.0
                    };
                    data.push((background + contrast * base + noise).clamp(0.0, 1.0));
                }
            }
        }
        labels.push(label);
    }
    Dataset {
        images: Tensor::new(vec![count, c, s, s], data).expect("synthetic shape"),
        labels,
        classes: spec.classes,
    }
}

/// Deterministic synthetic classification task: each class is a blob
/// template, samples are shifted by up to one pixel, rescaled in contrast
/// and corrupted with uniform noise.
pub fn synthetic(spec: &SyntheticSpec) -> (Dataset, Dataset) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let protos = prototypes(spec, &mut rng);
    let mut train_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    train_rng.set_stream(1);
    let mut test_rng = ChaCha8Rng::seed_from_u64(spec.seed);
    test_rng.set_stream(2);
    (
        sample_split(spec, &protos, spec.train, &mut train_rng),
        sample_split(spec, &protos, spec.test, &mut test_rng),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_parsing() {
        let s: DatasetSpec = "synthetic:classes=3,size=8,seed=5".parse().unwrap();
        let DatasetSpec::Synthetic(syn) = &s else { panic!() };
        assert_eq!((syn.classes, syn.size, syn.seed), (3, 8, 5));
        assert_eq!(s.to_string().parse::<DatasetSpec>().unwrap(), s);
        assert!(matches!("data/svhn".parse::<DatasetSpec>().unwrap(), DatasetSpec::Dir(_)));
        assert!(matches!("synthetic".parse::<DatasetSpec>().unwrap(), DatasetSpec::Synthetic(_)));
        for bad in ["synthetic:classes=1", "synthetic:foo=2", "synthetic:size", "synthetic:noise=2", ""] {
            assert!(bad.parse::<DatasetSpec>().is_err(), "{bad}");
        }
    }

    #[test]
    fn synthetic_is_deterministic_and_bounded() {
        let spec = SyntheticSpec { train: 30, test: 10, ..Default::default() };
        let a = synthetic(&spec);
        assert_eq!(a, synthetic(&spec));
        assert!(a.0.images.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(a.0.labels.len(), 30);
        assert_ne!(a, synthetic(&SyntheticSpec { seed: 1, ..spec }));
    }

    #[test]
    fn bilinear_resize_examples() {
        let img = Tensor::new(vec![1, 1, 2, 2], vec![0.0, 1.0, 0.0, 1.0]).unwrap();
        let up = resize_bilinear(&img, 4, 4);
        assert_eq!(&up.data()[..4], &[0.0, 0.25, 0.75, 1.0]);
        let same = resize_bilinear(&img, 2, 2);
        assert_eq!(same, img);
        let flat = Tensor::full(&[2, 3, 5, 5], 0.3);
        assert!(resize_bilinear(&flat, 3, 7).data().iter().all(|v| (v - 0.3).abs() < 1e-12));
    }

    #[test]
    fn malformed_containers_are_rejected() {
        assert!(parse_array(b"NOTMAGIC\0\0").is_err());
        let mut ok = DATASET_MAGIC.to_vec();
        ok.extend_from_slice(&[0, 1]);
        ok.extend_from_slice(&3u64.to_le_bytes());
        ok.extend_from_slice(&[1, 2, 3]);
        assert_eq!(parse_array(&ok).unwrap().values, vec![1.0, 2.0, 3.0]);
        assert!(parse_array(&ok[..ok.len() - 1]).is_err());
        let mut bad_dtype = ok.clone();
        bad_dtype[8] = 7;
        assert!(parse_array(&bad_dtype).is_err());
    }
}
