//! Full-precision forward pass checked against a direct loop implementation
//! written independently of the engine's im2col lowering.

use lobit_core::engine::{Mode, ModelSpec, Network, QConfig};
use lobit_core::quant::NoiseSource;
use lobit_core::Tensor;

struct Img {
    c: usize,
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl Img {
    fn at(&self, c: usize, y: isize, x: isize) -> f64 {
        if y < 0 || x < 0 || y >= self.h as isize || x >= self.w as isize {
            0.0
        } else {
            self.data[(c * self.h + y as usize) * self.w + x as usize]
        }
    }
}

fn conv(img: &Img, w: &Tensor) -> Img {
    let s = w.shape();
    let (o, k) = (s[0], s[2]);
    let p = (k / 2) as isize;
    let mut data = Vec::new();
    for oc in 0..o {
        for y in 0..img.h as isize {
            for x in 0..img.w as isize {
                let mut acc = 0.0;
                for c in 0..img.c {
                    for ky in 0..k {
                        for kx in 0..k {
                            acc += w.data()[((oc * img.c + c) * k + ky) * k + kx]
                                * img.at(c, y + ky as isize - p, x + kx as isize - p);
                        }
                    }
                }
                data.push(acc);
            }
        }
    }
    Img { c: o, h: img.h, w: img.w, data }
}

fn pool(img: &Img, win: usize) -> Img {
    let (h, w) = (img.h / win, img.w / win);
    let mut data = Vec::new();
    for c in 0..img.c {
        for y in 0..h {
            for x in 0..w {
                let mut m = f64::NEG_INFINITY;
                for dy in 0..win {
                    for dx in 0..win {
                        m = m.max(img.at(c, (y * win + dy) as isize, (x * win + dx) as isize));
                    }
                }
                data.push(m);
            }
        }
    }
    Img { c: img.c, h, w, data }
}

/// Batchnorm with statistics over the whole batch, then clamp to [0, 1].
fn bn_clamp(batch: &mut [Img], gamma: &Tensor, beta: &Tensor) {
    let hw = batch[0].h * batch[0].w;
    let m = (batch.len() * hw) as f64;
    for c in 0..batch[0].c {
        let vals = || batch.iter().flat_map(|i| i.data[c * hw..(c + 1) * hw].iter().copied());
        let mean = vals().sum::<f64>() / m;
        let var = vals().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m;
        for img in batch.iter_mut() {
            for v in &mut img.data[c * hw..(c + 1) * hw] {
                let y = gamma.data()[c] * (*v - mean) / (var + 1e-5).sqrt() + beta.data()[c];
                *v = y.clamp(0.0, 1.0);
            }
        }
    }
}

fn reference_logits(net: &Network, x: &Tensor) -> Vec<f64> {
    let [c, h, w] = net.input_shape();
    let mut batch: Vec<Img> = x
        .data()
        .chunks(c * h * w)
        .map(|d| Img { c, h, w, data: d.to_vec() })
        .collect();
    let spec = net.spec().to_string();
    let mut conv_index = 0;
    for layer in spec.split(',') {
        if layer.starts_with("conv") {
            conv_index += 1;
            let p = |s: &str| net.param(&format!("conv{conv_index}.{s}")).unwrap().clone();
            batch = batch.iter().map(|i| conv(i, &p("weight"))).collect();
            bn_clamp(&mut batch, &p("bn.gamma"), &p("bn.beta"));
        } else if let Some(win) = layer.strip_prefix("pool:") {
            batch = batch.iter().map(|i| pool(i, win.parse().unwrap())).collect();
        }
    }
    let fw = net.param("fc.weight").unwrap();
    let fb = net.param("fc.bias").unwrap();
    let (k, d) = (fw.shape()[0], fw.shape()[1]);
    let mut out = Vec::new();
    for img in &batch {
        for j in 0..k {
            out.push(fb.data()[j] + (0..d).map(|i| fw.data()[j * d + i] * img.data[i]).sum::<f64>());
        }
    }
    out
}

fn random(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = NoiseSource::new(seed);
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.uniform_open()).collect()).unwrap()
}

#[test]
fn full_precision_forward_matches_reference() {
    for (spec, seed) in [("conv:4:3,pool:2,conv:5:3,fc", 1), ("conv:3:5,conv:2:1,pool:3,fc", 2)] {
        let spec: ModelSpec = spec.parse().unwrap();
        let mut net = Network::new(&spec, QConfig::full(), [2, 6, 6], 4, seed).unwrap();
        // non-trivial batchnorm affine parameters
        for name in ["conv1.bn.gamma", "conv1.bn.beta"] {
            for v in net.param_mut(name).unwrap().data_mut() {
                *v += 0.3;
            }
        }
        let x = random(&[3, 2, 6, 6], seed + 10);
        let logits = net.forward(&x, Mode::Train).unwrap().logits;
        for (a, b) in logits.data().iter().zip(reference_logits(&net, &x)) {
            assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "{a} vs {b}");
        }
    }
}

#[test]
fn zero_input_gives_batchnorm_constants() {
    let spec: ModelSpec = "conv:3:3,fc".parse().unwrap();
    let mut net = Network::new(&spec, QConfig::full(), [1, 4, 4], 2, 5).unwrap();
    net.set_tensor("conv1.bn.beta", Tensor::vector(vec![0.25, 0.5, 2.0])).unwrap();
    let logits = net.forward(&Tensor::zeros(&[2, 1, 4, 4]), Mode::Train).unwrap().logits;
    // every conv output is 0, so batchnorm emits beta and clamp bounds it
    let act = [0.25, 0.5, 1.0];
    let fw = net.param("fc.weight").unwrap();
    for row in logits.data().chunks(2) {
        for (j, &v) in row.iter().enumerate() {
            let expected: f64 = (0..48).map(|i| fw.data()[j * 48 + i] * act[i / 16]).sum();
            assert!((v - expected).abs() < 1e-12);
        }
    }
}
