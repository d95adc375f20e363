//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Run with `cargo test --test acceptance` (add
//! `--release` for the fastest turnaround; the test profile is optimized
//! either way).

use std::process::ExitCode;
use std::time::Instant;

use lobit_cli::commands::bench::{run_bench, BenchSize};
use lobit_cli::commands::train::run_training;
use lobit_cli::dataset::load_dataset;
use lobit_cli::RunConfig;
use lobit_core::bitkernel::{
    decompose_planes, dot_and_popcount, dot_xnor, fixed_point_dot, fixed_point_dot_counted, pack_bits,
    PlanePairCounter,
};
use lobit_core::engine::{
    softmax_cross_entropy, BackwardOptions, Mode, ModelSpec, Network, NodeKind, QConfig,
};
use lobit_core::fusion::{
    build_threshold_table, fused_activation_quantize, fused_maxpool_quantize, quantize_max_commute_check,
    BoundedFn,
};
use lobit_core::quant::{gradient_quantize, quantize_k, Bits, NoiseSource, Precision};
use lobit_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn bits(k: u32) -> Bits {
    Bits::new(k).unwrap()
}

fn kernel_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let start = Instant::now();
    let mut mismatches = 0;
    for _ in 0..1000 {
        let (m, k) = (rng.gen_range(1..=8u32), rng.gen_range(1..=8u32));
        let len = rng.gen_range(1..=1024usize);
        let x: Vec<u32> = (0..len).map(|_| rng.gen_range(0..1u32 << m)).collect();
        let y: Vec<u32> = (0..len).map(|_| rng.gen_range(0..1u32 << k)).collect();
        let oracle: i64 = x.iter().zip(&y).map(|(&a, &b)| a as i64 * b as i64).sum();
        let got = fixed_point_dot(&decompose_planes(&x, m).unwrap(), &decompose_planes(&y, k).unwrap()).unwrap();
        mismatches += usize::from(got != oracle);
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        mismatches == 0 && secs < 5.0,
        format!("1000 cases, {mismatches} mismatches, {secs:.3} s (limit 5 s)"),
    )
}

fn binary_dots() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut failures = 0;
    for _ in 0..1000 {
        let n = rng.gen_range(1..=700usize);
        let x: Vec<i64> = (0..n).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
        let y: Vec<i64> = (0..n).map(|_| if rng.gen::<bool>() { 1 } else { -1 }).collect();
        let signed: i64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let px = pack_bits(&x.iter().map(|&v| v > 0).collect::<Vec<_>>());
        let py = pack_bits(&y.iter().map(|&v| v > 0).collect::<Vec<_>>());
        // {0,1} encoding b = (v + 1) / 2:  x.y = 4 b_x.b_y - 2 sum(b_x) - 2 sum(b_y) + n
        let and = dot_and_popcount(&px, &py).unwrap() as i64;
        let via_and = 4 * and - 2 * px.count_ones() as i64 - 2 * py.count_ones() as i64 + n as i64;
        let zero_one: i64 = x.iter().zip(&y).map(|(a, b)| ((a + 1) / 2) * ((b + 1) / 2)).sum();
        let via_xnor = dot_xnor(&px, &py).unwrap();
        failures += usize::from(via_and != signed || and != zero_one || via_xnor != signed);
    }
    outcome(failures == 0, format!("1000 pairs, {failures} disagreements"))
}

fn quantizer_grid() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let samples: Vec<f64> = (0..100_000).map(|_| rng.gen::<f64>()).collect();
    let mut off_grid = 0;
    let mut over_bound = 0;
    let mut worst = 0.0f64;
    for k in 1..=8 {
        let n = ((1u32 << k) - 1) as f64;
        let bound = 1.0 / (2.0 * n);
        for &r in &samples {
            let q = quantize_k(r, bits(k));
            let i = (q * n).round();
            off_grid += usize::from(!(0.0..=n).contains(&i) || q != i / n);
            let err = (q - r).abs();
            worst = worst.max(err / bound);
            over_bound += usize::from(err > bound);
        }
    }
    outcome(
        off_grid == 0 && over_bound == 0,
        format!("k=1..8 x 1e5 samples, {off_grid} off grid, {over_bound} over bound, max err/bound {worst:.6}"),
    )
}

fn dither_unbiased() -> Outcome {
    const DRAWS: usize = 100_000;
    // 20 interior values off every k-bit grid, plus a trailing 1.0 that pins
    // each instance's scale to 1
    let values: Vec<f64> = (0..20).map(|i| -0.95 + 0.1 * i as f64 + 0.0137).collect();
    let width = values.len() + 1;
    let mut data = Vec::with_capacity(DRAWS * width);
    for _ in 0..DRAWS {
        data.extend_from_slice(&values);
        data.push(1.0);
    }
    let input = Tensor::new(vec![DRAWS, width], data).unwrap();
    let start = Instant::now();
    let mut worst_z = 0.0f64;
    let mut failures = 0;
    for (i, k) in [1u32, 2, 4, 6].into_iter().enumerate() {
        let mut rng = NoiseSource::new(400 + i as u64);
        let q = gradient_quantize(&input, bits(k), &mut rng).unwrap();
        for (j, &v) in values.iter().enumerate() {
            let draws = q.data().iter().skip(j).step_by(width);
            let (mut sum, mut sq) = (0.0, 0.0);
            for d in draws {
                sum += d;
                sq += d * d;
            }
            let mean = sum / DRAWS as f64;
            let var = (sq / DRAWS as f64 - mean * mean).max(0.0) * DRAWS as f64 / (DRAWS - 1) as f64;
            let se = (var / DRAWS as f64).sqrt();
            let dev = (mean - v).abs();
            worst_z = worst_z.max(dev / se.max(f64::MIN_POSITIVE));
            failures += usize::from(dev > 3.0 * se + 1e-12);
        }
    }
    let secs = start.elapsed().as_secs_f64();
    outcome(
        failures == 0 && secs < 30.0,
        format!("20 values x k in {{1,2,4,6}} x 1e5 draws, {failures} beyond 3 SE, max |z| {worst_z:.2}, {secs:.2} s (limit 30 s)"),
    )
}

fn max_commutation() -> Outcome {
    let mut failures = 0;
    let mut checked = 0;
    for k in 1..=4 {
        let b = bits(k);
        for i in 0..=100 {
            for j in 0..=100 {
                let (x, y) = (i as f64 / 100.0, j as f64 / 100.0);
                let direct = quantize_k(x.max(y), b) == quantize_k(x, b).max(quantize_k(y, b));
                failures += usize::from(!direct || !quantize_max_commute_check(x, y, b));
                checked += 1;
            }
        }
    }
    outcome(failures == 0, format!("{checked} grid points, {failures} failures"))
}

fn unfused_maxpool_quantize(x: &Tensor, window: usize, k: Bits) -> Tensor {
    let s = x.shape();
    let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
    let (oh, ow) = (h / window, w / window);
    let mut out = Vec::new();
    for p in 0..b * c {
        for i in 0..oh {
            for j in 0..ow {
                let mut m = f64::NEG_INFINITY;
                for di in 0..window {
                    for dj in 0..window {
                        m = m.max(x.data()[p * h * w + (i * window + di) * w + j * window + dj]);
                    }
                }
                out.push(quantize_k(m, k));
            }
        }
    }
    Tensor::new(vec![b, c, oh, ow], out).unwrap()
}

fn random_monotone(rng: &mut ChaCha8Rng) -> BoundedFn {
    if rng.gen_bool(0.5) {
        return BoundedFn::Clamp;
    }
    let n = rng.gen_range(2..=6);
    let mut xs: Vec<f64> = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let mut ys: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
    xs.sort_by(f64::total_cmp);
    ys.sort_by(f64::total_cmp);
    BoundedFn::Piecewise(xs.into_iter().zip(ys).collect())
}

fn fusion_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    let (mut act_fail, mut pool_fail) = (0, 0);
    for _ in 0..10_000 {
        let k = bits(rng.gen_range(1..=8));
        let window = rng.gen_range(1..=3);
        let shape = vec![
            rng.gen_range(1..=2),
            rng.gen_range(1..=3),
            rng.gen_range(window..=7),
            rng.gen_range(window..=7),
        ];
        let len: usize = shape.iter().product();

        let h = random_monotone(&mut rng);
        let table = build_threshold_table(&h, k).unwrap();
        let pre = Tensor::new(shape.clone(), (0..len).map(|_| rng.gen_range(-2.5..2.5)).collect()).unwrap();
        let fused = fused_activation_quantize(&pre, &table);
        let unfused = pre.map(|v| quantize_k(h.eval(v), k));
        act_fail += usize::from(fused != unfused);

        let act = Tensor::new(shape, (0..len).map(|_| rng.gen::<f64>()).collect()).unwrap();
        let fused = fused_maxpool_quantize(&act, window, k).unwrap();
        pool_fail += usize::from(fused != unfused_maxpool_quantize(&act, window, k));
    }
    outcome(
        act_fail == 0 && pool_fail == 0,
        format!("1e4 tensors each, activation {act_fail} mismatches, maxpool {pool_fail} mismatches"),
    )
}

fn finite_differences() -> Outcome {
    let spec: ModelSpec = "conv:3:3,conv:4:3,fc".parse().unwrap();
    let q = QConfig::new(32, 32, 32).unwrap();
    let mut net = Network::new(&spec, q, [2, 5, 5], 3, 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    // inputs keep most pre-activations away from the clamp kinks
    let x = Tensor::new(vec![4, 2, 5, 5], (0..200).map(|_| rng.gen::<f64>()).collect()).unwrap();
    let labels = vec![0, 1, 2, 1];
    let loss = |n: &Network| {
        let cache = n.forward(&x, Mode::Train).unwrap();
        softmax_cross_entropy(&cache.logits, &labels).unwrap().0
    };
    let cache = net.forward(&x, Mode::Train).unwrap();
    let (_, dlogits) = softmax_cross_entropy(&cache.logits, &labels).unwrap();
    let grads = net.backward(&cache, &dlogits, &BackwardOptions::default()).unwrap().grads;

    let names: Vec<String> = net.params().iter().map(|(n, _)| n.clone()).collect();
    let eps = 1e-5;
    let (mut total, mut good) = (0usize, 0usize);
    let mut worst = 0.0f64;
    for (p, name) in names.iter().enumerate() {
        for i in 0..grads[p].len() {
            let orig = net.param(name).unwrap().data()[i];
            net.param_mut(name).unwrap().data_mut()[i] = orig + eps;
            let up = loss(&net);
            net.param_mut(name).unwrap().data_mut()[i] = orig - eps;
            let down = loss(&net);
            net.param_mut(name).unwrap().data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads[p].data()[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-7);
            total += 1;
            good += usize::from(rel <= 1e-3);
            worst = worst.max(rel);
        }
    }
    let frac = good as f64 / total as f64;
    outcome(
        frac >= 0.99,
        format!("{good}/{total} parameters within 1e-3 ({:.2}%), max relative error {worst:.2e}", 100.0 * frac),
    )
}

/// The desk task: default synthetic data (10 classes, 12x12, 2000/1000
/// samples) and the default model, 10 epochs of Adam at lr 0.002.
fn desk_config(w: u32, a: u32, g: u32, seed: u64, first_last: bool) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.w_bits = w;
    cfg.a_bits = a;
    cfg.g_bits = g;
    cfg.quantize_first = first_last;
    cfg.quantize_last = first_last;
    cfg.seed = seed;
    cfg.epochs = 10;
    cfg.lr = 0.002;
    cfg
}

const SEEDS: [u64; 3] = [1, 2, 3];
const DESK_CELLS: [(u32, u32, u32, bool); 4] =
    [(32, 32, 32, false), (1, 2, 4, false), (1, 1, 2, false), (1, 2, 4, true)];

/// Final accuracies indexed `[seed][cell]`.
fn desk_runs() -> (Vec<[f64; 4]>, f64) {
    let base = RunConfig::default();
    let (train, test) = load_dataset(&base.data, None).unwrap();
    let start = Instant::now();
    let jobs: Vec<(usize, usize)> = (0..SEEDS.len()).flat_map(|s| (0..4).map(move |c| (s, c))).collect();
    let accs: Vec<f64> = jobs
        .par_iter()
        .map(|&(s, c)| {
            let (w, a, g, fl) = DESK_CELLS[c];
            let cfg = desk_config(w, a, g, SEEDS[s], fl);
            run_training(&cfg, &train, &test, None).unwrap().final_accuracy
        })
        .collect();
    let mut out = vec![[0.0; 4]; SEEDS.len()];
    for (&(s, c), &acc) in jobs.iter().zip(&accs) {
        out[s][c] = acc;
    }
    (out, start.elapsed().as_secs_f64() / jobs.len() as f64)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn training_parity(runs: &[[f64; 4]], secs_per_run: f64) -> Outcome {
    let per_seed: Vec<String> = SEEDS
        .iter()
        .zip(runs)
        .map(|(s, r)| format!("seed {s}: fp {:.3} (1,2,4) {:.3} (1,1,2) {:.3}", r[0], r[1], r[2]))
        .collect();
    let parity = runs.iter().all(|r| r[0] - r[1] <= 0.05);
    let (m124, m112) = (mean(runs.iter().map(|r| r[1])), mean(runs.iter().map(|r| r[2])));
    outcome(
        parity && m112 < m124 && secs_per_run <= 600.0,
        format!(
            "{}; mean (1,2,4) {m124:.3} vs (1,1,2) {m112:.3}; {secs_per_run:.0} s per run",
            per_seed.join("; ")
        ),
    )
}

fn first_last_policy(runs: &[[f64; 4]]) -> Outcome {
    let spec: ModelSpec = RunConfig::default().model;
    let shapes = |first: bool, last: bool| {
        let q = QConfig::new(1, 2, 4).unwrap().with_first(first).with_last(last);
        let net = Network::new(&spec, q, [1, 12, 12], 10, 0).unwrap();
        let x = Tensor::full(&[3, 1, 12, 12], 0.5);
        let cache = net.forward(&x, Mode::Train).unwrap();
        let mut s: Vec<(String, Vec<usize>)> = net.params().iter().map(|(n, t)| (n.clone(), t.shape().to_vec())).collect();
        s.extend(cache.activations.iter().map(|(n, t)| (n.clone(), t.shape().to_vec())));
        s.push(("logits".into(), cache.logits.shape().to_vec()));
        s
    };
    let reference = shapes(false, false);
    let shapes_same = [(true, false), (false, true), (true, true)].iter().all(|&(f, l)| shapes(f, l) == reference);

    let q = QConfig::new(1, 2, 4).unwrap();
    let net = Network::new(&spec, q, [1, 12, 12], 10, 0).unwrap();
    let nodes = net.nodes();
    let fc = nodes.iter().position(|n| matches!(n.kind, NodeKind::Fc { .. })).unwrap();
    let last_grad_quantized = matches!(
        nodes.get(fc + 1).map(|n| &n.kind),
        Some(NodeKind::GradQuant { precision: Precision::Bits(b), .. }) if b.get() == 4
    );

    let drops: Vec<f64> = runs.iter().map(|r| r[1] - r[3]).collect();
    let mean_drop = mean(drops.iter().copied());
    outcome(
        shapes_same && last_grad_quantized && mean_drop <= 0.03,
        format!(
            "shapes unchanged: {shapes_same}; fc gradients quantized with quantize_last off: {last_grad_quantized}; \
             (1,2,4) -> +first+last drop per seed {}, mean {:.3}",
            drops.iter().map(|d| format!("{d:.3}")).collect::<Vec<_>>().join("/"),
            mean_drop
        ),
    )
}

fn work_scaling() -> Outcome {
    let size = BenchSize { rows: 8, cols: 6, len: 300 };
    let rows = run_bench(&[size], &[1, 2, 4], 1, 10).unwrap();
    let bench_exact = rows.len() == 9
        && rows.iter().all(|r| {
            r.plane_pairs == (size.rows * size.cols) as u64 * (r.m * r.k) as u64 && r.work_ratio == (r.m * r.k) as f64
        });
    let counter = PlanePairCounter::new();
    let mut dot_exact = true;
    for m in [1, 2, 4] {
        for k in [1, 2, 4] {
            counter.reset();
            let x = decompose_planes(&vec![(1 << m) - 1; 100], m).unwrap();
            let y = decompose_planes(&vec![(1 << k) - 1; 100], k).unwrap();
            fixed_point_dot_counted(&x, &y, Some(&counter)).unwrap();
            dot_exact &= counter.get() == (m * k) as u64;
        }
    }
    let ratios: Vec<String> = rows.iter().map(|r| format!("{}x{}:{}", r.m, r.k, r.work_ratio)).collect();
    outcome(bench_exact && dot_exact, format!("work ratios {}", ratios.join(" ")))
}

fn main() -> ExitCode {
    let mut results: Vec<(&str, Outcome)> = vec![
        ("AC1 kernel-oracle equivalence", kernel_oracle()),
        ("AC2 popcount/xnor binary dots", binary_dots()),
        ("AC3 quantizer grid and error bound", quantizer_grid()),
        ("AC4 dithering unbiasedness", dither_unbiased()),
        ("AC5 max commutation", max_commutation()),
        ("AC6 fusion equivalence", fusion_equivalence()),
        ("AC7 full-precision gradients", finite_differences()),
    ];
    let (runs, secs) = desk_runs();
    results.push(("AC8 desk-scale training parity", training_parity(&runs, secs)));
    results.push(("AC9 first/last layer policy", first_last_policy(&runs)));
    results.push(("AC10 plane-pair work scaling", work_scaling()));

    let mut all = true;
    for (name, o) in &results {
        println!("{} {name}: {}", if o.pass { "PASS" } else { "FAIL" }, o.detail);
        all &= o.pass;
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
