//! Acceptance suite: one test per criterion, each printing a pass/fail line
//! (run with `cargo test --test acceptance -- --nocapture` to see them all).
//!
//! The two training criteria regenerate their datasets and train from
//! scratch at fixed seeds; on one CPU core the whole suite takes roughly
//! half an hour, dominated by those runs.

use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use ssattn::commands::{cmd_train, evaluate_pairs};
use ssattn::config::RunConfig;
use ssattn::dataset::write_dataset;
use ssattn_core::attention::{
    lr_modulation, transform_coords, window_merge, window_partition, AttentionBlockConfig,
    IrmAblation, OffsetHead, WindowAttention,
};
use ssattn_core::metrics::{psnr, rgb_to_y, ssim};
use ssattn_core::model::{ModelConfig, TrainConfig};
use ssattn_core::params::ParamStore;
use ssattn_core::raingen::{compose, generate_scene, GenConfig, RainMode};
use ssattn_core::rng::{rng_from_seed, uniform};
use ssattn_core::tensor::{Tape, Tensor};
use ssattn_core::uncertainty::{
    constraint_matrix, constraint_ones_count, correlation_map, modulation_matrix,
    pivoted_cholesky_psd, topk_row_mask, udl_loss, UncertaintyMap,
};
use ssattn_core::verify::gradcheck_suite;

/// Serializes the two training criteria so their wall-clock measurements
/// never share the core.
static TRAIN_GATE: Mutex<()> = Mutex::new(());

/// Improvement delta (dB) of the first clean criterion-7 run (test psnr
/// 32.16 dB vs baseline 23.45 dB); the assert is `min(2.0, 0.9 * recorded)`
/// per the regression-fence rule.
const RECORDED_DELTA_DB: f64 = 8.71;

struct TempDir(PathBuf);

impl TempDir {
    fn new(tag: &str) -> TempDir {
        let path = std::env::temp_dir().join(format!(
            "ssattn-acc-{tag}-{}",
            std::process::id()
        ));
        std::fs::remove_dir_all(&path).ok();
        std::fs::create_dir_all(&path).unwrap();
        TempDir(path)
    }

    fn path(&self) -> &Path {
        &self.0
    }
}

impl Drop for TempDir {
    fn drop(&mut self) {
        std::fs::remove_dir_all(&self.0).ok();
    }
}

fn rand_tensor(shape: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    Tensor::from_fn(shape, |_| uniform(&mut rng, lo, hi))
}

// ---------------------------------------------------------------------------
// criterion 1: gradient suite
// ---------------------------------------------------------------------------

#[test]
fn c01_gradient_suite() {
    let t0 = Instant::now();
    let reports = gradcheck_suite(None, 1.0).unwrap();
    let elapsed = t0.elapsed().as_secs_f64();
    let worst = reports
        .iter()
        .max_by(|a, b| a.max_rel_error.partial_cmp(&b.max_rel_error).unwrap())
        .unwrap();
    assert!(
        reports.iter().any(|r| r.name == "irm_block"),
        "suite must include the full block"
    );
    for r in &reports {
        assert!(
            r.passed && r.max_rel_error < 1e-4,
            "criterion 1 FAIL: {} error {}",
            r.name,
            r.max_rel_error
        );
    }
    assert!(elapsed < 120.0, "criterion 1 FAIL: suite took {elapsed:.1} s");
    println!(
        "criterion 1 PASS: {} ops, worst {} = {:.3e} (< 1e-4), {:.1} s (< 120 s)",
        reports.len(),
        worst.name,
        worst.max_rel_error,
        elapsed
    );
}

// ---------------------------------------------------------------------------
// criterion 2: reduction equivalences against an independent oracle
// ---------------------------------------------------------------------------

/// Plain-loop windowed attention oracle sharing the block's weights.
fn window_attention_oracle(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    win: usize,
    heads: usize,
    store: &ParamStore,
    prefix: &str,
) -> Vec<f64> {
    let get = |name: &str| {
        store
            .value(store.lookup(&format!("{prefix}.{name}")).expect("param"))
            .data()
            .to_vec()
    };
    let (wq, bq) = (get("wq"), get("bq"));
    let (wk, bk) = (get("wk"), get("bk"));
    let (wv, bv) = (get("wv"), get("bv"));
    let (wo, bo) = (get("wo"), get("bo"));
    let table = get("pos_bias");

    let d = c / heads;
    let n = win * win;
    let span = 2 * win - 1;
    let (mh, mw) = (h / win, w / win);
    let mut out = vec![0.0; c * h * w];
    for py in 0..mh {
        for px in 0..mw {
            let mut tok = vec![0.0; n * c];
            for t in 0..n {
                let (r, q) = (t / win, t % win);
                for ch in 0..c {
                    tok[t * c + ch] = x[ch * h * w + (py * win + r) * w + (px * win + q)];
                }
            }
            let project = |wm: &[f64], bm: &[f64]| {
                let mut p = vec![0.0; n * c];
                for t in 0..n {
                    for j in 0..c {
                        let mut acc = 0.0;
                        for ch in 0..c {
                            acc += tok[t * c + ch] * wm[ch * c + j];
                        }
                        p[t * c + j] = acc + bm[j];
                    }
                }
                p
            };
            let q = project(&wq, &bq);
            let k = project(&wk, &bk);
            let v = project(&wv, &bv);
            let mut merged = vec![0.0; n * c];
            for head in 0..heads {
                for i in 0..n {
                    let mut logits = vec![0.0; n];
                    for j in 0..n {
                        let mut acc = 0.0;
                        for cc in head * d..(head + 1) * d {
                            acc += q[i * c + cc] * k[j * c + cc];
                        }
                        let dr = (i / win) as isize - (j / win) as isize + win as isize - 1;
                        let dc = (i % win) as isize - (j % win) as isize + win as isize - 1;
                        logits[j] = acc / (d as f64).sqrt()
                            + table[(dr as usize * span + dc as usize) * heads + head];
                    }
                    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let mut e: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
                    let s: f64 = e.iter().sum();
                    e.iter_mut().for_each(|v| *v /= s);
                    for jj in 0..d {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += e[j] * v[j * c + head * d + jj];
                        }
                        merged[i * c + head * d + jj] = acc;
                    }
                }
            }
            for t in 0..n {
                let (r, qq) = (t / win, t % win);
                for j in 0..c {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        acc += merged[t * c + ch] * wo[ch * c + j];
                    }
                    out[j * h * w + (py * win + r) * w + (px * win + qq)] = acc + bo[j];
                }
            }
        }
    }
    out
}

fn attention_fixture(seed: u64, cfg: AttentionBlockConfig) -> (ParamStore, WindowAttention) {
    let mut rng = rng_from_seed(seed);
    let mut store = ParamStore::new();
    let attn = WindowAttention::new(&mut store, "t", cfg, &mut rng).unwrap();
    let c = cfg.channels;
    let mut rng2 = rng_from_seed(seed + 1000);
    store
        .load("t.wo", (0..c * c).map(|_| uniform(&mut rng2, -0.3, 0.3)).collect())
        .unwrap();
    store
        .load("t.bo", (0..c).map(|_| uniform(&mut rng2, -0.1, 0.1)).collect())
        .unwrap();
    (store, attn)
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn c02_reduction_equivalences() {
    let mut worst: f64 = 0.0;
    for seed in 0..10u64 {
        let base = AttentionBlockConfig::new(8, 2, 4);
        let x = rand_tensor(vec![8, 8, 8], seed + 500, -1.0, 1.0);

        // SSA at identity sampling
        {
            let (mut store, attn) = attention_fixture(seed, base);
            let mut rng = rng_from_seed(seed + 77);
            let head = OffsetHead::new(&mut store, "t", 8, 2, 4, &mut rng);
            let mut tape = Tape::new();
            let field = head.forward(&mut tape, &store, &x, None).unwrap();
            let coords = transform_coords(&mut tape, &field, 8, 8).unwrap();
            let got = attn.ssa_forward(&mut tape, &store, &x, &coords).unwrap();
            let want = window_attention_oracle(x.data(), 8, 8, 8, 4, 2, &store, "t");
            worst = worst.max(max_abs_diff(got.data(), &want));
        }

        // LR reductions: alpha = 0, k = 1, constant uncertainty
        let sigma = rand_tensor(vec![1, 8, 8], seed + 600, 0.1, 2.0);
        let u = UncertaintyMap::from_log_sigma(&Tensor::from_fn(vec![1, 8, 8], |i| {
            sigma.data()[i].ln()
        }))
        .unwrap();
        let mut alpha0 = base;
        alpha0.alpha = 0.0;
        let mut k1 = base;
        k1.k_fraction = 1.0;
        let flat = UncertaintyMap::neutral(vec![1, 8, 8]);
        for (cfg, u_used) in [(alpha0, &u), (k1, &u), (base, &flat)] {
            let (store, attn) = attention_fixture(seed, cfg);
            let want = window_attention_oracle(x.data(), 8, 8, 8, 4, 2, &store, "t");
            let modulation = lr_modulation(u_used, &cfg, 8, 8, &IrmAblation::default()).unwrap();
            let mut tape = Tape::new();
            let got = attn
                .lr_forward(&mut tape, &store, &x, modulation.as_ref())
                .unwrap();
            worst = worst.max(max_abs_diff(got.data(), &want));
        }
    }
    assert!(worst < 1e-9, "criterion 2 FAIL: max abs diff {worst:.3e}");
    println!("criterion 2 PASS: 10 seeds, max abs diff vs oracle {worst:.3e} (< 1e-9)");
}

// ---------------------------------------------------------------------------
// criterion 3: ranking exactness
// ---------------------------------------------------------------------------

#[test]
fn c03_ranking_exactness() {
    let mut rng = rng_from_seed(31);
    for trial in 0..20 {
        let sigma: Vec<f64> = (0..2 * 6 * 6).map(|_| uniform(&mut rng, 0.01, 5.0)).collect();
        let log_sigma = Tensor::new(vec![2, 6, 6], sigma.iter().map(|v| v.ln()).collect()).unwrap();
        let u = UncertaintyMap::from_log_sigma(&log_sigma).unwrap();
        for &gamma in &[0.5, 0.8, 0.95] {
            let c = constraint_matrix(&u, gamma, 0.6).unwrap();
            let expect = constraint_ones_count(gamma, 36);
            for ch in 0..2 {
                let ones = c.values.data()[ch * 36..(ch + 1) * 36]
                    .iter()
                    .filter(|&&v| v == 1.0)
                    .count();
                assert_eq!(
                    ones, expect,
                    "criterion 3 FAIL: trial {trial} gamma {gamma} channel {ch}"
                );
            }
        }

        let patch = Tensor::from_fn(vec![2, 4, 4], |_| uniform(&mut rng, 0.1, 2.0));
        let cr = correlation_map(&patch).unwrap();
        for &k in &[0.3, 0.8, 1.0] {
            let mask = topk_row_mask(&cr, k).unwrap();
            let keep = ((k * 16.0).ceil() as usize).max(1);
            for row in 0..16 {
                let s: f64 = mask.data()[row * 16..(row + 1) * 16].iter().sum();
                assert_eq!(s as usize, keep, "criterion 3 FAIL: top-k row sum");
            }
            let m = modulation_matrix(&mask, 0.2).unwrap();
            assert!(
                m.data().iter().all(|&v| v == 1.0 || v == 1.2),
                "criterion 3 FAIL: modulation two-point set"
            );
        }
    }
    println!("criterion 3 PASS: quantile counts, top-k row sums, modulation values all exact");
}

// ---------------------------------------------------------------------------
// criterion 4: structural invariants
// ---------------------------------------------------------------------------

#[test]
fn c04_structure() {
    // window roundtrip, bitwise
    let mut rng = rng_from_seed(41);
    for &(h, w, win) in &[(8, 8, 4), (12, 8, 4), (6, 6, 2)] {
        let x = Tensor::from_fn(vec![3, h, w], |_| uniform(&mut rng, -2.0, 2.0));
        let mut tape = Tape::new();
        let parts = window_partition(&mut tape, &x, win).unwrap();
        let back = window_merge(&mut tape, &parts, h, w).unwrap();
        for (a, b) in back.data().iter().zip(x.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "criterion 4 FAIL: roundtrip");
        }
    }

    // correlation maps: symmetric and PSD
    for seed in 0..10u64 {
        let patch = rand_tensor(vec![3, 4, 4], seed + 900, -2.0, 2.0);
        let cr = correlation_map(&patch).unwrap();
        let n = cr.tokens;
        let v = cr.values.data();
        for i in 0..n {
            for j in 0..n {
                assert!(
                    (v[i * n + j] - v[j * n + i]).abs() < 1e-12,
                    "criterion 4 FAIL: symmetry"
                );
            }
        }
        assert!(
            pivoted_cholesky_psd(v, n, 1e-9),
            "criterion 4 FAIL: correlation map not PSD"
        );
    }

    // softmax rows
    for seed in 0..10u64 {
        let x = rand_tensor(vec![5, 9], seed, -40.0, 40.0);
        let mut tape = Tape::new();
        let y = tape.softmax(&x, 1).unwrap();
        for r in 0..5 {
            let s: f64 = y.data()[r * 9..(r + 1) * 9].iter().sum();
            assert!(
                (s - 1.0).abs() <= 1e-12,
                "criterion 4 FAIL: softmax row sum {s}"
            );
        }
    }
    println!("criterion 4 PASS: window roundtrip bitwise, correlation symmetric+PSD, softmax rows sum to 1");
}

// ---------------------------------------------------------------------------
// criterion 5: compositing identity
// ---------------------------------------------------------------------------

#[test]
fn c05_imaging_identity() {
    for mode in [RainMode::Rs, RainMode::Rd, RainMode::Rds] {
        for seed in 0..5u64 {
            let cfg = GenConfig {
                mode,
                width: 48,
                height: 48,
                seed,
                ..GenConfig::default()
            };
            for index in 0..3u64 {
                let scene = generate_scene(&cfg, index).unwrap();
                let recomposed = compose(
                    &scene.background,
                    &scene.streaks,
                    &scene.drop_mask,
                    &scene.drop_layer,
                    scene.eta,
                )
                .unwrap();
                let max = max_abs_diff(scene.degraded.data(), recomposed.data());
                assert_eq!(max, 0.0, "criterion 5 FAIL: identity violated by {max}");
            }
        }
    }
    println!("criterion 5 PASS: degraded == (1-M)(B+S) + eta*D exactly, pre-clamp, all modes");
}

// ---------------------------------------------------------------------------
// criterion 6: uncertainty-loss analytics
// ---------------------------------------------------------------------------

#[test]
fn c06_udl_analytics() {
    // zero residual at sigma = 1 gives exactly zero loss
    let mut tape = Tape::new();
    let gt = Tensor::full(vec![3, 4, 4], 0.3);
    let log_sigma = Tensor::zeros(vec![1, 4, 4]);
    let loss = udl_loss(&mut tape, &gt, &gt, &log_sigma).unwrap();
    assert!(
        loss.item().unwrap().abs() < 1e-15,
        "criterion 6 FAIL: nonzero loss at zero residual"
    );

    // golden-section search over sigma at fixed residual
    for &r in &[0.2, 1.0, 3.7] {
        let f = |sigma: f64| r / sigma + sigma.ln();
        let (mut lo, mut hi) = (1e-3, 50.0);
        let phi = (5.0f64.sqrt() - 1.0) / 2.0;
        while hi - lo > 1e-7 {
            let a = hi - phi * (hi - lo);
            let b = lo + phi * (hi - lo);
            if f(a) < f(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        let minimizer = 0.5 * (lo + hi);
        assert!(
            (minimizer - r).abs() < 1e-3,
            "criterion 6 FAIL: sigma* = {minimizer}, residual {r}"
        );
    }
    println!("criterion 6 PASS: loss 0 at zero residual; sigma* = r within 1e-3 (golden section)");
}

// ---------------------------------------------------------------------------
// criterion 7: desk-scale training
// ---------------------------------------------------------------------------

#[test]
fn c07_desk_scale_training() {
    let _gate = TRAIN_GATE.lock().unwrap_or_else(|e| e.into_inner());
    let tmp = TempDir::new("c07");
    let t0 = Instant::now();

    let train_gen = GenConfig {
        mode: RainMode::Rds,
        seed: 1000,
        ..GenConfig::default()
    };
    write_dataset(&tmp.path().join("train"), &train_gen, 200).unwrap();
    let test_gen = GenConfig {
        mode: RainMode::Rds,
        seed: 1001,
        ..GenConfig::default()
    };
    write_dataset(&tmp.path().join("test"), &test_gen, 20).unwrap();

    let mut cfg = RunConfig::default();
    cfg.seed = Some(42);
    cfg.out_dir = tmp.path().join("run");
    cfg.train.data_dir = tmp.path().join("train").join("rds");
    cfg.train.test_data_dir = Some(tmp.path().join("test").join("rds"));
    // ModelConfig::default() and TrainConfig::default() are the toy config:
    // 3 levels, 64x64 crops, 2000 steps
    let summary = cmd_train(&cfg).unwrap();
    let elapsed_min = t0.elapsed().as_secs_f64() / 60.0;

    let report = summary.eval.expect("eval ran after training");
    let delta = report.mean_psnr_db - report.mean_baseline_psnr_db;
    let fence = (0.9 * RECORDED_DELTA_DB).min(2.0);
    assert!(
        delta >= fence,
        "criterion 7 FAIL: delta {delta:.2} dB below fence {fence:.2} dB \
         (psnr {:.2}, baseline {:.2})",
        report.mean_psnr_db,
        report.mean_baseline_psnr_db
    );
    assert!(
        elapsed_min < 30.0,
        "criterion 7 FAIL: run took {elapsed_min:.1} min"
    );
    println!(
        "criterion 7 PASS: test psnr {:.2} dB vs baseline {:.2} dB (delta {:.2} >= {:.2}), {:.1} min (< 30)",
        report.mean_psnr_db, report.mean_baseline_psnr_db, delta, fence, elapsed_min
    );
}

// ---------------------------------------------------------------------------
// criterion 8: ablation direction (toy table)
// ---------------------------------------------------------------------------

#[test]
fn c08_ablation_direction() {
    let _gate = TRAIN_GATE.lock().unwrap_or_else(|e| e.into_inner());
    let tmp = TempDir::new("c08");

    let mk_gen = |seed| GenConfig {
        mode: RainMode::Rds,
        width: 48,
        height: 48,
        seed,
        ..GenConfig::default()
    };
    write_dataset(&tmp.path().join("train"), &mk_gen(400), 40).unwrap();
    write_dataset(&tmp.path().join("test"), &mk_gen(401), 10).unwrap();

    let model = ModelConfig {
        channels: vec![6, 12, 24],
        ..ModelConfig::default()
    };
    let train = TrainConfig {
        steps: 2000,
        crop: 32,
        ..TrainConfig::default()
    };

    let arms = [
        ("full", ""),
        ("ssa-no-ud", "no-ud"),
        ("ssa-no-rs", "ssa-no-rs"),
        ("lr-no-ud", "lr-no-ud"),
        ("lr-no-rs", "no-rs"),
    ];
    let mut rows = Vec::new();
    for (name, ablate) in arms {
        let mut cfg = RunConfig::default();
        cfg.seed = Some(55);
        cfg.out_dir = tmp.path().join(name);
        cfg.model = model.clone();
        cfg.train.params = train.clone();
        cfg.train.data_dir = tmp.path().join("train").join("rds");
        cfg.train.test_data_dir = Some(tmp.path().join("test").join("rds"));
        if !ablate.is_empty() {
            cfg.train.ablate = vec![ablate.to_string()];
        }
        let summary = cmd_train(&cfg).unwrap();
        let report = summary.eval.expect("eval ran");
        rows.push((name, report.mean_psnr_db, report.mean_ssim));
    }

    let mut table = String::from("arm,psnr_db,ssim\n");
    println!("criterion 8 toy ablation table (seed 55):");
    for (name, p, s) in &rows {
        println!("  {name:<12} psnr {p:.3} dB  ssim {s:.4}");
        table.push_str(&format!("{name},{p},{s}\n"));
    }
    let table_path = std::env::temp_dir().join("ssattn-ablation-table.csv");
    std::fs::write(&table_path, table).unwrap();

    let full = rows[0].1;
    for (name, p, _) in &rows[1..] {
        assert!(
            full >= p - 0.1,
            "criterion 8 FAIL: full {full:.3} dB below arm {name} {p:.3} dB - 0.1"
        );
    }
    println!(
        "criterion 8 PASS: full {:.3} dB >= every arm - 0.1 dB; table at {}",
        full,
        table_path.display()
    );
}

// ---------------------------------------------------------------------------
// criterion 9: metric oracles
// ---------------------------------------------------------------------------

fn psnr_oracle(a: &[f64], b: &[f64]) -> f64 {
    // reverse-order accumulation: independent of the implementation path
    let mut mse = 0.0;
    for i in (0..a.len()).rev() {
        let d = a[i] - b[i];
        mse += d * d;
    }
    mse /= a.len() as f64;
    if mse == 0.0 {
        return 100.0;
    }
    (10.0 * (1.0 / mse).log10()).min(100.0)
}

/// Direct per-window SSIM: full 2-d Gaussian weights, no separable passes.
fn ssim_oracle(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let win = 11usize;
    let sigma = 1.5f64;
    let c = (win / 2) as f64;
    let mut k1d = [0.0f64; 11];
    let mut sum = 0.0;
    for (i, v) in k1d.iter_mut().enumerate() {
        *v = (-(i as f64 - c) * (i as f64 - c) / (2.0 * sigma * sigma)).exp();
        sum += *v;
    }
    k1d.iter_mut().for_each(|v| *v /= sum);
    let c1 = 0.01f64 * 0.01;
    let c2 = 0.03f64 * 0.03;

    let (oh, ow) = (h - win + 1, w - win + 1);
    let mut acc = 0.0;
    for y in 0..oh {
        for x in 0..ow {
            let (mut mx, mut my, mut mxx, mut myy, mut mxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for dy in 0..win {
                for dx in 0..win {
                    let wgt = k1d[dy] * k1d[dx];
                    let av = a[(y + dy) * w + x + dx];
                    let bv = b[(y + dy) * w + x + dx];
                    mx += wgt * av;
                    my += wgt * bv;
                    mxx += wgt * av * av;
                    myy += wgt * bv * bv;
                    mxy += wgt * av * bv;
                }
            }
            let vx = mxx - mx * mx;
            let vy = myy - my * my;
            let cov = mxy - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
    }
    acc / (oh * ow) as f64
}

#[test]
fn c09_metric_oracles() {
    let mut worst_psnr: f64 = 0.0;
    let mut worst_ssim: f64 = 0.0;
    for seed in 0..5u64 {
        // fixed pairs: a synthetic scene and its clean background on Y
        let cfg = GenConfig {
            width: 48,
            height: 48,
            seed: 5000 + seed,
            ..GenConfig::default()
        };
        let scene = generate_scene(&cfg, seed).unwrap();
        let a = rgb_to_y(&ssattn_core::raingen::clamp01(&scene.degraded)).unwrap();
        let b = rgb_to_y(&scene.background).unwrap();

        let p = psnr(&a, &b, 1.0).unwrap();
        let po = psnr_oracle(a.data(), b.data());
        worst_psnr = worst_psnr.max((p - po).abs());

        let s = ssim(&a, &b).unwrap();
        let so = ssim_oracle(a.data(), b.data(), 48, 48);
        worst_ssim = worst_ssim.max((s - so).abs());

        assert!(
            (ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12,
            "criterion 9 FAIL: ssim(x,x) != 1"
        );
    }
    assert!(worst_psnr < 1e-9, "criterion 9 FAIL: psnr diff {worst_psnr:.2e}");
    assert!(worst_ssim < 1e-9, "criterion 9 FAIL: ssim diff {worst_ssim:.2e}");
    println!(
        "criterion 9 PASS: 5 pairs, psnr diff {worst_psnr:.2e}, ssim diff {worst_ssim:.2e} (< 1e-9); ssim(x,x)=1"
    );
}

// ---------------------------------------------------------------------------
// criterion 10: determinism of every subcommand
// ---------------------------------------------------------------------------

#[test]
fn c10_determinism() {
    let tmp = TempDir::new("c10");

    // gen-data
    let gen = GenConfig {
        width: 32,
        height: 32,
        seed: 77,
        ..GenConfig::default()
    };
    write_dataset(&tmp.path().join("d1"), &gen, 4).unwrap();
    write_dataset(&tmp.path().join("d2"), &gen, 4).unwrap();
    let read_all = |dir: &Path| {
        let mut files: Vec<_> = std::fs::read_dir(dir)
            .unwrap()
            .map(|e| e.unwrap().path())
            .collect();
        files.sort();
        files
            .iter()
            .map(|p| std::fs::read(p).unwrap())
            .collect::<Vec<_>>()
    };
    assert_eq!(
        read_all(&tmp.path().join("d1").join("rds")),
        read_all(&tmp.path().join("d2").join("rds")),
        "criterion 10 FAIL: gen-data bytes differ"
    );

    // train
    let mut tcfg = RunConfig::default();
    tcfg.seed = Some(9);
    tcfg.train.data_dir = tmp.path().join("d1").join("rds");
    tcfg.train.params = TrainConfig {
        steps: 3,
        crop: 16,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let mut t1 = tcfg.clone();
    t1.out_dir = tmp.path().join("t1");
    let mut t2 = tcfg.clone();
    t2.out_dir = tmp.path().join("t2");
    let s1 = cmd_train(&t1).unwrap();
    let s2 = cmd_train(&t2).unwrap();
    assert_eq!(
        std::fs::read(&s1.csv).unwrap(),
        std::fs::read(&s2.csv).unwrap(),
        "criterion 10 FAIL: train logs differ"
    );
    assert_eq!(
        std::fs::read(&s1.checkpoint).unwrap(),
        std::fs::read(&s2.checkpoint).unwrap(),
        "criterion 10 FAIL: checkpoints differ"
    );

    // eval
    let mut e1 = RunConfig::default();
    e1.seed = Some(9);
    e1.out_dir = tmp.path().join("e1");
    e1.eval.checkpoint = s1.checkpoint.clone();
    e1.eval.data_dir = tmp.path().join("d1").join("rds");
    let mut e2 = e1.clone();
    e2.out_dir = tmp.path().join("e2");
    ssattn::commands::cmd_eval(&e1).unwrap();
    ssattn::commands::cmd_eval(&e2).unwrap();
    assert_eq!(
        std::fs::read(tmp.path().join("e1").join("report.json")).unwrap(),
        std::fs::read(tmp.path().join("e2").join("report.json")).unwrap(),
        "criterion 10 FAIL: eval reports differ"
    );

    // visualize
    let mut v1 = RunConfig::default();
    v1.seed = Some(9);
    v1.out_dir = tmp.path().join("v1");
    v1.visualize.checkpoint = s1.checkpoint.clone();
    v1.visualize.image = tmp.path().join("d1").join("rds").join("0_rain.png");
    v1.visualize.stage = 2;
    v1.visualize.window = 0;
    let mut v2 = v1.clone();
    v2.out_dir = tmp.path().join("v2");
    ssattn::commands::cmd_visualize(&v1).unwrap();
    ssattn::commands::cmd_visualize(&v2).unwrap();
    for name in [
        "sampling_overlay.png",
        "uncertainty_stage0.png",
        "uncertainty_stage1.png",
        "uncertainty_stage2.png",
        "derained.png",
    ] {
        assert_eq!(
            std::fs::read(tmp.path().join("v1").join(name)).unwrap(),
            std::fs::read(tmp.path().join("v2").join(name)).unwrap(),
            "criterion 10 FAIL: {name} differs"
        );
    }
    println!("criterion 10 PASS: gen-data, train, eval, visualize all bytewise reproducible");
}

// ---------------------------------------------------------------------------
// raingen difficulty fence (supports criterion 7's data regime)
// ---------------------------------------------------------------------------

#[test]
fn degraded_psnr_fence_over_100_seeds() {
    let mut total = 0.0;
    for seed in 0..100u64 {
        let cfg = GenConfig {
            seed,
            ..GenConfig::default()
        };
        let scene = generate_scene(&cfg, 0).unwrap();
        let clean = rgb_to_y(&scene.background).unwrap();
        let rain = rgb_to_y(&ssattn_core::raingen::clamp01(&scene.degraded)).unwrap();
        total += psnr(&rain, &clean, 1.0).unwrap();
    }
    let mean = total / 100.0;
    assert!(
        (12.0..=30.0).contains(&mean),
        "degraded-vs-clean psnr {mean:.2} dB outside [12, 30]"
    );
    println!("raingen fence: mean degraded-vs-clean psnr {mean:.2} dB in [12, 30]");
}

#[test]
fn evaluate_pairs_smoke_on_identity_model() {
    // keep the shared eval path covered without touching the train gate
    let mut rng = rng_from_seed(2);
    let mut store = ParamStore::new();
    let cfg = ModelConfig::default();
    let model =
        ssattn_core::model::Model::new(&mut store, &cfg, "ssa".parse().unwrap(), &mut rng).unwrap();
    let scene = generate_scene(
        &GenConfig {
            width: 32,
            height: 32,
            seed: 3,
            ..GenConfig::default()
        },
        0,
    )
    .unwrap();
    let pairs = vec![(
        ssattn_core::raingen::clamp01(&scene.degraded),
        scene.background.clone(),
    )];
    let report = evaluate_pairs(&model, &mut store, &pairs).unwrap();
    assert_eq!(report.per_image[0].psnr_db, report.per_image[0].baseline_psnr_db);
}
