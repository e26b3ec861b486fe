//! Runtime finite-difference verification suite: every differentiable
//! primitive plus one full reconstruction block, checked against central
//! differences at f64.
//!
//! This is the library behind the `gradcheck` command; the same reports are
//! asserted by the acceptance tests.

use std::sync::Arc;

use crate::attention::{AttentionBlockConfig, IrmAblation, IrmBlock, IrmKind, SamplingVariant};
use crate::error::Result;
use crate::params::ParamStore;
use crate::rng::{rng_from_seed, uniform};
use crate::tensor::{central_diff_grad, finite_difference_check, max_rel_error, Tape, Tensor};
use crate::uncertainty::UncertaintyMap;

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_EPSILON: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct OpReport {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl OpReport {
    fn from_error(name: &str, err: f64) -> OpReport {
        OpReport {
            name: name.to_string(),
            max_rel_error: err,
            tolerance: GRADCHECK_TOLERANCE,
            passed: err < GRADCHECK_TOLERANCE,
        }
    }
}

fn rand_tensor(shape: Vec<usize>, seed: u64, lo: f64, hi: f64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    Tensor::from_fn(shape, |_| uniform(&mut rng, lo, hi))
}

/// Coordinates that stay inside the image and away from bilinear cell
/// boundaries, so the piecewise-linear sampler is differentiable at every
/// probe.
fn off_lattice_coords(shape: Vec<usize>, h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = rng_from_seed(seed);
    Tensor::from_fn(shape, |i| {
        let n = if i % 2 == 0 { w } else { h };
        let cell = uniform(&mut rng, 0.0, (n - 1) as f64).floor().min((n - 2) as f64);
        let frac = uniform(&mut rng, 0.25, 0.75);
        2.0 * (cell + frac) / (n - 1) as f64 - 1.0
    })
}

type OpCase = (
    &'static str,
    Tensor,
    Box<dyn Fn(&mut Tape, &Tensor) -> Result<Tensor>>,
);

fn op_cases(seed: u64) -> Vec<OpCase> {
    let pos = rand_tensor(vec![2, 3], seed + 1, 0.3, 2.0);
    let any = rand_tensor(vec![2, 3], seed + 2, -1.5, 1.5);
    let b = rand_tensor(vec![2, 3], seed + 3, 0.5, 1.5);
    let mat_r = rand_tensor(vec![4, 2], seed + 4, -1.0, 1.0);
    let conv_x = rand_tensor(vec![2, 4, 4], seed + 5, -1.0, 1.0);
    let conv_w = rand_tensor(vec![3, 2, 3, 3], seed + 6, -0.5, 0.5);
    let conv_b = rand_tensor(vec![3], seed + 7, -0.2, 0.2);
    let img = rand_tensor(vec![2, 5, 6], seed + 8, -1.0, 1.0);
    let coords = off_lattice_coords(vec![3, 3, 2], 5, 6, seed + 9);

    let quad = |t: &mut Tape, y: &Tensor| -> Result<Tensor> {
        let s = t.mul(y, y)?;
        t.sum_all(&s)
    };

    vec![
        ("add", any.clone(), Box::new({
            let b = b.clone();
            move |t, x| { let y = t.add(x, &b)?; let s = t.mul(&y, &y)?; t.sum_all(&s) }
        })),
        ("sub", any.clone(), Box::new({
            let b = b.clone();
            move |t, x| { let y = t.sub(x, &b)?; let s = t.mul(&y, &y)?; t.sum_all(&s) }
        })),
        ("mul", any.clone(), Box::new({
            let b = b.clone();
            move |t, x| { let y = t.mul(x, &b)?; t.sum_all(&y) }
        })),
        ("div", pos.clone(), Box::new({
            let b = b.clone();
            move |t, x| { let y = t.div(x, &b)?; t.sum_all(&y) }
        })),
        ("scalar_mul", any.clone(), Box::new(move |t, x| {
            let y = t.mul_scalar(x, -1.7);
            quad(t, &y)
        })),
        ("abs", pos.clone(), Box::new(move |t, x| { let y = t.abs(x); quad(t, &y) })),
        ("exp", any.clone(), Box::new(move |t, x| { let y = t.exp(x); t.sum_all(&y) })),
        ("ln", pos.clone(), Box::new(move |t, x| { let y = t.ln(x)?; t.sum_all(&y) })),
        ("sqrt", pos.clone(), Box::new(move |t, x| { let y = t.sqrt(x)?; t.sum_all(&y) })),
        ("relu", pos.clone(), Box::new(move |t, x| { let y = t.relu(x); quad(t, &y) })),
        ("gelu", any.clone(), Box::new(move |t, x| { let y = t.gelu(x); t.sum_all(&y) })),
        ("softmax", any.clone(), Box::new(move |t, x| {
            let y = t.softmax(x, 1)?;
            let w = Tensor::from_fn(vec![2, 3], |i| 0.31 * (i as f64 + 1.0));
            let s = t.mul(&y, &w)?;
            t.sum_all(&s)
        })),
        ("matmul_lhs", rand_tensor(vec![3, 4], seed + 10, -1.0, 1.0), Box::new({
            let mat_r = mat_r.clone();
            move |t, x| { let y = t.matmul(x, &mat_r)?; let s = t.mul(&y, &y)?; t.sum_all(&s) }
        })),
        ("matmul_rhs", mat_r, Box::new({
            let lhs = rand_tensor(vec![3, 4], seed + 11, -1.0, 1.0);
            move |t, x| { let y = t.matmul(&lhs, x)?; let s = t.mul(&y, &y)?; t.sum_all(&s) }
        })),
        ("conv2d_input", conv_x.clone(), Box::new({
            let (w, bb) = (conv_w.clone(), conv_b.clone());
            move |t, x| { let y = t.conv2d(x, &w, &bb)?; let s = t.mul(&y, &y)?; t.sum_all(&s) }
        })),
        ("conv2d_weight", conv_w.clone(), Box::new({
            let (xx, bb) = (conv_x.clone(), conv_b.clone());
            move |t, w| { let y = t.conv2d(&xx, w, &bb)?; let s = t.mul(&y, &y)?; t.sum_all(&s) }
        })),
        ("conv2d_bias", conv_b, Box::new({
            let (xx, ww) = (conv_x.clone(), conv_w);
            move |t, b| { let y = t.conv2d(&xx, &ww, b)?; let s = t.mul(&y, &y)?; t.sum_all(&s) }
        })),
        ("global_avgpool", conv_x, Box::new(move |t, x| {
            let y = t.global_avgpool(x)?;
            quad(t, &y)
        })),
        ("grid_sample_image", img.clone(), Box::new({
            let coords = coords.clone();
            move |t, x| { let y = t.grid_sample(x, &coords)?; let s = t.mul(&y, &y)?; t.sum_all(&s) }
        })),
        ("grid_sample_coords", coords, Box::new({
            move |t, c| { let y = t.grid_sample(&img, c)?; let s = t.mul(&y, &y)?; t.sum_all(&s) }
        })),
        ("gather", rand_tensor(vec![3, 4], seed + 12, -1.0, 1.0), Box::new(move |t, x| {
            let map = Arc::new(vec![0usize, 5, 5, 11, 3, 2]);
            let y = t.gather(x, map, vec![6])?;
            quad(t, &y)
        })),
        ("concat", rand_tensor(vec![3, 4], seed + 13, -1.0, 1.0), Box::new({
            let other = rand_tensor(vec![2, 4], seed + 14, -1.0, 1.0);
            move |t, x| { let y = t.concat0(x, &other)?; let s = t.mul(&y, &y)?; t.sum_all(&s) }
        })),
        ("reshape_swap", rand_tensor(vec![3, 4], seed + 15, -1.0, 1.0), Box::new(move |t, x| {
            let r = t.reshape(x, vec![4, 3])?;
            let sw = t.swap_last2(&r)?;
            quad(t, &sw)
        })),
        ("mean", any, Box::new(move |t, x| t.mean_all(x))),
    ]
}

/// Finite-difference check of one full reconstruction block (input plus
/// every parameter), with sampling coordinates held off cell boundaries.
fn irm_block_report(seed: u64, fault_scale: f64) -> Result<OpReport> {
    let mut rng = rng_from_seed(seed);
    let mut store = ParamStore::new();
    let cfg = AttentionBlockConfig::new(4, 2, 2);
    let block = IrmBlock::new(&mut store, "g", cfg, IrmKind::Sampling, SamplingVariant::Ssa, &mut rng)?;

    // leave the degenerate zero/identity initialization
    let mut rng2 = rng_from_seed(seed + 1);
    let names: Vec<String> = store.iter().map(|(_, n, _)| n.to_string()).collect();
    for name in &names {
        let id = store.lookup(name).unwrap();
        let n = store.value(id).numel();
        if name.ends_with("offset_head_b") {
            let data = (0..n)
                .map(|i| {
                    if i % 4 < 2 {
                        1.0 + uniform(&mut rng2, -0.03, 0.03)
                    } else {
                        uniform(&mut rng2, 0.2, 0.45) * if (i / 2) % 2 == 0 { 1.0 } else { -1.0 }
                    }
                })
                .collect();
            store.load(name, data)?;
        } else if store.value(id).data().iter().all(|&v| v == 0.0) {
            let data = (0..n).map(|_| uniform(&mut rng2, -0.2, 0.2)).collect();
            store.load(name, data)?;
        }
    }

    let u = UncertaintyMap::from_log_sigma(&Tensor::from_fn(vec![1, 4, 4], |i| {
        -0.5 + 0.09 * i as f64
    }))?;
    let x = rand_tensor(vec![4, 4, 4], seed + 2, -0.8, 0.8);
    let probe = rand_tensor(vec![4, 4, 4], seed + 3, -1.0, 1.0);
    let abl = IrmAblation::default();

    let loss_of = |store: &ParamStore, x: &Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let out = block.forward(&mut tape, store, x, &u, &abl)?;
        let weighted = tape.mul(&out, &probe)?;
        tape.sum_all(&weighted)?.item()
    };

    let mut worst = 0.0f64;

    // input path
    {
        let mut tape = Tape::new();
        let leaf = tape.leaf(&x);
        let out = block.forward(&mut tape, &store, &leaf, &u, &abl)?;
        let weighted = tape.mul(&out, &probe)?;
        let loss = tape.sum_all(&weighted)?;
        let grads = tape.backward(&loss)?;
        let analytic: Vec<f64> = grads
            .of(&leaf)
            .map(|g| g.iter().map(|v| v * fault_scale).collect())
            .unwrap_or_default();
        let numeric = central_diff_grad(x.data(), GRADCHECK_EPSILON, |p| {
            loss_of(&store, &Tensor::new(vec![4, 4, 4], p.to_vec())?)
        })?;
        worst = worst.max(max_rel_error(&analytic, &numeric));
    }

    // every parameter
    for name in names {
        let id = store.lookup(&name).unwrap();
        let current = store.value(id).data().to_vec();
        let analytic = {
            let mut tape = Tape::new();
            let out = block.forward(&mut tape, &store, &x, &u, &abl)?;
            let weighted = tape.mul(&out, &probe)?;
            let loss = tape.sum_all(&weighted)?;
            let grads = tape.backward(&loss)?;
            let node = tape
                .param_nodes()
                .iter()
                .find(|(slot, _)| *slot == id.0)
                .map(|(_, n)| *n);
            node.and_then(|n| grads.node(n).map(|g| g.to_vec()))
                .unwrap_or_else(|| vec![0.0; current.len()])
        };
        let analytic: Vec<f64> = analytic.iter().map(|v| v * fault_scale).collect();
        let mut store_mut = store;
        let numeric = central_diff_grad(&current, GRADCHECK_EPSILON, |p| {
            store_mut.load(&name, p.to_vec())?;
            loss_of(&store_mut, &x)
        })?;
        store_mut.load(&name, current)?;
        store = store_mut;
        worst = worst.max(max_rel_error(&analytic, &numeric));
    }
    Ok(OpReport::from_error("irm_block", worst))
}

/// Runs the whole suite; `filter` keeps only ops whose name contains it, and
/// `fault_scale != 1` corrupts the analytic gradients on purpose (negative
/// control for the harness itself).
pub fn gradcheck_suite(filter: Option<&str>, fault_scale: f64) -> Result<Vec<OpReport>> {
    let mut reports = Vec::new();
    for (name, input, f) in op_cases(42) {
        if let Some(pat) = filter {
            if !name.contains(pat) {
                continue;
            }
        }
        let err = if fault_scale == 1.0 {
            finite_difference_check(f.as_ref(), &input, GRADCHECK_EPSILON)?
        } else {
            // corrupt analytically, keep the numeric side honest
            let mut tape = Tape::new();
            let leaf = tape.leaf(&input);
            let y = f(&mut tape, &leaf)?;
            let grads = tape.backward(&y)?;
            let analytic: Vec<f64> = grads
                .of(&leaf)
                .map(|g| g.iter().map(|v| v * fault_scale).collect())
                .unwrap_or_default();
            let shape = input.shape().to_vec();
            let numeric = central_diff_grad(input.data(), GRADCHECK_EPSILON, |p| {
                let mut t = Tape::new();
                f(&mut t, &Tensor::new(shape.clone(), p.to_vec())?)?.item()
            })?;
            max_rel_error(&analytic, &numeric)
        };
        reports.push(OpReport::from_error(name, err));
    }
    if filter.map(|p| "irm_block".contains(p)).unwrap_or(true) {
        reports.push(irm_block_report(77, fault_scale)?);
    }
    Ok(reports)
}
