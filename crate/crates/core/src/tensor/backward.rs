//! Backward formulas, one per [`Op`].
//!
//! `propagate` receives the upstream gradient of a node's output and adds
//! each input's contribution into the gradient table. Inputs without a node
//! id are constants and are skipped.

use crate::error::Result;

use super::ops::{
    broadcast_strides, conv2d_forward, gelu_derivative, zip_broadcast, BilinearPoint,
};
use super::{accumulate, Node, Op, Saved};

type GradTable = Vec<Option<Vec<f64>>>;

fn slot<'a>(grads: &'a mut GradTable, input: &Saved) -> Option<&'a mut Option<Vec<f64>>> {
    input.node.map(move |id| &mut grads[id])
}

/// Adds `g`, reduced from `out_shape` onto the input's own shape, scaled by
/// `sign`.
fn add_reduced(grads: &mut GradTable, input: &Saved, g: &[f64], out_shape: &[usize], sign: f64) {
    let Some(s) = slot(grads, input) else { return };
    let n: usize = input.shape.iter().product();
    accumulate(s, n, |buf| {
        if input.shape == out_shape {
            for (b, &gv) in buf.iter_mut().zip(g) {
                *b += sign * gv;
            }
        } else {
            let si = broadcast_strides(&input.shape, out_shape);
            let zero = vec![0usize; out_shape.len()];
            zip_broadcast(out_shape, &si, &zero, |io, ii, _| {
                buf[ii] += sign * g[io];
            });
        }
    });
}

/// Elementwise product contribution: d(input) += g * f(other values).
fn add_weighted(
    grads: &mut GradTable,
    target: &Saved,
    other: &Saved,
    g: &[f64],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64, // (other_value, target_value) -> weight
) {
    if target.node.is_none() {
        return;
    }
    let st = broadcast_strides(&target.shape, out_shape);
    let so = broadcast_strides(&other.shape, out_shape);
    let n: usize = target.shape.iter().product();
    let td = &target.data;
    let od = &other.data;
    let Some(s) = slot(grads, target) else { return };
    accumulate(s, n, |buf| {
        zip_broadcast(out_shape, &st, &so, |io, it, iother| {
            buf[it] += g[io] * f(od[iother], td[it]);
        });
    });
}

fn add_unary(grads: &mut GradTable, input: &Saved, g: &[f64], f: impl Fn(usize) -> f64) {
    let Some(s) = slot(grads, input) else { return };
    let n = input.data.len();
    accumulate(s, n, |buf| {
        for i in 0..n {
            buf[i] += g[i] * f(i);
        }
    });
}

pub(crate) fn propagate(node: &Node, g: &[f64], grads: &mut GradTable) -> Result<()> {
    let out_shape = &node.out_shape;
    match &node.op {
        Op::Leaf => {}
        Op::Add => {
            add_reduced(grads, &node.inputs[0], g, out_shape, 1.0);
            add_reduced(grads, &node.inputs[1], g, out_shape, 1.0);
        }
        Op::Sub => {
            add_reduced(grads, &node.inputs[0], g, out_shape, 1.0);
            add_reduced(grads, &node.inputs[1], g, out_shape, -1.0);
        }
        Op::Mul => {
            let (a, b) = (&node.inputs[0], &node.inputs[1]);
            add_weighted(grads, a, b, g, out_shape, |bv, _| bv);
            add_weighted(grads, b, a, g, out_shape, |av, _| av);
        }
        Op::Div => {
            let (a, b) = (&node.inputs[0], &node.inputs[1]);
            add_weighted(grads, a, b, g, out_shape, |bv, _| 1.0 / bv);
            // d/db (a/b) = -a / b^2
            add_weighted(grads, b, a, g, out_shape, |av, bv| -av / (bv * bv));
        }
        Op::AddScalar => add_unary(grads, &node.inputs[0], g, |_| 1.0),
        Op::MulScalar(c) => {
            let c = *c;
            add_unary(grads, &node.inputs[0], g, |_| c)
        }
        Op::Abs => {
            let x = &node.inputs[0];
            let xd = x.data.clone();
            add_unary(grads, x, g, |i| {
                if xd[i] > 0.0 {
                    1.0
                } else if xd[i] < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            });
        }
        Op::Exp => {
            let out = node.out_data.clone();
            add_unary(grads, &node.inputs[0], g, |i| out[i]);
        }
        Op::Ln => {
            let x = node.inputs[0].data.clone();
            add_unary(grads, &node.inputs[0], g, |i| 1.0 / x[i]);
        }
        Op::Sqrt => {
            let out = node.out_data.clone();
            add_unary(grads, &node.inputs[0], g, |i| 0.5 / out[i]);
        }
        Op::Relu => {
            let x = node.inputs[0].data.clone();
            add_unary(grads, &node.inputs[0], g, |i| if x[i] > 0.0 { 1.0 } else { 0.0 });
        }
        Op::Gelu => {
            let x = node.inputs[0].data.clone();
            add_unary(grads, &node.inputs[0], g, |i| gelu_derivative(x[i]));
        }
        Op::Matmul => matmul_backward(node, g, grads),
        Op::Softmax { axis } => softmax_backward(node, *axis, g, grads),
        Op::Conv2d => conv2d_backward(node, g, grads),
        Op::AvgPoolAll => {
            let x = &node.inputs[0];
            let nd = x.shape.len();
            let hw = x.shape[nd - 2] * x.shape[nd - 1];
            let inv = 1.0 / hw as f64;
            let Some(s) = slot(grads, x) else {
                return Ok(());
            };
            let n = x.data.len();
            accumulate(s, n, |buf| {
                for (c, &gv) in g.iter().enumerate() {
                    for b in &mut buf[c * hw..(c + 1) * hw] {
                        *b += gv * inv;
                    }
                }
            });
        }
        Op::GridSample => grid_sample_backward(node, g, grads),
        Op::Gather { map } => {
            let x = &node.inputs[0];
            let Some(s) = slot(grads, x) else {
                return Ok(());
            };
            let n = x.data.len();
            accumulate(s, n, |buf| {
                for (i, &src) in map.iter().enumerate() {
                    buf[src] += g[i];
                }
            });
        }
        Op::Concat0 => {
            let (a, b) = (&node.inputs[0], &node.inputs[1]);
            let na = a.data.len();
            if let Some(s) = slot(grads, a) {
                accumulate(s, na, |buf| {
                    for i in 0..na {
                        buf[i] += g[i];
                    }
                });
            }
            let nb = b.data.len();
            if let Some(s) = slot(grads, b) {
                accumulate(s, nb, |buf| {
                    for i in 0..nb {
                        buf[i] += g[na + i];
                    }
                });
            }
        }
        Op::Reshape => add_unary(grads, &node.inputs[0], g, |_| 1.0),
        Op::SwapLast2 => {
            let x = &node.inputs[0];
            let nd = x.shape.len();
            let (m, n) = (x.shape[nd - 2], x.shape[nd - 1]);
            let lead: usize = x.shape[..nd - 2].iter().product();
            let Some(s) = slot(grads, x) else {
                return Ok(());
            };
            accumulate(s, x.data.len(), |buf| {
                for b in 0..lead {
                    let base = b * m * n;
                    for i in 0..m {
                        for j in 0..n {
                            buf[base + i * n + j] += g[base + j * m + i];
                        }
                    }
                }
            });
        }
        Op::SumAll => {
            let gv = g[0];
            add_unary(grads, &node.inputs[0], &vec![gv; node.inputs[0].data.len()], |_| 1.0);
        }
        Op::MeanAll => {
            let n = node.inputs[0].data.len();
            let gv = g[0] / n as f64;
            add_unary(grads, &node.inputs[0], &vec![gv; n], |_| 1.0);
        }
     }
    Ok(())
}

fn matmul_backward(node: &Node, g: &[f64], grads: &mut GradTable) {
    let (a, b) = (&node.inputs[0], &node.inputs[1]);
    let (ash, bsh) = (&a.shape, &b.shape);
    let m = ash[ash.len() - 2];
    let k = ash[ash.len() - 1];
    let n = bsh[bsh.len() - 1];
    let batch = &node.out_shape[..node.out_shape.len() - 2];
    let nbatch: usize = batch.iter().product();

    let sa = {
        let mut s = broadcast_strides(&ash[..ash.len() - 2], batch);
        s.iter_mut().for_each(|v| *v *= m * k);
        s
    };
    let sb = {
        let mut s = broadcast_strides(&bsh[..bsh.len() - 2], batch);
        s.iter_mut().for_each(|v| *v *= k * n);
        s
    };
    let offset = |mut flat: usize, strides: &[usize]| -> usize {
        let mut off = 0;
        for d in (0..batch.len()).rev() {
            let idx = flat % batch[d];
            flat /= batch[d];
            off += idx * strides[d];
        }
        off
    };

    let (ad, bd) = (a.data.clone(), b.data.clone());
    if a.node.is_some() {
        let Some(s) = slot(grads, a) else { return };
        accumulate(s, ad.len(), |buf| {
            for bi in 0..nbatch {
                let ao = offset(bi, &sa);
                let bo = offset(bi, &sb);
                let gm = &g[bi * m * n..(bi + 1) * m * n];
                let bm = &bd[bo..bo + k * n];
                // dA = G * B^T
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0;
                        for j in 0..n {
                            acc += gm[i * n + j] * bm[p * n + j];
                        }
                        buf[ao + i * k + p] += acc;
                    }
                }
            }
        });
    }
    if b.node.is_some() {
        let Some(s) = slot(grads, b) else { return };
        accumulate(s, bd.len(), |buf| {
            for bi in 0..nbatch {
                let ao = offset(bi, &sa);
                let bo = offset(bi, &sb);
                let gm = &g[bi * m * n..(bi + 1) * m * n];
                let am = &ad[ao..ao + m * k];
                // dB = A^T * G
                for p in 0..k {
                    for j in 0..n {
                        let mut acc = 0.0;
                        for i in 0..m {
                            acc += am[i * k + p] * gm[i * n + j];
                        }
                        buf[bo + p * n + j] += acc;
                    }
                }
            }
        });
    }
}

fn softmax_backward(node: &Node, axis: usize, g: &[f64], grads: &mut GradTable) {
    let x = &node.inputs[0];
    let shape = &x.shape;
    let len = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    let outer: usize = shape[..axis].iter().product();
    let y = node.out_data.clone();
    let Some(s) = slot(grads, x) else { return };
    accumulate(s, x.data.len(), |buf| {
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut dot = 0.0;
                for l in 0..len {
                    let idx = base + l * inner;
                    dot += g[idx] * y[idx];
                }
                for l in 0..len {
                    let idx = base + l * inner;
                    buf[idx] += y[idx] * (g[idx] - dot);
                }
            }
        }
    });
}

fn conv2d_backward(node: &Node, g: &[f64], grads: &mut GradTable) {
    let (x, w, b) = (&node.inputs[0], &node.inputs[1], &node.inputs[2]);
    let (ci, h, wid) = (x.shape[0], x.shape[1], x.shape[2]);
    let (co, kh, kw) = (w.shape[0], w.shape[2], w.shape[3]);
    let (ph, pw) = (kh / 2, kw / 2);

    if x.node.is_some() {
        // dX = full correlation of G with the kernel flipped in both axes and
        // transposed in the channel pair; reuse the forward kernel on a
        // rearranged weight tensor.
        let mut wflip = vec![0.0; w.data.len()];
        for oc in 0..co {
            for ic in 0..ci {
                for ky in 0..kh {
                    for kx in 0..kw {
                        let src = ((oc * ci + ic) * kh + ky) * kw + kx;
                        let dst = ((ic * co + oc) * kh + (kh - 1 - ky)) * kw + (kw - 1 - kx);
                        wflip[dst] = w.data[src];
                    }
                }
            }
        }
        let zeros = vec![0.0; ci];
        let dx = conv2d_forward(g, &wflip, &zeros, co, h, wid, ci, kh, kw);
        let Some(s) = slot(grads, x) else { return };
        accumulate(s, x.data.len(), |buf| {
            for (bv, dv) in buf.iter_mut().zip(&dx) {
                *bv += dv;
            }
        });
    }
    if w.node.is_some() {
        let xd = x.data.clone();
        let Some(s) = slot(grads, w) else { return };
        accumulate(s, w.data.len(), |buf| {
            for oc in 0..co {
                let gchan = &g[oc * h * wid..(oc + 1) * h * wid];
                for ic in 0..ci {
                    let xchan = &xd[ic * h * wid..(ic + 1) * h * wid];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let dy = ky as isize - ph as isize;
                            let dx_ = kx as isize - pw as isize;
                            let mut acc = 0.0;
                            let y_lo = (-dy).max(0) as usize;
                            let y_hi = ((h as isize - dy).min(h as isize)) as usize;
                            for oy in y_lo..y_hi {
                                let iy = (oy as isize + dy) as usize;
                                let x_lo = (-dx_).max(0) as usize;
                                let x_hi = ((wid as isize - dx_).min(wid as isize)) as usize;
                                let grow = &gchan[oy * wid..(oy + 1) * wid];
                                let xrow = &xchan[iy * wid..(iy + 1) * wid];
                                for ox in x_lo..x_hi {
                                    acc += grow[ox] * xrow[(ox as isize + dx_) as usize];
                                }
                            }
                            buf[((oc * ci + ic) * kh + ky) * kw + kx] += acc;
                        }
                    }
                }
            }
        });
    }
    if b.node.is_some() {
        let Some(s) = slot(grads, b) else { return };
        accumulate(s, co, |buf| {
            for oc in 0..co {
                let mut acc = 0.0;
                for v in &g[oc * h * wid..(oc + 1) * h * wid] {
                    acc += v;
                }
                buf[oc] += acc;
            }
        });
    }
}

fn grid_sample_backward(node: &Node, g: &[f64], grads: &mut GradTable) {
    let (x, coords) = (&node.inputs[0], &node.inputs[1]);
    let (c, h, w) = (x.shape[0], x.shape[1], x.shape[2]);
    let (nb, gh, gw) = match coords.shape.len() {
        3 => (1, coords.shape[0], coords.shape[1]),
        _ => (coords.shape[0], coords.shape[1], coords.shape[2]),
    };
    let xd = x.data.clone();
    let cd = coords.data.clone();

    if x.node.is_some() {
        let Some(s) = slot(grads, x) else { return };
        accumulate(s, xd.len(), |buf| {
            for b in 0..nb {
                for gy in 0..gh {
                    for gx in 0..gw {
                        let ci = ((b * gh + gy) * gw + gx) * 2;
                        let p = BilinearPoint::locate(cd[ci], cd[ci + 1], h, w);
                        let w00 = (1.0 - p.ty) * (1.0 - p.tx);
                        let w01 = (1.0 - p.ty) * p.tx;
                        let w10 = p.ty * (1.0 - p.tx);
                        let w11 = p.ty * p.tx;
                        for ch in 0..c {
                            let gv = g[((b * c + ch) * gh + gy) * gw + gx];
                            let plane = ch * h * w;
                            buf[plane + p.y0 * w + p.x0] += gv * w00;
                            buf[plane + p.y0 * w + p.x1] += gv * w01;
                            buf[plane + p.y1 * w + p.x0] += gv * w10;
                            buf[plane + p.y1 * w + p.x1] += gv * w11;
                        }
                    }
                }
            }
        });
    }
    if coords.node.is_some() {
        let Some(s) = slot(grads, coords) else { return };
        accumulate(s, cd.len(), |buf| {
            for b in 0..nb {
                for gy in 0..gh {
                    for gx in 0..gw {
                        let ci = ((b * gh + gy) * gw + gx) * 2;
                        let p = BilinearPoint::locate(cd[ci], cd[ci + 1], h, w);
                        let mut dcx = 0.0;
                        let mut dcy = 0.0;
                        for ch in 0..c {
                            let gv = g[((b * c + ch) * gh + gy) * gw + gx];
                            let plane = &xd[ch * h * w..(ch + 1) * h * w];
                            let v00 = plane[p.y0 * w + p.x0];
                            let v01 = plane[p.y0 * w + p.x1];
                            let v10 = plane[p.y1 * w + p.x0];
                            let v11 = plane[p.y1 * w + p.x1];
                            let dvdx = (1.0 - p.ty) * (v01 - v00) + p.ty * (v11 - v10);
                            let dvdy = (1.0 - p.tx) * (v10 - v00) + p.tx * (v11 - v01);
                            dcx += gv * dvdx;
                            dcy += gv * dvdy;
                        }
                        buf[ci] += dcx * p.dpx;
                        buf[ci + 1] += dcy * p.dpy;
                    }
                }
            }
        });
    }
}
