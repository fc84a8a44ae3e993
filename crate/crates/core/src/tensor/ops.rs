//! Differentiable primitives.
//!
//! Every vjp closure builds its result through this same op layer (or returns
//! an explicitly constant tensor where only first-order gradients are ever
//! needed: the TPS warp and the correlation map are never inside the
//! gradient-penalty path). Ops used by the discriminator — convolution triad,
//! leaky relu, arithmetic, reductions — keep their backward differentiable,
//! which is what the gradient penalty's second-order pass relies on.

use ndarray::{ArrayD, Axis, Ix2, Ix4, IxDyn};
use std::rc::Rc;

use super::{conv, Var};
use crate::tps::{self, PadMode, SamplingGrid};

fn same_shape(a: &Var, b: &Var, op: &str) {
    assert_eq!(a.shape(), b.shape(), "{op}: shape mismatch");
}

// ---------------------------------------------------------------------------
// arithmetic
// ---------------------------------------------------------------------------

pub fn add(a: &Var, b: &Var) -> Var {
    same_shape(a, b, "add");
    let value = super::prof::timed("elementwise", || a.value() + b.value());
    Var::from_op(value, vec![a.clone(), b.clone()], |g| {
        vec![g.clone(), g.clone()]
    })
}

pub fn sub(a: &Var, b: &Var) -> Var {
    same_shape(a, b, "sub");
    let value = super::prof::timed("elementwise", || a.value() - b.value());
    Var::from_op(value, vec![a.clone(), b.clone()], |g| vec![g.clone(), neg(g)])
}

pub fn mul(a: &Var, b: &Var) -> Var {
    same_shape(a, b, "mul");
    let value = super::prof::timed("elementwise", || a.value() * b.value());
    let (ac, bc) = (a.clone(), b.clone());
    Var::from_op(value, vec![a.clone(), b.clone()], move |g| {
        vec![mul(g, &bc), mul(g, &ac)]
    })
}

pub fn div(a: &Var, b: &Var) -> Var {
    same_shape(a, b, "div");
    let value = a.value() / b.value();
    let (ac, bc) = (a.clone(), b.clone());
    Var::from_op(value, vec![a.clone(), b.clone()], move |g| {
        let da = div(g, &bc);
        let db = neg(&div(&mul(g, &ac), &mul(&bc, &bc)));
        vec![da, db]
    })
}

pub fn neg(a: &Var) -> Var {
    let value = a.value().mapv(|v| -v);
    Var::from_op(value, vec![a.clone()], |g| vec![neg(g)])
}

pub fn add_scalar(a: &Var, s: f32) -> Var {
    let value = a.value().mapv(|v| v + s);
    Var::from_op(value, vec![a.clone()], |g| vec![g.clone()])
}

pub fn mul_scalar(a: &Var, s: f32) -> Var {
    let value = a.value().mapv(|v| v * s);
    Var::from_op(value, vec![a.clone()], move |g| vec![mul_scalar(g, s)])
}

pub fn abs(a: &Var) -> Var {
    let value = super::prof::timed("elementwise", || a.value().mapv(f32::abs));
    let sign = Var::constant(a.value().mapv(|v| {
        if v > 0.0 {
            1.0
        } else if v < 0.0 {
            -1.0
        } else {
            0.0
        }
    }));
    Var::from_op(value, vec![a.clone()], move |g| vec![mul(g, &sign)])
}

pub fn square(a: &Var) -> Var {
    let value = super::prof::timed("elementwise", || a.value().mapv(|v| v * v));
    let ac = a.clone();
    Var::from_op(value, vec![a.clone()], move |g| {
        vec![mul_scalar(&mul(g, &ac), 2.0)]
    })
}

pub fn sqrt(a: &Var) -> Var {
    let value = a.value().mapv(f32::sqrt);
    let ac = a.clone();
    Var::from_op(value, vec![a.clone()], move |g| {
        vec![mul_scalar(&mul(g, &rsqrt(&ac)), 0.5)]
    })
}

/// `x^(-1/2)`, defined for strictly positive input.
pub fn rsqrt(a: &Var) -> Var {
    let value = a.value().mapv(|v| 1.0 / v.sqrt());
    let ac = a.clone();
    Var::from_op(value, vec![a.clone()], move |g| {
        let r = rsqrt(&ac);
        vec![mul_scalar(&mul(g, &mul(&r, &mul(&r, &r))), -0.5)]
    })
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

pub fn relu(a: &Var) -> Var {
    let value = super::prof::timed("elementwise", || a.value().mapv(|v| v.max(0.0)));
    let mask = Var::constant(super::prof::timed("elementwise", || a.value().mapv(|v| if v > 0.0 { 1.0 } else { 0.0 })));
    Var::from_op(value, vec![a.clone()], move |g| vec![mul(g, &mask)])
}

pub fn leaky_relu(a: &Var, slope: f32) -> Var {
    let value = super::prof::timed("elementwise", || a.value().mapv(|v| if v > 0.0 { v } else { slope * v }));
    let mask = Var::constant(super::prof::timed("elementwise", || a.value().mapv(|v| if v > 0.0 { 1.0 } else { slope })));
    Var::from_op(value, vec![a.clone()], move |g| vec![mul(g, &mask)])
}

pub fn tanh(a: &Var) -> Var {
    let value = super::prof::timed("elementwise", || a.value().mapv(f32::tanh));
    let ac = a.clone();
    Var::from_op(value, vec![a.clone()], move |g| {
        let deriv = Var::constant(ac.value().mapv(|v| 1.0 - v.tanh().powi(2)));
        vec![mul(g, &deriv)]
    })
}

/// Numerically stable `ln(1 + e^x)`; `-log sigmoid(x) = softplus(-x)`.
pub fn softplus(a: &Var) -> Var {
    let value = a.value().mapv(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
    let ac = a.clone();
    Var::from_op(value, vec![a.clone()], move |g| {
        let sig = Var::constant(ac.value().mapv(|v| 1.0 / (1.0 + (-v).exp())));
        vec![mul(g, &sig)]
    })
}

// ---------------------------------------------------------------------------
// reductions and shape
// ---------------------------------------------------------------------------

pub fn sum_all(a: &Var) -> Var {
    let total: f64 = a.value().iter().map(|&v| v as f64).sum();
    let value = ArrayD::from_elem(IxDyn(&[1]), total as f32);
    let shape: Vec<usize> = a.shape().to_vec();
    Var::from_op(value, vec![a.clone()], move |g| {
        vec![broadcast_to(g, &shape)]
    })
}

pub fn mean_all(a: &Var) -> Var {
    let n = a.len() as f64;
    let total: f64 = a.value().iter().map(|&v| v as f64).sum();
    let value = ArrayD::from_elem(IxDyn(&[1]), (total / n) as f32);
    let shape: Vec<usize> = a.shape().to_vec();
    Var::from_op(value, vec![a.clone()], move |g| {
        vec![mul_scalar(&broadcast_to(g, &shape), 1.0 / n as f32)]
    })
}

/// Sum over `axes`, keeping reduced dimensions as size 1.
pub fn sum_axes(a: &Var, axes: &[usize]) -> Var {
    let mut value = super::prof::timed("reduce", || a.value().clone());
    let mut sorted: Vec<usize> = axes.to_vec();
    sorted.sort_unstable();
    for &ax in sorted.iter().rev() {
        value = value.sum_axis(Axis(ax)).insert_axis(Axis(ax));
    }
    let shape: Vec<usize> = a.shape().to_vec();
    Var::from_op(value, vec![a.clone()], move |g| {
        vec![broadcast_to(g, &shape)]
    })
}

/// Mean over `axes`, keeping reduced dimensions as size 1.
pub fn mean_axes(a: &Var, axes: &[usize]) -> Var {
    let count: usize = axes.iter().map(|&ax| a.shape()[ax]).product();
    let summed = sum_axes(a, axes);
    mul_scalar(&summed, 1.0 / count as f32)
}

/// Broadcast along size-1 axes (or from a scalar) to `shape`.
pub fn broadcast_to(a: &Var, shape: &[usize]) -> Var {
    if a.shape() == shape {
        return a.clone();
    }
    let scalar_in = a.len() == 1 && a.shape().len() != shape.len();
    let value = super::prof::timed("broadcast", || if scalar_in {
        ArrayD::from_elem(IxDyn(shape), a.value().iter().next().copied().unwrap())
    } else {
        assert_eq!(a.shape().len(), shape.len(), "broadcast rank mismatch");
        a.value().broadcast(IxDyn(shape)).unwrap().to_owned()
    });
    let in_shape: Vec<usize> = a.shape().to_vec();
    Var::from_op(value, vec![a.clone()], move |g| {
        if scalar_in {
            vec![reshape(&sum_all(g), &in_shape)]
        } else {
            let axes: Vec<usize> = in_shape
                .iter()
                .enumerate()
                .filter(|(i, &d)| d == 1 && g.shape()[*i] != 1)
                .map(|(i, _)| i)
                .collect();
            if axes.is_empty() {
                vec![g.clone()]
            } else {
                vec![sum_axes(g, &axes)]
            }
        }
    })
}

pub fn reshape(a: &Var, shape: &[usize]) -> Var {
    let value = a
        .value()
        .clone()
        .into_shape_with_order(IxDyn(shape))
        .expect("reshape: incompatible shape");
    let in_shape: Vec<usize> = a.shape().to_vec();
    Var::from_op(value, vec![a.clone()], move |g| {
        vec![reshape(g, &in_shape)]
    })
}

pub fn transpose2d(a: &Var) -> Var {
    let v = a.value().view().into_dimensionality::<Ix2>().unwrap();
    let value = v.t().as_standard_layout().to_owned().into_dyn();
    Var::from_op(value, vec![a.clone()], |g| vec![transpose2d(g)])
}

pub fn matmul(a: &Var, b: &Var) -> Var {
    let av = a.value().view().into_dimensionality::<Ix2>().unwrap();
    let bv = b.value().view().into_dimensionality::<Ix2>().unwrap();
    assert_eq!(av.shape()[1], bv.shape()[0], "matmul inner dim mismatch");
    let value = av.dot(&bv).into_dyn();
    let (ac, bc) = (a.clone(), b.clone());
    Var::from_op(value, vec![a.clone(), b.clone()], move |g| {
        vec![matmul(g, &transpose2d(&bc)), matmul(&transpose2d(&ac), g)]
    })
}

/// Concatenate `(B, C_i, H, W)` tensors along the channel axis.
pub fn concat_channels(parts: &[&Var]) -> Var {
    assert!(!parts.is_empty());
    let views: Vec<_> = parts.iter().map(|p| p.value().view()).collect();
    let value = ndarray::concatenate(Axis(1), &views).expect("concat_channels shape mismatch");
    let bounds: Vec<usize> = {
        let mut acc = vec![0];
        for p in parts {
            acc.push(acc.last().unwrap() + p.shape()[1]);
        }
        acc
    };
    let parents: Vec<Var> = parts.iter().map(|p| (*p).clone()).collect();
    Var::from_op(value, parents, move |g| {
        bounds
            .windows(2)
            .map(|wnd| slice_channels(g, wnd[0], wnd[1]))
            .collect()
    })
}

/// Channel slice `[start, end)` of a `(B, C, H, W)` tensor.
pub fn slice_channels(a: &Var, start: usize, end: usize) -> Var {
    let value = a
        .value()
        .slice_axis(Axis(1), ndarray::Slice::from(start..end))
        .as_standard_layout()
        .to_owned();
    let channels = a.shape()[1];
    Var::from_op(value, vec![a.clone()], move |g| {
        vec![embed_channels(g, channels, start)]
    })
}

/// Place a channel block into a zero tensor with `total` channels.
pub(crate) fn embed_channels(a: &Var, total: usize, start: usize) -> Var {
    let mut shape = a.shape().to_vec();
    let block = shape[1];
    shape[1] = total;
    let mut value = ArrayD::<f32>::zeros(IxDyn(&shape));
    value
        .slice_axis_mut(Axis(1), ndarray::Slice::from(start..start + block))
        .assign(a.value());
    Var::from_op(value, vec![a.clone()], move |g| {
        vec![slice_channels(g, start, start + block)]
    })
}

// ---------------------------------------------------------------------------
// convolution triad
// ---------------------------------------------------------------------------

fn as4(a: &Var) -> ndarray::Array4<f32> {
    a.value()
        .view()
        .into_dimensionality::<Ix4>()
        .expect("expected a 4-d tensor")
        .to_owned()
}

pub fn conv2d(x: &Var, w: &Var, stride: usize, pad: usize) -> Var {
    let xv = as4(x);
    let wv = as4(w);
    let (h, wdt) = (xv.shape()[2], xv.shape()[3]);
    let (kh, kw) = (wv.shape()[2], wv.shape()[3]);
    let value = super::prof::timed("conv_fwd", || conv::conv2d_fwd(&xv, &wv, stride, pad)).into_dyn();
    let (xc, wc) = (x.clone(), w.clone());
    Var::from_op(value, vec![x.clone(), w.clone()], move |g| {
        vec![
            conv2d_input_grad(g, &wc, stride, pad, h, wdt),
            conv2d_weight_grad(g, &xc, stride, pad, kh, kw),
        ]
    })
}

pub fn conv2d_input_grad(
    dy: &Var,
    w: &Var,
    stride: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
) -> Var {
    let dyv = as4(dy);
    let wv = as4(w);
    let (kh, kw) = (wv.shape()[2], wv.shape()[3]);
    let value = super::prof::timed("conv_igrad", || conv::conv2d_input_grad_fwd(&dyv, &wv, stride, pad, in_h, in_w)).into_dyn();
    let (dyc, wc) = (dy.clone(), w.clone());
    Var::from_op(value, vec![dy.clone(), w.clone()], move |t| {
        vec![
            conv2d(t, &wc, stride, pad),
            conv2d_weight_grad(&dyc, t, stride, pad, kh, kw),
        ]
    })
}

pub fn conv2d_weight_grad(
    dy: &Var,
    x: &Var,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) -> Var {
    let dyv = as4(dy);
    let xv = as4(x);
    let (h, w) = (xv.shape()[2], xv.shape()[3]);
    let value = super::prof::timed("conv_wgrad", || conv::conv2d_weight_grad_fwd(&dyv, &xv, stride, pad, kh, kw)).into_dyn();
    let (dyc, xc) = (dy.clone(), x.clone());
    Var::from_op(value, vec![dy.clone(), x.clone()], move |t| {
        vec![
            conv2d(&xc, t, stride, pad),
            conv2d_input_grad(&dyc, t, stride, pad, h, w),
        ]
    })
}

/// Per-channel bias over a `(B, C, H, W)` tensor.
pub fn add_bias(x: &Var, b: &Var) -> Var {
    let c = x.shape()[1];
    assert_eq!(b.shape(), [c]);
    let mut value = x.value().clone();
    let bv = b.value();
    for (ci, mut lane) in value.axis_iter_mut(Axis(1)).enumerate() {
        lane += bv[[ci]];
    }
    Var::from_op(value, vec![x.clone(), b.clone()], move |g| {
        vec![g.clone(), reshape(&sum_axes(g, &[0, 2, 3]), &[c])]
    })
}

// ---------------------------------------------------------------------------
// fused normalization (first-order)
// ---------------------------------------------------------------------------

/// Statistic grouping for [`norm_fused`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormAxes {
    /// Batch norm: statistics over (N, H, W) per channel.
    PerChannel,
    /// Instance norm: statistics over (H, W) per sample and channel.
    PerSampleChannel,
}

/// Normalization with affine terms as a single op with a hand-derived
/// backward pass. First-order only — the discriminator, which sits inside
/// the gradient penalty, uses the composite formulation instead.
///
/// Returns `(output, per-group means, per-group inverse stddevs)`; the
/// statistics feed running-average tracking.
pub fn norm_fused(
    x: &Var,
    gamma: &Var,
    beta: &Var,
    axes: NormAxes,
    eps: f32,
) -> (Var, Vec<f32>, Vec<f32>) {
    super::prof::timed("norm_fused", || norm_fused_impl(x, gamma, beta, axes, eps))
}

fn norm_fused_impl(
    x: &Var,
    gamma: &Var,
    beta: &Var,
    axes: NormAxes,
    eps: f32,
) -> (Var, Vec<f32>, Vec<f32>) {
    let v = as4(x);
    let (b, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
    let groups: Vec<(usize, usize)> = match axes {
        NormAxes::PerChannel => (0..c).map(|ci| (usize::MAX, ci)).collect(),
        NormAxes::PerSampleChannel => (0..b)
            .flat_map(|bi| (0..c).map(move |ci| (bi, ci)))
            .collect(),
    };
    let plane = h * w;
    let mut means = vec![0.0f32; groups.len()];
    let mut invs = vec![0.0f32; groups.len()];
    let mut out = ndarray::Array4::<f32>::zeros((b, c, h, w));
    let gv = gamma.value();
    let bv = beta.value();
    for (gi, &(bi, ci)) in groups.iter().enumerate() {
        let n = if bi == usize::MAX { b * plane } else { plane };
        let mut sum = 0.0f64;
        let mut sumsq = 0.0f64;
        let samples: Vec<usize> = if bi == usize::MAX {
            (0..b).collect()
        } else {
            vec![bi]
        };
        for &s in &samples {
            for val in v.index_axis(Axis(0), s).index_axis(Axis(0), ci).iter() {
                let f = *val as f64;
                sum += f;
                sumsq += f * f;
            }
        }
        let mean = sum / n as f64;
        let var = (sumsq / n as f64 - mean * mean).max(0.0);
        let inv = 1.0 / (var + eps as f64).sqrt();
        means[gi] = mean as f32;
        invs[gi] = inv as f32;
        let g = gv[[ci]];
        let bt = bv[[ci]];
        let scale = (g as f64 * inv) as f32;
        let shift = (bt as f64 - g as f64 * inv * mean) as f32;
        for &s in &samples {
            let src = v.index_axis(Axis(0), s);
            let src = src.index_axis(Axis(0), ci);
            let mut dst = out.index_axis_mut(Axis(0), s);
            let mut dst = dst.index_axis_mut(Axis(0), ci);
            ndarray::Zip::from(&mut dst).and(&src).for_each(|o, &i| {
                *o = scale * i + shift;
            });
        }
    }
    let (xc, gc) = (x.clone(), gamma.clone());
    let (means_c, invs_c) = (means.clone(), invs.clone());
    let groups_c = groups.clone();
    let result = Var::from_op(
        out.into_dyn(),
        vec![x.clone(), gamma.clone(), beta.clone()],
        move |gout| {
            super::prof::timed("norm_bwd", || {
            let gv4 = as4(gout);
            let xv = as4(&xc);
            let gammav = gc.value();
            let (b, c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
            let plane = h * w;
            let mut dx = ndarray::Array4::<f32>::zeros((b, c, h, w));
            let mut dgamma = ndarray::Array1::<f32>::zeros(c);
            let mut dbeta = ndarray::Array1::<f32>::zeros(c);
            for (gi, &(bi, ci)) in groups_c.iter().enumerate() {
                let samples: Vec<usize> = if bi == usize::MAX {
                    (0..b).collect()
                } else {
                    vec![bi]
                };
                let n = (samples.len() * plane) as f64;
                let mean = means_c[gi] as f64;
                let inv = invs_c[gi] as f64;
                // group sums of g and g * xhat
                let mut sum_g = 0.0f64;
                let mut sum_gx = 0.0f64;
                for &s in &samples {
                    let gp = gv4.index_axis(Axis(0), s);
                    let gp = gp.index_axis(Axis(0), ci);
                    let xp = xv.index_axis(Axis(0), s);
                    let xp = xp.index_axis(Axis(0), ci);
                    ndarray::Zip::from(&gp).and(&xp).for_each(|&g, &xval| {
                        let xhat = (xval as f64 - mean) * inv;
                        sum_g += g as f64;
                        sum_gx += g as f64 * xhat;
                    });
                }
                dbeta[ci] += sum_g as f32;
                dgamma[ci] += sum_gx as f32;
                let gam = gammav[[ci]] as f64;
                let k = gam * inv;
                let mg = sum_g / n;
                let mgx = sum_gx / n;
                for &s in &samples {
                    let gp = gv4.index_axis(Axis(0), s);
                    let gp = gp.index_axis(Axis(0), ci);
                    let xp = xv.index_axis(Axis(0), s);
                    let xp = xp.index_axis(Axis(0), ci);
                    let mut dp = dx.index_axis_mut(Axis(0), s);
                    let mut dp = dp.index_axis_mut(Axis(0), ci);
                    ndarray::Zip::from(&mut dp)
                        .and(&gp)
                        .and(&xp)
                        .for_each(|d, &g, &xval| {
                            let xhat = (xval as f64 - mean) * inv;
                            *d = (k * (g as f64 - mg - xhat * mgx)) as f32;
                        });
                }
            }
            vec![
                Var::constant(dx.into_dyn()),
                Var::constant(dgamma.into_dyn()),
                Var::constant(dbeta.into_dyn()),
            ]
            })
        },
    );
    (result, means, invs)
}

// ---------------------------------------------------------------------------
// correlation
// ---------------------------------------------------------------------------

/// All-pairs inner products: `out[b, m*w+n, i, j] = <f1[b,:,i,j], f2[b,:,m,n]>`.
///
/// First-order only: the vjp returns explicit constants, which is fine
/// because nothing differentiates through a correlation twice.
pub fn correlation(f1: &Var, f2: &Var) -> Var {
    same_shape(f1, f2, "correlation");
    let a = as4(f1);
    let b = as4(f2);
    let (bs, c, h, w) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
    let hw = h * w;
    let mut out = ndarray::Array4::<f32>::zeros((bs, hw, h, w));
    for bi in 0..bs {
        let f1m = a
            .index_axis(Axis(0), bi)
            .into_shape_with_order((c, hw))
            .unwrap()
            .to_owned();
        let f2m = b
            .index_axis(Axis(0), bi)
            .into_shape_with_order((c, hw))
            .unwrap()
            .to_owned();
        let corr = f2m.t().dot(&f1m); // (hw, hw): rows source-k, cols target-ij
        out.index_axis_mut(Axis(0), bi)
            .assign(&corr.into_shape_with_order((hw, h, w)).unwrap());
    }
    let (f1c, f2c) = (f1.clone(), f2.clone());
    Var::from_op(
        out.into_dyn(),
        vec![f1.clone(), f2.clone()],
        move |g| {
            let gv = as4(g);
            let av = as4(&f1c);
            let bv = as4(&f2c);
            let (bs, c) = (av.shape()[0], av.shape()[1]);
            let (h, w) = (av.shape()[2], av.shape()[3]);
            let hw = h * w;
            let mut d1 = ndarray::Array4::<f32>::zeros((bs, c, h, w));
            let mut d2 = ndarray::Array4::<f32>::zeros((bs, c, h, w));
            for bi in 0..bs {
                let gm = gv
                    .index_axis(Axis(0), bi)
                    .into_shape_with_order((hw, hw))
                    .unwrap()
                    .to_owned();
                let f1m = av
                    .index_axis(Axis(0), bi)
                    .into_shape_with_order((c, hw))
                    .unwrap()
                    .to_owned();
                let f2m = bv
                    .index_axis(Axis(0), bi)
                    .into_shape_with_order((c, hw))
                    .unwrap()
                    .to_owned();
                // d_f1[c, ij] = sum_k f2[c, k] g[k, ij]
                let d1m = f2m.dot(&gm);
                // d_f2[c, k] = sum_ij g[k, ij] f1[c, ij]
                let d2m = f1m.dot(&gm.t());
                d1.index_axis_mut(Axis(0), bi)
                    .assign(&d1m.into_shape_with_order((c, h, w)).unwrap());
                d2.index_axis_mut(Axis(0), bi)
                    .assign(&d2m.into_shape_with_order((c, h, w)).unwrap());
            }
            vec![Var::constant(d1.into_dyn()), Var::constant(d2.into_dyn())]
        },
    )
}

// ---------------------------------------------------------------------------
// TPS warp
// ---------------------------------------------------------------------------

/// Warp a `(B, C, H, W)` batch with per-sample theta rows `(B, 50)` at the
/// batch's own resolution. Exact no-op for identity theta rows.
///
/// First-order only, like [`correlation`].
pub fn bilinear_warp(x: &Var, theta: &Var, pad: PadMode) -> Var {
    let xv = as4(x);
    let (bs, _c, h, w) = (xv.shape()[0], xv.shape()[1], xv.shape()[2], xv.shape()[3]);
    assert_eq!(theta.shape(), [bs, tps::THETA_LEN], "bilinear_warp theta shape");
    let lattice = tps::shared_lattice();
    let thetas: Vec<tps::TpsTheta> = (0..bs)
        .map(|bi| {
            let row: Vec<f64> = (0..tps::THETA_LEN)
                .map(|k| theta.value()[[bi, k]] as f64)
                .collect();
            tps::TpsTheta::from_values(row).expect("non-finite theta in warp")
        })
        .collect();
    let grids: Rc<Vec<Option<SamplingGrid>>> = Rc::new(
        thetas
            .iter()
            .map(|t| {
                if t.is_identity() {
                    None
                } else {
                    Some(tps::grid_from_theta(t, lattice, h, w))
                }
            })
            .collect(),
    );
    let mut out = ndarray::Array4::<f32>::zeros(xv.raw_dim());
    super::prof::timed("warp_fwd", || {
        for bi in 0..bs {
            let src = xv.index_axis(Axis(0), bi).to_owned();
            let warped = match &grids[bi] {
                None => src,
                Some(grid) => tps::bilinear_sample(&src, grid, pad),
            };
            out.index_axis_mut(Axis(0), bi).assign(&warped);
        }
    });
    let xc = x.clone();
    let grids_c = Rc::clone(&grids);
    Var::from_op(
        out.into_dyn(),
        vec![x.clone(), theta.clone()],
        move |g| {
            super::prof::timed("warp_bwd", || {
            let gv = as4(g);
            let xv = as4(&xc);
            let (bs, c) = (xv.shape()[0], xv.shape()[1]);
            let (h, w) = (xv.shape()[2], xv.shape()[3]);
            let lattice = tps::shared_lattice();
            let mut dx = ndarray::Array4::<f32>::zeros((bs, c, h, w));
            let mut dtheta = ndarray::Array2::<f32>::zeros((bs, tps::THETA_LEN));
            for bi in 0..bs {
                let src = xv.index_axis(Axis(0), bi).to_owned();
                let gout = gv.index_axis(Axis(0), bi).to_owned();
                let identity_grid;
                let grid = match &grids_c[bi] {
                    Some(grid) => grid,
                    None => {
                        identity_grid = SamplingGrid::identity(h, w);
                        &identity_grid
                    }
                };
                let (d_src, d_grid) = tps::bilinear_sample_vjp(&src, grid, pad, &gout);
                dx.index_axis_mut(Axis(0), bi).assign(&d_src);
                let dt = tps::grid_theta_vjp(lattice, h, w, &d_grid);
                for k in 0..tps::THETA_LEN {
                    dtheta[[bi, k]] = dt[k] as f32;
                }
            }
            vec![
                Var::constant(dx.into_dyn()),
                Var::constant(dtheta.into_dyn()),
            ]
            })
        },
    )
}
