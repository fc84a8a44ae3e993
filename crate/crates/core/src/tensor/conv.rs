//! f32 convolution kernels: im2col + GEMM, parallel over the batch.
//!
//! Three entry points form a closed triad — forward, gradient w.r.t. input
//! (which doubles as transposed convolution) and gradient w.r.t. weights —
//! so each one's derivative is expressible with the other two.
//!
//! Batch samples write disjoint outputs and per-sample partial results are
//! reduced in index order, so results do not depend on thread scheduling.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array4, ArrayView3, Axis};
use rayon::prelude::*;

/// Scatter input patches into a `(C*kh*kw, oh*ow)` matrix.
fn im2col(
    x: &ArrayView3<f32>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> Array2<f32> {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut cols = Array2::<f32>::zeros((c * kh * kw, oh * ow));
    for ci in 0..c {
        let plane = x.index_axis(Axis(0), ci);
        for ky in 0..kh {
            for kx in 0..kw {
                let row_idx = (ci * kh + ky) * kw + kx;
                let mut row = cols.row_mut(row_idx);
                let row = row.as_slice_mut().unwrap();
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = plane.row(iy as usize);
                    let src = src.as_slice().unwrap();
                    let base = oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            row[base + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Inverse of [`im2col`]: accumulate columns back into an input-shaped array.
fn col2im(
    cols: &Array2<f32>,
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
) -> ndarray::Array3<f32> {
    let mut x = ndarray::Array3::<f32>::zeros((c, h, w));
    for ci in 0..c {
        let mut plane = x.index_axis_mut(Axis(0), ci);
        for ky in 0..kh {
            for kx in 0..kw {
                let row_idx = (ci * kh + ky) * kw + kx;
                let row = cols.row(row_idx);
                let row = row.as_slice().unwrap();
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let mut dst_row = plane.row_mut(iy as usize);
                    let dst = dst_row.as_slice_mut().unwrap();
                    let base = oy * ow;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += row[base + ox];
                        }
                    }
                }
            }
        }
    }
    x
}

pub fn conv_out_size(h: usize, k: usize, stride: usize, pad: usize) -> usize {
    assert!(h + 2 * pad >= k, "input extent {h} too small for kernel {k} (pad {pad})");
    (h + 2 * pad - k) / stride + 1
}

/// `y[b,o] = sum_i w[o,i] * x[b,i]` with the usual spatial window.
pub fn conv2d_fwd(x: &Array4<f32>, w: &Array4<f32>, stride: usize, pad: usize) -> Array4<f32> {
    let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
    let (o, ci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(c, ci, "conv2d channel mismatch");
    let oh = conv_out_size(h, kh, stride, pad);
    let ow = conv_out_size(wd, kw, stride, pad);
    let w_mat = w.view().into_shape_with_order((o, ci * kh * kw)).unwrap();
    let mut y = Array4::<f32>::zeros((b, o, oh, ow));
    let samples: Vec<_> = y.axis_iter_mut(Axis(0)).collect();
    samples.into_par_iter().enumerate().for_each(|(bi, mut yb)| {
        let cols = im2col(&x.index_axis(Axis(0), bi), kh, kw, stride, pad, oh, ow);
        let mut out = Array2::<f32>::zeros((o, oh * ow));
        general_mat_mul(1.0, &w_mat, &cols, 0.0, &mut out);
        yb.assign(&out.into_shape_with_order((o, oh, ow)).unwrap());
    });
    y
}

/// Gradient of `conv2d_fwd` w.r.t. its input. Also the forward pass of a
/// 2-strided deconvolution when `dy` is the layer input.
pub fn conv2d_input_grad_fwd(
    dy: &Array4<f32>,
    w: &Array4<f32>,
    stride: usize,
    pad: usize,
    in_h: usize,
    in_w: usize,
) -> Array4<f32> {
    let (b, o, oh, ow) = (dy.shape()[0], dy.shape()[1], dy.shape()[2], dy.shape()[3]);
    let (wo, ci, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    assert_eq!(o, wo, "conv2d_input_grad channel mismatch");
    debug_assert_eq!(conv_out_size(in_h, kh, stride, pad), oh);
    debug_assert_eq!(conv_out_size(in_w, kw, stride, pad), ow);
    let w_mat = w.view().into_shape_with_order((o, ci * kh * kw)).unwrap();
    let mut dx = Array4::<f32>::zeros((b, ci, in_h, in_w));
    let samples: Vec<_> = dx.axis_iter_mut(Axis(0)).collect();
    samples.into_par_iter().enumerate().for_each(|(bi, mut dxb)| {
        let dyb = dy.index_axis(Axis(0), bi);
        let dy_mat = dyb.into_shape_with_order((o, oh * ow)).unwrap();
        let mut cols = Array2::<f32>::zeros((ci * kh * kw, oh * ow));
        general_mat_mul(1.0, &w_mat.t(), &dy_mat, 0.0, &mut cols);
        dxb.assign(&col2im(&cols, ci, in_h, in_w, kh, kw, stride, pad, oh, ow));
    });
    dx
}

/// Gradient of `conv2d_fwd` w.r.t. its weights. Accumulates over the batch
/// into one buffer; parallelism splits the output channels, so the result
/// does not depend on thread scheduling.
pub fn conv2d_weight_grad_fwd(
    dy: &Array4<f32>,
    x: &Array4<f32>,
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
) -> Array4<f32> {
    let (b, o, oh, ow) = (dy.shape()[0], dy.shape()[1], dy.shape()[2], dy.shape()[3]);
    let c = x.shape()[1];
    debug_assert_eq!(x.shape()[0], b);
    let mut dw = Array2::<f32>::zeros((o, c * kh * kw));
    let threads = rayon::current_num_threads().max(1);
    let chunk = o.div_ceil(threads);
    for bi in 0..b {
        let cols = im2col(&x.index_axis(Axis(0), bi), kh, kw, stride, pad, oh, ow);
        let dyb = dy.index_axis(Axis(0), bi);
        let dy_mat = dyb.into_shape_with_order((o, oh * ow)).unwrap();
        let blocks: Vec<_> = dw
            .axis_chunks_iter_mut(Axis(0), chunk)
            .zip(dy_mat.axis_chunks_iter(Axis(0), chunk))
            .collect();
        blocks.into_par_iter().for_each(|(mut dw_block, dy_block)| {
            general_mat_mul(1.0, &dy_block, &cols.t(), 1.0, &mut dw_block);
        });
    }
    dw.into_shape_with_order((o, c, kh, kw)).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_conv(x: &Array4<f32>, w: &Array4<f32>, stride: usize, pad: usize) -> Array4<f32> {
        let (b, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
        let (o, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
        let oh = conv_out_size(h, kh, stride, pad);
        let ow = conv_out_size(wd, kw, stride, pad);
        let mut y = Array4::<f32>::zeros((b, o, oh, ow));
        for bi in 0..b {
            for oi in 0..o {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0f64;
                        for ci in 0..c {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize {
                                        acc += (x[[bi, ci, iy as usize, ix as usize]]
                                            * w[[oi, ci, ky, kx]])
                                            as f64;
                                    }
                                }
                            }
                        }
                        y[[bi, oi, oy, ox]] = acc as f32;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn conv_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(stride, pad, k) in &[(1usize, 1usize, 3usize), (2, 1, 4), (2, 1, 3)] {
            let x = Array4::from_shape_fn((2, 3, 6, 8), |_| rng.gen_range(-1.0f32..1.0));
            let w = Array4::from_shape_fn((4, 3, k, k), |_| rng.gen_range(-1.0f32..1.0));
            let fast = conv2d_fwd(&x, &w, stride, pad);
            let slow = brute_conv(&x, &w, stride, pad);
            let max = fast
                .iter()
                .zip(slow.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f32, f32::max);
            assert!(max < 1e-4, "stride={stride} pad={pad} k={k} max={max}");
        }
    }

    #[test]
    fn input_and_weight_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Array4::from_shape_fn((1, 2, 5, 5), |_| rng.gen_range(-1.0f32..1.0));
        let w = Array4::from_shape_fn((3, 2, 3, 3), |_| rng.gen_range(-1.0f32..1.0));
        let dy = Array4::from_shape_fn((1, 3, 5, 5), |_| rng.gen_range(-1.0f32..1.0));
        let loss = |x: &Array4<f32>, w: &Array4<f32>| -> f64 {
            conv2d_fwd(x, w, 1, 1)
                .iter()
                .zip(dy.iter())
                .map(|(a, b)| (*a as f64) * (*b as f64))
                .sum()
        };
        let dx = conv2d_input_grad_fwd(&dy, &w, 1, 1, 5, 5);
        let dw = conv2d_weight_grad_fwd(&dy, &x, 1, 1, 3, 3);
        let eps = 1e-2f32;
        for idx in [[0usize, 0, 2, 2], [0, 1, 0, 4], [0, 1, 4, 0]] {
            let mut p = x.clone();
            p[idx] += eps;
            let mut m = x.clone();
            m[idx] -= eps;
            let fd = (loss(&p, &w) - loss(&m, &w)) / (2.0 * eps as f64);
            assert!((fd - dx[idx] as f64).abs() < 2e-2, "dx {fd} vs {}", dx[idx]);
        }
        for idx in [[0usize, 0, 1, 1], [2, 1, 0, 2], [1, 0, 2, 0]] {
            let mut p = w.clone();
            p[idx] += eps;
            let mut m = w.clone();
            m[idx] -= eps;
            let fd = (loss(&x, &p) - loss(&x, &m)) / (2.0 * eps as f64);
            assert!((fd - dw[idx] as f64).abs() < 2e-2, "dw {fd} vs {}", dw[idx]);
        }
    }

    #[test]
    fn input_grad_doubles_resolution_as_deconv() {
        // (H-1)*stride - 2*pad + k: the deconvolution output size.
        let x = Array4::<f32>::zeros((1, 8, 4, 6));
        let w = Array4::<f32>::zeros((8, 5, 4, 4));
        let y = conv2d_input_grad_fwd(&x, &w, 2, 1, 8, 12);
        assert_eq!(y.shape(), &[1, 5, 8, 12]);
    }
}

#[cfg(test)]
mod perf_probe {
    use super::*;
    use ndarray::Array4;
    use std::time::Instant;

    #[test]
    #[ignore]
    fn conv_throughput() {
        let cases: Vec<(usize, usize, usize, usize, usize, usize, usize)> = vec![
            // (b, cin, cout, h, w, k, stride) — encoder shapes at 64x64
            (2, 3, 16, 64, 64, 3, 1),
            (2, 16, 16, 64, 64, 4, 2),
            (2, 16, 32, 32, 32, 3, 1),
            (2, 32, 32, 32, 32, 4, 2),
            (2, 32, 64, 16, 16, 3, 1),
            (2, 64, 64, 16, 16, 4, 2),
            (2, 64, 128, 8, 8, 3, 1),
            (2, 128, 128, 8, 8, 4, 2),
            (2, 128, 256, 4, 4, 3, 1),
            (2, 256, 256, 4, 4, 4, 2),
            (2, 512, 256, 2, 2, 3, 1),
        ];
        for (b, cin, cout, h, w, k, s) in cases {
            let x = Array4::<f32>::from_elem((b, cin, h, w), 0.5);
            let wt = Array4::<f32>::from_elem((cout, cin, k, k), 0.01);
            let oh = conv_out_size(h, k, s, 1);
            let ow = conv_out_size(w, k, s, 1);
            let flops = 2.0 * (b * cout * oh * ow * cin * k * k) as f64;
            let reps = (2e8 / flops).ceil().max(3.0) as usize;
            let t = Instant::now();
            for _ in 0..reps {
                std::hint::black_box(conv2d_fwd(&x, &wt, s, 1));
            }
            let dt = t.elapsed().as_secs_f64() / reps as f64;
            println!(
                "conv {b}x{cin}->{cout} {h}x{w} k{k}s{s}: {:.3} ms, {:.2} GFLOP/s",
                dt * 1e3,
                flops / dt / 1e9
            );
            let t = Instant::now();
            for _ in 0..reps {
                std::hint::black_box(conv2d_weight_grad_fwd(
                    &Array4::<f32>::from_elem((b, cout, oh, ow), 0.1),
                    &x, s, 1, k, k,
                ));
            }
            let dt = t.elapsed().as_secs_f64() / reps as f64;
            println!("    wgrad: {:.3} ms, {:.2} GFLOP/s", dt * 1e3, flops / dt / 1e9);
            let t = Instant::now();
            for _ in 0..reps {
                std::hint::black_box(conv2d_input_grad_fwd(
                    &Array4::<f32>::from_elem((b, cout, oh, ow), 0.1),
                    &wt, s, 1, h, w,
                ));
            }
            let dt = t.elapsed().as_secs_f64() / reps as f64;
            println!("    igrad: {:.3} ms, {:.2} GFLOP/s", dt * 1e3, flops / dt / 1e9);
        }
    }
}
