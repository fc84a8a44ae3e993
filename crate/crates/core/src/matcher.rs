//! Convolutional geometric matcher: two non-shared feature extractors, a
//! correlation layer over L2-normalized feature vectors, and a regression
//! head emitting the 50 TPS parameters.
//!
//! The final fully connected layer starts at zero weights with the identity
//! lattice as bias, so an untrained matcher predicts the identity transform.

use ndarray::Array1;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Buffer, Conv2d, Encoder, Linear, NormKind, Param};
use crate::tensor::{self, Var};
use crate::tps;

pub const NORMALIZE_EPS: f32 = 1e-8;

/// Widths of the regression head; resolution-independent, recorded in config.
#[derive(Debug, Clone, PartialEq)]
pub struct RegressorWidths {
    pub strided: Vec<usize>,
    pub standard: Vec<usize>,
}

impl Default for RegressorWidths {
    fn default() -> Self {
        RegressorWidths {
            strided: vec![512, 256],
            standard: vec![128, 128],
        }
    }
}

pub struct GeometricMatcher {
    extractor_f1: Encoder,
    extractor_f2: Encoder,
    strided: Vec<(Conv2d, BatchNorm2d)>,
    standard: Vec<(Conv2d, BatchNorm2d)>,
    fc: Linear,
    input_hw: (usize, usize),
    fc_spatial: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    F1,
    F2,
}

fn check_divisible(h: usize, w: usize) -> Result<()> {
    if h % 32 != 0 || w % 32 != 0 || h == 0 || w == 0 {
        return Err(Error::contract(format!(
            "input resolution {h}x{w} must be divisible by 32"
        )));
    }
    Ok(())
}

/// `ceil(n / 2)`: output size of a 3x3 stride-2 pad-1 convolution.
fn half_ceil(n: usize) -> usize {
    n.div_ceil(2)
}

impl GeometricMatcher {
    /// Build for a fixed input resolution (the correlation map's channel
    /// count and the flattened head depend on it).
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        rng: &mut ChaCha8Rng,
        height: usize,
        width: usize,
        widths: &RegressorWidths,
        standard_k: usize,
        strided_k: usize,
    ) -> Result<GeometricMatcher> {
        check_divisible(height, width)?;
        let (fh, fw) = (height / 32, width / 32);
        let corr_channels = fh * fw;
        let extractor_f1 = Encoder::new(rng, "matcher.f1", 3, NormKind::Batch, standard_k, strided_k);
        let extractor_f2 = Encoder::new(rng, "matcher.f2", 3, NormKind::Batch, standard_k, strided_k);

        let mut strided = Vec::new();
        let mut prev = corr_channels;
        let (mut sh, mut sw) = (fh, fw);
        for (i, &c) in widths.strided.iter().enumerate() {
            let name = format!("matcher.reg.strided{i}");
            strided.push((
                Conv2d::new(rng, &name, prev, c, 3, 2, 1, false),
                BatchNorm2d::new(&format!("{name}.bn"), c),
            ));
            prev = c;
            sh = half_ceil(sh);
            sw = half_ceil(sw);
        }
        let mut standard = Vec::new();
        for (i, &c) in widths.standard.iter().enumerate() {
            let name = format!("matcher.reg.standard{i}");
            standard.push((
                Conv2d::new(rng, &name, prev, c, 3, 1, 1, false),
                BatchNorm2d::new(&format!("{name}.bn"), c),
            ));
            prev = c;
        }
        let fc_in = prev * sh * sw;
        let identity: Array1<f32> =
            Array1::from_iter(tps::TpsTheta::identity().values().iter().map(|&v| v as f32));
        let fc = Linear::zero_init_with_bias("matcher.reg.fc", fc_in, identity);
        Ok(GeometricMatcher {
            extractor_f1,
            extractor_f2,
            strided,
            standard,
            fc,
            input_hw: (height, width),
            fc_spatial: (sh, sw),
        })
    }

    pub fn input_resolution(&self) -> (usize, usize) {
        self.input_hw
    }

    /// Final-level feature map of one branch.
    pub fn extract_features(&self, input: &Var, branch: Branch, train: bool) -> Result<Var> {
        check_divisible(input.shape()[2], input.shape()[3])?;
        let enc = match branch {
            Branch::F1 => &self.extractor_f1,
            Branch::F2 => &self.extractor_f2,
        };
        Ok(enc.forward(input, train))
    }

    /// Theta for a batch of (cloth, agnostic person) pairs, `(B, 50)`.
    pub fn match_theta(&self, cloth: &Var, agnostic: &Var, train: bool) -> Result<Var> {
        let f1 = self.extract_features(cloth, Branch::F1, train)?;
        let f2 = self.extract_features(agnostic, Branch::F2, train)?;
        let corr = correlate(&f1, &f2)?;
        Ok(self.regress_theta(&corr, train))
    }

    /// Regression head: two 2-strided convolutions, two standard
    /// convolutions, one fully connected layer.
    pub fn regress_theta(&self, corr: &Var, train: bool) -> Var {
        let mut x = corr.clone();
        for (conv, bn) in &self.strided {
            x = tensor::relu(&bn.forward(&conv.forward(&x), train));
        }
        for (conv, bn) in &self.standard {
            x = tensor::relu(&bn.forward(&conv.forward(&x), train));
        }
        let b = x.shape()[0];
        let flat = x.len() / b;
        debug_assert_eq!(flat, self.fc_spatial.0 * self.fc_spatial.1 * x.shape()[1]);
        let x = tensor::reshape(&x, &[b, flat]);
        self.fc.forward(&x)
    }

    pub fn params(&self) -> Vec<Rc<Param>> {
        let mut p = self.extractor_f1.params();
        p.extend(self.extractor_f2.params());
        for (conv, bn) in self.strided.iter().chain(self.standard.iter()) {
            p.extend(conv.params());
            p.extend(bn.params());
        }
        p.extend(self.fc.params());
        p
    }

    pub fn buffers(&self) -> Vec<Rc<Buffer>> {
        let mut b = self.extractor_f1.buffers();
        b.extend(self.extractor_f2.buffers());
        for (_, bn) in self.strided.iter().chain(self.standard.iter()) {
            b.extend(bn.buffers());
        }
        b
    }

    /// Parameters of one feature extractor (used by the gradient probes,
    /// which distinguish branch reach).
    pub fn extractor_params(&self, branch: Branch) -> Vec<Rc<Param>> {
        match branch {
            Branch::F1 => self.extractor_f1.params(),
            Branch::F2 => self.extractor_f2.params(),
        }
    }

    pub fn regressor_params(&self) -> Vec<Rc<Param>> {
        let mut p = Vec::new();
        for (conv, bn) in self.strided.iter().chain(self.standard.iter()) {
            p.extend(conv.params());
            p.extend(bn.params());
        }
        p.extend(self.fc.params());
        p
    }
}

/// Unit-normalize spatial feature vectors along the channel axis.
pub fn l2_normalize(f: &Var) -> Var {
    let sumsq = tensor::sum_axes(&tensor::square(f), &[1]);
    let inv = tensor::rsqrt(&tensor::add_scalar(&sumsq, NORMALIZE_EPS));
    tensor::mul(f, &tensor::broadcast_to(&inv, f.shape()))
}

/// Correlation map of two same-shape feature maps: all-pairs inner products
/// of unit-normalized spatial vectors. Output is `(B, h*w, h, w)` where
/// channel `k` corresponds to source position `(m, n)` with `k = m*w + n`.
pub fn correlate(f1: &Var, f2: &Var) -> Result<Var> {
    if f1.shape() != f2.shape() {
        return Err(Error::contract(format!(
            "correlate: shape mismatch {:?} vs {:?}",
            f1.shape(),
            f2.shape()
        )));
    }
    Ok(tensor::correlation(&l2_normalize(f1), &l2_normalize(f2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};

    fn matcher64() -> GeometricMatcher {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        GeometricMatcher::new(&mut rng, 64, 64, &RegressorWidths::default(), 3, 4).unwrap()
    }

    #[test]
    fn extractor_output_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = GeometricMatcher::new(&mut rng, 256, 192, &RegressorWidths::default(), 3, 4).unwrap();
        let x = Var::constant(ArrayD::zeros(IxDyn(&[1, 3, 256, 192])));
        let f = m.extract_features(&x, Branch::F1, false).unwrap();
        assert_eq!(f.shape(), [1, 256, 8, 6]);
        let x64 = Var::constant(ArrayD::zeros(IxDyn(&[1, 3, 64, 64])));
        let f64_ = m.extract_features(&x64, Branch::F2, false).unwrap();
        assert_eq!(f64_.shape(), [1, 256, 2, 2]);
    }

    #[test]
    fn indivisible_resolution_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(GeometricMatcher::new(&mut rng, 60, 64, &RegressorWidths::default(), 3, 4).is_err());
        let m = matcher64();
        let bad = Var::constant(ArrayD::zeros(IxDyn(&[1, 3, 48, 64])));
        assert!(m.extract_features(&bad, Branch::F1, false).is_err());
    }

    #[test]
    fn zero_image_yields_finite_features() {
        let m = matcher64();
        let x = Var::constant(ArrayD::zeros(IxDyn(&[2, 3, 64, 64])));
        let f = m.extract_features(&x, Branch::F1, true).unwrap();
        assert!(f.value().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn correlation_one_hot_and_constant_cases() {
        // one-hot unit vector at location (0,0), zeros elsewhere
        let mut f = ArrayD::zeros(IxDyn(&[1, 8, 4, 3]));
        f[[0, 2, 0, 0]] = 1.0;
        let fv = Var::constant(f);
        let c = correlate(&fv, &fv).unwrap();
        assert!((c.value()[[0, 0, 0, 0]] - 1.0).abs() < 1e-6);
        for k in 1..12 {
            assert!(c.value()[[0, k, 0, 0]].abs() < 1e-6);
        }
        for i in 0..4 {
            for j in 0..3 {
                if (i, j) != (0, 0) {
                    assert!(c.value()[[0, 0, i, j]].abs() < 1e-6);
                }
            }
        }

        // every location the same unit vector -> all entries 1
        let mut f = ArrayD::zeros(IxDyn(&[1, 8, 4, 3]));
        for i in 0..4 {
            for j in 0..3 {
                f[[0, 3, i, j]] = 1.0;
            }
        }
        let fv = Var::constant(f);
        let c = correlate(&fv, &fv).unwrap();
        for v in c.value().iter() {
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn correlation_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..3 {
            let f1 = ArrayD::from_shape_fn(IxDyn(&[2, 8, 4, 3]), |_| rng.gen_range(-1.0f32..1.0));
            let f2 = ArrayD::from_shape_fn(IxDyn(&[2, 8, 4, 3]), |_| rng.gen_range(-1.0f32..1.0));
            let c = correlate(&Var::constant(f1.clone()), &Var::constant(f2.clone())).unwrap();
            // brute-force double loop in f64
            let normalize = |f: &ArrayD<f32>, b: usize, i: usize, j: usize| -> Vec<f64> {
                let v: Vec<f64> = (0..8).map(|ch| f[[b, ch, i, j]] as f64).collect();
                let n = (v.iter().map(|x| x * x).sum::<f64>() + NORMALIZE_EPS as f64).sqrt();
                v.iter().map(|x| x / n).collect()
            };
            let mut max_diff = 0.0f64;
            for b in 0..2 {
                for i in 0..4 {
                    for j in 0..3 {
                        let a = normalize(&f1, b, i, j);
                        for m in 0..4 {
                            for n in 0..3 {
                                let t = normalize(&f2, b, m, n);
                                let dot: f64 = a.iter().zip(t.iter()).map(|(x, y)| x * y).sum();
                                let k = m * 3 + n;
                                let diff = (c.value()[[b, k, i, j]] as f64 - dot).abs();
                                max_diff = max_diff.max(diff);
                                assert!(
                                    c.value()[[b, k, i, j]].abs() <= 1.0 + 1e-5,
                                    "normalization bound violated"
                                );
                            }
                        }
                    }
                }
            }
            assert!(max_diff <= 1e-5, "max diff {max_diff}");
        }
    }

    #[test]
    fn initial_theta_is_identity() {
        let m = matcher64();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let cloth = Var::constant(ArrayD::from_shape_fn(IxDyn(&[2, 3, 64, 64]), |_| {
            rng.gen_range(-1.0f32..1.0)
        }));
        let agn = Var::constant(ArrayD::from_shape_fn(IxDyn(&[2, 3, 64, 64]), |_| {
            rng.gen_range(-1.0f32..1.0)
        }));
        let theta = m.match_theta(&cloth, &agn, true).unwrap();
        let identity = tps::TpsTheta::identity();
        for b in 0..2 {
            for k in 0..tps::THETA_LEN {
                let dev = (theta.value()[[b, k]] as f64 - identity.values()[k]).abs();
                assert!(dev <= 1e-6, "deviation {dev} at {k}");
            }
        }
    }

    #[test]
    fn inference_is_deterministic() {
        let m = matcher64();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let corr = Var::constant(ArrayD::from_shape_fn(IxDyn(&[1, 4, 2, 2]), |_| {
            rng.gen_range(-1.0f32..1.0)
        }));
        let a = m.regress_theta(&corr, false);
        let b = m.regress_theta(&corr, false);
        assert_eq!(a.value(), b.value());
    }

    #[test]
    fn theta_loss_reaches_both_extractor_branches() {
        let m = matcher64();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let cloth = Var::constant(ArrayD::from_shape_fn(IxDyn(&[2, 3, 64, 64]), |_| {
            rng.gen_range(-1.0f32..1.0)
        }));
        let agn = Var::constant(ArrayD::from_shape_fn(IxDyn(&[2, 3, 64, 64]), |_| {
            rng.gen_range(-1.0f32..1.0)
        }));
        // The head starts at zero weights (identity-at-init), which blocks
        // upstream gradients; one update makes it non-zero.
        let mut opt = crate::nn::Adam::new(m.params(), 1e-3, 0.5, 0.999);
        let theta = m.match_theta(&cloth, &agn, true).unwrap();
        let loss = tensor::mean_all(&tensor::square(&theta));
        opt.step(&loss.backward());

        let theta = m.match_theta(&cloth, &agn, true).unwrap();
        let loss = tensor::mean_all(&tensor::square(&theta));
        let grads = loss.backward();
        for branch in [Branch::F1, Branch::F2] {
            let norm: f32 = m
                .extractor_params(branch)
                .iter()
                .map(|p| {
                    grads
                        .get_or_zeros(&p.var())
                        .iter()
                        .map(|g| g * g)
                        .sum::<f32>()
                })
                .sum();
            assert!(norm > 0.0, "no gradient in branch {branch:?}");
        }
    }

    #[test]
    fn branches_are_parameter_disjoint() {
        let m = matcher64();
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let x = Var::constant(ArrayD::from_shape_fn(IxDyn(&[1, 3, 64, 64]), |_| {
            rng.gen_range(-1.0f32..1.0)
        }));
        let f1 = m.extract_features(&x, Branch::F1, false).unwrap();
        let f2 = m.extract_features(&x, Branch::F2, false).unwrap();
        assert_ne!(f1.value(), f2.value());
    }
}
