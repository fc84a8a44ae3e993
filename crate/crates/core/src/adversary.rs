//! Fully convolutional patch discriminator plus the relativistic adversarial
//! losses and the gradient penalty.
//!
//! The discriminator scores how much more real one image looks than another;
//! at score parity both losses sit at `ln 2`. The penalty pushes the
//! critic's input-gradient norm toward 1 on random real/fake interpolates
//! and is differentiated end-to-end through the second-order machinery of
//! the tensor engine.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::{BatchNorm2d, Buffer, Conv2d, Param};
use crate::tensor::{self, Var};

/// Which relativistic pairing the losses use. The plain pairwise form is the
/// default; the averaged form compares each score against the opposite
/// class's mean score.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RelativisticVariant {
    Rsgan,
    Ragan,
}

impl std::str::FromStr for RelativisticVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rsgan" => Ok(RelativisticVariant::Rsgan),
            "ragan" => Ok(RelativisticVariant::Ragan),
            other => Err(Error::contract(format!("unknown adversarial variant `{other}`"))),
        }
    }
}

impl std::fmt::Display for RelativisticVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RelativisticVariant::Rsgan => write!(f, "rsgan"),
            RelativisticVariant::Ragan => write!(f, "ragan"),
        }
    }
}

/// Five 2-strided convolution blocks (batch norm + leaky relu) and a
/// 1-channel convolution head producing the patch score map.
pub struct Discriminator {
    blocks: Vec<(Conv2d, BatchNorm2d)>,
    head: Conv2d,
}

pub const LEAKY_SLOPE: f32 = 0.2;

impl Discriminator {
    pub fn new(rng: &mut ChaCha8Rng, depths: &[usize]) -> Discriminator {
        assert_eq!(depths.len(), 5, "discriminator uses exactly five downsampling layers");
        let mut blocks = Vec::new();
        let mut prev = 3;
        for (i, &c) in depths.iter().enumerate() {
            let name = format!("disc.block{i}");
            blocks.push((
                Conv2d::new(rng, &name, prev, c, 4, 2, 1, false),
                BatchNorm2d::new_composite(&format!("{name}.bn"), c),
            ));
            prev = c;
        }
        let head = Conv2d::new(rng, "disc.head", prev, 1, 3, 1, 1, true);
        Discriminator { blocks, head }
    }

    /// Patch score map, `(B, 1, H/32, W/32)`, unbounded.
    pub fn critic(&self, image: &Var, train: bool) -> Result<Var> {
        let (h, w) = (image.shape()[2], image.shape()[3]);
        if h % 32 != 0 || w % 32 != 0 {
            return Err(Error::contract(format!(
                "discriminator input {h}x{w} must be divisible by 32"
            )));
        }
        let mut x = image.clone();
        for (conv, bn) in &self.blocks {
            x = tensor::leaky_relu(&bn.forward(&conv.forward(&x), train), LEAKY_SLOPE);
        }
        Ok(self.head.forward(&x))
    }

    pub fn params(&self) -> Vec<Rc<Param>> {
        let mut p = Vec::new();
        for (conv, bn) in &self.blocks {
            p.extend(conv.params());
            p.extend(bn.params());
        }
        p.extend(self.head.params());
        p
    }

    pub fn buffers(&self) -> Vec<Rc<Buffer>> {
        self.blocks.iter().flat_map(|(_, bn)| bn.buffers()).collect()
    }

    /// Zero every parameter (test hook for the closed-form penalty case).
    pub fn zero_params(&self) {
        for p in self.params() {
            p.set(ArrayD::zeros(IxDyn(&p.shape())));
        }
    }
}

fn prepare_scores(
    real_scores: &Var,
    fake_scores: &Var,
    variant: RelativisticVariant,
) -> Result<(Var, Var)> {
    if real_scores.shape() != fake_scores.shape() {
        return Err(Error::contract(format!(
            "score map shapes differ: {:?} vs {:?}",
            real_scores.shape(),
            fake_scores.shape()
        )));
    }
    match variant {
        RelativisticVariant::Rsgan => Ok((real_scores.clone(), fake_scores.clone())),
        RelativisticVariant::Ragan => {
            let real_mean = tensor::broadcast_to(&tensor::mean_all(real_scores), real_scores.shape());
            let fake_mean = tensor::broadcast_to(&tensor::mean_all(fake_scores), fake_scores.shape());
            // each side relative to the opposite class's average score
            Ok((
                tensor::sub(real_scores, &fake_mean),
                tensor::sub(fake_scores, &real_mean),
            ))
        }
    }
}

/// Discriminator side: mean over patches of `-log sigmoid(C(x_r) - C(x_f))`.
pub fn relativistic_d_loss(
    real_scores: &Var,
    fake_scores: &Var,
    variant: RelativisticVariant,
) -> Result<Var> {
    let (r, f) = prepare_scores(real_scores, fake_scores, variant)?;
    let diff = match variant {
        RelativisticVariant::Rsgan => tensor::sub(&r, &f),
        // r and f already carry the opposite-mean offsets; average the sides
        RelativisticVariant::Ragan => tensor::mul_scalar(&tensor::sub(&r, &f), 0.5),
    };
    Ok(tensor::mean_all(&tensor::softplus(&tensor::neg(&diff))))
}

/// Generator side: mean of `-log sigmoid(C(x_f) - C(x_r))`. The real branch
/// is detached; gradient reaches fake images only.
pub fn relativistic_g_loss(
    real_scores: &Var,
    fake_scores: &Var,
    variant: RelativisticVariant,
) -> Result<Var> {
    let (r, f) = prepare_scores(&real_scores.detach(), fake_scores, variant)?;
    let diff = match variant {
        RelativisticVariant::Rsgan => tensor::sub(&f, &r),
        RelativisticVariant::Ragan => tensor::mul_scalar(&tensor::sub(&f, &r), 0.5),
    };
    Ok(tensor::mean_all(&tensor::softplus(&tensor::neg(&diff))))
}

/// `E[(||grad_x C(x_hat)||_2 - 1)^2]` on uniform random interpolates between
/// real and fake. The critic closure must keep its graph differentiable.
pub fn gradient_penalty(
    critic: impl Fn(&Var) -> Result<Var>,
    real: &Var,
    fake: &Var,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    if real.shape() != fake.shape() {
        return Err(Error::contract(format!(
            "gradient penalty shapes differ: {:?} vs {:?}",
            real.shape(),
            fake.shape()
        )));
    }
    let b = real.shape()[0];
    let per_sample = real.len() / b;
    let mut alpha = ArrayD::zeros(IxDyn(real.shape()));
    for bi in 0..b {
        let a: f32 = rng.gen_range(0.0..1.0);
        alpha
            .index_axis_mut(ndarray::Axis(0), bi)
            .fill(a);
    }
    let alpha = Var::constant(alpha);
    let one_minus = tensor::add_scalar(&tensor::neg(&alpha), 1.0);
    let interp = tensor::add(
        &tensor::mul(&alpha, &real.detach()),
        &tensor::mul(&one_minus, &fake.detach()),
    );
    let interp = Var::leaf(interp.value().clone());
    let scores = critic(&interp)?;
    let total = tensor::sum_all(&scores);
    let grad = total.grad_wrt(&[&interp], true).remove(0);
    // per-sample L2 norm over all pixels
    let sq = tensor::square(&grad);
    let flat = tensor::reshape(&sq, &[b, per_sample]);
    let sums = tensor::sum_axes(&flat, &[1]);
    let norms = tensor::sqrt(&tensor::add_scalar(&sums, 1e-12));
    let shifted = tensor::add_scalar(&norms, -1.0);
    Ok(tensor::mean_all(&tensor::square(&shifted)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn scores(values: &[f32], shape: &[usize]) -> Var {
        Var::constant(ArrayD::from_shape_vec(IxDyn(shape), values.to_vec()).unwrap())
    }

    fn disc() -> Discriminator {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        Discriminator::new(&mut rng, &[16, 32, 64, 128, 256])
    }

    #[test]
    fn critic_shapes() {
        let d = disc();
        let x = Var::constant(ArrayD::zeros(IxDyn(&[1, 3, 256, 192])));
        assert_eq!(d.critic(&x, false).unwrap().shape(), [1, 1, 8, 6]);
        let x = Var::constant(ArrayD::zeros(IxDyn(&[2, 3, 64, 64])));
        assert_eq!(d.critic(&x, false).unwrap().shape(), [2, 1, 2, 2]);
        let bad = Var::constant(ArrayD::zeros(IxDyn(&[1, 3, 48, 64])));
        assert!(d.critic(&bad, false).is_err());
    }

    #[test]
    fn critic_deterministic_and_finite_on_extremes() {
        let d = disc();
        for v in [-1.0f32, 1.0] {
            let x = Var::constant(ArrayD::from_elem(IxDyn(&[1, 3, 64, 64]), v));
            let a = d.critic(&x, false).unwrap();
            let b = d.critic(&x, false).unwrap();
            assert_eq!(a.value(), b.value());
            assert!(a.value().iter().all(|s| s.is_finite()));
        }
    }

    #[test]
    fn relativistic_losses_closed_forms() {
        for variant in [RelativisticVariant::Rsgan, RelativisticVariant::Ragan] {
            let s = scores(&[0.3, -1.2, 0.0, 2.5], &[1, 1, 2, 2]);
            let d = relativistic_d_loss(&s, &s, variant).unwrap().item();
            let g = relativistic_g_loss(&s, &s, variant).unwrap().item();
            assert!((d - std::f32::consts::LN_2).abs() <= 1e-6, "{variant}: {d}");
            assert!((g - std::f32::consts::LN_2).abs() <= 1e-6, "{variant}: {g}");
        }
        // +20 score difference drives the loss to zero, -20 to ~20
        let hi = scores(&[20.0; 4], &[1, 1, 2, 2]);
        let lo = scores(&[0.0; 4], &[1, 1, 2, 2]);
        let d = relativistic_d_loss(&hi, &lo, RelativisticVariant::Rsgan)
            .unwrap()
            .item();
        assert!(d <= 1e-8, "{d}");
        let d = relativistic_d_loss(&lo, &hi, RelativisticVariant::Rsgan)
            .unwrap()
            .item();
        assert!((d - 20.0).abs() <= 1e-4, "{d}");
    }

    #[test]
    fn d_loss_monotone_in_score_difference() {
        let fake = scores(&[0.0; 4], &[1, 1, 2, 2]);
        let mut prev = f32::INFINITY;
        for diff in [-2.0f32, -1.0, 0.0, 1.0, 2.0] {
            let real = scores(&[diff; 4], &[1, 1, 2, 2]);
            let loss = relativistic_d_loss(&real, &fake, RelativisticVariant::Rsgan)
                .unwrap()
                .item();
            assert!(loss < prev, "not strictly decreasing at diff={diff}");
            prev = loss;
        }
    }

    #[test]
    fn g_loss_real_branch_is_detached() {
        let real = Var::leaf(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), 0.4));
        let fake = Var::leaf(ArrayD::from_elem(IxDyn(&[1, 1, 2, 2]), -0.1));
        let loss = relativistic_g_loss(&real, &fake, RelativisticVariant::Rsgan).unwrap();
        let grads = loss.backward();
        assert!(grads.get(&real).is_none());
        assert!(grads.get(&fake).is_some());
    }

    #[test]
    fn gradient_penalty_zero_critic_is_one() {
        let d = disc();
        d.zero_params();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let real = Var::constant(ArrayD::from_elem(IxDyn(&[2, 3, 64, 64]), 0.5));
        let fake = Var::constant(ArrayD::from_elem(IxDyn(&[2, 3, 64, 64]), -0.5));
        let gp = gradient_penalty(|x| d.critic(x, true), &real, &fake, &mut rng)
            .unwrap()
            .item();
        assert!((gp - 1.0).abs() <= 1e-5, "{gp}");
    }

    #[test]
    fn gradient_penalty_linear_critic_closed_form() {
        // critic = sum of pixels: per-pixel gradient 1, norm sqrt(H*W*C)
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (c, h, w) = (3usize, 8usize, 8usize);
        let real = Var::constant(ArrayD::from_elem(IxDyn(&[2, c, h, w]), 0.3));
        let fake = Var::constant(ArrayD::from_elem(IxDyn(&[2, c, h, w]), -0.3));
        let gp = gradient_penalty(|x| Ok(tensor::sum_all(x)), &real, &fake, &mut rng)
            .unwrap()
            .item();
        let expect = (((c * h * w) as f32).sqrt() - 1.0).powi(2);
        assert!((gp - expect).abs() <= 1e-3 * expect, "{gp} vs {expect}");
    }

    #[test]
    fn gradient_penalty_nonnegative_and_reaches_weights() {
        let d = disc();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut img = ChaCha8Rng::seed_from_u64(6);
        let real = Var::constant(ArrayD::from_shape_fn(IxDyn(&[2, 3, 64, 64]), |_| {
            img.gen_range(-1.0f32..1.0)
        }));
        let fake = Var::constant(ArrayD::from_shape_fn(IxDyn(&[2, 3, 64, 64]), |_| {
            img.gen_range(-1.0f32..1.0)
        }));
        let gp = gradient_penalty(|x| d.critic(x, true), &real, &fake, &mut rng).unwrap();
        assert!(gp.item() >= 0.0);
        let grads = gp.backward();
        let norm: f32 = d
            .params()
            .iter()
            .map(|p| grads.get_or_zeros(&p.var()).iter().map(|g| g * g).sum::<f32>())
            .sum();
        assert!(norm > 0.0, "penalty gradient did not reach the critic weights");
    }
}
