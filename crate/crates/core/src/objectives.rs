//! Supervised losses: the warp L1 guiding the geometric matcher, the pixel
//! L1, the 5-stage perceptual loss over a frozen feature extractor, and the
//! weighted total. All L1 losses are means, so values are
//! resolution-independent for constant gaps.

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Param};
use crate::tensor::{self, Var};
use crate::tps::PadMode;

/// Weights of the four loss terms; all default to 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub warp: f32,
    pub perceptual: f32,
    pub l1: f32,
    pub adv: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            warp: 1.0,
            perceptual: 1.0,
            l1: 1.0,
            adv: 1.0,
        }
    }
}

pub const EXTRACTOR_DEPTHS: [usize; 5] = [16, 32, 64, 128, 256];

/// Frozen 5-stage convolutional feature extractor. Weights are seeded and
/// fixed — gradients flow through it to its input but never update it. Each
/// stage is a 2-strided 4x4 convolution with bias and relu; stage outputs
/// are the tap points for the perceptual loss and the evaluation metric.
pub struct PerceptualExtractor {
    convs: Vec<Conv2d>,
}

impl PerceptualExtractor {
    pub fn seeded(seed: u64) -> PerceptualExtractor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut convs = Vec::new();
        let mut prev = 3;
        for (i, &c) in EXTRACTOR_DEPTHS.iter().enumerate() {
            convs.push(Conv2d::new(
                &mut rng,
                &format!("extractor.stage{i}"),
                prev,
                c,
                4,
                2,
                1,
                true,
            ));
            prev = c;
        }
        PerceptualExtractor { convs }
    }

    /// Feature maps of the five stages, shallowest first.
    pub fn features(&self, x: &Var) -> Vec<Var> {
        let mut out = Vec::with_capacity(5);
        let mut cur = x.clone();
        for conv in &self.convs {
            cur = tensor::relu(&conv.forward_frozen(&cur));
            out.push(cur.clone());
        }
        out
    }

    pub fn stage_channels(&self) -> Vec<usize> {
        EXTRACTOR_DEPTHS.to_vec()
    }

    /// Parameters, exposed for (de)serialization only — never optimized.
    pub fn params(&self) -> Vec<Rc<Param>> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }
}

/// Mean absolute error between the pixel-level warp of `cloth` under `theta`
/// and the worn-cloth target. Pixel warps use zero padding (cloth canvases
/// resolve to background, not replicated border).
pub fn warp_loss(theta: &Var, cloth: &Var, worn_cloth: &Var) -> Result<Var> {
    if cloth.shape() != worn_cloth.shape() {
        return Err(Error::contract(format!(
            "warp_loss: cloth {:?} vs worn {:?}",
            cloth.shape(),
            worn_cloth.shape()
        )));
    }
    let warped = tensor::bilinear_warp(cloth, theta, PadMode::Zeros);
    Ok(tensor::mean_all(&tensor::abs(&tensor::sub(
        &warped,
        worn_cloth,
    ))))
}

/// Mean absolute pixel error.
pub fn pixel_l1(generated: &Var, target: &Var) -> Result<Var> {
    if generated.shape() != target.shape() {
        return Err(Error::contract(format!(
            "pixel_l1: {:?} vs {:?}",
            generated.shape(),
            target.shape()
        )));
    }
    Ok(tensor::mean_all(&tensor::abs(&tensor::sub(
        generated, target,
    ))))
}

/// Sum over the five stages of mean absolute feature differences.
pub fn perceptual_loss(
    generated: &Var,
    target: &Var,
    extractor: &PerceptualExtractor,
) -> Result<Var> {
    if generated.shape() != target.shape() {
        return Err(Error::contract(format!(
            "perceptual_loss: {:?} vs {:?}",
            generated.shape(),
            target.shape()
        )));
    }
    let fg = extractor.features(generated);
    let ft = extractor.features(target);
    let mut total = Var::scalar(0.0);
    for (a, b) in fg.iter().zip(ft.iter()) {
        let stage = tensor::mean_all(&tensor::abs(&tensor::sub(a, b)));
        total = tensor::add(&total, &stage);
    }
    Ok(total)
}

/// Perceptual loss against precomputed target stage features (the frozen
/// extractor makes per-item target features cacheable).
pub fn perceptual_loss_cached(
    generated: &Var,
    target_stages: &[Var],
    extractor: &PerceptualExtractor,
) -> Result<Var> {
    let fg = extractor.features(generated);
    if fg.len() != target_stages.len() {
        return Err(Error::contract("cached target features: stage count mismatch"));
    }
    let mut total = Var::scalar(0.0);
    for (a, b) in fg.iter().zip(target_stages.iter()) {
        if a.shape() != b.shape() {
            return Err(Error::contract(format!(
                "cached target features: stage shape {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let stage = tensor::mean_all(&tensor::abs(&tensor::sub(a, b)));
        total = tensor::add(&total, &stage);
    }
    Ok(total)
}

/// Itemized loss terms entering the weighted total. Absent terms contribute
/// nothing (the adversarial term disappears under `--no-adv`).
#[derive(Default)]
pub struct LossParts {
    pub warp: Option<Var>,
    pub perceptual: Option<Var>,
    pub l1: Option<Var>,
    pub adv: Option<Var>,
}

/// Weighted sum of the parts. A non-finite part aborts with the offending
/// term named.
pub fn total_loss(parts: &LossParts, weights: &LossWeights, step: usize) -> Result<Var> {
    let mut total = Var::scalar(0.0);
    for (name, part, weight) in [
        ("warp", &parts.warp, weights.warp),
        ("perceptual", &parts.perceptual, weights.perceptual),
        ("l1", &parts.l1, weights.l1),
        ("adv", &parts.adv, weights.adv),
    ] {
        if let Some(v) = part {
            if !v.item().is_finite() {
                return Err(Error::Divergence {
                    term: name.to_string(),
                    step,
                });
            }
            total = tensor::add(&total, &tensor::mul_scalar(v, weight));
        }
    }
    Ok(total)
}
