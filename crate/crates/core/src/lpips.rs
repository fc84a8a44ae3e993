//! Perceptual image distance: channel-unit-normalized features from the
//! frozen extractor, rescaled by per-channel weights, squared differences
//! averaged over space and summed over the five stages.
//!
//! Weights default to all-ones; externally calibrated weights can be loaded
//! from a JSON file. Absolute values therefore differ from metrics computed
//! with pretrained backbones.

use ndarray::{Array1, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::objectives::PerceptualExtractor;
use crate::tensor::{self, Var};

const CHANNEL_NORM_EPS: f64 = 1e-10;

/// Nonnegative per-channel weights for each of the five stages.
#[derive(Debug, Clone)]
pub struct LpipsWeights {
    pub stages: Vec<Array1<f32>>,
}

impl LpipsWeights {
    /// All-ones weights matching the extractor's channel counts.
    pub fn ones(extractor: &PerceptualExtractor) -> LpipsWeights {
        LpipsWeights {
            stages: extractor
                .stage_channels()
                .iter()
                .map(|&c| Array1::from_elem(c, 1.0))
                .collect(),
        }
    }

    pub fn validate(&self, extractor: &PerceptualExtractor) -> Result<()> {
        let channels = extractor.stage_channels();
        if self.stages.len() != channels.len() {
            return Err(Error::contract(format!(
                "expected {} weight stages, got {}",
                channels.len(),
                self.stages.len()
            )));
        }
        for (i, (w, &c)) in self.stages.iter().zip(channels.iter()).enumerate() {
            if w.len() != c {
                return Err(Error::contract(format!(
                    "stage {i}: expected {c} weights, got {}",
                    w.len()
                )));
            }
            if w.iter().any(|&v| v < 0.0 || !v.is_finite()) {
                return Err(Error::contract(format!(
                    "stage {i}: weights must be finite and nonnegative"
                )));
            }
        }
        Ok(())
    }

    /// Load stage weights from a JSON file: an array of five arrays.
    pub fn load(path: &Path, extractor: &PerceptualExtractor) -> Result<LpipsWeights> {
        let text = std::fs::read_to_string(path)?;
        let raw: Vec<Vec<f32>> = serde_json::from_str(&text)
            .map_err(|e| Error::format(format!("weights file {}: {e}", path.display())))?;
        let weights = LpipsWeights {
            stages: raw.into_iter().map(Array1::from_vec).collect(),
        };
        weights.validate(extractor)?;
        Ok(weights)
    }
}

fn image_var(img: &Image) -> Var {
    let (c, h, w) = (img.channels(), img.height(), img.width());
    let data = img
        .data
        .clone()
        .into_shape_with_order(IxDyn(&[1, c, h, w]))
        .unwrap();
    Var::constant(data)
}

/// Unit-normalize feature vectors along the channel axis in f64, returning
/// the normalized stage as f64 for a precise distance accumulation.
fn normalize_channels(stage: &ArrayD<f32>) -> ndarray::Array4<f64> {
    let v = stage.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    let (b, c, h, w) = (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]);
    let mut out = ndarray::Array4::<f64>::zeros((b, c, h, w));
    for bi in 0..b {
        for y in 0..h {
            for x in 0..w {
                let mut sum = 0.0f64;
                for ci in 0..c {
                    let val = v[[bi, ci, y, x]] as f64;
                    sum += val * val;
                }
                let norm = sum.sqrt() + CHANNEL_NORM_EPS;
                for ci in 0..c {
                    out[[bi, ci, y, x]] = v[[bi, ci, y, x]] as f64 / norm;
                }
            }
        }
    }
    out
}

/// Perceptual distance between two same-shape images.
pub fn lpips(
    a: &Image,
    b: &Image,
    extractor: &PerceptualExtractor,
    weights: &LpipsWeights,
) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::contract(format!(
            "lpips: image shapes differ ({:?} vs {:?})",
            a.data.shape(),
            b.data.shape()
        )));
    }
    weights.validate(extractor)?;
    let (fa, fb) = tensor::no_grad(|| {
        let fa: Vec<ArrayD<f32>> = extractor
            .features(&image_var(a))
            .iter()
            .map(|v| v.value().clone())
            .collect();
        let fb: Vec<ArrayD<f32>> = extractor
            .features(&image_var(b))
            .iter()
            .map(|v| v.value().clone())
            .collect();
        (fa, fb)
    });
    let mut total = 0.0f64;
    for ((sa, sb), w) in fa.iter().zip(fb.iter()).zip(weights.stages.iter()) {
        let na = normalize_channels(sa);
        let nb = normalize_channels(sb);
        let (c, h, wd) = (na.shape()[1], na.shape()[2], na.shape()[3]);
        let mut acc = 0.0f64;
        for y in 0..h {
            for x in 0..wd {
                for ci in 0..c {
                    let d = w[ci] as f64 * (na[[0, ci, y, x]] - nb[[0, ci, y, x]]);
                    acc += d * d;
                }
            }
        }
        total += acc / (h * wd) as f64;
    }
    Ok(total)
}

#[derive(Debug, Serialize, Deserialize)]
pub struct PairScore {
    pub name: String,
    pub score: f64,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SkippedPair {
    pub name: String,
    pub reason: String,
}

/// Machine-readable aggregation over a directory of paired images.
#[derive(Debug, Serialize, Deserialize)]
pub struct LpipsReport {
    pub count: usize,
    pub mean: f64,
    /// Population standard deviation over the per-pair scores.
    pub std: f64,
    pub pairs: Vec<PairScore>,
    pub skipped: Vec<SkippedPair>,
}

impl LpipsReport {
    pub fn from_scores(pairs: Vec<PairScore>, skipped: Vec<SkippedPair>) -> LpipsReport {
        let count = pairs.len();
        let mean = if count == 0 {
            0.0
        } else {
            pairs.iter().map(|p| p.score).sum::<f64>() / count as f64
        };
        let std = if count == 0 {
            0.0
        } else {
            (pairs
                .iter()
                .map(|p| (p.score - mean).powi(2))
                .sum::<f64>()
                / count as f64)
                .sqrt()
        };
        LpipsReport {
            count,
            mean,
            std,
            pairs,
            skipped,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::format(format!("report serialization: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

/// Compare identically named PNG files across two directories. Pairs with a
/// missing counterpart or mismatched shape are reported and skipped; callers
/// treat a non-empty `skipped` list as a failure.
pub fn lpips_directory(
    dir_a: &Path,
    dir_b: &Path,
    extractor: &PerceptualExtractor,
    weights: &LpipsWeights,
) -> Result<LpipsReport> {
    let mut names: Vec<String> = std::fs::read_dir(dir_a)?
        .filter_map(|e| e.ok())
        .filter(|e| {
            e.path()
                .extension()
                .map(|x| x.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    names.sort();
    let mut pairs = Vec::new();
    let mut skipped = Vec::new();
    for name in names {
        let pa = dir_a.join(&name);
        let pb = dir_b.join(&name);
        if !pb.exists() {
            skipped.push(SkippedPair {
                name,
                reason: "missing counterpart".into(),
            });
            continue;
        }
        let a = Image::load_png(&pa)?;
        let b = Image::load_png(&pb)?;
        match lpips(&a, &b, extractor, weights) {
            Ok(score) => pairs.push(PairScore { name, score }),
            Err(e) => skipped.push(SkippedPair {
                name,
                reason: e.to_string(),
            }),
        }
    }
    Ok(LpipsReport::from_scores(pairs, skipped))
}
