//! Flat key=value training configuration.
//!
//! Every key has a default; `TrainConfig::to_text` emits the full documented
//! set, and the parser rejects unknown keys so typos fail loudly.

use std::path::{Path, PathBuf};

use crate::adversary::RelativisticVariant;
use crate::error::{Error, Result};
use crate::matcher::RegressorWidths;
use crate::objectives::LossWeights;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataSource {
    Synthetic,
    Manifest,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub resolution_h: usize,
    pub resolution_w: usize,
    pub batch_size: usize,
    pub iterations: usize,
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub lambda_warp: f32,
    pub lambda_perceptual: f32,
    pub lambda_l1: f32,
    pub lambda_adv: f32,
    pub gp_weight: f32,
    pub adv_variant: RelativisticVariant,
    pub data_source: DataSource,
    pub manifest_path: Option<PathBuf>,
    pub dataset_size: usize,
    pub warp_magnitude: f64,
    pub mask_fill: f32,
    pub checkpoint_interval: usize,
    pub checkpoint_dir: PathBuf,
    pub no_adv: bool,
    pub paired_adv: bool,
    pub no_e2e_warp: bool,
    pub box_mask: bool,
    pub extractor_seed: u64,
    pub standard_kernel: usize,
    pub strided_kernel: usize,
    pub disc_depths: Vec<usize>,
    pub regressor_strided: Vec<usize>,
    pub regressor_standard: Vec<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            resolution_h: 64,
            resolution_w: 64,
            batch_size: 8,
            iterations: 2000,
            // the optimizer note reads ambiguously between 1e-2 and 1e-3;
            // the conventional 1e-3 is the default
            learning_rate: 1e-3,
            beta1: 0.5,
            beta2: 0.999,
            lambda_warp: 1.0,
            lambda_perceptual: 1.0,
            lambda_l1: 1.0,
            lambda_adv: 1.0,
            gp_weight: 10.0,
            adv_variant: RelativisticVariant::Rsgan,
            data_source: DataSource::Synthetic,
            manifest_path: None,
            dataset_size: 16,
            warp_magnitude: 0.15,
            mask_fill: 0.0,
            checkpoint_interval: 500,
            checkpoint_dir: PathBuf::from("checkpoints"),
            no_adv: false,
            paired_adv: false,
            no_e2e_warp: false,
            box_mask: false,
            extractor_seed: 7,
            standard_kernel: 3,
            strided_kernel: 4,
            disc_depths: vec![16, 32, 64, 128, 256],
            regressor_strided: vec![512, 256],
            regressor_standard: vec![128, 128],
        }
    }
}

fn parse_list(value: &str, key: &str) -> Result<Vec<usize>> {
    value
        .split(',')
        .map(|s| {
            s.trim()
                .parse::<usize>()
                .map_err(|_| Error::contract(format!("config key `{key}`: bad list entry `{s}`")))
        })
        .collect()
}

fn list_to_string(list: &[usize]) -> String {
    list.iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl TrainConfig {
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            warp: self.lambda_warp,
            perceptual: self.lambda_perceptual,
            l1: self.lambda_l1,
            adv: self.lambda_adv,
        }
    }

    pub fn regressor_widths(&self) -> RegressorWidths {
        RegressorWidths {
            strided: self.regressor_strided.clone(),
            standard: self.regressor_standard.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution_h % 32 != 0 || self.resolution_w % 32 != 0 {
            return Err(Error::contract("resolution must be divisible by 32"));
        }
        if self.batch_size == 0 {
            return Err(Error::contract("batch_size must be positive"));
        }
        if !(0.0..=0.3).contains(&self.warp_magnitude) {
            return Err(Error::contract("warp_magnitude must lie in [0, 0.3]"));
        }
        if self.data_source == DataSource::Manifest && self.manifest_path.is_none() {
            return Err(Error::contract("data_source=manifest requires manifest_path"));
        }
        for w in [
            self.lambda_warp,
            self.lambda_perceptual,
            self.lambda_l1,
            self.lambda_adv,
        ] {
            if w < 0.0 || !w.is_finite() {
                return Err(Error::contract("loss weights must be nonnegative"));
            }
        }
        if self.standard_kernel % 2 == 0 {
            return Err(Error::contract("standard_kernel must be odd"));
        }
        if !(self.strided_kernel == 3 || self.strided_kernel == 4) {
            return Err(Error::contract("strided_kernel must be 3 or 4"));
        }
        if self.disc_depths.len() != 5 {
            return Err(Error::contract("disc_depths must list exactly 5 widths"));
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::contract(format!("config line {}: expected key = value", i + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::contract(format!("config key `{key}`: bad {what} `{value}`"));
            match key {
                "seed" => cfg.seed = value.parse().map_err(|_| bad("integer"))?,
                "resolution_h" => cfg.resolution_h = value.parse().map_err(|_| bad("integer"))?,
                "resolution_w" => cfg.resolution_w = value.parse().map_err(|_| bad("integer"))?,
                "batch_size" => cfg.batch_size = value.parse().map_err(|_| bad("integer"))?,
                "iterations" => cfg.iterations = value.parse().map_err(|_| bad("integer"))?,
                "learning_rate" => cfg.learning_rate = value.parse().map_err(|_| bad("number"))?,
                "beta1" => cfg.beta1 = value.parse().map_err(|_| bad("number"))?,
                "beta2" => cfg.beta2 = value.parse().map_err(|_| bad("number"))?,
                "lambda_warp" => cfg.lambda_warp = value.parse().map_err(|_| bad("number"))?,
                "lambda_perceptual" => {
                    cfg.lambda_perceptual = value.parse().map_err(|_| bad("number"))?
                }
                "lambda_l1" => cfg.lambda_l1 = value.parse().map_err(|_| bad("number"))?,
                "lambda_adv" => cfg.lambda_adv = value.parse().map_err(|_| bad("number"))?,
                "gp_weight" => cfg.gp_weight = value.parse().map_err(|_| bad("number"))?,
                "adv_variant" => cfg.adv_variant = value.parse()?,
                "data_source" => {
                    cfg.data_source = match value {
                        "synthetic" => DataSource::Synthetic,
                        "manifest" => DataSource::Manifest,
                        _ => return Err(bad("source (synthetic|manifest)")),
                    }
                }
                "manifest_path" => {
                    cfg.manifest_path = if value.is_empty() {
                        None
                    } else {
                        Some(PathBuf::from(value))
                    }
                }
                "dataset_size" => cfg.dataset_size = value.parse().map_err(|_| bad("integer"))?,
                "warp_magnitude" => {
                    cfg.warp_magnitude = value.parse().map_err(|_| bad("number"))?
                }
                "mask_fill" => cfg.mask_fill = value.parse().map_err(|_| bad("number"))?,
                "checkpoint_interval" => {
                    cfg.checkpoint_interval = value.parse().map_err(|_| bad("integer"))?
                }
                "checkpoint_dir" => cfg.checkpoint_dir = PathBuf::from(value),
                "no_adv" => cfg.no_adv = value.parse().map_err(|_| bad("bool"))?,
                "paired_adv" => cfg.paired_adv = value.parse().map_err(|_| bad("bool"))?,
                "no_e2e_warp" => cfg.no_e2e_warp = value.parse().map_err(|_| bad("bool"))?,
                "box_mask" => cfg.box_mask = value.parse().map_err(|_| bad("bool"))?,
                "extractor_seed" => cfg.extractor_seed = value.parse().map_err(|_| bad("integer"))?,
                "standard_kernel" => {
                    cfg.standard_kernel = value.parse().map_err(|_| bad("integer"))?
                }
                "strided_kernel" => {
                    cfg.strided_kernel = value.parse().map_err(|_| bad("integer"))?
                }
                "disc_depths" => cfg.disc_depths = parse_list(value, key)?,
                "regressor_strided" => cfg.regressor_strided = parse_list(value, key)?,
                "regressor_standard" => cfg.regressor_standard = parse_list(value, key)?,
                other => {
                    return Err(Error::contract(format!(
                        "config line {}: unknown key `{other}`",
                        i + 1
                    )))
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<TrainConfig> {
        let text = std::fs::read_to_string(path)?;
        TrainConfig::parse(&text)
    }

    /// Full documented key set with current values.
    pub fn to_text(&self) -> String {
        format!(
            "\
# ---- reproducibility ----
# master seed for weights, data and batch order
seed = {seed}
# seed of the frozen perceptual feature extractor
extractor_seed = {extractor_seed}

# ---- data ----
# input resolution; must be divisible by 32
resolution_h = {rh}
resolution_w = {rw}
# synthetic | manifest
data_source = {source}
# manifest.csv path (only for data_source = manifest)
manifest_path = {manifest}
# number of synthetic triplets in one epoch
dataset_size = {dataset_size}
# max control-point displacement of synthetic warps, in [0, 0.3]
warp_magnitude = {warp_magnitude}
# gray value filling the masked region, in [-1, 1]
mask_fill = {mask_fill}

# ---- optimization ----
batch_size = {batch}
iterations = {iters}
learning_rate = {lr}
beta1 = {b1}
beta2 = {b2}

# ---- loss weights ----
lambda_warp = {lw}
lambda_perceptual = {lp}
lambda_l1 = {ll}
lambda_adv = {la}
# gradient penalty coefficient on the discriminator loss
gp_weight = {gp}
# rsgan (pairwise) | ragan (relativistic average)
adv_variant = {variant}

# ---- ablation flags ----
# drop the adversarial term entirely
no_adv = {no_adv}
# adversarial loss on the paired synthesis instead of the unpaired pass
paired_adv = {paired_adv}
# stop image-loss gradients at the matcher (warp loss only)
no_e2e_warp = {no_e2e}
# rectangular box masks instead of region masks
box_mask = {box_mask}

# ---- checkpointing ----
checkpoint_interval = {interval}
checkpoint_dir = {dir}

# ---- architecture ----
# encoder kernel sizes: standard (odd) and 2-strided (3 or 4)
standard_kernel = {sk}
strided_kernel = {stk}
# discriminator downsampling widths (exactly 5)
disc_depths = {dd}
# regression head widths
regressor_strided = {rs}
regressor_standard = {rst}
",
            seed = self.seed,
            extractor_seed = self.extractor_seed,
            rh = self.resolution_h,
            rw = self.resolution_w,
            source = match self.data_source {
                DataSource::Synthetic => "synthetic",
                DataSource::Manifest => "manifest",
            },
            manifest = self
                .manifest_path
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
            dataset_size = self.dataset_size,
            warp_magnitude = self.warp_magnitude,
            mask_fill = self.mask_fill,
            batch = self.batch_size,
            iters = self.iterations,
            lr = self.learning_rate,
            b1 = self.beta1,
            b2 = self.beta2,
            lw = self.lambda_warp,
            lp = self.lambda_perceptual,
            ll = self.lambda_l1,
            la = self.lambda_adv,
            gp = self.gp_weight,
            variant = self.adv_variant,
            no_adv = self.no_adv,
            paired_adv = self.paired_adv,
            no_e2e = self.no_e2e_warp,
            box_mask = self.box_mask,
            interval = self.checkpoint_interval,
            dir = self.checkpoint_dir.display(),
            sk = self.standard_kernel,
            stk = self.strided_kernel,
            dd = list_to_string(&self.disc_depths),
            rs = list_to_string(&self.regressor_strided),
            rst = list_to_string(&self.regressor_standard),
        )
    }
}
