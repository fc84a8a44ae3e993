//! Training harness: alternating paired and unpaired steps, two Adam
//! optimizers (matcher+generator and discriminator), periodic checkpoints,
//! deterministic batching, and inference from a loaded state.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::Path;
use std::rc::Rc;

use crate::adversary::{self, Discriminator};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::matcher::GeometricMatcher;
use crate::nn::{Adam, Param};
use crate::objectives::{self, LossParts, PerceptualExtractor};
use crate::synth::{self, MaskMode, SynthOptions, TryOnTriplet};
use crate::tensor::{self, Var};
use crate::tps::TpsTheta;
use crate::unet::Generator;

use super::checkpoint::{section_of, Checkpoint, TensorEntry};
use super::config::{DataSource, TrainConfig};

/// Itemized losses of one iteration. `total` is the weighted generator-side
/// objective; discriminator-side terms are reported alongside.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub step: usize,
    pub warp: f32,
    pub l1: f32,
    pub perceptual: f32,
    pub adv_g: f32,
    pub adv_d: f32,
    pub gp: f32,
    pub total: f32,
}

/// All four networks plus the construction seed plumbing.
pub struct Model {
    pub matcher: GeometricMatcher,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub extractor: PerceptualExtractor,
}

impl Model {
    pub fn new(cfg: &TrainConfig) -> Result<Model> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let matcher = GeometricMatcher::new(
            &mut rng,
            cfg.resolution_h,
            cfg.resolution_w,
            &cfg.regressor_widths(),
            cfg.standard_kernel,
            cfg.strided_kernel,
        )?;
        let generator = Generator::new(&mut rng, cfg.standard_kernel, cfg.strided_kernel);
        let discriminator = Discriminator::new(&mut rng, &cfg.disc_depths);
        let extractor = PerceptualExtractor::seeded(cfg.extractor_seed);
        Ok(Model {
            matcher,
            generator,
            discriminator,
            extractor,
        })
    }

    fn sections(&self) -> Vec<(&'static str, Vec<TensorEntry>)> {
        vec![
            ("matcher", section_of(&self.matcher.params(), &self.matcher.buffers())),
            ("generator", section_of(&self.generator.params(), &self.generator.buffers())),
            (
                "discriminator",
                section_of(&self.discriminator.params(), &self.discriminator.buffers()),
            ),
            (
                "perceptual_extractor",
                section_of(&self.extractor.params(), &[]),
            ),
        ]
    }

    fn load_from(&self, ckpt: &Checkpoint) -> Result<()> {
        ckpt.apply_section("matcher", &self.matcher.params(), &self.matcher.buffers())?;
        ckpt.apply_section("generator", &self.generator.params(), &self.generator.buffers())?;
        ckpt.apply_section(
            "discriminator",
            &self.discriminator.params(),
            &self.discriminator.buffers(),
        )?;
        ckpt.apply_section("perceptual_extractor", &self.extractor.params(), &[])?;
        Ok(())
    }

    /// Generator-side trainable parameters (matcher + generator).
    pub fn g_params(&self) -> Vec<Rc<Param>> {
        let mut p = self.matcher.params();
        p.extend(self.generator.params());
        p
    }

    /// Test-time path: match then generate, in eval mode, no graph.
    pub fn infer(&self, agnostic: &Image, cloth: &Image) -> Result<Image> {
        let (h, w) = self.matcher.input_resolution();
        for img in [agnostic, cloth] {
            if img.height() != h || img.width() != w {
                return Err(Error::contract(format!(
                    "inference input {}x{} does not match model resolution {h}x{w}",
                    img.height(),
                    img.width()
                )));
            }
        }
        tensor::no_grad(|| {
            let ap = images_to_var(&[agnostic]);
            let c = images_to_var(&[cloth]);
            let theta = self.matcher.match_theta(&c, &ap, false)?;
            let out = self.generator.generate(&ap, &c, &theta)?;
            let data = out
                .value()
                .index_axis(Axis(0), 0)
                .to_owned()
                .into_dimensionality::<ndarray::Ix3>()
                .unwrap();
            Ok(Image::new(data))
        })
    }
}

/// Rebuild a model from a checkpoint without touching training state or
/// data sources (the inference path).
pub fn load_model(path: &Path) -> Result<(TrainConfig, Model)> {
    let ckpt = Checkpoint::load(path)?;
    let cfg = TrainConfig::parse(&ckpt.config_text)?;
    let model = Model::new(&cfg)?;
    model.load_from(&ckpt)?;
    Ok((cfg, model))
}

fn optimizer_entries(opt: &Adam) -> Vec<TensorEntry> {
    let (_, state) = opt.state();
    let mut entries = Vec::new();
    for (i, (m, v)) in state.iter().enumerate() {
        entries.push(TensorEntry {
            name: format!("m{i}"),
            data: m.clone(),
        });
        entries.push(TensorEntry {
            name: format!("v{i}"),
            data: v.clone(),
        });
    }
    entries
}

fn load_optimizer(opt: &mut Adam, entries: &[TensorEntry], step: usize) -> Result<()> {
    if entries.len() != opt.params().len() * 2 {
        return Err(Error::format("optimizer state length mismatch"));
    }
    let mut state = Vec::with_capacity(opt.params().len());
    for i in 0..opt.params().len() {
        state.push((entries[2 * i].data.clone(), entries[2 * i + 1].data.clone()));
    }
    opt.load_state(step, state);
    Ok(())
}

fn images_to_var(images: &[&Image]) -> Var {
    Var::constant(crate::image::to_batch(images).into_dyn())
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    opt_g: Adam,
    opt_d: Adam,
    rng: ChaCha8Rng,
    step: usize,
    data: Vec<TryOnTriplet>,
    /// Per-item feature stages of the person image under the frozen
    /// extractor; targets never change, so they are computed once.
    target_feats: Vec<Vec<ndarray::ArrayD<f32>>>,
    pub history: Vec<LossBreakdown>,
    pub d_updates: usize,
    pub g_updates: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Trainer> {
        cfg.validate()?;
        let model = Model::new(&cfg)?;
        let opt_g = Adam::new(model.g_params(), cfg.learning_rate, cfg.beta1, cfg.beta2);
        let opt_d = Adam::new(
            model.discriminator.params(),
            cfg.learning_rate,
            cfg.beta1,
            cfg.beta2,
        );
        let rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x5EED));
        let data = load_dataset(&cfg)?;
        if data.is_empty() {
            return Err(Error::contract("training dataset is empty"));
        }
        let target_feats = data
            .iter()
            .map(|t| {
                tensor::no_grad(|| {
                    model
                        .extractor
                        .features(&images_to_var(&[&t.person]))
                        .iter()
                        .map(|v| v.value().clone())
                        .collect()
                })
            })
            .collect();
        Ok(Trainer {
            cfg,
            model,
            opt_g,
            opt_d,
            rng,
            step: 0,
            data,
            target_feats,
            history: Vec::new(),
            d_updates: 0,
            g_updates: 0,
        })
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    pub fn dataset(&self) -> &[TryOnTriplet] {
        &self.data
    }

    /// Batch the cached target features of the selected items per stage.
    fn stacked_target_feats(&self, indices: &[usize]) -> Vec<Var> {
        let stages = self.target_feats[0].len();
        (0..stages)
            .map(|s| {
                let views: Vec<_> = indices
                    .iter()
                    .map(|&i| self.target_feats[i][s].view())
                    .collect();
                Var::constant(ndarray::concatenate(ndarray::Axis(0), &views).unwrap())
            })
            .collect()
    }

    fn sample_indices(&mut self) -> Vec<usize> {
        (0..self.cfg.batch_size)
            .map(|_| self.rng.gen_range(0..self.data.len()))
            .collect()
    }

    fn batch<'a>(&'a self, indices: &[usize]) -> BatchVars {
        let get = |f: fn(&TryOnTriplet) -> &Image| -> Var {
            let imgs: Vec<&Image> = indices.iter().map(|&i| f(&self.data[i])).collect();
            images_to_var(&imgs)
        };
        BatchVars {
            agnostic: get(|t| &t.agnostic),
            cloth: get(|t| &t.cloth),
            worn: get(|t| &t.worn_cloth),
            person: get(|t| &t.person),
            alt_cloth: get(|t| &t.alt_cloth),
        }
    }

    /// Paired pass: reconstruction of the person wearing their own cloth.
    pub fn train_step_paired(&mut self, indices: &[usize]) -> Result<LossBreakdown> {
        let batch = self.batch(indices);
        let theta = self
            .model
            .matcher
            .match_theta(&batch.cloth, &batch.agnostic, true)?;
        let theta_gen = if self.cfg.no_e2e_warp {
            theta.detach()
        } else {
            theta.clone()
        };
        let generated = self
            .model
            .generator
            .generate(&batch.agnostic, &batch.cloth, &theta_gen)?;

        let warp = objectives::warp_loss(&theta, &batch.cloth, &batch.worn)?;
        let l1 = objectives::pixel_l1(&generated, &batch.person)?;
        let target_stages = self.stacked_target_feats(indices);
        let perceptual =
            objectives::perceptual_loss_cached(&generated, &target_stages, &self.model.extractor)?;

        let mut breakdown = LossBreakdown {
            step: self.step,
            warp: warp.item(),
            l1: l1.item(),
            perceptual: perceptual.item(),
            ..Default::default()
        };

        // The paired-adversarial ablation feeds the discriminator the same
        // synthesized image the reconstruction losses see.
        let adv = if self.cfg.paired_adv && !self.cfg.no_adv {
            let (adv_g, adv_d, gp) =
                self.adversarial_update(&generated, &batch.person)?;
            breakdown.adv_g = adv_g.item();
            breakdown.adv_d = adv_d;
            breakdown.gp = gp;
            Some(adv_g)
        } else {
            None
        };

        let parts = LossParts {
            warp: Some(warp),
            perceptual: Some(perceptual),
            l1: Some(l1),
            adv,
        };
        let total = objectives::total_loss(&parts, &self.cfg.loss_weights(), self.step)?;
        breakdown.total = total.item();
        let grads = total.backward();
        self.opt_g.step(&grads);
        self.g_updates += 1;
        Ok(breakdown)
    }

    /// Unpaired pass: fit a different cloth on the same person; adversarial
    /// supervision only. One discriminator update, then one generator update.
    pub fn train_step_unpaired(&mut self, indices: &[usize]) -> Result<(f32, f32, f32)> {
        let batch = self.batch(indices);
        let theta = self
            .model
            .matcher
            .match_theta(&batch.alt_cloth, &batch.agnostic, true)?;
        let theta_gen = if self.cfg.no_e2e_warp {
            theta.detach()
        } else {
            theta
        };
        let generated = self
            .model
            .generator
            .generate(&batch.agnostic, &batch.alt_cloth, &theta_gen)?;
        let (adv_g, adv_d, gp) = self.adversarial_update(&generated, &batch.person)?;

        let g_total = tensor::mul_scalar(&adv_g, self.cfg.lambda_adv);
        let grads = g_total.backward();
        self.opt_g.step(&grads);
        self.g_updates += 1;
        Ok((adv_g.item(), adv_d, gp))
    }

    /// Discriminator update on (real, fake.detach()) with gradient penalty,
    /// then the generator-side relativistic loss against the updated critic.
    /// Returns (g_loss still attached, d_loss value, gp value).
    fn adversarial_update(&mut self, generated: &Var, real: &Var) -> Result<(Var, f32, f32)> {
        let variant = self.cfg.adv_variant;
        let fake_detached = generated.detach();
        let real_scores = self.model.discriminator.critic(real, true)?;
        let fake_scores = self.model.discriminator.critic(&fake_detached, true)?;
        let d_loss = adversary::relativistic_d_loss(&real_scores, &fake_scores, variant)?;
        let gp = adversary::gradient_penalty(
            |x| self.model.discriminator.critic(x, true),
            real,
            &fake_detached,
            &mut self.rng,
        )?;
        let (d_val, gp_val) = (d_loss.item(), gp.item());
        for (name, v) in [("adv_d", d_val), ("gp", gp_val)] {
            if !v.is_finite() {
                return Err(Error::Divergence {
                    term: name.into(),
                    step: self.step,
                });
            }
        }
        let d_total = tensor::add(&d_loss, &tensor::mul_scalar(&gp, self.cfg.gp_weight));
        let d_grads = d_total.backward();
        self.opt_d.step(&d_grads);
        self.d_updates += 1;

        let real_scores = self.model.discriminator.critic(real, true)?;
        let fake_scores = self.model.discriminator.critic(generated, true)?;
        let g_loss = adversary::relativistic_g_loss(&real_scores, &fake_scores, variant)?;
        if !g_loss.item().is_finite() {
            return Err(Error::Divergence {
                term: "adv_g".into(),
                step: self.step,
            });
        }
        Ok((g_loss, d_val, gp_val))
    }

    /// One iteration: a paired step, then (unless ablated away) an unpaired
    /// step.
    pub fn train_iteration(&mut self) -> Result<LossBreakdown> {
        let paired_idx = self.sample_indices();
        let mut breakdown = self.train_step_paired(&paired_idx)?;
        if !self.cfg.no_adv && !self.cfg.paired_adv {
            let unpaired_idx = self.sample_indices();
            let (adv_g, adv_d, gp) = self.train_step_unpaired(&unpaired_idx)?;
            breakdown.adv_g = adv_g;
            breakdown.adv_d = adv_d;
            breakdown.gp = gp;
            breakdown.total += self.cfg.lambda_adv * adv_g;
        }
        self.step += 1;
        breakdown.step = self.step;
        self.history.push(breakdown);
        Ok(breakdown)
    }

    /// Run to `cfg.iterations`, checkpointing periodically. On divergence the
    /// last periodic checkpoint stays on disk and the error propagates.
    pub fn run(&mut self) -> Result<()> {
        let dir = self.cfg.checkpoint_dir.clone();
        while self.step < self.cfg.iterations {
            self.train_iteration()?;
            if self.cfg.checkpoint_interval > 0 && self.step % self.cfg.checkpoint_interval == 0 {
                self.save(&dir.join(format!("step_{:06}.ckpt", self.step)))?;
                self.save(&dir.join("latest.ckpt"))?;
            }
        }
        self.save(&dir.join("latest.ckpt"))?;
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut ckpt = Checkpoint {
            step: self.step as u64,
            config_text: self.cfg.to_text(),
            ..Default::default()
        };
        for (name, entries) in self.model.sections() {
            ckpt.sections.insert(name.to_string(), entries);
        }
        ckpt.sections
            .insert("optimizer_g".into(), optimizer_entries(&self.opt_g));
        ckpt.sections
            .insert("optimizer_d".into(), optimizer_entries(&self.opt_d));
        let mut state = Vec::new();
        state.extend_from_slice(&(self.opt_g.step_count() as u64).to_le_bytes());
        state.extend_from_slice(&(self.opt_d.step_count() as u64).to_le_bytes());
        state.extend_from_slice(&self.rng.get_seed());
        state.extend_from_slice(&self.rng.get_word_pos().to_le_bytes());
        state.extend_from_slice(&(self.d_updates as u64).to_le_bytes());
        state.extend_from_slice(&(self.g_updates as u64).to_le_bytes());
        ckpt.extra.insert("trainer_state".into(), state);
        ckpt.save(path)
    }

    pub fn load(path: &Path) -> Result<Trainer> {
        let ckpt = Checkpoint::load(path)?;
        let cfg = TrainConfig::parse(&ckpt.config_text)?;
        let mut trainer = Trainer::new(cfg)?;
        trainer.model.load_from(&ckpt)?;
        trainer.step = ckpt.step as usize;
        let state = ckpt
            .extra
            .get("trainer_state")
            .ok_or_else(|| Error::format("checkpoint: missing trainer_state"))?;
        if state.len() != 8 + 8 + 32 + 16 + 8 + 8 {
            return Err(Error::format("checkpoint: trainer_state length mismatch"));
        }
        let g_steps = u64::from_le_bytes(state[0..8].try_into().unwrap()) as usize;
        let d_steps = u64::from_le_bytes(state[8..16].try_into().unwrap()) as usize;
        let seed: [u8; 32] = state[16..48].try_into().unwrap();
        let word_pos = u128::from_le_bytes(state[48..64].try_into().unwrap());
        trainer.d_updates = u64::from_le_bytes(state[64..72].try_into().unwrap()) as usize;
        trainer.g_updates = u64::from_le_bytes(state[72..80].try_into().unwrap()) as usize;
        load_optimizer(&mut trainer.opt_g, &ckpt.sections["optimizer_g"], g_steps)?;
        load_optimizer(&mut trainer.opt_d, &ckpt.sections["optimizer_d"], d_steps)?;
        trainer.rng = ChaCha8Rng::from_seed(seed);
        trainer.rng.set_word_pos(word_pos);
        Ok(trainer)
    }

    /// Test-time path: match then generate, in eval mode, no graph.
    pub fn infer(&self, agnostic: &Image, cloth: &Image) -> Result<Image> {
        self.model.infer(agnostic, cloth)
    }

    /// Matcher prediction in eval mode for one (cloth, agnostic) pair.
    pub fn predict_theta(&self, cloth: &Image, agnostic: &Image) -> Result<TpsTheta> {
        tensor::no_grad(|| {
            let theta = self
                .model
                .matcher
                .match_theta(&images_to_var(&[cloth]), &images_to_var(&[agnostic]), false)?;
            let values: Vec<f64> = theta.value().iter().map(|&v| v as f64).collect();
            TpsTheta::from_values(values)
        })
    }
}

struct BatchVars {
    agnostic: Var,
    cloth: Var,
    worn: Var,
    person: Var,
    alt_cloth: Var,
}

fn load_dataset(cfg: &TrainConfig) -> Result<Vec<TryOnTriplet>> {
    match cfg.data_source {
        DataSource::Synthetic => {
            let opts = SynthOptions {
                height: cfg.resolution_h,
                width: cfg.resolution_w,
                warp_magnitude: cfg.warp_magnitude,
                mask_mode: if cfg.box_mask {
                    MaskMode::BoundingBox
                } else {
                    MaskMode::ParsingLike
                },
                fill: cfg.mask_fill,
            };
            Ok((0..cfg.dataset_size)
                .map(|i| synth::sample_triplet(cfg.seed, i, &opts))
                .collect())
        }
        DataSource::Manifest => {
            let path = cfg.manifest_path.as_ref().expect("validated");
            let ds = synth::ingest_real(path)?;
            let triplets: Result<Vec<_>> = ds.iter().collect();
            let triplets = triplets?;
            for t in &triplets {
                if t.person.height() != cfg.resolution_h || t.person.width() != cfg.resolution_w {
                    return Err(Error::contract(format!(
                        "manifest image resolution {}x{} does not match config {}x{}",
                        t.person.height(),
                        t.person.width(),
                        cfg.resolution_h,
                        cfg.resolution_w
                    )));
                }
            }
            Ok(triplets)
        }
    }
}

/// Matcher-side theta for one triplet expressed as a plain array, for tests
/// and reports.
pub fn theta_to_array(theta: &Var) -> Array2<f32> {
    theta
        .value()
        .clone()
        .into_dimensionality::<ndarray::Ix2>()
        .unwrap()
}

/// Tile (reference, cloth, output) rows into a grid image and write a JSON
/// metrics file alongside.
pub fn emit_report(
    rows: &[(Image, Image, Image)],
    metrics: &serde_json::Value,
    grid_path: &Path,
    metrics_path: &Path,
) -> Result<()> {
    let grid = crate::image::tile_grid(rows)?;
    grid.save_png(grid_path)?;
    let text = serde_json::to_string_pretty(metrics)
        .map_err(|e| Error::format(format!("metrics serialization: {e}")))?;
    std::fs::write(metrics_path, text)?;
    Ok(())
}

/// Gradient L2 norm accumulated over a parameter group (probe helper).
pub fn grad_norm(grads: &tensor::Gradients, params: &[Rc<Param>]) -> f32 {
    params
        .iter()
        .map(|p| {
            grads
                .get_or_zeros(&p.var())
                .iter()
                .map(|g| g * g)
                .sum::<f32>()
        })
        .sum::<f32>()
        .sqrt()
}
