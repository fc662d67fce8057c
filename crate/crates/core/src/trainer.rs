//! Alternating adversarial training of the generator and discriminator with
//! resumable checkpoints and ablation switches.
//!
//! Every source of randomness is derived from the configured seed: network
//! initialization from `tch::manual_seed`, and batch indices plus noise from
//! a per-step ChaCha stream keyed by `(seed, step)`. Training is therefore
//! reproducible across processes, and resuming from a checkpoint continues
//! exactly as an uninterrupted run would.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tch::nn::VarStore;
use tch::{Device, Tensor};

use crate::checkpoint;
use crate::dataset::{canonicalize_flip, DatasetManifest, FaceSample, Landmarks};
use crate::discriminator::Discriminator;
use crate::embedder::{Embedder, EmbedderConfig};
use crate::error::{ensure, validation, Error, Result};
use crate::generator::{Generator, GeneratorConfig, IdentityHead};
use crate::losses::{self, LossParts, LossReport, LossWeights};
use crate::optim::{Adam, AdamConfig};
use crate::NOISE_DIM;

const CHECKPOINT_KIND: &str = "tpgan";
pub const LOG_FILE: &str = "train_log.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub total_steps: u64,
    pub seed: u64,
    pub width_multiplier: f64,
    pub weights: LossWeights,
    pub use_local_pathway: bool,
    pub use_ip: bool,
    pub use_adv: bool,
    pub use_sym: bool,
    pub d_steps_per_g_step: usize,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_interval: u64,
    pub output_dir: PathBuf,
    /// Training manifest; the CLI may supply it instead.
    pub train_manifest: Option<PathBuf>,
    /// Frozen embedder for the identity loss; required when `use_ip`.
    pub embedder_checkpoint: Option<PathBuf>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            batch_size: 10,
            learning_rate: 1e-4,
            total_steps: 2000,
            seed: 0,
            width_multiplier: 0.25,
            weights: LossWeights::default(),
            use_local_pathway: true,
            use_ip: true,
            use_adv: true,
            use_sym: true,
            d_steps_per_g_step: 1,
            checkpoint_interval: 500,
            output_dir: PathBuf::from("tpgan-run"),
            train_manifest: None,
            embedder_checkpoint: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.batch_size >= 1, "batch_size must be at least 1");
        ensure!(
            self.learning_rate > 0.0 && self.learning_rate.is_finite(),
            "learning_rate must be positive, got {}",
            self.learning_rate
        );
        ensure!(
            self.width_multiplier > 0.0 && self.width_multiplier.is_finite(),
            "width_multiplier must be positive, got {}",
            self.width_multiplier
        );
        ensure!(self.d_steps_per_g_step >= 1, "d_steps_per_g_step must be at least 1");
        self.weights.validate()
    }

    /// Parses a TOML document; omitted keys take their defaults.
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainingConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("invalid training config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(format!("cannot encode config: {e}")))
    }

    /// Applies `key=value` overrides. Keys are dotted paths into the config
    /// (e.g. `weights.lambda1=0.5`); values are TOML literals, and bare words
    /// are taken as strings.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut doc: toml::Value = toml::Value::try_from(self)
            .map_err(|e| Error::Config(format!("cannot encode config: {e}")))?;
        for item in overrides {
            let (key, raw) = item
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override '{item}' is not key=value")))?;
            let value = parse_toml_value(raw.trim());
            let mut node = &mut doc;
            let parts: Vec<&str> = key.trim().split('.').collect();
            for (i, part) in parts.iter().enumerate() {
                let table = node
                    .as_table_mut()
                    .ok_or_else(|| Error::Config(format!("override key '{key}' is not a table path")))?;
                if i + 1 == parts.len() {
                    table.insert(part.to_string(), value.clone());
                    break;
                }
                node = table
                    .entry(part.to_string())
                    .or_insert_with(|| toml::Value::Table(Default::default()));
            }
        }
        let cfg: TrainingConfig = doc
            .try_into()
            .map_err(|e| Error::Config(format!("invalid override: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_toml_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Header stored alongside the tensors of a training checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointInfo {
    pub step: u64,
    pub config: TrainingConfig,
    pub generator: GeneratorConfig,
    /// Training identities in identity-head class order.
    pub identities: Vec<u32>,
    pub embedder: Option<EmbedderConfig>,
    pub gen_opt_step: i64,
    pub disc_opt_step: i64,
}

/// One step's log record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: u64,
    pub report: LossReport,
    pub d_loss: Option<f64>,
    pub wall_time: f64,
}

struct Batch {
    profile: Tensor,
    frontal: Tensor,
    landmarks: Vec<Landmarks>,
    labels: Vec<i64>,
}

/// Canonicalized training set held in memory.
struct TrainSet {
    profiles: Tensor,
    frontals: Tensor,
    landmarks: Vec<Landmarks>,
    labels: Vec<i64>,
}

impl TrainSet {
    fn new(samples: &[FaceSample], identities: &[u32]) -> Result<Self> {
        ensure!(!samples.is_empty(), "the training manifest is empty");
        let canonical: Vec<FaceSample> = samples.iter().map(canonicalize_flip).collect();
        let labels = canonical
            .iter()
            .map(|s| {
                identities
                    .binary_search(&s.identity)
                    .map(|i| i as i64)
                    .map_err(|_| validation!("identity {} is not a training identity", s.identity))
            })
            .collect::<Result<_>>()?;
        Ok(TrainSet {
            profiles: crate::embedder::stack_profiles(&canonical),
            frontals: crate::embedder::stack_frontals(&canonical),
            landmarks: canonical.iter().map(|s| s.landmarks_profile).collect(),
            labels,
        })
    }

    fn len(&self) -> usize {
        self.labels.len()
    }

    fn batch(&self, idx: &[usize]) -> Batch {
        let t = Tensor::from_slice(&idx.iter().map(|&i| i as i64).collect::<Vec<_>>());
        Batch {
            profile: self.profiles.index_select(0, &t),
            frontal: self.frontals.index_select(0, &t),
            landmarks: idx.iter().map(|&i| self.landmarks[i]).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Randomness for one step, independent of every other step.
fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5450_4741_4e5f_5452);
    rng.set_stream(step);
    rng
}

pub struct Trainer {
    config: TrainingConfig,
    identities: Vec<u32>,
    data: TrainSet,
    gen_vs: VarStore,
    generator: Generator,
    id_head: IdentityHead,
    disc_vs: VarStore,
    discriminator: Discriminator,
    embedder: Option<Embedder>,
    opt_g: Adam,
    opt_d: Adam,
    step: u64,
    clock: Instant,
    elapsed_before: f64,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("step", &self.step)
            .field("config", &self.config)
            .finish_non_exhaustive()
    }
}

impl Trainer {
    /// Builds freshly initialized networks for `samples`. `embedder` must be
    /// given when the identity loss is enabled; it is frozen here.
    pub fn new(config: TrainingConfig, samples: &[FaceSample], embedder: Option<Embedder>) -> Result<Self> {
        config.validate()?;
        if config.use_ip && embedder.is_none() {
            return Err(Error::Config(
                "the identity loss is enabled but no embedder checkpoint was given".into(),
            ));
        }
        let mut identities: Vec<u32> = samples.iter().map(|s| s.identity).collect();
        identities.sort_unstable();
        identities.dedup();
        let data = TrainSet::new(samples, &identities)?;

        tch::manual_seed(config.seed as i64);
        let gen_vs = VarStore::new(Device::Cpu);
        let gen_cfg = GeneratorConfig {
            width_multiplier: config.width_multiplier,
            use_local_pathway: config.use_local_pathway,
        };
        let generator = Generator::new(&gen_vs.root(), gen_cfg)?;
        let id_head = IdentityHead::new(&gen_vs.root(), identities.len() as i64);
        let disc_vs = VarStore::new(Device::Cpu);
        let discriminator = Discriminator::new(&(disc_vs.root() / "disc"), config.width_multiplier);
        let embedder = embedder.map(|mut e| {
            e.freeze();
            e
        });
        let opt_g = Adam::new(&gen_vs, AdamConfig::with_lr(config.learning_rate))?;
        let opt_d = Adam::new(&disc_vs, AdamConfig::with_lr(config.learning_rate))?;
        Ok(Trainer {
            config,
            identities,
            data,
            gen_vs,
            generator,
            id_head,
            disc_vs,
            discriminator,
            embedder,
            opt_g,
            opt_d,
            step: 0,
            clock: Instant::now(),
            elapsed_before: 0.0,
        })
    }

    pub fn config(&self) -> &TrainingConfig {
        &self.config
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn generator(&self) -> &Generator {
        &self.generator
    }

    pub fn generator_vars(&self) -> &VarStore {
        &self.gen_vs
    }

    pub fn discriminator(&self) -> &Discriminator {
        &self.discriminator
    }

    pub fn discriminator_vars(&self) -> &VarStore {
        &self.disc_vs
    }

    pub fn embedder(&self) -> Option<&Embedder> {
        self.embedder.as_ref()
    }

    pub fn identities(&self) -> &[u32] {
        &self.identities
    }

    fn sample_batch(&self, rng: &mut ChaCha8Rng) -> (Batch, Tensor) {
        let n = self.config.batch_size;
        let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..self.data.len())).collect();
        let noise: Vec<f32> = (0..n * NOISE_DIM as usize)
            .map(|_| rng.sample::<f32, _>(StandardNormal))
            .collect();
        let noise = Tensor::from_slice(&noise).view([n as i64, NOISE_DIM]);
        (self.data.batch(&idx), noise)
    }

    fn numeric(&self, err: Error) -> Error {
        match err {
            Error::Numeric(msg) => Error::Numeric(format!("step {}: {msg}", self.step + 1)),
            other => other,
        }
    }

    /// Runs one discriminator update (if enabled) followed by one generator
    /// update and returns the step's record.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        self.train_step_inner().map_err(|e| self.numeric(e))
    }

    fn train_step_inner(&mut self) -> Result<StepRecord> {
        let step = self.step + 1;
        let mut rng = step_rng(self.config.seed, step);
        let (batch, noise) = self.sample_batch(&mut rng);
        let cfg = self.config.clone();
        let w = cfg.weights;

        let out = self
            .generator
            .synthesize(&batch.profile, &batch.landmarks, &noise, true)?;
        let fused = &out.fused_image;

        let d_loss = if cfg.use_adv {
            let fake = fused.detach();
            let mut last = 0.0;
            for _ in 0..cfg.d_steps_per_g_step {
                self.opt_d.zero_grad();
                let real_scores = self.discriminator.score(&batch.frontal, true)?;
                let fake_scores = self.discriminator.score(&fake, true)?;
                let loss = losses::adversarial_d_loss(&real_scores, &fake_scores)?;
                last = losses::value(&loss);
                if !last.is_finite() {
                    return Err(Error::Numeric(format!("discriminator loss is not finite ({last})")));
                }
                loss.backward();
                self.opt_d.step();
            }
            Some(last)
        } else {
            None
        };

        // Terms that are disabled are still measured, outside the graph.
        let measured = |enabled: bool, f: &dyn Fn() -> Result<Tensor>| -> Result<Tensor> {
            if enabled {
                f()
            } else {
                tch::no_grad(|| f())
            }
        };
        let pixel = losses::pixel_loss_total(&out, &batch.frontal, self.generator.specs(), &w)?;
        let sym = measured(cfg.use_sym, &|| losses::symmetry_loss(fused, w.w_lap))?;
        let adv = if cfg.use_adv {
            self.disc_vs.freeze();
            let scores = self.discriminator.score(fused, true);
            self.disc_vs.unfreeze();
            Some(losses::adversarial_g_loss(&scores?)?)
        } else {
            None
        };
        let ip = match &self.embedder {
            Some(e) => Some(measured(cfg.use_ip, &|| losses::identity_loss(fused, &batch.frontal, e))?),
            None => None,
        };
        let tv = losses::tv_loss(fused)?;
        let ce = losses::cross_entropy_id(&self.id_head.logits(&out.identity_vector), &batch.labels)?;

        let parts = LossParts {
            pixel: losses::value(&pixel),
            symmetry: losses::value(&sym),
            adversarial: adv.as_ref().map_or(0.0, losses::value),
            identity: ip.as_ref().map_or(0.0, losses::value),
            tv: losses::value(&tv),
            cross_entropy: losses::value(&ce),
        };
        let effective = LossWeights {
            lambda1: if cfg.use_sym { w.lambda1 } else { 0.0 },
            lambda2: if cfg.use_adv { w.lambda2 } else { 0.0 },
            lambda3: if cfg.use_ip { w.lambda3 } else { 0.0 },
            ..w
        };
        let report = losses::total_synthesis_loss(parts, effective, cfg.batch_size)?;

        let mut objective = pixel + &tv * w.lambda4 + &ce * w.alpha;
        if cfg.use_sym {
            objective = objective + &sym * w.lambda1;
        }
        if let Some(adv) = &adv {
            objective = objective + adv * w.lambda2;
        }
        if let (true, Some(ip)) = (cfg.use_ip, &ip) {
            objective = objective + ip * w.lambda3;
        }
        self.opt_g.zero_grad();
        objective.backward();
        self.opt_g.step();

        self.step = step;
        Ok(StepRecord {
            step,
            report,
            d_loss,
            wall_time: self.elapsed_before + self.clock.elapsed().as_secs_f64(),
        })
    }

    /// Trains until `total_steps`, appending to the log and checkpointing on
    /// schedule. Returns the path of the final checkpoint.
    pub fn run(&mut self) -> Result<PathBuf> {
        self.run_until(self.config.total_steps)
    }

    pub fn run_until(&mut self, last_step: u64) -> Result<PathBuf> {
        let dir = self.config.output_dir.clone();
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let log_path = dir.join(LOG_FILE);
        truncate_log(&log_path, self.step)?;
        let mut log = fs::OpenOptions::new()
            .create(true)
            .append(true)
            .open(&log_path)
            .map_err(|e| Error::io(&log_path, e))?;
        while self.step < last_step {
            let rec = self.train_step()?;
            writeln!(log, "{}", rec.report.log_line(rec.step, rec.d_loss, rec.wall_time))
                .map_err(|e| Error::io(&log_path, e))?;
            let interval = self.config.checkpoint_interval;
            if interval > 0 && rec.step % interval == 0 && rec.step != last_step {
                self.save_checkpoint(&checkpoint_path(&dir, rec.step))?;
            }
        }
        log.flush().map_err(|e| Error::io(&log_path, e))?;
        let path = checkpoint_path(&dir, self.step);
        self.save_checkpoint(&path)?;
        Ok(path)
    }

    fn info(&self) -> CheckpointInfo {
        CheckpointInfo {
            step: self.step,
            config: self.config.clone(),
            generator: *self.generator.config(),
            identities: self.identities.clone(),
            embedder: self.embedder.as_ref().map(|e| e.config().clone()),
            gen_opt_step: self.opt_g.step_count(),
            disc_opt_step: self.opt_d.step_count(),
        }
    }

    /// Writes parameters of every network, optimizer moments and the step.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut tensors = checkpoint::collect_vars(&self.gen_vs);
        tensors.extend(checkpoint::collect_vars(&self.disc_vs));
        if let Some(e) = &self.embedder {
            tensors.extend(checkpoint::collect_vars(e.var_store()));
        }
        tensors.extend(self.opt_g.state("opt.gen"));
        tensors.extend(self.opt_d.state("opt.disc"));
        checkpoint::write_archive(path, CHECKPOINT_KIND, &self.info(), &tensors)
    }

    /// Restores state saved by [`Trainer::save_checkpoint`] into this
    /// trainer. Networks built with a different width or ablation layout
    /// fail with a validation error.
    pub fn restore(&mut self, path: &Path) -> Result<()> {
        let (info, tensors): (CheckpointInfo, _) = checkpoint::read_archive(path, CHECKPOINT_KIND)?;
        ensure!(
            info.identities == self.identities,
            "checkpoint was trained on different identities"
        );
        checkpoint::load_vars(&self.gen_vs, &tensors)?;
        checkpoint::load_vars(&self.disc_vs, &tensors)?;
        if let Some(e) = &mut self.embedder {
            e.copy_from(&tensors)?;
        }
        self.opt_g.load_state("opt.gen", &tensors, info.gen_opt_step)?;
        self.opt_d.load_state("opt.disc", &tensors, info.disc_opt_step)?;
        self.step = info.step;
        self.elapsed_before = 0.0;
        self.clock = Instant::now();
        Ok(())
    }
}

pub fn checkpoint_path(dir: &Path, step: u64) -> PathBuf {
    dir.join(format!("checkpoint-{step:06}.ckpt"))
}

/// Most recent `checkpoint-NNNNNN.ckpt` in `dir`, if any.
pub fn latest_checkpoint(dir: &Path) -> Option<(u64, PathBuf)> {
    let entries = fs::read_dir(dir).ok()?;
    entries
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            let name = e.file_name().into_string().ok()?;
            let step = name.strip_prefix("checkpoint-")?.strip_suffix(".ckpt")?.parse().ok()?;
            Some((step, e.path()))
        })
        .max_by_key(|(s, _)| *s)
}

/// Drops log records after `step` so a resumed run appends cleanly.
fn truncate_log(path: &Path, step: u64) -> Result<()> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(()),
        Err(e) => return Err(Error::io(path, e)),
    };
    let kept: String = text
        .lines()
        .filter(|line| {
            serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v["step"].as_u64())
                .is_some_and(|s| s <= step)
        })
        .map(|l| format!("{l}\n"))
        .collect();
    fs::write(path, kept).map_err(|e| Error::io(path, e))
}

/// Reads a training log, one JSON object per line.
pub fn read_log(path: &Path) -> Result<Vec<serde_json::Value>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .map(|l| serde_json::from_str(l).map_err(|e| Error::corrupt(path, e)))
        .collect()
}

/// Full training entry point: loads the embedder named in the config,
/// resumes from the newest checkpoint in `output_dir` if one exists and
/// trains to `total_steps`.
pub fn train(config: &TrainingConfig, manifest: &DatasetManifest) -> Result<PathBuf> {
    config.validate()?;
    let embedder = match (&config.embedder_checkpoint, config.use_ip) {
        (Some(path), _) => Some(Embedder::load(path)?),
        (None, true) => {
            return Err(Error::Config(
                "use_ip is enabled but embedder_checkpoint is not set".into(),
            ))
        }
        (None, false) => None,
    };
    let samples = manifest.load_all()?;
    let mut trainer = Trainer::new(config.clone(), &samples, embedder)?;
    if let Some((step, path)) = latest_checkpoint(&config.output_dir) {
        let (info, _): (CheckpointInfo, BTreeMap<String, Tensor>) =
            checkpoint::read_archive(&path, CHECKPOINT_KIND)?;
        if !same_run(&info.config, config) {
            return Err(Error::Config(format!(
                "{} holds a run with a different configuration",
                config.output_dir.display()
            )));
        }
        if step <= config.total_steps {
            trainer.restore(&path)?;
        }
    }
    trainer.run()
}

/// Whether two configs describe the same optimization trajectory, ignoring
/// paths, schedule length and checkpoint cadence.
fn same_run(a: &TrainingConfig, b: &TrainingConfig) -> bool {
    let strip = |c: &TrainingConfig| TrainingConfig {
        total_steps: 0,
        checkpoint_interval: 0,
        output_dir: PathBuf::new(),
        train_manifest: None,
        embedder_checkpoint: None,
        ..c.clone()
    };
    strip(a) == strip(b)
}

/// A generator restored from a training checkpoint for inference.
pub struct TrainedGenerator {
    pub vs: VarStore,
    pub generator: Generator,
    pub info: CheckpointInfo,
}

impl std::fmt::Debug for TrainedGenerator {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("TrainedGenerator").field("info", &self.info).finish_non_exhaustive()
    }
}

/// Loads the generator part of a training checkpoint.
pub fn load_generator(path: &Path) -> Result<TrainedGenerator> {
    let (info, tensors): (CheckpointInfo, BTreeMap<String, Tensor>) =
        checkpoint::read_archive(path, CHECKPOINT_KIND)?;
    let vs = VarStore::new(Device::Cpu);
    let generator = Generator::new(&vs.root(), info.generator)?;
    checkpoint::load_vars(&vs, &tensors)?;
    Ok(TrainedGenerator { vs, generator, info })
}

/// Mean of a per-step scalar field over an inclusive step range.
pub fn mean_field(log: &[serde_json::Value], field: &str, steps: std::ops::RangeInclusive<u64>) -> Option<f64> {
    let vals: Vec<f64> = log
        .iter()
        .filter(|v| v["step"].as_u64().is_some_and(|s| steps.contains(&s)))
        .filter_map(|v| v[field].as_f64())
        .collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}
