//! The optimization loop: schedule, batching, masking, distillation
//! orchestration, metrics, and checkpoints.
//!
//! A single training thread owns the student parameters. Every source of
//! randomness (batch order, per-sample masks) derives from the config seed,
//! so a fixed seed reproduces the metrics line for line and the checkpoint
//! byte for byte. The teacher, when present, is bound to the tape without
//! gradient recording; its embeddings are projected with the student's live
//! curvature so both models always share one `c`.

pub mod optim;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::datasynth::{tokenize, Corpus, Split, SynthError};
use crate::encoders::{
    checkpoint::{self, CheckpointError, CheckpointMeta},
    EncoderConfig, EncoderError, Model,
};
use crate::lorentz::diff::exp_map_rows;
use crate::losses::{
    euclidean_clip_loss, total_loss, BatchOnTape, LossError, LossReport, LossWeights,
};
use crate::masking::{patchify, random_mask, MaskError, PatchSequence};
use crate::rng::{mix, Rng};
use crate::tensor::{Tape, TensorError};
use crate::{lit, Scalar};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("non-finite loss at step {step}; first offending batch index {batch_index}")]
    NonFiniteLoss { step: usize, batch_index: usize },
    #[error("training set is empty")]
    EmptyTrainSet,
    #[error("teacher gate not met: recall@1 {recall:.3} < {required:.3}")]
    TeacherGate { recall: f64, required: f64 },
    #[error("teacher checkpoint carries no recall measurement")]
    TeacherUnmeasured,
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
}

pub type TrainResult<T> = Result<T, TrainError>;

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> TrainError {
    let context = context.into();
    move |source| TrainError::Io { context, source }
}

/// Minimum validation recall@1 a teacher must reach before distillation.
pub const TEACHER_RECALL_GATE: f64 = 0.9;

/// Which objective the loop optimizes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Objective {
    /// Contrastive + entailment (+ distillation when a teacher is given),
    /// all in hyperbolic space.
    Hyperbolic,
    /// The cosine-similarity contrastive baseline on raw tangents.
    EuclideanClip,
}

/// Full training configuration; mirrors the flat key=value config file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_iters: usize,
    pub base_lr: f64,
    pub weight_decay: f64,
    pub warmup_frac: f64,
    pub mask_ratio: f64,
    pub tau_init: f64,
    pub tau_min: f64,
    pub c_init: f64,
    pub c_max: f64,
    pub cone_k: f64,
    pub lambda_distill: f64,
    pub lambda_entail: f64,
    pub seed: u64,
    pub unmasked_tuning_frac: f64,
    /// Fraction of training pairs that swap the specific caption for the
    /// category-level one. Zero keeps the 1:1 specific pairing; hierarchy
    /// experiments enable it so ambiguous texts exist in training, the way
    /// generic captions recur in natural corpora.
    pub mid_caption_frac: f64,
    /// As above for the generic caption pool.
    pub generic_caption_frac: f64,
    pub log_every: usize,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            max_iters: 5000,
            base_lr: 5e-4,
            weight_decay: 0.2,
            warmup_frac: 0.1,
            mask_ratio: 0.5,
            tau_init: 0.7,
            tau_min: 0.01,
            c_init: 1.0,
            c_max: 10.0,
            cone_k: 0.1,
            lambda_distill: 1.0,
            lambda_entail: 0.2,
            seed: 0,
            unmasked_tuning_frac: 0.0,
            mid_caption_frac: 0.0,
            generic_caption_frac: 0.0,
            log_every: 50,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> TrainResult<()> {
        if !(self.warmup_frac > 0.0 && self.warmup_frac < 1.0) {
            return Err(TrainError::BadConfig(format!(
                "warmup_frac must lie in (0,1), got {}",
                self.warmup_frac
            )));
        }
        if self.tau_min <= 0.0 || self.c_max <= 0.0 || self.cone_k <= 0.0 {
            return Err(TrainError::BadConfig("clamps must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(TrainError::BadConfig(format!(
                "mask_ratio must lie in [0,1), got {}",
                self.mask_ratio
            )));
        }
        if !(0.0..=1.0).contains(&self.unmasked_tuning_frac) {
            return Err(TrainError::BadConfig(
                "unmasked_tuning_frac must lie in [0,1]".into(),
            ));
        }
        if self.mid_caption_frac < 0.0
            || self.generic_caption_frac < 0.0
            || self.mid_caption_frac + self.generic_caption_frac >= 1.0
        {
            return Err(TrainError::BadConfig(
                "caption-level fractions must be >= 0 and sum below 1".into(),
            ));
        }
        if self.lambda_distill < 0.0 || self.lambda_entail < 0.0 {
            return Err(TrainError::BadConfig("loss weights must be >= 0".into()));
        }
        if self.batch_size == 0 || self.max_iters == 0 || self.log_every == 0 {
            return Err(TrainError::BadConfig(
                "batch_size, max_iters, log_every must be positive".into(),
            ));
        }
        Ok(())
    }

    /// Apply one `key = value` pair (config file line or CLI override).
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, String> {
            value
                .parse()
                .map_err(|_| format!("cannot parse '{value}' for key '{key}'"))
        }
        match key {
            "batch_size" => self.batch_size = parse(key, value)?,
            "max_iters" => self.max_iters = parse(key, value)?,
            "base_lr" => self.base_lr = parse(key, value)?,
            "weight_decay" => self.weight_decay = parse(key, value)?,
            "warmup_frac" => self.warmup_frac = parse(key, value)?,
            "mask_ratio" => self.mask_ratio = parse(key, value)?,
            "tau_init" => self.tau_init = parse(key, value)?,
            "tau_min" => self.tau_min = parse(key, value)?,
            "c_init" => self.c_init = parse(key, value)?,
            "c_max" => self.c_max = parse(key, value)?,
            "cone_k" => self.cone_k = parse(key, value)?,
            "lambda_distill" => self.lambda_distill = parse(key, value)?,
            "lambda_entail" => self.lambda_entail = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "unmasked_tuning_frac" => self.unmasked_tuning_frac = parse(key, value)?,
            "mid_caption_frac" => self.mid_caption_frac = parse(key, value)?,
            "generic_caption_frac" => self.generic_caption_frac = parse(key, value)?,
            "log_every" => self.log_every = parse(key, value)?,
            "embed_dim" => self.encoder.embed_dim = parse(key, value)?,
            "width" => self.encoder.width = parse(key, value)?,
            "depth" => self.encoder.depth = parse(key, value)?,
            "heads" => self.encoder.heads = parse(key, value)?,
            "patch_size" => self.encoder.patch_size = parse(key, value)?,
            "vocab_size" => self.encoder.vocab_size = parse(key, value)?,
            "max_text_len" => self.encoder.max_text_len = parse(key, value)?,
            "image_size" => self.encoder.image_size = parse(key, value)?,
            _ => return Err(format!("unknown config key '{key}'")),
        }
        Ok(())
    }

    /// Stable hash of the full configuration, logged with every artifact so
    /// runs can be reproduced from their outputs.
    pub fn config_hash(&self) -> u64 {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in json.as_bytes() {
            h ^= *b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }
}

/// Parse a flat `key = value` config file ('#' starts a comment).
pub fn parse_config_file(text: &str) -> TrainResult<TrainConfig> {
    let mut config = TrainConfig::default();
    for (idx, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(TrainError::Config {
                line: idx + 1,
                message: format!("expected 'key = value', got '{line}'"),
            });
        };
        config
            .apply_kv(key.trim(), value.trim())
            .map_err(|message| TrainError::Config {
                line: idx + 1,
                message,
            })?;
    }
    config.validate()?;
    Ok(config)
}

/// First step of the unmasked tuning phase; `max_iters` when disabled.
pub fn unmasked_tuning_start(config: &TrainConfig) -> usize {
    config.max_iters - ((config.max_iters as f64) * config.unmasked_tuning_frac).round() as usize
}

/// Learning rate at `step`: linear warmup to `base_lr` over the first
/// `warmup_frac` of `max_iters`, then cosine decay to zero.
pub fn lr_at(step: usize, max_iters: usize, base_lr: f64, warmup_frac: f64) -> f64 {
    let warmup = ((max_iters as f64 * warmup_frac).round() as usize).max(1);
    if step <= warmup {
        return base_lr * step as f64 / warmup as f64;
    }
    let progress = (step - warmup) as f64 / (max_iters - warmup) as f64;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// One assembled step of data: masked student views, full teacher views,
/// tokenized captions.
pub struct TrainBatch<S: Scalar> {
    pub student_images: Vec<PatchSequence<S>>,
    pub full_images: Vec<PatchSequence<S>>,
    pub token_ids: Vec<Vec<usize>>,
    pub sample_indices: Vec<usize>,
    /// Caption level used per position (0 specific, 1 mid, 2 generic).
    pub caption_levels: Vec<u8>,
}

/// Build the batch for `step` from corpus rows `indices`, masking each
/// image with a seed derived from (config seed, step, position).
pub fn assemble_batch<S: Scalar>(
    corpus: &Corpus<S>,
    indices: &[usize],
    config: &TrainConfig,
    mask_ratio: f64,
    step: usize,
) -> TrainResult<TrainBatch<S>> {
    let mut student_images = Vec::with_capacity(indices.len());
    let mut full_images = Vec::with_capacity(indices.len());
    let mut token_ids = Vec::with_capacity(indices.len());
    let mut caption_levels = Vec::with_capacity(indices.len());
    for (pos, &idx) in indices.iter().enumerate() {
        let sample = &corpus.samples[idx];
        let full = patchify(&sample.image, config.encoder.patch_size)?;
        let mask_seed = mix(config.seed, (step as u64) << 20 | pos as u64);
        student_images.push(random_mask(&full, mask_ratio, mask_seed)?);
        full_images.push(full);
        // Caption level for this pair: specific unless the config mixes in
        // coarser levels (deterministic per seed, step, and position).
        let draw = (mix(config.seed ^ 0xCA97, (step as u64) << 20 | pos as u64) >> 11) as f64
            / (1u64 << 53) as f64;
        let (caption, level) = if draw < config.generic_caption_frac {
            (&sample.captions.generic, 2u8)
        } else if draw < config.generic_caption_frac + config.mid_caption_frac {
            (&sample.captions.mid, 1u8)
        } else {
            (&sample.captions.specific, 0u8)
        };
        caption_levels.push(level);
        token_ids.push(tokenize(caption, config.encoder.max_text_len)?);
    }
    Ok(TrainBatch {
        student_images,
        full_images,
        token_ids,
        sample_indices: indices.to_vec(),
        caption_levels,
    })
}

/// Precomputed teacher tangents for every corpus sample and caption level.
///
/// The teacher is frozen and always sees full images and full captions, so
/// its tangent embeddings never change across steps; only the shared
/// curvature projection happens per batch (on the tape, so the curvature
/// gradient keeps its teacher-side path). Values are bitwise identical to
/// re-encoding per step.
pub struct TeacherCache<S: Scalar> {
    image_tangents: crate::tensor::RawTensor<S>,
    /// One table per caption level: specific, mid, generic.
    text_tangents: [crate::tensor::RawTensor<S>; 3],
    alpha_img: S,
    alpha_txt: S,
}

impl<S: Scalar> TeacherCache<S> {
    /// Encode the whole corpus through a frozen teacher once.
    pub fn build(teacher: &Model<S>, corpus: &Corpus<S>) -> TrainResult<Self> {
        let images: Vec<&crate::tensor::RawTensor<S>> =
            corpus.samples.iter().map(|s| &s.image).collect();
        let mut image_rows: Vec<crate::tensor::RawTensor<S>> = Vec::new();
        for chunk in images.chunks(64) {
            image_rows.push(teacher.image_tangents(chunk)?);
        }
        let image_tangents = vstack(&image_rows)?;

        let mut text_tables = Vec::new();
        for level in 0..3 {
            let captions: Vec<&str> = corpus
                .samples
                .iter()
                .map(|s| match level {
                    0 => s.captions.specific.as_str(),
                    1 => s.captions.mid.as_str(),
                    _ => s.captions.generic.as_str(),
                })
                .collect();
            let mut rows = Vec::new();
            for chunk in captions.chunks(64) {
                rows.push(teacher.text_tangents(chunk)?);
            }
            text_tables.push(vstack(&rows)?);
        }
        let text_tangents = match (text_tables.pop(), text_tables.pop(), text_tables.pop()) {
            (Some(generic), Some(mid), Some(specific)) => [specific, mid, generic],
            _ => unreachable!("three levels built"),
        };
        Ok(Self {
            image_tangents,
            text_tangents,
            alpha_img: teacher.alpha(true),
            alpha_txt: teacher.alpha(false),
        })
    }

    fn batch_tangents(
        &self,
        batch: &TrainBatch<S>,
    ) -> (crate::tensor::RawTensor<S>, crate::tensor::RawTensor<S>) {
        let gather = |table: &crate::tensor::RawTensor<S>, rows: &[usize]| {
            let cols = table.dims2().1;
            let mut data = Vec::with_capacity(rows.len() * cols);
            for &r in rows {
                data.extend_from_slice(table.row(r));
            }
            crate::tensor::RawTensor::new(&[rows.len(), cols], data).expect("gathered rows")
        };
        let imgs = gather(&self.image_tangents, &batch.sample_indices);
        let cols = self.text_tangents[0].dims2().1;
        let mut txt = Vec::with_capacity(batch.sample_indices.len() * cols);
        for (&idx, &level) in batch.sample_indices.iter().zip(&batch.caption_levels) {
            txt.extend_from_slice(self.text_tangents[level as usize].row(idx));
        }
        let txts = crate::tensor::RawTensor::new(&[batch.sample_indices.len(), cols], txt)
            .expect("gathered text rows");
        (imgs, txts)
    }
}

fn vstack<S: Scalar>(
    rows: &[crate::tensor::RawTensor<S>],
) -> TrainResult<crate::tensor::RawTensor<S>> {
    let cols = rows[0].dims2().1;
    let mut data = Vec::new();
    let mut n = 0;
    for r in rows {
        n += r.dims2().0;
        data.extend_from_slice(r.data());
    }
    Ok(crate::tensor::RawTensor::new(&[n, cols], data)?)
}

/// Encode, project, and reduce one batch to the total loss node.
fn batch_loss<S: Scalar>(
    model: &Model<S>,
    teacher: Option<&TeacherCache<S>>,
    batch: &TrainBatch<S>,
    config: &TrainConfig,
    objective: Objective,
    tape: &Tape<S>,
    bound: &crate::encoders::Bound<S>,
) -> TrainResult<(crate::tensor::Tensor<S>, LossReport<S>)> {
    let slots = model.scalar_slots();
    let img_tangents = model.encode_image(bound, &batch.student_images)?;
    let txt_tangents = model.encode_text(bound, &batch.token_ids)?;

    if objective == Objective::EuclideanClip {
        let loss = euclidean_clip_loss(&img_tangents, &txt_tangents, bound.tensor(slots.tau))?;
        let report = LossReport {
            total: loss.item(),
            contrastive: loss.item(),
            distillation: S::zero(),
            entailment: S::zero(),
            image_to_text: S::zero(),
            text_to_image: S::zero(),
            warnings: Default::default(),
        };
        return Ok((loss, report));
    }

    let student = BatchOnTape {
        images: model.project_to_hyperbolic(bound, &img_tangents, true)?,
        texts: model.project_to_hyperbolic(bound, &txt_tangents, false)?,
    };

    let teacher_batch = match teacher {
        Some(cache) => {
            // Teacher tangents enter as constants (no gradients reach the
            // teacher); the student's live curvature projects them so both
            // models always share one c.
            let (t_img, t_txt) = cache.batch_tangents(batch);
            let curv = bound.tensor(slots.curv);
            let img = tape.constant(t_img).mul_const(cache.alpha_img);
            let txt = tape.constant(t_txt).mul_const(cache.alpha_txt);
            Some(BatchOnTape {
                images: exp_map_rows(&img, curv)?,
                texts: exp_map_rows(&txt, curv)?,
            })
        }
        None => None,
    };

    let weights = LossWeights {
        lambda_distillation: lit(config.lambda_distill),
        lambda_entailment: lit(config.lambda_entail),
    };
    Ok(total_loss(
        &student,
        teacher_batch.as_ref(),
        bound.tensor(slots.tau),
        bound.tensor(slots.curv),
        lit(config.cone_k),
        &weights,
    )?)
}

/// One optimization step: forward, backward, AdamW update, clamps.
pub fn train_step<S: Scalar>(
    model: &mut Model<S>,
    teacher: Option<&TeacherCache<S>>,
    batch: &TrainBatch<S>,
    config: &TrainConfig,
    objective: Objective,
    opt: &mut optim::OptimizerState<S>,
    step: usize,
) -> TrainResult<LossReport<S>> {
    let tape = Tape::new();
    let bound = model.bind(&tape, true);
    let (loss, report) = batch_loss(model, teacher, batch, config, objective, &tape, &bound)?;
    if !report.total.is_finite() {
        let img = model.encode_image(&bound, &batch.student_images)?.value();
        let batch_index = (0..img.dims2().0)
            .find(|&i| img.row(i).iter().any(|v| !v.is_finite()))
            .unwrap_or(0);
        return Err(TrainError::NonFiniteLoss { step, batch_index });
    }
    let grads = tape.backward(&loss)?;
    let lr: S = lit(lr_at(step, config.max_iters, config.base_lr, config.warmup_frac));
    opt.update(model, &bound, &grads, lr, config);
    Ok(report)
}

/// One metrics line, emitted every `log_every` steps and at the end.
#[derive(Debug, Serialize, Deserialize, Clone)]
pub struct MetricsRecord {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub contrastive: f64,
    pub distillation: f64,
    pub entailment: f64,
    pub tau: f64,
    pub c: f64,
    pub wall_ms: u64,
}

struct EpochSampler {
    order: Vec<usize>,
    at: usize,
    rng: Rng,
}

impl EpochSampler {
    fn new(indices: Vec<usize>, seed: u64) -> Self {
        let mut s = Self {
            order: indices,
            at: 0,
            rng: Rng::seed_from_u64(seed),
        };
        s.rng.shuffle(&mut s.order);
        s
    }

    fn next_batch(&mut self, size: usize) -> Vec<usize> {
        let mut batch = Vec::with_capacity(size);
        while batch.len() < size {
            if self.at == self.order.len() {
                self.rng.shuffle(&mut self.order);
                self.at = 0;
            }
            batch.push(self.order[self.at]);
            self.at += 1;
        }
        batch
    }
}

/// Everything a finished run leaves behind.
pub struct TrainOutcome<S: Scalar> {
    pub model: Model<S>,
    pub final_path: PathBuf,
    pub best_path: PathBuf,
    pub metrics_path: PathBuf,
    pub metrics: Vec<MetricsRecord>,
    pub final_report: Option<LossReport<S>>,
}

/// Run the full schedule over the corpus train split. Checkpoints land in
/// `out_dir` (`final.ckpt`, `best.ckpt` by smoothed loss, `metrics.jsonl`).
/// If `unmasked_tuning_frac > 0`, that final fraction of iterations runs
/// with the mask disabled.
pub fn train_loop<S: Scalar>(
    config: &TrainConfig,
    corpus: &Corpus<S>,
    teacher: Option<&Model<S>>,
    objective: Objective,
    role: &str,
    out_dir: &Path,
) -> TrainResult<TrainOutcome<S>> {
    config.validate()?;
    let train_indices = corpus.indices(Split::Train);
    if train_indices.is_empty() {
        return Err(TrainError::EmptyTrainSet);
    }
    fs::create_dir_all(out_dir).map_err(io_err(format!("creating {}", out_dir.display())))?;

    let mut model = Model::<S>::new(config.encoder.clone(), config.seed)?;
    let slots = model.scalar_slots();
    model.store.entry_mut(slots.tau).value.data_mut()[0] = lit(config.tau_init);
    model.store.entry_mut(slots.curv).value.data_mut()[0] = lit(config.c_init);
    let teacher_cache = match teacher {
        Some(t) => {
            // Student and teacher share one curvature value from the start.
            let shared = t.curvature();
            model.store.entry_mut(slots.curv).value.data_mut()[0] = shared;
            Some(TeacherCache::build(t, corpus)?)
        }
        None => None,
    };

    let mut opt = optim::OptimizerState::new(&model);
    let mut sampler = EpochSampler::new(train_indices, mix(config.seed, 1));
    let unmasked_from = unmasked_tuning_start(config);

    let metrics_path = out_dir.join("metrics.jsonl");
    let mut metrics_file =
        fs::File::create(&metrics_path).map_err(io_err("creating metrics log"))?;
    let mut metrics = Vec::new();
    let best_path = out_dir.join("best.ckpt");
    let final_path = out_dir.join("final.ckpt");
    let mut window_sum = 0.0f64;
    let mut window_len = 0usize;
    let mut best_loss = f64::INFINITY;
    let mut final_report = None;
    let started = Instant::now();

    for step in 0..config.max_iters {
        let mask_ratio = if step >= unmasked_from {
            0.0
        } else {
            config.mask_ratio
        };
        let indices = sampler.next_batch(config.batch_size.min(corpus.samples.len()));
        let batch = assemble_batch(corpus, &indices, config, mask_ratio, step)?;
        let report = train_step(
            &mut model,
            teacher_cache.as_ref(),
            &batch,
            config,
            objective,
            &mut opt,
            step,
        )?;
        window_sum += report.total.to_f64().unwrap_or(f64::INFINITY);
        window_len += 1;

        let last = step + 1 == config.max_iters;
        if (step + 1) % config.log_every == 0 || last {
            let record = MetricsRecord {
                step: step + 1,
                lr: lr_at(step, config.max_iters, config.base_lr, config.warmup_frac),
                total: report.total.to_f64().unwrap_or(f64::NAN),
                contrastive: report.contrastive.to_f64().unwrap_or(f64::NAN),
                distillation: report.distillation.to_f64().unwrap_or(f64::NAN),
                entailment: report.entailment.to_f64().unwrap_or(f64::NAN),
                tau: model.tau().to_f64().unwrap_or(f64::NAN),
                c: model.curvature().to_f64().unwrap_or(f64::NAN),
                wall_ms: started.elapsed().as_millis() as u64,
            };
            let line = serde_json::to_string(&record).expect("metrics serialize");
            writeln!(metrics_file, "{line}").map_err(io_err("writing metrics"))?;
            metrics.push(record);

            let window_mean = window_sum / window_len.max(1) as f64;
            if window_mean < best_loss {
                best_loss = window_mean;
                save_model(&best_path, &model, config, role, None)?;
            }
            window_sum = 0.0;
            window_len = 0;
        }
        if last {
            final_report = Some(report);
        }
    }

    save_model(&final_path, &model, config, role, None)?;
    Ok(TrainOutcome {
        model,
        final_path,
        best_path,
        metrics_path,
        metrics,
        final_report,
    })
}

/// Write a checkpoint with the standard meta block.
pub fn save_model<S: Scalar>(
    path: &Path,
    model: &Model<S>,
    config: &TrainConfig,
    role: &str,
    val_recall_at_1: Option<f64>,
) -> TrainResult<()> {
    let meta = CheckpointMeta {
        config: model.config.clone(),
        frozen: model.is_frozen(),
        role: role.to_string(),
        val_recall_at_1,
        seed: config.seed,
    };
    checkpoint::save(path, model, &meta)?;
    Ok(())
}

/// Pretrain the 2x-width teacher (contrastive + entailment, no
/// distillation), measure its validation retrieval recall@1, and store it
/// frozen. Distillation later refuses teachers below the recall gate.
pub fn train_teacher<S: Scalar>(
    config: &TrainConfig,
    corpus: &Corpus<S>,
    out_dir: &Path,
) -> TrainResult<(TrainOutcome<S>, f64)> {
    let mut teacher_config = config.clone();
    teacher_config.encoder = config.encoder.teacher();
    teacher_config.lambda_distill = 0.0;
    let mut outcome = train_loop(
        &teacher_config,
        corpus,
        None,
        Objective::Hyperbolic,
        "teacher",
        out_dir,
    )?;
    let recall = crate::eval::val_recall_at_1(&outcome.model, corpus)?;
    outcome.model.freeze();
    save_model(
        &outcome.final_path,
        &outcome.model,
        &teacher_config,
        "teacher",
        Some(recall),
    )?;
    Ok((outcome, recall))
}

/// Check the stored teacher gate before distillation.
pub fn check_teacher_gate(meta: &CheckpointMeta) -> TrainResult<()> {
    let recall = meta.val_recall_at_1.ok_or(TrainError::TeacherUnmeasured)?;
    if recall < TEACHER_RECALL_GATE {
        return Err(TrainError::TeacherGate {
            recall,
            required: TEACHER_RECALL_GATE,
        });
    }
    Ok(())
}
