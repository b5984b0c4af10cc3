//! Toy dual-tower encoders and their learnable scalars.
//!
//! Both towers are pre-norm transformers at miniature scale: the image side
//! embeds flattened patch tokens, prepends a class token, and reads out its
//! final-layer state; the text side embeds bytes causally and reads out at
//! the EOS position. Each tower ends in a linear projection to the shared
//! embedding width, followed by a learnable per-modality scale and the
//! exponential map onto the hyperboloid.
//!
//! Positional embeddings are sinusoidal and frozen: they never receive
//! gradients and stay byte-identical across training. Kept patch tokens use
//! the positional row of their original grid index.
//!
//! The teacher is the same topology at twice the internal width, projected
//! into the same shared embedding space so the interaction losses can cross
//! student and teacher batches.

pub mod checkpoint;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lorentz::diff::{exp_map_rows, PointsOnTape};
use crate::lorentz::LorentzPoint;
use crate::masking::{patchify, MaskError, PatchSequence};
use crate::rng::Rng;
use crate::tensor::{
    concat, embedding_lookup, layer_norm, RawTensor, Tape, Tensor, TensorError,
};
use crate::{datasynth, lit, Scalar};

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("bad encoder config: {0}")]
    BadConfig(String),
    #[error("patch sequence does not fit this model: {reason}")]
    TokenPositionMismatch { reason: String },
    #[error("text of {len} tokens exceeds max_text_len {max}")]
    TextTooLong { len: usize, max: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Synth(#[from] datasynth::SynthError),
}

pub type EncoderResult<T> = Result<T, EncoderError>;

/// Tower topology. `embed_dim` is the shared output space both towers (and
/// teacher and student) project into; `width` is the internal transformer
/// width, doubled for the teacher.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub patch_size: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub image_size: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            width: 64,
            depth: 2,
            heads: 4,
            patch_size: 16,
            vocab_size: 256,
            max_text_len: 16,
            image_size: 32,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> EncoderResult<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(EncoderError::BadConfig(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.patch_size == 0 || self.image_size % self.patch_size != 0 {
            return Err(EncoderError::BadConfig(format!(
                "image_size {} must be a positive multiple of patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.embed_dim == 0 || self.depth == 0 || self.vocab_size < 2 || self.max_text_len < 2 {
            return Err(EncoderError::BadConfig(
                "embed_dim, depth, vocab_size, max_text_len must be meaningful".into(),
            ));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch_size * self.patch_size
    }

    /// The teacher variant: same topology, twice the internal width.
    pub fn teacher(&self) -> Self {
        Self {
            width: self.width * 2,
            ..self.clone()
        }
    }
}

/// Which model produced a batch of embeddings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    Student,
    Teacher,
}

/// Value-level paired embeddings, image i aligned with caption i.
#[derive(Debug, Clone)]
pub struct EmbeddingBatch<S: Scalar> {
    pub image_points: Vec<LorentzPoint<S>>,
    pub text_points: Vec<LorentzPoint<S>>,
    pub source: Source,
}

// ---------------------------------------------------------------------------
// Parameter store
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ParamEntry<S: Scalar> {
    pub name: String,
    pub value: RawTensor<S>,
    /// Whether decoupled weight decay applies (never for gains, biases,
    /// scalars, the class token, or frozen tables).
    pub decay: bool,
    pub trainable: bool,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore<S: Scalar> {
    entries: Vec<ParamEntry<S>>,
}

impl<S: Scalar> ParamStore<S> {
    fn add(&mut self, name: &str, value: RawTensor<S>, decay: bool, trainable: bool) -> usize {
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            decay,
            trainable,
        });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entry(&self, slot: usize) -> &ParamEntry<S> {
        &self.entries[slot]
    }

    pub fn entry_mut(&mut self, slot: usize) -> &mut ParamEntry<S> {
        &mut self.entries[slot]
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &ParamEntry<S>)> {
        self.entries.iter().enumerate()
    }

    pub fn slot_by_name(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    /// Order-sensitive FNV-1a hash over every parameter byte; two stores
    /// with any differing value differ here.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for e in &self.entries {
            for b in e.name.as_bytes() {
                eat(*b);
            }
            for v in e.value.data() {
                for b in v.to_f64().expect("finite").to_bits().to_le_bytes() {
                    eat(b);
                }
            }
        }
        h
    }
}

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct BlockSlots {
    ln1_g: usize,
    ln1_b: usize,
    wqkv: usize,
    bqkv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct TowerSlots {
    blocks: Vec<BlockSlots>,
    pos: usize,
    ln_f_g: usize,
    ln_f_b: usize,
    proj: usize,
}

#[derive(Debug, Clone)]
struct ImageSlots {
    embed_w: usize,
    embed_b: usize,
    cls: usize,
    tower: TowerSlots,
}

#[derive(Debug, Clone)]
struct TextSlots {
    tok_table: usize,
    tower: TowerSlots,
}

/// The learnable scalar slots: temperature, curvature, per-modality scales.
#[derive(Debug, Clone, Copy)]
pub struct ScalarSlots {
    pub tau: usize,
    pub curv: usize,
    pub alpha_img: usize,
    pub alpha_txt: usize,
}

/// A dual-tower model: parameter store plus the slot layout to run it.
#[derive(Debug, Clone)]
pub struct Model<S: Scalar> {
    pub config: EncoderConfig,
    pub store: ParamStore<S>,
    image: ImageSlots,
    text: TextSlots,
    scalars: ScalarSlots,
}

const LN_EPS: f64 = 1e-5;
/// Sinusoidal position tables are rescaled per tower to sit at the right
/// magnitude against the content embeddings: image patches are flat-color
/// and position *is* the cell identity, so the image tower needs a strong
/// positional signal to bind shapes to cells, while byte embeddings are
/// small and O(1) positions would drown them and collapse the text tower
/// toward length-only features.
const IMG_POS_SCALE: f64 = 0.1;
const TXT_POS_SCALE: f64 = 0.1;

/// Parameter construction: fan-in-scaled normals, unit gains, zero biases.
struct Init<S: Scalar> {
    store: ParamStore<S>,
    rng: Rng,
}

impl<S: Scalar> Init<S> {
    fn normal(&mut self, name: &str, shape: &[usize], decay: bool, std: Option<f64>) -> usize {
        // Row-vector parameters (the class token) use their width as fan-in.
        let fan_in = if shape[0] > 1 {
            shape[0]
        } else {
            shape.get(1).copied().unwrap_or(1)
        };
        let std = std.unwrap_or(1.0 / (fan_in as f64).sqrt());
        let numel: usize = shape.iter().product();
        let data: Vec<S> = (0..numel)
            .map(|_| self.rng.normal::<S>() * lit(std))
            .collect();
        self.store.add(
            name,
            RawTensor::new(shape, data).expect("init shape"),
            decay,
            true,
        )
    }

    fn gain(&mut self, name: &str, cols: usize) -> usize {
        self.store.add(
            name,
            RawTensor::new(&[1, cols], vec![S::one(); cols]).expect("gain"),
            false,
            true,
        )
    }

    fn bias(&mut self, name: &str, cols: usize) -> usize {
        self.store.add(name, RawTensor::zeros(&[1, cols]), false, true)
    }

    fn scalar(&mut self, name: &str, v: f64) -> usize {
        self.store.add(name, RawTensor::scalar(lit(v)), false, true)
    }

    fn tower(
        &mut self,
        config: &EncoderConfig,
        prefix: &str,
        pos_rows: usize,
        pos_scale: f64,
    ) -> TowerSlots {
        let w = config.width;
        let pos = self.store.add(
            &format!("{prefix}.pos"),
            sinusoidal_positions(pos_rows, w, pos_scale),
            false,
            false, // frozen
        );
        let blocks = (0..config.depth)
            .map(|i| {
                let p = format!("{prefix}.block{i}");
                BlockSlots {
                    ln1_g: self.gain(&format!("{p}.ln1.g"), w),
                    ln1_b: self.bias(&format!("{p}.ln1.b"), w),
                    wqkv: self.normal(&format!("{p}.attn.wqkv"), &[w, 3 * w], true, None),
                    bqkv: self.bias(&format!("{p}.attn.bqkv"), 3 * w),
                    wo: self.normal(&format!("{p}.attn.wo"), &[w, w], true, None),
                    bo: self.bias(&format!("{p}.attn.bo"), w),
                    ln2_g: self.gain(&format!("{p}.ln2.g"), w),
                    ln2_b: self.bias(&format!("{p}.ln2.b"), w),
                    w1: self.normal(&format!("{p}.mlp.w1"), &[w, 4 * w], true, None),
                    b1: self.bias(&format!("{p}.mlp.b1"), 4 * w),
                    w2: self.normal(&format!("{p}.mlp.w2"), &[4 * w, w], true, None),
                    b2: self.bias(&format!("{p}.mlp.b2"), w),
                }
            })
            .collect();
        // The projection starts at 1/fan_in rather than 1/sqrt(fan_in):
        // post-LN rows have norm ~sqrt(w), and the tangent vectors need to
        // land near unit norm where the exponential map is well-conditioned.
        let proj = self.normal(
            &format!("{prefix}.proj"),
            &[w, config.embed_dim],
            true,
            Some(1.0 / w as f64),
        );
        TowerSlots {
            blocks,
            pos,
            ln_f_g: self.gain(&format!("{prefix}.ln_f.g"), w),
            ln_f_b: self.bias(&format!("{prefix}.ln_f.b"), w),
            proj,
        }
    }
}
pub const TAU_INIT: f64 = 0.7;
pub const TAU_MIN: f64 = 0.01;
pub const CURV_INIT: f64 = 1.0;

fn sinusoidal_positions<S: Scalar>(rows: usize, width: usize, scale: f64) -> RawTensor<S> {
    let mut data = Vec::with_capacity(rows * width);
    for p in 0..rows {
        for j in 0..width {
            let k = (j / 2) as f64;
            let freq = 1.0 / 10000f64.powf(2.0 * k / width as f64);
            let angle = p as f64 * freq;
            let v = if j % 2 == 0 { angle.sin() } else { angle.cos() };
            data.push(lit(v * scale));
        }
    }
    RawTensor::new(&[rows, width], data).expect("position table shape")
}

impl<S: Scalar> Model<S> {
    pub fn new(config: EncoderConfig, seed: u64) -> EncoderResult<Self> {
        config.validate()?;
        let mut init = Init {
            store: ParamStore::default(),
            rng: Rng::seed_from_u64(seed),
        };
        let w = config.width;

        let image = ImageSlots {
            embed_w: init.normal("img.patch_embed.w", &[config.patch_dim(), w], true, None),
            embed_b: init.bias("img.patch_embed.b", w),
            cls: init.normal("img.cls", &[1, w], false, None),
            tower: init.tower(&config, "img", config.num_patches() + 1, IMG_POS_SCALE),
        };
        let text = TextSlots {
            tok_table: init.normal("txt.tok_embed", &[config.vocab_size, w], true, None),
            tower: init.tower(&config, "txt", config.max_text_len, TXT_POS_SCALE),
        };
        let scalars = ScalarSlots {
            tau: init.scalar("tau", TAU_INIT),
            curv: init.scalar("curv", CURV_INIT),
            alpha_img: init.scalar("alpha_img", 1.0),
            alpha_txt: init.scalar("alpha_txt", 1.0),
        };

        Ok(Self {
            config,
            store: init.store,
            image,
            text,
            scalars,
        })
    }

    pub fn scalar_slots(&self) -> ScalarSlots {
        self.scalars
    }

    pub fn tau(&self) -> S {
        self.store.entry(self.scalars.tau).value.item()
    }

    pub fn curvature(&self) -> S {
        self.store.entry(self.scalars.curv).value.item()
    }

    pub fn alpha(&self, source_is_image: bool) -> S {
        let slot = if source_is_image {
            self.scalars.alpha_img
        } else {
            self.scalars.alpha_txt
        };
        self.store.entry(slot).value.item()
    }

    /// Mark every parameter frozen (the teacher after pretraining).
    pub fn freeze(&mut self) {
        for e in &mut self.store.entries {
            e.trainable = false;
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.store.entries.iter().all(|e| !e.trainable)
    }

    /// Put every parameter on a tape; `grad` gates gradient recording (a
    /// frozen entry never records regardless).
    pub fn bind(&self, tape: &Tape<S>, grad: bool) -> Bound<S> {
        Bound {
            tensors: self
                .store
                .iter()
                .map(|(slot, e)| tape.param_leaf(e.value.clone(), slot, grad && e.trainable))
                .collect(),
        }
    }
}

/// Tape-bound parameters, indexed by store slot.
pub struct Bound<S: Scalar> {
    tensors: Vec<Tensor<S>>,
}

impl<S: Scalar> Bound<S> {
    pub fn tensor(&self, slot: usize) -> &Tensor<S> {
        &self.tensors[slot]
    }

    /// Gradient for a slot out of a backward pass over this binding.
    /// Unambiguous even when several models share one tape.
    pub fn grad_of<'g>(
        &self,
        grads: &'g crate::tensor::Gradients<S>,
        slot: usize,
    ) -> Option<&'g RawTensor<S>> {
        grads.wrt(&self.tensors[slot])
    }
}

struct SampleSpan {
    offset: usize,
    len: usize,
    readout: usize,
}

impl<S: Scalar> Model<S> {
    /// Encode masked patch sequences to tangent vectors `[B, embed_dim]`.
    pub fn encode_image(
        &self,
        bound: &Bound<S>,
        batch: &[PatchSequence<S>],
    ) -> EncoderResult<Tensor<S>> {
        if batch.is_empty() {
            return Err(EncoderError::EmptyBatch);
        }
        let tape = bound.tensor(self.image.embed_w).tape();
        let num_patches = self.config.num_patches();
        let mut embedded = Vec::with_capacity(batch.len());
        for seq in batch {
            if seq.tokens.dims2().1 != self.config.patch_dim()
                || seq.num_patches() != num_patches
                || seq.kept_indices.iter().any(|&i| i >= num_patches)
            {
                return Err(EncoderError::TokenPositionMismatch {
                    reason: format!(
                        "sequence grid {:?} patch_dim {} vs model {}x{} patches of dim {}",
                        seq.grid,
                        seq.tokens.dims2().1,
                        self.config.image_size / self.config.patch_size,
                        self.config.image_size / self.config.patch_size,
                        self.config.patch_dim(),
                    ),
                });
            }
            let tokens = tape.constant(seq.tokens.clone());
            let proj = tokens
                .matmul(bound.tensor(self.image.embed_w))?
                .add(bound.tensor(self.image.embed_b))?;
            let with_cls = concat(&[bound.tensor(self.image.cls).clone(), proj], 0)?;
            // Class token sits at positional row 0; kept patches keep the
            // row of their original grid index.
            let mut pos_rows = Vec::with_capacity(seq.kept() + 1);
            pos_rows.push(0);
            pos_rows.extend(seq.kept_indices.iter().map(|i| i + 1));
            let pos = bound.tensor(self.image.tower.pos).gather_rows(&pos_rows)?;
            embedded.push((with_cls.add(&pos)?, 0));
        }
        self.run_tower(&tape, bound, &self.image.tower, embedded, false)
    }

    /// Encode EOS-terminated byte token sequences to tangent vectors
    /// `[B, embed_dim]`.
    ///
    /// Sequences are right-padded with EOS to `max_text_len` and read out
    /// at the final (EOS) position, so every caption length shares one
    /// trained readout position and shorter strings differ from longer
    /// ones only by the length of their trailing EOS run.
    pub fn encode_text(
        &self,
        bound: &Bound<S>,
        token_batch: &[Vec<usize>],
    ) -> EncoderResult<Tensor<S>> {
        if token_batch.is_empty() {
            return Err(EncoderError::EmptyBatch);
        }
        let tape = bound.tensor(self.text.tok_table).tape();
        let max_len = self.config.max_text_len;
        let mut embedded = Vec::with_capacity(token_batch.len());
        for ids in token_batch {
            if ids.len() > max_len {
                return Err(EncoderError::TextTooLong {
                    len: ids.len(),
                    max: max_len,
                });
            }
            let mut padded = ids.clone();
            padded.resize(max_len, crate::datasynth::EOS_TOKEN);
            let emb = embedding_lookup(bound.tensor(self.text.tok_table), &padded)?;
            let pos_rows: Vec<usize> = (0..max_len).collect();
            let pos = bound.tensor(self.text.tower.pos).gather_rows(&pos_rows)?;
            embedded.push((emb.add(&pos)?, max_len - 1));
        }
        self.run_tower(&tape, bound, &self.text.tower, embedded, true)
    }

    /// Shared pre-norm transformer trunk over a ragged batch. Per-token
    /// linear layers run on the concatenated batch; attention runs per
    /// sample (and per head) over row spans.
    fn run_tower(
        &self,
        tape: &Tape<S>,
        bound: &Bound<S>,
        tower: &TowerSlots,
        embedded: Vec<(Tensor<S>, usize)>,
        causal: bool,
    ) -> EncoderResult<Tensor<S>> {
        let heads = self.config.heads;
        let head_dim = self.config.width / heads;
        let scale = lit::<S>(1.0 / (head_dim as f64).sqrt());

        let mut spans = Vec::with_capacity(embedded.len());
        let mut offset = 0;
        for (t, readout) in &embedded {
            let len = t.dims2().0;
            spans.push(SampleSpan {
                offset,
                len,
                readout: offset + readout,
            });
            offset += len;
        }
        let parts: Vec<Tensor<S>> = embedded.into_iter().map(|(t, _)| t).collect();
        let mut x = concat(&parts, 0)?;

        for block in &tower.blocks {
            let normed = layer_norm(
                &x,
                bound.tensor(block.ln1_g),
                bound.tensor(block.ln1_b),
                lit(LN_EPS),
            )?;
            let qkv = normed
                .matmul(bound.tensor(block.wqkv))?
                .add(bound.tensor(block.bqkv))?;
            let mut ctx_parts = Vec::with_capacity(spans.len());
            for span in &spans {
                let rows = qkv.slice_rows(span.offset, span.len)?;
                let mask = causal.then(|| tape.constant(causal_mask(span.len)));
                let mut head_parts = Vec::with_capacity(heads);
                for h in 0..heads {
                    let q = rows.slice_cols(h * head_dim, head_dim)?;
                    let k = rows.slice_cols(self.config.width + h * head_dim, head_dim)?;
                    let v = rows.slice_cols(2 * self.config.width + h * head_dim, head_dim)?;
                    let mut scores = q.matmul_t(&k)?.mul_const(scale);
                    if let Some(m) = &mask {
                        scores = scores.add(m)?;
                    }
                    head_parts.push(scores.softmax_rows().matmul(&v)?);
                }
                ctx_parts.push(concat(&head_parts, 1)?);
            }
            let ctx = concat(&ctx_parts, 0)?;
            let attn_out = ctx
                .matmul(bound.tensor(block.wo))?
                .add(bound.tensor(block.bo))?;
            x = x.add(&attn_out)?;

            let normed2 = layer_norm(
                &x,
                bound.tensor(block.ln2_g),
                bound.tensor(block.ln2_b),
                lit(LN_EPS),
            )?;
            let hidden = normed2
                .matmul(bound.tensor(block.w1))?
                .add(bound.tensor(block.b1))?
                .gelu();
            let mlp_out = hidden
                .matmul(bound.tensor(block.w2))?
                .add(bound.tensor(block.b2))?;
            x = x.add(&mlp_out)?;
        }

        let final_norm = layer_norm(
            &x,
            bound.tensor(tower.ln_f_g),
            bound.tensor(tower.ln_f_b),
            lit(LN_EPS),
        )?;
        let readout_rows: Vec<usize> = spans.iter().map(|s| s.readout).collect();
        let readout = final_norm.gather_rows(&readout_rows)?;
        Ok(readout.matmul(bound.tensor(tower.proj))?)
    }

    /// Scale tangent rows by the modality's alpha and push them through the
    /// exponential map with the model's (shared) curvature.
    pub fn project_to_hyperbolic(
        &self,
        bound: &Bound<S>,
        tangents: &Tensor<S>,
        source_is_image: bool,
    ) -> EncoderResult<PointsOnTape<S>> {
        let alpha = if source_is_image {
            self.scalars.alpha_img
        } else {
            self.scalars.alpha_txt
        };
        let scaled = tangents.mul(bound.tensor(alpha))?;
        Ok(exp_map_rows(&scaled, bound.tensor(self.scalars.curv))?)
    }

    // -- value-level conveniences (no gradients) ----------------------------

    /// Tangent embeddings for full (unmasked) images, `[B, embed_dim]`.
    pub fn image_tangents(&self, images: &[&RawTensor<S>]) -> EncoderResult<RawTensor<S>> {
        let batch: Result<Vec<_>, _> = images
            .iter()
            .map(|img| patchify(img, self.config.patch_size))
            .collect();
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        Ok(self.encode_image(&bound, &batch?)?.value())
    }

    /// Tangent embeddings for captions, `[B, embed_dim]`.
    pub fn text_tangents(&self, captions: &[&str]) -> EncoderResult<RawTensor<S>> {
        let ids: Result<Vec<_>, _> = captions
            .iter()
            .map(|c| datasynth::tokenize(c, self.config.max_text_len))
            .collect();
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        Ok(self.encode_text(&bound, &ids?)?.value())
    }

    /// Project value-level tangents into hyperbolic points.
    pub fn points_from_tangents(
        &self,
        tangents: &RawTensor<S>,
        source_is_image: bool,
    ) -> EncoderResult<Vec<LorentzPoint<S>>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let t = tape.constant(tangents.clone());
        let pts = self.project_to_hyperbolic(&bound, &t, source_is_image)?;
        Ok(points_to_values(&pts))
    }

    pub fn embed_images(&self, images: &[&RawTensor<S>]) -> EncoderResult<Vec<LorentzPoint<S>>> {
        let t = self.image_tangents(images)?;
        self.points_from_tangents(&t, true)
    }

    pub fn embed_texts(&self, captions: &[&str]) -> EncoderResult<Vec<LorentzPoint<S>>> {
        let t = self.text_tangents(captions)?;
        self.points_from_tangents(&t, false)
    }
}

/// Extract value-level points from a tape batch.
pub fn points_to_values<S: Scalar>(pts: &PointsOnTape<S>) -> Vec<LorentzPoint<S>> {
    let time = pts.time.value();
    let space = pts.space.value();
    (0..time.dims2().0)
        .map(|i| LorentzPoint::new(time.data()[i], space.row(i).to_vec()))
        .collect()
}

fn causal_mask<S: Scalar>(len: usize) -> RawTensor<S> {
    let mut data = vec![S::zero(); len * len];
    for i in 0..len {
        for j in (i + 1)..len {
            data[i * len + j] = lit(-1e9);
        }
    }
    RawTensor::new(&[len, len], data).expect("mask shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::masking::random_mask;
    use crate::rng::Rng;

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            embed_dim: 16,
            width: 16,
            depth: 2,
            heads: 2,
            patch_size: 8,
            vocab_size: 256,
            max_text_len: 16,
            image_size: 16,
        }
    }

    fn random_image(rng: &mut Rng, size: usize) -> RawTensor<f64> {
        RawTensor::new(
            &[size, size, 3],
            (0..size * size * 3).map(|_| rng.uniform::<f64>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn image_output_shape_is_batch_by_embed() {
        let model: Model<f64> = Model::new(small_config(), 1).unwrap();
        let mut rng = Rng::seed_from_u64(2);
        let seqs: Vec<_> = (0..3)
            .map(|_| patchify(&random_image(&mut rng, 16), 8).unwrap())
            .collect();
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let out = model.encode_image(&bound, &seqs).unwrap();
        assert_eq!(out.shape(), vec![3, 16]);
    }

    #[test]
    fn text_output_shape_and_determinism() {
        let model: Model<f64> = Model::new(small_config(), 1).unwrap();
        let ids = datasynth::tokenize("2k rc6", 16).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let out = model
            .encode_text(&bound, &[ids.clone(), ids.clone()])
            .unwrap()
            .value();
        assert_eq!(out.shape(), &[2, 16]);
        // Identical captions give bit-identical rows.
        assert_eq!(out.row(0), out.row(1));
    }

    #[test]
    fn permuting_kept_tokens_with_their_positions_is_invariant() {
        let model: Model<f64> = Model::new(small_config(), 3).unwrap();
        let mut rng = Rng::seed_from_u64(4);
        let seq = patchify(&random_image(&mut rng, 16), 8).unwrap();

        let forward = |seq: &PatchSequence<f64>| {
            let tape = Tape::new();
            let bound = model.bind(&tape, false);
            model.encode_image(&bound, &[seq.clone()]).unwrap().value()
        };
        let base = forward(&seq);

        // Reverse token order together with the positional ids.
        let cols = seq.tokens.dims2().1;
        let mut permuted_tokens = Vec::new();
        for k in (0..seq.kept()).rev() {
            permuted_tokens.extend_from_slice(seq.tokens.row(k));
        }
        let permuted = PatchSequence {
            tokens: RawTensor::new(&[seq.kept(), cols], permuted_tokens).unwrap(),
            kept_indices: seq.kept_indices.iter().rev().copied().collect(),
            grid: seq.grid,
            mask_ratio: seq.mask_ratio,
            patch_size: seq.patch_size,
        };
        let out = forward(&permuted);
        for (a, b) in base.data().iter().zip(out.data()) {
            assert!((a - b).abs() <= 1e-5, "permutation changed output: {a} vs {b}");
        }
    }

    #[test]
    fn zero_weights_give_zero_embedding() {
        let mut model: Model<f64> = Model::new(small_config(), 5).unwrap();
        for slot in 0..model.store.len() {
            let e = model.store.entry_mut(slot);
            if e.name != "curv" && e.name != "tau" {
                let z = RawTensor::zeros(e.value.shape());
                e.value = z;
            }
        }
        let mut rng = Rng::seed_from_u64(6);
        let seq = patchify(&random_image(&mut rng, 16), 8).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let out = model.encode_image(&bound, &[seq]).unwrap().value();
        assert!(out.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn masked_sequences_encode_with_fewer_tokens() {
        let model: Model<f64> = Model::new(small_config(), 7).unwrap();
        let mut rng = Rng::seed_from_u64(8);
        let full = patchify(&random_image(&mut rng, 16), 8).unwrap();
        let masked = random_mask(&full, 0.5, 9).unwrap();
        assert_eq!(masked.kept(), 2);
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let out = model.encode_image(&bound, &[masked]).unwrap();
        assert_eq!(out.shape(), vec![1, 16]);
    }

    #[test]
    fn alpha_scaling_grows_space_norm() {
        let model: Model<f64> = Model::new(small_config(), 10).unwrap();
        let mut rng = Rng::seed_from_u64(11);
        let tangents = RawTensor::new(
            &[3, 16],
            (0..48).map(|_| rng.normal::<f64>()).collect(),
        )
        .unwrap();
        let pts1 = model.points_from_tangents(&tangents, true).unwrap();

        let mut doubled = model.clone();
        let slot = doubled.scalars.alpha_img;
        doubled.store.entry_mut(slot).value = RawTensor::scalar(2.0);
        let pts2 = doubled.points_from_tangents(&tangents, true).unwrap();

        for (a, b) in pts1.iter().zip(&pts2) {
            assert!(b.space_norm() > a.space_norm());
        }
    }

    #[test]
    fn projection_lands_on_manifold_for_any_params() {
        let model: Model<f64> = Model::new(small_config(), 12).unwrap();
        let mut rng = Rng::seed_from_u64(13);
        let seqs: Vec<_> = (0..4)
            .map(|_| patchify(&random_image(&mut rng, 16), 8).unwrap())
            .collect();
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let tangents = model.encode_image(&bound, &seqs).unwrap();
        let pts = model.project_to_hyperbolic(&bound, &tangents, true).unwrap();
        let c = crate::lorentz::CurvatureParam::new(model.curvature()).unwrap();
        for p in points_to_values(&pts) {
            assert!(p.manifold_defect(&c) <= 1e-10);
        }
    }

    #[test]
    fn changing_a_pre_eos_token_changes_the_embedding() {
        let model: Model<f64> = Model::new(small_config(), 14).unwrap();
        let a = model.text_tangents(&["2k rc6"]).unwrap();
        let b = model.text_tangents(&["2k gc6"]).unwrap();
        let diff: f64 = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(diff > 1e-6, "embedding insensitive to token change");
    }

    #[test]
    fn oversized_text_and_bad_sequences_rejected() {
        let model: Model<f64> = Model::new(small_config(), 15).unwrap();
        let tape = Tape::new();
        let bound = model.bind(&tape, false);
        let long: Vec<usize> = (0..17).map(|i| (i % 200) + 1).collect();
        assert!(matches!(
            model.encode_text(&bound, &[long]).unwrap_err(),
            EncoderError::TextTooLong { len: 17, max: 16 }
        ));
        let mut rng = Rng::seed_from_u64(16);
        let mut seq = patchify(&random_image(&mut rng, 16), 8).unwrap();
        seq.kept_indices[0] = 99;
        assert!(matches!(
            model.encode_image(&bound, &[seq]).unwrap_err(),
            EncoderError::TokenPositionMismatch { .. }
        ));
    }

    #[test]
    fn frozen_positions_never_trainable() {
        let model: Model<f32> = Model::new(EncoderConfig::default(), 17).unwrap();
        for (_, e) in model.store.iter() {
            if e.name.ends_with(".pos") {
                assert!(!e.trainable && !e.decay);
            }
        }
    }

    #[test]
    fn teacher_config_doubles_width_only() {
        let cfg = EncoderConfig::default();
        let t = cfg.teacher();
        assert_eq!(t.width, 128);
        assert_eq!(t.embed_dim, cfg.embed_dim);
        assert_eq!(t.depth, cfg.depth);
    }

    #[test]
    fn checksum_tracks_any_value_change() {
        let model: Model<f64> = Model::new(small_config(), 18).unwrap();
        let base = model.store.checksum();
        let mut other = model.clone();
        other.store.entry_mut(0).value.data_mut()[0] += 1e-9;
        assert_ne!(base, other.store.checksum());
        assert_eq!(base, model.store.checksum());
    }
}
