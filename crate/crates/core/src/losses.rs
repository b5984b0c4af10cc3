//! Training objectives.
//!
//! Similarity in hyperbolic space is the negative Lorentz distance; logits
//! are similarity divided by the learnable temperature. Four losses share
//! that convention:
//!
//! - the symmetric contrastive loss over a student batch,
//! - the feature-interaction distillation loss, which crosses student
//!   embeddings of one modality with frozen teacher embeddings of the
//!   other (student image vs teacher text, student text vs teacher image),
//! - the entailment loss, penalizing image points that fall outside their
//!   caption's cone (text entails image),
//! - the Euclidean cosine-similarity contrastive baseline.
//!
//! The weighted total composes exactly:
//! `total = contrastive + lambda_d * distillation + lambda_e * entailment`.

use thiserror::Error;

use crate::encoders::{EmbeddingBatch, TAU_MIN};
use crate::lorentz::diff::{cone_violation_diag, distance_matrix, PointsOnTape};
use crate::tensor::{RawTensor, Tape, Tensor, TensorError, TensorResult};
use crate::{lit, Scalar};

#[derive(Debug, Error)]
pub enum LossError {
    #[error("temperature {tau} below minimum {min}")]
    TemperatureBelowMin { tau: f64, min: f64 },
    #[error("batch size mismatch: {left} vs {right}")]
    BatchMismatch { left: usize, right: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("zero-norm vector at row {row} has no cosine similarity")]
    ZeroNormVector { row: usize },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type LossResult<T> = Result<T, LossError>;

/// Weights of the auxiliary terms in the total loss.
#[derive(Debug, Clone, Copy)]
pub struct LossWeights<S: Scalar> {
    pub lambda_distillation: S,
    pub lambda_entailment: S,
}

impl<S: Scalar> Default for LossWeights<S> {
    fn default() -> Self {
        Self {
            lambda_distillation: S::one(),
            lambda_entailment: lit(0.2),
        }
    }
}

/// Counters for clamped degenerate configurations seen while building the
/// loss graph.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct LossWarnings {
    /// Text points that sat at the root and had their cone aperture clamped.
    pub root_text_pairs: usize,
}

/// Scalar summary of one loss evaluation. The per-direction fields are the
/// two halves of the distillation term.
#[derive(Debug, Clone, Copy)]
pub struct LossReport<S: Scalar> {
    pub total: S,
    pub contrastive: S,
    pub distillation: S,
    pub entailment: S,
    pub image_to_text: S,
    pub text_to_image: S,
    pub warnings: LossWarnings,
}

/// A batch of paired hyperbolic embeddings on a tape.
pub struct BatchOnTape<S: Scalar> {
    pub images: PointsOnTape<S>,
    pub texts: PointsOnTape<S>,
}

impl<S: Scalar> BatchOnTape<S> {
    pub fn len(&self) -> usize {
        self.images.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn validate(&self) -> LossResult<()> {
        if self.is_empty() {
            return Err(LossError::EmptyBatch);
        }
        if self.images.batch() != self.texts.batch() {
            return Err(LossError::BatchMismatch {
                left: self.images.batch(),
                right: self.texts.batch(),
            });
        }
        Ok(())
    }
}

/// Put value-level paired embeddings onto a tape as constants, for loss
/// evaluation outside training.
pub fn batch_to_tape<S: Scalar>(
    tape: &Tape<S>,
    batch: &EmbeddingBatch<S>,
) -> LossResult<BatchOnTape<S>> {
    if batch.image_points.len() != batch.text_points.len() {
        return Err(LossError::BatchMismatch {
            left: batch.image_points.len(),
            right: batch.text_points.len(),
        });
    }
    if batch.image_points.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let to_points = |points: &[crate::lorentz::LorentzPoint<S>]| -> LossResult<PointsOnTape<S>> {
        let b = points.len();
        let dim = points[0].dim();
        let mut time = Vec::with_capacity(b);
        let mut space = Vec::with_capacity(b * dim);
        for p in points {
            if p.dim() != dim {
                return Err(LossError::BatchMismatch {
                    left: dim,
                    right: p.dim(),
                });
            }
            time.push(p.time);
            space.extend_from_slice(&p.space);
        }
        Ok(PointsOnTape {
            time: tape.constant(RawTensor::new(&[b, 1], time)?),
            space: tape.constant(RawTensor::new(&[b, dim], space)?),
        })
    };
    Ok(BatchOnTape {
        images: to_points(&batch.image_points)?,
        texts: to_points(&batch.text_points)?,
    })
}

fn check_temperature<S: Scalar>(tau: &Tensor<S>) -> LossResult<()> {
    let value = tau.value().item();
    if value < lit::<S>(TAU_MIN) {
        return Err(LossError::TemperatureBelowMin {
            tau: value.to_f64().unwrap_or(f64::NAN),
            min: TAU_MIN,
        });
    }
    Ok(())
}

/// Mean cross-entropy of the diagonal targets of a `[B,B]` logit matrix.
fn ce_diag<S: Scalar>(logits: &Tensor<S>) -> TensorResult<Tensor<S>> {
    let (b, _) = logits.dims2();
    let log_probs = logits.log_softmax_rows();
    let mut eye = vec![S::zero(); b * b];
    for i in 0..b {
        eye[i * b + i] = S::one();
    }
    let eye = logits.tape().constant(RawTensor::new(&[b, b], eye)?);
    Ok(log_probs
        .mul(&eye)?
        .sum()
        .neg()
        .mul_const(S::one() / lit(b as f64)))
}

/// Symmetric temperature-scaled contrastive loss with negative Lorentz
/// distance as similarity, averaged over the image-to-text and
/// text-to-image directions.
pub fn hyperbolic_contrastive_loss<S: Scalar>(
    batch: &BatchOnTape<S>,
    tau: &Tensor<S>,
    c: &Tensor<S>,
) -> LossResult<Tensor<S>> {
    batch.validate()?;
    check_temperature(tau)?;
    let distances = distance_matrix(&batch.images, &batch.texts, c)?;
    let i2t = ce_diag(&distances.neg().div(tau)?)?;
    let t2i = ce_diag(&distances.transpose().neg().div(tau)?)?;
    Ok(i2t.add(&t2i)?.mul_const(lit(0.5)))
}

/// The two directions of the interaction distillation loss plus their mean.
pub struct DistillationParts<S: Scalar> {
    pub loss: Tensor<S>,
    pub image_to_text: Tensor<S>,
    pub text_to_image: Tensor<S>,
}

/// Feature-interaction distillation: student images against teacher texts
/// and student texts against teacher images, contrastive in both cases,
/// averaged.
pub fn interaction_distillation_loss<S: Scalar>(
    student: &BatchOnTape<S>,
    teacher: &BatchOnTape<S>,
    tau: &Tensor<S>,
    c: &Tensor<S>,
) -> LossResult<DistillationParts<S>> {
    student.validate()?;
    teacher.validate()?;
    if student.len() != teacher.len() {
        return Err(LossError::BatchMismatch {
            left: student.len(),
            right: teacher.len(),
        });
    }
    check_temperature(tau)?;
    let i2t = ce_diag(
        &distance_matrix(&student.images, &teacher.texts, c)?
            .neg()
            .div(tau)?,
    )?;
    let t2i = ce_diag(
        &distance_matrix(&student.texts, &teacher.images, c)?
            .neg()
            .div(tau)?,
    )?;
    Ok(DistillationParts {
        loss: i2t.add(&t2i)?.mul_const(lit(0.5)),
        image_to_text: i2t,
        text_to_image: t2i,
    })
}

/// Mean cone violation with text as the entailing side: each image point
/// should lie inside its caption's cone.
pub fn entailment_loss<S: Scalar>(
    batch: &BatchOnTape<S>,
    c: &Tensor<S>,
    cone_k: S,
) -> LossResult<(Tensor<S>, LossWarnings)> {
    batch.validate()?;
    let (violations, clamped_roots) = cone_violation_diag(&batch.texts, &batch.images, c, cone_k)?;
    Ok((
        violations.mean(),
        LossWarnings {
            root_text_pairs: clamped_roots,
        },
    ))
}

/// Cosine-similarity contrastive baseline on raw tangent vectors.
pub fn euclidean_clip_loss<S: Scalar>(
    image_vecs: &Tensor<S>,
    text_vecs: &Tensor<S>,
    tau: &Tensor<S>,
) -> LossResult<Tensor<S>> {
    let (b, _) = image_vecs.dims2();
    if b == 0 {
        return Err(LossError::EmptyBatch);
    }
    if b != text_vecs.dims2().0 {
        return Err(LossError::BatchMismatch {
            left: b,
            right: text_vecs.dims2().0,
        });
    }
    check_temperature(tau)?;
    for (which, t) in [("image", image_vecs), ("text", text_vecs)] {
        let norms = t.row_norm(S::zero()).value();
        if let Some(row) = norms.data().iter().position(|n| *n == S::zero()) {
            let _ = which;
            return Err(LossError::ZeroNormVector { row });
        }
    }
    let img_unit = image_vecs.div(&image_vecs.row_norm(lit(1e-12)))?;
    let txt_unit = text_vecs.div(&text_vecs.row_norm(lit(1e-12)))?;
    let sim = img_unit.matmul_t(&txt_unit)?;
    let i2t = ce_diag(&sim.div(tau)?)?;
    let t2i = ce_diag(&sim.transpose().div(tau)?)?;
    Ok(i2t.add(&t2i)?.mul_const(lit(0.5)))
}

/// The total loss node plus its scalar report. Teacher embeddings, when
/// present, must be constants on the tape (no gradient recording); the
/// gradient flows only to the student side, the temperature, the curvature,
/// and the modality scales.
pub fn total_loss<S: Scalar>(
    student: &BatchOnTape<S>,
    teacher: Option<&BatchOnTape<S>>,
    tau: &Tensor<S>,
    c: &Tensor<S>,
    cone_k: S,
    weights: &LossWeights<S>,
) -> LossResult<(Tensor<S>, LossReport<S>)> {
    let contrastive = hyperbolic_contrastive_loss(student, tau, c)?;
    let (entailment, warnings) = entailment_loss(student, c, cone_k)?;
    let distillation = teacher
        .map(|t| interaction_distillation_loss(student, t, tau, c))
        .transpose()?;

    let mut total = contrastive.clone();
    if let Some(parts) = &distillation {
        total = total.add(&parts.loss.mul_const(weights.lambda_distillation))?;
    }
    total = total.add(&entailment.mul_const(weights.lambda_entailment))?;

    let report = LossReport {
        total: total.item(),
        contrastive: contrastive.item(),
        distillation: distillation.as_ref().map_or(S::zero(), |p| p.loss.item()),
        entailment: entailment.item(),
        image_to_text: distillation
            .as_ref()
            .map_or(S::zero(), |p| p.image_to_text.item()),
        text_to_image: distillation
            .as_ref()
            .map_or(S::zero(), |p| p.text_to_image.item()),
        warnings,
    };
    Ok((total, report))
}

// ---------------------------------------------------------------------------
// Value-level wrappers
// ---------------------------------------------------------------------------

/// Contrastive loss of a value-level batch.
pub fn contrastive_loss_value<S: Scalar>(
    batch: &EmbeddingBatch<S>,
    tau: S,
    c: S,
) -> LossResult<S> {
    let tape = Tape::new();
    let on_tape = batch_to_tape(&tape, batch)?;
    Ok(hyperbolic_contrastive_loss(&on_tape, &tape.scalar(tau), &tape.scalar(c))?.item())
}

/// Distillation loss of value-level student/teacher batches.
pub fn distillation_loss_value<S: Scalar>(
    student: &EmbeddingBatch<S>,
    teacher: &EmbeddingBatch<S>,
    tau: S,
    c: S,
) -> LossResult<S> {
    let tape = Tape::new();
    let s = batch_to_tape(&tape, student)?;
    let t = batch_to_tape(&tape, teacher)?;
    Ok(
        interaction_distillation_loss(&s, &t, &tape.scalar(tau), &tape.scalar(c))?
            .loss
            .item(),
    )
}

/// Entailment loss of a value-level batch.
pub fn entailment_loss_value<S: Scalar>(
    batch: &EmbeddingBatch<S>,
    c: S,
    cone_k: S,
) -> LossResult<(S, LossWarnings)> {
    let tape = Tape::new();
    let on_tape = batch_to_tape(&tape, batch)?;
    let (loss, warnings) = entailment_loss(&on_tape, &tape.scalar(c), cone_k)?;
    Ok((loss.item(), warnings))
}
