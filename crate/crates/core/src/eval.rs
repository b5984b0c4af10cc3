//! Hyperbolic-space evaluation: zero-shot classification, paired
//! image-text retrieval, geodesic traversal toward the root, and the
//! hierarchy radius report.
//!
//! Everything here is read-only over a trained model. The point-level
//! functions operate on explicit hyperbolic points (tests drive them with
//! adversarial constructions); the model-level wrappers embed images and
//! captions first, in chunks, then delegate.
//!
//! Ranking uses negative Lorentz distance. For a fixed query, ordering by
//! negative distance and by Lorentz inner product coincide (acosh is
//! monotone), which the traversal relies on when it ranks by inner product.

use std::path::Path;

use serde::Serialize;
use thiserror::Error;

use crate::datasynth::{Corpus, Split};
use crate::encoders::{EncoderError, Model};
use crate::lorentz::{
    geodesic_interpolate, lorentz_distance, origin, CurvatureParam, LorentzError, LorentzPoint,
};
use crate::tensor::RawTensor;
use crate::Scalar;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("classification needs at least 2 class prompts, got {got}")]
    NeedTwoClasses { got: usize },
    #[error("count mismatch: {left} vs {right}")]
    CountMismatch { left: usize, right: usize },
    #[error("empty input: {0}")]
    Empty(&'static str),
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Lorentz(#[from] LorentzError),
}

pub type EvalResult<T> = Result<T, EvalError>;

const EMBED_CHUNK: usize = 64;

fn embed_images_chunked<S: Scalar>(
    model: &Model<S>,
    images: &[&RawTensor<S>],
) -> EvalResult<Vec<LorentzPoint<S>>> {
    let mut out = Vec::with_capacity(images.len());
    for chunk in images.chunks(EMBED_CHUNK) {
        out.extend(model.embed_images(chunk)?);
    }
    Ok(out)
}

fn embed_texts_chunked<S: Scalar>(
    model: &Model<S>,
    captions: &[&str],
) -> EvalResult<Vec<LorentzPoint<S>>> {
    let mut out = Vec::with_capacity(captions.len());
    for chunk in captions.chunks(EMBED_CHUNK) {
        out.extend(model.embed_texts(chunk)?);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Zero-shot classification
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ClassStat {
    pub class: usize,
    pub total: usize,
    pub correct: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ClassifyReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassStat>,
}

/// Nearest-prompt prediction over explicit points; ties break toward the
/// lowest class index.
pub fn classify_from_points<S: Scalar>(
    image_points: &[LorentzPoint<S>],
    labels: &[usize],
    class_points: &[LorentzPoint<S>],
    c: &CurvatureParam<S>,
) -> EvalResult<ClassifyReport> {
    if class_points.len() < 2 {
        return Err(EvalError::NeedTwoClasses {
            got: class_points.len(),
        });
    }
    if image_points.len() != labels.len() {
        return Err(EvalError::CountMismatch {
            left: image_points.len(),
            right: labels.len(),
        });
    }
    if image_points.is_empty() {
        return Err(EvalError::Empty("images"));
    }
    let mut per_class: Vec<ClassStat> = (0..class_points.len())
        .map(|class| ClassStat {
            class,
            total: 0,
            correct: 0,
        })
        .collect();
    let mut correct = 0;
    for (img, &label) in image_points.iter().zip(labels) {
        let mut best = 0usize;
        let mut best_sim = S::neg_infinity();
        for (k, prompt) in class_points.iter().enumerate() {
            let sim = -lorentz_distance(img, prompt, c)?;
            if sim > best_sim {
                best_sim = sim;
                best = k;
            }
        }
        per_class[label].total += 1;
        if best == label {
            per_class[label].correct += 1;
            correct += 1;
        }
    }
    Ok(ClassifyReport {
        accuracy: correct as f64 / image_points.len() as f64,
        per_class,
    })
}

/// Zero-shot classification: embed the class prompts once, then predict the
/// highest-similarity prompt for each image.
pub fn zero_shot_classify<S: Scalar>(
    model: &Model<S>,
    images: &[&RawTensor<S>],
    labels: &[usize],
    class_prompts: &[&str],
) -> EvalResult<ClassifyReport> {
    if class_prompts.len() < 2 {
        return Err(EvalError::NeedTwoClasses {
            got: class_prompts.len(),
        });
    }
    let class_points = embed_texts_chunked(model, class_prompts)?;
    let image_points = embed_images_chunked(model, images)?;
    let c = CurvatureParam::with_max(model.curvature(), S::max_value())?;
    classify_from_points(&image_points, labels, &class_points, &c)
}

// ---------------------------------------------------------------------------
// Retrieval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct RecallTable {
    pub ks: Vec<usize>,
    pub image_to_text: Vec<f64>,
    pub text_to_image: Vec<f64>,
}

impl RecallTable {
    pub fn at(&self, k: usize) -> Option<(f64, f64)> {
        self.ks
            .iter()
            .position(|&kk| kk == k)
            .map(|i| (self.image_to_text[i], self.text_to_image[i]))
    }
}

/// 1-based rank of the true partner among all candidates for one query:
/// candidates strictly closer rank ahead, ties resolve by candidate index.
pub fn rank_of_partner<S: Scalar>(
    query: &LorentzPoint<S>,
    candidates: &[LorentzPoint<S>],
    partner: usize,
    c: &CurvatureParam<S>,
) -> EvalResult<usize> {
    let d_true = lorentz_distance(query, &candidates[partner], c)?;
    let mut rank = 1;
    for (j, cand) in candidates.iter().enumerate() {
        if j == partner {
            continue;
        }
        let d = lorentz_distance(query, cand, c)?;
        if d < d_true || (d == d_true && j < partner) {
            rank += 1;
        }
    }
    Ok(rank)
}

/// Recall@k in both directions over 1:1 paired points.
pub fn recall_from_points<S: Scalar>(
    image_points: &[LorentzPoint<S>],
    text_points: &[LorentzPoint<S>],
    ks: &[usize],
    c: &CurvatureParam<S>,
) -> EvalResult<RecallTable> {
    if image_points.len() != text_points.len() {
        return Err(EvalError::CountMismatch {
            left: image_points.len(),
            right: text_points.len(),
        });
    }
    if image_points.is_empty() {
        return Err(EvalError::Empty("pairs"));
    }
    let n = image_points.len();
    let mut i2t_hits = vec![0usize; ks.len()];
    let mut t2i_hits = vec![0usize; ks.len()];
    for i in 0..n {
        let r_i2t = rank_of_partner(&image_points[i], text_points, i, c)?;
        let r_t2i = rank_of_partner(&text_points[i], image_points, i, c)?;
        for (slot, &k) in ks.iter().enumerate() {
            if r_i2t <= k {
                i2t_hits[slot] += 1;
            }
            if r_t2i <= k {
                t2i_hits[slot] += 1;
            }
        }
    }
    Ok(RecallTable {
        ks: ks.to_vec(),
        image_to_text: i2t_hits.iter().map(|h| *h as f64 / n as f64).collect(),
        text_to_image: t2i_hits.iter().map(|h| *h as f64 / n as f64).collect(),
    })
}

/// Recall@k under cosine similarity on raw tangent embeddings — the
/// ranking the Euclidean baseline is scored with.
pub fn recall_from_tangents<S: Scalar>(
    image_tangents: &RawTensor<S>,
    text_tangents: &RawTensor<S>,
    ks: &[usize],
) -> EvalResult<RecallTable> {
    let (n, _) = image_tangents.dims2();
    if n != text_tangents.dims2().0 {
        return Err(EvalError::CountMismatch {
            left: n,
            right: text_tangents.dims2().0,
        });
    }
    if n == 0 {
        return Err(EvalError::Empty("pairs"));
    }
    let cos = |a: &[S], b: &[S]| {
        let dot: S = a.iter().zip(b).map(|(x, y)| *x * *y).sum();
        let na = a.iter().map(|x| *x * *x).sum::<S>().sqrt();
        let nb = b.iter().map(|x| *x * *x).sum::<S>().sqrt();
        (dot / (na * nb).max(S::min_positive_value()))
            .to_f64()
            .unwrap_or(f64::NEG_INFINITY)
    };
    let rank = |query: &[S], candidates: &RawTensor<S>, partner: usize| {
        let s_true = cos(query, candidates.row(partner));
        let mut r = 1;
        for j in 0..n {
            if j == partner {
                continue;
            }
            let s = cos(query, candidates.row(j));
            if s > s_true || (s == s_true && j < partner) {
                r += 1;
            }
        }
        r
    };
    let mut i2t_hits = vec![0usize; ks.len()];
    let mut t2i_hits = vec![0usize; ks.len()];
    for i in 0..n {
        let r_i2t = rank(image_tangents.row(i), text_tangents, i);
        let r_t2i = rank(text_tangents.row(i), image_tangents, i);
        for (slot, &k) in ks.iter().enumerate() {
            if r_i2t <= k {
                i2t_hits[slot] += 1;
            }
            if r_t2i <= k {
                t2i_hits[slot] += 1;
            }
        }
    }
    Ok(RecallTable {
        ks: ks.to_vec(),
        image_to_text: i2t_hits.iter().map(|h| *h as f64 / n as f64).collect(),
        text_to_image: t2i_hits.iter().map(|h| *h as f64 / n as f64).collect(),
    })
}

/// Embed paired images and captions, then measure recall@k both ways.
pub fn retrieval_recall<S: Scalar>(
    model: &Model<S>,
    images: &[&RawTensor<S>],
    captions: &[&str],
    ks: &[usize],
) -> EvalResult<RecallTable> {
    if images.len() != captions.len() {
        return Err(EvalError::CountMismatch {
            left: images.len(),
            right: captions.len(),
        });
    }
    let image_points = embed_images_chunked(model, images)?;
    let text_points = embed_texts_chunked(model, captions)?;
    let c = CurvatureParam::with_max(model.curvature(), S::max_value())?;
    recall_from_points(&image_points, &text_points, ks, &c)
}

/// Mean of the two directions' recall@1 on the validation split, pairing
/// each image with its specific caption. The teacher gate reads this.
pub fn val_recall_at_1<S: Scalar>(model: &Model<S>, corpus: &Corpus<S>) -> EvalResult<f64> {
    let val = corpus.indices(Split::Val);
    if val.is_empty() {
        return Err(EvalError::Empty("validation split"));
    }
    let images: Vec<&RawTensor<S>> = val.iter().map(|&i| &corpus.samples[i].image).collect();
    let captions: Vec<&str> = val
        .iter()
        .map(|&i| corpus.samples[i].captions.specific.as_str())
        .collect();
    let table = retrieval_recall(model, &images, &captions, &[1])?;
    Ok((table.image_to_text[0] + table.text_to_image[0]) / 2.0)
}

// ---------------------------------------------------------------------------
// Geodesic traversal
// ---------------------------------------------------------------------------

/// Walk `steps` uniform interpolants from an image point toward the root,
/// picking the pool caption with the highest Lorentz inner product at each
/// step; duplicates collapse to their first occurrence and at most five
/// survive. The endpoint t=1 (the root itself) is excluded: every caption
/// scores identically there.
pub fn traversal_from_points<S: Scalar>(
    image_point: &LorentzPoint<S>,
    pool_points: &[LorentzPoint<S>],
    pool_captions: &[String],
    steps: usize,
    c: &CurvatureParam<S>,
) -> EvalResult<Vec<String>> {
    if pool_points.is_empty() {
        return Err(EvalError::Empty("caption pool"));
    }
    if pool_points.len() != pool_captions.len() {
        return Err(EvalError::CountMismatch {
            left: pool_points.len(),
            right: pool_captions.len(),
        });
    }
    let root = origin(image_point.dim(), c);
    let mut picks: Vec<usize> = Vec::new();
    for k in 0..steps {
        let t = crate::lit::<S>(k as f64 / steps as f64);
        let gamma = geodesic_interpolate(image_point, &root, t, c)?;
        let mut best = 0usize;
        let mut best_score = S::neg_infinity();
        for (j, p) in pool_points.iter().enumerate() {
            let score = gamma.inner(p)?;
            if score > best_score {
                best_score = score;
                best = j;
            }
        }
        if !picks.contains(&best) {
            picks.push(best);
        }
    }
    picks.truncate(5);
    Ok(picks.iter().map(|&j| pool_captions[j].clone()).collect())
}

/// Embed the pool once and traverse from one image.
pub fn geodesic_traversal<S: Scalar>(
    model: &Model<S>,
    image: &RawTensor<S>,
    caption_pool: &[&str],
    steps: usize,
) -> EvalResult<Vec<String>> {
    let pool_points = embed_texts_chunked(model, caption_pool)?;
    let image_point = embed_images_chunked(model, &[image])?.remove(0);
    let c = CurvatureParam::with_max(model.curvature(), S::max_value())?;
    traversal_from_points(
        &image_point,
        &pool_points,
        &caption_pool.iter().map(|s| s.to_string()).collect::<Vec<_>>(),
        steps,
        &c,
    )
}

// ---------------------------------------------------------------------------
// Hierarchy radius report
// ---------------------------------------------------------------------------

/// Mean space-norms per role over the validation split. After entailment
/// training the expected strict ordering is generic < mid < specific <
/// image; this only reports the numbers.
#[derive(Debug, Clone, Serialize)]
pub struct RadiusReport {
    pub image: f64,
    pub specific: f64,
    pub mid: f64,
    pub generic: f64,
}

impl RadiusReport {
    pub fn strictly_ordered(&self) -> bool {
        self.generic < self.mid && self.mid < self.specific && self.specific < self.image
    }
}

pub fn hierarchy_radius_report<S: Scalar>(
    model: &Model<S>,
    corpus: &Corpus<S>,
) -> EvalResult<RadiusReport> {
    let val = corpus.indices(Split::Val);
    if val.is_empty() {
        return Err(EvalError::Empty("validation split"));
    }
    let mean_norm = |points: &[LorentzPoint<S>]| {
        points
            .iter()
            .map(|p| p.space_norm().to_f64().unwrap_or(f64::NAN))
            .sum::<f64>()
            / points.len() as f64
    };
    let images: Vec<&RawTensor<S>> = val.iter().map(|&i| &corpus.samples[i].image).collect();
    let mut role_means = [0.0f64; 3];
    for (slot, pick) in [
        |s: &crate::datasynth::Sample<S>| s.captions.specific.clone(),
        |s: &crate::datasynth::Sample<S>| s.captions.mid.clone(),
        |s: &crate::datasynth::Sample<S>| s.captions.generic.clone(),
    ]
    .iter()
    .enumerate()
    {
        let captions: Vec<String> = val.iter().map(|&i| pick(&corpus.samples[i])).collect();
        let refs: Vec<&str> = captions.iter().map(|s| s.as_str()).collect();
        role_means[slot] = mean_norm(&embed_texts_chunked(model, &refs)?);
    }
    Ok(RadiusReport {
        image: mean_norm(&embed_images_chunked(model, &images)?),
        specific: role_means[0],
        mid: role_means[1],
        generic: role_means[2],
    })
}

// ---------------------------------------------------------------------------
// Result files
// ---------------------------------------------------------------------------

/// The JSON envelope every evaluation writes.
#[derive(Debug, Serialize)]
pub struct EvalArtifact<M: Serialize> {
    pub task: String,
    pub metrics: M,
    pub config_hash: String,
    pub checkpoint_path: String,
}

pub fn write_json<M: Serialize>(path: &Path, artifact: &EvalArtifact<M>) -> EvalResult<()> {
    let json = serde_json::to_string_pretty(artifact).expect("artifact serializes");
    std::fs::write(path, json).map_err(|source| EvalError::Io {
        context: format!("writing {}", path.display()),
        source,
    })
}
