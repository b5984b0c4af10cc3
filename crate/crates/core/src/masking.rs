//! Patch tokenization and random masking.
//!
//! Images are cut into non-overlapping square patches in row-major order;
//! masking draws an exact-count uniform subset (seeded shuffle, then take),
//! never a Bernoulli one, so the kept count is always
//! `round(N * (1 - ratio))`, floored at one token. Kept tokens retain their
//! original positional indices. There is no reconstruction path: masked
//! tokens are simply dropped.

use thiserror::Error;

use crate::rng::Rng;
use crate::tensor::RawTensor;
use crate::Scalar;

#[derive(Debug, Error, PartialEq)]
pub enum MaskError {
    #[error("image {height}x{width} not divisible by patch size {patch_size}")]
    IndivisibleImage {
        height: usize,
        width: usize,
        patch_size: usize,
    },
    #[error("mask ratio must lie in [0, 1), got {ratio}")]
    RatioOutOfRange { ratio: f64 },
    #[error("expected an [H, W, 3] image, got shape {shape:?}")]
    NotAnImage { shape: Vec<usize> },
    #[error("sequence is masked; unpatchify needs all patches")]
    IncompleteSequence,
}

/// A (possibly masked) sequence of flattened patch tokens.
#[derive(Debug, Clone)]
pub struct PatchSequence<S: Scalar> {
    /// `[kept, patch_dim]` with `patch_dim = 3 * patch_size^2`.
    pub tokens: RawTensor<S>,
    /// Original positions of the kept tokens; strictly increasing.
    pub kept_indices: Vec<usize>,
    /// Patch grid (rows, cols) of the full image.
    pub grid: (usize, usize),
    pub mask_ratio: f64,
    pub patch_size: usize,
}

impl<S: Scalar> PatchSequence<S> {
    /// Total patches in the unmasked grid.
    pub fn num_patches(&self) -> usize {
        self.grid.0 * self.grid.1
    }

    pub fn kept(&self) -> usize {
        self.kept_indices.len()
    }
}

/// Partition an `[H, W, 3]` image into row-major patch tokens; nothing is
/// masked yet.
pub fn patchify<S: Scalar>(
    image: &RawTensor<S>,
    patch_size: usize,
) -> Result<PatchSequence<S>, MaskError> {
    let shape = image.shape();
    if shape.len() != 3 || shape[2] != 3 {
        return Err(MaskError::NotAnImage {
            shape: shape.to_vec(),
        });
    }
    let (h, w) = (shape[0], shape[1]);
    if patch_size == 0 || h % patch_size != 0 || w % patch_size != 0 {
        return Err(MaskError::IndivisibleImage {
            height: h,
            width: w,
            patch_size,
        });
    }
    let (rows, cols) = (h / patch_size, w / patch_size);
    let patch_dim = 3 * patch_size * patch_size;
    let mut tokens = Vec::with_capacity(rows * cols * patch_dim);
    let data = image.data();
    for pr in 0..rows {
        for pc in 0..cols {
            for dy in 0..patch_size {
                let y = pr * patch_size + dy;
                for dx in 0..patch_size {
                    let x = pc * patch_size + dx;
                    let base = (y * w + x) * 3;
                    tokens.extend_from_slice(&data[base..base + 3]);
                }
            }
        }
    }
    Ok(PatchSequence {
        tokens: RawTensor::new(&[rows * cols, patch_dim], tokens).expect("patch grid shape"),
        kept_indices: (0..rows * cols).collect(),
        grid: (rows, cols),
        mask_ratio: 0.0,
        patch_size,
    })
}

/// Reassemble an unmasked patch sequence into the original image, bit for
/// bit.
pub fn unpatchify<S: Scalar>(seq: &PatchSequence<S>) -> Result<RawTensor<S>, MaskError> {
    if seq.kept() != seq.num_patches() {
        return Err(MaskError::IncompleteSequence);
    }
    let p = seq.patch_size;
    let (rows, cols) = seq.grid;
    let (h, w) = (rows * p, cols * p);
    let mut data = vec![S::zero(); h * w * 3];
    for (k, &idx) in seq.kept_indices.iter().enumerate() {
        let (pr, pc) = (idx / cols, idx % cols);
        let token = seq.tokens.row(k);
        let mut src = 0;
        for dy in 0..p {
            let y = pr * p + dy;
            for dx in 0..p {
                let x = pc * p + dx;
                let base = (y * w + x) * 3;
                data[base..base + 3].copy_from_slice(&token[src..src + 3]);
                src += 3;
            }
        }
    }
    Ok(RawTensor::new(&[h, w, 3], data).expect("image shape"))
}

/// Keep a uniformly random, exactly sized subset of tokens. Deterministic
/// for a fixed seed; the kept count is `round(N * (1 - ratio))`, at least 1.
pub fn random_mask<S: Scalar>(
    seq: &PatchSequence<S>,
    ratio: f64,
    seed: u64,
) -> Result<PatchSequence<S>, MaskError> {
    if !(0.0..1.0).contains(&ratio) {
        return Err(MaskError::RatioOutOfRange { ratio });
    }
    let n = seq.kept();
    let keep = (((n as f64) * (1.0 - ratio)).round() as usize).max(1);
    if keep == n {
        let mut out = seq.clone();
        out.mask_ratio = ratio;
        return Ok(out);
    }
    let mut rng = Rng::seed_from_u64(seed);
    let chosen = rng.choose_sorted(n, keep);
    let cols = seq.tokens.dims2().1;
    let mut tokens = Vec::with_capacity(keep * cols);
    let mut kept_indices = Vec::with_capacity(keep);
    for &k in &chosen {
        tokens.extend_from_slice(seq.tokens.row(k));
        kept_indices.push(seq.kept_indices[k]);
    }
    Ok(PatchSequence {
        tokens: RawTensor::new(&[keep, cols], tokens).expect("masked shape"),
        kept_indices,
        grid: seq.grid,
        mask_ratio: ratio,
        patch_size: seq.patch_size,
    })
}
