//! Procedural hierarchical image-caption corpus.
//!
//! Scenes are 1-3 flat-colored shapes (circle, square, triangle) from an
//! 8-color palette placed on distinct cells of a 4x4 grid over one of four
//! background colors. Each scene carries three caption levels with
//! entailment by construction:
//!
//! - `specific` — a compact, collision-free encoding of the whole scene,
//!   e.g. `"2k rc6 bs9"` (count+background, then color/kind/cell tokens);
//! - `mid` — the count+background category, e.g. `"2k"`, shared by many
//!   scenes and a strict prefix of its `specific`;
//! - `generic` — one of four fixed strings (`img`, `pic`, `fig`, `art`).
//!
//! Captions are deliberately terse so every level tokenizes within the
//! default 16-token budget of the byte-level vocabulary. Training pairs use
//! only the `specific` caption; `mid` and `generic` exist for hierarchy
//! evaluation.
//!
//! Images are rasterized without anti-aliasing and stored as binary PPM
//! (P6, 8-bit); the manifest is JSON-lines. Generation is deterministic per
//! seed, byte for byte.

use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{mix, Rng};
use crate::tensor::RawTensor;
use crate::{lit, Scalar};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },
    #[error("image size {size} must be a positive multiple of {GRID} for the {GRID}x{GRID} grid")]
    BadImageSize { size: usize },
    #[error("corpus size must be at least 1")]
    EmptyCorpus,
    #[error("caption '{caption}' does not fit in {max_len} tokens (needs {needed})")]
    CaptionTooLong {
        caption: String,
        max_len: usize,
        needed: usize,
    },
    #[error("caption contains a NUL byte, which is reserved for end-of-sequence")]
    NulInCaption,
    #[error("malformed PPM file {path}: {reason}")]
    BadPpm { path: String, reason: &'static str },
    #[error("malformed manifest line {line}: {reason}")]
    BadManifest { line: usize, reason: String },
}

fn io_err(context: impl Into<String>) -> impl FnOnce(std::io::Error) -> SynthError {
    let context = context.into();
    move |source| SynthError::Io { context, source }
}

/// Grid side length; scenes place shapes on GRID x GRID cells.
pub const GRID: usize = 4;
/// End-of-sequence token id for the byte-level tokenizer.
pub const EOS_TOKEN: usize = 0;

pub const SHAPE_COLORS: [(u8, u8, u8); 8] = [
    (230, 57, 70),   // r
    (67, 160, 71),   // g
    (66, 103, 244),  // b
    (250, 204, 21),  // y
    (216, 27, 196),  // m
    (34, 211, 238),  // c
    (249, 115, 22),  // o
    (147, 51, 234),  // p
];
pub const SHAPE_COLOR_CODES: [char; 8] = ['r', 'g', 'b', 'y', 'm', 'c', 'o', 'p'];

pub const BACKGROUNDS: [(u8, u8, u8); 4] = [
    (16, 16, 20),    // k
    (242, 242, 242), // w
    (20, 20, 60),    // n
    (60, 40, 20),    // u
];
pub const BACKGROUND_CODES: [char; 4] = ['k', 'w', 'n', 'u'];

pub const GENERIC_POOL: [&str; 4] = ["img", "pic", "fig", "art"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

impl ShapeKind {
    pub fn code(self) -> char {
        match self {
            ShapeKind::Circle => 'c',
            ShapeKind::Square => 's',
            ShapeKind::Triangle => 't',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Shape {
    pub kind: ShapeKind,
    /// Index into [`SHAPE_COLORS`].
    pub color: usize,
    /// Cell position on the 4x4 grid, row-major 0..16.
    pub cell: usize,
}

/// One scene: up to three shapes on distinct cells plus a background.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub shapes: Vec<Shape>,
    /// Index into [`BACKGROUNDS`].
    pub background: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionLevels {
    pub specific: String,
    pub mid: String,
    pub generic: String,
}

impl SceneSpec {
    /// Draw a random scene; shapes always sit on distinct cells.
    pub fn sample(rng: &mut Rng, seed: u64) -> Self {
        let count = 1 + rng.below(3);
        let cells = rng.choose_sorted(GRID * GRID, count);
        let shapes = cells
            .into_iter()
            .map(|cell| Shape {
                kind: match rng.below(3) {
                    0 => ShapeKind::Circle,
                    1 => ShapeKind::Square,
                    _ => ShapeKind::Triangle,
                },
                color: rng.below(SHAPE_COLORS.len()),
                cell,
            })
            .collect();
        Self {
            shapes,
            background: rng.below(BACKGROUNDS.len()),
            seed,
        }
    }

    /// All three caption levels; `mid` is a strict prefix of `specific`.
    pub fn captions(&self, rng: &mut Rng) -> CaptionLevels {
        let mid = format!(
            "{}{}",
            self.shapes.len(),
            BACKGROUND_CODES[self.background]
        );
        let mut specific = mid.clone();
        for s in &self.shapes {
            specific.push(' ');
            specific.push(SHAPE_COLOR_CODES[s.color]);
            specific.push(s.kind.code());
            specific.push(char::from_digit(s.cell as u32, 16).expect("cell < 16"));
        }
        CaptionLevels {
            specific,
            mid,
            generic: GENERIC_POOL[rng.below(GENERIC_POOL.len())].to_string(),
        }
    }
}

// ---------------------------------------------------------------------------
// Rendering
// ---------------------------------------------------------------------------

/// Rasterize a scene to 8-bit RGB, flat colors, no anti-aliasing.
pub fn render_rgb8(spec: &SceneSpec, image_size: usize) -> Result<Vec<u8>, SynthError> {
    if image_size == 0 || image_size % GRID != 0 {
        return Err(SynthError::BadImageSize { size: image_size });
    }
    let cell = image_size / GRID;
    let bg = BACKGROUNDS[spec.background];
    let mut px = vec![0u8; image_size * image_size * 3];
    for p in px.chunks_exact_mut(3) {
        p.copy_from_slice(&[bg.0, bg.1, bg.2]);
    }
    let inset = (cell / 8).max(1);
    for shape in &spec.shapes {
        let (row, col) = (shape.cell / GRID, shape.cell % GRID);
        let (y0, x0) = (row * cell, col * cell);
        let color = SHAPE_COLORS[shape.color];
        let lo = inset as f64;
        let hi = (cell - inset) as f64;
        let mid = cell as f64 / 2.0;
        let radius = (hi - lo) / 2.0;
        for dy in 0..cell {
            for dx in 0..cell {
                let (fy, fx) = (dy as f64 + 0.5, dx as f64 + 0.5);
                let covered = match shape.kind {
                    ShapeKind::Square => fy >= lo && fy < hi && fx >= lo && fx < hi,
                    ShapeKind::Circle => {
                        (fy - mid) * (fy - mid) + (fx - mid) * (fx - mid) <= radius * radius
                    }
                    ShapeKind::Triangle => {
                        // Upward triangle: apex at top-center, base at the
                        // bottom of the inset box.
                        if fy < lo || fy >= hi {
                            false
                        } else {
                            let half = (fy - lo) / (hi - lo) * radius;
                            (fx - mid).abs() <= half
                        }
                    }
                };
                if covered {
                    let base = ((y0 + dy) * image_size + x0 + dx) * 3;
                    px[base] = color.0;
                    px[base + 1] = color.1;
                    px[base + 2] = color.2;
                }
            }
        }
    }
    Ok(px)
}

/// Rasterize to a `[H, W, 3]` tensor with values in [0, 1]; the tensor is
/// the byte raster divided by 255, so disk round trips are exact.
pub fn render<S: Scalar>(spec: &SceneSpec, image_size: usize) -> Result<RawTensor<S>, SynthError> {
    let bytes = render_rgb8(spec, image_size)?;
    Ok(rgb8_to_tensor(&bytes, image_size))
}

pub fn rgb8_to_tensor<S: Scalar>(bytes: &[u8], image_size: usize) -> RawTensor<S> {
    let data = bytes
        .iter()
        .map(|b| lit::<S>(*b as f64 / 255.0))
        .collect();
    RawTensor::new(&[image_size, image_size, 3], data).expect("image shape")
}

// ---------------------------------------------------------------------------
// PPM I/O
// ---------------------------------------------------------------------------

pub fn write_ppm(path: &Path, rgb: &[u8], width: usize, height: usize) -> Result<(), SynthError> {
    let mut out = Vec::with_capacity(rgb.len() + 32);
    out.extend_from_slice(format!("P6\n{width} {height}\n255\n").as_bytes());
    out.extend_from_slice(rgb);
    fs::write(path, out).map_err(io_err(format!("writing {}", path.display())))
}

pub fn read_ppm(path: &Path) -> Result<(Vec<u8>, usize, usize), SynthError> {
    let reason = |reason| SynthError::BadPpm {
        path: path.display().to_string(),
        reason,
    };
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(io_err(format!("reading {}", path.display())))?;
    let header_end = bytes
        .windows(1)
        .enumerate()
        .filter(|(_, w)| w[0] == b'\n')
        .nth(2)
        .map(|(i, _)| i + 1)
        .ok_or_else(|| reason("missing header"))?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| reason("header utf8"))?;
    let mut lines = header.lines();
    if lines.next() != Some("P6") {
        return Err(reason("not a P6 file"));
    }
    let dims = lines.next().ok_or_else(|| reason("missing dimensions"))?;
    let mut parts = dims.split_whitespace();
    let width: usize = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| reason("bad width"))?;
    let height: usize = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| reason("bad height"))?;
    if lines.next() != Some("255") {
        return Err(reason("expected 8-bit maxval"));
    }
    let body = &bytes[header_end..];
    if body.len() != width * height * 3 {
        return Err(reason("pixel payload size mismatch"));
    }
    Ok((body.to_vec(), width, height))
}

// ---------------------------------------------------------------------------
// Tokenizer
// ---------------------------------------------------------------------------

/// Byte-level token ids for a caption, EOS-terminated. Ids are the raw byte
/// values; 0 is reserved for EOS, which is also the readout position.
pub fn tokenize(caption: &str, max_len: usize) -> Result<Vec<usize>, SynthError> {
    if caption.bytes().any(|b| b == 0) {
        return Err(SynthError::NulInCaption);
    }
    let needed = caption.len() + 1;
    if needed > max_len {
        return Err(SynthError::CaptionTooLong {
            caption: caption.to_string(),
            max_len,
            needed,
        });
    }
    let mut ids: Vec<usize> = caption.bytes().map(|b| b as usize).collect();
    ids.push(EOS_TOKEN);
    Ok(ids)
}

// ---------------------------------------------------------------------------
// Corpus generation and loading
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    id: usize,
    image_path: String,
    caption_specific: String,
    caption_mid: String,
    caption_generic: String,
    split: Split,
}

#[derive(Debug, Clone)]
pub struct Sample<S: Scalar> {
    pub id: usize,
    pub image: RawTensor<S>,
    pub captions: CaptionLevels,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct Corpus<S: Scalar> {
    pub samples: Vec<Sample<S>>,
    pub image_size: usize,
}

impl<S: Scalar> Corpus<S> {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.samples
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == split)
            .map(|(i, _)| i)
            .collect()
    }
}

#[derive(Debug)]
pub struct CorpusSummary {
    pub n: usize,
    pub train: usize,
    pub val: usize,
    pub manifest_path: PathBuf,
}

/// Generate `n` scenes with captions into `out_dir` (`images/*.ppm` plus
/// `manifest.jsonl`). Deterministic per seed; duplicate scenes are resampled
/// so specific captions are pairwise distinct. Roughly 10% of samples land
/// in the validation split, decided by a hash of (seed, index).
pub fn generate_corpus(
    n: usize,
    seed: u64,
    image_size: usize,
    out_dir: &Path,
) -> Result<CorpusSummary, SynthError> {
    if n == 0 {
        return Err(SynthError::EmptyCorpus);
    }
    if image_size == 0 || image_size % GRID != 0 {
        return Err(SynthError::BadImageSize { size: image_size });
    }
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir).map_err(io_err(format!("creating {}", image_dir.display())))?;

    let mut rng = Rng::seed_from_u64(mix(seed, 0xC0FFEE));
    let mut seen = std::collections::HashSet::new();
    let mut entries = Vec::with_capacity(n);
    let mut train = 0;
    for id in 0..n {
        let (spec, captions) = loop {
            let spec = SceneSpec::sample(&mut rng, seed);
            let captions = spec.captions(&mut rng);
            if seen.insert(captions.specific.clone()) {
                break (spec, captions);
            }
        };
        let rgb = render_rgb8(&spec, image_size)?;
        let image_path = format!("images/{id:05}.ppm");
        write_ppm(&out_dir.join(&image_path), &rgb, image_size, image_size)?;
        let split = if mix(seed, id as u64) % 10 == 0 {
            Split::Val
        } else {
            train += 1;
            Split::Train
        };
        entries.push(ManifestEntry {
            id,
            image_path,
            caption_specific: captions.specific,
            caption_mid: captions.mid,
            caption_generic: captions.generic,
            split,
        });
    }

    let manifest_path = out_dir.join("manifest.jsonl");
    let mut file = fs::File::create(&manifest_path)
        .map_err(io_err(format!("creating {}", manifest_path.display())))?;
    for e in &entries {
        let line = serde_json::to_string(e).expect("manifest entry serializes");
        writeln!(file, "{line}").map_err(io_err("writing manifest"))?;
    }
    Ok(CorpusSummary {
        n,
        train,
        val: n - train,
        manifest_path,
    })
}

/// Load a generated corpus (manifest plus images) into memory.
pub fn load_corpus<S: Scalar>(dir: &Path) -> Result<Corpus<S>, SynthError> {
    let manifest_path = dir.join("manifest.jsonl");
    let file = fs::File::open(&manifest_path)
        .map_err(io_err(format!("opening {}", manifest_path.display())))?;
    let mut samples = Vec::new();
    let mut image_size = 0;
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io_err("reading manifest"))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry =
            serde_json::from_str(&line).map_err(|e| SynthError::BadManifest {
                line: lineno + 1,
                reason: e.to_string(),
            })?;
        let (rgb, w, h) = read_ppm(&dir.join(&entry.image_path))?;
        if w != h {
            return Err(SynthError::BadPpm {
                path: entry.image_path.clone(),
                reason: "expected square image",
            });
        }
        image_size = w;
        samples.push(Sample {
            id: entry.id,
            image: rgb8_to_tensor(&rgb, w),
            captions: CaptionLevels {
                specific: entry.caption_specific,
                mid: entry.caption_mid,
                generic: entry.caption_generic,
            },
            split: entry.split,
        });
    }
    if samples.is_empty() {
        return Err(SynthError::EmptyCorpus);
    }
    Ok(Corpus {
        samples,
        image_size,
    })
}
