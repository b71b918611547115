//! Deterministic patch quantizer standing in for a learned image tokenizer.
//!
//! Images are cut into `patch_px × patch_px` RGB patches; each patch maps to
//! the nearest codebook prototype (squared Euclidean distance, ties toward the
//! lower index). Codebooks come from seeded k-means with fixed-order
//! accumulation, so the same inputs give bit-identical codebooks.

use crate::unirep::ImageTokenGrid;
use crate::vocab::VocabManifest;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{self, BufRead, Write};
use std::path::Path;
use thiserror::Error;

pub const CODEBOOK_FORMAT_VERSION: u32 = 1;
pub const KMEANS_MAX_ITERS: usize = 50;

#[derive(Debug, Error)]
pub enum CodecError {
    #[error("image is {width}x{height}px, not a multiple of the {patch_px}px patch")]
    NotPatchMultiple { width: u32, height: u32, patch_px: u32 },
    #[error("image grid {rows}x{cols} exceeds max side {max_side}")]
    TooLarge { rows: u32, cols: u32, max_side: u32 },
    #[error("need at least {needed} patches, found {found}")]
    TooFewPatches { needed: usize, found: usize },
    #[error("code {0} out of codebook range")]
    CodeOutOfRange(u32),
    #[error("codebook has {codebook} entries but manifest expects {manifest}")]
    SizeMismatch { codebook: usize, manifest: u32 },
    #[error("patch_px mismatch: codebook {codebook}, manifest {manifest}")]
    PatchMismatch { codebook: u32, manifest: u32 },
    #[error("degenerate image dimensions {0}x{1}")]
    Degenerate(u32, u32),
    #[error("codebook size must be at least 1")]
    EmptyCodebook,
    #[error("unsupported codebook format version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed PPM: {0}")]
    Ppm(String),
    #[error("codebook file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

pub type Rgb = [f64; 3];

#[derive(Debug, Clone, PartialEq)]
pub struct RasterImage {
    pub width: u32,
    pub height: u32,
    /// Row-major, channels in `[0, 1]`.
    pub pixels: Vec<Rgb>,
}

impl RasterImage {
    pub fn new(width: u32, height: u32, pixels: Vec<Rgb>) -> Result<Self, CodecError> {
        if width == 0 || height == 0 || pixels.len() != (width * height) as usize {
            return Err(CodecError::Degenerate(width, height));
        }
        Ok(Self { width, height, pixels })
    }

    pub fn solid(width: u32, height: u32, color: Rgb) -> Self {
        Self { width, height, pixels: vec![color; (width * height) as usize] }
    }

    pub fn from_fn(width: u32, height: u32, mut f: impl FnMut(u32, u32) -> Rgb) -> Self {
        let mut pixels = Vec::with_capacity((width * height) as usize);
        for y in 0..height {
            for x in 0..width {
                pixels.push(f(x, y));
            }
        }
        Self { width, height, pixels }
    }

    pub fn get(&self, x: u32, y: u32) -> Rgb {
        self.pixels[(y * self.width + x) as usize]
    }

    /// Flattened patch at grid cell (`row`, `col`), channel-interleaved.
    pub fn patch(&self, row: u32, col: u32, patch_px: u32) -> Vec<f64> {
        let mut out = Vec::with_capacity((patch_px * patch_px * 3) as usize);
        for y in 0..patch_px {
            for x in 0..patch_px {
                out.extend_from_slice(&self.get(col * patch_px + x, row * patch_px + y));
            }
        }
        out
    }

    fn grid_dims(&self, patch_px: u32) -> Result<(u32, u32), CodecError> {
        if self.width % patch_px != 0 || self.height % patch_px != 0 {
            return Err(CodecError::NotPatchMultiple {
                width: self.width,
                height: self.height,
                patch_px,
            });
        }
        Ok((self.height / patch_px, self.width / patch_px))
    }

    pub fn write_ppm<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "P6\n{} {}\n255\n", self.width, self.height)?;
        let bytes: Vec<u8> = self
            .pixels
            .iter()
            .flat_map(|p| p.map(|c| (c.clamp(0.0, 1.0) * 255.0).round() as u8))
            .collect();
        w.write_all(&bytes)
    }

    pub fn read_ppm<R: BufRead>(mut r: R) -> Result<Self, CodecError> {
        let mut header = Vec::new();
        // magic, width, height, maxval; comments start with '#'
        while header.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line)? == 0 {
                return Err(CodecError::Ppm("truncated header".into()));
            }
            let line = line.split('#').next().unwrap_or("");
            header.extend(line.split_whitespace().map(str::to_owned));
        }
        if header[0] != "P6" || header.len() != 4 {
            return Err(CodecError::Ppm("expected binary P6 header on separate lines".into()));
        }
        let parse = |s: &str| s.parse::<u32>().map_err(|_| CodecError::Ppm(format!("bad number {s:?}")));
        let (width, height, maxval) = (parse(&header[1])?, parse(&header[2])?, parse(&header[3])?);
        if maxval == 0 || maxval > 255 {
            return Err(CodecError::Ppm(format!("unsupported maxval {maxval}")));
        }
        let mut bytes = vec![0u8; (width * height * 3) as usize];
        r.read_exact(&mut bytes)?;
        let scale = maxval as f64;
        let pixels = bytes
            .chunks_exact(3)
            .map(|c| [c[0] as f64 / scale, c[1] as f64 / scale, c[2] as f64 / scale])
            .collect();
        RasterImage::new(width, height, pixels)
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> io::Result<()> {
        let f = std::fs::File::create(path)?;
        self.write_ppm(io::BufWriter::new(f))
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self, CodecError> {
        let f = std::fs::File::open(path)?;
        Self::read_ppm(io::BufReader::new(f))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub version: u32,
    pub patch_px: u32,
    /// Each entry is a flattened `patch_px × patch_px × 3` prototype.
    pub entries: Vec<Vec<f64>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Builds a codebook holding one flat colour per entry.
    pub fn from_colors(patch_px: u32, colors: &[Rgb]) -> Self {
        let n = (patch_px * patch_px) as usize;
        let entries = colors.iter().map(|c| c.repeat(n)).collect();
        Self { version: CODEBOOK_FORMAT_VERSION, patch_px, entries }
    }

    /// Index of the nearest entry and its squared distance.
    pub fn nearest(&self, patch: &[f64]) -> (u32, f64) {
        let mut best = (0u32, f64::INFINITY);
        for (i, e) in self.entries.iter().enumerate() {
            let d = sq_dist(patch, e);
            if d < best.1 {
                best = (i as u32, d);
            }
        }
        best
    }

    pub fn check(&self, manifest: &VocabManifest) -> Result<(), CodecError> {
        if self.entries.len() != manifest.codebook_size as usize {
            return Err(CodecError::SizeMismatch {
                codebook: self.entries.len(),
                manifest: manifest.codebook_size,
            });
        }
        if self.patch_px != manifest.patch_px {
            return Err(CodecError::PatchMismatch { codebook: self.patch_px, manifest: manifest.patch_px });
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("codebook is always serializable")
    }

    pub fn from_json(text: &str) -> Result<Self, CodecError> {
        let cb: Codebook = serde_json::from_str(text).map_err(|e| CodecError::Format(e.to_string()))?;
        if cb.version != CODEBOOK_FORMAT_VERSION {
            return Err(CodecError::UnsupportedVersion(cb.version));
        }
        let dim = (cb.patch_px * cb.patch_px * 3) as usize;
        if cb.entries.iter().any(|e| e.len() != dim) {
            return Err(CodecError::Format(format!("entries must have {dim} values")));
        }
        Ok(cb)
    }
}

/// Seeded k-means over every patch of `images`.
///
/// Initialization is k-means++; empty clusters are reseeded from the patch
/// farthest from its assigned centroid. Iteration stops at convergence or
/// after [`KMEANS_MAX_ITERS`] rounds.
pub fn build_codebook(
    images: &[RasterImage],
    size: usize,
    patch_px: u32,
    seed: u64,
) -> Result<Codebook, CodecError> {
    if size == 0 {
        return Err(CodecError::EmptyCodebook);
    }
    let mut patches = Vec::new();
    for img in images {
        let (rows, cols) = img.grid_dims(patch_px)?;
        for r in 0..rows {
            for c in 0..cols {
                patches.push(img.patch(r, c, patch_px));
            }
        }
    }
    if patches.len() < size {
        return Err(CodecError::TooFewPatches { needed: size, found: patches.len() });
    }
    let dim = patches[0].len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centroids: Vec<Vec<f64>> = vec![patches[rng.random_range(0..patches.len())].clone()];
    let mut best_d: Vec<f64> = patches.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < size {
        let total: f64 = best_d.iter().sum();
        let pick = if total > 0.0 {
            let target = rng.random::<f64>() * total;
            let mut acc = 0.0;
            best_d
                .iter()
                .position(|&d| {
                    acc += d;
                    acc > target
                })
                .unwrap_or(patches.len() - 1)
        } else {
            rng.random_range(0..patches.len())
        };
        centroids.push(patches[pick].clone());
        let c = centroids.last().unwrap();
        for (bd, p) in best_d.iter_mut().zip(&patches) {
            *bd = bd.min(sq_dist(p, c));
        }
    }

    let mut assign = vec![usize::MAX; patches.len()];
    for _ in 0..KMEANS_MAX_ITERS {
        let mut changed = false;
        let mut dists = vec![0.0; patches.len()];
        for (i, p) in patches.iter().enumerate() {
            let mut best = (0usize, f64::INFINITY);
            for (k, c) in centroids.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best.1 {
                    best = (k, d);
                }
            }
            if assign[i] != best.0 {
                assign[i] = best.0;
                changed = true;
            }
            dists[i] = best.1;
        }

        let mut sums = vec![vec![0.0; dim]; size];
        let mut counts = vec![0usize; size];
        for (p, &k) in patches.iter().zip(&assign) {
            counts[k] += 1;
            for (s, v) in sums[k].iter_mut().zip(p) {
                *s += v;
            }
        }
        for k in 0..size {
            if counts[k] == 0 {
                let far = dists
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc })
                    .0;
                centroids[k] = patches[far].clone();
                dists[far] = 0.0;
                changed = true;
            } else {
                let n = counts[k] as f64;
                centroids[k] = sums[k].iter().map(|s| s / n).collect();
            }
        }
        if !changed {
            break;
        }
    }
    Ok(Codebook { version: CODEBOOK_FORMAT_VERSION, patch_px, entries: centroids })
}

pub fn encode_image(
    manifest: &VocabManifest,
    image: &RasterImage,
    codebook: &Codebook,
) -> Result<ImageTokenGrid, CodecError> {
    codebook.check(manifest)?;
    let (rows, cols) = image.grid_dims(codebook.patch_px)?;
    if rows > manifest.max_side || cols > manifest.max_side {
        return Err(CodecError::TooLarge { rows, cols, max_side: manifest.max_side });
    }
    let mut codes = Vec::with_capacity((rows * cols) as usize);
    for r in 0..rows {
        for c in 0..cols {
            codes.push(codebook.nearest(&image.patch(r, c, codebook.patch_px)).0);
        }
    }
    Ok(ImageTokenGrid { height: rows, width: cols, codes })
}

pub fn decode_grid(grid: &ImageTokenGrid, codebook: &Codebook) -> Result<RasterImage, CodecError> {
    let p = codebook.patch_px;
    if let Some(&bad) = grid.codes.iter().find(|&&c| c as usize >= codebook.len()) {
        return Err(CodecError::CodeOutOfRange(bad));
    }
    let (w, h) = (grid.width * p, grid.height * p);
    let mut pixels = vec![[0.0; 3]; (w * h) as usize];
    for r in 0..grid.height {
        for c in 0..grid.width {
            let entry = &codebook.entries[grid.get(r, c) as usize];
            for y in 0..p {
                for x in 0..p {
                    let src = ((y * p + x) * 3) as usize;
                    let dst = ((r * p + y) * w + c * p + x) as usize;
                    pixels[dst] = [entry[src], entry[src + 1], entry[src + 2]];
                }
            }
        }
    }
    RasterImage::new(w, h, pixels)
}
