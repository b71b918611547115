//! Flexible-resolution buckets for progressive training.
//!
//! Each training stage targets an area; its buckets are every patch-aligned
//! `(width, height)` whose area is within a tolerance of the target and whose
//! aspect ratio lies in a band. Images are matched to the bucket with the
//! closest log-aspect ratio and then fitted by cover-scaling and center-cropping.

use crate::imagecodec::{RasterImage, Rgb};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ResolutionError {
    #[error("no bucket satisfies area {target_area}±{tolerance} with aspect in [{min}, {max}]")]
    NoBuckets { target_area: u64, tolerance: f64, min: f64, max: f64 },
    #[error("tolerance {0} must lie in (0, 1)")]
    BadTolerance(f64),
    #[error("aspect range [{0}, {1}] is not a valid positive interval")]
    BadAspectRange(f64, f64),
    #[error("bucket list is empty")]
    EmptyBuckets,
    #[error("degenerate image {0}x{1}")]
    Degenerate(u32, u32),
    #[error("stage {index}: {reason}")]
    InvalidStage { index: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ResolutionBucket {
    pub width_px: u32,
    pub height_px: u32,
}

impl ResolutionBucket {
    pub fn new(width_px: u32, height_px: u32) -> Self {
        Self { width_px, height_px }
    }

    pub fn area(&self) -> u64 {
        self.width_px as u64 * self.height_px as u64
    }

    /// Grid shape `(rows, cols)` in patches.
    pub fn grid(&self, patch_px: u32) -> (u32, u32) {
        (self.height_px / patch_px, self.width_px / patch_px)
    }
}

/// Admissible `width / height` band, inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AspectRange {
    pub min: f64,
    pub max: f64,
}

impl AspectRange {
    pub fn new(min: f64, max: f64) -> Self {
        Self { min, max }
    }

    fn contains(&self, w: u32, h: u32) -> bool {
        let a = w as f64 / h as f64;
        a >= self.min && a <= self.max
    }
}

/// All patch-aligned buckets up to `max_side` patches per side with area near
/// `target_area`, sorted by `(width, height)`.
pub fn gen_buckets(
    target_area: u64,
    patch_px: u32,
    max_side: u32,
    tolerance: f64,
    aspect: AspectRange,
) -> Result<Vec<ResolutionBucket>, ResolutionError> {
    if !(tolerance > 0.0 && tolerance < 1.0) {
        return Err(ResolutionError::BadTolerance(tolerance));
    }
    if !(aspect.min > 0.0 && aspect.min <= aspect.max && aspect.max.is_finite()) {
        return Err(ResolutionError::BadAspectRange(aspect.min, aspect.max));
    }
    let slack = tolerance * target_area as f64;
    let mut out = Vec::new();
    for wp in 1..=max_side {
        for hp in 1..=max_side {
            let (w, h) = (wp * patch_px, hp * patch_px);
            let area = w as f64 * h as f64;
            if (area - target_area as f64).abs() <= slack && aspect.contains(w, h) {
                out.push(ResolutionBucket::new(w, h));
            }
        }
    }
    if out.is_empty() {
        return Err(ResolutionError::NoBuckets {
            target_area,
            tolerance,
            min: aspect.min,
            max: aspect.max,
        });
    }
    Ok(out)
}

const TIE_EPS: f64 = 1e-12;

/// Bucket with the smallest `|ln(bucket aspect) − ln(image aspect)|`; ties go
/// to the larger area, then to the lexicographically smaller `(w, h)`.
pub fn match_bucket(
    image_w: u32,
    image_h: u32,
    buckets: &[ResolutionBucket],
) -> Result<ResolutionBucket, ResolutionError> {
    if image_w == 0 || image_h == 0 {
        return Err(ResolutionError::Degenerate(image_w, image_h));
    }
    // w/h as one correctly-rounded division keeps the result exactly
    // invariant under uniform scaling of the image.
    let target = (image_w as f64 / image_h as f64).ln();
    let dist = |b: &ResolutionBucket| ((b.width_px as f64 / b.height_px as f64).ln() - target).abs();
    let mut best: Option<(ResolutionBucket, f64)> = None;
    for &b in buckets {
        let d = dist(&b);
        best = match best {
            None => Some((b, d)),
            Some((cur, cd)) => {
                let better = if (d - cd).abs() <= TIE_EPS {
                    b.area() > cur.area() || (b.area() == cur.area() && b < cur)
                } else {
                    d < cd
                };
                if better { Some((b, d)) } else { Some((cur, cd)) }
            }
        };
    }
    best.map(|(b, _)| b).ok_or(ResolutionError::EmptyBuckets)
}

/// Scales `image` uniformly so it covers the bucket, then center-crops.
/// Resampling is bilinear at pixel centers, which is exact at scale 1.
pub fn fit_image(image: &RasterImage, bucket: ResolutionBucket) -> Result<RasterImage, ResolutionError> {
    let (iw, ih) = (image.width, image.height);
    if iw == 0 || ih == 0 || bucket.width_px == 0 || bucket.height_px == 0 {
        return Err(ResolutionError::Degenerate(iw, ih));
    }
    let (bw, bh) = (bucket.width_px as f64, bucket.height_px as f64);
    let scale = (bw / iw as f64).max(bh / ih as f64);
    let off_x = (iw as f64 * scale - bw) / 2.0;
    let off_y = (ih as f64 * scale - bh) / 2.0;

    let sample = |sx: f64, sy: f64| -> Rgb {
        let sx = sx.clamp(0.0, (iw - 1) as f64);
        let sy = sy.clamp(0.0, (ih - 1) as f64);
        let (x0, y0) = (sx.floor() as u32, sy.floor() as u32);
        let (x1, y1) = ((x0 + 1).min(iw - 1), (y0 + 1).min(ih - 1));
        let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
        let (p00, p10, p01, p11) = (image.get(x0, y0), image.get(x1, y0), image.get(x0, y1), image.get(x1, y1));
        std::array::from_fn(|k| {
            let top = p00[k] + (p10[k] - p00[k]) * fx;
            let bot = p01[k] + (p11[k] - p01[k]) * fx;
            top + (bot - top) * fy
        })
    };
    Ok(RasterImage::from_fn(bucket.width_px, bucket.height_px, |x, y| {
        sample((x as f64 + off_x + 0.5) / scale - 0.5, (y as f64 + off_y + 0.5) / scale - 0.5)
    }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub target_area: u64,
    pub area_tolerance: f64,
    pub aspect_range: AspectRange,
    pub buckets: Vec<ResolutionBucket>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stages: Vec<Stage>,
}

impl StagePlan {
    /// Generates buckets for each `target_area` in order.
    pub fn generate(
        target_areas: &[u64],
        patch_px: u32,
        max_side: u32,
        tolerance: f64,
        aspect: AspectRange,
    ) -> Result<Self, ResolutionError> {
        let stages = target_areas
            .iter()
            .map(|&target_area| {
                Ok(Stage {
                    target_area,
                    area_tolerance: tolerance,
                    aspect_range: aspect,
                    buckets: gen_buckets(target_area, patch_px, max_side, tolerance, aspect)?,
                })
            })
            .collect::<Result<Vec<_>, ResolutionError>>()?;
        let plan = Self { stages };
        plan.validate(patch_px, max_side)?;
        Ok(plan)
    }

    /// Three stages at 64², 96² and 128² px (8×8, 12×12, 16×16 grids at 8px
    /// patches), the 1 : 1.5 : 2 side progression.
    pub fn desk_default() -> Self {
        Self::generate(&[64 * 64, 96 * 96, 128 * 128], 8, 16, 0.15, AspectRange::new(0.5, 2.0))
            .expect("default plan is feasible")
    }

    pub fn validate(&self, patch_px: u32, max_side: u32) -> Result<(), ResolutionError> {
        let bad = |index, reason: String| Err(ResolutionError::InvalidStage { index, reason });
        for (i, s) in self.stages.iter().enumerate() {
            if i > 0 && s.target_area <= self.stages[i - 1].target_area {
                return bad(i, "target areas must strictly increase".into());
            }
            if s.buckets.is_empty() {
                return bad(i, "no buckets".into());
            }
            for b in &s.buckets {
                let (rows, cols) = b.grid(patch_px);
                if b.width_px % patch_px != 0 || b.height_px % patch_px != 0 {
                    return bad(i, format!("bucket {b:?} not patch-aligned"));
                }
                if rows == 0 || cols == 0 || rows > max_side || cols > max_side {
                    return bad(i, format!("bucket {b:?} outside 1..={max_side} patches"));
                }
                let slack = s.area_tolerance * s.target_area as f64;
                if (b.area() as f64 - s.target_area as f64).abs() > slack
                    || !s.aspect_range.contains(b.width_px, b.height_px)
                {
                    return bad(i, format!("bucket {b:?} violates the stage constraints"));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn brute(target: u64, patch: u32, max_side: u32, tol: f64, a: AspectRange) -> Vec<(u32, u32)> {
        let mut v = Vec::new();
        let mut w = patch;
        while w <= patch * max_side {
            let mut h = patch;
            while h <= patch * max_side {
                let area = (w * h) as f64;
                let r = w as f64 / h as f64;
                if (area - target as f64).abs() <= tol * target as f64 && r >= a.min && r <= a.max {
                    v.push((w, h));
                }
                h += patch;
            }
            w += patch;
        }
        v.sort();
        v
    }

    #[test]
    fn bucket_examples() {
        let got: Vec<_> = gen_buckets(4096, 16, 16, 0.15, AspectRange::new(0.5, 2.0))
            .unwrap()
            .iter()
            .map(|b| (b.width_px, b.height_px))
            .collect();
        assert_eq!(got, vec![(48, 80), (48, 96), (64, 64), (80, 48), (96, 48)]);
        assert_eq!(got, brute(4096, 16, 16, 0.15, AspectRange::new(0.5, 2.0)));

        let sq = gen_buckets(256, 16, 16, 0.01, AspectRange::new(1.0, 1.0)).unwrap();
        assert_eq!(sq, vec![ResolutionBucket::new(16, 16)]);

        // On a 256px lattice the 224, 240 and 256 wide × 16 buckets fit the band; it is only
        // infeasible once sides stop at 8 patches (128px).
        assert_eq!(gen_buckets(4096, 16, 16, 0.15, AspectRange::new(10.0, 20.0)).unwrap().len(), 3);
        assert!(matches!(
            gen_buckets(4096, 16, 8, 0.15, AspectRange::new(10.0, 20.0)),
            Err(ResolutionError::NoBuckets { .. })
        ));
        assert!(gen_buckets(4096, 16, 16, 1.5, AspectRange::new(0.5, 2.0)).is_err());
    }

    #[test]
    fn match_examples() {
        let b = |w, h| ResolutionBucket::new(w, h);
        assert_eq!(match_bucket(1000, 500, &[b(64, 64), b(96, 48), b(48, 96)]).unwrap(), b(96, 48));
        assert_eq!(match_bucket(333, 333, &[b(48, 80), b(64, 64), b(80, 48)]).unwrap(), b(64, 64));
        // |ln 2| either way, equal areas: lexicographic wins.
        assert_eq!(match_bucket(100, 100, &[b(96, 48), b(48, 96)]).unwrap(), b(48, 96));
        // Equal distance, larger area wins.
        assert_eq!(match_bucket(50, 50, &[b(32, 32), b(64, 64)]).unwrap(), b(64, 64));
        assert_eq!(match_bucket(5, 5, &[]), Err(ResolutionError::EmptyBuckets));
    }

    #[test]
    fn fit_examples() {
        let grad = RasterImage::from_fn(128, 64, |x, y| [x as f64 / 127.0, y as f64 / 63.0, 0.5]);
        let out = fit_image(&grad, ResolutionBucket::new(64, 64)).unwrap();
        assert_eq!((out.width, out.height), (64, 64));
        // scale = max(64/128, 64/64) = 1, crop columns 32..96
        for y in 0..64 {
            for x in 0..64 {
                assert_eq!(out.get(x, y), grad.get(x + 32, y));
            }
        }

        let sq = RasterImage::from_fn(128, 128, |x, y| [(x % 2) as f64, (y % 2) as f64, 0.0]);
        let down = fit_image(&sq, ResolutionBucket::new(64, 64)).unwrap();
        assert_eq!((down.width, down.height), (64, 64));
        // 2:1 bilinear at centers averages each 2-pixel pair.
        assert!((down.get(10, 10)[0] - 0.5).abs() < 1e-12);

        let id = fit_image(&grad, ResolutionBucket::new(128, 64)).unwrap();
        assert_eq!(id, grad);
    }

    #[test]
    fn default_plan() {
        let plan = StagePlan::desk_default();
        assert_eq!(plan.stages.len(), 3);
        for (s, side) in plan.stages.iter().zip([64u32, 96, 128]) {
            assert!(s.buckets.contains(&ResolutionBucket::new(side, side)));
        }
        plan.validate(8, 16).unwrap();
        let text = toml::to_string(&plan).unwrap();
        assert_eq!(toml::from_str::<StagePlan>(&text).unwrap(), plan);

        let mut bad = plan.clone();
        bad.stages.swap(0, 1);
        assert!(bad.validate(8, 16).is_err());
    }

    proptest! {
        #[test]
        fn generation_matches_lattice_filter(
            target in 64u64..40_000,
            patch in prop::sample::select(vec![4u32, 8, 16]),
            tol in 0.05f64..0.5,
            lo in 0.25f64..1.0,
            span in 1.0f64..4.0,
        ) {
            let a = AspectRange::new(lo, lo * span);
            let want = brute(target, patch, 16, tol, a);
            match gen_buckets(target, patch, 16, tol, a) {
                Ok(got) => {
                    let got: Vec<_> = got.iter().map(|b| (b.width_px, b.height_px)).collect();
                    prop_assert_eq!(got, want);
                }
                Err(_) => prop_assert!(want.is_empty()),
            }
        }

        #[test]
        fn matching_is_scale_invariant(w in 1u32..400, h in 1u32..400, k in 1u32..8) {
            let buckets = gen_buckets(4096, 8, 16, 0.2, AspectRange::new(0.25, 4.0)).unwrap();
            prop_assert_eq!(match_bucket(w, h, &buckets).unwrap(), match_bucket(w * k, h * k, &buckets).unwrap());
        }
    }
}
