//! Reports: attention profiles, decoding sweeps and logit magnitudes.

use crate::decoding::{generate, DecodeError, DecodeParams, GenerateConfig, Mode};
use crate::imagecodec::{decode_grid, CodecError, Codebook};
use crate::model::{ModelError, ModelParams};
use crate::training::StepMetrics;
use crate::unirep::validate;
use crate::vocab::{TokenId, TokenRole, VocabManifest};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum AnalysisError {
    #[error("sequence has no complete image span")]
    NoImageSpan,
    #[error("sweep list `{0}` is empty")]
    EmptySweepList(&'static str),
    #[error("metric stream is empty")]
    EmptyStream,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Decode(#[from] DecodeError),
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Role groups summarized by [`attn_report`], in table order.
pub const SUMMARY_ROLES: [&str; 6] = ["SOI", "EOL", "HeightInd", "WidthInd", "ImageCode", "Text"];

fn summary_group(role: &TokenRole) -> Option<usize> {
    Some(match role {
        TokenRole::Soi => 0,
        TokenRole::Eol => 1,
        TokenRole::HeightInd(_) => 2,
        TokenRole::WidthInd(_) => 3,
        TokenRole::ImageCode(_) => 4,
        TokenRole::Text(_) => 5,
        _ => return None,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionScore {
    pub pos: usize,
    pub role: String,
    /// Head- and layer-averaged attention weight from the query; zero for
    /// positions after it.
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoleSummary {
    pub role: String,
    pub count: usize,
    /// Mean score over positions of this role, 0 when there are none.
    pub mean: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttnReport {
    pub query: usize,
    pub positions: Vec<PositionScore>,
    /// Sum of each `[layer][head]` attention row.
    pub row_sums: Vec<Vec<f64>>,
    pub roles: Vec<RoleSummary>,
}

impl AttnReport {
    pub fn to_table(&self) -> String {
        let mut s = format!("query position {}\n\nrole        count  mean       total\n", self.query);
        for r in &self.roles {
            let _ = writeln!(s, "{:<11} {:>5}  {:<9.6}  {:.6}", r.role, r.count, r.mean, r.total);
        }
        s.push_str("\npos  role        score\n");
        for p in &self.positions {
            let _ = writeln!(s, "{:<4} {:<11} {:.6}", p.pos, p.role, p.score);
        }
        s
    }
}

/// Attention from the last image code of the last complete span, averaged
/// over all layers and heads.
pub fn attn_report(model: &ModelParams, manifest: &VocabManifest, tokens: &[TokenId]) -> Result<AttnReport, AnalysisError> {
    let last = validate(manifest, tokens)
        .spans
        .iter()
        .rev()
        .find_map(|s| s.outcome.as_ref().ok().copied())
        .ok_or(AnalysisError::NoImageSpan)?;
    // span ends `… code EOL EOI`
    let query = last.end - 3;
    let probe = model.attention_probe(manifest, tokens, query)?;

    let positions = tokens
        .iter()
        .enumerate()
        .map(|(pos, &t)| PositionScore {
            pos,
            role: manifest.classify(t).map(|r| r.kind()).unwrap_or("?").to_string(),
            score: probe.average.get(pos).copied().unwrap_or(0.0),
        })
        .collect();
    let row_sums = probe.per_layer.iter().map(|heads| heads.iter().map(|r| r.iter().sum()).collect()).collect();

    let mut groups = [(0usize, 0.0f64); 6];
    for (label, &a) in probe.labels.iter().zip(&probe.average) {
        if let Some(g) = summary_group(label) {
            groups[g].0 += 1;
            groups[g].1 += a;
        }
    }
    let roles = SUMMARY_ROLES
        .iter()
        .zip(groups)
        .map(|(name, (count, total))| RoleSummary {
            role: name.to_string(),
            count,
            mean: if count > 0 { total / count as f64 } else { 0.0 },
            total,
        })
        .collect();
    Ok(AttnReport { query, positions, row_sums, roles })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub prompt: Vec<TokenId>,
    pub temperatures: Vec<f64>,
    pub top_ks: Vec<usize>,
    pub cfg_scales: Vec<f64>,
    pub seeds: Vec<u64>,
    pub text: DecodeParams,
    pub max_tokens: usize,
    pub constrained: bool,
}

impl SweepSpec {
    pub fn cells(&self) -> usize {
        self.temperatures.len() * self.top_ks.len() * self.cfg_scales.len() * self.seeds.len()
    }

    fn check(&self) -> Result<(), AnalysisError> {
        for (name, n) in [
            ("temperatures", self.temperatures.len()),
            ("top_ks", self.top_ks.len()),
            ("cfg_scales", self.cfg_scales.len()),
            ("seeds", self.seeds.len()),
        ] {
            if n == 0 {
                return Err(AnalysisError::EmptySweepList(name));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub cell: usize,
    pub temperature: f64,
    pub top_k: usize,
    pub cfg_scale: f64,
    pub seed: u64,
    pub well_formed: bool,
    pub distinct_codes: usize,
    /// Mean |logit| of the sampled tokens inside image spans.
    pub mean_abs_logit: f64,
    pub image_file: Option<String>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopKTrend {
    pub top_k: usize,
    pub cells: usize,
    pub mean_distinct: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
    /// Mean distinct-code count per top-k, ascending in top-k.
    pub trend: Vec<TopKTrend>,
    /// Fraction of adjacent top-k pairs whose mean does not decrease.
    pub non_decreasing_fraction: f64,
}

impl SweepReport {
    pub fn to_table(&self) -> String {
        let mut s = String::from("cell  temp    top_k  cfg     seed  ok  distinct  mean|logit|  image\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<5} {:<7.3} {:<6} {:<7.3} {:<5} {:<3} {:<9} {:<12.4} {}",
                r.cell,
                r.temperature,
                r.top_k,
                r.cfg_scale,
                r.seed,
                if r.well_formed { "y" } else { "n" },
                r.distinct_codes,
                r.mean_abs_logit,
                r.image_file.as_deref().or(r.error.as_deref()).unwrap_or("-"),
            );
        }
        s.push_str("\ntop_k  cells  mean distinct\n");
        for t in &self.trend {
            let _ = writeln!(s, "{:<6} {:<6} {:.3}", t.top_k, t.cells, t.mean_distinct);
        }
        let _ = writeln!(s, "non-decreasing pairs: {:.3}", self.non_decreasing_fraction);
        s
    }
}

fn run_cell(
    model: &ModelParams,
    manifest: &VocabManifest,
    codebook: &Codebook,
    spec: &SweepSpec,
    row: &mut SweepRow,
    out_dir: Option<&Path>,
) -> Result<(), AnalysisError> {
    let cfg = GenerateConfig {
        text: spec.text,
        image: DecodeParams { temperature: row.temperature, top_k: row.top_k, cfg_scale: row.cfg_scale },
        seed: row.seed,
        max_tokens: spec.max_tokens,
        constrained: spec.constrained,
        stop_after_image: true,
        ..Default::default()
    };
    let gen = generate(model, manifest, &spec.prompt, &cfg)?;
    let images = gen.images(manifest);
    row.well_formed = !images.is_empty() && images.iter().all(Result::is_ok) && !gen.truncated_image;
    let image_logits: Vec<f64> = gen
        .steps
        .iter()
        .filter(|s| s.mode == Mode::Image)
        .map(|s| s.sampled_logit.abs())
        .collect();
    row.mean_abs_logit = if image_logits.is_empty() { 0.0 } else { image_logits.iter().sum::<f64>() / image_logits.len() as f64 };
    if let Some(Ok(grid)) = images.first() {
        row.distinct_codes = grid.codes.iter().collect::<BTreeSet<_>>().len();
        if let Some(dir) = out_dir {
            let name = format!("cell_{:04}.ppm", row.cell);
            let img = decode_grid(grid, codebook)?;
            img.save_ppm(dir.join(&name))?;
            row.image_file = Some(name);
        }
    }
    Ok(())
}

/// One generation per (temperature, top-k, cfg, seed) cell. Failing cells are
/// recorded and the sweep continues. Images go to `out_dir` when given.
pub fn sweep(
    model: &ModelParams,
    manifest: &VocabManifest,
    codebook: &Codebook,
    spec: &SweepSpec,
    out_dir: Option<&Path>,
) -> Result<SweepReport, AnalysisError> {
    spec.check()?;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
    }
    let mut rows = Vec::with_capacity(spec.cells());
    for &temperature in &spec.temperatures {
        for &top_k in &spec.top_ks {
            for &cfg_scale in &spec.cfg_scales {
                for &seed in &spec.seeds {
                    let mut row = SweepRow {
                        cell: rows.len(),
                        temperature,
                        top_k,
                        cfg_scale,
                        seed,
                        well_formed: false,
                        distinct_codes: 0,
                        mean_abs_logit: 0.0,
                        image_file: None,
                        error: None,
                    };
                    if let Err(e) = run_cell(model, manifest, codebook, spec, &mut row, out_dir) {
                        row.error = Some(e.to_string());
                    }
                    rows.push(row);
                }
            }
        }
    }

    let ks: BTreeSet<usize> = spec.top_ks.iter().copied().collect();
    let trend: Vec<TopKTrend> = ks
        .into_iter()
        .map(|k| {
            let v: Vec<f64> = rows.iter().filter(|r| r.top_k == k).map(|r| r.distinct_codes as f64).collect();
            TopKTrend { top_k: k, cells: v.len(), mean_distinct: v.iter().sum::<f64>() / v.len() as f64 }
        })
        .collect();
    let pairs = trend.len().saturating_sub(1);
    let non_decreasing_fraction = if pairs == 0 {
        1.0
    } else {
        trend.windows(2).filter(|w| w[1].mean_distinct >= w[0].mean_distinct).count() as f64 / pairs as f64
    };
    Ok(SweepReport { rows, trend, non_decreasing_fraction })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MagnitudeRow {
    pub step: usize,
    pub zloss_a: f64,
    pub zloss_b: f64,
    pub max_logit_a: f64,
    pub max_logit_b: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitComparison {
    pub rows: Vec<MagnitudeRow>,
    pub warning: Option<String>,
    /// Steps averaged at the end of each stream.
    pub window: usize,
    pub final_zloss_a: f64,
    pub final_zloss_b: f64,
    pub final_max_logit_a: f64,
    pub final_max_logit_b: f64,
    /// `final_zloss_b / final_zloss_a`
    pub ratio: f64,
}

impl LogitComparison {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        if let Some(w) = &self.warning {
            let _ = writeln!(s, "warning: {w}");
        }
        let _ = writeln!(s, "final {} steps: mean (log Z)^2  A {:.6}  B {:.6}  ratio B/A {:.6}", self.window, self.final_zloss_a, self.final_zloss_b, self.ratio);
        let _ = writeln!(s, "final {} steps: mean max|logit|  A {:.4}  B {:.4}\n", self.window, self.final_max_logit_a, self.final_max_logit_b);
        s.push_str("step   (logZ)^2 A   (logZ)^2 B   max|l| A   max|l| B\n");
        for r in &self.rows {
            let _ = writeln!(s, "{:<6} {:<12.6} {:<12.6} {:<10.4} {:.4}", r.step, r.zloss_a, r.zloss_b, r.max_logit_a, r.max_logit_b);
        }
        s
    }
}

/// Aligns two metric streams by position (truncating to the shorter, with a
/// warning) and compares the means over their last `window` steps.
pub fn logit_magnitude_report(a: &[StepMetrics], b: &[StepMetrics], window: usize) -> Result<LogitComparison, AnalysisError> {
    let n = a.len().min(b.len());
    if n == 0 {
        return Err(AnalysisError::EmptyStream);
    }
    let warning = (a.len() != b.len()).then(|| format!("stream lengths differ ({} vs {}); aligned to {n}", a.len(), b.len()));
    let rows: Vec<MagnitudeRow> = a[..n]
        .iter()
        .zip(&b[..n])
        .enumerate()
        .map(|(step, (x, y))| MagnitudeRow {
            step,
            zloss_a: x.zloss,
            zloss_b: y.zloss,
            max_logit_a: x.max_abs_logit,
            max_logit_b: y.max_abs_logit,
        })
        .collect();
    let window = window.clamp(1, n);
    let tail = &rows[n - window..];
    let mean = |f: fn(&MagnitudeRow) -> f64| tail.iter().map(f).sum::<f64>() / window as f64;
    let (za, zb) = (mean(|r| r.zloss_a), mean(|r| r.zloss_b));
    Ok(LogitComparison {
        warning,
        window,
        final_zloss_a: za,
        final_zloss_b: zb,
        final_max_logit_a: mean(|r| r.max_logit_a),
        final_max_logit_b: mean(|r| r.max_logit_b),
        ratio: if za == zb { 1.0 } else { zb / za },
        rows,
    })
}
