use crate::config::RunConfig;
use crate::dataset;
use crate::CliError;
use mgpt::analysis::{attn_report, sweep, SweepSpec};
use mgpt::decoding::{generate, DecodeParams, GenerateConfig};
use mgpt::imagecodec::{build_codebook, decode_grid, Codebook, RasterImage};
use mgpt::model::{Checkpoint, ModelParams};
use mgpt::resolution::{match_bucket, ResolutionBucket, StagePlan};
use mgpt::training::synthetic::color_codebook;
use mgpt::training::{run_progressive, Formatter, TaskRecord};
use mgpt::unirep::validate;
use mgpt::vocab::{TokenId, VocabManifest, END_OF_TURN, EOS};
use serde_json::{json, Value};
use std::io::Write;
use std::path::{Path, PathBuf};

pub const OUTPUT_ROOT_ENV: &str = "MGPT_OUTPUT_ROOT";

fn io_err(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::new("io", format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| io_err(path, e))
}

/// A validated config and its run directory.
pub struct Run {
    pub cfg: RunConfig,
    pub dir: PathBuf,
    pub manifest: VocabManifest,
    pub plan: StagePlan,
}

impl Run {
    pub fn open(cfg: RunConfig) -> Result<Self, CliError> {
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"));
        let dir = root.join(cfg.hash());
        let manifest = cfg.manifest().map_err(|m| CliError::new("config", m))?;
        let plan = cfg.plan().map_err(|m| CliError::new("config", m))?;
        write_file(&dir.join("config.toml"), cfg.to_toml())?;
        Ok(Self { cfg, dir, manifest, plan })
    }

    /// The configured codebook, else the run's `codebook.json`, else the
    /// palette when the vocabulary has eight codes.
    fn codebook(&self) -> Result<Codebook, CliError> {
        let path = self.cfg.codebook.clone().unwrap_or_else(|| self.dir.join("codebook.json"));
        let cb = if path.exists() {
            let text = std::fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
            Codebook::from_json(&text).map_err(|e| CliError::new("codebook", e.to_string()))?
        } else if self.cfg.codebook.is_none() && self.manifest.codebook_size == 8 {
            color_codebook(self.manifest.patch_px)
        } else {
            return Err(CliError::new("codebook", format!("no codebook at {}; run codebook-build", path.display())));
        };
        cb.check(&self.manifest).map_err(|e| CliError::new("codebook", e.to_string()))?;
        Ok(cb)
    }

    fn last_buckets(&self) -> &[ResolutionBucket] {
        &self.plan.stages.last().expect("validated plan has stages").buckets
    }

    fn load_model(&self, checkpoint: Option<&Path>) -> Result<ModelParams, CliError> {
        let path = match checkpoint {
            Some(p) => p.to_path_buf(),
            None => (0..self.plan.stages.len())
                .rev()
                .map(|i| self.dir.join(format!("stage{i}.ckpt")))
                .find(|p| p.exists())
                .ok_or_else(|| CliError::new("checkpoint", format!("no stage checkpoint in {}; run train", self.dir.display())))?,
        };
        let ck = Checkpoint::load(&path).map_err(|e| CliError::new("checkpoint", format!("{}: {e}", path.display())))?;
        if ck.manifest_hash != self.manifest.hash() {
            return Err(CliError::new("checkpoint", "checkpoint was trained against a different vocabulary"));
        }
        Ok(ck.params)
    }
}

pub enum DataSource {
    Manifest(PathBuf),
    Synthetic { names: String, side: u32 },
}

fn records(run: &Run, src: &DataSource) -> Result<Vec<TaskRecord>, CliError> {
    let recs = match src {
        DataSource::Manifest(p) => dataset::load(p),
        DataSource::Synthetic { names, side } => dataset::synthetic(names, *side, run.manifest.patch_px),
    }
    .map_err(|m| CliError::new("dataset", m))?;
    if recs.is_empty() {
        return Err(CliError::new("dataset", "dataset has no records"));
    }
    Ok(recs)
}

pub fn vocab_build(run: &Run) -> Result<Value, CliError> {
    let path = run.dir.join("manifest.toml");
    write_file(&path, run.manifest.to_toml())?;
    Ok(json!({
        "manifest": path,
        "hash": run.manifest.hash(),
        "vocab_total": run.manifest.total(),
        "text_base": run.manifest.text_base(),
        "code_base": run.manifest.code_base(),
    }))
}

fn collect_ppm(paths: &[PathBuf]) -> Result<Vec<PathBuf>, CliError> {
    let mut out = Vec::new();
    for p in paths {
        if p.is_dir() {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| io_err(p, e))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|e| e.extension().is_some_and(|x| x == "ppm"))
                .collect();
            entries.sort();
            out.extend(entries);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

pub fn codebook_build(run: &Run, images: &[PathBuf], palette: bool) -> Result<Value, CliError> {
    let m = &run.manifest;
    let cb = if palette {
        color_codebook(m.patch_px)
    } else {
        let files = collect_ppm(images)?;
        if files.is_empty() {
            return Err(CliError::new("usage", "give --images or --palette"));
        }
        let imgs = files
            .iter()
            .map(|p| RasterImage::load_ppm(p).map_err(|e| io_err(p, e)))
            .collect::<Result<Vec<_>, _>>()?;
        build_codebook(&imgs, m.codebook_size as usize, m.patch_px, run.cfg.seed)
            .map_err(|e| CliError::new("codebook", e.to_string()))?
    };
    cb.check(m).map_err(|e| CliError::new("codebook", e.to_string()))?;
    let path = run.dir.join("codebook.json");
    write_file(&path, cb.to_json())?;
    Ok(json!({ "codebook": path, "entries": cb.len(), "patch_px": cb.patch_px }))
}

pub fn tokenize(run: &Run, src: &DataSource, stage: Option<usize>) -> Result<Value, CliError> {
    let stage = stage.unwrap_or(run.plan.stages.len() - 1);
    let s = run
        .plan
        .stages
        .get(stage)
        .ok_or_else(|| CliError::new("usage", format!("stage {stage} is not in the plan")))?;
    let cb = run.codebook()?;
    let fmt = Formatter { manifest: &run.manifest, codebook: &cb, buckets: &s.buckets };
    let mut out = Vec::new();
    let mut lengths = Vec::new();
    for (i, r) in records(run, src)?.iter().enumerate() {
        let seq = fmt.format_task(r).map_err(|e| CliError::new("format", format!("record {i}: {e}")))?;
        let report = validate(&run.manifest, &seq.tokens);
        if !report.is_well_formed() {
            return Err(CliError::new("format", format!("record {i}: {}", report.summary())));
        }
        lengths.push(seq.len());
        let line = json!({ "task": r.kind(), "tokens": seq.tokens, "loss_mask": seq.loss_mask });
        writeln!(out, "{line}").expect("vec write");
    }
    let path = run.dir.join(format!("tokens.stage{stage}.jsonl"));
    write_file(&path, out)?;
    Ok(json!({
        "tokens": path,
        "stage": stage,
        "sequences": lengths.len(),
        "min_len": lengths.iter().min(),
        "max_len": lengths.iter().max(),
    }))
}

pub fn train(run: &Run, src: &DataSource) -> Result<Value, CliError> {
    let recs = records(run, src)?;
    let cb = run.codebook()?;
    let mc = run.cfg.model_config().map_err(|m| CliError::new("config", m))?;
    let mut params = ModelParams::init(&mc).map_err(|e| CliError::new("model", e.to_string()))?;
    let results = run_progressive(&mut params, &run.manifest, &cb, &run.plan, &recs, &run.cfg.hyper())
        .map_err(|e| CliError::new("train", e.to_string()))?;

    let mut metrics = Vec::new();
    let mut stages = Vec::new();
    for r in &results {
        for m in &r.metrics {
            writeln!(metrics, "{}", serde_json::to_string(m).expect("json")).expect("vec write");
        }
        let path = run.dir.join(format!("stage{}.ckpt", r.stage));
        let ck = Checkpoint { params: r.params.clone(), opt_state: None, manifest_hash: run.manifest.hash(), stage: Some(r.stage) };
        ck.save(&path).map_err(|e| io_err(&path, e))?;
        stages.push(json!({
            "stage": r.stage,
            "checkpoint": path,
            "initial_ce": r.initial.ce,
            "final_ce": r.metrics.last().map(|m| m.ce),
            "steps": r.metrics.len(),
        }));
    }
    let path = run.dir.join("metrics.jsonl");
    write_file(&path, metrics)?;
    Ok(json!({ "run": run.dir, "metrics": path, "stages": stages }))
}

pub struct GenerateRequest {
    pub prompt: String,
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub seed: u64,
    pub cfg: Option<f64>,
    pub top_k: Option<usize>,
    pub temperature: Option<f64>,
    pub constrained: bool,
}

fn slug(s: &str) -> String {
    let s: String = s.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '-' }).collect();
    let s = s.trim_matches('-');
    let s = if s.len() > 40 { &s[..40] } else { s };
    if s.is_empty() {
        "prompt".into()
    } else {
        s.into()
    }
}

fn t2i_prompt(run: &Run, cb: &Codebook, desc: &str, w: Option<u32>, h: Option<u32>) -> Result<(Vec<TokenId>, ResolutionBucket), CliError> {
    let buckets = run.last_buckets();
    let (w, h) = (w.or(h).unwrap_or(1), h.or(w).unwrap_or(1));
    let bucket = match_bucket(w, h, buckets).map_err(|e| CliError::new("usage", e.to_string()))?;
    let fmt = Formatter { manifest: &run.manifest, codebook: cb, buckets };
    let tokens = fmt.t2i_generation_prompt(desc, bucket).map_err(|e| CliError::new("format", e.to_string()))?;
    Ok((tokens, bucket))
}

fn window(run: &Run, model: &ModelParams, prompt_len: usize) -> usize {
    run.cfg.decode.max_tokens.min((model.config.max_seq + 1).saturating_sub(prompt_len))
}

pub fn generate_cmd(run: &Run, checkpoint: Option<&Path>, req: &GenerateRequest) -> Result<Value, CliError> {
    let cb = run.codebook()?;
    let model = run.load_model(checkpoint)?;
    let (prompt, bucket) = t2i_prompt(run, &cb, &req.prompt, req.width, req.height)?;
    let base = run.cfg.decode.image;
    let image = DecodeParams {
        temperature: req.temperature.unwrap_or(base.temperature),
        top_k: req.top_k.unwrap_or(base.top_k),
        cfg_scale: req.cfg.unwrap_or(base.cfg_scale),
    };
    let gc = GenerateConfig {
        text: run.cfg.decode.text,
        image,
        seed: req.seed,
        max_tokens: window(run, &model, prompt.len()),
        constrained: req.constrained,
        stop_tokens: vec![EOS, END_OF_TURN],
        stop_after_image: true,
        ..Default::default()
    };
    let r = generate(&model, &run.manifest, &prompt, &gc).map_err(|e| CliError::new("generate", e.to_string()))?;

    let name = format!("{}-s{}-t{}-k{}-c{}", slug(&req.prompt), req.seed, image.temperature, image.top_k, image.cfg_scale);
    let dir = run.dir.join("generate").join(name);
    let ids: Vec<String> = r.full_sequence().iter().map(u32::to_string).collect();
    write_file(&dir.join("tokens.txt"), ids.join(" ") + "\n")?;
    let images = r.images(&run.manifest);
    let mut image_file = None;
    if let Some(Ok(grid)) = images.first() {
        let img = decode_grid(grid, &cb).map_err(|e| CliError::new("codec", e.to_string()))?;
        let path = dir.join("image.ppm");
        img.save_ppm(&path).map_err(|e| io_err(&path, e))?;
        image_file = Some(path);
    }
    let record = json!({
        "prompt": req.prompt,
        "bucket": [bucket.width_px, bucket.height_px],
        "seed": r.seed,
        "text_params": r.text_params,
        "image_params": r.image_params,
        "constrained": req.constrained,
        "stop": r.stop,
        "truncated_image": r.truncated_image,
        "image_spans": images.iter().map(|g| g.as_ref().map(|g| [g.height, g.width]).map_err(|e| e.to_string())).collect::<Vec<_>>(),
        "steps": r.steps,
    });
    write_file(&dir.join("generation.json"), serde_json::to_string_pretty(&record).expect("json"))?;
    Ok(json!({
        "dir": dir,
        "image": image_file,
        "tokens": r.tokens.len(),
        "well_formed": !images.is_empty() && images.iter().all(Result::is_ok) && !r.truncated_image,
    }))
}

fn read_sequences(path: &Path) -> Result<Vec<Vec<TokenId>>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let bad = |m: String| CliError::new("input", format!("{} line {}: {m}", path.display(), i + 1));
            if l.trim_start().starts_with('{') {
                let v: Value = serde_json::from_str(l).map_err(|e| bad(e.to_string()))?;
                serde_json::from_value(v["tokens"].clone()).map_err(|e| bad(e.to_string()))
            } else {
                l.split_whitespace().map(|t| t.parse().map_err(|_| bad(format!("`{t}` is not a token id")))).collect()
            }
        })
        .collect()
}

pub fn parse_cmd(cfg: &RunConfig, input: &Path) -> Result<Value, CliError> {
    let m = cfg.manifest().map_err(|e| CliError::new("config", e))?;
    let seqs = read_sequences(input)?;
    let mut rows = Vec::new();
    let mut bad = Vec::new();
    for (i, toks) in seqs.iter().enumerate() {
        if let Some(&t) = toks.iter().find(|&&t| t >= m.total()) {
            bad.push(format!("sequence {i}: token {t} outside the vocabulary"));
            continue;
        }
        let report = validate(&m, toks);
        let shapes: Vec<Value> = report
            .spans
            .iter()
            .map(|s| match &s.outcome {
                Ok(sh) => json!({ "start": s.start, "height": sh.height, "width": sh.width }),
                Err(e) => json!({ "start": s.start, "error": e.to_string() }),
            })
            .collect();
        if !report.is_well_formed() || !report.stray_positions.is_empty() {
            bad.push(format!("sequence {i}: {}", report.summary()));
        }
        rows.push(json!({ "sequence": i, "ok": report.is_well_formed(), "spans": shapes }));
    }
    if !bad.is_empty() {
        return Err(CliError { error: "malformed", message: format!("{} of {} sequences malformed", bad.len(), seqs.len()), details: bad });
    }
    Ok(json!({ "sequences": seqs.len(), "all_ok": true, "reports": rows }))
}

pub struct SweepGrid {
    pub prompt: String,
    pub temperatures: Vec<f64>,
    pub top_ks: Vec<usize>,
    pub cfgs: Vec<f64>,
    pub seeds: Vec<u64>,
    pub constrained: bool,
}

pub fn sweep_cmd(run: &Run, checkpoint: Option<&Path>, grid: &SweepGrid) -> Result<Value, CliError> {
    let cb = run.codebook()?;
    let model = run.load_model(checkpoint)?;
    let (prompt, _) = t2i_prompt(run, &cb, &grid.prompt, None, None)?;
    let spec = SweepSpec {
        max_tokens: window(run, &model, prompt.len()),
        prompt,
        temperatures: grid.temperatures.clone(),
        top_ks: grid.top_ks.clone(),
        cfg_scales: grid.cfgs.clone(),
        seeds: grid.seeds.clone(),
        text: run.cfg.decode.text,
        constrained: grid.constrained,
    };
    let dir = run.dir.join("sweep").join(slug(&grid.prompt));
    let report = sweep(&model, &run.manifest, &cb, &spec, Some(&dir)).map_err(|e| CliError::new("sweep", e.to_string()))?;
    write_file(&dir.join("table.txt"), report.to_table())?;
    write_file(&dir.join("report.json"), serde_json::to_string_pretty(&report).expect("json"))?;
    Ok(json!({
        "dir": dir,
        "cells": report.rows.len(),
        "well_formed": report.rows.iter().filter(|r| r.well_formed).count(),
        "trend": report.trend,
    }))
}

pub fn attn_cmd(run: &Run, checkpoint: Option<&Path>, prompt: Option<&str>, tokens: Option<&Path>, seed: u64) -> Result<Value, CliError> {
    let model = run.load_model(checkpoint)?;
    let (seq, name) = match (tokens, prompt) {
        (Some(p), _) => {
            let first = read_sequences(p)?.into_iter().next().ok_or_else(|| CliError::new("input", "no sequence in file"))?;
            (first, "tokens".to_string())
        }
        (None, Some(desc)) => {
            let cb = run.codebook()?;
            let (prompt, _) = t2i_prompt(run, &cb, desc, None, None)?;
            let gc = GenerateConfig {
                text: run.cfg.decode.text,
                image: run.cfg.decode.image,
                seed,
                max_tokens: window(run, &model, prompt.len()),
                stop_after_image: true,
                ..Default::default()
            };
            let r = generate(&model, &run.manifest, &prompt, &gc).map_err(|e| CliError::new("generate", e.to_string()))?;
            (r.full_sequence(), format!("{}-s{seed}", slug(desc)))
        }
        (None, None) => return Err(CliError::new("usage", "give --prompt or --tokens")),
    };
    let report = attn_report(&model, &run.manifest, &seq).map_err(|e| CliError::new("attn", e.to_string()))?;
    let dir = run.dir.join("attn").join(name);
    write_file(&dir.join("report.txt"), report.to_table())?;
    write_file(&dir.join("report.json"), serde_json::to_string_pretty(&report).expect("json"))?;
    Ok(json!({ "dir": dir, "query": report.query, "roles": report.roles }))
}
