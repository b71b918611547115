//! Dataset manifests: TOML lists of task records with image paths relative
//! to the manifest file.

use mgpt::imagecodec::RasterImage;
use mgpt::training::synthetic::{caption_records, color_records, stripe_records};
use mgpt::training::TaskRecord;
use serde::Deserialize;
use std::path::{Path, PathBuf};

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetFile {
    #[serde(default)]
    record: Vec<RecordEntry>,
}

#[derive(Debug, Deserialize)]
#[serde(tag = "task", rename_all = "kebab-case", deny_unknown_fields)]
enum RecordEntry {
    TextToImage { description: String, image: PathBuf },
    Captioning { image: PathBuf, caption: String },
    Editing { source: PathBuf, steps: Vec<EditStep> },
    DensePrediction { kind: String, image: PathBuf, target: PathBuf },
    SpatialConditional { condition: String, condition_image: PathBuf, description: String, target: PathBuf },
    Multiview { description: String, views: Vec<PathBuf> },
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EditStep {
    instruction: String,
    image: PathBuf,
}

pub fn load(path: &Path) -> Result<Vec<TaskRecord>, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
    let file: DatasetFile = toml::from_str(&text).map_err(|e| format!("{}: {e}", path.display()))?;
    let base = path.parent().unwrap_or(Path::new("."));
    let img = |p: &PathBuf| RasterImage::load_ppm(base.join(p)).map_err(|e| format!("{}: {e}", base.join(p).display()));
    file.record
        .iter()
        .map(|r| {
            Ok(match r {
                RecordEntry::TextToImage { description, image } => {
                    TaskRecord::TextToImage { description: description.clone(), image: img(image)? }
                }
                RecordEntry::Captioning { image, caption } => TaskRecord::Captioning { image: img(image)?, caption: caption.clone() },
                RecordEntry::Editing { source, steps } => TaskRecord::Editing {
                    source: img(source)?,
                    steps: steps.iter().map(|s| Ok((s.instruction.clone(), img(&s.image)?))).collect::<Result<_, String>>()?,
                },
                RecordEntry::DensePrediction { kind, image, target } => {
                    TaskRecord::DensePrediction { task: kind.clone(), image: img(image)?, target: img(target)? }
                }
                RecordEntry::SpatialConditional { condition, condition_image, description, target } => {
                    TaskRecord::SpatialConditional {
                        condition: condition.clone(),
                        condition_image: img(condition_image)?,
                        description: description.clone(),
                        target: img(target)?,
                    }
                }
                RecordEntry::Multiview { description, views } => TaskRecord::Multiview {
                    description: description.clone(),
                    views: views.iter().map(img).collect::<Result<_, _>>()?,
                },
            })
        })
        .collect()
}

/// Built-in sets by name: `colors`, `stripes`, `captions`.
pub fn synthetic(names: &str, side: u32, patch_px: u32) -> Result<Vec<TaskRecord>, String> {
    let mut out = Vec::new();
    for name in names.split(',').map(str::trim) {
        match name {
            "colors" => out.extend(color_records(side, side)),
            "stripes" => out.extend(stripe_records(side, side, patch_px)),
            "captions" => out.extend(caption_records(side, side)),
            other => return Err(format!("unknown synthetic set `{other}` (colors, stripes, captions)")),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_records_with_relative_images() {
        let dir = tempfile::tempdir().unwrap();
        RasterImage::solid(16, 16, [1.0, 0.0, 0.0]).save_ppm(dir.path().join("red.ppm")).unwrap();
        let manifest = dir.path().join("data.toml");
        std::fs::write(
            &manifest,
            r#"
[[record]]
task = "text-to-image"
description = "red"
image = "red.ppm"

[[record]]
task = "multiview"
description = "cube"
views = ["red.ppm", "red.ppm"]
"#,
        )
        .unwrap();
        let recs = load(&manifest).unwrap();
        assert_eq!(recs.len(), 2);
        assert_eq!(recs[1].kind(), "multiview");

        std::fs::write(&manifest, "[[record]]\ntask = \"text-to-image\"\ndescription = \"x\"\nimage = \"missing.ppm\"\n").unwrap();
        assert!(load(&manifest).unwrap_err().contains("missing.ppm"));
        assert_eq!(synthetic("colors, captions", 16, 8).unwrap().len(), 16);
        assert!(synthetic("nope", 16, 8).is_err());
    }
}
