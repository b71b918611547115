//! Dialog templates: records → masked multimodal sequences.
//!
//! A formatted sequence is
//!
//! ```text
//! BOS  (UserMark | AssistantMark) content… EndOfTurn  …
//! ```
//!
//! Loss applies to assistant content and the assistant's EndOfTurn only.
//! Text is byte-tokenized; images go through bucket matching, fitting, the
//! patch codec and the unambiguous span encoding.

use crate::imagecodec::{encode_image, CodecError, Codebook, RasterImage};
use crate::resolution::{fit_image, match_bucket, ResolutionBucket, ResolutionError};
use crate::unirep::{build_t2i_prompt, encode_grid, GridError, MultimodalSequence, PromptError, Segment};
use crate::vocab::{TokenId, VocabManifest, ASSISTANT_MARK, BOS, END_OF_TURN, USER_MARK};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum FormatError {
    #[error("dialog has no turns")]
    EmptyDialog,
    #[error("dialog has no assistant turn")]
    NoAssistantTurn,
    #[error("turn {0} breaks the user/assistant alternation")]
    BadAlternation(usize),
    #[error("image prompt in turn {0} has no following image to size it")]
    PromptWithoutImage(usize),
    #[error("multiview needs at least 2 views, got {0}")]
    TooFewViews(usize),
    #[error("editing needs at least one step")]
    NoEditSteps,
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    Resolution(#[from] ResolutionError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Prompt(#[from] PromptError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq)]
pub enum ContentPart {
    Text(String),
    Image(RasterImage),
    /// Resolution-aware text-to-image prompt; its pixel size is the bucket
    /// matched by the next image in the dialog.
    ImagePrompt(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Turn {
    pub role: Role,
    pub parts: Vec<ContentPart>,
}

impl Turn {
    pub fn user(parts: Vec<ContentPart>) -> Self {
        Self { role: Role::User, parts }
    }

    pub fn assistant(parts: Vec<ContentPart>) -> Self {
        Self { role: Role::Assistant, parts }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DialogRecord {
    pub turns: Vec<Turn>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskRecord {
    TextToImage { description: String, image: RasterImage },
    Captioning { image: RasterImage, caption: String },
    /// Multi-turn when `steps` has more than one entry.
    Editing { source: RasterImage, steps: Vec<(String, RasterImage)> },
    DensePrediction { task: String, image: RasterImage, target: RasterImage },
    SpatialConditional { condition: String, condition_image: RasterImage, description: String, target: RasterImage },
    Multiview { description: String, views: Vec<RasterImage> },
}

impl TaskRecord {
    pub fn kind(&self) -> &'static str {
        match self {
            TaskRecord::TextToImage { .. } => "text-to-image",
            TaskRecord::Captioning { .. } => "captioning",
            TaskRecord::Editing { .. } => "editing",
            TaskRecord::DensePrediction { .. } => "dense-prediction",
            TaskRecord::SpatialConditional { .. } => "spatial-conditional",
            TaskRecord::Multiview { .. } => "multiview",
        }
    }

    /// The fixed dialog template for this task.
    pub fn to_dialog(&self) -> Result<DialogRecord, FormatError> {
        use ContentPart::{Image, ImagePrompt, Text};
        let turns = match self {
            TaskRecord::TextToImage { description, image } => vec![
                Turn::user(vec![ImagePrompt(description.clone())]),
                Turn::assistant(vec![Image(image.clone())]),
            ],
            TaskRecord::Captioning { image, caption } => vec![
                Turn::user(vec![Image(image.clone()), Text("Describe this image.".into())]),
                Turn::assistant(vec![Text(caption.clone())]),
            ],
            TaskRecord::Editing { source, steps } => {
                if steps.is_empty() {
                    return Err(FormatError::NoEditSteps);
                }
                let mut turns = Vec::new();
                for (i, (instruction, target)) in steps.iter().enumerate() {
                    let mut user = Vec::new();
                    if i == 0 {
                        user.push(Image(source.clone()));
                    }
                    user.push(Text(instruction.clone()));
                    turns.push(Turn::user(user));
                    turns.push(Turn::assistant(vec![Image(target.clone())]));
                }
                turns
            }
            TaskRecord::DensePrediction { task, image, target } => vec![
                Turn::user(vec![Image(image.clone()), Text(format!("Generate the {task} map of this image."))]),
                Turn::assistant(vec![Image(target.clone())]),
            ],
            TaskRecord::SpatialConditional { condition, condition_image, description, target } => vec![
                Turn::user(vec![
                    Image(condition_image.clone()),
                    Text(format!(
                        "Generate an image according to the {condition} map above and the following prompt:\n{description}"
                    )),
                ]),
                Turn::assistant(vec![Image(target.clone())]),
            ],
            TaskRecord::Multiview { description, views } => {
                if views.len() < 2 {
                    return Err(FormatError::TooFewViews(views.len()));
                }
                vec![
                    Turn::user(vec![Text(format!(
                        "Generate {} views of the following object:\n{description}",
                        views.len()
                    ))]),
                    Turn::assistant(views.iter().cloned().map(Image).collect()),
                ]
            }
        };
        Ok(DialogRecord { turns })
    }
}

/// Everything needed to turn records into token sequences for one stage.
#[derive(Debug, Clone, Copy)]
pub struct Formatter<'a> {
    pub manifest: &'a VocabManifest,
    pub codebook: &'a Codebook,
    pub buckets: &'a [ResolutionBucket],
}

impl Formatter<'_> {
    fn image_tokens(&self, image: &RasterImage) -> Result<Vec<TokenId>, FormatError> {
        let bucket = match_bucket(image.width, image.height, self.buckets)?;
        let fitted = fit_image(image, bucket)?;
        let grid = encode_image(self.manifest, &fitted, self.codebook)?;
        Ok(encode_grid(self.manifest, &grid)?)
    }

    pub fn format_dialog(&self, record: &DialogRecord) -> Result<MultimodalSequence, FormatError> {
        if record.turns.is_empty() {
            return Err(FormatError::EmptyDialog);
        }
        for (i, t) in record.turns.iter().enumerate() {
            let want = if i % 2 == 0 { Role::User } else { Role::Assistant };
            if t.role != want {
                return Err(FormatError::BadAlternation(i));
            }
        }
        if record.turns.len() < 2 {
            return Err(FormatError::NoAssistantTurn);
        }

        let mut seq = MultimodalSequence::new();
        seq.push(BOS, Segment::Structural, false);
        for (ti, turn) in record.turns.iter().enumerate() {
            let loss = turn.role == Role::Assistant;
            let marker = if loss { ASSISTANT_MARK } else { USER_MARK };
            seq.push(marker, Segment::Structural, false);
            for (pi, part) in turn.parts.iter().enumerate() {
                let tokens = match part {
                    ContentPart::Text(s) => self.manifest.encode_text(s),
                    ContentPart::Image(img) => self.image_tokens(img)?,
                    ContentPart::ImagePrompt(desc) => {
                        let next = next_image(record, ti, pi).ok_or(FormatError::PromptWithoutImage(ti))?;
                        let b = match_bucket(next.width, next.height, self.buckets)?;
                        let text = build_t2i_prompt(b.width_px, b.height_px, desc, self.manifest.patch_px)?;
                        self.manifest.encode_text(&text)
                    }
                };
                seq.extend_tagged(self.manifest, &tokens, loss);
            }
            seq.push(END_OF_TURN, Segment::Structural, loss);
        }
        Ok(seq)
    }

    pub fn format_task(&self, record: &TaskRecord) -> Result<MultimodalSequence, FormatError> {
        self.format_dialog(&record.to_dialog()?)
    }

    /// Tokens that open an assistant reply to a text-to-image request at a
    /// given bucket: `BOS UserMark prompt… EndOfTurn AssistantMark`.
    pub fn t2i_generation_prompt(&self, description: &str, bucket: ResolutionBucket) -> Result<Vec<TokenId>, FormatError> {
        let text = build_t2i_prompt(bucket.width_px, bucket.height_px, description, self.manifest.patch_px)?;
        let mut out = vec![BOS, USER_MARK];
        out.extend(self.manifest.encode_text(&text));
        out.extend([END_OF_TURN, ASSISTANT_MARK]);
        Ok(out)
    }
}

fn next_image(record: &DialogRecord, turn: usize, part: usize) -> Option<&RasterImage> {
    record
        .turns
        .iter()
        .enumerate()
        .skip(turn)
        .flat_map(|(ti, t)| t.parts.iter().enumerate().map(move |(pi, p)| (ti, pi, p)))
        .filter(|&(ti, pi, _)| ti > turn || pi > part)
        .find_map(|(_, _, p)| match p {
            ContentPart::Image(img) => Some(img),
            _ => None,
        })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unirep::validate;
    use crate::vocab::{SOI, EOI};

    fn setup() -> (VocabManifest, Codebook, Vec<ResolutionBucket>) {
        let m = VocabManifest::new(256, 4, 16, 8).unwrap();
        let cb = Codebook::from_colors(8, &[[0.0; 3], [1.0; 3], [1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]);
        let buckets = vec![ResolutionBucket::new(32, 32), ResolutionBucket::new(64, 32), ResolutionBucket::new(32, 64)];
        (m, cb, buckets)
    }

    #[test]
    fn text_dialog_mask() {
        let (m, cb, b) = setup();
        let f = Formatter { manifest: &m, codebook: &cb, buckets: &b };
        let rec = DialogRecord {
            turns: vec![
                Turn::user(vec![ContentPart::Text("hi".into())]),
                Turn::assistant(vec![ContentPart::Text("yo".into())]),
            ],
        };
        let seq = f.format_dialog(&rec).unwrap();
        let h = m.text_base() + b'h' as u32;
        assert_eq!(seq.tokens[..6], [BOS, USER_MARK, h, h + 1, END_OF_TURN, ASSISTANT_MARK]);
        assert_eq!(seq.loss_mask, vec![false, false, false, false, false, false, true, true, true]);
        assert!(seq.is_consistent());
    }

    #[test]
    fn t2i_prompt_uses_matched_bucket() {
        let (m, cb, b) = setup();
        let f = Formatter { manifest: &m, codebook: &cb, buckets: &b };
        // 200x90 is closest in aspect to the 64x32 bucket.
        let rec = TaskRecord::TextToImage { description: "red".into(), image: RasterImage::solid(200, 90, [1.0, 0.0, 0.0]) };
        let seq = f.format_task(&rec).unwrap();
        let text = m.decode_text(&seq.tokens);
        assert!(text.starts_with("Generate an image of 64x32 according to the following prompt:\nred"));
        let report = validate(&m, &seq.tokens);
        assert_eq!(report.spans.len(), 1);
        let shape = report.spans[0].outcome.as_ref().unwrap();
        assert_eq!((shape.height, shape.width), (4, 8));
        assert!(seq.tokens[shape.end - 10..shape.end - 2].iter().all(|&t| t == m.code_base() + 2));
        assert_eq!(f.t2i_generation_prompt("red", b[1]).unwrap(), seq.tokens[..seq.first_soi().unwrap()]);
    }

    #[test]
    fn structural_errors() {
        let (m, cb, b) = setup();
        let f = Formatter { manifest: &m, codebook: &cb, buckets: &b };
        assert!(matches!(f.format_dialog(&DialogRecord { turns: vec![] }), Err(FormatError::EmptyDialog)));
        let only_user = DialogRecord { turns: vec![Turn::user(vec![ContentPart::Text("a".into())])] };
        assert!(matches!(f.format_dialog(&only_user), Err(FormatError::NoAssistantTurn)));
        let swapped = DialogRecord {
            turns: vec![Turn::assistant(vec![]), Turn::user(vec![])],
        };
        assert!(matches!(f.format_dialog(&swapped), Err(FormatError::BadAlternation(0))));
        let dangling = DialogRecord {
            turns: vec![Turn::user(vec![ContentPart::ImagePrompt("x".into())]), Turn::assistant(vec![])],
        };
        assert!(matches!(f.format_dialog(&dangling), Err(FormatError::PromptWithoutImage(0))));
        let mv = TaskRecord::Multiview { description: "x".into(), views: vec![RasterImage::solid(8, 8, [0.0; 3])] };
        assert!(matches!(f.format_task(&mv), Err(FormatError::TooFewViews(1))));
    }

    #[test]
    fn task_templates() {
        let (m, cb, b) = setup();
        let f = Formatter { manifest: &m, codebook: &cb, buckets: &b };
        let img = |c: f64| RasterImage::solid(32, 32, [c; 3]);

        let mv = f
            .format_task(&TaskRecord::Multiview { description: "cube".into(), views: vec![img(0.0), img(1.0), img(0.0)] })
            .unwrap();
        let asst = mv.tokens.iter().position(|&t| t == ASSISTANT_MARK).unwrap();
        assert_eq!(mv.tokens[asst..].iter().filter(|&&t| t == SOI).count(), 3);
        assert_eq!(mv.tokens[asst..].iter().filter(|&&t| t == EOI).count(), 3);
        assert_eq!(mv.tokens[..asst].iter().filter(|&&t| t == SOI).count(), 0);
        assert_eq!(validate(&m, &mv.tokens).spans.len(), 3);

        let ed = f
            .format_task(&TaskRecord::Editing { source: img(0.0), steps: vec![("make it white".into(), img(1.0))] })
            .unwrap();
        let asst = ed.tokens.iter().position(|&t| t == ASSISTANT_MARK).unwrap();
        let user = &ed.tokens[..asst];
        let soi = user.iter().position(|&t| t == SOI).unwrap();
        let eoi = user.iter().position(|&t| t == EOI).unwrap();
        assert_eq!(user.iter().filter(|&&t| t == SOI).count(), 1);
        assert!(m.decode_text(&user[eoi..]).starts_with("make it white"));
        assert_eq!(m.decode_text(&user[..soi]), "");
        assert_eq!(ed.tokens[asst..].iter().filter(|&&t| t == SOI).count(), 1);

        let cap = f.format_task(&TaskRecord::Captioning { image: img(1.0), caption: "white".into() }).unwrap();
        let masked: Vec<_> = cap.loss_mask.iter().zip(&cap.segments).filter(|(m, _)| **m).map(|(_, s)| *s).collect();
        assert_eq!(masked.len(), 6);
        assert!(masked[..5].iter().all(|s| *s == Segment::Text));
        assert_eq!(*cap.tokens.last().unwrap(), END_OF_TURN);
    }
}
