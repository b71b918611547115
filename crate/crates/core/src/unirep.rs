//! Unambiguous image representation.
//!
//! An image span is laid out as
//!
//! ```text
//! SOI  H(height)  W(width)  c c c … c EOL  c c c … c EOL  …  EOI
//!                          └─ width codes ┘ (height rows, EOL after every row)
//! ```
//!
//! The shape is fixed by the two indicator tokens before any code appears, so
//! a parser never has to look at code values, and two grids with the same code
//! count but different shapes never serialize to the same token list.

use crate::vocab::{Axis, TokenId, TokenRole, VocabManifest, EOI, EOL, SOI};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ImageTokenGrid {
    pub height: u32,
    pub width: u32,
    /// Row-major code indices, `height * width` long.
    pub codes: Vec<u32>,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GridError {
    #[error("grid is {height}x{width} but holds {len} codes")]
    LengthMismatch { height: u32, width: u32, len: usize },
    #[error("grid side {0} outside 1..={1}")]
    SideOutOfRange(u32, u32),
    #[error("code {code} at cell {index} exceeds codebook size {codebook_size}")]
    CodeOutOfRange { index: usize, code: u32, codebook_size: u32 },
}

impl ImageTokenGrid {
    pub fn new(height: u32, width: u32, codes: Vec<u32>) -> Result<Self, GridError> {
        if codes.len() != (height as usize) * (width as usize) {
            return Err(GridError::LengthMismatch { height, width, len: codes.len() });
        }
        Ok(Self { height, width, codes })
    }

    pub fn filled(height: u32, width: u32, code: u32) -> Self {
        Self { height, width, codes: vec![code; (height * width) as usize] }
    }

    pub fn check(&self, manifest: &VocabManifest) -> Result<(), GridError> {
        for side in [self.height, self.width] {
            if side == 0 || side > manifest.max_side {
                return Err(GridError::SideOutOfRange(side, manifest.max_side));
            }
        }
        if self.codes.len() != (self.height * self.width) as usize {
            return Err(GridError::LengthMismatch {
                height: self.height,
                width: self.width,
                len: self.codes.len(),
            });
        }
        if let Some((index, &code)) =
            self.codes.iter().enumerate().find(|(_, &c)| c >= manifest.codebook_size)
        {
            return Err(GridError::CodeOutOfRange {
                index,
                code,
                codebook_size: manifest.codebook_size,
            });
        }
        Ok(())
    }

    pub fn get(&self, row: u32, col: u32) -> u32 {
        self.codes[(row * self.width + col) as usize]
    }
}

/// Number of tokens in the serialized span of an `height × width` grid.
pub fn span_len(height: u32, width: u32) -> usize {
    3 + (height as usize) * (width as usize + 1) + 1
}

pub fn encode_grid(manifest: &VocabManifest, grid: &ImageTokenGrid) -> Result<Vec<TokenId>, GridError> {
    grid.check(manifest)?;
    let mut out = Vec::with_capacity(span_len(grid.height, grid.width));
    out.push(SOI);
    // check() bounded both sides, so the indicator lookups cannot fail.
    out.push(manifest.indicator_token(Axis::Height, grid.height).expect("checked"));
    out.push(manifest.indicator_token(Axis::Width, grid.width).expect("checked"));
    for row in grid.codes.chunks(grid.width as usize) {
        out.extend(row.iter().map(|&c| manifest.code_base() + c));
        out.push(EOL);
    }
    out.push(EOI);
    Ok(out)
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ParseError {
    #[error("position {pos}: expected SOI")]
    NotAtSoi { pos: usize },
    #[error("position {pos}: expected {axis:?} indicator")]
    MissingIndicator { pos: usize, axis: Axis },
    #[error("position {pos}: row {row} has more than {width} codes")]
    RowOverrun { pos: usize, row: u32, width: u32 },
    #[error("position {pos}: row {row} ended after {got} of {width} codes")]
    ShortRow { pos: usize, row: u32, got: u32, width: u32 },
    #[error("position {pos}: expected EOL after row {row}")]
    MissingEol { pos: usize, row: u32 },
    #[error("position {pos}: expected EOI after {height} rows")]
    MissingEoi { pos: usize, height: u32 },
    #[error("position {pos}: token {token} is not an image code")]
    ForeignToken { pos: usize, token: TokenId },
    #[error("position {pos}: sequence ended inside an image span")]
    Truncated { pos: usize },
}

impl ParseError {
    pub fn position(&self) -> usize {
        match *self {
            ParseError::NotAtSoi { pos }
            | ParseError::MissingIndicator { pos, .. }
            | ParseError::RowOverrun { pos, .. }
            | ParseError::ShortRow { pos, .. }
            | ParseError::MissingEol { pos, .. }
            | ParseError::MissingEoi { pos, .. }
            | ParseError::ForeignToken { pos, .. }
            | ParseError::Truncated { pos } => pos,
        }
    }
}

/// Strictly parses the image span starting at `tokens[start]`.
///
/// Returns the grid and the index one past EOI. The shape comes only from the
/// indicator tokens.
pub fn parse_image(
    manifest: &VocabManifest,
    tokens: &[TokenId],
    start: usize,
) -> Result<(ImageTokenGrid, usize), ParseError> {
    let at = |pos: usize| tokens.get(pos).copied().ok_or(ParseError::Truncated { pos });
    let role = |tok: TokenId| manifest.classify(tok).ok();

    if at(start)? != SOI {
        return Err(ParseError::NotAtSoi { pos: start });
    }
    let height = match role(at(start + 1)?) {
        Some(TokenRole::HeightInd(v)) => v,
        _ => return Err(ParseError::MissingIndicator { pos: start + 1, axis: Axis::Height }),
    };
    let width = match role(at(start + 2)?) {
        Some(TokenRole::WidthInd(v)) => v,
        _ => return Err(ParseError::MissingIndicator { pos: start + 2, axis: Axis::Width }),
    };

    let mut pos = start + 3;
    let mut codes = Vec::with_capacity((height * width) as usize);
    for row in 0..height {
        for col in 0..width {
            let tok = at(pos)?;
            match role(tok) {
                Some(TokenRole::ImageCode(c)) => codes.push(c),
                Some(TokenRole::Eol) => {
                    return Err(ParseError::ShortRow { pos, row, got: col, width })
                }
                _ => return Err(ParseError::ForeignToken { pos, token: tok }),
            }
            pos += 1;
        }
        match role(at(pos)?) {
            Some(TokenRole::Eol) => pos += 1,
            Some(TokenRole::ImageCode(_)) => return Err(ParseError::RowOverrun { pos, row, width }),
            _ => return Err(ParseError::MissingEol { pos, row }),
        }
    }
    if at(pos)? != EOI {
        return Err(ParseError::MissingEoi { pos, height });
    }
    Ok((ImageTokenGrid { height, width, codes }, pos + 1))
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PromptError {
    #[error("{axis:?} of {value}px is not a positive multiple of the {patch_px}px patch")]
    NotPatchMultiple { axis: Axis, value: u32, patch_px: u32 },
}

/// The resolution-aware text-to-image prompt. Width comes before height.
pub fn build_t2i_prompt(
    width_px: u32,
    height_px: u32,
    description: &str,
    patch_px: u32,
) -> Result<String, PromptError> {
    for (axis, value) in [(Axis::Width, width_px), (Axis::Height, height_px)] {
        if value == 0 || patch_px == 0 || value % patch_px != 0 {
            return Err(PromptError::NotPatchMultiple { axis, value, patch_px });
        }
    }
    Ok(format!(
        "Generate an image of {width_px}x{height_px} according to the following prompt:\n{description}"
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Segment {
    Text,
    ImageCode,
    Structural,
}

/// A token list with a per-position loss mask and segment tags.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MultimodalSequence {
    pub tokens: Vec<TokenId>,
    pub loss_mask: Vec<bool>,
    pub segments: Vec<Segment>,
}

impl MultimodalSequence {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn push(&mut self, token: TokenId, segment: Segment, loss: bool) {
        self.tokens.push(token);
        self.segments.push(segment);
        self.loss_mask.push(loss);
    }

    /// Appends tokens, tagging each by its role under `manifest`.
    pub fn extend_tagged(&mut self, manifest: &VocabManifest, tokens: &[TokenId], loss: bool) {
        for &t in tokens {
            let seg = match manifest.classify(t) {
                Ok(TokenRole::Text(_)) => Segment::Text,
                Ok(TokenRole::ImageCode(_)) => Segment::ImageCode,
                _ => Segment::Structural,
            };
            self.push(t, seg, loss);
        }
    }

    pub fn is_consistent(&self) -> bool {
        self.tokens.len() == self.loss_mask.len() && self.tokens.len() == self.segments.len()
    }

    pub fn first_soi(&self) -> Option<usize> {
        self.tokens.iter().position(|&t| t == SOI)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpanReport {
    pub start: usize,
    pub outcome: Result<SpanShape, ParseError>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpanShape {
    pub height: u32,
    pub width: u32,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub spans: Vec<SpanReport>,
    /// Image-internal tokens (codes, indicators, EOL, EOI) found outside any span.
    pub stray_positions: Vec<usize>,
    /// Ids outside the vocabulary.
    pub invalid_positions: Vec<usize>,
}

impl ValidationReport {
    /// True iff every located span parsed.
    pub fn is_well_formed(&self) -> bool {
        self.spans.iter().all(|s| s.outcome.is_ok())
    }

    pub fn summary(&self) -> String {
        let ok = self.spans.iter().filter(|s| s.outcome.is_ok()).count();
        let mut line = format!("spans={} ok={}", self.spans.len(), ok);
        if let Some(first_bad) = self.spans.iter().find_map(|s| s.outcome.as_ref().err()) {
            line.push_str(&format!(" first_error=\"{first_bad}\""));
        }
        if !self.stray_positions.is_empty() {
            line.push_str(&format!(" stray={}", self.stray_positions.len()));
        }
        if !self.invalid_positions.is_empty() {
            line.push_str(&format!(" invalid_ids={}", self.invalid_positions.len()));
        }
        line
    }
}

/// Locates every image span in `tokens` and parses each one.
///
/// A span that fails to parse is reported and scanning resumes right after
/// its SOI.
pub fn validate(manifest: &VocabManifest, tokens: &[TokenId]) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut pos = 0;
    while pos < tokens.len() {
        let tok = tokens[pos];
        match manifest.classify(tok) {
            Err(_) => {
                report.invalid_positions.push(pos);
                pos += 1;
            }
            Ok(TokenRole::Soi) => match parse_image(manifest, tokens, pos) {
                Ok((grid, end)) => {
                    report.spans.push(SpanReport {
                        start: pos,
                        outcome: Ok(SpanShape { height: grid.height, width: grid.width, end }),
                    });
                    pos = end;
                }
                Err(e) => {
                    report.spans.push(SpanReport { start: pos, outcome: Err(e) });
                    pos += 1;
                }
            },
            Ok(role) if role.is_image_internal() => {
                report.stray_positions.push(pos);
                pos += 1;
            }
            Ok(_) => pos += 1,
        }
    }
    report
}
