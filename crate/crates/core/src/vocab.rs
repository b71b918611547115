//! The unified token id space.
//!
//! Every token the model can read or emit lives in one contiguous id range,
//! laid out in fixed blocks:
//!
//! | ids                              | role                        |
//! |----------------------------------|-----------------------------|
//! | `0..=8`                          | Pad, BOS, EOS, SOI, EOI, EOL, UserMark, AssistantMark, EndOfTurn |
//! | `9 .. 9+max_side`                | height indicators, values `1..=max_side` |
//! | `9+max_side .. 9+2·max_side`     | width indicators, values `1..=max_side` |
//! | next `text_size` ids             | text (byte) tokens          |
//! | next `codebook_size` ids         | image codes                 |
//!
//! Indicator values are measured in patches, not pixels.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const BOS: TokenId = 1;
pub const EOS: TokenId = 2;
pub const SOI: TokenId = 3;
pub const EOI: TokenId = 4;
pub const EOL: TokenId = 5;
pub const USER_MARK: TokenId = 6;
pub const ASSISTANT_MARK: TokenId = 7;
pub const END_OF_TURN: TokenId = 8;

const SPECIAL_COUNT: u32 = 9;

/// Version written into serialized manifests.
pub const MANIFEST_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum VocabError {
    #[error("{name} must be at least 1")]
    ZeroArgument { name: &'static str },
    #[error("token id {id} out of range (vocabulary has {total} ids)")]
    IdOutOfRange { id: TokenId, total: u32 },
    #[error("{axis:?} indicator value {value} outside 1..={max_side}")]
    IndicatorOutOfRange { axis: Axis, value: u32, max_side: u32 },
    #[error("text index {0} out of range")]
    TextOutOfRange(u32),
    #[error("image code {0} out of range")]
    CodeOutOfRange(u32),
    #[error("unsupported manifest format version {0}")]
    UnsupportedVersion(u32),
    #[error("manifest parse error: {0}")]
    Parse(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    Height,
    Width,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenRole {
    Pad,
    Bos,
    Eos,
    Soi,
    Eoi,
    Eol,
    UserMark,
    AssistantMark,
    EndOfTurn,
    HeightInd(u32),
    WidthInd(u32),
    Text(u32),
    ImageCode(u32),
}

impl TokenRole {
    /// Short label used in reports; payload-free.
    pub fn kind(&self) -> &'static str {
        match self {
            TokenRole::Pad => "Pad",
            TokenRole::Bos => "BOS",
            TokenRole::Eos => "EOS",
            TokenRole::Soi => "SOI",
            TokenRole::Eoi => "EOI",
            TokenRole::Eol => "EOL",
            TokenRole::UserMark => "UserMark",
            TokenRole::AssistantMark => "AssistantMark",
            TokenRole::EndOfTurn => "EndOfTurn",
            TokenRole::HeightInd(_) => "HeightInd",
            TokenRole::WidthInd(_) => "WidthInd",
            TokenRole::Text(_) => "Text",
            TokenRole::ImageCode(_) => "ImageCode",
        }
    }

    /// Tokens that may only appear inside an image span (after SOI).
    pub fn is_image_internal(&self) -> bool {
        matches!(
            self,
            TokenRole::Eoi
                | TokenRole::Eol
                | TokenRole::HeightInd(_)
                | TokenRole::WidthInd(_)
                | TokenRole::ImageCode(_)
        )
    }
}

/// Immutable description of the id layout.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct VocabManifest {
    pub format_version: u32,
    pub text_size: u32,
    pub codebook_size: u32,
    pub max_side: u32,
    pub patch_px: u32,
}

impl VocabManifest {
    pub fn new(
        text_size: u32,
        codebook_size: u32,
        max_side: u32,
        patch_px: u32,
    ) -> Result<Self, VocabError> {
        for (name, v) in [
            ("text_size", text_size),
            ("codebook_size", codebook_size),
            ("max_side", max_side),
            ("patch_px", patch_px),
        ] {
            if v == 0 {
                return Err(VocabError::ZeroArgument { name });
            }
        }
        Ok(Self {
            format_version: MANIFEST_FORMAT_VERSION,
            text_size,
            codebook_size,
            max_side,
            patch_px,
        })
    }

    pub fn total(&self) -> u32 {
        SPECIAL_COUNT + 2 * self.max_side + self.text_size + self.codebook_size
    }

    pub fn height_base(&self) -> TokenId {
        SPECIAL_COUNT
    }

    pub fn width_base(&self) -> TokenId {
        SPECIAL_COUNT + self.max_side
    }

    pub fn text_base(&self) -> TokenId {
        SPECIAL_COUNT + 2 * self.max_side
    }

    pub fn code_base(&self) -> TokenId {
        self.text_base() + self.text_size
    }

    pub fn classify(&self, id: TokenId) -> Result<TokenRole, VocabError> {
        let total = self.total();
        if id >= total {
            return Err(VocabError::IdOutOfRange { id, total });
        }
        let role = match id {
            PAD => TokenRole::Pad,
            BOS => TokenRole::Bos,
            EOS => TokenRole::Eos,
            SOI => TokenRole::Soi,
            EOI => TokenRole::Eoi,
            EOL => TokenRole::Eol,
            USER_MARK => TokenRole::UserMark,
            ASSISTANT_MARK => TokenRole::AssistantMark,
            END_OF_TURN => TokenRole::EndOfTurn,
            _ if id < self.width_base() => TokenRole::HeightInd(id - self.height_base() + 1),
            _ if id < self.text_base() => TokenRole::WidthInd(id - self.width_base() + 1),
            _ if id < self.code_base() => TokenRole::Text(id - self.text_base()),
            _ => TokenRole::ImageCode(id - self.code_base()),
        };
        Ok(role)
    }

    pub fn indicator_token(&self, axis: Axis, value: u32) -> Result<TokenId, VocabError> {
        if value == 0 || value > self.max_side {
            return Err(VocabError::IndicatorOutOfRange {
                axis,
                value,
                max_side: self.max_side,
            });
        }
        let base = match axis {
            Axis::Height => self.height_base(),
            Axis::Width => self.width_base(),
        };
        Ok(base + value - 1)
    }

    pub fn text_token(&self, index: u32) -> Result<TokenId, VocabError> {
        if index >= self.text_size {
            return Err(VocabError::TextOutOfRange(index));
        }
        Ok(self.text_base() + index)
    }

    pub fn code_token(&self, code: u32) -> Result<TokenId, VocabError> {
        if code >= self.codebook_size {
            return Err(VocabError::CodeOutOfRange(code));
        }
        Ok(self.code_base() + code)
    }

    /// Image code index carried by `id`, if it is an image-code token.
    pub fn code_of(&self, id: TokenId) -> Option<u32> {
        (id >= self.code_base() && id < self.total()).then(|| id - self.code_base())
    }

    /// Byte-level text tokenization. Bytes beyond `text_size` are folded
    /// modulo `text_size`.
    pub fn encode_text(&self, text: &str) -> Vec<TokenId> {
        text.bytes()
            .map(|b| self.text_base() + (b as u32) % self.text_size)
            .collect()
    }

    /// Inverse of [`encode_text`](Self::encode_text) for the default
    /// 256-entry byte table; non-text ids are skipped.
    pub fn decode_text(&self, tokens: &[TokenId]) -> String {
        let bytes: Vec<u8> = tokens
            .iter()
            .filter_map(|&t| match self.classify(t) {
                Ok(TokenRole::Text(i)) => Some(i as u8),
                _ => None,
            })
            .collect();
        String::from_utf8_lossy(&bytes).into_owned()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest is always serializable")
    }

    pub fn from_toml(text: &str) -> Result<Self, VocabError> {
        let m: VocabManifest = toml::from_str(text).map_err(|e| VocabError::Parse(e.to_string()))?;
        if m.format_version != MANIFEST_FORMAT_VERSION {
            return Err(VocabError::UnsupportedVersion(m.format_version));
        }
        VocabManifest::new(m.text_size, m.codebook_size, m.max_side, m.patch_px)
    }

    /// Hex SHA-256 of the serialized manifest. Checkpoints record it so a
    /// model is never paired with a different id layout.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m() -> VocabManifest {
        VocabManifest::new(16, 8, 4, 8).unwrap()
    }

    #[test]
    fn layout_totals() {
        assert_eq!(m().total(), 41);
        let tiny = VocabManifest::new(1, 1, 1, 1).unwrap();
        assert_eq!(tiny.total(), 13);
        assert_eq!(tiny.classify(9).unwrap(), TokenRole::HeightInd(1));
        assert_eq!(tiny.classify(10).unwrap(), TokenRole::WidthInd(1));
        let inds = (0..tiny.total())
            .filter(|&id| matches!(tiny.classify(id).unwrap(), TokenRole::HeightInd(_)))
            .count();
        assert_eq!(inds, 1);
    }

    #[test]
    fn block_positions_by_enumeration() {
        let m = m();
        let ids_with = |pred: &dyn Fn(TokenRole) -> bool| -> Vec<u32> {
            (0..m.total()).filter(|&i| pred(m.classify(i).unwrap())).collect()
        };
        assert_eq!(ids_with(&|r| matches!(r, TokenRole::HeightInd(_))), (9..=12).collect::<Vec<_>>());
        assert_eq!(ids_with(&|r| matches!(r, TokenRole::WidthInd(_))), (13..=16).collect::<Vec<_>>());
        assert_eq!(ids_with(&|r| matches!(r, TokenRole::Text(_))), (17..=32).collect::<Vec<_>>());
        assert_eq!(ids_with(&|r| matches!(r, TokenRole::ImageCode(_))), (33..=40).collect::<Vec<_>>());
    }

    #[test]
    fn classify_examples() {
        let m = m();
        assert_eq!(m.classify(3).unwrap(), TokenRole::Soi);
        assert_eq!(m.classify(10).unwrap(), TokenRole::HeightInd(2));
        assert!(matches!(m.classify(41), Err(VocabError::IdOutOfRange { .. })));
    }

    #[test]
    fn indicator_examples() {
        let m = m();
        assert_eq!(m.indicator_token(Axis::Height, 2).unwrap(), 10);
        assert_eq!(m.indicator_token(Axis::Width, 3).unwrap(), 15);
        assert!(m.indicator_token(Axis::Height, 5).is_err());
        assert!(m.indicator_token(Axis::Width, 0).is_err());
    }

    #[test]
    fn zero_arguments_rejected() {
        assert!(VocabManifest::new(0, 8, 4, 8).is_err());
        assert!(VocabManifest::new(16, 0, 4, 8).is_err());
        assert!(VocabManifest::new(16, 8, 0, 8).is_err());
        assert!(VocabManifest::new(16, 8, 4, 0).is_err());
    }

    #[test]
    fn toml_round_trip_and_version_check() {
        let m = m();
        let text = m.to_toml();
        assert!(text.contains("format_version = 1"));
        assert_eq!(VocabManifest::from_toml(&text).unwrap(), m);
        let bad = text.replace("format_version = 1", "format_version = 9");
        assert_eq!(VocabManifest::from_toml(&bad), Err(VocabError::UnsupportedVersion(9)));
        assert_eq!(m.hash(), VocabManifest::new(16, 8, 4, 8).unwrap().hash());
        assert_ne!(m.hash(), VocabManifest::new(16, 9, 4, 8).unwrap().hash());
    }

    #[test]
    fn byte_text_round_trip() {
        let m = VocabManifest::new(256, 8, 4, 8).unwrap();
        let toks = m.encode_text("a cat");
        assert_eq!(toks.len(), 5);
        assert_eq!(m.decode_text(&toks), "a cat");
    }

    proptest! {
        #[test]
        fn partition_and_bijection(text in 1u32..300, codes in 1u32..300, side in 1u32..40) {
            let m = VocabManifest::new(text, codes, side, 8).unwrap();
            let mut counts = [0u32; 5];
            for id in 0..m.total() {
                match m.classify(id).unwrap() {
                    TokenRole::HeightInd(v) => {
                        counts[0] += 1;
                        prop_assert_eq!(m.indicator_token(Axis::Height, v).unwrap(), id);
                    }
                    TokenRole::WidthInd(v) => {
                        counts[1] += 1;
                        prop_assert_eq!(m.indicator_token(Axis::Width, v).unwrap(), id);
                    }
                    TokenRole::Text(i) => {
                        counts[2] += 1;
                        prop_assert_eq!(m.text_token(i).unwrap(), id);
                    }
                    TokenRole::ImageCode(c) => {
                        counts[3] += 1;
                        prop_assert_eq!(m.code_token(c).unwrap(), id);
                        prop_assert_eq!(m.code_of(id), Some(c));
                    }
                    _ => counts[4] += 1,
                }
            }
            prop_assert_eq!(counts, [side, side, text, codes, 9]);
            prop_assert_eq!(counts.iter().sum::<u32>(), m.total());
            prop_assert!(m.classify(m.total()).is_err());
        }
    }
}
