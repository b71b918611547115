//! The guide in `book/` cannot run its snippets against this workspace on its
//! own, so each chapter is pulled in here as module docs and checked by
//! `cargo test --doc`. One module per chapter keeps failures traceable.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../../book/src/vocabulary.md")]
pub mod vocabulary {}
#[doc = include_str!("../../../book/src/image-spans.md")]
pub mod image_spans {}
#[doc = include_str!("../../../book/src/codec.md")]
pub mod codec {}
#[doc = include_str!("../../../book/src/buckets.md")]
pub mod buckets {}
#[doc = include_str!("../../../book/src/model.md")]
pub mod model {}
#[doc = include_str!("../../../book/src/dialogs.md")]
pub mod dialogs {}
#[doc = include_str!("../../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../../book/src/decoding.md")]
pub mod decoding {}
#[doc = include_str!("../../../book/src/reports.md")]
pub mod reports {}
#[doc = include_str!("../../../book/src/cli.md")]
pub mod cli {}
