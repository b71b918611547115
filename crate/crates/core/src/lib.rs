pub mod analysis;
pub mod decoding;
pub mod imagecodec;
pub mod model;
pub mod resolution;
pub mod training;
pub mod unirep;
pub mod vocab;
