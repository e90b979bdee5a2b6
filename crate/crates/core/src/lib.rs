//! Desk-scale pipeline for item-to-item note recommendation.
//!
//! Related note pairs are mined from click logs by weighted co-occurrence,
//! a small decoder-only language model learns to compress each note into a
//! single embedding token while generating its hashtags/categories, and the
//! resulting embeddings drive retrieval evaluation and a top-k query service.

pub mod corpus;
pub mod eval;
pub mod model;
pub mod pairs;
pub mod prompt;
pub mod serve;
pub mod store;
pub mod train;
