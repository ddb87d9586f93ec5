//! Topic modeling of web pages linked from tweets.
//!
//! The pipeline follows URLs found in tweets, extracts the main text of the
//! linked pages, fits a hierarchical Dirichlet process topic model to each
//! overlapping time epoch and tracks how topics are born, die, split and
//! merge between epochs. Topics flow back to tweets through the pages they
//! link to.

pub mod corpus;
pub mod evolve;
pub mod extract;
pub mod fetch;
pub mod hdp;
pub mod ingest;
pub mod synth;
