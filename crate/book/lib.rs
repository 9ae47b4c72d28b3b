//! mdbook cannot compile listings against workspace crates, so every chapter
//! is pulled in here and `cargo test -p svs-book` runs them as doc-tests.

#[doc = include_str!("src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("src/scores.md")]
pub mod scores {}
#[doc = include_str!("src/corpus.md")]
pub mod corpus {}
#[doc = include_str!("src/model.md")]
pub mod model {}
#[doc = include_str!("src/training.md")]
pub mod training {}
#[doc = include_str!("src/evaluation.md")]
pub mod evaluation {}
#[doc = include_str!("src/cli.md")]
pub mod cli {}
