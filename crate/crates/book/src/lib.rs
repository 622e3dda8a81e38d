//! mdbook cannot test listings that depend on workspace crates, so every
//! chapter is included here and `cargo test --doc` runs its code blocks.

#[doc = include_str!("../../../book/src/introduction.md")]
pub mod introduction {}

#[doc = include_str!("../../../book/src/quickstart.md")]
pub mod quickstart {}

#[doc = include_str!("../../../book/src/data.md")]
pub mod data {}

#[doc = include_str!("../../../book/src/autodiff.md")]
pub mod autodiff {}

#[doc = include_str!("../../../book/src/local.md")]
pub mod local {}

#[doc = include_str!("../../../book/src/federation.md")]
pub mod federation {}

#[doc = include_str!("../../../book/src/evaluation.md")]
pub mod evaluation {}

#[doc = include_str!("../../../book/src/reproducibility.md")]
pub mod reproducibility {}
