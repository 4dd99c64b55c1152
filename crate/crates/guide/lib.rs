// mdbook cannot run snippets that depend on external crates, so each
// chapter is included here as a module doc and `cargo test --doc` runs it.

#[doc = include_str!("../../book/src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("../../book/src/quantization.md")]
pub mod quantization {}
#[doc = include_str!("../../book/src/packing.md")]
pub mod packing {}
#[doc = include_str!("../../book/src/model.md")]
pub mod model {}
#[doc = include_str!("../../book/src/diffusion.md")]
pub mod diffusion {}
#[doc = include_str!("../../book/src/training.md")]
pub mod training {}
#[doc = include_str!("../../book/src/diagnostics.md")]
pub mod diagnostics {}
#[doc = include_str!("../../book/src/cli.md")]
pub mod cli {}
