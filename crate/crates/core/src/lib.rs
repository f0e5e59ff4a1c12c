pub mod cli;
pub mod diffcore;
pub mod error;
pub mod field;
pub mod fusion;
pub mod imaging;
pub mod metrics;
pub mod renderer;
pub mod trainer;

pub use error::{Error, Result};

// Book chapters are compiled as doctests so the guide cannot drift from the API.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/intro.md")]
    mod intro {}
    #[doc = include_str!("../../../book/src/rendering.md")]
    mod rendering {}
    #[doc = include_str!("../../../book/src/lighting.md")]
    mod lighting {}
    #[doc = include_str!("../../../book/src/fusion.md")]
    mod fusion {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/metrics.md")]
    mod metrics {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
}
