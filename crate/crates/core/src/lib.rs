//! Conformal-factor-and-normal (CFAN) mesh features, parallel transport
//! convolution operators and a disentangling variational autoencoder for
//! meshes that share one triangulation.

pub mod container;
pub mod eval;
pub mod geodesic;
pub mod latent;
pub mod mesh;
pub mod model;
pub mod ptc;
pub mod sparse;
pub mod synth;
pub mod tensor;
pub mod util;

/// Code blocks of the guide in `book/`, compiled and run as doc-tests.
#[cfg(doctest)]
mod book {
    #[doc = include_str!("../../../book/src/introduction.md")]
    mod introduction {}
    #[doc = include_str!("../../../book/src/features.md")]
    mod features {}
    #[doc = include_str!("../../../book/src/hierarchy.md")]
    mod hierarchy {}
    #[doc = include_str!("../../../book/src/ptc.md")]
    mod ptc {}
    #[doc = include_str!("../../../book/src/autodiff.md")]
    mod autodiff {}
    #[doc = include_str!("../../../book/src/training.md")]
    mod training {}
    #[doc = include_str!("../../../book/src/latent.md")]
    mod latent {}
    #[doc = include_str!("../../../book/src/synthetic.md")]
    mod synthetic {}
    #[doc = include_str!("../../../book/src/cli.md")]
    mod cli {}
    #[doc = include_str!("../../../book/src/acceptance.md")]
    mod acceptance {}
}
