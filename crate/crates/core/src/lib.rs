//! Differentiable rasterization of opaque, textured triangle soups.
//!
//! A scene is an unstructured set of triangles. Each triangle carries a
//! multi-resolution barycentric feature lattice holding seven colour
//! features and one opacity channel. Rendering is a plain depth test with
//! binary opacity; training replaces the fixed 0.5 opacity threshold with
//! per-fragment uniform thresholds, which turns the visible fragment into a
//! random variable with a closed-form distribution and gives unbiased
//! likelihood-ratio gradients for opacity. Vertex motion is driven by
//! edge gradients evaluated on every adjacent pixel pair whose winners
//! differ.
//!
//! Module map:
//!
//! * [`scene`]: triangles, cameras, datasets and pinhole projection.
//! * [`raster`]: fragment generation and deterministic depth-tested rendering.
//! * [`texture`]: per-triangle lattices, cross-level accumulation, atlas packing.
//! * [`shading`]: SH view encoding and the shared deferred-shading MLP.
//! * [`grad`]: stochastic opacity masking and all gradient paths.
//! * [`trainer`]: losses, optimizers, initialization, adaptive control, the loop.
//! * [`cli`]: command implementations, scene persistence, synthetic data.

pub mod cli;
pub mod dual;
pub mod grad;
pub mod image_buf;
pub mod metrics;
pub mod par;
pub mod raster;
pub mod rng;
pub mod scene;
pub mod shading;
pub mod texture;
pub mod trainer;

pub use image_buf::Image;
pub use raster::{Fragment, PixelFragmentBuffer};
pub use scene::{Camera, Dataset, Triangle, TriangleSoup, Vec3};
pub use shading::ShadingNet;
pub use texture::TextureGridSet;

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
