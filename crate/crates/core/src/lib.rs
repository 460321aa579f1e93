//! Point-cloud reconstruction from fused multi-view depth.
//!
//! The crate covers the whole pipeline: synthetic car scenes rendered into
//! corrupted depth views and fused into a coarse cloud ([`synth`]), a small
//! reverse-mode autodiff engine ([`autodiff`]), the DeepPoint-block generator
//! and two-stream discriminator ([`model`]), Chamfer / EMD / F-score
//! ([`metrics`]), adversarial training and evaluation ([`trainer`]), and
//! file formats plus run configuration ([`io`], [`config`], [`cli`]).

pub mod autodiff;
pub mod cli;
pub mod cloud;
pub mod config;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use cloud::{Aabb, Point, PointCloud, Viewpoint};
pub use error::{Error, Result};
pub use rng::Rng;
