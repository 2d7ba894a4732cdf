//! Convolutional-sparse-coding pansharpening.
//!
//! The crate models a PAN image and an upsampled MS image as sums of
//! convolutions between filter banks and three families of feature maps
//! (common `C`, PAN-unique `U`, MS-unique `V`), and fuses them into an HRMS
//! estimate. It provides
//!
//! * the forward observation/synthesis model ([`model`]),
//! * a classical alternating proximal-gradient solver with ℓ1 priors ([`solver`]),
//! * an unfolded, trainable network with learned proximal operators
//!   ([`net`], [`autodiff`], [`train`]),
//! * reduced-resolution simulation and synthetic data ([`wald`], [`dataset`]),
//! * quality indexes with and without reference ([`metrics`]).

pub mod autodiff;
pub mod conv;
pub mod dataset;
pub mod error;
pub mod io;
pub mod metrics;
pub mod model;
pub mod net;
pub mod raster;
pub mod scalar;
pub mod solver;
pub mod train;
pub mod wald;

pub use conv::{conv2d_adjoint, conv2d_same, conv2d_weight_grad, FilterBank};
pub use error::{Error, Result};
pub use raster::{inner_product, FeatureStack, MultibandImage};
pub use scalar::{Precision, Scalar};
