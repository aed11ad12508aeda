//! Retinal fundus image registration: known-operator preprocessing,
//! landmark-patch observations, a trainable displacement regressor, and
//! least-squares transform fitting with TRE-based evaluation.

pub mod augment;
pub mod cli;
pub mod core;
pub mod error;
pub mod imageops;
pub mod io_fire;
pub mod model;
pub mod observation;
pub mod registration;

pub use crate::core::{Affine2D, Category, GrayImage, ImageData, ImagePair, LandmarkSet, Point, RgbImage};
pub use crate::error::{Error, Result};
