//! Segmentation that separates anatomy from appearance.
//!
//! Two encoders split an image into anatomical and domain features. A
//! segmentor sees only the anatomical features, a generator rebuilds images
//! from any anatomy/domain pairing, and a Donsker–Varadhan estimator measures
//! (and, through the encoders, suppresses) the mutual information between the
//! two feature sets.

pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod imgproc;
pub mod losses;
pub mod mine;
pub mod networks;
pub mod nn;
pub mod seed;
pub mod synth;
pub mod trainer;
pub mod transforms;

pub use data::{load_dataset, save_dataset, Dataset, Image, Mask, Sample};
pub use error::{Error, Result};
pub use networks::{Component, FeatureMap, FeatureRole, ModelBundle, NetworkConfig};
