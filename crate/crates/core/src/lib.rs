//! Two-stage coarse-to-fine volumetric segmentation.
//!
//! A dilated 3D encoder-decoder (`Net1`) localises the foreground on a coarse
//! grid; a 3D-to-2D slice classifier (`Net2`) then labels every axial slice of
//! the native-resolution volume from a K-slice neighbourhood. Training follows
//! a four-step schedule over soft-Dice objectives.

pub mod config;
pub mod error;
pub mod inference;
pub mod losses;
pub mod metrics;
pub mod networks;
pub mod nn;
pub mod phantom;
pub mod sampler;
pub mod trainer;
pub mod volumes;

pub use error::{Error, Result};
