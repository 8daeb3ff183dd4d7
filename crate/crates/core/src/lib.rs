//! Multi-label lesion identification and weakly supervised localization.
//!
//! A convolutional embedding network is trained jointly with three losses:
//! per-class binary cross entropy on the global classifier, a triplet hinge
//! loss over perceptual-hash-mined examples, and a region verification loss
//! computed on features masked to the class activation region. Localization
//! comes from class activation maps built with the averaged weights of the
//! global and region classifiers.

pub mod cam;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod losses;
pub mod mining;
pub mod model;
pub mod phash;
pub mod train;

pub use error::{Error, Result};
