//! Multi-view volumetric classification of aerial scenes.
//!
//! The pipeline reconstructs depth maps from posed grayscale views by
//! plane-sweep stereo, classifies every depth pixel as water or land with a
//! small 3D convolutional network over multi-view sub-volumes, fuses the
//! per-view probabilities into one 2D mask over the ground plane, and
//! replaces water regions by a planar level estimate smoothed with a
//! harmonic fill. A deterministic synthetic scene generator stands in for
//! real imagery so every stage can be verified end to end.
//!
//! Module map:
//!
//! - [`raster`] — generic 2D grids and grayscale images
//! - [`io`] — PGM/PFM raster files and the binary dataset/model formats
//! - [`tensor`] — dense tensors, layer ops, reverse-mode gradients, momentum
//! - [`camera`] — pinhole cameras and the multi-view voxel volume
//! - [`scene`] — synthetic terrain, water, rendering, label polygons
//! - [`sweep`] — photoconsistency cost volumes and graph-cut depth maps
//! - [`samples`] — sub-volume extraction, normalization, dataset assembly
//! - [`net`] — the classification network and the correspondence experiments
//! - [`fusion`] — Bayes probability fusion into a 2D mask
//! - [`water`] — water level estimation and harmonic surface filling

pub mod camera;
pub mod fusion;
pub mod geom;
pub mod io;
pub mod net;
pub mod raster;
pub mod samples;
pub mod scene;
pub mod sweep;
pub mod tensor;
pub mod testkit;
pub mod water;
