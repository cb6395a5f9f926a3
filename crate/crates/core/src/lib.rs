//! Hierarchical object-and-part recognition at desk scale.
//!
//! The crate is organized around the data flow of a query-based two-level
//! detector: geometric primitives ([`geometry`]), the hierarchical annotation
//! schema ([`dataset`]), procedures that manufacture object/part
//! correspondences from flat sources ([`unify`]), a synthetic scene generator
//! with exact ground truth ([`synthdata`]), the toy network itself ([`model`]),
//! decoupled matching and the training objective ([`matchloss`]), hierarchical
//! metrics ([`evaluation`]), and the training/CLI harness ([`train`], [`viz`]).

pub mod autograd;
pub mod dataset;
pub mod evaluation;
pub mod geometry;
pub mod matchloss;
pub mod model;
pub mod synthdata;
pub mod train;
pub mod unify;
pub mod viz;
