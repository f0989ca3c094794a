//! Asymmetric multilayer perceptrons and the machinery to study them.
//!
//! This crate builds MLPs whose parameter-space symmetries have been removed,
//! either by masking a subset of weights to fixed random constants (`w_asym`)
//! or by a non-elementwise gated nonlinearity (`sigma_asym`). Around those
//! models it provides:
//!
//! - a small reverse-mode autodiff engine ([`autograd`]),
//! - deterministic dataset handling, including an IDX parser ([`data`]),
//! - seeded Adam training producing portable checkpoints ([`train`], [`checkpoint`]),
//! - linear interpolation, loss barriers, and monotonicity statistics ([`interp`]),
//! - permutation alignment of standard networks ([`rebasin`]),
//! - brute-force computation-graph automorphism search and numeric
//!   equivariance falsifiers ([`symmetry`]),
//! - a closed-form construction that represents a linear map exactly with
//!   masked layers ([`universal`]).

pub mod autograd;
pub mod checkpoint;
pub mod data;
pub mod interp;
pub mod nn;
pub mod rebasin;
pub mod symmetry;
pub mod train;
pub mod universal;
