//! Budgeted human-in-the-loop clustering for unsupervised re-identification.
//!
//! Samples are clustered with DBSCAN over k-reciprocal Jaccard distances.
//! Each epoch a small budget of pair questions is spent on the pairs most
//! likely to be wrong (a member far from its cluster, two clusters close in
//! 2-Wasserstein distance), while a diversity term spreads questions over
//! clusters. Verdicts split or merge clusters, and a projection is trained
//! against a cluster-level memory bank on the resulting pseudo-labels.

// `!(x > 0.0)` is used deliberately so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod annotation;
pub mod clustering;
pub mod dataset;
pub mod engine;
pub mod evaluation;
pub mod selection;
pub mod trainer;
