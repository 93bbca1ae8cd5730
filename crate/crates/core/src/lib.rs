//! Regression of mixed continuous, count and binary responses through a
//! latent multivariate normal linear model.

// `!(x > 0.0)` also rejects NaN
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod constraints;
pub mod data;
pub mod error;
pub mod families;
pub mod fitter;
pub mod inference;
pub mod io;
pub mod latent;
pub mod moments;
pub mod simgen;
mod sum;
pub mod worklik;
