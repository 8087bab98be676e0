//! Structural and statistical observables computed from policies and metrics.

pub mod signals;
pub mod stats;
pub mod union_find;
pub mod web;
