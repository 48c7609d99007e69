//! Executable diagnostics: near-zero geometry of readout maps, positional
//! information, simultaneous suppression, dot-product variance, growth of
//! normalized coefficients, and combination-class labeling.

mod geometry;
mod growth;
mod variance;

pub use geometry::{
    combination_class, membership_check, near_zero_fraction, readout_near_zero_measure,
    suppressing_query, zero_count_profile, zero_count_profile_with_states, ClassLabel, MeasureReport,
    NearZeroReport, ZeroCountProfile, RANK_TOLERANCE,
};
pub use growth::{normalized_growth_probe, positional_distinguishability, GrowthProbe};
pub use variance::{dot_product_variance, VarianceReport};
