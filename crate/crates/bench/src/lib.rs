//! Shared fixtures for the benchmarks.

use hal_density::basis::thin_knots;
use hal_density::dgp::{DgpKind, DgpSpec};
use hal_density::{BasisSpec, DataSummary, LogSplineModel, QuadratureGrid};

/// A truncated-normal sample with a fixed seed.
pub fn sample(n: usize) -> Vec<f64> {
    DgpSpec::new(DgpKind::TruncatedNormal).sample(n, 2024)
}

/// Model and sufficient statistics for a data-adaptive basis of the given
/// order, thinned to at most `max_knots` knots.
pub fn problem(n: usize, order: usize, max_knots: usize) -> (LogSplineModel, DataSummary) {
    let data = sample(n);
    let mut spec = BasisSpec::data_adaptive(order, &data).expect("valid sample");
    if spec.knots().len() > max_knots {
        spec = spec.with_knots(thin_knots(spec.knots(), max_knots)).expect("thinned knots");
    }
    let summary = DataSummary::new(&spec, &data).expect("data in support");
    (LogSplineModel::new(spec, QuadratureGrid::for_sample_size(n)), summary)
}
