//! Evaluation metrics.
//!
//! With edges defined by `R_i = R_ij · R_j`, a solution is only determined up
//! to a common right factor: `R̂_i · S` satisfies every constraint that `R̂_i`
//! does. The pairwise and edge errors are invariant to that factor; the
//! absolute error removes it with a chordal alignment first.

use crate::envgraph::RotationEnvironment;
use crate::error::MetricsError;
use crate::rotmath::{
    geodesic_distance, matrix_to_quat, project_to_so3, quat_geodesic_distance, Mat3,
    RotationMatrix, UnitQuaternion,
};

/// Relative singular-value tolerance below which `align_gauge` reports a
/// degenerate alignment.
pub const ALIGNMENT_RANK_TOL: f64 = 1e-9;

/// Convergence threshold on the mean pairwise error, in degrees.
pub const CONVERGED_DEG: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ErrorStats {
    pub mean_deg: f64,
    pub median_deg: f64,
}

/// Metrics of one checkpoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRecord {
    pub step: u64,
    pub ape_mean_deg: Option<f64>,
    pub ape_median_deg: Option<f64>,
    pub rel_mean_deg: f64,
    pub rel_median_deg: f64,
    pub abs_mean_deg: Option<f64>,
    pub abs_median_deg: Option<f64>,
}

impl TraceRecord {
    /// Value of the convergence curve: the mean pairwise error, or the mean
    /// edge error when there is no ground truth.
    pub fn curve_value(&self) -> f64 {
        self.ape_mean_deg.unwrap_or(self.rel_mean_deg)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvergenceSummary {
    pub steps_to_5deg: Option<u64>,
    pub nauc: f64,
    pub final_ape_deg: f64,
}

/// Neumaier-compensated sum.
pub(crate) fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    let mut sum = 0.0f64;
    let mut comp = 0.0f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

/// Median, averaging the two middle values for even counts. NaN when empty.
pub fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    if values.len().is_multiple_of(2) {
        0.5 * (values[mid - 1] + values[mid])
    } else {
        values[mid]
    }
}

fn stats(mut values: Vec<f64>) -> ErrorStats {
    let mean = compensated_sum(values.iter().copied()) / values.len() as f64;
    ErrorStats {
        mean_deg: mean,
        median_deg: median(&mut values),
    }
}

/// Angular error between estimated and true relative rotations, over every
/// unordered pair `i < j`.
pub fn avg_pairwise_error(
    estimates: &[RotationMatrix],
    ground_truth: &[RotationMatrix],
) -> ErrorStats {
    assert_eq!(estimates.len(), ground_truth.len());
    // d(R̂_i R̂_jᵀ, R_i R_jᵀ) is the angle between a_i and a_j for
    // a_i = quat(R̂_iᵀ R_i).
    let a: Vec<UnitQuaternion> = estimates
        .iter()
        .zip(ground_truth)
        .map(|(e, g)| matrix_to_quat(&(e.transpose() * *g)))
        .collect();
    let n = a.len();
    let mut errors = Vec::with_capacity(n * n.saturating_sub(1) / 2);
    for i in 0..n {
        for j in i + 1..n {
            errors.push(quat_geodesic_distance(&a[i], &a[j]).to_degrees());
        }
    }
    stats(errors)
}

/// Angular residual `d(R̂_i, R_ij · R̂_j)` over every stored edge.
pub fn relative_edge_error(estimates: &[RotationMatrix], env: &RotationEnvironment) -> ErrorStats {
    let q: Vec<UnitQuaternion> = estimates.iter().map(matrix_to_quat).collect();
    let errors = env
        .edges()
        .iter()
        .map(|e| quat_geodesic_distance(&q[e.i], &(e.rel * q[e.j])).to_degrees())
        .collect();
    stats(errors)
}

/// The rotation `S` minimizing `Σ |R_i - R̂_i·S|²_F`, i.e. the special
/// orthogonal polar factor of `Σ R̂_iᵀ R_i`.
pub fn align_gauge(
    estimates: &[RotationMatrix],
    ground_truth: &[RotationMatrix],
) -> Result<RotationMatrix, MetricsError> {
    let acc = estimates
        .iter()
        .zip(ground_truth)
        .fold(Mat3::zeros(), |acc, (e, g)| acc + e.0.transpose() * g.0);
    project_to_so3(&acc, ALIGNMENT_RANK_TOL).ok_or(MetricsError::DegenerateAlignment)
}

/// Per-node error `d(R̂_i·S, R_i)` after gauge alignment. When the alignment
/// is degenerate, `S = I` is used and a warning is logged.
pub fn absolute_error(estimates: &[RotationMatrix], ground_truth: &[RotationMatrix]) -> ErrorStats {
    let s = align_gauge(estimates, ground_truth).unwrap_or_else(|e| {
        log::warn!("{e}; falling back to identity alignment");
        RotationMatrix::identity()
    });
    absolute_error_with(estimates, ground_truth, &s)
}

/// Per-node error `d(R̂_i·S, R_i)` for a given alignment.
pub fn absolute_error_with(
    estimates: &[RotationMatrix],
    ground_truth: &[RotationMatrix],
    s: &RotationMatrix,
) -> ErrorStats {
    let errors = estimates
        .iter()
        .zip(ground_truth)
        .map(|(e, g)| geodesic_distance(&(e * s), g).to_degrees())
        .collect();
    stats(errors)
}

/// All metrics for a set of estimates at `step`.
pub fn snapshot(step: u64, estimates: &[RotationMatrix], env: &RotationEnvironment) -> TraceRecord {
    let rel = relative_edge_error(estimates, env);
    let (ape, abs) = match env.ground_truth_matrices() {
        Some(gt) => (
            Some(avg_pairwise_error(estimates, gt)),
            Some(absolute_error(estimates, gt)),
        ),
        None => (None, None),
    };
    TraceRecord {
        step,
        ape_mean_deg: ape.map(|s| s.mean_deg),
        ape_median_deg: ape.map(|s| s.median_deg),
        rel_mean_deg: rel.mean_deg,
        rel_median_deg: rel.median_deg,
        abs_mean_deg: abs.map(|s| s.mean_deg),
        abs_median_deg: abs.map(|s| s.median_deg),
    }
}

/// Trapezoidal area under the convergence curve with steps rescaled to
/// `[0, 1]` by the last checkpoint's step.
pub fn nauc(trace: &[TraceRecord]) -> f64 {
    let Some(last) = trace.last() else {
        return 0.0;
    };
    if trace.len() < 2 || last.step == 0 {
        return trace[0].curve_value();
    }
    // Integrating the deviation from the first value keeps constant curves
    // exact regardless of how the step fractions round.
    let base = trace[0].curve_value();
    let scale = last.step as f64;
    base + compensated_sum(trace.windows(2).map(|w| {
        let dx = (w[1].step - w[0].step) as f64 / scale;
        dx * (0.5 * (w[0].curve_value() + w[1].curve_value()) - base)
    }))
}

/// Step of the first checkpoint whose curve value is below `threshold_deg`.
pub fn steps_to_threshold(trace: &[TraceRecord], threshold_deg: f64) -> Option<u64> {
    trace
        .iter()
        .find(|r| r.curve_value() < threshold_deg)
        .map(|r| r.step)
}

pub fn summarize(trace: &[TraceRecord]) -> ConvergenceSummary {
    ConvergenceSummary {
        steps_to_5deg: steps_to_threshold(trace, CONVERGED_DEG),
        nauc: nauc(trace),
        final_ape_deg: trace.last().map_or(f64::NAN, TraceRecord::curve_value),
    }
}
