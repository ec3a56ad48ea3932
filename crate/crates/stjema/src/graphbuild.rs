//! Dynamic graph construction: sliding windows over the scan, Pearson
//! correlation per window, and density thresholding into binary
//! adjacency matrices.
//!
//! The scan is first z-scored per ROI over its full length (Pearson is
//! invariant to this, but the window summaries fed to the temporal
//! encoder are not, and raw BOLD amplitudes are arbitrary). Windows of
//! length `Γ` advance by stride `S`; window `t` (1-based) covers samples
//! `[(t−1)·S, (t−1)·S + Γ)` and the window count is
//! `T_G = ⌊(T_max − Γ)/S⌋`, discarding any tail samples the formula
//! leaves unused.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use thiserror::Error;

use crate::signal::RoiTimeSeries;

/// Variance floor used to detect degenerate (constant) rows.
const DEGENERATE_VAR: f64 = 1e-24;
/// Regularizer added to both variance terms when a row is degenerate;
/// the covariance with a constant row is exactly zero, so affected
/// correlations collapse to 0 instead of NaN.
const VAR_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum GraphBuildError {
    #[error("window length {gamma} exceeds scan length {t_max}")]
    WindowTooLong { gamma: usize, t_max: usize },
    #[error("stride must be at least 1")]
    ZeroStride,
    #[error("scan too short: ⌊({t_max} − {gamma})/{stride}⌋ = 0 windows")]
    NoWindows { t_max: usize, gamma: usize, stride: usize },
    #[error("window length must be at least 2, got {0}")]
    WindowTooShort(usize),
}

/// Pearson correlation matrix of one window.
#[derive(Clone, Debug)]
pub struct FcMatrix {
    /// `N×N`, symmetric, unit diagonal, entries in [−1, 1].
    pub values: Array2<f64>,
    /// 1-based window index within the scan.
    pub timestep: usize,
}

/// Static description of a dynamic graph's construction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphMeta {
    pub n_rois: usize,
    pub t_g: usize,
    pub gamma: usize,
    pub stride: usize,
    pub density: f64,
}

/// A scan converted to graph form: one binary adjacency and one
/// per-ROI window-mean summary per window.
#[derive(Clone, Debug)]
pub struct DynamicGraph {
    pub subject_id: String,
    /// `T_G` matrices, each `N×N` with {0,1} entries, symmetric.
    pub adjacency: Vec<Array2<f64>>,
    /// `T_G` vectors of length `N`: per-ROI mean of the z-scored signal
    /// within the window (input to the temporal encoder).
    pub window_summary: Vec<Array1<f64>>,
    pub meta: GraphMeta,
}

/// Half-open sample ranges of every window: `T_G = ⌊(T_max − Γ)/S⌋`
/// windows, window `t` (1-based) covering `[(t−1)·S, (t−1)·S + Γ)`.
pub fn window_bounds(
    t_max: usize,
    gamma: usize,
    stride: usize,
) -> Result<Vec<(usize, usize)>, GraphBuildError> {
    if stride == 0 {
        return Err(GraphBuildError::ZeroStride);
    }
    if gamma < 2 {
        return Err(GraphBuildError::WindowTooShort(gamma));
    }
    if gamma > t_max {
        return Err(GraphBuildError::WindowTooLong { gamma, t_max });
    }
    let t_g = (t_max - gamma) / stride;
    if t_g == 0 {
        return Err(GraphBuildError::NoWindows { t_max, gamma, stride });
    }
    Ok((0..t_g).map(|t| (t * stride, t * stride + gamma)).collect())
}

/// Pearson correlation of the rows of an `N×Γ` window:
/// `R_ij = Cov(row_i, row_j) / (√Var_i · √Var_j)`, with the diagonal
/// pinned to 1, exact symmetry, and entries clamped to [−1, 1].
/// Degenerate (constant) rows take the regularized path and correlate
/// to 0 with everything.
pub fn pearson_fc(window: ArrayView2<'_, f64>, timestep: usize) -> FcMatrix {
    let n = window.nrows();
    let g = window.ncols() as f64;
    // Center each row.
    let mut centered = window.to_owned();
    let mut var = vec![0.0; n];
    for (i, mut row) in centered.axis_iter_mut(Axis(0)).enumerate() {
        let mean = row.sum() / g;
        row.mapv_inplace(|v| v - mean);
        var[i] = row.iter().map(|v| v * v).sum::<f64>() / g;
    }
    let degenerate: Vec<bool> = var.iter().map(|v| *v <= DEGENERATE_VAR).collect();

    let mut values = Array2::zeros((n, n));
    for i in 0..n {
        values[(i, i)] = 1.0;
        for j in (i + 1)..n {
            let cov = centered
                .row(i)
                .iter()
                .zip(centered.row(j).iter())
                .map(|(a, b)| a * b)
                .sum::<f64>()
                / g;
            let r = if degenerate[i] || degenerate[j] {
                cov / ((var[i] + VAR_EPS).sqrt() * (var[j] + VAR_EPS).sqrt())
            } else {
                cov / (var[i].sqrt() * var[j].sqrt())
            };
            let r = r.clamp(-1.0, 1.0);
            values[(i, j)] = r;
            values[(j, i)] = r;
        }
    }
    FcMatrix { values, timestep }
}

/// Binarize a correlation matrix at a target density: with
/// `v` = the `⌈density·N²⌉`-th largest of all `N²` entries (diagonal
/// included), `A_ij = 1 ⇔ R_ij ≥ v`. Ties at the cut are kept, so the
/// realized ones-count may exceed the nominal count by the tie group;
/// applied to a symmetric input the output is symmetric.
pub fn threshold_adjacency(fc: &FcMatrix, density: f64) -> Array2<f64> {
    assert!(density > 0.0 && density < 1.0, "density must lie in (0,1), got {density}");
    let n = fc.values.nrows();
    let mut sorted: Vec<f64> = fc.values.iter().copied().collect();
    sorted.sort_unstable_by(|a, b| b.total_cmp(a));
    let k = (density * (n * n) as f64).ceil() as usize;
    let cut = sorted[k.clamp(1, n * n) - 1];
    fc.values.mapv(|v| if v >= cut { 1.0 } else { 0.0 })
}

/// Z-score each row over the full scan. Rows with (near-)zero variance
/// become all zeros rather than NaN.
fn zscore_rows(data: &Array2<f64>) -> Array2<f64> {
    let t = data.ncols() as f64;
    let mut out = data.clone();
    for mut row in out.axis_iter_mut(Axis(0)) {
        let mean = row.sum() / t;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / t;
        if var > DEGENERATE_VAR {
            let inv = 1.0 / var.sqrt();
            row.mapv_inplace(|v| v * inv);
        } else {
            row.fill(0.0);
        }
    }
    out
}

/// Full pipeline for one subject: z-score per ROI, slide windows,
/// correlate, threshold. Also produces the per-window summaries `u(t)`
/// (per-ROI window mean of the z-scored signal).
pub fn build_dynamic_graph(
    series: &RoiTimeSeries,
    gamma: usize,
    stride: usize,
    density: f64,
) -> Result<DynamicGraph, GraphBuildError> {
    let bounds = window_bounds(series.t_max(), gamma, stride)?;
    let z = zscore_rows(&series.data);
    let n = series.n_rois();

    let mut adjacency = Vec::with_capacity(bounds.len());
    let mut window_summary = Vec::with_capacity(bounds.len());
    for (t, &(lo, hi)) in bounds.iter().enumerate() {
        let window = z.slice(ndarray::s![.., lo..hi]);
        let fc = pearson_fc(window, t + 1);
        debug_assert!(fc.values.iter().all(|v| v.is_finite()));
        adjacency.push(threshold_adjacency(&fc, density));
        let u = window.mean_axis(Axis(1)).expect("window is nonempty");
        window_summary.push(u);
    }

    let t_g = (series.t_max() - gamma) / stride;
    assert_eq!(adjacency.len(), t_g, "window count must match the floor formula");
    Ok(DynamicGraph {
        subject_id: series.subject_id.clone(),
        adjacency,
        window_summary,
        meta: GraphMeta { n_rois: n, t_g, gamma, stride, density },
    })
}

/// Fraction of ones in a binary matrix.
pub fn ones_fraction(a: &Array2<f64>) -> f64 {
    a.iter().filter(|v| **v == 1.0).count() as f64 / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn window_bounds_match_floor_formula() {
        let w = window_bounds(400, 50, 16).unwrap();
        assert_eq!(w.len(), 21);
        assert_eq!(w[0], (0, 50));
        assert_eq!(*w.last().unwrap(), (320, 370));

        assert_eq!(window_bounds(120, 16, 3).unwrap().len(), 34);

        assert!(matches!(
            window_bounds(50, 50, 16),
            Err(GraphBuildError::NoWindows { .. })
        ));
        assert!(matches!(
            window_bounds(40, 50, 16),
            Err(GraphBuildError::WindowTooLong { .. })
        ));
        assert!(matches!(window_bounds(400, 50, 0), Err(GraphBuildError::ZeroStride)));
    }

    #[test]
    fn pearson_known_values() {
        let w = array![[1.0, 2.0, 3.0, 4.0], [2.0, 4.0, 6.0, 8.0]];
        let fc = pearson_fc(w.view(), 1);
        assert_abs_diff_eq!(fc.values[(0, 1)], 1.0, epsilon = 1e-12);

        let w = array![[1.0, 2.0, 3.0, 4.0], [4.0, 3.0, 2.0, 1.0]];
        let fc = pearson_fc(w.view(), 1);
        assert_abs_diff_eq!(fc.values[(0, 1)], -1.0, epsilon = 1e-12);

        // cov = 4/4, var = 5/4 each → r = 1 / √(5/4·5/4)·… = 0.8
        let w = array![[1.0, 2.0, 3.0, 4.0], [1.0, 3.0, 2.0, 4.0]];
        let fc = pearson_fc(w.view(), 1);
        assert_abs_diff_eq!(fc.values[(0, 1)], 0.8, epsilon = 1e-12);
    }

    #[test]
    fn pearson_constant_row_falls_back_to_zero() {
        let w = array![[5.0, 5.0, 5.0, 5.0], [1.0, 3.0, 2.0, 4.0], [2.0, 1.0, 4.0, 3.0]];
        let fc = pearson_fc(w.view(), 1);
        assert!(fc.values.iter().all(|v| v.is_finite()));
        assert_abs_diff_eq!(fc.values[(0, 1)], 0.0);
        assert_abs_diff_eq!(fc.values[(0, 2)], 0.0);
        assert_abs_diff_eq!(fc.values[(0, 0)], 1.0);
        // Valid pair untouched by the fallback.
        let sub = array![[1.0, 3.0, 2.0, 4.0], [2.0, 1.0, 4.0, 3.0]];
        let direct = pearson_fc(sub.view(), 1);
        assert_abs_diff_eq!(fc.values[(1, 2)], direct.values[(0, 1)], epsilon = 1e-15);
    }

    #[test]
    fn threshold_keeps_diagonal_when_offdiagonal_is_small() {
        // N=3: ⌈0.3·9⌉ = 3 largest entries are the three diagonal 1s.
        let fc = FcMatrix {
            values: array![[1.0, 0.2, -0.1], [0.2, 1.0, 0.5], [-0.1, 0.5, 1.0]],
            timestep: 1,
        };
        let a = threshold_adjacency(&fc, 0.3);
        assert_eq!(a, Array2::<f64>::eye(3));
    }

    #[test]
    fn threshold_density_near_one_keeps_everything() {
        let fc = FcMatrix {
            values: array![[1.0, 0.2], [0.2, 1.0]],
            timestep: 1,
        };
        let a = threshold_adjacency(&fc, 0.999);
        assert!(a.iter().all(|v| *v == 1.0));
    }

    #[test]
    fn threshold_ones_fraction_and_symmetry_on_random_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for trial in 0..20 {
            let n = 50;
            let mut values = Array2::zeros((n, n));
            for i in 0..n {
                values[(i, i)] = 1.0;
                for j in (i + 1)..n {
                    let v: f64 = rng.random_range(-1.0..1.0);
                    values[(i, j)] = v;
                    values[(j, i)] = v;
                }
            }
            let fc = FcMatrix { values, timestep: trial };
            let a = threshold_adjacency(&fc, 0.3);
            assert_eq!(a, a.t().to_owned(), "adjacency must stay symmetric");
            let frac = ones_fraction(&a);
            // 750 nominal; the cut value's symmetric twin may add one.
            assert!(
                (0.30..=0.30 + 2.0 / (n * n) as f64).contains(&frac),
                "fraction {frac} out of tie slack"
            );
            // Idempotence of the cut: recomputing on the same input
            // reproduces the same pattern.
            let b = threshold_adjacency(&fc, 0.3);
            assert_eq!(a, b);
        }
    }

    #[test]
    fn build_dynamic_graph_end_to_end() {
        let cfg = crate::signal::SynthConfig {
            n_subjects: 1,
            n_rois: 16,
            t_max: 400,
            n_states: 3,
            switch_rates: vec![0.05, 0.45],
            ar_coeff: 0.3,
            noise_sd: 0.1,
            seed: 5,
            ..crate::signal::SynthConfig::default()
        };
        let subject = &crate::signal::synth_dataset(&cfg).unwrap()[0];
        let g = build_dynamic_graph(subject, 50, 16, 0.3).unwrap();
        assert_eq!(g.meta.t_g, 21);
        assert_eq!(g.adjacency.len(), 21);
        assert_eq!(g.window_summary.len(), 21);
        for a in &g.adjacency {
            assert_eq!(a, &a.t().to_owned());
            assert!(a.iter().all(|v| *v == 0.0 || *v == 1.0));
            let frac = ones_fraction(a);
            assert!(frac >= 0.3 && frac < 0.32, "density {frac}");
        }
        for u in &g.window_summary {
            assert_eq!(u.len(), 16);
            assert!(u.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn global_scaling_leaves_adjacency_unchanged() {
        let cfg = crate::signal::SynthConfig {
            n_subjects: 1,
            n_rois: 8,
            t_max: 120,
            n_states: 2,
            switch_rates: vec![0.1],
            ar_coeff: 0.2,
            noise_sd: 0.2,
            seed: 9,
            ..crate::signal::SynthConfig::default()
        };
        let subject = &crate::signal::synth_dataset(&cfg).unwrap()[0];
        let mut scaled = subject.clone();
        scaled.data.mapv_inplace(|v| 3.0 * v);
        let a = build_dynamic_graph(subject, 16, 3, 0.3).unwrap();
        let b = build_dynamic_graph(&scaled, 16, 3, 0.3).unwrap();
        assert_eq!(a.adjacency.len(), 34);
        for (x, y) in a.adjacency.iter().zip(b.adjacency.iter()) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn constant_roi_produces_no_nan() {
        let mut data = Array2::zeros((4, 60));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for mut row in data.axis_iter_mut(ndarray::Axis(0)) {
            for v in row.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
        }
        data.row_mut(2).fill(7.5); // constant ROI
        let series = crate::signal::RoiTimeSeries {
            subject_id: "c".into(),
            data,
            labels: Default::default(),
        };
        let g = build_dynamic_graph(&series, 16, 3, 0.3).unwrap();
        for a in &g.adjacency {
            assert!(a.iter().all(|v| v.is_finite()));
        }
        for u in &g.window_summary {
            assert!(u.iter().all(|v| v.is_finite()));
            assert_eq!(u[2], 0.0); // degenerate row z-scores to zero
        }
    }
}
