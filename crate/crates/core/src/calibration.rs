//! Offline threshold derivation.
//!
//! Calibration logs pair each step's fused sensitivity `S` with the action
//! error the policy would have made at 2, 4 and 8 bits. The sub-fallback
//! range `[0, theta_fp]` is split into uniform bins, per-bin conditional
//! error statistics are smoothed to be non-decreasing in `S` (pool-adjacent-
//! violators), and each threshold is placed at the first bin whose smoothed
//! error exceeds the shrinking bound `eps_a(S) = D_acc / (S + eta)`,
//! evaluated at the bin's upper edge (the most demanding point in the bin).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dispatcher::{phi_lookup, CalibrationTable};
use crate::quant::BitWidth;

/// One logged calibration step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSample {
    /// Fused sensitivity the dispatcher saw when deciding this step.
    #[serde(rename = "S")]
    pub s: f64,
    /// Action error `|a_hat(b) - a_fp|` at 2 bits.
    pub e2: f64,
    pub e4: f64,
    pub e8: f64,
}

impl CalibrationSample {
    pub fn error_at(&self, bits: BitWidth) -> f64 {
        match bits {
            BitWidth::B2 => self.e2,
            BitWidth::B4 => self.e4,
            BitWidth::B8 => self.e8,
            BitWidth::Full => 0.0,
        }
    }

    pub fn validate(&self) -> Result<(), CalibrationError> {
        let ok = self.s.is_finite()
            && self.s >= 0.0
            && [self.e2, self.e4, self.e8].iter().all(|e| e.is_finite() && *e >= 0.0);
        if ok {
            Ok(())
        } else {
            Err(CalibrationError::InvalidSample(format!("{self:?}")))
        }
    }
}

/// Which per-bin statistic feeds the crossing search. The mean implements
/// the expectation in the accuracy constraint; the 90th percentile is a
/// stricter audit option.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ErrorStat {
    #[default]
    Mean,
    P90,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CalibrationOptions {
    /// Number of uniform bins over `[0, theta_fp]`.
    pub bins: usize,
    /// Bins with fewer samples than this trigger a coverage warning.
    pub min_per_bin: usize,
    pub stat: ErrorStat,
}

impl Default for CalibrationOptions {
    fn default() -> Self {
        CalibrationOptions { bins: 32, min_per_bin: 50, stat: ErrorStat::Mean }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CalibrationError {
    #[error("no calibration samples supplied")]
    EmptySamples,
    #[error("no bin in [0, theta_fp] received any sample")]
    NoCoverage,
    #[error("invalid calibration sample: {0}")]
    InvalidSample(String),
    #[error("invalid calibration setup: {0}")]
    Setup(String),
}

/// Maximum allowable single-step action error at sensitivity `s`:
/// `D_acc / (s + eta)`, strictly decreasing in `s`.
pub fn error_bound(s: f64, d_acc: f64, eta: f64) -> f64 {
    debug_assert!(d_acc > 0.0 && eta > 0.0);
    d_acc / (s + eta)
}

/// Per-bin statistics retained for reporting and audits.
#[derive(Debug, Clone, Serialize)]
pub struct BinStats {
    pub lower: f64,
    pub upper: f64,
    pub count: usize,
    /// Raw conditional error statistic per quantized width (None if empty).
    pub raw_e2: Option<f64>,
    pub raw_e4: Option<f64>,
    /// After interpolation of empty bins and isotonic smoothing.
    pub smoothed_e2: f64,
    pub smoothed_e4: f64,
    /// Error bound evaluated at the bin's upper edge.
    pub bound: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationReport {
    pub bins: Vec<BinStats>,
    pub warnings: Vec<String>,
    /// Samples with S > theta_fp are outside the quantized domain.
    pub dropped_above_fp: usize,
    pub total_samples: usize,
}

/// Weighted pool-adjacent-violators: smallest change making `values`
/// non-decreasing in index order (least squares under `weights`).
pub fn pool_adjacent_violators(values: &[f64], weights: &[f64]) -> Vec<f64> {
    assert_eq!(values.len(), weights.len());
    let mut level: Vec<f64> = Vec::with_capacity(values.len());
    let mut weight: Vec<f64> = Vec::with_capacity(values.len());
    let mut span: Vec<usize> = Vec::with_capacity(values.len());
    for (&v, &w) in values.iter().zip(weights) {
        level.push(v);
        weight.push(w);
        span.push(1);
        while level.len() > 1 && level[level.len() - 2] > level[level.len() - 1] {
            let (v2, w2, s2) = (level.pop().unwrap(), weight.pop().unwrap(), span.pop().unwrap());
            let last = level.len() - 1;
            let merged_w = weight[last] + w2;
            level[last] = (level[last] * weight[last] + v2 * w2) / merged_w;
            weight[last] = merged_w;
            span[last] += s2;
        }
    }
    let mut out = Vec::with_capacity(values.len());
    for (lvl, n) in level.iter().zip(&span) {
        out.extend(std::iter::repeat_n(*lvl, *n));
    }
    out
}

fn bin_statistic(errors: &mut Vec<f64>, stat: ErrorStat) -> f64 {
    match stat {
        ErrorStat::Mean => errors.iter().sum::<f64>() / errors.len() as f64,
        ErrorStat::P90 => crate::kinematics::percentile_nearest_rank(errors, 90),
    }
}

/// Fill `None` entries by linear interpolation between the nearest occupied
/// bins; flat extrapolation at the ends.
fn interpolate_gaps(values: &[Option<f64>]) -> Option<Vec<f64>> {
    let occupied: Vec<usize> =
        values.iter().enumerate().filter_map(|(i, v)| v.map(|_| i)).collect();
    if occupied.is_empty() {
        return None;
    }
    let mut out = vec![0.0; values.len()];
    for i in 0..values.len() {
        out[i] = match values[i] {
            Some(v) => v,
            None => {
                let prev = occupied.iter().rev().find(|&&j| j < i);
                let next = occupied.iter().find(|&&j| j > i);
                match (prev, next) {
                    (Some(&p), Some(&n)) => {
                        let t = (i - p) as f64 / (n - p) as f64;
                        values[p].unwrap() * (1.0 - t) + values[n].unwrap() * t
                    }
                    (Some(&p), None) => values[p].unwrap(),
                    (None, Some(&n)) => values[n].unwrap(),
                    (None, None) => unreachable!("occupied is non-empty"),
                }
            }
        };
    }
    Some(out)
}

/// Derive `theta_24` and `theta_48` from calibration samples. Everything
/// else in `table_in` passes through unchanged.
pub fn derive_thresholds(
    samples: &[CalibrationSample],
    table_in: &CalibrationTable,
    opts: &CalibrationOptions,
) -> Result<(CalibrationTable, CalibrationReport), CalibrationError> {
    if samples.is_empty() {
        return Err(CalibrationError::EmptySamples);
    }
    if opts.bins == 0 {
        return Err(CalibrationError::Setup("bin count must be positive".into()));
    }
    if table_in.theta_fp <= 0.0 {
        return Err(CalibrationError::Setup(format!(
            "theta_fp must be positive, got {}",
            table_in.theta_fp
        )));
    }
    for sample in samples {
        sample.validate()?;
    }

    let width = table_in.theta_fp / opts.bins as f64;
    let mut by_bin: Vec<(Vec<f64>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); opts.bins];
    let mut dropped_above_fp = 0usize;
    for sample in samples {
        if sample.s > table_in.theta_fp {
            dropped_above_fp += 1;
            continue;
        }
        let idx = ((sample.s / width) as usize).min(opts.bins - 1);
        by_bin[idx].0.push(sample.e2);
        by_bin[idx].1.push(sample.e4);
    }

    let mut warnings = Vec::new();
    let mut raw_e2: Vec<Option<f64>> = Vec::with_capacity(opts.bins);
    let mut raw_e4: Vec<Option<f64>> = Vec::with_capacity(opts.bins);
    let mut counts: Vec<usize> = Vec::with_capacity(opts.bins);
    // Bins are independent; the per-bin sample order is file order, so the
    // reduction is deterministic regardless of how this loop is scheduled.
    for (e2s, e4s) in by_bin.iter_mut() {
        counts.push(e2s.len());
        if e2s.is_empty() {
            raw_e2.push(None);
            raw_e4.push(None);
        } else {
            raw_e2.push(Some(bin_statistic(e2s, opts.stat)));
            raw_e4.push(Some(bin_statistic(e4s, opts.stat)));
        }
    }

    let empty: Vec<usize> =
        (0..opts.bins).filter(|&i| counts[i] == 0).collect();
    if !empty.is_empty() {
        warnings.push(format!(
            "empty bins {empty:?}; statistics interpolated from neighboring occupied bins"
        ));
    }
    let thin: Vec<usize> = (0..opts.bins)
        .filter(|&i| counts[i] > 0 && counts[i] < opts.min_per_bin)
        .collect();
    if !thin.is_empty() {
        warnings.push(format!(
            "bins {thin:?} hold fewer than {} samples; statistics may be noisy",
            opts.min_per_bin
        ));
    }

    let filled_e2 = interpolate_gaps(&raw_e2).ok_or(CalibrationError::NoCoverage)?;
    let filled_e4 = interpolate_gaps(&raw_e4).ok_or(CalibrationError::NoCoverage)?;
    let weights: Vec<f64> = counts.iter().map(|&c| c.max(1) as f64).collect();
    let smoothed_e2 = pool_adjacent_violators(&filled_e2, &weights);
    let smoothed_e4 = pool_adjacent_violators(&filled_e4, &weights);

    let crossing = |smoothed: &[f64]| -> Option<usize> {
        (0..opts.bins).find(|&i| {
            let upper = (i + 1) as f64 * width;
            smoothed[i] > error_bound(upper, table_in.d_acc, table_in.eta)
        })
    };
    // No violation anywhere means the width serves the whole range.
    let theta_24 = crossing(&smoothed_e2)
        .map(|i| i as f64 * width)
        .unwrap_or(table_in.theta_fp);
    let theta_48 = crossing(&smoothed_e4)
        .map(|i| i as f64 * width)
        .unwrap_or(table_in.theta_fp)
        .max(theta_24);

    let bins = (0..opts.bins)
        .map(|i| BinStats {
            lower: i as f64 * width,
            upper: (i + 1) as f64 * width,
            count: counts[i],
            raw_e2: raw_e2[i],
            raw_e4: raw_e4[i],
            smoothed_e2: smoothed_e2[i],
            smoothed_e4: smoothed_e4[i],
            bound: error_bound((i + 1) as f64 * width, table_in.d_acc, table_in.eta),
        })
        .collect();

    let table = CalibrationTable { theta_24, theta_48, ..table_in.clone() };
    table.validate().map_err(|e| CalibrationError::Setup(e.to_string()))?;
    Ok((
        table,
        CalibrationReport { bins, warnings, dropped_above_fp, total_samples: samples.len() },
    ))
}

/// Held-out audit of a calibrated table.
#[derive(Debug, Clone, Serialize)]
pub struct ValidationReport {
    pub total: usize,
    /// Samples inside the quantized domain (S <= theta_fp).
    pub audited: usize,
    /// Audited samples whose dispatched-width error met the bound.
    pub satisfied: usize,
    pub satisfaction_rate: f64,
    /// Worst `error / bound` ratio seen per bin (None for untouched bins).
    pub worst_ratio_by_bin: Vec<Option<f64>>,
}

/// Check `e(Phi(S)) <= eps_a(S)` on each sample under the quantized domain.
pub fn validate_table(
    table: &CalibrationTable,
    samples: &[CalibrationSample],
    bins: usize,
) -> ValidationReport {
    let width = table.theta_fp / bins.max(1) as f64;
    let mut audited = 0usize;
    let mut satisfied = 0usize;
    let mut worst: Vec<Option<f64>> = vec![None; bins.max(1)];
    for sample in samples {
        if sample.s > table.theta_fp {
            continue;
        }
        audited += 1;
        let bits = phi_lookup(sample.s, table).expect("s <= theta_fp");
        let err = sample.error_at(bits);
        let bound = error_bound(sample.s, table.d_acc, table.eta);
        if err <= bound {
            satisfied += 1;
        }
        let idx = ((sample.s / width) as usize).min(bins.max(1) - 1);
        let ratio = err / bound;
        worst[idx] = Some(worst[idx].map_or(ratio, |w: f64| w.max(ratio)));
    }
    ValidationReport {
        total: samples.len(),
        audited,
        satisfied,
        satisfaction_rate: if audited == 0 { 1.0 } else { satisfied as f64 / audited as f64 },
        worst_ratio_by_bin: worst,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn base_table(d_acc: f64) -> CalibrationTable {
        CalibrationTable { d_acc, eta: 0.01, theta_fp: 0.5, ..CalibrationTable::default() }
    }

    /// Dense synthetic samples with constant per-bit errors.
    fn constant_samples(n: usize, e2: f64, e4: f64, e8: f64, s_max: f64) -> Vec<CalibrationSample> {
        (0..n)
            .map(|i| CalibrationSample {
                s: s_max * i as f64 / (n - 1) as f64,
                e2,
                e4,
                e8,
            })
            .collect()
    }

    #[test]
    fn bound_examples() {
        assert_eq!(error_bound(0.0, 1.0, 0.01), 100.0);
        assert!(error_bound(10.0, 1.0, 0.01) < error_bound(1.0, 1.0, 0.01));
        assert!((error_bound(0.49, 1.0, 0.01) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn bound_is_strictly_decreasing() {
        let mut prev = error_bound(0.0, 0.7, 0.02);
        for i in 1..100 {
            let b = error_bound(i as f64 * 0.05, 0.7, 0.02);
            assert!(b < prev);
            prev = b;
        }
    }

    /// Closed form: constant error `e` crosses the bound at
    /// `S* = D_acc / e - eta`; the threshold lands at the lower edge of the
    /// bin containing `S*`.
    #[test]
    fn constant_error_crossing_matches_closed_form() {
        let opts = CalibrationOptions { min_per_bin: 1, ..CalibrationOptions::default() };
        // D_acc = 1: crossing for e2 = 0.5 sits at S = 1.99 > theta_fp,
        // so 2-bit serves the whole range.
        let samples = constant_samples(3200, 0.5, 0.1, 0.01, 0.5);
        let (table, _) = derive_thresholds(&samples, &base_table(1.0), &opts).unwrap();
        assert_eq!(table.theta_24, 0.5);
        assert_eq!(table.theta_48, 0.5);

        // D_acc = 0.1: crossing at S = 0.1/0.5 - 0.01 = 0.19.
        let (table, _) = derive_thresholds(&samples, &base_table(0.1), &opts).unwrap();
        let width = 0.5 / 32.0;
        let expected_bin = (0.19f64 / width).floor();
        assert_eq!(table.theta_24, expected_bin * width);
        // e4 = 0.1 crosses at 0.1/0.1 - 0.01 = 0.99 > theta_fp.
        assert_eq!(table.theta_48, 0.5);
    }

    #[test]
    fn all_zero_errors_leave_two_bit_everywhere() {
        let opts = CalibrationOptions { min_per_bin: 1, ..CalibrationOptions::default() };
        let samples = constant_samples(640, 0.0, 0.0, 0.0, 0.5);
        let (table, _) = derive_thresholds(&samples, &base_table(1.0), &opts).unwrap();
        assert_eq!(table.theta_24, 0.5);
        assert_eq!(table.theta_48, 0.5);
    }

    #[test]
    fn violation_from_bin_zero_empties_the_two_bit_region() {
        let opts = CalibrationOptions { min_per_bin: 1, ..CalibrationOptions::default() };
        // Bound at the first bin edge: 0.01/(0.015625 + 0.01) ~ 0.39 < 5.0.
        let samples = constant_samples(640, 5.0, 0.001, 0.0001, 0.5);
        let (table, _) = derive_thresholds(&samples, &base_table(0.01), &opts).unwrap();
        assert_eq!(table.theta_24, 0.0);
    }

    #[test]
    fn empty_samples_rejected() {
        let err = derive_thresholds(&[], &base_table(1.0), &CalibrationOptions::default());
        assert_eq!(err.unwrap_err(), CalibrationError::EmptySamples);
    }

    #[test]
    fn sparse_coverage_warns_and_interpolates() {
        let opts = CalibrationOptions { min_per_bin: 1, ..CalibrationOptions::default() };
        // Only two occupied bins, far apart.
        let samples = vec![
            CalibrationSample { s: 0.01, e2: 0.1, e4: 0.01, e8: 0.001 },
            CalibrationSample { s: 0.49, e2: 0.3, e4: 0.05, e8: 0.001 },
        ];
        let (table, report) = derive_thresholds(&samples, &base_table(0.05), &opts).unwrap();
        assert!(report.warnings.iter().any(|w| w.contains("empty bins")));
        assert!(table.theta_24 >= 0.0 && table.theta_24 <= table.theta_48);
        // Interpolated statistics exist for every bin.
        assert!(report.bins.iter().all(|b| b.smoothed_e2.is_finite()));
    }

    #[test]
    fn pav_enforces_monotonicity_minimally() {
        let values = [1.0, 3.0, 2.0, 4.0];
        let weights = [1.0; 4];
        let smoothed = pool_adjacent_violators(&values, &weights);
        assert_eq!(smoothed, vec![1.0, 2.5, 2.5, 4.0]);
        let already = [1.0, 2.0, 3.0];
        assert_eq!(pool_adjacent_violators(&already, &[1.0; 3]), already.to_vec());
    }

    /// Minimality on the binned model: below each threshold the smoothed
    /// error meets the bound at the bin's upper edge.
    #[test]
    fn thresholds_are_minimal_on_the_binned_model() {
        let opts = CalibrationOptions { min_per_bin: 1, ..CalibrationOptions::default() };
        let samples: Vec<CalibrationSample> = (0..3200)
            .map(|i| {
                let s = 0.5 * i as f64 / 3199.0;
                CalibrationSample { s, e2: 0.02 + 0.3 * s, e4: 0.005 + 0.08 * s, e8: 0.001 }
            })
            .collect();
        let table_in = base_table(0.02);
        let (table, report) = derive_thresholds(&samples, &table_in, &opts).unwrap();
        for bin in &report.bins {
            if bin.upper <= table.theta_24 {
                assert!(bin.smoothed_e2 <= bin.bound, "2-bit bin below theta_24 violates bound");
            } else if bin.upper <= table.theta_48 {
                assert!(bin.smoothed_e4 <= bin.bound, "4-bit bin below theta_48 violates bound");
            }
        }
    }

    #[test]
    fn derivation_is_deterministic() {
        let opts = CalibrationOptions { min_per_bin: 1, ..CalibrationOptions::default() };
        let samples = constant_samples(1000, 0.2, 0.05, 0.001, 0.5);
        let a = derive_thresholds(&samples, &base_table(0.05), &opts).unwrap().0;
        let b = derive_thresholds(&samples, &base_table(0.05), &opts).unwrap().0;
        assert_eq!(a, b);
    }

    #[test]
    fn validation_report_self_consistency() {
        let opts = CalibrationOptions { min_per_bin: 1, ..CalibrationOptions::default() };
        let samples = constant_samples(3200, 0.2, 0.05, 0.001, 0.5);
        let (table, _) = derive_thresholds(&samples, &base_table(0.05), &opts).unwrap();
        let report = validate_table(&table, &samples, opts.bins);
        // The derivation is conservative (bound checked at the bin's upper
        // edge), so the bulk of samples must satisfy the pointwise bound.
        assert!(report.satisfaction_rate >= 0.9, "{}", report.satisfaction_rate);
        assert_eq!(report.audited, samples.len());

        let empty = validate_table(&table, &[], opts.bins);
        assert_eq!(empty.total, 0);
        assert_eq!(empty.audited, 0);
        assert_eq!(empty.satisfaction_rate, 1.0);
    }

    #[test]
    fn zero_theta_24_audits_everything_at_four_bits_or_more() {
        let table = CalibrationTable {
            theta_24: 0.0,
            theta_48: 0.3,
            ..base_table(0.05)
        };
        let samples = constant_samples(100, 9.9, 0.01, 0.001, 0.5);
        // With theta_24 = 0 only s = 0.0 maps to 2 bits; everything else is
        // audited at 4 or 8 bits, so the giant e2 hardly matters.
        let report = validate_table(&table, &samples, 32);
        assert!(report.satisfaction_rate > 0.9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn derived_thresholds_are_ordered(
            seed in 0u64..1000,
            d_acc in 0.005f64..0.5,
        ) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<CalibrationSample> = (0..400)
                .map(|_| {
                    let s = rng.random_range(0.0..0.5);
                    let e8 = rng.random_range(0.0..0.01);
                    let e4 = e8 + rng.random_range(0.0..0.1);
                    let e2 = e4 + rng.random_range(0.0..0.4);
                    CalibrationSample { s, e2, e4, e8 }
                })
                .collect();
            let opts = CalibrationOptions { min_per_bin: 1, ..CalibrationOptions::default() };
            let (table, _) = derive_thresholds(&samples, &base_table(d_acc), &opts).unwrap();
            prop_assert!(0.0 <= table.theta_24);
            prop_assert!(table.theta_24 <= table.theta_48);
            prop_assert!(table.theta_48 <= table.theta_fp);
        }

        #[test]
        fn pav_output_is_monotone_and_mean_preserving(
            values in prop::collection::vec(0.0f64..10.0, 1..40),
        ) {
            let weights = vec![1.0; values.len()];
            let smoothed = pool_adjacent_violators(&values, &weights);
            for w in smoothed.windows(2) {
                prop_assert!(w[0] <= w[1] + 1e-12);
            }
            let sum_in: f64 = values.iter().sum();
            let sum_out: f64 = smoothed.iter().sum();
            prop_assert!((sum_in - sum_out).abs() <= 1e-9 * sum_in.max(1.0));
        }
    }
}
