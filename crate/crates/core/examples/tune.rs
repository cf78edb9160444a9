use dynbits::calibration::{derive_thresholds, CalibrationOptions};
use dynbits::env::{EnvConfig, Phase};
use dynbits::harness::{collect_calibration, run_suite, SimMode};
use dynbits::kinematics::KinematicsConfig;
use dynbits::profiler::{perturb_at, profile, proxy_correlation, rollout_baseline};
use dynbits::quant::BitWidth;
use dynbits::CalibrationTable;

fn main() {
    let cfg = EnvConfig::default();
    let kin = KinematicsConfig::default();

    // --- calibration sweep over d_acc ---
    let calib_seeds: Vec<u64> = (1000..1120).collect();
    let base = CalibrationTable { theta_24: 0.5, theta_48: 0.5, ..CalibrationTable::default() };
    let (samples, stats) = collect_calibration(&calib_seeds, &base, &cfg).unwrap();
    println!("calibration: {} samples from {} seeds (skipped {:?})", stats.samples, stats.baselines_retained, stats.skipped_seeds.len());
    // S histogram
    let mut hist = [0usize; 12];
    for s in &samples {
        let idx = ((s.s / 0.5 * 10.0) as usize).min(11);
        hist[idx] += 1;
    }
    println!("S-histogram (0..0.5 in 10 bins, then >fp): {hist:?}");
    let opts = CalibrationOptions { min_per_bin: 50, ..CalibrationOptions::default() };
    for d_acc in [0.2, 0.1, 0.06, 0.03, 0.012, 0.006] {
        let tin = CalibrationTable { d_acc, ..base.clone() };
        let (t, rep) = derive_thresholds(&samples, &tin, &opts).unwrap();
        println!("d_acc {:6}: theta_24 = {:.4}, theta_48 = {:.4} (warnings: {})", d_acc, t.theta_24, t.theta_48, rep.warnings.len());
    }

    // --- pick a candidate and run the suite ---
    for d_acc in [0.06, 0.03, 0.012] {
        let tin = CalibrationTable { d_acc, ..base.clone() };
        let (table, _) = derive_thresholds(&samples, &tin, &opts).unwrap();
        let seeds: Vec<u64> = (0..100).collect();
        let report = run_suite(&seeds, &[SimMode::Static(BitWidth::Full), SimMode::Static(BitWidth::B2), SimMode::Dynamic], &table, &cfg).unwrap();
        println!("--- d_acc = {d_acc}  (theta {:.3}/{:.3}) ---", table.theta_24, table.theta_48);
        for m in &report.modes {
            println!("  {:<10} SR {:5.1}%  cost {:7.2}  speedup {:?}  frac[2/4/8/16] = {:.2}/{:.2}/{:.2}/{:.2}",
                m.mode, m.success_rate, m.mean_cost, m.speedup.map(|s| (s*100.0).round()/100.0),
                m.bits_fraction.b2, m.bits_fraction.b4, m.bits_fraction.b8, m.bits_fraction.b16);
        }
    }

    // --- temporal sensitivity: align vs transit injections ---
    let mut align_d = Vec::new();
    let mut transit_d = Vec::new();
    for seed in 0..50u64 {
        let b = rollout_baseline(seed, &cfg);
        if !b.result.success { continue; }
        let phases: Vec<Phase> = b.states[..b.len()].iter().map(|s| s.phase).collect();
        for (t, ph) in phases.iter().enumerate() {
            match ph {
                Phase::Align => align_d.push(perturb_at(seed, t, BitWidth::B2, &cfg).unwrap().d_t),
                Phase::Transit => transit_d.push(perturb_at(seed, t, BitWidth::B2, &cfg).unwrap().d_t),
                _ => {}
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    println!("align injections: n = {}, mean D_T = {:.4}", align_d.len(), mean(&align_d));
    println!("transit injections: n = {}, mean D_T = {:.4}", transit_d.len(), mean(&transit_d));
    println!("ratio = {:.2}", mean(&align_d) / mean(&transit_d));

    // --- proxy correlation over 20 seeds ---
    let (records, pstats) = profile(&(0..20u64).collect::<Vec<_>>(), BitWidth::B2, &cfg, &kin).unwrap();
    let (r_m, r_j) = proxy_correlation(&records).unwrap();
    println!("profile: {} records ({} excluded), r_M = {:.3}, r_J = {:.3}", pstats.records, pstats.excluded_records, r_m, r_j);
}
