//! Tests for the censoring estimator, weighted Brier scores, concordance,
//! and calibration tables.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use survgrid_core::diffcore::Array;
use survgrid_core::hazardheads::HazardGrid;
use survgrid_core::metrics::{
    brier_k, calibration_curve, ctd_k, evaluate, ibs_k, km_censoring, write_calibration_csv,
    write_metrics_csv, CtdConvention, EvalConfig,
};

fn random_cif_rows(n: usize, horizon: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            let mut level = 0.0f64;
            (0..horizon)
                .map(|_| {
                    level += rng.gen_range(0.0..0.15);
                    level.min(0.99)
                })
                .collect()
        })
        .collect()
}

#[test]
fn censoring_curve_is_one_without_censoring() {
    let outcomes = vec![(1, 1), (3, 2), (7, 1), (7, 2)];
    let g = km_censoring(&outcomes).unwrap();
    for t in 0..12 {
        assert_eq!(g.at(t), 1.0);
    }
}

#[test]
fn censoring_curve_drops_to_zero_when_everyone_censors_together() {
    let g = km_censoring(&[(5, 0), (5, 0)]).unwrap();
    for t in 0..5 {
        assert_eq!(g.at(t), 1.0);
    }
    assert_eq!(g.at(5), 0.0);
    assert_eq!(g.at(9), 0.0);
    assert_eq!(g.left_limit(5), 1.0);
}

#[test]
fn censoring_curve_matches_hand_product_limit() {
    let g = km_censoring(&[(1, 0), (2, 1), (3, 0)]).unwrap();
    assert!((g.at(1) - 2.0 / 3.0).abs() < 1e-15);
    assert!((g.at(2) - 2.0 / 3.0).abs() < 1e-15);
    assert_eq!(g.at(3), 0.0);
    assert_eq!(g.left_limit(1), 1.0);
    assert!((g.left_limit(2) - 2.0 / 3.0).abs() < 1e-15);
}

#[test]
fn tied_events_leave_the_censoring_risk_set_first() {
    // Event and censoring share t=2: the censoring factor sees a risk set of
    // 2, not 3.
    let g = km_censoring(&[(2, 1), (2, 0), (3, 0)]).unwrap();
    assert_eq!(g.at(1), 1.0);
    assert!((g.at(2) - 0.5).abs() < 1e-15);
    assert_eq!(g.at(3), 0.0);
}

#[test]
fn all_censored_gives_the_empirical_censoring_survival() {
    let outcomes = vec![(1, 0), (2, 0), (3, 0)];
    let g = km_censoring(&outcomes).unwrap();
    for t in 1..=3 {
        let surviving = outcomes.iter().filter(|&&(ti, _)| ti > t).count();
        assert!((g.at(t) - surviving as f64 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn empty_outcome_list_is_rejected() {
    assert!(km_censoring(&[]).is_err());
    assert!(km_censoring(&[(0, 1)]).is_err());
}

#[test]
fn brier_matches_hand_arithmetic_without_censoring() {
    // One event by j with prediction 0.8, one survivor with prediction 0.2.
    let outcomes = vec![(1, 1), (5, 1)];
    let g = km_censoring(&outcomes).unwrap();
    let bs = brier_k(&[0.8, 0.2], &outcomes, &g, 2, 1).unwrap();
    assert!((bs.value.unwrap() - 0.04).abs() < 1e-15);
    assert_eq!(bs.dropped, 0);
}

#[test]
fn perfect_predictions_score_zero() {
    let outcomes = vec![(1, 1), (5, 1)];
    let g = km_censoring(&outcomes).unwrap();
    let bs = brier_k(&[1.0, 0.0], &outcomes, &g, 2, 1).unwrap();
    assert_eq!(bs.value, Some(0.0));
}

#[test]
fn everyone_censored_before_j_leaves_no_weight_mass() {
    let outcomes = vec![(1, 0), (2, 0)];
    let g = km_censoring(&outcomes).unwrap();
    let bs = brier_k(&[0.3, 0.4], &outcomes, &g, 3, 1).unwrap();
    assert_eq!(bs.value, None);
    assert_eq!(bs.dropped, 0);
}

#[test]
fn zero_censoring_reduces_to_the_unweighted_score() {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    for j in 1..=6 {
        let outcomes: Vec<(usize, usize)> = (0..30)
            .map(|_| (rng.gen_range(1..10), rng.gen_range(1..3)))
            .collect();
        let preds: Vec<f64> = (0..30).map(|_| rng.gen_range(0.0..1.0)).collect();
        let g = km_censoring(&outcomes).unwrap();
        let bs = brier_k(&preds, &outcomes, &g, j, 1).unwrap().value.unwrap();
        let plain: f64 = outcomes
            .iter()
            .zip(&preds)
            .map(|(&(t, e), &p)| {
                let label = if t <= j && e == 1 { 1.0 } else { 0.0 };
                (label - p) * (label - p)
            })
            .sum::<f64>()
            / 30.0;
        assert!((bs - plain).abs() < 1e-15);
    }
}

#[test]
fn vanished_censoring_weight_drops_the_subject() {
    // G estimated elsewhere hits zero at t=1; a subject with an event at t=2
    // then has no usable weight.
    let g = km_censoring(&[(1, 0), (1, 0)]).unwrap();
    let outcomes = vec![(2, 1)];
    let bs = brier_k(&[0.5], &outcomes, &g, 3, 1).unwrap();
    assert_eq!(bs.value, None);
    assert_eq!(bs.dropped, 1);
}

#[test]
fn integrated_score_of_a_constant_is_that_constant() {
    // Everyone survives past the grid, so BS(j) = mean squared prediction at
    // every point.
    let outcomes = vec![(9, 1), (9, 1), (9, 2)];
    let g = km_censoring(&outcomes).unwrap();
    let cif = vec![vec![0.3; 4], vec![0.1; 4], vec![0.2; 4]];
    let want = (0.09 + 0.01 + 0.04) / 3.0;
    let ibs = ibs_k(&cif, &outcomes, &g, &[1, 2, 3, 4], 1).unwrap();
    assert!((ibs.value.unwrap() - want).abs() < 1e-15);
}

#[test]
fn single_point_grid_equals_the_pointwise_score() {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let outcomes: Vec<(usize, usize)> = (0..20)
        .map(|_| (rng.gen_range(1..8), rng.gen_range(0..3)))
        .collect();
    let cif = random_cif_rows(20, 5, &mut rng);
    let g = km_censoring(&outcomes).unwrap();
    let ibs = ibs_k(&cif, &outcomes, &g, &[3], 1).unwrap();
    let preds: Vec<f64> = cif.iter().map(|row| row[2]).collect();
    let bs = brier_k(&preds, &outcomes, &g, 3, 1).unwrap();
    assert_eq!(ibs.value, bs.value);
}

#[test]
fn integrated_score_is_the_mean_of_pointwise_scores() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let outcomes: Vec<(usize, usize)> = (0..40)
        .map(|_| (rng.gen_range(1..10), rng.gen_range(0..3)))
        .collect();
    let cif = random_cif_rows(40, 6, &mut rng);
    let g = km_censoring(&outcomes).unwrap();
    let grid: Vec<usize> = (1..=6).collect();
    for k in 1..=2 {
        let ibs = ibs_k(&cif, &outcomes, &g, &grid, k).unwrap().value.unwrap();
        let mean: f64 = grid
            .iter()
            .map(|&j| {
                let preds: Vec<f64> = cif.iter().map(|row| row[j - 1]).collect();
                brier_k(&preds, &outcomes, &g, j, k).unwrap().value.unwrap()
            })
            .sum::<f64>()
            / 6.0;
        assert!((ibs - mean).abs() < 1e-12);
    }
}

#[test]
fn perfectly_ordered_predictions_are_fully_concordant() {
    let outcomes = vec![(1, 1), (2, 1), (3, 1), (4, 1)];
    let cif: Vec<Vec<f64>> = [0.9, 0.7, 0.5, 0.3]
        .iter()
        .map(|&r| vec![r; 4])
        .collect();
    let c = ctd_k(&cif, &outcomes, 1, CtdConvention::EarlierTime).unwrap();
    assert_eq!(c, Some(1.0));
    let reversed: Vec<Vec<f64>> = cif.iter().rev().cloned().collect();
    let c = ctd_k(&reversed, &outcomes, 1, CtdConvention::EarlierTime).unwrap();
    assert_eq!(c, Some(0.0));
}

#[test]
fn concordance_matches_brute_force_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(43);
    for trial in 0..20 {
        let n = 50;
        let horizon = 6;
        let outcomes: Vec<(usize, usize)> = (0..n)
            .map(|_| (rng.gen_range(1..=horizon + 3), rng.gen_range(0..3)))
            .collect();
        let cif = random_cif_rows(n, horizon, &mut rng);
        for k in 1..=2 {
            let got = ctd_k(&cif, &outcomes, k, CtdConvention::EarlierTime).unwrap();
            // Independent pair walk straight from the definition.
            let mut num = 0.0;
            let mut pairs = 0u32;
            for a in 0..n {
                let (ta, ea) = outcomes[a];
                if ea != k || ta > horizon {
                    continue;
                }
                for b in 0..n {
                    let (tb, eb) = outcomes[b];
                    if b == a || !(tb > ta || (tb == ta && eb == 0)) {
                        continue;
                    }
                    pairs += 1;
                    if cif[a][ta - 1] > cif[b][ta - 1] {
                        num += 1.0;
                    } else if cif[a][ta - 1] == cif[b][ta - 1] {
                        num += 0.5;
                    }
                }
            }
            let want = if pairs == 0 { None } else { Some(num / pairs as f64) };
            assert_eq!(got, want, "trial {trial} cause {k}");
        }
    }
}

#[test]
fn concordance_ignores_monotone_rescaling() {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let outcomes: Vec<(usize, usize)> = (0..30)
        .map(|_| (rng.gen_range(1..8), rng.gen_range(0..3)))
        .collect();
    let cif = random_cif_rows(30, 5, &mut rng);
    let squashed: Vec<Vec<f64>> = cif
        .iter()
        .map(|row| row.iter().map(|&x| 0.1 + 0.5 * x * x * x).collect())
        .collect();
    for convention in [CtdConvention::EarlierTime, CtdConvention::PairTimes] {
        let a = ctd_k(&cif, &outcomes, 1, convention).unwrap();
        let b = ctd_k(&squashed, &outcomes, 1, convention).unwrap();
        assert_eq!(a, b);
    }
}

#[test]
fn no_comparable_pair_gives_no_concordance_value() {
    let outcomes = vec![(1, 0), (2, 0), (3, 0)];
    let cif = vec![vec![0.5; 4]; 3];
    assert_eq!(ctd_k(&cif, &outcomes, 1, CtdConvention::EarlierTime).unwrap(), None);
}

#[test]
fn comparison_time_convention_changes_the_verdict() {
    // b's risk explodes after a's event interval: ranking both at t_a calls
    // the pair concordant, ranking each at its own time calls it discordant.
    let outcomes = vec![(1, 1), (2, 1)];
    let cif = vec![vec![0.5, 0.55], vec![0.3, 0.9]];
    let earlier = ctd_k(&cif, &outcomes, 1, CtdConvention::EarlierTime).unwrap();
    let pairwise = ctd_k(&cif, &outcomes, 1, CtdConvention::PairTimes).unwrap();
    assert_eq!(earlier, Some(1.0));
    assert_eq!(pairwise, Some(0.0));
}

#[test]
fn uncensored_calibration_recovers_raw_frequencies() {
    let mut rng = ChaCha8Rng::seed_from_u64(45);
    let n = 40;
    let outcomes: Vec<(usize, usize)> = (0..n)
        .map(|_| (rng.gen_range(1..8), rng.gen_range(1..3)))
        .collect();
    let preds: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let g = km_censoring(&outcomes).unwrap();
    let table = calibration_curve(&preds, &outcomes, &g, 4, 1, 4).unwrap();
    assert_eq!(table.dropped, 0);
    let total_eff: f64 = table.bins.iter().map(|b| b.n_eff).sum();
    assert!((total_eff - n as f64).abs() < 1e-12);

    // Recompute each bin's raw frequency from the sorted membership.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| preds[a].total_cmp(&preds[b]));
    for (rank, bin) in table.bins.iter().enumerate() {
        let members = &order[rank * n / 4..(rank + 1) * n / 4];
        let hits = members
            .iter()
            .filter(|&&i| outcomes[i].0 <= 4 && outcomes[i].1 == 1)
            .count();
        assert_eq!(bin.n_eff, members.len() as f64);
        assert_eq!(bin.obs_rate, Some(hits as f64 / members.len() as f64));
    }
}

#[test]
fn identical_predictions_collapse_to_one_bin() {
    let outcomes = vec![(1, 1), (2, 1), (6, 1), (6, 2)];
    let g = km_censoring(&outcomes).unwrap();
    let table = calibration_curve(&[0.4; 4], &outcomes, &g, 3, 1, 4).unwrap();
    assert_eq!(table.bins.len(), 1);
    let bin = &table.bins[0];
    assert_eq!(bin.mean_pred, 0.4);
    assert_eq!(bin.obs_rate, Some(0.5));
    assert_eq!(bin.n_eff, 4.0);
}

#[test]
fn tied_runs_wider_than_a_bin_stay_whole_without_swallowing_neighbours() {
    // Two prediction values, each covering six subjects, requested as four
    // bins: every cut lands inside a run, slides to the run boundary, and the
    // table comes back with exactly one bin per distinct value.
    let outcomes: Vec<(usize, usize)> = (0..12).map(|i| (1, 1 + i % 2)).collect();
    let mut preds = vec![0.25; 6];
    preds.extend(vec![0.75; 6]);
    let g = km_censoring(&outcomes).unwrap();
    let table = calibration_curve(&preds, &outcomes, &g, 1, 1, 4).unwrap();
    assert_eq!(table.bins.len(), 2);
    assert_eq!(table.bins[0].mean_pred, 0.25);
    assert_eq!(table.bins[1].mean_pred, 0.75);
    assert_eq!(table.bins[0].n_eff, 6.0);
    assert_eq!(table.bins[1].n_eff, 6.0);
}

#[test]
fn bin_means_are_nondecreasing() {
    let mut rng = ChaCha8Rng::seed_from_u64(46);
    let n = 57;
    let outcomes: Vec<(usize, usize)> = (0..n)
        .map(|_| (rng.gen_range(1..9), rng.gen_range(0..3)))
        .collect();
    let preds: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let g = km_censoring(&outcomes).unwrap();
    let table = calibration_curve(&preds, &outcomes, &g, 5, 2, 5).unwrap();
    for pair in table.bins.windows(2) {
        assert!(pair[0].mean_pred <= pair[1].mean_pred);
    }
}

#[test]
fn effective_counts_sum_to_the_weight_mass() {
    let mut rng = ChaCha8Rng::seed_from_u64(47);
    let n = 60;
    let outcomes: Vec<(usize, usize)> = (0..n)
        .map(|_| (rng.gen_range(1..9), rng.gen_range(0..3)))
        .collect();
    let preds: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
    let g = km_censoring(&outcomes).unwrap();
    let j = 5;
    let table = calibration_curve(&preds, &outcomes, &g, j, 1, 6).unwrap();
    let mut mass = 0.0;
    for &(t, e) in &outcomes {
        if t > j {
            mass += 1.0 / g.at(j);
        } else if e != 0 {
            mass += 1.0 / g.left_limit(t);
        }
    }
    let total_eff: f64 = table.bins.iter().map(|b| b.n_eff).sum();
    assert!((total_eff - mass).abs() < 1e-12);
}

#[test]
fn weightless_bin_reports_empty_rate() {
    // Low predictions all belong to subjects censored before j: that bin has
    // members but no weight.
    let outcomes = vec![(1, 0), (1, 0), (9, 1), (9, 1)];
    let preds = vec![0.1, 0.2, 0.7, 0.8];
    let g = km_censoring(&outcomes).unwrap();
    let table = calibration_curve(&preds, &outcomes, &g, 5, 1, 2).unwrap();
    assert_eq!(table.bins.len(), 2);
    assert_eq!(table.bins[0].obs_rate, None);
    assert_eq!(table.bins[0].se, None);
    assert_eq!(table.bins[0].n_eff, 0.0);
    assert!(table.bins[1].obs_rate.is_some());
}

#[test]
fn honest_predictions_calibrate_within_two_standard_errors() {
    // Uncensored cohort whose outcomes are drawn from the predictions
    // themselves: every bin must cover its own mean.
    let mut rng = ChaCha8Rng::seed_from_u64(48);
    let n = 4000;
    let mut preds = Vec::with_capacity(n);
    let mut outcomes = Vec::with_capacity(n);
    for _ in 0..n {
        let p: f64 = rng.gen_range(0.05..0.95);
        preds.push(p);
        if rng.gen_bool(p) {
            outcomes.push((1, 1));
        } else {
            outcomes.push((2, 1));
        }
    }
    let g = km_censoring(&outcomes).unwrap();
    let table = calibration_curve(&preds, &outcomes, &g, 1, 1, 10).unwrap();
    assert_eq!(table.bins.len(), 10);
    for (i, bin) in table.bins.iter().enumerate() {
        let rate = bin.obs_rate.unwrap();
        let se = bin.se.unwrap();
        assert!(
            (rate - bin.mean_pred).abs() <= 2.0 * se,
            "bin {i}: rate {rate} vs pred {} (se {se})",
            bin.mean_pred
        );
    }
}

#[test]
fn calibration_input_validation() {
    let outcomes = vec![(1, 1), (2, 1)];
    let g = km_censoring(&outcomes).unwrap();
    assert!(calibration_curve(&[0.5, 0.5], &outcomes, &g, 2, 1, 1).is_err());
    assert!(calibration_curve(&[0.5], &outcomes, &g, 2, 1, 2).is_err());
    assert!(calibration_curve(&[0.5, f64::NAN], &outcomes, &g, 2, 1, 2).is_err());
}

fn random_grids(n: usize, h: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<HazardGrid> {
    (0..n)
        .map(|_| {
            let logits: Vec<f64> = (0..h * k).map(|_| rng.gen_range(-3.0..0.0)).collect();
            HazardGrid::from_logits(&Array::new(vec![h, k], logits).unwrap()).unwrap()
        })
        .collect()
}

#[test]
fn evaluation_report_covers_every_cause() {
    let mut rng = ChaCha8Rng::seed_from_u64(49);
    let n = 50;
    let grids = random_grids(n, 6, 2, &mut rng);
    let outcomes: Vec<(usize, usize)> = (0..n)
        .map(|_| (rng.gen_range(1..9), rng.gen_range(0..3)))
        .collect();
    let report = evaluate(&grids, &outcomes, &EvalConfig::default()).unwrap();
    assert_eq!(report.horizon, 6);
    assert_eq!(report.causes.len(), 2);
    for (i, c) in report.causes.iter().enumerate() {
        assert_eq!(c.cause, i + 1);
        let ibs = c.ibs.unwrap();
        assert!(ibs >= 0.0 && ibs.is_finite());
        let ctd = c.ctd.unwrap();
        assert!((0.0..=1.0).contains(&ctd));
        assert_eq!(c.calibration.interval, 6);
        assert_eq!(c.calibration.cause, i + 1);
    }
}

#[test]
fn evaluation_rejects_inconsistent_inputs() {
    let mut rng = ChaCha8Rng::seed_from_u64(50);
    let grids = random_grids(3, 4, 2, &mut rng);
    let config = EvalConfig::default();
    assert!(evaluate(&grids, &[(1, 1), (2, 0)], &config).is_err());
    assert!(evaluate(&grids, &[(1, 1), (2, 0), (3, 3)], &config).is_err());
    assert!(evaluate(&[], &[], &config).is_err());
}

#[test]
fn metric_and_calibration_files_round_trip_by_line() {
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let n = 30;
    let grids = random_grids(n, 5, 2, &mut rng);
    let outcomes: Vec<(usize, usize)> = (0..n)
        .map(|_| (rng.gen_range(1..8), rng.gen_range(0..3)))
        .collect();
    let report = evaluate(&grids, &outcomes, &EvalConfig { bins: 3, ..Default::default() })
        .unwrap();

    let dir = std::env::temp_dir().join("survgrid_metrics_tests");
    std::fs::create_dir_all(&dir).unwrap();
    let mpath = dir.join("metrics.csv");
    write_metrics_csv(&mpath, &report).unwrap();
    let text = std::fs::read_to_string(&mpath).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "cause,metric,value");
    for c in &report.causes {
        let ibs_line = lines.next().unwrap();
        assert_eq!(ibs_line, format!("{},ibs,{}", c.cause, c.ibs.unwrap()));
        let ctd_line = lines.next().unwrap();
        assert_eq!(ctd_line, format!("{},ctd,{}", c.cause, c.ctd.unwrap()));
    }
    assert!(lines.next().is_none());

    let cpath = dir.join("calibration_1.csv");
    write_calibration_csv(&cpath, &report.causes[0].calibration).unwrap();
    let text = std::fs::read_to_string(&cpath).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "bin,mean_pred,obs_rate,se,n_eff");
    for (i, bin) in report.causes[0].calibration.bins.iter().enumerate() {
        let parts: Vec<&str> = lines.next().unwrap().split(',').collect();
        assert_eq!(parts[0], (i + 1).to_string());
        assert_eq!(parts[1], bin.mean_pred.to_string());
        assert_eq!(parts[2].parse::<f64>().ok(), bin.obs_rate);
        assert_eq!(parts[4], bin.n_eff.to_string());
    }
}
