//! Distributional and determinism checks for the synthetic cohort generator.

use survgrid_core::datamodel::emit_csv;
use survgrid_core::synthgen::{
    generate, read_ground_truth_csv, true_cif, write_ground_truth_csv, SynthConfig,
};

fn tiny_config(n: usize, seed: u64) -> SynthConfig {
    SynthConfig::default_two_cause(n, seed)
}

#[test]
fn invalid_configs_are_rejected() {
    let mut cfg = tiny_config(10, 1);
    cfg.base_hazards = vec![0.5, 0.5]; // with 3x drivers the worst case tops 1
    assert!(cfg.validate().is_err());

    let mut cfg = tiny_config(10, 1);
    cfg.effect_multipliers[2][0] = 2.0; // noise features must stay inert
    assert!(cfg.validate().is_err());

    let mut cfg = tiny_config(10, 1);
    cfg.censor_hazard = 1.0;
    assert!(cfg.validate().is_err());

    let mut cfg = tiny_config(10, 1);
    cfg.missing_rate = vec![0.0; 3];
    assert!(cfg.validate().is_err());

    let mut cfg = tiny_config(10, 1);
    cfg.n_features = 1; // fewer features than causes
    assert!(cfg.validate().is_err());
}

#[test]
fn zero_hazards_censor_administratively_at_last_interval() {
    let mut cfg = tiny_config(50, 3);
    cfg.base_hazards = vec![1e-12, 1e-12];
    cfg.censor_hazard = 0.0;
    let (cohort, _) = generate(&cfg, cfg.seed).unwrap();
    for s in &cohort.subjects {
        assert_eq!(s.event_interval, cfg.n_intervals);
        assert_eq!(s.event_cause, 0);
    }
}

#[test]
fn single_cause_mean_event_interval_is_geometric() {
    // K=1, constant hazard 0.5, no censoring: E[T] = 2
    let cfg = SynthConfig {
        n_subjects: 10_000,
        n_features: 2,
        n_causes: 1,
        n_intervals: 200,
        base_hazards: vec![0.5],
        effect_multipliers: vec![vec![1.0], vec![1.0]],
        missing_rate: vec![0.0, 0.0],
        censor_hazard: 0.0,
        driver_prevalence: vec![0.5],
        driver_flip_prob: 0.0,
        seed: 11,
    };
    let (cohort, _) = generate(&cfg, cfg.seed).unwrap();
    let n = cohort.subjects.len() as f64;
    let mean: f64 = cohort
        .subjects
        .iter()
        .map(|s| s.event_interval as f64)
        .sum::<f64>()
        / n;
    // geometric(0.5): mean 2, variance (1-p)/p^2 = 2
    let se = (2.0_f64 / n).sqrt();
    assert!(
        (mean - 2.0).abs() < 3.0 * se,
        "mean event interval {mean} vs 2 +- {}",
        3.0 * se
    );
}

#[test]
fn cause_mix_matches_hazard_ratio() {
    // constant hazards (0.2, 0.3): P(cause 2 | event) = 0.6
    let cfg = SynthConfig {
        n_subjects: 10_000,
        n_features: 2,
        n_causes: 2,
        n_intervals: 200,
        base_hazards: vec![0.2, 0.3],
        effect_multipliers: vec![vec![1.0, 1.0], vec![1.0, 1.0]],
        missing_rate: vec![0.0, 0.0],
        censor_hazard: 0.0,
        driver_prevalence: vec![0.5, 0.5],
        driver_flip_prob: 0.0,
        seed: 12,
    };
    let (cohort, _) = generate(&cfg, cfg.seed).unwrap();
    let events = cohort
        .subjects
        .iter()
        .filter(|s| s.event_cause != 0)
        .count() as f64;
    let cause2 = cohort
        .subjects
        .iter()
        .filter(|s| s.event_cause == 2)
        .count() as f64;
    let p = cause2 / events;
    let se = (0.6 * 0.4 / events).sqrt();
    assert!((p - 0.6).abs() < 3.0 * se, "cause-2 share {p}");
}

#[test]
fn true_cif_closed_forms() {
    // lambda = 0.5, K=1: F_1 = 0.5, F_2 = 0.75
    let cfg = SynthConfig {
        n_subjects: 1,
        n_features: 2,
        n_causes: 1,
        n_intervals: 4,
        base_hazards: vec![0.5],
        effect_multipliers: vec![vec![1.0], vec![1.0]],
        missing_rate: vec![0.0, 0.0],
        censor_hazard: 0.0,
        driver_prevalence: vec![0.5],
        driver_flip_prob: 0.0,
        seed: 0,
    };
    let f = true_cif(&cfg, &[0.0, 0.0]).unwrap();
    assert!((f.data[0] - 0.5).abs() < 1e-15);
    assert!((f.data[1] - 0.75).abs() < 1e-15);

    // conservation at the last interval: F_J^1 + F_J^2 + S_J = 1
    let cfg2 = tiny_config(1, 0);
    let f2 = true_cif(&cfg2, &[1.0, 0.0, 0.0, 0.0]).unwrap();
    let j = cfg2.n_intervals;
    let total_f: f64 = f2.data[(j - 1) * 2..j * 2].iter().sum();
    // reconstruct S_J from the per-interval hazards
    let h = cfg2.hazards_for(&[1, 0]);
    let s_j = (1.0 - h.iter().sum::<f64>()).powi(j as i32);
    assert!((total_f + s_j - 1.0).abs() < 1e-12);
}

#[test]
fn true_cif_zero_hazard_limit() {
    let mut cfg = tiny_config(1, 0);
    cfg.base_hazards = vec![1e-300, 1e-300];
    let f = true_cif(&cfg, &[0.0, 0.0, 0.0, 0.0]).unwrap();
    assert!(f.data.iter().all(|&v| v < 1e-290));
}

#[test]
fn empirical_incidence_tracks_true_cif() {
    // no censoring so raw incidence is an unbiased CIF estimate
    let mut cfg = tiny_config(50_000, 21);
    cfg.censor_hazard = 0.0;
    cfg.n_intervals = 20;
    let (cohort, truth) = generate(&cfg, cfg.seed).unwrap();
    let n = cohort.subjects.len();
    let k = cfg.n_causes;
    let j_max = cfg.n_intervals;
    let mut worst = 0.0_f64;
    for j in 1..=j_max {
        for c in 1..=k {
            let empirical = cohort
                .subjects
                .iter()
                .filter(|s| s.event_cause == c && s.event_interval <= j)
                .count() as f64
                / n as f64;
            let expected: f64 = truth
                .subjects
                .iter()
                .map(|t| t.cif.data[(j - 1) * k + (c - 1)])
                .sum::<f64>()
                / n as f64;
            worst = worst.max((empirical - expected).abs());
        }
    }
    assert!(worst < 0.01, "max CIF deviation {worst}");
}

#[test]
fn ground_truth_satisfies_conservation_exactly() {
    let (_, truth) = generate(&tiny_config(200, 5), 5).unwrap();
    for t in &truth.subjects {
        let j = t.cif.shape[0];
        let k = t.cif.shape[1];
        for row in 0..j {
            let f_sum: f64 = t.cif.data[row * k..(row + 1) * k].iter().sum();
            assert!((f_sum + t.survival[row] - 1.0).abs() < 1e-12);
            if row > 0 {
                assert!(t.survival[row] <= t.survival[row - 1] + 1e-15);
                for c in 0..k {
                    assert!(t.cif.data[row * k + c] >= t.cif.data[(row - 1) * k + c] - 1e-15);
                }
            }
        }
    }
}

#[test]
fn same_seed_gives_byte_identical_output() {
    let dir = std::env::temp_dir().join("survgrid_synth_determinism");
    std::fs::create_dir_all(&dir).unwrap();
    let mut cfg = tiny_config(300, 77);
    cfg.missing_rate = vec![0.3; 4];
    cfg.driver_flip_prob = 0.1;

    let mut outputs = Vec::new();
    for run in 0..2 {
        let (cohort, truth) = generate(&cfg, cfg.seed).unwrap();
        let obs = dir.join(format!("obs_{run}.csv"));
        let out = dir.join(format!("out_{run}.csv"));
        let gt = dir.join(format!("gt_{run}.csv"));
        emit_csv(&cohort, &obs, &out).unwrap();
        write_ground_truth_csv(&gt, &cohort, &truth).unwrap();
        outputs.push((
            std::fs::read(&obs).unwrap(),
            std::fs::read(&out).unwrap(),
            std::fs::read(&gt).unwrap(),
        ));
    }
    assert_eq!(outputs[0].0, outputs[1].0);
    assert_eq!(outputs[0].1, outputs[1].1);
    assert_eq!(outputs[0].2, outputs[1].2);

    // different seed actually changes the draw
    let (other, _) = generate(&cfg, cfg.seed + 1).unwrap();
    let (base, _) = generate(&cfg, cfg.seed).unwrap();
    assert_ne!(base, other);
}

#[test]
fn ground_truth_csv_round_trips() {
    let dir = std::env::temp_dir().join("survgrid_synth_gt_roundtrip");
    std::fs::create_dir_all(&dir).unwrap();
    let (cohort, truth) = generate(&tiny_config(5, 9), 9).unwrap();
    let path = dir.join("ground_truth.csv");
    write_ground_truth_csv(&path, &cohort, &truth).unwrap();
    let back = read_ground_truth_csv(&path).unwrap();
    assert_eq!(back.len(), cohort.subjects.len());
    for ((id, grid), (s, t)) in back.iter().zip(cohort.subjects.iter().zip(&truth.subjects)) {
        assert_eq!(id, &s.id);
        assert_eq!(grid, &t.cif);
    }
}

#[test]
fn baseline_is_always_observed_and_missingness_thins_the_rest() {
    let mut cfg = tiny_config(500, 13);
    cfg.missing_rate = vec![0.5; 4];
    let (cohort, _) = generate(&cfg, cfg.seed).unwrap();
    let mut post_baseline_cells = 0usize;
    let mut post_baseline_present = 0usize;
    for s in &cohort.subjects {
        for f in 0..4 {
            assert!(
                s.obs[f].contains_key(&1),
                "baseline cell missing for {} feature {f}",
                s.id
            );
            for j in 2..=s.event_interval {
                post_baseline_cells += 1;
                if s.obs[f].contains_key(&j) {
                    post_baseline_present += 1;
                }
            }
        }
    }
    let rate = post_baseline_present as f64 / post_baseline_cells as f64;
    let se = (0.25_f64 / post_baseline_cells as f64).sqrt();
    assert!(
        (rate - 0.5).abs() < 4.0 * se,
        "post-baseline observation rate {rate}"
    );
}

#[test]
fn driver_flips_make_observed_states_change() {
    let mut cfg = tiny_config(200, 17);
    cfg.driver_flip_prob = 0.3;
    let (cohort, _) = generate(&cfg, cfg.seed).unwrap();
    let changed = cohort.subjects.iter().any(|s| {
        let vals: Vec<f64> = s.obs[0].values().cloned().collect();
        vals.windows(2).any(|w| w[0] != w[1])
    });
    assert!(changed, "no driver state changes observed with flip prob 0.3");
}
