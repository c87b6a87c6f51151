//! Tests for model assembly, ablation wiring, and checkpointing.

use survgrid_core::datamodel::{landmark_at, make_batch, Batch, Cohort, LandmarkedSubject};
use survgrid_core::model::{Model, ModelConfig};
use survgrid_core::synthgen::{generate, SynthConfig};

fn small_config() -> ModelConfig {
    ModelConfig {
        d_emb: 8,
        n_heads: 2,
        n_blocks: 1,
        horizon: 5,
        ..ModelConfig::default()
    }
}

fn synth_cohort(n: usize, seed: u64) -> Cohort {
    let config = SynthConfig::default_two_cause(n, seed);
    generate(&config, seed).unwrap().0
}

fn batch_at_tau_one(cohort: &Cohort, horizon: usize, max_b: usize) -> (Batch, Vec<String>) {
    let mut items: Vec<LandmarkedSubject> = Vec::new();
    let mut ids = Vec::new();
    for s in &cohort.subjects {
        if let Some(lm) = landmark_at(s, &cohort.schema, 1, horizon, 2).unwrap() {
            items.push(lm);
            ids.push(s.id.clone());
            if items.len() == max_b {
                break;
            }
        }
    }
    (make_batch(&items).unwrap(), ids)
}

#[test]
fn forward_produces_logit_and_context_shapes() {
    let cohort = synth_cohort(12, 1);
    let config = small_config();
    let model = Model::init(cohort.schema.clone(), 2, config, 7).unwrap();
    let (batch, _) = batch_at_tau_one(&cohort, 5, 6);
    let mut tape = survgrid_core::diffcore::Tape::new();
    let out = model.forward(&mut tape, &batch).unwrap();
    assert_eq!(tape.val(out.logits).shape, vec![batch.b(), 5, 2]);
    assert_eq!(tape.val(out.context).shape, vec![batch.b(), 4 * 8]);
    assert!(tape.val(out.logits).all_finite());
}

#[test]
fn non_factorized_variant_keeps_output_contract() {
    let cohort = synth_cohort(12, 2);
    let config = ModelConfig {
        factorized: false,
        ..small_config()
    };
    let model = Model::init(cohort.schema.clone(), 2, config, 7).unwrap();
    assert!(model.encoder.blocks[0].cov.is_none());
    assert_eq!(model.encoder.d_model, 4 * 8);
    let (batch, _) = batch_at_tau_one(&cohort, 5, 4);
    let mut tape = survgrid_core::diffcore::Tape::new();
    let out = model.forward(&mut tape, &batch).unwrap();
    assert_eq!(tape.val(out.logits).shape, vec![batch.b(), 5, 2]);
    assert_eq!(tape.val(out.context).shape, vec![batch.b(), 4 * 8]);
}

#[test]
fn ablation_flags_change_parameter_counts() {
    let cohort = synth_cohort(4, 3);
    let schema = cohort.schema;
    let count = |factorized: bool, time_decay: bool| {
        let config = ModelConfig {
            factorized,
            time_decay,
            ..small_config()
        };
        Model::init(schema.clone(), 2, config, 0).unwrap().store.n_scalars()
    };
    let full = count(true, true);
    let no_fa = count(false, true);
    let no_cet = count(true, false);
    let neither = count(false, false);
    // Dropping staleness decay removes one scalar per feature.
    assert_eq!(full, no_cet + 4);
    assert_eq!(no_fa, neither + 4);
    // The folded-width variant has a different (larger) encoder.
    assert_ne!(full, no_fa);
    let mut all = [full, no_fa, no_cet, neither];
    all.sort();
    assert!(all.windows(2).all(|w| w[0] != w[1]), "counts collide: {all:?}");
}

#[test]
fn time_decay_flag_controls_decay_parameters() {
    let cohort = synth_cohort(4, 4);
    let with = Model::init(cohort.schema.clone(), 2, small_config(), 0).unwrap();
    assert!(with.store.find("embed.driver_1.decay").is_some());
    let without = Model::init(
        cohort.schema.clone(),
        2,
        ModelConfig {
            time_decay: false,
            ..small_config()
        },
        0,
    )
    .unwrap();
    assert!(without.store.find("embed.driver_1.decay").is_none());
}

#[test]
fn predict_grids_yield_valid_distributions() {
    let cohort = synth_cohort(10, 5);
    let model = Model::init(cohort.schema.clone(), 2, small_config(), 9).unwrap();
    let (batch, ids) = batch_at_tau_one(&cohort, 5, 5);
    let grids = model.predict_grids(&batch, &ids).unwrap();
    assert_eq!(grids.len(), ids.len());
    for (id, grid) in &grids {
        assert!(!id.is_empty());
        assert_eq!(grid.h(), 5);
        assert_eq!(grid.k(), 2);
        grid.check().unwrap();
    }
}

#[test]
fn head_bias_initialization_matches_marginal_logits() {
    let cohort = synth_cohort(6, 6);
    let mut model = Model::init(cohort.schema.clone(), 2, small_config(), 0).unwrap();
    model.set_head_bias(&[0.1, 0.2]).unwrap();
    let b2_1 = model.store.get(model.heads.heads[0].b2).value.data[0];
    let b2_2 = model.store.get(model.heads.heads[1].b2).value.data[0];
    assert!((b2_1 - (0.1f64 / 0.7).ln()).abs() < 1e-15);
    assert!((b2_2 - (0.2f64 / 0.7).ln()).abs() < 1e-15);
    assert!(model.set_head_bias(&[0.5, 0.5]).is_err());
    assert!(model.set_head_bias(&[0.0, 0.1]).is_err());
    assert!(model.set_head_bias(&[0.1]).is_err());
}

#[test]
fn checkpoint_round_trips_bitwise() {
    let cohort = synth_cohort(8, 7);
    let mut schema = cohort.schema.clone();
    let idx: Vec<usize> = (0..cohort.subjects.len()).collect();
    schema.fit_standardization(&cohort, &idx);
    let config = ModelConfig {
        n_blocks: 2,
        ..small_config()
    };
    let model = Model::init(schema, 2, config, 13).unwrap();

    let dir = std::env::temp_dir().join("survgrid_model_tests");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("model.ckpt");
    model.save_checkpoint(&path).unwrap();
    let loaded = Model::load_checkpoint(&path).unwrap();

    assert_eq!(model.config, loaded.config);
    assert_eq!(model.k, loaded.k);
    assert_eq!(model.schema, loaded.schema);
    assert_eq!(model.store.len(), loaded.store.len());
    for (a, b) in model.store.iter().zip(loaded.store.iter()) {
        assert_eq!(a.name, b.name);
        assert_eq!(a.value.shape, b.value.shape);
        assert_eq!(a.value.data, b.value.data, "tensor {} drifted", a.name);
    }

    // The restored model must predict identically.
    let (batch, ids) = batch_at_tau_one(&cohort, 5, 4);
    let g1 = model.predict_grids(&batch, &ids).unwrap();
    let g2 = loaded.predict_grids(&batch, &ids).unwrap();
    for ((_, a), (_, b)) in g1.iter().zip(&g2) {
        assert_eq!(a.cif.data, b.cif.data);
    }
}

#[test]
fn checkpoint_reader_rejects_foreign_files() {
    let dir = std::env::temp_dir().join("survgrid_model_tests");
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("bogus.ckpt");
    std::fs::write(&path, "not a checkpoint\n").unwrap();
    assert!(Model::load_checkpoint(&path).is_err());

    let truncated = dir.join("truncated.ckpt");
    std::fs::write(
        &truncated,
        "survgrid-checkpoint v1\nk 2\nfeature a,numeric,0,1\nparam embed.a.w1 1 8\n",
    )
    .unwrap();
    assert!(Model::load_checkpoint(&truncated).is_err());
}
