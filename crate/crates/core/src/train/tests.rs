use std::path::Path;

use crate::data::{gen_synthetic, vocab_from_samples, Sample, SyntheticSpec, Vocab};
use crate::error::Error;
use crate::model::{init_model, load_checkpoint, ModelConfig, TransformerModel};
use crate::objectives::{Mode, Objective};
use crate::stats::{rank_sweep_table, threshold_sweep_table};
use crate::train::sweep::{rank_points, threshold_points, trajectory_points};
use crate::train::{
    sweep, train, AdamWConfig, LoraConfig, RunLog, SweepAxis, SweepInit, TrainConfig, TrainIo,
};

fn corpus(n: usize, seed: u64) -> (Vec<Sample>, Vocab) {
    let spec = SyntheticSpec {
        samples: n,
        templates: 2,
        max_arg: 4,
        id_prefix: "t".into(),
    };
    let (samples, _) = gen_synthetic(&spec, seed).unwrap();
    let vocab = vocab_from_samples(&samples, 512).unwrap();
    (samples, vocab)
}

fn tiny_model(vocab: &Vocab, seed: u64) -> TransformerModel {
    init_model(&ModelConfig {
        vocab_size: vocab.size(),
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 64,
        seed,
    })
    .unwrap()
}

fn quick_config(objective: Objective) -> TrainConfig {
    TrainConfig {
        objective,
        learning_rate: 0.01,
        batch_size: 2,
        grad_accum: 2,
        epochs: 1,
        grad_clip: Some(1.0),
        seed: 7,
        optimizer: AdamWConfig::default(),
        lora: None,
        eval_every_steps: 1000,
        max_len: 64,
    }
}

fn param_bits(model: &TransformerModel) -> Vec<(String, Vec<u64>)> {
    model
        .params
        .iter()
        .map(|p| {
            (
                p.name.clone(),
                p.value.data().iter().map(|v| v.to_bits()).collect(),
            )
        })
        .collect()
}

fn run(config: &TrainConfig, samples: &[Sample], vocab: &Vocab, seed: u64) -> (TransformerModel, RunLog) {
    let mut model = tiny_model(vocab, seed);
    let log = train(config, &mut model, samples, vocab, TrainIo::default()).unwrap();
    (model, log)
}

#[test]
fn zero_learning_rate_leaves_every_parameter_bit_identical() {
    let (samples, vocab) = corpus(8, 1);
    let before = param_bits(&tiny_model(&vocab, 3));
    let mut config = quick_config(Objective::StandardSft);
    config.learning_rate = 0.0;
    let (model, log) = run(&config, &samples, &vocab, 3);
    assert!(log.optimizer_steps > 0);
    assert_eq!(param_bits(&model), before);
}

#[test]
fn profit_at_tau_zero_matches_standard_sft_step_for_step() {
    let (samples, vocab) = corpus(12, 2);
    let (sft_model, sft_log) = run(&quick_config(Objective::StandardSft), &samples, &vocab, 5);
    let profit = Objective::Profit {
        tau: 0.0,
        mode: Mode::Above,
        unmasked_norm: false,
    };
    let (profit_model, profit_log) = run(&quick_config(profit), &samples, &vocab, 5);
    assert_eq!(sft_log.steps.len(), profit_log.steps.len());
    for (a, b) in sft_log.steps.iter().zip(&profit_log.steps) {
        assert_eq!(a.loss.to_bits(), b.loss.to_bits(), "step {}", a.step);
        assert_eq!(a.grad_norm.to_bits(), b.grad_norm.to_bits());
    }
    assert_eq!(param_bits(&sft_model), param_bits(&profit_model));
}

#[test]
fn same_seed_reproduces_the_run_log_byte_for_byte() {
    let (samples, vocab) = corpus(10, 3);
    let config = quick_config(Objective::Profit {
        tau: 0.1,
        mode: Mode::Above,
        unmasked_norm: false,
    });
    let (_, log_a) = run(&config, &samples, &vocab, 11);
    let (_, log_b) = run(&config, &samples, &vocab, 11);
    assert_eq!(log_a.steps_csv(), log_b.steps_csv());
    assert_eq!(log_a.evals_csv(), log_b.evals_csv());
}

#[test]
fn impossible_mask_skips_every_window_and_the_accounting_balances() {
    let (samples, vocab) = corpus(9, 4);
    let before = param_bits(&tiny_model(&vocab, 6));
    let config = quick_config(Objective::Profit {
        tau: 1.0,
        mode: Mode::Above,
        unmasked_norm: false,
    });
    let (model, log) = run(&config, &samples, &vocab, 6);
    assert!(log.windows > 0);
    assert_eq!(log.optimizer_steps, 0);
    assert_eq!(log.skipped_windows, log.windows);
    assert_eq!(log.optimizer_steps + log.skipped_windows, log.windows);
    assert!(log.steps.is_empty());
    assert_eq!(param_bits(&model), before);
}

#[test]
fn window_accounting_balances_under_a_partial_mask() {
    let (samples, vocab) = corpus(16, 5);
    let config = quick_config(Objective::Profit {
        tau: 0.1,
        mode: Mode::Below,
        unmasked_norm: false,
    });
    let (_, log) = run(&config, &samples, &vocab, 6);
    assert_eq!(log.optimizer_steps + log.skipped_windows, log.windows);
    assert_eq!(log.steps.len(), log.optimizer_steps);
}

#[test]
fn recorded_gradient_norms_respect_the_clip_cap() {
    let (samples, vocab) = corpus(12, 6);
    let mut config = quick_config(Objective::StandardSft);
    config.grad_clip = Some(0.05);
    let (_, log) = run(&config, &samples, &vocab, 8);
    assert!(!log.steps.is_empty());
    for s in &log.steps {
        assert!(
            s.grad_norm <= 0.05 + 1e-9,
            "step {} grad norm {} above cap",
            s.step,
            s.grad_norm
        );
    }
}

#[test]
fn unclipped_norms_exceed_the_tight_cap_somewhere() {
    let (samples, vocab) = corpus(12, 6);
    let mut config = quick_config(Objective::StandardSft);
    config.grad_clip = None;
    let (_, log) = run(&config, &samples, &vocab, 8);
    assert!(log.steps.iter().any(|s| s.grad_norm > 0.05));
}

#[test]
fn runaway_learning_rate_reports_divergence() {
    let (samples, vocab) = corpus(12, 7);
    let mut config = quick_config(Objective::StandardSft);
    config.learning_rate = 1e6;
    config.grad_clip = None;
    config.epochs = 40;
    let mut model = tiny_model(&vocab, 9);
    let err = train(&config, &mut model, &samples, &vocab, TrainIo::default()).unwrap_err();
    match err {
        Error::Diverged { .. } => {}
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn epoch_checkpoints_restore_the_final_parameters() {
    let (samples, vocab) = corpus(8, 8);
    let dir = tempfile::tempdir().unwrap();
    let config = quick_config(Objective::StandardSft);
    let mut model = tiny_model(&vocab, 10);
    let io = TrainIo {
        checkpoint_dir: Some(dir.path()),
        ..TrainIo::default()
    };
    train(&config, &mut model, &samples, &vocab, io).unwrap();
    let (restored, meta) = load_checkpoint(&dir.path().join("checkpoint_epoch1.pfl")).unwrap();
    assert_eq!(meta.objective, "standard_sft");
    // Arrays are stored as f32, so the roundtrip carries f32 precision.
    for (p, r) in model.params.iter().zip(&restored.params) {
        assert_eq!(p.name, r.name);
        for (a, b) in p.value.data().iter().zip(r.value.data()) {
            assert!(
                (a - b).abs() <= a.abs().max(1.0) * 1e-6,
                "{}: {a} vs {b}",
                p.name
            );
        }
    }
}

#[test]
fn lora_training_freezes_every_base_parameter() {
    let (samples, vocab) = corpus(8, 9);
    let mut config = quick_config(Objective::StandardSft);
    config.lora = Some(LoraConfig {
        targets: Vec::new(),
        r: 2,
        alpha: 0.0,
    });
    let before = param_bits(&tiny_model(&vocab, 12));
    let mut model = tiny_model(&vocab, 12);
    let log = train(&config, &mut model, &samples, &vocab, TrainIo::default()).unwrap();
    assert!(log.optimizer_steps > 0);
    assert_eq!(param_bits(&model), before);
    let merged = model.merge_lora().unwrap();
    assert_ne!(param_bits(&merged), before);
}

#[test]
fn diagnostics_sink_receives_a_row_per_supervised_token() {
    let (samples, vocab) = corpus(4, 10);
    let config = quick_config(Objective::StandardSft);
    let mut model = tiny_model(&vocab, 13);
    let mut sink = Vec::new();
    let io = TrainIo {
        diagnostics: Some(&mut sink),
        ..TrainIo::default()
    };
    train(&config, &mut model, &samples, &vocab, io).unwrap();
    let text = String::from_utf8(sink).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), crate::objectives::DIAGNOSTICS_HEADER);
    let supervised: usize = crate::data::collate(&samples, &vocab, 64)
        .unwrap()
        .supervised_count();
    assert_eq!(lines.count(), supervised);
}

#[test]
fn heldout_evaluations_run_at_the_requested_cadence() {
    let (samples, vocab) = corpus(16, 11);
    let mut config = quick_config(Objective::StandardSft);
    config.eval_every_steps = 2;
    let mut model = tiny_model(&vocab, 14);
    let io = TrainIo {
        heldout: Some(&samples[..4]),
        ..TrainIo::default()
    };
    let log = train(&config, &mut model, &samples, &vocab, io).unwrap();
    let periodic = log.evals.iter().filter(|e| e.step % 2 == 0).count();
    assert!(periodic >= log.optimizer_steps / 2);
    let last = log.evals.last().unwrap();
    assert_eq!(last.step, log.optimizer_steps);
}

#[test]
fn kv_and_json_configs_parse_to_the_same_value() {
    let kv = "\
# threshold run
objective = profit
tau = 0.3
mode = below
learning_rate = 0.005
grad_accum = 2
grad_clip = none
seed = 42
lora_r = 4
";
    let from_kv = TrainConfig::parse(kv).unwrap();
    let json = serde_json::json!({
        "objective": {"type": "profit", "tau": 0.3, "mode": "below"},
        "learning_rate": 0.005,
        "grad_accum": 2,
        "grad_clip": null,
        "seed": 42,
        "lora": {"r": 4}
    });
    let from_json = TrainConfig::parse(&json.to_string()).unwrap();
    assert_eq!(from_kv, from_json);
    assert_eq!(from_kv.grad_clip, None);
    assert_eq!(from_kv.lora.as_ref().unwrap().effective_alpha(), 8.0);
}

#[test]
fn multi_ref_kv_round_trip_carries_the_inner_objective() {
    let config = TrainConfig::parse("objective = multi_ref\nk = 3\ninner = dft\n").unwrap();
    assert_eq!(
        config.objective,
        Objective::MultiRef {
            k: 3,
            inner: Box::new(Objective::Dft),
        }
    );
}

#[test]
fn bad_configs_are_rejected_with_a_config_error() {
    for text in [
        "objective = profit\ntau = 1.5\n",
        "objectives = profit\n",
        "learning_rate = fast\n",
        "grad_accum = 0\n",
        "mode = sideways\n",
        "objective = multi_ref\n",
    ] {
        let result = TrainConfig::parse(text).and_then(|c| c.validate());
        match result {
            Err(Error::Config(_)) => {}
            other => panic!("expected a config error for {text:?}, got {other:?}"),
        }
    }
    match TrainConfig::parse("{\"objective\": 3}") {
        Err(Error::Config(_)) => {}
        other => panic!("expected a config error, got {other:?}"),
    }
}

#[test]
fn threshold_sweep_covers_the_grid_and_fractions_shrink_with_tau() {
    let (samples, vocab) = corpus(12, 12);
    let model_config = ModelConfig {
        vocab_size: vocab.size(),
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 64,
        seed: 15,
    };
    let base = quick_config(Objective::StandardSft);
    // Near-uniform initial softmax puts label probabilities around 1/V,
    // so this midpoint keeps some tokens and drops others.
    let mid = 1.0 / vocab.size() as f64;
    let taus = vec![0.0, mid];
    let axis = SweepAxis::Threshold {
        taus: taus.clone(),
        modes: vec![Mode::Above],
    };
    let runs = sweep(&axis, &base, SweepInit::Fresh(&model_config), &samples, &samples[..4], &vocab).unwrap();
    assert_eq!(runs.len(), 2);
    assert!(runs.iter().all(|r| r.error.is_none()));
    let points = threshold_points(&runs).unwrap();
    let grid: Vec<(f64, Mode)> = taus.iter().map(|&t| (t, Mode::Above)).collect();
    let csv = threshold_sweep_table(&points, &grid).unwrap();
    assert_eq!(csv.lines().count(), 3);
    let frac = |tau: f64| {
        points
            .iter()
            .find(|p| p.tau == tau)
            .unwrap()
            .supervised_fraction
    };
    assert_eq!(frac(0.0), 1.0);
    assert!(frac(mid) > 0.0 && frac(mid) < 1.0, "{}", frac(mid));
}

#[test]
fn rank_sweep_records_an_oversized_rank_as_a_point_failure() {
    let (samples, vocab) = corpus(8, 13);
    let model_config = ModelConfig {
        vocab_size: vocab.size(),
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 64,
        seed: 16,
    };
    let base = quick_config(Objective::StandardSft);
    let axis = SweepAxis::Rank {
        objectives: vec![Objective::StandardSft],
        ranks: vec![2, 64],
    };
    let runs = sweep(&axis, &base, SweepInit::Fresh(&model_config), &samples, &samples[..2], &vocab).unwrap();
    assert_eq!(runs.len(), 3);
    let failed: Vec<&str> = runs
        .iter()
        .filter(|r| r.error.is_some())
        .map(|r| r.label.as_str())
        .collect();
    assert_eq!(failed, ["standard_sft@64"]);
    let err = rank_points(&runs).unwrap_err();
    assert!(err.to_string().contains("standard_sft@64"), "{err}");
    let ok_runs: Vec<_> = runs.iter().filter(|r| r.error.is_none()).cloned().collect();
    let points = rank_points(&ok_runs).unwrap();
    let csv = rank_sweep_table(&points, &["standard_sft".to_string()], &[2]).unwrap();
    assert!(csv.contains("standard_sft,full"));
}

#[test]
fn epoch_sweep_yields_one_trajectory_point_per_epoch() {
    let (samples, vocab) = corpus(8, 14);
    let model_config = ModelConfig {
        vocab_size: vocab.size(),
        d_model: 8,
        n_layers: 1,
        n_heads: 2,
        d_ff: 16,
        max_seq_len: 64,
        seed: 17,
    };
    let base = quick_config(Objective::StandardSft);
    let axis = SweepAxis::Epochs {
        objectives: vec![Objective::StandardSft, Objective::Dft],
        max: 2,
    };
    let runs = sweep(&axis, &base, SweepInit::Fresh(&model_config), &samples, &samples[..2], &vocab).unwrap();
    let points = trajectory_points(&runs).unwrap();
    assert_eq!(points.len(), 4);
    for objective in ["standard_sft", "dft"] {
        for epoch in 1..=2 {
            assert!(points
                .iter()
                .any(|p| p.objective == objective && p.epoch == epoch));
        }
    }
}

#[test]
fn warm_sweep_points_share_the_starting_model() {
    let (samples, vocab) = corpus(8, 16);
    let warm = tiny_model(&vocab, 19);
    let mut base = quick_config(Objective::StandardSft);
    base.learning_rate = 0.0;
    let axis = SweepAxis::Epochs {
        objectives: vec![Objective::StandardSft, Objective::Dft],
        max: 1,
    };
    let runs = sweep(
        &axis,
        &base,
        SweepInit::Warm(&warm),
        &samples,
        &samples[..2],
        &vocab,
    )
    .unwrap();
    // lr = 0 leaves both points at the shared warm model, so their
    // held-out metrics must agree bitwise.
    let m0 = runs[0].final_metrics().unwrap();
    let m1 = runs[1].final_metrics().unwrap();
    assert_eq!(m0.token_accuracy.to_bits(), m1.token_accuracy.to_bits());
    assert_eq!(m0.perplexity.to_bits(), m1.perplexity.to_bits());
}

#[test]
fn lora_suffix_targets_resolve_against_full_parameter_names() {
    let (samples, vocab) = corpus(6, 15);
    let mut config = quick_config(Objective::StandardSft);
    config.lora = Some(LoraConfig {
        targets: vec!["attn.wv".into()],
        r: 2,
        alpha: 0.0,
    });
    let mut model = tiny_model(&vocab, 18);
    train(&config, &mut model, &samples, &vocab, TrainIo::default()).unwrap();
    let names = model.trainable_names();
    assert_eq!(names, ["lora.layer0.attn.wv.a", "lora.layer0.attn.wv.b"]);

    config.lora = Some(LoraConfig {
        targets: vec!["attn.nope".into()],
        r: 2,
        alpha: 0.0,
    });
    let mut model = tiny_model(&vocab, 18);
    let err = train(&config, &mut model, &samples, &vocab, TrainIo::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)), "{err:?}");
}

#[test]
fn config_file_round_trips_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.json");
    let config = quick_config(Objective::EntropyGate { rho: 0.25 });
    std::fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    let loaded = TrainConfig::load(Path::new(&path)).unwrap();
    assert_eq!(loaded, config);
}
