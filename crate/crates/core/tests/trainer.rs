//! Optimizer oracles, training-loop behavior, checkpoint round trips, and
//! bit-exact resume.

use std::collections::HashMap;

use hseq_core::model::{ModelConfig, ModelParams, Precision};
use hseq_core::numerics::Tensor;
use hseq_core::trainer::{
    ablation_adaln, adamw_step, run_stages, train_step, AdamwConfig, Checkpoint, MetricLog,
    MetricRecord, Moments, StageConfig, StepSettings, TrainConfig, TrainSchedule, Trainer,
    CSV_HEADER, FORMAT_VERSION, MAGIC,
};
use hseq_core::worldgen::{
    build_dataset, vocab, Codec, DatasetConfig, LatentBlock, Sample, ShapeFamily, ShapeSpec,
};
use hseq_core::layout::{Modality, Mode, SequenceLayout};
use hseq_core::flow::FlowSchedule;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tiny_model() -> ModelConfig {
    ModelConfig {
        d_model: 16,
        n_layers: 2,
        n_heads: 2,
        n_kv_heads: 1,
        d_ff: 24,
        vocab_size: vocab::SIZE,
        latent_dim: 64,
        rope_base: 10_000.0,
        adaln_enabled: true,
        precision: Precision::F32,
    }
}

fn tiny_dataset() -> DatasetConfig {
    DatasetConfig {
        families: ShapeFamily::ALL.to_vec(),
        samples_per_family: 4,
        points_per_shape: 8,
        block_size: 4,
        seed: 11,
    }
}

fn tiny_config() -> TrainConfig {
    TrainConfig {
        model: tiny_model(),
        schedule: TrainSchedule {
            stages: vec![
                StageConfig { resolution: 8, dropout_p: 0.8, lr: 1e-3, steps: 4 },
                StageConfig { resolution: 16, dropout_p: 0.2, lr: 5e-4, steps: 4 },
            ],
            seed: 7,
            batch_size: 2,
            ..TrainSchedule::default()
        },
        dataset: tiny_dataset(),
    }
}

fn params_bits(p: &ModelParams<f32>) -> Vec<u32> {
    let mut out = Vec::new();
    p.visit(|_, t| out.extend(t.data().iter().map(|x| x.to_bits())));
    out
}

fn default_settings(lr: f64, dropout_p: f64, caption_fraction: f64) -> StepSettings {
    StepSettings {
        lr,
        dropout_p,
        caption_fraction,
        flow: FlowSchedule::default(),
        optimizer: AdamwConfig::default(),
        clip_norm: None,
    }
}

// ---------------------------------------------------------------- optimizer

#[test]
fn zero_gradients_with_zero_decay_change_nothing() {
    let cfg = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
    let before = params_bits(&params);
    let mut moments = Moments::zeros_like(&params);
    let opt = AdamwConfig { weight_decay: 0.0, ..AdamwConfig::default() };
    adamw_step(&mut params, &HashMap::new(), &mut moments, 1e-3, &opt).unwrap();
    adamw_step(&mut params, &HashMap::new(), &mut moments, 1e-3, &opt).unwrap();
    assert_eq!(params_bits(&params), before);
    assert_eq!(moments.step(), 2);
}

/// With a constant all-ones gradient, bias correction makes every step
/// move each element by exactly lr / (1 + eps), independent of step count.
#[test]
fn constant_gradient_matches_the_closed_form_update() {
    let cfg = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut params = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
    let reference = params.named_tensors();
    let (target_name, target_before) = reference[0].clone();

    let mut grads = HashMap::new();
    grads.insert(target_name.clone(), Tensor::full(target_before.shape(), 1.0f32));
    let mut moments = Moments::zeros_like(&params);
    let opt = AdamwConfig { weight_decay: 0.0, ..AdamwConfig::default() };
    let lr = 0.1;
    let steps = 3;
    for _ in 0..steps {
        adamw_step(&mut params, &grads, &mut moments, lr, &opt).unwrap();
    }

    let per_step = (0.1 / (1.0 + 1e-8)) as f32;
    let after = params.named_tensors();
    for ((name, before), (_, now)) in reference.iter().zip(&after) {
        if *name == target_name {
            for (b, n) in before.data().iter().zip(now.data()) {
                let expect = b - steps as f32 * per_step;
                assert!(
                    (n - expect).abs() <= 1e-6 * expect.abs().max(1.0),
                    "{name}: {n} vs {expect}"
                );
            }
        } else {
            assert_eq!(before.data(), now.data(), "{name} had no gradient and no decay");
        }
    }
}

#[test]
fn missing_gradients_still_apply_weight_decay() {
    let cfg = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut params = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
    let before = params.named_tensors();
    let mut moments = Moments::zeros_like(&params);
    let opt = AdamwConfig::default();
    let lr = 0.1f32;
    let wd = opt.weight_decay as f32;
    adamw_step(&mut params, &HashMap::new(), &mut moments, lr as f64, &opt).unwrap();
    let after = params.named_tensors();
    for ((name, b), (_, a)) in before.iter().zip(&after) {
        for (x, y) in b.data().iter().zip(a.data()) {
            // Zero moments leave the adaptive term exactly zero, so the
            // update is the decoupled decay alone.
            let expect = x - lr * (wd * x);
            assert_eq!(*y, expect, "{name}");
        }
    }
}

#[test]
fn non_finite_gradients_are_rejected_by_name() {
    let cfg = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut params = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
    let (name, t) = params.named_tensors()[2].clone();
    let mut bad = Tensor::full(t.shape(), 0.0f32);
    bad.data_mut()[0] = f32::NAN;
    let mut grads = HashMap::new();
    grads.insert(name.clone(), bad);
    let mut moments = Moments::zeros_like(&params);
    let err = adamw_step(&mut params, &grads, &mut moments, 1e-3, &AdamwConfig::default())
        .unwrap_err();
    assert!(err.to_string().contains(&name), "error should name {name}: {err}");
}

#[test]
fn gradient_shape_mismatch_is_rejected() {
    let cfg = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut params = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
    let (name, _) = params.named_tensors()[0].clone();
    let mut grads = HashMap::new();
    grads.insert(name, Tensor::full(&[1, 1], 1.0f32));
    let mut moments = Moments::zeros_like(&params);
    assert!(
        adamw_step(&mut params, &grads, &mut moments, 1e-3, &AdamwConfig::default()).is_err()
    );
}

#[test]
fn optimizer_state_tracks_exactly_the_parameter_set() {
    let cfg = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
    let moments = Moments::zeros_like(&params);
    let mut param_names = Vec::new();
    params.visit(|n, _| param_names.push(n.to_string()));
    let moment_names: Vec<String> = moments.names().iter().map(|s| s.to_string()).collect();
    assert_eq!(param_names, moment_names);
}

#[test]
fn optimizer_config_validation_rejects_bad_values() {
    let bad = [
        AdamwConfig { beta1: 1.0, ..AdamwConfig::default() },
        AdamwConfig { beta2: -0.1, ..AdamwConfig::default() },
        AdamwConfig { eps: 0.0, ..AdamwConfig::default() },
        AdamwConfig { weight_decay: -1.0, ..AdamwConfig::default() },
    ];
    for cfg in bad {
        assert!(cfg.validate().is_err(), "{cfg:?}");
    }
    AdamwConfig::default().validate().unwrap();
}

// ------------------------------------------------------------- train_step

/// Two datasets identical except for condition tokens: with full condition
/// dropout the updates cannot depend on those tokens.
#[test]
fn full_condition_dropout_ignores_the_condition_tokens() {
    let cfg = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let params0 = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
    let codec = Codec::fixed();
    let data = build_dataset(&tiny_dataset(), &codec).unwrap();

    // Two conditions of equal token length (same family) that differ in
    // content, over identical blocks; only the tokens can explain any
    // divergence between the runs.
    let (i, j) = (0..data.len())
        .flat_map(|i| (0..data.len()).map(move |j| (i, j)))
        .find(|&(i, j)| {
            data[i].tokens.len() == data[j].tokens.len() && data[i].tokens != data[j].tokens
        })
        .expect("dataset has same-length distinct conditions");
    let sample_a = data[i].clone();
    let mut sample_b = sample_a.clone();
    sample_b.tokens = data[j].tokens.clone();

    let run = |sample: &Sample, dropout: f64| {
        let mut params = params0.clone();
        let mut moments = Moments::zeros_like(&params);
        let settings = default_settings(1e-3, dropout, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        train_step(&mut params, &mut moments, &[sample.clone()], &settings, &mut rng).unwrap();
        params_bits(&params)
    };

    assert_eq!(run(&sample_a, 1.0), run(&sample_b, 1.0));
    assert_ne!(run(&sample_a, 0.0), run(&sample_b, 0.0));
}

#[test]
fn a_sample_without_blocks_has_exactly_zero_flow_loss() {
    let cfg = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut params = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
    let mut moments = Moments::zeros_like(&params);
    let sample = Sample {
        layout: SequenceLayout::from_parts(&[(Modality::Condition, Mode::Serial, 3)]).unwrap(),
        tokens: vec![vocab::BOS, vocab::SPHERE, vocab::EOS],
        blocks: vec![],
        shape: ShapeSpec::Sphere { radius: 0.5 },
    };
    let settings = default_settings(1e-3, 0.0, 0.0);
    let mut step_rng = ChaCha8Rng::seed_from_u64(1);
    let losses =
        train_step(&mut params, &mut moments, &[sample], &settings, &mut step_rng).unwrap();
    assert_eq!(losses.flow_mse, 0.0);
    assert!(losses.text_ce > 0.0);
    assert_eq!(losses.total, losses.text_ce);
}

#[test]
fn a_sample_without_serial_targets_has_exactly_zero_text_loss() {
    let cfg = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut params = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
    let mut moments = Moments::zeros_like(&params);
    let block = LatentBlock {
        tokens: Tensor::full(&[4, 64], 0.25f64),
    };
    let sample = Sample {
        layout: SequenceLayout::from_parts(&[
            (Modality::Condition, Mode::Serial, 1),
            (Modality::Latent3d, Mode::Parallel, 4),
        ])
        .unwrap(),
        tokens: vec![vocab::BOS],
        blocks: vec![block],
        shape: ShapeSpec::Sphere { radius: 0.5 },
    };
    let settings = default_settings(1e-3, 0.0, 0.0);
    let mut step_rng = ChaCha8Rng::seed_from_u64(1);
    let losses =
        train_step(&mut params, &mut moments, &[sample], &settings, &mut step_rng).unwrap();
    assert_eq!(losses.text_ce, 0.0);
    assert!(losses.flow_mse > 0.0);
    assert_eq!(losses.total, losses.flow_mse);
}

#[test]
fn an_empty_batch_is_rejected() {
    let cfg = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut params = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
    let mut moments = Moments::zeros_like(&params);
    let settings = default_settings(1e-3, 0.0, 0.0);
    let mut step_rng = ChaCha8Rng::seed_from_u64(1);
    assert!(train_step(&mut params, &mut moments, &[], &settings, &mut step_rng).is_err());
}

#[test]
fn a_loose_norm_cap_leaves_the_update_untouched() {
    let cfg = tiny_model();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let params0 = ModelParams::<f32>::init(&cfg, &mut rng).unwrap();
    let codec = Codec::fixed();
    let data = build_dataset(&tiny_dataset(), &codec).unwrap();

    let run = |clip: Option<f64>| {
        let mut params = params0.clone();
        let mut moments = Moments::zeros_like(&params);
        let settings = StepSettings { clip_norm: clip, ..default_settings(1e-3, 0.5, 0.5) };
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        train_step(&mut params, &mut moments, &data[..2], &settings, &mut rng).unwrap();
        params_bits(&params)
    };

    assert_eq!(run(None), run(Some(1e12)));
    assert_ne!(run(None), run(Some(1e-6)));
}

// ------------------------------------------------------------ full runs

#[test]
fn losses_stay_finite_and_trend_downward() {
    let mut config = tiny_config();
    config.schedule.stages = vec![StageConfig {
        resolution: 8,
        dropout_p: 0.5,
        lr: 3e-3,
        steps: 200,
    }];
    config.schedule.batch_size = 4;
    let mut log = MetricLog::new();
    run_stages(&config, &mut log, |_| Ok(())).unwrap();
    assert_eq!(log.len(), 200);

    let totals: Vec<f64> = log
        .records()
        .iter()
        .map(|r| {
            assert!(r.text_ce.is_finite() && r.flow_mse.is_finite(), "step {}", r.step);
            r.text_ce + r.flow_mse
        })
        .collect();
    let head: f64 = totals[..50].iter().sum::<f64>() / 50.0;
    let tail: f64 = totals[150..].iter().sum::<f64>() / 50.0;
    assert!(
        tail < head,
        "mean loss over last 50 steps ({tail:.4}) should undercut the first 50 ({head:.4})"
    );
}

#[test]
fn identical_configs_yield_bit_identical_trajectories() {
    let config = tiny_config();
    let mut log_a = MetricLog::new();
    run_stages(&config, &mut log_a, |_| Ok(())).unwrap();
    let mut log_b = MetricLog::new();
    run_stages(&config, &mut log_b, |_| Ok(())).unwrap();
    assert!(log_a.same_trajectory(&log_b));

    let mut other = config.clone();
    other.schedule.seed = 8;
    let mut log_c = MetricLog::new();
    run_stages(&other, &mut log_c, |_| Ok(())).unwrap();
    assert!(!log_a.same_trajectory(&log_c));
}

#[test]
fn stage_transitions_show_up_in_the_metric_log() {
    let config = tiny_config();
    let mut log = MetricLog::new();
    run_stages(&config, &mut log, |_| Ok(())).unwrap();
    assert_eq!(log.len(), 8);
    let r = log.records();
    for rec in &r[..4] {
        assert_eq!((rec.stage, rec.resolution, rec.lr, rec.dropout_p), (0, 8, 1e-3, 0.8));
    }
    for rec in &r[4..] {
        assert_eq!((rec.stage, rec.resolution, rec.lr, rec.dropout_p), (1, 16, 5e-4, 0.2));
    }
    let steps: Vec<usize> = r.iter().map(|x| x.step).collect();
    assert_eq!(steps, (1..=8).collect::<Vec<_>>());
}

#[test]
fn warmup_ramps_the_learning_rate_linearly() {
    let mut config = tiny_config();
    config.schedule.stages = vec![StageConfig { resolution: 8, dropout_p: 0.5, lr: 1e-3, steps: 6 }];
    config.schedule.warmup_steps = 4;
    let mut log = MetricLog::new();
    run_stages(&config, &mut log, |_| Ok(())).unwrap();
    let lrs: Vec<f64> = log.records().iter().map(|r| r.lr).collect();
    assert_eq!(lrs, vec![0.25e-3, 0.5e-3, 0.75e-3, 1e-3, 1e-3, 1e-3]);
}

#[test]
fn checkpoints_arrive_at_stage_boundaries_and_on_cadence() {
    let mut config = tiny_config();
    config.schedule.checkpoint_every = 3;
    let mut log = MetricLog::new();
    let mut seen = Vec::new();
    run_stages(&config, &mut log, |c| {
        seen.push(c.cursor.global_step);
        Ok(())
    })
    .unwrap();
    // Steps 3 and 6 on cadence; steps 4 and 8 end stages.
    assert_eq!(seen, vec![3, 4, 6, 8]);
}

// -------------------------------------------------- checkpoint round trips

#[test]
fn save_load_save_is_byte_identical() {
    let config = tiny_config();
    let trainer = {
        let mut t = Trainer::new(&config).unwrap();
        let mut log = MetricLog::new();
        for _ in 0..3 {
            t.step(&mut log).unwrap();
        }
        t
    };
    let ckpt = trainer.checkpoint();
    let mut bytes_a = Vec::new();
    ckpt.write_to(&mut bytes_a).unwrap();
    let loaded = Checkpoint::read_from(bytes_a.as_slice()).unwrap();
    let mut bytes_b = Vec::new();
    loaded.write_to(&mut bytes_b).unwrap();
    assert_eq!(bytes_a, bytes_b);
}

#[test]
fn interrupted_training_resumes_bit_exactly() {
    let config = tiny_config();

    let mut straight = Trainer::new(&config).unwrap();
    let mut log_straight = MetricLog::new();
    while !straight.is_done() {
        straight.step(&mut log_straight).unwrap();
    }

    // Kill mid-stage (step 3 of 8), then resume from the serialized bytes.
    let mut first = Trainer::new(&config).unwrap();
    let mut log_first = MetricLog::new();
    for _ in 0..3 {
        first.step(&mut log_first).unwrap();
    }
    let mut bytes = Vec::new();
    first.checkpoint().write_to(&mut bytes).unwrap();
    drop(first);

    let mut resumed = Trainer::from_checkpoint(Checkpoint::read_from(bytes.as_slice()).unwrap())
        .unwrap();
    resumed.check_resume(&config).unwrap();
    let mut log_resumed = MetricLog::new();
    while !resumed.is_done() {
        resumed.step(&mut log_resumed).unwrap();
    }

    let mut end_a = Vec::new();
    straight.checkpoint().write_to(&mut end_a).unwrap();
    let mut end_b = Vec::new();
    resumed.checkpoint().write_to(&mut end_b).unwrap();
    assert_eq!(end_a, end_b, "resumed run must land on identical bytes");

    // The resumed log holds steps 4..=8 and must match the straight run
    // record for record (wall time aside).
    let tail = &log_straight.records()[3..];
    for (a, b) in tail.iter().zip(log_resumed.records()) {
        assert_eq!(a.step, b.step);
        assert_eq!(a.text_ce.to_bits(), b.text_ce.to_bits());
        assert_eq!(a.flow_mse.to_bits(), b.flow_mse.to_bits());
    }
}

#[test]
fn corrupted_checkpoints_are_rejected() {
    let config = tiny_config();
    let trainer = Trainer::new(&config).unwrap();
    let mut bytes = Vec::new();
    trainer.checkpoint().write_to(&mut bytes).unwrap();

    let mut bad_magic = bytes.clone();
    bad_magic[0] ^= 0xff;
    let err = Checkpoint::read_from(bad_magic.as_slice()).err().expect("bad magic must fail");
    assert!(err.to_string().contains("magic"), "{err}");

    let mut bad_version = bytes.clone();
    bad_version[MAGIC.len()] = (FORMAT_VERSION + 1) as u8;
    let err = Checkpoint::read_from(bad_version.as_slice()).err().expect("bad version must fail");
    assert!(err.to_string().contains("version"), "{err}");

    let mut truncated = bytes.clone();
    truncated.truncate(bytes.len() - 8);
    assert!(Checkpoint::read_from(truncated.as_slice()).is_err());

    let mut padded = bytes.clone();
    padded.extend_from_slice(&[0u8; 4]);
    let err = Checkpoint::read_from(padded.as_slice()).err().expect("trailing bytes must fail");
    assert!(err.to_string().contains("trailing"), "{err}");
}

#[test]
fn resume_refuses_a_drifted_run_config() {
    let config = tiny_config();
    let trainer = Trainer::new(&config).unwrap();
    let mut bytes = Vec::new();
    trainer.checkpoint().write_to(&mut bytes).unwrap();
    let resumed = Trainer::from_checkpoint(Checkpoint::read_from(bytes.as_slice()).unwrap())
        .unwrap();

    resumed.check_resume(&config).unwrap();
    let mut drifted = config.clone();
    drifted.schedule.stages[0].lr = 9e-4;
    assert!(resumed.check_resume(&drifted).is_err());
    let mut drifted = config.clone();
    drifted.model.n_layers = 3;
    assert!(resumed.check_resume(&drifted).is_err());
    let mut drifted = config;
    drifted.dataset.seed = 99;
    assert!(resumed.check_resume(&drifted).is_err());
}

#[test]
fn checkpoint_files_round_trip_on_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.ckpt");
    let config = tiny_config();
    let trainer = Trainer::new(&config).unwrap();
    let ckpt = trainer.checkpoint();
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded.cursor, ckpt.cursor);
    assert_eq!(loaded.schedule, ckpt.schedule);
    let mut a = Vec::new();
    ckpt.write_to(&mut a).unwrap();
    let mut b = Vec::new();
    loaded.write_to(&mut b).unwrap();
    assert_eq!(a, b);
}

// ------------------------------------------------------------ metric log

#[test]
fn metric_csv_round_trips() {
    let mut log = MetricLog::new();
    for i in 0..5 {
        log.push(MetricRecord {
            step: i + 1,
            stage: i / 3,
            resolution: 8 << (i / 3),
            text_ce: 1.5 / (i as f64 + 1.0),
            flow_mse: 0.25 * (i as f64).exp2().recip(),
            lr: 1e-3,
            dropout_p: 0.5,
            wall_ms: 12.25 + i as f64,
        })
        .unwrap();
    }
    let mut buf = Vec::new();
    log.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with(CSV_HEADER));
    let back = MetricLog::read_csv(buf.as_slice()).unwrap();
    assert_eq!(back.records(), log.records());
}

#[test]
fn metric_log_rejects_non_increasing_steps() {
    let mut log = MetricLog::new();
    let rec = MetricRecord {
        step: 2,
        stage: 0,
        resolution: 8,
        text_ce: 1.0,
        flow_mse: 1.0,
        lr: 1e-3,
        dropout_p: 0.5,
        wall_ms: 1.0,
    };
    log.push(rec.clone()).unwrap();
    assert!(log.push(rec).is_err());
}

#[test]
fn malformed_csv_reports_the_line() {
    let text = format!("{CSV_HEADER}\n1,0,8,0.5,0.5,0.001,0.5,1.0\n2,0,eight,0.5,0.5,0.001,0.5,1.0\n");
    let err = MetricLog::read_csv(text.as_bytes()).unwrap_err();
    assert!(err.to_string().contains('3'), "line 3 is malformed: {err}");

    let missing_header = "1,0,8,0.5,0.5,0.001,0.5,1.0\n";
    assert!(MetricLog::read_csv(missing_header.as_bytes()).is_err());
}

// -------------------------------------------------------------- ablation

#[test]
fn ablation_arms_align_and_only_modulation_differs_at_the_start() {
    let mut config = tiny_config();
    config.schedule.stages = vec![StageConfig { resolution: 8, dropout_p: 0.5, lr: 1e-3, steps: 3 }];
    let (on, off) = ablation_adaln(&config).unwrap();
    assert_eq!(on.len(), off.len());

    // Modulation projections start at zero, so the first step's losses
    // cannot differ between the arms.
    let a = &on.records()[0];
    let b = &off.records()[0];
    assert!((a.text_ce - b.text_ce).abs() <= 1e-6 * a.text_ce.abs().max(1.0));
    assert!((a.flow_mse - b.flow_mse).abs() <= 1e-6 * a.flow_mse.abs().max(1.0));
}

// ------------------------------------------------------------ validation

#[test]
fn schedule_validation_enforces_stage_monotonicity() {
    let base = tiny_config();
    base.schedule.validate().unwrap();

    let mut bad = base.schedule.clone();
    bad.stages[1].resolution = 4;
    assert!(bad.validate().is_err(), "resolution must not shrink");

    let mut bad = base.schedule.clone();
    bad.stages[1].dropout_p = 0.9;
    assert!(bad.validate().is_err(), "dropout must not grow");

    let mut bad = base.schedule.clone();
    bad.stages[1].lr = 2e-3;
    assert!(bad.validate().is_err(), "learning rate must not grow");

    let mut bad = base.schedule.clone();
    bad.stages.clear();
    assert!(bad.validate().is_err());

    let mut bad = base.schedule.clone();
    bad.caption_fraction = 1.5;
    assert!(bad.validate().is_err());

    let mut bad = base.schedule.clone();
    bad.clip_norm = Some(0.0);
    assert!(bad.validate().is_err());

    let mut bad = base.schedule;
    bad.batch_size = 0;
    assert!(bad.validate().is_err());
}

#[test]
fn run_config_cross_checks_model_against_data() {
    let good = tiny_config();
    good.validate().unwrap();

    let mut bad = good.clone();
    bad.model.vocab_size = 4;
    assert!(bad.validate().is_err(), "vocab must cover the condition tokens");

    let mut bad = good.clone();
    bad.model.latent_dim = 32;
    assert!(bad.validate().is_err(), "latent width must match the codec");

    let mut bad = good.clone();
    bad.schedule.stages[0].resolution = 10;
    assert!(bad.validate().is_err(), "resolutions must divide into blocks");

    let mut bad = good;
    bad.dataset.families.clear();
    assert!(bad.validate().is_err());
}

#[test]
fn profile_schedules_pass_validation() {
    TrainSchedule::default().validate().unwrap();
    TrainSchedule::full_scale().validate().unwrap();
    let d = TrainSchedule::default();
    assert_eq!(d.batch_size, 8);
    assert_eq!(d.caption_fraction, 0.5);
    assert_eq!(d.total_steps(), 2000);
}
