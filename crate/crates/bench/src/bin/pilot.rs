//! Calibration driver for the desk-scale end-to-end run. Trains one
//! candidate config, then scores conditional generation (Chamfer +
//! nearest-template family accuracy) and captioning on held-out clouds,
//! printing wall times for each phase.
//!
//! Args (all optional, positional):
//!   d_model n_layers steps_per_stage lr0 seed [block_size] [samples_per_family] [t_loc]

use std::time::Instant;

use hseq_core::eval::{bin_center_specs, score_caption, score_generation};
use hseq_core::flow::FlowSchedule;
use hseq_core::model::{ModelConfig, Precision};
use hseq_core::trainer::{run_stages, MetricLog, StageConfig, TrainConfig, TrainSchedule};
use hseq_core::worldgen::{vocab, Codec, DatasetConfig, ShapeFamily, LATENT_DIM};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn arg<T: std::str::FromStr>(n: usize, default: T) -> T {
    std::env::args()
        .nth(n)
        .and_then(|s| s.parse().ok())
        .unwrap_or(default)
}

fn main() {
    let d_model: usize = arg(1, 64);
    let n_layers: usize = arg(2, 2);
    let steps: usize = arg(3, 1500);
    let lr0: f64 = arg(4, 1e-3);
    let seed: u64 = arg(5, 42);
    let block_size: usize = arg(6, 32);
    let samples_per_family: usize = arg(7, 64);
    let t_loc: f64 = arg(8, -1.0);
    let n_points = 64usize;

    let config = TrainConfig {
        model: ModelConfig {
            d_model,
            n_layers,
            n_heads: 4,
            n_kv_heads: 2,
            d_ff: 2 * d_model,
            vocab_size: vocab::SIZE,
            latent_dim: LATENT_DIM,
            rope_base: 10_000.0,
            adaln_enabled: true,
            precision: Precision::F32,
        },
        schedule: {
            let mut s = TrainSchedule {
                stages: vec![
                    StageConfig { resolution: n_points, dropout_p: 0.3, lr: lr0, steps },
                    StageConfig { resolution: n_points, dropout_p: 0.1, lr: lr0 / 3.0, steps },
                ],
                seed,
                batch_size: 8,
                caption_fraction: 0.5,
                warmup_steps: 50,
                clip_norm: Some(1.0),
                checkpoint_every: 0,
                ..TrainSchedule::default()
            };
            s.flow.timestep_loc = t_loc;
            s
        },
        dataset: DatasetConfig {
            families: ShapeFamily::ALL.to_vec(),
            samples_per_family,
            points_per_shape: n_points,
            block_size,
            seed: seed.wrapping_mul(31).wrapping_add(7),
        },
    };
    config.validate().expect("pilot config");
    println!(
        "pilot: d{d_model} L{n_layers} steps {steps}+{steps} lr {lr0} seed {seed} \
         block {block_size} corpus {}x{samples_per_family} t_loc {t_loc}",
        ShapeFamily::ALL.len()
    );

    let t0 = Instant::now();
    let mut log = MetricLog::default();
    let ckpt = run_stages(&config, &mut log, |_| Ok(())).expect("training");
    let train_s = t0.elapsed().as_secs_f64();
    let records = log.records();
    for chunk in records.chunks((records.len() / 10).max(1)) {
        let first = chunk.first().unwrap();
        let ce: f64 = chunk.iter().map(|r| r.text_ce).sum::<f64>() / chunk.len() as f64;
        let mse: f64 = chunk.iter().map(|r| r.flow_mse).sum::<f64>() / chunk.len() as f64;
        println!("step {:>5}  text_ce {ce:.4}  flow_mse {mse:.4}", first.step);
    }
    let tail = &records[records.len().saturating_sub(records.len() / 10 + 1)..];
    let tail_ce: f64 = tail.iter().map(|r| r.text_ce).sum::<f64>() / tail.len() as f64;
    let tail_mse: f64 = tail.iter().map(|r| r.flow_mse).sum::<f64>() / tail.len() as f64;
    println!("train: {train_s:.1}s  tail text_ce {tail_ce:.4}  flow_mse {tail_mse:.4}");

    let mut spec_rng = ChaCha8Rng::seed_from_u64(seed);
    spec_rng.set_stream(2);
    let specs = bin_center_specs(20, &mut spec_rng).expect("specs");
    let codec = Codec::fixed();
    let schedule = FlowSchedule { num_steps: 50, cfg_scale: 7.5, ..config.schedule.flow };

    let t1 = Instant::now();
    let gen = score_generation(&ckpt.params, &codec, &specs, n_points, block_size, &schedule, seed)
        .expect("generation eval");
    let gen_s = t1.elapsed().as_secs_f64();
    let mut worst = gen.chamfers.clone();
    worst.sort_by(|a, b| b.partial_cmp(a).unwrap());
    println!(
        "generate: {gen_s:.1}s  mean chamfer {:.4}  family acc {:.1}%  worst {:.4}/{:.4}/{:.4}",
        gen.mean_chamfer,
        100.0 * gen.family_accuracy,
        worst[0],
        worst[1],
        worst[2]
    );

    let t2 = Instant::now();
    let cap = score_caption(&ckpt.params, &codec, &specs, n_points, block_size, seed)
        .expect("caption eval");
    println!("caption: {:.1}s  family acc {:.1}%", t2.elapsed().as_secs_f64(), 100.0 * cap);
    println!("total: {:.1}s", t0.elapsed().as_secs_f64());
}
