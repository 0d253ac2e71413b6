//! Minimal cross-modal learning probe: caption-oriented training on a
//! small corpus with every knob exposed. If the serial head cannot
//! learn to name the family from clean-ish blocks here, the pathway
//! itself is in question rather than capacity or schedule.
//!
//! Args (positional, all optional):
//!   steps lr d_model caption_fraction t_loc points block per_family dropout batch

use hseq_core::model::{ModelConfig, Precision};
use hseq_core::trainer::{run_stages, MetricLog, StageConfig, TrainConfig, TrainSchedule};
use hseq_core::worldgen::{vocab, DatasetConfig, ShapeFamily, LATENT_DIM};

fn arg<T: std::str::FromStr>(n: usize, default: T) -> T {
    std::env::args().nth(n).and_then(|s| s.parse().ok()).unwrap_or(default)
}

fn main() {
    let steps: usize = arg(1, 500);
    let lr: f64 = arg(2, 1e-3);
    let d_model: usize = arg(3, 64);
    let caption_fraction: f64 = arg(4, 1.0);
    let timestep_loc: f64 = arg(5, -1.0);
    let points: usize = arg(6, 8);
    let block: usize = arg(7, 4);
    let per_family: usize = arg(8, 2);
    let dropout: f64 = arg(9, 0.0);
    let batch: usize = arg(10, 4);

    let mut schedule = TrainSchedule {
        stages: vec![StageConfig { resolution: points, dropout_p: dropout, lr, steps }],
        seed: 1,
        batch_size: batch,
        caption_fraction,
        warmup_steps: 20,
        clip_norm: Some(1.0),
        ..TrainSchedule::default()
    };
    schedule.flow.timestep_loc = timestep_loc;
    let config = TrainConfig {
        model: ModelConfig {
            d_model,
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            d_ff: 2 * d_model,
            vocab_size: vocab::SIZE,
            latent_dim: LATENT_DIM,
            rope_base: 10_000.0,
            adaln_enabled: true,
            precision: Precision::F32,
        },
        schedule,
        dataset: DatasetConfig {
            families: ShapeFamily::ALL.to_vec(),
            samples_per_family: per_family,
            points_per_shape: points,
            block_size: block,
            seed: 3,
        },
    };
    config.validate().expect("probe config");
    println!(
        "probe: steps {steps} lr {lr} d{d_model} caption {caption_fraction} t_loc \
         {timestep_loc} points {points} block {block} corpus 3x{per_family} dropout {dropout} \
         batch {batch}"
    );

    let mut log = MetricLog::default();
    run_stages(&config, &mut log, |_| Ok(())).expect("training");
    let records = log.records();
    for chunk in records.chunks((steps / 10).max(1)) {
        let first = chunk.first().unwrap();
        let ce: f64 = chunk.iter().map(|r| r.text_ce).sum::<f64>() / chunk.len() as f64;
        let mse: f64 = chunk.iter().map(|r| r.flow_mse).sum::<f64>() / chunk.len() as f64;
        println!("step {:>5}  text_ce {ce:.4}  flow_mse {mse:.4}", first.step);
    }
}
