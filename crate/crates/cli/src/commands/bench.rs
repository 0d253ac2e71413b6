use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::time::Instant;

use clap::Args;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use hseq_core::flow::FlowSchedule;
use hseq_core::infer::generate_latent_sequence;
use hseq_core::model::{ModelConfig, ModelParams, Precision};
use hseq_core::worldgen::vocab;
use hseq_core::{Error, Result};

#[derive(Args)]
pub struct BenchArgs {
    /// Time this checkpoint's weights; otherwise random weights are used.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,

    /// Run config supplying the model shape for random weights.
    #[arg(long)]
    pub config: Option<PathBuf>,

    /// Latent tokens to generate per measurement.
    #[arg(long, default_value_t = 512)]
    pub total_tokens: usize,

    /// Block sizes to compare. Size 1 is added if missing, since it is
    /// the speedup baseline.
    #[arg(long, value_delimiter = ',', default_value = "1,8,64")]
    pub block_sizes: Vec<usize>,

    /// ODE steps per block.
    #[arg(long, default_value_t = 50)]
    pub steps: usize,

    /// Guidance scale; any value other than 1 doubles the passes per step.
    #[arg(long, default_value_t = 1.0)]
    pub cfg_scale: f64,

    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

/// Model used when neither a checkpoint nor a config is given.
fn default_model() -> ModelConfig {
    ModelConfig {
        d_model: 64,
        n_layers: 2,
        n_heads: 4,
        n_kv_heads: 2,
        d_ff: 128,
        vocab_size: vocab::SIZE,
        latent_dim: 64,
        rope_base: 10_000.0,
        adaln_enabled: true,
        precision: Precision::F32,
    }
}

pub fn run(args: BenchArgs) -> Result<()> {
    let params = match (&args.checkpoint, &args.config) {
        (Some(path), _) => super::load_checkpoint(path)?.params,
        (None, Some(path)) => {
            let config = super::load_config(path)?;
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            ModelParams::init(&config.model, &mut rng)?
        }
        (None, None) => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            ModelParams::init(&default_model(), &mut rng)?
        }
    };

    let mut sizes = args.block_sizes.clone();
    if !sizes.contains(&1) {
        sizes.insert(0, 1);
    }
    for &b in &sizes {
        if b == 0 || args.total_tokens % b != 0 {
            return Err(Error::Config(format!(
                "total_tokens {} is not divisible by block size {b}",
                args.total_tokens
            )));
        }
    }
    let schedule = FlowSchedule {
        num_steps: args.steps,
        cfg_scale: args.cfg_scale,
        ..FlowSchedule::default()
    };
    schedule.validate()?;
    // A minimal condition keeps guided and unguided timings comparable.
    let condition = [vocab::BOS];
    let cfg_passes: usize = if args.cfg_scale != 1.0 { 2 } else { 1 };

    super::ensure_out_dir(&args.out)?;
    let csv_path = args.out.join("bench.csv");
    let mut csv = BufWriter::new(File::create(&csv_path)?);
    writeln!(csv, "block_size,n_blocks,cfg_passes,forward_passes,wall_ms,tokens_per_s,speedup_vs_b1")?;
    println!("block_size  forward_passes  wall_ms      tokens/s  speedup");

    let mut baseline_ms = None;
    for &b in &sizes {
        let n_blocks = args.total_tokens / b;
        let expected = args.steps * n_blocks * cfg_passes;
        let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
        let started = Instant::now();
        let report = generate_latent_sequence(
            &params,
            Some(&condition),
            n_blocks,
            b,
            &schedule,
            &mut rng,
        )?;
        let wall_ms = started.elapsed().as_secs_f64() * 1e3;
        if report.velocity_passes != expected {
            return Err(Error::Contract(format!(
                "block size {b}: measured {} forward passes, expected steps*blocks*cfg = {expected}",
                report.velocity_passes
            )));
        }
        if b == 1 {
            baseline_ms = Some(wall_ms);
        }
        let speedup = baseline_ms.map(|base| base / wall_ms).unwrap_or(1.0);
        let tps = args.total_tokens as f64 / (wall_ms / 1e3);
        writeln!(
            csv,
            "{b},{n_blocks},{cfg_passes},{},{wall_ms},{tps},{speedup}",
            report.velocity_passes
        )?;
        println!(
            "{b:>10}  {:>14}  {wall_ms:>10.1}  {tps:>8.0}  {speedup:>7.2}x",
            report.velocity_passes
        );
    }
    csv.flush()?;
    println!("forward-pass counts verified; wrote {}", csv_path.display());
    Ok(())
}
