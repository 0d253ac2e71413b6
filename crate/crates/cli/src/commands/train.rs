use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::Args;

use hseq_core::trainer::{ablation_adaln, Checkpoint, MetricLog, Trainer};
use hseq_core::{Error, Result};

#[derive(Args)]
pub struct TrainArgs {
    /// JSON run config (model, schedule, dataset).
    #[arg(long)]
    pub config: PathBuf,

    /// Output directory for checkpoints and metrics.
    #[arg(long, default_value = ".")]
    pub out: PathBuf,

    /// Override the schedule seed; recorded in the metrics header.
    #[arg(long)]
    pub seed: Option<u64>,

    /// Resume from this checkpoint instead of initializing fresh.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,

    /// Allow overwriting existing checkpoint files.
    #[arg(long)]
    pub force: bool,

    /// Train AdaLN-on and AdaLN-off arms and emit one metrics CSV per arm
    /// (for plot overlays) instead of checkpoints.
    #[arg(long)]
    pub ablation: bool,
}

fn write_metrics(path: &Path, seed: u64, log: &MetricLog) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "# seed={seed}")?;
    log.write_csv(&mut w)?;
    w.flush()?;
    Ok(())
}

fn checkpoint_path(out: &Path, ckpt: &Checkpoint) -> PathBuf {
    out.join(format!("step_{:06}.ckpt", ckpt.cursor.global_step))
}

pub fn run(args: TrainArgs) -> Result<()> {
    let mut config = super::load_config(&args.config)?;
    if let Some(seed) = args.seed {
        config.schedule.seed = seed;
    }
    super::ensure_out_dir(&args.out)?;

    if args.ablation {
        let (on, off) = ablation_adaln(&config)?;
        let on_path = args.out.join("metrics_adaln_on.csv");
        let off_path = args.out.join("metrics_adaln_off.csv");
        write_metrics(&on_path, config.schedule.seed, &on)?;
        write_metrics(&off_path, config.schedule.seed, &off)?;
        println!("wrote {} and {}", on_path.display(), off_path.display());
        return Ok(());
    }

    let final_path = args.out.join("final.ckpt");
    if final_path.exists() && !args.force {
        return Err(Error::Config(format!(
            "{} exists; pass --force to overwrite",
            final_path.display()
        )));
    }

    let mut trainer = match &args.checkpoint {
        Some(path) => {
            let trainer = Trainer::from_checkpoint(super::load_checkpoint(path)?)?;
            trainer.check_resume(&config)?;
            println!(
                "resumed from {} at step {}",
                path.display(),
                trainer.cursor.global_step
            );
            trainer
        }
        None => Trainer::new(&config)?,
    };

    let mut log = MetricLog::new();
    let force = args.force;
    let out = args.out.clone();
    let final_ckpt = trainer.run(&mut log, |ckpt| {
        let path = checkpoint_path(&out, ckpt);
        if path.exists() && !force {
            return Err(Error::Config(format!(
                "{} exists; pass --force to overwrite",
                path.display()
            )));
        }
        ckpt.save(&path)?;
        println!("checkpoint at step {} -> {}", ckpt.cursor.global_step, path.display());
        Ok(())
    })?;

    final_ckpt.save(&final_path)?;
    let metrics_path = args.out.join("metrics.csv");
    write_metrics(&metrics_path, config.schedule.seed, &log)?;

    if let Some(last) = log.records().last() {
        println!(
            "done: {} steps, text_ce {:.4}, flow_mse {:.4}",
            last.step, last.text_ce, last.flow_mse
        );
    }
    println!("wrote {} and {}", final_path.display(), metrics_path.display());
    Ok(())
}
