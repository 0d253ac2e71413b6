use std::fs::{self, File};
use std::io::BufReader;
use std::path::PathBuf;

use clap::Args;

use hseq_core::trainer::{MetricLog, MetricRecord};
use hseq_core::{Error, Result};

use crate::svg::{line_chart, Series};

#[derive(Args)]
pub struct PlotArgs {
    /// Metric CSVs to overlay; their step columns must agree.
    #[arg(required = true)]
    pub csvs: Vec<PathBuf>,

    /// Which metric to plot against step.
    #[arg(long, default_value = "flow_mse",
          value_parser = ["text_ce", "flow_mse", "lr", "dropout_p", "wall_ms"])]
    pub column: String,

    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

fn column_value(r: &MetricRecord, column: &str) -> f64 {
    match column {
        "text_ce" => r.text_ce,
        "flow_mse" => r.flow_mse,
        "lr" => r.lr,
        "dropout_p" => r.dropout_p,
        "wall_ms" => r.wall_ms,
        other => unreachable!("clap restricts columns, got {other}"),
    }
}

pub fn run(args: PlotArgs) -> Result<()> {
    let mut logs = Vec::with_capacity(args.csvs.len());
    for path in &args.csvs {
        let log = MetricLog::read_csv(BufReader::new(File::open(path)?)).map_err(|e| {
            Error::Parse { pos: 0, msg: format!("{}: {e}", path.display()) }
        })?;
        if log.is_empty() {
            return Err(Error::Config(format!("{} has no records", path.display())));
        }
        logs.push((path, log));
    }

    let steps: Vec<usize> = logs[0].1.records().iter().map(|r| r.step).collect();
    for (path, log) in &logs[1..] {
        let other: Vec<usize> = log.records().iter().map(|r| r.step).collect();
        if other != steps {
            return Err(Error::Config(format!(
                "step columns differ between {} and {}",
                logs[0].0.display(),
                path.display()
            )));
        }
    }

    let series: Vec<Series> = logs
        .iter()
        .map(|(path, log)| Series {
            label: path
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_else(|| path.display().to_string()),
            points: log
                .records()
                .iter()
                .map(|r| (r.step as f64, column_value(r, &args.column)))
                .collect(),
        })
        .collect();

    super::ensure_out_dir(&args.out)?;
    let svg = line_chart(&format!("{} by step", args.column), "step", &args.column, &series);
    let path = args.out.join("plot.svg");
    fs::write(&path, svg)?;
    println!("wrote {} ({} curves)", path.display(), series.len());
    Ok(())
}
