use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;

use clap::Args;

use hseq_core::layout::{compile_mask, SequenceLayout};
use hseq_core::Result;

#[derive(Args)]
pub struct MaskdumpArgs {
    /// Layout description, e.g. "text:4,block:8,text:2,block:8".
    /// Kinds: text and cond are serial, block is a parallel latent block.
    #[arg(long)]
    pub layout: String,

    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

pub fn run(args: MaskdumpArgs) -> Result<()> {
    let layout = SequenceLayout::parse(&args.layout)?;
    let mask = compile_mask(&layout)?;
    super::ensure_out_dir(&args.out)?;
    let n = mask.n();

    let csv_path = args.out.join("mask.csv");
    let mut csv = BufWriter::new(File::create(&csv_path)?);
    for i in 0..n {
        let row: Vec<&str> = (0..n).map(|j| if mask.get(i, j) { "1" } else { "0" }).collect();
        writeln!(csv, "{}", row.join(","))?;
    }
    csv.flush()?;

    // P2 graymap, white where attention is allowed.
    let pgm_path = args.out.join("mask.pgm");
    let mut pgm = BufWriter::new(File::create(&pgm_path)?);
    writeln!(pgm, "P2")?;
    writeln!(pgm, "{n} {n}")?;
    writeln!(pgm, "255")?;
    for i in 0..n {
        let row: Vec<&str> = (0..n).map(|j| if mask.get(i, j) { "255" } else { "0" }).collect();
        writeln!(pgm, "{}", row.join(" "))?;
    }
    pgm.flush()?;

    println!(
        "wrote {} and {} ({n}x{n}, {} segments)",
        csv_path.display(),
        pgm_path.display(),
        layout.segments().len()
    );
    Ok(())
}
