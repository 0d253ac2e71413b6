use std::fs::File;
use std::io::BufReader;
use std::path::PathBuf;

use clap::Args;

use hseq_core::infer::caption_cloud;
use hseq_core::worldgen::{read_xyz, spec_from_tokens, vocab, Codec};
use hseq_core::Result;

/// Longest legal caption is BOS, family, three bins, EOS; the cap only
/// matters for untrained models that never emit EOS.
const MAX_TOKENS: usize = 16;

#[derive(Args)]
pub struct CaptionArgs {
    /// Trained model checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,

    /// XYZ point cloud to describe. Point count must be divisible by the
    /// checkpoint's block size.
    pub input: PathBuf,
}

pub fn run(args: CaptionArgs) -> Result<()> {
    let ckpt = super::load_checkpoint(&args.checkpoint)?;
    let cloud = read_xyz(BufReader::new(File::open(&args.input)?))?;
    let codec = Codec::fixed();
    let tokens =
        caption_cloud(&ckpt.params, &codec, &cloud, ckpt.dataset.block_size, MAX_TOKENS)?;

    let names: Vec<String> = tokens.iter().map(|&t| vocab::token_name(t)).collect();
    println!("tokens: {}", names.join(" "));
    match spec_from_tokens(&tokens) {
        Ok(spec) => {
            let params: Vec<String> =
                spec.params().iter().map(|p| format!("{p:.6}")).collect();
            println!("family: {}", spec.family().name());
            println!("params: {}", params.join(", "));
        }
        Err(_) => println!("(token sequence does not form a valid condition)"),
    }
    Ok(())
}
