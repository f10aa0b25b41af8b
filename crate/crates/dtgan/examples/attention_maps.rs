//! Export the channel and pixel attention maps of a generator stage as
//! grayscale images, next to the image they were computed for.
//!
//! Run with: cargo run --release --example attention_maps

use dtgan::cli::{cmd_attn, cmd_train};
use dtgan::Result;

fn main() -> Result<()> {
    let sets: Vec<String> = [
        "gen_layers=3",
        "steps=300",
        "sample_every=0",
        "checkpoint_every=300",
        "out_dir=attn_run",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let out = cmd_train(None, &sets, &[], None)?;

    let files = cmd_attn(
        &out.join("ckpt_300"),
        "a large green triangle on a black background",
        5,
        None, // last stage: the full-resolution maps
        std::path::Path::new("attn_maps"),
    )?;
    for f in files {
        println!("{}", f.display());
    }
    Ok(())
}
