//! Caption-editing demo: train briefly, then generate with the same noise
//! draws while changing only the color word. Because the noise sequence is
//! a pure function of the seed, every difference between the two image rows
//! comes from the conditioning vector.
//!
//! Run with: cargo run --release --example generate_variations

use dtgan::cli::{cmd_sample, cmd_train};
use dtgan::Result;

fn main() -> Result<()> {
    let sets: Vec<String> = [
        "gen_layers=3",
        "steps=300",
        "sample_every=0",
        "checkpoint_every=300",
        "out_dir=variations_run",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    let out = cmd_train(None, &sets, &[], None)?;
    let ckpt = out.join("ckpt_300");

    for color in ["red", "blue", "yellow"] {
        let caption = format!("a large {color} circle on a black background");
        let files = cmd_sample(&ckpt, &caption, 4, 99, std::path::Path::new("variations").join(color).as_path())?;
        println!("{caption}:");
        for f in files {
            println!("  {}", f.display());
        }
    }
    println!("same seed everywhere: compare rows pixel by pixel to see what the caption controls");
    Ok(())
}
