//! A small end-to-end training run at 16×16 (three generator stages), with
//! the loss log and sample grids written to ./quick_run. A few hundred
//! steps is enough to watch the shapes emerge; the proxy metrics print at
//! the end.
//!
//! Run with: cargo run --release --example train_quick

use dtgan::cli::cmd_train;
use dtgan::rng::Rng;
use dtgan::trainer::Trainer;
use dtgan::Result;

fn main() -> Result<()> {
    let sets: Vec<String> = [
        "gen_layers = 3",      // 16x16 output
        "base_channels = 16",
        "steps = 400",
        "sample_every = 100",
        "checkpoint_every = 400",
        "out_dir = quick_run",
    ]
    .iter()
    .map(|s| s.replace(' ', ""))
    .collect();

    let out = cmd_train(None, &sets, &[], None)?;
    println!("training done; outputs in {}", out.display());

    let mut trainer = Trainer::load_checkpoint(&out.join("ckpt_400"))?;
    let mut rng = Rng::seed_from(123);
    let metrics = trainer.evaluate_proxies(96, &mut rng)?;
    println!("color match : {:.3} (chance is {:.3})", metrics.color_match, 1.0 / 6.0);
    println!("diversity   : {:.4}", metrics.diversity);
    Ok(())
}
