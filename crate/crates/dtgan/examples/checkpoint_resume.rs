//! Checkpoint round-trip: train, save, resume, and verify that the split
//! run reproduces an unbroken run bit for bit — parameters, optimizer
//! moments, and the RNG stream all restore exactly.
//!
//! Run with: cargo run --release --example checkpoint_resume

use dtgan::config::RunConfig;
use dtgan::trainer::Trainer;
use dtgan::Result;

fn small_config() -> Result<RunConfig> {
    let mut run = RunConfig::default();
    run.apply_text("gen_layers = 3\nbase_channels = 8\nbatch = 4\nn_train = 96\nn_test = 8")?;
    Ok(run)
}

fn main() -> Result<()> {
    let ckpt = std::env::temp_dir().join("resume_demo.ckpt");

    let mut unbroken = Trainer::new(small_config()?)?;
    for _ in 0..40 {
        unbroken.train_step()?;
    }

    let mut first_half = Trainer::new(small_config()?)?;
    for _ in 0..20 {
        first_half.train_step()?;
    }
    first_half.save_checkpoint(&ckpt)?;
    println!("saved {} after 20 steps", ckpt.display());

    let mut resumed = Trainer::load_checkpoint(&ckpt)?;
    println!("resumed at step {}", resumed.step);
    for _ in 0..20 {
        resumed.train_step()?;
    }

    let mut max_diff_bits = 0u64;
    for ((path, a), (_, b)) in unbroken.store.iter().zip(resumed.store.iter()) {
        for (x, y) in a.data().iter().zip(b.data()) {
            if x.to_bits() != y.to_bits() {
                max_diff_bits += 1;
                println!("mismatch in {path}");
                break;
            }
        }
    }
    assert_eq!(max_diff_bits, 0);
    println!("40 unbroken steps == 20 + resume + 20 steps, bit for bit");
    std::fs::remove_file(&ckpt).ok();
    Ok(())
}
