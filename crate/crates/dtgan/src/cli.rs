//! Command implementations behind the binary: gradient checking, training,
//! sampling, attention-map export, and proxy evaluation. Every command is
//! deterministic given (config, seed, checkpoint) and none mutates its
//! input checkpoint.

use std::fs;
use std::path::{Path, PathBuf};

use crate::config::RunConfig;
use crate::data::{self, montage, write_ppm, CaptionSpec};
use crate::error::{Error, Result};
use crate::networks::sample_noise;
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::trainer::{single_image, LossRecord, ProxyMetrics, Trainer};
use crate::verify::{run_scope, Scope};

const SAMPLE_STREAM: u64 = 0x5a3b;

fn io(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path.display().to_string(), e)
}

// ── gradcheck ───────────────────────────────────────────────────────

/// Run the finite-difference suites for one scope; print one line per item.
/// Errors with the first offending item if any check exceeds tolerance.
pub fn cmd_gradcheck(scope: &str) -> Result<()> {
    let scope: Scope = scope.parse()?;
    let report = run_scope(scope)?;
    for (name, err, tol, ok) in &report.lines {
        println!(
            "{} {name}: max rel err {err:.3e} (tol {tol:.1e})",
            if *ok { "PASS" } else { "FAIL" }
        );
    }
    if let Some((name, err, tol, _)) = report.lines.iter().find(|(_, _, _, ok)| !ok) {
        return Err(Error::Threshold { item: name.clone(), err: *err, tol: *tol });
    }
    println!("all {} checks passed", report.lines.len());
    Ok(())
}

// ── train ───────────────────────────────────────────────────────────

/// Map an ablation name onto its config switch.
pub fn apply_ablation(run: &mut RunConfig, component: &str) -> Result<()> {
    match component {
        "cam" => run.apply("cam", "false"),
        "pam" => run.apply("pam", "false"),
        "cadailn" => run.apply("cadailn_mode", "none"),
        "visual_loss" | "vl" => run.apply("visual_loss", "false"),
        _ => Err(Error::invalid(format!(
            "unknown ablation '{component}' (expected cam|pam|cadailn|visual_loss)"
        ))),
    }
}

/// Resolve the run configuration from file + overrides + ablations.
pub fn resolve_config(
    config_path: Option<&Path>,
    sets: &[String],
    ablates: &[String],
    out_override: Option<&Path>,
) -> Result<RunConfig> {
    let mut run = RunConfig::default();
    if let Some(path) = config_path {
        let text = fs::read_to_string(path).map_err(io(path))?;
        run.apply_text(&text)?;
    }
    for kv in sets {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        run.apply(k.trim(), v.trim())?;
    }
    for a in ablates {
        apply_ablation(&mut run, a)?;
    }
    if let Some(out) = out_override {
        run.out_dir = out.display().to_string();
    }
    run.validate()?;
    Ok(run)
}

/// Eight fixed captions used for periodic sample grids.
pub fn grid_specs() -> Vec<CaptionSpec> {
    let all = CaptionSpec::all();
    // Spread over colors and shapes: stride through the 96-spec list.
    (0..8).map(|i| all[(i * 13) % all.len()]).collect()
}

fn write_sample_grid(trainer: &mut Trainer, z: &Tensor, dir: &Path, step: u64) -> Result<()> {
    let tokens: Vec<Vec<usize>> = grid_specs().iter().map(|s| s.tokens()).collect();
    let (imgs, _) = trainer.generate(&tokens, z)?;
    let singles: Vec<Tensor> = (0..tokens.len()).map(|r| single_image(&imgs, r)).collect::<Result<_>>()?;
    let grid = montage(&singles, 4)?;
    write_ppm(&grid, &dir.join(format!("samples_{step}.ppm")))
}

/// Deterministic training run: config echo, loss CSV, periodic sample grids
/// and checkpoints under the output directory.
pub fn cmd_train(
    config_path: Option<&Path>,
    sets: &[String],
    ablates: &[String],
    out_override: Option<&Path>,
) -> Result<PathBuf> {
    let run = resolve_config(config_path, sets, ablates, out_override)?;
    let out_dir = PathBuf::from(&run.out_dir);
    fs::create_dir_all(&out_dir).map_err(io(&out_dir))?;
    let resolved = out_dir.join("config.resolved");
    fs::write(&resolved, run.to_text()).map_err(io(&resolved))?;

    let steps = run.steps;
    let sample_every = run.sample_every;
    let checkpoint_every = run.checkpoint_every;
    let mut trainer = Trainer::new(run.clone())?;
    let grid_z = sample_noise(8, run.noise_dim, &mut Rng::derive(run.seed, SAMPLE_STREAM));

    let csv_path = out_dir.join("losses.csv");
    let mut csv = format!("{}\n", LossRecord::CSV_HEADER);
    fs::write(&csv_path, &csv).map_err(io(&csv_path))?;

    for _ in 0..steps {
        let rec = trainer.train_step()?;
        csv.push_str(&rec.csv_line());
        csv.push('\n');
        // Rewrite the whole log each time progress is checkpointed, plus a
        // final write below; avoids partial-line files on abort.
        let step = trainer.step;
        if sample_every > 0 && step % sample_every as u64 == 0 {
            write_sample_grid(&mut trainer, &grid_z, &out_dir, step)?;
        }
        if checkpoint_every > 0 && step % checkpoint_every as u64 == 0 {
            trainer.save_checkpoint(&out_dir.join(format!("ckpt_{step}")))?;
            fs::write(&csv_path, &csv).map_err(io(&csv_path))?;
        }
    }
    fs::write(&csv_path, &csv).map_err(io(&csv_path))?;
    let final_ckpt = out_dir.join(format!("ckpt_{}", trainer.step));
    if !final_ckpt.exists() {
        trainer.save_checkpoint(&final_ckpt)?;
    }
    let last_step = trainer.step;
    if sample_every > 0 && last_step % sample_every as u64 != 0 {
        write_sample_grid(&mut trainer, &grid_z, &out_dir, last_step)?;
    }
    Ok(out_dir)
}

// ── sample ──────────────────────────────────────────────────────────

/// Generate `n` images for one caption with distinct noise draws. The noise
/// sequence depends only on the seed, so re-running with a different color
/// word changes the conditioning vector and nothing else.
pub fn cmd_sample(ckpt: &Path, caption: &str, n: usize, seed: u64, out_dir: &Path) -> Result<Vec<PathBuf>> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut trainer = Trainer::load_checkpoint(ckpt)?;
    let tokens = vec![data::tokenize(caption)?; n];
    let mut rng = Rng::seed_from(seed);
    let z = sample_noise(n, trainer.run.noise_dim, &mut rng);
    let (imgs, _) = trainer.generate(&tokens, &z)?;
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut written = Vec::with_capacity(n);
    for i in 0..n {
        let img = single_image(&imgs, i)?;
        let path = out_dir.join(format!("sample_{i:03}.ppm"));
        write_ppm(&img, &path)?;
        written.push(path);
    }
    Ok(written)
}

// ── attention export ────────────────────────────────────────────────

fn min_max_normalize(data: &[f64]) -> Vec<f64> {
    let lo = data.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = data.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi - lo < 1e-12 {
        return vec![0.5; data.len()];
    }
    data.iter().map(|v| (v - lo) / (hi - lo)).collect()
}

/// Grayscale [H,W] in [0,1] -> [3,H,W] in [-1,1].
fn gray_image(data: &[f64], h: usize, w: usize) -> Tensor {
    let mut out = vec![0.0; 3 * h * w];
    for ch in 0..3 {
        for (i, &v) in data.iter().enumerate() {
            out[ch * h * w + i] = v * 2.0 - 1.0;
        }
    }
    Tensor::from_vec(out, &[3, h, w])
}

fn nn_upsample(data: &[f64], h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (oh, ow) = (h * factor, w * factor);
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] = data[(i / factor) * w + j / factor];
        }
    }
    out
}

/// Export the attention maps of one generator stage for one caption:
/// pixel maps upsampled to output resolution as grayscale images, channel
/// weights as a bar strip.
pub fn cmd_attn(ckpt: &Path, caption: &str, seed: u64, layer: Option<usize>, out_dir: &Path) -> Result<Vec<PathBuf>> {
    let mut trainer = Trainer::load_checkpoint(ckpt)?;
    let tokens = vec![data::tokenize(caption)?];
    let mut rng = Rng::seed_from(seed);
    let z = sample_noise(1, trainer.run.noise_dim, &mut rng);
    let (img, maps) = trainer.generate(&tokens, &z)?;

    let n_layers = maps.len();
    let layer = layer.unwrap_or(n_layers);
    if layer == 0 || layer > n_layers {
        return Err(Error::invalid(format!(
            "layer {layer} out of range (this generator has layers 1..={n_layers})"
        )));
    }
    let stage = &maps[layer - 1];
    let resolution = trainer.run.resolution();
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut written = Vec::new();

    let pixel_pairs = [("avg", &stage.pixel_avg), ("max", &stage.pixel_max)];
    for (tag, map) in pixel_pairs {
        let Some(map) = map else {
            return Err(Error::invalid(format!(
                "layer {layer} has no pixel attention (module disabled in this run)"
            )));
        };
        let (h, w) = (map.shape()[2], map.shape()[3]);
        let sum: f64 = map.data().iter().sum();
        println!("layer {layer} pixel {tag} attention sum: {sum:.9}");
        debug_assert!((sum - 1.0).abs() < 1e-6);
        let norm = min_max_normalize(map.data());
        let up = nn_upsample(&norm, h, w, resolution / h);
        let path = out_dir.join(format!("attn_layer{layer}_pixel_{tag}.ppm"));
        write_ppm(&gray_image(&up, resolution, resolution), &path)?;
        written.push(path);
    }

    let channel_pairs = [("avg", &stage.channel_avg), ("max", &stage.channel_max)];
    for (tag, weights) in channel_pairs {
        let Some(weights) = weights else {
            return Err(Error::invalid(format!(
                "layer {layer} has no channel attention (module disabled in this run)"
            )));
        };
        let c = weights.shape()[1];
        let norm = min_max_normalize(weights.data());
        // One 8-pixel-wide bar per channel, 32 rows tall.
        let (bar_w, bar_h) = (8usize, 32usize);
        let mut strip = vec![0.0; bar_h * c * bar_w];
        for (ch, &v) in norm.iter().enumerate() {
            for row in 0..bar_h {
                for col in 0..bar_w {
                    strip[row * c * bar_w + ch * bar_w + col] = v;
                }
            }
        }
        let path = out_dir.join(format!("attn_layer{layer}_channel_{tag}.ppm"));
        write_ppm(&gray_image(&strip, bar_h, c * bar_w), &path)?;
        written.push(path);
    }

    // The generated image itself, for side-by-side inspection.
    let img_path = out_dir.join("generated.ppm");
    write_ppm(&single_image(&img, 0)?, &img_path)?;
    written.push(img_path);
    Ok(written)
}

// ── eval ────────────────────────────────────────────────────────────

/// Print proxy metrics, one `key: value` per line.
pub fn cmd_eval(ckpt: &Path, n: usize, seed: u64) -> Result<ProxyMetrics> {
    let mut trainer = Trainer::load_checkpoint(ckpt)?;
    let mut rng = Rng::seed_from(seed);
    let metrics = trainer.evaluate_proxies(n, &mut rng)?;
    println!("color_match: {:.6}", metrics.color_match);
    println!("diversity: {:.6}", metrics.diversity);
    println!("degenerate_alarm: {}", metrics.degenerate);
    Ok(metrics)
}
