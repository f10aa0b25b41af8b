//! Training loop: two-timescale Adam over the generator/encoder and
//! discriminator, one D update then one G update per step, with
//! checkpointing and proxy evaluation metrics.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use crate::attention::AttnMaps;
use crate::config::RunConfig;
use crate::data::{self, mismatch_indices, CaptionSpec, Dataset};
use crate::error::{Error, Result};
use crate::losses::{self, d_adv_loss, d_objective, g_adv_loss, g_objective, gradient_penalty};
use crate::networks::{sample_noise, Discriminator, Generator, TextEncoder};
use crate::nn::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor};

const INIT_STREAM: u64 = 0x1217;
const TRAIN_STREAM: u64 = 0x7a21;

// ── Adam ────────────────────────────────────────────────────────────

/// First/second moment accumulators keyed by parameter path.
#[derive(Default, Clone)]
pub struct AdamState {
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// Bias-corrected Adam update over the given gradients, followed by the
/// clamp of every `.rho` parameter to [0, 1] — the clamp is part of this
/// operation's contract, not a separate pass.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
) -> Result<()> {
    assert!(step >= 1, "adam step counter is 1-based");
    let bc1 = 1.0 - beta1.powi(step as i32);
    let bc2 = 1.0 - beta2.powi(step as i32);
    for (path, grad) in grads {
        for (i, &g) in grad.data().iter().enumerate() {
            if !g.is_finite() {
                return Err(Error::NonFinite {
                    context: format!("gradient of '{path}'"),
                    detail: format!("element {i} is {g}"),
                });
            }
        }
        let param = store.get(path)?;
        if param.shape() != grad.shape() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                detail: format!("'{path}': param {:?} vs grad {:?}", param.shape(), grad.shape()),
            });
        }
        let n = param.numel();
        let m = state.m.entry(path.clone()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(path.clone()).or_insert_with(|| vec![0.0; n]);
        let mut new = param.data().to_vec();
        for i in 0..n {
            let g = grad.data()[i];
            m[i] = beta1 * m[i] + (1.0 - beta1) * g;
            v[i] = beta2 * v[i] + (1.0 - beta2) * g * g;
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            new[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
        store.set(path, Tensor::from_vec(new, param.shape()))?;
    }
    clamp_rho(store)
}

fn clamp_rho(store: &mut ParamStore) -> Result<()> {
    for path in store.paths() {
        if path.ends_with(".rho") {
            let t = store.get(&path)?;
            if t.data().iter().any(|&r| !(0.0..=1.0).contains(&r)) {
                let clamped: Vec<f64> = t.data().iter().map(|&r| r.clamp(0.0, 1.0)).collect();
                store.set(&path, Tensor::from_vec(clamped, t.shape()))?;
            }
        }
    }
    Ok(())
}

// ── Trainer ─────────────────────────────────────────────────────────

/// One row of the loss log.
#[derive(Clone, Copy, Debug)]
pub struct LossRecord {
    pub step: u64,
    pub d_total: f64,
    pub d_adv: f64,
    pub magp: f64,
    pub g_total: f64,
    pub g_adv: f64,
    pub vis: f64,
    /// Batch means of the real and fake logits seen by the D update.
    pub d_real_mean: f64,
    pub d_fake_mean: f64,
}

impl LossRecord {
    pub const CSV_HEADER: &'static str = "step,loss_d,loss_d_adv,loss_magp,loss_g,loss_g_adv,loss_vis";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            self.step, self.d_total, self.d_adv, self.magp, self.g_total, self.g_adv, self.vis
        )
    }
}

pub struct Trainer {
    pub run: RunConfig,
    pub store: ParamStore,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub encoder: TextEncoder,
    pub adam: AdamState,
    pub step: u64,
    pub rng: Rng,
    pub train_data: Dataset,
    pub test_data: Dataset,
}

impl Trainer {
    pub fn new(run: RunConfig) -> Result<Trainer> {
        run.validate()?;
        let mut init_rng = Rng::derive(run.seed, INIT_STREAM);
        let mut store = ParamStore::new();
        let generator = Generator::new(run.generator());
        generator.register(&mut store, &mut init_rng)?;
        let discriminator = Discriminator::new(run.discriminator());
        discriminator.register(&mut store, &mut init_rng)?;
        let encoder = TextEncoder::new(run.encoder());
        encoder.register(&mut store, &mut init_rng)?;
        let (train_data, test_data) =
            data::make_split(run.n_train, run.n_test, run.resolution(), run.seed, run.stratified)?;
        let rng = Rng::derive(run.seed, TRAIN_STREAM);
        Ok(Trainer {
            run,
            store,
            generator,
            discriminator,
            encoder,
            adam: AdamState::default(),
            step: 0,
            rng,
            train_data,
            test_data,
        })
    }

    fn g_prefixes(&self) -> Vec<&'static str> {
        if self.run.freeze_encoder {
            vec!["gen."]
        } else {
            vec!["gen.", "enc."]
        }
    }

    /// One full training step: D update on (real, fake, mismatched), then G
    /// update with fresh fakes against the just-updated discriminator.
    pub fn train_step(&mut self) -> Result<LossRecord> {
        let n = self.run.batch;
        let loss_cfg = self.run.loss();
        let noise_dim = self.run.noise_dim;

        let idx: Vec<usize> = (0..n).map(|_| self.rng.next_index(self.train_data.len())).collect();
        let real = self.train_data.batch_images(&idx)?;
        let tokens = self.train_data.batch_tokens(&idx);
        let specs = self.train_data.batch_specs(&idx);
        let mm = mismatch_indices(&specs)?;
        let mm_tokens: Vec<Vec<usize>> = mm.iter().map(|&j| tokens[j].clone()).collect();
        let z_d = sample_noise(n, noise_dim, &mut self.rng);
        let z_g = sample_noise(n, noise_dim, &mut self.rng);

        // ---- Discriminator update. Sentences and fakes are produced
        // outside the tape: the encoder and generator are constants here.
        self.store.detach_all();
        let s = self.encoder.encode(&self.store, &tokens)?;
        let s_mm = self.encoder.encode(&self.store, &mm_tokens)?;
        let (fake, _) = self.generator.forward(&self.store, &z_d, &s)?;

        let tape = Tape::new();
        self.store.attach_all(&tape);
        let d_result = (|| -> Result<(f64, f64, f64, f64, f64)> {
            let xw = tape.watch(&real.detach().requires_grad(true));
            let sw = tape.watch(&s.detach().requires_grad(true));
            let trunk_real = self.discriminator.trunk(&self.store, &xw)?;
            let logit_real = self.discriminator.head(&self.store, &trunk_real, &sw)?;
            let logit_mm = self.discriminator.head(&self.store, &trunk_real, &s_mm.detach())?;
            let trunk_fake = self.discriminator.trunk(&self.store, &fake.detach())?;
            let logit_fake = self.discriminator.head(&self.store, &trunk_fake, &sw)?;

            let l_adv = d_adv_loss(&logit_real, &logit_fake, &logit_mm)?;
            let (magp, magp_val) = if loss_cfg.lambda2 > 0.0 {
                let penalty = gradient_penalty(&tape, &logit_real, &xw, &sw, loss_cfg.p)?;
                let val = penalty.scalar_value();
                (Some(penalty), val)
            } else {
                (None, 0.0)
            };
            let l_d = match &magp {
                Some(m) => d_objective(&l_adv, m, loss_cfg.lambda2)?,
                None => l_adv.clone(),
            };
            l_d.validate_finite(&format!("discriminator loss at step {}", self.step + 1))?;

            let d_params = self.store.trainable_with_prefix(&["disc."]);
            let refs: Vec<&Tensor> = d_params.iter().map(|(_, t)| t).collect();
            let grads = tape.backward(&l_d, &refs, false)?;
            let grad_map: BTreeMap<String, Tensor> =
                d_params.iter().map(|(p, _)| p.clone()).zip(grads).collect();
            adam_step(
                &mut self.store,
                &grad_map,
                &mut self.adam,
                self.run.lr_d,
                self.run.beta1,
                self.run.beta2,
                self.run.adam_eps,
                self.step + 1,
            )?;
            Ok((
                l_d.scalar_value(),
                l_adv.scalar_value(),
                magp_val,
                mean_of(&logit_real),
                mean_of(&logit_fake),
            ))
        })();
        self.store.detach_all();
        let (d_total, d_adv, magp_val, d_real_mean, d_fake_mean) = d_result?;
        drop(tape);

        // ---- Generator/encoder update against the post-update D. Real
        // features for the visual loss are plain values (no gradient).
        let f_real = if self.run.visual_loss {
            let trunk = self.discriminator.trunk(&self.store, &real)?;
            Some(trunk.reshape(&[n, trunk.numel() / n])?)
        } else {
            None
        };
        let tape = Tape::new();
        self.store.attach_all(&tape);
        let g_result = (|| -> Result<(f64, f64, f64)> {
            let s_g = self.encoder.encode(&self.store, &tokens)?;
            let (fake_g, _) = self.generator.forward(&self.store, &z_g, &s_g)?;
            let d_out = self.discriminator.forward(&self.store, &fake_g, &s_g)?;
            let l_adv = g_adv_loss(&d_out.logit)?;
            let (l_g, vis_val) = match &f_real {
                Some(fr) => {
                    let vis = losses::visual_loss(fr, &d_out.features)?;
                    let val = vis.scalar_value();
                    (g_objective(&l_adv, &vis, loss_cfg.lambda1)?, val)
                }
                None => (l_adv.clone(), 0.0),
            };
            l_g.validate_finite(&format!("generator loss at step {}", self.step + 1))?;

            let g_params = self.store.trainable_with_prefix(&self.g_prefixes());
            let refs: Vec<&Tensor> = g_params.iter().map(|(_, t)| t).collect();
            let grads = tape.backward(&l_g, &refs, false)?;
            let grad_map: BTreeMap<String, Tensor> =
                g_params.iter().map(|(p, _)| p.clone()).zip(grads).collect();
            adam_step(
                &mut self.store,
                &grad_map,
                &mut self.adam,
                self.run.lr_g,
                self.run.beta1,
                self.run.beta2,
                self.run.adam_eps,
                self.step + 1,
            )?;
            Ok((l_g.scalar_value(), l_adv.scalar_value(), vis_val))
        })();
        self.store.detach_all();
        let (g_total, g_adv, vis) = g_result?;

        self.step += 1;
        Ok(LossRecord {
            step: self.step,
            d_total,
            d_adv,
            magp: magp_val,
            g_total,
            g_adv,
            vis,
            d_real_mean,
            d_fake_mean,
        })
    }

    /// Run `steps` training steps, invoking the callback after each.
    pub fn run_steps(
        &mut self,
        steps: usize,
        mut on_step: impl FnMut(&mut Trainer, LossRecord) -> Result<()>,
    ) -> Result<()> {
        for _ in 0..steps {
            let rec = self.train_step()?;
            on_step(self, rec)?;
        }
        Ok(())
    }

    /// Generate images for caption token batches without recording.
    pub fn generate(&mut self, tokens: &[Vec<usize>], z: &Tensor) -> Result<(Tensor, Vec<AttnMaps>)> {
        self.store.detach_all();
        let s = self.encoder.encode(&self.store, tokens)?;
        self.generator.forward(&self.store, z, &s)
    }

    /// Check that every CAdaILN mixing coefficient sits in [0, 1].
    pub fn rho_within_bounds(&self) -> bool {
        self.store.paths().iter().filter(|p| p.ends_with(".rho")).all(|p| {
            self.store
                .get(p)
                .map(|t| t.data().iter().all(|&r| (0.0..=1.0).contains(&r)))
                .unwrap_or(false)
        })
    }
}

fn mean_of(t: &Tensor) -> f64 {
    t.data().iter().sum::<f64>() / t.numel() as f64
}

// ── Proxy metrics ───────────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct ProxyMetrics {
    /// Fraction of generated images whose dominant foreground color matches
    /// the caption.
    pub color_match: f64,
    /// Mean pairwise L2 distance between images generated for the same
    /// caption with different noise.
    pub diversity: f64,
    /// Raised when diversity collapses below 1e-3.
    pub degenerate: bool,
}

impl Trainer {
    /// Proxy evaluation: color agreement over `n` images with captions
    /// cycling the full spec list, plus same-caption diversity probed with
    /// 8 captions × 4 draws.
    pub fn evaluate_proxies(&mut self, n: usize, rng: &mut Rng) -> Result<ProxyMetrics> {
        if n < 2 {
            return Err(Error::invalid("evaluate_proxies: diversity needs n >= 2"));
        }
        let specs = CaptionSpec::all();
        let noise_dim = self.run.noise_dim;
        let mut matches = 0usize;
        let mut done = 0usize;
        while done < n {
            let k = 16.min(n - done);
            let batch_specs: Vec<CaptionSpec> = (done..done + k).map(|j| specs[j % specs.len()]).collect();
            let tokens: Vec<Vec<usize>> = batch_specs.iter().map(|s| s.tokens()).collect();
            let z = sample_noise(k, noise_dim, rng);
            let (imgs, _) = self.generate(&tokens, &z)?;
            for (row, spec) in batch_specs.iter().enumerate() {
                let img = single_image(&imgs, row)?;
                if data::dominant_foreground_color(&img) == spec.color {
                    matches += 1;
                }
            }
            done += k;
        }

        let draws = 4usize;
        let mut pair_sum = 0.0;
        let mut pair_count = 0usize;
        for spec in specs.iter().step_by(specs.len() / 8).take(8) {
            let tokens: Vec<Vec<usize>> = (0..draws).map(|_| spec.tokens()).collect();
            let z = sample_noise(draws, noise_dim, rng);
            let (imgs, _) = self.generate(&tokens, &z)?;
            let singles: Vec<Tensor> = (0..draws).map(|r| single_image(&imgs, r)).collect::<Result<_>>()?;
            for i in 0..draws {
                for j in i + 1..draws {
                    let d2: f64 = singles[i]
                        .data()
                        .iter()
                        .zip(singles[j].data())
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    pair_sum += d2.sqrt();
                    pair_count += 1;
                }
            }
        }
        let diversity = pair_sum / pair_count as f64;
        Ok(ProxyMetrics {
            color_match: matches as f64 / n as f64,
            diversity,
            degenerate: diversity < 1e-3,
        })
    }
}

/// Extract sample `row` of an [N,3,R,R] batch as [3,R,R].
pub fn single_image(batch: &Tensor, row: usize) -> Result<Tensor> {
    let s = batch.shape();
    batch.slice(0, row, 1)?.reshape(&[s[1], s[2], s[3]])
}

// ── Checkpoints ─────────────────────────────────────────────────────

const MAGIC: &[u8; 4] = b"DTGA";
const VERSION: u32 = 1;

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn new() -> Self {
        Writer { buf: Vec::new() }
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn f64s(&mut self, vs: &[f64]) {
        for v in vs {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len() as u32);
        self.buf.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::invalid(format!(
                "{}: truncated checkpoint (wanted {n} bytes at offset {})",
                self.path, self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(8 * n)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        let raw = self.take(n)?;
        String::from_utf8(raw.to_vec()).map_err(|_| Error::invalid(format!("{}: invalid utf-8 in checkpoint", self.path)))
    }
}

impl Trainer {
    /// Serialize parameters, optimizer moments, step counter, RNG state,
    /// and the resolved config. Byte-deterministic: save→load→save is
    /// identical.
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut w = Writer::new();
        w.buf.extend_from_slice(MAGIC);
        w.u32(VERSION);

        let paths = self.store.paths();
        w.u32(paths.len() as u32);
        for p in &paths {
            let t = self.store.get(p)?;
            w.str(p);
            w.u32(t.rank() as u32);
            for &d in t.shape() {
                w.u64(d as u64);
            }
            w.f64s(t.data());
        }

        w.u64(self.step);
        w.u32(self.adam.m.len() as u32);
        for (p, m) in &self.adam.m {
            let v = &self.adam.v[p];
            w.str(p);
            w.u64(m.len() as u64);
            w.f64s(m);
            w.f64s(v);
        }

        let (seed, word_pos) = self.rng.state();
        w.u64(seed);
        w.u64(word_pos as u64);
        w.u64((word_pos >> 64) as u64);

        w.str(&self.run.to_text());

        std::fs::write(path, &w.buf).map_err(|e| Error::io(path.display().to_string(), e))
    }

    /// Rebuild a trainer from a checkpoint: networks and datasets come from
    /// the embedded config, parameters/moments/RNG from the byte payload.
    pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut r = Reader { buf: &bytes, pos: 0, path: path.display().to_string() };

        if r.take(4)? != MAGIC {
            return Err(Error::invalid(format!("{}: not a checkpoint (bad magic)", r.path)));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::invalid(format!(
                "{}: unsupported checkpoint version {version} (expected {VERSION})",
                r.path
            )));
        }

        let n_params = r.u32()? as usize;
        let mut params: Vec<(String, Tensor)> = Vec::with_capacity(n_params);
        for _ in 0..n_params {
            let p = r.str()?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u64()? as usize);
            }
            let data = r.f64s(shape.iter().product())?;
            params.push((p, Tensor::from_vec(data, &shape)));
        }

        let step = r.u64()?;
        let n_moments = r.u32()? as usize;
        let mut adam = AdamState::default();
        for _ in 0..n_moments {
            let p = r.str()?;
            let len = r.u64()? as usize;
            let m = r.f64s(len)?;
            let v = r.f64s(len)?;
            adam.m.insert(p.clone(), m);
            adam.v.insert(p, v);
        }

        let seed = r.u64()?;
        let lo = r.u64()? as u128;
        let hi = r.u64()? as u128;
        let rng = Rng::restore(seed, lo | (hi << 64));

        let config_text = r.str()?;
        if r.pos != bytes.len() {
            return Err(Error::invalid(format!(
                "{}: {} trailing bytes after checkpoint payload",
                r.path,
                bytes.len() - r.pos
            )));
        }

        let run = RunConfig::parse_text(&config_text)?;
        let mut trainer = Trainer::new(run)?;
        let expected = trainer.store.paths();
        let got: Vec<String> = params.iter().map(|(p, _)| p.clone()).collect();
        if expected != got {
            return Err(Error::invalid(format!(
                "{}: checkpoint parameters do not match the embedded config ({} vs {} entries)",
                r.path,
                got.len(),
                expected.len()
            )));
        }
        for (p, t) in params {
            trainer.store.set(&p, t)?;
        }
        trainer.adam = adam;
        trainer.step = step;
        trainer.rng = rng;
        Ok(trainer)
    }
}
