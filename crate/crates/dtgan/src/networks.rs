//! The three networks: recurrent sentence encoder, staged generator, and
//! matching-aware discriminator.
//!
//! Sentence vectors are `[N, D]` tensors, noise vectors `[N, Z]`, images
//! `[N, 3, R, R]` in [-1, 1]. All forwards are pure functions of the
//! parameter store.

use crate::attention::{AttnMaps, DualAttentionLayer, StageConfig};
use crate::error::{Error, Result};
use crate::nn::{CellKind, Conv2dLayer, Linear, ParamStore, RecurrentCell};
use crate::rng::Rng;
use crate::tensor::Tensor;

// ── Text encoder ────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub seq_len: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub sent_dim: usize,
    pub cell: CellKind,
    /// Combine the two directions' final hidden states by summation instead
    /// of concatenation.
    pub combine_sum: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 18,
            seq_len: 8,
            embed_dim: 16,
            hidden_dim: 16,
            sent_dim: 32,
            cell: CellKind::Gated,
            combine_sum: false,
        }
    }
}

/// Single-layer bidirectional recurrent encoder over token ids; the final
/// hidden states of both directions represent the sentence.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub cfg: EncoderConfig,
    fwd: RecurrentCell,
    bwd: RecurrentCell,
    proj: Linear,
}

impl TextEncoder {
    pub fn new(cfg: EncoderConfig) -> Self {
        let combined = if cfg.combine_sum { cfg.hidden_dim } else { 2 * cfg.hidden_dim };
        TextEncoder {
            fwd: RecurrentCell::new("enc.fwd", cfg.cell, cfg.embed_dim, cfg.hidden_dim),
            bwd: RecurrentCell::new("enc.bwd", cfg.cell, cfg.embed_dim, cfg.hidden_dim),
            proj: Linear::new("enc.proj", combined, cfg.sent_dim, true),
            cfg,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        store.register(
            "enc.embed",
            crate::nn::init_param(&[self.cfg.vocab_size, self.cfg.embed_dim], crate::nn::InitScheme::ScaledUniform, rng)?,
            true,
        )?;
        self.fwd.register(store, rng)?;
        self.bwd.register(store, rng)?;
        self.proj.register(store, rng)
    }

    fn embed_step(&self, store: &ParamStore, tokens: &[Vec<usize>], t: usize) -> Result<Tensor> {
        let n = tokens.len();
        let v = self.cfg.vocab_size;
        let mut onehot = vec![0.0; n * v];
        for (row, seq) in tokens.iter().enumerate() {
            onehot[row * v + seq[t]] = 1.0;
        }
        let onehot = Tensor::from_vec(onehot, &[n, v]);
        onehot.matmul(&store.get("enc.embed")?)
    }

    /// Encode padded token-id sequences to sentence vectors [N, D].
    pub fn encode(&self, store: &ParamStore, tokens: &[Vec<usize>]) -> Result<Tensor> {
        let l = self.cfg.seq_len;
        if tokens.is_empty() {
            return Err(Error::invalid("encode_sentence: empty batch"));
        }
        for seq in tokens {
            if seq.len() != l {
                return Err(Error::invalid(format!(
                    "encode_sentence: sequence length {} != configured {l}",
                    seq.len()
                )));
            }
            for &id in seq {
                if id >= self.cfg.vocab_size {
                    return Err(Error::invalid(format!(
                        "encode_sentence: token id {id} out of vocabulary (size {})",
                        self.cfg.vocab_size
                    )));
                }
            }
        }
        let n = tokens.len();
        let embedded: Vec<Tensor> = (0..l).map(|t| self.embed_step(store, tokens, t)).collect::<Result<_>>()?;

        let mut state_f = self.fwd.init_state(n);
        for e in &embedded {
            state_f = self.fwd.step(store, &state_f, e)?;
        }
        let mut state_b = self.bwd.init_state(n);
        for e in embedded.iter().rev() {
            state_b = self.bwd.step(store, &state_b, e)?;
        }
        let h_f = self.fwd.hidden_of(&state_f)?;
        let h_b = self.bwd.hidden_of(&state_b)?;
        let combined = if self.cfg.combine_sum {
            h_f.add(&h_b)?
        } else {
            Tensor::concat(&[&h_f, &h_b], 1)?
        };
        self.proj.forward(store, &combined)
    }
}

// ── Generator ───────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct GeneratorConfig {
    pub num_layers: usize,
    pub base_size: usize,
    pub base_channels: usize,
    pub min_channels: usize,
    pub sent_dim: usize,
    pub noise_dim: usize,
    pub stage: StageConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        GeneratorConfig {
            num_layers: 4,
            base_size: 4,
            base_channels: 16,
            min_channels: 4,
            sent_dim: 32,
            noise_dim: 16,
            stage: StageConfig::default(),
        }
    }
}

impl GeneratorConfig {
    /// Output side length: the first stage keeps the base resolution, every
    /// later stage doubles it.
    pub fn resolution(&self) -> usize {
        self.base_size << (self.num_layers - 1)
    }

    /// Channel count produced by stage `i` (1-based): halves per upsample,
    /// floored at `min_channels`.
    pub fn stage_channels(&self, i: usize) -> usize {
        (self.base_channels >> (i - 1)).max(self.min_channels)
    }
}

#[derive(Clone, Debug)]
pub struct Generator {
    pub cfg: GeneratorConfig,
    fc: Linear,
    layers: Vec<DualAttentionLayer>,
    to_rgb: Conv2dLayer,
}

impl Generator {
    pub fn new(cfg: GeneratorConfig) -> Self {
        assert!(cfg.num_layers >= 1);
        let h0_elems = cfg.base_channels * cfg.base_size * cfg.base_size;
        let mut layers = Vec::with_capacity(cfg.num_layers);
        let mut in_ch = cfg.base_channels;
        for i in 1..=cfg.num_layers {
            let out_ch = cfg.stage_channels(i);
            layers.push(DualAttentionLayer::new(
                format!("gen.layer{i}"),
                i,
                in_ch,
                out_ch,
                cfg.sent_dim,
                i > 1,
                cfg.stage,
            ));
            in_ch = out_ch;
        }
        Generator {
            fc: Linear::new("gen.fc", cfg.noise_dim, h0_elems, true),
            to_rgb: Conv2dLayer::new("gen.to_rgb", in_ch, 3, 3, 1, 1),
            layers,
            cfg,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.fc.register(store, rng)?;
        for layer in &self.layers {
            layer.register(store, rng)?;
        }
        self.to_rgb.register(store, rng)
    }

    /// z: [N, Z], s: [N, D] -> (image [N, 3, R, R] in [-1,1], per-stage
    /// attention maps).
    pub fn forward(&self, store: &ParamStore, z: &Tensor, s: &Tensor) -> Result<(Tensor, Vec<AttnMaps>)> {
        if z.rank() != 2 || z.shape()[1] != self.cfg.noise_dim {
            return Err(Error::ShapeMismatch {
                op: "generator_forward",
                detail: format!("noise {:?} does not match dim {}", z.shape(), self.cfg.noise_dim),
            });
        }
        if s.rank() != 2 || s.shape()[1] != self.cfg.sent_dim {
            return Err(Error::ShapeMismatch {
                op: "generator_forward",
                detail: format!("sentence {:?} does not match dim {}", s.shape(), self.cfg.sent_dim),
            });
        }
        let n = z.shape()[0];
        let mut h = self
            .fc
            .forward(store, z)?
            .reshape(&[n, self.cfg.base_channels, self.cfg.base_size, self.cfg.base_size])?;
        let mut all_maps = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (next, maps) = layer.forward(store, &h, s)?;
            h = next;
            all_maps.push(maps);
        }
        let img = self.to_rgb.forward(store, &h)?.tanh()?;
        Ok((img, all_maps))
    }
}

// ── Discriminator ───────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    pub base_channels: usize,
    pub max_channels: usize,
    pub sent_dim: usize,
    /// Channels of the replicated sentence projection at the 4×4 stage.
    pub proj_channels: usize,
    pub head_channels: usize,
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            resolution: 32,
            base_channels: 16,
            max_channels: 64,
            sent_dim: 32,
            proj_channels: 16,
            head_channels: 32,
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    fn n_blocks(&self) -> usize {
        assert!(
            self.resolution >= 8 && self.resolution.is_power_of_two(),
            "discriminator resolution must be a power of two >= 8"
        );
        (self.resolution / 4).trailing_zeros() as usize
    }

    fn block_channels(&self, i: usize) -> usize {
        (self.base_channels << i).min(self.max_channels)
    }

    /// Flattened feature dimension of the text-free 4×4 map.
    pub fn feature_dim(&self) -> usize {
        self.block_channels(self.n_blocks() - 1) * 16
    }
}

/// Scalar matching score and text-free image features.
#[derive(Clone, Debug)]
pub struct DiscriminatorOutput {
    /// [N] matching logits.
    pub logit: Tensor,
    /// [N, F] flattened penultimate features, computed before any text
    /// enters the network.
    pub features: Tensor,
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    pub cfg: DiscriminatorConfig,
    blocks: Vec<Conv2dLayer>,
    sent_proj: Linear,
    head1: Conv2dLayer,
    head2: Conv2dLayer,
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig) -> Self {
        let n = cfg.n_blocks();
        let mut blocks = Vec::with_capacity(n);
        let mut in_ch = 3;
        for i in 0..n {
            let out_ch = cfg.block_channels(i);
            blocks.push(Conv2dLayer::new(format!("disc.block{i}"), in_ch, out_ch, 3, 2, 1));
            in_ch = out_ch;
        }
        Discriminator {
            sent_proj: Linear::new("disc.sent_proj", cfg.sent_dim, cfg.proj_channels, true),
            head1: Conv2dLayer::new("disc.head1", in_ch + cfg.proj_channels, cfg.head_channels, 3, 1, 1),
            head2: Conv2dLayer::new("disc.head2", cfg.head_channels, 1, 4, 1, 0),
            blocks,
            cfg,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        for b in &self.blocks {
            b.register(store, rng)?;
        }
        self.sent_proj.register(store, rng)?;
        self.head1.register(store, rng)?;
        self.head2.register(store, rng)
    }

    /// Image trunk down to the 4×4 map; no text involved.
    pub fn trunk(&self, store: &ParamStore, img: &Tensor) -> Result<Tensor> {
        if img.rank() != 4 || img.shape()[1] != 3 || img.shape()[2] != self.cfg.resolution || img.shape()[3] != self.cfg.resolution {
            return Err(Error::ShapeMismatch {
                op: "discriminator_forward",
                detail: format!(
                    "expected [N,3,{r},{r}] image, got {:?}",
                    img.shape(),
                    r = self.cfg.resolution
                ),
            });
        }
        let mut h = img.clone();
        for b in &self.blocks {
            h = b.forward(store, &h)?.leaky_relu(self.cfg.leaky_slope)?;
        }
        Ok(h)
    }

    /// Matching head: project the sentence, replicate it over the 4×4 map,
    /// concatenate channel-wise, and reduce to a scalar logit per sample.
    pub fn head(&self, store: &ParamStore, trunk: &Tensor, s: &Tensor) -> Result<Tensor> {
        let n = trunk.shape()[0];
        let p = self
            .sent_proj
            .forward(store, s)?
            .reshape(&[n, self.cfg.proj_channels, 1, 1])?
            .broadcast_to(&[n, self.cfg.proj_channels, 4, 4])?;
        let cat = Tensor::concat(&[trunk, &p], 1)?;
        let q = self.head1.forward(store, &cat)?.leaky_relu(self.cfg.leaky_slope)?;
        self.head2.forward(store, &q)?.reshape(&[n])
    }

    pub fn forward(&self, store: &ParamStore, img: &Tensor, s: &Tensor) -> Result<DiscriminatorOutput> {
        let trunk = self.trunk(store, img)?;
        let n = trunk.shape()[0];
        let features = trunk.reshape(&[n, trunk.numel() / n])?;
        let logit = self.head(store, &trunk, s)?;
        Ok(DiscriminatorOutput { logit, features })
    }
}

/// Draw standard-normal noise vectors [batch, dim].
pub fn sample_noise(batch: usize, dim: usize, rng: &mut Rng) -> Tensor {
    Tensor::from_fn(&[batch, dim], |_| rng.next_normal())
}

#[cfg(test)]
mod tests;
