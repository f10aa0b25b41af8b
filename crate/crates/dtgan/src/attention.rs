//! The three sentence-conditioned layer mechanisms — channel attention,
//! pixel attention, and the adaptive instance/layer normalization blend —
//! plus their composition into one generator stage.
//!
//! Both attention modules end in a gated residual (`y = γ·o + h` with γ
//! starting at 0), so a freshly initialized stage is the identity on its
//! input and the attention path fades in during training.

use crate::error::{Error, Result};
use crate::nn::{
    global_pool_channels, init_param, spatial_pool, Conv2dLayer, InitScheme, Linear, ParamStore,
    PointwiseConv, PoolMode,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

pub const NORM_EPS: f64 = 1e-5;

/// How channel-attention scores combine the pooled-channel query with the
/// sentence key/value. `Elementwise` treats key and value as per-channel
/// modulators; `Outer` collapses them to a scalar temperature on the query.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CamScoreMode {
    Elementwise,
    Outer,
}

/// Normalization variant at each of the two per-stage norm sites.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NormMode {
    /// Sentence-conditioned instance/layer blend with learnable per-channel ρ.
    CadaIln,
    /// Batch standardization with sentence-conditioned scale and shift.
    BnSent,
    /// No normalization.
    None,
}

/// Attention weights produced by one stage, for export and inspection.
#[derive(Clone, Debug)]
pub struct AttnMaps {
    pub layer: usize,
    /// [N, C] softmax over channels, average-pool and max-pool paths.
    pub channel_avg: Option<Tensor>,
    pub channel_max: Option<Tensor>,
    /// [N, 1, H, W] softmax over all spatial positions.
    pub pixel_avg: Option<Tensor>,
    pub pixel_max: Option<Tensor>,
}

// ── Channel-aware attention ─────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct CamParams {
    pub prefix: String,
    pub channels: usize,
    pub sent_dim: usize,
    w_qa: PointwiseConv,
    w_qm: PointwiseConv,
    w_kc: Linear,
    w_vc: Linear,
    w_c: PointwiseConv,
}

impl CamParams {
    pub fn new(prefix: impl Into<String>, channels: usize, sent_dim: usize) -> Self {
        let prefix = prefix.into();
        CamParams {
            w_qa: PointwiseConv::new(format!("{prefix}.w_qa"), channels, channels),
            w_qm: PointwiseConv::new(format!("{prefix}.w_qm"), channels, channels),
            w_kc: Linear::new(format!("{prefix}.w_kc"), sent_dim, channels, false),
            w_vc: Linear::new(format!("{prefix}.w_vc"), sent_dim, channels, false),
            w_c: PointwiseConv::new(format!("{prefix}.w_c"), 2 * channels, channels),
            prefix,
            channels,
            sent_dim,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.w_qa.register(store, rng)?;
        self.w_qm.register(store, rng)?;
        self.w_kc.register(store, rng)?;
        self.w_vc.register(store, rng)?;
        self.w_c.register(store, rng)?;
        store.register(
            &format!("{}.gamma", self.prefix),
            init_param(&[1], InitScheme::Zeros, rng)?,
            true,
        )
    }
}

/// Channel-aware attention: reweights channels by their agreement with the
/// sentence, then blends through a zero-initialized residual gate.
pub fn cam_forward(
    h: &Tensor,
    s: &Tensor,
    params: &CamParams,
    store: &ParamStore,
    mode: CamScoreMode,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (c, d) = (params.channels, params.sent_dim);
    if h.rank() != 4 || h.shape()[1] != c {
        return Err(Error::ShapeMismatch {
            op: "cam_forward",
            detail: format!("feature map {:?} does not match {c} channels", h.shape()),
        });
    }
    if s.rank() != 2 || s.shape()[1] != d {
        return Err(Error::ShapeMismatch {
            op: "cam_forward",
            detail: format!("sentence {:?} does not match dim {d}", s.shape()),
        });
    }
    let n = h.shape()[0];

    let x_a = global_pool_channels(h, PoolMode::Avg)?;
    let x_m = global_pool_channels(h, PoolMode::Max)?;
    let q_ac = params.w_qa.forward(store, &x_a)?.reshape(&[n, c])?;
    let q_mc = params.w_qm.forward(store, &x_m)?.reshape(&[n, c])?;
    let k_c = params.w_kc.forward(store, s)?;
    let v_c = params.w_vc.forward(store, s)?;

    let score = |q: &Tensor| -> Result<Tensor> {
        match mode {
            CamScoreMode::Elementwise => q.mul(&k_c)?.mul(&v_c)?.softmax(1),
            CamScoreMode::Outer => {
                let temp = k_c.mul(&v_c)?.sum_axes(&[1], true)?;
                q.mul(&temp)?.softmax(1)
            }
        }
    };
    let alpha_a = score(&q_ac)?;
    let alpha_m = score(&q_mc)?;

    let o_ac = alpha_a.reshape(&[n, c, 1, 1])?.mul(h)?;
    let o_mc = alpha_m.reshape(&[n, c, 1, 1])?.mul(h)?;
    let fused = params.w_c.forward(store, &Tensor::concat(&[&o_ac, &o_mc], 1)?)?.relu()?;
    let gamma = store.get(&format!("{}.gamma", params.prefix))?;
    let y = gamma.mul(&fused)?.add(h)?;
    Ok((y, alpha_a, alpha_m))
}

// ── Pixel-aware attention ───────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct PamParams {
    pub prefix: String,
    pub sent_dim: usize,
    w_kp: Linear,
    w_vp: Linear,
}

impl PamParams {
    pub fn new(prefix: impl Into<String>, sent_dim: usize) -> Self {
        let prefix = prefix.into();
        PamParams {
            w_kp: Linear::new(format!("{prefix}.w_kp"), sent_dim, 1, false),
            w_vp: Linear::new(format!("{prefix}.w_vp"), sent_dim, 1, false),
            prefix,
            sent_dim,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.w_kp.register(store, rng)?;
        self.w_vp.register(store, rng)?;
        // Fusion of the avg/max paths: a 2 -> 1 projection shared across
        // channels.
        store.register(
            &format!("{}.w_p", self.prefix),
            init_param(&[2], InitScheme::ScaledUniform, rng)?,
            true,
        )?;
        store.register(
            &format!("{}.gamma", self.prefix),
            init_param(&[1], InitScheme::Zeros, rng)?,
            true,
        )
    }
}

/// Pixel-aware attention: a sentence-tempered softmax over all spatial
/// positions of the channel-pooled map, applied back to every channel.
pub fn pam_forward(
    hh: &Tensor,
    s: &Tensor,
    params: &PamParams,
    store: &ParamStore,
) -> Result<(Tensor, Tensor, Tensor)> {
    if hh.rank() != 4 {
        return Err(Error::ShapeMismatch {
            op: "pam_forward",
            detail: format!("expected NCHW feature map, got {:?}", hh.shape()),
        });
    }
    if s.rank() != 2 || s.shape()[1] != params.sent_dim {
        return Err(Error::ShapeMismatch {
            op: "pam_forward",
            detail: format!("sentence {:?} does not match dim {}", s.shape(), params.sent_dim),
        });
    }
    let (n, _, hdim, wdim) = (hh.shape()[0], hh.shape()[1], hh.shape()[2], hh.shape()[3]);

    let e_a = spatial_pool(hh, PoolMode::Avg)?;
    let e_m = spatial_pool(hh, PoolMode::Max)?;
    let k_p = params.w_kp.forward(store, s)?.reshape(&[n, 1, 1, 1])?;
    let v_p = params.w_vp.forward(store, s)?.reshape(&[n, 1, 1, 1])?;

    let attend = |e: &Tensor| -> Result<Tensor> {
        let pre = e.mul(&k_p)?.mul(&v_p)?;
        pre.reshape(&[n, hdim * wdim])?.softmax(1)?.reshape(&[n, 1, hdim, wdim])
    };
    let alpha_a = attend(&e_a)?;
    let alpha_m = attend(&e_m)?;

    let o_ap = alpha_a.mul(hh)?;
    let o_mp = alpha_m.mul(hh)?;
    let w_p = store.get(&format!("{}.w_p", params.prefix))?;
    let fused = o_ap
        .mul(&w_p.slice(0, 0, 1)?)?
        .add(&o_mp.mul(&w_p.slice(0, 1, 1)?)?)?
        .relu()?;
    let gamma = store.get(&format!("{}.gamma", params.prefix))?;
    let y = gamma.mul(&fused)?.add(hh)?;
    Ok((y, alpha_a, alpha_m))
}

// ── Conditional normalization ───────────────────────────────────────

#[derive(Clone, Debug)]
pub struct NormSite {
    pub prefix: String,
    pub channels: usize,
    pub sent_dim: usize,
    pub mode: NormMode,
    w1: Linear,
    w2: Linear,
}

impl NormSite {
    pub fn new(prefix: impl Into<String>, channels: usize, sent_dim: usize, mode: NormMode) -> Self {
        let prefix = prefix.into();
        NormSite {
            w1: Linear::new(format!("{prefix}.w1"), sent_dim, channels, false),
            w2: Linear::new(format!("{prefix}.w2"), sent_dim, channels, false),
            prefix,
            channels,
            sent_dim,
            mode,
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        match self.mode {
            NormMode::None => Ok(()),
            NormMode::BnSent => {
                self.w1.register(store, rng)?;
                self.w2.register(store, rng)
            }
            NormMode::CadaIln => {
                self.w1.register(store, rng)?;
                self.w2.register(store, rng)?;
                // ρ starts at 1: pure instance normalization.
                store.register(
                    &format!("{}.rho", self.prefix),
                    init_param(&[self.channels], InitScheme::Ones, rng)?,
                    true,
                )
            }
        }
    }

    fn gamma_beta(&self, store: &ParamStore, s: &Tensor, n: usize) -> Result<(Tensor, Tensor)> {
        let c = self.channels;
        let gamma = self.w1.forward(store, s)?.reshape(&[n, c, 1, 1])?;
        let beta = self.w2.forward(store, s)?.reshape(&[n, c, 1, 1])?;
        Ok((gamma, beta))
    }

    pub fn forward(&self, store: &ParamStore, a: &Tensor, s: &Tensor) -> Result<Tensor> {
        match self.mode {
            NormMode::None => Ok(a.clone()),
            NormMode::CadaIln => cadailn_forward(a, s, self, store),
            NormMode::BnSent => {
                let n = a.shape()[0];
                let mu = a.mean_axes(&[0, 2, 3], true)?;
                let centered = a.sub(&mu)?;
                let var = centered.mul(&centered)?.mean_axes(&[0, 2, 3], true)?;
                let norm = centered.div(&var.add_scalar(NORM_EPS)?.pow_scalar(0.5)?)?;
                let (gamma, beta) = self.gamma_beta(store, s, n)?;
                gamma.mul(&norm)?.add(&beta)
            }
        }
    }
}

/// Instance/layer normalization blend conditioned on the sentence vector:
/// per-channel ρ mixes the spatially standardized and the per-sample
/// standardized maps, then γ(s) scales and β(s) shifts. Variances are
/// biased, ε sits inside the root.
pub fn cadailn_forward(a: &Tensor, s: &Tensor, site: &NormSite, store: &ParamStore) -> Result<Tensor> {
    if a.rank() != 4 || a.shape()[1] != site.channels {
        return Err(Error::ShapeMismatch {
            op: "cadailn_forward",
            detail: format!("feature map {:?} does not match {} channels", a.shape(), site.channels),
        });
    }
    let (n, c, hdim, wdim) = (a.shape()[0], a.shape()[1], a.shape()[2], a.shape()[3]);
    if hdim * wdim < 2 {
        return Err(Error::invalid(format!(
            "cadailn_forward: spatial extent {hdim}x{wdim} too small for instance statistics"
        )));
    }
    let rho = store.get(&format!("{}.rho", site.prefix))?;
    for &r in rho.data() {
        if !(0.0..=1.0).contains(&r) {
            return Err(Error::invalid(format!(
                "cadailn_forward: rho value {r} outside [0,1]; optimizer clamp violated"
            )));
        }
    }

    let standardize = |axes: &[usize]| -> Result<Tensor> {
        let mu = a.mean_axes(axes, true)?;
        let centered = a.sub(&mu)?;
        let var = centered.mul(&centered)?.mean_axes(axes, true)?;
        centered.div(&var.add_scalar(NORM_EPS)?.pow_scalar(0.5)?)
    };
    let a_in = standardize(&[2, 3])?; // per channel over space
    let a_ln = standardize(&[1, 2, 3])?; // per sample over everything

    let rho_b = rho.reshape(&[c, 1, 1])?;
    let mix = rho_b
        .mul(&a_in)?
        .add(&rho_b.neg()?.add_scalar(1.0)?.mul(&a_ln)?)?;
    let (gamma, beta) = site.gamma_beta(store, s, n)?;
    gamma.mul(&mix)?.add(&beta)
}

// ── One generator stage ─────────────────────────────────────────────

#[derive(Clone, Copy, Debug)]
pub struct StageConfig {
    pub use_cam: bool,
    pub use_pam: bool,
    pub norm_mode: NormMode,
    pub cam_score_mode: CamScoreMode,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            use_cam: true,
            use_pam: true,
            norm_mode: NormMode::CadaIln,
            cam_score_mode: CamScoreMode::Elementwise,
        }
    }
}

/// One dual-attention stage: optional ×2 upsample, then
/// conv → norm → relu → channel attention → conv → norm → relu → pixel
/// attention. Channel selection runs before spatial selection.
#[derive(Clone, Debug)]
pub struct DualAttentionLayer {
    pub index: usize,
    pub upsample: bool,
    pub cfg: StageConfig,
    conv1: Conv2dLayer,
    norm1: NormSite,
    cam: Option<CamParams>,
    conv2: Conv2dLayer,
    norm2: NormSite,
    pam: Option<PamParams>,
}

impl DualAttentionLayer {
    pub fn new(
        prefix: impl Into<String>,
        index: usize,
        in_ch: usize,
        out_ch: usize,
        sent_dim: usize,
        upsample: bool,
        cfg: StageConfig,
    ) -> Self {
        let prefix = prefix.into();
        DualAttentionLayer {
            index,
            upsample,
            cfg,
            conv1: Conv2dLayer::new(format!("{prefix}.conv1"), in_ch, out_ch, 3, 1, 1),
            norm1: NormSite::new(format!("{prefix}.norm1"), out_ch, sent_dim, cfg.norm_mode),
            cam: cfg
                .use_cam
                .then(|| CamParams::new(format!("{prefix}.cam"), out_ch, sent_dim)),
            conv2: Conv2dLayer::new(format!("{prefix}.conv2"), out_ch, out_ch, 3, 1, 1),
            norm2: NormSite::new(format!("{prefix}.norm2"), out_ch, sent_dim, cfg.norm_mode),
            pam: cfg
                .use_pam
                .then(|| PamParams::new(format!("{prefix}.pam"), sent_dim)),
        }
    }

    pub fn register(&self, store: &mut ParamStore, rng: &mut Rng) -> Result<()> {
        self.conv1.register(store, rng)?;
        self.norm1.register(store, rng)?;
        if let Some(cam) = &self.cam {
            cam.register(store, rng)?;
        }
        self.conv2.register(store, rng)?;
        self.norm2.register(store, rng)?;
        if let Some(pam) = &self.pam {
            pam.register(store, rng)?;
        }
        Ok(())
    }

    pub fn forward(&self, store: &ParamStore, h_in: &Tensor, s: &Tensor) -> Result<(Tensor, AttnMaps)> {
        let mut maps = AttnMaps {
            layer: self.index,
            channel_avg: None,
            channel_max: None,
            pixel_avg: None,
            pixel_max: None,
        };
        let h = if self.upsample { h_in.upsample_nn_2x()? } else { h_in.clone() };
        let mut h = self.norm1.forward(store, &self.conv1.forward(store, &h)?, s)?.relu()?;
        if let Some(cam) = &self.cam {
            let (y, aa, am) = cam_forward(&h, s, cam, store, self.cfg.cam_score_mode)?;
            maps.channel_avg = Some(aa);
            maps.channel_max = Some(am);
            h = y;
        }
        let mut h = self.norm2.forward(store, &self.conv2.forward(store, &h)?, s)?.relu()?;
        if let Some(pam) = &self.pam {
            let (y, aa, am) = pam_forward(&h, s, pam, store)?;
            maps.pixel_avg = Some(aa);
            maps.pixel_max = Some(am);
            h = y;
        }
        Ok((h, maps))
    }
}

#[cfg(test)]
mod tests;
