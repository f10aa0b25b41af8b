//! Run configuration: a flat `key = value` text format with defaults,
//! strict unknown-key rejection, and a canonical echo used both for
//! `config.resolved` files and the checkpoint's embedded config.

use crate::attention::{CamScoreMode, NormMode, StageConfig};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::networks::{DiscriminatorConfig, EncoderConfig, GeneratorConfig};
use crate::nn::CellKind;

macro_rules! run_config {
    ($(($field:ident, $key:literal, $ty:ty, $default:expr, $doc:literal)),+ $(,)?) => {
        /// Fully resolved run configuration. One field per config key.
        #[derive(Clone, Debug, PartialEq)]
        pub struct RunConfig {
            $(#[doc = $doc] pub $field: $ty),+
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($field: $default),+ }
            }
        }

        impl RunConfig {
            /// Apply one `key = value` override.
            pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $($key => {
                        self.$field = parse_value::<$ty>($key, value)?;
                        Ok(())
                    })+
                    _ => Err(Error::invalid(format!(
                        "unknown config key '{key}' (known keys: {})",
                        Self::KEYS.join(", ")
                    ))),
                }
            }

            /// Canonical echo: every key, one per line, in declaration order.
            pub fn to_text(&self) -> String {
                let mut out = String::new();
                $(out.push_str(&format!("{} = {}\n", $key, format_value(&self.$field)));)+
                out
            }

            pub const KEYS: &'static [&'static str] = &[$($key),+];
        }
    };
}

run_config![
    (seed, "seed", u64, 42, "master seed for init, data, and training"),
    (steps, "steps", usize, 2000, "number of training steps"),
    (batch, "batch", usize, 8, "batch size"),
    (lr_g, "lr_g", f64, 1e-4, "generator/encoder learning rate"),
    (lr_d, "lr_d", f64, 4e-4, "discriminator learning rate"),
    (beta1, "beta1", f64, 0.0, "Adam first-moment decay"),
    (beta2, "beta2", f64, 0.9, "Adam second-moment decay"),
    (adam_eps, "adam_eps", f64, 1e-8, "Adam epsilon"),
    (lambda1, "lambda1", f64, 0.1, "visual loss weight"),
    (lambda2, "lambda2", f64, 2.0, "gradient penalty weight"),
    (gp_power, "gp_power", f64, 6.0, "gradient penalty exponent"),
    (gen_layers, "gen_layers", usize, 4, "generator stages; output side is 4*2^(layers-1)"),
    (base_channels, "base_channels", usize, 16, "channels of the first generator stage"),
    (min_channels, "min_channels", usize, 4, "floor of the halving channel schedule"),
    (sentence_dim, "sentence_dim", usize, 32, "sentence embedding dimension"),
    (noise_dim, "noise_dim", usize, 16, "noise vector dimension"),
    (embed_dim, "embed_dim", usize, 16, "token embedding dimension"),
    (hidden_dim, "hidden_dim", usize, 16, "recurrent hidden dimension per direction"),
    (encoder_cell, "encoder_cell", CellKind, CellKind::Gated, "recurrent cell: gated | lstm"),
    (combine_sum, "combine_sum", bool, false, "sum (instead of concat) the two encoder directions"),
    (freeze_encoder, "freeze_encoder", bool, false, "exclude encoder parameters from optimization"),
    (cam, "cam", bool, true, "enable channel-aware attention"),
    (pam, "pam", bool, true, "enable pixel-aware attention"),
    (
        cadailn_mode,
        "cadailn_mode",
        NormMode,
        NormMode::CadaIln,
        "normalization variant: cadailn | bn_sent | none"
    ),
    (
        cam_score_mode,
        "cam_score_mode",
        CamScoreMode,
        CamScoreMode::Elementwise,
        "channel attention score composition: elementwise | outer"
    ),
    (visual_loss, "visual_loss", bool, true, "enable the feature-space visual loss"),
    (d_base_channels, "d_base_channels", usize, 16, "discriminator first-block channels"),
    (d_max_channels, "d_max_channels", usize, 64, "discriminator channel cap"),
    (d_proj_channels, "d_proj_channels", usize, 16, "sentence projection channels in the head"),
    (d_head_channels, "d_head_channels", usize, 32, "channels of the post-concat head conv"),
    (leaky_slope, "leaky_slope", f64, 0.2, "negative slope of the discriminator activations"),
    (n_train, "n_train", usize, 960, "training set size"),
    (n_test, "n_test", usize, 96, "held-out set size"),
    (stratified, "stratified", bool, true, "cycle all 96 specs instead of sampling uniformly"),
    (sample_every, "sample_every", usize, 500, "write a sample grid every K steps (0 = never)"),
    (
        checkpoint_every,
        "checkpoint_every",
        usize,
        500,
        "write a checkpoint every K steps (0 = only at the end)"
    ),
    (out_dir, "out_dir", String, String::from("runs/default"), "output directory"),
];

trait ConfigValue: Sized {
    fn parse(key: &str, value: &str) -> Result<Self>;
    fn format(&self) -> String;
}

fn parse_value<T: ConfigValue>(key: &str, value: &str) -> Result<T> {
    T::parse(key, value)
}

fn format_value<T: ConfigValue>(v: &T) -> String {
    v.format()
}

macro_rules! via_fromstr {
    ($($ty:ty),+) => {$(
        impl ConfigValue for $ty {
            fn parse(key: &str, value: &str) -> Result<Self> {
                value.parse().map_err(|_| {
                    Error::invalid(format!("config key '{key}': cannot parse '{value}'"))
                })
            }
            fn format(&self) -> String {
                self.to_string()
            }
        }
    )+};
}

via_fromstr!(u64, usize, f64, bool);

impl ConfigValue for String {
    fn parse(_key: &str, value: &str) -> Result<Self> {
        Ok(value.to_string())
    }
    fn format(&self) -> String {
        self.clone()
    }
}

impl ConfigValue for CellKind {
    fn parse(key: &str, value: &str) -> Result<Self> {
        match value {
            "gated" => Ok(CellKind::Gated),
            "lstm" => Ok(CellKind::Lstm),
            _ => Err(Error::invalid(format!("config key '{key}': expected gated|lstm, got '{value}'"))),
        }
    }
    fn format(&self) -> String {
        match self {
            CellKind::Gated => "gated",
            CellKind::Lstm => "lstm",
        }
        .to_string()
    }
}

impl ConfigValue for NormMode {
    fn parse(key: &str, value: &str) -> Result<Self> {
        match value {
            "cadailn" => Ok(NormMode::CadaIln),
            "bn_sent" => Ok(NormMode::BnSent),
            "none" => Ok(NormMode::None),
            _ => Err(Error::invalid(format!(
                "config key '{key}': expected cadailn|bn_sent|none, got '{value}'"
            ))),
        }
    }
    fn format(&self) -> String {
        match self {
            NormMode::CadaIln => "cadailn",
            NormMode::BnSent => "bn_sent",
            NormMode::None => "none",
        }
        .to_string()
    }
}

impl ConfigValue for CamScoreMode {
    fn parse(key: &str, value: &str) -> Result<Self> {
        match value {
            "elementwise" => Ok(CamScoreMode::Elementwise),
            "outer" => Ok(CamScoreMode::Outer),
            _ => Err(Error::invalid(format!(
                "config key '{key}': expected elementwise|outer, got '{value}'"
            ))),
        }
    }
    fn format(&self) -> String {
        match self {
            CamScoreMode::Elementwise => "elementwise",
            CamScoreMode::Outer => "outer",
        }
        .to_string()
    }
}

impl RunConfig {
    /// Parse a config file body over the defaults. Lines are
    /// `key = value`; `#` starts a comment.
    pub fn parse_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::invalid(format!(
                    "config line {}: expected 'key = value', got '{raw}'",
                    lineno + 1
                )));
            };
            self.apply(key.trim(), value.trim())?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_g <= 0.0 || self.lr_d <= 0.0 {
            return Err(Error::invalid("learning rates must be positive"));
        }
        if self.batch < 2 {
            return Err(Error::invalid("batch must be at least 2 (mismatched captions need a partner)"));
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.gp_power < 1.0 {
            return Err(Error::invalid("lambda1, lambda2 must be >= 0 and gp_power >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::invalid("adam betas must lie in [0, 1)"));
        }
        let resolution = self.generator().resolution();
        if ![16, 32, 64].contains(&resolution) {
            return Err(Error::invalid(format!(
                "gen_layers = {} gives resolution {resolution}; the renderer supports 16, 32, 64",
                self.gen_layers
            )));
        }
        Ok(())
    }

    pub fn resolution(&self) -> usize {
        self.generator().resolution()
    }

    pub fn stage(&self) -> StageConfig {
        StageConfig {
            use_cam: self.cam,
            use_pam: self.pam,
            norm_mode: self.cadailn_mode,
            cam_score_mode: self.cam_score_mode,
        }
    }

    pub fn generator(&self) -> GeneratorConfig {
        GeneratorConfig {
            num_layers: self.gen_layers,
            base_size: 4,
            base_channels: self.base_channels,
            min_channels: self.min_channels,
            sent_dim: self.sentence_dim,
            noise_dim: self.noise_dim,
            stage: self.stage(),
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            vocab_size: crate::data::VOCAB.len(),
            seq_len: crate::data::SEQ_LEN,
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            sent_dim: self.sentence_dim,
            cell: self.encoder_cell,
            combine_sum: self.combine_sum,
        }
    }

    pub fn discriminator(&self) -> DiscriminatorConfig {
        DiscriminatorConfig {
            resolution: self.resolution(),
            base_channels: self.d_base_channels,
            max_channels: self.d_max_channels,
            sent_dim: self.sentence_dim,
            proj_channels: self.d_proj_channels,
            head_channels: self.d_head_channels,
            leaky_slope: self.leaky_slope,
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig { lambda1: self.lambda1, lambda2: self.lambda2, p: self.gp_power }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_the_published_settings() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.lr_g, 1e-4);
        assert_eq!(cfg.lr_d, 4e-4);
        assert_eq!(cfg.beta1, 0.0);
        assert_eq!(cfg.beta2, 0.9);
        assert_eq!(cfg.lambda1, 0.1);
        assert_eq!(cfg.lambda2, 2.0);
        assert_eq!(cfg.gp_power, 6.0);
        assert_eq!(cfg.resolution(), 32);
        cfg.validate().unwrap();
    }

    #[test]
    fn text_roundtrip_is_identity() {
        let mut cfg = RunConfig::default();
        cfg.apply("lambda1", "0.3").unwrap();
        cfg.apply("cadailn_mode", "bn_sent").unwrap();
        cfg.apply("encoder_cell", "lstm").unwrap();
        let text = cfg.to_text();
        let back = RunConfig::parse_text(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(text, back.to_text());
    }

    #[test]
    fn unknown_keys_rejected() {
        let err = RunConfig::parse_text("no_such_key = 5").unwrap_err().to_string();
        assert!(err.contains("no_such_key"));
        assert!(err.contains("lambda1"), "lists known keys: {err}");
    }

    #[test]
    fn comments_and_blanks_ignored() {
        let cfg = RunConfig::parse_text("# comment\n\nsteps = 7 # trailing\n").unwrap();
        assert_eq!(cfg.steps, 7);
    }

    #[test]
    fn bad_values_and_lines_rejected() {
        assert!(RunConfig::parse_text("steps = many").is_err());
        assert!(RunConfig::parse_text("steps 7").is_err());
        assert!(RunConfig::parse_text("cadailn_mode = sometimes").is_err());
    }

    #[test]
    fn validation_catches_bad_settings() {
        let mut cfg = RunConfig::default();
        cfg.lr_g = 0.0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.gen_layers = 7;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.batch = 1;
        assert!(cfg.validate().is_err());
    }
}
