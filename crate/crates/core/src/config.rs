//! Model hyperparameters and their `key=value` text form.

use std::fmt::Write as _;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub image_size: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub hidden_dim: usize,
    pub depth: usize,
    pub num_heads: usize,
    pub num_classes: usize,
    /// RMS-normalize the adaLN modulation output.
    pub adaln_rms: bool,
    /// Use ternary linears for attention, feedforward and adaLN projections.
    pub quantize_blocks: bool,
    pub class_dropout_prob: f64,
    pub rms_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl ModelConfig {
    /// The 16×16×3, 8-class toy model used throughout the tests.
    pub fn toy() -> Self {
        Self {
            image_size: 16,
            channels: 3,
            patch_size: 2,
            hidden_dim: 128,
            depth: 4,
            num_heads: 4,
            num_classes: 8,
            adaln_rms: true,
            quantize_blocks: true,
            class_dropout_prob: 0.1,
            rms_eps: 1e-5,
        }
    }

    /// Smallest useful configuration, for gradient checks.
    pub fn tiny() -> Self {
        Self { hidden_dim: 16, depth: 1, num_heads: 2, image_size: 4, ..Self::toy() }
    }

    /// DiT-XL/2 geometry on a 32×32×4 latent with 1000 classes.
    pub fn dit_xl_2() -> Self {
        Self {
            image_size: 32,
            channels: 4,
            patch_size: 2,
            hidden_dim: 1152,
            depth: 28,
            num_heads: 16,
            num_classes: 1000,
            ..Self::toy()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_size", self.image_size),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("hidden_dim", self.hidden_dim),
            ("depth", self.depth),
            ("num_heads", self.num_heads),
            ("num_classes", self.num_classes),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{k} must be positive")));
        }
        if !self.hidden_dim.is_multiple_of(self.num_heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} is not divisible by num_heads {}",
                self.hidden_dim, self.num_heads
            )));
        }
        if !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::Config(format!(
                "image_size {} is not divisible by patch_size {}",
                self.image_size, self.patch_size
            )));
        }
        if !(0.0..=1.0).contains(&self.class_dropout_prob) {
            return Err(Error::Config("class_dropout_prob must lie in [0, 1]".into()));
        }
        if !(self.rms_eps > 0.0 && self.rms_eps.is_finite()) {
            return Err(Error::Config("rms_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        (self.image_size / self.patch_size).pow(2)
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.hidden_dim / self.num_heads
    }

    /// Gated feedforward width: two thirds of `4·hidden`, rounded up to a
    /// multiple of 256.
    pub fn ffn_dim(&self) -> usize {
        let h = 2 * 4 * self.hidden_dim / 3;
        h.div_ceil(256) * 256
    }

    /// Width of the sinusoidal timestep features.
    pub fn freq_dim(&self) -> usize {
        self.hidden_dim
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "image_size={}", self.image_size);
        let _ = writeln!(s, "channels={}", self.channels);
        let _ = writeln!(s, "patch_size={}", self.patch_size);
        let _ = writeln!(s, "hidden_dim={}", self.hidden_dim);
        let _ = writeln!(s, "depth={}", self.depth);
        let _ = writeln!(s, "num_heads={}", self.num_heads);
        let _ = writeln!(s, "num_classes={}", self.num_classes);
        let _ = writeln!(s, "adaln_rms={}", self.adaln_rms);
        let _ = writeln!(s, "quantize_blocks={}", self.quantize_blocks);
        let _ = writeln!(s, "rms_eps={:e}", self.rms_eps);
        let _ = writeln!(s, "class_dropout_prob={}", self.class_dropout_prob);
        s
    }

    /// Parses `key=value` lines. Blank lines and `#` comments are ignored;
    /// missing keys keep the toy defaults; unknown keys are errors.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::toy();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |e: &dyn std::fmt::Display| Error::Config(format!("{key}={value}: {e}"));
            match key {
                "image_size" => cfg.image_size = value.parse().map_err(|e| bad(&e))?,
                "channels" => cfg.channels = value.parse().map_err(|e| bad(&e))?,
                "patch_size" => cfg.patch_size = value.parse().map_err(|e| bad(&e))?,
                "hidden_dim" => cfg.hidden_dim = value.parse().map_err(|e| bad(&e))?,
                "depth" => cfg.depth = value.parse().map_err(|e| bad(&e))?,
                "num_heads" => cfg.num_heads = value.parse().map_err(|e| bad(&e))?,
                "num_classes" => cfg.num_classes = value.parse().map_err(|e| bad(&e))?,
                "adaln_rms" => cfg.adaln_rms = parse_bool(value).ok_or_else(|| bad(&"not a boolean"))?,
                "quantize_blocks" => cfg.quantize_blocks = parse_bool(value).ok_or_else(|| bad(&"not a boolean"))?,
                "rms_eps" => cfg.rms_eps = value.parse().map_err(|e| bad(&e))?,
                "class_dropout_prob" => cfg.class_dropout_prob = value.parse().map_err(|e| bad(&e))?,
                other => return Err(Error::Config(format!("unknown key {other:?}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_bool(s: &str) -> Option<bool> {
    match s {
        "true" | "on" | "1" => Some(true),
        "false" | "off" | "0" => Some(false),
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = ModelConfig::toy();
        c.adaln_rms = false;
        c.rms_eps = 3e-6;
        assert_eq!(ModelConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn derived_sizes() {
        let c = ModelConfig::toy();
        assert_eq!(c.num_patches(), 64);
        assert_eq!(c.patch_dim(), 12);
        assert_eq!(c.ffn_dim(), 512);
        assert_eq!(ModelConfig::dit_xl_2().ffn_dim(), 3072);
    }

    #[test]
    fn rejects_invalid() {
        assert!(ModelConfig::from_text("hidden_dim=130").is_err());
        assert!(ModelConfig::from_text("image_size=15").is_err());
        assert!(ModelConfig::from_text("bogus=1").is_err());
        assert!(ModelConfig::from_text("depth").is_err());
        assert!(ModelConfig::from_text("adaln_rms=maybe").is_err());
        assert!(ModelConfig::from_text("# comment\n\ndepth=2\n").is_ok());
    }
}
