//! Architecture hyperparameters and the modality tag.

use crate::error::{Error, Result};
use crate::graph::GeluForm;

/// Which sensor produced an image. Optical rasters carry 3 channels,
/// SAR a single amplitude channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ModalityTag {
    Optical,
    Sar,
}

impl ModalityTag {
    /// Row index into the modality embedding table (optical 0, SAR 1).
    pub fn index(self) -> usize {
        match self {
            ModalityTag::Optical => 0,
            ModalityTag::Sar => 1,
        }
    }

    pub fn channels(self) -> usize {
        match self {
            ModalityTag::Optical => 3,
            ModalityTag::Sar => 1,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ModalityTag::Optical => "opt",
            ModalityTag::Sar => "sar",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "opt" | "optical" => Some(ModalityTag::Optical),
            "sar" => Some(ModalityTag::Sar),
            _ => None,
        }
    }
}

/// Encoder and tokenizer hyperparameters.
///
/// The ablation flags change forward wiring only; the parameter tree keeps
/// all tensors regardless, so checkpoints stay layout-compatible across
/// ablations.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub patch_size: usize,
    pub input_h: usize,
    pub input_w: usize,
    /// Scale on the modality embedding row added to every token.
    pub lambda_mie: f64,
    /// Separate optical/SAR tokenizer heads. Off: SAR channels are
    /// replicated to 3 and routed through the optical head.
    pub use_dual_tokenizer: bool,
    pub use_modality_embed: bool,
    /// Append the projected ship-size token to the sequence.
    pub use_size_embed: bool,
    /// Identity count for the fine-tune classifier head; 0 = no head.
    pub num_classes: usize,
    pub gelu_form: GeluForm,
    pub dropout_rate: f64,
}

impl ModelConfig {
    /// Desk-scale default: trains in seconds on a CPU.
    pub fn desk() -> Self {
        ModelConfig {
            embed_dim: 64,
            num_layers: 4,
            num_heads: 4,
            patch_size: 8,
            input_h: 32,
            input_w: 64,
            lambda_mie: 1.0,
            use_dual_tokenizer: true,
            use_modality_embed: true,
            use_size_embed: true,
            num_classes: 0,
            gelu_form: GeluForm::ExactErf,
            dropout_rate: 0.0,
        }
    }

    /// Full-scale shape (ViT-base lineage): not trainable on a desk, kept
    /// for config parity.
    pub fn reference() -> Self {
        ModelConfig {
            embed_dim: 768,
            num_layers: 12,
            num_heads: 12,
            patch_size: 16,
            input_h: 128,
            input_w: 256,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.num_layers == 0 || self.num_heads == 0 {
            return Err(Error::Config("embed_dim/num_layers/num_heads must be positive".into()));
        }
        if self.embed_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            )));
        }
        if self.patch_size == 0
            || self.input_h % self.patch_size != 0
            || self.input_w % self.patch_size != 0
        {
            return Err(Error::Config(format!(
                "input {}x{} not divisible by patch_size {}",
                self.input_h, self.input_w, self.patch_size
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config(format!(
                "dropout_rate {} outside [0,1)",
                self.dropout_rate
            )));
        }
        if !self.lambda_mie.is_finite() {
            return Err(Error::Config("lambda_mie must be finite".into()));
        }
        Ok(())
    }

    /// Patch token count N.
    pub fn num_patches(&self) -> usize {
        (self.input_h / self.patch_size) * (self.input_w / self.patch_size)
    }

    /// Maximum sequence length (class token + patches + size token).
    pub fn seq_capacity(&self) -> usize {
        self.num_patches() + 2
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.num_heads
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.embed_dim
    }

    /// Canonical key=value block used in checkpoints and run provenance.
    pub fn to_kv_block(&self) -> String {
        let gelu = match self.gelu_form {
            GeluForm::ExactErf => "exact_erf",
            GeluForm::Tanh => "tanh",
        };
        format!(
            "embed_dim={}\nnum_layers={}\nnum_heads={}\npatch_size={}\ninput_h={}\ninput_w={}\nlambda_mie={}\nuse_dual_tokenizer={}\nuse_modality_embed={}\nuse_size_embed={}\nnum_classes={}\ngelu_form={}\ndropout_rate={}\n",
            self.embed_dim,
            self.num_layers,
            self.num_heads,
            self.patch_size,
            self.input_h,
            self.input_w,
            self.lambda_mie,
            self.use_dual_tokenizer,
            self.use_modality_embed,
            self.use_size_embed,
            self.num_classes,
            gelu,
            self.dropout_rate,
        )
    }

    pub fn from_kv_block(text: &str) -> Result<Self> {
        let mut cfg = ModelConfig::desk();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| Error::Parse {
                what: "model config".into(),
                position: lineno + 1,
                message: format!("expected key=value, got {line:?}"),
            })?;
            cfg.set_key(key.trim(), value.trim()).map_err(|e| Error::Parse {
                what: "model config".into(),
                position: lineno + 1,
                message: e.to_string(),
            })?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Apply one key=value setting; unknown keys are rejected.
    pub fn set_key(&mut self, key: &str, value: &str) -> Result<()> {
        fn us(v: &str, key: &str) -> Result<usize> {
            v.parse().map_err(|_| Error::Config(format!("bad integer for {key}: {v:?}")))
        }
        fn fl(v: &str, key: &str) -> Result<f64> {
            v.parse().map_err(|_| Error::Config(format!("bad float for {key}: {v:?}")))
        }
        fn bo(v: &str, key: &str) -> Result<bool> {
            match v {
                "true" | "1" => Ok(true),
                "false" | "0" => Ok(false),
                _ => Err(Error::Config(format!("bad bool for {key}: {v:?}"))),
            }
        }
        match key {
            "embed_dim" => self.embed_dim = us(value, key)?,
            "num_layers" => self.num_layers = us(value, key)?,
            "num_heads" => self.num_heads = us(value, key)?,
            "patch_size" => self.patch_size = us(value, key)?,
            "input_h" => self.input_h = us(value, key)?,
            "input_w" => self.input_w = us(value, key)?,
            "lambda_mie" => self.lambda_mie = fl(value, key)?,
            "use_dual_tokenizer" => self.use_dual_tokenizer = bo(value, key)?,
            "use_modality_embed" => self.use_modality_embed = bo(value, key)?,
            "use_size_embed" => self.use_size_embed = bo(value, key)?,
            "num_classes" => self.num_classes = us(value, key)?,
            "gelu_form" => {
                self.gelu_form = match value {
                    "exact_erf" => GeluForm::ExactErf,
                    "tanh" => GeluForm::Tanh,
                    _ => return Err(Error::Config(format!("unknown gelu_form {value:?}"))),
                }
            }
            "dropout_rate" => self.dropout_rate = fl(value, key)?,
            _ => return Err(Error::Config(format!("unknown model key {key:?}"))),
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_patch_count() {
        let cfg = ModelConfig::desk();
        assert_eq!(cfg.num_patches(), 32);
        assert_eq!(cfg.seq_capacity(), 34);
        cfg.validate().unwrap();
    }

    #[test]
    fn reference_patch_count() {
        let cfg = ModelConfig::reference();
        assert_eq!(cfg.num_patches(), 128);
        cfg.validate().unwrap();
    }

    #[test]
    fn kv_round_trip() {
        let mut cfg = ModelConfig::desk();
        cfg.lambda_mie = 0.25;
        cfg.num_classes = 13;
        cfg.use_size_embed = false;
        let back = ModelConfig::from_kv_block(&cfg.to_kv_block()).unwrap();
        assert_eq!(cfg, back);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut cfg = ModelConfig::desk();
        cfg.num_heads = 5;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::desk();
        cfg.input_h = 33;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn unknown_key_rejected() {
        let mut cfg = ModelConfig::desk();
        assert!(cfg.set_key("emed_dim", "8").is_err());
    }
}
