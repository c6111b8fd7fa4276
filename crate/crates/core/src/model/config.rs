use std::fmt;
use std::str::FromStr;

use crate::error::{contract_err, PatError, Result};

/// Minutes in one week of minute-level actigraphy.
pub const WEEK_MINUTES: usize = 10_080;

/// How each patch of minutes is turned into a token.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedMode {
    Linear,
    Conv,
}

impl fmt::Display for EmbedMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EmbedMode::Linear => "linear",
            EmbedMode::Conv => "conv",
        })
    }
}

impl FromStr for EmbedMode {
    type Err = PatError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "linear" => Ok(EmbedMode::Linear),
            "conv" => Ok(EmbedMode::Conv),
            other => contract_err(format!("unknown embed mode {other:?} (expected linear or conv)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SizeTag {
    Small,
    Medium,
    Large,
    Custom,
}

impl fmt::Display for SizeTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SizeTag::Small => "S",
            SizeTag::Medium => "M",
            SizeTag::Large => "L",
            SizeTag::Custom => "custom",
        })
    }
}

impl FromStr for SizeTag {
    type Err = PatError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "S" => Ok(SizeTag::Small),
            "M" => Ok(SizeTag::Medium),
            "L" => Ok(SizeTag::Large),
            "custom" => Ok(SizeTag::Custom),
            other => contract_err(format!("unknown size {other:?} (expected S, M, L or custom)")),
        }
    }
}

/// Architecture hyperparameters of the actigraphy transformer.
///
/// `head_dim` is the width of each attention head's query/key/value
/// projection. The presets use `head_dim == embed_dim`, so the attention
/// projections map `D → heads·D`; this is what lands the three presets on
/// their parameter budgets.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub series_len: usize,
    pub patch_size: usize,
    pub num_patches: usize,
    pub embed_dim: usize,
    pub num_layers: usize,
    pub num_heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f32,
    pub embed_mode: EmbedMode,
    pub conv_channels: usize,
    pub size_tag: SizeTag,
}

impl ModelConfig {
    pub const DEFAULT_PATCH: usize = 18;
    pub const DEFAULT_DIM: usize = 96;
    pub const DEFAULT_FFN: usize = 256;
    pub const CONV_CHANNELS: usize = 8;

    pub fn preset(size: SizeTag, embed_mode: EmbedMode) -> Self {
        let (layers, heads) = match size {
            SizeTag::Small => (1, 6),
            SizeTag::Medium | SizeTag::Custom => (2, 12),
            SizeTag::Large => (4, 12),
        };
        let patch = Self::DEFAULT_PATCH;
        ModelConfig {
            series_len: WEEK_MINUTES,
            patch_size: patch,
            num_patches: WEEK_MINUTES / patch,
            embed_dim: Self::DEFAULT_DIM,
            num_layers: layers,
            num_heads: heads,
            head_dim: Self::DEFAULT_DIM,
            ffn_dim: Self::DEFAULT_FFN,
            dropout: 0.1,
            embed_mode,
            conv_channels: Self::CONV_CHANNELS,
            size_tag: size,
        }
    }

    /// Replaces `series_len`/`patch_size` and recomputes the patch count.
    pub fn with_patching(mut self, series_len: usize, patch_size: usize) -> Result<Self> {
        self.series_len = series_len;
        self.patch_size = patch_size;
        self.num_patches = if patch_size == 0 { 0 } else { series_len / patch_size };
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 || !self.series_len.is_multiple_of(self.patch_size) {
            return contract_err(format!(
                "series length {} is not divisible by patch size {}",
                self.series_len, self.patch_size
            ));
        }
        if self.num_patches != self.series_len / self.patch_size {
            return contract_err(format!(
                "num_patches {} != series_len {} / patch_size {}",
                self.num_patches, self.series_len, self.patch_size
            ));
        }
        if self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2) {
            return contract_err(format!("embed_dim {} must be positive and even", self.embed_dim));
        }
        if self.num_heads == 0 || !self.embed_dim.is_multiple_of(self.num_heads) {
            return contract_err(format!(
                "embed_dim {} is not divisible by num_heads {}",
                self.embed_dim, self.num_heads
            ));
        }
        if self.num_layers == 0 || self.head_dim == 0 || self.ffn_dim == 0 {
            return contract_err("num_layers, head_dim and ffn_dim must be positive");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return contract_err(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.embed_mode == EmbedMode::Conv && self.conv_channels == 0 {
            return contract_err("conv embedding needs at least one channel");
        }
        Ok(())
    }

    /// Display name in the style of the results tables, e.g. `PAT Conv-M`.
    pub fn model_name(&self) -> String {
        match self.embed_mode {
            EmbedMode::Linear => format!("PAT-{}", self.size_tag),
            EmbedMode::Conv => format!("PAT Conv-{}", self.size_tag),
        }
    }

    pub(crate) fn write_kv(&self, out: &mut String) {
        let pairs: [(&str, String); 12] = [
            ("series_len", self.series_len.to_string()),
            ("patch_size", self.patch_size.to_string()),
            ("num_patches", self.num_patches.to_string()),
            ("embed_dim", self.embed_dim.to_string()),
            ("num_layers", self.num_layers.to_string()),
            ("num_heads", self.num_heads.to_string()),
            ("head_dim", self.head_dim.to_string()),
            ("ffn_dim", self.ffn_dim.to_string()),
            ("dropout", self.dropout.to_string()),
            ("embed_mode", self.embed_mode.to_string()),
            ("conv_channels", self.conv_channels.to_string()),
            ("size_tag", self.size_tag.to_string()),
        ];
        for (k, v) in pairs {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        }
    }

    pub(crate) fn from_kv(kv: &KvMap) -> Result<Self> {
        let cfg = ModelConfig {
            series_len: kv.parse("series_len")?,
            patch_size: kv.parse("patch_size")?,
            num_patches: kv.parse("num_patches")?,
            embed_dim: kv.parse("embed_dim")?,
            num_layers: kv.parse("num_layers")?,
            num_heads: kv.parse("num_heads")?,
            head_dim: kv.parse("head_dim")?,
            ffn_dim: kv.parse("ffn_dim")?,
            dropout: kv.parse("dropout")?,
            embed_mode: kv.get("embed_mode")?.parse()?,
            conv_channels: kv.parse("conv_channels")?,
            size_tag: kv.get("size_tag")?.parse()?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Names the first field that differs from `other`, if any.
    pub fn first_mismatch(&self, other: &ModelConfig) -> Option<&'static str> {
        let checks: [(&'static str, bool); 11] = [
            ("series_len", self.series_len == other.series_len),
            ("patch_size", self.patch_size == other.patch_size),
            ("num_patches", self.num_patches == other.num_patches),
            ("embed_dim", self.embed_dim == other.embed_dim),
            ("num_layers", self.num_layers == other.num_layers),
            ("num_heads", self.num_heads == other.num_heads),
            ("head_dim", self.head_dim == other.head_dim),
            ("ffn_dim", self.ffn_dim == other.ffn_dim),
            ("embed_mode", self.embed_mode == other.embed_mode),
            ("conv_channels", self.conv_channels == other.conv_channels),
            ("dropout", self.dropout == other.dropout),
        ];
        checks.into_iter().find(|(_, ok)| !ok).map(|(name, _)| name)
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::preset(SizeTag::Medium, EmbedMode::Linear)
    }
}

/// Ordered `key=value` pairs as stored in checkpoints and config files.
#[derive(Clone, Debug, Default)]
pub struct KvMap {
    pairs: Vec<(String, String)>,
}

impl KvMap {
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                return Err(PatError::Parse { line: i + 1, message: format!("expected key=value, got {line:?}") });
            };
            pairs.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(KvMap { pairs })
    }

    pub fn pairs(&self) -> &[(String, String)] {
        &self.pairs
    }

    pub fn find(&self, key: &str) -> Option<&str> {
        self.pairs.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn get(&self, key: &str) -> Result<&str> {
        self.find(key).ok_or_else(|| PatError::Checkpoint(format!("missing config field {key:?}")))
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T> {
        let raw = self.get(key)?;
        raw.parse().map_err(|_| PatError::Checkpoint(format!("config field {key:?} has invalid value {raw:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_patching_gives_560_tokens() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.series_len, 10_080);
        assert_eq!(cfg.patch_size, 18);
        assert_eq!(cfg.num_patches, 560);
        cfg.validate().unwrap();
    }

    #[test]
    fn indivisible_patching_is_rejected() {
        assert!(ModelConfig::default().with_patching(10, 3).is_err());
        assert!(ModelConfig::default().with_patching(12, 3).is_ok());
    }

    #[test]
    fn heads_must_divide_dim() {
        let mut cfg = ModelConfig::default();
        cfg.num_heads = 5;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn kv_round_trip() {
        for size in [SizeTag::Small, SizeTag::Medium, SizeTag::Large] {
            let cfg = ModelConfig::preset(size, EmbedMode::Conv);
            let mut text = String::new();
            cfg.write_kv(&mut text);
            let back = ModelConfig::from_kv(&KvMap::parse_text(&text).unwrap()).unwrap();
            assert_eq!(back, cfg);
        }
    }

    #[test]
    fn mismatch_names_field() {
        let a = ModelConfig::default();
        let mut b = a.clone();
        b.ffn_dim = 128;
        assert_eq!(a.first_mismatch(&b), Some("ffn_dim"));
        assert_eq!(a.first_mismatch(&a), None);
    }
}
