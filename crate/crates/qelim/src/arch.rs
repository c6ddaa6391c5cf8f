//! JSON form of [`ArchConfig`], used both for `gen` input and as the
//! checkpoint sidecar.

use std::path::Path;

use qelim_core::attention::HeadLayout;
use qelim_core::model::{ArchConfig, NormMode, Sharing, SkipMode};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::files;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    None,
    Layernorm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormJson {
    #[serde(rename = "type")]
    pub kind: NormKind,
    #[serde(default)]
    pub eps: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipsJson {
    AttnOnly,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SharingJson {
    PerLayer,
    Shared,
}

fn no_norm() -> NormJson {
    NormJson { kind: NormKind::None, eps: None }
}

fn attn_only() -> SkipsJson {
    SkipsJson::AttnOnly
}

fn per_layer() -> SharingJson {
    SharingJson::PerLayer
}

/// Architecture descriptor. `attn_scale` defaults to `1/√d_k` when absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchJson {
    pub d_model: usize,
    pub h: usize,
    pub n_layers: usize,
    #[serde(default = "no_norm")]
    pub norm: NormJson,
    #[serde(default = "attn_only")]
    pub skips: SkipsJson,
    #[serde(default = "per_layer")]
    pub sharing: SharingJson,
    #[serde(default)]
    pub attn_scale: Option<f64>,
    pub vocab: usize,
    pub max_seq: usize,
    #[serde(default)]
    pub tied: bool,
}

impl ArchJson {
    pub fn to_config(&self) -> Result<ArchConfig> {
        let layout = HeadLayout::new(self.d_model, self.h)?;
        let norm = match (self.norm.kind, self.norm.eps) {
            (NormKind::None, None) => NormMode::None,
            (NormKind::None, Some(_)) => {
                return Err(Error::Config("norm.eps is only valid with type layernorm".into()))
            }
            (NormKind::Layernorm, Some(eps)) => NormMode::LayerNorm { eps },
            (NormKind::Layernorm, None) => return Err(Error::Config("norm type layernorm needs eps".into())),
        };
        let cfg = ArchConfig {
            layout,
            n_layers: self.n_layers,
            norm,
            skips: match self.skips {
                SkipsJson::AttnOnly => SkipMode::AttnOnly,
                SkipsJson::Both => SkipMode::Both,
            },
            sharing: match self.sharing {
                SharingJson::PerLayer => Sharing::PerLayer,
                SharingJson::Shared => Sharing::Shared,
            },
            attn_scale: self.attn_scale.unwrap_or_else(|| layout.default_scale()),
            vocab: self.vocab,
            max_seq: self.max_seq,
            tied_lm_head: self.tied,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_config(cfg: &ArchConfig) -> Self {
        Self {
            d_model: cfg.d_model(),
            h: cfg.layout.heads(),
            n_layers: cfg.n_layers,
            norm: match cfg.norm {
                NormMode::None => no_norm(),
                NormMode::LayerNorm { eps } => NormJson { kind: NormKind::Layernorm, eps: Some(eps) },
            },
            skips: match cfg.skips {
                SkipMode::AttnOnly => SkipsJson::AttnOnly,
                SkipMode::Both => SkipsJson::Both,
            },
            sharing: match cfg.sharing {
                Sharing::PerLayer => SharingJson::PerLayer,
                Sharing::Shared => SharingJson::Shared,
            },
            attn_scale: Some(cfg.attn_scale),
            vocab: cfg.vocab,
            max_seq: cfg.max_seq,
            tied: cfg.tied_lm_head,
        }
    }
}

pub fn load_config(path: &Path) -> Result<ArchConfig> {
    files::read_json::<ArchJson>(path)?.to_config()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(s: &str) -> Result<ArchConfig> {
        serde_json::from_str::<ArchJson>(s).unwrap().to_config()
    }

    #[test]
    fn defaults_fill_in() {
        let cfg = parse(r#"{"d_model": 8, "h": 2, "n_layers": 1, "vocab": 5, "max_seq": 4}"#).unwrap();
        assert_eq!(cfg, ArchConfig::new(HeadLayout::new(8, 2).unwrap(), 1, 5, 4));
    }

    #[test]
    fn round_trip() {
        let cfg = parse(
            r#"{"d_model": 12, "h": 3, "n_layers": 2, "norm": {"type": "layernorm", "eps": 0.01},
                "skips": "both", "sharing": "shared", "attn_scale": 0.125, "vocab": 9, "max_seq": 3, "tied": true}"#,
        )
        .unwrap();
        let text = serde_json::to_string(&ArchJson::from_config(&cfg)).unwrap();
        assert_eq!(parse(&text).unwrap(), cfg);
    }

    #[test]
    fn divisibility_is_named() {
        let err = parse(r#"{"d_model": 10, "h": 4, "n_layers": 1, "vocab": 5, "max_seq": 4}"#).unwrap_err();
        assert!(err.to_string().contains("divisible"), "{err}");
    }

    #[test]
    fn eps_needs_layernorm() {
        assert!(parse(
            r#"{"d_model": 4, "h": 1, "n_layers": 1, "norm": {"type": "none", "eps": 1.0}, "vocab": 5, "max_seq": 4}"#
        )
        .is_err());
        assert!(parse(
            r#"{"d_model": 4, "h": 1, "n_layers": 1, "norm": {"type": "layernorm"}, "vocab": 5, "max_seq": 4}"#
        )
        .is_err());
    }
}
