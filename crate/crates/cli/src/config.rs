//! `--config` parsing: a preset name, optionally followed by `key=value`
//! overrides, all comma separated (`toy,layers=4,cache=int8`).

use slimfer_core::model::{CacheDtype, ModelConfig};

use crate::error::BenchError;

pub fn preset(name: &str) -> Option<ModelConfig> {
    match name {
        "toy" => Some(ModelConfig::toy()),
        // smallest shape that still has GQA and two layers
        "tiny" => Some(ModelConfig {
            layers: 2,
            d_model: 32,
            n_head: 2,
            n_kv_head: 1,
            head_size: 16,
            ffn_dim: 64,
            vocab: 64,
            max_seq: 64,
            cache_dtype: CacheDtype::F32,
        }),
        _ => None,
    }
}

pub fn parse_model_config(s: &str) -> Result<ModelConfig, BenchError> {
    let mut parts = s
        .split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .peekable();
    let mut cfg = match parts.peek() {
        Some(p) if !p.contains('=') => {
            let name = parts.next().unwrap_or_default();
            preset(name).ok_or_else(|| {
                BenchError::Config(format!("unknown preset `{name}` (known: toy, tiny)"))
            })?
        }
        _ => ModelConfig::toy(),
    };
    for part in parts {
        let (key, value) = part
            .split_once('=')
            .ok_or_else(|| BenchError::Config(format!("expected key=value, got `{part}`")))?;
        if key == "cache" {
            cfg.cache_dtype = match value {
                "f32" => CacheDtype::F32,
                "int8" => CacheDtype::Int8,
                _ => {
                    return Err(BenchError::Config(format!(
                        "cache must be f32 or int8, got `{value}`"
                    )))
                }
            };
            continue;
        }
        let n: usize = value.parse().map_err(|_| {
            BenchError::Config(format!("`{key}` needs an unsigned integer, got `{value}`"))
        })?;
        let field = match key {
            "layers" => &mut cfg.layers,
            "d_model" => &mut cfg.d_model,
            "n_head" => &mut cfg.n_head,
            "n_kv_head" => &mut cfg.n_kv_head,
            "head_size" => &mut cfg.head_size,
            "ffn_dim" => &mut cfg.ffn_dim,
            "vocab" => &mut cfg.vocab,
            "max_seq" => &mut cfg.max_seq,
            _ => return Err(BenchError::Config(format!("unknown config key `{key}`"))),
        };
        *field = n;
    }
    cfg.validate()?;
    Ok(cfg)
}
