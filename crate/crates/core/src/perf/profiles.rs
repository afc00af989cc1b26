//! Model and hardware profiles.
//!
//! Built-in profiles are compiled in from `profiles/*.toml`. Any key can be
//! overridden through an environment variable named `CTXPAR_<KEY>` in upper
//! case, e.g. `CTXPAR_ACHIEVED_BANDWIDTH=1.8e11`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const LLAMA3_405B: &str = include_str!("../../profiles/llama3-405b.toml");
const GTT_H100: &str = include_str!("../../profiles/gtt-h100.toml");
const GTI_H100: &str = include_str!("../../profiles/gti-h100.toml");

pub const ENV_PREFIX: &str = "CTXPAR_";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelProfile {
    pub name: String,
    pub n_query_heads: u64,
    pub n_kv_heads: u64,
    pub model_dim: u64,
    pub n_layers: u64,
    pub param_count: f64,
    /// Bytes per exchanged element.
    pub elem_size: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HardwareProfile {
    pub name: String,
    /// Theoretical FLOP/s of one CP rank (host).
    pub peak_compute: f64,
    /// Theoretical bytes/s of one rank's ring link.
    pub bandwidth: f64,
    /// Sustained FLOP/s used for predictions; defaults to `peak_compute`.
    #[serde(default)]
    pub achieved_compute: Option<f64>,
    /// Sustained link bytes/s used for predictions; defaults to `bandwidth`.
    #[serde(default)]
    pub achieved_bandwidth: Option<f64>,
    pub gpus_per_node: u64,
    #[serde(default)]
    pub sendrecv_latency_s: f64,
    #[serde(default)]
    pub a2a_base_s: f64,
    pub a2a_per_byte_s: f64,
}

fn parse<T: for<'de> Deserialize<'de>>(text: &str, origin: &str) -> Result<T> {
    toml::from_str(text).map_err(|e| Error::Scenario {
        location: match e.span() {
            Some(span) => {
                let line = text[..span.start].matches('\n').count() + 1;
                format!("{origin}:{line}")
            }
            None => origin.to_string(),
        },
        message: e.message().to_string(),
    })
}

fn override_f64(key: &str, slot: &mut f64, env: &dyn Fn(&str) -> Option<String>) -> Result<()> {
    let var = format!("{ENV_PREFIX}{}", key.to_uppercase());
    if let Some(raw) = env(&var) {
        *slot = raw
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("{var}={raw} is not a number")))?;
    }
    Ok(())
}

fn override_u64(key: &str, slot: &mut u64, env: &dyn Fn(&str) -> Option<String>) -> Result<()> {
    let mut v = *slot as f64;
    override_f64(key, &mut v, env)?;
    if v.fract() != 0.0 || v < 0.0 {
        return Err(Error::Config(format!(
            "{ENV_PREFIX}{} must be a non-negative integer",
            key.to_uppercase()
        )));
    }
    *slot = v as u64;
    Ok(())
}

fn override_opt(
    key: &str,
    slot: &mut Option<f64>,
    env: &dyn Fn(&str) -> Option<String>,
) -> Result<()> {
    let mut v = slot.unwrap_or(f64::NAN);
    override_f64(key, &mut v, env)?;
    if !v.is_nan() {
        *slot = Some(v);
    }
    Ok(())
}

impl ModelProfile {
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "llama3-405b" => parse(LLAMA3_405B, "llama3-405b.toml"),
            _ => Err(Error::Config(format!("unknown model profile '{name}'"))),
        }
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        parse(text, origin)
    }

    /// A built-in name or a path to a TOML file.
    pub fn load(name_or_path: &str) -> Result<Self> {
        if Path::new(name_or_path).is_file() {
            Self::from_toml(&std::fs::read_to_string(name_or_path)?, name_or_path)
        } else {
            Self::builtin(name_or_path)
        }
    }

    pub fn apply_overrides(&mut self, env: &dyn Fn(&str) -> Option<String>) -> Result<()> {
        override_u64("n_query_heads", &mut self.n_query_heads, env)?;
        override_u64("n_kv_heads", &mut self.n_kv_heads, env)?;
        override_u64("model_dim", &mut self.model_dim, env)?;
        override_u64("n_layers", &mut self.n_layers, env)?;
        override_f64("param_count", &mut self.param_count, env)?;
        override_f64("elem_size", &mut self.elem_size, env)
    }
}

impl HardwareProfile {
    pub fn builtin(name: &str) -> Result<Self> {
        match name {
            "gtt-h100" | "gtt" => parse(GTT_H100, "gtt-h100.toml"),
            "gti-h100" | "gti" => parse(GTI_H100, "gti-h100.toml"),
            _ => Err(Error::Config(format!("unknown hardware profile '{name}'"))),
        }
    }

    pub fn from_toml(text: &str, origin: &str) -> Result<Self> {
        parse(text, origin)
    }

    pub fn load(name_or_path: &str) -> Result<Self> {
        if Path::new(name_or_path).is_file() {
            Self::from_toml(&std::fs::read_to_string(name_or_path)?, name_or_path)
        } else {
            Self::builtin(name_or_path)
        }
    }

    pub fn apply_overrides(&mut self, env: &dyn Fn(&str) -> Option<String>) -> Result<()> {
        override_f64("peak_compute", &mut self.peak_compute, env)?;
        override_f64("bandwidth", &mut self.bandwidth, env)?;
        override_opt("achieved_compute", &mut self.achieved_compute, env)?;
        override_opt("achieved_bandwidth", &mut self.achieved_bandwidth, env)?;
        override_u64("gpus_per_node", &mut self.gpus_per_node, env)?;
        override_f64("sendrecv_latency_s", &mut self.sendrecv_latency_s, env)?;
        override_f64("a2a_base_s", &mut self.a2a_base_s, env)?;
        override_f64("a2a_per_byte_s", &mut self.a2a_per_byte_s, env)
    }
}

/// Process environment lookup for [`ModelProfile::apply_overrides`] and
/// [`HardwareProfile::apply_overrides`].
pub fn process_env(key: &str) -> Option<String> {
    std::env::var(key).ok()
}

/// Splits `"model+hardware"`; either half may be a built-in name or a path.
pub fn split_profile_spec(spec: &str) -> Result<(&str, &str)> {
    spec.split_once('+')
        .filter(|(m, h)| !m.is_empty() && !h.is_empty())
        .ok_or_else(|| {
            Error::Config(format!(
                "profile '{spec}' must look like <model>+<hardware>, e.g. llama3-405b+gtt-h100"
            ))
        })
}
