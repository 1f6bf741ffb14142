//! TOML configuration shared by the daemon and the client.
//!
//! ```toml
//! [sim]
//! seed = 7
//! mode = "virtual"          # or "realtime"
//! realtime_scale = 1.0
//!
//! [latency]
//! net_rtt_us = 1.0
//! nvme_min_us = 5.0
//! nvme_max_us = 8.0
//! distribution = "uniform"  # fixed-min | fixed-max
//!
//! [nvme]
//! device_count = 4
//! capacity_blocks = 1048576
//! queue_depth = 16
//! backing = "memory"        # or "file:<path-prefix>"
//!
//! [slot]
//! zero_on_free = false
//! lane_width = 4
//! queue_depth = 64
//!
//! [server]
//! bind = "127.0.0.1:7470"
//! admin_token = "<64 hex digits>"
//!
//! [[tenants]]
//! id = 1
//! token = "<64 hex digits>"
//!
//! [client]
//! endpoint = "127.0.0.1:7470"
//! tenant = 1
//! token = "<64 hex digits>"
//! timeout_ms = 200
//! retries = 3
//! ```
//!
//! Every key is optional. `HYPERION_BIND` overrides `server.bind` and
//! `HYPERION_TOKEN` overrides `client.token`.

use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::dpu::DpuConfig;
use crate::nvme::{Backing, DeviceConfig};
use crate::sim::{Distribution, LatencyModel, RunMode, NANOS_PER_MICRO};
use crate::slot::{SlotConfig, Token};
use crate::wire::TOKEN_LEN;

pub const ENV_BIND: &str = "HYPERION_BIND";
pub const ENV_TOKEN: &str = "HYPERION_TOKEN";
pub const DEFAULT_ENDPOINT: &str = "127.0.0.1:7470";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error(transparent)]
    Toml(#[from] toml::de::Error),
    #[error("{0}")]
    Invalid(String),
}

/// Parses a token written as 64 hex digits.
pub fn parse_token(s: &str) -> Result<Token, ConfigError> {
    let bytes = hex::decode(s.trim()).map_err(|e| ConfigError::Invalid(format!("token: {e}")))?;
    bytes.try_into().map_err(|b: Vec<u8>| {
        ConfigError::Invalid(format!("token must be {TOKEN_LEN} bytes, got {}", b.len()))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    #[default]
    Virtual,
    Realtime,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub seed: u64,
    pub mode: Mode,
    pub realtime_scale: f64,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection {
            seed: 0,
            mode: Mode::Virtual,
            realtime_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LatencySection {
    pub net_rtt_us: f64,
    pub nvme_min_us: f64,
    pub nvme_max_us: f64,
    pub distribution: Distribution,
}

impl Default for LatencySection {
    fn default() -> Self {
        LatencySection {
            net_rtt_us: 1.0,
            nvme_min_us: 5.0,
            nvme_max_us: 8.0,
            distribution: Distribution::Uniform,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NvmeSection {
    pub device_count: u32,
    pub capacity_blocks: u64,
    pub queue_depth: u32,
    pub backing: String,
}

impl Default for NvmeSection {
    fn default() -> Self {
        let d = DeviceConfig::default();
        NvmeSection {
            device_count: d.device_count,
            capacity_blocks: d.capacity_blocks,
            queue_depth: d.queue_depth,
            backing: "memory".into(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlotSection {
    pub zero_on_free: bool,
    pub lane_width: usize,
    pub queue_depth: usize,
}

impl Default for SlotSection {
    fn default() -> Self {
        let s = SlotConfig::default();
        SlotSection {
            zero_on_free: s.zero_on_free,
            lane_width: s.lane_width,
            queue_depth: s.queue_depth,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerSection {
    pub bind: String,
    pub admin_token: Option<String>,
}

impl Default for ServerSection {
    fn default() -> Self {
        ServerSection {
            bind: DEFAULT_ENDPOINT.into(),
            admin_token: None,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TenantEntry {
    pub id: u16,
    pub token: String,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientSection {
    pub endpoint: String,
    pub tenant: u16,
    pub token: Option<String>,
    pub timeout_ms: u64,
    pub retries: u32,
}

impl Default for ClientSection {
    fn default() -> Self {
        ClientSection {
            endpoint: DEFAULT_ENDPOINT.into(),
            tenant: 1,
            token: None,
            timeout_ms: 200,
            retries: 3,
        }
    }
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub sim: SimSection,
    pub latency: LatencySection,
    pub nvme: NvmeSection,
    pub slot: SlotSection,
    pub server: ServerSection,
    pub tenants: Vec<TenantEntry>,
    pub client: ClientSection,
}

fn micros(us: f64, what: &str) -> Result<u64, ConfigError> {
    if !us.is_finite() || us < 0.0 {
        return Err(ConfigError::Invalid(format!(
            "{what} must be a non-negative number of microseconds"
        )));
    }
    Ok((us * NANOS_PER_MICRO as f64).round() as u64)
}

impl Config {
    pub fn parse(text: &str) -> Result<Config, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Config, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Config::parse(&text)
    }

    pub fn latency_model(&self) -> Result<LatencyModel, ConfigError> {
        let l = &self.latency;
        let m = LatencyModel {
            net_rtt_ns: micros(l.net_rtt_us, "latency.net_rtt_us")?,
            nvme_min_ns: micros(l.nvme_min_us, "latency.nvme_min_us")?,
            nvme_max_ns: micros(l.nvme_max_us, "latency.nvme_max_us")?,
            distribution: l.distribution,
            write_override: None,
        };
        m.validate()
            .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(m)
    }

    pub fn device_config(&self) -> Result<DeviceConfig, ConfigError> {
        let n = &self.nvme;
        Ok(DeviceConfig {
            device_count: n.device_count,
            capacity_blocks: n.capacity_blocks,
            queue_depth: n.queue_depth,
            backing: n.backing.parse::<Backing>().map_err(ConfigError::Invalid)?,
            access_log: false,
        })
    }

    pub fn run_mode(&self) -> RunMode {
        match self.sim.mode {
            Mode::Virtual => RunMode::Virtual,
            Mode::Realtime => RunMode::Realtime {
                scale: self.sim.realtime_scale,
            },
        }
    }

    pub fn dpu_config(&self) -> Result<DpuConfig, ConfigError> {
        let admin_token = match &self.server.admin_token {
            Some(t) => parse_token(t)?,
            None => [0; TOKEN_LEN],
        };
        let tenants = self
            .tenants
            .iter()
            .map(|t| Ok((t.id, parse_token(&t.token)?)))
            .collect::<Result<Vec<_>, ConfigError>>()?;
        Ok(DpuConfig {
            latency: self.latency_model()?,
            devices: self.device_config()?,
            seed: self.sim.seed,
            slots: SlotConfig {
                lane_width: self.slot.lane_width,
                queue_depth: self.slot.queue_depth,
                zero_on_free: self.slot.zero_on_free,
                ..SlotConfig::default()
            },
            admin_token,
            tenants,
            record_dispatch: false,
        })
    }

    /// Bind address after applying `HYPERION_BIND`.
    pub fn bind_address(&self) -> String {
        std::env::var(ENV_BIND).unwrap_or_else(|_| self.server.bind.clone())
    }

    /// Client token from `HYPERION_TOKEN`, else `client.token`.
    pub fn client_token(&self) -> Result<Option<Token>, ConfigError> {
        match std::env::var(ENV_TOKEN)
            .ok()
            .or_else(|| self.client.token.clone())
        {
            Some(t) => parse_token(&t).map(Some),
            None => Ok(None),
        }
    }
}
