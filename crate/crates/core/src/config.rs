//! TOML run configuration. One file can carry sections for every command;
//! each command reads the sections it needs and ignores the rest. Unknown
//! keys anywhere are hard errors so typos never pass silently.

use std::path::Path;

use crate::field::FieldConfig;
use crate::mesh::Aabb;
use crate::meta::MetaConfig;
use crate::renderer::RenderConfig;
use crate::synth::SceneSpec;
use crate::{adapt::FinetuneConfig, Error, Result};

/// Optional overrides for the field shape. Anything unset falls back to the
/// desk-scale default; the domain falls back to the dataset's canonical
/// template bounds.
#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldSettings {
    pub levels: Option<usize>,
    pub features: Option<usize>,
    pub table_size: Option<usize>,
    pub base_resolution: Option<usize>,
    pub finest_resolution: Option<usize>,
    pub domain_lo: Option<[f64; 3]>,
    pub domain_hi: Option<[f64; 3]>,
    pub geo_hidden: Option<usize>,
    pub geo_width: Option<usize>,
    pub latent: Option<usize>,
    pub color_hidden: Option<usize>,
    pub color_width: Option<usize>,
    pub sharpness_init: Option<f64>,
}

impl FieldSettings {
    /// Builds the concrete field shape, taking unset values from the
    /// desk-scale default over `default_domain`.
    pub fn resolve(&self, default_domain: Aabb) -> Result<FieldConfig> {
        let domain = match (self.domain_lo, self.domain_hi) {
            (Some(lo), Some(hi)) => Aabb { lo, hi },
            (None, None) => default_domain,
            _ => {
                return Err(Error::usage(
                    "field: domain_lo and domain_hi must be given together",
                ))
            }
        };
        let mut cfg = FieldConfig::desk_default(domain);
        if let Some(v) = self.levels {
            cfg.grid.levels = v;
        }
        if let Some(v) = self.features {
            cfg.grid.features = v;
        }
        if let Some(v) = self.table_size {
            cfg.grid.table_size = v;
        }
        if let Some(v) = self.base_resolution {
            cfg.grid.base_resolution = v;
        }
        if let Some(v) = self.finest_resolution {
            cfg.grid.finest_resolution = v;
        }
        if let Some(v) = self.geo_hidden {
            cfg.geo_hidden = v;
        }
        if let Some(v) = self.geo_width {
            cfg.geo_width = v;
        }
        if let Some(v) = self.latent {
            cfg.latent = v;
        }
        if let Some(v) = self.color_hidden {
            cfg.color_hidden = v;
        }
        if let Some(v) = self.color_width {
            cfg.color_width = v;
        }
        if let Some(v) = self.sharpness_init {
            cfg.sharpness_init = v;
        }
        Ok(cfg)
    }
}

/// The full run configuration. Every section is optional; commands use
/// defaults for sections they need but do not find.
#[derive(Clone, Debug, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub scene: Option<SceneSpec>,
    pub field: Option<FieldSettings>,
    pub meta: Option<MetaConfig>,
    pub finetune: Option<FinetuneConfig>,
    pub render: Option<RenderConfig>,
}

impl RunConfig {
    pub fn scene(&self) -> SceneSpec {
        self.scene.clone().unwrap_or_default()
    }

    pub fn field(&self) -> FieldSettings {
        self.field.clone().unwrap_or_default()
    }

    pub fn meta(&self) -> MetaConfig {
        self.meta.clone().unwrap_or_default()
    }

    pub fn finetune(&self) -> FinetuneConfig {
        self.finetune.unwrap_or_default()
    }

    pub fn render(&self) -> RenderConfig {
        self.render.unwrap_or_default()
    }
}

/// Parses configuration text. Unknown keys and type mismatches are usage
/// errors carrying toml's location info.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    toml::from_str(text).map_err(|e| Error::usage(format!("config: {e}")))
}

/// Reads and parses a configuration file.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::usage(format!("config {}: {e}", path.display())))?;
    parse_config(&text)
}
