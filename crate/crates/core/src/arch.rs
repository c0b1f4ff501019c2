//! Architecture configs: a small TOML schema describing a layer stack, plus
//! the shipped desk-scale presets. Configs are the single source of truth for
//! network structure — they are embedded verbatim in model files so a
//! checkpoint can always be rebuilt without out-of-band knowledge.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

pub const ARCH_SCHEMA: &str = "prunekit-arch-v1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LayerKind {
    Conv,
    Relu,
    Maxpool,
    Flatten,
    Affine,
    ResidualBlock,
}

impl LayerKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::Relu => "relu",
            LayerKind::Maxpool => "maxpool",
            LayerKind::Flatten => "flatten",
            LayerKind::Affine => "affine",
            LayerKind::ResidualBlock => "residual-block",
        }
    }
}

/// One layer entry. Field applicability depends on `kind`; `validate`
/// rejects both missing and stray fields so a config can't silently carry
/// ignored keys.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub id: String,
    pub kind: LayerKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub filters: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub window: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch2: Option<Vec<LayerSpec>>,
}

impl LayerSpec {
    fn bare(id: &str, kind: LayerKind) -> Self {
        LayerSpec {
            id: id.to_string(),
            kind,
            filters: None,
            kernel: None,
            stride: None,
            padding: None,
            window: None,
            units: None,
            branch2: None,
        }
    }

    pub fn conv(id: &str, filters: usize, kernel: usize, stride: usize, padding: usize) -> Self {
        LayerSpec {
            filters: Some(filters),
            kernel: Some(kernel),
            stride: Some(stride),
            padding: Some(padding),
            ..Self::bare(id, LayerKind::Conv)
        }
    }

    pub fn relu(id: &str) -> Self {
        Self::bare(id, LayerKind::Relu)
    }

    pub fn maxpool(id: &str, window: usize, stride: usize) -> Self {
        LayerSpec {
            window: Some(window),
            stride: Some(stride),
            ..Self::bare(id, LayerKind::Maxpool)
        }
    }

    pub fn flatten(id: &str) -> Self {
        Self::bare(id, LayerKind::Flatten)
    }

    pub fn affine(id: &str, units: usize) -> Self {
        LayerSpec { units: Some(units), ..Self::bare(id, LayerKind::Affine) }
    }

    pub fn residual(id: &str, branch2: Vec<LayerSpec>) -> Self {
        LayerSpec { branch2: Some(branch2), ..Self::bare(id, LayerKind::ResidualBlock) }
    }

    fn check_fields(&self, inside_block: bool) -> Result<()> {
        let id = &self.id;
        if id.is_empty() {
            return Err(Error::config("layer with empty id"));
        }
        let deny = |field: &str, set: bool| -> Result<()> {
            if set {
                Err(Error::config(format!(
                    "layer '{id}': field '{field}' does not apply to kind '{}'",
                    self.kind.as_str()
                )))
            } else {
                Ok(())
            }
        };
        let need = |field: &str, value: Option<usize>| -> Result<usize> {
            value.ok_or_else(|| {
                Error::config(format!(
                    "layer '{id}': kind '{}' requires field '{field}'",
                    self.kind.as_str()
                ))
            })
        };
        let positive = |field: &str, v: usize| -> Result<()> {
            if v == 0 {
                Err(Error::config(format!("layer '{id}': '{field}' must be >= 1")))
            } else {
                Ok(())
            }
        };
        match self.kind {
            LayerKind::Conv => {
                positive("filters", need("filters", self.filters)?)?;
                positive("kernel", need("kernel", self.kernel)?)?;
                positive("stride", self.stride.unwrap_or(1))?;
                deny("window", self.window.is_some())?;
                deny("units", self.units.is_some())?;
                deny("branch2", self.branch2.is_some())?;
            }
            LayerKind::Relu | LayerKind::Flatten => {
                deny("filters", self.filters.is_some())?;
                deny("kernel", self.kernel.is_some())?;
                deny("stride", self.stride.is_some())?;
                deny("padding", self.padding.is_some())?;
                deny("window", self.window.is_some())?;
                deny("units", self.units.is_some())?;
                deny("branch2", self.branch2.is_some())?;
            }
            LayerKind::Maxpool => {
                let window = need("window", self.window)?;
                positive("window", window)?;
                positive("stride", self.stride.unwrap_or(window))?;
                deny("filters", self.filters.is_some())?;
                deny("kernel", self.kernel.is_some())?;
                deny("padding", self.padding.is_some())?;
                deny("units", self.units.is_some())?;
                deny("branch2", self.branch2.is_some())?;
            }
            LayerKind::Affine => {
                positive("units", need("units", self.units)?)?;
                deny("filters", self.filters.is_some())?;
                deny("kernel", self.kernel.is_some())?;
                deny("stride", self.stride.is_some())?;
                deny("padding", self.padding.is_some())?;
                deny("window", self.window.is_some())?;
                deny("branch2", self.branch2.is_some())?;
            }
            LayerKind::ResidualBlock => {
                if inside_block {
                    return Err(Error::config(format!("layer '{id}': residual blocks do not nest")));
                }
                deny("filters", self.filters.is_some())?;
                deny("kernel", self.kernel.is_some())?;
                deny("stride", self.stride.is_some())?;
                deny("padding", self.padding.is_some())?;
                deny("window", self.window.is_some())?;
                deny("units", self.units.is_some())?;
                let branch = self.branch2.as_deref().unwrap_or(&[]);
                if branch.is_empty() {
                    return Err(Error::config(format!("layer '{id}': branch2 must be non-empty")));
                }
                for inner in branch {
                    if !matches!(inner.kind, LayerKind::Conv | LayerKind::Relu) {
                        return Err(Error::config(format!(
                            "layer '{}': kind '{}' not allowed inside a residual branch",
                            inner.id,
                            inner.kind.as_str()
                        )));
                    }
                    inner.check_fields(true)?;
                }
            }
        }
        Ok(())
    }

    /// Fill in defaulted fields so rendering is canonical.
    fn normalize(&mut self) {
        match self.kind {
            LayerKind::Conv => {
                self.stride.get_or_insert(1);
                self.padding.get_or_insert(0);
            }
            LayerKind::Maxpool => {
                let w = self.window.unwrap_or(1);
                self.stride.get_or_insert(w);
            }
            LayerKind::ResidualBlock => {
                for inner in self.branch2.iter_mut().flatten() {
                    inner.normalize();
                }
            }
            _ => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub schema: String,
    /// Input shape as channels, height, width.
    pub input: Vec<usize>,
    pub class_count: usize,
    #[serde(rename = "layer")]
    pub layers: Vec<LayerSpec>,
}

impl ArchConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg: ArchConfig =
            toml::from_str(text).map_err(|e| Error::config(format!("architecture: {e}")))?;
        cfg.validate()?;
        for layer in &mut cfg.layers {
            layer.normalize();
        }
        Ok(cfg)
    }

    /// Programmatic counterpart of `parse`: same validation and defaults.
    pub fn assemble(
        input: [usize; 3],
        class_count: usize,
        layers: Vec<LayerSpec>,
    ) -> Result<Self> {
        let mut cfg = ArchConfig {
            schema: ARCH_SCHEMA.to_string(),
            input: input.to_vec(),
            class_count,
            layers,
        };
        cfg.validate()?;
        for layer in &mut cfg.layers {
            layer.normalize();
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema != ARCH_SCHEMA {
            return Err(Error::config(format!(
                "unsupported architecture schema '{}' (expected '{ARCH_SCHEMA}')",
                self.schema
            )));
        }
        if self.input.len() != 3 || self.input.iter().any(|&e| e == 0) {
            return Err(Error::config(format!(
                "input must be [channels, height, width] with positive extents, got {:?}",
                self.input
            )));
        }
        if self.class_count == 0 {
            return Err(Error::config("class_count must be >= 1"));
        }
        if self.layers.is_empty() {
            return Err(Error::config("architecture has no layers"));
        }
        let mut seen = std::collections::BTreeSet::new();
        let mut visit = |id: &str| -> Result<()> {
            if !seen.insert(id.to_string()) {
                Err(Error::config(format!("duplicate layer id '{id}'")))
            } else {
                Ok(())
            }
        };
        for layer in &self.layers {
            layer.check_fields(false)?;
            visit(&layer.id)?;
            for inner in layer.branch2.iter().flatten() {
                visit(&inner.id)?;
            }
        }
        Ok(())
    }

    /// Deterministic rendering; `parse(render(cfg)) == cfg` and the bytes are
    /// what gets embedded in model files.
    pub fn render(&self) -> String {
        toml::to_string(self).expect("arch config serializes")
    }

    pub fn preset(name: &str) -> Result<Self> {
        let cfg = match name {
            "lenet-desk" => ArchConfig {
                schema: ARCH_SCHEMA.to_string(),
                input: vec![1, 28, 28],
                class_count: 10,
                layers: vec![
                    LayerSpec::conv("conv1", 8, 5, 1, 0),
                    LayerSpec::relu("relu1"),
                    LayerSpec::maxpool("pool1", 2, 2),
                    LayerSpec::conv("conv2", 16, 5, 1, 0),
                    LayerSpec::relu("relu2"),
                    LayerSpec::maxpool("pool2", 2, 2),
                    LayerSpec::flatten("flatten"),
                    LayerSpec::affine("fc1", 64),
                    LayerSpec::affine("fc2", 10),
                ],
            },
            "resnet-desk" => ArchConfig {
                schema: ARCH_SCHEMA.to_string(),
                input: vec![1, 28, 28],
                class_count: 10,
                layers: vec![
                    LayerSpec::conv("stem", 8, 3, 1, 1),
                    LayerSpec::relu("stem_relu"),
                    LayerSpec::maxpool("pool1", 2, 2),
                    LayerSpec::residual(
                        "block1",
                        vec![
                            LayerSpec::conv("block1_conv_a", 8, 3, 1, 1),
                            LayerSpec::relu("block1_relu"),
                            LayerSpec::conv("block1_conv_b", 8, 3, 1, 1),
                        ],
                    ),
                    LayerSpec::maxpool("pool2", 2, 2),
                    LayerSpec::flatten("flatten"),
                    LayerSpec::affine("fc", 10),
                ],
            },
            // Same depth and shapes as resnet-desk with the identity path
            // removed: the residual branch becomes an ordinary conv pair.
            "plain-desk" => ArchConfig {
                schema: ARCH_SCHEMA.to_string(),
                input: vec![1, 28, 28],
                class_count: 10,
                layers: vec![
                    LayerSpec::conv("stem", 8, 3, 1, 1),
                    LayerSpec::relu("stem_relu"),
                    LayerSpec::maxpool("pool1", 2, 2),
                    LayerSpec::conv("conv_a", 8, 3, 1, 1),
                    LayerSpec::relu("relu_a"),
                    LayerSpec::conv("conv_b", 8, 3, 1, 1),
                    LayerSpec::relu("relu_b"),
                    LayerSpec::maxpool("pool2", 2, 2),
                    LayerSpec::flatten("flatten"),
                    LayerSpec::affine("fc", 10),
                ],
            },
            other => {
                return Err(Error::config(format!(
                    "unknown preset '{other}' (available: lenet-desk, resnet-desk, plain-desk)"
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
