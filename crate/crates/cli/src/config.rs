use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use stratflow_core::covering::CoveringParams;
use stratflow_core::densities::Cutoff;
use stratflow_core::flow::{FlowConfig, InitialData, SingularPolicy};
use stratflow_core::strata::{DetectionParams, Ladder, CONTENT_REFINE};
use stratflow_core::Grid;

use crate::PipelineError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FieldChoice {
    /// Run the flow solver.
    #[default]
    Simulated,
    /// Closed-form `x / |x|`, bypassing simulation.
    Hedgehog,
    /// Closed-form line-singular map on a 3D grid, bypassing simulation.
    LineSingular,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSection {
    pub dim: usize,
    pub count: usize,
    /// The box is `[-half_width, half_width]^dim`.
    #[serde(default = "one")]
    pub half_width: f64,
    #[serde(default)]
    pub periodic: bool,
    #[serde(default)]
    pub field: FieldChoice,
    #[serde(default)]
    pub on_singular: SingularPolicy,
}

fn one() -> f64 {
    1.0
}

impl GridSection {
    pub fn build(&self) -> Result<Arc<Grid>, PipelineError> {
        let g = if self.periodic {
            Grid::periodic_box(self.dim, 2.0 * self.half_width, self.count)
        } else {
            Grid::centered(self.dim, self.half_width, self.count)
        };
        g.map(Arc::new).map_err(|e| PipelineError::Config(format!("[grid]: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FlowSection {
    pub initial: InitialData,
    pub solver: FlowConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DensitiesSection {
    pub centers: Vec<Vec<f64>>,
    pub radii: Vec<f64>,
    /// Defaults to the last recorded time.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t0: Option<f64>,
    #[serde(default = "global")]
    pub cutoff: Cutoff,
    /// Also run the monotonicity audit over consecutive radii.
    #[serde(default)]
    pub monotonicity: bool,
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
}

fn global() -> Cutoff {
    Cutoff::Global
}

fn default_tolerance() -> f64 {
    1e-3
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrataSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<f64>,
    /// Scaled to the grid spacing when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detection: Option<DetectionParams>,
    #[serde(default)]
    pub ks: Vec<usize>,
    #[serde(default = "one")]
    pub content_alpha: f64,
    #[serde(default)]
    pub content_radii: Vec<f64>,
    #[serde(default = "default_refine")]
    pub content_refine: usize,
    #[serde(default)]
    pub regularity_points: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub regularity_ladder: Option<Ladder>,
}

fn default_refine() -> usize {
    CONTENT_REFINE
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmtSection {
    pub k: usize,
    pub radii: Vec<f64>,
    /// Defaults to the centre of mass of the flagged set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    #[serde(default = "default_jones")]
    pub jones_scales: usize,
}

fn default_jones() -> usize {
    6
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OracleChoice {
    /// `Phi` computed from the field.
    #[default]
    Field,
    /// Closed form constant on the `x_1`-axis.
    Axis,
    /// Closed form peaked at the root centre.
    Point,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CoverSection {
    #[serde(default)]
    pub params: CoveringParams,
    #[serde(default)]
    pub oracle: OracleChoice,
    #[serde(default = "one")]
    pub amplitude: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub center: Option<Vec<f64>>,
    pub radius: f64,
    #[serde(default = "global")]
    pub cutoff: Cutoff,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t0: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default = "default_dir")]
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: default_dir() }
    }
}

fn default_dir() -> String {
    "out".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub grid: GridSection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub flow: Option<FlowSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub densities: Option<DensitiesSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strata: Option<StrataSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gmt: Option<GmtSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cover: Option<CoverSection>,
    #[serde(default)]
    pub output: OutputSection,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, PipelineError> {
        toml::from_str(text).map_err(|e| PipelineError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            PipelineError::Config(m) => PipelineError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String, PipelineError> {
        toml::to_string(self).map_err(|e| PipelineError::Config(e.to_string()))
    }

    /// Sorted-key JSON of every section except `[output]`.
    pub fn canonical_json(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(m) = v.as_object_mut() {
            m.remove("output");
        }
        v.to_string()
    }

    /// SHA-256 of the canonical JSON, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical_json().as_bytes()))
    }
}

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Independent seed for a named stage, derived from the run seed.
pub fn stage_seed(seed: u64, stage: &str) -> u64 {
    let tag = stage
        .bytes()
        .fold(0u64, |h, b| splitmix(h ^ b as u64));
    splitmix(seed ^ tag)
}
