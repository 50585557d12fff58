//! Run configuration: named presets merged under user overrides, then
//! deserialized strictly (unknown keys are errors).

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::driver::{Analysis, OptimizerSettings};
use crate::error::{Error, Result};
use crate::finescale::FinescaleConfig;
use crate::macrosolver::MacroProblem;
use crate::mapping::{pack, DesignVector, PolyMap, Restrictions};
use crate::microsolver::{CellMesh, VoidNodes};
use crate::scheduler::SchedulerOptions;
use crate::tensor::{isotropic_tensor, ElasticTensor, Material};
use crate::unitcell::{builtin_cell, BuiltinCell, CellRaster};

/// Environment variable holding the default worker count.
pub const POOL_ENV: &str = "GMC_POOL";

/// JSON schema of [`RunConfig`].
pub const SCHEMA: &str = include_str!("../schema/run_config.schema.json");

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// 2 x 1 beam, right edge clamped, uniform downward traction 2 on top.
    ShortBeamDistributed,
    /// Point load at mid-left; upper half with a mirror plane.
    ShortBeamPoint,
    /// Point load at mid-left on the full 2 x 1 domain.
    ShortBeamPointFull,
    /// 2 x 1 x 0.5 beam with a mid-left line load; half model.
    #[serde(rename = "beam_3d_line")]
    Beam3dLine,
}

impl Preset {
    pub const ALL: [Preset; 4] =
        [Preset::ShortBeamDistributed, Preset::ShortBeamPoint, Preset::ShortBeamPointFull, Preset::Beam3dLine];

    pub fn name(self) -> &'static str {
        match self {
            Preset::ShortBeamDistributed => "short_beam_distributed",
            Preset::ShortBeamPoint => "short_beam_point",
            Preset::ShortBeamPointFull => "short_beam_point_full",
            Preset::Beam3dLine => "beam_3d_line",
        }
    }

    pub fn parse(s: &str) -> Result<Preset> {
        Preset::ALL.into_iter().find(|p| p.name() == s).ok_or_else(|| Error::Config(format!("unknown preset `{s}`")))
    }

    /// Every field of the configuration, for this preset.
    pub fn defaults(self) -> Value {
        let optimizer = serde_json::to_value(OptimizerSettings::default()).expect("plain data");
        let mut v = match self {
            Preset::ShortBeamDistributed => json!({
                "problem": {
                    "dim": 2, "origin": [0.0, 0.0], "size": [2.0, 1.0], "mesh": [400, 200],
                    "constraints": [{"type": "face", "axis": 0, "face": "hi", "components": [0, 1], "value": 0.0}],
                    "loads": [{"type": "face_traction", "axis": 1, "face": "hi", "traction": [0.0, -2.0]}],
                    "mirror": null, "compliance_factor": 1.0
                },
                "cell": {"builtin": "x_2d", "file": null, "fraction": 0.3, "resolution": 64},
                "zones": [16, 8],
                "finescale": {"h": 0.0625, "mesh": [1024, 512], "top_solid_layers": 3, "ersatz": 1e-6}
            }),
            Preset::ShortBeamPoint => json!({
                "problem": {
                    "dim": 2, "origin": [0.0, 0.0], "size": [2.0, 0.5], "mesh": [400, 100],
                    "constraints": [{"type": "face", "axis": 0, "face": "hi", "components": [0, 1], "value": 0.0}],
                    "loads": [{"type": "point", "position": [0.0, 0.0], "force": [0.0, -0.5]}],
                    "mirror": {"axis": 1, "face": "lo", "kind": "antisymmetric"}, "compliance_factor": 2.0
                },
                "cell": {"builtin": "x_2d", "file": null, "fraction": 0.3, "resolution": 64},
                "zones": [16, 4],
                "finescale": {"h": 0.0625, "mesh": [1024, 256], "top_solid_layers": 0, "ersatz": 1e-6}
            }),
            Preset::ShortBeamPointFull => json!({
                "problem": {
                    "dim": 2, "origin": [0.0, -0.5], "size": [2.0, 1.0], "mesh": [400, 200],
                    "constraints": [{"type": "face", "axis": 0, "face": "hi", "components": [0, 1], "value": 0.0}],
                    "loads": [{"type": "point", "position": [0.0, 0.0], "force": [0.0, -1.0]}],
                    "mirror": null, "compliance_factor": 1.0
                },
                "cell": {"builtin": "x_2d", "file": null, "fraction": 0.3, "resolution": 64},
                "zones": [16, 8],
                "finescale": {"h": 0.0625, "mesh": [1024, 512], "top_solid_layers": 0, "ersatz": 1e-6}
            }),
            Preset::Beam3dLine => json!({
                "problem": {
                    "dim": 3, "origin": [0.0, 0.0, 0.0], "size": [2.0, 0.5, 0.5], "mesh": [80, 20, 20],
                    "constraints": [{"type": "face", "axis": 0, "face": "hi", "components": [0, 1, 2], "value": 0.0}],
                    "loads": [{"type": "line", "axis": 2, "position": [0.0, 0.0, 0.0], "force": [0.0, -0.5, 0.0]}],
                    "mirror": {"axis": 1, "face": "lo", "kind": "antisymmetric"}, "compliance_factor": 2.0
                },
                "cell": {"builtin": "orthogonal_cross_3d", "file": null, "fraction": 0.3, "resolution": 32},
                "zones": [4, 1, 1],
                "finescale": {"h": 0.125, "mesh": [128, 32, 32], "top_solid_layers": 0, "ersatz": 1e-6}
            }),
        };
        let dim = v["problem"]["dim"].as_u64().unwrap_or(2);
        let common = json!({
            "preset": self.name(),
            "material": {
                "youngs_modulus": 1.0, "poisson_ratio": 0.3,
                "model": if dim == 3 { "solid_3d" } else { "plane_stress_2d" }
            },
            "mapping": {"restrictions": "full", "initial": null},
            "optimizer": optimizer,
            "pool": default_pool(),
            "keep_xi": false,
            "void_nodes": "auto",
            "ersatz": 1e-6,
            "out": "out",
            "seed": 0,
            "snapshot_stride": 10
        });
        merge(&mut v, &common);
        v
    }
}

/// Pool size from the environment, 1 when unset or invalid.
pub fn default_pool() -> usize {
    std::env::var(POOL_ENV).ok().and_then(|s| s.trim().parse().ok()).filter(|&p| p >= 1).unwrap_or(1)
}

/// Unit cell source: a builtin shape at a target fraction, or a raster file
/// (`.pgm` for 2D, voxel format otherwise).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CellSpec {
    pub builtin: Option<BuiltinCell>,
    pub file: Option<PathBuf>,
    pub fraction: f64,
    pub resolution: usize,
}

impl CellSpec {
    pub fn build(&self) -> Result<CellRaster> {
        match (&self.builtin, &self.file) {
            (Some(b), None) => builtin_cell(*b, self.fraction, self.resolution),
            (None, Some(p)) => {
                if p.extension().is_some_and(|e| e == "pgm") {
                    CellRaster::read_pgm(p)
                } else {
                    CellRaster::read_voxels(p)
                }
            }
            _ => Err(Error::Config("cell needs exactly one of `builtin` and `file`".into())),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MappingSpec {
    pub restrictions: Restrictions,
    /// Initial design JSON; identity map when absent.
    pub initial: Option<PathBuf>,
}

/// Fully resolved run configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    pub problem: MacroProblem,
    pub cell: CellSpec,
    pub zones: Vec<usize>,
    pub mapping: MappingSpec,
    pub material: Material,
    pub optimizer: OptimizerSettings,
    pub finescale: FinescaleConfig,
    pub pool: usize,
    pub keep_xi: bool,
    pub void_nodes: VoidNodes,
    pub ersatz: f64,
    pub out: PathBuf,
    pub seed: u64,
    /// Write a design snapshot every this many iterations (0: never).
    pub snapshot_stride: usize,
}

/// Recursively merges `over` into `base`; objects merge key by key, every
/// other value (including arrays) replaces.
pub fn merge(base: &mut Value, over: &Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k.clone(), v.clone());
                    }
                }
            }
        }
        (slot, v) => *slot = v.clone(),
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> RunConfig {
        RunConfig::from_value(&json!({ "preset": p.name() })).expect("presets are valid")
    }

    /// Resolves overrides against the preset named in them (default
    /// `short_beam_distributed`).
    pub fn from_value(overrides: &Value) -> Result<RunConfig> {
        if !overrides.is_object() {
            return Err(Error::Config("configuration must be a JSON object".into()));
        }
        let name = overrides.get("preset").and_then(Value::as_str).unwrap_or("short_beam_distributed");
        let mut v = Preset::parse(name)?.defaults();
        merge(&mut v, overrides);
        let cfg: RunConfig = serde_json::from_value(v).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(text: &str) -> Result<RunConfig> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("invalid JSON: {e}")))?;
        RunConfig::from_value(&v)
    }

    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text =
            std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        RunConfig::from_json_str(&text)
    }

    pub fn dim(&self) -> usize {
        self.problem.dim
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(e.to_string());
        self.problem.validate().map_err(cfg)?;
        self.material.validate().map_err(cfg)?;
        let dim = self.dim();
        if self.material.model.dim() != dim {
            return Err(Error::Config(format!(
                "material model {:?} does not fit a {dim}D problem",
                self.material.model
            )));
        }
        if self.zones.len() != dim {
            return Err(Error::Config(format!("zones need {dim} counts")));
        }
        for d in 0..dim {
            if self.zones[d] == 0 || !self.problem.mesh[d].is_multiple_of(self.zones[d]) {
                return Err(Error::Config(format!(
                    "{} zones do not divide {} elements along axis {}",
                    self.zones[d],
                    self.problem.mesh[d],
                    d + 1
                )));
            }
        }
        if let Some(b) = self.cell.builtin {
            if b.dim() != dim {
                return Err(Error::Config(format!("cell {b:?} is not {dim}D")));
            }
        }
        if !(self.cell.fraction > 0.0 && self.cell.fraction < 1.0) {
            return Err(Error::Config("cell fraction must lie in (0, 1)".into()));
        }
        if self.pool == 0 {
            return Err(Error::Config("pool must be at least 1".into()));
        }
        if !(self.ersatz > 0.0 && self.ersatz <= 1e-3) {
            return Err(Error::Config("ersatz must lie in (0, 1e-3]".into()));
        }
        let o = &self.optimizer;
        if o.detj.enabled && !(o.detj.lo > 0.0 && o.detj.lo < 1.0 && o.detj.hi > 1.0) {
            return Err(Error::Config("det J bounds need 0 < lo < 1 < hi".into()));
        }
        if !(o.bounds.a >= 1.0 && o.bounds.b > 0.0 && o.bounds.c > 0.0) {
            return Err(Error::Config("coefficient bounds must contain the identity map".into()));
        }
        if !(o.mma.move_limit > 0.0 && o.tolerance > 0.0) {
            return Err(Error::Config("move limit and tolerance must be positive".into()));
        }
        self.finescale.validate(dim).map_err(cfg)?;
        Ok(())
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("plain data")
    }

    pub fn base_tensor(&self) -> Result<ElasticTensor> {
        isotropic_tensor(&self.material)
    }

    pub fn cell_raster(&self) -> Result<Arc<CellRaster>> {
        let r = self.cell.build()?;
        if r.dim() != self.dim() {
            return Err(Error::Config(format!("cell raster is {}D, problem is {}D", r.dim(), self.dim())));
        }
        Ok(Arc::new(r))
    }

    pub fn cell_mesh(&self) -> Result<Arc<CellMesh>> {
        Ok(Arc::new(CellMesh::new(self.cell_raster()?, self.ersatz, self.void_nodes)?))
    }

    pub fn scheduler_options(&self) -> SchedulerOptions {
        SchedulerOptions { pool: self.pool, keep_xi: self.keep_xi, spot_check: true, seed: self.seed }
    }

    /// Analysis with a freshly built cell mesh.
    pub fn analysis(&self) -> Result<Analysis> {
        self.analysis_with_mesh(self.cell_mesh()?)
    }

    pub fn analysis_with_mesh(&self, mesh: Arc<CellMesh>) -> Result<Analysis> {
        Analysis::new(
            self.problem.clone(),
            &self.zones,
            mesh,
            self.base_tensor()?,
            self.scheduler_options(),
            self.mapping.restrictions,
        )
    }

    pub fn initial_design(&self) -> Result<DesignVector> {
        match &self.mapping.initial {
            None => Ok(pack(&PolyMap::identity(self.dim()), self.mapping.restrictions)),
            Some(p) => read_design(p),
        }
    }
}

pub fn read_design(path: &Path) -> Result<DesignVector> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read design {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid design {}: {e}", path.display())))
}

/// Parses `AxB` or `AxBxC`.
pub fn parse_counts(s: &str) -> Result<Vec<usize>> {
    let v: std::result::Result<Vec<usize>, _> = s.split(['x', 'X']).map(|p| p.trim().parse::<usize>()).collect();
    match v {
        Ok(v) if (v.len() == 2 || v.len() == 3) && v.iter().all(|&c| c > 0) => Ok(v),
        _ => Err(Error::Config(format!("expected counts like 16x8 or 4x1x1, got `{s}`"))),
    }
}
