//! Fully resolved structure from the map and the cell, and the fine-mesh
//! solve used to validate homogenized compliance.
//!
//! A fine element is solid when the cell raster is solid at
//! `frac(y(x)/h)` for the element center `x`. The fine solve reuses the
//! macroscopic FE code with two materials: the base tensor and its ersatz
//! multiple.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fem::BoxGrid;
use crate::macrosolver::{Face, Load, MacroModel, MacroProblem, MacroSolution};
use crate::mapping::{det, PolyMap};
use crate::microsolver::DEFAULT_ERSATZ;
use crate::tensor::ElasticTensor;
use crate::unitcell::{write_voxel_file, CellRaster};

/// Below this `|det J|` at an element center the map counts as degenerate.
pub const DEGENERATE_DET: f64 = 1e-6;
/// Largest volume change allowed when forcing loaded layers solid.
pub const MAX_FORCED_VOLUME: f64 = 0.005;
/// Fine compliance above this multiple of the solid reference is flagged.
pub const DEGENERATE_RATIO: f64 = 1e6;
/// Relative residual demanded of the fine solve. Ersatz voids at 1e-6 on
/// a million-unknown mesh put the double-precision floor just above 1e-9.
pub const FINE_RESIDUAL_TOLERANCE: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinescaleConfig {
    /// Cell period in macroscopic length units.
    pub h: f64,
    /// Fine element counts per axis.
    pub mesh: Vec<usize>,
    /// Element layers forced solid under distributed loads.
    #[serde(default)]
    pub top_solid_layers: usize,
    #[serde(default = "default_ersatz")]
    pub ersatz: f64,
}

fn default_ersatz() -> f64 {
    DEFAULT_ERSATZ
}

impl FinescaleConfig {
    pub fn validate(&self, dim: usize) -> Result<()> {
        if !(self.h > 0.0 && self.h.is_finite()) {
            return Err(Error::param(format!("cell period h must be positive, got {}", self.h)));
        }
        if self.mesh.len() != dim || self.mesh.contains(&0) {
            return Err(Error::param(format!("fine mesh needs {dim} positive counts")));
        }
        if !(self.ersatz > 0.0 && self.ersatz <= 1e-3) {
            return Err(Error::param(format!("ersatz must lie in (0, 1e-3], got {}", self.ersatz)));
        }
        Ok(())
    }

    /// Scale ratio `h / L` with `L` the smallest domain extent.
    pub fn epsilon(&self, problem: &MacroProblem) -> f64 {
        let l = problem.size.iter().cloned().fold(f64::INFINITY, f64::min);
        self.h / l
    }
}

/// Resolved structure on the fine grid; `solid[e]` per element, `x1`
/// fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct FineRaster {
    pub grid: BoxGrid,
    pub solid: Vec<bool>,
}

impl FineRaster {
    pub fn solid_fraction(&self) -> f64 {
        self.solid.iter().filter(|&&s| s).count() as f64 / self.solid.len() as f64
    }

    pub fn solid_count(&self) -> usize {
        self.solid.iter().filter(|&&s| s).count()
    }

    /// Binary PGM, first row at the highest `x2`.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        let v: Vec<f64> = self.solid.iter().map(|&s| if s { 1.0 } else { 0.0 }).collect();
        write_field_pgm(&self.grid, &v, path)
    }

    /// Voxel file (same format as cell rasters), x1 fastest.
    pub fn write_voxels(&self, path: &Path) -> Result<()> {
        let c = self.grid.counts;
        write_voxel_file(
            path,
            self.grid.dim as u32,
            [c[0] as u32, c[1] as u32, c[2] as u32],
            self.solid.iter().map(|&s| if s { 1.0 } else { 0.0 }),
        )
    }
}

/// Writes a 2D per-element field scaled to `0..=255` as a binary PGM.
pub fn write_field_pgm(grid: &BoxGrid, values: &[f64], path: &Path) -> Result<()> {
    use std::io::Write;
    if grid.dim != 2 {
        return Err(Error::param("PGM output is 2D only"));
    }
    let [nx, ny, _] = grid.counts;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{nx} {ny}\n255\n")?;
    for row in (0..ny).rev() {
        let bytes: Vec<u8> = (0..nx).map(|i| (values[i + nx * row].clamp(0.0, 1.0) * 255.0).round() as u8).collect();
        f.write_all(&bytes)?;
    }
    f.flush()?;
    Ok(())
}

fn fine_grid(problem: &MacroProblem, cfg: &FinescaleConfig) -> Result<BoxGrid> {
    cfg.validate(problem.dim)?;
    BoxGrid::new(problem.dim, &cfg.mesh, &problem.origin, &problem.size)
}

/// Samples the cell through the map at every fine element center.
pub fn resolve_gmc(
    map: &PolyMap,
    raster: &CellRaster,
    cfg: &FinescaleConfig,
    problem: &MacroProblem,
) -> Result<FineRaster> {
    if map.dim() != problem.dim || raster.dim() != problem.dim {
        return Err(Error::dim(problem.dim, map.dim().min(raster.dim())));
    }
    let grid = fine_grid(problem, cfg)?;
    let eps = cfg.epsilon(problem);
    if eps >= 0.2 {
        log::warn!("scale ratio h/L = {eps:.3} is not small; homogenization is unreliable");
    }
    let dim = problem.dim;
    let sample = |e: usize| -> Result<bool> {
        let x = grid.element_center(e);
        let j = map.jacobian(&x[..dim]);
        let d = det(dim, &j);
        if d.abs() < DEGENERATE_DET {
            return Err(Error::DegenerateMap { location: x[..dim].to_vec(), det: d });
        }
        let y = map.evaluate(&x[..dim]);
        let yc: Vec<f64> = y[..dim].iter().map(|v| v / cfg.h).collect();
        Ok(raster.sample(&yc) >= 0.5)
    };
    let ne = grid.n_elements();
    #[cfg(feature = "parallel")]
    let solid: Result<Vec<bool>> = {
        use rayon::prelude::*;
        (0..ne).into_par_iter().map(sample).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let solid: Result<Vec<bool>> = (0..ne).map(sample).collect();
    Ok(FineRaster { grid, solid: solid? })
}

/// Outcome of one fine-scale solve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineReport {
    /// Compliance of the full structure (with the problem's compliance factor).
    pub compliance: f64,
    pub solid_fraction: f64,
    /// Fraction of elements switched to solid under distributed loads.
    pub forced_volume: f64,
    /// Solid compliance on a coarse grid, the degeneracy reference.
    pub solid_reference: f64,
    pub degenerate: bool,
    pub epsilon: f64,
    pub residual: f64,
}

/// Marks the element layers adjacent to every traction-loaded face solid;
/// returns the number of elements that changed.
pub fn force_loaded_layers(fine: &mut FineRaster, problem: &MacroProblem, layers: usize) -> usize {
    if layers == 0 {
        return 0;
    }
    let mut changed = 0;
    let grid = fine.grid.clone();
    for load in &problem.loads {
        if let Load::FaceTraction { axis, face, .. } = load {
            let count = grid.counts[*axis];
            for e in 0..grid.n_elements() {
                let i = grid.element_ijk(e)[*axis];
                let depth = match face {
                    Face::Lo => i,
                    Face::Hi => count - 1 - i,
                };
                if depth < layers && !fine.solid[e] {
                    fine.solid[e] = true;
                    changed += 1;
                }
            }
        }
    }
    changed
}

/// Solves the resolved structure. The raster is modified in place when
/// loaded layers are forced solid.
pub fn finescale_compliance(
    fine: &mut FineRaster,
    problem: &MacroProblem,
    cfg: &FinescaleConfig,
    base: &ElasticTensor,
) -> Result<(FineReport, MacroSolution)> {
    let grid = fine_grid(problem, cfg)?;
    if grid != fine.grid {
        return Err(Error::param("fine raster grid does not match the configuration"));
    }
    let changed = force_loaded_layers(fine, problem, cfg.top_solid_layers);
    let forced = changed as f64 / fine.solid.len() as f64;
    if forced > MAX_FORCED_VOLUME {
        return Err(Error::param(format!(
            "forcing {} loaded layers solid changes the volume by {:.3}% (limit {:.1}%)",
            cfg.top_solid_layers,
            100.0 * forced,
            100.0 * MAX_FORCED_VOLUME
        )));
    }
    let mut fp = problem.clone();
    fp.mesh = cfg.mesh.clone();
    let model = MacroModel::new(&fp)?.with_residual_tolerance(FINE_RESIDUAL_TOLERANCE);
    let tensors = [base.clone(), base.scaled(cfg.ersatz)];
    let group: Vec<u32> = fine.solid.iter().map(|&s| if s { 0 } else { 1 }).collect();
    let sol = model.solve(&tensors, &group)?;
    let compliance = problem.compliance_factor * sol.compliance;

    // Solid reference on a coarse mesh: only an order of magnitude matters.
    let mut rp = problem.clone();
    rp.mesh = problem.mesh.iter().map(|&c| c.clamp(1, 64)).collect();
    let rm = MacroModel::new(&rp)?;
    let ref_sol = rm.solve(std::slice::from_ref(base), &vec![0; rm.grid().n_elements()])?;
    let solid_reference = problem.compliance_factor * ref_sol.compliance;
    let degenerate = !(compliance.is_finite()) || compliance > DEGENERATE_RATIO * solid_reference;
    if degenerate {
        log::warn!("fine structure is degenerate: compliance {compliance:e} vs solid {solid_reference:e}");
    }
    Ok((
        FineReport {
            compliance,
            solid_fraction: fine.solid_fraction(),
            forced_volume: forced,
            solid_reference,
            degenerate,
            epsilon: cfg.epsilon(problem),
            residual: sol.residual,
        },
        sol,
    ))
}
