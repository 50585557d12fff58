//! File output for solutions and fields: legacy VTK, CSV, grayscale maps.
//!
//! VTK files use the legacy ASCII `STRUCTURED_POINTS` layout (version 3.0),
//! readable by ParaView and VisIt; node and element data follow the grid
//! order with `x1` fastest.

use std::io::Write;
use std::path::Path;

use crate::error::Result;
use crate::fem::BoxGrid;
use crate::finescale::write_field_pgm;
use crate::macrosolver::{principal_stress_field, MacroSolution};
use crate::tensor::ElasticTensor;

/// Element-wise scalar attached to a VTK file.
pub struct CellField<'a> {
    pub name: &'a str,
    pub values: &'a [f64],
}

/// Writes displacements (point vectors) and any element scalars.
pub fn write_vtk(path: &Path, grid: &BoxGrid, u: Option<&[f64]>, cell_fields: &[CellField<'_>]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let nc = grid.node_counts();
    let h = grid.h();
    writeln!(f, "# vtk DataFile Version 3.0")?;
    writeln!(f, "graded microstructure field export")?;
    writeln!(f, "ASCII")?;
    writeln!(f, "DATASET STRUCTURED_POINTS")?;
    writeln!(f, "DIMENSIONS {} {} {}", nc[0], nc[1], nc[2])?;
    writeln!(f, "ORIGIN {} {} {}", grid.origin[0], grid.origin[1], if grid.dim == 3 { grid.origin[2] } else { 0.0 })?;
    writeln!(f, "SPACING {} {} {}", h[0], h[1], if grid.dim == 3 { h[2] } else { 1.0 })?;
    if let Some(u) = u {
        writeln!(f, "POINT_DATA {}", grid.n_nodes())?;
        writeln!(f, "VECTORS displacement double")?;
        for node in 0..grid.n_nodes() {
            let d = grid.dim;
            let w = if d == 3 { u[node * d + 2] } else { 0.0 };
            writeln!(f, "{:e} {:e} {:e}", u[node * d], u[node * d + 1], w)?;
        }
    }
    if !cell_fields.is_empty() {
        writeln!(f, "CELL_DATA {}", grid.n_elements())?;
        for field in cell_fields {
            writeln!(f, "SCALARS {} double 1", field.name)?;
            writeln!(f, "LOOKUP_TABLE default")?;
            for v in field.values {
                writeln!(f, "{v:e}")?;
            }
        }
    }
    f.flush()?;
    Ok(())
}

/// `log10` of the element energy density.
pub fn log_energy(solution: &MacroSolution) -> Vec<f64> {
    solution.element_energy.iter().map(|&e| e.max(1e-300).log10()).collect()
}

/// Log-energy map as a grayscale image, scaled between the field's 1st
/// and 99th percentile decades.
pub fn write_log_energy_pgm(path: &Path, grid: &BoxGrid, solution: &MacroSolution) -> Result<()> {
    let le = log_energy(solution);
    let mut sorted = le.clone();
    sorted.sort_by(|a, b| a.total_cmp(b));
    let pick = |q: f64| sorted[((sorted.len() - 1) as f64 * q).round() as usize];
    let (lo, hi) = (pick(0.01), pick(0.99));
    let span = (hi - lo).max(1e-12);
    let scaled: Vec<f64> = le.iter().map(|v| (v - lo) / span).collect();
    write_field_pgm(grid, &scaled, path)
}

/// `element,x1,x2,x3,sigma_max,d1,d2,d3` per element.
pub fn write_principal_stress_csv(path: &Path, grid: &BoxGrid, solution: &MacroSolution) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "element,x1,x2,x3,sigma_max,d1,d2,d3")?;
    for (e, p) in principal_stress_field(solution).iter().enumerate() {
        let c = grid.element_center(e);
        writeln!(
            f,
            "{e},{:.6},{:.6},{:.6},{:e},{:.6},{:.6},{:.6}",
            c[0], c[1], c[2], p.value, p.direction[0], p.direction[1], p.direction[2]
        )?;
    }
    f.flush()?;
    Ok(())
}

/// Zone tensors as JSON Voigt matrices.
pub fn write_tensors_json(path: &Path, tensors: &[ElasticTensor]) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(f, tensors)?;
    Ok(())
}

/// Any serializable value, pretty-printed.
pub fn write_json<T: serde::Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}
