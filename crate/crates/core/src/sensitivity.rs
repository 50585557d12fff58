//! Analytic compliance gradient with respect to the mapping coefficients,
//! and a finite-difference verification harness.
//!
//! The chain is `d_alpha -> J(x^I) -> C^I -> compliance`. The middle link
//! comes from the cell solver's `dC/dJ_ab` with the correctors held fixed
//! (they are stationary for the energy form, so no extra solves are needed).
//! The last link is `dc/dC^I = -M^I` where `M^I` is the zone's integrated
//! strain outer product; compliance is self-adjoint.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::macrosolver::MacroSolution;
use crate::mapping::{jacobian_param_derivative, Layout, Mat};
use crate::microsolver::JacobianSensitivity;
use crate::scheduler::CellRecord;
use crate::tensor::ElasticTensor;

/// Components with analytic magnitude at or below this are compared in
/// absolute rather than relative terms.
pub const ABS_FLOOR: f64 = 1e-8;

fn sensitivity_of(record: &CellRecord, zone: usize) -> Result<&JacobianSensitivity> {
    record.sensitivity.as_ref().ok_or(Error::MissingRecord(zone))
}

/// `dC^I/dd_alpha` split into its two parts, at representative point `x`.
pub fn tensor_macro_sensitivity_parts(
    record: &CellRecord,
    zone: usize,
    layout: &Layout,
    x: &[f64],
    alpha: usize,
) -> Result<(ElasticTensor, ElasticTensor)> {
    let sens = sensitivity_of(record, zone)?;
    let n = layout.dim();
    let dj = jacobian_param_derivative(layout, x, alpha)?;
    let mut p1 = ElasticTensor::zeros(n);
    let mut p2 = ElasticTensor::zeros(n);
    for a in 0..n {
        for b in 0..n {
            let w = dj[a][b];
            if w != 0.0 {
                p1.add_scaled(w, &sens.part1[a * n + b]);
                p2.add_scaled(w, &sens.part2[a * n + b]);
            }
        }
    }
    Ok((p1, p2))
}

/// `dC^I/dd_alpha` at representative point `x`.
pub fn tensor_macro_sensitivity(
    record: &CellRecord,
    zone: usize,
    layout: &Layout,
    x: &[f64],
    alpha: usize,
) -> Result<ElasticTensor> {
    let (mut p1, p2) = tensor_macro_sensitivity_parts(record, zone, layout, x, alpha)?;
    p1.add_scaled(1.0, &p2);
    Ok(p1)
}

/// Gradient of the modelled compliance over every design variable.
///
/// `records[I]` must carry Jacobian sensitivities; `points[I]` is the zone's
/// representative point; the strain moments come from `solution`. Zones are
/// summed in index order so the result does not depend on scheduling.
pub fn compliance_gradient(
    records: &[&CellRecord],
    points: &[[f64; 3]],
    layout: &Layout,
    solution: &MacroSolution,
) -> Result<Vec<f64>> {
    let n = layout.dim();
    if records.len() != points.len() || records.len() != solution.group_moments.len() {
        return Err(Error::dim(points.len(), records.len()));
    }
    let mut g = vec![0.0; layout.len()];
    for (zone, (rec, x)) in records.iter().zip(points).enumerate() {
        let sens = sensitivity_of(rec, zone)?;
        let moment = &solution.group_moments[zone];
        // q_ab = <dC/dJ_ab, M>.
        let mut q: Mat = [[0.0; 3]; 3];
        for a in 0..n {
            for b in 0..n {
                q[a][b] = sens.total(a * n + b).contract(moment);
            }
        }
        for (alpha, ga) in g.iter_mut().enumerate() {
            let dj = jacobian_param_derivative(layout, &x[..n], alpha)?;
            let mut acc = 0.0;
            for a in 0..n {
                for b in 0..n {
                    acc += dj[a][b] * q[a][b];
                }
            }
            *ga -= acc;
        }
    }
    Ok(g)
}

/// One row of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdRow {
    pub component: usize,
    pub name: String,
    pub analytic: f64,
    /// Central differences, one per requested step.
    pub fd: Vec<f64>,
    /// Richardson extrapolation of the first step and its half.
    pub reference: f64,
    pub rel_err: f64,
    pub flagged: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdReport {
    pub steps: Vec<f64>,
    pub tolerance: f64,
    pub rows: Vec<FdRow>,
}

impl FdReport {
    pub fn flagged(&self) -> Vec<usize> {
        self.rows.iter().filter(|r| r.flagged).map(|r| r.component).collect()
    }

    pub fn max_rel_err(&self) -> f64 {
        self.rows.iter().fold(0.0, |m, r| m.max(r.rel_err))
    }

    /// Writes `component,analytic,fd,rel_err` (plus name and per-step FD).
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(f, "component,name,analytic,fd,rel_err,flagged")?;
        for h in &self.steps {
            write!(f, ",fd_h{h:e}")?;
        }
        writeln!(f)?;
        for r in &self.rows {
            write!(f, "{},{},{:e},{:e},{:e},{}", r.component, r.name, r.analytic, r.reference, r.rel_err, r.flagged)?;
            for v in &r.fd {
                write!(f, ",{v:e}")?;
            }
            writeln!(f)?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Relative error with the absolute floor for near-zero components.
pub fn fd_error(analytic: f64, reference: f64) -> f64 {
    let diff = (analytic - reference).abs();
    if analytic.abs() <= ABS_FLOOR && reference.abs() <= ABS_FLOOR {
        diff
    } else {
        diff / reference.abs().max(analytic.abs()).max(ABS_FLOOR)
    }
}

/// Compares `analytic` against central differences of `f` at `x` along the
/// listed components. `steps` is non-empty; the first step and its half
/// feed the Richardson reference.
pub fn fd_check_fn(
    mut f: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    analytic: &[f64],
    components: &[usize],
    names: &[String],
    steps: &[f64],
    tolerance: f64,
) -> Result<FdReport> {
    if steps.is_empty() || steps.iter().any(|h| !(*h > 0.0)) {
        return Err(Error::param("finite-difference steps must be positive"));
    }
    if analytic.len() != x.len() {
        return Err(Error::dim(x.len(), analytic.len()));
    }
    let central = |k: usize, h: f64, f: &mut dyn FnMut(&[f64]) -> Result<f64>| -> Result<f64> {
        let mut xp = x.to_vec();
        xp[k] += h;
        let fp = f(&xp)?;
        xp[k] = x[k] - h;
        let fm = f(&xp)?;
        Ok((fp - fm) / (2.0 * h))
    };
    let mut rows = Vec::with_capacity(components.len());
    for &k in components {
        if k >= x.len() {
            return Err(Error::param(format!("component {k} out of range")));
        }
        let mut fd = Vec::with_capacity(steps.len());
        for &h in steps {
            fd.push(central(k, h, &mut f)?);
        }
        let half = central(k, 0.5 * steps[0], &mut f)?;
        let reference = (4.0 * half - fd[0]) / 3.0;
        let rel_err = fd_error(analytic[k], reference);
        rows.push(FdRow {
            component: k,
            name: names.get(k).cloned().unwrap_or_else(|| k.to_string()),
            analytic: analytic[k],
            fd,
            reference,
            rel_err,
            flagged: rel_err > tolerance,
        });
    }
    Ok(FdReport { steps: steps.to_vec(), tolerance, rows })
}

/// Pearson-style sign agreement between two gradients: positive when they
/// point into the same half-space.
pub fn gradient_correlation(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}
