//! The optimization loop: map -> zone Jacobians -> cell solves -> macro
//! solve -> compliance and gradient -> MMA update, repeated.

use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::macrosolver::{partition, MacroModel, MacroProblem, MacroSolution, Zoning};
use crate::mapping::{detj_constraints, pack, unpack, Coefficient, DesignVector, Layout, PolyMap, Restrictions};
use crate::microsolver::CellMesh;
use crate::mma::{MmaParams, MmaState};
use crate::scheduler::{CellRecord, Scheduler, SchedulerOptions, TaskBatch, TimingRecord};
use crate::sensitivity::{compliance_gradient, fd_check_fn, gradient_correlation, FdReport};
use crate::tensor::ElasticTensor;

/// Fixed pieces of one analysis: macro model, zoning and the cell scheduler.
#[derive(Debug)]
pub struct Analysis {
    problem: MacroProblem,
    model: MacroModel,
    zoning: Zoning,
    scheduler: Scheduler,
    layout: Layout,
}

/// Result of analyzing one design.
#[derive(Clone, Debug)]
pub struct Evaluation {
    /// Compliance of the full structure (model compliance times the
    /// problem's `compliance_factor`).
    pub compliance: f64,
    pub solution: MacroSolution,
    pub records: Vec<Arc<CellRecord>>,
    pub gradient: Option<Vec<f64>>,
    pub micro_seconds: f64,
    pub macro_seconds: f64,
    pub sensitivity_seconds: f64,
    pub solves: usize,
    pub cache_hits: usize,
}

impl Evaluation {
    pub fn tensors(&self) -> Vec<ElasticTensor> {
        self.records.iter().map(|r| r.tensor.clone()).collect()
    }
}

impl Analysis {
    pub fn new(
        problem: MacroProblem,
        zones: &[usize],
        mesh: Arc<CellMesh>,
        base: ElasticTensor,
        scheduler: SchedulerOptions,
        restrictions: Restrictions,
    ) -> Result<Self> {
        if mesh.dim() != problem.dim {
            return Err(Error::dim(problem.dim, mesh.dim()));
        }
        let model = MacroModel::new(&problem)?;
        let zoning = partition(model.grid(), zones)?;
        let scheduler = Scheduler::new(mesh, base, scheduler)?;
        let layout = Layout::new(problem.dim, restrictions);
        Ok(Analysis { problem, model, zoning, scheduler, layout })
    }

    pub fn problem(&self) -> &MacroProblem {
        &self.problem
    }

    pub fn model(&self) -> &MacroModel {
        &self.model
    }

    pub fn zoning(&self) -> &Zoning {
        &self.zoning
    }

    pub fn scheduler(&self) -> &Scheduler {
        &self.scheduler
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn identity_design(&self) -> DesignVector {
        pack(&PolyMap::identity(self.problem.dim), self.layout.restrictions())
    }

    /// Replaces the zoning (e.g. after refinement). Cached cells stay valid.
    pub fn set_zones(&mut self, zones: &[usize]) -> Result<()> {
        self.zoning = partition(self.model.grid(), zones)?;
        Ok(())
    }

    pub fn refine_zoning(&mut self) -> Result<()> {
        self.zoning = self.zoning.refine(self.model.grid())?;
        Ok(())
    }

    fn check_layout(&self, design: &DesignVector) -> Result<()> {
        if design.layout != self.layout {
            return Err(Error::param(format!(
                "design layout ({:?}, {} values) does not match the analysis ({:?}, {} values)",
                design.layout.restrictions(),
                design.values.len(),
                self.layout.restrictions(),
                self.layout.len()
            )));
        }
        Ok(())
    }

    /// Zone tensors for a design without the macro solve.
    pub fn zone_records(&self, design: &DesignVector, with_sensitivity: bool) -> Result<(Vec<Arc<CellRecord>>, f64)> {
        self.check_layout(design)?;
        let map = unpack(design)?;
        let n = self.problem.dim;
        let tasks = self.zoning.points().iter().enumerate().map(|(i, x)| (i, map.jacobian(&x[..n]))).collect();
        let out = self.scheduler.evaluate_all(&TaskBatch { tasks, with_sensitivity })?;
        Ok((out.records, out.seconds))
    }

    /// Full analysis of one design; the gradient is of the full-structure
    /// compliance.
    pub fn evaluate(&self, design: &DesignVector, with_sensitivity: bool) -> Result<Evaluation> {
        self.check_layout(design)?;
        let map = unpack(design)?;
        let n = self.problem.dim;
        let tasks = self.zoning.points().iter().enumerate().map(|(i, x)| (i, map.jacobian(&x[..n]))).collect();
        let batch = self.scheduler.evaluate_all(&TaskBatch { tasks, with_sensitivity })?;
        let t = Instant::now();
        let tensors: Vec<ElasticTensor> = batch.records.iter().map(|r| r.tensor.clone()).collect();
        let solution = self.model.solve(&tensors, self.zoning.element_zone())?;
        let macro_seconds = t.elapsed().as_secs_f64();
        let factor = self.problem.compliance_factor;
        let t = Instant::now();
        let gradient = if with_sensitivity {
            let recs: Vec<&CellRecord> = batch.records.iter().map(|r| r.as_ref()).collect();
            let mut g = compliance_gradient(&recs, self.zoning.points(), &self.layout, &solution)?;
            g.iter_mut().for_each(|x| *x *= factor);
            Some(g)
        } else {
            None
        };
        Ok(Evaluation {
            compliance: factor * solution.compliance,
            solution,
            records: batch.records,
            gradient,
            micro_seconds: batch.seconds,
            macro_seconds,
            sensitivity_seconds: t.elapsed().as_secs_f64(),
            solves: batch.solves,
            cache_hits: batch.cache_hits,
        })
    }

    /// Compliance only.
    pub fn compliance(&self, design: &DesignVector) -> Result<f64> {
        Ok(self.evaluate(design, false)?.compliance)
    }

    /// Analytic gradient against central differences of the whole pipeline
    /// (fresh cell solves at every perturbed design).
    pub fn fd_check(
        &self,
        design: &DesignVector,
        components: &[usize],
        steps: &[f64],
        tolerance: f64,
    ) -> Result<FdReport> {
        let eval = self.evaluate(design, true)?;
        let g = eval.gradient.expect("requested");
        let names = self.layout.names();
        let layout = self.layout.clone();
        fd_check_fn(
            |x| self.compliance(&DesignVector { values: x.to_vec(), layout: layout.clone() }),
            &design.values,
            &g,
            components,
            &names,
            steps,
            tolerance,
        )
    }
}

/// Coefficient box per family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bounds {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl Default for Bounds {
    fn default() -> Self {
        Bounds { a: 4.0, b: 8.0, c: 8.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetJBounds {
    pub enabled: bool,
    pub lo: f64,
    pub hi: f64,
}

impl Default for DetJBounds {
    fn default() -> Self {
        DetJBounds { enabled: true, lo: 1.0 / 3.0, hi: 3.0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimizerSettings {
    pub max_iterations: usize,
    /// Relative compliance change regarded as stalled.
    pub tolerance: f64,
    /// Consecutive stalled iterations that count as converged.
    pub patience: usize,
    pub bounds: Bounds,
    pub detj: DetJBounds,
    pub mma: MmaParams,
    /// Number of times to halve the zones and continue after convergence.
    pub refinements: usize,
    /// Check the gradient's sign against a finite difference on the first
    /// iteration and stop if they disagree.
    pub sign_check: bool,
    /// Halvings of a step toward the last feasible design before giving up.
    pub max_backtracks: usize,
}

impl Default for OptimizerSettings {
    fn default() -> Self {
        OptimizerSettings {
            max_iterations: 300,
            tolerance: 1e-4,
            patience: 5,
            bounds: Bounds::default(),
            detj: DetJBounds::default(),
            mma: MmaParams::default(),
            refinements: 0,
            sign_check: true,
            max_backtracks: 20,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Converged,
    MaxIterations,
}

/// One analyzed iterate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub zones: usize,
    pub compliance: f64,
    pub best: f64,
    /// Largest det J constraint value (<= 0 when feasible); 0 if disabled.
    pub max_violation: f64,
    pub gradient_norm: f64,
    /// The MMA step that produced this iterate used the artificial
    /// variables (feasibility restoration).
    pub restoration: bool,
    pub backtracks: usize,
    pub design: Vec<f64>,
    pub timing: TimingRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunHistory {
    pub restrictions: Restrictions,
    pub dim: usize,
    pub iterations: Vec<IterationRecord>,
    pub status: RunStatus,
    pub final_design: DesignVector,
    pub best_design: DesignVector,
    /// Zone counts when the run ended.
    pub zones: Vec<usize>,
}

impl RunHistory {
    pub fn initial_compliance(&self) -> f64 {
        self.iterations.first().map_or(f64::NAN, |r| r.compliance)
    }

    pub fn best_compliance(&self) -> f64 {
        self.iterations.last().map_or(f64::NAN, |r| r.best)
    }

    pub fn timings(&self) -> Vec<TimingRecord> {
        self.iterations.iter().map(|r| r.timing).collect()
    }

    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(
            f,
            "iteration,zones,compliance,best,max_violation,gradient_norm,restoration,backtracks,micro_s,macro_s,update_s,total_s"
        )?;
        for r in &self.iterations {
            writeln!(
                f,
                "{},{},{:.12e},{:.12e},{:.6e},{:.6e},{},{},{:.6},{:.6},{:.6},{:.6}",
                r.iteration,
                r.zones,
                r.compliance,
                r.best,
                r.max_violation,
                r.gradient_norm,
                r.restoration,
                r.backtracks,
                r.timing.micro_fea,
                r.timing.macro_fea,
                r.timing.update,
                r.timing.total
            )?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Box bounds per design entry.
pub fn design_bounds(layout: &Layout, bounds: &Bounds) -> (Vec<f64>, Vec<f64>) {
    layout
        .entries()
        .iter()
        .map(|c| {
            let w = match c {
                Coefficient::A { .. } => bounds.a,
                Coefficient::B { .. } => bounds.b,
                Coefficient::C { .. } => bounds.c,
            };
            (-w, w)
        })
        .unzip()
}

fn detj_violation(analysis: &Analysis, values: &[f64], detj: &DetJBounds) -> Result<f64> {
    if !detj.enabled {
        return Ok(0.0);
    }
    let d = DesignVector { values: values.to_vec(), layout: analysis.layout.clone() };
    let c = detj_constraints(&unpack(&d)?, &analysis.layout, &analysis.zoning.point_vecs(), detj.lo, detj.hi)?;
    Ok(c.max_violation())
}

/// Normalized det J constraints for MMA: `(lo - |det|)/lo`, `(|det| - hi)/hi`.
fn mma_constraints(analysis: &Analysis, values: &[f64], detj: &DetJBounds) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if !detj.enabled {
        return Ok((Vec::new(), Vec::new()));
    }
    let d = DesignVector { values: values.to_vec(), layout: analysis.layout.clone() };
    let c = detj_constraints(&unpack(&d)?, &analysis.layout, &analysis.zoning.point_vecs(), detj.lo, detj.hi)?;
    let mut f = Vec::with_capacity(2 * c.values.len());
    let mut g = Vec::with_capacity(2 * c.values.len());
    for (v, gr) in c.values.iter().zip(&c.gradients) {
        for (k, s) in [1.0 / detj.lo, 1.0 / detj.hi].into_iter().enumerate() {
            f.push(v[k] * s);
            g.push(gr[k].iter().map(|x| x * s).collect());
        }
    }
    Ok((f, g))
}

/// Runs the optimization loop from `initial`. `observer` sees every
/// analyzed iterate as it is recorded.
pub fn optimize(
    analysis: &mut Analysis,
    initial: &DesignVector,
    settings: &OptimizerSettings,
    mut observer: impl FnMut(&IterationRecord),
) -> Result<RunHistory> {
    analysis.check_layout(initial)?;
    if settings.max_iterations == 0 {
        return Err(Error::param("max_iterations must be at least 1"));
    }
    let (xmin, xmax) = design_bounds(&analysis.layout, &settings.bounds);
    if initial.values.iter().zip(xmin.iter().zip(&xmax)).any(|(x, (a, b))| x < a || x > b) {
        return Err(Error::Infeasible("initial design lies outside the coefficient box".into()));
    }
    let v0 = detj_violation(analysis, &initial.values, &settings.detj)?;
    if v0 > 0.0 {
        return Err(Error::Infeasible(format!(
            "initial design violates the det J bounds ({}, {}) by {v0:e}",
            settings.detj.lo, settings.detj.hi
        )));
    }

    let layout = analysis.layout.clone();
    let mut x = initial.values.clone();
    let mut history: Vec<IterationRecord> = Vec::new();
    let mut best = f64::INFINITY;
    let mut best_x = x.clone();
    let mut c0: Option<f64> = None;
    let mut stalled = 0;
    let mut refinements_left = settings.refinements;
    let mut pending_update = 0.0;
    let mut restoration = false;
    let mut backtracks = 0;
    let mut state: Option<MmaState> = None;
    let mut status = RunStatus::MaxIterations;

    for iteration in 0..settings.max_iterations {
        let t_iter = Instant::now();
        let design = DesignVector { values: x.clone(), layout: layout.clone() };
        let eval = analysis.evaluate(&design, true)?;
        let g = eval.gradient.clone().expect("requested");
        let c = eval.compliance;
        if !c.is_finite() || c <= 0.0 {
            return Err(Error::Solver(format!("non-physical compliance {c} at iteration {iteration}")));
        }
        let scale = *c0.get_or_insert(c);

        if iteration == 0 && settings.sign_check {
            sign_check(analysis, &design, &g, c)?;
        }

        let prev = history.last().map(|r| r.compliance);
        if c < best {
            best = c;
            best_x = x.clone();
        }
        let max_violation = detj_violation(analysis, &x, &settings.detj)?;
        let mut record = IterationRecord {
            iteration,
            zones: analysis.zoning.k(),
            compliance: c,
            best,
            max_violation,
            gradient_norm: g.iter().map(|v| v * v).sum::<f64>().sqrt(),
            restoration,
            backtracks,
            design: x.clone(),
            timing: TimingRecord {
                iteration,
                micro_fea: eval.micro_seconds,
                macro_fea: eval.macro_seconds,
                update: eval.sensitivity_seconds + pending_update,
                total: 0.0,
            },
        };

        if let Some(p) = prev {
            if ((c - p) / p).abs() < settings.tolerance {
                stalled += 1;
            } else {
                stalled = 0;
            }
        }
        let converged = stalled >= settings.patience;
        if converged && refinements_left == 0 {
            record.timing.total = t_iter.elapsed().as_secs_f64() + pending_update;
            observer(&record);
            history.push(record);
            status = RunStatus::Converged;
            break;
        }
        if converged {
            refinements_left -= 1;
            analysis.refine_zoning()?;
            log::info!("refined zoning to {} zones at iteration {iteration}", analysis.zoning.k());
            stalled = 0;
            state = None;
            // The next iterate is the same design on the finer zoning.
            record.timing.total = t_iter.elapsed().as_secs_f64() + pending_update;
            observer(&record);
            history.push(record);
            pending_update = 0.0;
            restoration = false;
            backtracks = 0;
            // Refinement may push representative points out of bounds.
            if detj_violation(analysis, &x, &settings.detj)? > 0.0 {
                return Err(Error::Infeasible("refined zoning violates the det J bounds".into()));
            }
            continue;
        }
        if iteration + 1 == settings.max_iterations {
            record.timing.total = t_iter.elapsed().as_secs_f64() + pending_update;
            observer(&record);
            history.push(record);
            break;
        }

        // MMA update on the normalized problem.
        let t_up = Instant::now();
        let (fval, dfdx) = mma_constraints(analysis, &x, &settings.detj)?;
        let st = match state.as_mut() {
            Some(s) => s,
            None => state.insert(MmaState::new(&x, xmin.clone(), xmax.clone(), fval.len(), settings.mma.clone())?),
        };
        let df0: Vec<f64> = g.iter().map(|v| v / scale).collect();
        let step = st.update(&x, &df0, &fval, &dfdx)?;
        restoration = step.restoration;
        let mut xn = step.x;
        backtracks = 0;
        while detj_violation(analysis, &xn, &settings.detj)? > 0.0 {
            if backtracks == settings.max_backtracks {
                return Err(Error::Infeasible(format!(
                    "no feasible step toward the MMA proposal after {backtracks} halvings"
                )));
            }
            backtracks += 1;
            for (a, b) in xn.iter_mut().zip(&x) {
                *a = 0.5 * (*a + b);
            }
        }
        pending_update = t_up.elapsed().as_secs_f64();
        record.timing.total = t_iter.elapsed().as_secs_f64();
        // Update time belongs to the iteration that produced the step.
        record.timing.update += pending_update;
        pending_update = 0.0;
        observer(&record);
        history.push(record);
        x = xn;
    }

    Ok(RunHistory {
        restrictions: layout.restrictions(),
        dim: layout.dim(),
        iterations: history,
        status,
        final_design: DesignVector { values: x, layout: layout.clone() },
        best_design: DesignVector { values: best_x, layout },
        zones: analysis.zoning.counts().to_vec(),
    })
}

/// Central difference of compliance along the normalized gradient; the
/// directional derivative must be positive.
fn sign_check(analysis: &Analysis, design: &DesignVector, g: &[f64], c: f64) -> Result<()> {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm <= 1e-14 * c.abs().max(1.0) {
        return Ok(());
    }
    let t = 1e-4;
    let shifted = |s: f64| DesignVector {
        values: design.values.iter().zip(g).map(|(x, gi)| x + s * t * gi / norm).collect(),
        layout: design.layout.clone(),
    };
    let fd = (analysis.compliance(&shifted(1.0))? - analysis.compliance(&shifted(-1.0))?) / (2.0 * t);
    let corr = gradient_correlation(&[fd], &[norm]);
    log::debug!("gradient sign check: directional FD {fd:e}, analytic {norm:e}");
    if corr <= 0.0 {
        return Err(Error::Solver(format!(
            "gradient sign check failed: directional derivative {fd:e} against analytic {norm:e}"
        )));
    }
    Ok(())
}

/// Re-analyzes every logged design; returns the largest relative deviation
/// from the logged compliance. Zone counts must match the logged ones.
pub fn replay(analysis: &mut Analysis, history: &RunHistory) -> Result<f64> {
    let mut worst: f64 = 0.0;
    let layout = Layout::new(history.dim, history.restrictions);
    for r in &history.iterations {
        if r.zones != analysis.zoning.k() {
            let counts = zones_for(analysis, r.zones)?;
            analysis.set_zones(&counts)?;
        }
        let c = analysis.compliance(&DesignVector { values: r.design.clone(), layout: layout.clone() })?;
        worst = worst.max(((c - r.compliance) / r.compliance).abs());
    }
    Ok(worst)
}

/// Zone counts with `k` zones reachable from the current zoning by halving
/// or doubling every axis.
fn zones_for(analysis: &Analysis, k: usize) -> Result<Vec<usize>> {
    let cur = analysis.zoning.counts().to_vec();
    let n = cur.len() as u32;
    let kc = analysis.zoning.k();
    for p in 0..8u32 {
        let f = 1usize << p;
        if kc * f.pow(n) == k {
            return Ok(cur.iter().map(|c| c * f).collect());
        }
        if kc == k * f.pow(n) && cur.iter().all(|c| c % f == 0) {
            return Ok(cur.iter().map(|c| c / f).collect());
        }
    }
    Err(Error::Partition(format!("cannot reach {k} zones from {cur:?}")))
}

/// Fixed-iteration loop for timing: each iteration clears the cell cache,
/// then runs analysis, gradient and one MMA update from `design`.
pub fn bench_iterations(analysis: &Analysis, design: &DesignVector, iterations: usize) -> Result<Vec<TimingRecord>> {
    let (xmin, xmax) = design_bounds(&analysis.layout, &Bounds::default());
    let mut out = Vec::with_capacity(iterations);
    for iteration in 0..iterations {
        analysis.scheduler.clear_cache();
        let t = Instant::now();
        let eval = analysis.evaluate(design, true)?;
        let tu = Instant::now();
        let g = eval.gradient.expect("requested");
        let (fval, dfdx) = mma_constraints(analysis, &design.values, &DetJBounds::default())?;
        let mut st = MmaState::new(&design.values, xmin.clone(), xmax.clone(), fval.len(), MmaParams::default())?;
        let df0: Vec<f64> = g.iter().map(|v| v / eval.compliance).collect();
        st.update(&design.values, &df0, &fval, &dfdx)?;
        let update = tu.elapsed().as_secs_f64() + eval.sensitivity_seconds;
        out.push(TimingRecord {
            iteration,
            micro_fea: eval.micro_seconds,
            macro_fea: eval.macro_seconds,
            update,
            total: t.elapsed().as_secs_f64(),
        });
    }
    Ok(out)
}
