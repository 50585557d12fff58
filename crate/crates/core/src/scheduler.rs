//! Dispatch of independent cell problems to a worker pool, with a result
//! cache and per-stage timing records.
//!
//! A task is one zone's complete cell problem: factorization, all corrector
//! solves, the homogenized tensor and (optionally) its Jacobian derivatives.
//! Tasks share nothing mutable except the cache. Results are returned in task
//! order, so outputs do not depend on the pool size.

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mapping::Mat;
use crate::microsolver::{CellMesh, JacobianSensitivity};
use crate::tensor::ElasticTensor;

/// Cache keys quantize Jacobian entries on this grid.
pub const KEY_QUANTUM: f64 = 1e-12;

/// Everything later stages need from one cell solve. The corrector fields
/// are dropped unless `keep_xi` is set.
#[derive(Clone, Debug)]
pub struct CellRecord {
    pub jacobian: Mat,
    pub tensor: ElasticTensor,
    pub sensitivity: Option<JacobianSensitivity>,
    pub xi: Option<Vec<Vec<f64>>>,
    pub residual: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerOptions {
    /// Worker count (>= 1).
    pub pool: usize,
    /// Retain corrector fields in records (debugging / export).
    #[serde(default)]
    pub keep_xi: bool,
    /// Re-solve one random cache hit per run and compare.
    #[serde(default = "yes")]
    pub spot_check: bool,
    #[serde(default)]
    pub seed: u64,
}

fn yes() -> bool {
    true
}

impl Default for SchedulerOptions {
    fn default() -> Self {
        SchedulerOptions { pool: 1, keep_xi: false, spot_check: true, seed: 0 }
    }
}

/// One batch: a Jacobian per zone.
#[derive(Clone, Debug)]
pub struct TaskBatch {
    pub tasks: Vec<(usize, Mat)>,
    pub with_sensitivity: bool,
}

#[derive(Clone, Debug)]
pub struct BatchOutput {
    /// In task order.
    pub records: Vec<Arc<CellRecord>>,
    pub solves: usize,
    pub cache_hits: usize,
    pub seconds: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
struct CacheKey {
    j: [i64; 9],
    raster: u64,
    ersatz: u64,
    sensitivity: bool,
}

pub struct Scheduler {
    mesh: Arc<CellMesh>,
    base: ElasticTensor,
    opts: SchedulerOptions,
    raster_hash: u64,
    cache: Mutex<HashMap<CacheKey, Arc<CellRecord>>>,
    spot_checked: AtomicBool,
    total_solves: AtomicUsize,
    #[cfg(feature = "parallel")]
    pool: Option<rayon::ThreadPool>,
}

impl std::fmt::Debug for Scheduler {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Scheduler").field("pool", &self.opts.pool).finish()
    }
}

impl Scheduler {
    pub fn new(mesh: Arc<CellMesh>, base: ElasticTensor, opts: SchedulerOptions) -> Result<Self> {
        if opts.pool == 0 {
            return Err(Error::param("pool size must be at least 1"));
        }
        if base.dim() != mesh.dim() {
            return Err(Error::dim(mesh.dim(), base.dim()));
        }
        #[cfg(feature = "parallel")]
        let pool = if opts.pool > 1 {
            Some(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(opts.pool)
                    .thread_name(|i| format!("gmc-cell-{i}"))
                    .build()
                    .map_err(|e| Error::param(format!("cannot start worker pool: {e}")))?,
            )
        } else {
            None
        };
        #[cfg(not(feature = "parallel"))]
        if opts.pool > 1 {
            log::warn!("built without the `parallel` feature; running {} workers sequentially", opts.pool);
        }
        Ok(Scheduler {
            raster_hash: mesh.raster().content_hash(),
            mesh,
            base,
            opts,
            cache: Mutex::new(HashMap::new()),
            spot_checked: AtomicBool::new(false),
            total_solves: AtomicUsize::new(0),
            #[cfg(feature = "parallel")]
            pool,
        })
    }

    pub fn mesh(&self) -> &Arc<CellMesh> {
        &self.mesh
    }

    pub fn base(&self) -> &ElasticTensor {
        &self.base
    }

    pub fn options(&self) -> &SchedulerOptions {
        &self.opts
    }

    /// Cell solves performed over the scheduler's lifetime.
    pub fn total_solves(&self) -> usize {
        self.total_solves.load(Ordering::Relaxed)
    }

    pub fn clear_cache(&self) {
        self.cache.lock().unwrap().clear();
    }

    pub fn cache_len(&self) -> usize {
        self.cache.lock().unwrap().len()
    }

    fn key(&self, j: &Mat, sensitivity: bool) -> CacheKey {
        let mut q = [0i64; 9];
        for a in 0..3 {
            for b in 0..3 {
                q[a * 3 + b] = (j[a][b] / KEY_QUANTUM).round() as i64;
            }
        }
        CacheKey { j: q, raster: self.raster_hash, ersatz: self.mesh.ersatz().to_bits(), sensitivity }
    }

    /// Runs one full cell task.
    pub fn solve_one(&self, j: &Mat, with_sensitivity: bool) -> Result<CellRecord> {
        let result = self.mesh.solve(&self.base, j)?;
        let sensitivity =
            if with_sensitivity { Some(self.mesh.jacobian_sensitivity(&result, &self.base)?) } else { None };
        self.total_solves.fetch_add(1, Ordering::Relaxed);
        Ok(CellRecord {
            jacobian: *j,
            tensor: result.tensor,
            sensitivity,
            xi: self.opts.keep_xi.then_some(result.xi),
            residual: result.residual,
        })
    }

    /// Computes every task's record, solving each distinct Jacobian once.
    pub fn evaluate_all(&self, batch: &TaskBatch) -> Result<BatchOutput> {
        let start = Instant::now();
        let sens = batch.with_sensitivity;
        let keys: Vec<CacheKey> = batch.tasks.iter().map(|(_, j)| self.key(j, sens)).collect();

        // Distinct keys not already cached, in first-occurrence order.
        let mut todo: Vec<(usize, Mat, CacheKey)> = Vec::new();
        let mut hits = 0;
        {
            let cache = self.cache.lock().unwrap();
            let mut seen = std::collections::HashSet::new();
            for ((id, j), key) in batch.tasks.iter().zip(&keys) {
                if cache.contains_key(key) || !seen.insert(*key) {
                    hits += 1;
                } else {
                    todo.push((*id, *j, *key));
                }
            }
        }

        let results = self.run_tasks(&todo, sens);
        let solves = todo.len();
        {
            let mut cache = self.cache.lock().unwrap();
            for ((id, _, key), r) in todo.iter().zip(results) {
                let rec = r.map_err(|e| Error::Cell { subdomain: *id, source: Box::new(e) })?;
                cache.insert(*key, Arc::new(rec));
            }
        }
        if hits > 0 && self.opts.spot_check && !self.spot_checked.swap(true, Ordering::Relaxed) {
            self.spot_check(batch, &keys, &todo)?;
        }
        let cache = self.cache.lock().unwrap();
        let records = keys.iter().map(|k| cache[k].clone()).collect();
        Ok(BatchOutput { records, solves, cache_hits: hits, seconds: start.elapsed().as_secs_f64() })
    }

    fn run_tasks(&self, todo: &[(usize, Mat, CacheKey)], sens: bool) -> Vec<Result<CellRecord>> {
        #[cfg(feature = "parallel")]
        if let Some(pool) = &self.pool {
            use rayon::prelude::*;
            return pool.install(|| todo.par_iter().map(|(_, j, _)| self.solve_one(j, sens)).collect());
        }
        todo.iter().map(|(_, j, _)| self.solve_one(j, sens)).collect()
    }

    /// Re-solves one randomly chosen cache hit and demands agreement to 1e-12.
    fn spot_check(&self, batch: &TaskBatch, keys: &[CacheKey], fresh: &[(usize, Mat, CacheKey)]) -> Result<()> {
        let hit_positions: Vec<usize> = (0..keys.len())
            .filter(|&p| {
                // A task whose key was solved in this batch by another task
                // still counts: only the first occurrence was solved.
                let first = fresh.iter().find(|t| t.2 == keys[p]).map(|t| t.0);
                first != Some(batch.tasks[p].0)
            })
            .collect();
        if hit_positions.is_empty() {
            return Ok(());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.opts.seed);
        let p = hit_positions[rng.gen_range(0..hit_positions.len())];
        let cached = self.cache.lock().unwrap()[&keys[p]].clone();
        let fresh = self.solve_one(&batch.tasks[p].1, false)?;
        let diff = fresh.tensor.relative_difference(&cached.tensor);
        if diff > 1e-12 {
            return Err(Error::Solver(format!(
                "cache spot check failed for zone {}: relative difference {diff:e}",
                batch.tasks[p].0
            )));
        }
        log::debug!("cache spot check on zone {} passed ({diff:e})", batch.tasks[p].0);
        Ok(())
    }
}

/// Seconds spent per stage in one optimization iteration.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TimingRecord {
    pub iteration: usize,
    pub micro_fea: f64,
    pub macro_fea: f64,
    pub update: f64,
    /// Wall time of the whole iteration (stages plus untracked overhead).
    pub total: f64,
}

/// Averaged stage breakdown over a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingSummary {
    pub iterations: usize,
    pub mean_micro_fea: f64,
    pub mean_macro_fea: f64,
    pub mean_update: f64,
    pub mean_total: f64,
    pub micro_fraction: f64,
    pub macro_fraction: f64,
    pub update_fraction: f64,
}

pub fn timing_report(history: &[TimingRecord]) -> TimingSummary {
    let k = history.len().max(1) as f64;
    let mean = |f: fn(&TimingRecord) -> f64| history.iter().map(f).sum::<f64>() / k;
    let (mi, ma, up) = (mean(|t| t.micro_fea), mean(|t| t.macro_fea), mean(|t| t.update));
    let total = mean(|t| t.total).max(mi + ma + up);
    let frac = |x: f64| if total > 0.0 { x / total } else { 0.0 };
    TimingSummary {
        iterations: history.len(),
        mean_micro_fea: mi,
        mean_macro_fea: ma,
        mean_update: up,
        mean_total: total,
        micro_fraction: frac(mi),
        macro_fraction: frac(ma),
        update_fraction: frac(up),
    }
}

pub fn write_timing_csv(path: &Path, history: &[TimingRecord]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iteration,micro_s,macro_s,update_s,total_s")?;
    for t in history {
        writeln!(f, "{},{:.6},{:.6},{:.6},{:.6}", t.iteration, t.micro_fea, t.macro_fea, t.update, t.total)?;
    }
    f.flush()?;
    Ok(())
}

/// Draws `count` distinct indices from `0..n` reproducibly.
pub fn sample_indices(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..count.min(n) {
        let j = rng.gen_range(i..n);
        idx.swap(i, j);
    }
    idx.truncate(count.min(n));
    idx
}
