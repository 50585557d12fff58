//! One zoned batch of cell solves (K=32, X cell at N=32): the sequential
//! path against the worker pool. Build without the `parallel` feature to
//! time the fallback for every pool size.

use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use gmc_core::mapping::Mat;
use gmc_core::microsolver::{CellMesh, VoidNodes, DEFAULT_ERSATZ};
use gmc_core::scheduler::{Scheduler, SchedulerOptions, TaskBatch};
use gmc_core::tensor::{isotropic_tensor, Material, MaterialModel};
use gmc_core::unitcell::{builtin_cell, BuiltinCell};

fn batch(k: usize) -> TaskBatch {
    // Distinct Jacobians so the cache never short-circuits a solve.
    let tasks = (0..k)
        .map(|i| {
            let s = i as f64 / k as f64;
            let j: Mat = [[1.0 + 0.3 * s, 0.1 * s, 0.0], [-0.05 * s, 1.0 - 0.2 * s, 0.0], [0.0; 3]];
            (i, j)
        })
        .collect();
    TaskBatch { tasks, with_sensitivity: true }
}

fn zoned_batch(c: &mut Criterion) {
    let raster = Arc::new(builtin_cell(BuiltinCell::Smiley2d, 0.3, 32).expect("cell"));
    let mesh = Arc::new(CellMesh::new(raster, DEFAULT_ERSATZ, VoidNodes::Auto).expect("mesh"));
    let base =
        isotropic_tensor(&Material::new(1.0, 0.3, MaterialModel::PlaneStress2d).expect("material")).expect("tensor");
    let work = batch(32);
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    let mut pools = vec![1, 8];
    if !pools.contains(&cores) {
        pools.push(cores);
    }
    let mut group = c.benchmark_group("zoned_batch_k32");
    group.sample_size(10);
    for pool in pools {
        let s = Scheduler::new(mesh.clone(), base.clone(), SchedulerOptions { pool, ..SchedulerOptions::default() })
            .expect("scheduler");
        group.bench_with_input(BenchmarkId::new("pool", pool), &work, |b, w| {
            b.iter(|| {
                s.clear_cache();
                s.evaluate_all(w).expect("batch")
            })
        });
    }
    group.finish();
}

criterion_group!(benches, zoned_batch);
criterion_main!(benches);
