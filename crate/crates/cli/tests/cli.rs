use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use gmc_core::config::RunConfig;
use gmc_core::mapping::{identity_mat, DesignVector};
use gmc_core::microsolver::{CellMesh, VoidNodes, DEFAULT_ERSATZ};
use gmc_core::tensor::{isotropic_tensor, ElasticTensor, Material, MaterialModel};
use gmc_core::unitcell::{builtin_cell, BuiltinCell, CellRaster};
use serde_json::{json, Value};

fn gmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gmc")).args(args).env_remove("GMC_POOL").output().expect("run gmc")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write(dir: &Path, name: &str, v: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(v).unwrap()).unwrap();
    p
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn solid_cell_homogenizes_to_the_base_material() {
    let dir = tempfile::tempdir().unwrap();
    let cell = dir.path().join("solid.pgm");
    CellRaster::filled(2, 16, 1.0).unwrap().write_pgm(&cell).unwrap();
    let cfg = write(dir.path(), "c.json", &json!({"cell": {"builtin": null, "file": cell}}));
    let out = dir.path().join("out");
    let o = gmc(&["homogenize", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let t: ElasticTensor = serde_json::from_value(read_json(&out.join("tensor.json"))).unwrap();
    let base = isotropic_tensor(&Material::new(1.0, 0.3, MaterialModel::PlaneStress2d).unwrap()).unwrap();
    assert!(t.relative_difference(&base) < 1e-12);
    assert!(String::from_utf8_lossy(&o.stdout).contains("1.0989"));
}

#[test]
fn homogenize_matches_the_library_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let jac = write(dir.path(), "j.json", &json!([[1.1, 0.2], [-0.1, 0.9]]));
    let out = dir.path().join("out");
    let o = gmc(&["homogenize", "--jacobian", s(&jac), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let t: ElasticTensor = serde_json::from_value(read_json(&out.join("tensor.json"))).unwrap();

    let raster = std::sync::Arc::new(builtin_cell(BuiltinCell::X2d, 0.3, 64).unwrap());
    let mesh = CellMesh::new(raster, DEFAULT_ERSATZ, VoidNodes::Auto).unwrap();
    let mut j = identity_mat(2);
    j[0] = [1.1, 0.2, 0.0];
    j[1] = [-0.1, 0.9, 0.0];
    let base = isotropic_tensor(&Material::new(1.0, 0.3, MaterialModel::PlaneStress2d).unwrap()).unwrap();
    assert_eq!(t, mesh.solve(&base, &j).unwrap().tensor);
    // Voigt bound and positive semidefiniteness.
    for p in 0..3 {
        assert!(t.get(p, p) <= 0.3 * 1.2 * base.get(p, p));
    }
    assert!(t.is_positive_semidefinite(1e-12));
}

fn short_run(dir: &Path, name: &str, extra: &[&str]) -> (Output, PathBuf) {
    let cfg = write(
        dir,
        "opt.json",
        &json!({
            "cell": {"builtin": "smiley_2d", "resolution": 32},
            "optimizer": {"max_iterations": 3},
            "snapshot_stride": 1
        }),
    );
    let out = dir.join(name);
    let mut args = vec!["optimize", "--config", s(&cfg), "--mesh", "40x20", "--zones", "4x2", "--out", s(&out)];
    args.extend_from_slice(extra);
    let o = gmc(&args);
    (o, out)
}

/// History rows without the four timing columns.
fn history_without_timing(out: &Path) -> Vec<String> {
    std::fs::read_to_string(out.join("history.csv"))
        .unwrap()
        .lines()
        .map(|l| l.split(',').take(8).collect::<Vec<_>>().join(","))
        .collect()
}

#[test]
fn optimize_writes_artifacts_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = short_run(dir.path(), "a", &[]);
    assert_eq!(code(&o), 2, "iteration limit: {}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "manifest.json",
        "history.csv",
        "history.json",
        "timing.csv",
        "design_best.json",
        "design_final.json",
        "design_0000.json",
        "best.vtk",
        "best_energy.pgm",
        "best_principal_stress.csv",
        "best_tensors.json",
    ] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let rows = history_without_timing(&out);
    assert_eq!(rows.len(), 4);
    let c: Vec<f64> = rows[1..].iter().map(|r| r.split(',').nth(2).unwrap().parse().unwrap()).collect();
    assert!(c[1..].iter().any(|&x| x < c[0]));

    // The manifest replays: it parses back to a config that runs the same.
    let manifest = read_json(&out.join("manifest.json"));
    let cfg: RunConfig = serde_json::from_value(manifest["config"].clone()).unwrap();
    assert_eq!(cfg.problem.mesh, vec![40, 20]);
    assert_eq!(cfg.optimizer.max_iterations, 3);
    let replay = write(dir.path(), "replay.json", &manifest["config"]);
    let out2 = dir.path().join("b");
    let o2 = gmc(&["optimize", "--config", s(&replay), "--out", s(&out2)]);
    assert_eq!(code(&o2), 2);
    assert_eq!(history_without_timing(&out2), rows);
}

#[test]
fn b_zero_restriction_shortens_the_design() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = short_run(dir.path(), "a", &["--restrict", "b_zero"]);
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let d: DesignVector = serde_json::from_value(read_json(&out.join("design_best.json"))).unwrap();
    assert_eq!(d.values.len(), 12);
}

#[test]
fn infeasible_start_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let (o, out) = short_run(dir.path(), "a", &[]);
    assert_eq!(code(&o), 2);
    let mut d = read_json(&out.join("design_best.json"));
    d["values"][0] = json!(50.0);
    let bad = write(dir.path(), "bad.json", &d);
    let o =
        gmc(&["optimize", "--design", s(&bad), "--mesh", "40x20", "--zones", "4x2", "--out", s(&dir.path().join("c"))]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn zone_counts_must_divide_the_mesh() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = gmc(&["render", "--zones", "15x8", "--mesh", "400x200", "--out", s(&out)]);
    assert_eq!(code(&o), 5);
    assert!(String::from_utf8_lossy(&o.stderr).contains("divide"));
    let o = gmc(&["render", "--zones", "16x8", "--mesh", "400x200", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("design.vtk").exists());
    assert!(out.join("manifest.json").exists());
}

#[test]
fn config_errors_exit_with_5() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &json!({"zonez": [2, 2]}));
    let o = gmc(&["render", "--config", s(&cfg)]);
    assert_eq!(code(&o), 5);
    assert!(String::from_utf8_lossy(&o.stderr).contains("zonez"));
    let broken = dir.path().join("broken.json");
    std::fs::write(&broken, "{\n  \"zones\": [2, 2],\n  oops\n}").unwrap();
    let o = gmc(&["render", "--config", s(&broken)]);
    assert_eq!(code(&o), 5);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
    assert_eq!(code(&gmc(&["render", "--restrict", "nope"])), 5);
    assert_eq!(code(&gmc(&["frobnicate"])), 5);
    assert_eq!(code(&gmc(&["--help"])), 0);
}

#[test]
fn validate_solid_cell_has_no_gap() {
    let dir = tempfile::tempdir().unwrap();
    let cell = dir.path().join("solid.pgm");
    CellRaster::filled(2, 16, 1.0).unwrap().write_pgm(&cell).unwrap();
    let cfg = write(
        dir.path(),
        "c.json",
        &json!({
            "cell": {"builtin": null, "file": cell},
            "problem": {"mesh": [64, 32]},
            "zones": [4, 2],
            "finescale": {"mesh": [64, 32]}
        }),
    );
    let out = dir.path().join("out");
    let o = gmc(&["validate", "--config", s(&cfg), "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.join("validate.csv")).unwrap();
    let row: Vec<&str> = text.lines().nth(1).unwrap().split(',').collect();
    let gap: f64 = row[2].parse().unwrap();
    assert!(gap < 1e-8, "gap {gap}");
    assert!(out.join("fine_structure.pgm").exists());
}

#[test]
fn bench_writes_zone_and_pool_tables() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &json!({"cell": {"builtin": "smiley_2d", "resolution": 32}}));
    let out = dir.path().join("out");
    let o = gmc(&[
        "bench",
        "--config",
        s(&cfg),
        "--mesh",
        "32x16",
        "--iterations",
        "1",
        "--pools",
        "1,2",
        "--out",
        s(&out),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let zones = std::fs::read_to_string(out.join("bench_zones.csv")).unwrap();
    let ks: Vec<usize> = zones.lines().skip(1).map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(ks, vec![2, 8, 32, 128]);
    let pools = std::fs::read_to_string(out.join("bench_pool.csv")).unwrap();
    let first: Vec<&str> = pools.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(first[0], "1");
    assert_eq!(first[2], "1.0000");
}
