//! `gmc`: command-line driver for zoned homogenization and map optimization.
//!
//! Exit codes: 0 converged (or success), 2 iteration limit reached,
//! 3 infeasible design or degenerate map, 4 solver failure, 5 config error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gmc_core::config::{parse_counts, RunConfig};
use gmc_core::driver::{bench_iterations, optimize, Analysis, Evaluation, RunStatus};
use gmc_core::export::{
    log_energy, write_json, write_log_energy_pgm, write_principal_stress_csv, write_tensors_json, write_vtk, CellField,
};
use gmc_core::finescale::{finescale_compliance, resolve_gmc};
use gmc_core::mapping::{identity_mat, unpack, Coefficient, DesignVector, Mat};
use gmc_core::microsolver::CellMesh;
use gmc_core::scheduler::{timing_report, write_timing_csv};
use gmc_core::Error;
use rand::{Rng, SeedableRng};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "gmc", version, about = "Graded microstructure optimization by zoned homogenization")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON run configuration (merged over its preset).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Named preset, overriding the one in the config file.
    #[arg(long, global = true)]
    preset: Option<String>,
    /// Zone counts, e.g. 16x8 or 4x1x1.
    #[arg(long, global = true)]
    zones: Option<String>,
    /// Macro mesh element counts, e.g. 400x200.
    #[arg(long, global = true)]
    mesh: Option<String>,
    /// Cell-solve worker count (default from GMC_POOL, else 1).
    #[arg(long, global = true)]
    pool: Option<usize>,
    #[arg(long, global = true, value_enum)]
    restrict: Option<Restrict>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Restrict {
    Full,
    #[value(name = "b_zero")]
    BZero,
}

#[derive(Subcommand)]
enum Command {
    /// Homogenized tensor of the configured cell for one Jacobian.
    Homogenize {
        /// JSON square matrix; the identity when omitted.
        #[arg(long)]
        jacobian: Option<PathBuf>,
    },
    /// Optimize the map coefficients.
    Optimize {
        /// Initial design JSON; the identity map when omitted.
        #[arg(long)]
        design: Option<PathBuf>,
    },
    /// Compare homogenized and fine-scale compliance of a design.
    Validate {
        #[arg(long)]
        design: Option<PathBuf>,
    },
    /// Analyze a design and write its fields.
    Render {
        #[arg(long)]
        design: Option<PathBuf>,
    },
    /// Fixed-iteration timing over zone counts and pool sizes.
    Bench {
        #[arg(long, default_value_t = 3)]
        iterations: usize,
        /// Comma-separated pool sizes.
        #[arg(long, default_value = "1,2,4,8", value_delimiter = ',')]
        pools: Vec<usize>,
        #[arg(long)]
        design: Option<PathBuf>,
    },
}

/// Outcome of a successful command.
enum Done {
    Ok,
    MaxIterations,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Infeasible(_) | Error::DegenerateMap { .. } => 3,
        Error::Solver(_) | Error::Cell { .. } | Error::MissingRecord(_) | Error::Io(_) => 4,
        Error::Config(_)
        | Error::Parameter(_)
        | Error::Dimension { .. }
        | Error::Resolution(_)
        | Error::Partition(_)
        | Error::Json(_) => 5,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // Usage errors are config errors; 2 is reserved for the iteration limit.
            return ExitCode::from(if e.use_stderr() { 5 } else { 0 });
        }
    };
    match run(cli) {
        Ok(Done::Ok) => ExitCode::SUCCESS,
        Ok(Done::MaxIterations) => ExitCode::from(2),
        Err(e) => {
            eprintln!("gmc: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn resolve_config(c: &Common, design: Option<&Path>) -> Result<RunConfig, Error> {
    let mut v = match &c.config {
        Some(p) => {
            let text =
                std::fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            serde_json::from_str::<Value>(&text)
                .map_err(|e| Error::Config(format!("{}: line {} column {}: {e}", p.display(), e.line(), e.column())))?
        }
        None => json!({}),
    };
    if !v.is_object() {
        return Err(Error::Config("configuration must be a JSON object".into()));
    }
    let mut set = |path: &[&str], x: Value| {
        let mut node = &mut v;
        for key in &path[..path.len() - 1] {
            node = node
                .as_object_mut()
                .expect("objects all the way down")
                .entry(key.to_string())
                .or_insert_with(|| json!({}));
        }
        node[path[path.len() - 1]] = x;
    };
    if let Some(p) = &c.preset {
        set(&["preset"], json!(p));
    }
    if let Some(z) = &c.zones {
        set(&["zones"], json!(parse_counts(z)?));
    }
    if let Some(m) = &c.mesh {
        set(&["problem", "mesh"], json!(parse_counts(m)?));
    }
    if let Some(p) = c.pool {
        set(&["pool"], json!(p));
    }
    if let Some(r) = c.restrict {
        set(
            &["mapping", "restrictions"],
            json!(match r {
                Restrict::Full => "full",
                Restrict::BZero => "b_zero",
            }),
        );
    }
    if let Some(o) = &c.out {
        set(&["out"], json!(o));
    }
    if let Some(s) = c.seed {
        set(&["seed"], json!(s));
    }
    if let Some(d) = design {
        set(&["mapping", "initial"], json!(d));
    }
    RunConfig::from_value(&v)
}

/// Creates the output directory and writes the manifest.
fn prepare(cfg: &RunConfig, command: &str) -> Result<PathBuf, Error> {
    let out = cfg.out.clone();
    std::fs::create_dir_all(&out)?;
    let manifest = json!({
        "command": command,
        "version": env!("CARGO_PKG_VERSION"),
        "parallel": cfg!(feature = "parallel"),
        "config": cfg.to_value(),
    });
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(out)
}

fn run(cli: Cli) -> Result<Done, Error> {
    let c = &cli.common;
    match &cli.command {
        Command::Homogenize { jacobian } => {
            let cfg = resolve_config(c, None)?;
            homogenize(&cfg, jacobian.as_deref())
        }
        Command::Optimize { design } => run_optimize(&resolve_config(c, design.as_deref())?),
        Command::Validate { design } => validate(&resolve_config(c, design.as_deref())?),
        Command::Render { design } => render(&resolve_config(c, design.as_deref())?),
        Command::Bench { iterations, pools, design } => {
            bench(&resolve_config(c, design.as_deref())?, *iterations, pools)
        }
    }
}

fn read_jacobian(path: &Path, dim: usize) -> Result<Mat, Error> {
    let text =
        std::fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let rows: Vec<Vec<f64>> =
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("invalid Jacobian {}: {e}", path.display())))?;
    if rows.len() != dim || rows.iter().any(|r| r.len() != dim) {
        return Err(Error::Config(format!("Jacobian must be a {dim}x{dim} matrix")));
    }
    let mut j = [[0.0; 3]; 3];
    for (a, row) in rows.iter().enumerate() {
        j[a][..dim].copy_from_slice(row);
    }
    Ok(j)
}

fn homogenize(cfg: &RunConfig, jacobian: Option<&Path>) -> Result<Done, Error> {
    let out = prepare(cfg, "homogenize")?;
    let dim = cfg.dim();
    let j = match jacobian {
        Some(p) => read_jacobian(p, dim)?,
        None => identity_mat(dim),
    };
    let mesh = CellMesh::new(cfg.cell_raster()?, cfg.ersatz, cfg.void_nodes)?;
    let t = Instant::now();
    let result = mesh.solve(&cfg.base_tensor()?, &j)?;
    let secs = t.elapsed().as_secs_f64();
    write_json(&out.join("tensor.json"), &result.tensor)?;
    let m = result.tensor.to_rows();
    for row in &m {
        let cells: Vec<String> = row.iter().map(|v| format!("{v:>14.8e}")).collect();
        println!("{}", cells.join(" "));
    }
    println!("solved in {secs:.3} s; written to {}", out.join("tensor.json").display());
    Ok(Done::Ok)
}

/// Zone fields and exports for one analyzed design.
fn write_fields(analysis: &Analysis, eval: &Evaluation, out: &Path, tag: &str) -> Result<(), Error> {
    let grid = analysis.model().grid();
    let le = log_energy(&eval.solution);
    let zone: Vec<f64> = analysis.zoning().element_zone().iter().map(|&z| z as f64).collect();
    write_vtk(
        &out.join(format!("{tag}.vtk")),
        grid,
        Some(&eval.solution.u),
        &[CellField { name: "log_energy", values: &le }, CellField { name: "zone", values: &zone }],
    )?;
    write_principal_stress_csv(&out.join(format!("{tag}_principal_stress.csv")), grid, &eval.solution)?;
    write_tensors_json(&out.join(format!("{tag}_tensors.json")), &eval.tensors())?;
    if grid.dim == 2 {
        write_log_energy_pgm(&out.join(format!("{tag}_energy.pgm")), grid, &eval.solution)?;
    }
    Ok(())
}

fn run_optimize(cfg: &RunConfig) -> Result<Done, Error> {
    let out = prepare(cfg, "optimize")?;
    let mut analysis = cfg.analysis()?;
    let start = cfg.initial_design()?;
    let stride = cfg.snapshot_stride;
    let mut snapshot_err = None;
    let history = optimize(&mut analysis, &start, &cfg.optimizer, |r| {
        log::info!(
            "iteration {:>4}  K {:>4}  compliance {:.6e}  best {:.6e}",
            r.iteration,
            r.zones,
            r.compliance,
            r.best
        );
        if stride > 0 && r.iteration % stride == 0 && snapshot_err.is_none() {
            let path = out.join(format!("design_{:04}.json", r.iteration));
            if let Err(e) = write_json(&path, &r.design) {
                snapshot_err = Some(e);
            }
        }
    })?;
    if let Some(e) = snapshot_err {
        return Err(e);
    }
    history.write_csv(&out.join("history.csv"))?;
    write_timing_csv(&out.join("timing.csv"), &history.timings())?;
    write_json(&out.join("history.json"), &history)?;
    write_json(&out.join("design_best.json"), &history.best_design)?;
    write_json(&out.join("design_final.json"), &history.final_design)?;
    let best = analysis.evaluate(&history.best_design, false)?;
    write_fields(&analysis, &best, &out, "best")?;
    println!(
        "{} iterations ({:?}); compliance {:.6e} -> {:.6e}; outputs in {}",
        history.iterations.len(),
        history.status,
        history.initial_compliance(),
        history.best_compliance(),
        out.display()
    );
    Ok(match history.status {
        RunStatus::Converged => Done::Ok,
        RunStatus::MaxIterations => Done::MaxIterations,
    })
}

fn validate(cfg: &RunConfig) -> Result<Done, Error> {
    let out = prepare(cfg, "validate")?;
    let analysis = cfg.analysis()?;
    let design = cfg.initial_design()?;
    let homogenized = analysis.compliance(&design)?;
    let map = unpack(&design)?;
    let raster = cfg.cell_raster()?;
    let mut fine = resolve_gmc(&map, &raster, &cfg.finescale, &cfg.problem)?;
    let (rep, _) = finescale_compliance(&mut fine, &cfg.problem, &cfg.finescale, &cfg.base_tensor()?)?;
    let gap = (homogenized - rep.compliance).abs() / rep.compliance;
    let text = format!(
        "compliance_homogenized,compliance_fine,gap,epsilon,solid_fraction,forced_volume,degenerate\n\
         {homogenized:.12e},{:.12e},{gap:.6e},{},{:.6},{:.6},{}\n",
        rep.compliance, rep.epsilon, rep.solid_fraction, rep.forced_volume, rep.degenerate
    );
    std::fs::write(out.join("validate.csv"), text)?;
    if cfg.dim() == 2 {
        fine.write_pgm(&out.join("fine_structure.pgm"))?;
    }
    println!(
        "homogenized {homogenized:.6e}, fine {:.6e}, gap {:.3}% at eps {}",
        rep.compliance,
        100.0 * gap,
        rep.epsilon
    );
    if rep.degenerate {
        log::warn!("fine-scale structure is degenerate: compliance far above the solid reference");
    }
    Ok(Done::Ok)
}

fn render(cfg: &RunConfig) -> Result<Done, Error> {
    let out = prepare(cfg, "render")?;
    let analysis = cfg.analysis()?;
    let design = cfg.initial_design()?;
    let eval = analysis.evaluate(&design, false)?;
    write_fields(&analysis, &eval, &out, "design")?;
    println!("compliance {:.6e}; fields in {}", eval.compliance, out.display());
    Ok(Done::Ok)
}

/// Seeded perturbation of the identity so every zone sees its own Jacobian;
/// the identity map would collapse each batch onto one cached solve.
fn bench_design(analysis: &Analysis, seed: u64) -> DesignVector {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut d = analysis.identity_design();
    for (v, c) in d.values.iter_mut().zip(analysis.layout().entries()) {
        let w = match c {
            Coefficient::A { .. } => 0.1,
            Coefficient::B { .. } => 0.05,
            Coefficient::C { .. } => 0.02,
        };
        *v += rng.gen_range(-w..w);
    }
    d
}

/// Zone counts for the sweep: 2D doubles both axes from 2x1, 3D doubles
/// the first axis from a single zone.
fn sweep_counts(dim: usize) -> Vec<Vec<usize>> {
    if dim == 2 {
        (0..4).map(|p| vec![2 << p, 1 << p]).collect()
    } else {
        (0..3).map(|p| vec![1 << p, 1, 1]).collect()
    }
}

fn bench(cfg: &RunConfig, iterations: usize, pools: &[usize]) -> Result<Done, Error> {
    if iterations == 0 || pools.is_empty() || pools.contains(&0) {
        return Err(Error::Config("bench needs at least one iteration and positive pool sizes".into()));
    }
    let out = prepare(cfg, "bench")?;
    let mesh: Arc<CellMesh> = cfg.cell_mesh()?;
    let explicit = cfg.mapping.initial.is_some();

    let mut zones_csv =
        String::from("zones,k,micro_s,macro_s,update_s,total_s,micro_fraction,macro_fraction,update_fraction\n");
    for counts in sweep_counts(cfg.dim()) {
        let mut c = cfg.clone();
        c.zones = counts.clone();
        if let Err(e) = c.validate() {
            log::warn!("skipping zones {counts:?}: {e}");
            continue;
        }
        let a = c.analysis_with_mesh(mesh.clone())?;
        let d = if explicit { cfg.initial_design()? } else { bench_design(&a, cfg.seed) };
        let t = timing_report(&bench_iterations(&a, &d, iterations)?);
        let label: Vec<String> = counts.iter().map(|n| n.to_string()).collect();
        zones_csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.4},{:.4},{:.4}\n",
            label.join("x"),
            a.zoning().k(),
            t.mean_micro_fea,
            t.mean_macro_fea,
            t.mean_update,
            t.mean_total,
            t.micro_fraction,
            t.macro_fraction,
            t.update_fraction
        ));
        println!(
            "K {:>4}: {:.3} s per iteration, micro {:.1}%",
            a.zoning().k(),
            t.mean_total,
            100.0 * t.micro_fraction
        );
    }
    std::fs::write(out.join("bench_zones.csv"), zones_csv)?;

    let mut pool_csv = String::from("pool,total_s,normalized\n");
    let mut reference = None;
    for &p in pools {
        let mut c = cfg.clone();
        c.pool = p;
        let a = c.analysis_with_mesh(mesh.clone())?;
        let d = if explicit { cfg.initial_design()? } else { bench_design(&a, cfg.seed) };
        let t = timing_report(&bench_iterations(&a, &d, iterations)?).mean_total;
        let r = *reference.get_or_insert(t);
        pool_csv.push_str(&format!("{p},{t:.6},{:.4}\n", t / r));
        println!("pool {p:>3}: {t:.3} s per iteration ({:.2} of the first)", t / r);
    }
    std::fs::write(out.join("bench_pool.csv"), pool_csv)?;
    Ok(Done::Ok)
}
