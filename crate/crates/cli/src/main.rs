//! Command-line driver: runs the experiment pipelines over one configuration
//! file or the built-in default matrix, writes JSON reports, CSV tables, and
//! cached binary fields under the output directory, and exits 0 exactly when
//! every gated check passes.

use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use perihom::ansatz::forcing_library;
use perihom::experiments::{
    atomic_write, default_matrix, run_cell, run_consistency, run_convergence, run_effective,
    run_solve, run_validate, write_consistency_csv, write_convergence_csv,
    write_corrector_fields, write_json, ExperimentConfig, SolveRun, Workbench, BOUND_SLACK,
};

#[derive(Parser)]
#[command(
    name = "perihom",
    version,
    about = "Homogenization pipelines for a nonlocal peridynamic operator on the periodic torus",
    after_help = "Without --config, every configuration of the built-in default matrix runs.\n\
                  The exit code is 0 exactly when all gated checks pass."
)]
struct Cli {
    #[command(subcommand)]
    command: Pipeline,
    /// JSON experiment configuration (runs the built-in matrix when omitted)
    #[arg(long, global = true, value_name = "path")]
    config: Option<PathBuf>,
    /// Root directory for reports, tables, and cached fields
    #[arg(long, global = true, default_value = "out", value_name = "dir")]
    out: PathBuf,
    /// Override the configuration seed
    #[arg(long, global = true, value_name = "int")]
    seed: Option<u64>,
    /// Override both grid resolutions (cell and sweep) with one value
    #[arg(long, global = true, value_name = "N")]
    grid: Option<usize>,
    /// Override the ε list (comma-separated, strictly decreasing)
    #[arg(long, global = true, value_delimiter = ',', value_name = "list")]
    eps: Option<Vec<f64>>,
}

#[derive(Subcommand)]
enum Pipeline {
    /// Check model admissibility and operator structure
    Validate,
    /// Solve both cell problems; write the report and cached corrector fields
    Cell,
    /// Compute the effective tensor by both formulas, with certificates
    Effective,
    /// Solve the heterogeneous and local problems for every ε and forcing
    Solve,
    /// Sweep ‖uᵉ − u⁰‖ over the ε list and the forcing library
    Converge,
    /// Measure the ansatz consistency residual over the profile library
    Consistency,
}

fn main() {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => {}
        Ok(false) => std::process::exit(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            std::process::exit(2);
        }
    }
}

/// Resolve the configuration list and apply command-line overrides.
fn configs(cli: &Cli) -> Result<Vec<ExperimentConfig>> {
    let mut list = match &cli.config {
        Some(path) => vec![ExperimentConfig::from_json_file(path)
            .with_context(|| format!("loading {}", path.display()))?],
        None => default_matrix(),
    };
    for cfg in &mut list {
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        if let Some(n) = cli.grid {
            cfg.cell_grid = n;
            cfg.sweep_grid = n;
        }
        if let Some(eps) = &cli.eps {
            cfg.eps = eps.clone();
        }
        cfg.validate()
            .with_context(|| format!("configuration {} after overrides", cfg.name))?;
    }
    Ok(list)
}

fn run(cli: &Cli) -> Result<bool> {
    let mut all_pass = true;
    for cfg in configs(cli)? {
        let dir = cli.out.join(cfg.artifact_dir());
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("creating {}", dir.display()))?;
        let pass = match cli.command {
            Pipeline::Validate => validate(&cfg, &dir)?,
            Pipeline::Cell => cell(&cfg, &dir)?,
            Pipeline::Effective => effective(&cfg, &dir)?,
            Pipeline::Solve => solve(&cfg, &dir)?,
            Pipeline::Converge => converge(&cfg, &dir)?,
            Pipeline::Consistency => consistency(&cfg, &dir)?,
        };
        all_pass &= pass;
    }
    Ok(all_pass)
}

fn verdict(pass: bool) -> &'static str {
    if pass {
        "PASS"
    } else {
        "FAIL"
    }
}

fn validate(cfg: &ExperimentConfig, dir: &std::path::Path) -> Result<bool> {
    let run = run_validate(cfg)?;
    write_json(&dir.join("validate.json"), &run)?;
    println!(
        "validate {}: {} (symmetry defect {:.3e}, spectral gap {:.3e}, null space {})",
        cfg.name,
        verdict(run.pass),
        run.structure.max_symmetry_defect,
        run.structure.spectral_gap,
        if run.structure.null_space_ok { "ok" } else { "BAD" },
    );
    Ok(run.pass)
}

fn cell(cfg: &ExperimentConfig, dir: &std::path::Path) -> Result<bool> {
    let mut wb = Workbench::new(cfg.clone())?;
    let run = run_cell(&mut wb)?;
    write_json(&dir.join("cell.json"), &run)?;
    let fields_dir = dir.join("fields");
    std::fs::create_dir_all(&fields_dir)?;
    let sol = wb.cell_solution(cfg.cell_grid)?;
    let written = write_corrector_fields(&fields_dir, sol)?;
    println!(
        "cell {}: {} (mean gates {:.3e}/{:.3e}, two-formula rel {:.3e}, {} fields cached)",
        cfg.name,
        verdict(run.pass),
        run.h_mean_max,
        run.g_mean_max,
        run.ctilde.rel_diff,
        written.len(),
    );
    Ok(run.pass)
}

fn effective(cfg: &ExperimentConfig, dir: &std::path::Path) -> Result<bool> {
    let mut wb = Workbench::new(cfg.clone())?;
    let run = run_effective(&mut wb)?;
    write_json(&dir.join("effective.json"), &run)?;
    let oracle = match &run.lame {
        Some(l) => format!(", closed-form oracle rel dev {:.3e}", l.max_rel_deviation),
        None => String::new(),
    };
    println!(
        "effective {}: {} (γ₁ = {:.6e}, symmetry {:.3e}{})",
        cfg.name,
        verdict(run.pass),
        run.effective.certificates.gamma1,
        run.effective.certificates.symmetry_max_violation,
        oracle,
    );
    Ok(run.pass)
}

fn solve(cfg: &ExperimentConfig, dir: &std::path::Path) -> Result<bool> {
    let mut wb = Workbench::new(cfg.clone())?;
    let fields_dir = dir.join("fields");
    std::fs::create_dir_all(&fields_dir)?;
    let mut runs: Vec<SolveRun> = Vec::new();
    let mut pass = true;
    for &eps in &cfg.eps {
        let periods = cfg.periods(eps)?;
        let mut max_ratio = 0.0f64;
        let mut bound = 0.0f64;
        for forcing in forcing_library(cfg.model.dimension) {
            let (run, ueps, u0) = run_solve(&mut wb, eps, &forcing)?;
            let stem = format!("{}-n{}", forcing.name(), periods);
            atomic_write(
                &fields_dir.join(format!("ueps-{stem}.bin")),
                &ueps.to_binary(),
            )?;
            atomic_write(&fields_dir.join(format!("u0-{stem}.bin")), &u0.to_binary())?;
            max_ratio = max_ratio.max(run.resolvent.norm_ratio);
            bound = run.resolvent.uniform_bound;
            pass &= run.resolvent.norm_ratio <= bound + BOUND_SLACK;
            runs.push(run);
        }
        println!(
            "solve {} ε=1/{}: norm ratio {:.6} ≤ bound {:.6}",
            cfg.name, periods, max_ratio, bound,
        );
    }
    write_json(&dir.join("solve.json"), &runs)?;
    println!("solve {}: {}", cfg.name, verdict(pass));
    Ok(pass)
}

fn converge(cfg: &ExperimentConfig, dir: &std::path::Path) -> Result<bool> {
    let mut wb = Workbench::new(cfg.clone())?;
    let run = run_convergence(&mut wb)?;
    write_json(&dir.join("convergence.json"), &run)?;
    write_convergence_csv(&dir.join("convergence.csv"), &run)?;
    let chain = run
        .aggregate
        .rows
        .iter()
        .map(|r| format!("{:.3e}", r.error))
        .collect::<Vec<_>>()
        .join(" > ");
    println!(
        "converge {}: {} (library-rms errors {}, bound ok {}, constants ok {})",
        cfg.name,
        verdict(run.pass),
        chain,
        run.bound_ok,
        run.constants_ok,
    );
    Ok(run.pass)
}

fn consistency(cfg: &ExperimentConfig, dir: &std::path::Path) -> Result<bool> {
    let mut wb = Workbench::new(cfg.clone())?;
    let run = run_consistency(&mut wb)?;
    write_json(&dir.join("consistency.json"), &run)?;
    write_consistency_csv(&dir.join("consistency.csv"), &run)?;
    println!(
        "consistency {}: {} (monotone {}, final rel {:.3e}, constants ok {})",
        cfg.name,
        verdict(run.pass),
        run.nonconstant_monotone,
        run.final_relative_max,
        run.constants_ok,
    );
    Ok(run.pass)
}
