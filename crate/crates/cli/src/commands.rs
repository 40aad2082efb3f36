use std::fmt::Write as _;
use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use clap::{Parser, Subcommand};
use serde_json::{json, Value};

use swing_core::contracts::{interpolate_on_tile, GlobalConstraints, IntegerConstraints, PremiumSurface};
use swing_core::model::simulate_factor_paths;
use swing_core::tree::{extract_and_value_policy, premium_surface, quantized_dp_price};
use swing_core::{GlobalConstraints64, QuantTree64};

use crate::config::{Loaded, Seeds, CONFIG_ENV};
use crate::error::{CliError, CliResult};
use crate::pipeline::{OutputLock, Pipeline, Timings};

#[derive(Debug, Parser)]
#[command(name = "swing", version, about = "Swing option pricing by quantized dynamic programming")]
pub struct Cli {
    /// Run configuration (JSON).
    #[arg(long, global = true, env = CONFIG_ENV)]
    pub config: Option<PathBuf>,

    /// Base seed; grid, transition, policy and simulation seeds become
    /// seed, seed+1, seed+2, seed+3.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory, overriding the configuration.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Worker threads for the parallel stages.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build (or load) the quantization grids and print a summary.
    Grids {
        #[arg(long)]
        grid_size: Option<usize>,
    },
    /// Build (or load) grids and transition matrices.
    Transitions {
        #[arg(long)]
        grid_size: Option<usize>,
    },
    /// Price one pair of global constraints and print a JSON document.
    Price {
        #[arg(long, allow_negative_numbers = true)]
        q_min: Option<f64>,
        #[arg(long, allow_negative_numbers = true)]
        q_max: Option<f64>,
        #[arg(long)]
        grid_size: Option<usize>,
    },
    /// Write the premium at every integer vertex to `surface.csv`.
    Surface {
        #[arg(long)]
        grid_size: Option<usize>,
    },
    /// Price `(0, n)` for several grid sizes against the Black strip.
    Converge {
        /// Comma separated grid sizes.
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
    },
    /// Write simulated factor paths, spots and payoffs to `paths.csv`.
    Simulate {
        #[arg(long, default_value_t = 10)]
        paths: usize,
    },
}

/// Resolves configuration and overrides, then runs the command. Returns
/// what should be printed on standard output.
pub fn run(cli: Cli) -> CliResult<String> {
    let path = cli
        .config
        .ok_or_else(|| CliError::Config(format!("no configuration: pass --config or set {CONFIG_ENV}")))?;
    let mut cfg = Loaded::from_file(&path)?;
    if let Some(s) = cli.seed {
        cfg.run.pricing.seeds = Seeds::from_base(s);
    }
    if let Some(out) = cli.out {
        cfg.out_dir = out;
    }
    match cli.threads {
        Some(0) => return Err(CliError::Config("--threads must be at least 1".into())),
        Some(k) => {
            // Fails only if a pool already exists, which is harmless.
            let _ = rayon::ThreadPoolBuilder::new().num_threads(k).build_global();
        }
        None => {}
    }
    let _lock = OutputLock::acquire(&cfg.out_dir)?;
    let size = |s: Option<usize>| -> CliResult<usize> {
        match s {
            Some(0) => Err(CliError::Config("grid size must be at least 1".into())),
            Some(s) if s * 10 > cfg.run.pricing.n_samples => {
                Err(CliError::Config(format!("grid size {s} needs at least {} samples", 10 * s)))
            }
            Some(s) => Ok(s),
            None => Ok(cfg.run.pricing.grid_size),
        }
    };
    let doc = match cli.command {
        Command::Grids { grid_size } => cmd_grids(&cfg, size(grid_size)?)?,
        Command::Transitions { grid_size } => cmd_transitions(&cfg, size(grid_size)?)?,
        Command::Price { q_min, q_max, grid_size } => {
            let lo = q_min.unwrap_or(cfg.run.pricing.q_min);
            let hi = q_max.or(cfg.run.pricing.q_max).unwrap_or(cfg.params.n as f64);
            cmd_price(&cfg, size(grid_size)?, lo, hi)?
        }
        Command::Surface { grid_size } => cmd_surface(&cfg, size(grid_size)?)?,
        Command::Converge { sizes } => {
            let sizes = sizes.unwrap_or_else(|| cfg.run.pricing.converge_sizes.clone());
            for &s in &sizes {
                size(Some(s))?;
            }
            cmd_converge(&cfg, &sizes)?
        }
        Command::Simulate { paths } => cmd_simulate(&cfg, paths)?,
    };
    Ok(serde_json::to_string_pretty(&doc)? + "\n")
}

fn common(cfg: &Loaded, pipe: &Pipeline, size: usize) -> Value {
    let p = &cfg.run.pricing;
    json!({
        "n": cfg.params.n,
        "grid_size": size,
        "n_samples": p.n_samples,
        "transition_samples": cfg.transition_samples(),
        "lloyd_iterations": p.lloyd_iterations,
        "payoff_mode": p.payoff_mode,
        "seeds": p.seeds,
        "cache": pipe.tree_key(size),
    })
}

fn write_json(cfg: &Loaded, name: &str, doc: &Value) -> CliResult<()> {
    if cfg.wants_json() {
        fs::write(cfg.out_dir.join(name), serde_json::to_string_pretty(doc)? + "\n")?;
    }
    Ok(())
}

fn cmd_grids(cfg: &Loaded, size: usize) -> CliResult<Value> {
    let pipe = Pipeline::new(cfg);
    let (grids, reports) = pipe.grids(size)?;
    let doc = json!({
        "n": cfg.params.n,
        "grid_size": size,
        "n_samples": cfg.run.pricing.n_samples,
        "seed": cfg.run.pricing.seeds.grid,
        "optimizer": pipe.optimizer(),
        "cache": pipe.grid_key(size),
        "points": grids.iter().map(|g| g.len()).collect::<Vec<_>>(),
        "distortion": reports.iter().map(|r| r.final_distortion).collect::<Vec<_>>(),
        "lloyd_iterations": reports.iter().map(|r| r.iterations).collect::<Vec<_>>(),
    });
    write_json(cfg, "grids.json", &doc)?;
    Ok(doc)
}

fn cmd_transitions(cfg: &Loaded, size: usize) -> CliResult<Value> {
    let pipe = Pipeline::new(cfg);
    let tree = pipe.tree(size, &mut Timings::default())?;
    let mut doc = common(cfg, &pipe, size);
    doc["grid_sizes"] = json!(tree.grid_sizes());
    doc["swap_value"] = json!(tree.swap_value());
    doc["call_strip_value"] = json!(tree.call_strip_value());
    write_json(cfg, "transitions.json", &doc)?;
    Ok(doc)
}

/// Rejects pairs outside the admissible triangle; `hi > n` is clamped.
pub fn check_constraints(lo: f64, hi: f64, n: usize) -> CliResult<GlobalConstraints64> {
    if !lo.is_finite() || !hi.is_finite() {
        return Err(CliError::Config(format!("constraints must be finite, got ({lo}, {hi})")));
    }
    if lo < 0.0 || lo > hi || lo > n as f64 {
        return Err(CliError::Infeasible(format!(
            "no admissible purchase plan for (Q_min, Q_max) = ({lo}, {hi}) over {n} dates"
        )));
    }
    Ok(GlobalConstraints { lo, hi: hi.min(n as f64) })
}

fn finite(x: f64, what: &str) -> CliResult<f64> {
    if x.is_finite() {
        Ok(x)
    } else {
        Err(CliError::Numerical(format!("{what} is not finite")))
    }
}

fn cmd_price(cfg: &Loaded, size: usize, lo: f64, hi: f64) -> CliResult<Value> {
    let q = check_constraints(lo, hi, cfg.params.n)?;
    let pipe = Pipeline::new(cfg);
    let mut timings = Timings::default();
    let tree = pipe.tree(size, &mut timings)?;
    let (price, mc, se) = if q.is_integral() {
        let q0 = IntegerConstraints::try_from_real(&q)?;
        let (price, table) = timings.record("dp", || quantized_dp_price(&tree, q0))?;
        let (_, val) = timings.record("policy", || {
            extract_and_value_policy(
                &cfg.params,
                &tree,
                &table,
                q0,
                cfg.run.pricing.policy_paths,
                cfg.run.pricing.seeds.policy,
            )
        })?;
        (price, Some(finite(val.mc_value, "policy value")?), Some(val.std_err))
    } else {
        let (surface, _) = timings.record("dp", || premium_surface(&tree))?;
        (interpolate_on_tile(&surface, &q)?, None, None)
    };
    let mut doc = common(cfg, &pipe, size);
    doc["q_min"] = json!(q.lo);
    doc["q_max"] = json!(q.hi);
    doc["price"] = json!(finite(price, "price")?);
    doc["mc_policy_value"] = json!(mc);
    doc["std_err"] = json!(se);
    doc["policy_paths"] = json!(mc.map(|_| cfg.run.pricing.policy_paths));
    doc["timings"] = timings.to_json();
    write_json(cfg, "price.json", &doc)?;
    Ok(doc)
}

fn surface_of(tree: &QuantTree64) -> CliResult<PremiumSurface<f64>> {
    let (surface, _) = premium_surface(tree)?;
    for (i, j, v) in surface.entries() {
        finite(v, &format!("premium at ({i}, {j})"))?;
    }
    Ok(surface)
}

fn cmd_surface(cfg: &Loaded, size: usize) -> CliResult<Value> {
    let pipe = Pipeline::new(cfg);
    let tree = pipe.tree(size, &mut Timings::default())?;
    let surface = surface_of(&tree)?;
    let path = cfg.out_dir.join("surface.csv");
    let mut wr = csv::Writer::from_path(&path)?;
    wr.write_record(["q_min", "q_max", "price"])?;
    let mut rows = 0usize;
    for (i, j, v) in surface.entries() {
        wr.write_record([i.to_string(), j.to_string(), v.to_string()])?;
        rows += 1;
    }
    wr.flush()?;
    let shape = surface.shape_report(1e-9)?;
    let mut doc = common(cfg, &pipe, size);
    doc["rows"] = json!(rows);
    doc["file"] = json!("surface.csv");
    doc["columns"] = json!(["q_min", "q_max", "price"]);
    doc["shape"] = json!({
        "slack": 1e-9,
        "concavity_checks": shape.concavity_checks,
        "concavity_violations": shape.concavity_violations,
        "monotonicity_checks": shape.monotonicity_checks,
        "monotonicity_violations": shape.monotonicity_violations,
        "worst_excess": shape.worst_excess,
    });
    fs::write(cfg.out_dir.join("surface.json"), serde_json::to_string_pretty(&doc)? + "\n")?;
    Ok(doc)
}

/// Least-squares slope of `ln err` against `ln N` over rows with a
/// positive error; `None` with fewer than two such rows.
pub fn loglog_slope(rows: &[(usize, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = rows
        .iter()
        .filter(|(_, e)| *e > 0.0)
        .map(|&(s, e)| ((s as f64).ln(), e.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let m = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / m;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / m;
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    if sxx == 0.0 {
        return None;
    }
    Some(pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>() / sxx)
}

fn cmd_converge(cfg: &Loaded, sizes: &[usize]) -> CliResult<Value> {
    if sizes.is_empty() {
        return Err(CliError::Config("no grid sizes to run".into()));
    }
    let n = cfg.params.n;
    let oracle = cfg.params.closed_form_strip()?;
    let pipe = Pipeline::new(cfg);
    let mut csv = String::from("grid_size,price,oracle,abs_error,wall_time_s\n");
    let mut rows = Vec::new();
    let mut docs = Vec::new();
    for &size in sizes {
        let t0 = Instant::now();
        let mut timings = Timings::default();
        let tree = pipe.tree(size, &mut timings)?;
        let (price, _) = quantized_dp_price(&tree, IntegerConstraints { lo: 0, hi: n })?;
        let price = finite(price, "price")?;
        let wall = t0.elapsed().as_secs_f64();
        let err = (price - oracle).abs();
        writeln!(csv, "{size},{price},{oracle},{err},{wall:.3}").expect("string write");
        rows.push((size, err));
        docs.push(json!({
            "grid_size": size,
            "price": price,
            "abs_error": err,
            "swap_value": tree.swap_value(),
            "cache": pipe.tree_key(size),
        }));
    }
    let slope = loglog_slope(&rows);
    match slope {
        Some(s) => writeln!(csv, "# log-log slope: {s}"),
        None => writeln!(csv, "# log-log slope: nan"),
    }
    .expect("string write");
    fs::write(cfg.out_dir.join("converge.csv"), csv)?;
    let doc = json!({
        "n": n,
        "oracle": oracle,
        "n_samples": cfg.run.pricing.n_samples,
        "transition_samples": cfg.transition_samples(),
        "seeds": cfg.run.pricing.seeds,
        "rows": docs,
        "loglog_slope": slope,
    });
    write_json(cfg, "converge.json", &doc)?;
    Ok(doc)
}

fn cmd_simulate(cfg: &Loaded, n_paths: usize) -> CliResult<Value> {
    if n_paths == 0 {
        return Err(CliError::Config("--paths must be at least 1".into()));
    }
    let seed = cfg.run.pricing.seeds.simulate;
    let paths = simulate_factor_paths(&cfg.params, n_paths, seed)?;
    let mut wr = csv::Writer::from_path(cfg.out_dir.join("paths.csv"))?;
    wr.write_record(["path", "date", "x1", "x2", "spot", "payoff"])?;
    for (p, path) in paths.iter().enumerate() {
        for (k, y) in path.iter().take(cfg.params.n).enumerate() {
            let (spot, payoff) = cfg.params.spot_and_payoff(k, *y);
            wr.write_record([
                p.to_string(),
                k.to_string(),
                y.x1.to_string(),
                y.x2.to_string(),
                spot.to_string(),
                payoff.to_string(),
            ])?;
        }
    }
    wr.flush()?;
    Ok(json!({ "paths": n_paths, "n": cfg.params.n, "seed": seed, "file": "paths.csv" }))
}
