//! Staged tree construction with a content-addressed cache under
//! `<out>/cache/<sha256>`.

use std::fs::{self, OpenOptions};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;
use serde_json::json;
use sha2::{Digest, Sha256};

use swing_core::quantizer::OptimizerReport;
use swing_core::tree::{build_grids, tree_from_grids, GridOptimizer, GridOptions, TreeOptions};
use swing_core::{Codebook64, QuantTree64};

use crate::config::Loaded;
use crate::error::{CliError, CliResult};

const CACHE_FORMAT: u32 = 1;
const DONE_MARKER: &str = "complete";
const LOCK_FILE: &str = ".swing.lock";

/// Holds `<out>/.swing.lock` for its lifetime.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(out_dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(out_dir)?;
        let path = out_dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Io(format!(
                "{} exists: another run is using this output directory (remove the file if it is stale)",
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

/// Wall-clock seconds per pipeline stage, in execution order.
#[derive(Debug, Default, Clone, Serialize)]
pub struct Timings(pub Vec<(String, f64)>);

impl Timings {
    pub fn record<R>(&mut self, stage: &str, f: impl FnOnce() -> R) -> R {
        let t0 = Instant::now();
        let r = f();
        self.0.push((stage.to_string(), t0.elapsed().as_secs_f64()));
        r
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::Value::Object(self.0.iter().map(|(k, v)| (format!("{k}_s"), json!(v))).collect())
    }

    pub fn total(&self) -> f64 {
        self.0.iter().map(|(_, v)| v).sum()
    }
}

pub struct Pipeline<'a> {
    cfg: &'a Loaded,
    cache_root: PathBuf,
}

impl<'a> Pipeline<'a> {
    pub fn new(cfg: &'a Loaded) -> Self {
        Self {
            cfg,
            cache_root: cfg.out_dir.join("cache"),
        }
    }

    fn grid_options(&self, size: usize) -> GridOptions {
        let p = &self.cfg.run.pricing;
        let mut opts = GridOptions::new(size, p.n_samples, p.seeds.grid);
        opts.lloyd.max_iter = p.lloyd_iterations;
        opts
    }

    fn tree_options(&self, size: usize) -> TreeOptions {
        let p = &self.cfg.run.pricing;
        TreeOptions {
            grid: self.grid_options(size),
            transition_samples: self.cfg.transition_samples(),
            transition_seed: p.seeds.transition,
            payoff_mode: p.payoff_mode,
        }
    }

    pub fn grid_key(&self, size: usize) -> String {
        let o = self.grid_options(size);
        digest(&json!({
            "format": CACHE_FORMAT,
            "kind": "grids",
            "model": self.cfg.params,
            "grid_size": size,
            "n_samples": o.n_samples,
            "seed": o.seed,
            "optimizer": o.optimizer,
            "lloyd_iterations": o.lloyd.max_iter,
            "lloyd_tol": o.lloyd.tol,
        }))
    }

    pub fn tree_key(&self, size: usize) -> String {
        let o = self.tree_options(size);
        digest(&json!({
            "format": CACHE_FORMAT,
            "kind": "tree",
            "grids": self.grid_key(size),
            "transition_samples": o.transition_samples,
            "transition_seed": o.transition_seed,
            "payoff_mode": o.payoff_mode,
        }))
    }

    /// Grids for every date plus the optimizer reports of the build that
    /// produced them.
    pub fn grids(&self, size: usize) -> CliResult<(Vec<Codebook64>, Vec<OptimizerReport<f64>>)> {
        let dir = self.cache_root.join(self.grid_key(size));
        let n = self.cfg.params.n;
        if dir.join(DONE_MARKER).exists() {
            log::info!("grids for N={size} loaded from {}", dir.display());
            let grids = (0..n)
                .map(|k| Codebook64::read_csv(fs::File::open(dir.join(format!("grid_{k}.csv")))?))
                .collect::<Result<Vec<_>, _>>()?;
            let reports = serde_json::from_str(&fs::read_to_string(dir.join("reports.json"))?)?;
            return Ok((grids, reports));
        }
        let (grids, reports) = build_grids(&self.cfg.params, &self.grid_options(size))?;
        fs::create_dir_all(&dir)?;
        for (k, g) in grids.iter().enumerate() {
            g.write_csv(fs::File::create(dir.join(format!("grid_{k}.csv")))?)?;
        }
        fs::write(dir.join("reports.json"), serde_json::to_string(&reports)?)?;
        fs::write(dir.join(DONE_MARKER), "")?;
        // Reload so that fresh and cached runs see the same rounded values.
        let grids = (0..n)
            .map(|k| Codebook64::read_csv(fs::File::open(dir.join(format!("grid_{k}.csv")))?))
            .collect::<Result<Vec<_>, _>>()?;
        Ok((grids, reports))
    }

    /// The full quantized tree, timing the grid and transition stages.
    pub fn tree(&self, size: usize, timings: &mut Timings) -> CliResult<QuantTree64> {
        let dir = self.cache_root.join(self.tree_key(size));
        if dir.join(DONE_MARKER).exists() {
            log::info!("tree for N={size} loaded from {}", dir.display());
            return timings.record("load", || QuantTree64::load(&dir)).map_err(Into::into);
        }
        let (grids, _) = timings.record("grids", || self.grids(size))?;
        let tree = timings.record("transitions", || {
            tree_from_grids(&self.cfg.params, grids, &self.tree_options(size))
        })?;
        tree.save(&dir)?;
        fs::write(dir.join(DONE_MARKER), "")?;
        Ok(QuantTree64::load(&dir)?)
    }

    pub fn optimizer(&self) -> GridOptimizer {
        self.grid_options(1).optimizer
    }
}

fn digest(v: &serde_json::Value) -> String {
    // serde_json maps are sorted by key, so this text is canonical.
    hex::encode(Sha256::digest(v.to_string().as_bytes()))
}
