//! Quantized tree: per-date grids, transition matrices and the quantized
//! backward dynamic programming over residual global constraints.

use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::contracts::{interpolate_on_tile, GlobalConstraints, IntegerConstraints, PremiumSurface};
use crate::error::{Error, Result};
use crate::model::{FactorState, PathStream, TwoFactorParams};
use crate::oracle::{Branch, LatticeNode, ScenarioLattice};
use crate::quantizer::{
    clvq_optimize, distinct_rows, lloyd_optimize, ClvqOptions, Codebook, LloydOptions, NearestSearch,
    OptimizerReport,
};
use crate::scalar::Scalar;

const ROW_TOLERANCE: f64 = 1e-9;
const STATE_DIM: usize = 2;

/// Row-stochastic matrix `p^{ij}_k = P(Ŷ_{k+1} = y^j | Ŷ_k = y^i)`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct TransitionMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> TransitionMatrix<T> {
    pub fn new(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if rows == 0 || cols == 0 || data.len() != rows * cols {
            return Err(Error::InvalidTree(format!(
                "{} entries for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        let m = Self { rows, cols, data };
        for i in 0..rows {
            let row = m.row(i);
            if row.iter().any(|p| !(*p >= T::zero()) || !p.is_finite()) {
                return Err(Error::InvalidTree(format!("row {i} has a negative or non-finite entry")));
            }
            let total: T = row.iter().copied().sum();
            if (total - T::one()).abs() > T::of(ROW_TOLERANCE) {
                return Err(Error::InvalidTree(format!("row {i} sums to {total}")));
            }
        }
        Ok(m)
    }

    pub fn identity(size: usize) -> Self {
        let mut data = vec![T::zero(); size * size];
        for i in 0..size {
            data[i * size + i] = T::one();
        }
        Self { rows: size, cols: size, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> T {
        self.data[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// `out_i = Σ_j p^{ij} v_j`.
    pub fn apply(&self, v: &[T]) -> Vec<T> {
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(p, x)| *p * *x).sum())
            .collect()
    }

    /// `out_j = Σ_i w_i p^{ij}`.
    pub fn propagate(&self, w: &[T]) -> Vec<T> {
        let mut out = vec![T::zero(); self.cols];
        for (i, &wi) in w.iter().enumerate() {
            for (o, p) in out.iter_mut().zip(self.row(i)) {
                *o += wi * *p;
            }
        }
        out
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().has_headers(false).from_writer(w);
        for i in 0..self.rows {
            wr.write_record(self.row(i).iter().map(|p| p.to_string()))?;
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: std::io::Read>(r: R) -> Result<Self> {
        let (rows, cols, data) = read_matrix(r)?;
        Self::new(rows, cols, data)
    }
}

fn read_matrix<T: Scalar, R: std::io::Read>(r: R) -> Result<(usize, usize, Vec<T>)> {
    let mut rd = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
    let mut data = Vec::new();
    let mut rows = 0;
    let mut cols = 0;
    for rec in rd.records() {
        let rec = rec?;
        cols = rec.len();
        for f in rec.iter() {
            data.push(
                f.trim()
                    .parse()
                    .map_err(|_| Error::Parse(format!("cannot parse `{f}`")))?,
            );
        }
        rows += 1;
    }
    Ok((rows, cols, data))
}

/// How a quantized tree was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildManifest {
    pub params: TwoFactorParams<f64>,
    pub grid_size: usize,
    pub grid_samples: usize,
    pub grid_seed: u64,
    pub transition_samples: usize,
    pub transition_seed: u64,
    pub optimizer: GridOptimizer,
    pub payoff_mode: PayoffMode,
    /// Transitions are counted on exact joint samples of consecutive states.
    pub transition_method: String,
}

/// Quantized Markov chain `(Ŷ_k)` with payoffs `v_k(y^i_k)` on its grids.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantTree<T> {
    grids: Vec<Codebook<T>>,
    transitions: Vec<TransitionMatrix<T>>,
    payoffs: Vec<Vec<T>>,
    root_weights: Vec<T>,
    pub manifest: Option<BuildManifest>,
}

impl<T: Scalar> QuantTree<T> {
    /// The root law is the weight vector of grid 0 (or the point mass when
    /// grid 0 has a single point).
    pub fn new(grids: Vec<Codebook<T>>, transitions: Vec<TransitionMatrix<T>>, payoffs: Vec<Vec<T>>) -> Result<Self> {
        let n = grids.len();
        if n == 0 {
            return Err(Error::InvalidTree("no dates".into()));
        }
        if transitions.len() + 1 != n || payoffs.len() != n {
            return Err(Error::InvalidTree(format!(
                "{n} grids, {} transitions, {} payoff vectors",
                transitions.len(),
                payoffs.len()
            )));
        }
        for k in 0..n {
            if payoffs[k].len() != grids[k].len() {
                return Err(Error::InvalidTree(format!("payoff vector {k} does not match its grid")));
            }
            if payoffs[k].iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidTree(format!("non-finite payoff at date {k}")));
            }
            if k + 1 < n {
                let p = &transitions[k];
                if p.rows() != grids[k].len() || p.cols() != grids[k + 1].len() {
                    return Err(Error::InvalidTree(format!(
                        "transition {k} is {}x{}, grids have {} and {} points",
                        p.rows(),
                        p.cols(),
                        grids[k].len(),
                        grids[k + 1].len()
                    )));
                }
            }
        }
        let root_weights = match grids[0].weights() {
            Some(w) => w.to_vec(),
            None if grids[0].len() == 1 => vec![T::one()],
            None => return Err(Error::InvalidTree("root grid needs weights".into())),
        };
        Ok(Self {
            grids,
            transitions,
            payoffs,
            root_weights,
            manifest: None,
        })
    }

    /// Tree on the model's grids; see [`PayoffMode`] for the payoff values.
    pub fn from_model(
        params: &TwoFactorParams<T>,
        grids: Vec<Codebook<T>>,
        transitions: Vec<TransitionMatrix<T>>,
        mode: PayoffMode,
    ) -> Result<Self> {
        let payoffs = grids
            .iter()
            .enumerate()
            .map(|(k, g)| {
                g.points()
                    .chunks_exact(STATE_DIM)
                    .map(|y| params.payoff(k, FactorState::new(y[0], y[1])))
                    .collect()
            })
            .collect();
        let mut tree = Self::new(grids, transitions, payoffs)?;
        if mode == PayoffMode::ForwardMatched {
            let marginals = tree.marginals();
            for (k, w) in marginals.iter().enumerate() {
                let sums: Vec<T> = tree.grids[k].points().chunks_exact(STATE_DIM).map(|y| y[0] + y[1]).collect();
                let top = sums.iter().copied().fold(T::neg_infinity(), T::max);
                let norm: T = sums.iter().zip(w).map(|(s, wi)| *wi * (*s - top).exp()).sum();
                let discount = (-params.rate * params.time(k)).exp();
                tree.payoffs[k] = sums
                    .iter()
                    .map(|s| discount * (params.forward[k] * (*s - top).exp() / norm - params.strikes[k]))
                    .collect();
            }
        }
        Ok(tree)
    }

    /// Number of exercise dates.
    pub fn n(&self) -> usize {
        self.grids.len()
    }

    pub fn grids(&self) -> &[Codebook<T>] {
        &self.grids
    }

    pub fn transitions(&self) -> &[TransitionMatrix<T>] {
        &self.transitions
    }

    pub fn payoffs(&self) -> &[Vec<T>] {
        &self.payoffs
    }

    pub fn root_weights(&self) -> &[T] {
        &self.root_weights
    }

    pub fn grid_sizes(&self) -> Vec<usize> {
        self.grids.iter().map(Codebook::len).collect()
    }

    /// Law of `Ŷ_k` for every `k`, propagated from the root.
    pub fn marginals(&self) -> Vec<Vec<T>> {
        let mut out = vec![self.root_weights.clone()];
        for p in &self.transitions {
            let next = p.propagate(out.last().expect("non-empty"));
            out.push(next);
        }
        out
    }

    /// `Σ_k E v_k(Ŷ_k)`: the quantized premium at `(n, n)`.
    pub fn swap_value(&self) -> T {
        self.marginals()
            .iter()
            .zip(&self.payoffs)
            .map(|(w, v)| w.iter().zip(v).map(|(a, b)| *a * *b).sum::<T>())
            .sum()
    }

    /// `Σ_k E v_k(Ŷ_k)⁺`: the quantized premium at `(0, n)`.
    pub fn call_strip_value(&self) -> T {
        self.marginals()
            .iter()
            .zip(&self.payoffs)
            .map(|(w, v)| w.iter().zip(v).map(|(a, b)| *a * b.max(T::zero())).sum::<T>())
            .sum()
    }

    /// The chain as a scenario lattice (nodes are grid points, so distinct
    /// histories share nodes). Requires a single root point.
    pub fn to_lattice(&self) -> Result<ScenarioLattice<T>> {
        if self.grids[0].len() != 1 {
            return Err(Error::InvalidTree("lattice view needs a single root point".into()));
        }
        let n = self.n();
        let levels = (0..n)
            .map(|k| {
                (0..self.grids[k].len())
                    .map(|i| LatticeNode {
                        payoff: self.payoffs[k][i],
                        children: if k + 1 < n {
                            self.transitions[k]
                                .row(i)
                                .iter()
                                .enumerate()
                                .filter(|(_, p)| **p > T::zero())
                                .map(|(j, p)| Branch { node: j, prob: *p })
                                .collect()
                        } else {
                            Vec::new()
                        },
                    })
                    .collect()
            })
            .collect();
        ScenarioLattice::new(levels)
    }

    /// Random 1-D tree with a single root and `1..=max_size` points per later
    /// date; payoffs uniform in `[lo, hi)`.
    pub fn random<R: rand::Rng>(n: usize, max_size: usize, (lo, hi): (f64, f64), rng: &mut R) -> Self {
        assert!(n >= 1 && max_size >= 1);
        let sizes: Vec<usize> = (0..n)
            .map(|k| if k == 0 { 1 } else { rng.random_range(1..=max_size) })
            .collect();
        let grids = sizes
            .iter()
            .map(|&m| Codebook::scalar(&(0..m).map(|i| T::of_usize(i)).collect::<Vec<_>>()).expect("distinct points"))
            .collect();
        let transitions = sizes
            .windows(2)
            .map(|w| {
                let mut data = Vec::with_capacity(w[0] * w[1]);
                for _ in 0..w[0] {
                    let raw: Vec<f64> = (0..w[1]).map(|_| rng.random_range(0.05..1.0)).collect();
                    let total: f64 = raw.iter().sum();
                    data.extend(raw.iter().map(|r| T::of(r / total)));
                }
                TransitionMatrix::new(w[0], w[1], data).expect("stochastic rows")
            })
            .collect();
        let payoffs = sizes
            .iter()
            .map(|&m| (0..m).map(|_| T::of(rng.random_range(lo..hi))).collect())
            .collect();
        Self::new(grids, transitions, payoffs).expect("consistent random tree")
    }

    /// Writes `grid_k.csv`, `transition_k.csv`, `payoffs.csv` and
    /// `manifest.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        for (k, g) in self.grids.iter().enumerate() {
            g.write_csv(fs::File::create(dir.join(format!("grid_{k}.csv")))?)?;
        }
        for (k, p) in self.transitions.iter().enumerate() {
            p.write_csv(fs::File::create(dir.join(format!("transition_{k}.csv")))?)?;
        }
        let mut wr = csv::WriterBuilder::new()
            .flexible(true)
            .from_writer(fs::File::create(dir.join("payoffs.csv"))?);
        for v in &self.payoffs {
            wr.write_record(v.iter().map(|x| x.to_string()))?;
        }
        wr.flush()?;
        let manifest = serde_json::json!({
            "n": self.n(),
            "grid_sizes": self.grid_sizes(),
            "build": self.manifest,
        });
        fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.join("manifest.json"))?)?;
        let n = manifest["n"]
            .as_u64()
            .ok_or_else(|| Error::Parse("manifest lacks `n`".into()))? as usize;
        let grids = (0..n)
            .map(|k| Codebook::read_csv(fs::File::open(dir.join(format!("grid_{k}.csv")))?))
            .collect::<Result<Vec<_>>>()?;
        let transitions = (0..n.saturating_sub(1))
            .map(|k| TransitionMatrix::read_csv(fs::File::open(dir.join(format!("transition_{k}.csv")))?))
            .collect::<Result<Vec<_>>>()?;
        let mut rd = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .from_reader(fs::File::open(dir.join("payoffs.csv"))?);
        let mut payoffs = Vec::with_capacity(n);
        for rec in rd.records() {
            let rec = rec?;
            payoffs.push(
                rec.iter()
                    .map(|f| f.trim().parse().map_err(|_| Error::Parse(format!("cannot parse `{f}`"))))
                    .collect::<Result<Vec<T>>>()?,
            );
        }
        let mut tree = Self::new(grids, transitions, payoffs)?;
        tree.manifest = serde_json::from_value(manifest["build"].clone()).unwrap_or(None);
        Ok(tree)
    }
}

/// How payoffs are attached to grid points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PayoffMode {
    /// `v_k(y^i_k)` straight from the model.
    GridPoint,
    /// Spot values on each grid rescaled so that the quantized forward
    /// `Σ_i w^k_i Ŝ^i_k` equals `F_{0,t_k}` exactly. Removes the convexity
    /// bias of `exp` on the grid, which otherwise dominates swap-like
    /// payoffs.
    #[default]
    ForwardMatched,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GridOptimizer {
    /// Lloyd I, started from a warm start or random samples.
    Lloyd,
    /// A CLVQ pass over the samples at the first date, then Lloyd I.
    ClvqLloyd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridOptions {
    pub grid_size: usize,
    pub n_samples: usize,
    pub seed: u64,
    pub optimizer: GridOptimizer,
    pub lloyd: LloydOptions,
}

impl GridOptions {
    pub fn new(grid_size: usize, n_samples: usize, seed: u64) -> Self {
        Self {
            grid_size,
            n_samples,
            seed,
            optimizer: GridOptimizer::ClvqLloyd,
            lloyd: LloydOptions::default(),
        }
    }
}

/// One optimized quadratic codebook per date for the law of `Y_k`; date 0
/// is the single point `(0, 0)`.
///
/// Dates are processed in order on one growing set of simulated paths.
/// Each date starts from the previous grid mapped through the linear map
/// taking the covariance of `Y_{k−1}` to that of `Y_k`.
pub fn build_grids<T: Scalar>(
    params: &TwoFactorParams<T>,
    opts: &GridOptions,
) -> Result<(Vec<Codebook<T>>, Vec<OptimizerReport<T>>)> {
    params.validate()?;
    let size = opts.grid_size;
    if size == 0 || opts.n_samples < 10 * size {
        return Err(Error::ContractViolation(format!(
            "need grid size >= 1 and at least 10 samples per point, got N={size}, {} samples",
            opts.n_samples
        )));
    }
    let origin = Codebook::new(STATE_DIM, vec![T::zero(); STATE_DIM])?.with_weights(vec![T::one()])?;
    let mut grids = vec![origin];
    let mut reports = Vec::new();
    let mut stream = PathStream::new(params, opts.n_samples, opts.seed);
    for k in 1..params.n {
        stream.advance();
        let samples = stream.states();
        let prev = grids.last().expect("non-empty");
        let warm = if k > 1 {
            map_grid(prev, params.covariance(params.time(k - 1)), params.covariance(params.time(k)))
        } else {
            None
        };
        let init = match warm {
            Some(cb) if cb.len() == size => cb,
            _ => {
                let rows = distinct_rows(samples, STATE_DIM, size);
                let cb = Codebook::new(STATE_DIM, rows)?;
                if opts.optimizer == GridOptimizer::ClvqLloyd && cb.len() == size && size > 1 {
                    let clvq = ClvqOptions { steps: opts.n_samples, ..Default::default() };
                    clvq_optimize(samples.chunks_exact(STATE_DIM), &cb, clvq, &[])?.0
                } else {
                    cb
                }
            }
        };
        let (cb, report) = lloyd_optimize(samples, &init, opts.lloyd)?;
        if !report.converged {
            log::warn!("grid {k}: Lloyd stopped after {} iterations", report.iterations);
        }
        log::debug!(
            "grid {k}: {} points, distortion {}, {} iterations",
            cb.len(),
            report.final_distortion,
            report.iterations
        );
        grids.push(cb);
        reports.push(report);
    }
    Ok((grids, reports))
}

/// `A y` with `A = L_to L_from⁻¹` (Cholesky factors), or `None` when the
/// source covariance is singular or the image has repeated points.
fn map_grid<T: Scalar>(cb: &Codebook<T>, from: [[T; 2]; 2], to: [[T; 2]; 2]) -> Option<Codebook<T>> {
    let chol = |c: [[T; 2]; 2]| {
        let l11 = c[0][0].max(T::zero()).sqrt();
        let l21 = if l11 > T::zero() { c[1][0] / l11 } else { T::zero() };
        let l22 = (c[1][1] - l21 * l21).max(T::zero()).sqrt();
        (l11, l21, l22)
    };
    let (a11, a21, a22) = chol(from);
    let (b11, b21, b22) = chol(to);
    let eps = T::of(1e-300);
    if a11 <= eps || a22 <= eps {
        return None;
    }
    // L_from⁻¹ = [[1/a11, 0], [−a21/(a11 a22), 1/a22]]
    let points: Vec<T> = cb
        .points()
        .chunks_exact(2)
        .flat_map(|y| {
            let z1 = y[0] / a11;
            let z2 = (y[1] - a21 * z1) / a22;
            [b11 * z1, b21 * z1 + b22 * z2]
        })
        .collect();
    Codebook::new(2, points).ok()
}

/// Transition matrices counted on consecutive nearest-cell pairs along
/// `n_samples` simulated paths.
///
/// Rows of cells that no path visits are set to the empirical weights of
/// the next grid.
pub fn estimate_transitions<T: Scalar>(
    params: &TwoFactorParams<T>,
    grids: &[Codebook<T>],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<TransitionMatrix<T>>> {
    params.validate()?;
    if grids.len() != params.n {
        return Err(Error::InvalidTree(format!("{} grids for {} dates", grids.len(), params.n)));
    }
    if n_samples == 0 {
        return Err(Error::EmptySamples);
    }
    let mut stream = PathStream::new(params, n_samples, seed);
    let mut cells = project(&NearestSearch::new(&grids[0]), stream.states());
    let mut out = Vec::with_capacity(params.n.saturating_sub(1));
    for k in 0..params.n.saturating_sub(1) {
        stream.advance();
        let next = project(&NearestSearch::new(&grids[k + 1]), stream.states());
        let (rows, cols) = (grids[k].len(), grids[k + 1].len());
        let mut counts = vec![0u64; rows * cols];
        let mut col_counts = vec![0u64; cols];
        for (&i, &j) in cells.iter().zip(&next) {
            counts[i * cols + j] += 1;
            col_counts[j] += 1;
        }
        let mut data = vec![T::zero(); rows * cols];
        let mut empty_rows = 0;
        for i in 0..rows {
            let row = &counts[i * cols..(i + 1) * cols];
            let (total, source) = match row.iter().sum::<u64>() {
                0 => {
                    empty_rows += 1;
                    (n_samples as u64, col_counts.as_slice())
                }
                t => (t, row),
            };
            for j in 0..cols {
                data[i * cols + j] = T::of(source[j] as f64 / total as f64);
            }
        }
        if empty_rows > 0 {
            log::warn!("transition {k}: {empty_rows} unvisited rows set to the next grid's weights");
        }
        out.push(TransitionMatrix::new(rows, cols, data)?);
        cells = next;
    }
    Ok(out)
}

fn project<T: Scalar>(search: &NearestSearch<T>, states: &[T]) -> Vec<usize> {
    states
        .par_chunks(STATE_DIM * 4096)
        .flat_map_iter(|chunk| chunk.chunks_exact(STATE_DIM).map(|y| search.nearest(y).0))
        .collect()
}

/// Dense storage of one value per pair `0 <= lo <= hi <= m`.
fn tri_len(m: usize) -> usize {
    (m + 1) * (m + 2) / 2
}

fn tri_index(q: IntegerConstraints, m: usize) -> usize {
    q.lo * (m + 1) - q.lo * q.lo.saturating_sub(1) / 2 + (q.hi - q.lo)
}

/// Quantized value functions `p̂_k(Q, y^i_k)` and the min-argmax actions.
///
/// Layer `k` is indexed by residual constraints `Q` with `Q.hi <= n − k`;
/// only the pairs visited by the recursion are filled.
#[derive(Debug, Clone, PartialEq)]
pub struct DpTable<T> {
    n: usize,
    values: Vec<Vec<Vec<T>>>,
    actions: Vec<Vec<Vec<u8>>>,
}

impl<T: Scalar> DpTable<T> {
    pub fn n(&self) -> usize {
        self.n
    }

    /// `p̂_k(q, ·)` on grid `k`; date `n` is the zero terminal layer.
    pub fn values(&self, k: usize, q: IntegerConstraints) -> Option<&[T]> {
        let layer = self.values.get(k)?;
        if q.lo > q.hi || q.hi > self.n - k {
            return None;
        }
        let v = &layer[tri_index(q, self.n - k)];
        (!v.is_empty()).then_some(v.as_slice())
    }

    /// Action at date `k < n`, grid point `i`, residual constraints `q`.
    pub fn action(&self, k: usize, q: IntegerConstraints, i: usize) -> Option<u8> {
        let layer = self.actions.get(k)?;
        if q.lo > q.hi || q.hi > self.n - k {
            return None;
        }
        layer[tri_index(q, self.n - k)].get(i).copied()
    }

    /// Residual constraints filled at date `k`.
    pub fn constraints(&self, k: usize) -> Vec<IntegerConstraints> {
        let m = self.n - k;
        let mut out = Vec::new();
        for lo in 0..=m {
            for hi in lo..=m {
                let q = IntegerConstraints { lo, hi };
                if !self.values[k][tri_index(q, m)].is_empty() {
                    out.push(q);
                }
            }
        }
        out
    }

    pub fn policy(&self) -> Policy {
        Policy {
            n: self.n,
            actions: self.actions.clone(),
        }
    }
}

/// Bang-bang exercise rule: `{0, 1}` purchase per date, grid point and
/// residual constraint pair.
#[derive(Debug, Clone, PartialEq)]
pub struct Policy {
    n: usize,
    actions: Vec<Vec<Vec<u8>>>,
}

impl Policy {
    pub fn action(&self, k: usize, q: IntegerConstraints, i: usize) -> Option<u8> {
        if k >= self.n || q.lo > q.hi || q.hi > self.n - k {
            return None;
        }
        self.actions[k][tri_index(q, self.n - k)].get(i).copied()
    }

    /// Every stored action.
    pub fn iter(&self) -> impl Iterator<Item = u8> + '_ {
        self.actions.iter().flatten().flatten().copied()
    }
}

/// Backward recursion over the given constraint sets (`sets[k]` at date `k`),
/// which must be closed under the bang-bang updates.
fn solve<T: Scalar>(tree: &QuantTree<T>, sets: &[Vec<IntegerConstraints>]) -> Result<DpTable<T>> {
    let n = tree.n();
    let mut values: Vec<Vec<Vec<T>>> = (0..=n).map(|k| vec![Vec::new(); tri_len(n - k)]).collect();
    let mut actions: Vec<Vec<Vec<u8>>> = (0..n).map(|k| vec![Vec::new(); tri_len(n - k)]).collect();
    values[n][0] = vec![T::zero()];
    for k in (0..n).rev() {
        let size = tree.grids[k].len();
        let rem = n - k - 1;
        // continuation E(p̂_{k+1}(Q', Ŷ_{k+1}) | Ŷ_k = y^i) for every filled Q'
        let next = &values[k + 1];
        let theta: Vec<Vec<T>> = if k + 1 == n {
            vec![vec![T::zero(); size]]
        } else {
            let p = &tree.transitions[k];
            next.par_iter()
                .map(|v| if v.is_empty() { Vec::new() } else { p.apply(v) })
                .collect()
        };
        let pay = &tree.payoffs[k];
        let layer: Vec<(usize, Vec<T>, Vec<u8>)> = sets[k]
            .par_iter()
            .map(|&q| {
                let (a0, a1) = q.admissible_actions(rem);
                assert!(a0 <= 1 && a1 <= 1, "non bang-bang action set at date {k}");
                let c0 = &theta[tri_index(q.chi(a0, rem), rem)];
                let c1 = &theta[tri_index(q.chi(a1, rem), rem)];
                assert!(
                    !c0.is_empty() && !c1.is_empty(),
                    "constraint set at date {} is not closed",
                    k + 1
                );
                let mut vals = Vec::with_capacity(size);
                let mut acts = Vec::with_capacity(size);
                for i in 0..size {
                    let v0 = T::of_usize(a0) * pay[i] + c0[i];
                    let v1 = T::of_usize(a1) * pay[i] + c1[i];
                    // smallest maximizer
                    if v1 > v0 {
                        vals.push(v1);
                        acts.push(a1 as u8);
                    } else {
                        vals.push(v0);
                        acts.push(a0 as u8);
                    }
                }
                (tri_index(q, n - k), vals, acts)
            })
            .collect();
        for (idx, v, a) in layer {
            values[k][idx] = v;
            actions[k][idx] = a;
        }
    }
    if values.iter().flatten().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite value in the quantized recursion".into()));
    }
    Ok(DpTable { n, values, actions })
}

fn root_value<T: Scalar>(tree: &QuantTree<T>, table: &DpTable<T>, q: IntegerConstraints) -> T {
    let v = table.values(0, q).expect("root constraint is filled");
    tree.root_weights.iter().zip(v).map(|(w, x)| *w * *x).sum()
}

/// Premium of integer constraints `q0` on the quantized tree, with the full
/// table of value functions over the reachable residual constraints.
pub fn quantized_dp_price<T: Scalar>(tree: &QuantTree<T>, q0: IntegerConstraints) -> Result<(T, DpTable<T>)> {
    let n = tree.n();
    if !q0.in_triangle(n) {
        return Err(Error::OutsideTriangle {
            lo: q0.lo as f64,
            hi: q0.hi as f64,
            n,
        });
    }
    let sets = (0..n)
        .map(|k| crate::contracts::reachable_set(q0, k, n))
        .collect::<Result<Vec<_>>>()?;
    let table = solve(tree, &sets)?;
    Ok((root_value(tree, &table, q0), table))
}

/// Real-valued constraints go through [`quantized_dp_price`] when integral
/// and through affine interpolation of the integer surface otherwise.
pub fn quantized_price<T: Scalar>(tree: &QuantTree<T>, q: &GlobalConstraints<T>) -> Result<T> {
    if !q.in_triangle(tree.n()) {
        return Err(Error::OutsideTriangle {
            lo: q.lo.to_f64_lossy(),
            hi: q.hi.to_f64_lossy(),
            n: tree.n(),
        });
    }
    match IntegerConstraints::try_from_real(q) {
        Ok(qi) => Ok(quantized_dp_price(tree, qi)?.0),
        Err(_) => interpolate_on_tile(&premium_surface(tree)?.0, q),
    }
}

/// Premium at every integer vertex of `T⁺(n)` from one backward pass over
/// all residual pairs; also returns the table.
pub fn premium_surface<T: Scalar>(tree: &QuantTree<T>) -> Result<(PremiumSurface<T>, DpTable<T>)> {
    let n = tree.n();
    let sets: Vec<Vec<IntegerConstraints>> = (0..n)
        .map(|k| PremiumSurface::<T>::vertices(n - k).map(|(lo, hi)| IntegerConstraints { lo, hi }).collect())
        .collect();
    let table = solve(tree, &sets)?;
    let surface = PremiumSurface::from_fn(n, |lo, hi| root_value(tree, &table, IntegerConstraints { lo, hi }));
    Ok((surface, table))
}

/// Monte Carlo value of a policy on fresh model paths.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyValuation<T> {
    pub mc_value: T,
    pub std_err: T,
    pub n_paths: usize,
    /// Smallest and largest total purchase over all paths.
    pub min_total: usize,
    pub max_total: usize,
}

/// Applies the min-argmax policy of `table` along `n_paths` exact model
/// paths: states are projected on the grids to look up actions, payoffs are
/// taken at the exact states.
pub fn extract_and_value_policy<T: Scalar>(
    params: &TwoFactorParams<T>,
    tree: &QuantTree<T>,
    table: &DpTable<T>,
    q0: IntegerConstraints,
    n_paths: usize,
    seed: u64,
) -> Result<(Policy, PolicyValuation<T>)> {
    let n = tree.n();
    if params.n != n || table.n() != n {
        return Err(Error::InvalidTree("model, tree and table disagree on the number of dates".into()));
    }
    if n_paths == 0 {
        return Err(Error::EmptySamples);
    }
    if table.values(0, q0).is_none() {
        return Err(Error::ContractViolation(format!("table was not computed for ({}, {})", q0.lo, q0.hi)));
    }
    let policy = table.policy();
    let mut stream = PathStream::new(params, n_paths, seed);
    let mut residual = vec![q0; n_paths];
    let mut bought = vec![0usize; n_paths];
    let mut value = vec![T::zero(); n_paths];
    for k in 0..n {
        let search = NearestSearch::new(&tree.grids[k]);
        let rem = n - k - 1;
        let policy = &policy;
        stream
            .states()
            .par_chunks(STATE_DIM * 4096)
            .zip(residual.par_chunks_mut(4096))
            .zip(bought.par_chunks_mut(4096))
            .zip(value.par_chunks_mut(4096))
            .for_each(|(((states, res), tot), val)| {
                for (s, y) in states.chunks_exact(STATE_DIM).enumerate() {
                    let i = search.nearest(y).0;
                    let x = policy
                        .action(k, res[s], i)
                        .expect("residual constraints stay in the reachable set") as usize;
                    if x == 1 {
                        val[s] += params.payoff(k, FactorState::new(y[0], y[1]));
                    }
                    tot[s] += x;
                    res[s] = res[s].chi(x, rem);
                }
            });
        if k + 1 < n {
            stream.advance();
        }
    }
    let min_total = *bought.iter().min().expect("non-empty");
    let max_total = *bought.iter().max().expect("non-empty");
    assert!(
        min_total >= q0.lo && max_total <= q0.hi,
        "policy broke the global constraints: totals in [{min_total}, {max_total}]"
    );
    let m = T::of_usize(n_paths);
    let mean = value.iter().copied().sum::<T>() / m;
    let var = if n_paths > 1 {
        value.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / T::of_usize(n_paths - 1)
    } else {
        T::zero()
    };
    Ok((
        policy,
        PolicyValuation {
            mc_value: mean,
            std_err: (var / m).sqrt(),
            n_paths,
            min_total,
            max_total,
        },
    ))
}

/// Sample sizes and seeds for a full tree build.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TreeOptions {
    pub grid: GridOptions,
    pub transition_samples: usize,
    pub transition_seed: u64,
    pub payoff_mode: PayoffMode,
}

impl TreeOptions {
    pub fn new(grid_size: usize, n_samples: usize, seed: u64) -> Self {
        Self {
            grid: GridOptions::new(grid_size, n_samples, seed),
            transition_samples: n_samples,
            transition_seed: seed.wrapping_add(1),
            payoff_mode: PayoffMode::default(),
        }
    }
}

/// Grids, transitions and payoffs in one go.
pub fn build_tree<T: Scalar>(
    params: &TwoFactorParams<T>,
    opts: &TreeOptions,
) -> Result<(QuantTree<T>, Vec<OptimizerReport<T>>)> {
    let (grids, reports) = build_grids(params, &opts.grid)?;
    Ok((tree_from_grids(params, grids, opts)?, reports))
}

/// Transitions and payoffs on grids already built with `opts.grid`.
pub fn tree_from_grids<T: Scalar>(
    params: &TwoFactorParams<T>,
    grids: Vec<Codebook<T>>,
    opts: &TreeOptions,
) -> Result<QuantTree<T>> {
    let transitions = estimate_transitions(params, &grids, opts.transition_samples, opts.transition_seed)?;
    let mut tree = QuantTree::from_model(params, grids, transitions, opts.payoff_mode)?;
    tree.manifest = Some(BuildManifest {
        params: TwoFactorParams {
            alpha1: params.alpha1.to_f64_lossy(),
            alpha2: params.alpha2.to_f64_lossy(),
            sigma1: params.sigma1.to_f64_lossy(),
            sigma2: params.sigma2.to_f64_lossy(),
            rho: params.rho.to_f64_lossy(),
            rate: params.rate.to_f64_lossy(),
            horizon: params.horizon.to_f64_lossy(),
            n: params.n,
            forward: params.forward.iter().map(|x| x.to_f64_lossy()).collect(),
            strikes: params.strikes.iter().map(|x| x.to_f64_lossy()).collect(),
        },
        grid_size: opts.grid.grid_size,
        grid_samples: opts.grid.n_samples,
        grid_seed: opts.grid.seed,
        transition_samples: opts.transition_samples,
        transition_seed: opts.transition_seed,
        optimizer: opts.grid.optimizer,
        payoff_mode: opts.payoff_mode,
        transition_method: "exact joint samples".into(),
    });
    Ok(tree)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::contracts::reachable_set;
    use crate::oracle::price_lattice_bruteforce;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pairs(n: usize) -> impl Iterator<Item = IntegerConstraints> {
        PremiumSurface::<f64>::vertices(n).map(|(lo, hi)| IntegerConstraints { lo, hi })
    }

    fn deterministic(payoffs: &[f64]) -> QuantTree<f64> {
        let n = payoffs.len();
        let origin = || Codebook::new(2, vec![0.0, 0.0]).unwrap();
        QuantTree::new(
            vec![origin(); n],
            vec![TransitionMatrix::identity(1); n - 1],
            payoffs.iter().map(|&v| vec![v]).collect(),
        )
        .unwrap()
    }

    fn one_step() -> QuantTree<f64> {
        let grid = Codebook::scalar(&[0.0, 1.0, 2.0])
            .unwrap()
            .with_weights(vec![0.2, 0.3, 0.5])
            .unwrap();
        QuantTree::new(vec![grid], vec![], vec![vec![-1.0, 0.5, 2.0]]).unwrap()
    }

    #[test]
    fn one_date_examples() {
        let tree = one_step();
        let (call, _) = quantized_dp_price(&tree, IntegerConstraints { lo: 0, hi: 1 }).unwrap();
        assert!((call - (0.3 * 0.5 + 0.5 * 2.0)).abs() < 1e-15);
        let (forced, _) = quantized_dp_price(&tree, IntegerConstraints { lo: 1, hi: 1 }).unwrap();
        assert!((forced - (-0.2 + 0.15 + 1.0)).abs() < 1e-15);
    }

    #[test]
    fn deterministic_knapsack() {
        let tree = deterministic(&[3.0, -1.0, 2.0]);
        let price = |lo, hi| quantized_dp_price(&tree, IntegerConstraints { lo, hi }).unwrap().0;
        assert_eq!(price(2, 2), 5.0);
        assert_eq!(price(0, 3), 5.0);
        assert_eq!(price(3, 3), 4.0);
        assert_eq!(price(0, 0), 0.0);
    }

    #[test]
    fn rejects_bad_constraints() {
        let tree = deterministic(&[1.0, 1.0]);
        assert!(quantized_dp_price(&tree, IntegerConstraints { lo: 0, hi: 3 }).is_err());
        let q = GlobalConstraints::new(0.5, 1.5).unwrap();
        assert!((quantized_price(&tree, &q).unwrap() - 1.5).abs() < 1e-12);
    }

    #[test]
    fn matches_bruteforce_on_random_trees() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        for _ in 0..200 {
            let n = rng.random_range(1..=4);
            let tree = QuantTree::<f64>::random(n, 3, (-1.0, 1.0), &mut rng);
            let lattice = tree.to_lattice().unwrap();
            let (surface, _) = premium_surface(&tree).unwrap();
            for q in pairs(n) {
                let (dp, table) = quantized_dp_price(&tree, q).unwrap();
                let brute = price_lattice_bruteforce(&lattice, q).unwrap();
                assert!((dp - brute).abs() < 1e-12, "{q:?}: {dp} vs {brute}");
                assert!((surface.value(q.lo, q.hi).unwrap() - dp).abs() < 1e-12);
                assert!(table.policy().iter().all(|a| a <= 1));
            }
        }
    }

    #[test]
    fn table_layers_match_reachable_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tree = QuantTree::<f64>::random(6, 3, (-1.0, 1.0), &mut rng);
        let q0 = IntegerConstraints { lo: 2, hi: 4 };
        let (_, table) = quantized_dp_price(&tree, q0).unwrap();
        for k in 0..6 {
            let mut expected = reachable_set(q0, k, 6).unwrap();
            expected.sort();
            assert_eq!(table.constraints(k), expected);
            assert!(table.values(k, IntegerConstraints { lo: 0, hi: 0 }).is_none_or(|v| v.iter().all(|x| *x == 0.0)));
        }
    }

    #[test]
    fn corner_identities_and_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let tree = QuantTree::<f64>::random(8, 4, (-1.0, 1.5), &mut rng);
        let (surface, _) = premium_surface(&tree).unwrap();
        assert_eq!(surface.value(0, 0).unwrap(), 0.0);
        assert!((surface.value(8, 8).unwrap() - tree.swap_value()).abs() < 1e-12);
        assert!((surface.value(0, 8).unwrap() - tree.call_strip_value()).abs() < 1e-12);
        let shape = surface.shape_report(1e-9).unwrap();
        assert_eq!(shape.concavity_violations + shape.monotonicity_violations, 0);
    }

    fn small_model(sigma: f64, strike: f64, n: usize) -> TwoFactorParams<f64> {
        TwoFactorParams::flat((0.21, 5.4), (sigma * 0.36, sigma * 1.11), -0.11, 0.0, n as f64 / 365.0, n, 20.0, strike)
            .unwrap()
    }

    #[test]
    fn deterministic_model_collapses() {
        let p = small_model(0.0, 19.0, 3);
        let opts = TreeOptions::new(5, 100, 1);
        let (tree, _) = build_tree(&p, &opts).unwrap();
        for g in tree.grids() {
            assert_eq!(g.points(), &[0.0, 0.0]);
        }
        for t in tree.transitions() {
            assert_eq!(t, &TransitionMatrix::identity(1));
        }
        let (price, _) = quantized_dp_price(&tree, IntegerConstraints { lo: 2, hi: 2 }).unwrap();
        assert!((price - 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_point_grids_sit_at_the_mean() {
        let p = small_model(1.0, 20.0, 5);
        let (grids, _) = build_grids(&p, &GridOptions::new(1, 100_000, 4)).unwrap();
        for (k, g) in grids.iter().enumerate() {
            let c = p.covariance(p.time(k));
            let tol = [5.0 * (c[0][0] / 1e5).sqrt(), 5.0 * (c[1][1] / 1e5).sqrt()];
            assert!(g.points()[0].abs() <= tol[0] && g.points()[1].abs() <= tol[1], "date {k}: {:?}", g.points());
        }
    }

    #[test]
    fn larger_grids_quantize_better() {
        let p = small_model(1.0, 20.0, 6);
        let (small, rs) = build_grids(&p, &GridOptions::new(10, 50_000, 8)).unwrap();
        let (large, rl) = build_grids(&p, &GridOptions::new(50, 50_000, 8)).unwrap();
        assert_eq!(small.len(), 6);
        assert!(large.iter().skip(1).all(|g| g.len() == 50));
        for (a, b) in rs.iter().zip(&rl) {
            assert!(b.final_distortion < a.final_distortion);
        }
    }

    #[test]
    fn transition_rows_are_stochastic_and_decorrelate() {
        let mut p = small_model(1.0, 20.0, 4);
        let opts = GridOptions::new(8, 20_000, 1);
        let (grids, _) = build_grids(&p, &opts).unwrap();
        let trans = estimate_transitions(&p, &grids, 20_000, 2).unwrap();
        for t in &trans {
            for i in 0..t.rows() {
                assert!((t.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        // very fast mean reversion: consecutive states are nearly independent
        p.alpha1 = 1e6;
        p.alpha2 = 1e6;
        p.sigma1 = 0.36 * (2.0e6f64).sqrt();
        p.sigma2 = 1.11 * (2.0e6f64).sqrt();
        let (grids, _) = build_grids(&p, &GridOptions::new(5, 100_000, 3)).unwrap();
        let n_samples = 1_000_000;
        let trans = estimate_transitions(&p, &grids, n_samples, 4).unwrap();
        let tree = QuantTree::from_model(&p, grids, trans, PayoffMode::GridPoint).unwrap();
        let marginals = tree.marginals();
        for (k, t) in tree.transitions().iter().enumerate().skip(1) {
            for i in 0..t.rows() {
                let tv: f64 = t.row(i).iter().zip(&marginals[k + 1]).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
                assert!(tv <= 0.05, "date {k} row {i}: tv {tv}");
            }
        }
    }

    #[test]
    fn policy_on_deterministic_model() {
        let mut p = small_model(0.0, 0.0, 4);
        p.strikes = vec![19.0, 17.0, 21.0, 18.0];
        let (tree, _) = build_tree(&p, &TreeOptions::new(3, 100, 1)).unwrap();
        let q0 = IntegerConstraints { lo: 2, hi: 2 };
        let (price, table) = quantized_dp_price(&tree, q0).unwrap();
        let (policy, val) = extract_and_value_policy(&p, &tree, &table, q0, 10, 5).unwrap();
        assert_eq!(price, 5.0);
        assert_eq!(val.mc_value, 5.0);
        assert_eq!(val.std_err, 0.0);
        // payoffs (1, 3, -1, 2): buy at dates 1 and 3
        let q = |lo, hi| IntegerConstraints { lo, hi };
        assert_eq!(policy.action(0, q(2, 2), 0), Some(0));
        assert_eq!(policy.action(1, q(2, 2), 0), Some(1));
        assert_eq!(policy.action(2, q(1, 1), 0), Some(0));
        assert_eq!(policy.action(3, q(1, 1), 0), Some(1));
    }

    #[test]
    fn policy_saturates_with_nonnegative_payoffs() {
        let p = small_model(1.0, 0.0, 8);
        let (tree, _) = build_tree(&p, &TreeOptions::new(10, 20_000, 6)).unwrap();
        for (lo, hi) in [(0, 5), (2, 6), (8, 8), (0, 8)] {
            let q0 = IntegerConstraints { lo, hi };
            let (_, table) = quantized_dp_price(&tree, q0).unwrap();
            let (policy, val) = extract_and_value_policy(&p, &tree, &table, q0, 10_000, 7).unwrap();
            assert!(policy.iter().all(|a| a <= 1));
            assert_eq!((val.min_total, val.max_total), (hi, hi));
        }
    }

    #[test]
    fn persistence_round_trip() {
        let p = small_model(1.0, 20.0, 3);
        let (tree, _) = build_tree(&p, &TreeOptions::new(4, 1000, 2)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        tree.save(dir.path()).unwrap();
        let loaded = QuantTree::<f64>::load(dir.path()).unwrap();
        assert_eq!(loaded, tree);
    }

    #[test]
    fn grid_build_is_reproducible() {
        let p = small_model(1.0, 20.0, 4);
        let opts = TreeOptions::new(6, 5000, 11);
        assert_eq!(build_tree(&p, &opts).unwrap().0, build_tree(&p, &opts).unwrap().0);
    }
}
