//! Vector quantization of probability distributions on `ℝ^d`.
//!
//! A [`Codebook`] is a finite grid with optional cell weights. Samples are
//! passed as flat row-major slices of length `n · d`.

use std::collections::HashSet;
use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal;
use crate::scalar::Scalar;

const WEIGHT_TOLERANCE: f64 = 1e-9;
const CHUNK: usize = 1 << 15;
const BINARY_MAGIC: &[u8; 4] = b"SWCB";

/// Finite grid `{y_1, …, y_N} ⊂ ℝ^d` with optional probability weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook<T> {
    dim: usize,
    points: Vec<T>,
    weights: Option<Vec<T>>,
}

impl<T: Scalar> Codebook<T> {
    pub fn new(dim: usize, points: Vec<T>) -> Result<Self> {
        if dim == 0 || points.is_empty() || points.len() % dim != 0 {
            return Err(Error::InvalidCodebook(format!(
                "{} coordinates do not form points of dimension {dim}",
                points.len()
            )));
        }
        if points.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidCodebook("non-finite coordinate".into()));
        }
        let cb = Self { dim, points, weights: None };
        let mut seen = HashSet::with_capacity(cb.len());
        for i in 0..cb.len() {
            if !seen.insert(point_key(cb.point(i))) {
                return Err(Error::InvalidCodebook(format!("point {i} is a duplicate")));
            }
        }
        Ok(cb)
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::InvalidCodebook("rows of unequal length".into()));
        }
        Self::new(dim, rows.concat())
    }

    /// 1-D codebook.
    pub fn scalar(points: &[T]) -> Result<Self> {
        Self::new(1, points.to_vec())
    }

    pub fn with_weights(mut self, weights: Vec<T>) -> Result<Self> {
        if weights.len() != self.len() {
            return Err(Error::InvalidCodebook(format!(
                "{} weights for {} points",
                weights.len(),
                self.len()
            )));
        }
        if weights.iter().any(|w| !(*w >= T::zero()) || !w.is_finite()) {
            return Err(Error::InvalidCodebook("weights must be finite and nonnegative".into()));
        }
        let total: T = weights.iter().copied().sum();
        if (total - T::one()).abs() > T::of(WEIGHT_TOLERANCE) {
            return Err(Error::InvalidCodebook(format!("weights sum to {total}")));
        }
        self.weights = Some(weights);
        Ok(self)
    }

    pub fn without_weights(mut self) -> Self {
        self.weights = None;
        self
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.points.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, i: usize) -> &[T] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[T] {
        &self.points
    }

    pub fn weights(&self) -> Option<&[T]> {
        self.weights.as_deref()
    }

    /// Cell assignment and weights of `samples` (empirical cell frequencies).
    pub fn estimate_weights(self, samples: &[T]) -> Result<Self> {
        let n = sample_count(samples, self.dim)?;
        let search = NearestSearch::new(&self);
        let mut counts = vec![0usize; self.len()];
        for y in samples.chunks_exact(self.dim) {
            counts[search.nearest(y).0] += 1;
        }
        let w = counts.iter().map(|&c| T::of_usize(c) / T::of_usize(n)).collect();
        self.with_weights(w)
    }

    /// CSV layout: `d,N`, then `N` rows of `d` coordinates, then optionally
    /// `N` rows holding one weight each.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wr = csv::WriterBuilder::new().flexible(true).from_writer(w);
        wr.write_record([self.dim.to_string(), self.len().to_string()])?;
        for i in 0..self.len() {
            wr.write_record(self.point(i).iter().map(|x| x.to_string()))?;
        }
        if let Some(weights) = &self.weights {
            for x in weights {
                wr.write_record([x.to_string()])?;
            }
        }
        wr.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new()
            .has_headers(false)
            .flexible(true)
            .comment(Some(b'#'))
            .from_reader(r);
        let mut records = rd.records();
        let header = records
            .next()
            .ok_or_else(|| Error::Parse("empty codebook file".into()))??;
        if header.len() != 2 {
            return Err(Error::Parse("codebook header must be `d,N`".into()));
        }
        let dim: usize = parse_field(&header[0])?;
        let count: usize = parse_field(&header[1])?;
        let mut points = Vec::with_capacity(dim * count);
        for _ in 0..count {
            let rec = records
                .next()
                .ok_or_else(|| Error::Parse(format!("expected {count} codebook rows")))??;
            if rec.len() != dim {
                return Err(Error::Parse(format!("row of length {} in a {dim}-d codebook", rec.len())));
            }
            for f in rec.iter() {
                points.push(parse_field(f)?);
            }
        }
        let mut weights = Vec::new();
        for rec in records {
            let rec = rec?;
            if rec.len() != 1 {
                return Err(Error::Parse("weight rows hold a single value".into()));
            }
            weights.push(parse_field(&rec[0])?);
        }
        let cb = Self::new(dim, points)?;
        match weights.len() {
            0 => Ok(cb),
            m if m == count => cb.with_weights(weights),
            m => Err(Error::Parse(format!("{m} weights for {count} points"))),
        }
    }

    /// Binary layout (little endian): magic `SWCB`, `u64 d`, `u64 N`,
    /// `u8 has_weights`, then `N·d` coordinates and optionally `N` weights as `f64`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&(self.dim as u64).to_le_bytes())?;
        w.write_all(&(self.len() as u64).to_le_bytes())?;
        w.write_all(&[u8::from(self.weights.is_some())])?;
        for x in self.points.iter().chain(self.weights.iter().flatten()) {
            w.write_all(&x.to_f64_lossy().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::Parse("not a binary codebook".into()));
        }
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let dim = u64::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let count = u64::from_le_bytes(word) as usize;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        let mut read_values = |m: usize| -> Result<Vec<T>> {
            (0..m)
                .map(|_| {
                    r.read_exact(&mut word)?;
                    Ok(T::of(f64::from_le_bytes(word)))
                })
                .collect()
        };
        let points = read_values(dim * count)?;
        let cb = Self::new(dim, points)?;
        match flag[0] {
            0 => Ok(cb),
            1 => cb.with_weights(read_values(count)?),
            _ => Err(Error::Parse("bad weight flag".into())),
        }
    }
}

fn parse_field<F: std::str::FromStr>(s: &str) -> Result<F> {
    s.trim()
        .parse()
        .map_err(|_| Error::Parse(format!("cannot parse `{s}`")))
}

fn point_key<T: Scalar>(p: &[T]) -> Vec<u64> {
    // +0.0 and -0.0 are the same point
    p.iter().map(|x| (x.to_f64_lossy() + 0.0).to_bits()).collect()
}

fn sample_count<T>(samples: &[T], dim: usize) -> Result<usize> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    if samples.len() % dim != 0 {
        return Err(Error::DimensionMismatch {
            expected: dim,
            got: samples.len() % dim,
        });
    }
    Ok(samples.len() / dim)
}

#[inline]
fn sq_dist<T: Scalar>(a: &[T], b: &[T]) -> T {
    let mut acc = T::zero();
    for (x, y) in a.iter().zip(b) {
        let d = *x - *y;
        acc += d * d;
    }
    acc
}

/// Index of the point of `cb` closest to `y`; the smallest index wins ties.
pub fn nearest_index<T: Scalar>(y: &[T], cb: &Codebook<T>) -> Result<usize> {
    if y.len() != cb.dim {
        return Err(Error::DimensionMismatch {
            expected: cb.dim,
            got: y.len(),
        });
    }
    Ok(nearest_linear(y, &cb.points, cb.dim).0)
}

#[inline]
fn nearest_linear<T: Scalar>(y: &[T], points: &[T], dim: usize) -> (usize, T) {
    let mut best = (0, T::infinity());
    for (i, p) in points.chunks_exact(dim).enumerate() {
        let d = sq_dist(y, p);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// Exact nearest-neighbour search over a fixed set of points, pruned on the
/// first coordinate. Returns the same index as [`nearest_index`], ties
/// included.
#[derive(Debug, Clone)]
pub struct NearestSearch<T> {
    dim: usize,
    /// points sorted by first coordinate
    sorted: Vec<T>,
    /// original index of each sorted point
    order: Vec<usize>,
}

impl<T: Scalar> NearestSearch<T> {
    pub fn new(cb: &Codebook<T>) -> Self {
        Self::from_points(&cb.points, cb.dim)
    }

    pub fn from_points(points: &[T], dim: usize) -> Self {
        let n = points.len() / dim;
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            points[a * dim]
                .partial_cmp(&points[b * dim])
                .expect("finite coordinates")
                .then(a.cmp(&b))
        });
        let mut sorted = Vec::with_capacity(points.len());
        for &i in &order {
            sorted.extend_from_slice(&points[i * dim..(i + 1) * dim]);
        }
        Self { dim, sorted, order }
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    /// `(index, squared distance)` of the nearest point.
    #[inline]
    pub fn nearest(&self, y: &[T]) -> (usize, T) {
        let dim = self.dim;
        let n = self.order.len();
        let x0 = y[0];
        let key = |s: usize| self.sorted[s * dim];
        // first sorted position with key >= x0
        let (mut lo, mut hi) = (0, n);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if key(mid) < x0 {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        let (mut up, mut down) = (lo, lo);
        let mut best_d = T::infinity();
        let mut best_i = usize::MAX;
        let consider = |s: usize, best_d: &mut T, best_i: &mut usize| {
            let d = sq_dist(y, &self.sorted[s * dim..(s + 1) * dim]);
            let i = self.order[s];
            if d < *best_d || (d == *best_d && i < *best_i) {
                *best_d = d;
                *best_i = i;
            }
        };
        loop {
            let mut progressed = false;
            if up < n {
                let gap = key(up) - x0;
                if gap * gap <= best_d {
                    consider(up, &mut best_d, &mut best_i);
                    up += 1;
                    progressed = true;
                } else {
                    up = n;
                }
            }
            if down > 0 {
                let gap = x0 - key(down - 1);
                if gap * gap <= best_d {
                    consider(down - 1, &mut best_d, &mut best_i);
                    down -= 1;
                    progressed = true;
                } else {
                    down = 0;
                }
            }
            if !progressed {
                break;
            }
        }
        (best_i, best_d)
    }

    /// Like [`nearest`](Self::nearest), plus the squared distance to the
    /// runner-up (infinite when there is a single point).
    fn nearest_two(&self, y: &[T]) -> (usize, T, T) {
        let dim = self.dim;
        let n = self.order.len();
        let x0 = y[0];
        let key = |s: usize| self.sorted[s * dim];
        let (mut lo, mut hi) = (0, n);
        while lo < hi {
            let mid = (lo + hi) / 2;
            if key(mid) < x0 {
                lo = mid + 1;
            } else {
                hi = mid;
            }
        }
        let (mut up, mut down) = (lo, lo);
        // (best index, best distance, runner-up distance)
        let mut st = (usize::MAX, T::infinity(), T::infinity());
        let consider = |s: usize, st: &mut (usize, T, T)| {
            let d = sq_dist(y, &self.sorted[s * dim..(s + 1) * dim]);
            let i = self.order[s];
            if d < st.1 || (d == st.1 && i < st.0) {
                *st = (i, d, st.1);
            } else if d < st.2 {
                st.2 = d;
            }
        };
        // prune on the runner-up so that it is exact as well
        loop {
            let mut progressed = false;
            if up < n {
                let gap = key(up) - x0;
                if gap * gap <= st.2 {
                    consider(up, &mut st);
                    up += 1;
                    progressed = true;
                } else {
                    up = n;
                }
            }
            if down > 0 {
                let gap = x0 - key(down - 1);
                if gap * gap <= st.2 {
                    consider(down - 1, &mut st);
                    down -= 1;
                    progressed = true;
                } else {
                    down = 0;
                }
            }
            if !progressed {
                break;
            }
        }
        st
    }
}

/// `L^p` quantization error `(mean_y min_i |y − y_i|^p)^{1/p}`.
pub fn distortion<T: Scalar>(samples: &[T], cb: &Codebook<T>, p: T) -> Result<T> {
    let n = sample_count(samples, cb.dim)?;
    if !(p >= T::one()) {
        return Err(Error::ContractViolation(format!("distortion exponent {p} < 1")));
    }
    let search = NearestSearch::new(cb);
    let half_p = p / T::of(2.0);
    let two = T::of(2.0);
    let total: T = samples
        .chunks_exact(cb.dim)
        .map(|y| {
            let d2 = search.nearest(y).1;
            if p == two {
                d2
            } else {
                d2.powf(half_p)
            }
        })
        .sum();
    Ok((total / T::of_usize(n)).powf(T::one() / p))
}

/// Outcome of a codebook optimization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerReport<T> {
    pub iterations: usize,
    /// Final quadratic distortion (mean squared distance to the grid).
    pub final_distortion: T,
    pub distortion_history: Vec<T>,
    /// `max_i |E(Y | cell i) − y_i|` at exit.
    pub stationarity_residual: T,
    pub converged: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LloydOptions {
    pub max_iter: usize,
    /// Stop once the relative decrease of the distortion falls below this.
    pub tol: f64,
}

impl Default for LloydOptions {
    fn default() -> Self {
        Self { max_iter: 500, tol: 1e-6 }
    }
}

struct Pass<T> {
    sums: Vec<T>,
    counts: Vec<usize>,
    distortion: T,
}

fn assign_pass<T: Scalar>(samples: &[T], points: &[T], dim: usize) -> Pass<T> {
    let n_points = points.len() / dim;
    let search = NearestSearch::from_points(points, dim);
    // fixed chunking and in-order reduction keep results independent of thread count
    let partials: Vec<Pass<T>> = samples
        .par_chunks(CHUNK * dim)
        .map(|chunk| {
            let mut sums = vec![T::zero(); n_points * dim];
            let mut counts = vec![0usize; n_points];
            let mut total = T::zero();
            for y in chunk.chunks_exact(dim) {
                let (i, d) = search.nearest(y);
                counts[i] += 1;
                total += d;
                for (s, v) in sums[i * dim..(i + 1) * dim].iter_mut().zip(y) {
                    *s += *v;
                }
            }
            Pass { sums, counts, distortion: total }
        })
        .collect();
    reduce_passes(partials, n_points, dim, samples.len() / dim)
}

/// Per-sample state carried across Lloyd sweeps: the assigned point and a
/// lower bound on the distance to every other point. A sample whose
/// assigned point is closer than the bound keeps it without a search.
struct Bounds<T> {
    assigned: Vec<u32>,
    lower: Vec<T>,
    /// Absolute safety margin, far above the rounding accumulated in `lower`.
    slack: T,
}

impl<T: Scalar> Bounds<T> {
    fn new(samples: &[T], dim: usize) -> Self {
        let n = samples.len() / dim;
        let radius = samples.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        Self {
            assigned: vec![0; n],
            // zero bounds force a full search on the first pass
            lower: vec![T::zero(); n],
            slack: T::of(1e-10) * T::of(2.0) * T::of_usize(dim).sqrt() * radius,
        }
    }
}

/// Largest and second largest displacement between two point sets, with the
/// index of the largest.
fn displacement<T: Scalar>(from: &[T], to: &[T], dim: usize) -> (usize, T, T) {
    let mut top = (usize::MAX, T::zero(), T::zero());
    for (i, (a, b)) in from.chunks_exact(dim).zip(to.chunks_exact(dim)).enumerate() {
        let d = sq_dist(a, b).sqrt();
        if d > top.1 {
            top = (i, d, top.1);
        } else if d > top.2 {
            top.2 = d;
        }
    }
    top
}

/// Same result as [`assign_pass`], using and refreshing `bounds`. `moved`
/// is the [`displacement`] of the points since the previous pass.
fn assign_pass_bounded<T: Scalar>(
    samples: &[T],
    points: &[T],
    dim: usize,
    bounds: &mut Bounds<T>,
    moved: Option<(usize, T, T)>,
) -> Pass<T> {
    let n_points = points.len() / dim;
    let search = NearestSearch::from_points(points, dim);
    let slack = bounds.slack;
    let (far, far_shift, other_shift) = moved.unwrap_or((usize::MAX, T::zero(), T::zero()));
    let partials: Vec<Pass<T>> = samples
        .par_chunks(CHUNK * dim)
        .zip(bounds.assigned.par_chunks_mut(CHUNK))
        .zip(bounds.lower.par_chunks_mut(CHUNK))
        .map(|((chunk, assigned), lower)| {
            let mut sums = vec![T::zero(); n_points * dim];
            let mut counts = vec![0usize; n_points];
            let mut total = T::zero();
            for ((y, a), l) in chunk.chunks_exact(dim).zip(assigned.iter_mut()).zip(lower.iter_mut()) {
                let i0 = *a as usize;
                // the other points moved by at most this much
                *l -= if i0 == far { other_shift } else { far_shift };
                let d0 = sq_dist(y, &points[i0 * dim..(i0 + 1) * dim]);
                let (i, d) = if d0.sqrt() < *l - slack {
                    (i0, d0)
                } else {
                    let (i, d, second) = search.nearest_two(y);
                    *a = i as u32;
                    *l = second.sqrt();
                    (i, d)
                };
                counts[i] += 1;
                total += d;
                for (s, v) in sums[i * dim..(i + 1) * dim].iter_mut().zip(y) {
                    *s += *v;
                }
            }
            Pass { sums, counts, distortion: total }
        })
        .collect();
    reduce_passes(partials, n_points, dim, samples.len() / dim)
}

fn reduce_passes<T: Scalar>(partials: Vec<Pass<T>>, n_points: usize, dim: usize, n: usize) -> Pass<T> {
    let mut out = Pass {
        sums: vec![T::zero(); n_points * dim],
        counts: vec![0; n_points],
        distortion: T::zero(),
    };
    for p in partials {
        for (a, b) in out.sums.iter_mut().zip(p.sums) {
            *a += b;
        }
        for (a, b) in out.counts.iter_mut().zip(p.counts) {
            *a += b;
        }
        out.distortion += p.distortion;
    }
    out.distortion /= T::of_usize(n);
    out
}

fn centroid_residual<T: Scalar>(pass: &Pass<T>, points: &[T], dim: usize) -> T {
    let mut worst = T::zero();
    for (i, &c) in pass.counts.iter().enumerate() {
        if c == 0 {
            continue;
        }
        let inv = T::one() / T::of_usize(c);
        let d2: T = (0..dim)
            .map(|j| {
                let diff = pass.sums[i * dim + j] * inv - points[i * dim + j];
                diff * diff
            })
            .sum();
        worst = worst.max(d2.sqrt());
    }
    worst
}

/// Replaces every point by its cell centroid; points with empty cells are
/// re-seeded at the samples farthest from their current grid point.
fn lloyd_update<T: Scalar>(samples: &[T], points: &[T], dim: usize, pass: &Pass<T>) -> Vec<T> {
    let mut next = points.to_vec();
    let mut empty = Vec::new();
    for (i, &c) in pass.counts.iter().enumerate() {
        if c == 0 {
            empty.push(i);
            continue;
        }
        let inv = T::one() / T::of_usize(c);
        for j in 0..dim {
            next[i * dim + j] = pass.sums[i * dim + j] * inv;
        }
    }
    if empty.is_empty() {
        return next;
    }
    log::debug!("lloyd: re-seeding {} empty cells", empty.len());
    let search = NearestSearch::from_points(points, dim);
    let mut far: Vec<(T, usize)> = samples
        .chunks_exact(dim)
        .enumerate()
        .map(|(s, y)| (search.nearest(y).1, s))
        .collect();
    far.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite").then(a.1.cmp(&b.1)));
    let mut taken: HashSet<Vec<u64>> = next.chunks_exact(dim).map(point_key).collect();
    let mut candidates = far.into_iter().filter(|(d, _)| *d > T::zero());
    for i in empty {
        for (_, s) in candidates.by_ref() {
            let y = &samples[s * dim..(s + 1) * dim];
            if taken.insert(point_key(y)) {
                next[i * dim..(i + 1) * dim].copy_from_slice(y);
                break;
            }
        }
    }
    next
}

/// Lloyd I fixed-point iteration on the empirical measure of `samples`.
///
/// The returned codebook carries the empirical weights of its own Voronoi
/// cells. The distortion history is non-increasing: a step that would raise
/// the distortion (rounding noise near a fixed point) is discarded and the
/// run stops.
pub fn lloyd_optimize<T: Scalar>(
    samples: &[T],
    cb0: &Codebook<T>,
    opts: LloydOptions,
) -> Result<(Codebook<T>, OptimizerReport<T>)> {
    let dim = cb0.dim;
    let n = sample_count(samples, dim)?;
    if cb0.len() > n {
        return Err(Error::ContractViolation(format!(
            "{} grid points for {n} samples",
            cb0.len()
        )));
    }
    let tol = T::of(opts.tol);
    let mut points = cb0.points.clone();
    let mut bounds = Bounds::new(samples, dim);
    let mut pass = assign_pass_bounded(samples, &points, dim, &mut bounds, None);
    let mut history = vec![pass.distortion];
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iter {
        let candidate = lloyd_update(samples, &points, dim, &pass);
        let moved = displacement(&points, &candidate, dim);
        // a rejected step ends the run, so the bounds need no rollback
        let next = assign_pass_bounded(samples, &candidate, dim, &mut bounds, Some(moved));
        iterations += 1;
        if next.distortion > pass.distortion {
            converged = true;
            break;
        }
        let decrease = pass.distortion - next.distortion;
        let stalled = decrease <= tol * pass.distortion;
        points = candidate;
        pass = next;
        history.push(pass.distortion);
        if stalled {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("lloyd: no convergence after {iterations} iterations");
    }
    // drop points whose cells could not be re-seeded (fewer distinct samples than points)
    let keep: Vec<usize> = (0..pass.counts.len()).filter(|&i| pass.counts[i] > 0).collect();
    let residual = centroid_residual(&pass, &points, dim);
    let kept_points: Vec<T> = keep
        .iter()
        .flat_map(|&i| points[i * dim..(i + 1) * dim].iter().copied())
        .collect();
    let weights = keep
        .iter()
        .map(|&i| T::of_usize(pass.counts[i]) / T::of_usize(n))
        .collect();
    let cb = Codebook::new(dim, kept_points)?.with_weights(weights)?;
    Ok((
        cb,
        OptimizerReport {
            iterations,
            final_distortion: pass.distortion,
            distortion_history: history,
            stationarity_residual: residual,
            converged,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClvqOptions {
    pub steps: usize,
    /// Step schedule `γ_t = a / (b + t)`.
    pub a: f64,
    /// Defaults to `100 · N` when `None`.
    pub b: Option<f64>,
}

impl Default for ClvqOptions {
    fn default() -> Self {
        Self { steps: 100_000, a: 1.0, b: None }
    }
}

/// Competitive learning vector quantization: each incoming sample pulls its
/// nearest grid point towards itself by `γ_t`.
///
/// `holdout` (possibly empty) is used for the reported distortion, weights
/// and stationarity residual.
pub fn clvq_optimize<T, I, S>(
    stream: I,
    cb0: &Codebook<T>,
    opts: ClvqOptions,
    holdout: &[T],
) -> Result<(Codebook<T>, OptimizerReport<T>)>
where
    T: Scalar,
    I: IntoIterator<Item = S>,
    S: AsRef<[T]>,
{
    let dim = cb0.dim;
    let mut points = cb0.points.clone();
    let a = opts.a;
    let b = opts.b.unwrap_or(100.0 * cb0.len() as f64);
    let mut steps = 0;
    for y in stream.into_iter().take(opts.steps) {
        let y = y.as_ref();
        if y.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: y.len() });
        }
        let (i, _) = nearest_linear(y, &points, dim);
        let gamma = T::of(a / (b + steps as f64));
        for (p, v) in points[i * dim..(i + 1) * dim].iter_mut().zip(y) {
            *p += gamma * (*v - *p);
        }
        steps += 1;
    }
    let cb = Codebook::new(dim, points)?;
    if holdout.is_empty() {
        return Ok((
            cb,
            OptimizerReport {
                iterations: steps,
                final_distortion: T::zero(),
                distortion_history: Vec::new(),
                stationarity_residual: T::zero(),
                converged: true,
            },
        ));
    }
    let n = sample_count(holdout, dim)?;
    let pass = assign_pass(holdout, &cb.points, dim);
    let residual = centroid_residual(&pass, &cb.points, dim);
    let weights = pass.counts.iter().map(|&c| T::of_usize(c) / T::of_usize(n)).collect();
    Ok((
        cb.with_weights(weights)?,
        OptimizerReport {
            iterations: steps,
            final_distortion: pass.distortion,
            distortion_history: vec![pass.distortion],
            stationarity_residual: residual,
            converged: true,
        },
    ))
}

/// Cell probabilities, first moments and quadratic distortion of a sorted
/// 1-D grid under the standard normal law, in closed form.
struct NormalCells<T> {
    mass: Vec<T>,
    /// `∫_cell z φ(z) dz`
    first: Vec<T>,
    distortion: T,
}

fn normal_cells<T: Scalar>(x: &[T]) -> NormalCells<T> {
    let n = x.len();
    let half = T::of(0.5);
    let bounds: Vec<T> = (0..=n)
        .map(|i| match i {
            0 => T::neg_infinity(),
            i if i == n => T::infinity(),
            i => (x[i - 1] + x[i]) * half,
        })
        .collect();
    let mut mass = Vec::with_capacity(n);
    let mut first = Vec::with_capacity(n);
    let mut distortion = T::zero();
    // b φ(b) with the convention ±∞ · φ(±∞) = 0
    let edge = |b: T| if b.is_finite() { b * normal::pdf(b) } else { T::zero() };
    for i in 0..n {
        let (a, b) = (bounds[i], bounds[i + 1]);
        let m = normal::cdf(b) - normal::cdf(a);
        let f = normal::pdf(a) - normal::pdf(b);
        let second = m + edge(a) - edge(b);
        distortion += x[i] * x[i] * m - T::of(2.0) * x[i] * f + second;
        mass.push(m);
        first.push(f);
    }
    NormalCells { mass, first, distortion }
}

/// Quadratic distortion `E min_i |Z − x_i|²` of a 1-D grid for `Z ~ N(0, 1)`.
pub fn normal_distortion_1d<T: Scalar>(points: &[T]) -> T {
    let mut x = points.to_vec();
    x.sort_by(|a, b| a.partial_cmp(b).expect("finite"));
    normal_cells(&x).distortion
}

/// Quadratic-optimal `size`-point quantizer of the standard normal, by
/// damped Newton iteration on the gradient of the distortion.
///
/// The returned codebook is symmetrized about 0 and carries the normal cell
/// probabilities as weights. When `report.converged` is false the last
/// iterate is returned.
pub fn newton_optimize_1d_normal<T: Scalar>(
    size: usize,
    max_iter: usize,
    tol: f64,
) -> Result<(Codebook<T>, OptimizerReport<T>)> {
    if size == 0 {
        return Err(Error::ContractViolation("grid size must be positive".into()));
    }
    let n = size;
    let half = T::of(0.5);
    let quarter = T::of(0.25);
    // Start at the quantiles of N(0, 3): optimal point density is ∝ φ^{1/3}.
    let mut x: Vec<T> = (0..n)
        .map(|i| T::of(3f64.sqrt() * normal::quantile((i as f64 + 0.5) / n as f64)))
        .collect();
    for _ in 0..5 {
        lloyd_move_normal(&mut x);
    }

    let tol = T::of(tol);
    let mut cells = normal_cells(&x);
    let mut history = vec![cells.distortion];
    let mut iterations = 0;
    let mut converged = false;
    loop {
        // half-gradient: G_i = x_i P_i − ∫_cell z φ
        let grad: Vec<T> = (0..n).map(|i| x[i] * cells.mass[i] - cells.first[i]).collect();
        let gnorm = gradient_norm(&x, &cells);
        if gnorm <= tol {
            converged = true;
            break;
        }
        if iterations >= max_iter {
            break;
        }
        iterations += 1;
        // tridiagonal Hessian of the half-distortion
        let mut diag = cells.mass.clone();
        let mut off = vec![T::zero(); n - 1];
        for i in 0..n - 1 {
            let m = (x[i] + x[i + 1]) * half;
            let c = quarter * normal::pdf(m) * (x[i + 1] - x[i]);
            diag[i] -= c;
            diag[i + 1] -= c;
            off[i] = -c;
        }
        let step = solve_tridiagonal(&off, &diag, &off, &grad)
            .filter(|s| s.iter().all(|v| v.is_finite()))
            .unwrap_or_else(|| {
                // fall back to a fixed-point move
                (0..n).map(|i| grad[i] / cells.mass[i].max(T::of(1e-300))).collect()
            });
        let mut t = T::one();
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<T> = (0..n).map(|i| x[i] - t * step[i]).collect();
            let ordered = trial.windows(2).all(|w| w[0] < w[1]);
            if ordered {
                let tc = normal_cells(&trial);
                // near the optimum distortion changes fall below rounding;
                // the gradient norm decides there
                let flat = tc.distortion <= cells.distortion * T::of(1.0 + 1e-14)
                    && gradient_norm(&trial, &tc) < gnorm;
                if tc.distortion < cells.distortion || flat {
                    x = trial;
                    cells = tc;
                    accepted = true;
                    break;
                }
            }
            t *= half;
        }
        if !accepted {
            let mut trial = x.clone();
            lloyd_move_normal(&mut trial);
            let tc = normal_cells(&trial);
            if !(tc.distortion < cells.distortion) {
                break;
            }
            x = trial;
            cells = tc;
        }
        history.push(cells.distortion);
    }
    if !converged {
        log::warn!("newton quantizer: N={n} not converged after {iterations} iterations");
    }
    // enforce exact symmetry about 0
    let sym: Vec<T> = (0..n).map(|i| (x[i] - x[n - 1 - i]) * half).collect();
    let cells = normal_cells(&sym);
    let residual = (0..n)
        .map(|i| (cells.first[i] / cells.mass[i] - sym[i]).abs())
        .fold(T::zero(), T::max);
    let total: T = cells.mass.iter().copied().sum();
    let weights = cells.mass.iter().map(|&m| m / total).collect();
    let cb = Codebook::scalar(&sym)?.with_weights(weights)?;
    Ok((
        cb,
        OptimizerReport {
            iterations,
            final_distortion: cells.distortion,
            distortion_history: history,
            stationarity_residual: residual,
            converged,
        },
    ))
}

fn gradient_norm<T: Scalar>(x: &[T], cells: &NormalCells<T>) -> T {
    (0..x.len())
        .map(|i| (x[i] * cells.mass[i] - cells.first[i]).abs())
        .fold(T::zero(), T::max)
}

/// One fixed-point sweep: every point moves to its cell's conditional mean.
fn lloyd_move_normal<T: Scalar>(x: &mut [T]) {
    let cells = normal_cells(x);
    for i in 0..x.len() {
        if cells.mass[i] > T::zero() {
            x[i] = cells.first[i] / cells.mass[i];
        }
    }
}

/// Thomas algorithm for `lower[i-1] x[i-1] + diag[i] x[i] + upper[i] x[i+1] = rhs[i]`.
fn solve_tridiagonal<T: Scalar>(lower: &[T], diag: &[T], upper: &[T], rhs: &[T]) -> Option<Vec<T>> {
    let n = diag.len();
    let mut c = vec![T::zero(); n];
    let mut d = vec![T::zero(); n];
    let mut denom = diag[0];
    if denom == T::zero() {
        return None;
    }
    if n > 1 {
        c[0] = upper[0] / denom;
    }
    d[0] = rhs[0] / denom;
    for i in 1..n {
        denom = diag[i] - lower[i - 1] * c[i - 1];
        if denom == T::zero() {
            return None;
        }
        if i + 1 < n {
            c[i] = upper[i] / denom;
        }
        d[i] = (rhs[i] - lower[i - 1] * d[i - 1]) / denom;
    }
    for i in (0..n - 1).rev() {
        let next = d[i + 1];
        d[i] -= c[i] * next;
    }
    Some(d)
}

/// The first `size` pairwise distinct rows of `samples` (fewer when the
/// sample has fewer distinct values).
pub fn distinct_rows<T: Scalar>(samples: &[T], dim: usize, size: usize) -> Vec<T> {
    let mut seen = HashSet::with_capacity(size);
    let mut out = Vec::with_capacity(size * dim);
    for y in samples.chunks_exact(dim) {
        if seen.len() == size {
            break;
        }
        if seen.insert(point_key(y)) {
            out.extend_from_slice(y);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal_samples(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.sample(StandardNormal)).collect()
    }

    #[test]
    fn nearest_examples() {
        let cb = Codebook::scalar(&[-1.0, 0.5, 2.0]).unwrap();
        assert_eq!(nearest_index(&[0.0], &cb).unwrap(), 1);
        assert_eq!(nearest_index(&[-0.25], &cb).unwrap(), 0);
        assert_eq!(nearest_index(&[10.0], &cb).unwrap(), 2);
        assert!(matches!(nearest_index(&[0.0, 1.0], &cb), Err(Error::DimensionMismatch { .. })));
        let search = NearestSearch::new(&cb);
        assert_eq!(search.nearest(&[-0.25]).0, 0);
    }

    #[test]
    fn distortion_examples() {
        let one = Codebook::scalar(&[0.0]).unwrap();
        let two = Codebook::scalar(&[-1.0, 1.0]).unwrap();
        assert_eq!(distortion(&[-1.0, 1.0], &one, 2.0).unwrap(), 1.0);
        assert_eq!(distortion(&[-1.0, 1.0], &two, 2.0).unwrap(), 0.0);
        assert_eq!(distortion(&[0.0, 2.0], &one, 1.0).unwrap(), 1.0);
        assert!(matches!(distortion(&[], &one, 2.0), Err(Error::EmptySamples)));
    }

    #[test]
    fn codebook_validation() {
        assert!(Codebook::scalar(&[1.0, 1.0]).is_err());
        assert!(Codebook::<f64>::new(2, vec![1.0, 2.0, 3.0]).is_err());
        assert!(Codebook::scalar(&[0.0, f64::NAN]).is_err());
        let cb = Codebook::scalar(&[0.0, 1.0]).unwrap();
        assert!(cb.clone().with_weights(vec![0.5, 0.6]).is_err());
        assert!(cb.clone().with_weights(vec![1.5, -0.5]).is_err());
        assert!(cb.with_weights(vec![0.25, 0.75]).is_ok());
    }

    #[test]
    fn lloyd_fixed_point_example() {
        let cb0 = Codebook::scalar(&[-1.5, 1.5]).unwrap();
        let (cb, report) = lloyd_optimize(&[-2.0, -1.0, 1.0, 2.0], &cb0, LloydOptions::default()).unwrap();
        assert_eq!(cb.points(), &[-1.5, 1.5]);
        assert_eq!(report.final_distortion, 0.25);
        assert_eq!(report.stationarity_residual, 0.0);
        assert!(report.converged);
        assert_eq!(cb.weights().unwrap(), &[0.5, 0.5]);
    }

    #[test]
    fn lloyd_single_point_is_mean() {
        let samples = [1.0, 2.0, 4.0, 9.0];
        let cb0 = Codebook::scalar(&[0.0]).unwrap();
        let (cb, _) = lloyd_optimize(&samples, &cb0, LloydOptions::default()).unwrap();
        assert_eq!(cb.points(), &[4.0]);
    }

    #[test]
    fn lloyd_two_point_normal() {
        let samples = normal_samples(1_000_000, 42);
        let cb0 = Codebook::scalar(&[-0.3, 0.2]).unwrap();
        let (cb, report) = lloyd_optimize(&samples, &cb0, LloydOptions::default()).unwrap();
        let target = (2.0 / std::f64::consts::PI).sqrt();
        assert!((cb.points()[0] + target).abs() < 0.02 && (cb.points()[1] - target).abs() < 0.02);
        assert!(report.distortion_history.windows(2).all(|w| w[1] <= w[0]));
        let w = cb.weights().unwrap();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn lloyd_reseeds_empty_cells() {
        // the point at 100 never receives a sample
        let samples: Vec<f64> = (0..50).map(|i| i as f64 / 10.0).collect();
        let cb0 = Codebook::scalar(&[0.0, 1.0, 100.0]).unwrap();
        let (cb, report) = lloyd_optimize(&samples, &cb0, LloydOptions::default()).unwrap();
        assert_eq!(cb.len(), 3);
        assert!(cb.weights().unwrap().iter().all(|&w| w > 0.0));
        assert!(report.distortion_history.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn lloyd_degenerate_sample_shrinks_grid() {
        let samples = vec![0.0; 40];
        let cb0 = Codebook::new(2, vec![0.0, 0.0, 1.0, 1.0]).unwrap();
        let (cb, _) = lloyd_optimize(&samples, &cb0, LloydOptions::default()).unwrap();
        assert_eq!(cb.points(), &[0.0, 0.0]);
        assert_eq!(cb.weights().unwrap(), &[1.0]);
    }

    #[test]
    fn lloyd_stationarity_at_exit() {
        // At a converged exit the last centroid move is tied to the last
        // relative decrease: w_i |c_i - y_i|^2 <= tol * D (up to one more
        // contraction step), so the residual is bounded by sqrt(tol D / w_min).
        let samples = normal_samples(200_000, 8);
        for n in [3usize, 5, 8] {
            let cb0 = Codebook::scalar(&distinct_rows(&samples, 1, n)).unwrap();
            let opts = LloydOptions { max_iter: 5000, tol: 1e-8 };
            let (cb, r) = lloyd_optimize(&samples, &cb0, opts).unwrap();
            assert!(r.converged);
            let w_min = cb.weights().unwrap().iter().copied().fold(1.0, f64::min);
            let bound = (opts.tol * r.final_distortion / w_min).sqrt();
            assert!(r.stationarity_residual <= bound, "N={n}: {} > {bound}", r.stationarity_residual);
        }
    }

    #[test]
    fn clvq_two_point_law() {
        let stream = (0..100_000).map(|t| [if t % 2 == 0 { -1.0 } else { 1.0 }]);
        let cb0 = Codebook::scalar(&[-0.5, 0.5]).unwrap();
        let (cb, report) = clvq_optimize(stream, &cb0, ClvqOptions { steps: 100_000, ..Default::default() }, &[-1.0, 1.0]).unwrap();
        let p: &[f64] = cb.points();
        assert!((p[0] + 1.0).abs() < 0.05 && (p[1] - 1.0).abs() < 0.05);
        assert_eq!(report.iterations, 100_000);
    }

    #[test]
    fn clvq_zero_steps_is_identity() {
        let cb0 = Codebook::scalar(&[-0.5, 0.5]).unwrap();
        let opts = ClvqOptions { steps: 0, ..Default::default() };
        let (cb, _) = clvq_optimize([[3.0]], &cb0, opts, &[]).unwrap();
        assert_eq!(cb, cb0);
    }

    #[test]
    fn clvq_two_point_normal() {
        let samples = normal_samples(1_000_000, 77);
        let holdout = normal_samples(10_000, 78);
        let cb0 = Codebook::scalar(&[-0.1, 0.1]).unwrap();
        let opts = ClvqOptions { steps: 1_000_000, ..Default::default() };
        let (cb, report) = clvq_optimize(samples.chunks_exact(1), &cb0, opts, &holdout).unwrap();
        let target = (2.0 / std::f64::consts::PI).sqrt();
        assert!((cb.points()[0] + target).abs() < 0.05 && (cb.points()[1] - target).abs() < 0.05, "{:?}", cb.points());
        assert!(report.final_distortion > 0.0);
    }

    #[test]
    fn newton_small_sizes() {
        let (cb, r) = newton_optimize_1d_normal::<f64>(1, 100, 1e-12).unwrap();
        assert_eq!(cb.points(), &[0.0]);
        assert!(r.converged);
        let (cb, r) = newton_optimize_1d_normal::<f64>(2, 100, 1e-12).unwrap();
        let target = (2.0 / std::f64::consts::PI).sqrt();
        assert!((cb.points()[1] - target).abs() < 1e-9 && cb.points()[0] == -cb.points()[1]);
        assert!(r.converged && r.stationarity_residual < 1e-9);
    }

    #[test]
    fn newton_matches_lloyd_for_three_points() {
        let (newton, _) = newton_optimize_1d_normal::<f64>(3, 100, 1e-12).unwrap();
        let samples = normal_samples(10_000_000, 3);
        let cb0 = Codebook::scalar(&[-1.0, 0.1, 1.0]).unwrap();
        let (lloyd, _) = lloyd_optimize(&samples, &cb0, LloydOptions { max_iter: 500, tol: 1e-9 }).unwrap();
        for (a, b) in newton.points().iter().zip(lloyd.points()) {
            assert!((a - b).abs() < 2e-3, "{:?} vs {:?}", newton.points(), lloyd.points());
        }
    }

    #[test]
    fn newton_closed_form_distortion_matches_samples() {
        let (cb, r) = newton_optimize_1d_normal::<f64>(10, 200, 1e-12).unwrap();
        let samples = normal_samples(2_000_000, 21);
        let empirical = distortion(&samples, &cb, 2.0).unwrap().powi(2);
        assert!((empirical - r.final_distortion).abs() < 2e-4, "{empirical} vs {}", r.final_distortion);
        assert!((normal_distortion_1d(cb.points()) - r.final_distortion).abs() < 1e-15);
    }

    #[test]
    fn newton_history_decreases_and_weights_sum_to_one() {
        for n in [4usize, 17, 64] {
            let (cb, r) = newton_optimize_1d_normal::<f64>(n, 200, 1e-12).unwrap();
            assert!(r.converged, "N={n}: {r:?}");
            assert!(r.distortion_history.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-14)));
            let w = cb.weights().unwrap();
            assert!(w.iter().all(|&x| x >= 0.0) && (w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn codebook_csv_and_binary_round_trip() {
        let cb = Codebook::new(2, vec![0.1, -2.5, 3.0, 1e-17])
            .unwrap()
            .with_weights(vec![0.3, 0.7])
            .unwrap();
        let mut buf = Vec::new();
        cb.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "2,2\n0.1,-2.5\n3,0.00000000000000001\n0.3\n0.7\n");
        assert_eq!(Codebook::<f64>::read_csv(buf.as_slice()).unwrap(), cb);
        let mut bin = Vec::new();
        cb.write_binary(&mut bin).unwrap();
        assert_eq!(Codebook::<f64>::read_binary(bin.as_slice()).unwrap(), cb);
        let plain = cb.without_weights();
        let mut buf = Vec::new();
        plain.write_csv(&mut buf).unwrap();
        assert_eq!(Codebook::<f64>::read_csv(buf.as_slice()).unwrap(), plain);
        assert!(Codebook::<f64>::read_csv("2,2\n0,0\n1,1\n0.5\n".as_bytes()).is_err());
    }

    proptest! {
        #[test]
        fn pruned_search_agrees_with_linear_scan(
            pts in proptest::collection::vec((-4i32..4, -4i32..4), 1..40),
            queries in proptest::collection::vec((-10i32..10, -10i32..10), 1..40),
            scale in 0.25f64..2.0,
        ) {
            // integer lattices produce many exact ties
            let mut uniq: Vec<(i32, i32)> = pts.clone();
            uniq.sort();
            uniq.dedup();
            let flat: Vec<f64> = pts
                .iter()
                .filter(|p| uniq.binary_search(p).is_ok())
                .scan(HashSet::new(), |seen, p| Some(seen.insert(*p).then_some(*p)))
                .flatten()
                .flat_map(|(a, b)| [a as f64 * scale, b as f64 * scale])
                .collect();
            let cb = Codebook::new(2, flat).unwrap();
            let search = NearestSearch::new(&cb);
            for (a, b) in queries {
                let y = [a as f64 * scale / 2.0, b as f64 * scale / 2.0];
                let linear = nearest_index(&y, &cb).unwrap();
                prop_assert_eq!(search.nearest(&y).0, linear);
                prop_assert_eq!(nearest_index(&y, &cb).unwrap(), linear);
                let (i, d, second) = search.nearest_two(&y);
                let mut dists: Vec<f64> = cb.points().chunks_exact(2).map(|p| sq_dist(&y, p)).collect();
                prop_assert_eq!((i, d), (linear, dists[linear]));
                dists.remove(linear);
                prop_assert_eq!(second, dists.iter().copied().fold(f64::INFINITY, f64::min));
            }
        }

        #[test]
        fn bounded_pass_matches_full_pass(seed in 0u64..1000, n in 1usize..30) {
            // integer-valued samples make ties and empty cells common
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<f64> = (0..1200).map(|_| rng.random_range(-6i32..6) as f64 * 0.5).collect();
            let mut points = distinct_rows(&samples, 2, n);
            let mut bounds = Bounds::new(&samples, 2);
            let mut moved = None;
            for _ in 0..8 {
                let full = assign_pass(&samples, &points, 2);
                let fast = assign_pass_bounded(&samples, &points, 2, &mut bounds, moved);
                prop_assert_eq!(&fast.counts, &full.counts);
                prop_assert_eq!(&fast.sums, &full.sums);
                prop_assert_eq!(fast.distortion, full.distortion);
                let next = lloyd_update(&samples, &points, 2, &full);
                moved = Some(displacement(&points, &next, 2));
                points = next;
            }
        }

        #[test]
        fn lloyd_history_non_increasing(seed in 0u64..1000, n in 1usize..12) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let samples: Vec<f64> = (0..2000).map(|_| rng.random_range(-1.0..1.0) * rng.random_range(0.0..3.0)).collect();
            let cb0 = Codebook::new(2, distinct_rows(&samples, 2, n)).unwrap();
            let (cb, r) = lloyd_optimize(&samples, &cb0, LloydOptions::default()).unwrap();
            prop_assert!(r.distortion_history.windows(2).all(|w| w[1] <= w[0]));
            let w = cb.weights().unwrap();
            prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
