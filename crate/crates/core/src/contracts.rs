//! Constraint arithmetic for normalized swing contracts.
//!
//! After normalization, a contract buys `q_k ∈ [0, 1]` at every date and the
//! cumulated volume must end up in `[q_lo, q_hi]`. The admissible constraint
//! pairs form the triangle `T⁺(n) = {0 ≤ u ≤ v ≤ n}`, tiled by unit triangles
//! on which the premium is affine.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{pos, Scalar};

/// Absolute slack applied to tile membership inequalities.
pub const TILE_TOLERANCE: f64 = 1e-12;

/// Contract in physical volume units, before the swap / swing split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawContract<T> {
    pub n: usize,
    pub q_min: T,
    pub q_max: T,
    pub global_min: T,
    pub global_max: T,
    pub rate: T,
    pub strikes: Vec<T>,
}

impl<T: Scalar> RawContract<T> {
    pub fn new(
        n: usize,
        (q_min, q_max): (T, T),
        (global_min, global_max): (T, T),
        rate: T,
        strikes: Vec<T>,
    ) -> Result<Self> {
        let c = Self {
            n,
            q_min,
            q_max,
            global_min,
            global_max,
            rate,
            strikes,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.q_min, self.q_max, self.global_min, self.global_max, self.rate];
        if all.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidContract("non-finite field".into()));
        }
        if self.n == 0 {
            return Err(Error::InvalidContract("at least one exercise date is required".into()));
        }
        if self.q_min < T::zero() || self.q_min > self.q_max {
            return Err(Error::InvalidContract(format!(
                "local bounds must satisfy 0 <= q_min <= q_max, got ({}, {})",
                self.q_min, self.q_max
            )));
        }
        if self.global_min < T::zero() || self.global_min > self.global_max {
            return Err(Error::InvalidContract(format!(
                "global bounds must satisfy 0 <= Q_min <= Q_max, got ({}, {})",
                self.global_min, self.global_max
            )));
        }
        if self.strikes.len() != self.n {
            return Err(Error::InvalidContract(format!(
                "expected {} strikes, got {}",
                self.n,
                self.strikes.len()
            )));
        }
        let n = T::of_usize(self.n);
        if n * self.q_min > self.global_max {
            return Err(Error::Infeasible(format!(
                "n * q_min = {} exceeds Q_max = {}",
                n * self.q_min,
                self.global_max
            )));
        }
        if n * self.q_max < self.global_min {
            return Err(Error::Infeasible(format!(
                "n * q_max = {} is below Q_min = {}",
                n * self.q_max,
                self.global_min
            )));
        }
        Ok(())
    }
}

/// A raw contract split into `swap_weight` units of a swap plus
/// `swing_weight` units of a normalized swing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NormalizedContract<T> {
    pub swap_weight: T,
    pub swing_weight: T,
    /// `None` when the contract is a pure swap (`q_min == q_max`).
    pub constraints: Option<GlobalConstraints<T>>,
}

pub fn normalize_contract<T: Scalar>(c: &RawContract<T>) -> Result<NormalizedContract<T>> {
    c.validate()?;
    let spread = c.q_max - c.q_min;
    if spread == T::zero() {
        return Ok(NormalizedContract {
            swap_weight: c.q_min,
            swing_weight: T::zero(),
            constraints: None,
        });
    }
    let n = T::of_usize(c.n);
    let base = n * c.q_min;
    let lo = pos((c.global_min - base) / spread);
    let hi = ((c.global_max - base) / spread).min(n);
    Ok(NormalizedContract {
        swap_weight: c.q_min,
        swing_weight: spread,
        constraints: Some(GlobalConstraints::new(lo, hi)?),
    })
}

/// Residual global constraints `(q_lo, q_hi)` in normalized volume units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GlobalConstraints<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Scalar> GlobalConstraints<T> {
    pub fn new(lo: T, hi: T) -> Result<Self> {
        if !lo.is_finite() || !hi.is_finite() || lo < T::zero() || hi < lo {
            return Err(Error::ContractViolation(format!(
                "constraints must satisfy 0 <= lo <= hi, got ({lo}, {hi})"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn in_triangle(&self, n: usize) -> bool {
        self.lo >= T::zero() && self.lo <= self.hi && self.hi <= T::of_usize(n)
    }

    pub fn is_integral(&self) -> bool {
        self.lo.fract() == T::zero() && self.hi.fract() == T::zero()
    }
}

/// Closed interval `[lo, hi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval<T> {
    pub lo: T,
    pub hi: T,
}

impl<T: Scalar> Interval<T> {
    pub fn contains(&self, x: T, tol: T) -> bool {
        x >= self.lo - tol && x <= self.hi + tol
    }
}

/// Admissible purchase interval `I^M_Q = [(q_lo - M)⁺ ∧ 1, q_hi ∧ 1]` at a
/// date followed by `remaining` further dates.
pub fn admissible_interval<T: Scalar>(q: &GlobalConstraints<T>, remaining: usize) -> Interval<T> {
    let m = T::of_usize(remaining);
    Interval {
        lo: pos(q.lo - m).min(T::one()),
        hi: q.hi.min(T::one()),
    }
}

/// Residual constraints after purchasing `x`, with at most `remaining` dates left:
/// `χ^M(Q, x) = ((q_lo - x)⁺, (q_hi - x) ∧ M)`.
pub fn chi<T: Scalar>(
    q: &GlobalConstraints<T>,
    x: T,
    remaining: usize,
) -> Result<GlobalConstraints<T>> {
    let interval = admissible_interval(q, remaining);
    if !interval.contains(x, T::of(TILE_TOLERANCE)) {
        return Err(Error::ContractViolation(format!(
            "purchase {x} outside admissible interval [{}, {}]",
            interval.lo, interval.hi
        )));
    }
    let lo = pos(q.lo - x);
    let hi = (q.hi - x).min(T::of_usize(remaining));
    // x inside the interval guarantees lo <= hi up to rounding.
    Ok(GlobalConstraints { lo, hi: hi.max(lo) })
}

/// Integer global constraints: the DP state for bang-bang pricing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct IntegerConstraints {
    pub lo: usize,
    pub hi: usize,
}

impl IntegerConstraints {
    pub fn new(lo: usize, hi: usize) -> Result<Self> {
        if lo > hi {
            return Err(Error::ContractViolation(format!(
                "constraints must satisfy lo <= hi, got ({lo}, {hi})"
            )));
        }
        Ok(Self { lo, hi })
    }

    pub fn try_from_real<T: Scalar>(q: &GlobalConstraints<T>) -> Result<Self> {
        if !q.is_integral() || q.lo < T::zero() {
            return Err(Error::NonInteger {
                lo: q.lo.to_f64_lossy(),
                hi: q.hi.to_f64_lossy(),
            });
        }
        let lo = q.lo.to_usize().expect("integral and nonnegative");
        let hi = q.hi.to_usize().expect("integral and nonnegative");
        Self::new(lo, hi)
    }

    pub fn to_real<T: Scalar>(self) -> GlobalConstraints<T> {
        GlobalConstraints {
            lo: T::of_usize(self.lo),
            hi: T::of_usize(self.hi),
        }
    }

    pub fn in_triangle(&self, n: usize) -> bool {
        self.lo <= self.hi && self.hi <= n
    }

    /// Endpoints of the admissible interval; both lie in `{0, 1}`.
    pub fn admissible_actions(&self, remaining: usize) -> (usize, usize) {
        (self.lo.saturating_sub(remaining).min(1), self.hi.min(1))
    }

    pub fn chi(&self, x: usize, remaining: usize) -> IntegerConstraints {
        debug_assert!(x <= self.hi, "purchase exceeds the residual maximum");
        IntegerConstraints {
            lo: self.lo.saturating_sub(x),
            hi: (self.hi - x).min(remaining),
        }
    }
}

/// Residual constraints attainable at date `k` from integer constraints `q0`
/// at date 0 under `{0, 1}` purchases, ordered by cumulated purchase `ℓ`,
/// infeasible pairs and duplicates removed.
pub fn reachable_set(q0: IntegerConstraints, k: usize, n: usize) -> Result<Vec<IntegerConstraints>> {
    if !q0.in_triangle(n) {
        return Err(Error::OutsideTriangle {
            lo: q0.lo as f64,
            hi: q0.hi as f64,
            n,
        });
    }
    if k > n {
        return Err(Error::ContractViolation(format!("date {k} beyond horizon {n}")));
    }
    let cap = n - k;
    let mut out: Vec<IntegerConstraints> = Vec::with_capacity(k + 1);
    for bought in 0..=k {
        let lo = q0.lo.saturating_sub(bought);
        let hi = q0.hi.saturating_sub(bought).min(cap);
        if lo > hi {
            continue;
        }
        let q = IntegerConstraints { lo, hi };
        if !out.contains(&q) {
            out.push(q);
        }
    }
    Ok(out)
}

/// Exact cardinality of [`reachable_set`].
pub fn reachable_count(q0: IntegerConstraints, k: usize, n: usize) -> usize {
    let cap = (n - k) as i64;
    let (lo, hi, k) = (q0.lo as i64, q0.hi as i64, k as i64);
    let pos = |x: i64| x.max(0);
    (hi.min(k) - pos(lo - cap) + 1 - pos((hi - cap).min(k) - lo)) as usize
}

/// `(Q_max ∧ k) + 1 − (Q_max − Q_min − (n−k) − 1)⁺`: an upper bound on
/// [`reachable_count`], used for complexity accounting.
pub fn reachable_count_bound(q0: IntegerConstraints, k: usize, n: usize) -> usize {
    let excess = q0.hi as i64 - q0.lo as i64 - (n - k) as i64 - 1;
    (q0.hi.min(k) as i64 + 1 - excess.max(0)) as usize
}

/// `Σ_k card(reachable_set(q0, k, n)) · N_k · N_{k+1}` with `N_n = 1`.
pub fn dp_complexity(q0: IntegerConstraints, n: usize, grid_sizes: &[usize]) -> usize {
    (0..n)
        .map(|k| {
            let next = grid_sizes.get(k + 1).copied().unwrap_or(1);
            reachable_count(q0, k, n) * grid_sizes.get(k).copied().unwrap_or(1) * next
        })
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Orientation {
    /// `T⁺_{ij}`: `v - u ≥ j - i` inside the unit box `[i, i+1] × [j, j+1]`.
    Upper,
    /// `T⁻_{ij}`: `v - u ≤ j - i`, only for `i < j`.
    Lower,
}

/// Unit triangle of the tiling of `T⁺(n)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tile {
    pub i: usize,
    pub j: usize,
    pub orientation: Orientation,
}

impl Tile {
    pub fn upper(i: usize, j: usize) -> Self {
        assert!(i <= j, "upper tile requires i <= j");
        Self { i, j, orientation: Orientation::Upper }
    }

    pub fn lower(i: usize, j: usize) -> Self {
        assert!(i < j, "lower tile requires i < j");
        Self { i, j, orientation: Orientation::Lower }
    }

    /// Corners, the first one always `(i, j)`.
    pub fn vertices(&self) -> [(usize, usize); 3] {
        let (i, j) = (self.i, self.j);
        match self.orientation {
            Orientation::Upper => [(i, j), (i, j + 1), (i + 1, j + 1)],
            Orientation::Lower => [(i, j), (i + 1, j), (i + 1, j + 1)],
        }
    }

    pub fn contains<T: Scalar>(&self, q: &GlobalConstraints<T>, tol: T) -> bool {
        let (i, j) = (T::of_usize(self.i), T::of_usize(self.j));
        let one = T::one();
        let in_box = q.lo >= i - tol && q.lo <= i + one + tol && q.hi >= j - tol && q.hi <= j + one + tol;
        let gap = (q.hi - q.lo) - (j - i);
        in_box
            && match self.orientation {
                Orientation::Upper => gap >= -tol,
                Orientation::Lower => gap <= tol,
            }
    }

    /// Barycentric weights of `q` with respect to [`Tile::vertices`].
    pub fn barycentric<T: Scalar>(&self, q: &GlobalConstraints<T>) -> [T; 3] {
        let du = q.lo - T::of_usize(self.i);
        let dv = q.hi - T::of_usize(self.j);
        let one = T::one();
        match self.orientation {
            Orientation::Upper => [one - dv, dv - du, du],
            Orientation::Lower => [one - du, du - dv, dv],
        }
    }
}

/// Tile of the tiling of `T⁺(n)` containing `q`.
///
/// `q_hi` is first clamped to `n`. Points on a shared edge go to the upper
/// tile; points shared by several upper tiles (integer vertices) go to the
/// one with the smallest `(i, j)`.
pub fn locate_tile<T: Scalar>(q: &GlobalConstraints<T>, n: usize) -> Result<Tile> {
    let tol = T::of(TILE_TOLERANCE);
    let nf = T::of_usize(n);
    let outside = || Error::OutsideTriangle {
        lo: q.lo.to_f64_lossy(),
        hi: q.hi.to_f64_lossy(),
        n,
    };
    if n == 0 || !q.lo.is_finite() || !q.hi.is_finite() {
        return Err(outside());
    }
    let q = GlobalConstraints { lo: q.lo, hi: q.hi.min(nf) };
    if q.lo < -tol || q.hi < q.lo - tol || q.lo > nf + tol {
        return Err(outside());
    }
    let cell = |x: T| -> usize {
        let f = x.max(T::zero()).floor().to_usize().unwrap_or(0);
        f.min(n - 1)
    };
    let (ci, cj) = (cell(q.lo), cell(q.hi));
    let mut lower = None;
    for i in ci.saturating_sub(1)..=ci {
        for j in cj.saturating_sub(1)..=cj {
            if i > j {
                continue;
            }
            let up = Tile::upper(i, j);
            if up.contains(&q, tol) {
                return Ok(up);
            }
            if lower.is_none() && i < j {
                let lo = Tile::lower(i, j);
                if lo.contains(&q, tol) {
                    lower = Some(lo);
                }
            }
        }
    }
    lower.ok_or_else(outside)
}

/// Premium values at the integer vertices of `T⁺(n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PremiumSurface<T> {
    n: usize,
    values: Vec<Option<T>>,
}

impl<T: Scalar> PremiumSurface<T> {
    pub fn empty(n: usize) -> Self {
        Self {
            n,
            values: vec![None; Self::vertex_count(n)],
        }
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut s = Self::empty(n);
        for (i, j) in Self::vertices(n) {
            s.set(i, j, f(i, j));
        }
        s
    }

    /// `(n + 1)(n + 2) / 2`.
    pub fn vertex_count(n: usize) -> usize {
        (n + 1) * (n + 2) / 2
    }

    /// Integer vertices `(i, j)`, `0 ≤ i ≤ j ≤ n`, in row-major order.
    pub fn vertices(n: usize) -> impl Iterator<Item = (usize, usize)> {
        (0..=n).flat_map(move |i| (i..=n).map(move |j| (i, j)))
    }

    pub fn horizon(&self) -> usize {
        self.n
    }

    fn index(&self, i: usize, j: usize) -> usize {
        assert!(i <= j && j <= self.n, "vertex ({i}, {j}) outside T+({})", self.n);
        i * (self.n + 1) - i * i.saturating_sub(1) / 2 + (j - i)
    }

    pub fn set(&mut self, i: usize, j: usize, value: T) {
        let idx = self.index(i, j);
        self.values[idx] = Some(value);
    }

    pub fn get(&self, i: usize, j: usize) -> Option<T> {
        if i > j || j > self.n {
            return None;
        }
        self.values[self.index(i, j)]
    }

    pub fn value(&self, i: usize, j: usize) -> Result<T> {
        self.get(i, j).ok_or(Error::SurfaceIncomplete(i, j))
    }

    pub fn is_complete(&self) -> bool {
        self.values.iter().all(Option::is_some)
    }

    /// `(i, j, value)` for every populated vertex, row-major.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        Self::vertices(self.n).filter_map(move |(i, j)| self.get(i, j).map(|v| (i, j, v)))
    }

    /// Counts discrete concavity and monotonicity violations exceeding `slack`.
    ///
    /// Concavity is checked on every triple `A, (A + C) / 2, C` of integer
    /// vertices; monotonicity as non-increasing in `lo` and non-decreasing
    /// in `hi` between adjacent vertices.
    pub fn shape_report(&self, slack: T) -> Result<ShapeReport<T>> {
        let verts: Vec<(usize, usize)> = Self::vertices(self.n).collect();
        let mut report = ShapeReport {
            concavity_checks: 0,
            concavity_violations: 0,
            monotonicity_checks: 0,
            monotonicity_violations: 0,
            worst_excess: T::zero(),
        };
        let two = T::one() + T::one();
        for (ai, &(a0, a1)) in verts.iter().enumerate() {
            let pa = self.value(a0, a1)?;
            for &(c0, c1) in &verts[ai + 1..] {
                if (a0 + c0) % 2 != 0 || (a1 + c1) % 2 != 0 {
                    continue;
                }
                let (b0, b1) = ((a0 + c0) / 2, (a1 + c1) / 2);
                let excess = (pa + self.value(c0, c1)?) / two - self.value(b0, b1)?;
                report.concavity_checks += 1;
                if excess > slack {
                    report.concavity_violations += 1;
                }
                report.worst_excess = report.worst_excess.max(excess);
            }
            // lo + 1 must not increase the price; hi + 1 must not decrease it.
            if a0 < a1 {
                let excess = self.value(a0 + 1, a1)? - pa;
                report.monotonicity_checks += 1;
                if excess > slack {
                    report.monotonicity_violations += 1;
                }
                report.worst_excess = report.worst_excess.max(excess);
            }
            if a1 < self.n {
                let excess = pa - self.value(a0, a1 + 1)?;
                report.monotonicity_checks += 1;
                if excess > slack {
                    report.monotonicity_violations += 1;
                }
                report.worst_excess = report.worst_excess.max(excess);
            }
        }
        Ok(report)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShapeReport<T> {
    pub concavity_checks: usize,
    pub concavity_violations: usize,
    pub monotonicity_checks: usize,
    pub monotonicity_violations: usize,
    /// Largest observed violation amount (zero or negative when none).
    pub worst_excess: T,
}

/// Affine interpolation of the premium over the tile containing `q`.
pub fn interpolate_on_tile<T: Scalar>(surface: &PremiumSurface<T>, q: &GlobalConstraints<T>) -> Result<T> {
    let n = surface.horizon();
    let tile = locate_tile(q, n)?;
    let clamped = GlobalConstraints {
        lo: q.lo,
        hi: q.hi.min(T::of_usize(n)),
    };
    let weights = tile.barycentric(&clamped);
    let mut acc = T::zero();
    for ((i, j), w) in tile.vertices().into_iter().zip(weights) {
        acc += w * surface.value(i, j)?;
    }
    Ok(acc)
}
