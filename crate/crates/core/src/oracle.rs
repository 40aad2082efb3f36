//! Reference pricers on small finite scenario lattices.
//!
//! These are deliberately simple and independent of the quantized engine:
//! exhaustive search over adapted `{0, 1}` strategies, an exact backward DP
//! over integer constraints, a fine-grid continuous-action DP for fractional
//! constraints, and the explicit two-date solution.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::contracts::{admissible_interval, reachable_set, GlobalConstraints, IntegerConstraints};
use crate::error::{Error, Result};
use crate::scalar::{neg, pos, Scalar};

/// Work limit for [`price_lattice_bruteforce`], in (root-to-leaf path,
/// decision sequence) pairs.
pub const BRUTE_FORCE_LIMIT: u128 = 2048;

const PROB_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Branch<T> {
    /// Index of the child in the next level.
    pub node: usize,
    pub prob: T,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatticeNode<T> {
    pub payoff: T,
    #[serde(default = "Vec::new")]
    pub children: Vec<Branch<T>>,
}

/// Finite-support payoff process: level `k` holds the possible states at
/// date `k`, each with its payoff `V_k` and branches to the next level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioLattice<T> {
    pub levels: Vec<Vec<LatticeNode<T>>>,
}

impl<T: Scalar> ScenarioLattice<T> {
    pub fn new(levels: Vec<Vec<LatticeNode<T>>>) -> Result<Self> {
        let lat = Self { levels };
        lat.validate()?;
        Ok(lat)
    }

    /// Deterministic payoff sequence as a single-path lattice.
    pub fn deterministic(payoffs: &[T]) -> Result<Self> {
        let n = payoffs.len();
        let levels = payoffs
            .iter()
            .enumerate()
            .map(|(k, &payoff)| {
                let children = if k + 1 < n {
                    vec![Branch { node: 0, prob: T::one() }]
                } else {
                    Vec::new()
                };
                vec![LatticeNode { payoff, children }]
            })
            .collect();
        Self::new(levels)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let lat: Self = serde_json::from_str(s)?;
        lat.validate()?;
        Ok(lat)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidLattice(m));
        if self.levels.is_empty() {
            return bad("lattice has no levels".into());
        }
        if self.levels[0].len() != 1 {
            return bad(format!("level 0 must hold one node, found {}", self.levels[0].len()));
        }
        let depth = self.levels.len();
        for (k, level) in self.levels.iter().enumerate() {
            if level.is_empty() {
                return bad(format!("level {k} is empty"));
            }
            for (i, node) in level.iter().enumerate() {
                if !node.payoff.is_finite() {
                    return bad(format!("non-finite payoff at ({k}, {i})"));
                }
                if k + 1 == depth {
                    if !node.children.is_empty() {
                        return bad(format!("terminal node ({k}, {i}) has children"));
                    }
                    continue;
                }
                if node.children.is_empty() {
                    return bad(format!("node ({k}, {i}) has no children"));
                }
                let mut total = T::zero();
                for b in &node.children {
                    if b.node >= self.levels[k + 1].len() {
                        return bad(format!("node ({k}, {i}) points to missing child {}", b.node));
                    }
                    if !(b.prob >= T::zero()) {
                        return bad(format!("negative branch probability at ({k}, {i})"));
                    }
                    total += b.prob;
                }
                if (total - T::one()).abs() > T::of(PROB_TOLERANCE) {
                    return bad(format!("branch probabilities at ({k}, {i}) sum to {total}"));
                }
            }
        }
        Ok(())
    }

    /// Number of exercise dates.
    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn max_branching(&self) -> usize {
        self.levels
            .iter()
            .flatten()
            .map(|node| node.children.len())
            .max()
            .unwrap_or(0)
    }

    /// Unconditional probability of each node.
    pub fn node_probabilities(&self) -> Vec<Vec<T>> {
        let mut out: Vec<Vec<T>> = Vec::with_capacity(self.depth());
        out.push(vec![T::one()]);
        for k in 1..self.depth() {
            let mut next = vec![T::zero(); self.levels[k].len()];
            for (node, &p) in self.levels[k - 1].iter().zip(&out[k - 1]) {
                for b in &node.children {
                    next[b.node] += p * b.prob;
                }
            }
            out.push(next);
        }
        out
    }

    /// `E f(V_k)` for every date.
    pub fn expected<F: Fn(T) -> T>(&self, f: F) -> Vec<T> {
        self.node_probabilities()
            .iter()
            .zip(&self.levels)
            .map(|(probs, level)| probs.iter().zip(level).map(|(&p, node)| p * f(node.payoff)).sum())
            .collect()
    }

    /// Random tree-shaped lattice with `1..=max_branching` children per node
    /// and payoffs uniform in `[payoff_lo, payoff_hi)`.
    pub fn random<R: Rng>(
        depth: usize,
        max_branching: usize,
        (payoff_lo, payoff_hi): (f64, f64),
        rng: &mut R,
    ) -> Self {
        assert!(depth >= 1 && max_branching >= 1);
        let mut levels: Vec<Vec<LatticeNode<T>>> = Vec::with_capacity(depth);
        let mut width = 1;
        for k in 0..depth {
            let mut level = Vec::with_capacity(width);
            let mut next_width = 0;
            for _ in 0..width {
                let payoff = T::of(rng.random_range(payoff_lo..payoff_hi));
                let mut children = Vec::new();
                if k + 1 < depth {
                    let b = rng.random_range(1..=max_branching);
                    let raw: Vec<f64> = (0..b).map(|_| rng.random_range(0.05..1.0)).collect();
                    let total: f64 = raw.iter().sum();
                    for r in raw {
                        children.push(Branch { node: next_width, prob: T::of(r / total) });
                        next_width += 1;
                    }
                }
                level.push(LatticeNode { payoff, children });
            }
            levels.push(level);
            width = next_width;
        }
        Self { levels }
    }

    fn path_count(&self) -> u128 {
        let mut counts = vec![1u128];
        for k in 0..self.depth() - 1 {
            let mut next = vec![0u128; self.levels[k + 1].len()];
            for (node, &c) in self.levels[k].iter().zip(&counts) {
                for b in &node.children {
                    next[b.node] += c;
                }
            }
            counts = next;
        }
        counts.iter().sum()
    }
}

fn check_triangle(q: IntegerConstraints, n: usize) -> Result<()> {
    if q.in_triangle(n) {
        Ok(())
    } else {
        Err(Error::OutsideTriangle {
            lo: q.lo as f64,
            hi: q.hi as f64,
            n,
        })
    }
}

/// Best expected cumulated payoff over all adapted `{0, 1}` purchase
/// strategies whose total lies in `[q.lo, q.hi]`, by exhaustive search.
///
/// A strategy is a map from (date, node, purchases so far) to `{0, 1}`;
/// every decision sequence along every root-to-leaf path is visited, with
/// feasibility checked only on the total at the last date.
pub fn price_lattice_bruteforce<T: Scalar>(lat: &ScenarioLattice<T>, q: IntegerConstraints) -> Result<T> {
    lat.validate()?;
    let n = lat.depth();
    check_triangle(q, n)?;
    let work = lat.path_count().saturating_mul(1u128 << n.min(100));
    if n > 100 || work > BRUTE_FORCE_LIMIT {
        return Err(Error::InstanceTooLarge(format!(
            "{} paths over {n} dates exceed the enumeration limit {BRUTE_FORCE_LIMIT}",
            lat.path_count()
        )));
    }

    fn search<T: Scalar>(lat: &ScenarioLattice<T>, k: usize, node: usize, bought: usize, q: IntegerConstraints) -> Option<T> {
        let here = &lat.levels[k][node];
        let last = k + 1 == lat.depth();
        let mut best: Option<T> = None;
        for x in 0..=1usize {
            let total = bought + x;
            let gain = if x == 1 { here.payoff } else { T::zero() };
            let value = if last {
                (q.lo..=q.hi).contains(&total).then_some(gain)
            } else {
                let mut acc = gain;
                let mut feasible = true;
                for b in &here.children {
                    match search(lat, k + 1, b.node, total, q) {
                        Some(v) => acc += b.prob * v,
                        None => {
                            feasible = false;
                            break;
                        }
                    }
                }
                feasible.then_some(acc)
            };
            if let Some(v) = value {
                if best.is_none_or(|b| v > b) {
                    best = Some(v);
                }
            }
        }
        best
    }

    search(lat, 0, 0, 0, q).ok_or_else(|| Error::Infeasible(format!("no strategy meets {q:?}")))
}

/// Exact backward DP over reachable integer constraints on the lattice,
/// with purchases restricted to `{0, 1} ∩ I`.
pub fn price_lattice_dp<T: Scalar>(lat: &ScenarioLattice<T>, q: IntegerConstraints) -> Result<T> {
    lat.validate()?;
    let n = lat.depth();
    check_triangle(q, n)?;
    // next[r][node]: value at date k+1 for the r-th reachable constraint pair.
    let mut next_states: Vec<IntegerConstraints> = Vec::new();
    let mut next: Vec<Vec<T>> = Vec::new();
    for k in (0..n).rev() {
        let states = reachable_set(q, k, n)?;
        let remaining = n - k - 1;
        let level = &lat.levels[k];
        let mut values = Vec::with_capacity(states.len());
        for s in &states {
            let (a, b) = s.admissible_actions(remaining);
            let mut row = Vec::with_capacity(level.len());
            for node in level {
                let mut best = T::neg_infinity();
                for x in a..=b {
                    let mut v = if x == 1 { node.payoff } else { T::zero() };
                    if remaining > 0 {
                        let target = s.chi(x, remaining);
                        let r = next_states
                            .iter()
                            .position(|t| *t == target)
                            .expect("reachable sets are closed under admissible moves");
                        for br in &node.children {
                            v += br.prob * next[r][br.node];
                        }
                    }
                    if v > best {
                        best = v;
                    }
                }
                row.push(best);
            }
            values.push(row);
        }
        next_states = states;
        next = values;
    }
    Ok(next[0][0])
}

/// Continuous-action DP with purchases discretized to multiples of
/// `1 / steps`; `q` itself must lie on that grid.
pub fn price_lattice_fine_grid<T: Scalar>(lat: &ScenarioLattice<T>, q: &GlobalConstraints<T>, steps: u32) -> Result<T> {
    lat.validate()?;
    let n = lat.depth();
    let s = steps as i64;
    let to_units = |x: T| -> Result<i64> {
        let scaled = x * T::of(steps as f64);
        let r = scaled.round();
        if (scaled - r).abs() > T::of(1e-9) {
            return Err(Error::ContractViolation(format!("{x} is not a multiple of 1/{steps}")));
        }
        Ok(r.to_i64().expect("finite"))
    };
    if !q.in_triangle(n) {
        return Err(Error::OutsideTriangle {
            lo: q.lo.to_f64_lossy(),
            hi: q.hi.to_f64_lossy(),
            n,
        });
    }
    let (lo, hi) = (to_units(q.lo)?, to_units(q.hi)?);

    type Memo<T> = HashMap<(usize, usize, i64, i64), T>;
    fn solve<T: Scalar>(lat: &ScenarioLattice<T>, memo: &mut Memo<T>, k: usize, node: usize, lo: i64, hi: i64, s: i64) -> T {
        if let Some(&v) = memo.get(&(k, node, lo, hi)) {
            return v;
        }
        let remaining = (lat.depth() - k - 1) as i64;
        let a = (lo - remaining * s).max(0).min(s);
        let b = hi.min(s);
        let here = &lat.levels[k][node];
        let unit = T::one() / T::of(s as f64);
        let mut best = T::neg_infinity();
        for x in a..=b {
            let mut v = T::of(x as f64) * unit * here.payoff;
            if remaining > 0 {
                let (nlo, nhi) = ((lo - x).max(0), (hi - x).min(remaining * s));
                for br in &here.children {
                    v += br.prob * solve(lat, memo, k + 1, br.node, nlo, nhi, s);
                }
            }
            if v > best {
                best = v;
            }
        }
        memo.insert((k, node, lo, hi), best);
        best
    }

    let mut memo = Memo::new();
    Ok(solve(lat, &mut memo, 0, 0, lo, hi, s))
}

/// Two-date contract: a known first payoff `v0` and a finite law for `V_1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoPeriodInstance<T> {
    pub v0: T,
    /// `(value, probability)` pairs.
    pub v1: Vec<(T, T)>,
}

impl<T: Scalar> TwoPeriodInstance<T> {
    pub fn new(v0: T, v1: Vec<(T, T)>) -> Result<Self> {
        let total: T = v1.iter().map(|&(_, p)| p).sum();
        if v1.is_empty() || v1.iter().any(|&(v, p)| !v.is_finite() || !(p >= T::zero())) {
            return Err(Error::InvalidLattice("bad second-date distribution".into()));
        }
        if (total - T::one()).abs() > T::of(PROB_TOLERANCE) || !v0.is_finite() {
            return Err(Error::InvalidLattice(format!("probabilities sum to {total}")));
        }
        Ok(Self { v0, v1 })
    }

    /// `(E V_1⁺, E V_1⁻)`.
    pub fn expected_parts(&self) -> (T, T) {
        self.v1.iter().fold((T::zero(), T::zero()), |(p, m), &(v, w)| (p + w * pos(v), m + w * neg(v)))
    }

    pub fn to_lattice(&self) -> ScenarioLattice<T> {
        let children = self
            .v1
            .iter()
            .enumerate()
            .map(|(i, &(_, prob))| Branch { node: i, prob })
            .collect();
        let leaves = self
            .v1
            .iter()
            .map(|&(payoff, _)| LatticeNode { payoff, children: Vec::new() })
            .collect();
        ScenarioLattice {
            levels: vec![vec![LatticeNode { payoff: self.v0, children }], leaves],
        }
    }
}

/// Premium and first-date purchase of a two-date swing.
///
/// Maximizes `x V_0 + (1 ∧ (q_hi − x)) E V_1⁺ − (q_lo − x)⁺ E V_1⁻` over
/// `x ∈ I¹_Q`. The objective is piecewise affine with breaks at `q_lo` and
/// `q_hi − 1`, so only those and the interval endpoints are evaluated; the
/// smallest maximizer is returned.
pub fn price_two_period<T: Scalar>(inst: &TwoPeriodInstance<T>, q: &GlobalConstraints<T>) -> Result<(T, T)> {
    if !q.in_triangle(2) {
        return Err(Error::OutsideTriangle {
            lo: q.lo.to_f64_lossy(),
            hi: q.hi.to_f64_lossy(),
            n: 2,
        });
    }
    let (e_plus, e_minus) = inst.expected_parts();
    let interval = admissible_interval(q, 1);
    let objective = |x: T| x * inst.v0 + (q.hi - x).min(T::one()) * e_plus - pos(q.lo - x) * e_minus;
    let mut candidates: Vec<T> = [interval.lo, interval.hi, q.lo, q.hi - T::one()]
        .into_iter()
        .filter(|&x| x >= interval.lo && x <= interval.hi)
        .collect();
    candidates.sort_by(|a, b| a.partial_cmp(b).expect("finite candidates"));
    candidates.dedup();
    let mut best = (objective(candidates[0]), candidates[0]);
    for &x in &candidates[1..] {
        let v = objective(x);
        if v > best.0 {
            best = (v, x);
        }
    }
    Ok(best)
}
