//! Two-factor Gaussian spot model.
//!
//! The spot at date `t` is `S_t = F_{0,t} exp(Y¹_t + Y²_t − Λ_t / 2)` where
//! `Y^i_t = σ_i ∫₀ᵗ e^{−α_i (t−s)} dW^i_s` are correlated Ornstein-Uhlenbeck
//! factors and `Λ_t = Var(Y¹_t + Y²_t)`. The pair `(Y¹, Y²)` is the Markov
//! state; it is simulated with exact Gaussian transitions.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::normal;
use crate::scalar::{pos, Scalar};

/// Paths per independently seeded random stream.
pub const PATH_BLOCK: usize = 4096;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TwoFactorParams<T> {
    pub alpha1: T,
    pub alpha2: T,
    pub sigma1: T,
    pub sigma2: T,
    pub rho: T,
    /// Continuously compounded interest rate.
    pub rate: T,
    /// Contract horizon in years; exercise dates are `t_k = k T / n`.
    pub horizon: T,
    pub n: usize,
    /// `F_{0, t_k}` for `k = 0..n`.
    pub forward: Vec<T>,
    /// `K_k` for `k = 0..n`.
    pub strikes: Vec<T>,
}

/// Markov state: the two volatility-scaled factors `(Y¹, Y²)`.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct FactorState<T> {
    pub x1: T,
    pub x2: T,
}

impl<T: Scalar> FactorState<T> {
    pub fn new(x1: T, x2: T) -> Self {
        Self { x1, x2 }
    }
}

/// Exact one-step law `Y_{k+1} = D Y_k + L ξ` with `ξ` standard normal.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLaw<T> {
    pub decay: [T; 2],
    /// Lower-triangular Cholesky factor of the innovation covariance.
    pub chol: [[T; 2]; 2],
}

impl<T: Scalar> TwoFactorParams<T> {
    /// Flat forward and strike curves.
    #[allow(clippy::too_many_arguments)]
    pub fn flat(
        (alpha1, alpha2): (T, T),
        (sigma1, sigma2): (T, T),
        rho: T,
        rate: T,
        horizon: T,
        n: usize,
        forward: T,
        strike: T,
    ) -> Result<Self> {
        let p = Self {
            alpha1,
            alpha2,
            sigma1,
            sigma2,
            rho,
            rate,
            horizon,
            n,
            forward: vec![forward; n],
            strikes: vec![strike; n],
        };
        p.validate()?;
        Ok(p)
    }

    /// Reference parameter set (daily dates over `n` days), flat curves.
    pub fn reference(n: usize, forward: T, strike: T) -> Result<Self> {
        Self::flat(
            (T::of(0.21), T::of(5.4)),
            (T::of(0.36), T::of(1.11)),
            T::of(-0.11),
            T::zero(),
            T::of_usize(n) / T::of(365.0),
            n,
            forward,
            strike,
        )
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParams(m));
        if self.n == 0 {
            return bad("at least one exercise date is required".into());
        }
        if !(self.alpha1 > T::zero() && self.alpha2 > T::zero()) {
            return bad("mean-reversion speeds must be positive".into());
        }
        if !(self.sigma1 >= T::zero() && self.sigma2 >= T::zero()) {
            return bad("volatilities must be nonnegative".into());
        }
        if !(self.rho.abs() <= T::one()) {
            return bad(format!("correlation {} outside [-1, 1]", self.rho));
        }
        if !(self.horizon > T::zero()) || !self.rate.is_finite() {
            return bad("horizon must be positive and the rate finite".into());
        }
        if self.forward.len() != self.n || self.strikes.len() != self.n {
            return bad(format!(
                "{} forwards and {} strikes for {} dates",
                self.forward.len(),
                self.strikes.len(),
                self.n
            ));
        }
        if self.forward.iter().any(|f| !(*f > T::zero()) || !f.is_finite()) {
            return bad("forward curve must be strictly positive".into());
        }
        if self.strikes.iter().any(|k| !k.is_finite()) {
            return bad("strikes must be finite".into());
        }
        Ok(())
    }

    pub fn dt(&self) -> T {
        self.horizon / T::of_usize(self.n)
    }

    pub fn time(&self, k: usize) -> T {
        T::of_usize(k) * self.dt()
    }

    /// Stationary-free covariance of `(Y¹_t, Y²_t)` started at 0.
    pub fn covariance(&self, t: T) -> [[T; 2]; 2] {
        let two = T::of(2.0);
        let integral = |a: T| if t == T::zero() { T::zero() } else { (T::one() - (-a * t).exp()) / a };
        let v1 = self.sigma1 * self.sigma1 * integral(two * self.alpha1);
        let v2 = self.sigma2 * self.sigma2 * integral(two * self.alpha2);
        let c = self.rho * self.sigma1 * self.sigma2 * integral(self.alpha1 + self.alpha2);
        [[v1, c], [c, v2]]
    }

    /// `Λ_t = Var(Y¹_t + Y²_t)`.
    pub fn variance_lambda(&self, t: T) -> T {
        let c = self.covariance(t);
        c[0][0] + c[1][1] + T::of(2.0) * c[0][1]
    }

    pub fn step_law(&self) -> StepLaw<T> {
        let dt = self.dt();
        StepLaw {
            decay: [(-self.alpha1 * dt).exp(), (-self.alpha2 * dt).exp()],
            chol: cholesky(self.covariance(dt)),
        }
    }

    /// Spot price and discounted payoff `v_k = e^{−r t_k}(S_{t_k} − K_k)`.
    pub fn spot_and_payoff(&self, k: usize, y: FactorState<T>) -> (T, T) {
        let t = self.time(k);
        let half = T::of(0.5);
        let spot = self.forward[k] * (y.x1 + y.x2 - half * self.variance_lambda(t)).exp();
        (spot, (-self.rate * t).exp() * (spot - self.strikes[k]))
    }

    pub fn payoff(&self, k: usize, y: FactorState<T>) -> T {
        self.spot_and_payoff(k, y).1
    }

    /// Strip of Black calls `Σ_k e^{−r t_k} Call(F_{0,t_k}, K_k, Λ_{t_k})`:
    /// the premium of the unconstrained `(0, n)` contract.
    pub fn closed_form_strip(&self) -> Result<T> {
        self.validate()?;
        if self.strikes.iter().any(|k| *k < T::zero()) {
            return Err(Error::InvalidParams("negative strike in the call strip".into()));
        }
        let mut total = T::zero();
        for k in 0..self.n {
            let t = self.time(k);
            let call = black_call(self.forward[k], self.strikes[k], self.variance_lambda(t));
            total += (-self.rate * t).exp() * call;
        }
        Ok(total)
    }

    /// Swap value `Σ_k e^{−r t_k}(F_{0,t_k} − K_k)`: the premium at `(n, n)`.
    pub fn swap_value(&self) -> T {
        (0..self.n)
            .map(|k| (-self.rate * self.time(k)).exp() * (self.forward[k] - self.strikes[k]))
            .sum()
    }
}

/// Undiscounted Black call on total log-variance `lambda`; `lambda = 0`
/// gives the intrinsic value and `strike = 0` the forward.
pub fn black_call<T: Scalar>(forward: T, strike: T, lambda: T) -> T {
    if strike <= T::zero() {
        return forward - strike;
    }
    if lambda <= T::zero() {
        return pos(forward - strike);
    }
    let sd = lambda.sqrt();
    let d1 = ((forward / strike).ln() + T::of(0.5) * lambda) / sd;
    forward * normal::cdf(d1) - strike * normal::cdf(d1 - sd)
}

fn cholesky<T: Scalar>(c: [[T; 2]; 2]) -> [[T; 2]; 2] {
    let l11 = pos(c[0][0]).sqrt();
    let l21 = if l11 > T::zero() { c[1][0] / l11 } else { T::zero() };
    let l22 = pos(c[1][1] - l21 * l21).sqrt();
    [[l11, T::zero()], [l21, l22]]
}

/// Simultaneous simulation of many paths, one date at a time.
///
/// Paths are grouped in blocks of [`PATH_BLOCK`], each driven by its own
/// ChaCha stream derived from `(seed, block)`, so the result does not depend
/// on the number of threads. States are stored flat as `[x1, x2, x1, x2, …]`.
pub struct PathStream<T> {
    law: StepLaw<T>,
    rngs: Vec<ChaCha8Rng>,
    states: Vec<T>,
    date: usize,
}

impl<T: Scalar> PathStream<T> {
    pub fn new(params: &TwoFactorParams<T>, n_paths: usize, seed: u64) -> Self {
        let blocks = n_paths.div_ceil(PATH_BLOCK);
        let rngs = (0..blocks)
            .map(|b| {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(b as u64);
                rng
            })
            .collect();
        Self {
            law: params.step_law(),
            rngs,
            states: vec![T::zero(); 2 * n_paths],
            date: 0,
        }
    }

    pub fn date(&self) -> usize {
        self.date
    }

    pub fn len(&self) -> usize {
        self.states.len() / 2
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    /// Current states, flat `[x1, x2]` pairs.
    pub fn states(&self) -> &[T] {
        &self.states
    }

    pub fn advance(&mut self) {
        let law = self.law;
        self.states
            .par_chunks_mut(2 * PATH_BLOCK)
            .zip(self.rngs.par_iter_mut())
            .for_each(|(block, rng)| {
                for y in block.chunks_exact_mut(2) {
                    let z1 = T::of(rng.sample::<f64, _>(StandardNormal));
                    let z2 = T::of(rng.sample::<f64, _>(StandardNormal));
                    y[0] = law.decay[0] * y[0] + law.chol[0][0] * z1;
                    y[1] = law.decay[1] * y[1] + law.chol[1][0] * z1 + law.chol[1][1] * z2;
                }
            });
        self.date += 1;
    }
}

/// Full paths, `n_paths × (n + 1)` states starting at `(0, 0)`.
pub fn simulate_factor_paths<T: Scalar>(
    params: &TwoFactorParams<T>,
    n_paths: usize,
    seed: u64,
) -> Result<Vec<Vec<FactorState<T>>>> {
    params.validate()?;
    if n_paths == 0 {
        return Err(Error::InvalidParams("at least one path is required".into()));
    }
    let mut paths: Vec<Vec<FactorState<T>>> = (0..n_paths).map(|_| Vec::with_capacity(params.n + 1)).collect();
    let mut stream = PathStream::new(params, n_paths, seed);
    loop {
        for (path, y) in paths.iter_mut().zip(stream.states().chunks_exact(2)) {
            path.push(FactorState::new(y[0], y[1]));
        }
        if stream.date() == params.n {
            break;
        }
        stream.advance();
    }
    Ok(paths)
}

/// Forward or strike curve: a flat level or a CSV file with one value per
/// exercise date (first column; a non-numeric header row is skipped).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CurveSpec {
    Flat(f64),
    File(PathBuf),
}

impl CurveSpec {
    fn resolve<T: Scalar>(&self, n: usize, base: &Path) -> Result<Vec<T>> {
        match self {
            CurveSpec::Flat(x) => Ok(vec![T::of(*x); n]),
            CurveSpec::File(p) => {
                let path = if p.is_absolute() { p.clone() } else { base.join(p) };
                let text = fs::read_to_string(&path)
                    .map_err(|e| Error::InvalidParams(format!("{}: {e}", path.display())))?;
                let mut rd = csv::ReaderBuilder::new()
                    .has_headers(false)
                    .flexible(true)
                    .comment(Some(b'#'))
                    .from_reader(text.as_bytes());
                let mut values = Vec::new();
                for (row, rec) in rd.records().enumerate() {
                    let rec = rec?;
                    let field = rec.get(0).unwrap_or("").trim();
                    match field.parse::<f64>() {
                        Ok(x) => values.push(T::of(x)),
                        Err(_) if row == 0 => continue,
                        Err(_) => {
                            return Err(Error::Parse(format!("{}: bad value `{field}`", path.display())));
                        }
                    }
                }
                if values.len() != n {
                    return Err(Error::InvalidParams(format!(
                        "{}: {} values for {n} dates",
                        path.display(),
                        values.len()
                    )));
                }
                Ok(values)
            }
        }
    }
}

/// JSON model description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub rho: f64,
    pub r: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub n: usize,
    pub forward: CurveSpec,
    pub strike: CurveSpec,
}

impl ModelConfig {
    /// Relative curve paths are resolved against `base`.
    pub fn to_params<T: Scalar>(&self, base: &Path) -> Result<TwoFactorParams<T>> {
        let p = TwoFactorParams {
            alpha1: T::of(self.alpha1),
            alpha2: T::of(self.alpha2),
            sigma1: T::of(self.sigma1),
            sigma2: T::of(self.sigma2),
            rho: T::of(self.rho),
            rate: T::of(self.r),
            horizon: T::of(self.horizon),
            n: self.n,
            forward: self.forward.resolve(self.n, base)?,
            strikes: self.strike.resolve(self.n, base)?,
        };
        p.validate()?;
        Ok(p)
    }
}

pub fn load_params<T: Scalar>(path: &Path) -> Result<TwoFactorParams<T>> {
    let text = fs::read_to_string(path)?;
    let cfg: ModelConfig = serde_json::from_str(&text)?;
    cfg.to_params(path.parent().unwrap_or(Path::new(".")))
}
