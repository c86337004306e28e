//! Inversion of the exponential temporal-decorrelation model
//!
//! ```text
//! gamma(t) = (1 - rho_inf) * exp(-t / tau) + rho_inf
//! ```
//!
//! per pixel, from the per-lag median of all interferometric pairs.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Raster;

pub const TAU_MIN: f64 = 0.5;
pub const TAU_MAX: f64 = 365.0;
pub const RHO_MIN: f64 = 0.0;
pub const RHO_MAX: f64 = 1.0;
pub const TAU_INIT: f64 = 30.0;
pub const MAX_ITERATIONS: usize = 100;
pub const STEP_TOLERANCE: f64 = 1e-8;
pub const COST_TOLERANCE: f64 = 1e-12;
/// Series whose value range falls below this are treated as constant.
pub const DEGENERATE_RANGE: f64 = 1e-3;
pub const BOUND_PROXIMITY: f64 = 1e-9;

/// Coherence samples ordered by temporal baseline (days).
#[derive(Debug, Clone, PartialEq)]
pub struct CoherenceSeries {
    lags: Vec<f64>,
    values: Vec<f64>,
}

impl CoherenceSeries {
    /// Samples may arrive in any order; they are stored sorted by lag.
    pub fn new(lags: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if lags.len() != values.len() {
            return Err(Error::Usage(format!(
                "{} lags but {} coherence values",
                lags.len(),
                values.len()
            )));
        }
        if lags.iter().chain(&values).any(|v| !v.is_finite()) {
            return Err(Error::Data("non-finite lag or coherence sample".into()));
        }
        if lags.iter().any(|&t| t <= 0.0) {
            return Err(Error::Usage("lags must be positive".into()));
        }
        if values.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::Data("coherence samples must lie in [0, 1]".into()));
        }
        let mut pairs: Vec<(f64, f64)> = lags.into_iter().zip(values).collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
        if pairs.windows(2).any(|w| w[0].0 == w[1].0) {
            return Err(Error::Usage("lags must be distinct".into()));
        }
        let (lags, values) = pairs.into_iter().unzip();
        Ok(Self { lags, values })
    }

    pub fn lags(&self) -> &[f64] {
        &self.lags
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.lags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lags.is_empty()
    }

    /// Sum of squared residuals of the model at `(tau, rho_inf)`.
    pub fn cost(&self, tau: f64, rho_inf: f64) -> f64 {
        self.lags
            .iter()
            .zip(&self.values)
            .map(|(&t, &g)| {
                let r = decay_model(t, tau, rho_inf) - g;
                r * r
            })
            .sum()
    }

    fn require_fittable(&self) -> Result<()> {
        if self.len() < 3 {
            return Err(Error::Usage(format!(
                "fitting needs at least 3 samples, got {}",
                self.len()
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitStatus {
    Converged,
    DegenerateConstant,
    BoundHit,
}

impl FitStatus {
    /// Integer code used in status rasters.
    pub fn code(self) -> u8 {
        match self {
            FitStatus::Converged => 1,
            FitStatus::DegenerateConstant => 2,
            FitStatus::BoundHit => 3,
        }
    }
}

/// Code for pixels with fewer than three valid lags.
pub const STATUS_INSUFFICIENT: u8 = 4;

/// Sidecar text documenting the status raster codes.
pub const STATUS_LEGEND: &str = "\
# status raster codes
# nodata  pixel masked as invalid
1 converged
2 degenerate_constant (value range < 1e-3; rho_inf = mean, tau = 0.5)
3 bound_hit (tau or rho_inf within 1e-9 of its bound)
4 insufficient_samples (fewer than 3 valid lags; outputs are nodata)
";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecayParams {
    /// Decay time constant, days.
    pub tau: f64,
    pub rho_inf: f64,
    /// Root-mean-square residual of the fit.
    pub residual: f64,
    pub status: FitStatus,
}

pub fn decay_model(t: f64, tau: f64, rho_inf: f64) -> f64 {
    (1.0 - rho_inf) * (-t / tau).exp() + rho_inf
}

fn status_for(tau: f64, rho: f64) -> FitStatus {
    let near = |v: f64, lo: f64, hi: f64| (v - lo).abs() <= BOUND_PROXIMITY || (hi - v).abs() <= BOUND_PROXIMITY;
    if near(tau, TAU_MIN, TAU_MAX) || near(rho, RHO_MIN, RHO_MAX) {
        FitStatus::BoundHit
    } else {
        FitStatus::Converged
    }
}

fn finish(series: &CoherenceSeries, tau: f64, rho_inf: f64, status: FitStatus) -> DecayParams {
    DecayParams {
        tau,
        rho_inf,
        residual: (series.cost(tau, rho_inf) / series.len() as f64).sqrt(),
        status,
    }
}

// The solver works in (ln tau, rho_inf); the residuals are far better
// conditioned in ln tau across the three decades of admissible tau.
const U_MIN: f64 = -std::f64::consts::LN_2;

fn u_max() -> f64 {
    TAU_MAX.ln()
}

fn clamp_params(p: [f64; 2]) -> [f64; 2] {
    [p[0].clamp(U_MIN, u_max()), p[1].clamp(RHO_MIN, RHO_MAX)]
}

fn tau_of(u: f64) -> f64 {
    if u <= U_MIN {
        TAU_MIN
    } else if u >= u_max() {
        TAU_MAX
    } else {
        u.exp()
    }
}

/// Cost, gradient `J^T r` and Gauss-Newton matrix `J^T J` at `p = (ln tau, rho)`.
fn linearize(series: &CoherenceSeries, p: [f64; 2]) -> (f64, [f64; 2], [[f64; 2]; 2]) {
    let (tau, rho) = (tau_of(p[0]), p[1]);
    let mut cost = 0.0;
    let mut grad = [0.0; 2];
    let mut jtj = [[0.0; 2]; 2];
    for (&t, &g) in series.lags.iter().zip(&series.values) {
        let e = (-t / tau).exp();
        let r = (1.0 - rho) * e + rho - g;
        let j = [(1.0 - rho) * e * t / tau, 1.0 - e];
        cost += r * r;
        for a in 0..2 {
            grad[a] += j[a] * r;
            for b in 0..2 {
                jtj[a][b] += j[a] * j[b];
            }
        }
    }
    (cost, grad, jtj)
}

/// Damped Gauss-Newton step restricted to the free parameters.
fn lm_step(grad: [f64; 2], jtj: [[f64; 2]; 2], lambda: f64, free: [bool; 2]) -> [f64; 2] {
    let mut a = jtj;
    for i in 0..2 {
        let d = if jtj[i][i] > 0.0 { jtj[i][i] } else { 1.0 };
        a[i][i] += lambda * d;
    }
    let solve1 = |i: usize| if a[i][i] > 0.0 { -grad[i] / a[i][i] } else { 0.0 };
    match free {
        [true, true] => {
            let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
            if det.abs() <= f64::EPSILON * a[0][0] * a[1][1] {
                return [solve1(0), 0.0];
            }
            [
                -(a[1][1] * grad[0] - a[0][1] * grad[1]) / det,
                -(a[0][0] * grad[1] - a[1][0] * grad[0]) / det,
            ]
        }
        [true, false] => [solve1(0), 0.0],
        [false, true] => [0.0, solve1(1)],
        [false, false] => [0.0, 0.0],
    }
}

/// A parameter is held fixed when it sits on a bound and descent would push
/// it further out.
fn free_set(p: [f64; 2], grad: [f64; 2]) -> [bool; 2] {
    let bounds = [(U_MIN, u_max()), (RHO_MIN, RHO_MAX)];
    let mut free = [true; 2];
    for i in 0..2 {
        let (lo, hi) = bounds[i];
        if (p[i] <= lo && grad[i] > 0.0) || (p[i] >= hi && grad[i] < 0.0) {
            free[i] = false;
        }
    }
    free
}

fn levenberg_marquardt(series: &CoherenceSeries, start: [f64; 2]) -> ([f64; 2], f64) {
    let mut p = clamp_params(start);
    let mut lambda = 1e-3;
    let (mut cost, mut grad, mut jtj) = linearize(series, p);
    'outer: for _ in 0..MAX_ITERATIONS {
        let free = free_set(p, grad);
        if free == [false, false] {
            break;
        }
        loop {
            let delta = lm_step(grad, jtj, lambda, free);
            let trial = clamp_params([p[0] + delta[0], p[1] + delta[1]]);
            let step = (trial[0] - p[0]).abs().max((trial[1] - p[1]).abs());
            let trial_cost = series.cost(tau_of(trial[0]), trial[1]);
            if trial_cost < cost {
                let prev = cost;
                p = trial;
                lambda = (lambda / 10.0).max(1e-12);
                (cost, grad, jtj) = linearize(series, p);
                // Judge the step size on the undamped step so heavy damping
                // after a rejected jump cannot fake convergence.
                let gn = lm_step(grad, jtj, 0.0, free_set(p, grad));
                let gn = clamp_params([p[0] + gn[0], p[1] + gn[1]]);
                let gn_step = (gn[0] - p[0]).abs().max((gn[1] - p[1]).abs());
                if gn_step < STEP_TOLERANCE || prev - cost < COST_TOLERANCE * prev {
                    break 'outer;
                }
                continue 'outer;
            }
            if step < STEP_TOLERANCE * 1e-3 {
                break 'outer;
            }
            lambda *= 10.0;
            if lambda > 1e16 {
                break 'outer;
            }
        }
    }
    (p, cost)
}

/// Optimal `rho_inf` for fixed decay factors `e_k = exp(-t_k / tau)`; the
/// model is linear in `rho_inf`, so the bounded optimum is a clamp.
fn profile_rho(decay: &[f64], values: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for (&e, &g) in decay.iter().zip(values) {
        num += (1.0 - e) * (g - e);
        den += (1.0 - e) * (1.0 - e);
    }
    if den > 0.0 {
        (num / den).clamp(RHO_MIN, RHO_MAX)
    } else {
        RHO_MIN
    }
}

const SCAN_POINTS: usize = 48;

/// Best start on a coarse log-spaced tau scan with `rho_inf` profiled out.
fn scan_start(series: &CoherenceSeries) -> [f64; 2] {
    let mut best = (f64::INFINITY, [U_MIN, RHO_MIN]);
    let mut decay = vec![0.0; series.len()];
    for i in 0..SCAN_POINTS {
        let u = U_MIN + (u_max() - U_MIN) * i as f64 / (SCAN_POINTS - 1) as f64;
        let tau = tau_of(u);
        for (d, &t) in decay.iter_mut().zip(&series.lags) {
            *d = (-t / tau).exp();
        }
        let rho = profile_rho(&decay, &series.values);
        let c = series.cost(tau, rho);
        if c < best.0 {
            best = (c, [u, rho]);
        }
    }
    best.1
}

/// Bounded least-squares fit of the decay model by Levenberg-Marquardt with
/// projection onto `tau in [0.5, 365]`, `rho_inf in [0, 1]`.
///
/// The cost surface is multimodal for noisy series (a fast drop to a high
/// floor competes with a slow drop to a low one), so the solver runs from
/// the nominal start `(30, min value)` and from the best point of a coarse
/// profile scan, keeping the lower cost.
pub fn fit_decay(series: &CoherenceSeries) -> Result<DecayParams> {
    series.require_fittable()?;
    let (lo, hi) = series
        .values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if hi - lo < DEGENERATE_RANGE {
        let mean = series.values.iter().sum::<f64>() / series.len() as f64;
        return Ok(finish(series, TAU_MIN, mean, FitStatus::DegenerateConstant));
    }
    let (a, cost_a) = levenberg_marquardt(series, [TAU_INIT.ln(), lo]);
    let (b, cost_b) = levenberg_marquardt(series, scan_start(series));
    let p = if cost_b < cost_a { b } else { a };
    let tau = tau_of(p[0]);
    Ok(finish(series, tau, p[1], status_for(tau, p[1])))
}

pub const GRID_TAU_STEP: f64 = 0.5;
pub const GRID_RHO_STEP: f64 = 0.005;

/// Exhaustive search on `tau in {0.5, 1.0, ..., 365}` x `rho_inf in {0, 0.005, ..., 1}`.
/// Independent of the solver; used to audit it.
pub fn grid_oracle(series: &CoherenceSeries) -> Result<DecayParams> {
    series.require_fittable()?;
    let n_tau = ((TAU_MAX - TAU_MIN) / GRID_TAU_STEP).round() as usize + 1;
    let n_rho = ((RHO_MAX - RHO_MIN) / GRID_RHO_STEP).round() as usize + 1;
    let mut best = (f64::INFINITY, TAU_MIN, RHO_MIN);
    let mut decay = vec![0.0; series.len()];
    for i in 0..n_tau {
        let tau = TAU_MIN + i as f64 * GRID_TAU_STEP;
        for (d, &t) in decay.iter_mut().zip(&series.lags) {
            *d = (-t / tau).exp();
        }
        for j in 0..n_rho {
            let rho = RHO_MIN + j as f64 * GRID_RHO_STEP;
            let mut c = 0.0;
            for (&e, &g) in decay.iter().zip(&series.values) {
                let r = (1.0 - rho) * e + rho - g;
                c += r * r;
            }
            if c < best.0 {
                best = (c, tau, rho);
            }
        }
    }
    Ok(finish(series, best.1, best.2, status_for(best.1, best.2)))
}

/// Per-lag, per-pixel median of every pair raster sharing that lag.
///
/// Nodata values are skipped; a pixel with no valid value at a lag stays
/// nodata. Even counts take the mean of the two middle values.
pub fn median_aggregate(pairs: &[(u32, &Raster)]) -> Result<Vec<(u32, Raster)>> {
    let Some((_, first)) = pairs.first() else {
        return Ok(Vec::new());
    };
    for (_, r) in pairs {
        first.check_same_grid(r)?;
    }
    let mut by_lag: BTreeMap<u32, Vec<&Raster>> = BTreeMap::new();
    for &(lag, r) in pairs {
        by_lag.entry(lag).or_default().push(r);
    }
    let out = by_lag
        .into_iter()
        .map(|(lag, rasters)| {
            let values: Vec<f64> = (0..first.len())
                .into_par_iter()
                .map_init(Vec::new, |buf, i| {
                    buf.clear();
                    buf.extend(rasters.iter().map(|r| r.values()[i]).filter(|v| !v.is_nan()));
                    median_in_place(buf)
                })
                .collect();
            let mut r = Raster::new(first.width(), first.height(), first.spacing, values).expect("same grid");
            r.units = first.units.clone();
            (lag, r)
        })
        .collect();
    Ok(out)
}

/// `NaN` for an empty slice.
pub fn median_in_place(values: &mut [f64]) -> f64 {
    let n = values.len();
    if n == 0 {
        return f64::NAN;
    }
    values.sort_by(|a, b| a.total_cmp(b));
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-pixel fit outputs. Masked pixels are nodata everywhere.
#[derive(Debug, Clone)]
pub struct DecayMaps {
    pub tau: Raster,
    pub rho_inf: Raster,
    pub residual: Raster,
    /// [`FitStatus::code`] or [`STATUS_INSUFFICIENT`].
    pub status: Raster,
}

/// Fit every valid pixel of a per-lag median stack independently.
///
/// `mask` marks valid pixels with 1; zero or nodata excludes the pixel.
/// Pixels with fewer than three valid lags get [`STATUS_INSUFFICIENT`].
pub fn fit_decay_map(median_stack: &[(u32, Raster)], mask: &Raster) -> Result<DecayMaps> {
    if median_stack.windows(2).any(|w| w[0].0 >= w[1].0) {
        return Err(Error::Usage("median stack lags must be strictly increasing".into()));
    }
    for (_, r) in median_stack {
        mask.check_same_grid(r)?;
    }
    let lags: Vec<f64> = median_stack.iter().map(|(l, _)| *l as f64).collect();
    let fits: Vec<Option<std::result::Result<DecayParams, u8>>> = (0..mask.len())
        .into_par_iter()
        .map(|i| {
            let m = mask.values()[i];
            if m.is_nan() || m == 0.0 {
                return None;
            }
            let (l, v): (Vec<f64>, Vec<f64>) = lags
                .iter()
                .zip(median_stack)
                .map(|(&l, (_, r))| (l, r.values()[i]))
                .filter(|(_, v)| !v.is_nan())
                .unzip();
            if l.len() < 3 {
                return Some(Err(STATUS_INSUFFICIENT));
            }
            let fit = CoherenceSeries::new(l, v)
                .and_then(|s| fit_decay(&s))
                .map_err(|_| STATUS_INSUFFICIENT);
            Some(fit)
        })
        .collect();

    let blank = || Raster::filled(mask.width(), mask.height(), mask.spacing, f64::NAN);
    let mut maps = DecayMaps {
        tau: blank().with_role("tau", "days"),
        rho_inf: blank().with_role("rho_inf", "1"),
        residual: blank().with_role("fit_residual", "1"),
        status: blank().with_role("fit_status", "code"),
    };
    for (i, fit) in fits.into_iter().enumerate() {
        match fit {
            None => {}
            Some(Ok(p)) => {
                maps.tau.values_mut()[i] = p.tau;
                maps.rho_inf.values_mut()[i] = p.rho_inf;
                maps.residual.values_mut()[i] = p.residual;
                maps.status.values_mut()[i] = p.status.code() as f64;
            }
            Some(Err(code)) => maps.status.values_mut()[i] = code as f64,
        }
    }
    Ok(maps)
}
