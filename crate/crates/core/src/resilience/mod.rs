//! Rolling ball-and-basin resilience and the disaster decay sequence.

mod spline;

pub use spline::{Smoothing, SmoothingSpline, SplineBasis, SplineCache};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ResilienceConfig {
    /// Window length in weeks (even, at least 8).
    pub window: usize,
    pub bins: usize,
    /// Fixed spline smoothing; `None` selects it by generalized cross-validation.
    pub spline_smoothing: Option<f64>,
    pub dense_grid_points: usize,
    pub min_points: usize,
}

impl Default for ResilienceConfig {
    fn default() -> Self {
        Self { window: 26, bins: 20, spline_smoothing: None, dense_grid_points: 200, min_points: 6 }
    }
}

impl ResilienceConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 8 || !self.window.is_multiple_of(2) {
            return Err(Error::Config(format!("window must be an even number >= 8, got {}", self.window)));
        }
        if self.bins < 5 {
            return Err(Error::Config(format!("bins must be >= 5, got {}", self.bins)));
        }
        if self.min_points < 6 {
            return Err(Error::Config(format!("min_points must be >= 6, got {}", self.min_points)));
        }
        if self.dense_grid_points < 4 {
            return Err(Error::Config("dense_grid_points must be >= 4".into()));
        }
        if let Some(s) = self.spline_smoothing {
            if !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!("spline_smoothing must be non-negative, got {s}")));
            }
        }
        Ok(())
    }

    fn smoothing(&self) -> Smoothing {
        self.spline_smoothing.map_or(Smoothing::Gcv, Smoothing::Fixed)
    }
}

/// Reconstructed drift and potential on an ascending state grid.
#[derive(Clone, Debug, PartialEq)]
pub struct PotentialEstimate {
    pub v_grid: Vec<f64>,
    /// Estimated drift `f(v)`.
    pub f_hat: Vec<f64>,
    /// `V(v) = -int f dv`, with `V[0] = 0`.
    pub potential: Vec<f64>,
    /// `V''(v)`.
    pub curvature: Vec<f64>,
    pub v_star: f64,
    /// `V''(v_star)`.
    pub resilience: f64,
}

/// Ranges below this fraction of the series magnitude count as constant.
const FLAT_TOLERANCE: f64 = 1e-9;

/// Potential landscape of one window of `(t, v)` observations, or `None`
/// when the window is too short or flat to support an estimate.
pub fn estimate_potential(points: &[(f64, f64)], config: &ResilienceConfig) -> Option<PotentialEstimate> {
    estimate_with(points, config, &mut SplineCache::new())
}

fn estimate_with(
    points: &[(f64, f64)],
    config: &ResilienceConfig,
    cache: &mut SplineCache,
) -> Option<PotentialEstimate> {
    let mut pts: Vec<(f64, f64)> = points.iter().copied().filter(|(t, v)| t.is_finite() && v.is_finite()).collect();
    if pts.len() < config.min_points.max(3) {
        return None;
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    if pts.windows(2).any(|w| w[1].0 <= w[0].0) {
        // repeated time stamps cannot be fitted
        return None;
    }
    let (lo, hi) = pts.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| (lo.min(p.1), hi.max(p.1)));
    let range = hi - lo;
    let magnitude = lo.abs().max(hi.abs());
    if range <= FLAT_TOLERANCE * magnitude || range == 0.0 {
        return None;
    }
    // Fit in normalized units u = (v - center) / range. The curvature
    // -df/dv is invariant under this affine change of state.
    let center = 0.5 * (lo + hi);
    let knots: Vec<f64> = pts.iter().map(|p| p.0).collect();
    let u: Vec<f64> = pts.iter().map(|p| (p.1 - center) / range).collect();
    let spline = cache.fit(&knots, &u, config.smoothing());

    let n_dense = config.dense_grid_points;
    let span = knots[knots.len() - 1] - knots[0];
    let dense: Vec<(f64, f64)> = (0..n_dense).map(|i| spline.eval(span * i as f64 / (n_dense - 1) as f64)).collect();

    // bin dense states, average state and drift per occupied bin
    let (u_lo, u_hi) = dense.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), d| (a.min(d.0), b.max(d.0)));
    if u_hi - u_lo <= FLAT_TOLERANCE {
        return None;
    }
    let bins = config.bins;
    let mut sum_u = vec![0.0; bins];
    let mut sum_f = vec![0.0; bins];
    let mut count = vec![0usize; bins];
    for &(ud, fd) in &dense {
        let b = (((ud - u_lo) / (u_hi - u_lo) * bins as f64) as usize).min(bins - 1);
        sum_u[b] += ud;
        sum_f[b] += fd;
        count[b] += 1;
    }
    let knots_v: Vec<(f64, f64)> =
        (0..bins).filter(|&b| count[b] > 0).map(|b| (sum_u[b] / count[b] as f64, sum_f[b] / count[b] as f64)).collect();
    if knots_v.len() < 2 {
        return None;
    }

    // the state grid spans the bin locations, where the interpolant is defined
    let (g_lo, g_hi) = (knots_v[0].0, knots_v[knots_v.len() - 1].0);
    let step = (g_hi - g_lo) / (n_dense - 1) as f64;
    let grid: Vec<f64> = (0..n_dense).map(|i| g_lo + step * i as f64).collect();
    let f_hat: Vec<f64> = grid.iter().map(|&x| interpolate(&knots_v, x)).collect();
    let mut potential = vec![0.0; n_dense];
    for i in 1..n_dense {
        potential[i] = potential[i - 1] - 0.5 * (f_hat[i - 1] + f_hat[i]) * step;
    }
    let curvature = second_difference(&potential, step);
    let star = potential.iter().enumerate().fold(0, |best, (i, &p)| if p < potential[best] { i } else { best });

    // back to original units: v = center + range u, f scales with range,
    // V with range^2, V'' is unchanged
    Some(PotentialEstimate {
        v_grid: grid.iter().map(|x| center + range * x).collect(),
        f_hat: f_hat.iter().map(|f| f * range).collect(),
        potential: potential.iter().map(|p| p * range * range).collect(),
        v_star: center + range * grid[star],
        resilience: curvature[star],
        curvature,
    })
}

/// Piecewise-linear interpolation through ascending knots, clamped to the
/// end values outside.
fn interpolate(knots: &[(f64, f64)], x: f64) -> f64 {
    let last = knots.len() - 1;
    if x <= knots[0].0 {
        return knots[0].1;
    }
    if x >= knots[last].0 {
        return knots[last].1;
    }
    let i = knots.partition_point(|k| k.0 <= x) - 1;
    let (x0, y0) = knots[i];
    let (x1, y1) = knots[i + 1];
    y0 + (y1 - y0) * (x - x0) / (x1 - x0)
}

/// Second derivative on a uniform grid: centered inside, second-order
/// one-sided stencils at the ends.
fn second_difference(y: &[f64], h: f64) -> Vec<f64> {
    let n = y.len();
    let h2 = h * h;
    let mut out = vec![0.0; n];
    for i in 1..n - 1 {
        out[i] = (y[i + 1] - 2.0 * y[i] + y[i - 1]) / h2;
    }
    out[0] = (2.0 * y[0] - 5.0 * y[1] + 4.0 * y[2] - y[3]) / h2;
    out[n - 1] = (2.0 * y[n - 1] - 5.0 * y[n - 2] + 4.0 * y[n - 3] - y[n - 4]) / h2;
    out
}

/// Resilience at every week: the potential curvature at its minimum over the
/// window `[t - W/2, t + W/2]`, clipped to the series. `None` marks windows
/// without a defined estimate.
pub fn rolling_resilience(v: &[f64], config: &ResilienceConfig) -> Vec<Option<f64>> {
    rolling_resilience_cached(v, config, &mut SplineCache::new())
}

/// [`rolling_resilience`] sharing spline decompositions across calls.
pub fn rolling_resilience_cached(v: &[f64], config: &ResilienceConfig, cache: &mut SplineCache) -> Vec<Option<f64>> {
    let half = config.window / 2;
    let n = v.len();
    (0..n)
        .map(|i| {
            let lo = i.saturating_sub(half);
            let hi = (i + half).min(n - 1);
            let points: Vec<(f64, f64)> = (lo..=hi).map(|j| (j as f64, v[j])).collect();
            estimate_with(&points, config, cache).map(|e| e.resilience)
        })
        .collect()
}

/// Decay rate configuration for fixed-rate use outside the model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayConfig {
    pub alpha: f64,
}

impl Default for DecayConfig {
    /// Half-life of four weeks.
    fn default() -> Self {
        Self { alpha: std::f64::consts::LN_2 / 4.0 }
    }
}

/// `D[t] = sum over events with t_k <= t of d_k exp(-alpha (t - t_k))`.
/// `events` holds `(week, severity)` pairs in local week indices.
pub fn decay_sequence(events: &[(usize, f64)], alpha: f64, t: usize) -> Vec<f64> {
    (0..t)
        .map(|week| {
            events.iter().filter(|&&(tk, _)| tk <= week).map(|&(tk, d)| d * (-alpha * (week - tk) as f64).exp()).sum()
        })
        .collect()
}

/// `dD[t] / d alpha`, the companion of [`decay_sequence`].
pub fn decay_sequence_alpha_derivative(events: &[(usize, f64)], alpha: f64, t: usize) -> Vec<f64> {
    (0..t)
        .map(|week| {
            events
                .iter()
                .filter(|&&(tk, _)| tk <= week)
                .map(|&(tk, d)| {
                    let lag = (week - tk) as f64;
                    -lag * d * (-alpha * lag).exp()
                })
                .sum()
        })
        .collect()
}
