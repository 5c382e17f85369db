//! Brownian and Bessel(3) bridges on uniform grids, and the duration laws
//! of conditioned half-space excursions.

use statrs::function::gamma::gamma;

use crate::error::{invalid, Result};
use crate::randkit::{fill_gaussian, sample_gamma, RngState};

/// A discretised trajectory in `R^dim`. Values are stored row-major, one
/// row of `dim` coordinates per time.
#[derive(Clone, Debug, PartialEq)]
pub struct PathGrid {
    dim: usize,
    times: Vec<f64>,
    values: Vec<f64>,
    step: f64,
}

impl PathGrid {
    pub fn new(dim: usize, times: Vec<f64>, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(invalid("dim", "must be at least 1"));
        }
        if times.is_empty() || times[0] != 0.0 {
            return Err(invalid("times", "must start at 0"));
        }
        if times.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(invalid("times", "must be strictly increasing"));
        }
        if values.len() != dim * times.len() {
            return Err(invalid("values", "need one point per time"));
        }
        let step = if times.len() > 1 {
            times[times.len() - 1] / (times.len() - 1) as f64
        } else {
            0.0
        };
        Ok(Self {
            dim,
            times,
            values,
            step,
        })
    }

    /// Uniform grid on `[0, duration]` with `steps` intervals.
    pub fn uniform_times(duration: f64, steps: usize) -> Vec<f64> {
        let h = duration / steps as f64;
        let mut t: Vec<f64> = (0..=steps).map(|k| k as f64 * h).collect();
        t[steps] = duration;
        t
    }

    pub(crate) fn from_uniform(dim: usize, duration: f64, values: Vec<f64>) -> Self {
        let steps = values.len() / dim - 1;
        Self {
            dim,
            times: Self::uniform_times(duration, steps),
            values,
            step: duration / steps as f64,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Number of grid intervals.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// Mean grid step.
    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn duration(&self) -> f64 {
        *self.times.last().expect("non-empty grid")
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn last(&self) -> &[f64] {
        self.point(self.len() - 1)
    }

    /// Scalar value of a one-dimensional path.
    pub fn scalar(&self, i: usize) -> f64 {
        self.values[i * self.dim]
    }

    /// Piecewise-linear interpolation at time `t` (clamped to the grid).
    pub fn interpolate(&self, t: f64) -> Vec<f64> {
        let n = self.len();
        if t <= 0.0 || n == 1 {
            return self.point(0).to_vec();
        }
        if t >= self.duration() {
            return self.last().to_vec();
        }
        let k = self.times.partition_point(|&s| s <= t) - 1;
        let (t0, t1) = (self.times[k], self.times[k + 1]);
        let f = (t - t0) / (t1 - t0);
        let (p, q) = (self.point(k), self.point(k + 1));
        p.iter().zip(q).map(|(a, b)| a + f * (b - a)).collect()
    }

    /// Grid of pointwise Euclidean norms.
    pub fn norms(&self) -> PathGrid {
        let values = (0..self.len())
            .map(|i| self.point(i).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        PathGrid {
            dim: 1,
            times: self.times.clone(),
            values,
            step: self.step,
        }
    }
}

fn check_steps(steps: usize, duration: f64) -> Result<()> {
    if steps < 2 {
        return Err(invalid("steps", format!("need at least 2, got {steps}")));
    }
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(invalid("duration", format!("must be positive, got {duration}")));
    }
    Ok(())
}

/// Row-major bridge values from `start` to `end` on a uniform grid.
pub(crate) fn bridge_values(
    rng: &mut RngState,
    start: &[f64],
    end: &[f64],
    duration: f64,
    steps: usize,
) -> Vec<f64> {
    let n = start.len();
    let h = duration / steps as f64;
    let mut values = Vec::with_capacity(n * (steps + 1));
    values.extend_from_slice(start);
    let mut z = vec![0.0; n];
    let mut cur = start.to_vec();
    for k in 0..steps - 1 {
        let remaining = duration - k as f64 * h;
        let f = h / remaining;
        let sd = (h * (remaining - h) / remaining).sqrt();
        fill_gaussian(rng, &mut z);
        for c in 0..n {
            cur[c] += (end[c] - cur[c]) * f + sd * z[c];
        }
        values.extend_from_slice(&cur);
    }
    values.extend_from_slice(end);
    values
}

/// Row-major Brownian motion values from `start` on a uniform grid.
pub(crate) fn brownian_values(rng: &mut RngState, start: &[f64], duration: f64, steps: usize) -> Vec<f64> {
    let n = start.len();
    let sd = (duration / steps as f64).sqrt();
    let mut values = Vec::with_capacity(n * (steps + 1));
    values.extend_from_slice(start);
    let mut z = vec![0.0; n];
    for k in 0..steps {
        fill_gaussian(rng, &mut z);
        for c in 0..n {
            let prev = values[k * n + c];
            values.push(prev + sd * z[c]);
        }
    }
    values
}

pub fn sample_brownian_bridge(
    rng: &mut RngState,
    n: usize,
    endpoint: &[f64],
    duration: f64,
    steps: usize,
) -> Result<PathGrid> {
    check_steps(steps, duration)?;
    if n == 0 || endpoint.len() != n {
        return Err(invalid("endpoint", format!("expected {n} coordinates")));
    }
    let values = bridge_values(rng, &vec![0.0; n], endpoint, duration, steps);
    Ok(PathGrid::from_uniform(n, duration, values))
}

pub fn sample_brownian_motion(
    rng: &mut RngState,
    start: &[f64],
    duration: f64,
    steps: usize,
) -> Result<PathGrid> {
    check_steps(steps, duration)?;
    if start.is_empty() {
        return Err(invalid("start", "need at least one coordinate"));
    }
    let values = brownian_values(rng, start, duration, steps);
    Ok(PathGrid::from_uniform(start.len(), duration, values))
}

/// Bessel(3) bridge from 0 to 0, returned together with the underlying
/// three-dimensional Brownian bridge whose norm it is.
pub fn sample_bessel3_bridge_with_latent(
    rng: &mut RngState,
    duration: f64,
    steps: usize,
) -> Result<(PathGrid, PathGrid)> {
    let latent = sample_brownian_bridge(rng, 3, &[0.0; 3], duration, steps)?;
    Ok((latent.norms(), latent))
}

pub fn sample_bessel3_bridge(rng: &mut RngState, duration: f64, steps: usize) -> Result<PathGrid> {
    Ok(sample_bessel3_bridge_with_latent(rng, duration, steps)?.0)
}

/// Density of the duration factor `r` under the conditioned excursion law in
/// dimension `d`: `e^{-1/(2r)} / (2^{d/2} Γ(d/2) r^{d/2+1})`.
pub fn gamma_x_duration_density(r: f64, d: usize) -> f64 {
    if r <= 0.0 {
        return 0.0;
    }
    let h = d as f64 / 2.0;
    let log = -1.0 / (2.0 * r) - h * 2f64.ln() - gamma(h).ln() - (h + 1.0) * r.ln();
    log.exp()
}

/// Inverse-gamma draw `r = 1/s` with `s ~ Gamma(d/2, rate 1/2)`.
pub fn sample_gamma_x_duration(rng: &mut RngState, d: usize) -> Result<f64> {
    if d < 3 {
        return Err(invalid("d", format!("need d >= 3, got {d}")));
    }
    let s = sample_gamma(rng, d as f64 / 2.0, 0.5)?;
    Ok(1.0 / s)
}

/// Truncation window for the `r^{-3/2}` duration law.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ItoWindow {
    pub r_min: f64,
    pub r_max: f64,
}

impl Default for ItoWindow {
    fn default() -> Self {
        Self {
            r_min: 1e-4,
            r_max: 1e4,
        }
    }
}

impl ItoWindow {
    pub fn new(r_min: f64, r_max: f64) -> Result<Self> {
        if !(r_min > 0.0 && r_max > r_min && r_max.is_finite()) {
            return Err(invalid(
                "window",
                format!("need 0 < r_min < r_max, got [{r_min}, {r_max}]"),
            ));
        }
        Ok(Self { r_min, r_max })
    }

    fn span(&self) -> f64 {
        self.r_min.powf(-0.5) - self.r_max.powf(-0.5)
    }

    pub fn cdf(&self, r: f64) -> f64 {
        if r <= self.r_min {
            0.0
        } else if r >= self.r_max {
            1.0
        } else {
            (self.r_min.powf(-0.5) - r.powf(-0.5)) / self.span()
        }
    }

    pub fn inverse_cdf(&self, u: f64) -> f64 {
        let v = self.r_min.powf(-0.5) - u * self.span();
        (1.0 / (v * v)).clamp(self.r_min, self.r_max)
    }

    pub fn density(&self, r: f64) -> f64 {
        if r < self.r_min || r > self.r_max {
            0.0
        } else {
            0.5 * r.powf(-1.5) / self.span()
        }
    }
}

pub fn sample_ito_duration(rng: &mut RngState, r_min: f64, r_max: f64) -> Result<f64> {
    let w = ItoWindow::new(r_min, r_max)?;
    Ok(w.inverse_cdf(rng.uniform()))
}
