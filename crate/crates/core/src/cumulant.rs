//! Isotropic cumulant `κ(q) = ψ(q) + J(q)` of a Lévy system, its roots, and
//! the derived spine exponent `κ(ω + q)`.
//!
//! `J(q) = ∫ L̃(dy) e^{qy}` is the `q`-moment of the child sizes produced per
//! unit time by a cell of unit size. Two systems are supported:
//!
//! - the finite-activity toy, where a jump sends `x` to `β|x|V` for a uniform
//!   direction `V`, so `J(q) = λ E|θ - βV|^q`;
//! - the isotropic α-stable system in `R^d`, with jump density
//!   `c(α) e^{dx} / |e^x Φ - θ|^{α+d}` in log-radius `x` and direction `Φ`.
//!   Its jump integral diverges at the upper tail unless `q < α` and at
//!   `(x, Φ) = (0, θ)` unless `q > α`, so it is always evaluated over an
//!   explicit window of `x`.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use statrs::function::gamma::gamma;

use crate::error::{invalid, Error, Result};
use crate::quadrature::{integrate, integrate_with_breaks, QuadOptions};
use crate::randkit::{replicate, sample_uniform_sphere, Provenance, RngState};
use crate::stats::{mean_ci, EstimateReport};

/// Root residual accepted by `find_roots` and `spine_exponent`.
pub const ROOT_TOLERANCE: f64 = 1e-9;
const BISECTION_TOLERANCE: f64 = 1e-10;
const SCAN_POINTS: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub enum LevySystemSpec {
    ToyCP {
        lambda: f64,
        beta: f64,
        b: f64,
        n: usize,
    },
    IsotropicStable {
        alpha: f64,
        d: usize,
        /// Integration window `[x_min, x_max]` in log-radius; either end
        /// may be infinite where the integral converges.
        window: (f64, f64),
    },
}

impl LevySystemSpec {
    pub fn toy(lambda: f64, beta: f64, b: f64) -> Self {
        Self::ToyCP { lambda, beta, b, n: 2 }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Self::ToyCP { lambda, beta, b, n } => {
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(invalid("lambda", format!("must be nonnegative, got {lambda}")));
                }
                if !(beta > 0.0 && beta < 1.0) {
                    return Err(invalid("beta", format!("must lie in (0, 1), got {beta}")));
                }
                if !b.is_finite() {
                    return Err(invalid("drift", "must be finite"));
                }
                if n < 2 {
                    return Err(invalid("n", format!("need n >= 2, got {n}")));
                }
            }
            Self::IsotropicStable { alpha, d, window } => {
                if !(alpha > 0.0 && alpha < 2.0) {
                    return Err(invalid("alpha", format!("must lie in (0, 2), got {alpha}")));
                }
                if d < 2 {
                    return Err(invalid("d", format!("need d >= 2, got {d}")));
                }
                if !(window.0 < window.1) {
                    return Err(invalid("window", "need x_min < x_max"));
                }
            }
        }
        Ok(())
    }

    /// Ambient dimension of the sizes.
    pub fn dim(&self) -> usize {
        match *self {
            Self::ToyCP { n, .. } => n,
            Self::IsotropicStable { d, .. } => d,
        }
    }
}

/// `c(α) = 2^{α-1} π^{-d} Γ((d+α)/2) Γ(d/2) / |Γ(-α/2)|`.
pub fn stable_constant(alpha: f64, d: usize) -> f64 {
    let df = d as f64;
    2f64.powf(alpha - 1.0) * std::f64::consts::PI.powf(-df) * gamma((df + alpha) / 2.0) * gamma(df / 2.0)
        / gamma(-alpha / 2.0).abs()
}

/// Surface area of the unit sphere `S^{k}` in `R^{k+1}`.
pub fn sphere_area(k: usize) -> f64 {
    let m = (k + 1) as f64;
    2.0 * std::f64::consts::PI.powf(m / 2.0) / gamma(m / 2.0)
}

/// The Lamperti exponent of the radial part.
#[derive(Clone)]
pub enum Psi {
    /// The system's own closed form (toy only).
    Closed,
    /// Piecewise-linear interpolation of `(q, ψ(q))` pairs, sorted by `q`.
    Table(Vec<(f64, f64)>),
    Callable(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl std::fmt::Debug for Psi {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Psi::Closed => write!(f, "Closed"),
            Psi::Table(t) => write!(f, "Table({} points)", t.len()),
            Psi::Callable(_) => write!(f, "Callable"),
        }
    }
}

impl Psi {
    pub fn eval(&self, spec: &LevySystemSpec, q: f64) -> Result<f64> {
        match self {
            Psi::Closed => match *spec {
                LevySystemSpec::ToyCP { lambda, beta, b, .. } => Ok(-b * q + lambda * (beta.powf(q) - 1.0)),
                LevySystemSpec::IsotropicStable { .. } => Err(invalid(
                    "psi",
                    "the stable system has no built-in radial exponent; supply a table or callable",
                )),
            },
            Psi::Table(t) => {
                if t.len() < 2 {
                    return Err(invalid("psi", "table needs at least two points"));
                }
                let (lo, hi) = (t[0].0, t[t.len() - 1].0);
                if q < lo || q > hi {
                    return Err(invalid("q", format!("{q} outside tabulated range [{lo}, {hi}]")));
                }
                let k = t.partition_point(|p| p.0 <= q).clamp(1, t.len() - 1);
                let ((q0, v0), (q1, v1)) = (t[k - 1], t[k]);
                Ok(v0 + (v1 - v0) * (q - q0) / (q1 - q0))
            }
            Psi::Callable(f) => Ok(f(q)),
        }
    }
}

/// Quadrature value with its error estimate.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JumpIntegral {
    pub value: f64,
    pub error: f64,
}

fn angle_opts() -> QuadOptions {
    QuadOptions {
        abs_tol: 1e-13,
        rel_tol: 1e-12,
        max_intervals: 2000,
    }
}

/// Normalised law of the angle between a uniform direction and a fixed
/// one in `R^n`: density `∝ sin^{n-2} γ` on `[0, π]`.
fn angle_normaliser(n: usize) -> f64 {
    if n == 2 {
        std::f64::consts::PI
    } else {
        sphere_area(n - 1) / sphere_area(n - 2)
    }
}

fn toy_jump_integral(lambda: f64, beta: f64, n: usize, q: f64) -> Result<JumpIntegral> {
    let k = (n - 2) as i32;
    let r = integrate(
        |g: f64| (1.0 - 2.0 * beta * g.cos() + beta * beta).powf(q / 2.0) * g.sin().powi(k),
        0.0,
        std::f64::consts::PI,
        angle_opts(),
    )?;
    let c = lambda / angle_normaliser(n);
    Ok(JumpIntegral {
        value: c * r.value,
        error: c * r.error,
    })
}

/// Orthonormal vector perpendicular to the unit vector `theta`.
fn perpendicular(theta: &[f64]) -> Vec<f64> {
    let k = (0..theta.len())
        .min_by(|&i, &j| theta[i].abs().total_cmp(&theta[j].abs()))
        .expect("non-empty");
    let mut e: Vec<f64> = theta.iter().map(|t| -theta[k] * t).collect();
    e[k] += 1.0;
    let norm = e.iter().map(|v| v * v).sum::<f64>().sqrt();
    e.iter_mut().for_each(|v| *v /= norm);
    e
}

fn unit(theta: &[f64], d: usize) -> Result<Vec<f64>> {
    if theta.len() != d {
        return Err(invalid("theta", format!("expected {d} coordinates")));
    }
    let norm = theta.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm > 0.0) {
        return Err(invalid("theta", "must be nonzero"));
    }
    Ok(theta.iter().map(|v| v / norm).collect())
}

/// Finite window in `x` for the stable jump integral, with tails beyond
/// the integrand's decay cut at `tol`, or a divergence report.
fn stable_window(alpha: f64, d: usize, q: f64, window: (f64, f64), tol: f64) -> Result<(f64, f64)> {
    let (mut lo, mut hi) = window;
    if lo < 0.0 && hi > 0.0 && q <= alpha {
        return Err(Error::Divergent(format!(
            "q = {q} <= alpha = {alpha}: small jumps are not integrable on a window containing 0"
        )));
    }
    let mass = stable_constant(alpha, d) * sphere_area(d - 1);
    if hi.is_infinite() {
        if q >= alpha {
            return Err(Error::Divergent(format!(
                "q = {q} >= alpha = {alpha}: large jumps are not integrable"
            )));
        }
        // Integrand ~ mass * e^{(q - alpha) x} above x = 1.
        let rate = alpha - q;
        hi = (1.0f64).max((mass / (rate * tol)).ln() / rate + 1.0);
    }
    if lo.is_infinite() {
        // Integrand ~ mass * e^{d x} max(1, e^{x q}) as x -> -inf.
        let rate = d as f64 + q.min(0.0);
        if rate <= 0.0 {
            return Err(Error::Divergent(format!("q = {q}: lower tail is not integrable")));
        }
        lo = (-1.0f64).min((tol * rate / mass).ln() / rate - 1.0);
    }
    Ok((lo, hi))
}

fn stable_jump_integral(alpha: f64, d: usize, window: (f64, f64), q: f64, theta: &[f64]) -> Result<JumpIntegral> {
    let theta = unit(theta, d)?;
    let (lo, hi) = stable_window(alpha, d, q, window, 1e-12)?;
    let e = perpendicular(&theta);
    let p = q - alpha - d as f64;
    let k = (d - 2) as i32;
    let shell = sphere_area(d - 2);
    let mut inner_error = 0.0f64;
    let inner = |x: f64, inner_error: &mut f64| -> f64 {
        let rho = x.exp();
        let gap = x.exp_m1();
        let delta = gap.abs().max(f64::MIN_POSITIVE);
        let mut breaks = vec![0.0];
        let mut b = delta;
        while b < std::f64::consts::PI {
            breaks.push(b);
            b *= 8.0;
        }
        breaks.push(std::f64::consts::PI);
        let f = |g: f64| {
            let s = g.sin();
            let h = 2.0 * (0.5 * g).sin().powi(2);
            // Φ = cos γ θ + sin γ e in the frame of θ, and
            // |θ - ρΦ|² = (1 - ρ)² + ρ|θ - Φ|² without cancellation.
            let chord2: f64 = theta.iter().zip(&e).map(|(t, ev)| (h * t + s * ev).powi(2)).sum();
            (gap * gap + rho * chord2).powf(p / 2.0) * s.powi(k)
        };
        match integrate_with_breaks(f, &breaks, angle_opts()) {
            Ok(r) => {
                *inner_error = inner_error.max((d as f64 * x).exp() * r.error);
                r.value
            }
            Err(_) => f64::NAN,
        }
    };
    let mut breaks: Vec<f64> = vec![lo, hi];
    for m in [1.0, 0.1, 0.01, 1e-3, 1e-4, 1e-5, 0.0] {
        for s in [-m, m] {
            if s > lo && s < hi {
                breaks.push(s);
            }
        }
    }
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let r = integrate_with_breaks(
        |x| (d as f64 * x).exp() * inner(x, &mut inner_error),
        &breaks,
        QuadOptions {
            abs_tol: 1e-11,
            rel_tol: 1e-11,
            max_intervals: 4000,
        },
    )?;
    // Outer error plus the largest weighted inner error over the window.
    let c = stable_constant(alpha, d) * shell;
    Ok(JumpIntegral {
        value: c * r.value,
        error: c * (r.error + (hi - lo) * inner_error),
    })
}

/// `J(q; θ)` by quadrature.
pub fn jump_integral(spec: &LevySystemSpec, q: f64, theta: &[f64]) -> Result<JumpIntegral> {
    spec.validate()?;
    match *spec {
        LevySystemSpec::ToyCP { lambda, beta, n, .. } => {
            unit(theta, n)?;
            toy_jump_integral(lambda, beta, n, q)
        }
        LevySystemSpec::IsotropicStable { alpha, d, window } => stable_jump_integral(alpha, d, window, q, theta),
    }
}

/// Monte-Carlo estimate of the same integral over a finite window.
///
/// Toy: average of `λ|θ - βV|^q` over uniform `V`. Stable: in the coordinate
/// `y = e^x Φ` the integral is `c ∫ |y - θ|^{q-α-d} dy`; with `y = θ + sΨ`,
/// `s` drawn with density `∝ s^{q-α-1}` on a shell containing the window and
/// `Ψ` uniform, it reduces to a window-membership probability.
pub fn jump_integral_mc_oracle(
    rng: &mut RngState,
    spec: &LevySystemSpec,
    q: f64,
    theta: &[f64],
    n: usize,
) -> Result<EstimateReport> {
    spec.validate()?;
    if n < 1000 {
        return Err(invalid("N", format!("need at least 1000 samples, got {n}")));
    }
    let seed = rng.derive_key();
    let prov = Provenance {
        seed,
        first_stream: 0,
        n_streams: n as u64,
    };
    match *spec {
        LevySystemSpec::ToyCP { lambda, beta, n: dim, .. } => {
            let theta = unit(theta, dim)?;
            let xs: Result<Vec<f64>> = replicate(seed, 0, n, |_, r| {
                let v = sample_uniform_sphere(r, dim)?;
                let d2: f64 = theta.iter().zip(&v).map(|(t, v)| (t - beta * v).powi(2)).sum();
                Ok(lambda * d2.powf(q / 2.0))
            })
            .into_iter()
            .collect();
            Ok(mean_ci(&xs?)?.with_provenance(prov))
        }
        LevySystemSpec::IsotropicStable { alpha, d, window } => {
            let theta = unit(theta, d)?;
            let (x_lo, x_hi) = window;
            if !x_hi.is_finite() {
                return Err(invalid("window", "the Monte-Carlo oracle needs a finite upper end"));
            }
            let (rho_lo, rho_hi) = (x_lo.exp(), x_hi.exp());
            let s_min = if (rho_lo..=rho_hi).contains(&1.0) {
                0.0
            } else {
                (1.0 - rho_lo).abs().min((1.0 - rho_hi).abs())
            };
            let s_max = 1.0 + rho_hi;
            let p = q - alpha;
            if s_min == 0.0 && p <= 0.0 {
                return Err(Error::Divergent(format!(
                    "q = {q} <= alpha = {alpha} on a window containing 0"
                )));
            }
            // ∫_{s_min}^{s_max} s^{p-1} ds and its inverse CDF.
            let radial_mass = if p == 0.0 {
                (s_max / s_min).ln()
            } else {
                (s_max.powf(p) - s_min.powf(p)) / p
            };
            let inv = move |u: f64| {
                if p == 0.0 {
                    s_min * (s_max / s_min).powf(u)
                } else {
                    (s_min.powf(p) + u * (s_max.powf(p) - s_min.powf(p))).powf(1.0 / p)
                }
            };
            let scale = stable_constant(alpha, d) * sphere_area(d - 1) * radial_mass;
            let xs: Result<Vec<f64>> = replicate(seed, 0, n, |_, r| {
                let s = inv(r.uniform());
                let psi = sample_uniform_sphere(r, d)?;
                let rho = theta
                    .iter()
                    .zip(&psi)
                    .map(|(t, v)| (t + s * v).powi(2))
                    .sum::<f64>()
                    .sqrt();
                Ok(if rho >= rho_lo && rho <= rho_hi { scale } else { 0.0 })
            })
            .into_iter()
            .collect();
            Ok(mean_ci(&xs?)?.with_provenance(prov))
        }
    }
}

fn north(d: usize) -> Vec<f64> {
    let mut t = vec![0.0; d];
    t[0] = 1.0;
    t
}

/// `κ(q) = ψ(q) + J(q)`; divergence of `J` is returned as an error.
pub fn kappa(spec: &LevySystemSpec, psi: &Psi, q: f64) -> Result<f64> {
    let j = jump_integral(spec, q, &north(spec.dim()))?;
    Ok(psi.eval(spec, q)? + j.value)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KappaResult {
    pub q: Vec<f64>,
    pub kappa: Vec<f64>,
    pub errors: Vec<f64>,
    pub roots: Vec<f64>,
    /// Smallest second difference on the grid, scaled by `1/h²`.
    pub min_second_difference: f64,
}

/// κ on `points` equally spaced nodes of `[lo, hi]`.
pub fn kappa_table(spec: &LevySystemSpec, psi: &Psi, lo: f64, hi: f64, points: usize) -> Result<KappaResult> {
    if !(lo < hi) || points < 3 {
        return Err(invalid("bracket", "need lo < hi and at least 3 points"));
    }
    let theta = north(spec.dim());
    let h = (hi - lo) / (points - 1) as f64;
    let mut q = Vec::with_capacity(points);
    let mut kap = Vec::with_capacity(points);
    let mut errors = Vec::with_capacity(points);
    for i in 0..points {
        let qi = if i + 1 == points { hi } else { lo + i as f64 * h };
        let j = jump_integral(spec, qi, &theta)?;
        q.push(qi);
        kap.push(psi.eval(spec, qi)? + j.value);
        errors.push(j.error);
    }
    let mut min_sd = f64::INFINITY;
    for i in 1..points - 1 {
        let sd = (kap[i + 1] - 2.0 * kap[i] + kap[i - 1]) / (h * h);
        let noise = 4.0 * (errors[i - 1] + 2.0 * errors[i] + errors[i + 1] + 1e-12 * kap[i].abs()) / (h * h);
        if sd < -noise {
            return Err(Error::NotConvex {
                q: q[i],
                second_difference: sd,
            });
        }
        min_sd = min_sd.min(sd);
    }
    Ok(KappaResult {
        q,
        kappa: kap,
        errors,
        roots: Vec::new(),
        min_second_difference: min_sd,
    })
}

/// Roots of κ in `bracket`: sign changes on a 256-point scan, refined by
/// bisection. Convexity is checked on the scan grid.
pub fn find_roots(spec: &LevySystemSpec, psi: &Psi, bracket: (f64, f64)) -> Result<KappaResult> {
    let mut table = kappa_table(spec, psi, bracket.0, bracket.1, SCAN_POINTS)?;
    let k = |q: f64| kappa(spec, psi, q);
    let mut roots = Vec::new();
    for i in 0..SCAN_POINTS - 1 {
        let (mut a, mut b) = (table.q[i], table.q[i + 1]);
        let (mut fa, fb) = (table.kappa[i], table.kappa[i + 1]);
        if fa == 0.0 {
            roots.push(a);
            continue;
        }
        if i + 2 == SCAN_POINTS && fb == 0.0 {
            roots.push(b);
            continue;
        }
        if fa.signum() == fb.signum() {
            continue;
        }
        while b - a > BISECTION_TOLERANCE {
            let m = 0.5 * (a + b);
            let fm = k(m)?;
            if fm == 0.0 {
                a = m;
                b = m;
                break;
            }
            if fm.signum() == fa.signum() {
                a = m;
                fa = fm;
            } else {
                b = m;
            }
        }
        let fa_end = k(a)?;
        let fb_end = k(b)?;
        let root = if fa_end.abs() <= fb_end.abs() { a } else { b };
        let residual = fa_end.abs().min(fb_end.abs());
        if residual > ROOT_TOLERANCE {
            return Err(Error::NotARoot { omega: root, residual });
        }
        roots.push(root);
    }
    table.roots = roots;
    Ok(table)
}

/// `ψ̂(q) = κ(ω + q)` for a verified root `ω`.
pub fn spine_exponent(spec: &LevySystemSpec, psi: &Psi, omega: f64, q: f64) -> Result<f64> {
    check_root(spec, psi, omega)?;
    if q == 0.0 {
        return Ok(0.0);
    }
    kappa(spec, psi, omega + q)
}

pub fn check_root(spec: &LevySystemSpec, psi: &Psi, omega: f64) -> Result<()> {
    let residual = kappa(spec, psi, omega)?.abs();
    if residual > ROOT_TOLERANCE {
        return Err(Error::NotARoot { omega, residual });
    }
    Ok(())
}

/// Monte-Carlo check of `E Σ |ΔX|^q = 1 - κ(q)/ψ(q)` for the toy started
/// at a unit vector. Returns the estimate; its `target` diagnostic holds
/// the closed form.
pub fn sum_kappa_identity_check(
    rng: &mut RngState,
    spec: &LevySystemSpec,
    psi: &Psi,
    q: f64,
    n: usize,
) -> Result<EstimateReport> {
    let LevySystemSpec::ToyCP { lambda, beta, b, n: dim } = *spec else {
        return Err(invalid("spec", "the identity check needs the toy system"));
    };
    spec.validate()?;
    if lambda == 0.0 {
        return Err(invalid("lambda", "no jumps: the identity degenerates"));
    }
    let psi_q = psi.eval(spec, q)?;
    if psi_q >= 0.0 {
        return Err(invalid("q", format!("need psi(q) < 0, got {psi_q}")));
    }
    let target = 1.0 - kappa(spec, psi, q)? / psi_q;
    let driver = crate::gfengine::ToyDrivingSpec::new(dim, lambda, beta, b)?;
    let seed = rng.derive_key();
    let x0 = north(dim);
    // Cells run until their size drops below this; the neglected future
    // jumps carry about `dust^q * target`.
    let dust = 1e-8;
    let rows: Result<Vec<(f64, f64)>> = replicate(seed, 0, n, |_, r| {
        let cell = crate::gfengine::simulate_cell_to_dust(r, &driver, &x0, f64::INFINITY, dust)?;
        let s: f64 = cell.jumps.iter().map(|j| j.size().powf(q)).sum();
        Ok((s, cell.end_norm().powf(q)))
    })
    .into_iter()
    .collect();
    let rows = rows?;
    let sums: Vec<f64> = rows.iter().map(|r| r.0).collect();
    let tail = rows.iter().map(|r| r.1).sum::<f64>() / n as f64 * target;
    Ok(mean_ci(&sums)?
        .with_provenance(Provenance {
            seed,
            first_stream: 0,
            n_streams: n as u64,
        })
        .with_diagnostic("target", target)
        .with_diagnostic("tail_bound", tail)
        .with_diagnostic("q", q))
}

/// CSV of a κ table: `q,kappa,error`.
pub fn write_kappa_csv<W: Write>(mut w: W, table: &KappaResult) -> Result<()> {
    let io = |e: std::io::Error| Error::InvalidSamples(format!("write failed: {e}"));
    writeln!(w, "# gfx-lab v1").map_err(io)?;
    writeln!(w, "q,kappa,error").map_err(io)?;
    for i in 0..table.q.len() {
        writeln!(w, "{},{},{}", table.q[i], table.kappa[i], table.errors[i]).map_err(io)?;
    }
    Ok(())
}

/// Parse a flat `key = value` spec file. Keys: `variant` (`toy` or
/// `stable`), `lambda`, `beta`, `drift`, `n` for the toy; `alpha`, `d`,
/// `x_min`, `x_max` for the stable system. `#` starts a comment.
pub fn parse_spec(text: &str) -> Result<LevySystemSpec> {
    let mut kv = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("line {}: expected key = value", i + 1)))?;
        kv.insert(k.trim().to_string(), v.trim().to_string());
    }
    let num = |k: &str| -> Result<Option<f64>> {
        kv.get(k)
            .map(|v| v.parse::<f64>().map_err(|e| Error::Parse(format!("{k}: {e}"))))
            .transpose()
    };
    let req = |k: &str| -> Result<f64> { num(k)?.ok_or_else(|| Error::Parse(format!("missing key `{k}`"))) };
    let known = ["variant", "lambda", "beta", "drift", "n", "alpha", "d", "x_min", "x_max"];
    if let Some(k) = kv.keys().find(|k| !known.contains(&k.as_str())) {
        return Err(Error::Parse(format!("unknown key `{k}`")));
    }
    let spec = match kv.get("variant").map(String::as_str) {
        Some("toy") => LevySystemSpec::ToyCP {
            lambda: req("lambda")?,
            beta: req("beta")?,
            b: req("drift")?,
            n: num("n")?.unwrap_or(2.0) as usize,
        },
        Some("stable") => LevySystemSpec::IsotropicStable {
            alpha: req("alpha")?,
            d: req("d")? as usize,
            window: (
                num("x_min")?.unwrap_or(f64::NEG_INFINITY),
                num("x_max")?.unwrap_or(f64::INFINITY),
            ),
        },
        Some(other) => return Err(Error::Parse(format!("unknown variant `{other}`"))),
        None => return Err(Error::Parse("missing key `variant`".into())),
    };
    spec.validate()?;
    Ok(spec)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> LevySystemSpec {
        LevySystemSpec::toy(1.0, 0.5, 0.25)
    }

    #[test]
    fn toy_closed_values() {
        let s = toy();
        let j2 = jump_integral(&s, 2.0, &[1.0, 0.0]).unwrap();
        assert!((j2.value - 1.25).abs() < 1e-10);
        assert!((jump_integral(&s, 0.0, &[0.0, 1.0]).unwrap().value - 1.0).abs() < 1e-12);
        assert!((kappa(&s, &Psi::Closed, 0.0).unwrap() - 1.0).abs() < 1e-10);
        assert!(kappa(&s, &Psi::Closed, 2.0).unwrap().abs() < 1e-12);
        // E|1 - β e^{iW}|^4 = 1 + 4β² + β⁴.
        let j4 = jump_integral(&s, 4.0, &[1.0, 0.0]).unwrap().value;
        assert!((j4 - (1.0 + 4.0 * 0.25 + 0.0625)).abs() < 1e-12);
    }

    #[test]
    fn toy_in_three_dimensions() {
        // For V uniform on S², E|θ - βV|² = 1 + β² again.
        let s = LevySystemSpec::ToyCP {
            lambda: 2.0,
            beta: 0.5,
            b: 0.0,
            n: 3,
        };
        let j = jump_integral(&s, 2.0, &[0.0, 0.0, 1.0]).unwrap().value;
        assert!((j - 2.5).abs() < 1e-12);
    }

    #[test]
    fn roots_of_the_toy() {
        let r = find_roots(&toy(), &Psi::Closed, (0.5, 10.0)).unwrap();
        assert_eq!(r.roots.len(), 2);
        assert!((r.roots[0] - 2.0).abs() <= 1e-9);
        assert!((r.roots[1] - 3.465_511_750_0).abs() < 1e-8, "{:?}", r.roots);
        for &w in &r.roots {
            assert!(kappa(&toy(), &Psi::Closed, w).unwrap().abs() <= ROOT_TOLERANCE);
        }
        assert!(r.min_second_difference > 0.0);
        assert!(find_roots(&toy(), &Psi::Closed, (4.0, 8.0)).unwrap().roots.is_empty());
    }

    #[test]
    fn spine_exponent_values() {
        let s = toy();
        assert_eq!(spine_exponent(&s, &Psi::Closed, 2.0, 0.0).unwrap(), 0.0);
        let k3 = spine_exponent(&s, &Psi::Closed, 2.0, 1.0).unwrap();
        assert!((k3 - (-0.053_647_609_718_231_46)).abs() < 1e-10, "{k3}");
        assert!(matches!(
            spine_exponent(&s, &Psi::Closed, 2.5, 1.0),
            Err(Error::NotARoot { .. })
        ));
    }

    #[test]
    fn convexity_violation_is_reported() {
        let psi = Psi::Callable(Arc::new(|q: f64| -q * q));
        assert!(matches!(
            kappa_table(&toy(), &psi, 0.0, 4.0, 32),
            Err(Error::NotConvex { .. })
        ));
    }

    #[test]
    fn tabulated_psi_interpolates() {
        let t = Psi::Table(vec![(0.0, 0.0), (2.0, -1.0), (4.0, 1.0)]);
        assert_eq!(t.eval(&toy(), 1.0).unwrap(), -0.5);
        assert_eq!(t.eval(&toy(), 3.0).unwrap(), 0.0);
        assert!(t.eval(&toy(), 5.0).is_err());
    }

    #[test]
    fn stable_constant_value() {
        assert!((stable_constant(1.5, 2) - 0.027_242_094_785_102_93).abs() < 1e-15);
    }

    fn stable(window: (f64, f64)) -> LevySystemSpec {
        LevySystemSpec::IsotropicStable { alpha: 1.5, d: 2, window }
    }

    #[test]
    fn stable_divergence_is_reported() {
        let full = stable((f64::NEG_INFINITY, f64::INFINITY));
        assert!(matches!(jump_integral(&full, 2.0, &[1.0, 0.0]), Err(Error::Divergent(_))));
        assert!(matches!(jump_integral(&full, 1.0, &[1.0, 0.0]), Err(Error::Divergent(_))));
        assert!(kappa(&stable((-6.0, 6.0)), &Psi::Closed, 2.0).is_err());
    }

    #[test]
    fn stable_inner_integral_matches_closed_form_in_three_dimensions() {
        // ∫_0^π (1 - 2r cos γ + r²)^p sin γ dγ = [(1+r)^{2p+2} - |1-r|^{2p+2}] / (2r(p+1)),
        // so J over a window excluding 0 reduces to a one-dimensional integral.
        let (alpha, q) = (1.0, 0.5);
        let window = (0.2, 1.5);
        let s = LevySystemSpec::IsotropicStable { alpha, d: 3, window };
        let j = jump_integral(&s, q, &[0.0, 0.0, 1.0]).unwrap().value;
        let p = (q - alpha - 3.0) / 2.0;
        let oracle = integrate(
            |x: f64| {
                let r = x.exp();
                let inner = ((1.0 + r).powf(2.0 * p + 2.0) - (1.0 - r).abs().powf(2.0 * p + 2.0)) / (2.0 * r * (p + 1.0));
                (3.0 * x).exp() * inner
            },
            window.0,
            window.1,
            QuadOptions::default(),
        )
        .unwrap()
        .value
            * stable_constant(alpha, 3)
            * sphere_area(1);
        assert!((j - oracle).abs() < 1e-10 * oracle.abs(), "{j} vs {oracle}");
    }

    #[test]
    fn stable_isotropy() {
        let s = stable((-6.0, 6.0));
        let mut rng = RngState::new(3, 0);
        let base = jump_integral(&s, 2.0, &[1.0, 0.0]).unwrap().value;
        for _ in 0..8 {
            let th = sample_uniform_sphere(&mut rng, 2).unwrap();
            let v = jump_integral(&s, 2.0, &th).unwrap().value;
            assert!((v - base).abs() < 1e-6);
        }
    }

    #[test]
    fn stable_quadrature_matches_oracle() {
        let mut rng = RngState::new(4, 0);
        for (q, window) in [(2.0, (-6.0, 6.0)), (0.0, (0.5, 3.0)), (1.0, (-4.0, -0.5))] {
            let s = stable(window);
            let quad = jump_integral(&s, q, &[1.0, 0.0]).unwrap().value;
            let mc = jump_integral_mc_oracle(&mut rng, &s, q, &[1.0, 0.0], 200_000).unwrap();
            assert!(mc.within_sigmas(quad, 3.0), "q={q}: {quad} vs {mc:?}");
        }
    }

    #[test]
    fn toy_oracle_matches_closed_form() {
        let mut rng = RngState::new(5, 0);
        let mc = jump_integral_mc_oracle(&mut rng, &toy(), 3.0, &[1.0, 0.0], 100_000).unwrap();
        let quad = jump_integral(&toy(), 3.0, &[1.0, 0.0]).unwrap().value;
        assert!(mc.within_sigmas(quad, 3.0));
        assert!(jump_integral_mc_oracle(&mut rng, &toy(), 3.0, &[1.0, 0.0], 999).is_err());
    }

    #[test]
    fn spec_file_round() {
        let s = parse_spec("variant = toy\nlambda = 1\nbeta = 0.5 # half\ndrift = 0.25\n").unwrap();
        assert_eq!(s, toy());
        let s = parse_spec("variant=stable\nalpha=1.5\nd=2\nx_min=-6\nx_max=6").unwrap();
        assert_eq!(s, stable((-6.0, 6.0)));
        assert!(parse_spec("variant = toy\nlambda = 1").is_err());
        assert!(parse_spec("variant = toy\ncolour = red").is_err());
        assert!(parse_spec("variant = toy\nlambda = 1\nbeta = 1.5\ndrift = 0").is_err());
    }

    #[test]
    fn kappa_csv() {
        let t = kappa_table(&toy(), &Psi::Closed, 0.0, 4.0, 5).unwrap();
        let mut buf = Vec::new();
        write_kappa_csv(&mut buf, &t).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# gfx-lab v1\nq,kappa,error\n0,1,"));
        assert_eq!(text.lines().count(), 7);
    }
}
