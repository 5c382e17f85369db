//! Bessel-Brownian paths in the upper half-space, last-passage samplers, the
//! exact spine-size samplers, and the half-space side of the many-to-one
//! formula.
//!
//! Stable processes are normalised so that `E e^{i<u, X_t>} = e^{-t|u|^α}`.

use std::io::Write;

use statrs::function::beta::beta;
use statrs::function::gamma::gamma;

use crate::bridges::{bridge_values, brownian_values, PathGrid};
use crate::crossing::{PathView, Refinement, Scanner};
use crate::error::{invalid, Error, Result};
use crate::excursion::PairFunctional;
use crate::randkit::{fill_gaussian, replicate, sample_gaussian, sample_positive_stable, Provenance, RngState};
use crate::stats::{mean_ci, EstimateReport};

/// Initial horizon of the doubling policy, in units of `a²`.
pub const INITIAL_HORIZON_FACTOR: f64 = 10.0;
/// The doubling policy stops once the vertical part exceeds this multiple of `a`.
pub const TRANSIENCE_FACTOR: f64 = 3.0;
pub const MAX_DOUBLINGS: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct HalfSpacePath {
    horizontal: PathGrid,
    vertical: PathGrid,
    start_x: Vec<f64>,
    refinement: Option<Refinement>,
}

impl HalfSpacePath {
    /// Build from explicit grids; crossings use linear interpolation.
    pub fn from_parts(horizontal: PathGrid, vertical: PathGrid) -> Result<Self> {
        if vertical.dim() != 1 || horizontal.times() != vertical.times() {
            return Err(invalid("vertical", "must be one-dimensional on the horizontal grid"));
        }
        if vertical.values().iter().any(|&v| !(v >= 0.0)) {
            return Err(invalid("vertical", "values must be nonnegative"));
        }
        Ok(Self {
            start_x: horizontal.point(0).to_vec(),
            horizontal,
            vertical,
            refinement: None,
        })
    }

    fn from_latent(seed: u64, horizontal: PathGrid, latent: PathGrid) -> Self {
        let refinement = Refinement::new(seed, latent, 0.0);
        Self {
            start_x: horizontal.point(0).to_vec(),
            vertical: refinement.vertical(),
            horizontal,
            refinement: Some(refinement),
        }
    }

    pub fn horizontal(&self) -> &PathGrid {
        &self.horizontal
    }

    pub fn vertical(&self) -> &PathGrid {
        &self.vertical
    }

    pub fn start_x(&self) -> &[f64] {
        &self.start_x
    }

    pub fn horizon(&self) -> f64 {
        self.vertical.duration()
    }

    pub fn view(&self) -> PathView<'_> {
        PathView::full(&self.horizontal, &self.vertical)
    }

    fn scanner(&self) -> Scanner<'_> {
        Scanner {
            horizontal: &self.horizontal,
            vertical: &self.vertical,
            refinement: self.refinement.as_ref(),
        }
    }

    /// Continue the path for as long again, with the same grid step.
    fn doubled(&self, rng: &mut RngState) -> Self {
        let steps = self.vertical.steps();
        let h = self.horizon();
        let r = self.refinement.as_ref().expect("sampled path");
        let ext_w = brownian_values(rng, r.components.last(), h, steps);
        let ext_h = brownian_values(rng, self.horizontal.last(), h, steps);
        let hd = self.horizontal.dim();
        let mut w = r.components.values().to_vec();
        w.extend_from_slice(&ext_w[3..]);
        let mut hv = self.horizontal.values().to_vec();
        hv.extend_from_slice(&ext_h[hd..]);
        Self::from_latent(
            r.seed,
            PathGrid::from_uniform(hd, 2.0 * h, hv),
            PathGrid::from_uniform(3, 2.0 * h, w),
        )
    }
}

fn check_dims(d: usize, start_x: &[f64], steps: usize) -> Result<()> {
    if d < 2 || start_x.len() != d - 1 {
        return Err(invalid("start_x", format!("expected {} coordinates", d.saturating_sub(1))));
    }
    if steps < 2 {
        return Err(invalid("steps", format!("need at least 2, got {steps}")));
    }
    Ok(())
}

/// Brownian horizontal part from `start_x` and Bessel(3) vertical part from
/// 0, on `[0, horizon]`.
pub fn sample_bessel_brownian(
    rng: &mut RngState,
    d: usize,
    start_x: &[f64],
    horizon: f64,
    steps: usize,
) -> Result<HalfSpacePath> {
    check_dims(d, start_x, steps)?;
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(invalid("horizon", format!("must be positive, got {horizon}")));
    }
    let seed = rng.derive_key();
    let w = brownian_values(rng, &[0.0; 3], horizon, steps);
    let h = brownian_values(rng, start_x, horizon, steps);
    Ok(HalfSpacePath::from_latent(
        seed,
        PathGrid::from_uniform(d - 1, horizon, h),
        PathGrid::from_uniform(3, horizon, w),
    ))
}

/// Last refined time within the horizon at which the vertical part is at
/// most `a`.
pub fn last_passage(p: &HalfSpacePath, a: f64) -> Result<f64> {
    let end = p.vertical.scalar(p.vertical.len() - 1);
    if end <= a {
        return Err(Error::HorizonTooSmall { vertical: end, level: a });
    }
    Ok(p
        .scanner()
        .crossings(a, false)
        .iter()
        .rev()
        .find(|c| c.upward)
        .map_or(0.0, |c| c.time))
}

/// First refined time at which the vertical part exceeds `a`.
pub fn first_hitting(p: &HalfSpacePath, a: f64) -> Option<f64> {
    p.scanner().crossings(a, true).first().map(|c| c.time)
}

/// Horizon-doubling policy: start at `10 a²` and double, keeping the grid
/// step, until the vertical part ends above `3a`. The last passage found is
/// only the last one before the horizon; the path returns below `a` later
/// with probability `a / vertical(horizon)`, which the doubling caps at 1/3.
pub fn sample_until_transient(
    rng: &mut RngState,
    d: usize,
    start_x: &[f64],
    a: f64,
    steps: usize,
) -> Result<(HalfSpacePath, f64)> {
    if !(a > 0.0) {
        return Err(invalid("a", "level must be positive"));
    }
    let mut p = sample_bessel_brownian(rng, d, start_x, INITIAL_HORIZON_FACTOR * a * a, steps)?;
    let mut doublings = 0;
    while p.vertical.scalar(p.vertical.len() - 1) <= TRANSIENCE_FACTOR * a {
        if doublings == MAX_DOUBLINGS {
            return Err(Error::HorizonExtension {
                doublings,
                horizon: p.horizon(),
            });
        }
        p = p.doubled(rng);
        doublings += 1;
    }
    let s = last_passage(&p, a)?;
    Ok((p, s))
}

/// Bessel-Brownian path stopped at its last passage at `a`, sampled exactly:
/// the last passage time is `a²/G²`, and before it the vertical part is a
/// Bessel(3) bridge from 0 to `a`.
pub fn sample_to_last_passage(
    rng: &mut RngState,
    d: usize,
    start_x: &[f64],
    a: f64,
    steps: usize,
) -> Result<HalfSpacePath> {
    check_dims(d, start_x, steps)?;
    if !(a > 0.0 && a.is_finite()) {
        return Err(invalid("a", "level must be positive"));
    }
    let g = sample_gaussian(rng);
    let s = a * a / (g * g);
    let seed = rng.derive_key();
    let w = bridge_values(rng, &[0.0; 3], &[a, 0.0, 0.0], s, steps);
    let h = brownian_values(rng, start_x, s, steps);
    let mut p = HalfSpacePath::from_latent(
        seed,
        PathGrid::from_uniform(d - 1, s, h),
        PathGrid::from_uniform(3, s, w),
    );
    // The norm of the endpoint is `a` up to rounding; pin it.
    let n = p.vertical.len();
    let mut v = p.vertical.values().to_vec();
    v[n - 1] = a;
    p.vertical = PathGrid::new(1, p.vertical.times().to_vec(), v)?;
    Ok(p)
}

/// `B^{d-1}` at the first time a one-dimensional Brownian motion hits `a`:
/// isotropic Cauchy with scale `a`.
pub fn spine_size_brownian(rng: &mut RngState, d: usize, a: f64) -> Result<Vec<f64>> {
    if !(a > 0.0) {
        return Err(invalid("a", "level must be positive"));
    }
    if d < 2 {
        return Err(invalid("d", format!("need d >= 2, got {d}")));
    }
    let g = sample_gaussian(rng);
    let sd = (a * a / (g * g)).sqrt();
    let mut out = vec![0.0; d - 1];
    fill_gaussian(rng, &mut out);
    out.iter_mut().for_each(|v| *v *= sd);
    Ok(out)
}

/// Isotropic α-stable process in `R^{d-1}` at the Brownian hitting time of
/// `a`, by subordination.
pub fn spine_size_stable(rng: &mut RngState, d: usize, alpha: f64, a: f64) -> Result<Vec<f64>> {
    if !(alpha > 0.0 && alpha < 2.0) {
        return Err(invalid("alpha", format!("must lie in (0, 2), got {alpha}")));
    }
    if !(a > 0.0) {
        return Err(invalid("a", "level must be positive"));
    }
    if d < 2 {
        return Err(invalid("d", format!("need d >= 2, got {d}")));
    }
    let g = sample_gaussian(rng);
    let t = a * a / (g * g);
    let sigma = sample_positive_stable(rng, alpha / 2.0, t)?;
    let sd = (2.0 * sigma).sqrt();
    let mut out = vec![0.0; d - 1];
    fill_gaussian(rng, &mut out);
    out.iter_mut().for_each(|v| *v *= sd);
    Ok(out)
}

/// Characteristic function of `spine_size_stable` at frequency norm `u`.
pub fn spine_stable_cf(alpha: f64, a: f64, u: f64) -> f64 {
    (-std::f64::consts::SQRT_2 * a * u.powf(alpha / 2.0)).exp()
}

/// How the two half-space pieces of the many-to-one formula are stopped.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum LastPassagePolicy {
    /// Exact last passage via the bridge decomposition.
    #[default]
    Exact,
    /// Grid path with horizon doubling; biased when the path returns below `a`.
    HorizonDoubling,
}

fn stopped_path(
    rng: &mut RngState,
    d: usize,
    start_x: &[f64],
    a: f64,
    steps: usize,
    policy: LastPassagePolicy,
) -> Result<HalfSpacePath> {
    match policy {
        LastPassagePolicy::Exact => sample_to_last_passage(rng, d, start_x, a, steps),
        LastPassagePolicy::HorizonDoubling => {
            let (p, s) = sample_until_transient(rng, d, start_x, a, steps)?;
            let k = p.vertical.times().partition_point(|&t| t <= s).max(2);
            let times = p.vertical.times()[..k].to_vec();
            let hv = p.horizontal.values()[..k * (d - 1)].to_vec();
            let vv = p.vertical.values()[..k].to_vec();
            HalfSpacePath::from_parts(PathGrid::new(d - 1, times.clone(), hv)?, PathGrid::new(1, times, vv)?)
        }
    }
}

/// `|x|^d E[F(h1 up to S_a, h2 up to S_a)]` with `h1` from 0 and `h2` from
/// `x`, independent.
#[allow(clippy::too_many_arguments)]
pub fn many_to_one_rhs_with_policy(
    rng: &mut RngState,
    x: &[f64],
    d: usize,
    a: f64,
    f: &PairFunctional,
    n: usize,
    steps: usize,
    policy: LastPassagePolicy,
) -> Result<EstimateReport> {
    let x2: f64 = x.iter().map(|v| v * v).sum();
    if x2 == 0.0 {
        return Err(invalid("x", "endpoint must be nonzero"));
    }
    check_dims(d, x, steps)?;
    if n == 0 {
        return Err(invalid("N", "need at least one sample"));
    }
    let seed = rng.derive_key();
    let origin = vec![0.0; d - 1];
    let values: Result<Vec<f64>> = replicate(seed, 0, n, |_, r| {
        let h1 = stopped_path(r, d, &origin, a, steps, policy)?;
        let h2 = stopped_path(r, d, x, a, steps, policy)?;
        Ok(f(&h1.view(), &h2.view()))
    })
    .into_iter()
    .collect();
    let scale = x2.sqrt().powi(d as i32);
    let prov = Provenance {
        seed,
        first_stream: 0,
        n_streams: n as u64,
    };
    Ok(mean_ci(&values?)?
        .scaled(scale)
        .with_provenance(prov)
        .with_diagnostic("level", a))
}

pub fn many_to_one_rhs(
    rng: &mut RngState,
    x: &[f64],
    d: usize,
    a: f64,
    f: &PairFunctional,
    n: usize,
    steps: usize,
) -> Result<EstimateReport> {
    many_to_one_rhs_with_policy(rng, x, d, a, f, n, steps, LastPassagePolicy::Exact)
}

/// Moments `E T`, `E T²` of the first time a Bessel(3) process from 0 hits `a`.
pub fn bessel3_hitting_moments(a: f64) -> (f64, f64) {
    let a2 = a * a;
    (a2 / 3.0, 7.0 * a2 * a2 / 45.0)
}

/// The constant of the stable disintegration in dimension `d`. Only the
/// Cauchy case `α = 1` is available, where the density on a ray is explicit.
pub fn stable_disintegration_constant(d: usize, alpha: f64) -> Result<f64> {
    if alpha != 1.0 {
        return Err(invalid("alpha", "only alpha = 1 has a closed-form density"));
    }
    if d < 3 {
        return Err(invalid("d", format!("need d >= 3, got {d}")));
    }
    let df = d as f64;
    let omega = df - 1.0 + alpha / 2.0;
    // ∫ v^{ω-1} (1+v²)^{-d/2} dv = B(ω/2, (d-ω)/2) / 2
    let ray = gamma(df / 2.0) / std::f64::consts::PI.powf(df / 2.0) * beta(omega / 2.0, (df - omega) / 2.0) / 2.0;
    Ok(alpha / (2.0 * (2.0 * std::f64::consts::PI).sqrt()) * ray)
}

/// CSV of spine-size samples.
pub fn write_spine_csv<W: Write>(mut w: W, a: f64, samples: &[Vec<f64>]) -> Result<()> {
    let io = |e: std::io::Error| Error::InvalidSamples(format!("write failed: {e}"));
    let dim = samples.first().map_or(0, Vec::len);
    writeln!(w, "# gfx-lab v1").map_err(io)?;
    let mut header = String::from("replicate,a");
    for c in 0..dim {
        header.push_str(&format!(",x_{c}"));
    }
    writeln!(w, "{header}").map_err(io)?;
    for (i, s) in samples.iter().enumerate() {
        let mut line = format!("{i},{a}");
        for v in s {
            line.push_str(&format!(",{v}"));
        }
        writeln!(w, "{line}").map_err(io)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quadrature::{integrate_to_infinity, QuadOptions};
    use crate::stats::{ks_test, ks_two_sample, sorted_samples};

    #[test]
    fn bessel_brownian_moments() {
        let mut rng = RngState::new(1, 0);
        let n = 10_000;
        let mut sq = Vec::with_capacity(n);
        let mut inc = Vec::with_capacity(n);
        for _ in 0..n {
            let p = sample_bessel_brownian(&mut rng, 3, &[1.0, 2.0], 2.0, 8).unwrap();
            assert_eq!(p.horizontal().point(0), &[1.0, 2.0]);
            assert!((1..=8).all(|i| p.vertical().scalar(i) > 0.0));
            sq.push(p.vertical().scalar(4).powi(2));
            inc.push(p.horizontal().point(8)[0] - 1.0);
        }
        assert!(mean_ci(&sq).unwrap().within_sigmas(3.0, 3.0));
        assert!(mean_ci(&inc).unwrap().within_sigmas(0.0, 3.0));
    }

    #[test]
    fn last_passage_of_monotone_path() {
        let t = vec![0.0, 1.0, 2.0, 3.0];
        let v = PathGrid::new(1, t.clone(), vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let h = PathGrid::new(1, t, vec![0.0; 4]).unwrap();
        let p = HalfSpacePath::from_parts(h, v).unwrap();
        assert!((last_passage(&p, 1.5).unwrap() - 1.5).abs() < 1e-15);
        assert!(last_passage(&p, 0.5).unwrap() <= last_passage(&p, 2.5).unwrap());
        assert!(matches!(last_passage(&p, 3.0), Err(Error::HorizonTooSmall { .. })));
    }

    #[test]
    fn exact_last_passage_laplace() {
        let mut rng = RngState::new(2, 0);
        let a = 0.3;
        let xs: Vec<f64> = (0..100_000)
            .map(|_| {
                let p = sample_to_last_passage(&mut rng, 3, &[0.0, 0.0], a, 4).unwrap();
                assert_eq!(p.vertical().scalar(4), a);
                (-p.horizon()).exp()
            })
            .collect();
        let r = mean_ci(&xs).unwrap();
        assert!(r.within_sigmas((-a * 2f64.sqrt()).exp(), 3.0), "{r:?}");
    }

    #[test]
    fn last_passage_law_stable_under_grid_doubling() {
        let draw = |seed: u64, steps: usize| -> Vec<f64> {
            let mut rng = RngState::new(seed, 0);
            (0..5000)
                .map(|_| sample_until_transient(&mut rng, 3, &[0.0, 0.0], 0.3, steps).unwrap().1)
                .collect()
        };
        let (a, b) = (sorted_samples(draw(3, 512)).unwrap(), sorted_samples(draw(4, 1024)).unwrap());
        assert!(ks_two_sample(&a, &b).unwrap().pass);
    }

    #[test]
    fn spine_brownian_is_cauchy() {
        let mut rng = RngState::new(5, 0);
        let a = 1.5;
        let xs: Vec<f64> = (0..100_000).map(|_| spine_size_brownian(&mut rng, 3, a).unwrap()[0]).collect();
        let inside: Vec<f64> = xs.iter().map(|&x| f64::from(x.abs() <= a)).collect();
        assert!(mean_ci(&inside).unwrap().within_sigmas(0.5, 3.0));
        let cdf = |x: f64| 0.5 + (x / a).atan() / std::f64::consts::PI;
        assert!(ks_test(&sorted_samples(xs).unwrap(), cdf).unwrap().pass);
    }

    #[test]
    fn spine_brownian_rotation_invariance() {
        let mut rng = RngState::new(6, 0);
        let (c, s) = (0.6, 0.8);
        let mut before = Vec::new();
        let mut after = Vec::new();
        for i in 0..40_000 {
            let v = spine_size_brownian(&mut rng, 3, 1.0).unwrap();
            if i % 2 == 0 {
                before.push(v[0]);
            } else {
                after.push(c * v[0] - s * v[1]);
            }
        }
        assert!(ks_two_sample(&sorted_samples(before).unwrap(), &sorted_samples(after).unwrap()).unwrap().pass);
    }

    #[test]
    fn spine_stable_mean_and_errors() {
        let mut rng = RngState::new(7, 0);
        let xs: Vec<f64> = (0..100_000)
            .map(|_| spine_size_stable(&mut rng, 3, 1.2, 1.0).unwrap()[1].clamp(-50.0, 50.0))
            .collect();
        assert!(mean_ci(&xs).unwrap().within_sigmas(0.0, 3.0));
        assert!(spine_size_stable(&mut rng, 3, 2.0, 1.0).is_err());
        assert!(spine_size_stable(&mut rng, 3, 0.0, 1.0).is_err());
    }

    #[test]
    fn rhs_trivial_functionals() {
        let mut rng = RngState::new(8, 0);
        let one = many_to_one_rhs(&mut rng, &[1.0, 1.0], 3, 0.3, &|_, _| 1.0, 200, 8).unwrap();
        assert!((one.estimate - 2f64.powf(1.5)).abs() < 1e-15);
        assert_eq!(one.std_error, 0.0);
        let zero = many_to_one_rhs(&mut rng, &[1.0, 1.0], 3, 0.3, &|_, _| 0.0, 200, 8).unwrap();
        assert_eq!(zero.estimate, 0.0);
        assert!(many_to_one_rhs(&mut rng, &[0.0, 0.0], 3, 0.3, &|_, _| 1.0, 200, 8).is_err());
    }

    #[test]
    fn rhs_views_start_where_expected() {
        let mut rng = RngState::new(9, 0);
        let f = |u1: &PathView, u2: &PathView| {
            assert_eq!(u1.start(), (&[0.0, 0.0][..], 0.0));
            assert_eq!(u2.start().0, &[1.0, 0.0]);
            assert_eq!(u1.end().1, 0.3);
            1.0
        };
        many_to_one_rhs(&mut rng, &[1.0, 0.0], 3, 0.3, &f, 10, 8).unwrap();
    }

    #[test]
    fn cauchy_disintegration_constant() {
        for d in [3usize, 4] {
            let df = d as f64;
            let omega = df - 0.5;
            // Oracle: quadrature of the Cauchy density on a ray.
            let p1 = |v: f64| gamma(df / 2.0) / std::f64::consts::PI.powf(df / 2.0) * (1.0 + v * v).powf(-df / 2.0);
            let ray = integrate_to_infinity(|v| p1(v) * v.powf(omega - 1.0), 0.0, QuadOptions::abs(1e-13)).unwrap();
            let c = ray.value / (2.0 * (2.0 * std::f64::consts::PI).sqrt());
            assert!((stable_disintegration_constant(d, 1.0).unwrap() - c).abs() < 1e-9);
        }
        assert!(stable_disintegration_constant(3, 1.5).is_err());
    }

    #[test]
    fn hitting_moments_closed_form() {
        assert_eq!(bessel3_hitting_moments(1.0), (1.0 / 3.0, 7.0 / 45.0));
    }
}
