//! Seedable random streams and the exact variate generators everything else
//! is built on.
//!
//! Streams come from ChaCha8 keyed by `(seed, stream_id)`: the stream id
//! selects an independent 2^64-block counter space, so replicate `i` of an
//! ensemble simply owns stream `i` and results never depend on scheduling.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_xoshiro::Xoshiro256PlusPlus;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Single-owner random stream.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream_id: u64,
    inner: ChaCha8Rng,
}

impl RngState {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream_id);
        Self {
            seed,
            stream_id,
            inner,
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    /// Uniform on [0, 1).
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform on (0, 1], safe to take logarithms of.
    pub fn uniform_open(&mut self) -> f64 {
        1.0 - self.uniform()
    }

    pub fn exponential(&mut self, rate: f64) -> f64 {
        let e: f64 = Exp1.sample(&mut self.inner);
        e / rate
    }

    /// Fresh 64-bit key, used to seed path-attached refinement streams.
    pub fn derive_key(&mut self) -> u64 {
        self.inner.next_u64()
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        self.inner.fill_bytes(dst)
    }
}

/// Where the random numbers behind an estimate came from.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub seed: u64,
    pub first_stream: u64,
    pub n_streams: u64,
}

pub fn sample_gaussian(rng: &mut RngState) -> f64 {
    StandardNormal.sample(&mut rng.inner)
}

pub fn fill_gaussian(rng: &mut RngState, out: &mut [f64]) {
    for v in out {
        *v = StandardNormal.sample(&mut rng.inner);
    }
}

/// Gamma variate with the given shape and rate (mean shape / rate).
pub fn sample_gamma(rng: &mut RngState, shape: f64, rate: f64) -> Result<f64> {
    if !(shape > 0.0 && shape.is_finite()) {
        return Err(invalid("shape", format!("must be positive, got {shape}")));
    }
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(invalid("rate", format!("must be positive, got {rate}")));
    }
    let dist = Gamma::new(shape, 1.0 / rate).map_err(|e| invalid("shape", e.to_string()))?;
    Ok(dist.sample(&mut rng.inner))
}

/// Uniform point on the unit sphere S^{n-1}.
pub fn sample_uniform_sphere(rng: &mut RngState, n: usize) -> Result<Vec<f64>> {
    if n == 0 {
        return Err(invalid("n", "dimension must be at least 1"));
    }
    if n == 1 {
        let s = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
        return Ok(vec![s]);
    }
    let mut v = vec![0.0; n];
    loop {
        fill_gaussian(rng, &mut v);
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-150 {
            v.iter_mut().for_each(|x| *x /= norm);
            return Ok(v);
        }
    }
}

/// One-sided stable variate with `E[exp(-l S)] = exp(-scale_time * l^index)`.
///
/// Kanter's representation: with U uniform on (0, pi) and E standard
/// exponential, `sin(aU) / sin(U)^(1/a) * (sin((1-a)U) / E)^((1-a)/a)` has
/// Laplace transform `exp(-l^a)`; the time scale enters as `t^(1/a)`.
pub fn sample_positive_stable(rng: &mut RngState, index: f64, scale_time: f64) -> Result<f64> {
    if !(index > 0.0 && index < 1.0) {
        return Err(invalid("index", format!("must lie in (0, 1), got {index}")));
    }
    if !(scale_time >= 0.0 && scale_time.is_finite()) {
        return Err(invalid(
            "scale_time",
            format!("must be nonnegative, got {scale_time}"),
        ));
    }
    if scale_time == 0.0 {
        return Ok(0.0);
    }
    let u = std::f64::consts::PI * rng.uniform_open();
    let e: f64 = Exp1.sample(&mut rng.inner);
    let a = index;
    let head = (a * u).sin() / u.sin().powf(1.0 / a);
    let tail = (((1.0 - a) * u).sin() / e).powf((1.0 - a) / a);
    Ok(scale_time.powf(1.0 / a) * head * tail)
}

/// Maximum number of keyed normals per node.
pub const KEYED_NORMALS_MAX: usize = 32;

/// Gaussian variates addressed by `(seed, stream, node)` instead of by draw
/// order. Every address reproduces the same values, which lets a path carry
/// a virtual dyadic refinement that all queries see identically. The address
/// is hashed with SplitMix64 into the seed of a short Xoshiro256++ stream,
/// so a lookup is cheap enough to do per refinement node.
pub fn keyed_normals(seed: u64, stream: u64, node: u64, out: &mut [f64]) {
    assert!(out.len() <= KEYED_NORMALS_MAX, "too many keyed normals");
    let key = splitmix(splitmix(splitmix(seed) ^ stream) ^ node);
    let mut g = Xoshiro256PlusPlus::seed_from_u64(key);
    for v in out.iter_mut() {
        *v = StandardNormal.sample(&mut g);
    }
}

fn splitmix(x: u64) -> u64 {
    let mut z = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Run `n` replicates, replicate `i` on stream `first_stream + i`, and return
/// results in stream order regardless of how rayon schedules them.
pub fn replicate<T, F>(seed: u64, first_stream: u64, n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize, &mut RngState) -> T + Sync,
{
    (0..n)
        .into_par_iter()
        .map(|i| {
            let mut rng = RngState::new(seed, first_stream + i as u64);
            f(i, &mut rng)
        })
        .collect()
}
