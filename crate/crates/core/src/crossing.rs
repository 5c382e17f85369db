//! Level crossings of grid paths whose vertical part is `|W| + shift` for a
//! three-dimensional Brownian path `W`.
//!
//! Between grid points the path is refined on a virtual dyadic tree whose
//! Gaussian midpoints are addressed by `(seed, interval, node)`, so every
//! query against the same path sees the same refinement. Segments whose
//! endpoints lie on the same side of the level are explored only while a
//! Brownian-bridge crossing is still plausible.

use crate::bridges::PathGrid;
use crate::randkit::{keyed_normals, KEYED_NORMALS_MAX};

/// Bisection depth inside one grid interval.
pub const REFINE_DEPTH: u32 = 8;

/// Segments with estimated crossing probability below this are skipped.
const PRUNE_PROBABILITY: f64 = 1e-6;

/// Key offsets separating the vertical, horizontal-midpoint and leaf
/// streams of one grid interval; nodes are numbered from 1 at the root.
const HORIZONTAL_NODE_OFFSET: u64 = 1 << (REFINE_DEPTH + 1);
const LEAF_NODE_OFFSET: u64 = 2 << (REFINE_DEPTH + 1);

/// Standard normals for the latent midpoint of `node` in `interval`.
pub(crate) fn vertical_noise(seed: u64, interval: usize, node: u64) -> [f64; 3] {
    let mut z = [0.0; 3];
    keyed_normals(seed, interval as u64, node, &mut z);
    z
}

/// Standard normals for the horizontal midpoint of `node` in `interval`.
pub(crate) fn horizontal_noise(seed: u64, interval: usize, node: u64, out: &mut [f64]) {
    keyed_normals(seed, interval as u64, HORIZONTAL_NODE_OFFSET + node, out);
}

/// The latent three-dimensional path behind a vertical component, plus the
/// key of its virtual refinement.
#[derive(Clone, Debug, PartialEq)]
pub struct Refinement {
    pub seed: u64,
    pub components: PathGrid,
    pub shift: f64,
}

impl Refinement {
    pub fn new(seed: u64, components: PathGrid, shift: f64) -> Self {
        debug_assert_eq!(components.dim(), 3);
        Self {
            seed,
            components,
            shift,
        }
    }

    /// The vertical grid `|W| + shift`.
    pub fn vertical(&self) -> PathGrid {
        let norms = self.components.norms();
        if self.shift == 0.0 {
            return norms;
        }
        let values = norms.values().iter().map(|v| v + self.shift).collect();
        PathGrid::new(1, norms.times().to_vec(), values).expect("same grid")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Crossing {
    pub time: f64,
    pub horizontal: Vec<f64>,
    pub upward: bool,
    /// Grid interval `[t_k, t_{k+1}]` containing the crossing.
    pub interval: usize,
}

#[derive(Clone, Copy)]
struct FinePoint {
    t: f64,
    z: f64,
    w: [f64; 3],
}

pub(crate) struct Scanner<'a> {
    pub horizontal: &'a PathGrid,
    pub vertical: &'a PathGrid,
    pub refinement: Option<&'a Refinement>,
}

impl<'a> Scanner<'a> {
    /// All crossings of `level`, chronologically. With `first_only`, stops
    /// after the first upward crossing.
    pub fn crossings(&self, level: f64, first_only: bool) -> Vec<Crossing> {
        let mut out = Vec::new();
        let n = self.vertical.len();
        for k in 0..n - 1 {
            let (zl, zr) = (self.vertical.scalar(k), self.vertical.scalar(k + 1));
            let straddles = (zl > level) != (zr > level);
            match self.refinement {
                None => {
                    if straddles {
                        out.push(self.linear(k, level));
                    }
                }
                Some(r) => {
                    if !straddles && !plausible(zl, zr, level, self.dt(k)) {
                        continue;
                    }
                    let left = self.grid_point(r, k);
                    let right = self.grid_point(r, k + 1);
                    let mut leaves = Vec::new();
                    explore(r, k, 1, 0, &left, &right, level, &mut leaves);
                    for (node, l, rr) in leaves {
                        out.push(self.leaf_crossing(r, k, node, &l, &rr, level));
                    }
                }
            }
            if first_only && out.iter().any(|c| c.upward) {
                out.retain(|c| c.upward);
                out.truncate(1);
                return out;
            }
        }
        if first_only {
            out.retain(|c| c.upward);
            out.truncate(1);
        }
        out
    }

    fn dt(&self, k: usize) -> f64 {
        self.vertical.time(k + 1) - self.vertical.time(k)
    }

    fn linear(&self, k: usize, level: f64) -> Crossing {
        let (zl, zr) = (self.vertical.scalar(k), self.vertical.scalar(k + 1));
        let f = ((level - zl) / (zr - zl)).clamp(0.0, 1.0);
        let (tl, tr) = (self.vertical.time(k), self.vertical.time(k + 1));
        let (hl, hr) = (self.horizontal.point(k), self.horizontal.point(k + 1));
        Crossing {
            time: tl + f * (tr - tl),
            horizontal: hl.iter().zip(hr).map(|(a, b)| a + f * (b - a)).collect(),
            upward: zr > level,
            interval: k,
        }
    }

    fn grid_point(&self, r: &Refinement, k: usize) -> FinePoint {
        let p = r.components.point(k);
        FinePoint {
            t: self.vertical.time(k),
            z: self.vertical.scalar(k),
            w: [p[0], p[1], p[2]],
        }
    }

    /// Horizontal value at the left end of `node`'s segment and at its right
    /// end, rebuilt by descending the dyadic tree from the grid interval.
    fn horizontal_at(&self, r: &Refinement, interval: usize, node: u64) -> (Vec<f64>, Vec<f64>) {
        let hdim = self.horizontal.dim();
        let mut hl = self.horizontal.point(interval).to_vec();
        let mut hr = self.horizontal.point(interval + 1).to_vec();
        let mut dt = self.dt(interval);
        let depth = 63 - node.leading_zeros();
        let mut z = [0.0; KEYED_NORMALS_MAX];
        for j in 0..depth {
            let ancestor = node >> (depth - j);
            horizontal_noise(r.seed, interval, ancestor, &mut z[..hdim]);
            let sd = (dt / 4.0).sqrt();
            let right_half = (node >> (depth - j - 1)) & 1 == 1;
            for c in 0..hdim {
                let mid = 0.5 * (hl[c] + hr[c]) + sd * z[c];
                if right_half {
                    hl[c] = mid;
                } else {
                    hr[c] = mid;
                }
            }
            dt *= 0.5;
        }
        (hl, hr)
    }

    /// Crossing inside a finest segment: time by linear interpolation of the
    /// vertical part, horizontal value drawn from the bridge at that time.
    fn leaf_crossing(
        &self,
        r: &Refinement,
        interval: usize,
        node: u64,
        left: &FinePoint,
        right: &FinePoint,
        level: f64,
    ) -> Crossing {
        let f = ((level - left.z) / (right.z - left.z)).clamp(0.0, 1.0);
        let dt = right.t - left.t;
        let hdim = self.horizontal.dim();
        let (hl, hr) = self.horizontal_at(r, interval, node);
        let mut z = [0.0; KEYED_NORMALS_MAX];
        keyed_normals(r.seed, interval as u64, LEAF_NODE_OFFSET + node, &mut z[..hdim]);
        let sd = (f * (1.0 - f) * dt).sqrt();
        Crossing {
            time: left.t + f * dt,
            horizontal: (0..hdim).map(|c| hl[c] + f * (hr[c] - hl[c]) + sd * z[c]).collect(),
            upward: right.z > level,
            interval,
        }
    }
}

/// One-dimensional Brownian-bridge estimate of the chance that a segment
/// with both ends on the same side of `level` crosses it.
fn plausible(zl: f64, zr: f64, level: f64, dt: f64) -> bool {
    let p = (-2.0 * (zl - level) * (zr - level) / dt).exp();
    p >= PRUNE_PROBABILITY
}

/// Depth-first search for finest segments straddling `level`; pushes
/// `(node, left, right)` for each, chronologically.
#[allow(clippy::too_many_arguments)]
fn explore(
    r: &Refinement,
    interval: usize,
    node: u64,
    depth: u32,
    left: &FinePoint,
    right: &FinePoint,
    level: f64,
    out: &mut Vec<(u64, FinePoint, FinePoint)>,
) {
    let straddles = (left.z > level) != (right.z > level);
    let dt = right.t - left.t;
    if !straddles && (depth == REFINE_DEPTH || !plausible(left.z, right.z, level, dt)) {
        return;
    }
    if depth == REFINE_DEPTH {
        out.push((node, *left, *right));
        return;
    }
    let z = vertical_noise(r.seed, interval, node);
    let sd = (dt / 4.0).sqrt();
    let mut w = [0.0; 3];
    for c in 0..3 {
        w[c] = 0.5 * (left.w[c] + right.w[c]) + sd * z[c];
    }
    let mid = FinePoint {
        t: 0.5 * (left.t + right.t),
        z: (w[0] * w[0] + w[1] * w[1] + w[2] * w[2]).sqrt() + r.shift,
        w,
    };
    explore(r, interval, 2 * node, depth + 1, left, &mid, level, out);
    explore(r, interval, 2 * node + 1, depth + 1, &mid, right, level, out);
}

/// Borrowed view of a piece of a path, possibly time-reversed, optionally
/// closed by a refined endpoint that is not a grid point.
#[derive(Clone, Copy, Debug)]
pub struct PathView<'a> {
    horizontal: &'a PathGrid,
    vertical: &'a PathGrid,
    first: usize,
    count: usize,
    reversed: bool,
    origin: f64,
    tip: Option<Tip<'a>>,
}

#[derive(Clone, Copy, Debug)]
struct Tip<'a> {
    time: f64,
    horizontal: &'a [f64],
    vertical: f64,
}

impl<'a> PathView<'a> {
    /// The whole grid path, forward in time.
    pub fn full(horizontal: &'a PathGrid, vertical: &'a PathGrid) -> Self {
        Self {
            horizontal,
            vertical,
            first: 0,
            count: vertical.len(),
            reversed: false,
            origin: 0.0,
            tip: None,
        }
    }

    /// The path on `[0, until]`, ending at the refined point `(until, h, z)`.
    pub(crate) fn head(
        horizontal: &'a PathGrid,
        vertical: &'a PathGrid,
        until: f64,
        h: &'a [f64],
        z: f64,
    ) -> Self {
        let count = vertical.times().partition_point(|&t| t < until);
        Self {
            horizontal,
            vertical,
            first: 0,
            count,
            reversed: false,
            origin: 0.0,
            tip: Some(Tip {
                time: until,
                horizontal: h,
                vertical: z,
            }),
        }
    }

    /// The path after `from`, reversed: view time `s` is original time
    /// `R - s`, ending at the refined point `(from, h, z)`.
    pub(crate) fn tail_reversed(
        horizontal: &'a PathGrid,
        vertical: &'a PathGrid,
        from: f64,
        h: &'a [f64],
        z: f64,
    ) -> Self {
        let n = vertical.len();
        let after = n - vertical.times().partition_point(|&t| t <= from);
        let duration = vertical.duration();
        Self {
            horizontal,
            vertical,
            first: n - 1,
            count: after,
            reversed: true,
            origin: duration,
            tip: Some(Tip {
                time: duration - from,
                horizontal: h,
                vertical: z,
            }),
        }
    }

    pub fn len(&self) -> usize {
        self.count + usize::from(self.tip.is_some())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.horizontal.dim()
    }

    fn grid_index(&self, i: usize) -> usize {
        if self.reversed {
            self.first - i
        } else {
            self.first + i
        }
    }

    pub fn time(&self, i: usize) -> f64 {
        if i < self.count {
            (self.vertical.time(self.grid_index(i)) - self.origin).abs()
        } else {
            self.tip.expect("index within view").time
        }
    }

    pub fn horizontal(&self, i: usize) -> &'a [f64] {
        if i < self.count {
            self.horizontal.point(self.grid_index(i))
        } else {
            self.tip.expect("index within view").horizontal
        }
    }

    pub fn vertical(&self, i: usize) -> f64 {
        if i < self.count {
            self.vertical.scalar(self.grid_index(i))
        } else {
            self.tip.expect("index within view").vertical
        }
    }

    /// Length of the time interval covered.
    pub fn duration(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.time(self.len() - 1)
        }
    }

    pub fn start(&self) -> (&'a [f64], f64) {
        (self.horizontal(0), self.vertical(0))
    }

    pub fn end(&self) -> (&'a [f64], f64) {
        let i = self.len() - 1;
        (self.horizontal(i), self.vertical(i))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridges::sample_brownian_bridge;
    use crate::randkit::RngState;

    fn tent() -> (PathGrid, PathGrid) {
        let t = vec![0.0, 0.5, 1.0];
        let v = PathGrid::new(1, t.clone(), vec![0.0, 1.0, 0.0]).unwrap();
        let h = PathGrid::new(1, t, vec![0.0, 1.0, 2.0]).unwrap();
        (h, v)
    }

    #[test]
    fn linear_crossings_of_tent() {
        let (h, v) = tent();
        let s = Scanner {
            horizontal: &h,
            vertical: &v,
            refinement: None,
        };
        let c = s.crossings(0.5, false);
        assert_eq!(c.len(), 2);
        assert!((c[0].time - 0.25).abs() < 1e-15 && c[0].upward);
        assert!((c[1].time - 0.75).abs() < 1e-15 && !c[1].upward);
        assert!((c[1].horizontal[0] - c[0].horizontal[0] - 1.0).abs() < 1e-15);
        assert!(s.crossings(1.5, false).is_empty());
    }

    fn latent_path(seed: u64, steps: usize) -> (PathGrid, PathGrid, Refinement) {
        let mut rng = RngState::new(seed, 0);
        let w = sample_brownian_bridge(&mut rng, 3, &[0.0; 3], 1.0, steps).unwrap();
        let h = sample_brownian_bridge(&mut rng, 2, &[1.0, 0.0], 1.0, steps).unwrap();
        let r = Refinement::new(seed, w, 0.0);
        (h, r.vertical(), r)
    }

    #[test]
    fn refined_crossings_alternate_and_are_repeatable() {
        for seed in 0..50 {
            let (h, v, r) = latent_path(seed, 64);
            let s = Scanner {
                horizontal: &h,
                vertical: &v,
                refinement: Some(&r),
            };
            let a = s.crossings(0.2, false);
            assert_eq!(a, s.crossings(0.2, false));
            for (i, c) in a.iter().enumerate() {
                assert_eq!(c.upward, i % 2 == 0);
                assert!(c.time >= v.time(c.interval) && c.time <= v.time(c.interval + 1));
            }
            for w in a.windows(2) {
                assert!(w[0].time <= w[1].time);
            }
        }
    }

    #[test]
    fn first_hitting_is_monotone_in_level() {
        for seed in 0..50 {
            let (h, v, r) = latent_path(seed, 64);
            let s = Scanner {
                horizontal: &h,
                vertical: &v,
                refinement: Some(&r),
            };
            let t1 = s.crossings(0.1, true).first().map(|c| c.time);
            let t2 = s.crossings(0.3, true).first().map(|c| c.time);
            if let (Some(t1), Some(t2)) = (t1, t2) {
                assert!(t1 <= t2);
            }
        }
    }

    #[test]
    fn views_cover_head_and_reversed_tail() {
        let (h, v) = tent();
        let tip_h = [0.5];
        let head = PathView::head(&h, &v, 0.25, &tip_h, 0.5);
        assert_eq!(head.len(), 2);
        assert_eq!(head.duration(), 0.25);
        assert_eq!(head.end(), (&tip_h[..], 0.5));
        let tip_h2 = [1.5];
        let tail = PathView::tail_reversed(&h, &v, 0.75, &tip_h2, 0.5);
        assert_eq!(tail.len(), 2);
        assert_eq!(tail.start(), (&[2.0][..], 0.0));
        assert_eq!(tail.duration(), 0.25);
        let full = PathView::full(&h, &v);
        assert_eq!(full.len(), 3);
        assert_eq!(full.duration(), 1.0);
    }
}
