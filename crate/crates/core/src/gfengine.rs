//! Cell systems on the Ulam tree, the genealogical martingale, and two
//! independent spine samplers.
//!
//! A cell's size follows a driving process `X`. Each jump `X(t⁻) → X(t)`
//! gives birth to a child of initial size `X(t⁻) - X(t)`, and every child
//! evolves as an independent copy. Labels follow the Ulam convention: the
//! root is `[]` and the `k`-th child (1-based, by descending size) of `u` is
//! `u ++ [k]`.

use std::collections::VecDeque;
use std::io::Write;

use serde::Serialize;

use crate::cumulant::{check_root, jump_integral, LevySystemSpec, Psi};
use crate::error::{invalid, Error, Result};
use crate::randkit::{sample_uniform_sphere, RngState};

/// Hard cap on the number of cells in one tree.
pub const NODE_BUDGET: usize = 10_000_000;
/// Cells stop being simulated once their size falls below this fraction of
/// the expansion floor.
pub const DUST_FRACTION: f64 = 0.1;
/// Largest residual share of the selection mass `spine_by_selection` accepts.
pub const SELECTION_RESIDUAL_LIMIT: f64 = 0.05;

/// Event-driven driving process: a jump clock, a deterministic flow between
/// jumps and a jump kernel.
pub trait DrivingProcess: Sync {
    fn dim(&self) -> usize;
    /// Jump intensity, assumed constant along the flow started from `x`.
    fn jump_rate(&self, x: &[f64]) -> f64;
    /// Position after flowing for time `t` from `x`.
    fn flow(&self, x: &[f64], t: f64) -> Vec<f64>;
    /// Time for the flow from `x` to bring the norm down to `r`; infinite if
    /// it never does, zero if `|x| <= r`.
    fn time_to_norm(&self, x: &[f64], r: f64) -> f64;
    /// Post-jump position and the angle variable that produced it.
    fn jump_target(&self, rng: &mut RngState, x: &[f64]) -> (Vec<f64>, f64);
}

/// The finite-activity toy: radial decay at rate `b`, jumps at rate `λ`
/// sending `x` to `β|x|V` with `V` uniform. In the plane `V` is `x/|x|`
/// rotated by a uniform angle.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ToyDrivingSpec {
    pub n: usize,
    pub lambda: f64,
    pub beta: f64,
    pub b: f64,
}

impl ToyDrivingSpec {
    pub fn new(n: usize, lambda: f64, beta: f64, b: f64) -> Result<Self> {
        let s = Self { n, lambda, beta, b };
        s.levy().validate()?;
        Ok(s)
    }

    /// The planar toy with `b = λβ²`, for which `κ(2) = 0`.
    pub fn planar_default() -> Self {
        Self {
            n: 2,
            lambda: 1.0,
            beta: 0.5,
            b: 0.25,
        }
    }

    pub fn levy(&self) -> LevySystemSpec {
        LevySystemSpec::ToyCP {
            lambda: self.lambda,
            beta: self.beta,
            b: self.b,
            n: self.n,
        }
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn rotate2(x: &[f64], w: f64) -> [f64; 2] {
    let (s, c) = w.sin_cos();
    [c * x[0] - s * x[1], s * x[0] + c * x[1]]
}

impl DrivingProcess for ToyDrivingSpec {
    fn dim(&self) -> usize {
        self.n
    }

    fn jump_rate(&self, _x: &[f64]) -> f64 {
        self.lambda
    }

    fn flow(&self, x: &[f64], t: f64) -> Vec<f64> {
        let f = (-self.b * t).exp();
        x.iter().map(|v| v * f).collect()
    }

    fn time_to_norm(&self, x: &[f64], r: f64) -> f64 {
        let nx = norm(x);
        if nx <= r {
            0.0
        } else if self.b > 0.0 && r > 0.0 {
            (nx / r).ln() / self.b
        } else {
            f64::INFINITY
        }
    }

    fn jump_target(&self, rng: &mut RngState, x: &[f64]) -> (Vec<f64>, f64) {
        if self.n == 2 {
            let w = std::f64::consts::TAU * rng.uniform();
            let r = rotate2(x, w);
            (vec![self.beta * r[0], self.beta * r[1]], w)
        } else {
            let nx = norm(x);
            let v = sample_uniform_sphere(rng, self.n).expect("n >= 3");
            let cos = v.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() / nx;
            (v.iter().map(|c| self.beta * nx * c).collect(), cos.clamp(-1.0, 1.0).acos())
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Jump {
    /// Time since the cell's birth.
    pub time: f64,
    pub before: Vec<f64>,
    pub after: Vec<f64>,
    pub angle: f64,
}

impl Jump {
    /// Initial size of the child born at this jump, `X(t⁻) - X(t)`.
    pub fn child(&self) -> Vec<f64> {
        self.before.iter().zip(&self.after).map(|(b, a)| b - a).collect()
    }

    /// `|ΔX|`.
    pub fn size(&self) -> f64 {
        self.before
            .iter()
            .zip(&self.after)
            .map(|(b, a)| (b - a).powi(2))
            .sum::<f64>()
            .sqrt()
    }
}

/// One simulated cell, in time since its birth.
#[derive(Clone, Debug, PartialEq)]
pub struct CellPath {
    pub start: Vec<f64>,
    pub jumps: Vec<Jump>,
    /// Time up to which the path is known.
    pub end_time: f64,
    pub end: Vec<f64>,
    /// Whether simulation stopped because the size fell below the dust level
    /// rather than at the horizon.
    pub reached_dust: bool,
}

impl CellPath {
    pub fn end_norm(&self) -> f64 {
        norm(&self.end)
    }

    /// `X(s)` for `0 <= s <= end_time` (right-continuous), using the
    /// driver's flow between recorded jumps.
    pub fn position_at<D: DrivingProcess>(&self, driver: &D, s: f64) -> Option<Vec<f64>> {
        if !(0.0..=self.end_time).contains(&s) {
            return None;
        }
        let k = self.jumps.partition_point(|j| j.time <= s);
        let (t0, x) = if k == 0 {
            (0.0, &self.start)
        } else {
            (self.jumps[k - 1].time, &self.jumps[k - 1].after)
        };
        Some(driver.flow(x, s - t0))
    }
}

fn check_start(x0: &[f64], dim: usize) -> Result<()> {
    if x0.len() != dim {
        return Err(invalid("x0", format!("expected {dim} coordinates, got {}", x0.len())));
    }
    if !(norm(x0) > 0.0) || x0.iter().any(|v| !v.is_finite()) {
        return Err(invalid("x0", "must be a finite nonzero vector"));
    }
    Ok(())
}

/// Exact event-driven simulation of one cell up to `horizon`.
pub fn simulate_cell<D: DrivingProcess>(rng: &mut RngState, driver: &D, x0: &[f64], horizon: f64) -> Result<CellPath> {
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(invalid("horizon", "must be positive and finite; use simulate_cell_to_dust otherwise"));
    }
    simulate_cell_to_dust(rng, driver, x0, horizon, 0.0)
}

/// As `simulate_cell`, also stopping once `|X| < dust`. The horizon may be
/// infinite when `dust > 0` and the process decays to it.
pub fn simulate_cell_to_dust<D: DrivingProcess>(
    rng: &mut RngState,
    driver: &D,
    x0: &[f64],
    horizon: f64,
    dust: f64,
) -> Result<CellPath> {
    check_start(x0, driver.dim())?;
    if !(horizon > 0.0) || !(dust >= 0.0) {
        return Err(invalid("horizon", "need horizon > 0 and dust >= 0"));
    }
    let mut jumps = Vec::new();
    let mut t = 0.0;
    let mut x = x0.to_vec();
    loop {
        let rate = driver.jump_rate(&x);
        let wait = if rate > 0.0 { rng.exponential(rate) } else { f64::INFINITY };
        let to_dust = if dust > 0.0 { driver.time_to_norm(&x, dust) } else { f64::INFINITY };
        let stop = (horizon - t).min(to_dust);
        if stop.is_infinite() && wait.is_infinite() {
            return Err(invalid("horizon", "the cell never stops: no jumps, no decay, infinite horizon"));
        }
        if wait >= stop {
            let end_time = t + stop;
            return Ok(CellPath {
                start: x0.to_vec(),
                jumps,
                end_time,
                end: driver.flow(&x, stop),
                reached_dust: to_dust <= horizon - t,
            });
        }
        t += wait;
        let before = driver.flow(&x, wait);
        let (after, angle) = driver.jump_target(rng, &before);
        let small = norm(&after) < dust;
        x = after.clone();
        jumps.push(Jump {
            time: t,
            before,
            after,
            angle,
        });
        if small {
            return Ok(CellPath {
                start: x0.to_vec(),
                jumps,
                end_time: t,
                end: x,
                reached_dust: true,
            });
        }
        if jumps.len() > NODE_BUDGET {
            return Err(Error::NodeBudget { budget: NODE_BUDGET });
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Expanded,
    /// Initial size below the expansion floor.
    BelowFloor,
    /// Generation beyond `max_gen`.
    DepthLimit,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Cell {
    pub label: Vec<u32>,
    pub parent: Option<usize>,
    pub birth_time: f64,
    pub initial_size: Vec<f64>,
    pub generation: usize,
    pub status: CellStatus,
    /// Present for expanded cells.
    pub path: Option<CellPath>,
    /// Indices of the children, ranked by descending initial norm.
    pub children: Vec<usize>,
}

impl Cell {
    pub fn is_truncated(&self) -> bool {
        self.status != CellStatus::Expanded
    }

    pub fn initial_norm(&self) -> f64 {
        norm(&self.initial_size)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TreeConfig {
    pub max_gen: usize,
    /// Expansion floor relative to `|x0|`.
    pub size_floor: f64,
    pub horizon: f64,
    pub node_budget: usize,
}

impl TreeConfig {
    pub fn new(max_gen: usize, size_floor: f64, horizon: f64) -> Self {
        Self {
            max_gen,
            size_floor,
            horizon,
            node_budget: NODE_BUDGET,
        }
    }
}

/// Immutable cell system; `cells[0]` is the root and cells appear in
/// breadth-first order.
#[derive(Clone, Debug, PartialEq)]
pub struct CellTree {
    pub cells: Vec<Cell>,
    pub config: TreeConfig,
    /// Absolute expansion floor `size_floor * |x0|`.
    pub floor: f64,
    /// Absolute dust level at which cell simulation stops.
    pub dust: f64,
}

impl CellTree {
    pub fn root(&self) -> &Cell {
        &self.cells[0]
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn generation(&self, n: usize) -> impl Iterator<Item = &Cell> {
        self.cells.iter().filter(move |c| c.generation == n)
    }

    pub fn find(&self, label: &[u32]) -> Option<&Cell> {
        let mut i = 0;
        for &k in label {
            i = *self.cells[i].children.get((k as usize).checked_sub(1)?)?;
        }
        Some(&self.cells[i])
    }

    /// Number of truncated leaves and their ω-mass `Σ |x|^ω`.
    pub fn truncation_stats(&self, omega: f64) -> (usize, f64) {
        self.cells
            .iter()
            .filter(|c| c.status == CellStatus::BelowFloor)
            .fold((0, 0.0), |(k, m), c| (k + 1, m + c.initial_norm().powf(omega)))
    }
}

/// Breadth-first construction of the cell system started from `x0` at time
/// 0. Cells of generation `<= max_gen` whose initial norm is at least
/// `size_floor * |x0|` are simulated until the horizon or until they fall
/// below a tenth of that floor; all their children are recorded.
pub fn build_cell_system<D: DrivingProcess>(
    rng: &mut RngState,
    driver: &D,
    x0: &[f64],
    config: &TreeConfig,
) -> Result<CellTree> {
    check_start(x0, driver.dim())?;
    if !(config.size_floor > 0.0) {
        return Err(invalid("size_floor", "must be positive"));
    }
    if !(config.horizon > 0.0) {
        return Err(invalid("horizon", "must be positive"));
    }
    let floor = config.size_floor * norm(x0);
    let dust = floor * DUST_FRACTION;
    let mut cells = vec![Cell {
        label: Vec::new(),
        parent: None,
        birth_time: 0.0,
        initial_size: x0.to_vec(),
        generation: 0,
        status: CellStatus::Expanded,
        path: None,
        children: Vec::new(),
    }];
    let mut queue = VecDeque::from([0usize]);
    while let Some(i) = queue.pop_front() {
        let (gen, birth) = (cells[i].generation, cells[i].birth_time);
        if gen > config.max_gen {
            cells[i].status = CellStatus::DepthLimit;
            continue;
        }
        if cells[i].initial_norm() < floor {
            cells[i].status = CellStatus::BelowFloor;
            continue;
        }
        let path = simulate_cell_to_dust(rng, driver, &cells[i].initial_size, config.horizon - birth, dust)?;
        let mut kids: Vec<(f64, f64, Vec<f64>)> = path
            .jumps
            .iter()
            .map(|j| {
                let c = j.child();
                (norm(&c), j.time, c)
            })
            .collect();
        kids.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.total_cmp(&b.1)));
        if cells.len() + kids.len() > config.node_budget {
            return Err(Error::NodeBudget {
                budget: config.node_budget,
            });
        }
        for (k, (_, t, c)) in kids.into_iter().enumerate() {
            let mut label = cells[i].label.clone();
            label.push(k as u32 + 1);
            let j = cells.len();
            cells.push(Cell {
                label,
                parent: Some(i),
                birth_time: birth + t,
                initial_size: c,
                generation: gen + 1,
                status: CellStatus::Expanded,
                path: None,
                children: Vec::new(),
            });
            cells[i].children.push(j);
            queue.push_back(j);
        }
        cells[i].path = Some(path);
    }
    Ok(CellTree {
        cells,
        config: config.clone(),
        floor,
        dust,
    })
}

/// `Σ_{|u| = n+1} |x_u|^ω` with a bound on the mass lost to truncation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GenerationSum {
    pub value: f64,
    /// ω-mass of below-floor cells in generations `<= n` plus the residual
    /// `|X_end|^ω` of expanded cells in generations `<= n`.
    pub remainder: f64,
    pub cells: usize,
}

pub fn genealogical_martingale(tree: &CellTree, n: usize, omega: f64) -> Result<GenerationSum> {
    if n > tree.config.max_gen {
        return Err(Error::InsufficientDepth {
            needed: n + 1,
            expanded: tree.config.max_gen + 1,
        });
    }
    let mut out = GenerationSum {
        value: 0.0,
        remainder: 0.0,
        cells: 0,
    };
    for c in &tree.cells {
        if c.generation == n + 1 {
            out.value += c.initial_norm().powf(omega);
            out.cells += 1;
        } else if c.generation <= n {
            match (&c.status, &c.path) {
                (CellStatus::BelowFloor, _) => out.remainder += c.initial_norm().powf(omega),
                (CellStatus::Expanded, Some(p)) => out.remainder += p.end_norm().powf(omega),
                _ => {}
            }
        }
    }
    Ok(out)
}

/// Cells alive at a fixed time.
#[derive(Clone, Debug, PartialEq)]
pub struct Snapshot {
    /// `(X_u(t - b_u), |u|)`, ranked by descending norm.
    pub cells: Vec<(Vec<f64>, usize)>,
    /// Born by `t` but never simulated: `(initial size, generation)`.
    pub truncated: Vec<(Vec<f64>, usize)>,
}

impl Snapshot {
    pub fn mass(&self, omega: f64) -> f64 {
        self.cells.iter().map(|(x, _)| norm(x).powf(omega)).sum()
    }

    pub fn truncated_mass(&self, omega: f64) -> f64 {
        self.truncated.iter().map(|(x, _)| norm(x).powf(omega)).sum()
    }
}

pub fn snapshot<D: DrivingProcess>(tree: &CellTree, driver: &D, t: f64) -> Result<Snapshot> {
    if t > tree.config.horizon {
        return Err(Error::BeyondHorizon {
            t,
            horizon: tree.config.horizon,
        });
    }
    if t < 0.0 {
        return Err(invalid("t", "must be nonnegative"));
    }
    let mut out = Snapshot {
        cells: Vec::new(),
        truncated: Vec::new(),
    };
    for c in tree.cells.iter().filter(|c| c.birth_time <= t) {
        match &c.path {
            Some(p) => {
                let s = t - c.birth_time;
                let alive = if p.reached_dust { s < p.end_time } else { s <= p.end_time };
                if alive {
                    out.cells.push((p.position_at(driver, s).expect("alive"), c.generation));
                }
            }
            None => out.truncated.push((c.initial_size.clone(), c.generation)),
        }
    }
    out.cells.sort_by(|a, b| norm(&b.0).total_cmp(&norm(&a.0)));
    Ok(out)
}

#[derive(Serialize)]
struct NodeRecord<'a> {
    label: &'a [u32],
    birth_time: f64,
    initial_size: &'a [f64],
    generation: usize,
    truncated: bool,
}

/// One JSON object per line, in breadth-first order.
pub fn write_tree_ndjson<W: Write>(mut w: W, tree: &CellTree) -> Result<()> {
    for c in &tree.cells {
        let rec = NodeRecord {
            label: &c.label,
            birth_time: c.birth_time,
            initial_size: &c.initial_size,
            generation: c.generation,
            truncated: c.is_truncated(),
        };
        let line = serde_json::to_string(&rec).map_err(|e| Error::InvalidSamples(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::InvalidSamples(format!("write failed: {e}")))?;
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpineEventKind {
    /// Jump of the tagged cell's own path.
    Within,
    /// The tag moves to the newborn child.
    Generation,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpineEvent {
    pub time: f64,
    pub kind: SpineEventKind,
    /// `ξ̂` just after the event.
    pub xi: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpinePath {
    pub events: Vec<SpineEvent>,
    pub horizon: f64,
    pub drift: f64,
    pub end_position: Vec<f64>,
}

impl SpinePath {
    /// `ξ̂(t) = log|X̂(t)| - log|x0|`.
    pub fn xi_at(&self, t: f64) -> f64 {
        let k = self.events.partition_point(|e| e.time <= t);
        let (t0, xi0) = if k == 0 {
            (0.0, 0.0)
        } else {
            (self.events[k - 1].time, self.events[k - 1].xi)
        };
        xi0 - self.drift * (t - t0)
    }

    pub fn xi_end(&self) -> f64 {
        self.xi_at(self.horizon)
    }

    pub fn generation_times(&self) -> Vec<f64> {
        self.events
            .iter()
            .filter(|e| e.kind == SpineEventKind::Generation)
            .map(|e| e.time)
            .collect()
    }
}

/// Direct spine sampler for the toy at a root `ω`: the tagged cell moves
/// with drift `-b`, makes its own jumps at rate `λβ^ω`, and at rate
/// `J(ω) = -ψ(ω)` passes the tag to a child `x - β|x|V` with `V` drawn
/// with density `∝ |θ - βV|^ω`.
#[derive(Clone, Debug)]
pub struct SpineSampler {
    spec: ToyDrivingSpec,
    omega: f64,
    within_rate: f64,
    generation_rate: f64,
}

impl SpineSampler {
    pub fn new(spec: &ToyDrivingSpec, omega: f64) -> Result<Self> {
        let levy = spec.levy();
        levy.validate()?;
        if spec.lambda == 0.0 {
            return Err(invalid("lambda", "the toy has no root with psi(omega) < 0 without jumps"));
        }
        check_root(&levy, &Psi::Closed, omega)?;
        let psi = Psi::Closed.eval(&levy, omega)?;
        if psi >= 0.0 {
            return Err(invalid("omega", format!("need psi(omega) < 0, got {psi}")));
        }
        let mut theta = vec![0.0; spec.n];
        theta[0] = 1.0;
        let generation_rate = jump_integral(&levy, omega, &theta)?.value;
        Ok(Self {
            spec: *spec,
            omega,
            within_rate: spec.lambda * spec.beta.powf(omega),
            generation_rate,
        })
    }

    pub fn generation_rate(&self) -> f64 {
        self.generation_rate
    }

    pub fn within_rate(&self) -> f64 {
        self.within_rate
    }

    /// Direction `V` with density `∝ |θ - βV|^ω`, by rejection from the
    /// uniform law with envelope `(1 + β)^ω`; returns `x - β|x|V`.
    fn tilted_child(&self, rng: &mut RngState, x: &[f64]) -> Vec<f64> {
        let beta = self.spec.beta;
        let nx = norm(x);
        let envelope = (1.0 + beta).powf(self.omega);
        loop {
            let v: Vec<f64> = if self.spec.n == 2 {
                let r = rotate2(x, std::f64::consts::TAU * rng.uniform());
                vec![r[0] / nx, r[1] / nx]
            } else {
                sample_uniform_sphere(rng, self.spec.n).expect("n >= 3")
            };
            let child: Vec<f64> = x.iter().zip(&v).map(|(a, b)| a - beta * nx * b).collect();
            let w = (norm(&child) / nx).powf(self.omega);
            if rng.uniform() * envelope < w {
                return child;
            }
        }
    }

    pub fn sample(&self, rng: &mut RngState, x0: &[f64], horizon: f64) -> Result<SpinePath> {
        check_start(x0, self.spec.n)?;
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(invalid("horizon", "must be positive and finite"));
        }
        let total = self.within_rate + self.generation_rate;
        let log0 = norm(x0).ln();
        let mut x = x0.to_vec();
        let mut t = 0.0;
        let mut events = Vec::new();
        loop {
            let wait = rng.exponential(total);
            if t + wait > horizon {
                x = self.spec.flow(&x, horizon - t);
                break;
            }
            t += wait;
            x = self.spec.flow(&x, wait);
            let kind = if rng.uniform() * total < self.generation_rate {
                x = self.tilted_child(rng, &x);
                SpineEventKind::Generation
            } else {
                x = self.spec.jump_target(rng, &x).0;
                SpineEventKind::Within
            };
            events.push(SpineEvent {
                time: t,
                kind,
                xi: norm(&x).ln() - log0,
            });
        }
        Ok(SpinePath {
            events,
            horizon,
            drift: self.spec.b,
            end_position: x,
        })
    }
}

pub fn sample_spine(rng: &mut RngState, spec: &ToyDrivingSpec, x0: &[f64], omega: f64, horizon: f64) -> Result<SpinePath> {
    SpineSampler::new(spec, omega)?.sample(rng, x0, horizon)
}

/// One cell of a selected lineage.
#[derive(Clone, Debug, PartialEq)]
pub struct LineageCell {
    pub birth_time: f64,
    pub initial_size: Vec<f64>,
    pub generation: usize,
}

/// Lineage chosen by size-biased selection, with the importance weight
/// `Π ℳ_k / |x_k|^ω` that turns it into a draw from the spine law.
#[derive(Clone, Debug, PartialEq)]
pub struct SelectedLineage {
    pub cells: Vec<LineageCell>,
    pub weight: f64,
    /// Largest share of a generation's selection mass lost to the residual
    /// `|X_end|^ω` of a cell stopped at dust level.
    pub residual_fraction: f64,
    /// Whether each selection picked the largest child.
    pub picked_largest: Vec<bool>,
}

/// Spine through the change of measure: simulate the root cell to dust,
/// select one child with probability `|x_u|^ω / Σ_v |x_v|^ω`, and repeat
/// `n_max` more times. Only the selected lineage is simulated; exact
/// lineage sampling would reweight the full `ℳ(n)`, which equals the
/// product of per-generation normalisers carried in `weight`.
pub fn spine_by_selection(
    rng: &mut RngState,
    spec: &ToyDrivingSpec,
    x0: &[f64],
    omega: f64,
    n_max: usize,
) -> Result<SelectedLineage> {
    SpineSampler::new(spec, omega)?;
    select_lineage(rng, spec, x0, omega, n_max, 1e-7)
}

pub(crate) fn select_lineage(
    rng: &mut RngState,
    spec: &ToyDrivingSpec,
    x0: &[f64],
    omega: f64,
    n_max: usize,
    dust_fraction: f64,
) -> Result<SelectedLineage> {
    check_start(x0, spec.n)?;
    let dust = dust_fraction * norm(x0);
    let mut cur = LineageCell {
        birth_time: 0.0,
        initial_size: x0.to_vec(),
        generation: 0,
    };
    let mut out = SelectedLineage {
        cells: Vec::new(),
        weight: 1.0,
        residual_fraction: 0.0,
        picked_largest: Vec::new(),
    };
    for _ in 0..=n_max {
        let path = simulate_cell_to_dust(rng, spec, &cur.initial_size, f64::INFINITY, dust)?;
        let kids: Vec<(Vec<f64>, f64)> = path.jumps.iter().map(|j| (j.child(), j.time)).collect();
        if kids.is_empty() {
            return Err(invalid("spec", "cell died without children"));
        }
        // Work relative to the largest child so that large ω does not
        // overflow.
        let sizes: Vec<f64> = kids.iter().map(|k| norm(&k.0)).collect();
        let top = sizes.iter().cloned().fold(0.0, f64::max);
        let rel: Vec<f64> = sizes.iter().map(|s| (s / top).powf(omega)).collect();
        let mass: f64 = rel.iter().sum();
        let residual = (path.end_norm() / top).powf(omega);
        out.residual_fraction = out.residual_fraction.max(residual / (mass + residual));
        if out.residual_fraction > SELECTION_RESIDUAL_LIMIT {
            return Err(Error::TruncationDominated {
                fraction: out.residual_fraction,
                allowed: SELECTION_RESIDUAL_LIMIT,
            });
        }
        let mut u = rng.uniform() * mass;
        let mut pick = rel.len() - 1;
        for (k, r) in rel.iter().enumerate() {
            if u < *r {
                pick = k;
                break;
            }
            u -= r;
        }
        let argmax = sizes
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, _)| k)
            .unwrap_or(0);
        out.picked_largest.push(pick == argmax);
        out.weight *= mass * (top / norm(&cur.initial_size)).powf(omega);
        let next = LineageCell {
            birth_time: cur.birth_time + kids[pick].1,
            initial_size: kids[pick].0.clone(),
            generation: cur.generation + 1,
        };
        out.cells.push(std::mem::replace(&mut cur, next));
    }
    out.cells.push(cur);
    Ok(out)
}

/// Lamperti time change of a sampled log-radius path: `A(s) = ∫_0^s e^{α ξ}`
/// accumulated by the trapezoidal rule, and `φ = A^{-1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct LampertiClock {
    times: Vec<f64>,
    accumulated: Vec<f64>,
}

pub fn lamperti_clock(times: &[f64], xi: &[f64], alpha: f64) -> Result<LampertiClock> {
    if times.len() != xi.len() || times.len() < 2 {
        return Err(invalid("xi_path", "need at least two (time, value) pairs of equal length"));
    }
    if times.windows(2).any(|w| !(w[1] > w[0])) {
        return Err(invalid("xi_path", "times must increase strictly"));
    }
    let mut acc = vec![0.0];
    for i in 1..times.len() {
        let f0 = (alpha * xi[i - 1]).exp();
        let f1 = (alpha * xi[i]).exp();
        acc.push(acc[i - 1] + 0.5 * (f0 + f1) * (times[i] - times[i - 1]));
    }
    Ok(LampertiClock {
        times: times.to_vec(),
        accumulated: acc,
    })
}

impl LampertiClock {
    /// `A(s)` at the path's own grid.
    pub fn accumulated(&self) -> &[f64] {
        &self.accumulated
    }

    /// `φ(t) = inf{s : A(s) > t}` with linear interpolation, relative to the
    /// path's first time. `None` when `t` exceeds the total clock.
    pub fn phi(&self, t: f64) -> Option<f64> {
        let total = *self.accumulated.last()?;
        if t < 0.0 || t > total {
            return None;
        }
        let k = self.accumulated.partition_point(|a| *a <= t).clamp(1, self.accumulated.len() - 1);
        let (a0, a1) = (self.accumulated[k - 1], self.accumulated[k]);
        let (s0, s1) = (self.times[k - 1], self.times[k]);
        let frac = if a1 > a0 { (t - a0) / (a1 - a0) } else { 0.0 };
        Some(s0 - self.times[0] + frac * (s1 - s0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::randkit::replicate;
    use crate::stats::{chi_square_counts, ks_test, ks_two_sample, mean_ci, sorted_samples};
    use statrs::distribution::{Discrete, Poisson};

    fn toy() -> ToyDrivingSpec {
        ToyDrivingSpec::planar_default()
    }

    #[test]
    fn no_jumps_is_pure_decay() {
        let s = ToyDrivingSpec::new(2, 0.0, 0.5, 0.25).unwrap();
        let mut rng = RngState::new(1, 0);
        let p = simulate_cell(&mut rng, &s, &[3.0, 4.0], 2.0).unwrap();
        assert!(p.jumps.is_empty());
        assert!((p.end_norm() - 5.0 * (-0.5f64).exp()).abs() < 1e-14);
        assert!(!p.reached_dust);
    }

    #[test]
    fn jump_counts_are_poisson() {
        let (t, n) = (2.0, 10_000);
        let counts = replicate(7, 0, n, |_, r| simulate_cell(r, &toy(), &[1.0, 0.0], t).unwrap().jumps.len());
        let pois = Poisson::new(t).unwrap();
        let bins = 8;
        let mut obs = vec![0.0; bins];
        for c in counts {
            obs[c.min(bins - 1)] += 1.0;
        }
        let mut exp: Vec<f64> = (0..bins - 1).map(|k| n as f64 * pois.pmf(k as u64)).collect();
        exp.push(n as f64 - exp.iter().sum::<f64>());
        assert!(chi_square_counts(&obs, &exp, bins - 1).unwrap().pass);
    }

    #[test]
    fn planar_jump_algebra() {
        let mut rng = RngState::new(2, 0);
        let p = simulate_cell(&mut rng, &toy(), &[0.6, -0.8], 20.0).unwrap();
        assert!(!p.jumps.is_empty());
        for j in &p.jumps {
            let nb = norm(&j.before);
            let expected = (1.0 - 2.0 * 0.5 * j.angle.cos() + 0.25).sqrt() * nb;
            assert!((j.size() - expected).abs() < 1e-12 * nb);
            assert!((norm(&j.after) - 0.5 * nb).abs() < 1e-12 * nb);
        }
    }

    #[test]
    fn dust_stops_the_cell() {
        let mut rng = RngState::new(3, 0);
        let p = simulate_cell_to_dust(&mut rng, &toy(), &[1.0, 0.0], f64::INFINITY, 1e-3).unwrap();
        assert!(p.reached_dust);
        assert!(p.end_norm() <= 1e-3 * (1.0 + 1e-12));
        assert!(simulate_cell(&mut rng, &toy(), &[0.0, 0.0], 1.0).is_err());
        assert!(simulate_cell(&mut rng, &toy(), &[1.0, 0.0], f64::INFINITY).is_err());
    }

    fn tree(seed: u64, max_gen: usize, floor: f64) -> CellTree {
        let mut rng = RngState::new(seed, 0);
        build_cell_system(&mut rng, &toy(), &[1.0, 0.0], &TreeConfig::new(max_gen, floor, f64::INFINITY)).unwrap()
    }

    #[test]
    fn conservation_and_ranking() {
        let t = tree(4, 3, 1e-2);
        for c in t.cells.iter().filter(|c| c.path.is_some()) {
            let p = c.path.as_ref().unwrap();
            let mut from_jumps: Vec<Vec<f64>> = p.jumps.iter().map(|j| j.child()).collect();
            from_jumps.sort_by(|a, b| norm(b).total_cmp(&norm(a)));
            let kids: Vec<&Vec<f64>> = c.children.iter().map(|&k| &t.cells[k].initial_size).collect();
            assert_eq!(kids.len(), from_jumps.len());
            for (a, b) in kids.iter().zip(&from_jumps) {
                assert_eq!(*a, b);
            }
            for j in &p.jumps {
                let sum: Vec<f64> = j.after.iter().zip(j.child()).map(|(a, c)| a + c).collect();
                for (s, b) in sum.iter().zip(&j.before) {
                    assert!((s - b).abs() <= 1e-15 * b.abs().max(1.0));
                }
            }
            for w in c.children.windows(2) {
                assert!(t.cells[w[0]].initial_norm() >= t.cells[w[1]].initial_norm());
            }
            for (k, &ch) in c.children.iter().enumerate() {
                let mut l = c.label.clone();
                l.push(k as u32 + 1);
                assert_eq!(t.cells[ch].label, l);
                assert_eq!(t.find(&l).unwrap().label, l);
            }
        }
    }

    #[test]
    fn generation_zero_tree() {
        let t = tree(5, 0, 1e-3);
        let root = t.root();
        assert!(root.label.is_empty() && root.birth_time == 0.0);
        assert_eq!(t.len(), 1 + root.path.as_ref().unwrap().jumps.len());
        assert!(t.cells[1..].iter().all(|c| c.status == CellStatus::DepthLimit && c.generation == 1));
        let m = genealogical_martingale(&t, 0, 0.0).unwrap();
        assert_eq!(m.cells, t.len() - 1);
        assert_eq!(m.value, m.cells as f64);
        assert!(matches!(
            genealogical_martingale(&t, 1, 2.0),
            Err(Error::InsufficientDepth { needed: 2, expanded: 1 })
        ));
    }

    #[test]
    fn node_budget_is_explicit() {
        let mut rng = RngState::new(6, 0);
        let mut cfg = TreeConfig::new(10, 1e-6, f64::INFINITY);
        cfg.node_budget = 50;
        assert!(matches!(
            build_cell_system(&mut rng, &toy(), &[1.0, 0.0], &cfg),
            Err(Error::NodeBudget { budget: 50 })
        ));
    }

    #[test]
    fn first_generation_matches_cell_jumps() {
        // Children above half the parent size in generation 1, counted from
        // built trees and from independent single-cell simulations.
        let n = 4000;
        let from_trees: Vec<f64> = replicate(8, 0, n, |_, r| {
            let t = build_cell_system(r, &toy(), &[1.0, 0.0], &TreeConfig::new(0, 1e-3, f64::INFINITY)).unwrap();
            t.generation(1).filter(|c| c.initial_norm() > 0.5).count() as f64
        });
        let direct: Vec<f64> = replicate(9, 0, n, |_, r| {
            let p = simulate_cell_to_dust(r, &toy(), &[1.0, 0.0], f64::INFINITY, 1e-4).unwrap();
            p.jumps.iter().filter(|j| j.size() > 0.5).count() as f64
        });
        let a = mean_ci(&from_trees).unwrap();
        let b = mean_ci(&direct).unwrap();
        assert!(a.agrees_with(&b, 3.0), "{a:?} {b:?}");
    }

    #[test]
    fn martingale_at_generation_zero() {
        let vals: Vec<f64> = replicate(10, 0, 4000, |_, r| {
            let t = build_cell_system(r, &toy(), &[1.0, 0.0], &TreeConfig::new(0, 1e-3, f64::INFINITY)).unwrap();
            genealogical_martingale(&t, 0, 2.0).unwrap().value
        });
        assert!(mean_ci(&vals).unwrap().within_sigmas(1.0, 3.0));
    }

    #[test]
    fn snapshot_basics() {
        let mut rng = RngState::new(11, 0);
        let t = build_cell_system(&mut rng, &toy(), &[1.0, 0.0], &TreeConfig::new(6, 1e-4, 3.0)).unwrap();
        let s0 = snapshot(&t, &toy(), 0.0).unwrap();
        assert_eq!(s0.cells, vec![(vec![1.0, 0.0], 0)]);
        let s = snapshot(&t, &toy(), 2.5).unwrap();
        for w in s.cells.windows(2) {
            assert!(norm(&w[0].0) >= norm(&w[1].0));
        }
        assert!(matches!(snapshot(&t, &toy(), 3.5), Err(Error::BeyondHorizon { .. })));
        assert!(snapshot(&t, &toy(), 3.0).is_ok());
    }

    #[test]
    fn ndjson_export() {
        let t = tree(12, 1, 1e-2);
        let mut buf = Vec::new();
        write_tree_ndjson(&mut buf, &t).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), t.len());
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        assert_eq!(first["label"], serde_json::json!([]));
        assert_eq!(first["generation"], 0);
        assert_eq!(first["truncated"], false);
        let second: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
        assert_eq!(second["label"], serde_json::json!([1]));
    }

    #[test]
    fn spine_preconditions() {
        let mut rng = RngState::new(13, 0);
        assert!(sample_spine(&mut rng, &toy(), &[1.0, 0.0], 2.0, 1.0).is_ok());
        assert!(matches!(
            sample_spine(&mut rng, &toy(), &[1.0, 0.0], 2.5, 1.0),
            Err(Error::NotARoot { .. })
        ));
        let dead = ToyDrivingSpec::new(2, 0.0, 0.5, 0.25).unwrap();
        assert!(sample_spine(&mut rng, &dead, &[1.0, 0.0], 2.0, 1.0).is_err());
        let s = SpineSampler::new(&toy(), 2.0).unwrap();
        assert!((s.generation_rate() - 1.25).abs() < 1e-10);
        assert!((s.within_rate() - 0.25).abs() < 1e-15);
    }

    #[test]
    fn spine_generation_times_are_exponential() {
        let s = SpineSampler::new(&toy(), 2.0).unwrap();
        let gaps: Vec<f64> = replicate(14, 0, 5000, |_, r| {
            let p = s.sample(r, &[1.0, 0.0], 20.0).unwrap();
            let g = p.generation_times();
            let mut prev = 0.0;
            g.into_iter()
                .map(|t| {
                    let d = t - prev;
                    prev = t;
                    d
                })
                .take(1)
                .collect::<Vec<_>>()
        })
        .into_iter()
        .flatten()
        .collect();
        let gaps = sorted_samples(gaps).unwrap();
        assert!(ks_test(&gaps, |x| 1.0 - (-1.25 * x).exp()).unwrap().pass);
    }

    #[test]
    fn selection_matches_spine_first_generation() {
        // Sampling-importance-resampling over single-generation selections
        // against the direct sampler's first generation change.
        let sampler = SpineSampler::new(&toy(), 2.0).unwrap();
        let direct: Vec<(f64, f64)> = replicate(15, 0, 20_000, |_, r| loop {
            let p = sampler.sample(r, &[1.0, 0.0], 50.0).unwrap();
            if let Some(e) = p.events.iter().find(|e| e.kind == SpineEventKind::Generation) {
                break (e.xi, e.time);
            }
        });
        let pool: Vec<(f64, f64, f64)> = replicate(16, 0, 100_000, |_, r| {
            let l = spine_by_selection(r, &toy(), &[1.0, 0.0], 2.0, 0).unwrap();
            (norm(&l.cells[1].initial_size).ln(), l.cells[1].birth_time, l.weight)
        });
        let total: f64 = pool.iter().map(|p| p.2).sum();
        let mut rng = RngState::new(17, 0);
        let mut cdf = Vec::with_capacity(pool.len());
        let mut acc = 0.0;
        for p in &pool {
            acc += p.2 / total;
            cdf.push(acc);
        }
        let resampled: Vec<(f64, f64)> = (0..20_000)
            .map(|_| {
                let u = rng.uniform();
                let k = cdf.partition_point(|c| *c < u).min(pool.len() - 1);
                (pool[k].0, pool[k].1)
            })
            .collect();
        let a = sorted_samples(direct.iter().map(|d| d.0).collect()).unwrap();
        let b = sorted_samples(resampled.iter().map(|d| d.0).collect()).unwrap();
        assert!(ks_two_sample(&a, &b).unwrap().pass);
        let w = mean_ci(&pool.iter().map(|p| p.2).collect::<Vec<_>>()).unwrap();
        assert!(w.within_sigmas(1.0, 3.0), "{w:?}");
    }

    #[test]
    fn selection_edge_cases() {
        let mut rng = RngState::new(18, 0);
        let l = spine_by_selection(&mut rng, &toy(), &[1.0, 0.0], 2.0, 0).unwrap();
        assert_eq!(l.cells.len(), 2);
        assert_eq!(l.cells[1].generation, 1);
        let picks: Vec<f64> = replicate(19, 0, 2000, |_, r| {
            let l = select_lineage(r, &toy(), &[1.0, 0.0], 1000.0, 0, 1e-7).unwrap();
            l.picked_largest[0] as u8 as f64
        });
        let m = mean_ci(&picks).unwrap();
        assert!(m.estimate >= 1.0 - 3.0 * m.std_error.max(1e-3), "{m:?}");
        assert!(spine_by_selection(&mut rng, &toy(), &[1.0, 0.0], 3.0, 0).is_err());
    }

    #[test]
    fn lamperti_clock_cases() {
        let times: Vec<f64> = (0..=100).map(|i| i as f64 * 0.05).collect();
        let zero = vec![0.0; times.len()];
        let c = lamperti_clock(&times, &zero, 1.5).unwrap();
        let id = lamperti_clock(&times, &times.iter().map(|t| t.sin()).collect::<Vec<_>>(), 0.0).unwrap();
        let k = lamperti_clock(&times, &vec![0.7; times.len()], 1.5).unwrap();
        for t in [0.0, 0.3, 1.7, 4.9] {
            assert!((c.phi(t).unwrap() - t).abs() < 1e-12);
            assert!((id.phi(t).unwrap() - t).abs() < 1e-12);
            assert!((k.phi(t).unwrap() - t * (-1.5f64 * 0.7).exp()).abs() < 1e-12);
        }
        assert!(c.phi(6.0).is_none());
        assert!(lamperti_clock(&[0.0, 0.0], &[0.0, 0.0], 1.0).is_err());
    }
}
