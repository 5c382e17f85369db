//! The verification runs behind each subcommand.

use std::fs::File;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use gfx_core::crossing::PathView;
use gfx_core::cumulant::{find_roots, write_kappa_csv, LevySystemSpec, Psi};
use gfx_core::excursion::{
    bismut_sample, gamma_x_ensemble, many_to_one_sum, martingale_estimate, slice, write_subexcursions_csv,
    PairFunctional,
};
use gfx_core::gfengine::{
    build_cell_system, genealogical_martingale, snapshot, write_tree_ndjson, SpineEventKind, SpineSampler,
    ToyDrivingSpec, TreeConfig,
};
use gfx_core::halfspace::{many_to_one_rhs, spine_size_brownian, spine_size_stable, spine_stable_cf, write_spine_csv};
use gfx_core::randkit::{replicate, RngState};
use gfx_core::stats::{
    cf_distance, chi_square_uniform, correlation, ks_test, ks_two_sample, mean_ci, sorted_samples, EstimateReport,
};
use serde::Serialize;

use crate::report::{Check, Report};
use crate::CliError;

/// Rows written to CSV exports.
const CSV_REPLICATES: usize = 100;

pub struct Context {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub csv: bool,
}

impl Context {
    fn rng(&self, stream: u64) -> RngState {
        RngState::new(self.seed, stream)
    }

    fn create(&self, name: &str) -> Result<(BufWriter<File>, PathBuf), CliError> {
        std::fs::create_dir_all(&self.out_dir).map_err(|e| CliError::Io(e.to_string()))?;
        let path = self.out_dir.join(name);
        let f = File::create(&path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        Ok((BufWriter::new(f), path))
    }
}

pub fn core(e: gfx_core::Error) -> CliError {
    match e {
        gfx_core::Error::InvalidParameter { .. } => CliError::Config(e.to_string()),
        other => CliError::Run(other.to_string()),
    }
}

fn config_err(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

fn require(cond: bool, msg: &str) -> Result<(), CliError> {
    if cond {
        Ok(())
    } else {
        Err(config_err(msg))
    }
}

fn norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn check_endpoint(d: usize, x: &[f64]) -> Result<(), CliError> {
    require(d >= 3, "--d must be at least 3")?;
    require(x.len() == d - 1, "--x must have d - 1 coordinates")?;
    require(norm(x) > 0.0 && x.iter().all(|v| v.is_finite()), "--x must be a finite nonzero vector")
}

#[derive(Clone, Debug, Serialize)]
pub struct MartingaleConfig {
    pub d: usize,
    pub x: Vec<f64>,
    pub a: Vec<f64>,
    pub omega: f64,
    pub n: usize,
    pub steps: usize,
    pub eps_floor: f64,
}

impl MartingaleConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        check_endpoint(self.d, &self.x)?;
        require(!self.a.is_empty() && self.a.iter().all(|a| *a > 0.0), "--a needs positive levels")?;
        require(self.n >= 1000, "--n must be at least 1000")?;
        require(self.steps >= 2, "--steps must be at least 2")?;
        require(self.eps_floor > 0.0, "--eps-floor must be positive")
    }
}

pub fn verify_martingale(ctx: &Context, cfg: &MartingaleConfig) -> Result<Report, CliError> {
    cfg.validate()?;
    let target = norm(&cfg.x).powf(cfg.omega);
    let mut checks = Vec::new();
    let mut estimates = Vec::new();
    for (i, &a) in cfg.a.iter().enumerate() {
        let mut rng = ctx.rng(i as u64);
        let est = martingale_estimate(&mut rng, &cfg.x, cfg.d, a, cfg.omega, cfg.eps_floor, cfg.steps, cfg.n)
            .map_err(core)?;
        let pass = (est.estimate - target).abs() <= (3.0 * est.std_error).max(0.05 * target);
        checks.push(Check::estimate(format!("E[M_a] at a = {a}"), pass, target, est.clone()));
        estimates.push((a, est));
    }
    for w in estimates.windows(2) {
        checks.push(Check::versus(
            format!("levels {} and {} agree", w[0].0, w[1].0),
            w[0].1.clone(),
            w[1].1.clone(),
        ));
    }
    let mut report = Report::new(
        "verify-martingale",
        cfg,
        ctx.seed,
        "γ_x[M_a] = |x|^ω: the ω-mass of sub-excursion sizes above level a has constant mean",
        checks,
    );
    if ctx.csv {
        let mut rng = ctx.rng(1000);
        let a = cfg.a.clone();
        let (rows, _) = gamma_x_ensemble(&mut rng, &cfg.x, cfg.d, cfg.steps, CSV_REPLICATES, |e| {
            a.iter().flat_map(|&lv| slice(e, lv)).collect::<Vec<_>>()
        })
        .map_err(core)?;
        let flat: Vec<_> = rows
            .into_iter()
            .enumerate()
            .flat_map(|(i, v)| v.into_iter().map(move |s| (i, s)))
            .collect();
        let (w, path) = ctx.create("subexcursions.csv")?;
        write_subexcursions_csv(w, &flat).map_err(core)?;
        report.files.push(path);
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct SpineConfig {
    pub d: usize,
    pub a: f64,
    pub n: usize,
}

pub fn verify_spine(ctx: &Context, cfg: &SpineConfig) -> Result<Report, CliError> {
    require(cfg.d >= 3, "--d must be at least 3")?;
    require(cfg.a > 0.0, "--a must be positive")?;
    require(cfg.n >= 1000, "--n must be at least 1000")?;
    let (d, a) = (cfg.d, cfg.a);
    let one: Vec<Vec<f64>> = replicate(ctx.seed, 0, cfg.n, |_, r| spine_size_brownian(r, d, a).expect("validated"));
    let two: Vec<Vec<f64>> =
        replicate(ctx.seed, cfg.n as u64, cfg.n, |_, r| spine_size_brownian(r, d, 2.0 * a).expect("validated"));
    let mut checks = Vec::new();
    for c in 0..d - 1 {
        let s = sorted_samples(one.iter().map(|v| v[c]).collect()).map_err(core)?;
        let t = ks_test(&s, |x| 0.5 + (x / a).atan() / std::f64::consts::PI).map_err(core)?;
        checks.push(Check::test(format!("component {c} is Cauchy(0, {a})"), t));
    }
    let s1 = sorted_samples(one.iter().map(|v| norm(v) / a).collect()).map_err(core)?;
    let s2 = sorted_samples(two.iter().map(|v| norm(v) / (2.0 * a)).collect()).map_err(core)?;
    checks.push(Check::test(
        format!("|X|/a has the same law at a = {a} and {}", 2.0 * a),
        ks_two_sample(&s1, &s2).map_err(core)?,
    ));
    let mut report = Report::new(
        "verify-spine",
        cfg,
        ctx.seed,
        "the spine size at level a is isotropic Cauchy with scale a in R^{d-1}",
        checks,
    );
    if ctx.csv {
        let (w, path) = ctx.create("spine.csv")?;
        write_spine_csv(w, a, &one[..CSV_REPLICATES.min(one.len())]).map_err(core)?;
        report.files.push(path);
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct SpineStableConfig {
    pub alpha: f64,
    pub d: usize,
    pub a: f64,
    pub n: usize,
    pub u: Vec<f64>,
}

pub fn verify_spine_stable(ctx: &Context, cfg: &SpineStableConfig) -> Result<Report, CliError> {
    require(cfg.alpha > 0.0 && cfg.alpha < 2.0, "--alpha must lie in (0, 2)")?;
    require(cfg.d >= 2, "--d must be at least 2")?;
    require(cfg.a > 0.0, "--a must be positive")?;
    require(cfg.n >= 10_000, "--n must be at least 10000")?;
    require(!cfg.u.is_empty(), "--u needs at least one frequency")?;
    let (alpha, d, a) = (cfg.alpha, cfg.d, cfg.a);
    let samples: Vec<Vec<f64>> =
        replicate(ctx.seed, 0, cfg.n, |_, r| spine_size_stable(r, d, alpha, a).expect("validated"));
    let grid: Vec<Vec<f64>> = cfg
        .u
        .iter()
        .map(|&u| {
            let mut v = vec![0.0; d - 1];
            v[0] = u;
            v
        })
        .collect();
    let t = cf_distance(&samples, |u| spine_stable_cf(alpha, a, norm(u)), &grid).map_err(core)?;
    let mut report = Report::new(
        "verify-spine-stable",
        cfg,
        ctx.seed,
        "the stable spine size at level a has characteristic function exp(-√2 a |u|^{α/2})",
        vec![Check::test("characteristic function within 3 SE on the grid", t)],
    );
    if ctx.csv {
        let (w, path) = ctx.create("spine_stable.csv")?;
        write_spine_csv(w, a, &samples[..CSV_REPLICATES.min(samples.len())]).map_err(core)?;
        report.files.push(path);
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct BismutConfig {
    pub d: usize,
    pub amax: f64,
    pub n: usize,
    pub steps: usize,
    pub bins: usize,
}

pub fn verify_bismut(ctx: &Context, cfg: &BismutConfig) -> Result<Report, CliError> {
    require(cfg.d >= 2, "--d must be at least 2")?;
    require(cfg.amax > 0.0, "--amax must be positive")?;
    require(cfg.n >= 1000, "--n must be at least 1000")?;
    require(cfg.steps >= 2, "--steps must be at least 2")?;
    require(cfg.bins >= 2 && cfg.n >= 5 * cfg.bins, "--bins must be at least 2 with 5 samples per bin")?;
    let (d, amax, steps) = (cfg.d, cfg.amax, cfg.steps);
    let rows: Vec<(f64, f64, f64)> = replicate(ctx.seed, 0, cfg.n, |_, r| {
        let s = bismut_sample(r, d, amax, steps).expect("validated");
        let a2 = s.height * s.height;
        (s.height, (s.left_kill_time() / a2).ln(), (s.right_kill_time() / a2).ln())
    });
    let heights: Vec<f64> = rows.iter().map(|r| r.0 / amax).collect();
    let chi = chi_square_uniform(&heights, cfg.bins).map_err(core)?;
    let left: Vec<f64> = rows.iter().map(|r| r.1).collect();
    let right: Vec<f64> = rows.iter().map(|r| r.2).collect();
    let corr = correlation(&left, &right).map_err(core)?;
    let report = Report::new(
        "verify-bismut",
        cfg,
        ctx.seed,
        "under the duration-weighted excursion measure the height is uniform and the two killed halves are independent",
        vec![
            Check::test(format!("height uniform on [0, {amax}]"), chi),
            Check::estimate("correlation of scaled kill times", corr.within_sigmas(0.0, 3.0), 0.0, corr),
        ],
    );
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct ManyToOneConfig {
    pub d: usize,
    pub x: Vec<f64>,
    pub a: f64,
    pub n: usize,
    pub steps: usize,
    pub rhs_steps: usize,
}

pub fn verify_many_to_one(ctx: &Context, cfg: &ManyToOneConfig) -> Result<Report, CliError> {
    check_endpoint(cfg.d, &cfg.x)?;
    require(cfg.a > 0.0, "--a must be positive")?;
    require(cfg.n >= 1000, "--n must be at least 1000")?;
    require(cfg.steps >= 2 && cfg.rhs_steps >= 2, "--steps and --rhs-steps must be at least 2")?;
    let a = cfg.a;
    let one: &PairFunctional = &|_: &PathView, _: &PathView| 1.0;
    let decay: &PairFunctional = &|u1: &PathView, _: &PathView| (-u1.duration()).exp();
    let mut rng = ctx.rng(0);
    let (rows, prov) = gamma_x_ensemble(&mut rng, &cfg.x, cfg.d, cfg.steps, cfg.n, |e| {
        (many_to_one_sum(e, a, one), many_to_one_sum(e, a, decay))
    })
    .map_err(core)?;
    let lhs = |k: usize| -> Result<EstimateReport, CliError> {
        let v: Vec<f64> = rows.iter().map(|r| if k == 0 { r.0 } else { r.1 }).collect();
        Ok(mean_ci(&v).map_err(core)?.with_provenance(prov.clone()))
    };
    let rhs1 = many_to_one_rhs(&mut rng, &cfg.x, cfg.d, a, one, cfg.n, cfg.rhs_steps).map_err(core)?;
    let rhs2 = many_to_one_rhs(&mut rng, &cfg.x, cfg.d, a, decay, cfg.n, cfg.rhs_steps).map_err(core)?;
    Ok(Report::new(
        "verify-many-to-one",
        cfg,
        ctx.seed,
        "summing |Δ|^d F over sub-excursions above a equals |x|^d E[F] for two independent Bessel-Brownian paths stopped at their last passage at a",
        vec![
            Check::versus("F = 1", lhs(0)?, rhs1),
            Check::versus("F = exp(-duration of first piece)", lhs(1)?, rhs2),
        ],
    ))
}

#[derive(Clone, Debug, Serialize)]
pub struct ToyConfig {
    pub lambda: f64,
    pub beta: f64,
    pub drift: f64,
    pub omega: f64,
}

impl ToyConfig {
    fn spec(&self) -> Result<ToyDrivingSpec, CliError> {
        ToyDrivingSpec::new(2, self.lambda, self.beta, self.drift).map_err(core)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GfConfig {
    #[serde(flatten)]
    pub toy: ToyConfig,
    pub n: usize,
    pub size_floor: f64,
    pub max_gen: usize,
    pub temporal_n: usize,
    pub temporal_t: f64,
}

pub fn verify_gf(ctx: &Context, cfg: &GfConfig) -> Result<Report, CliError> {
    let toy = cfg.toy.spec()?;
    require(cfg.n >= 100 && cfg.temporal_n >= 100, "--n and --temporal-n must be at least 100")?;
    require(cfg.size_floor > 0.0 && cfg.size_floor < 1.0, "--size-floor must lie in (0, 1)")?;
    require(cfg.temporal_t > 0.0 && cfg.temporal_t.is_finite(), "--temporal-t must be positive")?;
    let sampler = SpineSampler::new(&toy, cfg.toy.omega).map_err(core)?;
    let omega = cfg.toy.omega;
    let x0 = [1.0, 0.0];
    let tree_cfg = TreeConfig::new(cfg.max_gen, cfg.size_floor, f64::INFINITY);
    let gens = cfg.max_gen.min(3) + 1;
    let rows: Result<Vec<Vec<(f64, f64)>>, gfx_core::Error> = replicate(ctx.seed, 0, cfg.n, |_, r| {
        let t = build_cell_system(r, &toy, &x0, &tree_cfg)?;
        (0..gens)
            .map(|n| genealogical_martingale(&t, n, omega).map(|g| (g.value, g.remainder)))
            .collect()
    })
    .into_iter()
    .collect();
    let rows = rows.map_err(core)?;
    let mut checks = Vec::new();
    for n in 0..gens {
        let m = mean_ci(&rows.iter().map(|r| r[n].0).collect::<Vec<_>>()).map_err(core)?;
        let trunc = rows.iter().map(|r| r[n].1).sum::<f64>() / rows.len() as f64;
        let pass = m.within_sigmas(1.0, 3.0) && trunc < 0.01;
        checks.push(Check::estimate(format!("E[ℳ({n})]"), pass, 1.0, m).with_value("truncated_mass", trunc));
    }
    let t = cfg.temporal_t;
    let temporal_cfg = TreeConfig::new(12, 1e-6, t);
    let lhs: Result<Vec<(f64, f64)>, gfx_core::Error> = replicate(ctx.seed, 1 << 32, cfg.temporal_n, |_, r| {
        let tree = build_cell_system(r, &toy, &x0, &temporal_cfg)?;
        let s = snapshot(&tree, &toy, t)?;
        Ok((s.mass(omega), s.mass(omega + 1.0)))
    })
    .into_iter()
    .collect();
    let lhs = lhs.map_err(core)?;
    let spine: Vec<f64> = replicate(ctx.seed, 2 << 32, cfg.temporal_n, |_, r| {
        sampler.sample(r, &x0, t).expect("validated").xi_end().exp()
    });
    let l1 = mean_ci(&lhs.iter().map(|r| r.0).collect::<Vec<_>>()).map_err(core)?;
    let l2 = mean_ci(&lhs.iter().map(|r| r.1).collect::<Vec<_>>()).map_err(core)?;
    checks.push(Check::versus(format!("temporal f = 1 at t = {t}"), l1, EstimateReport::exact(1.0)));
    checks.push(Check::versus(
        format!("temporal f = |x| at t = {t}"),
        l2,
        mean_ci(&spine).map_err(core)?,
    ));
    let mut report = Report::new(
        "verify-gf",
        cfg,
        ctx.seed,
        "Σ_{|u|=n+1} |x_u|^ω has constant mean in n, and E Σ_i |X_i(t)|^ω f(X_i(t)) = |x|^ω E[f(spine at t)]",
        checks,
    );
    if ctx.csv {
        let mut rng = ctx.rng(3);
        let tree = build_cell_system(&mut rng, &toy, &x0, &tree_cfg).map_err(core)?;
        let (w, path) = ctx.create("tree.ndjson")?;
        write_tree_ndjson(w, &tree).map_err(core)?;
        report.files.push(path);
    }
    Ok(report)
}

#[derive(Clone, Debug, Serialize)]
pub struct SpineGfConfig {
    #[serde(flatten)]
    pub toy: ToyConfig,
    pub n_events: usize,
    pub n_paths: usize,
    pub t: f64,
    pub q: Vec<f64>,
}

pub fn verify_spine_gf(ctx: &Context, cfg: &SpineGfConfig) -> Result<Report, CliError> {
    let toy = cfg.toy.spec()?;
    require(cfg.n_events >= 1000, "--n-events must be at least 1000")?;
    require(cfg.n_paths >= 1000, "--n-paths must be at least 1000")?;
    require(cfg.t > 0.0 && cfg.t.is_finite(), "--t must be positive")?;
    require(!cfg.q.is_empty() && cfg.q.iter().all(|q| *q > 0.0), "--q needs positive exponents")?;
    let sampler = SpineSampler::new(&toy, cfg.toy.omega).map_err(core)?;
    let rate = sampler.generation_rate();
    let x0 = [1.0, 0.0];
    // Horizon long enough that a missing generation change has negligible
    // probability.
    let horizon = 40.0 / rate;
    let gaps: Vec<f64> = replicate(ctx.seed, 0, cfg.n_events, |_, r| {
        let p = sampler.sample(r, &x0, horizon).expect("validated");
        p.events
            .iter()
            .find(|e| e.kind == SpineEventKind::Generation)
            .map_or(horizon, |e| e.time)
    });
    let gaps = sorted_samples(gaps).map_err(core)?;
    let mut checks = vec![Check::test(
        format!("generation changes at rate {rate:.6}"),
        ks_test(&gaps, |x| 1.0 - (-rate * x).exp()).map_err(core)?,
    )];
    let t = cfg.t;
    let ends: Vec<f64> = replicate(ctx.seed, 1 << 32, cfg.n_paths, |_, r| {
        sampler.sample(r, &x0, t).expect("validated").xi_end()
    });
    let levy = toy.levy();
    for &q in &cfg.q {
        let m = mean_ci(&ends.iter().map(|x| (q * x).exp()).collect::<Vec<_>>()).map_err(core)?;
        let empirical = m.estimate.ln() / t;
        let target = gfx_core::cumulant::kappa(&levy, &Psi::Closed, cfg.toy.omega + q).map_err(core)?;
        let rel = (empirical - target).abs() / target.abs().max(f64::MIN_POSITIVE);
        let scaled = EstimateReport::new(empirical, m.std_error / (m.estimate * t), m.n);
        checks.push(
            Check::estimate(format!("(1/t) log E[exp({q} ξ(t))]"), rel <= 0.02, target, scaled)
                .with_value("relative_error", rel),
        );
    }
    Ok(Report::new(
        "verify-spine-gf",
        cfg,
        ctx.seed,
        "the spine log-size is a Lévy process with Laplace exponent κ(ω + q)",
        checks,
    ))
}

#[derive(Clone, Debug, Serialize)]
pub struct KappaConfig {
    pub spec: String,
    pub bracket: (f64, f64),
    pub points: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub psi_table: Option<Vec<(f64, f64)>>,
}

pub fn parse_psi_table(path: &Path) -> Result<Vec<(f64, f64)>, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for line in text.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#')) {
        let mut it = line.split(',').map(|s| s.trim().parse::<f64>());
        match (it.next(), it.next(), it.next()) {
            (Some(Ok(q)), Some(Ok(v)), None) => out.push((q, v)),
            _ if out.is_empty() => continue, // header
            _ => return Err(config_err(format!("bad psi table line `{line}`"))),
        }
    }
    require(out.len() >= 2, "psi table needs at least two rows")?;
    require(out.windows(2).all(|w| w[1].0 > w[0].0), "psi table must be sorted by q")?;
    Ok(out)
}

pub fn kappa(ctx: &Context, spec: &LevySystemSpec, cfg: &KappaConfig) -> Result<Report, CliError> {
    require(cfg.bracket.0 < cfg.bracket.1, "--bracket needs lo < hi")?;
    let psi = match (&cfg.psi_table, spec) {
        (Some(t), _) => Psi::Table(t.clone()),
        (None, LevySystemSpec::ToyCP { .. }) => Psi::Closed,
        (None, LevySystemSpec::IsotropicStable { .. }) => {
            return Err(config_err("the stable variant needs --psi-table"));
        }
    };
    let result = find_roots(spec, &psi, cfg.bracket).map_err(core)?;
    let mut checks = vec![Check::new("kappa convex on the bracket", result.min_second_difference >= 0.0)
        .with_value("min_second_difference", result.min_second_difference)];
    for (i, &w) in result.roots.iter().enumerate() {
        let residual = gfx_core::cumulant::kappa(spec, &psi, w).map_err(core)?;
        checks.push(
            Check::new(format!("root {i}"), residual.abs() <= 1e-9)
                .with_value("omega", w)
                .with_value("residual", residual),
        );
    }
    let mut report = Report::new(
        "kappa",
        cfg,
        ctx.seed,
        "κ(q) = ψ(q) + ∫ e^{qy} L̃(dy) is convex with at most two roots",
        checks,
    );
    if ctx.csv {
        let table = gfx_core::cumulant::kappa_table(spec, &psi, cfg.bracket.0, cfg.bracket.1, cfg.points)
            .map_err(core)?;
        let (w, path) = ctx.create("kappa.csv")?;
        write_kappa_csv(w, &table).map_err(core)?;
        report.files.push(path);
    }
    Ok(report)
}
