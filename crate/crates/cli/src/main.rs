//! `gfx-lab`: Monte Carlo verification of growth-fragmentation identities.

mod checks;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use gfx_core::cumulant::parse_spec;
use gfx_core::cumulant::LevySystemSpec;

use checks::Context;
use report::Report;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("run failed: {0}")]
    Run(String),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 3,
            CliError::Run(_) => 4,
        }
    }
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Parser, Debug)]
#[command(name = "gfx-lab", version, about = "Monte Carlo checks for self-similar growth-fragmentations")]
struct Cli {
    /// Master seed; every replicate runs on its own stream derived from it.
    #[arg(long, global = true, default_value_t = 20240917)]
    seed: u64,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Output directory; falls back to GFX_LAB_OUT_DIR, then ./gfx-lab-out.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// `csv` also writes the sampled data next to the JSON report.
    #[arg(long, global = true, value_enum, default_value_t = Format::Json)]
    format: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Constant mean of the ω-mass of sub-excursions above a level.
    VerifyMartingale(MartingaleArgs),
    /// Cauchy law of the Brownian spine size.
    VerifySpine(SpineArgs),
    /// Characteristic function of the stable spine size.
    VerifySpineStable(SpineStableArgs),
    /// Uniform height and independent halves under the Bismut description.
    VerifyBismut(BismutArgs),
    /// Many-to-one formula for sub-excursion pairs.
    VerifyManyToOne(ManyToOneArgs),
    /// Genealogical and temporal martingales of the toy cell system.
    VerifyGf(GfArgs),
    /// Spine of the toy cell system.
    VerifySpineGf(SpineGfArgs),
    /// Cumulant table and roots for a Lévy system.
    Kappa(KappaArgs),
    /// Every verification at its default settings.
    VerifyAll,
}

#[derive(Args, Debug)]
struct MartingaleArgs {
    #[arg(long, default_value_t = 3)]
    d: usize,
    /// Endpoint of the excursion, d - 1 coordinates.
    #[arg(long, num_args = 1.., value_delimiter = ',', default_values_t = [1.0, 0.0])]
    x: Vec<f64>,
    #[arg(long, num_args = 1.., value_delimiter = ',', default_values_t = [0.3, 0.6])]
    a: Vec<f64>,
    /// Defaults to d.
    #[arg(long)]
    omega: Option<f64>,
    #[arg(long, default_value_t = 20_000)]
    n: usize,
    #[arg(long, default_value_t = 16_384)]
    steps: usize,
    #[arg(long, default_value_t = 1e-4)]
    eps_floor: f64,
}

#[derive(Args, Debug)]
struct SpineArgs {
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long, default_value_t = 1.0)]
    a: f64,
    #[arg(long, default_value_t = 100_000)]
    n: usize,
}

#[derive(Args, Debug)]
struct SpineStableArgs {
    #[arg(long, default_value_t = 1.5)]
    alpha: f64,
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long, default_value_t = 1.0)]
    a: f64,
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    #[arg(long, num_args = 1.., value_delimiter = ',', default_values_t = [0.5, 1.0, 2.0])]
    u: Vec<f64>,
}

#[derive(Args, Debug)]
struct BismutArgs {
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long, default_value_t = 1.0)]
    amax: f64,
    #[arg(long, default_value_t = 100_000)]
    n: usize,
    #[arg(long, default_value_t = 8)]
    steps: usize,
    #[arg(long, default_value_t = 50)]
    bins: usize,
}

#[derive(Args, Debug)]
struct ManyToOneArgs {
    #[arg(long, default_value_t = 3)]
    d: usize,
    #[arg(long, num_args = 1.., value_delimiter = ',', default_values_t = [1.0, 0.0])]
    x: Vec<f64>,
    #[arg(long, default_value_t = 0.3)]
    a: f64,
    #[arg(long, default_value_t = 20_000)]
    n: usize,
    #[arg(long, default_value_t = 16_384)]
    steps: usize,
    #[arg(long, default_value_t = 256)]
    rhs_steps: usize,
}

#[derive(Args, Debug)]
struct ToyArgs {
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 0.25)]
    drift: f64,
    #[arg(long, default_value_t = 2.0)]
    omega: f64,
}

impl ToyArgs {
    fn config(&self) -> checks::ToyConfig {
        checks::ToyConfig {
            lambda: self.lambda,
            beta: self.beta,
            drift: self.drift,
            omega: self.omega,
        }
    }
}

#[derive(Args, Debug)]
struct GfArgs {
    #[command(flatten)]
    toy: ToyArgs,
    #[arg(long, default_value_t = 5000)]
    n: usize,
    /// Cells below this fraction of the initial size are not expanded.
    #[arg(long, default_value_t = 1e-3)]
    size_floor: f64,
    #[arg(long, default_value_t = 4)]
    max_gen: usize,
    #[arg(long, default_value_t = 20_000)]
    temporal_n: usize,
    #[arg(long, default_value_t = 1.0)]
    temporal_t: f64,
}

#[derive(Args, Debug)]
struct SpineGfArgs {
    #[command(flatten)]
    toy: ToyArgs,
    #[arg(long, default_value_t = 50_000)]
    n_events: usize,
    #[arg(long, default_value_t = 2_000_000)]
    n_paths: usize,
    #[arg(long, default_value_t = 6.0)]
    t: f64,
    #[arg(long, num_args = 1.., value_delimiter = ',', default_values_t = [0.5, 1.0])]
    q: Vec<f64>,
}

#[derive(Args, Debug)]
struct KappaArgs {
    /// Key-value spec file; overrides the inline options.
    #[arg(long)]
    spec: Option<PathBuf>,
    #[arg(long, default_value = "toy")]
    variant: String,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
    #[arg(long, default_value_t = 0.5)]
    beta: f64,
    #[arg(long, default_value_t = 0.25)]
    drift: f64,
    #[arg(long, default_value_t = 2)]
    n: usize,
    #[arg(long, default_value_t = 1.5)]
    alpha: f64,
    #[arg(long, default_value_t = 2)]
    d: usize,
    /// Log-size window of the stable jump integral.
    #[arg(long, allow_hyphen_values = true)]
    x_min: Option<f64>,
    #[arg(long, allow_hyphen_values = true)]
    x_max: Option<f64>,
    #[arg(long, num_args = 2, default_values_t = [0.5, 10.0])]
    bracket: Vec<f64>,
    /// Rows of the exported table.
    #[arg(long, default_value_t = 200)]
    points: usize,
    /// CSV of `q,psi` rows used for the stable variant.
    #[arg(long)]
    psi_table: Option<PathBuf>,
}

impl KappaArgs {
    fn spec_text(&self) -> Result<String, CliError> {
        if let Some(p) = &self.spec {
            return std::fs::read_to_string(p).map_err(|e| CliError::Io(format!("{}: {e}", p.display())));
        }
        Ok(match self.variant.as_str() {
            "toy" => format!(
                "variant = toy\nlambda = {}\nbeta = {}\ndrift = {}\nn = {}\n",
                self.lambda, self.beta, self.drift, self.n
            ),
            "stable" => {
                let mut t = format!("variant = stable\nalpha = {}\nd = {}\n", self.alpha, self.d);
                if let Some(v) = self.x_min {
                    t.push_str(&format!("x_min = {v}\n"));
                }
                if let Some(v) = self.x_max {
                    t.push_str(&format!("x_max = {v}\n"));
                }
                t
            }
            other => return Err(CliError::Config(format!("unknown variant `{other}`"))),
        })
    }
}

fn martingale(a: &MartingaleArgs) -> checks::MartingaleConfig {
    checks::MartingaleConfig {
        d: a.d,
        x: a.x.clone(),
        a: a.a.clone(),
        omega: a.omega.unwrap_or(a.d as f64),
        n: a.n,
        steps: a.steps,
        eps_floor: a.eps_floor,
    }
}

fn run_kappa(ctx: &Context, a: &KappaArgs) -> Result<Report, CliError> {
    let text = a.spec_text()?;
    let spec: LevySystemSpec = parse_spec(&text).map_err(|e| CliError::Config(e.to_string()))?;
    let psi_table = a.psi_table.as_deref().map(checks::parse_psi_table).transpose()?;
    let cfg = checks::KappaConfig {
        spec: text,
        bracket: (a.bracket[0], a.bracket[1]),
        points: a.points,
        psi_table,
    };
    let report = checks::kappa(ctx, &spec, &cfg)?;
    for c in &report.checks {
        if let Some(w) = c.values.get("omega") {
            println!("root {w:.9}");
        }
    }
    Ok(report)
}

fn defaults<T: Args>() -> T {
    use clap::Command;
    let m = T::augment_args(Command::new("defaults")).get_matches_from(["defaults"]);
    T::from_arg_matches(&m).expect("defaults parse")
}

fn run_all(ctx: &Context) -> Result<Vec<Report>, CliError> {
    let toy = |a: &ToyArgs| a.config();
    let gf: GfArgs = defaults();
    let sgf: SpineGfArgs = defaults();
    let m2o: ManyToOneArgs = defaults();
    let sp: SpineArgs = defaults();
    let sps: SpineStableArgs = defaults();
    let bis: BismutArgs = defaults();
    let kap: KappaArgs = defaults();
    Ok(vec![
        checks::verify_martingale(ctx, &martingale(&defaults()))?,
        checks::verify_spine(ctx, &checks::SpineConfig { d: sp.d, a: sp.a, n: sp.n })?,
        checks::verify_spine_stable(
            ctx,
            &checks::SpineStableConfig { alpha: sps.alpha, d: sps.d, a: sps.a, n: sps.n, u: sps.u },
        )?,
        checks::verify_bismut(
            ctx,
            &checks::BismutConfig { d: bis.d, amax: bis.amax, n: bis.n, steps: bis.steps, bins: bis.bins },
        )?,
        checks::verify_many_to_one(ctx, &many_to_one(&m2o))?,
        checks::verify_gf(ctx, &gf_config(&gf, toy(&gf.toy)))?,
        checks::verify_spine_gf(ctx, &spine_gf_config(&sgf, toy(&sgf.toy)))?,
        run_kappa(ctx, &kap)?,
    ])
}

fn many_to_one(a: &ManyToOneArgs) -> checks::ManyToOneConfig {
    checks::ManyToOneConfig { d: a.d, x: a.x.clone(), a: a.a, n: a.n, steps: a.steps, rhs_steps: a.rhs_steps }
}

fn gf_config(a: &GfArgs, toy: checks::ToyConfig) -> checks::GfConfig {
    checks::GfConfig {
        toy,
        n: a.n,
        size_floor: a.size_floor,
        max_gen: a.max_gen,
        temporal_n: a.temporal_n,
        temporal_t: a.temporal_t,
    }
}

fn spine_gf_config(a: &SpineGfArgs, toy: checks::ToyConfig) -> checks::SpineGfConfig {
    checks::SpineGfConfig { toy, n_events: a.n_events, n_paths: a.n_paths, t: a.t, q: a.q.clone() }
}

fn run(cli: &Cli) -> Result<bool, CliError> {
    if let Some(t) = cli.threads {
        if t == 0 {
            return Err(CliError::Config("--threads must be positive".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| CliError::Config(e.to_string()))?;
    }
    let ctx = Context { seed: cli.seed, out_dir: out_dir(cli), csv: cli.format == Format::Csv };
    let reports = match &cli.command {
        Command::VerifyMartingale(a) => vec![checks::verify_martingale(&ctx, &martingale(a))?],
        Command::VerifySpine(a) => vec![checks::verify_spine(&ctx, &checks::SpineConfig { d: a.d, a: a.a, n: a.n })?],
        Command::VerifySpineStable(a) => vec![checks::verify_spine_stable(
            &ctx,
            &checks::SpineStableConfig { alpha: a.alpha, d: a.d, a: a.a, n: a.n, u: a.u.clone() },
        )?],
        Command::VerifyBismut(a) => vec![checks::verify_bismut(
            &ctx,
            &checks::BismutConfig { d: a.d, amax: a.amax, n: a.n, steps: a.steps, bins: a.bins },
        )?],
        Command::VerifyManyToOne(a) => vec![checks::verify_many_to_one(&ctx, &many_to_one(a))?],
        Command::VerifyGf(a) => vec![checks::verify_gf(&ctx, &gf_config(a, a.toy.config()))?],
        Command::VerifySpineGf(a) => vec![checks::verify_spine_gf(&ctx, &spine_gf_config(a, a.toy.config()))?],
        Command::Kappa(a) => vec![run_kappa(&ctx, a)?],
        Command::VerifyAll => run_all(&ctx)?,
    };
    let mut pass = true;
    for r in &reports {
        let path = r.write(&ctx.out_dir)?;
        println!("{} -> {}", r.subcommand, path.display());
        for c in &r.checks {
            println!("  {}", c.summary());
        }
        for f in &r.files {
            println!("  wrote {}", f.display());
        }
        pass &= r.pass;
    }
    Ok(pass)
}

fn out_dir(cli: &Cli) -> PathBuf {
    cli.out
        .clone()
        .or_else(|| std::env::var_os("GFX_LAB_OUT_DIR").map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("gfx-lab-out"))
}

/// Best effort: the exit code carries the failure even if this write fails.
fn write_error(dir: &std::path::Path, e: &CliError) -> Option<PathBuf> {
    let kind = match e {
        CliError::Config(_) => "config",
        CliError::Io(_) => "io",
        CliError::Run(_) => "run",
    };
    let body = serde_json::json!({
        "schema": report::SCHEMA,
        "pass": false,
        "error": { "kind": kind, "message": e.to_string() },
        "args": std::env::args().collect::<Vec<_>>(),
    });
    std::fs::create_dir_all(dir).ok()?;
    let path = dir.join("error.json");
    std::fs::write(&path, serde_json::to_string_pretty(&body).ok()? + "\n").ok()?;
    Some(path)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("gfx-lab: {e}");
            if let Some(p) = write_error(&out_dir(&cli), &e) {
                eprintln!("gfx-lab: diagnostics in {}", p.display());
            }
            ExitCode::from(e.exit_code())
        }
    }
}
