use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use barrier_pac::certificate::NeuralCertificate;
use barrier_pac::dynamics::{integrate, sample_initial_states};
use barrier_pac::experiment::{Prepared, RunConfig, RunOutcome};
use barrier_pac::pac::epsilon_with_residual;
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

/// Neural barrier certificates from sampled trajectories, with PAC risk bounds.
#[derive(Parser, Debug)]
#[command(name = "barrier-pac", version)]
struct Cli {
    #[command(flatten)]
    global: GlobalOpts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct GlobalOpts {
    /// Run configuration (JSON, schema 1).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the run seed of the configuration.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Directory for output files.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    /// Worker threads (0 = all cores); overrides the configuration.
    #[arg(long, global = true)]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Sample trajectories, synthesize a certificate and print its guarantee.
    Synthesize,
    /// Monte-Carlo validation of a certificate on fresh trajectories.
    Validate {
        /// Certificate JSON written by `synthesize`.
        #[arg(long)]
        certificate: PathBuf,
        /// Synthesis report providing ε and d; defaults to report.json beside the certificate.
        #[arg(long)]
        report: Option<PathBuf>,
        /// Risk level to validate against (overrides the report).
        #[arg(long)]
        epsilon: Option<f64>,
        /// Number of fresh trajectories (overrides the configuration).
        #[arg(long)]
        n_fresh: Option<usize>,
    },
    /// Print ε(k, β, N) as CSV for ranges `a`, `a:b` or `a:b:step` of k and N.
    Epsilon {
        #[arg(long)]
        k: String,
        /// Comma-separated list of β values.
        #[arg(long)]
        beta: String,
        #[arg(long)]
        n: String,
    },
    /// Export B on a 2-D grid as CSV `x1,x2,B`.
    Levelset {
        #[arg(long)]
        certificate: PathBuf,
        /// `lo1:hi1,lo2:hi2` bounds of the two plotted coordinates.
        #[arg(long, allow_hyphen_values = true)]
        bounds: String,
        #[arg(long, default_value_t = 101)]
        resolution: usize,
        /// Indices of the plotted coordinates, e.g. `0,1`.
        #[arg(long, default_value = "0,1")]
        axes: String,
        /// Full state fixing the remaining coordinates; required above two dimensions.
        #[arg(long, allow_hyphen_values = true)]
        point: Option<String>,
        /// Output file (stdout when absent).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Integrate trajectories from the initial set and write them as CSV.
    Simulate {
        #[arg(long, default_value_t = 10)]
        count: usize,
    },
}

/// Errors that exit with code 2: unreadable or invalid inputs.
#[derive(Debug)]
struct InputError(anyhow::Error);

impl std::fmt::Display for InputError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:#}", self.0)
    }
}

impl std::error::Error for InputError {}

fn input<T, E: Into<anyhow::Error>>(r: std::result::Result<T, E>) -> Result<T> {
    r.map_err(|e| InputError(e.into()).into())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<InputError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

fn load_config(global: &GlobalOpts) -> Result<RunConfig> {
    let path = global
        .config
        .as_ref()
        .ok_or_else(|| InputError(anyhow!("--config is required for this command")))?;
    let mut config = input(RunConfig::load(path))?;
    if let Some(seed) = global.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn init_threads(threads: usize) {
    if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(threads).build_global() {
        log::warn!("thread pool already initialised: {e}");
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    input(fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display())))
}

fn run(cli: Cli) -> Result<ExitCode> {
    let global = &cli.global;
    match &cli.command {
        Command::Synthesize => synthesize(global),
        Command::Validate {
            certificate,
            report,
            epsilon,
            n_fresh,
        } => validate(global, certificate, report.as_deref(), *epsilon, *n_fresh),
        Command::Epsilon { k, beta, n } => {
            epsilon_table(k, beta, n, &mut io::stdout().lock())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Levelset {
            certificate,
            bounds,
            resolution,
            axes,
            point,
            out,
        } => {
            let cert = input(NeuralCertificate::load(certificate))?;
            let spec = input(SliceSpec::parse(
                cert.input_dim(),
                bounds,
                *resolution,
                axes,
                point.as_deref(),
            ))?;
            match out {
                Some(path) => {
                    let file = input(fs::File::create(path).with_context(|| format!("creating {}", path.display())))?;
                    levelset(&cert, &spec, &mut BufWriter::new(file))?;
                }
                None => levelset(&cert, &spec, &mut io::stdout().lock())?,
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate { count } => simulate(global, *count),
    }
}

fn synthesize(global: &GlobalOpts) -> Result<ExitCode> {
    let config = load_config(global)?;
    init_threads(global.threads.unwrap_or(config.threads));
    input(fs::create_dir_all(&global.out_dir).with_context(|| format!("creating {}", global.out_dir.display())))?;
    let prepared = Prepared::new(&config).context("preparing the run")?;
    let result = prepared.synthesize().context("synthesis failed")?;
    let outcome = RunOutcome::from_result(&prepared, result)?;

    let report = &outcome.report;
    write_json(&global.out_dir.join("report.json"), report)?;
    write_json(&global.out_dir.join("compression.json"), &report.compression)?;
    input(outcome.result.certificate.save(global.out_dir.join("certificate.json")))?;

    match &outcome.guarantee {
        Some(g) => {
            println!("{}", g.statement);
            for c in &g.caveats {
                println!("caveat: {c}");
            }
            Ok(ExitCode::SUCCESS)
        }
        None => {
            eprintln!(
                "synthesis stopped without meeting the conditions (state loss {:.3e}, max l^Δ {:.3e}, d {:.3e})",
                report.state_loss, report.max_traj_loss_retained, report.d
            );
            Ok(ExitCode::from(1))
        }
    }
}

#[derive(serde::Deserialize)]
struct ReportView {
    d: f64,
    pac: PacView,
}

#[derive(serde::Deserialize)]
struct PacView {
    epsilon: f64,
}

fn validate(
    global: &GlobalOpts,
    certificate: &Path,
    report: Option<&Path>,
    epsilon: Option<f64>,
    n_fresh: Option<usize>,
) -> Result<ExitCode> {
    let config = load_config(global)?;
    init_threads(global.threads.unwrap_or(config.threads));
    let cert = input(NeuralCertificate::load(certificate))?;
    let default_report = certificate.with_file_name("report.json");
    let report_path = report
        .map(Path::to_path_buf)
        .or_else(|| default_report.exists().then_some(default_report));
    let view: Option<ReportView> = match &report_path {
        Some(p) => {
            let text = input(fs::read_to_string(p).with_context(|| format!("reading {}", p.display())))?;
            Some(input(
                serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display())),
            )?)
        }
        None => None,
    };
    let prepared = Prepared::new(&config).context("preparing the run")?;
    let eps = match (epsilon, &view) {
        (Some(e), _) => e,
        (None, Some(v)) => v.pac.epsilon,
        (None, None) => return Err(InputError(anyhow!("need --epsilon or a synthesis report")).into()),
    };
    let d = match &view {
        Some(v) => v.d,
        None => prepared.tightening().evaluate(&cert)?.0,
    };
    let report = prepared.validate(&cert, d, eps, n_fresh)?;
    input(fs::create_dir_all(&global.out_dir))?;
    write_json(&global.out_dir.join("validation.json"), &report)?;
    println!(
        "violation rate {:.6} (ε = {:.6}), unsafe entries {:.6}, max gap {} (d = {:.6e}): {}",
        report.psi_violation_rate,
        report.epsilon_bound,
        report.unsafe_entry_rate,
        report
            .gap_max_observed
            .map_or("n/a".to_string(), |g| format!("{g:.6e}")),
        report.gap_bound_d,
        if report.pass { "pass" } else { "FAIL" }
    );
    Ok(if report.pass {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(1)
    })
}

/// Inclusive integer range `a`, `a:b` or `a:b:step`; empty when `a > b`.
fn parse_range(text: &str) -> Result<Vec<usize>> {
    let parts: Vec<&str> = text.split(':').map(str::trim).collect();
    let num = |s: &str| -> Result<usize> {
        s.parse()
            .map_err(|_| InputError(anyhow!("invalid range `{text}`: `{s}` is not a nonnegative integer")).into())
    };
    let (lo, hi, step) = match parts.as_slice() {
        [a] => (num(a)?, num(a)?, 1),
        [a, b] => (num(a)?, num(b)?, 1),
        [a, b, s] => (num(a)?, num(b)?, num(s)?),
        _ => return Err(InputError(anyhow!("invalid range `{text}`")).into()),
    };
    if step == 0 {
        return Err(InputError(anyhow!("invalid range `{text}`: step must be positive")).into());
    }
    Ok((lo..=hi).step_by(step).collect())
}

fn parse_list(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| InputError(anyhow!("invalid number `{s}` in `{text}`")).into())
        })
        .collect()
}

fn epsilon_table(k: &str, beta: &str, n: &str, out: &mut impl Write) -> Result<()> {
    let ks = parse_range(k)?;
    let betas = parse_list(beta)?;
    let ns = parse_range(n)?;
    if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
        return Err(InputError(anyhow!("β must lie in (0, 1), got {b}")).into());
    }
    writeln!(out, "k,beta,N,epsilon,residual")?;
    for &n in &ns {
        for &b in &betas {
            for &k in ks.iter().filter(|&&k| k <= n && n > 0) {
                let (e, r) = epsilon_with_residual(k, b, n)?;
                writeln!(out, "{k},{b},{n},{e:?},{r:e}")?;
            }
        }
    }
    Ok(())
}

#[derive(Debug)]
struct SliceSpec {
    axes: (usize, usize),
    ranges: [(f64, f64); 2],
    resolution: usize,
    base: Vec<f64>,
}

impl SliceSpec {
    fn parse(dim: usize, bounds: &str, resolution: usize, axes: &str, point: Option<&str>) -> anyhow::Result<Self> {
        if resolution < 2 {
            bail!("resolution must be at least 2, got {resolution}");
        }
        let axis: Vec<usize> = axes
            .split(',')
            .map(|s| s.trim().parse().map_err(|_| anyhow!("invalid axes `{axes}`")))
            .collect::<anyhow::Result<_>>()?;
        let [a, b] = axis[..] else {
            bail!("--axes needs exactly two indices, got `{axes}`");
        };
        if a == b || a >= dim || b >= dim {
            bail!("axes {a},{b} are not two distinct coordinates of a {dim}-dimensional state");
        }
        let mut ranges = [(0.0, 0.0); 2];
        let parts: Vec<&str> = bounds.split(',').collect();
        if parts.len() != 2 {
            bail!("--bounds needs `lo1:hi1,lo2:hi2`, got `{bounds}`");
        }
        for (slot, part) in ranges.iter_mut().zip(&parts) {
            let (lo, hi) = part
                .split_once(':')
                .ok_or_else(|| anyhow!("invalid bound `{part}`, expected lo:hi"))?;
            let lo: f64 = lo.trim().parse().map_err(|_| anyhow!("invalid bound `{part}`"))?;
            let hi: f64 = hi.trim().parse().map_err(|_| anyhow!("invalid bound `{part}`"))?;
            if !lo.is_finite() || !hi.is_finite() || lo >= hi {
                bail!("bound `{part}` must satisfy lo < hi");
            }
            *slot = (lo, hi);
        }
        let base = match point {
            Some(p) => {
                let v: Vec<f64> = p
                    .split(',')
                    .map(|s| s.trim().parse().map_err(|_| anyhow!("invalid --point `{p}`")))
                    .collect::<anyhow::Result<_>>()?;
                if v.len() != dim {
                    bail!("--point has {} coordinates, the certificate expects {dim}", v.len());
                }
                v
            }
            None if dim <= 2 => vec![0.0; dim],
            None => bail!("a {dim}-dimensional certificate needs --point to fix the other coordinates"),
        };
        Ok(Self {
            axes: (a, b),
            ranges,
            resolution,
            base,
        })
    }
}

fn levelset(cert: &NeuralCertificate, spec: &SliceSpec, out: &mut impl Write) -> Result<()> {
    let coord = |(lo, hi): (f64, f64), i: usize| {
        if i + 1 == spec.resolution {
            hi
        } else {
            lo + (hi - lo) * i as f64 / (spec.resolution - 1) as f64
        }
    };
    writeln!(out, "x1,x2,B")?;
    let mut x = spec.base.clone();
    for i in 0..spec.resolution {
        for j in 0..spec.resolution {
            let (u, v) = (coord(spec.ranges[0], i), coord(spec.ranges[1], j));
            x[spec.axes.0] = u;
            x[spec.axes.1] = v;
            writeln!(out, "{u:?},{v:?},{:?}", cert.eval(&x))?;
        }
    }
    out.flush()?;
    Ok(())
}

fn simulate(global: &GlobalOpts, count: usize) -> Result<ExitCode> {
    if count == 0 {
        return Err(InputError(anyhow!("--count must be at least 1")).into());
    }
    let config = load_config(global)?;
    init_threads(global.threads.unwrap_or(config.threads));
    let prepared = Prepared::new(&config).context("preparing the run")?;
    input(fs::create_dir_all(&global.out_dir).with_context(|| format!("creating {}", global.out_dir.display())))?;
    let states = sample_initial_states(&config.regions.initial, count, prepared.seeds.samples)?;
    for (i, x0) in states.iter().enumerate() {
        let traj = integrate(&prepared.system, x0, config.horizon, prepared.step)?;
        let path = global.out_dir.join(format!("trajectory_{i:04}.csv"));
        let file = input(fs::File::create(&path).with_context(|| format!("creating {}", path.display())))?;
        traj.write_csv(BufWriter::new(file))?;
    }
    println!("wrote {count} trajectories to {}", global.out_dir.display());
    Ok(ExitCode::SUCCESS)
}
