//! End-to-end acceptance checks. Prints one `PASS`/`FAIL` line per criterion and
//! exits non-zero if any criterion fails.
//!
//! Runs the real binary for the two benchmark experiments and uses the library
//! directly for the numerical and statistical checks.

mod common;

use std::path::Path;
use std::process::ExitCode;
use std::time::Instant;

use barrier_pac::dynamics::{integrate, uniform_sample_times, DiscretizedTrajectory};
use barrier_pac::experiment::{Prepared, RunConfig, RunOutcome};
use barrier_pac::loss::{state_loss, traj_loss, GridSets};
use barrier_pac::pac::epsilon_with_residual;
use barrier_pac::validation::{monte_carlo_validate, ValidationRequest};
use barrier_pac::{Activation, BoxRegion, NeuralCertificate, ParamVector, RegionSpec, SystemModel};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

const JET_SEEDS: [u64; 5] = [1, 2, 3, 4, 5];
const FOUR_DIM_SEEDS: [u64; 3] = [1, 2, 3];
const N_FRESH: usize = 10_000;
const MAX_SECONDS_PER_SEED: f64 = 30.0 * 60.0;

struct Verdict {
    pass: bool,
    details: Vec<String>,
}

impl Verdict {
    fn new() -> Self {
        Self {
            pass: true,
            details: Vec::new(),
        }
    }

    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if !ok {
            self.pass = false;
            self.details.push(format!("violated: {}", what.into()));
        }
    }

    fn note(&mut self, what: impl Into<String>) {
        self.details.push(what.into());
    }
}

/// Everything observed for one benchmark seed.
struct SeedRun {
    label: String,
    report: Value,
    validation: Value,
    synth_exit: Option<i32>,
    validate_exit: Option<i32>,
    seconds: f64,
}

fn f(v: &Value, path: &[&str]) -> f64 {
    let mut cur = v;
    for p in path {
        cur = &cur[*p];
    }
    cur.as_f64().unwrap_or_else(|| panic!("missing numeric field {path:?}"))
}

fn u(v: &Value, path: &[&str]) -> u64 {
    let mut cur = v;
    for p in path {
        cur = &cur[*p];
    }
    cur.as_u64().unwrap_or_else(|| panic!("missing integer field {path:?}"))
}

fn run_benchmark(config: &str, seed: u64, dir: &Path) -> SeedRun {
    let config_path = common::repo_file(config);
    let out = dir.to_string_lossy().into_owned();
    let seed_s = seed.to_string();
    let start = Instant::now();
    let synth = common::run(&[
        "synthesize",
        "--config",
        &config_path,
        "--seed",
        &seed_s,
        "--out-dir",
        &out,
    ]);
    let seconds = start.elapsed().as_secs_f64();
    if !synth.status.success() {
        eprintln!("{}", String::from_utf8_lossy(&synth.stderr));
    }
    let report = common::read_json(&dir.join("report.json"));
    let cert = dir.join("certificate.json").to_string_lossy().into_owned();
    let n_fresh = N_FRESH.to_string();
    let val = common::run(&[
        "validate",
        "--config",
        &config_path,
        "--seed",
        &seed_s,
        "--certificate",
        &cert,
        "--n-fresh",
        &n_fresh,
        "--out-dir",
        &out,
    ]);
    let validation = common::read_json(&dir.join("validation.json"));
    SeedRun {
        label: format!("{config} seed {seed}"),
        report,
        validation,
        synth_exit: synth.status.code(),
        validate_exit: val.status.code(),
        seconds,
    }
}

fn benchmark_criterion(runs: &[SeedRun], eps_max: f64, check_unsafe: bool) -> Verdict {
    let mut v = Verdict::new();
    for r in runs {
        let eps = f(&r.report, &["pac", "epsilon"]);
        let d = f(&r.report, &["d"]);
        let ls = f(&r.report, &["state_loss"]);
        let ld = f(&r.report, &["max_traj_loss_retained"]);
        let rate = f(&r.validation, &["psi_violation_rate"]);
        let unsafe_rate = f(&r.validation, &["unsafe_entry_rate"]);
        v.check(
            r.synth_exit == Some(0),
            format!("{}: synthesize exit {:?}", r.label, r.synth_exit),
        );
        v.check(
            r.report["success"] == Value::Bool(true),
            format!("{}: not successful", r.label),
        );
        v.check(ls == 0.0, format!("{}: l^s = {ls:e}", r.label));
        v.check(ld < -d, format!("{}: max l^Δ = {ld:e} ≥ −d = {:e}", r.label, -d));
        v.check(eps <= eps_max, format!("{}: ε = {eps} > {eps_max}", r.label));
        v.check(
            r.seconds <= MAX_SECONDS_PER_SEED,
            format!("{}: {:.0} s", r.label, r.seconds),
        );
        v.check(
            u(&r.validation, &["n_fresh"]) as usize == N_FRESH,
            format!("{}: validation size", r.label),
        );
        v.check(rate <= eps, format!("{}: violation rate {rate} > ε {eps}", r.label));
        if check_unsafe {
            v.check(
                unsafe_rate == 0.0,
                format!("{}: unsafe entry rate {unsafe_rate}", r.label),
            );
        }
        v.check(
            r.validate_exit == Some(0),
            format!("{}: validate exit {:?}", r.label, r.validate_exit),
        );
        v.note(format!(
            "{}: |C|={} ε={eps:.5} d={d:.3e} maxlΔ={ld:.3e} rate={rate} unsafe={unsafe_rate} {:.1}s",
            r.label,
            u(&r.report, &["compression", "size"]),
            r.seconds
        ));
    }
    v
}

fn gap_criterion(runs: &[&SeedRun]) -> Verdict {
    let mut v = Verdict::new();
    for r in runs {
        let d = f(&r.validation, &["gap_bound_d"]);
        let gap = f(&r.validation, &["gap_max_observed"]);
        let n = u(&r.validation, &["n_fresh"]);
        let violations = u(&r.validation, &["gap_violations"]);
        v.check(n >= 1000, format!("{}: only {n} fresh trajectories", r.label));
        v.check(
            violations == 0 && gap <= d,
            format!("{}: gap {gap:e} vs d {d:e} ({violations} violations)", r.label),
        );
        v.note(format!("{}: max gap {gap:.3e} ≤ d {d:.3e}", r.label));
    }
    v
}

fn proposition_criterion(runs: &[&SeedRun], extra: &[(String, u64, u64)]) -> Verdict {
    let mut v = Verdict::new();
    let mut applicable = 0;
    let mut tally = |label: &str, app: u64, cex: u64, v: &mut Verdict| {
        applicable += app;
        v.check(cex == 0, format!("{label}: {cex} counterexamples"));
    };
    for r in runs {
        let app = u(&r.validation, &["proposition1_applicable"]);
        let cex = u(&r.validation, &["proposition1_counterexamples"]);
        tally(&r.label, app, cex, &mut v);
    }
    for (label, app, cex) in extra {
        tally(label, *app, *cex, &mut v);
    }
    v.check(applicable > 0, "no applicable (certificate, trajectory) pairs");
    v.note(format!("{applicable} applicable pairs checked"));
    v
}

/// Accounting, determinism and compression re-run for one benchmark seed.
fn compression_checks(config: &str, seed: u64, cli_report: &Value, v: &mut Verdict) {
    let label = format!("{config} seed {seed}");
    let mut cfg = RunConfig::load(common::repo_file(config)).unwrap();
    cfg.seed = seed;
    let prepared = Prepared::new(&cfg).unwrap();
    let result = prepared.synthesize().unwrap();
    let outcome = RunOutcome::from_result(&prepared, result.clone()).unwrap();

    let c = &result.compression;
    v.check(
        c.len() == c.jump_count + c.discarded_count,
        format!("{label}: |C| {} ≠ {} + {}", c.len(), c.jump_count, c.discarded_count),
    );
    let size = u(cli_report, &["compression", "size"]);
    let jumps = u(cli_report, &["compression", "jump_count"]);
    let discarded = u(cli_report, &["compression", "discarded_count"]);
    v.check(size == jumps + discarded, format!("{label}: CLI report accounting"));

    // Same seed, independent process: identical report apart from wall time.
    let mut ours = serde_json::to_value(&outcome.report).unwrap();
    let mut theirs = cli_report.clone();
    ours.as_object_mut().unwrap().remove("wall_time");
    theirs.as_object_mut().unwrap().remove("wall_time");
    v.check(
        ours == theirs,
        format!("{label}: reports differ between identical-seed runs"),
    );

    let rerun = prepared.rerun_on_compression(&result).unwrap();
    let cert = &rerun.certificate;
    let ls = state_loss(cert, &prepared.grids).unwrap();
    let worst = result
        .retained
        .iter()
        .map(|&i| traj_loss(cert, &prepared.samples[i], &prepared.grids, cfg.horizon).unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    v.check(ls == 0.0, format!("{label}: re-run l^s = {ls:e}"));
    v.check(
        worst < -rerun.d_used,
        format!("{label}: re-run max l^Δ {worst:e} ≥ −d {:e}", -rerun.d_used),
    );
    v.check(
        cert.params() == result.certificate.params(),
        format!("{label}: re-run certificate differs from the original"),
    );
    v.note(format!(
        "{label}: |C|={} = {}+{}; re-run over {} retained samples max l^Δ {worst:.3e} < −d {:.3e}",
        c.len(),
        c.jump_count,
        c.discarded_count,
        result.retained.len(),
        -rerun.d_used
    ));
}

/// Adds a trajectory that runs straight from the initial set into the unsafe set.
/// No certificate can satisfy it, so the outer loop has to discard it.
fn adversarial_discard(v: &mut Verdict) {
    let mut cfg = RunConfig::load(common::repo_file("configs/jet_engine.json")).unwrap();
    cfg.seed = 1;
    let prepared = Prepared::new(&cfg).unwrap();
    let times = prepared.sample_times.clone();
    let horizon = cfg.horizon;
    let states: Vec<Vec<f64>> = times.iter().map(|t| vec![0.6 * t / horizon; 2]).collect();
    let bad = DiscretizedTrajectory::new(times, states).unwrap();
    let bad_index = prepared.samples.len();
    let mut samples = prepared.samples.clone();
    samples.push(bad);

    let result = prepared.synthesize_on(&samples).unwrap();
    let c = &result.compression;
    v.check(c.discarded_count >= 1, "adversarial sample was not discarded");
    v.check(!result.retained.contains(&bad_index), "adversarial sample retained");
    v.check(
        c.len() == c.jump_count + c.discarded_count,
        format!(
            "adversarial run: |C| {} ≠ {} + {}",
            c.len(),
            c.jump_count,
            c.discarded_count
        ),
    );
    v.check(
        result.is_success(),
        "adversarial run did not succeed on the retained samples",
    );

    let mut indices = c.indices.clone();
    indices.sort_unstable();
    let subset: Vec<_> = indices.iter().map(|&i| samples[i].clone()).collect();
    let rerun = prepared.synthesize_on(&subset).unwrap();
    let ls = state_loss(&rerun.certificate, &prepared.grids).unwrap();
    let worst = result
        .retained
        .iter()
        .map(|&i| traj_loss(&rerun.certificate, &samples[i], &prepared.grids, horizon).unwrap())
        .fold(f64::NEG_INFINITY, f64::max);
    v.check(
        ls == 0.0 && worst < -rerun.d_used,
        "adversarial re-run does not satisfy the retained samples",
    );
    v.note(format!(
        "adversarial run: |C|={} = {} jumps + {} discarded, {} rounds",
        c.len(),
        c.jump_count,
        c.discarded_count,
        result.outer_iterations
    ));
}

#[allow(clippy::needless_range_loop)]
fn epsilon_criterion() -> Verdict {
    let mut v = Verdict::new();
    let mut max_residual: f64 = 0.0;
    let mut residual_check = |k: usize, beta: f64, n: usize, r: f64, v: &mut Verdict| {
        max_residual = max_residual.max(r);
        v.check(r <= 1e-9, format!("residual {r:e} at ({k}, {beta}, {n})"));
    };

    for &n in &[1usize, 2, 10, 100, 1000, 2000] {
        for &beta in &[1e-9, 1e-5, 0.01, 0.5] {
            let (e, r) = epsilon_with_residual(n, beta, n).unwrap();
            v.check(e == 1.0, format!("ε({n}, {beta}, {n}) = {e}"));
            residual_check(n, beta, n, r, &mut v);
        }
    }

    // 5 × 4 × 5 = 100 lattice triples.
    let ns = [50usize, 100, 200, 500, 1000];
    let betas = [1e-6, 1e-3, 1e-2, 1e-1];
    let ks = [0usize, 1, 5, 10, 25];
    let mut table = vec![vec![vec![0.0; ks.len()]; betas.len()]; ns.len()];
    for (a, &n) in ns.iter().enumerate() {
        for (b, &beta) in betas.iter().enumerate() {
            for (c, &k) in ks.iter().enumerate() {
                let (e, r) = epsilon_with_residual(k, beta, n).unwrap();
                v.check(
                    e >= k as f64 / n as f64 && e <= 1.0,
                    format!("ε({k}, {beta}, {n}) = {e} outside [k/N, 1]"),
                );
                residual_check(k, beta, n, r, &mut v);
                table[a][b][c] = e;
            }
        }
    }
    for a in 0..ns.len() {
        for b in 0..betas.len() {
            for c in 0..ks.len() {
                if c > 0 {
                    v.check(
                        table[a][b][c] >= table[a][b][c - 1],
                        format!("not monotone in k at N={}", ns[a]),
                    );
                }
                if a > 0 {
                    v.check(
                        table[a][b][c] <= table[a - 1][b][c],
                        format!("not monotone in N at k={}", ks[c]),
                    );
                }
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(0xe951);
    let mut max_err: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.gen_range(1..=2000usize);
        let k = rng.gen_range(0..=n);
        let beta = 10f64.powf(rng.gen_range(-9.0..-0.3));
        let (e, r) = epsilon_with_residual(k, beta, n).unwrap();
        let reference = common::oracle::epsilon(k, beta, n);
        let err = (e - reference).abs();
        max_err = max_err.max(err);
        v.check(
            err <= 1e-8,
            format!("ε({k}, {beta:e}, {n}) = {e} vs oracle {reference}"),
        );
        residual_check(k, beta, n, r, &mut v);
    }
    v.note(format!(
        "max |ε − oracle| {max_err:.2e}, max residual {max_residual:.2e}"
    ));
    v
}

fn central_difference(h: f64, mut eval: impl FnMut(f64) -> f64) -> f64 {
    (eval(h) - eval(-h)) / (2.0 * h)
}

fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let scale: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    diff / scale
}

fn numerics_criterion() -> Verdict {
    let mut v = Verdict::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x6ad);
    let mut worst_input: f64 = 0.0;
    let mut worst_param: f64 = 0.0;
    for trial in 0..100u64 {
        let dim = rng.gen_range(1..=4);
        let depth = rng.gen_range(1..=3);
        let mut sizes = vec![dim];
        sizes.extend((0..depth).map(|_| rng.gen_range(2..=12)));
        sizes.push(1);
        let cert = NeuralCertificate::random(&sizes, Activation::Tanh, trial).unwrap();
        let x: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let h = 1e-5;

        let analytic = cert.grad_input(&x).unwrap();
        let numeric: Vec<f64> = (0..dim)
            .map(|j| {
                central_difference(h, |s| {
                    let mut y = x.clone();
                    y[j] += s;
                    cert.eval(&y)
                })
            })
            .collect();
        let e_in = relative_error(&analytic, &numeric);

        let analytic = cert.grad_params(&x).unwrap();
        let base = cert.params();
        let numeric: Vec<f64> = (0..base.len())
            .map(|j| {
                central_difference(h, |s| {
                    let mut p = base.clone();
                    p.0[j] += s;
                    NeuralCertificate::from_params(&sizes, Activation::Tanh, &p)
                        .unwrap()
                        .eval(&x)
                })
            })
            .collect();
        let e_par = relative_error(analytic.as_slice(), &numeric);
        worst_input = worst_input.max(e_in);
        worst_param = worst_param.max(e_par);
        v.check(
            e_in <= 1e-5,
            format!("input gradient trial {trial}: relative error {e_in:e}"),
        );
        v.check(
            e_par <= 1e-5,
            format!("parameter gradient trial {trial}: relative error {e_par:e}"),
        );
    }

    let decay = SystemModel::linear(vec![vec![-1.0]]).unwrap();
    let exact = (-1.0f64).exp();
    let err = |h: f64| {
        let traj = integrate(&decay, &[1.0], 1.0, h).unwrap();
        (traj.state(traj.len() - 1)[0] - exact).abs()
    };
    let ratio = err(0.1) / err(0.05);
    v.check((12.0..=20.0).contains(&ratio), format!("RK4 error ratio {ratio}"));
    v.note(format!(
        "max relative error input {worst_input:.2e} parameters {worst_param:.2e}; RK4 ratio {ratio:.3}"
    ));
    v
}

/// `ẋ = x` on `[0, 1]`, `B(x) = x − 1.5`: the derivative condition fails exactly when
/// `x0·e ≥ 2`, so with `x0 ~ U[0, 1]` the violation probability is `1 − 2/e`.
fn calibration_criterion() -> (Verdict, (String, u64, u64)) {
    let mut v = Verdict::new();
    let system = SystemModel::linear(vec![vec![1.0]]).unwrap();
    let regions = RegionSpec::new(
        BoxRegion::new(vec![0.0], vec![4.0]).unwrap(),
        BoxRegion::new(vec![0.0], vec![1.0]).unwrap(),
        BoxRegion::new(vec![3.0], vec![4.0]).unwrap(),
    )
    .unwrap();
    let grids = GridSets::from_regions(&regions, 11, 0.1).unwrap();
    let cert = NeuralCertificate::from_params(&[1, 1], Activation::Tanh, &ParamVector(vec![1.0, -1.5])).unwrap();
    let times = uniform_sample_times(1.0, 10);
    let n = 100_000;
    let request = ValidationRequest {
        system: &system,
        regions: &regions,
        grids: &grids,
        horizon: 1.0,
        sample_times: &times,
        step: Some(1e-3),
        n_fresh: n,
        d: 0.0,
        epsilon: 1.0,
        seed: 0xca1,
        constants_domain: None,
    };
    let report = monte_carlo_validate(&cert, &request).unwrap();
    let p = 1.0 - 2.0 / std::f64::consts::E;
    let se = (p * (1.0 - p) / n as f64).sqrt();
    let z = (report.psi_violation_rate - p) / se;
    v.check(
        z.abs() <= 3.0,
        format!("rate {} vs p {p}: {z:.2} standard errors", report.psi_violation_rate),
    );
    v.note(format!(
        "rate {:.5} vs p {p:.5} ({z:+.2} SE over {n} draws)",
        report.psi_violation_rate
    ));
    let prop = (
        "calibration certificate".to_string(),
        report.proposition1_applicable as u64,
        report.proposition1_counterexamples as u64,
    );
    (v, prop)
}

fn main() -> ExitCode {
    let mut lines: Vec<(usize, &str, Verdict)> = Vec::new();
    let t0 = Instant::now();

    lines.push((3, "epsilon solver", epsilon_criterion()));
    lines.push((6, "gradient and integrator numerics", numerics_criterion()));
    let (calibration, calibration_prop) = calibration_criterion();

    let tmp = tempfile::tempdir().unwrap();
    let jet: Vec<SeedRun> = JET_SEEDS
        .iter()
        .map(|&s| {
            let dir = tmp.path().join(format!("jet_{s}"));
            run_benchmark("configs/jet_engine.json", s, &dir)
        })
        .collect();
    let four: Vec<SeedRun> = FOUR_DIM_SEEDS
        .iter()
        .map(|&s| {
            let dir = tmp.path().join(format!("four_{s}"));
            run_benchmark("configs/four_dim.json", s, &dir)
        })
        .collect();

    lines.push((1, "jet engine end-to-end", benchmark_criterion(&jet, 0.05, true)));
    lines.push((2, "4-D benchmark end-to-end", benchmark_criterion(&four, 0.35, false)));
    let all: Vec<&SeedRun> = jet.iter().chain(four.iter()).collect();
    lines.push((4, "discretization gap", gap_criterion(&all)));
    lines.push((
        5,
        "trajectory safety property",
        proposition_criterion(&all, &[calibration_prop]),
    ));

    let mut compression = Verdict::new();
    for (config, runs, seeds) in [
        ("configs/jet_engine.json", &jet, &JET_SEEDS[..]),
        ("configs/four_dim.json", &four, &FOUR_DIM_SEEDS[..]),
    ] {
        for (run, &seed) in runs.iter().zip(seeds) {
            compression_checks(config, seed, &run.report, &mut compression);
        }
    }
    adversarial_discard(&mut compression);
    lines.push((7, "compression accounting and determinism", compression));
    lines.push((8, "statistical calibration", calibration));

    lines.sort_by_key(|(i, _, _)| *i);
    let mut failed = 0;
    for (i, name, verdict) in &lines {
        println!("criterion {i} ({name}): {}", if verdict.pass { "PASS" } else { "FAIL" });
        for d in &verdict.details {
            println!("    {d}");
        }
        failed += usize::from(!verdict.pass);
    }
    println!(
        "acceptance: {} of {} criteria passed in {:.0} s",
        lines.len() - failed,
        lines.len(),
        t0.elapsed().as_secs_f64()
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
