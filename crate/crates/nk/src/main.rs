//! `nk` command-line front end.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use nalgebra::DVector;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use nk::families::{poly2_fixture, random_dataset, random_input};
use nk::global_dual::{compute_global_ledger, rademacher_global, rademacher_lipschitz};
use nk::hermite::{
    hermite_transform, magnitude_fn, rectified_activation, rectified_envelope, Activation,
    ProfileOptions,
};
use nk::kernels::{gram, KernelContext, KernelKind};
use nk::lenk::{lenk_diag, lenk_fixed, lenk_nct, representor_sum, Dataset, LenkProblem, LenkReport, DEFAULT_TERM_CAP};
use nk::local_dual::{
    check_step_bound, compute_local_ledger, omega_empirical, omega_from_ledger, rademacher_local,
    OmegaMode, StepSpec,
};
use nk::netgraph::{build_feedforward_relu, build_resnet, forward, initialize, norm_bounds, Parameters, Scheme, Skeleton};
use nk::oracle::{empirical_rademacher, sample_network_values, sample_step_values, RademacherOptions};
use nk::par::{self, Exec};

#[derive(Parser, Debug)]
#[command(name = "nk", version, about = "Exact finite-width kernel models of neural networks")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Experiment config (JSON); relative paths inside resolve against its directory.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    kernel: Option<KernelKind>,
    #[arg(long = "k-max", global = true)]
    k_max: Option<usize>,
    /// Hermite truncation order K.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    eta: Option<f64>,
    #[arg(long = "eta-lr", global = true)]
    eta_lr: Option<f64>,
    #[arg(long, global = true)]
    epsilon: Option<f64>,
    #[arg(long = "term-cap", global = true)]
    term_cap: Option<u64>,
    /// φ̌ per edge as a JSON list, in edge order.
    #[arg(long = "phi-choices", global = true)]
    phi_choices: Option<String>,
    /// Replaces every activation of the network.
    #[arg(long, global = true)]
    activation: Option<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Hermite coefficient tables and magnitude / rectified-activation profiles.
    Hermite,
    /// Global and local bound ledgers and the step-admissibility check.
    Bounds,
    /// Gram matrix of a kernel over the inputs.
    Kernels,
    /// Representor sum of a gradient step against the brute-force Δf.
    LenkVerify,
    /// Rademacher bounds against Monte-Carlo estimates.
    Rademacher,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ExperimentConfig {
    network: Option<PathBuf>,
    builder: Option<BuilderConfig>,
    activation: Option<String>,
    params: Option<ParamsConfig>,
    init: Option<Scheme>,
    dataset: Option<PathBuf>,
    samples: Option<usize>,
    epsilon: Option<f64>,
    eta: Option<f64>,
    eta_lr: Option<f64>,
    k_max: Option<usize>,
    k: Option<usize>,
    q: Option<usize>,
    kernel: Option<KernelKind>,
    term_cap: Option<u64>,
    step: Option<StepConfig>,
    omega_mode: Option<OmegaMode>,
    phi_choices: Option<Vec<f64>>,
    trials: Option<usize>,
    draws: Option<usize>,
    xi: Option<Vec<f64>>,
    seed: Option<u64>,
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct BuilderConfig {
    kind: String,
    n: usize,
    widths: Vec<usize>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct ParamsConfig {
    bin: PathBuf,
    manifest: PathBuf,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct StepConfig {
    mu_delta: Vec<f64>,
    beta_delta: Vec<f64>,
}

/// Resolved settings.
struct Setup {
    cfg: ExperimentConfig,
    seed: u64,
    out: PathBuf,
    k: usize,
    eta: f64,
    eta_lr: f64,
    epsilon: f64,
    term_cap: u64,
    kernel: KernelKind,
}

impl Setup {
    fn new(common: &Common) -> anyhow::Result<Self> {
        let mut cfg = match &common.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                let mut c: ExperimentConfig =
                    serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))?;
                let base = p.parent().unwrap_or(Path::new("."));
                let fix = |q: &mut PathBuf| {
                    if q.is_relative() {
                        *q = base.join(&*q);
                    }
                };
                c.network.as_mut().map(fix);
                c.dataset.as_mut().map(fix);
                if let Some(pc) = c.params.as_mut() {
                    fix(&mut pc.bin);
                    fix(&mut pc.manifest);
                }
                c
            }
            None => ExperimentConfig::default(),
        };
        for p in cfg
            .network
            .iter()
            .chain(cfg.dataset.iter())
            .chain(cfg.params.iter().flat_map(|p| [&p.bin, &p.manifest]))
        {
            if !p.exists() {
                bail!("referenced file {} does not exist", p.display());
            }
        }
        if let Some(a) = &common.activation {
            cfg.activation = Some(a.clone());
        }
        if let Some(s) = &common.phi_choices {
            cfg.phi_choices = Some(serde_json::from_str(s).context("parsing --phi-choices")?);
        }
        if let Some(k) = common.k_max {
            cfg.k_max = Some(k);
        }
        let s = Setup {
            seed: common.seed.or(cfg.seed).unwrap_or(0),
            out: common.out.clone().or(cfg.out.clone()).unwrap_or_else(|| PathBuf::from("nk-out")),
            k: common.k.or(cfg.k).unwrap_or(40),
            eta: common.eta.or(cfg.eta).unwrap_or(0.75),
            eta_lr: common.eta_lr.or(cfg.eta_lr).unwrap_or(0.1),
            epsilon: common.epsilon.or(cfg.epsilon).unwrap_or(0.05),
            term_cap: common.term_cap.or(cfg.term_cap).unwrap_or(DEFAULT_TERM_CAP),
            kernel: common.kernel.or(cfg.kernel).unwrap_or(KernelKind::Ntk),
            cfg,
        };
        if !(s.eta > 0.0 && s.eta < 1.0) {
            bail!("--eta must lie in (0, 1), got {}", s.eta);
        }
        if !(s.epsilon > 0.0 && s.epsilon < 1.0) {
            bail!("--epsilon must lie in (0, 1), got {}", s.epsilon);
        }
        if !s.eta_lr.is_finite() || s.eta_lr < 0.0 {
            bail!("--eta-lr must be finite and non-negative");
        }
        if s.k == 0 {
            bail!("--k must be positive");
        }
        Ok(s)
    }

    fn skeleton(&self, default: impl FnOnce() -> nk::Result<Skeleton>) -> anyhow::Result<Skeleton> {
        let mut sk = if let Some(p) = &self.cfg.network {
            Skeleton::from_json(&std::fs::read_to_string(p)?)?
        } else if let Some(b) = &self.cfg.builder {
            match b.kind.as_str() {
                "relu" => build_feedforward_relu(b.n, &b.widths)?,
                "resnet" => build_resnet(b.n, &b.widths)?,
                k => bail!("unknown builder kind {k:?}"),
            }
        } else {
            default()?
        };
        if let Some(a) = &self.cfg.activation {
            let act = Activation::parse(a)?;
            for node in &mut sk.nodes {
                let skip = node.identity_skip;
                for (s, slot) in node.activations.iter_mut().enumerate() {
                    if Some(s) != skip {
                        *slot = act.clone();
                    }
                }
            }
            sk.validate()?;
        }
        Ok(sk)
    }

    fn params(&self, sk: &Skeleton) -> anyhow::Result<Parameters> {
        let th = match &self.cfg.params {
            Some(p) => Parameters::load(&p.bin, &p.manifest)?,
            None => initialize(sk, self.cfg.init.unwrap_or(Scheme::Lecun), self.seed)?,
        };
        th.check(sk)?;
        Ok(th)
    }

    fn dataset(&self, sk: &Skeleton, default_n: usize) -> anyhow::Result<Dataset> {
        let d = match &self.cfg.dataset {
            Some(p) => Dataset::from_json(&std::fs::read_to_string(p)?)?,
            None => {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed.wrapping_add(1));
                random_dataset(&mut rng, sk, self.cfg.samples.unwrap_or(default_n), 0.5)?
            }
        };
        d.check(sk)?;
        Ok(d)
    }

    fn omega(&self, sk: &Skeleton, theta: &Parameters, inputs: &[DVector<f64>]) -> anyhow::Result<Vec<f64>> {
        Ok(match self.cfg.omega_mode.unwrap_or(OmegaMode::Empirical) {
            OmegaMode::Empirical => omega_empirical(sk, theta, inputs)?,
            OmegaMode::Ledger => {
                let spec = norm_bounds(sk, Scheme::Measured, self.epsilon, Some(theta))?;
                let g = compute_global_ledger(sk, &spec, self.cfg.phi_choices.as_deref())?;
                omega_from_ledger(sk, &g)
            }
        })
    }

    /// The configured step bounds, a measured gradient step, or the zero step.
    fn step(&self, sk: &Skeleton, theta: &Parameters, data: &Dataset) -> anyhow::Result<(StepSpec, Option<Parameters>)> {
        let omega = self.omega(sk, theta, &data.inputs)?;
        if let Some(s) = &self.cfg.step {
            let step = StepSpec {
                mu_delta: s.mu_delta.clone(),
                beta_delta: s.beta_delta.clone(),
                omega,
                eta: self.eta,
            };
            step.validate(sk)?;
            return Ok((step, None));
        }
        if self.eta_lr > 0.0 && sk.is_chain() {
            let delta = nk::lenk::gd_step(sk, theta, data, self.eta_lr)?;
            let mut step = StepSpec::measured(sk, theta, &delta, &data.inputs, self.eta)?;
            step.omega = omega;
            return Ok((step, Some(delta)));
        }
        Ok((StepSpec::zero(sk, omega, self.eta), None))
    }
}

/// Collects outputs and writes them only after the command succeeded.
struct Outputs {
    dir: PathBuf,
    files: Vec<(String, Vec<u8>)>,
}

impl Outputs {
    fn new(dir: &Path) -> Self {
        Outputs { dir: dir.to_path_buf(), files: Vec::new() }
    }

    fn text(&mut self, name: &str, s: String) {
        self.files.push((name.to_string(), s.into_bytes()));
    }

    fn json<T: Serialize>(&mut self, name: &str, v: &T) -> anyhow::Result<()> {
        let mut s = serde_json::to_string_pretty(v)?;
        s.push('\n');
        self.text(name, s);
        Ok(())
    }

    fn commit(self) -> anyhow::Result<Vec<PathBuf>> {
        std::fs::create_dir_all(&self.dir).with_context(|| format!("creating {}", self.dir.display()))?;
        let mut written = Vec::new();
        for (name, bytes) in &self.files {
            let p = self.dir.join(name);
            if let Err(e) = std::fs::write(&p, bytes) {
                for w in &written {
                    let _ = std::fs::remove_file(w);
                }
                return Err(anyhow!(e).context(format!("writing {}", p.display())));
            }
            written.push(p);
        }
        Ok(written)
    }
}

fn csv_row(vals: &[f64]) -> String {
    let mut s = vals
        .iter()
        .map(|v| if v.is_finite() { format!("{v:e}") } else { String::new() })
        .collect::<Vec<_>>()
        .join(",");
    s.push('\n');
    s
}

fn grid(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| a + (b - a) * i as f64 / (n - 1) as f64).collect()
}

fn cmd_hermite(s: &Setup, out: &mut Outputs) -> anyhow::Result<bool> {
    let act = Activation::parse(s.cfg.activation.as_deref().unwrap_or("relu"))?;
    let k = s.k;
    let xis = s.cfg.xi.clone().unwrap_or_else(|| vec![-1.0, -0.5, 0.0, 0.5, 1.0]);
    let mut coeffs = String::from("k");
    for xi in &xis {
        coeffs.push_str(&format!(",a(xi={xi}),c(xi={xi})"));
    }
    coeffs.push('\n');
    let exps = xis
        .iter()
        .map(|&xi| hermite_transform(&act, xi, k))
        .collect::<nk::Result<Vec<_>>>()?;
    for i in 0..=k {
        let mut row = vec![i as f64];
        for e in &exps {
            row.push(e.coeffs.get(i).copied().unwrap_or(0.0));
            row.push(e.normalized.get(i).copied().unwrap_or(0.0));
        }
        coeffs.push_str(&csv_row(&row));
    }
    out.text("coefficients.csv", coeffs);

    let zs = grid(-2.0, 2.0, 81);
    let mut a = String::from("zeta,tau\n");
    for &z in &zs {
        a.push_str(&csv_row(&[z, act.eval(z)]));
    }
    out.text("activation.csv", a);

    let e0 = hermite_transform(&act, 0.0, k.max(80))?;
    let mut m = String::from("zeta,magnitude\n");
    for z in grid(0.0, 3.0, 61) {
        m.push_str(&csv_row(&[z, magnitude_fn(&e0, z).unwrap_or(f64::NAN)]));
    }
    out.text("magnitude.csv", m);

    let pairs = [(0.0, 0.0), (1.0, 1.0), (-1.0, 1.0), (2.0, -2.0), (-2.0, -2.0)];
    let mut r = String::from("zeta");
    let pe = pairs
        .iter()
        .map(|&(x1, x2)| Ok((hermite_transform(&act, x1, k)?, hermite_transform(&act, x2, k)?)))
        .collect::<nk::Result<Vec<_>>>()?;
    for (x1, x2) in pairs {
        r.push_str(&format!(",xi={x1}/xi'={x2}"));
    }
    r.push('\n');
    let zr = grid(-0.95, 0.95, 39);
    for &z in &zr {
        let mut row = vec![z];
        for (ea, eb) in &pe {
            row.push(rectified_activation(ea, eb, s.eta, z).unwrap_or(f64::NAN));
        }
        r.push_str(&csv_row(&row));
    }
    out.text("rectified.csv", r);

    let opts = ProfileOptions { k, ..ProfileOptions::default() };
    let mut env = String::from("zeta,envelope\n");
    for &z in &zr {
        env.push_str(&csv_row(&[z, rectified_envelope(&act, s.eta, 2.0, z, &opts).unwrap_or(f64::NAN)]));
    }
    out.text("envelope.csv", env);
    Ok(true)
}

#[derive(Serialize)]
struct StepReport {
    admissible: bool,
    margin: Vec<f64>,
    lhs: Vec<f64>,
    rhs: Vec<f64>,
    u: Vec<f64>,
    psi_hat_delta: f64,
    rademacher_local: f64,
    measured_step: bool,
}

fn default_relu() -> nk::Result<Skeleton> {
    build_feedforward_relu(3, &[4, 4, 1])
}

fn cmd_bounds(s: &Setup, out: &mut Outputs) -> anyhow::Result<bool> {
    let sk = s.skeleton(default_relu)?;
    let theta = s.params(&sk)?;
    let data = s.dataset(&sk, 8)?;
    let spec = norm_bounds(&sk, Scheme::Measured, s.epsilon, Some(&theta))?;
    let global = compute_global_ledger(&sk, &spec, s.cfg.phi_choices.as_deref())?;
    out.json("global_ledger.json", &global)?;
    let (step, delta) = s.step(&sk, &theta, &data)?;
    let local = compute_local_ledger(&sk, &spec.mu, &step)?;
    out.json("local_ledger.json", &local)?;
    let chk = check_step_bound(&sk, &spec.mu, &step)?;
    let rep = StepReport {
        admissible: chk.admissible,
        margin: chk.margin.clone(),
        lhs: chk.lhs.clone(),
        rhs: chk.rhs.clone(),
        u: chk.u.clone(),
        psi_hat_delta: local.psi_hat_delta,
        rademacher_local: rademacher_local(&local, data.len()),
        measured_step: delta.is_some(),
    };
    out.json("step_check.json", &rep)?;
    out.json("step_spec.json", &step)?;
    Ok(true)
}

fn cmd_kernels(s: &Setup, out: &mut Outputs) -> anyhow::Result<bool> {
    let sk = s.skeleton(default_relu)?;
    let theta = s.params(&sk)?;
    let data = s.dataset(&sk, 8)?;
    let ctx = match s.kernel {
        KernelKind::Nngp | KernelKind::Ntk => KernelContext::plain(&sk, &theta)?,
        _ => {
            let spec = norm_bounds(&sk, Scheme::Measured, s.epsilon, Some(&theta))?;
            let (step, _) = s.step(&sk, &theta, &data)?;
            KernelContext::new(&sk, &theta, &spec.mu, &step, s.k, s.cfg.q.unwrap_or(2))?
        }
    };
    let g = gram(&ctx, s.kernel, &data.inputs, Exec::default())?;
    out.text(&format!("gram_{}.csv", s.kernel), g.to_csv());
    out.json(&format!("gram_{}.json", s.kernel), &g)?;
    Ok(g.is_psd())
}

fn cmd_lenk_verify(s: &Setup, out: &mut Outputs) -> anyhow::Result<bool> {
    let sk = s.skeleton(|| Ok(poly2_fixture()))?;
    let theta = s.params(&sk)?;
    let data = s.dataset(&sk, 2)?;
    let degrees: Vec<Option<usize>> = sk.nodes.iter().map(|n| n.activations[0].degree()).collect();
    let poly_degree = degrees.iter().try_fold(1usize, |m, d| d.map(|d| m.max(d)));
    let k_max = s.cfg.k_max.or(poly_degree).unwrap_or(2);
    let p = LenkProblem::new(&sk, &theta, &data, s.eta_lr)?;
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed.wrapping_add(2));
    let x = random_input(&mut rng, sk.n, 1.0);
    let sum = representor_sum(&p, &x, k_max, s.term_cap)?;
    let brute = forward(&sk, &p.stepped(), &x)?.output() - forward(&sk, &theta, &x)?.output();
    let mut rep = LenkReport::new(&sum, &brute, k_max);
    rep.push_ladder("exact", &sum.value);
    rep.push_ladder("fixed", &lenk_fixed(&p, &x, k_max, s.term_cap)?.value);
    rep.push_ladder("nct", &lenk_nct(&p, &x, k_max, s.term_cap)?);
    rep.push_ladder("diag", &lenk_diag(&p, &x, k_max, s.term_cap)?);
    let mut orders = String::from("order,cumulative_error\n");
    for o in &rep.orders {
        orders.push_str(&format!("{},{:e}\n", o.order, o.cumulative_error));
    }
    let mut ladder = String::from("method,abs_error\n");
    for l in &rep.ladder {
        ladder.push_str(&format!("{},{:e}\n", l.method, l.abs_error));
    }
    out.json("lenk_report.json", &rep)?;
    out.text("lenk_orders.csv", orders);
    out.text("lenk_ladder.csv", ladder);
    // Exactness is only claimed for polynomial chains with k_max ≥ degree.
    let checked = poly_degree.is_some_and(|d| k_max >= d);
    Ok(!checked || rep.final_error() <= 1e-8)
}

#[derive(Serialize)]
struct RademacherRow {
    bound: String,
    value: f64,
    empirical: f64,
    stderr: f64,
    dominates: bool,
}

fn cmd_rademacher(s: &Setup, out: &mut Outputs) -> anyhow::Result<bool> {
    let sk = s.skeleton(default_relu)?;
    let theta = s.params(&sk)?;
    let data = s.dataset(&sk, 20)?;
    let n = data.len();
    let opts = RademacherOptions {
        trials: s.cfg.trials.unwrap_or(1000),
        draws: s.cfg.draws.unwrap_or(200),
        seed: s.seed,
    };
    let spec = norm_bounds(&sk, Scheme::Measured, s.epsilon, Some(&theta))?;
    let vals = sample_network_values(&sk, &spec, &data.inputs, opts.draws, s.seed)?;
    let est = empirical_rademacher(&vals, opts, Exec::default())?;
    let mut rows = Vec::new();
    let mut push = |bound: &str, value: f64, e: &nk::oracle::RademacherEstimate| {
        rows.push(RademacherRow {
            bound: bound.to_string(),
            value,
            empirical: e.mean,
            stderr: e.stderr,
            dominates: e.mean <= value + 3.0 * e.stderr,
        })
    };
    let global = compute_global_ledger(&sk, &spec, s.cfg.phi_choices.as_deref())?;
    push("global", rademacher_global(&global, n), &est);
    let lipschitz = sk
        .nodes
        .iter()
        .flat_map(|nd| &nd.activations)
        .all(|a| matches!(a, Activation::Relu | Activation::Linear));
    if lipschitz && spec.beta.iter().all(|&b| b == 0.0) {
        let path = rademacher_lipschitz(&sk, 1.0, &spec)?;
        push("lipschitz", path / (n as f64).sqrt(), &est);
    }
    let (step, _) = s.step(&sk, &theta, &data)?;
    if step.mu_delta.iter().chain(&step.beta_delta).any(|&v| v > 0.0) {
        let local = compute_local_ledger(&sk, &spec.mu, &step)?;
        let sv = sample_step_values(&sk, &theta, &step.mu_delta, &step.beta_delta, &data.inputs, opts.draws, s.seed)?;
        let le = empirical_rademacher(&sv, opts, Exec::default())?;
        push("local", rademacher_local(&local, n), &le);
    }
    let mut csv = String::from("bound,value,empirical,stderr,dominates\n");
    for r in &rows {
        csv.push_str(&format!("{},{:e},{:e},{:e},{}\n", r.bound, r.value, r.empirical, r.stderr, r.dominates));
    }
    out.json("rademacher.json", &rows)?;
    out.text("rademacher.csv", csv);
    Ok(rows.iter().all(|r| r.dominates))
}

fn run(cli: &Cli) -> anyhow::Result<bool> {
    let s = Setup::new(&cli.common)?;
    let mut out = Outputs::new(&s.out);
    let ok = match cli.cmd {
        Command::Hermite => cmd_hermite(&s, &mut out)?,
        Command::Bounds => cmd_bounds(&s, &mut out)?,
        Command::Kernels => cmd_kernels(&s, &mut out)?,
        Command::LenkVerify => cmd_lenk_verify(&s, &mut out)?,
        Command::Rademacher => cmd_rademacher(&s, &mut out)?,
    };
    for p in out.commit()? {
        log::info!("wrote {}", p.display());
    }
    Ok(ok)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    if let Ok(t) = std::env::var("NK_THREADS") {
        match t.parse::<usize>() {
            Ok(n) if n > 0 => {
                par::set_threads(n);
            }
            _ => {
                eprintln!("error: NK_THREADS must be a positive integer, got {t:?}");
                return ExitCode::from(2);
            }
        }
    }
    let cli = Cli::parse();
    match run(&cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => {
            eprintln!("nk: one or more checks failed");
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
