use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sfmc_core::io::{
    load_triplets, percentile_rank_bar, mspe, predict_clipped, read_dense_csv, write_dense_csv, Report,
};
use sfmc_core::pipeline::{fit_auto, EtaPolicy, MuPolicy, PipelineConfig};
use sfmc_core::sim::{run_experiment, Method, Noise, SimDesign};
use sfmc_core::tuning::{default_mu_grid, select_mu, TuningConfig};
use sfmc_core::{BFamily, Error, LossSpec, Ranks, Result};

#[derive(Parser)]
#[command(name = "sfmc", version, about = "Shared-factor matrix completion")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Select ranks and tuning, fit, and report.
    Fit(FitArgs),
    /// Rank selection only.
    Ranks(TuneArgs),
    /// Monte Carlo experiment on synthetic data.
    Simulate(SimArgs),
    /// Score a dense prediction matrix against a test file.
    Evaluate(EvalArgs),
}

#[derive(Args, Clone)]
struct TuneArgs {
    /// Training triplets (user item rating [timestamp]), tab or comma separated.
    #[arg(long)]
    input: PathBuf,
    /// quadratic, huber[:delta], or expfamily[:gaussian|poisson|bernoulli]
    #[arg(long, default_value = "quadratic")]
    loss: String,
    /// Fixed penalty level; skips the grid search.
    #[arg(long, conflicts_with = "mu_grid")]
    mu: Option<f64>,
    /// Comma-separated penalty levels.
    #[arg(long, value_delimiter = ',')]
    mu_grid: Option<Vec<f64>>,
    #[arg(long, default_value_t = 1.5)]
    gamma: f64,
    /// Rank cap of the penalized fit; default floor(sqrt(min(n1, n2))).
    #[arg(long)]
    cap_k: Option<usize>,
    #[arg(long)]
    alpha_m: Option<f64>,
    #[arg(long)]
    alpha_theta: Option<f64>,
    #[arg(long, default_value_t = 0.125)]
    ic_coef: f64,
    /// Accepted for reproducible scripts; the fit itself is deterministic.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Report path; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    #[command(flatten)]
    tune: TuneArgs,
    /// auto or a positive number
    #[arg(long, default_value = "auto")]
    eta: String,
    /// Test triplets for MSPE and percentile rank.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Clip predictions to lo,hi before scoring.
    #[arg(long, value_delimiter = ',', num_args = 2)]
    clip: Option<Vec<f64>>,
    /// Write the fitted M as dense CSV.
    #[arg(long)]
    matrix_out: Option<PathBuf>,
    /// Write standard errors of M as dense CSV.
    #[arg(long)]
    se_out: Option<PathBuf>,
}

#[derive(Args)]
struct SimArgs {
    #[arg(long, default_value_t = 300)]
    n: usize,
    /// d_s,d_m,d_theta
    #[arg(long, default_value = "5,2,2")]
    ranks: String,
    #[arg(long, default_value_t = 1.0)]
    m_p: f64,
    #[arg(long, default_value_t = 0.5)]
    sigma2: f64,
    /// normal or t:<df>
    #[arg(long, default_value = "normal")]
    noise: String,
    #[arg(long, default_value_t = 5)]
    reps: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, default_value = "osh,sh,mht", value_delimiter = ',')]
    methods: Vec<String>,
    #[arg(long, default_value_t = 1.5)]
    gamma: f64,
    #[arg(long, default_value_t = 0.125)]
    ic_coef: f64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    test: PathBuf,
    /// Dense prediction matrix (CSV with header row).
    #[arg(long)]
    pred: PathBuf,
    #[arg(long, value_delimiter = ',', num_args = 2)]
    clip: Option<Vec<f64>>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_loss(s: &str) -> Result<LossSpec> {
    let (kind, arg) = match s.split_once(':') {
        Some((k, a)) => (k, Some(a)),
        None => (s, None),
    };
    let loss = match (kind, arg) {
        ("quadratic", None) => LossSpec::Quadratic,
        ("huber", a) => {
            let d = match a {
                Some(v) => v
                    .parse()
                    .map_err(|_| Error::InvalidInput(format!("bad huber threshold {v:?}")))?,
                None => 1.345,
            };
            LossSpec::Huber(d)
        }
        ("expfamily", None | Some("gaussian")) => LossSpec::ExpFamily(BFamily::gaussian()),
        ("expfamily", Some("poisson")) => LossSpec::ExpFamily(BFamily::poisson()),
        ("expfamily", Some("bernoulli")) => LossSpec::ExpFamily(BFamily::bernoulli()),
        _ => return Err(Error::InvalidInput(format!("unknown loss {s:?}"))),
    };
    loss.validate()?;
    Ok(loss)
}

fn parse_ranks(s: &str) -> Result<Ranks> {
    let v: Vec<usize> = s
        .split(',')
        .map(|x| x.trim().parse::<usize>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::InvalidInput(format!("ranks must be d_s,d_m,d_theta; got {s:?}")))?;
    match v.as_slice() {
        [a, b, c] => Ok(Ranks::new(*a, *b, *c)),
        _ => Err(Error::InvalidInput(format!("ranks must have three entries; got {s:?}"))),
    }
}

fn tuning_config(a: &TuneArgs) -> TuningConfig {
    let mut t = TuningConfig {
        gamma: a.gamma,
        k: a.cap_k,
        ic_coef: a.ic_coef,
        ..TuningConfig::default()
    };
    if let Some(v) = a.alpha_m {
        t.fit.alpha_m = v;
    }
    if let Some(v) = a.alpha_theta {
        t.fit.alpha_theta = v;
    }
    t
}

fn mu_policy(a: &TuneArgs) -> MuPolicy {
    match (&a.mu, &a.mu_grid) {
        (Some(m), _) => MuPolicy::Fixed(*m),
        (None, Some(g)) => MuPolicy::Grid(g.clone()),
        (None, None) => MuPolicy::DefaultGrid,
    }
}

fn clip_bounds(c: &Option<Vec<f64>>) -> Option<(f64, f64)> {
    c.as_ref().map(|v| (v[0], v[1]))
}

fn emit(report: &Report, out: &Option<PathBuf>) -> Result<()> {
    let s = report.render();
    match out {
        Some(p) => std::fs::write(p, s)?,
        None => print!("{s}"),
    }
    Ok(())
}

fn ranks_kv(r: &mut Report, ranks: Ranks, d_hat: usize) {
    r.kv("d_s", ranks.d_s);
    r.kv("d_m", ranks.d_m);
    r.kv("d_theta", ranks.d_theta);
    r.kv("d_hat", d_hat);
}

fn cmd_fit(a: &FitArgs) -> Result<()> {
    let loss = parse_loss(&a.tune.loss)?;
    let train = load_triplets(&a.tune.input, None)?;
    let data = train.to_masked(None)?;
    let eta = match a.eta.as_str() {
        "auto" => EtaPolicy::Auto,
        v => EtaPolicy::Fixed(
            v.parse()
                .map_err(|_| Error::InvalidInput(format!("eta must be auto or a number; got {v:?}")))?,
        ),
    };
    let cfg = PipelineConfig {
        tuning: tuning_config(&a.tune),
        mu: mu_policy(&a.tune),
        eta,
        inference: a.se_out.is_some(),
    };
    let fit = fit_auto(&data, &loss, &cfg)?;
    let mut r = Report::default();
    r.line(format!(
        "fitted {}x{} with {} observed entries, loss {}",
        data.n1(),
        data.n2(),
        data.n_obs(),
        loss.name()
    ));
    r.line(format!(
        "ranks {} chosen at mu = {:.6} from {} grid points ({} skipped)",
        fit.model.ranks,
        fit.selection.mu,
        fit.selection.records.len() + fit.selection.skipped.len(),
        fit.selection.skipped.len()
    ));
    for rec in &fit.selection.records {
        r.line(format!(
            "  mu={:.6} ranks={} ic={:.4} q={:.4} k_f={}",
            rec.mu,
            rec.ranks.ranks(),
            rec.ic_value,
            rec.q_value,
            rec.k_f
        ));
    }
    for s in &fit.selection.skipped {
        r.line(format!("  mu={:.6} skipped: {}", s.mu, s.reason));
    }
    if let Some(w) = &fit.report.warning {
        r.line(format!("warning: {w}"));
    }
    r.kv("n1", data.n1());
    r.kv("n2", data.n2());
    r.kv("n_obs", data.n_obs());
    r.kv("loss", loss.name());
    r.kv("mu", fit.selection.mu);
    r.kv("gamma", cfg.tuning.gamma);
    r.kv("eta", fit.eta);
    ranks_kv(&mut r, fit.model.ranks, fit.selection.ranks.d_hat);
    if let Some(e) = &fit.eta_selection {
        r.kv("eta_method", format!("{:?}", e.method));
        if let Some(v) = e.sigma2_hat {
            r.kv("sigma2_hat", v);
        }
        if let Some(v) = e.sigma2_co {
            r.kv("sigma2_co", v);
        }
        if let Some(v) = e.phi_hat {
            r.kv("phi_hat", v);
        }
    }
    r.kv("objective", fit.report.final_objective);
    r.kv("iterations", fit.report.iterations);
    r.kv("converged", fit.report.converged);
    let mut sq = 0.0;
    for j in 0..data.n2() {
        for i in 0..data.n1() {
            if data.observed(i, j) {
                sq += (data.x[(i, j)] - fit.estimate.m[(i, j)]).powi(2);
            }
        }
    }
    r.kv("train_mse", sq / data.n_obs() as f64);
    if let Some(tp) = &a.test {
        let test = load_triplets(tp, None)?;
        let pred = match clip_bounds(&a.clip) {
            Some((lo, hi)) => predict_clipped(&fit.estimate.m, lo, hi)?,
            None => fit.estimate.m.clone(),
        };
        r.kv("test_n", test.len());
        r.kv("mspe", mspe(&test, &pred)?);
        r.kv("rank_bar", percentile_rank_bar(&test, &pred)?);
    }
    if let Some(p) = &a.matrix_out {
        write_dense_csv(p, &fit.estimate.m)?;
    }
    if let Some(p) = &a.se_out {
        match &fit.variances {
            Some(v) => {
                let se = sfmc_core::linalg::Mat::from_fn(data.n1(), data.n2(), |i, j| v.se_m(i, j));
                write_dense_csv(p, &se)?;
            }
            None => {
                return Err(Error::InvalidInput(format!(
                    "standard errors unavailable: {}",
                    fit.inference_note.clone().unwrap_or_default()
                )))
            }
        }
    }
    emit(&r, &a.tune.out)
}

fn cmd_ranks(a: &TuneArgs) -> Result<()> {
    let loss = parse_loss(&a.loss)?;
    let data = load_triplets(&a.input, None)?.to_masked(None)?;
    if data.n_obs() == 0 {
        return Err(Error::InvalidInput("no observed entries".into()));
    }
    let cfg = tuning_config(a);
    let grid = match mu_policy(a) {
        MuPolicy::DefaultGrid => default_mu_grid(&data, &cfg),
        MuPolicy::Grid(g) => g,
        MuPolicy::Fixed(m) => vec![m],
    };
    let sel = select_mu(&data, &loss, &grid, &cfg)?;
    let mut r = Report::default();
    for rec in &sel.records {
        r.line(format!("mu={:.6} ranks={} ic={:.4}", rec.mu, rec.ranks.ranks(), rec.ic_value));
    }
    for s in &sel.skipped {
        r.line(format!("mu={:.6} skipped: {}", s.mu, s.reason));
    }
    r.kv("mu", sel.mu);
    r.kv("threshold", sel.ranks.threshold);
    ranks_kv(&mut r, sel.ranks.ranks(), sel.ranks.d_hat);
    let sv = |v: &[f64]| v.iter().map(|x| format!("{x:.6}")).collect::<Vec<_>>().join(",");
    r.kv("sv_m", sv(&sel.ranks.sv_m));
    r.kv("sv_theta", sv(&sel.ranks.sv_theta));
    emit(&r, &a.out)
}

fn cmd_simulate(a: &SimArgs) -> Result<()> {
    let noise = match a.noise.as_str() {
        "normal" => Noise::Normal,
        s => match s.strip_prefix("t:").and_then(|d| d.parse::<f64>().ok()) {
            Some(df) => Noise::StudentT(df),
            None => return Err(Error::InvalidInput(format!("noise must be normal or t:<df>; got {s:?}"))),
        },
    };
    let design = SimDesign {
        noise,
        replicates: a.reps,
        seed: a.seed,
        ..SimDesign::new(a.n, parse_ranks(&a.ranks)?, a.m_p, a.sigma2)
    };
    let methods: Vec<Method> = a.methods.iter().map(|m| Method::parse(m)).collect::<Result<_>>()?;
    let cfg = PipelineConfig {
        tuning: TuningConfig {
            gamma: a.gamma,
            ic_coef: a.ic_coef,
            ..TuningConfig::default()
        },
        ..PipelineConfig::default()
    };
    let exp = run_experiment(&design, &methods, &LossSpec::Quadratic, &cfg)?;
    let mut r = Report::default();
    r.line("replicate\tmethod\tmse_m\tmse_theta\tratio1\tranks\teta\tseconds");
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_else(|| "NA".into());
    let mut rows = exp.rows.clone();
    rows.sort_by_key(|x| x.replicate);
    for row in &rows {
        r.line(format!(
            "{}\t{}\t{:.6}\t{}\t{}\t{}\t{}\t{:.2}",
            row.replicate,
            row.method.name(),
            row.mse_m,
            opt(row.mse_theta),
            opt(row.ratio1),
            row.ranks
                .map(|k| format!("{},{},{}", k.d_s, k.d_m, k.d_theta))
                .unwrap_or_else(|| "NA".into()),
            opt(row.eta),
            row.seconds
        ));
    }
    for f in &exp.failures {
        r.line(format!("failed replicate {} {}: {}", f.replicate, f.method.name(), f.message));
    }
    for s in &exp.summary {
        let m = s.method.name();
        r.kv(&format!("{m}.mse_m"), s.mse_m_mean);
        r.kv(&format!("{m}.mse_m_sd"), s.mse_m_sd);
        if let Some(v) = s.ratio1_mean {
            r.kv(&format!("{m}.ratio1"), v);
        }
        if let Some(v) = s.rank_recovery {
            r.kv(&format!("{m}.rank_recovery"), v);
        }
        r.kv(&format!("{m}.failures"), s.failures);
    }
    emit(&r, &a.out)
}

fn cmd_evaluate(a: &EvalArgs) -> Result<()> {
    let test = load_triplets(&a.test, None)?;
    let pred = read_dense_csv(&a.pred)?;
    let pred = match clip_bounds(&a.clip) {
        Some((lo, hi)) => predict_clipped(&pred, lo, hi)?,
        None => pred,
    };
    let mut r = Report::default();
    r.kv("test_n", test.len());
    r.kv("mspe", mspe(&test, &pred)?);
    r.kv("rank_bar", percentile_rank_bar(&test, &pred)?);
    emit(&r, &a.out)
}

fn one_line(s: &str) -> String {
    s.replace(['\n', '\r'], " ").replace('"', "'")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.cmd {
        Cmd::Fit(a) => cmd_fit(a),
        Cmd::Ranks(a) => cmd_ranks(a),
        Cmd::Simulate(a) => cmd_simulate(a),
        Cmd::Evaluate(a) => cmd_evaluate(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error code={} exit={} message=\"{}\"", e.code(), e.exit_code(), one_line(&e.to_string()));
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
