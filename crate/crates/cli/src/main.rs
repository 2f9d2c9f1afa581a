use std::fs::{self, File};
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use serde_json::json;

use gbart_core::data::{CsvTable, Scaling};
use gbart_core::harness::{link_comparison, run_experiment, ExperimentConfig, TruthSpec};
use gbart_core::leafprior::{default_lower_grid, default_upper_grid, tail_lower_certificate, tail_upper_certificate, TailCertificate};
use gbart_core::likelihoods::LikelihoodSpec;
use gbart_core::rng::{seeded, stream, Purpose};
use gbart_core::sampler::{run_chain, Model};
use gbart_core::stats::quantile;
use gbart_core::truth::step_complexity;
use gbart_core::{Dataset, Forest, LeafPrior, Matrix, SamplerConfig, TreePriorSpec};

#[derive(Parser)]
#[command(name = "gbart", version, about = "Generalized Bayesian additive regression trees")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a forest to a CSV file and write posterior draws as JSON lines.
    Fit(FitArgs),
    /// Posterior predictive summaries for new covariates.
    Predict(PredictArgs),
    /// Generate a synthetic dataset from a known truth.
    Synth(SynthArgs),
    /// Run a concentration-rate experiment from a config file.
    Experiment(ExperimentArgs),
    /// Print tail certificates for a leaf prior as CSV.
    VerifyPrior(VerifyArgs),
}

#[derive(clap::Args)]
struct LikelihoodArgs {
    /// gaussian, poisson or multinomial
    #[arg(long, default_value = "gaussian")]
    likelihood: String,
    /// softplus or exp (poisson only)
    #[arg(long)]
    link: Option<String>,
    #[arg(long)]
    sigma: Option<f64>,
    /// Number of classes (multinomial only)
    #[arg(long)]
    classes: Option<usize>,
}

impl LikelihoodArgs {
    fn spec(&self) -> Result<LikelihoodSpec> {
        Ok(LikelihoodSpec::from_parts(&self.likelihood, self.link.as_deref(), self.sigma, self.classes)?)
    }
}

#[derive(clap::Args)]
struct FitArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    lik: LikelihoodArgs,
    #[arg(long, default_value_t = 50)]
    trees: usize,
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 500)]
    burnin: usize,
    #[arg(long, default_value_t = 5)]
    thin: usize,
    #[arg(long, default_value_t = 1)]
    chains: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Chipman split-probability base
    #[arg(long, default_value_t = 0.25)]
    alpha: f64,
    #[arg(long)]
    max_depth: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct PredictArgs {
    #[arg(long)]
    draws: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum RegimeArg {
    Constant,
    Step,
    Monotone,
    Hoelder,
}

#[derive(clap::Args)]
struct SynthArgs {
    #[arg(long, value_enum)]
    regime: RegimeArg,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    q: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[command(flatten)]
    lik: LikelihoodArgs,
    /// Number of cells of a step truth
    #[arg(long, default_value_t = 4)]
    k0: usize,
    #[arg(long, default_value_t = 1.5)]
    amplitude: f64,
    /// Hölder exponent
    #[arg(long, default_value_t = 1.0)]
    nu: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(clap::Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Also run the softplus/exp link comparison (Poisson step configs).
    #[arg(long)]
    compare_links: bool,
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum DistArg {
    Gaussian,
    Laplace,
    Beta22,
}

#[derive(clap::Args)]
struct VerifyArgs {
    #[arg(long, value_enum)]
    dist: DistArg,
    #[arg(long, default_value_t = 1)]
    p: usize,
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
    #[arg(long, default_value_t = 1.0)]
    c1: f64,
    #[arg(long, default_value_t = 2.0)]
    c2: f64,
    #[arg(long, default_value_t = 1.0)]
    c3: f64,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match Cli::parse().command {
        Command::Fit(a) => fit(a),
        Command::Predict(a) => predict(a),
        Command::Synth(a) => synth(a),
        Command::Experiment(a) => experiment(a),
        Command::VerifyPrior(a) => verify_prior(a),
    }
}

/// Turns a single label column into one-hot rows for multinomial fits.
fn one_hot(y: &Matrix, classes: usize) -> Result<Matrix> {
    let mut out = Matrix::zeros(y.rows(), classes);
    for i in 0..y.rows() {
        let c = y.get(i, 0);
        ensure!(c >= 0.0 && c.fract() == 0.0 && (c as usize) < classes, "row {}: class label {c} outside 0..{classes}", i + 1);
        out.row_mut(i)[c as usize] = 1.0;
    }
    Ok(out)
}

fn fit(a: FitArgs) -> Result<()> {
    let table = CsvTable::read(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let (names, x, y) = table.split_response()?;
    let mut y = y.context("the data needs a response column `y` or columns `y1..yp`")?;
    let spec = a.lik.spec()?;
    let lik = spec.build()?;
    if let LikelihoodSpec::Multinomial { n_classes } = spec {
        if y.cols() == 1 {
            y = one_hot(&y, n_classes)?;
        }
    }
    let scaling = Scaling::fit(names, &x);
    let data = Dataset::new(scaling.apply(&x)?, y)?;
    let mut tree_prior = TreePriorSpec::chipman(a.alpha);
    if let Some(d) = a.max_depth {
        tree_prior = tree_prior.with_max_depth(d);
    }
    let model = Model {
        likelihood: lik.clone(),
        tree_prior,
        leaf_prior: LeafPrior::default_for(a.trees, lik.natural_dim()),
    };
    let config = SamplerConfig {
        n_iter: a.iters,
        burn_in: a.burnin,
        thin: a.thin,
        seed: a.seed,
        chains: a.chains,
        n_trees: a.trees,
        ..SamplerConfig::default()
    };
    info!("fitting {} trees to {} rows, {} covariates ({})", a.trees, data.n(), data.q(), lik.name());
    let draws = run_chain(&config, &model, &data)?;
    let mut w = BufWriter::new(File::create(&a.out).with_context(|| format!("creating {}", a.out.display()))?);
    let header = json!({
        "header": {
            "likelihood": spec,
            "scaling": scaling,
            "tree_prior": model.tree_prior,
            "leaf_prior": model.leaf_prior,
            "sampler": config,
            "n": data.n(),
        }
    });
    writeln!(w, "{header}")?;
    for (i, f) in draws.forests.iter().enumerate() {
        writeln!(w, "{}", json!({ "draw": i, "forest": f }))?;
    }
    w.flush()?;
    for (c, d) in draws.chains.iter().enumerate() {
        let acc = &d.acceptance;
        info!(
            "chain {c}: acceptance grow {:.3}, prune {:.3}, change {:.3}, leaf {:.3}",
            acc.grow.rate(),
            acc.prune.rate(),
            acc.change.rate(),
            acc.leaf.rate()
        );
    }
    info!("wrote {} draws to {}", draws.forests.len(), a.out.display());
    Ok(())
}

fn read_draws(path: &Path) -> Result<(LikelihoodSpec, Scaling, Vec<Forest>)> {
    let file = BufReader::new(File::open(path).with_context(|| format!("opening {}", path.display()))?);
    let mut lines = file.lines();
    let header: serde_json::Value = serde_json::from_str(&lines.next().context("empty draws file")??)?;
    let header = header.get("header").context("first line of a draws file must be the header record")?;
    let spec: LikelihoodSpec = serde_json::from_value(header["likelihood"].clone())?;
    let scaling: Scaling = serde_json::from_value(header["scaling"].clone())?;
    let mut forests = Vec::new();
    for (i, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut v: serde_json::Value = serde_json::from_str(&line).with_context(|| format!("draw line {}", i + 2))?;
        forests.push(serde_json::from_value(v["forest"].take()).with_context(|| format!("draw line {}", i + 2))?);
    }
    ensure!(!forests.is_empty(), "{} holds no draws", path.display());
    Ok((spec, scaling, forests))
}

fn predict(a: PredictArgs) -> Result<()> {
    let (spec, scaling, forests) = read_draws(&a.draws)?;
    let lik = spec.build()?;
    let table = CsvTable::read(&a.data).with_context(|| format!("reading {}", a.data.display()))?;
    let cols: Vec<usize> = scaling
        .columns
        .iter()
        .map(|c| table.headers.iter().position(|h| h == c).with_context(|| format!("covariate {c:?} missing from {}", a.data.display())))
        .collect::<Result<_>>()?;
    let rows: Vec<Vec<f64>> = table.rows.iter().map(|r| cols.iter().map(|&j| r[j]).collect()).collect();
    ensure!(!rows.is_empty(), "no rows to predict");
    let x = scaling.apply(&Matrix::from_rows(&rows)?)?;
    let d = lik.natural_dim();
    let p = lik.response_dim();
    let mut headers = Vec::new();
    for j in 0..d {
        let s = if d == 1 { String::new() } else { format!("_{}", j + 1) };
        headers.extend([format!("f_mean{s}"), format!("f_q025{s}"), format!("f_q975{s}")]);
    }
    for j in 0..p {
        headers.push(if p == 1 { "response_mean".into() } else { format!("response_mean_{}", j + 1) });
    }
    let mut out_rows = Vec::with_capacity(x.rows());
    for row in x.iter_rows() {
        let fs: Vec<Vec<f64>> = forests.iter().map(|f| f.evaluate(row)).collect();
        let mut out = Vec::with_capacity(headers.len());
        for j in 0..d {
            let v: Vec<f64> = fs.iter().map(|f| f[j]).collect();
            out.push(v.iter().sum::<f64>() / v.len() as f64);
            out.push(quantile(&v, 0.025));
            out.push(quantile(&v, 0.975));
        }
        let mut mean = vec![0.0; p];
        for f in &fs {
            for (m, v) in mean.iter_mut().zip(lik.mean_response(f)) {
                *m += v / fs.len() as f64;
            }
        }
        out.extend(mean);
        out_rows.push(out);
    }
    let table = CsvTable { headers, rows: out_rows };
    match &a.out {
        Some(path) => table.write(path)?,
        None => write_csv_stdout(&table)?,
    }
    Ok(())
}

fn write_csv_stdout(t: &CsvTable) -> Result<()> {
    let mut w = io::stdout().lock();
    writeln!(w, "{}", t.headers.join(","))?;
    for r in &t.rows {
        writeln!(w, "{}", r.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","))?;
    }
    Ok(())
}

fn sidecar_path(out: &Path) -> PathBuf {
    out.with_extension("truth.json")
}

fn synth(a: SynthArgs) -> Result<()> {
    ensure!(a.n > 0 && a.q > 0, "n and q must be positive");
    let spec = a.lik.spec()?;
    let lik = spec.build()?;
    let truth_spec = match a.regime {
        RegimeArg::Constant => TruthSpec::Constant { value: 0.0 },
        RegimeArg::Step => TruthSpec::Step {
            k0: a.k0,
            amplitude: a.amplitude,
        },
        RegimeArg::Monotone => TruthSpec::Monotone { amplitude: a.amplitude },
        RegimeArg::Hoelder => TruthSpec::Hoelder {
            nu: a.nu,
            bumps: 3,
            scale: a.amplitude,
        },
    };
    let truth = truth_spec.generate(a.q, a.n, &mut stream(a.seed, Purpose::Truth, 0, 0))?;
    let data = truth.synthesize(&lik, a.n, &mut stream(a.seed, Purpose::Data, a.n as u64, 0))?;
    let y = data.y.as_ref().expect("synthesized data has responses");
    let mut headers: Vec<String> = (1..=a.q).map(|j| format!("x{j}")).collect();
    if y.cols() == 1 {
        headers.push("y".into());
    } else {
        headers.extend((1..=y.cols()).map(|j| format!("y{j}")));
    }
    let rows = (0..data.n()).map(|i| data.x.row(i).iter().chain(y.row(i)).copied().collect()).collect();
    CsvTable { headers, rows }.write(&a.out).with_context(|| format!("writing {}", a.out.display()))?;
    let sidecar = json!({
        "truth": truth,
        "likelihood": spec,
        "seed": a.seed,
        "n": a.n,
        "q": a.q,
        "step_complexity": step_complexity(&truth).ok(),
        "hoelder_constant": truth.hoelder_constant(),
    });
    let path = sidecar_path(&a.out);
    fs::write(&path, serde_json::to_string_pretty(&sidecar)?).with_context(|| format!("writing {}", path.display()))?;
    info!("wrote {} rows to {} and truth metadata to {}", a.n, a.out.display(), path.display());
    Ok(())
}

fn experiment(a: ExperimentArgs) -> Result<()> {
    let cfg = ExperimentConfig::from_file(&a.config)?;
    if a.compare_links {
        let c = link_comparison(&cfg, a.bootstrap)?;
        c.softplus.write(a.out.join("softplus"))?;
        c.exp.write(a.out.join("exp"))?;
        let summary = json!({
            "slope_softplus": c.slope_softplus,
            "slope_exp": c.slope_exp,
            "difference": c.difference,
            "interval": [c.interval.0, c.interval.1],
            "directional_ok": c.directional_ok,
        });
        fs::write(a.out.join("link_comparison.json"), serde_json::to_string_pretty(&summary)?)?;
        println!("{summary}");
        if !c.directional_ok {
            log::warn!("softplus slope {:.3} exceeds exp slope {:.3} by more than the slack", c.slope_softplus, c.slope_exp);
        }
        return Ok(());
    }
    let report = run_experiment(&cfg)?;
    report.write(&a.out)?;
    for g in &report.grid {
        println!("n = {:>6}  median H_n = {:.4}  (se {:.4})  eps_n = {:.4}", g.n, g.h_median, g.se, g.eps_n);
    }
    match &report.slope {
        Some(s) => println!(
            "slope = {:.3} ± {:.3} (target {:.3}); median H_n nonincreasing: {}",
            s.slope, s.slope_se, report.target_exponent, report.monotone_shrinkage
        ),
        None => println!("slope: needs at least 4 sample sizes"),
    }
    Ok(())
}

fn certificate_rows(name: &str, c: &TailCertificate, out: &mut Vec<Vec<String>>) {
    for r in &c.rows {
        out.push(vec![
            name.to_string(),
            r.t.to_string(),
            r.probability.to_string(),
            r.envelope.to_string(),
            r.ratio.to_string(),
            c.passes.to_string(),
        ]);
    }
}

fn verify_prior(a: VerifyArgs) -> Result<()> {
    let prior = match a.dist {
        DistArg::Gaussian => LeafPrior::gaussian(a.scale, a.p)?,
        DistArg::Laplace => LeafPrior::laplace(a.scale, a.p)?,
        DistArg::Beta22 => {
            if a.p != 1 {
                bail!("beta22 is one-dimensional; use --p 1");
            }
            LeafPrior::beta(2.0, 2.0)?
        }
    };
    let mut rng = seeded(a.seed);
    let lower = tail_lower_certificate(&prior, a.c1, a.c2, &default_lower_grid(), &mut rng)?;
    let upper = tail_upper_certificate(&prior, a.c3, &default_upper_grid(), &mut rng)?;
    let mut rows = Vec::new();
    certificate_rows("lower", &lower, &mut rows);
    certificate_rows("upper", &upper, &mut rows);
    let mut w: Box<dyn Write> = match &a.out {
        Some(p) => Box::new(BufWriter::new(File::create(p).with_context(|| format!("creating {}", p.display()))?)),
        None => Box::new(io::stdout().lock()),
    };
    writeln!(w, "certificate,t,probability,envelope,ratio,passes")?;
    for r in rows {
        writeln!(w, "{}", r.join(","))?;
    }
    w.flush()?;
    info!(
        "lower certificate {} (implied constant {:.4}), upper certificate {} (implied constant {:.4})",
        if lower.passes { "passes" } else { "fails" },
        lower.implied_constant,
        if upper.passes { "passes" } else { "fails" },
        upper.implied_constant
    );
    Ok(())
}
