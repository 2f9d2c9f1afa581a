//! Concentration-rate experiments: synthesize data from a known truth over a
//! grid of sample sizes, fit, measure the posterior Hellinger distance to the
//! truth, and regress its median on `n` in log-log scale.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use log::{info, warn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{Dataset, Matrix};
use crate::error::{Error, Result};
use crate::forest::Forest;
use crate::leafprior::{LeafPrior, LeafPriorKind};
use crate::likelihoods::{LikelihoodSpec, LinkFunction};
use crate::metrics::hellinger_n_values;
use crate::rng::{stream, Purpose};
use crate::sampler::{run_chain, Acceptance, Model, MoveProbs, PosteriorDraws, SamplerConfig};
use crate::stats::{effective_sample_size, mean, median, ols, quantile, variance, LineFit};
use crate::tree::{TreePriorKind, TreePriorSpec};
use crate::truth::{check_assumption2, rate_exponent, step_complexity, theoretical_rate, Assumption2Check, Regime, TruthFunction};

/// How the ground truth is generated. One truth is drawn per experiment and
/// shared by every sample size and replicate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "lowercase")]
pub enum TruthSpec {
    Constant { value: f64 },
    Step { k0: usize, amplitude: f64 },
    Monotone { amplitude: f64 },
    Hoelder { nu: f64, bumps: usize, scale: f64 },
}

impl TruthSpec {
    pub fn name(&self) -> &'static str {
        match self {
            TruthSpec::Constant { .. } => "constant",
            TruthSpec::Step { .. } => "step",
            TruthSpec::Monotone { .. } => "monotone",
            TruthSpec::Hoelder { .. } => "hoelder",
        }
    }

    /// Draws the truth; Hölder truths are clipped at `√ln n_min`.
    pub fn generate<R: Rng + ?Sized>(&self, q: usize, n_min: usize, rng: &mut R) -> Result<TruthFunction> {
        Ok(match *self {
            TruthSpec::Constant { value } => TruthFunction::constant(q, value),
            TruthSpec::Step { k0, amplitude } => TruthFunction::random_step(q, k0, amplitude, rng)?,
            TruthSpec::Monotone { amplitude } => TruthFunction::random_monotone(q, amplitude, rng),
            TruthSpec::Hoelder { nu, bumps, scale } => {
                TruthFunction::random_hoelder(q, nu, bumps, scale, None, rng)?.with_sup_bound((n_min.max(3) as f64).ln().sqrt())
            }
        })
    }

    fn rate_regime(&self, truth: &TruthFunction, q: usize) -> Result<Regime> {
        Ok(match self {
            TruthSpec::Constant { .. } => Regime::Step { k: 1 },
            TruthSpec::Step { .. } => Regime::Step {
                k: step_complexity(truth)?,
            },
            TruthSpec::Monotone { .. } => Regime::Monotone { q },
            TruthSpec::Hoelder { nu, .. } => Regime::Hoelder { nu: *nu, q },
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub truth: TruthSpec,
    pub likelihood: LikelihoodSpec,
    pub n_grid: Vec<usize>,
    pub replicates: usize,
    pub q: usize,
    pub seed: u64,
    pub sampler: SamplerConfig,
    pub tree_prior: TreePriorSpec,
    /// `None` uses [`LeafPrior::default_for`].
    pub leaf_prior: Option<LeafPriorKind>,
    /// Draws count as exceeding when `H_n > c · ε_n`.
    pub exceedance_c: f64,
    /// Exponent on the log factor of the step-regime rate.
    pub gamma: f64,
    /// Parsimony threshold multiplier on `K_f0`.
    pub parsimony_c: f64,
    pub assumption2_s: usize,
    pub assumption2_m: f64,
    pub save_draws: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            name: "experiment".into(),
            truth: TruthSpec::Step { k0: 4, amplitude: 1.5 },
            likelihood: LikelihoodSpec::Gaussian { sigma: 1.0 },
            n_grid: vec![200, 500, 1000, 2000],
            replicates: 5,
            q: 2,
            seed: 42,
            sampler: SamplerConfig::default(),
            tree_prior: TreePriorSpec::default(),
            leaf_prior: None,
            exceedance_c: 2.0,
            gamma: 1.0,
            parsimony_c: 4.0,
            assumption2_s: 1,
            assumption2_m: 4.0,
            save_draws: true,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    v.parse::<T>().map_err(|e| Error::Parse(format!("{key} = {v:?}: {e}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v.to_ascii_lowercase().as_str() {
        "true" | "yes" | "1" | "on" => Ok(true),
        "false" | "no" | "0" | "off" => Ok(false),
        _ => Err(Error::Parse(format!("{key} = {v:?}: expected a boolean"))),
    }
}

fn fmt_list<T: std::fmt::Display>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

impl ExperimentConfig {
    /// Parses the `key = value` format; `#` starts a comment. Keys that are
    /// absent keep their defaults; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut kv: BTreeMap<String, String> = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected `key = value`, got {raw:?}", lineno + 1)))?;
            let k = k.trim().to_ascii_lowercase();
            if kv.insert(k.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Parse(format!("line {}: duplicate key {k:?}", lineno + 1)));
            }
        }
        let mut take = |k: &str| kv.remove(k);
        let mut c = ExperimentConfig::default();
        if let Some(v) = take("name") {
            c.name = v;
        }
        if let Some(v) = take("q") {
            c.q = parse_value("q", &v)?;
        }
        if let Some(v) = take("seed") {
            c.seed = parse_value("seed", &v)?;
        }
        if let Some(v) = take("replicates") {
            c.replicates = parse_value("replicates", &v)?;
        }
        if let Some(v) = take("n_grid") {
            c.n_grid = v
                .split(',')
                .map(|s| parse_value("n_grid", s.trim()))
                .collect::<Result<Vec<usize>>>()?;
        }
        // truth
        let regime = take("regime").unwrap_or_else(|| "step".into());
        let num = |kv: &mut dyn FnMut(&str) -> Option<String>, k: &str, d: f64| -> Result<f64> {
            kv(k).map_or(Ok(d), |v| parse_value(k, &v))
        };
        let int = |kv: &mut dyn FnMut(&str) -> Option<String>, k: &str, d: usize| -> Result<usize> {
            kv(k).map_or(Ok(d), |v| parse_value(k, &v))
        };
        c.truth = match regime.to_ascii_lowercase().as_str() {
            "constant" => TruthSpec::Constant {
                value: num(&mut take, "truth_value", 0.0)?,
            },
            "step" => TruthSpec::Step {
                k0: int(&mut take, "k0", 4)?,
                amplitude: num(&mut take, "amplitude", 1.5)?,
            },
            "monotone" => TruthSpec::Monotone {
                amplitude: num(&mut take, "amplitude", 1.5)?,
            },
            "hoelder" | "holder" => TruthSpec::Hoelder {
                nu: num(&mut take, "nu", 1.0)?,
                bumps: int(&mut take, "bumps", 3)?,
                scale: num(&mut take, "bump_scale", 1.0)?,
            },
            other => return Err(Error::Parse(format!("regime = {other:?}: expected constant, step, monotone or hoelder"))),
        };
        // likelihood
        let family = take("likelihood").unwrap_or_else(|| "gaussian".into());
        let link = take("link");
        let sigma = take("sigma").map(|v| parse_value::<f64>("sigma", &v)).transpose()?;
        let classes = take("classes").map(|v| parse_value::<usize>("classes", &v)).transpose()?;
        c.likelihood = LikelihoodSpec::from_parts(&family, link.as_deref(), sigma, classes)?;
        // sampler
        let s = &mut c.sampler;
        s.n_trees = int(&mut take, "trees", s.n_trees)?;
        s.n_iter = int(&mut take, "iters", s.n_iter)?;
        s.burn_in = int(&mut take, "burnin", s.burn_in)?;
        s.thin = int(&mut take, "thin", s.thin)?;
        s.chains = int(&mut take, "chains", s.chains)?;
        s.leaf_proposal_scale = num(&mut take, "leaf_proposal_scale", s.leaf_proposal_scale)?;
        if let Some(v) = take("adapt") {
            s.adapt = parse_bool("adapt", &v)?;
        }
        if let Some(v) = take("structure_moves") {
            s.structure_moves = parse_bool("structure_moves", &v)?;
        }
        let d = MoveProbs::default();
        s.move_probs = MoveProbs {
            grow: num(&mut take, "move_grow", d.grow)?,
            prune: num(&mut take, "move_prune", d.prune)?,
            change: num(&mut take, "move_change", d.change)?,
        };
        // priors
        let prior = take("tree_prior").unwrap_or_else(|| "chipman".into());
        let mut tp = match prior.to_ascii_lowercase().as_str() {
            "chipman" => TreePriorSpec::chipman(num(&mut take, "alpha", 0.25)?),
            "denison" => TreePriorSpec::denison(num(&mut take, "lambda", 1.0)?),
            other => return Err(Error::Parse(format!("tree_prior = {other:?}: expected chipman or denison"))),
        };
        tp = tp.with_validity_constant(int(&mut take, "validity_constant", tp.validity_constant)?);
        if let Some(v) = take("max_depth") {
            tp.max_depth = if v.eq_ignore_ascii_case("none") { None } else { Some(parse_value("max_depth", &v)?) };
        }
        c.tree_prior = tp;
        let leaf = take("leaf_prior").unwrap_or_else(|| "default".into());
        let scale = take("leaf_scale").map(|v| parse_value::<f64>("leaf_scale", &v)).transpose()?;
        c.leaf_prior = match leaf.to_ascii_lowercase().as_str() {
            "default" => None,
            "gaussian" => Some(LeafPriorKind::Gaussian {
                scale: scale.ok_or_else(|| Error::Parse("leaf_prior = gaussian needs leaf_scale".into()))?,
            }),
            "laplace" => Some(LeafPriorKind::Laplace {
                scale: scale.ok_or_else(|| Error::Parse("leaf_prior = laplace needs leaf_scale".into()))?,
            }),
            other => return Err(Error::Parse(format!("leaf_prior = {other:?}: expected default, gaussian or laplace"))),
        };
        c.exceedance_c = num(&mut take, "exceedance_c", c.exceedance_c)?;
        c.gamma = num(&mut take, "gamma", c.gamma)?;
        c.parsimony_c = num(&mut take, "parsimony_c", c.parsimony_c)?;
        c.assumption2_s = int(&mut take, "assumption2_s", c.assumption2_s)?;
        c.assumption2_m = num(&mut take, "assumption2_m", c.assumption2_m)?;
        if let Some(v) = take("save_draws") {
            c.save_draws = parse_bool("save_draws", &v)?;
        }
        if let Some(k) = kv.keys().next() {
            return Err(Error::Parse(format!("unknown key {k:?}")));
        }
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::from(e).context(format!("reading {}", path.display())))?;
        Self::parse(&text)
    }

    /// Canonical text form with every key spelled out; parsing it yields an
    /// identical config.
    pub fn to_config_text(&self) -> String {
        let mut lines = vec![format!("name = {}", self.name)];
        match &self.truth {
            TruthSpec::Constant { value } => {
                lines.push("regime = constant".into());
                lines.push(format!("truth_value = {value}"));
            }
            TruthSpec::Step { k0, amplitude } => {
                lines.push("regime = step".into());
                lines.push(format!("k0 = {k0}"));
                lines.push(format!("amplitude = {amplitude}"));
            }
            TruthSpec::Monotone { amplitude } => {
                lines.push("regime = monotone".into());
                lines.push(format!("amplitude = {amplitude}"));
            }
            TruthSpec::Hoelder { nu, bumps, scale } => {
                lines.push("regime = hoelder".into());
                lines.push(format!("nu = {nu}"));
                lines.push(format!("bumps = {bumps}"));
                lines.push(format!("bump_scale = {scale}"));
            }
        }
        match &self.likelihood {
            LikelihoodSpec::Gaussian { sigma } => {
                lines.push("likelihood = gaussian".into());
                lines.push(format!("sigma = {sigma}"));
            }
            LikelihoodSpec::Poisson { link } => {
                lines.push("likelihood = poisson".into());
                lines.push(format!("link = {link}"));
            }
            LikelihoodSpec::Multinomial { n_classes } => {
                lines.push("likelihood = multinomial".into());
                lines.push(format!("classes = {n_classes}"));
            }
        }
        lines.push(format!("n_grid = {}", fmt_list(&self.n_grid)));
        lines.push(format!("replicates = {}", self.replicates));
        lines.push(format!("q = {}", self.q));
        lines.push(format!("seed = {}", self.seed));
        let s = &self.sampler;
        lines.push(format!("trees = {}", s.n_trees));
        lines.push(format!("iters = {}", s.n_iter));
        lines.push(format!("burnin = {}", s.burn_in));
        lines.push(format!("thin = {}", s.thin));
        lines.push(format!("chains = {}", s.chains));
        lines.push(format!("leaf_proposal_scale = {}", s.leaf_proposal_scale));
        lines.push(format!("adapt = {}", s.adapt));
        lines.push(format!("structure_moves = {}", s.structure_moves));
        lines.push(format!("move_grow = {}", s.move_probs.grow));
        lines.push(format!("move_prune = {}", s.move_probs.prune));
        lines.push(format!("move_change = {}", s.move_probs.change));
        match self.tree_prior.kind {
            TreePriorKind::Chipman { alpha } => {
                lines.push("tree_prior = chipman".into());
                lines.push(format!("alpha = {alpha}"));
            }
            TreePriorKind::Denison { lambda } => {
                lines.push("tree_prior = denison".into());
                lines.push(format!("lambda = {lambda}"));
            }
        }
        lines.push(format!("validity_constant = {}", self.tree_prior.validity_constant));
        lines.push(format!(
            "max_depth = {}",
            self.tree_prior.max_depth.map_or("none".to_string(), |d| d.to_string())
        ));
        match self.leaf_prior {
            None => lines.push("leaf_prior = default".into()),
            Some(LeafPriorKind::Gaussian { scale }) => {
                lines.push("leaf_prior = gaussian".into());
                lines.push(format!("leaf_scale = {scale}"));
            }
            Some(LeafPriorKind::Laplace { scale }) => {
                lines.push("leaf_prior = laplace".into());
                lines.push(format!("leaf_scale = {scale}"));
            }
            Some(other) => lines.push(format!("# leaf prior {other:?} has no config form")),
        }
        lines.push(format!("exceedance_c = {}", self.exceedance_c));
        lines.push(format!("gamma = {}", self.gamma));
        lines.push(format!("parsimony_c = {}", self.parsimony_c));
        lines.push(format!("assumption2_s = {}", self.assumption2_s));
        lines.push(format!("assumption2_m = {}", self.assumption2_m));
        lines.push(format!("save_draws = {}", self.save_draws));
        lines.join("\n") + "\n"
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_grid.is_empty() || self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::invalid(format!("n_grid must be nonempty and strictly increasing, got {:?}", self.n_grid)));
        }
        if self.n_grid[0] < 2 {
            return Err(Error::invalid("sample sizes must be at least 2"));
        }
        if self.replicates == 0 {
            return Err(Error::invalid("replicates must be at least 1"));
        }
        if self.q == 0 {
            return Err(Error::invalid("q must be at least 1"));
        }
        if !(self.exceedance_c > 0.0 && self.parsimony_c > 0.0 && self.assumption2_m > 0.0) {
            return Err(Error::invalid("exceedance_c, parsimony_c and assumption2_m must be positive"));
        }
        self.sampler.validate()?;
        self.tree_prior.validate()?;
        let lik = self.likelihood.build()?;
        if lik.natural_dim() != 1 {
            return Err(Error::Unsupported("experiments use scalar truths; multinomial needs classes = 2".into()));
        }
        self.leaf_prior_for(1)?;
        Ok(())
    }

    fn leaf_prior_for(&self, dim: usize) -> Result<LeafPrior> {
        match self.leaf_prior {
            None => Ok(LeafPrior::default_for(self.sampler.n_trees, dim)),
            Some(kind) => LeafPrior::new(kind, dim),
        }
    }

    /// SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_config_text().as_bytes()))
    }
}

/// Git-style content hash: SHA-256 of `blob <len>\0<bytes>`.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex::encode(h.finalize())
}

/// One fitted dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub n: usize,
    pub replicate: usize,
    pub eps_n: f64,
    pub h_mean: f64,
    pub h_median: f64,
    /// Monte Carlo standard error of `h_median`.
    pub h_median_se: f64,
    pub exceed_frac: f64,
    pub leaves_mean: f64,
    pub leaves_median: f64,
    pub leaves_q05: f64,
    pub leaves_q95: f64,
    pub cells_mean: f64,
    /// Fraction of draws with more than `parsimony_c · K_f0` refined cells
    /// (step truths only; empty otherwise).
    pub parsimony_exceed: Option<f64>,
    pub acc_grow: f64,
    pub acc_prune: f64,
    pub acc_change: f64,
    pub acc_leaf: f64,
    pub a2_lhs: f64,
    pub a2_rhs: f64,
    pub a2_pass: bool,
    pub draws: usize,
}

/// Per sample size aggregate over replicates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub n: usize,
    /// Median over replicates of the per-dataset posterior median `H_n`.
    pub h_median: f64,
    pub se: f64,
    pub eps_n: f64,
}

/// Raw per-dataset output kept in memory.
#[derive(Clone, Debug)]
pub struct RunRecord {
    pub n: usize,
    pub replicate: usize,
    pub h_draws: Vec<f64>,
    pub total_leaves: Vec<usize>,
    pub refined_cells: Vec<usize>,
    pub acceptance: Acceptance,
    pub assumption2: Assumption2Check,
    pub draws: Option<PosteriorDraws>,
}

#[derive(Clone, Debug)]
pub struct ExperimentReport {
    pub config: ExperimentConfig,
    pub truth: TruthFunction,
    pub regime: Regime,
    /// Leaf complexity of a step truth.
    pub k_f0: Option<usize>,
    pub rows: Vec<ReportRow>,
    pub grid: Vec<GridPoint>,
    /// Constant `c` in `ε_n = c · rate(n)`, fitted at the largest `n`.
    pub eps_constant: f64,
    pub target_exponent: f64,
    pub slope: Option<LineFit>,
    /// Regression over every (n, replicate) row instead of the aggregate.
    pub pooled_slope: Option<LineFit>,
    /// Aggregate median `H_n` nonincreasing in `n` within one standard error.
    pub monotone_shrinkage: bool,
    pub runs: Vec<RunRecord>,
}

pub const MIN_SLOPE_POINTS: usize = 4;

/// Log-log regression of `y` on `n`; needs at least four sample sizes.
pub fn fit_rate_slope(ns: &[usize], y: &[f64]) -> Result<LineFit> {
    let mut distinct = ns.to_vec();
    distinct.dedup();
    if distinct.len() < MIN_SLOPE_POINTS {
        return Err(Error::invalid(format!(
            "slope regression needs at least {MIN_SLOPE_POINTS} distinct sample sizes, got {}",
            distinct.len()
        )));
    }
    if y.iter().any(|v| !(*v > 0.0)) {
        return Err(Error::invalid("slope regression needs positive responses"));
    }
    let lx: Vec<f64> = ns.iter().map(|&n| (n as f64).ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    Ok(ols(&lx, &ly))
}

fn median_se(xs: &[f64]) -> f64 {
    if xs.len() < 2 {
        return 0.0;
    }
    let ess = effective_sample_size(xs).max(1.0);
    (std::f64::consts::PI / 2.0).sqrt() * variance(xs).sqrt() / ess.sqrt()
}

/// Fraction of draws whose refined-cell count exceeds `c · k_f0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParsimonyReport {
    pub exceedance: f64,
    pub mean_cells: f64,
    pub threshold: f64,
}

pub fn parsimony_report(draws: &PosteriorDraws, q: usize, k_f0: usize, c: f64) -> ParsimonyReport {
    let counts: Vec<usize> = draws.forests.iter().map(|f| f.refined_cell_count(q)).collect();
    parsimony_from_counts(&counts, k_f0, c)
}

fn parsimony_from_counts(counts: &[usize], k_f0: usize, c: f64) -> ParsimonyReport {
    let threshold = c * k_f0 as f64;
    let m = counts.len().max(1) as f64;
    ParsimonyReport {
        exceedance: counts.iter().filter(|&&k| k as f64 > threshold).count() as f64 / m,
        mean_cells: counts.iter().sum::<usize>() as f64 / m,
        threshold,
    }
}

/// Design points and responses for sample size `n`, replicate `rep`.
pub fn experiment_dataset(cfg: &ExperimentConfig, truth: &TruthFunction, n: usize, rep: usize) -> Result<Dataset> {
    let lik = cfg.likelihood.build()?;
    let mut rng = stream(cfg.seed, Purpose::Data, n as u64, rep as u64);
    truth.synthesize(&lik, n, &mut rng)
}

pub fn experiment_truth(cfg: &ExperimentConfig) -> Result<TruthFunction> {
    let mut rng = stream(cfg.seed, Purpose::Truth, 0, 0);
    cfg.truth.generate(cfg.q, cfg.n_grid[0], &mut rng)
}

fn fit_one(cfg: &ExperimentConfig, truth: &TruthFunction, k_f0: Option<usize>, n: usize, rep: usize) -> Result<RunRecord> {
    let lik = cfg.likelihood.build()?;
    let data = experiment_dataset(cfg, truth, n, rep)?;
    let assumption2 = check_assumption2(&data.x, cfg.assumption2_s, cfg.assumption2_m)?;
    let model = Model {
        likelihood: lik.clone(),
        tree_prior: cfg.tree_prior,
        leaf_prior: cfg.leaf_prior_for(lik.natural_dim())?,
    };
    let mut sampler = cfg.sampler.clone();
    sampler.seed = stream(cfg.seed, Purpose::Chain, n as u64, rep as u64).random();
    let draws = run_chain(&sampler, &model, &data)?;
    let f0 = Matrix::from_vec(n, 1, data.x.iter_rows().map(|r| truth.evaluate(r)).collect())?;
    let h_draws = draws
        .forests
        .iter()
        .map(|f: &Forest| hellinger_n_values(&lik, &f.evaluate_matrix(&data.x), &f0))
        .collect::<Result<Vec<f64>>>()?;
    let total_leaves = draws.forests.iter().map(Forest::total_leaves).collect();
    let refined_cells = if k_f0.is_some() {
        draws.forests.iter().map(|f| f.refined_cell_count(cfg.q)).collect()
    } else {
        Vec::new()
    };
    let mut acceptance = Acceptance::default();
    for c in &draws.chains {
        for (sum, part) in [
            (&mut acceptance.grow, c.acceptance.grow),
            (&mut acceptance.prune, c.acceptance.prune),
            (&mut acceptance.change, c.acceptance.change),
            (&mut acceptance.leaf, c.acceptance.leaf),
        ] {
            sum.proposed += part.proposed;
            sum.accepted += part.accepted;
        }
    }
    info!("{}: n = {n}, replicate {rep}: median H_n = {:.4}", cfg.name, median(&h_draws));
    Ok(RunRecord {
        n,
        replicate: rep,
        h_draws,
        total_leaves,
        refined_cells,
        acceptance,
        assumption2,
        draws: cfg.save_draws.then_some(draws),
    })
}

/// Runs every (n, replicate) fit in parallel and aggregates.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    cfg.validate()?;
    let truth = experiment_truth(cfg)?;
    let regime = cfg.truth.rate_regime(&truth, cfg.q)?;
    let k_f0 = match cfg.truth {
        TruthSpec::Step { .. } | TruthSpec::Constant { .. } => Some(step_complexity(&truth)?),
        _ => None,
    };
    let jobs: Vec<(usize, usize)> = cfg.n_grid.iter().flat_map(|&n| (0..cfg.replicates).map(move |r| (n, r))).collect();
    let runs = jobs
        .par_iter()
        .map(|&(n, r)| fit_one(cfg, &truth, k_f0, n, r).map_err(|e| e.context(format!("{}: n = {n}, replicate {r}", cfg.name))))
        .collect::<Result<Vec<_>>>()?;
    assemble(cfg.clone(), truth, regime, k_f0, runs)
}

fn assemble(cfg: ExperimentConfig, truth: TruthFunction, regime: Regime, k_f0: Option<usize>, runs: Vec<RunRecord>) -> Result<ExperimentReport> {
    let rate = |n: usize| theoretical_rate(regime, n, cfg.gamma);
    let row_medians: Vec<f64> = runs.iter().map(|r| median(&r.h_draws)).collect();
    let mut grid = Vec::new();
    for &n in &cfg.n_grid {
        let (meds, ses): (Vec<f64>, Vec<f64>) = runs
            .iter()
            .zip(&row_medians)
            .filter(|(r, _)| r.n == n)
            .map(|(r, &m)| (m, median_se(&r.h_draws)))
            .unzip();
        let reps = meds.len() as f64;
        let within = mean(&ses.iter().map(|s| s * s).collect::<Vec<_>>());
        let between = if meds.len() > 1 { variance(&meds) } else { 0.0 };
        grid.push(GridPoint {
            n,
            h_median: median(&meds),
            se: (std::f64::consts::PI / 2.0).sqrt() * ((between + within) / reps).sqrt(),
            eps_n: 0.0,
        });
    }
    let last = grid.last().expect("nonempty grid");
    let eps_constant = last.h_median / rate(last.n)?;
    for g in &mut grid {
        g.eps_n = eps_constant * rate(g.n)?;
    }
    let monotone_shrinkage = grid
        .windows(2)
        .all(|w| w[1].h_median <= w[0].h_median + (w[0].se * w[0].se + w[1].se * w[1].se).sqrt());
    let mut rows = Vec::with_capacity(runs.len());
    for r in &runs {
        let eps_n = eps_constant * rate(r.n)?;
        let m = r.h_draws.len().max(1) as f64;
        let leaves: Vec<f64> = r.total_leaves.iter().map(|&k| k as f64).collect();
        let cells: Vec<f64> = r.refined_cells.iter().map(|&k| k as f64).collect();
        rows.push(ReportRow {
            n: r.n,
            replicate: r.replicate,
            eps_n,
            h_mean: mean(&r.h_draws),
            h_median: median(&r.h_draws),
            h_median_se: median_se(&r.h_draws),
            exceed_frac: r.h_draws.iter().filter(|&&h| h > cfg.exceedance_c * eps_n).count() as f64 / m,
            leaves_mean: mean(&leaves),
            leaves_median: median(&leaves),
            leaves_q05: quantile(&leaves, 0.05),
            leaves_q95: quantile(&leaves, 0.95),
            cells_mean: if cells.is_empty() { f64::NAN } else { mean(&cells) },
            parsimony_exceed: k_f0.map(|k| parsimony_from_counts(&r.refined_cells, k, cfg.parsimony_c).exceedance),
            acc_grow: r.acceptance.grow.rate(),
            acc_prune: r.acceptance.prune.rate(),
            acc_change: r.acceptance.change.rate(),
            acc_leaf: r.acceptance.leaf.rate(),
            a2_lhs: r.assumption2.lhs,
            a2_rhs: r.assumption2.rhs,
            a2_pass: r.assumption2.passes,
            draws: r.h_draws.len(),
        });
    }
    let ns: Vec<usize> = grid.iter().map(|g| g.n).collect();
    let slope = fit_rate_slope(&ns, &grid.iter().map(|g| g.h_median).collect::<Vec<_>>()).ok();
    let pooled_slope = fit_rate_slope(&rows.iter().map(|r| r.n).collect::<Vec<_>>(), &rows.iter().map(|r| r.h_median).collect::<Vec<_>>()).ok();
    if slope.is_none() {
        warn!("{}: fewer than {MIN_SLOPE_POINTS} sample sizes, no rate slope", cfg.name);
    }
    Ok(ExperimentReport {
        target_exponent: rate_exponent(regime),
        config: cfg,
        truth,
        regime,
        k_f0,
        rows,
        grid,
        eps_constant,
        slope,
        pooled_slope,
        monotone_shrinkage,
        runs,
    })
}

#[derive(Serialize)]
struct SlopeRow<'a> {
    kind: &'a str,
    target: f64,
    slope: f64,
    slope_se: f64,
    intercept: f64,
    n_points: usize,
    eps_constant: f64,
    monotone_shrinkage: bool,
}

impl ExperimentReport {
    /// The aggregate slope, or the regression error when there are too few
    /// sample sizes.
    pub fn rate_slope(&self) -> Result<LineFit> {
        fit_rate_slope(&self.grid.iter().map(|g| g.n).collect::<Vec<_>>(), &self.grid.iter().map(|g| g.h_median).collect::<Vec<_>>())
    }

    pub fn report_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(r)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn slopes_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for (kind, fit) in [("median", self.slope), ("pooled", self.pooled_slope)] {
            let fit = fit.unwrap_or(LineFit {
                slope: f64::NAN,
                intercept: f64::NAN,
                slope_se: f64::NAN,
                n_points: 0,
            });
            w.serialize(SlopeRow {
                kind,
                target: self.target_exponent,
                slope: fit.slope,
                slope_se: fit.slope_se,
                intercept: fit.intercept,
                n_points: fit.n_points,
                eps_constant: self.eps_constant,
                monotone_shrinkage: self.monotone_shrinkage,
            })?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    pub fn grid_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for g in &self.grid {
            w.serialize(g)?;
        }
        w.into_inner().map_err(|e| Error::Io(e.into_error()))
    }

    /// Writes `report.csv`, `slopes.csv`, `grid.csv`, `truth.json`,
    /// `config.conf`, `draws/*.jsonl` and `manifest.json` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let config_text = self.config.to_config_text();
        let mut files: BTreeMap<String, Vec<u8>> = BTreeMap::new();
        files.insert("config.conf".into(), config_text.clone().into_bytes());
        files.insert("report.csv".into(), self.report_csv()?);
        files.insert("slopes.csv".into(), self.slopes_csv()?);
        files.insert("grid.csv".into(), self.grid_csv()?);
        files.insert("truth.json".into(), serde_json::to_vec_pretty(&self.truth)?);
        for run in &self.runs {
            if let Some(d) = &run.draws {
                let mut buf = Vec::new();
                for f in &d.forests {
                    serde_json::to_writer(&mut buf, f)?;
                    buf.push(b'\n');
                }
                files.insert(format!("draws/n{}_rep{}.jsonl", run.n, run.replicate), buf);
            }
        }
        if files.keys().any(|k| k.starts_with("draws/")) {
            fs::create_dir_all(dir.join("draws"))?;
        }
        let mut hashes = BTreeMap::new();
        for (name, bytes) in &files {
            fs::write(dir.join(name), bytes)?;
            hashes.insert(name.clone(), blob_hash(bytes));
        }
        let manifest = serde_json::json!({
            "name": self.config.name,
            "config_sha256": self.config.hash(),
            "inputs": { "config.conf": blob_hash(config_text.as_bytes()) },
            "outputs": hashes,
            "generator": format!("gbart-core {}", env!("CARGO_PKG_VERSION")),
        });
        fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct LinkComparison {
    pub softplus: ExperimentReport,
    pub exp: ExperimentReport,
    pub slope_softplus: f64,
    pub slope_exp: f64,
    /// `slope_softplus - slope_exp`.
    pub difference: f64,
    /// 95% percentile bootstrap interval for the difference.
    pub interval: (f64, f64),
    /// Whether `slope_softplus ≤ slope_exp + 0.05`.
    pub directional_ok: bool,
}

pub const LINK_SLACK: f64 = 0.05;

/// Runs the same Poisson step-truth experiment under the softplus and exp
/// links. The bootstrap resamples replicates within each sample size, with
/// the same indices for both links since replicate `r` shares its design.
pub fn link_comparison(template: &ExperimentConfig, bootstrap: usize) -> Result<LinkComparison> {
    if !matches!(template.likelihood, LikelihoodSpec::Poisson { .. }) || !matches!(template.truth, TruthSpec::Step { .. }) {
        return Err(Error::invalid("link comparison needs a Poisson likelihood and a step truth"));
    }
    let run = |link: LinkFunction| -> Result<ExperimentReport> {
        let mut cfg = template.clone();
        cfg.likelihood = LikelihoodSpec::Poisson { link };
        cfg.name = format!("{}-{link}", template.name);
        run_experiment(&cfg)
    };
    let softplus = run(LinkFunction::Softplus)?;
    let exp = run(LinkFunction::Exp)?;
    let slope_softplus = softplus.rate_slope()?.slope;
    let slope_exp = exp.rate_slope()?.slope;
    let ns = &template.n_grid;
    let reps = template.replicates;
    let medians = |rep: &ExperimentReport| -> Vec<Vec<f64>> {
        ns.iter()
            .map(|&n| rep.rows.iter().filter(|r| r.n == n).map(|r| r.h_median).collect())
            .collect()
    };
    let (ms, me) = (medians(&softplus), medians(&exp));
    let mut rng = stream(template.seed, Purpose::Bootstrap, 0, 0);
    let mut diffs = Vec::with_capacity(bootstrap);
    for _ in 0..bootstrap {
        let mut ys = Vec::with_capacity(ns.len());
        let mut ye = Vec::with_capacity(ns.len());
        for i in 0..ns.len() {
            let idx: Vec<usize> = (0..reps).map(|_| rng.random_range(0..reps)).collect();
            ys.push(median(&idx.iter().map(|&j| ms[i][j]).collect::<Vec<_>>()));
            ye.push(median(&idx.iter().map(|&j| me[i][j]).collect::<Vec<_>>()));
        }
        if let (Ok(a), Ok(b)) = (fit_rate_slope(ns, &ys), fit_rate_slope(ns, &ye)) {
            diffs.push(a.slope - b.slope);
        }
    }
    let interval = if diffs.is_empty() {
        (f64::NAN, f64::NAN)
    } else {
        (quantile(&diffs, 0.025), quantile(&diffs, 0.975))
    };
    Ok(LinkComparison {
        difference: slope_softplus - slope_exp,
        directional_ok: slope_softplus <= slope_exp + LINK_SLACK,
        slope_softplus,
        slope_exp,
        interval,
        softplus,
        exp,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(regime: &str) -> ExperimentConfig {
        ExperimentConfig::parse(&format!(
            "regime = {regime}\nq = 1\nn_grid = 30, 60\nreplicates = 2\ntrees = 2\niters = 200\nburnin = 100\nthin = 2\nseed = 9\n"
        ))
        .unwrap()
    }

    #[test]
    fn config_round_trips() {
        let text = "# comment\nname = demo\nregime = hoelder  # trailing\nnu = 0.5\nlikelihood = poisson\nlink = exp\nn_grid = 100, 200, 400, 800\nmax_depth = 3\nleaf_prior = laplace\nleaf_scale = 0.3\n";
        let c = ExperimentConfig::parse(text).unwrap();
        assert_eq!(c.truth, TruthSpec::Hoelder { nu: 0.5, bumps: 3, scale: 1.0 });
        assert_eq!(c.likelihood, LikelihoodSpec::Poisson { link: LinkFunction::Exp });
        assert_eq!(c.tree_prior.max_depth, Some(3));
        let again = ExperimentConfig::parse(&c.to_config_text()).unwrap();
        assert_eq!(c, again);
        assert_eq!(c.hash(), again.hash());
    }

    #[test]
    fn config_errors() {
        assert!(ExperimentConfig::parse("bogus = 1").is_err());
        assert!(ExperimentConfig::parse("n_grid = 500, 200").is_err());
        assert!(ExperimentConfig::parse("replicates = 0").is_err());
        assert!(ExperimentConfig::parse("q = 1\nq = 2").is_err());
        assert!(ExperimentConfig::parse("no equals sign").is_err());
        assert!(ExperimentConfig::parse("leaf_prior = gaussian").is_err());
    }

    #[test]
    fn blob_hash_matches_git_format() {
        // sha256 of "blob 0\0"
        assert_eq!(blob_hash(b""), "473a0f4c3be8a93681a267e3b1e9a7dcda1185436fe141f7749120a303721813");
    }

    #[test]
    fn slope_needs_four_points() {
        assert!(fit_rate_slope(&[100, 200, 400], &[0.3, 0.2, 0.1]).is_err());
        let ns = [100, 200, 400, 800];
        let y: Vec<f64> = ns.iter().map(|&n| 3.0 * (n as f64).powf(-0.5)).collect();
        let fit = fit_rate_slope(&ns, &y).unwrap();
        assert!((fit.slope + 0.5).abs() < 1e-12);
    }

    #[test]
    fn small_experiment_is_reproducible() {
        let cfg = small("step");
        let a = run_experiment(&cfg).unwrap();
        let b = run_experiment(&cfg).unwrap();
        assert_eq!(a.report_csv().unwrap(), b.report_csv().unwrap());
        assert_eq!(a.rows.len(), 4);
        assert!(a.slope.is_none() && a.rate_slope().is_err());
        for r in &a.rows {
            assert!((0.0..=1.0).contains(&r.exceed_frac));
            assert!((0.0..=1.0).contains(&r.parsimony_exceed.unwrap()));
            assert!(r.h_median >= 0.0 && r.h_median <= 1.0);
        }
        let dir = tempfile::tempdir().unwrap();
        a.write(dir.path()).unwrap();
        for f in ["report.csv", "slopes.csv", "grid.csv", "manifest.json", "truth.json", "config.conf", "draws/n30_rep0.jsonl"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let manifest: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("manifest.json")).unwrap()).unwrap();
        let report = fs::read(dir.path().join("report.csv")).unwrap();
        assert_eq!(manifest["outputs"]["report.csv"], blob_hash(&report));
    }

    #[test]
    fn parsimony_of_tiny_alpha_prior_is_zero() {
        let mut cfg = small("step");
        cfg.tree_prior = TreePriorSpec::chipman(0.01);
        cfg.sampler.n_trees = 1;
        let truth = experiment_truth(&cfg).unwrap();
        let data = Dataset::covariates_only(experiment_dataset(&cfg, &truth, 50, 0).unwrap().x);
        let model = Model {
            likelihood: cfg.likelihood.build().unwrap(),
            tree_prior: cfg.tree_prior,
            leaf_prior: LeafPrior::default_for(1, 1),
        };
        let draws = run_chain(&cfg.sampler, &model, &data).unwrap();
        let p = parsimony_report(&draws, 1, 1, 4.0);
        assert!(p.exceedance < 0.02, "{p:?}");
    }

    #[test]
    fn link_comparison_runs_at_small_scale() {
        let mut cfg = small("step");
        cfg.likelihood = LikelihoodSpec::Poisson { link: LinkFunction::Softplus };
        cfg.truth = TruthSpec::Step { k0: 2, amplitude: 1.0 };
        cfg.n_grid = vec![20, 40, 80, 160];
        cfg.replicates = 2;
        cfg.save_draws = false;
        let c = link_comparison(&cfg, 50).unwrap();
        assert!(c.slope_softplus.is_finite() && c.slope_exp.is_finite());
        assert!(c.interval.0 <= c.interval.1);
        let mut bad = cfg.clone();
        bad.likelihood = LikelihoodSpec::Gaussian { sigma: 1.0 };
        assert!(link_comparison(&bad, 10).is_err());
    }
}
