//! Metropolis-within-Gibbs backfitting.
//!
//! Each sweep visits the trees in order. For tree `t` the fit of the other
//! trees is held fixed as an offset, then
//!
//! 1. one structural move (grow, prune or change) is proposed and accepted by
//!    Metropolis-Hastings on the joint posterior, and
//! 2. every leaf value gets a random-walk Metropolis update.
//!
//! Structural moves draw fresh leaf values for the cells they create from a
//! Gaussian independence proposal centred at the Newton mode of the cell's
//! conditional log posterior (with curvature from the Fisher information), so
//! the reverse density of the values being removed is always available. For
//! a Gaussian likelihood and Gaussian leaf prior that proposal is the exact
//! conditional, and structure moves become collapsed-like.
//!
//! Grow picks a uniform leaf, a uniform splittable axis and a uniform
//! threshold; picks that land at the depth cap, on an unsplittable leaf, or
//! on an invalid partition are rejected. Prune and change act on uniformly
//! chosen nodes whose children are both leaves.

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Matrix};
use crate::error::{Error, Result};
use crate::forest::{Forest, ForestMember, LeafValues};
use crate::leafprior::{LeafPrior, LeafPriorKind};
use crate::likelihoods::Likelihood;
use crate::numerics::{cholesky, cholesky_solve, log_sum_exp, LN_2PI};
use crate::rng::{stream, Purpose, StreamRng};
use crate::tree::{available_splits, denison_log_count, denison_log_pk, is_splittable, Node, TreePartition, TreePriorKind, TreePriorSpec};

const NONE: usize = usize::MAX;
const ADAPT_BATCH: usize = 25;
const TARGET_ACCEPT: f64 = 0.44;
const INIT_ATTEMPTS: usize = 1000;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoveProbs {
    pub grow: f64,
    pub prune: f64,
    pub change: f64,
}

impl Default for MoveProbs {
    fn default() -> Self {
        MoveProbs {
            grow: 0.4,
            prune: 0.4,
            change: 0.2,
        }
    }
}

/// Where leaf values live.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LeafSupport {
    Continuous,
    /// One-dimensional leaves restricted to these points; the leaf prior is
    /// renormalized over them and random-walk steps move one grid index.
    Grid { points: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub n_iter: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub move_probs: MoveProbs,
    /// Random-walk step in units of the cell's approximate posterior sd.
    pub leaf_proposal_scale: f64,
    pub seed: u64,
    pub chains: usize,
    pub n_trees: usize,
    /// Tune the random-walk multiplier during burn-in.
    pub adapt: bool,
    /// When false only leaf values are updated.
    pub structure_moves: bool,
    pub leaf_support: LeafSupport,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            n_iter: 2000,
            burn_in: 500,
            thin: 5,
            move_probs: MoveProbs::default(),
            leaf_proposal_scale: 2.0,
            seed: 0,
            chains: 1,
            n_trees: 10,
            adapt: true,
            structure_moves: true,
            leaf_support: LeafSupport::Continuous,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        let p = self.move_probs;
        if [p.grow, p.prune, p.change].iter().any(|v| !(*v >= 0.0)) || ((p.grow + p.prune + p.change) - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("move probabilities must be nonnegative and sum to 1, got {p:?}")));
        }
        if self.burn_in >= self.n_iter {
            return Err(Error::invalid(format!("burn_in ({}) must be below n_iter ({})", self.burn_in, self.n_iter)));
        }
        if self.thin == 0 || self.chains == 0 || self.n_trees == 0 {
            return Err(Error::invalid("thin, chains and n_trees must be positive"));
        }
        if !(self.leaf_proposal_scale > 0.0) {
            return Err(Error::invalid("leaf_proposal_scale must be positive"));
        }
        if let LeafSupport::Grid { points } = &self.leaf_support {
            if points.len() < 2 || points.windows(2).any(|w| !(w[0] < w[1])) {
                return Err(Error::invalid("leaf grid needs at least two strictly increasing points"));
            }
        }
        Ok(())
    }

    /// Number of stored draws per chain.
    pub fn draws_per_chain(&self) -> usize {
        self.n_iter.saturating_sub(self.burn_in) / self.thin.max(1)
    }

    pub fn keeps(&self, iteration: usize) -> bool {
        iteration >= self.burn_in && (iteration - self.burn_in + 1).is_multiple_of(self.thin)
    }
}

/// Likelihood plus priors.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub likelihood: Likelihood,
    pub tree_prior: TreePriorSpec,
    pub leaf_prior: LeafPrior,
}

impl Model {
    pub fn validate(&self) -> Result<()> {
        self.tree_prior.validate()?;
        self.leaf_prior.validate()?;
        if matches!(self.leaf_prior.kind, LeafPriorKind::Dirichlet { .. }) {
            return Err(Error::Unsupported("dirichlet leaf values in the sampler".into()));
        }
        if self.leaf_prior.dim != self.likelihood.natural_dim() {
            return Err(Error::DimensionMismatch(format!(
                "leaf prior has dim {} but the likelihood needs {}",
                self.leaf_prior.dim,
                self.likelihood.natural_dim()
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MoveCounts {
    pub proposed: u64,
    pub accepted: u64,
}

impl MoveCounts {
    pub fn rate(&self) -> f64 {
        if self.proposed == 0 {
            0.0
        } else {
            self.accepted as f64 / self.proposed as f64
        }
    }

    fn record(&mut self, accepted: bool) {
        self.proposed += 1;
        self.accepted += u64::from(accepted);
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Acceptance {
    pub grow: MoveCounts,
    pub prune: MoveCounts,
    pub change: MoveCounts,
    pub leaf: MoveCounts,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChainDiagnostics {
    pub acceptance: Acceptance,
    /// Log posterior (up to the evidence) after every iteration.
    pub log_posterior_trace: Vec<f64>,
    pub scale_multiplier: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorDraws {
    /// Stored forests, chain by chain.
    pub forests: Vec<Forest>,
    pub chains: Vec<ChainDiagnostics>,
}

/// `Σ_i log p(y_i | f(x_i))`.
pub fn log_likelihood(lik: &Likelihood, forest: &Forest, data: &Dataset) -> Result<f64> {
    let Some(y) = data.y.as_ref() else {
        return Ok(0.0);
    };
    if forest.dim() != lik.natural_dim() {
        return Err(Error::DimensionMismatch(format!(
            "forest outputs {} values, likelihood needs {}",
            forest.dim(),
            lik.natural_dim()
        )));
    }
    if y.cols() != lik.response_dim() {
        return Err(Error::DimensionMismatch(format!(
            "response has {} columns, likelihood needs {}",
            y.cols(),
            lik.response_dim()
        )));
    }
    let mut f = vec![0.0; forest.dim()];
    let mut total = 0.0;
    for i in 0..data.n() {
        forest.evaluate_into(data.x.row(i), &mut f);
        total += lik.log_density(y.row(i), &f)?;
    }
    Ok(total)
}

#[derive(Clone, Debug)]
struct WNode {
    parent: usize,
    depth: usize,
    split: Option<(usize, f64, usize, usize)>,
    points: Vec<usize>,
    value: Vec<f64>,
    grid: usize,
}

#[derive(Clone, Debug)]
struct WTree {
    nodes: Vec<WNode>,
    free: Vec<usize>,
    log_prior: f64,
}

impl WTree {
    fn alloc(&mut self, node: WNode) -> usize {
        if let Some(i) = self.free.pop() {
            self.nodes[i] = node;
            i
        } else {
            self.nodes.push(node);
            self.nodes.len() - 1
        }
    }

    fn is_leaf(&self, i: usize) -> bool {
        self.nodes[i].split.is_none()
    }

    /// Leaves in depth-first order.
    fn leaves(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![0];
        while let Some(i) = stack.pop() {
            match self.nodes[i].split {
                None => out.push(i),
                Some((_, _, l, r)) => {
                    stack.push(r);
                    stack.push(l);
                }
            }
        }
        out
    }

    fn nogs(&self) -> Vec<usize> {
        let mut out = Vec::new();
        let mut stack = vec![0];
        while let Some(i) = stack.pop() {
            if let Some((_, _, l, r)) = self.nodes[i].split {
                if self.is_leaf(l) && self.is_leaf(r) {
                    out.push(i);
                } else {
                    stack.push(r);
                    stack.push(l);
                }
            }
        }
        out
    }

    fn to_partition(&self) -> (TreePartition, Vec<usize>) {
        fn build(t: &WTree, i: usize, leaves: &mut Vec<usize>) -> Node {
            match t.nodes[i].split {
                None => {
                    leaves.push(i);
                    Node::leaf()
                }
                Some((axis, threshold, l, r)) => {
                    let left = build(t, l, leaves);
                    let right = build(t, r, leaves);
                    Node::split(axis, threshold, left, right)
                }
            }
        }
        let mut leaves = Vec::new();
        let root = build(self, 0, &mut leaves);
        (TreePartition::from_root(root), leaves)
    }
}

/// A candidate leaf value: the vector plus its grid index in grid mode.
#[derive(Clone, Debug, PartialEq)]
struct LeafVal {
    v: Vec<f64>,
    g: usize,
}

/// Gaussian (or grid-discretized Gaussian) proposal for one cell's value.
#[derive(Clone, Debug)]
enum Proposal {
    Point { dim: usize },
    Gauss { mean: Vec<f64>, chol: Vec<f64> },
    Grid { log_pmf: Vec<f64> },
}

impl Proposal {
    fn sample(&self, grid: &[f64], rng: &mut StreamRng) -> LeafVal {
        match self {
            Proposal::Point { dim } => LeafVal { v: vec![0.0; *dim], g: 0 },
            Proposal::Gauss { mean, chol } => {
                let d = mean.len();
                let z: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
                let u = crate::numerics::cholesky_solve_upper(chol, d, &z);
                LeafVal {
                    v: mean.iter().zip(&u).map(|(m, e)| m + e).collect(),
                    g: 0,
                }
            }
            Proposal::Grid { log_pmf } => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut g = log_pmf.len() - 1;
                for (j, lp) in log_pmf.iter().enumerate() {
                    acc += lp.exp();
                    if u < acc {
                        g = j;
                        break;
                    }
                }
                LeafVal { v: vec![grid[g]], g }
            }
        }
    }

    fn log_density(&self, b: &LeafVal) -> f64 {
        match self {
            Proposal::Point { .. } => 0.0,
            Proposal::Gauss { mean, chol } => {
                let d = mean.len();
                let diff: Vec<f64> = b.v.iter().zip(mean).map(|(a, m)| a - m).collect();
                // ‖Lᵀ (b - m)‖² with precision L Lᵀ
                let mut quad = 0.0;
                for j in 0..d {
                    let mut s = 0.0;
                    for i in j..d {
                        s += chol[i * d + j] * diff[i];
                    }
                    quad += s * s;
                }
                let half_log_det: f64 = (0..d).map(|i| chol[i * d + i].ln()).sum();
                -0.5 * d as f64 * LN_2PI + half_log_det - 0.5 * quad
            }
            Proposal::Grid { log_pmf } => log_pmf[b.g],
        }
    }
}

/// One MCMC chain with its working state.
pub struct ChainSampler<'a> {
    config: &'a SamplerConfig,
    model: &'a Model,
    data: &'a Dataset,
    trees: Vec<WTree>,
    fit: Matrix,
    off: Matrix,
    rng: StreamRng,
    dim: usize,
    grid: Vec<f64>,
    grid_log_prior: Vec<f64>,
    iteration: usize,
    multiplier: f64,
    batch: MoveCounts,
    diagnostics: ChainDiagnostics,
}

impl<'a> ChainSampler<'a> {
    /// Initializes chain `chain` with its own random stream.
    pub fn new(config: &'a SamplerConfig, model: &'a Model, data: &'a Dataset, chain: usize) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        let dim = model.likelihood.natural_dim();
        if let Some(y) = &data.y {
            if y.cols() != model.likelihood.response_dim() {
                return Err(Error::DimensionMismatch(format!(
                    "response has {} columns, likelihood needs {}",
                    y.cols(),
                    model.likelihood.response_dim()
                )));
            }
            if let Some(i) = (0..data.n()).find(|&i| !model.likelihood.in_support(y.row(i))) {
                return Err(Error::invalid(format!("response row {i} is outside the likelihood's support")));
            }
        }
        if data.x.as_slice().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("covariates must lie in [0, 1]"));
        }
        let (grid, grid_log_prior) = match &config.leaf_support {
            LeafSupport::Continuous => (Vec::new(), Vec::new()),
            LeafSupport::Grid { points } => {
                if dim != 1 {
                    return Err(Error::Unsupported("grid leaf support needs one-dimensional leaves".into()));
                }
                let raw: Vec<f64> = points.iter().map(|&g| model.leaf_prior.log_density(&[g])).collect();
                let z = log_sum_exp(&raw);
                if !z.is_finite() {
                    return Err(Error::invalid("leaf prior puts no mass on the grid"));
                }
                (points.clone(), raw.iter().map(|r| r - z).collect())
            }
        };
        let mut s = ChainSampler {
            config,
            model,
            data,
            trees: Vec::with_capacity(config.n_trees),
            fit: Matrix::zeros(data.n(), dim),
            off: Matrix::zeros(data.n(), dim),
            rng: stream(config.seed, Purpose::Chain, chain as u64, 0),
            dim,
            grid,
            grid_log_prior,
            iteration: 0,
            multiplier: 1.0,
            batch: MoveCounts::default(),
            diagnostics: ChainDiagnostics {
                scale_multiplier: 1.0,
                ..Default::default()
            },
        };
        s.initialize()?;
        let lp = s.log_posterior();
        if !lp.is_finite() {
            return Err(Error::NonFiniteInit(format!("initial log posterior is {lp}")));
        }
        Ok(s)
    }

    fn init_value(&self) -> LeafVal {
        let m = &self.model;
        let v = if m.leaf_prior.is_point_mass() {
            vec![0.0; self.dim]
        } else {
            match (m.leaf_prior.kind, &self.data.y) {
                (LeafPriorKind::Gaussian { .. } | LeafPriorKind::Laplace { .. }, Some(y)) if y.rows() > 0 => {
                    let p = y.cols();
                    let ybar: Vec<f64> = (0..p).map(|j| (0..y.rows()).map(|i| y.get(i, j)).sum::<f64>() / y.rows() as f64).collect();
                    let t = self.config.n_trees as f64;
                    m.likelihood.link_anchor(&ybar).iter().map(|a| a / t).collect()
                }
                (LeafPriorKind::Gaussian { .. } | LeafPriorKind::Laplace { .. }, _) => vec![0.0; self.dim],
                _ => vec![m.leaf_prior.mean(); self.dim],
            }
        };
        self.snap(v)
    }

    /// Puts a value on the grid (nearest point) in grid mode.
    fn snap(&self, v: Vec<f64>) -> LeafVal {
        if self.grid.is_empty() {
            return LeafVal { v, g: 0 };
        }
        let g = (0..self.grid.len())
            .min_by(|&a, &b| (self.grid[a] - v[0]).abs().total_cmp(&(self.grid[b] - v[0]).abs()))
            .expect("nonempty grid");
        LeafVal { v: vec![self.grid[g]], g }
    }

    fn initialize(&mut self) -> Result<()> {
        let n = self.data.n();
        let spec = self.model.tree_prior;
        let value = self.init_value();
        let all: Vec<usize> = (0..n).collect();
        for _ in 0..self.config.n_trees {
            let root = WNode {
                parent: NONE,
                depth: 0,
                split: None,
                points: all.clone(),
                value: value.v.clone(),
                grid: value.g,
            };
            let mut tree = WTree {
                nodes: vec![root],
                free: Vec::new(),
                log_prior: 0.0,
            };
            // the root-only tree has zero Chipman mass whenever the root can split
            let needs_split = matches!(spec.kind, TreePriorKind::Chipman { .. })
                && self.config.structure_moves
                && spec.depth_allowed(0)
                && is_splittable(&self.data.x, &all);
            if needs_split {
                let splits = available_splits(&self.data.x, &all);
                for _ in 0..INIT_ATTEMPTS {
                    let s = &splits[self.rng.random_range(0..splits.len())];
                    let th = s.thresholds[self.rng.random_range(0..s.thresholds.len())];
                    let (l, r): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| self.data.x.get(i, s.axis) < th);
                    if l.len() >= spec.validity_constant && r.len() >= spec.validity_constant {
                        apply_split(&mut tree, 0, s.axis, th, l, r, &value, &value);
                        break;
                    }
                }
            }
            let (part, _) = tree.to_partition();
            tree.log_prior = match crate::tree::log_prior_tree(&spec, &part, &self.data.x) {
                Ok(v) => v,
                Err(e) => return Err(Error::NonFiniteInit(format!("initial tree rejected: {e}"))),
            };
            self.trees.push(tree);
        }
        self.recompute_fit();
        Ok(())
    }

    fn recompute_fit(&mut self) {
        self.fit = Matrix::zeros(self.data.n(), self.dim);
        for t in 0..self.trees.len() {
            for leaf in self.trees[t].leaves() {
                let node = &self.trees[t].nodes[leaf];
                for &i in &node.points {
                    for (f, v) in self.fit.row_mut(i).iter_mut().zip(&node.value) {
                        *f += v;
                    }
                }
            }
        }
    }

    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Fitted forest output at the data points (`n × D`).
    pub fn fit(&self) -> &Matrix {
        &self.fit
    }

    pub fn diagnostics(&self) -> &ChainDiagnostics {
        &self.diagnostics
    }

    pub fn into_diagnostics(self) -> ChainDiagnostics {
        self.diagnostics
    }

    pub fn leaf_counts(&self) -> Vec<usize> {
        self.trees.iter().map(|t| t.leaves().len()).collect()
    }

    /// Current forest snapshot.
    pub fn forest(&self) -> Forest {
        let members = self
            .trees
            .iter()
            .map(|t| {
                let (tree, leaves) = t.to_partition();
                let values = LeafValues(leaves.iter().map(|&i| t.nodes[i].value.clone()).collect());
                ForestMember { tree, values }
            })
            .collect();
        Forest::new(members).expect("sampler state is a well-formed forest")
    }

    /// Grid indices of the leaf values, per tree in leaf order (grid mode).
    pub fn grid_indices(&self) -> Option<Vec<Vec<usize>>> {
        if self.grid.is_empty() {
            return None;
        }
        Some(
            self.trees
                .iter()
                .map(|t| t.leaves().iter().map(|&i| t.nodes[i].grid).collect())
                .collect(),
        )
    }

    fn leaf_log_prior(&self, b: &LeafVal) -> f64 {
        if self.grid.is_empty() {
            self.model.leaf_prior.log_density(&b.v)
        } else {
            self.grid_log_prior[b.g]
        }
    }

    /// Log posterior up to the evidence: likelihood plus tree and leaf priors.
    pub fn log_posterior(&self) -> f64 {
        let mut lp = 0.0;
        if let Some(y) = &self.data.y {
            for i in 0..self.data.n() {
                lp += self.model.likelihood.log_density_unchecked(y.row(i), self.fit.row(i));
            }
        }
        for t in &self.trees {
            lp += t.log_prior;
            for leaf in t.leaves() {
                let n = &t.nodes[leaf];
                lp += self.leaf_log_prior(&LeafVal {
                    v: n.value.clone(),
                    g: n.grid,
                });
            }
        }
        lp
    }

    /// One full sweep over all trees.
    pub fn iterate(&mut self) {
        for t in 0..self.trees.len() {
            self.set_offsets(t);
            if self.config.structure_moves {
                self.structure_move(t);
            }
            self.leaf_moves(t);
            self.add_back(t);
        }
        self.iteration += 1;
        if self.config.adapt && self.grid.is_empty() && self.iteration <= self.config.burn_in && self.iteration.is_multiple_of(ADAPT_BATCH) {
            let rate = self.batch.rate();
            if self.batch.proposed > 0 {
                self.multiplier = (self.multiplier * (rate - TARGET_ACCEPT).exp()).clamp(1e-3, 1e3);
            }
            self.batch = MoveCounts::default();
        }
        self.diagnostics.scale_multiplier = self.multiplier;
        let lp = self.log_posterior();
        self.diagnostics.log_posterior_trace.push(lp);
    }

    fn set_offsets(&mut self, t: usize) {
        self.off.clone_from(&self.fit);
        for leaf in self.trees[t].leaves() {
            let node = &self.trees[t].nodes[leaf];
            for &i in &node.points {
                for (o, v) in self.off.row_mut(i).iter_mut().zip(&node.value) {
                    *o -= v;
                }
            }
        }
    }

    fn add_back(&mut self, t: usize) {
        self.fit.clone_from(&self.off);
        for leaf in self.trees[t].leaves() {
            let node = &self.trees[t].nodes[leaf];
            for &i in &node.points {
                for (f, v) in self.fit.row_mut(i).iter_mut().zip(&node.value) {
                    *f += v;
                }
            }
        }
    }

    /// Log-likelihood of the cell `points` when the current tree outputs `b`.
    fn cell_loglik(&self, points: &[usize], b: &[f64]) -> f64 {
        let Some(y) = &self.data.y else {
            return 0.0;
        };
        let lik = &self.model.likelihood;
        if self.dim == 1 {
            let mut f = [0.0];
            return points
                .iter()
                .map(|&i| {
                    f[0] = self.off.get(i, 0) + b[0];
                    lik.log_density_unchecked(y.row(i), &f)
                })
                .sum();
        }
        let mut f = vec![0.0; self.dim];
        points
            .iter()
            .map(|&i| {
                for (j, fj) in f.iter_mut().enumerate() {
                    *fj = self.off.get(i, j) + b[j];
                }
                lik.log_density_unchecked(y.row(i), &f)
            })
            .sum()
    }

    /// Newton/Fisher-scoring mode and curvature of the cell's conditional
    /// log posterior, as a Gaussian proposal. Depends only on the cell and
    /// the other trees' fit.
    fn cell_proposal(&self, points: &[usize]) -> Proposal {
        let d = self.dim;
        if self.model.leaf_prior.is_point_mass() {
            return Proposal::Point { dim: d };
        }
        let p0 = self.model.leaf_prior.precision_hint();
        let m0 = self.model.leaf_prior.mean();
        let lik = &self.model.likelihood;
        let info_at = |b: &[f64], score: &mut Vec<f64>, info: &mut Vec<f64>| {
            score.iter_mut().zip(b).for_each(|(s, bj)| *s = -p0 * (bj - m0));
            info.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..d {
                info[j * d + j] = p0;
            }
            if let Some(y) = &self.data.y {
                let mut f = vec![0.0; d];
                for &i in points {
                    for (j, fj) in f.iter_mut().enumerate() {
                        *fj = self.off.get(i, j) + b[j];
                    }
                    lik.accumulate_score_fisher(y.row(i), &f, score, info);
                }
            }
        };
        let mut b = vec![m0; d];
        let mut score = vec![0.0; d];
        let mut info = vec![0.0; d * d];
        if self.data.y.is_some() && !points.is_empty() {
            for _ in 0..30 {
                info_at(&b, &mut score, &mut info);
                let Some(l) = cholesky(&info, d) else { break };
                let mut step = cholesky_solve(&l, d, &score);
                let big = step.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
                if !big.is_finite() {
                    break;
                }
                if big > 2.0 {
                    step.iter_mut().for_each(|s| *s *= 2.0 / big);
                }
                b.iter_mut().zip(&step).for_each(|(bj, s)| *bj += s);
                if big < 1e-10 {
                    break;
                }
            }
        }
        info_at(&b, &mut score, &mut info);
        let chol = match cholesky(&info, d) {
            Some(l) if b.iter().all(|v| v.is_finite()) => l,
            _ => {
                b = vec![m0; d];
                let mut diag = vec![0.0; d * d];
                let prec = p0 + points.len() as f64 * lik.unit_information();
                for j in 0..d {
                    diag[j * d + j] = prec.sqrt();
                }
                diag
            }
        };
        if self.grid.is_empty() {
            return Proposal::Gauss { mean: b, chol };
        }
        let prec = chol[0] * chol[0];
        let raw: Vec<f64> = self.grid.iter().map(|g| -0.5 * prec * (g - b[0]) * (g - b[0])).collect();
        let z = log_sum_exp(&raw);
        Proposal::Grid {
            log_pmf: raw.iter().map(|r| r - z).collect(),
        }
    }

    fn value_of(&self, t: usize, i: usize) -> LeafVal {
        let n = &self.trees[t].nodes[i];
        LeafVal {
            v: n.value.clone(),
            g: n.grid,
        }
    }

    fn chipman_leaf(&self, depth: usize, points: &[usize]) -> f64 {
        self.model.tree_prior.chipman_leaf_term(depth, is_splittable(&self.data.x, points))
    }

    /// Log prior ratio for splitting a leaf at `depth` into cells `l`/`r`
    /// with `n_ax × n_thr` available rules, in a tree with `k` leaves.
    fn grow_prior_ratio(&self, depth: usize, n_ax: usize, n_thr: usize, l: &[usize], r: &[usize], k: usize) -> f64 {
        let spec = &self.model.tree_prior;
        match spec.kind {
            TreePriorKind::Chipman { alpha } => {
                alpha.powi(depth as i32).ln() - (n_ax as f64).ln() - (n_thr as f64).ln()
                    + self.chipman_leaf(depth + 1, l)
                    + self.chipman_leaf(depth + 1, r)
                    - spec.chipman_leaf_term(depth, true)
            }
            TreePriorKind::Denison { lambda } => {
                let (q, n) = (self.data.x.cols(), self.data.n());
                denison_log_pk(lambda, k + 1) - denison_log_pk(lambda, k) - denison_log_count(q, n, k + 1)
                    + denison_log_count(q, n, k)
            }
        }
    }

    /// MH log ratio for growing `leaf` of tree `t` with the given rule and
    /// child values; `None` when the rule is not allowed. Also returns the
    /// tree prior ratio.
    fn grow_log_ratio(&self, t: usize, leaf: usize, axis: usize, threshold: f64, bl: &LeafVal, br: &LeafVal) -> Option<(f64, f64)> {
        let tree = &self.trees[t];
        let node = &tree.nodes[leaf];
        let spec = &self.model.tree_prior;
        if !spec.depth_allowed(node.depth) {
            return None;
        }
        let splits = available_splits(&self.data.x, &node.points);
        let s = splits.iter().find(|s| s.axis == axis)?;
        s.thresholds.iter().position(|&c| c == threshold)?;
        let (l, r): (Vec<usize>, Vec<usize>) = node.points.iter().partition(|&&i| self.data.x.get(i, axis) < threshold);
        if l.len() < spec.validity_constant || r.len() < spec.validity_constant {
            return None;
        }
        let leaves = tree.leaves();
        let nogs = tree.nogs().len();
        let parent_was_nog = node.parent != NONE && {
            let (_, _, a, b) = tree.nodes[node.parent].split.expect("parent splits");
            tree.is_leaf(a) && tree.is_leaf(b)
        };
        let nogs_after = nogs - usize::from(parent_was_nog) + 1;
        let prior = self.grow_prior_ratio(node.depth, splits.len(), s.thresholds.len(), &l, &r, leaves.len());
        let bp = self.value_of(t, leaf);
        let ql = self.cell_proposal(&l);
        let qr = self.cell_proposal(&r);
        let qp = self.cell_proposal(&node.points);
        let lik = self.cell_loglik(&l, &bl.v) + self.cell_loglik(&r, &br.v) - self.cell_loglik(&node.points, &bp.v);
        let leaf_prior = self.leaf_log_prior(bl) + self.leaf_log_prior(br) - self.leaf_log_prior(&bp);
        let mp = self.config.move_probs;
        let log_rev = (mp.prune / nogs_after as f64).ln() + qp.log_density(&bp);
        let log_fwd = (mp.grow / leaves.len() as f64).ln() - (splits.len() as f64).ln() - (s.thresholds.len() as f64).ln()
            + ql.log_density(bl)
            + qr.log_density(br);
        Some((lik + prior + leaf_prior + log_rev - log_fwd, prior))
    }

    /// MH log ratio for collapsing nog node `v` of tree `t` into one leaf
    /// with value `bp`, plus the tree prior ratio.
    fn prune_log_ratio(&self, t: usize, v: usize, bp: &LeafVal) -> (f64, f64) {
        let tree = &self.trees[t];
        let node = &tree.nodes[v];
        let (axis, threshold, lc, rc) = node.split.expect("nog splits");
        let (l, r) = (&tree.nodes[lc].points, &tree.nodes[rc].points);
        let splits = available_splits(&self.data.x, &node.points);
        let s = splits.iter().find(|s| s.axis == axis).expect("rule was available");
        debug_assert!(s.thresholds.contains(&threshold));
        let k_after = tree.leaves().len() - 1;
        let nogs_now = tree.nogs().len();
        let prior_grow = self.grow_prior_ratio(node.depth, splits.len(), s.thresholds.len(), l, r, k_after);
        let (bl, br) = (self.value_of(t, lc), self.value_of(t, rc));
        let ql = self.cell_proposal(l);
        let qr = self.cell_proposal(r);
        let qp = self.cell_proposal(&node.points);
        let lik = self.cell_loglik(l, &bl.v) + self.cell_loglik(r, &br.v) - self.cell_loglik(&node.points, &bp.v);
        let leaf_prior = self.leaf_log_prior(&bl) + self.leaf_log_prior(&br) - self.leaf_log_prior(bp);
        let mp = self.config.move_probs;
        let log_rev = (mp.prune / nogs_now as f64).ln() + qp.log_density(bp);
        let log_fwd = (mp.grow / k_after as f64).ln() - (splits.len() as f64).ln() - (s.thresholds.len() as f64).ln()
            + ql.log_density(&bl)
            + qr.log_density(&br);
        let grow = lik + prior_grow + leaf_prior + log_rev - log_fwd;
        (-grow, -prior_grow)
    }

    fn structure_move(&mut self, t: usize) {
        let u: f64 = self.rng.random();
        let mp = self.config.move_probs;
        if u < mp.grow {
            let ok = self.try_grow(t);
            self.diagnostics.acceptance.grow.record(ok);
        } else if u < mp.grow + mp.prune {
            let ok = self.try_prune(t);
            self.diagnostics.acceptance.prune.record(ok);
        } else {
            let ok = self.try_change(t);
            self.diagnostics.acceptance.change.record(ok);
        }
    }

    fn accept(&mut self, log_ratio: f64) -> bool {
        if log_ratio.is_nan() {
            return false;
        }
        log_ratio >= 0.0 || self.rng.random::<f64>().ln() < log_ratio
    }

    fn try_grow(&mut self, t: usize) -> bool {
        let leaves = self.trees[t].leaves();
        let leaf = leaves[self.rng.random_range(0..leaves.len())];
        let node = &self.trees[t].nodes[leaf];
        if !self.model.tree_prior.depth_allowed(node.depth) {
            return false;
        }
        let splits = available_splits(&self.data.x, &node.points);
        if splits.is_empty() {
            return false;
        }
        let s = &splits[self.rng.random_range(0..splits.len())];
        let (axis, th) = (s.axis, s.thresholds[self.rng.random_range(0..s.thresholds.len())]);
        let (l, r): (Vec<usize>, Vec<usize>) = node.points.iter().partition(|&&i| self.data.x.get(i, axis) < th);
        let c = self.model.tree_prior.validity_constant;
        if l.len() < c || r.len() < c {
            return false;
        }
        let bl = self.cell_proposal(&l).sample(&self.grid, &mut self.rng);
        let br = self.cell_proposal(&r).sample(&self.grid, &mut self.rng);
        let Some((ratio, prior)) = self.grow_log_ratio(t, leaf, axis, th, &bl, &br) else {
            return false;
        };
        if !self.accept(ratio) {
            return false;
        }
        let tree = &mut self.trees[t];
        apply_split(tree, leaf, axis, th, l, r, &bl, &br);
        tree.log_prior += prior;
        true
    }

    fn try_prune(&mut self, t: usize) -> bool {
        let nogs = self.trees[t].nogs();
        if nogs.is_empty() {
            return false;
        }
        let v = nogs[self.rng.random_range(0..nogs.len())];
        let bp = self.cell_proposal(&self.trees[t].nodes[v].points).sample(&self.grid, &mut self.rng);
        let (ratio, prior) = self.prune_log_ratio(t, v, &bp);
        if !self.accept(ratio) {
            return false;
        }
        let tree = &mut self.trees[t];
        let (_, _, l, r) = tree.nodes[v].split.take().expect("nog");
        tree.free.push(l);
        tree.free.push(r);
        tree.nodes[l].points = Vec::new();
        tree.nodes[r].points = Vec::new();
        tree.nodes[v].value = bp.v;
        tree.nodes[v].grid = bp.g;
        tree.log_prior += prior;
        true
    }

    fn try_change(&mut self, t: usize) -> bool {
        let nogs = self.trees[t].nogs();
        if nogs.is_empty() {
            return false;
        }
        let v = nogs[self.rng.random_range(0..nogs.len())];
        let tree = &self.trees[t];
        let node = &tree.nodes[v];
        let (_, _, lc, rc) = node.split.expect("nog");
        let splits = available_splits(&self.data.x, &node.points);
        let s = &splits[self.rng.random_range(0..splits.len())];
        let (axis, th) = (s.axis, s.thresholds[self.rng.random_range(0..s.thresholds.len())]);
        let (l, r): (Vec<usize>, Vec<usize>) = node.points.iter().partition(|&&i| self.data.x.get(i, axis) < th);
        let c = self.model.tree_prior.validity_constant;
        if l.len() < c || r.len() < c {
            return false;
        }
        let (old_l, old_r) = (&tree.nodes[lc].points, &tree.nodes[rc].points);
        let (bl_old, br_old) = (self.value_of(t, lc), self.value_of(t, rc));
        let (ql_new, qr_new) = (self.cell_proposal(&l), self.cell_proposal(&r));
        let (ql_old, qr_old) = (self.cell_proposal(old_l), self.cell_proposal(old_r));
        let bl = ql_new.sample(&self.grid, &mut self.rng);
        let br = qr_new.sample(&self.grid, &mut self.rng);
        let depth = node.depth;
        let prior = match self.model.tree_prior.kind {
            TreePriorKind::Chipman { .. } => {
                self.chipman_leaf(depth + 1, &l) + self.chipman_leaf(depth + 1, &r)
                    - self.chipman_leaf(depth + 1, old_l)
                    - self.chipman_leaf(depth + 1, old_r)
            }
            TreePriorKind::Denison { .. } => 0.0,
        };
        let lik = self.cell_loglik(&l, &bl.v) + self.cell_loglik(&r, &br.v)
            - self.cell_loglik(old_l, &bl_old.v)
            - self.cell_loglik(old_r, &br_old.v);
        let leaf_prior = self.leaf_log_prior(&bl) + self.leaf_log_prior(&br)
            - self.leaf_log_prior(&bl_old)
            - self.leaf_log_prior(&br_old);
        let proposal = ql_old.log_density(&bl_old) + qr_old.log_density(&br_old) - ql_new.log_density(&bl) - qr_new.log_density(&br);
        if !self.accept(lik + prior + leaf_prior + proposal) {
            return false;
        }
        let tree = &mut self.trees[t];
        tree.nodes[v].split = Some((axis, th, lc, rc));
        for (child, pts, b) in [(lc, l, bl), (rc, r, br)] {
            let n = &mut tree.nodes[child];
            n.points = pts;
            n.value = b.v;
            n.grid = b.g;
        }
        tree.log_prior += prior;
        true
    }

    fn leaf_moves(&mut self, t: usize) {
        if self.model.leaf_prior.is_point_mass() {
            return;
        }
        let lik_info = if self.data.y.is_some() {
            self.model.likelihood.unit_information()
        } else {
            0.0
        };
        let p0 = self.model.leaf_prior.precision_hint();
        for leaf in self.trees[t].leaves() {
            let cur = self.value_of(t, leaf);
            let points = std::mem::take(&mut self.trees[t].nodes[leaf].points);
            let prop = if self.grid.is_empty() {
                let sd = self.config.leaf_proposal_scale * self.multiplier / (points.len() as f64 * lik_info + p0).sqrt();
                Some(LeafVal {
                    v: cur.v.iter().map(|b| b + sd * self.rng.sample::<f64, _>(StandardNormal)).collect(),
                    g: 0,
                })
            } else {
                let up = self.rng.random::<bool>();
                match (up, cur.g) {
                    (false, 0) => None,
                    (true, g) if g + 1 >= self.grid.len() => None,
                    (true, g) => Some(LeafVal { v: vec![self.grid[g + 1]], g: g + 1 }),
                    (false, g) => Some(LeafVal { v: vec![self.grid[g - 1]], g: g - 1 }),
                }
            };
            let accepted = match prop {
                None => false,
                Some(b) => {
                    let ratio = self.cell_loglik(&points, &b.v) - self.cell_loglik(&points, &cur.v) + self.leaf_log_prior(&b)
                        - self.leaf_log_prior(&cur);
                    if self.accept(ratio) {
                        let n = &mut self.trees[t].nodes[leaf];
                        n.value = b.v;
                        n.grid = b.g;
                        true
                    } else {
                        false
                    }
                }
            };
            self.trees[t].nodes[leaf].points = points;
            self.diagnostics.acceptance.leaf.record(accepted);
            self.batch.record(accepted);
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn apply_split(tree: &mut WTree, leaf: usize, axis: usize, th: f64, l: Vec<usize>, r: Vec<usize>, bl: &LeafVal, br: &LeafVal) {
    let depth = tree.nodes[leaf].depth + 1;
    let mk = |points: Vec<usize>, b: &LeafVal| WNode {
        parent: leaf,
        depth,
        split: None,
        points,
        value: b.v.clone(),
        grid: b.g,
    };
    let li = tree.alloc(mk(l, bl));
    let ri = tree.alloc(mk(r, br));
    tree.nodes[leaf].split = Some((axis, th, li, ri));
}

/// Runs one chain, calling `observer` after every iteration with the
/// sampler and whether the iteration is a stored draw.
pub fn run_chain_observed<F>(config: &SamplerConfig, model: &Model, data: &Dataset, chain: usize, mut observer: F) -> Result<ChainDiagnostics>
where
    F: FnMut(&ChainSampler<'_>, bool),
{
    let mut s = ChainSampler::new(config, model, data, chain)?;
    for i in 0..config.n_iter {
        s.iterate();
        observer(&s, config.keeps(i));
    }
    Ok(s.into_diagnostics())
}

/// Runs `config.chains` chains in parallel and stores the thinned forests.
pub fn run_chain(config: &SamplerConfig, model: &Model, data: &Dataset) -> Result<PosteriorDraws> {
    config.validate()?;
    let results: Vec<Result<(Vec<Forest>, ChainDiagnostics)>> = (0..config.chains)
        .into_par_iter()
        .map(|c| {
            let mut forests = Vec::with_capacity(config.draws_per_chain());
            let diag = run_chain_observed(config, model, data, c, |s, keep| {
                if keep {
                    forests.push(s.forest());
                }
            })
            .map_err(|e| e.context(format!("chain {c}")))?;
            Ok((forests, diag))
        })
        .collect();
    let mut draws = PosteriorDraws {
        forests: Vec::new(),
        chains: Vec::new(),
    };
    for r in results {
        let (f, d) = r?;
        draws.forests.extend(f);
        draws.chains.push(d);
    }
    Ok(draws)
}
