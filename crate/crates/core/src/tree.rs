//! Binary partitions of `[0,1]^q` and the two partition priors.
//!
//! A split sends `x` left iff `x[axis] < threshold`. Thresholds are drawn
//! from the covariate values of the points that reach the node, excluding
//! the smallest one on that axis, so both children always receive data. An
//! axis is splittable at a node when the node's points take at least two
//! distinct values on it. A node without a splittable axis, or sitting at the
//! depth cap, is a forced leaf.
//!
//! Leaves are numbered `0..K` in depth-first (left before right) order.

use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::data::Matrix;
use crate::error::{Error, Result};

const REJECTION_CAP: usize = 1000;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Node {
    Split {
        axis: usize,
        threshold: f64,
        left: Box<Node>,
        right: Box<Node>,
    },
    Leaf {
        leaf: usize,
    },
}

impl Node {
    pub fn leaf() -> Node {
        Node::Leaf { leaf: 0 }
    }

    pub fn split(axis: usize, threshold: f64, left: Node, right: Node) -> Node {
        Node::Split {
            axis,
            threshold,
            left: Box::new(left),
            right: Box::new(right),
        }
    }

    fn count_leaves(&self) -> usize {
        match self {
            Node::Leaf { .. } => 1,
            Node::Split { left, right, .. } => left.count_leaves() + right.count_leaves(),
        }
    }

    fn depth(&self) -> usize {
        match self {
            Node::Leaf { .. } => 0,
            Node::Split { left, right, .. } => 1 + left.depth().max(right.depth()),
        }
    }

    fn renumber(&mut self, next: &mut usize) {
        match self {
            Node::Leaf { leaf } => {
                *leaf = *next;
                *next += 1;
            }
            Node::Split { left, right, .. } => {
                left.renumber(next);
                right.renumber(next);
            }
        }
    }
}

/// A binary tree partition. Serializes as the nested root node.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TreePartition {
    root: Node,
}

impl Default for TreePartition {
    fn default() -> Self {
        Self::root_only()
    }
}

impl TreePartition {
    pub fn root_only() -> Self {
        TreePartition { root: Node::leaf() }
    }

    /// Wraps a node, renumbering its leaves in depth-first order.
    pub fn from_root(mut root: Node) -> Self {
        root.renumber(&mut 0);
        TreePartition { root }
    }

    pub fn root(&self) -> &Node {
        &self.root
    }

    pub fn leaf_count(&self) -> usize {
        self.root.count_leaves()
    }

    pub fn internal_count(&self) -> usize {
        self.leaf_count() - 1
    }

    pub fn depth(&self) -> usize {
        self.root.depth()
    }

    /// Checks that leaves are numbered `0..K` in depth-first order and that
    /// axes are below `q`.
    pub fn check_structure(&self, q: usize) -> Result<()> {
        fn walk(node: &Node, q: usize, next: &mut usize) -> Result<()> {
            match node {
                Node::Leaf { leaf } => {
                    if *leaf != *next {
                        return Err(Error::InvalidTree(format!("leaf {leaf} found where {next} expected")));
                    }
                    *next += 1;
                    Ok(())
                }
                Node::Split {
                    axis,
                    threshold,
                    left,
                    right,
                } => {
                    if *axis >= q {
                        return Err(Error::InvalidTree(format!("axis {axis} out of range for q = {q}")));
                    }
                    if !threshold.is_finite() {
                        return Err(Error::InvalidTree("non-finite threshold".into()));
                    }
                    walk(left, q, next)?;
                    walk(right, q, next)
                }
            }
        }
        walk(&self.root, q, &mut 0)
    }

    /// Index of the cell containing `x`.
    pub fn leaf_index(&self, x: &[f64]) -> usize {
        let mut node = &self.root;
        loop {
            match node {
                Node::Leaf { leaf } => return *leaf,
                Node::Split {
                    axis,
                    threshold,
                    left,
                    right,
                } => node = if x[*axis] < *threshold { left } else { right },
            }
        }
    }

    /// Depth of every leaf, indexed by leaf number.
    pub fn leaf_depths(&self) -> Vec<usize> {
        fn walk(node: &Node, d: usize, out: &mut Vec<usize>) {
            match node {
                Node::Leaf { .. } => out.push(d),
                Node::Split { left, right, .. } => {
                    walk(left, d + 1, out);
                    walk(right, d + 1, out);
                }
            }
        }
        let mut out = Vec::new();
        walk(&self.root, 0, &mut out);
        out
    }

    /// Row indices of `x` falling in each cell.
    pub fn cells(&self, x: &Matrix) -> Vec<Vec<usize>> {
        let mut cells = vec![Vec::new(); self.leaf_count()];
        for (i, row) in x.iter_rows().enumerate() {
            cells[self.leaf_index(row)].push(i);
        }
        cells
    }

    pub fn cell_counts(&self, x: &Matrix) -> Vec<usize> {
        let mut counts = vec![0; self.leaf_count()];
        for row in x.iter_rows() {
            counts[self.leaf_index(row)] += 1;
        }
        counts
    }

    /// Every cell holds at least `c` observations. With no data only the
    /// root-only tree qualifies.
    pub fn is_valid(&self, x: &Matrix, c: usize) -> bool {
        if x.rows() == 0 {
            return self.leaf_count() == 1;
        }
        self.cell_counts(x).iter().all(|&m| m >= c)
    }

    /// Nodes whose two children are both leaves, in depth-first order.
    pub fn nog_count(&self) -> usize {
        fn walk(node: &Node) -> usize {
            match node {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => match (left.as_ref(), right.as_ref()) {
                    (Node::Leaf { .. }, Node::Leaf { .. }) => 1,
                    _ => walk(left) + walk(right),
                },
            }
        }
        walk(&self.root)
    }
}

/// Thresholds available on one axis at a node.
#[derive(Clone, Debug, PartialEq)]
pub struct AxisSplits {
    pub axis: usize,
    pub thresholds: Vec<f64>,
}

/// Splittable axes at a node holding `points`, with their sorted thresholds.
pub fn available_splits(x: &Matrix, points: &[usize]) -> Vec<AxisSplits> {
    let mut out = Vec::new();
    let mut vals = Vec::with_capacity(points.len());
    for axis in 0..x.cols() {
        vals.clear();
        vals.extend(points.iter().map(|&i| x.get(i, axis)));
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        if vals.len() >= 2 {
            out.push(AxisSplits {
                axis,
                thresholds: vals[1..].to_vec(),
            });
        }
    }
    out
}

/// Whether some axis takes two distinct values over `points`.
pub fn is_splittable(x: &Matrix, points: &[usize]) -> bool {
    let Some(&first) = points.first() else {
        return false;
    };
    (0..x.cols()).any(|axis| {
        let v = x.get(first, axis);
        points.iter().any(|&i| x.get(i, axis) != v)
    })
}

fn partition_points(x: &Matrix, points: &[usize], axis: usize, threshold: f64) -> (Vec<usize>, Vec<usize>) {
    points.iter().partition(|&&i| x.get(i, axis) < threshold)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TreePriorKind {
    /// A node at depth `d` splits with probability `alpha^d`.
    Chipman { alpha: f64 },
    /// Truncated-Poisson leaf count, uniform over valid partitions.
    Denison { lambda: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreePriorSpec {
    pub kind: TreePriorKind,
    /// Minimum number of observations per cell.
    pub validity_constant: usize,
    /// Nodes at this depth are forced leaves.
    pub max_depth: Option<usize>,
}

impl Default for TreePriorSpec {
    fn default() -> Self {
        TreePriorSpec::chipman(0.25)
    }
}

impl TreePriorSpec {
    pub fn chipman(alpha: f64) -> Self {
        TreePriorSpec {
            kind: TreePriorKind::Chipman { alpha },
            validity_constant: 1,
            max_depth: None,
        }
    }

    pub fn denison(lambda: f64) -> Self {
        TreePriorSpec {
            kind: TreePriorKind::Denison { lambda },
            validity_constant: 1,
            max_depth: None,
        }
    }

    pub fn with_max_depth(mut self, max_depth: usize) -> Self {
        self.max_depth = Some(max_depth);
        self
    }

    pub fn with_validity_constant(mut self, c: usize) -> Self {
        self.validity_constant = c;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            TreePriorKind::Chipman { alpha } if !(alpha > 0.0 && alpha < 0.5) => {
                return Err(Error::invalid(format!("chipman alpha must lie in (0, 0.5), got {alpha}")))
            }
            TreePriorKind::Denison { lambda } if !(lambda > 0.0 && lambda.is_finite()) => {
                return Err(Error::invalid(format!("denison lambda must be positive, got {lambda}")))
            }
            _ => {}
        }
        if self.validity_constant == 0 {
            return Err(Error::invalid("validity constant must be at least 1"));
        }
        Ok(())
    }

    /// Split probability at depth `d` (Chipman only; `None` for Denison).
    pub fn split_prob(&self, depth: usize) -> Option<f64> {
        match self.kind {
            TreePriorKind::Chipman { alpha } => Some(alpha.powi(depth as i32)),
            TreePriorKind::Denison { .. } => None,
        }
    }

    pub fn depth_allowed(&self, depth: usize) -> bool {
        self.max_depth.is_none_or(|m| depth < m)
    }

    /// Log of the Chipman stopping factor `1 - alpha^d` for a leaf at `depth`
    /// that could have split; 0 for forced leaves.
    pub fn chipman_leaf_term(&self, depth: usize, splittable: bool) -> f64 {
        match self.kind {
            TreePriorKind::Chipman { alpha } if splittable && self.depth_allowed(depth) => {
                (-alpha.powi(depth as i32)).ln_1p()
            }
            _ => 0.0,
        }
    }
}

/// `log P(K) = log( λ^K / ((e^λ - 1) K!) )`, `K ≥ 1`.
pub fn denison_log_pk(lambda: f64, k: usize) -> f64 {
    if k == 0 {
        return f64::NEG_INFINITY;
    }
    let kf = k as f64;
    kf * lambda.ln() - lambda.exp_m1().ln() - ln_gamma(kf + 1.0)
}

/// `log Δ(V_K) = (K-1) log q + log n! - log (n-K+1)!`; `-∞` cannot occur,
/// `+∞` when `K > n + 1`.
pub fn denison_log_count(q: usize, n: usize, k: usize) -> f64 {
    if k > n + 1 {
        return f64::INFINITY;
    }
    let (kf, nf) = (k as f64, n as f64);
    (kf - 1.0) * (q as f64).ln() + ln_gamma(nf + 1.0) - ln_gamma(nf - kf + 2.0)
}

/// Log prior probability of `tree` given the covariates `x`.
///
/// For the Chipman process this is the probability that the growth process
/// produces the tree (before conditioning on validity, which with the default
/// `C = 1` always holds). Errors if a rule is not one the process could have
/// drawn or if a cell violates the validity constant.
pub fn log_prior_tree(spec: &TreePriorSpec, tree: &TreePartition, x: &Matrix) -> Result<f64> {
    spec.validate()?;
    tree.check_structure(x.cols())?;
    if !tree.is_valid(x, spec.validity_constant) {
        return Err(Error::InvalidTree(format!(
            "a cell holds fewer than {} observations",
            spec.validity_constant
        )));
    }
    match spec.kind {
        TreePriorKind::Chipman { .. } => {
            let points: Vec<usize> = (0..x.rows()).collect();
            chipman_node(spec, tree.root(), x, &points, 0)
        }
        TreePriorKind::Denison { lambda } => {
            let k = tree.leaf_count();
            check_rules(spec, tree.root(), x, &(0..x.rows()).collect::<Vec<_>>(), 0)?;
            Ok(denison_log_pk(lambda, k) - denison_log_count(x.cols(), x.rows(), k))
        }
    }
}

fn rule_position(x: &Matrix, points: &[usize], axis: usize, threshold: f64) -> Option<(usize, usize)> {
    let splits = available_splits(x, points);
    let s = splits.iter().find(|s| s.axis == axis)?;
    s.thresholds.iter().position(|&t| t == threshold)?;
    Some((splits.len(), s.thresholds.len()))
}

fn check_rules(spec: &TreePriorSpec, node: &Node, x: &Matrix, points: &[usize], depth: usize) -> Result<()> {
    if let Node::Split {
        axis,
        threshold,
        left,
        right,
    } = node
    {
        if !spec.depth_allowed(depth) {
            return Err(Error::InvalidTree(format!("split at depth {depth} exceeds the depth cap")));
        }
        if rule_position(x, points, *axis, *threshold).is_none() {
            return Err(Error::InvalidTree(format!("rule x[{axis}] < {threshold} is not available at its node")));
        }
        let (l, r) = partition_points(x, points, *axis, *threshold);
        check_rules(spec, left, x, &l, depth + 1)?;
        check_rules(spec, right, x, &r, depth + 1)?;
    }
    Ok(())
}

fn chipman_node(spec: &TreePriorSpec, node: &Node, x: &Matrix, points: &[usize], depth: usize) -> Result<f64> {
    match node {
        Node::Leaf { .. } => Ok(spec.chipman_leaf_term(depth, is_splittable(x, points))),
        Node::Split {
            axis,
            threshold,
            left,
            right,
        } => {
            if !spec.depth_allowed(depth) {
                return Err(Error::InvalidTree(format!("split at depth {depth} exceeds the depth cap")));
            }
            let (n_axes, n_thresholds) = rule_position(x, points, *axis, *threshold).ok_or_else(|| {
                Error::InvalidTree(format!("rule x[{axis}] < {threshold} is not available at its node"))
            })?;
            let p = spec.split_prob(depth).expect("chipman");
            let (l, r) = partition_points(x, points, *axis, *threshold);
            Ok(p.ln() - (n_axes as f64).ln() - (n_thresholds as f64).ln()
                + chipman_node(spec, left, x, &l, depth + 1)?
                + chipman_node(spec, right, x, &r, depth + 1)?)
        }
    }
}

fn draw_rule<R: Rng + ?Sized>(x: &Matrix, points: &[usize], rng: &mut R) -> Option<(usize, f64)> {
    let splits = available_splits(x, points);
    if splits.is_empty() {
        return None;
    }
    let s = &splits[rng.random_range(0..splits.len())];
    Some((s.axis, s.thresholds[rng.random_range(0..s.thresholds.len())]))
}

fn grow_chipman<R: Rng + ?Sized>(spec: &TreePriorSpec, x: &Matrix, points: &[usize], depth: usize, rng: &mut R) -> Node {
    if !spec.depth_allowed(depth) {
        return Node::leaf();
    }
    let p = spec.split_prob(depth).expect("chipman");
    if rng.random::<f64>() >= p {
        return Node::leaf();
    }
    match draw_rule(x, points, rng) {
        None => Node::leaf(),
        Some((axis, threshold)) => {
            let (l, r) = partition_points(x, points, axis, threshold);
            let left = grow_chipman(spec, x, &l, depth + 1, rng);
            let right = grow_chipman(spec, x, &r, depth + 1, rng);
            Node::split(axis, threshold, left, right)
        }
    }
}

/// Draws a tree from the Chipman growth process, resampling until valid.
pub fn sample_tree_chipman<R: Rng + ?Sized>(spec: &TreePriorSpec, x: &Matrix, rng: &mut R) -> Result<TreePartition> {
    spec.validate()?;
    if !matches!(spec.kind, TreePriorKind::Chipman { .. }) {
        return Err(Error::invalid("sample_tree_chipman needs a chipman spec"));
    }
    let points: Vec<usize> = (0..x.rows()).collect();
    for _ in 0..REJECTION_CAP {
        let tree = TreePartition::from_root(grow_chipman(spec, x, &points, 0, rng));
        if tree.is_valid(x, spec.validity_constant) {
            return Ok(tree);
        }
    }
    Err(Error::RejectionCapExceeded { attempts: REJECTION_CAP })
}

/// Path of (axis, threshold, went left) turns, cell points, depth.
type FlatLeaf = (Vec<(usize, f64, bool)>, Vec<usize>, usize);

/// Draws `K` from the zero-truncated Poisson, then grows a `K`-leaf tree by
/// splitting uniformly chosen splittable leaves. Attempts that cannot reach
/// `K` leaves or violate validity are redrawn (including `K`).
pub fn sample_tree_denison<R: Rng + ?Sized>(spec: &TreePriorSpec, x: &Matrix, rng: &mut R) -> Result<TreePartition> {
    spec.validate()?;
    let TreePriorKind::Denison { lambda } = spec.kind else {
        return Err(Error::invalid("sample_tree_denison needs a denison spec"));
    };
    let poisson = Poisson::new(lambda).map_err(|e| Error::invalid(e.to_string()))?;
    'attempt: for _ in 0..REJECTION_CAP {
        let k = loop {
            let k = poisson.sample(rng) as usize;
            if k >= 1 {
                break k;
            }
        };
        // flat growth: each entry is (path of left/right turns, points, depth)
        let mut leaves: Vec<FlatLeaf> = vec![(Vec::new(), (0..x.rows()).collect(), 0)];
        while leaves.len() < k {
            let open: Vec<usize> = (0..leaves.len())
                .filter(|&j| spec.depth_allowed(leaves[j].2) && is_splittable(x, &leaves[j].1))
                .collect();
            if open.is_empty() {
                continue 'attempt;
            }
            let j = open[rng.random_range(0..open.len())];
            let (path, points, depth) = leaves.swap_remove(j);
            let (axis, threshold) = draw_rule(x, &points, rng).expect("splittable");
            let (l, r) = partition_points(x, &points, axis, threshold);
            let mut lp = path.clone();
            lp.push((axis, threshold, true));
            let mut rp = path;
            rp.push((axis, threshold, false));
            leaves.push((lp, l, depth + 1));
            leaves.push((rp, r, depth + 1));
        }
        let tree = TreePartition::from_root(build_from_paths(leaves.iter().map(|(p, _, _)| p.as_slice()).collect()));
        if tree.is_valid(x, spec.validity_constant) {
            return Ok(tree);
        }
    }
    Err(Error::RejectionCapExceeded { attempts: REJECTION_CAP })
}

fn build_from_paths(paths: Vec<&[(usize, f64, bool)]>) -> Node {
    if paths.len() == 1 && paths[0].is_empty() {
        return Node::leaf();
    }
    let (axis, threshold, _) = paths[0][0];
    let (l, r): (Vec<_>, Vec<_>) = paths.into_iter().partition(|p| p[0].2);
    Node::split(
        axis,
        threshold,
        build_from_paths(l.into_iter().map(|p| &p[1..]).collect()),
        build_from_paths(r.into_iter().map(|p| &p[1..]).collect()),
    )
}

pub fn sample_tree<R: Rng + ?Sized>(spec: &TreePriorSpec, x: &Matrix, rng: &mut R) -> Result<TreePartition> {
    match spec.kind {
        TreePriorKind::Chipman { .. } => sample_tree_chipman(spec, x, rng),
        TreePriorKind::Denison { .. } => sample_tree_denison(spec, x, rng),
    }
}

/// Every tree the growth process can produce on `x` with splits only above
/// `max_depth`. The count grows very quickly; intended for tiny instances.
pub fn enumerate_trees(x: &Matrix, max_depth: usize) -> Vec<TreePartition> {
    fn rec(x: &Matrix, points: &[usize], depth: usize, max_depth: usize) -> Vec<Node> {
        let mut out = vec![Node::leaf()];
        if depth >= max_depth {
            return out;
        }
        for s in available_splits(x, points) {
            for &t in &s.thresholds {
                let (l, r) = partition_points(x, points, s.axis, t);
                let lefts = rec(x, &l, depth + 1, max_depth);
                let rights = rec(x, &r, depth + 1, max_depth);
                for a in &lefts {
                    for b in &rights {
                        out.push(Node::split(s.axis, t, a.clone(), b.clone()));
                    }
                }
            }
        }
        out
    }
    let points: Vec<usize> = (0..x.rows()).collect();
    rec(x, &points, 0, max_depth).into_iter().map(TreePartition::from_root).collect()
}
