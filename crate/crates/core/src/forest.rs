//! Additive tree ensembles.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::data::Matrix;
use crate::error::{Error, Result};
use crate::leafprior::LeafPrior;
use crate::tree::{log_prior_tree, TreePartition, TreePriorSpec};

/// Leaf values of one tree, one `D`-vector per leaf.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LeafValues(pub Vec<Vec<f64>>);

impl LeafValues {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, k: usize) -> &[f64] {
        &self.0[k]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[f64]> {
        self.0.iter().map(Vec::as_slice)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ForestMember {
    pub tree: TreePartition,
    pub values: LeafValues,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    trees: Vec<ForestMember>,
}

impl Forest {
    /// Builds a forest, checking that every tree has one `dim`-vector per leaf.
    pub fn new(trees: Vec<ForestMember>) -> Result<Self> {
        if trees.is_empty() {
            return Err(Error::invalid("a forest needs at least one tree"));
        }
        let dim = trees[0].values.0.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::invalid("leaf values must be nonempty vectors"));
        }
        for (t, m) in trees.iter().enumerate() {
            if m.values.len() != m.tree.leaf_count() {
                return Err(Error::DimensionMismatch(format!(
                    "tree {t} has {} leaves but {} leaf values",
                    m.tree.leaf_count(),
                    m.values.len()
                )));
            }
            if m.values.iter().any(|v| v.len() != dim) {
                return Err(Error::DimensionMismatch(format!("tree {t} has leaf vectors not of length {dim}")));
            }
        }
        Ok(Forest { trees })
    }

    /// `n_trees` root-only trees with the given constant value.
    pub fn constant(n_trees: usize, value: &[f64]) -> Result<Self> {
        Forest::new(
            (0..n_trees)
                .map(|_| ForestMember {
                    tree: TreePartition::root_only(),
                    values: LeafValues(vec![value.to_vec()]),
                })
                .collect(),
        )
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    pub fn dim(&self) -> usize {
        self.trees[0].values.get(0).len()
    }

    pub fn members(&self) -> &[ForestMember] {
        &self.trees
    }

    pub fn into_members(self) -> Vec<ForestMember> {
        self.trees
    }

    /// Sum of the per-tree step functions at `x`.
    pub fn evaluate(&self, x: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.evaluate_into(x, &mut out);
        out
    }

    pub fn evaluate_into(&self, x: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|v| *v = 0.0);
        for m in &self.trees {
            let v = m.values.get(m.tree.leaf_index(x));
            for (o, a) in out.iter_mut().zip(v) {
                *o += a;
            }
        }
    }

    /// Evaluates every row of `x`, returning an `n × D` matrix.
    pub fn evaluate_matrix(&self, x: &Matrix) -> Matrix {
        let d = self.dim();
        let mut out = Matrix::zeros(x.rows(), d);
        for (i, row) in x.iter_rows().enumerate() {
            self.evaluate_into(row, out.row_mut(i));
        }
        out
    }

    pub fn total_leaves(&self) -> usize {
        self.trees.iter().map(|m| m.tree.leaf_count()).sum()
    }

    /// Number of distinct cells of the common refinement of all nontrivial
    /// trees (cells of `[0,1]^q` cut by every tree). Root-only trees do not
    /// contribute. Computed by intersecting boxes.
    pub fn refined_cell_count(&self, q: usize) -> usize {
        let mut cells: Vec<Vec<(f64, f64)>> = vec![vec![(0.0, 1.0); q]];
        for m in &self.trees {
            if m.tree.leaf_count() == 1 {
                continue;
            }
            let boxes = leaf_boxes(&m.tree, q);
            let mut next = Vec::with_capacity(cells.len() * 2);
            for c in &cells {
                for b in &boxes {
                    if let Some(i) = intersect(c, b) {
                        next.push(i);
                    }
                }
            }
            cells = next;
        }
        cells.len()
    }

    /// Number of distinct refined cells that contain at least one row of `x`.
    pub fn occupied_cell_count(&self, x: &Matrix) -> usize {
        let mut seen = HashSet::new();
        for row in x.iter_rows() {
            let key: Vec<usize> = self.trees.iter().map(|m| m.tree.leaf_index(row)).collect();
            seen.insert(key);
        }
        seen.len()
    }

    /// `Σ_t [log π(T_t) + Σ_k log π(β_tk)]`.
    pub fn log_joint_prior(&self, tree_spec: &TreePriorSpec, leaf_prior: &LeafPrior, x: &Matrix) -> Result<f64> {
        let mut total = 0.0;
        for m in &self.trees {
            total += log_prior_tree(tree_spec, &m.tree, x)?;
            total += m.values.iter().map(|b| leaf_prior.log_density(b)).sum::<f64>();
        }
        Ok(total)
    }
}

/// Axis-aligned box `[lo, hi)` per axis for every leaf, in leaf order.
pub fn leaf_boxes(tree: &TreePartition, q: usize) -> Vec<Vec<(f64, f64)>> {
    use crate::tree::Node;
    fn walk(node: &Node, bounds: &mut Vec<(f64, f64)>, out: &mut Vec<Vec<(f64, f64)>>) {
        match node {
            Node::Leaf { .. } => out.push(bounds.clone()),
            Node::Split {
                axis,
                threshold,
                left,
                right,
            } => {
                let saved = bounds[*axis];
                bounds[*axis].1 = saved.1.min(*threshold);
                walk(left, bounds, out);
                bounds[*axis] = (saved.0.max(*threshold), saved.1);
                walk(right, bounds, out);
                bounds[*axis] = saved;
            }
        }
    }
    let mut out = Vec::new();
    walk(tree.root(), &mut vec![(0.0, 1.0); q], &mut out);
    out
}

fn intersect(a: &[(f64, f64)], b: &[(f64, f64)]) -> Option<Vec<(f64, f64)>> {
    a.iter()
        .zip(b)
        .map(|(&(a0, a1), &(b0, b1))| {
            let lo = a0.max(b0);
            let hi = a1.min(b1);
            (lo < hi).then_some((lo, hi))
        })
        .collect()
}
