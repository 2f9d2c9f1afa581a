//! Synthetic ground truths, their complexity, step approximations of
//! monotone truths, the dataset regularity check and the reference rates.

use std::collections::HashMap;

use log::warn;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Matrix};
use crate::error::{Error, Result};
use crate::likelihoods::Likelihood;

/// A box `[lo, hi)` per axis; an upper edge at 1 is closed.
pub type Cell = Vec<(f64, f64)>;

fn in_cell(cell: &[(f64, f64)], x: &[f64]) -> bool {
    cell.iter()
        .zip(x)
        .all(|(&(lo, hi), &v)| v >= lo && (v < hi || (hi >= 1.0 && v <= 1.0)))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Ramp {
    pub axis: usize,
    pub lo: f64,
    pub hi: f64,
    pub weight: f64,
}

impl Ramp {
    fn value(&self, t: f64) -> f64 {
        self.weight * ((t - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bump {
    pub center: Vec<f64>,
    pub coef: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum TruthFunction {
    /// Piecewise constant on axis-aligned boxes that partition `[0,1]^q`.
    Step { q: usize, cells: Vec<Cell>, heights: Vec<f64> },
    /// `offset + Σ ramps`, each ramp nondecreasing in its (oriented) axis;
    /// `increasing[j] = false` flips axis `j`.
    Monotone {
        q: usize,
        offset: f64,
        ramps: Vec<Ramp>,
        increasing: Vec<bool>,
    },
    /// `offset + Σ_m c_m ‖x - a_m‖^ν`, optionally clipped to `[-clip, clip]`.
    Hoelder {
        q: usize,
        nu: f64,
        offset: f64,
        bumps: Vec<Bump>,
        clip: Option<f64>,
    },
}

impl TruthFunction {
    pub fn constant(q: usize, value: f64) -> Self {
        TruthFunction::Step {
            q,
            cells: vec![vec![(0.0, 1.0); q]],
            heights: vec![value],
        }
    }

    /// Step truth from explicit cells; checks they tile the unit cube.
    pub fn step(q: usize, cells: Vec<Cell>, heights: Vec<f64>) -> Result<Self> {
        if cells.is_empty() || cells.len() != heights.len() {
            return Err(Error::invalid("step truth needs one height per cell"));
        }
        let mut volume = 0.0;
        for c in &cells {
            if c.len() != q || c.iter().any(|&(lo, hi)| !(0.0 <= lo && lo < hi && hi <= 1.0)) {
                return Err(Error::invalid(format!("bad cell {c:?}")));
            }
            volume += c.iter().map(|(lo, hi)| hi - lo).product::<f64>();
        }
        for (i, a) in cells.iter().enumerate() {
            for b in &cells[i + 1..] {
                if a.iter().zip(b).all(|(&(a0, a1), &(b0, b1))| a0.max(b0) < a1.min(b1)) {
                    return Err(Error::invalid("step cells overlap"));
                }
            }
        }
        if (volume - 1.0).abs() > 1e-9 {
            return Err(Error::invalid(format!("step cells cover volume {volume}, not 1")));
        }
        Ok(TruthFunction::Step { q, cells, heights })
    }

    /// Random tree-shaped step truth with `k0` cells and distinct heights
    /// spread evenly over `[-amplitude, amplitude]`.
    pub fn random_step<R: Rng + ?Sized>(q: usize, k0: usize, amplitude: f64, rng: &mut R) -> Result<Self> {
        if q == 0 || k0 == 0 {
            return Err(Error::invalid("step truth needs q ≥ 1 and k0 ≥ 1"));
        }
        let mut cells: Vec<Cell> = vec![vec![(0.0, 1.0); q]];
        while cells.len() < k0 {
            let i = rng.random_range(0..cells.len());
            let cell = cells.swap_remove(i);
            let axis = rng.random_range(0..q);
            let (lo, hi) = cell[axis];
            let cut = lo + (hi - lo) * rng.random_range(0.3..0.7);
            let mut left = cell.clone();
            let mut right = cell;
            left[axis].1 = cut;
            right[axis].0 = cut;
            cells.push(left);
            cells.push(right);
        }
        cells.sort_by(|a, b| {
            a.iter()
                .map(|c| c.0)
                .zip(b.iter().map(|c| c.0))
                .map(|(x, y)| x.total_cmp(&y))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        });
        let mut heights: Vec<f64> = if k0 == 1 {
            vec![0.0]
        } else {
            (0..k0).map(|k| -amplitude + 2.0 * amplitude * k as f64 / (k0 - 1) as f64).collect()
        };
        for i in (1..heights.len()).rev() {
            heights.swap(i, rng.random_range(0..=i));
        }
        TruthFunction::step(q, cells, heights)
    }

    /// Random monotone (nondecreasing in every axis) truth with range inside
    /// `[-amplitude, amplitude]`.
    pub fn random_monotone<R: Rng + ?Sized>(q: usize, amplitude: f64, rng: &mut R) -> Self {
        let mut ramps = Vec::new();
        let per_axis = 2;
        let total = (q * per_axis) as f64;
        for axis in 0..q {
            for _ in 0..per_axis {
                let a: f64 = rng.random_range(0.0..0.7);
                let w: f64 = rng.random_range(0.2..0.9);
                ramps.push(Ramp {
                    axis,
                    lo: a,
                    hi: (a + w).min(1.0),
                    weight: 2.0 * amplitude / total,
                });
            }
        }
        TruthFunction::Monotone {
            q,
            offset: -amplitude,
            ramps,
            increasing: vec![true; q],
        }
    }

    /// Random superposition of `m` bumps `c ‖x - a‖^ν`, centred to mean ≈ 0.
    pub fn random_hoelder<R: Rng + ?Sized>(q: usize, nu: f64, m: usize, scale: f64, clip: Option<f64>, rng: &mut R) -> Result<Self> {
        if !(nu > 0.0 && nu <= 1.0) {
            return Err(Error::invalid(format!("Hölder exponent must lie in (0, 1], got {nu}")));
        }
        let bumps: Vec<Bump> = (0..m)
            .map(|_| Bump {
                center: (0..q).map(|_| rng.random()).collect(),
                coef: scale * rng.random_range(0.5..1.5) * if rng.random::<bool>() { 1.0 } else { -1.0 },
            })
            .collect();
        let mut t = TruthFunction::Hoelder {
            q,
            nu,
            offset: 0.0,
            bumps,
            clip: None,
        };
        // centre with a fixed quasi-grid so the offset does not use the rng
        let probe = 2048;
        let mean = (0..probe)
            .map(|i| {
                let x: Vec<f64> = (0..q).map(|j| ((i as f64 + 0.5) * (0.618_033_988_75 * (j + 1) as f64)).fract()).collect();
                t.evaluate(&x)
            })
            .sum::<f64>()
            / probe as f64;
        if let TruthFunction::Hoelder { offset, clip: c, .. } = &mut t {
            *offset = -mean;
            *c = clip;
        }
        Ok(t)
    }

    pub fn q(&self) -> usize {
        match self {
            TruthFunction::Step { q, .. } | TruthFunction::Monotone { q, .. } | TruthFunction::Hoelder { q, .. } => *q,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            TruthFunction::Step { .. } => "step",
            TruthFunction::Monotone { .. } => "monotone",
            TruthFunction::Hoelder { .. } => "hoelder",
        }
    }

    pub fn evaluate(&self, x: &[f64]) -> f64 {
        match self {
            TruthFunction::Step { cells, heights, .. } => cells
                .iter()
                .position(|c| in_cell(c, x))
                .map_or(f64::NAN, |k| heights[k]),
            TruthFunction::Monotone {
                offset,
                ramps,
                increasing,
                ..
            } => {
                offset
                    + ramps
                        .iter()
                        .map(|r| {
                            let t = if increasing[r.axis] { x[r.axis] } else { 1.0 - x[r.axis] };
                            r.value(t)
                        })
                        .sum::<f64>()
            }
            TruthFunction::Hoelder {
                nu, offset, bumps, clip, ..
            } => {
                let v = offset
                    + bumps
                        .iter()
                        .map(|b| {
                            let d2: f64 = b.center.iter().zip(x).map(|(a, v)| (v - a) * (v - a)).sum();
                            b.coef * d2.sqrt().powf(*nu)
                        })
                        .sum::<f64>();
                match clip {
                    Some(c) => v.clamp(-c, *c),
                    None => v,
                }
            }
        }
    }

    /// Hölder constant bound `Σ |c_m|` (clipping does not increase it).
    pub fn hoelder_constant(&self) -> Option<f64> {
        match self {
            TruthFunction::Hoelder { bumps, .. } => Some(bumps.iter().map(|b| b.coef.abs()).sum()),
            _ => None,
        }
    }

    /// Clips a Hölder truth to `[-bound, bound]`, warning when the bound is
    /// active somewhere on a probe grid.
    pub fn with_sup_bound(mut self, bound: f64) -> Self {
        if let TruthFunction::Hoelder { clip, q, .. } = &mut self {
            let q = *q;
            *clip = None;
            let probe = 4096;
            let active = (0..probe).any(|i| {
                let x: Vec<f64> = (0..q).map(|j| ((i as f64 + 0.5) * (0.618_033_988_75 * (j + 1) as f64)).fract()).collect();
                self.evaluate(&x).abs() > bound
            });
            if active {
                warn!("Hölder truth exceeds the sup-norm bound {bound}; clipping");
            }
            if let TruthFunction::Hoelder { clip, .. } = &mut self {
                *clip = Some(bound);
            }
        }
        self
    }

    /// Draws `n` uniform design points and responses from `lik`.
    pub fn synthesize<R: Rng + ?Sized>(&self, lik: &Likelihood, n: usize, rng: &mut R) -> Result<Dataset> {
        if lik.natural_dim() != 1 {
            return Err(Error::Unsupported("synthetic truths are scalar; use a likelihood with D = 1".into()));
        }
        let q = self.q();
        let x: Vec<f64> = (0..n * q).map(|_| rng.random()).collect();
        let x = Matrix::from_vec(n, q, x)?;
        let mut y = Vec::with_capacity(n * lik.response_dim());
        for row in x.iter_rows() {
            y.extend(lik.sample_response(&[self.evaluate(row)], rng));
        }
        Dataset::new(x, Matrix::from_vec(n, lik.response_dim(), y)?)
    }
}

/// Smallest number of leaves of a binary axis-aligned tree that represents
/// a step truth exactly.
///
/// Only cuts at cell boundaries need to be considered; a memoized search over
/// grid-aligned sub-boxes then finds the optimum.
pub fn step_complexity(truth: &TruthFunction) -> Result<usize> {
    let TruthFunction::Step { q, cells, .. } = truth else {
        return Err(Error::invalid("step_complexity needs a step truth"));
    };
    let q = *q;
    let grids: Vec<Vec<f64>> = (0..q)
        .map(|j| {
            let mut g: Vec<f64> = cells.iter().flat_map(|c| [c[j].0, c[j].1]).chain([0.0, 1.0]).collect();
            g.sort_by(f64::total_cmp);
            g.dedup();
            g
        })
        .collect();
    let dims: Vec<usize> = grids.iter().map(|g| g.len() - 1).collect();
    // value on every elementary cell, row-major over dims
    let total: usize = dims.iter().product();
    let mut values = Vec::with_capacity(total);
    let mut idx = vec![0; q];
    for _ in 0..total {
        let centre: Vec<f64> = (0..q).map(|j| 0.5 * (grids[j][idx[j]] + grids[j][idx[j] + 1])).collect();
        values.push(truth.evaluate(&centre));
        for j in (0..q).rev() {
            idx[j] += 1;
            if idx[j] < dims[j] {
                break;
            }
            idx[j] = 0;
        }
    }
    let mut memo = HashMap::new();
    let full: Vec<(usize, usize)> = dims.iter().map(|&d| (0, d)).collect();
    Ok(min_leaves(&full, &dims, &values, &mut memo))
}

fn elementary_values<'a>(bx: &[(usize, usize)], dims: &[usize], values: &'a [f64]) -> impl Iterator<Item = f64> + 'a {
    let q = dims.len();
    let count: usize = bx.iter().map(|(a, b)| b - a).product();
    let bx = bx.to_vec();
    let dims = dims.to_vec();
    (0..count).map(move |mut r| {
        let mut flat = 0;
        let mut stride = 1;
        let mut offs = vec![0; q];
        for j in (0..q).rev() {
            let w = bx[j].1 - bx[j].0;
            offs[j] = bx[j].0 + r % w;
            r /= w;
        }
        for j in (0..q).rev() {
            flat += offs[j] * stride;
            stride *= dims[j];
        }
        values[flat]
    })
}

fn min_leaves(bx: &[(usize, usize)], dims: &[usize], values: &[f64], memo: &mut HashMap<Vec<(usize, usize)>, usize>) -> usize {
    if let Some(&v) = memo.get(bx) {
        return v;
    }
    let mut it = elementary_values(bx, dims, values);
    let first = it.next().expect("nonempty box");
    if it.all(|v| v == first) {
        memo.insert(bx.to_vec(), 1);
        return 1;
    }
    let mut best = usize::MAX;
    for j in 0..bx.len() {
        for c in bx[j].0 + 1..bx[j].1 {
            let mut l = bx.to_vec();
            let mut r = bx.to_vec();
            l[j].1 = c;
            r[j].0 = c;
            let a = min_leaves(&l, dims, values, memo);
            if a >= best {
                continue;
            }
            let b = min_leaves(&r, dims, values, memo);
            best = best.min(a + b);
        }
    }
    memo.insert(bx.to_vec(), best);
    best
}

/// Step approximation of a monotone truth with sup error at most `eps`.
///
/// For `q = 1` the range is cut into `⌈span/eps⌉` equal bands and each band's
/// preimage (an interval) becomes a cell with the band midpoint as height.
/// For `q ≥ 2` boxes are halved along their longest side until the truth's
/// range over the box (read off its extreme corners) is at most `eps`.
pub fn monotone_kd_approximation(truth: &TruthFunction, eps: f64) -> Result<TruthFunction> {
    let TruthFunction::Monotone { q, increasing, .. } = truth else {
        return Err(Error::invalid("monotone_kd_approximation needs a monotone truth"));
    };
    if !(eps > 0.0) {
        return Err(Error::invalid(format!("eps must be positive, got {eps}")));
    }
    let q = *q;
    if q == 1 {
        let inc = increasing[0];
        // oriented so that h is nondecreasing on [0, 1]
        let h = |t: f64| truth.evaluate(&[if inc { t } else { 1.0 - t }]);
        let (lo, hi) = (h(0.0), h(1.0));
        let span = hi - lo;
        if span <= 0.0 {
            return Ok(TruthFunction::constant(1, lo));
        }
        let bands = (span / eps).ceil() as usize;
        let level = |k: usize| lo + span * k as f64 / bands as f64;
        let mut cuts = vec![0.0];
        for k in 1..bands {
            let y = level(k);
            let (mut a, mut b) = (0.0, 1.0);
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                if h(m) >= y {
                    b = m;
                } else {
                    a = m;
                }
            }
            cuts.push(b);
        }
        cuts.push(1.0);
        let mut cells = Vec::new();
        let mut heights = Vec::new();
        for k in 0..bands {
            let (a, b) = (cuts[k], cuts[k + 1]);
            if b <= a {
                continue;
            }
            let mid = 0.5 * (level(k) + level(k + 1));
            let cell = if inc { vec![(a, b)] } else { vec![(1.0 - b, 1.0 - a)] };
            cells.push(cell);
            heights.push(mid);
        }
        if !inc {
            cells.reverse();
            heights.reverse();
        }
        return TruthFunction::step(1, cells, heights);
    }
    let corner = |bx: &[(f64, f64)], upper: bool| -> Vec<f64> {
        bx.iter()
            .zip(increasing)
            .map(|(&(lo, hi), &inc)| if inc == upper { hi } else { lo })
            .collect()
    };
    let mut cells = Vec::new();
    let mut heights = Vec::new();
    let mut stack = vec![vec![(0.0, 1.0); q]];
    while let Some(bx) = stack.pop() {
        let (fmin, fmax) = (truth.evaluate(&corner(&bx, false)), truth.evaluate(&corner(&bx, true)));
        let longest = (0..q).max_by(|&a, &b| (bx[a].1 - bx[a].0).total_cmp(&(bx[b].1 - bx[b].0))).expect("q ≥ 1");
        if fmax - fmin <= eps || bx[longest].1 - bx[longest].0 < 1e-9 {
            cells.push(bx);
            heights.push(0.5 * (fmin + fmax));
            continue;
        }
        let mid = 0.5 * (bx[longest].0 + bx[longest].1);
        let mut l = bx.clone();
        let mut r = bx;
        l[longest].1 = mid;
        r[longest].0 = mid;
        stack.push(r);
        stack.push(l);
    }
    TruthFunction::step(q, cells, heights)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assumption2Check {
    pub lhs: f64,
    pub rhs: f64,
    pub passes: bool,
    pub cells: usize,
}

/// Builds the balanced median k-d tree of depth `q·s` on the rows of `x`
/// (axes cycled, ties broken lexicographically) and compares the largest
/// cell diameter with `M · Σ_k μ_k diam_k`, where `μ_k` is the fraction of
/// points in cell `k` and `diam_k` the diagonal of the bounding box of its
/// points.
pub fn check_assumption2(x: &Matrix, s: usize, m: f64) -> Result<Assumption2Check> {
    if x.rows() == 0 {
        return Err(Error::invalid("check_assumption2 needs data"));
    }
    if !(m > 0.0) {
        return Err(Error::invalid(format!("M must be positive, got {m}")));
    }
    let q = x.cols();
    let depth = q * s;
    let n = x.rows() as f64;
    let lex = |a: usize, b: usize, axis: usize| {
        x.get(a, axis).total_cmp(&x.get(b, axis)).then_with(|| {
            x.row(a)
                .iter()
                .zip(x.row(b))
                .map(|(u, v)| u.total_cmp(v))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    };
    let mut leaves: Vec<Vec<usize>> = Vec::new();
    let mut stack = vec![((0..x.rows()).collect::<Vec<_>>(), 0usize)];
    while let Some((mut pts, d)) = stack.pop() {
        if d == depth || pts.len() < 2 {
            leaves.push(pts);
            continue;
        }
        let axis = d % q;
        pts.sort_by(|&a, &b| lex(a, b, axis));
        let right = pts.split_off(pts.len() / 2);
        stack.push((right, d + 1));
        stack.push((pts, d + 1));
    }
    let diam = |pts: &[usize]| -> f64 {
        (0..q)
            .map(|j| {
                let (lo, hi) = pts
                    .iter()
                    .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &i| (lo.min(x.get(i, j)), hi.max(x.get(i, j))));
                (hi - lo) * (hi - lo)
            })
            .sum::<f64>()
            .sqrt()
    };
    let mut lhs: f64 = 0.0;
    let mut weighted = 0.0;
    for pts in &leaves {
        let d = diam(pts);
        lhs = lhs.max(d);
        weighted += pts.len() as f64 / n * d;
    }
    let rhs = m * weighted;
    Ok(Assumption2Check {
        lhs,
        rhs,
        passes: lhs < rhs,
        cells: leaves.len(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "regime", rename_all = "lowercase")]
pub enum Regime {
    Step { k: usize },
    Monotone { q: usize },
    Hoelder { nu: f64, q: usize },
}

/// Reference concentration rate (natural logs).
pub fn theoretical_rate(regime: Regime, n: usize, gamma: f64) -> Result<f64> {
    if n < 2 {
        return Err(Error::invalid("rates need n ≥ 2"));
    }
    let nf = n as f64;
    match regime {
        Regime::Step { k } => {
            if k == 0 || k >= n {
                return Err(Error::invalid(format!("step rate needs 1 ≤ K < n, got K = {k}, n = {n}")));
            }
            let kf = k as f64;
            Ok(kf.sqrt() * (nf / kf).ln().powf(gamma) / nf.sqrt())
        }
        Regime::Monotone { q } => Ok(nf.powf(-1.0 / (2.0 + q as f64)) * nf.ln().sqrt()),
        Regime::Hoelder { nu, q } => {
            if !(nu > 0.0 && nu <= 1.0) {
                return Err(Error::invalid(format!("Hölder exponent must lie in (0, 1], got {nu}")));
            }
            Ok(nf.powf(-nu / (2.0 * nu + q as f64)) * nf.ln().sqrt())
        }
    }
}

/// Polynomial exponent of the reference rate in `n`.
pub fn rate_exponent(regime: Regime) -> f64 {
    match regime {
        Regime::Step { .. } => -0.5,
        Regime::Monotone { q } => -1.0 / (2.0 + q as f64),
        Regime::Hoelder { nu, q } => -nu / (2.0 * nu + q as f64),
    }
}
