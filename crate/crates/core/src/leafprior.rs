//! Step-height priors and numerical tail certificates.
//!
//! The lower certificate compares `P(‖β‖_∞ ≤ t)` with `(e^{-c1 t^{c2}} t)^p`
//! for small `t`; the upper certificate compares `P(‖β‖_∞ ≥ t)` with
//! `e^{-c3 t}` for large `t`. Both report the probability/envelope ratio per
//! grid point and decide pass/fail from the trend of that ratio at the end of
//! the grid that matters asymptotically.

use rand::Rng;
use rand_distr::{Beta, Distribution, Exp1, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{Beta as BetaDist, ContinuousCDF};
use statrs::function::erf::erfc;
use statrs::function::gamma::ln_gamma;

use crate::error::{Error, Result};
use crate::numerics::LN_2PI;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LeafPriorKind {
    /// i.i.d. `N(0, scale²)` coordinates; `scale = 0` is a point mass at 0.
    Gaussian { scale: f64 },
    /// i.i.d. Laplace coordinates with density `e^{-|b|/scale} / (2 scale)`.
    Laplace { scale: f64 },
    /// Symmetric Dirichlet on the `dim`-simplex.
    Dirichlet { alpha: f64 },
    /// `Beta(a, b)` on `[0, 1]`, one-dimensional.
    Beta { a: f64, b: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LeafPrior {
    pub kind: LeafPriorKind,
    pub dim: usize,
}

/// Default Gaussian leaf scale `3 / (k √n_trees)`.
pub fn default_scale(n_trees: usize, k: f64) -> f64 {
    3.0 / (k * (n_trees as f64).sqrt())
}

impl LeafPrior {
    pub fn gaussian(scale: f64, dim: usize) -> Result<Self> {
        Self::new(LeafPriorKind::Gaussian { scale }, dim)
    }

    pub fn laplace(scale: f64, dim: usize) -> Result<Self> {
        Self::new(LeafPriorKind::Laplace { scale }, dim)
    }

    pub fn dirichlet(alpha: f64, dim: usize) -> Result<Self> {
        Self::new(LeafPriorKind::Dirichlet { alpha }, dim)
    }

    pub fn beta(a: f64, b: f64) -> Result<Self> {
        Self::new(LeafPriorKind::Beta { a, b }, 1)
    }

    /// Gaussian prior with the default scale for an ensemble of `n_trees`.
    pub fn default_for(n_trees: usize, dim: usize) -> Self {
        LeafPrior {
            kind: LeafPriorKind::Gaussian {
                scale: default_scale(n_trees.max(1), 2.0),
            },
            dim,
        }
    }

    pub fn new(kind: LeafPriorKind, dim: usize) -> Result<Self> {
        let p = LeafPrior { kind, dim };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 {
            return Err(Error::invalid("leaf prior dimension must be at least 1"));
        }
        let ok = match self.kind {
            LeafPriorKind::Gaussian { scale } => scale >= 0.0 && scale.is_finite(),
            LeafPriorKind::Laplace { scale } => scale > 0.0 && scale.is_finite(),
            LeafPriorKind::Dirichlet { alpha } => alpha > 0.0 && alpha.is_finite() && self.dim >= 2,
            LeafPriorKind::Beta { a, b } => a > 0.0 && b > 0.0 && self.dim == 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!("invalid leaf prior {:?} with dim {}", self.kind, self.dim)))
        }
    }

    pub fn is_point_mass(&self) -> bool {
        matches!(self.kind, LeafPriorKind::Gaussian { scale } if scale == 0.0)
    }

    /// Log density with respect to Lebesgue measure on `ℝ^dim` (on the first
    /// `dim - 1` coordinates for the Dirichlet). A point mass gives 0 at the
    /// origin and `-∞` elsewhere.
    pub fn log_density(&self, b: &[f64]) -> f64 {
        match self.kind {
            LeafPriorKind::Gaussian { scale } => {
                if scale == 0.0 {
                    return if b.iter().all(|&v| v == 0.0) { 0.0 } else { f64::NEG_INFINITY };
                }
                let ss: f64 = b.iter().map(|v| v * v).sum();
                -0.5 * ss / (scale * scale) - b.len() as f64 * (0.5 * LN_2PI + scale.ln())
            }
            LeafPriorKind::Laplace { scale } => {
                let l1: f64 = b.iter().map(|v| v.abs()).sum();
                -l1 / scale - b.len() as f64 * (2.0 * scale).ln()
            }
            LeafPriorKind::Dirichlet { alpha } => {
                let sum: f64 = b.iter().sum();
                if b.iter().any(|&v| v <= 0.0) || (sum - 1.0).abs() > 1e-9 {
                    return f64::NEG_INFINITY;
                }
                let k = b.len() as f64;
                ln_gamma(k * alpha) - k * ln_gamma(alpha) + (alpha - 1.0) * b.iter().map(|v| v.ln()).sum::<f64>()
            }
            LeafPriorKind::Beta { a, b: bb } => {
                let x = b[0];
                if !(x > 0.0 && x < 1.0) {
                    return f64::NEG_INFINITY;
                }
                ln_gamma(a + bb) - ln_gamma(a) - ln_gamma(bb) + (a - 1.0) * x.ln() + (bb - 1.0) * (-x).ln_1p()
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        match self.kind {
            LeafPriorKind::Gaussian { scale } => (0..self.dim)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            LeafPriorKind::Laplace { scale } => (0..self.dim)
                .map(|_| {
                    let e: f64 = rng.sample(Exp1);
                    if rng.random::<bool>() {
                        scale * e
                    } else {
                        -scale * e
                    }
                })
                .collect(),
            LeafPriorKind::Dirichlet { alpha } => {
                let g = Gamma::new(alpha, 1.0).expect("alpha > 0");
                let mut v: Vec<f64> = (0..self.dim).map(|_| g.sample(rng)).collect();
                let s: f64 = v.iter().sum();
                v.iter_mut().for_each(|x| *x /= s);
                v
            }
            LeafPriorKind::Beta { a, b } => vec![Beta::new(a, b).expect("a, b > 0").sample(rng)],
        }
    }

    /// `K` i.i.d. draws, one row per leaf.
    pub fn sample_leaf_values<R: Rng + ?Sized>(&self, k: usize, rng: &mut R) -> Vec<Vec<f64>> {
        (0..k).map(|_| self.sample(rng)).collect()
    }

    /// Precision of a Gaussian matched to the prior's variance, used to
    /// shape proposals. Infinite for a point mass.
    pub fn precision_hint(&self) -> f64 {
        match self.kind {
            LeafPriorKind::Gaussian { scale } => 1.0 / (scale * scale),
            LeafPriorKind::Laplace { scale } => 1.0 / (2.0 * scale * scale),
            LeafPriorKind::Dirichlet { alpha } => {
                let k = self.dim as f64;
                let a0 = k * alpha;
                let m = 1.0 / k;
                (a0 + 1.0) / (m * (1.0 - m))
            }
            LeafPriorKind::Beta { a, b } => {
                let s = a + b;
                s * s * (s + 1.0) / (a * b)
            }
        }
    }

    /// Prior mean of one coordinate.
    pub fn mean(&self) -> f64 {
        match self.kind {
            LeafPriorKind::Gaussian { .. } | LeafPriorKind::Laplace { .. } => 0.0,
            LeafPriorKind::Dirichlet { .. } => 1.0 / self.dim as f64,
            LeafPriorKind::Beta { a, b } => a / (a + b),
        }
    }

    /// Exact `P(‖β‖_∞ ≤ t)` where a closed form is available.
    pub fn sup_cdf(&self, t: f64) -> Option<f64> {
        if t < 0.0 {
            return Some(0.0);
        }
        let p = self.dim as i32;
        match self.kind {
            LeafPriorKind::Gaussian { scale } => {
                if scale == 0.0 {
                    return Some(1.0);
                }
                Some((1.0 - erfc(t / (scale * std::f64::consts::SQRT_2))).powi(p))
            }
            LeafPriorKind::Laplace { scale } => Some((-(-t / scale).exp_m1()).powi(p)),
            LeafPriorKind::Beta { a, b } => Some(BetaDist::new(a, b).ok()?.cdf(t.min(1.0))),
            LeafPriorKind::Dirichlet { .. } => None,
        }
    }

    /// Exact `P(‖β‖_∞ > t)`, computed without cancellation for small tails.
    pub fn sup_tail(&self, t: f64) -> Option<f64> {
        let p = self.dim as f64;
        let one_tail = match self.kind {
            LeafPriorKind::Gaussian { scale } => {
                if scale == 0.0 {
                    return Some(if t < 0.0 { 1.0 } else { 0.0 });
                }
                erfc(t / (scale * std::f64::consts::SQRT_2))
            }
            LeafPriorKind::Laplace { scale } => (-t.max(0.0) / scale).exp(),
            LeafPriorKind::Beta { a, b } => return Some(BetaDist::new(a, b).ok()?.sf(t.clamp(0.0, 1.0))),
            LeafPriorKind::Dirichlet { .. } => return None,
        };
        // 1 - (1 - u)^p
        Some(-(p * (-one_tail).ln_1p()).exp_m1())
    }

    /// Monte Carlo estimate of `P(‖β‖_∞ ≤ t)` and its standard error.
    pub fn mc_sup_cdf<R: Rng + ?Sized>(&self, t: f64, draws: usize, rng: &mut R) -> (f64, f64) {
        let hits = (0..draws)
            .filter(|_| self.sample(rng).iter().all(|v| v.abs() <= t))
            .count();
        let p = hits as f64 / draws as f64;
        (p, (p * (1.0 - p) / draws as f64).sqrt())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateRow {
    pub t: f64,
    pub probability: f64,
    pub envelope: f64,
    pub ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TailCertificate {
    pub passes: bool,
    /// Extreme normalized ratio over the grid (minimum for the lower
    /// certificate, maximum for the upper one).
    pub worst_ratio: f64,
    pub implied_constant: f64,
    pub rows: Vec<CertificateRow>,
}

const TREND_TOLERANCE: f64 = 0.05;
const MC_DRAWS: usize = 200_000;

fn probability<R: Rng + ?Sized>(prior: &LeafPrior, t: f64, upper: bool, rng: &mut R) -> f64 {
    let exact = if upper { prior.sup_tail(t) } else { prior.sup_cdf(t) };
    exact.unwrap_or_else(|| {
        let (p, _) = prior.mc_sup_cdf(t, MC_DRAWS, rng);
        if upper {
            1.0 - p
        } else {
            p
        }
    })
}

/// Checks `P(‖β‖_∞ ≤ t) ≳ (e^{-c1 t^{c2}} t)^p` on `t_grid ⊂ (0, 1]`.
///
/// The implied constant is the ratio at the largest `t`. The certificate
/// passes when every ratio is positive and the ratio at the smallest `t` has
/// not dropped more than 5% below its neighbour, i.e. it is not trending to
/// zero. Priors without a closed-form CDF fall back to Monte Carlo using
/// `rng`.
pub fn tail_lower_certificate<R: Rng + ?Sized>(
    prior: &LeafPrior,
    c1: f64,
    c2: f64,
    t_grid: &[f64],
    rng: &mut R,
) -> Result<TailCertificate> {
    if !(c1 > 0.0) || !(c2 > 0.0 && c2 <= 2.0) {
        return Err(Error::invalid(format!("need c1 > 0 and c2 in (0, 2], got {c1}, {c2}")));
    }
    if t_grid.is_empty() || t_grid.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
        return Err(Error::invalid("lower certificate grid must be nonempty and lie in (0, 1]"));
    }
    let mut ts = t_grid.to_vec();
    ts.sort_by(|a, b| b.total_cmp(a));
    let p = prior.dim as i32;
    let rows: Vec<CertificateRow> = ts
        .iter()
        .map(|&t| {
            let probability = probability(prior, t, false, rng);
            let envelope = ((-c1 * t.powf(c2)).exp() * t).powi(p);
            CertificateRow {
                t,
                probability,
                envelope,
                ratio: probability / envelope,
            }
        })
        .collect();
    let implied_constant = rows[0].ratio;
    let worst_ratio = rows.iter().map(|r| r.ratio / implied_constant).fold(f64::INFINITY, f64::min);
    let positive = rows.iter().all(|r| r.ratio > 0.0 && r.ratio.is_finite());
    let stable = match rows.len() {
        1 => true,
        n => rows[n - 1].ratio >= (1.0 - TREND_TOLERANCE) * rows[n - 2].ratio,
    };
    Ok(TailCertificate {
        passes: positive && stable,
        worst_ratio,
        implied_constant,
        rows,
    })
}

/// Checks `P(‖β‖_∞ ≥ t) ≲ e^{-c3 t}` on `t_grid ⊂ [1, ∞)`.
///
/// The implied constant is the ratio at the smallest `t`. The certificate
/// passes when every ratio is finite and the ratio at the largest `t` has
/// not risen more than 5% above its neighbour.
pub fn tail_upper_certificate<R: Rng + ?Sized>(
    prior: &LeafPrior,
    c3: f64,
    t_grid: &[f64],
    rng: &mut R,
) -> Result<TailCertificate> {
    if !(c3 > 0.0) {
        return Err(Error::invalid(format!("need c3 > 0, got {c3}")));
    }
    if t_grid.is_empty() || t_grid.iter().any(|&t| !(t >= 1.0 && t.is_finite())) {
        return Err(Error::invalid("upper certificate grid must be nonempty and lie in [1, ∞)"));
    }
    let mut ts = t_grid.to_vec();
    ts.sort_by(f64::total_cmp);
    let rows: Vec<CertificateRow> = ts
        .iter()
        .map(|&t| {
            let probability = probability(prior, t, true, rng);
            let envelope = (-c3 * t).exp();
            CertificateRow {
                t,
                probability,
                envelope,
                ratio: probability / envelope,
            }
        })
        .collect();
    let implied_constant = rows[0].ratio;
    let worst_ratio = if implied_constant > 0.0 {
        rows.iter().map(|r| r.ratio / implied_constant).fold(0.0, f64::max)
    } else {
        0.0
    };
    let finite = rows.iter().all(|r| r.ratio.is_finite());
    let stable = match rows.len() {
        1 => true,
        n => rows[n - 1].ratio <= (1.0 + TREND_TOLERANCE) * rows[n - 2].ratio,
    };
    Ok(TailCertificate {
        passes: finite && stable,
        worst_ratio,
        implied_constant,
        rows,
    })
}

/// Decades `1e-4, 1e-3, …, 1`.
pub fn default_lower_grid() -> Vec<f64> {
    vec![1e-4, 1e-3, 1e-2, 1e-1, 1.0]
}

/// `1, 2, …, 10`.
pub fn default_upper_grid() -> Vec<f64> {
    (1..=10).map(f64::from).collect()
}
