//! Averaged Hellinger distance, KL divergence and KL variation between two
//! members of a likelihood family, evaluated at design points.
//!
//! The Hellinger distance is normalized, `h² = ½∫(√p − √q)² dμ`, so that it
//! lies in `[0, 1]`. This is the usual definition divided by `√2`.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::Matrix;
use crate::error::{Error, Result};
use crate::forest::{Forest, LeafValues};
use crate::likelihoods::{certify_assumption1, DominatingMeasure, Likelihood};
use crate::numerics::integrate_gl;
use crate::rng::seeded;
use crate::tree::TreePartition;
use crate::truth::TruthFunction;

/// A map from `[0,1]^q` to the forest output space `ℝ^D`.
pub trait Evaluator: Sync {
    fn eval(&self, x: &[f64]) -> Vec<f64>;
}

impl Evaluator for Forest {
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        self.evaluate(x)
    }
}

impl Evaluator for TruthFunction {
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        vec![self.evaluate(x)]
    }
}

/// Wraps a closure as an [`Evaluator`].
pub struct FnEvaluator<F>(pub F);

impl<F: Fn(&[f64]) -> Vec<f64> + Sync> Evaluator for FnEvaluator<F> {
    fn eval(&self, x: &[f64]) -> Vec<f64> {
        (self.0)(x)
    }
}

/// Evaluates `f` at every row of `x`.
pub fn evaluate_at(f: &dyn Evaluator, x: &Matrix) -> Result<Matrix> {
    let vals: Vec<Vec<f64>> = x.iter_rows().map(|r| f.eval(r)).collect();
    if vals.is_empty() {
        return Ok(Matrix::zeros(0, 0));
    }
    Matrix::from_rows(&vals)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ClosedForm,
    Quadrature,
    MonteCarlo,
}

/// Per-point divergences `(h, K, V)` between `P_{f1}` and `P_{f2}`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pointwise {
    pub h: f64,
    pub kl: f64,
    pub v: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DivergenceReport {
    pub hellinger_n: f64,
    pub kl_n: f64,
    pub v_n: f64,
    pub method: Method,
    /// Numerical tolerance for closed form and quadrature, Monte Carlo
    /// standard error of `hellinger_n` otherwise.
    pub error_estimate: f64,
}

const QUAD_TOL: f64 = 1e-13;
const GL_ORDER: usize = 20;
const TAIL_TOL: f64 = 1e-12;

fn probabilities(lik: &Likelihood, f: &[f64]) -> Vec<f64> {
    lik.mean_response(f)
}

/// Closed-form divergences for the Gaussian, Poisson and multinomial models.
pub fn pointwise_closed_form(lik: &Likelihood, f1: &[f64], f2: &[f64]) -> Pointwise {
    match lik.dominating_measure() {
        DominatingMeasure::Lebesgue => {
            let sigma = lik.sigma().expect("gaussian");
            let gap = f1[0] - f2[0];
            let s2 = sigma * sigma;
            let kl = gap * gap / (2.0 * s2);
            Pointwise {
                h: (-(-gap * gap / (8.0 * s2)).exp_m1()).max(0.0).sqrt(),
                kl,
                v: kl * kl + 2.0 * kl,
            }
        }
        DominatingMeasure::CountingNaturals => {
            let l1 = lik.mean_response(f1)[0].max(1e-300);
            let l2 = lik.mean_response(f2)[0].max(1e-300);
            let d = l1.sqrt() - l2.sqrt();
            let r = (l1 / l2).ln();
            let kl = (l1 * r - (l1 - l2)).max(0.0);
            Pointwise {
                h: (-(-0.5 * d * d).exp_m1()).max(0.0).sqrt(),
                kl,
                v: r * r * l1 + kl * kl,
            }
        }
        DominatingMeasure::CountingCategories => {
            let p = probabilities(lik, f1);
            let q = probabilities(lik, f2);
            let mut h2 = 0.0;
            let mut kl = 0.0;
            let mut v = 0.0;
            for (a, b) in p.iter().zip(&q) {
                let d = a.sqrt() - b.sqrt();
                h2 += 0.5 * d * d;
                if *a > 0.0 {
                    let r = (a / b).ln();
                    kl += a * r;
                    v += a * r * r;
                }
            }
            Pointwise {
                h: h2.clamp(0.0, 1.0).sqrt(),
                kl: kl.max(0.0),
                v,
            }
        }
    }
}

/// Divergences from the log densities alone: adaptive quadrature for
/// continuous responses, truncated or finite sums for discrete ones.
pub fn pointwise_quadrature(lik: &Likelihood, f1: &[f64], f2: &[f64]) -> Pointwise {
    let terms = |lp1: f64, lp2: f64| -> (f64, f64, f64) {
        let d = (0.5 * lp1).exp() - (0.5 * lp2).exp();
        let p = lp1.exp();
        let r = lp1 - lp2;
        if p == 0.0 {
            (0.5 * d * d, 0.0, 0.0)
        } else {
            (0.5 * d * d, p * r, p * r * r)
        }
    };
    let (h2, kl, v) = match lik.dominating_measure() {
        DominatingMeasure::Lebesgue => {
            let sigma = lik.sigma().expect("gaussian");
            let (m1, m2) = (f1[0], f2[0]);
            let (a, b) = (m1.min(m2) - 40.0 * sigma, m1.max(m2) + 40.0 * sigma);
            let panels = ((2.0 * (b - a) / sigma).ceil() as usize).max(16);
            let lp = |y: f64| (lik.log_density_unchecked(&[y], f1), lik.log_density_unchecked(&[y], f2));
            let h2 = integrate_gl(
                |y| {
                    let (u, w) = lp(y);
                    terms(u, w).0
                },
                a,
                b,
                panels,
                GL_ORDER,
            );
            let kl = integrate_gl(
                |y| {
                    let (u, w) = lp(y);
                    terms(u, w).1
                },
                a,
                b,
                panels,
                GL_ORDER,
            );
            let v = integrate_gl(
                |y| {
                    let (u, w) = lp(y);
                    terms(u, w).2
                },
                a,
                b,
                panels,
                GL_ORDER,
            );
            (h2, kl, v)
        }
        DominatingMeasure::CountingNaturals => {
            let l1 = lik.mean_response(f1)[0];
            let l2 = lik.mean_response(f2)[0];
            let lmax = l1.max(l2);
            let (mut h2, mut kl, mut v) = (0.0, 0.0, 0.0);
            let mut k = 0.0_f64;
            loop {
                let (u, w) = (lik.log_density_unchecked(&[k], f1), lik.log_density_unchecked(&[k], f2));
                let (a, b, c) = terms(u, w);
                h2 += a;
                kl += b;
                v += c;
                // past the mode the tail is dominated by a geometric series
                if k + 1.0 > lmax {
                    let ratio = lmax / (k + 1.0);
                    let mass = u.exp() + w.exp();
                    let log_ratio = (u - w).abs();
                    let bound = mass / (1.0 - ratio) * (1.0 + log_ratio + k.ln_1p()).powi(2);
                    if bound < TAIL_TOL {
                        break;
                    }
                }
                k += 1.0;
            }
            (h2, kl, v)
        }
        DominatingMeasure::CountingCategories => {
            let classes = lik.response_dim();
            let (mut h2, mut kl, mut v) = (0.0, 0.0, 0.0);
            for c in 0..classes {
                let mut y = vec![0.0; classes];
                y[c] = 1.0;
                let (a, b, d) = terms(lik.log_density_unchecked(&y, f1), lik.log_density_unchecked(&y, f2));
                h2 += a;
                kl += b;
                v += d;
            }
            (h2, kl, v)
        }
    };
    Pointwise {
        h: h2.clamp(0.0, 1.0).sqrt(),
        kl: kl.max(0.0),
        v: v.max(0.0),
    }
}

/// Monte Carlo estimate from `draws` responses of `P_{f1}`. The Hellinger
/// term uses `h² = 1 − E_{P1} √(p2/p1)`.
pub fn pointwise_monte_carlo<R: Rng + ?Sized>(lik: &Likelihood, f1: &[f64], f2: &[f64], draws: usize, rng: &mut R) -> (Pointwise, f64) {
    let mut bc = Vec::with_capacity(draws);
    let (mut kl, mut v) = (0.0, 0.0);
    for _ in 0..draws {
        let y = lik.sample_response(f1, rng);
        let r = lik.log_density_unchecked(&y, f1) - lik.log_density_unchecked(&y, f2);
        bc.push((-0.5 * r).exp());
        kl += r;
        v += r * r;
    }
    let m = draws as f64;
    let mean_bc = bc.iter().sum::<f64>() / m;
    let var_bc = bc.iter().map(|b| (b - mean_bc).powi(2)).sum::<f64>() / (m - 1.0).max(1.0);
    let h2 = (1.0 - mean_bc).clamp(0.0, 1.0);
    let h = h2.sqrt();
    // delta method for the square root, floored to avoid dividing by zero
    let se = (var_bc / m).sqrt() / (2.0 * h.max(1e-3));
    (
        Pointwise {
            h,
            kl: (kl / m).max(0.0),
            v: v / m,
        },
        se,
    )
}

/// Averaged divergences from precomputed outputs (`n × D` each).
pub fn divergences_from_values(lik: &Likelihood, f: &Matrix, f0: &Matrix, method: Method) -> Result<DivergenceReport> {
    let n = f.rows();
    if n == 0 {
        return Err(Error::invalid("divergences need at least one design point"));
    }
    if f0.rows() != n || f.cols() != lik.natural_dim() || f0.cols() != lik.natural_dim() {
        return Err(Error::DimensionMismatch(format!(
            "outputs are {}×{} and {}×{}, want n×{}",
            f.rows(),
            f.cols(),
            f0.rows(),
            f0.cols(),
            lik.natural_dim()
        )));
    }
    let nf = n as f64;
    let (points, error_estimate): (Vec<Pointwise>, f64) = match method {
        Method::ClosedForm => (
            (0..n).map(|i| pointwise_closed_form(lik, f.row(i), f0.row(i))).collect(),
            1e-15,
        ),
        Method::Quadrature => (
            (0..n).into_par_iter().map(|i| pointwise_quadrature(lik, f.row(i), f0.row(i))).collect(),
            QUAD_TOL.max(TAIL_TOL),
        ),
        Method::MonteCarlo => {
            let mut rng = seeded(0x6d63);
            let mut se2 = 0.0;
            let pts = (0..n)
                .map(|i| {
                    let (p, se) = pointwise_monte_carlo(lik, f.row(i), f0.row(i), 4000, &mut rng);
                    se2 += se * se;
                    p
                })
                .collect();
            (pts, se2.sqrt() / nf)
        }
    };
    Ok(DivergenceReport {
        hellinger_n: points.iter().map(|p| p.h).sum::<f64>() / nf,
        kl_n: points.iter().map(|p| p.kl).sum::<f64>() / nf,
        v_n: points.iter().map(|p| p.v).sum::<f64>() / nf,
        method,
        error_estimate,
    })
}

/// `H_n`, `K_n` and `V_n` between `P_f` and `P_{f0}` at the rows of `x`.
pub fn divergences(lik: &Likelihood, f: &dyn Evaluator, f0: &dyn Evaluator, x: &Matrix, method: Method) -> Result<DivergenceReport> {
    divergences_from_values(lik, &evaluate_at(f, x)?, &evaluate_at(f0, x)?, method)
}

pub fn hellinger_n(lik: &Likelihood, f: &dyn Evaluator, f0: &dyn Evaluator, x: &Matrix) -> Result<f64> {
    Ok(divergences(lik, f, f0, x, Method::ClosedForm)?.hellinger_n)
}

pub fn kl_n(lik: &Likelihood, f: &dyn Evaluator, f0: &dyn Evaluator, x: &Matrix) -> Result<f64> {
    Ok(divergences(lik, f, f0, x, Method::ClosedForm)?.kl_n)
}

pub fn v_n(lik: &Likelihood, f: &dyn Evaluator, f0: &dyn Evaluator, x: &Matrix) -> Result<f64> {
    Ok(divergences(lik, f, f0, x, Method::ClosedForm)?.v_n)
}

/// `H_n` only, from precomputed outputs; the hot path for posterior summaries.
pub fn hellinger_n_values(lik: &Likelihood, f: &Matrix, f0: &Matrix) -> Result<f64> {
    Ok(divergences_from_values(lik, f, f0, Method::ClosedForm)?.hellinger_n)
}

/// `(1/n) Σ_i ‖f(x_i) − g(x_i)‖_p`.
pub fn average_norm(f: &dyn Evaluator, g: &dyn Evaluator, x: &Matrix, p: f64) -> Result<f64> {
    if x.rows() == 0 {
        return Err(Error::invalid("average_norm needs at least one design point"));
    }
    if !(p >= 1.0) {
        return Err(Error::invalid(format!("p must be at least 1, got {p}")));
    }
    let total: f64 = x
        .iter_rows()
        .map(|r| {
            let (a, b) = (f.eval(r), g.eval(r));
            if p.is_infinite() {
                a.iter().zip(&b).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max)
            } else {
                a.iter().zip(&b).map(|(u, v)| (u - v).abs().powf(p)).sum::<f64>().powf(1.0 / p)
            }
        })
        .sum();
    Ok(total / x.rows() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub lhs: f64,
    pub rhs_scaled: f64,
    /// `lhs / rhs_scaled`, with `0/0 = 0`.
    pub ratio: f64,
    pub c_g: f64,
    pub report: DivergenceReport,
}

/// Compares `max(K_n, V_n, H_n)` for two step functions on the same tree
/// with `C_g · Σ_k ‖β_k − β⁰_k‖₁`, where `C_g` is the gradient bound of
/// `log g` on the box `‖β‖_∞ ≤ max(1, ‖β‖_∞, ‖β⁰‖_∞)`.
pub fn lemma_a2_bound_check(lik: &Likelihood, tree: &TreePartition, beta: &LeafValues, beta0: &LeafValues, x: &Matrix) -> Result<BoundCheck> {
    let k = tree.leaf_count();
    let d = lik.natural_dim();
    if beta.len() != k || beta0.len() != k {
        return Err(Error::DimensionMismatch(format!(
            "partition has {k} cells but the step heights have {} and {}",
            beta.len(),
            beta0.len()
        )));
    }
    if beta.iter().chain(beta0.iter()).any(|b| b.len() != d) {
        return Err(Error::DimensionMismatch(format!("step heights must have dimension {d}")));
    }
    let step = |vals: &LeafValues| -> Result<Matrix> {
        let rows: Vec<Vec<f64>> = x.iter_rows().map(|r| vals.get(tree.leaf_index(r)).to_vec()).collect();
        Matrix::from_rows(&rows)
    };
    let report = divergences_from_values(lik, &step(beta)?, &step(beta0)?, Method::ClosedForm)?;
    let c_beta = beta
        .iter()
        .chain(beta0.iter())
        .flatten()
        .fold(1.0_f64, |m, v| m.max(v.abs()));
    let grid = if d <= 2 { 101 } else { 10 };
    let c_g = certify_assumption1(lik, c_beta, grid)?.bound;
    let l1: f64 = beta
        .iter()
        .zip(beta0.iter())
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (u - v).abs()).sum::<f64>())
        .sum();
    let lhs = report.kl_n.max(report.v_n).max(report.hellinger_n);
    let rhs_scaled = c_g * l1;
    let ratio = if lhs == 0.0 { 0.0 } else { lhs / rhs_scaled };
    Ok(BoundCheck {
        lhs,
        rhs_scaled,
        ratio,
        c_g,
        report,
    })
}
