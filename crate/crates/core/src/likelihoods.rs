//! Exponential-family response models.
//!
//! Every likelihood has the form
//!
//! ```text
//! log p(y | f) = log h(y) + s · ( log g(f) + η(f) · T(y) )
//! ```
//!
//! where `f ∈ ℝ^D` is the forest output at a covariate point. For the
//! Poisson-exp and multinomial models `s = 1` and `η` is the identity (the
//! multinomial appends the anchored zero score of the last class). The
//! Gaussian keeps the regression bookkeeping `g(μ) = exp(-μ²/σ²)`,
//! `η(μ) = (μ, 1)`, `T(y) = (2y/σ², -y²/σ²)`, whose exponent is exactly twice
//! the normal log-kernel, so it carries `s = ½` and the carrier
//! `h = 1/√(2πσ²)`. The softplus-Poisson model uses `g(f) = 1/(1+e^f)` with
//! natural parameter `log softplus(f)`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{linspace, ln_factorial, log1p_sum_exp, logistic, norm_cdf, softplus, softplus_inv, LN_2PI};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkFunction {
    Identity,
    Softplus,
    Exp,
    Logistic,
    Softmax,
    Probit,
}

impl LinkFunction {
    /// Maps an unconstrained score to the parameter space. Softmax takes the
    /// `D` free scores and returns `D + 1` class probabilities (last class
    /// anchored at score 0).
    pub fn forward(&self, z: &[f64]) -> Vec<f64> {
        match self {
            LinkFunction::Identity => z.to_vec(),
            LinkFunction::Softplus => z.iter().map(|&v| softplus(v)).collect(),
            LinkFunction::Exp => z.iter().map(|v| v.exp()).collect(),
            LinkFunction::Logistic => z.iter().map(|&v| logistic(v)).collect(),
            LinkFunction::Probit => z.iter().map(|&v| norm_cdf(v)).collect(),
            LinkFunction::Softmax => softmax_anchored(z),
        }
    }

    /// Scalar inverse, where one exists.
    pub fn inverse(&self, mu: f64) -> Option<f64> {
        match self {
            LinkFunction::Identity => Some(mu),
            LinkFunction::Softplus if mu > 0.0 => Some(softplus_inv(mu)),
            LinkFunction::Exp if mu > 0.0 => Some(mu.ln()),
            LinkFunction::Logistic if mu > 0.0 && mu < 1.0 => Some((mu / (1.0 - mu)).ln()),
            _ => None,
        }
    }

    /// Whether the induced `g` has a polynomially bounded `∇g/g` on growing
    /// boxes. Only the exponential link fails: its `|∇g/g| = e^f` grows
    /// exponentially with the box radius.
    pub fn is_assumption1_friendly(&self) -> bool {
        !matches!(self, LinkFunction::Exp)
    }

    pub fn name(&self) -> &'static str {
        match self {
            LinkFunction::Identity => "identity",
            LinkFunction::Softplus => "softplus",
            LinkFunction::Exp => "exp",
            LinkFunction::Logistic => "logistic",
            LinkFunction::Softmax => "softmax",
            LinkFunction::Probit => "probit",
        }
    }
}

impl fmt::Display for LinkFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for LinkFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s.trim().to_ascii_lowercase().as_str() {
            "identity" => LinkFunction::Identity,
            "softplus" => LinkFunction::Softplus,
            "exp" | "log" => LinkFunction::Exp,
            "logistic" | "logit" => LinkFunction::Logistic,
            "softmax" => LinkFunction::Softmax,
            "probit" => LinkFunction::Probit,
            other => return Err(Error::invalid(format!("unknown link function {other:?}"))),
        })
    }
}

fn softmax_anchored(z: &[f64]) -> Vec<f64> {
    let lse = log1p_sum_exp(z);
    let mut p: Vec<f64> = z.iter().map(|v| (v - lse).exp()).collect();
    p.push((-lse).exp());
    p
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DominatingMeasure {
    Lebesgue,
    CountingNaturals,
    CountingCategories,
}

/// Serializable description of a likelihood; [`LikelihoodSpec::build`]
/// validates it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum LikelihoodSpec {
    Gaussian { sigma: f64 },
    Multinomial { n_classes: usize },
    Poisson { link: LinkFunction },
}

impl LikelihoodSpec {
    pub fn build(&self) -> Result<Likelihood> {
        match *self {
            LikelihoodSpec::Gaussian { sigma } => Likelihood::gaussian(sigma),
            LikelihoodSpec::Multinomial { n_classes } => Likelihood::multinomial(n_classes),
            LikelihoodSpec::Poisson { link } => Likelihood::poisson(link),
        }
    }

    /// Parses the CLI/config triple `likelihood`, `link`, `sigma`/`classes`.
    pub fn from_parts(family: &str, link: Option<&str>, sigma: Option<f64>, n_classes: Option<usize>) -> Result<Self> {
        Ok(match family.trim().to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => LikelihoodSpec::Gaussian {
                sigma: sigma.unwrap_or(1.0),
            },
            "multinomial" | "categorical" => LikelihoodSpec::Multinomial {
                n_classes: n_classes.unwrap_or(2),
            },
            "poisson" => LikelihoodSpec::Poisson {
                link: link.map(str::parse).transpose()?.unwrap_or(LinkFunction::Softplus),
            },
            other => return Err(Error::invalid(format!("unknown likelihood {other:?}"))),
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Family {
    Gaussian { sigma: f64 },
    Multinomial { classes: usize },
    Poisson { softplus: bool },
}

/// An exponential-family response model with a fixed link.
///
/// Immutable after construction; all methods are pure.
#[derive(Clone, Debug, PartialEq)]
pub struct Likelihood {
    family: Family,
    link: LinkFunction,
}

impl Likelihood {
    /// Normal response with known standard deviation `sigma`.
    pub fn gaussian(sigma: f64) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::invalid(format!("gaussian sigma must be positive, got {sigma}")));
        }
        Ok(Likelihood {
            family: Family::Gaussian { sigma },
            link: LinkFunction::Identity,
        })
    }

    /// Categorical response over `n_classes` classes, encoded one-hot, with
    /// `D = n_classes - 1` free scores.
    pub fn multinomial(n_classes: usize) -> Result<Self> {
        if n_classes < 2 {
            return Err(Error::invalid(format!("multinomial needs at least 2 classes, got {n_classes}")));
        }
        Ok(Likelihood {
            family: Family::Multinomial { classes: n_classes },
            link: LinkFunction::Softmax,
        })
    }

    /// Count response with rate `Ψ(f)`, `Ψ ∈ {softplus, exp}`.
    pub fn poisson(link: LinkFunction) -> Result<Self> {
        let softplus = match link {
            LinkFunction::Softplus => true,
            LinkFunction::Exp => false,
            other => return Err(Error::Unsupported(format!("poisson with {other} link"))),
        };
        Ok(Likelihood {
            family: Family::Poisson { softplus },
            link,
        })
    }

    pub fn spec(&self) -> LikelihoodSpec {
        match self.family {
            Family::Gaussian { sigma } => LikelihoodSpec::Gaussian { sigma },
            Family::Multinomial { classes } => LikelihoodSpec::Multinomial { n_classes: classes },
            Family::Poisson { .. } => LikelihoodSpec::Poisson { link: self.link },
        }
    }

    pub fn name(&self) -> String {
        match self.family {
            Family::Gaussian { .. } => "gaussian".into(),
            Family::Multinomial { .. } => "multinomial".into(),
            Family::Poisson { .. } => format!("poisson-{}", self.link),
        }
    }

    pub fn link(&self) -> LinkFunction {
        self.link
    }

    /// Dimension `p` of a response value.
    pub fn response_dim(&self) -> usize {
        match self.family {
            Family::Multinomial { classes } => classes,
            _ => 1,
        }
    }

    /// Dimension `D` of the forest output.
    pub fn natural_dim(&self) -> usize {
        match self.family {
            Family::Multinomial { classes } => classes - 1,
            _ => 1,
        }
    }

    /// Dimension `J` of the sufficient statistic.
    pub fn stat_dim(&self) -> usize {
        match self.family {
            Family::Gaussian { .. } => 2,
            Family::Multinomial { classes } => classes,
            Family::Poisson { .. } => 1,
        }
    }

    pub fn dominating_measure(&self) -> DominatingMeasure {
        match self.family {
            Family::Gaussian { .. } => DominatingMeasure::Lebesgue,
            Family::Multinomial { .. } => DominatingMeasure::CountingCategories,
            Family::Poisson { .. } => DominatingMeasure::CountingNaturals,
        }
    }

    pub fn is_assumption1_friendly(&self) -> bool {
        self.link.is_assumption1_friendly()
    }

    /// Gaussian noise level, if this is the Gaussian model.
    pub fn sigma(&self) -> Option<f64> {
        match self.family {
            Family::Gaussian { sigma } => Some(sigma),
            _ => None,
        }
    }

    pub fn in_support(&self, y: &[f64]) -> bool {
        match self.family {
            Family::Gaussian { .. } => y.len() == 1 && y[0].is_finite(),
            Family::Poisson { .. } => y.len() == 1 && y[0] >= 0.0 && y[0].fract() == 0.0,
            Family::Multinomial { classes } => {
                y.len() == classes
                    && y.iter().all(|&v| v == 0.0 || v == 1.0)
                    && y.iter().filter(|&&v| v == 1.0).count() == 1
            }
        }
    }

    pub fn log_h(&self, y: &[f64]) -> f64 {
        match self.family {
            Family::Gaussian { sigma } => -0.5 * LN_2PI - sigma.ln(),
            Family::Poisson { .. } => -ln_factorial(y[0]),
            Family::Multinomial { .. } => 0.0,
        }
    }

    pub fn log_g(&self, f: &[f64]) -> f64 {
        match self.family {
            Family::Gaussian { sigma } => -f[0] * f[0] / (sigma * sigma),
            Family::Poisson { softplus: true } => -softplus(f[0]),
            Family::Poisson { softplus: false } => -f[0].exp(),
            Family::Multinomial { .. } => -log1p_sum_exp(f),
        }
    }

    /// `∇g/g = ∇ log g`.
    pub fn grad_log_g(&self, f: &[f64]) -> Vec<f64> {
        match self.family {
            Family::Gaussian { sigma } => vec![-2.0 * f[0] / (sigma * sigma)],
            Family::Poisson { softplus: true } => vec![-logistic(f[0])],
            Family::Poisson { softplus: false } => vec![-f[0].exp()],
            Family::Multinomial { .. } => {
                let p = softmax_anchored(f);
                p[..f.len()].iter().map(|v| -v).collect()
            }
        }
    }

    pub fn suff_stat(&self, y: &[f64]) -> Vec<f64> {
        match self.family {
            Family::Gaussian { sigma } => {
                let s2 = sigma * sigma;
                vec![2.0 * y[0] / s2, -y[0] * y[0] / s2]
            }
            Family::Poisson { .. } => vec![y[0]],
            Family::Multinomial { .. } => y.to_vec(),
        }
    }

    /// `η(f)`: the identity on `f` followed by any fixed trailing coordinates.
    pub fn natural_param(&self, f: &[f64]) -> Vec<f64> {
        match self.family {
            Family::Gaussian { .. } => vec![f[0], 1.0],
            Family::Poisson { softplus: true } => vec![softplus(f[0]).ln()],
            Family::Poisson { softplus: false } => vec![f[0]],
            Family::Multinomial { .. } => {
                let mut v = f.to_vec();
                v.push(0.0);
                v
            }
        }
    }

    /// Multiplier `s` on the exponent `log g + η·T`.
    pub fn exponent_scale(&self) -> f64 {
        match self.family {
            Family::Gaussian { .. } => 0.5,
            _ => 1.0,
        }
    }

    /// The log-density assembled literally from `h`, `g`, `η` and `T`.
    pub fn log_density_from_parts(&self, y: &[f64], f: &[f64]) -> f64 {
        if !self.in_support(y) {
            return f64::NEG_INFINITY;
        }
        let eta = self.natural_param(f);
        let t = self.suff_stat(y);
        let dot: f64 = eta.iter().zip(&t).map(|(a, b)| a * b).sum();
        self.log_h(y) + self.exponent_scale() * (self.log_g(f) + dot)
    }

    /// Log-density of `y` given forest output `f`. Values outside the support
    /// give `-∞`; non-finite or mis-sized inputs are errors.
    pub fn log_density(&self, y: &[f64], f: &[f64]) -> Result<f64> {
        if y.len() != self.response_dim() || f.len() != self.natural_dim() {
            return Err(Error::DimensionMismatch(format!(
                "{}: y has {} entries (want {}), f has {} (want {})",
                self.name(),
                y.len(),
                self.response_dim(),
                f.len(),
                self.natural_dim()
            )));
        }
        if y.iter().chain(f).any(|v| !v.is_finite()) {
            return Err(Error::invalid("non-finite input to log_density"));
        }
        if !self.in_support(y) {
            return Ok(f64::NEG_INFINITY);
        }
        Ok(self.log_density_unchecked(y, f))
    }

    /// Hot-path log-density: no dimension, finiteness or support checks.
    #[inline]
    pub fn log_density_unchecked(&self, y: &[f64], f: &[f64]) -> f64 {
        match self.family {
            Family::Gaussian { sigma } => {
                let z = (y[0] - f[0]) / sigma;
                -0.5 * LN_2PI - sigma.ln() - 0.5 * z * z
            }
            Family::Poisson { softplus: sp } => {
                let (log_rate, rate) = if sp {
                    let r = softplus(f[0]);
                    (r.ln(), r)
                } else {
                    (f[0], f[0].exp())
                };
                let k = y[0];
                let term = if k == 0.0 { 0.0 } else { k * log_rate };
                term - rate - ln_factorial(k)
            }
            Family::Multinomial { .. } => {
                let lse = log1p_sum_exp(f);
                let d = f.len();
                let score = (0..d).find(|&j| y[j] == 1.0).map_or(0.0, |j| f[j]);
                score - lse
            }
        }
    }

    /// Adds the score `∂ log p / ∂f` and expected Fisher information
    /// (row-major `D×D`) of one observation into the accumulators.
    pub fn accumulate_score_fisher(&self, y: &[f64], f: &[f64], score: &mut [f64], fisher: &mut [f64]) {
        match self.family {
            Family::Gaussian { sigma } => {
                let iv = 1.0 / (sigma * sigma);
                score[0] += (y[0] - f[0]) * iv;
                fisher[0] += iv;
            }
            Family::Poisson { softplus: true } => {
                let rate = softplus(f[0]).max(1e-300);
                let s = logistic(f[0]);
                score[0] += (y[0] / rate - 1.0) * s;
                fisher[0] += s * s / rate;
            }
            Family::Poisson { softplus: false } => {
                let rate = f[0].exp();
                score[0] += y[0] - rate;
                fisher[0] += rate;
            }
            Family::Multinomial { .. } => {
                let d = f.len();
                let p = softmax_anchored(f);
                for j in 0..d {
                    score[j] += y[j] - p[j];
                    for k in 0..d {
                        let delta = if j == k { p[j] } else { 0.0 };
                        fisher[j * d + k] += delta - p[j] * p[k];
                    }
                }
            }
        }
    }

    /// Nominal per-observation information used to scale random-walk steps.
    pub fn unit_information(&self) -> f64 {
        match self.family {
            Family::Gaussian { sigma } => 1.0 / (sigma * sigma),
            Family::Poisson { .. } => 1.0,
            Family::Multinomial { .. } => 0.25,
        }
    }

    /// Mean of the response given `f` (class probabilities for multinomial).
    pub fn mean_response(&self, f: &[f64]) -> Vec<f64> {
        match self.family {
            Family::Gaussian { .. } => vec![f[0]],
            Family::Poisson { .. } => self.link.forward(f),
            Family::Multinomial { .. } => softmax_anchored(f),
        }
    }

    pub fn sample_response<R: Rng + ?Sized>(&self, f: &[f64], rng: &mut R) -> Vec<f64> {
        match self.family {
            Family::Gaussian { sigma } => vec![Normal::new(f[0], sigma).expect("sigma > 0").sample(rng)],
            Family::Poisson { .. } => {
                let rate = self.link.forward(f)[0];
                if rate <= 0.0 {
                    vec![0.0]
                } else {
                    vec![Poisson::new(rate).expect("positive rate").sample(rng)]
                }
            }
            Family::Multinomial { classes } => {
                let p = softmax_anchored(f);
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut class = classes - 1;
                for (j, pj) in p.iter().enumerate() {
                    acc += pj;
                    if u < acc {
                        class = j;
                        break;
                    }
                }
                let mut y = vec![0.0; classes];
                y[class] = 1.0;
                y
            }
        }
    }

    /// Link-scale value matching the mean response `ybar`, used to start chains.
    pub fn link_anchor(&self, ybar: &[f64]) -> Vec<f64> {
        match self.family {
            Family::Gaussian { .. } => vec![ybar[0]],
            Family::Poisson { .. } => vec![self.link.inverse(ybar[0].max(1e-3)).unwrap_or(0.0)],
            Family::Multinomial { classes } => vec![0.0; classes - 1],
        }
    }
}

/// Empirical growth constant of `∇g/g` on a box.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Assumption1Bound {
    pub bound: f64,
    pub passes: bool,
}

/// Evaluates `max ‖∇g/g‖_∞` over a regular grid on `{‖β‖_∞ ≤ c_beta}` with
/// `grid` points per axis (endpoints included).
pub fn certify_assumption1(lik: &Likelihood, c_beta: f64, grid: usize) -> Result<Assumption1Bound> {
    if grid < 10 {
        return Err(Error::invalid(format!("grid must have at least 10 points per axis, got {grid}")));
    }
    if !(c_beta > 0.0 && c_beta.is_finite()) {
        return Err(Error::invalid(format!("c_beta must be positive, got {c_beta}")));
    }
    let d = lik.natural_dim();
    let axis = linspace(-c_beta, c_beta, grid);
    let total = grid.checked_pow(d as u32).filter(|t| *t <= 50_000_000).ok_or_else(|| {
        Error::invalid(format!("grid of {grid}^{d} points is too large"))
    })?;
    let mut point = vec![0.0; d];
    let mut bound: f64 = 0.0;
    for mut idx in 0..total {
        for p in point.iter_mut() {
            *p = axis[idx % grid];
            idx /= grid;
        }
        let g = lik.grad_log_g(&point);
        bound = bound.max(g.iter().fold(0.0_f64, |m, v| m.max(v.abs())));
    }
    Ok(Assumption1Bound {
        bound,
        passes: bound.is_finite(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::integrate;
    use rand::SeedableRng;

    fn builtins() -> Vec<Likelihood> {
        vec![
            Likelihood::gaussian(1.0).unwrap(),
            Likelihood::gaussian(0.4).unwrap(),
            Likelihood::poisson(LinkFunction::Softplus).unwrap(),
            Likelihood::poisson(LinkFunction::Exp).unwrap(),
            Likelihood::multinomial(2).unwrap(),
            Likelihood::multinomial(3).unwrap(),
        ]
    }

    fn total_mass(lik: &Likelihood, f: &[f64]) -> f64 {
        match lik.dominating_measure() {
            DominatingMeasure::Lebesgue => {
                let s = lik.sigma().unwrap();
                integrate(
                    |y| lik.log_density(&[y], f).unwrap().exp(),
                    f[0] - 30.0 * s,
                    f[0] + 30.0 * s,
                    1e-12,
                    64,
                )
            }
            DominatingMeasure::CountingNaturals => {
                let mut total = 0.0;
                let mut k = 0.0;
                loop {
                    let p = lik.log_density(&[k], f).unwrap().exp();
                    total += p;
                    let rate = lik.mean_response(f)[0];
                    if k > rate && p < 1e-16 {
                        break;
                    }
                    k += 1.0;
                }
                total
            }
            DominatingMeasure::CountingCategories => {
                let c = lik.response_dim();
                (0..c)
                    .map(|j| {
                        let mut y = vec![0.0; c];
                        y[j] = 1.0;
                        lik.log_density(&y, f).unwrap().exp()
                    })
                    .sum()
            }
        }
    }

    #[test]
    fn gaussian_log_density_at_origin() {
        let lik = Likelihood::gaussian(1.0).unwrap();
        // numerical normalization oracle for the standard normal kernel
        let z = integrate(|y| (-0.5 * y * y).exp(), -30.0, 30.0, 1e-13, 64);
        let expected = (1.0 / z).ln();
        let got = lik.log_density(&[0.0], &[0.0]).unwrap();
        assert!((got - expected).abs() < 1e-10);
        assert!((got + 0.918_938_533_204_672_7).abs() < 1e-12);
    }

    #[test]
    fn binary_multinomial_symmetric_case() {
        let lik = Likelihood::multinomial(2).unwrap();
        let ld = lik.log_density(&[1.0, 0.0], &[0.0]).unwrap();
        assert!((ld - 0.5f64.ln()).abs() < 1e-15);
        assert!((lik.mean_response(&[0.0])[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn gaussian_regression_fields_are_wired_as_tabulated() {
        let sigma = 1.7;
        let lik = Likelihood::gaussian(sigma).unwrap();
        let (y, mu) = (0.8, -0.3);
        let s2 = sigma * sigma;
        assert_eq!(lik.natural_param(&[mu]), vec![mu, 1.0]);
        assert_eq!(lik.suff_stat(&[y]), vec![2.0 * y / s2, -y * y / s2]);
        assert!((lik.log_g(&[mu]) + mu * mu / s2).abs() < 1e-15);
        // the tabulated exponent is twice the normal log-kernel
        let kernel = -(y - mu) * (y - mu) / (2.0 * s2);
        let exponent = lik.log_g(&[mu]) + mu * lik.suff_stat(&[y])[0] + lik.suff_stat(&[y])[1];
        assert!((exponent - 2.0 * kernel).abs() < 1e-14);
    }

    #[test]
    fn gaussian_grad_log_g_matches_finite_differences() {
        let lik = Likelihood::gaussian(1.0).unwrap();
        assert!((lik.grad_log_g(&[2.0])[0] + 4.0).abs() < 1e-15);
        assert_eq!(lik.grad_log_g(&[0.0])[0], 0.0);
        let h = 1e-5;
        let fd = (lik.log_g(&[2.0 + h]) - lik.log_g(&[2.0 - h])) / (2.0 * h);
        assert!((fd + 4.0).abs() < 1e-8);
    }

    #[test]
    fn gaussian_bound_on_growing_box_is_linear() {
        // |∇g/g| = 2|μ|/σ² ≤ 2n/σ² on [-n, n]
        let lik = Likelihood::gaussian(1.0).unwrap();
        for n in [1.0, 10.0, 100.0] {
            let b = certify_assumption1(&lik, n, 11).unwrap();
            assert!(b.bound <= 2.0 * n + 1e-12);
        }
    }

    #[test]
    fn multinomial_three_class_probabilities() {
        let lik = Likelihood::multinomial(3).unwrap();
        let p = lik.mean_response(&[1.0, 0.0]);
        let e = 1f64.exp();
        let oracle = [e / (e + 2.0), 1.0 / (e + 2.0), 1.0 / (e + 2.0)];
        for (a, b) in p.iter().zip(oracle) {
            assert!((a - b).abs() < 1e-15);
        }
        assert!((p[0] - 0.5761).abs() < 1e-4 && (p[1] - 0.2119).abs() < 1e-4);
    }

    #[test]
    fn multinomial_grad_bounded_by_one_on_grid() {
        let lik = Likelihood::multinomial(3).unwrap();
        let axis = linspace(-10.0, 10.0, 41);
        let mut worst: f64 = 0.0;
        for &a in &axis {
            for &b in &axis {
                for g in lik.grad_log_g(&[a, b]) {
                    worst = worst.max(g.abs());
                }
            }
        }
        assert!(worst <= 1.0);
        let cert = certify_assumption1(&lik, 10.0, 41).unwrap();
        assert!(cert.bound <= 1.0 && cert.passes);
    }

    #[test]
    fn multinomial_shift_invariance_of_redundant_scores() {
        // scores (f, 0) and (f + c, c) describe the same distribution
        let lik = Likelihood::multinomial(3).unwrap();
        let f = [0.7, -1.2];
        for c in [-3.0, 0.5, 4.0] {
            let full = [f[0] + c, f[1] + c, c];
            let reduced = [full[0] - full[2], full[1] - full[2]];
            for class in 0..3 {
                let mut y = vec![0.0; 3];
                y[class] = 1.0;
                let a = lik.log_density(&y, &f).unwrap();
                let b = lik.log_density(&y, &reduced).unwrap();
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn poisson_links() {
        let sp = Likelihood::poisson(LinkFunction::Softplus).unwrap();
        assert!((sp.mean_response(&[0.0])[0] - 2f64.ln()).abs() < 1e-15);
        // g(f) = 1/(1+e^f)
        for f in [-2.0, 0.0, 3.0] {
            assert!((sp.log_g(&[f]).exp() - 1.0 / (1.0 + f64::exp(f))).abs() < 1e-14);
        }
        let ex = Likelihood::poisson(LinkFunction::Exp).unwrap();
        let expected = -1f64.exp() + 2.0 - 2f64.ln();
        assert!((ex.log_density(&[2.0], &[1.0]).unwrap() - expected).abs() < 1e-14);
        assert!(sp.is_assumption1_friendly());
        assert!(!ex.is_assumption1_friendly());
        assert!(Likelihood::poisson(LinkFunction::Identity).is_err());
    }

    #[test]
    fn construction_errors() {
        assert!(Likelihood::gaussian(0.0).is_err());
        assert!(Likelihood::gaussian(-1.0).is_err());
        assert!(Likelihood::multinomial(1).is_err());
        let lik = Likelihood::gaussian(1.0).unwrap();
        assert!(lik.log_density(&[f64::NAN], &[0.0]).is_err());
        assert!(lik.log_density(&[0.0, 1.0], &[0.0]).is_err());
        let p = Likelihood::poisson(LinkFunction::Exp).unwrap();
        assert_eq!(p.log_density(&[-1.0], &[0.0]).unwrap(), f64::NEG_INFINITY);
        assert_eq!(p.log_density(&[1.5], &[0.0]).unwrap(), f64::NEG_INFINITY);
    }

    #[test]
    fn densities_normalize() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for lik in builtins() {
            for _ in 0..20 {
                let f: Vec<f64> = (0..lik.natural_dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
                let m = total_mass(&lik, &f);
                assert!((m - 1.0).abs() < 1e-6, "{} at {f:?}: {m}", lik.name());
            }
        }
    }

    #[test]
    fn grad_log_g_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for lik in builtins() {
            let d = lik.natural_dim();
            for _ in 0..100 {
                let f: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
                let g = lik.grad_log_g(&f);
                for j in 0..d {
                    let h = 1e-5;
                    let mut up = f.clone();
                    let mut dn = f.clone();
                    up[j] += h;
                    dn[j] -= h;
                    let fd = (lik.log_g(&up) - lik.log_g(&dn)) / (2.0 * h);
                    let rel = (fd - g[j]).abs() / g[j].abs().max(1e-3);
                    assert!(rel < 1e-5, "{} j={j} f={f:?} fd={fd} g={}", lik.name(), g[j]);
                }
            }
        }
    }

    #[test]
    fn log_density_equals_assembled_parts() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for lik in builtins() {
            for _ in 0..50 {
                let f: Vec<f64> = (0..lik.natural_dim()).map(|_| rng.random_range(-3.0..3.0)).collect();
                let y = lik.sample_response(&f, &mut rng);
                let a = lik.log_density(&y, &f).unwrap();
                let b = lik.log_density_from_parts(&y, &f);
                assert!((a - b).abs() < 1e-10 * (1.0 + a.abs()), "{}: {a} vs {b}", lik.name());
            }
        }
    }

    #[test]
    fn score_matches_finite_differences() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for lik in builtins() {
            let d = lik.natural_dim();
            for _ in 0..30 {
                let f: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
                let y = lik.sample_response(&f, &mut rng);
                let mut score = vec![0.0; d];
                let mut info = vec![0.0; d * d];
                lik.accumulate_score_fisher(&y, &f, &mut score, &mut info);
                for j in 0..d {
                    let h = 1e-6;
                    let mut up = f.clone();
                    let mut dn = f.clone();
                    up[j] += h;
                    dn[j] -= h;
                    let fd = (lik.log_density(&y, &up).unwrap() - lik.log_density(&y, &dn).unwrap()) / (2.0 * h);
                    assert!((fd - score[j]).abs() < 1e-6, "{}", lik.name());
                    assert!(info[j * d + j] > 0.0);
                }
            }
        }
    }

    #[test]
    fn certify_assumption1_examples() {
        let g = Likelihood::gaussian(1.0).unwrap();
        let b = certify_assumption1(&g, 5.0, 101).unwrap();
        assert!((b.bound - 10.0).abs() < 1e-12 && b.passes);
        let m = Likelihood::multinomial(3).unwrap();
        assert!(certify_assumption1(&m, 7.0, 21).unwrap().bound <= 1.0);
        let e = Likelihood::poisson(LinkFunction::Exp).unwrap();
        let b = certify_assumption1(&e, 5.0, 11).unwrap();
        assert!((b.bound - 5f64.exp()).abs() < 1e-9);
        assert!((b.bound - 148.41).abs() < 0.01);
        assert!(certify_assumption1(&g, 5.0, 9).is_err());
    }

    #[test]
    fn assumption1_bound_nondecreasing_in_box() {
        for lik in builtins() {
            let mut last = 0.0;
            for c in [0.5, 1.0, 2.0, 4.0, 8.0] {
                let b = certify_assumption1(&lik, c, 21).unwrap().bound;
                assert!(b >= last - 1e-15, "{}", lik.name());
                last = b;
            }
        }
    }

    #[test]
    fn link_ranges() {
        for z in [-30.0, -1.0, 0.0, 2.0, 30.0] {
            assert!(LinkFunction::Softplus.forward(&[z])[0] > 0.0);
            let l = LinkFunction::Logistic.forward(&[z * 0.5])[0];
            assert!(l > 0.0 && l < 1.0);
            let p = LinkFunction::Probit.forward(&[z * 0.2])[0];
            assert!(p > 0.0 && p < 1.0);
        }
        let s: f64 = LinkFunction::Softmax.forward(&[3.0, -2.0, 0.5]).iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}
