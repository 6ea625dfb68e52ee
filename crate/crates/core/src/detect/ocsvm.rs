//! One-class SVM with the sigmoid kernel `tanh(gamma * <x, x'> + coef0)`.
//!
//! With `coef0 = 10` every kernel value sits within about 1e-8 of
//! `tanh(coef0)`, so the raw Gram matrix carries almost no usable precision.
//! Because the dual keeps `sum(alpha) = 1`, adding a constant to the kernel
//! or scaling it by a positive factor leaves the optimal `alpha` unchanged
//! and only moves `rho`. We therefore work with
//!
//! ```text
//! K'(s) = (tanh(gamma*s + coef0) - tanh(coef0)) * cosh(coef0)^2
//!       = sinh(gamma*s) * cosh(coef0) / cosh(gamma*s + coef0)
//! ```
//!
//! evaluated through the right-hand form, which has no cancellation and is
//! of order one. Verdicts equal those of the raw kernel; `rho` is reported
//! in the units of `K'`, and the stopping tolerance applies in those units.

use serde::{Deserialize, Serialize};

use super::{Label, WindowNormalizer};
use crate::data::FeatureWindow;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OcsvmParams {
    /// `None` means `1 / n_features`.
    pub gamma: Option<f64>,
    pub coef0: f64,
    pub nu: f64,
    pub tolerance: f64,
    /// Iteration cap; `None` runs until the stopping rule holds.
    pub max_iter: Option<usize>,
    /// Training windows beyond this count are thinned with an even stride.
    pub max_train: Option<usize>,
}

impl Default for OcsvmParams {
    fn default() -> Self {
        Self {
            gamma: None,
            coef0: 10.0,
            nu: 0.5,
            tolerance: 1e-3,
            max_iter: None,
            max_train: Some(2000),
        }
    }
}

impl OcsvmParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.nu > 0.0 && self.nu <= 1.0) {
            return Err(Error::Config(format!("ocsvm.nu = {} must lie in (0, 1]", self.nu)));
        }
        if let Some(g) = self.gamma {
            if !(g > 0.0 && g.is_finite()) {
                return Err(Error::Config(format!("ocsvm.gamma = {g} must be positive")));
            }
        }
        if !self.coef0.is_finite() {
            return Err(Error::Config("ocsvm.coef0 must be finite".into()));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::Config("ocsvm.tolerance must be positive".into()));
        }
        if self.max_train.is_some_and(|m| m < 2) {
            return Err(Error::Config("ocsvm.max_train must be at least 2".into()));
        }
        Ok(())
    }
}

/// Shifted and rescaled sigmoid kernel of an inner product `s`.
pub fn shifted_sigmoid(s: f64, gamma: f64, coef0: f64) -> f64 {
    let a = gamma * s;
    if (a + coef0).abs() < 300.0 && coef0.abs() < 300.0 {
        a.sinh() * coef0.cosh() / (a + coef0).cosh()
    } else {
        let c = coef0.cosh();
        ((a + coef0).tanh() - coef0.tanh()) * c * c
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcsvmDetector {
    pub params: OcsvmParams,
    pub normalizer: WindowNormalizer,
    pub gamma: f64,
    /// Normalized training windows with nonzero coefficient.
    pub support: Vec<Vec<f64>>,
    /// Dual coefficients of `support`, summing to 1.
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
    pub n_train: usize,
}

impl OcsvmDetector {
    pub fn kernel(&self, a: &[f64], b: &[f64]) -> f64 {
        shifted_sigmoid(dot(a, b), self.gamma, self.params.coef0)
    }

    pub fn decision_value(&self, window: &FeatureWindow) -> Result<f64> {
        let x = self.normalizer.apply(window)?;
        Ok(self.decision_value_normalized(&x))
    }

    pub fn decision_value_normalized(&self, x: &[f64]) -> f64 {
        self.support.iter().zip(&self.alpha).map(|(sv, a)| a * self.kernel(sv, x)).sum::<f64>() - self.rho
    }

    /// Benign iff the decision value is non-negative.
    pub fn verdict(&self, window: &FeatureWindow) -> Result<Label> {
        Ok(if self.decision_value(window)? >= 0.0 {
            Label::Benign
        } else {
            Label::Malicious
        })
    }
}

/// Every `stride`-th window so that at most `cap` remain.
fn thin<T>(items: &[T], cap: Option<usize>) -> Vec<&T> {
    match cap {
        Some(cap) if items.len() > cap => {
            let stride = items.len().div_ceil(cap);
            items.iter().step_by(stride).collect()
        }
        _ => items.iter().collect(),
    }
}

/// Fits on benign windows only.
pub fn fit_ocsvm(benign: &[FeatureWindow], params: &OcsvmParams) -> Result<OcsvmDetector> {
    params.validate()?;
    if benign.len() < 2 {
        return Err(Error::InsufficientWindows {
            got: benign.len(),
            needed: 2,
        });
    }
    let train = thin(benign, params.max_train);
    let normalizer = WindowNormalizer::fit(train.iter().copied())?;
    let xs: Vec<Vec<f64>> = train.iter().map(|w| normalizer.apply(w)).collect::<Result<_>>()?;
    let gamma = params.gamma.unwrap_or(1.0 / normalizer.n_features() as f64);
    let n = xs.len();
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            let k = shifted_sigmoid(dot(&xs[i], &xs[j]), gamma, params.coef0);
            q[i * n + j] = k;
            q[j * n + i] = k;
        }
    }
    let sol = solve_dual(&q, n, params.nu, params.tolerance, params.max_iter)?;
    let mut support = Vec::new();
    let mut alpha = Vec::new();
    for (x, a) in xs.into_iter().zip(&sol.alpha) {
        if *a > 0.0 {
            support.push(x);
            alpha.push(*a);
        }
    }
    Ok(OcsvmDetector {
        params: *params,
        normalizer,
        gamma,
        support,
        alpha,
        rho: sol.rho,
        iterations: sol.iterations,
        n_train: n,
    })
}

pub(crate) struct DualSolution {
    /// Sums to 1, each in `[0, 1/(nu*n)]`.
    pub alpha: Vec<f64>,
    pub rho: f64,
    pub iterations: usize,
}

/// Pairwise coordinate descent on `min 0.5 a'Qa` over `0 <= a_i <= 1`,
/// `sum a = nu*n`, then rescaled to unit sum. Works for indefinite `Q`.
pub(crate) fn solve_dual(q: &[f64], n: usize, nu: f64, tol: f64, max_iter: Option<usize>) -> Result<DualSolution> {
    const TAU: f64 = 1e-12;
    let total = nu * n as f64;
    let mut alpha = vec![0.0; n];
    let full = (total.floor() as usize).min(n);
    for a in alpha.iter_mut().take(full) {
        *a = 1.0;
    }
    if full < n {
        alpha[full] = total - full as f64;
    }
    let mut g = vec![0.0; n];
    for (j, &a) in alpha.iter().enumerate() {
        if a != 0.0 {
            for i in 0..n {
                g[i] += a * q[i * n + j];
            }
        }
    }
    let mut iterations = 0;
    loop {
        // i raises its coefficient (smallest gradient below the cap), j lowers it
        let (mut i, mut gi) = (usize::MAX, f64::INFINITY);
        let (mut j, mut gj) = (usize::MAX, f64::NEG_INFINITY);
        for t in 0..n {
            if alpha[t] < 1.0 && g[t] < gi {
                gi = g[t];
                i = t;
            }
            if alpha[t] > 0.0 && g[t] > gj {
                gj = g[t];
                j = t;
            }
        }
        if i == usize::MAX || j == usize::MAX || gj - gi < tol {
            break;
        }
        if max_iter.is_some_and(|m| iterations >= m) {
            return Err(Error::NotConverged(iterations));
        }
        iterations += 1;
        let mut curv = q[i * n + i] + q[j * n + j] - 2.0 * q[i * n + j];
        if curv <= 0.0 {
            curv = TAU;
        }
        let step = ((gj - gi) / curv).min(1.0 - alpha[i]).min(alpha[j]);
        alpha[i] += step;
        alpha[j] -= step;
        if alpha[j] < 1e-15 {
            alpha[j] = 0.0;
        }
        if 1.0 - alpha[i] < 1e-15 {
            alpha[i] = 1.0;
        }
        for t in 0..n {
            g[t] += step * (q[t * n + i] - q[t * n + j]);
        }
    }

    let (mut ub, mut lb) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut free_sum, mut free) = (0.0, 0usize);
    for t in 0..n {
        if alpha[t] >= 1.0 {
            lb = lb.max(g[t]);
        } else if alpha[t] <= 0.0 {
            ub = ub.min(g[t]);
        } else {
            free_sum += g[t];
            free += 1;
        }
    }
    let rho = if free > 0 { free_sum / free as f64 } else { 0.5 * (ub + lb) };
    let sum: f64 = alpha.iter().sum();
    Ok(DualSolution {
        alpha: alpha.iter().map(|a| a / sum).collect(),
        rho: rho / sum,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shifted_kernel_matches_raw_difference() {
        for &(s, g, c) in &[(0.3, 0.5, 1.0), (-2.0, 0.25, 2.0), (5.0, 0.1, 0.5), (1.0, 1.0, 10.0)] {
            let raw = ((g * s + c as f64).tanh() - (c as f64).tanh()) * (c as f64).cosh().powi(2);
            assert!((shifted_sigmoid(s, g, c) - raw).abs() < 1e-6 * raw.abs().max(1.0), "{s} {g} {c}");
        }
        assert_eq!(shifted_sigmoid(0.0, 0.5, 10.0), 0.0);
    }

    #[test]
    fn dual_is_feasible() {
        let xs: Vec<f64> = (0..30).map(|i| (i as f64 * 0.37).sin() * 2.0).collect();
        let n = xs.len();
        let q: Vec<f64> = (0..n * n).map(|k| shifted_sigmoid(xs[k / n] * xs[k % n], 0.5, 10.0)).collect();
        let sol = solve_dual(&q, n, 0.5, 1e-6, None).unwrap();
        let cap = 1.0 / (0.5 * n as f64);
        assert!((sol.alpha.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(sol.alpha.iter().all(|&a| (0.0..=cap + 1e-12).contains(&a)));
    }

    #[test]
    fn iteration_cap_reports_non_convergence() {
        let n = 20;
        let xs: Vec<f64> = (0..n).map(|i| i as f64 / 5.0 - 2.0).collect();
        let q: Vec<f64> = (0..n * n).map(|k| shifted_sigmoid(xs[k / n] * xs[k % n], 1.0, 10.0)).collect();
        assert!(matches!(solve_dual(&q, n, 0.3, 1e-9, Some(0)), Err(Error::NotConverged(0))));
    }

    #[test]
    fn too_few_windows() {
        let w = FeatureWindow::from_cgm(&[100.0]);
        assert!(matches!(fit_ocsvm(&[w], &OcsvmParams::default()), Err(Error::InsufficientWindows { got: 1, .. })));
    }

    #[test]
    fn nu_out_of_range() {
        let p = OcsvmParams {
            nu: 0.0,
            ..OcsvmParams::default()
        };
        assert!(p.validate().is_err());
    }
}
