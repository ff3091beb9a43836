//! GARCH(1,1) and GJR-GARCH(1,1) estimation with Normal or standardized
//! Student-t innovations; conditional volatility filtering, one-step VaR
//! and Expected Shortfall forecasts.
//!
//! Estimation is maximum likelihood via Nelder-Mead over unconstrained
//! transforms: log for positivity, logistic onto the stationarity
//! simplex, log(nu - 2) for the Student-t degrees of freedom. Multiple
//! starting points guard against local optima.

use crate::optim::NelderMead;
use crate::special::{norm_pdf, norm_quantile, student_t_ln_pdf, student_t_quantile, LN_2PI};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GarchError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
    #[error("series too short for estimation: need {need}, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("likelihood recursion produced a non-finite value")]
    NonFinite,
    #[error("quantile level out of domain: {0}")]
    DomainError(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GarchModel {
    Garch,
    Gjr,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Innovation {
    Normal,
    /// Unit-variance standardized Student-t; `nu` lives in GarchParams.
    StudentT,
}

/// Model family and innovation law; only (1,1) orders are supported.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GarchSpec {
    pub model: GarchModel,
    pub innovation: Innovation,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GarchParams {
    pub mu: f64,
    pub alpha0: f64,
    pub alpha1: f64,
    pub beta1: f64,
    /// leverage coefficient; zero for plain GARCH
    pub gamma: f64,
    /// Student-t degrees of freedom (> 2); ignored for Normal innovations
    pub nu: Option<f64>,
}

impl GarchParams {
    pub fn validate(&self, spec: &GarchSpec) -> Result<(), GarchError> {
        let err = |m: &str| Err(GarchError::InvalidParams(m.to_string()));
        if !(self.alpha0 > 0.0) {
            return err("alpha0 must be > 0");
        }
        if self.alpha1 < 0.0 || self.beta1 < 0.0 {
            return err("alpha1 and beta1 must be >= 0");
        }
        match spec.model {
            GarchModel::Garch => {
                if self.gamma != 0.0 {
                    return err("gamma must be 0 for plain GARCH");
                }
                if self.alpha1 + self.beta1 >= 1.0 {
                    return err("stationarity requires alpha1 + beta1 < 1");
                }
            }
            GarchModel::Gjr => {
                if self.alpha1 + self.gamma < 0.0 {
                    return err("GJR requires alpha1 + gamma >= 0");
                }
                if self.alpha1 + self.beta1 + 0.5 * self.gamma >= 1.0 {
                    return err("GJR stationarity requires alpha1 + beta1 + gamma/2 < 1");
                }
            }
        }
        if spec.innovation == Innovation::StudentT {
            match self.nu {
                Some(nu) if nu > 2.0 => {}
                _ => return err("StudentT requires nu > 2"),
            }
        }
        Ok(())
    }
}

/// Estimated model: parameters, likelihood, filtered volatility path and
/// standardized residuals z_t = (r_t - mu) / sigma_t.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GarchFit {
    pub spec: GarchSpec,
    pub params: GarchParams,
    pub loglik: f64,
    pub sigma: Vec<f64>,
    pub std_residuals: Vec<f64>,
    pub converged: bool,
    /// variance forecast for the step after the last observation
    pub next_sigma2: f64,
}

/// One-step-ahead VaR per date, negative return thresholds.
/// Violation convention: r_t < values[t].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VarSeries {
    pub alpha: f64,
    pub values: Vec<f64>,
    /// forecast for the first out-of-sample step
    pub next_value: f64,
}

fn sample_variance(xs: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    xs.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / n
}

/// Conditional variance recursion. sigma2[0] is the sample variance of
/// the input; returns the in-sample path plus the one-step-ahead value.
pub fn filter_variance(
    returns: &[f64],
    spec: &GarchSpec,
    params: &GarchParams,
) -> Result<(Vec<f64>, f64), GarchError> {
    params.validate(spec)?;
    if returns.is_empty() {
        return Err(GarchError::TooShort { need: 1, got: 0 });
    }
    let n = returns.len();
    let mut sigma2 = Vec::with_capacity(n);
    sigma2.push(sample_variance(returns).max(1e-18));
    for t in 1..n {
        let eps = returns[t - 1] - params.mu;
        let arch = if spec.model == GarchModel::Gjr && eps < 0.0 {
            params.alpha1 + params.gamma
        } else {
            params.alpha1
        };
        let s2 = params.alpha0 + arch * eps * eps + params.beta1 * sigma2[t - 1];
        if !s2.is_finite() {
            return Err(GarchError::NonFinite);
        }
        sigma2.push(s2);
    }
    let eps = returns[n - 1] - params.mu;
    let arch = if spec.model == GarchModel::Gjr && eps < 0.0 {
        params.alpha1 + params.gamma
    } else {
        params.alpha1
    };
    let next = params.alpha0 + arch * eps * eps + params.beta1 * sigma2[n - 1];
    Ok((sigma2, next))
}

/// Conditional volatility path sigma_t (standard deviations).
pub fn filter_volatility(
    returns: &[f64],
    spec: &GarchSpec,
    params: &GarchParams,
) -> Result<Vec<f64>, GarchError> {
    let (sigma2, _) = filter_variance(returns, spec, params)?;
    Ok(sigma2.into_iter().map(f64::sqrt).collect())
}

/// Negative log-likelihood of the conditional model.
pub fn negative_log_likelihood(
    returns: &[f64],
    spec: &GarchSpec,
    params: &GarchParams,
) -> Result<f64, GarchError> {
    let (sigma2, _) = filter_variance(returns, spec, params)?;
    let mut nll = 0.0;
    match spec.innovation {
        Innovation::Normal => {
            for (&r, &s2) in returns.iter().zip(&sigma2) {
                let eps = r - params.mu;
                nll += 0.5 * (LN_2PI + s2.ln()) + eps * eps / (2.0 * s2);
            }
        }
        Innovation::StudentT => {
            let nu = params.nu.unwrap();
            // scale making the innovation unit-variance for nu > 2
            let unit = ((nu - 2.0) / nu as f64).sqrt();
            for (&r, &s2) in returns.iter().zip(&sigma2) {
                let s = s2.sqrt() * unit;
                let z = (r - params.mu) / s;
                nll -= student_t_ln_pdf(z, nu) - s.ln();
            }
        }
    }
    if !nll.is_finite() {
        return Err(GarchError::NonFinite);
    }
    Ok(nll)
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

// Persistence is bounded strictly below 1 in the transform.
const MAX_PERSISTENCE: f64 = 0.9995;

struct Transform {
    spec: GarchSpec,
    ret_scale: f64,
}

impl Transform {
    fn dim(&self) -> usize {
        let base = match self.spec.model {
            GarchModel::Garch => 4,
            GarchModel::Gjr => 5,
        };
        base + (self.spec.innovation == Innovation::StudentT) as usize
    }

    fn to_params(&self, x: &[f64]) -> GarchParams {
        let mu = x[0] * self.ret_scale;
        let alpha0 = x[1].exp() * self.ret_scale * self.ret_scale;
        let pers = sigmoid(x[2]) * MAX_PERSISTENCE;
        let (alpha1, beta1, gamma, next) = match self.spec.model {
            GarchModel::Garch => {
                let share = sigmoid(x[3]);
                (pers * share, pers * (1.0 - share), 0.0, 4)
            }
            GarchModel::Gjr => {
                // softmax split of persistence among (alpha1, beta1, gamma/2)
                let m = x[3].max(x[4]).max(0.0);
                let (ea, eb, eg) = ((x[3] - m).exp(), (x[4] - m).exp(), (-m).exp());
                let z = ea + eb + eg;
                (pers * ea / z, pers * eb / z, 2.0 * pers * eg / z, 5)
            }
        };
        let nu = (self.spec.innovation == Innovation::StudentT).then(|| 2.0 + x[next].exp());
        GarchParams {
            mu,
            alpha0,
            alpha1,
            beta1,
            gamma,
            nu,
        }
    }

    fn from_params(&self, p: &GarchParams) -> Vec<f64> {
        let mut x = vec![
            p.mu / self.ret_scale,
            (p.alpha0 / (self.ret_scale * self.ret_scale)).ln(),
        ];
        match self.spec.model {
            GarchModel::Garch => {
                let pers = (p.alpha1 + p.beta1).min(MAX_PERSISTENCE - 1e-6);
                x.push(logit(pers / MAX_PERSISTENCE));
                x.push(logit((p.alpha1 / pers).clamp(1e-6, 1.0 - 1e-6)));
            }
            GarchModel::Gjr => {
                let pers =
                    (p.alpha1 + p.beta1 + 0.5 * p.gamma).min(MAX_PERSISTENCE - 1e-6);
                x.push(logit(pers / MAX_PERSISTENCE));
                let wg = (0.5 * p.gamma / pers).max(1e-6);
                x.push(((p.alpha1 / pers).max(1e-9) / wg).ln());
                x.push(((p.beta1 / pers).max(1e-9) / wg).ln());
            }
        }
        if self.spec.innovation == Innovation::StudentT {
            x.push((p.nu.unwrap_or(8.0) - 2.0).ln());
        }
        x
    }
}

pub struct FitOptions {
    pub min_length: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            min_length: 250,
            tol: 1e-8,
            max_iter: 2000,
        }
    }
}

/// Maximum-likelihood fit with multi-start Nelder-Mead; the best start
/// wins, ties broken by lowest start index.
pub fn fit_mle(returns: &[f64], spec: GarchSpec) -> Result<GarchFit, GarchError> {
    fit_mle_with(returns, spec, &FitOptions::default())
}

pub fn fit_mle_with(
    returns: &[f64],
    spec: GarchSpec,
    opts: &FitOptions,
) -> Result<GarchFit, GarchError> {
    if returns.len() < opts.min_length {
        return Err(GarchError::TooShort {
            need: opts.min_length,
            got: returns.len(),
        });
    }
    let n = returns.len() as f64;
    let mean = returns.iter().sum::<f64>() / n;
    let var = sample_variance(returns).max(1e-18);
    let transform = Transform {
        spec,
        ret_scale: var.sqrt(),
    };

    let starts: Vec<GarchParams> = [(0.05, 0.90, 0.05), (0.10, 0.85, 0.10), (0.02, 0.70, 0.02)]
        .iter()
        .map(|&(a1, b1, g)| {
            let gamma = if spec.model == GarchModel::Gjr { g } else { 0.0 };
            let pers = a1 + b1 + 0.5 * gamma;
            GarchParams {
                mu: mean,
                alpha0: var * (1.0 - pers),
                alpha1: a1,
                beta1: b1,
                gamma,
                nu: (spec.innovation == Innovation::StudentT).then_some(8.0),
            }
        })
        .collect();

    let nm = NelderMead {
        tol: opts.tol,
        max_iter: opts.max_iter,
        initial_step: 0.25,
    };
    let objective = |x: &[f64]| -> f64 {
        let p = transform.to_params(x);
        negative_log_likelihood(returns, &spec, &p).unwrap_or(1e12)
    };

    let mut best: Option<(crate::optim::SimplexResult, usize)> = None;
    for (i, start) in starts.iter().enumerate() {
        let x0 = transform.from_params(start);
        debug_assert_eq!(x0.len(), transform.dim());
        let res = nm.minimize(objective, &x0);
        let better = match &best {
            None => true,
            Some((b, _)) => res.fmin < b.fmin,
        };
        if better {
            best = Some((res, i));
        }
    }
    let (result, _) = best.unwrap();
    let params = transform.to_params(&result.x);
    let (sigma2, next_sigma2) = filter_variance(returns, &spec, &params)?;
    let sigma: Vec<f64> = sigma2.iter().map(|s| s.sqrt()).collect();
    let std_residuals: Vec<f64> = returns
        .iter()
        .zip(&sigma)
        .map(|(&r, &s)| (r - params.mu) / s)
        .collect();
    Ok(GarchFit {
        spec,
        params,
        loglik: -result.fmin,
        sigma,
        std_residuals,
        converged: result.converged,
        next_sigma2,
    })
}

/// Quantile of the (unit-variance) innovation distribution.
pub fn quantile(innovation: Innovation, nu: Option<f64>, alpha: f64) -> Result<f64, GarchError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(GarchError::DomainError(alpha));
    }
    match innovation {
        Innovation::Normal => Ok(norm_quantile(alpha)),
        Innovation::StudentT => {
            let nu = nu.ok_or_else(|| GarchError::InvalidParams("missing nu".into()))?;
            if nu <= 2.0 {
                return Err(GarchError::InvalidParams("nu must exceed 2".into()));
            }
            Ok(student_t_quantile(alpha, nu) * ((nu - 2.0) / nu).sqrt())
        }
    }
}

/// One-step-ahead VaR: mu + sigma_t * F^{-1}(alpha). Negative thresholds
/// for small alpha; violations are r_t < VaR_t.
pub fn var_forecast(fit: &GarchFit, alpha: f64, zero_mean: bool) -> Result<VarSeries, GarchError> {
    let q = quantile(fit.spec.innovation, fit.params.nu, alpha)?;
    let mu = if zero_mean { 0.0 } else { fit.params.mu };
    Ok(VarSeries {
        alpha,
        values: fit.sigma.iter().map(|&s| mu + s * q).collect(),
        next_value: mu + fit.next_sigma2.sqrt() * q,
    })
}

/// VaR series from an explicit volatility path (used when filtering a
/// longer sample with parameters fitted on the training window).
pub fn var_from_sigma(
    sigma: &[f64],
    spec: &GarchSpec,
    params: &GarchParams,
    alpha: f64,
    zero_mean: bool,
) -> Result<Vec<f64>, GarchError> {
    let q = quantile(spec.innovation, params.nu, alpha)?;
    let mu = if zero_mean { 0.0 } else { params.mu };
    Ok(sigma.iter().map(|&s| mu + s * q).collect())
}

/// Expected tail value E[z | z < F^{-1}(alpha)] of the unit-variance
/// innovation; closed form for both distributions.
pub fn innovation_es(innovation: Innovation, nu: Option<f64>, alpha: f64) -> Result<f64, GarchError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(GarchError::DomainError(alpha));
    }
    match innovation {
        Innovation::Normal => {
            let q = norm_quantile(alpha);
            Ok(-norm_pdf(q) / alpha)
        }
        Innovation::StudentT => {
            let nu = nu.ok_or_else(|| GarchError::InvalidParams("missing nu".into()))?;
            if nu <= 2.0 {
                return Err(GarchError::InvalidParams("nu must exceed 2".into()));
            }
            let t_q = student_t_quantile(alpha, nu);
            let pdf = student_t_ln_pdf(t_q, nu).exp();
            let es_t = -pdf / alpha * (nu + t_q * t_q) / (nu - 1.0);
            Ok(es_t * ((nu - 2.0) / nu).sqrt())
        }
    }
}

/// Expected Shortfall series: ES_t(alpha) = mu + sigma_t * E[z | z < q].
pub fn es_forecast(fit: &GarchFit, alpha: f64, zero_mean: bool) -> Result<Vec<f64>, GarchError> {
    let tail = innovation_es(fit.spec.innovation, fit.params.nu, alpha)?;
    let mu = if zero_mean { 0.0 } else { fit.params.mu };
    Ok(fit.sigma.iter().map(|&s| mu + s * tail).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulate::simulate_garch;

    const NORMAL_GARCH: GarchSpec = GarchSpec {
        model: GarchModel::Garch,
        innovation: Innovation::Normal,
    };
    const NORMAL_GJR: GarchSpec = GarchSpec {
        model: GarchModel::Gjr,
        innovation: Innovation::Normal,
    };

    fn params(mu: f64, a0: f64, a1: f64, b1: f64, g: f64) -> GarchParams {
        GarchParams {
            mu,
            alpha0: a0,
            alpha1: a1,
            beta1: b1,
            gamma: g,
            nu: None,
        }
    }

    #[test]
    fn constant_variance_when_no_feedback() {
        let r = vec![0.01, -0.02, 0.005, 0.0, -0.01];
        let p = params(0.0, 4e-4, 0.0, 0.0, 0.0);
        let (s2, next) = filter_variance(&r, &NORMAL_GARCH, &p).unwrap();
        for &v in &s2[1..] {
            assert!((v - 4e-4).abs() < 1e-18);
        }
        assert!((next - 4e-4).abs() < 1e-18);
    }

    #[test]
    fn unconditional_variance_fixed_point() {
        // alternating +/- sqrt(1e-5): sample variance = 1e-5, eps^2 = 1e-5,
        // so the recursion sits at alpha0 / (1 - alpha1 - beta1) = 1e-5.
        let v = 1e-5f64;
        let r: Vec<f64> = (0..100)
            .map(|i| if i % 2 == 0 { v.sqrt() } else { -v.sqrt() })
            .collect();
        let p = params(0.0, 1e-6, 0.1, 0.8, 0.0);
        let (s2, _) = filter_variance(&r, &NORMAL_GARCH, &p).unwrap();
        for &x in &s2 {
            assert!((x - 1e-5).abs() < 1e-12);
        }
    }

    #[test]
    fn gjr_negative_shock_raises_variance_more() {
        let p = params(0.0, 1e-6, 0.05, 0.8, 0.1);
        let (neg, _) = filter_variance(&[-0.02, 0.0], &NORMAL_GJR, &p).unwrap();
        let (pos, _) = filter_variance(&[0.02, 0.0], &NORMAL_GJR, &p).unwrap();
        assert!(neg[1] > pos[1]);
        assert!((neg[1] - pos[1] - 0.1 * 0.02 * 0.02).abs() < 1e-15);
    }

    #[test]
    fn gjr_with_zero_gamma_equals_garch_bitwise() {
        let mut rng = crate::rng::StreamRng::new(3, "garch-test", 0);
        let r: Vec<f64> = (0..500).map(|_| 0.01 * rng.next_standard_normal()).collect();
        let pg = params(1e-4, 1e-6, 0.07, 0.9, 0.0);
        let (a, na) = filter_variance(&r, &NORMAL_GARCH, &pg).unwrap();
        let (b, nb) = filter_variance(&r, &NORMAL_GJR, &pg).unwrap();
        assert_eq!(a, b);
        assert_eq!(na, nb);
    }

    #[test]
    fn invalid_params_rejected() {
        let p = params(0.0, 1e-6, 0.5, 0.6, 0.0);
        assert!(matches!(
            filter_variance(&[0.0], &NORMAL_GARCH, &p),
            Err(GarchError::InvalidParams(_))
        ));
        let p = params(0.0, -1.0, 0.1, 0.8, 0.0);
        assert!(p.validate(&NORMAL_GARCH).is_err());
    }

    #[test]
    fn nll_reduces_to_iid_gaussian() {
        let r = vec![0.01, -0.02, 0.015, 0.0, -0.005, 0.01, -0.01, 0.02];
        let a0 = sample_variance(&r); // make sigma0^2 equal alpha0 too
        let p = params(0.0, a0, 0.0, 0.0, 0.0);
        let nll = negative_log_likelihood(&r, &NORMAL_GARCH, &p).unwrap();
        let expect: f64 = r
            .iter()
            .map(|&x| 0.5 * (LN_2PI + a0.ln()) + x * x / (2.0 * a0))
            .sum();
        assert!((nll - expect).abs() < 1e-10);
    }

    #[test]
    fn nll_prefers_true_parameters_on_simulation() {
        let truth = params(0.0, 1e-6, 0.1, 0.8, 0.0);
        let mut wins = 0;
        for seed in 0..5 {
            let path = simulate_garch(&truth, &NORMAL_GARCH, 5000, seed).unwrap();
            let nll_true =
                negative_log_likelihood(&path.returns, &NORMAL_GARCH, &truth).unwrap();
            let perturbed = params(0.0, 1e-6, 0.3, 0.6, 0.0);
            let nll_pert =
                negative_log_likelihood(&path.returns, &NORMAL_GARCH, &perturbed).unwrap();
            if nll_true < nll_pert {
                wins += 1;
            }
        }
        assert!(wins >= 4, "true params won only {wins}/5");
    }

    #[test]
    fn student_t_nll_approaches_normal() {
        let r = vec![0.012, -0.008, 0.02, -0.015, 0.003, 0.007, -0.011, 0.001];
        let pn = params(0.0, 1e-4, 0.05, 0.9, 0.0);
        let spec_t = GarchSpec {
            model: GarchModel::Garch,
            innovation: Innovation::StudentT,
        };
        let pt = GarchParams {
            nu: Some(1e6),
            ..pn
        };
        let nll_n = negative_log_likelihood(&r, &NORMAL_GARCH, &pn).unwrap();
        let nll_t = negative_log_likelihood(&r, &spec_t, &pt).unwrap();
        assert!((nll_n - nll_t).abs() / (r.len() as f64) < 1e-3);
    }

    #[test]
    fn quantile_values() {
        assert!(quantile(Innovation::Normal, None, 0.5).unwrap().abs() < 1e-12);
        assert!(
            (quantile(Innovation::Normal, None, 0.05).unwrap() + 1.644854).abs() < 1e-6
        );
        let qt = quantile(Innovation::StudentT, Some(1e6), 0.05).unwrap();
        assert!((qt + 1.644854).abs() < 1e-4);
        assert!(quantile(Innovation::Normal, None, 0.0).is_err());
        assert!(quantile(Innovation::StudentT, Some(1.5), 0.05).is_err());
    }

    #[test]
    fn var_forecast_direct_formula() {
        // mu = 0, sigma = 0.02: VaR(5%) = 0.02 * -1.6449 = -0.0329
        let fit = GarchFit {
            spec: NORMAL_GARCH,
            params: params(0.0, 4e-4, 0.0, 0.0, 0.0),
            loglik: 0.0,
            sigma: vec![0.02],
            std_residuals: vec![0.0],
            converged: true,
            next_sigma2: 4e-4,
        };
        let var = var_forecast(&fit, 0.05, false).unwrap();
        assert!((var.values[0] + 0.0329).abs() < 1e-4);
        let var50 = var_forecast(&fit, 0.5, false).unwrap();
        assert!(var50.values[0].abs() < 1e-12);
    }

    #[test]
    fn var_monotone_in_alpha() {
        let fit = GarchFit {
            spec: NORMAL_GARCH,
            params: params(1e-4, 4e-4, 0.0, 0.0, 0.0),
            loglik: 0.0,
            sigma: vec![0.01, 0.02, 0.03],
            std_residuals: vec![0.0; 3],
            converged: true,
            next_sigma2: 4e-4,
        };
        let mut prev = f64::NEG_INFINITY;
        for &a in &[0.01, 0.05, 0.1, 0.25, 0.5, 0.9] {
            let v = var_forecast(&fit, a, false).unwrap().values[0];
            assert!(v >= prev);
            prev = v;
        }
    }

    #[test]
    fn es_normal_closed_form_vs_quadrature() {
        // numeric integration oracle for E[z | z < q], mu=0 sigma=1
        let alpha = 0.05;
        let q = norm_quantile(alpha);
        let steps = 400_000;
        let lo = -12.0;
        let h = (q - lo) / steps as f64;
        let mut integral = 0.0;
        for i in 0..steps {
            let x = lo + (i as f64 + 0.5) * h;
            integral += x * norm_pdf(x) * h;
        }
        let oracle = integral / alpha;
        let es = innovation_es(Innovation::Normal, None, alpha).unwrap();
        assert!((es - oracle).abs() < 1e-5, "es={es} oracle={oracle}");
        assert!((es + 2.0627).abs() < 1e-4);
    }

    #[test]
    fn es_student_t_closed_form_vs_quadrature() {
        let alpha = 0.05;
        let nu = 6.0;
        let unit = ((nu - 2.0) / nu as f64).sqrt();
        let q = student_t_quantile(alpha, nu) * unit;
        let steps = 800_000;
        let lo = -60.0;
        let h = (q - lo) / steps as f64;
        let mut integral = 0.0;
        for i in 0..steps {
            let z = lo + (i as f64 + 0.5) * h;
            // density of unit-variance standardized t at z
            let pdf = student_t_ln_pdf(z / unit, nu).exp() / unit;
            integral += z * pdf * h;
        }
        let oracle = integral / alpha;
        let es = innovation_es(Innovation::StudentT, Some(nu), alpha).unwrap();
        assert!((es - oracle).abs() < 1e-4, "es={es} oracle={oracle}");
    }

    #[test]
    fn es_more_extreme_than_var_and_vanishes_at_one() {
        let fit = GarchFit {
            spec: NORMAL_GARCH,
            params: params(0.0, 4e-4, 0.0, 0.0, 0.0),
            loglik: 0.0,
            sigma: vec![0.01, 0.02],
            std_residuals: vec![0.0; 2],
            converged: true,
            next_sigma2: 4e-4,
        };
        for &a in &[0.01, 0.05, 0.25] {
            let var = var_forecast(&fit, a, false).unwrap();
            let es = es_forecast(&fit, a, false).unwrap();
            for (v, e) in var.values.iter().zip(&es) {
                assert!(e <= v);
            }
        }
        let es = es_forecast(&fit, 1.0 - 1e-9, false).unwrap();
        assert!(es[0].abs() < 1e-4);
    }

    #[test]
    fn mle_recovers_simulated_garch_smoke() {
        let truth = params(0.0, 1e-6, 0.08, 0.90, 0.0);
        let path = simulate_garch(&truth, &NORMAL_GARCH, 5000, 11).unwrap();
        let fit = fit_mle(&path.returns, NORMAL_GARCH).unwrap();
        assert!((fit.params.alpha1 - 0.08).abs() < 0.05, "{:?}", fit.params);
        assert!((fit.params.beta1 - 0.90).abs() < 0.05, "{:?}", fit.params);
        // standardized residuals near unit variance
        let v = sample_variance(&fit.std_residuals);
        assert!((0.9..=1.1).contains(&v), "residual variance {v}");
        // likelihood at optimum beats every start
        for &(a1, b1) in &[(0.05, 0.90), (0.10, 0.85), (0.02, 0.70)] {
            let pers = a1 + b1;
            let start = params(
                path.returns.iter().sum::<f64>() / path.returns.len() as f64,
                sample_variance(&path.returns) * (1.0 - pers),
                a1,
                b1,
                0.0,
            );
            let nll = negative_log_likelihood(&path.returns, &NORMAL_GARCH, &start).unwrap();
            assert!(fit.loglik >= -nll - 1e-6);
        }
    }

    #[test]
    fn fit_too_short() {
        assert!(matches!(
            fit_mle(&[0.01; 100], NORMAL_GARCH),
            Err(GarchError::TooShort { .. })
        ));
    }

    #[test]
    fn constant_series_flagged() {
        let r = vec![0.001; 300];
        // degenerate likelihood: either flagged non-converged or alpha0 at
        // the lower boundary
        match fit_mle(&r, NORMAL_GARCH) {
            Ok(fit) => assert!(!fit.converged || fit.params.alpha0 < 1e-10),
            Err(_) => {}
        }
    }

    #[test]
    fn sigma_positive_on_random_valid_params() {
        let mut rng = crate::rng::StreamRng::new(17, "garch-prop", 0);
        for _ in 0..50 {
            let a1 = 0.3 * rng.next_f64();
            let b1 = (1.0 - a1 - 0.01) * rng.next_f64();
            let p = params(0.0, 1e-6 + 1e-5 * rng.next_f64(), a1, b1, 0.0);
            let r: Vec<f64> = (0..200).map(|_| 0.01 * rng.next_standard_normal()).collect();
            let sigma = filter_volatility(&r, &NORMAL_GARCH, &p).unwrap();
            assert!(sigma.iter().all(|&s| s > 0.0));
        }
    }
}
