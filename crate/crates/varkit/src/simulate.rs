//! Synthetic data generators. These are the ground-truth oracles behind
//! the statistical acceptance tests: GARCH/GJR paths, regime-switching
//! returns, GPD excess samples, and an imbalanced Gaussian-blobs
//! classification task.

use crate::garch::{GarchModel, GarchParams, GarchSpec, Innovation};
use crate::rng::StreamRng;
use crate::special::student_t_quantile;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("invalid parameters: {0}")]
    InvalidParams(String),
}

const BURN_IN: usize = 500;

#[derive(Debug, Clone)]
pub struct GarchPath {
    pub returns: Vec<f64>,
    pub sigma: Vec<f64>,
}

fn draw_innovation(rng: &mut StreamRng, innovation: Innovation, nu: Option<f64>) -> f64 {
    match innovation {
        Innovation::Normal => rng.next_standard_normal(),
        Innovation::StudentT => {
            let nu = nu.expect("nu required for StudentT");
            student_t_quantile(rng.next_open_f64(), nu) * ((nu - 2.0) / nu).sqrt()
        }
    }
}

/// Forward-simulate the conditional variance recursion with unit-variance
/// innovations; the first 500 draws are discarded as burn-in.
pub fn simulate_garch(
    params: &GarchParams,
    spec: &GarchSpec,
    len: usize,
    seed: u64,
) -> Result<GarchPath, SimError> {
    params
        .validate(spec)
        .map_err(|e| SimError::InvalidParams(e.to_string()))?;
    let mut rng = StreamRng::new(seed, "simulate.garch", 0);
    let persistence = params.alpha1 + params.beta1 + 0.5 * params.gamma;
    let mut sigma2 = params.alpha0 / (1.0 - persistence);
    let mut eps_prev = 0.0;
    let mut first = true;
    let mut returns = Vec::with_capacity(len);
    let mut sigma = Vec::with_capacity(len);
    for i in 0..BURN_IN + len {
        if !first {
            let arch = if spec.model == GarchModel::Gjr && eps_prev < 0.0 {
                params.alpha1 + params.gamma
            } else {
                params.alpha1
            };
            sigma2 = params.alpha0 + arch * eps_prev * eps_prev + params.beta1 * sigma2;
        }
        first = false;
        let z = draw_innovation(&mut rng, spec.innovation, params.nu);
        let eps = sigma2.sqrt() * z;
        eps_prev = eps;
        if i >= BURN_IN {
            returns.push(params.mu + eps);
            sigma.push(sigma2.sqrt());
        }
    }
    Ok(GarchPath { returns, sigma })
}

#[derive(Debug, Clone)]
pub struct RegimePath {
    pub returns: Vec<f64>,
    /// 1 when the high-volatility regime is active
    pub regimes: Vec<u8>,
}

/// Two-state symmetric Markov chain selecting per-day volatility;
/// Gaussian returns. Regime labels double as oracle predictions in the
/// adjusted-VaR tests.
pub fn simulate_regime_switch(
    low_vol: f64,
    high_vol: f64,
    switch_prob: f64,
    len: usize,
    seed: u64,
) -> Result<RegimePath, SimError> {
    if !(low_vol > 0.0 && high_vol > low_vol) {
        return Err(SimError::InvalidParams(
            "need 0 < low_vol < high_vol".into(),
        ));
    }
    if !(0.0..1.0).contains(&switch_prob) {
        return Err(SimError::InvalidParams("switch_prob must be in [0,1)".into()));
    }
    let mut rng = StreamRng::new(seed, "simulate.regime", 0);
    let mut state: u8 = 0;
    let mut returns = Vec::with_capacity(len);
    let mut regimes = Vec::with_capacity(len);
    for _ in 0..len {
        if switch_prob > 0.0 && rng.next_f64() < switch_prob {
            state ^= 1;
        }
        let vol = if state == 1 { high_vol } else { low_vol };
        returns.push(vol * rng.next_standard_normal());
        regimes.push(state);
    }
    Ok(RegimePath { returns, regimes })
}

/// GPD excess sample by inverse-CDF: e = beta((1-u)^{-xi} - 1)/xi.
pub fn simulate_gpd(beta: f64, xi: f64, n: usize, seed: u64) -> Result<Vec<f64>, SimError> {
    if !(beta > 0.0) {
        return Err(SimError::InvalidParams("beta must be > 0".into()));
    }
    let mut rng = StreamRng::new(seed, "simulate.gpd", 0);
    Ok((0..n)
        .map(|_| {
            let u = rng.next_f64();
            if xi.abs() < 1e-12 {
                -beta * (1.0 - u).ln()
            } else {
                beta * ((1.0 - u).powf(-xi) - 1.0) / xi
            }
        })
        .collect())
}

#[derive(Debug, Clone)]
pub struct BlobsTask {
    /// 2-D feature rows
    pub features: Vec<Vec<f64>>,
    /// 1 = minority / high-risk class
    pub labels: Vec<u8>,
}

/// Two isotropic Gaussian clusters in 2-D with standard deviation
/// `sigma`, centers at ±(separation/2)·(1,1); minority:majority = 1:imbalance.
/// Rows are interleaved deterministically so class order carries no signal.
pub fn simulate_blobs(
    imbalance: usize,
    n: usize,
    separation: f64,
    sigma: f64,
    seed: u64,
) -> Result<BlobsTask, SimError> {
    if imbalance < 1 {
        return Err(SimError::InvalidParams("imbalance must be >= 1".into()));
    }
    if !(sigma > 0.0) {
        return Err(SimError::InvalidParams("sigma must be > 0".into()));
    }
    let mut rng = StreamRng::new(seed, "simulate.blobs", 0);
    let half = separation / 2.0;
    let mut features = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        // exactly one minority sample per (imbalance + 1) block
        let label = u8::from(i % (imbalance + 1) == 0);
        let center = if label == 1 { half } else { -half };
        features.push(vec![
            center + sigma * rng.next_standard_normal(),
            center + sigma * rng.next_standard_normal(),
        ]);
        labels.push(label);
    }
    Ok(BlobsTask { features, labels })
}
