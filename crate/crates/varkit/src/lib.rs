//! Hybrid market-risk toolkit: GARCH-family volatility forecasting,
//! violation-anchored risk labeling, a reinforcement-learning classifier
//! for imbalanced risk days, classification-adjusted Value-at-Risk, and a
//! statistical backtesting suite.

pub mod adjust;
pub mod backtest;
pub mod config;
pub mod ddqn;
pub mod evt;
pub mod garch;
pub mod labeling;
pub mod metrics;
pub mod net;
pub mod optim;
pub mod pipeline;
pub mod rng;
pub mod simulate;
pub mod special;
pub mod timeseries;
