//! Multi-period portfolio optimization driven by regime-prediction signals.
//!
//! The pipeline: daily price panels and per-asset regime predictions are
//! turned into return estimates (EMA transform plus a Kalman error-correction
//! boost), fed together with a rolling covariance and a liquidity-aware
//! transaction-cost model into a model-predictive-control allocator, and
//! evaluated by a roll-forward backtester with benchmark portfolios,
//! performance metrics, and purged time-series hyperparameter tuning.
//!
//! Entry points:
//! - [`market_data`]: CSV loading and calendar alignment into an [`market_data::AlignedPanel`].
//! - [`signals`]: regime-signal ingestion and the synthetic scenario generator.
//! - [`estimators`]: EMA/Kalman return estimates and rolling covariance.
//! - [`cost`]: the spread + market-impact transaction-cost model.
//! - [`mpc`]: the multi-step allocation solver and its brute-force oracle.
//! - [`backtest`]: roll-forward simulation plus buy-and-hold and 1/N benchmarks.
//! - [`evaluation`]: Sharpe/Sortino/drawdown/information-ratio reports and sweeps.
//! - [`tuning`]: purged time-series splits and seeded random search.

pub mod backtest;
pub mod cost;
pub mod estimators;
// pub mod evaluation;
pub mod market_data;
pub mod mpc;
pub mod signals;
// pub mod tuning;


pub use market_data::{AlignedPanel, CashRateSeries, PriceSeries};

pub use signals::{RegimeClass, RegimeSignal, SignalPanel, SynthConfig};
