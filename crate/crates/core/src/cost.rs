//! Transaction-cost model shared by the allocator's objective and the
//! backtest's realized accounting.
//!
//! Trades are expressed as fractions of portfolio value. For a weight change
//! `Δw` on one asset the cost, also as a fraction of portfolio value, is
//!
//! ```text
//! (b / 2) · |Δw|  +  σ_ewm · |Δw|^(3/2) / sqrt(v_ewm / V)
//! ```
//!
//! with `b` the bid-ask spread, `σ_ewm` / `v_ewm` the lagged EWM return
//! standard deviation and dollar volume, and `V` the current portfolio
//! value. Cash trades are free and are not passed through this model.

use nalgebra::DVector;
use thiserror::Error;

use crate::estimators::EstimateSet;

/// Default bid-ask spread: 20 basis points.
pub const DEFAULT_SPREAD: f64 = 0.002;

#[derive(Debug, Error)]
pub enum CostError {
    #[error("asset {asset} has EWM volume {volume} but a nonzero trade; cannot price impact")]
    Illiquid { asset: usize, volume: f64 },
    #[error("invalid cost parameters: {0}")]
    Invalid(String),
}

/// Snapshot of everything the cost formula needs on one decision date.
#[derive(Debug, Clone)]
pub struct CostParams {
    /// Bid-ask spread (fraction, e.g. 0.002 = 20 bps).
    pub spread: f64,
    /// Lagged EWM return standard deviation per risky asset.
    pub ewm_sigma: DVector<f64>,
    /// Lagged EWM dollar volume per risky asset.
    pub ewm_volume: DVector<f64>,
    /// Current portfolio value (currency units).
    pub portfolio_value: f64,
}

impl CostParams {
    pub fn new(
        spread: f64,
        ewm_sigma: DVector<f64>,
        ewm_volume: DVector<f64>,
        portfolio_value: f64,
    ) -> Result<Self, CostError> {
        if !(spread >= 0.0) {
            return Err(CostError::Invalid(format!("spread {spread} must be >= 0")));
        }
        if !(portfolio_value > 0.0) {
            return Err(CostError::Invalid(format!(
                "portfolio value {portfolio_value} must be positive"
            )));
        }
        if ewm_sigma.len() != ewm_volume.len() {
            return Err(CostError::Invalid(
                "sigma / volume length mismatch".to_string(),
            ));
        }
        if ewm_sigma.iter().any(|s| !(*s >= 0.0)) {
            return Err(CostError::Invalid("ewm_sigma must be >= 0".to_string()));
        }
        Ok(CostParams {
            spread,
            ewm_sigma,
            ewm_volume,
            portfolio_value,
        })
    }

    /// Builds the snapshot for a decision date from its estimate set.
    pub fn from_estimates(
        estimates: &EstimateSet,
        spread: f64,
        portfolio_value: f64,
    ) -> Result<Self, CostError> {
        Self::new(
            spread,
            estimates.ewm_sigma.clone(),
            estimates.ewm_volume.clone(),
            portfolio_value,
        )
    }

    pub fn n_assets(&self) -> usize {
        self.ewm_sigma.len()
    }

    /// Impact coefficient of asset `i`: `σ_ewm / sqrt(v_ewm / V)`, the
    /// multiplier of `|Δw|^(3/2)` in the cost. Zero-σ assets have zero
    /// impact regardless of volume.
    pub fn impact_coefficient(&self, i: usize) -> Result<f64, CostError> {
        let sigma = self.ewm_sigma[i];
        if sigma == 0.0 {
            return Ok(0.0);
        }
        let volume = self.ewm_volume[i];
        if !(volume > 0.0) {
            return Err(CostError::Illiquid { asset: i, volume });
        }
        Ok(sigma / (volume / self.portfolio_value).sqrt())
    }
}

/// Cost of one asset's weight change as a fraction of portfolio value.
pub fn transaction_cost_single(delta_w: f64, params: &CostParams, i: usize) -> Result<f64, CostError> {
    let d = delta_w.abs();
    if d == 0.0 {
        return Ok(0.0);
    }
    if !d.is_finite() {
        return Err(CostError::Invalid(format!(
            "non-finite trade {delta_w} for asset {i}"
        )));
    }
    let volume = params.ewm_volume[i];
    if !(volume > 0.0) {
        return Err(CostError::Illiquid { asset: i, volume });
    }
    let linear = 0.5 * params.spread * d;
    let impact = params.ewm_sigma[i] * d * d.sqrt() / (volume / params.portfolio_value).sqrt();
    Ok(linear + impact)
}

/// Per-asset costs for a risky-asset trade vector (cash excluded).
pub fn transaction_cost(delta_w: &[f64], params: &CostParams) -> Result<Vec<f64>, CostError> {
    if delta_w.len() != params.n_assets() {
        return Err(CostError::Invalid(format!(
            "trade vector length {} != asset count {}",
            delta_w.len(),
            params.n_assets()
        )));
    }
    delta_w
        .iter()
        .enumerate()
        .map(|(i, &d)| transaction_cost_single(d, params, i))
        .collect()
}

/// Total cost of a risky-asset trade vector as a fraction of portfolio value.
pub fn total_transaction_cost(delta_w: &[f64], params: &CostParams) -> Result<f64, CostError> {
    Ok(transaction_cost(delta_w, params)?.iter().sum())
}
