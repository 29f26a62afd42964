//! Per-decision-date inputs for the allocator: EMA returns, the
//! regime-signal return transform, horizon-lagged estimates, the Kalman
//! error-correction boost, rolling covariance, and the EWM volatility and
//! dollar-volume snapshots used by the cost model.
//!
//! Conventions, fixed across the crate:
//! - A decision at date index `t` may read panel data up to and including
//!   `t`; the σ/volume snapshots are lagged one extra day (through `t - 1`).
//! - The step-`τ` raw estimate made at `t` applies the signal observed at
//!   `t` to the return EMA as of `τ - H`, so estimates for the same target
//!   date agree across adjacent decision dates when the signal class holds.
//! - The covariance window ends at `t - 1`.

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::AlignedPanel;
use crate::signals::{RegimeClass, SignalPanel};

#[derive(Debug, Error)]
pub enum EstimateError {
    #[error("warm-up violation at t={t}: {msg}")]
    WarmUp { t: usize, msg: String },
    #[error("estimator misuse: {0}")]
    Misuse(String),
}

/// Exponential moving average with smoothing factor `2 / (n + 1)`, seeded
/// with the first observation.
#[derive(Debug, Clone)]
pub struct EmaState {
    window: usize,
    current: Option<f64>,
}

impl EmaState {
    pub fn new(window: usize) -> Self {
        assert!(window >= 1, "EMA window must be >= 1");
        EmaState {
            window,
            current: None,
        }
    }

    pub fn alpha(&self) -> f64 {
        2.0 / (self.window as f64 + 1.0)
    }

    /// Folds one observation in and returns the new value. Uses the
    /// incremental form `prev + α·(x - prev)` of the recurrence
    /// `x·α + prev·(1 - α)` so that a constant input is an exact fixed point.
    pub fn update(&mut self, x: f64) -> f64 {
        let next = match self.current {
            None => x,
            Some(prev) => prev + self.alpha() * (x - prev),
        };
        self.current = Some(next);
        next
    }

    pub fn value(&self) -> Option<f64> {
        self.current
    }
}

/// Scalar local-level Kalman filter tracking the bias between realized and
/// estimated returns: the hidden level follows a random walk with process
/// noise `q` and is observed with noise `r`.
#[derive(Debug, Clone)]
pub struct KalmanState {
    level: f64,
    variance: f64,
    q: f64,
    r: f64,
}

impl KalmanState {
    pub fn new(q: f64, r: f64) -> Self {
        assert!(q > 0.0 && r > 0.0, "kalman noise variances must be positive");
        KalmanState {
            level: 0.0,
            variance: 1.0,
            q,
            r,
        }
    }

    pub fn level(&self) -> f64 {
        self.level
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    /// One predict/update step on observation `y`; returns the level as it
    /// stood *before* this observation (the lagged state).
    pub fn observe(&mut self, y: f64) -> f64 {
        let lagged = self.level;
        let p_pred = self.variance + self.q;
        let gain = p_pred / (p_pred + self.r);
        self.level += gain * (y - self.level);
        self.variance = (1.0 - gain) * p_pred;
        lagged
    }

    /// Boosts a raw estimate by the lagged hidden state, folding in the
    /// previous day's observation `realized_prev - raw_prev`.
    pub fn boost(&mut self, raw: f64, realized_prev: f64, raw_prev: f64) -> f64 {
        raw + self.observe(realized_prev - raw_prev)
    }
}

/// Signal transform of the return EMA: a Bullish prediction (contrarian
/// sell) flips the sign scaled by its probability, Bearish keeps the sign
/// scaled by its probability, Other passes the EMA through unchanged.
pub fn estimate_return(class: RegimeClass, p_bull: f64, p_bear: f64, ema_r: f64) -> f64 {
    match class {
        RegimeClass::Bullish => -p_bull * ema_r,
        RegimeClass::Bearish => p_bear * ema_r,
        RegimeClass::Other => ema_r,
    }
}

/// Estimator knobs; all defaults follow the pipeline's standing choices.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimatorConfig {
    /// Return-EMA window (days).
    pub ema_window: usize,
    /// Window for the EWM standard deviation of returns.
    pub vol_window: usize,
    /// Window for the EWM dollar volume.
    pub volume_window: usize,
    /// Rolling covariance lookback (days), ending the day before a decision.
    pub cov_window: usize,
    /// Ridge added to the risky diagonal of the covariance estimate.
    pub cov_ridge: f64,
    /// Kalman process-noise variance.
    pub kalman_q: f64,
    /// Kalman observation-noise variance.
    pub kalman_r: f64,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        EstimatorConfig {
            ema_window: 10,
            vol_window: 10,
            volume_window: 10,
            cov_window: 504,
            cov_ridge: 1e-8,
            kalman_q: 1e-6,
            kalman_r: 1e-4,
        }
    }
}

impl EstimatorConfig {
    /// First date index with enough history for both the horizon estimates
    /// and the covariance window.
    pub fn warmup_days(&self, horizon: usize) -> usize {
        (self.cov_window + 1).max(horizon + self.ema_window)
    }
}

/// Everything the allocator needs at one decision date. Asset order matches
/// the panel; cash is the implicit last component with zero covariance.
#[derive(Debug, Clone)]
pub struct EstimateSet {
    pub t: usize,
    pub date: NaiveDate,
    /// Raw signal-transformed estimates, `(asset, step)`.
    pub raw: DMatrix<f64>,
    /// Kalman-boosted estimates, `(asset, step)`.
    pub boosted: DMatrix<f64>,
    /// Covariance over risky assets plus a zero cash row/column, `(N+1)²`.
    pub sigma: DMatrix<f64>,
    /// Lagged EWM return standard deviation per risky asset.
    pub ewm_sigma: DVector<f64>,
    /// Lagged EWM dollar volume per risky asset.
    pub ewm_volume: DVector<f64>,
    /// Daily risk-free rate known at the decision date.
    pub cash_rate: f64,
}

impl EstimateSet {
    pub fn n_assets(&self) -> usize {
        self.raw.nrows()
    }

    pub fn horizon(&self) -> usize {
        self.raw.ncols()
    }

    /// Full boosted return vector for step `k` (0-based), cash last.
    pub fn step_returns(&self, k: usize) -> DVector<f64> {
        let n = self.n_assets();
        DVector::from_fn(n + 1, |i, _| {
            if i < n {
                self.boosted[(i, k)]
            } else {
                self.cash_rate
            }
        })
    }
}

/// Raw horizon estimates at decision date `t`: the step-`t + k` estimate
/// (k = 1..=horizon) applies the date-`t` signal to the return EMA as of
/// `t + k - horizon`. Recomputes the EMA from the panel start; the
/// incremental engine reproduces these values bit-for-bit.
pub fn horizon_estimates(
    panel: &AlignedPanel,
    signals: &SignalPanel,
    t: usize,
    horizon: usize,
    ema_window: usize,
) -> Result<DMatrix<f64>, EstimateError> {
    if horizon < 1 {
        return Err(EstimateError::Misuse("horizon must be >= 1".to_string()));
    }
    if t >= panel.n_dates() {
        return Err(EstimateError::Misuse(format!(
            "t={t} outside panel of {} dates",
            panel.n_dates()
        )));
    }
    if t < horizon + ema_window {
        return Err(EstimateError::WarmUp {
            t,
            msg: format!(
                "need at least horizon + ema_window = {} days of history",
                horizon + ema_window
            ),
        });
    }
    let n = panel.n_assets();
    let mut out = DMatrix::zeros(n, horizon);
    for i in 0..n {
        let mut ema = EmaState::new(ema_window);
        // ema_hist[s] = EMA of returns through date s (valid from s = 1).
        let mut ema_hist = vec![f64::NAN; t + 1];
        for s in 1..=t {
            ema_hist[s] = ema.update(panel.ret(s, i));
        }
        let class = signals.class(t, i);
        let p_bull = signals.p_bull(t, i);
        let p_bear = signals.p_bear(t, i);
        for k in 1..=horizon {
            let lag_index = t + k - horizon;
            out[(i, k - 1)] = estimate_return(class, p_bull, p_bear, ema_hist[lag_index]);
        }
    }
    Ok(out)
}

/// Sample covariance (divisor n-1) of daily returns over the `window` days
/// ending at `t - 1`, with `ridge` added to the risky diagonal and the cash
/// row/column fixed at zero. Shape is `(N+1) x (N+1)`, cash last.
pub fn rolling_covariance(
    panel: &AlignedPanel,
    t: usize,
    window: usize,
    ridge: f64,
) -> Result<DMatrix<f64>, EstimateError> {
    if window < 2 {
        return Err(EstimateError::Misuse(
            "covariance window must be >= 2".to_string(),
        ));
    }
    if t < window + 1 {
        return Err(EstimateError::WarmUp {
            t,
            msg: format!("need {window} return days strictly before t"),
        });
    }
    let n = panel.n_assets();
    let first = t - window; // window covers return indices [t - window, t - 1]
    let mut centered = DMatrix::zeros(window, n);
    for i in 0..n {
        let mean: f64 = (0..window).map(|s| panel.ret(first + s, i)).sum::<f64>() / window as f64;
        for s in 0..window {
            centered[(s, i)] = panel.ret(first + s, i) - mean;
        }
    }
    let cov_risky = centered.transpose() * &centered / (window as f64 - 1.0);
    let mut sigma = DMatrix::zeros(n + 1, n + 1);
    sigma.view_mut((0, 0), (n, n)).copy_from(&cov_risky);
    for i in 0..n {
        sigma[(i, i)] += ridge;
    }
    Ok(sigma)
}

/// Incremental estimator state threaded through a roll-forward run.
///
/// Call [`EstimatorEngine::step`] once for every date index from 1 upward;
/// on decision days, [`EstimatorEngine::estimate_set`] packages the current
/// estimates with the covariance. State after processing date `t` depends
/// only on panel and signal data up to `t`.
#[derive(Debug, Clone)]
pub struct EstimatorEngine {
    config: EstimatorConfig,
    horizon: usize,
    next_t: usize,
    ret_ema: Vec<EmaState>,
    /// `ema_hist[i][s]` = return EMA of asset `i` through date `s` (s >= 1).
    ema_hist: Vec<Vec<f64>>,
    vol_mean_ema: Vec<EmaState>,
    var_ema: Vec<EmaState>,
    volume_ema: Vec<EmaState>,
    kalman: Vec<KalmanState>,
    /// First-step raw estimates from the previous processed day.
    prev_raw: Option<DVector<f64>>,
    /// Outputs of the most recent step with enough history.
    last_raw: Option<DMatrix<f64>>,
    last_boosted: Option<DMatrix<f64>>,
    /// σ / volume snapshots as of the most recent step (lagged one day).
    snapshot_sigma: DVector<f64>,
    snapshot_volume: DVector<f64>,
}

impl EstimatorEngine {
    pub fn new(config: EstimatorConfig, horizon: usize, n_assets: usize) -> Self {
        assert!(horizon >= 1, "horizon must be >= 1");
        EstimatorEngine {
            horizon,
            next_t: 1,
            ret_ema: (0..n_assets).map(|_| EmaState::new(config.ema_window)).collect(),
            ema_hist: vec![vec![f64::NAN]; n_assets],
            vol_mean_ema: (0..n_assets).map(|_| EmaState::new(config.vol_window)).collect(),
            var_ema: (0..n_assets).map(|_| EmaState::new(config.vol_window)).collect(),
            volume_ema: (0..n_assets)
                .map(|_| EmaState::new(config.volume_window))
                .collect(),
            kalman: (0..n_assets)
                .map(|_| KalmanState::new(config.kalman_q, config.kalman_r))
                .collect(),
            prev_raw: None,
            last_raw: None,
            last_boosted: None,
            snapshot_sigma: DVector::zeros(n_assets),
            snapshot_volume: DVector::zeros(n_assets),
            config,
        }
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    /// Lagged EWM return standard deviation per asset (through the day
    /// before the last processed one).
    pub fn snapshot_sigma(&self) -> DVector<f64> {
        self.snapshot_sigma.clone()
    }

    /// Lagged EWM dollar volume per asset.
    pub fn snapshot_volume(&self) -> DVector<f64> {
        self.snapshot_volume.clone()
    }

    /// Processes the observations of date `t` (its return, volume, and
    /// signal). Must be called with t = 1, 2, ... in order.
    pub fn step(
        &mut self,
        panel: &AlignedPanel,
        signals: &SignalPanel,
        t: usize,
    ) -> Result<(), EstimateError> {
        if t != self.next_t {
            return Err(EstimateError::Misuse(format!(
                "steps must be consecutive: expected t={}, got t={t}",
                self.next_t
            )));
        }
        let n = panel.n_assets();
        if n != self.ret_ema.len() {
            return Err(EstimateError::Misuse(
                "panel asset count changed under the engine".to_string(),
            ));
        }
        if t == 1 {
            // Day 0 has a volume observation but no return.
            for (i, ema) in self.volume_ema.iter_mut().enumerate() {
                ema.update(panel.volume(0, i));
            }
        }

        // Cost-model snapshots are lagged: state through t - 1.
        for i in 0..n {
            self.snapshot_sigma[i] = self.var_ema[i].value().map_or(0.0, |v| v.max(0.0).sqrt());
            self.snapshot_volume[i] = self.volume_ema[i].value().unwrap_or(0.0);
        }

        // Fold in date t's return, deviation, and volume.
        for i in 0..n {
            let r = panel.ret(t, i);
            let ema = self.ret_ema[i].update(r);
            self.ema_hist[i].push(ema);
            let mean = self.vol_mean_ema[i].update(r);
            let dev = r - mean;
            self.var_ema[i].update(dev * dev);
            self.volume_ema[i].update(panel.volume(t, i));
        }

        // Kalman pass: yesterday's first-step estimate targeted today, so
        // its error is today's observation. The boost uses the level as it
        // stood before this update.
        let lagged_levels: Vec<f64> = match self.prev_raw.take() {
            Some(prev) => (0..n)
                .map(|i| self.kalman[i].observe(panel.ret(t, i) - prev[i]))
                .collect(),
            None => (0..n).map(|i| self.kalman[i].level()).collect(),
        };

        if t >= self.horizon + self.config.ema_window {
            let h = self.horizon;
            let mut raw = DMatrix::zeros(n, h);
            for i in 0..n {
                let class = signals.class(t, i);
                let p_bull = signals.p_bull(t, i);
                let p_bear = signals.p_bear(t, i);
                for k in 1..=h {
                    let lag_index = t + k - h;
                    raw[(i, k - 1)] =
                        estimate_return(class, p_bull, p_bear, self.ema_hist[i][lag_index]);
                }
            }
            let mut boosted = raw.clone();
            for i in 0..n {
                for k in 0..h {
                    boosted[(i, k)] += lagged_levels[i];
                }
            }
            self.prev_raw = Some(raw.column(0).into_owned());
            self.last_raw = Some(raw);
            self.last_boosted = Some(boosted);
        } else {
            self.prev_raw = None;
            self.last_raw = None;
            self.last_boosted = None;
        }

        self.next_t = t + 1;
        Ok(())
    }

    /// Packages the estimates of the most recently processed date `t`
    /// together with the lagged rolling covariance.
    pub fn estimate_set(
        &self,
        panel: &AlignedPanel,
        t: usize,
    ) -> Result<EstimateSet, EstimateError> {
        if t + 1 != self.next_t {
            return Err(EstimateError::Misuse(format!(
                "estimate_set(t={t}) requires the engine to have just processed t"
            )));
        }
        let raw = self.last_raw.clone().ok_or(EstimateError::WarmUp {
            t,
            msg: format!(
                "need at least horizon + ema_window = {} days of history",
                self.horizon + self.config.ema_window
            ),
        })?;
        let boosted = self.last_boosted.clone().expect("set alongside last_raw");
        let sigma = rolling_covariance(panel, t, self.config.cov_window, self.config.cov_ridge)?;
        Ok(EstimateSet {
            t,
            date: panel.date(t),
            raw,
            boosted,
            sigma,
            ewm_sigma: self.snapshot_sigma.clone(),
            ewm_volume: self.snapshot_volume.clone(),
            cash_rate: panel.cash_rate(t),
        })
    }
}
