//! Roll-forward daily simulation.
//!
//! Decisions use information through day `t`'s close, trades execute at
//! `t`'s close, and day `t + 1` returns accrue to the post-trade weights:
//!
//! ```text
//! value[t+1] = value[t] · (1 + Σ_i w_i·r_{i,t+1} + w_cash·rf_{t+1}) - cost[t]
//! ```
//!
//! Holdings are tracked in currency with the cash leg absorbing rounding,
//! and realized trading costs are deducted proportionally across the
//! post-accrual portfolio so holdings stay nonnegative. Decisions happen on
//! every date from `start` through the day before `end`; values are
//! recorded from `start` through `end`.

use chrono::{Datelike, NaiveDate};
use nalgebra::DVector;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

use crate::cost::{total_transaction_cost, CostError, CostParams, DEFAULT_SPREAD};
use crate::estimators::{EstimateError, EstimatorConfig, EstimatorEngine};
use crate::market_data::AlignedPanel;
use crate::mpc::{solve, MpcConfig, MpcError, SolverStatus};
use crate::signals::SignalPanel;

#[derive(Debug, Error)]
pub enum BacktestError {
    #[error("warm-up violation: start index {start_index} needs at least {needed} prior days")]
    WarmUp { start_index: usize, needed: usize },
    #[error("bad backtest range: {0}")]
    BadRange(String),
    #[error(transparent)]
    Estimate(#[from] EstimateError),
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Mpc(#[from] MpcError),
    #[error("allocation infeasible on {date}: {detail}")]
    Infeasible { date: NaiveDate, detail: String },
    #[error("portfolio bankrupt on {date} (value {value})")]
    Bankrupt { date: NaiveDate, value: f64 },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Everything a strategy run needs beyond the data.
#[derive(Debug, Clone, Serialize)]
pub struct BacktestParams {
    pub mpc: MpcConfig,
    pub estimator: EstimatorConfig,
    /// Bid-ask spread for the cost model.
    pub spread: f64,
    pub initial_value: f64,
}

impl Default for BacktestParams {
    fn default() -> Self {
        BacktestParams {
            mpc: MpcConfig::default(),
            estimator: EstimatorConfig::default(),
            spread: DEFAULT_SPREAD,
            initial_value: 26_000.0,
        }
    }
}

impl BacktestParams {
    /// Trading days of history the MPC run needs before its first decision.
    pub fn warmup_days(&self) -> usize {
        self.estimator.cov_window + self.mpc.horizon + self.estimator.ema_window
    }
}

/// Daily records of one portfolio run over `[start, end]`.
///
/// All per-date vectors have one entry per recorded date. Entry 0 holds the
/// initial state: zero return, zero cost. `weights[j]` are the weights in
/// force from date `j`'s close (for the final date: the drifted weights, as
/// no decision is taken there).
#[derive(Debug, Clone)]
pub struct BacktestResult {
    pub label: String,
    pub assets: Vec<String>,
    pub cash_label: String,
    pub dates: Vec<NaiveDate>,
    pub values: Vec<f64>,
    /// Cost-adjusted simple returns; entry j is the return into date j.
    pub returns: Vec<f64>,
    /// `returns[j] - cash_rate[j]`.
    pub excess_returns: Vec<f64>,
    /// Daily risk-free rate at each date.
    pub cash_rates: Vec<f64>,
    /// Weights in force from each date's close (risky then cash).
    pub weights: Vec<DVector<f64>>,
    /// Realized trading cost charged at each date's decision (currency).
    pub costs: Vec<f64>,
    /// Sum of absolute executed weight changes at each date.
    pub turnover: Vec<f64>,
    /// Days on which the solver stopped on its iteration cap.
    pub non_optimal_solves: usize,
}

impl BacktestResult {
    pub fn n_days(&self) -> usize {
        self.dates.len()
    }

    pub fn initial_value(&self) -> f64 {
        self.values[0]
    }

    pub fn final_value(&self) -> f64 {
        *self.values.last().expect("nonempty run")
    }

    pub fn total_cost(&self) -> f64 {
        self.costs.iter().sum()
    }

    pub fn total_turnover(&self) -> f64 {
        self.turnover.iter().sum()
    }

    /// Weight vectors actually executed (one per decision day; excludes the
    /// final date's drifted placeholder).
    pub fn executed_weights(&self) -> &[DVector<f64>] {
        &self.weights[..self.weights.len() - 1]
    }

    /// Per-month average of the executed weight vectors.
    pub fn monthly_average_weights(&self) -> Vec<(String, DVector<f64>)> {
        let mut groups: BTreeMap<(i32, u32), (DVector<f64>, usize)> = BTreeMap::new();
        for (date, w) in self
            .dates
            .iter()
            .zip(self.weights.iter())
            .take(self.weights.len() - 1)
        {
            let key = (date.year(), date.month());
            let entry = groups
                .entry(key)
                .or_insert_with(|| (DVector::zeros(w.len()), 0));
            entry.0 += w;
            entry.1 += 1;
        }
        groups
            .into_iter()
            .map(|((y, m), (sum, count))| (format!("{y}-{m:02}"), sum / count as f64))
            .collect()
    }

    /// One row per date: date, value, cost-adjusted return, excess return,
    /// cost, turnover, then the weight columns.
    pub fn write_daily_csv(&self, path: impl AsRef<Path>) -> Result<(), BacktestError> {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "date,value,return,excess_return,cost,turnover")?;
        for a in &self.assets {
            write!(out, ",w_{a}")?;
        }
        writeln!(out, ",w_{}", self.cash_label)?;
        for j in 0..self.n_days() {
            write!(
                out,
                "{},{},{},{},{},{}",
                self.dates[j],
                self.values[j],
                self.returns[j],
                self.excess_returns[j],
                self.costs[j],
                self.turnover[j]
            )?;
            for v in self.weights[j].iter() {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Plot-ready `month,<asset columns>` CSV of monthly average weights.
    pub fn write_monthly_weights_csv(&self, path: impl AsRef<Path>) -> Result<(), BacktestError> {
        use std::io::Write;
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        write!(out, "month")?;
        for a in &self.assets {
            write!(out, ",{a}")?;
        }
        writeln!(out, ",{}", self.cash_label)?;
        for (month, w) in self.monthly_average_weights() {
            write!(out, "{month}")?;
            for v in w.iter() {
                write!(out, ",{v}")?;
            }
            writeln!(out)?;
        }
        out.flush()?;
        Ok(())
    }

    /// Compact JSON summary of the run.
    pub fn summary_json(&self) -> serde_json::Value {
        serde_json::json!({
            "label": self.label,
            "start": self.dates.first().map(|d| d.to_string()),
            "end": self.dates.last().map(|d| d.to_string()),
            "days": self.n_days(),
            "initial_value": self.initial_value(),
            "final_value": self.final_value(),
            "total_cost": self.total_cost(),
            "total_turnover": self.total_turnover(),
            "non_optimal_solves": self.non_optimal_solves,
        })
    }
}

/// Resolves `[start, end]` to date indices, snapping inward.
fn resolve_range(
    panel: &AlignedPanel,
    start: NaiveDate,
    end: NaiveDate,
) -> Result<(usize, usize), BacktestError> {
    let s = panel
        .date_index_at_or_after(start)
        .ok_or_else(|| BacktestError::BadRange(format!("no panel dates at or after {start}")))?;
    let e = panel
        .date_index_at_or_before(end)
        .ok_or_else(|| BacktestError::BadRange(format!("no panel dates at or before {end}")))?;
    if s >= e {
        return Err(BacktestError::BadRange(format!(
            "start {start} resolves at or after end {end}"
        )));
    }
    Ok((s, e))
}

/// Ledger threading holdings through a run and recording the daily rows.
struct Accountant {
    n: usize,
    /// Risky holdings then cash, currency units.
    holdings: DVector<f64>,
    result: BacktestResult,
}

impl Accountant {
    fn new(
        label: &str,
        panel: &AlignedPanel,
        start_idx: usize,
        initial_value: f64,
        initial_weights: &DVector<f64>,
    ) -> Self {
        let n = panel.n_assets();
        let mut holdings = DVector::zeros(n + 1);
        let mut risky_total = 0.0;
        for i in 0..n {
            holdings[i] = initial_weights[i] * initial_value;
            risky_total += holdings[i];
        }
        holdings[n] = initial_value - risky_total;
        let result = BacktestResult {
            label: label.to_string(),
            assets: panel.assets().to_vec(),
            cash_label: panel.cash_label().to_string(),
            dates: vec![panel.date(start_idx)],
            values: vec![initial_value],
            returns: vec![0.0],
            excess_returns: vec![0.0],
            cash_rates: vec![panel.cash_rate(start_idx)],
            weights: vec![initial_weights.clone()],
            costs: vec![0.0],
            turnover: vec![0.0],
            non_optimal_solves: 0,
        };
        Accountant { n, result, holdings }
    }

    fn value(&self) -> f64 {
        self.holdings.iter().sum()
    }

    fn current_weights(&self) -> DVector<f64> {
        let v = self.value();
        DVector::from_fn(self.n + 1, |i, _| self.holdings[i] / v)
    }

    /// Rebalances to `target` at the current close (cash absorbs rounding),
    /// then accrues date `t + 1` returns and deducts the given trading cost
    /// proportionally. Records the new day's row.
    fn rebalance_and_accrue(
        &mut self,
        panel: &AlignedPanel,
        t: usize,
        target: &DVector<f64>,
        cost_currency: f64,
        turnover: f64,
    ) -> Result<(), BacktestError> {
        let value = self.value();
        let mut risky_total = 0.0;
        for i in 0..self.n {
            self.holdings[i] = target[i] * value;
            risky_total += self.holdings[i];
        }
        self.holdings[self.n] = value - risky_total;

        let executed = DVector::from_fn(self.n + 1, |i, _| self.holdings[i] / value);
        *self.result.weights.last_mut().expect("row exists") = executed;
        *self.result.costs.last_mut().expect("row exists") = cost_currency;
        *self.result.turnover.last_mut().expect("row exists") = turnover;

        // Accrue date t+1 returns on the post-trade portfolio.
        let rf = panel.cash_rate(t + 1);
        let mut gross = 0.0;
        for i in 0..self.n {
            self.holdings[i] *= 1.0 + panel.ret(t + 1, i);
            gross += self.holdings[i];
        }
        self.holdings[self.n] *= 1.0 + rf;
        gross += self.holdings[self.n];

        let net = gross - cost_currency;
        if !(net > 0.0) {
            return Err(BacktestError::Bankrupt {
                date: panel.date(t + 1),
                value: net,
            });
        }
        if cost_currency != 0.0 {
            let scale = net / gross;
            for i in 0..=self.n {
                self.holdings[i] *= scale;
            }
        }

        let new_value = self.value();
        let ret = new_value / value - 1.0;
        self.result.dates.push(panel.date(t + 1));
        self.result.values.push(new_value);
        self.result.returns.push(ret);
        self.result.excess_returns.push(ret - rf);
        self.result.cash_rates.push(rf);
        self.result.weights.push(self.current_weights());
        self.result.costs.push(0.0);
        self.result.turnover.push(0.0);
        Ok(())
    }
}

fn equal_weight_vector(n: usize) -> DVector<f64> {
    let mut w = DVector::zeros(n + 1);
    for i in 0..n {
        w[i] = 1.0 / n as f64;
    }
    w
}

/// Runs the MPC strategy over `[start, end]`.
///
/// The portfolio starts equal-weighted across risky assets with zero cash
/// (the initial endowment, charged no cost); each day's plan is solved from
/// information through that day's close and only its first step executes.
pub fn run_mpc_backtest(
    panel: &AlignedPanel,
    signals: &SignalPanel,
    params: &BacktestParams,
    start: NaiveDate,
    end: NaiveDate,
) -> Result<BacktestResult, BacktestError> {
    let (start_idx, end_idx) = resolve_range(panel, start, end)?;
    let needed = params.warmup_days();
    if start_idx < needed {
        return Err(BacktestError::WarmUp {
            start_index: start_idx,
            needed,
        });
    }

    let n = panel.n_assets();
    let mut engine = EstimatorEngine::new(params.estimator.clone(), params.mpc.horizon, n);
    for t in 1..start_idx {
        engine.step(panel, signals, t)?;
    }

    let mut acct = Accountant::new(
        "mpc",
        panel,
        start_idx,
        params.initial_value,
        &equal_weight_vector(n),
    );

    for t in start_idx..end_idx {
        engine.step(panel, signals, t)?;
        let estimates = engine.estimate_set(panel, t)?;
        let value = acct.value();
        let costs = CostParams::from_estimates(&estimates, params.spread, value)?;
        let w_current = acct.current_weights();
        let plan = solve(&estimates, &w_current, &costs, &params.mpc)?;
        match plan.status {
            SolverStatus::Infeasible => {
                return Err(BacktestError::Infeasible {
                    date: panel.date(t),
                    detail: format!(
                        "min_weight {} over {n} risky assets",
                        params.mpc.min_weight
                    ),
                });
            }
            SolverStatus::MaxIterations => acct.result.non_optimal_solves += 1,
            SolverStatus::Optimal => {}
        }
        let target = plan.first_step();
        let delta: Vec<f64> = (0..n).map(|i| target[i] - w_current[i]).collect();
        let turnover: f64 = (0..=n)
            .map(|i| (target[i] - w_current[i]).abs())
            .sum();
        let cost_frac = total_transaction_cost(&delta, &costs)?;
        acct.rebalance_and_accrue(panel, t, target, cost_frac * value, turnover)?;
    }
    Ok(acct.result)
}

/// Buy-and-hold benchmark: equal initial allocation across risky assets,
/// never rebalanced, zero ongoing costs.
pub fn run_buy_and_hold(
    panel: &AlignedPanel,
    start: NaiveDate,
    end: NaiveDate,
    initial_value: f64,
) -> Result<BacktestResult, BacktestError> {
    let (start_idx, end_idx) = resolve_range(panel, start, end)?;
    if start_idx < 1 {
        return Err(BacktestError::WarmUp {
            start_index: start_idx,
            needed: 1,
        });
    }
    let n = panel.n_assets();
    let mut acct = Accountant::new(
        "buy_and_hold",
        panel,
        start_idx,
        initial_value,
        &equal_weight_vector(n),
    );
    for t in start_idx..end_idx {
        let hold = acct.current_weights();
        acct.rebalance_and_accrue(panel, t, &hold, 0.0, 0.0)?;
    }
    Ok(acct.result)
}

/// 1/N benchmark: rebalances to equal risky weights every
/// `rebalance_every` trading days (1 = daily), paying the same transaction
/// costs as the strategy run.
pub fn run_equal_weight(
    panel: &AlignedPanel,
    params: &BacktestParams,
    start: NaiveDate,
    end: NaiveDate,
    rebalance_every: usize,
) -> Result<BacktestResult, BacktestError> {
    if rebalance_every == 0 {
        return Err(BacktestError::BadRange(
            "rebalance frequency must be >= 1".to_string(),
        ));
    }
    let (start_idx, end_idx) = resolve_range(panel, start, end)?;
    if start_idx < 1 {
        return Err(BacktestError::WarmUp {
            start_index: start_idx,
            needed: 1,
        });
    }
    let n = panel.n_assets();
    // The engine only supplies the lagged σ / volume snapshots for the cost
    // model; signals play no role in this benchmark.
    let empty_signals = SignalPanel::empty(panel);
    let mut engine = EstimatorEngine::new(params.estimator.clone(), 1, n);
    for t in 1..start_idx {
        engine.step(panel, &empty_signals, t)?;
    }

    let target = equal_weight_vector(n);
    let mut acct = Accountant::new("equal_weight", panel, start_idx, params.initial_value, &target);
    for (k, t) in (start_idx..end_idx).enumerate() {
        engine.step(panel, &empty_signals, t)?;
        let w_current = acct.current_weights();
        let (goal, cost_currency, turnover) = if k % rebalance_every == 0 {
            let value = acct.value();
            let estimates_sigma = engine_snapshots(&engine);
            let costs = CostParams::new(
                params.spread,
                estimates_sigma.0,
                estimates_sigma.1,
                value,
            )?;
            let delta: Vec<f64> = (0..n).map(|i| target[i] - w_current[i]).collect();
            let turnover: f64 = (0..=n).map(|i| (target[i] - w_current[i]).abs()).sum();
            let cost_frac = total_transaction_cost(&delta, &costs)?;
            (target.clone(), cost_frac * value, turnover)
        } else {
            (w_current, 0.0, 0.0)
        };
        acct.rebalance_and_accrue(panel, t, &goal, cost_currency, turnover)?;
    }
    Ok(acct.result)
}

fn engine_snapshots(engine: &EstimatorEngine) -> (DVector<f64>, DVector<f64>) {
    (engine.snapshot_sigma(), engine.snapshot_volume())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::market_data::{align, CashRateSeries, PriceSeries};
    use crate::signals::{generate_synthetic, RegimeParams, SignalPanel, SynthConfig};

    fn d(s: &str) -> NaiveDate {
        s.parse().unwrap()
    }

    /// Panel with explicitly given per-asset return paths, zero cash rate.
    fn panel_from_returns(returns: &[Vec<f64>], volume: f64) -> AlignedPanel {
        let t = returns[0].len() + 1;
        let start = NaiveDate::from_ymd_opt(2019, 1, 1).unwrap();
        let dates: Vec<NaiveDate> = (0..t as u64).map(|k| start + chrono::Days::new(k)).collect();
        let series: Vec<PriceSeries> = returns
            .iter()
            .enumerate()
            .map(|(i, rs)| {
                let mut price = 100.0;
                let mut rows = vec![(dates[0], price, volume)];
                for (k, r) in rs.iter().enumerate() {
                    price *= 1.0 + r;
                    rows.push((dates[k + 1], price, volume));
                }
                PriceSeries::new(format!("a{i}"), rows).unwrap()
            })
            .collect();
        let cash = CashRateSeries {
            label: "cash".to_string(),
            dates: dates.clone(),
            daily_rate: vec![0.0; t],
        };
        align(&series, &cash, 0).unwrap()
    }

    fn small_params(cov_window: usize) -> BacktestParams {
        BacktestParams {
            estimator: EstimatorConfig {
                cov_window,
                ..EstimatorConfig::default()
            },
            ..BacktestParams::default()
        }
    }

    #[test]
    fn no_motion_economy_preserves_the_initial_value() {
        // One risky asset, zero drift, zero vol, zero cash rate, b = 0:
        // nothing can create or destroy value.
        let panel = panel_from_returns(&[vec![0.0; 120]], 1e6);
        let signals = SignalPanel::empty(&panel); // all Other
        let mut params = small_params(40);
        params.spread = 0.0;
        let result = run_mpc_backtest(
            &panel,
            &signals,
            &params,
            panel.date(60),
            panel.date(110),
        )
        .unwrap();
        let final_value = result.final_value();
        assert!(
            (final_value - 26_000.0).abs() < 1e-9,
            "value drifted to {final_value}"
        );
    }

    #[test]
    fn huge_trade_penalty_means_no_turnover_after_day_one() {
        let (panel, signals, _) = generate_synthetic(
            &SynthConfig {
                n_days: 700,
                ..SynthConfig::default()
            },
            5,
        )
        .unwrap();
        let mut params = small_params(504);
        params.mpc.gamma_trade = 1e9;
        let result = run_mpc_backtest(
            &panel,
            &signals,
            &params,
            panel.date(520),
            panel.date(660),
        )
        .unwrap();
        // The first decision may rebalance away from the endowment; nothing
        // else should move.
        let tail_turnover: f64 = result.turnover[1..].iter().sum();
        assert!(
            tail_turnover < 1e-3,
            "turnover after day 1 was {tail_turnover}"
        );
    }

    #[test]
    fn frozen_mpc_tracks_buy_and_hold() {
        // All-Other signals and a huge trade penalty: the MPC portfolio
        // never trades after the start, so it must ride the same path as
        // buy-and-hold up to the (near-zero) trading costs.
        let (panel, _, _) = generate_synthetic(
            &SynthConfig {
                n_days: 700,
                epsilon: 0.0,
                ..SynthConfig::default()
            },
            9,
        )
        .unwrap();
        let signals = SignalPanel::empty(&panel);
        let mut params = small_params(504);
        params.mpc.gamma_trade = 1e9;
        let start = panel.date(520);
        let end = panel.date(690);
        let mpc = run_mpc_backtest(&panel, &signals, &params, start, end).unwrap();
        let bh = run_buy_and_hold(&panel, start, end, params.initial_value).unwrap();
        assert_eq!(mpc.dates, bh.dates);
        for (vm, vb) in mpc.values.iter().zip(&bh.values) {
            let rel = (vm - vb).abs() / vb;
            assert!(rel < 1e-4, "paths diverged: {vm} vs {vb}");
        }
    }

    #[test]
    fn accounting_identity_reconstructs_the_value_path() {
        let (panel, signals, _) = generate_synthetic(
            &SynthConfig {
                n_days: 700,
                epsilon: 0.2,
                daily_cash_rate: 5e-5,
                ..SynthConfig::default()
            },
            11,
        )
        .unwrap();
        let params = small_params(504);
        let result = run_mpc_backtest(
            &panel,
            &signals,
            &params,
            panel.date(520),
            panel.date(690),
        )
        .unwrap();
        let n = panel.n_assets();
        let start_idx = panel.date_index(result.dates[0]).unwrap();
        for j in 0..result.n_days() - 1 {
            let t = start_idx + j;
            let w = &result.weights[j];
            let mut growth = 1.0 + w[n] * panel.cash_rate(t + 1);
            for i in 0..n {
                growth += w[i] * panel.ret(t + 1, i);
            }
            let rebuilt = result.values[j] * growth - result.costs[j];
            let rel = (rebuilt - result.values[j + 1]).abs() / result.values[j + 1];
            assert!(rel < 1e-9, "day {j}: rebuilt {rebuilt} vs {}", result.values[j + 1]);
        }
    }

    #[test]
    fn executed_weights_respect_floor_and_budget() {
        let (panel, signals, _) = generate_synthetic(
            &SynthConfig {
                n_days: 700,
                epsilon: 0.3,
                ..SynthConfig::default()
            },
            13,
        )
        .unwrap();
        let params = small_params(504);
        let result = run_mpc_backtest(
            &panel,
            &signals,
            &params,
            panel.date(520),
            panel.date(680),
        )
        .unwrap();
        let n = panel.n_assets();
        for w in result.executed_weights() {
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-8);
            for i in 0..n {
                assert!(w[i] >= params.mpc.min_weight - 1e-9);
            }
        }
    }

    #[test]
    fn no_lookahead_in_decisions() {
        let cfg = SynthConfig {
            n_days: 700,
            epsilon: 0.2,
            ..SynthConfig::default()
        };
        let (panel, signals, _) = generate_synthetic(&cfg, 17).unwrap();
        let params = small_params(504);
        let start = panel.date(520);
        let full = run_mpc_backtest(&panel, &signals, &params, start, panel.date(690)).unwrap();

        // Poison everything after the cut date and rerun up to it.
        let cut = 600;
        let poisoned = {
            let (mut series, cash) = panel.to_series();
            for s in series.iter_mut() {
                for t in (cut + 1)..s.close.len() {
                    s.close[t] = if t % 2 == 0 { 1e7 } else { 0.5 };
                    s.volume[t] = 1.0;
                }
            }
            align(&series, &cash, 0).unwrap()
        };
        let short = run_mpc_backtest(&poisoned, &signals, &params, start, panel.date(cut)).unwrap();

        for j in 0..short.weights.len() - 1 {
            for i in 0..short.weights[j].len() {
                assert_eq!(
                    full.weights[j][i].to_bits(),
                    short.weights[j][i].to_bits(),
                    "decision {j} weight {i} changed under future poisoning"
                );
            }
        }
    }

    #[test]
    fn buy_and_hold_doubling_asset_arithmetic() {
        // Asset 0 doubles by the end, asset 1 stays flat.
        let days = 50usize;
        let per_day = 2f64.powf(1.0 / days as f64) - 1.0;
        let panel = panel_from_returns(&[vec![per_day; days], vec![0.0; days]], 1e6);
        let result =
            run_buy_and_hold(&panel, panel.date(1), panel.date(days), 1000.0).unwrap();
        // 0.5 * 2 + 0.5 * 1 = 1.5x.
        let final_rel = result.final_value() / 1000.0;
        assert!((final_rel - 1.5).abs() < 1e-9, "final multiple {final_rel}");
        let w = result.weights.last().unwrap();
        assert!((w[0] - 2.0 / 3.0).abs() < 1e-9);
        assert!((w[1] - 1.0 / 3.0).abs() < 1e-9);
        assert_eq!(result.total_cost(), 0.0);
    }

    #[test]
    fn buy_and_hold_flat_prices_constant_value() {
        let panel = panel_from_returns(&[vec![0.0; 30], vec![0.0; 30]], 1e6);
        let result = run_buy_and_hold(&panel, panel.date(1), panel.date(30), 500.0).unwrap();
        for v in &result.values {
            assert_eq!(*v, 500.0);
        }
    }

    #[test]
    fn equal_weight_flat_prices_never_trades_after_day_one() {
        let panel = panel_from_returns(&[vec![0.0; 40], vec![0.0; 40]], 1e6);
        let mut params = small_params(20);
        params.spread = 0.01; // costs would bite if any trade happened
        let result =
            run_equal_weight(&panel, &params, panel.date(25), panel.date(39), 1).unwrap();
        for v in &result.values {
            assert_eq!(*v, params.initial_value);
        }
        assert_eq!(result.total_cost(), 0.0);
    }

    #[test]
    fn equal_weight_matches_hand_compounded_path() {
        // Two assets, one drifts up 2% a day for 10 days, zero spread:
        // daily-rebalanced value compounds by (1 + (r0 + r1) / 2).
        let days = 10;
        let r0 = 0.02f64;
        let panel = panel_from_returns(&[vec![r0; days + 14], vec![0.0; days + 14]], 1e6);
        let mut params = small_params(5);
        params.spread = 0.0;
        params.initial_value = 1000.0;
        let start = panel.date(14);
        let end = panel.date(14 + days);
        let result = run_equal_weight(&panel, &params, start, end, 1).unwrap();
        let mut expected = 1000.0;
        for _ in 0..days {
            expected *= 1.0 + 0.5 * r0;
        }
        let rel = (result.final_value() - expected).abs() / expected;
        assert!(rel < 1e-9, "got {} want {expected}", result.final_value());
    }

    #[test]
    fn warmup_violation_is_rejected_before_trading() {
        let (panel, signals, _) = generate_synthetic(
            &SynthConfig {
                n_days: 700,
                ..SynthConfig::default()
            },
            19,
        )
        .unwrap();
        let params = small_params(504);
        let err = run_mpc_backtest(&panel, &signals, &params, panel.date(100), panel.date(400))
            .unwrap_err();
        assert!(matches!(err, BacktestError::WarmUp { .. }));
    }

    #[test]
    fn infeasible_floor_aborts_with_diagnostic() {
        let (panel, signals, _) = generate_synthetic(
            &SynthConfig {
                n_days: 700,
                ..SynthConfig::default()
            },
            23,
        )
        .unwrap();
        let mut params = small_params(504);
        params.mpc.min_weight = 0.5; // 4 assets * 0.5 > 1
        let err = run_mpc_backtest(&panel, &signals, &params, panel.date(520), panel.date(600))
            .unwrap_err();
        assert!(matches!(err, BacktestError::Infeasible { .. }));
    }

    #[test]
    fn monthly_weights_are_averages_of_executed_rows() {
        let days = 40;
        let panel = panel_from_returns(&[vec![0.001; days], vec![0.0; days]], 1e6);
        let mut params = small_params(10);
        params.spread = 0.0;
        let result = run_equal_weight(&panel, &params, panel.date(20), panel.date(35), 1).unwrap();
        let monthly = result.monthly_average_weights();
        assert!(!monthly.is_empty());
        for (_, w) in &monthly {
            let sum: f64 = w.iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn csv_outputs_are_written_and_deterministic() {
        let (panel, signals, _) = generate_synthetic(
            &SynthConfig {
                n_days: 700,
                epsilon: 0.1,
                ..SynthConfig::default()
            },
            29,
        )
        .unwrap();
        let params = small_params(504);
        let result =
            run_mpc_backtest(&panel, &signals, &params, panel.date(520), panel.date(560)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p1 = dir.path().join("daily1.csv");
        let p2 = dir.path().join("daily2.csv");
        result.write_daily_csv(&p1).unwrap();
        result.write_daily_csv(&p2).unwrap();
        let b1 = std::fs::read(&p1).unwrap();
        let b2 = std::fs::read(&p2).unwrap();
        assert!(!b1.is_empty());
        assert_eq!(b1, b2);
        let pm = dir.path().join("monthly.csv");
        result.write_monthly_weights_csv(&pm).unwrap();
        assert!(pm.exists());
    }
}
