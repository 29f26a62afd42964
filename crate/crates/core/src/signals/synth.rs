//! Seeded regime-switching market scenarios for testing and demos.
//!
//! Prices follow a two-state switching process with lognormal shocks whose
//! per-regime `drift` is the expected *simple* daily return (so a zero-vol
//! regime produces exactly `drift` every day). One hidden chain drives all
//! assets; signals are emitted in the contrarian convention: when the step
//! ahead belongs to the falling regime the generator emits `Bullish` (an
//! avoid/sell signal), when it belongs to the rising regime `Bearish`, and
//! `Other` for a zero-drift regime. With noise level `epsilon` a signal is
//! replaced by a uniformly random class.

use chrono::{Datelike, NaiveDate, Weekday};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::{align, AlignedPanel, CashRateSeries, PriceSeries};
use crate::signals::{RegimeClass, SignalPanel};

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("alignment of generated series failed: {0}")]
    Alignment(#[from] crate::market_data::DataError),
}

/// Drift and volatility of one regime, in daily units.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct RegimeParams {
    /// Expected simple daily return.
    pub drift: f64,
    /// Daily lognormal shock volatility.
    pub vol: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_assets: usize,
    pub n_days: usize,
    pub start_date: NaiveDate,
    pub regimes: [RegimeParams; 2],
    /// Row-stochastic transition matrix: `transition[i][j]` = P(next = j | now = i).
    pub transition: [[f64; 2]; 2],
    /// Probability that an emitted signal is replaced by a random class.
    pub epsilon: f64,
    pub initial_price: f64,
    /// Mean daily dollar volume per asset.
    pub volume_base: f64,
    /// Lognormal sigma of daily volume noise.
    pub volume_sigma: f64,
    /// Constant daily risk-free rate for the cash leg.
    pub daily_cash_rate: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_assets: 4,
            n_days: 1300,
            start_date: NaiveDate::from_ymd_opt(2015, 1, 5).expect("valid date"),
            // Regime 0: long, calm uptrend. Regime 1: short, violent drawdown.
            regimes: [
                RegimeParams {
                    drift: 0.0012,
                    vol: 0.007,
                },
                RegimeParams {
                    drift: -0.0045,
                    vol: 0.028,
                },
            ],
            transition: [[0.965, 0.035], [0.22, 0.78]],
            epsilon: 0.0,
            initial_price: 100.0,
            volume_base: 1.0e6,
            volume_sigma: 0.2,
            daily_cash_rate: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.n_assets == 0 {
            return Err(SynthError::Config("n_assets must be >= 1".to_string()));
        }
        if self.n_days < 2 {
            return Err(SynthError::Config("n_days must be >= 2".to_string()));
        }
        for (k, row) in self.transition.iter().enumerate() {
            if row.iter().any(|&p| p < 0.0) {
                return Err(SynthError::Config(format!(
                    "transition row {k} has a negative entry"
                )));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(SynthError::Config(format!(
                    "transition row {k} sums to {sum}, expected 1"
                )));
            }
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(SynthError::Config(format!(
                "epsilon {} outside [0, 1]",
                self.epsilon
            )));
        }
        for (k, r) in self.regimes.iter().enumerate() {
            if r.vol < 0.0 {
                return Err(SynthError::Config(format!("regime {k} has negative vol")));
            }
            if r.drift <= -1.0 {
                return Err(SynthError::Config(format!(
                    "regime {k} drift must exceed -1"
                )));
            }
        }
        if !(self.initial_price > 0.0) || !(self.volume_base > 0.0) {
            return Err(SynthError::Config(
                "initial_price and volume_base must be positive".to_string(),
            ));
        }
        Ok(())
    }
}

/// Generates a panel, an aligned signal grid, and the hidden regime path.
///
/// `true_regimes[t]` is the regime of the step *starting* at date `t`: it
/// governs the return realized at date `t + 1` and is what the date-`t`
/// signal predicts. The output is a pure function of `(config, seed)`.
pub fn generate_synthetic(
    config: &SynthConfig,
    seed: u64,
) -> Result<(AlignedPanel, SignalPanel, Vec<usize>), SynthError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = config.n_assets;
    let t_days = config.n_days;
    let dates = weekday_calendar(config.start_date, t_days);

    // Hidden chain; entry t is the regime of the step starting at date t.
    let mut regimes = Vec::with_capacity(t_days);
    regimes.push(0usize);
    for _ in 1..t_days {
        let prev = *regimes.last().expect("nonempty");
        let u: f64 = rng.gen();
        let next = if u < config.transition[prev][0] { 0 } else { 1 };
        regimes.push(next);
    }

    // Price paths: the step from date t to t+1 uses regimes[t].
    let mut prices = vec![vec![0.0f64; t_days]; n];
    for path in prices.iter_mut() {
        path[0] = config.initial_price;
    }
    for t in 0..t_days - 1 {
        let reg = config.regimes[regimes[t]];
        for path in prices.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            let shock = if reg.vol > 0.0 {
                (reg.vol * z - 0.5 * reg.vol * reg.vol).exp()
            } else {
                1.0
            };
            path[t + 1] = path[t] * (1.0 + reg.drift) * shock;
        }
    }

    let mut volumes = vec![vec![0.0f64; t_days]; n];
    for vol_path in volumes.iter_mut() {
        for v in vol_path.iter_mut() {
            let z: f64 = StandardNormal.sample(&mut rng);
            *v = config.volume_base * (config.volume_sigma * z).exp();
        }
    }

    // Signals: contrarian mapping of the step-ahead regime, with probability
    // epsilon replaced by a uniformly random class. Four draws per cell keep
    // the stream layout independent of outcomes.
    let mut signal_grid = Vec::with_capacity(t_days * n);
    for t in 0..t_days {
        let true_class = class_for_drift(config.regimes[regimes[t]].drift);
        for _asset in 0..n {
            let p_active: f64 = rng.gen_range(0.7..1.0);
            let p_secondary: f64 = rng.gen_range(0.0..0.3);
            let flip: f64 = rng.gen();
            let random_class = [RegimeClass::Bullish, RegimeClass::Bearish, RegimeClass::Other]
                [rng.gen_range(0..3usize)];
            let emitted = if flip < config.epsilon {
                random_class
            } else {
                true_class
            };
            let (p_bull, p_bear) = match emitted {
                RegimeClass::Bullish => (p_active, p_secondary),
                RegimeClass::Bearish => (p_secondary, p_active),
                RegimeClass::Other => (p_secondary, p_active - 0.7),
            };
            signal_grid.push((emitted, p_bull, p_bear));
        }
    }

    let series: Vec<PriceSeries> = (0..n)
        .map(|i| {
            PriceSeries::new(
                format!("asset{}", i + 1),
                dates
                    .iter()
                    .enumerate()
                    .map(|(t, &d)| (d, prices[i][t], volumes[i][t]))
                    .collect(),
            )
            .expect("generated series satisfy the invariants")
        })
        .collect();
    let cash = CashRateSeries {
        label: "cash".to_string(),
        dates: dates.clone(),
        daily_rate: vec![config.daily_cash_rate; t_days],
    };
    let panel = align(&series, &cash, 0)?;

    let mut signals = SignalPanel::empty(&panel);
    for t in 0..t_days {
        for asset in 0..n {
            let (class, p_bull, p_bear) = signal_grid[t * n + asset];
            signals.set(t, asset, class, p_bull, p_bear);
        }
    }

    Ok((panel, signals, regimes))
}

/// Contrarian emission: a falling step ahead is signalled `Bullish`.
pub fn class_for_drift(drift: f64) -> RegimeClass {
    if drift < 0.0 {
        RegimeClass::Bullish
    } else if drift > 0.0 {
        RegimeClass::Bearish
    } else {
        RegimeClass::Other
    }
}

fn weekday_calendar(start: NaiveDate, n: usize) -> Vec<NaiveDate> {
    let mut dates = Vec::with_capacity(n);
    let mut d = start;
    while dates.len() < n {
        if d.weekday() != Weekday::Sat && d.weekday() != Weekday::Sun {
            dates.push(d);
        }
        d = d.succ_opt().expect("calendar within chrono range");
    }
    dates
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_regime_config(drift: f64, vol: f64) -> SynthConfig {
        SynthConfig {
            n_assets: 2,
            n_days: 50,
            regimes: [
                RegimeParams { drift, vol },
                RegimeParams { drift, vol },
            ],
            transition: [[1.0, 0.0], [1.0, 0.0]],
            ..SynthConfig::default()
        }
    }

    #[test]
    fn zero_vol_single_regime_returns_equal_drift() {
        let cfg = single_regime_config(0.004, 0.0);
        let (panel, _, _) = generate_synthetic(&cfg, 7).unwrap();
        for t in 1..panel.n_dates() {
            for i in 0..panel.n_assets() {
                assert!(
                    (panel.ret(t, i) - 0.004).abs() < 1e-12,
                    "return {} at ({t},{i})",
                    panel.ret(t, i)
                );
            }
        }
    }

    #[test]
    fn same_seed_reproduces_bitwise() {
        let cfg = SynthConfig {
            epsilon: 0.4,
            n_days: 120,
            ..SynthConfig::default()
        };
        let (p1, s1, r1) = generate_synthetic(&cfg, 99).unwrap();
        let (p2, s2, r2) = generate_synthetic(&cfg, 99).unwrap();
        assert_eq!(r1, r2);
        assert_eq!(p1.prices(), p2.prices());
        for t in 0..p1.n_dates() {
            for i in 0..p1.n_assets() {
                assert_eq!(s1.class(t, i), s2.class(t, i));
                assert_eq!(s1.p_bull(t, i).to_bits(), s2.p_bull(t, i).to_bits());
            }
        }
    }

    #[test]
    fn different_seed_changes_prices() {
        let cfg = SynthConfig::default();
        let (p1, _, _) = generate_synthetic(&cfg, 1).unwrap();
        let (p2, _, _) = generate_synthetic(&cfg, 2).unwrap();
        assert_ne!(p1.prices(), p2.prices());
    }

    #[test]
    fn noiseless_signals_predict_step_ahead_regime() {
        let cfg = SynthConfig {
            epsilon: 0.0,
            n_days: 300,
            ..SynthConfig::default()
        };
        let (panel, signals, regimes) = generate_synthetic(&cfg, 3).unwrap();
        for t in 0..panel.n_dates() {
            let expected = class_for_drift(cfg.regimes[regimes[t]].drift);
            for i in 0..panel.n_assets() {
                assert_eq!(signals.class(t, i), expected, "cell ({t},{i})");
            }
        }
    }

    #[test]
    fn full_noise_agreement_rate_is_one_third() {
        // epsilon = 1: every emitted class is uniform over three classes, so
        // agreement with the oracle signal happens about 1/3 of the time.
        let cfg = SynthConfig {
            epsilon: 1.0,
            n_assets: 10,
            n_days: 1000,
            ..SynthConfig::default()
        };
        let (panel, signals, regimes) = generate_synthetic(&cfg, 11).unwrap();
        let mut agree = 0usize;
        let mut total = 0usize;
        for t in 0..panel.n_dates() {
            let oracle = class_for_drift(cfg.regimes[regimes[t]].drift);
            for i in 0..panel.n_assets() {
                total += 1;
                if signals.class(t, i) == oracle {
                    agree += 1;
                }
            }
        }
        assert_eq!(total, 10_000);
        let rate = agree as f64 / total as f64;
        assert!(
            (rate - 1.0 / 3.0).abs() <= 0.02,
            "agreement rate {rate} not within 1/3 +/- 0.02"
        );
    }

    #[test]
    fn invalid_transition_matrix_is_rejected() {
        let cfg = SynthConfig {
            transition: [[0.9, 0.2], [0.1, 0.9]],
            ..SynthConfig::default()
        };
        assert!(matches!(
            generate_synthetic(&cfg, 0),
            Err(SynthError::Config(_))
        ));
    }

    #[test]
    fn active_probabilities_live_in_the_documented_band() {
        let cfg = SynthConfig {
            epsilon: 0.0,
            n_days: 200,
            ..SynthConfig::default()
        };
        let (panel, signals, _) = generate_synthetic(&cfg, 21).unwrap();
        for t in 0..panel.n_dates() {
            for i in 0..panel.n_assets() {
                let p = match signals.class(t, i) {
                    RegimeClass::Bullish => signals.p_bull(t, i),
                    RegimeClass::Bearish => signals.p_bear(t, i),
                    RegimeClass::Other => continue,
                };
                assert!((0.7..1.0).contains(&p), "active probability {p}");
            }
        }
    }
}
