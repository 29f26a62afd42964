//! Regime-prediction signal ingestion.
//!
//! Signals are produced upstream by a regime-prediction model and consumed
//! here as a per-asset, per-date grid aligned to a panel calendar. The
//! classes follow the contrarian convention: a Bullish prediction is a
//! sell/avoid signal, a Bearish prediction a buy signal.

mod synth;

pub use synth::{generate_synthetic, RegimeParams, SynthConfig, SynthError};

use std::collections::HashMap;
use std::path::Path;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::market_data::AlignedPanel;

#[derive(Debug, Error)]
pub enum SignalError {
    #[error("i/o error reading {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parse error in {path} line {line}: {msg}")]
    Parse {
        path: String,
        line: u64,
        msg: String,
    },
    #[error("validation error in {path} line {line}: {msg}")]
    Validation {
        path: String,
        line: u64,
        msg: String,
    },
    #[error("signal for unknown asset `{0}`")]
    UnknownAsset(String),
    #[error("probability out of range: {name} = {value}")]
    ProbabilityRange { name: String, value: f64 },
}

/// Predicted regime class, contrarian convention.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RegimeClass {
    Bullish,
    Bearish,
    Other,
}

impl RegimeClass {
    pub fn parse(s: &str) -> Option<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "BULLISH" => Some(RegimeClass::Bullish),
            "BEARISH" => Some(RegimeClass::Bearish),
            "OTHER" => Some(RegimeClass::Other),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RegimeClass::Bullish => "BULLISH",
            RegimeClass::Bearish => "BEARISH",
            RegimeClass::Other => "OTHER",
        }
    }
}

/// One upstream prediction: the emitted class plus both class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimeSignal {
    pub asset_label: String,
    pub date: NaiveDate,
    pub predicted: RegimeClass,
    pub p_bull: f64,
    pub p_bear: f64,
}

impl RegimeSignal {
    fn validate(&self) -> Result<(), SignalError> {
        if !(0.0..=1.0).contains(&self.p_bull) {
            return Err(SignalError::ProbabilityRange {
                name: "p_bull".to_string(),
                value: self.p_bull,
            });
        }
        if !(0.0..=1.0).contains(&self.p_bear) {
            return Err(SignalError::ProbabilityRange {
                name: "p_bear".to_string(),
                value: self.p_bear,
            });
        }
        Ok(())
    }
}

/// Per-asset, per-date signal grid aligned to a panel calendar.
///
/// Cells with no upstream prediction hold `Other` with zero probabilities,
/// which the return-estimation stage treats as the identity transform.
#[derive(Debug, Clone)]
pub struct SignalPanel {
    n_assets: usize,
    dates: Vec<NaiveDate>,
    // Row-major (date, asset).
    classes: Vec<RegimeClass>,
    p_bull: Vec<f64>,
    p_bear: Vec<f64>,
}

impl SignalPanel {
    /// Builds an all-`Other` grid for the panel's calendar.
    pub fn empty(panel: &AlignedPanel) -> Self {
        let cells = panel.n_dates() * panel.n_assets();
        SignalPanel {
            n_assets: panel.n_assets(),
            dates: panel.dates().to_vec(),
            classes: vec![RegimeClass::Other; cells],
            p_bull: vec![0.0; cells],
            p_bear: vec![0.0; cells],
        }
    }

    /// Builds a grid from explicit signals; entries for dates outside the
    /// calendar are ignored, unknown assets are rejected.
    pub fn from_signals(
        panel: &AlignedPanel,
        signals: impl IntoIterator<Item = RegimeSignal>,
    ) -> Result<Self, SignalError> {
        let mut grid = Self::empty(panel);
        let asset_index: HashMap<&str, usize> = panel
            .assets()
            .iter()
            .enumerate()
            .map(|(i, a)| (a.as_str(), i))
            .collect();
        for sig in signals {
            sig.validate()?;
            let asset = *asset_index
                .get(sig.asset_label.as_str())
                .ok_or_else(|| SignalError::UnknownAsset(sig.asset_label.clone()))?;
            if let Some(t) = panel.date_index(sig.date) {
                grid.set(t, asset, sig.predicted, sig.p_bull, sig.p_bear);
            }
        }
        Ok(grid)
    }

    pub(crate) fn set(
        &mut self,
        t: usize,
        asset: usize,
        class: RegimeClass,
        p_bull: f64,
        p_bear: f64,
    ) {
        let idx = t * self.n_assets + asset;
        self.classes[idx] = class;
        self.p_bull[idx] = p_bull;
        self.p_bear[idx] = p_bear;
    }

    pub fn class(&self, t: usize, asset: usize) -> RegimeClass {
        self.classes[t * self.n_assets + asset]
    }

    pub fn p_bull(&self, t: usize, asset: usize) -> f64 {
        self.p_bull[t * self.n_assets + asset]
    }

    pub fn p_bear(&self, t: usize, asset: usize) -> f64 {
        self.p_bear[t * self.n_assets + asset]
    }

    pub fn n_assets(&self) -> usize {
        self.n_assets
    }

    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    /// Copy with the given asset columns removed; order of `keep` is preserved.
    pub fn select_assets(&self, keep: &[usize]) -> SignalPanel {
        let mut out = SignalPanel {
            n_assets: keep.len(),
            dates: self.dates.clone(),
            classes: Vec::with_capacity(self.dates.len() * keep.len()),
            p_bull: Vec::with_capacity(self.dates.len() * keep.len()),
            p_bear: Vec::with_capacity(self.dates.len() * keep.len()),
        };
        for t in 0..self.dates.len() {
            for &i in keep {
                out.classes.push(self.class(t, i));
                out.p_bull.push(self.p_bull(t, i));
                out.p_bear.push(self.p_bear(t, i));
            }
        }
        out
    }
}

/// Loads a `date,asset,predicted,p_bull,p_bear` CSV aligned to the panel.
///
/// Missing (date, asset) cells are filled with `Other` / zero probabilities.
pub fn load_signals(
    path: impl AsRef<Path>,
    panel: &AlignedPanel,
) -> Result<SignalPanel, SignalError> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => SignalError::Io {
                path: path_str.clone(),
                source: io,
            },
            _ => SignalError::Parse {
                path: path_str.clone(),
                line: 0,
                msg: "unreadable csv".to_string(),
            },
        })?;

    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| SignalError::Parse {
            path: path_str.clone(),
            line: 1,
            msg: e.to_string(),
        })?
        .iter()
        .map(|h| h.trim().to_lowercase())
        .collect();
    let expected = ["date", "asset", "predicted", "p_bull", "p_bear"];
    if headers != expected {
        return Err(SignalError::Parse {
            path: path_str,
            line: 1,
            msg: format!("expected header {expected:?}, got {headers:?}"),
        });
    }

    let mut signals = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| SignalError::Parse {
            path: path_str.clone(),
            line: e.position().map(|p| p.line()).unwrap_or(0),
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |idx: usize, name: &str| -> Result<&str, SignalError> {
            record.get(idx).ok_or_else(|| SignalError::Parse {
                path: path_str.clone(),
                line,
                msg: format!("missing field `{name}`"),
            })
        };
        let date: NaiveDate = field(0, "date")?.parse().map_err(|e| SignalError::Parse {
            path: path_str.clone(),
            line,
            msg: format!("bad date: {e}"),
        })?;
        let asset = field(1, "asset")?.to_string();
        let class_raw = field(2, "predicted")?;
        let predicted = RegimeClass::parse(class_raw).ok_or_else(|| SignalError::Parse {
            path: path_str.clone(),
            line,
            msg: format!("unknown class {class_raw:?}"),
        })?;
        let parse_prob = |idx: usize, name: &str| -> Result<f64, SignalError> {
            let raw = field(idx, name)?;
            raw.parse::<f64>().map_err(|e| SignalError::Parse {
                path: path_str.clone(),
                line,
                msg: format!("bad `{name}` value {raw:?}: {e}"),
            })
        };
        let p_bull = parse_prob(3, "p_bull")?;
        let p_bear = parse_prob(4, "p_bear")?;
        let sig = RegimeSignal {
            asset_label: asset,
            date,
            predicted,
            p_bull,
            p_bear,
        };
        sig.validate().map_err(|e| SignalError::Validation {
            path: path_str.clone(),
            line,
            msg: e.to_string(),
        })?;
        signals.push(sig);
    }
    SignalPanel::from_signals(panel, signals)
}

/// Writes the panel back to the CSV interchange format.
pub fn write_signals_csv(
    path: impl AsRef<Path>,
    signals: &SignalPanel,
    asset_labels: &[String],
) -> std::io::Result<()> {
    use std::io::Write;
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "date,asset,predicted,p_bull,p_bear")?;
    for t in 0..signals.n_dates() {
        for (i, label) in asset_labels.iter().enumerate() {
            writeln!(
                out,
                "{},{},{},{},{}",
                signals.dates[t],
                label,
                signals.class(t, i).as_str(),
                signals.p_bull(t, i),
                signals.p_bear(t, i),
            )?;
        }
    }
    out.flush()
}
