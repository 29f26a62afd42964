//! Price-series loading and calendar alignment.
//!
//! Raw per-asset CSVs are validated into [`PriceSeries`], then [`align`]
//! merges them onto a shared trading calendar (forward-filling short gaps)
//! and derives simple daily returns. The cash leg is a daily-rate series
//! loaded from an annualised-yield CSV.

use std::collections::BTreeSet;
use std::path::Path;

use chrono::NaiveDate;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

/// Trading days per year used to de-annualise cash yields.
pub const TRADING_DAYS_PER_YEAR: f64 = 252.0;

#[derive(Debug, Error)]
pub enum DataError {
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
    #[error("alignment error: {0}")]
    Alignment(String),
    #[error("invalid series {label}: {msg}")]
    InvalidSeries { label: String, msg: String },
}

/// One asset's raw daily history: strictly increasing dates, positive
/// closes, nonnegative dollar volumes.
#[derive(Debug, Clone)]
pub struct PriceSeries {
    pub asset_label: String,
    pub dates: Vec<NaiveDate>,
    pub close: Vec<f64>,
    pub volume: Vec<f64>,
}

impl PriceSeries {
    /// Builds a series, sorting rows by date and enforcing the invariants
    /// (no duplicate dates, close > 0, volume >= 0).
    pub fn new(
        asset_label: impl Into<String>,
        mut rows: Vec<(NaiveDate, f64, f64)>,
    ) -> Result<Self, DataError> {
        let asset_label = asset_label.into();
        rows.sort_by_key(|r| r.0);
        let mut dates = Vec::with_capacity(rows.len());
        let mut close = Vec::with_capacity(rows.len());
        let mut volume = Vec::with_capacity(rows.len());
        for (date, c, v) in rows {
            if let Some(last) = dates.last() {
                if *last == date {
                    return Err(DataError::InvalidSeries {
                        label: asset_label,
                        msg: format!("duplicate date {date}"),
                    });
                }
            }
            if !(c > 0.0) {
                return Err(DataError::InvalidSeries {
                    label: asset_label,
                    msg: format!("non-positive close {c} on {date}"),
                });
            }
            if !(v >= 0.0) {
                return Err(DataError::InvalidSeries {
                    label: asset_label,
                    msg: format!("negative volume {v} on {date}"),
                });
            }
            dates.push(date);
            close.push(c);
            volume.push(v);
        }
        Ok(Self {
            asset_label,
            dates,
            close,
            volume,
        })
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }
}

/// Daily risk-free rate series (already de-annualised).
#[derive(Debug, Clone)]
pub struct CashRateSeries {
    pub label: String,
    pub dates: Vec<NaiveDate>,
    pub daily_rate: Vec<f64>,
}

/// Loads a `date,close,volume` CSV into a [`PriceSeries`].
///
/// Rows may arrive in any order; they are sorted by date. The asset label is
/// the file stem unless overridden by the caller afterwards.
pub fn load_price_csv(path: impl AsRef<Path>) -> Result<PriceSeries, DataError> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| path_str.clone());

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| map_csv_open_error(e, &path_str))?;

    expect_headers(&mut reader, &path_str, &["date", "close", "volume"])?;

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| DataError::Parse {
            path: path_str.clone(),
            line: csv_error_line(&e),
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let date = parse_field::<NaiveDate>(&record, 0, "date", &path_str, line)?;
        let close = parse_field::<f64>(&record, 1, "close", &path_str, line)?;
        let volume = parse_field::<f64>(&record, 2, "volume", &path_str, line)?;
        if !(close > 0.0) {
            return Err(DataError::Validation {
                path: path_str,
                line,
                msg: format!("close must be positive, got {close}"),
            });
        }
        if !(volume >= 0.0) {
            return Err(DataError::Validation {
                path: path_str,
                line,
                msg: format!("volume must be nonnegative, got {volume}"),
            });
        }
        rows.push((date, close, volume));
    }

    PriceSeries::new(label, rows).map_err(|e| match e {
        DataError::InvalidSeries { label: _, msg } => DataError::Validation {
            path: path_str,
            line: 0,
            msg,
        },
        other => other,
    })
}

/// Loads a `date,annual_yield` CSV (yield in percent) and converts each row
/// to a daily rate: `annual_yield / 100 / 252`.
pub fn load_cash_csv(path: impl AsRef<Path>) -> Result<CashRateSeries, DataError> {
    let path = path.as_ref();
    let path_str = path.display().to_string();
    let label = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "cash".to_string());

    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| map_csv_open_error(e, &path_str))?;

    expect_headers(&mut reader, &path_str, &["date", "annual_yield"])?;

    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| DataError::Parse {
            path: path_str.clone(),
            line: csv_error_line(&e),
            msg: e.to_string(),
        })?;
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let date = parse_field::<NaiveDate>(&record, 0, "date", &path_str, line)?;
        let yield_pct = parse_field::<f64>(&record, 1, "annual_yield", &path_str, line)?;
        rows.push((date, yield_pct / 100.0 / TRADING_DAYS_PER_YEAR));
    }
    rows.sort_by_key(|r| r.0);
    for pair in rows.windows(2) {
        if pair[0].0 == pair[1].0 {
            return Err(DataError::Validation {
                path: path_str,
                line: 0,
                msg: format!("duplicate date {}", pair[0].0),
            });
        }
    }
    Ok(CashRateSeries {
        label,
        dates: rows.iter().map(|r| r.0).collect(),
        daily_rate: rows.iter().map(|r| r.1).collect(),
    })
}

/// Date-aligned panel of all risky assets plus the cash leg.
///
/// `returns[(t, i)]` is the simple return `prices[(t, i)] / prices[(t-1, i)] - 1`;
/// row 0 is undefined and stored as zero. Immutable after construction.
#[derive(Debug, Clone)]
pub struct AlignedPanel {
    assets: Vec<String>,
    cash_label: String,
    dates: Vec<NaiveDate>,
    prices: DMatrix<f64>,
    returns: DMatrix<f64>,
    dollar_volume: DMatrix<f64>,
    cash_rate: DVector<f64>,
}

impl AlignedPanel {
    /// Number of risky assets.
    pub fn n_assets(&self) -> usize {
        self.assets.len()
    }

    /// Number of calendar dates.
    pub fn n_dates(&self) -> usize {
        self.dates.len()
    }

    pub fn assets(&self) -> &[String] {
        &self.assets
    }

    pub fn cash_label(&self) -> &str {
        &self.cash_label
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn date(&self, t: usize) -> NaiveDate {
        self.dates[t]
    }

    /// Index of the exact date, if present.
    pub fn date_index(&self, date: NaiveDate) -> Option<usize> {
        self.dates.binary_search(&date).ok()
    }

    /// Index of the first date `>= date`.
    pub fn date_index_at_or_after(&self, date: NaiveDate) -> Option<usize> {
        match self.dates.binary_search(&date) {
            Ok(i) => Some(i),
            Err(i) if i < self.dates.len() => Some(i),
            Err(_) => None,
        }
    }

    /// Index of the last date `<= date`.
    pub fn date_index_at_or_before(&self, date: NaiveDate) -> Option<usize> {
        match self.dates.binary_search(&date) {
            Ok(i) => Some(i),
            Err(0) => None,
            Err(i) => Some(i - 1),
        }
    }

    pub fn price(&self, t: usize, asset: usize) -> f64 {
        self.prices[(t, asset)]
    }

    /// Simple return of `asset` at date `t`; `t` must be >= 1 (row 0 is undefined).
    pub fn ret(&self, t: usize, asset: usize) -> f64 {
        debug_assert!(t >= 1, "returns are undefined on the first calendar date");
        self.returns[(t, asset)]
    }

    pub fn volume(&self, t: usize, asset: usize) -> f64 {
        self.dollar_volume[(t, asset)]
    }

    pub fn cash_rate(&self, t: usize) -> f64 {
        self.cash_rate[t]
    }

    pub fn prices(&self) -> &DMatrix<f64> {
        &self.prices
    }

    pub fn returns(&self) -> &DMatrix<f64> {
        &self.returns
    }

    /// Rebuilds the panel's per-asset series (used for re-alignment checks
    /// and for constructing perturbed copies in diagnostics).
    pub fn to_series(&self) -> (Vec<PriceSeries>, CashRateSeries) {
        let series = (0..self.n_assets())
            .map(|i| PriceSeries {
                asset_label: self.assets[i].clone(),
                dates: self.dates.clone(),
                close: (0..self.n_dates()).map(|t| self.prices[(t, i)]).collect(),
                volume: (0..self.n_dates())
                    .map(|t| self.dollar_volume[(t, i)])
                    .collect(),
            })
            .collect();
        let cash = CashRateSeries {
            label: self.cash_label.clone(),
            dates: self.dates.clone(),
            daily_rate: self.cash_rate.iter().copied().collect(),
        };
        (series, cash)
    }

    /// Returns a copy with the named assets removed.
    pub fn without_assets(&self, excluded: &[String]) -> Result<AlignedPanel, DataError> {
        for label in excluded {
            if !self.assets.contains(label) {
                return Err(DataError::Alignment(format!(
                    "cannot exclude unknown asset {label}"
                )));
            }
        }
        let keep: Vec<usize> = (0..self.n_assets())
            .filter(|i| !excluded.contains(&self.assets[*i]))
            .collect();
        if keep.is_empty() {
            return Err(DataError::Alignment(
                "cannot exclude every risky asset".to_string(),
            ));
        }
        let t = self.n_dates();
        let select = |m: &DMatrix<f64>| {
            DMatrix::from_fn(t, keep.len(), |r, c| m[(r, keep[c])])
        };
        Ok(AlignedPanel {
            assets: keep.iter().map(|&i| self.assets[i].clone()).collect(),
            cash_label: self.cash_label.clone(),
            dates: self.dates.clone(),
            prices: select(&self.prices),
            returns: select(&self.returns),
            dollar_volume: select(&self.dollar_volume),
            cash_rate: self.cash_rate.clone(),
        })
    }
}

/// Aligns per-asset series onto a common calendar.
///
/// The candidate calendar is the union of all series' dates. A date survives
/// if every asset either quotes it or can be forward-filled from a quote at
/// most `max_ffill` candidate dates back; surviving dates keep forward-filled
/// prices (return 0 on the filled day) and zero filled volume. Dates not
/// recoverable for all assets are dropped globally. The cash series is
/// subject to the same rule.
pub fn align(
    series: &[PriceSeries],
    cash: &CashRateSeries,
    max_ffill: usize,
) -> Result<AlignedPanel, DataError> {
    if series.is_empty() {
        return Err(DataError::Alignment("no price series given".to_string()));
    }
    for s in series {
        if s.is_empty() {
            return Err(DataError::InvalidSeries {
                label: s.asset_label.clone(),
                msg: "empty series".to_string(),
            });
        }
    }
    if cash.dates.is_empty() {
        return Err(DataError::InvalidSeries {
            label: cash.label.clone(),
            msg: "empty cash-rate series".to_string(),
        });
    }

    let mut union: BTreeSet<NaiveDate> = BTreeSet::new();
    for s in series {
        union.extend(s.dates.iter().copied());
    }
    union.extend(cash.dates.iter().copied());
    let union: Vec<NaiveDate> = union.into_iter().collect();

    // For each asset, resolve every union date to a source row (allowing a
    // bounded forward-fill) or mark it unrecoverable.
    struct Resolved {
        // (source row, filled) per union date; None = unrecoverable
        cells: Vec<Option<(usize, bool)>>,
    }
    let resolve = |dates: &[NaiveDate]| -> Resolved {
        let mut cells = Vec::with_capacity(union.len());
        let mut src = 0usize; // next unconsumed source row
        let mut last: Option<(usize, usize)> = None; // (source row, union position)
        for (pos, d) in union.iter().enumerate() {
            if src < dates.len() && dates[src] == *d {
                cells.push(Some((src, false)));
                last = Some((src, pos));
                src += 1;
            } else {
                match last {
                    Some((row, last_pos)) if pos - last_pos <= max_ffill => {
                        cells.push(Some((row, true)));
                    }
                    _ => cells.push(None),
                }
            }
        }
        Resolved { cells }
    };

    let resolved: Vec<Resolved> = series.iter().map(|s| resolve(&s.dates)).collect();
    let cash_resolved = resolve(&cash.dates);

    let kept: Vec<usize> = (0..union.len())
        .filter(|&pos| {
            cash_resolved.cells[pos].is_some()
                && resolved.iter().all(|r| r.cells[pos].is_some())
        })
        .collect();
    if kept.is_empty() {
        return Err(DataError::Alignment(
            "no common dates after alignment".to_string(),
        ));
    }

    let t = kept.len();
    let n = series.len();
    let mut prices = DMatrix::zeros(t, n);
    let mut volumes = DMatrix::zeros(t, n);
    for (i, (s, r)) in series.iter().zip(&resolved).enumerate() {
        for (row, &pos) in kept.iter().enumerate() {
            let (src, filled) = r.cells[pos].expect("kept dates are resolvable");
            prices[(row, i)] = s.close[src];
            volumes[(row, i)] = if filled { 0.0 } else { s.volume[src] };
        }
    }
    let mut cash_rate = DVector::zeros(t);
    for (row, &pos) in kept.iter().enumerate() {
        let (src, _) = cash_resolved.cells[pos].expect("kept dates are resolvable");
        cash_rate[row] = cash.daily_rate[src];
    }

    let mut returns = DMatrix::zeros(t, n);
    for row in 1..t {
        for i in 0..n {
            returns[(row, i)] = prices[(row, i)] / prices[(row - 1, i)] - 1.0;
        }
    }

    Ok(AlignedPanel {
        assets: series.iter().map(|s| s.asset_label.clone()).collect(),
        cash_label: cash.label.clone(),
        dates: kept.into_iter().map(|pos| union[pos]).collect(),
        prices,
        returns,
        dollar_volume: volumes,
        cash_rate,
    })
}

fn expect_headers(
    reader: &mut csv::Reader<std::fs::File>,
    path: &str,
    expected: &[&str],
) -> Result<(), DataError> {
    let headers = reader.headers().map_err(|e| DataError::Parse {
        path: path.to_string(),
        line: 1,
        msg: e.to_string(),
    })?;
    let got: Vec<String> = headers.iter().map(|h| h.trim().to_lowercase()).collect();
    if got != expected {
        return Err(DataError::Parse {
            path: path.to_string(),
            line: 1,
            msg: format!("expected header {expected:?}, got {got:?}"),
        });
    }
    Ok(())
}

fn parse_field<T: std::str::FromStr>(
    record: &csv::StringRecord,
    idx: usize,
    name: &str,
    path: &str,
    line: u64,
) -> Result<T, DataError>
where
    T::Err: std::fmt::Display,
{
    let raw = record.get(idx).ok_or_else(|| DataError::Parse {
        path: path.to_string(),
        line,
        msg: format!("missing field `{name}`"),
    })?;
    raw.parse::<T>().map_err(|e| DataError::Parse {
        path: path.to_string(),
        line,
        msg: format!("bad `{name}` value {raw:?}: {e}"),
    })
}

fn map_csv_open_error(e: csv::Error, path: &str) -> DataError {
    if let csv::ErrorKind::Io(io) = e.into_kind() {
        DataError::Io {
            path: path.to_string(),
            source: io,
        }
    } else {
        DataError::Parse {
            path: path.to_string(),
            line: 0,
            msg: "unreadable csv".to_string(),
        }
    }
}

fn csv_error_line(e: &csv::Error) -> u64 {
    e.position().map(|p| p.line()).unwrap_or(0)
}
