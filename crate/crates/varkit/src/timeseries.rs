//! Price ingestion, log returns, technical indicators, normalization,
//! and chronological splitting.

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TimeSeriesError {
    #[error("series too short: need at least {need}, got {got}")]
    TooShort { need: usize, got: usize },
    #[error("non-positive price at index {index}: {value}")]
    NonPositivePrice { index: usize, value: f64 },
    #[error("split produces an empty partition for length {len}")]
    EmptyPartition { len: usize },
    #[error("split fractions must sum to 1, got {sum}")]
    BadFractions { sum: f64 },
    #[error("indicator window {window} too large for series of length {len}")]
    WindowTooLarge { window: usize, len: usize },
    #[error("timestamps not strictly increasing at index {index}")]
    UnorderedTimestamps { index: usize },
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("empty normalization fit window")]
    EmptyFitWindow,
    #[error("csv error: {0}")]
    Csv(String),
    #[error("unknown feature spec '{0}'")]
    UnknownFeature(String),
}

/// Daily price history. Timestamps strictly increasing, prices positive.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PriceSeries {
    pub timestamps: Vec<NaiveDate>,
    pub close: Vec<f64>,
    pub open: Option<Vec<f64>>,
    pub high: Option<Vec<f64>>,
    pub low: Option<Vec<f64>>,
}

impl PriceSeries {
    pub fn from_close(timestamps: Vec<NaiveDate>, close: Vec<f64>) -> Result<Self, TimeSeriesError> {
        let s = Self {
            timestamps,
            close,
            open: None,
            high: None,
            low: None,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), TimeSeriesError> {
        for (i, w) in self.timestamps.windows(2).enumerate() {
            if w[1] <= w[0] {
                return Err(TimeSeriesError::UnorderedTimestamps { index: i + 1 });
            }
        }
        for (i, &p) in self.close.iter().enumerate() {
            if !(p > 0.0) {
                return Err(TimeSeriesError::NonPositivePrice { index: i, value: p });
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.close.len()
    }

    pub fn is_empty(&self) -> bool {
        self.close.is_empty()
    }
}

/// Log returns; one entry shorter than the price series it came from.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReturnSeries {
    pub timestamps: Vec<NaiveDate>,
    pub values: Vec<f64>,
}

impl ReturnSeries {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> ReturnSeries {
        ReturnSeries {
            timestamps: self.timestamps[range.clone()].to_vec(),
            values: self.values[range].to_vec(),
        }
    }
}

/// r_t = ln(P[t+1] / P[t]).
pub fn compute_log_returns(prices: &PriceSeries) -> Result<ReturnSeries, TimeSeriesError> {
    if prices.len() < 2 {
        return Err(TimeSeriesError::TooShort {
            need: 2,
            got: prices.len(),
        });
    }
    prices.validate()?;
    let values = prices
        .close
        .windows(2)
        .map(|w| (w[1] / w[0]).ln())
        .collect();
    Ok(ReturnSeries {
        timestamps: prices.timestamps[1..].to_vec(),
        values,
    })
}

/// Chronological train/validation/test fractions, each in (0,1).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitSpec {
    pub fn new(train: f64, validation: f64, test: f64) -> Result<Self, TimeSeriesError> {
        let sum = train + validation + test;
        if (sum - 1.0).abs() > 1e-9 {
            return Err(TimeSeriesError::BadFractions { sum });
        }
        Ok(Self {
            train,
            validation,
            test,
        })
    }

    /// Boundary indices: train = [0, a), validation = [a, b), test = [b, len).
    /// Each boundary is floor(fraction * len); the remainder goes to test.
    pub fn bounds(&self, len: usize) -> Result<(usize, usize), TimeSeriesError> {
        let a = (self.train * len as f64).floor() as usize;
        let b = a + (self.validation * len as f64).floor() as usize;
        if a == 0 || b == a || b >= len {
            return Err(TimeSeriesError::EmptyPartition { len });
        }
        Ok((a, b))
    }
}

pub fn chronological_split(
    series: &ReturnSeries,
    spec: &SplitSpec,
) -> Result<(ReturnSeries, ReturnSeries, ReturnSeries), TimeSeriesError> {
    let (a, b) = spec.bounds(series.len())?;
    Ok((
        series.slice(0..a),
        series.slice(a..b),
        series.slice(b..series.len()),
    ))
}

/// Named feature columns aligned to timestamps.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureMatrix {
    pub names: Vec<String>,
    pub timestamps: Vec<NaiveDate>,
    /// row-major: rows[t][j] is feature j at timestamp t
    pub rows: Vec<Vec<f64>>,
}

impl FeatureMatrix {
    pub fn n_rows(&self) -> usize {
        self.rows.len()
    }

    pub fn n_cols(&self) -> usize {
        self.names.len()
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> FeatureMatrix {
        FeatureMatrix {
            names: self.names.clone(),
            timestamps: self.timestamps[range.clone()].to_vec(),
            rows: self.rows[range].to_vec(),
        }
    }

    pub fn split(
        &self,
        spec: &SplitSpec,
    ) -> Result<(FeatureMatrix, FeatureMatrix, FeatureMatrix), TimeSeriesError> {
        let (a, b) = spec.bounds(self.n_rows())?;
        Ok((
            self.slice(0..a),
            self.slice(a..b),
            self.slice(b..self.n_rows()),
        ))
    }

    pub fn push_column(&mut self, name: &str, values: Vec<f64>) -> Result<(), TimeSeriesError> {
        if values.len() != self.n_rows() {
            return Err(TimeSeriesError::LengthMismatch {
                left: values.len(),
                right: self.n_rows(),
            });
        }
        self.names.push(name.to_string());
        for (row, v) in self.rows.iter_mut().zip(values) {
            row.push(v);
        }
        Ok(())
    }
}

/// Per-column statistics from the fitting window.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NormalizeStats {
    pub columns: Vec<(String, f64, f64)>,
}

#[derive(Debug)]
pub struct NormalizeResult {
    pub matrix: FeatureMatrix,
    pub stats: NormalizeStats,
    /// values outside the fit window clamped into [0,1]
    pub clamp_count: usize,
    /// constant columns dropped with a warning instead of dividing by zero
    pub dropped_columns: Vec<String>,
}

/// Min-max normalization: x' = (x - min) / (max - min), statistics taken
/// from `fit_window` only; values elsewhere are clamped to [0,1].
pub fn minmax_normalize(
    matrix: &FeatureMatrix,
    fit_window: std::ops::Range<usize>,
) -> Result<NormalizeResult, TimeSeriesError> {
    if fit_window.is_empty() || fit_window.end > matrix.n_rows() {
        return Err(TimeSeriesError::EmptyFitWindow);
    }
    let mut keep = Vec::new();
    let mut dropped = Vec::new();
    let mut stats = Vec::new();
    for j in 0..matrix.n_cols() {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for t in fit_window.clone() {
            lo = lo.min(matrix.rows[t][j]);
            hi = hi.max(matrix.rows[t][j]);
        }
        if hi > lo {
            keep.push(j);
            stats.push((matrix.names[j].clone(), lo, hi));
        } else {
            dropped.push(matrix.names[j].clone());
        }
    }

    let mut clamp_count = 0usize;
    let rows: Vec<Vec<f64>> = matrix
        .rows
        .iter()
        .map(|row| {
            keep.iter()
                .zip(&stats)
                .map(|(&j, &(_, lo, hi))| {
                    let x = (row[j] - lo) / (hi - lo);
                    if !(0.0..=1.0).contains(&x) {
                        clamp_count += 1;
                        x.clamp(0.0, 1.0)
                    } else {
                        x
                    }
                })
                .collect()
        })
        .collect();

    Ok(NormalizeResult {
        matrix: FeatureMatrix {
            names: keep.iter().map(|&j| matrix.names[j].clone()).collect(),
            timestamps: matrix.timestamps.clone(),
            rows,
        },
        stats: NormalizeStats { columns: stats },
        clamp_count,
        dropped_columns: dropped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IndicatorKind {
    Sma,
    Ema,
    Rsi,
    BollingerUpper,
    BollingerLower,
}

/// Trailing-window indicator. Entries before the first full window are
/// `None`, never zero-filled.
pub fn compute_indicator(
    prices: &PriceSeries,
    kind: IndicatorKind,
    window: usize,
) -> Result<Vec<Option<f64>>, TimeSeriesError> {
    let n = prices.len();
    if window < 2 || window > n {
        return Err(TimeSeriesError::WindowTooLarge { window, len: n });
    }
    let close = &prices.close;
    let mut out = vec![None; n];
    match kind {
        IndicatorKind::Sma => {
            let mut sum: f64 = close[..window].iter().sum();
            out[window - 1] = Some(sum / window as f64);
            for t in window..n {
                sum += close[t] - close[t - window];
                out[t] = Some(sum / window as f64);
            }
        }
        IndicatorKind::Ema => {
            // seeded by the SMA of the first window
            let k = 2.0 / (window as f64 + 1.0);
            let mut ema = close[..window].iter().sum::<f64>() / window as f64;
            out[window - 1] = Some(ema);
            for t in window..n {
                ema = k * close[t] + (1.0 - k) * ema;
                out[t] = Some(ema);
            }
        }
        IndicatorKind::Rsi => {
            // Wilder smoothing over `window` gains/losses; needs window
            // price changes, so first defined at index `window`.
            if n < window + 1 {
                return Err(TimeSeriesError::WindowTooLarge { window, len: n });
            }
            let mut gain = 0.0;
            let mut loss = 0.0;
            for t in 1..=window {
                let d = close[t] - close[t - 1];
                if d > 0.0 {
                    gain += d;
                } else {
                    loss -= d;
                }
            }
            let mut avg_gain = gain / window as f64;
            let mut avg_loss = loss / window as f64;
            let rsi = |g: f64, l: f64| {
                if g + l == 0.0 {
                    50.0
                } else {
                    100.0 * g / (g + l)
                }
            };
            out[window] = Some(rsi(avg_gain, avg_loss));
            let w = window as f64;
            for t in window + 1..n {
                let d = close[t] - close[t - 1];
                let (g, l) = if d > 0.0 { (d, 0.0) } else { (0.0, -d) };
                avg_gain = (avg_gain * (w - 1.0) + g) / w;
                avg_loss = (avg_loss * (w - 1.0) + l) / w;
                out[t] = Some(rsi(avg_gain, avg_loss));
            }
        }
        IndicatorKind::BollingerUpper | IndicatorKind::BollingerLower => {
            let sign = if kind == IndicatorKind::BollingerUpper {
                2.0
            } else {
                -2.0
            };
            for t in window - 1..n {
                let w = &close[t + 1 - window..=t];
                let mean = w.iter().sum::<f64>() / window as f64;
                let var = w.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / window as f64;
                out[t] = Some(mean + sign * var.sqrt());
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SignalStrategy {
    SmaCross,
    EmaCross,
    RsiRule,
}

/// Event-coded trading signals: +1 Buy at an upward cross, -1 Sell at a
/// downward cross, 0 Stay. Fast/slow windows are 5/15; RSI uses 14 with
/// configurable oversold/overbought bands.
pub fn build_trading_signal(
    prices: &PriceSeries,
    strategy: SignalStrategy,
    rsi_bands: (f64, f64),
) -> Result<Vec<Option<i8>>, TimeSeriesError> {
    let n = prices.len();
    match strategy {
        SignalStrategy::SmaCross | SignalStrategy::EmaCross => {
            let kind = if strategy == SignalStrategy::SmaCross {
                IndicatorKind::Sma
            } else {
                IndicatorKind::Ema
            };
            let fast = compute_indicator(prices, kind, 5)?;
            let slow = compute_indicator(prices, kind, 15)?;
            let mut out = vec![None; n];
            for t in 0..n {
                let (Some(f), Some(s)) = (fast[t], slow[t]) else {
                    continue;
                };
                out[t] = Some(match (t.checked_sub(1).and_then(|p| fast[p].zip(slow[p])), f, s) {
                    (Some((pf, ps)), f, s) if pf <= ps && f > s => 1,
                    (Some((pf, ps)), f, s) if pf >= ps && f < s => -1,
                    _ => 0,
                });
            }
            Ok(out)
        }
        SignalStrategy::RsiRule => {
            let (oversold, overbought) = rsi_bands;
            let rsi = compute_indicator(prices, IndicatorKind::Rsi, 14)?;
            let mut out = vec![None; n];
            for t in 0..n {
                let Some(r) = rsi[t] else { continue };
                out[t] = Some(match t.checked_sub(1).and_then(|p| rsi[p]) {
                    Some(prev) if prev < oversold && r >= oversold => 1,
                    Some(prev) if prev > overbought && r <= overbought => -1,
                    _ => 0,
                });
            }
            Ok(out)
        }
    }
}

/// One entry of a feature recipe; parsed from config strings such as
/// `"ret lag 1"`, `"SMA 5"`, `"RSI 14"`, `"BB upper 20"`, `"signal sma"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum FeatureSpec {
    LaggedReturn(usize),
    Indicator(IndicatorKind, usize),
    Signal(SignalStrategy),
}

impl FeatureSpec {
    pub fn parse(s: &str) -> Result<Self, TimeSeriesError> {
        let toks: Vec<&str> = s.split_whitespace().collect();
        let win = |t: &[&str], i: usize| -> Result<usize, TimeSeriesError> {
            t.get(i)
                .and_then(|w| w.parse().ok())
                .ok_or_else(|| TimeSeriesError::UnknownFeature(s.to_string()))
        };
        match toks.as_slice() {
            ["ret", "lag", k] => Ok(FeatureSpec::LaggedReturn(
                k.parse()
                    .map_err(|_| TimeSeriesError::UnknownFeature(s.to_string()))?,
            )),
            ["SMA", _] => Ok(FeatureSpec::Indicator(IndicatorKind::Sma, win(&toks, 1)?)),
            ["EMA", _] => Ok(FeatureSpec::Indicator(IndicatorKind::Ema, win(&toks, 1)?)),
            ["RSI", _] => Ok(FeatureSpec::Indicator(IndicatorKind::Rsi, win(&toks, 1)?)),
            ["BB", "upper", _] => Ok(FeatureSpec::Indicator(
                IndicatorKind::BollingerUpper,
                win(&toks, 2)?,
            )),
            ["BB", "lower", _] => Ok(FeatureSpec::Indicator(
                IndicatorKind::BollingerLower,
                win(&toks, 2)?,
            )),
            ["signal", "sma"] => Ok(FeatureSpec::Signal(SignalStrategy::SmaCross)),
            ["signal", "ema"] => Ok(FeatureSpec::Signal(SignalStrategy::EmaCross)),
            ["signal", "rsi"] => Ok(FeatureSpec::Signal(SignalStrategy::RsiRule)),
            _ => Err(TimeSeriesError::UnknownFeature(s.to_string())),
        }
    }

    pub fn column_name(&self) -> String {
        match self {
            FeatureSpec::LaggedReturn(k) => format!("ret lag {k}"),
            FeatureSpec::Indicator(IndicatorKind::Sma, w) => format!("SMA {w}"),
            FeatureSpec::Indicator(IndicatorKind::Ema, w) => format!("EMA {w}"),
            FeatureSpec::Indicator(IndicatorKind::Rsi, w) => format!("RSI {w}"),
            FeatureSpec::Indicator(IndicatorKind::BollingerUpper, w) => format!("BB upper {w}"),
            FeatureSpec::Indicator(IndicatorKind::BollingerLower, w) => format!("BB lower {w}"),
            FeatureSpec::Signal(SignalStrategy::SmaCross) => "Simple Moving".to_string(),
            FeatureSpec::Signal(SignalStrategy::EmaCross) => "Exponential Moving".to_string(),
            FeatureSpec::Signal(SignalStrategy::RsiRule) => "Relative Strength Index".to_string(),
        }
    }
}

/// Assemble the feature matrix for labels indexed like the return series.
///
/// The row for return index t only uses prices up to t (known before r_t
/// resolves, since r_t = ln(P[t+1]/P[t])) and returns up to t-1, so no
/// column looks ahead of its own row. Leading rows with any undefined
/// entry are dropped; the returned offset says how many.
pub fn build_features(
    prices: &PriceSeries,
    returns: &ReturnSeries,
    specs: &[FeatureSpec],
    rsi_bands: (f64, f64),
) -> Result<(FeatureMatrix, usize), TimeSeriesError> {
    let n = returns.len();
    let mut columns: Vec<(String, Vec<Option<f64>>)> = Vec::new();
    for spec in specs {
        let col: Vec<Option<f64>> = match spec {
            FeatureSpec::LaggedReturn(k) => (0..n)
                .map(|t| t.checked_sub(*k).map(|i| returns.values[i]))
                .collect(),
            FeatureSpec::Indicator(kind, w) => {
                let ind = compute_indicator(prices, *kind, *w)?;
                // indicator at price index t is known when r_t resolves
                (0..n).map(|t| ind[t]).collect()
            }
            FeatureSpec::Signal(st) => {
                let sig = build_trading_signal(prices, *st, rsi_bands)?;
                (0..n).map(|t| sig[t].map(|v| v as f64)).collect()
            }
        };
        columns.push((spec.column_name(), col));
    }

    let offset = (0..n)
        .find(|&t| columns.iter().all(|(_, c)| c[t].is_some()))
        .ok_or(TimeSeriesError::TooShort { need: 1, got: 0 })?;
    let rows: Vec<Vec<f64>> = (offset..n)
        .map(|t| columns.iter().map(|(_, c)| c[t].unwrap()).collect())
        .collect();
    Ok((
        FeatureMatrix {
            names: columns.into_iter().map(|(n, _)| n).collect(),
            timestamps: returns.timestamps[offset..].to_vec(),
            rows,
        },
        offset,
    ))
}

/// Read `date,open,high,low,close` CSV (extra columns ignored, ISO dates).
pub fn read_prices_csv(path: &Path) -> Result<PriceSeries, TimeSeriesError> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| TimeSeriesError::Csv(e.to_string()))?;
    let headers = rdr
        .headers()
        .map_err(|e| TimeSeriesError::Csv(e.to_string()))?
        .clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let date_ix = col("date").ok_or_else(|| TimeSeriesError::Csv("missing 'date' column".into()))?;
    let close_ix =
        col("close").ok_or_else(|| TimeSeriesError::Csv("missing 'close' column".into()))?;
    let open_ix = col("open");
    let high_ix = col("high");
    let low_ix = col("low");

    let mut timestamps = Vec::new();
    let mut close = Vec::new();
    let mut open = Vec::new();
    let mut high = Vec::new();
    let mut low = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| TimeSeriesError::Csv(e.to_string()))?;
        let date: NaiveDate = rec[date_ix]
            .parse()
            .map_err(|e| TimeSeriesError::Csv(format!("bad date '{}': {e}", &rec[date_ix])))?;
        let c: f64 = rec[close_ix]
            .parse()
            .map_err(|e| TimeSeriesError::Csv(format!("bad close: {e}")))?;
        timestamps.push(date);
        close.push(c);
        let opt = |ix: Option<usize>, out: &mut Vec<f64>| {
            if let Some(i) = ix {
                if let Ok(v) = rec[i].parse::<f64>() {
                    out.push(v);
                }
            }
        };
        opt(open_ix, &mut open);
        opt(high_ix, &mut high);
        opt(low_ix, &mut low);
    }
    let n = timestamps.len();
    let s = PriceSeries {
        timestamps,
        close,
        open: (open.len() == n).then_some(open),
        high: (high.len() == n).then_some(high),
        low: (low.len() == n).then_some(low),
    };
    s.validate()?;
    Ok(s)
}

pub fn write_features_csv(path: &Path, matrix: &FeatureMatrix) -> Result<(), TimeSeriesError> {
    let mut wtr = csv::Writer::from_path(path).map_err(|e| TimeSeriesError::Csv(e.to_string()))?;
    let mut header = vec!["date".to_string()];
    header.extend(matrix.names.iter().cloned());
    wtr.write_record(&header)
        .map_err(|e| TimeSeriesError::Csv(e.to_string()))?;
    for (ts, row) in matrix.timestamps.iter().zip(&matrix.rows) {
        let mut rec = vec![ts.to_string()];
        rec.extend(row.iter().map(|v| format!("{v:.12}")));
        wtr.write_record(&rec)
            .map_err(|e| TimeSeriesError::Csv(e.to_string()))?;
    }
    wtr.flush().map_err(|e| TimeSeriesError::Csv(e.to_string()))?;
    Ok(())
}
