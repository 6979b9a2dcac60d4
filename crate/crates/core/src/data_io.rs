//! Price-history ingestion, train/test splitting, step-wise universe growth
//! and versioned result documents.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use chrono::{DateTime, NaiveDate, NaiveDateTime};
use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::{nll_report, NllConvention, PenaltyConfig};
use crate::ou_model::Series;
use crate::solver::{
    fit_single_series, initial_weights, multi_start_from, FitFlag, FitResult, SolverConfig,
};

/// Asset prices, one row per time point and one column per ticker.
#[derive(Debug, Clone, PartialEq)]
pub struct PriceMatrix {
    pub values: DMatrix<f64>,
    pub tickers: Vec<String>,
    pub timestamps: Vec<String>,
    /// Nominal sampling interval.
    pub dt: f64,
}

/// Ordering key of a timestamp label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum TimeKey {
    Integer(i64),
    Instant(NaiveDateTime),
}

fn parse_time(label: &str) -> Option<TimeKey> {
    let s = label.trim();
    if let Ok(i) = s.parse::<i64>() {
        return Some(TimeKey::Integer(i));
    }
    if let Ok(t) = DateTime::parse_from_rfc3339(s) {
        return Some(TimeKey::Instant(t.naive_utc()));
    }
    for fmt in ["%Y-%m-%dT%H:%M:%S%.f", "%Y-%m-%d %H:%M:%S%.f", "%Y-%m-%dT%H:%M"] {
        if let Ok(t) = NaiveDateTime::parse_from_str(s, fmt) {
            return Some(TimeKey::Instant(t));
        }
    }
    NaiveDate::parse_from_str(s, "%Y-%m-%d").ok().and_then(|d| d.and_hms_opt(0, 0, 0)).map(TimeKey::Instant)
}

/// Checks that labels parse and strictly increase. `line_of(i)` maps a row
/// index to the line number used in messages.
fn check_timestamps(labels: &[String], line_of: impl Fn(usize) -> usize) -> Result<()> {
    let mut prev: Option<TimeKey> = None;
    for (i, label) in labels.iter().enumerate() {
        let key = parse_time(label).ok_or_else(|| {
            Error::Data(format!("line {}: unparseable timestamp '{label}'", line_of(i)))
        })?;
        if let Some(p) = prev {
            if std::mem::discriminant(&p) != std::mem::discriminant(&key) {
                return Err(Error::Data(format!(
                    "line {}: timestamp '{label}' mixes integer and calendar formats",
                    line_of(i)
                )));
            }
            match key.cmp(&p) {
                Ordering::Equal => {
                    return Err(Error::Data(format!(
                        "line {}: duplicate timestamp '{label}'",
                        line_of(i)
                    )))
                }
                Ordering::Less => {
                    return Err(Error::Data(format!(
                        "line {}: timestamp '{label}' is earlier than the previous row",
                        line_of(i)
                    )))
                }
                Ordering::Greater => {}
            }
        }
        prev = Some(key);
    }
    Ok(())
}

impl PriceMatrix {
    pub fn new(
        values: DMatrix<f64>,
        tickers: Vec<String>,
        timestamps: Vec<String>,
        dt: f64,
    ) -> Result<Self> {
        if values.ncols() == 0 {
            return Err(Error::Data("price matrix has no assets".into()));
        }
        if values.nrows() < 3 {
            return Err(Error::SeriesTooShort { len: values.nrows(), min: 3 });
        }
        if tickers.len() != values.ncols() {
            return Err(Error::DimensionMismatch { expected: values.ncols(), got: tickers.len() });
        }
        if timestamps.len() != values.nrows() {
            return Err(Error::DimensionMismatch { expected: values.nrows(), got: timestamps.len() });
        }
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::InvalidParameter(format!("dt must be positive, got {dt}")));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        check_timestamps(&timestamps, |i| i)?;
        Ok(PriceMatrix { values, tickers, timestamps, dt })
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn column(&self, j: usize) -> Result<Series> {
        Series::new(self.values.column(j).iter().cloned().collect())
    }

    pub fn ticker_index(&self, ticker: &str) -> Option<usize> {
        self.tickers.iter().position(|t| t == ticker)
    }

    pub fn select_columns(&self, idx: &[usize]) -> Result<PriceMatrix> {
        if let Some(&bad) = idx.iter().find(|&&j| j >= self.cols()) {
            return Err(Error::Data(format!("column index {bad} out of range")));
        }
        let values = self.values.select_columns(idx);
        let tickers = idx.iter().map(|&j| self.tickers[j].clone()).collect();
        Ok(PriceMatrix { values, tickers, timestamps: self.timestamps.clone(), dt: self.dt })
    }

    pub fn select_tickers(&self, names: &[String]) -> Result<PriceMatrix> {
        let idx = names
            .iter()
            .map(|n| self.ticker_index(n).ok_or_else(|| Error::Data(format!("unknown ticker '{n}'"))))
            .collect::<Result<Vec<_>>>()?;
        self.select_columns(&idx)
    }

    pub fn slice_rows(&self, start: usize, len: usize) -> Result<PriceMatrix> {
        if start + len > self.rows() {
            return Err(Error::Data("row range out of bounds".into()));
        }
        PriceMatrix::new(
            self.values.rows(start, len).into_owned(),
            self.tickers.clone(),
            self.timestamps[start..start + len].to_vec(),
            self.dt,
        )
    }

    /// Divides each column by the standard deviation of its levels.
    pub fn rescaled(&self) -> PriceMatrix {
        let mut values = self.values.clone();
        for mut col in values.column_iter_mut() {
            let n = col.len() as f64;
            let mean = col.sum() / n;
            let sd = (col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
            if sd > 0.0 {
                col /= sd;
            }
        }
        PriceMatrix { values, ..self.clone() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MissingPolicy {
    /// Carry the previous value forward; leading gaps drop their rows.
    #[default]
    ForwardFill,
    /// Drop every row with a missing cell.
    DropRows,
    Error,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LoadOptions {
    pub missing: MissingPolicy,
    /// Sampling interval; one trading day by default.
    pub dt: f64,
    pub rescale: bool,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions { missing: MissingPolicy::ForwardFill, dt: 1.0, rescale: false }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedPrices {
    pub prices: PriceMatrix,
    pub warnings: Vec<String>,
}

fn is_missing(cell: &str) -> bool {
    matches!(cell.trim().to_ascii_lowercase().as_str(), "" | "na" | "nan" | "null" | "n/a")
}

pub fn load_prices(path: impl AsRef<Path>, opts: &LoadOptions) -> Result<LoadedPrices> {
    let file = File::open(path.as_ref())
        .map_err(|e| Error::Io(format!("{}: {e}", path.as_ref().display())))?;
    parse_prices(file, opts)
}

/// Parses `timestamp,TICKER1,...` CSV text.
pub fn parse_prices<R: Read>(reader: R, opts: &LoadOptions) -> Result<LoadedPrices> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let header = rdr.headers()?.clone();
    if header.len() < 2 {
        return Err(Error::Data("line 1: header needs a timestamp column and at least one ticker".into()));
    }
    let tickers: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let m = tickers.len();

    let mut stamps = Vec::new();
    let mut lines = Vec::new();
    let mut cells: Vec<Vec<Option<f64>>> = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let line = i + 2;
        let rec = rec.map_err(|e| Error::Data(format!("line {line}: {e}")))?;
        if rec.len() != m + 1 {
            return Err(Error::Data(format!(
                "line {line}: expected {} fields, found {}",
                m + 1,
                rec.len()
            )));
        }
        let mut row = Vec::with_capacity(m);
        for (j, cell) in rec.iter().skip(1).enumerate() {
            if is_missing(cell) {
                row.push(None);
                continue;
            }
            let v: f64 = cell.parse().map_err(|_| {
                Error::Data(format!("line {line}: column '{}' is not a number: '{cell}'", tickers[j]))
            })?;
            if !v.is_finite() {
                return Err(Error::Data(format!("line {line}: column '{}' is not finite", tickers[j])));
            }
            row.push(Some(v));
        }
        stamps.push(rec[0].to_string());
        lines.push(line);
        cells.push(row);
    }
    check_timestamps(&stamps, |i| lines[i])?;

    let mut warnings = Vec::new();
    let mut kept_rows: Vec<Vec<f64>> = Vec::new();
    let mut kept_stamps = Vec::new();
    let mut last: Vec<Option<f64>> = vec![None; m];
    for (i, row) in cells.into_iter().enumerate() {
        let line = lines[i];
        if row.iter().all(Option::is_some) {
            let vals: Vec<f64> = row.into_iter().flatten().collect();
            last = vals.iter().map(|&v| Some(v)).collect();
            kept_rows.push(vals);
            kept_stamps.push(stamps[i].clone());
            continue;
        }
        match opts.missing {
            MissingPolicy::Error => {
                let j = row.iter().position(Option::is_none).unwrap_or(0);
                return Err(Error::Data(format!("line {line}: missing value in column '{}'", tickers[j])));
            }
            MissingPolicy::DropRows => {
                warnings.push(format!("line {line}: row dropped (missing values)"));
            }
            MissingPolicy::ForwardFill => {
                if last.iter().any(Option::is_none) && kept_rows.is_empty() {
                    warnings.push(format!("line {line}: leading row dropped (missing values)"));
                    for (j, v) in row.iter().enumerate() {
                        if v.is_some() {
                            last[j] = *v;
                        }
                    }
                    continue;
                }
                let mut vals = Vec::with_capacity(m);
                for (j, v) in row.iter().enumerate() {
                    match v {
                        Some(x) => vals.push(*x),
                        None => {
                            let prev = last[j].ok_or_else(|| {
                                Error::Data(format!("line {line}: no earlier value to fill '{}'", tickers[j]))
                            })?;
                            warnings.push(format!("line {line}: '{}' forward-filled", tickers[j]));
                            vals.push(prev);
                        }
                    }
                }
                last = vals.iter().map(|&v| Some(v)).collect();
                kept_rows.push(vals);
                kept_stamps.push(stamps[i].clone());
            }
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }

    let rows = kept_rows.len();
    if rows < 3 {
        return Err(Error::Data(format!("only {rows} usable rows, need at least 3")));
    }
    let values = DMatrix::from_fn(rows, m, |i, j| kept_rows[i][j]);
    let mut prices = PriceMatrix::new(values, tickers, kept_stamps, opts.dt)?;
    if opts.rescale {
        prices = prices.rescaled();
    }
    Ok(LoadedPrices { prices, warnings })
}

/// Writes prices in the input CSV layout with round-trip float formatting.
pub fn write_prices<W: Write>(s: &PriceMatrix, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["timestamp".to_string()];
    header.extend(s.tickers.iter().cloned());
    w.write_record(&header)?;
    for i in 0..s.rows() {
        let mut rec = vec![s.timestamps[i].clone()];
        rec.extend(s.values.row(i).iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn save_prices(s: &PriceMatrix, path: impl AsRef<Path>) -> Result<()> {
    write_prices(s, File::create(path)?)
}

/// Fraction of rows used for training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train_frac: f64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec { train_frac: 0.7 }
    }
}

/// Contiguous split at `floor(rows * train_frac)`; the test window starts at that row.
pub fn train_test_split(s: &PriceMatrix, split: &SplitSpec) -> Result<(PriceMatrix, PriceMatrix)> {
    if !(split.train_frac > 0.0 && split.train_frac < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "train fraction must lie in (0, 1), got {}",
            split.train_frac
        )));
    }
    let n = s.rows();
    let cut = (n as f64 * split.train_frac + 1e-9).floor() as usize;
    if cut < 3 || n - cut < 3 {
        return Err(Error::Data(format!(
            "split of {n} rows at {cut} leaves a window shorter than 3"
        )));
    }
    Ok((s.slice_rows(0, cut)?, s.slice_rows(cut, n - cut)?))
}

/// One prefix of the ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepwiseRow {
    pub k: usize,
    pub assets: Vec<String>,
    pub nll_train: Option<f64>,
    pub nll_test: Option<f64>,
    pub objective: Option<f64>,
    pub weights: Option<Vec<f64>>,
    pub flags: BTreeSet<FitFlag>,
}

/// Single-asset fit of one member of the ordering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AssetNll {
    pub ticker: String,
    pub nll_train: Option<f64>,
    pub nll_test: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepwiseTable {
    pub rows: Vec<StepwiseRow>,
    pub assets: Vec<AssetNll>,
}

/// Fits portfolios on growing prefixes of `ordering`.
///
/// The `k`-asset fit runs multi-start from the cold initializations of `cfg`
/// plus, for `k > 2`, the previous solution padded with a zero weight. Since
/// that point is feasible with the same objective and every run descends,
/// the train objective cannot increase with `k`.
pub fn stepwise_universe(
    s: &PriceMatrix,
    ordering: &[String],
    pen: &PenaltyConfig,
    cfg: &SolverConfig,
    split: &SplitSpec,
    conv: NllConvention,
) -> Result<StepwiseTable> {
    if ordering.len() < 2 {
        return Err(Error::InvalidParameter("ordering needs at least two tickers".into()));
    }
    let unique: BTreeSet<&String> = ordering.iter().collect();
    if unique.len() != ordering.len() {
        return Err(Error::InvalidParameter("ordering repeats a ticker".into()));
    }
    let universe = s.select_tickers(ordering)?;
    let (train, test) = train_test_split(&universe, split)?;

    let assets = (0..ordering.len())
        .map(|j| {
            let fit = train.column(j).and_then(|x| fit_single_series(&x));
            let (nll_train, nll_test) = match fit {
                Ok(ar) => (
                    train.column(j).ok().and_then(|x| nll_report(x.values(), &ar, conv).ok()),
                    test.column(j).ok().and_then(|x| nll_report(x.values(), &ar, conv).ok()),
                ),
                Err(e) => {
                    log::warn!("single-asset fit of {} failed: {e}", ordering[j]);
                    (None, None)
                }
            };
            AssetNll { ticker: ordering[j].clone(), nll_train, nll_test }
        })
        .collect();

    let mut rows = Vec::new();
    let mut warm: Option<DVector<f64>> = None;
    for k in 2..=ordering.len() {
        let idx: Vec<usize> = (0..k).collect();
        let sub_train = train.select_columns(&idx)?;
        let sub_test = test.select_columns(&idx)?;
        let mut starts = (0..cfg.restarts)
            .map(|r| initial_weights(k, cfg, r))
            .collect::<Result<Vec<_>>>()?;
        if let Some(prev) = &warm {
            let mut padded = DVector::zeros(k);
            padded.rows_mut(0, prev.len()).copy_from(prev);
            starts.push(padded);
        }
        let outcome = multi_start_from(&sub_train, pen, cfg, starts).and_then(|mut fit| {
            fit.nll_train = fit.nll_on(&sub_train, conv)?;
            fit.evaluate_test(&sub_test, conv)?;
            Ok(fit)
        });
        let row = match outcome {
            Ok(fit) => {
                warm = Some(fit.w.as_vector().clone());
                StepwiseRow {
                    k,
                    assets: ordering[..k].to_vec(),
                    nll_train: Some(fit.nll_train),
                    nll_test: fit.nll_test,
                    objective: Some(fit.objective),
                    weights: Some(fit.w.as_slice().to_vec()),
                    flags: fit.flags,
                }
            }
            Err(e) => {
                log::warn!("stepwise row k={k} failed: {e}");
                warm = warm.map(|prev| {
                    let mut padded = DVector::zeros(k);
                    padded.rows_mut(0, prev.len()).copy_from(&prev);
                    padded
                });
                StepwiseRow {
                    k,
                    assets: ordering[..k].to_vec(),
                    nll_train: None,
                    nll_test: None,
                    objective: None,
                    weights: None,
                    flags: BTreeSet::from([FitFlag::FitFailed]),
                }
            }
        };
        rows.push(row);
    }
    Ok(StepwiseTable { rows, assets })
}

fn opt_num(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn flags_label(flags: &BTreeSet<FitFlag>) -> String {
    flags
        .iter()
        .map(|f| serde_json::to_value(f).ok().and_then(|v| v.as_str().map(str::to_string)).unwrap_or_default())
        .collect::<Vec<_>>()
        .join(";")
}

/// `k,assets,nll_train,nll_test,flags`
pub fn write_stepwise_csv<W: Write>(table: &StepwiseTable, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["k", "assets", "nll_train", "nll_test", "flags"])?;
    for row in &table.rows {
        w.write_record([
            row.k.to_string(),
            row.assets.join(";"),
            opt_num(row.nll_train),
            opt_num(row.nll_test),
            flags_label(&row.flags),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// `asset,nll_train,nll_test`
pub fn write_asset_nll_csv<W: Write>(table: &StepwiseTable, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["asset", "nll_train", "nll_test"])?;
    for a in &table.assets {
        w.write_record([a.ticker.clone(), opt_num(a.nll_train), opt_num(a.nll_test)])?;
    }
    w.flush()?;
    Ok(())
}

/// Version written into every structured document.
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize)]
struct EnvelopeOut<'a, T> {
    format_version: u32,
    kind: &'a str,
    body: &'a T,
}

#[derive(Deserialize)]
struct EnvelopeIn<T> {
    kind: String,
    body: T,
}

/// Encodes one document as a single JSON line.
pub fn encode_document<T: Serialize>(kind: &str, body: &T) -> Result<String> {
    Ok(serde_json::to_string(&EnvelopeOut { format_version: FORMAT_VERSION, kind, body })?)
}

pub fn decode_document<T: DeserializeOwned>(kind: &str, line: &str) -> Result<T> {
    let raw: serde_json::Value = serde_json::from_str(line)?;
    let version = raw
        .get("format_version")
        .and_then(|v| v.as_u64())
        .ok_or_else(|| Error::Data("document lacks a format_version field".into()))?;
    if version > u64::from(FORMAT_VERSION) {
        return Err(Error::FormatVersion { found: version as u32, supported: FORMAT_VERSION });
    }
    let env: EnvelopeIn<T> = serde_json::from_value(raw)?;
    if env.kind != kind {
        return Err(Error::Data(format!("expected a '{kind}' document, found '{}'", env.kind)));
    }
    Ok(env.body)
}

pub const RESULT_KIND: &str = "fit-result";

pub fn save_result(r: &FitResult, path: impl AsRef<Path>) -> Result<()> {
    save_results(std::slice::from_ref(r), path)
}

pub fn save_results(rs: &[FitResult], path: impl AsRef<Path>) -> Result<()> {
    let mut f = File::create(path)?;
    for r in rs {
        writeln!(f, "{}", encode_document(RESULT_KIND, r)?)?;
    }
    Ok(())
}

pub fn load_result(path: impl AsRef<Path>) -> Result<FitResult> {
    load_results(path)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::Data("result file is empty".into()))
}

pub fn load_results(path: impl AsRef<Path>) -> Result<Vec<FitResult>> {
    let f = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(decode_document(RESULT_KIND, &line)?);
    }
    Ok(out)
}
