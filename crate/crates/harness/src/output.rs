//! CSV writers for per-trial rows and sweep summaries.

use std::io::Write;

use blind_mimo::metrics::format_db;

use crate::experiment::{Method, TrialRow};

pub const TRIAL_HEADER: [&str; 10] = [
    "trial",
    "seed",
    "snr_db",
    "cbr",
    "nmse_db",
    "source_mse",
    "residual",
    "method",
    "wall_ms",
    "error",
];

pub const SUMMARY_HEADER: [&str; 12] = [
    "value",
    "snr_db",
    "method",
    "trials",
    "failures",
    "cbr",
    "nmse_db_mean",
    "nmse_db_median",
    "source_mse_mean",
    "source_mse_median",
    "residual_mean",
    "residual_median",
];

/// Shortest round-trip text; `-inf` marks exact recovery, `NaN` a missing value.
pub fn fmt_f64(v: f64) -> String {
    format_db(v)
}

fn trial_record(r: &TrialRow) -> Vec<String> {
    vec![
        r.trial.to_string(),
        r.seed.to_string(),
        fmt_f64(r.snr_db),
        fmt_f64(r.cbr),
        fmt_f64(r.nmse_db),
        fmt_f64(r.source_mse),
        fmt_f64(r.residual),
        r.method.to_string(),
        fmt_f64(r.wall_ms),
        r.error.clone().unwrap_or_default(),
    ]
}

/// Writes rows under [`TRIAL_HEADER`], optionally prefixed by a `value` column
/// holding the sweep value each row belongs to.
pub fn write_trials<W: Write>(w: W, rows: &[(Option<&str>, &TrialRow)]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let swept = rows.first().is_some_and(|(v, _)| v.is_some());
    if swept {
        out.write_record(std::iter::once("value").chain(TRIAL_HEADER))?;
    } else {
        out.write_record(TRIAL_HEADER)?;
    }
    for (value, row) in rows {
        let mut rec = trial_record(row);
        if let Some(v) = value {
            rec.insert(0, v.to_string());
        }
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_rows<W: Write>(w: W, rows: &[TrialRow]) -> csv::Result<()> {
    let tagged: Vec<(Option<&str>, &TrialRow)> = rows.iter().map(|r| (None, r)).collect();
    write_trials(w, &tagged)
}

/// Aggregate over the trials of one (value, SNR, method) cell.
#[derive(Debug, Clone, PartialEq)]
pub struct SummaryRow {
    pub value: String,
    pub snr_db: f64,
    pub method: Method,
    pub trials: usize,
    pub failures: usize,
    pub cbr: f64,
    pub nmse_db_mean: f64,
    pub nmse_db_median: f64,
    pub source_mse_mean: f64,
    pub source_mse_median: f64,
    pub residual_mean: f64,
    pub residual_median: f64,
}

/// Mean of the non-NaN entries; NaN when there are none.
pub fn mean(values: &[f64]) -> f64 {
    let kept: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    if kept.is_empty() {
        return f64::NAN;
    }
    kept.iter().sum::<f64>() / kept.len() as f64
}

/// Median of the non-NaN entries (midpoint average for even counts).
pub fn median(values: &[f64]) -> f64 {
    let mut kept: Vec<f64> = values.iter().copied().filter(|v| !v.is_nan()).collect();
    if kept.is_empty() {
        return f64::NAN;
    }
    kept.sort_by(f64::total_cmp);
    let m = kept.len() / 2;
    if kept.len() % 2 == 1 {
        kept[m]
    } else {
        0.5 * (kept[m - 1] + kept[m])
    }
}

/// One summary row per (SNR, method), in first-appearance order.
pub fn summarise(value: &str, rows: &[TrialRow]) -> Vec<SummaryRow> {
    let mut keys: Vec<(f64, Method)> = Vec::new();
    for r in rows {
        if !keys
            .iter()
            .any(|&(s, m)| s.to_bits() == r.snr_db.to_bits() && m == r.method)
        {
            keys.push((r.snr_db, r.method));
        }
    }
    keys.into_iter()
        .map(|(snr, method)| {
            let cell: Vec<&TrialRow> = rows
                .iter()
                .filter(|r| r.snr_db.to_bits() == snr.to_bits() && r.method == method)
                .collect();
            let ok: Vec<&&TrialRow> = cell.iter().filter(|r| r.error.is_none()).collect();
            let col = |f: fn(&TrialRow) -> f64| -> Vec<f64> { ok.iter().map(|r| f(r)).collect() };
            let nmse = col(|r| r.nmse_db);
            let mse = col(|r| r.source_mse);
            let res = col(|r| r.residual);
            SummaryRow {
                value: value.to_string(),
                snr_db: snr,
                method,
                trials: cell.len(),
                failures: cell.len() - ok.len(),
                cbr: cell.first().map_or(f64::NAN, |r| r.cbr),
                nmse_db_mean: mean(&nmse),
                nmse_db_median: median(&nmse),
                source_mse_mean: mean(&mse),
                source_mse_median: median(&mse),
                residual_mean: mean(&res),
                residual_median: median(&res),
            }
        })
        .collect()
}

pub fn write_summary<W: Write>(w: W, rows: &[SummaryRow]) -> csv::Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(SUMMARY_HEADER)?;
    for s in rows {
        out.write_record([
            s.value.clone(),
            fmt_f64(s.snr_db),
            s.method.to_string(),
            s.trials.to_string(),
            s.failures.to_string(),
            fmt_f64(s.cbr),
            fmt_f64(s.nmse_db_mean),
            fmt_f64(s.nmse_db_median),
            fmt_f64(s.source_mse_mean),
            fmt_f64(s.source_mse_median),
            fmt_f64(s.residual_mean),
            fmt_f64(s.residual_median),
        ])?;
    }
    out.flush()?;
    Ok(())
}
