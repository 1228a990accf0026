//! CSV reports and overthinking summaries.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::io::IoError;
use crate::model::Corpus;
use crate::oracle::{
    degradation_rate, first_best_histogram, overthinking_fraction, profile_all, OracleCurve,
    OracleError,
};
use crate::sweep::TradeoffRecord;

pub const SWEEP_HEADER: [&str; 7] = [
    "strategy",
    "tau",
    "rho",
    "saved_fraction",
    "wer",
    "mean_exit_layer",
    "overthinking_rate",
];
pub const ORACLE_HEADER: [&str; 4] = ["budget", "saved_fraction", "total_errors", "wer"];
pub const SWEEP_FILE: &str = "sweep.csv";
pub const ORACLE_FILE: &str = "oracle.csv";

fn fmt_ratio(v: f64) -> String {
    format!("{v:.6}")
}

fn record_order(a: &TradeoffRecord, b: &TradeoffRecord) -> Ordering {
    let opt_f = |x: Option<f64>, y: Option<f64>| match (x, y) {
        (Some(x), Some(y)) => x.total_cmp(&y),
        (x, y) => x.is_some().cmp(&y.is_some()),
    };
    a.strategy
        .cmp(&b.strategy)
        .then_with(|| opt_f(a.tau, b.tau))
        .then_with(|| a.rho.cmp(&b.rho))
        .then_with(|| a.mean_exit_layer.total_cmp(&b.mean_exit_layer))
}

/// Records sorted by strategy name, then `tau`, then `rho`.
pub fn sorted_records(records: &[TradeoffRecord]) -> Vec<&TradeoffRecord> {
    let mut out: Vec<&TradeoffRecord> = records.iter().collect();
    out.sort_by(|a, b| record_order(a, b));
    out
}

pub fn write_sweep_csv<W: Write>(records: &[TradeoffRecord], writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(SWEEP_HEADER)?;
    for r in sorted_records(records) {
        w.write_record([
            r.strategy.clone(),
            r.tau.map(|t| t.to_string()).unwrap_or_default(),
            r.rho.map(|p| p.to_string()).unwrap_or_default(),
            fmt_ratio(r.saved_fraction),
            fmt_ratio(r.wer),
            fmt_ratio(r.mean_exit_layer),
            fmt_ratio(r.overthinking_rate),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_oracle_csv<W: Write>(curve: &OracleCurve, writer: W) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(ORACLE_HEADER)?;
    for p in &curve.points {
        w.write_record([
            p.budget.to_string(),
            fmt_ratio(p.saved_fraction),
            p.min_total_errors.to_string(),
            fmt_ratio(p.corpus_wer),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReportFiles {
    pub sweep: PathBuf,
    pub oracle: PathBuf,
}

fn csv_to_io(path: &Path) -> impl FnOnce(csv::Error) -> IoError + '_ {
    move |e| IoError::Io {
        path: path.to_path_buf(),
        source: e.into(),
    }
}

/// Writes `sweep.csv` and `oracle.csv` into `dir`, creating it if needed.
pub fn write_report(records: &[TradeoffRecord], curve: &OracleCurve, dir: &Path) -> Result<ReportFiles, IoError> {
    fs::create_dir_all(dir).map_err(|source| IoError::Io {
        path: dir.to_path_buf(),
        source,
    })?;
    let files = ReportFiles {
        sweep: dir.join(SWEEP_FILE),
        oracle: dir.join(ORACLE_FILE),
    };
    let open = |p: &Path| {
        fs::File::create(p).map_err(|source| IoError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    write_sweep_csv(records, open(&files.sweep)?).map_err(csv_to_io(&files.sweep))?;
    write_oracle_csv(curve, open(&files.oracle)?).map_err(csv_to_io(&files.oracle))?;
    Ok(files)
}

/// Corpus-level overthinking statistics.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OverthinkingSummary {
    pub n_utterances: usize,
    pub n_layers: usize,
    pub i_min: usize,
    /// Share of utterances where some layer before `N` is no worse than `N`.
    pub overthinking_fraction: f64,
    /// `None` when no utterance reaches its best prediction before `N`.
    pub degradation_rate: Option<f64>,
    /// Utterances per layer at which the best prediction first appears.
    pub first_best_histogram: BTreeMap<usize, usize>,
}

pub fn summarize_overthinking(corpus: &Corpus, length_filter: usize) -> Result<OverthinkingSummary, OracleError> {
    let kept = corpus.filter_by_length(length_filter);
    if kept.is_empty() {
        return Err(OracleError::EmptyAfterFilter(length_filter));
    }
    let profiles = profile_all(kept)?;
    Ok(OverthinkingSummary {
        n_utterances: profiles.len(),
        n_layers: corpus.n_layers(),
        i_min: corpus.i_min(),
        overthinking_fraction: overthinking_fraction(&profiles).unwrap_or(0.0),
        degradation_rate: degradation_rate(&profiles),
        first_best_histogram: first_best_histogram(&profiles),
    })
}

impl OverthinkingSummary {
    /// Plain-text rendering with a percentage bar per layer.
    pub fn render(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "utterances: {}  layers: {}..={}\n",
            self.n_utterances, self.i_min, self.n_layers
        ));
        s.push_str(&format!(
            "overthinking: {:.2}%\n",
            100.0 * self.overthinking_fraction
        ));
        match self.degradation_rate {
            Some(r) => s.push_str(&format!("degraded at last layer: {:.2}%\n", 100.0 * r)),
            None => s.push_str("degraded at last layer: undefined (no early best)\n"),
        }
        s.push_str("first-best layer histogram:\n");
        let total = self.n_utterances.max(1) as f64;
        for (layer, count) in &self.first_best_histogram {
            let pct = 100.0 * *count as f64 / total;
            s.push_str(&format!(
                "  {layer:>3} {count:>6} {pct:>6.2}% {}\n",
                "#".repeat((pct / 2.0).round() as usize)
            ));
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{dp_bound_from_profiles, LayerErrorProfile};

    fn rec(strategy: &str, tau: Option<f64>, rho: Option<usize>, mean: f64) -> TradeoffRecord {
        TradeoffRecord {
            strategy: strategy.into(),
            tau,
            rho,
            saved_fraction: 0.125,
            wer: 1.0 / 3.0,
            mean_exit_layer: mean,
            overthinking_rate: 0.0,
        }
    }

    #[test]
    fn empty_records_give_header_only() {
        let mut buf = Vec::new();
        write_sweep_csv(&[], &mut buf).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "strategy,tau,rho,saved_fraction,wer,mean_exit_layer,overthinking_rate\n"
        );
    }

    #[test]
    fn rows_are_sorted_and_formatted() {
        let records = vec![
            rec("patience_lev", Some(0.1), Some(2), 20.0),
            rec("fixed_layer", None, None, 12.0),
            rec("patience_lev", Some(0.05), Some(3), 20.0),
            rec("patience_lev", Some(0.05), Some(1), 20.0),
            rec("fixed_layer", None, None, 11.0),
        ];
        let mut buf = Vec::new();
        write_sweep_csv(&records, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 6);
        assert_eq!(lines[1], "fixed_layer,,,0.125000,0.333333,11.000000,0.000000");
        assert_eq!(lines[2], "fixed_layer,,,0.125000,0.333333,12.000000,0.000000");
        assert!(lines[3].starts_with("patience_lev,0.05,1,"));
        assert!(lines[4].starts_with("patience_lev,0.05,3,"));
        assert!(lines[5].starts_with("patience_lev,0.1,2,"));
    }

    #[test]
    fn oracle_csv_and_files() {
        let curve = dp_bound_from_profiles(&[LayerErrorProfile::new("u", 4, 1, vec![1, 0])]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("nested");
        let files = write_report(&[rec("x", Some(0.5), None, 2.0)], &curve, &out).unwrap();
        assert_eq!(
            fs::read_to_string(files.oracle).unwrap(),
            "budget,saved_fraction,total_errors,wer\n0,0.000000,0,0.000000\n1,0.500000,1,0.250000\n"
        );
        assert_eq!(fs::read_to_string(files.sweep).unwrap().lines().count(), 2);
    }
}
