//! Hyperparameter sweeps over exit strategies.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::criteria::{CeDirection, CriteriaError, StrategyConfig, StrategyKind, TraceSignals};
use crate::io::{parse_config, resolve_relative, IoError};
use crate::model::{Corpus, Vocabulary};
use crate::oracle::{dp_bound_from_profiles, profile_all, LayerErrorProfile, OracleCurve, OracleError};

/// Default minimum reference length (exclusive) for sweep and oracle reports.
pub const DEFAULT_LENGTH_FILTER: usize = 10;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("strategy {strategy}: {message}")]
    InvalidGrid { strategy: String, message: String },
    #[error("sweep has no strategies")]
    NoStrategies,
    #[error("no utterances left after keeping references longer than {0} words")]
    EmptyAfterFilter(usize),
    #[error("strategy {strategy}: {source}")]
    Config {
        strategy: String,
        #[source]
        source: CriteriaError,
    },
    #[error("utterance {utterance}: {source}")]
    Criteria {
        utterance: String,
        #[source]
        source: CriteriaError,
    },
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Io(#[from] IoError),
}

/// One strategy template plus the grid of `tau` and `rho` values to try.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StrategyGrid {
    pub kind: StrategyKind,
    /// Name used in reports; defaults to the kind name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tau: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rho: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_layer: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<StrategyConfig>,
    #[serde(default)]
    pub ce_direction: CeDirection,
}

impl StrategyGrid {
    pub fn new(kind: StrategyKind, tau: Vec<f64>, rho: Vec<usize>) -> Self {
        Self {
            kind,
            name: None,
            tau,
            rho,
            fixed_layer: None,
            children: Vec::new(),
            ce_direction: CeDirection::default(),
        }
    }

    pub fn name(&self) -> &str {
        self.name.as_deref().unwrap_or(self.kind.name())
    }

    fn invalid(&self, message: impl Into<String>) -> SweepError {
        SweepError::InvalidGrid {
            strategy: self.name().to_string(),
            message: message.into(),
        }
    }

    /// Expands the grid into concrete configurations, `tau`-major.
    pub fn points(&self) -> Result<Vec<StrategyConfig>, SweepError> {
        let kind = self.kind;
        if kind.needs_tau() && self.tau.is_empty() {
            return Err(self.invalid("tau grid is empty"));
        }
        if !kind.needs_tau() && !self.tau.is_empty() {
            return Err(self.invalid("tau does not apply"));
        }
        if kind.needs_rho() && self.rho.is_empty() {
            return Err(self.invalid("rho grid is empty"));
        }
        if !kind.needs_rho() && !self.rho.is_empty() {
            return Err(self.invalid("rho does not apply"));
        }
        let base = StrategyConfig {
            kind,
            tau: None,
            rho: None,
            fixed_layer: self.fixed_layer,
            children: self.children.clone(),
            ce_direction: self.ce_direction,
        };
        Ok(match kind {
            StrategyKind::FixedLayer | StrategyKind::CombinedMax => vec![base],
            _ if kind.needs_rho() => self
                .tau
                .iter()
                .flat_map(|&t| {
                    self.rho.iter().map({
                        let base = &base;
                        move |&r| StrategyConfig {
                            tau: Some(t),
                            rho: Some(r),
                            ..base.clone()
                        }
                    })
                })
                .collect(),
            _ => self
                .tau
                .iter()
                .map(|&t| StrategyConfig {
                    tau: Some(t),
                    ..base.clone()
                })
                .collect(),
        })
    }
}

/// `numerators[k] / denominator`, computed so each value is the nearest
/// double to its decimal literal.
fn decimal_grid(numerators: impl IntoIterator<Item = u32>, denominator: u32) -> Vec<f64> {
    numerators
        .into_iter()
        .map(|n| f64::from(n) / f64::from(denominator))
        .collect()
}

/// The five reference grids: entropy and max-prob confidence, patience with
/// cross-entropy and Levenshtein distances, and overlang.
pub fn default_grids() -> Vec<StrategyGrid> {
    let rhos: Vec<usize> = (1..=5).collect();
    vec![
        StrategyGrid::new(
            StrategyKind::ConfidenceEntropy,
            decimal_grid((0..9).map(|k| 20 + 5 * k), 10_000),
            vec![],
        ),
        StrategyGrid::new(
            StrategyKind::ConfidenceMaxprob,
            decimal_grid((0..9).map(|k| 930 + 5 * k), 1000),
            vec![],
        ),
        StrategyGrid::new(
            StrategyKind::PatienceCe,
            decimal_grid(1..=5, 10),
            rhos.clone(),
        ),
        StrategyGrid::new(
            StrategyKind::PatienceLev,
            decimal_grid([5, 7, 10, 15, 20], 100),
            rhos,
        ),
        StrategyGrid::new(
            StrategyKind::Overlang,
            decimal_grid((0..15).map(|k| 600 + 25 * k), 1000),
            vec![2],
        ),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub strategies: Vec<StrategyGrid>,
    #[serde(default = "default_length_filter")]
    pub length_filter: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab_path: Option<PathBuf>,
    #[serde(default = "default_output")]
    pub output_path: PathBuf,
}

fn default_length_filter() -> usize {
    DEFAULT_LENGTH_FILTER
}

fn default_output() -> PathBuf {
    PathBuf::from("report")
}

impl SweepSpec {
    pub fn with_default_grids(vocab_path: Option<PathBuf>, output_path: PathBuf) -> Self {
        Self {
            strategies: default_grids(),
            length_filter: DEFAULT_LENGTH_FILTER,
            vocab_path,
            output_path,
        }
    }

    /// Reads a TOML (or `.json`) spec; relative paths resolve against the
    /// spec file's directory.
    pub fn load(path: &Path) -> Result<Self, IoError> {
        let mut spec: SweepSpec = parse_config(path)?;
        spec.vocab_path = spec.vocab_path.map(|p| resolve_relative(path, &p));
        spec.output_path = resolve_relative(path, &spec.output_path);
        Ok(spec)
    }

    pub fn points(&self) -> Result<Vec<(String, StrategyConfig)>, SweepError> {
        if self.strategies.is_empty() {
            return Err(SweepError::NoStrategies);
        }
        let mut out = Vec::new();
        for grid in &self.strategies {
            out.extend(grid.points()?.into_iter().map(|c| (grid.name().to_string(), c)));
        }
        Ok(out)
    }
}

/// Aggregate outcome of one strategy point over the filtered corpus.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TradeoffRecord {
    pub strategy: String,
    pub tau: Option<f64>,
    pub rho: Option<usize>,
    pub saved_fraction: f64,
    pub wer: f64,
    pub mean_exit_layer: f64,
    pub overthinking_rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutput {
    /// Strategy points followed by one fixed-layer row per exit layer.
    pub records: Vec<TradeoffRecord>,
    pub oracle: OracleCurve,
    pub n_utterances: usize,
}

impl SweepOutput {
    pub fn fixed_layer_records(&self) -> impl Iterator<Item = &TradeoffRecord> {
        self.records.iter().filter(|r| r.strategy == StrategyKind::FixedLayer.name() && r.tau.is_none())
    }
}

fn aggregate(
    strategy: &str,
    cfg: Option<&StrategyConfig>,
    profiles: &[LayerErrorProfile],
    exits: impl Iterator<Item = usize>,
) -> TradeoffRecord {
    let n_layers = profiles[0].n_layers();
    let (mut skipped, mut errors, mut exit_sum, mut overthink) = (0usize, 0usize, 0usize, 0usize);
    for (p, l) in profiles.iter().zip(exits) {
        skipped += n_layers - l;
        exit_sum += l;
        errors += p.errors_at(l).expect("exit layer inside profile range");
        overthink += usize::from(p.overthinks_at(l));
    }
    let m = profiles.len();
    let words: usize = profiles.iter().map(|p| p.ref_len).sum();
    TradeoffRecord {
        strategy: strategy.to_string(),
        tau: cfg.and_then(|c| c.tau),
        rho: cfg.and_then(|c| c.rho),
        saved_fraction: skipped as f64 / (m * n_layers) as f64,
        wer: errors as f64 / words.max(1) as f64,
        mean_exit_layer: exit_sum as f64 / m as f64,
        overthinking_rate: overthink as f64 / m as f64,
    }
}

/// Evaluates every grid point on the corpus, plus the fixed-layer baselines
/// and the oracle bound.
pub fn run_sweep(
    corpus: &Corpus,
    spec: &SweepSpec,
    vocab: Option<&Vocabulary>,
) -> Result<SweepOutput, SweepError> {
    let points = spec.points()?;
    for (name, cfg) in &points {
        cfg.validate(corpus.n_layers(), corpus.i_min())
            .map_err(|source| SweepError::Config {
                strategy: name.clone(),
                source,
            })?;
    }
    let kept = corpus.filter_by_length(spec.length_filter);
    if kept.is_empty() {
        return Err(SweepError::EmptyAfterFilter(spec.length_filter));
    }
    let profiles = profile_all(kept.par_iter().copied())?;

    // exits[u][k]: exit layer of utterance u under point k
    let exits: Vec<Vec<usize>> = kept
        .par_iter()
        .map(|t| {
            let signals = TraceSignals::new(t, vocab);
            points
                .iter()
                .map(|(_, cfg)| signals.exit_layer(cfg))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|source| SweepError::Criteria {
                    utterance: t.id.clone(),
                    source,
                })
        })
        .collect::<Result<_, _>>()?;

    let mut records: Vec<TradeoffRecord> = points
        .iter()
        .enumerate()
        .map(|(k, (name, cfg))| aggregate(name, Some(cfg), &profiles, exits.iter().map(|e| e[k])))
        .collect();
    for layer in corpus.i_min()..=corpus.n_layers() {
        records.push(aggregate(
            StrategyKind::FixedLayer.name(),
            None,
            &profiles,
            std::iter::repeat_n(layer, profiles.len()),
        ));
    }

    Ok(SweepOutput {
        records,
        oracle: dp_bound_from_profiles(&profiles)?,
        n_utterances: profiles.len(),
    })
}

/// WER of the fixed-layer baseline at a fractional mean exit layer, by linear
/// interpolation between neighbouring integer layers.
pub fn fixed_layer_wer_at(fixed: &[&TradeoffRecord], mean_exit_layer: f64) -> Option<f64> {
    let mut pts: Vec<(f64, f64)> = fixed.iter().map(|r| (r.mean_exit_layer, r.wer)).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let (first, last) = (pts.first()?, pts.last()?);
    if mean_exit_layer < first.0 || mean_exit_layer > last.0 {
        return None;
    }
    for w in pts.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if mean_exit_layer >= x0 && mean_exit_layer <= x1 {
            let t = if x1 > x0 { (mean_exit_layer - x0) / (x1 - x0) } else { 0.0 };
            return Some(y0 + t * (y1 - y0));
        }
    }
    Some(first.1)
}
