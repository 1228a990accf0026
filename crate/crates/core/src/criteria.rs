//! Exit scores and exit criteria.
//!
//! Every strategy is reduced to a per-layer boolean indicator over the exit
//! range `i_min..=N`; the exit layer is the first layer whose indicator
//! fires, or `N` when none does. Combining strategies takes the logical OR
//! (the max of the indicators) layer by layer.
//!
//! Scores that several strategies share (entropy, max-prob, layer-to-layer
//! distances, in-vocabulary ratios) are computed at most once per trace by
//! [`TraceSignals`] so that a grid sweep does not redo them per grid point.

use std::fmt;
use std::str::FromStr;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::metrics::char_levenshtein;
use crate::model::{words, LayerOutput, ModelError, PosteriorMatrix, UtteranceTrace, Vocabulary};

/// Added inside logarithms of cross-entropies.
pub const LOG_EPSILON: f64 = 1e-12;
/// Two in-vocabulary ratios closer than this count as equal.
pub const RATIO_EQ_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum CriteriaError {
    #[error("layer {layer} has no posteriors")]
    MissingPosteriors { layer: usize },
    #[error("posterior shapes differ: {curr_frames}x{curr_classes} vs {prev_frames}x{prev_classes}")]
    ShapeMismatch {
        curr_frames: usize,
        curr_classes: usize,
        prev_frames: usize,
        prev_classes: usize,
    },
    #[error("{kind} requires `{name}`")]
    MissingHyperparameter { kind: StrategyKind, name: &'static str },
    #[error("{kind}: invalid {name}: {reason}")]
    InvalidHyperparameter {
        kind: StrategyKind,
        name: &'static str,
        reason: String,
    },
    #[error("fixed layer {layer} outside exit range {i_min}..={n_layers}")]
    FixedLayerOutOfRange {
        layer: usize,
        i_min: usize,
        n_layers: usize,
    },
    #[error("combined strategy needs at least 2 children, got {0}")]
    TooFewChildren(usize),
    #[error("overlang needs a vocabulary")]
    MissingVocabulary,
    #[error("expected one of {expected:?}, got {found}")]
    WrongKind {
        expected: &'static [StrategyKind],
        found: StrategyKind,
    },
    #[error("trace has no exit layers")]
    EmptyTrace,
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    ConfidenceEntropy,
    ConfidenceMaxprob,
    PatienceCe,
    PatienceLev,
    Overlang,
    FixedLayer,
    CombinedMax,
}

impl StrategyKind {
    pub const ALL: [StrategyKind; 7] = [
        StrategyKind::ConfidenceEntropy,
        StrategyKind::ConfidenceMaxprob,
        StrategyKind::PatienceCe,
        StrategyKind::PatienceLev,
        StrategyKind::Overlang,
        StrategyKind::FixedLayer,
        StrategyKind::CombinedMax,
    ];

    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::ConfidenceEntropy => "confidence_entropy",
            StrategyKind::ConfidenceMaxprob => "confidence_maxprob",
            StrategyKind::PatienceCe => "patience_ce",
            StrategyKind::PatienceLev => "patience_lev",
            StrategyKind::Overlang => "overlang",
            StrategyKind::FixedLayer => "fixed_layer",
            StrategyKind::CombinedMax => "combined_max",
        }
    }

    pub fn needs_tau(self) -> bool {
        !matches!(self, StrategyKind::FixedLayer | StrategyKind::CombinedMax)
    }

    pub fn needs_rho(self) -> bool {
        matches!(
            self,
            StrategyKind::PatienceCe | StrategyKind::PatienceLev | StrategyKind::Overlang
        )
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| format!("unknown strategy kind {s:?}"))
    }
}

/// Which distribution weights the cross-entropy between consecutive layers.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CeDirection {
    /// `-sum prev * log(curr)`
    #[default]
    PrevTarget,
    /// `-sum curr * log(prev)`
    CurrTarget,
}

/// A fully parameterized exit criterion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rho: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_layer: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<StrategyConfig>,
    #[serde(default, skip_serializing_if = "is_default_direction")]
    pub ce_direction: CeDirection,
}

fn is_default_direction(d: &CeDirection) -> bool {
    *d == CeDirection::default()
}

impl StrategyConfig {
    fn bare(kind: StrategyKind) -> Self {
        Self {
            kind,
            tau: None,
            rho: None,
            fixed_layer: None,
            children: Vec::new(),
            ce_direction: CeDirection::default(),
        }
    }

    pub fn entropy(tau: f64) -> Self {
        Self {
            tau: Some(tau),
            ..Self::bare(StrategyKind::ConfidenceEntropy)
        }
    }

    pub fn maxprob(tau: f64) -> Self {
        Self {
            tau: Some(tau),
            ..Self::bare(StrategyKind::ConfidenceMaxprob)
        }
    }

    pub fn patience_ce(tau: f64, rho: usize) -> Self {
        Self {
            tau: Some(tau),
            rho: Some(rho),
            ..Self::bare(StrategyKind::PatienceCe)
        }
    }

    pub fn patience_lev(tau: f64, rho: usize) -> Self {
        Self {
            tau: Some(tau),
            rho: Some(rho),
            ..Self::bare(StrategyKind::PatienceLev)
        }
    }

    pub fn overlang(tau: f64, rho: usize) -> Self {
        Self {
            tau: Some(tau),
            rho: Some(rho),
            ..Self::bare(StrategyKind::Overlang)
        }
    }

    pub fn fixed(layer: usize) -> Self {
        Self {
            fixed_layer: Some(layer),
            ..Self::bare(StrategyKind::FixedLayer)
        }
    }

    pub fn combined(children: Vec<StrategyConfig>) -> Self {
        Self {
            children,
            ..Self::bare(StrategyKind::CombinedMax)
        }
    }

    pub fn with_ce_direction(mut self, direction: CeDirection) -> Self {
        self.ce_direction = direction;
        self
    }

    fn tau(&self) -> Result<f64, CriteriaError> {
        self.tau.ok_or(CriteriaError::MissingHyperparameter {
            kind: self.kind,
            name: "tau",
        })
    }

    fn rho(&self) -> Result<usize, CriteriaError> {
        self.rho.ok_or(CriteriaError::MissingHyperparameter {
            kind: self.kind,
            name: "rho",
        })
    }

    /// Checks hyperparameters against a model geometry.
    pub fn validate(&self, n_layers: usize, i_min: usize) -> Result<(), CriteriaError> {
        if self.kind.needs_tau() {
            let tau = self.tau()?;
            if !tau.is_finite() {
                return Err(CriteriaError::InvalidHyperparameter {
                    kind: self.kind,
                    name: "tau",
                    reason: format!("{tau} is not finite"),
                });
            }
        }
        if self.kind.needs_rho() && self.rho()? < 1 {
            return Err(CriteriaError::InvalidHyperparameter {
                kind: self.kind,
                name: "rho",
                reason: "patience must be >= 1".into(),
            });
        }
        match self.kind {
            StrategyKind::FixedLayer => {
                let layer = self.fixed_layer.ok_or(CriteriaError::MissingHyperparameter {
                    kind: self.kind,
                    name: "fixed_layer",
                })?;
                if layer < i_min || layer > n_layers {
                    return Err(CriteriaError::FixedLayerOutOfRange {
                        layer,
                        i_min,
                        n_layers,
                    });
                }
            }
            StrategyKind::CombinedMax => {
                if self.children.len() < 2 {
                    return Err(CriteriaError::TooFewChildren(self.children.len()));
                }
                for child in &self.children {
                    child.validate(n_layers, i_min)?;
                }
            }
            _ => {}
        }
        Ok(())
    }

    /// Compact human-readable form, e.g. `overlang(tau=0.8,rho=2)`.
    pub fn label(&self) -> String {
        match self.kind {
            StrategyKind::FixedLayer => match self.fixed_layer {
                Some(l) => format!("fixed_layer(layer={l})"),
                None => "fixed_layer".into(),
            },
            StrategyKind::CombinedMax => {
                let inner: Vec<String> = self.children.iter().map(Self::label).collect();
                format!("combined_max({})", inner.join("+"))
            }
            kind => {
                let mut parts = Vec::new();
                if let Some(t) = self.tau {
                    parts.push(format!("tau={t}"));
                }
                if let Some(r) = self.rho {
                    parts.push(format!("rho={r}"));
                }
                if kind == StrategyKind::PatienceCe && self.ce_direction != CeDirection::default() {
                    parts.push("ce=curr_target".into());
                }
                format!("{}({})", kind.name(), parts.join(","))
            }
        }
    }
}

/// Parses `kind[:key=value,...]` with keys `tau`, `rho`, `layer` and
/// `ce` (`prev_target` or `curr_target`), e.g. `patience_ce:tau=0.1,rho=3`.
/// A string starting with `{` is read as JSON.
impl FromStr for StrategyConfig {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        if s.starts_with('{') {
            return serde_json::from_str(s).map_err(|e| e.to_string());
        }
        let (kind, params) = s.split_once(':').unwrap_or((s, ""));
        let mut cfg = Self::bare(kind.trim().parse()?);
        for pair in params.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got {pair:?}"))?;
            let value = value.trim();
            let bad = |e: &dyn fmt::Display| format!("{key}: {e}");
            match key.trim() {
                "tau" => cfg.tau = Some(value.parse().map_err(|e| bad(&e))?),
                "rho" => cfg.rho = Some(value.parse().map_err(|e| bad(&e))?),
                "layer" => cfg.fixed_layer = Some(value.parse().map_err(|e| bad(&e))?),
                "ce" => {
                    cfg.ce_direction = match value {
                        "prev_target" => CeDirection::PrevTarget,
                        "curr_target" => CeDirection::CurrTarget,
                        other => return Err(format!("unknown ce direction {other:?}")),
                    }
                }
                other => return Err(format!("unknown parameter {other:?}")),
            }
        }
        Ok(cfg)
    }
}

/// The layer an utterance exits at and what it outputs there.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExitDecision {
    pub utterance_id: String,
    pub exit_layer: usize,
    pub hypothesis: String,
    pub saved_fraction: f64,
}

impl ExitDecision {
    pub fn new(utterance_id: impl Into<String>, exit_layer: usize, n_layers: usize, hypothesis: String) -> Self {
        Self {
            utterance_id: utterance_id.into(),
            exit_layer,
            hypothesis,
            saved_fraction: saved_fraction(exit_layer, n_layers),
        }
    }
}

/// Proportion of layers skipped when exiting at `exit_layer`.
pub fn saved_fraction(exit_layer: usize, n_layers: usize) -> f64 {
    n_layers.saturating_sub(exit_layer) as f64 / n_layers as f64
}

fn require_posteriors(layer: &LayerOutput) -> Result<&PosteriorMatrix, CriteriaError> {
    layer
        .posteriors
        .as_ref()
        .ok_or(CriteriaError::MissingPosteriors { layer: layer.index })
}

/// Entropy averaged over all `T * C` cells, natural log, `0 log 0 = 0`.
pub fn entropy_of(p: &PosteriorMatrix) -> f64 {
    let cells = (p.frames() * p.classes()) as f64;
    let sum: f64 = p
        .as_slice()
        .iter()
        .filter(|&&f| f > 0.0)
        .map(|&f| f * f.ln())
        .sum();
    -sum / cells
}

/// Mean over frames of the largest token probability.
pub fn maxprob_of(p: &PosteriorMatrix) -> f64 {
    let sum: f64 = p
        .rows()
        .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
        .sum();
    sum / p.frames() as f64
}

pub fn entropy_score(layer: &LayerOutput) -> Result<f64, CriteriaError> {
    require_posteriors(layer).map(entropy_of)
}

pub fn maxprob_score(layer: &LayerOutput) -> Result<f64, CriteriaError> {
    require_posteriors(layer).map(maxprob_of)
}

/// Frame-averaged cross-entropy with the previous layer as target.
pub fn ce_distance(curr: &PosteriorMatrix, prev: &PosteriorMatrix) -> Result<f64, CriteriaError> {
    ce_distance_directed(curr, prev, CeDirection::PrevTarget)
}

pub fn ce_distance_directed(
    curr: &PosteriorMatrix,
    prev: &PosteriorMatrix,
    direction: CeDirection,
) -> Result<f64, CriteriaError> {
    if curr.frames() != prev.frames() || curr.classes() != prev.classes() {
        return Err(CriteriaError::ShapeMismatch {
            curr_frames: curr.frames(),
            curr_classes: curr.classes(),
            prev_frames: prev.frames(),
            prev_classes: prev.classes(),
        });
    }
    let (target, inside) = match direction {
        CeDirection::PrevTarget => (prev, curr),
        CeDirection::CurrTarget => (curr, prev),
    };
    let sum: f64 = target
        .as_slice()
        .iter()
        .zip(inside.as_slice())
        .filter(|(&w, _)| w != 0.0)
        .map(|(&w, &q)| w * (q + LOG_EPSILON).ln())
        .sum();
    Ok(-sum / curr.frames() as f64)
}

/// Character edit distance normalized by the longer string.
pub fn lev_distance_norm(hyp_curr: &str, hyp_prev: &str) -> f64 {
    let longest = hyp_curr.chars().count().max(hyp_prev.chars().count()).max(1);
    char_levenshtein(hyp_curr, hyp_prev) as f64 / longest as f64
}

/// Share of hypothesis words found in the vocabulary; 0 for an empty hypothesis.
pub fn in_vocab_ratio(hyp: &str, vocab: &Vocabulary) -> f64 {
    let (known, total) = words(hyp).fold((0usize, 0usize), |(k, n), w| {
        (k + usize::from(vocab.contains(w)), n + 1)
    });
    if total == 0 {
        0.0
    } else {
        known as f64 / total as f64
    }
}

type Lazy<T> = OnceLock<Result<Vec<T>, CriteriaError>>;

/// Per-layer scores of one trace, computed on first use.
pub struct TraceSignals<'a> {
    trace: &'a UtteranceTrace,
    vocab: Option<&'a Vocabulary>,
    hypotheses: Lazy<String>,
    entropy: Lazy<f64>,
    maxprob: Lazy<f64>,
    ce_prev: Lazy<f64>,
    ce_curr: Lazy<f64>,
    lev: Lazy<f64>,
    in_vocab: Lazy<f64>,
}

fn cached<T>(
    cell: &Lazy<T>,
    init: impl FnOnce() -> Result<Vec<T>, CriteriaError>,
) -> Result<&[T], CriteriaError> {
    cell.get_or_init(init).as_deref().map_err(Clone::clone)
}

impl<'a> TraceSignals<'a> {
    pub fn new(trace: &'a UtteranceTrace, vocab: Option<&'a Vocabulary>) -> Self {
        Self {
            trace,
            vocab,
            hypotheses: OnceLock::new(),
            entropy: OnceLock::new(),
            maxprob: OnceLock::new(),
            ce_prev: OnceLock::new(),
            ce_curr: OnceLock::new(),
            lev: OnceLock::new(),
            in_vocab: OnceLock::new(),
        }
    }

    pub fn trace(&self) -> &'a UtteranceTrace {
        self.trace
    }

    pub fn hypotheses(&self) -> Result<&[String], CriteriaError> {
        cached(&self.hypotheses, || Ok(self.trace.hypotheses()?))
    }

    fn posteriors(&self) -> Result<Vec<&'a PosteriorMatrix>, CriteriaError> {
        self.trace.layers.iter().map(require_posteriors).collect()
    }

    pub fn entropy(&self) -> Result<&[f64], CriteriaError> {
        cached(&self.entropy, || {
            Ok(self.posteriors()?.into_iter().map(entropy_of).collect())
        })
    }

    pub fn maxprob(&self) -> Result<&[f64], CriteriaError> {
        cached(&self.maxprob, || {
            Ok(self.posteriors()?.into_iter().map(maxprob_of).collect())
        })
    }

    /// `d[k]` is the distance between layer positions `k + 1` and `k`.
    pub fn ce_pairs(&self, direction: CeDirection) -> Result<&[f64], CriteriaError> {
        let cell = match direction {
            CeDirection::PrevTarget => &self.ce_prev,
            CeDirection::CurrTarget => &self.ce_curr,
        };
        cached(cell, || {
            let p = self.posteriors()?;
            p.windows(2)
                .map(|w| ce_distance_directed(w[1], w[0], direction))
                .collect()
        })
    }

    /// Same indexing as [`Self::ce_pairs`].
    pub fn lev_pairs(&self) -> Result<&[f64], CriteriaError> {
        cached(&self.lev, || {
            let h = self.hypotheses()?;
            Ok(h.windows(2).map(|w| lev_distance_norm(&w[1], &w[0])).collect())
        })
    }

    pub fn in_vocab(&self) -> Result<&[f64], CriteriaError> {
        cached(&self.in_vocab, || {
            let vocab = self.vocab.ok_or(CriteriaError::MissingVocabulary)?;
            Ok(self
                .hypotheses()?
                .iter()
                .map(|h| in_vocab_ratio(h, vocab))
                .collect())
        })
    }

    /// Per-layer exit indicator for `cfg`, one entry per layer `i_min..=N`.
    pub fn indicators(&self, cfg: &StrategyConfig) -> Result<Vec<bool>, CriteriaError> {
        let trace = self.trace;
        cfg.validate(trace.n_layers, trace.i_min)?;
        let n = trace.layers.len();
        Ok(match cfg.kind {
            StrategyKind::ConfidenceEntropy => {
                let tau = cfg.tau()?;
                self.entropy()?.iter().map(|&s| s < tau).collect()
            }
            StrategyKind::ConfidenceMaxprob => {
                let tau = cfg.tau()?;
                self.maxprob()?.iter().map(|&s| s > tau).collect()
            }
            StrategyKind::PatienceCe => {
                patience_indicators(self.ce_pairs(cfg.ce_direction)?, cfg.tau()?, cfg.rho()?)
            }
            StrategyKind::PatienceLev => {
                patience_indicators(self.lev_pairs()?, cfg.tau()?, cfg.rho()?)
            }
            StrategyKind::Overlang => overlang_indicators(self.in_vocab()?, cfg.tau()?, cfg.rho()?),
            StrategyKind::FixedLayer => {
                let target = cfg.fixed_layer.unwrap_or(trace.n_layers);
                trace.layers.iter().map(|l| l.index == target).collect()
            }
            StrategyKind::CombinedMax => {
                let mut acc = vec![false; n];
                for child in &cfg.children {
                    for (a, c) in acc.iter_mut().zip(self.indicators(child)?) {
                        *a |= c;
                    }
                }
                acc
            }
        })
    }

    /// Exit layer chosen by `cfg`, without building the decision.
    pub fn exit_layer(&self, cfg: &StrategyConfig) -> Result<usize, CriteriaError> {
        Ok(self.trace.i_min + self.exit_position(cfg)?)
    }

    fn exit_position(&self, cfg: &StrategyConfig) -> Result<usize, CriteriaError> {
        let n = self.trace.layers.len();
        if n == 0 {
            return Err(CriteriaError::EmptyTrace);
        }
        let fired = self.indicators(cfg)?;
        Ok(fired.iter().position(|&f| f).unwrap_or(n - 1))
    }

    pub fn decide(&self, cfg: &StrategyConfig) -> Result<ExitDecision, CriteriaError> {
        let pos = self.exit_position(cfg)?;
        let trace = self.trace;
        let layer = &trace.layers[pos];
        let hypothesis = match self.hypotheses.get() {
            Some(Ok(h)) => h[pos].clone(),
            _ => trace.hypothesis_of(layer)?,
        };
        Ok(ExitDecision::new(
            trace.id.clone(),
            layer.index,
            trace.n_layers,
            hypothesis,
        ))
    }
}

/// Fires at position `p` when the `rho + 1` consecutive pair distances ending
/// at `p` are all below `tau`. `pairs[k]` compares positions `k + 1` and `k`,
/// so position `p` needs `p - rho - 1 >= 0`.
fn patience_indicators(pairs: &[f64], tau: f64, rho: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(pairs.len() + 1);
    out.push(false);
    let mut run = 0usize;
    for &d in pairs {
        run = if d < tau { run + 1 } else { 0 };
        out.push(run > rho);
    }
    out
}

/// Fires when the ratio reaches `tau`, or when it stayed constant over the
/// last `rho + 1` layers.
fn overlang_indicators(ratios: &[f64], tau: f64, rho: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(ratios.len());
    let mut run = 0usize;
    for (p, &w) in ratios.iter().enumerate() {
        if p > 0 && (w - ratios[p - 1]).abs() <= RATIO_EQ_TOLERANCE {
            run += 1;
        } else {
            run = 0;
        }
        out.push(w >= tau || run >= rho);
    }
    out
}

fn expect_kind(cfg: &StrategyConfig, expected: &'static [StrategyKind]) -> Result<(), CriteriaError> {
    if expected.contains(&cfg.kind) {
        Ok(())
    } else {
        Err(CriteriaError::WrongKind {
            expected,
            found: cfg.kind,
        })
    }
}

/// Applies any strategy to a trace.
pub fn evaluate(
    trace: &UtteranceTrace,
    cfg: &StrategyConfig,
    vocab: Option<&Vocabulary>,
) -> Result<ExitDecision, CriteriaError> {
    TraceSignals::new(trace, vocab).decide(cfg)
}

pub fn confidence_exit(trace: &UtteranceTrace, cfg: &StrategyConfig) -> Result<ExitDecision, CriteriaError> {
    expect_kind(
        cfg,
        &[StrategyKind::ConfidenceEntropy, StrategyKind::ConfidenceMaxprob],
    )?;
    evaluate(trace, cfg, None)
}

pub fn patience_exit(trace: &UtteranceTrace, cfg: &StrategyConfig) -> Result<ExitDecision, CriteriaError> {
    expect_kind(cfg, &[StrategyKind::PatienceCe, StrategyKind::PatienceLev])?;
    evaluate(trace, cfg, None)
}

pub fn overlang_exit(
    trace: &UtteranceTrace,
    cfg: &StrategyConfig,
    vocab: &Vocabulary,
) -> Result<ExitDecision, CriteriaError> {
    expect_kind(cfg, &[StrategyKind::Overlang])?;
    evaluate(trace, cfg, Some(vocab))
}

pub fn fixed_layer_exit(trace: &UtteranceTrace, layer: usize) -> Result<ExitDecision, CriteriaError> {
    evaluate(trace, &StrategyConfig::fixed(layer), None)
}

pub fn combined_exit(
    trace: &UtteranceTrace,
    cfgs: &[StrategyConfig],
    vocab: Option<&Vocabulary>,
) -> Result<ExitDecision, CriteriaError> {
    evaluate(trace, &StrategyConfig::combined(cfgs.to_vec()), vocab)
}
