//! Overthinking analytics and the optimal speed/quality bound.
//!
//! The bound answers: if every utterance could pick its exit layer knowing
//! the errors of all layers, what is the smallest total number of word errors
//! for each total number of skipped layers? Each utterance offers
//! `N - i_min + 1` choices of (layers skipped, errors), which makes this a
//! multiple-choice knapsack solved exactly over the integer budget axis.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::criteria::ExitDecision;
use crate::metrics::word_errors;
use crate::model::{Corpus, ModelError, UtteranceTrace};

#[derive(Debug, Clone, Error, PartialEq)]
pub enum OracleError {
    #[error("no utterances left after keeping references longer than {0} words")]
    EmptyAfterFilter(usize),
    #[error("no profiles to analyze")]
    NoProfiles,
    #[error("profiles disagree on exit range: {0}")]
    MixedGeometry(String),
    #[error("no decision for utterance {0:?}")]
    MissingDecision(String),
    #[error("utterance {id:?}: exit layer {layer} outside {i_min}..={n_layers}")]
    ExitOutOfRange {
        id: String,
        layer: usize,
        i_min: usize,
        n_layers: usize,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Word errors of every exit layer of one utterance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LayerErrorProfile {
    pub utterance_id: String,
    pub ref_len: usize,
    i_min: usize,
    errors: Vec<usize>,
}

impl LayerErrorProfile {
    /// `errors[k]` belongs to layer `i_min + k`.
    pub fn new(utterance_id: impl Into<String>, ref_len: usize, i_min: usize, errors: Vec<usize>) -> Self {
        assert!(!errors.is_empty(), "a profile covers at least one layer");
        Self {
            utterance_id: utterance_id.into(),
            ref_len,
            i_min,
            errors,
        }
    }

    pub fn i_min(&self) -> usize {
        self.i_min
    }

    pub fn n_layers(&self) -> usize {
        self.i_min + self.errors.len() - 1
    }

    pub fn errors(&self) -> &[usize] {
        &self.errors
    }

    pub fn errors_at(&self, layer: usize) -> Option<usize> {
        layer
            .checked_sub(self.i_min)
            .and_then(|k| self.errors.get(k).copied())
    }

    pub fn errors_per_layer(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        (self.i_min..).zip(self.errors.iter().copied())
    }

    fn last(&self) -> usize {
        *self.errors.last().expect("non-empty")
    }

    fn min(&self) -> usize {
        *self.errors.iter().min().expect("non-empty")
    }

    /// True when some layer strictly before `layer` does at least as well.
    pub fn overthinks_at(&self, layer: usize) -> bool {
        let Some(at) = self.errors_at(layer) else {
            return false;
        };
        self.errors[..layer - self.i_min].iter().any(|&e| e <= at)
    }
}

pub fn profile(trace: &UtteranceTrace) -> Result<LayerErrorProfile, OracleError> {
    let reference = trace.normalized_reference();
    let errors = trace
        .hypotheses()?
        .iter()
        .map(|h| word_errors(h, &reference).errors)
        .collect::<Vec<_>>();
    if errors.is_empty() {
        return Err(OracleError::NoProfiles);
    }
    Ok(LayerErrorProfile::new(
        trace.id.clone(),
        crate::model::words(&reference).count(),
        trace.i_min,
        errors,
    ))
}

pub fn profile_all<'a, I>(traces: I) -> Result<Vec<LayerErrorProfile>, OracleError>
where
    I: IntoParallelIterator<Item = &'a UtteranceTrace>,
{
    traces.into_par_iter().map(profile).collect()
}

/// Overthinking test: some layer before `N` is no worse than layer `N`.
pub fn overthinks(p: &LayerErrorProfile) -> bool {
    p.overthinks_at(p.n_layers())
}

/// Earliest layer reaching the minimum error count.
pub fn first_best_layer(p: &LayerErrorProfile) -> usize {
    let min = p.min();
    p.i_min + p.errors.iter().position(|&e| e == min).expect("min is attained")
}

/// Among utterances whose best prediction appears before `N`, the share for
/// which layer `N` is strictly worse than the best. `None` when no utterance
/// qualifies.
pub fn degradation_rate(profiles: &[LayerErrorProfile]) -> Option<f64> {
    let early: Vec<&LayerErrorProfile> = profiles
        .iter()
        .filter(|p| first_best_layer(p) < p.n_layers())
        .collect();
    if early.is_empty() {
        return None;
    }
    let degraded = early.iter().filter(|p| p.last() > p.min()).count();
    Some(degraded as f64 / early.len() as f64)
}

/// Share of utterances that overthink; `None` for an empty set.
pub fn overthinking_fraction(profiles: &[LayerErrorProfile]) -> Option<f64> {
    if profiles.is_empty() {
        return None;
    }
    Some(profiles.iter().filter(|p| overthinks(p)).count() as f64 / profiles.len() as f64)
}

/// Count of utterances per first-best layer, with every exit layer present.
pub fn first_best_histogram(profiles: &[LayerErrorProfile]) -> BTreeMap<usize, usize> {
    let mut hist = BTreeMap::new();
    if let Some(p) = profiles.first() {
        for layer in p.i_min()..=p.n_layers() {
            hist.insert(layer, 0);
        }
    }
    for p in profiles {
        *hist.entry(first_best_layer(p)).or_insert(0) += 1;
    }
    hist
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct OraclePoint {
    /// Total layers skipped over the corpus.
    pub budget: usize,
    pub min_total_errors: usize,
    pub corpus_wer: f64,
    pub saved_fraction: f64,
}

/// Minimum total errors at every reachable total of skipped layers.
///
/// `points` holds the value at exactly each budget, which is what exposes the
/// initial decreasing segment on overthinking corpora. [`Self::frontier`]
/// gives the monotone Pareto view.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OracleCurve {
    pub points: Vec<OraclePoint>,
    pub n_utterances: usize,
    pub n_layers: usize,
    pub total_ref_words: usize,
}

/// Budget ranges of the decreasing (a), plateau (b) and increasing (c)
/// segments of an oracle curve. Ranges are half-open over point indices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CurvePhases {
    pub decreasing: (usize, usize),
    pub plateau: (usize, usize),
    pub increasing: (usize, usize),
}

impl OracleCurve {
    /// Point with the largest budget not above `budget`.
    pub fn at_budget(&self, budget: usize) -> Option<&OraclePoint> {
        let idx = self.points.partition_point(|p| p.budget <= budget);
        idx.checked_sub(1).map(|i| &self.points[i])
    }

    /// Best error count achievable while skipping at least each budget.
    pub fn frontier(&self) -> Vec<OraclePoint> {
        let mut out = self.points.clone();
        for i in (0..out.len().saturating_sub(1)).rev() {
            if out[i + 1].min_total_errors < out[i].min_total_errors {
                out[i].min_total_errors = out[i + 1].min_total_errors;
                out[i].corpus_wer = out[i + 1].corpus_wer;
            }
        }
        out
    }

    /// Splits the curve at its first minimum and at the end of the plateau
    /// that follows (points within `tolerance` WER of the minimum).
    pub fn phases(&self, tolerance: f64) -> CurvePhases {
        let n = self.points.len();
        let min = self
            .points
            .iter()
            .map(|p| p.corpus_wer)
            .fold(f64::INFINITY, f64::min);
        let on_plateau = |p: &OraclePoint| p.corpus_wer <= min + tolerance;
        let b_start = self.points.iter().position(on_plateau).unwrap_or(n);
        let c_start = self.points[b_start..]
            .iter()
            .position(|p| !on_plateau(p))
            .map_or(n, |k| b_start + k);
        CurvePhases {
            decreasing: (0, b_start),
            plateau: (b_start, c_start),
            increasing: (c_start, n),
        }
    }
}

/// Optimal bound over traces whose reference has more than `length_filter` words.
pub fn dp_optimal_bound(corpus: &Corpus, length_filter: usize) -> Result<OracleCurve, OracleError> {
    let kept = corpus.filter_by_length(length_filter);
    if kept.is_empty() {
        return Err(OracleError::EmptyAfterFilter(length_filter));
    }
    let profiles = profile_all(kept)?;
    dp_bound_from_profiles(&profiles)
}

pub fn dp_bound_from_profiles(profiles: &[LayerErrorProfile]) -> Result<OracleCurve, OracleError> {
    let first = profiles.first().ok_or(OracleError::NoProfiles)?;
    let (i_min, n_layers) = (first.i_min(), first.n_layers());
    if let Some(p) = profiles
        .iter()
        .find(|p| p.i_min() != i_min || p.n_layers() != n_layers)
    {
        return Err(OracleError::MixedGeometry(format!(
            "{:?} covers {}..={}, expected {i_min}..={n_layers}",
            p.utterance_id,
            p.i_min(),
            p.n_layers()
        )));
    }
    let span = n_layers - i_min;
    let max_budget = profiles.len() * span;

    const UNREACHABLE: usize = usize::MAX;
    let mut best = vec![UNREACHABLE; max_budget + 1];
    let mut next = vec![UNREACHABLE; max_budget + 1];
    best[0] = 0;
    let mut reach = 0;
    for p in profiles {
        next[..=reach + span].fill(UNREACHABLE);
        for (s, &acc) in best[..=reach].iter().enumerate() {
            if acc == UNREACHABLE {
                continue;
            }
            // exiting at layer N - skip costs errors at that layer
            for skip in 0..=span {
                let cand = acc + p.errors[span - skip];
                let slot = &mut next[s + skip];
                if cand < *slot {
                    *slot = cand;
                }
            }
        }
        reach += span;
        std::mem::swap(&mut best, &mut next);
    }

    let total_ref_words: usize = profiles.iter().map(|p| p.ref_len).sum();
    let denom_words = total_ref_words.max(1) as f64;
    let denom_layers = (profiles.len() * n_layers) as f64;
    let points = best
        .iter()
        .enumerate()
        .filter(|(_, &e)| e != UNREACHABLE)
        .map(|(budget, &e)| OraclePoint {
            budget,
            min_total_errors: e,
            corpus_wer: e as f64 / denom_words,
            saved_fraction: budget as f64 / denom_layers,
        })
        .collect();
    Ok(OracleCurve {
        points,
        n_utterances: profiles.len(),
        n_layers,
        total_ref_words,
    })
}

fn index_decisions<'a>(
    profiles: &[LayerErrorProfile],
    decisions: &'a [ExitDecision],
) -> Result<Vec<&'a ExitDecision>, OracleError> {
    let by_id: HashMap<&str, &ExitDecision> = decisions
        .iter()
        .map(|d| (d.utterance_id.as_str(), d))
        .collect();
    profiles
        .iter()
        .map(|p| {
            let d = by_id
                .get(p.utterance_id.as_str())
                .copied()
                .ok_or_else(|| OracleError::MissingDecision(p.utterance_id.clone()))?;
            if p.errors_at(d.exit_layer).is_none() {
                return Err(OracleError::ExitOutOfRange {
                    id: p.utterance_id.clone(),
                    layer: d.exit_layer,
                    i_min: p.i_min(),
                    n_layers: p.n_layers(),
                });
            }
            Ok(d)
        })
        .collect()
}

/// Share of utterances for which an earlier exit layer would have been no worse
/// than the layer the strategy picked.
pub fn strategy_overthinking_rate(
    profiles: &[LayerErrorProfile],
    decisions: &[ExitDecision],
) -> Result<f64, OracleError> {
    if profiles.is_empty() {
        return Err(OracleError::NoProfiles);
    }
    let matched = index_decisions(profiles, decisions)?;
    let hits = profiles
        .iter()
        .zip(&matched)
        .filter(|(p, d)| p.overthinks_at(d.exit_layer))
        .count();
    Ok(hits as f64 / profiles.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TradeoffPoint {
    pub saved_fraction: f64,
    pub corpus_wer: f64,
}

/// Mean saved fraction and micro WER of a decision set, on references longer
/// than `length_filter` words.
pub fn tradeoff_point(
    corpus: &Corpus,
    decisions: &[ExitDecision],
    length_filter: usize,
) -> Result<TradeoffPoint, OracleError> {
    let kept = corpus.filter_by_length(length_filter);
    if kept.is_empty() {
        return Err(OracleError::EmptyAfterFilter(length_filter));
    }
    let by_id: HashMap<&str, &ExitDecision> = decisions
        .iter()
        .map(|d| (d.utterance_id.as_str(), d))
        .collect();
    let n_layers = corpus.n_layers();
    let (mut skipped, mut errors, mut words) = (0usize, 0usize, 0usize);
    for t in &kept {
        let d = by_id
            .get(t.id.as_str())
            .ok_or_else(|| OracleError::MissingDecision(t.id.clone()))?;
        if !t.exit_range().contains(&d.exit_layer) {
            return Err(OracleError::ExitOutOfRange {
                id: t.id.clone(),
                layer: d.exit_layer,
                i_min: t.i_min,
                n_layers,
            });
        }
        skipped += n_layers - d.exit_layer;
        let w = word_errors(&d.hypothesis, &t.normalized_reference());
        errors += w.errors;
        words += w.ref_len;
    }
    Ok(TradeoffPoint {
        saved_fraction: skipped as f64 / (kept.len() * n_layers) as f64,
        corpus_wer: errors as f64 / words.max(1) as f64,
    })
}
