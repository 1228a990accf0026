//! Trace data model.
//!
//! An [`UtteranceTrace`] carries one utterance's reference transcription and
//! the output of every exit head from `i_min` up to the last layer `N`. Each
//! exit head contributes a per-frame token posterior grid, a decoded
//! hypothesis, or both. Everything in this module is immutable once built;
//! structural problems that cannot be represented at all (ragged posterior
//! rows, a malformed token table) are rejected at construction, while softer
//! rule breaks are reported as [`Violation`]s by [`validate_trace`].

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::io::BufRead;

use thiserror::Error;

use crate::metrics::ctc_greedy_decode;

/// Number of transformer layers of the default model geometry.
pub const DEFAULT_N_LAYERS: usize = 24;
/// First layer carrying an exit head in the default model geometry.
pub const DEFAULT_I_MIN: usize = 10;
/// Absolute tolerance on posterior row sums.
pub const ROW_SUM_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum ModelError {
    #[error("token table: {0}")]
    InvalidTokenTable(String),
    #[error("posterior row {row} has {found} columns, expected {expected}")]
    RaggedRows {
        row: usize,
        found: usize,
        expected: usize,
    },
    #[error("posterior buffer holds {found} values, expected {frames}x{classes}")]
    BadBufferLength {
        frames: usize,
        classes: usize,
        found: usize,
    },
    #[error("vocabulary is empty")]
    EmptyVocabulary,
    #[error("corpus contains no traces")]
    EmptyCorpus,
    #[error("trace {id}: geometry n_layers={n_layers}, i_min={i_min} differs from corpus geometry n_layers={expected_n_layers}, i_min={expected_i_min}")]
    GeometryMismatch {
        id: String,
        n_layers: usize,
        i_min: usize,
        expected_n_layers: usize,
        expected_i_min: usize,
    },
    #[error("duplicate utterance id {0:?}")]
    DuplicateId(String),
    #[error("trace {id}: layer {layer} has neither posteriors nor a hypothesis")]
    MissingOutput { id: String, layer: usize },
}

/// Lowercases, strips and collapses whitespace so that words are separated by
/// exactly one space.
pub fn normalize_text(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for word in text.split_whitespace() {
        if !out.is_empty() {
            out.push(' ');
        }
        out.extend(word.chars().flat_map(char::to_lowercase));
    }
    out
}

/// Word tokenization shared by every metric.
pub fn words(text: &str) -> impl Iterator<Item = &str> {
    text.split_whitespace()
}

/// Output symbol inventory of the CTC heads.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenTable {
    symbols: Vec<String>,
    blank: usize,
    delimiter: usize,
    lookup: HashMap<String, usize>,
}

impl TokenTable {
    pub fn new(symbols: Vec<String>, blank: usize, delimiter: usize) -> Result<Self, ModelError> {
        if symbols.len() < 2 {
            return Err(ModelError::InvalidTokenTable(format!(
                "need at least 2 symbols, got {}",
                symbols.len()
            )));
        }
        if blank >= symbols.len() || delimiter >= symbols.len() {
            return Err(ModelError::InvalidTokenTable(format!(
                "blank={blank} / delimiter={delimiter} out of range for {} symbols",
                symbols.len()
            )));
        }
        if blank == delimiter {
            return Err(ModelError::InvalidTokenTable(
                "blank and delimiter share an index".into(),
            ));
        }
        let mut lookup = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if lookup.insert(s.clone(), i).is_some() {
                return Err(ModelError::InvalidTokenTable(format!(
                    "duplicate symbol {s:?}"
                )));
            }
        }
        Ok(Self {
            symbols,
            blank,
            delimiter,
            lookup,
        })
    }

    /// Blank, `|` as word delimiter, apostrophe and the 26 lowercase letters.
    pub fn english() -> Self {
        let mut symbols = vec!["<blank>".to_string(), "|".to_string(), "'".to_string()];
        symbols.extend(('a'..='z').map(String::from));
        Self::new(symbols, 0, 1).expect("static token table is valid")
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn symbol(&self, index: usize) -> &str {
        &self.symbols[index]
    }

    pub fn blank_index(&self) -> usize {
        self.blank
    }

    pub fn delimiter_index(&self) -> usize {
        self.delimiter
    }

    /// Token index emitting `ch`; a space maps to the delimiter.
    pub fn index_of_char(&self, ch: char) -> Option<usize> {
        if ch == ' ' {
            return Some(self.delimiter);
        }
        let mut buf = [0u8; 4];
        self.lookup
            .get(ch.encode_utf8(&mut buf) as &str)
            .copied()
            .filter(|&i| i != self.blank && i != self.delimiter)
    }
}

/// Row-major `T x C` grid of per-frame token probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorMatrix {
    frames: usize,
    classes: usize,
    data: Vec<f64>,
}

impl PosteriorMatrix {
    pub fn new(frames: usize, classes: usize, data: Vec<f64>) -> Result<Self, ModelError> {
        if data.len() != frames * classes {
            return Err(ModelError::BadBufferLength {
                frames,
                classes,
                found: data.len(),
            });
        }
        Ok(Self {
            frames,
            classes,
            data,
        })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self, ModelError> {
        let classes = rows.first().map_or(0, Vec::len);
        let frames = rows.len();
        let mut data = Vec::with_capacity(frames * classes);
        for (row, values) in rows.into_iter().enumerate() {
            if values.len() != classes {
                return Err(ModelError::RaggedRows {
                    row,
                    found: values.len(),
                    expected: classes,
                });
            }
            data.extend(values);
        }
        Ok(Self {
            frames,
            classes,
            data,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, frame: usize) -> &[f64] {
        &self.data[frame * self.classes..(frame + 1) * self.classes]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        // chunks_exact panics on a zero chunk size
        self.data.chunks_exact(self.classes.max(1))
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        self.rows().map(<[f64]>::to_vec).collect()
    }

    /// Index of the most probable token per frame; ties go to the lowest index.
    pub fn argmax_path(&self) -> Vec<usize> {
        self.rows()
            .map(|row| {
                let mut best = 0;
                for (c, &p) in row.iter().enumerate() {
                    if p > row[best] {
                        best = c;
                    }
                }
                best
            })
            .collect()
    }
}

/// The output of the exit head on top of one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOutput {
    pub index: usize,
    pub posteriors: Option<PosteriorMatrix>,
    pub hypothesis: Option<String>,
}

impl LayerOutput {
    pub fn from_posteriors(index: usize, posteriors: PosteriorMatrix) -> Self {
        Self {
            index,
            posteriors: Some(posteriors),
            hypothesis: None,
        }
    }

    pub fn from_hypothesis(index: usize, hypothesis: impl Into<String>) -> Self {
        Self {
            index,
            posteriors: None,
            hypothesis: Some(hypothesis.into()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceTrace {
    pub id: String,
    pub reference: String,
    pub n_layers: usize,
    pub i_min: usize,
    pub tokens: TokenTable,
    pub layers: Vec<LayerOutput>,
}

impl UtteranceTrace {
    /// Layer indices an exit may land on, `i_min..=n_layers`.
    pub fn exit_range(&self) -> std::ops::RangeInclusive<usize> {
        self.i_min..=self.n_layers
    }

    pub fn layer(&self, index: usize) -> Option<&LayerOutput> {
        let pos = index.checked_sub(self.i_min)?;
        self.layers.get(pos).filter(|l| l.index == index)
    }

    pub fn normalized_reference(&self) -> String {
        normalize_text(&self.reference)
    }

    pub fn reference_words(&self) -> usize {
        words(&self.reference).count()
    }

    /// Normalized hypothesis of a layer, decoding the posteriors when no text
    /// was stored.
    pub fn hypothesis_of(&self, layer: &LayerOutput) -> Result<String, ModelError> {
        match (&layer.hypothesis, &layer.posteriors) {
            (Some(h), _) => Ok(normalize_text(h)),
            (None, Some(p)) => Ok(normalize_text(&ctc_greedy_decode(p, &self.tokens))),
            (None, None) => Err(ModelError::MissingOutput {
                id: self.id.clone(),
                layer: layer.index,
            }),
        }
    }

    /// Normalized hypotheses for every layer, in layer order.
    pub fn hypotheses(&self) -> Result<Vec<String>, ModelError> {
        self.layers.iter().map(|l| self.hypothesis_of(l)).collect()
    }
}

/// Case-insensitive word list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: BTreeSet<String>,
}

static BUILTIN_WORDS: &str = include_str!("../data/words.txt");

impl Vocabulary {
    pub fn new<I, S>(words: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let words: BTreeSet<String> = words
            .into_iter()
            .map(|w| w.as_ref().trim().to_lowercase())
            .filter(|w| !w.is_empty())
            .collect();
        if words.is_empty() {
            return Err(ModelError::EmptyVocabulary);
        }
        Ok(Self { words })
    }

    /// One word per line; blank lines are skipped.
    pub fn from_reader<R: BufRead>(reader: R) -> std::io::Result<Result<Self, ModelError>> {
        let lines = reader.lines().collect::<std::io::Result<Vec<_>>>()?;
        Ok(Self::new(lines))
    }

    /// A small list of common English words, enough for synthetic corpora.
    pub fn builtin_english() -> Self {
        Self::new(BUILTIN_WORDS.lines()).expect("bundled word list is non-empty")
    }

    pub fn contains(&self, word: &str) -> bool {
        if word.chars().any(char::is_uppercase) {
            self.words.contains(&word.to_lowercase())
        } else {
            self.words.contains(word)
        }
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// Words in sorted order.
    pub fn iter(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }
}

/// A set of traces sharing one model geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    traces: Vec<UtteranceTrace>,
    n_layers: usize,
    i_min: usize,
}

impl Corpus {
    pub fn new(traces: Vec<UtteranceTrace>) -> Result<Self, ModelError> {
        let first = traces.first().ok_or(ModelError::EmptyCorpus)?;
        let (n_layers, i_min) = (first.n_layers, first.i_min);
        let mut seen = HashSet::with_capacity(traces.len());
        for t in &traces {
            if t.n_layers != n_layers || t.i_min != i_min {
                return Err(ModelError::GeometryMismatch {
                    id: t.id.clone(),
                    n_layers: t.n_layers,
                    i_min: t.i_min,
                    expected_n_layers: n_layers,
                    expected_i_min: i_min,
                });
            }
            if !seen.insert(t.id.as_str()) {
                return Err(ModelError::DuplicateId(t.id.clone()));
            }
        }
        Ok(Self {
            traces,
            n_layers,
            i_min,
        })
    }

    pub fn traces(&self) -> &[UtteranceTrace] {
        &self.traces
    }

    pub fn into_traces(self) -> Vec<UtteranceTrace> {
        self.traces
    }

    pub fn len(&self) -> usize {
        self.traces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.traces.is_empty()
    }

    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn i_min(&self) -> usize {
        self.i_min
    }

    /// Traces whose reference has more than `min_words` words.
    pub fn filter_by_length(&self, min_words: usize) -> Vec<&UtteranceTrace> {
        self.traces
            .iter()
            .filter(|t| t.reference_words() > min_words)
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ValidationMode {
    /// Structural checks only; invalid traces are dropped on load.
    #[default]
    Lenient,
    /// Also requires stored hypotheses to match the greedy decode of the
    /// stored posteriors; any invalid trace fails the load.
    Strict,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Rule {
    LayerBounds,
    Contiguity,
    MissingOutput,
    EmptyPosteriors,
    ProbabilityRange,
    RowNormalization,
    ShapeMismatch,
    HypothesisMismatch,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Rule::LayerBounds => "layer-bounds",
            Rule::Contiguity => "contiguity",
            Rule::MissingOutput => "missing-output",
            Rule::EmptyPosteriors => "empty-posteriors",
            Rule::ProbabilityRange => "probability-range",
            Rule::RowNormalization => "row-normalization",
            Rule::ShapeMismatch => "shape-mismatch",
            Rule::HypothesisMismatch => "hypothesis-mismatch",
        })
    }
}

/// One broken invariant of a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct Violation {
    pub field: String,
    pub rule: Rule,
    pub detail: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}]: {}", self.field, self.rule, self.detail)
    }
}

pub fn validate_trace(trace: &UtteranceTrace) -> Vec<Violation> {
    validate_trace_with(trace, ValidationMode::Lenient)
}

pub fn validate_trace_with(trace: &UtteranceTrace, mode: ValidationMode) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |field: String, rule: Rule, detail: String| {
        out.push(Violation {
            field,
            rule,
            detail,
        })
    };

    if trace.i_min < 1 || trace.i_min > trace.n_layers {
        push(
            "i_min".into(),
            Rule::LayerBounds,
            format!(
                "require 1 <= i_min <= n_layers, got i_min={} n_layers={}",
                trace.i_min, trace.n_layers
            ),
        );
    }

    let contiguous = trace.layers.len() == (trace.i_min..=trace.n_layers).count()
        && trace
            .layers
            .iter()
            .zip(trace.i_min..)
            .all(|(l, expected)| l.index == expected);
    if !contiguous {
        let found: Vec<usize> = trace.layers.iter().map(|l| l.index).collect();
        push(
            "layers".into(),
            Rule::Contiguity,
            format!(
                "expected layer indices {}..={}, found {:?}",
                trace.i_min, trace.n_layers, found
            ),
        );
    }

    let mut shape: Option<(usize, usize)> = None;
    for layer in &trace.layers {
        let field = format!("layers[{}]", layer.index);
        if layer.posteriors.is_none() && layer.hypothesis.is_none() {
            push(
                field.clone(),
                Rule::MissingOutput,
                "neither posteriors nor hypothesis present".into(),
            );
        }
        let Some(p) = &layer.posteriors else { continue };
        let pfield = format!("{field}.posteriors");
        if p.frames() == 0 {
            push(pfield.clone(), Rule::EmptyPosteriors, "T must be >= 1".into());
            continue;
        }
        if p.classes() != trace.tokens.len() {
            push(
                pfield.clone(),
                Rule::ShapeMismatch,
                format!(
                    "{} columns but token table has {} symbols",
                    p.classes(),
                    trace.tokens.len()
                ),
            );
        }
        match shape {
            None => shape = Some((p.frames(), p.classes())),
            Some((t, c)) if (t, c) != (p.frames(), p.classes()) => push(
                pfield.clone(),
                Rule::ShapeMismatch,
                format!(
                    "shape {}x{} differs from {}x{} of earlier layers",
                    p.frames(),
                    p.classes(),
                    t,
                    c
                ),
            ),
            _ => {}
        }
        if let Some(bad) = p
            .as_slice()
            .iter()
            .position(|v| !(0.0..=1.0).contains(v))
        {
            push(
                pfield.clone(),
                Rule::ProbabilityRange,
                format!(
                    "entry ({}, {}) = {} outside [0, 1]",
                    bad / p.classes().max(1),
                    bad % p.classes().max(1),
                    p.as_slice()[bad]
                ),
            );
        }
        let bad_rows: Vec<(usize, f64)> = p
            .rows()
            .enumerate()
            .map(|(t, row)| (t, row.iter().sum::<f64>()))
            .filter(|(_, s)| (s - 1.0).abs() > ROW_SUM_TOLERANCE || s.is_nan())
            .collect();
        if let Some(&(t, s)) = bad_rows.first() {
            push(
                pfield.clone(),
                Rule::RowNormalization,
                format!(
                    "{} row(s) do not sum to 1 within {ROW_SUM_TOLERANCE}; first is row {t} summing to {s}",
                    bad_rows.len()
                ),
            );
        }
        if mode == ValidationMode::Strict {
            if let Some(h) = &layer.hypothesis {
                let decoded = normalize_text(&ctc_greedy_decode(p, &trace.tokens));
                if normalize_text(h) != decoded {
                    push(
                        format!("{field}.hypothesis"),
                        Rule::HypothesisMismatch,
                        format!("stored {h:?} but posteriors decode to {decoded:?}"),
                    );
                }
            }
        }
    }
    out
}
