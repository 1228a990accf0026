//! Deterministic synthetic traces.
//!
//! Each utterance draws a reference from the vocabulary and a fixed set of
//! per-character random draws. Layer `i` corrupts the characters whose draw
//! falls below `p_i = base_error_rate * (1 - improvement_rate)^(i - i_min)`,
//! so corrupted sets shrink with depth and hypotheses settle the way real
//! exit heads do. Above `degrade_after`, a second independent set of draws
//! re-corrupts characters at `degrade_rate`.
//!
//! Posteriors follow a canonical CTC path (token, blank, token, ...) padded
//! with blanks. Each frame's on-path token gets logit `s + 1` against
//! off-path logits drawn from `U(0, 1)`, where `s` is the layer's sharpness
//! from the temperature schedule, lowered by `uncertain_frame_penalty` on
//! frames that emit a corrupted character. Probabilities are rounded to
//! `1e-6` so serialized corpora reload bit-exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{
    Corpus, LayerOutput, ModelError, PosteriorMatrix, TokenTable, UtteranceTrace, Vocabulary,
    DEFAULT_I_MIN, DEFAULT_N_LAYERS,
};

const PROB_QUANTUM: f64 = 1e-6;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid synthesis parameters: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    pub seed: u64,
    pub n_utterances: usize,
    pub n_layers: usize,
    pub i_min: usize,
    pub vocab: Vocabulary,
    /// Inclusive word-count range of references.
    pub ref_len_range: (usize, usize),
    pub base_error_rate: f64,
    pub improvement_rate: f64,
    pub degrade_after: Option<usize>,
    pub degrade_rate: f64,
    /// Sharpness per layer `i_min..=n_layers`.
    pub posterior_temperature_schedule: Vec<f64>,
    pub uncertain_frame_penalty: f64,
    pub emit_posteriors: bool,
}

impl SynthParams {
    /// Degradation-free defaults on the standard 24-layer geometry.
    pub fn new(seed: u64, n_utterances: usize, vocab: Vocabulary) -> Self {
        Self {
            seed,
            n_utterances,
            n_layers: DEFAULT_N_LAYERS,
            i_min: DEFAULT_I_MIN,
            vocab,
            ref_len_range: (8, 16),
            base_error_rate: 0.35,
            improvement_rate: 0.25,
            degrade_after: None,
            degrade_rate: 0.0,
            posterior_temperature_schedule: linear_schedule(DEFAULT_N_LAYERS, DEFAULT_I_MIN, 5.0, 9.0),
            uncertain_frame_penalty: 2.5,
            emit_posteriors: true,
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |msg: String| Err(SynthError::InvalidParams(msg));
        if self.i_min < 1 || self.i_min > self.n_layers {
            return bad(format!(
                "need 1 <= i_min <= n_layers, got {} and {}",
                self.i_min, self.n_layers
            ));
        }
        let (lo, hi) = self.ref_len_range;
        if lo < 1 || lo > hi {
            return bad(format!("ref_len_range ({lo}, {hi}) is not a valid range"));
        }
        for (name, v) in [
            ("base_error_rate", self.base_error_rate),
            ("improvement_rate", self.improvement_rate),
            ("degrade_rate", self.degrade_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} = {v} outside [0, 1]"));
            }
        }
        let want = self.n_layers - self.i_min + 1;
        if self.posterior_temperature_schedule.len() != want {
            return bad(format!(
                "temperature schedule has {} entries, need {want} for layers {}..={}",
                self.posterior_temperature_schedule.len(),
                self.i_min,
                self.n_layers
            ));
        }
        if self
            .posterior_temperature_schedule
            .iter()
            .chain([&self.uncertain_frame_penalty])
            .any(|s| !s.is_finite() || *s < 0.0)
        {
            return bad("sharpness values must be finite and non-negative".into());
        }
        let tokens = TokenTable::english();
        if let Some(w) = self
            .vocab
            .iter()
            .find(|w| w.chars().any(|c| c == ' ' || tokens.index_of_char(c).is_none()))
        {
            return bad(format!("vocabulary word {w:?} is not spellable with the token table"));
        }
        Ok(())
    }
}

/// Evenly spaced sharpness values from `start` at `i_min` to `end` at `n_layers`.
pub fn linear_schedule(n_layers: usize, i_min: usize, start: f64, end: f64) -> Vec<f64> {
    let steps = n_layers.saturating_sub(i_min);
    (0..=steps)
        .map(|k| {
            if steps == 0 {
                end
            } else {
                start + (end - start) * k as f64 / steps as f64
            }
        })
        .collect()
}

pub fn generate_corpus(params: &SynthParams) -> Result<Corpus, SynthError> {
    params.validate()?;
    let lexicon: Vec<&str> = params.vocab.iter().collect();
    let traces = (0..params.n_utterances)
        .into_par_iter()
        .map(|idx| build_trace(params, &lexicon, idx))
        .collect::<Vec<_>>();
    Ok(Corpus::new(traces)?)
}

/// The `index`-th utterance of the corpus `params` describes.
pub fn generate_trace(params: &SynthParams, index: usize) -> Result<UtteranceTrace, SynthError> {
    params.validate()?;
    let lexicon: Vec<&str> = params.vocab.iter().collect();
    Ok(build_trace(params, &lexicon, index))
}

#[derive(Clone, Copy)]
enum Edit {
    Substitute(char),
    Delete,
    Insert(char),
}

struct CharDraw {
    ch: char,
    primary: f64,
    primary_edit: Edit,
    degrade: f64,
    degrade_edit: Edit,
}

fn random_letter<R: Rng>(rng: &mut R) -> char {
    (b'a' + rng.random_range(0..26u8)) as char
}

fn random_edit<R: Rng>(rng: &mut R, ch: char) -> Edit {
    let roll: f64 = rng.random();
    if roll < 0.5 {
        let mut sub = random_letter(rng);
        while sub == ch {
            sub = random_letter(rng);
        }
        Edit::Substitute(sub)
    } else if roll < 0.75 {
        Edit::Delete
    } else {
        Edit::Insert(random_letter(rng))
    }
}

fn build_trace(params: &SynthParams, lexicon: &[&str], index: usize) -> UtteranceTrace {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    rng.set_stream(index as u64);

    let (lo, hi) = params.ref_len_range;
    let n_words = rng.random_range(lo..=hi);
    let reference = (0..n_words)
        .map(|_| lexicon[rng.random_range(0..lexicon.len())])
        .collect::<Vec<_>>()
        .join(" ");

    let draws: Vec<CharDraw> = reference
        .chars()
        .map(|ch| {
            if ch == ' ' {
                return CharDraw {
                    ch,
                    primary: 1.0,
                    primary_edit: Edit::Delete,
                    degrade: 1.0,
                    degrade_edit: Edit::Delete,
                };
            }
            let primary = rng.random();
            let primary_edit = random_edit(&mut rng, ch);
            let degrade = rng.random();
            let degrade_edit = random_edit(&mut rng, ch);
            CharDraw {
                ch,
                primary,
                primary_edit,
                degrade,
                degrade_edit,
            }
        })
        .collect();

    // (character, emitted by a corrupted position) per layer
    let hyps: Vec<Vec<(char, bool)>> = (params.i_min..=params.n_layers)
        .map(|layer| {
            let p = params.base_error_rate
                * (1.0 - params.improvement_rate).powi((layer - params.i_min) as i32);
            let degrading = params.degrade_after.is_some_and(|d| layer > d);
            let mut out = Vec::with_capacity(draws.len() + 4);
            for d in &draws {
                let edit = if d.primary < p {
                    Some(d.primary_edit)
                } else if degrading && d.degrade < params.degrade_rate {
                    Some(d.degrade_edit)
                } else {
                    None
                };
                match edit {
                    None => out.push((d.ch, false)),
                    Some(Edit::Substitute(c)) => out.push((c, true)),
                    Some(Edit::Delete) => {}
                    Some(Edit::Insert(c)) => {
                        out.push((d.ch, true));
                        out.push((c, true));
                    }
                }
            }
            squash_spaces(out)
        })
        .collect();

    let tokens = TokenTable::english();
    let frames = 2 * hyps.iter().map(Vec::len).max().unwrap_or(0) + 1;
    let layers = hyps
        .iter()
        .zip(params.i_min..)
        .zip(&params.posterior_temperature_schedule)
        .map(|((hyp, layer), &sharpness)| {
            let text: String = hyp.iter().map(|&(c, _)| c).collect();
            let posteriors = params.emit_posteriors.then(|| {
                posterior_path(hyp, frames, &tokens, sharpness, params.uncertain_frame_penalty, &mut rng)
            });
            LayerOutput {
                index: layer,
                posteriors,
                hypothesis: Some(text),
            }
        })
        .collect();

    UtteranceTrace {
        id: format!("synth-{index:06}"),
        reference,
        n_layers: params.n_layers,
        i_min: params.i_min,
        tokens,
        layers,
    }
}

fn squash_spaces(chars: Vec<(char, bool)>) -> Vec<(char, bool)> {
    let mut out: Vec<(char, bool)> = Vec::with_capacity(chars.len());
    for (c, flag) in chars {
        if c == ' ' && out.last().is_none_or(|&(p, _)| p == ' ') {
            continue;
        }
        out.push((c, flag));
    }
    if out.last().is_some_and(|&(c, _)| c == ' ') {
        out.pop();
    }
    out
}

fn posterior_path<R: Rng>(
    hyp: &[(char, bool)],
    frames: usize,
    tokens: &TokenTable,
    sharpness: f64,
    penalty: f64,
    rng: &mut R,
) -> PosteriorMatrix {
    let classes = tokens.len();
    let blank = tokens.blank_index();
    let mut path: Vec<(usize, bool)> = Vec::with_capacity(frames);
    for (k, &(c, uncertain)) in hyp.iter().enumerate() {
        if k > 0 {
            path.push((blank, false));
        }
        let token = tokens
            .index_of_char(c)
            .expect("synthetic text only uses table characters");
        path.push((token, uncertain));
    }
    path.resize(frames, (blank, false));

    let mut data = Vec::with_capacity(frames * classes);
    let mut logits = vec![0.0f64; classes];
    for (target, uncertain) in path {
        let s = if uncertain { (sharpness - penalty).max(0.0) } else { sharpness };
        for (c, l) in logits.iter_mut().enumerate() {
            *l = if c == target { s + 1.0 } else { rng.random::<f64>() };
        }
        let max = s + 1.0;
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let row: Vec<f64> = logits
            .iter()
            .map(|l| ((l - max).exp() / z / PROB_QUANTUM).round() * PROB_QUANTUM)
            .collect();
        data.extend(row);
    }
    PosteriorMatrix::new(frames, classes, data).expect("buffer sized to frames x classes")
}
