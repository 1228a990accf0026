//! Trace JSON Lines, vocabulary files and synthesis parameter files.
//!
//! One utterance per line:
//!
//! ```json
//! {"id": "...", "reference": "...", "n_layers": 24, "i_min": 10,
//!  "tokens": {"symbols": ["<blank>", "|", ...], "blank": 0, "delimiter": 1},
//!  "layers": [{"i": 10, "hyp": "...", "posteriors": [[...], ...]}, ...]}
//! ```
//!
//! `hyp` and `posteriors` may each be `null`. Files starting with the gzip
//! magic bytes are decompressed transparently; paths ending in `.gz` are
//! written compressed.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use flate2::read::MultiGzDecoder;
use flate2::write::GzEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    validate_trace_with, Corpus, LayerOutput, ModelError, PosteriorMatrix, TokenTable,
    UtteranceTrace, ValidationMode, Violation, Vocabulary, DEFAULT_I_MIN, DEFAULT_N_LAYERS,
};
use crate::synth::{linear_schedule, SynthParams};

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("line {line}: {source}")]
    Parse {
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("line {line}: {source}")]
    Structure {
        line: usize,
        #[source]
        source: ModelError,
    },
    #[error("{} invalid trace(s): {}", .failures.len(), summarize(.failures))]
    Invalid { failures: Vec<(String, Vec<Violation>)> },
    #[error("{path}: {message}")]
    Config { path: PathBuf, message: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn summarize(failures: &[(String, Vec<Violation>)]) -> String {
    failures
        .iter()
        .take(5)
        .map(|(id, v)| format!("{id} ({})", v.first().map_or(String::new(), |v| v.to_string())))
        .collect::<Vec<_>>()
        .join("; ")
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> IoError + '_ {
    move |source| IoError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct TokensRecord {
    symbols: Vec<String>,
    blank: usize,
    delimiter: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct LayerRecord {
    i: usize,
    hyp: Option<String>,
    posteriors: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRecord {
    id: String,
    reference: String,
    n_layers: usize,
    i_min: usize,
    tokens: TokensRecord,
    layers: Vec<LayerRecord>,
}

impl TraceRecord {
    fn from_trace(t: &UtteranceTrace) -> Self {
        Self {
            id: t.id.clone(),
            reference: t.reference.clone(),
            n_layers: t.n_layers,
            i_min: t.i_min,
            tokens: TokensRecord {
                symbols: t.tokens.symbols().to_vec(),
                blank: t.tokens.blank_index(),
                delimiter: t.tokens.delimiter_index(),
            },
            layers: t
                .layers
                .iter()
                .map(|l| LayerRecord {
                    i: l.index,
                    hyp: l.hypothesis.clone(),
                    posteriors: l.posteriors.as_ref().map(PosteriorMatrix::to_rows),
                })
                .collect(),
        }
    }

    fn into_trace(self) -> Result<UtteranceTrace, ModelError> {
        let tokens = TokenTable::new(self.tokens.symbols, self.tokens.blank, self.tokens.delimiter)?;
        let layers = self
            .layers
            .into_iter()
            .map(|l| {
                Ok(LayerOutput {
                    index: l.i,
                    posteriors: l.posteriors.map(PosteriorMatrix::from_rows).transpose()?,
                    hypothesis: l.hyp,
                })
            })
            .collect::<Result<Vec<_>, ModelError>>()?;
        Ok(UtteranceTrace {
            id: self.id,
            reference: self.reference,
            n_layers: self.n_layers,
            i_min: self.i_min,
            tokens,
            layers,
        })
    }
}

/// Serializes one trace as a single JSON line (no trailing newline).
pub fn trace_to_json(trace: &UtteranceTrace) -> String {
    serde_json::to_string(&TraceRecord::from_trace(trace)).expect("trace records always serialize")
}

pub fn trace_from_json(line: &str) -> Result<UtteranceTrace, IoError> {
    let record: TraceRecord =
        serde_json::from_str(line).map_err(|source| IoError::Parse { line: 1, source })?;
    record
        .into_trace()
        .map_err(|source| IoError::Structure { line: 1, source })
}

/// Parses trace lines without validating them. Blank lines are skipped.
pub fn read_traces<R: BufRead>(reader: R) -> Result<Vec<UtteranceTrace>, IoError> {
    let mut out = Vec::new();
    for (k, line) in reader.lines().enumerate() {
        let line_no = k + 1;
        let line = line.map_err(|source| IoError::Io {
            path: PathBuf::from(format!("<line {line_no}>")),
            source,
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let record: TraceRecord = serde_json::from_str(&line).map_err(|source| IoError::Parse {
            line: line_no,
            source,
        })?;
        out.push(
            record
                .into_trace()
                .map_err(|source| IoError::Structure { line: line_no, source })?,
        );
    }
    Ok(out)
}

/// Opens a file, transparently un-gzipping it.
pub fn open_maybe_gz(path: &Path) -> Result<Box<dyn BufRead>, IoError> {
    let mut file = BufReader::new(File::open(path).map_err(io_err(path))?);
    let head = file.fill_buf().map_err(io_err(path))?;
    if head.starts_with(&[0x1f, 0x8b]) {
        Ok(Box::new(BufReader::new(MultiGzDecoder::new(file))))
    } else {
        Ok(Box::new(file))
    }
}

/// Reads every trace of a file without validation.
pub fn read_trace_file(path: &Path) -> Result<Vec<UtteranceTrace>, IoError> {
    read_traces(open_maybe_gz(path)?)
}

/// Splits traces into valid ones and per-trace violation lists.
pub fn partition_valid(
    traces: Vec<UtteranceTrace>,
    mode: ValidationMode,
) -> (Vec<UtteranceTrace>, Vec<(String, Vec<Violation>)>) {
    let mut ok = Vec::with_capacity(traces.len());
    let mut bad = Vec::new();
    for t in traces {
        let v = validate_trace_with(&t, mode);
        if v.is_empty() {
            ok.push(t);
        } else {
            bad.push((t.id.clone(), v));
        }
    }
    (ok, bad)
}

/// Loads and validates a corpus. Strict mode fails on any invalid trace;
/// lenient mode drops invalid traces with a warning.
pub fn load_corpus(path: &Path, mode: ValidationMode) -> Result<Corpus, IoError> {
    let (ok, bad) = partition_valid(read_trace_file(path)?, mode);
    if !bad.is_empty() {
        match mode {
            ValidationMode::Strict => return Err(IoError::Invalid { failures: bad }),
            ValidationMode::Lenient => {
                for (id, violations) in &bad {
                    for v in violations {
                        log::warn!("dropping trace {id}: {v}");
                    }
                }
            }
        }
    }
    Ok(Corpus::new(ok)?)
}

pub fn write_traces<'a, W, I>(mut writer: W, traces: I) -> io::Result<()>
where
    W: Write,
    I: IntoIterator<Item = &'a UtteranceTrace>,
{
    for t in traces {
        serde_json::to_writer(&mut writer, &TraceRecord::from_trace(t))?;
        writer.write_all(b"\n")?;
    }
    writer.flush()
}

/// Writes a corpus as JSON Lines, gzip-compressed when the path ends in `.gz`.
pub fn save_corpus(corpus: &Corpus, path: &Path) -> Result<(), IoError> {
    let file = BufWriter::new(File::create(path).map_err(io_err(path))?);
    let gz = path.extension().is_some_and(|e| e == "gz");
    let res = if gz {
        let mut enc = GzEncoder::new(file, Compression::default());
        write_traces(&mut enc, corpus.traces()).and_then(|_| enc.finish().map(drop))
    } else {
        write_traces(file, corpus.traces())
    };
    res.map_err(io_err(path))
}

pub fn load_vocabulary(path: &Path) -> Result<Vocabulary, IoError> {
    let reader = open_maybe_gz(path)?;
    Ok(Vocabulary::from_reader(reader).map_err(io_err(path))??)
}

pub(crate) fn read_to_string(path: &Path) -> Result<String, IoError> {
    let mut s = String::new();
    open_maybe_gz(path)?
        .read_to_string(&mut s)
        .map_err(io_err(path))?;
    Ok(s)
}

/// Parses TOML, or JSON when the extension is `.json`.
pub(crate) fn parse_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = read_to_string(path)?;
    let config_err = |message: String| IoError::Config {
        path: path.to_path_buf(),
        message,
    };
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| config_err(e.to_string()))
    } else {
        toml::from_str(&text).map_err(|e| config_err(e.to_string()))
    }
}

/// Resolves `p` against the directory holding a config file.
pub(crate) fn resolve_relative(config: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        config.parent().unwrap_or(Path::new(".")).join(p)
    }
}

/// On-disk form of [`SynthParams`]. Any omitted field takes its default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthParamsFile {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_utterances")]
    pub n_utterances: usize,
    #[serde(default = "default_n_layers")]
    pub n_layers: usize,
    #[serde(default = "default_i_min")]
    pub i_min: usize,
    /// Word list file; the bundled English list when absent.
    #[serde(default)]
    pub vocab_path: Option<PathBuf>,
    #[serde(default)]
    pub ref_len_range: Option<(usize, usize)>,
    #[serde(default)]
    pub base_error_rate: Option<f64>,
    #[serde(default)]
    pub improvement_rate: Option<f64>,
    #[serde(default)]
    pub degrade_after: Option<usize>,
    #[serde(default)]
    pub degrade_rate: Option<f64>,
    /// Explicit per-layer sharpness values.
    #[serde(default)]
    pub posterior_temperature_schedule: Option<Vec<f64>>,
    /// `[first, last]` sharpness, linearly interpolated across layers.
    #[serde(default)]
    pub sharpness_range: Option<(f64, f64)>,
    #[serde(default)]
    pub uncertain_frame_penalty: Option<f64>,
    #[serde(default)]
    pub emit_posteriors: Option<bool>,
}

fn default_utterances() -> usize {
    200
}
fn default_n_layers() -> usize {
    DEFAULT_N_LAYERS
}
fn default_i_min() -> usize {
    DEFAULT_I_MIN
}

impl SynthParamsFile {
    pub fn load(path: &Path) -> Result<Self, IoError> {
        parse_config(path)
    }

    /// Builds parameters; `vocab_path` is resolved relative to `base`.
    pub fn into_params(self, base: &Path) -> Result<SynthParams, IoError> {
        let vocab = match &self.vocab_path {
            Some(p) => load_vocabulary(&resolve_relative(base, p))?,
            None => Vocabulary::builtin_english(),
        };
        let mut params = SynthParams::new(self.seed, self.n_utterances, vocab);
        params.n_layers = self.n_layers;
        params.i_min = self.i_min;
        params.posterior_temperature_schedule = match (self.posterior_temperature_schedule, self.sharpness_range) {
            (Some(s), _) => s,
            (None, Some((a, b))) => linear_schedule(self.n_layers, self.i_min, a, b),
            (None, None) => linear_schedule(self.n_layers, self.i_min, 5.0, 9.0),
        };
        if let Some(r) = self.ref_len_range {
            params.ref_len_range = r;
        }
        if let Some(v) = self.base_error_rate {
            params.base_error_rate = v;
        }
        if let Some(v) = self.improvement_rate {
            params.improvement_rate = v;
        }
        params.degrade_after = self.degrade_after;
        if let Some(v) = self.degrade_rate {
            params.degrade_rate = v;
        }
        if let Some(v) = self.uncertain_frame_penalty {
            params.uncertain_frame_penalty = v;
        }
        if let Some(v) = self.emit_posteriors {
            params.emit_posteriors = v;
        }
        Ok(params)
    }
}
