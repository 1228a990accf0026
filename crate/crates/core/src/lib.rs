//! Early-exit strategy evaluation over per-layer ASR inference traces.
//!
//! A trace records what every exit head of a layered CTC model produced for
//! one utterance. From a corpus of traces this crate
//!
//! * scores each layer with confidence, patience and vocabulary signals and
//!   decides where an exit strategy would have stopped ([`criteria`]),
//! * measures overthinking and computes the best achievable error count for
//!   every amount of skipped computation ([`oracle`]),
//! * sweeps strategy hyperparameters against fixed-layer baselines and writes
//!   CSV reports ([`sweep`], [`report`]),
//! * generates deterministic synthetic corpora for testing ([`synth`]).

pub mod criteria;
pub mod io;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod report;
pub mod sweep;
pub mod synth;

pub use criteria::{
    evaluate, CeDirection, CriteriaError, ExitDecision, StrategyConfig, StrategyKind, TraceSignals,
};
pub use io::{load_corpus, load_vocabulary, save_corpus, IoError};
pub use metrics::{corpus_wer, ctc_greedy_decode, levenshtein, word_errors, WordErrors};
pub use model::{
    validate_trace, Corpus, LayerOutput, ModelError, PosteriorMatrix, TokenTable, UtteranceTrace,
    ValidationMode, Violation, Vocabulary,
};
pub use oracle::{dp_optimal_bound, LayerErrorProfile, OracleCurve, OracleError, OraclePoint};
pub use report::write_report;
pub use sweep::{run_sweep, SweepError, SweepOutput, SweepSpec, TradeoffRecord};
pub use synth::{generate_corpus, SynthError, SynthParams};
