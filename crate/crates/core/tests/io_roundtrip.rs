use std::io::Write;

use earlyexit_core::io::{read_traces, trace_from_json, trace_to_json, write_traces};
use earlyexit_core::{
    generate_corpus, load_corpus, save_corpus, Corpus, IoError, SynthParams, ValidationMode, Vocabulary,
};
use proptest::prelude::*;

fn small(seed: u64, posteriors: bool) -> Corpus {
    let mut p = SynthParams::new(seed, 6, Vocabulary::builtin_english());
    p.ref_len_range = (1, 6);
    p.emit_posteriors = posteriors;
    generate_corpus(&p).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn save_then_load_is_identity(seed in any::<u64>(), posteriors in any::<bool>(), gz in any::<bool>()) {
        let corpus = small(seed, posteriors);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join(if gz { "c.jsonl.gz" } else { "c.jsonl" });
        save_corpus(&corpus, &path).unwrap();
        let back = load_corpus(&path, ValidationMode::Strict).unwrap();
        prop_assert_eq!(&back, &corpus);
        for t in corpus.traces() {
            prop_assert_eq!(&trace_from_json(&trace_to_json(t)).unwrap(), t);
        }
    }
}

#[test]
fn gzip_is_detected_by_content() {
    let corpus = small(1, true);
    let dir = tempfile::tempdir().unwrap();
    let gz = dir.path().join("c.jsonl.gz");
    save_corpus(&corpus, &gz).unwrap();
    let renamed = dir.path().join("plain-name.jsonl");
    std::fs::rename(&gz, &renamed).unwrap();
    assert_eq!(load_corpus(&renamed, ValidationMode::Lenient).unwrap(), corpus);
}

#[test]
fn lenient_drops_invalid_and_strict_rejects() {
    let corpus = small(2, false);
    let mut buf = Vec::new();
    write_traces(&mut buf, corpus.traces()).unwrap();
    let mut broken = corpus.traces()[0].clone();
    broken.id = "broken".into();
    broken.layers.pop();
    buf.extend_from_slice(trace_to_json(&broken).as_bytes());
    buf.push(b'\n');
    buf.extend_from_slice(b"\n");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mixed.jsonl");
    std::fs::write(&path, &buf).unwrap();
    let lenient = load_corpus(&path, ValidationMode::Lenient).unwrap();
    assert_eq!(lenient.len(), corpus.len());
    assert!(matches!(
        load_corpus(&path, ValidationMode::Strict),
        Err(IoError::Invalid { .. })
    ));
}

#[test]
fn parse_errors_carry_line_numbers() {
    let corpus = small(3, false);
    let mut buf = Vec::new();
    write_traces(&mut buf, corpus.traces()).unwrap();
    writeln!(buf, "{{not json").unwrap();
    match read_traces(buf.as_slice()) {
        Err(IoError::Parse { line, .. }) => assert_eq!(line, corpus.len() + 1),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn missing_file_is_an_io_error() {
    let err = load_corpus("/nonexistent/trace.jsonl".as_ref(), ValidationMode::Lenient).unwrap_err();
    assert!(matches!(err, IoError::Io { .. }));
}
