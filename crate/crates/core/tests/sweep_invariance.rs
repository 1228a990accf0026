use earlyexit_core::oracle::tradeoff_point;
use earlyexit_core::report::write_sweep_csv;
use earlyexit_core::sweep::{default_grids, StrategyGrid};
use earlyexit_core::{
    generate_corpus, run_sweep, Corpus, StrategyConfig, StrategyKind, SweepError, SweepSpec,
    SynthParams, TraceSignals, Vocabulary,
};

fn corpus(n: usize, posteriors: bool) -> Corpus {
    let mut p = SynthParams::new(8, n, Vocabulary::builtin_english());
    p.ref_len_range = (8, 14);
    p.degrade_after = Some(20);
    p.degrade_rate = 0.03;
    p.emit_posteriors = posteriors;
    generate_corpus(&p).unwrap()
}

fn spec() -> SweepSpec {
    SweepSpec::with_default_grids(None, "unused".into())
}

fn csv_of(records: &[earlyexit_core::TradeoffRecord]) -> String {
    let mut buf = Vec::new();
    write_sweep_csv(records, &mut buf).unwrap();
    String::from_utf8(buf).unwrap()
}

#[test]
fn default_sweep_row_counts() {
    let c = corpus(30, true);
    let vocab = Vocabulary::builtin_english();
    let out = run_sweep(&c, &spec(), Some(&vocab)).unwrap();
    let points: usize = default_grids().iter().map(|g| g.points().unwrap().len()).sum();
    assert_eq!(points, 83);
    assert_eq!(out.records.len(), 83 + 15);
    assert_eq!(out.fixed_layer_records().count(), 15);
    assert_eq!(out.n_utterances, c.filter_by_length(10).len());
    let last = out
        .fixed_layer_records()
        .find(|r| r.mean_exit_layer == 24.0)
        .unwrap();
    assert_eq!(last.saved_fraction, 0.0);
    assert_eq!(last.wer, out.oracle.points[0].corpus_wer);
}

#[test]
fn reordering_the_corpus_changes_nothing() {
    let c = corpus(40, true);
    let mut reversed = c.clone().into_traces();
    reversed.reverse();
    reversed.rotate_left(7);
    let r = Corpus::new(reversed).unwrap();
    let vocab = Vocabulary::builtin_english();
    let a = run_sweep(&c, &spec(), Some(&vocab)).unwrap();
    let b = run_sweep(&r, &spec(), Some(&vocab)).unwrap();
    assert_eq!(a.oracle, b.oracle);
    assert_eq!(csv_of(&a.records), csv_of(&b.records));
}

#[test]
fn records_agree_with_per_decision_scoring() {
    let c = corpus(30, true);
    let vocab = Vocabulary::builtin_english();
    let out = run_sweep(&c, &spec(), Some(&vocab)).unwrap();
    for cfg in [StrategyConfig::entropy(0.004), StrategyConfig::patience_lev(0.1, 2), StrategyConfig::overlang(0.8, 2)] {
        let decisions: Vec<_> = c
            .traces()
            .iter()
            .map(|t| TraceSignals::new(t, Some(&vocab)).decide(&cfg).unwrap())
            .collect();
        let point = tradeoff_point(&c, &decisions, 10).unwrap();
        let rec = out
            .records
            .iter()
            .find(|r| r.strategy == cfg.kind.name() && r.tau == cfg.tau && r.rho == cfg.rho)
            .unwrap();
        assert!((rec.wer - point.corpus_wer).abs() < 1e-12);
        assert!((rec.saved_fraction - point.saved_fraction).abs() < 1e-12);
    }
}

#[test]
fn hypothesis_only_corpus_supports_text_strategies() {
    let c = corpus(20, false);
    let vocab = Vocabulary::builtin_english();
    let mut s = SweepSpec::with_default_grids(None, "unused".into());
    s.strategies = vec![
        StrategyGrid::new(StrategyKind::PatienceLev, vec![0.05, 0.1], vec![1, 2]),
        StrategyGrid::new(StrategyKind::Overlang, vec![0.8], vec![2]),
    ];
    assert_eq!(run_sweep(&c, &s, Some(&vocab)).unwrap().records.len(), 5 + 15);
    assert!(matches!(
        run_sweep(&c, &spec(), Some(&vocab)),
        Err(SweepError::Criteria { .. })
    ));
}

#[test]
fn filter_that_removes_everything_is_an_error() {
    let c = corpus(5, false);
    let mut s = spec();
    s.strategies = vec![StrategyGrid::new(StrategyKind::PatienceLev, vec![0.1], vec![1])];
    s.length_filter = 100;
    assert!(matches!(run_sweep(&c, &s, None), Err(SweepError::EmptyAfterFilter(100))));
}
