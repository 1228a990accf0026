use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use earlyexit_core::oracle::{dp_bound_from_profiles, profile_all};
use earlyexit_core::synth::generate_trace;
use earlyexit_core::{
    ctc_greedy_decode, generate_corpus, levenshtein, run_sweep, Corpus, StrategyConfig, SweepSpec,
    SynthParams, TraceSignals, Vocabulary,
};

fn corpus(n: usize, posteriors: bool) -> Corpus {
    let mut p = SynthParams::new(1, n, Vocabulary::builtin_english());
    p.ref_len_range = (11, 16);
    p.degrade_after = Some(20);
    p.degrade_rate = 0.03;
    p.emit_posteriors = posteriors;
    generate_corpus(&p).unwrap()
}

fn bench_levenshtein(c: &mut Criterion) {
    let a: Vec<char> = "the prisoners asked to see everything he left behind".chars().collect();
    let b: Vec<char> = "the prisiners ased to se everthing he lft behind now".chars().collect();
    c.bench_function("levenshtein/chars_52", |bench| {
        bench.iter(|| levenshtein(black_box(&a), black_box(&b)))
    });
}

fn bench_decode(c: &mut Criterion) {
    let trace = generate_trace(&SynthParams::new(2, 1, Vocabulary::builtin_english()), 0).unwrap();
    let post = trace.layers.last().unwrap().posteriors.clone().unwrap();
    c.bench_function("ctc_greedy_decode", |bench| {
        bench.iter(|| ctc_greedy_decode(black_box(&post), &trace.tokens))
    });
}

fn bench_signals(c: &mut Criterion) {
    let trace = generate_trace(&SynthParams::new(3, 1, Vocabulary::builtin_english()), 0).unwrap();
    let vocab = Vocabulary::builtin_english();
    let mut group = c.benchmark_group("exit_layer");
    for cfg in [
        StrategyConfig::entropy(0.004),
        StrategyConfig::patience_ce(0.3, 2),
        StrategyConfig::patience_lev(0.1, 2),
        StrategyConfig::overlang(0.8, 2),
    ] {
        group.bench_function(cfg.kind.name(), |bench| {
            bench.iter(|| TraceSignals::new(&trace, Some(&vocab)).exit_layer(black_box(&cfg)))
        });
    }
    group.finish();
}

fn bench_oracle(c: &mut Criterion) {
    let mut group = c.benchmark_group("dp_bound");
    for n in [100, 500] {
        let profiles = profile_all(corpus(n, false).traces()).unwrap();
        group.throughput(Throughput::Elements(n as u64));
        group.bench_with_input(BenchmarkId::from_parameter(n), &profiles, |bench, p| {
            bench.iter(|| dp_bound_from_profiles(p).unwrap())
        });
    }
    group.finish();
}

fn bench_sweep(c: &mut Criterion) {
    let corpus = corpus(50, true);
    let vocab = Vocabulary::builtin_english();
    let spec = SweepSpec::with_default_grids(None, "report".into());
    let mut group = c.benchmark_group("sweep");
    group.sample_size(10);
    group.bench_function("default_grids_50", |bench| {
        bench.iter(|| run_sweep(&corpus, &spec, Some(&vocab)).unwrap())
    });
    group.finish();
}

criterion_group!(benches, bench_levenshtein, bench_decode, bench_signals, bench_oracle, bench_sweep);
criterion_main!(benches);
