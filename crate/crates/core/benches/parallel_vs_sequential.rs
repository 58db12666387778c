//! Rayon data-parallel batch paths vs the sequential fallback: rollout
//! sampling and per-example faithfulness reports, the two inner loops that
//! dominate training and evaluation.

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use cotlab::metrics::{evaluate_example, ReferencePair};
use cotlab::model::{Model, ModelConfig, SampleParams};
use cotlab::parallel::{par_map, seq_map};
use cotlab::roles::segment;
use cotlab::task::{build_trace, gen_example, CorpusStyle, Example, TaskConfig};
use cotlab::trainer::derive_seed;
use cotlab::vocab::{Vocab, EOS};

fn bench_model() -> (Model, Vocab, TaskConfig) {
    let v = Vocab::new();
    let cfg = ModelConfig {
        layers: 2,
        heads: 2,
        d_model: 32,
        max_seq: 64,
        vocab_size: v.len(),
        seed: 5,
    };
    (Model::init(cfg), v, TaskConfig { max_operand: 9, ..Default::default() })
}

fn bench_rollout_sampling(c: &mut Criterion) {
    let (model, vocab, task) = bench_model();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let examples: Vec<Example> = (0..16).map(|_| gen_example(&mut rng, &task, &vocab)).collect();
    let params = SampleParams { temperature: 0.7, top_p: 0.9, max_new: 24, eos: EOS };

    let sample_one = |(i, ex): &(usize, &Example)| {
        let mut r = ChaCha8Rng::seed_from_u64(derive_seed(&[9, *i as u64]));
        model.sample(&ex.prompt_tokens, &params, &mut r).unwrap().tokens.len()
    };
    let jobs: Vec<(usize, &Example)> = examples.iter().enumerate().collect();

    let mut group = c.benchmark_group("rollout_16_prompts");
    group.sample_size(10);
    group.bench_with_input(BenchmarkId::new("parallel", 16), &jobs, |b, jobs| {
        b.iter(|| par_map(jobs, sample_one))
    });
    group.bench_with_input(BenchmarkId::new("sequential", 16), &jobs, |b, jobs| {
        b.iter(|| seq_map(jobs, sample_one))
    });
    group.finish();
}

fn bench_report_batch(c: &mut Criterion) {
    let (model, vocab, task) = bench_model();
    let reference = model.snapshot();
    let pair = ReferencePair::new(&model, &reference);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let traces: Vec<Vec<usize>> = (0..16)
        .map(|_| {
            let ex = gen_example(&mut rng, &task, &vocab);
            build_trace(&ex, CorpusStyle::Genuine, &vocab, &mut rng)
        })
        .collect();

    let eval_one = |t: &Vec<usize>| {
        let spans = segment(t).unwrap();
        evaluate_example(&pair, t, &spans).unwrap().kl_de
    };

    let mut group = c.benchmark_group("faithfulness_reports_16");
    group.sample_size(10);
    group.bench_function("parallel", |b| b.iter(|| par_map(&traces, eval_one)));
    group.bench_function("sequential", |b| b.iter(|| seq_map(&traces, eval_one)));
    group.finish();
}

criterion_group!(benches, bench_rollout_sampling, bench_report_batch);
criterion_main!(benches);
