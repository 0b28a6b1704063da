use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use unroll_tuner::backend::CostModel;
use unroll_tuner::bench_programs::mmxm;
use unroll_tuner::dataset::label_sample;
use unroll_tuner::featurize::extract_features;
use unroll_tuner::generator::rng_for;
use unroll_tuner::interp::execute;
use unroll_tuner::mlp::MlpModel;
use unroll_tuner::ScheduledProgram;
use unroll_tuner_bench::{corpus, training_batch, CLASSES};

fn features(c: &mut Criterion) {
    let progs = corpus(1, 200);
    c.bench_function("extract_features/200", |b| {
        b.iter(|| {
            for sp in &progs {
                black_box(extract_features(sp).unwrap());
            }
        })
    });
}

fn labeling(c: &mut Criterion) {
    let progs = corpus(2, 100);
    let backend = CostModel::default();
    c.bench_function("label_cost_model/100", |b| {
        b.iter(|| {
            for sp in &progs {
                black_box(label_sample(sp, &backend, 1).unwrap());
            }
        })
    });
}

fn interpreter(c: &mut Criterion) {
    let sp = ScheduledProgram::new(mmxm(48));
    c.bench_function("execute/mmxm48", |b| b.iter(|| black_box(execute(&sp))));
}

fn mlp_step(c: &mut Criterion) {
    let (x, y) = training_batch(&corpus(3, 100));
    let model = MlpModel::new(x.cols, CLASSES.to_vec(), 0);
    c.bench_function("mlp_forward_backward/100", |b| {
        b.iter(|| {
            let mut rng = rng_for(0, 0, 7);
            black_box(model.loss_and_gradients(&x, &y, &mut rng).unwrap())
        })
    });
    c.bench_function("mlp_predict/100", |b| b.iter(|| black_box(model.predict_indices(&x).unwrap())));
}

criterion_group!(benches, features, labeling, interpreter, mlp_step);
criterion_main!(benches);
