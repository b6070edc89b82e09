use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use std::hint::black_box;

use nnreg::geometry::build_neighborhood_index;
use nnreg::matching::compute_matching;
use nnreg::solver::{weighted_svd, CloudState, ReferenceState};
use nnreg::training::Trainer;
use nnreg::{register, Point3};
use nnreg_bench::{pair, run_config};

fn svd(c: &mut Criterion) {
    let rc = run_config(1024, "handcrafted");
    let pr = pair(&rc);
    let pairs: Vec<(Point3, Point3)> = pr.p.points().iter().copied().zip(pr.q.points().iter().copied()).collect();
    let w = vec![1.0; pairs.len()];
    c.bench_function("weighted_svd/1024", |b| b.iter(|| weighted_svd(black_box(&pairs), &w).unwrap()));
}

fn knn(c: &mut Criterion) {
    let mut g = c.benchmark_group("knn_index");
    for n in [256, 1024, 4096] {
        let pr = pair(&run_config(n, "handcrafted"));
        g.bench_with_input(BenchmarkId::from_parameter(n), &pr.p, |b, p| {
            b.iter(|| build_neighborhood_index(black_box(p), 8).unwrap())
        });
    }
    g.finish();
}

fn matching(c: &mut Criterion) {
    let mut g = c.benchmark_group("matching");
    for n in [256, 1024] {
        let rc = run_config(n, "edgeconv");
        let model = rc.init_model().unwrap();
        let pr = pair(&rc);
        let k = rc.train.pipeline.k;
        let src = CloudState::build(&pr.p, &model.extractor, k).unwrap();
        let reference = ReferenceState::new(&pr.q, &model, &rc.train.pipeline).unwrap();
        let q = &reference.0;
        let inputs = nnreg::matching::MatchingInputs {
            fp: &src.feat,
            fq: &q.feat,
            fp_hat: &src.feat_hat,
            fq_hat: &q.feat_hat,
            idx_p: &src.idx,
            idx_q: &q.idx,
            idx_p_hat: &src.idx_hat,
            idx_q_hat: &q.idx_hat,
        };
        g.bench_function(BenchmarkId::from_parameter(n), |b| {
            b.iter(|| compute_matching(black_box(&inputs), &rc.train.pipeline.matching).unwrap())
        });
    }
    g.finish();
}

fn pipeline(c: &mut Criterion) {
    let mut g = c.benchmark_group("register");
    g.sample_size(10);
    for backend in ["handcrafted", "edgeconv"] {
        let rc = run_config(256, backend);
        let model = rc.init_model().unwrap();
        let pr = pair(&rc);
        g.bench_function(backend, |b| {
            b.iter(|| register(black_box(&pr.p), &pr.q, &model, &rc.train.pipeline).unwrap())
        });
    }
    g.finish();
}

fn train_step(c: &mut Criterion) {
    let rc = run_config(256, "edgeconv");
    let pr = pair(&rc);
    let mut trainer = Trainer::new(rc.init_model().unwrap(), rc.train.clone()).unwrap();
    let mut g = c.benchmark_group("train_step");
    g.sample_size(10);
    g.bench_function("256", |b| b.iter(|| trainer.step(&pr.p, &pr.q).unwrap()));
    g.finish();
}

criterion_group!(benches, svd, knn, matching, pipeline, train_step);
criterion_main!(benches);
