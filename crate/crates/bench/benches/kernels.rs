use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion, Throughput};
use std::hint::black_box;

use metafm::fm::{augmented_grad, RegConfig, RegMode};
use metafm::latent::{factorize_mf, factorize_nnr, MfOptions, NnrOptions, ObservedMatrix};
use metafm::metagraph::{compile_plan, execute_plan, parse_metagraph, CompileOptions, ExecOptions};
use metafm::solvers::{train, Algorithm, Problem, SolverConfig};
use metafm::synth::PlantedFm;
use metafm_bench::{random_csr, review_hin};

fn matmul(c: &mut Criterion) {
    let mut g = c.benchmark_group("csr_matmul");
    for n in [200, 400, 800] {
        let a = random_csr(n, n, 0.02, 1);
        let b = random_csr(n, n, 0.02, 2);
        g.throughput(Throughput::Elements(a.nnz() as u64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |bench, _| {
            bench.iter(|| a.matmul(black_box(&b), usize::MAX).unwrap())
        });
    }
    g.finish();
}

fn similarity(c: &mut Criterion) {
    let hin = review_hin(500, 300, 3);
    let mut g = c.benchmark_group("similarity");
    for text in [
        "M3: U -[rate]- B -[rate~]- U -[rate]- B",
        "M9: U -[write]- R -( -[mention]- A -[mention~]- | -[about]- B -[about~]- )- R -[write~]- U -[rate]- B",
    ] {
        let spec = parse_metagraph(text).unwrap();
        let plan = compile_plan(&spec, &hin, CompileOptions::default()).unwrap();
        g.bench_function(spec.name.as_str(), |b| {
            b.iter(|| execute_plan(&plan, &hin, &ExecOptions::default()).unwrap())
        });
    }
    g.finish();
}

fn latent(c: &mut Criterion) {
    let sim = random_csr(300, 200, 0.1, 4).with_values(|r, c, _| ((r * 7 + c * 3) % 5) as f64 + 1.0);
    let obs = ObservedMatrix::new(300, 200, sim.iter().collect()).unwrap();
    let mut g = c.benchmark_group("latent");
    g.sample_size(10);
    g.bench_function("mf_rank10", |b| {
        b.iter(|| factorize_mf(&obs, 10, 0.1, &MfOptions::default(), "S").unwrap())
    });
    g.bench_function("nnr", |b| {
        b.iter(|| factorize_nnr(&obs, 1.0, &NnrOptions::default(), "S").unwrap())
    });
    g.finish();
}

fn fm(c: &mut Criterion) {
    let (table, layout, _) = PlantedFm::default().generate().unwrap();
    let params = metafm::fm::FmParams::init(layout.d(), 10, 3.0, 0.01, 0);
    let reg = RegConfig::new(RegMode::Lsp, 0.01);
    let mut g = c.benchmark_group("fm");
    g.throughput(Throughput::Elements(table.len() as u64));
    g.bench_function("augmented_grad_n10000", |b| {
        b.iter(|| augmented_grad(black_box(&params), &layout, &reg, &table, None))
    });
    g.sample_size(10);
    for algorithm in [Algorithm::Nmapg, Algorithm::Svrg, Algorithm::Sgd] {
        let problem = Problem {
            train: &table,
            layout: &layout,
            reg,
            k: 10,
            valid: None,
            start: None,
        };
        let cfg = SolverConfig {
            algorithm,
            max_iter: 1,
            tol: 0.0,
            ..Default::default()
        };
        g.bench_function(format!("{algorithm:?}_one_epoch").to_lowercase(), |b| {
            b.iter(|| train(&problem, &cfg).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, matmul, similarity, latent, fm);
criterion_main!(benches);
