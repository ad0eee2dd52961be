use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};

use afpa_bench::{clip, random};
use afpa_core::afpa::{mhsa, AfpaConfig, AfpaParams};
use afpa_core::dsp::{log_mel, DspConfig};
use afpa_core::metrics::{auc, pauc, Label, ScoreRecord};
use afpa_core::model::{clip_loss, Architecture, FeatureStats, ModelParams};
use afpa_core::params::bind;
use afpa_core::tensor::Tape;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn matmul(c: &mut Criterion) {
    let a = random(&[128, 312], 1);
    let b = random(&[312, 312], 2);
    c.bench_function("matmul 128x312x312", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let y = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
            black_box(y.to_tensor())
        })
    });
}

fn front_end(c: &mut Criterion) {
    let cfg = DspConfig::default();
    let fb = cfg.filterbank().unwrap();
    let wave = clip(&cfg, false);
    c.bench_function("log_mel 10 s", |bench| bench.iter(|| black_box(log_mel(&wave, &fb, &cfg).unwrap())));
}

fn attention(c: &mut Criterion) {
    let cfg = AfpaConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let params = AfpaParams::init(312, &cfg, &mut rng).unwrap();
    let x = random(&[128, 312], 4);
    c.bench_function("mhsa 6 heads 128x312", |bench| {
        bench.iter(|| {
            let tape = Tape::new();
            let p = bind(&tape, &params);
            let (y, _) = mhsa(tape.constant(x.clone()), &p, cfg.heads).unwrap();
            black_box(y.to_tensor())
        })
    });
}

fn training_step(c: &mut Criterion) {
    let mut group = c.benchmark_group("clip");
    group.sample_size(10);
    for use_afpa in [true, false] {
        let arch = Architecture {
            use_afpa,
            ..Architecture::default()
        };
        let fb = arch.dsp.filterbank().unwrap();
        let wave = clip(&arch.dsp, false);
        let mel = log_mel(&wave, &fb, &arch.dsp).unwrap().data;
        let params = ModelParams::init(&arch, 8, 0).unwrap();
        let stats = FeatureStats::fit([&mel]).unwrap();
        let name = if use_afpa { "afpa" } else { "backbone" };
        group.bench_function(format!("forward+backward {name}"), |bench| {
            bench.iter_batched(
                Tape::new,
                |tape| {
                    let p = bind(&tape, &params);
                    let loss = clip_loss(tape.constant(wave.to_tensor()), tape.constant(mel.clone()), &p, &arch, &stats, 3).unwrap();
                    tape.backward(loss).unwrap();
                    black_box(p.classifier.class_w.grad())
                },
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn metrics(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let records: Vec<ScoreRecord> = (0..10_000)
        .map(|i| ScoreRecord {
            clip_id: i.to_string(),
            machine_type: "fan".into(),
            machine_id: "id_00".into(),
            label: if rng.gen_bool(0.5) { Label::Normal } else { Label::Anomalous },
            score: (rng.gen_range(0.0..100.0_f64)).round(),
        })
        .collect();
    c.bench_function("auc 10k records", |bench| bench.iter(|| black_box(auc(&records).unwrap())));
    c.bench_function("pauc 10k records", |bench| bench.iter(|| black_box(pauc(&records, 0.1).unwrap())));
}

criterion_group!(benches, matmul, front_end, attention, training_step, metrics);
criterion_main!(benches);
