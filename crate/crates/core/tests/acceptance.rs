//! End-to-end acceptance checks. Run with `cargo test --test acceptance`;
//! prints one PASS/FAIL line per criterion and fails if any criterion fails.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use afpa_core::afpa::{attention_head, fuse, mhsa, residual_enhance, segment, AfpaConfig, AfpaParams};
use afpa_core::checkpoint;
use afpa_core::corpus::{build_corpus, decode, encode, read_dataset, tensor_read, tensor_write, CorpusConfig, Split};
use afpa_core::dsp::{load_wav, log_mel, log_mel_on_tape, write_wav, DspConfig, SampleFormat, Waveform};
use afpa_core::eval::score_dataset;
use afpa_core::metrics::{auc, pauc, read_scores, report, write_scores, MachineMetrics, MetricReport};
use afpa_core::model::{
    arcface_logits, classifier_forward, clip_loss, id_loss, Architecture, ClassifierConfig, ClassifierParams,
    FeatureStats, Model, ModelParams,
};
use afpa_core::params::{bind, ParamTree};
use afpa_core::tensor::{
    arc_margin, concat, conv1d, cross_entropy_with_logits, depthwise_conv2d, global_avg_pool, grad_check,
    grad_check_many, layer_norm, linear, pointwise_conv2d, Tape, Tensor, Var,
};
use afpa_core::tgram::{tgram_forward, TgramConfig, TgramNetParams};
use afpa_core::trainer::{train, TrainConfig};
use afpa_core::{Error, RunConfig};

use common::{pairwise_auc, records, sweep_pauc};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn ok<T>(r: afpa_core::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Projects a tensor output onto fixed random weights to get a scalar.
fn probe<'t>(tape: &'t Tape, y: Var<'t>, seed: u64) -> afpa_core::Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = Tensor::from_fn(&y.shape(), |_| rng.gen_range(-1.0..1.0));
    y.mul(tape.constant(r)).map(|v| v.sum())
}

fn tiny_arch(use_afpa: bool) -> Architecture {
    Architecture {
        dsp: DspConfig {
            n_fft: 64,
            hop: 32,
            n_mels: 8,
            n_frames: 12,
            ..DspConfig::default()
        },
        tgram: TgramConfig::default(),
        afpa: AfpaConfig { heads: 2, init_std: 0.1 },
        classifier: ClassifierConfig {
            widths: vec![4, 8, 8, 8],
            embedding_dim: 8,
            ..ClassifierConfig::default()
        },
        use_afpa,
    }
}

fn waveform_loss<'t>(w: Var<'t>, q: &ModelParams<Var<'t>>, arch: &Architecture, stats: &FeatureStats) -> afpa_core::Result<Var<'t>> {
    let fb = arch.dsp.filterbank()?;
    let lm = log_mel_on_tape(w.tape(), w, &fb, &arch.dsp)?;
    clip_loss(w, lm, q, arch, stats, 1)
}

fn gradient_suite() -> Check {
    const H: f64 = 1e-6;
    const TOL: f64 = 1e-5;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst: (f64, String) = (0.0, String::new());
    let mut record = |name: &str, err: afpa_core::Result<f64>| -> Result<(), String> {
        let err = ok(err)?;
        ensure(err < TOL, || format!("{name}: relative error {err:e}"))?;
        if err > worst.0 {
            worst = (err, name.to_string());
        }
        Ok(())
    };

    let a = random(&mut rng, &[3, 4]);
    let b = random(&mut rng, &[4, 5]);
    let c = random(&mut rng, &[3, 4]);
    record("matmul", grad_check_many(|t, v| probe(t, v[0].matmul(v[1])?, 1), &[a.clone(), b], H))?;
    record("add", grad_check_many(|t, v| probe(t, v[0].add(v[1])?, 2), &[a.clone(), c.clone()], H))?;
    record("mul", grad_check_many(|t, v| probe(t, v[0].mul(v[1])?, 3), &[a.clone(), c.clone()], H))?;
    record("scale", grad_check(|t, v| probe(t, v.scale(-2.5), 4), &a, H))?;
    record("add_scalar", grad_check(|t, v| probe(t, v.add_scalar(0.7), 5), &a, H))?;
    record("ln", grad_check(|t, v| probe(t, v.ln()?, 6), &a.map(|v| v.abs() + 0.5), H))?;
    record("sum", grad_check(|_, v| Ok(v.sum()), &a, H))?;
    record("mean", grad_check(|_, v| Ok(v.mean()), &a, H))?;
    let away = a.map(|v| if v.abs() < 0.05 { v + 0.2 } else { v });
    record("leaky_relu", grad_check(|t, v| probe(t, v.leaky_relu(0.01), 7), &away, H))?;
    record("transpose", grad_check(|t, v| probe(t, v.transpose()?, 8), &a, H))?;
    record("reshape", grad_check(|t, v| probe(t, v.reshape(&[2, 6])?, 9), &a, H))?;
    record("narrow", grad_check(|t, v| probe(t, v.narrow(1, 1, 2)?, 10), &a, H))?;
    record("mean_axis", grad_check(|t, v| probe(t, v.mean_axis(0)?, 11), &a, H))?;
    record("softmax_rows", grad_check(|t, v| probe(t, v.softmax_rows()?, 12), &a, H))?;
    record("l2_normalize", grad_check(|t, v| probe(t, v.l2_normalize()?, 13), &a, H))?;
    record("pick", grad_check(|_, v| v.pick(5), &a, H))?;
    record("concat", grad_check_many(|t, v| probe(t, concat(&[v[0], v[1]], 0)?, 14), &[a.clone(), c.clone()], H))?;
    let (g, bt) = (random(&mut rng, &[4]), random(&mut rng, &[4]));
    record(
        "layer_norm",
        grad_check_many(|t, v| probe(t, layer_norm(v[0], Some(v[1]), Some(v[2]), 1, 1e-5)?, 15), &[a.clone(), g, bt], H),
    )?;
    let (x, w, bias) = (random(&mut rng, &[5]), random(&mut rng, &[3, 5]), random(&mut rng, &[3]));
    record("linear", grad_check_many(|t, v| probe(t, linear(v[0], v[1], Some(v[2]))?, 16), &[x, w, bias], H))?;
    let (sig, ker, kb) = (random(&mut rng, &[2, 9]), random(&mut rng, &[3, 2, 3]), random(&mut rng, &[3]));
    record("conv1d", grad_check_many(|t, v| probe(t, conv1d(v[0], v[1], Some(v[2]), 2, 1)?, 17), &[sig, ker, kb], H))?;
    let img = random(&mut rng, &[3, 5, 6]);
    let (dw, db) = (random(&mut rng, &[3, 3, 3]), random(&mut rng, &[3]));
    record(
        "depthwise_conv2d",
        grad_check_many(|t, v| probe(t, depthwise_conv2d(v[0], v[1], Some(v[2]), 2, 1)?, 18), &[img.clone(), dw, db], H),
    )?;
    let (pw, pb) = (random(&mut rng, &[4, 3]), random(&mut rng, &[4]));
    record(
        "pointwise_conv2d",
        grad_check_many(|t, v| probe(t, pointwise_conv2d(v[0], v[1], Some(v[2]))?, 19), &[img.clone(), pw, pb], H),
    )?;
    record("global_avg_pool", grad_check(|t, v| probe(t, global_avg_pool(v)?, 20), &img, H))?;
    record("cross_entropy", grad_check(|_, v| cross_entropy_with_logits(v, 2), &random(&mut rng, &[5]), H))?;
    let cos = Tensor::new(&[3], vec![0.3, -0.2, 0.8]).unwrap();
    record("arc_margin", grad_check(|t, v| probe(t, arc_margin(v, 0, 1.0, 30.0)?, 21), &cos, H))?;
    let cos = Tensor::new(&[2], vec![-0.9, 0.1]).unwrap();
    record("arc_margin (guard branch)", grad_check(|t, v| probe(t, arc_margin(v, 0, 1.0, 30.0)?, 22), &cos, H))?;

    // pipeline stages on the tiny configuration
    let arch = tiny_arch(true);
    let fb = ok(arch.dsp.filterbank())?;
    let wave = random(&mut rng, &[1, 416]).map(|v| 0.5 * v);
    record("log_mel", grad_check(|t, w| probe(t, log_mel_on_tape(t, w, &fb, &arch.dsp)?, 23), &wave, H))?;
    let tg = TgramNetParams::init(&arch.dsp, &arch.tgram, &mut rng);
    let tg_tensors: Vec<Tensor> = tg.named().into_iter().map(|(_, t)| t.clone()).collect();
    record(
        "tgram",
        grad_check_many(
            |t, v| {
                let mut p = bind(t, &tg);
                for ((_, slot), var) in p.named_mut().into_iter().zip(v) {
                    *slot = *var;
                }
                probe(t, tgram_forward(t.constant(wave.clone()), &p, &arch.dsp, &arch.tgram)?, 24)
            },
            &tg_tensors,
            H,
        ),
    )?;
    let xf = random(&mut rng, &[8, 12]);
    let at = ok(AfpaParams::init(12, &arch.afpa, &mut rng))?;
    record(
        "residual_enhance",
        grad_check_many(
            |t, v| {
                let p = AfpaParams { w_q: v[1], w_k: v[2], w_v: v[3] };
                probe(t, residual_enhance(v[0], &p, 2)?.0, 25)
            },
            &[xf.clone(), at.w_q.clone(), at.w_k.clone(), at.w_v.clone()],
            H,
        ),
    )?;
    let xt = random(&mut rng, &[8, 12]);
    let cls = ok(ClassifierParams::init(&arch.classifier, 2, &mut rng))?;
    let cls_tensors: Vec<Tensor> = cls.named().into_iter().map(|(_, t)| t.clone()).collect();
    let mut inputs = vec![xf.clone(), xt];
    inputs.extend(cls_tensors);
    record(
        "fuse + classifier + arcface loss",
        grad_check_many(
            |t, v| {
                let mut p = bind(t, &cls);
                for ((_, slot), var) in p.named_mut().into_iter().zip(&v[2..]) {
                    *slot = *var;
                }
                let e = classifier_forward(fuse(v[0], v[1])?, &p, &arch.classifier)?;
                id_loss(arcface_logits(e, p.class_w, Some(0), 1.0, 30.0)?, 0)
            },
            &inputs,
            H,
        ),
    )?;

    // the whole waveform-to-loss function, both pipelines
    for use_afpa in [true, false] {
        let arch = tiny_arch(use_afpa);
        let p = ok(ModelParams::init(&arch, 2, 11))?;
        let stats = FeatureStats {
            mean: (0..8).map(|r| -4.0 + 0.3 * r as f64).collect(),
            std: (0..8).map(|r| 3.0 - 0.2 * r as f64).collect(),
        };
        let mut tensors: Vec<Tensor> = p.named().into_iter().map(|(_, t)| t.clone()).collect();
        tensors.push(wave.clone());
        let name = if use_afpa { "composite (AFPA)" } else { "composite (backbone)" };
        record(
            name,
            grad_check_many(
                |tape, v| {
                    let mut q = bind(tape, &p);
                    for ((_, slot), var) in q.named_mut().into_iter().zip(v) {
                        *slot = *var;
                    }
                    waveform_loss(*v.last().unwrap(), &q, &arch, &stats)
                },
                &tensors,
                H,
            ),
        )?;
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("max relative error {:.2e} ({}), {secs:.1} s", worst.0, worst.1))
}

fn attention_invariants() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut worst_row: f64 = 0.0;
    let mut worst_single: f64 = 0.0;
    for trial in 0..100 {
        let heads = [1, 2, 3, 4, 6][trial % 5];
        let m = rng.gen_range(2..10);
        let n = heads * rng.gen_range(1..5);
        let x = random(&mut rng, &[m, n]).map(|v| 3.0 * v);
        let p = AfpaParams {
            w_q: random(&mut rng, &[n, n]),
            w_k: random(&mut rng, &[n, n]),
            w_v: random(&mut rng, &[n, n]),
        };
        let tape = Tape::new();
        let bound = p.map(&mut |t: &Tensor| tape.constant(t.clone()));
        let xv = tape.constant(x.clone());
        let (_, maps) = ok(mhsa(xv, &bound, heads))?;
        for d in &maps {
            let d = d.to_tensor();
            for r in 0..m {
                worst_row = worst_row.max((d.row(r).iter().sum::<f64>() - 1.0).abs());
                ensure(d.row(r).iter().all(|&v| v >= 0.0), || "negative attention weight".into())?;
            }
        }

        let zero_v = AfpaParams {
            w_v: tape.constant(Tensor::zeros(&[n, n])),
            ..bound.clone()
        };
        let (same, _) = ok(residual_enhance(xv, &zero_v, heads))?;
        ensure(same.to_tensor() == x, || format!("trial {trial}: W_V = 0 changed the feature"))?;

        let parts = ok(segment(&x, heads))?;
        let vars: Vec<Var> = parts.into_iter().map(|s| tape.constant(s)).collect();
        ensure(ok(concat(&vars, 1))?.to_tensor() == x, || format!("trial {trial}: segments do not concatenate back"))?;

        let (multi, _) = ok(mhsa(xv, &bound, 1))?;
        let q = ok(xv.matmul(bound.w_q))?;
        let k = ok(xv.matmul(bound.w_k))?;
        let v = ok(xv.matmul(bound.w_v))?;
        let (single, _) = ok(attention_head(q, k, v))?;
        let diff = multi.to_tensor().max_abs_diff(&single.to_tensor()).unwrap_or(f64::INFINITY);
        worst_single = worst_single.max(diff);
    }
    ensure(worst_row <= 1e-6, || format!("row sum off by {worst_row:e}"))?;
    ensure(worst_single <= 1e-12, || format!("single-head mismatch {worst_single:e}"))?;
    Ok(format!(
        "100 inputs: row-sum error {worst_row:.1e}, W_V=0 identity exact, segments exact, one-head diff {worst_single:.1e}"
    ))
}

fn metric_oracles() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut worst_auc, mut worst_pauc): (f64, f64) = (0.0, 0.0);
    for set in 0..1000 {
        let n = rng.gen_range(2..=200);
        let levels = rng.gen_range(2..400);
        let mut s: Vec<(f64, bool)> = (0..n)
            .map(|_| (f64::from(rng.gen_range(0..levels)) / 1000.0, rng.gen_bool(0.4)))
            .collect();
        // guaranteed ties and both labels
        let dup = s[0].0;
        s[1] = (dup, !s[0].1);
        let r = records(&s);
        worst_auc = worst_auc.max((ok(auc(&r))? - pairwise_auc(&s)).abs());
        let p = [0.1, 0.05, 0.3, 1.0][set % 4];
        let got = ok(pauc(&r, p))?;
        worst_pauc = worst_pauc.max((got - sweep_pauc(&s, p, 1_000_000)).abs());
    }
    ensure(worst_auc <= 1e-6, || format!("auc differs by {worst_auc:e}"))?;
    ensure(worst_pauc <= 1e-6, || format!("pauc differs by {worst_pauc:e}"))?;
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("1000 sets: auc diff {worst_auc:.1e}, pauc diff {worst_pauc:.1e}, {secs:.1} s"))
}

fn table_one() -> Check {
    let types = ["ToyCar", "ToyConveyor", "fan", "pump", "slider", "valve"];
    let rows = [
        ("ASD-AFPA", [97.55, 94.46, 99.69, 99.12, 96.15, 76.49], [93.48, 86.76, 98.40, 95.42, 89.45, 64.21], 93.91, 87.95),
        ("backbone", [94.04, 91.94, 99.55, 99.64, 94.44, 74.57], [88.97, 81.75, 97.61, 98.44, 87.68, 63.60], 92.36, 86.34),
    ];
    let mut detail = Vec::new();
    for (name, aucs, paucs, want_auc, want_pauc) in rows {
        let machines = types
            .iter()
            .zip(aucs.iter().zip(paucs))
            .map(|(t, (&a, p))| MachineMetrics {
                machine_type: t.to_string(),
                machine_id: "all".into(),
                auc: Some(a),
                pauc: Some(p),
            })
            .collect();
        let r = MetricReport::from_machines(machines, 0.1);
        let (a, p) = (r.average_auc.unwrap(), r.average_pauc.unwrap());
        ensure((a - want_auc).abs() < 0.005 && (p - want_pauc).abs() < 0.005, || {
            format!("{name}: {a:.4} / {p:.4}, expected {want_auc} / {want_pauc}")
        })?;
        detail.push(format!("{name} {a:.3} / {p:.3}"));
    }
    Ok(detail.join(", "))
}

struct Ablation {
    afpa: Model,
    data: tempfile::TempDir,
}

fn mean_test_auc(model: &Model, root: &Path) -> Result<f64, String> {
    let data = ok(read_dataset(root))?;
    let scores = ok(score_dataset(model, &data))?;
    ok(report(&scores, 0.1))?.average_auc.ok_or_else(|| "no defined AUC".to_string())
}

fn scaled_ablation(keep: &mut Option<Ablation>) -> Check {
    let started = Instant::now();
    let cfg = RunConfig::default();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    ok(build_corpus(&cfg.corpus, cfg.dsp.sample_rate, cfg.dsp.clip_len(), dir.path(), false))?;
    let data = ok(read_dataset(dir.path()))?;
    let mut results = Vec::new();
    for use_afpa in [true, false] {
        let mut arch = cfg.architecture();
        arch.use_afpa = use_afpa;
        let trainer = TrainConfig { use_afpa, ..cfg.trainer.clone() };
        let outcome = ok(train(&data, &arch, &trainer, |_| {}))?;
        let first = outcome.log[1].mean_loss;
        ensure(first < outcome.log[0].mean_loss, || format!("epoch 1 loss {first} not below the untrained loss"))?;
        let mean = mean_test_auc(&outcome.model, dir.path())?;
        results.push((mean, outcome.model));
    }
    let (bb_auc, _) = results.pop().unwrap();
    let (afpa_auc, afpa) = results.pop().unwrap();
    let secs = started.elapsed().as_secs_f64();
    let detail = format!("AFPA mean AUC {afpa_auc:.4}, backbone {bb_auc:.4}, {:.1} min", secs / 60.0);
    *keep = Some(Ablation { afpa, data: dir });
    ensure(afpa_auc >= bb_auc && afpa_auc >= 0.85, || detail.clone())?;
    Ok(detail)
}

fn localization(ablation: &Option<Ablation>) -> Check {
    let Some(Ablation { afpa, data }) = ablation else {
        return Err("no trained AFPA model (scaled ablation did not complete)".into());
    };
    let ds = ok(read_dataset(data.path()))?;
    let band = afpa.filterbank().bins_covering(6000.0);
    let uniform = 1.0 / afpa.filterbank().n_mels() as f64;
    let mut above = 0;
    let mut total = 0;
    for e in ds.split(Split::TestAnomalous) {
        let wave = ok(ds.load(e))?;
        let pattern = ok(afpa.infer(&wave))?.pattern.ok_or("model has no attention stage")?;
        total += 1;
        if pattern.column_mass(&band) > uniform {
            above += 1;
        }
    }
    let share = above as f64 / total as f64;
    let detail = format!("{above}/{total} defect clips above 1/M over {} bins ({:.0}%)", band.len(), 100.0 * share);
    ensure(share >= 0.8, || detail.clone())?;
    Ok(detail)
}

fn end_to_end(dir: &Path, threads: usize) -> Result<(Vec<u8>, Vec<u8>, String, String), String> {
    let mut cfg = RunConfig::default();
    cfg.corpus = CorpusConfig {
        seed: 5,
        train_clips: 4,
        test_normal_clips: 2,
        test_anomalous_clips: 2,
        ..CorpusConfig::default()
    };
    cfg.trainer.epochs = 2;
    cfg.trainer.seed = 5;
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build().map_err(|e| e.to_string())?;
    pool.install(|| {
        let data_dir = dir.join("data");
        ok(build_corpus(&cfg.corpus, cfg.dsp.sample_rate, cfg.dsp.clip_len(), &data_dir, false))?;
        let data = ok(read_dataset(&data_dir))?;
        let outcome = ok(train(&data, &cfg.architecture(), &cfg.trainer, |_| {}))?;
        let ckpt = dir.join("ckpt");
        ok(checkpoint::save(&outcome.model, &ckpt, &cfg.hash()))?;
        let (model, _) = ok(checkpoint::load(&ckpt))?;
        let scores = ok(score_dataset(&model, &data))?;
        let r = ok(report(&scores, cfg.metrics.max_fpr))?;
        let read = |p: &Path| std::fs::read(p).map_err(|e| e.to_string());
        Ok((
            read(&ckpt.join(checkpoint::PARAMS_FILE))?,
            read(&ckpt.join(checkpoint::MANIFEST_FILE))?,
            r.to_csv(),
            r.to_table(),
        ))
    })
}

fn determinism() -> Check {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let first = end_to_end(a.path(), 1)?;
    let second = end_to_end(b.path(), 2)?;
    ensure(first.0 == second.0, || "parameter files differ".into())?;
    ensure(first.1 == second.1, || "checkpoint manifests differ".into())?;
    ensure(first.2 == second.2 && first.3 == second.3, || "reports differ".into())?;
    Ok(format!(
        "two synth/train/eval runs (1 and 2 threads) agree: {} parameter bytes, reports identical",
        first.0.len()
    ))
}

fn format_round_trips() -> Check {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);

    let pcm: Vec<f64> = (0..4000).map(|_| f64::from(rng.gen_range(-32768i32..32768)) / 32768.0).collect();
    let wave = ok(Waveform::new(pcm, 16000, "pcm"))?;
    let path = dir.path().join("pcm.wav");
    ok(write_wav(&path, &wave, SampleFormat::Pcm16))?;
    ensure(ok(load_wav(&path))?.samples() == wave.samples(), || "16-bit WAV changed".into())?;
    let float: Vec<f64> = (0..4000).map(|_| f64::from(rng.gen_range(-1.0f32..1.0))).collect();
    let wave = ok(Waveform::new(float, 22050, "float"))?;
    let path = dir.path().join("float.wav");
    ok(write_wav(&path, &wave, SampleFormat::Float32))?;
    let back = ok(load_wav(&path))?;
    ensure(back.samples() == wave.samples() && back.sample_rate() == 22050, || "float WAV changed".into())?;

    let cfg = DspConfig::default();
    let clip = ok(Waveform::new((0..cfg.clip_len()).map(|i| (i as f64 * 0.37).sin() * 0.3).collect(), 16000, "c"))?;
    let feature = ok(log_mel(&clip, &ok(cfg.filterbank())?, &cfg))?.data;
    let f32_feature = feature.map(|v| f64::from(v as f32));
    let path = dir.path().join("feature.aft");
    ok(tensor_write(&path, &[("log_mel".to_string(), feature.clone())]))?;
    let back = ok(tensor_read(&path))?;
    ensure(back[0].1.max_abs_diff(&f32_feature) == Some(0.0), || "128x312 feature changed at 32-bit".into())?;

    let mut bytes = ok(encode(&[("w".to_string(), f32_feature)]))?;
    bytes[40] ^= 0x10;
    ensure(matches!(decode(&bytes, "flipped"), Err(Error::Corruption { .. })), || "flipped bit not detected".into())?;
    for cut in [1, 100, bytes.len() / 2, bytes.len() - 1] {
        ensure(matches!(decode(&bytes[..cut], "cut"), Err(Error::Corruption { .. })), || format!("truncation at {cut} not detected"))?;
    }

    let arch = tiny_arch(true);
    let classes = afpa_core::model::ClassMap::from_pairs([("fan", "id_00"), ("fan", "id_01")]);
    let mut params = ok(ModelParams::init(&arch, 2, 3))?;
    for (_, t) in params.named_mut() {
        *t = t.map(|v| f64::from(v as f32));
    }
    let stats = FeatureStats {
        mean: (0..8).map(|r| -3.25 + 0.5 * r as f64).collect(),
        std: (0..8).map(|r| 1.7 + 0.1 * r as f64).collect(),
    };
    let model = ok(Model::new(arch, params, classes, stats))?;
    let ckpt = dir.path().join("ckpt");
    ok(checkpoint::save(&model, &ckpt, "hash"))?;
    let (loaded, manifest) = ok(checkpoint::load(&ckpt))?;
    ensure(loaded.params == model.params && loaded.stats == model.stats && manifest.config_hash == "hash", || {
        "checkpoint changed".into()
    })?;
    let probe_wave = ok(Waveform::new((0..2000).map(|i| (i as f64 * 0.05).cos() * 0.2).collect(), 16000, "p"))?;
    let lm = ok(model.log_mel(&probe_wave))?;
    for claimed in 0..2 {
        let (x, y) = (ok(model.score_with(&probe_wave, &lm, claimed))?, ok(loaded.score_with(&probe_wave, &lm, claimed))?);
        ensure(x.to_bits() == y.to_bits(), || format!("score {x} became {y}"))?;
    }

    let s: Vec<(f64, bool)> = (0..50).map(|i| (rng.gen_range(-1e3..1e3), i % 3 == 0)).collect();
    let recs = records(&s);
    let path = dir.path().join("scores.csv");
    ok(write_scores(&path, &recs))?;
    ensure(ok(read_scores(&path))? == recs, || "score CSV changed".into())?;
    Ok("WAV (16-bit, float), TensorFile, checkpoint and score CSV exact; corruption detected".into())
}

fn main() {
    let mut ablation = None;
    let mut failures = 0;
    let mut run = |n: usize, name: &str, f: &mut dyn FnMut() -> Check| {
        let started = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = started.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n} {name}: PASS ({detail}) [{secs:.1} s]"),
            Err(detail) => {
                failures += 1;
                println!("criterion {n} {name}: FAIL ({detail}) [{secs:.1} s]");
            }
        }
    };
    run(1, "gradient suite", &mut gradient_suite);
    run(2, "attention invariants", &mut attention_invariants);
    run(3, "metric oracles", &mut metric_oracles);
    run(4, "table arithmetic", &mut table_one);
    run(5, "scaled ablation", &mut || scaled_ablation(&mut ablation));
    run(6, "frequency-pattern localization", &mut || localization(&ablation));
    run(7, "determinism", &mut determinism);
    run(8, "format round-trips", &mut format_round_trips);
    if failures > 0 {
        println!("{failures} criteria failed");
        std::process::exit(1);
    }
}
