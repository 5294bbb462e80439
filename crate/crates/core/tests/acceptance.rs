//! Acceptance gate. Runs every criterion in sequence, prints one PASS/FAIL
//! line each and exits non-zero if any fails.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use simon_core::bench::{run_bench, BenchConfig};
use simon_core::config::{ModelConfig, TrainConfig};
use simon_core::context::assemble_kv_q;
use simon_core::decoder::{decode_stream, ActionInstance, DecoderState};
use simon_core::eval::{
    average_precision, chunks_to_seconds, default_offsets, detections_from_instances, gt_quantize_merge,
    ground_truth_from_instances, map_over_thresholds, point_map, tiou, Detection, GroundTruth, Interval,
    StartPoint, TimedInstance,
};
use simon_core::model::{ActionProbabilities, SimOn};
use simon_core::nn::positional_encoding;
use simon_core::tensor::Tensor;
use simon_core::train::{accumulate_full, focal_loss, synth_dataset, Sequence, SynthConfig, Trainer};
use std::time::Instant;

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn randn_rows(rng: &mut ChaCha8Rng, t: usize, d: usize) -> Vec<Vec<f64>> {
    (0..t).map(|_| Tensor::randn(&[d], 1.0, rng).into_data()).collect()
}

fn stream_loss(model: &SimOn, seq: &Sequence) -> f64 {
    let out = model.run_stream(&seq.features).unwrap();
    out.iter()
        .zip(&seq.labels)
        .map(|(c, y)| focal_loss(&c.probs, y, 0.25, 2.0).unwrap())
        .sum()
}

fn nudged(model: &SimOn, group: usize, j: usize, delta: f64) -> SimOn {
    let mut m = model.clone();
    let mut i = 0;
    m.params.for_each_mut(&mut |_, p| {
        if i == group {
            p.value.data_mut()[j] += delta;
        }
        i += 1;
    });
    m
}

fn gradient() -> Outcome {
    let start = Instant::now();
    let cfg = ModelConfig {
        classes: 5,
        ..ModelConfig::toy(8, 5, 3)
    };
    let mut model = SimOn::init(cfg, 21).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let features = randn_rows(&mut rng, 3, 8);
    let labels: Vec<Vec<f64>> = (0..3)
        .map(|_| (0..5).map(|_| f64::from(rng.random_bool(0.4) as u8)).collect())
        .collect();
    let seq = Sequence::new(features, labels).unwrap();

    model.params.zero_grad();
    let loss = accumulate_full(&mut model, &seq, 0.25, 2.0, 1.0, None).unwrap();
    check((loss - stream_loss(&model, &seq)).abs() < 1e-12, || "graph loss differs from streamed loss".into())?;

    let analytic: Vec<Vec<f64>> = model.params.leaves().iter().map(|p| p.grad.data().to_vec()).collect();
    let names = model.params.names();
    // A step of 1e-3 can straddle a ReLU hinge inside the FFN, where central
    // differences are meaningless; 1e-5 keeps truncation and rounding error
    // both far below the tolerance.
    let h = 1e-5;
    let mut worst = (0.0f64, String::new());
    for (g, name) in names.iter().enumerate() {
        let mut err: f64 = 0.0;
        let mut scale: f64 = 0.0;
        for j in 0..analytic[g].len() {
            let up = stream_loss(&nudged(&model, g, j, h), &seq);
            let down = stream_loss(&nudged(&model, g, j, -h), &seq);
            let numeric = (up - down) / (2.0 * h);
            err = err.max((analytic[g][j] - numeric).abs());
            scale = scale.max(numeric.abs());
        }
        let rel = err / scale.max(1e-6);
        if rel > worst.0 {
            worst = (rel, name.clone());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let msg = format!(
        "max relative error {:.2e} ({}) over {} groups, {} parameters, {secs:.1} s",
        worst.0,
        worst.1,
        names.len(),
        model.param_count()
    );
    check(worst.0 < 1e-4 && secs < 60.0, || msg.clone())?;
    Ok(msg)
}

fn causality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t_len = 30;
    for s in 0..50u64 {
        let model = SimOn::init(ModelConfig::toy(8, 3, 1 + (s as usize % 7)), s).unwrap();
        let x = randn_rows(&mut rng, t_len, 8);
        let full = model.run_stream(&x).unwrap();
        for t in 1..=t_len {
            let prefix = model.run_stream(&x[..t]).unwrap();
            check(prefix[..] == full[..t], || format!("stream {s}: prefix {t} differs"))?;
            let mut y = x.clone();
            for row in &mut y[t..] {
                *row = Tensor::randn(&[8], 5.0, &mut rng).into_data();
            }
            let other = model.run_stream(&y).unwrap();
            check(other[..t] == full[..t], || format!("stream {s}: suffix after {t} leaks"))?;
        }
    }
    Ok("50 streams of 30 steps, every prefix bit-identical".into())
}

fn schedule() -> Outcome {
    for k in [1usize, 3, 7] {
        let model = SimOn::init(ModelConfig::toy(8, 3, k), 4).unwrap();
        let d = model.config.d_model;
        let mut rng = ChaCha8Rng::seed_from_u64(k as u64);
        let x = randn_rows(&mut rng, 3 * k + 3, 8);
        let mut state = model.init_state();
        let mut zs: Vec<Tensor> = Vec::new();
        let add = |a: &Tensor, b: &Tensor| -> Vec<f64> { a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect() };
        for (i, f) in x.iter().enumerate() {
            let t = i + 1;
            let (kv, _) = assemble_kv_q(&state, f, &model).unwrap();
            let want_rows = if t <= k { t + 1 } else { k + 1 };
            check(kv.rows() == want_rows && state.key_count() == want_rows, || {
                format!("k={k} t={t}: {} rows, expected {want_rows}", kv.rows())
            })?;
            let mut expect: Vec<Vec<f64>> = Vec::new();
            if t <= k {
                expect.push(add(&model.params.e.value, &positional_encoding(0, d)));
            }
            let first_z = zs.len().saturating_sub(k);
            expect.extend(zs[first_z..].iter().map(|z| z.data().to_vec()));
            expect.push(add(state.context_embedding(), &positional_encoding(k, d)));
            for (r, row) in expect.iter().enumerate() {
                check(kv.row_slice(r) == row.as_slice(), || format!("k={k} t={t}: row {r} differs"))?;
            }
            let (c, q) = model.forward_step(&state, f, None).unwrap();
            state.advance(&q, &c, &model).unwrap();
            zs.push(state.ring().last().unwrap().z.clone());
        }
    }
    Ok("k in {1,3,7}: L=2 at t=1, L=t+1 up to k, L=k+1 without E afterwards".into())
}

/// Offline scan for maximal runs at or above the threshold.
fn runs_oracle(rows: &[Vec<f64>], thr: f64) -> Vec<(usize, usize, usize, f64)> {
    let mut out = Vec::new();
    let classes = rows[0].len();
    for c in 0..classes {
        let mut open: Option<usize> = None;
        for t in 0..=rows.len() {
            let on = t < rows.len() && rows[t][c] >= thr;
            match (open, on) {
                (None, true) => open = Some(t),
                (Some(s), false) => {
                    let mean = rows[s..t].iter().map(|r| r[c]).sum::<f64>() / (t - s) as f64;
                    out.push((c, s, t - 1, mean));
                    open = None;
                }
                _ => {}
            }
        }
    }
    out.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
    out
}

fn as_probs(rows: &[Vec<f64>]) -> Vec<ActionProbabilities> {
    rows.iter()
        .enumerate()
        .map(|(t, p)| ActionProbabilities { t, probs: p.clone() })
        .collect()
}

fn decoder() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut cases = 0;
    for _ in 0..1000 {
        let c = rng.random_range(1..=3);
        let t = rng.random_range(1..=50);
        let rows: Vec<Vec<f64>> = (0..t)
            .map(|_| (0..c).map(|_| (rng.random_range(0..=20) as f64) / 20.0).collect())
            .collect();
        for thr_i in 1..=9 {
            let thr = thr_i as f64 / 10.0;
            let mut got: Vec<(usize, usize, usize, f64)> = decode_stream(&as_probs(&rows), c, thr)
                .unwrap()
                .into_iter()
                .map(|i| (i.class_id, i.start_chunk, i.end_chunk, i.score))
                .collect();
            got.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
            let want = runs_oracle(&rows, thr);
            let same = got.len() == want.len()
                && got
                    .iter()
                    .zip(&want)
                    .all(|(a, b)| (a.0, a.1, a.2) == (b.0, b.1, b.2) && (a.3 - b.3).abs() < 1e-12);
            check(same, || format!("mismatch at threshold {thr}: {got:?} vs {want:?}"))?;
            cases += 1;
        }
    }

    // two classes: a1 rises at t1 = 2, a2 rises at t2 = 5 while a1 persists
    let rows: Vec<Vec<f64>> = (0..12)
        .map(|t| {
            vec![
                if (2..=8).contains(&t) { 0.9 } else { 0.1 },
                if (5..=10).contains(&t) { 0.6 } else { 0.2 },
            ]
        })
        .collect();
    let mut dec = DecoderState::new(2, 0.3);
    let mut emitted: Vec<(usize, ActionInstance)> = Vec::new();
    for c in as_probs(&rows) {
        emitted.extend(dec.decode_step(&c).unwrap().into_iter().map(|i| (c.t, i)));
    }
    emitted.extend(dec.finalize().into_iter().map(|i| (12, i)));
    let spans: Vec<(usize, usize, usize, usize)> =
        emitted.iter().map(|(at, i)| (*at, i.class_id, i.start_chunk, i.end_chunk)).collect();
    check(spans == vec![(9, 0, 2, 8), (11, 1, 5, 10)], || format!("overlap scenario gave {spans:?}"))?;
    Ok(format!("{cases} random cases equal the offline scan; overlapping pair decoded exactly"))
}

/// PR sweep over ranked predictions with its own matcher.
fn ap_oracle(preds: &[(f64, usize, usize)], gts: &[(usize, usize)], thr: f64) -> f64 {
    if gts.is_empty() {
        return 0.0;
    }
    let mut idx: Vec<usize> = (0..preds.len()).collect();
    idx.sort_by(|&a, &b| {
        preds[b].0.partial_cmp(&preds[a].0).unwrap().then(preds[a].1.cmp(&preds[b].1)).then(a.cmp(&b))
    });
    let iou = |p: (usize, usize), g: (usize, usize)| -> f64 {
        let inter = (p.1.min(g.1) as i64 - p.0.max(g.0) as i64 + 1).max(0) as f64;
        inter / ((p.1 - p.0 + 1) as f64 + (g.1 - g.0 + 1) as f64 - inter)
    };
    let mut taken = vec![false; gts.len()];
    let mut hits = Vec::new();
    for &i in &idx {
        let p = (preds[i].1, preds[i].2);
        let mut best: Option<usize> = None;
        for g in 0..gts.len() {
            let v = iou(p, gts[g]);
            if !taken[g] && v >= thr && best.is_none_or(|b| v > iou(p, gts[b])) {
                best = Some(g);
            }
        }
        if let Some(b) = best {
            taken[b] = true;
        }
        hits.push(best.is_some());
    }
    let precision: Vec<f64> = (0..hits.len())
        .map(|k| hits[..=k].iter().filter(|&&h| h).count() as f64 / (k + 1) as f64)
        .collect();
    hits.iter()
        .enumerate()
        .filter(|(_, &h)| h)
        .map(|(k, _)| precision[k..].iter().cloned().fold(0.0, f64::max))
        .sum::<f64>()
        / gts.len() as f64
}

fn metrics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut worst: f64 = 0.0;
    for _ in 0..500 {
        let np = rng.random_range(0..=6);
        let ng = rng.random_range(0..=4);
        let preds: Vec<(f64, usize, usize)> = (0..np)
            .map(|_| {
                let s = rng.random_range(0..20);
                (rng.random_range(1..=5) as f64 / 5.0, s, s + rng.random_range(0..6))
            })
            .collect();
        let gts: Vec<(usize, usize)> = (0..ng)
            .map(|_| {
                let s = rng.random_range(0..20);
                (s, s + rng.random_range(0..6))
            })
            .collect();
        let thr = [0.3, 0.5, 0.7][rng.random_range(0..3)];
        let d: Vec<Detection> = preds
            .iter()
            .map(|&(score, s, e)| Detection {
                video_id: "v".into(),
                class_id: 0,
                interval: Interval::chunks(s, e),
                score,
            })
            .collect();
        let g: Vec<GroundTruth> = gts
            .iter()
            .map(|&(s, e)| GroundTruth {
                video_id: "v".into(),
                class_id: 0,
                interval: Interval::chunks(s, e),
            })
            .collect();
        let diff = (average_precision(&d, &g, thr).unwrap() - ap_oracle(&preds, &gts, thr)).abs();
        worst = worst.max(diff);
    }
    check(worst <= 1e-9, || format!("AP differs from the PR sweep by {worst:e}"))?;

    let t = tiou(&Interval::seconds(0.0, 10.0), &Interval::seconds(5.0, 15.0)).unwrap();
    check((t - 1.0 / 3.0).abs() < 1e-9, || format!("tIoU {t}"))?;
    let f1 = focal_loss(&[0.5], &[1.0], 0.5, 0.0).unwrap();
    let f2 = focal_loss(&[0.9], &[1.0], 0.25, 2.0).unwrap();
    check((f1 - 0.5 * 2f64.ln()).abs() < 1e-9 && (f2 - 0.25 * 0.01 * -(0.9f64.ln())).abs() < 1e-9, || {
        format!("focal {f1} {f2}")
    })?;
    check((f1 - 0.34657).abs() < 1e-5 && (f2 - 2.6341e-4).abs() < 1e-8, || format!("focal {f1} {f2}"))?;

    for case in 0..500 {
        let n = rng.random_range(0..8);
        let preds: Vec<StartPoint> = (0..n)
            .map(|_| StartPoint {
                video_id: "v".into(),
                class_id: rng.random_range(0..2),
                time: rng.random_range(0.0..40.0),
                score: rng.random_range(0.0..1.0),
            })
            .collect();
        let gts: Vec<StartPoint> = (0..rng.random_range(1..5))
            .map(|_| StartPoint {
                video_id: "v".into(),
                class_id: rng.random_range(0..2),
                time: rng.random_range(0.0..40.0),
                score: 1.0,
            })
            .collect();
        let r = point_map(&preds, &gts, &default_offsets());
        check(r.p_map.windows(2).all(|w| w[1] >= w[0]), || format!("case {case}: p-mAP {:?}", r.p_map))?;
    }
    Ok(format!(
        "AP within {worst:.1e} of brute force on 500 sets; tIoU and focal closed forms exact; p-AP monotone on 500 sets"
    ))
}

fn gt_tooling() -> Outcome {
    let (fps, l) = (30.0, 6);
    // same-class instances 0.05 s apart become adjacent chunks and merge;
    // a different class touching them stays separate
    let raw = [
        TimedInstance { start_sec: 0.0, end_sec: 1.0, class_id: 2 },
        TimedInstance { start_sec: 1.05, end_sec: 2.0, class_id: 2 },
        TimedInstance { start_sec: 2.0, end_sec: 3.0, class_id: 1 },
    ];
    let q = gt_quantize_merge(&raw, fps, l).unwrap();
    let spans: Vec<(usize, usize, usize)> = q.iter().map(|i| (i.class_id, i.start_chunk, i.end_chunk)).collect();
    check(spans == vec![(2, 0, 9), (1, 10, 14)], || format!("merge example gave {spans:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for case in 0..500 {
        let l = rng.random_range(1..=12);
        let inst: Vec<TimedInstance> = (0..rng.random_range(0..10))
            .map(|_| {
                let s = rng.random_range(0.0..30.0);
                TimedInstance {
                    start_sec: s,
                    end_sec: s + rng.random_range(0.0..5.0),
                    class_id: rng.random_range(0..3),
                }
            })
            .collect();
        let once = gt_quantize_merge(&inst, fps, l).unwrap();
        let back: Vec<TimedInstance> = once.iter().map(|i| chunks_to_seconds(i, fps, l)).collect();
        let twice = gt_quantize_merge(&back, fps, l).unwrap();
        check(once == twice, || format!("case {case}: not idempotent"))?;
    }
    Ok("adjacent same-class pair merged to [0,9]; idempotent on 500 random sets".into())
}

fn learning() -> Outcome {
    let start = Instant::now();
    let (d_in, classes) = (16, 3);
    let data = synth_dataset(&SynthConfig::new(7, classes, d_in, 60, 0.3, 20)).unwrap();
    let seqs: Vec<Sequence> = data.iter().map(|s| s.to_sequence()).collect();
    let cfg = ModelConfig::toy(d_in, classes, 4);
    let train = TrainConfig {
        lr_main: 3e-3,
        lr_ctx: 3e-4,
        batch_size: 2,
        epochs: 200,
        lr_step_size: 1000,
        seed: 7,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(SimOn::init(cfg.clone(), 7).unwrap(), train).unwrap();
    let gts: Vec<GroundTruth> = data
        .iter()
        .enumerate()
        .flat_map(|(i, s)| ground_truth_from_instances(&i.to_string(), &s.instances))
        .collect();
    let mut best = 0.0;
    while trainer.optimizer_steps() < 2000 {
        trainer.run_epoch(&seqs, |_| {}).unwrap();
        if trainer.optimizer_steps() % 50 != 0 {
            continue;
        }
        let mut preds = Vec::new();
        for (i, s) in data.iter().enumerate() {
            let probs = trainer.model.run_stream(&s.features).unwrap();
            let inst = decode_stream(&probs, classes, cfg.threshold).unwrap();
            preds.extend(detections_from_instances(&i.to_string(), &inst));
        }
        best = map_over_thresholds(&preds, &gts, &[0.5]).unwrap().map[0];
        if best >= 90.0 {
            break;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let msg = format!(
        "mAP@0.5 {best:.1} after {} optimizer steps, {secs:.1} s",
        trainer.optimizer_steps()
    );
    check(best >= 90.0 && trainer.optimizer_steps() <= 2000 && secs < 300.0, || msg.clone())?;
    Ok(msg)
}

fn hyperparameters() -> Outcome {
    let m = ModelConfig::default();
    let t = TrainConfig::default();
    let got = (
        m.blocks, m.heads, t.dropout, t.batch_size, t.epochs, t.lr_step_size, t.lr_main, t.lr_ctx, m.k, m.threshold,
    );
    let want = (4, 8, 0.1, 256, 16, 3, 1e-4, 1e-5, 7, 0.3);
    check(got == want, || format!("defaults {got:?}"))?;
    Ok(format!("{got:?}"))
}

fn bench() -> Outcome {
    let model = SimOn::init(ModelConfig::default(), 0).unwrap();
    let report = run_bench(&model, &BenchConfig::default()).unwrap();
    let finite = report.runs.iter().all(|r| r.mean_ms.is_finite() && r.p99_ms.is_finite());
    let short = run_bench(&model, &BenchConfig { t: 100, runs: 1, ..BenchConfig::default() }).unwrap();
    let k = model.config.k;
    let bytes_long = report.state_bytes.last().unwrap().1;
    let bytes_short = short.state_bytes.last().unwrap().1;
    let d = model.config.d_model;
    let bound = 8 * ((k + 1) * (2 * d + model.config.classes) + d);
    let msg = format!(
        "p50 {:.3} ms, p99 {:.3} ms, cv {:.3} over {} runs; state {bytes_long} B at T=1000, {bytes_short} B at T=100",
        report.p50_ms,
        report.p99_ms,
        report.cv,
        report.runs.len()
    );
    check(
        finite
            && report.cv < 0.2
            && report.state_is_constant(k + 1)
            && bytes_long == bytes_short
            && bytes_long <= bound,
        || msg.clone(),
    )?;
    Ok(msg)
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("gradient correctness", gradient),
        ("online causality", causality),
        ("context schedule", schedule),
        ("decoder oracle", decoder),
        ("metric oracles", metrics),
        ("ground-truth tooling", gt_tooling),
        ("desk-scale learning", learning),
        ("hyperparameter fidelity", hyperparameters),
        ("bench harness", bench),
    ];
    let mut failed = 0;
    for (name, run) in criteria {
        let outcome = std::panic::catch_unwind(run).unwrap_or_else(|_| Err("panicked".into()));
        match outcome {
            Ok(msg) => println!("PASS {name}: {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL {name}: {msg}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
