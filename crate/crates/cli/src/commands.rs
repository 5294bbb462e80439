use crate::{
    BenchArgs, EvalOdasArgs, EvalTalArgs, GtConvertArgs, InferArgs, Overrides, ResampleArgs, SynthArgs, TrainArgs,
};
use simon_core::bench::{run_bench, BenchConfig};
use simon_core::checkpoint;
use simon_core::config::{apply_kv, parse_kv, ModelConfig, TrainConfig};
use simon_core::decoder::DecoderState;
use simon_core::eval::{
    chunks_to_seconds, detections_from_instances, gt_quantize_merge, ground_truth_from_instances,
    map_over_thresholds, point_map, starts_from_instances, Detection, GroundTruth, Interval, StartPoint,
};
use simon_core::io::{
    read_annotation, read_features, read_json, read_predictions, resample_linear, sidecar_path, write_features,
    write_json, write_prediction_line, Annotation, EvalReport, FeatureReader, PredictionMeta, PredictionRecord,
};
use simon_core::model::SimOn;
use simon_core::train::{labels_from_instances, synth_dataset, Sequence, StepRecord, SynthConfig, Trainer};
use simon_core::{Error, Result};
use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

/// Config file first, then explicit flags.
fn resolve(o: &Overrides, mut model: ModelConfig, mut train: TrainConfig) -> Result<(ModelConfig, TrainConfig)> {
    if let Some(path) = &o.config {
        let text = fs::read_to_string(path)?;
        apply_kv(&parse_kv(&text)?, &mut model, &mut train)?;
    }
    for (k, v) in o.pairs() {
        if !model.set(k, v)? {
            train.set(k, v)?;
        }
    }
    if let Some(seed) = o.seed {
        train.seed = seed;
    }
    model.validate()?;
    train.validate()?;
    Ok((model, train))
}

fn emit_json<T: serde::Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(p) => write_json(p, value),
        None => {
            let text = serde_json::to_string_pretty(value)?;
            match writeln!(std::io::stdout().lock(), "{text}") {
                Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(e.into()),
                _ => Ok(()),
            }
        }
    }
}

fn parse_list(s: &str, what: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|x| {
            x.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad {what} value {x:?}")))
        })
        .collect()
}

/// Annotation files named directly or found (`*.json`) in directories.
fn annotation_paths(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)?
                .map(|e| e.map(|e| e.path()))
                .collect::<std::io::Result<Vec<_>>>()?
                .into_iter()
                .filter(|p| {
                    p.extension().is_some_and(|e| e == "json") && !p.to_string_lossy().ends_with(".meta.json")
                })
                .collect();
            found.sort();
            out.extend(found);
        } else {
            out.push(p.clone());
        }
    }
    Ok(out)
}

fn video_id(path: &Path) -> String {
    path.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned())
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    fs::create_dir_all(&a.out)?;
    let cfg = SynthConfig::new(a.seed, a.classes, a.d_in, a.len, a.density, a.streams);
    let data = synth_dataset(&cfg)?;
    let class_names: Vec<String> = (0..a.classes).map(|c| format!("class_{c}")).collect();
    for (i, s) in data.iter().enumerate() {
        let id = format!("video_{i:04}");
        write_features(a.out.join(format!("{id}.simf")), a.d_in, &s.features)?;
        let ann = Annotation {
            video_id: id.clone(),
            fps: a.fps,
            l: a.l,
            instances: s.instances.iter().map(|inst| chunks_to_seconds(inst, a.fps, a.l)).collect(),
            class_names: class_names.clone(),
        };
        write_json(a.out.join(format!("{id}.json")), &ann)?;
    }
    println!("wrote {} streams to {}", data.len(), a.out.display());
    Ok(())
}

pub fn train(a: &TrainArgs) -> Result<()> {
    let anns = annotation_paths(std::slice::from_ref(&a.data))?;
    if anns.is_empty() {
        return Err(Error::Input(format!("no annotations in {}", a.data.display())));
    }
    let mut seqs = Vec::with_capacity(anns.len());
    let mut shape: Option<(usize, usize, f64, usize)> = None;
    for path in &anns {
        let ann = read_annotation(path)?;
        let (d_in, features) = read_features(path.with_extension("simf"))?;
        let this = (d_in, ann.class_names.len(), ann.fps, ann.l);
        match shape {
            None => shape = Some(this),
            Some(s) if s != this => {
                return Err(Error::Input(format!(
                    "{}: width/classes/fps/l {this:?} differ from {s:?}",
                    path.display()
                )))
            }
            _ => {}
        }
        let gt = gt_quantize_merge(&ann.instances, ann.fps, ann.l)?;
        let labels = labels_from_instances(&gt, ann.class_names.len(), features.len());
        seqs.push(Sequence::new(features, labels)?);
    }
    let (d_in, classes, fps, l) = shape.expect("at least one annotation");
    let base = ModelConfig {
        d_in,
        classes,
        fps,
        chunk_len: l,
        ..ModelConfig::default()
    };
    let (model_cfg, train_cfg) = resolve(&a.cfg, base, TrainConfig::default())?;
    if model_cfg.d_in != d_in || model_cfg.classes != classes {
        return Err(Error::Config("d_in and classes are fixed by the data".into()));
    }
    let model = SimOn::init(model_cfg, train_cfg.seed)?;
    let mut trainer = Trainer::new(model, train_cfg)?;

    let mut log = match &a.log {
        Some(p) => {
            let fresh = !p.exists() || fs::metadata(p)?.len() == 0;
            let mut f = OpenOptions::new().create(true).append(true).open(p)?;
            if fresh {
                writeln!(f, "{}", StepRecord::CSV_HEADER)?;
            }
            Some(f)
        }
        None => None,
    };
    let mut write_err = None;
    let mut last = f64::NAN;
    trainer.fit(&seqs, |r| {
        last = r.loss;
        if let Some(f) = log.as_mut() {
            if let Err(e) = writeln!(f, "{}", r.csv_line()) {
                write_err.get_or_insert(e);
            }
        }
    })?;
    if let Some(e) = write_err {
        return Err(e.into());
    }
    checkpoint::save(&a.out, &trainer.model)?;
    println!(
        "trained {} optimizer steps over {} sequences, last loss {last:.6}",
        trainer.optimizer_steps(),
        seqs.len()
    );
    Ok(())
}

/// Streams one feature file through the model and decoder.
fn infer_one(model: &SimOn, path: &Path) -> Result<Vec<PredictionRecord>> {
    let id = video_id(path);
    let reader = FeatureReader::open(path)?;
    let mut state = model.init_state();
    let mut dec = DecoderState::new(model.config.classes, model.config.threshold);
    let mut out = Vec::new();
    for row in reader {
        let f = row?;
        let (c, q) = model.forward_step(&state, &f, None)?;
        if c.probs.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("{id}: probabilities at chunk {}", c.t)));
        }
        out.extend(dec.decode_step(&c)?.iter().map(|i| PredictionRecord::new(&id, i)));
        state.advance(&q, &c, model)?;
    }
    out.extend(dec.finalize().iter().map(|i| PredictionRecord::new(&id, i)));
    Ok(out)
}

pub fn infer(a: &InferArgs) -> Result<()> {
    let loaded = checkpoint::load(&a.model)?;
    let (cfg, _) = resolve(&a.cfg, loaded.config.clone(), TrainConfig::default())?;
    let model = SimOn::from_parts(cfg, loaded.params)?;

    let mut w = BufWriter::new(File::create(&a.out)?);
    if a.jobs <= 1 {
        for path in &a.features {
            for rec in infer_one(&model, path)? {
                write_prediction_line(&mut w, &rec)?;
            }
        }
    } else {
        // results are written in input order, so output does not depend on scheduling
        let next = AtomicUsize::new(0);
        let results: Vec<Mutex<Option<Result<Vec<PredictionRecord>>>>> =
            a.features.iter().map(|_| Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..a.jobs.min(a.features.len()) {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    let Some(path) = a.features.get(i) else { break };
                    *results[i].lock().unwrap() = Some(infer_one(&model, path));
                });
            }
        });
        for slot in results {
            for rec in slot.into_inner().unwrap().expect("every video processed")? {
                write_prediction_line(&mut w, &rec)?;
            }
        }
    }
    w.flush()?;
    let meta = PredictionMeta {
        fps: model.config.fps,
        l: model.config.chunk_len,
    };
    write_json(sidecar_path(&a.out), &meta)?;
    Ok(())
}

fn load_predictions(path: &Path) -> Result<(Vec<PredictionRecord>, PredictionMeta)> {
    let recs = read_predictions(path)?;
    let meta: PredictionMeta = read_json(sidecar_path(path))?;
    Ok((recs, meta))
}

pub fn eval_tal(a: &EvalTalArgs) -> Result<()> {
    let thresholds = parse_list(&a.thresholds, "threshold")?;
    let (recs, meta) = load_predictions(&a.predictions)?;
    let mut gts: Vec<GroundTruth> = Vec::new();
    let mut preds: Vec<Detection> = Vec::new();
    match a.unit.as_str() {
        "chunks" => {
            for p in annotation_paths(&a.annotations)? {
                let ann = read_annotation(&p)?;
                let q = gt_quantize_merge(&ann.instances, ann.fps, ann.l)?;
                gts.extend(ground_truth_from_instances(&ann.video_id, &q));
            }
            for r in &recs {
                preds.extend(detections_from_instances(&r.video_id, &[r.instance()]));
            }
        }
        "seconds" => {
            for p in annotation_paths(&a.annotations)? {
                let ann = read_annotation(&p)?;
                gts.extend(ann.instances.iter().map(|i| GroundTruth {
                    video_id: ann.video_id.clone(),
                    class_id: i.class_id,
                    interval: Interval::seconds(i.start_sec, i.end_sec),
                }));
            }
            for r in &recs {
                let t = chunks_to_seconds(&r.instance(), meta.fps, meta.l);
                preds.push(Detection {
                    video_id: r.video_id.clone(),
                    class_id: r.class_id,
                    interval: Interval::seconds(t.start_sec, t.end_sec),
                    score: r.score,
                });
            }
        }
        other => return Err(Error::Config(format!("unit must be chunks or seconds, got {other}"))),
    }
    let report = EvalReport {
        tal: Some(map_over_thresholds(&preds, &gts, &thresholds)?),
        odas: None,
    };
    emit_json(a.out.as_deref(), &report)
}

pub fn eval_odas(a: &EvalOdasArgs) -> Result<()> {
    let offsets = parse_list(&a.offsets, "offset")?;
    let (recs, meta) = load_predictions(&a.predictions)?;
    let mut gts: Vec<StartPoint> = Vec::new();
    for p in annotation_paths(&a.annotations)? {
        let ann = read_annotation(&p)?;
        gts.extend(ann.instances.iter().map(|i| StartPoint {
            video_id: ann.video_id.clone(),
            class_id: i.class_id,
            time: i.start_sec,
            score: 1.0,
        }));
    }
    let preds: Vec<StartPoint> = recs
        .iter()
        .flat_map(|r| starts_from_instances(&r.video_id, &[r.instance()], meta.fps, meta.l))
        .collect();
    let report = EvalReport {
        tal: None,
        odas: Some(point_map(&preds, &gts, &offsets)),
    };
    emit_json(a.out.as_deref(), &report)
}

pub fn gt_convert(a: &GtConvertArgs) -> Result<()> {
    let ann = read_annotation(&a.annotation)?;
    let fps = a.fps.unwrap_or(ann.fps);
    let l = a.l.unwrap_or(ann.l);
    let instances = gt_quantize_merge(&ann.instances, fps, l)?;
    let out = serde_json::json!({
        "video_id": ann.video_id,
        "fps": fps,
        "l": l,
        "instances": instances,
    });
    emit_json(a.out.as_deref(), &out)
}

pub fn bench(a: &BenchArgs) -> Result<()> {
    let model = match &a.model {
        Some(p) => {
            let loaded = checkpoint::load(p)?;
            let (cfg, _) = resolve(&a.cfg, loaded.config.clone(), TrainConfig::default())?;
            SimOn::from_parts(cfg, loaded.params)?
        }
        None => {
            let (cfg, train) = resolve(&a.cfg, ModelConfig::default(), TrainConfig::default())?;
            SimOn::init(cfg, train.seed)?
        }
    };
    let cfg = BenchConfig {
        t: a.t,
        runs: a.runs,
        warmup: a.warmup,
        seed: a.cfg.seed.unwrap_or(0),
    };
    let report = run_bench(&model, &cfg)?;
    emit_json(a.out.as_deref(), &report)
}

pub fn resample(a: &ResampleArgs) -> Result<()> {
    let (d_in, rows) = read_features(&a.input)?;
    let out = resample_linear(&rows, a.len)?;
    write_features(&a.out, d_in, &out)
}
