//! Focal-loss training over streamed sequences.
//!
//! Every sequence is run online from its first chunk, with the model's own
//! predictions feeding the stored contexts. Under [`Backprop::Truncated`]
//! each step gets a fresh tape: stored contexts are constants, but the
//! projections that turn them into key rows (`W_c`, `W_o`, `W_1`, `W_2`) are
//! rebuilt on the tape so they still receive gradients. [`Backprop::Full`]
//! keeps a single graph for the whole sequence.

use crate::config::{Backprop, TrainConfig};
use crate::context::{self, ContextSource, KvRows};
use crate::decoder::ActionInstance;
use crate::error::{Error, Result};
use crate::model::{is_context_param, ParameterSet, SimOn};
use crate::nn::Dropout;
use crate::tensor::{Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use std::collections::VecDeque;

/// Probabilities are clamped to `[FOCAL_EPS, 1 - FOCAL_EPS]` before the log.
pub const FOCAL_EPS: f64 = 1e-7;

/// Per-chunk multi-hot targets aligned with a feature sequence.
pub type LabelSequence = Vec<Vec<f64>>;

/// Per-class focal loss terms and their derivatives with respect to the
/// probability. Clamped entries have zero derivative.
pub(crate) fn focal_terms<'a>(
    probs: &'a [f64],
    targets: &'a [f64],
    alpha: f64,
    gamma: f64,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    probs.iter().zip(targets).map(move |(&p, &y)| {
        let c = p.clamp(FOCAL_EPS, 1.0 - FOCAL_EPS);
        let clamped = c != p;
        let (lc, l1c) = (c.ln(), (1.0 - c).ln());
        let pos = -alpha * y * (1.0 - c).powf(gamma) * lc;
        let neg = -(1.0 - alpha) * (1.0 - y) * c.powf(gamma) * l1c;
        let d = if clamped {
            0.0
        } else {
            let dpos = -alpha * y * ((1.0 - c).powf(gamma) / c - gamma_pow(gamma, 1.0 - c) * lc);
            let dneg = -(1.0 - alpha) * (1.0 - y) * (gamma_pow(gamma, c) * l1c - c.powf(gamma) / (1.0 - c));
            dpos + dneg
        };
        (pos + neg, d)
    })
}

/// `γ·x^(γ-1)`, zero when `γ = 0`.
fn gamma_pow(gamma: f64, x: f64) -> f64 {
    if gamma == 0.0 {
        0.0
    } else {
        gamma * x.powf(gamma - 1.0)
    }
}

/// Summed binary focal loss over classes:
/// `Σ -α y (1-c)^γ log c - (1-α)(1-y) c^γ log(1-c)`.
pub fn focal_loss(probs: &[f64], targets: &[f64], alpha: f64, gamma: f64) -> Result<f64> {
    if probs.len() != targets.len() {
        return Err(Error::Contract(format!(
            "focal loss: {} probabilities vs {} targets",
            probs.len(),
            targets.len()
        )));
    }
    Ok(focal_terms(probs, targets, alpha, gamma).map(|(l, _)| l).sum())
}

/// Step decay: `base · factor^⌊epoch / step_size⌋`.
pub fn lr_schedule(epoch: usize, base_lr: f64, step_size: usize, factor: f64) -> f64 {
    base_lr * factor.powi((epoch / step_size.max(1)) as i32)
}

/// One training sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequence {
    pub features: Vec<Vec<f64>>,
    pub labels: LabelSequence,
}

impl Sequence {
    pub fn new(features: Vec<Vec<f64>>, labels: LabelSequence) -> Result<Self> {
        if features.len() != labels.len() {
            return Err(Error::Contract(format!(
                "{} feature rows vs {} label rows",
                features.len(),
                labels.len()
            )));
        }
        if labels.iter().flatten().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Contract("labels must be 0 or 1".into()));
        }
        Ok(Sequence { features, labels })
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }
}

/// Multi-hot rows from chunk-level instances (inclusive ends).
pub fn labels_from_instances(instances: &[ActionInstance], classes: usize, len: usize) -> LabelSequence {
    let mut labels = vec![vec![0.0; classes]; len];
    for inst in instances {
        for row in labels.iter_mut().take(inst.end_chunk + 1).skip(inst.start_chunk) {
            row[inst.class_id] = 1.0;
        }
    }
    labels
}

/// Mean per-step focal loss of a sequence in evaluation mode.
pub fn sequence_loss(model: &SimOn, seq: &Sequence, alpha: f64, gamma: f64) -> Result<f64> {
    let preds = model.run_stream(&seq.features)?;
    let mut total = 0.0;
    for (c, y) in preds.iter().zip(&seq.labels) {
        total += focal_loss(&c.probs, y, alpha, gamma)?;
    }
    Ok(total / seq.len().max(1) as f64)
}

/// Mean per-step loss over several sequences (every step weighted equally).
pub fn dataset_loss(model: &SimOn, seqs: &[Sequence], alpha: f64, gamma: f64) -> Result<f64> {
    let steps: usize = seqs.iter().map(Sequence::len).sum();
    let mut total = 0.0;
    for s in seqs {
        total += sequence_loss(model, s, alpha, gamma)? * s.len() as f64;
    }
    Ok(total / steps.max(1) as f64)
}

/// Adds `scale · ∂loss/∂θ` for one sequence into the gradient buffers, with
/// stored contexts detached. Returns the unscaled summed loss.
pub fn accumulate_truncated(
    model: &mut SimOn,
    seq: &Sequence,
    alpha: f64,
    gamma: f64,
    scale: f64,
    mut drop: Option<&mut Dropout>,
) -> Result<f64> {
    let mut state = model.init_state();
    let mut total = 0.0;
    for (f_t, y_t) in seq.features.iter().zip(&seq.labels) {
        let (bound, grads, probs, q, loss) = {
            let m: &SimOn = model;
            let mut tape = Tape::new();
            let w = m.bind_params(&mut tape);
            let rows = context::rows_from_state(&mut tape, &w, &state, ContextSource::Recompute)?;
            let f = context::feature_var(&mut tape, &m.config, f_t)?;
            let out = m.step_graph(&mut tape, &w, &rows, f, drop.as_deref_mut())?;
            let loss = tape.focal_loss(out.probs, y_t, alpha, gamma)?;
            let scaled = tape.scale(loss, scale);
            let grads = tape.backward(scaled)?;
            let probs = crate::model::ActionProbabilities {
                t: state.t() - 1,
                probs: tape.value(out.probs).data().to_vec(),
            };
            (w, grads, probs, tape.value(out.q).clone(), tape.value(loss).item())
        };
        model.params.accumulate_grads(&bound, &grads);
        state.advance(&q, &probs, model)?;
        total += loss;
    }
    Ok(total)
}

/// Loss of one sequence as a single graph through every stored context.
/// Returns the bound parameters and the summed loss node.
pub(crate) fn full_graph<'a>(
    model: &'a SimOn,
    tape: &mut Tape<'a>,
    seq: &Sequence,
    alpha: f64,
    gamma: f64,
    mut drop: Option<&mut Dropout>,
) -> Result<(crate::model::Weights<Var>, Var)> {
    let w = model.bind_params(tape);
    let k = model.config.k;
    let mut ring: VecDeque<Var> = VecDeque::with_capacity(k);
    let mut p = w.p_1;
    let mut total: Option<Var> = None;
    for (t, (f_t, y_t)) in seq.features.iter().zip(&seq.labels).enumerate() {
        let rows = KvRows {
            e: (t < k).then_some(w.e),
            z: ring.iter().copied().collect(),
            p,
        };
        let f = context::feature_var(tape, &model.config, f_t)?;
        let out = model.step_graph(tape, &w, &rows, f, drop.as_deref_mut())?;
        let loss = tape.focal_loss(out.probs, y_t, alpha, gamma)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, loss)?,
            None => loss,
        });
        let z = context::visual_context_on(tape, w.w_c, w.w_o, out.q, out.probs)?;
        p = context::context_embedding_on(tape, w.w_1, w.w_2, p, out.probs)?;
        if ring.len() == k {
            ring.pop_front();
        }
        ring.push_back(z);
    }
    let total = match total {
        Some(v) => v,
        None => tape.constant(Tensor::scalar(0.0)),
    };
    Ok((w, total))
}

/// Adds `scale · ∂loss/∂θ` with gradients flowing through every stored
/// context. Returns the unscaled summed loss.
pub fn accumulate_full(
    model: &mut SimOn,
    seq: &Sequence,
    alpha: f64,
    gamma: f64,
    scale: f64,
    drop: Option<&mut Dropout>,
) -> Result<f64> {
    if seq.is_empty() {
        return Ok(0.0);
    }
    let (bound, grads, loss) = {
        let m: &SimOn = model;
        let mut tape = Tape::new();
        let (w, total) = full_graph(m, &mut tape, seq, alpha, gamma, drop)?;
        let scaled = tape.scale(total, scale);
        let grads = tape.backward(scaled)?;
        (w, grads, tape.value(total).item())
    };
    model.params.accumulate_grads(&bound, &grads);
    Ok(loss)
}

/// AdamW with decoupled weight decay.
#[derive(Clone, Debug)]
pub struct AdamW {
    moments: Vec<(Vec<f64>, Vec<f64>)>,
    steps: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
}

impl AdamW {
    pub fn new(params: &ParameterSet, cfg: &TrainConfig) -> Self {
        let moments = params
            .leaves()
            .iter()
            .map(|p| (vec![0.0; p.value.len()], vec![0.0; p.value.len()]))
            .collect();
        AdamW {
            moments,
            steps: 0,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Applies one update from the accumulated gradients. The context
    /// generator (`W_1`, `W_2`) uses `lr_ctx`, everything else `lr_main`.
    pub fn step(&mut self, params: &mut ParameterSet, lr_main: f64, lr_ctx: f64) -> Result<()> {
        if self.moments.len() != params.leaves().len() {
            return Err(Error::Contract("optimizer state does not match parameters".into()));
        }
        self.steps += 1;
        let bc1 = 1.0 - self.beta1.powi(self.steps as i32);
        let bc2 = 1.0 - self.beta2.powi(self.steps as i32);
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let mut i = 0;
        let moments = &mut self.moments;
        params.for_each_mut(&mut |name, p| {
            let lr = if is_context_param(name) { lr_ctx } else { lr_main };
            let (m, v) = &mut moments[i];
            let grad = p.grad.data();
            let value = p.value.data_mut();
            for j in 0..value.len() {
                let g = grad[j];
                value[j] -= lr * wd * value[j];
                m[j] = b1 * m[j] + (1.0 - b1) * g;
                v[j] = b2 * v[j] + (1.0 - b2) * g * g;
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                value[j] -= lr * mh / (vh.sqrt() + eps);
            }
            i += 1;
        });
        Ok(())
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

impl StepRecord {
    pub const CSV_HEADER: &'static str = "epoch,step,lr,loss";

    pub fn csv_line(&self) -> String {
        format!("{},{},{:e},{}", self.epoch, self.step, self.lr, self.loss)
    }
}

/// Model, optimizer and schedule bundled for an epoch loop.
pub struct Trainer {
    pub model: SimOn,
    pub cfg: TrainConfig,
    opt: AdamW,
    dropout: Option<Dropout>,
    epoch: usize,
    shuffle_rng: ChaCha8Rng,
}

impl Trainer {
    pub fn new(model: SimOn, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = AdamW::new(&model.params, &cfg);
        let dropout = if cfg.dropout > 0.0 {
            Some(Dropout::new(cfg.dropout, cfg.seed ^ 0x5eed)?)
        } else {
            None
        };
        let shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        Ok(Trainer {
            model,
            cfg,
            opt,
            dropout,
            epoch: 0,
            shuffle_rng,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn set_epoch(&mut self, epoch: usize) {
        self.epoch = epoch;
    }

    pub fn optimizer_steps(&self) -> u64 {
        self.opt.steps()
    }

    /// Learning rates `(main, ctx)` for the current epoch.
    pub fn learning_rates(&self) -> (f64, f64) {
        let c = &self.cfg;
        (
            lr_schedule(self.epoch, c.lr_main, c.lr_step_size, c.lr_factor),
            lr_schedule(self.epoch, c.lr_ctx, c.lr_step_size, c.lr_factor),
        )
    }

    /// One optimizer update on a batch. The loss is the mean focal loss over
    /// every time step of every sequence in the batch.
    pub fn train_step(&mut self, batch: &[&Sequence]) -> Result<f64> {
        let steps: usize = batch.iter().map(|s| s.len()).sum();
        if steps == 0 {
            return Err(Error::Contract("training batch has no time steps".into()));
        }
        let scale = 1.0 / steps as f64;
        let (alpha, gamma) = (self.cfg.alpha, self.cfg.gamma);
        self.model.params.zero_grad();
        let mut total = 0.0;
        for seq in batch {
            let drop = self.dropout.as_mut();
            total += match self.cfg.backprop {
                Backprop::Truncated => accumulate_truncated(&mut self.model, seq, alpha, gamma, scale, drop)?,
                Backprop::Full => accumulate_full(&mut self.model, seq, alpha, gamma, scale, drop)?,
            };
        }
        let loss = total / steps as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss {loss} at epoch {} after {} optimizer steps",
                self.epoch,
                self.opt.steps()
            )));
        }
        let (lr_main, lr_ctx) = self.learning_rates();
        self.opt.step(&mut self.model.params, lr_main, lr_ctx)?;
        if !self.model.params.is_finite() {
            return Err(Error::NonFinite(format!(
                "parameters diverged at optimizer step {}",
                self.opt.steps()
            )));
        }
        Ok(loss)
    }

    /// Shuffles the data, then runs every batch of the current epoch.
    pub fn run_epoch(&mut self, data: &[Sequence], mut on_step: impl FnMut(&StepRecord)) -> Result<f64> {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.shuffle_rng);
        let mut sum = 0.0;
        let mut batches = 0;
        for chunk in order.chunks(self.cfg.batch_size) {
            let batch: Vec<&Sequence> = chunk.iter().map(|&i| &data[i]).collect();
            let loss = self.train_step(&batch)?;
            on_step(&StepRecord {
                epoch: self.epoch,
                step: self.opt.steps(),
                lr: self.learning_rates().0,
                loss,
            });
            sum += loss;
            batches += 1;
        }
        self.epoch += 1;
        Ok(sum / batches.max(1) as f64)
    }

    pub fn fit(&mut self, data: &[Sequence], mut on_step: impl FnMut(&StepRecord)) -> Result<()> {
        for _ in 0..self.cfg.epochs {
            self.run_epoch(data, &mut on_step)?;
        }
        Ok(())
    }
}

/// Parameters of a synthetic dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub classes: usize,
    pub d_in: usize,
    pub len: usize,
    /// Target fraction of chunks covered by each class.
    pub density: f64,
    pub streams: usize,
    pub min_span: usize,
    pub max_span: usize,
    /// Minimum background gap between two instances of the same class.
    pub min_gap: usize,
}

impl SynthConfig {
    pub fn new(seed: u64, classes: usize, d_in: usize, len: usize, density: f64, streams: usize) -> Self {
        SynthConfig {
            seed,
            classes,
            d_in,
            len,
            density,
            streams,
            min_span: 4,
            max_span: 12,
            min_gap: 2,
        }
    }
}

/// Norm of every class direction.
pub const CLASS_SHIFT: f64 = 3.0;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthStream {
    pub features: Vec<Vec<f64>>,
    pub labels: LabelSequence,
    pub instances: Vec<ActionInstance>,
}

impl SynthStream {
    pub fn to_sequence(&self) -> Sequence {
        Sequence {
            features: self.features.clone(),
            labels: self.labels.clone(),
        }
    }
}

/// Background chunks are `N(0, I)`; while class `i` is active its fixed
/// direction `μ_i` (norm 3) is added. Directions are shared by all streams
/// of one dataset.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<Vec<SynthStream>> {
    if cfg.classes == 0 || cfg.d_in == 0 || cfg.min_span == 0 || cfg.min_span > cfg.max_span {
        return Err(Error::Config(format!("invalid synthetic config {cfg:?}")));
    }
    if !(0.0..=1.0).contains(&cfg.density) {
        return Err(Error::Config(format!("density {} must be in [0, 1]", cfg.density)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let directions: Vec<Vec<f64>> = (0..cfg.classes)
        .map(|_| {
            let v: Vec<f64> = (0..cfg.d_in).map(|_| StandardNormal.sample(&mut rng)).collect();
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.into_iter().map(|x| x * CLASS_SHIFT / n).collect()
        })
        .collect();
    (0..cfg.streams)
        .map(|_| Ok(synth_stream(cfg, &directions, &mut rng)))
        .collect()
}

/// Single stream drawn from the dataset defined by `seed`.
pub fn synth_dataset_generate(seed: u64, classes: usize, d_in: usize, len: usize, density: f64) -> Result<SynthStream> {
    let cfg = SynthConfig::new(seed, classes, d_in, len, density, 1);
    Ok(synth_dataset(&cfg)?.remove(0))
}

fn synth_stream(cfg: &SynthConfig, directions: &[Vec<f64>], rng: &mut ChaCha8Rng) -> SynthStream {
    let mut instances = Vec::new();
    if cfg.density > 0.0 {
        let mean_span = (cfg.min_span + cfg.max_span) as f64 / 2.0;
        let mean_gap = mean_span * (1.0 - cfg.density) / cfg.density;
        let extra = (mean_gap - cfg.min_gap as f64).max(0.0);
        for class_id in 0..cfg.classes {
            let mut cursor = rng.random_range(0.0..=(2.0 * extra).max(1.0)) as usize;
            while cursor < cfg.len {
                let span = rng.random_range(cfg.min_span..=cfg.max_span);
                let end = (cursor + span - 1).min(cfg.len - 1);
                instances.push(ActionInstance {
                    start_chunk: cursor,
                    end_chunk: end,
                    class_id,
                    score: 1.0,
                });
                let gap = cfg.min_gap + rng.random_range(0.0..=2.0 * extra) as usize;
                cursor = end + 1 + gap;
            }
        }
    }
    instances.sort_by_key(|i| (i.start_chunk, i.class_id));
    let labels = labels_from_instances(&instances, cfg.classes, cfg.len);
    let features = labels
        .iter()
        .map(|y| {
            let mut f: Vec<f64> = (0..cfg.d_in).map(|_| StandardNormal.sample(&mut *rng)).collect();
            for (class_id, &on) in y.iter().enumerate() {
                if on == 1.0 {
                    f.iter_mut().zip(&directions[class_id]).for_each(|(a, b)| *a += b);
                }
            }
            f
        })
        .collect();
    SynthStream {
        features,
        labels,
        instances,
    }
}
