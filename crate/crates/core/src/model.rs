//! The end-to-end per-step model: context assembly, a stack of transformer
//! blocks that all attend to the same keys/values, and a sigmoid classifier.

use crate::config::ModelConfig;
use crate::context::{self, ContextSource, ContextState, KvRows};
use crate::error::{Error, Result};
use crate::nn::{transformer_block, BlockParams, Dropout};
use crate::tensor::{Gradients, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Std of the bootstrap embedding `E` and the first context embedding `P_1`.
pub const EMBEDDING_INIT_STD: f64 = 0.02;

/// Trainable tensor with its gradient buffer.
#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub grad: Tensor,
}

impl Param {
    pub fn new(value: Tensor) -> Self {
        let grad = Tensor::zeros(value.shape());
        Param { value, grad }
    }
}

/// Every weight of the model, generic over the leaf type.
#[derive(Clone, Debug, PartialEq)]
pub struct Weights<T> {
    /// Feature projection `D_in×D`.
    pub w_f: T,
    /// Bootstrap key row, `1×D`.
    pub e: T,
    /// First context embedding, `1×D`.
    pub p_1: T,
    /// Context-embedding MLP: `(D+C)×D_mid` then `D_mid×D`.
    pub w_1: T,
    pub w_2: T,
    /// Visual-context projections: `C×D_c` and `(D+D_c)×D`.
    pub w_c: T,
    pub w_o: T,
    pub blocks: Vec<BlockParams<T>>,
    /// Classifier `D×C`.
    pub w_cls: T,
}

pub type ParameterSet = Weights<Param>;

impl<T> Weights<T> {
    pub fn map<'s, U>(&'s self, f: &mut dyn FnMut(&str, &'s T) -> U) -> Weights<U> {
        Weights {
            w_f: f("w_f", &self.w_f),
            e: f("e", &self.e),
            p_1: f("p_1", &self.p_1),
            w_1: f("w_1", &self.w_1),
            w_2: f("w_2", &self.w_2),
            w_c: f("w_c", &self.w_c),
            w_o: f("w_o", &self.w_o),
            blocks: self
                .blocks
                .iter()
                .enumerate()
                .map(|(i, b)| b.map(&format!("blocks.{i}"), f))
                .collect(),
            w_cls: f("w_cls", &self.w_cls),
        }
    }

    pub fn for_each<'s>(&'s self, f: &mut dyn FnMut(&str, &'s T)) {
        self.map(&mut |n, t| f(n, t));
    }

    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&str, &mut T)) {
        f("w_f", &mut self.w_f);
        f("e", &mut self.e);
        f("p_1", &mut self.p_1);
        f("w_1", &mut self.w_1);
        f("w_2", &mut self.w_2);
        f("w_c", &mut self.w_c);
        f("w_o", &mut self.w_o);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.for_each_mut(&format!("blocks.{i}"), f);
        }
        f("w_cls", &mut self.w_cls);
    }

    /// Leaves in visiting order.
    pub fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        self.for_each(&mut |_, t| out.push(t));
        out
    }

    pub fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.for_each(&mut |n, _| out.push(n.to_string()));
        out
    }
}

/// Whether a parameter belongs to the context-embedding generator, which
/// trains at its own learning rate.
pub fn is_context_param(name: &str) -> bool {
    matches!(name, "w_1" | "w_2")
}

impl ParameterSet {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, c) = (cfg.d_model, cfg.classes);
        let dense = |rows: usize, cols: usize, rng: &mut ChaCha8Rng| {
            Param::new(Tensor::randn(&[rows, cols], 1.0 / (rows as f64).sqrt(), rng))
        };
        let w_f = dense(cfg.d_in, d, &mut rng);
        let e = Param::new(Tensor::randn(&[1, d], EMBEDDING_INIT_STD, &mut rng));
        let p_1 = Param::new(Tensor::randn(&[1, d], EMBEDDING_INIT_STD, &mut rng));
        let w_1 = dense(d + c, cfg.d_mid, &mut rng);
        let w_2 = dense(cfg.d_mid, d, &mut rng);
        let w_c = dense(c, cfg.d_c, &mut rng);
        let w_o = dense(d + cfg.d_c, d, &mut rng);
        let blocks = (0..cfg.blocks)
            .map(|_| {
                BlockParams::init(d, cfg.heads, &mut rng).map(|b| b.map("", &mut |_, t| Param::new(t.clone())))
            })
            .collect::<Result<Vec<_>>>()?;
        let w_cls = dense(d, c, &mut rng);
        Ok(Weights {
            w_f,
            e,
            p_1,
            w_1,
            w_2,
            w_c,
            w_o,
            blocks,
            w_cls,
        })
    }

    pub fn zero_grad(&mut self) {
        self.for_each_mut(&mut |_, p| p.grad.data_mut().iter_mut().for_each(|g| *g = 0.0));
    }

    /// Adds tape gradients of the bound leaves into the gradient buffers.
    pub fn accumulate_grads(&mut self, bound: &Weights<Var>, grads: &Gradients) {
        let vars: Vec<Var> = bound.leaves().into_iter().copied().collect();
        let mut i = 0;
        self.for_each_mut(&mut |_, p| {
            if let Some(g) = grads.get(vars[i]) {
                p.grad.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
            }
            i += 1;
        });
    }

    pub fn values(&self) -> Weights<Tensor> {
        self.map(&mut |_, p| p.value.clone())
    }

    pub fn is_finite(&self) -> bool {
        self.leaves().iter().all(|p| p.value.is_finite())
    }
}

/// Closed-form count of scalar weights for a configuration.
pub fn param_count_for(cfg: &ModelConfig) -> usize {
    let (d, c, h) = (cfg.d_model, cfg.classes, cfg.heads);
    let dh = d / h;
    let block = 3 * h * dh * dh + d * d + 2 * d * d + 4 * d;
    cfg.d_in * d
        + 2 * d
        + (d + c) * cfg.d_mid
        + cfg.d_mid * d
        + c * cfg.d_c
        + (d + cfg.d_c) * d
        + cfg.blocks * block
        + d * c
}

/// Per-class probabilities for one chunk. `t` is the 0-based chunk index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ActionProbabilities {
    pub t: usize,
    pub probs: Vec<f64>,
}

/// Configuration plus weights.
#[derive(Clone, Debug, PartialEq)]
pub struct SimOn {
    pub config: ModelConfig,
    pub params: ParameterSet,
}

pub(crate) struct StepVars {
    /// Encoded query before the transformer, needed for `z_t`.
    pub q: Var,
    /// Sigmoid output `1×C`.
    pub probs: Var,
}

impl SimOn {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        let params = ParameterSet::init(&config, seed)?;
        Ok(SimOn { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        if params.blocks.len() != config.blocks {
            return Err(Error::Config(format!(
                "{} blocks in weights, {} in config",
                params.blocks.len(),
                config.blocks
            )));
        }
        let expected = ParameterSet::init(&config, 0)?;
        for (p, e) in params.leaves().into_iter().zip(expected.leaves()) {
            if p.value.shape() != e.value.shape() {
                return Err(Error::dim("parameter", p.value.shape(), e.value.shape()));
            }
        }
        Ok(SimOn { config, params })
    }

    pub fn param_count(&self) -> usize {
        self.params.leaves().iter().map(|p| p.value.len()).sum()
    }

    pub fn init_state(&self) -> ContextState {
        ContextState::new(self)
    }

    pub(crate) fn bind_constants<'a>(&'a self, tape: &mut Tape<'a>) -> Weights<Var> {
        self.params.map(&mut |_, p| tape.constant_ref(&p.value))
    }

    pub(crate) fn bind_params<'a>(&'a self, tape: &mut Tape<'a>) -> Weights<Var> {
        self.params.map(&mut |_, p| tape.param(&p.value))
    }

    /// Transformer stack and classifier on already assembled rows.
    pub(crate) fn step_graph(
        &self,
        tape: &mut Tape<'_>,
        w: &Weights<Var>,
        rows: &KvRows,
        f: Var,
        mut drop: Option<&mut Dropout>,
    ) -> Result<StepVars> {
        let (kv, q) = context::assemble_on(tape, &self.config, w, rows, f)?;
        let mut x = q;
        for block in &w.blocks {
            x = transformer_block(tape, x, kv, block, drop.as_deref_mut())?;
        }
        let logits = tape.matmul(x, w.w_cls)?;
        let probs = tape.sigmoid(logits);
        Ok(StepVars { q, probs })
    }

    /// Prediction for the state's current step. Does not touch the state;
    /// call [`ContextState::advance`] with the returned query afterwards.
    pub fn forward_step(
        &self,
        state: &ContextState,
        f_t: &[f64],
        drop: Option<&mut Dropout>,
    ) -> Result<(ActionProbabilities, Tensor)> {
        let mut tape = Tape::new();
        let w = self.bind_constants(&mut tape);
        let rows = context::rows_from_state(&mut tape, &w, state, ContextSource::Stored)?;
        let f = context::feature_var(&mut tape, &self.config, f_t)?;
        let out = self.step_graph(&mut tape, &w, &rows, f, drop)?;
        let probs = ActionProbabilities {
            t: state.t() - 1,
            probs: tape.value(out.probs).data().to_vec(),
        };
        Ok((probs, tape.value(out.q).clone()))
    }

    /// Runs a whole stream online in evaluation mode.
    pub fn run_stream<F: AsRef<[f64]>>(&self, features: &[F]) -> Result<Vec<ActionProbabilities>> {
        let mut state = self.init_state();
        let mut out = Vec::with_capacity(features.len());
        for f in features {
            let (c, q) = self.forward_step(&state, f.as_ref(), None)?;
            state.advance(&q, &c, self)?;
            out.push(c);
        }
        Ok(out)
    }
}
