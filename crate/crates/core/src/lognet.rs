//! Language-binding object graph reasoning.
//!
//! Each step builds a query-dependent low-rank graph over visual objects,
//! binds every object to a soft selection of question words, refines the
//! joint node features with a residual graph convolution and folds the
//! attended graph summary into a working memory.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::hcrn::{QueryEncoder, QueryEncoding};
use crate::nn::{BatchNorm, Linear};
use crate::params::{ParamId, Scope};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogConfig {
    pub d: usize,
    /// Appearance feature width before projection.
    pub d_app: usize,
    pub vocab: usize,
    pub steps: usize,
    pub heads: usize,
    pub gcn_layers: usize,
    /// Adjacency rank; `None` means `ceil(d / 8)`.
    #[serde(default)]
    pub rank: Option<usize>,
    pub num_answers: usize,
}

impl LogConfig {
    pub fn rank(&self) -> usize {
        self.rank.unwrap_or(self.d.div_ceil(8))
    }
}

/// Width of the box descriptor `[x0, y0, x1, y1, w, h, w*h]`.
pub const BOX_DIM: usize = 7;

/// Per-step working state.
#[derive(Clone)]
pub struct ReasoningState<'t> {
    /// `[B, d]`
    pub memory: Var<'t>,
    /// `[B, K, d]`
    pub controls: Var<'t>,
    pub step: usize,
}

/// Query-modulated graph over objects.
#[derive(Clone, Copy)]
pub struct DynamicGraph<'t> {
    /// `[B, N, r]`, column-normalized over objects.
    pub node_features: Var<'t>,
    /// `[B, N, N]`
    pub adjacency: Var<'t>,
}

/// Everything one step exposes for inspection and regularization.
#[derive(Clone)]
pub struct StepTrace<'t> {
    pub graph: DynamicGraph<'t>,
    /// Word attention per head `[B, S, K]`.
    pub alpha: Var<'t>,
    /// Mixing weights over past controls `[K]`.
    pub gamma: Var<'t>,
    /// Object-to-word binding `[B, N, S]` (gated).
    pub beta: Var<'t>,
    /// Node attention `[B, N]`.
    pub delta: Var<'t>,
    pub controls: Var<'t>,
    pub memory: Var<'t>,
}

#[derive(Clone, Debug)]
struct StepParams {
    augment: Linear,
    q_proj: Linear,
    q_mix: Linear,
    gamma_logits: ParamId,
    alpha: Linear,
    adj: Linear,
    bind_mod: Linear,
    bind_v: Linear,
    bind_w: Linear,
    bind_score: Linear,
    delta: Linear,
    memory: Linear,
}

#[derive(Clone, Debug)]
struct GcnLayer {
    w1: Linear,
    w2: Linear,
}

#[derive(Clone, Debug)]
pub struct LogNet {
    pub cfg: LogConfig,
    pub encoder: QueryEncoder,
    obj_proj: Linear,
    z0: Linear,
    z1: Linear,
    steps: Vec<StepParams>,
    gcn: Vec<GcnLayer>,
    m0: ParamId,
    y: Linear,
    hidden: Linear,
    bn: BatchNorm,
    out: Linear,
}

pub struct LogOutput<'t> {
    /// `[B, num_answers]`
    pub logits: Var<'t>,
    pub memory: Var<'t>,
    pub q: Var<'t>,
    pub trace: Vec<StepTrace<'t>>,
}

impl<'t> LogOutput<'t> {
    /// Word attention averaged over steps and heads, `[B, S]`.
    pub fn mean_word_attention(&self) -> Result<Var<'t>> {
        let per_step = self.trace.iter().map(|s| s.alpha.mean(-1)).collect::<Result<Vec<_>>>()?;
        mean_of(&per_step)
    }

    /// Node attention averaged over steps, `[B, N]`.
    pub fn mean_object_attention(&self) -> Result<Var<'t>> {
        let per_step: Vec<Var<'t>> = self.trace.iter().map(|s| s.delta).collect();
        mean_of(&per_step)
    }
}

fn mean_of<'t>(vs: &[Var<'t>]) -> Result<Var<'t>> {
    let mut acc = vs[0];
    for v in &vs[1..] {
        acc = acc.add(*v)?;
    }
    acc.scale(1.0 / vs.len() as f64)
}

impl LogNet {
    pub fn new(scope: &mut Scope<'_>, name: &str, cfg: &LogConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.steps == 0 || cfg.heads == 0 || cfg.gcn_layers == 0 {
            return Err(Error::invalid("steps, heads and GCN layers must all be positive"));
        }
        if cfg.rank() == 0 {
            return Err(Error::invalid("adjacency rank must be positive"));
        }
        let (d, k, r) = (cfg.d, cfg.heads, cfg.rank());
        let mut s = scope.sub(name);
        let encoder = QueryEncoder::new(&mut s, "query", cfg.vocab, d, rng)?;
        let obj_proj = Linear::new(&mut s, "object_proj", cfg.d_app + BOX_DIM, d, rng);
        let z0 = Linear::new(&mut s, "lexical_z0", d, d, rng);
        let z1 = Linear::new(&mut s, "lexical_z1", d, 1, rng);
        let steps = (0..cfg.steps)
            .map(|t| {
                let mut st = s.sub(&format!("step{t}"));
                StepParams {
                    augment: Linear::new(&mut st, "augment", 2 * d, d, rng),
                    q_proj: Linear::new(&mut st, "q_proj", d, d, rng),
                    q_mix: Linear::new(&mut st, "q_mix", 2 * d, d, rng),
                    gamma_logits: st.uniform("gamma_logits", &[k], 1, rng),
                    alpha: Linear::no_bias(&mut st, "alpha", d, k, rng),
                    adj: Linear::no_bias(&mut st, "adjacency", d, r, rng),
                    bind_mod: Linear::new(&mut st, "bind_mod", 2 * d, d, rng),
                    bind_v: Linear::no_bias(&mut st, "bind_v", d, d, rng),
                    bind_w: Linear::no_bias(&mut st, "bind_w", d, d, rng),
                    bind_score: Linear::no_bias(&mut st, "bind_score", d, 1, rng),
                    delta: Linear::no_bias(&mut st, "delta", 2 * d, 1, rng),
                    memory: Linear::new(&mut st, "memory", 3 * d, d, rng),
                }
            })
            .collect();
        let gcn = (0..cfg.gcn_layers)
            .map(|h| {
                let mut sl = s.sub(&format!("gcn{h}"));
                GcnLayer {
                    w1: Linear::new(&mut sl, "w1", 2 * d, 2 * d, rng),
                    w2: Linear::no_bias(&mut sl, "w2", 2 * d, 2 * d, rng),
                }
            })
            .collect();
        let m0 = s.uniform("initial_memory", &[d], d, rng);
        let y = Linear::new(&mut s, "y", 2 * d, d, rng);
        let hidden = Linear::new(&mut s, "classifier_hidden", d, d, rng);
        let bn = BatchNorm::new(&mut s, "classifier_bn", d);
        let out = Linear::new(&mut s, "classifier_out", d, cfg.num_answers, rng);
        Ok(LogNet { cfg: cfg.clone(), encoder, obj_proj, z0, z1, steps, gcn, m0, y, hidden, bn, out })
    }

    /// Projects `[appearance; box]` into `[B, N, d]` visual objects.
    pub fn objects<'t>(&self, g: &'t Graph<'_>, appearance: Var<'t>, boxes: Var<'t>) -> Result<Var<'t>> {
        self.obj_proj.forward(g, appearance.concat_with(boxes, -1)?)
    }

    /// `v_{t,i} = W[v_i; m ⊙ v_i] + b`.
    pub fn augment_nodes<'t>(&self, g: &'t Graph<'_>, t: usize, v: Var<'t>, m_prev: Var<'t>) -> Result<Var<'t>> {
        let gated = v.mul(m_prev.unsqueeze(1)?)?;
        self.steps[t].augment.forward(g, v.concat_with(gated, -1)?)
    }

    /// Returns new controls `[B, K, d]`, word attention `[B, S, K]` and the
    /// mixing weights `[K]`.
    pub fn controller_step<'t>(
        &self,
        g: &'t Graph<'_>,
        t: usize,
        words: Var<'t>,
        q: Var<'t>,
        prev: Option<Var<'t>>,
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let p = &self.steps[t];
        let qt = p.q_proj.forward(g, q)?;
        // the first step starts from c_0 = q_1 in every head
        let prev = match prev {
            Some(c) => c,
            None => qt.unsqueeze(1)?.broadcast_to(&[qt.dim(0), self.cfg.heads, self.cfg.d])?,
        };
        let gamma = g.param(p.gamma_logits).softmax(0)?;
        let past = prev.mul(gamma.unsqueeze(0)?.unsqueeze(2)?)?.sum(1)?;
        let q2 = p.q_mix.forward(g, qt.concat_with(past, -1)?)?;
        let alpha = p.alpha.forward(g, words.mul(q2.unsqueeze(1)?)?)?.softmax(1)?;
        let controls = alpha.transpose(1, 2)?.matmul(words)?;
        Ok((controls, alpha, gamma))
    }

    /// `Ṽ = softmax_objects(W Σ_k V ⊙ c_k)`, `A = Ṽ Ṽᵀ`.
    pub fn build_adjacency<'t>(
        &self,
        g: &'t Graph<'_>,
        t: usize,
        v: Var<'t>,
        controls: Var<'t>,
    ) -> Result<DynamicGraph<'t>> {
        let summed = controls.sum(1)?.unsqueeze(1)?;
        let vt = self.steps[t].adj.forward(g, v.mul(summed)?)?.softmax(1)?;
        let adjacency = vt.matmul(vt.transpose(1, 2)?)?;
        Ok(DynamicGraph { node_features: vt, adjacency })
    }

    /// Lexical gate `z_s`, `[B, S]`.
    pub fn lexical_gate<'t>(&self, g: &'t Graph<'_>, words: Var<'t>) -> Result<Var<'t>> {
        let z = self.z1.forward(g, self.z0.forward(g, words)?)?.sigmoid()?;
        let (b, s) = (z.dim(0), z.dim(1));
        z.reshape(&[b, s])
    }

    /// Returns bound node features `[B, N, 2d]` and binding weights `[B, N, S]`.
    #[allow(clippy::too_many_arguments)]
    pub fn language_binding<'t>(
        &self,
        g: &'t Graph<'_>,
        t: usize,
        v_raw: Var<'t>,
        v_step: Var<'t>,
        words: Var<'t>,
        m_prev: Var<'t>,
        z: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let p = &self.steps[t];
        let vhat = p.bind_mod.forward(g, v_raw.concat_with(v_raw.mul(m_prev.unsqueeze(1)?)?, -1)?)?;
        let left = p.bind_v.forward(g, vhat)?.unsqueeze(2)?;
        let right = p.bind_w.forward(g, words)?.unsqueeze(1)?;
        let scores = p.bind_score.forward(g, left.add(right)?.tanh()?)?;
        let (b, n, s) = (scores.dim(0), scores.dim(1), scores.dim(2));
        let beta = scores.reshape(&[b, n, s])?.softmax(-1)?.mul(z.unsqueeze(1)?)?;
        let bound = beta.matmul(words)?;
        Ok((v_step.concat_with(bound, -1)?, beta))
    }

    /// Residual graph convolution over `[B, N, 2d]` features.
    pub fn refine_gcn<'t>(&self, g: &'t Graph<'_>, x: Var<'t>, adjacency: Var<'t>) -> Result<Var<'t>> {
        let mut r = x;
        for (h, layer) in self.gcn.iter().enumerate() {
            let f = layer.w2.forward(g, layer.w1.forward(g, adjacency.matmul(r)?)?.elu()?)?;
            r = r.add(f)?.elu().map_err(|e| match e {
                Error::NumericDomain { .. } => Error::invalid(format!("non-finite activations in GCN layer {h}")),
                other => other,
            })?;
        }
        Ok(r)
    }

    /// Returns `(x̃, m_t, δ)`.
    pub fn readout_update<'t>(
        &self,
        g: &'t Graph<'_>,
        t: usize,
        refined: Var<'t>,
        m_prev: Var<'t>,
    ) -> Result<(Var<'t>, Var<'t>, Var<'t>)> {
        let p = &self.steps[t];
        let logits = p.delta.forward(g, refined)?;
        let (b, n) = (logits.dim(0), logits.dim(1));
        let delta = logits.reshape(&[b, n])?.softmax(-1)?;
        let summary = delta.unsqueeze(1)?.matmul(refined)?.squeeze(1)?;
        let memory = p.memory.forward(g, m_prev.concat_with(summary, -1)?)?;
        Ok((summary, memory, delta))
    }

    /// Runs all reasoning steps over pre-encoded objects and query.
    pub fn reason<'t>(
        &self,
        g: &'t Graph<'_>,
        v: Var<'t>,
        enc: &QueryEncoding<'t>,
    ) -> Result<(Var<'t>, Vec<StepTrace<'t>>)> {
        if v.shape().len() != 3 || v.dim(-1) != self.cfg.d {
            return Err(Error::shape(
                "lognet",
                format!("expected objects [B, N, {}], got {:?}", self.cfg.d, v.shape()),
            ));
        }
        let b = v.dim(0);
        let mut state = ReasoningState {
            memory: g.param(self.m0).unsqueeze(0)?.broadcast_to(&[b, self.cfg.d])?,
            controls: v,
            step: 0,
        };
        let z = self.lexical_gate(g, enc.words)?;
        let mut trace = Vec::with_capacity(self.cfg.steps);
        for t in 0..self.cfg.steps {
            let prev = (t > 0).then_some(state.controls);
            let vt = self.augment_nodes(g, t, v, state.memory)?;
            let (controls, alpha, gamma) = self.controller_step(g, t, enc.words, enc.q, prev)?;
            let graph = self.build_adjacency(g, t, v, controls)?;
            let (x, beta) = self.language_binding(g, t, v, vt, enc.words, state.memory, z)?;
            let refined = self.refine_gcn(g, x, graph.adjacency)?;
            let (_, memory, delta) = self.readout_update(g, t, refined, state.memory)?;
            state = ReasoningState { memory, controls, step: t + 1 };
            trace.push(StepTrace { graph, alpha, gamma, beta, delta, controls, memory });
        }
        Ok((state.memory, trace))
    }

    /// Full model: objects and question tokens to answer logits.
    pub fn forward<'t>(
        &self,
        g: &'t Graph<'_>,
        appearance: Var<'t>,
        boxes: Var<'t>,
        tokens: &[usize],
    ) -> Result<LogOutput<'t>> {
        let b = appearance.dim(0);
        let enc = self.encoder.forward(g, tokens, b)?;
        let v = self.objects(g, appearance, boxes)?;
        let (memory, trace) = self.reason(g, v, &enc)?;
        let logits = self.answer(g, memory, enc.q)?;
        Ok(LogOutput { logits, memory, q: enc.q, trace })
    }

    /// `y = W[m_T; q] + b` then Linear, batch norm, ELU, Linear.
    pub fn answer<'t>(&self, g: &'t Graph<'_>, memory: Var<'t>, q: Var<'t>) -> Result<Var<'t>> {
        let y = self.y.forward(g, memory.concat_with(q, -1)?)?;
        let h = self.bn.forward(g, self.hidden.forward(g, y)?)?.elu()?;
        self.out.forward(g, h)
    }
}
