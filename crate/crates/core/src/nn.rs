//! Reusable layers: affine maps, recurrent cells, embeddings and batch norm.

use rand::Rng;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::{ParamId, Scope};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(scope: &mut Scope<'_>, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self::build(scope, name, in_dim, out_dim, true, rng)
    }

    pub fn no_bias(scope: &mut Scope<'_>, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        Self::build(scope, name, in_dim, out_dim, false, rng)
    }

    fn build(scope: &mut Scope<'_>, name: &str, in_dim: usize, out_dim: usize, bias: bool, rng: &mut impl Rng) -> Self {
        let mut s = scope.sub(name);
        let w = s.uniform("w", &[in_dim, out_dim], in_dim, rng);
        let b = bias.then(|| s.uniform("b", &[out_dim], in_dim, rng));
        Linear { w, b, in_dim, out_dim }
    }

    pub fn forward<'t>(&self, g: &'t Graph<'_>, x: Var<'t>) -> Result<Var<'t>> {
        if x.dim(-1) != self.in_dim {
            return Err(Error::shape("linear", format!("expected last dim {}, input {:?}", self.in_dim, x.shape())));
        }
        x.linear(g.param(self.w), self.b.map(|b| g.param(b)))
    }
}

/// Single-layer unidirectional LSTM.
#[derive(Clone, Debug)]
pub struct Lstm {
    wx: ParamId,
    wh: ParamId,
    b: ParamId,
    pub in_dim: usize,
    pub hidden: usize,
}

pub struct LstmRun<'t> {
    /// Hidden state per time step, in input order, each `[B, hidden]`.
    pub states: Vec<Var<'t>>,
    /// State after consuming the sequence in the run direction.
    pub last: Var<'t>,
}

impl Lstm {
    pub fn new(scope: &mut Scope<'_>, name: &str, in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut s = scope.sub(name);
        let wx = s.uniform("wx", &[in_dim, 4 * hidden], hidden, rng);
        let wh = s.uniform("wh", &[hidden, 4 * hidden], hidden, rng);
        let b = s.uniform("b", &[4 * hidden], hidden, rng);
        Lstm { wx, wh, b, in_dim, hidden }
    }

    /// Runs over `xs: [B, L, in]`, forwards or backwards in time.
    pub fn run<'t>(&self, g: &'t Graph<'_>, xs: Var<'t>, reverse: bool) -> Result<LstmRun<'t>> {
        let shape = xs.shape();
        if shape.len() != 3 || shape[2] != self.in_dim {
            return Err(Error::shape("lstm", format!("expected [B, L, {}], got {shape:?}", self.in_dim)));
        }
        let (b, len) = (shape[0], shape[1]);
        let hd = self.hidden;
        let (wx, wh, bias) = (g.param(self.wx), g.param(self.wh), g.param(self.b));
        // input projections for all steps at once
        let px = xs.linear(wx, Some(bias))?;
        let mut h = g.constant(Tensor::zeros(&[b, hd]))?;
        let mut c = h;
        let mut states = vec![None; len];
        let order: Vec<usize> = if reverse { (0..len).rev().collect() } else { (0..len).collect() };
        for t in order {
            let z = px.select(1, t)?.add(h.matmul(wh)?)?;
            let gates = z.split(-1, &[hd, hd, hd, hd])?;
            let (i, f, cand, o) = (gates[0].sigmoid()?, gates[1].sigmoid()?, gates[2].tanh()?, gates[3].sigmoid()?);
            c = f.mul(c)?.add(i.mul(cand)?)?;
            h = o.mul(c.tanh()?)?;
            states[t] = Some(h);
        }
        Ok(LstmRun { states: states.into_iter().map(|s| s.expect("every step visited")).collect(), last: h })
    }
}

/// Bidirectional LSTM with `out_dim / 2` units per direction.
#[derive(Clone, Debug)]
pub struct BiLstm {
    fwd: Lstm,
    bwd: Lstm,
    pub out_dim: usize,
}

pub struct BiLstmRun<'t> {
    /// `[B, L, out_dim]`: forward and backward states concatenated per step.
    pub states: Var<'t>,
    /// `[backward state at step 0; forward state at the last step]`.
    pub summary: Var<'t>,
}

impl BiLstm {
    pub fn new(scope: &mut Scope<'_>, name: &str, in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        if !out_dim.is_multiple_of(2) || out_dim == 0 {
            return Err(Error::invalid(format!("biLSTM width must be even and positive, got {out_dim}")));
        }
        let mut s = scope.sub(name);
        Ok(BiLstm {
            fwd: Lstm::new(&mut s, "fwd", in_dim, out_dim / 2, rng),
            bwd: Lstm::new(&mut s, "bwd", in_dim, out_dim / 2, rng),
            out_dim,
        })
    }

    pub fn run<'t>(&self, g: &'t Graph<'_>, xs: Var<'t>) -> Result<BiLstmRun<'t>> {
        let f = self.fwd.run(g, xs, false)?;
        let b = self.bwd.run(g, xs, true)?;
        let steps =
            f.states.iter().zip(&b.states).map(|(hf, hb)| hf.concat_with(*hb, -1)).collect::<Result<Vec<_>>>()?;
        let states = g.stack(&steps, 1)?;
        let summary = b.last.concat_with(f.last, -1)?;
        Ok(BiLstmRun { states, summary })
    }
}

#[derive(Clone, Debug)]
pub struct Embedding {
    table: ParamId,
    pub vocab: usize,
    pub dim: usize,
}

impl Embedding {
    pub fn new(scope: &mut Scope<'_>, name: &str, vocab: usize, dim: usize, rng: &mut impl Rng) -> Self {
        let mut s = scope.sub(name);
        let table = s.uniform("table", &[vocab, dim], 1, rng);
        Embedding { table, vocab, dim }
    }

    /// Looks up `ids` (row-major `[B, L]`) into `[B, L, dim]`.
    pub fn forward<'t>(&self, g: &'t Graph<'_>, ids: &[usize], batch: usize) -> Result<Var<'t>> {
        if batch == 0 || !ids.len().is_multiple_of(batch) || ids.is_empty() {
            return Err(Error::shape("embedding", format!("{} ids do not split into {batch} rows", ids.len())));
        }
        if let Some(bad) = ids.iter().find(|&&i| i >= self.vocab) {
            return Err(Error::invalid(format!("token id {bad} outside vocabulary of {}", self.vocab)));
        }
        g.param(self.table).index_select(0, ids)?.reshape(&[batch, ids.len() / batch, self.dim])
    }
}

/// Batch normalization over the leading axis of `[B, F]` inputs.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
    pub features: usize,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNorm {
    pub fn new(scope: &mut Scope<'_>, name: &str, features: usize) -> Self {
        let mut s = scope.sub(name);
        BatchNorm {
            gamma: s.constant("gamma", Tensor::ones(&[features])),
            beta: s.constant("beta", Tensor::zeros(&[features])),
            running_mean: s.buffer("running_mean", Tensor::zeros(&[features])),
            running_var: s.buffer("running_var", Tensor::ones(&[features])),
            features,
            momentum: 0.1,
            eps: 1e-5,
        }
    }

    /// Training mode normalizes with batch statistics (identity plus affine
    /// for a batch of one); evaluation uses the running statistics.
    pub fn forward<'t>(&self, g: &'t Graph<'_>, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] != self.features {
            return Err(Error::shape("batch_norm", format!("expected [B, {}], got {shape:?}", self.features)));
        }
        let normed = if g.is_training() {
            if shape[0] == 1 {
                x
            } else {
                let mean = x.mean(0)?;
                let centered = x.sub(mean)?;
                let var = centered.mul(centered)?.mean(0)?;
                let m = self.momentum;
                let (rm, rv) = (g.store().get(self.running_mean), g.store().get(self.running_var));
                let n = shape[0] as f64;
                let new_mean = rm.data().iter().zip(mean.value().data()).map(|(r, b)| (1.0 - m) * r + m * b).collect();
                let new_var = rv
                    .data()
                    .iter()
                    .zip(var.value().data())
                    .map(|(r, b)| (1.0 - m) * r + m * b * n / (n - 1.0))
                    .collect();
                g.update_buffer(self.running_mean, Tensor::raw(vec![self.features], new_mean));
                g.update_buffer(self.running_var, Tensor::raw(vec![self.features], new_var));
                centered.mul(var.add_scalar(self.eps)?.powf(-0.5)?)?
            }
        } else {
            let mean = g.param(self.running_mean);
            let inv = g.param(self.running_var).add_scalar(self.eps)?.powf(-0.5)?;
            x.sub(mean)?.mul(inv)?
        };
        normed.mul(g.param(self.gamma))?.add(g.param(self.beta))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn bilstm_shapes() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng(0);
        let bl = BiLstm::new(&mut Scope::new(&mut store, ""), "enc", 3, 4, &mut rng).unwrap();
        let g = Graph::new(&store);
        let xs = g.constant(Tensor::ones(&[2, 5, 3])).unwrap();
        let run = bl.run(&g, xs).unwrap();
        assert_eq!(run.states.shape(), vec![2, 5, 4]);
        assert_eq!(run.summary.shape(), vec![2, 4]);
        // summary = [bwd state at t=0 ; fwd state at t=L-1]
        let st = run.states.value();
        let sm = run.summary.value();
        for b in 0..2 {
            assert_eq!(sm.at(&[b, 0]), st.at(&[b, 0, 2]));
            assert_eq!(sm.at(&[b, 2]), st.at(&[b, 4, 0]));
        }
    }

    #[test]
    fn batch_norm_single_sample_is_affine_identity() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut Scope::new(&mut store, ""), "bn", 3);
        let g = Graph::training(&store);
        let x = g.constant(Tensor::new(vec![1, 3], vec![1.0, -2.0, 0.5]).unwrap()).unwrap();
        let y = bn.forward(&g, x).unwrap();
        assert_eq!(y.value().data(), &[1.0, -2.0, 0.5]);
    }

    #[test]
    fn batch_norm_standardizes_batches() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut Scope::new(&mut store, ""), "bn", 1);
        let g = Graph::training(&store);
        let x = g.constant(Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 4.0]).unwrap()).unwrap();
        let y = bn.forward(&g, x).unwrap().value();
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
        assert_eq!(g.take_buffer_updates().len(), 2);
    }
}
