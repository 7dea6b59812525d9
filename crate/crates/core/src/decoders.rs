//! Answer heads and their training losses.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::Scope;
use crate::tensor::Tensor;

/// Largest count label; counts live in `0..=MAX_COUNT`.
pub const MAX_COUNT: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AnswerKind {
    OpenEnded { num_answers: usize },
    MultiChoice { num_choices: usize },
    Count,
}

impl AnswerKind {
    pub fn num_labels(self) -> usize {
        match self {
            AnswerKind::OpenEnded { num_answers } => num_answers,
            AnswerKind::MultiChoice { num_choices } => num_choices,
            AnswerKind::Count => MAX_COUNT + 1,
        }
    }
}

/// `y' = ELU(W_y ELU(W_o [features; W_q q + b] + b) + b)`, shared by all heads.
#[derive(Clone, Debug)]
struct Joint {
    wq: Linear,
    wa: Option<Linear>,
    wo: Linear,
    wy: Linear,
}

impl Joint {
    fn new(s: &mut Scope<'_>, feat_dim: usize, d: usize, with_answer: bool, rng: &mut impl Rng) -> Self {
        let wq = Linear::new(s, "wq", d, d, rng);
        let wa = with_answer.then(|| Linear::new(s, "wa", d, d, rng));
        let in_dim = feat_dim + d + if with_answer { d } else { 0 };
        let wo = Linear::new(s, "wo", in_dim, d, rng);
        let wy = Linear::new(s, "wy", d, d, rng);
        Joint { wq, wa, wo, wy }
    }

    fn forward<'t>(&self, g: &'t Graph<'_>, features: &[Var<'t>], q: Var<'t>, a: Option<Var<'t>>) -> Result<Var<'t>> {
        if features.is_empty() {
            return Err(Error::invalid("answer head needs at least one feature"));
        }
        let mut parts = features.to_vec();
        let lead = q.shape().len() - 1;
        parts.push(self.wq.forward(g, q)?);
        if let (Some(wa), Some(a)) = (&self.wa, a) {
            parts.push(wa.forward(g, a)?);
        }
        // features may carry a choice axis the question lacks
        let target = parts.iter().map(|p| p.shape()).max_by_key(|s| s.len()).expect("nonempty");
        let parts = parts
            .into_iter()
            .map(|p| {
                if p.shape().len() == target.len() {
                    Ok(p)
                } else {
                    let mut s = target.clone();
                    *s.last_mut().expect("rank >= 1") = p.dim(-1);
                    let mut lifted = p;
                    for ax in lead..target.len() - 1 {
                        lifted = lifted.unsqueeze(ax)?;
                    }
                    lifted.broadcast_to(&s)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        let y = self.wo.forward(g, g.concat(&parts, -1)?)?.elu()?;
        self.wy.forward(g, y)?.elu()
    }
}

/// Multi-class classifier over a fixed answer set.
#[derive(Clone, Debug)]
pub struct OpenEndedHead {
    joint: Joint,
    out: Linear,
    pub num_answers: usize,
}

impl OpenEndedHead {
    pub fn new(
        scope: &mut Scope<'_>,
        name: &str,
        feat_dim: usize,
        d: usize,
        num_answers: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if num_answers < 2 {
            return Err(Error::invalid(format!("answer space needs at least 2 labels, got {num_answers}")));
        }
        let mut s = scope.sub(name);
        Ok(OpenEndedHead {
            joint: Joint::new(&mut s, feat_dim, d, false, rng),
            out: Linear::new(&mut s, "out", d, num_answers, rng),
            num_answers,
        })
    }

    /// Logits `[B, |A|]`.
    pub fn logits<'t>(&self, g: &'t Graph<'_>, features: &[Var<'t>], q: Var<'t>) -> Result<Var<'t>> {
        let y = self.joint.forward(g, features, q, None)?;
        self.out.forward(g, y)
    }
}

/// Scores every answer choice with shared parameters.
#[derive(Clone, Debug)]
pub struct MultiChoiceHead {
    joint: Joint,
    score: Linear,
}

impl MultiChoiceHead {
    pub fn new(scope: &mut Scope<'_>, name: &str, feat_dim: usize, d: usize, rng: &mut impl Rng) -> Self {
        let mut s = scope.sub(name);
        MultiChoiceHead {
            joint: Joint::new(&mut s, feat_dim, d, true, rng),
            score: Linear::new(&mut s, "score", d, 1, rng),
        }
    }

    /// `features: [B, A, F]` (one reasoning pass per choice), `q: [B, d]`,
    /// `a: [B, A, d]`. Returns scores `[B, A]`.
    pub fn scores<'t>(&self, g: &'t Graph<'_>, features: &[Var<'t>], q: Var<'t>, a: Var<'t>) -> Result<Var<'t>> {
        let y = self.joint.forward(g, features, q, Some(a))?;
        let s = self.score.forward(g, y)?;
        let shape = s.shape();
        s.reshape(&shape[..shape.len() - 1])
    }
}

/// Regresses a real-valued count.
#[derive(Clone, Debug)]
pub struct CountHead {
    joint: Joint,
    out: Linear,
}

impl CountHead {
    pub fn new(scope: &mut Scope<'_>, name: &str, feat_dim: usize, d: usize, rng: &mut impl Rng) -> Self {
        let mut s = scope.sub(name);
        CountHead { joint: Joint::new(&mut s, feat_dim, d, false, rng), out: Linear::new(&mut s, "out", d, 1, rng) }
    }

    /// Raw (unrounded) predictions `[B]`.
    pub fn raw<'t>(&self, g: &'t Graph<'_>, features: &[Var<'t>], q: Var<'t>) -> Result<Var<'t>> {
        let y = self.joint.forward(g, features, q, None)?;
        let r = self.out.forward(g, y)?;
        let b = r.dim(0);
        r.reshape(&[b])
    }
}

fn one_hot(labels: &[usize], classes: usize) -> Result<Tensor> {
    let mut data = vec![0.0; labels.len() * classes];
    for (i, &l) in labels.iter().enumerate() {
        if l >= classes {
            return Err(Error::invalid(format!("label {l} outside {classes} classes")));
        }
        data[i * classes + l] = 1.0;
    }
    Tensor::new(vec![labels.len(), classes], data)
}

/// Mean negative log-likelihood of `labels` under `softmax(logits)`.
pub fn nll_loss<'t>(g: &'t Graph<'_>, logits: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("nll_loss", format!("logits {s:?} vs {} labels", labels.len())));
    }
    let mask = g.constant(one_hot(labels, s[1])?)?;
    logits.log_softmax(-1)?.mul(mask)?.sum_all()?.scale(-1.0 / labels.len() as f64)
}

/// Pairwise hinge `Σ_n max(0, 1 + s_n - s_p)` per sample, averaged over the batch.
pub fn hinge_loss<'t>(g: &'t Graph<'_>, scores: Var<'t>, correct: &[usize]) -> Result<Var<'t>> {
    let s = scores.shape();
    if s.len() != 2 || s[0] != correct.len() {
        return Err(Error::shape("hinge_loss", format!("scores {s:?} vs {} answers", correct.len())));
    }
    if s[1] < 2 {
        return Err(Error::invalid("hinge loss needs at least two choices"));
    }
    let onehot = one_hot(correct, s[1]).map_err(|_| Error::invalid("no correct choice marked"))?;
    let others = g.constant(onehot.map(|v| 1.0 - v))?;
    let mask = g.constant(onehot)?;
    let sp = scores.mul(mask)?.sum(-1)?.unsqueeze(1)?;
    let margins = scores.sub(sp)?.add_scalar(1.0)?.relu()?.mul(others)?;
    margins.sum_all()?.scale(1.0 / correct.len() as f64)
}

/// Mean squared error of raw predictions.
pub fn mse_loss<'t>(g: &'t Graph<'_>, raw: Var<'t>, targets: &[f64]) -> Result<Var<'t>> {
    if raw.shape() != [targets.len()] {
        return Err(Error::shape("mse_loss", format!("predictions {:?} vs {} targets", raw.shape(), targets.len())));
    }
    let diff = raw.sub(g.constant(Tensor::vector(targets))?)?;
    diff.mul(diff)?.mean(0)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise argmax of a `[B, C]` tensor.
pub fn argmax_rows(t: &Tensor) -> Vec<usize> {
    let c = *t.shape().last().expect("rank >= 1");
    t.data().chunks(c).map(argmax).collect()
}

/// Rounds half away from zero, then clamps to `0..=MAX_COUNT`.
pub fn round_count(raw: f64) -> usize {
    raw.round().clamp(0.0, MAX_COUNT as f64) as usize
}

/// Pair loss for one (correct, incorrect) score pair.
pub fn pair_hinge(s_pos: f64, s_neg: f64) -> f64 {
    (1.0 + s_neg - s_pos).max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn pair_hinge_examples() {
        assert_eq!(pair_hinge(2.0, 0.0), 0.0);
        assert_eq!(pair_hinge(1.0, 1.0), 1.0);
        assert_eq!(pair_hinge(0.5, 1.0), 1.5);
    }

    #[test]
    fn rounding_rule() {
        assert_eq!(round_count(3.4), 3);
        assert_eq!(round_count(3.5), 4);
        assert_eq!(round_count(-0.7), 0);
        assert_eq!(round_count(12.2), 10);
    }

    #[test]
    fn argmax_ties_pick_lowest() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0]), 1);
        assert_eq!(argmax(&[0.0, 0.0]), 0);
    }

    #[test]
    fn uniform_prediction_loss_is_log_classes() {
        let store = ParamStore::new();
        let g = Graph::new(&store);
        let logits = g.constant(Tensor::zeros(&[2, 5])).unwrap();
        let p = logits.softmax(-1).unwrap().value();
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
        let l = nll_loss(&g, logits, &[0, 3]).unwrap().item().unwrap();
        assert!((l - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hinge_batch_sum() {
        let store = ParamStore::new();
        let g = Graph::new(&store);
        let s = g.constant(Tensor::new(vec![1, 3], vec![0.5, 1.0, -1.0]).unwrap()).unwrap();
        // pairs: (0.5 vs 1.0) -> 1.5, (0.5 vs -1.0) -> 0
        assert_eq!(hinge_loss(&g, s, &[0]).unwrap().item().unwrap(), 1.5);
        assert!(hinge_loss(&g, s, &[3]).is_err());
    }

    #[test]
    fn heads_produce_expected_shapes() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng(0);
        let mut sc = Scope::new(&mut store, "");
        let oe = OpenEndedHead::new(&mut sc, "oe", 6, 4, 3, &mut rng).unwrap();
        let mc = MultiChoiceHead::new(&mut sc, "mc", 6, 4, &mut rng);
        let ct = CountHead::new(&mut sc, "ct", 6, 4, &mut rng);
        assert!(OpenEndedHead::new(&mut sc, "bad", 6, 4, 1, &mut rng).is_err());
        let g = Graph::new(&store);
        let f = g.constant(Tensor::ones(&[2, 6])).unwrap();
        let q = g.constant(Tensor::ones(&[2, 4])).unwrap();
        assert_eq!(oe.logits(&g, &[f], q).unwrap().shape(), vec![2, 3]);
        assert_eq!(ct.raw(&g, &[f], q).unwrap().shape(), vec![2]);
        let fa = g.constant(Tensor::ones(&[2, 5, 6])).unwrap();
        let a = g.constant(Tensor::ones(&[2, 5, 4])).unwrap();
        assert_eq!(mc.scores(&g, &[fa], q, a).unwrap().shape(), vec![2, 5]);
    }
}
