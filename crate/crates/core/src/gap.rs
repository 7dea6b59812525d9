//! Grounding-based attention priors.
//!
//! Queries get a phrase-level encoding from a child-sum TreeLSTM over a
//! supplied constituency tree. Externally computed grounding scores are
//! pooled into word and region priors that supervise a model's attention
//! through KL terms during training only.

use std::ops::Range;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::Scope;
use crate::tensor::Tensor;

/// Smoothing mass added to every entry before a KL term.
pub const KL_EPS: f64 = 1e-8;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawTree {
    parent: Vec<Option<usize>>,
    tags: Vec<String>,
    re: Vec<bool>,
}

/// Constituency tree over a question.
///
/// Nodes `0..S` are the leaves in word order; phrase nodes follow. Every
/// phrase covers a contiguous run of words.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawTree", into = "RawTree")]
pub struct ParseTree {
    parent: Vec<Option<usize>>,
    tags: Vec<String>,
    re: Vec<bool>,
    children: Vec<Vec<usize>>,
    num_words: usize,
    root: usize,
    order: Vec<usize>,
    spans: Vec<Range<usize>>,
}

impl TryFrom<RawTree> for ParseTree {
    type Error = Error;

    fn try_from(raw: RawTree) -> Result<Self> {
        ParseTree::new(raw.parent, raw.tags, raw.re)
    }
}

impl From<ParseTree> for RawTree {
    fn from(t: ParseTree) -> Self {
        RawTree { parent: t.parent, tags: t.tags, re: t.re }
    }
}

impl ParseTree {
    pub fn new(parent: Vec<Option<usize>>, tags: Vec<String>, re: Vec<bool>) -> Result<Self> {
        let n = parent.len();
        if n == 0 {
            return Err(Error::Format("empty parse tree".into()));
        }
        if tags.len() != n || re.len() != n {
            return Err(Error::Format(format!("tree has {n} nodes but {} tags and {} RE flags", tags.len(), re.len())));
        }
        let roots: Vec<usize> = (0..n).filter(|&i| parent[i].is_none()).collect();
        if roots.len() != 1 {
            return Err(Error::Format(format!("tree must have exactly one root, found {}", roots.len())));
        }
        let root = roots[0];
        let mut children = vec![Vec::new(); n];
        for (i, p) in parent.iter().enumerate() {
            if let Some(p) = *p {
                if p >= n || p == i {
                    return Err(Error::Format(format!("node {i} has invalid parent {p}")));
                }
                children[p].push(i);
            }
        }
        let mut depth = vec![0usize; n];
        for (i, d) in depth.iter_mut().enumerate() {
            let mut cur = i;
            let mut steps = 0;
            while let Some(p) = parent[cur] {
                cur = p;
                steps += 1;
                if steps > n {
                    return Err(Error::Format(format!("cycle through node {i}")));
                }
            }
            *d = steps;
        }
        let num_words = children.iter().take_while(|c| c.is_empty()).count();
        if let Some(bad) = (num_words..n).find(|&i| children[i].is_empty()) {
            return Err(Error::Format(format!(
                "leaves must be nodes 0..{num_words} in word order, but node {bad} is also a leaf"
            )));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by_key(|&i| std::cmp::Reverse(depth[i]));
        let mut spans = vec![0..0; n];
        for &i in &order {
            spans[i] = if i < num_words {
                i..i + 1
            } else {
                let lo = children[i].iter().map(|&c| spans[c].start).min().unwrap_or(0);
                let hi = children[i].iter().map(|&c| spans[c].end).max().unwrap_or(0);
                let covered: usize = children[i].iter().map(|&c| spans[c].len()).sum();
                if covered != hi - lo {
                    return Err(Error::Format(format!("phrase node {i} covers a non-contiguous word span")));
                }
                lo..hi
            };
        }
        Ok(ParseTree { parent, tags, re, children, num_words, root, order, spans })
    }

    /// Right-branching chain `w0 (w1 (w2 ...))` with one phrase per suffix.
    pub fn right_branching(num_words: usize) -> Result<Self> {
        if num_words == 0 {
            return Err(Error::invalid("a tree needs at least one word"));
        }
        if num_words == 1 {
            return ParseTree::new(vec![None], vec!["W".into()], vec![false]);
        }
        // phrase node for suffix starting at word s (s = 0..S-2) is S + s
        let s = num_words;
        let mut parent = vec![None; 2 * s - 1];
        for (w, p) in parent.iter_mut().enumerate().take(s) {
            *p = Some(s + w.min(s - 2));
        }
        for k in 1..s - 1 {
            parent[s + k] = Some(s + k - 1);
        }
        let mut tags = vec!["W".to_string(); s];
        tags.extend((0..s - 1).map(|_| "NP".to_string()));
        ParseTree::new(parent, tags, vec![false; 2 * s - 1])
    }

    pub fn len(&self) -> usize {
        self.parent.len()
    }

    pub fn is_empty(&self) -> bool {
        self.parent.is_empty()
    }

    pub fn num_words(&self) -> usize {
        self.num_words
    }

    pub fn root(&self) -> usize {
        self.root
    }

    pub fn children(&self, i: usize) -> &[usize] {
        &self.children[i]
    }

    pub fn parent(&self, i: usize) -> Option<usize> {
        self.parent[i]
    }

    pub fn tag(&self, i: usize) -> &str {
        &self.tags[i]
    }

    /// Word span of every node.
    pub fn spans(&self) -> &[Range<usize>] {
        &self.spans
    }

    /// Nodes flagged as referring expressions.
    pub fn referring_expressions(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.re[i]).collect()
    }

    /// Children before parents.
    pub fn bottom_up(&self) -> &[usize] {
        &self.order
    }
}

/// Per-node states `[B, T, h]` and the root state `[B, h]`.
pub struct TreeEncoding<'t> {
    pub nodes: Var<'t>,
    pub root: Var<'t>,
}

/// Child-sum TreeLSTM. Leaves read the contextual word vectors; phrase
/// nodes take no input.
#[derive(Clone, Debug)]
pub struct TreeLstm {
    w: Linear,
    u_iou: Linear,
    u_f: Linear,
    pub in_dim: usize,
    pub hidden: usize,
}

impl TreeLstm {
    pub fn new(scope: &mut Scope<'_>, name: &str, in_dim: usize, hidden: usize, rng: &mut impl Rng) -> Self {
        let mut s = scope.sub(name);
        TreeLstm {
            // gate order: f, c, i, o
            w: Linear::new(&mut s, "w", in_dim, 4 * hidden, rng),
            u_iou: Linear::no_bias(&mut s, "u_iou", hidden, 3 * hidden, rng),
            u_f: Linear::no_bias(&mut s, "u_f", hidden, hidden, rng),
            in_dim,
            hidden,
        }
    }

    pub fn encode<'t>(&self, g: &'t Graph<'_>, tree: &ParseTree, leaves: Var<'t>) -> Result<TreeEncoding<'t>> {
        let shape = leaves.shape();
        if shape.len() != 3 || shape[1] != tree.num_words() || shape[2] != self.in_dim {
            return Err(Error::shape(
                "tree_lstm",
                format!("expected leaf inputs [B, {}, {}], got {shape:?}", tree.num_words(), self.in_dim),
            ));
        }
        let (b, hd) = (shape[0], self.hidden);
        let zero_in = g.constant(Tensor::zeros(&[b, self.in_dim]))?;
        let mut h: Vec<Option<Var<'t>>> = vec![None; tree.len()];
        let mut c: Vec<Option<Var<'t>>> = vec![None; tree.len()];
        for &i in tree.bottom_up() {
            let x = if i < tree.num_words() { leaves.select(1, i)? } else { zero_in };
            let wx = self.w.forward(g, x)?.split(-1, &[hd, 3 * hd])?;
            let kids = tree.children(i);
            let (cell, hidden) = if kids.is_empty() {
                let iou = wx[1].split(-1, &[hd, hd, hd])?;
                let cell = iou[1].sigmoid()?.mul(iou[0].tanh()?)?;
                (cell, iou[2].sigmoid()?.mul(cell.tanh()?)?)
            } else {
                let hk: Vec<Var<'t>> = kids.iter().map(|&k| h[k].expect("children first")).collect();
                let mut hsum = hk[0];
                for v in &hk[1..] {
                    hsum = hsum.add(*v)?;
                }
                let iou = wx[1].add(self.u_iou.forward(g, hsum)?)?.split(-1, &[hd, hd, hd])?;
                let mut cell = iou[1].sigmoid()?.mul(iou[0].tanh()?)?;
                for (&k, hkv) in kids.iter().zip(&hk) {
                    let f = wx[0].add(self.u_f.forward(g, *hkv)?)?.sigmoid()?;
                    cell = cell.add(f.mul(c[k].expect("children first"))?)?;
                }
                (cell, iou[2].sigmoid()?.mul(cell.tanh()?)?)
            };
            h[i] = Some(hidden);
            c[i] = Some(cell);
        }
        let states: Vec<Var<'t>> = h.into_iter().map(|v| v.expect("every node visited")).collect();
        Ok(TreeEncoding { nodes: g.stack(&states, 1)?, root: states[tree.root()] })
    }
}

/// Raw per-RE grounding scores for one question.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundingPriors {
    /// `R x S` word scores, zero outside each RE's span.
    pub word_scores: Vec<Vec<f64>>,
    /// `R x N` region scores.
    pub region_scores: Vec<Vec<f64>>,
}

/// Mean of the per-RE vectors and its renormalized form.
#[derive(Clone, Debug, PartialEq)]
pub struct Pooled {
    pub mean: Vec<f64>,
    pub distribution: Vec<f64>,
}

/// Voting over referring expressions: arithmetic mean per entry, then
/// renormalization to a distribution.
pub fn pool_priors(raw: &[Vec<f64>]) -> Result<Pooled> {
    let r = raw.len();
    if r == 0 {
        return Err(Error::invalid("pooling needs at least one referring expression"));
    }
    let n = raw[0].len();
    if raw.iter().any(|v| v.len() != n) {
        return Err(Error::invalid("per-RE score vectors differ in length"));
    }
    if raw.iter().flatten().any(|&s| !(0.0..=1.0).contains(&s)) {
        return Err(Error::invalid("association scores must lie in [0, 1]"));
    }
    let mean: Vec<f64> = (0..n).map(|i| raw.iter().map(|v| v[i]).sum::<f64>() / r as f64).collect();
    let total: f64 = mean.iter().sum();
    if total <= 0.0 {
        return Err(Error::invalid("pooled scores carry no mass"));
    }
    let distribution = mean.iter().map(|m| m / total).collect();
    Ok(Pooled { mean, distribution })
}

impl GroundingPriors {
    pub fn pooled(&self) -> Result<(Vec<f64>, Vec<f64>)> {
        Ok((pool_priors(&self.word_scores)?.distribution, pool_priors(&self.region_scores)?.distribution))
    }
}

/// Distributes entity attention over member words with a learned softmax
/// restricted to each entity's span.
#[derive(Clone, Debug)]
pub struct EntityToWord {
    entity: Linear,
    word: Linear,
    visual: Linear,
    score: Linear,
}

impl EntityToWord {
    pub fn new(scope: &mut Scope<'_>, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        let mut s = scope.sub(name);
        EntityToWord {
            entity: Linear::no_bias(&mut s, "entity", d, d, rng),
            word: Linear::no_bias(&mut s, "word", d, d, rng),
            visual: Linear::no_bias(&mut s, "visual", d, d, rng),
            score: Linear::no_bias(&mut s, "score", d, 1, rng),
        }
    }

    /// `alpha: [B, T]`, `entities: [B, T, d]`, `words: [B, S, d]`,
    /// `vhat: [B, d]`; returns `[B, S]`.
    pub fn forward<'t>(
        &self,
        g: &'t Graph<'_>,
        alpha: Var<'t>,
        entities: Var<'t>,
        words: Var<'t>,
        vhat: Var<'t>,
        spans: &[Range<usize>],
    ) -> Result<Var<'t>> {
        let (b, t, s) = (alpha.dim(0), alpha.dim(1), words.dim(1));
        if spans.len() != t || entities.dim(1) != t {
            return Err(Error::shape("map_entity_to_word", format!("{} spans for {t} entities", spans.len())));
        }
        if let Some(i) = spans.iter().position(|r| r.is_empty() || r.end > s) {
            return Err(Error::invalid(format!("entity {i} has an empty or out-of-range span {:?}", spans[i])));
        }
        let left = self.entity.forward(g, entities)?.add(self.visual.forward(g, vhat)?.unsqueeze(1)?)?;
        let mixed = left.unsqueeze(2)?.add(self.word.forward(g, words)?.unsqueeze(1)?)?.tanh()?;
        let scores = self.score.forward(g, mixed)?.reshape(&[b, t, s])?;
        let mut mask = vec![-1e30; t * s];
        for (i, r) in spans.iter().enumerate() {
            for w in r.clone() {
                mask[i * s + w] = 0.0;
            }
        }
        let within = scores.add(g.constant(Tensor::new(vec![t, s], mask)?)?)?.softmax(-1)?;
        alpha.unsqueeze(1)?.matmul(within)?.reshape(&[b, s])
    }
}

/// `KL(prior || pred)` averaged over the batch, after smoothing both sides
/// with [`KL_EPS`] and renormalizing.
pub fn kl_attention_loss<'t>(g: &'t Graph<'_>, pred: Var<'t>, prior: &Tensor) -> Result<Var<'t>> {
    if pred.shape() != prior.shape() {
        return Err(Error::shape("kl_attention_loss", format!("pred {:?} vs prior {:?}", pred.shape(), prior.shape())));
    }
    if prior.data().iter().chain(pred.value().data()).any(|&p| p < 0.0) {
        return Err(Error::invalid("attention distributions must be nonnegative"));
    }
    let n = *prior.shape().last().ok_or_else(|| Error::invalid("scalar attention"))?;
    let rows = prior.numel() / n;
    let mut smoothed = prior.map(|p| p + KL_EPS).into_data();
    for row in smoothed.chunks_mut(n) {
        let z: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= z);
    }
    let ln_prior: Vec<f64> = smoothed.iter().map(|p| p.ln()).collect();
    let target = g.constant(Tensor::new(prior.shape().to_vec(), smoothed)?)?;
    let ln_target = g.constant(Tensor::new(prior.shape().to_vec(), ln_prior)?)?;
    let p = pred.add_scalar(KL_EPS)?;
    let p = p.div(p.sum(-1)?.unsqueeze(p.shape().len() - 1)?)?;
    target.mul(ln_target.sub(p.ln()?)?)?.sum_all()?.scale(1.0 / rows as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GapWeights {
    pub lambda_ling: f64,
    pub lambda_vis: f64,
}

impl Default for GapWeights {
    fn default() -> Self {
        GapWeights { lambda_ling: 1.0, lambda_vis: 1.0 }
    }
}

/// `l_vqa + λ_l l_ling + λ_v l_vis` on training graphs; evaluation graphs
/// get the answer loss alone.
pub fn combined_loss<'t>(
    g: &'t Graph<'_>,
    l_vqa: Var<'t>,
    l_ling: Option<Var<'t>>,
    l_vis: Option<Var<'t>>,
    w: GapWeights,
) -> Result<Var<'t>> {
    if w.lambda_ling < 0.0 || w.lambda_vis < 0.0 || !w.lambda_ling.is_finite() || !w.lambda_vis.is_finite() {
        return Err(Error::invalid(format!("regularization weights must be nonnegative, got {w:?}")));
    }
    if !g.is_training() {
        return Ok(l_vqa);
    }
    let mut total = l_vqa;
    for (term, lambda) in [(l_ling, w.lambda_ling), (l_vis, w.lambda_vis)] {
        if let Some(t) = term {
            if lambda > 0.0 {
                total = total.add(t.scale(lambda)?)?;
            }
        }
    }
    Ok(total)
}

/// One fixture record: a question, its tree and pooled priors.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundingRecord {
    pub id: usize,
    pub tokens: Vec<usize>,
    pub tree: ParseTree,
    pub word_prior: Vec<f64>,
    pub region_prior: Vec<f64>,
}

impl GroundingRecord {
    pub fn validate(&self) -> Result<()> {
        if self.tree.num_words() != self.tokens.len() {
            return Err(Error::Format(format!(
                "record {}: tree has {} leaves for {} tokens",
                self.id,
                self.tree.num_words(),
                self.tokens.len()
            )));
        }
        for (what, v) in [("word", &self.word_prior), ("region", &self.region_prior)] {
            let sum: f64 = v.iter().sum();
            if v.iter().any(|&p| p < 0.0) || (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Format(format!("record {}: {what} prior is not a distribution", self.id)));
            }
        }
        Ok(())
    }
}

/// Word and region priors of a batch as `[B, S]` and `[B, N]` tensors.
pub fn prior_tensors(records: &[&GroundingRecord]) -> Result<(Tensor, Tensor)> {
    let first = records.first().ok_or_else(|| Error::invalid("empty batch of priors"))?;
    let (s, n) = (first.word_prior.len(), first.region_prior.len());
    if records.iter().any(|r| r.word_prior.len() != s || r.region_prior.len() != n) {
        return Err(Error::invalid("priors in one batch must share their lengths"));
    }
    let words = records.iter().flat_map(|r| r.word_prior.iter().copied()).collect();
    let regions = records.iter().flat_map(|r| r.region_prior.iter().copied()).collect();
    Ok((Tensor::new(vec![records.len(), s], words)?, Tensor::new(vec![records.len(), n], regions)?))
}
