//! Finite-difference checks over every trainable block on small random
//! instances.

use rand::Rng;
use serde::Serialize;

use crate::autodiff::{Graph, Var};
use crate::crn::{Conditioning, CrnConfig, CrnUnit, GMode, ObjectArray, Sampling};
use crate::decoders::{hinge_loss, mse_loss, nll_loss, CountHead, MultiChoiceHead, OpenEndedHead};
use crate::error::Result;
use crate::gap::{kl_attention_loss, EntityToWord, ParseTree, TreeLstm};
use crate::gradcheck::{grad_check, grad_check_input, grad_check_params, random_tensor, Coverage};
use crate::hcrn::{Hierarchy, VisualConfig, VisualStream};
use crate::lognet::{LogConfig, LogNet, BOX_DIM};
use crate::params::{ParamStore, Scope};
use crate::tensor::Tensor;

pub const EPSILON: f64 = 1e-6;
/// Parameter coordinates probed per instance.
const PROBES: usize = 48;

pub const BLOCKS: [&str; 13] = [
    "crn/additive",
    "crn/multiplicative",
    "crn/sequential_additive",
    "crn/sequential_multiplicative",
    "crn/dual",
    "hcrn/two_level",
    "log/full_step",
    "gap/tree_lstm",
    "decoder/open_ended",
    "decoder/multi_choice",
    "decoder/count",
    "gap/kl_visual",
    "gap/kl_linguistic",
];

#[derive(Clone, Debug, Serialize)]
pub struct BlockReport {
    pub block: String,
    pub instances: usize,
    pub max_rel_err: f64,
}

/// Runs `instances` random checks per block (all blocks when `only` is empty).
pub fn run(instances: usize, seed: u64, only: &[String]) -> Result<Vec<BlockReport>> {
    let mut out = Vec::new();
    for (b, &block) in BLOCKS.iter().enumerate() {
        if !only.is_empty() && !only.iter().any(|o| block.starts_with(o.as_str())) {
            continue;
        }
        let mut worst = 0.0_f64;
        for i in 0..instances {
            let mut rng = crate::rng(seed);
            rng.set_stream((b as u64) << 32 | i as u64);
            worst = worst.max(check_block(block, &mut rng)?);
        }
        out.push(BlockReport { block: block.to_string(), instances, max_rel_err: worst });
    }
    Ok(out)
}

/// `Σ out ⊙ w` for a fixed random `w`, so every output coordinate matters.
fn project<'t>(g: &'t Graph<'_>, out: Var<'t>, w: &Tensor) -> Result<Var<'t>> {
    out.mul(g.constant(w.clone())?)?.sum_all()
}

fn random_dist(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| if rng.random_bool(0.25) { 0.0 } else { rng.random_range(0.1..1.0) }).collect();
    let z: f64 = raw.iter().sum();
    if z == 0.0 {
        return vec![1.0 / n as f64; n];
    }
    raw.iter().map(|v| v / z).collect()
}

/// Random binary bracketing of `s` words: leaves first, phrases in merge order.
fn random_tree(s: usize, rng: &mut impl Rng) -> Result<ParseTree> {
    let mut parent: Vec<Option<usize>> = vec![None; s];
    let mut frontier: Vec<usize> = (0..s).collect();
    while frontier.len() > 1 {
        let i = rng.random_range(0..frontier.len() - 1);
        let node = parent.len();
        parent.push(None);
        parent[frontier[i]] = Some(node);
        parent[frontier[i + 1]] = Some(node);
        frontier.splice(i..i + 2, [node]);
    }
    let n = parent.len();
    let tags = (0..n).map(|i| if i < s { "W".to_string() } else { "NP".to_string() }).collect();
    ParseTree::new(parent, tags, (0..n).map(|i| i >= s).collect())
}

fn conditioning(block: &str) -> Conditioning {
    match block {
        "crn/additive" => Conditioning::Additive,
        "crn/multiplicative" => Conditioning::Multiplicative,
        "crn/sequential_additive" => Conditioning::SequentialAdditive,
        "crn/sequential_multiplicative" => Conditioning::SequentialMultiplicative,
        _ => Conditioning::Dual,
    }
}

fn check_block(block: &str, rng: &mut impl Rng) -> Result<f64> {
    let probe_seed = rng.random::<u64>();
    let coverage = Coverage::Sample(PROBES, probe_seed);
    let mut store = ParamStore::new();
    match block {
        b if b.starts_with("crn/") => {
            let variant = conditioning(b);
            let (n, d, batch) = (rng.random_range(3..=5), 2 * rng.random_range(1..=2), 2);
            let cfg = CrnConfig {
                k_max: Some(rng.random_range(2..n)),
                t: rng.random_range(1..=3),
                conditioning: variant,
                d,
                g_mode: if rng.random_bool(0.5) { GMode::Average } else { GMode::Concat },
                sampling: Sampling::Random,
            };
            let member: Vec<usize> = if rng.random_bool(0.5) { vec![d] } else { vec![2, d] };
            let unit = CrnUnit::new(&mut Scope::new(&mut store, ""), "crn", n, &cfg, rng)?;
            let mut shape = vec![batch, n];
            shape.extend(&member);
            let x = random_tensor(&shape, 1.0, rng);
            let c = random_tensor(&[batch, d], 1.0, rng);
            let c2 = random_tensor(&[batch, d], 1.0, rng);
            let out_shape = {
                let g = Graph::new(&store);
                let o = unit.forward(
                    &g,
                    ObjectArray::new(g.constant(x.clone())?)?,
                    g.constant(c.clone())?,
                    Some(g.constant(c2.clone())?),
                    &mut crate::rng(probe_seed),
                )?;
                o.objects.data().shape()
            };
            let w = random_tensor(&out_shape, 1.0, rng);
            grad_check_params(
                &store,
                |g| {
                    // same subsets on every evaluation
                    let mut r = crate::rng(probe_seed);
                    let o = unit.forward(
                        g,
                        ObjectArray::new(g.constant(x.clone())?)?,
                        g.constant(c.clone())?,
                        Some(g.constant(c2.clone())?),
                        &mut r,
                    )?;
                    project(g, o.objects.data(), &w)
                },
                EPSILON,
                coverage,
            )
        }
        "hcrn/two_level" => {
            let (num_clips, clip_len, d) = (rng.random_range(4..=5), rng.random_range(4..=5), 4);
            let cfg = VisualConfig {
                num_clips,
                clip_len,
                d_in: 3,
                hierarchy: Hierarchy::Two,
                long_form: false,
                t: 2,
                k_max: None,
                g_mode: GMode::Average,
                sampling: Sampling::Random,
            };
            let stream = VisualStream::new(&mut Scope::new(&mut store, ""), "visual", &cfg, d, rng)?;
            let frames = random_tensor(&[2, num_clips, clip_len, 3], 1.0, rng);
            let motion = random_tensor(&[2, num_clips, 3], 1.0, rng);
            let q = random_tensor(&[2, d], 1.0, rng);
            let out_shape = {
                let g = Graph::new(&store);
                stream
                    .forward(
                        &g,
                        g.constant(frames.clone())?,
                        Some(g.constant(motion.clone())?),
                        g.constant(q.clone())?,
                        &mut crate::rng(probe_seed),
                    )?
                    .shape()
            };
            let w = random_tensor(&out_shape, 1.0, rng);
            grad_check_params(
                &store,
                |g| {
                    let out = stream.forward(
                        g,
                        g.constant(frames.clone())?,
                        Some(g.constant(motion.clone())?),
                        g.constant(q.clone())?,
                        &mut crate::rng(probe_seed),
                    )?;
                    project(g, out, &w)
                },
                EPSILON,
                coverage,
            )
        }
        "log/full_step" => {
            let cfg = LogConfig {
                d: 4,
                d_app: 3,
                vocab: 5,
                steps: rng.random_range(1..=2),
                heads: 2,
                gcn_layers: rng.random_range(1..=2),
                rank: None,
                num_answers: 3,
            };
            let (b, n, s) = (3, rng.random_range(2..=4), rng.random_range(2..=4));
            let net = LogNet::new(&mut Scope::new(&mut store, ""), "log", &cfg, rng)?;
            let app = random_tensor(&[b, n, cfg.d_app], 1.0, rng);
            let boxes = random_tensor(&[b, n, BOX_DIM], 1.0, rng);
            let tokens: Vec<usize> = (0..b * s).map(|_| rng.random_range(0..cfg.vocab)).collect();
            let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..cfg.num_answers)).collect();
            grad_check_params(
                &store,
                |g| {
                    let out = net.forward(g, g.constant(app.clone())?, g.constant(boxes.clone())?, &tokens)?;
                    nll_loss(g, out.logits, &labels)
                },
                EPSILON,
                coverage,
            )
        }
        "gap/tree_lstm" => {
            let s = rng.random_range(2..=5);
            let tree = random_tree(s, rng)?;
            let lstm = TreeLstm::new(&mut Scope::new(&mut store, ""), "tree", 3, 3, rng);
            let leaves = random_tensor(&[2, s, 3], 1.0, rng);
            let w = random_tensor(&[2, tree.len(), 3], 1.0, rng);
            let on_params = grad_check_params(
                &store,
                |g| project(g, lstm.encode(g, &tree, g.constant(leaves.clone())?)?.nodes, &w),
                EPSILON,
                coverage,
            )?;
            let on_leaves =
                grad_check_input(&store, |g, x| project(g, lstm.encode(g, &tree, x)?.nodes, &w), &leaves, EPSILON)?;
            Ok(on_params.max(on_leaves))
        }
        "decoder/open_ended" => {
            let (b, f, d, a) = (3, 3, 3, rng.random_range(2..=5));
            let head = OpenEndedHead::new(&mut Scope::new(&mut store, ""), "head", f, d, a, rng)?;
            let feat = random_tensor(&[b, f], 1.0, rng);
            let q = random_tensor(&[b, d], 1.0, rng);
            let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..a)).collect();
            grad_check_params(
                &store,
                |g| nll_loss(g, head.logits(g, &[g.constant(feat.clone())?], g.constant(q.clone())?)?, &labels),
                EPSILON,
                coverage,
            )
        }
        "decoder/multi_choice" => {
            let (b, f, d, a) = (3, 3, 3, rng.random_range(2..=5));
            let head = MultiChoiceHead::new(&mut Scope::new(&mut store, ""), "head", f, d, rng);
            let feat = random_tensor(&[b, a, f], 1.0, rng);
            let q = random_tensor(&[b, d], 1.0, rng);
            let ans = random_tensor(&[b, a, d], 1.0, rng);
            let correct: Vec<usize> = (0..b).map(|_| rng.random_range(0..a)).collect();
            grad_check_params(
                &store,
                |g| {
                    let s =
                        head.scores(g, &[g.constant(feat.clone())?], g.constant(q.clone())?, g.constant(ans.clone())?)?;
                    hinge_loss(g, s, &correct)
                },
                EPSILON,
                coverage,
            )
        }
        "decoder/count" => {
            let (b, f, d) = (3, 3, 3);
            let head = CountHead::new(&mut Scope::new(&mut store, ""), "head", f, d, rng);
            let feat = random_tensor(&[b, f], 1.0, rng);
            let q = random_tensor(&[b, d], 1.0, rng);
            let targets: Vec<f64> = (0..b).map(|_| rng.random_range(0..=10) as f64).collect();
            grad_check_params(
                &store,
                |g| mse_loss(g, head.raw(g, &[g.constant(feat.clone())?], g.constant(q.clone())?)?, &targets),
                EPSILON,
                coverage,
            )
        }
        "gap/kl_visual" => {
            let (b, n) = (rng.random_range(1..=3), rng.random_range(2..=6));
            let logits = random_tensor(&[b, n], 2.0, rng);
            let prior: Vec<f64> = (0..b).flat_map(|_| random_dist(n, rng)).collect();
            let prior = Tensor::new(vec![b, n], prior)?;
            grad_check(|g, x| kl_attention_loss(g, x.softmax(-1)?, &prior), &logits, EPSILON)
        }
        "gap/kl_linguistic" => {
            let (b, s, d) = (2, rng.random_range(2..=5), 3);
            let tree = random_tree(s, rng)?;
            let spans = tree.spans().to_vec();
            let t = tree.len();
            let map = EntityToWord::new(&mut Scope::new(&mut store, ""), "e2w", d, rng);
            let alpha_logits = random_tensor(&[b, t], 1.0, rng);
            let entities = random_tensor(&[b, t, d], 1.0, rng);
            let words = random_tensor(&[b, s, d], 1.0, rng);
            let vhat = random_tensor(&[b, d], 1.0, rng);
            let prior: Vec<f64> = (0..b).flat_map(|_| random_dist(s, rng)).collect();
            let prior = Tensor::new(vec![b, s], prior)?;
            let on_params = grad_check_params(
                &store,
                |g| {
                    let alpha = g.constant(alpha_logits.clone())?.softmax(-1)?;
                    let beta = map.forward(
                        g,
                        alpha,
                        g.constant(entities.clone())?,
                        g.constant(words.clone())?,
                        g.constant(vhat.clone())?,
                        &spans,
                    )?;
                    kl_attention_loss(g, beta, &prior)
                },
                EPSILON,
                coverage,
            )?;
            let on_alpha = grad_check_input(
                &store,
                |g, x| {
                    let beta = map.forward(
                        g,
                        x.softmax(-1)?,
                        g.constant(entities.clone())?,
                        g.constant(words.clone())?,
                        g.constant(vhat.clone())?,
                        &spans,
                    )?;
                    kl_attention_loss(g, beta, &prior)
                },
                &alpha_logits,
                EPSILON,
            )?;
            Ok(on_params.max(on_alpha))
        }
        other => Err(crate::error::Error::invalid(format!("unknown block {other}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_block_passes_once() {
        for r in run(1, 3, &[]).unwrap() {
            assert!(r.max_rel_err < 1e-4, "{}: {}", r.block, r.max_rel_err);
        }
    }

    #[test]
    fn filter_selects_by_prefix() {
        let r = run(1, 0, &["decoder".into()]).unwrap();
        assert_eq!(
            r.iter().map(|r| r.block.as_str()).collect::<Vec<_>>(),
            ["decoder/open_ended", "decoder/multi_choice", "decoder/count"]
        );
    }
}
