//! Hierarchical stacks of relation units over clips and videos, the
//! subtitle stream, question encoding and the question-driven readout.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::crn::{output_len, Conditioning, CrnConfig, CrnUnit, GMode, ObjectArray, Sampling};
use crate::error::{Error, Result};
use crate::nn::{BiLstm, Embedding, Linear, Lstm};
use crate::params::Scope;

/// Contextual words `[B, S, d]`, the global query `[B, d]` and optional
/// answer choices `[B, A, d]`.
#[derive(Clone, Copy)]
pub struct QueryEncoding<'t> {
    pub words: Var<'t>,
    pub q: Var<'t>,
    pub answers: Option<Var<'t>>,
}

/// Word embedding followed by a biLSTM.
#[derive(Clone, Debug)]
pub struct QueryEncoder {
    emb: Embedding,
    rnn: BiLstm,
}

impl QueryEncoder {
    pub fn new(scope: &mut Scope<'_>, name: &str, vocab: usize, d: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut s = scope.sub(name);
        Ok(QueryEncoder {
            emb: Embedding::new(&mut s, "emb", vocab, d, rng),
            rnn: BiLstm::new(&mut s, "bilstm", d, d, rng)?,
        })
    }

    /// `tokens` holds `batch` equal-length sequences back to back.
    pub fn forward<'t>(&self, g: &'t Graph<'_>, tokens: &[usize], batch: usize) -> Result<QueryEncoding<'t>> {
        let run = self.rnn.run(g, self.emb.forward(g, tokens, batch)?)?;
        Ok(QueryEncoding { words: run.states, q: run.summary, answers: None })
    }
}

/// Question-gated temporal attention over the frames of a clip.
#[derive(Clone, Debug)]
pub struct ClipAttention {
    wq: Linear,
    wv: Linear,
    w: Linear,
}

impl ClipAttention {
    pub fn new(scope: &mut Scope<'_>, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        let mut s = scope.sub(name);
        ClipAttention {
            wq: Linear::new(&mut s, "wq", d, d, rng),
            wv: Linear::new(&mut s, "wv", d, d, rng),
            w: Linear::no_bias(&mut s, "w", d, 1, rng),
        }
    }

    /// Frame scores `[B, T]`; spatial maps `[B, T, P, d]` are mean-pooled first.
    pub fn scores<'t>(&self, g: &'t Graph<'_>, frames: Var<'t>, q: Var<'t>) -> Result<Var<'t>> {
        let pooled = match frames.shape().len() {
            3 => frames,
            4 => frames.mean(2)?,
            _ => {
                return Err(Error::shape(
                    "clip_attention",
                    format!("expected [B, T, d] or [B, T, P, d], got {:?}", frames.shape()),
                ))
            }
        };
        let gate = self.wq.forward(g, q)?.unsqueeze(1)?;
        let s = self.w.forward(g, self.wv.forward(g, pooled)?.mul(gate)?)?;
        let (b, t) = (s.dim(0), s.dim(1));
        s.reshape(&[b, t])
    }

    /// Returns the attended clip feature and the frame weights.
    pub fn forward<'t>(&self, g: &'t Graph<'_>, frames: Var<'t>, q: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        let weights = self.scores(g, frames, q)?.softmax(-1)?;
        Ok((attend(frames, weights)?, weights))
    }
}

/// `Σ_t weights[b, t] · frames[b, t]`.
pub fn attend<'t>(frames: Var<'t>, weights: Var<'t>) -> Result<Var<'t>> {
    let s = frames.shape();
    let (b, t) = (s[0], s[1]);
    if weights.shape() != [b, t] {
        return Err(Error::shape("attend", format!("weights {:?} vs frames {s:?}", weights.shape())));
    }
    let rest: Vec<usize> = s[2..].to_vec();
    let flat = frames.reshape(&[b, t, rest.iter().product()])?;
    let out = weights.unsqueeze(1)?.matmul(flat)?;
    let mut shape = vec![b];
    shape.extend(rest);
    out.reshape(&shape)
}

/// One hierarchy level: an optional motion-conditioned unit followed by a
/// question-conditioned one.
#[derive(Clone, Debug)]
pub struct Level {
    pub name: String,
    pub motion: Option<CrnUnit>,
    pub question: CrnUnit,
    pub n_in: usize,
    pub n_out: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Stage {
    pub name: String,
    pub n_in: usize,
    pub n_out: usize,
    /// Member shape of each output object.
    pub member: Vec<usize>,
}

/// The predicted object counts and member shapes of every stacked unit.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ShapeChain(pub Vec<Stage>);

impl fmt::Display for ShapeChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> =
            self.0.iter().map(|s| format!("{}: {} -> {} x {:?}", s.name, s.n_in, s.n_out, s.member)).collect();
        write!(f, "{}", parts.join(", "))
    }
}

fn stage_cfg(base: &CrnConfig, n: usize, conditioning: Conditioning) -> CrnConfig {
    CrnConfig { k_max: base.k_max.map(|k| k.min(n - 1).max(2)), ..base.with_conditioning(conditioning) }
}

impl Level {
    #[allow(clippy::too_many_arguments)]
    fn build(
        scope: &mut Scope<'_>,
        name: &str,
        n: usize,
        member: &[usize],
        base: &CrnConfig,
        with_motion: bool,
        chain: &mut ShapeChain,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut s = scope.sub(name);
        let mut unit = |s: &mut Scope<'_>, part: &str, n: usize, cond: Conditioning, chain: &mut ShapeChain| {
            if n < 2 {
                return Err(Error::shape(
                    "hcrn",
                    format!("{name}[{part}] needs at least 2 objects but receives {n}; shape chain: {chain}"),
                ));
            }
            let cfg = stage_cfg(base, n, cond);
            let u = CrnUnit::new(s, part, n, &cfg, rng)?;
            chain.0.push(Stage {
                name: format!("{name}[{part}]"),
                n_in: n,
                n_out: u.output_len(),
                member: u.output_member_shape(member),
            });
            Ok(u)
        };
        let motion = if with_motion { Some(unit(&mut s, "motion", n, Conditioning::Additive, chain)?) } else { None };
        let mid = motion.as_ref().map_or(n, |m| m.output_len());
        let question = unit(&mut s, "question", mid, Conditioning::Multiplicative, chain)?;
        let n_out = question.output_len();
        Ok(Level { name: name.to_string(), motion, question, n_in: n, n_out })
    }

    pub fn forward<'t>(
        &self,
        g: &'t Graph<'_>,
        x: ObjectArray<'t>,
        motion: Option<Var<'t>>,
        q: Var<'t>,
        rng: &mut impl Rng,
    ) -> Result<ObjectArray<'t>> {
        let x = match (&self.motion, motion) {
            (Some(unit), Some(m)) => unit.forward(g, x, m, None, rng)?.objects,
            (Some(_), None) => return Err(Error::invalid(format!("{} level expects a motion feature", self.name))),
            (None, _) => x,
        };
        Ok(self.question.forward(g, x, q, None, rng)?.objects)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "levels", rename_all = "snake_case")]
pub enum Hierarchy {
    Two,
    /// `n1` sub-videos of `n2` clips each.
    Three {
        n1: usize,
        n2: usize,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualConfig {
    pub num_clips: usize,
    pub clip_len: usize,
    /// Raw frame and motion feature width.
    pub d_in: usize,
    pub hierarchy: Hierarchy,
    /// Drops every motion-conditioned unit.
    #[serde(default)]
    pub long_form: bool,
    pub t: usize,
    #[serde(default)]
    pub k_max: Option<usize>,
    #[serde(default)]
    pub g_mode: GMode,
    #[serde(default)]
    pub sampling: Sampling,
}

impl VisualConfig {
    pub fn short_form(num_clips: usize, clip_len: usize, d_in: usize) -> Self {
        VisualConfig {
            num_clips,
            clip_len,
            d_in,
            hierarchy: Hierarchy::Two,
            long_form: false,
            t: 2,
            k_max: None,
            g_mode: GMode::Average,
            sampling: Sampling::Random,
        }
    }

    fn crn(&self, d: usize) -> CrnConfig {
        CrnConfig {
            k_max: self.k_max,
            t: self.t,
            conditioning: Conditioning::Multiplicative,
            d,
            g_mode: self.g_mode,
            sampling: self.sampling,
        }
    }
}

/// The visual stream: frames to a flattened set of `H'` question-aware slots.
#[derive(Clone, Debug)]
pub struct VisualStream {
    pub cfg: VisualConfig,
    pub d: usize,
    frame_proj: Linear,
    motion_proj: Option<Linear>,
    pub clip: Level,
    pub sub: Option<Level>,
    sub_motion: Option<Lstm>,
    pub video: Level,
    video_motion: Option<Lstm>,
    chain: ShapeChain,
}

impl VisualStream {
    pub fn new(scope: &mut Scope<'_>, name: &str, cfg: &VisualConfig, d: usize, rng: &mut impl Rng) -> Result<Self> {
        let (n, t) = (cfg.num_clips, cfg.clip_len);
        if n == 0 || t == 0 {
            return Err(Error::invalid("clip count and clip length must be positive"));
        }
        let groups = match cfg.hierarchy {
            Hierarchy::Two => None,
            Hierarchy::Three { n1, n2 } => {
                if n1 * n2 != n || n1 == 0 {
                    return Err(Error::invalid(format!("grouping {n1} x {n2} does not factor {n} clips")));
                }
                Some((n1, n2))
            }
        };
        let motion = !cfg.long_form;
        let base = cfg.crn(d);
        let mut s = scope.sub(name);
        let mut chain = ShapeChain::default();
        let frame_proj = Linear::new(&mut s, "frame_proj", cfg.d_in, d, rng);
        let motion_proj = motion.then(|| Linear::new(&mut s, "motion_proj", cfg.d_in, d, rng));
        let clip = Level::build(&mut s, "clip", t, &[d], &base, motion, &mut chain, rng)?;
        let clip_member = vec![clip.n_out, d];
        let (sub, sub_motion, video_n, video_member) = match groups {
            Some((n1, n2)) if n2 > 1 => {
                let sub = Level::build(&mut s, "subvideo", n2, &clip_member, &base, motion, &mut chain, rng)?;
                let lstm = motion.then(|| Lstm::new(&mut s, "subvideo_motion", d, d, rng));
                let member = vec![sub.n_out * clip.n_out, d];
                (Some(sub), lstm, n1, member)
            }
            Some((n1, _)) => (None, None, n1, clip_member),
            None => (None, None, n, clip_member),
        };
        let video_motion = motion.then(|| Lstm::new(&mut s, "video_motion", d, d, rng));
        let video = Level::build(&mut s, "video", video_n, &video_member, &base, motion, &mut chain, rng)?;
        Ok(VisualStream {
            cfg: cfg.clone(),
            d,
            frame_proj,
            motion_proj,
            clip,
            sub,
            sub_motion,
            video,
            video_motion,
            chain,
        })
    }

    pub fn shape_chain(&self) -> &ShapeChain {
        &self.chain
    }

    /// Number of readout slots `H'`.
    pub fn slots(&self) -> usize {
        let last = self.chain.0.last().expect("at least one stage");
        last.n_out * last.member[..last.member.len() - 1].iter().product::<usize>()
    }

    /// Every unit with a label naming its level and role.
    pub fn units(&self) -> Vec<(String, &CrnUnit)> {
        let mut out = Vec::new();
        for level in [Some(&self.clip), self.sub.as_ref(), Some(&self.video)].into_iter().flatten() {
            if let Some(m) = &level.motion {
                out.push((format!("{}[motion]", level.name), m));
            }
            out.push((format!("{}[question]", level.name), &level.question));
        }
        out
    }

    /// `frames: [B, N, T, d_in]`, `motion: [B, N, d_in]`, `q: [B, d]`.
    /// Returns the flattened output slots `[B, H', d]`.
    pub fn forward<'t>(
        &self,
        g: &'t Graph<'_>,
        frames: Var<'t>,
        motion: Option<Var<'t>>,
        q: Var<'t>,
        rng: &mut impl Rng,
    ) -> Result<Var<'t>> {
        let (n, t, d) = (self.cfg.num_clips, self.cfg.clip_len, self.d);
        let fs = frames.shape();
        if fs.len() != 4 || fs[1..] != [n, t, self.cfg.d_in] {
            return Err(Error::shape(
                "visual_stream",
                format!("expected [B, {n}, {t}, {}], got {fs:?}", self.cfg.d_in),
            ));
        }
        let b = fs[0];
        let repeat = |v: Var<'t>, times: usize| -> Result<Var<'t>> {
            v.unsqueeze(1)?.broadcast_to(&[b, times, d])?.reshape(&[b * times, d])
        };
        let clip_motion = match (&self.motion_proj, motion) {
            (Some(p), Some(m)) => Some(p.forward(g, m)?),
            (Some(_), None) => return Err(Error::invalid("short-form stream needs clip motion features")),
            (None, _) => None,
        };
        // clip level, every clip of every sample in one batch
        let x = self.frame_proj.forward(g, frames)?.reshape(&[b * n, t, d])?;
        let cm = clip_motion.map(|m| m.reshape(&[b * n, d])).transpose()?;
        let clips = self.clip.forward(g, ObjectArray::new(x)?, cm, repeat(q, n)?, rng)?;
        let tc = self.clip.n_out;
        let clips = clips.data().reshape(&[b, n, tc, d])?;

        let (video_in, video_motion_seq) = match (&self.sub, self.cfg.hierarchy) {
            (Some(sub), Hierarchy::Three { n1, n2 }) => {
                let grouped = clips.reshape(&[b * n1, n2, tc, d])?;
                let sm = match (&self.sub_motion, clip_motion) {
                    (Some(lstm), Some(m)) => Some(lstm.run(g, m.reshape(&[b * n1, n2, d])?, false)?.last),
                    _ => None,
                };
                let out = sub.forward(g, ObjectArray::new(grouped)?, sm, repeat(q, n1)?, rng)?;
                let packed = out.flatten_members()?.reshape(&[b, n1, sub.n_out * tc, d])?;
                (packed, sm.map(|m| m.reshape(&[b, n1, d])).transpose()?)
            }
            _ => (clips, clip_motion),
        };
        let vm = match (&self.video_motion, video_motion_seq) {
            (Some(lstm), Some(seq)) => Some(lstm.run(g, seq, false)?.last),
            _ => None,
        };
        let video = self.video.forward(g, ObjectArray::new(video_in)?, vm, q, rng)?;
        video.flatten_members()
    }
}

/// Question-gated attention pooling over the `H'` output slots.
#[derive(Clone, Debug)]
pub struct Readout {
    wo: Linear,
    wq: Linear,
    wa: Option<Linear>,
    wi: Linear,
    wi2: Linear,
}

impl Readout {
    pub fn new(scope: &mut Scope<'_>, name: &str, d: usize, multi_choice: bool, rng: &mut impl Rng) -> Self {
        let mut s = scope.sub(name);
        let parts = if multi_choice { 3 } else { 2 };
        Readout {
            wo: Linear::no_bias(&mut s, "wo", d, d, rng),
            wq: Linear::no_bias(&mut s, "wq", d, d, rng),
            wa: multi_choice.then(|| Linear::no_bias(&mut s, "wa", d, d, rng)),
            wi: Linear::new(&mut s, "wi", parts * d, d, rng),
            wi2: Linear::new(&mut s, "wi2", d, 1, rng),
        }
    }

    /// `o: [B, H', d]`, `q` and `a: [B, d]`. Returns the pooled `[B, d]` and
    /// the slot weights `[B, H']`.
    pub fn forward<'t>(
        &self,
        g: &'t Graph<'_>,
        o: Var<'t>,
        q: Var<'t>,
        a: Option<Var<'t>>,
    ) -> Result<(Var<'t>, Var<'t>)> {
        let s = o.shape();
        if s.len() != 3 {
            return Err(Error::shape("readout", format!("expected [B, H', d], got {s:?}")));
        }
        let wo = self.wo.forward(g, o)?;
        let mut parts = vec![wo, wo.mul(self.wq.forward(g, q)?.unsqueeze(1)?)?];
        match (&self.wa, a) {
            (Some(wa), Some(a)) => parts.push(wo.mul(wa.forward(g, a)?.unsqueeze(1)?)?),
            (Some(_), None) => return Err(Error::invalid("multi-choice readout needs an answer vector")),
            _ => {}
        }
        let i = self.wi.forward(g, g.concat(&parts, -1)?)?.elu()?;
        let logits = self.wi2.forward(g, i)?.reshape(&[s[0], s[1]])?;
        let gamma = logits.softmax(-1)?;
        Ok((attend(o, gamma)?, gamma))
    }
}

/// `W[x; x ⊙ q]` over the last axis; `q: [B, d]` is broadcast over the
/// middle axes of `x: [B, ..., d]`.
#[derive(Clone, Debug)]
pub struct PreSelect {
    w: Linear,
}

impl PreSelect {
    pub fn new(scope: &mut Scope<'_>, name: &str, d: usize, rng: &mut impl Rng) -> Self {
        PreSelect { w: Linear::new(&mut scope.sub(name), "w", 2 * d, d, rng) }
    }

    pub fn forward<'t>(&self, g: &'t Graph<'_>, x: Var<'t>, q: Var<'t>) -> Result<Var<'t>> {
        let xs = x.shape();
        if q.shape().len() != 2 || q.dim(0) != xs[0] || q.dim(-1) != *xs.last().expect("rank >= 1") {
            return Err(Error::shape("preselect", format!("query {:?} vs objects {xs:?}", q.shape())));
        }
        let mut qs = q;
        for ax in 1..xs.len() - 1 {
            qs = qs.unsqueeze(ax)?;
        }
        let gated = x.mul(qs)?;
        self.w.forward(g, x.concat_with(gated, -1)?)
    }
}

/// Half-overlapping windows: `m` segments of equal length covering `len` words.
pub fn overlapping_segments(len: usize, m: usize) -> Result<Vec<std::ops::Range<usize>>> {
    if m == 0 || !(2 * len).is_multiple_of(m + 1) || !(2 * len / (m + 1)).is_multiple_of(2) {
        return Err(Error::invalid(format!("{len} words do not split into {m} half-overlapping segments")));
    }
    let seg = 2 * len / (m + 1);
    Ok((0..m).map(|i| i * seg / 2..i * seg / 2 + seg).collect())
}

/// The subtitle stream: pre-selection, one relation unit over segments,
/// then temporal max pooling.
#[derive(Clone, Debug)]
pub struct TextualStream {
    seg_select: PreSelect,
    passage_select: PreSelect,
    pub unit: CrnUnit,
    pub m: usize,
}

impl TextualStream {
    pub fn new(scope: &mut Scope<'_>, name: &str, m: usize, cfg: &CrnConfig, rng: &mut impl Rng) -> Result<Self> {
        if m < 3 {
            return Err(Error::invalid(format!("textual stream needs at least 3 segments, got {m}")));
        }
        let mut s = scope.sub(name);
        Ok(TextualStream {
            seg_select: PreSelect::new(&mut s, "segment_select", cfg.d, rng),
            passage_select: PreSelect::new(&mut s, "passage_select", cfg.d, rng),
            unit: CrnUnit::new(&mut s, "crn", m, cfg, rng)?,
            m,
        })
    }

    /// `segments: [B, M, T, d]`, `passage: [B, S, d]`, `q: [B, d]` -> `[B, d]`.
    pub fn forward<'t>(
        &self,
        g: &'t Graph<'_>,
        segments: Var<'t>,
        passage: Var<'t>,
        q: Var<'t>,
        rng: &mut impl Rng,
    ) -> Result<Var<'t>> {
        if segments.shape().len() != 4 || segments.dim(1) != self.m {
            return Err(Error::shape(
                "textual_stream",
                format!("expected [B, {}, T, d], got {:?}", self.m, segments.shape()),
            ));
        }
        let u = self.seg_select.forward(g, segments, q)?;
        let c = self.passage_select.forward(g, passage, q)?.max(1)?;
        let out = self.unit.forward(g, ObjectArray::new(u)?, c, None, rng)?.objects;
        let pooled = out.data().max(1)?;
        if pooled.shape().len() == 3 {
            pooled.max(1)
        } else {
            Ok(pooled)
        }
    }
}

/// Shape-only prediction of the 2-level chain (used by tests and the CLI).
pub fn predicted_slots(n: usize, t: usize) -> usize {
    let stage = |n: usize| output_len(output_len(n, None), None);
    stage(n) * stage(t)
}
