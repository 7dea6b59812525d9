//! End-to-end question answering models assembled from the building blocks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::crn::{GMode, Sampling};
use crate::decoders::{argmax_rows, mse_loss, nll_loss, round_count, CountHead, OpenEndedHead};
use crate::error::Result;
use crate::hcrn::{Hierarchy, QueryEncoder, Readout, VisualConfig, VisualStream};
use crate::params::Scope;
use crate::synth::{SequenceBatch, SequenceSpec, TaskKind};

fn default_t() -> usize {
    2
}

fn two_levels() -> Hierarchy {
    Hierarchy::Two
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HcrnConfig {
    pub d: usize,
    #[serde(default = "default_t")]
    pub t: usize,
    #[serde(default)]
    pub k_max: Option<usize>,
    #[serde(default)]
    pub g_mode: GMode,
    #[serde(default)]
    pub sampling: Sampling,
    #[serde(default = "two_levels")]
    pub hierarchy: Hierarchy,
}

impl HcrnConfig {
    pub fn visual(&self, spec: &SequenceSpec) -> VisualConfig {
        VisualConfig {
            num_clips: spec.num_clips,
            clip_len: spec.clip_len,
            d_in: spec.d,
            hierarchy: self.hierarchy,
            long_form: false,
            t: self.t,
            k_max: self.k_max,
            g_mode: self.g_mode,
            sampling: self.sampling,
        }
    }
}

#[derive(Clone, Debug)]
enum Head {
    Classes(OpenEndedHead),
    Count(CountHead),
}

/// Video QA model: question encoder, hierarchical visual stream, attention
/// readout and a classification or count head.
#[derive(Clone, Debug)]
pub struct HcrnModel {
    pub encoder: QueryEncoder,
    pub visual: VisualStream,
    readout: Readout,
    head: Head,
}

impl HcrnModel {
    pub fn new(
        scope: &mut Scope<'_>,
        name: &str,
        cfg: &HcrnConfig,
        spec: &SequenceSpec,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut s = scope.sub(name);
        let d = cfg.d;
        let encoder = QueryEncoder::new(&mut s, "query", spec.question_vocab(), d, rng)?;
        let visual = VisualStream::new(&mut s, "visual", &cfg.visual(spec), d, rng)?;
        let readout = Readout::new(&mut s, "readout", d, false, rng);
        let head = match spec.kind {
            TaskKind::CountSymbol => Head::Count(CountHead::new(&mut s, "count", d, d, rng)),
            _ => Head::Classes(OpenEndedHead::new(&mut s, "answer", d, d, spec.num_classes(), rng)?),
        };
        Ok(HcrnModel { encoder, visual, readout, head })
    }

    pub fn is_count(&self) -> bool {
        matches!(self.head, Head::Count(_))
    }

    /// Logits `[B, C]` for classification, raw counts `[B]` otherwise.
    pub fn forward<'t>(&self, g: &'t Graph<'_>, batch: &SequenceBatch, rng: &mut impl Rng) -> Result<Var<'t>> {
        let b = batch.labels.len();
        let enc = self.encoder.forward(g, &batch.tokens, b)?;
        let frames = g.constant(batch.frames.clone())?;
        let motion = g.constant(batch.motion.clone())?;
        let slots = self.visual.forward(g, frames, Some(motion), enc.q, rng)?;
        let (pooled, _) = self.readout.forward(g, slots, enc.q, None)?;
        match &self.head {
            Head::Classes(h) => h.logits(g, &[pooled], enc.q),
            Head::Count(h) => h.raw(g, &[pooled], enc.q),
        }
    }

    pub fn loss<'t>(&self, g: &'t Graph<'_>, out: Var<'t>, labels: &[usize]) -> Result<Var<'t>> {
        match self.head {
            Head::Classes(_) => nll_loss(g, out, labels),
            Head::Count(_) => mse_loss(g, out, &labels.iter().map(|&l| l as f64).collect::<Vec<_>>()),
        }
    }

    pub fn predict(&self, out: Var<'_>) -> Vec<usize> {
        match self.head {
            Head::Classes(_) => argmax_rows(&out.value()),
            Head::Count(_) => out.value().data().iter().map(|&r| round_count(r)).collect(),
        }
    }
}
