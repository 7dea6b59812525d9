//! Deterministic synthetic QA tasks with labels computed by construction.
//!
//! Samples store symbolic content only (symbol ids, object attributes and
//! positions). Feature tensors are rebuilt from prototype tables that are
//! a pure function of the task seed, so datasets stay small on disk and
//! every label can be recomputed from the features alone.

use std::io::{BufRead, Write};

use rand::seq::index::sample as sample_indices;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gap::{pool_priors, GroundingRecord, ParseTree};
use crate::lognet::BOX_DIM;
use crate::tensor::Tensor;

pub const FORMAT: &str = "relnet-synth";
pub const VERSION: u32 = 1;

/// Largest count a `count_symbol` question can have.
pub const MAX_COUNT: usize = crate::decoders::MAX_COUNT;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    CountSymbol,
    TransitionOrder,
    AttributeQuery,
    RelationQuery,
}

impl TaskKind {
    pub fn is_sequence(self) -> bool {
        matches!(self, TaskKind::CountSymbol | TaskKind::TransitionOrder)
    }
}

// question words shared by the sequence templates; symbol tokens follow
const HOW: usize = 0;
const MANY: usize = 1;
const DOES: usize = 2;
const BEFORE: usize = 3;
const SEQ_WORDS: usize = 4;

// scene template words; color tokens follow
const WHAT: usize = 0;
const SHAPE: usize = 1;
const IS: usize = 2;
const THE: usize = 3;
const LEFT: usize = 4;
const OF: usize = 5;
const OBJECT: usize = 6;
const SCENE_WORDS: usize = 7;

/// Unit-norm random vectors, exactly orthogonal when `count <= dim`.
fn prototypes(count: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    for _ in 0..count {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        if out.len() < dim {
            for u in &out {
                let dot: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(u).for_each(|(a, b)| *a -= dot * b);
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        out.push(v);
    }
    out
}

fn nearest(table: &[Vec<f64>], x: &[f64]) -> usize {
    let score = |p: &Vec<f64>| p.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    (0..table.len()).max_by(|&a, &b| score(&table[a]).total_cmp(&score(&table[b])).then(b.cmp(&a))).unwrap_or(0)
}

fn streams(seed: u64) -> (ChaCha8Rng, ChaCha8Rng) {
    let samples = crate::rng(seed);
    let mut protos = crate::rng(seed);
    protos.set_stream(1);
    (samples, protos)
}

/// `count` labels cycling over `0..classes`, shuffled.
fn stratified(count: usize, classes: usize, rng: &mut impl Rng) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..count).map(|i| i % classes).collect();
    labels.shuffle(rng);
    labels
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSpec {
    pub kind: TaskKind,
    pub num_clips: usize,
    pub clip_len: usize,
    pub symbols: usize,
    pub d: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl SequenceSpec {
    pub fn len(&self) -> usize {
        self.num_clips * self.clip_len
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn question_vocab(&self) -> usize {
        SEQ_WORDS + self.symbols
    }

    pub fn num_classes(&self) -> usize {
        match self.kind {
            TaskKind::CountSymbol => MAX_COUNT + 1,
            _ => 2,
        }
    }

    fn validate(&self) -> Result<()> {
        if !self.kind.is_sequence() {
            return Err(Error::invalid(format!("{:?} is not a sequence task", self.kind)));
        }
        if self.symbols < 2 || self.d == 0 || self.num_clips == 0 || self.clip_len == 0 {
            return Err(Error::invalid("sequence tasks need at least 2 symbols and non-empty clips"));
        }
        match self.kind {
            TaskKind::CountSymbol if self.len() < MAX_COUNT => {
                Err(Error::invalid(format!("counts up to {MAX_COUNT} do not fit in {} frames", self.len())))
            }
            TaskKind::TransitionOrder if self.symbols < 3 || self.len() < 2 => {
                Err(Error::invalid("transition_order needs 3 symbols and at least 2 frames"))
            }
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SequenceSample {
    pub id: usize,
    /// Symbol id per frame, `num_clips * clip_len` entries.
    pub frames: Vec<usize>,
    pub question: Vec<usize>,
    pub label: usize,
}

#[derive(Clone, Debug)]
pub struct SequenceTask {
    pub spec: SequenceSpec,
    pub samples: Vec<SequenceSample>,
    table: Vec<Vec<f64>>,
}

/// Model-ready tensors for a batch of sequence samples.
pub struct SequenceBatch {
    /// `[B, N, T, d]`
    pub frames: Tensor,
    /// Mean frame of each clip, `[B, N, d]`.
    pub motion: Tensor,
    /// Row-major `[B, S]`.
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

pub fn gen_sequence_task(spec: &SequenceSpec) -> Result<SequenceTask> {
    spec.validate()?;
    let (mut rng, mut proto_rng) = streams(spec.seed);
    let table = prototypes(spec.symbols, spec.d, &mut proto_rng);
    let labels = stratified(spec.n_samples, spec.num_classes(), &mut rng);
    let len = spec.len();
    let samples = labels
        .into_iter()
        .enumerate()
        .map(|(id, label)| match spec.kind {
            TaskKind::CountSymbol => {
                let target = rng.random_range(0..spec.symbols);
                let mut frames: Vec<usize> = (0..len)
                    .map(|_| {
                        let s = rng.random_range(0..spec.symbols - 1);
                        if s >= target {
                            s + 1
                        } else {
                            s
                        }
                    })
                    .collect();
                for pos in sample_indices(&mut rng, len, label) {
                    frames[pos] = target;
                }
                SequenceSample { id, frames, question: vec![HOW, MANY, SEQ_WORDS + target], label }
            }
            _ => {
                let picked = sample_indices(&mut rng, spec.symbols, 2).into_vec();
                let (a, b) = (picked[0], picked[1]);
                let (first, second) = if label == 1 { (a, b) } else { (b, a) };
                let switch = rng.random_range(1..len);
                let mut frames: Vec<usize> = (0..len).map(|i| if i < switch { first } else { second }).collect();
                // sprinkle distractors, keeping both states present
                #[allow(clippy::needless_range_loop)]
                for i in 0..len {
                    if i != 0 && i != len - 1 && i != switch && i != switch - 1 && rng.random_bool(0.2) {
                        let mut s = rng.random_range(0..spec.symbols - 2);
                        for used in [a.min(b), a.max(b)] {
                            if s >= used {
                                s += 1;
                            }
                        }
                        frames[i] = s;
                    }
                }
                SequenceSample { id, frames, question: vec![DOES, SEQ_WORDS + a, BEFORE, SEQ_WORDS + b], label }
            }
        })
        .collect();
    Ok(SequenceTask { spec: spec.clone(), samples, table })
}

impl SequenceTask {
    pub fn from_samples(spec: SequenceSpec, samples: Vec<SequenceSample>) -> Result<Self> {
        spec.validate()?;
        let (_, mut proto_rng) = streams(spec.seed);
        let table = prototypes(spec.symbols, spec.d, &mut proto_rng);
        for s in &samples {
            if s.frames.len() != spec.len() || s.frames.iter().any(|&f| f >= spec.symbols) {
                return Err(Error::Format(format!("sample {} does not match the task header", s.id)));
            }
        }
        Ok(SequenceTask { spec, samples, table })
    }

    pub fn feature(&self, symbol: usize) -> &[f64] {
        &self.table[symbol]
    }

    /// Frame features for one sample, `L x d` flat.
    pub fn features(&self, s: &SequenceSample) -> Vec<f64> {
        s.frames.iter().flat_map(|&f| self.table[f].iter().copied()).collect()
    }

    pub fn batch(&self, ids: &[usize]) -> Result<SequenceBatch> {
        let (n, t, d) = (self.spec.num_clips, self.spec.clip_len, self.spec.d);
        let b = ids.len();
        if b == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let mut frames = Vec::with_capacity(b * n * t * d);
        let mut motion = Vec::with_capacity(b * n * d);
        let mut tokens = Vec::new();
        let mut labels = Vec::with_capacity(b);
        let qlen = self.samples[ids[0]].question.len();
        for &i in ids {
            let s = self.samples.get(i).ok_or_else(|| Error::invalid(format!("sample {i} out of range")))?;
            if s.question.len() != qlen {
                return Err(Error::invalid("questions in one batch must share a length"));
            }
            let feats = self.features(s);
            for clip in feats.chunks(t * d) {
                for j in 0..d {
                    motion.push((0..t).map(|k| clip[k * d + j]).sum::<f64>() / t as f64);
                }
            }
            frames.extend(feats);
            tokens.extend(&s.question);
            labels.push(s.label);
        }
        Ok(SequenceBatch {
            frames: Tensor::new(vec![b, n, t, d], frames)?,
            motion: Tensor::new(vec![b, n, d], motion)?,
            tokens,
            labels,
        })
    }

    /// Recomputes a label from the frame features alone.
    pub fn recompute_label(&self, features: &[f64], question: &[usize]) -> usize {
        let decoded: Vec<usize> = features.chunks(self.spec.d).map(|f| nearest(&self.table, f)).collect();
        match self.spec.kind {
            TaskKind::CountSymbol => decoded.iter().filter(|&&s| s == question[2] - SEQ_WORDS).count(),
            _ => {
                let first = |sym: usize| decoded.iter().position(|&s| s == sym).unwrap_or(usize::MAX);
                usize::from(first(question[1] - SEQ_WORDS) < first(question[3] - SEQ_WORDS))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub kind: TaskKind,
    pub n_objects: usize,
    pub colors: usize,
    pub shapes: usize,
    /// Appearance width; half codes color, half codes shape.
    pub d_app: usize,
    pub n_samples: usize,
    pub seed: u64,
}

impl SceneSpec {
    pub fn question_vocab(&self) -> usize {
        SCENE_WORDS + self.colors
    }

    pub fn question_len(&self) -> usize {
        match self.kind {
            TaskKind::AttributeQuery => 6,
            _ => 10,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.kind.is_sequence() {
            return Err(Error::invalid(format!("{:?} is not a scene task", self.kind)));
        }
        let min_objects = if self.kind == TaskKind::RelationQuery { 2 } else { 1 };
        if self.n_objects < min_objects {
            return Err(Error::invalid(format!("{:?} needs at least {min_objects} objects", self.kind)));
        }
        if self.colors < self.n_objects {
            return Err(Error::invalid(format!(
                "{} colors cannot give {} objects unique colors",
                self.colors, self.n_objects
            )));
        }
        if self.shapes < 2 || self.d_app < 2 || !self.d_app.is_multiple_of(2) {
            return Err(Error::invalid("scene tasks need 2+ shapes and an even appearance width"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneObject {
    pub color: usize,
    pub shape: usize,
    /// Box center and size in unit image coordinates.
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl SceneObject {
    pub fn box_features(&self) -> [f64; BOX_DIM] {
        let (x0, y0) = (self.x - self.w / 2.0, self.y - self.h / 2.0);
        [x0, y0, x0 + self.w, y0 + self.h, self.w, self.h, self.w * self.h]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSample {
    pub id: usize,
    pub objects: Vec<SceneObject>,
    pub question: Vec<usize>,
    pub label: usize,
    /// Index of the object holding the answer.
    pub target: usize,
}

#[derive(Clone, Debug)]
pub struct SceneTask {
    pub spec: SceneSpec,
    pub samples: Vec<SceneSample>,
    colors: Vec<Vec<f64>>,
    shapes: Vec<Vec<f64>>,
}

pub struct SceneBatch {
    /// `[B, N, d_app]`
    pub appearance: Tensor,
    /// `[B, N, 7]`
    pub boxes: Tensor,
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
    /// One-hot answer object per sample, `[B, N]`.
    pub targets: Tensor,
}

/// Object immediately left of `reference`: the largest center x strictly
/// below the reference's.
pub fn left_of(objects: &[SceneObject], reference: usize) -> Option<usize> {
    let rx = objects[reference].x;
    (0..objects.len()).filter(|&i| objects[i].x < rx).max_by(|&a, &b| objects[a].x.total_cmp(&objects[b].x))
}

fn scene_question(kind: TaskKind, color: usize) -> Vec<usize> {
    let c = SCENE_WORDS + color;
    match kind {
        TaskKind::AttributeQuery => vec![WHAT, SHAPE, IS, THE, c, OBJECT],
        _ => vec![WHAT, SHAPE, IS, THE, OBJECT, LEFT, OF, THE, c, OBJECT],
    }
}

/// Renders scene question tokens, naming colors `color3` and so on.
pub fn scene_question_text(tokens: &[usize]) -> String {
    const WORDS: [&str; SCENE_WORDS] = ["what", "shape", "is", "the", "left", "of", "object"];
    let words: Vec<String> = tokens
        .iter()
        .map(|&t| WORDS.get(t).map_or_else(|| format!("color{}", t - SCENE_WORDS), |w| w.to_string()))
        .collect();
    format!("{}?", words.join(" "))
}

pub fn gen_scene_task(spec: &SceneSpec) -> Result<SceneTask> {
    spec.validate()?;
    let (mut rng, mut proto_rng) = streams(spec.seed);
    let half = spec.d_app / 2;
    let colors = prototypes(spec.colors, half, &mut proto_rng);
    let shapes = prototypes(spec.shapes, half, &mut proto_rng);
    let labels = stratified(spec.n_samples, spec.shapes, &mut rng);
    let n = spec.n_objects;
    let slot = 1.0 / n as f64;
    let samples = labels
        .into_iter()
        .enumerate()
        .map(|(id, label)| {
            let palette = sample_indices(&mut rng, spec.colors, n).into_vec();
            let mut columns: Vec<usize> = (0..n).collect();
            columns.shuffle(&mut rng);
            let mut objects: Vec<SceneObject> = (0..n)
                .map(|i| SceneObject {
                    color: palette[i],
                    shape: rng.random_range(0..spec.shapes),
                    x: (columns[i] as f64 + 0.5) * slot,
                    y: rng.random_range(0.2..0.8),
                    w: 0.6 * slot,
                    h: rng.random_range(0.1..0.3),
                })
                .collect();
            let (reference, target) = match spec.kind {
                TaskKind::AttributeQuery => {
                    let r = rng.random_range(0..n);
                    (r, r)
                }
                _ => {
                    let col = rng.random_range(1..n);
                    let r = columns.iter().position(|&c| c == col).expect("column taken");
                    (r, left_of(&objects, r).expect("reference is not leftmost"))
                }
            };
            objects[target].shape = label;
            SceneSample { id, question: scene_question(spec.kind, objects[reference].color), objects, label, target }
        })
        .collect();
    Ok(SceneTask { spec: spec.clone(), samples, colors, shapes })
}

impl SceneTask {
    pub fn from_samples(spec: SceneSpec, samples: Vec<SceneSample>) -> Result<Self> {
        spec.validate()?;
        let (_, mut proto_rng) = streams(spec.seed);
        let half = spec.d_app / 2;
        let colors = prototypes(spec.colors, half, &mut proto_rng);
        let shapes = prototypes(spec.shapes, half, &mut proto_rng);
        for s in &samples {
            if s.objects.len() != spec.n_objects
                || s.objects.iter().any(|o| o.color >= spec.colors || o.shape >= spec.shapes)
            {
                return Err(Error::Format(format!("sample {} does not match the task header", s.id)));
            }
        }
        Ok(SceneTask { spec, samples, colors, shapes })
    }

    pub fn appearance(&self, o: &SceneObject) -> Vec<f64> {
        self.colors[o.color].iter().chain(&self.shapes[o.shape]).copied().collect()
    }

    pub fn batch(&self, ids: &[usize]) -> Result<SceneBatch> {
        let (b, n) = (ids.len(), self.spec.n_objects);
        if b == 0 {
            return Err(Error::invalid("empty batch"));
        }
        let mut app = Vec::with_capacity(b * n * self.spec.d_app);
        let mut boxes = Vec::with_capacity(b * n * BOX_DIM);
        let mut tokens = Vec::new();
        let mut labels = Vec::with_capacity(b);
        let mut targets = vec![0.0; b * n];
        for (row, &i) in ids.iter().enumerate() {
            let s = self.samples.get(i).ok_or_else(|| Error::invalid(format!("sample {i} out of range")))?;
            for o in &s.objects {
                app.extend(self.appearance(o));
                boxes.extend(o.box_features());
            }
            tokens.extend(&s.question);
            labels.push(s.label);
            targets[row * n + s.target] = 1.0;
        }
        Ok(SceneBatch {
            appearance: Tensor::new(vec![b, n, self.spec.d_app], app)?,
            boxes: Tensor::new(vec![b, n, BOX_DIM], boxes)?,
            tokens,
            labels,
            targets: Tensor::new(vec![b, n], targets)?,
        })
    }

    /// Recomputes a label from appearance and box features alone.
    pub fn recompute_label(&self, appearance: &[f64], boxes: &[f64], question: &[usize]) -> Option<usize> {
        let half = self.spec.d_app / 2;
        let decoded: Vec<SceneObject> = appearance
            .chunks(self.spec.d_app)
            .zip(boxes.chunks(BOX_DIM))
            .map(|(a, bx)| SceneObject {
                color: nearest(&self.colors, &a[..half]),
                shape: nearest(&self.shapes, &a[half..]),
                x: (bx[0] + bx[2]) / 2.0,
                y: (bx[1] + bx[3]) / 2.0,
                w: bx[4],
                h: bx[5],
            })
            .collect();
        let color = question[question.len() - 2] - SCENE_WORDS;
        let reference = decoded.iter().position(|o| o.color == color)?;
        let target = match self.spec.kind {
            TaskKind::AttributeQuery => reference,
            _ => left_of(&decoded, reference)?,
        };
        Some(decoded[target].shape)
    }
}

/// Constituency tree for a scene question template.
pub fn scene_tree(kind: TaskKind) -> Result<ParseTree> {
    let tag = |v: &[&str]| v.iter().map(|s| s.to_string()).collect::<Vec<_>>();
    match kind {
        // what shape is the <c> object
        // 6 WHNP(0 1), 7 NP(3 4 5), 8 VP(2 7), 9 S(6 8)
        TaskKind::AttributeQuery => ParseTree::new(
            vec![Some(6), Some(6), Some(8), Some(7), Some(7), Some(7), Some(9), Some(8), Some(9), None],
            tag(&["W", "W", "W", "W", "W", "W", "WHNP", "NP", "VP", "S"]),
            vec![false, false, false, false, false, false, true, true, false, false],
        ),
        // what shape is the object left of the <c> object
        // 10 WHNP(0 1), 11 NP(3 4), 12 NP(7 8 9), 13 PP(6 12), 14 ADVP(5 13),
        // 15 NP(11 14), 16 VP(2 15), 17 S(10 16)
        TaskKind::RelationQuery => ParseTree::new(
            vec![
                Some(10),
                Some(10),
                Some(16),
                Some(11),
                Some(11),
                Some(14),
                Some(13),
                Some(12),
                Some(12),
                Some(12),
                Some(17),
                Some(15),
                Some(13),
                Some(14),
                Some(15),
                Some(16),
                Some(17),
                None,
            ],
            tag(&["W", "W", "W", "W", "W", "W", "W", "W", "W", "W", "WHNP", "NP", "NP", "PP", "ADVP", "NP", "VP", "S"]),
            vec![
                false, false, false, false, false, false, false, false, false, false, true, true, true, false, false,
                true, false, false,
            ],
        ),
        other => Err(Error::invalid(format!("{other:?} has no scene template"))),
    }
}

/// Template trees plus oracle priors concentrated on the answer object.
pub fn gen_grounding_fixture(task: &SceneTask) -> Result<Vec<GroundingRecord>> {
    let tree = scene_tree(task.spec.kind)?;
    let res = tree.referring_expressions();
    let (s, n) = (tree.num_words(), task.spec.n_objects);
    let content = |w: usize| !matches!(w, WHAT | IS | THE | OF);
    task.samples
        .iter()
        .map(|sample| {
            let word_scores: Vec<Vec<f64>> = res
                .iter()
                .map(|&r| {
                    let span = tree.spans()[r].clone();
                    let weights: Vec<f64> =
                        span.clone().map(|i| if content(sample.question[i]) { 1.0 } else { 0.25 }).collect();
                    let z: f64 = weights.iter().sum();
                    let mut v = vec![0.0; s];
                    for (i, w) in span.zip(weights) {
                        v[i] = w / z;
                    }
                    v
                })
                .collect();
            let off = if n > 1 { 0.04 / (n - 1) as f64 } else { 0.0 };
            let region: Vec<f64> =
                (0..n).map(|j| if j == sample.target { 1.0 - off * (n - 1) as f64 } else { off }).collect();
            let region_scores = vec![region; res.len()];
            let record = GroundingRecord {
                id: sample.id,
                tokens: sample.question.clone(),
                tree: tree.clone(),
                word_prior: pool_priors(&word_scores)?.distribution,
                region_prior: pool_priors(&region_scores)?.distribution,
            };
            record.validate()?;
            Ok(record)
        })
        .collect()
}

/// Disjoint train and validation ids; the last `n_val` samples validate.
pub fn split_ids(n: usize, n_val: usize) -> Result<(Vec<usize>, Vec<usize>)> {
    if n_val >= n {
        return Err(Error::invalid(format!("validation size {n_val} leaves no training data out of {n}")));
    }
    Ok(((0..n - n_val).collect(), (n - n_val..n).collect()))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum TaskSpec {
    Sequence(SequenceSpec),
    Scene(SceneSpec),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    format: String,
    version: u32,
    samples: usize,
    spec: TaskSpec,
}

pub enum Dataset {
    Sequence(SequenceTask),
    Scene(SceneTask),
}

fn write_lines<T: Serialize>(out: &mut impl Write, header: &Header, rows: &[T]) -> Result<()> {
    serde_json::to_writer(&mut *out, header)?;
    out.write_all(b"\n")?;
    for r in rows {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

impl Dataset {
    pub fn generate(spec: &TaskSpec) -> Result<Self> {
        Ok(match spec {
            TaskSpec::Sequence(s) => Dataset::Sequence(gen_sequence_task(s)?),
            TaskSpec::Scene(s) => Dataset::Scene(gen_scene_task(s)?),
        })
    }

    pub fn len(&self) -> usize {
        match self {
            Dataset::Sequence(t) => t.samples.len(),
            Dataset::Scene(t) => t.samples.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Header line followed by one JSON object per sample.
    pub fn write_jsonl(&self, out: &mut impl Write) -> Result<()> {
        match self {
            Dataset::Sequence(t) => {
                let h = Header {
                    format: FORMAT.into(),
                    version: VERSION,
                    samples: t.samples.len(),
                    spec: TaskSpec::Sequence(t.spec.clone()),
                };
                write_lines(out, &h, &t.samples)
            }
            Dataset::Scene(t) => {
                let h = Header {
                    format: FORMAT.into(),
                    version: VERSION,
                    samples: t.samples.len(),
                    spec: TaskSpec::Scene(t.spec.clone()),
                };
                write_lines(out, &h, &t.samples)
            }
        }
    }

    pub fn read_jsonl(input: impl BufRead) -> Result<Self> {
        let mut lines = input.lines();
        let first = lines.next().ok_or_else(|| Error::Format("empty dataset file".into()))??;
        let header: Header = serde_json::from_str(&first).map_err(|e| Error::Format(format!("header: {e}")))?;
        if header.format != FORMAT || header.version != VERSION {
            return Err(Error::Format(format!("unsupported dataset format {} v{}", header.format, header.version)));
        }
        let body: Vec<String> = lines.collect::<std::io::Result<_>>()?;
        let body: Vec<&String> = body.iter().filter(|l| !l.trim().is_empty()).collect();
        if body.len() != header.samples {
            return Err(Error::Format(format!("header announces {} samples, file has {}", header.samples, body.len())));
        }
        let parse = |i: usize, l: &str| Error::Format(format!("sample line {}: {l}", i + 2));
        Ok(match header.spec {
            TaskSpec::Sequence(spec) => {
                let samples = body
                    .iter()
                    .enumerate()
                    .map(|(i, l)| serde_json::from_str(l).map_err(|e| parse(i, &e.to_string())))
                    .collect::<Result<_>>()?;
                Dataset::Sequence(SequenceTask::from_samples(spec, samples)?)
            }
            TaskSpec::Scene(spec) => {
                let samples = body
                    .iter()
                    .enumerate()
                    .map(|(i, l)| serde_json::from_str(l).map_err(|e| parse(i, &e.to_string())))
                    .collect::<Result<_>>()?;
                Dataset::Scene(SceneTask::from_samples(spec, samples)?)
            }
        })
    }
}

pub fn write_fixture_jsonl(records: &[GroundingRecord], out: &mut impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut *out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_fixture_jsonl(input: impl BufRead) -> Result<Vec<GroundingRecord>> {
    input
        .lines()
        .filter(|l| l.as_ref().map_or(true, |l| !l.trim().is_empty()))
        .map(|l| {
            let r: GroundingRecord = serde_json::from_str(&l?).map_err(|e| Error::Format(e.to_string()))?;
            r.validate()?;
            Ok(r)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count_spec(n: usize) -> SequenceSpec {
        SequenceSpec { kind: TaskKind::CountSymbol, num_clips: 4, clip_len: 4, symbols: 5, d: 8, n_samples: n, seed: 3 }
    }

    fn scene_spec(kind: TaskKind, n_objects: usize) -> SceneSpec {
        SceneSpec { kind, n_objects, colors: 6, shapes: 4, d_app: 12, n_samples: 40, seed: 4 }
    }

    #[test]
    fn count_labels_follow_construction() {
        let task = gen_sequence_task(&count_spec(200)).unwrap();
        for s in &task.samples {
            let target = s.question[2] - SEQ_WORDS;
            assert_eq!(s.frames.iter().filter(|&&f| f == target).count(), s.label);
            assert_eq!(task.recompute_label(&task.features(s), &s.question), s.label);
        }
        assert!(task.samples.iter().any(|s| s.label == 0));
    }

    #[test]
    fn transition_labels_follow_construction() {
        let spec = SequenceSpec { kind: TaskKind::TransitionOrder, ..count_spec(100) };
        let task = gen_sequence_task(&spec).unwrap();
        for s in &task.samples {
            assert_eq!(task.recompute_label(&task.features(s), &s.question), s.label);
        }
        assert_eq!(task.samples.iter().filter(|s| s.label == 1).count(), 50);
    }

    #[test]
    fn infeasible_counts_rejected() {
        let spec = SequenceSpec { num_clips: 3, clip_len: 3, ..count_spec(5) };
        assert!(gen_sequence_task(&spec).is_err());
    }

    #[test]
    fn batch_motion_is_clip_mean() {
        let task = gen_sequence_task(&count_spec(4)).unwrap();
        let b = task.batch(&[0, 1]).unwrap();
        assert_eq!(b.frames.shape(), &[2, 4, 4, 8]);
        let m: f64 = (0..4).map(|t| b.frames.at(&[1, 2, t, 5])).sum::<f64>() / 4.0;
        assert!((b.motion.at(&[1, 2, 5]) - m).abs() < 1e-15);
    }

    #[test]
    fn single_object_attribute() {
        let task = gen_scene_task(&scene_spec(TaskKind::AttributeQuery, 1)).unwrap();
        for s in &task.samples {
            assert_eq!(s.label, s.objects[0].shape);
        }
    }

    #[test]
    fn left_of_two_boxes() {
        let o = |x| SceneObject { color: 0, shape: 0, x, y: 0.5, w: 0.1, h: 0.1 };
        let objs = [o(0.9), o(0.1)];
        assert_eq!(left_of(&objs, 0), Some(1));
        assert_eq!(left_of(&objs, 1), None);
    }

    #[test]
    fn relation_labels_survive_object_reordering() {
        let task = gen_scene_task(&scene_spec(TaskKind::RelationQuery, 6)).unwrap();
        let mut rng = crate::rng(9);
        for s in &task.samples {
            let mut objects = s.objects.clone();
            objects.shuffle(&mut rng);
            let app: Vec<f64> = objects.iter().flat_map(|o| task.appearance(o)).collect();
            let boxes: Vec<f64> = objects.iter().flat_map(|o| o.box_features()).collect();
            assert_eq!(task.recompute_label(&app, &boxes, &s.question), Some(s.label));
        }
    }

    #[test]
    fn fixture_priors_focus_on_target() {
        for kind in [TaskKind::AttributeQuery, TaskKind::RelationQuery] {
            let task = gen_scene_task(&scene_spec(kind, 6)).unwrap();
            let fx = gen_grounding_fixture(&task).unwrap();
            for (r, s) in fx.iter().zip(&task.samples) {
                assert!(r.region_prior[s.target] > 0.9);
                assert_eq!(r.tree.num_words(), r.tokens.len());
            }
        }
    }

    #[test]
    fn jsonl_round_trip() {
        let ds = Dataset::generate(&TaskSpec::Sequence(count_spec(7))).unwrap();
        let mut bytes = Vec::new();
        ds.write_jsonl(&mut bytes).unwrap();
        let back = Dataset::read_jsonl(bytes.as_slice()).unwrap();
        let mut again = Vec::new();
        back.write_jsonl(&mut again).unwrap();
        assert_eq!(bytes, again);
        let truncated: Vec<u8> = bytes.split(|&b| b == b'\n').take(3).collect::<Vec<_>>().join(&b'\n');
        assert!(Dataset::read_jsonl(truncated.as_slice()).is_err());
    }
}
