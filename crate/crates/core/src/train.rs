//! Run configuration and the training loop shared by every task.

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::decoders::{argmax_rows, nll_loss};
use crate::error::{Error, Result};
use crate::gap::{combined_loss, kl_attention_loss, prior_tensors, GapWeights, GroundingRecord};
use crate::lognet::{LogConfig, LogNet};
use crate::models::{HcrnConfig, HcrnModel};
use crate::optim::{Adam, AdamConfig};
use crate::params::{ParamStore, Scope};
use crate::synth::{gen_grounding_fixture, split_ids, Dataset, TaskSpec};

fn default_rank() -> Option<usize> {
    None
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LogModelConfig {
    pub d: usize,
    pub steps: usize,
    pub heads: usize,
    pub gcn_layers: usize,
    #[serde(default = "default_rank")]
    pub rank: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "snake_case")]
pub enum ModelConfig {
    Hcrn(HcrnConfig),
    Lognet(LogModelConfig),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub data: TaskSpec,
    pub model: ModelConfig,
    pub optim: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Samples held out for validation (the tail of the dataset).
    pub n_val: usize,
    /// Attention-prior regularization; scene tasks with LOGNet only.
    #[serde(default)]
    pub gap: Option<GapWeights>,
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |path: &str, message: &str| Err(Error::Config { path: path.into(), message: message.into() });
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive");
        }
        match (&self.model, &self.data) {
            (ModelConfig::Hcrn(_), TaskSpec::Sequence(_)) | (ModelConfig::Lognet(_), TaskSpec::Scene(_)) => {}
            (ModelConfig::Hcrn(_), _) => return bad("model.arch", "hcrn needs a sequence task"),
            (ModelConfig::Lognet(_), _) => return bad("model.arch", "lognet needs a scene task"),
        }
        if self.gap.is_some() && !matches!(self.model, ModelConfig::Lognet(_)) {
            return bad("gap", "attention priors are only wired for lognet");
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
pub enum Model {
    Hcrn(HcrnModel),
    Log(LogNet),
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub samples: usize,
    pub loss: f64,
    pub accuracy: f64,
    /// Mean squared error of raw count predictions.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse: Option<f64>,
    /// `KL(β* || β)` against the region priors.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_vis: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_ling: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val: EvalMetrics,
}

pub struct Trainer {
    pub cfg: RunConfig,
    pub store: ParamStore,
    pub model: Model,
    pub data: Dataset,
    pub train_ids: Vec<usize>,
    pub val_ids: Vec<usize>,
    fixture: Option<Vec<GroundingRecord>>,
    adam: Adam,
    pub epoch: usize,
}

struct BatchResult<'t> {
    loss: Var<'t>,
    task_loss: f64,
    predictions: Vec<usize>,
    labels: Vec<usize>,
    sq_err: Option<f64>,
    kl_vis: Option<f64>,
    kl_ling: Option<f64>,
}

fn eval_rng() -> ChaCha8Rng {
    let mut r = crate::rng(0);
    r.set_stream(u64::MAX);
    r
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        let data = Dataset::generate(&cfg.data)?;
        Self::with_data(cfg, data)
    }

    pub fn with_data(cfg: RunConfig, data: Dataset) -> Result<Self> {
        cfg.validate()?;
        let (train_ids, val_ids) = split_ids(data.len(), cfg.n_val)?;
        let mut store = ParamStore::new();
        let mut rng = crate::rng(cfg.seed);
        let model = {
            let mut scope = Scope::new(&mut store, "");
            match (&cfg.model, &data) {
                (ModelConfig::Hcrn(m), Dataset::Sequence(t)) => {
                    Model::Hcrn(HcrnModel::new(&mut scope, "hcrn", m, &t.spec, &mut rng)?)
                }
                (ModelConfig::Lognet(m), Dataset::Scene(t)) => {
                    let lc = LogConfig {
                        d: m.d,
                        d_app: t.spec.d_app,
                        vocab: t.spec.question_vocab(),
                        steps: m.steps,
                        heads: m.heads,
                        gcn_layers: m.gcn_layers,
                        rank: m.rank,
                        num_answers: t.spec.shapes,
                    };
                    Model::Log(LogNet::new(&mut scope, "lognet", &lc, &mut rng)?)
                }
                _ => {
                    return Err(Error::Config {
                        path: "data".into(),
                        message: "dataset does not match the model".into(),
                    })
                }
            }
        };
        let fixture = match &data {
            Dataset::Scene(t) => Some(gen_grounding_fixture(t)?),
            Dataset::Sequence(_) => None,
        };
        let adam = Adam::new(cfg.optim, &store)?;
        Ok(Trainer { cfg, store, model, data, train_ids, val_ids, fixture, adam, epoch: 0 })
    }

    fn run_batch<'t>(&self, g: &'t Graph<'_>, ids: &[usize], rng: &mut ChaCha8Rng) -> Result<BatchResult<'t>> {
        match (&self.model, &self.data) {
            (Model::Hcrn(m), Dataset::Sequence(t)) => {
                let batch = t.batch(ids)?;
                let out = m.forward(g, &batch, rng)?;
                let loss = m.loss(g, out, &batch.labels)?;
                let sq_err = m
                    .is_count()
                    .then(|| out.value().data().iter().zip(&batch.labels).map(|(r, &l)| (r - l as f64).powi(2)).sum());
                Ok(BatchResult {
                    task_loss: loss.item()?,
                    loss,
                    predictions: m.predict(out),
                    labels: batch.labels,
                    sq_err,
                    kl_vis: None,
                    kl_ling: None,
                })
            }
            (Model::Log(m), Dataset::Scene(t)) => {
                let batch = t.batch(ids)?;
                let out = m.forward(g, g.constant(batch.appearance)?, g.constant(batch.boxes)?, &batch.tokens)?;
                let task = nll_loss(g, out.logits, &batch.labels)?;
                let fixture = self.fixture.as_ref().expect("scene tasks carry priors");
                let records: Vec<&GroundingRecord> = ids.iter().map(|&i| &fixture[i]).collect();
                let (word_prior, region_prior) = prior_tensors(&records)?;
                let vis = kl_attention_loss(g, out.mean_object_attention()?, &region_prior)?;
                let ling = kl_attention_loss(g, out.mean_word_attention()?, &word_prior)?;
                let weights = self.cfg.gap.unwrap_or(GapWeights { lambda_ling: 0.0, lambda_vis: 0.0 });
                let loss = combined_loss(g, task, Some(ling), Some(vis), weights)?;
                Ok(BatchResult {
                    loss,
                    task_loss: task.item()?,
                    predictions: argmax_rows(&out.logits.value()),
                    labels: batch.labels,
                    sq_err: None,
                    kl_vis: Some(vis.item()?),
                    kl_ling: Some(ling.item()?),
                })
            }
            _ => unreachable!("model and dataset are matched at construction"),
        }
    }

    /// One pass over the training split; validation follows.
    pub fn train_epoch(&mut self) -> Result<EpochMetrics> {
        let lr = self.cfg.optim.lr_at(self.epoch);
        let mut rng = crate::rng(self.cfg.seed);
        rng.set_stream(1 + self.epoch as u64);
        let mut order = self.train_ids.clone();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut seen) = (0.0, 0usize, 0usize);
        for chunk in order.chunks(self.cfg.batch_size) {
            let (grads, updates, res_loss, res_correct) = {
                let g = Graph::training(&self.store);
                let res = self.run_batch(&g, chunk, &mut rng)?;
                let grads = g.backward(res.loss)?;
                let ok = res.predictions.iter().zip(&res.labels).filter(|(p, l)| p == l).count();
                (grads, g.take_buffer_updates(), res.task_loss, ok)
            };
            self.adam.step(&mut self.store, &grads, lr)?;
            for (id, value) in updates {
                *self.store.get_mut(id) = value;
            }
            loss_sum += res_loss * chunk.len() as f64;
            correct += res_correct;
            seen += chunk.len();
        }
        self.epoch += 1;
        let val = self.evaluate(&self.val_ids)?;
        Ok(EpochMetrics {
            epoch: self.epoch - 1,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            val,
        })
    }

    /// Metrics over `ids` in evaluation mode with a fixed sampling stream.
    pub fn evaluate(&self, ids: &[usize]) -> Result<EvalMetrics> {
        if ids.is_empty() {
            return Ok(EvalMetrics::default());
        }
        let mut rng = eval_rng();
        let mut m = EvalMetrics { samples: ids.len(), ..Default::default() };
        let (mut correct, mut sq, mut kv, mut kl) = (0usize, None::<f64>, None::<f64>, None::<f64>);
        for chunk in ids.chunks(self.cfg.batch_size) {
            let g = Graph::new(&self.store);
            let res = self.run_batch(&g, chunk, &mut rng)?;
            let w = chunk.len() as f64;
            m.loss += res.task_loss * w;
            correct += res.predictions.iter().zip(&res.labels).filter(|(p, l)| p == l).count();
            if let Some(e) = res.sq_err {
                *sq.get_or_insert(0.0) += e;
            }
            if let Some(v) = res.kl_vis {
                *kv.get_or_insert(0.0) += v * w;
            }
            if let Some(v) = res.kl_ling {
                *kl.get_or_insert(0.0) += v * w;
            }
        }
        let n = ids.len() as f64;
        m.loss /= n;
        m.accuracy = correct as f64 / n;
        m.mse = sq.map(|s| s / n);
        m.kl_vis = kv.map(|s| s / n);
        m.kl_ling = kl.map(|s| s / n);
        Ok(m)
    }

    /// Trains for the configured number of epochs, reporting each one.
    pub fn fit(&mut self, mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>) -> Result<Vec<EpochMetrics>> {
        let mut out = Vec::new();
        while self.epoch < self.cfg.epochs {
            let m = self.train_epoch()?;
            on_epoch(&m)?;
            out.push(m);
        }
        Ok(out)
    }
}
