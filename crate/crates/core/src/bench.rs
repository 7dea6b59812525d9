//! Analytic cost model and wall-clock scaling of the visual hierarchy.

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::autodiff::Graph;
use crate::crn::cost_estimate;
use crate::error::{Error, Result};
use crate::gradcheck::random_tensor;
use crate::hcrn::{Hierarchy, VisualConfig, VisualStream};
use crate::params::{ParamStore, Scope};

/// Video organisation for the printed cost expressions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "levels", rename_all = "snake_case")]
pub enum StreamShape {
    /// `L = N T`.
    Two { l: u64, n: u64, t: u64 },
    /// `L = N T` with `N = P Q`: `p` sub-videos of `q` clips.
    Three { l: u64, n: u64, p: u64, q: u64, t: u64 },
}

/// Leading-constant evaluation of the printed totals.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostPrediction {
    /// Linear-in-F term from the relational pooling functions.
    pub g_term: u64,
    /// Quadratic-in-F term from the conditioning functions.
    pub h_term: u64,
}

impl CostPrediction {
    pub fn total(&self) -> u64 {
        self.g_term + self.h_term
    }
}

pub fn predict_costs(shape: StreamShape, f: u64) -> Result<CostPrediction> {
    match shape {
        StreamShape::Two { l, n, t } => {
            if n * t != l || n == 0 || t == 0 {
                return Err(Error::invalid(format!("L = {l} is not N x T = {n} x {t}")));
            }
            Ok(CostPrediction { g_term: 2 * (t + n) * l * f, h_term: 20 * l * f * f })
        }
        StreamShape::Three { l, n, p, q, t } => {
            if n * t != l || p * q != n || p == 0 || q == 0 || t == 0 {
                return Err(Error::invalid(format!(
                    "L = {l}, N = {n} do not factor as N T and P Q with P = {p}, Q = {q}"
                )));
            }
            Ok(CostPrediction { g_term: 2 * (t + q + p) * l * f, h_term: 30 * l * f * f })
        }
    }
}

/// Change in each term going from the 2-level to the 3-level organisation:
/// `(g drop, h increase)`.
pub fn deepening_delta(l: u64, n: u64, p: u64, f: u64) -> Result<(i64, i64)> {
    if p == 0 || !n.is_multiple_of(p) {
        return Err(Error::invalid(format!("{n} clips do not split into {p} sub-videos")));
    }
    let drop = 2 * (n as i64 - (n / p) as i64 - p as i64) * (l * f) as i64;
    Ok((drop, (10 * l * f * f) as i64))
}

/// Cost of one unit type summed over its instances.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct UnitCost {
    pub stage: String,
    pub instances: u64,
    pub k_max: u64,
    pub elems: u64,
    pub g: u64,
    pub h: u64,
}

/// Per-unit costs of the stream that `cfg` actually builds, with members of
/// width `d`.
pub fn unit_costs(cfg: &VisualConfig, d: usize) -> Result<Vec<UnitCost>> {
    let mut store = ParamStore::new();
    let stream = VisualStream::new(&mut Scope::new(&mut store, ""), "probe", cfg, d, &mut crate::rng(0))?;
    let mut member_in = vec![d];
    let mut out = Vec::new();
    for stage in &stream.shape_chain().0 {
        let instances = match (stage.name.split('[').next(), cfg.hierarchy) {
            (Some("clip"), _) => cfg.num_clips,
            (Some("subvideo"), Hierarchy::Three { n1, .. }) => n1,
            _ => 1,
        } as u64;
        let elems = member_in[..member_in.len() - 1].iter().product::<usize>() as u64;
        let k_max = stage.n_out as u64 + 1;
        let (g, h) = cost_estimate(cfg.t as u64, k_max, elems, d as u64);
        out.push(UnitCost { stage: stage.name.clone(), instances, k_max, elems, g: g * instances, h: h * instances });
        member_in = stage.member.clone();
    }
    Ok(out)
}

pub fn unit_cost_total(cfg: &VisualConfig, d: usize) -> Result<u64> {
    Ok(unit_costs(cfg, d)?.iter().map(|u| u.g + u.h).sum())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BenchCase {
    pub name: String,
    pub stream: VisualConfig,
    pub d: usize,
    #[serde(default = "one")]
    pub batch: usize,
}

fn one() -> usize {
    1
}

#[derive(Clone, Debug, Serialize)]
pub struct TimingRow {
    pub name: String,
    pub num_clips: usize,
    pub clip_len: usize,
    pub d: usize,
    pub batch: usize,
    pub reps: usize,
    pub forward_s: f64,
    pub train_step_s: f64,
    pub predicted_cost: u64,
}

pub fn median(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    Some(if v.len().is_multiple_of(2) { (v[m - 1] + v[m]) / 2.0 } else { v[m] })
}

/// Smallest nonzero step the monotonic clock reports.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::from_secs(1);
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

/// Times forward and forward+backward passes of each case on one thread.
/// Model construction and input generation are outside the timed region.
pub fn measure_scaling(cases: &[BenchCase], reps: usize, warmup: usize) -> Result<Vec<TimingRow>> {
    if reps < 5 {
        return Err(Error::invalid(format!("at least 5 repetitions are needed for a median, got {reps}")));
    }
    let resolution = timer_resolution().as_secs_f64();
    let mut rows = Vec::with_capacity(cases.len());
    for case in cases {
        let mut store = ParamStore::new();
        let mut rng = crate::rng(0);
        let stream = VisualStream::new(&mut Scope::new(&mut store, ""), "bench", &case.stream, case.d, &mut rng)?;
        let cfg = &case.stream;
        let frames = random_tensor(&[case.batch, cfg.num_clips, cfg.clip_len, cfg.d_in], 1.0, &mut rng);
        let motion = random_tensor(&[case.batch, cfg.num_clips, cfg.d_in], 1.0, &mut rng);
        let q = random_tensor(&[case.batch, case.d], 1.0, &mut rng);
        let run = |backward: bool| -> Result<f64> {
            let start = Instant::now();
            let g = Graph::training(&store);
            let out = stream.forward(
                &g,
                g.constant(frames.clone())?,
                (!cfg.long_form).then(|| g.constant(motion.clone())).transpose()?,
                g.constant(q.clone())?,
                &mut crate::rng(1),
            )?;
            if backward {
                g.backward(out.sum_all()?)?;
            }
            Ok(start.elapsed().as_secs_f64())
        };
        for _ in 0..warmup {
            run(true)?;
        }
        let fwd: Vec<f64> = (0..reps).map(|_| run(false)).collect::<Result<_>>()?;
        let step: Vec<f64> = (0..reps).map(|_| run(true)).collect::<Result<_>>()?;
        let (fwd, step) = (median(&fwd).unwrap_or(0.0), median(&step).unwrap_or(0.0));
        if resolution > 0.01 * fwd {
            return Err(Error::invalid(format!(
                "case {}: timer resolution {resolution:.2e}s exceeds 1% of the {fwd:.2e}s forward pass; \
                 enlarge the batch or the number of clips",
                case.name
            )));
        }
        rows.push(TimingRow {
            name: case.name.clone(),
            num_clips: cfg.num_clips,
            clip_len: cfg.clip_len,
            d: case.d,
            batch: case.batch,
            reps,
            forward_s: fwd,
            train_step_s: step,
            predicted_cost: unit_cost_total(cfg, case.d)?,
        });
    }
    Ok(rows)
}

pub fn to_csv(rows: &[TimingRow]) -> String {
    let mut s =
        String::from("config,num_clips,clip_len,d,batch,reps,median_forward_s,median_train_step_s,predicted_cost\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{:.6e},{:.6e},{}",
            r.name, r.num_clips, r.clip_len, r.d, r.batch, r.reps, r.forward_s, r.train_step_s, r.predicted_cost
        );
    }
    s
}

/// The 2-level and 3-level cases compared by the scaling check.
pub fn default_cases(num_clips: usize, clip_len: usize, d: usize, groups: (usize, usize)) -> Vec<BenchCase> {
    let two = VisualConfig::short_form(num_clips, clip_len, d);
    let three = VisualConfig { hierarchy: Hierarchy::Three { n1: groups.0, n2: groups.1 }, ..two.clone() };
    vec![
        BenchCase { name: "2-level".into(), stream: two, d, batch: 1 },
        BenchCase { name: format!("3-level-{}x{}", groups.0, groups.1), stream: three, d, batch: 1 },
    ]
}
