//! JSON-returning entry points for the static demo page in `www/`.
//!
//! Each export has a plain Rust twin returning `serde_json::Value` so the
//! logic is testable off the browser.

use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

use relnet::bench::{predict_costs, unit_cost_total, StreamShape};
use relnet::crn::{binomial, sample_subsets, Conditioning, CrnConfig};
use relnet::hcrn::{Hierarchy, VisualConfig};
use relnet::lognet::{LogConfig, LogNet};
use relnet::synth::{gen_scene_task, scene_question_text, SceneSpec, TaskKind};
use relnet::{Graph, ParamStore, Scope};

/// Largest clip count the curve plot walks to.
const MAX_CLIPS: u32 = 256;

fn to_js(v: relnet::Result<Value>) -> Result<String, JsError> {
    v.map(|v| v.to_string()).map_err(|e| JsError::new(&e.to_string()))
}

/// Printed 2-level and best 3-level costs for `N = 4..=n_max` clips of
/// `clip_len` frames, plus the per-unit tally where the stream is buildable.
pub fn cost_curves_value(clip_len: u32, f: u32, n_max: u32) -> relnet::Result<Value> {
    if clip_len == 0 || f == 0 || !(4..=MAX_CLIPS).contains(&n_max) {
        return Err(relnet::Error::InvalidArgument(format!(
            "need clip_len, F > 0 and 4 <= N <= {MAX_CLIPS}, got T={clip_len}, F={f}, N={n_max}"
        )));
    }
    let (t, f64_) = (clip_len as u64, f as u64);
    let unit = |n: usize, hierarchy: Hierarchy| -> Option<u64> {
        let cfg = VisualConfig { hierarchy, ..VisualConfig::short_form(n, clip_len as usize, f as usize) };
        unit_cost_total(&cfg, f as usize).ok()
    };
    let mut rows = Vec::new();
    for n in 4..=n_max as u64 {
        let l = n * t;
        let two = predict_costs(StreamShape::Two { l, n, t }, f64_)?;
        let best = (2..n)
            .filter(|p| n % p == 0 && n / p >= 2)
            .map(|p| (p, predict_costs(StreamShape::Three { l, n, p, q: n / p, t }, f64_)))
            .filter_map(|(p, c)| c.ok().map(|c| (p, c)))
            .min_by_key(|(_, c)| c.total());
        let three = best.map(|(p, c)| {
            json!({
                "p": p, "q": n / p, "g": c.g_term, "h": c.h_term, "total": c.total(),
                "unit": unit(n as usize, Hierarchy::Three { n1: p as usize, n2: (n / p) as usize }),
            })
        });
        rows.push(json!({
            "n": n,
            "two": {"g": two.g_term, "h": two.h_term, "total": two.total(), "unit": unit(n as usize, Hierarchy::Two)},
            "three": three,
        }));
    }
    Ok(json!({"clip_len": clip_len, "f": f, "rows": rows}))
}

/// Tuple sizes a unit visits for `n` objects and the subsets drawn for each.
pub fn subset_sampling_value(n: u32, k_max: u32, t: u32, seed: u64) -> relnet::Result<Value> {
    if n > 16 || t == 0 || t > 64 {
        return Err(relnet::Error::InvalidArgument("keep n <= 16 and 1 <= t <= 64 for display".into()));
    }
    let cfg = CrnConfig {
        k_max: (k_max > 0).then_some(k_max as usize),
        t: t as usize,
        ..CrnConfig::new(1, Conditioning::Identity)
    };
    let mut rng = relnet::rng(seed);
    let mut sizes = Vec::new();
    for k in cfg.tuple_sizes(n as usize)? {
        let subsets = if n == 2 { vec![vec![0, 1]] } else { sample_subsets(n as usize, k, cfg.t, &mut rng)? };
        sizes.push(json!({"k": k, "available": binomial(n as usize, k) as u64, "subsets": subsets}));
    }
    let outputs = sizes.len();
    Ok(json!({"n": n, "t": t, "outputs": outputs, "sizes": sizes}))
}

/// One relation-query scene through a freshly initialized LOG network:
/// per-step adjacency matrices and node attention for the first sample.
pub fn log_adjacency_value(n_objects: u32, steps: u32, seed: u64) -> relnet::Result<Value> {
    if !(2..=12).contains(&n_objects) || !(1..=8).contains(&steps) {
        return Err(relnet::Error::InvalidArgument("use 2-12 objects and 1-8 steps".into()));
    }
    let n = n_objects as usize;
    let spec = SceneSpec {
        kind: TaskKind::RelationQuery,
        n_objects: n,
        colors: n + 2,
        shapes: 4,
        d_app: 8,
        n_samples: 1,
        seed,
    };
    let task = gen_scene_task(&spec)?;
    let cfg = LogConfig {
        d: 16,
        d_app: spec.d_app,
        vocab: spec.question_vocab(),
        steps: steps as usize,
        heads: 2,
        gcn_layers: 2,
        rank: None,
        num_answers: spec.shapes,
    };
    let mut store = ParamStore::new();
    let net = LogNet::new(&mut Scope::new(&mut store, ""), "log", &cfg, &mut relnet::rng(seed))?;
    let batch = task.batch(&[0])?;
    let g = Graph::new(&store);
    let out = net.forward(&g, g.constant(batch.appearance)?, g.constant(batch.boxes)?, &batch.tokens)?;
    let rows = |t: &relnet::Tensor| -> Vec<Vec<f64>> { t.data().chunks(n).map(<[f64]>::to_vec).collect() };
    let trace: Vec<Value> = out
        .trace
        .iter()
        .map(|s| json!({"adjacency": rows(&s.graph.adjacency.value()), "delta": s.delta.value().data()}))
        .collect();
    let sample = &task.samples[0];
    Ok(json!({
        "question": scene_question_text(&sample.question),
        "objects": sample.objects,
        "target": sample.target,
        "rank": cfg.rank(),
        "steps": trace,
    }))
}

#[wasm_bindgen]
pub fn cost_curves(clip_len: u32, f: u32, n_max: u32) -> Result<String, JsError> {
    to_js(cost_curves_value(clip_len, f, n_max))
}

#[wasm_bindgen]
pub fn subset_sampling(n: u32, k_max: u32, t: u32, seed: u64) -> Result<String, JsError> {
    to_js(subset_sampling_value(n, k_max, t, seed))
}

#[wasm_bindgen]
pub fn log_adjacency(n_objects: u32, steps: u32, seed: u64) -> Result<String, JsError> {
    to_js(log_adjacency_value(n_objects, steps, seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn curves_cover_every_clip_count() {
        let v = cost_curves_value(8, 32, 24).unwrap();
        let rows = v["rows"].as_array().unwrap();
        assert_eq!(rows.len(), 21);
        // N = 5 is prime: no 3-level grouping
        assert!(rows[1]["three"].is_null());
        let r24 = &rows[20];
        assert_eq!(r24["two"]["g"], 2 * (8 + 24) * 24 * 8 * 32);
        assert!(cost_curves_value(8, 32, 3).is_err());
    }

    #[test]
    fn sampling_reports_one_entry_per_tuple_size() {
        let v = subset_sampling_value(6, 0, 3, 1).unwrap();
        assert_eq!(v["outputs"], 4);
        let k2 = &v["sizes"][0];
        assert_eq!(k2["available"], 15);
        assert_eq!(k2["subsets"].as_array().unwrap().len(), 3);
        assert!(subset_sampling_value(6, 6, 3, 1).is_err());
    }

    #[test]
    fn adjacency_is_square_and_symmetric() {
        let v = log_adjacency_value(5, 3, 2).unwrap();
        let steps = v["steps"].as_array().unwrap();
        assert_eq!(steps.len(), 3);
        for s in steps {
            let a: Vec<Vec<f64>> = serde_json::from_value(s["adjacency"].clone()).unwrap();
            assert_eq!(a.len(), 5);
            for (i, row) in a.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    assert!((v - a[j][i]).abs() < 1e-12);
                }
            }
        }
    }
}
