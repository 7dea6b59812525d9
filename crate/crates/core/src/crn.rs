//! Conditional relation network unit.
//!
//! An input array of `n` objects is held as one tensor `[B, n, d]` (vector
//! members) or `[B, n, H, d]` (matrix members). For every tuple size `k` the
//! unit samples `t` ordered subsets, joins each subset with `g^k`, modulates it
//! with the conditioning feature through `h^k`, and averages the `t` results
//! into `r^k`. All `t` subsets of one size are processed as a single batch.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::{BiLstm, Linear};
use crate::params::Scope;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Conditioning {
    Additive,
    Multiplicative,
    SequentialAdditive,
    SequentialMultiplicative,
    Dual,
    /// `h(x, c) = x`; no parameters. Useful for checking the sampling and
    /// pooling machinery in isolation.
    Identity,
}

impl Conditioning {
    pub fn is_sequential(self) -> bool {
        matches!(self, Conditioning::SequentialAdditive | Conditioning::SequentialMultiplicative)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GMode {
    #[default]
    Average,
    Concat,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sampling {
    #[default]
    Random,
    /// Every size-k subset, ignoring `t`.
    Exhaustive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrnConfig {
    /// Largest tuple size; `None` means `n - 1`.
    #[serde(default)]
    pub k_max: Option<usize>,
    pub t: usize,
    pub conditioning: Conditioning,
    pub d: usize,
    #[serde(default)]
    pub g_mode: GMode,
    #[serde(default)]
    pub sampling: Sampling,
}

impl CrnConfig {
    pub fn new(d: usize, conditioning: Conditioning) -> Self {
        CrnConfig { k_max: None, t: 2, conditioning, d, g_mode: GMode::Average, sampling: Sampling::Random }
    }

    pub fn with_conditioning(&self, conditioning: Conditioning) -> Self {
        CrnConfig { conditioning, ..self.clone() }
    }

    /// Tuple sizes the unit visits for an `n`-object input.
    pub fn tuple_sizes(&self, n: usize) -> Result<Vec<usize>> {
        if n < 2 {
            return Err(Error::invalid(format!("a relation unit needs at least 2 objects, got {n}")));
        }
        if n == 2 {
            return Ok(vec![2]);
        }
        let k_max = self.k_max.unwrap_or(n - 1);
        if k_max < 2 || k_max >= n {
            return Err(Error::invalid(format!("k_max must satisfy 2 <= k_max < n, got k_max={k_max}, n={n}")));
        }
        Ok((2..=k_max).collect())
    }
}

/// Number of objects produced from `n` inputs.
pub fn output_len(n: usize, k_max: Option<usize>) -> usize {
    if n == 2 {
        1
    } else {
        k_max.unwrap_or(n - 1) - 1
    }
}

/// An ordered array of same-shaped objects with a leading batch axis.
#[derive(Clone, Copy)]
pub struct ObjectArray<'t> {
    data: Var<'t>,
}

impl<'t> ObjectArray<'t> {
    /// Accepts `[B, n, d]` or `[B, n, H, d]`.
    pub fn new(data: Var<'t>) -> Result<Self> {
        let r = data.shape().len();
        if r != 3 && r != 4 {
            return Err(Error::shape(
                "object_array",
                format!("expected [B, n, d] or [B, n, H, d], got {:?}", data.shape()),
            ));
        }
        Ok(ObjectArray { data })
    }

    pub fn data(&self) -> Var<'t> {
        self.data
    }

    pub fn batch(&self) -> usize {
        self.data.dim(0)
    }

    pub fn len(&self) -> usize {
        self.data.dim(1)
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn member_shape(&self) -> Vec<usize> {
        self.data.shape()[2..].to_vec()
    }

    pub fn is_vector(&self) -> bool {
        self.data.shape().len() == 3
    }

    /// Member `i` across the batch.
    pub fn get(&self, i: usize) -> Result<Var<'t>> {
        self.data.select(1, i)
    }

    /// `[B, n, H, d]` view, with `H = 1` for vector members.
    fn canonical(&self) -> Result<Var<'t>> {
        if self.is_vector() {
            self.data.unsqueeze(2)
        } else {
            Ok(self.data)
        }
    }

    /// Packs the whole array into one matrix object per sample: `[B, n*H, d]`.
    pub fn flatten_members(&self) -> Result<Var<'t>> {
        let s = self.data.shape();
        let d = *s.last().expect("rank >= 3");
        let rows = s[1..s.len() - 1].iter().product();
        self.data.reshape(&[s[0], rows, d])
    }
}

pub struct RelationOutput<'t> {
    /// `[B, k_max - 1, ...]`, one member per tuple size.
    pub objects: ObjectArray<'t>,
    /// The subsets used for each tuple size, in visiting order.
    pub subsets: Vec<Vec<Vec<usize>>>,
}

impl<'t> RelationOutput<'t> {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// `C(n, k)`, saturating at `u128::MAX`.
pub fn binomial(n: usize, k: usize) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for i in 0..k {
        // exact at every step: acc * (n - i) is divisible by (i + 1)
        acc = match acc.checked_mul((n - i) as u128) {
            Some(v) => v / (i as u128 + 1),
            None => return u128::MAX,
        };
    }
    acc
}

/// All size-`k` subsets of `0..n` in lexicographic order.
pub fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    if k == 0 || k > n {
        return out;
    }
    let mut cur: Vec<usize> = (0..k).collect();
    loop {
        out.push(cur.clone());
        let mut i = k;
        while i > 0 && cur[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return out;
        }
        cur[i - 1] += 1;
        for j in i..k {
            cur[j] = cur[j - 1] + 1;
        }
    }
}

// below this many candidates it is cheaper to enumerate than to reject
const ENUMERATE_LIMIT: u128 = 4096;

/// Draws `t` size-`k` subsets of `0..n`, each with ascending indices.
///
/// Subsets are distinct when `t <= C(n, k)`; otherwise they are drawn with
/// replacement.
pub fn sample_subsets(n: usize, k: usize, t: usize, rng: &mut impl Rng) -> Result<Vec<Vec<usize>>> {
    if k < 2 || k >= n {
        return Err(Error::invalid(format!("subset size must satisfy 2 <= k < n, got k={k}, n={n}")));
    }
    if t == 0 {
        return Err(Error::invalid("sampling frequency t must be positive"));
    }
    let total = binomial(n, k);
    if total <= ENUMERATE_LIMIT.max(4 * t as u128) {
        let all = combinations(n, k);
        if (t as u128) <= total {
            return Ok(sample(rng, all.len(), t).into_iter().map(|i| all[i].clone()).collect());
        }
        return Ok((0..t).map(|_| all[rng.random_range(0..all.len())].clone()).collect());
    }
    let mut seen = HashSet::with_capacity(t);
    let mut out = Vec::with_capacity(t);
    while out.len() < t {
        let mut s = sample(rng, n, k).into_vec();
        s.sort_unstable();
        if seen.insert(s.clone()) {
            out.push(s);
        }
    }
    Ok(out)
}

/// Joins a batch of subsets `[B, S, k, H, d]` into `[B, S, H, d]`.
pub fn relation_g<'t>(subsets: Var<'t>, mode: GMode, proj: Option<&Linear>, g: &'t Graph<'_>) -> Result<Var<'t>> {
    let s = subsets.shape();
    if s.len() != 5 {
        return Err(Error::shape("relation_g", format!("expected [B, S, k, H, d], got {s:?}")));
    }
    match mode {
        GMode::Average => subsets.mean(2),
        GMode::Concat => {
            let proj = proj.ok_or_else(|| Error::invalid("concat mode needs a projection"))?;
            let (b, n_sub, k, h, d) = (s[0], s[1], s[2], s[3], s[4]);
            let joined = subsets.transpose(2, 3)?.reshape(&[b, n_sub, h, k * d])?;
            proj.forward(g, joined)
        }
    }
}

/// The conditioning sub-network `h^k` for one tuple size.
#[derive(Clone, Debug)]
pub struct Conditioner {
    pub variant: Conditioning,
    lin: Option<Linear>,
    seq: Option<BiLstm>,
    d: usize,
}

impl Conditioner {
    pub fn new(scope: &mut Scope<'_>, name: &str, variant: Conditioning, d: usize, rng: &mut impl Rng) -> Result<Self> {
        let mut s = scope.sub(name);
        let (lin, seq) = match variant {
            Conditioning::Additive => (Some(Linear::no_bias(&mut s, "w", 2 * d, d, rng)), None),
            Conditioning::Multiplicative => (Some(Linear::no_bias(&mut s, "w", 3 * d, d, rng)), None),
            Conditioning::Dual => (Some(Linear::no_bias(&mut s, "w", 5 * d, d, rng)), None),
            Conditioning::SequentialAdditive => (None, Some(BiLstm::new(&mut s, "bilstm", 2 * d, d, rng)?)),
            Conditioning::SequentialMultiplicative => (None, Some(BiLstm::new(&mut s, "bilstm", 3 * d, d, rng)?)),
            Conditioning::Identity => (None, None),
        };
        Ok(Conditioner { variant, lin, seq, d })
    }

    /// `x: [B, S, H, d]`, `c` and `c2: [B, d]`. Returns `[B, S, H, d]`, or
    /// `[B, S, 1, d]` for the sequential variants, which pool over `H`.
    pub fn forward<'t>(&self, g: &'t Graph<'_>, x: Var<'t>, c: Var<'t>, c2: Option<Var<'t>>) -> Result<Var<'t>> {
        let xs = x.shape();
        if xs.len() != 4 || xs[3] != self.d {
            return Err(Error::shape("condition_h", format!("expected [B, S, H, {}], got {xs:?}", self.d)));
        }
        let spread = |c: Var<'t>| -> Result<Var<'t>> {
            let cs = c.shape();
            if cs != [xs[0], self.d] {
                return Err(Error::shape(
                    "condition_h",
                    format!("conditioning feature {cs:?} does not match objects {xs:?}"),
                ));
            }
            c.reshape(&[xs[0], 1, 1, self.d])?.broadcast_to(&xs)
        };
        let c1 = spread(c)?;
        if self.variant == Conditioning::Dual && c2.is_none() {
            return Err(Error::invalid("dual conditioning needs a second signal"));
        }
        let cat = |parts: &[Var<'t>]| g.concat(parts, -1);
        match self.variant {
            Conditioning::Identity => Ok(x),
            Conditioning::Additive => self.dense(g, cat(&[x, c1])?),
            Conditioning::Multiplicative => self.dense(g, cat(&[x, x.mul(c1)?, c1])?),
            Conditioning::Dual => {
                let c2 = spread(c2.expect("checked above"))?;
                self.dense(g, cat(&[x, x.mul(c1)?, x.mul(c2)?, c1, c2])?)
            }
            Conditioning::SequentialAdditive | Conditioning::SequentialMultiplicative => {
                let s = if self.variant == Conditioning::SequentialAdditive {
                    cat(&[x, c1])?
                } else {
                    cat(&[x, x.mul(c1)?, c1])?
                };
                let width = s.dim(-1);
                let seq = s.reshape(&[xs[0] * xs[1], xs[2], width])?;
                let run = self.seq.as_ref().expect("sequential variant").run(g, seq)?;
                run.states.max(1)?.reshape(&[xs[0], xs[1], 1, self.d])
            }
        }
    }

    fn dense<'t>(&self, g: &'t Graph<'_>, s: Var<'t>) -> Result<Var<'t>> {
        self.lin.as_ref().expect("dense variant").forward(g, s)?.elu()
    }
}

/// A relation unit built for a fixed input length `n`.
#[derive(Clone, Debug)]
pub struct CrnUnit {
    pub cfg: CrnConfig,
    pub n: usize,
    sizes: Vec<usize>,
    g_proj: Vec<Option<Linear>>,
    h: Vec<Conditioner>,
}

impl CrnUnit {
    pub fn new(scope: &mut Scope<'_>, name: &str, n: usize, cfg: &CrnConfig, rng: &mut impl Rng) -> Result<Self> {
        if cfg.t == 0 {
            return Err(Error::invalid("sampling frequency t must be positive"));
        }
        let sizes = cfg.tuple_sizes(n)?;
        let mut s = scope.sub(name);
        let mut g_proj = Vec::with_capacity(sizes.len());
        let mut h = Vec::with_capacity(sizes.len());
        for &k in &sizes {
            let mut sk = s.sub(&format!("k{k}"));
            g_proj.push(match cfg.g_mode {
                GMode::Average => None,
                GMode::Concat => Some(Linear::new(&mut sk, "g", k * cfg.d, cfg.d, rng)),
            });
            h.push(Conditioner::new(&mut sk, "h", cfg.conditioning, cfg.d, rng)?);
        }
        Ok(CrnUnit { cfg: cfg.clone(), n, sizes, g_proj, h })
    }

    pub fn conditioning(&self) -> Conditioning {
        self.cfg.conditioning
    }

    pub fn output_len(&self) -> usize {
        self.sizes.len()
    }

    pub fn tuple_sizes(&self) -> &[usize] {
        &self.sizes
    }

    /// Member shape of the outputs given the input member shape.
    pub fn output_member_shape(&self, member: &[usize]) -> Vec<usize> {
        if self.cfg.conditioning.is_sequential() {
            vec![self.cfg.d]
        } else {
            member.to_vec()
        }
    }

    pub fn forward<'t>(
        &self,
        g: &'t Graph<'_>,
        x: ObjectArray<'t>,
        c: Var<'t>,
        c2: Option<Var<'t>>,
        rng: &mut impl Rng,
    ) -> Result<RelationOutput<'t>> {
        if x.len() != self.n {
            return Err(Error::shape("crn", format!("unit built for {} objects, got {}", self.n, x.len())));
        }
        let member = x.member_shape();
        if member.last() != Some(&self.cfg.d) {
            return Err(Error::shape("crn", format!("member shape {member:?} does not end in d={}", self.cfg.d)));
        }
        let xc = x.canonical()?;
        let (b, hh, d) = (x.batch(), xc.dim(2), self.cfg.d);
        let mut results = Vec::with_capacity(self.sizes.len());
        let mut used = Vec::with_capacity(self.sizes.len());
        for (i, &k) in self.sizes.iter().enumerate() {
            let subsets = if self.n == 2 {
                vec![vec![0, 1]]
            } else if self.cfg.sampling == Sampling::Exhaustive {
                combinations(self.n, k)
            } else {
                sample_subsets(self.n, k, self.cfg.t, rng)?
            };
            let flat: Vec<usize> = subsets.iter().flatten().copied().collect();
            let gathered = xc.index_select(1, &flat)?.reshape(&[b, subsets.len(), k, hh, d])?;
            let joined = relation_g(gathered, self.cfg.g_mode, self.g_proj[i].as_ref(), g)?;
            let conditioned = self.h[i].forward(g, joined, c, c2)?;
            results.push(conditioned.mean(1)?);
            used.push(subsets);
        }
        // [B, k_max - 1, H', d]
        let mut stacked = g.stack(&results, 1)?;
        if x.is_vector() || self.cfg.conditioning.is_sequential() {
            stacked = stacked.squeeze(2)?;
        }
        Ok(RelationOutput { objects: ObjectArray::new(stacked)?, subsets: used })
    }
}

/// Leading-constant inference cost `(cost_g, cost_h)` of one unit.
pub fn cost_estimate(t: u64, k_max: u64, k_elems: u64, f: u64) -> (u64, u64) {
    // k_max (k_max - 1) is even, so the halving is exact
    let cost_g = t * (k_max * (k_max - 1) / 2) * k_elems * f;
    let cost_h = (4 * t + 2) * (k_max - 1) * k_elems * f * f;
    (cost_g, cost_h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use crate::tensor::Tensor;

    #[test]
    fn sampled_subsets_are_enumerable_and_ascending() {
        let mut rng = crate::rng(0);
        let all = combinations(5, 4);
        assert_eq!(all.len(), 5);
        let got = sample_subsets(5, 4, 2, &mut rng).unwrap();
        assert_eq!(got.len(), 2);
        for s in &got {
            assert!(all.contains(s));
            assert!(s.windows(2).all(|w| w[0] < w[1]));
        }
        assert_ne!(got[0], got[1]);
    }

    #[test]
    fn exhausting_pairs_of_three() {
        let mut rng = crate::rng(3);
        let mut got = sample_subsets(3, 2, 3, &mut rng).unwrap();
        got.sort();
        assert_eq!(got, vec![vec![0, 1], vec![0, 2], vec![1, 2]]);
    }

    #[test]
    fn sampling_rejects_bad_arguments() {
        let mut rng = crate::rng(0);
        assert!(sample_subsets(4, 4, 1, &mut rng).is_err());
        assert!(sample_subsets(4, 2, 0, &mut rng).is_err());
        assert!(sample_subsets(4, 1, 1, &mut rng).is_err());
    }

    #[test]
    fn oversampling_repeats() {
        let mut rng = crate::rng(1);
        let got = sample_subsets(3, 2, 10, &mut rng).unwrap();
        assert_eq!(got.len(), 10);
    }

    #[test]
    fn large_sets_use_rejection_without_duplicates() {
        let mut rng = crate::rng(9);
        let got = sample_subsets(40, 20, 50, &mut rng).unwrap();
        let uniq: HashSet<_> = got.iter().cloned().collect();
        assert_eq!(uniq.len(), 50);
    }

    #[test]
    fn binomials() {
        assert_eq!(binomial(5, 2), 10);
        assert_eq!(binomial(24, 12), 2_704_156);
        assert_eq!(binomial(3, 5), 0);
        assert_eq!(combinations(6, 3).len(), 20);
    }

    #[test]
    fn costs() {
        assert_eq!(cost_estimate(2, 7, 1, 4), (168, 960));
        assert_eq!(cost_estimate(2, 2, 1, 1), (2, 10));
        let (g1, h1) = cost_estimate(3, 5, 2, 8);
        let (g2, h2) = cost_estimate(3, 5, 2, 16);
        assert_eq!((g2, h2), (2 * g1, 4 * h1));
    }

    fn objects<'t>(g: &'t Graph<'_>, shape: &[usize], seed: u64) -> Var<'t> {
        let mut rng = crate::rng(seed);
        g.constant(crate::gradcheck::random_tensor(shape, 1.0, &mut rng)).unwrap()
    }

    #[test]
    fn two_objects_give_one_output() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng(0);
        let cfg = CrnConfig::new(4, Conditioning::Multiplicative);
        let unit = CrnUnit::new(&mut Scope::new(&mut store, ""), "crn", 2, &cfg, &mut rng).unwrap();
        let g = Graph::new(&store);
        let x = ObjectArray::new(objects(&g, &[3, 2, 4], 1)).unwrap();
        let c = objects(&g, &[3, 4], 2);
        let out = unit.forward(&g, x, c, None, &mut rng).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out.subsets, vec![vec![vec![0, 1]]]);
    }

    #[test]
    fn matrix_members_keep_their_shape() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng(0);
        let cfg = CrnConfig { g_mode: GMode::Concat, ..CrnConfig::new(4, Conditioning::Additive) };
        let unit = CrnUnit::new(&mut Scope::new(&mut store, ""), "crn", 5, &cfg, &mut rng).unwrap();
        let g = Graph::new(&store);
        let x = ObjectArray::new(objects(&g, &[2, 5, 3, 4], 1)).unwrap();
        let out = unit.forward(&g, x, objects(&g, &[2, 4], 2), None, &mut rng).unwrap();
        assert_eq!(out.objects.data().shape(), vec![2, 3, 3, 4]);
    }

    #[test]
    fn sequential_pools_matrix_members() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng(0);
        let cfg = CrnConfig::new(4, Conditioning::SequentialMultiplicative);
        let unit = CrnUnit::new(&mut Scope::new(&mut store, ""), "crn", 4, &cfg, &mut rng).unwrap();
        let g = Graph::new(&store);
        let x = ObjectArray::new(objects(&g, &[2, 4, 5, 4], 1)).unwrap();
        let out = unit.forward(&g, x, objects(&g, &[2, 4], 2), None, &mut rng).unwrap();
        assert_eq!(out.objects.data().shape(), vec![2, 2, 4]);
    }

    #[test]
    fn average_g_cases() {
        let store = ParamStore::new();
        let g = Graph::new(&store);
        let v = Tensor::vector(&[1.0, -2.0, 3.0]);
        let same = g.constant(Tensor::new(vec![1, 1, 2, 1, 3], [v.data(), v.data()].concat()).unwrap()).unwrap();
        assert_eq!(relation_g(same, GMode::Average, None, &g).unwrap().value().data(), v.data());
        let neg: Vec<f64> = v.data().iter().map(|x| -x).collect();
        let opp = g.constant(Tensor::new(vec![1, 1, 2, 1, 3], [v.data(), &neg[..]].concat()).unwrap()).unwrap();
        assert!(relation_g(opp, GMode::Average, None, &g).unwrap().value().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn additive_hand_example() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng(0);
        let h = Conditioner::new(&mut Scope::new(&mut store, ""), "h", Conditioning::Additive, 1, &mut rng).unwrap();
        let w = store.find("h.w.w").unwrap();
        *store.get_mut(w) = Tensor::new(vec![2, 1], vec![1.0, 1.0]).unwrap();
        let g = Graph::new(&store);
        let x = g.constant(Tensor::new(vec![1, 1, 1, 1], vec![0.5]).unwrap()).unwrap();
        let c = g.constant(Tensor::new(vec![1, 1], vec![0.5]).unwrap()).unwrap();
        assert_eq!(h.forward(&g, x, c, None).unwrap().value().data(), &[1.0]);
    }

    #[test]
    fn dual_needs_second_signal() {
        let mut store = ParamStore::new();
        let mut rng = crate::rng(0);
        let h = Conditioner::new(&mut Scope::new(&mut store, ""), "h", Conditioning::Dual, 2, &mut rng).unwrap();
        let g = Graph::new(&store);
        let x = g.constant(Tensor::ones(&[1, 1, 1, 2])).unwrap();
        let c = g.constant(Tensor::ones(&[1, 2])).unwrap();
        assert!(h.forward(&g, x, c, None).is_err());
        assert_eq!(h.forward(&g, x, c, Some(c)).unwrap().shape(), vec![1, 1, 1, 2]);
    }

    #[test]
    fn bad_k_max_is_rejected() {
        let cfg = CrnConfig { k_max: Some(5), ..CrnConfig::new(2, Conditioning::Identity) };
        assert!(cfg.tuple_sizes(5).is_err());
        assert_eq!(cfg.tuple_sizes(6).unwrap(), vec![2, 3, 4, 5]);
        assert!(cfg.tuple_sizes(1).is_err());
    }
}
