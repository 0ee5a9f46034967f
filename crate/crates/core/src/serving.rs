//! Inference path: the per-user interest cache with the per-level
//! repetition cap, exact inner-product search and multi-interest merging.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::sync::{Arc, RwLock};

use rand::Rng;

use crate::code::{capacity, unflatten, InterestCode};
use crate::error::{Error, Result};
use crate::idmm::Dictionary;
use crate::mirm::Towers;
use crate::tensor::Tensor;

/// A cached interest and the probability it was selected with.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedInterest {
    pub code: InterestCode,
    pub prob: f64,
}

/// Greedily accepts codes in the given order while every per-level index
/// count stays at or below `epsilon`, stopping at `k` codes. The result is
/// sorted by probability, descending, lower flat index first on ties.
pub fn greedy_select(
    order: impl IntoIterator<Item = usize>,
    probs: &[f64],
    k: usize,
    epsilon: usize,
    level_sizes: &[usize],
) -> Result<Vec<CachedInterest>> {
    let mut counts: Vec<Vec<usize>> = level_sizes.iter().map(|&m| vec![0; m]).collect();
    let mut out = Vec::with_capacity(k);
    for flat in order {
        if out.len() == k {
            break;
        }
        let levels = unflatten(flat, level_sizes)?;
        if levels.iter().zip(&counts).any(|(&x, c)| c[x] >= epsilon) {
            continue;
        }
        for (&x, c) in levels.iter().zip(&mut counts) {
            c[x] += 1;
        }
        out.push(CachedInterest {
            code: InterestCode { levels, flat },
            prob: probs[flat],
        });
    }
    if out.len() < k {
        return Err(Error::Config(format!(
            "only {} of {k} interests satisfy the repetition cap {epsilon}",
            out.len()
        )));
    }
    out.sort_by(|a, b| b.prob.total_cmp(&a.prob).then(a.code.flat.cmp(&b.code.flat)));
    Ok(out)
}

/// All flat codes by descending probability, lower index first on ties.
pub fn descending_order(probs: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    idx.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]).then(a.cmp(&b)));
    idx
}

/// A weighted random permutation: repeatedly drawing from `probs` without
/// replacement (exponential-key method). Zero-probability codes come last.
pub fn sampled_order(probs: &[f64], rng: &mut impl Rng) -> Vec<usize> {
    let mut keyed: Vec<(f64, usize)> = probs
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let key = if p > 0.0 { u.ln() / p } else { f64::NEG_INFINITY };
            (key, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().map(|(_, i)| i).collect()
}

/// Per-user top-K interests. Entries are replaced whole, so concurrent
/// readers only ever see a complete, constraint-satisfying list.
#[derive(Debug)]
pub struct InterestCache {
    k: usize,
    epsilon: usize,
    level_sizes: Vec<usize>,
    entries: RwLock<BTreeMap<usize, Arc<Vec<CachedInterest>>>>,
}

impl Clone for InterestCache {
    fn clone(&self) -> Self {
        Self {
            k: self.k,
            epsilon: self.epsilon,
            level_sizes: self.level_sizes.clone(),
            entries: RwLock::new(self.read().clone()),
        }
    }
}

impl PartialEq for InterestCache {
    fn eq(&self, other: &Self) -> bool {
        self.k == other.k
            && self.epsilon == other.epsilon
            && self.level_sizes == other.level_sizes
            && *self.read() == *other.read()
    }
}

impl InterestCache {
    pub fn new(k: usize, epsilon: usize, level_sizes: &[usize]) -> Result<Self> {
        let min_m = level_sizes.iter().copied().min().unwrap_or(0);
        if k == 0 || epsilon == 0 {
            return Err(Error::Config("cache size and repetition cap must be positive".into()));
        }
        if k > epsilon * min_m || k > capacity(level_sizes) {
            return Err(Error::Config(format!(
                "K = {k} cannot be met with cap {epsilon} over sub-dictionaries {level_sizes:?}"
            )));
        }
        Ok(Self {
            k,
            epsilon,
            level_sizes: level_sizes.to_vec(),
            entries: RwLock::new(BTreeMap::new()),
        })
    }

    fn read(&self) -> std::sync::RwLockReadGuard<'_, BTreeMap<usize, Arc<Vec<CachedInterest>>>> {
        self.entries.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn epsilon(&self) -> usize {
        self.epsilon
    }

    pub fn level_sizes(&self) -> &[usize] {
        &self.level_sizes
    }

    fn check(&self, probs: &[f64]) -> Result<()> {
        if probs.len() != capacity(&self.level_sizes) {
            return Err(Error::Shape {
                op: "update_cache",
                shapes: vec![vec![probs.len()], self.level_sizes.clone()],
            });
        }
        if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
            return Err(Error::Input("interest distribution must be finite and non-negative".into()));
        }
        Ok(())
    }

    /// Caches the top of `probs` under the repetition cap.
    pub fn update(&self, user: usize, probs: &[f64]) -> Result<()> {
        self.check(probs)?;
        let picked = greedy_select(descending_order(probs), probs, self.k, self.epsilon, &self.level_sizes)?;
        self.insert(user, picked);
        Ok(())
    }

    /// Like [`update`](Self::update) but scans codes in a probability-weighted random order.
    pub fn update_sampled(&self, user: usize, probs: &[f64], rng: &mut impl Rng) -> Result<()> {
        self.check(probs)?;
        let order = sampled_order(probs, rng);
        let picked = greedy_select(order, probs, self.k, self.epsilon, &self.level_sizes)?;
        self.insert(user, picked);
        Ok(())
    }

    /// Stores an entry as given. Used for imports and probes; the caller is
    /// responsible for the repetition cap.
    pub fn insert(&self, user: usize, interests: Vec<CachedInterest>) {
        let mut w = self.entries.write().unwrap_or_else(|e| e.into_inner());
        w.insert(user, Arc::new(interests));
    }

    pub fn get(&self, user: usize) -> Option<Arc<Vec<CachedInterest>>> {
        self.read().get(&user).cloned()
    }

    pub fn len(&self) -> usize {
        self.read().len()
    }

    pub fn is_empty(&self) -> bool {
        self.read().is_empty()
    }

    pub fn clear(&self) {
        self.entries.write().unwrap_or_else(|e| e.into_inner()).clear();
    }

    pub fn snapshot(&self) -> BTreeMap<usize, Arc<Vec<CachedInterest>>> {
        self.read().clone()
    }

    /// True when every entry respects the repetition cap.
    pub fn satisfies_cap(&self) -> bool {
        self.read().values().all(|list| {
            self.level_sizes.iter().enumerate().all(|(c, &m)| {
                let mut counts = vec![0usize; m];
                list.iter().all(|ci| {
                    counts[ci.code.levels[c]] += 1;
                    counts[ci.code.levels[c]] <= self.epsilon
                })
            })
        })
    }
}

/// Frozen item tower outputs for the whole catalog; row `i` is item `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalIndex {
    vectors: Tensor,
}

impl RetrievalIndex {
    pub fn new(vectors: Tensor) -> Result<Self> {
        if vectors.shape().len() != 2 || vectors.rows() == 0 {
            return Err(Error::Input("retrieval index needs a non-empty item matrix".into()));
        }
        if !vectors.is_finite() {
            return Err(Error::Input("retrieval index vectors must be finite".into()));
        }
        Ok(Self { vectors })
    }

    pub fn from_towers(towers: &Towers) -> Result<Self> {
        Self::new(towers.all_item_vectors()?)
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.vectors.cols()
    }

    pub fn vectors(&self) -> &Tensor {
        &self.vectors
    }

    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim() {
            return Err(Error::Shape {
                op: "mips",
                shapes: vec![vec![query.len()], self.vectors.shape().to_vec()],
            });
        }
        Ok((0..self.len())
            .map(|i| self.vectors.row(i).iter().zip(query).map(|(a, b)| a * b).sum())
            .collect())
    }
}

fn by_score(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// The `n` best of `scores`, descending, lower id first on ties.
pub fn top_n_scores(scores: &[f64], n: usize) -> Vec<(usize, f64)> {
    let mut all: Vec<(usize, f64)> = scores.iter().copied().enumerate().collect();
    let n = n.min(all.len());
    if n == 0 {
        return Vec::new();
    }
    if n < all.len() {
        all.select_nth_unstable_by(n - 1, by_score);
        all.truncate(n);
    }
    all.sort_by(by_score);
    all
}

/// Exact top-`n` inner products by linear scan.
pub fn mips_topn(query: &[f64], index: &RetrievalIndex, n: usize) -> Result<Vec<(usize, f64)>> {
    Ok(top_n_scores(&index.scores(query)?, n))
}

/// Merged recommendations plus the per-interest material they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Recommendation {
    pub items: Vec<(usize, f64)>,
    /// Per-interest top-`n` lists before merging.
    pub per_interest: Vec<Vec<(usize, f64)>>,
    /// Fused user-interest vectors, one row per cached interest.
    pub fused: Tensor,
}

/// Merges per-interest rankings: the top `ceil(n / K)` of each list are
/// pooled with each item keeping its best score, and if duplicates leave
/// fewer than `n` items the rest is filled by best score over all interests.
pub fn merge(scores: &[Vec<f64>], n: usize) -> Vec<(usize, f64)> {
    let k = scores.len();
    if k == 0 || n == 0 {
        return Vec::new();
    }
    let n_items = scores[0].len();
    let per = n.div_ceil(k);
    let mut pooled: BTreeMap<usize, f64> = BTreeMap::new();
    for s in scores {
        for (i, v) in top_n_scores(s, per) {
            let e = pooled.entry(i).or_insert(v);
            if v > *e {
                *e = v;
            }
        }
    }
    let mut out: Vec<(usize, f64)> = pooled.iter().map(|(&i, &v)| (i, v)).collect();
    out.sort_by(by_score);
    out.truncate(n);
    if out.len() < n.min(n_items) {
        let best: Vec<f64> = (0..n_items)
            .map(|i| {
                if pooled.contains_key(&i) {
                    f64::NEG_INFINITY
                } else {
                    scores.iter().map(|s| s[i]).fold(f64::NEG_INFINITY, f64::max)
                }
            })
            .collect();
        let need = n.min(n_items) - out.len();
        out.extend(top_n_scores(&best, need));
    }
    out
}

/// Multi-interest retrieval for a user with cached interests and user
/// vector `user_vec`. Touches only the dictionary rows, the fusion net
/// and the index.
pub fn infer(
    user_vec: &[f64],
    interests: &[CachedInterest],
    dict: &Dictionary,
    towers: &Towers,
    index: &RetrievalIndex,
    n: usize,
) -> Result<Recommendation> {
    if interests.is_empty() {
        return Err(Error::State("user has no cached interests".into()));
    }
    let k = interests.len();
    let cd = dict.code_dim() * dict.num_levels();
    let mut codes = Vec::with_capacity(k * cd);
    let mut users = Vec::with_capacity(k * user_vec.len());
    for ci in interests {
        codes.extend(dict.code_vector(&ci.code.levels));
        users.extend_from_slice(user_vec);
    }
    let fused = towers.fuse_eval(
        &Tensor::new(vec![k, cd], codes)?,
        &Tensor::new(vec![k, user_vec.len()], users)?,
    )?;
    let scores: Vec<Vec<f64>> = (0..k).map(|r| index.scores(fused.row(r))).collect::<Result<_>>()?;
    let per_interest = scores.iter().map(|s| top_n_scores(s, n)).collect();
    Ok(Recommendation {
        items: merge(&scores, n),
        per_interest,
        fused,
    })
}
