//! Offline metrics and probes: Recall/HR/NDCG, alignment margin (AMR),
//! category-unseen recall (CUR), the dictionary separation verifier and
//! the sub-dictionary importance probe.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use serde::Serialize;

use crate::baseline::Baseline;
use crate::code::{capacity, InterestCode};
use crate::data::Split;
use crate::error::{Error, Result};
use crate::idmm::{sq_dist, Dictionary};
use crate::model::GemiRec;
use crate::serving::{infer, CachedInterest, RetrievalIndex};
use crate::tensor::Tensor;

fn distinct(items: &[usize]) -> BTreeSet<usize> {
    items.iter().copied().collect()
}

/// Mean Recall@N, HR@N and NDCG@N over users with a non-empty truth set,
/// or `None` when there are no such users. Only the first `n`
/// recommendations of each list count.
pub fn recall_hr_ndcg(recs: &[Vec<usize>], truth: &[Vec<usize>], n: usize) -> Option<(f64, f64, f64)> {
    let (mut recall, mut hr, mut ndcg, mut users) = (0.0, 0.0, 0.0, 0usize);
    for (r, t) in recs.iter().zip(truth) {
        let t = distinct(t);
        if t.is_empty() {
            continue;
        }
        users += 1;
        let mut hits = 0usize;
        let mut dcg = 0.0;
        for (rank, item) in r.iter().take(n).enumerate() {
            if t.contains(item) {
                hits += 1;
                dcg += 1.0 / ((rank + 2) as f64).log2();
            }
        }
        let idcg: f64 = (0..t.len().min(n)).map(|r| 1.0 / ((r + 2) as f64).log2()).sum();
        recall += hits as f64 / t.len() as f64;
        hr += f64::from(u8::from(hits > 0));
        ndcg += if idcg > 0.0 { dcg / idcg } else { 0.0 };
    }
    (users > 0).then(|| {
        let u = users as f64;
        (recall / u, hr / u, ndcg / u)
    })
}

/// Test items whose category never appears in the user's history.
pub fn unseen_truth(truth: &[usize], history: &[usize], category: &[usize]) -> BTreeSet<usize> {
    let seen: BTreeSet<usize> = history.iter().map(|&i| category[i]).collect();
    truth.iter().copied().filter(|&i| !seen.contains(&category[i])).collect()
}

/// Category-unseen recall over users with at least one unseen-category
/// test item; `None` when there are none.
pub fn cur(
    recs: &[Vec<usize>],
    truth: &[Vec<usize>],
    histories: &[Vec<usize>],
    category: &[usize],
    n: usize,
) -> Option<f64> {
    let mut total = 0.0;
    let mut users = 0usize;
    for ((r, t), h) in recs.iter().zip(truth).zip(histories) {
        let j = unseen_truth(t, h, category);
        if j.is_empty() {
            continue;
        }
        users += 1;
        let hits = r.iter().take(n).filter(|i| j.contains(i)).count();
        total += hits as f64 / j.len() as f64;
    }
    (users > 0).then(|| total / users as f64)
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Alignment margin: for each user and interest `k`, the mean over the
/// interest's retrieved items of `cos(u_k, v) - max_{j != k} cos(u_j, v)`,
/// averaged over interests and users. `reps[u]` holds one row per
/// interest. `None` when any user has fewer than two interests.
pub fn amr(reps: &[Tensor], retrieved: &[Vec<Vec<usize>>], items: &Tensor) -> Option<f64> {
    if reps.is_empty() || reps.iter().any(|r| r.rows() < 2) {
        return None;
    }
    let mut total = 0.0;
    let mut terms = 0usize;
    for (u, lists) in reps.iter().zip(retrieved) {
        let k = u.rows();
        for (i, list) in lists.iter().enumerate().take(k) {
            terms += 1;
            if list.is_empty() {
                continue;
            }
            let mut s = 0.0;
            for &x in list {
                let v = items.row(x);
                let own = cosine(u.row(i), v);
                let rival = (0..k)
                    .filter(|&j| j != i)
                    .map(|j| cosine(u.row(j), v))
                    .fold(f64::NEG_INFINITY, f64::max);
                s += own - rival;
            }
            total += s / list.len() as f64;
        }
    }
    Some(total / terms as f64)
}

/// Outcome of the dictionary separation checks.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeparationReport {
    /// Quantizer choices that disagreed with exhaustive search.
    pub nearest_mismatches: usize,
    pub delta_min: f64,
    /// Minimum pairwise row distance per level.
    pub level_deltas: Vec<f64>,
    /// `(level, row, row)` of a zero-distance pair, if any.
    pub duplicate: Option<(usize, usize, usize)>,
    /// Sampled code pairs whose squared distance fell below the sum of
    /// their differing levels' squared minimum distances.
    pub amplification_violations: usize,
    /// Largest disagreement between the concatenated and per-level squared distances.
    pub decomposition_error: f64,
    pub halfspace_violations: usize,
    pub samples: usize,
}

impl SeparationReport {
    pub fn nearest_ok(&self) -> bool {
        self.nearest_mismatches == 0
    }

    pub fn delta_ok(&self) -> bool {
        self.delta_min > 0.0 && self.duplicate.is_none()
    }

    pub fn amplification_ok(&self) -> bool {
        self.amplification_violations == 0 && self.decomposition_error <= 1e-9
    }

    pub fn halfspace_ok(&self) -> bool {
        self.halfspace_violations == 0
    }

    pub fn passed(&self) -> bool {
        self.nearest_ok() && self.delta_ok() && self.amplification_ok() && self.halfspace_ok()
    }

    pub fn lines(&self) -> Vec<String> {
        let verdict = |ok: bool| if ok { "PASS" } else { "FAIL" };
        let mut out = vec![
            format!(
                "(a) nearest-neighbour consistency: {} ({} mismatches over {} points per level)",
                verdict(self.nearest_ok()),
                self.nearest_mismatches,
                self.samples
            ),
            format!(
                "(b) minimum code distance {:.6e}: {} (per level {:?})",
                self.delta_min,
                verdict(self.delta_ok()),
                self.level_deltas
            ),
            format!(
                "(c) amplified separation: {} ({} violations, decomposition error {:.2e})",
                verdict(self.amplification_ok()),
                self.amplification_violations,
                self.decomposition_error
            ),
            format!(
                "(d) halfspace membership: {} ({} violations)",
                verdict(self.halfspace_ok()),
                self.halfspace_violations
            ),
        ];
        if let Some((c, a, b)) = self.duplicate {
            out.push(format!("duplicate rows {a} and {b} in level {c}"));
        }
        out
    }
}

/// Exhaustive argmin written independently of the quantizer.
fn brute_nearest(table: &Tensor, x: &[f64]) -> usize {
    let dists: Vec<f64> = (0..table.rows())
        .map(|j| table.row(j).iter().zip(x).map(|(a, b)| (a - b) * (a - b)).sum())
        .collect();
    let best = dists.iter().copied().fold(f64::INFINITY, f64::min);
    dists.iter().position(|&d| d == best).expect("non-empty table")
}

fn random_point(table: &Tensor, rng: &mut impl Rng) -> Vec<f64> {
    (0..table.cols())
        .map(|j| {
            let col = (0..table.rows()).map(|r| table.row(r)[j]);
            let lo = col.clone().fold(f64::INFINITY, f64::min) - 1.0;
            let hi = col.fold(f64::NEG_INFINITY, f64::max) + 1.0;
            rng.gen_range(lo..hi)
        })
        .collect()
}

/// Minimum distance between two rows of each level.
pub fn min_row_distances(dict: &Dictionary) -> Vec<f64> {
    (0..dict.num_levels())
        .map(|c| {
            let t = dict.level(c);
            let mut best = f64::INFINITY;
            for a in 0..t.rows() {
                for b in a + 1..t.rows() {
                    best = best.min(sq_dist(t.row(a), t.row(b)));
                }
            }
            best.sqrt()
        })
        .collect()
}

/// Checks that each level's quantizer induces the Voronoi partition of its
/// rows and that distinct codes are separated, with `n_samples` random
/// points per level and `n_samples` random code pairs.
pub fn verify_voronoi(dict: &Dictionary, n_samples: usize, rng: &mut impl Rng) -> SeparationReport {
    let levels = dict.num_levels();
    let mut nearest_mismatches = 0;
    let mut halfspace_violations = 0;
    let mut level_deltas = Vec::with_capacity(levels);
    let mut level_sq = Vec::with_capacity(levels);
    let mut duplicate = None;
    for c in 0..levels {
        let table = dict.level(c);
        let mut delta2 = f64::INFINITY;
        for a in 0..table.rows() {
            for b in a + 1..table.rows() {
                let d = sq_dist(table.row(a), table.row(b));
                if d < delta2 {
                    delta2 = d;
                }
                if d == 0.0 && duplicate.is_none() {
                    duplicate = Some((c, a, b));
                }
            }
        }
        level_deltas.push(delta2.sqrt());
        level_sq.push(delta2);
        let norms: Vec<f64> = (0..table.rows()).map(|r| table.row(r).iter().map(|x| x * x).sum()).collect();
        for _ in 0..n_samples {
            let x = random_point(table, rng);
            let (m, _) = dict.nearest(c, &x);
            if m != brute_nearest(table, &x) {
                nearest_mismatches += 1;
            }
            let em = table.row(m);
            for n in (0..table.rows()).filter(|&n| n != m) {
                let en = table.row(n);
                let lhs: f64 = 2.0 * x.iter().zip(en).zip(em).map(|((xi, a), b)| xi * (a - b)).sum::<f64>();
                let rhs = norms[n] - norms[m];
                let scale = 1.0 + lhs.abs().max(rhs.abs());
                if lhs > rhs + 1e-12 * scale {
                    halfspace_violations += 1;
                }
            }
        }
    }
    let delta_min = level_deltas.iter().copied().fold(f64::INFINITY, f64::min);

    let sizes = dict.level_sizes().to_vec();
    let mut amplification_violations = 0;
    let mut decomposition_error: f64 = 0.0;
    let mut pairs = 0;
    while pairs < n_samples {
        let a: Vec<usize> = sizes.iter().map(|&m| rng.gen_range(0..m)).collect();
        let b: Vec<usize> = sizes.iter().map(|&m| rng.gen_range(0..m)).collect();
        if a == b {
            continue;
        }
        pairs += 1;
        // Summing in the same level order keeps the comparison exact: each
        // term is at least its level's squared minimum.
        let mut per_level = 0.0;
        let mut bound = 0.0;
        for c in 0..levels {
            if a[c] != b[c] {
                per_level += sq_dist(dict.level(c).row(a[c]), dict.level(c).row(b[c]));
                bound += level_sq[c];
            }
        }
        let direct = sq_dist(&dict.code_vector(&a), &dict.code_vector(&b));
        decomposition_error = decomposition_error.max((direct - per_level).abs() / direct.max(1.0));
        if per_level < bound {
            amplification_violations += 1;
        }
    }
    SeparationReport {
        nearest_mismatches,
        delta_min,
        level_deltas,
        duplicate,
        amplification_violations,
        decomposition_error,
        halfspace_violations,
        samples: n_samples,
    }
}

/// Smallest ratio of fused-vector distance to code distance over sampled
/// users and code pairs.
pub fn fusion_margin(model: &GemiRec, users: &[usize], samples: usize, rng: &mut impl Rng) -> Result<f64> {
    if users.is_empty() {
        return Err(Error::Input("no users to sample".into()));
    }
    let dict = &model.idmm.dict;
    let sizes = dict.level_sizes().to_vec();
    let mut best = f64::INFINITY;
    for _ in 0..samples {
        let u = users[rng.gen_range(0..users.len())];
        let a: Vec<usize> = sizes.iter().map(|&m| rng.gen_range(0..m)).collect();
        let b: Vec<usize> = sizes.iter().map(|&m| rng.gen_range(0..m)).collect();
        if a == b {
            continue;
        }
        let (ea, eb) = (dict.code_vector(&a), dict.code_vector(&b));
        let uv = model.user_vector(u)?;
        let codes = Tensor::new(vec![2, ea.len()], ea.iter().chain(&eb).copied().collect())?;
        let users2 = Tensor::new(vec![2, uv.len()], uv.iter().chain(&uv).copied().collect())?;
        let f = model.towers.fuse_eval(&codes, &users2)?;
        let ratio = sq_dist(f.row(0), f.row(1)).sqrt() / sq_dist(&ea, &eb).sqrt();
        best = best.min(ratio);
    }
    Ok(best)
}

/// Which interests fill the cache during evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum Variant {
    /// Predicted from features and history.
    Full,
    /// Predicted with the user condition zeroed.
    ZeroCondition,
    /// The most frequent codes of the user's history items.
    Frequency,
    /// The top predicted interest repeated K times.
    Identical,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::ZeroCondition => "zero_condition",
            Variant::Frequency => "frequency",
            Variant::Identical => "identical",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub variant: String,
    pub users: usize,
    pub recall_at: BTreeMap<usize, f64>,
    pub hr_at: BTreeMap<usize, f64>,
    pub ndcg_at: BTreeMap<usize, f64>,
    /// `None` where not applicable.
    pub amr_at: BTreeMap<usize, Option<f64>>,
    pub cur_at: BTreeMap<usize, Option<f64>>,
    pub utilization: Option<f64>,
    pub delta_min: Option<f64>,
    pub level_deltas: Vec<f64>,
}

impl MetricReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Interest distribution that puts each history code's frequency on its
/// flat index.
pub fn history_code_frequencies(model: &GemiRec, index: &RetrievalIndex, history: &[usize]) -> Result<Vec<f64>> {
    let cap = capacity(model.idmm.dict.level_sizes());
    let mut probs = vec![0.0; cap];
    if history.is_empty() {
        return Ok(probs);
    }
    let mut rows = Vec::with_capacity(history.len() * index.dim());
    for &i in history {
        rows.extend_from_slice(index.vectors().row(i));
    }
    let v = Tensor::new(vec![history.len(), index.dim()], rows)?;
    for q in model.idmm.quantize_batch(&v)? {
        probs[q.code.flat] += 1.0 / history.len() as f64;
    }
    Ok(probs)
}

/// Rebuilds the cache of `users` for `variant` from the current model.
pub fn fill_cache(model: &GemiRec, index: &RetrievalIndex, users: &[usize], variant: Variant) -> Result<()> {
    match variant {
        Variant::Full | Variant::ZeroCondition => {
            for chunk in users.chunks(256) {
                let probs = model.predict_interests(chunk, variant == Variant::ZeroCondition)?;
                for (&u, p) in chunk.iter().zip(&probs) {
                    model.cache.update(u, p)?;
                }
            }
        }
        Variant::Frequency => {
            for &u in users {
                let p = history_code_frequencies(model, index, &model.users[u].history)?;
                model.cache.update(u, &p)?;
            }
        }
        Variant::Identical => {
            for chunk in users.chunks(256) {
                let probs = model.predict_interests(chunk, false)?;
                for (&u, p) in chunk.iter().zip(&probs) {
                    let top = crate::mipdm::top_k_flat(p, 1)[0];
                    let code = InterestCode::from_flat(top, model.idmm.dict.level_sizes())?;
                    let entry = CachedInterest { code, prob: p[top] };
                    model.cache.insert(u, vec![entry; model.cache.k()]);
                }
            }
        }
    }
    Ok(())
}

fn eval_users(split: &Split) -> Vec<usize> {
    (0..split.test.len()).filter(|&u| !split.test[u].is_empty()).collect()
}

/// Sets every user's history to the split's history, rebuilds the cache for
/// `variant` and evaluates at every `topn` against the test window.
pub fn evaluate(
    model: &mut GemiRec,
    split: &Split,
    topn: &[usize],
    variant: Variant,
) -> Result<MetricReport> {
    if split.history.len() != model.n_users() {
        return Err(Error::Input("split does not match the model's users".into()));
    }
    for (u, h) in split.history.iter().enumerate() {
        model.users[u].history = h.clone();
    }
    let index = model.build_index()?;
    let users = eval_users(split);
    fill_cache(model, &index, &users, variant)?;
    let truth: Vec<Vec<usize>> = users.iter().map(|&u| split.test[u].clone()).collect();
    let hist: Vec<Vec<usize>> = users.iter().map(|&u| split.history[u].clone()).collect();
    let mut report = MetricReport {
        variant: variant.name().to_string(),
        users: users.len(),
        utilization: model.idmm.utilization(),
        level_deltas: min_row_distances(&model.idmm.dict),
        ..MetricReport::default()
    };
    report.delta_min = report.level_deltas.iter().copied().reduce(f64::min);
    for &n in topn {
        let mut recs = Vec::with_capacity(users.len());
        let mut reps = Vec::with_capacity(users.len());
        let mut lists = Vec::with_capacity(users.len());
        for &u in &users {
            let r = model.recommend(&index, u, n)?;
            recs.push(r.items.iter().map(|p| p.0).collect::<Vec<_>>());
            lists.push(r.per_interest.iter().map(|l| l.iter().map(|p| p.0).collect()).collect());
            reps.push(r.fused);
        }
        let (recall, hr, ndcg) = recall_hr_ndcg(&recs, &truth, n).unwrap_or((0.0, 0.0, 0.0));
        report.recall_at.insert(n, recall);
        report.hr_at.insert(n, hr);
        report.ndcg_at.insert(n, ndcg);
        report.amr_at.insert(n, amr(&reps, &lists, index.vectors()));
        report.cur_at.insert(n, cur(&recs, &truth, &hist, &model.catalog.item_category, n));
    }
    Ok(report)
}

/// Same metrics for the single-interest baseline.
pub fn evaluate_baseline(
    baseline: &mut Baseline,
    split: &Split,
    category: &[usize],
    topn: &[usize],
) -> Result<MetricReport> {
    for (u, h) in split.history.iter().enumerate() {
        baseline.users[u].history = h.clone();
    }
    let index = baseline.build_index()?;
    let users = eval_users(split);
    let truth: Vec<Vec<usize>> = users.iter().map(|&u| split.test[u].clone()).collect();
    let hist: Vec<Vec<usize>> = users.iter().map(|&u| split.history[u].clone()).collect();
    let mut report = MetricReport {
        variant: "baseline".into(),
        users: users.len(),
        ..MetricReport::default()
    };
    for &n in topn {
        let recs: Vec<Vec<usize>> = users
            .iter()
            .map(|&u| Ok(baseline.recommend(&index, u, n)?.into_iter().map(|p| p.0).collect()))
            .collect::<Result<_>>()?;
        let (recall, hr, ndcg) = recall_hr_ndcg(&recs, &truth, n).unwrap_or((0.0, 0.0, 0.0));
        report.recall_at.insert(n, recall);
        report.hr_at.insert(n, hr);
        report.ndcg_at.insert(n, ndcg);
        report.amr_at.insert(n, None);
        report.cur_at.insert(n, cur(&recs, &truth, &hist, category, n));
    }
    Ok(report)
}

/// Win counts of the retain-one-level probe plus mean Recall@N per arm.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ImportanceReport {
    pub wins: Vec<usize>,
    pub mean_recall: Vec<f64>,
    /// Mean Recall@N with every level randomized.
    pub control_recall: f64,
    pub trials: usize,
}

/// For each trial and level, keeps that level's cached indices, draws the
/// other levels uniformly and measures Recall@N; the best level wins the
/// trial. The cache must already hold every evaluated user.
pub fn subdict_importance(
    model: &GemiRec,
    split: &Split,
    n: usize,
    trials: usize,
    rng: &mut impl Rng,
) -> Result<ImportanceReport> {
    let index = model.build_index()?;
    let users = eval_users(split);
    let truth: Vec<Vec<usize>> = users.iter().map(|&u| split.test[u].clone()).collect();
    let sizes = model.idmm.dict.level_sizes().to_vec();
    let levels = sizes.len();
    let user_vecs: Vec<Vec<f64>> = users.iter().map(|&u| model.user_vector(u)).collect::<Result<_>>()?;
    let cached: Vec<std::sync::Arc<Vec<CachedInterest>>> = users
        .iter()
        .map(|&u| model.cache.get(u).ok_or_else(|| Error::State(format!("user {u} is not cached"))))
        .collect::<Result<_>>()?;
    let mut wins = vec![0usize; levels];
    let mut sums = vec![0.0; levels];
    let mut control = 0.0;
    for _ in 0..trials {
        let arm = |keep: Option<usize>, rng: &mut dyn rand::RngCore| -> Result<f64> {
            let mut recs = Vec::with_capacity(users.len());
            for (uv, list) in user_vecs.iter().zip(&cached) {
                let perturbed: Vec<CachedInterest> = list
                    .iter()
                    .map(|ci| {
                        let levels: Vec<usize> = (0..sizes.len())
                            .map(|c| if Some(c) == keep { ci.code.levels[c] } else { rng.gen_range(0..sizes[c]) })
                            .collect();
                        Ok(CachedInterest {
                            code: InterestCode::from_levels(levels, &sizes)?,
                            prob: ci.prob,
                        })
                    })
                    .collect::<Result<_>>()?;
                let r = infer(uv, &perturbed, &model.idmm.dict, &model.towers, &index, n)?;
                recs.push(r.items.iter().map(|p| p.0).collect());
            }
            Ok(recall_hr_ndcg(&recs, &truth, n).map_or(0.0, |m| m.0))
        };
        let scores: Vec<f64> = (0..levels).map(|c| arm(Some(c), rng)).collect::<Result<_>>()?;
        control += arm(None, rng)?;
        let best = (0..levels)
            .max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a)))
            .expect("at least one level");
        wins[best] += 1;
        for (s, x) in sums.iter_mut().zip(&scores) {
            *s += x;
        }
    }
    let t = trials.max(1) as f64;
    Ok(ImportanceReport {
        wins,
        mean_recall: sums.iter().map(|s| s / t).collect(),
        control_recall: control / t,
        trials,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn ndcg_hand_value() {
        let (r, h, n) = recall_hr_ndcg(&[vec![0, 2]], &[vec![0, 1]], 2).unwrap();
        assert_eq!((r, h), (0.5, 1.0));
        assert!((n - 1.0 / (1.0 + 1.0 / 3f64.log2())).abs() < 1e-12);
        assert!((n - 0.6131).abs() < 1e-4);
    }

    #[test]
    fn oracle_and_empty() {
        let truth = vec![vec![1, 2], vec![3], vec![]];
        let (r, h, n) = recall_hr_ndcg(&truth, &truth, 5).unwrap();
        assert_eq!((r, h, n), (1.0, 1.0, 1.0));
        let empty = vec![vec![]; 3];
        assert_eq!(recall_hr_ndcg(&empty, &truth, 5).unwrap(), (0.0, 0.0, 0.0));
        assert!(recall_hr_ndcg(&empty, &empty, 5).is_none());
    }

    #[test]
    fn cur_counts_only_unseen_categories() {
        let category = [0, 0, 1, 2];
        // History sees category 0; test items 2 and 3 are unseen, one recovered.
        let got = cur(&[vec![2, 0]], &[vec![2, 3, 1]], &[vec![0]], &category, 2).unwrap();
        assert_eq!(got, 0.5);
        assert!(cur(&[vec![1]], &[vec![1]], &[vec![0]], &category, 1).is_none());
    }

    #[test]
    fn amr_of_orthogonal_interests_is_one() {
        let reps = vec![Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap()];
        let items = Tensor::from_rows(&[vec![2.0, 0.0], vec![0.0, 3.0]]).unwrap();
        assert_eq!(amr(&reps, &[vec![vec![0], vec![1]]], &items), Some(1.0));
        let same = vec![Tensor::from_rows(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap()];
        assert_eq!(amr(&same, &[vec![vec![0], vec![1]]], &items), Some(0.0));
        let single = vec![Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap()];
        assert_eq!(amr(&single, &[vec![vec![0]]], &items), None);
    }

    #[test]
    fn voronoi_bisector_example() {
        let dict = Dictionary::from_rows(&[vec![vec![0.0, 0.0], vec![2.0, 0.0]]]).unwrap();
        assert_eq!(dict.nearest(0, &[0.9, 5.0]).0, 0);
        let rep = verify_voronoi(&dict, 200, &mut crate::rng::stream(0, 0));
        assert_eq!(rep.delta_min, 2.0);
        assert!(rep.passed(), "{:?}", rep.lines());
    }

    #[test]
    fn duplicate_rows_fail() {
        let dict = Dictionary::from_rows(&[vec![vec![1.0], vec![1.0], vec![3.0]]]).unwrap();
        let rep = verify_voronoi(&dict, 10, &mut crate::rng::stream(0, 0));
        assert_eq!(rep.duplicate, Some((0, 0, 1)));
        assert!(!rep.passed());
    }

    proptest! {
        #[test]
        fn metrics_ignore_user_order(seed in any::<u64>()) {
            let mut rng = crate::rng::stream(seed, 1);
            let recs: Vec<Vec<usize>> = (0..6).map(|_| (0..5).map(|_| rng.gen_range(0..12)).collect()).collect();
            let truth: Vec<Vec<usize>> = (0..6).map(|_| (0..3).map(|_| rng.gen_range(0..12)).collect()).collect();
            let hist: Vec<Vec<usize>> = (0..6).map(|_| (0..4).map(|_| rng.gen_range(0..12)).collect()).collect();
            let cat: Vec<usize> = (0..12).map(|i| i % 5).collect();
            let perm = [3usize, 0, 5, 1, 4, 2];
            let p = |v: &Vec<Vec<usize>>| perm.iter().map(|&i| v[i].clone()).collect::<Vec<_>>();
            let a = recall_hr_ndcg(&recs, &truth, 5).unwrap();
            let b = recall_hr_ndcg(&p(&recs), &p(&truth), 5).unwrap();
            prop_assert!((a.0 - b.0).abs() < 1e-12 && (a.1 - b.1).abs() < 1e-12 && (a.2 - b.2).abs() < 1e-12);
            let c1 = cur(&recs, &truth, &hist, &cat, 5);
            let c2 = cur(&p(&recs), &p(&truth), &p(&hist), &cat, 5);
            let same = match (c1, c2) {
                (Some(x), Some(y)) => (x - y).abs() < 1e-12,
                (None, None) => true,
                _ => false,
            };
            prop_assert!(same);
        }

        #[test]
        fn amr_scale_invariant(seed in any::<u64>(), s in 0.1f64..10.0) {
            let mut rng = crate::rng::stream(seed, 2);
            let mut g = |r, c| Tensor::new(vec![r, c], (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
            let reps = g(3, 4);
            let items = g(6, 4);
            let lists = vec![vec![vec![0, 1], vec![2, 3], vec![4, 5]]];
            let mut scaled = reps.clone();
            for x in scaled.row_mut(1) {
                *x *= s;
            }
            let a = amr(&[reps], &lists, &items).unwrap();
            let b = amr(&[scaled], &lists, &items).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
            prop_assert!((-2.0..=2.0).contains(&a));
        }

        #[test]
        fn amplified_separation_holds(seed in any::<u64>()) {
            let mut rng = crate::rng::stream(seed, 3);
            let levels: Vec<Vec<Vec<f64>>> = [4usize, 3, 2]
                .iter()
                .map(|&m| (0..m).map(|_| (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect()).collect())
                .collect();
            let dict = Dictionary::from_rows(&levels).unwrap();
            let rep = verify_voronoi(&dict, 100, &mut rng);
            prop_assert!(rep.passed(), "{:?}", rep.lines());
        }
    }
}
