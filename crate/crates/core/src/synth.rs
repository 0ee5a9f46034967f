//! Synthetic interaction data with planted multi-interest and drift structure.
//!
//! Items form Gaussian clusters, one per category, with Zipf popularity
//! inside each category. Every user mixes 2-4 planted categories, repeats
//! the previous category with some probability, and may drift into a
//! category determined by their first feature that is never one of their
//! planted interests.

use rand::distributions::{Distribution, WeightedIndex};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::Normal;

use crate::config::SynthConfig;
use crate::data::{split_sizes, Dataset, DenseEvent};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::Tensor;

/// Ground truth kept alongside the generated data.
#[derive(Clone, Debug, PartialEq)]
pub struct Planted {
    pub interests: Vec<Vec<usize>>,
    pub drift_category: Vec<usize>,
    /// Index of the first event that may be drawn from the drift category.
    pub drift_onset: Vec<Option<usize>>,
    /// Users whose drift starts at the validation window.
    pub test_drifters: Vec<bool>,
    pub category_means: Vec<Vec<f64>>,
}

/// Drift category implied by a user's first feature value.
pub fn drift_rule(feature: usize, n_categories: usize) -> usize {
    feature % n_categories
}

pub fn validate(cfg: &SynthConfig) -> Result<()> {
    let err = |m: &str| Err(Error::Config(m.to_string()));
    if cfg.n_categories < 2 {
        return err("n_categories must be at least 2");
    }
    if cfg.interests_min == 0 || cfg.interests_min > cfg.interests_max {
        return err("interests range must be non-empty and start at 1 or more");
    }
    if cfg.n_categories < cfg.interests_max + 1 {
        return err("n_categories must exceed interests_max so a drift category remains");
    }
    if cfg.seq_len_min < 3 || cfg.seq_len_min > cfg.seq_len_max {
        return err("seq_len range must be non-empty and start at 3 or more");
    }
    if cfg.n_items < cfg.n_categories || cfg.n_users == 0 {
        return err("need at least one user and one item per category");
    }
    if cfg.n_user_features == 0 || cfg.user_feature_vocab == 0 {
        return err("need at least one user feature with a non-empty vocabulary");
    }
    for p in [cfg.drift_prob, cfg.history_drift_prob, cfg.drift_share, cfg.stickiness] {
        if !(0.0..=1.0).contains(&p) {
            return err("probabilities must lie in [0, 1]");
        }
    }
    if !(cfg.cluster_std >= 0.0) || !(cfg.zipf_exponent >= 0.0) {
        return err("cluster_std and zipf_exponent must be non-negative");
    }
    Ok(())
}

pub fn generate(cfg: &SynthConfig, seed: u64) -> Result<(Dataset, Planted)> {
    validate(cfg)?;
    let g = cfg.n_categories;
    let mut rng = rng::stream(seed, rng::streams::SYNTH);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let dim = cfg.item_feature_dim;
    let category_means: Vec<Vec<f64>> = (0..g)
        .map(|_| (0..dim).map(|_| std_normal.sample(&mut rng)).collect())
        .collect();
    let item_category: Vec<usize> = (0..cfg.n_items).map(|i| i % g).collect();
    let item_features = if dim == 0 {
        None
    } else {
        let noise = Normal::new(0.0, cfg.cluster_std.max(f64::MIN_POSITIVE)).expect("finite std");
        let mut data = Vec::with_capacity(cfg.n_items * dim);
        for &c in &item_category {
            for &m in &category_means[c] {
                let n = if cfg.cluster_std == 0.0 { 0.0 } else { noise.sample(&mut rng) };
                data.push(m + n);
            }
        }
        Some(Tensor::new(vec![cfg.n_items, dim], data)?)
    };
    let members: Vec<Vec<usize>> = (0..g)
        .map(|c| (0..cfg.n_items).filter(|i| i % g == c).collect())
        .collect();
    let popularity: Vec<WeightedIndex<f64>> = members
        .iter()
        .map(|m| {
            let w: Vec<f64> = (0..m.len()).map(|r| 1.0 / ((r + 1) as f64).powf(cfg.zipf_exponent)).collect();
            WeightedIndex::new(w).expect("positive weights")
        })
        .collect();

    let mut events = Vec::new();
    let mut planted = Planted {
        interests: Vec::with_capacity(cfg.n_users),
        drift_category: Vec::with_capacity(cfg.n_users),
        drift_onset: Vec::with_capacity(cfg.n_users),
        test_drifters: Vec::with_capacity(cfg.n_users),
        category_means: category_means.clone(),
    };
    let mut user_features = Vec::with_capacity(cfg.n_users);
    for u in 0..cfg.n_users {
        let feats: Vec<usize> = (0..cfg.n_user_features)
            .map(|_| rng.gen_range(0..cfg.user_feature_vocab))
            .collect();
        let drift = drift_rule(feats[0], g);
        let k = rng.gen_range(cfg.interests_min..=cfg.interests_max);
        let mut pool: Vec<usize> = (0..g).filter(|&c| c != drift).collect();
        pool.shuffle(&mut rng);
        let interests: Vec<usize> = pool[..k].to_vec();
        let weights: Vec<f64> = (0..k).map(|_| rng.gen_range(0.5..1.5)).collect();
        let mix = WeightedIndex::new(&weights).expect("positive weights");

        let n = rng.gen_range(cfg.seq_len_min..=cfg.seq_len_max);
        let (n_hist, _, _) = split_sizes(n);
        let test_drifter = rng.gen_bool(cfg.drift_prob);
        let onset = if test_drifter {
            Some(n_hist)
        } else if rng.gen_bool(cfg.history_drift_prob) {
            Some(rng.gen_range(n_hist / 2..n_hist.max(n_hist / 2 + 1)))
        } else {
            None
        };

        let offset = rng.gen_range(0..1000i64);
        let mut cats: Vec<usize> = Vec::with_capacity(n);
        for t in 0..n {
            let drifting = onset.is_some_and(|o| t >= o) && rng.gen_bool(cfg.drift_share);
            let mut c = if drifting {
                drift
            } else if t > 0 && rng.gen_bool(cfg.stickiness) {
                cats[t - 1]
            } else {
                interests[mix.sample(&mut rng)]
            };
            // Outside the history only drift may introduce unseen categories.
            if t >= n_hist && !drifting && !cats[..n_hist].contains(&c) {
                c = cats[rng.gen_range(0..n_hist)];
            }
            cats.push(c);
        }
        if let (false, Some(o)) = (test_drifter, onset) {
            // A history drifter has seen its drift category before evaluation.
            if !cats[o..n_hist].contains(&drift) {
                cats[o] = drift;
            }
        }
        if test_drifter {
            let (_, n_val, _) = split_sizes(n);
            let test_start = n_hist + n_val;
            if !cats[test_start..].contains(&drift) {
                cats[test_start] = drift;
            }
        }
        for (t, &c) in cats.iter().enumerate() {
            let item = members[c][popularity[c].sample(&mut rng)];
            events.push(DenseEvent {
                user: u,
                item,
                timestamp: t as i64 * 1000 + offset,
                category: c,
            });
        }
        user_features.push(feats);
        planted.interests.push(interests);
        planted.drift_category.push(drift);
        planted.drift_onset.push(onset);
        planted.test_drifters.push(test_drifter);
    }
    events.sort_by_key(|e| (e.timestamp, e.user, e.item));
    let mut feature_vocab = vec![cfg.user_feature_vocab; cfg.n_user_features];
    feature_vocab.truncate(cfg.n_user_features);
    let data = Dataset {
        events,
        user_ids: (0..cfg.n_users as u64).collect(),
        item_ids: (0..cfg.n_items as u64).collect(),
        item_category,
        category_ids: (0..g as u64).collect(),
        item_features,
        user_features,
        feature_vocab,
    };
    Ok((data, planted))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Config;
    use crate::data::Split;

    fn small() -> SynthConfig {
        let mut c = Config::desk().synth;
        c.n_users = 300;
        c.n_items = 80;
        c
    }

    #[test]
    fn deterministic_under_seed() {
        let (a, _) = generate(&small(), 3).unwrap();
        let (b, _) = generate(&small(), 3).unwrap();
        assert_eq!(a, b);
        let (c, _) = generate(&small(), 4).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn drift_category_never_planted() {
        let (_, p) = generate(&small(), 1).unwrap();
        for (i, d) in p.interests.iter().zip(&p.drift_category) {
            assert!(!i.contains(d));
        }
    }

    #[test]
    fn per_user_timestamps_increase() {
        let (d, _) = generate(&small(), 2).unwrap();
        for s in d.sequences() {
            assert!(s.windows(2).all(|w| w[0].timestamp < w[1].timestamp));
        }
    }

    #[test]
    fn infeasible_configs_rejected() {
        let mut c = small();
        c.n_categories = 4;
        assert!(matches!(generate(&c, 0), Err(Error::Config(_))));
        c = small();
        c.seq_len_min = 2;
        assert!(generate(&c, 0).is_err());
    }

    fn unseen_share(cfg: &SynthConfig) -> f64 {
        let (d, _) = generate(cfg, 7).unwrap();
        let split = Split::new(&d);
        let with_unseen = (0..d.n_users())
            .filter(|&u| {
                let seen: Vec<usize> = split.history[u].iter().map(|&i| d.item_category[i]).collect();
                split.test[u].iter().any(|&i| !seen.contains(&d.item_category[i]))
            })
            .count();
        with_unseen as f64 / d.n_users() as f64
    }

    #[test]
    fn drift_produces_unseen_test_categories() {
        let mut c = small();
        c.drift_prob = 0.5;
        assert!(unseen_share(&c) >= 0.3);
        c.drift_prob = 0.0;
        assert_eq!(unseen_share(&c), 0.0);
    }
}
