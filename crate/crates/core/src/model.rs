//! The assembled recommender: interest dictionary, interest predictor,
//! towers, their optimizers, the serving cache and per-user state.

use crate::config::Config;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::idmm::Idmm;
use crate::mipdm::{Mipdm, SeqInput};
use crate::mirm::{Towers, UserInput};
use crate::rng;
use crate::serving::{infer, InterestCache, Recommendation, RetrievalIndex};
use crate::tensor::{Adam, AdamConfig, Tensor};

/// External ids and categorical side information, indexed densely.
#[derive(Clone, Debug, PartialEq)]
pub struct Catalog {
    pub item_ids: Vec<u64>,
    pub user_ids: Vec<u64>,
    pub item_category: Vec<usize>,
    pub category_ids: Vec<u64>,
    pub feature_vocab: Vec<usize>,
}

impl Catalog {
    pub fn from_dataset(data: &Dataset) -> Self {
        Self {
            item_ids: data.item_ids.clone(),
            user_ids: data.user_ids.clone(),
            item_category: data.item_category.clone(),
            category_ids: data.category_ids.clone(),
            feature_vocab: data.feature_vocab.clone(),
        }
    }

    pub fn user_index(&self, id: u64) -> Option<usize> {
        self.user_ids.binary_search(&id).ok()
    }
}

/// One Adam per parameter store, so each training stage can freeze a
/// module by not stepping it.
#[derive(Clone, Debug)]
pub struct Optimizers {
    pub dictionary: Adam,
    pub nets: Adam,
    pub mipdm: Adam,
    pub towers: Adam,
}

#[derive(Clone, Debug)]
pub struct GemiRec {
    pub config: Config,
    pub catalog: Catalog,
    pub idmm: Idmm,
    pub mipdm: Mipdm,
    pub towers: Towers,
    pub optim: Optimizers,
    pub cache: InterestCache,
    /// Per-user features and the history observed so far.
    pub users: Vec<UserInput>,
}

impl GemiRec {
    /// Fresh model sized for `data`; users start with empty histories.
    pub fn new(config: Config, data: &Dataset) -> Result<Self> {
        Self::build(
            config,
            Catalog::from_dataset(data),
            data.item_features.clone(),
            data.user_features.clone(),
        )
    }

    pub(crate) fn build(
        config: Config,
        catalog: Catalog,
        item_features: Option<Tensor>,
        user_features: Vec<Vec<usize>>,
    ) -> Result<Self> {
        config.validate()?;
        if user_features.len() != catalog.user_ids.len() {
            return Err(Error::Input("one feature row per user is required".into()));
        }
        let m = &config.model;
        let code_len = m.code_dim * m.level_sizes.len();
        let towers = Towers::new(
            m,
            catalog.item_ids.len(),
            item_features,
            &catalog.feature_vocab,
            Some(code_len),
            &mut rng::stream(config.seed, rng::streams::TOWER_INIT),
        )?;
        let idmm = Idmm::new(
            towers.output_dim(),
            m,
            &mut rng::stream(config.seed, rng::streams::IDMM_INIT),
        )?;
        let mipdm = Mipdm::new(
            m,
            &catalog.feature_vocab,
            m.item_embedding_dim,
            &mut rng::stream(config.seed, rng::streams::MIPDM_INIT),
        )?;
        let adam = AdamConfig {
            lr: config.train.lr,
            ..AdamConfig::default()
        };
        let optim = Optimizers {
            dictionary: Adam::new(&idmm.dict.store, adam),
            nets: Adam::new(&idmm.nets, adam),
            mipdm: Adam::new(&mipdm.store, adam),
            towers: Adam::new(&towers.store, adam),
        };
        let cache = InterestCache::new(config.serve.top_k, config.serve.epsilon, &m.level_sizes)?;
        let users = user_features
            .into_iter()
            .map(|features| UserInput {
                features,
                history: Vec::new(),
            })
            .collect();
        Ok(Self {
            config,
            catalog,
            idmm,
            mipdm,
            towers,
            optim,
            cache,
            users,
        })
    }

    pub fn n_users(&self) -> usize {
        self.users.len()
    }

    pub fn n_items(&self) -> usize {
        self.catalog.item_ids.len()
    }

    fn check_user(&self, user: usize) -> Result<()> {
        if user >= self.users.len() {
            return Err(Error::Input(format!("unknown user index {user}")));
        }
        Ok(())
    }

    /// Predicted interest distributions from each user's features and
    /// current history.
    pub fn predict_interests(&self, users: &[usize], zero_condition: bool) -> Result<Vec<Vec<f64>>> {
        let inputs: Vec<SeqInput> = users
            .iter()
            .map(|&u| {
                self.check_user(u)?;
                Ok(SeqInput {
                    features: self.users[u].features.clone(),
                    items: self.users[u].history.clone(),
                })
            })
            .collect::<Result<_>>()?;
        self.mipdm.predict(self.towers.item_embeddings(), &inputs, zero_condition)
    }

    /// Recomputes and caches interests for `users`.
    pub fn refresh_cache(&self, users: &[usize]) -> Result<()> {
        for chunk in users.chunks(256) {
            let probs = self.predict_interests(chunk, false)?;
            for (&u, p) in chunk.iter().zip(&probs) {
                self.cache.update(u, p)?;
            }
        }
        Ok(())
    }

    pub fn build_index(&self) -> Result<RetrievalIndex> {
        RetrievalIndex::from_towers(&self.towers)
    }

    pub fn user_vector(&self, user: usize) -> Result<Vec<f64>> {
        self.check_user(user)?;
        let u = self.towers.user_vectors_eval(std::slice::from_ref(&self.users[user]))?;
        Ok(u.into_data())
    }

    /// Top-`n` items for `user`. A user missing from the cache gets a
    /// prediction from features alone, which is then cached.
    pub fn recommend(&self, index: &RetrievalIndex, user: usize, n: usize) -> Result<Recommendation> {
        self.check_user(user)?;
        let interests = match self.cache.get(user) {
            Some(c) => c,
            None => {
                let input = SeqInput {
                    features: self.users[user].features.clone(),
                    items: Vec::new(),
                };
                let probs = self.mipdm.predict(self.towers.item_embeddings(), &[input], false)?;
                self.cache.update(user, &probs[0])?;
                self.cache.get(user).expect("just inserted")
            }
        };
        let u = self.user_vector(user)?;
        infer(&u, &interests, &self.idmm.dict, &self.towers, index, n)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth;

    fn tiny() -> (Config, Dataset) {
        let mut cfg = Config::desk();
        cfg.synth.n_users = 40;
        cfg.synth.n_items = 48;
        let (data, _) = synth::generate(&cfg.synth, 1).unwrap();
        (cfg, data)
    }

    #[test]
    fn cold_start_populates_cache() {
        let (cfg, data) = tiny();
        let mut model = GemiRec::new(cfg, &data).unwrap();
        let items = model.towers.all_item_vectors().unwrap();
        model.idmm.init_kmeans(&items, &mut rng::stream(0, 0)).unwrap();
        let index = model.build_index().unwrap();
        assert!(model.cache.get(3).is_none());
        let rec = model.recommend(&index, 3, 20).unwrap();
        assert_eq!(rec.items.len(), 20);
        assert_eq!(model.cache.get(3).unwrap().len(), model.config.serve.top_k);
    }

    #[test]
    fn cached_inference_skips_predictor_and_quantizer() {
        let (cfg, data) = tiny();
        let mut model = GemiRec::new(cfg, &data).unwrap();
        let items = model.towers.all_item_vectors().unwrap();
        model.idmm.init_kmeans(&items, &mut rng::stream(0, 0)).unwrap();
        model.refresh_cache(&[0, 1, 2]).unwrap();
        let index = model.build_index().unwrap();
        let (p, q) = (model.mipdm.forward_calls(), model.idmm.forward_calls());
        for u in 0..3 {
            model.recommend(&index, u, 10).unwrap();
        }
        assert_eq!(model.mipdm.forward_calls(), p);
        assert_eq!(model.idmm.forward_calls(), q);
    }
}
