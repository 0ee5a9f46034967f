//! Single-interest dual-tower reference: the same towers scored by a plain
//! user-item dot product, trained with in-batch negatives only.

use crate::code::InterestCode;
use crate::config::Config;
use crate::data::{Dataset, DenseEvent};
use crate::error::{Error, Result};
use crate::mirm::{mirm_loss, MirmExample, Towers, UserInput};
use crate::rng;
use crate::serving::{mips_topn, RetrievalIndex};
use crate::tensor::{Adam, AdamConfig, Tape};
use crate::trainer::micro_batches;

#[derive(Clone, Debug)]
pub struct Baseline {
    pub towers: Towers,
    pub adam: Adam,
    pub users: Vec<UserInput>,
    batch_size: usize,
    warmup_steps: usize,
}

impl Baseline {
    pub fn new(config: &Config, data: &Dataset) -> Result<Self> {
        let towers = Towers::new(
            &config.model,
            data.n_items(),
            data.item_features.clone(),
            &data.feature_vocab,
            None,
            &mut rng::stream(config.seed, rng::streams::BASELINE_INIT),
        )?;
        let adam = Adam::new(
            &towers.store,
            AdamConfig {
                lr: config.train.lr,
                ..AdamConfig::default()
            },
        );
        let users = data
            .user_features
            .iter()
            .map(|f| UserInput {
                features: f.clone(),
                history: Vec::new(),
            })
            .collect();
        Ok(Self {
            towers,
            adam,
            users,
            batch_size: config.train.batch_size,
            warmup_steps: config.train.stage1_steps,
        })
    }

    fn step(&mut self, batch: &[DenseEvent], prefixes: Vec<Vec<usize>>) -> Result<f64> {
        let examples: Vec<MirmExample> = batch
            .iter()
            .zip(prefixes)
            .map(|(e, history)| MirmExample {
                user: UserInput {
                    features: self.users[e.user].features.clone(),
                    history,
                },
                positive: e.item,
                code: InterestCode { levels: Vec::new(), flat: 0 },
                interest_negatives: Vec::new(),
            })
            .collect();
        let mut tape = Tape::new();
        let loss = mirm_loss(&mut tape, &self.towers, None, &examples)?;
        let l = tape.value(loss).item();
        if !l.is_finite() {
            return Err(Error::NonFinite { stage: 0, step: 0, loss: "baseline" });
        }
        let grads = tape.backward(loss)?;
        self.towers.store.zero_grad();
        self.towers.store.accumulate(&grads);
        self.adam.step(&mut self.towers.store)?;
        Ok(l)
    }

    /// As many retrieval steps as the full model's schedule: the warm-up
    /// steps cycling over the stream, then one streaming pass.
    pub fn train(&mut self, events: &[DenseEvent]) -> Result<Vec<f64>> {
        if events.is_empty() {
            return Err(Error::Input("cannot train on an empty event stream".into()));
        }
        let batches = micro_batches(events, self.batch_size);
        let mut seqs: Vec<Vec<usize>> = vec![Vec::new(); self.users.len()];
        let mut prefix_len = Vec::with_capacity(events.len());
        for e in events {
            prefix_len.push(seqs[e.user].len());
            seqs[e.user].push(e.item);
        }
        let mut losses = Vec::new();
        for step in 0..self.warmup_steps {
            let r = batches[step % batches.len()].clone();
            let prefixes = events[r.clone()]
                .iter()
                .zip(&prefix_len[r.clone()])
                .map(|(e, &l)| seqs[e.user][..l].to_vec())
                .collect();
            losses.push(self.step(&events[r], prefixes)?);
        }
        for u in &mut self.users {
            u.history.clear();
        }
        for r in batches {
            let batch = &events[r];
            let prefixes = batch.iter().map(|e| self.users[e.user].history.clone()).collect();
            losses.push(self.step(batch, prefixes)?);
            for e in batch {
                self.users[e.user].history.push(e.item);
            }
        }
        Ok(losses)
    }

    pub fn user_vector(&self, user: usize) -> Result<Vec<f64>> {
        let u = self.users.get(user).ok_or_else(|| Error::Input(format!("unknown user index {user}")))?;
        Ok(self.towers.user_vectors_eval(std::slice::from_ref(u))?.into_data())
    }

    pub fn build_index(&self) -> Result<RetrievalIndex> {
        RetrievalIndex::from_towers(&self.towers)
    }

    pub fn recommend(&self, index: &RetrievalIndex, user: usize, n: usize) -> Result<Vec<(usize, f64)>> {
        mips_topn(&self.user_vector(user)?, index, n)
    }
}
