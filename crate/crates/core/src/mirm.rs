//! Interest-fused dual-tower retrieval: towers, fusion net, negative
//! sampling and the joint softmax loss over item and interest negatives.

use rand::Rng;

use crate::code::InterestCode;
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::idmm::Dictionary;
use crate::mipdm::top_k_flat;
use crate::nn::{normal_table, Activation, Mlp};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

const EMBED_STD: f64 = 0.1;

/// User-side inputs: categorical features plus chronological item history.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct UserInput {
    pub features: Vec<usize>,
    pub history: Vec<usize>,
}

/// User tower, item tower, the shared item id-embedding table and, unless
/// this is a plain dual-tower, the fusion net.
#[derive(Clone, Debug)]
pub struct Towers {
    pub store: ParamStore,
    pub item_emb: ParamId,
    user_feat_emb: Vec<ParamId>,
    feat_vocab: Vec<usize>,
    pub user_tower: Mlp,
    pub item_tower: Mlp,
    pub fusion: Option<Mlp>,
    item_features: Option<Tensor>,
    history_window: usize,
}

impl Towers {
    /// `item_features` is a fixed `[n_items, f]` side-feature matrix (or `None`).
    /// `fused_code_dim` is `C * d` for the fusion input, or `None` for a
    /// plain dual-tower.
    pub fn new(
        cfg: &ModelConfig,
        n_items: usize,
        item_features: Option<Tensor>,
        feat_vocab: &[usize],
        fused_code_dim: Option<usize>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        if n_items == 0 {
            return Err(Error::Config("catalog is empty".into()));
        }
        if let Some(f) = &item_features {
            if f.rows() != n_items || f.shape().len() != 2 {
                return Err(Error::Config(format!(
                    "item features {:?} do not cover {n_items} items",
                    f.shape()
                )));
            }
        }
        let mut store = ParamStore::new();
        let id_dim = cfg.item_embedding_dim;
        let item_emb = store.add_row_sparse("item_embedding", normal_table(n_items, id_dim, EMBED_STD, rng));
        let user_feat_emb = feat_vocab
            .iter()
            .enumerate()
            .map(|(f, &v)| {
                store.add_row_sparse(
                    format!("user_feature{f}"),
                    normal_table(v + 1, cfg.user_feature_dim, EMBED_STD, rng),
                )
            })
            .collect();
        let user_tower = Mlp::new(
            &mut store,
            "user_tower",
            cfg.user_feature_dim + id_dim,
            &cfg.user_tower,
            Activation::LeakyRelu,
            rng,
        );
        let feat_dim = item_features.as_ref().map_or(0, |f| f.cols());
        let item_tower = Mlp::new(
            &mut store,
            "item_tower",
            feat_dim + id_dim,
            &cfg.item_tower,
            Activation::LeakyRelu,
            rng,
        );
        let fusion = match fused_code_dim {
            Some(cd) => {
                let f = Mlp::new(
                    &mut store,
                    "fusion",
                    cd + user_tower.out_dim(),
                    &cfg.fusion,
                    Activation::LeakyRelu,
                    rng,
                );
                if f.out_dim() != item_tower.out_dim() {
                    return Err(Error::Config("fusion output must match item tower output".into()));
                }
                Some(f)
            }
            None => {
                if user_tower.out_dim() != item_tower.out_dim() {
                    return Err(Error::Config(
                        "a plain dual-tower needs equal user and item output widths".into(),
                    ));
                }
                None
            }
        };
        Ok(Self {
            store,
            item_emb,
            user_feat_emb,
            feat_vocab: feat_vocab.to_vec(),
            user_tower,
            item_tower,
            fusion,
            item_features,
            history_window: cfg.history_window,
        })
    }

    pub fn n_items(&self) -> usize {
        self.store.get(self.item_emb).rows()
    }

    pub fn output_dim(&self) -> usize {
        self.item_tower.out_dim()
    }

    pub fn item_features(&self) -> Option<&Tensor> {
        self.item_features.as_ref()
    }

    pub fn item_embeddings(&self) -> &Tensor {
        self.store.get(self.item_emb)
    }

    fn check_items(&self, items: &[usize]) -> Result<()> {
        let n = self.n_items();
        match items.iter().find(|&&i| i >= n) {
            Some(bad) => Err(Error::Input(format!("item {bad} is not in the catalog of {n}"))),
            None => Ok(()),
        }
    }

    /// Item tower outputs `[n, D]`.
    pub fn item_vectors(&self, tape: &mut Tape, items: &[usize]) -> Result<Var> {
        self.check_items(items)?;
        let table = tape.param(&self.store, self.item_emb);
        let emb = tape.gather_rows(table, items)?;
        let input = match &self.item_features {
            Some(f) => {
                let mut rows = Vec::with_capacity(items.len() * f.cols());
                for &i in items {
                    rows.extend_from_slice(f.row(i));
                }
                let feats = tape.constant(Tensor::new(vec![items.len(), f.cols()], rows)?);
                tape.concat(&[feats, emb], 1)?
            }
            None => emb,
        };
        self.item_tower.forward(tape, &self.store, input)
    }

    /// User tower outputs `[n, U]`: features summed, the last
    /// `history_window` history embeddings averaged.
    pub fn user_vectors(&self, tape: &mut Tape, users: &[UserInput]) -> Result<Var> {
        let b = users.len();
        let table = tape.param(&self.store, self.item_emb);
        let id_dim = tape.shape(table)[1];
        let windows: Vec<&[usize]> = users
            .iter()
            .map(|u| &u.history[u.history.len().saturating_sub(self.history_window)..])
            .collect();
        let flat: Vec<usize> = windows.iter().flat_map(|w| w.iter().copied()).collect();
        self.check_items(&flat)?;
        let pooled = if flat.is_empty() {
            tape.constant(Tensor::zeros(&[b, id_dim]))
        } else {
            let mut pool = vec![0.0; b * flat.len()];
            let mut col = 0;
            for (r, w) in windows.iter().enumerate() {
                for _ in 0..w.len() {
                    pool[r * flat.len() + col] = 1.0 / w.len() as f64;
                    col += 1;
                }
            }
            let pool = tape.constant(Tensor::new(vec![b, flat.len()], pool)?);
            let hist = tape.gather_rows(table, &flat)?;
            tape.matmul(pool, hist)?
        };
        let feat_dim = self.user_tower.in_dim() - id_dim;
        let mut feats: Option<Var> = None;
        for (f, &id) in self.user_feat_emb.iter().enumerate() {
            let oov = self.feat_vocab[f];
            let rows: Vec<usize> = users
                .iter()
                .map(|u| u.features.get(f).copied().filter(|&x| x < oov).unwrap_or(oov))
                .collect();
            let t = tape.param(&self.store, id);
            let e = tape.gather_rows(t, &rows)?;
            feats = Some(match feats {
                None => e,
                Some(s) => tape.add(s, e)?,
            });
        }
        let feats = match feats {
            Some(f) => f,
            None => tape.constant(Tensor::zeros(&[b, feat_dim])),
        };
        let input = tape.concat(&[feats, pooled], 1)?;
        self.user_tower.forward(tape, &self.store, input)
    }

    /// Fused user-interest representations `[n, D]` from code vectors
    /// `[n, C*d]` and user vectors `[n, U]`.
    pub fn fuse(&self, tape: &mut Tape, codes: Var, users: Var) -> Result<Var> {
        let fusion = self
            .fusion
            .as_ref()
            .ok_or_else(|| Error::Usage("plain dual-tower has no fusion net".into()))?;
        let x = tape.concat(&[codes, users], 1)?;
        fusion.forward(tape, &self.store, x)
    }

    /// Item tower outputs for the whole catalog.
    pub fn all_item_vectors(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let items: Vec<usize> = (0..self.n_items()).collect();
        let v = self.item_vectors(&mut tape, &items)?;
        Ok(tape.value(v).clone())
    }

    pub fn user_vectors_eval(&self, users: &[UserInput]) -> Result<Tensor> {
        let mut tape = Tape::new();
        let u = self.user_vectors(&mut tape, users)?;
        Ok(tape.value(u).clone())
    }

    /// Fused vectors for explicit code vectors and user vectors, row-aligned.
    pub fn fuse_eval(&self, codes: &Tensor, users: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let c = tape.constant(codes.clone());
        let u = tape.constant(users.clone());
        let f = self.fuse(&mut tape, c, u)?;
        Ok(tape.value(f).clone())
    }

    /// `z_fusion(concat(e, u))^T v` for one tuple.
    pub fn score(&self, interest: &[f64], user: &[f64], item: &[f64]) -> Result<f64> {
        let fused = self.fuse_eval(
            &Tensor::new(vec![1, interest.len()], interest.to_vec())?,
            &Tensor::new(vec![1, user.len()], user.to_vec())?,
        )?;
        if fused.cols() != item.len() {
            return Err(Error::Shape {
                op: "score",
                shapes: vec![fused.shape().to_vec(), vec![item.len()]],
            });
        }
        Ok(fused.data().iter().zip(item).map(|(a, b)| a * b).sum())
    }
}

/// Concatenated dictionary rows for each code, `[n, C*d]`, on the tape.
pub fn code_vectors(tape: &mut Tape, dict: &Dictionary, codes: &[&InterestCode]) -> Result<Var> {
    let mut parts = Vec::with_capacity(dict.num_levels());
    for c in 0..dict.num_levels() {
        let idx: Vec<usize> = codes.iter().map(|k| k.levels[c]).collect();
        let table = tape.param(&dict.store, dict.level_id(c));
        parts.push(tape.gather_rows(table, &idx)?);
    }
    if parts.len() == 1 {
        return Ok(parts[0]);
    }
    tape.concat(&parts, 1)
}

/// In-batch item negatives: distinct batch items other than `positive`.
pub fn sample_negative_items(batch: &[usize], positive: usize) -> Vec<usize> {
    let mut out: Vec<usize> = batch.iter().copied().filter(|&i| i != positive).collect();
    out.sort_unstable();
    out.dedup();
    if out.is_empty() {
        log::warn!("no in-batch item negatives for item {positive}; only interest negatives remain");
    }
    out
}

/// Hard negatives (most probable codes other than `m_star`) followed by
/// easy negatives drawn uniformly without replacement from the rest.
pub fn sample_negative_interests(
    probs: &[f64],
    m_star: usize,
    n_hard: usize,
    n_easy: usize,
    rng: &mut impl Rng,
) -> Result<Vec<usize>> {
    let cap = probs.len();
    if n_hard + n_easy >= cap {
        return Err(Error::Config(format!(
            "n_hard + n_easy = {} must be below the {cap} interests",
            n_hard + n_easy
        )));
    }
    let mut out: Vec<usize> = top_k_flat(probs, n_hard + 1)
        .into_iter()
        .filter(|&f| f != m_star)
        .take(n_hard)
        .collect();
    let mut excluded = out.clone();
    excluded.push(m_star);
    excluded.sort_unstable();
    let pool = cap - excluded.len();
    for k in rand::seq::index::sample(rng, pool, n_easy).into_iter() {
        // Map the k-th allowed index back to a code by skipping excluded ones.
        let mut f = k;
        for &e in &excluded {
            if e <= f {
                f += 1;
            } else {
                break;
            }
        }
        out.push(f);
    }
    Ok(out)
}

/// One training tuple per event.
#[derive(Clone, Debug)]
pub struct MirmExample {
    pub user: UserInput,
    pub positive: usize,
    pub code: InterestCode,
    pub interest_negatives: Vec<InterestCode>,
}

/// Mean softmax loss over the batch: each event's positive score against its
/// in-batch item negatives and its interest negatives. Without a fusion net
/// the user vector is scored directly and codes are ignored.
pub fn mirm_loss(tape: &mut Tape, towers: &Towers, dict: Option<&Dictionary>, batch: &[MirmExample]) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::Usage("empty training batch".into()));
    }
    let b = batch.len();
    let positives: Vec<usize> = batch.iter().map(|e| e.positive).collect();
    let mut uniq = positives.clone();
    uniq.sort_unstable();
    uniq.dedup();
    let n_u = uniq.len();
    let pos_col: Vec<usize> = positives
        .iter()
        .map(|p| uniq.binary_search(p).expect("present"))
        .collect();
    let v = towers.item_vectors(tape, &uniq)?;
    let users: Vec<UserInput> = batch.iter().map(|e| e.user.clone()).collect();
    let u = towers.user_vectors(tape, &users)?;
    let fused = if let Some(dict) = dict.filter(|_| towers.fusion.is_some()) {
        let pos_codes: Vec<&InterestCode> = batch.iter().map(|e| &e.code).collect();
        let e_pos = code_vectors(tape, dict, &pos_codes)?;
        towers.fuse(tape, e_pos, u)?
    } else {
        if towers.fusion.is_some() {
            return Err(Error::Usage("a fused model needs the dictionary".into()));
        }
        // Plain dual-tower: the code is ignored and the user vector scores directly.
        if batch.iter().any(|e| !e.interest_negatives.is_empty()) {
            return Err(Error::Usage("a plain dual-tower takes no interest negatives".into()));
        }
        u
    };
    let s_items = tape.matmul_bt(fused, v)?;
    let s_items = tape.reshape(s_items, vec![b * n_u])?;

    let mut owner = Vec::new();
    let mut neg_codes = Vec::new();
    for (i, e) in batch.iter().enumerate() {
        for c in &e.interest_negatives {
            owner.push(i);
            neg_codes.push(c);
        }
    }
    let all = if neg_codes.is_empty() {
        s_items
    } else {
        let dict = dict.ok_or_else(|| Error::Usage("interest negatives need a dictionary".into()))?;
        let e_neg = code_vectors(tape, dict, &neg_codes)?;
        let u_rep = tape.gather_rows(u, &owner)?;
        let f_neg = towers.fuse(tape, e_neg, u_rep)?;
        let rows: Vec<usize> = owner.iter().map(|&i| pos_col[i]).collect();
        let v_rep = tape.gather_rows(v, &rows)?;
        let s_neg = tape.row_dot(f_neg, v_rep)?;
        tape.concat(&[s_items, s_neg], 0)?
    };

    let mut total: Option<Var> = None;
    let mut neg_offset = b * n_u;
    for (i, e) in batch.iter().enumerate() {
        let pos = i * n_u + pos_col[i];
        let mut idx = vec![pos];
        for j in 0..n_u {
            if j != pos_col[i] {
                idx.push(i * n_u + j);
            }
        }
        for _ in &e.interest_negatives {
            idx.push(neg_offset);
            neg_offset += 1;
        }
        let scores = tape.gather(all, &idx)?;
        let lse = tape.logsumexp(scores);
        let pos_score = tape.gather(all, &[pos])?;
        let term = tape.sub(lse, pos_score)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
    }
    Ok(tape.scale(total.expect("non-empty batch"), 1.0 / b as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn item_negative_rules() {
        assert_eq!(sample_negative_items(&[0, 1, 2], 0), vec![1, 2]);
        assert_eq!(sample_negative_items(&[0, 0, 1], 0), vec![1]);
        assert!(sample_negative_items(&[0], 0).is_empty());
    }

    #[test]
    fn interest_negative_rules() {
        let mut r = rng::stream(0, 0);
        assert!(sample_negative_interests(&[0.25; 4], 0, 0, 0, &mut r).unwrap().is_empty());
        let mut onehot = vec![0.0; 8];
        onehot[3] = 1.0;
        let hard = sample_negative_interests(&onehot, 3, 2, 0, &mut r).unwrap();
        assert_eq!(hard, vec![0, 1]);
        assert!(sample_negative_interests(&[0.25; 4], 0, 2, 2, &mut r).is_err());
    }

    #[test]
    fn easy_negatives_are_distinct_and_exclude_positive_and_hard() {
        let mut r = rng::stream(4, 0);
        let probs: Vec<f64> = (0..16).map(|i| i as f64 / 120.0).collect();
        for _ in 0..1000 {
            let m = r.gen_range(0..16);
            let negs = sample_negative_interests(&probs, m, 3, 9, &mut r).unwrap();
            assert_eq!(negs.len(), 12);
            assert!(!negs.contains(&m));
            let mut s = negs.clone();
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), 12);
            assert!(negs.iter().all(|&f| f < 16));
        }
    }
}
