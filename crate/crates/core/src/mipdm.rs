//! User-conditioned decoder-only transformer predicting a distribution over
//! every flat interest code for the next interaction.

use rand::Rng;

use crate::code::{capacity, InterestCode};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{normal_table, Activation, CallCounter, Linear};
use crate::tensor::{softmax_rows, ParamId, ParamStore, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-5;
const EMBED_STD: f64 = 0.02;

/// One input sequence: the user's categorical features and chronological item ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SeqInput {
    pub features: Vec<usize>,
    pub items: Vec<usize>,
}

#[derive(Clone, Debug)]
struct LayerNorm {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNorm {
    fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let ones = Tensor::vector(vec![1.0; dim]);
        Self {
            gamma: store.add(format!("{name}.gamma"), ones),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[dim])),
        }
    }

    fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.layer_norm(x, g, b, LN_EPS)
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    qkv: Linear,
    proj: Linear,
    ln2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

#[derive(Clone, Debug)]
pub struct Mipdm {
    pub store: ParamStore,
    feat_emb: Vec<ParamId>,
    feat_vocab: Vec<usize>,
    cond: Linear,
    item_proj: Linear,
    pos: ParamId,
    blocks: Vec<Block>,
    ln_f: LayerNorm,
    head: Linear,
    n_heads: usize,
    hidden: usize,
    max_seq_len: usize,
    level_sizes: Vec<usize>,
    calls: CallCounter,
}

impl Mipdm {
    /// `feat_vocab[f]` is the number of known values of user feature `f`;
    /// one extra out-of-vocabulary row is reserved per feature.
    pub fn new(
        cfg: &ModelConfig,
        feat_vocab: &[usize],
        item_dim: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let h = cfg.gpt_hidden;
        if cfg.gpt_heads == 0 || h % cfg.gpt_heads != 0 {
            return Err(Error::Config(format!(
                "gpt_hidden {h} is not divisible by gpt_heads {}",
                cfg.gpt_heads
            )));
        }
        let mut store = ParamStore::new();
        let feat_emb = feat_vocab
            .iter()
            .enumerate()
            .map(|(f, &v)| store.add_row_sparse(format!("feature{f}"), normal_table(v + 1, h, EMBED_STD, rng)))
            .collect();
        let cond = Linear::new(&mut store, "condition", h, h, rng);
        let item_proj = Linear::new(&mut store, "item_proj", item_dim, h, rng);
        let pos = store.add("position", normal_table(cfg.max_seq_len, h, EMBED_STD, rng));
        let blocks = (0..cfg.gpt_layers)
            .map(|l| Block {
                ln1: LayerNorm::new(&mut store, &format!("block{l}.ln1"), h),
                qkv: Linear::new(&mut store, &format!("block{l}.qkv"), h, 3 * h, rng),
                proj: Linear::new(&mut store, &format!("block{l}.proj"), h, h, rng),
                ln2: LayerNorm::new(&mut store, &format!("block{l}.ln2"), h),
                fc1: Linear::new(&mut store, &format!("block{l}.fc1"), h, 4 * h, rng),
                fc2: Linear::new(&mut store, &format!("block{l}.fc2"), 4 * h, h, rng),
            })
            .collect();
        let ln_f = LayerNorm::new(&mut store, "ln_f", h);
        let p = capacity(&cfg.level_sizes);
        let head = Linear {
            weight: store.add("head.weight", normal_table(h, p, EMBED_STD, rng)),
            bias: store.add("head.bias", Tensor::zeros(&[p])),
            in_dim: h,
            out_dim: p,
        };
        Ok(Self {
            store,
            feat_emb,
            feat_vocab: feat_vocab.to_vec(),
            cond,
            item_proj,
            pos,
            blocks,
            ln_f,
            head,
            n_heads: cfg.gpt_heads,
            hidden: h,
            max_seq_len: cfg.max_seq_len,
            level_sizes: cfg.level_sizes.clone(),
            calls: CallCounter::default(),
        })
    }

    pub fn num_interests(&self) -> usize {
        self.head.out_dim
    }

    pub fn level_sizes(&self) -> &[usize] {
        &self.level_sizes
    }

    /// Longest item sequence consumed; older items are dropped.
    pub fn max_items(&self) -> usize {
        self.max_seq_len - 1
    }

    pub fn forward_calls(&self) -> usize {
        self.calls.get()
    }

    fn feature_rows(&self, f: usize, inputs: &[SeqInput]) -> Vec<usize> {
        let oov = self.feat_vocab[f];
        inputs
            .iter()
            .map(|s| s.features.get(f).copied().filter(|&x| x < oov).unwrap_or(oov))
            .collect()
    }

    /// Condition tokens `[B, hidden]`: summed feature embeddings through one
    /// linear layer.
    pub fn encode_condition(&self, tape: &mut Tape, inputs: &[SeqInput]) -> Result<Var> {
        let mut sum: Option<Var> = None;
        for f in 0..self.feat_emb.len() {
            let table = tape.param(&self.store, self.feat_emb[f]);
            let rows = tape.gather_rows(table, &self.feature_rows(f, inputs))?;
            sum = Some(match sum {
                None => rows,
                Some(s) => tape.add(s, rows)?,
            });
        }
        let sum = match sum {
            Some(s) => s,
            None => tape.constant(Tensor::zeros(&[inputs.len(), self.hidden])),
        };
        self.cond.forward(tape, &self.store, sum)
    }

    /// Next-interest logits `[B, prod M_c]`. `item_table` is the shared item
    /// embedding table and is read through a stop-gradient.
    pub fn logits(
        &self,
        tape: &mut Tape,
        item_table: Var,
        inputs: &[SeqInput],
        zero_condition: bool,
    ) -> Result<Var> {
        let (x, spans) = self.trunk(tape, item_table, inputs, zero_condition)?;
        let last: Vec<usize> = spans.iter().map(|&(start, len)| start + len - 1).collect();
        let x = tape.gather_rows(x, &last)?;
        let x = self.ln_f.forward(tape, &self.store, x)?;
        self.head.forward(tape, &self.store, x)
    }

    /// Logits at every position of one sequence (condition token first).
    pub fn position_logits(&self, item_table: &Tensor, input: &SeqInput) -> Result<Tensor> {
        let mut tape = Tape::new();
        let table = tape.constant(item_table.clone());
        let (x, _) = self.trunk(&mut tape, table, std::slice::from_ref(input), false)?;
        let x = self.ln_f.forward(&mut tape, &self.store, x)?;
        let l = self.head.forward(&mut tape, &self.store, x)?;
        Ok(tape.value(l).clone())
    }

    fn trunk(
        &self,
        tape: &mut Tape,
        item_table: Var,
        inputs: &[SeqInput],
        zero_condition: bool,
    ) -> Result<(Var, Vec<(usize, usize)>)> {
        if inputs.is_empty() {
            return Err(Error::Usage("empty sequence batch".into()));
        }
        self.calls.bump();
        let h = self.hidden;
        let b = inputs.len();
        let cond = if zero_condition {
            tape.constant(Tensor::zeros(&[b, h]))
        } else {
            self.encode_condition(tape, inputs)?
        };
        let n_items = tape.shape(item_table)[0];
        let seqs: Vec<&[usize]> = inputs
            .iter()
            .map(|s| &s.items[s.items.len().saturating_sub(self.max_items())..])
            .collect();
        let flat_items: Vec<usize> = seqs.iter().flat_map(|s| s.iter().copied()).collect();
        if let Some(&bad) = flat_items.iter().find(|&&i| i >= n_items) {
            return Err(Error::Input(format!("item {bad} outside the embedding table")));
        }
        // Token rows: conditions first, then every sequence's items.
        let tokens = if flat_items.is_empty() {
            cond
        } else {
            let table = tape.stop_gradient(item_table);
            let emb = tape.gather_rows(table, &flat_items)?;
            let proj = self.item_proj.forward(tape, &self.store, emb)?;
            tape.concat(&[cond, proj], 0)?
        };
        let mut order = Vec::with_capacity(b + flat_items.len());
        let mut positions = Vec::with_capacity(order.capacity());
        let mut spans = Vec::with_capacity(b);
        let mut item_row = b;
        for (i, s) in seqs.iter().enumerate() {
            spans.push((order.len(), s.len() + 1));
            order.push(i);
            positions.push(0);
            for p in 0..s.len() {
                order.push(item_row);
                positions.push(p + 1);
                item_row += 1;
            }
        }
        let x = tape.gather_rows(tokens, &order)?;
        let pos_table = tape.param(&self.store, self.pos);
        let pos = tape.gather_rows(pos_table, &positions)?;
        let mut x = tape.add(x, pos)?;
        for block in &self.blocks {
            x = self.block(tape, block, x, &spans)?;
        }
        Ok((x, spans))
    }

    fn block(&self, tape: &mut Tape, blk: &Block, x: Var, spans: &[(usize, usize)]) -> Result<Var> {
        let h = self.hidden;
        let dh = h / self.n_heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let a = blk.ln1.forward(tape, &self.store, x)?;
        let qkv = blk.qkv.forward(tape, &self.store, a)?;
        let heads: Vec<[Var; 3]> = (0..self.n_heads)
            .map(|hd| -> Result<[Var; 3]> {
                Ok([
                    tape.slice_cols(qkv, hd * dh, dh)?,
                    tape.slice_cols(qkv, h + hd * dh, dh)?,
                    tape.slice_cols(qkv, 2 * h + hd * dh, dh)?,
                ])
            })
            .collect::<Result<_>>()?;
        let mut seq_out = Vec::with_capacity(spans.len());
        for &(start, len) in spans {
            let rows: Vec<usize> = (start..start + len).collect();
            let mut head_out = Vec::with_capacity(self.n_heads);
            for [q, k, v] in &heads {
                let q = tape.gather_rows(*q, &rows)?;
                let k = tape.gather_rows(*k, &rows)?;
                let v = tape.gather_rows(*v, &rows)?;
                let s = tape.matmul_bt(q, k)?;
                let s = tape.scale(s, scale);
                let s = tape.causal_mask(s)?;
                let p = tape.softmax(s);
                head_out.push(tape.matmul(p, v)?);
            }
            seq_out.push(tape.concat(&head_out, 1)?);
        }
        let att = tape.concat(&seq_out, 0)?;
        let att = blk.proj.forward(tape, &self.store, att)?;
        let x = tape.add(x, att)?;
        let m = blk.ln2.forward(tape, &self.store, x)?;
        let m = blk.fc1.forward(tape, &self.store, m)?;
        let m = Activation::Gelu.apply(tape, m);
        let m = blk.fc2.forward(tape, &self.store, m)?;
        tape.add(x, m)
    }

    /// Mean cross-entropy of the target flat codes.
    pub fn loss(&self, tape: &mut Tape, item_table: Var, inputs: &[SeqInput], targets: &[usize]) -> Result<Var> {
        let logits = self.logits(tape, item_table, inputs, false)?;
        tape.softmax_cross_entropy(logits, targets)
    }

    /// Next-interest distributions, one per input.
    pub fn predict(&self, item_table: &Tensor, inputs: &[SeqInput], zero_condition: bool) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let table = tape.constant(item_table.clone());
        let logits = self.logits(&mut tape, table, inputs, zero_condition)?;
        let l = tape.value(logits);
        let p = softmax_rows(l.data(), l.cols());
        Ok(p.chunks(l.cols()).map(|c| c.to_vec()).collect())
    }
}

/// Indices of the `k` largest probabilities, descending, lower index first on ties.
pub fn top_k_flat(probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    let cmp = |a: &usize, b: &usize| probs[*b].total_cmp(&probs[*a]).then(a.cmp(b));
    let k = k.min(idx.len());
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx.truncate(k);
    idx
}

/// Top-`k` interest codes of a distribution.
pub fn top_k_interests(probs: &[f64], k: usize, level_sizes: &[usize]) -> Result<Vec<InterestCode>> {
    if k > probs.len() {
        return Err(Error::Input(format!("k = {k} exceeds {} interests", probs.len())));
    }
    top_k_flat(probs, k)
        .into_iter()
        .map(|f| InterestCode::from_flat(f, level_sizes))
        .collect()
}

/// Shannon entropy in nats.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn tiny() -> (Mipdm, Tensor) {
        let mut cfg = crate::Config::desk().model;
        cfg.max_seq_len = 6;
        let mut r = rng::stream(11, 0);
        let m = Mipdm::new(&cfg, &[3, 2], 4, &mut r).unwrap();
        let table = normal_table(10, 4, 1.0, &mut r);
        (m, table)
    }

    #[test]
    fn top_k_tie_rule() {
        assert_eq!(top_k_flat(&[0.1, 0.4, 0.4, 0.1], 2), vec![1, 2]);
        assert_eq!(top_k_flat(&[0.0, 1.0, 0.0], 1), vec![1]);
        let all = top_k_flat(&[0.25; 4], 4);
        assert_eq!(all, vec![0, 1, 2, 3]);
    }

    #[test]
    fn distributions_are_normalized() {
        let (m, table) = tiny();
        let inputs = vec![
            SeqInput { features: vec![0, 1], items: vec![] },
            SeqInput { features: vec![2, 0], items: vec![1, 2, 3, 4, 5, 6, 7, 8] },
        ];
        for p in m.predict(&table, &inputs, false).unwrap() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(p.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn oov_and_identical_features() {
        let (m, table) = tiny();
        let a = SeqInput { features: vec![9, 9], items: vec![1] };
        let b = SeqInput { features: vec![3, 2], items: vec![1] };
        let c = SeqInput { features: vec![], items: vec![1] };
        let p = m.predict(&table, &[a, b, c], false).unwrap();
        assert_eq!(p[0], p[1]);
        assert_eq!(p[0], p[2]);
    }

    #[test]
    fn causal_last_position_ignores_batchmates_and_is_order_aware() {
        let (m, table) = tiny();
        let s1 = SeqInput { features: vec![0, 0], items: vec![1, 2, 3] };
        let s2 = SeqInput { features: vec![0, 0], items: vec![1, 3, 2] };
        let p = m.predict(&table, &[s1.clone(), s2], false).unwrap();
        assert_ne!(p[0], p[1]);
        let alone = m.predict(&table, &[s1], false).unwrap();
        assert_eq!(alone[0], p[0]);
    }

    #[test]
    fn appending_items_leaves_earlier_positions_unchanged() {
        let (m, table) = tiny();
        let short = SeqInput { features: vec![1, 0], items: vec![4, 2, 7] };
        let long = SeqInput { features: vec![1, 0], items: vec![4, 2, 7, 9] };
        let a = m.position_logits(&table, &short).unwrap();
        let b = m.position_logits(&table, &long).unwrap();
        for pos in 0..4 {
            assert_eq!(a.row(pos), b.row(pos));
        }
    }

    #[test]
    fn loss_gradient_reaches_features_not_item_table() {
        let (m, table) = tiny();
        let mut tape = Tape::new();
        let t = tape.leaf(table, true);
        let inputs = [SeqInput { features: vec![1, 1], items: vec![2, 4] }];
        let loss = m.loss(&mut tape, t, &inputs, &[5]).unwrap();
        let g = tape.backward(loss).unwrap();
        assert!(g.wrt(t).data().iter().all(|&x| x == 0.0));
        let fv = tape.param(&m.store, m.feat_emb[0]);
        assert!(g.wrt(fv).row(1).iter().any(|&x| x != 0.0));
    }
}
