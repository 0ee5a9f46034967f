//! Interest dictionary: residual quantization of item embeddings into
//! multi-level interest codes, the quantization loss, initialization and
//! utilization tracking.

use rand::Rng;

use crate::code::{capacity, InterestCode};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{Activation, CallCounter, Mlp};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// `C` sub-dictionaries; level `c` is an `M_c x d` table.
#[derive(Clone, Debug)]
pub struct Dictionary {
    level_sizes: Vec<usize>,
    code_dim: usize,
    pub store: ParamStore,
    levels: Vec<ParamId>,
}

impl Dictionary {
    /// All-zero dictionary; must be initialized before use.
    pub fn zeros(level_sizes: &[usize], code_dim: usize) -> Result<Self> {
        let tables = level_sizes
            .iter()
            .map(|&m| Tensor::zeros(&[m, code_dim]))
            .collect();
        Self::from_tables(tables)
    }

    pub fn from_tables(tables: Vec<Tensor>) -> Result<Self> {
        let first = tables
            .first()
            .ok_or_else(|| Error::Config("dictionary needs at least one level".into()))?;
        let code_dim = first.cols();
        let mut store = ParamStore::new();
        let mut levels = Vec::new();
        let mut level_sizes = Vec::new();
        for (c, t) in tables.into_iter().enumerate() {
            if t.shape().len() != 2 || t.cols() != code_dim || t.rows() < 2 {
                return Err(Error::Config(format!(
                    "level {c} has shape {:?}; expected [M >= 2, {code_dim}]",
                    t.shape()
                )));
            }
            level_sizes.push(t.rows());
            levels.push(store.add_row_sparse(format!("level{c}"), t));
        }
        Ok(Self {
            level_sizes,
            code_dim,
            store,
            levels,
        })
    }

    pub fn from_rows(levels: &[Vec<Vec<f64>>]) -> Result<Self> {
        let tables = levels
            .iter()
            .map(|rows| Tensor::from_rows(rows))
            .collect::<Result<Vec<_>>>()?;
        Self::from_tables(tables)
    }

    pub fn level_sizes(&self) -> &[usize] {
        &self.level_sizes
    }

    pub fn num_levels(&self) -> usize {
        self.level_sizes.len()
    }

    pub fn code_dim(&self) -> usize {
        self.code_dim
    }

    pub fn capacity(&self) -> usize {
        capacity(&self.level_sizes)
    }

    pub fn level_id(&self, c: usize) -> ParamId {
        self.levels[c]
    }

    pub fn level(&self, c: usize) -> &Tensor {
        self.store.get(self.levels[c])
    }

    pub fn set_level(&mut self, c: usize, t: Tensor) -> Result<()> {
        self.store.set(self.levels[c], t)
    }

    pub fn is_finite(&self) -> bool {
        (0..self.num_levels()).all(|c| self.level(c).is_finite())
    }

    /// Index of the level-`c` row nearest to `r` in squared Euclidean
    /// distance, lowest index on ties, together with that distance.
    pub fn nearest(&self, c: usize, r: &[f64]) -> (usize, f64) {
        nearest_row(self.level(c), r)
    }

    /// Concatenation of the selected rows of every level.
    pub fn code_vector(&self, levels: &[usize]) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_levels() * self.code_dim);
        for (c, &m) in levels.iter().enumerate() {
            out.extend_from_slice(self.level(c).row(m));
        }
        out
    }

    /// Residual quantization of a code-space vector.
    pub fn quantize_residual(&self, r1: &[f64]) -> Quantized {
        let mut r = r1.to_vec();
        let mut levels = Vec::with_capacity(self.num_levels());
        let mut residuals = Vec::with_capacity(self.num_levels());
        for c in 0..self.num_levels() {
            let (m, _) = self.nearest(c, &r);
            let e = self.level(c).row(m);
            let next: Vec<f64> = r.iter().zip(e).map(|(a, b)| a - b).collect();
            residuals.push(std::mem::replace(&mut r, next));
            levels.push(m);
        }
        let code_vec = self.code_vector(&levels);
        let flat = crate::code::flatten(&levels, &self.level_sizes).expect("levels in range");
        Quantized {
            code: InterestCode { levels, flat },
            code_vec,
            residuals,
        }
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub(crate) fn nearest_row(table: &Tensor, r: &[f64]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for j in 0..table.rows() {
        let d = sq_dist(table.row(j), r);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Output of [`Idmm::quantize`].
#[derive(Clone, Debug, PartialEq)]
pub struct Quantized {
    pub code: InterestCode,
    /// Concatenated selected code rows, length `C * d`.
    pub code_vec: Vec<f64>,
    /// `r_1 .. r_C`; `r_1` is the encoder output.
    pub residuals: Vec<Vec<f64>>,
}

/// Result of recording the quantization loss on a tape.
#[derive(Debug)]
pub struct IdmmLoss {
    pub loss: Var,
    pub codes: Vec<InterestCode>,
}

/// Dictionary plus the encoder/decoder pair around it.
#[derive(Clone, Debug)]
pub struct Idmm {
    pub dict: Dictionary,
    pub nets: ParamStore,
    pub encoder: Mlp,
    pub decoder: Mlp,
    item_dim: usize,
    initialized: bool,
    usage: Vec<Vec<u64>>,
    quantizations: u64,
    calls: CallCounter,
}

impl Idmm {
    pub fn new(item_dim: usize, cfg: &ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        let dict = Dictionary::zeros(&cfg.level_sizes, cfg.code_dim)?;
        let mut nets = ParamStore::new();
        let encoder = Mlp::new(
            &mut nets,
            "encoder",
            item_dim,
            &cfg.encoder_layers,
            Activation::LeakyRelu,
            rng,
        );
        let mut dec_sizes = cfg.decoder_layers.clone();
        dec_sizes.push(item_dim);
        let decoder = Mlp::new(
            &mut nets,
            "decoder",
            cfg.level_sizes.len() * cfg.code_dim,
            &dec_sizes,
            Activation::LeakyRelu,
            rng,
        );
        Ok(Self::assemble(dict, nets, encoder, decoder, false))
    }

    /// Builds from explicit parts; `dict` is taken as initialized.
    pub fn from_parts(dict: Dictionary, nets: ParamStore, encoder: Mlp, decoder: Mlp) -> Result<Self> {
        if encoder.out_dim() != dict.code_dim()
            || decoder.in_dim() != dict.num_levels() * dict.code_dim()
            || decoder.out_dim() != encoder.in_dim()
        {
            return Err(Error::Config(format!(
                "encoder {}->{} / decoder {}->{} do not fit a {}x{} dictionary",
                encoder.in_dim(),
                encoder.out_dim(),
                decoder.in_dim(),
                decoder.out_dim(),
                dict.num_levels(),
                dict.code_dim()
            )));
        }
        Ok(Self::assemble(dict, nets, encoder, decoder, true))
    }

    fn assemble(dict: Dictionary, nets: ParamStore, encoder: Mlp, decoder: Mlp, initialized: bool) -> Self {
        let usage = dict.level_sizes().iter().map(|&m| vec![0; m]).collect();
        Self {
            item_dim: encoder.in_dim(),
            dict,
            nets,
            encoder,
            decoder,
            initialized,
            usage,
            quantizations: 0,
            calls: CallCounter::default(),
        }
    }

    pub fn item_dim(&self) -> usize {
        self.item_dim
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub(crate) fn mark_initialized(&mut self) {
        self.initialized = true;
    }

    /// Number of encoder forward passes run so far.
    pub fn forward_calls(&self) -> usize {
        self.calls.get()
    }

    /// Encoder outputs `r_1` for a `[n, item_dim]` batch.
    pub fn encode(&self, items: &Tensor) -> Result<Tensor> {
        self.calls.bump();
        self.encoder.eval(&self.nets, items.clone())
    }

    pub fn quantize(&self, v: &[f64]) -> Result<Quantized> {
        let batch = Tensor::new(vec![1, v.len()], v.to_vec())?;
        Ok(self.quantize_batch(&batch)?.pop().expect("one row"))
    }

    pub fn quantize_batch(&self, items: &Tensor) -> Result<Vec<Quantized>> {
        if !self.initialized {
            return Err(Error::State("interest dictionary is not initialized".into()));
        }
        if !items.is_finite() {
            return Err(Error::Input("item embedding is not finite".into()));
        }
        if items.cols() != self.item_dim {
            return Err(Error::Shape {
                op: "quantize",
                shapes: vec![items.shape().to_vec(), vec![self.item_dim]],
            });
        }
        let r1 = self.encode(items)?;
        Ok((0..r1.rows())
            .map(|i| self.dict.quantize_residual(r1.row(i)))
            .collect())
    }

    /// Quantizes and records the chosen indices in the utilization window.
    pub fn quantize_tracked(&mut self, items: &Tensor) -> Result<Vec<Quantized>> {
        let q = self.quantize_batch(items)?;
        for x in &q {
            self.record(&x.code);
        }
        Ok(q)
    }

    pub fn record(&mut self, code: &InterestCode) {
        for (c, &m) in code.levels.iter().enumerate() {
            self.usage[c][m] += 1;
        }
        self.quantizations += 1;
    }

    pub fn reset_usage(&mut self) {
        for u in &mut self.usage {
            u.fill(0);
        }
        self.quantizations = 0;
    }

    pub(crate) fn usage_counts(&self) -> &[Vec<u64>] {
        &self.usage
    }

    pub(crate) fn restore_usage(&mut self, usage: Vec<Vec<u64>>, quantizations: u64) -> Result<()> {
        let fits = usage.len() == self.usage.len()
            && usage.iter().zip(&self.usage).all(|(a, b)| a.len() == b.len());
        if !fits {
            return Err(Error::Integrity("usage counters do not match the dictionary".into()));
        }
        self.usage = usage;
        self.quantizations = quantizations;
        Ok(())
    }

    pub fn quantizations(&self) -> u64 {
        self.quantizations
    }

    /// Mean over levels of the fraction of rows selected at least once since
    /// the last reset; `None` before any quantization.
    pub fn utilization(&self) -> Option<f64> {
        utilization_of(&self.usage, self.quantizations)
    }

    /// Records the quantization loss for a `[B, item_dim]` batch, averaged
    /// over the batch. Codes are chosen from the current values.
    pub fn loss(&self, tape: &mut Tape, items: Var, beta: f64) -> Result<IdmmLoss> {
        if !self.initialized {
            return Err(Error::State("interest dictionary is not initialized".into()));
        }
        self.calls.bump();
        let batch = tape.value(items).rows();
        let v = tape.stop_gradient(items);
        let mut r = self.encoder.forward(tape, &self.nets, v)?;
        let mut ste_parts = Vec::with_capacity(self.dict.num_levels());
        let mut terms = Vec::new();
        let mut level_idx: Vec<Vec<usize>> = Vec::new();
        for c in 0..self.dict.num_levels() {
            let rv = tape.value(r);
            let idx: Vec<usize> = (0..batch).map(|i| self.dict.nearest(c, rv.row(i)).0).collect();
            let table = tape.param(&self.dict.store, self.dict.level_id(c));
            let e = tape.gather_rows(table, &idx)?;
            ste_parts.push(tape.straight_through(r, e)?);
            let r_sg = tape.stop_gradient(r);
            let d_code = tape.sub(r_sg, e)?;
            terms.push(tape.l2_norm_sq(d_code));
            let e_sg = tape.stop_gradient(e);
            let d_commit = tape.sub(r, e_sg)?;
            let commit = tape.l2_norm_sq(d_commit);
            terms.push(tape.scale(commit, beta));
            r = tape.sub(r, e_sg)?;
            level_idx.push(idx);
        }
        let c_hat = tape.concat(&ste_parts, 1)?;
        let recon = self.decoder.forward(tape, &self.nets, c_hat)?;
        let d_rec = tape.sub(v, recon)?;
        let mut total = tape.l2_norm_sq(d_rec);
        for t in terms {
            total = tape.add(total, t)?;
        }
        let loss = tape.scale(total, 1.0 / batch as f64);
        let sizes = self.dict.level_sizes();
        let codes = (0..batch)
            .map(|i| {
                let levels: Vec<usize> = level_idx.iter().map(|l| l[i]).collect();
                InterestCode::from_levels(levels, sizes)
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(IdmmLoss { loss, codes })
    }

    /// Level-by-level k-means on the residuals of `items`.
    pub fn init_kmeans(&mut self, items: &Tensor, rng: &mut impl Rng) -> Result<()> {
        self.init_with_presets(items, &[], rng)
    }

    /// Presets the first `G` rows of level 1 to `centroids` (given in code
    /// space) and k-means-initializes everything else.
    pub fn init_preset_categories(
        &mut self,
        items: &Tensor,
        centroids: &[Vec<f64>],
        rng: &mut impl Rng,
    ) -> Result<()> {
        if centroids.len() > self.dict.level_sizes()[0] {
            return Err(Error::Config(format!(
                "{} preset categories exceed the {} rows of the first sub-dictionary",
                centroids.len(),
                self.dict.level_sizes()[0]
            )));
        }
        if centroids.iter().any(|c| c.len() != self.dict.code_dim()) {
            return Err(Error::Config("preset centroid dimension differs from code_dim".into()));
        }
        self.init_with_presets(items, centroids, rng)
    }

    fn init_with_presets(&mut self, items: &Tensor, presets: &[Vec<f64>], rng: &mut impl Rng) -> Result<()> {
        let max_m = *self.dict.level_sizes().iter().max().expect("non-empty");
        if items.rows() < max_m {
            return Err(Error::Config(format!(
                "initialization batch has {} items, the largest sub-dictionary needs {max_m}",
                items.rows()
            )));
        }
        let r1 = self.encode(items)?;
        let mut points: Vec<Vec<f64>> = (0..r1.rows()).map(|i| r1.row(i).to_vec()).collect();
        for c in 0..self.dict.num_levels() {
            let m = self.dict.level_sizes()[c];
            let fixed = if c == 0 { presets } else { &[][..] };
            let centroids = kmeans(&points, m, fixed, rng);
            let table = Tensor::from_rows(&centroids)?;
            for p in &mut points {
                let (j, _) = nearest_row(&table, p);
                for (x, e) in p.iter_mut().zip(table.row(j)) {
                    *x -= e;
                }
            }
            self.dict.set_level(c, table)?;
        }
        self.initialized = true;
        Ok(())
    }

    /// Every code entry drawn from U(-1, 1).
    pub fn init_uniform(&mut self, rng: &mut impl Rng) -> Result<()> {
        for c in 0..self.dict.num_levels() {
            let m = self.dict.level_sizes()[c];
            let d = self.dict.code_dim();
            let data = (0..m * d).map(|_| rng.gen_range(-1.0..1.0)).collect();
            self.dict.set_level(c, Tensor::new(vec![m, d], data)?)?;
        }
        self.initialized = true;
        Ok(())
    }
}

pub(crate) fn utilization_of(usage: &[Vec<u64>], quantizations: u64) -> Option<f64> {
    if quantizations == 0 {
        return None;
    }
    let per_level: f64 = usage
        .iter()
        .map(|u| u.iter().filter(|&&n| n > 0).count() as f64 / u.len() as f64)
        .sum();
    Some(per_level / usage.len() as f64)
}

const KMEANS_MAX_ITERS: usize = 100;
const KMEANS_TOL: f64 = 1e-6;

/// Lloyd's k-means with k-means++ seeding. The first `fixed.len()` centroids
/// are pinned and never move; only the remaining ones are seeded and updated.
/// An emptied free cluster is re-seeded at the point farthest from its
/// nearest centroid.
pub fn kmeans(points: &[Vec<f64>], k: usize, fixed: &[Vec<f64>], rng: &mut impl Rng) -> Vec<Vec<f64>> {
    assert!(fixed.len() <= k && points.len() >= k.saturating_sub(fixed.len()));
    let mut centroids: Vec<Vec<f64>> = fixed.to_vec();
    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| centroids.iter().map(|c| sq_dist(p, c)).fold(f64::INFINITY, f64::min))
        .collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().filter(|x| x.is_finite()).sum();
        let pick = if centroids.is_empty() || !(total > 0.0) {
            rng.gen_range(0..points.len())
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, &w) in d2.iter().enumerate() {
                if target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            chosen
        };
        let c = points[pick].clone();
        for (p, d) in points.iter().zip(&mut d2) {
            *d = d.min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    let dim = points.first().map_or(0, |p| p.len());
    let n_fixed = fixed.len();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        let mut nearest_d = Vec::with_capacity(points.len());
        for p in points {
            let mut best = (0, f64::INFINITY);
            for (j, c) in centroids.iter().enumerate() {
                let d = sq_dist(p, c);
                if d < best.1 {
                    best = (j, d);
                }
            }
            counts[best.0] += 1;
            for (s, x) in sums[best.0].iter_mut().zip(p) {
                *s += x;
            }
            nearest_d.push(best.1);
        }
        let mut shift: f64 = 0.0;
        for j in n_fixed..k {
            let new = if counts[j] > 0 {
                sums[j].iter().map(|s| s / counts[j] as f64).collect()
            } else {
                let far = nearest_d
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (i, &d)| if d > acc.1 { (i, d) } else { acc })
                    .0;
                nearest_d[far] = 0.0;
                points[far].clone()
            };
            shift = shift.max(sq_dist(&new, &centroids[j]).sqrt());
            centroids[j] = new;
        }
        if shift < KMEANS_TOL {
            break;
        }
    }
    centroids
}
