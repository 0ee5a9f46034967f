//! Sectioned binary checkpoints.
//!
//! Layout (little-endian): an 8-byte magic, a `u32` format version, a `u32`
//! section count, then one table entry per section (`u8` name length, name,
//! `u64` offset, `u64` length, `u32` CRC-32 of the payload), a CRC-32 of
//! everything before it, and the payloads back to back. The file must end
//! exactly where the last payload ends, so any truncation, extension or
//! flipped byte is caught before a model is built.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use crate::code::InterestCode;
use crate::config::Config;
use crate::error::{Error, Result};
use crate::idmm::Dictionary;
use crate::model::{Catalog, GemiRec};
use crate::serving::CachedInterest;
use crate::tensor::{Adam, AdamConfig, ParamStore, Tensor};

pub const MAGIC: [u8; 8] = *b"GEMIREC\0";
pub const VERSION: u32 = 1;

const CONFIG: &str = "config";
const CONFIG_HASH: &str = "config_hash";
const CATALOG: &str = "catalog";
const ITEM_FEATURES: &str = "item_features";
const DICTIONARY: &str = "params/dictionary";
const NETS: &str = "params/nets";
const MIPDM: &str = "params/mipdm";
const TOWERS: &str = "params/towers";
const ADAM_DICTIONARY: &str = "adam/dictionary";
const ADAM_NETS: &str = "adam/nets";
const ADAM_MIPDM: &str = "adam/mipdm";
const ADAM_TOWERS: &str = "adam/towers";
const USAGE: &str = "idmm_usage";
const CACHE: &str = "cache";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SectionInfo {
    pub name: String,
    pub offset: u64,
    pub length: u64,
    pub crc: u32,
}

/// What a loader may accept.
#[derive(Clone, Copy, Debug, Default)]
pub struct LoadOptions<'a> {
    /// Refuse a checkpoint written under a different configuration.
    pub expected: Option<&'a Config>,
    /// Load despite a configuration mismatch.
    pub force: bool,
}

struct Writer(Vec<u8>);

impl Writer {
    fn new() -> Self {
        Self(Vec::new())
    }
    fn u8(&mut self, x: u8) {
        self.0.push(x);
    }
    fn u32(&mut self, x: u32) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn u64(&mut self, x: u64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn usize(&mut self, x: usize) {
        self.u64(x as u64);
    }
    fn f64(&mut self, x: f64) {
        self.0.extend_from_slice(&x.to_le_bytes());
    }
    fn bytes(&mut self, b: &[u8]) {
        self.usize(b.len());
        self.0.extend_from_slice(b);
    }
    fn usizes(&mut self, xs: &[usize]) {
        self.usize(xs.len());
        for &x in xs {
            self.usize(x);
        }
    }
    fn u64s(&mut self, xs: &[u64]) {
        self.usize(xs.len());
        for &x in xs {
            self.u64(x);
        }
    }
    fn tensor(&mut self, t: &Tensor) {
        self.usizes(t.shape());
        for &x in t.data() {
            self.f64(x);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Integrity(msg.into())
}

impl<'a> Reader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt("unexpected end of data"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| corrupt("length does not fit in memory"))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    /// A count of items that each occupy at least `min_size` bytes, checked
    /// against the bytes left so a corrupt count cannot drive a huge allocation.
    fn count(&mut self, min_size: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(min_size.max(1)) > self.buf.len() - self.pos {
            return Err(corrupt("count exceeds the remaining data"));
        }
        Ok(n)
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.count(1)?;
        self.take(n)
    }
    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.count(8)?;
        (0..n).map(|_| self.usize()).collect()
    }
    fn u64s(&mut self) -> Result<Vec<u64>> {
        let n = self.count(8)?;
        (0..n).map(|_| self.u64()).collect()
    }
    fn tensor(&mut self) -> Result<Tensor> {
        let shape = self.usizes()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|&n| n.saturating_mul(8) <= self.buf.len() - self.pos)
            .ok_or_else(|| corrupt("tensor larger than the remaining data"))?;
        let data = (0..n).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
        Tensor::new(shape, data).map_err(|e| corrupt(e.to_string()))
    }
    fn finish(&self, section: &str) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(corrupt(format!("trailing bytes in section `{section}`")));
        }
        Ok(())
    }
}

fn write_store(store: &ParamStore) -> Vec<u8> {
    let mut w = Writer::new();
    w.usize(store.len());
    for p in store.params() {
        w.bytes(p.name().as_bytes());
        w.tensor(p.value());
    }
    w.0
}

/// Overwrites every parameter of `store`, requiring the same names and shapes
/// in the same order.
fn read_store_into(bytes: &[u8], section: &str, store: &mut ParamStore) -> Result<()> {
    let mut r = Reader::new(bytes);
    let n = r.count(16)?;
    if n != store.len() {
        return Err(corrupt(format!(
            "section `{section}` has {n} parameters, model expects {}",
            store.len()
        )));
    }
    let mut values = Vec::with_capacity(n);
    for id in store.ids() {
        let name = r.bytes()?;
        let t = r.tensor()?;
        let p = store.param(id);
        if name != p.name().as_bytes() || t.shape() != p.value().shape() {
            return Err(corrupt(format!(
                "section `{section}`: parameter `{}` {:?} does not match the model",
                String::from_utf8_lossy(name),
                t.shape()
            )));
        }
        values.push(t);
    }
    r.finish(section)?;
    let ids: Vec<_> = store.ids().collect();
    for (id, t) in ids.into_iter().zip(values) {
        store.set(id, t)?;
    }
    Ok(())
}

fn write_adam(adam: &Adam) -> Vec<u8> {
    let mut w = Writer::new();
    let c = adam.config;
    for x in [c.lr, c.beta1, c.beta2, c.eps] {
        w.f64(x);
    }
    w.u64(adam.step_count());
    let (m, v) = adam.moments();
    w.usize(m.len());
    for t in m.iter().chain(v) {
        w.tensor(t);
    }
    w.0
}

fn read_adam(bytes: &[u8], section: &str, store: &ParamStore) -> Result<Adam> {
    let mut r = Reader::new(bytes);
    let config = AdamConfig {
        lr: r.f64()?,
        beta1: r.f64()?,
        beta2: r.f64()?,
        eps: r.f64()?,
    };
    let step = r.u64()?;
    let n = r.count(16)?;
    if n != store.len() {
        return Err(corrupt(format!("section `{section}` has {n} moment buffers")));
    }
    let read = |r: &mut Reader| -> Result<Vec<Tensor>> {
        store
            .params()
            .iter()
            .map(|p| {
                let t = r.tensor()?;
                if t.shape() != p.value().shape() {
                    return Err(corrupt(format!("section `{section}`: moment shape mismatch")));
                }
                Ok(t)
            })
            .collect()
    };
    let m = read(&mut r)?;
    let v = read(&mut r)?;
    r.finish(section)?;
    Ok(Adam::from_parts(config, step, m, v))
}

fn write_catalog(model: &GemiRec) -> Vec<u8> {
    let c = &model.catalog;
    let mut w = Writer::new();
    w.u64s(&c.item_ids);
    w.u64s(&c.user_ids);
    w.usizes(&c.item_category);
    w.u64s(&c.category_ids);
    w.usizes(&c.feature_vocab);
    w.usize(model.users.len());
    for u in &model.users {
        w.usizes(&u.features);
        w.usizes(&u.history);
    }
    w.0
}

struct CatalogSection {
    catalog: Catalog,
    features: Vec<Vec<usize>>,
    histories: Vec<Vec<usize>>,
}

fn read_catalog(bytes: &[u8]) -> Result<CatalogSection> {
    let mut r = Reader::new(bytes);
    let catalog = Catalog {
        item_ids: r.u64s()?,
        user_ids: r.u64s()?,
        item_category: r.usizes()?,
        category_ids: r.u64s()?,
        feature_vocab: r.usizes()?,
    };
    let n = r.count(16)?;
    let mut features = Vec::with_capacity(n);
    let mut histories = Vec::with_capacity(n);
    for _ in 0..n {
        features.push(r.usizes()?);
        histories.push(r.usizes()?);
    }
    r.finish(CATALOG)?;
    let n_items = catalog.item_ids.len();
    let n_cats = catalog.category_ids.len();
    if catalog.item_category.len() != n_items || catalog.item_category.iter().any(|&c| c >= n_cats) {
        return Err(corrupt("item categories do not match the catalog"));
    }
    if !catalog.item_ids.windows(2).all(|w| w[0] < w[1]) || !catalog.user_ids.windows(2).all(|w| w[0] < w[1]) {
        return Err(corrupt("catalog ids are not strictly increasing"));
    }
    if n != catalog.user_ids.len() {
        return Err(corrupt("user rows do not match the catalog"));
    }
    let vocab = &catalog.feature_vocab;
    for f in &features {
        if f.len() != vocab.len() || f.iter().zip(vocab).any(|(&x, &v)| x >= v) {
            return Err(corrupt("user feature outside its vocabulary"));
        }
    }
    if histories.iter().flatten().any(|&i| i >= n_items) {
        return Err(corrupt("history refers to an unknown item"));
    }
    Ok(CatalogSection {
        catalog,
        features,
        histories,
    })
}

fn write_usage(model: &GemiRec) -> Vec<u8> {
    let mut w = Writer::new();
    w.u8(model.idmm.is_initialized() as u8);
    w.u64(model.idmm.quantizations());
    let usage = model.idmm.usage_counts();
    w.usize(usage.len());
    for level in usage {
        w.u64s(level);
    }
    w.0
}

fn write_cache(model: &GemiRec) -> Vec<u8> {
    let mut w = Writer::new();
    let snap = model.cache.snapshot();
    w.usize(snap.len());
    for (user, interests) in &snap {
        w.usize(*user);
        w.usize(interests.len());
        for c in interests.iter() {
            w.usize(c.code.flat);
            w.f64(c.prob);
        }
    }
    w.0
}

fn read_cache(bytes: &[u8], model: &GemiRec) -> Result<Vec<(usize, Vec<CachedInterest>)>> {
    let mut r = Reader::new(bytes);
    let sizes = model.cache.level_sizes().to_vec();
    let n = r.count(16)?;
    let mut out = Vec::with_capacity(n);
    let mut last = None;
    for _ in 0..n {
        let user = r.usize()?;
        if user >= model.n_users() || last.is_some_and(|l| user <= l) {
            return Err(corrupt("cache entry for an unknown or repeated user"));
        }
        last = Some(user);
        let k = r.count(16)?;
        if k != model.cache.k() {
            return Err(corrupt(format!("cache entry holds {k} interests, expected {}", model.cache.k())));
        }
        let mut interests = Vec::with_capacity(k);
        for _ in 0..k {
            let flat = r.usize()?;
            let prob = r.f64()?;
            let code = InterestCode::from_flat(flat, &sizes).map_err(|e| corrupt(e.to_string()))?;
            if !(0.0..=1.0).contains(&prob) {
                return Err(corrupt("cached interest probability outside [0, 1]"));
            }
            interests.push(CachedInterest { code, prob });
        }
        out.push((user, interests));
    }
    r.finish(CACHE)?;
    Ok(out)
}

/// Serializes the full model state.
pub fn to_bytes(model: &GemiRec) -> Vec<u8> {
    let mut sections: Vec<(&str, Vec<u8>)> = vec![
        (CONFIG, model.config.to_text().into_bytes()),
        (CONFIG_HASH, model.config.hash().to_vec()),
        (CATALOG, write_catalog(model)),
    ];
    if let Some(f) = model.towers.item_features() {
        let mut w = Writer::new();
        w.tensor(f);
        sections.push((ITEM_FEATURES, w.0));
    }
    sections.extend([
        (DICTIONARY, write_store(&model.idmm.dict.store)),
        (NETS, write_store(&model.idmm.nets)),
        (MIPDM, write_store(&model.mipdm.store)),
        (TOWERS, write_store(&model.towers.store)),
        (ADAM_DICTIONARY, write_adam(&model.optim.dictionary)),
        (ADAM_NETS, write_adam(&model.optim.nets)),
        (ADAM_MIPDM, write_adam(&model.optim.mipdm)),
        (ADAM_TOWERS, write_adam(&model.optim.towers)),
        (USAGE, write_usage(model)),
        (CACHE, write_cache(model)),
    ]);
    assemble(&sections)
}

fn assemble(sections: &[(&str, Vec<u8>)]) -> Vec<u8> {
    let table_len: usize = sections.iter().map(|(n, _)| 1 + n.len() + 8 + 8 + 4).sum();
    let mut offset = (8 + 4 + 4 + table_len + 4) as u64;
    let mut w = Writer::new();
    w.0.extend_from_slice(&MAGIC);
    w.u32(VERSION);
    w.u32(sections.len() as u32);
    for (name, payload) in sections {
        w.u8(name.len() as u8);
        w.0.extend_from_slice(name.as_bytes());
        w.u64(offset);
        w.u64(payload.len() as u64);
        w.u32(crc32fast::hash(payload));
        offset += payload.len() as u64;
    }
    let header_crc = crc32fast::hash(&w.0);
    w.u32(header_crc);
    for (_, payload) in sections {
        w.0.extend_from_slice(payload);
    }
    w.0
}

/// Parses and checks the section table; every payload's checksum is
/// verified before anything is returned.
pub fn sections(bytes: &[u8]) -> Result<Vec<SectionInfo>> {
    let mut r = Reader::new(bytes);
    if r.take(8).map_err(|_| corrupt("file too short for a checkpoint"))? != MAGIC {
        return Err(corrupt("not a checkpoint file"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version {
            found: version,
            expected: VERSION,
        });
    }
    let n = r.u32()? as usize;
    let mut table = Vec::new();
    for _ in 0..n {
        let len = r.u8()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| corrupt("section name is not UTF-8"))?
            .to_string();
        table.push(SectionInfo {
            name,
            offset: r.u64()?,
            length: r.u64()?,
            crc: r.u32()?,
        });
    }
    let header_end = r.pos;
    if crc32fast::hash(&bytes[..header_end]) != r.u32()? {
        return Err(corrupt("section table checksum mismatch"));
    }
    let mut expected = r.pos as u64;
    for s in &table {
        if s.offset != expected {
            return Err(corrupt(format!("section `{}` is not where the table says", s.name)));
        }
        let end = s.offset.checked_add(s.length).filter(|&e| e <= bytes.len() as u64);
        let end = end.ok_or_else(|| corrupt(format!("section `{}` is truncated", s.name)))?;
        if crc32fast::hash(&bytes[s.offset as usize..end as usize]) != s.crc {
            return Err(corrupt(format!("section `{}` checksum mismatch", s.name)));
        }
        expected = end;
    }
    if expected != bytes.len() as u64 {
        return Err(corrupt("trailing bytes after the last section"));
    }
    let mut names: Vec<&str> = table.iter().map(|s| s.name.as_str()).collect();
    names.sort_unstable();
    if names.windows(2).any(|w| w[0] == w[1]) {
        return Err(corrupt("duplicate section name"));
    }
    Ok(table)
}

fn section_map(bytes: &[u8]) -> Result<BTreeMap<String, &[u8]>> {
    Ok(sections(bytes)?
        .into_iter()
        .map(|s| {
            let range = s.offset as usize..(s.offset + s.length) as usize;
            (s.name, &bytes[range])
        })
        .collect())
}

fn require<'a>(map: &BTreeMap<String, &'a [u8]>, name: &str) -> Result<&'a [u8]> {
    map.get(name)
        .copied()
        .ok_or_else(|| corrupt(format!("missing section `{name}`")))
}

fn read_config(map: &BTreeMap<String, &[u8]>, opts: &LoadOptions) -> Result<Config> {
    let text = std::str::from_utf8(require(map, CONFIG)?).map_err(|_| corrupt("config is not UTF-8"))?;
    let config = Config::parse(text).map_err(|e| corrupt(format!("stored config does not parse: {e}")))?;
    let stored = require(map, CONFIG_HASH)?;
    if stored != config.hash() {
        return Err(corrupt("stored config hash does not match the stored config"));
    }
    if let Some(expected) = opts.expected {
        if expected.hash() != config.hash() && !opts.force {
            return Err(Error::Config(
                "checkpoint was written under a different configuration; pass force to load it anyway".into(),
            ));
        }
    }
    Ok(config)
}

/// Rebuilds a model. Nothing is returned unless every section checks out.
pub fn from_bytes(bytes: &[u8], opts: LoadOptions) -> Result<GemiRec> {
    let map = section_map(bytes)?;
    let config = read_config(&map, &opts)?;
    let cat = read_catalog(require(&map, CATALOG)?)?;
    let item_features = match map.get(ITEM_FEATURES) {
        None => None,
        Some(b) => {
            let mut r = Reader::new(b);
            let t = r.tensor()?;
            r.finish(ITEM_FEATURES)?;
            Some(t)
        }
    };
    let mut model = GemiRec::build(config, cat.catalog, item_features, cat.features)
        .map_err(|e| corrupt(format!("stored model does not rebuild: {e}")))?;
    read_store_into(require(&map, DICTIONARY)?, DICTIONARY, &mut model.idmm.dict.store)?;
    read_store_into(require(&map, NETS)?, NETS, &mut model.idmm.nets)?;
    read_store_into(require(&map, MIPDM)?, MIPDM, &mut model.mipdm.store)?;
    read_store_into(require(&map, TOWERS)?, TOWERS, &mut model.towers.store)?;
    model.optim.dictionary = read_adam(require(&map, ADAM_DICTIONARY)?, ADAM_DICTIONARY, &model.idmm.dict.store)?;
    model.optim.nets = read_adam(require(&map, ADAM_NETS)?, ADAM_NETS, &model.idmm.nets)?;
    model.optim.mipdm = read_adam(require(&map, ADAM_MIPDM)?, ADAM_MIPDM, &model.mipdm.store)?;
    model.optim.towers = read_adam(require(&map, ADAM_TOWERS)?, ADAM_TOWERS, &model.towers.store)?;

    let mut r = Reader::new(require(&map, USAGE)?);
    let initialized = r.u8()?;
    let quantizations = r.u64()?;
    let levels = r.count(8)?;
    let usage = (0..levels).map(|_| r.u64s()).collect::<Result<Vec<_>>>()?;
    r.finish(USAGE)?;
    if initialized > 1 {
        return Err(corrupt("bad initialization flag"));
    }
    model.idmm.restore_usage(usage, quantizations)?;
    if initialized == 1 {
        model.idmm.mark_initialized();
    }

    for (u, h) in model.users.iter_mut().zip(cat.histories) {
        u.history = h;
    }
    let entries = read_cache(require(&map, CACHE)?, &model)?;
    for (user, interests) in entries {
        model.cache.insert(user, interests);
    }
    if !model.cache.satisfies_cap() {
        return Err(corrupt("cached interests break the repetition cap"));
    }
    Ok(model)
}

/// Reads only the interest dictionary; the other sections are checksummed
/// but not decoded.
pub fn dictionary_from_bytes(bytes: &[u8]) -> Result<Dictionary> {
    let map = section_map(bytes)?;
    let mut r = Reader::new(require(&map, DICTIONARY)?);
    let n = r.count(16)?;
    let mut tables = Vec::with_capacity(n);
    for _ in 0..n {
        r.bytes()?;
        tables.push(r.tensor()?);
    }
    r.finish(DICTIONARY)?;
    Dictionary::from_tables(tables).map_err(|e| corrupt(e.to_string()))
}

/// Writes to a sibling temporary file, then renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Input(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path).inspect_err(|_| {
        let _ = std::fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn save(model: &GemiRec, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(model))
}

pub fn load(path: &Path, opts: LoadOptions) -> Result<GemiRec> {
    from_bytes(&std::fs::read(path)?, opts)
}

pub fn load_dictionary(path: &Path) -> Result<Dictionary> {
    dictionary_from_bytes(&std::fs::read(path)?)
}

/// Cached interests as `(user, interests)` pairs, for inspection.
pub fn cache_entries(model: &GemiRec) -> Vec<(usize, Arc<Vec<CachedInterest>>)> {
    model.cache.snapshot().into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Dataset;
    use crate::rng;
    use crate::synth;

    fn model() -> GemiRec {
        let mut cfg = Config::desk();
        cfg.synth.n_users = 30;
        cfg.synth.n_items = 40;
        let (data, _): (Dataset, _) = synth::generate(&cfg.synth, 2).unwrap();
        let mut m = GemiRec::new(cfg, &data).unwrap();
        let items = m.towers.all_item_vectors().unwrap();
        m.idmm.init_kmeans(&items, &mut rng::stream(0, 0)).unwrap();
        m.idmm.quantize_tracked(&items).unwrap();
        m.users[3].history = vec![1, 5, 7];
        m.refresh_cache(&[0, 3, 9]).unwrap();
        m
    }

    #[test]
    fn save_load_save_is_identical() {
        let m = model();
        let a = to_bytes(&m);
        let back = from_bytes(&a, LoadOptions::default()).unwrap();
        assert_eq!(to_bytes(&back), a);
        assert_eq!(back.cache, m.cache);
        assert_eq!(back.users, m.users);
        assert_eq!(back.idmm.utilization(), m.idmm.utilization());
    }

    #[test]
    fn every_truncation_is_rejected() {
        let bytes = to_bytes(&model());
        for len in (0..bytes.len()).step_by(97) {
            assert!(from_bytes(&bytes[..len], LoadOptions::default()).is_err(), "len {len}");
        }
    }

    #[test]
    fn flipped_bytes_are_rejected() {
        let bytes = to_bytes(&model());
        for i in (0..bytes.len()).step_by(131) {
            let mut b = bytes.clone();
            b[i] ^= 0x10;
            assert!(from_bytes(&b, LoadOptions::default()).is_err(), "byte {i}");
        }
    }

    #[test]
    fn version_mismatch_names_both_versions() {
        let mut bytes = to_bytes(&model());
        bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
        match from_bytes(&bytes, LoadOptions::default()) {
            Err(Error::Version { found: 7, expected: VERSION }) => {}
            other => panic!("unexpected {other:?}", other = other.map(|_| ())),
        }
    }

    #[test]
    fn config_mismatch_requires_force() {
        let m = model();
        let bytes = to_bytes(&m);
        let mut other = m.config.clone();
        other.train.lr *= 2.0;
        let strict = LoadOptions {
            expected: Some(&other),
            force: false,
        };
        assert!(matches!(from_bytes(&bytes, strict), Err(Error::Config(_))));
        let forced = LoadOptions {
            expected: Some(&other),
            force: true,
        };
        assert!(from_bytes(&bytes, forced).is_ok());
    }

    #[test]
    fn dictionary_loads_without_tower_sections() {
        let m = model();
        let full = to_bytes(&m);
        let map = section_map(&full).unwrap();
        let only: Vec<(&str, Vec<u8>)> = vec![(DICTIONARY, map[DICTIONARY].to_vec())];
        let dict = dictionary_from_bytes(&assemble(&only)).unwrap();
        for c in 0..dict.num_levels() {
            assert_eq!(dict.level(c), m.idmm.dict.level(c));
        }
        assert!(from_bytes(&assemble(&only), LoadOptions::default()).is_err());
    }

    #[test]
    fn atomic_write_replaces_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        std::fs::write(&path, b"old").unwrap();
        let m = model();
        save(&m, &path).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), to_bytes(&m));
        assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 1);
    }
}
