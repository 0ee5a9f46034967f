//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line and
//! then asserts it. The default desk run is trained once and shared.

#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::collections::BTreeSet;
use std::io::Write;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use gemirec::baseline::Baseline;
use gemirec::checkpoint::{self, LoadOptions};
use gemirec::code::{capacity, flatten, unflatten};
use gemirec::config::Config;
use gemirec::data::{Dataset, Split};
use gemirec::evaluation::{evaluate, evaluate_baseline, fill_cache, verify_voronoi, MetricReport, SeparationReport, Variant};
use gemirec::idmm::{Dictionary, Idmm};
use gemirec::serving::{infer, CachedInterest, InterestCache};
use gemirec::tensor::{Adam, AdamConfig, Tape, Tensor};
use gemirec::{rng, synth, trainer, GemiRec};
use rand::Rng;

/// Writes past libtest's output capture so every line shows up in a plain
/// `cargo test` run, not only for failures.
fn report(name: &str, ok: bool, detail: impl std::fmt::Display) {
    let line = format!("{} {name}: {detail}\n", if ok { "PASS" } else { "FAIL" });
    std::io::stdout().lock().write_all(line.as_bytes()).unwrap();
    assert!(ok, "{name}: {detail}");
}

struct Run {
    data: Dataset,
    split: Split,
    after_stage1: GemiRec,
    dict_stage2: Dictionary,
    model: GemiRec,
    reports: Vec<MetricReport>,
    baseline: MetricReport,
    elapsed: Duration,
}

impl Run {
    fn variant(&self, v: Variant) -> &MetricReport {
        self.reports.iter().find(|r| r.variant == v.name()).expect("variant evaluated")
    }
}

/// The default synthetic benchmark: desk model, default generator, trained
/// through all stages, every evaluation variant plus the baseline.
fn run() -> &'static Run {
    static RUN: OnceLock<Run> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let cfg = Config::desk();
        let (data, _) = synth::generate(&cfg.synth, cfg.seed).unwrap();
        let split = Split::new(&data);
        let mut model = GemiRec::new(cfg.clone(), &data).unwrap();
        let mut after_stage1 = None;
        let mut dict_stage2 = None;
        trainer::run_three_stage(&mut model, &split.train_events, |stage, m| {
            match stage {
                1 => after_stage1 = Some(m.clone()),
                2 => dict_stage2 = Some(m.idmm.dict.clone()),
                _ => {}
            }
            Ok(())
        })
        .unwrap();
        let mut reports = Vec::new();
        for v in [Variant::Full, Variant::ZeroCondition, Variant::Frequency, Variant::Identical] {
            let mut m = model.clone();
            reports.push(evaluate(&mut m, &split, &[20], v).unwrap());
        }
        let mut base = Baseline::new(&cfg, &data).unwrap();
        base.train(&split.train_events).unwrap();
        let baseline = evaluate_baseline(&mut base, &split, &data.item_category, &[20]).unwrap();
        Run {
            data,
            split,
            after_stage1: after_stage1.unwrap(),
            dict_stage2: dict_stage2.unwrap(),
            model,
            reports,
            baseline,
            elapsed: start.elapsed(),
        }
    })
}

#[test]
fn gradient_fidelity() {
    let start = Instant::now();
    let mut worst = (0.0f64, "");
    for i in 0..50 {
        let c = common::gradcheck::case(i, 2024);
        let err = common::gradcheck::max_rel_error(&c, 7 + i as u64);
        if err > worst.0 {
            worst = (err, c.name);
        }
    }
    let mut tape = Tape::new();
    let x = tape.leaf(Tensor::vector(vec![0.3, -1.2, 2.5]), true);
    let sq = tape.mul(x, x).unwrap();
    let sg = tape.stop_gradient(sq);
    let y = tape.sum(sg);
    let sg_zero = tape.backward(y).unwrap().wrt(x).data().iter().all(|g| g.to_bits() == 0);
    let secs = start.elapsed().as_secs_f64();
    report(
        "gradient fidelity",
        worst.0 < common::gradcheck::RTOL && sg_zero && secs < 30.0,
        format!(
            "50 shapes, worst relative error {:.2e} ({}), stop-gradient bitwise zero {sg_zero}, {secs:.2}s",
            worst.0, worst.1
        ),
    );
}

/// Exhaustive nearest row, lowest index on ties.
fn argmin_rows(table: &Tensor, x: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for j in 0..table.rows() {
        let mut d = 0.0;
        for (a, b) in table.row(j).iter().zip(x) {
            d += (a - b) * (a - b);
        }
        if d < best.0 {
            best = (d, j);
        }
    }
    best.1
}

#[test]
fn quantizer_correctness() {
    let start = Instant::now();
    let full_size = Config::paper().model;
    let sizes = full_size.level_sizes.clone();
    let d = full_size.code_dim;
    let mut r = rng::stream(5, 0);
    let tables: Vec<Tensor> = sizes
        .iter()
        .enumerate()
        .map(|(c, &m)| {
            let scale = 1.0 / (c + 1) as f64;
            Tensor::new(vec![m, d], (0..m * d).map(|_| r.gen_range(-scale..scale)).collect()).unwrap()
        })
        .collect();
    let dict = Dictionary::from_tables(tables.clone()).unwrap();
    let mut mismatches = 0;
    let mut telescoping = 0;
    for _ in 0..10_000 {
        let x: Vec<f64> = (0..d).map(|_| r.gen_range(-1.5..1.5)).collect();
        let q = dict.quantize_residual(&x);
        let mut res = x.clone();
        for (c, t) in tables.iter().enumerate() {
            if q.residuals[c] != res {
                telescoping += 1;
            }
            let j = argmin_rows(t, &res);
            if j != q.code.levels[c] {
                mismatches += 1;
            }
            res = res.iter().zip(t.row(j)).map(|(a, b)| a - b).collect();
        }
    }
    let cap = capacity(&sizes);
    let mut seen = BTreeSet::new();
    let mut bijective = cap == 16_384;
    for flat in 0..cap {
        let levels = unflatten(flat, &sizes).unwrap();
        bijective &= flatten(&levels, &sizes).unwrap() == flat && seen.insert(levels);
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        "quantizer correctness",
        mismatches == 0 && telescoping == 0 && bijective && secs < 10.0,
        format!(
            "10000 inputs: {mismatches} argmin mismatches, {telescoping} residual mismatches; {cap} codes bijective {bijective}; {secs:.2}s"
        ),
    );
}

#[test]
fn dictionary_separation() {
    let run = run();
    let mut lines = Vec::new();
    let mut ok = true;
    for (stage, dict) in [(2, &run.dict_stage2), (3, &run.model.idmm.dict)] {
        let rep: SeparationReport = verify_voronoi(dict, 10_000, &mut rng::stream(stage, rng::streams::PROBE));
        ok &= rep.passed();
        lines.push(format!("stage {stage}: delta_min {:.3e}, {}", rep.delta_min, rep.lines().join("; ")));
    }
    report("dictionary separation", ok, lines.join(" | "));
}

#[test]
fn gradient_routing() {
    let cfg = Config::desk().model;
    let mut r = rng::stream(8, 0);
    let dim = 12;
    let mut idmm = Idmm::new(dim, &cfg, &mut r).unwrap();
    let fit = Tensor::new(vec![60, dim], (0..60 * dim).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    idmm.init_kmeans(&fit, &mut r).unwrap();
    let batch = Tensor::new(vec![8, dim], (0..8 * dim).map(|_| r.gen_range(-1.0..1.0)).collect()).unwrap();
    let mut tape = Tape::new();
    let v = tape.leaf(batch, true);
    let out = idmm.loss(&mut tape, v, 0.25).unwrap();
    let grads = tape.backward(out.loss).unwrap();
    let v_zero = grads.wrt(v).data().iter().all(|g| g.to_bits() == 0);
    idmm.dict.store.zero_grad();
    idmm.dict.store.accumulate(&grads);
    let (mut untouched_zero, mut selected_nonzero) = (true, true);
    for c in 0..idmm.dict.num_levels() {
        let g = idmm.dict.store.grad(idmm.dict.level_id(c)).unwrap();
        for row in 0..g.rows() {
            let moved = g.row(row).iter().any(|x| x.to_bits() != 0);
            if out.codes.iter().any(|k| k.levels[c] == row) {
                selected_nonzero &= moved;
            } else {
                untouched_zero &= !moved;
            }
        }
    }

    // Joint update: no contributing path leaves the dictionary unchanged, the
    // quantizer path alone moves only the selected rows.
    let rows = |d: &Dictionary| (0..d.num_levels()).map(|c| d.level(c).clone()).collect::<Vec<_>>();
    let before = rows(&idmm.dict);
    let mut adam = Adam::new(&idmm.dict.store, AdamConfig::default());
    trainer::joint_dictionary_step(&mut idmm.dict, &mut adam, &[]).unwrap();
    let frozen = rows(&idmm.dict) == before;
    trainer::joint_dictionary_step(&mut idmm.dict, &mut adam, &[&grads]).unwrap();
    let after = rows(&idmm.dict);
    let mut isolated = after != before;
    for c in 0..after.len() {
        for row in 0..after[c].rows() {
            let selected = out.codes.iter().any(|k| k.levels[c] == row);
            isolated &= selected || after[c].row(row) == before[c].row(row);
        }
    }
    report(
        "gradient routing",
        v_zero && untouched_zero && selected_nonzero && frozen && isolated,
        format!(
            "item vectors zero {v_zero}, unselected rows zero {untouched_zero}, selected rows nonzero {selected_nonzero}, empty joint step leaves dictionary unchanged {frozen}, quantizer-only step moves only selected rows {isolated}"
        ),
    );
}

#[test]
fn kmeans_utilization() {
    let run = run();
    let base = &run.after_stage1;
    let items = base.towers.all_item_vectors().unwrap();
    let stream: Vec<usize> = run.split.train_events.iter().take(5000).map(|e| e.item).collect();
    let mut rows = Vec::with_capacity(stream.len() * items.cols());
    for &i in &stream {
        rows.extend_from_slice(items.row(i));
    }
    let sample = Tensor::new(vec![stream.len(), items.cols()], rows).unwrap();
    let utilization = |kmeans: bool| {
        let mut idmm = base.idmm.clone();
        let mut r = rng::stream(base.config.seed, rng::streams::KMEANS);
        if kmeans {
            idmm.init_kmeans(&items, &mut r).unwrap();
        } else {
            idmm.init_uniform(&mut r).unwrap();
        }
        idmm.reset_usage();
        idmm.quantize_tracked(&sample).unwrap();
        assert_eq!(idmm.quantizations(), 5000);
        idmm.utilization().unwrap()
    };
    let (k, u) = (utilization(true), utilization(false));
    report(
        "k-means utilization",
        k >= 2.0 * u,
        format!("k-means {k:.3} vs uniform {u:.3} after 5000 quantizations (ratio {:.2})", k / u),
    );
}

fn recall(r: &MetricReport) -> f64 {
    r.recall_at[&20]
}

fn cur(r: &MetricReport) -> f64 {
    r.cur_at[&20].expect("benchmark split has unseen-category test items")
}

#[test]
fn synthetic_benchmark() {
    let run = run();
    let full = run.variant(Variant::Full);
    let ident = run.variant(Variant::Identical);
    let base = &run.baseline;
    let amr_full = full.amr_at[&20].unwrap_or(0.0);
    let amr_ident = ident.amr_at[&20];
    let recall_ok = recall(full) >= 1.1 * recall(base);
    let cur_ok = cur(full) >= 1.25 * cur(base);
    let amr_ok = amr_full > 0.0 && amr_ident == Some(0.0);
    let time_ok = run.elapsed <= Duration::from_secs(15 * 60);
    report(
        "synthetic benchmark",
        recall_ok && cur_ok && amr_ok && time_ok,
        format!(
            "Recall@20 {:.4} vs baseline {:.4} (x{:.3}, need 1.10); CUR@20 {:.4} vs {:.4} (x{:.3}, need 1.25); AMR@20 {amr_full:.4}, identical {amr_ident:?}; {} users, {:.0}s",
            recall(full),
            recall(base),
            recall(full) / recall(base),
            cur(full),
            cur(base),
            cur(full) / cur(base),
            full.users,
            run.elapsed.as_secs_f64()
        ),
    );
}

#[test]
fn module_ablations() {
    let run = run();
    let full = run.variant(Variant::Full);
    let mut ok = true;
    let mut parts = Vec::new();
    for v in [Variant::ZeroCondition, Variant::Frequency] {
        let r = run.variant(v);
        ok &= recall(r) < recall(full) && cur(r) < cur(full);
        parts.push(format!("{} Recall@20 {:.4} CUR@20 {:.4}", v.name(), recall(r), cur(r)));
    }
    report(
        "module ablations",
        ok,
        format!("full Recall@20 {:.4} CUR@20 {:.4}; {}", recall(full), cur(full), parts.join("; ")),
    );
}

#[test]
fn predictor_learning() {
    let r = common::planted_mipdm_run(400, 21);
    let ln_p = (r.capacity as f64).ln();
    let init_ok = (r.initial_entropy - ln_p).abs() <= 0.05 * ln_p;
    let ce_ok = r.final_ce < 0.5 * ln_p;
    report(
        "predictor learning",
        init_ok && ce_ok,
        format!(
            "untrained entropy {:.4} vs ln P {ln_p:.4}; trained cross-entropy {:.4} vs bound {:.4}; top-1 {:.3}",
            r.initial_entropy,
            r.final_ce,
            0.5 * ln_p,
            r.top1
        ),
    );
}

#[test]
fn serving_contracts() {
    // Repetition cap under randomized updates.
    let sizes = [8usize, 4];
    let cache = InterestCache::new(5, 3, &sizes).unwrap();
    let mut r = rng::stream(77, 0);
    let cap = capacity(&sizes);
    let mut probs = vec![0.0; cap];
    let mut violations = 0;
    for step in 0..1_000_000usize {
        for p in probs.iter_mut() {
            *p = r.gen::<f64>();
        }
        let user = step % 257;
        if step % 2 == 0 {
            cache.update(user, &probs).unwrap();
        } else {
            cache.update_sampled(user, &probs, &mut r).unwrap();
        }
        let entry = cache.get(user).unwrap();
        for c in 0..sizes.len() {
            let mut counts = vec![0; sizes[c]];
            for ci in entry.iter() {
                counts[ci.code.levels[c]] += 1;
            }
            if entry.len() != 5 || counts.iter().any(|&n| n > 3) {
                violations += 1;
            }
        }
    }
    let cap_ok = violations == 0 && cache.satisfies_cap();

    // K = 1 against exhaustive inner-product search.
    let run = run();
    let model = &run.model;
    let index = model.build_index().unwrap();
    let items = index.vectors();
    let mut k1_mismatch = 0;
    for u in (0..model.n_users()).step_by(10) {
        let flat = r.gen_range(0..model.idmm.dict.capacity());
        let code = gemirec::code::InterestCode::from_flat(flat, model.idmm.dict.level_sizes()).unwrap();
        let user_vec = model.user_vector(u).unwrap();
        let got = infer(&user_vec, &[CachedInterest { code: code.clone(), prob: 1.0 }], &model.idmm.dict, &model.towers, &index, 50).unwrap();
        let cv = model.idmm.dict.code_vector(&code.levels);
        let fused = model
            .towers
            .fuse_eval(&Tensor::new(vec![1, cv.len()], cv).unwrap(), &Tensor::new(vec![1, user_vec.len()], user_vec).unwrap())
            .unwrap();
        let mut brute: Vec<(usize, f64)> = (0..items.rows())
            .map(|i| (i, fused.row(0).iter().zip(items.row(i)).map(|(a, b)| a * b).sum()))
            .collect();
        brute.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        brute.truncate(50);
        if got.items != brute {
            k1_mismatch += 1;
        }
    }

    // Cached users never reach the predictor or the quantizer.
    let mut m = model.clone();
    for (u, h) in run.split.history.iter().enumerate() {
        m.users[u].history = h.clone();
    }
    let users: Vec<usize> = (0..m.n_users()).collect();
    fill_cache(&m, &index, &users, Variant::Full).unwrap();
    let (p0, q0) = (m.mipdm.forward_calls(), m.idmm.forward_calls());
    for &u in &users {
        m.recommend(&index, u, 20).unwrap();
    }
    let untouched = m.mipdm.forward_calls() == p0 && m.idmm.forward_calls() == q0;
    report(
        "serving contracts",
        cap_ok && k1_mismatch == 0 && untouched,
        format!(
            "cap holds over 1e6 updates {cap_ok}; K=1 mismatches {k1_mismatch}; cached inference leaves predictor/quantizer counters unchanged {untouched}"
        ),
    );
}

#[test]
fn determinism_and_persistence() {
    let train = || {
        let mut cfg = Config::desk();
        cfg.synth.n_users = 200;
        cfg.synth.n_items = 80;
        cfg.train.stage1_steps = 60;
        cfg.train.stage2_steps = 30;
        cfg.seed = 13;
        let (data, _) = synth::generate(&cfg.synth, cfg.seed).unwrap();
        let split = Split::new(&data);
        let mut model = GemiRec::new(cfg, &data).unwrap();
        let report = trainer::run_three_stage(&mut model, &split.train_events, |_, _| Ok(())).unwrap();
        // Wall-clock timings differ between runs; everything else must not.
        let curves: Vec<_> = report.stages.into_iter().map(|s| s.steps).collect();
        (checkpoint::to_bytes(&model), (curves, report.utilization))
    };
    let (a, ra) = train();
    let (b, rb) = train();
    let reproducible = a == b && ra == rb;

    let run = run();
    let bytes = checkpoint::to_bytes(&run.model);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    checkpoint::save(&run.model, &path).unwrap();
    let loaded = checkpoint::load(&path, LoadOptions { expected: Some(&run.model.config), force: false }).unwrap();
    let roundtrip = checkpoint::to_bytes(&loaded) == bytes && std::fs::read(&path).unwrap() == bytes;
    let same_items = loaded.towers.all_item_vectors().unwrap() == run.model.towers.all_item_vectors().unwrap();
    assert_eq!(loaded.catalog.item_ids.len(), run.data.n_items());
    report(
        "determinism and persistence",
        reproducible && roundtrip && same_items,
        format!(
            "two seeded runs identical {reproducible} ({} checkpoint bytes); save/load/save identical {roundtrip}",
            a.len()
        ),
    );
}
