//! End-to-end synthetic benchmark: trains the full model and the
//! single-interest baseline and prints their test metrics.

use std::time::Instant;

use gemirec::baseline::Baseline;
use gemirec::data::Split;
use gemirec::evaluation::{evaluate, evaluate_baseline, Variant};
use gemirec::model::GemiRec;
use gemirec::{synth, trainer, Config};

fn main() -> gemirec::Result<()> {
    let cfg = match std::env::args().nth(1) {
        Some(path) => Config::from_file(std::path::Path::new(&path))?,
        None => Config::desk(),
    };
    let t = Instant::now();
    let (data, _) = synth::generate(&cfg.synth, cfg.seed)?;
    let split = Split::new(&data);
    println!("events {} train {}", data.events.len(), split.train_events.len());
    let mut model = GemiRec::new(cfg.clone(), &data)?;
    let report = trainer::run_three_stage(&mut model, &split.train_events, |s, _| {
        println!("stage {s} done at {:.1}s", t.elapsed().as_secs_f64());
        Ok(())
    })?;
    let s3 = report.stage(3).unwrap();
    let tail: Vec<f64> = s3.steps.iter().rev().take(50).filter_map(|s| s.mipdm).collect();
    println!(
        "mipdm ce (last 50 mean) {:.4}  half ln P {:.4}",
        tail.iter().sum::<f64>() / tail.len() as f64,
        0.5 * (gemirec::code::capacity(&cfg.model.level_sizes) as f64).ln()
    );
    let topn = cfg.serve.topn.clone();
    for v in [Variant::Full, Variant::ZeroCondition, Variant::Frequency, Variant::Identical] {
        let r = evaluate(&mut model, &split, &topn, v)?;
        println!("{:15} recall {:?} cur {:?} amr {:?}", r.variant, r.recall_at, r.cur_at, r.amr_at);
    }
    let mut base = Baseline::new(&cfg, &data)?;
    base.train(&split.train_events)?;
    let r = evaluate_baseline(&mut base, &split, &data.item_category, &topn)?;
    println!("{:15} recall {:?} cur {:?}", r.variant, r.recall_at, r.cur_at);
    println!("total {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}
