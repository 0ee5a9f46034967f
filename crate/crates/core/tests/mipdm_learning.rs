mod common;

use common::planted_mipdm_run;

#[test]
fn learns_planted_next_interest() {
    let run = planted_mipdm_run(400, 3);
    let ln_p = (run.capacity as f64).ln();
    assert!(
        (run.initial_entropy - ln_p).abs() <= 0.05 * ln_p,
        "untrained entropy {} vs ln P {ln_p}",
        run.initial_entropy
    );
    assert!(run.final_ce < 0.5 * ln_p, "cross-entropy {} not below {}", run.final_ce, 0.5 * ln_p);
    assert!(run.top1 > 10.0 / run.capacity as f64, "top-1 accuracy {}", run.top1);
}
