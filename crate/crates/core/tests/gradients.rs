use std::time::{Duration, Instant};

mod common;

use common::grad_suite::{self, Outcome};

fn run(group: fn(&mut Vec<Outcome>)) {
    let start = Instant::now();
    let mut out = Vec::new();
    group(&mut out);
    for o in &out {
        println!("{:<34} {} seeds  max rel err {:.2e}", o.name, o.seeds, o.max_rel_error);
    }
    let failed: Vec<_> = out.iter().filter(|o| o.failure.is_some()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
    assert!(out.iter().all(|o| o.seeds >= 10 && o.max_rel_error < grad_suite::TOL));
    assert!(start.elapsed() < Duration::from_secs(60));
}

#[test]
fn elementwise_and_reductions() {
    run(grad_suite::elementwise_and_reductions);
}

#[test]
fn network_ops() {
    run(grad_suite::network_ops);
}

#[test]
fn loss_terms() {
    run(grad_suite::loss_terms);
}

#[test]
fn full_objective_through_the_detector() {
    run(grad_suite::full_objective_through_the_detector);
}
