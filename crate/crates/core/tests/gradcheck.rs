mod common;

use std::time::Instant;

use im2tex::data::vocab::{END, START};
use im2tex::gradcheck;
use im2tex::rng;
use im2tex::training::ForwardMode;

#[test]
fn every_op_matches_central_differences() {
    let results = gradcheck::op_suite(2024, 10, 1e-5).unwrap();
    assert!(results.len() >= 20);
    for (name, err, instances) in &results {
        println!("{name:<20} {err:.3e} over {instances}");
        assert!(*instances >= 10, "{name}: only {instances} instances");
        assert!(*err <= 1e-4, "{name}: max relative error {err:e}");
    }
}

#[test]
fn two_step_unrolled_model_matches_central_differences() {
    let started = Instant::now();
    for instance in 0..10u64 {
        let mut cfg = common::tiny_config(100 + instance);
        // dropout masks are drawn from per-step streams, so they repeat
        // identically in every perturbed evaluation
        cfg.dropout = 0.2;
        let model = im2tex::Model::new(&cfg, common::vocab(3)).unwrap();
        let a = common::random_image(instance, 24, 16);
        let b = common::random_image(instance + 50, 24, 16);
        let t1 = [START, 4, END];
        let t2 = [START, 6, END];
        let mode = ForwardMode::Train { seed: instance, step: 3 };
        let mut r = rng::stream(instance, &[7]);
        let report = gradcheck::model_check(&model, &[&a, &b], &[&t1, &t2], mode, 1e-5, 6, &mut r).unwrap();
        println!(
            "instance {instance}: {:.3e} over {} elements, {} at kinks",
            report.max_rel_error, report.checked, report.skipped
        );
        assert!(report.checked > 200);
        assert!(report.skipped * 50 <= report.checked, "too many kinks: {}", report.skipped);
        assert!(report.max_rel_error <= 1e-4, "instance {instance}: {:e}", report.max_rel_error);
    }
    println!("model checks took {:.1}s", started.elapsed().as_secs_f64());
}
