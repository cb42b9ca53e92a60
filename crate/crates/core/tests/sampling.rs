use std::collections::HashMap;

use ravr_core::exact_oracle::{exact_amortized_posterior, exact_prior};
use ravr_core::experiment::verify::random_world;
use ravr_core::task_env::enumerate_paths;
use ravr_core::{seeded_rng, AnswerSlot, Path};
use statrs::distribution::{ChiSquared, ContinuousCDF};

const SAMPLES: usize = 100_000;

fn frequencies(slot: AnswerSlot, seed: u64) -> (Vec<f64>, Vec<usize>) {
    let (task, params) = random_world(seed).unwrap();
    let paths = enumerate_paths(&task);
    let exact = match slot {
        AnswerSlot::QuestionOnly => exact_prior(&params, &task).unwrap(),
        AnswerSlot::Reference => exact_amortized_posterior(&params, &task).unwrap(),
    };
    let index: HashMap<&Path, usize> = paths.iter().enumerate().map(|(i, p)| (p, i)).collect();
    let mut counts = vec![0usize; paths.len()];
    let mut rng = seeded_rng(seed ^ 0xabc);
    for _ in 0..SAMPLES {
        let s = params.sample_path(&task, slot, &mut rng);
        counts[index[&s.path]] += 1;
    }
    (exact, counts)
}

/// Pearson statistic with cells of expected count below 5 pooled.
fn chi_square_p(exact: &[f64], counts: &[usize]) -> f64 {
    let n = SAMPLES as f64;
    let mut stat = 0.0;
    let mut cells = 0usize;
    let (mut pooled_e, mut pooled_o) = (0.0, 0.0);
    for (p, &c) in exact.iter().zip(counts) {
        let e = p * n;
        if e < 5.0 {
            pooled_e += e;
            pooled_o += c as f64;
        } else {
            stat += (c as f64 - e).powi(2) / e;
            cells += 1;
        }
    }
    if pooled_e > 0.0 {
        stat += (pooled_o - pooled_e).powi(2) / pooled_e.max(1e-300);
        cells += 1;
    }
    let dof = (cells - 1).max(1) as f64;
    1.0 - ChiSquared::new(dof).unwrap().cdf(stat)
}

#[test]
fn prior_sampler_passes_chi_square_on_most_worlds() {
    let passed = (0..20u64)
        .filter(|&seed| {
            let (exact, counts) = frequencies(AnswerSlot::QuestionOnly, 100 + seed);
            chi_square_p(&exact, &counts) >= 0.01
        })
        .count();
    assert!(passed >= 19, "{passed}/20 worlds passed");
}

#[test]
fn posterior_sampler_passes_chi_square_on_most_worlds() {
    let passed = (0..20u64)
        .filter(|&seed| {
            let (exact, counts) = frequencies(AnswerSlot::Reference, 200 + seed);
            chi_square_p(&exact, &counts) >= 0.01
        })
        .count();
    assert!(passed >= 19, "{passed}/20 worlds passed");
}

#[test]
fn every_path_within_three_sigma() {
    let (exact, counts) = frequencies(AnswerSlot::QuestionOnly, 7);
    let n = SAMPLES as f64;
    for (p, &c) in exact.iter().zip(&counts) {
        let sigma = (n * p * (1.0 - p)).sqrt();
        assert!((c as f64 - n * p).abs() <= 3.0 * sigma.max(1.0), "count {c} vs expected {}", n * p);
    }
}
