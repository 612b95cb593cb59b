//! Shared fixtures for the benchmarks.

use kalahash_core::retrieval::Labels;
use kalahash_core::tensor::rng::seeded;
use kalahash_core::{DccProblem, Mat, PackedCodes, RetrievalIndex};

/// Random gallery of `n` codes over `classes` labels plus `queries` query codes.
pub fn gallery(
    n: usize,
    bits: usize,
    classes: usize,
    queries: usize,
    seed: u64,
) -> (RetrievalIndex, PackedCodes, Labels) {
    let mut rng = seeded(seed);
    let codes = PackedCodes::from_signs(&Mat::randn(n, bits, 1.0, &mut rng));
    let labels: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let labels = Labels::single(&labels, classes).expect("labels in range");
    let ids = (0..n).map(|i| i.to_string()).collect();
    let index = RetrievalIndex::new(codes, labels, ids).expect("consistent gallery");
    let q = PackedCodes::from_signs(&Mat::randn(queries, bits, 1.0, &mut rng));
    let qlabels = Labels::single(
        &(0..queries).map(|i| i % classes).collect::<Vec<_>>(),
        classes,
    )
    .unwrap();
    (index, q, qlabels)
}

/// Code-update problem with single-label Y and tanh-squashed features.
pub fn dcc_problem(bits: usize, n: usize, classes: usize, seed: u64) -> DccProblem {
    let mut rng = seeded(seed);
    let mut y = Mat::zeros(classes, n);
    for j in 0..n {
        y.set(j % classes, j, 1.0);
    }
    let t = Mat::randn(bits, classes, 1.0, &mut rng);
    let h = Mat::randn(n, bits, 1.0, &mut rng).map(f64::tanh);
    DccProblem::new(y, t, h, 0.1, 1.0).expect("shapes agree")
}
