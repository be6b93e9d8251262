//! Builds an occlusion-pruned graph over random points and compares graph
//! search with brute force.
//!
//! cargo run --release --example ann_index -- [points] [dim] [budget]

use std::time::Instant;

use nnkernel::ann::{brute_force_knn, recall, GraphIndex, SearchParams, DEFAULT_MAX_DEGREE};
use nnkernel::rng::{stream_rng, Stream};
use rand_distr::{Distribution, StandardNormal};

fn main() -> nnkernel::Result<()> {
    let args: Vec<usize> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("numeric argument"))
        .collect();
    let n = args.first().copied().unwrap_or(10_000);
    let d = args.get(1).copied().unwrap_or(64);
    let default = SearchParams::default();
    let budget = args.get(2).copied().unwrap_or(default.backtrack_budget);

    let mut rng = stream_rng(7, Stream::Synthetic);
    let points = ndarray::Array2::from_shape_fn((n, d), |_| StandardNormal.sample(&mut rng));
    let queries = ndarray::Array2::<f64>::from_shape_fn((50, d), |_| StandardNormal.sample(&mut rng));

    let start = Instant::now();
    let graph = GraphIndex::build(points.view(), DEFAULT_MAX_DEGREE)?;
    println!("built {n} x {d} graph in {:.1?}", start.elapsed());

    let params = SearchParams {
        backtrack_budget: budget,
        ..default
    };
    let start = Instant::now();
    let mut total = 0.0;
    for q in queries.outer_iter() {
        let q = q.as_slice().expect("standard layout");
        let found = graph.search(points.view(), q, &params, None)?;
        let truth = brute_force_knn(q, points.view(), params.k, None)?;
        total += recall(&found, &truth);
    }
    println!(
        "recall@{} at budget {budget}: {:.4} ({:.1?} for {} queries)",
        params.k,
        total / queries.nrows() as f64,
        start.elapsed(),
        queries.nrows()
    );
    Ok(())
}
