//! Trains an embedding on half the classes of a synthetic task and clusters
//! the other half.
//!
//! cargo run --release --example transfer_learning -- [seed] [embedding_dim] [epochs] [k_train] [update_interval] [learning_rate] [weight_decay]

use nnkernel::synth::{generate, SyntheticSpec};
use nnkernel::train::{evaluate, train, transfer_split, EvalMode};
use nnkernel::RunConfig;

fn main() -> nnkernel::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize, default: f64| args.get(i).map_or(default, |a| a.parse().expect("numeric argument"));
    let seed = arg(0, 0.0) as u64;

    let data = generate(&SyntheticSpec {
        seed,
        ..SyntheticSpec::default()
    })?;
    let (mut seen, unseen) = transfer_split(&data, 0.5)?;
    seen.assign_splits(0.2, 0.0, seed)?;

    let mut config = RunConfig::default();
    config.train.seed = seed;
    config.model.embedding_dim = arg(1, 16.0) as usize;
    config.train.epochs = arg(2, 40.0) as usize;
    config.schedule.k_train = arg(3, 100.0) as usize;
    config.schedule.update_interval = arg(4, 1.0);
    config.train.learning_rate = arg(5, config.train.learning_rate);
    config.train.weight_decay = arg(6, config.train.weight_decay);

    let raw = nnkernel::metrics::recall_at_k(unseen.features.view(), &unseen.labels, &[1])?[&1];
    let outcome = train(&config, &seen)?;
    let report = evaluate(&outcome.checkpoint, &unseen, EvalMode::Transfer)?;
    println!("raw-input R@1 on held-out classes: {raw:.4}");
    println!("best epoch {:?}", outcome.history.best_epoch);
    print!("{report}");
    Ok(())
}
