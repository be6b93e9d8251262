//! Adds a class the network never saw to a trained bank, without touching
//! the network weights.
//!
//! cargo run --release --example enrollment -- [seed]

use nnkernel::synth::{generate, SyntheticSpec};
use nnkernel::train::{enroll, evaluate, train, EvalMode};
use nnkernel::{RunConfig, Split};

fn main() -> nnkernel::Result<()> {
    env_logger::init();
    let seed = std::env::args().nth(1).map_or(0, |a| a.parse().expect("numeric seed"));
    let mut data = generate(&SyntheticSpec {
        classes: 11,
        per_class: 80,
        seed,
        ..SyntheticSpec::default()
    })?;
    data.assign_splits(0.125, 0.25, seed)?;
    let old: Vec<usize> = (0..10).collect();
    let known = data.with_classes(&old)?;
    let newcomer = data.with_classes(&[10])?;

    let mut config = RunConfig::default();
    config.train.seed = seed;
    config.train.epochs = 100;
    config.train.learning_rate = 0.1;
    config.train.weight_decay = 0.01;
    config.schedule.update_interval = 5.0;
    let trained = train(&config, &known)?.checkpoint;
    let before = evaluate(&trained, &known, EvalMode::Classification)?;

    let enrolled = enroll(&trained, &newcomer.split(Split::Train))?;
    let after = evaluate(&enrolled, &known, EvalMode::Classification)?;
    let fresh = evaluate(&enrolled, &newcomer, EvalMode::Classification)?;
    println!("bank size {} -> {}", trained.bank.len(), enrolled.bank.len());
    println!(
        "old classes before enrollment: {:.2}%",
        100.0 * before.accuracy.unwrap_or_default()
    );
    println!(
        "old classes after enrollment:  {:.2}%",
        100.0 * after.accuracy.unwrap_or_default()
    );
    println!(
        "enrolled class:                {:.2}%",
        100.0 * fresh.accuracy.unwrap_or_default()
    );
    Ok(())
}
