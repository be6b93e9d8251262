//! Kernel classifier against a softmax head on the same network, plus the
//! ablation rows: frozen random network, frozen network with learned kernel
//! weights, and full fine-tuning.
//!
//! cargo run --release --example classification -- [seed]

use nnkernel::synth::{generate, SyntheticSpec};
use nnkernel::train::{evaluate, train, EvalMode};
use nnkernel::{Dataset, LossKind, RunConfig};

type Tweak = Box<dyn Fn(&mut RunConfig)>;

fn accuracy(config: &RunConfig, data: &Dataset) -> nnkernel::Result<f64> {
    let outcome = train(config, data)?;
    let report = evaluate(&outcome.checkpoint, data, EvalMode::Classification)?;
    Ok(report.accuracy.unwrap_or_default())
}

fn main() -> nnkernel::Result<()> {
    env_logger::init();
    let seed = std::env::args().nth(1).map_or(0, |a| a.parse().expect("numeric seed"));
    let mut data = generate(&SyntheticSpec {
        classes: 10,
        per_class: 80,
        seed,
        ..SyntheticSpec::default()
    })?;
    // 50 train / 10 validation / 20 test rows per class.
    data.assign_splits(0.125, 0.25, seed)?;

    let mut base = RunConfig::default();
    base.train.seed = seed;
    base.train.epochs = 100;
    base.train.learning_rate = 0.1;
    base.train.weight_decay = 0.01;
    base.schedule.update_interval = 5.0;

    let rows: [(&str, Tweak); 5] = [
        ("kernel", Box::new(|_| {})),
        ("softmax", Box::new(|c| c.loss = LossKind::Softmax)),
        (
            "frozen",
            Box::new(|c| {
                c.train.freeze_network = true;
                c.train.learn_kernel_weights = false;
            }),
        ),
        ("frozen + weights", Box::new(|c| c.train.freeze_network = true)),
        (
            "frozen + weights + sigma",
            Box::new(|c| {
                c.train.freeze_network = true;
                c.tune_sigma = true;
            }),
        ),
    ];
    for (name, tweak) in rows {
        let mut config = base.clone();
        tweak(&mut config);
        println!("{name:>26}: {:.2}%", 100.0 * accuracy(&config, &data)?);
    }
    Ok(())
}
