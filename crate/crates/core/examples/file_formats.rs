//! Writes a dataset as CSV and NNKF, reloads both, trains a small model and
//! round-trips its checkpoint.
//!
//! cargo run --release --example file_formats -- [output_dir]

use std::path::PathBuf;

use nnkernel::synth::two_blobs;
use nnkernel::train::{evaluate, train, EvalMode};
use nnkernel::{Checkpoint, Dataset, RunConfig};

fn main() -> nnkernel::Result<()> {
    let dir = std::env::args().nth(1).map_or_else(std::env::temp_dir, PathBuf::from);
    let data = two_blobs(50, 4, 3.0, 1.0, 0)?;

    let csv = dir.join("blobs.csv");
    let nnkf = dir.join("blobs.nnkf");
    data.save_csv(&csv)?;
    data.save_nnkf(&nnkf)?;
    let (a, b) = (Dataset::load(&csv)?, Dataset::load(&nnkf)?);
    println!(
        "csv {} bytes, nnkf {} bytes, identical features: {}",
        std::fs::metadata(&csv)?.len(),
        std::fs::metadata(&nnkf)?.len(),
        a.features == b.features
    );

    let mut config = RunConfig::default();
    config.model.hidden = vec![8];
    config.model.embedding_dim = 2;
    config.train.epochs = 10;
    let checkpoint = train(&config, &b)?.checkpoint;
    let path = dir.join("blobs.nnkc");
    checkpoint.save(&path)?;
    let loaded = Checkpoint::load(&path)?;
    let before = evaluate(&checkpoint, &b, EvalMode::Classification)?;
    let after = evaluate(&loaded, &b, EvalMode::Classification)?;
    println!(
        "checkpoint {} bytes, bank version {}, accuracy {:.4} before and {:.4} after reload",
        std::fs::metadata(&path)?.len(),
        loaded.bank.version(),
        before.accuracy.unwrap_or_default(),
        after.accuracy.unwrap_or_default()
    );
    Ok(())
}
