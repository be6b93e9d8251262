//! Validation loss as a function of the kernel width on two Gaussian blobs,
//! scored in the raw input space.
//!
//! cargo run --release --example sigma_tuning -- [separation] [blob_std]

use nnkernel::synth::two_blobs;
use nnkernel::train::sigma_curve;
use nnkernel::{MlpModel, RunConfig};

fn main() -> nnkernel::Result<()> {
    let args: Vec<f64> = std::env::args()
        .skip(1)
        .map(|a| a.parse().expect("numeric argument"))
        .collect();
    let separation = args.first().copied().unwrap_or(4.0);
    let std = args.get(1).copied().unwrap_or(1.0);

    let mut data = two_blobs(200, 2, separation, std, 0)?;
    data.assign_splits(0.25, 0.0, 0)?;
    let grid: Vec<f64> = (-8..=12).map(|i| 2f64.powf(f64::from(i) / 2.0)).collect();
    let config = RunConfig::default();
    let curve = sigma_curve(&config, &MlpModel::identity(2), &data, &grid)?;

    let best = curve
        .iter()
        .copied()
        .fold((f64::NAN, f64::INFINITY), |b, p| if p.1 < b.1 { p } else { b });
    for (sigma, loss) in &curve {
        let mark = if *sigma == best.0 { "  <- best" } else { "" };
        println!("sigma {sigma:>8.4}  loss {loss:.5}{mark}");
    }
    println!("separation / 2 = {}", separation / 2.0);
    Ok(())
}
