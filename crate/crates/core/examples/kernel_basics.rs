//! Scores a query against a handful of weighted Gaussian centres, then takes
//! one gradient step on the query embedding and the kernel weights.

use ndarray::array;
use nnkernel::{classify, nnk_loss_backward, CentreBank, KernelConfig, Neighbourhood};

fn main() -> nnkernel::Result<()> {
    let centres = array![[0.0, 0.0], [0.5, 0.2], [2.0, 2.0], [2.2, 1.7], [-1.5, 2.0]];
    let bank = CentreBank::new(centres, vec![0, 0, 1, 1, 2], vec![1.0, 1.0, 1.0, 0.5, 2.0], 3)?;
    let kernel = KernelConfig::with_sigma(1.0)?;
    let all: Vec<usize> = (0..bank.len()).collect();

    let mut x = vec![1.0, 1.0];
    let dist = classify(&x, &bank, Neighbourhood::new(&all), &kernel)?;
    println!(
        "class probabilities {:.4?} -> predicted {}",
        dist.probs,
        dist.predicted()
    );

    // Treat the query as a class-1 example and move it downhill.
    let out = nnk_loss_backward(&x, 1, &bank, Neighbourhood::new(&all), &kernel)?;
    println!("loss {:.4}, d/dx {:.4?}", out.loss, out.grads.d_embedding);
    for (xi, g) in x.iter_mut().zip(&out.grads.d_embedding) {
        *xi -= 0.5 * g;
    }
    let mut weights = bank.weights().to_vec();
    for (&id, g) in &out.grads.d_weights {
        weights[id] = (weights[id] - 0.5 * g).max(1e-6);
    }
    let mut updated = bank.clone();
    updated.set_weights(weights)?;
    let after = nnk_loss_backward(&x, 1, &updated, Neighbourhood::new(&all), &kernel)?;
    println!(
        "after one step: loss {:.4}, weights {:.3?}",
        after.loss,
        updated.weights()
    );

    // A training example never votes for itself.
    let own = nnk_loss_backward(bank.centre(2), 1, &bank, Neighbourhood::new(&all).excluding(2), &kernel)?;
    println!("centre 2 scored against the others: loss {:.4}", own.loss);
    Ok(())
}
