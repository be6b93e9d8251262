//! Synthetic labelled feature sets.
//!
//! Class structure lives in a low-dimensional "informative" subspace while
//! the remaining directions carry class-independent nuisance noise. The two
//! are mixed by a random rotation, so a useful embedding has to learn which
//! directions to keep. The same rotation is shared by every class, which is
//! what lets an embedding trained on some classes transfer to others.

use ndarray::{s, Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::rng::{stream_rng, Stream};

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    pub input_dim: usize,
    pub informative_dim: usize,
    /// Standard deviation of class means in the informative subspace.
    pub class_spread: f64,
    /// Within-class standard deviation in the informative subspace.
    pub within_std: f64,
    /// Standard deviation of the nuisance directions.
    pub nuisance_std: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            classes: 20,
            per_class: 100,
            input_dim: 32,
            informative_dim: 8,
            class_spread: 1.0,
            within_std: 0.15,
            nuisance_std: 2.0,
            seed: 0,
        }
    }
}

/// Random orthogonal matrix by Gram-Schmidt on a Gaussian matrix.
pub fn random_rotation(dim: usize, rng: &mut impl Rng) -> Array2<f64> {
    let mut q = Array2::<f64>::zeros((dim, dim));
    for i in 0..dim {
        let mut v: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        for j in 0..i {
            let prev = q.row(j);
            let proj = prev.dot(&v);
            v.scaled_add(-proj, &prev);
        }
        let norm = v.dot(&v).sqrt();
        q.row_mut(i).assign(&(v / norm));
    }
    q
}

pub fn generate(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes == 0 || spec.per_class == 0 || spec.informative_dim == 0 || spec.informative_dim > spec.input_dim {
        return Err(Error::config(
            "synthetic spec needs classes, samples and 0 < informative_dim <= input_dim",
        ));
    }
    let mut rng = stream_rng(spec.seed, Stream::Synthetic);
    let rotation = random_rotation(spec.input_dim, &mut rng);
    let spread = Normal::new(0.0, spec.class_spread).map_err(|e| Error::config(e.to_string()))?;
    let within = Normal::new(0.0, spec.within_std).map_err(|e| Error::config(e.to_string()))?;
    let nuisance = Normal::new(0.0, spec.nuisance_std).map_err(|e| Error::config(e.to_string()))?;
    let means = Array2::from_shape_fn((spec.classes, spec.informative_dim), |_| spread.sample(&mut rng));

    let n = spec.classes * spec.per_class;
    let mut latent = Array2::<f64>::zeros((n, spec.input_dim));
    let mut labels = Vec::with_capacity(n);
    for c in 0..spec.classes {
        for k in 0..spec.per_class {
            let i = c * spec.per_class + k;
            for j in 0..spec.input_dim {
                latent[[i, j]] = if j < spec.informative_dim {
                    means[[c, j]] + within.sample(&mut rng)
                } else {
                    nuisance.sample(&mut rng)
                };
            }
            labels.push(c);
        }
    }
    Dataset::new(latent.dot(&rotation), labels)
}

/// Two isotropic Gaussian blobs whose centres are `separation` apart along
/// the first axis.
pub fn two_blobs(per_blob: usize, dim: usize, separation: f64, std: f64, seed: u64) -> Result<Dataset> {
    let mut rng = stream_rng(seed, Stream::Synthetic);
    let noise = Normal::new(0.0, std).map_err(|e| Error::config(e.to_string()))?;
    let mut x = Array2::from_shape_fn((2 * per_blob, dim), |_| noise.sample(&mut rng));
    x.slice_mut(s![per_blob.., 0]).mapv_inplace(|v| v + separation);
    let labels = (0..2 * per_blob).map(|i| i / per_blob).collect();
    Dataset::new(x, labels)
}
