#![allow(dead_code)]

use ndarray::Array2;
use ssbnn::data::{LabeledDataset, Provenance};
use ssbnn::model::{LayerParams, NetworkArch, PriorConfig, VariationalState};
use ssbnn::oracle::TinyInstance;
use ssbnn::rng::Stream;

pub fn dataset(rows: &[&[f64]], labels: &[usize], classes: usize) -> LabeledDataset {
    let dim = rows[0].len();
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    let features = Array2::from_shape_vec((rows.len(), dim), flat).unwrap();
    LabeledDataset::new(features, labels.to_vec(), classes, Provenance::Synthetic).unwrap()
}

pub fn arch(widths: &[usize]) -> NetworkArch {
    NetworkArch::new(widths.to_vec()).unwrap()
}

/// 1 -> 2 softmax regression on four points: four slots.
pub fn logistic_instance(order: usize) -> TinyInstance {
    let data = dataset(&[&[0.1], &[0.4], &[0.6], &[0.9]], &[0, 0, 1, 1], 2);
    TinyInstance::new(arch(&[1, 2]), data, PriorConfig::new(0.3, 1.0).unwrap(), order).unwrap()
}

/// Parameters drawn so slabs stay moderate and inclusion probabilities stay
/// away from 0 and 1.
pub fn random_state(arch: &NetworkArch, rng: &mut Stream) -> VariationalState {
    let layers = (0..arch.num_layers())
        .map(|l| {
            let shape = arch.layer_shape(l);
            LayerParams {
                mu: Array2::from_shape_simple_fn(shape, || rng.normal()),
                rho: Array2::from_shape_simple_fn(shape, || -1.5 + 0.5 * rng.normal()),
                omega: Array2::from_shape_simple_fn(shape, || 1.5 * rng.normal()),
            }
        })
        .collect();
    VariationalState::new(arch, layers).unwrap()
}

/// Mean and standard error of a sample.
pub fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
