#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};

use dbn_core::nn::{loss_mse, network_backward, network_forward};
use dbn_core::rng::Rng;
use dbn_core::{Activation, NetworkParams, RawIdxImages, RawIdxLabels};

pub const FILES: [&str; 4] = [
    "train-images-idx3-ubyte",
    "train-labels-idx1-ubyte",
    "t10k-images-idx3-ubyte",
    "t10k-labels-idx1-ubyte",
];

/// Real MNIST from `DBN_MNIST_DIR` or `<workspace>/data/mnist`, if all four
/// files are there.
pub fn mnist_dir() -> Option<PathBuf> {
    let dir = std::env::var_os("DBN_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"));
    FILES.iter().all(|f| dir.join(f).is_file()).then_some(dir)
}

// Each class lights up its own horizontal band, plus pixel noise.
fn synthetic_images(n: usize, rng: &mut Rng) -> (RawIdxImages, RawIdxLabels) {
    let (rows, cols) = (28usize, 28usize);
    let mut pixels = Vec::with_capacity(n * rows * cols);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 10) as u8;
        labels.push(label);
        for r in 0..rows {
            let on = r / 3 == label as usize || (r / 3 == 9 && label == 9);
            for _ in 0..cols {
                let base: u8 = if on { 200 } else { 10 };
                pixels.push(base.saturating_add((rng.below(40)) as u8));
            }
        }
    }
    (
        RawIdxImages {
            count: n,
            rows,
            cols,
            pixels,
        },
        RawIdxLabels { count: n, labels },
    )
}

/// Writes a small MNIST-shaped dataset (canonical file names) into `dir`.
pub fn write_synthetic_mnist(dir: &Path, n_train: usize, n_test: usize, seed: u64) {
    fs::create_dir_all(dir).unwrap();
    let mut rng = Rng::new(seed);
    let (img, lab) = synthetic_images(n_train, &mut rng);
    fs::write(dir.join(FILES[0]), img.to_bytes()).unwrap();
    fs::write(dir.join(FILES[1]), lab.to_bytes()).unwrap();
    let (img, lab) = synthetic_images(n_test, &mut rng);
    fs::write(dir.join(FILES[2]), img.to_bytes()).unwrap();
    fs::write(dir.join(FILES[3]), lab.to_bytes()).unwrap();
}

fn loss_at(params: &NetworkParams, x: &[f64], t: &[f64]) -> f64 {
    loss_mse(network_forward(params, x).unwrap().output(), t).unwrap()
}

fn with_param(params: &NetworkParams, layer: usize, index: usize, delta: f64) -> NetworkParams {
    let mut layers = params.layers().to_vec();
    let l = &mut layers[layer];
    let n_w = l.weights.data().len();
    if index < n_w {
        l.weights.data_mut()[index] += delta;
    } else {
        l.bias[index - n_w] += delta;
    }
    NetworkParams::new(layers).unwrap()
}

/// Largest relative error between backprop and central differences over
/// every weight and bias of a random scaled-tanh network with layer
/// `sizes`, using `max(|analytic|, |numeric|, 1e-12)` as the denominator.
pub fn gradient_check(sizes: &[usize], seed: u64, h: f64) -> f64 {
    let mut rng = Rng::new(seed);
    let params = NetworkParams::uniform(&mut rng, sizes, -1.0, 1.0, Activation::scaled_tanh()).unwrap();
    let x: Vec<f64> = (0..sizes[0])
        .map(|_| {
            let mag = 0.2 + 0.8 * rng.next_f64();
            if rng.below(2) == 0 { mag } else { -mag }
        })
        .collect();
    let t: Vec<f64> = (0..*sizes.last().unwrap())
        .map(|_| if rng.below(2) == 0 { 1.0 } else { -1.0 })
        .collect();

    let trace = network_forward(&params, &x).unwrap();
    let grads = network_backward(&params, &trace, &t).unwrap();

    let mut worst = 0.0f64;
    for (l, layer) in params.layers().iter().enumerate() {
        let analytic: Vec<f64> = grads.weights[l].data().iter().chain(&grads.biases[l]).copied().collect();
        assert_eq!(analytic.len(), layer.weights.data().len() + layer.bias.len());
        for (idx, &a) in analytic.iter().enumerate() {
            let up = loss_at(&with_param(&params, l, idx, h), &x, &t);
            let down = loss_at(&with_param(&params, l, idx, -h), &x, &t);
            let n = (up - down) / (2.0 * h);
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-12);
            worst = worst.max(rel);
        }
    }
    worst
}
