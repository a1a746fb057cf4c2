use flowsculpt::agent::network::convolutional_layers;
use flowsculpt::agent::{loss_and_grads, LayerSpec, Loss, NetworkArchitecture, QNetworkParams, Transition};
use flowsculpt::flow::{FlowShape, GridSpec};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;
const TOLERANCE: f64 = 1e-4;
/// Below this magnitude both derivatives count as zero.
const FLOOR: f64 = 1e-8;

fn random_batch(grid: GridSpec, n: usize, actions: usize, rng: &mut ChaCha8Rng) -> (Vec<Transition>, Vec<f64>) {
    let batch = (0..n)
        .map(|_| {
            let state = FlowShape::from_fn(grid, |_, _| rng.gen_bool(0.4));
            Transition {
                next_state: state.clone(),
                state,
                action: rng.gen_range(0..actions),
                reward: 0.0,
                done: true,
            }
        })
        .collect();
    let targets = (0..n).map(|_| rng.gen_range(-0.5..0.5)).collect();
    (batch, targets)
}

/// Freshly initialized network with random biases, so that no ReLU input
/// sits exactly on the kink where central differences are one-sided.
fn probe_net(arch: &NetworkArchitecture, seed: u64) -> QNetworkParams {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = QNetworkParams::init(arch, &mut rng).unwrap();
    for t in net.tensors_mut() {
        if t.name.ends_with(".bias") || t.name.ends_with(".beta") {
            for v in &mut t.values {
                *v = rng.gen_range(-0.2..0.2);
            }
        }
    }
    net
}

fn relative(a: f64, b: f64) -> Option<f64> {
    let scale = a.abs().max(b.abs());
    (scale > FLOOR).then(|| (a - b).abs() / scale)
}

/// Worst relative error between analytic and central-difference gradients
/// over `per_tensor` random coordinates of every tensor.
///
/// A ReLU or max-pool decision can flip inside `[w - STEP, w + STEP]`. The
/// central difference then straddles a kink and disagrees with the one taken
/// at `STEP / 100`; such coordinates are compared against the finer step.
fn worst_error(net: &QNetworkParams, loss: Loss, probes: usize, per_tensor: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let grid = net.architecture().input;
    let mut worst: f64 = 0.0;
    for _ in 0..probes {
        let (batch, targets) = random_batch(grid, 4, net.num_actions(), &mut rng);
        let refs: Vec<&Transition> = batch.iter().collect();
        let (_, grads) = loss_and_grads(net, &refs, &targets, loss).unwrap();
        for t in 0..net.tensors().len() {
            for _ in 0..per_tensor {
                let i = rng.gen_range(0..net.tensors()[t].values.len());
                let central = |h: f64| {
                    let mut plus = net.clone();
                    plus.tensors_mut()[t].values[i] += h;
                    let mut minus = net.clone();
                    minus.tensors_mut()[t].values[i] -= h;
                    let lp = loss_and_grads(&plus, &refs, &targets, loss).unwrap().0;
                    let lm = loss_and_grads(&minus, &refs, &targets, loss).unwrap().0;
                    (lp - lm) / (2.0 * h)
                };
                let analytic = grads.tensors[t].values[i];
                let mut numeric = central(STEP);
                if relative(analytic, numeric).is_some_and(|e| e >= TOLERANCE) {
                    let fine = central(STEP / 100.0);
                    if relative(numeric, fine).is_some_and(|e| e >= TOLERANCE) {
                        numeric = fine;
                    }
                }
                if let Some(e) = relative(analytic, numeric) {
                    worst = worst.max(e);
                }
            }
        }
    }
    worst
}

#[test]
fn fully_connected_gradients_match_finite_differences() {
    let arch = NetworkArchitecture::fully_connected(GridSpec::new(4, 6).unwrap(), 5);
    let net = probe_net(&arch, 1);
    let e = worst_error(&net, Loss::Mse, 20, 6, 10);
    assert!(e < TOLERANCE, "mse: {e}");
    let e = worst_error(&net, Loss::Huber, 20, 6, 11);
    assert!(e < TOLERANCE, "huber: {e}");
}

#[test]
fn convolutional_gradients_match_finite_differences() {
    let grid = GridSpec::new(6, 8).unwrap();
    let arch = NetworkArchitecture::new(grid, convolutional_layers(4), 4).unwrap();
    let net = probe_net(&arch, 2);
    let e = worst_error(&net, Loss::Mse, 20, 4, 12);
    assert!(e < TOLERANCE, "{e}");
}

#[test]
fn strided_padded_convolution_gradients() {
    let grid = GridSpec::new(7, 9).unwrap();
    let layers = vec![
        LayerSpec::Convolution {
            filters: 3,
            kernel: 3,
            stride: 2,
            padding: 1,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool { window: 2 },
        LayerSpec::Convolution {
            filters: 2,
            kernel: 2,
            stride: 1,
            padding: 0,
        },
        LayerSpec::BatchNorm,
        LayerSpec::Flatten,
        LayerSpec::FullyConnected { units: 3 },
    ];
    let arch = NetworkArchitecture::new(grid, layers, 3).unwrap();
    let net = probe_net(&arch, 3);
    let e = worst_error(&net, Loss::Mse, 20, 8, 13);
    assert!(e < TOLERANCE, "{e}");
}
