use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Network;

/// Gradients whose analytic and numeric magnitudes both fall below this are
/// compared in absolute terms.
const GRAD_FLOOR: f64 = 1e-9;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error over all checked parameters.
    pub max_rel_error: f64,
    /// `(layer index, parameter group, max relative error)`.
    pub groups: Vec<(usize, usize, f64)>,
    pub checked: usize,
}

/// `mse(plus, x) - mse(minus, x)` evaluated as a sum of per-element
/// differences, avoiding cancellation between two nearly equal losses.
fn loss_difference(plus: &[f64], minus: &[f64], x: &[f64]) -> f64 {
    let sum: f64 = plus
        .iter()
        .zip(minus)
        .zip(x)
        .map(|((&p, &m), &x)| (p - m) * (p + m - 2.0 * x))
        .sum();
    sum / x.len() as f64
}

/// Compares backpropagated gradients of the reconstruction loss on `input`
/// against central differences, for up to `per_group` randomly chosen
/// entries of every parameter tensor.
pub fn gradient_check(
    net: &Network<f64>,
    input: &[f64],
    epsilon: f64,
    per_group: usize,
    seed: u64,
) -> GradCheckReport {
    let (_, grads) = net.loss_and_gradients(input, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = net.clone();
    let mut groups = Vec::new();
    let mut checked = 0;
    let mut max_rel_error = 0.0f64;
    for (li, layer) in net.layers.iter().enumerate() {
        for (pi, p) in layer.params.iter().enumerate() {
            let n = per_group.min(p.len());
            let mut worst = 0.0f64;
            for idx in sample(&mut rng, p.len(), n) {
                let orig = p[idx];
                probe.layers[li].params[pi][idx] = orig + epsilon;
                let plus = probe.forward_trace(input, 1).activations.pop().unwrap();
                probe.layers[li].params[pi][idx] = orig - epsilon;
                let minus = probe.forward_trace(input, 1).activations.pop().unwrap();
                probe.layers[li].params[pi][idx] = orig;
                let numeric = loss_difference(&plus, &minus, input) / (2.0 * epsilon);
                let analytic = grads[li][pi][idx];
                let rel =
                    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRAD_FLOOR);
                worst = worst.max(rel);
                checked += 1;
            }
            max_rel_error = max_rel_error.max(worst);
            groups.push((li, pi, worst));
        }
    }
    GradCheckReport {
        max_rel_error,
        groups,
        checked,
    }
}
