//! Minimal feed-forward network stack with hand-written backpropagation.
//!
//! Networks are generic over [`Scalar`] so the same code trains in `f32` and
//! is gradient-checked in `f64`. Activations travel as row-major
//! `batch × len` buffers.

mod gradcheck;
mod layer;
mod train;

pub use gradcheck::{gradient_check, GradCheckReport};
pub use layer::{Layer, LayerKind};
pub use train::{train, TrainConfig, TrainReport};

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::patch::{PATCH_CHANNELS, PATCH_LEN, PATCH_SIZE};

pub trait Scalar: Float + FromPrimitive + Default + Debug + Send + Sync + Sum + 'static {
    /// `C = alpha * A * B + beta * C` with arbitrary strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );

    fn from_f32_lossy(v: f32) -> Self;
    fn to_f32_lossy(self) -> f32;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("representable literal")
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
                    if rows == 0 || cols == 0 {
                        0
                    } else {
                        ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
                    }
                };
                assert!(a.len() >= span(m, k, rsa, csa));
                assert!(b.len() >= span(k, n, rsb, csb));
                assert!(c.len() >= span(m, n, rsc, csc));
                // SAFETY: the extents of all three operands were checked above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }

            fn from_f32_lossy(v: f32) -> Self {
                v as $t
            }

            fn to_f32_lossy(self) -> f32 {
                self as f32
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

/// Which architecture family a network belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetKind {
    Autoencoder,
    ConvAutoencoder,
}

/// Channel widths for the convolutional autoencoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CaeWidths {
    pub conv1: usize,
    pub conv2: usize,
    pub conv3: usize,
    pub conv4: usize,
}

impl Default for CaeWidths {
    fn default() -> Self {
        Self {
            conv1: 16,
            conv2: 16,
            conv3: 32,
            conv4: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network<T: Scalar> {
    pub layers: Vec<Layer<T>>,
    /// Descriptor width.
    pub feature_dim: usize,
    /// Number of leading layers forming the encoder.
    pub encoder_len: usize,
}

/// Outputs of every layer for one batch, kept for backpropagation.
pub struct ForwardTrace<T> {
    /// `activations[0]` is the input, `activations[i + 1]` the output of layer `i`.
    pub activations: Vec<Vec<T>>,
    aux: Vec<Vec<u32>>,
    pub batch: usize,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn output(&self) -> &[T] {
        self.activations.last().expect("non-empty trace")
    }
}

impl<T: Scalar> Network<T> {
    /// Wraps a layer stack. The encoder ends after the first dense layer with
    /// `feature_dim` outputs, plus a directly following activation.
    pub fn from_layers(layers: Vec<Layer<T>>, feature_dim: usize) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidParameter(
                "network needs at least one layer".into(),
            ));
        }
        for pair in layers.windows(2) {
            if pair[0].output_len() != pair[1].input_len() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].output_len(),
                    actual: pair[1].input_len(),
                });
            }
        }
        let bottleneck = layers
            .iter()
            .position(
                |l| matches!(l.kind, LayerKind::Dense { outputs, .. } if outputs == feature_dim),
            )
            .ok_or_else(|| {
                Error::InvalidParameter(format!("no dense bottleneck of width {feature_dim}"))
            })?;
        let mut encoder_len = bottleneck + 1;
        if layers
            .get(encoder_len)
            .is_some_and(|l| matches!(l.kind, LayerKind::Tanh { .. } | LayerKind::PRelu { .. }))
        {
            encoder_len += 1;
        }
        Ok(Self {
            layers,
            feature_dim,
            encoder_len,
        })
    }

    /// Fully connected autoencoder `in → hidden → F → hidden → in`, tanh throughout.
    pub fn autoencoder(feature_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = vec![
            Layer::dense(PATCH_LEN, hidden, &mut rng),
            Layer::tanh(hidden),
            Layer::dense(hidden, feature_dim, &mut rng),
            Layer::tanh(feature_dim),
            Layer::dense(feature_dim, hidden, &mut rng),
            Layer::tanh(hidden),
            Layer::dense(hidden, PATCH_LEN, &mut rng),
            Layer::tanh(PATCH_LEN),
        ];
        Self::from_layers(layers, feature_dim).expect("consistent autoencoder shapes")
    }

    /// Convolutional autoencoder: 5×5 convolutions with PReLU, one 2×2
    /// max-pool, a linear fully-connected bottleneck, a learned 2×2
    /// deconvolution back to full resolution and a tanh output.
    pub fn conv_autoencoder(feature_dim: usize, w: CaeWidths, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = PATCH_SIZE;
        let h = s / 2;
        let layers = vec![
            Layer::conv(PATCH_CHANNELS, w.conv1, s, s, &mut rng),
            Layer::prelu(w.conv1, s * s),
            Layer::conv(w.conv1, w.conv2, s, s, &mut rng),
            Layer::max_pool(w.conv2, s, s),
            Layer::conv(w.conv2, w.conv3, h, h, &mut rng),
            Layer::prelu(w.conv3, h * h),
            Layer::dense(w.conv3 * h * h, feature_dim, &mut rng),
            Layer::dense(feature_dim, w.conv3 * h * h, &mut rng),
            Layer::deconv(w.conv3, w.conv3, h, h, &mut rng),
            Layer::conv(w.conv3, w.conv4, s, s, &mut rng),
            Layer::prelu(w.conv4, s * s),
            Layer::conv(w.conv4, PATCH_CHANNELS, s, s, &mut rng),
            Layer::tanh(PATCH_LEN),
        ];
        Self::from_layers(layers, feature_dim).expect("consistent autoencoder shapes")
    }

    pub fn kind(&self) -> NetKind {
        if self
            .layers
            .iter()
            .any(|l| matches!(l.kind, LayerKind::Conv2d { .. }))
        {
            NetKind::ConvAutoencoder
        } else {
            NetKind::Autoencoder
        }
    }

    pub fn input_len(&self) -> usize {
        self.layers[0].input_len()
    }

    pub fn output_len(&self) -> usize {
        self.layers.last().map_or(0, Layer::output_len)
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.params.iter().map(Vec::len).sum::<usize>())
            .sum()
    }

    /// Runs the whole network on a batch, recording every activation.
    pub fn forward_trace(&self, input: &[T], batch: usize) -> ForwardTrace<T> {
        assert_eq!(input.len(), batch * self.input_len(), "input batch shape");
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut aux = Vec::with_capacity(self.layers.len());
        activations.push(input.to_vec());
        for layer in &self.layers {
            let (out, a) = layer.forward(activations.last().unwrap(), batch);
            activations.push(out);
            aux.push(a);
        }
        ForwardTrace {
            activations,
            aux,
            batch,
        }
    }

    /// Encoder output for a batch.
    pub fn encode_batch(&self, input: &[T], batch: usize) -> Vec<T> {
        assert_eq!(input.len(), batch * self.input_len(), "input batch shape");
        let mut x = input.to_vec();
        for layer in &self.layers[..self.encoder_len] {
            x = layer.forward(&x, batch).0;
        }
        x
    }

    /// `(descriptor, reconstruction)` for a single input.
    pub fn forward(&self, input: &[T]) -> (Vec<T>, Vec<T>) {
        let trace = self.forward_trace(input, 1);
        (
            trace.activations[self.encoder_len].clone(),
            trace.output().to_vec(),
        )
    }

    /// Mean squared reconstruction error against the input itself.
    pub fn reconstruction_loss(&self, input: &[T], batch: usize) -> T {
        let trace = self.forward_trace(input, batch);
        mse(trace.output(), input)
    }

    /// Loss and parameter gradients of the mean squared reconstruction error
    /// over the batch (targets = inputs).
    pub fn loss_and_gradients(&self, input: &[T], batch: usize) -> (T, Vec<Vec<Vec<T>>>) {
        let trace = self.forward_trace(input, batch);
        let out = trace.output();
        let loss = mse(out, input);
        let scale = T::lit(2.0) / T::from_usize(out.len()).unwrap();
        let mut grad: Vec<T> = out
            .iter()
            .zip(input)
            .map(|(&y, &x)| (y - x) * scale)
            .collect();
        let mut grads: Vec<Vec<Vec<T>>> = self
            .layers
            .iter()
            .map(|l| l.params.iter().map(|p| vec![T::zero(); p.len()]).collect())
            .collect();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            grad = layer.backward(
                &trace.activations[i],
                &trace.activations[i + 1],
                &trace.aux[i],
                &grad,
                batch,
                &mut grads[i],
            );
        }
        (loss, grads)
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Network<U> {
        Network {
            layers: self.layers.iter().map(Layer::cast).collect(),
            feature_dim: self.feature_dim,
            encoder_len: self.encoder_len,
        }
    }
}

/// Mean squared difference with compensated summation.
pub(crate) fn mse<T: Scalar>(a: &[T], b: &[T]) -> T {
    let (mut sum, mut comp) = (T::zero(), T::zero());
    for (&x, &y) in a.iter().zip(b) {
        let term = (x - y) * (x - y);
        let t = sum + term;
        comp = comp
            + if sum.abs() >= term.abs() {
                (sum - t) + term
            } else {
                (term - t) + sum
            };
        sum = t;
    }
    (sum + comp) / T::from_usize(a.len().max(1)).unwrap()
}


#[cfg(test)]
mod training_tests {
    use super::*;
    use crate::geom::Vec3;
    use crate::patch::Patch;
    use rand::Rng;

    fn random_patch(seed: u64) -> Patch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Patch {
            data: (0..PATCH_LEN)
                .map(|_| rng.random_range(-0.9f32..0.9))
                .collect(),
            center_point: Vec3::zeros(),
            source_pixel: (0, 0),
            footprint_px: 0.0,
            valid: true,
        }
    }

    fn as_f64(p: &Patch) -> Vec<f64> {
        p.data.iter().map(|&v| v as f64).collect()
    }

    #[test]
    fn linear_autoencoder_gradients_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layers = vec![
            Layer::dense(PATCH_LEN, 8, &mut rng),
            Layer::dense(8, PATCH_LEN, &mut rng),
        ];
        let net = Network::<f64>::from_layers(layers, 8).unwrap();
        let r = gradient_check(&net, &as_f64(&random_patch(1)), 1e-5, 16, 0);
        assert!(r.max_rel_error < 1e-7, "{r:?}");
        assert_eq!(r.groups.len(), 4);
    }

    #[test]
    fn small_cae_gradients() {
        let w = CaeWidths {
            conv1: 3,
            conv2: 3,
            conv3: 4,
            conv4: 3,
        };
        let net = Network::<f64>::conv_autoencoder(8, w, 2);
        let r = gradient_check(&net, &as_f64(&random_patch(2)), 1e-5, 6, 1);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }

    #[test]
    fn zero_learning_rate_keeps_loss_constant() {
        let patches: Vec<Patch> = (0..6).map(random_patch).collect();
        let mut net = Network::<f32>::autoencoder(8, 16, 3);
        let cfg = TrainConfig {
            batch_size: 4,
            learning_rate: 0.0,
            iterations: 30,
            seed: 1,
            augment: true,
        };
        let r = train(&mut net, &patches, &cfg).unwrap();
        assert_eq!(r.loss_curve.len(), 4);
        assert!(r.loss_curve.iter().all(|p| p.1 == r.loss_curve[0].1));
    }

    #[test]
    fn divergence_is_reported() {
        let patches: Vec<Patch> = (0..4).map(random_patch).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let layers = vec![
            Layer::dense(PATCH_LEN, 8, &mut rng),
            Layer::dense(8, PATCH_LEN, &mut rng),
        ];
        let mut net = Network::<f32>::from_layers(layers, 8).unwrap();
        let cfg = TrainConfig {
            batch_size: 4,
            learning_rate: 1e4,
            iterations: 50,
            seed: 1,
            augment: false,
        };
        assert!(matches!(
            train(&mut net, &patches, &cfg),
            Err(Error::Diverged { .. })
        ));
    }
}
