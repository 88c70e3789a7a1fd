//! Principal component analysis baseline.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues below this fraction of the largest are treated as zero when
/// deriving components from the Gram matrix.
const RANK_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct Pca {
    pub mean: Vec<f64>,
    /// `F × D`, orthonormal rows sorted by decreasing variance.
    pub components: Vec<f64>,
    /// Variance (population covariance eigenvalue) of each component.
    pub variances: Vec<f64>,
    pub dim: usize,
}

impl Pca {
    pub fn feature_dim(&self) -> usize {
        self.variances.len()
    }

    pub fn component(&self, i: usize) -> &[f64] {
        &self.components[i * self.dim..(i + 1) * self.dim]
    }

    pub fn encode(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.dim, "input dimension");
        (0..self.feature_dim())
            .map(|i| {
                self.component(i)
                    .iter()
                    .zip(x)
                    .zip(&self.mean)
                    .map(|((c, v), m)| c * (v - m))
                    .sum()
            })
            .collect()
    }

    pub fn reconstruct(&self, code: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (i, &c) in code.iter().enumerate() {
            for (o, v) in out.iter_mut().zip(self.component(i)) {
                *o += c * v;
            }
        }
        out
    }
}

/// Fits the top `f` principal directions of `samples` (each of length `dim`).
/// Uses the `N × N` Gram matrix when there are fewer samples than
/// dimensions, the `D × D` covariance otherwise. Directions beyond the data
/// rank are completed to an orthonormal set.
pub fn pca_fit(samples: &[Vec<f64>], f: usize) -> Result<Pca> {
    let n = samples.len();
    if n < f || n == 0 {
        return Err(Error::Rank {
            required: f,
            available: n,
        });
    }
    let dim = samples[0].len();
    if f > dim {
        return Err(Error::InvalidParameter(format!(
            "F = {f} exceeds dimension {dim}"
        )));
    }
    if let Some(bad) = samples.iter().find(|s| s.len() != dim) {
        return Err(Error::DimensionMismatch {
            expected: dim,
            actual: bad.len(),
        });
    }
    let mut mean = vec![0.0; dim];
    for s in samples {
        for (m, v) in mean.iter_mut().zip(s) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let xc = DMatrix::from_fn(n, dim, |r, c| samples[r][c] - mean[c]);

    let mut dirs: Vec<(f64, DVector<f64>)> = Vec::with_capacity(f);
    if n < dim {
        let gram = &xc * xc.transpose();
        let (values, vectors) = if n <= EXACT_GRAM_MAX {
            exact_top_eigen(gram, f)
        } else {
            subspace_top_eigen(&gram, f)
        };
        let top = values.first().copied().unwrap_or(0.0).max(0.0);
        let lifted = xc.tr_mul(&vectors);
        for (i, &lambda) in values.iter().enumerate() {
            if lambda <= top * RANK_TOL || lambda <= 0.0 {
                break;
            }
            let v = lifted.column(i) / lambda.sqrt();
            dirs.push((lambda / n as f64, v));
        }
    } else {
        let cov = xc.transpose() * &xc / n as f64;
        let eig = SymmetricEigen::new(cov);
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
        for &i in order.iter().take(f) {
            dirs.push((
                eig.eigenvalues[i].max(0.0),
                eig.eigenvectors.column(i).into_owned(),
            ));
        }
    }
    complete_basis(&mut dirs, dim, f);

    let mut components = Vec::with_capacity(f * dim);
    let mut variances = Vec::with_capacity(f);
    for (var, mut v) in dirs {
        let pivot = v.iamax();
        if v[pivot] < 0.0 {
            v = -v;
        }
        components.extend(v.iter());
        variances.push(var);
    }
    Ok(Pca {
        mean,
        components,
        variances,
        dim,
    })
}

/// Gram matrices up to this size are decomposed exactly; larger ones by
/// subspace iteration for the leading eigenpairs only.
const EXACT_GRAM_MAX: usize = 512;
/// Extra subspace columns beyond the requested count.
const OVERSAMPLE: usize = 32;
const SUBSPACE_MAX_ITERS: usize = 500;
const SUBSPACE_TOL: f64 = 1e-12;

/// The `f` largest eigenvalues in decreasing order with their eigenvectors
/// as columns.
fn exact_top_eigen(m: DMatrix<f64>, f: usize) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(m);
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    order.truncate(f);
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = eig.eigenvectors.select_columns(&order);
    (values, vectors)
}

/// Block subspace iteration with Rayleigh-Ritz extraction, stopped when the
/// leading `f` Ritz values stop changing.
fn subspace_top_eigen(m: &DMatrix<f64>, f: usize) -> (Vec<f64>, DMatrix<f64>) {
    let n = m.nrows();
    let l = (f + OVERSAMPLE).min(n);
    // Deterministic, well-spread start vectors.
    let start = DMatrix::from_fn(n, l, |r, c| {
        ((r * 7919 + c * 104_729 + 1) as f64 * 0.618_033_988_75).fract() - 0.5
    });
    let mut q = start.qr().q();
    let mut prev: Vec<f64> = Vec::new();
    for _ in 0..SUBSPACE_MAX_ITERS {
        let z = m * &q;
        let (values, _) = exact_top_eigen(q.transpose() * &z, f);
        let scale = values
            .first()
            .map_or(0.0, |v| v.abs())
            .max(f64::MIN_POSITIVE);
        let done = prev.len() == values.len()
            && values
                .iter()
                .zip(&prev)
                .all(|(a, b)| (a - b).abs() <= SUBSPACE_TOL * scale);
        q = z.qr().q();
        if done {
            break;
        }
        prev = values;
    }
    let (values, ritz) = exact_top_eigen(q.transpose() * m * &q, f);
    (values, q * ritz)
}

/// Extends `dirs` to `f` orthonormal vectors with zero variance using
/// Gram-Schmidt on coordinate axes.
fn complete_basis(dirs: &mut Vec<(f64, DVector<f64>)>, dim: usize, f: usize) {
    let mut axis = 0;
    while dirs.len() < f && axis < dim {
        let mut v = DVector::zeros(dim);
        v[axis] = 1.0;
        axis += 1;
        for _ in 0..2 {
            for (_, d) in dirs.iter() {
                let proj = d.dot(&v);
                v -= d * proj;
            }
        }
        let norm = v.norm();
        if norm > 1e-6 {
            dirs.push((0.0, v / norm));
        }
    }
}
