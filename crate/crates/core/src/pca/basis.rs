use super::patches::PcaConfig;
use crate::error::{Error, Result};
use crate::tensor::gemm::{gemm, MatRef};
use crate::tensor::{Tape, Tensor, Var};

const JACOBI_TOL: f64 = 1e-10;
const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigen-decomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymmetricEigen {
    /// Non-increasing.
    pub values: Vec<f64>,
    /// `vectors[i]` pairs with `values[i]`; sign fixed so the largest-magnitude entry is positive.
    pub vectors: Vec<Vec<f64>>,
}

/// Cyclic Jacobi eigensolver for a row-major symmetric `n x n` matrix. Sweeps until
/// the off-diagonal Frobenius norm drops below `1e-10` (relative to the matrix
/// norm when that exceeds one).
pub fn symmetric_eigen(matrix: &[f64], n: usize) -> Result<SymmetricEigen> {
    if matrix.len() != n * n {
        return Err(Error::shape(format!("{} entries is not a {n}x{n} matrix", matrix.len())));
    }
    if matrix.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("eigensolver input".into()));
    }
    let mut a = matrix.to_vec();
    for i in 0..n {
        for j in 0..i {
            let m = 0.5 * (a[i * n + j] + a[j * n + i]);
            a[i * n + j] = m;
            a[j * n + i] = m;
        }
    }
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    let norm = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let tol = JACOBI_TOL * norm.max(1.0);
    let off = |a: &[f64]| {
        let mut s = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[i * n + j] * a[i * n + j];
                }
            }
        }
        s.sqrt()
    };
    let mut sweeps = 0;
    while off(&a) >= tol {
        if sweeps == JACOBI_MAX_SWEEPS {
            return Err(Error::Convergence(format!("jacobi did not converge in {JACOBI_MAX_SWEEPS} sweeps")));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k * n + p], a[k * n + q]);
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p * n + k], a[q * n + k]);
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for k in 0..n {
                    let (vkp, vkq) = (v[k * n + p], v[k * n + q]);
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[j * n + j].total_cmp(&a[i * n + i]).then(i.cmp(&j)));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let vectors = order
        .iter()
        .map(|&i| {
            let mut col: Vec<f64> = (0..n).map(|k| v[k * n + i]).collect();
            let lead = col.iter().fold(0.0f64, |m, x| if x.abs() > m.abs() { *x } else { m });
            if lead < 0.0 {
                col.iter_mut().for_each(|x| *x = -*x);
            }
            col
        })
        .collect();
    Ok(SymmetricEigen { values, vectors })
}

/// Mean and principal directions of one channel's active patches.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelBasis {
    pub mean: Vec<f64>,
    /// Orthonormal, one per kept component.
    pub components: Vec<Vec<f64>>,
    /// Non-increasing, clamped at zero.
    pub eigenvalues: Vec<f64>,
}

impl ChannelBasis {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Loadings `components . (patch - mean)`.
    pub fn project(&self, patch: &[f64]) -> Result<Vec<f64>> {
        if patch.len() != self.dim() {
            return Err(Error::shape(format!("patch of {} values, basis dimension {}", patch.len(), self.dim())));
        }
        Ok(self
            .components
            .iter()
            .map(|c| c.iter().zip(patch).zip(&self.mean).map(|((ci, p), m)| ci * (p - m)).sum())
            .collect())
    }

    /// `mean + sum_g v_g component_g`.
    pub fn reconstruct(&self, loadings: &[f64]) -> Vec<f64> {
        let mut out = self.mean.clone();
        for (c, v) in self.components.iter().zip(loadings) {
            out.iter_mut().zip(c).for_each(|(o, ci)| *o += v * ci);
        }
        out
    }

    /// Loadings `[P, G]` of gathered patches `[P, r*r]` on the tape.
    pub fn project_tape(&self, tape: &mut Tape, patches: Var) -> Result<Var> {
        let shape = tape.shape(patches).to_vec();
        if shape.len() != 2 || shape[1] != self.dim() {
            return Err(Error::shape(format!("patches {shape:?}, basis dimension {}", self.dim())));
        }
        let mean = tape.constant(Tensor::new(vec![1, self.dim()], self.mean.clone())?);
        let centered = tape.sub(patches, mean)?;
        let g = self.components.len();
        let mut ct = vec![0.0; self.dim() * g];
        for (j, c) in self.components.iter().enumerate() {
            for (i, v) in c.iter().enumerate() {
                ct[i * g + j] = *v;
            }
        }
        let ct = tape.constant(Tensor::new(vec![self.dim(), g], ct)?);
        tape.matmul(centered, ct)
    }
}

/// Mean-centered covariance eigendecomposition of `patches`, keeping the top `g` pairs.
pub fn fit_pca(patches: &[&[f64]], g: usize) -> Result<ChannelBasis> {
    let n = patches.len();
    if n < g + 1 {
        return Err(Error::invalid(format!("PCA with {g} components needs at least {} patches, got {n}", g + 1)));
    }
    let dim = patches[0].len();
    if dim == 0 || patches.iter().any(|p| p.len() != dim) {
        return Err(Error::shape("patches must share one non-zero dimension"));
    }
    if g == 0 || g > dim {
        return Err(Error::invalid(format!("cannot keep {g} components of a {dim}-dimensional basis")));
    }
    let mut mean = vec![0.0; dim];
    for p in patches {
        mean.iter_mut().zip(*p).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut centered = Vec::with_capacity(n * dim);
    for p in patches {
        centered.extend(p.iter().zip(&mean).map(|(v, m)| v - m));
    }
    let mut cov = vec![0.0; dim * dim];
    gemm(MatRef::transposed(&centered, n, dim), MatRef::row_major(&centered, n, dim), &mut cov, 0.0);
    cov.iter_mut().for_each(|c| *c /= n as f64);
    let eig = symmetric_eigen(&cov, dim)?;
    Ok(ChannelBasis {
        mean,
        components: eig.vectors.into_iter().take(g).collect(),
        eigenvalues: eig.values.into_iter().take(g).map(|v| v.max(0.0)).collect(),
    })
}

/// Per-channel bases for the last tapped layer.
#[derive(Clone, Debug, PartialEq)]
pub struct PrincipalBasis {
    pub config: PcaConfig,
    pub channels: Vec<ChannelBasis>,
}
