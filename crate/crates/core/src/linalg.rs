//! Cell-centred stencil operators and Jacobi-preconditioned conjugate gradients.

use crate::error::{check_len, Error, Result};

/// Symmetric operator of the form
/// `(A x)_i = d_i x_i + Σ_{faces ij} t_ij (x_i − x_j)`
/// on a structured box of cells in x-fastest order.
///
/// `transmissibility[a][i]` couples cell `i` to its `+a` neighbour; entries of
/// cells on the upper boundary along `a` are zero.
#[derive(Debug, Clone)]
pub struct FaceOperator {
    dims: Vec<usize>,
    strides: Vec<usize>,
    transmissibility: Vec<Vec<f64>>,
    diagonal_shift: Vec<f64>,
}

impl FaceOperator {
    /// Builds an operator with per-face coefficients from `face_coefficient(axis, lower_cell)`.
    pub fn from_faces(
        dims: &[usize],
        diagonal_shift: Vec<f64>,
        mut face_coefficient: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let n: usize = dims.iter().product();
        check_len(n, diagonal_shift.len())?;
        let strides = strides(dims);
        let mut transmissibility = Vec::with_capacity(dims.len());
        for (a, &len) in dims.iter().enumerate() {
            let stride = strides[a];
            let t: Vec<f64> = (0..n)
                .map(|i| {
                    if (i / stride) % len + 1 < len {
                        face_coefficient(a, i)
                    } else {
                        0.0
                    }
                })
                .collect();
            transmissibility.push(t);
        }
        Ok(Self {
            dims: dims.to_vec(),
            strides,
            transmissibility,
            diagonal_shift,
        })
    }

    pub fn dim(&self) -> usize {
        self.diagonal_shift.len()
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn strides(&self) -> &[usize] {
        &self.strides
    }

    /// Coefficient of the face between `cell` and its `+axis` neighbour.
    pub fn transmissibility(&self, axis: usize, cell: usize) -> f64 {
        self.transmissibility[axis][cell]
    }

    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        for ((yi, xi), d) in y.iter_mut().zip(x).zip(&self.diagonal_shift) {
            *yi = d * xi;
        }
        for (t, &s) in self.transmissibility.iter().zip(&self.strides) {
            let n = x.len() - s;
            for i in 0..n {
                let flux = t[i] * (x[i] - x[i + s]);
                y[i] += flux;
                y[i + s] -= flux;
            }
        }
    }

    pub fn diagonal(&self) -> Vec<f64> {
        let mut diag = self.diagonal_shift.clone();
        for (t, &s) in self.transmissibility.iter().zip(&self.strides) {
            for i in 0..diag.len() - s {
                diag[i] += t[i];
                diag[i + s] += t[i];
            }
        }
        diag
    }
}

pub(crate) fn strides(dims: &[usize]) -> Vec<usize> {
    let mut s = Vec::with_capacity(dims.len());
    let mut acc = 1;
    for &n in dims {
        s.push(acc);
        acc *= n;
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgSettings {
    pub relative_tolerance: f64,
    pub max_iterations: usize,
}

impl Default for CgSettings {
    fn default() -> Self {
        Self {
            relative_tolerance: 1e-10,
            max_iterations: 20_000,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CgReport {
    pub iterations: usize,
    pub relative_residual: f64,
}

/// Solves `A x = b` for SPD `A` with a Jacobi preconditioner, starting from
/// the contents of `x`.
pub fn conjugate_gradient(op: &FaceOperator, b: &[f64], x: &mut [f64], settings: CgSettings) -> Result<CgReport> {
    let n = op.dim();
    check_len(n, b.len())?;
    check_len(n, x.len())?;
    let b_norm = norm(b);
    if b_norm == 0.0 {
        x.fill(0.0);
        return Ok(CgReport {
            iterations: 0,
            relative_residual: 0.0,
        });
    }
    let inv_diag: Vec<f64> = op.diagonal().iter().map(|d| 1.0 / d).collect();
    if inv_diag.iter().any(|v| !v.is_finite() || *v <= 0.0) {
        return Err(Error::InvalidArgument(
            "operator diagonal must be strictly positive".into(),
        ));
    }

    let mut r = vec![0.0; n];
    op.apply(x, &mut r);
    for (ri, bi) in r.iter_mut().zip(b) {
        *ri = bi - *ri;
    }
    let mut z: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, m)| r * m).collect();
    let mut p = z.clone();
    let mut ap = vec![0.0; n];
    let mut rz = dot(&r, &z);
    let mut residual = norm(&r) / b_norm;

    for iteration in 0..settings.max_iterations {
        if residual <= settings.relative_tolerance {
            return Ok(CgReport {
                iterations: iteration,
                relative_residual: residual,
            });
        }
        op.apply(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            return Err(Error::NonConvergence {
                iterations: iteration,
                residual,
            });
        }
        let alpha = rz / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        residual = norm(&r) / b_norm;
        for i in 0..n {
            z[i] = r[i] * inv_diag[i];
        }
        let rz_next = dot(&r, &z);
        let beta = rz_next / rz;
        rz = rz_next;
        for i in 0..n {
            p[i] = z[i] + beta * p[i];
        }
    }
    if residual <= settings.relative_tolerance {
        Ok(CgReport {
            iterations: settings.max_iterations,
            relative_residual: residual,
        })
    } else {
        Err(Error::NonConvergence {
            iterations: settings.max_iterations,
            residual,
        })
    }
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn laplacian(dims: &[usize], shift: f64) -> FaceOperator {
        let n = dims.iter().product();
        FaceOperator::from_faces(dims, vec![shift; n], |_, _| 1.0).unwrap()
    }

    #[test]
    fn apply_matches_dense_assembly() {
        let op = FaceOperator::from_faces(&[3, 2], vec![0.5; 6], |a, i| 1.0 + a as f64 + 0.1 * i as f64).unwrap();
        let mut dense = vec![vec![0.0; 6]; 6];
        for j in 0..6 {
            let mut e = vec![0.0; 6];
            e[j] = 1.0;
            let mut col = vec![0.0; 6];
            op.apply(&e, &mut col);
            for i in 0..6 {
                dense[i][j] = col[i];
            }
        }
        for i in 0..6 {
            for j in 0..6 {
                assert!((dense[i][j] - dense[j][i]).abs() < 1e-15);
            }
        }
        // row-end cell 2 has no +x neighbour
        assert_eq!(dense[2][3], 0.0);
        let diag = op.diagonal();
        for i in 0..6 {
            assert!((diag[i] - dense[i][i]).abs() < 1e-15);
        }
    }

    #[test]
    fn cg_solves_shifted_laplacian() {
        let op = laplacian(&[7, 5], 0.3);
        let truth: Vec<f64> = (0..35).map(|i| (i as f64 * 0.37).sin()).collect();
        let mut b = vec![0.0; 35];
        op.apply(&truth, &mut b);
        let mut x = vec![0.0; 35];
        let report = conjugate_gradient(&op, &b, &mut x, CgSettings::default()).unwrap();
        assert!(report.relative_residual <= 1e-10);
        for (a, t) in x.iter().zip(&truth) {
            assert!((a - t).abs() < 1e-8);
        }
    }

    #[test]
    fn zero_rhs_gives_zero() {
        let op = laplacian(&[4, 4], 1.0);
        let mut x = vec![3.0; 16];
        let report = conjugate_gradient(&op, &[0.0; 16], &mut x, CgSettings::default()).unwrap();
        assert_eq!(report.iterations, 0);
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn reports_non_convergence() {
        let op = laplacian(&[20, 20], 1e-4);
        let b: Vec<f64> = (0..400).map(|i| (i % 7) as f64).collect();
        let mut x = vec![0.0; 400];
        let settings = CgSettings {
            relative_tolerance: 1e-12,
            max_iterations: 3,
        };
        match conjugate_gradient(&op, &b, &mut x, settings) {
            Err(Error::NonConvergence { iterations, .. }) => assert_eq!(iterations, 3),
            other => panic!("expected non-convergence, got {other:?}"),
        }
    }
}
