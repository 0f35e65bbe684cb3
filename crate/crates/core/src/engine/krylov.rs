//! Lanczos approximation of `exp(−iHt)·v` for sparse Hermitian `H`.

use faer::{Mat, Side};

use crate::error::{Error, Result};
use crate::hamiltonian::Csr;
use crate::linalg::{C64, ZERO};

#[derive(Clone, Debug)]
pub struct KrylovOptions {
    /// Largest Krylov subspace dimension.
    pub max_dim: usize,
    /// Accepted a posteriori error per substep (absolute, unit-norm input).
    pub tol: f64,
    /// Smallest substep relative to the requested time before giving up.
    pub min_fraction: f64,
}

impl Default for KrylovOptions {
    fn default() -> Self {
        KrylovOptions {
            max_dim: 30,
            tol: 1e-11,
            min_fraction: 1e-9,
        }
    }
}

/// Stateful propagator that remembers the last accepted substep.
#[derive(Clone, Debug)]
pub struct KrylovStepper {
    pub options: KrylovOptions,
    dt_hint: Option<f64>,
}

fn dot(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

fn norm(a: &[C64]) -> f64 {
    a.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

impl KrylovStepper {
    pub fn new(options: KrylovOptions) -> Self {
        KrylovStepper { options, dt_hint: None }
    }

    /// Replaces `v` by `exp(−iHt)·v`.
    pub fn apply(&mut self, h: &Csr, t: f64, v: &mut [C64]) -> Result<()> {
        if t == 0.0 {
            return Ok(());
        }
        let mut remaining = t;
        let mut dt = self.dt_hint.unwrap_or(t).min(t);
        let floor = t * self.options.min_fraction;
        while remaining > 0.0 {
            let step = dt.min(remaining);
            match self.try_step(h, step, v)? {
                Ok(()) => {
                    remaining -= step;
                    self.dt_hint = Some(step);
                    if step == dt {
                        dt *= 1.5;
                    }
                }
                Err(estimate) => {
                    dt = step * 0.5;
                    if dt < floor {
                        return Err(Error::KrylovStep {
                            t,
                            substep: dt,
                            estimate,
                        });
                    }
                }
            }
        }
        Ok(())
    }

    /// One Lanczos step of length `dt`. The inner `Err` carries the error
    /// estimate of a rejected step; `v` is untouched in that case.
    fn try_step(&self, h: &Csr, dt: f64, v: &mut [C64]) -> Result<std::result::Result<(), f64>> {
        let d = v.len();
        let beta0 = norm(v);
        if beta0 == 0.0 {
            return Ok(Ok(()));
        }
        let m_max = self.options.max_dim.min(d).max(1);
        let mut basis: Vec<Vec<C64>> = Vec::with_capacity(m_max);
        basis.push(v.iter().map(|x| x / beta0).collect());
        let mut alpha = Vec::with_capacity(m_max);
        let mut beta = Vec::with_capacity(m_max);
        let mut w = vec![ZERO; d];
        let mut tail = 0.0;
        for j in 0..m_max {
            h.apply(&basis[j], &mut w);
            let a = dot(&basis[j], &w).re;
            for (wi, qi) in w.iter_mut().zip(&basis[j]) {
                *wi -= qi * a;
            }
            if j > 0 {
                let b: f64 = beta[j - 1];
                for (wi, qi) in w.iter_mut().zip(&basis[j - 1]) {
                    *wi -= qi * b;
                }
            }
            // full reorthogonalization keeps the small basis orthonormal
            for q in &basis {
                let c = dot(q, &w);
                for (wi, qi) in w.iter_mut().zip(q) {
                    *wi -= qi * c;
                }
            }
            alpha.push(a);
            let b = norm(&w);
            if j + 1 == m_max || b <= 1e-13 * (a.abs() + 1.0) {
                tail = if b <= 1e-13 * (a.abs() + 1.0) { 0.0 } else { b };
                break;
            }
            beta.push(b);
            basis.push(w.iter().map(|x| x / b).collect());
        }
        let m = alpha.len();
        let t_mat = Mat::<f64>::from_fn(m, m, |i, j| {
            if i == j {
                alpha[i]
            } else if i + 1 == j {
                beta[i]
            } else if j + 1 == i {
                beta[j]
            } else {
                0.0
            }
        });
        let evd = t_mat
            .self_adjoint_eigen(Side::Lower)
            .map_err(|e| Error::Internal(format!("tridiagonal eigendecomposition failed: {e:?}")))?;
        let s = evd.S().column_vector();
        let q = evd.U();
        // c = Q · diag(e^{−iλ dt}) · Qᵀ e₁
        let coeffs: Vec<C64> = (0..m)
            .map(|i| {
                (0..m)
                    .map(|k| C64::from_polar(q[(i, k)] * q[(0, k)], -s[k] * dt))
                    .sum()
            })
            .collect();
        let estimate = tail * coeffs[m - 1].norm();
        if estimate > self.options.tol {
            return Ok(Err(estimate));
        }
        for (i, vi) in v.iter_mut().enumerate() {
            *vi = basis
                .iter()
                .zip(&coeffs)
                .map(|(b, c)| b[i] * c)
                .sum::<C64>()
                * beta0;
        }
        Ok(Ok(()))
    }
}
