//! Spin operators as sums of ladder-operator monomials on a product basis.
//!
//! Every monomial maps a product basis state to at most one other basis
//! state, so the same term list serves dense materialization, sparse (CSR)
//! assembly and matrix-free application.

use faer::Mat;

use crate::error::{Error, Result};
use crate::linalg::{CMat, C64, I, ONE, ZERO};
use crate::spinsys::Spin;

/// Default cap on dimensions that may be materialized densely.
pub const DENSE_CAP: usize = 4096;

/// Product basis over sites; site 0 is the leftmost Kronecker factor and
/// local index 0 is `m = +s`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SpinBasis {
    spins: Vec<Spin>,
    strides: Vec<usize>,
    dim: usize,
}

impl SpinBasis {
    pub fn new(spins: &[Spin]) -> Self {
        let mut strides = vec![0; spins.len()];
        let mut stride = 1usize;
        for (k, s) in spins.iter().enumerate().rev() {
            strides[k] = stride;
            stride = stride.saturating_mul(s.multiplicity());
        }
        SpinBasis {
            spins: spins.to_vec(),
            strides,
            dim: stride,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_sites(&self) -> usize {
        self.spins.len()
    }

    pub fn spin(&self, site: usize) -> Spin {
        self.spins[site]
    }

    pub fn stride(&self, site: usize) -> usize {
        self.strides[site]
    }

    /// Local index of `site` in basis state `state`.
    pub fn local(&self, state: usize, site: usize) -> usize {
        (state / self.strides[site]) % self.spins[site].multiplicity()
    }

    /// Magnetic quantum number of `site` in basis state `state`.
    pub fn m(&self, state: usize, site: usize) -> f64 {
        self.spins[site].value() - self.local(state, site) as f64
    }

    /// Diagonal of `Σ_{sites} I_z`.
    pub fn total_z(&self, sites: &[usize]) -> Vec<f64> {
        (0..self.dim)
            .map(|st| sites.iter().map(|&k| self.m(st, k)).sum())
            .collect()
    }

    pub fn check_dense(&self) -> Result<()> {
        if self.dim > DENSE_CAP {
            return Err(Error::Capacity {
                what: "dense matrix dimension",
                count: self.dim,
                cap: DENSE_CAP,
            });
        }
        Ok(())
    }
}

/// Single-site factor of a monomial.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Ladder {
    Z,
    Plus,
    Minus,
}

impl Ladder {
    /// Applies the factor to local index `l` of a spin; returns the new local
    /// index and the matrix element.
    fn apply(self, spin: Spin, l: usize) -> Option<(usize, f64)> {
        let s = spin.value();
        let m = s - l as f64;
        match self {
            Ladder::Z => Some((l, m)),
            Ladder::Plus => {
                if l == 0 {
                    None
                } else {
                    Some((l - 1, (s * (s + 1.0) - m * (m + 1.0)).sqrt()))
                }
            }
            Ladder::Minus => {
                if l + 1 >= spin.multiplicity() {
                    None
                } else {
                    Some((l + 1, (s * (s + 1.0) - m * (m - 1.0)).sqrt()))
                }
            }
        }
    }
}

/// Cartesian spin component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Axis {
    X,
    Y,
    Z,
}

impl Axis {
    pub const ALL: [Axis; 3] = [Axis::X, Axis::Y, Axis::Z];

    fn ladder_expansion(self) -> Vec<(C64, Ladder)> {
        match self {
            Axis::X => vec![(C64::new(0.5, 0.0), Ladder::Plus), (C64::new(0.5, 0.0), Ladder::Minus)],
            Axis::Y => vec![(C64::new(0.0, -0.5), Ladder::Plus), (C64::new(0.0, 0.5), Ladder::Minus)],
            Axis::Z => vec![(ONE, Ladder::Z)],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Monomial {
    pub coeff: C64,
    /// At most two factors, on distinct sites.
    pub factors: Vec<(usize, Ladder)>,
}

impl Monomial {
    fn act(&self, basis: &SpinBasis, state: usize) -> Option<(usize, C64)> {
        let mut out = state;
        let mut amp = self.coeff;
        for &(site, op) in &self.factors {
            let l = basis.local(out, site);
            let (nl, v) = op.apply(basis.spin(site), l)?;
            out = out + nl * basis.stride(site) - l * basis.stride(site);
            amp *= v;
        }
        Some((out, amp))
    }
}

/// A linear combination of ladder monomials.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SpinOperator {
    pub terms: Vec<Monomial>,
}

impl SpinOperator {
    pub fn zero() -> Self {
        SpinOperator { terms: Vec::new() }
    }

    pub fn is_zero(&self) -> bool {
        self.terms.iter().all(|t| t.coeff == ZERO)
    }

    /// `c · I_axis(site)`.
    pub fn single(site: usize, axis: Axis, c: f64) -> Self {
        SpinOperator {
            terms: axis
                .ladder_expansion()
                .into_iter()
                .map(|(k, op)| Monomial {
                    coeff: k * c,
                    factors: vec![(site, op)],
                })
                .collect(),
        }
    }

    /// `c · I_a(i) · I_b(j)` for distinct sites.
    pub fn pair(i: usize, a: Axis, j: usize, b: Axis, c: f64) -> Self {
        assert_ne!(i, j, "pair terms need distinct sites");
        let mut terms = Vec::new();
        for (ka, oa) in a.ladder_expansion() {
            for (kb, ob) in b.ladder_expansion() {
                terms.push(Monomial {
                    coeff: ka * kb * c,
                    factors: vec![(i, oa), (j, ob)],
                });
            }
        }
        SpinOperator { terms }
    }

    /// `c · I_i·I_j`.
    pub fn heisenberg(i: usize, j: usize, c: f64) -> Self {
        let mut op = SpinOperator::pair(i, Axis::Z, j, Axis::Z, c);
        op.terms.push(Monomial {
            coeff: C64::new(0.5 * c, 0.0),
            factors: vec![(i, Ladder::Plus), (j, Ladder::Minus)],
        });
        op.terms.push(Monomial {
            coeff: C64::new(0.5 * c, 0.0),
            factors: vec![(i, Ladder::Minus), (j, Ladder::Plus)],
        });
        op
    }

    pub fn add_assign(&mut self, other: SpinOperator) {
        self.terms.extend(other.terms);
    }

    pub fn plus(mut self, other: &SpinOperator) -> Self {
        self.terms.extend(other.terms.iter().cloned());
        self
    }

    pub fn scaled(mut self, c: f64) -> Self {
        for t in &mut self.terms {
            t.coeff *= c;
        }
        self
    }

    /// Remaps site indices through `map` (used when restricting to a
    /// sub-basis).
    pub fn remap_sites(mut self, map: impl Fn(usize) -> usize) -> Self {
        for t in &mut self.terms {
            for f in &mut t.factors {
                f.0 = map(f.0);
            }
        }
        self
    }

    fn check_sites(&self, basis: &SpinBasis) -> Result<()> {
        for t in &self.terms {
            for &(s, _) in &t.factors {
                if s >= basis.n_sites() {
                    return Err(Error::InvalidOperator(format!(
                        "operator references site {s} outside a {}-site basis",
                        basis.n_sites()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Dense matrix on `basis`.
    pub fn to_dense(&self, basis: &SpinBasis) -> Result<CMat> {
        basis.check_dense()?;
        self.check_sites(basis)?;
        let d = basis.dim();
        let mut m = Mat::from_fn(d, d, |_, _| ZERO);
        for col in 0..d {
            for t in &self.terms {
                if let Some((row, amp)) = t.act(basis, col) {
                    m[(row, col)] += amp;
                }
            }
        }
        Ok(m)
    }

    /// Sparse matrix on `basis`.
    pub fn to_csr(&self, basis: &SpinBasis) -> Result<Csr> {
        self.check_sites(basis)?;
        let d = basis.dim();
        let mut triplets: Vec<(usize, usize, C64)> = Vec::new();
        for col in 0..d {
            for t in &self.terms {
                if let Some((row, amp)) = t.act(basis, col) {
                    triplets.push((row, col, amp));
                }
            }
        }
        Ok(Csr::from_triplets(d, triplets))
    }

    /// Returns the diagonal if every monomial is diagonal.
    pub fn diagonal(&self, basis: &SpinBasis) -> Option<Vec<f64>> {
        if self
            .terms
            .iter()
            .any(|t| t.factors.iter().any(|&(_, op)| op != Ladder::Z) || t.coeff.im != 0.0)
        {
            return None;
        }
        let d = basis.dim();
        let mut out = vec![0.0; d];
        for (st, o) in out.iter_mut().enumerate() {
            for t in &self.terms {
                if let Some((_, amp)) = t.act(basis, st) {
                    *o += amp.re;
                }
            }
        }
        Some(out)
    }
}

/// Compressed sparse row matrix.
#[derive(Clone, Debug)]
pub struct Csr {
    dim: usize,
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    vals: Vec<C64>,
}

impl Csr {
    fn from_triplets(dim: usize, mut triplets: Vec<(usize, usize, C64)>) -> Self {
        triplets.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        let mut row_ptr = vec![0usize; dim + 1];
        let mut cols = Vec::with_capacity(triplets.len());
        let mut vals: Vec<C64> = Vec::with_capacity(triplets.len());
        let mut last: Option<(usize, usize)> = None;
        for (r, c, v) in triplets {
            if last == Some((r, c)) {
                *vals.last_mut().expect("nonempty") += v;
            } else {
                cols.push(c);
                vals.push(v);
                row_ptr[r + 1] += 1;
                last = Some((r, c));
            }
        }
        for r in 0..dim {
            row_ptr[r + 1] += row_ptr[r];
        }
        Csr { dim, row_ptr, cols, vals }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn nnz(&self) -> usize {
        self.vals.len()
    }

    /// `out = self · v`.
    pub fn apply(&self, v: &[C64], out: &mut [C64]) {
        for r in 0..self.dim {
            let mut acc = ZERO;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * v[self.cols[k]];
            }
            out[r] = acc;
        }
    }

    /// `out += c · self · v`.
    pub fn apply_add(&self, c: C64, v: &[C64], out: &mut [C64]) {
        for r in 0..self.dim {
            let mut acc = ZERO;
            for k in self.row_ptr[r]..self.row_ptr[r + 1] {
                acc += self.vals[k] * v[self.cols[k]];
            }
            out[r] += c * acc;
        }
    }

    /// Upper bound on the spectral norm (max absolute row sum).
    pub fn norm_bound(&self) -> f64 {
        (0..self.dim)
            .map(|r| (self.row_ptr[r]..self.row_ptr[r + 1]).map(|k| self.vals[k].norm()).sum::<f64>())
            .fold(0.0, f64::max)
    }
}

/// Single-site matrix of `I_axis` for a spin.
pub fn local_axis(spin: Spin, axis: Axis) -> CMat {
    let basis = SpinBasis::new(&[spin]);
    SpinOperator::single(0, axis, 1.0)
        .to_dense(&basis)
        .expect("single-site dense")
}

/// `exp(+iθ(cosφ I_x + sinφ I_y))` on one spin: the propagator of
/// `−ω₁ I_φ` for a time `θ/ω₁`.
pub fn local_rotation(spin: Spin, phase: f64, angle: f64) -> CMat {
    let nx = local_axis(spin, Axis::X);
    let ny = local_axis(spin, Axis::Y);
    let d = spin.multiplicity();
    let (c, s) = (phase.cos(), phase.sin());
    let n = Mat::from_fn(d, d, |i, j| nx[(i, j)] * c + ny[(i, j)] * s);
    match spin {
        Spin::Half => {
            // (n·I)² = ¼ ⇒ exp(iθ n·I) = cos(θ/2) + 2i sin(θ/2) n·I
            let (ch, sh) = ((0.5 * angle).cos(), (0.5 * angle).sin());
            Mat::from_fn(d, d, |i, j| {
                let id = if i == j { ONE } else { ZERO };
                id * ch + I * (2.0 * sh) * n[(i, j)]
            })
        }
        Spin::One => {
            // (n·S)³ = n·S ⇒ exp(iθ n·S) = 1 + i sinθ n·S + (cosθ − 1)(n·S)²
            let n2 = &n * &n;
            Mat::from_fn(d, d, |i, j| {
                let id = if i == j { ONE } else { ZERO };
                id + I * angle.sin() * n[(i, j)] + n2[(i, j)] * (angle.cos() - 1.0)
            })
        }
    }
}

/// Dense Kronecker product of per-site factors (identity where `None`).
pub fn kron_sites(basis: &SpinBasis, locals: &[Option<CMat>]) -> Result<CMat> {
    basis.check_dense()?;
    assert_eq!(locals.len(), basis.n_sites());
    let mut acc = Mat::from_fn(1, 1, |_, _| ONE);
    for (site, local) in locals.iter().enumerate() {
        let m = basis.spin(site).multiplicity();
        let f = match local {
            Some(l) => l.clone(),
            None => crate::linalg::identity(m),
        };
        let (ar, ac) = (acc.nrows(), acc.ncols());
        acc = Mat::from_fn(ar * m, ac * m, |i, j| acc[(i / m, j / m)] * f[(i % m, j % m)]);
    }
    Ok(acc)
}

/// Applies a single-site matrix to a state vector in place.
pub fn apply_local(basis: &SpinBasis, site: usize, local: &CMat, v: &mut [C64]) {
    let m = basis.spin(site).multiplicity();
    let stride = basis.stride(site);
    let block = stride * m;
    let mut buf = [ZERO; 3];
    for outer in (0..basis.dim()).step_by(block) {
        for inner in 0..stride {
            let base = outer + inner;
            for (a, b) in buf.iter_mut().enumerate().take(m) {
                *b = v[base + a * stride];
            }
            for a in 0..m {
                let mut acc = ZERO;
                for (b, &x) in buf.iter().enumerate().take(m) {
                    acc += local[(a, b)] * x;
                }
                v[base + a * stride] = acc;
            }
        }
    }
}
