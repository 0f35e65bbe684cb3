//! Dense complex linear algebra helpers on top of `faer`.

use faer::{Mat, Side};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type CMat = Mat<C64>;

pub const ZERO: C64 = C64 { re: 0.0, im: 0.0 };
pub const ONE: C64 = C64 { re: 1.0, im: 0.0 };
pub const I: C64 = C64 { re: 0.0, im: 1.0 };

/// Forces single-threaded kernels inside `faer`. Results then do not depend
/// on the size of whatever rayon pool the caller runs in.
pub fn pin_sequential() {
    faer::set_global_parallelism(faer::Par::Seq);
}

pub fn identity(d: usize) -> CMat {
    Mat::from_fn(d, d, |i, j| if i == j { ONE } else { ZERO })
}

pub fn zeros(d: usize) -> CMat {
    Mat::from_fn(d, d, |_, _| ZERO)
}

pub fn adjoint(m: &CMat) -> CMat {
    m.adjoint().to_owned()
}

pub fn matmul(a: &CMat, b: &CMat) -> CMat {
    a * b
}

/// `u · m · u†`.
pub fn conjugate(u: &CMat, m: &CMat) -> CMat {
    let um = u * m;
    &um * u.adjoint()
}

/// `u† · m · u`.
pub fn conjugate_adjoint(u: &CMat, m: &CMat) -> CMat {
    let m_u = m * u;
    u.adjoint() * &m_u
}

/// `Tr(a · b)` without forming the product.
pub fn trace_product(a: &CMat, b: &CMat) -> C64 {
    let d = a.nrows();
    let mut acc = ZERO;
    for j in 0..d {
        for i in 0..d {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

/// `Tr(m · diag(w))` for a real diagonal.
pub fn trace_with_diagonal(m: &CMat, w: &[f64]) -> C64 {
    w.iter()
        .enumerate()
        .map(|(i, &wi)| m[(i, i)] * wi)
        .sum()
}

pub fn max_abs(m: &CMat) -> f64 {
    let mut out = 0.0f64;
    for j in 0..m.ncols() {
        for i in 0..m.nrows() {
            out = out.max(m[(i, j)].norm());
        }
    }
    out
}

pub fn max_abs_diff(a: &CMat, b: &CMat) -> f64 {
    assert_eq!((a.nrows(), a.ncols()), (b.nrows(), b.ncols()));
    let mut out = 0.0f64;
    for j in 0..a.ncols() {
        for i in 0..a.nrows() {
            out = out.max((a[(i, j)] - b[(i, j)]).norm());
        }
    }
    out
}

/// Largest element of `|m − m†|`.
pub fn hermiticity_defect(m: &CMat) -> f64 {
    let d = m.nrows();
    let mut out = 0.0f64;
    for j in 0..d {
        for i in 0..=j {
            out = out.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    out
}

/// Largest element of `|u†u − 1|`.
pub fn unitarity_defect(u: &CMat) -> f64 {
    let p = u.adjoint() * u;
    max_abs_diff(&p, &identity(u.nrows()))
}

/// `[a, b]`.
pub fn commutator(a: &CMat, b: &CMat) -> CMat {
    a * b - b * a
}

/// Spectral decomposition of a Hermitian matrix.
#[derive(Clone, Debug)]
pub struct Eigh {
    pub values: Vec<f64>,
    pub vectors: CMat,
}

pub fn eigh(h: &CMat) -> Result<Eigh> {
    let evd = h
        .self_adjoint_eigen(Side::Lower)
        .map_err(|e| Error::Internal(format!("eigendecomposition failed: {e:?}")))?;
    let s = evd.S().column_vector();
    let values = (0..h.nrows()).map(|i| s[i].re).collect();
    Ok(Eigh {
        values,
        vectors: evd.U().to_owned(),
    })
}

impl Eigh {
    pub fn dim(&self) -> usize {
        self.values.len()
    }

    /// `exp(−i·H·t) = V · diag(e^{−iλt}) · V†`.
    pub fn exp_minus_i(&self, t: f64) -> CMat {
        let d = self.dim();
        let phases: Vec<C64> = self
            .values
            .iter()
            .map(|&l| C64::from_polar(1.0, -l * t))
            .collect();
        let scaled = Mat::from_fn(d, d, |i, j| self.vectors[(i, j)] * phases[j]);
        &scaled * self.vectors.adjoint()
    }

    /// Largest element of `|H·V − V·Λ|`.
    pub fn residual(&self, h: &CMat) -> f64 {
        let d = self.dim();
        let hv = h * &self.vectors;
        let vl = Mat::from_fn(d, d, |i, j| self.vectors[(i, j)] * self.values[j]);
        max_abs_diff(&hv, &vl)
    }
}

/// Applies `diag(left) · m · diag(right)*` in place.
pub fn scale_rows_cols(m: &mut CMat, left: &[C64], right: &[C64]) {
    for j in 0..m.ncols() {
        let rj = right[j].conj();
        for i in 0..m.nrows() {
            m[(i, j)] = left[i] * m[(i, j)] * rj;
        }
    }
}

pub fn from_real_diagonal(w: &[f64]) -> CMat {
    let d = w.len();
    Mat::from_fn(d, d, |i, j| if i == j { C64::new(w[i], 0.0) } else { ZERO })
}

pub fn scale(m: &CMat, s: C64) -> CMat {
    Mat::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)] * s)
}

pub fn add(a: &CMat, b: &CMat) -> CMat {
    a + b
}

/// Renders a matrix in the dense debug text format: a `rows cols` header
/// followed by one line per row of `re,im` pairs separated by spaces.
pub fn dump_dense(m: &CMat) -> String {
    let mut out = format!("{} {}\n", m.nrows(), m.ncols());
    for i in 0..m.nrows() {
        let row: Vec<String> = (0..m.ncols())
            .map(|j| format!("{},{}", m[(i, j)].re, m[(i, j)].im))
            .collect();
        out.push_str(&row.join(" "));
        out.push('\n');
    }
    out
}

/// Parses the format written by [`dump_dense`].
pub fn parse_dense(text: &str) -> Result<CMat> {
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (hdr_line, header) = lines
        .next()
        .ok_or_else(|| Error::parse(1, "missing header"))?;
    let dims: Vec<&str> = header.split_whitespace().collect();
    if dims.len() != 2 {
        return Err(Error::parse(hdr_line + 1, "header must be `rows cols`"));
    }
    let parse_dim = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::parse(hdr_line + 1, format!("bad dimension `{s}`")))
    };
    let (rows, cols) = (parse_dim(dims[0])?, parse_dim(dims[1])?);
    if rows.saturating_mul(cols) > 1 << 26 {
        return Err(Error::parse(hdr_line + 1, "matrix too large"));
    }
    let mut data = Vec::with_capacity((rows * cols).min(1 << 16));
    let mut seen_rows = 0;
    for (n, line) in lines {
        if seen_rows == rows {
            return Err(Error::parse(n + 1, "too many rows"));
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != cols {
            return Err(Error::parse(
                n + 1,
                format!("expected {cols} entries, found {}", fields.len()),
            ));
        }
        for f in fields {
            let (re, im) = f
                .split_once(',')
                .ok_or_else(|| Error::parse(n + 1, format!("entry `{f}` is not `re,im`")))?;
            let re: f64 = re
                .parse()
                .map_err(|_| Error::parse(n + 1, format!("bad real part `{re}`")))?;
            let im: f64 = im
                .parse()
                .map_err(|_| Error::parse(n + 1, format!("bad imaginary part `{im}`")))?;
            data.push(C64::new(re, im));
        }
        seen_rows += 1;
    }
    if seen_rows != rows {
        return Err(Error::parse(0, format!("expected {rows} rows, found {seen_rows}")));
    }
    Ok(Mat::from_fn(rows, cols, |i, j| data[i * cols + j]))
}
