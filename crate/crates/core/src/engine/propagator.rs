use std::collections::HashMap;
use std::hash::Hash;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::linalg::{eigh, hermiticity_defect, identity, max_abs, unitarity_defect, CMat};

pub const HERMITICITY_TOL: f64 = 1e-8;
pub const UNITARITY_TOL: f64 = 1e-10;
pub const EIGH_RESIDUAL_TOL: f64 = 1e-10;

/// Checks that `h` is square and Hermitian relative to its largest entry.
pub fn check_hermitian(h: &CMat) -> Result<()> {
    if h.nrows() != h.ncols() {
        return Err(Error::InvalidOperator(format!("{}x{} matrix is not square", h.nrows(), h.ncols())));
    }
    let scale = max_abs(h).max(1.0);
    let defect = hermiticity_defect(h);
    if defect > HERMITICITY_TOL * scale {
        return Err(Error::InvalidOperator(format!(
            "matrix is not Hermitian (defect {defect:e} at scale {scale:e})"
        )));
    }
    Ok(())
}

/// `exp(−iHt)` by eigendecomposition.
pub fn propagator(h: &CMat, t: f64) -> Result<CMat> {
    check_hermitian(h)?;
    if !(t.is_finite() && t >= 0.0) {
        return Err(Error::InvalidInput(format!("propagation time must be non-negative, got {t}")));
    }
    if t == 0.0 {
        return Ok(identity(h.nrows()));
    }
    let e = eigh(h)?;
    let scale = max_abs(h).max(1.0);
    let residual = e.residual(h);
    if residual > EIGH_RESIDUAL_TOL * scale {
        return Err(Error::Internal(format!("eigendecomposition residual {residual:e} too large")));
    }
    Ok(e.exp_minus_i(t))
}

/// Segment unitaries keyed by exact segment parameters. Every insertion is
/// checked for unitarity.
#[derive(Debug)]
pub struct PropagatorCache<K> {
    map: HashMap<K, Arc<CMat>>,
}

impl<K> Default for PropagatorCache<K> {
    fn default() -> Self {
        PropagatorCache { map: HashMap::new() }
    }
}

impl<K: Eq + Hash + Clone + std::fmt::Debug> PropagatorCache<K> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, key: &K) -> Option<Arc<CMat>> {
        self.map.get(key).cloned()
    }

    pub fn get_or_try_insert(&mut self, key: &K, build: impl FnOnce() -> Result<CMat>) -> Result<Arc<CMat>> {
        if let Some(u) = self.map.get(key) {
            return Ok(u.clone());
        }
        let u = build()?;
        let defect = unitarity_defect(&u);
        if !(defect <= UNITARITY_TOL) {
            return Err(Error::Internal(format!(
                "propagator for {key:?} is not unitary (defect {defect:e})"
            )));
        }
        let u = Arc::new(u);
        self.map.insert(key.clone(), u.clone());
        Ok(u)
    }
}
