//! The random diffusion coefficient.
//!
//! The coefficient is piecewise constant on the elements of a fixed "epsilon"
//! mesh level: on each cell it equals `a·I` with `a` drawn independently and
//! uniformly from `[alpha, beta]`. Samples are indexed by a counter and fully
//! reproducible: sample `i` of a model seeded with `s` uses ChaCha8 stream `i`
//! under master seed `s`, consuming one 64-bit word per cell in element
//! order. Regenerating any sample is therefore cheap and order-independent,
//! which the Monte Carlo driver exploits to avoid storing samples.
//!
//! Values are stored as full symmetric 2×2 tensors even though the model is
//! scalar, so everything downstream (assembly, upscaling, estimators) is
//! written once for the general symmetric case.

use nalgebra::Matrix2;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::Serialize;

use crate::mesh::MeshHierarchy;
use crate::{Error, Result};

/// One 2×2 diffusion tensor.
pub type Tensor = Matrix2<f64>;

/// Map a uniform `u64` to a double in `[0, 1)` using its top 53 bits.
#[inline]
pub(crate) fn unit_f64(x: u64) -> f64 {
    (x >> 11) as f64 * (1.0 / 9007199254740992.0) // 2^-53
}

/// Description of the random coefficient: the mesh level whose cells carry
/// i.i.d. values, the uniform bounds, and the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CoefficientModel {
    pub eps_level: usize,
    pub alpha: f64,
    pub beta: f64,
    pub master_seed: u64,
}

impl CoefficientModel {
    /// Errors unless `0 < alpha ≤ beta` and both bounds are finite.
    pub fn new(eps_level: usize, alpha: f64, beta: f64, master_seed: u64) -> Result<Self> {
        if !(alpha.is_finite() && beta.is_finite() && alpha > 0.0 && alpha <= beta) {
            return Err(Error::InvalidInput(format!(
                "coefficient bounds must satisfy 0 < alpha <= beta, got [{alpha}, {beta}]"
            )));
        }
        Ok(CoefficientModel { eps_level, alpha, beta, master_seed })
    }

    /// Draw sample `sample_index`. Deterministic in `(master_seed,
    /// sample_index)`; distinct indices use disjoint ChaCha8 streams.
    pub fn draw_sample(
        &self,
        hierarchy: &MeshHierarchy,
        sample_index: u64,
    ) -> Result<CoefficientSample> {
        hierarchy.check_level(self.eps_level)?;
        let n = hierarchy.mesh(self.eps_level).n_elements();
        let mut rng = ChaCha8Rng::seed_from_u64(self.master_seed);
        rng.set_stream(sample_index);
        let span = self.beta - self.alpha;
        let values = (0..n)
            .map(|_| {
                let a = self.alpha + span * unit_f64(rng.next_u64());
                Matrix2::from_diagonal_element(a)
            })
            .collect();
        Ok(CoefficientSample {
            eps_level: self.eps_level,
            sample_index,
            values,
        })
    }
}

/// One realization of the coefficient: a symmetric 2×2 tensor per element of
/// the epsilon mesh.
#[derive(Debug, Clone)]
pub struct CoefficientSample {
    eps_level: usize,
    sample_index: u64,
    values: Vec<Tensor>,
}

#[derive(Serialize)]
struct SampleJson {
    eps_level: usize,
    sample_index: u64,
    /// Row-major 2×2 entries per element.
    values: Vec<[[f64; 2]; 2]>,
}

impl CoefficientSample {
    /// Wrap explicit per-cell tensors (mainly for tests and the demo).
    /// Each tensor must be symmetric.
    pub fn from_values(eps_level: usize, sample_index: u64, values: Vec<Tensor>) -> Result<Self> {
        for (e, a) in values.iter().enumerate() {
            let scale = a.abs().max() + 1.0;
            if (a[(0, 1)] - a[(1, 0)]).abs() > 1e-12 * scale {
                return Err(Error::ModelInvalid(format!(
                    "coefficient tensor on cell {e} is not symmetric"
                )));
            }
        }
        Ok(CoefficientSample { eps_level, sample_index, values })
    }

    pub fn eps_level(&self) -> usize {
        self.eps_level
    }

    pub fn sample_index(&self) -> u64 {
        self.sample_index
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn value(&self, eps_elem: usize) -> &Tensor {
        &self.values[eps_elem]
    }

    /// The per-element tensors on a finer mesh level that resolves the
    /// epsilon cells: fine element `e` inherits the value of its epsilon
    /// ancestor. Errors if `fine_level < eps_level`.
    pub fn restrict_to_level(
        &self,
        hierarchy: &MeshHierarchy,
        fine_level: usize,
    ) -> Result<Vec<Tensor>> {
        hierarchy.check_level(fine_level)?;
        if fine_level < self.eps_level {
            return Err(Error::Mismatch(format!(
                "cannot restrict a level-{} coefficient to coarser level {fine_level}",
                self.eps_level
            )));
        }
        let n = hierarchy.mesh(fine_level).n_elements();
        Ok((0..n)
            .map(|e| self.values[hierarchy.ancestor(e, fine_level, self.eps_level)])
            .collect())
    }

    /// JSON export for debugging: cell tensors in element order.
    pub fn to_json(&self) -> String {
        let values = self
            .values
            .iter()
            .map(|a| [[a[(0, 0)], a[(0, 1)]], [a[(1, 0)], a[(1, 1)]]])
            .collect();
        serde_json::to_string(&SampleJson {
            eps_level: self.eps_level,
            sample_index: self.sample_index,
            values,
        })
        .expect("sample serialization cannot fail")
    }
}
