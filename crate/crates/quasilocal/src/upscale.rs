//! Effective coarse operators assembled from correctors.
//!
//! For each coarse element pair `(T, K)` with `K` in the patch of `T`, the
//! quasilocal operator stores the 2×2 block
//!
//! ```text
//!   (𝒜_TK)_jk = ( δ_TK ∫_T A_jk dx  −  e_j · ∫_K A ∇q_{T,k} dx ) / (|T||K|),
//! ```
//!
//! where `q_{T,k}` are the element correctors. Summing a block row against
//! element volumes collapses the operator to one (generally nonsymmetric)
//! tensor per element, `A_T = Σ_K |K| 𝒜_TK` — the fully local effective
//! model. Monte Carlo averaging over coefficient samples produces the
//! deterministic surrogates used by the coarse solvers.
//!
//! The induced coarse bilinear form is
//!
//! ```text
//!   𝔞(v, z) = Σ_{T,K} |T||K| · ∇v|_K · (𝒜_TK ∇z|_T),
//! ```
//!
//! i.e. the first block index (the corrector's source element) pairs with
//! the function in the second argument. With this pairing the assembled form
//! reproduces `∫ ∇v_H · (A ∇(1−𝓒)z_H)` exactly, which is the identity the
//! validation suite checks to 1e-9.

use nalgebra::Matrix2;
use serde::Serialize;

use crate::corrector::{Corrector, CorrectorSet, ElementCorrectorContext};
use crate::field::{CoefficientModel, CoefficientSample};
use crate::interp::InterpolationOperator;
use crate::mesh::MeshHierarchy;
use crate::sparse::SparseMatrix;
use crate::{Error, Result};

/// Where an averaged tensor came from: enough to re-drive the sampler for
/// the fluctuation (second) pass and to catch mismatched reuse.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AveragingProvenance {
    pub master_seed: u64,
    pub n_samples: u64,
    pub eps_level: usize,
    pub alpha: f64,
    pub beta: f64,
}

/// One block row of the quasilocal operator: the patch elements of `T`
/// (sorted) and one 2×2 block per patch element.
#[derive(Debug, Clone)]
pub struct TensorRow {
    pub elems: Vec<usize>,
    pub blocks: Vec<Matrix2<f64>>,
}

/// The quasilocal effective operator (one block row per coarse element),
/// either for a single sample or averaged over many.
#[derive(Debug, Clone)]
pub struct QuasilocalTensor {
    pub coarse_level: usize,
    pub fine_level: usize,
    pub ell: usize,
    pub sample_index: Option<u64>,
    pub provenance: Option<AveragingProvenance>,
    rows: Vec<TensorRow>,
}

/// The collapsed, fully local effective tensor: one 2×2 matrix per coarse
/// element. Not symmetric in general.
#[derive(Debug, Clone)]
pub struct LocalTensor {
    pub coarse_level: usize,
    pub provenance: Option<AveragingProvenance>,
    pub tensors: Vec<Matrix2<f64>>,
}

/// Spectral summary of a local tensor's symmetric parts, used for the
/// admissibility precondition of the local coarse solver.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AdmissibilitySummary {
    pub min_eig: f64,
    pub max_eig: f64,
    pub max_skew: f64,
    pub admissible: bool,
}

impl QuasilocalTensor {
    pub fn rows(&self) -> &[TensorRow] {
        &self.rows
    }

    pub fn row(&self, t: usize) -> &TensorRow {
        &self.rows[t]
    }

    /// The block `𝒜_TK`, or `None` when `K` is outside the patch of `T`
    /// (where the operator is exactly zero by construction).
    pub fn block(&self, t: usize, k: usize) -> Option<&Matrix2<f64>> {
        let row = &self.rows[t];
        row.elems.binary_search(&k).ok().map(|i| &row.blocks[i])
    }

    /// Largest Frobenius norm over all stored blocks.
    pub fn max_block_norm(&self) -> f64 {
        self.rows
            .iter()
            .flat_map(|r| r.blocks.iter())
            .fold(0.0f64, |m, b| m.max(b.norm()))
    }

    /// Test-only: flip the sign of every block (builds an indefinite
    /// operator for rejection paths).
    #[cfg(test)]
    pub(crate) fn negated_for_test(&self) -> QuasilocalTensor {
        let mut out = self.clone();
        for row in &mut out.rows {
            for b in &mut row.blocks {
                *b = -*b;
            }
        }
        out
    }

    /// Collapse to the fully local tensor: `A_T = Σ_K |K| 𝒜_TK`.
    pub fn collapse(&self, hier: &MeshHierarchy) -> LocalTensor {
        let mesh = hier.mesh(self.coarse_level);
        let tensors = self
            .rows
            .iter()
            .map(|row| {
                let mut a = Matrix2::zeros();
                for (&k, block) in row.elems.iter().zip(&row.blocks) {
                    a += mesh.area(k) * block;
                }
                a
            })
            .collect();
        LocalTensor {
            coarse_level: self.coarse_level,
            provenance: self.provenance,
            tensors,
        }
    }

    /// JSON export (block rows in element order).
    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct RowJson {
            elem: usize,
            patch: Vec<usize>,
            blocks: Vec<[[f64; 2]; 2]>,
        }
        #[derive(Serialize)]
        struct TensorJson<'a> {
            coarse_level: usize,
            fine_level: usize,
            ell: usize,
            sample_index: Option<u64>,
            provenance: &'a Option<AveragingProvenance>,
            rows: Vec<RowJson>,
        }
        let rows = self
            .rows
            .iter()
            .enumerate()
            .map(|(t, row)| RowJson {
                elem: t,
                patch: row.elems.clone(),
                blocks: row
                    .blocks
                    .iter()
                    .map(|b| [[b[(0, 0)], b[(0, 1)]], [b[(1, 0)], b[(1, 1)]]])
                    .collect(),
            })
            .collect();
        serde_json::to_string(&TensorJson {
            coarse_level: self.coarse_level,
            fine_level: self.fine_level,
            ell: self.ell,
            sample_index: self.sample_index,
            provenance: &self.provenance,
            rows,
        })
        .expect("tensor serialization cannot fail")
    }
}

impl LocalTensor {
    /// Eigenvalue range of the symmetric parts and the largest skew part.
    /// "Admissible" means every symmetric part is positive definite.
    pub fn admissibility(&self) -> AdmissibilitySummary {
        let mut min_eig = f64::INFINITY;
        let mut max_eig = f64::NEG_INFINITY;
        let mut max_skew = 0.0f64;
        for a in &self.tensors {
            let sym = 0.5 * (a + a.transpose());
            // Closed-form eigenvalues of a symmetric 2×2.
            let half_tr = 0.5 * (sym[(0, 0)] + sym[(1, 1)]);
            let disc = (0.25 * (sym[(0, 0)] - sym[(1, 1)]).powi(2)
                + sym[(0, 1)] * sym[(0, 1)])
                .sqrt();
            min_eig = min_eig.min(half_tr - disc);
            max_eig = max_eig.max(half_tr + disc);
            max_skew = max_skew.max(0.5 * (a[(0, 1)] - a[(1, 0)]).abs());
        }
        AdmissibilitySummary {
            min_eig,
            max_eig,
            max_skew,
            admissible: min_eig > 0.0,
        }
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct LocalJson<'a> {
            coarse_level: usize,
            provenance: &'a Option<AveragingProvenance>,
            tensors: Vec<[[f64; 2]; 2]>,
        }
        serde_json::to_string(&LocalJson {
            coarse_level: self.coarse_level,
            provenance: &self.provenance,
            tensors: self
                .tensors
                .iter()
                .map(|b| [[b[(0, 0)], b[(0, 1)]], [b[(1, 0)], b[(1, 1)]]])
                .collect(),
        })
        .expect("tensor serialization cannot fail")
    }
}

/// `∫_T A dx` over the fine elements descending from coarse element `t`.
fn integral_over_element(
    hier: &MeshHierarchy,
    sample: &CoefficientSample,
    coarse_level: usize,
    fine_level: usize,
    t: usize,
) -> Matrix2<f64> {
    let fine = hier.mesh(fine_level);
    let mut acc = Matrix2::zeros();
    for e in hier.descendants(t, coarse_level, fine_level) {
        acc += fine.area(e) * sample.value(hier.ancestor(e, fine_level, sample.eps_level()));
    }
    acc
}

/// Evaluate the block row of one corrector over an arbitrary sorted set of
/// coarse elements.
///
/// Rows stored by [`assemble_quasilocal`] cover exactly the corrector's
/// patch; evaluating over other elements is the direct way to verify that
/// the operator vanishes there (the corrector is supported on the patch, so
/// every flux integral outside is a sum of exact zeros).
pub fn assemble_row_over(
    hier: &MeshHierarchy,
    sample: &CoefficientSample,
    cor: &Corrector,
    patch_elems: &[usize],
) -> TensorRow {
    let (cl, fl) = (cor.coarse_level, cor.fine_level);
    let coarse = hier.mesh(cl);
    let fine = hier.mesh(fl);
    let area_t = coarse.area(cor.coarse_elem);
    let int_a = integral_over_element(hier, sample, cl, fl, cor.coarse_elem);

    let blocks = patch_elems
        .iter()
        .map(|&k| {
            // Flux column k-direction: ∫_K A ∇q_{T,k}.
            let mut flux = Matrix2::zeros(); // column j of `flux` = ∫_K A ∇q_{T,j}
            for e in hier.descendants(k, cl, fl) {
                let tri = fine.triangle(e);
                let grads = fine.grads(e);
                let a = sample.value(hier.ancestor(e, fl, sample.eps_level()));
                for dir in 0..2 {
                    let mut g = nalgebra::Vector2::zeros();
                    for i in 0..3 {
                        let qv = cor.value(dir, tri[i]);
                        if qv != 0.0 {
                            g += qv * nalgebra::Vector2::new(grads[i][0], grads[i][1]);
                        }
                    }
                    let f = fine.area(e) * (a * g);
                    flux[(0, dir)] += f[0];
                    flux[(1, dir)] += f[1];
                }
            }
            let delta = if k == cor.coarse_elem { int_a } else { Matrix2::zeros() };
            (delta - flux) / (area_t * coarse.area(k))
        })
        .collect();

    TensorRow { elems: patch_elems.to_vec(), blocks }
}

/// Assemble the quasilocal operator of one sample from a full corrector set.
pub fn assemble_quasilocal(
    hier: &MeshHierarchy,
    sample: &CoefficientSample,
    correctors: &CorrectorSet,
    ell: usize,
) -> Result<QuasilocalTensor> {
    if correctors.ell != ell {
        return Err(Error::Mismatch(format!(
            "correctors were localized with ℓ = {} but ℓ = {ell} was requested",
            correctors.ell
        )));
    }
    if correctors.sample_index != sample.sample_index() {
        return Err(Error::Mismatch(format!(
            "correctors belong to sample {} but sample {} was supplied",
            correctors.sample_index,
            sample.sample_index()
        )));
    }
    let coarse = hier.mesh(correctors.coarse_level);
    if correctors.correctors.len() != coarse.n_elements() {
        return Err(Error::Mismatch(
            "corrector set does not cover every coarse element".into(),
        ));
    }
    let rows = correctors
        .correctors
        .iter()
        .enumerate()
        .map(|(t, cor)| {
            let patch = coarse.patch(&[t], ell)?;
            Ok(assemble_row_over(hier, sample, cor, &patch))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(QuasilocalTensor {
        coarse_level: correctors.coarse_level,
        fine_level: correctors.fine_level,
        ell,
        sample_index: Some(sample.sample_index()),
        provenance: None,
        rows,
    })
}

/// Monte Carlo average `E[𝒜]` over samples `0 .. n_samples`.
pub fn mc_average(
    hier: &MeshHierarchy,
    model: &CoefficientModel,
    coarse_level: usize,
    fine_level: usize,
    ell: usize,
    n_samples: u64,
) -> Result<QuasilocalTensor> {
    Ok(mc_average_with_fluctuations(hier, model, coarse_level, fine_level, ell, n_samples)?.0)
}

/// Monte Carlo average plus the per-element fluctuation statistics
/// `√(E[X(T)²])` with `X(T) = max_K |T| ‖𝒜_TK − Ā_TK‖_F`, collected from the
/// same corrector solves that produce the mean.
///
/// Element rows are independent: each coarse element builds its corrector
/// context once, then runs all samples in index order, so the result is
/// bitwise deterministic and independent of the thread count. The mean uses
/// shifted accumulation (sample 0 as base, deviations added afterwards), so
/// a deterministic field yields a bitwise-exact mean and exactly zero
/// fluctuation statistics.
pub fn mc_average_with_fluctuations(
    hier: &MeshHierarchy,
    model: &CoefficientModel,
    coarse_level: usize,
    fine_level: usize,
    ell: usize,
    n_samples: u64,
) -> Result<(QuasilocalTensor, Vec<f64>)> {
    if n_samples == 0 {
        return Err(Error::InvalidInput("averaging needs at least one sample".into()));
    }
    hier.check_level(coarse_level)?;
    hier.check_level(fine_level)?;
    let ih = InterpolationOperator::build(hier, coarse_level, fine_level)?;
    let coarse = hier.mesh(coarse_level);
    let n_elems = coarse.n_elements();

    let element_stats = |t: usize| -> Result<(TensorRow, f64)> {
        let ctx = ElementCorrectorContext::new(hier, &ih, t, ell)?;
        let mut rows = Vec::with_capacity(n_samples as usize);
        for i in 0..n_samples {
            let sample = model.draw_sample(hier, i)?;
            let cor = ctx.solve(hier, &sample)?;
            rows.push(assemble_row_over(hier, &sample, &cor, ctx.patch_elems()));
        }
        let mut deltas = vec![Matrix2::zeros(); rows[0].blocks.len()];
        for row in &rows[1..] {
            for (d, (b, r)) in deltas.iter_mut().zip(rows[0].blocks.iter().zip(&row.blocks)) {
                *d += r - b;
            }
        }
        let mut mean = rows[0].clone();
        if n_samples > 1 {
            for (b, d) in mean.blocks.iter_mut().zip(&deltas) {
                *b += d / n_samples as f64;
            }
        }
        let area_t = coarse.area(t);
        let mut sum_sq = 0.0;
        for row in &rows {
            let x = row
                .blocks
                .iter()
                .zip(&mean.blocks)
                .fold(0.0f64, |m, (b, mb)| m.max(area_t * (b - mb).norm()));
            sum_sq += x * x;
        }
        Ok((mean, (sum_sq / n_samples as f64).sqrt()))
    };

    #[cfg(feature = "parallel")]
    let stats: Result<Vec<(TensorRow, f64)>> = {
        use rayon::prelude::*;
        (0..n_elems).into_par_iter().map(element_stats).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let stats: Result<Vec<(TensorRow, f64)>> = (0..n_elems).map(element_stats).collect();
    let (rows, x_rms): (Vec<TensorRow>, Vec<f64>) = stats?.into_iter().unzip();

    let tensor = QuasilocalTensor {
        coarse_level,
        fine_level,
        ell,
        sample_index: None,
        rows,
        provenance: Some(AveragingProvenance {
            master_seed: model.master_seed,
            n_samples,
            eps_level: model.eps_level,
            alpha: model.alpha,
            beta: model.beta,
        }),
    };
    Ok((tensor, x_rms))
}

/// Assemble the coarse system matrix of the quasilocal bilinear form over
/// the free coarse vertices: `G[r, c] = 𝔞(λ_c, λ_r)`, so `G u = f` is the
/// coarse problem with test functions along rows.
pub fn assemble_bilinear(
    hier: &MeshHierarchy,
    tensor: &QuasilocalTensor,
) -> Result<SparseMatrix> {
    let coarse = hier.mesh(tensor.coarse_level);
    if tensor.rows.len() != coarse.n_elements() {
        return Err(Error::Mismatch(
            "quasilocal tensor does not cover every coarse element".into(),
        ));
    }
    let n_free = coarse.free_vertices().len();
    let mut triplets = Vec::new();
    for (t, row) in tensor.rows.iter().enumerate() {
        let tri_t = coarse.triangle(t);
        let grads_t = coarse.grads(t);
        let w_t = coarse.area(t);
        for (&k, block) in row.elems.iter().zip(&row.blocks) {
            let tri_k = coarse.triangle(k);
            let grads_k = coarse.grads(k);
            let w = w_t * coarse.area(k);
            for (ri, &vt) in tri_t.iter().enumerate() {
                // Test function derivative on T (second argument of 𝔞).
                let Some(r) = coarse.free_index(vt) else { continue };
                let gz = nalgebra::Vector2::new(grads_t[ri][0], grads_t[ri][1]);
                let bgz = block * gz;
                for (ci, &vk) in tri_k.iter().enumerate() {
                    // Trial function derivative on K (first argument).
                    let Some(c) = coarse.free_index(vk) else { continue };
                    let gv = nalgebra::Vector2::new(grads_k[ci][0], grads_k[ci][1]);
                    triplets.push((r, c, w * gv.dot(&bgz)));
                }
            }
        }
    }
    Ok(SparseMatrix::from_triplets(n_free, n_free, &triplets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrector::solve_all_correctors;
    use crate::fem::{energy_form, extend_free, prolong};

    fn wobble(k: usize) -> f64 {
        ((k as f64 * 38.5453).sin() * 12893.98).fract()
    }

    #[test]
    fn constant_coefficient_collapses_to_the_constant() {
        // With A ≡ c·I the collapsed tensor is exactly c·I: the flux sums
        // telescope to ∫ ∇q over the whole patch, which vanishes because the
        // corrector has zero boundary values.
        let hier = MeshHierarchy::up_to(3);
        for c in [1.0, 10.0] {
            let model = CoefficientModel::new(1, c, c, 5).unwrap();
            for coarse_level in [0usize, 1] {
                let fine_level = coarse_level + 2;
                let ih = InterpolationOperator::build(&hier, coarse_level, fine_level).unwrap();
                let sample = model.draw_sample(&hier, 0).unwrap();
                for ell in [0usize, 1, 2] {
                    let set = solve_all_correctors(&hier, &ih, &sample, ell).unwrap();
                    let ql = assemble_quasilocal(&hier, &sample, &set, ell).unwrap();
                    let local = ql.collapse(&hier);
                    for (t, a) in local.tensors.iter().enumerate() {
                        let err = (a - Matrix2::identity() * c).norm();
                        assert!(
                            err <= 1e-10,
                            "c = {c}, coarse {coarse_level}, ℓ = {ell}, element {t}: err {err:.2e}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn blocks_vanish_exactly_outside_the_patch() {
        let hier = MeshHierarchy::up_to(3);
        let model = CoefficientModel::new(2, 1.0, 10.0, 21).unwrap();
        let sample = model.draw_sample(&hier, 0).unwrap();
        let coarse = hier.mesh(1);
        let ih = InterpolationOperator::build(&hier, 1, 3).unwrap();
        for ell in [0usize, 1] {
            let set = solve_all_correctors(&hier, &ih, &sample, ell).unwrap();
            let ql = assemble_quasilocal(&hier, &sample, &set, ell).unwrap();
            for t in 0..coarse.n_elements() {
                let patch = coarse.patch(&[t], ell).unwrap();
                assert_eq!(ql.row(t).elems, patch, "stored support must equal the patch");
                // Brute force: recompute the flux over every element of the
                // domain; outside the patch it must be *exactly* zero.
                let row = assemble_row_over(
                    &hier,
                    &sample,
                    &set.correctors[t],
                    &(0..coarse.n_elements()).collect::<Vec<_>>(),
                );
                for (&k, block) in row.elems.iter().zip(&row.blocks) {
                    if !patch.contains(&k) {
                        assert_eq!(
                            block.norm(),
                            0.0,
                            "element {t}, ℓ {ell}: nonzero block at {k} outside patch"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn bilinear_form_reproduces_the_corrected_fine_form() {
        // For random coarse pairs (v, z):
        //   zᵀ G v  ==  ∫ ∇v · (A ∇(1 − 𝓒) z)   (exactly, up to round-off).
        let hier = MeshHierarchy::up_to(3);
        let (cl, fl, ell) = (1usize, 3usize, 1usize);
        let coarse = hier.mesh(cl);
        let fine = hier.mesh(fl);
        let model = CoefficientModel::new(2, 1.0, 10.0, 33).unwrap();
        let sample = model.draw_sample(&hier, 0).unwrap();
        let tensors = sample.restrict_to_level(&hier, fl).unwrap();
        let ih = InterpolationOperator::build(&hier, cl, fl).unwrap();
        let set = solve_all_correctors(&hier, &ih, &sample, ell).unwrap();
        let ql = assemble_quasilocal(&hier, &sample, &set, ell).unwrap();
        let g = assemble_bilinear(&hier, &ql).unwrap();
        let n_free = coarse.free_vertices().len();

        for pair in 0..5usize {
            let v_free: Vec<f64> = (0..n_free).map(|i| wobble(i + 1000 * pair)).collect();
            let z_free: Vec<f64> = (0..n_free).map(|i| wobble(i + 777 * pair + 13)).collect();
            let v_h = extend_free(coarse, &v_free);
            let z_h = extend_free(coarse, &z_free);

            // Coarse side: 𝔞(v, z) = zᵀ (G v).
            let gv = g.matvec(&v_free);
            let lhs: f64 = z_free.iter().zip(&gv).map(|(a, b)| a * b).sum();

            // Fine side: corrected test function (1 − 𝓒) z.
            let z_fine = prolong(&hier, &z_h, fl).unwrap();
            let mut corrected = z_fine.values().to_vec();
            for (t, cor) in set.correctors.iter().enumerate() {
                let gz = z_h.gradient_on(coarse, t);
                for dir in 0..2 {
                    if gz[dir] == 0.0 {
                        continue;
                    }
                    for &u in cor.unknowns() {
                        corrected[u] -= gz[dir] * cor.value(dir, u);
                    }
                }
            }
            let v_fine = prolong(&hier, &v_h, fl).unwrap();
            let rhs = energy_form(fine, &tensors, v_fine.values(), &corrected);
            assert!(
                (lhs - rhs).abs() <= 1e-9 * (1.0 + lhs.abs()),
                "pair {pair}: coarse {lhs} vs fine {rhs}"
            );
        }
    }

    #[test]
    fn corrupting_a_corrector_breaks_the_identity() {
        // Sensitivity check: the identity above must *fail* when a corrector
        // is perturbed, so the previous test cannot pass vacuously.
        let hier = MeshHierarchy::up_to(2);
        let (cl, fl, ell) = (0usize, 2usize, 1usize);
        let coarse = hier.mesh(cl);
        let fine = hier.mesh(fl);
        let model = CoefficientModel::new(1, 1.0, 10.0, 9).unwrap();
        let sample = model.draw_sample(&hier, 0).unwrap();
        let tensors = sample.restrict_to_level(&hier, fl).unwrap();
        let ih = InterpolationOperator::build(&hier, cl, fl).unwrap();
        let mut set = solve_all_correctors(&hier, &ih, &sample, ell).unwrap();
        let ql = assemble_quasilocal(&hier, &sample, &set, ell).unwrap();
        let g = assemble_bilinear(&hier, &ql).unwrap();

        // Perturb one corrector *after* assembling the operator.
        let t_bad = 9;
        let u = set.correctors[t_bad]
            .unknowns()
            .first()
            .copied()
            .expect("a twice-refined element has interior unknowns");
        set.correctors[t_bad].nudge_value(0, u, 1e-3);

        let n_free = coarse.free_vertices().len();
        let mut worst = 0.0f64;
        for pair in 0..5usize {
            let v_free: Vec<f64> = (0..n_free).map(|i| wobble(i + 31 * pair)).collect();
            let z_free: Vec<f64> = (0..n_free).map(|i| wobble(i + 57 * pair + 3)).collect();
            let v_h = extend_free(coarse, &v_free);
            let z_h = extend_free(coarse, &z_free);
            let gv = g.matvec(&v_free);
            let lhs: f64 = z_free.iter().zip(&gv).map(|(a, b)| a * b).sum();
            let z_fine = prolong(&hier, &z_h, fl).unwrap();
            let mut corrected = z_fine.values().to_vec();
            for (t, cor) in set.correctors.iter().enumerate() {
                let gz = z_h.gradient_on(coarse, t);
                for dir in 0..2 {
                    for &u in cor.unknowns() {
                        corrected[u] -= gz[dir] * cor.value(dir, u);
                    }
                }
            }
            let v_fine = prolong(&hier, &v_h, fl).unwrap();
            let rhs = energy_form(fine, &tensors, v_fine.values(), &corrected);
            worst = worst.max((lhs - rhs).abs() / (1.0 + lhs.abs()));
        }
        assert!(
            worst > 1e-9,
            "perturbed correctors must violate the identity (worst {worst:.2e})"
        );
    }

    #[test]
    fn single_sample_average_equals_direct_assembly() {
        let hier = MeshHierarchy::up_to(3);
        let model = CoefficientModel::new(2, 1.0, 10.0, 101).unwrap();
        let mean = mc_average(&hier, &model, 1, 3, 1, 1).unwrap();
        let ih = InterpolationOperator::build(&hier, 1, 3).unwrap();
        let sample = model.draw_sample(&hier, 0).unwrap();
        let set = solve_all_correctors(&hier, &ih, &sample, 1).unwrap();
        let direct = assemble_quasilocal(&hier, &sample, &set, 1).unwrap();
        for t in 0..hier.mesh(1).n_elements() {
            assert_eq!(mean.row(t).elems, direct.row(t).elems);
            for (a, b) in mean.row(t).blocks.iter().zip(&direct.row(t).blocks) {
                assert!((a - b).norm() <= 1e-15 * (1.0 + b.norm()));
            }
        }
        let prov = mean.provenance.unwrap();
        assert_eq!(prov.n_samples, 1);
        assert_eq!(prov.master_seed, 101);
        assert!(mean.sample_index.is_none());
        assert_eq!(direct.sample_index, Some(0));
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn averaging_is_bitwise_identical_across_thread_counts() {
        let hier = MeshHierarchy::up_to(2);
        let model = CoefficientModel::new(1, 1.0, 10.0, 55).unwrap();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| mc_average(&hier, &model, 0, 2, 1, 4).unwrap())
        };
        let a = run(1);
        let b = run(3);
        for t in 0..hier.mesh(0).n_elements() {
            assert_eq!(a.row(t).elems, b.row(t).elems);
            for (x, y) in a.row(t).blocks.iter().zip(&b.row(t).blocks) {
                for i in 0..2 {
                    for j in 0..2 {
                        assert_eq!(x[(i, j)].to_bits(), y[(i, j)].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn mismatched_inputs_are_rejected() {
        let hier = MeshHierarchy::up_to(2);
        let model = CoefficientModel::new(1, 1.0, 10.0, 1).unwrap();
        let sample0 = model.draw_sample(&hier, 0).unwrap();
        let sample1 = model.draw_sample(&hier, 1).unwrap();
        let ih = InterpolationOperator::build(&hier, 0, 2).unwrap();
        let set = solve_all_correctors(&hier, &ih, &sample0, 1).unwrap();
        assert!(matches!(
            assemble_quasilocal(&hier, &sample0, &set, 2),
            Err(Error::Mismatch(_))
        ));
        assert!(matches!(
            assemble_quasilocal(&hier, &sample1, &set, 1),
            Err(Error::Mismatch(_))
        ));
        assert!(mc_average(&hier, &model, 0, 2, 1, 0).is_err());
    }

    #[test]
    fn json_exports_parse_and_carry_structure() {
        let hier = MeshHierarchy::up_to(2);
        let model = CoefficientModel::new(1, 2.0, 3.0, 8).unwrap();
        let ql = mc_average(&hier, &model, 0, 2, 1, 2).unwrap();
        let v: serde_json::Value = serde_json::from_str(&ql.to_json()).unwrap();
        assert_eq!(v["coarse_level"], 0);
        assert_eq!(v["rows"].as_array().unwrap().len(), 32);
        assert_eq!(v["provenance"]["n_samples"], 2);
        let local = ql.collapse(&hier);
        let lv: serde_json::Value = serde_json::from_str(&local.to_json()).unwrap();
        assert_eq!(lv["tensors"].as_array().unwrap().len(), 32);
        let adm = local.admissibility();
        assert!(adm.admissible && adm.min_eig > 0.5 && adm.max_eig < 5.0);
    }
}
