//! A-posteriori estimators for the two model errors.
//!
//! * `γ` measures the stochastic model error: how far single-sample
//!   quasilocal operators fluctuate around their Monte Carlo mean,
//!   normalized by the largest area-weighted mean block. It is computed in a
//!   second pass that regenerates every averaging sample.
//! * `η` measures the price of collapsing the quasilocal operator to one
//!   tensor per element: inter-element jumps of the collapsed tensor enter a
//!   regularity penalty of the localization error bound.

use serde::Serialize;

use crate::corrector::ElementCorrectorContext;
use crate::field::CoefficientModel;
use crate::interp::InterpolationOperator;
use crate::mesh::MeshHierarchy;
use crate::upscale::{assemble_row_over, AdmissibilitySummary, LocalTensor, QuasilocalTensor};
use crate::{Error, Result};

/// Everything the estimator pass produces for one averaged operator.
#[derive(Debug, Clone, Serialize)]
pub struct EstimatorReport {
    /// Fluctuation estimator: `max_T √(E[X(T)²]) / max_{T,K} |T| ‖Ā_TK‖_F`.
    pub gamma: f64,
    /// Jump estimator of the collapsed tensor.
    pub eta: f64,
    /// `√(E[X(T)²])` per coarse element.
    pub per_element_x_rms: Vec<f64>,
    /// `max_{T,K} |T| ‖Ā_TK‖_F`, the normalization of `gamma`.
    pub denominator: f64,
    /// Spectral summary of the collapsed tensor's symmetric parts.
    pub admissibility: AdmissibilitySummary,
}

fn check_provenance(
    model: &CoefficientModel,
    ell: usize,
    n_samples: u64,
    averaged: &QuasilocalTensor,
) -> Result<()> {
    let prov = averaged.provenance.ok_or_else(|| {
        Error::Mismatch("tensor carries no averaging provenance (single-sample tensor?)".into())
    })?;
    let matches = prov.master_seed == model.master_seed
        && prov.eps_level == model.eps_level
        && prov.alpha == model.alpha
        && prov.beta == model.beta
        && prov.n_samples == n_samples
        && averaged.ell == ell;
    if !matches {
        return Err(Error::Mismatch(format!(
            "fluctuation pass parameters (seed {}, ε-level {}, bounds [{}, {}], N {n_samples}, \
             ℓ {ell}) do not match the averaging run (seed {}, ε-level {}, bounds [{}, {}], \
             N {}, ℓ {})",
            model.master_seed,
            model.eps_level,
            model.alpha,
            model.beta,
            prov.master_seed,
            prov.eps_level,
            prov.alpha,
            prov.beta,
            prov.n_samples,
            averaged.ell,
        )));
    }
    Ok(())
}

/// Normalization of `γ`: `max_T max_K |T| ‖Ā_TK‖_F`. The blocks carry the
/// same element-area weight as the deviation statistic `X(T)`, so the
/// quotient is dimensionless and does not pick up spurious powers of the
/// coarse mesh size from the block normalization.
fn gamma_denominator(hier: &MeshHierarchy, averaged: &QuasilocalTensor) -> f64 {
    let coarse = hier.mesh(averaged.coarse_level);
    averaged.rows().iter().enumerate().fold(0.0f64, |m, (t, row)| {
        let row_max = row.blocks.iter().fold(0.0f64, |rm, b| rm.max(b.norm()));
        m.max(coarse.area(t) * row_max)
    })
}

/// The fluctuation estimator `γ` and the per-element statistics behind it.
///
/// Second pass over the exact samples of the averaging run: for each sample
/// the per-element deviation `X(T) = max_K |T| ‖𝒜_TK − Ā_TK‖_F` is
/// accumulated into an empirical `E[X(T)²]`. Elements run concurrently;
/// samples run in index order within each element, so the result is
/// independent of the thread count.
pub fn compute_gamma(
    hier: &MeshHierarchy,
    model: &CoefficientModel,
    ell: usize,
    n_samples: u64,
    averaged: &QuasilocalTensor,
) -> Result<(f64, Vec<f64>)> {
    check_provenance(model, ell, n_samples, averaged)?;
    let coarse = hier.mesh(averaged.coarse_level);
    let denominator = gamma_denominator(hier, averaged);
    if !(denominator.is_finite() && denominator > 0.0) {
        return Err(Error::ModelInvalid(format!(
            "averaged tensor norm {denominator} cannot normalize the fluctuation estimator"
        )));
    }
    let ih = InterpolationOperator::build(hier, averaged.coarse_level, averaged.fine_level)?;

    let element_rms = |t: usize| -> Result<f64> {
        let ctx = ElementCorrectorContext::new(hier, &ih, t, ell)?;
        let mean_row = averaged.row(t);
        if mean_row.elems != ctx.patch_elems() {
            return Err(Error::Mismatch(format!(
                "averaged tensor row {t} covers different patch elements than ℓ = {ell} yields"
            )));
        }
        let area_t = coarse.area(t);
        let mut sum_sq = 0.0;
        for i in 0..n_samples {
            let sample = model.draw_sample(hier, i)?;
            let cor = ctx.solve(hier, &sample)?;
            let row = assemble_row_over(hier, &sample, &cor, ctx.patch_elems());
            let x = row
                .blocks
                .iter()
                .zip(&mean_row.blocks)
                .fold(0.0f64, |m, (b, mb)| m.max(area_t * (b - mb).norm()));
            sum_sq += x * x;
        }
        Ok((sum_sq / n_samples as f64).sqrt())
    };

    #[cfg(feature = "parallel")]
    let per_element: Result<Vec<f64>> = {
        use rayon::prelude::*;
        (0..coarse.n_elements()).into_par_iter().map(element_rms).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let per_element: Result<Vec<f64>> = (0..coarse.n_elements()).map(element_rms).collect();
    let per_element = per_element?;

    let gamma = per_element.iter().fold(0.0f64, |m, &x| m.max(x)) / denominator;
    Ok((gamma, per_element))
}

/// The jump estimator `η = H⁻¹ J (1 + J/α) / ((α+β)/2)` with
/// `J = max` over interior faces of the Frobenius norm of the tensor jump.
pub fn compute_eta(
    hier: &MeshHierarchy,
    local: &LocalTensor,
    alpha: f64,
    beta: f64,
) -> Result<f64> {
    if !(alpha.is_finite() && beta.is_finite() && alpha > 0.0 && alpha <= beta) {
        return Err(Error::InvalidInput(format!(
            "coefficient bounds must satisfy 0 < alpha <= beta, got [{alpha}, {beta}]"
        )));
    }
    let mesh = hier.mesh(local.coarse_level);
    if local.tensors.len() != mesh.n_elements() {
        return Err(Error::Mismatch(format!(
            "local tensor has {} entries for {} elements",
            local.tensors.len(),
            mesh.n_elements()
        )));
    }
    let faces = mesh.interior_faces();
    if faces.is_empty() {
        return Err(Error::InvalidInput(
            "the mesh has no interior faces to measure jumps on".into(),
        ));
    }
    let j = faces
        .iter()
        .map(|f| (local.tensors[f.elems[0]] - local.tensors[f.elems[1]]).norm())
        .fold(0.0f64, f64::max);
    let h = mesh.mesh_size();
    Ok((j / h) * (1.0 + j / alpha) / (0.5 * (alpha + beta)))
}

/// Run both estimators against an averaged tensor (parameters are read from
/// its provenance) and bundle the results.
pub fn build_report(
    hier: &MeshHierarchy,
    model: &CoefficientModel,
    averaged: &QuasilocalTensor,
) -> Result<EstimatorReport> {
    let prov = averaged.provenance.ok_or_else(|| {
        Error::Mismatch("tensor carries no averaging provenance (single-sample tensor?)".into())
    })?;
    let (gamma, per_element_x_rms) =
        compute_gamma(hier, model, averaged.ell, prov.n_samples, averaged)?;
    let local = averaged.collapse(hier);
    let eta = compute_eta(hier, &local, model.alpha, model.beta)?;
    Ok(EstimatorReport {
        gamma,
        eta,
        per_element_x_rms,
        denominator: gamma_denominator(hier, averaged),
        admissibility: local.admissibility(),
    })
}

/// Like [`build_report`], but reuses fluctuation statistics already
/// collected while averaging (see
/// [`crate::upscale::mc_average_with_fluctuations`]) instead of regenerating
/// every sample. Produces bitwise-identical reports.
pub fn report_from_stats(
    hier: &MeshHierarchy,
    model: &CoefficientModel,
    averaged: &QuasilocalTensor,
    per_element_x_rms: &[f64],
) -> Result<EstimatorReport> {
    let prov = averaged.provenance.ok_or_else(|| {
        Error::Mismatch("tensor carries no averaging provenance (single-sample tensor?)".into())
    })?;
    check_provenance(model, averaged.ell, prov.n_samples, averaged)?;
    let coarse = hier.mesh(averaged.coarse_level);
    if per_element_x_rms.len() != coarse.n_elements() {
        return Err(Error::Mismatch(format!(
            "{} fluctuation statistics for {} coarse elements",
            per_element_x_rms.len(),
            coarse.n_elements()
        )));
    }
    let denominator = gamma_denominator(hier, averaged);
    if !(denominator.is_finite() && denominator > 0.0) {
        return Err(Error::ModelInvalid(format!(
            "averaged tensor norm {denominator} cannot normalize the fluctuation estimator"
        )));
    }
    let gamma = per_element_x_rms.iter().fold(0.0f64, |m, &x| m.max(x)) / denominator;
    let local = averaged.collapse(hier);
    let eta = compute_eta(hier, &local, model.alpha, model.beta)?;
    Ok(EstimatorReport {
        gamma,
        eta,
        per_element_x_rms: per_element_x_rms.to_vec(),
        denominator,
        admissibility: local.admissibility(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::upscale::mc_average;
    use nalgebra::Matrix2;

    #[test]
    fn deterministic_field_yields_exact_zeros() {
        // Degenerate configuration (coarse = ε = fine, ℓ = 0): corrector
        // spaces are empty, every element sees bitwise-identical inputs, so
        // both estimators must be exactly zero — not merely small.
        let hier = MeshHierarchy::up_to(1);
        let model = CoefficientModel::new(1, 3.0, 3.0, 17).unwrap();
        let mean = mc_average(&hier, &model, 1, 1, 0, 4).unwrap();
        let (gamma, x) = compute_gamma(&hier, &model, 0, 4, &mean).unwrap();
        assert_eq!(gamma, 0.0);
        assert!(x.iter().all(|&v| v == 0.0));
        let eta = compute_eta(&hier, &mean.collapse(&hier), 3.0, 3.0).unwrap();
        assert_eq!(eta, 0.0);

        // Nondegenerate deterministic field: γ is still exactly zero (the
        // mean accumulates deviations from sample 0, which all vanish); the
        // collapsed tensor is constant only up to round-off, so η is tiny
        // but need not be exactly zero.
        let hier = MeshHierarchy::up_to(2);
        let model = CoefficientModel::new(1, 3.0, 3.0, 17).unwrap();
        let mean = mc_average(&hier, &model, 0, 2, 1, 3).unwrap();
        let (gamma, _) = compute_gamma(&hier, &model, 1, 3, &mean).unwrap();
        assert_eq!(gamma, 0.0);
        let eta = compute_eta(&hier, &mean.collapse(&hier), 3.0, 3.0).unwrap();
        assert!((0.0..=1e-12).contains(&eta), "η = {eta:.3e}");
    }

    #[test]
    fn single_sample_yields_exactly_zero_gamma() {
        // N = 1: the mean *is* the sample; the second pass must regenerate
        // it bitwise, making every deviation exactly zero.
        let hier = MeshHierarchy::up_to(2);
        let model = CoefficientModel::new(1, 1.0, 10.0, 99).unwrap();
        let mean = mc_average(&hier, &model, 0, 2, 1, 1).unwrap();
        let (gamma, x) = compute_gamma(&hier, &model, 1, 1, &mean).unwrap();
        assert_eq!(gamma, 0.0);
        assert!(x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fluctuation_pass_rejects_mismatched_parameters() {
        let hier = MeshHierarchy::up_to(2);
        let model = CoefficientModel::new(1, 1.0, 10.0, 5).unwrap();
        let mean = mc_average(&hier, &model, 0, 2, 1, 2).unwrap();
        // Wrong ℓ, wrong N, wrong seed, and a provenance-free tensor.
        assert!(matches!(
            compute_gamma(&hier, &model, 0, 2, &mean),
            Err(Error::Mismatch(_))
        ));
        assert!(matches!(
            compute_gamma(&hier, &model, 1, 3, &mean),
            Err(Error::Mismatch(_))
        ));
        let other = CoefficientModel::new(1, 1.0, 10.0, 6).unwrap();
        assert!(matches!(
            compute_gamma(&hier, &other, 1, 2, &mean),
            Err(Error::Mismatch(_))
        ));
        use crate::corrector::solve_all_correctors;
        use crate::upscale::assemble_quasilocal;
        let ih = InterpolationOperator::build(&hier, 0, 2).unwrap();
        let sample = model.draw_sample(&hier, 0).unwrap();
        let set = solve_all_correctors(&hier, &ih, &sample, 1).unwrap();
        let single = assemble_quasilocal(&hier, &sample, &set, 1).unwrap();
        assert!(matches!(
            compute_gamma(&hier, &model, 1, 2, &single),
            Err(Error::Mismatch(_))
        ));
    }

    #[test]
    fn gamma_is_invariant_under_coefficient_scaling() {
        // Scaling the field and its bounds by c > 0 scales numerator and
        // denominator alike; correctors solve a homogeneous equation, so γ
        // must match to fp accuracy.
        let hier = MeshHierarchy::up_to(2);
        let base = CoefficientModel::new(1, 1.0, 10.0, 12).unwrap();
        let c = 3.7;
        let scaled = CoefficientModel::new(1, c * 1.0, c * 10.0, 12).unwrap();
        let mean_a = mc_average(&hier, &base, 0, 2, 1, 4).unwrap();
        let mean_b = mc_average(&hier, &scaled, 0, 2, 1, 4).unwrap();
        let (ga, _) = compute_gamma(&hier, &base, 1, 4, &mean_a).unwrap();
        let (gb, _) = compute_gamma(&hier, &scaled, 1, 4, &mean_b).unwrap();
        assert!(ga > 1e-3, "γ should be visibly positive, got {ga}");
        assert!((ga - gb).abs() <= 1e-12, "γ = {ga} vs scaled {gb}");

        // And two identical runs agree bitwise.
        let (ga2, _) = compute_gamma(&hier, &base, 1, 4, &mean_a).unwrap();
        assert_eq!(ga.to_bits(), ga2.to_bits());
    }

    #[test]
    fn eta_matches_the_hand_formula() {
        let hier = MeshHierarchy::up_to(1);
        let mesh = hier.mesh(0);
        let (alpha, beta) = (1.5, 4.0);
        let h = mesh.mesh_size();

        let constant = LocalTensor {
            coarse_level: 0,
            provenance: None,
            tensors: vec![Matrix2::new(2.0, 0.5, 0.5, 3.0); mesh.n_elements()],
        };
        assert_eq!(compute_eta(&hier, &constant, alpha, beta).unwrap(), 0.0);

        let eta_with_jump = |j: f64| {
            let mut tensors = vec![Matrix2::identity(); mesh.n_elements()];
            tensors[7] = Matrix2::new(1.0, j, 0.0, 1.0);
            let local = LocalTensor { coarse_level: 0, provenance: None, tensors };
            compute_eta(&hier, &local, alpha, beta).unwrap()
        };
        let j = 0.75;
        let expected = (j / h) * (1.0 + j / alpha) / (0.5 * (alpha + beta));
        let eta = eta_with_jump(j);
        assert!((eta - expected).abs() <= 1e-14 * expected, "η = {eta} vs {expected}");
        // Superlinearity in the jump size.
        assert!(eta_with_jump(2.0 * j) > 2.0 * eta);

        assert!(compute_eta(&hier, &constant, -1.0, 1.0).is_err());
        let short = LocalTensor { coarse_level: 0, provenance: None, tensors: vec![] };
        assert!(compute_eta(&hier, &short, alpha, beta).is_err());
    }

    #[test]
    fn fused_statistics_match_the_regenerating_second_pass_bitwise() {
        use crate::upscale::mc_average_with_fluctuations;
        let hier = MeshHierarchy::up_to(2);
        let model = CoefficientModel::new(1, 1.0, 10.0, 88).unwrap();
        let (mean, fused_x) = mc_average_with_fluctuations(&hier, &model, 0, 2, 1, 5).unwrap();
        let (gamma, second_x) = compute_gamma(&hier, &model, 1, 5, &mean).unwrap();
        assert_eq!(fused_x.len(), second_x.len());
        for (a, b) in fused_x.iter().zip(&second_x) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let fused_report = report_from_stats(&hier, &model, &mean, &fused_x).unwrap();
        let full_report = build_report(&hier, &model, &mean).unwrap();
        assert_eq!(fused_report.gamma.to_bits(), gamma.to_bits());
        assert_eq!(fused_report.gamma.to_bits(), full_report.gamma.to_bits());
        assert_eq!(fused_report.eta.to_bits(), full_report.eta.to_bits());
        assert!(matches!(
            report_from_stats(&hier, &model, &mean, &fused_x[1..]),
            Err(Error::Mismatch(_))
        ));
    }

    #[test]
    fn report_bundles_the_individual_estimators() {
        let hier = MeshHierarchy::up_to(2);
        let model = CoefficientModel::new(1, 1.0, 10.0, 3).unwrap();
        let mean = mc_average(&hier, &model, 0, 2, 1, 3).unwrap();
        let report = build_report(&hier, &model, &mean).unwrap();
        let (gamma, x) = compute_gamma(&hier, &model, 1, 3, &mean).unwrap();
        let eta = compute_eta(&hier, &mean.collapse(&hier), 1.0, 10.0).unwrap();
        assert_eq!(report.gamma.to_bits(), gamma.to_bits());
        assert_eq!(report.eta.to_bits(), eta.to_bits());
        assert_eq!(report.per_element_x_rms, x);
        // Uniform coarse elements: the area weight of the normalization
        // factors out of the max over blocks.
        assert_eq!(report.denominator, hier.mesh(0).area(0) * mean.max_block_norm());
        assert!(report.admissibility.admissible);
        assert!(report.gamma > 0.0 && report.eta > 0.0);
        let json = serde_json::to_string(&report).unwrap();
        let v: serde_json::Value = serde_json::from_str(&json).unwrap();
        assert!(v["gamma"].is_number() && v["admissibility"]["min_eig"].is_number());
    }
}
