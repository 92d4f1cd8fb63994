//! The three competing solutions and their error norms.
//!
//! * per-sample fine reference `u_h` (standard P1 Galerkin),
//! * deterministic coarse `u_H` from the quasilocal averaged operator,
//! * deterministic coarse `ũ_H` from the collapsed local tensor,
//!
//! plus the evaluation pass that compares both coarse solutions against a
//! fresh batch of reference samples in the `√(E[‖·‖²_{L²}])` norm and in the
//! distance of means.

use nalgebra::{DMatrix, DVector, Vector2};
use serde::Serialize;

use crate::fem::{
    assemble_load, extend_free, mass_form, prolong, solve_poisson, FeFunction,
};
use crate::field::{CoefficientModel, CoefficientSample};
use crate::mesh::MeshHierarchy;
use crate::upscale::{assemble_bilinear, LocalTensor, QuasilocalTensor};
use crate::{Error, Result};

/// Fine-level Galerkin solution for one coefficient sample.
pub fn solve_reference(
    hier: &MeshHierarchy,
    sample: &CoefficientSample,
    fine_level: usize,
    f: impl Fn(f64, f64) -> f64,
) -> Result<FeFunction> {
    let tensors = sample.restrict_to_level(hier, fine_level)?;
    solve_poisson(hier.mesh(fine_level), &tensors, f)
}

fn dense_nonsymmetric_solve(
    g: DMatrix<f64>,
    b: &[f64],
    what: &str,
) -> Result<Vec<f64>> {
    let rhs = DVector::from_column_slice(b);
    let residual_scale = 1.0 + rhs.norm();
    let lu = g.clone().lu();
    let x = lu
        .solve(&rhs)
        .ok_or_else(|| Error::Solve(format!("{what} system is singular")))?;
    let res = (&g * &x - &rhs).norm();
    if res > 1e-10 * residual_scale {
        return Err(Error::Solve(format!(
            "{what} solve left relative residual {:.3e}",
            res / residual_scale
        )));
    }
    Ok(x.as_slice().to_vec())
}

/// Coarse solution of the quasilocal effective model: `𝔞(u_H, v_H) = (f, v_H)`
/// for all coarse test functions `v_H`.
///
/// Preconditions: the assembled coarse operator must have a positive-definite
/// symmetric part (else the model is reported invalid rather than solved).
pub fn solve_quasilocal(
    hier: &MeshHierarchy,
    tensor: &QuasilocalTensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<FeFunction> {
    let coarse = hier.mesh(tensor.coarse_level);
    let g = assemble_bilinear(hier, tensor)?.to_dense();
    let sym = 0.5 * (&g + g.transpose());
    if nalgebra::Cholesky::new(sym).is_none() {
        return Err(Error::ModelInvalid(
            "the quasilocal coarse operator has an indefinite symmetric part".into(),
        ));
    }
    let b = assemble_load(coarse, f);
    let x = dense_nonsymmetric_solve(g, &b, "quasilocal coarse")?;
    Ok(extend_free(coarse, &x))
}

/// Coarse solution of the fully local model: `∫ ∇ũ_H · (Ā_H ∇v_H) = (f, v_H)`.
///
/// The tensor may be nonsymmetric; the system matrix pairs the trial
/// gradient outside the tensor and the test gradient inside, matching the
/// collapse of the quasilocal form.
pub fn solve_local(
    hier: &MeshHierarchy,
    tensor: &LocalTensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<FeFunction> {
    let coarse = hier.mesh(tensor.coarse_level);
    if tensor.tensors.len() != coarse.n_elements() {
        return Err(Error::Mismatch(format!(
            "local tensor has {} entries for {} elements",
            tensor.tensors.len(),
            coarse.n_elements()
        )));
    }
    let adm = tensor.admissibility();
    if !adm.admissible {
        return Err(Error::ModelInvalid(format!(
            "local tensor is inadmissible: smallest symmetric-part eigenvalue {:.3e}",
            adm.min_eig
        )));
    }
    let n_free = coarse.free_vertices().len();
    let mut m = DMatrix::zeros(n_free, n_free);
    for t in 0..coarse.n_elements() {
        let tri = coarse.triangle(t);
        let grads = coarse.grads(t);
        let a = &tensor.tensors[t];
        let area = coarse.area(t);
        for (ri, &vr) in tri.iter().enumerate() {
            let Some(r) = coarse.free_index(vr) else { continue };
            // Test gradient sits inside the tensor: entries are
            // m[r, c] = Σ_T |T| ∇λ_c · (A_T ∇λ_r).
            let agr = a * Vector2::new(grads[ri][0], grads[ri][1]);
            for (ci, &vc) in tri.iter().enumerate() {
                let Some(c) = coarse.free_index(vc) else { continue };
                let gc = Vector2::new(grads[ci][0], grads[ci][1]);
                m[(r, c)] += area * gc.dot(&agr);
            }
        }
    }
    let b = assemble_load(coarse, f);
    let x = dense_nonsymmetric_solve(m, &b, "local coarse")?;
    Ok(extend_free(coarse, &x))
}

/// Empirical error norms of one experiment row: both coarse solutions against
/// `n_eval` fresh reference samples (indices `eval_start ..`).
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ErrorNorms {
    /// `√(E[‖u_h‖²_{L²}])`, the normalization of the relative columns.
    pub ref_norm: f64,
    /// `√(E[‖u_h − u_H‖²_{L²}])` for the quasilocal solution.
    pub abs_rms_quasilocal: f64,
    /// Same for the local solution.
    pub abs_rms_local: f64,
    /// `‖E[u_h] − u_H‖_{L²}`.
    pub abs_mean_quasilocal: f64,
    /// `‖E[u_h] − ũ_H‖_{L²}`.
    pub abs_mean_local: f64,
    pub rel_rms_quasilocal: f64,
    pub rel_rms_local: f64,
    pub rel_mean_quasilocal: f64,
    pub rel_mean_local: f64,
}

/// Solve the reference problem for evaluation samples
/// `eval_start .. eval_start + n_eval`, concurrently, in index order.
pub fn solve_references(
    hier: &MeshHierarchy,
    model: &CoefficientModel,
    fine_level: usize,
    eval_start: u64,
    n_eval: u64,
    f: impl Fn(f64, f64) -> f64 + Sync,
) -> Result<Vec<FeFunction>> {
    if n_eval == 0 {
        return Err(Error::InvalidInput(
            "error evaluation needs at least one reference sample".into(),
        ));
    }
    let solve_one = |i: u64| -> Result<FeFunction> {
        let sample = model.draw_sample(hier, eval_start + i)?;
        solve_reference(hier, &sample, fine_level, &f)
    };
    #[cfg(feature = "parallel")]
    let references: Result<Vec<FeFunction>> = {
        use rayon::prelude::*;
        (0..n_eval).into_par_iter().map(solve_one).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let references: Result<Vec<FeFunction>> = (0..n_eval).map(solve_one).collect();
    references
}

/// Evaluate both coarse solutions against fresh reference samples.
///
/// Reference solves run concurrently; all reductions happen afterwards in
/// sample-index order, so the result does not depend on the thread count.
pub fn error_norms(
    hier: &MeshHierarchy,
    model: &CoefficientModel,
    fine_level: usize,
    eval_start: u64,
    n_eval: u64,
    u_quasilocal: &FeFunction,
    u_local: &FeFunction,
    f: impl Fn(f64, f64) -> f64 + Sync,
) -> Result<ErrorNorms> {
    let references = solve_references(hier, model, fine_level, eval_start, n_eval, f)?;
    error_norms_against(hier, fine_level, &references, u_quasilocal, u_local)
}

/// [`error_norms`] against an already-solved batch of reference solutions
/// (lets one batch serve several coarse levels).
pub fn error_norms_against(
    hier: &MeshHierarchy,
    fine_level: usize,
    references: &[FeFunction],
    u_quasilocal: &FeFunction,
    u_local: &FeFunction,
) -> Result<ErrorNorms> {
    if references.is_empty() {
        return Err(Error::InvalidInput(
            "error evaluation needs at least one reference sample".into(),
        ));
    }
    let fine = hier.mesh(fine_level);
    for u in references {
        if u.level() != fine_level {
            return Err(Error::Mismatch(format!(
                "reference solution lives on level {} but evaluation runs on level {fine_level}",
                u.level()
            )));
        }
    }
    let u_ql = prolong(hier, u_quasilocal, fine_level)?;
    let u_loc = prolong(hier, u_local, fine_level)?;

    let n = references.len() as f64;
    let mut sum_sq_ref = 0.0;
    let mut sum_sq_ql = 0.0;
    let mut sum_sq_loc = 0.0;
    let mut mean = vec![0.0; fine.n_vertices()];
    let mut diff = vec![0.0; fine.n_vertices()];
    for u in references {
        sum_sq_ref += mass_form(fine, u.values(), u.values()).max(0.0);
        for (d, (a, b)) in diff.iter_mut().zip(u.values().iter().zip(u_ql.values())) {
            *d = a - b;
        }
        sum_sq_ql += mass_form(fine, &diff, &diff).max(0.0);
        for (d, (a, b)) in diff.iter_mut().zip(u.values().iter().zip(u_loc.values())) {
            *d = a - b;
        }
        sum_sq_loc += mass_form(fine, &diff, &diff).max(0.0);
        for (m, a) in mean.iter_mut().zip(u.values()) {
            *m += a;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let l2_of = |values: &[f64]| mass_form(fine, values, values).max(0.0).sqrt();
    for (d, (a, b)) in diff.iter_mut().zip(mean.iter().zip(u_ql.values())) {
        *d = a - b;
    }
    let abs_mean_quasilocal = l2_of(&diff);
    for (d, (a, b)) in diff.iter_mut().zip(mean.iter().zip(u_loc.values())) {
        *d = a - b;
    }
    let abs_mean_local = l2_of(&diff);

    let ref_norm = (sum_sq_ref / n).sqrt();
    let abs_rms_quasilocal = (sum_sq_ql / n).sqrt();
    let abs_rms_local = (sum_sq_loc / n).sqrt();
    if !(ref_norm.is_finite() && ref_norm > 0.0) {
        return Err(Error::Solve(format!(
            "reference norm {ref_norm} cannot normalize relative errors"
        )));
    }
    Ok(ErrorNorms {
        ref_norm,
        abs_rms_quasilocal,
        abs_rms_local,
        abs_mean_quasilocal,
        abs_mean_local,
        rel_rms_quasilocal: abs_rms_quasilocal / ref_norm,
        rel_rms_local: abs_rms_local / ref_norm,
        rel_mean_quasilocal: abs_mean_quasilocal / ref_norm,
        rel_mean_local: abs_mean_local / ref_norm,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corrector::solve_all_correctors;
    use crate::fem::{energy_form, l2_distance, restrict_free};
    use crate::interp::InterpolationOperator;
    use crate::upscale::{assemble_quasilocal, mc_average};
    use nalgebra::Matrix2;

    const ONE: fn(f64, f64) -> f64 = |_, _| 1.0;

    #[test]
    fn reference_is_linear_in_the_coefficient() {
        let hier = MeshHierarchy::up_to(3);
        let m1 = CoefficientModel::new(1, 1.0, 1.0, 0).unwrap();
        let m10 = CoefficientModel::new(1, 10.0, 10.0, 0).unwrap();
        let u1 = solve_reference(&hier, &m1.draw_sample(&hier, 0).unwrap(), 3, ONE).unwrap();
        let u10 = solve_reference(&hier, &m10.draw_sample(&hier, 0).unwrap(), 3, ONE).unwrap();
        for (a, b) in u1.values().iter().zip(u10.values()) {
            assert!((a - 10.0 * b).abs() <= 1e-10 * (1.0 + a.abs()));
        }
        let zero =
            solve_reference(&hier, &m1.draw_sample(&hier, 0).unwrap(), 3, |_, _| 0.0).unwrap();
        assert!(zero.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn degenerate_collapse_equals_averaged_coefficient_fem() {
        // coarse = ε = fine: correctors vanish, the quasilocal solve must
        // equal plain FEM with the (element-constant) coefficient itself.
        let hier = MeshHierarchy::up_to(2);
        let level = 2;
        let model = CoefficientModel::new(level, 1.0, 10.0, 314).unwrap();
        let ih = InterpolationOperator::build(&hier, level, level).unwrap();
        for s in 0..3u64 {
            let sample = model.draw_sample(&hier, s).unwrap();
            let set = solve_all_correctors(&hier, &ih, &sample, 1).unwrap();
            let ql = assemble_quasilocal(&hier, &sample, &set, 1).unwrap();
            let u_h = solve_quasilocal(&hier, &ql, ONE).unwrap();
            let tensors = sample.restrict_to_level(&hier, level).unwrap();
            let u_fem = solve_poisson(hier.mesh(level), &tensors, ONE).unwrap();
            let d = l2_distance(&hier, &u_h, &u_fem).unwrap();
            assert!(d <= 1e-10, "sample {s}: L² gap {d:.3e}");
        }
    }

    #[test]
    fn local_solver_matches_identity_poisson_and_scales() {
        let hier = MeshHierarchy::up_to(2);
        let coarse = hier.mesh(1);
        for c in [1.0, 4.0] {
            let tensor = LocalTensor {
                coarse_level: 1,
                provenance: None,
                tensors: vec![Matrix2::identity() * c; coarse.n_elements()],
            };
            let u = solve_local(&hier, &tensor, ONE).unwrap();
            let poisson =
                solve_poisson(coarse, &vec![Matrix2::identity(); coarse.n_elements()], ONE)
                    .unwrap();
            for (a, b) in u.values().iter().zip(poisson.values()) {
                assert!((a - b / c).abs() <= 1e-11, "c = {c}");
            }
        }
    }

    #[test]
    fn local_solver_satisfies_the_variational_equations() {
        // Random admissible nonsymmetric tensors: the solution must satisfy
        // Σ_T |T| ∇u·(A_T ∇λ_r) = (1, λ_r) for every free test vertex r,
        // evaluated here by an independent per-element quadrature.
        let hier = MeshHierarchy::up_to(1);
        let coarse = hier.mesh(1);
        let tensors: Vec<Matrix2<f64>> = (0..coarse.n_elements())
            .map(|t| {
                let s = ((t as f64 * 1.7).sin() * 100.0).fract();
                Matrix2::new(2.0 + s, 0.4, -0.3, 1.5 - 0.5 * s)
            })
            .collect();
        let tensor =
            LocalTensor { coarse_level: 1, provenance: None, tensors: tensors.clone() };
        let u = solve_local(&hier, &tensor, ONE).unwrap();
        let load = assemble_load(coarse, ONE);
        for (r, &v) in coarse.free_vertices().iter().enumerate() {
            let mut hat = FeFunction::zeros(coarse);
            hat.values_mut()[v] = 1.0;
            let lhs = energy_form(coarse, &tensors, u.values(), hat.values());
            assert!(
                (lhs - load[r]).abs() <= 1e-11,
                "vertex {v}: residual {:.3e}",
                lhs - load[r]
            );
        }
    }

    #[test]
    fn inadmissible_local_tensor_is_rejected() {
        let hier = MeshHierarchy::up_to(1);
        let coarse = hier.mesh(1);
        let mut tensors = vec![Matrix2::identity(); coarse.n_elements()];
        tensors[5] = Matrix2::new(1.0, 3.0, 3.0, -1.0);
        let tensor = LocalTensor { coarse_level: 1, provenance: None, tensors };
        let err = solve_local(&hier, &tensor, ONE).unwrap_err();
        assert!(err.is_model_invalid(), "got {err}");
    }

    #[test]
    fn indefinite_quasilocal_operator_is_rejected() {
        let hier = MeshHierarchy::up_to(2);
        let model = CoefficientModel::new(1, 1.0, 1.0, 0).unwrap();
        let mean = mc_average(&hier, &model, 0, 2, 1, 1).unwrap();
        let flipped = mean.negated_for_test();
        let err = solve_quasilocal(&hier, &flipped, ONE).unwrap_err();
        assert!(err.is_model_invalid(), "got {err}");
    }

    #[test]
    fn full_domain_localization_matches_dense_ideal_oracle() {
        // With patches covering the whole domain the pipeline must reproduce
        // the ideal (unlocalized) method. The oracle assembles it densely:
        // per coarse hat λ_r, the global corrector 𝓒λ_r is solved from the
        // full KKT system over all interior fine vertices, and the coarse
        // matrix entries come from the plain fine-level energy product.
        let hier = MeshHierarchy::up_to(2);
        let (cl, fl, ell) = (0usize, 2usize, 8usize);
        let coarse = hier.mesh(cl);
        let fine = hier.mesh(fl);
        let model = CoefficientModel::new(1, 1.0, 10.0, 77).unwrap();
        let sample = model.draw_sample(&hier, 0).unwrap();
        let tensors = sample.restrict_to_level(&hier, fl).unwrap();

        // Pipeline side.
        let ih = InterpolationOperator::build(&hier, cl, fl).unwrap();
        let set = solve_all_correctors(&hier, &ih, &sample, ell).unwrap();
        let ql = assemble_quasilocal(&hier, &sample, &set, ell).unwrap();
        let u_pipeline = solve_quasilocal(&hier, &ql, ONE).unwrap();

        // Oracle side: dense KKT per coarse hat.
        let n_free_c = coarse.free_vertices().len();
        let free_f: Vec<usize> = fine.free_vertices().to_vec();
        let n_free_f = free_f.len();
        let k = crate::fem::assemble_stiffness(fine, &tensors).unwrap().to_dense();
        let ih_mat = ih.matrix();
        let mut c = DMatrix::zeros(n_free_c, n_free_f);
        for r in 0..n_free_c {
            let (cols, vals) = ih_mat.row(r);
            for (&j, &v) in cols.iter().zip(vals) {
                if let Some(jf) = fine.free_index(j) {
                    c[(r, jf)] = v;
                }
            }
        }
        let nk = n_free_f + n_free_c;
        let mut kkt = DMatrix::zeros(nk, nk);
        kkt.view_mut((0, 0), (n_free_f, n_free_f)).copy_from(&k);
        kkt.view_mut((0, n_free_f), (n_free_f, n_free_c)).copy_from(&c.transpose());
        kkt.view_mut((n_free_f, 0), (n_free_c, n_free_f)).copy_from(&c);
        let kkt_lu = kkt.lu();

        // Corrected hats (1 − 𝓒)λ_r as full fine nodal vectors.
        let mut corrected: Vec<Vec<f64>> = Vec::with_capacity(n_free_c);
        let mut plain: Vec<Vec<f64>> = Vec::with_capacity(n_free_c);
        for &v in coarse.free_vertices() {
            let mut hat = FeFunction::zeros(coarse);
            hat.values_mut()[v] = 1.0;
            let hat_fine = prolong(&hier, &hat, fl).unwrap();
            let hat_free = restrict_free(fine, &hat_fine);
            let mut rhs = DVector::zeros(nk);
            let k_hat = &k * DVector::from_column_slice(&hat_free);
            rhs.rows_mut(0, n_free_f).copy_from(&k_hat);
            let sol = kkt_lu.solve(&rhs).expect("KKT system is regular");
            let mut w = hat_fine.values().to_vec();
            for (jf, &vf) in free_f.iter().enumerate() {
                w[vf] -= sol[jf];
            }
            corrected.push(w);
            plain.push(hat_fine.values().to_vec());
        }
        let mut g = DMatrix::zeros(n_free_c, n_free_c);
        for r in 0..n_free_c {
            for col in 0..n_free_c {
                g[(r, col)] = energy_form(fine, &tensors, &plain[col], &corrected[r]);
            }
        }
        let b = DVector::from_column_slice(&assemble_load(coarse, ONE));
        let u_oracle = g.lu().solve(&b).expect("oracle system is regular");

        let u_pipe_free = restrict_free(coarse, &u_pipeline);
        for (i, (a, b)) in u_pipe_free.iter().zip(u_oracle.iter()).enumerate() {
            assert!(
                (a - b).abs() <= 1e-10 * (1.0 + b.abs()),
                "coarse dof {i}: pipeline {a} vs oracle {b}"
            );
        }
    }

    #[test]
    fn error_norms_trivial_cases() {
        let hier = MeshHierarchy::up_to(3);
        let fl = 3;
        // Deterministic field: every sample identical.
        let model = CoefficientModel::new(1, 2.0, 2.0, 5).unwrap();
        let u_ref = solve_reference(&hier, &model.draw_sample(&hier, 9).unwrap(), fl, ONE).unwrap();

        // Coarse guesses equal to the reference ⇒ all errors vanish.
        let e = error_norms(&hier, &model, fl, 9, 4, &u_ref, &u_ref, ONE).unwrap();
        assert_eq!(e.abs_rms_quasilocal, 0.0);
        assert_eq!(e.abs_rms_local, 0.0);
        assert_eq!(e.abs_mean_quasilocal, 0.0);
        assert_eq!(e.abs_mean_local, 0.0);
        assert!(e.ref_norm > 0.0);

        // Deterministic field with an arbitrary coarse guess: RMS error
        // equals the single-sample L² distance.
        let coarse = hier.mesh(1);
        let guess = extend_free(coarse, &vec![0.01; coarse.free_vertices().len()]);
        let e = error_norms(&hier, &model, fl, 0, 5, &guess, &guess, ONE).unwrap();
        let single = l2_distance(&hier, &u_ref, &guess).unwrap();
        assert!((e.abs_rms_quasilocal - single).abs() <= 1e-12 * (1.0 + single));
        assert!((e.abs_mean_quasilocal - single).abs() <= 1e-10 * (1.0 + single));

        assert!(error_norms(&hier, &model, fl, 0, 0, &guess, &guess, ONE).is_err());
    }

    #[test]
    fn jensen_ordering_holds_for_random_fields() {
        let hier = MeshHierarchy::up_to(3);
        let model = CoefficientModel::new(2, 1.0, 10.0, 4242).unwrap();
        let coarse = hier.mesh(1);
        let mean = mc_average(&hier, &model, 1, 3, 2, 3).unwrap();
        let u_ql = solve_quasilocal(&hier, &mean, ONE).unwrap();
        let u_loc = solve_local(&hier, &mean.collapse(&hier), ONE).unwrap();
        let e = error_norms(&hier, &model, 3, 3, 6, &u_ql, &u_loc, ONE).unwrap();
        assert!(e.abs_mean_quasilocal <= e.abs_rms_quasilocal);
        assert!(e.abs_mean_local <= e.abs_rms_local);
        assert!(e.rel_rms_quasilocal > 0.0 && e.rel_rms_local > 0.0);
        assert_eq!(coarse.level(), u_ql.level());
    }
}
