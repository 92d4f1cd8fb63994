//! Browser bindings for a small interactive tour of the upscaling pipeline:
//! draw a random coefficient, compress it into an effective coarse tensor
//! with its model-error estimators, and compare the coarse solutions against
//! a fine reference — all on a fixed toy geometry small enough for the
//! iterative solvers to feel instant in wasm.
//!
//! Every exported function returns a JSON string; the page parses it and
//! renders onto canvases. Build with
//! `wasm-pack build crates/quasilocal-web --target web` and serve `www/`.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use quasilocal::experiment::unit_load;
use quasilocal::fem::{l2_distance, l2_norm, prolong, solve_poisson};
use quasilocal::field::CoefficientModel;
use quasilocal::mesh::MeshHierarchy;
use quasilocal::solve::{solve_local, solve_quasilocal};
use quasilocal::upscale::mc_average_with_fluctuations;
use quasilocal::Result;

/// Coarse level of the demo models.
pub const DEMO_COARSE: usize = 1;
/// Level on which the random field is piecewise constant.
pub const DEMO_EPS: usize = 2;
/// Corrector / reference discretization level.
pub const DEMO_FINE: usize = 3;
/// Oversampling layers used by the demo.
pub const DEMO_ELL: usize = 1;

fn model(alpha: f64, beta: f64, seed: u32) -> Result<CoefficientModel> {
    CoefficientModel::new(DEMO_EPS, alpha, beta, seed as u64)
}

/// Vertex coordinates and triangles of one mesh level, for rendering.
pub fn geometry_json(level: usize) -> Result<String> {
    #[derive(Serialize)]
    struct Geometry<'a> {
        level: usize,
        mesh_size: f64,
        coords: &'a [[f64; 2]],
        triangles: &'a [[usize; 3]],
    }
    let hier = MeshHierarchy::up_to(level);
    let mesh = hier.mesh(level);
    Ok(serde_json::to_string(&Geometry {
        level,
        mesh_size: mesh.mesh_size(),
        coords: mesh.coords(),
        triangles: mesh.triangles(),
    })?)
}

/// One draw of the random checkerboard coefficient: the scalar value per
/// element of the field level.
pub fn sample_field_json(alpha: f64, beta: f64, seed: u32, sample: u32) -> Result<String> {
    #[derive(Serialize)]
    struct Field {
        level: usize,
        alpha: f64,
        beta: f64,
        sample: u32,
        values: Vec<f64>,
    }
    let hier = MeshHierarchy::up_to(DEMO_EPS);
    let draw = model(alpha, beta, seed)?.draw_sample(&hier, sample as u64)?;
    let values = draw.values().iter().map(|a| a[(0, 0)]).collect();
    Ok(serde_json::to_string(&Field {
        level: DEMO_EPS,
        alpha,
        beta,
        sample,
        values,
    })?)
}

/// Compress `n_samples` draws into the averaged local tensor, with the
/// fluctuation and jump estimators. Returns one 2×2 matrix (row-major) per
/// coarse element.
pub fn upscale_json(alpha: f64, beta: f64, seed: u32, n_samples: u32) -> Result<String> {
    #[derive(Serialize)]
    struct Upscaled {
        coarse_level: usize,
        n_samples: u32,
        gamma: f64,
        eta: f64,
        min_eig: f64,
        max_eig: f64,
        admissible: bool,
        tensors: Vec<[f64; 4]>,
    }
    let hier = MeshHierarchy::up_to(DEMO_FINE);
    let model = model(alpha, beta, seed)?;
    let (mean, x_rms) = mc_average_with_fluctuations(
        &hier,
        &model,
        DEMO_COARSE,
        DEMO_FINE,
        DEMO_ELL,
        n_samples as u64,
    )?;
    let report = quasilocal::estimator::report_from_stats(&hier, &model, &mean, &x_rms)?;
    let local = mean.collapse(&hier);
    let tensors = local.tensors.iter().map(|a| [a[(0, 0)], a[(0, 1)], a[(1, 0)], a[(1, 1)]]).collect();
    Ok(serde_json::to_string(&Upscaled {
        coarse_level: DEMO_COARSE,
        n_samples,
        gamma: report.gamma,
        eta: report.eta,
        min_eig: report.admissibility.min_eig,
        max_eig: report.admissibility.max_eig,
        admissible: report.admissibility.admissible,
        tensors,
    })?)
}

/// Solve both effective models and one held-out reference sample; nodal
/// values come back on the fine vertex set so all three render alike.
pub fn solve_json(alpha: f64, beta: f64, seed: u32, n_samples: u32) -> Result<String> {
    #[derive(Serialize)]
    struct Solutions {
        fine_level: usize,
        u_quasilocal: Vec<f64>,
        u_local: Vec<f64>,
        u_reference: Vec<f64>,
        rel_l2_quasilocal: f64,
        rel_l2_local: f64,
    }
    let hier = MeshHierarchy::up_to(DEMO_FINE);
    let model = model(alpha, beta, seed)?;
    let (mean, _) = mc_average_with_fluctuations(
        &hier,
        &model,
        DEMO_COARSE,
        DEMO_FINE,
        DEMO_ELL,
        n_samples as u64,
    )?;
    let local = mean.collapse(&hier);
    let u_ql = prolong(&hier, &solve_quasilocal(&hier, &mean, unit_load)?, DEMO_FINE)?;
    let u_loc = prolong(&hier, &solve_local(&hier, &local, unit_load)?, DEMO_FINE)?;

    // A fresh sample the averaging never saw plays the reference.
    let held_out = model.draw_sample(&hier, n_samples as u64)?;
    let tensors = held_out.restrict_to_level(&hier, DEMO_FINE)?;
    let u_ref = solve_poisson(hier.mesh(DEMO_FINE), &tensors, unit_load)?;

    let ref_norm = l2_norm(hier.mesh(DEMO_FINE), &u_ref);
    let rel = |u: &quasilocal::fem::FeFunction| -> Result<f64> {
        Ok(l2_distance(&hier, u, &u_ref)? / ref_norm)
    };
    Ok(serde_json::to_string(&Solutions {
        fine_level: DEMO_FINE,
        rel_l2_quasilocal: rel(&u_ql)?,
        rel_l2_local: rel(&u_loc)?,
        u_quasilocal: u_ql.values().to_vec(),
        u_local: u_loc.values().to_vec(),
        u_reference: u_ref.values().to_vec(),
    })?)
}

fn to_js<T>(result: Result<T>) -> std::result::Result<T, JsValue> {
    result.map_err(|e| JsValue::from_str(&e.to_string()))
}

#[wasm_bindgen]
pub fn geometry(level: usize) -> std::result::Result<String, JsValue> {
    to_js(geometry_json(level))
}

#[wasm_bindgen]
pub fn sample_field(
    alpha: f64,
    beta: f64,
    seed: u32,
    sample: u32,
) -> std::result::Result<String, JsValue> {
    to_js(sample_field_json(alpha, beta, seed, sample))
}

#[wasm_bindgen]
pub fn upscale(
    alpha: f64,
    beta: f64,
    seed: u32,
    n_samples: u32,
) -> std::result::Result<String, JsValue> {
    to_js(upscale_json(alpha, beta, seed, n_samples))
}

#[wasm_bindgen]
pub fn solve(
    alpha: f64,
    beta: f64,
    seed: u32,
    n_samples: u32,
) -> std::result::Result<String, JsValue> {
    to_js(solve_json(alpha, beta, seed, n_samples))
}
