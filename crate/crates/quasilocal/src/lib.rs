//! Numerical upscaling of random diffusion operators in 2D.
//!
//! Given a second-order diffusion problem `-div(A ∇u) = f` on the unit square
//! with a highly oscillatory random coefficient `A` (piecewise constant on a
//! fine "epsilon" mesh), this crate compresses the operator onto a coarse
//! finite element mesh:
//!
//! * a **quasilocal** effective operator: one 2×2 matrix block per pair of
//!   coarse elements `(T, K)` with `K` in a small patch around `T`, assembled
//!   from localized corrector problems;
//! * a **local** effective tensor: one (generally nonsymmetric) 2×2 matrix per
//!   coarse element, obtained by collapsing the quasilocal blocks.
//!
//! Monte Carlo averaging over coefficient samples turns either object into a
//! deterministic surrogate model whose coarse solutions approximate the
//! expected fine-scale solution. Two a-posteriori indicators quantify the
//! model error: `gamma` measures the sample fluctuation of the quasilocal
//! blocks, and `eta` measures the inter-element jumps of the collapsed tensor
//! (the price of localization).
//!
//! The crate is organized bottom-up:
//!
//! * [`mesh`] — nested structured triangulations of the unit square, patches,
//!   element genealogy;
//! * [`field`] — the random piecewise-constant coefficient model and sampling;
//! * [`sparse`] — CSR matrices and linear solvers (sparse Cholesky/LU behind
//!   the `direct` feature, conjugate gradients otherwise);
//! * [`fem`] — P1 finite elements: assembly, Dirichlet solves, prolongation,
//!   norms;
//! * [`interp`] — the projective quasi-interpolation operator whose kernel
//!   defines the fine-scale space;
//! * [`corrector`] — localized element corrector problems (saddle-point
//!   systems on patches);
//! * [`upscale`] — assembly of quasilocal/local effective operators and their
//!   Monte Carlo averages;
//! * [`solve`] — coarse solves with either effective model, fine reference
//!   solves, and error norms;
//! * [`estimator`] — the `gamma` and `eta` model-error indicators;
//! * [`experiment`] — end-to-end experiment drivers (upscaling runs,
//!   convergence studies, self-validation) and their file outputs.

pub mod corrector;
pub mod estimator;
pub mod experiment;
pub mod fem;
pub mod field;
pub mod interp;
pub mod mesh;
pub mod solve;
pub mod sparse;
pub mod upscale;

mod error;

pub use error::{Error, Result};
