//! First-return, finite-time and ruin descriptors assembled from bridge densities.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::distribution::{DiscreteCDF, Poisson};

use crate::bridge::{bridge_recursion, resummed_bridge, LevelDurationGrid, ResumOptions};
use crate::error::{Error, Result};
use crate::model::{DurationKernel, FluidModel, KernelRepr, StateSpace};

/// How the series `Σₙ L⁽ⁿ⁾` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PsiMethod {
    /// Fixed point of the summed recursion; covers every order at once.
    #[default]
    Resummed,
    /// Orders `2..=N_max` one at a time, stopping when the increment drops below `eps_tail`.
    Direct,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PsiOptions {
    pub method: PsiMethod,
    pub n_max: usize,
    pub eps_tail: f64,
    pub resum: ResumOptions,
}

impl Default for PsiOptions {
    fn default() -> Self {
        Self { method: PsiMethod::Resummed, n_max: 8, eps_tail: 1e-5, resum: ResumOptions::default() }
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::Serializer;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(super::rows(m))
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DescriptorResult {
    /// `|S⁺|×|S⁻|`, or `1×|S⁻|` for ruin.
    #[serde(with = "matrix_rows")]
    pub matrix: DMatrix<f64>,
    /// Highest order included, or fixed-point iterations for the resummed series.
    pub n_used: usize,
    /// Last increment, final residual or analytic tail bound.
    pub tail_estimate: f64,
    pub converged: bool,
    /// Sup-norm of each order's contribution, starting at order 2.
    pub increments: Vec<f64>,
    pub theta1: f64,
    pub theta2: f64,
    pub z: f64,
    pub t: Option<f64>,
    pub u: Option<f64>,
    pub n_stages: Option<usize>,
    pub method: PsiMethod,
    /// Mass left in the outermost level cells.
    pub boundary_mass: f64,
    /// Largest negative value clamped away.
    pub clamped: f64,
}

/// `Ψ⁽ᶻ⁾(θ₁, θ₂)`, the Laplace transform of dividends and costs up to the first return.
pub fn psi(
    model: &FluidModel,
    z: f64,
    theta1: f64,
    theta2: f64,
    grid: &LevelDurationGrid,
    opts: &PsiOptions,
) -> Result<DescriptorResult> {
    let zi = grid.z_index(z)?;
    match opts.method {
        PsiMethod::Direct => {
            let tensor = bridge_recursion(model, grid, theta1, theta2, opts.n_max)?;
            let mut sum = DMatrix::zeros(tensor.dims.pp, tensor.dims.pn);
            let mut increments = Vec::new();
            let mut n_used = opts.n_max;
            let mut converged = false;
            for n in 2..=opts.n_max {
                let inc = tensor.slices[n - 2].return_mass(zi);
                let norm = inc.amax();
                sum += inc;
                increments.push(norm);
                if n > 2 && norm < opts.eps_tail {
                    n_used = n;
                    converged = true;
                    break;
                }
            }
            let used = &tensor.diagnostics[..n_used - 1];
            Ok(DescriptorResult {
                matrix: sum,
                n_used,
                tail_estimate: *increments.last().unwrap(),
                converged,
                increments,
                theta1,
                theta2,
                z,
                t: None,
                u: None,
                n_stages: None,
                method: PsiMethod::Direct,
                boundary_mass: used.iter().map(|d| d.boundary_mass).sum(),
                clamped: used.iter().map(|d| d.clamped).fold(0.0, f64::max),
            })
        }
        PsiMethod::Resummed => {
            let resum = ResumOptions { origin_only: zi == 0, ..opts.resum };
            let r = resummed_bridge(model, grid, theta1, theta2, &resum)?;
            Ok(DescriptorResult {
                matrix: r.integrate(z)?,
                n_used: r.iterations,
                tail_estimate: *r.residuals.last().unwrap_or(&0.0),
                converged: r.converged,
                increments: r.residuals.clone(),
                theta1,
                theta2,
                z,
                t: None,
                u: None,
                n_stages: None,
                method: PsiMethod::Resummed,
                boundary_mass: r.diagnostics.boundary_mass,
                clamped: r.diagnostics.clamped,
            })
        }
    }
}

/// `e^{-m(log m − log(γt) − 1)}`, the decay rate of the calendar-time series.
pub fn calendar_tail_bound(m: usize, gamma_t: f64) -> f64 {
    let m = m as f64;
    (-m * (m.ln() - gamma_t.ln() - 1.0)).exp()
}

/// Smallest order `m ≥ 2` whose calendar-time bound is below `eps`.
pub fn calendar_order(gamma_t: f64, eps: f64) -> usize {
    (2..).find(|&m| m as f64 > gamma_t && calendar_tail_bound(m, gamma_t) < eps).unwrap()
}

/// `P(T_m ≤ t)` for the Poisson(γ) grid, i.e. `P(N(t) ≥ m)`.
pub fn poisson_epoch_prob(m: usize, gamma_t: f64) -> f64 {
    if m == 0 {
        return 1.0;
    }
    let p = Poisson::new(gamma_t).expect("positive Poisson mean");
    (1.0 - p.cdf(m as u64 - 1)).max(0.0)
}

/// Calendar-time result with the per-order checks against `P(T_m ≤ t)`.
#[derive(Debug, Clone, Serialize)]
pub struct FiniteTimeResult {
    #[serde(flatten)]
    pub result: DescriptorResult,
    /// `P(T_n ≤ t)` for each order, starting at 2.
    pub poisson_bounds: Vec<f64>,
    /// Every increment is at most the matching Poisson bound.
    pub poisson_check: bool,
}

/// `Ψ⁽ᶻ'*⁾(t)`: probability of a first return by calendar time `t`, for kernels without arrivals.
///
/// The order is `m_max` when given, otherwise the smallest `m` with
/// `e^{-m(log m − log(γt) − 1)} < eps`.
pub fn finite_time_return(
    model: &FluidModel,
    z: f64,
    t: f64,
    grid: &LevelDurationGrid,
    m_max: Option<usize>,
    eps: f64,
) -> Result<FiniteTimeResult> {
    if !model.kernel.d_is_zero() {
        return Err(Error::Precondition(
            "finite-time return needs D(v) = 0 for all v: with arrivals the duration is not calendar time".into(),
        ));
    }
    if !(t > 0.0) {
        return Err(Error::Precondition(format!("t must be positive, got {t}")));
    }
    if t + z > grid.u_max + 1e-12 {
        return Err(Error::Precondition(format!(
            "t + z = {} exceeds U_max = {}: the duration grid must cover the horizon",
            t + z,
            grid.u_max
        )));
    }
    let zi = grid.z_index(z)?;
    let gamma_t = model.gamma() * t;
    let m = m_max.unwrap_or_else(|| calendar_order(gamma_t, eps)).max(2);
    let tensor = bridge_recursion(model, grid, 0.0, 0.0, m)?;
    let mut sum = DMatrix::zeros(tensor.dims.pp, tensor.dims.pn);
    let mut increments = Vec::with_capacity(m - 1);
    let mut poisson_bounds = Vec::with_capacity(m - 1);
    let mut poisson_check = true;
    for n in 2..=m {
        let inc = tensor.slices[n - 2].return_mass_until(zi, t + z, grid.du());
        let bound = poisson_epoch_prob(n, gamma_t);
        let row_max = (0..inc.nrows()).map(|a| inc.row(a).sum()).fold(0.0, f64::max);
        poisson_check &= row_max <= bound + 1e-9;
        increments.push(inc.amax());
        poisson_bounds.push(bound);
        sum += inc;
    }
    let tail = calendar_tail_bound(m, gamma_t);
    Ok(FiniteTimeResult {
        result: DescriptorResult {
            matrix: sum,
            n_used: m,
            tail_estimate: tail,
            converged: tail < eps || m_max.is_some(),
            increments,
            theta1: 0.0,
            theta2: 0.0,
            z,
            t: Some(t),
            u: None,
            n_stages: None,
            method: PsiMethod::Direct,
            boundary_mass: tensor.diagnostics.iter().map(|d| d.boundary_mass).sum(),
            clamped: tensor.diagnostics.iter().map(|d| d.clamped).fold(0.0, f64::max),
        },
        poisson_bounds,
        poisson_check,
    })
}

/// Prepends an Erlang ramp of `n_stages` artificial states with rate 1 feeding `i0 ∈ S⁺`.
///
/// Artificial states are `0..n_stages`; original state `i` becomes `n_stages + i`. Each stage ends
/// with an arrival after an exponential time of rate `n_stages/u`, so the ramp height has mean `u`
/// and variance `u²/n_stages`.
pub fn erlangize(model: &FluidModel, u: f64, n_stages: usize, i0: usize) -> Result<FluidModel> {
    if !(u > 0.0 && u.is_finite()) {
        return Err(Error::Precondition(format!("initial level u must be positive, got {u}")));
    }
    if n_stages == 0 {
        return Err(Error::Precondition("n_stages must be at least 1".into()));
    }
    if i0 >= model.p() || !model.space.is_plus(i0) {
        return Err(Error::Precondition(format!("entry state {i0} must lie in S+")));
    }
    let rate = n_stages as f64 / u;
    let repr = KernelRepr::Erlang { stages: n_stages, rate, entry: i0, base: Box::new(model.kernel.repr().clone()) };
    let gamma = model.gamma().max(rate);
    let kernel = DurationKernel::new(repr, Some(gamma))?;
    let p = model.p() + n_stages;
    let mut r = vec![1.0; n_stages];
    r.extend_from_slice(model.space.rates());
    let mut sigma = vec![0.0; n_stages];
    sigma.extend_from_slice(&model.sigma);
    let mut alpha = nalgebra::DVector::zeros(p);
    alpha[0] = 1.0;
    let mut k_cost = DMatrix::zeros(p, p);
    k_cost.view_mut((n_stages, n_stages), (model.p(), model.p())).copy_from(&model.k_cost);
    FluidModel::new(StateSpace::new(r)?, kernel, alpha, sigma, k_cost)
}

/// Default grid for the Erlangized model: the duration window of the original model and a level
/// window widened by `u`.
pub fn ruin_grid(model: &FluidModel, u: f64) -> LevelDurationGrid {
    let mut g = LevelDurationGrid::for_model(model);
    g.l_max += u;
    g
}

/// `ψ⁽⁰⁾(θ₁, θ₂, u)` from `J(0) = i0`, approximated by the first return of the Erlangized model
/// from its first artificial state.
#[allow(clippy::too_many_arguments)]
pub fn ruin_descriptor(
    model: &FluidModel,
    u: f64,
    n_stages: usize,
    i0: usize,
    theta1: f64,
    theta2: f64,
    grid: &LevelDurationGrid,
    opts: &PsiOptions,
) -> Result<DescriptorResult> {
    let aug = erlangize(model, u, n_stages, i0)?;
    let mut res = psi(&aug, 0.0, theta1, theta2, grid, opts)?;
    res.matrix = res.matrix.rows(0, 1).into_owned();
    res.u = Some(u);
    res.n_stages = Some(n_stages);
    Ok(res)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bridge::DurationTail;
    use crate::gallery;
    use crate::model::{default_samples, validate_model};

    #[test]
    fn calendar_order_matches_bound() {
        let m = calendar_order(6.0, 1e-8);
        assert!(calendar_tail_bound(m, 6.0) < 1e-8);
        assert!(calendar_tail_bound(m - 1, 6.0) >= 1e-8);
    }

    #[test]
    fn poisson_epoch_prob_limits() {
        assert_eq!(poisson_epoch_prob(0, 3.0), 1.0);
        assert!((poisson_epoch_prob(1, 3.0) - (1.0 - (-3f64).exp())).abs() < 1e-14);
        assert!(poisson_epoch_prob(40, 3.0) < 1e-20);
    }

    #[test]
    fn erlangized_model_is_valid() {
        let m = gallery::build(&gallery::model_a());
        for n in [1, 4, 16] {
            let aug = erlangize(&m, 1.0, n, 0).unwrap();
            assert_eq!(aug.p(), n + 2);
            assert_eq!(aug.gamma(), (n as f64).max(1.0));
            let rep = validate_model(&aug, &default_samples(&aug.kernel, 10.0)).unwrap();
            assert!(rep.passed(), "{:?}", rep.failures().collect::<Vec<_>>());
            let (c, d) = aug.kernel.eval(0.3).unwrap();
            for i in 0..aug.p() {
                assert!((c.row(i).sum() + d.row(i).sum()).abs() < 1e-10);
            }
            assert_eq!(aug.space.minus(), &[n + 1]);
        }
    }

    #[test]
    fn erlangize_rejects_minus_entry() {
        let m = gallery::build(&gallery::model_a());
        assert!(erlangize(&m, 1.0, 2, 1).is_err());
        assert!(erlangize(&m, 0.0, 2, 0).is_err());
    }

    #[test]
    fn finite_time_requires_no_arrivals() {
        let m = gallery::build(&gallery::model_a());
        let g = LevelDurationGrid::new(8, 8, 8.0, 8.0, DurationTail::Freeze).unwrap();
        assert!(matches!(finite_time_return(&m, 0.0, 1.0, &g, Some(3), 1e-8), Err(Error::Precondition(_))));
    }

    #[test]
    fn zero_weights_make_theta_irrelevant() {
        let m = gallery::build(&gallery::model_a());
        let g = LevelDurationGrid::new(16, 16, 8.0, 16.0, DurationTail::Freeze).unwrap();
        let opts = PsiOptions { method: PsiMethod::Direct, n_max: 5, ..Default::default() };
        let a = psi(&m, 0.0, 0.0, 0.0, &g, &opts).unwrap();
        let b = psi(&m, 0.0, 1.0, 2.0, &g, &opts).unwrap();
        assert_eq!(a.matrix, b.matrix);
    }
}
