//! Survival matrices, interarrival densities and IPH marginals via product integrals.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::model::{DurationKernel, FluidModel, Side};

/// `G(s,t)`: probability of no arrival in `(s,t]` jointly with the state at `t`.
#[derive(Debug, Clone)]
pub struct SurvivalMatrix {
    pub s: f64,
    pub t: f64,
    pub g: DMatrix<f64>,
    /// `‖G_h − G_{h/2}‖_∞` from a second pass at half the step.
    pub error_estimate: f64,
}

/// Default integration step for a kernel.
pub fn default_step(kernel: &DurationKernel) -> f64 {
    0.01 / kernel.gamma().max(1.0)
}

pub(crate) fn sup_norm(a: &DMatrix<f64>) -> f64 {
    (0..a.nrows()).map(|i| a.row(i).iter().map(|x| x.abs()).sum::<f64>()).fold(0.0, f64::max)
}

/// Mesh of `[s, t]` with every breakpoint on it; consecutive nodes are at most `step` apart.
fn mesh(kernel: &DurationKernel, s: f64, t: f64, step: f64) -> Vec<f64> {
    let mut cuts = vec![s];
    cuts.extend(kernel.breakpoints().into_iter().filter(|&b| b > s && b < t));
    cuts.push(t);
    let mut out = vec![s];
    for w in cuts.windows(2) {
        let (a, b) = (w[0], w[1]);
        let len = b - a;
        let full = (len / step).floor() as usize;
        for k in 1..=full {
            let x = a + k as f64 * step;
            if b - x > 1e-12 * len.max(1.0) {
                out.push(x);
            }
        }
        out.push(b);
    }
    out
}

/// Integrates `G' = G C(x)`, `N' = G D(x)` across a mesh with classical RK4.
struct Propagator<'a> {
    kernel: &'a DurationKernel,
    c: DMatrix<f64>,
    d: DMatrix<f64>,
}

impl<'a> Propagator<'a> {
    fn new(kernel: &'a DurationKernel) -> Self {
        let p = kernel.p();
        Self { kernel, c: DMatrix::zeros(p, p), d: DMatrix::zeros(p, p) }
    }

    fn eval(&mut self, x: f64, side: Side) -> Result<()> {
        self.kernel.eval_into(x, side, &mut self.c, &mut self.d);
        if self.c.iter().chain(self.d.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("kernel value at u = {x}")));
        }
        Ok(())
    }

    fn step(&mut self, g: &mut DMatrix<f64>, n: Option<&mut DMatrix<f64>>, a: f64, b: f64) -> Result<()> {
        let h = b - a;
        let m = (a + b) / 2.0;
        self.eval(a, Side::Right)?;
        let k1 = &*g * &self.c;
        let l1 = &*g * &self.d;
        self.eval(m, Side::Right)?;
        let g2 = &*g + &k1 * (h / 2.0);
        let k2 = &g2 * &self.c;
        let l2 = &g2 * &self.d;
        let g3 = &*g + &k2 * (h / 2.0);
        let k3 = &g3 * &self.c;
        let l3 = &g3 * &self.d;
        self.eval(b, Side::Left)?;
        let g4 = &*g + &k3 * h;
        let k4 = &g4 * &self.c;
        let l4 = &g4 * &self.d;
        if let Some(n) = n {
            *n += (l1 + l2 * 2.0 + l3 * 2.0 + l4) * (h / 6.0);
        }
        *g += (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0);
        Ok(())
    }

    fn run(&mut self, g: &mut DMatrix<f64>, mut n: Option<&mut DMatrix<f64>>, s: f64, t: f64, step: f64) -> Result<()> {
        let nodes = mesh(self.kernel, s, t, step);
        for w in nodes.windows(2) {
            self.step(g, n.as_deref_mut(), w[0], w[1])?;
        }
        Ok(())
    }
}

fn check_interval(s: f64, t: f64, step: f64) -> Result<()> {
    if !(s >= 0.0 && t >= s && t.is_finite()) {
        return Err(Error::Precondition(format!("need 0 <= s <= t, got s = {s}, t = {t}")));
    }
    if !(step > 0.0) {
        return Err(Error::Precondition("step must be positive".into()));
    }
    Ok(())
}

fn propagate(kernel: &DurationKernel, s: f64, t: f64, step: f64) -> Result<DMatrix<f64>> {
    let mut g = DMatrix::identity(kernel.p(), kernel.p());
    Propagator::new(kernel).run(&mut g, None, s, t, step)?;
    Ok(g)
}

/// `G(s,t)` with a step-halving error estimate.
pub fn survival_matrix(kernel: &DurationKernel, s: f64, t: f64, step: f64) -> Result<SurvivalMatrix> {
    check_interval(s, t, step)?;
    let g = propagate(kernel, s, t, step)?;
    let fine = propagate(kernel, s, t, step / 2.0)?;
    let error_estimate = sup_norm(&(&g - &fine));
    Ok(SurvivalMatrix { s, t, g, error_estimate })
}

/// `G(x) = G(0, x)` without the error estimate.
pub fn survival(kernel: &DurationKernel, x: f64, step: f64) -> Result<DMatrix<f64>> {
    check_interval(0.0, x, step)?;
    propagate(kernel, 0.0, x, step)
}

/// `f_n(y_1..y_n) = α G(y_1) D(y_1) ⋯ G(y_n) D(y_n) 1`.
pub fn interarrival_density(model: &FluidModel, ys: &[f64], step: f64) -> Result<f64> {
    let mut v = model.alpha.transpose();
    for &y in ys {
        if !(y >= 0.0) {
            return Err(Error::Domain { u: y });
        }
        let g = survival(&model.kernel, y, step)?;
        let d = model.kernel.d(y);
        v = v * g * d;
    }
    Ok(v.sum().max(0.0))
}

/// `N = ∫_0^{U} G(s) D(s) ds` with the mass bound of the omitted tail.
#[derive(Debug, Clone)]
pub struct RenewalOperator {
    pub n: DMatrix<f64>,
    pub u_max: f64,
    /// `max_i Σ_j G(U)_ij`, an upper bound on the omitted mass.
    pub tail_bound: f64,
    pub converged: bool,
}

/// Quadrature of `∫_0^{u_max} G(s) D(s) ds`.
pub fn renewal_operator(model: &FluidModel, u_max: f64, step: f64) -> Result<RenewalOperator> {
    check_interval(0.0, u_max, step)?;
    let p = model.p();
    let mut g = DMatrix::identity(p, p);
    let mut n = DMatrix::zeros(p, p);
    Propagator::new(&model.kernel).run(&mut g, Some(&mut n), 0.0, u_max, step)?;
    let tail_bound = g.row_iter().map(|r| r.sum()).fold(0.0, f64::max);
    Ok(RenewalOperator { n, u_max, tail_bound, converged: true })
}

/// Doubles the truncation point from `8/γ` until the tail bound is below `tol` or `cap` is reached.
pub fn renewal_operator_auto(model: &FluidModel, tol: f64, cap: f64, step: f64) -> Result<RenewalOperator> {
    let p = model.p();
    let mut g = DMatrix::identity(p, p);
    let mut n = DMatrix::zeros(p, p);
    let mut prop = Propagator::new(&model.kernel);
    let mut lo = 0.0;
    let mut hi = (8.0 / model.gamma()).min(cap);
    loop {
        prop.run(&mut g, Some(&mut n), lo, hi, step)?;
        let tail_bound = g.row_iter().map(|r| r.sum()).fold(0.0, f64::max);
        if tail_bound < tol || hi >= cap {
            return Ok(RenewalOperator { n, u_max: hi, tail_bound, converged: tail_bound < tol });
        }
        lo = hi;
        hi = (2.0 * hi).min(cap);
    }
}

/// Law of `S_n − S_{n−1}`: `IPH(α N^{n−1}, {C(v)})`, possibly defective.
#[derive(Debug, Clone)]
pub struct IphLaw<'a> {
    kernel: &'a DurationKernel,
    pub initial: DVector<f64>,
    pub step: f64,
    /// Tail bound of the renewal operator; zero for `n = 1`.
    pub truncation: f64,
    pub truncated: bool,
}

impl<'a> IphLaw<'a> {
    pub fn new(model: &'a FluidModel, n: usize, step: f64, renewal: Option<&RenewalOperator>) -> Result<Self> {
        if n == 0 {
            return Err(Error::Precondition("arrival index n must be at least 1".into()));
        }
        let mut v = model.alpha.transpose();
        let (mut truncation, mut truncated) = (0.0, false);
        if n > 1 {
            let owned;
            let op = match renewal {
                Some(op) => op,
                None => {
                    owned = renewal_operator_auto(model, 1e-8, 1e4 / model.gamma(), step)?;
                    &owned
                }
            };
            for _ in 1..n {
                v = v * &op.n;
            }
            truncation = op.tail_bound;
            truncated = !op.converged;
        }
        Ok(Self { kernel: &model.kernel, initial: v.transpose(), step, truncation, truncated })
    }

    /// Total mass of the initial vector; below one when the arrival may never occur.
    pub fn mass(&self) -> f64 {
        self.initial.sum()
    }

    pub fn density(&self, y: f64) -> Result<f64> {
        if !(y >= 0.0) {
            return Err(Error::Domain { u: y });
        }
        let g = survival(self.kernel, y, self.step)?;
        let exit = -self.kernel.c(y) * DVector::from_element(self.kernel.p(), 1.0);
        Ok((self.initial.transpose() * g * exit)[(0, 0)].max(0.0))
    }

    /// `P(S_n − S_{n−1} ≤ y)` for every `y` of a sorted list, in one sweep.
    pub fn cdf_sorted(&self, ys: &[f64]) -> Result<Vec<f64>> {
        let p = self.kernel.p();
        let mut g = DMatrix::identity(p, p);
        let mut prop = Propagator::new(self.kernel);
        let mut x = 0.0;
        let mass = self.mass();
        let mut out = Vec::with_capacity(ys.len());
        for &y in ys {
            if y < x {
                return Err(Error::Precondition("cdf_sorted needs sorted input".into()));
            }
            prop.run(&mut g, None, x, y, self.step)?;
            x = y;
            let surv = (self.initial.transpose() * &g).sum();
            out.push((mass - surv).clamp(0.0, mass));
        }
        Ok(out)
    }

    pub fn cdf(&self, y: f64) -> Result<f64> {
        Ok(self.cdf_sorted(&[y])?[0])
    }
}

/// Density of `S_n − S_{n−1}` at `y`, together with the law it was evaluated from.
pub fn iph_marginal<'a>(model: &'a FluidModel, n: usize, y: f64, step: f64) -> Result<(f64, IphLaw<'a>)> {
    let law = IphLaw::new(model, n, step, None)?;
    Ok((law.density(y)?, law))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expm::expm;
    use crate::gallery;
    use crate::model::{Hazard, KernelRepr};
    use approx::assert_relative_eq;

    fn model_a() -> FluidModel {
        gallery::build(&gallery::model_a())
    }

    #[test]
    fn constant_kernel_matches_expm() {
        let m = model_a();
        let c = m.kernel.c(0.0);
        for &x in &[0.5, 1.0, 2.0, 5.0] {
            let g = survival_matrix(&m.kernel, 0.0, x, default_step(&m.kernel)).unwrap();
            assert!(sup_norm(&(&g.g - expm(&(&c * x)))) < 1e-8);
            assert!(g.error_estimate < 1e-8);
        }
    }

    #[test]
    fn zero_kernel_gives_identity() {
        let k = DurationKernel::constant(DMatrix::zeros(3, 3), DMatrix::zeros(3, 3), Some(1.0)).unwrap();
        assert_eq!(survival(&k, 3.7, 0.1).unwrap(), DMatrix::identity(3, 3));
    }

    #[test]
    fn scalar_pareto_survival() {
        let (a, b) = (2.0, 1.5);
        let repr = KernelRepr::Hazard {
            hazards: vec![Hazard::Pareto { a, b }],
            jump: vec![vec![0.0]],
            arrival: vec![vec![1.0]],
        };
        let k = DurationKernel::new(repr, None).unwrap();
        for &x in &[0.5, 1.0, 2.0] {
            let g = survival(&k, x, 1e-3).unwrap();
            assert_relative_eq!(g[(0, 0)], (b / (b + x)).powf(a), max_relative = 1e-10);
        }
    }

    #[test]
    fn fourth_order_convergence() {
        let cfg = gallery::pareto_renewal();
        let m = gallery::build(&cfg);
        let x = 1.7;
        let reference = survival(&m.kernel, x, 1e-4).unwrap();
        let e1 = sup_norm(&(survival(&m.kernel, x, 0.2).unwrap() - &reference));
        let e2 = sup_norm(&(survival(&m.kernel, x, 0.1).unwrap() - &reference));
        let ratio = e1 / e2;
        assert!((12.0..=20.0).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn remainder_substep_is_handled() {
        let m = model_a();
        let g = survival(&m.kernel, 1.05, 0.1).unwrap();
        assert!(sup_norm(&(g - expm(&(m.kernel.c(0.0) * 1.05)))) < 1e-5);
    }

    #[test]
    fn renewal_operator_closed_form() {
        let m = model_a();
        let op = renewal_operator_auto(&m, 1e-12, 1e3, 0.01).unwrap();
        let c = m.kernel.c(0.0);
        let exact = (-c).try_inverse().unwrap() * m.kernel.d(0.0);
        assert!(sup_norm(&(&op.n - exact)) < 1e-6);
        assert!(op.converged);
    }

    #[test]
    fn no_arrivals_means_no_renewal_mass() {
        let m = gallery::build(&gallery::calendar());
        let op = renewal_operator(&m, 10.0, 0.01).unwrap();
        assert_eq!(op.n, DMatrix::zeros(2, 2));
        assert_eq!(interarrival_density(&m, &[0.5], 0.01).unwrap(), 0.0);
        let law = IphLaw::new(&m, 2, 0.01, Some(&op)).unwrap();
        assert_eq!(law.mass(), 0.0);
        assert_eq!(law.density(1.0).unwrap(), 0.0);
    }

    #[test]
    fn first_marginal_starts_from_alpha() {
        let m = model_a();
        let law = IphLaw::new(&m, 1, 0.01, None).unwrap();
        assert_eq!(law.initial, m.alpha);
        assert_eq!(law.mass(), 1.0);
    }

    #[test]
    fn renewal_density_factorizes() {
        let m = gallery::build(&gallery::renewal_ph());
        let step = 0.005;
        let ys = [0.3, 1.1, 2.4];
        let joint = interarrival_density(&m, &ys, step).unwrap();
        let one = |y: f64| {
            let g = survival(&m.kernel, y, step).unwrap();
            let exit = -m.kernel.c(y) * DVector::from_element(3, 1.0);
            (m.alpha.transpose() * g * exit)[(0, 0)]
        };
        let prod: f64 = ys.iter().map(|&y| one(y)).product();
        assert_relative_eq!(joint, prod, epsilon = 1e-8);
    }

    #[test]
    fn renewal_operator_is_rank_one_for_renewal_kernel() {
        let m = gallery::build(&gallery::renewal_ph());
        let op = renewal_operator_auto(&m, 1e-10, 1e3, 0.005).unwrap();
        let sv = op.n.clone().svd(false, false).singular_values;
        let mut s: Vec<f64> = sv.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        assert!(s[1] < 1e-9 * s[0], "{s:?}");
    }

    #[test]
    fn cocycle_on_piecewise_kernel() {
        let m = gallery::build(&gallery::calendar());
        let step = 0.01;
        for &(s, t, u) in &[(0.0, 1.0, 3.0), (0.5, 2.0, 2.5), (1.9, 2.0, 4.5)] {
            let a = survival_matrix(&m.kernel, s, u, step).unwrap().g;
            let b = survival_matrix(&m.kernel, s, t, step).unwrap().g * survival_matrix(&m.kernel, t, u, step).unwrap().g;
            assert!(sup_norm(&(a - b)) < 1e-8);
        }
    }

    #[test]
    fn cdf_matches_density_integral() {
        let m = gallery::build(&gallery::pareto_renewal());
        let law = IphLaw::new(&m, 1, 1e-3, None).unwrap();
        let y = 1.3;
        let n = 2000;
        let h = y / n as f64;
        let mut integral = 0.0;
        for k in 0..=n {
            let w = if k == 0 || k == n { 0.5 } else { 1.0 };
            integral += w * law.density(k as f64 * h).unwrap();
        }
        integral *= h;
        assert_relative_eq!(law.cdf(y).unwrap(), integral, epsilon = 1e-5);
    }

    #[test]
    fn substochastic_rows() {
        for cfg in gallery::all() {
            let m = gallery::build(&cfg);
            let g = survival(&m.kernel, 3.0, default_step(&m.kernel)).unwrap();
            for i in 0..m.p() {
                let s = g.row(i).sum();
                assert!(s <= 1.0 + 1e-9 && g.row(i).iter().all(|&x| x >= -1e-12), "{:?}", cfg.name);
                if m.kernel.d_is_zero() {
                    assert!((s - 1.0).abs() < 1e-8);
                }
            }
        }
    }
}
