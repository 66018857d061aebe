//! Monte Carlo estimators and the homogeneous Riccati oracle.

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::FluidModel;
use crate::sim::{run_to_barrier, stream, Walker};

/// Paths per parallel batch; batches are merged in index order.
const BATCH: usize = 4096;

mod matrix_rows {
    use nalgebra::DMatrix;
    use serde::Serializer;

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq((0..m.nrows()).map(|i| m.row(i).iter().copied().collect::<Vec<_>>()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct McEstimate {
    #[serde(with = "matrix_rows")]
    pub value: DMatrix<f64>,
    #[serde(with = "matrix_rows")]
    pub std_error: DMatrix<f64>,
    /// Paths per start state.
    pub n_paths: usize,
    pub censored_fraction: f64,
    pub seed: u64,
    pub warning: Option<String>,
}

impl McEstimate {
    /// Whether `x` lies within `k` standard errors of every entry.
    pub fn contains(&self, x: &DMatrix<f64>, k: f64) -> bool {
        x.iter().zip(self.value.iter()).zip(self.std_error.iter()).all(|((x, v), se)| (x - v).abs() <= k * se)
    }
}

/// Running sums for one start state.
#[derive(Debug, Clone)]
struct Acc {
    sum: Vec<f64>,
    sq: Vec<f64>,
    censored: usize,
}

impl Acc {
    fn new(k: usize) -> Self {
        Self { sum: vec![0.0; k], sq: vec![0.0; k], censored: 0 }
    }

    fn merge(mut self, o: &Acc) -> Self {
        for k in 0..self.sum.len() {
            self.sum[k] += o.sum[k];
            self.sq[k] += o.sq[k];
        }
        self.censored += o.censored;
        self
    }
}

/// Runs `n_paths` paths for every start state in `S⁺` and averages the per-path contributions.
/// `path(start, index)` returns `Some((column, weight))` or `None` when censored.
fn estimate<F>(model: &FluidModel, cols: usize, n_paths: usize, seed: u64, path: F) -> Result<McEstimate>
where
    F: Fn(usize, u64) -> Result<Option<(usize, f64)>> + Sync,
{
    if n_paths < 100 {
        return Err(Error::Precondition(format!("n_paths must be at least 100, got {n_paths}")));
    }
    let plus = model.space.plus();
    let mut value = DMatrix::zeros(plus.len(), cols);
    let mut se = DMatrix::zeros(plus.len(), cols);
    let mut censored = 0;
    for (a, &i) in plus.iter().enumerate() {
        let n_batches = n_paths.div_ceil(BATCH);
        let parts = (0..n_batches)
            .into_par_iter()
            .map(|b| {
                let mut acc = Acc::new(cols);
                for k in b * BATCH..((b + 1) * BATCH).min(n_paths) {
                    let index = (a * n_paths + k) as u64;
                    match path(i, index)? {
                        Some((j, w)) => {
                            acc.sum[j] += w;
                            acc.sq[j] += w * w;
                        }
                        None => acc.censored += 1,
                    }
                }
                Ok(acc)
            })
            .collect::<Result<Vec<_>>>()?;
        let acc = parts.iter().fold(Acc::new(cols), |x, y| x.merge(y));
        let n = n_paths as f64;
        for j in 0..cols {
            let mean = acc.sum[j] / n;
            let var = (acc.sq[j] / n - mean * mean).max(0.0);
            value[(a, j)] = mean;
            se[(a, j)] = (var / (n - 1.0)).sqrt();
        }
        censored += acc.censored;
    }
    let censored_fraction = censored as f64 / (n_paths * plus.len()) as f64;
    let warning = (censored_fraction == 1.0).then(|| "every path was censored".to_string());
    Ok(McEstimate { value, std_error: se, n_paths, censored_fraction, seed, warning })
}

fn minus_index(model: &FluidModel, j: usize) -> usize {
    model.space.minus().iter().position(|&x| x == j).expect("exit state lies in S-")
}

/// `E[e^{-θ₁∫σ - θ₂Σk} 1{τ < ∞, J(τ-) = j} | J(0) = i]` for `i ∈ S⁺`, censored after `max_epochs`.
pub fn mc_first_return(
    model: &FluidModel,
    z: f64,
    theta1: f64,
    theta2: f64,
    n_paths: usize,
    max_epochs: usize,
    seed: u64,
) -> Result<McEstimate> {
    mc_ruin(model, 0.0, z, theta1, theta2, n_paths, max_epochs, seed)
}

/// As [`mc_first_return`] with `F(0) = u` and the barrier at 0.
#[allow(clippy::too_many_arguments)]
pub fn mc_ruin(
    model: &FluidModel,
    u: f64,
    z: f64,
    theta1: f64,
    theta2: f64,
    n_paths: usize,
    max_epochs: usize,
    seed: u64,
) -> Result<McEstimate> {
    if !(u >= 0.0) {
        return Err(Error::Precondition(format!("initial level must be nonnegative, got {u}")));
    }
    estimate(model, model.space.minus().len(), n_paths, seed, |i, index| {
        let o = run_to_barrier(model, z, i, u, theta1, theta2, max_epochs, stream(seed, index))?;
        Ok(o.returned.then(|| (minus_index(model, o.exit_state), o.weight)))
    })
}

/// `P(T_n ≤ t, F(T_n) ≤ F(0) for the first time, J(T_n-) = j | J(0) = i)` for `i ∈ S⁺`.
pub fn mc_finite_time_return(model: &FluidModel, z: f64, t: f64, n_paths: usize, seed: u64) -> Result<McEstimate> {
    if !(t > 0.0) {
        return Err(Error::Precondition(format!("t must be positive, got {t}")));
    }
    estimate(model, model.space.minus().len(), n_paths, seed, |i, index| {
        let mut w = Walker::new(model, z, i, stream(seed, index));
        loop {
            let ep = w.step()?;
            if w.time > t {
                return Ok(None);
            }
            if w.fluid <= 0.0 {
                return Ok(Some((minus_index(model, ep.from), 1.0)));
            }
        }
    })
}

/// Empirical joint law of `(U(T_n-), F(T_n) - F(0))` on `Ω_n ∩ {J(T_n-) = j}`.
#[derive(Debug, Clone, Serialize)]
pub struct BridgeHistogram {
    /// Weighted frequency of `Ω_n ∩ {J(T_n-) = j}` per `(i, j)`.
    pub total: McEstimate,
    /// Duration bin edges.
    pub s_edges: Vec<f64>,
    /// Level bin edges.
    pub l_edges: Vec<f64>,
    /// `freq[((a·|S⁻| + b)·S + s)·L + l]`, weighted frequencies per bin.
    pub freq: Vec<f64>,
    /// Weighted frequency of bridges falling outside every bin.
    pub outside: f64,
}

/// Simulates `n` epochs and bins the `n`-bridges. The weight is `e^{-θ₁∫σ - θ₂Σk}` up to `T_n-`.
#[allow(clippy::too_many_arguments)]
pub fn mc_bridge_histogram(
    model: &FluidModel,
    z: f64,
    n: usize,
    s_edges: &[f64],
    l_edges: &[f64],
    theta1: f64,
    theta2: f64,
    n_paths: usize,
    seed: u64,
) -> Result<BridgeHistogram> {
    if n < 2 {
        return Err(Error::Precondition(format!("bridges need n >= 2, got {n}")));
    }
    let sorted = |e: &[f64]| e.len() >= 2 && e.windows(2).all(|w| w[1] > w[0]);
    if !sorted(s_edges) || !sorted(l_edges) {
        return Err(Error::Precondition("bin edges must be strictly increasing with at least two entries".into()));
    }
    let pn = model.space.minus().len();
    let (ns, nl) = (s_edges.len() - 1, l_edges.len() - 1);
    let bridge = |i: usize, index: u64| -> Result<Option<(usize, f64, f64, f64)>> {
        let mut w = Walker::new(model, z, i, stream(seed, index));
        let mut low = f64::INFINITY;
        let mut cost_before = 0.0;
        let mut last = None;
        for k in 1..=n {
            cost_before = w.cost;
            let ep = w.step()?;
            if k < n {
                low = low.min(w.fluid);
            } else {
                last = Some(ep);
            }
        }
        let ep = last.unwrap();
        let end = w.fluid;
        if !(low > 0.0_f64.max(end)) || model.space.is_plus(ep.from) {
            return Ok(None);
        }
        let weight = (-theta1 * w.dividend - theta2 * cost_before).exp();
        Ok(Some((minus_index(model, ep.from), weight, ep.duration, end)))
    };
    let total = estimate(model, pn, n_paths, seed, |i, index| Ok(bridge(i, index)?.map(|(j, w, _, _)| (j, w))))?;
    let bin = |edges: &[f64], x: f64| -> Option<usize> {
        if x < edges[0] || x >= *edges.last().unwrap() {
            return None;
        }
        Some(edges.partition_point(|&e| e <= x) - 1)
    };
    let plus = model.space.plus();
    let mut freq = vec![0.0; plus.len() * pn * ns * nl];
    let mut outside = 0.0;
    for (a, &i) in plus.iter().enumerate() {
        let parts = (0..n_paths.div_ceil(BATCH))
            .into_par_iter()
            .map(|b| {
                let mut f = vec![0.0; pn * ns * nl];
                let mut out = 0.0;
                for k in b * BATCH..((b + 1) * BATCH).min(n_paths) {
                    if let Some((j, w, s, l)) = bridge(i, (a * n_paths + k) as u64)? {
                        match (bin(s_edges, s), bin(l_edges, l)) {
                            (Some(si), Some(li)) => f[(j * ns + si) * nl + li] += w,
                            _ => out += w,
                        }
                    }
                }
                Ok((f, out))
            })
            .collect::<Result<Vec<_>>>()?;
        for (f, out) in parts {
            for (x, y) in freq[a * pn * ns * nl..(a + 1) * pn * ns * nl].iter_mut().zip(&f) {
                *x += y / n_paths as f64;
            }
            outside += out / n_paths as f64;
        }
    }
    let mut total = total;
    if total.value.iter().all(|&v| v == 0.0) {
        total.warning = Some("no path formed a bridge".into());
    }
    Ok(BridgeHistogram { total, s_edges: s_edges.to_vec(), l_edges: l_edges.to_vec(), freq, outside })
}

/// Moments of the ramp height of an Erlangized model.
#[derive(Debug, Clone, Serialize)]
pub struct RampMoments {
    pub mean: f64,
    pub mean_se: f64,
    pub variance: f64,
    pub variance_se: f64,
    pub n_paths: usize,
}

/// Simulates the Erlangized model from its first state until it leaves the `n_stages` artificial
/// states and records `F` at that moment.
pub fn mc_ramp_height(aug: &FluidModel, n_stages: usize, n_paths: usize, seed: u64) -> Result<RampMoments> {
    if n_paths < 2 {
        return Err(Error::Precondition("need at least two paths".into()));
    }
    let heights = (0..n_paths)
        .into_par_iter()
        .map(|k| {
            let mut w = Walker::new(aug, 0.0, 0, stream(seed, k as u64));
            while w.state < n_stages {
                w.step()?;
            }
            Ok(w.fluid)
        })
        .collect::<Result<Vec<f64>>>()?;
    let n = n_paths as f64;
    let mean = heights.iter().sum::<f64>() / n;
    let m2 = heights.iter().map(|h| (h - mean).powi(2)).sum::<f64>() / n;
    let m4 = heights.iter().map(|h| (h - mean).powi(4)).sum::<f64>() / n;
    let variance = m2 * n / (n - 1.0);
    Ok(RampMoments {
        mean,
        mean_se: (variance / n).sqrt(),
        variance,
        variance_se: ((m4 - m2 * m2) / n).max(0.0).sqrt(),
        n_paths,
    })
}

/// Report from [`riccati_psi`].
#[derive(Debug, Clone)]
pub struct RiccatiSolution {
    pub psi: DMatrix<f64>,
    pub iterations: usize,
    pub increment: f64,
}

/// First-return matrix of a homogeneous fluid queue with generator `Q = C + D`, as the minimal
/// nonnegative solution of `T₊₋ + T₊₊Ψ + ΨT₋₋ + ΨT₋₊Ψ = 0` with `T = |R|⁻¹Q`.
///
/// Newton iteration from `Ψ₀ = 0`: each step solves the Sylvester equation
/// `(T₊₊ + ΨₖT₋₊)Ψₖ₊₁ + Ψₖ₊₁(T₋₋ + T₋₊Ψₖ) = ΨₖT₋₊Ψₖ − T₊₋`. The iterates increase entrywise
/// and stay below 1; both are checked at every step.
pub fn riccati_psi(model: &FluidModel) -> Result<RiccatiSolution> {
    if !model.kernel.is_constant() {
        return Err(Error::Precondition("the Riccati oracle needs a constant kernel".into()));
    }
    let (c, d) = model.kernel.eval(0.0)?;
    let q = c + d;
    let (plus, minus) = (model.space.plus(), model.space.minus());
    let t = |rows: &[usize], cols: &[usize]| {
        DMatrix::from_fn(rows.len(), cols.len(), |a, b| q[(rows[a], cols[b])] / model.space.rate(rows[a]).abs())
    };
    let (tpp, tpm, tmp, tmm) = (t(plus, plus), t(plus, minus), t(minus, plus), t(minus, minus));
    let (np, nm) = (plus.len(), minus.len());
    let mut psi = DMatrix::<f64>::zeros(np, nm);
    let mut inc = f64::INFINITY;
    let scale = [&tpp, &tpm, &tmp, &tmm].iter().map(|m| m.amax()).fold(0.0, f64::max);
    let residual = |x: &DMatrix<f64>| (&tpm + &tpp * x + x * &tmm + x * &tmp * x).amax();
    for it in 1..=100_000 {
        // At null drift the root is double and Ψ is only determined to about √ε.
        if it > 1 && residual(&psi) <= 16.0 * f64::EPSILON * scale {
            return Ok(RiccatiSolution { psi, iterations: it - 1, increment: inc });
        }
        let a = &tpp + &psi * &tmp;
        let b = &tmm + &tmp * &psi;
        // vec(AX + XB) = (I ⊗ A + Bᵀ ⊗ I) vec(X)
        let sylv = DMatrix::<f64>::identity(nm, nm).kronecker(&a) + b.transpose().kronecker(&DMatrix::identity(np, np));
        let rhs = &psi * &tmp * &psi - &tpm;
        let v = sylv
            .lu()
            .solve(&nalgebra::DVector::from_column_slice(rhs.as_slice()))
            .ok_or_else(|| Error::NotConverged { iterations: it, increment: inc })?;
        let next = DMatrix::from_column_slice(np, nm, v.as_slice());
        if next.iter().any(|x| !x.is_finite()) {
            return Err(Error::NotConverged { iterations: it, increment: inc });
        }
        if next.iter().zip(psi.iter()).any(|(a, b)| *a < b - 1e-12) || next.iter().any(|&x| x > 1.0 + 1e-9) {
            return Err(Error::InvalidModel("Riccati iterates lost monotonicity or left [0, 1]".into()));
        }
        inc = (&next - &psi).amax();
        psi = next;
        if inc < 1e-12 {
            return Ok(RiccatiSolution { psi, iterations: it, increment: inc });
        }
    }
    Err(Error::NotConverged { iterations: 100_000, increment: inc })
}
