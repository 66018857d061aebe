//! n-bridge duration-level densities on a finite-volume grid.
//!
//! Every cell of the `(s, ℓ)` grid stores the integrated mass of `Λ⁽ⁿ'ᶻ⁾` over that cell, so the
//! density is `mass / (Δu Δℓ)`. Level 0 is a cell boundary: cells `0..q` cover `[-L_max, 0]` and
//! cells `q..2q` cover `[0, L_max]`. Duration cells `0..m` cover `[0, U_max]` and cell `m` is an
//! overflow cell for `s ≥ U_max`. The overflow cell is only populated with [`DurationTail::Freeze`],
//! which holds the kernel at its value at `U_max`; [`DurationTail::Drop`] discards that mass.
//!
//! The starting durations `z` live on the nodes `0, Δu, …, U_max`.

use std::io::{self, Write};
use std::sync::Arc;

use nalgebra::DMatrix;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{FluidModel, Side};

/// Memory ceiling used by [`bridge_recursion`] unless another is given.
pub const DEFAULT_MEMORY_BUDGET: usize = 4 << 30;

/// Negative values larger than this in magnitude are reported as clamp violations.
pub const CLAMP_TOL: f64 = 1e-10;

const GL_X: [f64; 4] = [0.1834346424956498, 0.5255324099163290, 0.7966664774136267, 0.9602898564975363];
const GL_W: [f64; 4] = [0.3626837833783620, 0.3137066458778873, 0.2223810344533745, 0.1012285362903763];

/// Exponential factors below `e^{-TAIL_RATE}` are ignored.
const TAIL_RATE: f64 = 50.0;

fn gl_points(lo: f64, hi: f64) -> [(f64, f64); 8] {
    let h = 0.5 * (hi - lo);
    let c = 0.5 * (hi + lo);
    let mut out = [(0.0, 0.0); 8];
    for k in 0..4 {
        out[2 * k] = (c - h * GL_X[k], h * GL_W[k]);
        out[2 * k + 1] = (c + h * GL_X[k], h * GL_W[k]);
    }
    out
}

fn gauss(lo: f64, hi: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    gl_points(lo, hi).iter().map(|&(x, w)| w * f(x)).sum()
}

/// What happens to paths whose duration leaves `[0, U_max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum DurationTail {
    /// Mass with duration beyond `U_max` is discarded.
    Drop,
    /// Mass with duration beyond `U_max` is kept in an overflow cell and the kernel is held at `U_max`.
    #[default]
    Freeze,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelDurationGrid {
    /// Number of duration cells in `[0, U_max]`.
    pub m: usize,
    /// Number of level cells on each side of 0.
    pub q: usize,
    pub u_max: f64,
    pub l_max: f64,
    pub tail: DurationTail,
}

impl LevelDurationGrid {
    pub fn new(m: usize, q: usize, u_max: f64, l_max: f64, tail: DurationTail) -> Result<Self> {
        if m == 0 || q == 0 {
            return Err(Error::Precondition("grid needs at least one duration and one level cell".into()));
        }
        if !(u_max.is_finite() && u_max > 0.0 && l_max.is_finite() && l_max > 0.0) {
            return Err(Error::Precondition(format!("U_max = {u_max} and L_max = {l_max} must be positive")));
        }
        Ok(Self { m, q, u_max, l_max, tail })
    }

    /// `U_max = 8/γ`, `L_max = 2 max|r| U_max`, 64 cells in each direction.
    pub fn for_model(model: &FluidModel) -> Self {
        let u_max = 8.0 / model.gamma();
        let l_max = 2.0 * model.space.max_abs_rate() * u_max;
        Self { m: 64, q: 64, u_max, l_max, tail: DurationTail::Freeze }
    }

    /// Same window with `Δu` and `Δℓ` halved.
    pub fn refined(&self) -> Self {
        Self { m: 2 * self.m, q: 2 * self.q, ..self.clone() }
    }

    pub fn du(&self) -> f64 {
        self.u_max / self.m as f64
    }

    pub fn dl(&self) -> f64 {
        self.l_max / self.q as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        k as f64 * self.du()
    }

    /// Duration at which kernels are evaluated for cell `k`; the overflow cell uses `U_max`.
    pub fn cell_centre(&self, k: usize) -> f64 {
        if k < self.m {
            (k as f64 + 0.5) * self.du()
        } else {
            self.u_max
        }
    }

    pub fn level_edge(&self, c: usize) -> f64 {
        -self.l_max + c as f64 * self.dl()
    }

    /// Index of the duration node closest to `z`.
    pub fn z_index(&self, z: f64) -> Result<usize> {
        let k = (z / self.du()).round();
        if !(z >= 0.0) || k > self.m as f64 || (k * self.du() - z).abs() > 1e-9 * self.u_max.max(1.0) {
            return Err(Error::Precondition(format!("z = {z} is not a duration node of the grid")));
        }
        Ok(k as usize)
    }

    fn freeze(&self) -> bool {
        self.tail == DurationTail::Freeze
    }
}

/// Shape of one bridge order: `(z, i ∈ S⁺, j ∈ S⁻, s, ℓ)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Dims {
    pub z: usize,
    pub pp: usize,
    pub pn: usize,
    pub s: usize,
    pub l: usize,
}

impl Dims {
    pub fn new(grid: &LevelDurationGrid, pp: usize, pn: usize) -> Self {
        Self { z: grid.m + 1, pp, pn, s: grid.m + 1, l: 2 * grid.q }
    }

    pub fn len(&self) -> usize {
        self.z * self.z_stride()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn z_stride(&self) -> usize {
        self.pp * self.pn * self.block()
    }

    pub fn block(&self) -> usize {
        self.s * self.l
    }

    pub fn index(&self, z: usize, a: usize, b: usize, s: usize, l: usize) -> usize {
        (((z * self.pp + a) * self.pn + b) * self.s + s) * self.l + l
    }

    pub fn bytes(&self) -> usize {
        self.len() * std::mem::size_of::<f64>()
    }
}

/// Cell masses of one bridge order.
#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub dims: Dims,
    pub data: Vec<f64>,
}

impl Slice {
    pub fn zeros(dims: Dims) -> Self {
        Self { dims, data: vec![0.0; dims.len()] }
    }

    pub fn get(&self, z: usize, a: usize, b: usize, s: usize, l: usize) -> f64 {
        self.data[self.dims.index(z, a, b, s, l)]
    }

    /// The level row at `(z, a, b, s)`.
    pub fn row(&self, z: usize, a: usize, b: usize, s: usize) -> &[f64] {
        let i = self.dims.index(z, a, b, s, 0);
        &self.data[i..i + self.dims.l]
    }

    /// `∫∫_{ℓ ≤ 0}` of every `(i, j)` entry at node `z`.
    pub fn return_mass(&self, z: usize) -> DMatrix<f64> {
        self.return_mass_until(z, f64::INFINITY, 1.0)
    }

    /// As [`Slice::return_mass`] but only over `s ≤ s_upper`, with a partial cell counted by its
    /// covered fraction. `du` is the duration cell width.
    pub fn return_mass_until(&self, z: usize, s_upper: f64, du: f64) -> DMatrix<f64> {
        let d = self.dims;
        let q = d.l / 2;
        let m = d.s - 1;
        let frac = |s: usize| -> f64 {
            if s == m {
                if s_upper.is_infinite() {
                    1.0
                } else {
                    0.0
                }
            } else {
                ((s_upper / du) - s as f64).clamp(0.0, 1.0)
            }
        };
        DMatrix::from_fn(d.pp, d.pn, |a, b| {
            (0..d.s)
                .map(|s| {
                    let f = frac(s);
                    if f == 0.0 {
                        0.0
                    } else {
                        f * self.row(z, a, b, s)[..q].iter().sum::<f64>()
                    }
                })
                .sum()
        })
    }

    /// Mass over the whole level window at node `z`.
    pub fn window_mass(&self, z: usize) -> DMatrix<f64> {
        let d = self.dims;
        DMatrix::from_fn(d.pp, d.pn, |a, b| (0..d.s).map(|s| self.row(z, a, b, s).iter().sum::<f64>()).sum())
    }

    /// Mass sitting in the two outermost level cells, summed over everything.
    pub fn boundary_mass(&self) -> f64 {
        let l = self.dims.l;
        self.data.chunks(l).map(|r| r[0] + r[l - 1]).sum()
    }

    /// Sets negative entries to 0 and returns the largest magnitude removed.
    fn clamp(&mut self) -> f64 {
        self.data
            .par_iter_mut()
            .map(|x| {
                if *x < 0.0 {
                    let v = -*x;
                    *x = 0.0;
                    v
                } else {
                    0.0
                }
            })
            .reduce(|| 0.0, f64::max)
    }
}

/// Weights `w[d - start]` attached to integer shifts `d`.
#[derive(Debug, Clone, Default)]
struct Sparse {
    start: isize,
    w: Vec<f64>,
}

/// `∫_lo^hi f(u) tent(d - scale·u) du` for all integers `d`, where `tent(x) = max(0, 1 - |x|)`.
/// `breaks` are extra points where `f` is not smooth.
fn tent_weights(lo: f64, hi: f64, scale: f64, breaks: &[f64], f: impl Fn(f64) -> f64) -> Sparse {
    if !(hi > lo) {
        return Sparse::default();
    }
    let (t0, t1) = (scale * lo, scale * hi);
    let (tmin, tmax) = (t0.min(t1), t0.max(t1));
    let mut pts = vec![lo, hi];
    pts.extend(breaks.iter().copied().filter(|&b| b > lo && b < hi));
    let mut k = tmin.floor() as i64 + 1;
    while (k as f64) < tmax {
        let u = k as f64 / scale;
        if u > lo && u < hi {
            pts.push(u);
        }
        k += 1;
    }
    pts.sort_by(|a, b| a.partial_cmp(b).unwrap());
    pts.dedup();
    let start = tmin.floor() as isize;
    let mut w = vec![0.0; (tmax.floor() - tmin.floor()) as usize + 2];
    for seg in pts.windows(2) {
        let (u0, u1) = (seg[0], seg[1]);
        if u1 <= u0 {
            continue;
        }
        let k = (scale * 0.5 * (u0 + u1)).floor();
        let mut lo_w = 0.0;
        let mut hi_w = 0.0;
        for (u, g) in gl_points(u0, u1) {
            let fu = g * f(u);
            let t = scale * u - k;
            lo_w += fu * (1.0 - t);
            hi_w += fu * t;
        }
        let idx = (k as isize - start) as usize;
        w[idx] += lo_w;
        w[idx + 1] += hi_w;
    }
    Sparse { start, w }
}

/// `dst[base + l + d] += w[d] · src[l]` for every target inside `dst`.
fn shift_add(dst: &mut [f64], w: &Sparse, src: &[f64], base: usize) {
    let n = dst.len() as isize;
    for (k, &wd) in w.w.iter().enumerate() {
        if wd == 0.0 {
            continue;
        }
        let off = base as isize + w.start + k as isize;
        let lo = (-off).max(0) as usize;
        let hi = ((n - off).max(0) as usize).min(src.len());
        if lo >= hi {
            continue;
        }
        let t0 = (off + lo as isize) as usize;
        for (x, y) in dst[t0..t0 + hi - lo].iter_mut().zip(&src[lo..hi]) {
            *x += wd * y;
        }
    }
}

/// Level-shift weights for a first step in `i ∈ S⁺`.
#[derive(Debug, Clone)]
struct FirstWeights {
    /// Weight on the left node of duration cell `k` under linear interpolation.
    left: Vec<Sparse>,
    /// Weight on the right node of duration cell `k`.
    right: Vec<Sparse>,
    /// `u ≥ kΔu`, all carried by the last node.
    tail: Vec<Sparse>,
}

/// Duration and level kernels for a last step in `j ∈ S⁻`.
#[derive(Debug, Clone)]
struct LastWeights {
    /// Duration offset `k` (tent in `x/Δu`) for the no-arrival term.
    offset: Vec<Sparse>,
    /// Cumulative offset `≥ k`, used for the overflow cell.
    offset_cum: Vec<Sparse>,
    /// New duration in cell `k` for the arrival term; cell `m` is the overflow.
    fresh: Vec<Sparse>,
}

/// Per-cell-pair diagnostics of one bridge order.
#[derive(Debug, Clone, Serialize)]
pub struct OrderDiagnostics {
    pub n: usize,
    /// Largest negative value removed by clamping.
    pub clamped: f64,
    /// Mass in the outermost level cells.
    pub boundary_mass: f64,
    /// `e^{-γ U_max}` when the duration tail is dropped, 0 otherwise.
    pub duration_tail_bound: f64,
}

impl OrderDiagnostics {
    pub fn clamp_flagged(&self) -> bool {
        self.clamped > CLAMP_TOL
    }
}

/// Precomputed kernels for one model, grid and `(θ₁, θ₂)`.
pub struct BridgeOperator<'m> {
    model: &'m FluidModel,
    grid: LevelDurationGrid,
    theta1: f64,
    theta2: f64,
    dims: Dims,
    plus: Vec<usize>,
    minus: Vec<usize>,
    /// `(C̄⁺⁺, κ⁺⁺⊙D̄⁺⁺)` at duration nodes.
    node_pp: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    /// `(C̄⁻⁻, κ⁻⁻⊙D̄⁻⁻)` at duration cells.
    cell_mm: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    /// `(C̄⁻⁺, κ⁻⁺⊙D̄⁻⁺)` at duration cells, restricted to the columns in `mp_cols`.
    cell_mp: Vec<(DMatrix<f64>, DMatrix<f64>)>,
    mp_cols: Vec<usize>,
    first: Vec<FirstWeights>,
    last: Vec<LastWeights>,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    /// Leading `z` rows computed for each start state in `S⁺`.
    z_rows: Vec<usize>,
}

/// Level spectra of the first sub-bridge of the middle term.
struct SpecX {
    re: Vec<DMatrix<f64>>,
    im: Vec<DMatrix<f64>>,
    d: Vec<Complex64>,
}

/// Level spectra of the second sub-bridge of the middle term.
struct SpecY {
    re: Vec<DMatrix<f64>>,
    im: Vec<DMatrix<f64>>,
    d: Vec<Complex64>,
}

impl<'m> BridgeOperator<'m> {
    pub fn new(model: &'m FluidModel, grid: &LevelDurationGrid, theta1: f64, theta2: f64) -> Result<Self> {
        if !(theta1 >= 0.0 && theta2 >= 0.0 && theta1.is_finite() && theta2.is_finite()) {
            return Err(Error::Precondition(format!("theta must be finite and nonnegative, got ({theta1}, {theta2})")));
        }
        let plus = model.space.plus().to_vec();
        let minus = model.space.minus().to_vec();
        let dims = Dims::new(grid, plus.len(), minus.len());
        let gamma = model.gamma();
        let kappa = model.k_cost.map(|k| if k == 0.0 { 1.0 } else { (-theta2 * k).exp() });
        let p = model.p();
        let mut cr = vec![0.0; p];
        let mut dr = vec![0.0; p];
        let mut blocks = |u: f64, rows: &[usize], cols: &[usize]| -> Result<(DMatrix<f64>, DMatrix<f64>)> {
            let mut c = DMatrix::zeros(rows.len(), cols.len());
            let mut d = DMatrix::zeros(rows.len(), cols.len());
            for (a, &i) in rows.iter().enumerate() {
                model.kernel.row_into(u, Side::Right, i, &mut cr, &mut dr);
                if -cr[i] > gamma * (1.0 + 1e-12) {
                    return Err(Error::BoundViolation { u, state: i, rate: -cr[i], gamma });
                }
                for (b, &j) in cols.iter().enumerate() {
                    let cb = if i == j { 1.0 + cr[j] / gamma } else { cr[j] / gamma };
                    c[(a, b)] = cb;
                    d[(a, b)] = kappa[(i, j)] * dr[j] / gamma;
                }
                if c.iter().chain(d.iter()).any(|x| !x.is_finite()) {
                    return Err(Error::NonFinite(format!("kernel value at u = {u}")));
                }
            }
            Ok((c, d))
        };
        let node_pp = (0..=grid.m).map(|k| blocks(grid.node(k), &plus, &plus)).collect::<Result<Vec<_>>>()?;
        let cell_mm = (0..=grid.m).map(|k| blocks(grid.cell_centre(k), &minus, &minus)).collect::<Result<Vec<_>>>()?;
        let cell_mp_full =
            (0..=grid.m).map(|k| blocks(grid.cell_centre(k), &minus, &plus)).collect::<Result<Vec<_>>>()?;
        let mp_cols: Vec<usize> = (0..plus.len())
            .filter(|&c| cell_mp_full.iter().any(|(cm, dm)| cm.column(c).iter().chain(dm.column(c).iter()).any(|&x| x != 0.0)))
            .collect();
        let cell_mp = cell_mp_full
            .iter()
            .map(|(cm, dm)| (cm.select_columns(mp_cols.iter()), dm.select_columns(mp_cols.iter())))
            .collect();

        let du = grid.du();
        let dl = grid.dl();
        let span = 2.0 * grid.l_max;
        let first = plus
            .iter()
            .map(|&i| {
                let r = model.space.rate(i);
                let rate = gamma + theta1 * model.sigma[i];
                let w = move |u: f64| gamma * (-rate * u).exp();
                let u_end = (span / r).min(TAIL_RATE / rate + grid.u_max);
                let cell = |k: usize, right: bool| {
                    let lo = k as f64 * du;
                    let hi = (lo + du).min(u_end);
                    tent_weights(lo, hi, r / dl, &[], |u| {
                        let t = (u - lo) / du;
                        w(u) * if right { t } else { 1.0 - t }
                    })
                };
                FirstWeights {
                    left: (0..grid.m).map(|k| cell(k, false)).collect(),
                    right: (0..grid.m).map(|k| cell(k, true)).collect(),
                    tail: (0..=grid.m)
                        .map(|k| {
                            let lo = k as f64 * du;
                            tent_weights(lo, u_end.min(lo + TAIL_RATE / rate), r / dl, &[], w)
                        })
                        .collect(),
                }
            })
            .collect();
        let last = minus
            .iter()
            .map(|&j| {
                let r = model.space.rate(j);
                let w = move |x: f64| gamma * (-gamma * x).exp();
                let x_end = (span / -r).min(TAIL_RATE / gamma);
                let scale = r / dl;
                LastWeights {
                    offset: (0..grid.m)
                        .map(|k| {
                            let c = k as f64 * du;
                            tent_weights((c - du).max(0.0), (c + du).min(x_end), scale, &[c], |x| {
                                w(x) * (1.0 - (x / du - k as f64).abs()).max(0.0)
                            })
                        })
                        .collect(),
                    offset_cum: (0..=grid.m)
                        .map(|k| {
                            let c = k as f64 * du;
                            tent_weights((c - du).max(0.0), x_end, scale, &[c], |x| {
                                w(x) * (x / du - k as f64 + 1.0).clamp(0.0, 1.0)
                            })
                        })
                        .collect(),
                    fresh: (0..=grid.m)
                        .map(|k| {
                            let lo = k as f64 * du;
                            let hi = if k < grid.m { lo + du } else { x_end };
                            tent_weights(lo, hi.min(x_end), scale, &[], w)
                        })
                        .collect(),
                }
            })
            .collect();
        let mut planner = FftPlanner::new();
        let fft = planner.plan_fft_forward(2 * grid.q);
        let ifft = planner.plan_fft_inverse(2 * grid.q);
        Ok(Self {
            model,
            grid: grid.clone(),
            theta1,
            theta2,
            dims,
            plus,
            minus,
            node_pp,
            cell_mm,
            cell_mp,
            mp_cols,
            first,
            last,
            fft,
            ifft,
            z_rows: vec![dims.z; dims.pp],
        })
    }

    pub fn grid(&self) -> &LevelDurationGrid {
        &self.grid
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn thetas(&self) -> (f64, f64) {
        (self.theta1, self.theta2)
    }

    /// Kernel argument for duration `u`.
    fn eff(&self, u: f64) -> f64 {
        if self.grid.freeze() {
            u.min(self.grid.u_max)
        } else {
            u
        }
    }

    /// Pieces `(cell, lo, hi)` of `[lo, hi]` on the duration cells, chunked by `Δu` in the overflow.
    fn duration_pieces(&self, lo: f64, hi: f64) -> Vec<(usize, f64, f64)> {
        let g = &self.grid;
        let du = g.du();
        let mut out = Vec::new();
        let first = (lo / du).floor().max(0.0) as usize;
        for k in first..g.m {
            let a = lo.max(k as f64 * du);
            let b = hi.min((k + 1) as f64 * du);
            if b > a {
                out.push((k, a, b));
            }
            if (k + 1) as f64 * du >= hi {
                break;
            }
        }
        if g.freeze() && hi > g.u_max {
            let mut a = lo.max(g.u_max);
            while a < hi {
                let b = (a + du).min(hi);
                out.push((g.m, a, b));
                a = b;
            }
        }
        out
    }

    /// Calls `f(cell, lo, hi)` for each level cell meeting `[lo, hi]`.
    fn level_cells(&self, lo: f64, hi: f64, mut f: impl FnMut(usize, f64, f64)) {
        let g = &self.grid;
        let (lo, hi) = (lo.max(-g.l_max), hi.min(g.l_max));
        if hi <= lo {
            return;
        }
        let dl = g.dl();
        let c0 = (((lo + g.l_max) / dl).floor() as usize).min(2 * g.q - 1);
        let c1 = (((hi + g.l_max) / dl).ceil() as usize).min(2 * g.q);
        for c in c0..c1 {
            let a = lo.max(g.level_edge(c));
            let b = hi.min(g.level_edge(c + 1));
            if b > a {
                f(c, a, b);
            }
        }
    }

    /// Computes only the `z = 0` row for start states that no other state in `S⁺` enters without
    /// an arrival and that no state in `S⁻` enters. Results are then valid at `z = 0` only.
    pub fn restrict_to_origin(&mut self) {
        let pp = self.dims.pp;
        let mut full = vec![false; pp];
        for &c in &self.mp_cols {
            full[c] = true;
        }
        for (cpp, _) in &self.node_pp {
            for a in 0..pp {
                for a2 in 0..pp {
                    full[a2] |= cpp[(a, a2)] != 0.0;
                }
            }
        }
        self.z_rows = full.iter().map(|&f| if f { self.dims.z } else { 1 }).collect();
    }

    /// The two-step bridge `Λ⁽²⁾` by Gauss quadrature over every cell.
    pub fn bridge2(&self) -> Slice {
        let d = self.dims;
        let mut out = Slice::zeros(d);
        let model = self.model;
        let gamma = model.gamma();
        let g = &self.grid;
        let p = model.p();
        let kappa = model.k_cost.map(|k| if k == 0.0 { 1.0 } else { (-self.theta2 * k).exp() });
        // Pairs whose C or D entry never moves mass are skipped.
        let samples: Vec<f64> = (0..=g.m).map(|k| g.node(k)).chain(model.kernel.breakpoints()).collect();
        let mut active = vec![(false, false); d.pp * d.pn];
        {
            let mut cr = vec![0.0; p];
            let mut dr = vec![0.0; p];
            for (a, &i) in self.plus.iter().enumerate() {
                for &u in &samples {
                    model.kernel.row_into(u, Side::Right, i, &mut cr, &mut dr);
                    for (b, &j) in self.minus.iter().enumerate() {
                        let e = &mut active[a * d.pn + b];
                        e.0 |= cr[j] != 0.0;
                        e.1 |= dr[j] != 0.0 && kappa[(i, j)] != 0.0;
                    }
                }
            }
        }
        out.data.par_chunks_mut(d.z_stride()).enumerate().for_each(|(zi, oz)| {
            let z = g.node(zi);
            let mut cr = vec![0.0; p];
            let mut dr = vec![0.0; p];
            for (a, &i) in self.plus.iter().enumerate() {
                if zi >= self.z_rows[a] {
                    continue;
                }
                let ri = model.space.rate(i);
                let sig = self.theta1 * model.sigma[i];
                for (b, &j) in self.minus.iter().enumerate() {
                    let rj = model.space.rate(j);
                    let dst = &mut oz[(a * d.pn + b) * d.block()..][..d.block()];
                    let (c_on, d_on) = active[a * d.pn + b];
                    if c_on {
                        let pref = gamma * gamma / (ri - rj);
                        let reach = (TAIL_RATE / gamma).min(g.l_max / -rj);
                        for (cell, s0, s1) in self.duration_pieces(z, z + reach) {
                            for (s, ws) in gl_points(s0, s1) {
                                let tau = s - z;
                                let decay = (-gamma * tau).exp();
                                self.level_cells(rj * tau, ri * tau, |c, l0, l1| {
                                    let v = gauss(l0, l1, |l| {
                                        let a1 = ((l - rj * tau) / (ri - rj)).clamp(0.0, tau);
                                        model.kernel.row_into(self.eff(z + a1), Side::Right, i, &mut cr, &mut dr);
                                        (-sig * a1).exp() * cr[j] / gamma
                                    });
                                    dst[cell * d.l + c] += ws * pref * decay * v;
                                });
                            }
                        }
                    }
                    if d_on {
                        let pref = gamma * gamma / ri * kappa[(i, j)];
                        let reach = (TAIL_RATE / gamma).min(g.l_max / -rj);
                        let rise = ri * TAIL_RATE / (gamma + sig);
                        for (cell, s0, s1) in self.duration_pieces(0.0, reach) {
                            for (s, ws) in gl_points(s0, s1) {
                                let base = rj * s;
                                let decay = (-gamma * s).exp();
                                self.level_cells(base, base + rise, |c, l0, l1| {
                                    let v = gauss(l0, l1, |l| {
                                        let a1 = ((l - base) / ri).max(0.0);
                                        model.kernel.row_into(self.eff(z + a1), Side::Right, i, &mut cr, &mut dr);
                                        (-(gamma + sig) * a1).exp() * dr[j] / gamma
                                    });
                                    dst[cell * d.l + c] += ws * pref * decay * v;
                                });
                            }
                        }
                    }
                }
            }
        });
        out
    }

    /// First intermediate epoch is the minimum: the first jump stays in `S⁺`.
    pub fn gamma_first(&self, prev: &Slice) -> Slice {
        let mut out = Slice::zeros(self.dims);
        self.gamma_first_into(prev, &mut out);
        out
    }

    fn gamma_first_into(&self, prev: &Slice, out: &mut Slice) {
        let d = self.dims;
        let q = self.grid.q;
        let m = self.grid.m;
        let (pp, pn, ns) = (d.pp, d.pn, d.s);
        let hb = ns * q;
        let hz = pp * pn * hb;
        let mut h = vec![0.0; d.z * hz];
        h.par_chunks_mut(hz).enumerate().for_each(|(node, hn)| {
            let (cpp, dpp) = &self.node_pp[node];
            for a in 0..pp {
                for a2 in 0..pp {
                    let (c, dd) = (cpp[(a, a2)], dpp[(a, a2)]);
                    if c == 0.0 && dd == 0.0 {
                        continue;
                    }
                    for b in 0..pn {
                        let dst = &mut hn[(a * pn + b) * hb..][..hb];
                        for s in 0..ns {
                            let sc = &prev.row(node, a2, b, s)[..q];
                            let sd = &prev.row(0, a2, b, s)[..q];
                            for ((x, yc), yd) in dst[s * q..(s + 1) * q].iter_mut().zip(sc).zip(sd) {
                                *x += c * yc + dd * yd;
                            }
                        }
                    }
                }
            }
        });
        let freeze = self.grid.freeze();
        out.data.par_chunks_mut(d.z_stride()).enumerate().for_each(|(zi, oz)| {
            let last = m - zi;
            for a in 0..pp {
                if zi >= self.z_rows[a] {
                    continue;
                }
                let fw = &self.first[a];
                for k in 0..=last {
                    let hn = &h[(zi + k) * hz..][..hz];
                    let mut apply = |w: &Sparse| {
                        if w.w.is_empty() {
                            return;
                        }
                        for b in 0..pn {
                            let src = &hn[(a * pn + b) * hb..][..hb];
                            let dst = &mut oz[(a * pn + b) * d.block()..][..d.block()];
                            for s in 0..ns {
                                shift_add(&mut dst[s * d.l..(s + 1) * d.l], w, &src[s * q..(s + 1) * q], 0);
                            }
                        }
                    };
                    if k < last {
                        apply(&fw.left[k]);
                    }
                    if k >= 1 {
                        apply(&fw.right[k - 1]);
                    }
                    if k == last && freeze {
                        apply(&fw.tail[last]);
                    }
                }
            }
        });
    }

    /// Last intermediate epoch is the minimum: the last jump stays in `S⁻`.
    pub fn gamma_last(&self, prev: &Slice) -> Slice {
        let mut out = Slice::zeros(self.dims);
        self.gamma_last_into(prev, &mut out);
        out
    }

    fn gamma_last_into(&self, prev: &Slice, out: &mut Slice) {
        let d = self.dims;
        let q = self.grid.q;
        let m = self.grid.m;
        let freeze = self.grid.freeze();
        let (pp, pn, ns, nl) = (d.pp, d.pn, d.s, d.l);
        out.data.par_chunks_mut(d.z_stride()).enumerate().for_each(|(zi, oz)| {
            let mut yc = vec![0.0; ns * q];
            let mut yd = vec![0.0; q];
            for a in 0..pp {
                if zi >= self.z_rows[a] {
                    continue;
                }
                for b in 0..pn {
                    yc.fill(0.0);
                    yd.fill(0.0);
                    let mut any = false;
                    for c in 0..pn {
                        for s in 0..ns {
                            let (cmm, dmm) = &self.cell_mm[s];
                            let (cw, dw) = (cmm[(c, b)], dmm[(c, b)]);
                            if cw == 0.0 && dw == 0.0 {
                                continue;
                            }
                            let src = &prev.row(zi, a, c, s)[q..];
                            for l in 0..q {
                                yc[s * q + l] += cw * src[l];
                                yd[l] += dw * src[l];
                            }
                            any = true;
                        }
                    }
                    if !any {
                        continue;
                    }
                    let lw = &self.last[b];
                    let dst = &mut oz[(a * pn + b) * d.block()..][..d.block()];
                    for src_s in 0..ns {
                        let y = &yc[src_s * q..(src_s + 1) * q];
                        if y.iter().all(|&v| v == 0.0) {
                            continue;
                        }
                        if src_s < m {
                            for off in 0..m - src_s {
                                let t = src_s + off;
                                shift_add(&mut dst[t * nl..(t + 1) * nl], &lw.offset[off], y, q);
                            }
                            if freeze {
                                shift_add(&mut dst[m * nl..], &lw.offset_cum[m - src_s], y, q);
                            }
                        } else if freeze {
                            shift_add(&mut dst[m * nl..], &lw.offset_cum[0], y, q);
                        }
                    }
                    if yd.iter().any(|&v| v != 0.0) {
                        for t in 0..m {
                            shift_add(&mut dst[t * nl..(t + 1) * nl], &lw.fresh[t], &yd, q);
                        }
                        if freeze {
                            shift_add(&mut dst[m * nl..], &lw.fresh[m], &yd, q);
                        }
                    }
                }
            }
        });
    }

    fn spec_x(&self, x: &Slice) -> SpecX {
        let d = self.dims;
        let q = self.grid.q;
        let nb = q + 1;
        let pc = self.mp_cols.len();
        let (pp, pn, nz, nu) = (d.pp, d.pn, d.z, d.s);
        let mut re = vec![DMatrix::zeros(nz, nu); nb * pp * pc];
        let mut im = vec![DMatrix::zeros(nz, nu); nb * pp * pc];
        let mut dspec = vec![Complex64::default(); nb * pp * pc * nz];
        let mut buf = vec![Complex64::default(); 2 * q];
        let mut dbuf = vec![0.0; q];
        for z in 0..nz {
            for a in (0..pp).filter(|&a| z < self.z_rows[a]) {
                for ci in 0..pc {
                    dbuf.fill(0.0);
                    for u in 0..nu {
                        let (cmp, dmp) = &self.cell_mp[u];
                        buf.fill(Complex64::default());
                        let mut any = false;
                        for c in 0..pn {
                            let (cw, dw) = (cmp[(c, ci)], dmp[(c, ci)]);
                            if cw == 0.0 && dw == 0.0 {
                                continue;
                            }
                            let src = &x.row(z, a, c, u)[q..];
                            for v in 0..q {
                                buf[v].re += cw * src[v];
                                dbuf[v] += dw * src[v];
                            }
                            any = true;
                        }
                        if !any {
                            continue;
                        }
                        self.fft.process(&mut buf);
                        for k in 0..nb {
                            let idx = (k * pp + a) * pc + ci;
                            re[idx][(z, u)] = buf[k].re;
                            im[idx][(z, u)] = buf[k].im;
                        }
                    }
                    for (v, b) in buf.iter_mut().enumerate() {
                        *b = Complex64::new(if v < q { dbuf[v] } else { 0.0 }, 0.0);
                    }
                    self.fft.process(&mut buf);
                    for k in 0..nb {
                        dspec[((k * pp + a) * pc + ci) * nz + z] = buf[k];
                    }
                }
            }
        }
        SpecX { re, im, d: dspec }
    }

    fn spec_y(&self, y: &Slice) -> SpecY {
        let d = self.dims;
        let q = self.grid.q;
        let m = self.grid.m;
        let nb = q + 1;
        let pc = self.mp_cols.len();
        let (pn, nu, ns) = (d.pn, d.s, d.s);
        let mut re = vec![DMatrix::zeros(nu, ns); nb * pc * pn];
        let mut im = vec![DMatrix::zeros(nu, ns); nb * pc * pn];
        let mut dspec = vec![Complex64::default(); nb * pc * pn * ns];
        let mut buf = vec![Complex64::default(); 2 * q];
        for (ci, &c) in self.mp_cols.iter().enumerate() {
            for b in 0..pn {
                for s in 0..ns {
                    for u in 0..nu {
                        let r0 = &y.row(u, c, b, s)[..q];
                        buf.fill(Complex64::default());
                        if u < m {
                            let r1 = &y.row(u + 1, c, b, s)[..q];
                            for l in 0..q {
                                buf[l].re = 0.5 * (r0[l] + r1[l]);
                            }
                        } else {
                            for l in 0..q {
                                buf[l].re = r0[l];
                            }
                        }
                        if buf.iter().all(|v| v.re == 0.0) {
                            continue;
                        }
                        self.fft.process(&mut buf);
                        for k in 0..nb {
                            let idx = (k * pc + ci) * pn + b;
                            re[idx][(u, s)] = buf[k].re;
                            im[idx][(u, s)] = buf[k].im;
                        }
                    }
                    buf.fill(Complex64::default());
                    for (l, v) in y.row(0, c, b, s)[..q].iter().enumerate() {
                        buf[l].re = *v;
                    }
                    self.fft.process(&mut buf);
                    for k in 0..nb {
                        dspec[((k * pc + ci) * pn + b) * ns + s] = buf[k];
                    }
                }
            }
        }
        SpecY { re, im, d: dspec }
    }

    /// `Σ` over the pairs of the middle-term contribution, added into `out`.
    fn middle_into(&self, pairs: &[(&SpecX, &SpecY)], out: &mut Slice) {
        let d = self.dims;
        let q = self.grid.q;
        let nb = q + 1;
        let pc = self.mp_cols.len();
        let (pp, pn, nz, ns) = (d.pp, d.pn, d.z, d.s);
        if pc == 0 || pairs.is_empty() {
            return;
        }
        let prod: Vec<Vec<(DMatrix<f64>, DMatrix<f64>)>> = (0..nb)
            .into_par_iter()
            .map(|k| {
                let mut res = Vec::with_capacity(pp * pn);
                for a in 0..pp {
                    let rows = self.z_rows[a];
                    for b in 0..pn {
                        let mut zr = DMatrix::zeros(rows, ns);
                        let mut zim = DMatrix::zeros(rows, ns);
                        for (sx, sy) in pairs {
                            for ci in 0..pc {
                                let ix = (k * pp + a) * pc + ci;
                                let iy = (k * pc + ci) * pn + b;
                                let (xr, xi) = (sx.re[ix].rows(0, rows), sx.im[ix].rows(0, rows));
                                let (yr, yi) = (&sy.re[iy], &sy.im[iy]);
                                zr.gemm(1.0, &xr, yr, 1.0);
                                zr.gemm(-1.0, &xi, yi, 1.0);
                                zim.gemm(1.0, &xr, yi, 1.0);
                                zim.gemm(1.0, &xi, yr, 1.0);
                                let xd = &sx.d[ix * nz..(ix + 1) * nz];
                                let yd = &sy.d[iy * ns..(iy + 1) * ns];
                                for s in 0..ns {
                                    let ys = yd[s];
                                    if ys.re == 0.0 && ys.im == 0.0 {
                                        continue;
                                    }
                                    for z in 0..rows {
                                        let v = xd[z] * ys;
                                        zr[(z, s)] += v.re;
                                        zim[(z, s)] += v.im;
                                    }
                                }
                            }
                        }
                        res.push((zr, zim));
                    }
                }
                res
            })
            .collect();
        let n = 2 * q;
        let norm = 1.0 / n as f64;
        out.data.par_chunks_mut(d.z_stride()).enumerate().for_each(|(zi, oz)| {
            let mut buf = vec![Complex64::default(); n];
            for a in (0..pp).filter(|&a| zi < self.z_rows[a]) {
                for b in 0..pn {
                    let dst = &mut oz[(a * pn + b) * d.block()..][..d.block()];
                    for s in 0..ns {
                        for k in 0..nb {
                            let (zr, zim) = &prod[k][a * pn + b];
                            buf[k] = Complex64::new(zr[(zi, s)], zim[(zi, s)]);
                        }
                        buf[0].im = 0.0;
                        buf[q].im = 0.0;
                        for k in 1..q {
                            buf[n - k] = buf[k].conj();
                        }
                        self.ifft.process(&mut buf);
                        let row = &mut dst[s * n..(s + 1) * n];
                        for t in 0..n - 1 {
                            let v = 0.5 * norm * buf[t].re;
                            row[t] += v;
                            row[t + 1] += v;
                        }
                    }
                }
            }
        });
    }

    /// Middle decompositions with the minimum at an epoch `w ∈ [2, n-2]`: the first `w`-bridge
    /// ends above the start, jumps from `S⁻` to `S⁺` and a second bridge ends below its start.
    pub fn gamma_middle(&self, first: &Slice, second: &Slice) -> Slice {
        let mut out = Slice::zeros(self.dims);
        let sx = self.spec_x(first);
        let sy = self.spec_y(second);
        self.middle_into(&[(&sx, &sy)], &mut out);
        out
    }

    /// `Λ⁽²⁾ + Γ¹(x) + Γᴸ(x) + Γᴹ(x, x)`, the map whose fixed point is `Σₙ Λ⁽ⁿ⁾`.
    pub fn apply_summed(&self, lambda2: &Slice, x: &Slice) -> (Slice, f64) {
        let mut out = lambda2.clone();
        self.gamma_first_into(x, &mut out);
        self.gamma_last_into(x, &mut out);
        let sx = self.spec_x(x);
        let sy = self.spec_y(x);
        self.middle_into(&[(&sx, &sy)], &mut out);
        let clamped = out.clamp();
        (out, clamped)
    }

    fn diagnostics(&self, n: usize, slice: &Slice, clamped: f64) -> OrderDiagnostics {
        OrderDiagnostics {
            n,
            clamped,
            boundary_mass: slice.boundary_mass(),
            duration_tail_bound: match self.grid.tail {
                DurationTail::Drop => (-self.model.gamma() * self.grid.u_max).exp(),
                DurationTail::Freeze => 0.0,
            },
        }
    }

    fn spec_bytes(&self) -> usize {
        let d = self.dims;
        let nb = self.grid.q + 1;
        let pc = self.mp_cols.len();
        16 * nb * pc * (d.pp * d.z * d.s + d.pn * d.s * d.s)
    }
}

/// Bridge orders `2..=n_max` with their diagnostics.
#[derive(Debug, Clone)]
pub struct BridgeTensor {
    pub grid: LevelDurationGrid,
    pub theta1: f64,
    pub theta2: f64,
    pub dims: Dims,
    /// `slices[k]` is order `k + 2`.
    pub slices: Vec<Slice>,
    pub diagnostics: Vec<OrderDiagnostics>,
}

impl BridgeTensor {
    pub fn n_max(&self) -> usize {
        self.slices.len() + 1
    }

    pub fn slice(&self, n: usize) -> Option<&Slice> {
        n.checked_sub(2).and_then(|k| self.slices.get(k))
    }

    /// `L⁽ⁿ'ᶻ⁾(θ₁,θ₂,∞,0)` for the duration node `z`.
    pub fn integrate(&self, n: usize, z: f64) -> Result<DMatrix<f64>> {
        let zi = self.grid.z_index(z)?;
        let s = self.slice(n).ok_or_else(|| Error::Precondition(format!("order {n} is not in the tensor")))?;
        Ok(s.return_mass(zi))
    }

    /// Density `Λ⁽ⁿ'ᶻ⁾` averaged over a cell.
    pub fn density(&self, n: usize, z: usize, a: usize, b: usize, s: usize, l: usize) -> f64 {
        self.slices[n - 2].get(z, a, b, s, l) / (self.grid.du() * self.grid.dl())
    }

    /// Little-endian dump: magic `FRBT`, `u32` version 1, `u64` dims `(n_min, n_max, z, i, j, s, ℓ)`,
    /// `f64` header `(U_max, L_max, Δu, Δℓ, θ₁, θ₂)`, then cell-averaged densities in row-major
    /// order `[n][z][i][j][s][ℓ]`. The last `s` index is the overflow cell `s ≥ U_max`.
    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        let d = self.dims;
        w.write_all(b"FRBT")?;
        w.write_all(&1u32.to_le_bytes())?;
        for v in [2, self.n_max(), d.z, d.pp, d.pn, d.s, d.l] {
            w.write_all(&(v as u64).to_le_bytes())?;
        }
        let g = &self.grid;
        for v in [g.u_max, g.l_max, g.du(), g.dl(), self.theta1, self.theta2] {
            w.write_all(&v.to_le_bytes())?;
        }
        let scale = 1.0 / (g.du() * g.dl());
        let mut buf = Vec::with_capacity(8 * d.l);
        for s in &self.slices {
            for row in s.data.chunks(d.l) {
                buf.clear();
                for v in row {
                    buf.extend_from_slice(&(v * scale).to_le_bytes());
                }
                w.write_all(&buf)?;
            }
        }
        Ok(())
    }
}

/// Bytes needed by [`bridge_recursion`] for `n_max` orders.
pub fn recursion_bytes(op: &BridgeOperator<'_>, n_max: usize) -> usize {
    let slices = (n_max.saturating_sub(1) + 1) * op.dims.bytes();
    let specs = n_max.saturating_sub(3) * op.spec_bytes();
    let product = 16 * (op.grid.q + 1) * op.dims.pp * op.dims.pn * op.dims.z * op.dims.s;
    slices + specs + product + op.dims.bytes()
}

/// Orders `2..=n_max` built bottom-up, each as the sum of its three decompositions.
pub fn bridge_recursion(
    model: &FluidModel,
    grid: &LevelDurationGrid,
    theta1: f64,
    theta2: f64,
    n_max: usize,
) -> Result<BridgeTensor> {
    bridge_recursion_with_budget(model, grid, theta1, theta2, n_max, DEFAULT_MEMORY_BUDGET)
}

pub fn bridge_recursion_with_budget(
    model: &FluidModel,
    grid: &LevelDurationGrid,
    theta1: f64,
    theta2: f64,
    n_max: usize,
    budget: usize,
) -> Result<BridgeTensor> {
    if n_max < 2 {
        return Err(Error::Precondition(format!("N_max must be at least 2, got {n_max}")));
    }
    let op = BridgeOperator::new(model, grid, theta1, theta2)?;
    let required = recursion_bytes(&op, n_max);
    if required > budget {
        return Err(Error::MemoryBudget { required, budget });
    }
    let mut lambda2 = op.bridge2();
    let c2 = lambda2.clamp();
    let mut diagnostics = vec![op.diagnostics(2, &lambda2, c2)];
    let mut slices = vec![lambda2];
    let mut xs: Vec<SpecX> = Vec::new();
    let mut ys: Vec<SpecY> = Vec::new();
    for n in 3..=n_max {
        let prev = &slices[n - 3];
        let mut out = op.gamma_first(prev);
        op.gamma_last_into(prev, &mut out);
        if n >= 4 {
            let w = n - 2;
            xs.push(op.spec_x(&slices[w - 2]));
            ys.push(op.spec_y(&slices[w - 2]));
            let pairs: Vec<(&SpecX, &SpecY)> = (2..=n - 2).map(|w| (&xs[w - 2], &ys[n - w - 2])).collect();
            op.middle_into(&pairs, &mut out);
        }
        let clamped = out.clamp();
        diagnostics.push(op.diagnostics(n, &out, clamped));
        slices.push(out);
    }
    Ok(BridgeTensor { grid: grid.clone(), theta1, theta2, dims: op.dims, slices, diagnostics })
}

/// `L⁽ⁿ'ᶻ⁾(θ₁,θ₂,∞,0)` from a tensor.
pub fn integrate_bridge(tensor: &BridgeTensor, n: usize, z: f64) -> Result<DMatrix<f64>> {
    tensor.integrate(n, z)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ResumOptions {
    pub max_iter: usize,
    /// Stop when every entry of `∫∫_{ℓ≤0}` at every `z` node moves by less than this.
    pub tol: f64,
    /// Anderson history length; 0 gives plain fixed-point iteration.
    pub depth: usize,
    /// Solve only what the `z = 0` row needs.
    #[serde(default)]
    pub origin_only: bool,
}

impl Default for ResumOptions {
    fn default() -> Self {
        Self { max_iter: 400, tol: 1e-11, depth: 4, origin_only: false }
    }
}

/// The summed density `Σ_{n≥2} Λ⁽ⁿ⁾`.
#[derive(Debug, Clone)]
pub struct ResummedBridge {
    pub grid: LevelDurationGrid,
    pub theta1: f64,
    pub theta2: f64,
    pub total: Slice,
    pub iterations: usize,
    /// Residual after each iteration.
    pub residuals: Vec<f64>,
    pub converged: bool,
    pub diagnostics: OrderDiagnostics,
    pub origin_only: bool,
}

impl ResummedBridge {
    pub fn integrate(&self, z: f64) -> Result<DMatrix<f64>> {
        let zi = self.grid.z_index(z)?;
        if self.origin_only && zi != 0 {
            return Err(Error::Precondition(format!("the series was solved for z = 0 only, asked for z = {z}")));
        }
        Ok(self.total.return_mass(zi))
    }
}

fn residual(fx: &Slice, x: &Slice) -> f64 {
    (0..fx.dims.z).map(|z| (fx.return_mass(z) - x.return_mass(z)).amax()).fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.par_iter().zip(b.par_iter()).map(|(x, y)| x * y).sum()
}

/// Solves `X = Λ⁽²⁾ + Γ¹(X) + Γᴸ(X) + Γᴹ(X, X)` by Anderson-accelerated fixed-point iteration from
/// `X = Λ⁽²⁾`. Iterates are kept nonnegative and the history is reset whenever the residual grows.
pub fn resummed_bridge(
    model: &FluidModel,
    grid: &LevelDurationGrid,
    theta1: f64,
    theta2: f64,
    opts: &ResumOptions,
) -> Result<ResummedBridge> {
    let mut op = BridgeOperator::new(model, grid, theta1, theta2)?;
    if opts.origin_only {
        op.restrict_to_origin();
    }
    let required = (2 * opts.depth + 5) * op.dims.bytes() + 2 * op.spec_bytes();
    if required > DEFAULT_MEMORY_BUDGET {
        return Err(Error::MemoryBudget { required, budget: DEFAULT_MEMORY_BUDGET });
    }
    let mut lambda2 = op.bridge2();
    lambda2.clamp();
    let mut x = lambda2.clone();
    let mut hist_dx: Vec<Vec<f64>> = Vec::new();
    let mut hist_dr: Vec<Vec<f64>> = Vec::new();
    let mut prev: Option<(Vec<f64>, Vec<f64>)> = None;
    let mut residuals = Vec::new();
    let mut last_norm = f64::INFINITY;
    let mut clamped = 0.0f64;
    for it in 1..=opts.max_iter {
        let (fx, c) = op.apply_summed(&lambda2, &x);
        clamped = clamped.max(c);
        let res = residual(&fx, &x);
        residuals.push(res);
        if res < opts.tol {
            let diagnostics = op.diagnostics(0, &fx, clamped);
            return Ok(ResummedBridge {
                grid: grid.clone(),
                theta1,
                theta2,
                total: fx,
                iterations: it,
                residuals,
                converged: true,
                diagnostics,
                origin_only: opts.origin_only,
            });
        }
        let r: Vec<f64> = fx.data.par_iter().zip(x.data.par_iter()).map(|(f, v)| f - v).collect();
        let norm = dot(&r, &r).sqrt();
        if opts.depth == 0 || norm > last_norm {
            hist_dx.clear();
            hist_dr.clear();
            prev = None;
        }
        last_norm = norm;
        if let Some((px, pr)) = prev.take() {
            hist_dx.push(x.data.par_iter().zip(px.par_iter()).map(|(a, b)| a - b).collect());
            hist_dr.push(r.par_iter().zip(pr.par_iter()).map(|(a, b)| a - b).collect());
            if hist_dx.len() > opts.depth {
                hist_dx.remove(0);
                hist_dr.remove(0);
            }
        }
        let mut next = fx.data.clone();
        let k = hist_dr.len();
        if k > 0 {
            let gram = DMatrix::from_fn(k, k, |i, j| dot(&hist_dr[i], &hist_dr[j]));
            let rhs = nalgebra::DVector::from_fn(k, |i, _| dot(&hist_dr[i], &r));
            let reg = 1e-12 * gram.trace().max(f64::MIN_POSITIVE);
            let gram = gram + DMatrix::identity(k, k) * reg;
            if let Some(coef) = gram.cholesky().map(|ch| ch.solve(&rhs)) {
                for (i, &g) in coef.iter().enumerate() {
                    let (dx, dr) = (&hist_dx[i], &hist_dr[i]);
                    next.par_iter_mut().zip(dx.par_iter().zip(dr.par_iter())).for_each(|(v, (a, b))| *v -= g * (a + b));
                }
            }
        }
        next.par_iter_mut().for_each(|v| *v = v.max(0.0));
        prev = Some((std::mem::take(&mut x.data), r));
        x.data = next;
    }
    let (fx, c) = op.apply_summed(&lambda2, &x);
    clamped = clamped.max(c);
    residuals.push(residual(&fx, &x));
    let diagnostics = op.diagnostics(0, &fx, clamped);
    Ok(ResummedBridge {
        grid: grid.clone(),
        theta1,
        theta2,
        total: fx,
        iterations: opts.max_iter,
        residuals,
        converged: false,
        diagnostics,
        origin_only: opts.origin_only,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gallery;

    fn model_a() -> FluidModel {
        gallery::build(&gallery::model_a())
    }

    #[test]
    fn tent_weights_conserve_mass() {
        let w = tent_weights(0.3, 2.7, 1.7, &[1.0], |u| (-u).exp());
        let total: f64 = w.w.iter().sum();
        assert!((total - ((-0.3f64).exp() - (-2.7f64).exp())).abs() < 1e-12);
        let w = tent_weights(0.0, 1.0, -3.2, &[], |_| 1.0);
        assert!((w.w.iter().sum::<f64>() - 1.0).abs() < 1e-14);
        let mean: f64 = w.w.iter().enumerate().map(|(k, x)| (w.start + k as isize) as f64 * x).sum();
        assert!((mean + 1.6).abs() < 1e-12);
    }

    #[test]
    fn shift_add_clips_to_window() {
        let mut dst = vec![0.0; 4];
        let w = Sparse { start: -1, w: vec![1.0, 2.0] };
        shift_add(&mut dst, &w, &[1.0, 1.0], 2);
        assert_eq!(dst, vec![0.0, 1.0, 3.0, 2.0]);
    }

    #[test]
    fn two_bridge_mass_model_a() {
        let m = model_a();
        let grid = LevelDurationGrid::new(16, 16, 16.0, 16.0, DurationTail::Freeze).unwrap();
        let op = BridgeOperator::new(&m, &grid, 0.0, 0.0).unwrap();
        let l2 = op.bridge2();
        let total = l2.window_mass(0)[(0, 0)];
        // Paths with a1 + x > 16 leave the level window.
        let expect = 0.9 * (1.0 - 17.0 * (-16f64).exp());
        assert!((total - expect).abs() < 1e-9, "{total} vs {expect}");
        assert!(l2.data.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn two_bridge_support() {
        let m = model_a();
        let grid = LevelDurationGrid::new(16, 16, 8.0, 8.0, DurationTail::Freeze).unwrap();
        let op = BridgeOperator::new(&m, &grid, 0.0, 0.0).unwrap();
        let l2 = op.bridge2();
        for zi in 0..=16 {
            for s in 0..zi {
                assert!(l2.row(zi, 0, 0, s).iter().all(|&v| v == 0.0));
            }
        }
    }
}
