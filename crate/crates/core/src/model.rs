//! Duration-dependent Markovian arrival processes and the fluid models they drive.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the row sums of `C(u) + D(u)`.
pub const ROW_SUM_TOL: f64 = 1e-10;
/// Tolerance on the total mass of the initial law.
pub const ALPHA_TOL: f64 = 1e-12;

/// Dense matrix as it appears in a config file (row-major nested arrays).
pub type RawMatrix = Vec<Vec<f64>>;

fn to_dmatrix(raw: &RawMatrix, p: usize, what: &str) -> Result<DMatrix<f64>> {
    if raw.len() != p || raw.iter().any(|row| row.len() != p) {
        return Err(Error::Structure(format!("{what} must be {p}x{p}")));
    }
    Ok(DMatrix::from_fn(p, p, |i, j| raw[i][j]))
}

fn from_dmatrix(m: &DMatrix<f64>) -> RawMatrix {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// State space with its net revenue rates and the sign partition.
#[derive(Debug, Clone, PartialEq)]
pub struct StateSpace {
    r: Vec<f64>,
    plus: Vec<usize>,
    minus: Vec<usize>,
}

impl StateSpace {
    pub fn new(r: Vec<f64>) -> Result<Self> {
        if r.is_empty() {
            return Err(Error::Structure("state space is empty".into()));
        }
        for (i, &ri) in r.iter().enumerate() {
            if !ri.is_finite() {
                return Err(Error::Structure(format!("rate of state {i} is not finite")));
            }
            if ri == 0.0 {
                return Err(Error::Structure(format!(
                    "state {i} has zero net revenue rate; zero-rate states are not supported"
                )));
            }
        }
        let plus = (0..r.len()).filter(|&i| r[i] > 0.0).collect();
        let minus = (0..r.len()).filter(|&i| r[i] < 0.0).collect();
        Ok(Self { r, plus, minus })
    }

    pub fn p(&self) -> usize {
        self.r.len()
    }

    pub fn rates(&self) -> &[f64] {
        &self.r
    }

    pub fn rate(&self, i: usize) -> f64 {
        self.r[i]
    }

    pub fn plus(&self) -> &[usize] {
        &self.plus
    }

    pub fn minus(&self) -> &[usize] {
        &self.minus
    }

    pub fn is_plus(&self, i: usize) -> bool {
        self.r[i] > 0.0
    }

    pub fn max_abs_rate(&self) -> f64 {
        self.r.iter().fold(0.0, |m, r| m.max(r.abs()))
    }
}

/// Parametric hazard function of the time since the last arrival.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case", deny_unknown_fields)]
pub enum Hazard {
    Constant { rate: f64 },
    /// `h(u) = a / (b + u)`.
    Pareto { a: f64, b: f64 },
    /// `h(u) = min(cap, (k/λ)(u/λ)^(k-1))`.
    Weibull { shape: f64, scale: f64, cap: f64 },
}

impl Hazard {
    pub fn eval(&self, u: f64) -> f64 {
        match *self {
            Hazard::Constant { rate } => rate,
            Hazard::Pareto { a, b } => a / (b + u),
            Hazard::Weibull { shape, scale, cap } => {
                if shape == 1.0 {
                    return (1.0 / scale).min(cap);
                }
                if u == 0.0 {
                    return if shape < 1.0 { cap } else { 0.0 };
                }
                let h = shape / scale * (u / scale).powf(shape - 1.0);
                h.min(cap)
            }
        }
    }

    /// Cumulative hazard `∫_0^u h`.
    pub fn integral(&self, u: f64) -> f64 {
        match *self {
            Hazard::Constant { rate } => rate * u,
            Hazard::Pareto { a, b } => a * ((b + u) / b).ln(),
            Hazard::Weibull { shape, scale, cap } => {
                if shape == 1.0 {
                    return (1.0 / scale).min(cap) * u;
                }
                // crossover point where the raw hazard meets the cap
                let uc = scale * (cap * scale / shape).powf(1.0 / (shape - 1.0));
                let raw = |x: f64| (x / scale).powf(shape);
                if shape > 1.0 {
                    if u <= uc {
                        raw(u)
                    } else {
                        raw(uc) + cap * (u - uc)
                    }
                } else if u <= uc {
                    cap * u
                } else {
                    cap * uc + raw(u) - raw(uc)
                }
            }
        }
    }

    pub fn sup(&self) -> f64 {
        match *self {
            Hazard::Constant { rate } => rate,
            Hazard::Pareto { a, b } => a / b,
            Hazard::Weibull { shape, scale, cap } => {
                if shape == 1.0 {
                    (1.0 / scale).min(cap)
                } else {
                    cap
                }
            }
        }
    }

    fn check(&self) -> Result<()> {
        let ok = match *self {
            Hazard::Constant { rate } => rate >= 0.0 && rate.is_finite(),
            Hazard::Pareto { a, b } => a >= 0.0 && b > 0.0 && a.is_finite() && b.is_finite(),
            Hazard::Weibull { shape, scale, cap } => {
                shape > 0.0 && scale > 0.0 && cap > 0.0 && shape.is_finite() && scale.is_finite() && cap.is_finite()
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidModel(format!("invalid hazard parameters {self:?}")))
        }
    }
}

/// Serializable description of `C(·)`, `D(·)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelRepr {
    Constant {
        c: RawMatrix,
        d: RawMatrix,
    },
    /// Piece `k` is active on `[breakpoints[k-1], breakpoints[k])`, right-continuous.
    PiecewiseConstant {
        breakpoints: Vec<f64>,
        c: Vec<RawMatrix>,
        d: Vec<RawMatrix>,
    },
    /// `C(u) = diag(-h_i(u)) + {jump_ij h_i(u)}`, `D(u) = {arrival_ij h_i(u)}`.
    Hazard {
        hazards: Vec<Hazard>,
        jump: RawMatrix,
        arrival: RawMatrix,
    },
    /// Erlang ramp of `stages` artificial states with exit rate `rate` feeding `entry` of `base`.
    Erlang {
        stages: usize,
        rate: f64,
        entry: usize,
        base: Box<KernelRepr>,
    },
}

#[derive(Debug, Clone)]
enum Compiled {
    Constant {
        c: DMatrix<f64>,
        d: DMatrix<f64>,
    },
    Piecewise {
        breakpoints: Vec<f64>,
        c: Vec<DMatrix<f64>>,
        d: Vec<DMatrix<f64>>,
    },
    Hazard {
        hazards: Vec<Hazard>,
        jump: DMatrix<f64>,
        arrival: DMatrix<f64>,
    },
    Erlang {
        stages: usize,
        rate: f64,
        entry: usize,
        base: Box<Compiled>,
    },
}

impl Compiled {
    fn build(repr: &KernelRepr) -> Result<(Self, usize)> {
        match repr {
            KernelRepr::Constant { c, d } => {
                let p = c.len();
                if p == 0 {
                    return Err(Error::Structure("kernel matrices are empty".into()));
                }
                Ok((Compiled::Constant { c: to_dmatrix(c, p, "C")?, d: to_dmatrix(d, p, "D")? }, p))
            }
            KernelRepr::PiecewiseConstant { breakpoints, c, d } => {
                if c.len() != breakpoints.len() + 1 || d.len() != c.len() {
                    return Err(Error::Structure(
                        "piecewise kernel needs one more C and D piece than breakpoints".into(),
                    ));
                }
                if breakpoints.iter().any(|b| !b.is_finite() || *b <= 0.0)
                    || breakpoints.windows(2).any(|w| w[1] <= w[0])
                {
                    return Err(Error::Structure("breakpoints must be positive and strictly increasing".into()));
                }
                let p = c[0].len();
                if p == 0 {
                    return Err(Error::Structure("kernel matrices are empty".into()));
                }
                let c = c.iter().map(|m| to_dmatrix(m, p, "C piece")).collect::<Result<Vec<_>>>()?;
                let d = d.iter().map(|m| to_dmatrix(m, p, "D piece")).collect::<Result<Vec<_>>>()?;
                Ok((Compiled::Piecewise { breakpoints: breakpoints.clone(), c, d }, p))
            }
            KernelRepr::Hazard { hazards, jump, arrival } => {
                let p = hazards.len();
                if p == 0 {
                    return Err(Error::Structure("hazard kernel has no states".into()));
                }
                for h in hazards {
                    h.check()?;
                }
                let jump = to_dmatrix(jump, p, "jump routing")?;
                let arrival = to_dmatrix(arrival, p, "arrival routing")?;
                for i in 0..p {
                    if jump[(i, i)] != 0.0 {
                        return Err(Error::InvalidModel(format!("jump routing has nonzero diagonal in row {i}")));
                    }
                }
                Ok((Compiled::Hazard { hazards: hazards.clone(), jump, arrival }, p))
            }
            KernelRepr::Erlang { stages, rate, entry, base } => {
                if *stages == 0 {
                    return Err(Error::Structure("erlang ramp needs at least one stage".into()));
                }
                if !(rate.is_finite() && *rate > 0.0) {
                    return Err(Error::InvalidModel("erlang stage rate must be positive".into()));
                }
                let (base, base_p) = Compiled::build(base)?;
                if *entry >= base_p {
                    return Err(Error::Structure(format!("entry state {entry} out of range")));
                }
                let out = Compiled::Erlang { stages: *stages, rate: *rate, entry: *entry, base: Box::new(base) };
                Ok((out, stages + base_p))
            }
        }
    }

    fn piece(breakpoints: &[f64], u: f64, left: bool) -> usize {
        if left {
            breakpoints.partition_point(|&b| b < u)
        } else {
            breakpoints.partition_point(|&b| b <= u)
        }
    }

    fn row(&self, u: f64, left: bool, i: usize, c: &mut [f64], d: &mut [f64]) {
        match self {
            Compiled::Constant { c: cm, d: dm } => {
                for j in 0..c.len() {
                    c[j] = cm[(i, j)];
                    d[j] = dm[(i, j)];
                }
            }
            Compiled::Piecewise { breakpoints, c: cs, d: ds } => {
                let k = Self::piece(breakpoints, u, left);
                for j in 0..c.len() {
                    c[j] = cs[k][(i, j)];
                    d[j] = ds[k][(i, j)];
                }
            }
            Compiled::Hazard { hazards, jump, arrival } => {
                let h = hazards[i].eval(u);
                for j in 0..c.len() {
                    c[j] = if i == j { -h } else { jump[(i, j)] * h };
                    d[j] = arrival[(i, j)] * h;
                }
            }
            Compiled::Erlang { stages, rate, entry, base, .. } => {
                let n = *stages;
                c.fill(0.0);
                d.fill(0.0);
                if i < n {
                    c[i] = -rate;
                    if i + 1 < n {
                        d[i + 1] = *rate;
                    } else {
                        d[n + entry] = *rate;
                    }
                } else {
                    base.row(u, left, i - n, &mut c[n..], &mut d[n..]);
                }
            }
        }
    }

    fn breakpoints(&self) -> Vec<f64> {
        match self {
            Compiled::Piecewise { breakpoints, .. } => breakpoints.clone(),
            Compiled::Erlang { base, .. } => base.breakpoints(),
            _ => Vec::new(),
        }
    }

    fn sup_rate(&self) -> f64 {
        match self {
            Compiled::Constant { c, .. } => (0..c.nrows()).fold(0.0, |m, i| m.max(-c[(i, i)])),
            Compiled::Piecewise { c, .. } => c
                .iter()
                .flat_map(|m| (0..m.nrows()).map(move |i| -m[(i, i)]))
                .fold(0.0, f64::max),
            Compiled::Hazard { hazards, .. } => hazards.iter().fold(0.0, |m, h| m.max(h.sup())),
            Compiled::Erlang { rate, base, .. } => rate.max(base.sup_rate()),
        }
    }

    fn is_constant(&self) -> bool {
        match self {
            Compiled::Constant { .. } => true,
            Compiled::Piecewise { .. } => false,
            Compiled::Hazard { hazards, .. } => hazards.iter().all(|h| match h {
                Hazard::Constant { .. } => true,
                Hazard::Pareto { a, .. } => *a == 0.0,
                Hazard::Weibull { shape, .. } => *shape == 1.0,
            }),
            Compiled::Erlang { base, .. } => base.is_constant(),
        }
    }

    fn d_is_zero(&self) -> bool {
        match self {
            Compiled::Constant { d, .. } => d.iter().all(|&x| x == 0.0),
            Compiled::Piecewise { d, .. } => d.iter().all(|m| m.iter().all(|&x| x == 0.0)),
            Compiled::Hazard { hazards, arrival, .. } => (0..hazards.len())
                .all(|i| hazards[i].sup() == 0.0 || arrival.row(i).iter().all(|&x| x == 0.0)),
            Compiled::Erlang { .. } => false,
        }
    }
}

/// Side from which a kernel is evaluated at a breakpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Right,
    Left,
}

/// The pair `C(·)`, `D(·)` together with the uniformization bound `γ`.
#[derive(Debug, Clone)]
pub struct DurationKernel {
    gamma: f64,
    p: usize,
    repr: KernelRepr,
    compiled: Compiled,
}

impl DurationKernel {
    /// Builds a kernel. When `gamma` is `None` the analytic supremum of `c_i(u)` is used.
    pub fn new(repr: KernelRepr, gamma: Option<f64>) -> Result<Self> {
        let (compiled, p) = Compiled::build(&repr)?;
        let gamma = match gamma {
            Some(g) => g,
            None => {
                let s = compiled.sup_rate();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            }
        };
        if !(gamma.is_finite() && gamma > 0.0) {
            return Err(Error::InvalidModel(format!("gamma must be positive and finite, got {gamma}")));
        }
        Ok(Self { gamma, p, repr, compiled })
    }

    pub fn constant(c: DMatrix<f64>, d: DMatrix<f64>, gamma: Option<f64>) -> Result<Self> {
        Self::new(KernelRepr::Constant { c: from_dmatrix(&c), d: from_dmatrix(&d) }, gamma)
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn repr(&self) -> &KernelRepr {
        &self.repr
    }

    pub fn breakpoints(&self) -> Vec<f64> {
        self.compiled.breakpoints()
    }

    /// Analytic `sup_u max_i c_i(u)`.
    pub fn sup_rate(&self) -> f64 {
        self.compiled.sup_rate()
    }

    pub fn is_constant(&self) -> bool {
        self.compiled.is_constant()
    }

    pub fn d_is_zero(&self) -> bool {
        self.compiled.d_is_zero()
    }

    /// Row `i` of `C(u)` and `D(u)` written into the given slices.
    pub fn row_into(&self, u: f64, side: Side, i: usize, c: &mut [f64], d: &mut [f64]) {
        self.compiled.row(u, side == Side::Left, i, c, d);
    }

    pub fn eval_into(&self, u: f64, side: Side, c: &mut DMatrix<f64>, d: &mut DMatrix<f64>) {
        let p = self.p;
        let mut cr = vec![0.0; p];
        let mut dr = vec![0.0; p];
        for i in 0..p {
            self.row_into(u, side, i, &mut cr, &mut dr);
            for j in 0..p {
                c[(i, j)] = cr[j];
                d[(i, j)] = dr[j];
            }
        }
    }

    /// `(C(u), D(u))`, right-continuous at breakpoints.
    pub fn eval(&self, u: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.eval_side(u, Side::Right)
    }

    /// Left limits `(C(u-), D(u-))`.
    pub fn eval_left(&self, u: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        self.eval_side(u, Side::Left)
    }

    fn eval_side(&self, u: f64, side: Side) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
        if !(u >= 0.0) {
            return Err(Error::Domain { u });
        }
        let mut c = DMatrix::zeros(self.p, self.p);
        let mut d = DMatrix::zeros(self.p, self.p);
        self.eval_into(u, side, &mut c, &mut d);
        if c.iter().chain(d.iter()).any(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("kernel value at u = {u}")));
        }
        Ok((c, d))
    }

    pub fn c(&self, u: f64) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.p, self.p);
        let mut d = DMatrix::zeros(self.p, self.p);
        self.eval_into(u, Side::Right, &mut c, &mut d);
        c
    }

    pub fn d(&self, u: f64) -> DMatrix<f64> {
        let mut c = DMatrix::zeros(self.p, self.p);
        let mut d = DMatrix::zeros(self.p, self.p);
        self.eval_into(u, Side::Right, &mut c, &mut d);
        d
    }
}

/// `(C(u), D(u))` for a validated kernel.
pub fn eval_kernel(kernel: &DurationKernel, u: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    kernel.eval(u)
}

/// `C̄(u) = I + C(u)/γ`, `D̄(u) = D(u)/γ`.
pub fn uniformized_kernel(kernel: &DurationKernel, u: f64) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let (c, d) = kernel.eval(u)?;
    let g = kernel.gamma();
    let cbar = DMatrix::identity(kernel.p(), kernel.p()) + c / g;
    let dbar = d / g;
    for i in 0..kernel.p() {
        if cbar[(i, i)] < -1e-12 {
            return Err(Error::BoundViolation { u, state: i, rate: -(cbar[(i, i)] - 1.0) * g, gamma: g });
        }
    }
    Ok((cbar, dbar))
}

/// A fluid model driven by a DMArP.
#[derive(Debug, Clone)]
pub struct FluidModel {
    pub space: StateSpace,
    pub kernel: DurationKernel,
    pub alpha: DVector<f64>,
    pub sigma: Vec<f64>,
    pub k_cost: DMatrix<f64>,
}

impl FluidModel {
    /// Structural construction: dimensions must agree and both `S⁺` and `S⁻` must be nonempty.
    pub fn new(
        space: StateSpace,
        kernel: DurationKernel,
        alpha: DVector<f64>,
        sigma: Vec<f64>,
        k_cost: DMatrix<f64>,
    ) -> Result<Self> {
        let p = space.p();
        if kernel.p() != p {
            return Err(Error::Structure(format!("kernel has {} states but the state space has {p}", kernel.p())));
        }
        if alpha.len() != p || sigma.len() != p || k_cost.nrows() != p || k_cost.ncols() != p {
            return Err(Error::Structure(format!("alpha, sigma and the cost matrix must all have dimension {p}")));
        }
        if space.plus().is_empty() {
            return Err(Error::Structure("S+ is empty: the fluid never increases, first return is undefined".into()));
        }
        if space.minus().is_empty() {
            return Err(Error::Structure("S- is empty: the fluid never decreases, first return is undefined".into()));
        }
        Ok(Self { space, kernel, alpha, sigma, k_cost })
    }

    /// Model with zero dividends and zero jump costs.
    pub fn plain(r: Vec<f64>, kernel: DurationKernel, alpha: Vec<f64>) -> Result<Self> {
        let p = r.len();
        Self::new(StateSpace::new(r)?, kernel, DVector::from_vec(alpha), vec![0.0; p], DMatrix::zeros(p, p))
    }

    pub fn p(&self) -> usize {
        self.space.p()
    }

    pub fn gamma(&self) -> f64 {
        self.kernel.gamma()
    }
}

/// The four blocks of a `p×p` matrix under the `S⁺`/`S⁻` partition.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockView {
    pub pp: DMatrix<f64>,
    pub pm: DMatrix<f64>,
    pub mp: DMatrix<f64>,
    pub mm: DMatrix<f64>,
}

impl BlockView {
    pub fn new(m: &DMatrix<f64>, space: &StateSpace) -> Self {
        let (pl, mi) = (space.plus(), space.minus());
        let pick = |rows: &[usize], cols: &[usize]| DMatrix::from_fn(rows.len(), cols.len(), |a, b| m[(rows[a], cols[b])]);
        Self { pp: pick(pl, pl), pm: pick(pl, mi), mp: pick(mi, pl), mm: pick(mi, mi) }
    }

    pub fn reassemble(&self, space: &StateSpace) -> DMatrix<f64> {
        let p = space.p();
        let mut m = DMatrix::zeros(p, p);
        let (pl, mi) = (space.plus(), space.minus());
        for (a, &i) in pl.iter().enumerate() {
            for (b, &j) in pl.iter().enumerate() {
                m[(i, j)] = self.pp[(a, b)];
            }
            for (b, &j) in mi.iter().enumerate() {
                m[(i, j)] = self.pm[(a, b)];
            }
        }
        for (a, &i) in mi.iter().enumerate() {
            for (b, &j) in pl.iter().enumerate() {
                m[(i, j)] = self.mp[(a, b)];
            }
            for (b, &j) in mi.iter().enumerate() {
                m[(i, j)] = self.mm[(a, b)];
            }
        }
        m
    }
}

/// Entrywise `exp(-θ₂ k(i,j))` split into blocks.
pub fn cost_weights(model: &FluidModel, theta2: f64) -> BlockView {
    let kappa = model.k_cost.map(|k| if k == 0.0 { 1.0 } else { (-theta2 * k).exp() });
    BlockView::new(&kappa, &model.space)
}

/// Location and size of the worst violation of a check.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub u: Option<f64>,
    pub i: Option<usize>,
    pub j: Option<usize>,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub worst: Option<Violation>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub checks: Vec<CheckResult>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &CheckResult> {
        self.checks.iter().filter(|c| !c.passed)
    }
}

struct Tracker {
    name: &'static str,
    worst: Option<Violation>,
}

impl Tracker {
    fn new(name: &'static str) -> Self {
        Self { name, worst: None }
    }

    /// Records a violation of size `excess > 0`; keeps the largest one.
    fn hit(&mut self, excess: f64, u: Option<f64>, i: Option<usize>, j: Option<usize>, value: f64) {
        if excess > 0.0 || excess.is_nan() {
            let worse = match &self.worst {
                None => true,
                Some(w) => excess > w.value.abs() || excess.is_nan(),
            };
            if worse {
                self.worst = Some(Violation { u, i, j, value });
            }
        }
    }

    fn finish(self) -> CheckResult {
        CheckResult { name: self.name.to_string(), passed: self.worst.is_none(), worst: self.worst }
    }
}

/// 512 durations: zero, 511 log-spaced points up to `u_max`, plus every breakpoint below `u_max`.
pub fn default_samples(kernel: &DurationKernel, u_max: f64) -> Vec<f64> {
    let lo = u_max * 1e-6;
    let ratio = (u_max / lo).ln() / 510.0;
    let mut out: Vec<f64> = std::iter::once(0.0).chain((0..511).map(|k| lo * (ratio * k as f64).exp())).collect();
    out.extend(kernel.breakpoints().into_iter().filter(|&b| b <= u_max));
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

/// Sampled check of every kernel and model invariant.
pub fn validate_model(model: &FluidModel, u_samples: &[f64]) -> Result<ValidationReport> {
    if u_samples.is_empty() {
        return Err(Error::Precondition("u_samples must be nonempty".into()));
    }
    if u_samples.windows(2).any(|w| w[1] < w[0]) || u_samples[0] < 0.0 {
        return Err(Error::Precondition("u_samples must be sorted and nonnegative".into()));
    }
    let p = model.p();
    let kernel = &model.kernel;
    let gamma = kernel.gamma();
    let mut finite = Tracker::new("finite_values");
    let mut offdiag = Tracker::new("c_offdiagonal_nonnegative");
    let mut dneg = Tracker::new("d_nonnegative");
    let mut rows = Tracker::new("row_sums_zero");
    let mut bound = Tracker::new("gamma_bounds_rates");
    let mut c = DMatrix::zeros(p, p);
    let mut d = DMatrix::zeros(p, p);
    for &u in u_samples {
        kernel.eval_into(u, Side::Right, &mut c, &mut d);
        for i in 0..p {
            let mut sum = 0.0;
            for j in 0..p {
                let (cij, dij) = (c[(i, j)], d[(i, j)]);
                if !cij.is_finite() || !dij.is_finite() {
                    finite.hit(f64::INFINITY, Some(u), Some(i), Some(j), f64::NAN);
                }
                if i != j && cij < 0.0 {
                    offdiag.hit(-cij, Some(u), Some(i), Some(j), cij);
                }
                if dij < 0.0 {
                    dneg.hit(-dij, Some(u), Some(i), Some(j), dij);
                }
                sum += cij + dij;
            }
            if sum.abs() > ROW_SUM_TOL {
                rows.hit(sum.abs(), Some(u), Some(i), None, sum);
            }
            let ci = -c[(i, i)];
            if ci > gamma * (1.0 + 1e-12) {
                bound.hit(ci - gamma, Some(u), Some(i), None, ci);
            }
        }
    }
    let sup = kernel.sup_rate();
    if sup > gamma * (1.0 + 1e-12) {
        bound.hit(sup - gamma, None, None, None, sup);
    }

    let mut alpha = Tracker::new("alpha_probability_vector");
    let total: f64 = model.alpha.iter().sum();
    if (total - 1.0).abs() > ALPHA_TOL {
        alpha.hit((total - 1.0).abs(), None, None, None, total);
    }
    for (i, &a) in model.alpha.iter().enumerate() {
        if !(a >= 0.0) {
            alpha.hit(-a, None, Some(i), None, a);
        }
    }
    let mut sigma = Tracker::new("sigma_nonnegative_and_zero_on_s_minus");
    for (i, &s) in model.sigma.iter().enumerate() {
        if !(s >= 0.0) || !s.is_finite() {
            sigma.hit(s.abs().max(1.0), None, Some(i), None, s);
        }
        if !model.space.is_plus(i) && s != 0.0 {
            sigma.hit(s.abs(), None, Some(i), None, s);
        }
    }
    let mut cost = Tracker::new("cost_matrix_nonnegative");
    for i in 0..p {
        for j in 0..p {
            let k = model.k_cost[(i, j)];
            if !(k >= 0.0) || !k.is_finite() {
                cost.hit(k.abs().max(1.0), None, Some(i), Some(j), k);
            }
        }
    }
    Ok(ValidationReport {
        checks: vec![
            finite.finish(),
            offdiag.finish(),
            dneg.finish(),
            rows.finish(),
            bound.finish(),
            alpha.finish(),
            sigma.finish(),
            cost.finish(),
        ],
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn mmpp() -> FluidModel {
        let c = DMatrix::from_row_slice(2, 2, &[-1.5, 1.0, 1.0, -1.2]);
        let d = DMatrix::from_row_slice(2, 2, &[0.5, 0.0, 0.0, 0.2]);
        let k = DurationKernel::constant(c, d, Some(1.5)).unwrap();
        FluidModel::plain(vec![1.0, -1.0], k, vec![0.5, 0.5]).unwrap()
    }

    #[test]
    fn mmpp_validates() {
        let m = mmpp();
        let rep = validate_model(&m, &default_samples(&m.kernel, 8.0)).unwrap();
        assert!(rep.passed(), "{rep:?}");
    }

    #[test]
    fn zero_kernel_validates() {
        let k = DurationKernel::constant(DMatrix::zeros(2, 2), DMatrix::zeros(2, 2), Some(0.7)).unwrap();
        let m = FluidModel::plain(vec![2.0, -1.0], k, vec![1.0, 0.0]).unwrap();
        assert!(validate_model(&m, &[0.0, 1.0]).unwrap().passed());
        let (cb, db) = uniformized_kernel(&m.kernel, 3.0).unwrap();
        assert_eq!(cb, DMatrix::identity(2, 2));
        assert_eq!(db, DMatrix::zeros(2, 2));
    }

    #[test]
    fn bad_row_sum_reports_row() {
        let c = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 1.0, -1.0]);
        let d = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.3, 0.0]);
        let k = DurationKernel::constant(c, d, Some(2.0)).unwrap();
        let m = FluidModel::plain(vec![1.0, -1.0], k, vec![1.0, 0.0]).unwrap();
        let rep = validate_model(&m, &[0.0, 1.0]).unwrap();
        let f: Vec<_> = rep.failures().collect();
        assert_eq!(f.len(), 1);
        assert_eq!(f[0].name, "row_sums_zero");
        assert_eq!(f[0].worst.as_ref().unwrap().i, Some(1));
    }

    #[test]
    fn uniformized_arithmetic() {
        let c = DMatrix::from_row_slice(2, 2, &[-1.0, 1.0, 0.5, -0.5]);
        let k = DurationKernel::constant(c, DMatrix::zeros(2, 2), Some(2.0)).unwrap();
        let (cb, _) = uniformized_kernel(&k, 0.0).unwrap();
        assert_eq!(cb, DMatrix::from_row_slice(2, 2, &[0.5, 0.5, 0.25, 0.75]));
    }

    #[test]
    fn small_gamma_is_a_bound_violation() {
        let c = DMatrix::from_row_slice(2, 2, &[-3.0, 3.0, 0.5, -0.5]);
        let k = DurationKernel::constant(c, DMatrix::zeros(2, 2), Some(2.0)).unwrap();
        match uniformized_kernel(&k, 1.0) {
            Err(Error::BoundViolation { state, .. }) => assert_eq!(state, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn piecewise_is_right_continuous() {
        let piece = |x: f64| vec![vec![-x, x], vec![x, -x]];
        let z = vec![vec![0.0; 2]; 2];
        let repr = KernelRepr::PiecewiseConstant {
            breakpoints: vec![2.0],
            c: vec![piece(1.0), piece(3.0)],
            d: vec![z.clone(), z],
        };
        let k = DurationKernel::new(repr, None).unwrap();
        assert_eq!(k.gamma(), 3.0);
        assert_eq!(k.eval(2.0).unwrap().0[(0, 1)], 3.0);
        assert_eq!(k.eval_left(2.0).unwrap().0[(0, 1)], 1.0);
        assert_eq!(k.eval(1.999).unwrap().0[(0, 1)], 1.0);
    }

    #[test]
    fn negative_duration_is_domain_error() {
        assert!(matches!(mmpp().kernel.eval(-1.0), Err(Error::Domain { .. })));
    }

    #[test]
    fn pareto_hazard_matches_integrated_hazard() {
        let h = Hazard::Pareto { a: 2.5, b: 1.5 };
        assert_relative_eq!(h.eval(0.0), 2.5 / 1.5);
        for &u in &[0.3, 2.0, 7.0] {
            let e = 1e-5;
            let fd = (h.integral(u + e) - h.integral(u - e)) / (2.0 * e);
            assert_relative_eq!(fd, h.eval(u), max_relative = 1e-6);
        }
    }

    #[test]
    fn weibull_integral_is_consistent() {
        for h in [
            Hazard::Weibull { shape: 2.0, scale: 1.0, cap: 3.0 },
            Hazard::Weibull { shape: 0.5, scale: 1.0, cap: 4.0 },
        ] {
            for &u in &[0.1, 0.7, 1.5, 4.0] {
                let e = 1e-6;
                let fd = (h.integral(u + e) - h.integral(u - e)) / (2.0 * e);
                assert_relative_eq!(fd, h.eval(u), max_relative = 1e-5);
            }
        }
    }

    #[test]
    fn cost_weight_entries() {
        let mut m = mmpp();
        m.k_cost[(0, 1)] = 2f64.ln();
        assert_relative_eq!(cost_weights(&m, 1.0).pm[(0, 0)], 0.5, epsilon = 1e-15);
        let z = cost_weights(&m, 0.0);
        assert!(z.pp.iter().chain(z.pm.iter()).chain(z.mp.iter()).chain(z.mm.iter()).all(|&x| x == 1.0));
    }

    #[test]
    fn empty_partition_rejected() {
        let k = DurationKernel::constant(DMatrix::zeros(1, 1), DMatrix::zeros(1, 1), Some(1.0)).unwrap();
        let err = FluidModel::plain(vec![1.0], k, vec![1.0]).unwrap_err();
        assert!(err.to_string().contains("S-"));
    }

    #[test]
    fn zero_rate_rejected() {
        assert!(StateSpace::new(vec![1.0, 0.0]).is_err());
    }

    #[test]
    fn dimension_mismatch_is_structural() {
        let k = DurationKernel::constant(DMatrix::zeros(3, 3), DMatrix::zeros(3, 3), Some(1.0)).unwrap();
        assert!(matches!(FluidModel::plain(vec![1.0, -1.0], k, vec![1.0, 0.0]), Err(Error::Structure(_))));
    }

    #[test]
    fn erlang_rows_conserve() {
        let base = KernelRepr::Constant { c: vec![vec![-1.0, 0.9], vec![0.8, -1.0]], d: vec![vec![0.1, 0.0], vec![0.0, 0.2]] };
        let repr = KernelRepr::Erlang { stages: 3, rate: 3.0, entry: 0, base: Box::new(base) };
        let k = DurationKernel::new(repr, None).unwrap();
        let (c, d) = k.eval(0.4).unwrap();
        for i in 0..5 {
            assert!((0..5).map(|j| c[(i, j)] + d[(i, j)]).sum::<f64>().abs() < 1e-12);
        }
        assert_eq!(d[(2, 3)], 3.0);
        assert_eq!(d[(0, 1)], 3.0);
        assert_eq!(k.gamma(), 3.0);
    }
}
