//! Exact simulation of `(J, N, U, F)` on the uniformization grid.

use std::io::{self, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;

use crate::error::{Error, Result};
use crate::model::{FluidModel, Side};

/// Tolerance on the per-epoch transition probabilities.
pub const TRANSITION_TOL: f64 = 1e-9;

/// Random stream for path `index` of a run seeded with `seed`.
pub fn stream(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Floats in CSV output: 17 significant digits.
pub fn fmt_f64(x: f64) -> String {
    format!("{x:.16e}")
}

/// One epoch of the uniformized chain.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Epoch {
    /// `T_{k+1} − T_k`.
    pub dt: f64,
    /// `J(T_{k+1}−)`.
    pub from: usize,
    /// `J(T_{k+1})`.
    pub to: usize,
    pub arrival: bool,
    /// `U(T_{k+1}−)`.
    pub duration: f64,
}

/// Stepper that advances a path one Poisson epoch at a time.
pub struct Walker<'a> {
    model: &'a FluidModel,
    rng: ChaCha8Rng,
    pub state: usize,
    pub time: f64,
    /// `U(T_k)`, after any reset at `T_k`.
    pub duration: f64,
    pub fluid: f64,
    pub dividend: f64,
    pub cost: f64,
    c_row: Vec<f64>,
    d_row: Vec<f64>,
}

impl<'a> Walker<'a> {
    pub fn new(model: &'a FluidModel, z: f64, state: usize, rng: ChaCha8Rng) -> Self {
        let p = model.p();
        Self {
            model,
            rng,
            state,
            time: 0.0,
            duration: z,
            fluid: 0.0,
            dividend: 0.0,
            cost: 0.0,
            c_row: vec![0.0; p],
            d_row: vec![0.0; p],
        }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    pub fn step(&mut self) -> Result<Epoch> {
        let m = self.model;
        let gamma = m.gamma();
        let e: f64 = self.rng.sample(Exp1);
        let dt = e / gamma;
        let i = self.state;
        self.time += dt;
        self.fluid += m.space.rate(i) * dt;
        self.dividend += m.sigma[i] * dt;
        let u = self.duration + dt;
        m.kernel.row_into(u, Side::Right, i, &mut self.c_row, &mut self.d_row);
        let p = m.p();
        let mut total = 0.0;
        for j in 0..p {
            let cb = if i == j { 1.0 + self.c_row[j] / gamma } else { self.c_row[j] / gamma };
            let db = self.d_row[j] / gamma;
            if cb < -1e-12 {
                return Err(Error::BoundViolation { u, state: i, rate: -self.c_row[i], gamma });
            }
            if db < 0.0 || !cb.is_finite() || !db.is_finite() {
                return Err(Error::KernelInconsistency { u, state: i, sum: f64::NAN });
            }
            self.c_row[j] = cb.max(0.0);
            self.d_row[j] = db;
            total += self.c_row[j] + db;
        }
        if (total - 1.0).abs() > TRANSITION_TOL {
            return Err(Error::KernelInconsistency { u, state: i, sum: total });
        }
        let x: f64 = self.rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for j in 0..p {
            acc += self.c_row[j];
            if x < acc {
                pick = Some((j, false));
                break;
            }
        }
        if pick.is_none() {
            for j in 0..p {
                acc += self.d_row[j];
                if x < acc {
                    pick = Some((j, true));
                    break;
                }
            }
        }
        let (to, arrival) = pick.unwrap_or_else(|| {
            // x landed on the rounding gap at the top: take the last positive entry
            let j = (0..p).rev().find(|&j| self.d_row[j] > 0.0);
            match j {
                Some(j) => (j, true),
                None => ((0..p).rev().find(|&j| self.c_row[j] > 0.0).unwrap_or(i), false),
            }
        });
        if arrival {
            self.cost += m.k_cost[(i, to)];
            self.duration = 0.0;
        } else {
            self.duration = u;
        }
        self.state = to;
        Ok(Epoch { dt, from: i, to, arrival, duration: u })
    }
}

/// Draws `J(0)` from `α`, optionally restricted to `S⁺`.
pub fn draw_initial<R: Rng>(model: &FluidModel, rng: &mut R, plus_only: bool) -> Result<usize> {
    let weight = |i: usize| if plus_only && !model.space.is_plus(i) { 0.0 } else { model.alpha[i] };
    let total: f64 = (0..model.p()).map(weight).sum();
    if !(total > 0.0) {
        return Err(Error::Precondition("initial law has no mass on the allowed states".into()));
    }
    let x = rng.random::<f64>() * total;
    let mut acc = 0.0;
    for i in 0..model.p() {
        acc += weight(i);
        if x < acc {
            return Ok(i);
        }
    }
    Ok((0..model.p()).rev().find(|&i| weight(i) > 0.0).unwrap())
}

/// One simulated trajectory on the Poisson grid.
#[derive(Debug, Clone, PartialEq)]
pub struct PathRecord {
    /// `T_0 = 0 < T_1 < …`, all below the horizon.
    pub poisson_epochs: Vec<f64>,
    /// `J(T_k)`.
    pub states: Vec<usize>,
    /// Whether an arrival occurred at `T_k` (false at `T_0`).
    pub arrival_flags: Vec<bool>,
    /// `S_0 = 0 < S_1 < …`.
    pub arrival_epochs: Vec<f64>,
    /// `U(T_k−)`; `z` at `T_0`.
    pub durations: Vec<f64>,
    /// `F(T_k)`.
    pub fluid: Vec<f64>,
    /// `∫_0^{T_k} σ(J(s)) ds`.
    pub dividend_integral: Vec<f64>,
    /// Jump costs accumulated over arrivals up to and including `T_k`.
    pub jump_costs: Vec<f64>,
    pub seed: u64,
    pub index: u64,
}

impl PathRecord {
    pub fn len(&self) -> usize {
        self.poisson_epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poisson_epochs.is_empty()
    }

    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        writeln!(w, "epoch,time,state,arrival_flag,duration,fluid,dividend_acc,cost_acc")?;
        for k in 0..self.len() {
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                k,
                fmt_f64(self.poisson_epochs[k]),
                self.states[k],
                u8::from(self.arrival_flags[k]),
                fmt_f64(self.durations[k]),
                fmt_f64(self.fluid[k]),
                fmt_f64(self.dividend_integral[k]),
                fmt_f64(self.jump_costs[k]),
            )?;
        }
        Ok(())
    }
}

/// Simulates one path on `[0, horizon)` started with duration `z` and `J(0) ~ α`.
pub fn simulate_path(model: &FluidModel, z: f64, horizon: f64, seed: u64, index: u64) -> Result<PathRecord> {
    if !(horizon > 0.0) || !(z >= 0.0) {
        return Err(Error::Precondition("need horizon > 0 and z >= 0".into()));
    }
    let mut rng = stream(seed, index);
    let j0 = draw_initial(model, &mut rng, false)?;
    let mut w = Walker::new(model, z, j0, rng);
    let mut rec = PathRecord {
        poisson_epochs: vec![0.0],
        states: vec![j0],
        arrival_flags: vec![false],
        arrival_epochs: vec![0.0],
        durations: vec![z],
        fluid: vec![0.0],
        dividend_integral: vec![0.0],
        jump_costs: vec![0.0],
        seed,
        index,
    };
    loop {
        let ep = w.step()?;
        if w.time >= horizon {
            break;
        }
        rec.poisson_epochs.push(w.time);
        rec.states.push(ep.to);
        rec.arrival_flags.push(ep.arrival);
        if ep.arrival {
            rec.arrival_epochs.push(w.time);
        }
        rec.durations.push(ep.duration);
        rec.fluid.push(w.fluid);
        rec.dividend_integral.push(w.dividend);
        rec.jump_costs.push(w.cost);
    }
    Ok(rec)
}

/// Outcome of a first-return run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ReturnOutcome {
    pub returned: bool,
    /// `J(T_n−)` at the return epoch.
    pub exit_state: usize,
    /// `exp(−θ₁∫σ − θ₂Σk)` on return, zero when censored.
    pub weight: f64,
    /// Number of Poisson epochs used.
    pub n_used: usize,
    /// `F(T_n) − F(0)` at the return epoch.
    pub level: f64,
    /// `U(T_n−)` at the return epoch.
    pub duration: f64,
}

/// Runs until `F(T_n) ≤ F(0) − barrier_offset`, or until `max_epochs`.
///
/// `start` must lie in `S⁺`. `offset` is the initial height above the barrier (zero for first return).
#[allow(clippy::too_many_arguments)]
pub fn run_to_barrier(
    model: &FluidModel,
    z: f64,
    start: usize,
    offset: f64,
    theta1: f64,
    theta2: f64,
    max_epochs: usize,
    rng: ChaCha8Rng,
) -> Result<ReturnOutcome> {
    if !model.space.is_plus(start) {
        return Err(Error::Precondition(format!(
            "start state {start} is in S-: the first return is immediate and degenerate"
        )));
    }
    let mut w = Walker::new(model, z, start, rng);
    w.fluid = offset;
    for n in 1..=max_epochs {
        let cost_before = w.cost;
        let ep = w.step()?;
        if w.fluid <= 0.0 {
            return Ok(ReturnOutcome {
                returned: true,
                exit_state: ep.from,
                weight: (-theta1 * w.dividend - theta2 * cost_before).exp(),
                n_used: n,
                level: w.fluid - offset,
                duration: ep.duration,
            });
        }
    }
    Ok(ReturnOutcome { returned: false, exit_state: start, weight: 0.0, n_used: max_epochs, level: w.fluid - offset, duration: w.duration })
}

/// First return of `F` to or below `F(0)` from `J(0) = start ∈ S⁺`.
#[allow(clippy::too_many_arguments)]
pub fn simulate_until_return(
    model: &FluidModel,
    z: f64,
    start: usize,
    theta1: f64,
    theta2: f64,
    max_epochs: usize,
    seed: u64,
    index: u64,
) -> Result<ReturnOutcome> {
    if max_epochs < 2 {
        return Err(Error::Precondition("max_epochs must be at least 2".into()));
    }
    run_to_barrier(model, z, start, 0.0, theta1, theta2, max_epochs, stream(seed, index))
}
