use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use anyhow::Context;
use clap::{Args, Parser, Subcommand, ValueEnum};
use fluidrisk::bridge::{bridge_recursion, DurationTail, LevelDurationGrid, ResumOptions};
use fluidrisk::descriptors::{finite_time_return, psi, ruin_descriptor, ruin_grid, DescriptorResult, PsiMethod, PsiOptions};
use fluidrisk::kolmogorov::{default_step, survival_matrix, IphLaw};
use fluidrisk::model::{default_samples, validate_model};
use fluidrisk::oracle::{mc_bridge_histogram, mc_finite_time_return, mc_first_return, mc_ruin, McEstimate};
use fluidrisk::sim::{fmt_f64, simulate_path};
use fluidrisk::{Error, FluidModel, ModelConfig};
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

#[derive(Parser, Debug)]
#[command(name = "fluidrisk", version, about = "Fluid revenue processes driven by duration-dependent MArPs")]
struct Cli {
    /// Worker threads; defaults to all cores.
    #[arg(long, global = true, env = "FLUIDRISK_THREADS")]
    threads: Option<usize>,
    /// Directory for CSV, JSON and manifest output.
    #[arg(long, global = true, default_value = ".")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Check the structural and numerical consistency of a model.
    Validate {
        config: PathBuf,
        /// Largest duration sampled by the checks.
        #[arg(long, default_value_t = 50.0)]
        u_max: f64,
    },
    /// Simulate paths on the Poisson grid.
    Simulate {
        config: PathBuf,
        #[arg(long, default_value_t = 10.0)]
        horizon: f64,
        #[arg(long, default_value_t = 0.0)]
        z: f64,
        #[arg(long, default_value_t = 1)]
        paths: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Survival matrix G(s, t).
    Gmatrix {
        config: PathBuf,
        #[arg(long, default_value_t = 0.0)]
        s: f64,
        #[arg(long)]
        t: f64,
        #[arg(long)]
        step: Option<f64>,
    },
    /// Density and CDF of the n-th inter-arrival time.
    Density {
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        n: usize,
        /// Comma-separated evaluation points.
        #[arg(long, value_delimiter = ',', required = true)]
        y: Vec<f64>,
        #[arg(long)]
        step: Option<f64>,
    },
    /// Integrated n-bridge masses per order.
    Bridge {
        config: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long, default_value_t = 8)]
        n_max: usize,
        #[arg(long, default_value_t = 0.0)]
        theta1: f64,
        #[arg(long, default_value_t = 0.0)]
        theta2: f64,
        #[arg(long, default_value_t = 0.0)]
        z: f64,
        /// Write the full tensor in the binary layout documented in the library.
        #[arg(long)]
        dump: Option<PathBuf>,
    },
    /// First-return Laplace transform matrix.
    FirstReturn {
        config: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        series: SeriesArgs,
        #[arg(long, default_value_t = 0.0)]
        theta1: f64,
        #[arg(long, default_value_t = 0.0)]
        theta2: f64,
        #[arg(long, default_value_t = 0.0)]
        z: f64,
    },
    /// Probability of a first return by calendar time t (models without arrivals).
    FiniteTime {
        config: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        #[arg(long)]
        t: f64,
        #[arg(long, default_value_t = 0.0)]
        z: f64,
        /// Series order; chosen from the tail bound when absent.
        #[arg(long)]
        m_max: Option<usize>,
        #[arg(long, default_value_t = 1e-8)]
        eps: f64,
    },
    /// Ruin descriptor by Erlangization of the initial level.
    Ruin {
        config: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        series: SeriesArgs,
        #[arg(long)]
        u: f64,
        #[arg(long, default_value_t = 16)]
        n_stages: usize,
        /// Entry state in S+, as an index into the model's states.
        #[arg(long)]
        i0: Option<usize>,
        #[arg(long, default_value_t = 0.0)]
        theta1: f64,
        #[arg(long, default_value_t = 0.0)]
        theta2: f64,
    },
    /// Monte Carlo counterparts of the analytic commands.
    Mc {
        #[command(subcommand)]
        target: McTarget,
    },
    /// Compare analytic descriptors with Monte Carlo.
    ConvergenceStudy {
        config: PathBuf,
        #[command(flatten)]
        grid: GridArgs,
        #[command(flatten)]
        series: SeriesArgs,
        #[command(flatten)]
        mc: McArgs,
        #[arg(long, value_enum, default_value_t = Study::FirstReturn)]
        kind: Study,
        #[arg(long, default_value_t = 0.0)]
        theta1: f64,
        #[arg(long, default_value_t = 0.0)]
        theta2: f64,
        #[arg(long, default_value_t = 1.0)]
        u: f64,
        #[arg(long, value_delimiter = ',', default_value = "1,4,16")]
        n_stages: Vec<usize>,
    },
}

#[derive(Subcommand, Debug)]
enum McTarget {
    FirstReturn {
        config: PathBuf,
        #[command(flatten)]
        mc: McArgs,
        #[arg(long, default_value_t = 0.0)]
        theta1: f64,
        #[arg(long, default_value_t = 0.0)]
        theta2: f64,
        #[arg(long, default_value_t = 0.0)]
        z: f64,
    },
    Ruin {
        config: PathBuf,
        #[command(flatten)]
        mc: McArgs,
        #[arg(long)]
        u: f64,
        #[arg(long, default_value_t = 0.0)]
        theta1: f64,
        #[arg(long, default_value_t = 0.0)]
        theta2: f64,
        #[arg(long, default_value_t = 0.0)]
        z: f64,
    },
    FiniteTime {
        config: PathBuf,
        #[command(flatten)]
        mc: McArgs,
        #[arg(long)]
        t: f64,
        #[arg(long, default_value_t = 0.0)]
        z: f64,
    },
    Bridge {
        config: PathBuf,
        #[command(flatten)]
        mc: McArgs,
        #[arg(long, default_value_t = 2)]
        n: usize,
        #[arg(long, default_value_t = 0.0)]
        z: f64,
        #[arg(long, default_value_t = 0.0)]
        theta1: f64,
        #[arg(long, default_value_t = 0.0)]
        theta2: f64,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum Study {
    FirstReturn,
    Ruin,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
enum Tail {
    Drop,
    Freeze,
}

#[derive(ValueEnum, Clone, Copy, Debug, Serialize)]
#[serde(rename_all = "snake_case")]
enum Method {
    Resummed,
    Direct,
}

#[derive(Args, Debug, Clone, Serialize)]
struct GridArgs {
    /// Duration cells; default 64.
    #[arg(long)]
    cells_u: Option<usize>,
    /// Level cells per sign; default 64.
    #[arg(long)]
    cells_l: Option<usize>,
    /// Duration window; default 8/γ.
    #[arg(long)]
    u_max: Option<f64>,
    /// Level window; default 2 max|r| U_max.
    #[arg(long)]
    l_max: Option<f64>,
    #[arg(long, value_enum, default_value_t = Tail::Freeze)]
    tail: Tail,
}

impl GridArgs {
    fn build(&self, base: LevelDurationGrid) -> Result<LevelDurationGrid, Error> {
        LevelDurationGrid::new(
            self.cells_u.unwrap_or(base.m),
            self.cells_l.unwrap_or(base.q),
            self.u_max.unwrap_or(base.u_max),
            self.l_max.unwrap_or(base.l_max),
            match self.tail {
                Tail::Drop => DurationTail::Drop,
                Tail::Freeze => DurationTail::Freeze,
            },
        )
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct SeriesArgs {
    #[arg(long, value_enum, default_value_t = Method::Resummed)]
    method: Method,
    /// Highest bridge order for the direct series.
    #[arg(long, default_value_t = 8)]
    n_max: usize,
    #[arg(long, default_value_t = 1e-5)]
    eps_tail: f64,
    /// Iteration cap for the resummed series.
    #[arg(long, default_value_t = 400)]
    max_iter: usize,
}

impl SeriesArgs {
    fn options(&self) -> PsiOptions {
        PsiOptions {
            method: match self.method {
                Method::Resummed => PsiMethod::Resummed,
                Method::Direct => PsiMethod::Direct,
            },
            n_max: self.n_max,
            eps_tail: self.eps_tail,
            resum: ResumOptions { max_iter: self.max_iter, ..ResumOptions::default() },
        }
    }
}

#[derive(Args, Debug, Clone, Serialize)]
struct McArgs {
    /// Paths per start state.
    #[arg(long, default_value_t = 100_000)]
    paths: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 10_000)]
    max_epochs: usize,
}

#[derive(Serialize)]
struct RunManifest {
    command: String,
    argv: Vec<String>,
    config: Option<String>,
    config_sha256: Option<String>,
    parameters: Value,
    seed: Option<u64>,
    version: &'static str,
    started_unix: u64,
    wall_clock_seconds: f64,
    exit_code: u8,
}

/// Result of one command before the manifest is written.
struct Outcome {
    name: &'static str,
    config: Option<PathBuf>,
    parameters: Value,
    seed: Option<u64>,
    code: u8,
}

fn exit_code(e: &anyhow::Error) -> u8 {
    match e.downcast_ref::<Error>() {
        Some(Error::NotConverged { .. }) => 3,
        Some(Error::NonFinite(_)) => 1,
        Some(_) => 2,
        None => 1,
    }
}

fn load(path: &Path) -> anyhow::Result<(FluidModel, String)> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let text = String::from_utf8(bytes.clone()).map_err(|e| Error::Config(format!("config is not UTF-8: {e}")))?;
    let cfg = ModelConfig::from_json(&text)?;
    let model = cfg.build()?;
    Ok((model, hex::encode(Sha256::digest(&bytes))))
}

fn write(dir: &Path, name: &str, body: &str) -> anyhow::Result<()> {
    fs::create_dir_all(dir)?;
    let path = dir.join(name);
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))?;
    eprintln!("wrote {}", path.display());
    Ok(())
}

fn descriptor_csv(model: &FluidModel, r: &DescriptorResult, rows: &[usize]) -> String {
    let mut out = String::from("i,j,value,n_used,tail_estimate\n");
    for (a, &i) in rows.iter().enumerate() {
        for (b, &j) in model.space.minus().iter().enumerate() {
            out += &format!("{i},{j},{},{},{}\n", fmt_f64(r.matrix[(a, b)]), r.n_used, fmt_f64(r.tail_estimate));
        }
    }
    out
}

fn mc_csv(model: &FluidModel, e: &McEstimate) -> String {
    let mut out = String::from("i,j,value,std_error,n_paths,censored_fraction\n");
    for (a, &i) in model.space.plus().iter().enumerate() {
        for (b, &j) in model.space.minus().iter().enumerate() {
            out += &format!(
                "{i},{j},{},{},{},{}\n",
                fmt_f64(e.value[(a, b)]),
                fmt_f64(e.std_error[(a, b)]),
                e.n_paths,
                fmt_f64(e.censored_fraction)
            );
        }
    }
    out
}

fn converged_code(converged: bool) -> u8 {
    if converged {
        0
    } else {
        eprintln!("warning: the series did not converge");
        3
    }
}

fn run(cli: &Cli) -> anyhow::Result<Outcome> {
    let dir = &cli.out_dir;
    match &cli.command {
        Command::Validate { config, u_max } => {
            let (model, _) = load(config)?;
            let report = validate_model(&model, &default_samples(&model.kernel, *u_max))?;
            write(dir, "validate.json", &serde_json::to_string_pretty(&report)?)?;
            for f in report.failures() {
                eprintln!("check failed: {} {:?}", f.name, f.worst);
            }
            Ok(Outcome {
                name: "validate",
                config: Some(config.clone()),
                parameters: json!({ "u_max": u_max }),
                seed: None,
                code: if report.passed() { 0 } else { 2 },
            })
        }
        Command::Simulate { config, horizon, z, paths, seed } => {
            let (model, _) = load(config)?;
            let sub = dir.join("paths");
            fs::create_dir_all(&sub)?;
            for index in 0..*paths {
                let rec = simulate_path(&model, *z, *horizon, *seed, index)?;
                let mut buf = Vec::new();
                rec.write_csv(&mut buf)?;
                fs::write(sub.join(format!("path_{index:06}.csv")), buf)?;
            }
            eprintln!("wrote {paths} paths to {}", sub.display());
            Ok(Outcome {
                name: "simulate",
                config: Some(config.clone()),
                parameters: json!({ "horizon": horizon, "z": z, "paths": paths }),
                seed: Some(*seed),
                code: 0,
            })
        }
        Command::Gmatrix { config, s, t, step } => {
            let (model, _) = load(config)?;
            let step = step.unwrap_or_else(|| default_step(&model.kernel));
            let g = survival_matrix(&model.kernel, *s, *t, step)?;
            let mut out = String::from("i,j,value\n");
            for i in 0..model.p() {
                for j in 0..model.p() {
                    out += &format!("{i},{j},{}\n", fmt_f64(g.g[(i, j)]));
                }
            }
            write(dir, "gmatrix.csv", &out)?;
            Ok(Outcome {
                name: "gmatrix",
                config: Some(config.clone()),
                parameters: json!({ "s": s, "t": t, "step": step, "error_estimate": g.error_estimate }),
                seed: None,
                code: 0,
            })
        }
        Command::Density { config, n, y, step } => {
            let (model, _) = load(config)?;
            let step = step.unwrap_or_else(|| default_step(&model.kernel));
            let law = IphLaw::new(&model, *n, step, None)?;
            let mut ys = y.clone();
            ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let cdf = law.cdf_sorted(&ys)?;
            let mut out = String::from("y,density,cdf\n");
            for (y, c) in ys.iter().zip(&cdf) {
                out += &format!("{},{},{}\n", fmt_f64(*y), fmt_f64(law.density(*y)?), fmt_f64(*c));
            }
            write(dir, "density.csv", &out)?;
            Ok(Outcome {
                name: "density",
                config: Some(config.clone()),
                parameters: json!({ "n": n, "step": step, "mass": law.mass(), "truncation": law.truncation }),
                seed: None,
                code: 0,
            })
        }
        Command::Bridge { config, grid, n_max, theta1, theta2, z, dump } => {
            let (model, _) = load(config)?;
            let g = grid.build(LevelDurationGrid::for_model(&model))?;
            let tensor = bridge_recursion(&model, &g, *theta1, *theta2, *n_max)?;
            let mut out = String::from("n,i,j,value,boundary_mass,clamped,duration_tail_bound\n");
            for n in 2..=*n_max {
                let l = tensor.integrate(n, *z)?;
                let d = &tensor.diagnostics[n - 2];
                for (a, &i) in model.space.plus().iter().enumerate() {
                    for (b, &j) in model.space.minus().iter().enumerate() {
                        out += &format!(
                            "{n},{i},{j},{},{},{},{}\n",
                            fmt_f64(l[(a, b)]),
                            fmt_f64(d.boundary_mass),
                            fmt_f64(d.clamped),
                            fmt_f64(d.duration_tail_bound)
                        );
                    }
                }
                if d.clamp_flagged() {
                    eprintln!("warning: order {n} clamped a negative value of {:e}", d.clamped);
                }
            }
            write(dir, "bridge.csv", &out)?;
            if let Some(path) = dump {
                let f = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
                tensor.write_binary(std::io::BufWriter::new(f))?;
            }
            Ok(Outcome {
                name: "bridge",
                config: Some(config.clone()),
                parameters: json!({ "grid": g, "n_max": n_max, "theta1": theta1, "theta2": theta2, "z": z }),
                seed: None,
                code: 0,
            })
        }
        Command::FirstReturn { config, grid, series, theta1, theta2, z } => {
            let (model, _) = load(config)?;
            let g = grid.build(LevelDurationGrid::for_model(&model))?;
            let r = psi(&model, *z, *theta1, *theta2, &g, &series.options())?;
            write(dir, "first-return.csv", &descriptor_csv(&model, &r, model.space.plus()))?;
            write(dir, "first-return.json", &serde_json::to_string_pretty(&json!({ "grid": g, "result": r }))?)?;
            Ok(Outcome {
                name: "first-return",
                config: Some(config.clone()),
                parameters: json!({ "grid": g, "series": series, "theta1": theta1, "theta2": theta2, "z": z }),
                seed: None,
                code: converged_code(r.converged),
            })
        }
        Command::FiniteTime { config, grid, t, z, m_max, eps } => {
            let (model, _) = load(config)?;
            let g = grid.build(LevelDurationGrid::for_model(&model))?;
            let r = finite_time_return(&model, *z, *t, &g, *m_max, *eps)?;
            write(dir, "finite-time.csv", &descriptor_csv(&model, &r.result, model.space.plus()))?;
            write(dir, "finite-time.json", &serde_json::to_string_pretty(&json!({ "grid": g, "result": r }))?)?;
            if !r.poisson_check {
                eprintln!("warning: an increment exceeded P(T_m <= t)");
            }
            Ok(Outcome {
                name: "finite-time",
                config: Some(config.clone()),
                parameters: json!({ "grid": g, "t": t, "z": z, "m_max": m_max, "eps": eps }),
                seed: None,
                code: converged_code(r.result.converged),
            })
        }
        Command::Ruin { config, grid, series, u, n_stages, i0, theta1, theta2 } => {
            let (model, _) = load(config)?;
            let i0 = i0.unwrap_or(model.space.plus()[0]);
            let g = grid.build(ruin_grid(&model, *u))?;
            let r = ruin_descriptor(&model, *u, *n_stages, i0, *theta1, *theta2, &g, &series.options())?;
            write(dir, "ruin.csv", &descriptor_csv(&model, &r, &[i0]))?;
            write(dir, "ruin.json", &serde_json::to_string_pretty(&json!({ "grid": g, "result": r }))?)?;
            Ok(Outcome {
                name: "ruin",
                config: Some(config.clone()),
                parameters: json!({ "grid": g, "series": series, "u": u, "n_stages": n_stages, "i0": i0,
                    "theta1": theta1, "theta2": theta2 }),
                seed: None,
                code: converged_code(r.converged),
            })
        }
        Command::Mc { target } => run_mc(dir, target),
        Command::ConvergenceStudy { config, grid, series, mc, kind, theta1, theta2, u, n_stages } => {
            let (model, _) = load(config)?;
            let mut out = String::from("label,i,j,analytic,mc,std_error,z_score\n");
            let mut inside = true;
            let mut converged = true;
            let mut push = |label: String, rows: &[usize], an: &DescriptorResult, e: &McEstimate, row0: usize| {
                for (a, &i) in rows.iter().enumerate() {
                    for (b, &j) in model.space.minus().iter().enumerate() {
                        let (x, v, se) = (an.matrix[(a, b)], e.value[(row0 + a, b)], e.std_error[(row0 + a, b)]);
                        let zs = if se > 0.0 { (x - v) / se } else if x == v { 0.0 } else { f64::INFINITY };
                        inside &= zs.abs() <= 3.0;
                        out += &format!("{label},{i},{j},{},{},{},{}\n", fmt_f64(x), fmt_f64(v), fmt_f64(se), fmt_f64(zs));
                    }
                }
                converged &= an.converged;
            };
            match kind {
                Study::FirstReturn => {
                    let g = grid.build(LevelDurationGrid::for_model(&model))?;
                    let an = psi(&model, 0.0, *theta1, *theta2, &g, &series.options())?;
                    let e = mc_first_return(&model, 0.0, *theta1, *theta2, mc.paths, mc.max_epochs, mc.seed)?;
                    push("first-return".into(), model.space.plus(), &an, &e, 0);
                }
                Study::Ruin => {
                    let i0 = model.space.plus()[0];
                    let e = mc_ruin(&model, *u, 0.0, *theta1, *theta2, mc.paths, mc.max_epochs, mc.seed)?;
                    let g = grid.build(ruin_grid(&model, *u))?;
                    for &n in n_stages {
                        let an = ruin_descriptor(&model, *u, n, i0, *theta1, *theta2, &g, &series.options())?;
                        push(format!("n_stages={n}"), &[i0], &an, &e, 0);
                    }
                }
            }
            write(dir, "convergence-study.csv", &out)?;
            Ok(Outcome {
                name: "convergence-study",
                config: Some(config.clone()),
                parameters: json!({ "kind": format!("{kind:?}"), "series": series, "mc": mc, "theta1": theta1,
                    "theta2": theta2, "u": u, "n_stages": n_stages }),
                seed: Some(mc.seed),
                code: if !converged {
                    3
                } else if inside {
                    0
                } else {
                    eprintln!("analytic value outside the Monte Carlo 3-SE band");
                    1
                },
            })
        }
    }
}

fn run_mc(dir: &Path, target: &McTarget) -> anyhow::Result<Outcome> {
    let (name, config, mc, est, params): (&'static str, &PathBuf, &McArgs, McEstimate, Value) = match target {
        McTarget::FirstReturn { config, mc, theta1, theta2, z } => {
            let (model, _) = load(config)?;
            let e = mc_first_return(&model, *z, *theta1, *theta2, mc.paths, mc.max_epochs, mc.seed)?;
            write(dir, "mc-first-return.csv", &mc_csv(&model, &e))?;
            ("mc first-return", config, mc, e, json!({ "theta1": theta1, "theta2": theta2, "z": z }))
        }
        McTarget::Ruin { config, mc, u, theta1, theta2, z } => {
            let (model, _) = load(config)?;
            let e = mc_ruin(&model, *u, *z, *theta1, *theta2, mc.paths, mc.max_epochs, mc.seed)?;
            write(dir, "mc-ruin.csv", &mc_csv(&model, &e))?;
            ("mc ruin", config, mc, e, json!({ "u": u, "theta1": theta1, "theta2": theta2, "z": z }))
        }
        McTarget::FiniteTime { config, mc, t, z } => {
            let (model, _) = load(config)?;
            let e = mc_finite_time_return(&model, *z, *t, mc.paths, mc.seed)?;
            write(dir, "mc-finite-time.csv", &mc_csv(&model, &e))?;
            ("mc finite-time", config, mc, e, json!({ "t": t, "z": z }))
        }
        McTarget::Bridge { config, mc, n, z, theta1, theta2 } => {
            let (model, _) = load(config)?;
            let g = LevelDurationGrid::for_model(&model);
            let s_edges: Vec<f64> = (0..=g.m).map(|k| g.node(k)).collect();
            let l_edges: Vec<f64> = (0..=2 * g.q).map(|c| g.level_edge(c)).collect();
            let h = mc_bridge_histogram(&model, *z, *n, &s_edges, &l_edges, *theta1, *theta2, mc.paths, mc.seed)?;
            write(dir, "mc-bridge.csv", &mc_csv(&model, &h.total))?;
            let mut bins = String::from("i,j,s_lo,s_hi,l_lo,l_hi,frequency\n");
            let (ns, nl, pn) = (s_edges.len() - 1, l_edges.len() - 1, model.space.minus().len());
            for (a, &i) in model.space.plus().iter().enumerate() {
                for (b, &j) in model.space.minus().iter().enumerate() {
                    for s in 0..ns {
                        for l in 0..nl {
                            let f = h.freq[((a * pn + b) * ns + s) * nl + l];
                            if f > 0.0 {
                                bins += &format!(
                                    "{i},{j},{},{},{},{},{}\n",
                                    fmt_f64(s_edges[s]),
                                    fmt_f64(s_edges[s + 1]),
                                    fmt_f64(l_edges[l]),
                                    fmt_f64(l_edges[l + 1]),
                                    fmt_f64(f)
                                );
                            }
                        }
                    }
                }
            }
            write(dir, "mc-bridge-bins.csv", &bins)?;
            ("mc bridge", config, mc, h.total, json!({ "n": n, "z": z, "theta1": theta1, "theta2": theta2,
                "outside": h.outside }))
        }
    };
    if let Some(w) = &est.warning {
        eprintln!("warning: {w}");
    }
    Ok(Outcome {
        name,
        config: Some(config.clone()),
        parameters: json!({ "mc": mc, "target": params, "censored_fraction": est.censored_fraction }),
        seed: Some(mc.seed),
        code: 0,
    })
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    }
    let started = SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0);
    let clock = Instant::now();
    let outcome = match run(&cli) {
        Ok(o) => o,
        Err(e) => {
            eprintln!("error: {e:#}");
            return ExitCode::from(exit_code(&e));
        }
    };
    let config_sha256 = outcome.config.as_ref().and_then(|p| fs::read(p).ok()).map(|b| hex::encode(Sha256::digest(&b)));
    let manifest = RunManifest {
        command: outcome.name.to_string(),
        argv: std::env::args().collect(),
        config: outcome.config.as_ref().map(|p| p.display().to_string()),
        config_sha256,
        parameters: outcome.parameters,
        seed: outcome.seed,
        version: env!("CARGO_PKG_VERSION"),
        started_unix: started,
        wall_clock_seconds: clock.elapsed().as_secs_f64(),
        exit_code: outcome.code,
    };
    let file = format!("{}.manifest.json", outcome.name.replace(' ', "-"));
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    if let Err(e) = write(&cli.out_dir, &file, &body) {
        eprintln!("error: {e:#}");
        return ExitCode::from(1);
    }
    ExitCode::from(outcome.code)
}
