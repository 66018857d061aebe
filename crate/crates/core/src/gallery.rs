//! Reference models used by the tests, the acceptance suite and the CLI.

use crate::config::ModelConfig;
use crate::model::{FluidModel, Hazard, KernelRepr};

fn constant(c: [[f64; 2]; 2], d: [[f64; 2]; 2]) -> KernelRepr {
    KernelRepr::Constant { c: c.iter().map(|r| r.to_vec()).collect(), d: d.iter().map(|r| r.to_vec()).collect() }
}

/// Two-state homogeneous model: `r = (1, -1)`, `C = [[-1, .9], [.8, -1]]`, `D = diag(.1, .2)`, `γ = 1`.
pub fn model_a() -> ModelConfig {
    ModelConfig {
        name: Some("model-a".into()),
        states: vec![1.0, -1.0],
        sigma: None,
        cost_matrix: None,
        alpha: vec![1.0, 0.0],
        kernel: constant([[-1.0, 0.9], [0.8, -1.0]], [[0.1, 0.0], [0.0, 0.2]]),
        gamma: Some(1.0),
    }
}

/// MODEL-A with a dividend in the positive state and costs on arrivals.
pub fn model_a_priced() -> ModelConfig {
    ModelConfig {
        name: Some("model-a-priced".into()),
        sigma: Some(vec![0.5, 0.0]),
        cost_matrix: Some(vec![vec![0.3, 0.0], vec![0.0, 0.2]]),
        ..model_a()
    }
}

/// Markov-modulated Poisson process with `Λ = [[-1, 1], [1, -1]]`, `v = (0.5, 0.2)`.
pub fn mmpp() -> ModelConfig {
    ModelConfig {
        name: Some("mmpp".into()),
        states: vec![1.0, -1.0],
        sigma: None,
        cost_matrix: None,
        alpha: vec![0.5, 0.5],
        kernel: constant([[-1.5, 1.0], [1.0, -1.2]], [[0.5, 0.0], [0.0, 0.2]]),
        gamma: Some(1.5),
    }
}

/// Renewal process with phase-type interarrivals `(π, T)`, `D = (-T1)π`.
pub fn renewal_ph() -> ModelConfig {
    let pi = [0.6, 0.4, 0.0];
    let t = [[-2.0, 1.0, 0.0], [0.0, -1.5, 0.5], [0.5, 0.0, -1.0]];
    let exit: Vec<f64> = t.iter().map(|row| -row.iter().sum::<f64>()).collect();
    let d = (0..3).map(|i| (0..3).map(|j| exit[i] * pi[j]).collect()).collect();
    ModelConfig {
        name: Some("renewal-ph".into()),
        states: vec![1.0, 0.5, -2.0],
        sigma: Some(vec![0.2, 0.1, 0.0]),
        cost_matrix: None,
        alpha: pi.to_vec(),
        kernel: KernelRepr::Constant { c: t.iter().map(|r| r.to_vec()).collect(), d },
        gamma: Some(2.0),
    }
}

/// Renewal process with Pareto-hazard interarrivals (IPH with `C(v) = diag(-h_i(v))`, `D(v) = (-C(v)1)α`).
pub fn pareto_renewal() -> ModelConfig {
    let alpha = vec![0.6, 0.4];
    ModelConfig {
        name: Some("pareto-renewal".into()),
        states: vec![1.0, -1.5],
        sigma: None,
        cost_matrix: None,
        alpha: alpha.clone(),
        kernel: KernelRepr::Hazard {
            hazards: vec![Hazard::Pareto { a: 3.0, b: 2.0 }, Hazard::Pareto { a: 2.5, b: 1.0 }],
            jump: vec![vec![0.0; 2]; 2],
            arrival: vec![alpha.clone(), alpha],
        },
        gamma: None,
    }
}

/// Markov-renewal jump process with mixed hazards and routing matrix.
pub fn markov_renewal() -> ModelConfig {
    ModelConfig {
        name: Some("markov-renewal".into()),
        states: vec![2.0, -1.0, -0.5],
        sigma: Some(vec![0.4, 0.0, 0.0]),
        cost_matrix: Some(vec![vec![0.0, 0.5, 0.2], vec![0.1, 0.0, 0.3], vec![0.4, 0.2, 0.0]]),
        alpha: vec![1.0, 0.0, 0.0],
        kernel: KernelRepr::Hazard {
            hazards: vec![
                Hazard::Weibull { shape: 1.5, scale: 1.0, cap: 3.0 },
                Hazard::Constant { rate: 1.0 },
                Hazard::Pareto { a: 2.0, b: 1.0 },
            ],
            jump: vec![vec![0.0; 3]; 3],
            arrival: vec![vec![0.0, 0.7, 0.3], vec![0.8, 0.0, 0.2], vec![0.6, 0.4, 0.0]],
        },
        gamma: None,
    }
}

/// Calendar-time inhomogeneous two-state chain: piecewise-constant `C`, no arrivals.
pub fn calendar() -> ModelConfig {
    let gen = |a: f64, b: f64| vec![vec![-a, a], vec![b, -b]];
    let zero = vec![vec![0.0; 2]; 2];
    ModelConfig {
        name: Some("calendar".into()),
        states: vec![1.0, -1.0],
        sigma: None,
        cost_matrix: None,
        alpha: vec![1.0, 0.0],
        kernel: KernelRepr::PiecewiseConstant {
            breakpoints: vec![2.0, 4.0],
            c: vec![gen(1.0, 0.5), gen(0.4, 1.2), gen(0.8, 0.8)],
            d: vec![zero.clone(), zero.clone(), zero],
        },
        gamma: Some(1.2),
    }
}

/// Every gallery config with its name.
pub fn all() -> Vec<ModelConfig> {
    vec![model_a(), model_a_priced(), mmpp(), renewal_ph(), pareto_renewal(), markov_renewal(), calendar()]
}

pub fn by_name(name: &str) -> Option<ModelConfig> {
    all().into_iter().find(|c| c.name.as_deref() == Some(name))
}

/// Builds a gallery config; gallery entries are valid by construction.
pub fn build(cfg: &ModelConfig) -> FluidModel {
    cfg.build().expect("gallery model is valid")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{default_samples, validate_model};

    #[test]
    fn every_gallery_model_validates() {
        for cfg in all() {
            let m = build(&cfg);
            let rep = validate_model(&m, &default_samples(&m.kernel, 20.0)).unwrap();
            assert!(rep.passed(), "{:?}: {rep:?}", cfg.name);
        }
    }
}
