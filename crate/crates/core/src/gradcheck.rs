//! Central finite-difference check of every training objective in f64.
//!
//! The objectives are the ones the trainer differentiates
//! ([`basis_objective`] and [`composer_objective`]), each isolated by a
//! weight set with a single non-zero λ.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bases::{CapabilityBasisSet, CapabilityConfig};
use crate::composer::{ComposerConfig, ComposerParams};
use crate::error::{Error, Result};
use crate::losses::{CcaCoefficients, LossWeights};
use crate::model::{BaseModel, ModelConfig, TokenSequence};
use crate::rng::{substream, Stream};
use crate::tensor::Tensor;
use crate::trainer::{basis_objective, composer_objective, BasisItem};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub capability: CapabilityConfig,
    pub composer_hidden: usize,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 11,
            model: ModelConfig::with_dims(16, 8, 1, 2, 16, 16),
            capability: CapabilityConfig {
                num_bases: 2,
                rank: 1,
                top_m: 2,
            },
            composer_hidden: 6,
            step: 1e-4,
            rel_tol: 1e-4,
            abs_tol: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckRow {
    pub term: String,
    /// `phi` (bases) or `psi` (composer).
    pub params: String,
    pub coordinates: usize,
    pub max_abs_error: f64,
    /// Largest relative error among coordinates above the absolute floor.
    pub max_rel_error: f64,
    pub passed: bool,
}

fn only(f: impl FnOnce(&mut LossWeights)) -> LossWeights {
    let mut w = LossWeights::zero();
    f(&mut w);
    w
}

fn random_tensor(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Tensor<f64> {
    let n = Normal::new(0.0, std).expect("positive std");
    Tensor::from_fn(rows, cols, |_, _| n.sample(&mut *rng))
}

fn compare(
    term: &str,
    params: &str,
    analytic: &[f64],
    numeric: &[f64],
    cfg: &GradcheckConfig,
) -> GradcheckRow {
    let mut max_abs: f64 = 0.0;
    let mut max_rel: f64 = 0.0;
    let mut passed = true;
    for (&a, &n) in analytic.iter().zip(numeric) {
        let abs = (a - n).abs();
        max_abs = max_abs.max(abs);
        if abs > cfg.abs_tol {
            let rel = abs / a.abs().max(n.abs());
            max_rel = max_rel.max(rel);
            if rel > cfg.rel_tol {
                passed = false;
            }
        }
    }
    GradcheckRow {
        term: term.to_string(),
        params: params.to_string(),
        coordinates: analytic.len(),
        max_abs_error: max_abs,
        max_rel_error: max_rel,
        passed,
    }
}

fn flatten(grads: &[Option<Tensor<f64>>], shapes: &[(usize, usize)]) -> Vec<f64> {
    grads
        .iter()
        .zip(shapes)
        .flat_map(|(g, &(r, c))| match g {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; r * c],
        })
        .collect()
}

/// Runs every term and returns one row per term.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<Vec<GradcheckRow>> {
    cfg.model.validate()?;
    cfg.capability.validate()?;
    if !(cfg.step > 0.0) {
        return Err(Error::Config("finite-difference step must be positive".into()));
    }
    let mut rng = substream(cfg.seed, Stream::Init);
    let base = BaseModel::<f64>::init(cfg.model.clone(), &mut rng)?;
    let mut bases = CapabilityBasisSet::<f64>::init(&cfg.model, cfg.capability.clone(), &mut rng)?;
    // V starts at zero in training; randomize it so every coordinate matters.
    bases.visit_mut(|i, t| {
        if i % 3 == 1 {
            *t = random_tensor(t.rows(), t.cols(), 0.5, &mut rng);
        }
        if i % 3 == 2 {
            t.data_mut()[0] = rng.random_range(-1.0..0.0);
        }
    });
    let composer_cfg = ComposerConfig {
        hidden: cfg.composer_hidden,
        ..Default::default()
    };
    let mut composer = ComposerParams::<f64>::init(cfg.model.d_model, cfg.capability.num_bases, composer_cfg, &mut rng)?;
    for t in composer.tensors_mut() {
        *t = random_tensor(t.rows(), t.cols(), 0.3, &mut rng);
    }

    let v = cfg.model.vocab_size;
    let mut seq = |len: usize, prompt: usize| {
        let ids = (0..len).map(|_| rng.random_range(0..v)).collect();
        TokenSequence::new(ids, prompt, &cfg.model)
    };
    let pos = [seq(7, 3)?, seq(6, 2)?];
    let neg = [seq(7, 4)?, seq(5, 2)?];
    let k = cfg.capability.num_bases;
    let alpha: Vec<f64> = (0..k).map(|i| (i + 1) as f64).collect();
    let s: f64 = alpha.iter().sum();
    let items = [BasisItem {
        alpha: alpha.iter().map(|a| a / s).collect(),
        positives: pos.iter().collect(),
        negatives: neg.iter().collect(),
    }];
    let tau = 0.5;

    let mut rows = Vec::new();
    let phi_shapes: Vec<(usize, usize)> = bases.named_tensors().iter().map(|(_, t)| t.shape()).collect();
    for (term, w) in [
        ("L_MR", only(|w| w.mr = 1.0)),
        ("L_NCE", only(|w| w.nce = 1.0)),
        ("L_ortho", only(|w| w.ortho = 1.0)),
        ("total", LossWeights::default()),
    ] {
        let (_, g) = basis_objective(&base, &bases, &items, tau, &w)?;
        let analytic = flatten(&g, &phi_shapes);
        let mut numeric = Vec::with_capacity(analytic.len());
        let total = analytic.len();
        for idx in 0..total {
            let eval = |delta: f64| -> Result<f64> {
                let mut p = bases.clone();
                perturb_bases(&mut p, idx, delta);
                let (v, _) = basis_objective(&base, &p, &items, tau, &w)?;
                Ok(w.mr * v.mr + w.nce * v.nce + w.ortho * v.ortho)
            };
            numeric.push((eval(cfg.step)? - eval(-cfg.step)?) / (2.0 * cfg.step));
        }
        rows.push(compare(term, "phi", &analytic, &numeric, cfg));
    }

    let zs: Vec<Tensor<f64>> = (0..3).map(|_| random_tensor(1, cfg.model.d_model, 1.0, &mut rng)).collect();
    let z_refs: Vec<&Tensor<f64>> = zs.iter().collect();
    let coeffs: Vec<CcaCoefficients> = (0..3)
        .map(|_| CcaCoefficients {
            on_log_alpha: (0..k).map(|_| rng.random_range(-1.0..1.0)).collect(),
            on_alpha: (0..k).map(|_| rng.random_range(0.0..1.0)).collect(),
        })
        .collect();
    let psi_shapes: Vec<(usize, usize)> = composer.named_tensors().iter().map(|(_, t)| t.shape()).collect();
    for (term, w) in [
        ("L_CCA", only(|w| {
            w.cca = 1.0;
            w.dead = 0.1;
        })),
        ("L_ent", only(|w| w.ent = 1.0)),
        ("L_bal", only(|w| w.bal = 1.0)),
        ("L_temp", only(|w| w.temp = 1.0)),
        ("total", LossWeights::default()),
    ] {
        let (_, g) = composer_objective(&composer, &z_refs, &coeffs, &w)?;
        let analytic = flatten(&g, &psi_shapes);
        let mut numeric = Vec::with_capacity(analytic.len());
        for idx in 0..analytic.len() {
            let eval = |delta: f64| -> Result<f64> {
                let mut p = composer.clone();
                perturb_composer(&mut p, idx, delta);
                let (v, _) = composer_objective(&p, &z_refs, &coeffs, &w)?;
                Ok(w.cca * (v.cca + w.dead * v.dead) + w.ent * v.ent + w.bal * v.bal + w.temp * v.temp)
            };
            numeric.push((eval(cfg.step)? - eval(-cfg.step)?) / (2.0 * cfg.step));
        }
        rows.push(compare(term, "psi", &analytic, &numeric, cfg));
    }
    Ok(rows)
}

fn perturb_bases(p: &mut CapabilityBasisSet<f64>, mut idx: usize, delta: f64) {
    p.visit_mut(|_, t| {
        if idx < t.len() {
            t.data_mut()[idx] += delta;
            idx = usize::MAX;
        } else if idx != usize::MAX {
            idx -= t.len();
        }
    });
}

fn perturb_composer(p: &mut ComposerParams<f64>, mut idx: usize, delta: f64) {
    for t in p.tensors_mut() {
        if idx < t.len() {
            t.data_mut()[idx] += delta;
            return;
        }
        idx -= t.len();
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_term_matches_finite_differences() {
        let rows = run_gradcheck(&GradcheckConfig::default()).unwrap();
        assert_eq!(rows.len(), 9);
        for r in &rows {
            assert!(r.coordinates > 0);
            assert!(r.passed, "{r:?}");
        }
    }
}
