//! Training objectives.
//!
//! Each term has a plain `f64` form, used for reporting and closed-form
//! checks, and an on-tape form used for gradients. The two are tested
//! against each other.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::bases::{sparse_topm, CapabilityBasisSet};
use crate::composer::{entropy, RouteVars, RoutingDecision};
use crate::error::{Error, Result};
use crate::model::{sequence_log_likelihood, BaseModel, SiteId, TokenSequence};
use crate::tape::{Tape, Var};
use crate::tensor::{log_sum_exp, Real, Tensor};

/// `−log Σ exp(ℓ)` over the successes.
pub fn multi_reference_loss(scores: &[f64]) -> Result<f64> {
    if scores.is_empty() {
        return Err(Error::Contract("multi-reference loss needs at least one success".into()));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::numerical("L_MR", format!("non-finite score {s}")));
    }
    Ok(-log_sum_exp(scores))
}

/// `−(1/|P|) Σ_{p∈P} log softmax_τ(ℓ)[p]` over the task-local group.
pub fn group_nce_loss(positives: &[f64], negatives: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(Error::Config(format!("NCE temperature τ = {tau} must be positive")));
    }
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Contract("group NCE needs at least one success and one failure".into()));
    }
    let all: Vec<f64> = positives.iter().chain(negatives).map(|&s| s / tau).collect();
    let lse = log_sum_exp(&all);
    let mean_pos = positives.iter().map(|&s| s / tau).sum::<f64>() / positives.len() as f64;
    Ok(lse - mean_pos)
}

/// `α^(−k) ∝ α ⊙ (1 − e_k)`
pub fn counterfactual_mask(alpha: &[f64], k: usize) -> Result<Vec<f64>> {
    if k >= alpha.len() {
        return Err(Error::Config(format!("basis {k} out of range for {} bases", alpha.len())));
    }
    if alpha[k] == 0.0 {
        return Ok(alpha.to_vec());
    }
    let rest: f64 = alpha.iter().enumerate().filter(|&(i, _)| i != k).map(|(_, a)| a).sum();
    if rest <= 0.0 {
        return Err(Error::Degenerate(format!("masking basis {k} leaves no routing mass")));
    }
    Ok(alpha
        .iter()
        .enumerate()
        .map(|(i, &a)| if i == k { 0.0 } else { a / rest })
        .collect())
}

/// `−E[H(α)]`
pub fn entropy_reg(alphas: &[Vec<f64>]) -> f64 {
    if alphas.is_empty() {
        return 0.0;
    }
    -alphas.iter().map(|a| entropy(a)).sum::<f64>() / alphas.len() as f64
}

/// Jensen–Shannon divergence (natural log) between the batch-mean routing
/// and the uniform distribution.
pub fn balance_reg(alphas: &[Vec<f64>]) -> Result<f64> {
    let Some(first) = alphas.first() else {
        return Err(Error::Contract("balance term needs a non-empty batch".into()));
    };
    let k = first.len();
    let n = alphas.len() as f64;
    let mean: Vec<f64> = (0..k).map(|j| alphas.iter().map(|a| a[j]).sum::<f64>() / n).collect();
    let u = 1.0 / k as f64;
    let mut js = 0.0;
    for &p in &mean {
        let m = 0.5 * (p + u);
        if p > 0.0 {
            js += 0.5 * p * (p / m).ln();
        }
        js += 0.5 * u * (u / m).ln();
    }
    Ok(js)
}

/// `E[(ln T − ln T0)²] = E[Δt²]`
pub fn temperature_reg(delta_ts: &[f64]) -> f64 {
    if delta_ts.is_empty() {
        return 0.0;
    }
    delta_ts.iter().map(|d| d * d).sum::<f64>() / delta_ts.len() as f64
}

/// Per-basis marginal contributions of one workflow under one routing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionReport {
    pub task_id: String,
    /// `sgn(s) = 2s − 1`
    pub sign: f64,
    pub main_score: f64,
    /// `ℓ^(−k)`; `None` for bases not evaluated by a forward pass.
    pub counterfactual_scores: Vec<Option<f64>>,
    /// `Δ_k = ℓ_main − ℓ^(−k)`, exactly 0 where not evaluated.
    pub deltas: Vec<f64>,
    /// The attribution scope 𝒦.
    pub evaluated: Vec<usize>,
    /// Centered and clipped `Δ` over `evaluated`, aligned with it.
    pub centered: Vec<f64>,
    pub center_offset: f64,
    /// Clip bound applied after centering, if any.
    pub clip: Option<f64>,
}

/// Which bases to attribute.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AttributionScope {
    /// The top-m active set.
    #[default]
    Active,
    /// All K bases; inactive ones contribute `Δ = 0`.
    All,
}

fn score_under<T: Real>(
    base: &BaseModel<T>,
    bases: &CapabilityBasisSet<T>,
    alpha: &[f64],
    seq: &TokenSequence,
) -> Result<f64> {
    let weights: BTreeMap<SiteId, Tensor<T>> = bases.compose(base, alpha)?;
    let logits = base.forward_logits(&weights, seq.ids())?;
    let l = sequence_log_likelihood(&logits, seq)?.as_f64();
    if !l.is_finite() {
        return Err(Error::numerical("log-likelihood", "non-finite sequence score"));
    }
    Ok(l)
}

/// ℓ of a sequence under the top-m composition of `alpha`.
pub fn composed_score<T: Real>(
    base: &BaseModel<T>,
    bases: &CapabilityBasisSet<T>,
    alpha: &[f64],
    top_m: usize,
    seq: &TokenSequence,
) -> Result<f64> {
    score_under(base, bases, &sparse_topm(alpha, top_m)?, seq)
}

/// `Δ_k = ℓ_main − ℓ^(−k)` where the counterfactual composes
/// `top-m(α^(−k))`. Exactly zero, with no forward pass, for `k` outside the
/// active set.
pub fn marginal_contribution<T: Real>(
    base: &BaseModel<T>,
    bases: &CapabilityBasisSet<T>,
    seq: &TokenSequence,
    decision: &RoutingDecision,
    k: usize,
) -> Result<f64> {
    if !decision.active_set.contains(&k) {
        return Ok(0.0);
    }
    let main = composed_score(base, bases, &decision.alpha, decision.top_m, seq)?;
    let cf = composed_score(base, bases, &counterfactual_mask(&decision.alpha, k)?, decision.top_m, seq)?;
    Ok(main - cf)
}

/// Δ over the attribution scope, sharing the main forward. Centering is left
/// to the caller.
pub fn attribute<T: Real>(
    task_id: &str,
    base: &BaseModel<T>,
    bases: &CapabilityBasisSet<T>,
    seq: &TokenSequence,
    score: f64,
    decision: &RoutingDecision,
    scope: AttributionScope,
) -> Result<AttributionReport> {
    let kk = decision.alpha.len();
    let main = composed_score(base, bases, &decision.alpha, decision.top_m, seq)?;
    let evaluated: Vec<usize> = match scope {
        AttributionScope::Active => decision.active_set.clone(),
        AttributionScope::All => (0..kk).collect(),
    };
    let mut cf_scores = vec![None; kk];
    let mut deltas = vec![0.0; kk];
    for &k in &evaluated {
        if !decision.active_set.contains(&k) {
            continue;
        }
        let masked = counterfactual_mask(&decision.alpha, k)?;
        let cf = composed_score(base, bases, &masked, decision.top_m, seq)?;
        cf_scores[k] = Some(cf);
        deltas[k] = main - cf;
    }
    Ok(AttributionReport {
        task_id: task_id.to_string(),
        sign: 2.0 * score - 1.0,
        main_score: main,
        counterfactual_scores: cf_scores,
        deltas,
        evaluated,
        centered: Vec::new(),
        center_offset: 0.0,
        clip: None,
    })
}

/// The two parts of the composer objective, as plain values.
///
/// `policy = −E[Σ_{k∈𝒦} sgn(s) Δ̃_k log α_k]` with `Δ̃` the centered, clipped
/// contributions, and `dead = E[Σ_{k∈𝒦} α_k max(0, γ − |Δ_k|)/γ]` with the raw
/// contributions. `alphas[i]` is the composer's (non-detached) routing for
/// report `i`.
pub fn cca_loss(reports: &[AttributionReport], alphas: &[&[f64]], gamma: f64) -> Result<(f64, f64)> {
    if reports.len() != alphas.len() {
        return Err(Error::Contract(format!(
            "{} attribution reports paired with {} routing decisions",
            reports.len(),
            alphas.len()
        )));
    }
    if !(gamma > 0.0) {
        return Err(Error::Config(format!("dead-basis margin γ = {gamma} must be positive")));
    }
    if reports.is_empty() {
        return Ok((0.0, 0.0));
    }
    let (mut policy, mut dead) = (0.0, 0.0);
    for (r, alpha) in reports.iter().zip(alphas) {
        for (i, &k) in r.evaluated.iter().enumerate() {
            let centered = r.centered.get(i).copied().unwrap_or(r.deltas[k]);
            if alpha[k] > 0.0 {
                policy -= r.sign * centered * alpha[k].ln();
            }
            dead += alpha[k] * (gamma - r.deltas[k].abs()).max(0.0) / gamma;
        }
    }
    let n = reports.len() as f64;
    Ok((policy / n, dead / n))
}

/// Per-basis coefficients of the composer objective for one routed task:
/// `policy = Σ_k a_k log α_k` and `dead = Σ_k b_k α_k`, already divided by
/// the batch sample count `n`.
#[derive(Clone, Debug, PartialEq)]
pub struct CcaCoefficients {
    pub on_log_alpha: Vec<f64>,
    pub on_alpha: Vec<f64>,
}

impl CcaCoefficients {
    pub fn from_reports(reports: &[&AttributionReport], k: usize, gamma: f64, n: usize) -> Self {
        let mut a = vec![0.0; k];
        let mut b = vec![0.0; k];
        for r in reports {
            for (i, &j) in r.evaluated.iter().enumerate() {
                let centered = r.centered.get(i).copied().unwrap_or(r.deltas[j]);
                a[j] -= r.sign * centered;
                b[j] += (gamma - r.deltas[j].abs()).max(0.0) / gamma;
            }
        }
        let n = n.max(1) as f64;
        Self {
            on_log_alpha: a.into_iter().map(|x| x / n).collect(),
            on_alpha: b.into_iter().map(|x| x / n).collect(),
        }
    }
}

/// On-tape losses.
pub mod tape_ops {
    use super::*;

    /// `−logsumexp(ℓ)`
    pub fn multi_reference<T: Real>(tape: &mut Tape<T>, scores: &[Var]) -> Result<Var> {
        if scores.is_empty() {
            return Err(Error::Contract("multi-reference loss needs at least one success".into()));
        }
        let s = tape.stack(scores);
        let lse = tape.log_sum_exp(s);
        Ok(tape.scale(lse, -T::one()))
    }

    /// `logsumexp(ℓ/τ) − mean_P(ℓ/τ)`
    pub fn group_nce<T: Real>(tape: &mut Tape<T>, pos: &[Var], neg: &[Var], tau: f64) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Config(format!("NCE temperature τ = {tau} must be positive")));
        }
        if pos.is_empty() || neg.is_empty() {
            return Err(Error::Contract("group NCE needs at least one success and one failure".into()));
        }
        let inv = T::lit(1.0 / tau);
        let all: Vec<Var> = pos.iter().chain(neg).copied().collect();
        let all = tape.stack(&all);
        let all = tape.scale(all, inv);
        let lse = tape.log_sum_exp(all);
        let p = tape.stack(pos);
        let p = tape.scale(p, inv);
        let mp = tape.mean(p);
        Ok(tape.sub(lse, mp))
    }

    /// `(policy, dead)` from per-task coefficients.
    pub fn cca<T: Real>(tape: &mut Tape<T>, routes: &[(RouteVars, CcaCoefficients)]) -> (Var, Var) {
        let mut pol = Vec::new();
        let mut dead = Vec::new();
        for (r, c) in routes {
            let a = tape.constant(Tensor::row_vector(c.on_log_alpha.iter().map(|&x| T::lit(x)).collect()));
            let p = tape.mul(r.log_alpha, a);
            pol.push(tape.sum(p));
            let b = tape.constant(Tensor::row_vector(c.on_alpha.iter().map(|&x| T::lit(x)).collect()));
            let d = tape.mul(r.alpha, b);
            dead.push(tape.sum(d));
        }
        let zero = tape.constant(Tensor::scalar(T::zero()));
        let sum = |tape: &mut Tape<T>, v: &[Var]| {
            if v.is_empty() {
                zero
            } else {
                let s = tape.stack(v);
                tape.sum(s)
            }
        };
        (sum(tape, &pol), sum(tape, &dead))
    }

    /// `−E[H(α)] = E[Σ α log α]`
    pub fn entropy<T: Real>(tape: &mut Tape<T>, routes: &[RouteVars]) -> Var {
        let terms: Vec<Var> = routes
            .iter()
            .map(|r| {
                let p = tape.mul(r.alpha, r.log_alpha);
                tape.sum(p)
            })
            .collect();
        let s = tape.stack(&terms);
        tape.mean(s)
    }

    /// JS(mean α ‖ uniform)
    pub fn balance<T: Real>(tape: &mut Tape<T>, routes: &[RouteVars]) -> Var {
        let rows: Vec<Var> = routes.iter().map(|r| r.alpha).collect();
        let k = tape.value(rows[0]).cols();
        let mut mean = rows[0];
        for &r in &rows[1..] {
            mean = tape.add(mean, r);
        }
        let mean = tape.scale(mean, T::lit(1.0 / rows.len() as f64));
        let u = T::lit(1.0 / k as f64);
        let half_mean = tape.scale(mean, T::lit(0.5));
        let mix = tape.add_scalar(half_mean, u * T::lit(0.5));
        let log_mix = tape.ln(mix);
        // p ln p → 0 as p → 0; the floor keeps an underflowed entry finite.
        let floored = tape.add_scalar(mean, T::lit(1e-30));
        let log_mean = tape.ln(floored);
        // ½ Σ p (ln p − ln m) + ½ Σ u (ln u − ln m)
        let d1 = tape.sub(log_mean, log_mix);
        let t1 = tape.mul(mean, d1);
        let t1 = tape.sum(t1);
        let neg_log_mix = tape.scale(log_mix, -u);
        let t2 = tape.sum(neg_log_mix);
        let t2 = tape.add_scalar(t2, T::lit(k as f64) * u * u.ln());
        let both = tape.add(t1, t2);
        tape.scale(both, T::lit(0.5))
    }

    /// `E[Δt²]`
    pub fn temperature<T: Real>(tape: &mut Tape<T>, routes: &[RouteVars]) -> Var {
        let dts: Vec<Var> = routes.iter().map(|r| r.delta_t).collect();
        let s = tape.stack(&dts);
        let sq = tape.mul(s, s);
        tape.mean(sq)
    }
}

/// λ weights of the full objective.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub mr: f64,
    pub nce: f64,
    pub cca: f64,
    /// Applied inside the CCA term.
    pub dead: f64,
    pub ortho: f64,
    pub ent: f64,
    pub bal: f64,
    pub temp: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            mr: 1.0,
            nce: 0.5,
            cca: 1.0,
            dead: 0.1,
            ortho: 0.01,
            ent: 0.01,
            bal: 0.01,
            temp: 1.0,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            mr: 0.0,
            nce: 0.0,
            cca: 0.0,
            dead: 0.0,
            ortho: 0.0,
            ent: 0.0,
            bal: 0.0,
            temp: 0.0,
        }
    }
}

/// Component values of one step. `ent` holds `−E[H]`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mr: f64,
    pub nce: f64,
    pub cca: f64,
    pub dead: f64,
    pub ortho: f64,
    pub ent: f64,
    pub bal: f64,
    pub temp: f64,
    pub total: f64,
}

impl LossBreakdown {
    fn components(&self) -> [(&'static str, f64); 8] {
        [
            ("L_MR", self.mr),
            ("L_NCE", self.nce),
            ("L_CCA", self.cca),
            ("L_dead", self.dead),
            ("L_ortho", self.ortho),
            ("L_ent", self.ent),
            ("L_bal", self.bal),
            ("L_temp", self.temp),
        ]
    }
}

/// `λ_MR L_MR + λ_NCE L_NCE + λ_CCA (L_CCA + λ_dead L_dead) + λ_ortho L_ortho
/// + λ_ent L_ent + λ_bal L_bal + λ_temp L_temp`
pub fn total_objective(b: &LossBreakdown, w: &LossWeights) -> Result<f64> {
    for (name, v) in b.components() {
        if !v.is_finite() {
            return Err(Error::numerical(name, format!("component is {v}")));
        }
    }
    Ok(w.mr * b.mr
        + w.nce * b.nce
        + w.cca * (b.cca + w.dead * b.dead)
        + w.ortho * b.ortho
        + w.ent * b.ent
        + w.bal * b.bal
        + w.temp * b.temp)
}

/// Fills `total` after validating the components.
pub fn finalize(mut b: LossBreakdown, w: &LossWeights) -> Result<LossBreakdown> {
    b.total = total_objective(&b, w)?;
    Ok(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::composer::{ComposerConfig, ComposerParams};
    use crate::rng::{substream, Stream};
    use rand::Rng;

    #[test]
    fn mr_examples() {
        assert_eq!(multi_reference_loss(&[-2.0]).unwrap(), 2.0);
        assert!((multi_reference_loss(&[-2.0, -2.0]).unwrap() - (2.0 - 2f64.ln())).abs() < 1e-12);
        assert!(matches!(multi_reference_loss(&[]), Err(Error::Contract(_))));
    }

    #[test]
    fn nce_examples() {
        for tau in [0.1, 0.5, 3.0] {
            assert!((group_nce_loss(&[-1.0], &[-1.0, -1.0], tau).unwrap() - 3f64.ln()).abs() < 1e-12);
        }
        assert!(group_nce_loss(&[0.0], &[-1e4], 0.5).unwrap() < 1e-12);
        let a = group_nce_loss(&[-1.0, -2.0], &[-1.5], 0.5).unwrap();
        let b = group_nce_loss(&[2.0, 1.0], &[1.5], 0.5).unwrap();
        assert!((a - b).abs() < 1e-12);
        assert!(matches!(group_nce_loss(&[-1.0], &[-1.0], 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn mask_examples() {
        let m = counterfactual_mask(&[0.5, 0.3, 0.2], 1).unwrap();
        assert!((m[0] - 5.0 / 7.0).abs() < 1e-12 && m[1] == 0.0 && (m[2] - 2.0 / 7.0).abs() < 1e-12);
        let m2 = counterfactual_mask(&[0.5, 0.3, 0.2], 2).unwrap();
        assert!((m2[0] - 0.625).abs() < 1e-12 && (m2[1] - 0.375).abs() < 1e-12 && m2[2] == 0.0);
        assert_eq!(counterfactual_mask(&[0.5, 0.0, 0.5], 1).unwrap(), vec![0.5, 0.0, 0.5]);
        assert_eq!(counterfactual_mask(&m, 1).unwrap(), m);
        assert!(matches!(counterfactual_mask(&[0.0, 1.0], 1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn regularizer_examples() {
        assert!((entropy_reg(&[vec![0.125; 8]]) + 8f64.ln()).abs() < 1e-12);
        assert_eq!(entropy_reg(&[vec![1.0, 0.0]]), 0.0);
        // m = [3/4, 1/4]: ½ ln(4/3) + ¼ ln(2/3) + ¼ ln 2 = 1.5 ln 2 − 0.75 ln 3
        let js = balance_reg(&[vec![1.0, 0.0]]).unwrap();
        assert!((js - (1.5 * 2f64.ln() - 0.75 * 3f64.ln())).abs() < 1e-12);
        assert!(balance_reg(&[vec![0.25; 4]]).unwrap().abs() < 1e-15);
        assert_eq!(temperature_reg(&[1.0]), 1.0);
        assert_eq!(temperature_reg(&[-0.5]), temperature_reg(&[0.5]));
    }

    fn report(deltas: Vec<f64>, evaluated: Vec<usize>, sign: f64) -> AttributionReport {
        AttributionReport {
            task_id: "t".into(),
            sign,
            main_score: -1.0,
            counterfactual_scores: vec![None; deltas.len()],
            centered: evaluated.iter().map(|&k| deltas[k]).collect(),
            deltas,
            evaluated,
            center_offset: 0.0,
            clip: Some(1.0),
        }
    }

    #[test]
    fn cca_dead_arithmetic() {
        let r = report(vec![0.0, 0.0, 0.0], vec![0, 1], 1.0);
        let alpha = [0.2, 0.5, 0.3];
        let (pol, dead) = cca_loss(&[r.clone()], &[&alpha], 0.01).unwrap();
        assert_eq!(pol, 0.0);
        assert!((dead - 0.7).abs() < 1e-12);
        let r2 = report(vec![0.0, 0.0, 0.0], vec![0], 1.0);
        assert!((cca_loss(&[r2], &[&alpha], 0.01).unwrap().1 - 0.2).abs() < 1e-12);
        assert!(matches!(cca_loss(&[r], &[], 0.01), Err(Error::Contract(_))));
    }

    #[test]
    fn tape_forms_match_values() {
        let mut rng = substream(5, Stream::Init);
        let mut c = ComposerParams::<f64>::init(4, 3, ComposerConfig::default(), &mut rng).unwrap();
        for t in c.tensors_mut() {
            for x in t.data_mut() {
                *x = rng.random::<f64>() - 0.5;
            }
        }
        let zs: Vec<Vec<f64>> = (0..3).map(|i| (0..4).map(|j| ((i * 4 + j) as f64).cos()).collect()).collect();
        let mut tape = Tape::new();
        let b = c.bind(&mut tape, true);
        let mut routes = Vec::new();
        let mut alphas = Vec::new();
        let mut dts = Vec::new();
        for z in &zs {
            let zv = tape.constant(Tensor::row_vector(z.clone()));
            routes.push(c.route_tape(&mut tape, &b, zv));
            let d = c.route(z, 2).unwrap();
            alphas.push(d.alpha);
            dts.push(d.delta_t);
        }
        let e = tape_ops::entropy(&mut tape, &routes);
        assert!((tape.scalar(e) - entropy_reg(&alphas)).abs() < 1e-12);
        let bal = tape_ops::balance(&mut tape, &routes);
        assert!((tape.scalar(bal) - balance_reg(&alphas).unwrap()).abs() < 1e-12);
        let t = tape_ops::temperature(&mut tape, &routes);
        assert!((tape.scalar(t) - temperature_reg(&dts)).abs() < 1e-12);

        let reps = [
            report(vec![0.3, -0.001, 0.0], vec![0, 1], 1.0),
            report(vec![0.0, 0.2, -0.4], vec![1, 2], -1.0),
            report(vec![0.005, 0.0, 0.1], vec![0, 2], 0.2),
        ];
        let refs: Vec<&[f64]> = alphas.iter().map(|a| a.as_slice()).collect();
        let (pol, dead) = cca_loss(&reps, &refs, 0.01).unwrap();
        let coeffs: Vec<_> = routes
            .iter()
            .zip(&reps)
            .map(|(r, rep)| (*r, CcaCoefficients::from_reports(&[rep], 3, 0.01, reps.len())))
            .collect();
        let (tp, td) = tape_ops::cca(&mut tape, &coeffs);
        assert!((tape.scalar(tp) - pol).abs() < 1e-12);
        assert!((tape.scalar(td) - dead).abs() < 1e-12);

        let s: Vec<Var> = [-1.0, -2.5, -0.7].iter().map(|&x| tape.param(Tensor::scalar(x))).collect();
        let mr = tape_ops::multi_reference(&mut tape, &s[..2]).unwrap();
        assert!((tape.scalar(mr) - multi_reference_loss(&[-1.0, -2.5]).unwrap()).abs() < 1e-12);
        let nce = tape_ops::group_nce(&mut tape, &s[..2], &s[2..], 0.5).unwrap();
        assert!((tape.scalar(nce) - group_nce_loss(&[-1.0, -2.5], &[-0.7], 0.5).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn total_weighting() {
        let b = LossBreakdown {
            mr: 2.0,
            nce: 1.0,
            cca: 0.3,
            ..Default::default()
        };
        let w = LossWeights {
            mr: 1.0,
            nce: 0.5,
            cca: 1.0,
            dead: 0.1,
            ..LossWeights::zero()
        };
        assert!((total_objective(&b, &w).unwrap() - 2.8).abs() < 1e-12);
        assert_eq!(total_objective(&b, &LossWeights::zero()).unwrap(), 0.0);
        let bad = LossBreakdown { nce: f64::NAN, ..b };
        let err = total_objective(&bad, &w).unwrap_err().to_string();
        assert!(err.contains("L_NCE"), "{err}");
    }
}
