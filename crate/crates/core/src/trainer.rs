//! Two-timescale training of the capability bases and the composer.
//!
//! Every step draws task-local groups, routes each task once, applies basis
//! dropout, and updates Φ on the likelihood objectives with the routing held
//! constant. Every `attribution_interval` steps (step 0 included) the
//! updated bases are probed counterfactually and ψ is updated on the
//! attribution objective and the routing regularizers.

use std::collections::BTreeMap;

use log::warn;
use rand::seq::index;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bases::{CapabilityBasisSet, CapabilityConfig};
use crate::checkpoint::{CapabilityModel, Checkpoint, TrainSnapshot};
use crate::composer::{basis_dropout, detach_for_generation, ComposerConfig, ComposerParams, RoutingDecision};
use crate::error::{Error, Result};
use crate::losses::{
    attribute, balance_reg, entropy_reg, finalize, tape_ops, temperature_reg, AttributionReport, AttributionScope,
    CcaCoefficients, LossBreakdown, LossWeights,
};
use crate::model::{sequence_log_likelihood_tape, BaseModel, TokenSequence};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{substream, RngState, Stream};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::workflow::tokenizer::Tokenizer;
use crate::workflow::{Domain, TaskRecord};
use crate::FORMAT_VERSION;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingConfig {
    pub seed: u64,
    pub epochs: usize,
    /// Task groups per step.
    pub batch_tasks: usize,
    pub b_pos: usize,
    pub b_neg: usize,
    pub lr_bases: f64,
    pub lr_composer: f64,
    /// E: the composer is updated when `step % E == 0`.
    pub attribution_interval: u64,
    pub clip_delta: f64,
    pub p_drop: f64,
    /// NCE temperature τ.
    pub tau: f64,
    /// Dead-basis margin γ.
    pub gamma: f64,
    pub capability: CapabilityConfig,
    pub composer: ComposerConfig,
    pub weights: LossWeights,
    /// λ_ent falls linearly from `weights.ent` to zero over this fraction of
    /// all steps; λ_bal is switched off at the same point.
    pub ent_decay_fraction: f64,
    pub attribution_scope: AttributionScope,
    /// Records per task group probed counterfactually; all when unset.
    pub attribution_samples: Option<usize>,
    pub adam: AdamConfig,
    pub reproducible: bool,
    /// Stops early after this many steps in total.
    pub max_steps: Option<u64>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            epochs: 35,
            batch_tasks: 4,
            b_pos: 2,
            b_neg: 2,
            lr_bases: 2e-4,
            lr_composer: 3e-4,
            attribution_interval: 4,
            clip_delta: 1.0,
            p_drop: 0.1,
            tau: 0.5,
            gamma: 0.01,
            capability: CapabilityConfig::default(),
            composer: ComposerConfig::default(),
            weights: LossWeights::default(),
            ent_decay_fraction: 0.5,
            attribution_scope: AttributionScope::Active,
            attribution_samples: None,
            adam: AdamConfig::default(),
            reproducible: true,
            max_steps: None,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        self.capability.validate()?;
        self.composer.validate()?;
        if self.attribution_interval == 0 {
            return fail("attribution_interval E must be at least 1".into());
        }
        for (name, lr) in [("lr_bases", self.lr_bases), ("lr_composer", self.lr_composer)] {
            if !(lr > 0.0 && lr.is_finite()) {
                return fail(format!("{name} = {lr} must be positive"));
            }
        }
        if !(self.clip_delta > 0.0) {
            return fail(format!("clip_delta = {} must be positive", self.clip_delta));
        }
        if !(0.0..1.0).contains(&self.p_drop) {
            return fail(format!("p_drop = {} must lie in [0, 1)", self.p_drop));
        }
        if !(self.tau > 0.0) || !(self.gamma > 0.0) {
            return fail("tau and gamma must be positive".into());
        }
        if self.batch_tasks == 0 || self.b_pos == 0 || self.b_neg == 0 {
            return fail("batch_tasks, b_pos and b_neg must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.ent_decay_fraction) {
            return fail("ent_decay_fraction must lie in [0, 1]".into());
        }
        if self.attribution_samples == Some(0) {
            return fail("attribution_samples must be positive when set".into());
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, num_tasks: usize) -> u64 {
        num_tasks.div_ceil(self.batch_tasks) as u64
    }

    pub fn total_steps(&self, num_tasks: usize) -> u64 {
        let full = self.steps_per_epoch(num_tasks) * self.epochs as u64;
        self.max_steps.map_or(full, |m| m.min(full))
    }

    pub fn is_composer_step(&self, step: u64) -> bool {
        step % self.attribution_interval == 0
    }

    /// The λ set in force at `step` of `total`.
    pub fn scheduled_weights(&self, step: u64, total: u64) -> LossWeights {
        let horizon = self.ent_decay_fraction * total as f64;
        let ent = if horizon > 0.0 {
            self.weights.ent * (1.0 - step as f64 / horizon).max(0.0)
        } else {
            0.0
        };
        LossWeights {
            ent,
            bal: if ent > 0.0 { self.weights.bal } else { 0.0 },
            ..self.weights.clone()
        }
    }
}

/// Training position stored in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainState {
    pub config: TrainingConfig,
    pub step: u64,
    pub total_steps: u64,
    /// Multiplier on `lr_bases`, halved after a failed basis step.
    pub lr_scale: f64,
    pub batching_rng: RngState,
    pub dropout_rng: RngState,
    pub bases_adam_t: u64,
    pub composer_adam_t: u64,
    pub train_tasks: usize,
}

/// Records of one task drawn for a step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskGroup {
    pub task: usize,
    pub task_id: String,
    /// Indices into the task's workflows.
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Draws one task uniformly, then up to `b_pos` successes and `b_neg`
/// failures of it. `None`, with a warning, when the task lacks a class.
pub fn build_task_batch(tasks: &[TaskRecord], b_pos: usize, b_neg: usize, rng: &mut impl Rng) -> Option<TaskGroup> {
    if tasks.is_empty() {
        return None;
    }
    let t = rng.random_range(0..tasks.len());
    group_for_task(tasks, t, b_pos, b_neg, rng)
}

fn group_for_task(tasks: &[TaskRecord], t: usize, b_pos: usize, b_neg: usize, rng: &mut impl Rng) -> Option<TaskGroup> {
    let task = &tasks[t];
    let (succ, fail): (Vec<usize>, Vec<usize>) = (0..task.workflows.len()).partition(|&i| task.workflows[i].is_success());
    if succ.is_empty() || fail.is_empty() {
        warn!("task {} lacks a success or a failure; skipped", task.task_id);
        return None;
    }
    let mut pick = |pool: &[usize], k: usize| {
        let mut chosen: Vec<usize> = index::sample(rng, pool.len(), k.min(pool.len())).into_iter().map(|i| pool[i]).collect();
        chosen.sort_unstable();
        chosen
    };
    Some(TaskGroup {
        task: t,
        task_id: task.task_id.clone(),
        positives: pick(&succ, b_pos),
        negatives: pick(&fail, b_neg),
    })
}

/// Subtracts the mean, then clamps to `[-clip, clip]`.
pub fn center_and_clip(deltas: &[f64], clip: f64) -> Vec<f64> {
    if deltas.is_empty() {
        return Vec::new();
    }
    let mean = deltas.iter().sum::<f64>() / deltas.len() as f64;
    deltas.iter().map(|d| (d - mean).clamp(-clip, clip)).collect()
}

fn center_report(r: &mut AttributionReport, clip: f64) {
    let raw: Vec<f64> = r.evaluated.iter().map(|&k| r.deltas[k]).collect();
    r.center_offset = if raw.is_empty() { 0.0 } else { raw.iter().sum::<f64>() / raw.len() as f64 };
    r.centered = center_and_clip(&raw, clip);
    r.clip = Some(clip);
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogEntry {
    pub format_version: u32,
    pub step: u64,
    pub epoch: u64,
    pub task_ids: Vec<String>,
    pub loss: LossBreakdown,
    pub lambda_ent: f64,
    pub lambda_bal: f64,
    pub lr_bases: f64,
    pub temperature_mean: f64,
    pub active_sets: Vec<Vec<usize>>,
    pub composer_update: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingLogEntry {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<u64>,
    pub task_id: String,
    /// Metadata for per-domain analyses.
    pub domain: Domain,
    pub alpha: Vec<f64>,
    #[serde(rename = "T")]
    pub temperature: f64,
    pub active_set: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub log: TrainLogEntry,
    pub routing: Vec<RoutingLogEntry>,
    pub reports: Vec<AttributionReport>,
}

/// Values of the basis-step objectives, averaged over task groups.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct BasisStepLoss {
    pub mr: f64,
    pub nce: f64,
    pub ortho: f64,
}

/// Values of the composer objectives before the update.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ComposerStepLoss {
    pub cca: f64,
    pub dead: f64,
    pub ent: f64,
    pub bal: f64,
    pub temp: f64,
    pub reports: Vec<AttributionReport>,
}

/// A routed task group: the composer's decision and the detached routing
/// actually used after dropout.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutedGroup {
    pub group: TaskGroup,
    pub decision: RoutingDecision,
    pub used: RoutingDecision,
}

/// One routed task for [`basis_objective`].
pub struct BasisItem<'a> {
    /// Composition weights, held constant.
    pub alpha: Vec<f64>,
    pub positives: Vec<&'a TokenSequence>,
    pub negatives: Vec<&'a TokenSequence>,
}

fn at_step(e: Error, step: u64) -> Error {
    match e {
        Error::Numerical { term, detail } => Error::Numerical {
            term,
            detail: format!("{detail} at step {step}"),
        },
        e => e,
    }
}

fn weighted_sum<T: Real>(tape: &mut Tape<T>, parts: &[(Var, f64)]) -> Var {
    let weighted: Vec<Var> = parts.iter().map(|&(v, l)| tape.scale(v, T::lit(l))).collect();
    let all = tape.stack(&weighted);
    tape.sum(all)
}

/// `λ_MR L_MR + λ_NCE L_NCE + λ_ortho L_ortho` and its gradient with
/// respect to Φ, in [`CapabilityBasisSet::named_tensors`] order. MR and NCE
/// are averaged over items.
pub fn basis_objective<T: Real>(
    base: &BaseModel<T>,
    bases: &CapabilityBasisSet<T>,
    items: &[BasisItem<'_>],
    tau: f64,
    w: &LossWeights,
) -> Result<(BasisStepLoss, Vec<Option<Tensor<T>>>)> {
    let mut tape = Tape::<T>::new();
    let bound_base = base.bind(&mut tape, false);
    let bound = bases.bind(&mut tape, true);
    let mut mrs = Vec::new();
    let mut nces = Vec::new();
    for item in items {
        let overrides: BTreeMap<_, Var> = bound.compose_tape(&mut tape, base, &item.alpha)?;
        let score = |seq: &TokenSequence, tape: &mut Tape<T>| -> Result<Var> {
            let out = base.forward_tape(tape, &bound_base, &overrides, seq.ids())?;
            sequence_log_likelihood_tape(tape, out.logits, seq)
        };
        let pos = item.positives.iter().map(|s| score(s, &mut tape)).collect::<Result<Vec<_>>>()?;
        let neg = item.negatives.iter().map(|s| score(s, &mut tape)).collect::<Result<Vec<_>>>()?;
        mrs.push(tape_ops::multi_reference(&mut tape, &pos)?);
        nces.push(tape_ops::group_nce(&mut tape, &pos, &neg, tau)?);
    }
    let ortho = bound.orthogonality_tape(&mut tape);
    let mut parts = vec![(ortho, w.ortho)];
    let mut values = BasisStepLoss {
        ortho: tape.value(ortho).item().as_f64(),
        ..Default::default()
    };
    if !items.is_empty() {
        let mr = tape.stack(&mrs);
        let mr = tape.mean(mr);
        let nce = tape.stack(&nces);
        let nce = tape.mean(nce);
        values.mr = tape.value(mr).item().as_f64();
        values.nce = tape.value(nce).item().as_f64();
        parts.push((mr, w.mr));
        parts.push((nce, w.nce));
    }
    for (name, v) in [("L_MR", values.mr), ("L_NCE", values.nce), ("L_ortho", values.ortho)] {
        if !v.is_finite() {
            return Err(Error::numerical(name, format!("value {v}")));
        }
    }
    let loss = weighted_sum(&mut tape, &parts);
    let grads = tape.backward(loss);
    let g: Vec<Option<Tensor<T>>> = bound.vars().into_iter().map(|v| grads.get(v).cloned()).collect();
    if g.iter().flatten().any(|t| !t.is_finite()) {
        return Err(Error::numerical("basis gradient", "non-finite entries"));
    }
    Ok((values, g))
}

/// `λ_CCA (L_CCA + λ_dead L_dead) + λ_ent L_ent + λ_bal L_bal + λ_temp L_temp`
/// and its gradient with respect to ψ, in [`ComposerParams::named_tensors`]
/// order. `zs[i]` is a `1 x d` task embedding paired with `coeffs[i]`.
pub fn composer_objective<T: Real>(
    composer: &ComposerParams<T>,
    zs: &[&Tensor<T>],
    coeffs: &[CcaCoefficients],
    w: &LossWeights,
) -> Result<(ComposerStepLoss, Vec<Option<Tensor<T>>>)> {
    if zs.len() != coeffs.len() || zs.is_empty() {
        return Err(Error::Contract("composer objective needs one coefficient set per task".into()));
    }
    let mut tape = Tape::<T>::new();
    let bound = composer.bind(&mut tape, true);
    let mut routes = Vec::new();
    let mut cca_in = Vec::new();
    for (z, c) in zs.iter().zip(coeffs) {
        let z = tape.constant((*z).clone());
        let rv = composer.route_tape(&mut tape, &bound, z);
        cca_in.push((rv, c.clone()));
        routes.push(rv);
    }
    let (pol, dead) = tape_ops::cca(&mut tape, &cca_in);
    let ent = tape_ops::entropy(&mut tape, &routes);
    let bal = tape_ops::balance(&mut tape, &routes);
    let temp = tape_ops::temperature(&mut tape, &routes);
    let val = |v: Var, tape: &Tape<T>| tape.value(v).item().as_f64();
    let out = ComposerStepLoss {
        cca: val(pol, &tape),
        dead: val(dead, &tape),
        ent: val(ent, &tape),
        bal: val(bal, &tape),
        temp: val(temp, &tape),
        reports: Vec::new(),
    };
    for (name, v) in [
        ("L_CCA", out.cca),
        ("L_dead", out.dead),
        ("L_ent", out.ent),
        ("L_bal", out.bal),
        ("L_temp", out.temp),
    ] {
        if !v.is_finite() {
            return Err(Error::numerical(name, format!("value {v}")));
        }
    }
    let loss = weighted_sum(
        &mut tape,
        &[(pol, w.cca), (dead, w.cca * w.dead), (ent, w.ent), (bal, w.bal), (temp, w.temp)],
    );
    let grads = tape.backward(loss);
    let g: Vec<Option<Tensor<T>>> = bound.vars().into_iter().map(|v| grads.get(v).cloned()).collect();
    if g.iter().flatten().any(|t| !t.is_finite()) {
        return Err(Error::numerical("composer gradient", "non-finite entries"));
    }
    Ok((out, g))
}

struct Prepared {
    z: Tensor<f32>,
    seqs: Vec<TokenSequence>,
}

pub struct Trainer {
    pub config: TrainingConfig,
    pub base: BaseModel<f32>,
    pub model: CapabilityModel<f32>,
    tasks: Vec<TaskRecord>,
    prepared: Vec<Prepared>,
    bases_adam: Adam<f32>,
    composer_adam: Adam<f32>,
    step: u64,
    total_steps: u64,
    lr_scale: f64,
    batching_rng: ChaCha8Rng,
    dropout_rng: ChaCha8Rng,
}

fn flat_bases(b: &CapabilityBasisSet<f32>) -> Vec<Tensor<f32>> {
    b.named_tensors().into_iter().map(|(_, t)| t).collect()
}

impl Trainer {
    /// Fresh Φ and ψ from the `Init` substream of `config.seed`.
    pub fn new(base: BaseModel<f32>, tasks: Vec<TaskRecord>, tk: &Tokenizer, config: TrainingConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(config.seed, Stream::Init);
        let bases = CapabilityBasisSet::init(&base.config, config.capability.clone(), &mut rng)?;
        let composer = ComposerParams::init(
            base.config.d_model,
            config.capability.num_bases,
            config.composer.clone(),
            &mut rng,
        )?;
        let model = CapabilityModel { bases, composer };
        let bases_adam = Adam::new(config.adam.clone(), flat_bases(&model.bases).iter());
        let composer_adam = Adam::new(config.adam.clone(), model.composer.named_tensors().into_iter().map(|(_, t)| t));
        let total = config.total_steps(tasks.len());
        let seed = config.seed;
        let mut t = Self::assemble(
            base,
            model,
            tasks,
            tk,
            config,
            bases_adam,
            composer_adam,
            0,
            total,
            1.0,
            substream(seed, Stream::Batching),
            substream(seed, Stream::Dropout),
        )?;
        if t.config.composer.standardize_input {
            let zs: Vec<&[f32]> = t.prepared.iter().map(|p| p.z.data()).collect();
            t.model.composer.fit_input(&zs)?;
        }
        Ok(t)
    }

    /// Continues the run stored in `ckpt` on the same training tasks.
    pub fn resume(ckpt: Checkpoint, tasks: Vec<TaskRecord>, tk: &Tokenizer) -> Result<Self> {
        let Some(TrainSnapshot { state, bases_adam, composer_adam }) = ckpt.train else {
            return Err(Error::Checkpoint("checkpoint has no training state to resume".into()));
        };
        let model = ckpt
            .capability
            .ok_or_else(|| Error::Checkpoint("checkpoint has no capability model".into()))?;
        if state.train_tasks != tasks.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained on {} tasks, corpus has {}",
                state.train_tasks,
                tasks.len()
            )));
        }
        Self::assemble(
            ckpt.base,
            model,
            tasks,
            tk,
            state.config,
            bases_adam,
            composer_adam,
            state.step,
            state.total_steps,
            state.lr_scale,
            state.batching_rng.restore()?,
            state.dropout_rng.restore()?,
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        base: BaseModel<f32>,
        model: CapabilityModel<f32>,
        tasks: Vec<TaskRecord>,
        tk: &Tokenizer,
        config: TrainingConfig,
        bases_adam: Adam<f32>,
        composer_adam: Adam<f32>,
        step: u64,
        total_steps: u64,
        lr_scale: f64,
        batching_rng: ChaCha8Rng,
        dropout_rng: ChaCha8Rng,
    ) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Input("training corpus is empty".into()));
        }
        let mut prepared = Vec::with_capacity(tasks.len());
        for t in &tasks {
            let z = base.task_embedding(tk, &t.question)?;
            let seqs = t
                .workflows
                .iter()
                .map(|w| TokenSequence::format(tk, &t.question, &w.text, &base.config))
                .collect::<Result<_>>()?;
            prepared.push(Prepared {
                z: Tensor::row_vector(z),
                seqs,
            });
        }
        Ok(Self {
            config,
            base,
            model,
            tasks,
            prepared,
            bases_adam,
            composer_adam,
            step,
            total_steps,
            lr_scale,
            batching_rng,
            dropout_rng,
        })
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.total_steps
    }

    pub fn tasks(&self) -> &[TaskRecord] {
        &self.tasks
    }

    pub fn train_state(&self) -> TrainState {
        TrainState {
            config: self.config.clone(),
            step: self.step,
            total_steps: self.total_steps,
            lr_scale: self.lr_scale,
            batching_rng: RngState::capture(&self.batching_rng),
            dropout_rng: RngState::capture(&self.dropout_rng),
            bases_adam_t: self.bases_adam.t,
            composer_adam_t: self.composer_adam.t,
            train_tasks: self.tasks.len(),
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            base: self.base.clone(),
            capability: Some(self.model.clone()),
            train: Some(TrainSnapshot {
                state: self.train_state(),
                bases_adam: self.bases_adam.clone(),
                composer_adam: self.composer_adam.clone(),
            }),
        }
    }

    /// Draws the step's task groups and routes each once.
    pub fn sample_groups(&mut self) -> Result<Vec<RoutedGroup>> {
        let mut out = Vec::new();
        let m = self.config.capability.top_m;
        for _ in 0..self.config.batch_tasks {
            let Some(group) = build_task_batch(&self.tasks, self.config.b_pos, self.config.b_neg, &mut self.batching_rng)
            else {
                continue;
            };
            let decision = self.model.composer.route(self.prepared[group.task].z.data(), m)?;
            let dropped = basis_dropout(&decision.alpha, self.config.p_drop, &mut self.dropout_rng)?;
            let used = detach_for_generation(&decision.with_alpha(dropped)?);
            out.push(RoutedGroup { group, decision, used });
        }
        Ok(out)
    }

    fn basis_objective(&self, groups: &[RoutedGroup], w: &LossWeights) -> Result<(BasisStepLoss, Vec<Option<Tensor<f32>>>)> {
        let items: Vec<BasisItem<'_>> = groups
            .iter()
            .map(|g| {
                let seqs = &self.prepared[g.group.task].seqs;
                BasisItem {
                    alpha: g.used.sparse_alpha(),
                    positives: g.group.positives.iter().map(|&i| &seqs[i]).collect(),
                    negatives: g.group.negatives.iter().map(|&i| &seqs[i]).collect(),
                }
            })
            .collect();
        basis_objective(&self.base, &self.model.bases, &items, self.config.tau, w)
            .map_err(|e| at_step(e, self.step))
    }

    /// One Adam update of Φ on `λ_MR L_MR + λ_NCE L_NCE + λ_ortho L_ortho`.
    /// The routing in `groups` is a constant. A failed attempt halves the
    /// learning rate and is retried once.
    pub fn basis_step(&mut self, groups: &[RoutedGroup], w: &LossWeights) -> Result<BasisStepLoss> {
        let mut last = None;
        for attempt in 0..2 {
            match self.try_basis_step(groups, w) {
                Ok(v) => return Ok(v),
                Err(e @ Error::Numerical { .. }) => {
                    warn!("basis step {} failed ({e}); halving lr_bases", self.step);
                    if attempt == 0 {
                        self.lr_scale *= 0.5;
                    }
                    last = Some(e);
                }
                Err(e) => return Err(e),
            }
        }
        Err(last.expect("two failed attempts"))
    }

    fn try_basis_step(&mut self, groups: &[RoutedGroup], w: &LossWeights) -> Result<BasisStepLoss> {
        let (values, grads) = self.basis_objective(groups, w)?;
        let mut flat = flat_bases(&self.model.bases);
        let saved = self.bases_adam.clone();
        let refs: Vec<Option<&Tensor<f32>>> = grads.iter().map(|g| g.as_ref()).collect();
        let mut views: Vec<&mut Tensor<f32>> = flat.iter_mut().collect();
        self.bases_adam.step(self.config.lr_bases * self.lr_scale, &mut views, &refs);
        if flat.iter().any(|t| !t.is_finite()) {
            self.bases_adam = saved;
            return Err(Error::numerical("basis update", format!("non-finite parameters at step {}", self.step)));
        }
        self.model.bases.visit_mut(|i, t| *t = flat[i].clone());
        Ok(values)
    }

    /// Counterfactual probes of the current bases for the step's records,
    /// centered and clipped.
    pub fn attribution_reports(&self, groups: &[RoutedGroup]) -> Result<Vec<Vec<AttributionReport>>> {
        let mut out = Vec::new();
        for g in groups {
            let task = &self.tasks[g.group.task];
            let seqs = &self.prepared[g.group.task].seqs;
            let mut records: Vec<usize> = g.group.positives.iter().chain(&g.group.negatives).copied().collect();
            if let Some(n) = self.config.attribution_samples {
                records.truncate(n);
            }
            let mut reports = Vec::new();
            for i in records {
                let score = task.workflows[i].score;
                match attribute(
                    &task.task_id,
                    &self.base,
                    &self.model.bases,
                    &seqs[i],
                    score,
                    &g.used,
                    self.config.attribution_scope,
                ) {
                    Ok(mut r) => {
                        center_report(&mut r, self.config.clip_delta);
                        reports.push(r);
                    }
                    Err(Error::Degenerate(msg)) => warn!("task {}: attribution skipped: {msg}", task.task_id),
                    Err(e) => return Err(e),
                }
            }
            out.push(reports);
        }
        Ok(out)
    }

    /// One Adam update of ψ on
    /// `λ_CCA (L_CCA + λ_dead L_dead) + λ_ent L_ent + λ_bal L_bal + λ_temp L_temp`.
    pub fn composer_step(&mut self, groups: &[RoutedGroup], w: &LossWeights) -> Result<ComposerStepLoss> {
        if groups.is_empty() {
            return Ok(ComposerStepLoss::default());
        }
        let per_group = self.attribution_reports(groups)?;
        let n: usize = per_group.iter().map(|r| r.len()).sum();
        let k = self.config.capability.num_bases;
        let zs: Vec<&Tensor<f32>> = groups.iter().map(|g| &self.prepared[g.group.task].z).collect();
        let coeffs: Vec<CcaCoefficients> = per_group
            .iter()
            .map(|r| CcaCoefficients::from_reports(&r.iter().collect::<Vec<_>>(), k, self.config.gamma, n))
            .collect();
        let (mut out, grads) =
            composer_objective(&self.model.composer, &zs, &coeffs, w).map_err(|e| at_step(e, self.step))?;
        out.reports = per_group.into_iter().flatten().collect();
        let g: Vec<Option<&Tensor<f32>>> = grads.iter().map(|g| g.as_ref()).collect();
        let lr = self.config.lr_composer;
        self.composer_adam.step(lr, &mut self.model.composer.tensors_mut(), &g);
        Ok(out)
    }

    /// One full step of the loop.
    pub fn step(&mut self) -> Result<StepRecord> {
        let step = self.step;
        let w = self.config.scheduled_weights(step, self.total_steps);
        let groups = self.sample_groups()?;
        let basis = self.basis_step(&groups, &w)?;
        let composer_update = self.config.is_composer_step(step);
        let alphas: Vec<Vec<f64>> = groups.iter().map(|g| g.decision.alpha.clone()).collect();
        let cs = if composer_update {
            self.composer_step(&groups, &w)?
        } else if groups.is_empty() {
            ComposerStepLoss::default()
        } else {
            ComposerStepLoss {
                ent: entropy_reg(&alphas),
                bal: balance_reg(&alphas)?,
                temp: temperature_reg(&groups.iter().map(|g| g.decision.delta_t).collect::<Vec<_>>()),
                ..Default::default()
            }
        };
        let breakdown = finalize(
            LossBreakdown {
                mr: basis.mr,
                nce: basis.nce,
                cca: cs.cca,
                dead: cs.dead,
                ortho: basis.ortho,
                ent: cs.ent,
                bal: cs.bal,
                temp: cs.temp,
                total: 0.0,
            },
            &w,
        )?;
        let t_mean = if groups.is_empty() {
            0.0
        } else {
            groups.iter().map(|g| g.decision.temperature).sum::<f64>() / groups.len() as f64
        };
        let routing = groups
            .iter()
            .map(|g| RoutingLogEntry {
                format_version: FORMAT_VERSION,
                step: Some(step),
                task_id: g.group.task_id.clone(),
                domain: self.tasks[g.group.task].domain,
                alpha: g.decision.alpha.clone(),
                temperature: g.decision.temperature,
                active_set: g.used.active_set.clone(),
            })
            .collect();
        let log = TrainLogEntry {
            format_version: FORMAT_VERSION,
            step,
            epoch: step / self.config.steps_per_epoch(self.tasks.len()),
            task_ids: groups.iter().map(|g| g.group.task_id.clone()).collect(),
            loss: breakdown,
            lambda_ent: w.ent,
            lambda_bal: w.bal,
            lr_bases: self.config.lr_bases * self.lr_scale,
            temperature_mean: t_mean,
            active_sets: groups.iter().map(|g| g.used.active_set.clone()).collect(),
            composer_update,
        };
        self.step += 1;
        Ok(StepRecord {
            log,
            routing,
            reports: cs.reports,
        })
    }

    /// Steps until done or until `until` (exclusive), passing each record to
    /// `sink`.
    pub fn run(&mut self, until: Option<u64>, mut sink: impl FnMut(&StepRecord) -> Result<()>) -> Result<()> {
        let end = until.map_or(self.total_steps, |u| u.min(self.total_steps));
        while self.step < end {
            let rec = self.step()?;
            sink(&rec)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workflow::corpus::{generate_corpus, CorpusConfig};
    use crate::workflow::{Capability, Signature, Split, WorkflowRecord};

    fn toy_task(id: &str, scores: &[f64]) -> TaskRecord {
        TaskRecord {
            task_id: id.into(),
            question: "please alpha".into(),
            domain: Domain::Coding,
            split: Split::Train,
            signature: Signature {
                capabilities: vec![Capability::TestRepair],
                keyword: "alpha".into(),
                opener: "please".into(),
            },
            workflows: scores
                .iter()
                .map(|&s| WorkflowRecord {
                    text: "a = generate ( alpha answer )".into(),
                    score: s,
                })
                .collect(),
        }
    }

    #[test]
    fn center_and_clip_examples() {
        assert_eq!(center_and_clip(&[1.0, 2.0, 3.0], 10.0), vec![-1.0, 0.0, 1.0]);
        assert_eq!(center_and_clip(&[1.0, 2.0, 3.0], 0.5), vec![-0.5, 0.0, 0.5]);
        assert_eq!(center_and_clip(&[0.7; 4], 1.0), vec![0.0; 4]);
        assert_eq!(center_and_clip(&[0.3], 1.0), vec![0.0]);
    }

    #[test]
    fn one_success_one_failure_both_drawn() {
        let tasks = vec![toy_task("t0", &[1.0, 0.0])];
        let g = build_task_batch(&tasks, 2, 2, &mut substream(1, Stream::Batching)).unwrap();
        assert_eq!(g.positives, vec![0]);
        assert_eq!(g.negatives, vec![1]);
    }

    #[test]
    fn single_class_task_is_skipped() {
        let tasks = vec![toy_task("t0", &[1.0, 1.0])];
        assert!(build_task_batch(&tasks, 2, 2, &mut substream(1, Stream::Batching)).is_none());
    }

    #[test]
    fn tasks_drawn_uniformly() {
        let tasks = vec![toy_task("t0", &[1.0, 0.0]), toy_task("t1", &[1.0, 0.0]), toy_task("t2", &[1.0, 0.0])];
        let mut rng = substream(3, Stream::Batching);
        let mut counts = [0usize; 3];
        for _ in 0..10_000 {
            counts[build_task_batch(&tasks, 1, 1, &mut rng).unwrap().task] += 1;
        }
        for c in counts {
            let f = c as f64 / 10_000.0;
            assert!((f - 1.0 / 3.0).abs() < 0.05 / 3.0, "{counts:?}");
        }
    }

    #[test]
    fn composer_updates_every_e_steps_from_zero() {
        let c = TrainingConfig::default();
        let steps: Vec<u64> = (0..13).filter(|&s| c.is_composer_step(s)).collect();
        assert_eq!(steps, vec![0, 4, 8, 12]);
    }

    #[test]
    fn entropy_schedule_is_linear_to_zero_at_half() {
        let c = TrainingConfig::default();
        let w = |s| c.scheduled_weights(s, 1000);
        assert!((w(0).ent - 0.01).abs() < 1e-12);
        assert!((w(250).ent - 0.005).abs() < 1e-12);
        assert_eq!(w(500).ent, 0.0);
        assert_eq!(w(900).ent, 0.0);
        assert_eq!(w(499).bal, 0.01);
        assert_eq!(w(500).bal, 0.0);
    }

    #[test]
    fn config_rejects_bad_values() {
        for bad in [
            TrainingConfig {
                attribution_interval: 0,
                ..Default::default()
            },
            TrainingConfig {
                lr_bases: 0.0,
                ..Default::default()
            },
            TrainingConfig {
                clip_delta: -1.0,
                ..Default::default()
            },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        let e = serde_json::from_str::<TrainingConfig>(r#"{"nope": 1}"#);
        assert!(e.is_err());
    }

    fn micro_trainer(config: TrainingConfig) -> Trainer {
        let corpus = generate_corpus(
            5,
            &CorpusConfig {
                tasks_per_domain: 3,
                workflows_per_task: 4,
                heldout_per_domain: 1,
                heldout_unseen_tasks: 1,
            },
        )
        .unwrap();
        let tk = Tokenizer::new();
        let mc = crate::model::ModelConfig::with_dims(tk.vocab_size(), 16, 1, 2, 32, 128);
        let base = BaseModel::init(mc, &mut substream(9, Stream::Pretrain)).unwrap();
        Trainer::new(base, corpus.train, &tk, config).unwrap()
    }

    fn small_config() -> TrainingConfig {
        TrainingConfig {
            epochs: 1,
            lr_bases: 1e-2,
            lr_composer: 1e-2,
            composer: ComposerConfig {
                hidden: 8,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn zero_weights_leave_bases_unchanged() {
        let mut t = micro_trainer(small_config());
        let before = t.model.bases.clone();
        let groups = t.sample_groups().unwrap();
        t.basis_step(&groups, &LossWeights::zero()).unwrap();
        assert_eq!(t.model.bases, before);
    }

    #[test]
    fn steps_touch_only_their_own_parameters() {
        let mut t = micro_trainer(small_config());
        let base_hash = t.base.hash();
        let groups = t.sample_groups().unwrap();
        let psi = t.model.composer.clone();
        let phi = t.model.bases.clone();
        t.basis_step(&groups, &LossWeights::default()).unwrap();
        assert_eq!(t.model.composer, psi);
        assert_ne!(t.model.bases, phi);
        let phi = t.model.bases.clone();
        t.composer_step(&groups, &LossWeights::default()).unwrap();
        assert_eq!(t.model.bases, phi);
        assert_eq!(t.base.hash(), base_hash);
    }

    #[test]
    fn basis_loss_falls_on_a_fixed_batch() {
        let mut t = micro_trainer(small_config());
        let groups = t.sample_groups().unwrap();
        let w = LossWeights::default();
        let mut losses = Vec::new();
        for _ in 0..50 {
            let v = t.basis_step(&groups, &w).unwrap();
            losses.push(w.mr * v.mr + w.nce * v.nce + w.ortho * v.ortho);
        }
        assert!(losses[49] < losses[0], "{} -> {}", losses[0], losses[49]);
    }

    #[test]
    fn zero_epochs_keep_the_initialization() {
        let mut t = micro_trainer(TrainingConfig {
            epochs: 0,
            ..small_config()
        });
        let init = t.model.clone();
        t.run(None, |_| Ok(())).unwrap();
        assert_eq!(t.step_index(), 0);
        assert_eq!(t.model, init);
    }

    #[test]
    fn same_seed_same_trajectory() {
        let run = || {
            let mut t = micro_trainer(small_config());
            let mut log = Vec::new();
            t.run(None, |r| {
                log.push(serde_json::to_string(&r.log).unwrap());
                Ok(())
            })
            .unwrap();
            (log, t.model)
        };
        let (a, ma) = run();
        let (b, mb) = run();
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn resume_reproduces_the_remaining_steps() {
        let tk = Tokenizer::new();
        let mut full = micro_trainer(small_config());
        let tasks = full.tasks().to_vec();
        let mut tail_a = Vec::new();
        full.run(Some(4), |_| Ok(())).unwrap();
        let ckpt = Checkpoint::from_bytes(&{
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("c.bin");
            full.checkpoint().write(&p).unwrap();
            std::fs::read(p).unwrap()
        })
        .unwrap();
        full.run(None, |r| {
            tail_a.push(serde_json::to_string(&r.log).unwrap());
            Ok(())
        })
        .unwrap();
        let mut resumed = Trainer::resume(ckpt, tasks, &tk).unwrap();
        let mut tail_b = Vec::new();
        resumed
            .run(None, |r| {
                tail_b.push(serde_json::to_string(&r.log).unwrap());
                Ok(())
            })
            .unwrap();
        assert_eq!(tail_a, tail_b);
        assert_eq!(full.model, resumed.model);
    }
}
