//! Single-pass generation: route once, compose, decode.

use std::collections::BTreeMap;

use log::warn;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::CapabilityModel;
use crate::composer::{detach_for_generation, RoutingDecision};
use crate::error::{Error, Result};
use crate::losses::{attribute, composed_score, AttributionReport, AttributionScope};
use crate::model::{BaseModel, SiteId, TokenSequence};
use crate::rng::{substream, Stream};
use crate::tensor::{softmax, Tensor};
use crate::workflow::dsl::WorkflowProgram;
use crate::workflow::tokenizer::Tokenizer;
use crate::workflow::{evaluate_workflow, TaskRecord};
use crate::FORMAT_VERSION;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub max_new_tokens: usize,
    /// Sample from the softmax at `temperature` instead of taking the argmax.
    pub sample: bool,
    pub temperature: f64,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            max_new_tokens: 160,
            sample: false,
            temperature: 1.0,
            seed: 7,
        }
    }
}

/// A frozen base with, optionally, bases and a composer.
#[derive(Clone, Copy)]
pub struct Generator<'a> {
    pub base: &'a BaseModel<f32>,
    pub capability: Option<&'a CapabilityModel<f32>>,
    pub tokenizer: &'a Tokenizer,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub format_version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_id: Option<String>,
    pub task: String,
    pub text: String,
    /// `None` for a base-only generator.
    pub routing: Option<RoutingDecision>,
    /// Composer invocations made for this generation.
    pub composer_calls: usize,
    pub parsed: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parse_error: Option<String>,
    /// Set when the task's requirements are known.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<f64>,
    pub truncated: bool,
    pub decode: DecodeConfig,
}

fn argmax(row: &[f32]) -> usize {
    (0..row.len()).fold(0, |best, i| if row[i] > row[best] { i } else { best })
}

impl<'a> Generator<'a> {
    pub fn new(base: &'a BaseModel<f32>, capability: Option<&'a CapabilityModel<f32>>, tokenizer: &'a Tokenizer) -> Self {
        Self {
            base,
            capability,
            tokenizer,
        }
    }

    /// z(q), α(q) with no dropout, and the effective weights of its top-m.
    pub fn route(&self, question: &str) -> Result<(Option<RoutingDecision>, BTreeMap<SiteId, Tensor<f32>>)> {
        let Some(cap) = self.capability else {
            return Ok((None, BTreeMap::new()));
        };
        let z = self.base.task_embedding(self.tokenizer, question)?;
        let decision = detach_for_generation(&cap.composer.route(&z, cap.bases.config.top_m)?);
        let weights = cap.bases.compose(self.base, &decision.sparse_alpha())?;
        Ok((Some(decision), weights))
    }

    /// Decodes a workflow for `question`. The composer runs exactly once.
    pub fn generate(&self, question: &str, decode: &DecodeConfig) -> Result<GenerationResult> {
        let tk = self.tokenizer;
        let (routing, weights) = self.route(question)?;
        let composer_calls = usize::from(routing.is_some());
        let mut ids = TokenSequence::prompt_ids(tk, question);
        let prompt = ids.len();
        if prompt >= self.base.config.max_seq_len {
            return Err(Error::Input(format!("task of {prompt} tokens leaves no room to decode")));
        }
        let mut rng: Option<ChaCha8Rng> = decode.sample.then(|| substream(decode.seed, Stream::Decode));
        let mut truncated = true;
        for _ in 0..decode.max_new_tokens {
            if ids.len() >= self.base.config.max_seq_len {
                break;
            }
            let logits = self.base.forward_logits(&weights, &ids)?;
            let row = logits.row(ids.len() - 1);
            let next = match rng.as_mut() {
                None => argmax(row),
                Some(r) => {
                    let scaled: Vec<f64> = row.iter().map(|&x| x as f64 / decode.temperature).collect();
                    let p = softmax(&scaled);
                    let mut u: f64 = r.random();
                    let mut pick = p.len() - 1;
                    for (i, &pi) in p.iter().enumerate() {
                        if u < pi {
                            pick = i;
                            break;
                        }
                        u -= pi;
                    }
                    pick
                }
            };
            if next == tk.eos() {
                truncated = false;
                break;
            }
            ids.push(next);
        }
        let text = tk.detokenize(&ids[prompt..]);
        let parse = if truncated {
            Err("decode stopped without an end token".to_string())
        } else {
            WorkflowProgram::parse(&text).map_err(|e| e.to_string())
        };
        Ok(GenerationResult {
            format_version: FORMAT_VERSION,
            task_id: None,
            task: question.to_string(),
            text,
            routing,
            composer_calls,
            parsed: parse.is_ok(),
            parse_error: parse.err(),
            score: None,
            truncated,
            decode: decode.clone(),
        })
    }

    /// Generates for a corpus task and scores the result.
    pub fn generate_for_task(&self, task: &TaskRecord, decode: &DecodeConfig) -> Result<GenerationResult> {
        let mut r = self.generate(&task.question, decode)?;
        r.task_id = Some(task.task_id.clone());
        r.score = Some(match WorkflowProgram::parse(&r.text) {
            Ok(p) if r.parsed => evaluate_workflow(task, &p),
            _ => 0.0,
        });
        Ok(r)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RateSummary {
    pub tasks: usize,
    /// Percent.
    pub solve_rate: f64,
    /// Percent.
    pub executability_rate: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub format_version: u32,
    pub split: String,
    pub tasks: usize,
    pub solve_rate: f64,
    pub executability_rate: f64,
    pub per_domain: BTreeMap<String, RateSummary>,
}

fn rates(results: &[&GenerationResult]) -> RateSummary {
    let n = results.len();
    if n == 0 {
        return RateSummary::default();
    }
    let solved: f64 = results.iter().map(|r| r.score.unwrap_or(0.0)).sum();
    let parsed = results.iter().filter(|r| r.parsed).count();
    RateSummary {
        tasks: n,
        solve_rate: 100.0 * solved / n as f64,
        executability_rate: 100.0 * parsed as f64 / n as f64,
    }
}

/// One greedy generation per task.
pub fn evaluate_suite(
    generator: &Generator<'_>,
    tasks: &[TaskRecord],
    split: &str,
    decode: &DecodeConfig,
) -> Result<(EvalReport, Vec<GenerationResult>)> {
    if tasks.is_empty() {
        return Err(Error::Input(format!("split {split} has no tasks")));
    }
    let results = tasks
        .iter()
        .map(|t| generator.generate_for_task(t, decode))
        .collect::<Result<Vec<_>>>()?;
    let all: Vec<&GenerationResult> = results.iter().collect();
    let overall = rates(&all);
    let mut per_domain = BTreeMap::new();
    for t in tasks {
        per_domain.entry(t.domain.tag().to_string()).or_insert_with(Vec::new);
    }
    for (tag, bucket) in per_domain.iter_mut() {
        for (t, r) in tasks.iter().zip(&results) {
            if t.domain.tag() == tag {
                bucket.push(r);
            }
        }
    }
    let report = EvalReport {
        format_version: FORMAT_VERSION,
        split: split.to_string(),
        tasks: overall.tasks,
        solve_rate: overall.solve_rate,
        executability_rate: overall.executability_rate,
        per_domain: per_domain.into_iter().map(|(k, v)| (k, rates(&v))).collect(),
    };
    Ok((report, results))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskAttribution {
    pub task_id: String,
    pub domain: String,
    /// Argmax of α.
    pub top_basis: usize,
    pub report: AttributionReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionSummary {
    pub format_version: u32,
    pub tasks: Vec<TaskAttribution>,
    /// Task ids whose attribution failed, with the reason.
    pub excluded: Vec<(String, String)>,
    /// Fraction of attributed tasks whose top-routed basis has `Δ > 0`.
    pub positive_fraction: f64,
}

/// Δ over the active set for each task's most likely success under the
/// composed model, with routing computed as at generation time.
pub fn attribution_report(generator: &Generator<'_>, tasks: &[TaskRecord]) -> Result<AttributionSummary> {
    let cap = generator
        .capability
        .ok_or_else(|| Error::Checkpoint("attribution needs a capability checkpoint".into()))?;
    let tk = generator.tokenizer;
    let base = generator.base;
    let mut out = Vec::new();
    let mut excluded = Vec::new();
    for task in tasks {
        let result = (|| -> Result<TaskAttribution> {
            let (decision, _) = generator.route(&task.question)?;
            let decision = decision.expect("capability generator routes");
            let mut best: Option<(f64, TokenSequence)> = None;
            for w in task.successes() {
                let seq = TokenSequence::format(tk, &task.question, &w.text, &base.config)?;
                let l = composed_score(base, &cap.bases, &decision.alpha, decision.top_m, &seq)?;
                if best.as_ref().is_none_or(|(b, _)| l > *b) {
                    best = Some((l, seq));
                }
            }
            let (_, seq) = best.ok_or_else(|| Error::Input(format!("task {} has no success record", task.task_id)))?;
            let report = attribute(&task.task_id, base, &cap.bases, &seq, 1.0, &decision, AttributionScope::Active)?;
            let top_basis = argmax64(&decision.alpha);
            Ok(TaskAttribution {
                task_id: task.task_id.clone(),
                domain: task.domain.tag().to_string(),
                top_basis,
                report,
            })
        })();
        match result {
            Ok(a) => out.push(a),
            Err(e @ (Error::Degenerate(_) | Error::Input(_))) => {
                warn!("task {} excluded from attribution: {e}", task.task_id);
                excluded.push((task.task_id.clone(), e.to_string()));
            }
            Err(e) => return Err(e),
        }
    }
    let positive = out.iter().filter(|a| a.report.deltas[a.top_basis] > 0.0).count();
    let positive_fraction = if out.is_empty() { 0.0 } else { positive as f64 / out.len() as f64 };
    Ok(AttributionSummary {
        format_version: FORMAT_VERSION,
        tasks: out,
        excluded,
        positive_fraction,
    })
}

fn argmax64(xs: &[f64]) -> usize {
    (0..xs.len()).fold(0, |best, i| if xs[i] > xs[best] { i } else { best })
}
