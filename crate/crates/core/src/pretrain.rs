//! Next-token pretraining of the base model on the training split.
//!
//! Every workflow of every training task, successful or not, becomes one
//! sequence `<bos> question <sep> workflow <eos>` and every position after
//! `<bos>` is a target. The result is frozen as θ0.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BaseModel, ModelConfig, TokenSequence};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{substream, Stream};
use crate::tape::Tape;
use crate::workflow::tokenizer::Tokenizer;
use crate::workflow::TaskRecord;
use crate::FORMAT_VERSION;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate, reached after `warmup_steps` and decayed on a
    /// cosine to a tenth of itself.
    pub lr: f64,
    pub warmup_steps: usize,
    pub adam: AdamConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            model: ModelConfig::default(),
            epochs: 6,
            batch_size: 16,
            lr: 3e-3,
            warmup_steps: 50,
            adam: AdamConfig::default(),
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        if self.batch_size == 0 {
            return Err(Error::Config("pretrain batch_size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("pretrain lr = {} must be positive", self.lr)));
        }
        Ok(())
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = total.saturating_sub(self.warmup_steps).max(1) as f64;
        let p = ((step - self.warmup_steps) as f64 / span).min(1.0);
        self.lr * (0.1 + 0.45 * (1.0 + (std::f64::consts::PI * p).cos()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainLogEntry {
    pub format_version: u32,
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Mean next-token negative log-likelihood over the batch.
    pub loss: f64,
}

/// Every workflow of every task as a full-sequence training example.
pub fn pretraining_sequences(tk: &Tokenizer, tasks: &[TaskRecord], config: &ModelConfig) -> Result<Vec<Vec<usize>>> {
    let mut out = Vec::new();
    for t in tasks {
        for w in &t.workflows {
            out.push(TokenSequence::format(tk, &t.question, &w.text, config)?.ids().to_vec());
        }
    }
    Ok(out)
}

pub fn pretrain(
    tk: &Tokenizer,
    tasks: &[TaskRecord],
    config: &PretrainConfig,
    mut on_step: impl FnMut(&PretrainLogEntry) -> Result<()>,
) -> Result<BaseModel<f32>> {
    config.validate()?;
    if config.model.vocab_size != tk.vocab_size() {
        return Err(Error::Config(format!(
            "model vocab_size {} differs from the tokenizer's {}",
            config.model.vocab_size,
            tk.vocab_size()
        )));
    }
    let seqs = pretraining_sequences(tk, tasks, &config.model)?;
    if seqs.is_empty() {
        return Err(Error::Input("no training sequences for pretraining".into()));
    }
    let mut rng = substream(config.seed, Stream::Pretrain);
    let mut model = BaseModel::<f32>::init(config.model.clone(), &mut rng)?;
    let mut adam = Adam::new(config.adam.clone(), model.named_tensors().into_iter().map(|(_, t)| t));
    let per_epoch = seqs.len().div_ceil(config.batch_size);
    let total = per_epoch * config.epochs;
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    let mut step = 0;
    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let bound = model.bind(&mut tape, true);
            let mut terms = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let ids = &seqs[i];
                let out = model.forward_tape(&mut tape, &bound, &Default::default(), ids)?;
                let picks: Vec<(usize, usize)> = (1..ids.len()).map(|t| (t - 1, ids[t])).collect();
                let lp = tape.pick_log_softmax(out.logits, &picks);
                terms.push(tape.mean(lp));
            }
            let all = tape.stack(&terms);
            let mean = tape.mean(all);
            let loss = tape.scale(mean, -1.0);
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::numerical("pretrain NLL", format!("loss is {value} at step {step}")));
            }
            let grads = tape.backward(loss);
            let lr = config.lr_at(step, total);
            let g: Vec<_> = bound.vars.iter().map(|&v| grads.get(v)).collect();
            adam.step(lr, &mut model.tensors_mut(), &g);
            on_step(&PretrainLogEntry {
                format_version: FORMAT_VERSION,
                step,
                epoch,
                lr,
                loss: value,
            })?;
            step += 1;
        }
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workflow::corpus::{generate_corpus, CorpusConfig};

    #[test]
    fn schedule_warms_up_then_decays_to_a_tenth() {
        let c = PretrainConfig {
            lr: 1.0,
            warmup_steps: 10,
            ..Default::default()
        };
        assert!((c.lr_at(0, 110) - 0.1).abs() < 1e-12);
        assert!((c.lr_at(9, 110) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(10, 110) - 1.0).abs() < 1e-12);
        assert!((c.lr_at(110, 110) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn loss_falls_on_a_small_corpus() {
        let corpus = generate_corpus(
            3,
            &CorpusConfig {
                tasks_per_domain: 4,
                workflows_per_task: 3,
                heldout_per_domain: 1,
                heldout_unseen_tasks: 1,
            },
        )
        .unwrap();
        let tk = Tokenizer::new();
        let cfg = PretrainConfig {
            model: ModelConfig::with_dims(tk.vocab_size(), 16, 1, 2, 32, 128),
            epochs: 8,
            batch_size: 4,
            lr: 1e-2,
            warmup_steps: 2,
            ..Default::default()
        };
        let mut losses = Vec::new();
        pretrain(&tk, &corpus.train, &cfg, |e| {
            losses.push(e.loss);
            Ok(())
        })
        .unwrap();
        let head: f64 = losses[..3].iter().sum::<f64>() / 3.0;
        let tail: f64 = losses[losses.len() - 3..].iter().sum::<f64>() / 3.0;
        assert!(tail < 0.6 * head, "{head} -> {tail}");
    }
}
