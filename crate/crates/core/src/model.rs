//! Tiny decoder-only causal language model.
//!
//! Pre-norm blocks, learned absolute positions, GELU MLP, untied output
//! projection, no biases on the linear maps. Every linear map stores its
//! weight as `d_out x d_in` and is applied as `x Wᵀ`. Selected linear maps
//! ("sites") accept per-call weight overrides, which is how composed
//! capability weights enter the forward pass.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};
use crate::workflow::Tokenizer;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    /// Attention query projection, `d_model x d_model`.
    Query,
    /// Attention value projection, `d_model x d_model`.
    Value,
    /// MLP down-projection, `d_model x d_mlp`.
    Down,
}

impl SiteKind {
    pub const ALL: [SiteKind; 3] = [SiteKind::Query, SiteKind::Value, SiteKind::Down];

    pub fn name(self) -> &'static str {
        match self {
            SiteKind::Query => "query",
            SiteKind::Value => "value",
            SiteKind::Down => "down",
        }
    }
}

/// One adaptable linear map: a layer index and which projection.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SiteId {
    pub layer: usize,
    pub kind: SiteKind,
}

impl SiteId {
    pub fn new(layer: usize, kind: SiteKind) -> Self {
        Self { layer, kind }
    }
}

impl fmt::Display for SiteId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "layer{}.{}", self.layer, self.kind.name())
    }
}

impl FromStr for SiteId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("invalid site name `{s}`"));
        let (layer, kind) = s.split_once('.').ok_or_else(bad)?;
        let layer = layer.strip_prefix("layer").ok_or_else(bad)?.parse().map_err(|_| bad())?;
        let kind = SiteKind::ALL.into_iter().find(|k| k.name() == kind).ok_or_else(bad)?;
        Ok(SiteId { layer, kind })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_mlp: usize,
    pub max_seq_len: usize,
    pub adapted_sites: Vec<SiteId>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::with_dims(crate::workflow::VOCAB_SIZE, 64, 2, 4, 256, 256)
    }
}

impl ModelConfig {
    /// Query, value and down-projection adapted in every layer.
    pub fn with_dims(
        vocab_size: usize,
        d_model: usize,
        n_layers: usize,
        n_heads: usize,
        d_mlp: usize,
        max_seq_len: usize,
    ) -> Self {
        Self {
            vocab_size,
            d_model,
            n_layers,
            n_heads,
            d_mlp,
            max_seq_len,
            adapted_sites: Self::all_sites(n_layers),
        }
    }

    pub fn all_sites(n_layers: usize) -> Vec<SiteId> {
        (0..n_layers)
            .flat_map(|l| SiteKind::ALL.into_iter().map(move |k| SiteId::new(l, k)))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.d_mlp == 0 {
            return fail("model dimensions must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return fail(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.max_seq_len < 2 {
            return fail("max_seq_len must be at least 2".into());
        }
        if self.adapted_sites.is_empty() {
            return fail("adapted_sites is empty".into());
        }
        for s in &self.adapted_sites {
            if s.layer >= self.n_layers {
                return fail(format!("adapted site {s} names a missing layer"));
            }
        }
        let mut seen = self.adapted_sites.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.adapted_sites.len() {
            return fail("adapted_sites lists a site twice".into());
        }
        Ok(())
    }

    /// `(d_out, d_in)` of a site's weight.
    pub fn site_shape(&self, site: SiteId) -> (usize, usize) {
        match site.kind {
            SiteKind::Query | SiteKind::Value => (self.d_model, self.d_model),
            SiteKind::Down => (self.d_model, self.d_mlp),
        }
    }
}

/// Token ids with the boundary between prompt and target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
    prompt_length: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, prompt_length: usize, config: &ModelConfig) -> Result<Self> {
        if prompt_length == 0 || prompt_length >= ids.len() {
            return Err(Error::Domain(format!(
                "prompt length {prompt_length} leaves no target tokens in a sequence of {}",
                ids.len()
            )));
        }
        check_ids(&ids, config)?;
        Ok(Self { ids, prompt_length })
    }

    /// `<bos> question <sep> workflow <eos>`; the prompt ends after `<sep>`.
    pub fn format(tk: &Tokenizer, question: &str, workflow: &str, config: &ModelConfig) -> Result<Self> {
        let mut ids = Self::prompt_ids(tk, question);
        let prompt_length = ids.len();
        ids.extend(tk.tokenize(workflow));
        ids.push(tk.eos());
        Self::new(ids, prompt_length, config)
    }

    /// `<bos> question <sep>`
    pub fn prompt_ids(tk: &Tokenizer, question: &str) -> Vec<usize> {
        let mut ids = vec![tk.bos()];
        ids.extend(tk.tokenize(question));
        ids.push(tk.sep());
        ids
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    pub fn prompt_length(&self) -> usize {
        self.prompt_length
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn target_count(&self) -> usize {
        self.ids.len() - self.prompt_length
    }

    /// `(logit row, token)` for each target: row `t - 1` predicts token `t`.
    pub fn target_picks(&self) -> Vec<(usize, usize)> {
        (self.prompt_length..self.ids.len()).map(|t| (t - 1, self.ids[t])).collect()
    }
}

fn check_ids(ids: &[usize], config: &ModelConfig) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::Input("empty token sequence".into()));
    }
    if ids.len() > config.max_seq_len {
        return Err(Error::Input(format!(
            "sequence of {} tokens exceeds max_seq_len {}",
            ids.len(),
            config.max_seq_len
        )));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= config.vocab_size) {
        return Err(Error::Input(format!("token id {bad} outside vocabulary of {}", config.vocab_size)));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerWeights<T> {
    pub ln1_gain: Tensor<T>,
    pub ln1_bias: Tensor<T>,
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub ln2_gain: Tensor<T>,
    pub ln2_bias: Tensor<T>,
    pub w_up: Tensor<T>,
    pub w_down: Tensor<T>,
}

const LAYER_FIELDS: [&str; 10] = [
    "ln1_gain", "ln1_bias", "w_q", "w_k", "w_v", "w_o", "ln2_gain", "ln2_bias", "w_up", "w_down",
];

impl<T: Real> LayerWeights<T> {
    fn fields(&self) -> [&Tensor<T>; 10] {
        [
            &self.ln1_gain,
            &self.ln1_bias,
            &self.w_q,
            &self.w_k,
            &self.w_v,
            &self.w_o,
            &self.ln2_gain,
            &self.ln2_bias,
            &self.w_up,
            &self.w_down,
        ]
    }

    fn fields_mut(&mut self) -> [&mut Tensor<T>; 10] {
        [
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.w_q,
            &mut self.w_k,
            &mut self.w_v,
            &mut self.w_o,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
            &mut self.w_up,
            &mut self.w_down,
        ]
    }
}

/// The parameters θ0. Trained by [`crate::pretrain`], frozen afterwards.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseModel<T> {
    pub config: ModelConfig,
    pub tok_emb: Tensor<T>,
    pub pos_emb: Tensor<T>,
    pub layers: Vec<LayerWeights<T>>,
    pub lnf_gain: Tensor<T>,
    pub lnf_bias: Tensor<T>,
    pub lm_head: Tensor<T>,
}

/// Vars of a base model bound to a tape, in [`BaseModel::named_tensors`] order.
#[derive(Clone, Debug)]
pub struct BoundBase {
    pub vars: Vec<Var>,
}

impl BoundBase {
    fn tok_emb(&self) -> Var {
        self.vars[0]
    }

    fn pos_emb(&self) -> Var {
        self.vars[1]
    }

    fn layer(&self, l: usize, field: usize) -> Var {
        self.vars[2 + l * LAYER_FIELDS.len() + field]
    }

    fn tail(&self, i: usize) -> Var {
        self.vars[self.vars.len() - 3 + i]
    }
}

/// Hidden states after the final layer norm and the output logits.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    pub hidden: Var,
    pub logits: Var,
}

impl<T: Real> BaseModel<T> {
    /// Gaussian init with std 0.02; residual output projections scaled by
    /// `1/sqrt(2 n_layers)`; layer norms start at identity.
    pub fn init(config: ModelConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let std = 0.02;
        let resid_std = std / (2.0 * config.n_layers as f64).sqrt();
        let mut gauss = |rows: usize, cols: usize, s: f64| {
            let n = Normal::new(0.0, s).expect("positive std");
            Tensor::from_fn(rows, cols, |_, _| T::lit(n.sample(&mut *rng)))
        };
        let (d, f) = (config.d_model, config.d_mlp);
        let tok_emb = gauss(config.vocab_size, d, std);
        let pos_emb = gauss(config.max_seq_len, d, std);
        let mut layers = Vec::new();
        for _ in 0..config.n_layers {
            layers.push(LayerWeights {
                ln1_gain: Tensor::filled(1, d, T::one()),
                ln1_bias: Tensor::zeros(1, d),
                w_q: gauss(d, d, std),
                w_k: gauss(d, d, std),
                w_v: gauss(d, d, std),
                w_o: gauss(d, d, resid_std),
                ln2_gain: Tensor::filled(1, d, T::one()),
                ln2_bias: Tensor::zeros(1, d),
                w_up: gauss(f, d, std),
                w_down: gauss(d, f, resid_std),
            });
        }
        let lm_head = gauss(config.vocab_size, d, std);
        Ok(Self {
            lnf_gain: Tensor::filled(1, d, T::one()),
            lnf_bias: Tensor::zeros(1, d),
            config,
            tok_emb,
            pos_emb,
            layers,
            lm_head,
        })
    }

    /// Every parameter with its stable name.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("layers.{l}.{name}"), t));
            }
        }
        out.push(("lnf_gain".into(), &self.lnf_gain));
        out.push(("lnf_bias".into(), &self.lnf_bias));
        out.push(("lm_head".into(), &self.lm_head));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        out.push(&mut self.lnf_gain);
        out.push(&mut self.lnf_bias);
        out.push(&mut self.lm_head);
        out
    }

    /// Checks every tensor against the shape implied by the config.
    pub fn validate_shapes(&self) -> Result<()> {
        let c = &self.config;
        let (d, f, v) = (c.d_model, c.d_mlp, c.vocab_size);
        if self.layers.len() != c.n_layers {
            return Err(Error::Shape(format!("{} layers for n_layers {}", self.layers.len(), c.n_layers)));
        }
        let layer = [(1, d), (1, d), (d, d), (d, d), (d, d), (d, d), (1, d), (1, d), (f, d), (d, f)];
        let mut want = vec![(v, d), (c.max_seq_len, d)];
        for _ in 0..c.n_layers {
            want.extend(layer);
        }
        want.extend([(1, d), (1, d), (v, d)]);
        for ((name, t), shape) in self.named_tensors().into_iter().zip(want) {
            if t.shape() != shape {
                return Err(Error::Shape(format!(
                    "tensor {name} has shape {:?}, config implies {shape:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn cast<U: Real>(&self) -> BaseModel<U> {
        BaseModel {
            config: self.config.clone(),
            tok_emb: self.tok_emb.cast(),
            pos_emb: self.pos_emb.cast(),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    ln1_gain: l.ln1_gain.cast(),
                    ln1_bias: l.ln1_bias.cast(),
                    w_q: l.w_q.cast(),
                    w_k: l.w_k.cast(),
                    w_v: l.w_v.cast(),
                    w_o: l.w_o.cast(),
                    ln2_gain: l.ln2_gain.cast(),
                    ln2_bias: l.ln2_bias.cast(),
                    w_up: l.w_up.cast(),
                    w_down: l.w_down.cast(),
                })
                .collect(),
            lnf_gain: self.lnf_gain.cast(),
            lnf_bias: self.lnf_bias.cast(),
            lm_head: self.lm_head.cast(),
        }
    }

    /// The frozen weight `M` at a site.
    pub fn site_weight(&self, site: SiteId) -> &Tensor<T> {
        let l = &self.layers[site.layer];
        match site.kind {
            SiteKind::Query => &l.w_q,
            SiteKind::Value => &l.w_v,
            SiteKind::Down => &l.w_down,
        }
    }

    /// SHA-256 over the names, shapes and little-endian f32 values of
    /// every parameter.
    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.named_tensors() {
            h.update(name.as_bytes());
            h.update((t.rows() as u64).to_le_bytes());
            h.update((t.cols() as u64).to_le_bytes());
            for &x in t.data() {
                h.update((x.as_f64() as f32).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Puts every parameter on the tape, as trainable leaves or constants.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundBase {
        let vars = self
            .named_tensors()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundBase { vars }
    }

    /// Rejects overrides at sites outside `adapted_sites` or with the wrong
    /// shape, naming the site.
    pub fn check_overrides(&self, overrides: impl IntoIterator<Item = (SiteId, (usize, usize))>) -> Result<()> {
        for (site, shape) in overrides {
            if !self.config.adapted_sites.contains(&site) {
                return Err(Error::Config(format!("override for site {site}, which is not an adapted site")));
            }
            let want = self.config.site_shape(site);
            if shape != want {
                return Err(Error::Config(format!(
                    "override for site {site} has shape {}x{}, expected {}x{}",
                    shape.0, shape.1, want.0, want.1
                )));
            }
        }
        Ok(())
    }

    /// Forward pass on a tape. `overrides` replace the bound weight at their
    /// site.
    pub fn forward_tape(
        &self,
        tape: &mut Tape<T>,
        bound: &BoundBase,
        overrides: &BTreeMap<SiteId, Var>,
        ids: &[usize],
    ) -> Result<ForwardVars> {
        check_ids(ids, &self.config)?;
        self.check_overrides(overrides.iter().map(|(&s, &v)| (s, tape.value(v).shape())))?;
        let cfg = &self.config;
        let n = ids.len();
        let dh = cfg.d_model / cfg.n_heads;
        let inv_sqrt = T::lit(1.0 / (dh as f64).sqrt());
        let positions: Vec<usize> = (0..n).collect();

        let tok = tape.gather(bound.tok_emb(), ids);
        let pos = tape.gather(bound.pos_emb(), &positions);
        let mut x = tape.add(tok, pos);
        for l in 0..cfg.n_layers {
            let w = |field: usize, kind: Option<SiteKind>| {
                kind.and_then(|k| overrides.get(&SiteId::new(l, k)).copied())
                    .unwrap_or(bound.layer(l, field))
            };
            let h = tape.layer_norm(x, bound.layer(l, 0), bound.layer(l, 1));
            let q = tape.matmul_nt(h, w(2, Some(SiteKind::Query)));
            let k = tape.matmul_nt(h, w(3, None));
            let v = tape.matmul_nt(h, w(4, Some(SiteKind::Value)));
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for hd in 0..cfg.n_heads {
                let qh = tape.slice_cols(q, hd * dh, dh);
                let kh = tape.slice_cols(k, hd * dh, dh);
                let vh = tape.slice_cols(v, hd * dh, dh);
                let scores = tape.matmul_nt(qh, kh);
                let scores = tape.scale(scores, inv_sqrt);
                let p = tape.causal_softmax(scores);
                heads.push(tape.matmul(p, vh));
            }
            let att = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
            let att = tape.matmul_nt(att, w(5, None));
            x = tape.add(x, att);
            let h2 = tape.layer_norm(x, bound.layer(l, 6), bound.layer(l, 7));
            let up = tape.matmul_nt(h2, w(8, None));
            let act = tape.gelu(up);
            let down = tape.matmul_nt(act, w(9, Some(SiteKind::Down)));
            x = tape.add(x, down);
        }
        let hidden = tape.layer_norm(x, bound.tail(0), bound.tail(1));
        let logits = tape.matmul_nt(hidden, bound.tail(2));
        Ok(ForwardVars { hidden, logits })
    }

    /// Hidden states and logits without gradient tracking.
    pub fn forward(&self, overrides: &BTreeMap<SiteId, Tensor<T>>, ids: &[usize]) -> Result<(Tensor<T>, Tensor<T>)> {
        self.check_overrides(overrides.iter().map(|(&s, t)| (s, t.shape())))?;
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let ov = overrides.iter().map(|(&s, t)| (s, tape.constant(t.clone()))).collect();
        let out = self.forward_tape(&mut tape, &bound, &ov, ids)?;
        Ok((tape.value(out.hidden).clone(), tape.value(out.logits).clone()))
    }

    /// Next-token logits for every position, `len x vocab`.
    pub fn forward_logits(&self, overrides: &BTreeMap<SiteId, Tensor<T>>, ids: &[usize]) -> Result<Tensor<T>> {
        Ok(self.forward(overrides, ids)?.1)
    }

    /// z(q): mean of the final hidden states over the question tokens of
    /// `<bos> question` under the pure base.
    pub fn task_embedding(&self, tk: &Tokenizer, question: &str) -> Result<Vec<T>> {
        let q = tk.tokenize(question);
        if q.is_empty() {
            return Err(Error::Input("task text has no tokens".into()));
        }
        let mut ids = vec![tk.bos()];
        ids.extend(q);
        let (hidden, _) = self.forward(&BTreeMap::new(), &ids)?;
        let d = hidden.cols();
        let count = T::lit((ids.len() - 1) as f64);
        let mut z = vec![T::zero(); d];
        for i in 1..ids.len() {
            for (acc, &h) in z.iter_mut().zip(hidden.row(i)) {
                *acc += h;
            }
        }
        for v in &mut z {
            *v /= count;
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::numerical("task_embedding", "non-finite hidden state"));
        }
        Ok(z)
    }
}

/// ℓ = mean log-probability of the target tokens.
pub fn sequence_log_likelihood<T: Real>(logits: &Tensor<T>, seq: &TokenSequence) -> Result<T> {
    if seq.target_count() == 0 {
        return Err(Error::Domain("sequence has no target tokens".into()));
    }
    if logits.rows() < seq.len() - 1 {
        return Err(Error::Shape(format!(
            "logits have {} rows for a sequence of {}",
            logits.rows(),
            seq.len()
        )));
    }
    let picks = seq.target_picks();
    let total: T = picks
        .iter()
        .map(|&(r, c)| logits.get(r, c) - crate::tensor::log_sum_exp(logits.row(r)))
        .sum();
    Ok(total / T::lit(picks.len() as f64))
}

/// On-tape ℓ as a `1 x 1` node.
pub fn sequence_log_likelihood_tape<T: Real>(tape: &mut Tape<T>, logits: Var, seq: &TokenSequence) -> Result<Var> {
    if seq.target_count() == 0 {
        return Err(Error::Domain("sequence has no target tokens".into()));
    }
    let lp = tape.pick_log_softmax(logits, &seq.target_picks());
    Ok(tape.mean(lp))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};

    fn micro() -> BaseModel<f64> {
        let cfg = ModelConfig::with_dims(16, 8, 1, 2, 16, 12);
        BaseModel::init(cfg, &mut substream(1, Stream::Init)).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = ModelConfig::default();
        assert!(c.validate().is_ok());
        c.n_heads = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = ModelConfig::default();
        c.adapted_sites.push(SiteId::new(7, SiteKind::Query));
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.adapted_sites.clear();
        assert!(c.validate().is_err());
    }

    #[test]
    fn site_names_round_trip() {
        for s in ModelConfig::all_sites(3) {
            assert_eq!(s.to_string().parse::<SiteId>().unwrap(), s);
        }
        assert!("layer0.key".parse::<SiteId>().is_err());
    }

    #[test]
    fn empty_overrides_match_base_and_bad_shapes_name_the_site() {
        let m = micro();
        let ids = [1, 4, 7, 2];
        let a = m.forward_logits(&BTreeMap::new(), &ids).unwrap();
        let mut ov = BTreeMap::new();
        ov.insert(SiteId::new(0, SiteKind::Query), m.layers[0].w_q.clone());
        assert_eq!(m.forward_logits(&ov, &ids).unwrap(), a);
        ov.insert(SiteId::new(0, SiteKind::Down), Tensor::zeros(8, 8));
        let err = m.forward_logits(&ov, &ids).unwrap_err().to_string();
        assert!(err.contains("layer0.down"), "{err}");
    }

    #[test]
    fn causal_masking() {
        let m = micro();
        let a = m.forward_logits(&BTreeMap::new(), &[1, 4, 7, 2, 9]).unwrap();
        let b = m.forward_logits(&BTreeMap::new(), &[1, 4, 7, 11, 3]).unwrap();
        for t in 0..3 {
            assert_eq!(a.row(t), b.row(t));
        }
        assert!(a.row(3) != b.row(3));
    }

    #[test]
    fn likelihood_closed_forms() {
        let cfg = ModelConfig::with_dims(4, 8, 1, 2, 8, 8);
        let seq = TokenSequence::new(vec![0, 1, 2, 3], 2, &cfg).unwrap();
        let uniform = Tensor::<f64>::zeros(4, 4);
        let l = sequence_log_likelihood(&uniform, &seq).unwrap();
        assert!((l + 4f64.ln()).abs() < 1e-12);

        let cfg2 = ModelConfig::with_dims(2, 8, 1, 2, 8, 8);
        let seq2 = TokenSequence::new(vec![0, 0, 1], 1, &cfg2).unwrap();
        // row 0 gives p(0) = 0.5, row 1 gives p(1) = 0.25
        let logits = Tensor::from_vec(3, 2, vec![0.0, 0.0, 3f64.ln(), 0.0, 0.0, 0.0]).unwrap();
        let l2 = sequence_log_likelihood(&logits, &seq2).unwrap();
        assert!((l2 - (0.5f64.ln() + 0.25f64.ln()) / 2.0).abs() < 1e-12);
        assert!(TokenSequence::new(vec![0, 1], 2, &cfg2).is_err());
    }

    #[test]
    fn task_embedding_is_deterministic_and_single_token_is_one_state() {
        let cfg = ModelConfig::with_dims(crate::workflow::VOCAB_SIZE, 8, 1, 2, 16, 32);
        let m = BaseModel::<f64>::init(cfg, &mut substream(3, Stream::Init)).unwrap();
        let tk = Tokenizer::new();
        let a = m.task_embedding(&tk, "please graph compare views").unwrap();
        let b = m.task_embedding(&tk, "please graph compare views").unwrap();
        assert_eq!(a, b);
        let single = m.task_embedding(&tk, "graph").unwrap();
        let (hidden, _) = m.forward(&BTreeMap::new(), &[tk.bos(), tk.id("graph")]).unwrap();
        assert_eq!(single, hidden.row(1).to_vec());
        assert!(matches!(m.task_embedding(&tk, "  "), Err(Error::Input(_))));
    }

    #[test]
    fn hash_tracks_parameter_changes() {
        let mut m = micro();
        let h = m.hash();
        assert_eq!(h, m.clone().hash());
        m.lm_head.data_mut()[0] += 1.0;
        assert_ne!(h, m.hash());
    }
}
