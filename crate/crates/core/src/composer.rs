//! Task-conditioned routing over capability bases.
//!
//! Two separate two-layer perceptrons read the task embedding: one emits
//! routing logits `u`, the other a temperature offset `Δt`. The effective
//! temperature is `T = T0 exp(Δt)` and `α = softmax(u / T)`, with the raw
//! head output bounded smoothly as `Δt = b tanh(raw / b)`.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bases::{sparse_topm, support};
use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{softmax, Real, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ComposerConfig {
    pub hidden: usize,
    pub t0: f64,
    /// `Δt` stays inside `(-bound, bound)`.
    pub dt_bound: f64,
    /// Std of the logits head's output weights at init; 0 gives exactly
    /// uniform initial routing for every task.
    pub logits_init_std: f64,
    /// Standardize z per dimension with statistics of the training tasks
    /// before either head reads it.
    pub standardize_input: bool,
}

impl Default for ComposerConfig {
    fn default() -> Self {
        Self {
            hidden: 128,
            t0: 1.0,
            dt_bound: 2.0,
            logits_init_std: 1.0,
            standardize_input: true,
        }
    }
}

impl ComposerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 {
            return Err(Error::Config("composer hidden width must be positive".into()));
        }
        if !(self.t0 > 0.0 && self.t0.is_finite()) {
            return Err(Error::Config(format!("T0 = {} must be positive", self.t0)));
        }
        if !(self.dt_bound >= 0.0) {
            return Err(Error::Config("dt_bound must be non-negative".into()));
        }
        if !(self.logits_init_std >= 0.0 && self.logits_init_std.is_finite()) {
            return Err(Error::Config("logits_init_std must be non-negative".into()));
        }
        Ok(())
    }
}

/// `x → W2 tanh(W1 x + b1) + b2`
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub w1: Tensor<T>,
    pub b1: Tensor<T>,
    pub w2: Tensor<T>,
    pub b2: Tensor<T>,
}

impl<T: Real> Mlp<T> {
    /// Glorot-scaled first layer, zero output layer.
    fn init(d_in: usize, hidden: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        let n = Normal::new(0.0, 1.0 / (d_in as f64).sqrt()).expect("positive std");
        Self {
            w1: Tensor::from_fn(hidden, d_in, |_, _| T::lit(n.sample(&mut *rng))),
            b1: Tensor::zeros(1, hidden),
            w2: Tensor::zeros(d_out, hidden),
            b2: Tensor::zeros(1, d_out),
        }
    }

    fn apply(&self, x: &[T]) -> Vec<T> {
        let h: Vec<T> = (0..self.w1.rows())
            .map(|i| {
                let s: T = self.w1.row(i).iter().zip(x).map(|(&w, &v)| w * v).sum();
                (s + self.b1.data()[i]).tanh()
            })
            .collect();
        (0..self.w2.rows())
            .map(|i| self.w2.row(i).iter().zip(&h).map(|(&w, &v)| w * v).sum::<T>() + self.b2.data()[i])
            .collect()
    }

    fn tensors(&self) -> [&Tensor<T>; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    fn apply_tape(&self, tape: &mut Tape<T>, vars: &[Var], x: Var) -> Var {
        let h = tape.matmul_nt(x, vars[0]);
        let h = tape.add_row(h, vars[1]);
        let h = tape.tanh(h);
        let o = tape.matmul_nt(h, vars[2]);
        tape.add_row(o, vars[3])
    }

    fn cast<U: Real>(&self) -> Mlp<U> {
        Mlp {
            w1: self.w1.cast(),
            b1: self.b1.cast(),
            w2: self.w2.cast(),
            b2: self.b2.cast(),
        }
    }
}

const MLP_FIELDS: [&str; 4] = ["w1", "b1", "w2", "b2"];

/// ψ, plus a fixed input standardization `(z - shift) * scale`.
#[derive(Clone, Debug, PartialEq)]
pub struct ComposerParams<T> {
    pub config: ComposerConfig,
    pub num_bases: usize,
    pub logits_head: Mlp<T>,
    pub temp_head: Mlp<T>,
    /// `1 x d`; not trained.
    pub input_shift: Tensor<T>,
    /// `1 x d`; not trained.
    pub input_scale: Tensor<T>,
}

/// One routing of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingDecision {
    pub u: Vec<f64>,
    /// Clamped temperature offset; `T = T0 exp(delta_t)`.
    pub delta_t: f64,
    pub temperature: f64,
    /// The full routing simplex.
    pub alpha: Vec<f64>,
    pub top_m: usize,
    /// Support of the top-m sparsified routing, ascending.
    pub active_set: Vec<usize>,
    pub detached: bool,
}

impl RoutingDecision {
    /// Builds a decision from logits and a bounded offset.
    pub fn from_logits(u: Vec<f64>, delta_t: f64, t0: f64, top_m: usize) -> Result<Self> {
        let temperature = t0 * delta_t.exp();
        let scaled: Vec<f64> = u.iter().map(|&x| x / temperature).collect();
        let alpha = softmax(&scaled);
        let active_set = support(&sparse_topm(&alpha, top_m)?);
        Ok(Self {
            u,
            delta_t,
            temperature,
            alpha,
            top_m,
            active_set,
            detached: false,
        })
    }

    /// The routing weights used for composition: top-m of `alpha`,
    /// renormalized.
    pub fn sparse_alpha(&self) -> Vec<f64> {
        sparse_topm(&self.alpha, self.top_m).expect("alpha is a valid simplex")
    }

    /// Same decision with `alpha` replaced (after dropout) and the active set
    /// recomputed.
    pub fn with_alpha(&self, alpha: Vec<f64>) -> Result<Self> {
        let active_set = support(&sparse_topm(&alpha, self.top_m)?);
        Ok(Self {
            alpha,
            active_set,
            ..self.clone()
        })
    }

    pub fn entropy(&self) -> f64 {
        entropy(&self.alpha)
    }
}

pub fn entropy(alpha: &[f64]) -> f64 {
    -alpha.iter().filter(|&&a| a > 0.0).map(|&a| a * a.ln()).sum::<f64>()
}

/// Stop-gradient snapshot for the generator path: values are bitwise
/// unchanged; consumers put `alpha` on a tape only as a constant.
pub fn detach_for_generation(decision: &RoutingDecision) -> RoutingDecision {
    RoutingDecision {
        detached: true,
        ..decision.clone()
    }
}

/// Zeroes each non-argmax entry with probability `p_drop` and renormalizes.
/// The argmax (lowest index on ties) always survives.
pub fn basis_dropout(alpha: &[f64], p_drop: f64, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if !(0.0..1.0).contains(&p_drop) {
        return Err(Error::Config(format!("p_drop = {p_drop} must lie in [0, 1)")));
    }
    if p_drop == 0.0 {
        return Ok(alpha.to_vec());
    }
    let argmax = (0..alpha.len())
        .fold(0, |best, i| if alpha[i] > alpha[best] { i } else { best });
    let mut out = alpha.to_vec();
    for (i, a) in out.iter_mut().enumerate() {
        // one draw per entry keeps the stream aligned across tasks
        let drop = rng.random::<f64>() < p_drop;
        if i != argmax && drop {
            *a = 0.0;
        }
    }
    let s: f64 = out.iter().sum();
    for a in &mut out {
        *a /= s;
    }
    Ok(out)
}

/// Vars of ψ on a tape.
#[derive(Clone, Debug)]
pub struct BoundComposer {
    pub logits: [Var; 4],
    pub temp: [Var; 4],
}

impl BoundComposer {
    pub fn vars(&self) -> Vec<Var> {
        self.logits.iter().chain(&self.temp).copied().collect()
    }
}

/// On-tape routing of one task.
#[derive(Clone, Copy, Debug)]
pub struct RouteVars {
    /// `1 x K`
    pub alpha: Var,
    /// `1 x K`, computed as `s − logsumexp(s)` with `s = u / T`.
    pub log_alpha: Var,
    /// `1 x 1`, bounded.
    pub delta_t: Var,
}

impl<T: Real> ComposerParams<T> {
    pub fn init(d_model: usize, num_bases: usize, config: ComposerConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let mut logits_head = Mlp::init(d_model, config.hidden, num_bases, rng);
        let temp_head = Mlp::init(d_model, config.hidden, 1, rng);
        if config.logits_init_std > 0.0 {
            let n = Normal::new(0.0, config.logits_init_std).expect("positive std");
            logits_head.w2 = Tensor::from_fn(num_bases, config.hidden, |_, _| T::lit(n.sample(&mut *rng)));
        }
        Ok(Self {
            logits_head,
            temp_head,
            num_bases,
            config,
            input_shift: Tensor::zeros(1, d_model),
            input_scale: Tensor::filled(1, d_model, T::one()),
        })
    }

    /// Sets the standardization to the per-dimension mean and inverse std of
    /// `zs`. Dimensions with std below 1e-6 are only shifted.
    pub fn fit_input(&mut self, zs: &[&[T]]) -> Result<()> {
        let d = self.input_shift.cols();
        if zs.is_empty() || zs.iter().any(|z| z.len() != d) {
            return Err(Error::Input(format!("input statistics need embeddings of width {d}")));
        }
        let n = zs.len() as f64;
        for j in 0..d {
            let mean = zs.iter().map(|z| z[j].as_f64()).sum::<f64>() / n;
            let var = zs.iter().map(|z| (z[j].as_f64() - mean).powi(2)).sum::<f64>() / n;
            let sd = var.sqrt();
            self.input_shift.data_mut()[j] = T::lit(mean);
            self.input_scale.data_mut()[j] = T::lit(if sd < 1e-6 { 1.0 } else { 1.0 / sd });
        }
        Ok(())
    }

    fn standardized(&self, z: &[T]) -> Vec<T> {
        z.iter()
            .zip(self.input_shift.data())
            .zip(self.input_scale.data())
            .map(|((&x, &m), &s)| (x - m) * s)
            .collect()
    }

    /// The untrained standardization tensors.
    pub fn buffers(&self) -> Vec<(String, &Tensor<T>)> {
        vec![
            ("composer/input/shift".to_string(), &self.input_shift),
            ("composer/input/scale".to_string(), &self.input_scale),
        ]
    }

    fn check(&self, z: &[T]) -> Result<()> {
        if z.len() != self.logits_head.w1.cols() {
            return Err(Error::Input(format!(
                "task embedding has {} entries, composer expects {}",
                z.len(),
                self.logits_head.w1.cols()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("task embedding has non-finite entries".into()));
        }
        Ok(())
    }

    /// `(u, bounded Δt)`
    pub fn heads(&self, z: &[T]) -> Result<(Vec<f64>, f64)> {
        self.check(z)?;
        let x = self.standardized(z);
        let u = self.logits_head.apply(&x).into_iter().map(|x| x.as_f64()).collect();
        let raw = self.temp_head.apply(&x)[0].as_f64();
        let b = self.config.dt_bound;
        let dt = if b > 0.0 { b * (raw / b).tanh() } else { 0.0 };
        Ok((u, dt))
    }

    pub fn route(&self, z: &[T], top_m: usize) -> Result<RoutingDecision> {
        let (u, dt) = self.heads(z)?;
        RoutingDecision::from_logits(u, dt, self.config.t0, top_m)
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        for (head, mlp) in [("logits", &self.logits_head), ("temperature", &self.temp_head)] {
            for (f, t) in MLP_FIELDS.iter().zip(mlp.tensors()) {
                out.push((format!("composer/{head}/{f}"), t));
            }
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = self.logits_head.tensors_mut().into_iter().collect();
        out.extend(self.temp_head.tensors_mut());
        out
    }

    pub fn from_named(
        config: ComposerConfig,
        num_bases: usize,
        mut get: impl FnMut(&str) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        let mut heads = Vec::new();
        for head in ["logits", "temperature"] {
            let mut ts = Vec::new();
            for f in MLP_FIELDS {
                ts.push(get(&format!("composer/{head}/{f}"))?);
            }
            let mut it = ts.into_iter();
            heads.push(Mlp {
                w1: it.next().unwrap(),
                b1: it.next().unwrap(),
                w2: it.next().unwrap(),
                b2: it.next().unwrap(),
            });
        }
        let temp_head = heads.pop().unwrap();
        let logits_head = heads.pop().unwrap();
        Ok(Self {
            config,
            num_bases,
            logits_head,
            temp_head,
            input_shift: get("composer/input/shift")?,
            input_scale: get("composer/input/scale")?,
        })
    }

    pub fn cast<U: Real>(&self) -> ComposerParams<U> {
        ComposerParams {
            config: self.config.clone(),
            num_bases: self.num_bases,
            logits_head: self.logits_head.cast(),
            temp_head: self.temp_head.cast(),
            input_shift: self.input_shift.cast(),
            input_scale: self.input_scale.cast(),
        }
    }

    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundComposer {
        let mut leaf = |t: &Tensor<T>| if trainable { tape.param(t.clone()) } else { tape.constant(t.clone()) };
        let l = self.logits_head.tensors().map(&mut leaf);
        let t = self.temp_head.tensors().map(&mut leaf);
        BoundComposer { logits: l, temp: t }
    }

    /// Differentiable routing for the composer objective. `z` is a constant
    /// `1 x d` row.
    pub fn route_tape(&self, tape: &mut Tape<T>, bound: &BoundComposer, z: Var) -> RouteVars {
        let shift = tape.constant(self.input_shift.clone());
        let scale = tape.constant(self.input_scale.clone());
        let z = tape.sub(z, shift);
        let z = tape.mul(z, scale);
        let u = self.logits_head.apply_tape(tape, &bound.logits, z);
        let raw = self.temp_head.apply_tape(tape, &bound.temp, z);
        // A hard clamp would have zero gradient at the bound and could trap
        // the temperature head there.
        let b = self.config.dt_bound;
        let delta_t = if b > 0.0 {
            let x = tape.scale(raw, T::lit(1.0 / b));
            let x = tape.tanh(x);
            tape.scale(x, T::lit(b))
        } else {
            tape.scale(raw, T::zero())
        };
        // 1/T = exp(-(ln T0 + Δt))
        let log_t = tape.add_scalar(delta_t, T::lit(self.config.t0.ln()));
        let neg = tape.scale(log_t, -T::one());
        let inv_t = tape.exp(neg);
        let s = tape.scale_by(u, inv_t);
        let alpha = tape.softmax(s);
        let lse = tape.log_sum_exp(s);
        let ones = tape.constant(Tensor::filled(1, self.num_bases, T::one()));
        let shift = tape.scale_by(ones, lse);
        let log_alpha = tape.sub(s, shift);
        RouteVars {
            alpha,
            log_alpha,
            delta_t,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{substream, Stream};

    #[test]
    fn zero_heads_route_uniformly_at_t0() {
        let cfg = ComposerConfig {
            logits_init_std: 0.0,
            ..Default::default()
        };
        let c = ComposerParams::<f64>::init(8, 4, cfg, &mut substream(1, Stream::Init)).unwrap();
        let d = c.route(&[0.3; 8], 2).unwrap();
        assert!(d.alpha.iter().all(|&a| (a - 0.25).abs() < 1e-15));
        assert_eq!(d.temperature, 1.0);
        assert_eq!(d.active_set, vec![0, 1]);
    }

    #[test]
    fn softmax_oracle_at_temperature_two() {
        let d = RoutingDecision::from_logits(vec![2.0, 0.0, 0.0, 0.0], 2f64.ln(), 1.0, 3).unwrap();
        let e = std::f64::consts::E;
        assert!((d.alpha[0] - e / (e + 3.0)).abs() < 1e-12);
        assert!((d.alpha[1] - 1.0 / (e + 3.0)).abs() < 1e-12);
        assert!((d.temperature - 2.0).abs() < 1e-12);
    }

    #[test]
    fn dropout_keeps_argmax() {
        let mut rng = substream(2, Stream::Dropout);
        assert_eq!(basis_dropout(&[0.6, 0.4], 0.0, &mut rng).unwrap(), vec![0.6, 0.4]);
        assert_eq!(basis_dropout(&[0.0, 1.0, 0.0], 0.9, &mut rng).unwrap(), vec![0.0, 1.0, 0.0]);
        for _ in 0..50 {
            let out = basis_dropout(&[0.6, 0.4], 0.5, &mut rng).unwrap();
            assert!(out == vec![1.0, 0.0] || out == vec![0.6, 0.4]);
        }
        assert!(basis_dropout(&[1.0], 1.0, &mut rng).is_err());
    }

    #[test]
    fn tape_route_matches_pure_route() {
        let mut c = ComposerParams::<f64>::init(6, 5, ComposerConfig::default(), &mut substream(3, Stream::Init)).unwrap();
        let mut rng = substream(9, Stream::Init);
        for t in c.tensors_mut() {
            for x in t.data_mut() {
                *x = rng.random::<f64>() - 0.5;
            }
        }
        let z: Vec<f64> = (0..6).map(|i| (i as f64 * 0.7).sin()).collect();
        let others: Vec<Vec<f64>> = (0..4).map(|k| z.iter().map(|x| x * k as f64 + 0.1).collect()).collect();
        c.fit_input(&others.iter().map(|v| v.as_slice()).collect::<Vec<_>>()).unwrap();
        let d = c.route(&z, 3).unwrap();
        let mut tape = Tape::new();
        let b = c.bind(&mut tape, true);
        let zv = tape.constant(Tensor::row_vector(z));
        let r = c.route_tape(&mut tape, &b, zv);
        for k in 0..5 {
            assert!((tape.value(r.alpha).data()[k] - d.alpha[k]).abs() < 1e-12);
            assert!((tape.value(r.log_alpha).data()[k] - d.alpha[k].ln()).abs() < 1e-12);
        }
        assert!((tape.scalar(r.delta_t) - d.delta_t).abs() < 1e-12);
    }

    #[test]
    fn fitted_input_is_standardized() {
        let mut c = ComposerParams::<f64>::init(2, 3, ComposerConfig::default(), &mut substream(4, Stream::Init)).unwrap();
        c.fit_input(&[&[1.0, 5.0], &[3.0, 5.0]]).unwrap();
        assert_eq!(c.input_shift.data(), &[2.0, 5.0]);
        assert_eq!(c.input_scale.data(), &[1.0, 1.0]);
        assert_eq!(c.standardized(&[3.0, 6.0]), vec![1.0, 1.0]);
        assert!(c.fit_input(&[&[1.0]]).is_err());
    }

    #[test]
    fn random_logits_head_breaks_uniform_routing() {
        let cfg = ComposerConfig {
            logits_init_std: 0.5,
            ..Default::default()
        };
        let c = ComposerParams::<f64>::init(8, 4, cfg, &mut substream(5, Stream::Init)).unwrap();
        let a = c.route(&[0.3; 8], 2).unwrap();
        let b = c.route(&[-0.3; 8], 2).unwrap();
        assert!(a.alpha.iter().any(|&x| (x - 0.25).abs() > 1e-3));
        assert_ne!(a.alpha, b.alpha);
        assert_eq!(a.temperature, 1.0);
    }

    #[test]
    fn detach_preserves_values() {
        let d = RoutingDecision::from_logits(vec![0.1, -0.4, 0.9], 0.3, 1.0, 2).unwrap();
        let dd = detach_for_generation(&d);
        assert!(dd.detached);
        assert_eq!(dd.alpha, d.alpha);
        assert_eq!(dd.u, d.u);
    }
}
