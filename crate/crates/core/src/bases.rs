//! Low-rank capability bases and composition of per-site effective weights.
//!
//! Each adapted site carries `K` deltas `ΔB_k = c_k U_k V_kᵀ`; basis `k` at
//! every site belongs to the same capability, so one routing vector drives
//! all sites at once.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{BaseModel, ModelConfig, SiteId};
use crate::tape::{Tape, Var};
use crate::tensor::{Real, Tensor};

/// Shape of the basis set and the sparsity of composition.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CapabilityConfig {
    pub num_bases: usize,
    pub rank: usize,
    pub top_m: usize,
}

impl Default for CapabilityConfig {
    fn default() -> Self {
        Self {
            num_bases: 8,
            rank: 4,
            top_m: 3,
        }
    }
}

impl CapabilityConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_bases == 0 || self.rank == 0 {
            return Err(Error::Config("num_bases and rank must be positive".into()));
        }
        if self.top_m == 0 || self.top_m > self.num_bases {
            return Err(Error::Config(format!(
                "top_m {} must lie in 1..={}",
                self.top_m, self.num_bases
            )));
        }
        Ok(())
    }
}

pub const INIT_LOG_SCALE: f64 = -std::f64::consts::LN_10; // ln 0.1

/// Unit-norm row normalization epsilon in the orthogonality penalty.
pub const ORTHO_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct CapabilityBasis<T> {
    /// `d_out x r`
    pub u: Tensor<T>,
    /// `d_in x r`
    pub v: Tensor<T>,
    /// ĉ; the scale is `c = exp(ĉ) > 0`.
    pub log_scale: T,
}

impl<T: Real> CapabilityBasis<T> {
    pub fn scale(&self) -> T {
        self.log_scale.exp()
    }

    pub fn rank(&self) -> usize {
        self.u.cols()
    }
}

/// `ΔB = c U Vᵀ`, shape `d_out x d_in`.
pub fn basis_delta<T: Real>(b: &CapabilityBasis<T>) -> Tensor<T> {
    b.u.matmul_nt(&b.v).scaled(b.scale())
}

/// `M + Σ_k w_k ΔB_k`, skipping zero weights.
pub fn compose_site<T: Real>(m: &Tensor<T>, bases: &[CapabilityBasis<T>], weights: &[T]) -> Result<Tensor<T>> {
    if weights.len() != bases.len() {
        return Err(Error::Config(format!(
            "routing vector has {} entries for {} bases",
            weights.len(),
            bases.len()
        )));
    }
    let mut out = m.clone();
    for (b, &w) in bases.iter().zip(weights) {
        if w != T::zero() {
            // c U Vᵀ accumulated straight into the output
            Tensor::gemm_into(&b.u, false, &b.v, true, w * b.scale(), T::one(), &mut out);
        }
    }
    Ok(out)
}

/// Indices of the `m` largest entries; ties go to the lower index. Sorted
/// ascending.
pub fn top_m_indices(alpha: &[f64], m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..alpha.len()).collect();
    idx.sort_by(|&a, &b| alpha[b].total_cmp(&alpha[a]).then(a.cmp(&b)));
    idx.truncate(m);
    idx.sort_unstable();
    idx
}

/// Keeps the `m` largest entries, zeroes the rest and renormalizes.
pub fn sparse_topm(alpha: &[f64], m: usize) -> Result<Vec<f64>> {
    if m == 0 || m > alpha.len() {
        return Err(Error::Config(format!("top-m with m = {m} over {} bases", alpha.len())));
    }
    let keep = top_m_indices(alpha, m);
    let total: f64 = keep.iter().map(|&i| alpha[i]).sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(Error::Degenerate("routing vector has no mass to renormalize".into()));
    }
    let mut out = vec![0.0; alpha.len()];
    for i in keep {
        out[i] = alpha[i] / total;
    }
    Ok(out)
}

/// Indices with nonzero weight.
pub fn support(alpha: &[f64]) -> Vec<usize> {
    (0..alpha.len()).filter(|&i| alpha[i] > 0.0).collect()
}

/// The bases of one site.
#[derive(Clone, Debug, PartialEq)]
pub struct SiteBases<T> {
    pub site: SiteId,
    pub bases: Vec<CapabilityBasis<T>>,
}

/// Φ: every basis at every adapted site.
#[derive(Clone, Debug, PartialEq)]
pub struct CapabilityBasisSet<T> {
    pub config: CapabilityConfig,
    pub sites: Vec<SiteBases<T>>,
}

impl<T: Real> CapabilityBasisSet<T> {
    /// `U ~ N(0, 1/sqrt(r))`, `V = 0`, `ĉ = ln 0.1`: every delta starts at
    /// zero.
    pub fn init(model: &ModelConfig, config: CapabilityConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        model.validate()?;
        let normal = Normal::new(0.0, 1.0 / (config.rank as f64).sqrt()).expect("positive std");
        let mut sites = Vec::new();
        for &site in &model.adapted_sites {
            let (d_out, d_in) = model.site_shape(site);
            let bases = (0..config.num_bases)
                .map(|_| CapabilityBasis {
                    u: Tensor::from_fn(d_out, config.rank, |_, _| T::lit(normal.sample(&mut *rng))),
                    v: Tensor::zeros(d_in, config.rank),
                    log_scale: T::lit(INIT_LOG_SCALE),
                })
                .collect();
            sites.push(SiteBases { site, bases });
        }
        Ok(Self { config, sites })
    }

    pub fn num_bases(&self) -> usize {
        self.config.num_bases
    }

    /// Effective weights `M(q)` at every site for one routing vector.
    pub fn compose(&self, base: &BaseModel<T>, alpha: &[f64]) -> Result<BTreeMap<SiteId, Tensor<T>>> {
        let w: Vec<T> = alpha.iter().map(|&a| T::lit(a)).collect();
        let mut out = BTreeMap::new();
        for sb in &self.sites {
            out.insert(sb.site, compose_site(base.site_weight(sb.site), &sb.bases, &w)?);
        }
        Ok(out)
    }

    /// Parameters in checkpoint order: `bases/<site>/<k>/{U,V,log_scale}`.
    pub fn named_tensors(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        for sb in &self.sites {
            for (k, b) in sb.bases.iter().enumerate() {
                let p = format!("bases/{}/{k}", sb.site);
                out.push((format!("{p}/U"), b.u.clone()));
                out.push((format!("{p}/V"), b.v.clone()));
                out.push((format!("{p}/log_scale"), Tensor::scalar(b.log_scale)));
            }
        }
        out
    }

    /// Mutable views in [`Self::named_tensors`] order; the scale is exposed
    /// through `f` as a `1 x 1` tensor and written back.
    pub fn visit_mut(&mut self, mut f: impl FnMut(usize, &mut Tensor<T>)) {
        let mut i = 0;
        for sb in &mut self.sites {
            for b in &mut sb.bases {
                f(i, &mut b.u);
                f(i + 1, &mut b.v);
                let mut c = Tensor::scalar(b.log_scale);
                f(i + 2, &mut c);
                b.log_scale = c.item();
                i += 3;
            }
        }
    }

    pub fn from_named(config: CapabilityConfig, model: &ModelConfig, mut get: impl FnMut(&str) -> Result<Tensor<T>>) -> Result<Self> {
        let mut sites = Vec::new();
        for &site in &model.adapted_sites {
            let mut bases = Vec::new();
            for k in 0..config.num_bases {
                let p = format!("bases/{site}/{k}");
                bases.push(CapabilityBasis {
                    u: get(&format!("{p}/U"))?,
                    v: get(&format!("{p}/V"))?,
                    log_scale: get(&format!("{p}/log_scale"))?.item(),
                });
            }
            sites.push(SiteBases { site, bases });
        }
        Ok(Self { config, sites })
    }

    pub fn cast<U: Real>(&self) -> CapabilityBasisSet<U> {
        CapabilityBasisSet {
            config: self.config.clone(),
            sites: self
                .sites
                .iter()
                .map(|sb| SiteBases {
                    site: sb.site,
                    bases: sb
                        .bases
                        .iter()
                        .map(|b| CapabilityBasis {
                            u: b.u.cast(),
                            v: b.v.cast(),
                            log_scale: U::lit(b.log_scale.as_f64()),
                        })
                        .collect(),
                })
                .collect(),
        }
    }

    /// Puts Φ on the tape as trainable leaves (or constants).
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> BoundBases {
        let mut sites = Vec::new();
        let leaf = |t: Tensor<T>, tape: &mut Tape<T>| if trainable { tape.param(t) } else { tape.constant(t) };
        for sb in &self.sites {
            let bases = sb
                .bases
                .iter()
                .map(|b| BoundBasis {
                    u: leaf(b.u.clone(), tape),
                    v: leaf(b.v.clone(), tape),
                    log_scale: leaf(Tensor::scalar(b.log_scale), tape),
                })
                .collect();
            sites.push((sb.site, bases));
        }
        BoundBases { sites }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundBasis {
    pub u: Var,
    pub v: Var,
    pub log_scale: Var,
}

#[derive(Clone, Debug)]
pub struct BoundBases {
    pub sites: Vec<(SiteId, Vec<BoundBasis>)>,
}

impl BoundBases {
    /// Vars in [`CapabilityBasisSet::named_tensors`] order.
    pub fn vars(&self) -> Vec<Var> {
        self.sites
            .iter()
            .flat_map(|(_, bs)| bs.iter().flat_map(|b| [b.u, b.v, b.log_scale]))
            .collect()
    }

    /// On-tape `M + Σ α_k c_k U_k V_kᵀ` for every site, with `α` a constant
    /// (detached) routing vector. Zero entries add nothing to the tape.
    pub fn compose_tape<T: Real>(
        &self,
        tape: &mut Tape<T>,
        base: &BaseModel<T>,
        alpha: &[f64],
    ) -> Result<BTreeMap<SiteId, Var>> {
        let mut out = BTreeMap::new();
        for (site, bases) in &self.sites {
            if alpha.len() != bases.len() {
                return Err(Error::Config(format!(
                    "routing vector has {} entries for {} bases",
                    alpha.len(),
                    bases.len()
                )));
            }
            let mut acc = tape.constant(base.site_weight(*site).clone());
            for (b, &a) in bases.iter().zip(alpha) {
                if a == 0.0 {
                    continue;
                }
                let uv = tape.matmul_nt(b.u, b.v);
                let c = tape.exp(b.log_scale);
                let coef = tape.scale(c, T::lit(a));
                let term = tape.scale_by(uv, coef);
                acc = tape.add(acc, term);
            }
            out.insert(*site, acc);
        }
        Ok(out)
    }

    /// On-tape orthogonality penalty; see [`orthogonality_penalty`].
    pub fn orthogonality_tape<T: Real>(&self, tape: &mut Tape<T>) -> Var {
        let mut terms = Vec::new();
        for (_, bases) in &self.sites {
            let k = bases.len();
            for factor in 0..2 {
                let rows: Vec<Var> = bases
                    .iter()
                    .map(|b| {
                        let m = if factor == 0 { b.u } else { b.v };
                        let (r, c) = tape.value(m).shape();
                        tape.reshape(m, 1, r * c)
                    })
                    .collect();
                let stacked = tape.concat_rows(&rows);
                let unit = tape.row_normalize(stacked, T::lit(ORTHO_EPS));
                let gram = tape.matmul_nt(unit, unit);
                let eye = tape.constant(Tensor::identity(k));
                let diff = tape.sub(gram, eye);
                let sq = tape.mul(diff, diff);
                terms.push(tape.sum(sq));
            }
        }
        let all = tape.stack(&terms);
        tape.sum(all)
    }
}

/// `Σ_sites ‖B_U B_Uᵀ − I‖² + ‖B_V B_Vᵀ − I‖²` where the rows of `B_U`/`B_V`
/// are the flattened factors of each basis scaled to unit length.
pub fn orthogonality_penalty<T: Real>(set: &CapabilityBasisSet<T>) -> f64 {
    let mut total = 0.0;
    for sb in &set.sites {
        for factor in 0..2 {
            let rows: Vec<Vec<f64>> = sb
                .bases
                .iter()
                .map(|b| {
                    let m = if factor == 0 { &b.u } else { &b.v };
                    let v: Vec<f64> = m.data().iter().map(|x| x.as_f64()).collect();
                    let n = (v.iter().map(|x| x * x).sum::<f64>() + ORTHO_EPS).sqrt();
                    v.into_iter().map(|x| x / n).collect()
                })
                .collect();
            total += gram_deviation(&rows);
        }
    }
    total
}

/// `‖R Rᵀ − I‖_F²` for the given rows.
pub fn gram_deviation(rows: &[Vec<f64>]) -> f64 {
    let mut s = 0.0;
    for (i, a) in rows.iter().enumerate() {
        for (j, b) in rows.iter().enumerate() {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            let target = if i == j { 1.0 } else { 0.0 };
            s += (dot - target) * (dot - target);
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn basis(u: Vec<f64>, v: Vec<f64>, c: f64) -> CapabilityBasis<f64> {
        let (nu, nv) = (u.len(), v.len());
        CapabilityBasis {
            u: Tensor::from_vec(nu, 1, u).unwrap(),
            v: Tensor::from_vec(nv, 1, v).unwrap(),
            log_scale: c.ln(),
        }
    }

    #[test]
    fn delta_hand_product() {
        let b = basis(vec![1.0, 0.0], vec![0.0, 1.0], 2.0);
        let d = basis_delta(&b);
        assert!(d.max_abs_diff(&Tensor::from_vec(2, 2, vec![0.0, 2.0, 0.0, 0.0]).unwrap()) < 1e-15);
    }

    #[test]
    fn delta_vanishes_with_scale() {
        let mut b = basis(vec![1.0, 2.0], vec![3.0, 1.0], 1.0);
        b.log_scale = -60.0;
        assert!(basis_delta(&b).frobenius_sq() < 1e-40);
    }

    #[test]
    fn compose_hand_arithmetic() {
        let b1 = basis(vec![1.0, 0.0], vec![1.0, 0.0], 1.0);
        let b2 = basis(vec![0.0, 1.0], vec![0.0, 1.0], 1.0);
        let m = Tensor::zeros(2, 2);
        let out = compose_site(&m, &[b1.clone(), b2.clone()], &[0.25, 0.75]).unwrap();
        assert!(out.max_abs_diff(&Tensor::from_vec(2, 2, vec![0.25, 0.0, 0.0, 0.75]).unwrap()) < 1e-15);
        assert!(matches!(compose_site(&m, &[b1, b2], &[1.0]), Err(Error::Config(_))));
    }

    #[test]
    fn topm_examples() {
        let out = sparse_topm(&[0.5, 0.3, 0.15, 0.05], 2).unwrap();
        assert!((out[0] - 0.625).abs() < 1e-12 && (out[1] - 0.375).abs() < 1e-12);
        assert_eq!(&out[2..], &[0.0, 0.0]);
        assert_eq!(top_m_indices(&[0.25; 4], 2), vec![0, 1]);
        assert!(matches!(sparse_topm(&[0.0; 3], 2), Err(Error::Degenerate(_))));
        assert!(matches!(sparse_topm(&[1.0], 2), Err(Error::Config(_))));
    }

    #[test]
    fn ortho_identical_rows() {
        let rows = vec![vec![0.6, 0.8], vec![0.6, 0.8]];
        assert!((gram_deviation(&rows) - 2.0).abs() < 1e-12);
        assert!(gram_deviation(&[vec![1.0, 0.0], vec![0.0, 1.0]]) < 1e-15);
    }

    #[test]
    fn ortho_tape_matches_pure() {
        let cfg = ModelConfig::with_dims(16, 8, 1, 2, 16, 12);
        let mut rng = crate::rng::substream(4, crate::rng::Stream::Init);
        let mut set = CapabilityBasisSet::<f64>::init(&cfg, CapabilityConfig::default(), &mut rng).unwrap();
        set.visit_mut(|i, t| {
            if i % 3 == 1 {
                for (j, x) in t.data_mut().iter_mut().enumerate() {
                    *x = ((i * 7 + j * 3) % 11) as f64 - 5.0;
                }
            }
        });
        let mut tape = Tape::new();
        let bound = set.bind(&mut tape, true);
        let p = bound.orthogonality_tape(&mut tape);
        assert!((tape.scalar(p) - orthogonality_penalty(&set)).abs() < 1e-10);
    }
}
