//! Cross-attention that fuses scaled dot-product attention with a
//! Gaussian-mixture attention over source positions.
//!
//! For target position `i`, the mixture attention is
//!
//! ```text
//! β_ij = Σ_k ω_ik / Z_ik · exp(−(j − μ_ik)² / (2 σ_ik²)),   j = 1..J
//! ```
//!
//! with `(ω, μ, σ, Z)` derived from the per-head query `Q(s_i)` by small
//! feed-forward predictors and a conversion layer ([`NormMode`]). The two
//! attentions are mixed per head and target position,
//! `γ_ij = (1 − g_i)·α_ij + g_i·β_ij`, and `γ` weights the values.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::Var;
use crate::error::{contract, Error, Result};
use crate::tensor::Tensor;

/// Smallest σ produced by the approximate clamp (μ pinned at a boundary).
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Minimum row mass accepted before strict renormalization.
pub const STRICT_MIN_MASS: f64 = 1e-12;

/// How raw predictor outputs become mixture parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormMode {
    /// Softmax weights, absolute means, σ clamped so μ ± 3σ stays in `[0, J]`.
    Approximate,
    /// As approximate for ω and μ, `σ = J·sigmoid(σ̂)`, rows renormalized.
    Strict,
    /// Unnormalized recurrent mixture: means advance monotonically.
    Synthesis,
}

/// How the dot-product and mixture attentions are combined.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gating {
    /// `g = sigmoid(FFN(q))` per head and target position.
    Learned,
    Fixed(f64),
    /// `g = 0.5`.
    Average,
    /// `g = 0`: plain dot-product attention.
    DotOnly,
    /// `g = 1`: mixture attention only.
    GmaOnly,
}

impl Gating {
    pub fn has_gate_ffn(self) -> bool {
        matches!(self, Gating::Learned)
    }
}

impl fmt::Display for Gating {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Gating::Learned => f.write_str("learned"),
            Gating::Fixed(g) => write!(f, "fixed:{g}"),
            Gating::Average => f.write_str("average"),
            Gating::DotOnly => f.write_str("dot_only"),
            Gating::GmaOnly => f.write_str("gma_only"),
        }
    }
}

impl FromStr for Gating {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "learned" => Ok(Gating::Learned),
            "average" => Ok(Gating::Average),
            "dot_only" => Ok(Gating::DotOnly),
            "gma_only" => Ok(Gating::GmaOnly),
            other => match other.strip_prefix("fixed:") {
                Some(v) => {
                    let g: f64 = v.parse().map_err(|_| format!("bad fixed gate value {v:?}"))?;
                    if !(0.0..=1.0).contains(&g) {
                        return Err(format!("fixed gate {g} outside [0, 1]"));
                    }
                    Ok(Gating::Fixed(g))
                }
                None => Err(format!(
                    "unknown gating {other:?} (expected learned, average, dot_only, gma_only or fixed:<g>)"
                )),
            },
        }
    }
}

impl Serialize for Gating {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Gating {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Mixture attention settings for one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GmaConfig {
    /// Number of mixture components.
    #[serde(rename = "K")]
    pub k: usize,
    pub norm_mode: NormMode,
    pub gating: Gating,
    /// Tie every component's mean to the first one.
    #[serde(default)]
    pub share_mean: bool,
    #[serde(default)]
    pub share_var: bool,
    #[serde(default)]
    pub share_weight: bool,
}

impl Default for GmaConfig {
    fn default() -> Self {
        Self {
            k: 4,
            norm_mode: NormMode::Approximate,
            gating: Gating::Learned,
            share_mean: false,
            share_var: false,
            share_weight: false,
        }
    }
}

impl GmaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return contract("K must be at least 1");
        }
        if let Gating::Fixed(g) = self.gating {
            if !(0.0..=1.0).contains(&g) {
                return contract(format!("fixed gate {g} outside [0, 1]"));
            }
        }
        Ok(())
    }
}

/// Two-layer predictor `V·tanh(W·q + b1) + b2` applied row-wise.
#[derive(Clone, Copy, Debug)]
pub struct Ffn<'g> {
    /// `[d_k × d_k]`
    pub w: Var<'g>,
    /// `[d_k]`
    pub b1: Var<'g>,
    /// `[d_k × out]`
    pub v: Var<'g>,
    /// `[out]`
    pub b2: Var<'g>,
}

impl<'g> Ffn<'g> {
    pub fn apply(&self, q: Var<'g>) -> Result<Var<'g>> {
        q.matmul(self.w)?
            .add(self.b1)?
            .tanh()
            .matmul(self.v)?
            .add(self.b2)
    }
}

/// Predictors for one decoder layer; shared by all heads of the layer.
#[derive(Clone, Copy, Debug)]
pub struct GmaHeadParams<'g> {
    pub omega: Ffn<'g>,
    pub mu: Ffn<'g>,
    pub sigma: Ffn<'g>,
    /// Present only for learned gating.
    pub gate: Option<Ffn<'g>>,
}

/// Raw predictor outputs `(ω̂, μ̂, σ̂)` of shape `[..., K]` and the gate
/// logit `ĝ` of shape `[..., 1]`.
#[derive(Clone, Copy, Debug)]
pub struct Intermediate<'g> {
    pub omega: Var<'g>,
    pub mu: Var<'g>,
    pub sigma: Var<'g>,
    pub gate: Option<Var<'g>>,
}

/// Converted mixture parameters, each of shape `[..., K]`.
#[derive(Clone, Copy, Debug)]
pub struct MixtureParams<'g> {
    pub omega: Var<'g>,
    pub mu: Var<'g>,
    pub sigma: Var<'g>,
    pub z: Var<'g>,
}

/// One head of one decoder layer's cross-attention for one sentence pair.
/// Matrices are row-major `[tgt_len × width]` with `width` source columns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    /// 1-based decoder layer.
    pub layer: usize,
    /// 1-based head.
    pub head: usize,
    pub src_len: usize,
    pub tgt_len: usize,
    pub alpha: Vec<f64>,
    /// Absent for layers without mixture attention.
    pub beta: Option<Vec<f64>>,
    pub gamma: Vec<f64>,
    pub gate: Vec<f64>,
}

impl AttentionRecord {
    pub fn width(&self) -> usize {
        self.alpha.len() / self.tgt_len
    }

    pub fn row<'a>(&self, m: &'a [f64], i: usize) -> &'a [f64] {
        let w = self.width();
        &m[i * w..(i + 1) * w]
    }
}

/// Scaled dot-product attention weights `softmax(q·kᵀ/√d_k)` with masked
/// source positions excluded. `q` is `[..., I, d_k]`, `k` is `[..., J, d_k]`
/// (or rank 2, shared), and `keep` has length `J`.
pub fn dot_product_attention<'g>(q: Var<'g>, k: Var<'g>, keep: &[bool]) -> Result<Var<'g>> {
    let dk = *q.shape().last().unwrap();
    if !keep.iter().any(|&b| b) {
        return contract("all source positions are masked");
    }
    let scores = q.matmul_t(k)?.scale(1.0 / (dk as f64).sqrt());
    let j = *scores.shape().last().unwrap();
    if keep.len() != j {
        return Err(Error::Shape {
            op: "dot_product_attention",
            lhs: scores.shape(),
            rhs: vec![keep.len()],
        });
    }
    scores.masked_softmax(keep)
}

/// Runs the ω/μ/σ (and gate, when present) predictors on queries `[..., d_k]`.
pub fn predict_intermediate<'g>(
    query: Var<'g>,
    params: &GmaHeadParams<'g>,
) -> Result<Intermediate<'g>> {
    Ok(Intermediate {
        omega: params.omega.apply(query)?,
        mu: params.mu.apply(query)?,
        sigma: params.sigma.apply(query)?,
        gate: params.gate.map(|f| f.apply(query)).transpose()?,
    })
}

/// Applies the share flags: a shared quantity takes component 0's value
/// in every component.
pub fn share_components<'g>(raw: Intermediate<'g>, cfg: &GmaConfig) -> Result<Intermediate<'g>> {
    let tie = |x: Var<'g>| -> Result<Var<'g>> {
        let k = *x.shape().last().unwrap();
        let zeros = x.graph().constant(Tensor::zeros(vec![k]));
        x.slice(-1, 0, 1)?.add(zeros)
    };
    Ok(Intermediate {
        omega: if cfg.share_weight {
            tie(raw.omega)?
        } else {
            raw.omega
        },
        mu: if cfg.share_mean { tie(raw.mu)? } else { raw.mu },
        sigma: if cfg.share_var {
            tie(raw.sigma)?
        } else {
            raw.sigma
        },
        gate: raw.gate,
    })
}

/// Conversion layer from `(ω̂, μ̂, σ̂)` to `(ω, μ, σ, Z)` for a source of
/// true length `src_len`.
///
/// In synthesis mode the second-to-last axis indexes target steps and the
/// means accumulate along it, starting from `prev_mu` (zero when absent).
pub fn convert_params<'g>(
    raw: &Intermediate<'g>,
    src_len: usize,
    mode: NormMode,
    prev_mu: Option<Var<'g>>,
) -> Result<MixtureParams<'g>> {
    if src_len < 1 {
        return contract("source length must be at least 1");
    }
    let j = src_len as f64;
    let root_two_pi = (2.0 * std::f64::consts::PI).sqrt();
    match mode {
        NormMode::Approximate | NormMode::Strict => {
            let omega = raw.omega.softmax(-1)?;
            let mu = raw.mu.sigmoid().scale(j);
            let sigma = if mode == NormMode::Approximate {
                let spread = raw.sigma.sigmoid().scale(j / 6.0);
                let left = mu.scale(1.0 / 3.0);
                let right = mu.neg().add_scalar(j).scale(1.0 / 3.0);
                spread.min(left)?.min(right)?.clamp_min(SIGMA_FLOOR)
            } else {
                raw.sigma.sigmoid().scale(j).clamp_min(SIGMA_FLOOR)
            };
            let z = sigma.scale(root_two_pi);
            Ok(MixtureParams {
                omega,
                mu,
                sigma,
                z,
            })
        }
        NormMode::Synthesis => {
            let omega = raw.omega.exp();
            let steps = raw.mu.exp();
            let mut mu = if steps.rank() >= 2 {
                steps.cumsum(-2)?
            } else {
                steps
            };
            if let Some(prev) = prev_mu {
                mu = mu.add(prev)?;
            }
            let sigma = raw.sigma.neg().exp().scale(0.5).sqrt();
            let z = raw.omega.graph().constant(Tensor::ones(raw.omega.shape()));
            Ok(MixtureParams {
                omega,
                mu,
                sigma,
                z,
            })
        }
    }
}

/// Mixture attention rows over source positions `1..=width`; shape
/// `[..., width]`. Masked positions are zero. Strict mode divides each row
/// by its mass; the other modes leave rows unnormalized.
pub fn gaussian_mixture_weights<'g>(
    p: &MixtureParams<'g>,
    width: usize,
    keep: &[bool],
    mode: NormMode,
) -> Result<Var<'g>> {
    if keep.len() != width {
        return Err(Error::Shape {
            op: "gaussian_mixture_weights",
            lhs: vec![width],
            rhs: vec![keep.len()],
        });
    }
    let graph = p.mu.graph();
    let mut col_shape = p.mu.shape();
    col_shape.push(1);
    let positions = graph.constant(Tensor::from_vec((1..=width).map(|j| j as f64).collect()));
    let mu = p.mu.reshape(&col_shape)?;
    let two_var = p.sigma.square().scale(2.0).reshape(&col_shape)?;
    let coef = p.omega.div(p.z)?.reshape(&col_shape)?;
    let density = positions.sub(mu)?.square().div(two_var)?.neg().exp();
    let mut beta = coef.mul(density)?.sum_axis(-2, false)?;
    if keep.iter().any(|&b| !b) {
        let mask = keep.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        beta = beta.mul(graph.constant(Tensor::from_vec(mask)))?;
    }
    if mode == NormMode::Strict {
        let mass = beta.sum_axis(-1, true)?;
        let smallest = mass.with_data(|d| d.iter().copied().fold(f64::INFINITY, f64::min));
        if !(smallest >= STRICT_MIN_MASS) {
            return Err(Error::Degenerate(format!(
                "mixture row mass {smallest:e} below {STRICT_MIN_MASS:e}"
            )));
        }
        beta = beta.div(mass)?;
    }
    Ok(beta)
}

/// `γ = (1 − g)·α + g·β` with `g` chosen by `gating`. Returns `(γ, g)`,
/// `g` having shape `[..., 1]`.
pub fn gate_fuse<'g>(
    alpha: Var<'g>,
    beta: Var<'g>,
    gate_logit: Option<Var<'g>>,
    gating: Gating,
) -> Result<(Var<'g>, Var<'g>)> {
    let graph = alpha.graph();
    let mut gate_shape = alpha.shape();
    *gate_shape.last_mut().unwrap() = 1;
    let constant_gate = |g: f64| graph.constant(Tensor::full(gate_shape.clone(), g));
    match gating {
        Gating::Learned => {
            let logit = gate_logit
                .ok_or_else(|| Error::Contract("learned gating needs a gate logit".into()))?;
            let g = logit.sigmoid();
            let gamma = g.neg().add_scalar(1.0).mul(alpha)?.add(g.mul(beta)?)?;
            Ok((gamma, g))
        }
        Gating::Fixed(c) => Ok((alpha.scale(1.0 - c).add(beta.scale(c))?, constant_gate(c))),
        Gating::Average => Ok((alpha.scale(0.5).add(beta.scale(0.5))?, constant_gate(0.5))),
        Gating::DotOnly => Ok((alpha, constant_gate(0.0))),
        Gating::GmaOnly => Ok((beta, constant_gate(1.0))),
    }
}

/// Projections of one multi-head cross-attention block.
#[derive(Clone, Copy, Debug)]
pub struct CrossAttentionParams<'g> {
    pub wq: Var<'g>,
    pub bq: Var<'g>,
    pub wk: Var<'g>,
    pub bk: Var<'g>,
    pub wv: Var<'g>,
    pub bv: Var<'g>,
    pub wo: Var<'g>,
    pub bo: Var<'g>,
    pub gma: Option<GmaHeadParams<'g>>,
}

pub struct CrossAttentionOutput<'g> {
    /// `[I × d_model]`
    pub context: Var<'g>,
    /// One record per head when recording was requested.
    pub records: Vec<AttentionRecord>,
}

/// `[n × d] → [H × n × d/H]`
pub(crate) fn split_heads<'g>(x: Var<'g>, n_heads: usize) -> Result<Var<'g>> {
    let s = x.shape();
    let (n, d) = (s[0], s[1]);
    x.reshape(&[n, n_heads, d / n_heads])?.permute(&[1, 0, 2])
}

/// `[H × n × d_k] → [n × H·d_k]`
pub(crate) fn merge_heads(x: Var<'_>) -> Result<Var<'_>> {
    let s = x.shape();
    x.permute(&[1, 0, 2])?.reshape(&[s[1], s[0] * s[2]])
}

/// Multi-head cross-attention from decoder states `[I × d]` to encoder
/// states `[J × d]`. With `gma = None` this is plain dot-product attention.
pub fn cross_attention_forward<'g>(
    decoder_states: Var<'g>,
    encoder_states: Var<'g>,
    src_keep: &[bool],
    params: &CrossAttentionParams<'g>,
    n_heads: usize,
    gma: Option<&GmaConfig>,
    record: bool,
) -> Result<CrossAttentionOutput<'g>> {
    let d = decoder_states.shape()[1];
    if n_heads == 0 || d % n_heads != 0 {
        return contract(format!("d_model {d} not divisible by {n_heads} heads"));
    }
    let width = encoder_states.shape()[0];
    if src_keep.len() != width {
        return Err(Error::Shape {
            op: "cross_attention",
            lhs: encoder_states.shape(),
            rhs: vec![src_keep.len()],
        });
    }
    let src_len = src_keep.iter().filter(|&&b| b).count();

    let q = split_heads(decoder_states.matmul(params.wq)?.add(params.bq)?, n_heads)?;
    let k = split_heads(encoder_states.matmul(params.wk)?.add(params.bk)?, n_heads)?;
    let v = split_heads(encoder_states.matmul(params.wv)?.add(params.bv)?, n_heads)?;
    let alpha = dot_product_attention(q, k, src_keep)?;

    let mut beta = None;
    let (gamma, gate) = match gma {
        None => (alpha, None),
        Some(cfg) => {
            let head = params.gma.as_ref().ok_or_else(|| {
                Error::Contract("mixture attention enabled without predictor parameters".into())
            })?;
            if cfg.gating == Gating::DotOnly && !record {
                let (gamma, g) = gate_fuse(alpha, alpha, None, cfg.gating)?;
                (gamma, Some(g))
            } else {
                let raw = share_components(predict_intermediate(q, head)?, cfg)?;
                let mix = convert_params(&raw, src_len, cfg.norm_mode, None)?;
                let b = gaussian_mixture_weights(&mix, width, src_keep, cfg.norm_mode)?;
                beta = Some(b);
                let (gamma, g) = gate_fuse(alpha, b, raw.gate, cfg.gating)?;
                (gamma, Some(g))
            }
        }
    };

    let context = merge_heads(gamma.matmul(v)?)?
        .matmul(params.wo)?
        .add(params.bo)?;

    let records = if record {
        let tgt_len = decoder_states.shape()[0];
        let per_head = tgt_len * width;
        let split =
            |m: Vec<f64>| -> Vec<Vec<f64>> { m.chunks(per_head).map(<[f64]>::to_vec).collect() };
        let alphas = split(alpha.to_vec());
        let gammas = split(gamma.to_vec());
        let mut betas = beta.map(|b| split(b.to_vec()).into_iter().map(Some).collect::<Vec<_>>());
        let gates: Vec<Vec<f64>> = match gate {
            Some(g) => g.to_vec().chunks(tgt_len).map(<[f64]>::to_vec).collect(),
            None => vec![vec![0.0; tgt_len]; n_heads],
        };
        (0..n_heads)
            .map(|h| AttentionRecord {
                layer: 0,
                head: h + 1,
                src_len,
                tgt_len,
                alpha: alphas[h].clone(),
                beta: betas.as_mut().and_then(|b| b[h].take()),
                gamma: gammas[h].clone(),
                gate: gates[h].clone(),
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(CrossAttentionOutput { context, records })
}
