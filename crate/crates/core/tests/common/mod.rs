//! Independent scalar-loop references used as test oracles.
#![allow(dead_code)]

use gma_core::attention::{CrossAttentionParams, Ffn, Gating, GmaConfig, GmaHeadParams, NormMode};
use gma_core::data::{TokenId, BOS, EOS};
use gma_core::model::{ModelConfig, NormStyle};
use gma_core::params::ParamStore;
use gma_core::{Tensor, Var};
use rand::Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn rand_mat(rng: &mut impl Rng, rows: usize, cols: usize, scale: f64) -> Mat {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.gen_range(-scale..scale)).collect())
        .collect()
}

pub fn to_tensor(m: &Mat) -> Tensor {
    Tensor::from_rows(m).unwrap()
}

pub fn vec_tensor(v: &[f64]) -> Tensor {
    Tensor::from_vec(v.to_vec())
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softmax(xs: &[f64]) -> Vec<f64> {
    let m = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Mixture parameters for one row of raw predictor outputs.
pub fn convert_row(
    omega: &[f64],
    mu: &[f64],
    sigma: &[f64],
    j: usize,
    mode: NormMode,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let jf = j as f64;
    let k = omega.len();
    let mut w = vec![0.0; k];
    let mut m = vec![0.0; k];
    let mut s = vec![0.0; k];
    let mut z = vec![0.0; k];
    match mode {
        NormMode::Approximate | NormMode::Strict => {
            w = softmax(omega);
            for c in 0..k {
                m[c] = jf * sigmoid(mu[c]);
                let sig = if mode == NormMode::Approximate {
                    let a = jf / 6.0 * sigmoid(sigma[c]);
                    a.min(m[c] / 3.0).min((jf - m[c]) / 3.0)
                } else {
                    jf * sigmoid(sigma[c])
                };
                s[c] = sig.max(1e-6);
                z[c] = (2.0 * std::f64::consts::PI * s[c] * s[c]).sqrt();
            }
        }
        NormMode::Synthesis => {
            for c in 0..k {
                w[c] = omega[c].exp();
                m[c] = mu[c].exp();
                s[c] = ((-sigma[c]).exp() / 2.0).sqrt();
                z[c] = 1.0;
            }
        }
    }
    (w, m, s, z)
}

/// β row over positions 1..=j by direct summation.
pub fn beta_row(omega: &[f64], mu: &[f64], sigma: &[f64], j: usize, mode: NormMode) -> Vec<f64> {
    let (w, m, s, z) = convert_row(omega, mu, sigma, j, mode);
    beta_from(&w, &m, &s, &z, j, mode)
}

/// β row from already converted mixture parameters.
pub fn beta_from(w: &[f64], m: &[f64], s: &[f64], z: &[f64], j: usize, mode: NormMode) -> Vec<f64> {
    let mut row = vec![0.0; j];
    for (pos, out) in row.iter_mut().enumerate() {
        let x = (pos + 1) as f64;
        for c in 0..w.len() {
            *out += w[c] / z[c] * (-(x - m[c]).powi(2) / (2.0 * s[c] * s[c])).exp();
        }
    }
    if mode == NormMode::Strict {
        let total: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= total);
    }
    row
}

pub fn matvec_row(x: &[f64], w: &Mat, b: &[f64]) -> Vec<f64> {
    let mut out = b.to_vec();
    for (k, xv) in x.iter().enumerate() {
        for (c, o) in out.iter_mut().enumerate() {
            *o += xv * w[k][c];
        }
    }
    out
}

pub fn linear(x: &Mat, w: &Mat, b: &[f64]) -> Mat {
    x.iter().map(|r| matvec_row(r, w, b)).collect()
}

/// Predictor `V·tanh(q·W + b1) + b2`.
#[derive(Clone, Debug)]
pub struct RefFfn {
    pub w: Mat,
    pub b1: Vec<f64>,
    pub v: Mat,
    pub b2: Vec<f64>,
}

impl RefFfn {
    pub fn random(rng: &mut impl Rng, dk: usize, out: usize, scale: f64) -> Self {
        Self {
            w: rand_mat(rng, dk, dk, scale),
            b1: rand_mat(rng, 1, dk, scale).remove(0),
            v: rand_mat(rng, dk, out, scale),
            b2: rand_mat(rng, 1, out, scale).remove(0),
        }
    }

    pub fn apply(&self, q: &[f64]) -> Vec<f64> {
        let h: Vec<f64> = matvec_row(q, &self.w, &self.b1)
            .iter()
            .map(|x| x.tanh())
            .collect();
        matvec_row(&h, &self.v, &self.b2)
    }
}

#[derive(Clone, Debug)]
pub struct RefCross {
    pub wq: Mat,
    pub bq: Vec<f64>,
    pub wk: Mat,
    pub bk: Vec<f64>,
    pub wv: Mat,
    pub bv: Vec<f64>,
    pub wo: Mat,
    pub bo: Vec<f64>,
    pub omega: RefFfn,
    pub mu: RefFfn,
    pub sigma: RefFfn,
    pub gate: RefFfn,
}

impl RefCross {
    pub fn random(rng: &mut impl Rng, d: usize, h: usize, k: usize) -> Self {
        let dk = d / h;
        let s = 0.6;
        let row = |rng: &mut _| rand_mat(rng, 1, d, s).remove(0);
        Self {
            wq: rand_mat(rng, d, d, s),
            bq: row(rng),
            wk: rand_mat(rng, d, d, s),
            bk: row(rng),
            wv: rand_mat(rng, d, d, s),
            bv: row(rng),
            wo: rand_mat(rng, d, d, s),
            bo: row(rng),
            omega: RefFfn::random(rng, dk, k, 1.0),
            mu: RefFfn::random(rng, dk, k, 1.0),
            sigma: RefFfn::random(rng, dk, k, 1.0),
            gate: RefFfn::random(rng, dk, 1, 1.0),
        }
    }
}

pub struct RefCrossOut {
    pub context: Mat,
    /// Per head `[I][J]`.
    pub alpha: Vec<Mat>,
    pub beta: Vec<Mat>,
    pub gamma: Vec<Mat>,
    pub gate: Vec<Vec<f64>>,
}

/// Fused cross-attention by explicit loops over heads, rows and positions.
pub fn ref_cross_attention(
    dec: &Mat,
    enc: &Mat,
    p: &RefCross,
    h: usize,
    cfg: &GmaConfig,
) -> RefCrossOut {
    let d = dec[0].len();
    let dk = d / h;
    let (ni, nj) = (dec.len(), enc.len());
    let q = linear(dec, &p.wq, &p.bq);
    let k = linear(enc, &p.wk, &p.bk);
    let v = linear(enc, &p.wv, &p.bv);
    let mut merged = vec![vec![0.0; d]; ni];
    let mut out = RefCrossOut {
        context: Vec::new(),
        alpha: Vec::new(),
        beta: Vec::new(),
        gamma: Vec::new(),
        gate: Vec::new(),
    };
    for head in 0..h {
        let cols = head * dk..(head + 1) * dk;
        let (mut am, mut bm, mut gm, mut gates) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
        // synthesis means accumulate over target steps
        let mut running = vec![0.0; cfg.k];
        for i in 0..ni {
            let qi = &q[i][cols.clone()];
            let scores: Vec<f64> = (0..nj)
                .map(|j| {
                    let kj = &k[j][cols.clone()];
                    qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() / (dk as f64).sqrt()
                })
                .collect();
            let alpha = softmax(&scores);
            let tie = |x: Vec<f64>, shared: bool| if shared { vec![x[0]; x.len()] } else { x };
            let om = tie(p.omega.apply(qi), cfg.share_weight);
            let mu = tie(p.mu.apply(qi), cfg.share_mean);
            let sg = tie(p.sigma.apply(qi), cfg.share_var);
            let (w, mut m, s, z) = convert_row(&om, &mu, &sg, nj, cfg.norm_mode);
            if cfg.norm_mode == NormMode::Synthesis {
                for (c, v) in m.iter_mut().enumerate() {
                    *v += running[c];
                    running[c] = *v;
                }
            }
            let beta = beta_from(&w, &m, &s, &z, nj, cfg.norm_mode);
            let g = match cfg.gating {
                Gating::Learned => sigmoid(p.gate.apply(qi)[0]),
                Gating::Fixed(c) => c,
                Gating::Average => 0.5,
                Gating::DotOnly => 0.0,
                Gating::GmaOnly => 1.0,
            };
            let gamma: Vec<f64> = match cfg.gating {
                Gating::DotOnly => alpha.clone(),
                Gating::GmaOnly => beta.clone(),
                _ => (0..nj)
                    .map(|j| (1.0 - g) * alpha[j] + g * beta[j])
                    .collect(),
            };
            for (c, col) in cols.clone().enumerate() {
                merged[i][col] = (0..nj).map(|j| gamma[j] * v[j][head * dk + c]).sum();
            }
            am.push(alpha);
            bm.push(beta);
            gm.push(gamma);
            gates.push(g);
        }
        out.alpha.push(am);
        out.beta.push(bm);
        out.gamma.push(gm);
        out.gate.push(gates);
    }
    out.context = linear(&merged, &p.wo, &p.bo);
    out
}

/// Plain Transformer reading its weights from a parameter store by name.
pub struct RefTransformer<'a> {
    pub p: &'a ParamStore,
    pub cfg: &'a ModelConfig,
}

impl RefTransformer<'_> {
    fn mat(&self, name: &str) -> Mat {
        let t = self.p.get(name).unwrap_or_else(|| panic!("missing {name}"));
        t.to_rows()
    }

    fn vector(&self, name: &str) -> Vec<f64> {
        self.p
            .get(name)
            .unwrap_or_else(|| panic!("missing {name}"))
            .data()
            .to_vec()
    }

    fn lin(&self, x: &Mat, prefix: &str, w: &str, b: &str) -> Mat {
        linear(
            x,
            &self.mat(&format!("{prefix}.{w}")),
            &self.vector(&format!("{prefix}.{b}")),
        )
    }

    fn layer_norm(&self, x: &Mat, prefix: &str) -> Mat {
        let g = self.vector(&format!("{prefix}.gain"));
        let b = self.vector(&format!("{prefix}.bias"));
        x.iter()
            .map(|r| {
                let n = r.len() as f64;
                let mean = r.iter().sum::<f64>() / n;
                let var = r.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                let sd = (var + 1e-6).sqrt();
                r.iter()
                    .enumerate()
                    .map(|(c, v)| (v - mean) / sd * g[c] + b[c])
                    .collect()
            })
            .collect()
    }

    fn attention(&self, xq: &Mat, xkv: &Mat, prefix: &str, causal: bool) -> Mat {
        let h = self.cfg.n_heads;
        let d = self.cfg.d_model;
        let dk = d / h;
        let q = self.lin(xq, prefix, "wq", "bq");
        let k = self.lin(xkv, prefix, "wk", "bk");
        let v = self.lin(xkv, prefix, "wv", "bv");
        let mut merged = vec![vec![0.0; d]; xq.len()];
        for head in 0..h {
            let off = head * dk;
            for i in 0..xq.len() {
                let visible = if causal { i + 1 } else { xkv.len() };
                let scores: Vec<f64> = (0..visible)
                    .map(|j| {
                        (0..dk).map(|c| q[i][off + c] * k[j][off + c]).sum::<f64>()
                            / (dk as f64).sqrt()
                    })
                    .collect();
                let a = softmax(&scores);
                for c in 0..dk {
                    merged[i][off + c] = (0..visible).map(|j| a[j] * v[j][off + c]).sum();
                }
            }
        }
        self.lin(&merged, prefix, "wo", "bo")
    }

    fn ffn(&self, x: &Mat, prefix: &str) -> Mat {
        let hidden: Mat = self
            .lin(x, prefix, "w1", "b1")
            .into_iter()
            .map(|r| r.into_iter().map(|v| v.max(0.0)).collect())
            .collect();
        self.lin(&hidden, prefix, "w2", "b2")
    }

    fn embed(&self, table: &str, ids: &[TokenId]) -> Mat {
        let t = self.mat(table);
        let d = self.cfg.d_model;
        ids.iter()
            .enumerate()
            .map(|(pos, &id)| {
                (0..d)
                    .map(|i| {
                        let angle = pos as f64 / 10000f64.powf(2.0 * (i / 2) as f64 / d as f64);
                        let pe = if i % 2 == 0 { angle.sin() } else { angle.cos() };
                        t[id as usize][i] * (d as f64).sqrt() + pe
                    })
                    .collect()
            })
            .collect()
    }

    fn residual(&self, x: Mat, ln: &str, f: impl Fn(&Mat) -> Mat) -> Mat {
        let add = |a: &Mat, b: &Mat| -> Mat {
            a.iter()
                .zip(b)
                .map(|(r, s)| r.iter().zip(s).map(|(u, v)| u + v).collect())
                .collect()
        };
        match self.cfg.norm_style {
            NormStyle::Pre => add(&x, &f(&self.layer_norm(&x, ln))),
            NormStyle::Post => self.layer_norm(&add(&x, &f(&x)), ln),
        }
    }

    pub fn encode(&self, src: &[TokenId]) -> Mat {
        let mut x = self.embed("src_emb", src);
        for l in 1..=self.cfg.n_layers {
            let p = format!("enc.{l}");
            x = self.residual(x, &format!("{p}.ln1"), |h| {
                self.attention(h, h, &format!("{p}.self"), false)
            });
            x = self.residual(x, &format!("{p}.ln2"), |h| self.ffn(h, &format!("{p}.ffn")));
        }
        if self.cfg.norm_style == NormStyle::Pre {
            x = self.layer_norm(&x, "enc.ln");
        }
        x
    }

    pub fn logits(&self, src: &[TokenId], tgt: &[TokenId]) -> Mat {
        let enc = self.encode(src);
        let dec_in: Vec<TokenId> = std::iter::once(BOS).chain(tgt.iter().copied()).collect();
        let mut y = self.embed("tgt_emb", &dec_in);
        for l in 1..=self.cfg.n_layers {
            let p = format!("dec.{l}");
            y = self.residual(y, &format!("{p}.ln1"), |h| {
                self.attention(h, h, &format!("{p}.self"), true)
            });
            y = self.residual(y, &format!("{p}.ln2"), |h| {
                self.attention(h, &enc, &format!("{p}.cross"), false)
            });
            y = self.residual(y, &format!("{p}.ln3"), |h| self.ffn(h, &format!("{p}.ffn")));
        }
        if self.cfg.norm_style == NormStyle::Pre {
            y = self.layer_norm(&y, "dec.ln");
        }
        linear(&y, &self.mat("out.w"), &self.vector("out.b"))
    }

    /// Mean token cross-entropy over a batch, EOS included.
    pub fn loss(&self, batch: &[(Vec<TokenId>, Vec<TokenId>)]) -> f64 {
        let (mut total, mut n) = (0.0, 0usize);
        for (src, tgt) in batch {
            let logits = self.logits(src, tgt);
            let targets: Vec<TokenId> = tgt.iter().copied().chain(std::iter::once(EOS)).collect();
            for (row, &t) in logits.iter().zip(&targets) {
                let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - row[t as usize];
                n += 1;
            }
        }
        total / n as f64
    }
}

/// Tensors of a reference layer in the order [`bind_cross`] expects:
/// projections, then ω, μ, σ predictors, then the gate predictor if asked.
pub fn cross_tensors(p: &RefCross, with_gate: bool) -> Vec<Tensor> {
    let mut out = vec![
        to_tensor(&p.wq),
        vec_tensor(&p.bq),
        to_tensor(&p.wk),
        vec_tensor(&p.bk),
        to_tensor(&p.wv),
        vec_tensor(&p.bv),
        to_tensor(&p.wo),
        vec_tensor(&p.bo),
    ];
    let mut ffns = vec![&p.omega, &p.mu, &p.sigma];
    if with_gate {
        ffns.push(&p.gate);
    }
    for f in ffns {
        out.extend([
            to_tensor(&f.w),
            vec_tensor(&f.b1),
            to_tensor(&f.v),
            vec_tensor(&f.b2),
        ]);
    }
    out
}

/// Library parameters over variables laid out as in [`cross_tensors`].
pub fn bind_cross<'g>(v: &[Var<'g>], with_gma: bool) -> CrossAttentionParams<'g> {
    let ffn = |o: usize| Ffn {
        w: v[o],
        b1: v[o + 1],
        v: v[o + 2],
        b2: v[o + 3],
    };
    CrossAttentionParams {
        wq: v[0],
        bq: v[1],
        wk: v[2],
        bk: v[3],
        wv: v[4],
        bv: v[5],
        wo: v[6],
        bo: v[7],
        gma: with_gma.then(|| GmaHeadParams {
            omega: ffn(8),
            mu: ffn(12),
            sigma: ffn(16),
            gate: (v.len() >= 24).then(|| ffn(20)),
        }),
    }
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

pub fn flatten(m: &Mat) -> Vec<f64> {
    m.iter().flatten().copied().collect()
}
