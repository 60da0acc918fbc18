//! Toy Transformer encoder-decoder whose cross-attention can be switched,
//! per decoder layer, to the fused dot-product/mixture attention.

use serde::{Deserialize, Serialize};

use crate::attention::{
    cross_attention_forward, merge_heads, split_heads, AttentionRecord, CrossAttentionParams, Ffn,
    GmaConfig, GmaHeadParams, NormMode,
};
use crate::autograd::{Graph, Var};
use crate::data::{TokenId, BOS, EOS};
use crate::error::{contract, Error, Result};
use crate::params::{param_rng, uniform, xavier, Bound, ParamStore};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-6;

/// Residual arrangement of each sublayer.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormStyle {
    /// `x + f(LN(x))`, plus a final norm on each stack.
    Pre,
    /// `LN(x + f(x))`.
    Post,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Layers in both the encoder and the decoder.
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    /// Longest source, and longest decoder input (target + BOS).
    pub max_len: usize,
    /// 1-based decoder layers whose cross-attention uses the mixture.
    pub gma_layers: Vec<usize>,
    pub norm_style: NormStyle,
    pub gma: GmaConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 64,
            n_heads: 4,
            d_ffn: 128,
            src_vocab: 16,
            tgt_vocab: 16,
            max_len: 32,
            gma_layers: vec![1, 2],
            norm_style: NormStyle::Pre,
            gma: GmaConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.d_ffn == 0 || self.n_heads == 0 {
            return contract("model dimensions must be positive");
        }
        if self.d_model % self.n_heads != 0 {
            return contract(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.src_vocab < 4 || self.tgt_vocab < 4 {
            return contract("vocabularies need the 3 reserved ids plus at least one token");
        }
        if self.max_len < 2 {
            return contract("max_len must be at least 2");
        }
        if let Some(&l) = self
            .gma_layers
            .iter()
            .find(|&&l| l == 0 || l > self.n_layers)
        {
            return contract(format!("gma layer {l} outside 1..={}", self.n_layers));
        }
        self.gma.validate()
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn uses_gma(&self, layer: usize) -> bool {
        self.gma_layers.contains(&layer)
    }

    /// Scalar parameters added by the mixture predictors of one layer.
    pub fn gma_params_per_layer(&self) -> usize {
        let dk = self.d_k();
        let k = self.gma.k;
        let ffn = dk * dk + dk + dk * k + k;
        let gate = if self.gma.gating.has_gate_ffn() {
            dk * dk + 2 * dk + 1
        } else {
            0
        };
        3 * ffn + gate
    }

    /// Parameters of the same architecture without any mixture predictors.
    pub fn base_param_count(&self) -> usize {
        let d = self.d_model;
        let attn = 4 * (d * d + d);
        let ffn = d * self.d_ffn + self.d_ffn + self.d_ffn * d + d;
        let ln = 2 * d;
        let final_ln = if self.norm_style == NormStyle::Pre {
            ln
        } else {
            0
        };
        let enc = self.n_layers * (attn + ffn + 2 * ln) + final_ln;
        let dec = self.n_layers * (2 * attn + ffn + 3 * ln) + final_ln;
        let emb = (self.src_vocab + self.tgt_vocab) * d;
        let out = d * self.tgt_vocab + self.tgt_vocab;
        enc + dec + emb + out
    }

    pub fn gma_param_count(&self) -> usize {
        self.gma_layers.len() * self.gma_params_per_layer()
    }
}

/// Parameter overhead of the mixture predictors.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct ParamOverhead {
    pub base: usize,
    pub gma: usize,
    /// `gma / base`
    pub ratio: f64,
}

pub fn param_overhead(cfg: &ModelConfig) -> ParamOverhead {
    let base = cfg.base_param_count();
    let gma = cfg.gma_param_count();
    ParamOverhead {
        base,
        gma,
        ratio: gma as f64 / base as f64,
    }
}

#[derive(Clone, Copy, Debug)]
struct AttnIds {
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
}

#[derive(Clone, Copy, Debug)]
struct LnIds {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct FfnIds {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Clone, Copy, Debug)]
struct PredictorIds {
    w: usize,
    b1: usize,
    v: usize,
    b2: usize,
}

#[derive(Clone, Copy, Debug)]
struct GmaIds {
    omega: PredictorIds,
    mu: PredictorIds,
    sigma: PredictorIds,
    gate: Option<PredictorIds>,
}

#[derive(Clone, Debug)]
struct EncLayer {
    ln1: LnIds,
    attn: AttnIds,
    ln2: LnIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct DecLayer {
    ln1: LnIds,
    self_attn: AttnIds,
    ln2: LnIds,
    cross: AttnIds,
    gma: Option<GmaIds>,
    ln3: LnIds,
    ffn: FfnIds,
}

#[derive(Clone, Debug)]
struct Layout {
    src_emb: usize,
    tgt_emb: usize,
    enc: Vec<EncLayer>,
    enc_ln: Option<LnIds>,
    dec: Vec<DecLayer>,
    dec_ln: Option<LnIds>,
    out_w: usize,
    out_b: usize,
}

/// Builds parameters in a fixed order; each one is either freshly
/// initialized or looked up (and shape-checked) in an existing store.
struct Builder<'a> {
    store: ParamStore,
    seed: u64,
    existing: Option<&'a ParamStore>,
}

impl Builder<'_> {
    fn add(&mut self, name: String, shape: &[usize], init: Init) -> Result<usize> {
        let tensor = match self.existing {
            Some(src) => {
                let t = src
                    .get(&name)
                    .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
                if t.shape() != shape {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name} has shape {:?}, expected {shape:?}",
                        t.shape()
                    )));
                }
                t.clone()
            }
            None => {
                let mut rng = param_rng(self.seed, &name);
                match init {
                    Init::Zeros => Tensor::zeros(shape.to_vec()),
                    Init::Ones => Tensor::ones(shape.to_vec()),
                    Init::Xavier => xavier(shape[0], shape[1], &mut rng),
                    Init::Uniform(limit) => uniform(shape, limit, &mut rng),
                    Init::Values(v) => Tensor::new(shape.to_vec(), v)?,
                }
            }
        };
        self.store.insert(name, tensor)
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Result<AttnIds> {
        Ok(AttnIds {
            wq: self.add(format!("{prefix}.wq"), &[d, d], Init::Xavier)?,
            bq: self.add(format!("{prefix}.bq"), &[d], Init::Zeros)?,
            wk: self.add(format!("{prefix}.wk"), &[d, d], Init::Xavier)?,
            bk: self.add(format!("{prefix}.bk"), &[d], Init::Zeros)?,
            wv: self.add(format!("{prefix}.wv"), &[d, d], Init::Xavier)?,
            bv: self.add(format!("{prefix}.bv"), &[d], Init::Zeros)?,
            wo: self.add(format!("{prefix}.wo"), &[d, d], Init::Xavier)?,
            bo: self.add(format!("{prefix}.bo"), &[d], Init::Zeros)?,
        })
    }

    fn ln(&mut self, prefix: &str, d: usize) -> Result<LnIds> {
        Ok(LnIds {
            gain: self.add(format!("{prefix}.gain"), &[d], Init::Ones)?,
            bias: self.add(format!("{prefix}.bias"), &[d], Init::Zeros)?,
        })
    }

    fn ffn(&mut self, prefix: &str, d: usize, hidden: usize) -> Result<FfnIds> {
        Ok(FfnIds {
            w1: self.add(format!("{prefix}.w1"), &[d, hidden], Init::Xavier)?,
            b1: self.add(format!("{prefix}.b1"), &[hidden], Init::Zeros)?,
            w2: self.add(format!("{prefix}.w2"), &[hidden, d], Init::Xavier)?,
            b2: self.add(format!("{prefix}.b2"), &[d], Init::Zeros)?,
        })
    }

    fn predictor(
        &mut self,
        prefix: &str,
        dk: usize,
        out: usize,
        bias: Init,
    ) -> Result<PredictorIds> {
        Ok(PredictorIds {
            w: self.add(format!("{prefix}.w"), &[dk, dk], Init::Xavier)?,
            b1: self.add(format!("{prefix}.b1"), &[dk], Init::Zeros)?,
            v: self.add(format!("{prefix}.v"), &[dk, out], Init::Xavier)?,
            b2: self.add(format!("{prefix}.b2"), &[out], bias)?,
        })
    }
}

#[derive(Clone)]
enum Init {
    Zeros,
    Ones,
    Xavier,
    Uniform(f64),
    Values(Vec<f64>),
}

/// Output biases of the μ and σ predictors. With sigmoid-scaled means the
/// components start evenly spread over the sentence (`μ_k = J(k − ½)/K`)
/// and wide, σ ≈ 0.147·J in both normalized modes; zero biases would stack
/// every component on the centre, where the Gaussian gradient barely
/// reaches the edges. Synthesis mode keeps zero biases.
fn mixture_bias_init(gma: &GmaConfig) -> (Init, Init) {
    let logit = |p: f64| (p / (1.0 - p)).ln();
    let sigma = match gma.norm_mode {
        NormMode::Synthesis => return (Init::Zeros, Init::Zeros),
        // σ = J/6·sigmoid(b)
        NormMode::Approximate => SIGMA_BIAS_INIT,
        // σ = J·sigmoid(b), same starting width
        NormMode::Strict => logit(crate::autograd::sigmoid(SIGMA_BIAS_INIT) / 6.0),
    };
    let k = gma.k as f64;
    let mu = (0..gma.k).map(|c| logit((c as f64 + 0.5) / k)).collect();
    (Init::Values(mu), Init::Values(vec![sigma; gma.k]))
}

const SIGMA_BIAS_INIT: f64 = 2.0;

fn build_layout(cfg: &ModelConfig, b: &mut Builder<'_>) -> Result<Layout> {
    let d = cfg.d_model;
    let emb_limit = 3f64.sqrt() / (d as f64).sqrt();
    let src_emb = b.add(
        "src_emb".into(),
        &[cfg.src_vocab, d],
        Init::Uniform(emb_limit),
    )?;
    let tgt_emb = b.add(
        "tgt_emb".into(),
        &[cfg.tgt_vocab, d],
        Init::Uniform(emb_limit),
    )?;
    let pre = cfg.norm_style == NormStyle::Pre;
    let mut enc = Vec::with_capacity(cfg.n_layers);
    for l in 1..=cfg.n_layers {
        let p = format!("enc.{l}");
        enc.push(EncLayer {
            ln1: b.ln(&format!("{p}.ln1"), d)?,
            attn: b.attn(&format!("{p}.self"), d)?,
            ln2: b.ln(&format!("{p}.ln2"), d)?,
            ffn: b.ffn(&format!("{p}.ffn"), d, cfg.d_ffn)?,
        });
    }
    let enc_ln = if pre { Some(b.ln("enc.ln", d)?) } else { None };
    let mut dec = Vec::with_capacity(cfg.n_layers);
    for l in 1..=cfg.n_layers {
        let p = format!("dec.{l}");
        let ln1 = b.ln(&format!("{p}.ln1"), d)?;
        let self_attn = b.attn(&format!("{p}.self"), d)?;
        let ln2 = b.ln(&format!("{p}.ln2"), d)?;
        let cross = b.attn(&format!("{p}.cross"), d)?;
        let gma = if cfg.uses_gma(l) {
            let (dk, k) = (cfg.d_k(), cfg.gma.k);
            let (mu_bias, sigma_bias) = mixture_bias_init(&cfg.gma);
            Some(GmaIds {
                omega: b.predictor(&format!("{p}.gma.omega"), dk, k, Init::Zeros)?,
                mu: b.predictor(&format!("{p}.gma.mu"), dk, k, mu_bias)?,
                sigma: b.predictor(&format!("{p}.gma.sigma"), dk, k, sigma_bias)?,
                gate: if cfg.gma.gating.has_gate_ffn() {
                    Some(b.predictor(&format!("{p}.gma.gate"), dk, 1, Init::Zeros)?)
                } else {
                    None
                },
            })
        } else {
            None
        };
        let ln3 = b.ln(&format!("{p}.ln3"), d)?;
        let ffn = b.ffn(&format!("{p}.ffn"), d, cfg.d_ffn)?;
        dec.push(DecLayer {
            ln1,
            self_attn,
            ln2,
            cross,
            gma,
            ln3,
            ffn,
        });
    }
    let dec_ln = if pre { Some(b.ln("dec.ln", d)?) } else { None };
    let out_w = b.add("out.w".into(), &[d, cfg.tgt_vocab], Init::Xavier)?;
    let out_b = b.add("out.b".into(), &[cfg.tgt_vocab], Init::Zeros)?;
    Ok(Layout {
        src_emb,
        tgt_emb,
        enc,
        enc_ln,
        dec,
        dec_ln,
        out_w,
        out_b,
    })
}

/// Sinusoidal position encodings, `[max_len × d]`.
pub fn sinusoidal_encoding(max_len: usize, d: usize) -> Tensor {
    let mut data = vec![0.0; max_len * d];
    for pos in 0..max_len {
        for i in 0..d {
            let pair = (i / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * pair / d as f64);
            data[pos * d + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::new(vec![max_len, d], data).expect("valid encoding shape")
}

/// Output of a teacher-forced pass.
pub struct ForwardOutput<'g> {
    /// `[(I + 1) × V]`: one row per decoder input `[BOS, t_1 .. t_I]`.
    pub logits: Var<'g>,
    pub records: Vec<AttentionRecord>,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
    positions: Tensor,
}

impl Model {
    /// Fresh model; parameter values depend only on `seed` and their names.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            store: ParamStore::new(),
            seed,
            existing: None,
        };
        let layout = build_layout(&config, &mut b)?;
        Ok(Self::assemble(config, b.store, layout))
    }

    /// Model over existing parameters, which must match the config's layout.
    pub fn from_params(config: ModelConfig, params: &ParamStore) -> Result<Self> {
        config.validate()?;
        let mut b = Builder {
            store: ParamStore::new(),
            seed: 0,
            existing: Some(params),
        };
        let layout = build_layout(&config, &mut b)?;
        if b.store.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} parameters, config expects {}",
                params.len(),
                b.store.len()
            )));
        }
        Ok(Self::assemble(config, b.store, layout))
    }

    fn assemble(config: ModelConfig, params: ParamStore, layout: Layout) -> Self {
        let positions = sinusoidal_encoding(config.max_len, config.d_model);
        Self {
            config,
            params,
            layout,
            positions,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    fn embed<'g>(
        &self,
        b: &Bound<'g>,
        table: usize,
        ids: &[TokenId],
        vocab: usize,
    ) -> Result<Var<'g>> {
        if ids.len() > self.config.max_len {
            return contract(format!(
                "sequence of length {} exceeds max_len {}",
                ids.len(),
                self.config.max_len
            ));
        }
        let idx: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        if let Some(&bad) = idx.iter().find(|&&t| t >= vocab) {
            return Err(Error::Vocab { id: bad, vocab });
        }
        let graph = b.var(table).graph();
        let d = self.config.d_model;
        let pe = Tensor::new(
            vec![ids.len(), d],
            self.positions.data()[..ids.len() * d].to_vec(),
        )?;
        b.var(table)
            .gather_rows(&idx)?
            .scale((d as f64).sqrt())
            .add(graph.constant(pe))
    }

    fn layer_norm<'g>(&self, b: &Bound<'g>, ids: LnIds, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(b.var(ids.gain), b.var(ids.bias), LN_EPS)
    }

    fn sublayer<'g>(
        &self,
        b: &Bound<'g>,
        ln: LnIds,
        x: Var<'g>,
        f: impl FnOnce(Var<'g>) -> Result<Var<'g>>,
    ) -> Result<Var<'g>> {
        match self.config.norm_style {
            NormStyle::Pre => x.add(f(self.layer_norm(b, ln, x)?)?),
            NormStyle::Post => self.layer_norm(b, ln, x.add(f(x)?)?),
        }
    }

    fn self_attention<'g>(
        &self,
        b: &Bound<'g>,
        ids: AttnIds,
        x: Var<'g>,
        causal: bool,
    ) -> Result<Var<'g>> {
        let h = self.config.n_heads;
        let n = x.shape()[0];
        let q = split_heads(x.matmul(b.var(ids.wq))?.add(b.var(ids.bq))?, h)?;
        let k = split_heads(x.matmul(b.var(ids.wk))?.add(b.var(ids.bk))?, h)?;
        let v = split_heads(x.matmul(b.var(ids.wv))?.add(b.var(ids.bv))?, h)?;
        let scores = q
            .matmul_t(k)?
            .scale(1.0 / (self.config.d_k() as f64).sqrt());
        let weights = if causal {
            let keep: Vec<bool> = (0..h * n * n).map(|e| (e % n) <= (e / n) % n).collect();
            scores.masked_softmax(&keep)?
        } else {
            scores.softmax(-1)?
        };
        merge_heads(weights.matmul(v)?)?
            .matmul(b.var(ids.wo))?
            .add(b.var(ids.bo))
    }

    fn feed_forward<'g>(&self, b: &Bound<'g>, ids: FfnIds, x: Var<'g>) -> Result<Var<'g>> {
        x.matmul(b.var(ids.w1))?
            .add(b.var(ids.b1))?
            .relu()
            .matmul(b.var(ids.w2))?
            .add(b.var(ids.b2))
    }

    fn cross_params<'g>(&self, b: &Bound<'g>, layer: &DecLayer) -> CrossAttentionParams<'g> {
        let a = layer.cross;
        let pred = |p: PredictorIds| Ffn {
            w: b.var(p.w),
            b1: b.var(p.b1),
            v: b.var(p.v),
            b2: b.var(p.b2),
        };
        CrossAttentionParams {
            wq: b.var(a.wq),
            bq: b.var(a.bq),
            wk: b.var(a.wk),
            bk: b.var(a.bk),
            wv: b.var(a.wv),
            bv: b.var(a.bv),
            wo: b.var(a.wo),
            bo: b.var(a.bo),
            gma: layer.gma.map(|g| GmaHeadParams {
                omega: pred(g.omega),
                mu: pred(g.mu),
                sigma: pred(g.sigma),
                gate: g.gate.map(pred),
            }),
        }
    }

    /// Encoder states `[J × d_model]`.
    pub fn encode<'g>(&self, b: &Bound<'g>, src: &[TokenId]) -> Result<Var<'g>> {
        if src.is_empty() {
            return contract("empty source sentence");
        }
        let mut x = self.embed(b, self.layout.src_emb, src, self.config.src_vocab)?;
        for layer in &self.layout.enc {
            x = self.sublayer(b, layer.ln1, x, |h| {
                self.self_attention(b, layer.attn, h, false)
            })?;
            x = self.sublayer(b, layer.ln2, x, |h| self.feed_forward(b, layer.ffn, h))?;
        }
        match self.layout.enc_ln {
            Some(ln) => self.layer_norm(b, ln, x),
            None => Ok(x),
        }
    }

    /// Decoder logits `[len(dec_in) × V]` for explicit decoder inputs.
    pub fn decode<'g>(
        &self,
        b: &Bound<'g>,
        encoded: Var<'g>,
        src_keep: &[bool],
        dec_in: &[TokenId],
        record: bool,
    ) -> Result<ForwardOutput<'g>> {
        let mut y = self.embed(b, self.layout.tgt_emb, dec_in, self.config.tgt_vocab)?;
        let mut records = Vec::new();
        for (idx, layer) in self.layout.dec.iter().enumerate() {
            let l = idx + 1;
            y = self.sublayer(b, layer.ln1, y, |h| {
                self.self_attention(b, layer.self_attn, h, true)
            })?;
            let params = self.cross_params(b, layer);
            let gma = if self.config.uses_gma(l) {
                Some(&self.config.gma)
            } else {
                None
            };
            y = self.sublayer(b, layer.ln2, y, |h| {
                let out = cross_attention_forward(
                    h,
                    encoded,
                    src_keep,
                    &params,
                    self.config.n_heads,
                    gma,
                    record,
                )?;
                records.extend(out.records.into_iter().map(|mut r| {
                    r.layer = l;
                    r
                }));
                Ok(out.context)
            })?;
            y = self.sublayer(b, layer.ln3, y, |h| self.feed_forward(b, layer.ffn, h))?;
        }
        if let Some(ln) = self.layout.dec_ln {
            y = self.layer_norm(b, ln, y)?;
        }
        let logits = y
            .matmul(b.var(self.layout.out_w))?
            .add(b.var(self.layout.out_b))?;
        Ok(ForwardOutput { logits, records })
    }

    /// Teacher-forced pass: the decoder reads `[BOS, tgt...]` and row `i`
    /// of the logits predicts `tgt[i]` (or EOS after the last token).
    pub fn forward_teacher_forced<'g>(
        &self,
        b: &Bound<'g>,
        src: &[TokenId],
        tgt: &[TokenId],
        record: bool,
    ) -> Result<ForwardOutput<'g>> {
        let encoded = self.encode(b, src)?;
        let keep = vec![true; src.len()];
        self.decode(b, encoded, &keep, &decoder_input(tgt), record)
    }

    /// Logits as a plain tensor, computed without gradient tracking.
    pub fn logits(
        &self,
        src: &[TokenId],
        tgt: &[TokenId],
        record: bool,
    ) -> Result<(Tensor, Vec<AttentionRecord>)> {
        let graph = Graph::new();
        let b = self.params.bind(&graph, false);
        let out = self.forward_teacher_forced(&b, src, tgt, record)?;
        Ok((out.logits.value(), out.records))
    }

    pub fn encode_tensor(&self, src: &[TokenId]) -> Result<Tensor> {
        let graph = Graph::new();
        let b = self.params.bind(&graph, false);
        Ok(self.encode(&b, src)?.value())
    }

    /// Argmax decoding until EOS or `max_len` emitted tokens.
    pub fn greedy_decode(&self, src: &[TokenId], max_len: usize) -> Result<Vec<TokenId>> {
        let graph = Graph::new();
        let b = self.params.bind(&graph, false);
        let encoded = self.encode(&b, src)?;
        let keep = vec![true; src.len()];
        let cap = max_len.min(self.config.max_len - 1);
        let mut out: Vec<TokenId> = Vec::new();
        while out.len() < cap {
            let logits = self
                .decode(&b, encoded, &keep, &decoder_input(&out), false)?
                .logits;
            let v = self.config.tgt_vocab;
            let next = logits.with_data(|d| argmax(&d[d.len() - v..]));
            if next as TokenId == EOS {
                break;
            }
            out.push(next as TokenId);
        }
        Ok(out)
    }

    /// Attention records from decoding the reference target.
    pub fn forced_decode_attention(
        &self,
        src: &[TokenId],
        reference: &[TokenId],
    ) -> Result<Vec<AttentionRecord>> {
        Ok(self.logits(src, reference, true)?.1)
    }
}

/// `[BOS, tgt...]`
pub fn decoder_input(tgt: &[TokenId]) -> Vec<TokenId> {
    std::iter::once(BOS).chain(tgt.iter().copied()).collect()
}

/// `[tgt..., EOS]`
pub fn decoder_target(tgt: &[TokenId]) -> Vec<TokenId> {
    tgt.iter().copied().chain(std::iter::once(EOS)).collect()
}

/// Index of the largest value; ties resolve to the smallest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}
