//! Cross-entropy, Adam with the inverse-square-root warmup schedule, the
//! training loop with held-out evaluation, and sweep drivers.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{
    corpus_aer, extract_alignment, penultimate_layer, AlignmentScores, AttnSource, TripleEntropy,
};
use crate::attention::{Gating, NormMode};
use crate::autograd::{concat, Graph, Var};
use crate::data::{generate, AlignedExample, TaskSpec, TokenId, PAD};
use crate::error::{contract, Error, Result};
use crate::model::{argmax, decoder_target, Model, ModelConfig};
use crate::params::ParamStore;

/// Mean negative log-likelihood (natural log) over non-pad targets, with
/// optional label smoothing `eps`.
pub fn cross_entropy<'g>(
    logits: Var<'g>,
    targets: &[TokenId],
    pad_id: TokenId,
    eps: f64,
) -> Result<Var<'g>> {
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != targets.len() {
        return Err(Error::Shape {
            op: "cross_entropy",
            lhs: shape,
            rhs: vec![targets.len()],
        });
    }
    let kept = targets.iter().filter(|&&t| t != pad_id).count();
    if kept == 0 {
        return contract("cross-entropy over targets that are all padding");
    }
    let graph = logits.graph();
    let logp = logits.log_softmax();
    let idx: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    let weights: Vec<f64> = targets
        .iter()
        .map(|&t| if t == pad_id { 0.0 } else { 1.0 / kept as f64 })
        .collect();
    let w = graph.constant(crate::tensor::Tensor::from_vec(weights));
    let nll = logp.pick(&idx)?.mul(w)?.sum().neg();
    if eps == 0.0 {
        return Ok(nll);
    }
    let uniform = logp.mean_axis(-1, false)?.mul(w)?.sum().neg();
    nll.scale(1.0 - eps).add(uniform.scale(eps))
}

/// `d^-0.5 · min(step^-0.5, step · warmup^-1.5)`
pub fn lr_schedule(step: usize, d_model: usize, warmup: usize) -> f64 {
    let s = step.max(1) as f64;
    (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
        }
    }
}

/// First and second moments per parameter, plus the step count.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub t: u64,
}

impl AdamState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }
}

/// Bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    hp: AdamParams,
) -> Result<()> {
    if grads.len() != params.len() || state.m.len() != params.len() {
        return contract(format!(
            "{} gradients / {} moments for {} parameters",
            grads.len(),
            state.m.len(),
            params.len()
        ));
    }
    for (id, g) in grads.iter().enumerate() {
        if g.len() != params.tensor(id).len() || state.m[id].len() != g.len() {
            return contract(format!("gradient size mismatch for {}", params.name(id)));
        }
        if let Some((k, v)) = g.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            return Err(Error::NonFiniteGradient {
                param: params.name(id).to_string(),
                detail: format!("element {k} is {v} at step {}", state.t + 1),
            });
        }
    }
    state.t += 1;
    let bc1 = 1.0 - hp.beta1.powi(state.t as i32);
    let bc2 = 1.0 - hp.beta2.powi(state.t as i32);
    for (id, g) in grads.iter().enumerate() {
        let (m, v) = (&mut state.m[id], &mut state.v[id]);
        let p = params.tensor_mut(id).data_mut();
        for k in 0..g.len() {
            m[k] = hp.beta1 * m[k] + (1.0 - hp.beta1) * g[k];
            v[k] = hp.beta2 * v[k] + (1.0 - hp.beta2) * g[k] * g[k];
            let mhat = m[k] / bc1;
            let vhat = v[k] / bc2;
            p[k] -= lr * mhat / (vhat.sqrt() + hp.eps);
        }
    }
    Ok(())
}

pub fn global_norm(grads: &[Vec<f64>]) -> f64 {
    grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt()
}

/// Rescales `grads` to norm `max_norm` if larger; returns whether it did.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64) -> bool {
    if max_norm <= 0.0 {
        return false;
    }
    let norm = global_norm(grads);
    if norm <= max_norm {
        return false;
    }
    let s = max_norm / norm;
    grads.iter_mut().flatten().for_each(|g| *g *= s);
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub warmup_steps: usize,
    /// Multiplier on the scheduled learning rate.
    pub lr_scale: f64,
    pub adam: AdamParams,
    /// Seeds parameter init and batch order.
    pub seed: u64,
    pub eval_every: usize,
    /// Global gradient-norm clip; 0 disables.
    pub clip_norm: f64,
    pub label_smoothing: f64,
    /// Examples held out from the generated corpus for evaluation.
    pub heldout_size: usize,
    /// Compute AER and attention entropies at each evaluation.
    pub analysis_metrics: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            warmup_steps: 400,
            lr_scale: 1.0,
            adam: AdamParams::default(),
            seed: 1,
            eval_every: 200,
            clip_norm: 1.0,
            label_smoothing: 0.0,
            heldout_size: 200,
            analysis_metrics: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.warmup_steps == 0 || self.batch_size == 0 || self.eval_every == 0
        {
            return contract("steps, warmup_steps, batch_size and eval_every must be positive");
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return contract(format!(
                "label_smoothing {} outside [0,1)",
                self.label_smoothing
            ));
        }
        if !(self.lr_scale > 0.0) {
            return contract("lr_scale must be positive");
        }
        Ok(())
    }
}

/// Mean loss over a batch of sentence pairs, each run at its true lengths.
pub fn batch_loss<'g>(
    model: &Model,
    bound: &crate::params::Bound<'g>,
    examples: &[AlignedExample],
    label_smoothing: f64,
) -> Result<Var<'g>> {
    let mut logits = Vec::with_capacity(examples.len());
    let mut targets = Vec::new();
    for ex in examples {
        logits.push(
            model
                .forward_teacher_forced(bound, &ex.src, &ex.tgt, false)?
                .logits,
        );
        targets.extend(decoder_target(&ex.tgt));
    }
    cross_entropy(concat(&logits, 0)?, &targets, PAD, label_smoothing)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    /// Mean per-token loss, EOS included.
    pub loss: f64,
    /// Teacher-forced argmax accuracy, EOS included.
    pub token_acc: f64,
    pub tokens: usize,
    pub alignment: Option<AlignmentScores>,
    pub entropy: Option<TripleEntropy>,
}

pub fn evaluate(model: &Model, corpus: &[AlignedExample], analysis: bool) -> Result<EvalReport> {
    if corpus.is_empty() {
        return contract("evaluation corpus is empty");
    }
    let (mut loss_sum, mut correct, mut tokens) = (0.0, 0usize, 0usize);
    let mut predicted = Vec::new();
    let mut gold = Vec::new();
    let mut entropy = TripleEntropy::default();
    let layer = penultimate_layer(model.config().n_layers);
    let v = model.config().tgt_vocab;
    for ex in corpus {
        let graph = Graph::new();
        let b = model.params().bind(&graph, false);
        let out = model.forward_teacher_forced(&b, &ex.src, &ex.tgt, analysis)?;
        let targets = decoder_target(&ex.tgt);
        loss_sum += cross_entropy(out.logits, &targets, PAD, 0.0)?.item() * targets.len() as f64;
        out.logits.with_data(|d| {
            for (i, &t) in targets.iter().enumerate() {
                if argmax(&d[i * v..(i + 1) * v]) == t as usize {
                    correct += 1;
                }
            }
        });
        tokens += targets.len();
        if analysis {
            predicted.push(extract_alignment(
                &out.records,
                ex.tgt.len(),
                ex.src.len(),
                layer,
                AttnSource::Gamma,
            )?);
            gold.push(ex.gold.clone());
            entropy.add_records(&out.records);
        }
    }
    Ok(EvalReport {
        loss: loss_sum / tokens as f64,
        token_acc: correct as f64 / tokens as f64,
        tokens,
        alignment: if analysis {
            Some(corpus_aer(&predicted, &gold)?)
        } else {
            None
        },
        entropy: analysis.then_some(entropy),
    })
}

/// One evaluation point of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsRow {
    pub step: usize,
    /// Held-out loss.
    pub loss: f64,
    pub lr: f64,
    pub token_acc: f64,
    /// Fraction of steps since the previous row whose gradient was clipped.
    pub clip_frac: f64,
    pub aer: Option<f64>,
    pub mean_entropy_alpha: Option<f64>,
    pub mean_entropy_beta: Option<f64>,
    pub mean_entropy_gamma: Option<f64>,
}

pub fn metrics_csv(rows: &[MetricsRow], analysis: bool) -> String {
    let mut out = String::from("step,loss,lr,token_acc,clip_frac");
    if analysis {
        out.push_str(",aer,mean_entropy_alpha,mean_entropy_beta,mean_entropy_gamma");
    }
    out.push('\n');
    let f = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{},{}",
            r.step, r.loss, r.lr, r.token_acc, r.clip_frac
        );
        if analysis {
            let _ = write!(
                out,
                ",{},{},{},{}",
                f(r.aer),
                f(r.mean_entropy_alpha),
                f(r.mean_entropy_beta),
                f(r.mean_entropy_gamma)
            );
        }
        out.push('\n');
    }
    out
}

pub struct TrainOutcome {
    pub model: Model,
    pub adam: AdamState,
    pub step: usize,
    pub metrics: Vec<MetricsRow>,
    /// Training-batch loss at every step.
    pub train_losses: Vec<f64>,
    pub clipped_steps: usize,
    pub final_eval: EvalReport,
}

impl TrainOutcome {
    pub fn clip_frac(&self) -> f64 {
        self.clipped_steps as f64 / self.step.max(1) as f64
    }
}

/// Generated corpus split into (train, held-out).
pub fn split_corpus(
    task: &TaskSpec,
    heldout: usize,
) -> Result<(Vec<AlignedExample>, Vec<AlignedExample>)> {
    let spec = TaskSpec {
        corpus_size: task.corpus_size + heldout,
        ..task.clone()
    };
    let mut corpus = generate(&spec)?;
    let test = corpus.split_off(task.corpus_size);
    if corpus.is_empty() || test.is_empty() {
        return contract("train and held-out splits must both be non-empty");
    }
    Ok((corpus, test))
}

pub fn check_compatible(model: &ModelConfig, task: &TaskSpec) -> Result<()> {
    if task.vocab_size > model.src_vocab || task.vocab_size > model.tgt_vocab {
        return contract(format!(
            "task vocabulary {} exceeds model vocabularies {}/{}",
            task.vocab_size, model.src_vocab, model.tgt_vocab
        ));
    }
    if task.max_len > model.max_len || task.max_target_len() + 1 > model.max_len {
        return contract(format!(
            "task lengths up to {} (target {}) need max_len ≥ {}",
            task.max_len,
            task.max_target_len(),
            task.max_target_len() + 1
        ));
    }
    Ok(())
}

pub fn train(model_cfg: &ModelConfig, task: &TaskSpec, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(model_cfg, task, cfg, |_| {})
}

/// [`train`] with a callback invoked on every metrics row.
pub fn train_with(
    model_cfg: &ModelConfig,
    task: &TaskSpec,
    cfg: &TrainConfig,
    on_eval: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_compatible(model_cfg, task)?;
    let (train_set, heldout) = split_corpus(task, cfg.heldout_size)?;
    let model = Model::new(model_cfg.clone(), cfg.seed)?;
    train_model(model, &train_set, &heldout, cfg, on_eval)
}

/// Trains an existing model on explicit splits.
pub fn train_model(
    mut model: Model,
    train_set: &[AlignedExample],
    heldout: &[AlignedExample],
    cfg: &TrainConfig,
    mut on_eval: impl FnMut(&MetricsRow),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return contract("training corpus is empty");
    }
    let d_model = model.config().d_model;
    let mut adam = AdamState::new(model.params());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(0x5eed);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;

    let mut metrics = Vec::new();
    let mut train_losses = Vec::with_capacity(cfg.steps);
    let (mut clipped_total, mut clipped_window, mut window) = (0usize, 0usize, 0usize);
    let mut lr = 0.0;

    let mut record = |step: usize, lr: f64, clip_frac: f64, model: &Model| -> Result<EvalReport> {
        let ev = evaluate(model, heldout, cfg.analysis_metrics)?;
        if !ev.loss.is_finite() {
            return Err(Error::Divergence {
                step,
                msg: format!("held-out loss is {}", ev.loss),
            });
        }
        let row = MetricsRow {
            step,
            loss: ev.loss,
            lr,
            token_acc: ev.token_acc,
            clip_frac,
            aer: ev.alignment.map(|a| a.aer),
            mean_entropy_alpha: ev.entropy.and_then(|e| e.alpha.mean()),
            mean_entropy_beta: ev.entropy.and_then(|e| e.beta.mean()),
            mean_entropy_gamma: ev.entropy.and_then(|e| e.gamma.mean()),
        };
        on_eval(&row);
        metrics.push(row);
        Ok(ev)
    };
    let mut last_eval = record(0, 0.0, 0.0, &model)?;

    for step in 1..=cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size {
            if cursor == order.len() {
                order = (0..train_set.len()).collect();
                order.shuffle(&mut rng);
                cursor = 0;
            }
            batch.push(train_set[order[cursor]].clone());
            cursor += 1;
        }
        let mut grads = {
            let graph = Graph::new();
            let bound = model.params().bind(&graph, true);
            let loss = batch_loss(&model, &bound, &batch, cfg.label_smoothing)?;
            let value = loss.item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    step,
                    msg: format!("training loss is {value}"),
                });
            }
            train_losses.push(value);
            graph.backward(loss)?;
            bound.grads()
        };
        if clip_global_norm(&mut grads, cfg.clip_norm) {
            clipped_total += 1;
            clipped_window += 1;
        }
        window += 1;
        lr = cfg.lr_scale * lr_schedule(step, d_model, cfg.warmup_steps);
        adam_step(model.params_mut(), &grads, &mut adam, lr, cfg.adam)?;
        if step % cfg.eval_every == 0 || step == cfg.steps {
            last_eval = record(step, lr, clipped_window as f64 / window as f64, &model)?;
            clipped_window = 0;
            window = 0;
        }
    }
    let _ = lr;
    Ok(TrainOutcome {
        model,
        adam,
        step: cfg.steps,
        metrics,
        train_losses,
        clipped_steps: clipped_total,
        final_eval: last_eval,
    })
}

/// A swept configuration field and its values, e.g. `K=1,2,4,8`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SweepAxis {
    pub name: String,
    pub values: Vec<String>,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, vals) = s
            .split_once('=')
            .ok_or_else(|| Error::Contract(format!("axis {s:?} must look like name=v1,v2")))?;
        let values: Vec<String> = vals.split(',').map(|v| v.trim().to_string()).collect();
        if values.iter().any(String::is_empty) {
            return contract(format!("axis {s:?} has an empty value"));
        }
        let axis = SweepAxis {
            name: name.trim().to_string(),
            values,
        };
        if !SWEEP_FIELDS.contains(&axis.name.as_str()) {
            return contract(format!(
                "unknown sweep axis {:?}; expected one of {}",
                axis.name,
                SWEEP_FIELDS.join(", ")
            ));
        }
        Ok(axis)
    }
}

pub const SWEEP_FIELDS: &[&str] = &[
    "K",
    "gating",
    "norm_mode",
    "gma_layers",
    "share_mean",
    "share_var",
    "share_weight",
    "norm_style",
    "task",
];

/// Decoder layers named by a preset (`none`, `all`, `bottom2`, `middle2`,
/// `top2`) or an explicit `+`-separated list such as `1+3`.
pub fn parse_layer_set(value: &str, n_layers: usize) -> Result<Vec<usize>> {
    let two = |start: usize| -> Result<Vec<usize>> {
        if n_layers < 2 {
            return contract(format!("layer preset {value:?} needs at least 2 layers"));
        }
        Ok(vec![start, start + 1])
    };
    match value {
        "none" | "empty" | "" => Ok(Vec::new()),
        "all" => Ok((1..=n_layers).collect()),
        "bottom2" => two(1),
        "top2" => two(n_layers.saturating_sub(1)),
        "middle2" => two(n_layers.saturating_sub(2) / 2 + 1),
        list => {
            let mut v = list
                .split('+')
                .map(|x| {
                    x.trim()
                        .parse::<usize>()
                        .map_err(|_| Error::Contract(format!("bad layer list {value:?}")))
                })
                .collect::<Result<Vec<_>>>()?;
            v.sort_unstable();
            v.dedup();
            Ok(v)
        }
    }
}

fn parse_bool(v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => contract(format!("expected a boolean, got {v:?}")),
    }
}

/// Sets one swept field.
pub fn apply_axis(
    model: &mut ModelConfig,
    task: &mut TaskSpec,
    name: &str,
    value: &str,
) -> Result<()> {
    match name {
        "K" => {
            model.gma.k = value
                .parse()
                .map_err(|_| Error::Contract(format!("K must be an integer, got {value:?}")))?
        }
        "gating" => model.gma.gating = value.parse::<Gating>().map_err(Error::Contract)?,
        "norm_mode" => {
            model.gma.norm_mode =
                serde_json::from_value::<NormMode>(serde_json::Value::String(value.into()))
                    .map_err(|e| Error::Contract(format!("norm_mode: {e}")))?
        }
        "gma_layers" => model.gma_layers = parse_layer_set(value, model.n_layers)?,
        "share_mean" => model.gma.share_mean = parse_bool(value)?,
        "share_var" => model.gma.share_var = parse_bool(value)?,
        "share_weight" => model.gma.share_weight = parse_bool(value)?,
        "norm_style" => {
            model.norm_style = serde_json::from_value(serde_json::Value::String(value.into()))
                .map_err(|e| Error::Contract(format!("norm_style: {e}")))?
        }
        "task" => task.kind = value.parse()?,
        other => return contract(format!("unknown sweep axis {other:?}")),
    }
    Ok(())
}

/// One configuration of a sweep: axis values in axis order.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepPoint {
    pub values: Vec<String>,
    pub model: ModelConfig,
    pub task: TaskSpec,
    pub train: TrainConfig,
}

/// Cartesian product of the axes; point `i` trains with seed `base + i`.
pub fn sweep_points(
    model: &ModelConfig,
    task: &TaskSpec,
    train: &TrainConfig,
    axes: &[SweepAxis],
) -> Result<Vec<SweepPoint>> {
    if axes.is_empty() {
        return contract("a sweep needs at least one axis");
    }
    let mut combos: Vec<Vec<String>> = vec![Vec::new()];
    for axis in axes {
        combos = combos
            .into_iter()
            .flat_map(|c| {
                axis.values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push(v.clone());
                    c
                })
            })
            .collect();
    }
    combos
        .into_iter()
        .enumerate()
        .map(|(i, values)| {
            let (mut m, mut t) = (model.clone(), task.clone());
            for (axis, v) in axes.iter().zip(&values) {
                apply_axis(&mut m, &mut t, &axis.name, v)?;
            }
            m.validate()?;
            t.validate()?;
            let train = TrainConfig {
                seed: train.seed.wrapping_add(i as u64),
                ..train.clone()
            };
            Ok(SweepPoint {
                values,
                model: m,
                task: t,
                train,
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub values: Vec<String>,
    pub seed: u64,
    /// `ok`, or the error that stopped the run.
    pub status: String,
    pub loss: Option<f64>,
    pub token_acc: Option<f64>,
    pub clip_frac: Option<f64>,
    pub aer: Option<f64>,
    pub mean_entropy_alpha: Option<f64>,
    pub mean_entropy_beta: Option<f64>,
    pub mean_entropy_gamma: Option<f64>,
    pub params: usize,
}

/// Runs every point, `parallel` at a time; a failed run is recorded and
/// the sweep continues. `on_done` sees each finished run.
pub fn run_sweep(
    points: &[SweepPoint],
    parallel: usize,
    on_done: impl Fn(usize, &SweepPoint, &Result<TrainOutcome>) + Sync,
) -> Vec<SweepRow> {
    let next = AtomicUsize::new(0);
    let rows: Mutex<Vec<Option<SweepRow>>> = Mutex::new(vec![None; points.len()]);
    let worker = || loop {
        let i = next.fetch_add(1, Ordering::SeqCst);
        let Some(p) = points.get(i) else { break };
        let res = train(&p.model, &p.task, &p.train);
        on_done(i, p, &res);
        let params = p.model.base_param_count() + p.model.gma_param_count();
        let row = match &res {
            Ok(out) => {
                let ev = &out.final_eval;
                SweepRow {
                    values: p.values.clone(),
                    seed: p.train.seed,
                    status: "ok".into(),
                    loss: Some(ev.loss),
                    token_acc: Some(ev.token_acc),
                    clip_frac: Some(out.clip_frac()),
                    aer: ev.alignment.map(|a| a.aer),
                    mean_entropy_alpha: ev.entropy.and_then(|e| e.alpha.mean()),
                    mean_entropy_beta: ev.entropy.and_then(|e| e.beta.mean()),
                    mean_entropy_gamma: ev.entropy.and_then(|e| e.gamma.mean()),
                    params,
                }
            }
            Err(e) => SweepRow {
                values: p.values.clone(),
                seed: p.train.seed,
                status: e.to_string(),
                loss: None,
                token_acc: None,
                clip_frac: None,
                aer: None,
                mean_entropy_alpha: None,
                mean_entropy_beta: None,
                mean_entropy_gamma: None,
                params,
            },
        };
        rows.lock().expect("sweep rows")[i] = Some(row);
    };
    std::thread::scope(|s| {
        for _ in 1..parallel.max(1).min(points.len().max(1)) {
            s.spawn(worker);
        }
        worker();
    });
    rows.into_inner()
        .expect("sweep rows")
        .into_iter()
        .map(|r| r.expect("every point ran"))
        .collect()
}

pub fn sweep_csv(axes: &[SweepAxis], rows: &[SweepRow]) -> String {
    let mut out = String::new();
    for a in axes {
        out.push_str(&a.name);
        out.push(',');
    }
    out.push_str("seed,status,loss,token_acc,clip_frac,aer,mean_entropy_alpha,mean_entropy_beta,mean_entropy_gamma,params\n");
    let f = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        for v in &r.values {
            out.push_str(&csv_field(v));
            out.push(',');
        }
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.seed,
            csv_field(&r.status),
            f(r.loss),
            f(r.token_acc),
            f(r.clip_frac),
            f(r.aer),
            f(r.mean_entropy_alpha),
            f(r.mean_entropy_beta),
            f(r.mean_entropy_gamma),
            r.params
        );
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}
