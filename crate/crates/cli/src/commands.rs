use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use gma_core::analysis::{
    bucket_csv, corpus_aer, corpus_bleu, corpus_ngram_precisions, decode_limit, entropy_buckets,
    entropy_report, entropy_report_csv, extract_alignment, gate_histogram_svg, gate_report,
    length_bucket_eval, penultimate_layer, write_attention_dump, DumpLine, LengthBucket,
};
use gma_core::attention::AttentionRecord;
use gma_core::checkpoint::Checkpoint;
use gma_core::data::{
    format_alignments, read_corpus, write_alignment_file, write_corpus, AlignedExample, Links,
};
use gma_core::model::{param_overhead, Model, ParamOverhead};
use gma_core::training::{
    check_compatible, evaluate as eval_model, metrics_csv, run_sweep, split_corpus, sweep_csv,
    sweep_points, train_model, EvalReport, MetricsRow, SweepAxis, TrainOutcome,
};
use serde::Serialize;

use crate::config::{build_config, config_err, RunConfig};
use crate::ConfigArgs;

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    build_config(args.config.as_deref(), &args.overrides())
}

/// `<OUTPUT_DIR or paths.output_dir>/<kind>-<timestamp>`, made unique.
fn run_dir(cfg: &RunConfig, kind: &str) -> Result<PathBuf> {
    let root = std::env::var_os("OUTPUT_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| cfg.paths.output_dir.clone());
    let stamp = chrono::Local::now().format("%Y%m%d-%H%M%S");
    let base = root.join(format!("{kind}-{stamp}"));
    let mut dir = base.clone();
    let mut n = 2;
    while dir.exists() {
        dir = PathBuf::from(format!("{}-{n}", base.display()));
        n += 1;
    }
    std::fs::create_dir_all(&dir)
        .with_context(|| format!("creating run directory {}", dir.display()))?;
    write_json(&dir.join("config.json"), cfg)?;
    Ok(dir)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn load_corpus(path: &Path) -> Result<Vec<AlignedExample>> {
    let corpus = read_corpus(path).with_context(|| format!("reading corpus {}", path.display()))?;
    if corpus.is_empty() {
        anyhow::bail!("corpus {} is empty", path.display());
    }
    Ok(corpus)
}

fn load_model(path: &Path) -> Result<Model> {
    Checkpoint::load(path)
        .and_then(|c| c.model())
        .with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn generate(
    args: &ConfigArgs,
    task: Option<&str>,
    out: &Path,
    alignments: Option<&Path>,
) -> Result<()> {
    let mut overrides = args.overrides();
    if let Some(t) = task {
        overrides.push(format!("task.kind={t}"));
    }
    let cfg = build_config(args.config.as_deref(), &overrides)?;
    let corpus = gma_core::data::generate(&cfg.task)?;
    write_corpus(out, &corpus).with_context(|| format!("writing {}", out.display()))?;
    if let Some(a) = alignments {
        let gold: Vec<Links> = corpus.iter().map(|e| e.gold.clone()).collect();
        write_alignment_file(a, &gold).with_context(|| format!("writing {}", a.display()))?;
    }
    println!(
        "wrote {} examples of {} to {}",
        corpus.len(),
        cfg.task.kind,
        out.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct TrainReport<'a> {
    steps: usize,
    clipped_steps: usize,
    clip_frac: f64,
    params: usize,
    param_overhead: ParamOverhead,
    heldout_bleu: f64,
    final_eval: &'a EvalReport,
}

fn greedy_bleu(model: &Model, corpus: &[AlignedExample]) -> Result<f64> {
    let mut hyps = Vec::with_capacity(corpus.len());
    for ex in corpus {
        hyps.push(model.greedy_decode(&ex.src, decode_limit(model, ex))?);
    }
    let refs: Vec<Vec<u32>> = corpus.iter().map(|e| e.tgt.clone()).collect();
    Ok(corpus_bleu(&hyps, &refs)?)
}

fn write_train_outputs(
    dir: &Path,
    cfg: &RunConfig,
    out: &TrainOutcome,
    heldout: &[AlignedExample],
) -> Result<()> {
    write_text(
        &dir.join("metrics.csv"),
        &metrics_csv(&out.metrics, cfg.train.analysis_metrics),
    )?;
    Checkpoint::new(&out.model, Some(&out.adam), out.step).save(&dir.join("model.ckpt"))?;
    let report = TrainReport {
        steps: out.step,
        clipped_steps: out.clipped_steps,
        clip_frac: out.clip_frac(),
        params: out.model.param_count(),
        param_overhead: param_overhead(&cfg.model),
        heldout_bleu: greedy_bleu(&out.model, heldout)?,
        final_eval: &out.final_eval,
    };
    write_json(&dir.join("report.json"), &report)
}

fn progress(row: &MetricsRow) {
    eprintln!(
        "step {:>6}  loss {:.4}  acc {:.4}  lr {:.3e}  clip {:.2}{}",
        row.step,
        row.loss,
        row.token_acc,
        row.lr,
        row.clip_frac,
        row.aer.map(|a| format!("  aer {a:.4}")).unwrap_or_default()
    );
}

pub fn train(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    check_compatible(&cfg.model, &cfg.task).map_err(|e| config_err(e.to_string()))?;
    let (train_set, heldout) = match &cfg.paths.corpus {
        Some(p) => {
            let mut corpus = load_corpus(p)?;
            let n = cfg.train.heldout_size;
            if corpus.len() <= n {
                return Err(config_err(format!(
                    "corpus has {} examples, not enough for a held-out split of {n}",
                    corpus.len()
                )));
            }
            let heldout = corpus.split_off(corpus.len() - n);
            (corpus, heldout)
        }
        None => split_corpus(&cfg.task, cfg.train.heldout_size)?,
    };
    let dir = run_dir(&cfg, "train")?;
    let model = Model::new(cfg.model.clone(), cfg.train.seed)?;
    let out = train_model(model, &train_set, &heldout, &cfg.train, progress)?;
    write_train_outputs(&dir, &cfg, &out, &heldout)?;
    println!("{}", dir.display());
    Ok(())
}

#[derive(Serialize)]
struct EvaluateReport<'a> {
    checkpoint: &'a Path,
    corpus: &'a Path,
    sentences: usize,
    bleu: f64,
    #[serde(flatten)]
    eval: EvalReport,
}

pub fn evaluate(args: &ConfigArgs, ckpt: &Path, corpus_path: &Path) -> Result<()> {
    let cfg = load_config(args)?;
    let model = load_model(ckpt)?;
    let corpus = load_corpus(corpus_path)?;
    let report = EvaluateReport {
        checkpoint: ckpt,
        corpus: corpus_path,
        sentences: corpus.len(),
        bleu: greedy_bleu(&model, &corpus)?,
        eval: eval_model(&model, &corpus, true)?,
    };
    let dir = run_dir(&cfg, "evaluate")?;
    write_json(&dir.join("report.json"), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

const REPORTS: &[&str] = &["entropy", "gates", "aer", "ngram", "buckets"];

fn forced_records(model: &Model, corpus: &[AlignedExample]) -> Result<Vec<Vec<AttentionRecord>>> {
    corpus
        .iter()
        .map(|ex| Ok(model.forced_decode_attention(&ex.src, &ex.tgt)?))
        .collect()
}

fn hypotheses(model: &Model, corpus: &[AlignedExample]) -> Result<Vec<Vec<u32>>> {
    corpus
        .iter()
        .map(|ex| Ok(model.greedy_decode(&ex.src, decode_limit(model, ex))?))
        .collect()
}

pub fn analyze(
    args: &ConfigArgs,
    ckpt: &Path,
    corpus_path: &Path,
    reports: &[String],
    baseline: Option<&Path>,
) -> Result<()> {
    let cfg = load_config(args)?;
    if let Some(bad) = reports.iter().find(|r| !REPORTS.contains(&r.as_str())) {
        return Err(config_err(format!(
            "unknown report {bad:?}; expected one of {}",
            REPORTS.join(", ")
        )));
    }
    let buckets = LengthBucket::from_edges(&cfg.analysis.bucket_edges)
        .map_err(|e| config_err(e.to_string()))?;
    let model = load_model(ckpt)?;
    let base_model = baseline.map(load_model).transpose()?;
    let corpus = load_corpus(corpus_path)?;
    let dir = run_dir(&cfg, "analyze")?;
    let records = forced_records(&model, &corpus)?;

    if cfg.analysis.dump_attention {
        let lines: Vec<DumpLine> = corpus
            .iter()
            .zip(&records)
            .enumerate()
            .map(|(n, (ex, r))| DumpLine {
                sentence: n,
                src: ex.src.clone(),
                tgt: ex.tgt.clone(),
                records: r.clone(),
            })
            .collect();
        write_attention_dump(&dir.join("attention.jsonl"), &lines)?;
    }

    for report in reports {
        match report.as_str() {
            "entropy" => {
                let rep = entropy_report(&records, &entropy_buckets());
                write_text(&dir.join("entropy.csv"), &entropy_report_csv(&rep))?;
                write_json(&dir.join("entropy.json"), &rep)?;
                print!("{}", entropy_report_csv(&rep));
            }
            "gates" => {
                let rep = gate_report(records.iter().flatten());
                write_json(&dir.join("gates.json"), &rep)?;
                write_text(&dir.join("gates.svg"), &gate_histogram_svg(&rep))?;
                for l in &rep.layers {
                    println!(
                        "layer {} gate mean {:.4} over {} values",
                        l.layer, l.mean, l.total
                    );
                }
            }
            "aer" => {
                let layer = penultimate_layer(model.config().n_layers);
                let predicted = corpus
                    .iter()
                    .zip(&records)
                    .map(|(ex, r)| {
                        extract_alignment(
                            r,
                            ex.tgt.len(),
                            ex.src.len(),
                            layer,
                            cfg.analysis.attention,
                        )
                    })
                    .collect::<gma_core::Result<Vec<Links>>>()?;
                let gold: Vec<Links> = corpus.iter().map(|e| e.gold.clone()).collect();
                let scores = corpus_aer(&predicted, &gold)?;
                write_text(&dir.join("alignments.txt"), &format_alignments(&predicted))?;
                write_json(&dir.join("aer.json"), &scores)?;
                println!(
                    "aer {:.4}  precision {:.4}  recall {:.4}",
                    scores.aer, scores.precision, scores.recall
                );
            }
            "ngram" => {
                let refs: Vec<Vec<u32>> = corpus.iter().map(|e| e.tgt.clone()).collect();
                let ours = corpus_ngram_precisions(&hypotheses(&model, &corpus)?, &refs)?;
                let theirs = match &base_model {
                    Some(b) => Some(corpus_ngram_precisions(&hypotheses(b, &corpus)?, &refs)?),
                    None => None,
                };
                let f = |x: Option<f64>| x.map(|v| format!("{v:.6}")).unwrap_or_default();
                let mut csv = String::from("n,precision,baseline,gap\n");
                for n in 0..4 {
                    let b = theirs.map(|t| t[n]).flatten();
                    let gap = ours[n].zip(b).map(|(a, b)| a - b);
                    csv.push_str(&format!("{},{},{},{}\n", n + 1, f(ours[n]), f(b), f(gap)));
                }
                write_text(&dir.join("ngram.csv"), &csv)?;
                print!("{csv}");
            }
            "buckets" => {
                let rows = length_bucket_eval(&model, &corpus, &buckets)?;
                write_text(&dir.join("buckets.csv"), &bucket_csv(&rows))?;
                print!("{}", bucket_csv(&rows));
            }
            _ => unreachable!("validated above"),
        }
    }
    println!("{}", dir.display());
    Ok(())
}

pub fn sweep(args: &ConfigArgs, axes: &[String], parallel: usize) -> Result<()> {
    let cfg = load_config(args)?;
    let axes = axes
        .iter()
        .map(|a| a.parse::<SweepAxis>())
        .collect::<gma_core::Result<Vec<_>>>()
        .map_err(|e| config_err(e.to_string()))?;
    let points = sweep_points(&cfg.model, &cfg.task, &cfg.train, &axes)
        .map_err(|e| config_err(e.to_string()))?;
    for p in &points {
        check_compatible(&p.model, &p.task)
            .map_err(|e| config_err(format!("{}: {e}", p.values.join(","))))?;
    }
    let dir = run_dir(&cfg, "sweep")?;
    let rows = run_sweep(&points, parallel, |i, p, res| {
        let sub = dir.join(format!("run-{i:03}"));
        let label = p.values.join(",");
        let written = (|| -> Result<()> {
            std::fs::create_dir_all(&sub)?;
            let point_cfg = RunConfig {
                model: p.model.clone(),
                train: p.train.clone(),
                task: p.task.clone(),
                ..cfg.clone()
            };
            write_json(&sub.join("config.json"), &point_cfg)?;
            if let Ok(out) = res {
                let (_, heldout) = split_corpus(&p.task, p.train.heldout_size)?;
                write_train_outputs(&sub, &point_cfg, out, &heldout)?;
            }
            Ok(())
        })();
        match (res, written) {
            (Ok(out), Ok(())) => eprintln!(
                "[{label}] loss {:.4} acc {:.4}",
                out.final_eval.loss, out.final_eval.token_acc
            ),
            (Err(e), _) => eprintln!("[{label}] failed: {e}"),
            (_, Err(e)) => eprintln!("[{label}] could not write outputs: {e:#}"),
        }
    });
    write_text(&dir.join("sweep.csv"), &sweep_csv(&axes, &rows))?;
    print!("{}", sweep_csv(&axes, &rows));
    println!("{}", dir.display());
    Ok(())
}
