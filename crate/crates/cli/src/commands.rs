//! Subcommand bodies. Each reads a resolved [`RunConfig`] and writes its
//! artifacts under the output directory.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use ideolens::analytics::{self, AnnotationRecord};
use ideolens::checkpoint::Checkpoint;
use ideolens::corpus::{self, DocumentRecord, LabelScheme};
use ideolens::model::Model;
use ideolens::trainer::{self, MetricsReport, Objective, RunMetrics};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{EvalSplit, RunConfig};
use crate::error::{CliError, CliResult};
use crate::report;

pub const RESOLVED_CONFIG: &str = "run_config.toml";
pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const PRETRAINED_FILE: &str = "pretrained.safetensors";
pub const PRETRAIN_LOSSES_FILE: &str = "pretrain_losses.csv";
pub const MODEL_FILE: &str = "model.safetensors";
pub const HISTORY_FILE: &str = "history.csv";
pub const METRICS_FILE: &str = "metrics.json";
pub const AGREEMENT_FILE: &str = "agreement.json";
pub const REPORT_FILE: &str = "report.md";

fn missing(what: &str) -> CliError {
    CliError::Config(format!("{what} is not set"))
}

/// Creates the output directory and records the resolved configuration in it.
fn prepare_out(cfg: &RunConfig) -> CliResult<PathBuf> {
    let out = cfg.out.clone().ok_or_else(|| CliError::Usage("no output directory: pass --out DIR".into()))?;
    fs::create_dir_all(&out).map_err(|e| CliError::io(out.display().to_string(), e))?;
    write_file(&out.join(RESOLVED_CONFIG), cfg.to_toml()?.as_bytes())?;
    Ok(out)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    fs::write(path, bytes).map_err(|e| CliError::io(path.display().to_string(), e))
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(|e| CliError::io(path.display().to_string(), e))
}

/// Loads a corpus and applies labelling, leakage filtering, coarsening and
/// balancing as configured.
fn load_records(cfg: &RunConfig, path: &Path) -> CliResult<Vec<DocumentRecord>> {
    let d = &cfg.data;
    let mut records = corpus::load_corpus(path, cfg.model.image.resolution)?;
    if let Some(p) = &d.politicians {
        records = corpus::label_by_politician(&records, &corpus::load_politicians(p)?)?;
    }
    if let Some(p) = &d.blocklist {
        let report = corpus::filter_leakage(&records, &corpus::load_blocklist(p)?);
        for w in &report.warnings {
            eprintln!("warning: {w}");
        }
        eprintln!("leakage filter: kept {} removed {}", report.kept.len(), report.removed);
        records = report.kept;
    }
    if let Some(n) = d.n_classes {
        records = corpus::relabel(&records, LabelScheme::for_classes(n)?);
    }
    if d.balance {
        records = corpus::balance_subsample(&records, d.split_seed);
    }
    Ok(records)
}

struct Splits {
    train: Vec<DocumentRecord>,
    val: Vec<DocumentRecord>,
    test: Vec<DocumentRecord>,
    all: Vec<DocumentRecord>,
}

impl Splits {
    fn new(cfg: &RunConfig, records: Vec<DocumentRecord>) -> Self {
        let [t, v] = cfg.data.split;
        let (train, val, test) = corpus::split_by_cluster(&records, (t, v), cfg.data.split_seed);
        Self { train, val, test, all: records }
    }

    fn get(&self, split: EvalSplit) -> &[DocumentRecord] {
        match split {
            EvalSplit::Train => &self.train,
            EvalSplit::Val => &self.val,
            EvalSplit::Test => &self.test,
            EvalSplit::All => &self.all,
        }
    }
}

/// Seeded subset of `fraction` of the records (at least one), in input order.
fn label_subset(records: &[DocumentRecord], fraction: f64, seed: u64) -> Vec<DocumentRecord> {
    if fraction >= 1.0 || records.is_empty() {
        return records.to_vec();
    }
    let k = ((records.len() as f64 * fraction).round() as usize).clamp(1, records.len());
    let mut picks = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), records.len(), k).into_vec();
    picks.sort_unstable();
    picks.into_iter().map(|i| records[i].clone()).collect()
}

/// The configured model, or the checkpoint's when one is given. The two
/// must agree.
fn initial_model(cfg: &RunConfig) -> CliResult<Model> {
    match &cfg.init_checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.model.config != cfg.model {
                return Err(CliError::Core(ideolens::Error::Incompatible(format!(
                    "{} was built with a different model configuration",
                    path.display()
                ))));
            }
            Ok(ck.model)
        }
        None => Ok(Model::init(cfg.model.clone(), cfg.train.seed)?),
    }
}

fn write_metrics(cfg: &RunConfig, out: &Path, report: MetricsReport, started: Instant) -> CliResult<()> {
    let metrics = RunMetrics { report, config_hash: cfg.hash()?, seed: cfg.train.seed, wall_time_seconds: started.elapsed().as_secs_f64() };
    metrics.write(&out.join(METRICS_FILE))?;
    Ok(())
}

pub fn gen_synth(cfg: &RunConfig) -> CliResult<()> {
    let out = prepare_out(cfg)?;
    let synth = corpus::generate_synthetic(&cfg.synthetic)?;
    let path = out.join(CORPUS_FILE);
    corpus::write_corpus(&path, &synth.records)?;
    println!("gen-synth: records={} stories={} corpus={}", synth.records.len(), synth.clusters.len(), path.display());
    Ok(())
}

pub fn pretrain(cfg: &RunConfig, objective: Option<&str>) -> CliResult<()> {
    let out = prepare_out(cfg)?;
    let stages = match objective {
        Some(list) => Objective::parse_stages(list)?,
        None => vec![cfg.train.objective],
    };
    let records = match (&cfg.data.pretrain_corpus, &cfg.data.corpus) {
        (Some(p), _) => load_records(cfg, p)?,
        // Only the training split, so pretraining never sees evaluation stories.
        (None, Some(p)) => Splits::new(cfg, load_records(cfg, p)?).train,
        (None, None) => return Err(missing("data.pretrain_corpus or data.corpus")),
    };
    let outcome = trainer::pretrain_stages(&records, initial_model(cfg)?, &cfg.train, &stages)?;
    outcome.checkpoint.save(&out.join(PRETRAINED_FILE))?;
    let mut w = create(&out.join(PRETRAIN_LOSSES_FILE))?;
    let io = |e| CliError::io(PRETRAIN_LOSSES_FILE, e);
    writeln!(w, "step,loss").map_err(io)?;
    for (i, l) in outcome.losses.iter().enumerate() {
        writeln!(w, "{},{l}", i + 1).map_err(io)?;
    }
    w.flush().map_err(io)?;
    let names: Vec<String> = stages.iter().map(|s| s.to_string()).collect();
    let last = outcome.losses.last().map_or("none".to_string(), |l| format!("{l:.6}"));
    println!("pretrain: objectives={} steps={} final_loss={last}", names.join(","), outcome.losses.len());
    Ok(())
}

pub fn finetune(cfg: &RunConfig) -> CliResult<()> {
    let started = Instant::now();
    let out = prepare_out(cfg)?;
    let corpus_path = cfg.data.corpus.as_ref().ok_or_else(|| missing("data.corpus"))?;
    let splits = Splits::new(cfg, load_records(cfg, corpus_path)?);
    let train = label_subset(&splits.train, cfg.data.label_fraction, cfg.data.split_seed);
    let outcome = trainer::finetune(&train, &splits.val, initial_model(cfg)?, &cfg.train)?;
    let final_loss = outcome.history.last().map(|r| r.train_loss);
    Checkpoint { model: outcome.model.clone(), final_loss }.save(&out.join(MODEL_FILE))?;
    trainer::write_history_csv(create(&out.join(HISTORY_FILE))?, &outcome.history)?;
    let best = &outcome.history[outcome.best_epoch - 1];
    print!(
        "finetune: train={} epochs={} best_epoch={} val_accuracy={:.4}",
        train.len(),
        outcome.history.len(),
        outcome.best_epoch,
        best.val_accuracy
    );
    let eval = splits.get(cfg.data.eval_split);
    if eval.is_empty() {
        println!(" eval=skipped(empty {:?} split)", cfg.data.eval_split);
        return Ok(());
    }
    let report = trainer::evaluate(&outcome.model, eval)?;
    println!(" eval_accuracy={:.4} macro_f1={:.4}", report.overall_accuracy, report.macro_f1);
    write_metrics(cfg, &out, report, started)
}

pub fn evaluate(cfg: &RunConfig) -> CliResult<()> {
    let started = Instant::now();
    let out = prepare_out(cfg)?;
    let ck_path = cfg.checkpoint.as_ref().ok_or_else(|| missing("checkpoint"))?;
    let corpus_path = cfg.data.corpus.as_ref().ok_or_else(|| missing("data.corpus"))?;
    let model = Checkpoint::load(ck_path)?.model;
    let splits = Splits::new(cfg, load_records(cfg, corpus_path)?);
    let report = trainer::evaluate(&model, splits.get(cfg.data.eval_split))?;
    println!("evaluate: accuracy={:.4} macro_f1={:.4}", report.overall_accuracy, report.macro_f1);
    write_metrics(cfg, &out, report, started)
}

#[derive(Serialize)]
struct Agreement {
    n_items: usize,
    image_class_kappa: f64,
    face_count_kappa: f64,
}

/// Cohen's kappa between two annotators over the records both labelled.
fn agreement(a: &[AnnotationRecord], b: &[AnnotationRecord]) -> CliResult<Agreement> {
    let by_id: std::collections::BTreeMap<&str, &AnnotationRecord> = b.iter().map(|r| (r.record_id.as_str(), r)).collect();
    let pairs: Vec<(&AnnotationRecord, &AnnotationRecord)> =
        a.iter().filter_map(|r| by_id.get(r.record_id.as_str()).map(|s| (r, *s))).collect();
    let classes: (Vec<_>, Vec<_>) = pairs.iter().map(|(x, y)| (x.image_class, y.image_class)).unzip();
    let faces: (Vec<_>, Vec<_>) = pairs.iter().map(|(x, y)| (x.face_count, y.face_count)).unzip();
    Ok(Agreement {
        n_items: pairs.len(),
        image_class_kappa: analytics::cohens_kappa(&classes.0, &classes.1)?,
        face_count_kappa: analytics::cohens_kappa(&faces.0, &faces.1)?,
    })
}

fn slug(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_lowercase() } else { '_' }).collect()
}

pub fn analyze(cfg: &RunConfig) -> CliResult<()> {
    let out = prepare_out(cfg)?;
    let a = &cfg.analysis;
    let annotations = analytics::load_annotations(a.annotations.as_ref().ok_or_else(|| missing("analysis.annotations"))?)?;
    let mut tables = vec![
        ("faces.csv".to_string(), analytics::face_count_table(&annotations)?),
        ("image_classes.csv".to_string(), analytics::image_class_table(&annotations)?),
        ("emotions.csv".to_string(), analytics::emotion_distribution(&annotations)?),
    ];
    for figure in &a.figures {
        tables.push((format!("figure_{}.csv", slug(figure)), analytics::figure_cooccurrence(&annotations, figure)?));
    }
    for (name, table) in &tables {
        table.write_csv(create(&out.join(name))?, a.decimals)?;
    }
    print!("analyze: annotations={} tables={}", annotations.len(), tables.len());
    if let Some(p) = &a.second_annotations {
        let agree = agreement(&annotations, &analytics::load_annotations(p)?)?;
        let json = serde_json::to_string_pretty(&agree).map_err(|e| CliError::Core(e.into()))?;
        write_file(&out.join(AGREEMENT_FILE), format!("{json}\n").as_bytes())?;
        print!(" image_class_kappa={:.4}", agree.image_class_kappa);
    }
    println!();
    Ok(())
}

pub fn report(cfg: &RunConfig) -> CliResult<()> {
    if cfg.report.inputs.is_empty() {
        return Err(missing("report.inputs"));
    }
    let rows = cfg.report.inputs.iter().map(|p| Ok((report::row_name(p), RunMetrics::read_report(p)?))).collect::<CliResult<Vec<_>>>()?;
    let text = report::render(&rows, cfg.report.decimals)?;
    print!("{text}");
    if cfg.out.is_some() {
        let out = prepare_out(cfg)?;
        write_file(&out.join(REPORT_FILE), text.as_bytes())?;
    }
    Ok(())
}
