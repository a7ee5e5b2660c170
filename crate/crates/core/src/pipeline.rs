//! Run directories: the file-level commands behind the `partseg` binary.
//!
//! Every command writes plain CSV and JSON. The only non-deterministic value
//! in any output is the `created_unix` field of `summary.json`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::grid::{ClassCatalog, ClassIndex, ClassSet, LabelMap, PartialDataset, Split};
use crate::io::{load_manifests, read_text, save_manifest, write_text};
use crate::metrics::{dice_binary, evaluate_datasets, summarize, wilcoxon_signed_rank, EvalRow, EvalSummary};
use crate::model::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta, SegModel, Stage};
use crate::pseudo::{argmax_labels, build_pseudo_dataset, load_pseudo_dataset, save_pseudo_dataset, PseudoSample};
use crate::qa::{self, Assessment};
use crate::selftrain::{
    checkpoint_name, selftrain_loop, train_multinets, train_stage1, EpochLog, IterationRecord, LoopStatus,
    MultiNets, RunConfig,
};
use crate::synth::{corpus_card, generate_corpus, CorpusSpec, CorruptionRecord};

/// Name of the wall-clock field in every `summary.json`.
pub const TIMESTAMP_FIELD: &str = "created_unix";

/// Process exit code for an error: 3 divergence, 4 empty filtered set,
/// 2 for everything else (bad or missing input).
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Diverged { .. } => 3,
        Error::EmptyFiltered { .. } => 4,
        _ => 2,
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    write_text(path, &(serde_json::to_string_pretty(value)? + "\n"))
}

fn write_summary(dir: &Path, mut value: Value) -> Result<PathBuf> {
    let now = SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0);
    value
        .as_object_mut()
        .expect("summary is an object")
        .insert(TIMESTAMP_FIELD.into(), json!(now));
    let path = dir.join("summary.json");
    write_json(&path, &value)?;
    Ok(path)
}

/// Parse a summary file and drop its timestamp.
pub fn read_summary(path: &Path) -> Result<Value> {
    let mut v: Value = serde_json::from_str(&read_text(path)?).map_err(|e| Error::format(path, e.to_string()))?;
    if let Some(o) = v.as_object_mut() {
        o.remove(TIMESTAMP_FIELD);
    }
    Ok(v)
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::format(path, e.to_string()))?;
    crate::io::write_bytes(path, &bytes)
}

fn read_csv<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<Vec<T>> {
    let text = read_text(path)?;
    csv::Reader::from_reader(text.as_bytes())
        .deserialize()
        .map(|r| r.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}

/// Read a run config; relative manifest paths resolve against the config's
/// directory.
pub fn load_config(path: &Path) -> Result<RunConfig> {
    let mut c = RunConfig::from_toml(&read_text(path)?).map_err(|e| match e {
        Error::Toml(t) => Error::format(path, t.to_string()),
        other => other,
    })?;
    let base = path.parent().unwrap_or(Path::new("."));
    for m in &mut c.manifests {
        if m.is_relative() {
            *m = base.join(&*m);
        }
    }
    Ok(c)
}

/// Datasets named by a config's manifests, grouped by split.
#[derive(Debug, Clone)]
pub struct Inputs {
    pub catalog: ClassCatalog,
    pub train: Vec<PartialDataset>,
    pub valid: Vec<PartialDataset>,
    pub test: Vec<PartialDataset>,
}

impl Inputs {
    pub fn load(config: &RunConfig) -> Result<Inputs> {
        let (catalog, datasets) = load_manifests(&config.manifests)?;
        let pick = |s: Split| datasets.iter().filter(|d| d.split == s).cloned().collect::<Vec<_>>();
        let inputs = Inputs {
            train: pick(Split::Train),
            valid: pick(Split::Valid),
            test: pick(Split::Test),
            catalog,
        };
        if inputs.train.iter().all(|d| d.is_empty()) {
            return Err(Error::Invalid("manifests contain no training samples".into()));
        }
        Ok(inputs)
    }

    pub fn split(&self, split: Split) -> &[PartialDataset] {
        match split {
            Split::Train => &self.train,
            Split::Valid => &self.valid,
            Split::Test => &self.test,
        }
    }

    pub fn total_classes(&self) -> usize {
        self.catalog.total_classes()
    }
}

fn snapshot_config(dir: &Path, config: &RunConfig) -> Result<()> {
    write_text(&dir.join("config.toml"), &config.to_toml())
}

#[derive(Serialize)]
struct LossRow<'a> {
    epoch: usize,
    stage: &'a str,
    total: f64,
    marginal: f64,
    exclusion: f64,
    saturated: u8,
    val_dice: Option<f64>,
}

fn write_loss_csv(path: &Path, history: &[EpochLog]) -> Result<()> {
    let rows: Vec<LossRow> = history
        .iter()
        .map(|h| LossRow {
            epoch: h.epoch,
            stage: &h.stage,
            total: h.total,
            marginal: h.marginal,
            exclusion: h.exclusion,
            saturated: h.saturated as u8,
            val_dice: h.val_dice,
        })
        .collect();
    write_csv(path, &rows)
}

// ---------------------------------------------------------------- generate

#[derive(Debug, Clone)]
pub struct GenerateOutput {
    pub manifests: Vec<PathBuf>,
    pub card: PathBuf,
}

/// Render a corpus under `out`: one manifest per partition entry plus a
/// corpus card and a copy of the spec.
pub fn cmd_generate(spec: &CorpusSpec, out: &Path, par: Parallelism) -> Result<GenerateOutput> {
    let corpus = generate_corpus(spec, par)?;
    let mut manifests = Vec::new();
    for p in &spec.partition {
        manifests.push(save_manifest(out, &p.name, &corpus.catalog, &corpus.group(&p.name))?);
    }
    let card = out.join("corpus_card.json");
    write_json(&card, &corpus_card(spec, &corpus))?;
    write_text(&out.join("corpus.toml"), &spec.to_toml())?;
    Ok(GenerateOutput { manifests, card })
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub multinets: Option<PathBuf>,
}

/// On-disk description of a Multi-Nets ensemble.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiNetsManifest {
    pub catalog: ClassCatalog,
    pub nets: Vec<MultiNetEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MultiNetEntry {
    pub classes: ClassSet,
    pub checkpoint: PathBuf,
}

fn local_catalog(catalog: &ClassCatalog, classes: &ClassSet) -> Result<ClassCatalog> {
    ClassCatalog::new(
        classes
            .iter()
            .map(|k| catalog.name(k).unwrap_or("?").to_string())
            .collect(),
    )
}

/// Stage one into `out/theta0.ckpt`, optionally followed by the Multi-Nets
/// baseline under `out/multinets/`.
pub fn cmd_train(config: &RunConfig, out: &Path, baseline: bool) -> Result<TrainReport> {
    config.validate()?;
    let inputs = Inputs::load(config)?;
    snapshot_config(out, config)?;
    let total = inputs.total_classes();
    let outcome = train_stage1(config, total, &inputs.train, &inputs.valid)?;
    let mut history = outcome.history.clone();
    let checkpoint = out.join(checkpoint_name(0));
    save_checkpoint(
        &checkpoint,
        &Checkpoint {
            catalog: inputs.catalog.clone(),
            model: outcome.best.clone(),
            meta: CheckpointMeta {
                stage: Stage::Initial,
                iteration: 0,
                epoch: outcome.best_epoch,
                origin: None,
                val_dice: Some(outcome.best_val_dice),
            },
        },
    )?;
    let mut summary = json!({
        "command": "train",
        "seed": config.seed,
        "epochs_run": outcome.last.epoch,
        "best_epoch": outcome.best_epoch,
        "best_val_dice": outcome.best_val_dice,
        "diverged": outcome.diverged,
    });
    if let Some(reason) = &outcome.diverged {
        write_loss_csv(&out.join("loss.csv"), &history)?;
        write_summary(out, summary)?;
        return Err(Error::Diverged {
            epoch: outcome.last.epoch,
            reason: reason.clone(),
        });
    }
    let valid = model_summary(&outcome.best, &inputs.valid, total, config.parallelism)?;
    summary["valid"] = serde_json::to_value(&valid)?;

    let mut multinets = None;
    if baseline {
        let (nets, mn_history) = train_multinets(config, total, &inputs.train, &inputs.valid)?;
        history.extend(mn_history);
        let dir = out.join("multinets");
        let mut entries = Vec::new();
        for (i, (classes, model)) in nets.nets.iter().enumerate() {
            let name = PathBuf::from(format!("net{i}.ckpt"));
            save_checkpoint(
                &dir.join(&name),
                &Checkpoint {
                    catalog: local_catalog(&inputs.catalog, classes)?,
                    model: model.clone(),
                    meta: CheckpointMeta {
                        stage: Stage::Initial,
                        iteration: 0,
                        epoch: 0,
                        origin: None,
                        val_dice: None,
                    },
                },
            )?;
            entries.push(MultiNetEntry {
                classes: classes.clone(),
                checkpoint: name,
            });
        }
        let path = dir.join("multinets.json");
        write_json(
            &path,
            &MultiNetsManifest {
                catalog: inputs.catalog.clone(),
                nets: entries,
            },
        )?;
        let s = predictor_summary(&Predictor::Multi(nets), &inputs.valid, total, config.parallelism)?;
        summary["multinets_valid"] = serde_json::to_value(&s)?;
        multinets = Some(path);
    }
    write_loss_csv(&out.join("loss.csv"), &history)?;
    write_summary(out, summary)?;
    Ok(TrainReport {
        checkpoint,
        best_epoch: outcome.best_epoch,
        best_val_dice: outcome.best_val_dice,
        multinets,
    })
}

// ---------------------------------------------------------------- selftrain

#[derive(Debug, Clone)]
pub struct SelftrainReport {
    pub best_checkpoint: PathBuf,
    pub best_iteration: usize,
    pub best_val_dice: f64,
    pub theta0_val_dice: f64,
    pub status: LoopStatus,
    pub iterations: Vec<IterationRecord>,
}

#[derive(Serialize)]
struct QaReportRow {
    sample_id: String,
    class: ClassIndex,
    provenance: &'static str,
    z1: f64,
    z2: f64,
    d2: Option<f64>,
    threshold: f64,
    flagged: u8,
    /// Dice of the merged label against the full oracle annotation, when known.
    label_dice: Option<f64>,
}

fn qa_rows(assessment: &Assessment, pseudo: &[PseudoSample]) -> Vec<QaReportRow> {
    assessment
        .rows()
        .into_iter()
        .zip(&assessment.features)
        .map(|(r, f)| {
            let s = &pseudo[f.sample];
            let label_dice = s
                .oracle
                .as_ref()
                .map(|o| dice_binary(&s.label.mask_of(f.class_k), &o.mask_of(f.class_k)));
            QaReportRow {
                sample_id: r.sample_id,
                class: r.class,
                provenance: r.provenance,
                z1: r.z1,
                z2: r.z2,
                d2: r.d2,
                threshold: r.threshold,
                flagged: r.flagged,
                label_dice,
            }
        })
        .collect()
}

#[derive(Serialize)]
struct IterationRow {
    t: usize,
    status: String,
    kept_count: usize,
    total_count: usize,
    corrupted: usize,
    val_dice_mean: Option<f64>,
    val_asd_mean: Option<f64>,
    checkpoint_ref: Option<String>,
    origin_ref: String,
}

/// Self-training from the stage-one checkpoint `init`. Iteration outputs are
/// written before a divergence or empty-filter error is returned.
pub fn cmd_selftrain(config: &RunConfig, init: &Path, out: &Path) -> Result<SelftrainReport> {
    config.validate()?;
    let inputs = Inputs::load(config)?;
    let theta0 = load_checkpoint(init, Some(&inputs.catalog))?;
    snapshot_config(out, config)?;
    save_checkpoint(&out.join(checkpoint_name(0)), &theta0)?;
    let outcome = selftrain_loop(&theta0.model, config, &inputs.train, &inputs.valid)?;

    let mut history = Vec::new();
    let mut rows = Vec::new();
    for it in &outcome.iterations {
        let r = &it.record;
        if let Some(a) = &it.assessment {
            write_csv(&out.join(format!("qa_iter{}.csv", r.t)), &qa_rows(a, &it.pseudo))?;
        }
        if !it.corruption.is_empty() {
            write_csv::<CorruptionRecord>(&out.join(format!("corruption_iter{}.csv", r.t)), &it.corruption)?;
        }
        if let (Some(model), Some(name)) = (&it.model, &r.checkpoint_ref) {
            save_checkpoint(
                &out.join(name),
                &Checkpoint {
                    catalog: inputs.catalog.clone(),
                    model: model.clone(),
                    meta: CheckpointMeta {
                        stage: Stage::Finetune,
                        iteration: r.t,
                        epoch: config.stage2.epochs,
                        origin: Some(r.origin_ref.clone()),
                        val_dice: r.val_dice_mean,
                    },
                },
            )?;
        }
        history.extend(it.history.iter().cloned());
        rows.push(IterationRow {
            t: r.t,
            status: serde_json::to_value(r.status)?.as_str().unwrap_or_default().to_string(),
            kept_count: r.kept_count,
            total_count: r.total_count,
            corrupted: r.corrupted,
            val_dice_mean: r.val_dice_mean,
            val_asd_mean: r.val_asd_mean,
            checkpoint_ref: r.checkpoint_ref.clone(),
            origin_ref: r.origin_ref.clone(),
        });
    }
    write_loss_csv(&out.join("loss.csv"), &history)?;
    write_csv(&out.join("iterations.csv"), &rows)?;
    let best_checkpoint = out.join("best.ckpt");
    save_checkpoint(
        &best_checkpoint,
        &Checkpoint {
            catalog: inputs.catalog.clone(),
            model: outcome.best.clone(),
            meta: CheckpointMeta {
                stage: if outcome.best_iteration == 0 { Stage::Initial } else { Stage::Finetune },
                iteration: outcome.best_iteration,
                epoch: 0,
                origin: Some(checkpoint_name(outcome.best_iteration)),
                val_dice: Some(outcome.best_val_dice),
            },
        },
    )?;
    let records: Vec<IterationRecord> = outcome.iterations.iter().map(|i| i.record.clone()).collect();
    write_summary(
        out,
        json!({
            "command": "selftrain",
            "seed": config.seed,
            "status": outcome.status,
            "best_iteration": outcome.best_iteration,
            "best_val_dice": outcome.best_val_dice,
            "theta0_val_dice": outcome.theta0_val_dice,
            "iterations": records,
        }),
    )?;
    match outcome.status {
        LoopStatus::Diverged => {
            let t = records.last().map(|r| r.t).unwrap_or(0);
            return Err(Error::Diverged {
                epoch: config.stage2.epochs,
                reason: format!("fine-tune at iteration {t} produced a non-finite loss"),
            });
        }
        LoopStatus::EmptyFiltered => {
            return Err(Error::EmptyFiltered {
                iteration: records.last().map(|r| r.t).unwrap_or(0),
            });
        }
        _ => {}
    }
    Ok(SelftrainReport {
        best_checkpoint,
        best_iteration: outcome.best_iteration,
        best_val_dice: outcome.best_val_dice,
        theta0_val_dice: outcome.theta0_val_dice,
        status: outcome.status,
        iterations: records,
    })
}

// ---------------------------------------------------------------- assess

/// Where the assessed pseudo dataset comes from.
#[derive(Debug, Clone)]
pub enum PseudoSource {
    /// Build it from the config's training manifests with the checkpoint.
    Build(RunConfig),
    /// A previously saved `pseudo.json`.
    Saved(PathBuf),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AssessReport {
    pub tau_quantile: f64,
    pub threshold: f64,
    pub kept: usize,
    pub total: usize,
    pub flagged_by_class: BTreeMap<ClassIndex, usize>,
}

#[derive(Serialize)]
struct VerdictRow {
    sample_id: String,
    keep: u8,
    flagged_classes: String,
}

/// Assess a pseudo dataset with the features of `checkpoint`.
pub fn cmd_assess(checkpoint: &Path, source: &PseudoSource, tau: f64, out: &Path) -> Result<AssessReport> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::Invalid(format!("tau quantile {tau} outside (0, 1)")));
    }
    let (pseudo, par) = match source {
        PseudoSource::Build(config) => {
            config.validate()?;
            let inputs = Inputs::load(config)?;
            let ckpt = load_checkpoint(checkpoint, Some(&inputs.catalog))?;
            let pseudo = build_pseudo_dataset(&ckpt.model, &inputs.train, 0, config.parallelism)?;
            save_pseudo_dataset(&out.join("pseudo"), &pseudo)?;
            (pseudo, config.parallelism)
        }
        PseudoSource::Saved(path) => (load_pseudo_dataset(path)?, Parallelism::default()),
    };
    let ckpt = load_checkpoint(checkpoint, None)?;
    let a = qa::assess(&pseudo, &ckpt.model, tau, par)?;
    write_csv(&out.join("qa.csv"), &qa_rows(&a, &pseudo))?;
    let verdicts: Vec<VerdictRow> = a
        .verdicts
        .iter()
        .map(|v| VerdictRow {
            sample_id: v.sample_id.clone(),
            keep: v.keep as u8,
            flagged_classes: v.flagged_classes.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" "),
        })
        .collect();
    write_csv(&out.join("verdicts.csv"), &verdicts)?;
    let mut flagged_by_class = BTreeMap::new();
    for v in &a.verdicts {
        for k in v.flagged_classes.iter() {
            *flagged_by_class.entry(k).or_insert(0) += 1;
        }
    }
    let report = AssessReport {
        tau_quantile: tau,
        threshold: a.threshold,
        kept: a.kept(),
        total: a.verdicts.len(),
        flagged_by_class,
    };
    let mut summary = serde_json::to_value(&report)?;
    summary["command"] = json!("assess");
    write_summary(out, summary)?;
    Ok(report)
}

// ---------------------------------------------------------------- eval

/// Something that maps an image to a label map over the full catalog.
#[derive(Debug, Clone)]
pub enum Predictor {
    Single(SegModel),
    Multi(MultiNets),
}

impl Predictor {
    /// A `.json` path is read as a Multi-Nets manifest, anything else as a
    /// checkpoint.
    pub fn load(path: &Path, catalog: &ClassCatalog) -> Result<Predictor> {
        if path.extension().is_some_and(|e| e == "json") {
            let m: MultiNetsManifest =
                serde_json::from_str(&read_text(path)?).map_err(|e| Error::format(path, e.to_string()))?;
            if m.catalog != *catalog {
                return Err(Error::CatalogMismatch {
                    expected: catalog.names().to_vec(),
                    found: m.catalog.names().to_vec(),
                });
            }
            let base = path.parent().unwrap_or(Path::new("."));
            let nets = m
                .nets
                .into_iter()
                .map(|n| Ok((n.classes, load_checkpoint(&base.join(&n.checkpoint), None)?.model)))
                .collect::<Result<Vec<_>>>()?;
            Ok(Predictor::Multi(MultiNets {
                nets,
                total_classes: catalog.total_classes(),
            }))
        } else {
            Ok(Predictor::Single(load_checkpoint(path, Some(catalog))?.model))
        }
    }

    pub fn predict(&self, image: &crate::grid::GridImage) -> Result<LabelMap> {
        match self {
            Predictor::Single(m) => Ok(argmax_labels(&m.forward(image)?.probs)),
            Predictor::Multi(m) => m.predict(image),
        }
    }
}

fn predictor_rows(p: &Predictor, datasets: &[PartialDataset], total: usize, par: Parallelism) -> Result<Vec<EvalRow>> {
    evaluate_datasets(datasets, total, par, |img| p.predict(img))
}

fn predictor_summary(p: &Predictor, datasets: &[PartialDataset], total: usize, par: Parallelism) -> Result<EvalSummary> {
    Ok(summarize(&predictor_rows(p, datasets, total, par)?))
}

fn model_summary(m: &SegModel, datasets: &[PartialDataset], total: usize, par: Parallelism) -> Result<EvalSummary> {
    predictor_summary(&Predictor::Single(m.clone()), datasets, total, par)
}

/// Per-(sample, class) metrics for a checkpoint or Multi-Nets manifest on
/// one split of the config's manifests.
pub fn cmd_eval(config: &RunConfig, predictor: &Path, split: Split, out: &Path) -> Result<EvalSummary> {
    let inputs = Inputs::load(config)?;
    let p = Predictor::load(predictor, &inputs.catalog)?;
    let rows = predictor_rows(&p, inputs.split(split), inputs.total_classes(), config.parallelism)?;
    if rows.is_empty() {
        return Err(Error::Invalid(format!("split {split} has no samples")));
    }
    write_csv(&out.join("eval_rows.csv"), &rows)?;
    let summary = summarize(&rows);
    let mut v = serde_json::to_value(&summary)?;
    v["command"] = json!("eval");
    v["split"] = json!(split);
    v["predictor"] = json!(predictor.file_name().map(|f| f.to_string_lossy().into_owned()));
    write_summary(out, v)?;
    Ok(summary)
}

// ---------------------------------------------------------------- report

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassRow {
    pub run: String,
    pub class: ClassIndex,
    pub evaluable_rows: usize,
    pub dice_mean: f64,
    pub asd_mean: Option<f64>,
    pub hd95_mean: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub reference: String,
    pub run: String,
    /// `all` or a class index.
    pub class: String,
    pub pairs: usize,
    pub mean_difference: f64,
    pub statistic: f64,
    pub p_value: f64,
    pub method: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub runs: Vec<String>,
    pub grand_dice: BTreeMap<String, Option<f64>>,
    pub classes: Vec<ClassRow>,
    pub comparisons: Vec<Comparison>,
}

fn dice_by_key(rows: &[EvalRow]) -> BTreeMap<(String, ClassIndex), f64> {
    rows.iter()
        .filter_map(|r| r.dice.map(|d| ((r.sample_id.clone(), r.class_k), d)))
        .collect()
}

fn compare(reference: &str, run: &str, class: String, pairs: &[(f64, f64)]) -> Option<Comparison> {
    let (xs, ys): (Vec<f64>, Vec<f64>) = pairs.iter().copied().unzip();
    let w = match wilcoxon_signed_rank(&ys, &xs) {
        Ok(w) => w,
        Err(e) => {
            log::warn!("skipping comparison {run} vs {reference} ({class}): {e}");
            return None;
        }
    };
    Some(Comparison {
        reference: reference.into(),
        run: run.into(),
        class,
        pairs: pairs.len(),
        mean_difference: pairs.iter().map(|(x, y)| y - x).sum::<f64>() / pairs.len() as f64,
        statistic: w.statistic,
        p_value: w.p_value,
        method: serde_json::to_value(w.method).ok()?.as_str()?.to_string(),
    })
}

/// Consolidate named eval directories. Runs are compared pairwise against
/// the first one with Wilcoxon tests on paired per-sample Dice. Iteration
/// logs and QA reports found next to them are merged into long tables.
pub fn cmd_report(runs: &[(String, PathBuf)], out: &Path) -> Result<Report> {
    if runs.is_empty() {
        return Err(Error::Invalid("report needs at least one run".into()));
    }
    let mut all_rows = Vec::new();
    for (name, dir) in runs {
        let rows: Vec<EvalRow> = read_csv(&dir.join("eval_rows.csv"))?;
        all_rows.push((name.clone(), rows));
    }
    let mut classes = Vec::new();
    let mut grand_dice = BTreeMap::new();
    for (name, rows) in &all_rows {
        let s = summarize(rows);
        grand_dice.insert(name.clone(), s.grand_dice);
        classes.extend(s.classes.iter().map(|c| ClassRow {
            run: name.clone(),
            class: c.class_k,
            evaluable_rows: c.evaluable_rows,
            dice_mean: c.dice_mean,
            asd_mean: c.asd_mean,
            hd95_mean: c.hd95_mean,
        }));
    }
    let (ref_name, ref_rows) = &all_rows[0];
    let ref_dice = dice_by_key(ref_rows);
    let mut comparisons = Vec::new();
    for (name, rows) in &all_rows[1..] {
        let dice = dice_by_key(rows);
        let paired: Vec<(ClassIndex, (f64, f64))> = ref_dice
            .iter()
            .filter_map(|(key, &x)| dice.get(key).map(|&y| (key.1, (x, y))))
            .collect();
        let all: Vec<(f64, f64)> = paired.iter().map(|p| p.1).collect();
        comparisons.extend(compare(ref_name, name, "all".into(), &all));
        let ks: std::collections::BTreeSet<ClassIndex> = paired.iter().map(|p| p.0).collect();
        for k in ks {
            let sub: Vec<(f64, f64)> = paired.iter().filter(|p| p.0 == k).map(|p| p.1).collect();
            comparisons.extend(compare(ref_name, name, k.to_string(), &sub));
        }
    }
    write_csv(&out.join("classes.csv"), &classes)?;
    write_csv(&out.join("comparisons.csv"), &comparisons)?;
    merge_side_tables(runs, out)?;
    let report = Report {
        runs: runs.iter().map(|r| r.0.clone()).collect(),
        grand_dice,
        classes,
        comparisons,
    };
    let mut v = serde_json::to_value(&report)?;
    v["command"] = json!("report");
    write_summary(out, v)?;
    Ok(report)
}

/// Append `run` (and `iteration` for QA files) columns to every
/// `iterations.csv` and `qa_iter{t}.csv` found in the run directories and
/// their parents.
fn merge_side_tables(runs: &[(String, PathBuf)], out: &Path) -> Result<()> {
    let mut iterations: Option<csv::Writer<Vec<u8>>> = None;
    let mut qa: Option<csv::Writer<Vec<u8>>> = None;
    for (name, dir) in runs {
        let candidates = [dir.clone(), dir.parent().map(Path::to_path_buf).unwrap_or_default()];
        let Some(root) = candidates.iter().find(|d| d.join("iterations.csv").exists()) else {
            continue;
        };
        append_table(&mut iterations, &root.join("iterations.csv"), &[name.as_str()], &["run"])?;
        for t in 1.. {
            let p = root.join(format!("qa_iter{t}.csv"));
            if !p.exists() {
                break;
            }
            append_table(&mut qa, &p, &[name.as_str(), &t.to_string()], &["run", "iteration"])?;
        }
    }
    for (w, file) in [(iterations, "iterations.csv"), (qa, "qa.csv")] {
        if let Some(w) = w {
            let path = out.join(file);
            let bytes = w.into_inner().map_err(|e| Error::format(&path, e.to_string()))?;
            crate::io::write_bytes(&path, &bytes)?;
        }
    }
    Ok(())
}

fn append_table(
    writer: &mut Option<csv::Writer<Vec<u8>>>,
    path: &Path,
    prefix: &[&str],
    prefix_names: &[&str],
) -> Result<()> {
    let text = read_text(path)?;
    let mut r = csv::Reader::from_reader(text.as_bytes());
    let err = |e: csv::Error| Error::format(path, e.to_string());
    let headers = r.headers().map_err(err)?.clone();
    let w = match writer {
        Some(w) => w,
        None => {
            let mut w = csv::Writer::from_writer(Vec::new());
            w.write_record(prefix_names.iter().copied().chain(headers.iter())).map_err(err)?;
            writer.insert(w)
        }
    };
    for rec in r.records() {
        let rec = rec.map_err(err)?;
        w.write_record(prefix.iter().copied().chain(rec.iter())).map_err(err)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SplitSizes;

    fn tiny_spec() -> CorpusSpec {
        let mut spec = CorpusSpec::reference();
        spec.scene.height = 20;
        spec.scene.width = 20;
        for o in &mut spec.scene.organs {
            o.size = [2.0, 3.0];
        }
        spec.samples = SplitSizes {
            train: 4,
            valid: 2,
            test: 2,
        };
        spec
    }

    fn tiny_config(manifests: Vec<PathBuf>) -> RunConfig {
        let mut c = RunConfig::new(manifests, 11);
        c.parallelism = Parallelism::Sequential;
        c.model.features = 3;
        c.stage1.max_epochs = 2;
        c.stage2.epochs = 1;
        c.stage2.max_iterations = 2;
        c.stage2.plateau_delta = 0.0;
        c.stage2.filtering = crate::selftrain::FilterMode::None;
        c
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Diverged { epoch: 1, reason: "x".into() }), 3);
        assert_eq!(exit_code(&Error::EmptyFiltered { iteration: 1 }), 4);
        assert_eq!(exit_code(&Error::Invalid("x".into())), 2);
    }

    #[test]
    fn run_directory_flow() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let g = cmd_generate(&tiny_spec(), &root.join("corpus"), Parallelism::Sequential).unwrap();
        assert_eq!(g.manifests.len(), 2);
        let config = tiny_config(g.manifests.clone());

        let t = cmd_train(&config, &root.join("train"), true).unwrap();
        assert!(t.checkpoint.exists());
        assert!(t.multinets.as_ref().unwrap().exists());
        let loss = std::fs::read_to_string(root.join("train/loss.csv")).unwrap();
        assert!(loss.starts_with("epoch,stage,total,marginal,exclusion,saturated,val_dice\n"));

        let s = cmd_selftrain(&config, &t.checkpoint, &root.join("self")).unwrap();
        assert!(s.iterations.len() <= 2);
        assert!(root.join("self/iterations.csv").exists());
        for r in &s.iterations {
            assert_eq!(r.origin_ref, "theta0.ckpt");
            assert!(root.join("self").join(r.checkpoint_ref.as_ref().unwrap()).exists());
        }

        for (name, p) in [("theta0", &t.checkpoint), ("final", &s.best_checkpoint)] {
            cmd_eval(&config, p, Split::Valid, &root.join("eval").join(name)).unwrap();
        }
        cmd_eval(&config, t.multinets.as_ref().unwrap(), Split::Valid, &root.join("eval/mn")).unwrap();
        let runs = vec![
            ("theta0".to_string(), root.join("eval/theta0")),
            ("final".to_string(), root.join("eval/final")),
        ];
        let rep = cmd_report(&runs, &root.join("report")).unwrap();
        assert_eq!(rep.runs.len(), 2);
        assert!(root.join("report/classes.csv").exists());

        let a = cmd_assess(&t.checkpoint, &PseudoSource::Build(config.clone()), 0.95, &root.join("qa")).unwrap();
        assert_eq!(a.total, 8);
        let again = cmd_assess(
            &t.checkpoint,
            &PseudoSource::Saved(root.join("qa/pseudo/pseudo.json")),
            0.95,
            &root.join("qa2"),
        )
        .unwrap();
        assert_eq!(again, a);
    }

    #[test]
    fn generate_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_spec();
        cmd_generate(&spec, &dir.path().join("a"), Parallelism::Sequential).unwrap();
        cmd_generate(&spec, &dir.path().join("b"), Parallelism::default()).unwrap();
        for name in ["bowel_a.json", "corpus_card.json", "bowel_a/train/bowel_a_train_000.image.grid"] {
            assert_eq!(
                std::fs::read(dir.path().join("a").join(name)).unwrap(),
                std::fs::read(dir.path().join("b").join(name)).unwrap(),
                "{name}"
            );
        }
    }

    #[test]
    fn missing_inputs_are_errors() {
        let dir = tempfile::tempdir().unwrap();
        let c = tiny_config(vec![dir.path().join("nope.json")]);
        let e = cmd_train(&c, dir.path(), false).unwrap_err();
        assert_eq!(exit_code(&e), 2);
        assert!(cmd_report(&[], dir.path()).is_err());
    }
}
