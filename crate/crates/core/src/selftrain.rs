//! Two-stage training: stage one on ground truth only, then repeated
//! pseudo-label / assess / filter / fine-tune rounds until validation Dice
//! stops improving. Also the per-dataset Multi-Nets baseline.

use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Parallelism;
use crate::grid::{ClassIndex, ClassSet, GridImage, LabelMap, PartialDataset};
use crate::losses::{fulllabel_loss, stage1_loss, LossReport, LossWeights};
use crate::metrics::{dice_binary, evaluate_datasets, summarize, EvalSummary};
use crate::model::{sgd_step, Arch, SegModel, Stage, TrainState};
use crate::pseudo::{argmax_labels, build_pseudo_dataset, PseudoSample};
use crate::qa::{self, Assessment};
use crate::seed;
use crate::synth::{corrupt_pseudo_samples, CorruptionRecord, CorruptionSpec};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Augment {
    pub flip: bool,
    pub noise_std: f64,
}

impl Default for Augment {
    fn default() -> Self {
        Augment {
            flip: false,
            noise_std: 0.0,
        }
    }
}

impl Augment {
    fn is_identity(&self) -> bool {
        !self.flip && self.noise_std == 0.0
    }

    fn apply(&self, image: &GridImage, label: &LabelMap, seed_value: u64) -> Result<(GridImage, LabelMap)> {
        let mut rng = seed::rng(seed_value);
        let (mut img, mut lab) = (image.clone(), label.clone());
        if self.flip && rng.random_bool(0.5) {
            img = img.flip_horizontal();
            lab = lab.flip_horizontal();
        }
        if self.noise_std > 0.0 {
            let normal = Normal::new(0.0, self.noise_std).map_err(|e| Error::Invalid(e.to_string()))?;
            let values = img.values().iter().map(|v| v + normal.sample(&mut rng)).collect();
            img = GridImage::new(img.channels(), img.height(), img.width(), values)?;
        }
        Ok((img, lab))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage1Config {
    pub base_lr: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub loss: LossWeights,
    pub augment: Augment,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            base_lr: 0.01,
            max_epochs: 1000,
            batch_size: 2,
            eval_every: 1,
            loss: LossWeights::default(),
            augment: Augment::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    None,
    Image,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneOrigin {
    /// Every round restarts from the stage-one model.
    Theta0,
    /// Every round continues from the previous round's model.
    Previous,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Stage2Config {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    pub max_iterations: usize,
    pub plateau_delta: f64,
    pub tau_quantile: f64,
    pub filtering: FilterMode,
    pub origin: FinetuneOrigin,
    pub augment: Augment,
    /// Damage pseudo labels before assessment; used to test the filter.
    pub pseudo_corruption: Option<CorruptionSpec>,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Stage2Config {
            lr: 1e-4,
            epochs: 200,
            batch_size: 2,
            eval_every: 1,
            max_iterations: 3,
            plateau_delta: 0.001,
            tau_quantile: qa::DEFAULT_TAU_QUANTILE,
            filtering: FilterMode::Image,
            origin: FinetuneOrigin::Theta0,
            augment: Augment::default(),
            pseudo_corruption: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub features: usize,
    pub conv_layers: usize,
    pub kernel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            features: 8,
            conv_layers: 2,
            kernel: 3,
        }
    }
}

/// Everything a run needs besides the data itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    /// Dataset manifests, relative to the config file.
    pub manifests: Vec<PathBuf>,
    pub seed: u64,
    #[serde(default)]
    pub parallelism: Parallelism,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub stage1: Stage1Config,
    #[serde(default)]
    pub stage2: Stage2Config,
}

impl RunConfig {
    pub fn new(manifests: Vec<PathBuf>, seed: u64) -> RunConfig {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            manifests,
            seed,
            parallelism: Parallelism::default(),
            model: ModelConfig::default(),
            stage1: Stage1Config::default(),
            stage2: Stage2Config::default(),
        }
    }

    /// Desk-scale schedule for the reference corpus: far fewer optimizer
    /// steps than the defaults assume, so fine-tuning uses a larger rate.
    pub fn reference(manifests: Vec<PathBuf>) -> RunConfig {
        let mut c = RunConfig::new(manifests, 0);
        c.stage1.max_epochs = 200;
        c.stage2.lr = 0.01;
        c.stage2.epochs = 50;
        c
    }

    pub fn from_toml(text: &str) -> Result<RunConfig> {
        let c: RunConfig = toml::from_str(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported config schema_version {}",
                self.schema_version
            )));
        }
        let (s1, s2) = (&self.stage1, &self.stage2);
        if s1.batch_size == 0 || s2.batch_size == 0 || s1.eval_every == 0 || s2.eval_every == 0 {
            return Err(Error::Invalid("batch_size and eval_every must be positive".into()));
        }
        if !(s1.base_lr >= 0.0 && s2.lr >= 0.0 && s1.base_lr.is_finite() && s2.lr.is_finite()) {
            return Err(Error::Invalid("learning rates must be finite and non-negative".into()));
        }
        if s2.max_iterations == 0 {
            return Err(Error::Invalid("stage2.max_iterations must be at least 1".into()));
        }
        if !(s2.plateau_delta >= 0.0) {
            return Err(Error::Invalid("stage2.plateau_delta must be non-negative".into()));
        }
        if !(s2.tau_quantile > 0.0 && s2.tau_quantile < 1.0) {
            return Err(Error::Invalid("stage2.tau_quantile must be in (0, 1)".into()));
        }
        if let Some(c) = &s2.pseudo_corruption {
            c.validate()?;
        }
        Ok(())
    }

    pub fn arch(&self, in_channels: usize, total_classes: usize) -> Arch {
        Arch {
            in_channels,
            features: self.model.features,
            classes: total_classes + 1,
            kernel: self.model.kernel,
            conv_layers: self.model.conv_layers,
        }
    }
}

/// Which loss a training item is scored with.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Objective {
    Stage1(LossWeights),
    FullLabel,
}

/// One training image with the classes its label covers.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub image: GridImage,
    pub label: LabelMap,
    pub annotated: ClassSet,
}

impl TrainItem {
    pub fn from_datasets(datasets: &[PartialDataset]) -> Vec<TrainItem> {
        datasets
            .iter()
            .flat_map(|d| {
                d.samples.iter().map(|s| TrainItem {
                    image: s.image.clone(),
                    label: s.label.clone(),
                    annotated: d.annotated.clone(),
                })
            })
            .collect()
    }

    pub fn from_pseudo(samples: &[PseudoSample], total_classes: usize) -> Vec<TrainItem> {
        samples
            .iter()
            .map(|s| TrainItem {
                image: s.image.clone(),
                label: s.label.clone(),
                annotated: ClassSet::all(total_classes),
            })
            .collect()
    }
}

/// Loss and parameter gradient of one item.
pub fn item_gradient(model: &SegModel, item: &TrainItem, objective: Objective) -> Result<(LossReport, Vec<f64>)> {
    let fwd = model.forward(&item.image)?;
    let (report, grad_probs) = match objective {
        Objective::Stage1(w) => stage1_loss(&fwd.probs, &item.label, &item.annotated, w)?,
        Objective::FullLabel => fulllabel_loss(&fwd.probs, &item.label)?,
    };
    let grads = model.backward(&item.image, &fwd, &grad_probs)?;
    Ok((report, grads))
}

/// Mean loss and gradient over a batch. Per-item work may run in parallel;
/// the sums are always taken in item order.
pub fn batch_gradient(
    model: &SegModel,
    items: &[&TrainItem],
    objective: Objective,
    par: Parallelism,
) -> Result<(LossReport, Vec<f64>)> {
    let results = par.map(items, |it| item_gradient(model, it, objective));
    let mut grads = vec![0.0; model.params().len()];
    let mut report = LossReport {
        total: 0.0,
        marginal_term: 0.0,
        exclusion_term: 0.0,
        per_class_dice_terms: Vec::new(),
        saturated: false,
    };
    let inv = 1.0 / items.len().max(1) as f64;
    for r in results {
        let (rep, g) = r?;
        report.total += rep.total * inv;
        report.marginal_term += rep.marginal_term * inv;
        report.exclusion_term += rep.exclusion_term * inv;
        report.saturated |= rep.saturated;
        for (a, b) in grads.iter_mut().zip(g) {
            *a += b * inv;
        }
    }
    Ok((report, grads))
}

/// One line of the per-epoch loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: String,
    pub epoch: usize,
    pub total: f64,
    pub marginal: f64,
    pub exclusion: f64,
    pub saturated: bool,
    pub val_dice: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Weights with the best validation Dice (the initial weights count as epoch 0).
    pub best: SegModel,
    pub best_epoch: usize,
    pub best_val_dice: f64,
    pub last: TrainState,
    pub history: Vec<EpochLog>,
    /// Set when a non-finite loss or gradient stopped training early.
    pub diverged: Option<String>,
}

pub struct TrainSpec<'a> {
    pub label: String,
    pub items: &'a [TrainItem],
    pub objective: Objective,
    pub batch_size: usize,
    pub eval_every: usize,
    pub augment: Augment,
    pub seed: u64,
}

/// Minibatch SGD with per-epoch shuffling, keeping the weights with the best
/// validation score.
pub fn train<V>(mut state: TrainState, spec: &TrainSpec<'_>, validate: V, par: Parallelism) -> Result<TrainOutcome>
where
    V: Fn(&SegModel) -> Result<f64>,
{
    let mut best = state.model.clone();
    let mut best_val = validate(&best)?;
    let mut best_epoch = state.epoch;
    let mut history = Vec::new();
    let mut diverged = None;
    let mut order: Vec<usize> = (0..spec.items.len()).collect();
    while state.epoch < state.max_epochs {
        let epoch = state.epoch;
        let mut rng = seed::stream(spec.seed, epoch as u64);
        order.shuffle(&mut rng);
        let augmented: Vec<TrainItem>;
        let items: Vec<&TrainItem> = if spec.augment.is_identity() {
            order.iter().map(|&i| &spec.items[i]).collect()
        } else {
            let aug_seed = seed::derive_seed(spec.seed ^ 0xA5A5, epoch as u64);
            augmented = par
                .map(&order, |&i| -> Result<TrainItem> {
                    let it = &spec.items[i];
                    let (image, label) = spec.augment.apply(&it.image, &it.label, seed::derive_seed(aug_seed, i as u64))?;
                    Ok(TrainItem {
                        image,
                        label,
                        annotated: it.annotated.clone(),
                    })
                })
                .into_iter()
                .collect::<Result<Vec<_>>>()?;
            augmented.iter().collect()
        };
        let (mut total, mut marginal, mut exclusion, mut saturated) = (0.0, 0.0, 0.0, false);
        for batch in items.chunks(spec.batch_size) {
            let (rep, grads) = batch_gradient(&state.model, batch, spec.objective, par)?;
            let w = batch.len() as f64 / items.len() as f64;
            total += rep.total * w;
            marginal += rep.marginal_term * w;
            exclusion += rep.exclusion_term * w;
            saturated |= rep.saturated;
            if !rep.total.is_finite() {
                diverged = Some(format!("non-finite loss in epoch {epoch}"));
                break;
            }
            match sgd_step(&mut state, &grads) {
                Ok(()) => {}
                Err(Error::Diverged { reason, .. }) => {
                    diverged = Some(reason);
                    break;
                }
                Err(e) => return Err(e),
            }
            if state.model.params().iter().any(|p| !p.is_finite()) {
                diverged = Some(format!("non-finite parameters in epoch {epoch}"));
                break;
            }
        }
        if diverged.is_some() {
            break;
        }
        state.advance_epoch();
        let val = if state.epoch % spec.eval_every == 0 || state.epoch == state.max_epochs {
            let v = validate(&state.model)?;
            if v > best_val {
                best_val = v;
                best = state.model.clone();
                best_epoch = state.epoch;
            }
            Some(v)
        } else {
            None
        };
        log::debug!("{} epoch {}: loss {total:.5} val {val:?}", spec.label, state.epoch);
        history.push(EpochLog {
            stage: spec.label.clone(),
            epoch: state.epoch,
            total,
            marginal,
            exclusion,
            saturated,
            val_dice: val,
        });
    }
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_val_dice: best_val,
        last: state,
        history,
        diverged,
    })
}

/// Grand-mean validation metrics of `predict` over annotated classes only.
pub fn validation_summary<F>(datasets: &[PartialDataset], total_classes: usize, par: Parallelism, predict: F) -> Result<EvalSummary>
where
    F: Fn(&GridImage) -> Result<LabelMap> + Sync,
{
    let rows = evaluate_datasets(datasets, total_classes, par, predict)?;
    Ok(summarize(&rows))
}

/// Grand-mean Dice over annotated classes (per-class means, then their mean).
pub fn model_val_dice(model: &SegModel, datasets: &[PartialDataset], par: Parallelism) -> Result<f64> {
    let total = model.arch().classes - 1;
    let mut sums = vec![(0.0, 0usize); total + 1];
    for d in datasets {
        let per = par.map(&d.samples, |s| -> Result<Vec<(ClassIndex, f64)>> {
            let pred = argmax_labels(&model.forward(&s.image)?.probs);
            Ok(d.annotated
                .iter()
                .map(|k| (k, dice_binary(&pred.mask_of(k), &s.label.mask_of(k))))
                .collect())
        });
        for r in per {
            for (k, v) in r? {
                sums[k as usize].0 += v;
                sums[k as usize].1 += 1;
            }
        }
    }
    let means: Vec<f64> = sums.iter().filter(|(_, n)| *n > 0).map(|(s, n)| s / *n as f64).collect();
    Ok(if means.is_empty() {
        0.0
    } else {
        means.iter().sum::<f64>() / means.len() as f64
    })
}

fn image_channels(datasets: &[PartialDataset]) -> Result<usize> {
    datasets
        .iter()
        .flat_map(|d| d.samples.first())
        .map(|s| s.image.channels())
        .next()
        .ok_or_else(|| Error::Invalid("no training samples".into()))
}

/// Stage one: the unified model trained on ground truth only.
pub fn train_stage1(
    config: &RunConfig,
    total_classes: usize,
    train_sets: &[PartialDataset],
    valid_sets: &[PartialDataset],
) -> Result<TrainOutcome> {
    let arch = config.arch(image_channels(train_sets)?, total_classes);
    let model = SegModel::init(arch, seed::derive_seed(config.seed, 1))?;
    let s1 = &config.stage1;
    let state = TrainState::new(model, s1.base_lr, s1.max_epochs, Stage::Initial, config.seed);
    let items = TrainItem::from_datasets(train_sets);
    let spec = TrainSpec {
        label: "stage1".into(),
        items: &items,
        objective: Objective::Stage1(s1.loss),
        batch_size: s1.batch_size,
        eval_every: s1.eval_every,
        augment: s1.augment,
        seed: seed::derive_seed(config.seed, 2),
    };
    let par = config.parallelism;
    train(state, &spec, |m| model_val_dice(m, valid_sets, par), par)
}

/// One network per dataset, each predicting only that dataset's classes.
#[derive(Debug, Clone)]
pub struct MultiNets {
    /// Global class set of each net; local channel `i + 1` is the i-th member.
    pub nets: Vec<(ClassSet, SegModel)>,
    pub total_classes: usize,
}

impl MultiNets {
    /// Pixels go to the most probable foreground class among the nets whose
    /// own argmax is foreground, otherwise background.
    pub fn predict(&self, image: &GridImage) -> Result<LabelMap> {
        let n = image.pixels();
        let mut best_p = vec![f64::NEG_INFINITY; n];
        let mut labels = vec![0 as ClassIndex; n];
        for (classes, net) in &self.nets {
            let probs = net.forward(image)?.probs;
            let local = argmax_labels(&probs);
            for i in 0..n {
                let c = local.labels()[i] as usize;
                if c == 0 {
                    continue;
                }
                let p = probs.get(c, i);
                if p > best_p[i] {
                    best_p[i] = p;
                    labels[i] = classes.as_slice()[c - 1];
                }
            }
        }
        LabelMap::new(image.height(), image.width(), labels)
    }
}

fn to_local(label: &LabelMap, classes: &ClassSet) -> LabelMap {
    let labels = label
        .labels()
        .iter()
        .map(|&l| classes.position(l).map_or(0, |p| p as ClassIndex + 1))
        .collect();
    LabelMap::new(label.height(), label.width(), labels).expect("same shape")
}

fn localize(d: &PartialDataset) -> Result<PartialDataset> {
    let local = ClassSet::all(d.annotated.len());
    let samples = d
        .samples
        .iter()
        .map(|s| crate::grid::Sample::new(s.id.clone(), s.image.clone(), to_local(&s.label, &d.annotated)))
        .collect::<Result<Vec<_>>>()?;
    PartialDataset::new(d.name.clone(), local, d.split, samples)
}

/// The Multi-Nets baseline under the stage-one budget: each dataset trains
/// its own net, treating its unannotated organs as background.
pub fn train_multinets(
    config: &RunConfig,
    total_classes: usize,
    train_sets: &[PartialDataset],
    valid_sets: &[PartialDataset],
) -> Result<(MultiNets, Vec<EpochLog>)> {
    let mut names: Vec<&str> = train_sets.iter().map(|d| d.name.as_str()).collect();
    names.dedup();
    let mut nets = Vec::new();
    let mut history = Vec::new();
    let s1 = &config.stage1;
    let par = config.parallelism;
    for (i, name) in names.iter().enumerate() {
        let tr: Vec<PartialDataset> = train_sets.iter().filter(|d| d.name == *name).map(localize).collect::<Result<_>>()?;
        let va: Vec<PartialDataset> = valid_sets.iter().filter(|d| d.name == *name).map(localize).collect::<Result<_>>()?;
        let classes = train_sets.iter().find(|d| d.name == *name).expect("present").annotated.clone();
        let arch = config.arch(image_channels(&tr)?, classes.len());
        let model = SegModel::init(arch, seed::derive_seed(config.seed, 1000 + i as u64))?;
        let state = TrainState::new(model, s1.base_lr, s1.max_epochs, Stage::Initial, config.seed);
        let items = TrainItem::from_datasets(&tr);
        let spec = TrainSpec {
            label: format!("multinet_{name}"),
            items: &items,
            objective: Objective::FullLabel,
            batch_size: s1.batch_size,
            eval_every: s1.eval_every,
            augment: s1.augment,
            seed: seed::derive_seed(config.seed, 2000 + i as u64),
        };
        let out = train(state, &spec, |m| model_val_dice(m, &va, par), par)?;
        if let Some(reason) = out.diverged {
            return Err(Error::Diverged {
                epoch: out.last.epoch,
                reason,
            });
        }
        history.extend(out.history);
        nets.push((classes, out.best));
    }
    Ok((MultiNets { nets, total_classes }, history))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IterationStatus {
    Completed,
    /// Every pseudo-labeled sample was filtered out.
    SkippedEmpty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub t: usize,
    pub status: IterationStatus,
    pub kept_count: usize,
    pub total_count: usize,
    pub val_dice_mean: Option<f64>,
    pub val_asd_mean: Option<f64>,
    /// Name of the checkpoint holding this round's weights.
    pub checkpoint_ref: Option<String>,
    /// Checkpoint the fine-tune started from.
    pub origin_ref: String,
    pub corrupted: usize,
}

/// Everything one self-training round produced.
#[derive(Debug, Clone)]
pub struct IterationOutput {
    pub record: IterationRecord,
    pub assessment: Option<Assessment>,
    pub corruption: Vec<CorruptionRecord>,
    pub pseudo: Vec<PseudoSample>,
    pub model: Option<SegModel>,
    pub history: Vec<EpochLog>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LoopStatus {
    /// Validation Dice improved by less than the plateau delta.
    Plateau,
    MaxIterations,
    EmptyFiltered,
    Diverged,
}

#[derive(Debug, Clone)]
pub struct SelfTrainOutcome {
    pub best: SegModel,
    /// 0 when no round beat the stage-one model.
    pub best_iteration: usize,
    pub best_val_dice: f64,
    pub theta0_val_dice: f64,
    pub iterations: Vec<IterationOutput>,
    pub status: LoopStatus,
}

pub fn checkpoint_name(t: usize) -> String {
    if t == 0 {
        "theta0.ckpt".into()
    } else {
        format!("theta{t}.ckpt")
    }
}

fn val_asd(model: &SegModel, datasets: &[PartialDataset], par: Parallelism) -> Result<Option<f64>> {
    let total = model.arch().classes - 1;
    let s = validation_summary(datasets, total, par, |img| Ok(argmax_labels(&model.forward(img)?.probs)))?;
    Ok(s.grand_asd)
}

/// Self-training from `theta0`: pseudo-label with the latest model, assess,
/// optionally filter, fine-tune with the full-label loss, and stop on a
/// validation plateau or after `max_iterations` rounds.
pub fn selftrain_loop(
    theta0: &SegModel,
    config: &RunConfig,
    train_sets: &[PartialDataset],
    valid_sets: &[PartialDataset],
) -> Result<SelfTrainOutcome> {
    let s2 = &config.stage2;
    let par = config.parallelism;
    let total = theta0.arch().classes - 1;
    let theta0_val = model_val_dice(theta0, valid_sets, par)?;
    let mut best = theta0.clone();
    let mut best_val = theta0_val;
    let mut best_iteration = 0;
    let mut prev = theta0.clone();
    let mut prev_ref = checkpoint_name(0);
    let mut iterations = Vec::new();
    let mut status = LoopStatus::MaxIterations;

    for t in 1..=s2.max_iterations {
        let mut pseudo = build_pseudo_dataset(&prev, train_sets, t, par)?;
        let total_count = pseudo.len();
        let corruption = match &s2.pseudo_corruption {
            Some(c) => {
                let mut c = *c;
                c.seed = seed::derive_seed(c.seed, t as u64);
                corrupt_pseudo_samples(&mut pseudo, &c, total)
            }
            None => Vec::new(),
        };
        let assessment = match qa::assess(&pseudo, &prev, s2.tau_quantile, par) {
            Ok(a) => Some(a),
            Err(e) if s2.filtering == FilterMode::None => {
                log::warn!("iteration {t}: assessment unavailable: {e}");
                None
            }
            Err(e) => return Err(e),
        };
        let kept: Vec<PseudoSample> = match (s2.filtering, &assessment) {
            (FilterMode::Image, Some(a)) => qa::filter(pseudo.clone(), &a.verdicts)?,
            _ => pseudo.clone(),
        };
        let origin = match s2.origin {
            FinetuneOrigin::Theta0 => (theta0.clone(), checkpoint_name(0)),
            FinetuneOrigin::Previous => (prev.clone(), prev_ref.clone()),
        };
        let mut record = IterationRecord {
            t,
            status: IterationStatus::Completed,
            kept_count: kept.len(),
            total_count,
            val_dice_mean: None,
            val_asd_mean: None,
            checkpoint_ref: None,
            origin_ref: origin.1,
            corrupted: corruption.len(),
        };
        if kept.is_empty() {
            log::warn!("iteration {t}: every pseudo-labeled sample was filtered out");
            record.status = IterationStatus::SkippedEmpty;
            iterations.push(IterationOutput {
                record,
                assessment,
                corruption,
                pseudo,
                model: None,
                history: Vec::new(),
            });
            status = LoopStatus::EmptyFiltered;
            break;
        }
        let items = TrainItem::from_pseudo(&kept, total);
        let state = TrainState::new(origin.0, s2.lr, s2.epochs, Stage::Finetune, config.seed);
        let spec = TrainSpec {
            label: format!("finetune_{t}"),
            items: &items,
            objective: Objective::FullLabel,
            batch_size: s2.batch_size,
            eval_every: s2.eval_every,
            augment: s2.augment,
            seed: seed::derive_seed(config.seed, 100 + t as u64),
        };
        let out = train(state, &spec, |m| model_val_dice(m, valid_sets, par), par)?;
        let model = out.best;
        let val = out.best_val_dice;
        record.val_dice_mean = Some(val);
        record.val_asd_mean = val_asd(&model, valid_sets, par)?;
        record.checkpoint_ref = Some(checkpoint_name(t));
        let diverged = out.diverged.is_some();
        iterations.push(IterationOutput {
            record,
            assessment,
            corruption,
            pseudo,
            model: Some(model.clone()),
            history: out.history,
        });
        if diverged {
            status = LoopStatus::Diverged;
            break;
        }
        let improvement = val - best_val;
        if val > best_val {
            best_val = val;
            best = model.clone();
            best_iteration = t;
        }
        prev = model;
        prev_ref = checkpoint_name(t);
        if improvement < s2.plateau_delta {
            status = LoopStatus::Plateau;
            break;
        }
    }
    Ok(SelfTrainOutcome {
        best,
        best_iteration,
        best_val_dice: best_val,
        theta0_val_dice: theta0_val,
        iterations,
        status,
    })
}
