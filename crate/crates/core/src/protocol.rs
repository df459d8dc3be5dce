//! Training, fold construction and evaluation.

use alloc::borrow::Cow;
use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{AnnotationRecord, DatasetManifest, NUM_CLASSES};
use crate::flow::{FlowMoments, RegionStack, REGIONS};
use crate::loss::{total_loss, LossComponents, LossWeights};
use crate::metrics::{compute_metrics, ConfusionMatrix, MetricsError};
use crate::nn::{BackboneConfig, BackboneVariant, ModelConfig, NnError, RrrnModel};
use crate::optim::{Adam, AdamConfig};
use crate::seed;

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum ProtocolError {
    #[error("manifest `{0}` has no class-mapped records")]
    EmptyManifest(String),
    #[error("record `{0}` has no objective class")]
    UnmappedRecord(String),
    #[error("leave-one-subject-out needs at least two subjects")]
    SingleSubject,
    #[error("no cached flow for sample `{0}`")]
    CacheMiss(String),
    #[error("test sample `{0}` has augmented copies in the evaluation set")]
    AugmentedTestSample(String),
    #[error("loss diverged at epoch {epoch}, batch {batch}: {components:?}")]
    DivergedLoss {
        epoch: usize,
        batch: usize,
        components: LossComponents,
    },
    #[error("no training examples")]
    NoTrainingData,
    #[error("invalid run configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Network(#[from] NnError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
}

/// Hyperparameters of one training run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub optimizer: AdamConfig,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub loss_weights: LossWeights,
    pub model: ModelConfig,
    pub seed: u64,
    pub augmentation_enabled: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            optimizer: AdamConfig::default(),
            epochs: 50,
            batch_size: 32,
            learning_rate: 0.0005,
            loss_weights: LossWeights::default(),
            model: ModelConfig::default(),
            seed: 0,
            augmentation_enabled: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ProtocolError> {
        if self.epochs == 0 {
            return Err(ProtocolError::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(ProtocolError::InvalidConfig("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(ProtocolError::InvalidConfig(format!("learning_rate {} is not a finite non-negative number", self.learning_rate)));
        }
        let w = &self.loss_weights;
        if !(w.beta >= 0.0 && w.lambda1 >= 0.0 && w.lambda2 >= 0.0) {
            return Err(ProtocolError::InvalidConfig("loss weights must be non-negative".into()));
        }
        self.model.validate()?;
        Ok(())
    }

    /// Flat `key = value` pairs, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(&'static str, String)> {
        let b = &self.model.backbone;
        alloc::vec![
            ("optimizer.kind", "ADAM".into()),
            ("optimizer.beta1", format!("{}", self.optimizer.beta1)),
            ("optimizer.beta2", format!("{}", self.optimizer.beta2)),
            ("optimizer.epsilon", format!("{}", self.optimizer.epsilon)),
            ("epochs", format!("{}", self.epochs)),
            ("batch_size", format!("{}", self.batch_size)),
            ("learning_rate", format!("{}", self.learning_rate)),
            ("loss_weights.beta", format!("{}", self.loss_weights.beta)),
            ("loss_weights.lambda1", format!("{}", self.loss_weights.lambda1)),
            ("loss_weights.lambda2", format!("{}", self.loss_weights.lambda2)),
            ("backbone.variant", b.variant.as_str().into()),
            ("backbone.stream_channels", format!("{}", b.stream_channels)),
            ("backbone.input_size", format!("{}", b.input_size)),
            ("backbone.pretrained_init", format!("{}", b.pretrained_init)),
            ("attention.reduction", format!("{}", self.model.attention_reduction)),
            ("seed", format!("{}", self.seed)),
            ("augmentation_enabled", format!("{}", self.augmentation_enabled)),
        ]
    }

    /// Sets one field from its flat key. Returns `Ok(false)` for keys this
    /// struct does not own.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool, ProtocolError> {
        fn parse<T: core::str::FromStr>(key: &str, value: &str) -> Result<T, ProtocolError> {
            value
                .trim()
                .parse()
                .map_err(|_| ProtocolError::InvalidConfig(format!("bad value `{value}` for `{key}`")))
        }
        let b: &mut BackboneConfig = &mut self.model.backbone;
        match key {
            "optimizer.kind" => {
                if !value.trim().eq_ignore_ascii_case("adam") {
                    return Err(ProtocolError::InvalidConfig(format!("unsupported optimizer `{value}`")));
                }
            }
            "optimizer.beta1" => self.optimizer.beta1 = parse(key, value)?,
            "optimizer.beta2" => self.optimizer.beta2 = parse(key, value)?,
            "optimizer.epsilon" => self.optimizer.epsilon = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "learning_rate" => self.learning_rate = parse(key, value)?,
            "loss_weights.beta" => self.loss_weights.beta = parse(key, value)?,
            "loss_weights.lambda1" => self.loss_weights.lambda1 = parse(key, value)?,
            "loss_weights.lambda2" => self.loss_weights.lambda2 = parse(key, value)?,
            "backbone.variant" => {
                b.variant = value
                    .parse::<BackboneVariant>()
                    .map_err(|e| ProtocolError::InvalidConfig(e.to_string()))?
            }
            "backbone.stream_channels" => b.stream_channels = parse(key, value)?,
            "backbone.input_size" => b.input_size = parse(key, value)?,
            "backbone.pretrained_init" => b.pretrained_init = parse(key, value)?,
            "attention.reduction" => self.model.attention_reduction = parse(key, value)?,
            "seed" => self.seed = parse(key, value)?,
            "augmentation_enabled" => self.augmentation_enabled = parse(key, value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    /// Stable hash of the canonical key/value rendering.
    pub fn fingerprint(&self) -> String {
        let mut text = String::new();
        for (k, v) in self.to_pairs() {
            text.push_str(k);
            text.push('=');
            text.push_str(&v);
            text.push('\n');
        }
        format!("{:016x}", seed::fnv1a(text.as_bytes()))
    }
}

/// A train/test split over sample ids.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub name: String,
    pub train_ids: BTreeSet<String>,
    pub test_ids: BTreeSet<String>,
}

fn mapped_ids(manifest: &DatasetManifest, label: &str) -> Result<BTreeSet<String>, ProtocolError> {
    if manifest.is_empty() {
        return Err(ProtocolError::EmptyManifest(label.into()));
    }
    manifest
        .records
        .iter()
        .map(|r| {
            if r.objective_class.is_some() {
                Ok(r.sample_id.clone())
            } else {
                Err(ProtocolError::UnmappedRecord(r.sample_id.clone()))
            }
        })
        .collect()
}

fn database_label(manifest: &DatasetManifest) -> String {
    manifest
        .records
        .first()
        .map(|r| r.database_id.as_str().to_string())
        .unwrap_or_default()
}

/// Cross-database folds: train on the first database and test on the second,
/// then the reverse.
pub fn hde_folds(first: &DatasetManifest, second: &DatasetManifest) -> Result<[Fold; 2], ProtocolError> {
    let (a_name, b_name) = (database_label(first), database_label(second));
    let a = mapped_ids(first, &a_name)?;
    let b = mapped_ids(second, &b_name)?;
    Ok([
        Fold {
            name: format!("{a_name}_to_{b_name}"),
            train_ids: a.clone(),
            test_ids: b.clone(),
        },
        Fold {
            name: format!("{b_name}_to_{a_name}"),
            train_ids: b,
            test_ids: a,
        },
    ])
}

/// One fold per subject, holding that subject's samples out.
pub fn loso_folds(composite: &DatasetManifest) -> Result<Vec<Fold>, ProtocolError> {
    let all = mapped_ids(composite, "composite")?;
    let mut by_subject: BTreeMap<&str, BTreeSet<String>> = BTreeMap::new();
    for r in &composite.records {
        by_subject.entry(r.subject_id.as_str()).or_default().insert(r.sample_id.clone());
    }
    if by_subject.len() < 2 {
        return Err(ProtocolError::SingleSubject);
    }
    Ok(by_subject
        .into_iter()
        .map(|(subject, test_ids)| Fold {
            name: format!("subject_{subject}"),
            train_ids: all.difference(&test_ids).cloned().collect(),
            test_ids,
        })
        .collect())
}

/// Checks that no subject appears on both sides of a fold.
pub fn subject_leakage<'a>(fold: &Fold, records: impl IntoIterator<Item = &'a AnnotationRecord>) -> BTreeSet<String> {
    let mut train = BTreeSet::new();
    let mut test = BTreeSet::new();
    for r in records {
        if fold.train_ids.contains(&r.sample_id) {
            train.insert(r.subject_id.clone());
        }
        if fold.test_ids.contains(&r.sample_id) {
            test.insert(r.subject_id.clone());
        }
    }
    train.intersection(&test).cloned().collect()
}

/// One network input with its label. Augmented copies share the sample id
/// of the clip they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub sample_id: String,
    pub stack: RegionStack,
    pub label: usize,
    pub augmented: bool,
}

/// Indexed training data. Implementations may load examples lazily.
pub trait ExampleSource {
    fn len(&self) -> usize;

    fn example(&self, index: usize) -> Result<Cow<'_, Example>, ProtocolError>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl ExampleSource for [Example] {
    fn len(&self) -> usize {
        <[Example]>::len(self)
    }

    fn example(&self, index: usize) -> Result<Cow<'_, Example>, ProtocolError> {
        Ok(Cow::Borrowed(&self[index]))
    }
}

impl ExampleSource for Vec<Example> {
    fn len(&self) -> usize {
        Vec::len(self)
    }

    fn example(&self, index: usize) -> Result<Cow<'_, Example>, ProtocolError> {
        Ok(Cow::Borrowed(&self[index]))
    }
}

/// Mean loss terms and accuracy over one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub cls: f64,
    pub rb: f64,
    pub cor: f64,
    pub total: f64,
    pub accuracy: f64,
}

/// State handed to the epoch callback.
pub struct EpochEnd<'a> {
    pub log: &'a EpochLog,
    pub model: &'a RrrnModel,
    pub optimizer: &'a Adam,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub model: RrrnModel,
    pub optimizer: Adam,
    pub log: Vec<EpochLog>,
}

/// A model with fresh weights from the run seed and the input normalizer
/// fitted on `examples`.
pub fn initial_model<S: ExampleSource + ?Sized>(cfg: &RunConfig, examples: &S) -> Result<RrrnModel, ProtocolError> {
    let mut model = RrrnModel::new(cfg.model, cfg.seed)?;
    let mut moments = FlowMoments::default();
    for i in 0..examples.len() {
        moments.add(&examples.example(i)?.stack);
    }
    model.normalizer = moments.finish();
    Ok(model)
}

/// Mini-batch Adam over `examples`. The visiting order comes from the run
/// seed, so equal inputs give bit-identical results.
pub fn train<S: ExampleSource + ?Sized>(
    mut model: RrrnModel,
    examples: &S,
    cfg: &RunConfig,
    on_epoch: &mut dyn FnMut(EpochEnd<'_>),
) -> Result<TrainOutcome, ProtocolError> {
    cfg.validate()?;
    if examples.is_empty() {
        return Err(ProtocolError::NoTrainingData);
    }
    let mut rng = seed::rng_for(cfg.seed, "shuffle");
    let mut optimizer = Adam::new(cfg.optimizer);
    let mut grad = model.zeros_like();
    let mut order: Vec<usize> = (0..examples.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut sums = LossComponents::default();
        let mut correct = 0usize;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            grad.tensors_mut().into_iter().for_each(|t| t.fill(0.0));
            let scale = 1.0 / batch.len() as f64;
            let mut batch_sum = LossComponents::default();
            for &i in batch {
                let ex = examples.example(i)?;
                let s = model.accumulate_gradients(&ex.stack, ex.label, &cfg.loss_weights, scale, &mut grad)?;
                batch_sum.cls += s.components.cls;
                batch_sum.rb += s.components.rb;
                batch_sum.cor += s.components.cor;
                if crate::nn::argmax(&s.logits) == ex.label {
                    correct += 1;
                }
            }
            if !batch_sum.is_finite() {
                return Err(ProtocolError::DivergedLoss {
                    epoch,
                    batch: batch_no,
                    components: batch_sum,
                });
            }
            sums.cls += batch_sum.cls;
            sums.rb += batch_sum.rb;
            sums.cor += batch_sum.cor;
            let grads: Vec<_> = grad.named_tensors().into_iter().map(|(_, t)| t).collect();
            optimizer.update(model.tensors_mut(), &grads, cfg.learning_rate);
        }
        let n = examples.len() as f64;
        let means = LossComponents {
            cls: sums.cls / n,
            rb: sums.rb / n,
            cor: sums.cor / n,
        };
        let entry = EpochLog {
            epoch: epoch + 1,
            cls: means.cls,
            rb: means.rb,
            cor: means.cor,
            total: total_loss(&means, &cfg.loss_weights),
            accuracy: correct as f64 / n,
        };
        log.push(entry);
        on_epoch(EpochEnd {
            log: &entry,
            model: &model,
            optimizer: &optimizer,
        });
    }
    Ok(TrainOutcome { model, optimizer, log })
}

/// Anything that maps a region stack to a class index.
pub trait Predictor {
    fn predict(&self, stack: &RegionStack) -> Result<usize, ProtocolError>;
}

impl Predictor for RrrnModel {
    fn predict(&self, stack: &RegionStack) -> Result<usize, ProtocolError> {
        Ok(self.forward(stack)?.predicted_class())
    }
}

/// Per-fold confusion matrix and metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldReport {
    pub name: String,
    pub confusion: Vec<Vec<u64>>,
    pub war: f64,
    pub uar: f64,
    pub f1: f64,
    pub wf1: f64,
    /// Classes without test samples, left out of the UAR and F1 averages.
    pub zero_support_classes: Vec<usize>,
}

impl FoldReport {
    pub fn from_confusion(name: impl Into<String>, cm: &ConfusionMatrix) -> Result<Self, ProtocolError> {
        let m = compute_metrics(cm)?;
        Ok(Self {
            name: name.into(),
            confusion: cm.counts().to_vec(),
            war: m.war,
            uar: m.uar,
            f1: m.f1,
            wf1: m.wf1,
            zero_support_classes: zero_support(cm),
        })
    }

    pub fn matrix(&self) -> ConfusionMatrix {
        ConfusionMatrix::from_counts(self.confusion.clone())
    }
}

fn zero_support(cm: &ConfusionMatrix) -> Vec<usize> {
    cm.counts()
        .iter()
        .enumerate()
        .filter(|(_, row)| row.iter().sum::<u64>() == 0)
        .map(|(c, _)| c)
        .collect()
}

/// Predicts every test sample of `fold` from its single un-augmented example.
pub fn evaluate(predictor: &dyn Predictor, fold: &Fold, examples: &[Example]) -> Result<FoldReport, ProtocolError> {
    let mut by_id: BTreeMap<&str, &Example> = BTreeMap::new();
    for ex in examples.iter().filter(|e| fold.test_ids.contains(&e.sample_id)) {
        if ex.augmented || by_id.insert(ex.sample_id.as_str(), ex).is_some() {
            return Err(ProtocolError::AugmentedTestSample(ex.sample_id.clone()));
        }
    }
    let mut cm = ConfusionMatrix::new(NUM_CLASSES);
    for id in &fold.test_ids {
        let ex = by_id.get(id.as_str()).ok_or_else(|| ProtocolError::CacheMiss(id.clone()))?;
        let predicted = predictor.predict(&ex.stack)?;
        cm.record(ex.label, predicted)?;
    }
    FoldReport::from_confusion(fold.name.clone(), &cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Hde,
    Cde,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Hde => "hde",
            Task::Cde => "cde",
        }
    }
}

impl core::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "hde" => Ok(Task::Hde),
            "cde" => Ok(Task::Cde),
            other => Err(format!("unknown task `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub war: f64,
    pub uar: f64,
    pub f1: f64,
    pub wf1: f64,
    /// `mean_of_folds` (HDE) or `pooled_confusion` (CDE).
    pub rule: String,
}

/// HDE averages the per-fold metrics; CDE pools the confusion matrices first.
pub fn aggregate_folds(task: Task, folds: &[FoldReport]) -> Result<Aggregate, ProtocolError> {
    if folds.is_empty() {
        return Err(ProtocolError::Metrics(MetricsError::EmptyMatrix));
    }
    match task {
        Task::Hde => {
            let n = folds.len() as f64;
            Ok(Aggregate {
                war: folds.iter().map(|f| f.war).sum::<f64>() / n,
                uar: folds.iter().map(|f| f.uar).sum::<f64>() / n,
                f1: folds.iter().map(|f| f.f1).sum::<f64>() / n,
                wf1: folds.iter().map(|f| f.wf1).sum::<f64>() / n,
                rule: "mean_of_folds".into(),
            })
        }
        Task::Cde => {
            let matrices: Vec<ConfusionMatrix> = folds.iter().map(FoldReport::matrix).collect();
            let pooled = ConfusionMatrix::pooled(NUM_CLASSES, matrices.iter())?;
            let m = compute_metrics(&pooled)?;
            Ok(Aggregate {
                war: m.war,
                uar: m.uar,
                f1: m.f1,
                wf1: m.wf1,
                rule: "pooled_confusion".into(),
            })
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub occlusion: String,
    pub folds: Vec<FoldReport>,
    pub aggregate: Aggregate,
    pub config_fingerprint: String,
}

impl EvalReport {
    pub fn new(task: Task, occlusion: impl Into<String>, folds: Vec<FoldReport>, config_fingerprint: impl Into<String>) -> Result<Self, ProtocolError> {
        let aggregate = aggregate_folds(task, &folds)?;
        Ok(Self {
            task,
            occlusion: occlusion.into(),
            folds,
            aggregate,
            config_fingerprint: config_fingerprint.into(),
        })
    }
}

/// Mean attention weight of every region over `examples`.
pub fn mean_attention(model: &RrrnModel, examples: &[Example]) -> Result<[f64; REGIONS], ProtocolError> {
    let mut sums = [0.0; REGIONS];
    for ex in examples {
        let out = model.forward(&ex.stack)?;
        for (s, a) in sums.iter_mut().zip(out.alpha()) {
            *s += a;
        }
    }
    let n = examples.len().max(1) as f64;
    Ok(sums.map(|s| s / n))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{reference_manifest, ReferenceCorpus};

    #[test]
    fn reference_hde_split() {
        let casme2 = reference_manifest(ReferenceCorpus::Casme2);
        let samm = reference_manifest(ReferenceCorpus::Samm);
        let [a, b] = hde_folds(&casme2, &samm).unwrap();
        assert_eq!((a.train_ids.len(), a.test_ids.len()), (185, 68));
        assert_eq!(a.train_ids, b.test_ids);
        assert_eq!(a.test_ids, b.train_ids);
        let [c, d] = hde_folds(&samm, &casme2).unwrap();
        assert_eq!((c, d), (b, a));
    }

    #[test]
    fn reference_loso_has_47_folds() {
        let composite = reference_manifest(ReferenceCorpus::Composite);
        let folds = loso_folds(&composite).unwrap();
        assert_eq!(folds.len(), 47);
        let mut seen = BTreeSet::new();
        for f in &folds {
            assert!(subject_leakage(f, &composite.records).is_empty());
            assert!(f.train_ids.is_disjoint(&f.test_ids));
            assert_eq!(f.train_ids.len() + f.test_ids.len(), composite.len());
            for id in &f.test_ids {
                assert!(seen.insert(id.clone()));
            }
        }
        assert_eq!(seen.len(), composite.len());
    }

    #[test]
    fn config_keys_round_trip() {
        let mut cfg = RunConfig {
            epochs: 7,
            seed: 99,
            learning_rate: 0.25,
            ..RunConfig::default()
        };
        cfg.model.backbone.variant = BackboneVariant::Resnet18Style;
        cfg.model.backbone.stream_channels = 64;
        let mut back = RunConfig::default();
        for (k, v) in cfg.to_pairs() {
            assert!(back.set(k, &v).unwrap(), "{k}");
        }
        assert_eq!(back, cfg);
        assert_eq!(back.fingerprint(), cfg.fingerprint());
        assert_ne!(RunConfig::default().fingerprint(), cfg.fingerprint());
        assert!(!back.set("output_dir", "x").unwrap());
        assert!(back.set("epochs", "many").is_err());
    }

    #[test]
    fn defaults_follow_training_recipe() {
        let cfg = RunConfig::default();
        assert_eq!((cfg.epochs, cfg.batch_size, cfg.learning_rate), (50, 32, 0.0005));
        assert_eq!((cfg.optimizer.beta1, cfg.optimizer.beta2, cfg.optimizer.epsilon), (0.9, 0.999, 1e-8));
    }
}
