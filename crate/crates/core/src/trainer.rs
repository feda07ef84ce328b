//! The per-sequence training procedure and the curriculum driver.
//!
//! For every sequence after the first, the current model's raw logits on the
//! new training examples are stored as recall labels *before* the network
//! grows. The targets for the new sequence are then `concat(recall, one_hot)`
//! in global category order, the network is expanded by the new categories,
//! and all heads are trained on the combined loss of the selected mode.
//!
//! Training data is only ever reached through a [`SequenceLoader`] holding a
//! single sequence's examples. The loader logs every example id it hands
//! out, which lets [`run_curriculum`] audit that no past data is replayed.

use std::cell::RefCell;
use std::collections::{BTreeSet, HashMap, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Example, FeatureDataset, SequenceManifest};
use crate::error::{Error, Result};
use crate::losses::{combined_loss, compute_category_stats, CategoryStats, ExampleTarget, LossBreakdown, LossMode};
use crate::math::{ActivationSpec, DenseMatrix};
use crate::metrics::{self, MetricsReport};
use crate::model::{ArchMode, HeadShape, ModelGrads, MultiHeadModel};
use crate::parallel;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// SGD or bias-corrected Adam over the model's flat parameter slices.
#[derive(Debug, Clone)]
pub struct Optimizer {
    config: OptimizerConfig,
    step: u64,
    first_moment: Vec<Vec<f64>>,
    second_moment: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            step: 0,
            first_moment: Vec::new(),
            second_moment: Vec::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Drops all moment history and the step counter.
    pub fn reset(&mut self) {
        self.step = 0;
        self.first_moment.clear();
        self.second_moment.clear();
    }

    /// Grows the moment buffers after the model gained parameters. New
    /// entries start at zero; existing ones keep their history.
    fn fit(&mut self, lens: &[usize]) {
        for moments in [&mut self.first_moment, &mut self.second_moment] {
            moments.resize_with(lens.len(), Vec::new);
            for (m, &n) in moments.iter_mut().zip(lens) {
                m.resize(n, 0.0);
            }
        }
    }

    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>) -> Result<()> {
        if params.len() != grads.len() || params.iter().zip(&grads).any(|(p, g)| p.len() != g.len()) {
            return Err(Error::shape("parameter and gradient layouts differ"));
        }
        let lr = self.config.learning_rate;
        match self.config.kind {
            OptimizerKind::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (pi, gi) in p.iter_mut().zip(g) {
                        *pi -= lr * gi;
                    }
                }
                self.step += 1;
            }
            OptimizerKind::Adam => {
                let lens: Vec<usize> = params.iter().map(|p| p.len()).collect();
                self.fit(&lens);
                self.step += 1;
                let (b1, b2, eps) = (self.config.beta1, self.config.beta2, self.config.epsilon);
                let c1 = 1.0 - b1.powi(self.step as i32);
                let c2 = 1.0 - b2.powi(self.step as i32);
                for (((p, g), m), v) in params
                    .into_iter()
                    .zip(grads)
                    .zip(&mut self.first_moment)
                    .zip(&mut self.second_moment)
                {
                    for i in 0..p.len() {
                        m[i] = b1 * m[i] + (1.0 - b1) * g[i];
                        v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        p[i] -= lr * m_hat / (v_hat.sqrt() + eps);
                    }
                }
            }
        }
        Ok(())
    }
}

/// Everything that controls a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub mode: LossMode,
    pub epochs_per_sequence: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Reset Adam moments when a new sequence starts.
    pub reset_optimizer_each_sequence: bool,
    pub shuffle_seed: u64,
    pub init_seed: u64,
    pub arch_mode: ArchMode,
    pub activation: ActivationSpec,
    pub hidden_width: usize,
    pub hidden_layers: usize,
    pub variance_floor: f64,
    /// Examples per gradient shard. Shards are reduced in a fixed order, so
    /// results do not depend on the thread count.
    pub shard_size: usize,
    /// Permits a zero learning rate for diagnostic runs.
    pub zero_lr_diagnostic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: LossMode::Recall,
            epochs_per_sequence: 50,
            batch_size: 64,
            optimizer: OptimizerConfig::default(),
            reset_optimizer_each_sequence: true,
            shuffle_seed: 0,
            init_seed: 0,
            arch_mode: ArchMode::PerSequenceHead,
            activation: ActivationSpec::default(),
            hidden_width: HeadShape::default().hidden_width,
            hidden_layers: HeadShape::default().hidden_layers,
            variance_floor: CategoryStats::DEFAULT_FLOOR,
            shard_size: 16,
            zero_lr_diagnostic: false,
        }
    }
}

impl TrainConfig {
    /// Settings used for the desk-scale synthetic benchmark.
    pub fn benchmark() -> Self {
        Self {
            epochs_per_sequence: 20,
            hidden_width: 64,
            optimizer: OptimizerConfig {
                learning_rate: 1e-2,
                ..OptimizerConfig::default()
            },
            ..Self::default()
        }
    }

    /// Sets both seeds from one run seed.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.shuffle_seed = rng::derive_seed(seed, &[0x5_4FF1E]);
        self.init_seed = rng::derive_seed(seed, &[0x1_417]);
        self
    }

    pub fn head_shape(&self) -> HeadShape {
        HeadShape {
            hidden_width: self.hidden_width,
            hidden_layers: self.hidden_layers,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lr = self.optimizer.learning_rate;
        if !lr.is_finite() || lr < 0.0 || (lr == 0.0 && !self.zero_lr_diagnostic) {
            return Err(Error::validation(format!(
                "learning rate must be positive (got {lr}); zero needs the diagnostic flag"
            )));
        }
        if self.batch_size == 0 || self.shard_size == 0 {
            return Err(Error::validation("batch and shard sizes must be positive"));
        }
        let o = &self.optimizer;
        if o.kind == OptimizerKind::Adam
            && (!(0.0..1.0).contains(&o.beta1) || !(0.0..1.0).contains(&o.beta2) || !(o.epsilon > 0.0))
        {
            return Err(Error::validation("Adam needs beta1, beta2 in [0, 1) and epsilon > 0"));
        }
        if !(self.variance_floor > 0.0) {
            return Err(Error::validation("variance floor must be positive"));
        }
        self.activation.validate()?;
        if self.hidden_layers > 3 {
            return Err(Error::validation("hidden layer count must be in 0..=3"));
        }
        Ok(())
    }

    pub fn new_model(&self, feature_dim: usize) -> Result<MultiHeadModel> {
        MultiHeadModel::new(feature_dim, self.head_shape(), self.activation, self.arch_mode)
    }
}

/// Category sets of one sequence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SequenceState {
    pub index: usize,
    /// Categories introduced by this sequence, in logit order.
    pub current: Vec<u32>,
    /// Categories of all earlier sequences, in logit order.
    pub previous: Vec<u32>,
}

impl SequenceState {
    pub fn new(index: usize, current: Vec<u32>, previous: Vec<u32>) -> Result<Self> {
        if index == 0 && !previous.is_empty() {
            return Err(Error::validation("sequence 0 cannot have previous categories"));
        }
        if current.is_empty() {
            return Err(Error::validation(format!("sequence {index} has no categories")));
        }
        let prev: HashSet<_> = previous.iter().collect();
        if let Some(c) = current.iter().find(|c| prev.contains(c)) {
            return Err(Error::validation(format!("category {c} is both current and previous")));
        }
        Ok(Self {
            index,
            current,
            previous,
        })
    }

    /// Every category known after this sequence, in logit order.
    pub fn all(&self) -> Vec<u32> {
        let mut v = self.previous.clone();
        v.extend_from_slice(&self.current);
        v
    }
}

/// One training example with its recall label and concatenated target.
#[derive(Debug, Clone, PartialEq)]
pub struct RecallLabeledExample {
    pub example_id: u64,
    pub features: Vec<f64>,
    /// One-hot over the current sequence's categories.
    pub one_hot: Vec<f64>,
    /// Raw logits of the previous model; empty at sequence 0.
    pub recall: Vec<f64>,
}

impl RecallLabeledExample {
    pub fn target(&self) -> Vec<f64> {
        let mut t = self.recall.clone();
        t.extend_from_slice(&self.one_hot);
        t
    }
}

/// Read access to one sequence's training examples, with an access log.
pub struct SequenceLoader<'a> {
    examples: &'a [Example],
    feature_dim: usize,
    log: RefCell<Vec<u64>>,
}

impl<'a> SequenceLoader<'a> {
    pub fn new(dataset: &'a FeatureDataset) -> Self {
        Self {
            examples: dataset.examples(),
            feature_dim: dataset.feature_dim(),
            log: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// Category labels, which carry no feature data and are not logged.
    pub fn category(&self, index: usize) -> u32 {
        self.examples[index].category_id
    }

    /// Features of the selected examples as an `f64` matrix; logs each id.
    pub fn gather(&self, indices: &[usize]) -> DenseMatrix {
        let mut log = self.log.borrow_mut();
        let mut data = Vec::with_capacity(indices.len() * self.feature_dim);
        for &i in indices {
            let e = &self.examples[i];
            log.push(e.example_id);
            data.extend(e.features.iter().map(|&v| v as f64));
        }
        DenseMatrix::new(indices.len(), self.feature_dim, data).expect("finite features")
    }

    /// Distinct example ids handed out so far.
    pub fn accessed_ids(&self) -> BTreeSet<u64> {
        self.log.borrow().iter().copied().collect()
    }

    pub fn access_count(&self) -> usize {
        self.log.borrow().len()
    }
}

/// Raw logits of `model` for every example behind `loader`.
///
/// Must be called on the model that finished the previous sequence, before
/// it is expanded.
pub fn compute_recall_labels(
    model: &MultiHeadModel,
    sequence: usize,
    loader: &SequenceLoader<'_>,
    shard_size: usize,
) -> Result<DenseMatrix> {
    if sequence == 0 {
        return Err(Error::contract("recall labels do not exist for sequence 0"));
    }
    if model.num_categories() == 0 {
        return Err(Error::contract("recall labels need a trained model"));
    }
    let all: Vec<usize> = (0..loader.len()).collect();
    let features = loader.gather(&all);
    batched_logits(model, &features, shard_size)
}

/// Forward pass over a large matrix, sharded across workers.
pub(crate) fn batched_logits(model: &MultiHeadModel, features: &DenseMatrix, shard_size: usize) -> Result<DenseMatrix> {
    let parts = parallel::map_shards(features.rows(), shard_size.max(1) * 4, |r| {
        let rows = row_block(features, r.start, r.len());
        model.forward(&rows).map(|p| p.logits)
    });
    let mut out = DenseMatrix::zeros(0, model.num_categories());
    for p in parts {
        out.append_rows(&p?)?;
    }
    Ok(out)
}

fn row_block(m: &DenseMatrix, start: usize, len: usize) -> DenseMatrix {
    let c = m.cols();
    DenseMatrix::new(len, c, m.data()[start * c..(start + len) * c].to_vec()).expect("finite block")
}

/// `concat(recall, one_hot)` per example, in global category order.
pub fn concatenate_targets(recall: &DenseMatrix, one_hot: &DenseMatrix) -> Result<DenseMatrix> {
    if recall.rows() != one_hot.rows() {
        return Err(Error::contract(format!(
            "{} recall labels for {} examples",
            recall.rows(),
            one_hot.rows()
        )));
    }
    let width = recall.cols() + one_hot.cols();
    let mut out = DenseMatrix::zeros(recall.rows(), width);
    for i in 0..recall.rows() {
        let row = out.row_mut(i);
        row[..recall.cols()].copy_from_slice(recall.row(i));
        row[recall.cols()..].copy_from_slice(one_hot.row(i));
    }
    Ok(out)
}

/// Result of training one sequence.
#[derive(Debug, Clone)]
pub struct SequenceOutcome {
    /// Mean loss over the sequence's examples, per epoch.
    pub loss_trace: Vec<LossBreakdown>,
    pub stats: Option<CategoryStats>,
    /// Recall labels (`examples × old categories`); empty at sequence 0 and
    /// for the naive baseline.
    pub recall_labels: DenseMatrix,
    /// Concatenated targets (`examples × all categories`) used for training.
    pub targets: DenseMatrix,
    /// Position of each example's category among all logits.
    pub class_positions: Vec<usize>,
}

impl SequenceOutcome {
    pub fn labeled_example(&self, loader: &SequenceLoader<'_>, index: usize) -> RecallLabeledExample {
        let n_old = self.recall_labels.cols();
        let features = loader.gather(&[index]).into_data();
        RecallLabeledExample {
            example_id: loader.examples[index].example_id,
            features,
            one_hot: self.targets.row(index)[n_old..].to_vec(),
            recall: self.recall_labels.row(index).to_vec(),
        }
    }
}

/// Trains one sequence in place.
///
/// Steps, in order: validate the data, compute recall labels on the current
/// model (sequence > 0), build concatenated targets, expand the network by
/// the sequence's categories, then run minibatch training over all heads.
pub fn train_sequence(
    model: &mut MultiHeadModel,
    state: &SequenceState,
    loader: &SequenceLoader<'_>,
    config: &TrainConfig,
    optimizer: &mut Optimizer,
) -> Result<SequenceOutcome> {
    config.validate()?;
    if loader.feature_dim() != model.feature_dim() {
        return Err(Error::shape("dataset and model feature dimensions differ"));
    }
    if loader.is_empty() {
        return Err(Error::validation(format!(
            "sequence {} has no training examples",
            state.index
        )));
    }
    let current: HashMap<u32, usize> = state.current.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    for i in 0..loader.len() {
        let c = loader.category(i);
        if !current.contains_key(&c) {
            return Err(Error::validation(format!(
                "sequence {} training data contains category {c}, which belongs to another sequence",
                state.index
            )));
        }
    }
    if model.category_order() != state.previous {
        return Err(Error::contract(format!(
            "model covers {:?} but sequence {} expects previous categories {:?}",
            model.category_order(),
            state.index,
            state.previous
        )));
    }

    let n = loader.len();
    let n_old = state.previous.len();
    let s = state.index;

    let recall_labels = if s > 0 && config.mode.uses_recall_labels() {
        compute_recall_labels(model, s, loader, config.shard_size)?
    } else {
        DenseMatrix::zeros(n, 0)
    };
    if recall_labels.rows() != n {
        return Err(Error::contract("recall label count does not match the sequence"));
    }
    let stats = if s > 0 && config.mode.uses_variance() {
        Some(compute_category_stats(&recall_labels, config.variance_floor)?)
    } else {
        None
    };

    let mut one_hot = DenseMatrix::zeros(n, state.current.len());
    let mut class_positions = Vec::with_capacity(n);
    for i in 0..n {
        let k = current[&loader.category(i)];
        one_hot.set(i, k, 1.0);
        class_positions.push(n_old + k);
    }
    // The naive baseline sees zeros for old categories.
    let old_part = if config.mode.uses_recall_labels() {
        recall_labels.clone()
    } else {
        DenseMatrix::zeros(n, n_old)
    };
    let targets = concatenate_targets(&old_part, &one_hot)?;

    model.expand(&state.current, rng::derive_seed(config.init_seed, &[s as u64]))?;
    if config.reset_optimizer_each_sequence {
        optimizer.reset();
    }

    let mut order: Vec<usize> = (0..n).collect();
    let mut per_example = vec![LossBreakdown::default(); n];
    let mut loss_trace = Vec::with_capacity(config.epochs_per_sequence);
    let recall_width = if config.mode.uses_recall_labels() { n_old } else { 0 };

    for epoch in 0..config.epochs_per_sequence {
        order.shuffle(&mut rng::substream(config.shuffle_seed, &[s as u64, epoch as u64]));
        for batch in order.chunks(config.batch_size) {
            let features = loader.gather(batch);
            let (grads, losses) = batch_gradient(
                model,
                config,
                s,
                n_old,
                &features,
                batch,
                &targets,
                &class_positions,
                recall_width,
                stats.as_ref(),
            )?;
            for (&i, l) in batch.iter().zip(losses) {
                per_example[i] = l;
            }
            optimizer.step(model.parameter_slices_mut(), grads.slices())?;
        }
        let mut sum = LossBreakdown::default();
        for l in &per_example {
            sum.add(l);
        }
        loss_trace.push(sum.scaled(1.0 / n as f64));
    }

    Ok(SequenceOutcome {
        loss_trace,
        stats,
        recall_labels,
        targets,
        class_positions,
    })
}

/// Mean gradient over a batch plus each example's loss breakdown.
#[allow(clippy::too_many_arguments)]
fn batch_gradient(
    model: &MultiHeadModel,
    config: &TrainConfig,
    sequence: usize,
    n_old: usize,
    features: &DenseMatrix,
    batch: &[usize],
    targets: &DenseMatrix,
    class_positions: &[usize],
    recall_width: usize,
    stats: Option<&CategoryStats>,
) -> Result<(ModelGrads, Vec<LossBreakdown>)> {
    let reduced = parallel::map_reduce(
        batch.len(),
        config.shard_size,
        |r| -> Result<(ModelGrads, Vec<LossBreakdown>)> {
            let x = row_block(features, r.start, r.len());
            let pass = model.forward(&x)?;
            let mut d_logits = DenseMatrix::zeros(r.len(), pass.logits.cols());
            let mut losses = Vec::with_capacity(r.len());
            for (row, &i) in batch[r].iter().enumerate() {
                let target = ExampleTarget {
                    class_index: class_positions[i],
                    recall: &targets.row(i)[..recall_width],
                };
                let (b, g) = combined_loss(config.mode, sequence, pass.logits.row(row), n_old, &target, stats)?;
                d_logits.row_mut(row).copy_from_slice(&g);
                losses.push(b);
            }
            Ok((model.backward(&pass, &d_logits)?, losses))
        },
        |a, b| {
            let (mut ga, mut la) = a?;
            let (gb, lb) = b?;
            ga.add_assign(&gb);
            la.extend(lb);
            Ok((ga, la))
        },
    )
    .ok_or_else(|| Error::contract("empty batch"))??;
    let (mut grads, losses) = reduced;
    grads.scale(1.0 / batch.len() as f64);
    Ok((grads, losses))
}

/// Per-sequence record of which training examples were read.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessAudit {
    pub sequence: usize,
    pub distinct_examples_read: usize,
    pub total_reads: usize,
    /// Example ids read during this sequence that do not belong to it.
    pub violations: Vec<u64>,
}

/// Output of a full curriculum run.
#[derive(Debug, Clone)]
pub struct CurriculumResult {
    pub model: MultiHeadModel,
    pub report: MetricsReport,
    pub audits: Vec<AccessAudit>,
    pub loss_traces: Vec<Vec<LossBreakdown>>,
}

/// Trains every sequence of `manifest` in order and evaluates after each.
///
/// `on_sequence_end` runs after sequence `s` has been trained and
/// evaluated, e.g. to write a checkpoint.
pub fn run_curriculum(
    manifest: &SequenceManifest,
    train: &FeatureDataset,
    val: &FeatureDataset,
    config: &TrainConfig,
    mut on_sequence_end: impl FnMut(usize, &MultiHeadModel) -> Result<()>,
) -> Result<CurriculumResult> {
    config.validate()?;
    manifest.validate()?;
    manifest.check_covers(train, "training")?;
    manifest.check_covers(val, "validation")?;
    if train.feature_dim() != val.feature_dim() {
        return Err(Error::validation("training and validation feature dimensions differ"));
    }
    let category_of: HashMap<u64, u32> = train.examples().iter().map(|e| (e.example_id, e.category_id)).collect();

    let mut model = config.new_model(train.feature_dim())?;
    let mut optimizer = Optimizer::new(config.optimizer);
    let mut report = MetricsReport::new(config.clone(), manifest.sequences.clone());
    let mut audits = Vec::new();
    let mut loss_traces = Vec::new();
    let mut previous: Vec<u32> = Vec::new();
    let mut seen: BTreeSet<u32> = BTreeSet::new();

    for (s, cats) in manifest.sequences.iter().enumerate() {
        let state = SequenceState::new(s, cats.clone(), previous.clone())?;
        let current: BTreeSet<u32> = cats.iter().copied().collect();
        let train_s = train.restrict_to(&current);
        let loader = SequenceLoader::new(&train_s);
        let outcome = train_sequence(&mut model, &state, &loader, config, &mut optimizer)?;

        let violations: Vec<u64> = loader
            .accessed_ids()
            .into_iter()
            .filter(|id| category_of.get(id).is_none_or(|c| !current.contains(c)))
            .collect();
        audits.push(AccessAudit {
            sequence: s,
            distinct_examples_read: loader.accessed_ids().len(),
            total_reads: loader.access_count(),
            violations,
        });
        loss_traces.push(outcome.loss_trace);
        // recall labels and targets are released here, with the outcome

        seen.extend(cats.iter().copied());
        let val_s = val.restrict_to(&seen);
        let eval = metrics::evaluate(&model, &val_s, manifest, s, config.shard_size)?;
        let variance = metrics::logit_variance(&model, &val_s, config.shard_size)?;
        report.push_sequence(eval, variance)?;
        on_sequence_end(s, &model)?;
        previous = model.category_order();
    }
    report.check_consistency()?;
    Ok(CurriculumResult {
        model,
        report,
        audits,
        loss_traces,
    })
}
