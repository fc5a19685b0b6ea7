//! Incremental training over a sequence of domains.
//!
//! Each step copies the previous student into a frozen teacher, then trains
//! on the current domain mixed with the exemplar memory. The loss is the
//! triplet loss on in-batch hard negatives plus a relaxed distillation term
//! whose kind depends on the [`Method`]. After the step the memory absorbs
//! the finished domain and every seen domain is evaluated.

mod adam;
mod batch;
pub mod checkpoint;

use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AugmentSpec, DomainDataset};
use crate::encoder::{DescriptorBatch, EncoderConfig, EncoderError, EncoderParams, TeacherSnapshot};
use crate::eval::{self, EvalError, RecallMatrix};
use crate::losses::{
    combined_loss, distill_loss, relaxation_weight, triplet_batch_loss, DistillKind, DistillSpec, LossError,
    LossResult, ScheduleSpec, TripletSpec,
};
use crate::memory::{MemoryBank, MemoryError};
use crate::seed;

pub use adam::{adam_step, learning_rate, AdamState, BETA1, BETA2, EPSILON};
pub use batch::{
    build_batch, epoch_plan, mine_hard_negative, mine_triplets, negative_mask, AnchorRef, Batch, TrainPool,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {field}: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error("no anchor with a positive pair is available")]
    NoUsableAnchors,
    #[error("non-finite gradient at epoch {epoch}, parameter {index}")]
    NonFiniteGradient { epoch: usize, index: usize },
    #[error("non-finite loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("gradient has {got} entries, parameters {expected}")]
    GradientLength { expected: usize, got: usize },
    #[error("protocol needs at least {needed} domains, got {got}")]
    InsufficientDomains { needed: usize, got: usize },
    #[error("domain {0} appears twice")]
    DuplicateDomain(u32),
    #[error("step index must start at 1")]
    InvalidStep,
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Memory(#[from] MemoryError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("checkpoint {path}: {reason}")]
    Checkpoint { path: std::path::PathBuf, reason: String },
}

impl TrainError {
    fn invalid(field: &'static str, reason: impl Into<String>) -> Self {
        Self::InvalidConfig {
            field,
            reason: reason.into(),
        }
    }
}

/// Training recipe. `Ft` and `Joint` are the lower and upper reference
/// points; the `Abl*` variants switch single ingredients of `InCloud`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Plain fine-tuning: no memory, no distillation.
    Ft,
    /// All domains in one step.
    Joint,
    #[default]
    #[serde(rename = "incloud")]
    InCloud,
    AblEuclid,
    AblPoint,
    AblNoMemory,
    AblNoRelax,
    /// Fine-tuning plus replay memory.
    AblMemoryOnly,
}

impl Method {
    pub fn distill_kind(self) -> DistillKind {
        match self {
            Method::InCloud | Method::AblNoMemory | Method::AblNoRelax => DistillKind::Angular,
            Method::AblEuclid => DistillKind::Euclidean,
            Method::AblPoint => DistillKind::Point,
            Method::Ft | Method::Joint | Method::AblMemoryOnly => DistillKind::None,
        }
    }

    pub fn uses_memory(self) -> bool {
        matches!(
            self,
            Method::InCloud | Method::AblEuclid | Method::AblPoint | Method::AblNoRelax | Method::AblMemoryOnly
        )
    }

    pub fn relaxed(self) -> bool {
        self != Method::AblNoRelax
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Epochs per step.
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_after_half: f64,
    pub weight_decay: f64,
    pub batch_anchors: usize,
    pub method: Method,
    pub triplet: TripletSpec,
    /// `kind` is overwritten by the method on [`TrainConfig::resolved`].
    pub distill: DistillSpec,
    /// Memory size in clouds; 0 disables replay.
    pub memory_capacity: usize,
    /// `None` disables augmentation.
    pub augment: Option<AugmentSpec>,
    /// Zero the optimizer moments at the start of every step.
    pub reset_optimizer: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            lr_initial: 1e-3,
            lr_after_half: 1e-4,
            weight_decay: 1e-3,
            batch_anchors: 16,
            method: Method::InCloud,
            triplet: TripletSpec::default(),
            distill: DistillSpec::default(),
            memory_capacity: 256,
            augment: Some(AugmentSpec::default()),
            reset_optimizer: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let positive = |v: f64| v.is_finite() && v > 0.0;
        let non_negative = |v: f64| v.is_finite() && v >= 0.0;
        if self.epochs == 0 {
            return Err(TrainError::invalid("epochs", "must be at least 1"));
        }
        if !positive(self.lr_initial) {
            return Err(TrainError::invalid("lr_initial", "must be > 0"));
        }
        if !positive(self.lr_after_half) {
            return Err(TrainError::invalid("lr_after_half", "must be > 0"));
        }
        if !non_negative(self.weight_decay) {
            return Err(TrainError::invalid("weight_decay", "must be >= 0"));
        }
        if self.batch_anchors < 2 {
            return Err(TrainError::invalid("batch_anchors", "must be at least 2"));
        }
        if !non_negative(self.triplet.margin) {
            return Err(TrainError::invalid("triplet.margin", "must be >= 0"));
        }
        if !non_negative(self.distill.margin) {
            return Err(TrainError::invalid("distill.margin", "must be >= 0"));
        }
        if !non_negative(self.distill.lambda_init) {
            return Err(TrainError::invalid("distill.lambda_init", "must be >= 0"));
        }
        if self.memory_capacity % 2 != 0 {
            return Err(TrainError::invalid("memory_capacity", "must be even"));
        }
        if let Some(a) = &self.augment {
            if !non_negative(a.max_yaw) {
                return Err(TrainError::invalid("augment.max_yaw", "must be >= 0"));
            }
            if !(0.0..=1.0).contains(&a.flip_probability) {
                return Err(TrainError::invalid("augment.flip_probability", "must lie in [0, 1]"));
            }
        }
        Ok(())
    }

    /// Copy with the distillation kind implied by the method.
    pub fn resolved(&self) -> Self {
        let mut c = self.clone();
        c.distill.kind = self.method.distill_kind();
        c
    }

    pub fn effective_memory(&self) -> usize {
        if self.method.uses_memory() {
            self.memory_capacity
        } else {
            0
        }
    }

    /// Distillation weight for `epoch` of step `step` (1-based).
    pub fn lambda_at(&self, step: usize, epoch: usize) -> f64 {
        if step < 2 || self.method.distill_kind() == DistillKind::None {
            return 0.0;
        }
        let mut spec = self.distill;
        spec.kind = self.method.distill_kind();
        if self.method.relaxed() {
            relaxation_weight(
                epoch as f64,
                &ScheduleSpec {
                    total_epochs: self.epochs,
                },
                &spec,
            )
        } else {
            spec.lambda_init
        }
    }
}

/// Everything that carries over between steps.
#[derive(Debug, Clone)]
pub struct StepState {
    pub student: EncoderParams,
    pub teacher: Option<TeacherSnapshot>,
    pub memory: MemoryBank,
    pub optimizer: AdamState,
    /// Steps completed so far.
    pub completed_steps: usize,
}

impl StepState {
    pub fn new(encoder: &EncoderConfig, config: &TrainConfig) -> Result<Self, TrainError> {
        let student = EncoderParams::init(encoder)?;
        let optimizer = AdamState::new(student.len());
        Ok(Self {
            student,
            teacher: None,
            memory: MemoryBank::new(config.effective_memory(), seed::derive(config.seed, "memory", &[]))?,
            optimizer,
            completed_steps: 0,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub lambda: f64,
    /// Batch means.
    pub triplet: f64,
    pub distill: f64,
    pub total: f64,
    pub batches: usize,
    pub memory_anchors: usize,
    pub active_triplets: usize,
    pub dropped_anchors: usize,
    pub skipped_tuples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub domains: Vec<String>,
    pub seconds: f64,
    pub recall_row: Vec<f64>,
    pub memory_counts: Vec<(u32, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedEcho {
    pub root: u64,
    pub encoder: u64,
    pub trainer: u64,
}

/// One JSON-lines record of the run log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Header {
        seeds: SeedEcho,
        config: serde_json::Value,
    },
    Epoch(EpochRecord),
    Step(StepRecord),
    Failure {
        step: usize,
        message: String,
    },
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunLog {
    pub records: Vec<LogRecord>,
}

impl RunLog {
    pub fn epochs(&self) -> impl Iterator<Item = &EpochRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e),
            _ => None,
        })
    }

    pub fn steps(&self) -> impl Iterator<Item = &StepRecord> {
        self.records.iter().filter_map(|r| match r {
            LogRecord::Step(s) => Some(s),
            _ => None,
        })
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
            .collect()
    }

    pub fn from_jsonl(text: &str) -> Result<Self, serde_json::Error> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { records })
    }
}

#[derive(Default)]
struct EpochSums {
    triplet: f64,
    distill: f64,
    total: f64,
    batches: usize,
    memory_anchors: usize,
    active: usize,
    dropped: usize,
    skipped: usize,
}

/// Trains one protocol step (1-based `step`) on the union of `domains`.
///
/// From step 2 on the student is first frozen into the teacher. When the
/// memory is enabled it absorbs every trained domain afterwards.
pub fn train_step(
    state: &mut StepState,
    domains: &[&DomainDataset],
    step: usize,
    config: &TrainConfig,
) -> Result<Vec<EpochRecord>, TrainError> {
    if step == 0 {
        return Err(TrainError::InvalidStep);
    }
    config.validate()?;
    let cfg = config.resolved();
    state.teacher = (step >= 2).then(|| state.student.snapshot());
    if cfg.reset_optimizer {
        state.optimizer.reset();
    }
    let pool = TrainPool::new(domains)?;
    let mut thresholds = pool.thresholds.clone();
    for d in state.memory.domains() {
        thresholds.entry(d.domain_id).or_insert(d.thresholds);
    }
    let memory = (cfg.effective_memory() > 0 && !state.memory.is_empty()).then_some(&state.memory);

    let mut records = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lambda = cfg.lambda_at(step, epoch);
        let lr = learning_rate(epoch, cfg.epochs, cfg.lr_initial, cfg.lr_after_half);
        let step_key = [step as u64, epoch as u64];
        let plan = epoch_plan(
            &pool,
            memory,
            cfg.batch_anchors,
            seed::derive(cfg.seed, "epoch-plan", &step_key),
        )?;
        let mut sums = EpochSums::default();
        for (b, refs) in plan.iter().enumerate() {
            let batch_seed = seed::derive(cfg.seed, "batch", &[step as u64, epoch as u64, b as u64]);
            let batch = build_batch(&pool, memory, refs, cfg.augment.as_ref(), batch_seed)?;
            sums.memory_anchors += batch.memory_anchors;
            let clouds = batch.cloud_refs();
            let (descriptors, cache) = state.student.forward_cached(&clouds)?;
            let mask = negative_mask(&batch, &thresholds);
            let (triplets, dropped) = mine_triplets(descriptors.view(), &mask);
            sums.dropped += dropped;
            if triplets.is_empty() {
                continue;
            }
            let student = DescriptorBatch::anonymous(descriptors);
            let triplet = triplet_batch_loss(&student, &triplets, &cfg.triplet)?;
            let distill = match &state.teacher {
                Some(teacher) if lambda > 0.0 && cfg.distill.kind != DistillKind::None => {
                    let target = DescriptorBatch::anonymous(teacher.forward(&clouds)?);
                    distill_loss(&student, &target, &triplets, &cfg.distill)?
                }
                _ => LossResult::zero(student.len(), student.dim()),
            };
            let total = combined_loss(&triplet, &distill, lambda);
            if !total.value.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch });
            }
            let grad = state.student.backward(&clouds, &cache, &total.grad)?;
            adam_step(
                state.student.flat_mut(),
                &mut state.optimizer,
                &grad,
                lr,
                cfg.weight_decay,
                epoch,
            )?;
            sums.triplet += triplet.value;
            sums.distill += distill.value;
            sums.total += total.value;
            sums.batches += 1;
            sums.active += triplet.terms;
            sums.skipped += distill.skipped;
        }
        if sums.dropped > 0 {
            log::debug!("step {step} epoch {epoch}: {} anchors without negatives", sums.dropped);
        }
        let n = sums.batches.max(1) as f64;
        records.push(EpochRecord {
            step,
            epoch,
            lr,
            lambda,
            triplet: sums.triplet / n,
            distill: sums.distill / n,
            total: sums.total / n,
            batches: sums.batches,
            memory_anchors: sums.memory_anchors,
            active_triplets: sums.active,
            dropped_anchors: sums.dropped,
            skipped_tuples: sums.skipped,
        });
    }
    if cfg.effective_memory() > 0 {
        for d in domains {
            state.memory.update(d)?;
        }
    }
    state.completed_steps = step;
    Ok(records)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Protocol {
    /// First domain, then all remaining domains at once.
    TwoStep,
    /// One step per domain.
    FourStep,
}

/// Domain indices trained at each step. `Joint` always trains everything in
/// one step.
pub fn step_groups(domains: usize, protocol: Protocol, method: Method) -> Result<Vec<Vec<usize>>, TrainError> {
    if method == Method::Joint {
        if domains == 0 {
            return Err(TrainError::InsufficientDomains { needed: 1, got: 0 });
        }
        return Ok(vec![(0..domains).collect()]);
    }
    if domains < 2 {
        return Err(TrainError::InsufficientDomains {
            needed: 2,
            got: domains,
        });
    }
    Ok(match protocol {
        Protocol::TwoStep => vec![vec![0], (1..domains).collect()],
        Protocol::FourStep => (0..domains).map(|d| vec![d]).collect(),
    })
}

fn group_label(domains: &[DomainDataset], group: &[usize]) -> String {
    group.iter().map(|&d| domains[d].name.as_str()).collect::<Vec<_>>().join("+")
}

/// A finished step handed to checkpoint writers.
pub struct StepView<'a> {
    pub step: usize,
    pub groups: &'a [Vec<usize>],
    pub state: &'a StepState,
    pub matrix: &'a RecallMatrix,
    pub log: &'a RunLog,
}

#[derive(Debug, Clone)]
pub struct ProtocolOutcome {
    pub state: StepState,
    pub matrix: RecallMatrix,
    pub groups: Vec<Vec<usize>>,
}

/// Where an interrupted run picks up.
#[derive(Debug, Clone)]
pub struct Resume {
    pub state: StepState,
    pub matrix: RecallMatrix,
}

/// Runs every step of `protocol`, evaluating all seen step groups after
/// each one. Epoch and step records are appended to `log` as they finish,
/// so the caller still holds a usable log when an error is returned.
pub fn run_protocol(
    domains: &[DomainDataset],
    encoder: &EncoderConfig,
    config: &TrainConfig,
    protocol: Protocol,
    log: &mut RunLog,
) -> Result<ProtocolOutcome, TrainError> {
    run_protocol_with(domains, encoder, config, protocol, None, log, &mut |_| Ok(()))
}

pub fn run_protocol_with(
    domains: &[DomainDataset],
    encoder: &EncoderConfig,
    config: &TrainConfig,
    protocol: Protocol,
    resume: Option<Resume>,
    log: &mut RunLog,
    on_step: &mut dyn FnMut(&StepView<'_>) -> Result<(), TrainError>,
) -> Result<ProtocolOutcome, TrainError> {
    config.validate()?;
    let groups = step_groups(domains.len(), protocol, config.method)?;
    let labels: Vec<String> = groups.iter().map(|g| group_label(domains, g)).collect();
    let (mut state, mut matrix) = match resume {
        Some(r) => (r.state, r.matrix),
        None => (StepState::new(encoder, config)?, RecallMatrix::new(labels.clone())),
    };
    if matrix.labels != labels || matrix.steps() != state.completed_steps {
        return Err(TrainError::Checkpoint {
            path: Default::default(),
            reason: "resume point does not match this protocol".into(),
        });
    }
    for (k, group) in groups.iter().enumerate().skip(state.completed_steps) {
        let step = k + 1;
        let started = Instant::now();
        let trained: Vec<&DomainDataset> = group.iter().map(|&d| &domains[d]).collect();
        let records = match train_step(&mut state, &trained, step, config) {
            Ok(r) => r,
            Err(e) => {
                log.records.push(LogRecord::Failure {
                    step,
                    message: e.to_string(),
                });
                return Err(e);
            }
        };
        log.records.extend(records.into_iter().map(LogRecord::Epoch));
        let seen: Vec<Vec<&DomainDataset>> = groups[..=k]
            .iter()
            .map(|g| g.iter().map(|&d| &domains[d]).collect())
            .collect();
        let row: Vec<f64> = eval::evaluate_groups(&state.student, &seen, &[1])?
            .into_iter()
            .map(|c| c[&1])
            .collect();
        log::info!("step {step} ({}): recall@1 {:?}", labels[k], row);
        matrix.push_row(row.clone())?;
        log.records.push(LogRecord::Step(StepRecord {
            step,
            domains: trained.iter().map(|d| d.name.clone()).collect(),
            seconds: started.elapsed().as_secs_f64(),
            recall_row: row,
            memory_counts: state.memory.counts(),
        }));
        on_step(&StepView {
            step,
            groups: &groups,
            state: &state,
            matrix: &matrix,
            log,
        })?;
    }
    Ok(ProtocolOutcome { state, matrix, groups })
}

/// Offline training on every domain in a single step: no teacher, memory
/// or distillation.
pub fn joint_train(
    domains: &[DomainDataset],
    encoder: &EncoderConfig,
    config: &TrainConfig,
    log: &mut RunLog,
) -> Result<StepState, TrainError> {
    if domains.is_empty() {
        return Err(TrainError::InsufficientDomains { needed: 1, got: 0 });
    }
    let cfg = TrainConfig {
        method: Method::Joint,
        ..config.clone()
    };
    let mut state = StepState::new(encoder, &cfg)?;
    let all: Vec<&DomainDataset> = domains.iter().collect();
    let records = train_step(&mut state, &all, 1, &cfg)?;
    log.records.extend(records.into_iter().map(LogRecord::Epoch));
    Ok(state)
}
