//! Training loops and structure search.
//!
//! Search runs in two phases: first the relaxed supernet is trained so
//! that every layer's blend weights learn how much each op helps, then
//! the top-K (layer, op) pairs are frozen into a fixed assignment and a
//! fresh model is retrained from scratch. A random-search baseline over
//! either the original op-chain space or the reduced canonical space is
//! provided for comparison.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSchema, Task, TaskSplit};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModulationPlan};
use crate::modulation::{
    select_topk, CanonicalForm, ModulationAssignment, SupernetAlphas,
};
use crate::numerics::{BinaryOpKind, Graph, Tensor};

/// Optimizer choice.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

/// Hyperparameters for one training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Tasks per gradient step.
    pub batch_size: usize,
    pub lr: f64,
    /// Learning rate for supernet blend weights, which are always updated
    /// by plain SGD. Adaptive optimizers rescale the near-zero gradients
    /// of unused ops into full-size steps, turning the blend weights into
    /// a random walk; unnormalized steps keep them proportional to how
    /// much each op actually moves the loss.
    #[serde(default = "default_alpha_lr")]
    pub alpha_lr: f64,
    /// L1 pressure on the blend weights: each step subtracts
    /// `alpha_lr * alpha_penalty` from every blend weight before the
    /// projection onto [0, 1]. Ops whose removal hurts the loss resist
    /// the pull; free riders slide toward zero, which sharpens the
    /// top-K ranking.
    #[serde(default)]
    pub alpha_penalty: f64,
    pub optimizer: OptimizerKind,
    /// Stop after this many epochs without the validation loss improving
    /// by at least `min_delta`.
    pub patience: usize,
    pub min_delta: f64,
    pub rng_seed: u64,
}

fn default_alpha_lr() -> f64 {
    0.05
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 32,
            lr: 1e-2,
            alpha_lr: default_alpha_lr(),
            alpha_penalty: 0.0,
            optimizer: OptimizerKind::Adam,
            patience: 5,
            min_delta: 1e-4,
            rng_seed: 0,
        }
    }
}

/// Loss trajectory and outcome of a training run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub best_val_loss: f64,
    pub train_losses: Vec<f64>,
    pub val_losses: Vec<f64>,
    pub stopped_early: bool,
}

/// One line of the epoch log, serialized as line-delimited JSON.
#[derive(Debug, Serialize)]
struct EpochRecord<'a> {
    epoch: usize,
    train_loss: f64,
    val_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    alphas: Option<&'a Vec<[f64; 4]>>,
}

struct Adam {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    alpha_lr: f64,
    alpha_penalty: f64,
    adam: Option<Adam>,
}

impl Optimizer {
    fn new(kind: OptimizerKind, lr: f64, alpha_lr: f64, alpha_penalty: f64, model: &Model) -> Self {
        let adam = (kind == OptimizerKind::Adam).then(|| Adam {
            m: model
                .params
                .entries
                .iter()
                .map(|p| vec![0.0; p.value.len()])
                .collect(),
            v: model
                .params
                .entries
                .iter()
                .map(|p| vec![0.0; p.value.len()])
                .collect(),
            t: 0,
        });
        Optimizer {
            kind,
            lr,
            alpha_lr,
            alpha_penalty,
            adam,
        }
    }

    /// Apply one update from `grads` (aligned with the param store) to
    /// every parameter whose name passes `mask`.
    fn step(
        &mut self,
        model: &mut Model,
        grads: &[Option<Tensor>],
        mask: &dyn Fn(&str) -> bool,
    ) {
        if let Some(adam) = &mut self.adam {
            adam.t += 1;
        }
        for (i, entry) in model.params.entries.iter_mut().enumerate() {
            let Some(grad) = &grads[i] else { continue };
            if !mask(&entry.name) {
                continue;
            }
            // Blend weights bypass the adaptive optimizer; see
            // `TrainConfig::alpha_lr`.
            if entry.name.starts_with("alpha_") {
                for (w, &g) in entry.value.data_mut().iter_mut().zip(grad.data()) {
                    *w -= self.alpha_lr * (g + self.alpha_penalty);
                }
                continue;
            }
            match self.kind {
                OptimizerKind::Sgd => {
                    for (w, &g) in entry.value.data_mut().iter_mut().zip(grad.data()) {
                        *w -= self.lr * g;
                    }
                }
                OptimizerKind::Adam => {
                    let adam = self.adam.as_mut().expect("adam state");
                    let bias1 = 1.0 - ADAM_BETA1.powi(adam.t as i32);
                    let bias2 = 1.0 - ADAM_BETA2.powi(adam.t as i32);
                    for ((w, &g), (m, v)) in entry
                        .value
                        .data_mut()
                        .iter_mut()
                        .zip(grad.data())
                        .zip(adam.m[i].iter_mut().zip(adam.v[i].iter_mut()))
                    {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = *m / bias1;
                        let v_hat = *v / bias2;
                        *w -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        // Supernet blend weights live on [0, 1]: project after the step.
        if model.plan == ModulationPlan::Supernet {
            for l in 0..model.num_layers() {
                let name = format!("alpha_{l}");
                if mask(&name) {
                    for a in model.params.get_mut(&name).data_mut() {
                        *a = a.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
}

/// One gradient step on a batch of tasks; returns the batch loss.
fn batch_step(
    model: &mut Model,
    batch: &[Task],
    opt: &mut Optimizer,
    mask: &dyn Fn(&str) -> bool,
) -> Result<f64> {
    let mut g = Graph::new();
    let binding = model.bind(&mut g);
    let loss = model.batch_loss(&mut g, &binding, batch)?;
    let loss_value = g.value(loss).item();
    if !loss_value.is_finite() {
        return Err(Error::Divergence(format!(
            "training loss became {loss_value}"
        )));
    }
    g.backward(loss)?;
    let grads: Vec<Option<Tensor>> = binding
        .ids()
        .iter()
        .map(|&id| g.grad(id).cloned())
        .collect();
    opt.step(model, &grads, mask);
    Ok(loss_value)
}

/// Mean per-task query loss without building gradients.
pub fn mean_task_loss(model: &Model, tasks: &[Task]) -> Result<f64> {
    if tasks.is_empty() {
        return Err(Error::Precondition("no tasks to evaluate".into()));
    }
    let mut total = 0.0;
    // One graph per chunk keeps the arena small.
    for chunk in tasks.chunks(16) {
        let mut g = Graph::new();
        let b = model.bind(&mut g);
        for t in chunk {
            let loss = model.task_loss(&mut g, &b, t)?;
            total += g.value(loss).item();
        }
    }
    let mean = total / tasks.len() as f64;
    if !mean.is_finite() {
        return Err(Error::Divergence(format!("evaluation loss is {mean}")));
    }
    Ok(mean)
}

/// Train every parameter on the training tasks (single-level). Keeps the
/// best-validation parameters and restores them before returning. Epoch
/// metrics are streamed to `log` as one JSON object per line.
pub fn train(
    model: &mut Model,
    train_tasks: &[Task],
    val_tasks: &[Task],
    cfg: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    train_inner(model, train_tasks, val_tasks, cfg, log, false, true)
}

/// Bilevel supernet training: model weights step on training batches
/// while the blend weights step on validation batches, approximating the
/// nested optimization with alternating updates.
pub fn train_bilevel(
    model: &mut Model,
    train_tasks: &[Task],
    val_tasks: &[Task],
    cfg: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    if model.plan != ModulationPlan::Supernet {
        return Err(Error::Precondition(
            "bilevel training needs a supernet model".into(),
        ));
    }
    train_inner(model, train_tasks, val_tasks, cfg, log, true, true)
}

/// One-shot supernet training for structure search. Unlike [`train`],
/// the parameters reached at the end of the schedule are kept: the blend
/// weights separate late in training, and restoring an early
/// best-validation snapshot would discard exactly the signal that
/// [`select_topk`](crate::modulation::select_topk) ranks on.
pub fn train_supernet(
    model: &mut Model,
    train_tasks: &[Task],
    val_tasks: &[Task],
    cfg: &TrainConfig,
    log: Option<&mut dyn Write>,
    bilevel: bool,
) -> Result<TrainReport> {
    if model.plan != ModulationPlan::Supernet {
        return Err(Error::Precondition(
            "supernet training needs a supernet model".into(),
        ));
    }
    train_inner(model, train_tasks, val_tasks, cfg, log, bilevel, false)
}

fn train_inner(
    model: &mut Model,
    train_tasks: &[Task],
    val_tasks: &[Task],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
    bilevel: bool,
    restore_best: bool,
) -> Result<TrainReport> {
    if cfg.epochs == 0 || cfg.batch_size == 0 {
        return Err(Error::Precondition(
            "epochs and batch_size must be positive".into(),
        ));
    }
    if train_tasks.is_empty() || val_tasks.is_empty() {
        return Err(Error::Precondition(
            "training needs non-empty train and validation task sets".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);
    let mut opt = Optimizer::new(cfg.optimizer, cfg.lr, cfg.alpha_lr, cfg.alpha_penalty, model);
    let mut arch_opt = bilevel.then(|| Optimizer::new(cfg.optimizer, cfg.lr, cfg.alpha_lr, cfg.alpha_penalty, model));
    let is_alpha = |name: &str| name.starts_with("alpha_");

    let mut report = TrainReport {
        epochs_run: 0,
        best_val_loss: f64::INFINITY,
        train_losses: Vec::new(),
        val_losses: Vec::new(),
        stopped_early: false,
    };
    let mut best_params: Option<Vec<Tensor>> = None;
    let mut since_best = 0usize;

    let mut order: Vec<usize> = (0..train_tasks.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut steps = 0usize;
        for batch_idx in order.chunks(cfg.batch_size) {
            let batch: Vec<Task> = batch_idx.iter().map(|&i| train_tasks[i].clone()).collect();
            let loss = if bilevel {
                let l = batch_step(model, &batch, &mut opt, &|n| !is_alpha(n))?;
                // Architecture step on a validation batch of the same size.
                let val_batch: Vec<Task> = (0..cfg.batch_size.min(val_tasks.len()))
                    .map(|_| val_tasks[rng.gen_range(0..val_tasks.len())].clone())
                    .collect();
                batch_step(model, &val_batch, arch_opt.as_mut().unwrap(), &is_alpha)?;
                l
            } else {
                batch_step(model, &batch, &mut opt, &|_| true)?
            };
            epoch_loss += loss;
            steps += 1;
        }
        let train_loss = epoch_loss / steps as f64;
        let val_loss = mean_task_loss(model, val_tasks)?;
        report.train_losses.push(train_loss);
        report.val_losses.push(val_loss);
        report.epochs_run = epoch + 1;

        if let Some(w) = log.as_deref_mut() {
            let alphas = model.alphas().ok().map(|a| a.per_layer);
            let record = EpochRecord {
                epoch,
                train_loss,
                val_loss,
                alphas: alphas.as_ref(),
            };
            writeln!(w, "{}", serde_json::to_string(&record)?)?;
        }

        if val_loss < report.best_val_loss - cfg.min_delta {
            report.best_val_loss = val_loss;
            best_params = Some(
                model
                    .params
                    .entries
                    .iter()
                    .map(|p| p.value.clone())
                    .collect(),
            );
            since_best = 0;
        } else {
            report.best_val_loss = report.best_val_loss.min(val_loss);
            since_best += 1;
            if since_best >= cfg.patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    if restore_best {
        if let Some(best) = best_params {
            for (entry, value) in model.params.entries.iter_mut().zip(best) {
                entry.value = value;
            }
        }
    }
    Ok(report)
}

fn reborrow<'a>(log: &'a mut Option<&mut dyn Write>) -> Option<&'a mut dyn Write> {
    log.as_mut().map(|w| &mut **w as &mut dyn Write)
}

/// Outcome of the two-phase search pipeline.
#[derive(Debug)]
pub struct SearchOutcome {
    pub alphas: SupernetAlphas,
    pub assignment: ModulationAssignment,
    pub supernet_report: TrainReport,
    pub retrain_report: TrainReport,
    /// The retrained model with the selected fixed structure.
    pub model: Model,
}

/// Train a supernet, pick the top-K (layer, op) pairs by blend weight,
/// and retrain a fresh model with that fixed structure.
#[allow(clippy::too_many_arguments)]
pub fn search_and_retrain(
    model_cfg: &ModelConfig,
    schema: &DatasetSchema,
    split: &TaskSplit,
    supernet_cfg: &TrainConfig,
    retrain_cfg: &TrainConfig,
    top_k: usize,
    bilevel: bool,
    mut log: Option<&mut dyn Write>,
) -> Result<SearchOutcome> {
    let mut supernet = Model::new(
        model_cfg.clone(),
        schema,
        ModulationPlan::Supernet,
        supernet_cfg.rng_seed,
    )?;
    let supernet_report = train_supernet(
        &mut supernet,
        &split.train,
        &split.val,
        supernet_cfg,
        reborrow(&mut log),
        bilevel,
    )?;
    let alphas = supernet.alphas()?;
    let assignment = select_topk(&alphas, top_k)?;
    let (model, retrain_report) = retrain(
        &assignment,
        model_cfg,
        schema,
        split,
        retrain_cfg,
        log,
    )?;
    Ok(SearchOutcome {
        alphas,
        assignment,
        supernet_report,
        retrain_report,
        model,
    })
}

/// Train a fresh model with a fixed modulation assignment.
pub fn retrain(
    assignment: &ModulationAssignment,
    model_cfg: &ModelConfig,
    schema: &DatasetSchema,
    split: &TaskSplit,
    cfg: &TrainConfig,
    log: Option<&mut dyn Write>,
) -> Result<(Model, TrainReport)> {
    let mut model = Model::new(
        model_cfg.clone(),
        schema,
        ModulationPlan::Fixed(assignment.clone()),
        cfg.rng_seed,
    )?;
    let report = train(&mut model, &split.train, &split.val, cfg, log)?;
    Ok((model, report))
}

/// Which space a random-search baseline samples from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SearchSpace {
    /// Chains of `ops_per_layer` raw ops per layer, drawn from all six
    /// ops: `6^(C*L)` structures.
    Original { ops_per_layer: usize },
    /// Canonical forms per layer: `2^(4*L)` structures.
    Transformed,
}

/// One evaluated random-search candidate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Candidate {
    pub assignment: ModulationAssignment,
    pub val_loss: f64,
}

/// Random-search trajectory over a fixed budget of candidate trainings.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RandomSearchReport {
    pub evaluated: Vec<Candidate>,
    pub best_index: usize,
    /// Best validation loss after each evaluation.
    pub best_so_far: Vec<f64>,
}

impl RandomSearchReport {
    pub fn best(&self) -> &Candidate {
        &self.evaluated[self.best_index]
    }
}

/// Evaluate `budget` uniformly sampled structures, training each briefly
/// and scoring on validation loss. Original-space samples are mapped to
/// their canonical structure before training; because many raw chains
/// collapse to the same structure, this space wastes budget on
/// duplicates, which is the point of the comparison.
///
/// Candidates and their training seeds are drawn up front, so the result
/// is identical for any `threads >= 1`.
#[allow(clippy::too_many_arguments)]
pub fn random_search(
    space: SearchSpace,
    model_cfg: &ModelConfig,
    schema: &DatasetSchema,
    split: &TaskSplit,
    budget: usize,
    candidate_cfg: &TrainConfig,
    rng_seed: u64,
    threads: usize,
) -> Result<RandomSearchReport> {
    if budget == 0 {
        return Err(Error::Precondition("search budget must be positive".into()));
    }
    if threads == 0 {
        return Err(Error::Precondition("threads must be >= 1".into()));
    }
    let num_layers = model_cfg.widths.len();
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let jobs: Vec<(ModulationAssignment, u64)> = (0..budget)
        .map(|_| (sample_structure(space, num_layers, &mut rng), rng.gen()))
        .collect();

    let losses = run_indexed(threads, jobs.len(), |i| {
        let (assignment, seed) = &jobs[i];
        let mut cfg = candidate_cfg.clone();
        cfg.rng_seed = *seed;
        let (_, train_report) = retrain(assignment, model_cfg, schema, split, &cfg, None)?;
        Ok(train_report.best_val_loss)
    })?;

    let mut report = RandomSearchReport {
        evaluated: Vec::new(),
        best_index: 0,
        best_so_far: Vec::new(),
    };
    let mut best = f64::INFINITY;
    for (i, ((assignment, _), val_loss)) in jobs.into_iter().zip(losses).enumerate() {
        report.evaluated.push(Candidate {
            assignment,
            val_loss,
        });
        if val_loss < best {
            best = val_loss;
            report.best_index = i;
        }
        report.best_so_far.push(best);
    }
    Ok(report)
}

/// Run `n` independent jobs on up to `threads` workers, returning results
/// in job order.
fn run_indexed<T, F>(threads: usize, n: usize, job: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if threads <= 1 || n <= 1 {
        return (0..n).map(&job).collect();
    }
    let workers = threads.min(n);
    let next = std::sync::atomic::AtomicUsize::new(0);
    let mut slots: Vec<Option<Result<T>>> = (0..n).map(|_| None).collect();
    let slot_refs: Vec<std::sync::Mutex<&mut Option<Result<T>>>> =
        slots.iter_mut().map(std::sync::Mutex::new).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                if i >= n {
                    break;
                }
                let out = job(i);
                **slot_refs[i].lock().expect("slot lock") = Some(out);
            });
        }
    });
    drop(slot_refs);
    slots
        .into_iter()
        .map(|s| s.expect("every job index visited"))
        .collect()
}

/// Normalized predictions for each task's query set, computed on up to
/// `threads` workers; output order matches the input order.
pub fn predict_tasks(model: &Model, tasks: &[Task], threads: usize) -> Result<Vec<Vec<f64>>> {
    run_indexed(threads.max(1), tasks.len(), |i| model.predict_task(&tasks[i]))
}

fn sample_structure(
    space: SearchSpace,
    num_layers: usize,
    rng: &mut ChaCha8Rng,
) -> ModulationAssignment {
    let layers = (0..num_layers)
        .map(|_| match space {
            SearchSpace::Original { ops_per_layer } => {
                // Equivalence-preserving rewrites never add or drop an op
                // group, so a chain's canonical structure is exactly the
                // set of groups among its sampled ops.
                let mut cf = CanonicalForm::empty();
                for _ in 0..ops_per_layer {
                    let op = BinaryOpKind::ALL[rng.gen_range(0..BinaryOpKind::ALL.len())];
                    match op {
                        BinaryOpKind::Max => cf.use_max = true,
                        BinaryOpKind::Min => cf.use_min = true,
                        BinaryOpKind::Mul | BinaryOpKind::Div => cf.use_mul = true,
                        BinaryOpKind::Add | BinaryOpKind::Sub => cf.use_add = true,
                    }
                }
                cf
            }
            SearchSpace::Transformed => CanonicalForm {
                use_max: rng.gen(),
                use_min: rng.gen(),
                use_mul: rng.gen(),
                use_add: rng.gen(),
            },
        })
        .collect();
    ModulationAssignment { layers }
}

/// Predicted vs measured multiply–accumulate counts for one task's
/// forward pass (adaptation plus every query prediction).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ComplexityAudit {
    pub predicted_macs: u64,
    pub measured_macs: u64,
}

impl ComplexityAudit {
    pub fn ratio(&self) -> f64 {
        self.measured_macs as f64 / self.predicted_macs as f64
    }
}

/// Audit the closed-form cost model against the instrumented graph.
pub fn complexity_audit(model: &Model, task: &Task) -> Result<ComplexityAudit> {
    let h0 = model.layer_inputs[0];
    let slot_total: usize = model.slot_total();
    let adapt = task.support.len() * model.config.adapt_hidden * h0
        + 4 * slot_total * model.config.adapt_hidden;
    let per_query: usize = model
        .config
        .widths
        .iter()
        .zip(&model.layer_inputs)
        .map(|(&w, &i)| w * i)
        .sum();
    let predicted = (adapt + task.query.len() * per_query) as u64;

    let mut g = Graph::new();
    let b = model.bind(&mut g);
    let flat = model.adapt(&mut g, &b, &task.support)?;
    for q in &task.query {
        model.predict_one(&mut g, &b, flat, q)?;
    }
    Ok(ComplexityAudit {
        predicted_macs: predicted,
        measured_macs: g.macs(),
    })
}
