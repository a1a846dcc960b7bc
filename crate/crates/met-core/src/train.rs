//! Joint optimization of all exit losses plus the graph penalty: Adam with
//! decoupled weight decay, linear warmup into cosine decay, seeded shuffling,
//! and per-epoch evaluation of the train and validation splits.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::save_checkpoint;
use crate::data::Dataset;
use crate::error::{MetError, Result};
use crate::graph::{build_graphs, exit_graph_term};
use crate::metrics::MetricsRow;
use crate::multi_exit::{ExitPlan, MergeMode, MetForward, MetModel};
use crate::tape::{Tape, TensorId};
use crate::vit::BackboneWeights;

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// Training hyperparameters. Grid-style values (learning rate, weight
/// decay, alpha, bottleneck) are single values here; sweeping them is the
/// operator's job.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_warmup_epochs")]
    pub warmup_epochs: usize,
    pub alpha: f64,
    /// Adapter bottleneck width `d'`.
    pub bottleneck: usize,
    pub seed: u64,
    /// Exit placements (1-based layer indices); `None` takes the default
    /// last-seven-layers plan.
    #[serde(default)]
    pub exits: Option<Vec<usize>>,
    #[serde(default = "default_merge")]
    pub merge: MergeMode,
    #[serde(default)]
    pub mask_cross_exit: bool,
    #[serde(default)]
    pub share_token: bool,
    /// Feed the graph penalty post-LN representations instead of the raw
    /// captured class tokens.
    #[serde(default)]
    pub graph_post_ln: bool,
}

fn default_batch_size() -> usize {
    32
}
fn default_epochs() -> usize {
    100
}
fn default_warmup_epochs() -> usize {
    10
}
fn default_merge() -> MergeMode {
    MergeMode::ResidualOnce
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr < 0.0 {
            return Err(MetError::Config(format!(
                "learning rate {} is negative",
                self.lr
            )));
        }
        if self.weight_decay < 0.0 {
            return Err(MetError::Config("weight decay is negative".into()));
        }
        if self.alpha < 0.0 {
            return Err(MetError::Config("alpha is negative".into()));
        }
        if self.batch_size == 0 {
            return Err(MetError::Config("batch size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(MetError::Config("epochs must be at least 1".into()));
        }
        if self.warmup_epochs >= self.epochs {
            return Err(MetError::Config(format!(
                "warmup epochs {} must be below total epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        Ok(())
    }

    pub fn plan_for(&self, layers: usize) -> Result<ExitPlan> {
        match &self.exits {
            Some(placements) => ExitPlan::new(placements.clone(), layers),
            None => Ok(ExitPlan::default_for(layers)),
        }
    }
}

/// Learning rate at a 0-based optimizer step: linear `0 -> base` over the
/// warmup steps, then cosine decay `base -> 0` over the remainder.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    debug_assert!(step < total_steps);
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = (total_steps - warmup_steps) as f64;
    let progress = (step - warmup_steps) as f64 / span;
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Gradients keyed by parameter name.
pub type GradMap = BTreeMap<String, Vec<f64>>;

/// First/second moment buffers per parameter plus the shared step counter.
#[derive(Debug, Default, Clone)]
pub struct AdamState {
    pub t: u64,
    slots: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

/// One bias-corrected Adam update with decoupled weight decay, in place.
pub fn adam_update_inplace(
    values: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    weight_decay: f64,
) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..values.len() {
        let g = grad[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        values[i] -= lr * (m_hat / (v_hat.sqrt() + ADAM_EPS) + weight_decay * values[i]);
    }
}

impl AdamState {
    /// Update every trainable parameter of the model. Parameters without an
    /// entry in `grads` see a zero gradient; frozen parameters are never
    /// touched.
    pub fn step(&mut self, model: &mut MetModel, grads: &GradMap, lr: f64, weight_decay: f64) {
        self.t += 1;
        let t = self.t;
        for p in model
            .bank
            .params_mut()
            .into_iter()
            .chain(model.heads.params_mut())
        {
            debug_assert!(p.trainable);
            let numel = p.tensor.numel();
            let (m, v) = self
                .slots
                .entry(p.name.clone())
                .or_insert_with(|| (vec![0.0; numel], vec![0.0; numel]));
            static ZERO: &[f64] = &[];
            let grad = grads.get(&p.name).map(|g| g.as_slice()).unwrap_or(ZERO);
            if grad.is_empty() {
                let zeros = vec![0.0; numel];
                adam_update_inplace(&mut p.tensor.data, &zeros, m, v, t, lr, weight_decay);
            } else {
                adam_update_inplace(&mut p.tensor.data, grad, m, v, t, lr, weight_decay);
            }
        }
    }
}

/// Values of one loss evaluation: per-exit cross-entropies and accuracies,
/// the alpha-weighted per-exit graph contributions, and their sum.
#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub exit_ce: Vec<f64>,
    pub exit_acc: Vec<f64>,
    /// Alpha-weighted graph term per exit; the last exit's entry is zero.
    pub exit_graph: Vec<f64>,
    pub penalty: f64,
    pub total: f64,
}

/// Build the total objective on the tape: summed per-exit mean cross
/// entropies plus the graph penalty over early exits, with similarity graphs
/// from the detached last-exit logits.
pub fn total_loss(
    tape: &mut Tape,
    fwd: &MetForward,
    labels: &[usize],
    num_classes: usize,
    alpha: f64,
    graph_post_ln: bool,
) -> Result<(TensorId, LossReport)> {
    total_loss_with_graphs(tape, fwd, labels, num_classes, alpha, graph_post_ln, None)
}

/// As `total_loss`, but with optionally pinned similarity graphs. The graphs
/// enter the loss as constants (the logits they are built from are
/// detached), so gradient checks must hold them fixed while perturbing
/// parameters; passing `Some` does exactly that.
pub fn total_loss_with_graphs(
    tape: &mut Tape,
    fwd: &MetForward,
    labels: &[usize],
    num_classes: usize,
    alpha: f64,
    graph_post_ln: bool,
    pinned_graphs: Option<&crate::graph::SimilarityGraphs>,
) -> Result<(TensorId, LossReport)> {
    let exits = fwd.exits.len();
    if exits == 0 {
        return Err(MetError::State("forward produced no exits".into()));
    }

    let mut exit_ce = Vec::with_capacity(exits);
    let mut exit_acc = Vec::with_capacity(exits);
    let mut ce_sum: Option<TensorId> = None;
    for &logits in &fwd.logits {
        let ce = tape.cross_entropy_mean(logits, labels)?;
        exit_ce.push(tape.value(ce));
        exit_acc.push(accuracy(tape.data(logits), num_classes, labels));
        ce_sum = Some(match ce_sum {
            Some(prev) => tape.add(prev, ce)?,
            None => ce,
        });
    }
    let ce_sum = ce_sum.expect("at least one exit");

    let mut exit_graph = vec![0.0; exits];
    let mut penalty_id: Option<TensorId> = None;
    if alpha > 0.0 && exits > 1 {
        let built;
        let graphs = match pinned_graphs {
            Some(g) => g,
            None => {
                let last = fwd.logits[exits - 1];
                let detached = tape.detach(last);
                let logit_values = tape.data(detached).to_vec();
                built = build_graphs(&logit_values, num_classes, labels)?;
                &built
            }
        };
        let rep_source = if graph_post_ln {
            &fwd.post_ln_reps
        } else {
            &fwd.reps
        };
        for e in 0..exits - 1 {
            let term = exit_graph_term(tape, rep_source[e], graphs)?;
            let weighted = tape.scale(term, alpha);
            exit_graph[e] = tape.value(weighted);
            penalty_id = Some(match penalty_id {
                Some(prev) => tape.add(prev, weighted)?,
                None => weighted,
            });
        }
    }

    let (loss, penalty) = match penalty_id {
        Some(p) => (tape.add(ce_sum, p)?, tape.value(p)),
        None => (ce_sum, 0.0),
    };
    let report = LossReport {
        exit_ce,
        exit_acc,
        exit_graph,
        penalty,
        total: tape.value(loss),
    };
    Ok((loss, report))
}

fn accuracy(logits: &[f64], num_classes: usize, labels: &[usize]) -> f64 {
    let mut correct = 0;
    for (i, &label) in labels.iter().enumerate() {
        let row = &logits[i * num_classes..(i + 1) * num_classes];
        let mut best = 0;
        for (j, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = j;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len() as f64
}

/// Run backward from `loss` and collect gradients of the traced parameters.
pub fn backward_to_params(
    tape: &mut Tape,
    loss: TensorId,
    named: &[(String, TensorId)],
) -> Result<GradMap> {
    tape.backward(loss)?;
    let mut grads = GradMap::new();
    for (name, id) in named {
        if let Some(g) = tape.grad(*id) {
            grads.insert(name.clone(), g.to_vec());
        }
    }
    Ok(grads)
}

/// Aggregated evaluation of one split.
#[derive(Debug, Clone)]
pub struct SplitMetrics {
    pub exit_ce: Vec<f64>,
    pub exit_acc: Vec<f64>,
    pub exit_graph: Vec<f64>,
    pub penalty: f64,
    pub total: f64,
    pub count: usize,
}

impl SplitMetrics {
    fn merge(reports: &[(usize, LossReport)], exits: usize) -> Self {
        let total_count: usize = reports.iter().map(|(c, _)| c).sum();
        let mut out = SplitMetrics {
            exit_ce: vec![0.0; exits],
            exit_acc: vec![0.0; exits],
            exit_graph: vec![0.0; exits],
            penalty: 0.0,
            total: 0.0,
            count: total_count,
        };
        for (count, report) in reports {
            let w = *count as f64 / total_count as f64;
            for e in 0..exits {
                out.exit_ce[e] += w * report.exit_ce[e];
                out.exit_acc[e] += w * report.exit_acc[e];
                out.exit_graph[e] += w * report.exit_graph[e];
            }
            out.penalty += w * report.penalty;
            out.total += w * report.total;
        }
        out
    }

    pub fn mean_accuracy(&self) -> f64 {
        self.exit_acc.iter().sum::<f64>() / self.exit_acc.len() as f64
    }
}

/// Evaluation parallelism cap from `MET_THREADS`; absent means one thread.
pub fn eval_threads() -> usize {
    std::env::var("MET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
}

/// Evaluate a frozen model over a dataset split in deterministic batch
/// order, fanning batches across up to `MET_THREADS` threads.
pub fn evaluate_split(
    model: &MetModel,
    data: &Dataset,
    batch_size: usize,
    alpha: f64,
    graph_post_ln: bool,
) -> Result<SplitMetrics> {
    let indices: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = indices.chunks(batch_size).collect();
    let threads = eval_threads().min(chunks.len().max(1));

    let eval_chunk = |chunk: &[usize]| -> Result<(usize, LossReport)> {
        let batch = data.batch(chunk)?;
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &batch, model.options())?;
        let (_, report) = total_loss(
            &mut tape,
            &fwd,
            &batch.labels,
            data.num_classes,
            alpha,
            graph_post_ln,
        )?;
        Ok((chunk.len(), report))
    };

    let reports: Vec<(usize, LossReport)> = if threads <= 1 {
        chunks
            .iter()
            .map(|c| eval_chunk(c))
            .collect::<Result<_>>()?
    } else {
        // deterministic merge: results keyed by chunk index, reduced in order
        let mut slots: Vec<Option<Result<(usize, LossReport)>>> = Vec::new();
        slots.resize_with(chunks.len(), || None);
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots_mutex = std::sync::Mutex::new(&mut slots);
        std::thread::scope(|scope| {
            for _ in 0..threads {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if i >= chunks.len() {
                        break;
                    }
                    let result = eval_chunk(chunks[i]);
                    slots_mutex.lock().unwrap()[i] = Some(result);
                });
            }
        });
        slots
            .into_iter()
            .map(|s| s.expect("every chunk evaluated"))
            .collect::<Result<_>>()?
    };

    let exits = model.plan.num_exits();
    Ok(SplitMetrics::merge(&reports, exits))
}

#[derive(Debug, Clone)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub lr: f64,
    pub train: SplitMetrics,
    pub val: SplitMetrics,
}

#[derive(Debug)]
pub struct TrainOutcome {
    pub model: MetModel,
    pub best_model: MetModel,
    pub best_epoch: usize,
    pub history: Vec<EpochMetrics>,
}

/// Train a fresh model on `train_set`, evaluating both splits each epoch.
/// Deterministic for a fixed config seed; aborts with a diagnostic if the
/// loss leaves the finite range.
pub fn train(
    config: &TrainConfig,
    backbone: BackboneWeights,
    train_set: &Dataset,
    val_set: &Dataset,
) -> Result<TrainOutcome> {
    config.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(MetError::Data(
            "training and validation sets must be nonempty".into(),
        ));
    }
    if train_set.num_classes != backbone.config.num_classes {
        return Err(MetError::Config(format!(
            "dataset has {} classes, backbone head expects {}",
            train_set.num_classes, backbone.config.num_classes
        )));
    }

    let plan = config.plan_for(backbone.config.layers)?;
    let mut model = MetModel::new(
        backbone,
        plan,
        config.bottleneck,
        config.merge,
        config.mask_cross_exit,
        config.share_token,
        config.seed,
    )?;

    let n = train_set.len();
    let steps_per_epoch = n.div_ceil(config.batch_size);
    let total_steps = config.epochs * steps_per_epoch;
    let warmup_steps = config.warmup_epochs * steps_per_epoch;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut adam = AdamState::default();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(usize, MetModel, f64)> = None;
    let mut step = 0usize;
    let mut indices: Vec<usize> = (0..n).collect();

    for epoch in 1..=config.epochs {
        indices.shuffle(&mut rng);
        let mut epoch_lr = 0.0;
        for chunk in indices.chunks(config.batch_size) {
            let lr = lr_at(step, total_steps, warmup_steps, config.lr);
            epoch_lr = lr;
            let batch = train_set.batch(chunk)?;
            let mut tape = Tape::new();
            let (fwd, named) = model.forward_traced(&mut tape, &batch, model.options())?;
            let (loss, report) = total_loss(
                &mut tape,
                &fwd,
                &batch.labels,
                train_set.num_classes,
                config.alpha,
                config.graph_post_ln,
            )?;
            if !report.total.is_finite() {
                return Err(MetError::Divergence {
                    step,
                    value: report.total,
                });
            }
            let grads = backward_to_params(&mut tape, loss, &named)?;
            adam.step(&mut model, &grads, lr, config.weight_decay);
            step += 1;
        }

        let train_metrics = evaluate_split(
            &model,
            train_set,
            config.batch_size,
            config.alpha,
            config.graph_post_ln,
        )?;
        let val_metrics = evaluate_split(
            &model,
            val_set,
            config.batch_size,
            config.alpha,
            config.graph_post_ln,
        )?;
        let val_score = val_metrics.mean_accuracy();
        match &best {
            Some((_, _, best_score)) if *best_score >= val_score => {}
            _ => best = Some((epoch, model.clone(), val_score)),
        }
        history.push(EpochMetrics {
            epoch,
            lr: epoch_lr,
            train: train_metrics,
            val: val_metrics,
        });
    }

    let (best_epoch, best_model, _) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        model,
        best_model,
        best_epoch,
        history,
    })
}

/// Flatten epoch metrics into CSV rows: one row per exit plus an `all` row,
/// per split.
pub fn metrics_rows(history: &[EpochMetrics]) -> Vec<MetricsRow> {
    let mut rows = Vec::new();
    for em in history {
        for (split, metrics) in [("train", &em.train), ("val", &em.val)] {
            let exits = metrics.exit_ce.len();
            for e in 0..exits {
                rows.push(MetricsRow {
                    epoch: em.epoch,
                    split: split.into(),
                    exit: (e + 1).to_string(),
                    ce: metrics.exit_ce[e],
                    acc: metrics.exit_acc[e],
                    graph_term: metrics.exit_graph[e],
                    total_loss: metrics.exit_ce[e] + metrics.exit_graph[e],
                    lr: em.lr,
                });
            }
            rows.push(MetricsRow {
                epoch: em.epoch,
                split: split.into(),
                exit: "all".into(),
                ce: metrics.exit_ce.iter().sum(),
                acc: metrics.mean_accuracy(),
                graph_term: metrics.penalty,
                total_loss: metrics.total,
                lr: em.lr,
            });
        }
    }
    rows
}

/// Train and persist the artifacts: `metrics.csv`, `checkpoint_final` and
/// `checkpoint_best` (bank + heads), plus the resolved configuration with
/// the optimizer constants pinned.
pub fn run_training(
    config: &TrainConfig,
    backbone: BackboneWeights,
    train_set: &Dataset,
    val_set: &Dataset,
    out_dir: &Path,
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir)?;
    let outcome = train(config, backbone, train_set, val_set)?;
    crate::metrics::emit_metrics(
        &metrics_rows(&outcome.history),
        &out_dir.join("metrics.csv"),
    )?;
    save_checkpoint(
        &outcome.model.trainable_named(),
        &out_dir.join("checkpoint_final"),
    )?;
    save_checkpoint(
        &outcome.best_model.trainable_named(),
        &out_dir.join("checkpoint_best"),
    )?;

    let resolved = serde_json::json!({
        "train": config,
        "optimizer": {
            "name": "adam",
            "beta1": ADAM_BETA1,
            "beta2": ADAM_BETA2,
            "eps": ADAM_EPS,
            "weight_decay": config.weight_decay,
            "decoupled_weight_decay": true,
        },
        "schedule": {
            "kind": "linear-warmup-cosine-decay",
            "per_step": true,
        },
        "best_epoch": outcome.best_epoch,
    });
    std::fs::write(
        out_dir.join("config_resolved.json"),
        serde_json::to_vec_pretty(&resolved)?,
    )?;
    Ok(outcome)
}

/// Apply a trainable checkpoint (bank + heads) to a freshly built model.
pub fn load_trainable_checkpoint(model: &mut MetModel, base: &Path) -> Result<()> {
    let loaded = crate::checkpoint::load_checkpoint(base)?;
    crate::checkpoint::apply_named_tensors(loaded, &mut |f| {
        for p in model.bank.params_mut() {
            f(&p.name.clone(), &mut p.tensor)?;
        }
        for p in model.heads.params_mut() {
            f(&p.name.clone(), &mut p.tensor)?;
        }
        Ok(())
    })
}

/// Apply a backbone checkpoint to freshly initialized backbone weights.
pub fn load_backbone_checkpoint(backbone: &mut BackboneWeights, base: &Path) -> Result<()> {
    let loaded = crate::checkpoint::load_checkpoint(base)?;
    crate::checkpoint::apply_named_tensors(loaded, &mut |f| {
        for p in backbone.params_mut() {
            f(&p.name.clone(), &mut p.tensor)?;
        }
        Ok(())
    })
}

/// Convenience for tests and the gradient suites: a loss evaluation of one
/// batch against the current model parameters, optionally with the
/// similarity graphs pinned (see `total_loss_with_graphs`).
pub fn batch_loss(
    model: &MetModel,
    batch: &crate::vit::ImageBatch,
    num_classes: usize,
    alpha: f64,
    pinned_graphs: Option<&crate::graph::SimilarityGraphs>,
) -> Result<f64> {
    let mut tape = Tape::new();
    let fwd = model.forward(&mut tape, batch, model.options())?;
    let (loss, _) = total_loss_with_graphs(
        &mut tape,
        &fwd,
        &batch.labels,
        num_classes,
        alpha,
        false,
        pinned_graphs,
    )?;
    Ok(tape.value(loss))
}
