//! Anytime (static single-exit) and budgeted (threshold-routed) prediction,
//! threshold calibration, and exact per-exit compute accounting.
//!
//! Cost convention: one multiply-accumulate counts as one FLOP, and only
//! matrix products are charged (patch embedding, Q/K/V, attention score and
//! value products at the live token count, the output projection, the
//! feed-forward, the adapter projections and `d' x d'` transforms, and the
//! taken exit's head). Elementwise work (layer norm, softmax, GELU,
//! residuals, diagonal scaling) is excluded. Under this convention a bare
//! ViT-B/16 at 224x224 costs 17.58 GFLOPs.

use std::fs;
use std::path::Path;

use crate::data::Dataset;
use crate::error::{MetError, Result};
use crate::multi_exit::{live_exits, ExitPlan, MetModel};
use crate::tape::Tape;
use crate::train::eval_threads;
use crate::vit::ViTConfig;

/// MAC breakdown of everything executed up to (and including) one exit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub struct CostBreakdown {
    pub patch_embed: u64,
    pub attention: u64,
    pub ffn: u64,
    pub adapters: u64,
    pub head: u64,
}

impl CostBreakdown {
    pub fn total(&self) -> u64 {
        self.patch_embed + self.attention + self.ffn + self.adapters + self.head
    }
}

/// Cumulative per-exit compute costs, strictly increasing in exit index.
#[derive(Debug, Clone, serde::Serialize)]
pub struct CostTable {
    /// `breakdown[e - 1]` covers layers `1..=placement(e)` plus exit `e`'s head.
    pub breakdown: Vec<CostBreakdown>,
    pub placements: Vec<usize>,
}

impl CostTable {
    pub fn num_exits(&self) -> usize {
        self.breakdown.len()
    }

    pub fn macs(&self, exit: usize) -> u64 {
        self.breakdown[exit - 1].total()
    }

    /// Cumulative cost of one exit in mega-MACs.
    pub fn mega_macs(&self, exit: usize) -> f64 {
        self.macs(exit) as f64 / 1e6
    }

    pub fn gflops(&self, exit: usize) -> f64 {
        self.macs(exit) as f64 / 1e9
    }

    pub fn costs_mega_macs(&self) -> Vec<f64> {
        (1..=self.num_exits()).map(|e| self.mega_macs(e)).collect()
    }
}

/// Per-sample cost of running layers `1..=placement(e)` with the plan's live
/// token counts, plus one head. `bottleneck` adds the adapter projections;
/// `None` is the bare backbone.
pub fn flops_table(
    config: &ViTConfig,
    plan: &ExitPlan,
    bottleneck: Option<usize>,
) -> Result<CostTable> {
    config.validate()?;
    if plan.layers() != config.layers {
        return Err(MetError::Config(format!(
            "plan covers {} layers, config has {}",
            plan.layers(),
            config.layers
        )));
    }
    let d = config.dim as u64;
    let n = config.num_patches() as u64;
    let patch_embed = n * config.patch_dim() as u64 * d;
    let head = d * config.num_classes as u64;

    let mut breakdown = Vec::with_capacity(plan.num_exits());
    let mut attention = 0u64;
    let mut ffn = 0u64;
    let mut adapters = 0u64;
    let mut next_exit = 1usize;
    for k in 1..=config.layers {
        let live = if bottleneck.is_some() {
            plan.live_at_layer(k).len() as u64
        } else {
            1
        };
        let tokens = n + live;
        // Q, K, V and the output projection, then the two T x T products
        attention += 4 * tokens * d * d + 2 * tokens * tokens * d;
        ffn += 2 * tokens * d * (4 * d);
        if let Some(dp) = bottleneck {
            let dp = dp as u64;
            for m in [2 * k - 1, 2 * k] {
                let branches = live_exits(m, plan)?.len() as u64;
                let stack = if m == 1 { 1 + n } else { live + n };
                // shared down path over the stacked rows, then one small
                // transform and the up projection per branch
                adapters += stack * (d * dp + dp * dp);
                adapters += branches * (1 + n) * (dp * dp + dp * d);
            }
        }
        if next_exit <= plan.num_exits() && plan.placement(next_exit) == k {
            breakdown.push(CostBreakdown {
                patch_embed,
                attention,
                ffn,
                adapters,
                head,
            });
            next_exit += 1;
        }
    }
    debug_assert_eq!(breakdown.len(), plan.num_exits());
    Ok(CostTable {
        breakdown,
        placements: plan.placements().to_vec(),
    })
}

/// Bare single-exit backbone cost (the calibration baseline).
pub fn baseline_macs(config: &ViTConfig) -> Result<u64> {
    let plan = ExitPlan::last_layers(1, config.layers)?;
    Ok(flops_table(config, &plan, None)?.macs(1))
}

/// Maximum softmax probability of one logits row.
pub fn confidence(logits_row: &[f64]) -> f64 {
    debug_assert!(!logits_row.is_empty());
    let max = logits_row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut top = 0.0;
    for &v in logits_row {
        let e = (v - max).exp();
        z += e;
        if v == max {
            top = e;
        }
    }
    top / z
}

/// Predictions and confidences of every exit for every sample.
#[derive(Debug, Clone)]
pub struct ExitEvaluations {
    pub n: usize,
    pub exits: usize,
    /// `n x exits`, row-major.
    pub confidence: Vec<f64>,
    /// `n x exits` argmax predictions.
    pub prediction: Vec<usize>,
    pub labels: Vec<usize>,
}

impl ExitEvaluations {
    pub fn confidence_at(&self, sample: usize, exit: usize) -> f64 {
        self.confidence[sample * self.exits + (exit - 1)]
    }

    pub fn prediction_at(&self, sample: usize, exit: usize) -> usize {
        self.prediction[sample * self.exits + (exit - 1)]
    }

    /// Per-exit accuracies over the whole set.
    pub fn exit_accuracies(&self) -> Vec<f64> {
        let mut acc = vec![0.0; self.exits];
        for s in 0..self.n {
            for (e, a) in acc.iter_mut().enumerate() {
                if self.prediction[s * self.exits + e] == self.labels[s] {
                    *a += 1.0;
                }
            }
        }
        for a in acc.iter_mut() {
            *a /= self.n as f64;
        }
        acc
    }
}

/// Run the full forward over a dataset and collect per-exit predictions and
/// confidences, fanning batches over up to `MET_THREADS` threads.
pub fn evaluate_exits(
    model: &MetModel,
    data: &Dataset,
    batch_size: usize,
) -> Result<ExitEvaluations> {
    let num_exits = model.plan.num_exits();
    let indices: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = indices.chunks(batch_size.max(1)).collect();
    let threads = eval_threads().min(chunks.len().max(1));

    type ChunkResult = (Vec<f64>, Vec<usize>);
    let eval_chunk = |chunk: &[usize]| -> Result<ChunkResult> {
        let batch = data.batch(chunk)?;
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &batch, model.options())?;
        let classes = data.num_classes;
        let mut conf = vec![0.0; chunk.len() * num_exits];
        let mut pred = vec![0usize; chunk.len() * num_exits];
        for (slot, &exit) in fwd.exits.iter().enumerate() {
            let logits = tape.data(fwd.logits[slot]);
            for s in 0..chunk.len() {
                let row = &logits[s * classes..(s + 1) * classes];
                conf[s * num_exits + (exit - 1)] = confidence(row);
                let mut best = 0;
                for (j, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = j;
                    }
                }
                pred[s * num_exits + (exit - 1)] = best;
            }
        }
        Ok((conf, pred))
    };

    let results: Vec<ChunkResult> = if threads <= 1 {
        chunks
            .iter()
            .map(|c| eval_chunk(c))
            .collect::<Result<_>>()?
    } else {
        let mut slots: Vec<Option<Result<ChunkResult>>> = Vec::new();
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

    let mut confidence_all = Vec::with_capacity(data.len() * num_exits);
    let mut prediction_all = Vec::with_capacity(data.len() * num_exits);
    for (conf, pred) in results {
        confidence_all.extend(conf);
        prediction_all.extend(pred);
    }
    Ok(ExitEvaluations {
        n: data.len(),
        exits: num_exits,
        confidence: confidence_all,
        prediction: prediction_all,
        labels: data.labels.clone(),
    })
}

/// Static single-exit prediction: the forward stops at the exit's layer.
#[derive(Debug, Clone)]
pub struct AnytimePrediction {
    pub exit: usize,
    pub predictions: Vec<usize>,
    pub accuracy: f64,
    pub cost_mega_macs: f64,
}

pub fn anytime_predict(
    model: &MetModel,
    data: &Dataset,
    exit: usize,
    batch_size: usize,
    table: &CostTable,
) -> Result<AnytimePrediction> {
    let num_exits = model.plan.num_exits();
    if exit < 1 || exit > num_exits {
        return Err(MetError::Index(format!(
            "exit {exit} out of 1..={num_exits}"
        )));
    }
    let mut options = model.options();
    options.max_layer = Some(model.plan.placement(exit));

    let indices: Vec<usize> = (0..data.len()).collect();
    let mut predictions = Vec::with_capacity(data.len());
    let mut correct = 0usize;
    for chunk in indices.chunks(batch_size.max(1)) {
        let batch = data.batch(chunk)?;
        let mut tape = Tape::new();
        let fwd = model.forward(&mut tape, &batch, options)?;
        let slot = fwd.exits.iter().position(|&e| e == exit).ok_or_else(|| {
            MetError::State(format!("exit {exit} missing from truncated forward"))
        })?;
        let logits = tape.data(fwd.logits[slot]);
        let classes = data.num_classes;
        for s in 0..chunk.len() {
            let row = &logits[s * classes..(s + 1) * classes];
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            predictions.push(best);
            if best == batch.labels[s] {
                correct += 1;
            }
        }
    }
    Ok(AnytimePrediction {
        exit,
        accuracy: correct as f64 / data.len() as f64,
        predictions,
        cost_mega_macs: table.mega_macs(exit),
    })
}

/// Static exit selection from per-exit validation accuracies.
#[derive(Debug, Clone, Copy)]
pub enum StaticExitMode {
    /// Highest accuracy; ties go to the cheaper exit.
    BestAcc,
    /// Cheapest exit within `delta` of the best accuracy.
    CheapestWithin(f64),
}

pub fn select_static_exit(
    accuracies: &[f64],
    table: &CostTable,
    mode: StaticExitMode,
) -> Result<usize> {
    if accuracies.len() != table.num_exits() {
        return Err(MetError::Data(format!(
            "{} accuracies for {} exits",
            accuracies.len(),
            table.num_exits()
        )));
    }
    // the cost table increases strictly with the exit index, so lower index
    // always means cheaper
    let mut best = 0;
    for (i, &acc) in accuracies.iter().enumerate() {
        if acc > accuracies[best] {
            best = i;
        }
    }
    match mode {
        StaticExitMode::BestAcc => Ok(best + 1),
        StaticExitMode::CheapestWithin(delta) => {
            let floor = accuracies[best] - delta;
            for (i, &acc) in accuracies.iter().enumerate() {
                if acc >= floor {
                    return Ok(i + 1);
                }
            }
            Ok(best + 1)
        }
    }
}

/// Confidence thresholds for exits `1..E-1`; the last exit takes everything
/// that remains.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ThresholdSet {
    pub thresholds: Vec<f64>,
}

/// Outcome of routing one batch of samples through the exits.
#[derive(Debug, Clone, serde::Serialize)]
pub struct RoutingResult {
    pub sample_exit: Vec<usize>,
    pub sample_prediction: Vec<usize>,
    pub sample_confidence: Vec<f64>,
    /// Consumed cost per sample, mega-MACs.
    pub sample_cost: Vec<f64>,
    pub exit_counts: Vec<usize>,
    pub exit_fractions: Vec<f64>,
    pub mean_cost_mega_macs: f64,
    pub accuracy: f64,
}

/// Route every sample to the first exit whose confidence clears its
/// threshold (the last exit is unconditional), consuming that exit's
/// cumulative cost.
pub fn budgeted_route(
    evals: &ExitEvaluations,
    thresholds: &ThresholdSet,
    table: &CostTable,
) -> Result<RoutingResult> {
    let exits = evals.exits;
    if thresholds.thresholds.len() + 1 != exits {
        return Err(MetError::Config(format!(
            "{} thresholds for {} exits",
            thresholds.thresholds.len(),
            exits
        )));
    }
    if table.num_exits() != exits {
        return Err(MetError::Config(
            "cost table and evaluations disagree on exit count".into(),
        ));
    }
    let mut sample_exit = Vec::with_capacity(evals.n);
    let mut sample_prediction = Vec::with_capacity(evals.n);
    let mut sample_confidence = Vec::with_capacity(evals.n);
    let mut sample_cost = Vec::with_capacity(evals.n);
    let mut exit_counts = vec![0usize; exits];
    let mut correct = 0usize;
    for s in 0..evals.n {
        let mut taken = exits;
        for e in 1..exits {
            if evals.confidence_at(s, e) >= thresholds.thresholds[e - 1] {
                taken = e;
                break;
            }
        }
        exit_counts[taken - 1] += 1;
        let prediction = evals.prediction_at(s, taken);
        if prediction == evals.labels[s] {
            correct += 1;
        }
        sample_exit.push(taken);
        sample_prediction.push(prediction);
        sample_confidence.push(evals.confidence_at(s, taken));
        sample_cost.push(table.mega_macs(taken));
    }
    let exit_fractions: Vec<f64> = exit_counts
        .iter()
        .map(|&c| c as f64 / evals.n as f64)
        .collect();
    let mean_cost_mega_macs = sample_cost.iter().sum::<f64>() / evals.n as f64;
    Ok(RoutingResult {
        sample_exit,
        sample_prediction,
        sample_confidence,
        sample_cost,
        exit_counts,
        exit_fractions,
        mean_cost_mega_macs,
        accuracy: correct as f64 / evals.n as f64,
    })
}

/// Validation confidences per exit plus labels; the calibration input.
#[derive(Debug, Clone)]
pub struct ConfidenceProfile {
    pub n: usize,
    pub exits: usize,
    /// `n x exits`, row-major, values in `[0, 1]`.
    pub confidences: Vec<f64>,
    pub labels: Vec<usize>,
}

impl ConfidenceProfile {
    pub fn new(n: usize, exits: usize, confidences: Vec<f64>, labels: Vec<usize>) -> Result<Self> {
        if confidences.len() != n * exits || labels.len() != n {
            return Err(MetError::Data("profile dimensions disagree".into()));
        }
        if confidences.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(MetError::Data("confidences must lie in [0, 1]".into()));
        }
        Ok(Self {
            n,
            exits,
            confidences,
            labels,
        })
    }

    pub fn from_evaluations(evals: &ExitEvaluations) -> Result<Self> {
        Self::new(
            evals.n,
            evals.exits,
            evals.confidence.clone(),
            evals.labels.clone(),
        )
    }

    pub fn confidence_at(&self, sample: usize, exit: usize) -> f64 {
        self.confidences[sample * self.exits + (exit - 1)]
    }

    /// CSV export: header `sample,exit,confidence,label`, one row per
    /// (sample, exit) with 1-based exits.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::from("sample,exit,confidence,label\n");
        for s in 0..self.n {
            for e in 1..=self.exits {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    s,
                    e,
                    self.confidence_at(s, e),
                    self.labels[s]
                ));
            }
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut lines = text.lines();
        match lines.next() {
            Some("sample,exit,confidence,label") => {}
            other => {
                return Err(MetError::Data(format!(
                    "bad profile header {other:?}, expected sample,exit,confidence,label"
                )))
            }
        }
        let mut rows: Vec<(usize, usize, f64, usize)> = Vec::new();
        for (idx, line) in lines.enumerate() {
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(MetError::Data(format!(
                    "profile line {} has {} fields",
                    idx + 2,
                    fields.len()
                )));
            }
            let parse_err =
                |what: &str| MetError::Data(format!("bad {what} on profile line {}", idx + 2));
            rows.push((
                fields[0].parse().map_err(|_| parse_err("sample"))?,
                fields[1].parse().map_err(|_| parse_err("exit"))?,
                fields[2].parse().map_err(|_| parse_err("confidence"))?,
                fields[3].parse().map_err(|_| parse_err("label"))?,
            ));
        }
        if rows.is_empty() {
            return Err(MetError::Data("empty confidence profile".into()));
        }
        let n = rows.iter().map(|r| r.0).max().unwrap() + 1;
        let exits = rows.iter().map(|r| r.1).max().unwrap();
        if rows.len() != n * exits {
            return Err(MetError::Data(format!(
                "profile has {} rows, expected {} samples x {} exits",
                rows.len(),
                n,
                exits
            )));
        }
        let mut confidences = vec![f64::NAN; n * exits];
        let mut labels = vec![0usize; n];
        for (sample, exit, conf, label) in rows {
            if exit < 1 || exit > exits || sample >= n {
                return Err(MetError::Data(format!(
                    "profile row ({sample}, {exit}) out of range"
                )));
            }
            confidences[sample * exits + (exit - 1)] = conf;
            labels[sample] = label;
        }
        if confidences.iter().any(|c| c.is_nan()) {
            return Err(MetError::Data(
                "profile is missing (sample, exit) rows".into(),
            ));
        }
        Self::new(n, exits, confidences, labels)
    }
}

/// Geometric exit fractions `f_e = q (1-q)^(e-1)` with the remainder at the
/// last exit; expected cost under those fractions.
fn geometric_expected_cost(q: f64, costs: &[f64]) -> f64 {
    let e = costs.len();
    let mut total = 0.0;
    let mut remaining = 1.0;
    for (idx, &cost) in costs.iter().enumerate().take(e - 1) {
        let f = q * (1.0 - q).powi(idx as i32);
        total += f * cost;
        remaining -= f;
    }
    total + remaining * costs[e - 1]
}

/// Calibrate thresholds against a validation profile so that routing the
/// profile itself consumes at most `budget_mega_macs`.
///
/// Target fractions follow a truncated geometric law `f_e = q (1-q)^(e-1)`;
/// bisection finds the smallest `q` whose expected cost fits the budget,
/// and each threshold is the fraction-quantile (from above) of the
/// confidences among samples still reaching that exit. Quantile ties break
/// toward the smaller threshold, which only moves samples to cheaper exits.
pub fn calibrate_thresholds(
    profile: &ConfidenceProfile,
    table: &CostTable,
    budget_mega_macs: f64,
) -> Result<ThresholdSet> {
    let exits = profile.exits;
    if table.num_exits() != exits {
        return Err(MetError::Config(
            "cost table and profile disagree on exit count".into(),
        ));
    }
    let costs = table.costs_mega_macs();
    if budget_mega_macs < costs[0] {
        return Err(MetError::InfeasibleBudget {
            budget: budget_mega_macs,
            min_cost: costs[0],
        });
    }
    if exits == 1 {
        return Ok(ThresholdSet { thresholds: vec![] });
    }

    // expected cost decreases in q: more mass moves to earlier, cheaper exits
    let q = if budget_mega_macs >= costs[exits - 1] {
        0.0
    } else {
        let mut lo = 0.0f64;
        let mut hi = 1.0f64;
        for _ in 0..64 {
            let mid = 0.5 * (lo + hi);
            if geometric_expected_cost(mid, &costs) <= budget_mega_macs {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        hi
    };

    let mut reaching: Vec<usize> = (0..profile.n).collect();
    let mut thresholds = Vec::with_capacity(exits - 1);
    for e in 1..exits {
        let fraction = q * (1.0 - q).powi(e as i32 - 1);
        let target = (fraction * profile.n as f64).ceil() as usize;
        let tau = if target == 0 || reaching.is_empty() {
            // nothing should leave here; sit just above the highest
            // confidence seen (capped to the valid range)
            let max_conf = reaching
                .iter()
                .map(|&s| profile.confidence_at(s, e))
                .fold(0.0f64, f64::max);
            next_up(max_conf).min(1.0)
        } else if target >= reaching.len() {
            0.0
        } else {
            let mut confs: Vec<f64> = reaching
                .iter()
                .map(|&s| profile.confidence_at(s, e))
                .collect();
            confs.sort_by(|a, b| b.partial_cmp(a).expect("finite confidences"));
            confs[target - 1]
        };
        thresholds.push(tau);
        reaching.retain(|&s| profile.confidence_at(s, e) < tau);
    }
    Ok(ThresholdSet { thresholds })
}

fn next_up(x: f64) -> f64 {
    // smallest f64 strictly above x for finite nonnegative x
    if x == 0.0 {
        f64::MIN_POSITIVE
    } else {
        f64::from_bits(x.to_bits() + 1)
    }
}

/// Mean routed cost of a bare confidence profile (no predictions needed).
pub fn profile_mean_cost(
    profile: &ConfidenceProfile,
    thresholds: &ThresholdSet,
    table: &CostTable,
) -> f64 {
    let exits = profile.exits;
    let costs = table.costs_mega_macs();
    let mut total = 0.0;
    for s in 0..profile.n {
        let mut taken = exits;
        for e in 1..exits {
            if profile.confidence_at(s, e) >= thresholds.thresholds[e - 1] {
                taken = e;
                break;
            }
        }
        total += costs[taken - 1];
    }
    total / profile.n as f64
}
