//! Command-line surface for the multiple-exit tuning pipeline.
//!
//! Every subcommand prints a machine-readable JSON document on stdout and
//! returns 0 on success. Argument errors exit with 2 (clap's default); an
//! infeasible compute budget exits with 3.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use met_core::checkpoint::save_checkpoint;
use met_core::data::{generate_synthetic, Dataset, NOISE_SIGMA};
use met_core::infer::{
    anytime_predict, budgeted_route, calibrate_thresholds, evaluate_exits, flops_table,
    profile_mean_cost, ConfidenceProfile,
};
use met_core::multi_exit::{
    count_adapter_params, leading_order_reduction, naive_param_count, ExitPlan, MergeMode, MetModel,
};
use met_core::train::{
    load_backbone_checkpoint, load_trainable_checkpoint, run_training, TrainConfig,
};
use met_core::vit::{BackboneWeights, ViTConfig};
use met_core::MetError;

#[derive(Parser)]
#[command(
    name = "met",
    about = "Multiple-exit adapter tuning for a ViT backbone",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Configuration file: model geometry plus training hyperparameters.
#[derive(Debug, serde::Serialize, serde::Deserialize)]
struct MetConfig {
    model: ViTConfig,
    train: TrainConfig,
}

#[derive(Args, Debug)]
struct ConfigArg {
    /// JSON configuration file (model geometry + training settings).
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args, Debug, Default)]
struct TrainOverrides {
    /// Override the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the graph-regularization weight.
    #[arg(long)]
    alpha: Option<f64>,
    /// Override the adapter bottleneck width d'.
    #[arg(long)]
    dprime: Option<usize>,
    /// Override exit placements, comma-separated 1-based layer indices.
    #[arg(long, value_delimiter = ',')]
    exits: Option<Vec<usize>>,
    /// Feature-merge rule for adapter branches.
    #[arg(long, value_parser = parse_merge_mode)]
    merge_mode: Option<MergeMode>,
    /// Use the shared-representation ablation (one class-token stream).
    #[arg(long)]
    share_token: bool,
    /// Override the learning rate.
    #[arg(long)]
    lr: Option<f64>,
    /// Override the weight decay.
    #[arg(long)]
    weight_decay: Option<f64>,
    /// Override the number of epochs.
    #[arg(long)]
    epochs: Option<usize>,
    /// Override the batch size.
    #[arg(long)]
    batch_size: Option<usize>,
}

fn parse_merge_mode(s: &str) -> std::result::Result<MergeMode, String> {
    s.parse::<MergeMode>().map_err(|e| e.to_string())
}

impl TrainOverrides {
    fn apply(&self, train: &mut TrainConfig) {
        if let Some(seed) = self.seed {
            train.seed = seed;
        }
        if let Some(alpha) = self.alpha {
            train.alpha = alpha;
        }
        if let Some(dprime) = self.dprime {
            train.bottleneck = dprime;
        }
        if let Some(exits) = &self.exits {
            train.exits = Some(exits.clone());
        }
        if let Some(merge) = self.merge_mode {
            train.merge = merge;
        }
        if self.share_token {
            train.share_token = true;
        }
        if let Some(lr) = self.lr {
            train.lr = lr;
        }
        if let Some(wd) = self.weight_decay {
            train.weight_decay = wd;
        }
        if let Some(epochs) = self.epochs {
            train.epochs = epochs;
        }
        if let Some(batch) = self.batch_size {
            train.batch_size = batch;
        }
    }
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Initialize seeded stand-in backbone weights and save them.
    InitBackbone {
        #[command(flatten)]
        config: ConfigArg,
        /// Seed for the weight initializer (defaults to the configured seed).
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for backbone.json / backbone.bin.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a synthetic grating dataset.
    SynthData {
        #[arg(long)]
        seed: u64,
        #[arg(long)]
        classes: usize,
        #[arg(long)]
        per_class: usize,
        #[arg(long)]
        image_size: usize,
        /// Pixel noise standard deviation.
        #[arg(long, default_value_t = NOISE_SIGMA)]
        sigma: f64,
        /// First sample index per class; disjoint ranges under one seed give
        /// train/test splits of the same task.
        #[arg(long, default_value_t = 0)]
        sample_offset: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train adapters and heads on a dataset.
    Tune {
        #[command(flatten)]
        config: ConfigArg,
        /// Training dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Validation dataset directory; a seeded 20% holdout of the
        /// training set when absent.
        #[arg(long)]
        val_data: Option<PathBuf>,
        /// Backbone checkpoint base path (without extension).
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Static single-exit evaluation.
    EvalAnytime {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        backbone: PathBuf,
        /// Trained checkpoint base path (bank + heads).
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Exit to predict from (1-based).
        #[arg(long)]
        exit: usize,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Budgeted dynamic evaluation: calibrate thresholds, then route.
    EvalBudgeted {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Evaluation dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Average compute budget in GFLOPs.
        #[arg(long)]
        budget: f64,
        /// Calibration profile CSV (sample,exit,confidence,label).
        #[arg(long)]
        profile: Option<PathBuf>,
        /// Dataset to derive the calibration profile from when no CSV is
        /// given.
        #[arg(long)]
        val_data: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Calibrate routing thresholds for a budget against a profile.
    Calibrate {
        #[command(flatten)]
        config: ConfigArg,
        /// Average compute budget in GFLOPs.
        #[arg(long)]
        budget: f64,
        #[arg(long)]
        profile: PathBuf,
        /// Optional output path for the thresholds JSON.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Adapter parameter counts for the configured geometry.
    CountParams {
        #[command(flatten)]
        config: ConfigArg,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Per-exit compute cost table.
    Flops {
        #[command(flatten)]
        config: ConfigArg,
        /// Cost the bare backbone (no adapters, single class token).
        #[arg(long)]
        bare: bool,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
    /// Export the per-exit confidence profile of a dataset as CSV.
    ExportProfile {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        backbone: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: TrainOverrides,
    },
}

fn load_config(path: &Path) -> Result<MetConfig> {
    let text = std::fs::read(path).with_context(|| format!("reading config {}", path.display()))?;
    let config: MetConfig = serde_json::from_slice(&text).context("parsing config JSON")?;
    config.model.validate()?;
    Ok(config)
}

fn build_model(
    config: &MetConfig,
    backbone_path: &Path,
    checkpoint: Option<&Path>,
) -> Result<MetModel> {
    let mut backbone = BackboneWeights::seeded(&config.model, 0)?;
    load_backbone_checkpoint(&mut backbone, backbone_path)?;
    let plan = config.train.plan_for(config.model.layers)?;
    let mut model = MetModel::new(
        backbone,
        plan,
        config.train.bottleneck,
        config.train.merge,
        config.train.mask_cross_exit,
        config.train.share_token,
        config.train.seed,
    )?;
    if let Some(base) = checkpoint {
        load_trainable_checkpoint(&mut model, base)?;
    }
    Ok(model)
}

fn run(command: Command) -> Result<serde_json::Value> {
    match command {
        Command::InitBackbone { config, seed, out } => {
            let config = load_config(&config.config)?;
            let seed = seed.unwrap_or(config.train.seed);
            let backbone = BackboneWeights::seeded(&config.model, seed)?;
            std::fs::create_dir_all(&out)?;
            let base = out.join("backbone");
            let named: Vec<(String, &met_core::Tensor)> = backbone
                .params()
                .into_iter()
                .map(|p| (p.name.clone(), &p.tensor))
                .collect();
            save_checkpoint(&named, &base)?;
            let total: usize = backbone.params().iter().map(|p| p.tensor.numel()).sum();
            Ok(serde_json::json!({
                "backbone": base.display().to_string(),
                "seed": seed,
                "parameters": total,
            }))
        }
        Command::SynthData {
            seed,
            classes,
            per_class,
            image_size,
            sigma,
            sample_offset,
            out,
        } => {
            let dataset =
                generate_synthetic(seed, classes, per_class, image_size, sigma, sample_offset)?;
            dataset.save(&out)?;
            Ok(serde_json::json!({
                "dir": out.display().to_string(),
                "samples": dataset.len(),
                "classes": classes,
                "image_size": image_size,
                "seed": seed,
                "sample_offset": sample_offset,
            }))
        }
        Command::Tune {
            config,
            data,
            val_data,
            backbone,
            out,
            overrides,
        } => {
            let mut config = load_config(&config.config)?;
            overrides.apply(&mut config.train);
            let train_full = Dataset::load(&data)?;
            let (train_set, val_set) = match val_data {
                Some(dir) => (train_full, Dataset::load(&dir)?),
                None => train_full.split_holdout(0.2, config.train.seed)?,
            };
            let mut backbone_weights = BackboneWeights::seeded(&config.model, 0)?;
            load_backbone_checkpoint(&mut backbone_weights, &backbone)?;
            let outcome =
                run_training(&config.train, backbone_weights, &train_set, &val_set, &out)?;
            let last = outcome.history.last().expect("training ran");
            Ok(serde_json::json!({
                "out": out.display().to_string(),
                "epochs": outcome.history.len(),
                "best_epoch": outcome.best_epoch,
                "final_train_acc": last.train.exit_acc,
                "final_val_acc": last.val.exit_acc,
                "final_total_loss": last.train.total,
            }))
        }
        Command::EvalAnytime {
            config,
            backbone,
            checkpoint,
            data,
            exit,
            overrides,
        } => {
            let mut config = load_config(&config.config)?;
            overrides.apply(&mut config.train);
            let model = build_model(&config, &backbone, Some(&checkpoint))?;
            let dataset = Dataset::load(&data)?;
            let table = flops_table(&config.model, &model.plan, Some(config.train.bottleneck))?;
            let result = anytime_predict(&model, &dataset, exit, config.train.batch_size, &table)?;
            Ok(serde_json::json!({
                "exit": result.exit,
                "samples": dataset.len(),
                "accuracy": result.accuracy,
                "cost_mega_macs": result.cost_mega_macs,
                "cost_gflops": result.cost_mega_macs / 1e3,
            }))
        }
        Command::EvalBudgeted {
            config,
            backbone,
            checkpoint,
            data,
            budget,
            profile,
            val_data,
            overrides,
        } => {
            let mut config = load_config(&config.config)?;
            overrides.apply(&mut config.train);
            let model = build_model(&config, &backbone, Some(&checkpoint))?;
            let table = flops_table(&config.model, &model.plan, Some(config.train.bottleneck))?;
            let profile = match (profile, val_data) {
                (Some(csv), _) => ConfidenceProfile::load_csv(&csv)?,
                (None, Some(dir)) => {
                    let val = Dataset::load(&dir)?;
                    let evals = evaluate_exits(&model, &val, config.train.batch_size)?;
                    ConfidenceProfile::from_evaluations(&evals)?
                }
                (None, None) => anyhow::bail!("eval-budgeted needs --profile or --val-data"),
            };
            let budget_mega = budget * 1e3;
            let thresholds = calibrate_thresholds(&profile, &table, budget_mega)?;
            let dataset = Dataset::load(&data)?;
            let evals = evaluate_exits(&model, &dataset, config.train.batch_size)?;
            let routed = budgeted_route(&evals, &thresholds, &table)?;
            Ok(serde_json::json!({
                "budget_gflops": budget,
                "thresholds": thresholds.thresholds,
                "accuracy": routed.accuracy,
                "mean_cost_gflops": routed.mean_cost_mega_macs / 1e3,
                "exit_fractions": routed.exit_fractions,
                "exit_counts": routed.exit_counts,
                "calibration_mean_cost_gflops": profile_mean_cost(&profile, &thresholds, &table) / 1e3,
            }))
        }
        Command::Calibrate {
            config,
            budget,
            profile,
            out,
            overrides,
        } => {
            let mut config = load_config(&config.config)?;
            overrides.apply(&mut config.train);
            let plan = config.train.plan_for(config.model.layers)?;
            let table = flops_table(&config.model, &plan, Some(config.train.bottleneck))?;
            let profile = ConfidenceProfile::load_csv(&profile)?;
            let budget_mega = budget * 1e3;
            let thresholds = calibrate_thresholds(&profile, &table, budget_mega)?;
            let doc = serde_json::json!({
                "budget_gflops": budget,
                "thresholds": thresholds.thresholds,
                "calibration_mean_cost_gflops": profile_mean_cost(&profile, &thresholds, &table) / 1e3,
                "exit_costs_gflops": (1..=table.num_exits()).map(|e| table.gflops(e)).collect::<Vec<_>>(),
            });
            if let Some(path) = out {
                std::fs::write(&path, serde_json::to_vec_pretty(&doc)?)?;
            }
            Ok(doc)
        }
        Command::CountParams { config, overrides } => {
            let mut config = load_config(&config.config)?;
            overrides.apply(&mut config.train);
            let plan = config.train.plan_for(config.model.layers)?;
            let count = count_adapter_params(
                config.model.dim,
                config.train.bottleneck,
                config.model.layers,
                &plan,
            );
            let naive = naive_param_count(
                config.model.dim,
                config.train.bottleneck,
                config.model.layers,
            );
            Ok(serde_json::json!({
                "shared": count.shared,
                "transforms": count.transforms,
                "diagonals": count.diagonals,
                "total": count.total,
                "naive": naive,
                "leading_order_reduction_percent": 100.0 * leading_order_reduction(config.model.layers),
            }))
        }
        Command::Flops {
            config,
            bare,
            overrides,
        } => {
            let mut config = load_config(&config.config)?;
            overrides.apply(&mut config.train);
            let plan = if bare {
                ExitPlan::last_layers(1, config.model.layers)?
            } else {
                config.train.plan_for(config.model.layers)?
            };
            let bottleneck = if bare {
                None
            } else {
                Some(config.train.bottleneck)
            };
            let table = flops_table(&config.model, &plan, bottleneck)?;
            let exits: Vec<serde_json::Value> = (1..=table.num_exits())
                .map(|e| {
                    serde_json::json!({
                        "exit": e,
                        "layer": table.placements[e - 1],
                        "mega_macs": table.mega_macs(e),
                        "gflops": table.gflops(e),
                        "breakdown": table.breakdown[e - 1],
                    })
                })
                .collect();
            Ok(serde_json::json!({
                "bare": bare,
                "exits": exits,
                "baseline_gflops": met_core::infer::baseline_macs(&config.model)? as f64 / 1e9,
            }))
        }
        Command::ExportProfile {
            config,
            backbone,
            checkpoint,
            data,
            out,
            overrides,
        } => {
            let mut config = load_config(&config.config)?;
            overrides.apply(&mut config.train);
            let model = build_model(&config, &backbone, Some(&checkpoint))?;
            let dataset = Dataset::load(&data)?;
            let evals = evaluate_exits(&model, &dataset, config.train.batch_size)?;
            let profile = ConfidenceProfile::from_evaluations(&evals)?;
            profile.save_csv(&out)?;
            Ok(serde_json::json!({
                "out": out.display().to_string(),
                "samples": profile.n,
                "exits": profile.exits,
                "exit_accuracies": evals.exit_accuracies(),
            }))
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(doc) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&doc).expect("serializable output")
            );
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("error: {err:#}");
            let infeasible = err.chain().any(|c| {
                matches!(
                    c.downcast_ref::<MetError>(),
                    Some(MetError::InfeasibleBudget { .. })
                )
            });
            if infeasible {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
