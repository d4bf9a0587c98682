//! Command-line front door: a JSON run configuration with a `command` field,
//! flag/env overrides, and per-command pipelines that emit deterministic
//! artifacts (manifest.json, metrics.json, CSV series).
//!
//! Exit codes: 0 success, 2 configuration error, 3 runtime failure,
//! 4 acceptance-check failure.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analytics::{classify_phases, layer_metrics, MetricBundle, PhaseReport};
use crate::attention::{
    averaged_influence, importance_vector, magnitude_ratio, ssm_attention,
    InfluenceVariant,
};
use crate::checkpoint;
use crate::error::SsmError;
use crate::report::{write_csv, write_json, Manifest};
use crate::sae::{sae_metrics, train_sae, SAEConfig, SaeMetrics};
use crate::sensitivity::{sensitivity_report, SensitivityReport, SENSITIVITY_TAU};
use crate::ssm::{Arch, Model, ModelConfig};
use crate::steering::{
    apply_steering, assign_policy, grid_search, scale_template, GridSearchResult,
    SteeringSpec, DEFAULT_GRID,
};
use crate::tasks::{
    evaluate_with, generate_task, perturb_ppl, records_from_ndjson, records_to_ndjson,
    train, EvalReport, TaskRecord, TaskSpec,
};
use crate::tensor::Tensor;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_RUNTIME: i32 = 3;
pub const EXIT_CHECK: i32 = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CliErrorKind {
    Config,
    Runtime,
    Check,
}

#[derive(Debug)]
pub struct CliError {
    pub kind: CliErrorKind,
    pub message: String,
}

impl CliError {
    pub fn config(msg: impl Into<String>) -> Self {
        CliError {
            kind: CliErrorKind::Config,
            message: msg.into(),
        }
    }

    pub fn check(msg: impl Into<String>) -> Self {
        CliError {
            kind: CliErrorKind::Check,
            message: msg.into(),
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self.kind {
            CliErrorKind::Config => EXIT_CONFIG,
            CliErrorKind::Runtime => EXIT_RUNTIME,
            CliErrorKind::Check => EXIT_CHECK,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.message)
    }
}

impl From<SsmError> for CliError {
    fn from(e: SsmError) -> Self {
        CliError {
            kind: CliErrorKind::Runtime,
            message: e.to_string(),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CommandName {
    Train,
    Analyze,
    Ablate,
    Steer,
    Sae,
    DumpAttention,
    Compare,
}

impl fmt::Display for CommandName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            CommandName::Train => "train",
            CommandName::Analyze => "analyze",
            CommandName::Ablate => "ablate",
            CommandName::Steer => "steer",
            CommandName::Sae => "sae",
            CommandName::DumpAttention => "dump-attention",
            CommandName::Compare => "compare",
        };
        f.write_str(s)
    }
}

/// Model shape for `train`; the run seed supplies ModelConfig::seed.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub n_layers: usize,
    pub arch: Arch,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOpts {
    pub steps: usize,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisOpts {
    /// layer tap; defaults to the last layer
    pub layer: Option<usize>,
    /// variance threshold; defaults to 0.01
    pub tau: Option<f64>,
    /// head size for Eq. 1 averaging; defaults to 1
    pub head_size: Option<usize>,
    /// compare: exit 4 when the steered accuracy regresses below baseline
    pub require_no_regression: Option<bool>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SaeOpts {
    pub l1_weight: Option<f64>,
    pub steps: Option<usize>,
    pub lr: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub command: CommandName,
    #[serde(default)]
    pub seed: u64,
    pub out_dir: PathBuf,
    /// input model for every command except `train`
    pub checkpoint: Option<PathBuf>,
    pub model: Option<ModelSpec>,
    pub task: Option<TaskSpec>,
    /// NDJSON task records; takes precedence over generating from `task`
    pub eval_data: Option<PathBuf>,
    pub train: Option<TrainOpts>,
    pub analysis: Option<AnalysisOpts>,
    /// SteeringSpec JSON path for `steer`/`compare`
    pub steering_spec: Option<PathBuf>,
    pub sae: Option<SaeOpts>,
}

#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
}

pub fn load_config(path: &Path) -> CliResult<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::config(format!("cannot read config {path:?}: {e}")))?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("invalid config {path:?}: {e}")))
}

/// Entry point used by the binary: loads the config, applies overrides
/// (env SSMLAB_SEED > --seed flag > file), and dispatches the command.
pub fn run(command: CommandName, config_path: &Path, overrides: &Overrides) -> CliResult<()> {
    let mut config = load_config(config_path)?;
    if config.command != command {
        return Err(CliError::config(format!(
            "config declares command {}, but {} was invoked",
            config.command, command
        )));
    }
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    if let Ok(env_seed) = std::env::var("SSMLAB_SEED") {
        config.seed = env_seed
            .parse()
            .map_err(|_| CliError::config(format!("SSMLAB_SEED {env_seed:?} is not a u64")))?;
    }
    if let Some(dir) = &overrides.out_dir {
        config.out_dir = dir.clone();
    }
    std::fs::create_dir_all(&config.out_dir).map_err(SsmError::from)?;

    let mut manifest = Manifest::new(&command.to_string(), config.seed);
    manifest.record_input("config.json", config_path)?;

    match command {
        CommandName::Train => cmd_train(&config, &mut manifest),
        CommandName::Analyze => cmd_analyze(&config, &mut manifest),
        CommandName::Ablate => cmd_ablate(&config, &mut manifest),
        CommandName::Steer => cmd_steer(&config, &mut manifest),
        CommandName::Sae => cmd_sae(&config, &mut manifest),
        CommandName::DumpAttention => cmd_dump_attention(&config, &mut manifest),
        CommandName::Compare => cmd_compare(&config, &mut manifest),
    }
}

fn load_checkpoint(config: &RunConfig, manifest: &mut Manifest) -> CliResult<Model> {
    let path = config
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::config("this command requires a `checkpoint` path"))?;
    manifest.record_input("checkpoint", path)?;
    Ok(checkpoint::load(path)?)
}

/// Eval records from `eval_data` NDJSON if given, else generated from the
/// task spec.
fn eval_records(config: &RunConfig, manifest: &mut Manifest) -> CliResult<Vec<TaskRecord>> {
    if let Some(path) = &config.eval_data {
        manifest.record_input("eval_data", path)?;
        let text = std::fs::read_to_string(path).map_err(SsmError::from)?;
        return Ok(records_from_ndjson(&text)?);
    }
    let task = config
        .task
        .as_ref()
        .ok_or_else(|| CliError::config("need either `eval_data` or a `task` spec"))?;
    let (_, eval_set) = generate_task(task)?;
    Ok(eval_set)
}

fn finish(
    manifest: &mut Manifest,
    out_dir: &Path,
    outputs: &[&str],
) -> CliResult<()> {
    for name in outputs {
        manifest.record_output(name, &out_dir.join(name))?;
    }
    manifest.write(out_dir)?;
    Ok(())
}

#[derive(Serialize)]
struct ScorePair {
    top1_acc: f64,
    perplexity: f64,
}

fn score(model: &Model, eval: &[TaskRecord]) -> CliResult<ScorePair> {
    let report = crate::tasks::evaluate(model, eval)?;
    Ok(ScorePair {
        top1_acc: report.top1_acc,
        perplexity: report.perplexity,
    })
}

#[derive(Serialize)]
struct TrainMetrics {
    command: &'static str,
    seed: u64,
    steps: usize,
    lr: f64,
    final_loss_window_mean: f64,
    eval: EvalReport,
}

fn cmd_train(config: &RunConfig, manifest: &mut Manifest) -> CliResult<()> {
    let spec = config
        .model
        .as_ref()
        .ok_or_else(|| CliError::config("train requires a `model` spec"))?;
    let task = config
        .task
        .as_ref()
        .ok_or_else(|| CliError::config("train requires a `task` spec"))?;
    let opts = config
        .train
        .as_ref()
        .ok_or_else(|| CliError::config("train requires a `train` options block"))?;

    let model_config = ModelConfig {
        vocab_size: spec.vocab_size,
        d_model: spec.d_model,
        d_inner: spec.d_inner,
        d_state: spec.d_state,
        d_conv: spec.d_conv,
        n_layers: spec.n_layers,
        seed: config.seed,
    };
    let mut model = Model::new(model_config, spec.arch)?;
    let (train_set, eval_set) = generate_task(task)?;
    let out = &config.out_dir;
    std::fs::write(out.join("train.ndjson"), records_to_ndjson(&train_set)?)
        .map_err(SsmError::from)?;
    std::fs::write(out.join("eval.ndjson"), records_to_ndjson(&eval_set)?)
        .map_err(SsmError::from)?;

    let curve = train(&mut model, &train_set, opts.steps, opts.lr, config.seed)?;
    checkpoint::save(&model, &out.join("checkpoint.ssmb"))?;
    let rows: Vec<Vec<String>> = curve
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i.to_string(), l.to_string()])
        .collect();
    write_csv(&out.join("loss_curve.csv"), &["step", "loss"], &rows)?;

    let window = curve.len().min(50).max(1);
    let final_loss_window_mean = if curve.is_empty() {
        f64::NAN
    } else {
        curve[curve.len() - window..].iter().sum::<f64>() / window as f64
    };
    let eval = crate::tasks::evaluate(&model, &eval_set)?;
    write_json(
        &out.join("metrics.json"),
        &TrainMetrics {
            command: "train",
            seed: config.seed,
            steps: opts.steps,
            lr: opts.lr,
            final_loss_window_mean,
            eval,
        },
    )?;
    finish(
        manifest,
        out,
        &[
            "train.ndjson",
            "eval.ndjson",
            "checkpoint.ssmb",
            "loss_curve.csv",
            "metrics.json",
        ],
    )
}

#[derive(Serialize)]
struct AnalyzeMetrics {
    command: &'static str,
    per_layer: Vec<MetricBundle>,
    phase_report: Option<PhaseReport>,
}

/// Concatenates the hook-site activations of every eval sequence at `layer`.
fn stacked_acts(model: &Model, eval: &[TaskRecord], layer: usize) -> CliResult<Tensor> {
    let d = model.hook_width();
    let mut data = Vec::new();
    let mut rows = 0;
    for rec in eval {
        let fwd = model.forward(&rec.tokens, true, None)?;
        let trace = fwd.trace.ok_or(SsmError::MissingTrace(layer))?;
        let acts = &trace.layers[layer].ssm_out;
        data.extend_from_slice(&acts.data);
        rows += acts.shape[0];
    }
    Ok(Tensor::new(vec![rows, d], data))
}

fn cmd_analyze(config: &RunConfig, manifest: &mut Manifest) -> CliResult<()> {
    let model = load_checkpoint(config, manifest)?;
    let eval = eval_records(config, manifest)?;
    let out = &config.out_dir;

    let mut per_layer = Vec::new();
    for layer in 0..model.n_layers() {
        let acts = stacked_acts(&model, &eval, layer)?;
        per_layer.push(layer_metrics(&acts, layer)?);
    }
    let rows: Vec<Vec<String>> = per_layer
        .iter()
        .map(|m| {
            vec![
                m.layer.to_string(),
                m.entropy.to_string(),
                m.effective_rank.to_string(),
                m.variance.to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join("entropy_per_layer.csv"),
        &["layer", "entropy", "effective_rank", "variance"],
        &rows,
    )?;

    let entropies: Vec<f64> = per_layer.iter().map(|m| m.entropy).collect();
    let phase_report = if entropies.len() >= 5 {
        Some(classify_phases(&entropies)?)
    } else {
        None
    };
    write_json(
        &out.join("metrics.json"),
        &AnalyzeMetrics {
            command: "analyze",
            per_layer,
            phase_report,
        },
    )?;
    finish(manifest, out, &["entropy_per_layer.csv", "metrics.json"])
}

#[derive(Serialize)]
struct AblateMetrics {
    command: &'static str,
    layer: usize,
    tau: f64,
    n_sensitive: usize,
    bin_counts: BTreeMap<String, usize>,
}

fn cmd_ablate(config: &RunConfig, manifest: &mut Manifest) -> CliResult<()> {
    let model = load_checkpoint(config, manifest)?;
    let eval = eval_records(config, manifest)?;
    let analysis = config.analysis.clone().unwrap_or_default();
    let layer = analysis.layer.unwrap_or(model.n_layers() - 1);
    let tau = analysis.tau.unwrap_or(SENSITIVITY_TAU);
    let out = &config.out_dir;

    let tokens: Vec<Vec<usize>> = eval.iter().map(|r| r.tokens.clone()).collect();
    let report: SensitivityReport = sensitivity_report(&model, &tokens, &tokens, layer, tau)?;
    write_json(&out.join("sensitivity_report.json"), &report)?;

    let spec = if report.ablation.is_empty() {
        SteeringSpec::identity(layer)
    } else {
        assign_policy(&report)?
    };
    write_json(&out.join("steering_spec.json"), &spec)?;

    let mut bin_counts = BTreeMap::new();
    for (_, _, cat) in &report.ablation {
        *bin_counts.entry(cat.name().to_string()).or_insert(0) += 1;
    }
    write_json(
        &out.join("metrics.json"),
        &AblateMetrics {
            command: "ablate",
            layer,
            tau,
            n_sensitive: report.sensitive.len(),
            bin_counts,
        },
    )?;
    finish(
        manifest,
        out,
        &["sensitivity_report.json", "steering_spec.json", "metrics.json"],
    )
}

#[derive(Serialize)]
struct SteerMetrics {
    command: &'static str,
    before: ScorePair,
    after: ScorePair,
    grid: GridSearchResult,
}

fn read_spec(config: &RunConfig, manifest: &mut Manifest) -> CliResult<SteeringSpec> {
    let path = config
        .steering_spec
        .as_ref()
        .ok_or_else(|| CliError::config("this command requires a `steering_spec` path"))?;
    manifest.record_input("steering_spec", path)?;
    let text = std::fs::read_to_string(path).map_err(SsmError::from)?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::config(format!("invalid steering spec {path:?}: {e}")))
}

fn cmd_steer(config: &RunConfig, manifest: &mut Manifest) -> CliResult<()> {
    let model = load_checkpoint(config, manifest)?;
    let eval = eval_records(config, manifest)?;
    let template = read_spec(config, manifest)?;
    template
        .validate(&model)
        .map_err(|e| CliError::config(e.to_string()))?;
    let out = &config.out_dir;

    let tuning: Vec<Vec<usize>> = eval.iter().map(|r| r.tokens.clone()).collect();
    let grid = grid_search(&model, &template, &DEFAULT_GRID, &tuning)?;
    let best_spec = scale_template(&template, grid.best);
    write_json(&out.join("steering_spec.json"), &best_spec)?;

    let before = score(&model, &eval)?;
    let steered = apply_steering(&model, &best_spec)?;
    let after_report = evaluate_with(|t| steered(t), &eval)?;
    let after = ScorePair {
        top1_acc: after_report.top1_acc,
        perplexity: after_report.perplexity,
    };
    write_json(
        &out.join("metrics.json"),
        &SteerMetrics {
            command: "steer",
            before,
            after,
            grid,
        },
    )?;
    finish(manifest, out, &["steering_spec.json", "metrics.json"])
}

#[derive(Serialize)]
struct SaeRunMetrics {
    command: &'static str,
    layer: usize,
    config: SAEConfig,
    metrics: SaeMetrics,
    final_loss: f64,
}

fn cmd_sae(config: &RunConfig, manifest: &mut Manifest) -> CliResult<()> {
    let model = load_checkpoint(config, manifest)?;
    let eval = eval_records(config, manifest)?;
    let analysis = config.analysis.clone().unwrap_or_default();
    let layer = analysis.layer.unwrap_or(model.n_layers() - 1);
    let out = &config.out_dir;

    let acts = stacked_acts(&model, &eval, layer)?;
    let mut sae_config = SAEConfig::scaled_for(model.hook_width());
    sae_config.seed = config.seed;
    if let Some(opts) = &config.sae {
        if let Some(l1) = opts.l1_weight {
            sae_config.l1_weight = l1;
        }
        if let Some(steps) = opts.steps {
            sae_config.steps = steps;
        }
        if let Some(lr) = opts.lr {
            sae_config.lr = lr;
        }
    }
    let (sae, curve) = train_sae(&acts, sae_config.clone())?;
    let rows: Vec<Vec<String>> = curve
        .iter()
        .enumerate()
        .map(|(i, l)| vec![i.to_string(), l.to_string()])
        .collect();
    write_csv(&out.join("sae_loss_curve.csv"), &["step", "loss"], &rows)?;

    let latents = sae.encode(&acts)?;
    let recon = sae.reconstruction_error(&acts)?;
    let metrics = sae_metrics(&latents, recon)?;
    write_json(
        &out.join("metrics.json"),
        &SaeRunMetrics {
            command: "sae",
            layer,
            config: sae_config,
            metrics,
            final_loss: curve.last().copied().unwrap_or(f64::NAN),
        },
    )?;
    finish(manifest, out, &["sae_loss_curve.csv", "metrics.json"])
}

#[derive(Serialize)]
struct AttentionMetrics {
    command: &'static str,
    layer: usize,
    t_len: usize,
    magnitude_ratio_last: f64,
}

fn cmd_dump_attention(config: &RunConfig, manifest: &mut Manifest) -> CliResult<()> {
    let model = load_checkpoint(config, manifest)?;
    let eval = eval_records(config, manifest)?;
    let analysis = config.analysis.clone().unwrap_or_default();
    let layer = analysis.layer.unwrap_or(model.n_layers() - 1);
    let head_size = analysis.head_size.unwrap_or(1);
    let out = &config.out_dir;

    let rec = eval
        .first()
        .ok_or_else(|| CliError::config("dump-attention needs a nonempty eval set"))?;
    let fwd = model.forward(&rec.tokens, true, None)?;
    let trace = fwd.trace.ok_or(SsmError::MissingTrace(layer))?;
    let map = ssm_attention(&model, &trace, layer)?;
    let averaged = averaged_influence(&map, head_size, InfluenceVariant::Both)?;
    let t_len = averaged.shape[0];
    let rows: Vec<Vec<String>> = (0..t_len)
        .map(|t| averaged.row(t).iter().map(|v| v.to_string()).collect())
        .collect();
    let headers: Vec<String> = (0..t_len).map(|s| format!("s{s}")).collect();
    let header_refs: Vec<&str> = headers.iter().map(|s| s.as_str()).collect();
    write_csv(&out.join("attention.csv"), &header_refs, &rows)?;

    let (weights, importance) = importance_vector(&averaged)?;
    let imp_rows: Vec<Vec<String>> = (0..t_len)
        .map(|t| {
            vec![
                t.to_string(),
                weights[t].to_string(),
                importance[t].to_string(),
            ]
        })
        .collect();
    write_csv(
        &out.join("importance.csv"),
        &["position", "weight", "importance"],
        &imp_rows,
    )?;

    write_json(
        &out.join("metrics.json"),
        &AttentionMetrics {
            command: "dump-attention",
            layer,
            t_len,
            magnitude_ratio_last: magnitude_ratio(&map, t_len - 1),
        },
    )?;
    finish(
        manifest,
        out,
        &["attention.csv", "importance.csv", "metrics.json"],
    )
}

#[derive(Serialize)]
struct CompareMetrics {
    command: &'static str,
    baseline: ScorePair,
    steered: ScorePair,
    delta_acc_pp: f64,
    delta_ppl: f64,
    ablated_ppl: f64,
}

fn cmd_compare(config: &RunConfig, manifest: &mut Manifest) -> CliResult<()> {
    let model = load_checkpoint(config, manifest)?;
    let eval = eval_records(config, manifest)?;
    let spec = read_spec(config, manifest)?;
    spec.validate(&model)
        .map_err(|e| CliError::config(e.to_string()))?;
    let out = &config.out_dir;

    let baseline = score(&model, &eval)?;
    let steered_fn = apply_steering(&model, &spec)?;
    let steered_report = evaluate_with(|t| steered_fn(t), &eval)?;
    let steered = ScorePair {
        top1_acc: steered_report.top1_acc,
        perplexity: steered_report.perplexity,
    };
    let dims: Vec<usize> = spec.factors.keys().copied().collect();
    let (_, ablated_ppl) = perturb_ppl(&model, spec.layer, &dims, &eval)?;

    let rows = vec![
        vec![
            "baseline".to_string(),
            baseline.top1_acc.to_string(),
            baseline.perplexity.to_string(),
        ],
        vec![
            "steered".to_string(),
            steered.top1_acc.to_string(),
            steered.perplexity.to_string(),
        ],
    ];
    write_csv(
        &out.join("comparison.csv"),
        &["variant", "top1_acc", "perplexity"],
        &rows,
    )?;

    let metrics = CompareMetrics {
        command: "compare",
        delta_acc_pp: 100.0 * (steered.top1_acc - baseline.top1_acc),
        delta_ppl: steered.perplexity - baseline.perplexity,
        ablated_ppl,
        baseline,
        steered,
    };
    let regressed = metrics.delta_acc_pp < 0.0;
    write_json(&out.join("metrics.json"), &metrics)?;
    finish(manifest, out, &["comparison.csv", "metrics.json"])?;

    let analysis = config.analysis.clone().unwrap_or_default();
    if analysis.require_no_regression.unwrap_or(false) && regressed {
        return Err(CliError::check(format!(
            "steered accuracy regressed by {:.3} pp",
            -metrics.delta_acc_pp
        )));
    }
    Ok(())
}
