//! Delta-sensitive subspace identification: activation variance at the hook
//! site, per-dimension ablation scoring against top-1 next-token accuracy,
//! and the seven-bin categorization of the accuracy changes.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SsmError};
use crate::ssm::{Intervention, Model};

/// Variance threshold above which a dimension counts as delta-sensitive.
pub const SENSITIVITY_TAU: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AblationCategory {
    /// delta_pp > 10
    CriticalBeneficial,
    /// (5, 10]
    VeryBeneficial,
    /// (2, 5]
    Beneficial,
    /// (−2, 2]
    Neutral,
    /// (−5, −2]
    SlightlyDetrimental,
    /// (−10, −5]
    Detrimental,
    /// ≤ −10
    CriticalDetrimental,
}

impl AblationCategory {
    pub fn name(self) -> &'static str {
        match self {
            AblationCategory::CriticalBeneficial => "Critical Beneficial",
            AblationCategory::VeryBeneficial => "Very Beneficial",
            AblationCategory::Beneficial => "Beneficial",
            AblationCategory::Neutral => "Neutral",
            AblationCategory::SlightlyDetrimental => "Slightly Detrimental",
            AblationCategory::Detrimental => "Detrimental",
            AblationCategory::CriticalDetrimental => "Critical Detrimental",
        }
    }
}

/// Per-layer sensitivity analysis. delta_pp sign convention: positive means
/// accuracy dropped when the dimension was ablated (the dimension helps).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub layer: usize,
    pub variance: Vec<f64>,
    pub sensitive: Vec<usize>,
    pub tau: f64,
    /// (dim, accuracy change in percentage points, bin)
    pub ablation: Vec<(usize, f64, AblationCategory)>,
}

/// Streaming (Welford) per-dimension variance of the hook-site signal at
/// `layer` over every (sequence, timestep) sample of the corpus.
pub fn record_variances(model: &Model, corpus: &[Vec<usize>], layer: usize) -> Result<Vec<f64>> {
    if corpus.is_empty() {
        return Err(SsmError::EmptyInput("record_variances"));
    }
    if layer >= model.config.n_layers {
        return Err(SsmError::LayerOutOfRange {
            layer,
            n_layers: model.config.n_layers,
        });
    }
    let d = model.hook_width();
    let mut count = 0usize;
    let mut mean = vec![0.0; d];
    let mut m2 = vec![0.0; d];
    for tokens in corpus {
        let fwd = model.forward(tokens, true, None)?;
        let trace = fwd.trace.as_ref().expect("trace requested");
        let acts = &trace.layers[layer].ssm_out;
        for t in 0..acts.shape[0] {
            count += 1;
            for j in 0..d {
                let v = acts.at2(t, j);
                let delta = v - mean[j];
                mean[j] += delta / count as f64;
                m2[j] += delta * (v - mean[j]);
            }
        }
    }
    Ok(m2.iter().map(|&s| s / count as f64).collect())
}

/// {i : variance[i] ≥ tau}, ascending. Ties at tau are included.
pub fn select_sensitive(variances: &[f64], tau: f64) -> Vec<usize> {
    assert!(tau > 0.0, "tau must be positive");
    (0..variances.len())
        .filter(|&i| variances[i] >= tau)
        .collect()
}

/// Top-1 next-token accuracy over all positions with at least one context
/// token, under an optional intervention.
pub fn top1_accuracy(
    model: &Model,
    eval_set: &[Vec<usize>],
    intervention: Option<&Intervention>,
) -> Result<f64> {
    let mut hits = 0usize;
    let mut total = 0usize;
    for tokens in eval_set {
        let logits = model.logits(tokens, intervention)?;
        for t in 0..tokens.len().saturating_sub(1) {
            let row = logits.row(t);
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .expect("nonempty vocab");
            if argmax == tokens[t + 1] {
                hits += 1;
            }
            total += 1;
        }
    }
    if total == 0 {
        return Err(SsmError::EmptyInput("top1_accuracy: no scored positions"));
    }
    Ok(hits as f64 / total as f64)
}

/// delta_pp = 100·(acc_baseline − acc_with_dims_zeroed).
pub fn ablate_and_score(
    model: &Model,
    layer: usize,
    dims: &[usize],
    eval_set: &[Vec<usize>],
) -> Result<f64> {
    let base = top1_accuracy(model, eval_set, None)?;
    if dims.is_empty() {
        return Ok(0.0);
    }
    let iv = Intervention::Ablate {
        layer,
        dims: dims.to_vec(),
    };
    let ablated = top1_accuracy(model, eval_set, Some(&iv))?;
    Ok(100.0 * (base - ablated))
}

/// Table-style bins over half-open intervals (a, b].
pub fn categorize(delta_pp: f64) -> Result<AblationCategory> {
    if delta_pp.is_nan() {
        return Err(SsmError::NonFinite { op: "categorize" });
    }
    Ok(if delta_pp > 10.0 {
        AblationCategory::CriticalBeneficial
    } else if delta_pp > 5.0 {
        AblationCategory::VeryBeneficial
    } else if delta_pp > 2.0 {
        AblationCategory::Beneficial
    } else if delta_pp > -2.0 {
        AblationCategory::Neutral
    } else if delta_pp > -5.0 {
        AblationCategory::SlightlyDetrimental
    } else if delta_pp > -10.0 {
        AblationCategory::Detrimental
    } else {
        AblationCategory::CriticalDetrimental
    })
}

/// Full per-layer pass: variances, threshold, per-sensitive-dim ablation
/// scores, and bins.
pub fn sensitivity_report(
    model: &Model,
    corpus: &[Vec<usize>],
    eval_set: &[Vec<usize>],
    layer: usize,
    tau: f64,
) -> Result<SensitivityReport> {
    let variance = record_variances(model, corpus, layer)?;
    let sensitive = select_sensitive(&variance, tau);
    let mut ablation = Vec::new();
    for &dim in &sensitive {
        let delta_pp = ablate_and_score(model, layer, &[dim], eval_set)?;
        ablation.push((dim, delta_pp, categorize(delta_pp)?));
    }
    Ok(SensitivityReport {
        layer,
        variance,
        sensitive,
        tau,
        ablation,
    })
}
