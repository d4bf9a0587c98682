//! Layer-level activation statistics and diagnostics: spectral entropy and
//! effective rank, gradient sensitivity, post-ablation KL, Gini sparsity,
//! subspace overlap, dead/token/n-gram selectivity scans, temporal variance
//! and cross-layer correlation, induction scoring, and phase classification
//! with bottleneck detection.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsmError};
use crate::ssm::{Intervention, Model};
use crate::tensor::Tensor;

/// Statistics for one layer's activations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricBundle {
    pub layer: usize,
    /// Shannon entropy (nats) of the normalized singular-value spectrum
    pub entropy: f64,
    /// std of all activation entries
    pub variance: f64,
    /// exp(entropy)
    pub effective_rank: f64,
    /// coefficient of variation of per-dimension mean |activation|
    pub cov: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grad_norm: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub kl_post_ablation: Option<f64>,
}

/// Spectral entropy (nats), effective rank, activation spread, and CoV of a
/// T×d activation matrix. All-zero input gives entropy 0 / rank 1.
pub fn layer_metrics(acts: &Tensor, layer: usize) -> Result<MetricBundle> {
    let (t_len, d) = (acts.shape[0], acts.shape[1]);
    if t_len < 2 || d < 2 {
        return Err(SsmError::InvalidConfig(format!(
            "layer_metrics needs T >= 2 and d >= 2, got {t_len}x{d}"
        )));
    }
    acts.check_finite("layer_metrics")?;

    // center each dimension over time
    let mut centered = DMatrix::<f64>::zeros(t_len, d);
    for j in 0..d {
        let mean: f64 = (0..t_len).map(|t| acts.at2(t, j)).sum::<f64>() / t_len as f64;
        for t in 0..t_len {
            centered[(t, j)] = acts.at2(t, j) - mean;
        }
    }
    let sv = centered.svd(false, false).singular_values;
    let total: f64 = sv.iter().sum();
    let entropy = if total <= 1e-300 {
        0.0
    } else {
        -sv.iter()
            .map(|&s| s / total)
            .filter(|&p| p > 0.0)
            .map(|p| p * p.ln())
            .sum::<f64>()
    };
    let effective_rank = entropy.exp();

    let n = acts.len() as f64;
    let mean_all: f64 = acts.data.iter().sum::<f64>() / n;
    let variance = (acts
        .data
        .iter()
        .map(|&v| (v - mean_all) * (v - mean_all))
        .sum::<f64>()
        / n)
        .sqrt();

    let per_dim: Vec<f64> = (0..d)
        .map(|j| (0..t_len).map(|t| acts.at2(t, j).abs()).sum::<f64>() / t_len as f64)
        .collect();
    let pd_mean = per_dim.iter().sum::<f64>() / d as f64;
    let pd_std = (per_dim
        .iter()
        .map(|&v| (v - pd_mean) * (v - pd_mean))
        .sum::<f64>()
        / d as f64)
        .sqrt();
    let cov = if pd_mean.abs() <= 1e-300 {
        0.0
    } else {
        pd_std / pd_mean.abs()
    };

    Ok(MetricBundle {
        layer,
        entropy,
        variance,
        effective_rank,
        cov,
        grad_norm: None,
        kl_post_ablation: None,
    })
}

/// Mean over batch sequences of the L2 norm of ∂loss/∂(dt projection) for
/// one layer, with loss = mean next-token cross-entropy per sequence.
pub fn gradient_sensitivity(model: &Model, layer: usize, batch: &[Vec<usize>]) -> Result<f64> {
    if batch.is_empty() {
        return Err(SsmError::EmptyInput("gradient_sensitivity"));
    }
    let dt_names = [
        format!("layers.{layer}.dt_w"),
        format!("layers.{layer}.dt_b"),
    ];
    let mut acc = 0.0;
    for tokens in batch {
        let mask = vec![true; tokens.len()];
        let mut fwd = model.forward(tokens, false, None)?;
        let loss = model.loss_on(&mut fwd, tokens, &mask)?;
        let grads = model.param_grads(&fwd, loss)?;
        let mut sq = 0.0;
        let mut found = false;
        for (name, g) in &grads {
            if dt_names.contains(name) {
                found = true;
                sq += g.data.iter().map(|&v| v * v).sum::<f64>();
            }
        }
        if !found {
            return Err(SsmError::LayerOutOfRange {
                layer,
                n_layers: model.config.n_layers,
            });
        }
        acc += sq.sqrt();
    }
    Ok(acc / batch.len() as f64)
}

/// Mean KL(p_base ‖ p_ablated) over all next-token positions of the batch,
/// with the listed hook-site dimensions zeroed at `layer`. Empty dims → 0.
pub fn post_ablation_kl(
    model: &Model,
    layer: usize,
    dims: &[usize],
    eval_batch: &[Vec<usize>],
) -> Result<f64> {
    if eval_batch.is_empty() {
        return Err(SsmError::EmptyInput("post_ablation_kl"));
    }
    if dims.is_empty() {
        return Ok(0.0);
    }
    let iv = Intervention::Ablate {
        layer,
        dims: dims.to_vec(),
    };
    let mut acc = 0.0;
    let mut count = 0usize;
    for tokens in eval_batch {
        let base = model.logits(tokens, None)?;
        let abl = model.logits(tokens, Some(&iv))?;
        let v = base.shape[1];
        for t in 0..tokens.len().saturating_sub(1) {
            let p = softmax_row(base.row(t));
            let q = softmax_row(abl.row(t));
            let mut kl = 0.0;
            for j in 0..v {
                if p[j] > 0.0 {
                    kl += p[j] * (p[j] / q[j]).ln();
                }
            }
            acc += kl.max(0.0); // clamp float dust below zero
            count += 1;
        }
    }
    if count == 0 {
        return Err(SsmError::EmptyInput("post_ablation_kl: no scored positions"));
    }
    Ok(acc / count as f64)
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Gini index Σ_i Σ_j |v_i − v_j| / (2 n² mean) of nonnegative values.
pub fn gini_sparsity(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(SsmError::EmptyInput("gini_sparsity"));
    }
    if values.iter().any(|&v| v < 0.0) {
        return Err(SsmError::InvalidConfig(
            "gini_sparsity requires nonnegative values".into(),
        ));
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if mean <= 0.0 {
        return Err(SsmError::InvalidConfig(
            "gini_sparsity undefined for all-zero values".into(),
        ));
    }
    let mut num = 0.0;
    for &a in values {
        for &b in values {
            num += (a - b).abs();
        }
    }
    Ok(num / (2.0 * n * n * mean))
}

/// (|a∩b|/|a∪b|, |a∩b|); both empty → (1, 0) by convention.
pub fn jaccard_overlap(a: &[usize], b: &[usize]) -> (f64, usize) {
    use std::collections::BTreeSet;
    let sa: BTreeSet<usize> = a.iter().cloned().collect();
    let sb: BTreeSet<usize> = b.iter().cloned().collect();
    let inter = sa.intersection(&sb).count();
    let union = sa.union(&sb).count();
    if union == 0 {
        (1.0, 0)
    } else {
        (inter as f64 / union as f64, inter)
    }
}

/// What a selectivity scan looks for.
#[derive(Debug, Clone)]
pub enum Probe {
    /// dims with max |act| < tau_mag_frac·(global max |act|) and firing
    /// frequency (|act| > tau_fire) below tau_freq
    Dead {
        tau_mag_frac: f64,
        tau_fire: f64,
        tau_freq: f64,
    },
    /// dims whose conditional mean on a token clears the unconditional mean
    /// by z ≥ z_min standard errors and that fire on ≥ rho of occurrences
    Token { z_min: f64, rho: f64 },
    /// same, conditioned on an n-gram ending at the position
    Ngram { n: usize, z_min: f64, rho: f64 },
}

impl Probe {
    pub fn dead_default() -> Probe {
        Probe::Dead {
            tau_mag_frac: 0.05,
            tau_fire: 0.05,
            tau_freq: 0.01,
        }
    }

    pub fn token_default() -> Probe {
        Probe::Token { z_min: 6.0, rho: 0.9 }
    }

    pub fn ngram_default(n: usize) -> Probe {
        Probe::Ngram { n, z_min: 6.0, rho: 0.9 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SelectivityReport {
    Dead(Vec<usize>),
    /// (dim, token)
    Token(Vec<(usize, usize)>),
    /// (dim, n-gram)
    Ngram(Vec<(usize, Vec<usize>)>),
}

/// Scan per-dimension activations across a corpus for dead, token-selective,
/// or n-gram-selective dimensions. `acts[i]` is the T_i×d hook-site
/// activation of `tokens[i]`.
pub fn selectivity_scan(
    acts: &[Tensor],
    tokens: &[Vec<usize>],
    probe: &Probe,
) -> Result<SelectivityReport> {
    if acts.is_empty() || acts.len() != tokens.len() {
        return Err(SsmError::EmptyInput("selectivity_scan"));
    }
    let d = acts[0].shape[1];
    match probe {
        Probe::Dead {
            tau_mag_frac,
            tau_fire,
            tau_freq,
        } => {
            let mut max_abs = vec![0.0f64; d];
            let mut fires = vec![0usize; d];
            let mut total = 0usize;
            let mut global_max = 0.0f64;
            for a in acts {
                for t in 0..a.shape[0] {
                    total += 1;
                    for j in 0..d {
                        let v = a.at2(t, j).abs();
                        max_abs[j] = max_abs[j].max(v);
                        global_max = global_max.max(v);
                        if v > *tau_fire {
                            fires[j] += 1;
                        }
                    }
                }
            }
            let mag_cut = tau_mag_frac * global_max;
            let dead = (0..d)
                .filter(|&j| {
                    max_abs[j] < mag_cut && (fires[j] as f64 / total as f64) < *tau_freq
                })
                .collect();
            Ok(SelectivityReport::Dead(dead))
        }
        Probe::Token { z_min, rho } => {
            let found = conditioned_scan(acts, tokens, 1, *z_min, *rho)?;
            Ok(SelectivityReport::Token(
                found.into_iter().map(|(j, g)| (j, g[0])).collect(),
            ))
        }
        Probe::Ngram { n, z_min, rho } => {
            if *n == 0 || *n > 3 {
                return Err(SsmError::InvalidConfig("ngram n must be 1..=3".into()));
            }
            Ok(SelectivityReport::Ngram(conditioned_scan(
                acts, tokens, *n, *z_min, *rho,
            )?))
        }
    }
}

/// Shared machinery for token (n=1) and n-gram probes: for each dim and each
/// observed n-gram, a z-test of the conditional mean against the
/// unconditional one plus a firing-reliability requirement.
fn conditioned_scan(
    acts: &[Tensor],
    tokens: &[Vec<usize>],
    n: usize,
    z_min: f64,
    rho: f64,
) -> Result<Vec<(usize, Vec<usize>)>> {
    use std::collections::HashMap;
    let d = acts[0].shape[1];

    // unconditional stats per dim
    let mut total = 0usize;
    let mut sum = vec![0.0; d];
    let mut sumsq = vec![0.0; d];
    for a in acts {
        for t in 0..a.shape[0] {
            total += 1;
            for j in 0..d {
                let v = a.at2(t, j);
                sum[j] += v;
                sumsq[j] += v * v;
            }
        }
    }
    if total == 0 {
        return Err(SsmError::EmptyInput("selectivity_scan"));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / total as f64).collect();
    let std: Vec<f64> = (0..d)
        .map(|j| (sumsq[j] / total as f64 - mean[j] * mean[j]).max(0.0).sqrt())
        .collect();
    // firing threshold per dim: halfway between unconditional mean and max
    let mut max_act = vec![f64::NEG_INFINITY; d];
    for a in acts {
        for t in 0..a.shape[0] {
            for j in 0..d {
                max_act[j] = max_act[j].max(a.at2(t, j));
            }
        }
    }

    // conditional sums per (n-gram)
    let mut cond: HashMap<Vec<usize>, (usize, Vec<f64>, Vec<usize>)> = HashMap::new();
    for (a, seq) in acts.iter().zip(tokens) {
        for t in 0..a.shape[0].min(seq.len()) {
            if t + 1 < n {
                continue;
            }
            let gram = seq[t + 1 - n..=t].to_vec();
            let entry = cond
                .entry(gram)
                .or_insert_with(|| (0, vec![0.0; d], vec![0usize; d]));
            entry.0 += 1;
            for j in 0..d {
                let v = a.at2(t, j);
                entry.1[j] += v;
                let fire_cut = mean[j] + 0.5 * (max_act[j] - mean[j]);
                if v > fire_cut {
                    entry.2[j] += 1;
                }
            }
        }
    }

    let mut found = Vec::new();
    let mut grams: Vec<&Vec<usize>> = cond.keys().collect();
    grams.sort();
    for gram in grams {
        let (cnt, csum, cfire) = &cond[gram];
        if *cnt < 2 {
            continue;
        }
        for j in 0..d {
            if std[j] <= 0.0 || max_act[j] <= mean[j] {
                continue;
            }
            let cmean = csum[j] / *cnt as f64;
            let z = (cmean - mean[j]) / (std[j] / (*cnt as f64).sqrt());
            let fire_rate = cfire[j] as f64 / *cnt as f64;
            if z >= z_min && fire_rate >= rho {
                found.push((j, gram.clone()));
            }
        }
    }
    found.sort();
    Ok(found)
}

/// Per-layer temporal variance and adjacent-layer Pearson correlation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TemporalDiagnostics {
    /// mean over dims of the variance across time, one per layer
    pub temporal_variance: Vec<f64>,
    /// (mean |r|, max |r|) over all dim pairs of layers (l, l+1)
    pub cross_layer: Vec<(f64, f64)>,
}

/// `layer_acts[l]` is the T×d activation matrix of layer l on one input.
pub fn temporal_diagnostics(layer_acts: &[Tensor]) -> Result<TemporalDiagnostics> {
    if layer_acts.len() < 2 {
        return Err(SsmError::TooFewLayers {
            need: 2,
            got: layer_acts.len(),
        });
    }
    let t_len = layer_acts[0].shape[0];
    if t_len < 2 {
        return Err(SsmError::InvalidConfig(
            "temporal_diagnostics needs T >= 2".into(),
        ));
    }
    let mut temporal_variance = Vec::new();
    for a in layer_acts {
        let d = a.shape[1];
        let mut acc = 0.0;
        for j in 0..d {
            let mean: f64 = (0..t_len).map(|t| a.at2(t, j)).sum::<f64>() / t_len as f64;
            acc += (0..t_len)
                .map(|t| (a.at2(t, j) - mean).powi(2))
                .sum::<f64>()
                / t_len as f64;
        }
        temporal_variance.push(acc / d as f64);
    }

    let mut cross_layer = Vec::new();
    for w in layer_acts.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        let (da, db) = (a.shape[1], b.shape[1]);
        let mut sum_abs = 0.0;
        let mut max_abs = 0.0f64;
        for i in 0..da {
            for j in 0..db {
                let r = pearson(
                    &(0..t_len).map(|t| a.at2(t, i)).collect::<Vec<_>>(),
                    &(0..t_len).map(|t| b.at2(t, j)).collect::<Vec<_>>(),
                );
                sum_abs += r.abs();
                max_abs = max_abs.max(r.abs());
            }
        }
        cross_layer.push((sum_abs / (da * db) as f64, max_abs));
    }
    Ok(TemporalDiagnostics {
        temporal_variance,
        cross_layer,
    })
}

/// Pearson r; 0 when either series is constant.
fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for i in 0..x.len() {
        let dx = x[i] - mx;
        let dy = y[i] - my;
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx <= 0.0 || syy <= 0.0 {
        0.0
    } else {
        sxy / (sxx * syy).sqrt()
    }
}

/// Per-layer mean cosine similarity between recurrent states at matching
/// positions of a twice-repeated input, plus the count of skipped
/// (zero-norm) positions.
pub fn induction_score(model: &Model, base: &[usize]) -> Result<Vec<(f64, usize)>> {
    if base.is_empty() {
        return Err(SsmError::EmptyInput("induction_score"));
    }
    let l = base.len();
    let mut tokens = base.to_vec();
    tokens.extend_from_slice(base);
    let fwd = model.forward(&tokens, true, None)?;
    let trace = fwd.trace.as_ref().expect("trace requested");
    let mut out = Vec::new();
    for lt in &trace.layers {
        let h = &lt.h; // T × d_inner × d_state
        let width = h.shape[1] * h.shape[2];
        let mut acc = 0.0;
        let mut used = 0usize;
        let mut skipped = 0usize;
        for t in 0..l {
            let a = &h.data[t * width..(t + 1) * width];
            let b = &h.data[(t + l) * width..(t + l + 1) * width];
            let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na <= 0.0 || nb <= 0.0 {
                skipped += 1;
                continue;
            }
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            acc += dot / (na * nb);
            used += 1;
        }
        let score = if used == 0 { 0.0 } else { acc / used as f64 };
        out.push((score, skipped));
    }
    Ok(out)
}

/// Contiguous layer ranges labeled with the five operational phases.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseLabel {
    /// [start, end)
    pub range: (usize, usize),
    /// 1–5: pre / pre-compression / bottleneck / decomposition / output
    pub phase: u8,
    pub bottleneck: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phases: Vec<PhaseLabel>,
    pub bottleneck_layer: Option<usize>,
}

pub const THETA_SPIKE: f64 = 0.1;

/// Bottleneck = interior layer maximizing |entropy − mean(neighbors)|,
/// flagged when that deviation exceeds θ_spike (covers both entropy spikes
/// and dips); five contiguous phases are laid out around it.
pub fn classify_phases(entropies: &[f64]) -> Result<PhaseReport> {
    let n = entropies.len();
    if n < 5 {
        return Err(SsmError::TooFewLayers { need: 5, got: n });
    }
    let mut best: Option<(usize, f64)> = None;
    for l in 1..n - 1 {
        let dev = (entropies[l] - 0.5 * (entropies[l - 1] + entropies[l + 1])).abs();
        if best.map_or(true, |(_, b)| dev > b) {
            best = Some((l, dev));
        }
    }
    let (b, dev) = best.expect("n >= 5 has interior layers");
    let bottleneck_layer = (dev > THETA_SPIKE).then_some(b);

    let phases = match bottleneck_layer {
        Some(b) => {
            // pre layers split into phases 1–2, post layers into 4–5
            let p1 = b / 2;
            let post = n - b - 1;
            let p4_end = b + 1 + post.div_ceil(2);
            vec![
                PhaseLabel { range: (0, p1), phase: 1, bottleneck: false },
                PhaseLabel { range: (p1, b), phase: 2, bottleneck: false },
                PhaseLabel { range: (b, b + 1), phase: 3, bottleneck: true },
                PhaseLabel { range: (b + 1, p4_end), phase: 4, bottleneck: false },
                PhaseLabel { range: (p4_end, n), phase: 5, bottleneck: false },
            ]
        }
        None => {
            // no bottleneck: five even contiguous ranges
            (0..5)
                .map(|i| PhaseLabel {
                    range: (i * n / 5, (i + 1) * n / 5),
                    phase: (i + 1) as u8,
                    bottleneck: false,
                })
                .collect()
        }
    };
    Ok(PhaseReport {
        phases,
        bottleneck_layer,
    })
}
