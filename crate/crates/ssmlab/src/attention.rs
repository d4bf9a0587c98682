//! Implicit attention extracted from the selective scan: unrolling the
//! recurrence expresses each output as a weighted sum over past inputs, and
//! those weights form per-channel strictly causal attention matrices. From
//! them: the averaged token-to-token influence matrix, the token importance
//! vector, and the activation-subspace vector.

use crate::error::{Result, SsmError};
use crate::ssm::{ActivationTrace, Model};
use crate::tensor::Tensor;

/// Per-channel implicit attention for one layer.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    /// d_inner × T × T, zero above the diagonal
    pub alpha: Tensor,
    pub layer: usize,
}

/// Token importance and the activation subspace derived from it.
#[derive(Debug, Clone)]
pub struct SubspaceVector {
    /// raw row means of the influence matrix, length T
    pub w: Vec<f64>,
    /// min-max normalized to [0, 1], length T
    pub w_norm: Vec<f64>,
    /// Σ_t w_norm[t]·h_t, length = width of the tapped site
    pub v: Tensor,
}

/// History term H_{t,s} = exp(a·Σ_{k=s+1}^{t} Δ_k): the product of state
/// transitions between emission at s and readout at t. 1 when s = t.
pub fn history_term(a: f64, delta_channel: &[f64], t: usize, s: usize) -> f64 {
    debug_assert!(s <= t);
    let acc: f64 = delta_channel[s + 1..=t].iter().sum();
    (a * acc).exp()
}

/// α[m,t,s] = Δ_s[m] · Σ_n C_t[n] · H_{t,s}^{(m,n)} · B_s[n] for s ≤ t,
/// zero otherwise, from raw (Δ, B, C, A_log) tensors.
pub fn attention_from_parts(
    a_log: &Tensor,
    delta: &Tensor,
    b: &Tensor,
    c: &Tensor,
) -> Result<Tensor> {
    let (t_len, d_inner) = (delta.shape[0], delta.shape[1]);
    let d_state = a_log.shape[1];
    if b.shape != vec![t_len, d_state] || c.shape != vec![t_len, d_state] {
        return Err(SsmError::ShapeMismatch {
            op: "attention_from_parts",
            lhs: b.shape.clone(),
            rhs: c.shape.clone(),
        });
    }
    let mut alpha = Tensor::zeros(&[d_inner, t_len, t_len]);
    // cumulative Δ per channel so H is O(1) per entry
    let mut cum = vec![0.0; t_len + 1];
    for m in 0..d_inner {
        for t in 0..t_len {
            cum[t + 1] = cum[t] + delta.at2(t, m);
        }
        for n in 0..d_state {
            let a = -a_log.at2(m, n).exp();
            for t in 0..t_len {
                let ct = c.at2(t, n);
                for s in 0..=t {
                    // Σ_{k=s+1}^{t} Δ_k
                    let h = (a * (cum[t + 1] - cum[s + 1])).exp();
                    let v = delta.at2(s, m) * ct * h * b.at2(s, n);
                    alpha.set3(m, t, s, alpha.at3(m, t, s) + v);
                }
            }
        }
    }
    alpha.check_finite("attention_from_parts")?;
    Ok(alpha)
}

/// Implicit attention for a traced layer of a vanilla model.
pub fn ssm_attention(
    model: &Model,
    trace: &ActivationTrace,
    layer: usize,
) -> Result<AttentionMap> {
    let lt = trace
        .layers
        .get(layer)
        .ok_or(SsmError::MissingTrace(layer))?;
    let params = model.vanilla_layer(layer)?;
    let alpha = attention_from_parts(&params.a_log, &lt.delta, &lt.b, &lt.c)?;
    Ok(AttentionMap { alpha, layer })
}

/// Which matrix variant feeds the Eq. 1 average.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InfluenceVariant {
    Raw,
    Abs,
    /// 1/(2H)·Σ_h (raw_h + |raw|_h)
    Both,
}

/// Plain arithmetic mean of equally shaped head matrices.
pub fn average_heads(heads: &[Tensor]) -> Result<Tensor> {
    let first = heads.first().ok_or(SsmError::EmptyInput("average_heads"))?;
    let mut out = Tensor::zeros(&first.shape);
    for h in heads {
        if h.shape != first.shape {
            return Err(SsmError::ShapeMismatch {
                op: "average_heads",
                lhs: first.shape.clone(),
                rhs: h.shape.clone(),
            });
        }
        for i in 0..out.len() {
            out.data[i] += h.data[i];
        }
    }
    let n = heads.len() as f64;
    for v in &mut out.data {
        *v /= n;
    }
    Ok(out)
}

/// Token-to-token influence matrix: channels grouped into heads of
/// `head_size` (mean within a group), then averaged across heads and, for
/// `Both`, across the raw/abs variants with the 1/(2H) factor.
pub fn averaged_influence(
    map: &AttentionMap,
    head_size: usize,
    variant: InfluenceVariant,
) -> Result<Tensor> {
    let d_inner = map.alpha.shape[0];
    let t_len = map.alpha.shape[1];
    if head_size == 0 {
        return Err(SsmError::InvalidConfig("head_size must be positive".into()));
    }
    let mut heads = Vec::new();
    let mut g = 0;
    while g < d_inner {
        let hi = (g + head_size).min(d_inner);
        let mut h = Tensor::zeros(&[t_len, t_len]);
        for m in g..hi {
            for t in 0..t_len {
                for s in 0..t_len {
                    h.set2(t, s, h.at2(t, s) + map.alpha.at3(m, t, s));
                }
            }
        }
        for v in &mut h.data {
            *v /= (hi - g) as f64;
        }
        heads.push(h);
        g = hi;
    }
    let collected: Vec<Tensor> = match variant {
        InfluenceVariant::Raw => heads,
        InfluenceVariant::Abs => heads.iter().map(|h| h.map(f64::abs)).collect(),
        InfluenceVariant::Both => {
            let mut all = Vec::with_capacity(2 * heads.len());
            for h in &heads {
                all.push(h.clone());
            }
            for h in &heads {
                all.push(h.map(f64::abs));
            }
            all
        }
    };
    average_heads(&collected)
}

/// w[i] = row mean of A; w_norm = (w − min)/(max − min), all ones when
/// degenerate (constant w carries no ordering, so every token weighs fully).
pub fn importance_vector(a: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    if a.is_empty() {
        return Err(SsmError::EmptyInput("importance_vector"));
    }
    let t_len = a.shape[0];
    assert_eq!(a.shape, vec![t_len, t_len], "influence matrix must be square");
    let w: Vec<f64> = (0..t_len)
        .map(|i| a.row(i).iter().sum::<f64>() / t_len as f64)
        .collect();
    let lo = w.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = w.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w_norm = if hi - lo <= 0.0 {
        vec![1.0; t_len]
    } else {
        w.iter().map(|&v| (v - lo) / (hi - lo)).collect()
    };
    Ok((w, w_norm))
}

/// v = Σ_t w_norm[t]·h_t.
pub fn activation_subspace(w_norm: &[f64], h: &Tensor) -> Result<Tensor> {
    let (t_len, d) = (h.shape[0], h.shape[1]);
    if w_norm.len() != t_len {
        return Err(SsmError::ShapeMismatch {
            op: "activation_subspace",
            lhs: vec![w_norm.len()],
            rhs: h.shape.clone(),
        });
    }
    let mut v = Tensor::zeros(&[d]);
    for t in 0..t_len {
        for j in 0..d {
            v.data[j] += w_norm[t] * h.at2(t, j);
        }
    }
    Ok(v)
}

/// Importance + subspace in one pass from an influence matrix and the
/// activations at the tapped site.
pub fn subspace_vector(a: &Tensor, h: &Tensor) -> Result<SubspaceVector> {
    let (w, w_norm) = importance_vector(a)?;
    let v = activation_subspace(&w_norm, h)?;
    Ok(SubspaceVector { w, w_norm, v })
}

/// Σ_{s≤t} Σ_m α[m,t,s]: the relative-output-magnitude proxy at position t.
pub fn magnitude_ratio(map: &AttentionMap, t: usize) -> f64 {
    let d_inner = map.alpha.shape[0];
    let mut acc = 0.0;
    for m in 0..d_inner {
        for s in 0..=t {
            acc += map.alpha.at3(m, t, s);
        }
    }
    acc
}
