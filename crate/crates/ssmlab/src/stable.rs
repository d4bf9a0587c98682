//! Multi-timescale stable block: parallel scans at short/medium/long
//! timescales over a gated input, weighted ensemble output, sparse global
//! context injection, adaptive compression, backward-only gradient scaling
//! on the compression path, and scaled residuals. Layer configuration is
//! phase-specific (75% / 12.5% / 12.5% of depth).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{NodeId, Op, Tape};
use crate::error::{Result, SsmError};
use crate::ssm::{ActivationTrace, Blocks, Forward, Intervention, LayerTrace, Model, ModelConfig};
use crate::tensor::{inv_softplus, Tensor};

pub const MIN_STABLE_LAYERS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Timescale {
    Short,
    Medium,
    Long,
}

impl Timescale {
    /// Fixed Δ-bias offset applied before the softplus. Smaller effective Δ
    /// means slower decay, hence longer memory.
    pub fn delta_offset(self) -> f64 {
        match self {
            Timescale::Short => 2.0,
            Timescale::Medium => 0.0,
            Timescale::Long => -2.0,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Timescale::Short => "short",
            Timescale::Medium => "medium",
            Timescale::Long => "long",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhaseConfig {
    /// [start, end) layer range this phase covers.
    pub range: (usize, usize),
    pub n_gates: usize,
    pub d_state: usize,
    pub sparse_attention: bool,
    pub timescales: Vec<Timescale>,
}

/// Three-phase split of the depth: first 75% feature construction, next
/// 12.5% bottleneck reorganization, final 12.5% output shaping. Boundaries
/// round to the nearest layer with every phase nonempty.
pub fn phase_partition(n_layers: usize) -> Result<[PhaseConfig; 3]> {
    if n_layers < MIN_STABLE_LAYERS {
        return Err(SsmError::TooFewLayers {
            need: MIN_STABLE_LAYERS,
            got: n_layers,
        });
    }
    let mut b1 = (0.75 * n_layers as f64).round() as usize;
    let mut b2 = (0.875 * n_layers as f64).round() as usize;
    b1 = b1.clamp(1, n_layers - 2);
    b2 = b2.clamp(b1 + 1, n_layers - 1);
    Ok([
        PhaseConfig {
            range: (0, b1),
            n_gates: 3,
            d_state: 16,
            sparse_attention: false,
            timescales: vec![Timescale::Short, Timescale::Medium],
        },
        PhaseConfig {
            range: (b1, b2),
            n_gates: 5,
            d_state: 32,
            sparse_attention: true,
            timescales: vec![Timescale::Short, Timescale::Medium, Timescale::Long],
        },
        PhaseConfig {
            range: (b2, n_layers),
            n_gates: 2,
            d_state: 8,
            sparse_attention: false,
            timescales: vec![Timescale::Short],
        },
    ])
}

/// Configuration for a single layer.
pub fn phase_config(layer: usize, n_layers: usize) -> Result<PhaseConfig> {
    let phases = phase_partition(n_layers)?;
    phases
        .into_iter()
        .find(|p| layer >= p.range.0 && layer < p.range.1)
        .ok_or(SsmError::LayerOutOfRange {
            layer,
            n_layers,
        })
    }

#[derive(Debug, Clone)]
pub struct TimescaleParams {
    pub scale: Timescale,
    /// d × d_state
    pub a_log: Tensor,
    /// d × (dt_rank + 2·d_state)
    pub w_x: Tensor,
    /// dt_rank × d
    pub dt_w: Tensor,
    /// d
    pub dt_b: Tensor,
    /// d skip coefficients
    pub d_skip: Tensor,
}

#[derive(Debug, Clone)]
pub struct StableBlockParams {
    pub phase: PhaseConfig,
    pub timescales: Vec<TimescaleParams>,
    /// softmax over these picks the ensemble weights w_k
    pub timescale_logits: Tensor,
    /// n_gates projections of d × d
    pub gate_w: Vec<Tensor>,
    /// n_gates logits, softmax -> α_i
    pub gate_logits: Tensor,
    /// sparse-attention mixing logit (α via sigmoid), present iff the phase uses it
    pub alpha_ctx: Tensor,
    pub attn_q: Tensor,
    pub attn_k: Tensor,
    /// compression MLP: d -> d/4 -> 1
    pub comp_w1: Tensor,
    pub comp_b1: Tensor,
    pub comp_w2: Tensor,
    pub comp_b2: Tensor,
    /// residual scale, init 0.9
    pub lambda_res: Tensor,
    /// global output scale, init 1.0
    pub lambda_global: Tensor,
    /// backward-only multiplier on the compression path; never changes
    /// forward values
    pub lambda_comp: Tensor,
}

impl StableBlockParams {
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for ts in &self.timescales {
            let k = ts.scale.name();
            out.push((format!("ts.{k}.a_log"), &ts.a_log));
            out.push((format!("ts.{k}.w_x"), &ts.w_x));
            out.push((format!("ts.{k}.dt_w"), &ts.dt_w));
            out.push((format!("ts.{k}.dt_b"), &ts.dt_b));
            out.push((format!("ts.{k}.d_skip"), &ts.d_skip));
        }
        out.push(("timescale_logits".into(), &self.timescale_logits));
        for (i, w) in self.gate_w.iter().enumerate() {
            out.push((format!("gate_w.{i}"), w));
        }
        out.push(("gate_logits".into(), &self.gate_logits));
        out.push(("alpha_ctx".into(), &self.alpha_ctx));
        out.push(("attn_q".into(), &self.attn_q));
        out.push(("attn_k".into(), &self.attn_k));
        out.push(("comp_w1".into(), &self.comp_w1));
        out.push(("comp_b1".into(), &self.comp_b1));
        out.push(("comp_w2".into(), &self.comp_w2));
        out.push(("comp_b2".into(), &self.comp_b2));
        out.push(("lambda_res".into(), &self.lambda_res));
        out.push(("lambda_global".into(), &self.lambda_global));
        out.push(("lambda_comp".into(), &self.lambda_comp));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for ts in &mut self.timescales {
            let k = ts.scale.name();
            out.push((format!("ts.{k}.a_log"), &mut ts.a_log));
            out.push((format!("ts.{k}.w_x"), &mut ts.w_x));
            out.push((format!("ts.{k}.dt_w"), &mut ts.dt_w));
            out.push((format!("ts.{k}.dt_b"), &mut ts.dt_b));
            out.push((format!("ts.{k}.d_skip"), &mut ts.d_skip));
        }
        out.push(("timescale_logits".into(), &mut self.timescale_logits));
        for (i, w) in self.gate_w.iter_mut().enumerate() {
            out.push((format!("gate_w.{i}"), w));
        }
        out.push(("gate_logits".into(), &mut self.gate_logits));
        out.push(("alpha_ctx".into(), &mut self.alpha_ctx));
        out.push(("attn_q".into(), &mut self.attn_q));
        out.push(("attn_k".into(), &mut self.attn_k));
        out.push(("comp_w1".into(), &mut self.comp_w1));
        out.push(("comp_b1".into(), &mut self.comp_b1));
        out.push(("comp_w2".into(), &mut self.comp_w2));
        out.push(("comp_b2".into(), &mut self.comp_b2));
        out.push(("lambda_res".into(), &mut self.lambda_res));
        out.push(("lambda_global".into(), &mut self.lambda_global));
        out.push(("lambda_comp".into(), &mut self.lambda_comp));
        out
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
}

pub fn init_stable_block(
    config: &ModelConfig,
    layer: usize,
    rng: &mut ChaCha8Rng,
) -> StableBlockParams {
    let phase = phase_config(layer, config.n_layers).expect("validated by Model::new");
    let d = config.d_model;
    let ds = phase.d_state;
    let dtr = config.dt_rank();
    let dh = (d / 4).max(1);
    let timescales = phase
        .timescales
        .iter()
        .map(|&scale| TimescaleParams {
            scale,
            a_log: Tensor::new(
                vec![d, ds],
                (0..d * ds).map(|i| (((i % ds) + 1) as f64).ln()).collect(),
            ),
            w_x: uniform(rng, &[d, dtr + 2 * ds], (1.0 / d as f64).sqrt()),
            dt_w: uniform(rng, &[dtr, d], (1.0 / dtr as f64).sqrt()),
            dt_b: Tensor::new(
                vec![d],
                (0..d)
                    .map(|_| {
                        let dt = (rng.gen_range(0.001f64.ln()..0.1f64.ln())).exp();
                        inv_softplus(dt)
                    })
                    .collect(),
            ),
            d_skip: Tensor::full(&[d], 1.0),
        })
        .collect();
    StableBlockParams {
        timescales,
        timescale_logits: Tensor::zeros(&[phase.timescales.len()]),
        gate_w: (0..phase.n_gates)
            .map(|_| uniform(rng, &[d, d], (1.0 / d as f64).sqrt()))
            .collect(),
        gate_logits: Tensor::zeros(&[phase.n_gates]),
        alpha_ctx: Tensor::zeros(&[1]),
        attn_q: uniform(rng, &[d, d], (1.0 / d as f64).sqrt()),
        attn_k: uniform(rng, &[d, d], (1.0 / d as f64).sqrt()),
        comp_w1: uniform(rng, &[d, dh], (1.0 / d as f64).sqrt()),
        comp_b1: Tensor::zeros(&[dh]),
        comp_w2: uniform(rng, &[dh, 1], (1.0 / dh as f64).sqrt()),
        comp_b2: Tensor::zeros(&[1]),
        lambda_res: Tensor::scalar(0.9),
        lambda_global: Tensor::scalar(1.0),
        lambda_comp: Tensor::scalar(1.0),
        phase,
    }
}

/// g = Σ_i α_i · σ(W_i · LN(x)), α from softmax over gate logits.
/// Every entry lies in (0, 1).
pub fn ensemble_gate(
    tape: &mut Tape,
    x: NodeId,
    gate_w: &[NodeId],
    gate_logits: NodeId,
) -> Result<NodeId> {
    let ln = tape.push(Op::LayerNorm(x))?;
    let alpha = tape.softmax(gate_logits)?;
    let mut acc: Option<NodeId> = None;
    for (i, &w) in gate_w.iter().enumerate() {
        let proj = tape.matmul(ln, w)?;
        let s = tape.sigmoid(proj)?;
        let ai = tape.push(Op::Select(alpha, i))?;
        let term = tape.mul_scalar(s, ai)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    Ok(acc.expect("n_gates >= 1"))
}

/// Per-timescale scan outputs over the gated input; D-skip uses the
/// un-gated input.
pub fn multiscale_scan(
    tape: &mut Tape,
    gx: NodeId,
    x_ungated: NodeId,
    ts_nodes: &[TimescaleNodes],
    dt_rank: usize,
) -> Result<Vec<ScanOut>> {
    let mut outs = Vec::new();
    for ts in ts_nodes {
        let ds = tape.value(ts.a_log).shape[1];
        let xdbl = tape.matmul(gx, ts.w_x)?;
        let dt_raw = tape.slice_cols(xdbl, 0, dt_rank)?;
        let b_mat = tape.slice_cols(xdbl, dt_rank, dt_rank + ds)?;
        let c_mat = tape.slice_cols(xdbl, dt_rank + ds, dt_rank + 2 * ds)?;
        let dt_proj = tape.matmul(dt_raw, ts.dt_w)?;
        let dt_biased = tape.add(dt_proj, ts.dt_b)?;
        // fixed timescale offset before the softplus
        let shifted = if ts.offset == 0.0 {
            dt_biased
        } else {
            let off = tape.leaf(Tensor::full(&tape.value(dt_biased).shape.clone(), ts.offset));
            tape.add(dt_biased, off)?
        };
        let delta = tape.softplus(shifted)?;
        let ea = tape.exp(ts.a_log)?;
        let a = tape.neg(ea)?;
        let y_scan = tape.push(Op::SsmScan {
            x: gx,
            delta,
            a,
            b: b_mat,
            c: c_mat,
        })?;
        let skip = tape.mul(x_ungated, ts.d_skip)?;
        let y = tape.add(y_scan, skip)?;
        outs.push(ScanOut {
            y,
            scan: y_scan,
            delta,
            b: b_mat,
            c: c_mat,
        });
    }
    Ok(outs)
}

pub struct TimescaleNodes {
    pub a_log: NodeId,
    pub w_x: NodeId,
    pub dt_w: NodeId,
    pub dt_b: NodeId,
    pub d_skip: NodeId,
    pub offset: f64,
}

pub struct ScanOut {
    pub y: NodeId,
    pub scan: NodeId,
    pub delta: NodeId,
    pub b: NodeId,
    pub c: NodeId,
}

/// y = Σ_k w_k y_k with w = softmax(timescale logits): a convex combination.
pub fn ensemble_output(
    tape: &mut Tape,
    branch_ys: &[NodeId],
    timescale_logits: NodeId,
) -> Result<NodeId> {
    let w = tape.softmax(timescale_logits)?;
    let mut acc: Option<NodeId> = None;
    for (k, &y) in branch_ys.iter().enumerate() {
        let wk = tape.push(Op::Select(w, k))?;
        let term = tape.mul_scalar(y, wk)?;
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term)?,
        });
    }
    Ok(acc.expect("at least one timescale"))
}

/// Causal strided attention mask: position t attends to multiples of the
/// stride up to t, plus itself. 0 = allowed, large negative = blocked.
pub fn strided_mask(t_len: usize, stride: usize) -> Tensor {
    let mut m = Tensor::full(&[t_len, t_len], -1e30);
    for t in 0..t_len {
        for s in (0..=t).step_by(stride.max(1)) {
            m.set2(t, s, 0.0);
        }
        m.set2(t, t, 0.0);
    }
    m
}

pub fn default_stride(t_len: usize) -> usize {
    (t_len / 8).max(1)
}

/// h_global = causal strided attention over h_local; output mixes the two
/// with a learned α ∈ (0,1).
pub fn sparse_global_context(
    tape: &mut Tape,
    h_local: NodeId,
    attn_q: NodeId,
    attn_k: NodeId,
    alpha_ctx: NodeId,
    stride: usize,
) -> Result<NodeId> {
    let t_len = tape.value(h_local).shape[0];
    let d = tape.value(h_local).shape[1];
    let q = tape.matmul(h_local, attn_q)?;
    let k = tape.matmul(h_local, attn_k)?;
    let kt = tape.push(Op::Transpose(k))?;
    let scores_raw = tape.matmul(q, kt)?;
    let scores_scaled = tape.scale(scores_raw, 1.0 / (d as f64).sqrt())?;
    let mask = tape.leaf(strided_mask(t_len, stride));
    let scores = tape.add(scores_scaled, mask)?;
    let p = tape.softmax(scores)?;
    let h_global = tape.matmul(p, h_local)?;
    let alpha = tape.sigmoid(alpha_ctx)?;
    let ga = tape.mul_scalar(h_global, alpha)?;
    let neg_alpha = tape.neg(alpha)?;
    let one = tape.leaf(Tensor::scalar(1.0));
    let one_minus = tape.add(one, neg_alpha)?;
    let la = tape.mul_scalar(h_local, one_minus)?;
    tape.add(ga, la)
}

fn compression_mlp(
    tape: &mut Tape,
    pooled: NodeId,
    comp_w1: NodeId,
    comp_b1: NodeId,
    comp_w2: NodeId,
    comp_b2: NodeId,
    lambda_comp: f64,
) -> Result<NodeId> {
    let rows = tape.value(pooled).shape[0];
    let h1 = tape.matmul(pooled, comp_w1)?;
    let h1b = tape.add(h1, comp_b1)?;
    let h1r = tape.push(Op::Relu(h1b))?;
    let h2 = tape.matmul(h1r, comp_w2)?;
    let h2b = tape.add(h2, comp_b2)?;
    let scaled = tape.push(Op::GradScale(h2b, lambda_comp))?;
    let s = tape.sigmoid(scaled)?;
    let half = tape.scale(s, 0.5)?;
    let base = tape.leaf(Tensor::full(&[rows, 1], 0.5));
    tape.add(half, base)
}

/// c = 0.5 + 0.5·σ(MLP(x̄)) ∈ (0.5, 1.0) from the time-pooled input. The MLP
/// output passes through a backward-only λ_comp multiplier: forward values
/// never depend on it.
pub fn adaptive_compression(
    tape: &mut Tape,
    x: NodeId,
    comp_w1: NodeId,
    comp_b1: NodeId,
    comp_w2: NodeId,
    comp_b2: NodeId,
    lambda_comp: f64,
) -> Result<NodeId> {
    let xbar = tape.push(Op::MeanRows(x))?;
    compression_mlp(tape, xbar, comp_w1, comp_b1, comp_w2, comp_b2, lambda_comp)
}

/// Per-position variant used inside the block: c_t pools the prefix mean of
/// x_{≤t}, so causality survives the compression path. Returns a T×1 column.
pub fn adaptive_compression_causal(
    tape: &mut Tape,
    x: NodeId,
    comp_w1: NodeId,
    comp_b1: NodeId,
    comp_w2: NodeId,
    comp_b2: NodeId,
    lambda_comp: f64,
) -> Result<NodeId> {
    let t_len = tape.value(x).shape[0];
    let mut pool = Tensor::zeros(&[t_len, t_len]);
    for t in 0..t_len {
        for s in 0..=t {
            pool.set2(t, s, 1.0 / (t + 1) as f64);
        }
    }
    let pool_id = tape.leaf(pool);
    let pooled = tape.matmul(pool_id, x)?;
    compression_mlp(tape, pooled, comp_w1, comp_b1, comp_w2, comp_b2, lambda_comp)
}

/// output = (y + λ_res·x) · λ_global · c. Accepts c as a single scalar or a
/// T×1 column of per-position factors.
pub fn scaled_residual(
    tape: &mut Tape,
    y: NodeId,
    x: NodeId,
    lambda_res: NodeId,
    lambda_global: NodeId,
    c: NodeId,
) -> Result<NodeId> {
    let rx = tape.mul_scalar(x, lambda_res)?;
    let sum = tape.add(y, rx)?;
    let scaled = tape.mul_scalar(sum, lambda_global)?;
    if tape.value(c).len() == 1 {
        tape.mul_scalar(scaled, c)
    } else {
        // expand the column across channels
        let d = tape.value(scaled).shape[1];
        let ones = tape.leaf(Tensor::full(&[1, d], 1.0));
        let c_full = tape.matmul(c, ones)?;
        tape.mul(scaled, c_full)
    }
}

pub fn forward_stable(
    model: &Model,
    tokens: &[usize],
    want_trace: bool,
    intervention: Option<&Intervention>,
) -> Result<Forward> {
    let blocks = match &model.blocks {
        Blocks::Stable(b) => b,
        _ => unreachable!(),
    };
    let cfg = &model.config;
    let t_len = tokens.len();
    let d = cfg.d_model;
    let dtr = cfg.dt_rank();

    let mut tape = Tape::new();
    let mut params: Vec<(String, NodeId)> = Vec::new();
    let mut leaf = |tape: &mut Tape, name: String, t: &Tensor| -> NodeId {
        let id = tape.leaf(t.clone());
        params.push((name, id));
        id
    };

    let embed = leaf(&mut tape, "embed".into(), &model.embed);
    let head = leaf(&mut tape, "head".into(), &model.head);
    let mut x = tape.push(Op::Gather(embed, tokens.to_vec()))?;

    let mut trace = ActivationTrace::default();
    for (l, p) in blocks.iter().enumerate() {
        let pre = format!("layers.{l}");
        let ts_nodes: Vec<TimescaleNodes> = p
            .timescales
            .iter()
            .map(|ts| {
                let k = ts.scale.name();
                TimescaleNodes {
                    a_log: leaf(&mut tape, format!("{pre}.ts.{k}.a_log"), &ts.a_log),
                    w_x: leaf(&mut tape, format!("{pre}.ts.{k}.w_x"), &ts.w_x),
                    dt_w: leaf(&mut tape, format!("{pre}.ts.{k}.dt_w"), &ts.dt_w),
                    dt_b: leaf(&mut tape, format!("{pre}.ts.{k}.dt_b"), &ts.dt_b),
                    d_skip: leaf(&mut tape, format!("{pre}.ts.{k}.d_skip"), &ts.d_skip),
                    offset: ts.scale.delta_offset(),
                }
            })
            .collect();
        let ts_logits = leaf(&mut tape, format!("{pre}.timescale_logits"), &p.timescale_logits);
        let gate_w: Vec<NodeId> = p
            .gate_w
            .iter()
            .enumerate()
            .map(|(i, w)| leaf(&mut tape, format!("{pre}.gate_w.{i}"), w))
            .collect();
        let gate_logits = leaf(&mut tape, format!("{pre}.gate_logits"), &p.gate_logits);
        let comp_w1 = leaf(&mut tape, format!("{pre}.comp_w1"), &p.comp_w1);
        let comp_b1 = leaf(&mut tape, format!("{pre}.comp_b1"), &p.comp_b1);
        let comp_w2 = leaf(&mut tape, format!("{pre}.comp_w2"), &p.comp_w2);
        let comp_b2 = leaf(&mut tape, format!("{pre}.comp_b2"), &p.comp_b2);
        let lambda_res = leaf(&mut tape, format!("{pre}.lambda_res"), &p.lambda_res);
        let lambda_global = leaf(&mut tape, format!("{pre}.lambda_global"), &p.lambda_global);

        let res = x;
        let g = ensemble_gate(&mut tape, x, &gate_w, gate_logits)?;
        let gx = tape.mul(g, x)?;
        let scans = multiscale_scan(&mut tape, gx, x, &ts_nodes, dtr)?;
        let branch_ys: Vec<NodeId> = scans.iter().map(|s| s.y).collect();
        let mut y = ensemble_output(&mut tape, &branch_ys, ts_logits)?;

        if p.phase.sparse_attention {
            let alpha_ctx = leaf(&mut tape, format!("{pre}.alpha_ctx"), &p.alpha_ctx);
            let attn_q = leaf(&mut tape, format!("{pre}.attn_q"), &p.attn_q);
            let attn_k = leaf(&mut tape, format!("{pre}.attn_k"), &p.attn_k);
            y = sparse_global_context(
                &mut tape,
                y,
                attn_q,
                attn_k,
                alpha_ctx,
                default_stride(t_len),
            )?;
        }

        // hook site
        match intervention {
            Some(Intervention::Steer { layer, factors }) if *layer == l => {
                let mut fv = Tensor::full(&[d], 1.0);
                for &(dim, f) in factors {
                    fv.data[dim] = f;
                }
                let fid = tape.leaf(fv);
                y = tape.mul(y, fid)?;
            }
            Some(Intervention::Ablate { layer, dims }) if *layer == l => {
                let mut mv = Tensor::full(&[d], 1.0);
                for &dim in dims {
                    mv.data[dim] = 0.0;
                }
                let mid = tape.leaf(mv);
                y = tape.mul(y, mid)?;
            }
            _ => {}
        }

        let c = adaptive_compression_causal(
            &mut tape,
            res,
            comp_w1,
            comp_b1,
            comp_w2,
            comp_b2,
            p.lambda_comp.item(),
        )?;
        x = scaled_residual(&mut tape, y, res, lambda_res, lambda_global, c)?;

        if let Some(Intervention::PatchHidden {
            layer,
            dims,
            source,
        }) = intervention
        {
            if *layer == l {
                let mut keep = Tensor::full(&[d], 1.0);
                let mut inject = Tensor::zeros(&[t_len, d]);
                for &dim in dims {
                    keep.data[dim] = 0.0;
                    for t in 0..t_len {
                        inject.set2(t, dim, source.at2(t, dim));
                    }
                }
                let keep_id = tape.leaf(keep);
                let inj_id = tape.leaf(inject);
                let masked = tape.mul(x, keep_id)?;
                x = tape.add(masked, inj_id)?;
            }
        }

        if want_trace {
            let fast = &scans[0];
            trace.layers.push(LayerTrace {
                x: tape.value(gx).clone(),
                delta: tape.value(fast.delta).clone(),
                b: tape.value(fast.b).clone(),
                c: tape.value(fast.c).clone(),
                h: tape.aux(fast.scan).expect("scan aux").hidden.clone(),
                ssm_out: tape.value(y).clone(),
                mixer_out: tape.value(y).clone(),
                hidden: tape.value(x).clone(),
            });
        }
    }

    let logits = tape.matmul(x, head)?;
    Ok(Forward {
        tape,
        logits,
        trace: want_trace.then_some(trace),
        params,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ssm::Arch;

    fn stable_config(n_layers: usize, seed: u64) -> ModelConfig {
        ModelConfig {
            vocab_size: 9,
            d_model: 8,
            d_inner: 8,
            d_state: 4,
            d_conv: 2,
            n_layers,
            seed,
        }
    }

    #[test]
    fn phase_config_24_layers_matches_reference_split() {
        let phases = phase_partition(24).unwrap();
        assert_eq!(phases[0].range, (0, 18));
        assert_eq!(phases[1].range, (18, 21));
        assert_eq!(phases[2].range, (21, 24));
        assert_eq!((phases[0].n_gates, phases[0].d_state), (3, 16));
        assert_eq!((phases[1].n_gates, phases[1].d_state), (5, 32));
        assert_eq!((phases[2].n_gates, phases[2].d_state), (2, 8));
        assert!(!phases[0].sparse_attention);
        assert!(phases[1].sparse_attention);
        assert!(!phases[2].sparse_attention);
    }

    #[test]
    fn phase_config_8_layers_rounds_to_6_1_1() {
        let phases = phase_partition(8).unwrap();
        assert_eq!(phases[0].range, (0, 6));
        assert_eq!(phases[1].range, (6, 7));
        assert_eq!(phases[2].range, (7, 8));
    }

    #[test]
    fn phases_partition_all_layers() {
        for n in 8..40 {
            let phases = phase_partition(n).unwrap();
            assert_eq!(phases[0].range.0, 0);
            assert_eq!(phases[0].range.1, phases[1].range.0);
            assert_eq!(phases[1].range.1, phases[2].range.0);
            assert_eq!(phases[2].range.1, n);
            for p in &phases {
                assert!(p.range.1 > p.range.0, "empty phase at n={n}");
            }
            // every layer resolves to exactly one phase
            for l in 0..n {
                phase_config(l, n).unwrap();
            }
        }
    }

    #[test]
    fn too_shallow_rejected() {
        assert!(matches!(
            phase_partition(7),
            Err(SsmError::TooFewLayers { need: 8, got: 7 })
        ));
    }

    #[test]
    fn ensemble_weights_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..3).map(|_| rng.gen_range(-5.0..5.0)).collect();
            let mut tape = Tape::new();
            let l = tape.leaf(Tensor::new(vec![3], logits));
            let w = tape.softmax(l).unwrap();
            let sum: f64 = tape.value(w).data.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(tape.value(w).data.iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn ensemble_output_identical_branches_is_identity() {
        let mut tape = Tape::new();
        let y = tape.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        let logits = tape.leaf(Tensor::zeros(&[3]));
        let out = ensemble_output(&mut tape, &[y, y, y], logits).unwrap();
        for i in 0..4 {
            assert!((tape.value(out).data[i] - tape.value(y).data[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn ensemble_output_one_hot_selects_branch() {
        let mut tape = Tape::new();
        let y1 = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 1.0]));
        let y2 = tape.leaf(Tensor::new(vec![1, 2], vec![5.0, 7.0]));
        let logits = tape.leaf(Tensor::new(vec![2], vec![-100.0, 100.0]));
        let out = ensemble_output(&mut tape, &[y1, y2], logits).unwrap();
        assert!((tape.value(out).data[0] - 5.0).abs() < 1e-12);
        assert!((tape.value(out).data[1] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn gate_bounds_and_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        // zero weights => sigmoid(0) = 0.5 everywhere
        let mut tape = Tape::new();
        let x = tape.leaf(uniform(&mut rng, &[4, 6], 1.0));
        let w0 = tape.leaf(Tensor::zeros(&[6, 6]));
        let w1 = tape.leaf(Tensor::zeros(&[6, 6]));
        let logits = tape.leaf(Tensor::zeros(&[2]));
        let g = ensemble_gate(&mut tape, x, &[w0, w1], logits).unwrap();
        for &v in &tape.value(g).data {
            assert!((v - 0.5).abs() < 1e-12);
        }
        // random gates stay in (0,1): 1000 samples
        for trial in 0..25 {
            let mut tape = Tape::new();
            let x = tape.leaf(uniform(&mut rng, &[5, 8], 2.0));
            let ws: Vec<NodeId> = (0..3)
                .map(|_| {
                    let t = uniform(&mut rng, &[8, 8], 1.5);
                    tape.leaf(t)
                })
                .collect();
            let logits = tape.leaf(uniform(&mut rng, &[3], 2.0));
            let g = ensemble_gate(&mut tape, x, &ws, logits).unwrap();
            for &v in &tape.value(g).data {
                assert!(v > 0.0 && v < 1.0, "trial {trial}: g={v}");
            }
        }
    }

    #[test]
    fn single_gate_reduces_to_plain_sigmoid() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut tape = Tape::new();
        let x = tape.leaf(uniform(&mut rng, &[3, 4], 1.0));
        let wt = uniform(&mut rng, &[4, 4], 1.0);
        let w = tape.leaf(wt.clone());
        let logits = tape.leaf(Tensor::zeros(&[1]));
        let g = ensemble_gate(&mut tape, x, &[w], logits).unwrap();
        let ln = tape.push(Op::LayerNorm(x)).unwrap();
        let proj = tape.matmul(ln, w).unwrap();
        let s = tape.sigmoid(proj).unwrap();
        for i in 0..tape.value(g).len() {
            assert!((tape.value(g).data[i] - tape.value(s).data[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn compression_range_and_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        // zero MLP => sigmoid(0) = 0.5 => c = 0.75
        let mut tape = Tape::new();
        let x = tape.leaf(uniform(&mut rng, &[4, 4], 1.0));
        let w1 = tape.leaf(Tensor::zeros(&[4, 2]));
        let b1 = tape.leaf(Tensor::zeros(&[2]));
        let w2 = tape.leaf(Tensor::zeros(&[2, 1]));
        let b2 = tape.leaf(Tensor::zeros(&[1]));
        let c = adaptive_compression(&mut tape, x, w1, b1, w2, b2, 1.0).unwrap();
        assert!((tape.value(c).item() - 0.75).abs() < 1e-12);
        // extreme negative MLP output => c -> 0.5
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::full(&[2, 2], 1.0));
        let w1 = tape.leaf(Tensor::zeros(&[2, 1]));
        let b1 = tape.leaf(Tensor::full(&[1], 1.0));
        let w2 = tape.leaf(Tensor::full(&[1, 1], 1.0));
        let b2 = tape.leaf(Tensor::full(&[1], -60.0));
        let c = adaptive_compression(&mut tape, x, w1, b1, w2, b2, 1.0).unwrap();
        assert!((tape.value(c).item() - 0.5).abs() < 1e-10);
        // random inputs stay in (0.5, 1.0)
        for _ in 0..50 {
            let mut tape = Tape::new();
            let x = tape.leaf(uniform(&mut rng, &[3, 4], 3.0));
            let w1 = tape.leaf(uniform(&mut rng, &[4, 2], 2.0));
            let b1 = tape.leaf(uniform(&mut rng, &[2], 1.0));
            let w2 = tape.leaf(uniform(&mut rng, &[2, 1], 2.0));
            let b2 = tape.leaf(uniform(&mut rng, &[1], 1.0));
            let c = adaptive_compression(&mut tape, x, w1, b1, w2, b2, 1.0).unwrap();
            let v = tape.value(c).item();
            assert!(v > 0.5 && v < 1.0, "c={v}");
        }
    }

    #[test]
    fn residual_trivial_cases() {
        let mut tape = Tape::new();
        let y = tape.leaf(Tensor::new(vec![1, 2], vec![1.0, 2.0]));
        let x = tape.leaf(Tensor::new(vec![1, 2], vec![10.0, 20.0]));
        let one = tape.leaf(Tensor::scalar(1.0));
        let zero = tape.leaf(Tensor::scalar(0.0));
        let c1 = tape.leaf(Tensor::scalar(1.0));
        // λ_res = 1, λ_global = 1, c = 1 => standard residual
        let out = scaled_residual(&mut tape, y, x, one, one, c1).unwrap();
        assert_eq!(tape.value(out).data, vec![11.0, 22.0]);
        // λ_global = 0 => output 0
        let out = scaled_residual(&mut tape, y, x, one, zero, c1).unwrap();
        assert_eq!(tape.value(out).data, vec![0.0, 0.0]);
    }

    #[test]
    fn sparse_attention_rows_are_probabilities_and_alpha_limits() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let t_len = 9;
        let d = 4;
        let h = uniform(&mut rng, &[t_len, d], 1.0);
        // α -> 0 means output == h_local exactly (up to float mul identity)
        let mut tape = Tape::new();
        let hid = tape.leaf(h.clone());
        let q = tape.leaf(uniform(&mut rng, &[d, d], 1.0));
        let k = tape.leaf(uniform(&mut rng, &[d, d], 1.0));
        let alpha = tape.leaf(Tensor::scalar(-80.0)); // sigmoid ~ 0
        let out = sparse_global_context(&mut tape, hid, q, k, alpha, 2).unwrap();
        for i in 0..h.len() {
            assert!((tape.value(out).data[i] - h.data[i]).abs() < 1e-12);
        }
        // T = 1: only self-attention, output == h_local for any alpha
        let mut tape = Tape::new();
        let h1 = uniform(&mut rng, &[1, d], 1.0);
        let hid = tape.leaf(h1.clone());
        let q = tape.leaf(uniform(&mut rng, &[d, d], 1.0));
        let k = tape.leaf(uniform(&mut rng, &[d, d], 1.0));
        let alpha = tape.leaf(Tensor::scalar(0.7));
        let out = sparse_global_context(&mut tape, hid, q, k, alpha, 1).unwrap();
        for i in 0..h1.len() {
            assert!((tape.value(out).data[i] - h1.data[i]).abs() < 1e-12);
        }
        // softmax rows over the attended set sum to 1
        let mask = strided_mask(7, 3);
        let mut tape = Tape::new();
        let s = tape.leaf(mask);
        let p = tape.softmax(s).unwrap();
        for t in 0..7 {
            let sum: f64 = tape.value(p).row(t).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn gated_out_input_gives_zero_states() {
        // g = 0 => every timescale state is 0
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let d = 4;
        let ds = 3;
        let mut tape = Tape::new();
        let gx = tape.leaf(Tensor::zeros(&[5, d]));
        let x = tape.leaf(uniform(&mut rng, &[5, d], 1.0));
        let nodes = TimescaleNodes {
            a_log: tape.leaf(Tensor::zeros(&[d, ds])),
            w_x: tape.leaf(uniform(&mut rng, &[d, 1 + 2 * ds], 1.0)),
            dt_w: tape.leaf(uniform(&mut rng, &[1, d], 1.0)),
            dt_b: tape.leaf(Tensor::full(&[d], 0.5)),
            d_skip: tape.leaf(Tensor::zeros(&[d])),
            offset: 0.0,
        };
        let outs = multiscale_scan(&mut tape, gx, x, &[nodes], 1).unwrap();
        let h = &tape.aux(outs[0].scan).unwrap().hidden;
        assert!(h.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn long_timescale_retains_impulse_longer() {
        // impulse at t=0; compare |h| at final step for offsets +2 vs -2
        let d = 1;
        let ds = 1;
        let t_len = 12;
        let run = |offset: f64| -> f64 {
            let mut tape = Tape::new();
            let mut imp = Tensor::zeros(&[t_len, d]);
            imp.data[0] = 1.0;
            let gx = tape.leaf(imp.clone());
            let x = tape.leaf(imp);
            let nodes = TimescaleNodes {
                a_log: tape.leaf(Tensor::zeros(&[d, ds])),
                w_x: tape.leaf(Tensor::full(&[d, 1 + 2 * ds], 1.0)),
                dt_w: tape.leaf(Tensor::full(&[1, d], 0.0)),
                dt_b: tape.leaf(Tensor::full(&[d], 0.5)),
                d_skip: tape.leaf(Tensor::zeros(&[d])),
                offset,
            };
            let outs = multiscale_scan(&mut tape, gx, x, &[nodes], 1).unwrap();
            tape.aux(outs[0].scan).unwrap().hidden.at3(t_len - 1, 0, 0).abs()
        };
        let short = run(Timescale::Short.delta_offset());
        let long = run(Timescale::Long.delta_offset());
        assert!(
            long > short,
            "long {long} should exceed short {short} on an impulse"
        );
    }

    #[test]
    fn lambda_comp_forward_invariant_and_scales_gradients() {
        let model = Model::new(stable_config(8, 5), Arch::Stable).unwrap();
        let tokens = vec![1, 2, 3, 4, 5, 6];
        let mask = vec![true; 6];

        let run = |lc: f64| {
            let mut m = model.clone();
            if let Blocks::Stable(bs) = &mut m.blocks {
                for b in bs.iter_mut() {
                    b.lambda_comp = Tensor::scalar(lc);
                }
            }
            let mut fwd = m.forward(&tokens, false, None).unwrap();
            let loss = m.loss_on(&mut fwd, &tokens, &mask).unwrap();
            let grads = m.param_grads(&fwd, loss).unwrap();
            (fwd.tape.value(fwd.logits).clone(), grads)
        };
        let (logits1, grads1) = run(1.0);
        let (logits2, grads2) = run(2.0);
        // forward bit-exact
        assert_eq!(logits1.data, logits2.data);
        // last layer's compression-path gradients scale by exactly 2; earlier
        // layers see λ-perturbed incoming gradients through downstream
        // compression paths, so only the final block gives the clean ratio
        let mut checked = 0;
        for ((n1, g1), (_, g2)) in grads1.iter().zip(grads2.iter()) {
            if n1.starts_with("layers.7.comp_") {
                for i in 0..g1.len() {
                    if g1.data[i].abs() > 1e-14 {
                        let ratio = g2.data[i] / g1.data[i];
                        assert!((ratio - 2.0).abs() <= 1e-10, "{n1}[{i}]: ratio {ratio}");
                        checked += 1;
                    }
                }
            }
        }
        assert!(checked > 0, "no compression-path gradients exercised");
    }

    #[test]
    fn compression_path_gradient_matches_finite_differences() {
        let model = Model::new(stable_config(8, 7), Arch::Stable).unwrap();
        let tokens = vec![2, 4, 1, 3];
        let mask = vec![true; 4];
        let mut fwd = model.forward(&tokens, false, None).unwrap();
        let loss = model.loss_on(&mut fwd, &tokens, &mask).unwrap();
        let grads = model.param_grads(&fwd, loss).unwrap();
        let target = "layers.0.comp_w2";
        let (_, analytic) = grads.iter().find(|(n, _)| n == target).unwrap();
        let eps = 1e-5;
        for ei in 0..analytic.len() {
            let eval = |delta: f64| -> f64 {
                let mut m = model.clone();
                for (n, t) in m.named_params_mut() {
                    if n == target {
                        t.data[ei] += delta;
                    }
                }
                let mut f = m.forward(&tokens, false, None).unwrap();
                let l = m.loss_on(&mut f, &tokens, &mask).unwrap();
                f.tape.value(l).item()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let rel = (analytic.data[ei] - numeric).abs()
                / (analytic.data[ei].abs() + numeric.abs() + 1e-6);
            assert!(rel <= 1e-4, "{target}[{ei}]: rel {rel}");
        }
    }

    #[test]
    fn stable_forward_is_causal() {
        let model = Model::new(stable_config(8, 2), Arch::Stable).unwrap();
        let tokens = vec![1, 4, 2, 8, 0, 7];
        let full = model.logits(&tokens, None).unwrap();
        let prefix = model.logits(&tokens[..4], None).unwrap();
        for t in 0..4 {
            assert_eq!(full.row(t), prefix.row(t), "t={t}");
        }
    }
}
