//! Mamba-style selective SSM language model at toy scale.
//!
//! Block wiring: input projection -> causal depthwise conv -> silu ->
//! (Δ, B, C) projections -> selective scan with softplus-discretized Δ ->
//! D skip -> silu gate -> output projection -> residual. The signal entering
//! the output projection (post-scan, post-gate) is the hook site for
//! ablation, steering, and variance recording.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradient, NodeId, Op, Tape};
use crate::error::{Result, SsmError};
use crate::tensor::{inv_softplus, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub n_layers: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.vocab_size,
            self.d_model,
            self.d_inner,
            self.d_state,
            self.d_conv,
            self.n_layers,
        ];
        if counts.iter().any(|&c| c == 0) {
            return Err(SsmError::InvalidConfig(
                "all model dimensions must be >= 1".into(),
            ));
        }
        if self.d_inner < self.d_model {
            return Err(SsmError::InvalidConfig(format!(
                "d_inner {} must be >= d_model {}",
                self.d_inner, self.d_model
            )));
        }
        Ok(())
    }

    pub fn dt_rank(&self) -> usize {
        (self.d_model / 8).max(1)
    }
}

/// One layer's parameters. a_m = -exp(A_log) keeps every state transition
/// strictly contractive.
#[derive(Debug, Clone)]
pub struct SelectiveSSMParams {
    /// d_inner × d_state
    pub a_log: Tensor,
    /// d_inner skip coefficients
    pub d_skip: Tensor,
    /// d_model × 2·d_inner (x path and gate z)
    pub w_in: Tensor,
    /// d_conv × d_inner depthwise causal kernel
    pub conv_w: Tensor,
    /// d_inner
    pub conv_b: Tensor,
    /// d_inner × (dt_rank + 2·d_state): (Δ_raw, B, C) per token
    pub w_x: Tensor,
    /// dt_rank × d_inner
    pub dt_w: Tensor,
    /// d_inner, the b_dt bias
    pub dt_b: Tensor,
    /// d_inner × d_model
    pub w_out: Tensor,
}

/// Per-layer activations recorded during a traced forward pass.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    /// T×d_inner pre-scan input (post conv + silu)
    pub x: Tensor,
    /// T×d_inner discretized time-steps
    pub delta: Tensor,
    /// T×d_state input projections
    pub b: Tensor,
    /// T×d_state output projections
    pub c: Tensor,
    /// T×d_inner×d_state hidden states
    pub h: Tensor,
    /// T×d_inner hook-site signal (post-scan, post-gate, pre output projection)
    pub ssm_out: Tensor,
    /// T×d_model output-projection result
    pub mixer_out: Tensor,
    /// T×d_model block output (post residual)
    pub hidden: Tensor,
}

#[derive(Debug, Clone, Default)]
pub struct ActivationTrace {
    pub layers: Vec<LayerTrace>,
}

/// Inference-time edit applied at a layer's hook site.
#[derive(Debug, Clone)]
pub enum Intervention {
    /// Multiply listed dims by scalar factors (absent dims keep 1.0).
    Steer { layer: usize, factors: Vec<(usize, f64)> },
    /// Zero the listed dims.
    Ablate { layer: usize, dims: Vec<usize> },
    /// Replace listed dims of the layer's block-output hidden state with
    /// values recorded from another run (positionwise).
    PatchHidden {
        layer: usize,
        dims: Vec<usize>,
        source: Tensor,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Vanilla,
    Stable,
}

#[derive(Debug, Clone)]
pub enum Blocks {
    Vanilla(Vec<SelectiveSSMParams>),
    Stable(Vec<crate::stable::StableBlockParams>),
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    /// vocab × d_model
    pub embed: Tensor,
    /// d_model × vocab
    pub head: Tensor,
    pub blocks: Blocks,
}

/// Output of a forward pass. The tape and leaf registry stay alive so
/// gradients can be taken against named parameters.
pub struct Forward {
    pub tape: Tape,
    pub logits: NodeId,
    pub trace: Option<ActivationTrace>,
    /// (name, leaf id) for every model parameter, in model order.
    pub params: Vec<(String, NodeId)>,
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect(),
    )
}

pub fn init_layer(config: &ModelConfig, rng: &mut ChaCha8Rng) -> SelectiveSSMParams {
    let (dm, di, ds, dc) = (
        config.d_model,
        config.d_inner,
        config.d_state,
        config.d_conv,
    );
    let dtr = config.dt_rank();
    // A initialized to -(1..=d_state) per channel, stored as logs.
    let a_log = Tensor::new(
        vec![di, ds],
        (0..di * ds)
            .map(|i| (((i % ds) + 1) as f64).ln())
            .collect(),
    );
    // softplus(dt_b) uniform in [0.001, 0.1] on a log scale.
    let dt_b = Tensor::new(
        vec![di],
        (0..di)
            .map(|_| {
                let dt = (rng.gen_range(0.001f64.ln()..0.1f64.ln())).exp();
                inv_softplus(dt)
            })
            .collect(),
    );
    SelectiveSSMParams {
        a_log,
        d_skip: Tensor::full(&[di], 1.0),
        w_in: uniform(rng, &[dm, 2 * di], (1.0 / dm as f64).sqrt()),
        conv_w: uniform(rng, &[dc, di], (1.0 / dc as f64).sqrt()),
        conv_b: Tensor::zeros(&[di]),
        w_x: uniform(rng, &[di, dtr + 2 * ds], (1.0 / di as f64).sqrt()),
        dt_w: uniform(rng, &[dtr, di], (1.0 / dtr as f64).sqrt()),
        dt_b,
        w_out: uniform(rng, &[di, dm], (1.0 / di as f64).sqrt()),
    }
}

impl Model {
    pub fn new(config: ModelConfig, arch: Arch) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let embed = uniform(&mut rng, &[config.vocab_size, config.d_model], 0.1);
        let head = uniform(
            &mut rng,
            &[config.d_model, config.vocab_size],
            (1.0 / config.d_model as f64).sqrt(),
        );
        let blocks = match arch {
            Arch::Vanilla => Blocks::Vanilla(
                (0..config.n_layers)
                    .map(|_| init_layer(&config, &mut rng))
                    .collect(),
            ),
            Arch::Stable => Blocks::Stable(
                (0..config.n_layers)
                    .map(|l| crate::stable::init_stable_block(&config, l, &mut rng))
                    .collect(),
            ),
        };
        Ok(Model {
            config,
            embed,
            head,
            blocks,
        })
    }

    pub fn arch(&self) -> Arch {
        match self.blocks {
            Blocks::Vanilla(_) => Arch::Vanilla,
            Blocks::Stable(_) => Arch::Stable,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.config.n_layers
    }

    /// Width of the hook-site signal at a layer.
    pub fn hook_width(&self) -> usize {
        match self.blocks {
            Blocks::Vanilla(_) => self.config.d_inner,
            Blocks::Stable(_) => self.config.d_model,
        }
    }

    pub fn vanilla_layer(&self, layer: usize) -> Result<&SelectiveSSMParams> {
        match &self.blocks {
            Blocks::Vanilla(layers) => {
                layers.get(layer).ok_or(SsmError::LayerOutOfRange {
                    layer,
                    n_layers: self.config.n_layers,
                })
            }
            Blocks::Stable(_) => Err(SsmError::InvalidConfig(
                "operation requires a vanilla-architecture model".into(),
            )),
        }
    }

    /// Flat list of (name, tensor) for every parameter. Order is stable and
    /// matches the checkpoint format.
    pub fn named_params(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed".into(), &self.embed),
            ("head".into(), &self.head),
        ];
        match &self.blocks {
            Blocks::Vanilla(layers) => {
                for (l, p) in layers.iter().enumerate() {
                    out.push((format!("layers.{l}.a_log"), &p.a_log));
                    out.push((format!("layers.{l}.d_skip"), &p.d_skip));
                    out.push((format!("layers.{l}.w_in"), &p.w_in));
                    out.push((format!("layers.{l}.conv_w"), &p.conv_w));
                    out.push((format!("layers.{l}.conv_b"), &p.conv_b));
                    out.push((format!("layers.{l}.w_x"), &p.w_x));
                    out.push((format!("layers.{l}.dt_w"), &p.dt_w));
                    out.push((format!("layers.{l}.dt_b"), &p.dt_b));
                    out.push((format!("layers.{l}.w_out"), &p.w_out));
                }
            }
            Blocks::Stable(layers) => {
                for (l, p) in layers.iter().enumerate() {
                    for (name, t) in p.named_params() {
                        out.push((format!("layers.{l}.{name}"), t));
                    }
                }
            }
        }
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embed".into(), &mut self.embed),
            ("head".into(), &mut self.head),
        ];
        match &mut self.blocks {
            Blocks::Vanilla(layers) => {
                for (l, p) in layers.iter_mut().enumerate() {
                    out.push((format!("layers.{l}.a_log"), &mut p.a_log));
                    out.push((format!("layers.{l}.d_skip"), &mut p.d_skip));
                    out.push((format!("layers.{l}.w_in"), &mut p.w_in));
                    out.push((format!("layers.{l}.conv_w"), &mut p.conv_w));
                    out.push((format!("layers.{l}.conv_b"), &mut p.conv_b));
                    out.push((format!("layers.{l}.w_x"), &mut p.w_x));
                    out.push((format!("layers.{l}.dt_w"), &mut p.dt_w));
                    out.push((format!("layers.{l}.dt_b"), &mut p.dt_b));
                    out.push((format!("layers.{l}.w_out"), &mut p.w_out));
                }
            }
            Blocks::Stable(layers) => {
                for (l, p) in layers.iter_mut().enumerate() {
                    for (name, t) in p.named_params_mut() {
                        out.push((format!("layers.{l}.{name}"), t));
                    }
                }
            }
        }
        out
    }

    /// Full forward pass over a token sequence.
    pub fn forward(
        &self,
        tokens: &[usize],
        trace: bool,
        intervention: Option<&Intervention>,
    ) -> Result<Forward> {
        for (pos, &t) in tokens.iter().enumerate() {
            if t >= self.config.vocab_size {
                return Err(SsmError::OutOfVocab {
                    token: t,
                    position: pos,
                });
            }
        }
        if let Some(iv) = intervention {
            self.validate_intervention(iv)?;
        }
        match &self.blocks {
            Blocks::Vanilla(_) => self.forward_vanilla(tokens, trace, intervention),
            Blocks::Stable(_) => crate::stable::forward_stable(self, tokens, trace, intervention),
        }
    }

    /// Logit rows as a plain tensor (convenience for inference-only callers).
    pub fn logits(&self, tokens: &[usize], intervention: Option<&Intervention>) -> Result<Tensor> {
        let fwd = self.forward(tokens, false, intervention)?;
        Ok(fwd.tape.value(fwd.logits).clone())
    }

    fn validate_intervention(&self, iv: &Intervention) -> Result<()> {
        let (layer, dims): (usize, Vec<usize>) = match iv {
            Intervention::Steer { layer, factors } => {
                (*layer, factors.iter().map(|&(d, _)| d).collect())
            }
            Intervention::Ablate { layer, dims } => (*layer, dims.clone()),
            Intervention::PatchHidden { layer, dims, .. } => (*layer, dims.clone()),
        };
        if layer >= self.config.n_layers {
            return Err(SsmError::LayerOutOfRange {
                layer,
                n_layers: self.config.n_layers,
            });
        }
        let width = match iv {
            Intervention::PatchHidden { .. } => self.config.d_model,
            _ => self.hook_width(),
        };
        for d in dims {
            if d >= width {
                return Err(SsmError::DimOutOfRange { dim: d, width });
            }
        }
        Ok(())
    }

    fn forward_vanilla(
        &self,
        tokens: &[usize],
        want_trace: bool,
        intervention: Option<&Intervention>,
    ) -> Result<Forward> {
        let layers = match &self.blocks {
            Blocks::Vanilla(l) => l,
            _ => unreachable!(),
        };
        let cfg = &self.config;
        let t_len = tokens.len();
        let (di, ds) = (cfg.d_inner, cfg.d_state);
        let dtr = cfg.dt_rank();

        let mut tape = Tape::new();
        let mut params: Vec<(String, NodeId)> = Vec::new();
        let mut leaf = |tape: &mut Tape, name: String, t: &Tensor| -> NodeId {
            let id = tape.leaf(t.clone());
            params.push((name, id));
            id
        };

        let embed = leaf(&mut tape, "embed".into(), &self.embed);
        let head = leaf(&mut tape, "head".into(), &self.head);
        let mut x = tape.push(Op::Gather(embed, tokens.to_vec()))?;

        let mut trace = ActivationTrace::default();
        for (l, p) in layers.iter().enumerate() {
            let a_log = leaf(&mut tape, format!("layers.{l}.a_log"), &p.a_log);
            let d_skip = leaf(&mut tape, format!("layers.{l}.d_skip"), &p.d_skip);
            let w_in = leaf(&mut tape, format!("layers.{l}.w_in"), &p.w_in);
            let conv_w = leaf(&mut tape, format!("layers.{l}.conv_w"), &p.conv_w);
            let conv_b = leaf(&mut tape, format!("layers.{l}.conv_b"), &p.conv_b);
            let w_x = leaf(&mut tape, format!("layers.{l}.w_x"), &p.w_x);
            let dt_w = leaf(&mut tape, format!("layers.{l}.dt_w"), &p.dt_w);
            let dt_b = leaf(&mut tape, format!("layers.{l}.dt_b"), &p.dt_b);
            let w_out = leaf(&mut tape, format!("layers.{l}.w_out"), &p.w_out);

            let res = x;
            let xz = tape.matmul(x, w_in)?;
            let xa = tape.slice_cols(xz, 0, di)?;
            let z = tape.slice_cols(xz, di, 2 * di)?;
            let xc = tape.push(Op::Conv1dDepthwise {
                x: xa,
                w: conv_w,
                b: conv_b,
            })?;
            let xs = tape.silu(xc)?;

            let xdbl = tape.matmul(xs, w_x)?;
            let dt_raw = tape.slice_cols(xdbl, 0, dtr)?;
            let b_mat = tape.slice_cols(xdbl, dtr, dtr + ds)?;
            let c_mat = tape.slice_cols(xdbl, dtr + ds, dtr + 2 * ds)?;
            let dt_proj = tape.matmul(dt_raw, dt_w)?;
            let dt_biased = tape.add(dt_proj, dt_b)?;
            let delta = tape.softplus(dt_biased)?;

            let ea = tape.exp(a_log)?;
            let a = tape.neg(ea)?;
            let y_scan = tape.push(Op::SsmScan {
                x: xs,
                delta,
                a,
                b: b_mat,
                c: c_mat,
            })?;
            let skip = tape.mul(xs, d_skip)?;
            let y_skip = tape.add(y_scan, skip)?;
            let gate = tape.silu(z)?;
            let mut gated = tape.mul(y_skip, gate)?;

            // hook site
            match intervention {
                Some(Intervention::Steer { layer, factors }) if *layer == l => {
                    let mut fv = Tensor::full(&[di], 1.0);
                    for &(d, f) in factors {
                        fv.data[d] = f;
                    }
                    let fid = tape.leaf(fv);
                    gated = tape.mul(gated, fid)?;
                }
                Some(Intervention::Ablate { layer, dims }) if *layer == l => {
                    let mut mv = Tensor::full(&[di], 1.0);
                    for &d in dims {
                        mv.data[d] = 0.0;
                    }
                    let mid = tape.leaf(mv);
                    gated = tape.mul(gated, mid)?;
                }
                _ => {}
            }

            let mixer_out = tape.matmul(gated, w_out)?;
            x = tape.add(res, mixer_out)?;

            if let Some(Intervention::PatchHidden {
                layer,
                dims,
                source,
            }) = intervention
            {
                if *layer == l {
                    // x' = x ⊙ mask + source ⊙ (1-mask) on the listed dims
                    let mut keep = Tensor::full(&[cfg.d_model], 1.0);
                    let mut inject = Tensor::zeros(&[t_len, cfg.d_model]);
                    for &d in dims {
                        keep.data[d] = 0.0;
                        for t in 0..t_len {
                            inject.set2(t, d, source.at2(t, d));
                        }
                    }
                    let keep_id = tape.leaf(keep);
                    let inj_id = tape.leaf(inject);
                    let masked = tape.mul(x, keep_id)?;
                    x = tape.add(masked, inj_id)?;
                }
            }

            if want_trace {
                trace.layers.push(LayerTrace {
                    x: tape.value(xs).clone(),
                    delta: tape.value(delta).clone(),
                    b: tape.value(b_mat).clone(),
                    c: tape.value(c_mat).clone(),
                    h: tape.aux(y_scan).expect("scan aux").hidden.clone(),
                    ssm_out: tape.value(gated).clone(),
                    mixer_out: tape.value(mixer_out).clone(),
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

    /// Cross-entropy loss node over scored positions, appended to a forward
    /// pass. `score_mask[i]` scores the prediction of `tokens[i+1]`.
    pub fn loss_on(
        &self,
        fwd: &mut Forward,
        tokens: &[usize],
        score_mask: &[bool],
    ) -> Result<NodeId> {
        let mut positions = Vec::new();
        let mut targets = Vec::new();
        for i in 0..tokens.len().saturating_sub(1) {
            if score_mask[i] {
                positions.push(i);
                targets.push(tokens[i + 1]);
            }
        }
        let logp = fwd.tape.push(Op::LogSoftmax(fwd.logits))?;
        fwd.tape.push(Op::NllMean {
            logp,
            targets,
            positions,
        })
    }

    /// Gradient of a scalar loss with respect to every parameter, by name.
    pub fn param_grads(
        &self,
        fwd: &Forward,
        loss: NodeId,
    ) -> Result<Vec<(String, Tensor)>> {
        let ids: Vec<NodeId> = fwd.params.iter().map(|&(_, id)| id).collect();
        let grads = gradient(&fwd.tape, loss, &ids)?;
        Ok(fwd
            .params
            .iter()
            .map(|(name, id)| (name.clone(), grads[id].clone()))
            .collect())
    }
}

/// Discretize (Δ, A, B) by the zero-order hold on A and the Euler rule on B.
/// Returns A_bar: T×d_inner×d_state and B_bar: T×d_inner×d_state viewed as
/// Δ[t,m]·B[t,n].
pub fn discretize(delta: &Tensor, a_log: &Tensor, b: &Tensor) -> Result<(Tensor, Tensor)> {
    let (t_len, di) = (delta.shape[0], delta.shape[1]);
    let ds = a_log.shape[1];
    for t in 0..t_len {
        for m in 0..di {
            if delta.at2(t, m) <= 0.0 {
                return Err(SsmError::NonPositiveDelta { t, channel: m });
            }
        }
    }
    let mut a_bar = Tensor::zeros(&[t_len, di, ds]);
    let mut b_bar = Tensor::zeros(&[t_len, di, ds]);
    for t in 0..t_len {
        for m in 0..di {
            let dt = delta.at2(t, m);
            for n in 0..ds {
                let a = -a_log.at2(m, n).exp();
                a_bar.set3(t, m, n, (dt * a).exp());
                b_bar.set3(t, m, n, dt * b.at2(t, n));
            }
        }
    }
    Ok((a_bar, b_bar))
}

/// Maximum sequence length accepted by the brute-force reference.
pub const BRUTEFORCE_MAX_T: usize = 64;

/// Reference semantics for the scan: explicit double loop over (t, s) with
/// the product of transitions. Quadratic in T; guarded.
pub fn ssm_bruteforce(
    x: &Tensor,
    delta: &Tensor,
    a_log: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d_skip: &Tensor,
) -> Result<Tensor> {
    let (t_len, di) = (x.shape[0], x.shape[1]);
    let ds = a_log.shape[1];
    if t_len > BRUTEFORCE_MAX_T {
        return Err(SsmError::LengthGuard {
            len: t_len,
            max: BRUTEFORCE_MAX_T,
        });
    }
    let mut y = Tensor::zeros(&[t_len, di]);
    for t in 0..t_len {
        for m in 0..di {
            let mut acc = 0.0;
            for s in 0..=t {
                for n in 0..ds {
                    let a = -a_log.at2(m, n).exp();
                    // product of transitions over k = s+1..=t
                    let mut trans = 1.0;
                    for k in s + 1..=t {
                        trans *= (delta.at2(k, m) * a).exp();
                    }
                    acc += c.at2(t, n) * trans * delta.at2(s, m) * b.at2(s, n) * x.at2(s, m);
                }
            }
            y.set2(t, m, acc + d_skip.data[m] * x.at2(t, m));
        }
    }
    Ok(y)
}

/// Run the tape scan primitive on plain tensors (same semantics the model
/// uses), returning (y_with_skip, h).
pub fn ssm_scan(
    x: &Tensor,
    delta: &Tensor,
    a_log: &Tensor,
    b: &Tensor,
    c: &Tensor,
    d_skip: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let mut tape = Tape::new();
    let xid = tape.leaf(x.clone());
    let did = tape.leaf(delta.clone());
    let alid = tape.leaf(a_log.clone());
    let bid = tape.leaf(b.clone());
    let cid = tape.leaf(c.clone());
    let ea = tape.exp(alid)?;
    let a = tape.neg(ea)?;
    let y = tape.push(Op::SsmScan {
        x: xid,
        delta: did,
        a,
        b: bid,
        c: cid,
    })?;
    let h = tape.aux(y).expect("scan aux").hidden.clone();
    let mut out = tape.value(y).clone();
    for t in 0..x.shape[0] {
        for m in 0..x.shape[1] {
            let v = out.at2(t, m) + d_skip.data[m] * x.at2(t, m);
            out.set2(t, m, v);
        }
    }
    Ok((out, h))
}
