//! Sparse autoencoder over recorded activations plus a sparse-coding
//! dictionary learner, and the associated feature statistics
//! (reconstruction error, sparsity %, active-feature % at threshold 0.1).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{gradient, Op, Tape};
use crate::error::{Result, SsmError};
use crate::tensor::Tensor;

/// Latent entries with |a| below this count as zero for the sparsity metric.
pub const SPARSITY_EPS: f64 = 1e-6;
/// A latent dimension is "active" when its mean activation exceeds this.
pub const ACTIVE_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SAEConfig {
    pub d_in: usize,
    pub d_hidden: usize,
    pub d_latent: usize,
    pub l1_weight: f64,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl SAEConfig {
    /// Scales the 768 -> 460 -> 230 funnel down to `d_in`, preserving the
    /// ratios.
    pub fn scaled_for(d_in: usize) -> Self {
        let scale = |x: usize| ((d_in * x) as f64 / 768.0).round().max(1.0) as usize;
        let d_hidden = scale(460).min(d_in);
        SAEConfig {
            d_in,
            d_hidden,
            d_latent: scale(230).min(d_hidden),
            l1_weight: 1e-3,
            steps: 500,
            lr: 0.05,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_hidden == 0 || self.d_latent == 0 {
            return Err(SsmError::InvalidConfig("SAE dims must be nonzero".into()));
        }
        if !(self.d_latent <= self.d_hidden && self.d_hidden <= self.d_in) {
            return Err(SsmError::InvalidConfig(format!(
                "SAE funnel violated: need d_latent <= d_hidden <= d_in, got {} / {} / {}",
                self.d_latent, self.d_hidden, self.d_in
            )));
        }
        if !(self.l1_weight >= 0.0 && self.l1_weight.is_finite()) {
            return Err(SsmError::InvalidConfig(
                "l1_weight must be finite and >= 0".into(),
            ));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(SsmError::InvalidConfig("lr must be finite and > 0".into()));
        }
        Ok(())
    }
}

/// Two-layer ReLU encoder (d_in -> d_hidden -> d_latent) with a linear
/// decoder back to d_in.
#[derive(Debug, Clone)]
pub struct Sae {
    pub config: SAEConfig,
    /// d_in × d_hidden
    pub w1: Tensor,
    pub b1: Tensor,
    /// d_hidden × d_latent
    pub w2: Tensor,
    pub b2: Tensor,
    /// d_latent × d_in
    pub w_dec: Tensor,
    pub b_dec: Tensor,
}

impl Sae {
    pub fn init(config: SAEConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut uniform = |rows: usize, cols: usize| {
            let s = (1.0 / rows as f64).sqrt();
            Tensor::new(
                vec![rows, cols],
                (0..rows * cols).map(|_| rng.gen_range(-s..s)).collect(),
            )
        };
        let w1 = uniform(config.d_in, config.d_hidden);
        let w2 = uniform(config.d_hidden, config.d_latent);
        let w_dec = uniform(config.d_latent, config.d_in);
        Ok(Sae {
            b1: Tensor::zeros(&[config.d_hidden]),
            b2: Tensor::zeros(&[config.d_latent]),
            b_dec: Tensor::zeros(&[config.d_in]),
            config,
            w1,
            w2,
            w_dec,
        })
    }

    pub fn named_params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        vec![
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
            ("w_dec", &mut self.w_dec),
            ("b_dec", &mut self.b_dec),
        ]
    }

    /// Latent codes for a batch of rows: ReLU(ReLU(x·W1 + b1)·W2 + b2).
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let (_, z, _) = self.graph(&mut tape, x)?;
        Ok(tape.value(z).clone())
    }

    /// Linear decode of latent codes back to input space.
    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let zi = tape.leaf(z.clone());
        let wd = tape.leaf(self.w_dec.clone());
        let bd = tape.leaf(self.b_dec.clone());
        let prod = tape.matmul(zi, wd)?;
        let out = tape.add(prod, bd)?;
        Ok(tape.value(out).clone())
    }

    /// Mean per-sample squared reconstruction error over a batch.
    pub fn reconstruction_error(&self, x: &Tensor) -> Result<f64> {
        let xhat = self.decode(&self.encode(x)?)?;
        let n = x.shape[0] as f64;
        let sq: f64 = x
            .data
            .iter()
            .zip(&xhat.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        Ok(sq / n)
    }

    /// Builds the autoencoder graph on a tape. Returns (param leaves in
    /// named order, latent node, loss node).
    fn graph(&self, tape: &mut Tape, x: &Tensor) -> Result<(Vec<usize>, usize, usize)> {
        let n = x.shape[0] as f64;
        let xi = tape.leaf(x.clone());
        let w1 = tape.leaf(self.w1.clone());
        let b1 = tape.leaf(self.b1.clone());
        let w2 = tape.leaf(self.w2.clone());
        let b2 = tape.leaf(self.b2.clone());
        let wd = tape.leaf(self.w_dec.clone());
        let bd = tape.leaf(self.b_dec.clone());

        let h_pre = tape.matmul(xi, w1)?;
        let h_pre = tape.add(h_pre, b1)?;
        let h = tape.push(Op::Relu(h_pre))?;
        let z_pre = tape.matmul(h, w2)?;
        let z_pre = tape.add(z_pre, b2)?;
        let z = tape.push(Op::Relu(z_pre))?;
        let xhat = tape.matmul(z, wd)?;
        let xhat = tape.add(xhat, bd)?;

        let neg_x = tape.neg(xi)?;
        let diff = tape.add(xhat, neg_x)?;
        let sq = tape.mul(diff, diff)?;
        let recon_sum = tape.sum(sq)?;
        let recon = tape.scale(recon_sum, 1.0 / n)?;
        let abs_z = tape.push(Op::Abs(z))?;
        let l1_sum = tape.sum(abs_z)?;
        let l1 = tape.scale(l1_sum, self.config.l1_weight / n)?;
        let loss = tape.add(recon, l1)?;
        Ok((vec![w1, b1, w2, b2, wd, bd], z, loss))
    }
}

/// Trains an SAE on `acts` (N × d_in) by seeded minibatch SGD on
/// ||x - dec(enc(x))||^2 + l1_weight·||enc(x)||_1. Returns the model and the
/// per-step loss curve.
pub fn train_sae(acts: &Tensor, config: SAEConfig) -> Result<(Sae, Vec<f64>)> {
    config.validate()?;
    let n = acts.shape[0];
    if acts.shape.len() != 2 || acts.shape[1] != config.d_in {
        return Err(SsmError::InvalidConfig(format!(
            "activation matrix shape {:?} does not match d_in {}",
            acts.shape, config.d_in
        )));
    }
    if n < 10 * config.d_latent {
        return Err(SsmError::InvalidConfig(format!(
            "need at least 10·d_latent = {} samples, got {n}",
            10 * config.d_latent
        )));
    }
    acts.check_finite("train_sae")?;

    let mut sae = Sae::init(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let batch = n.min(16);
    let mut curve = Vec::with_capacity(config.steps);

    for step in 0..config.steps {
        let rows: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..n)).collect();
        let mut data = Vec::with_capacity(batch * config.d_in);
        for &r in &rows {
            data.extend_from_slice(acts.row(r));
        }
        let x = Tensor::new(vec![batch, config.d_in], data);

        let mut tape = Tape::new();
        let (params, _, loss) = sae.graph(&mut tape, &x)?;
        let loss_val = tape.value(loss).item();
        if !loss_val.is_finite() {
            return Err(SsmError::Diverged(step));
        }
        curve.push(loss_val);

        let grads = gradient(&tape, loss, &params)?;
        for (pid, (_, p)) in params.iter().zip(sae.named_params_mut()) {
            let g = &grads[pid];
            for (pv, gv) in p.data.iter_mut().zip(&g.data) {
                *pv -= config.lr * gv;
            }
        }
    }
    Ok((sae, curve))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeMetrics {
    pub reconstruction_error: f64,
    pub sparsity_pct: f64,
    pub active_features_pct: f64,
}

/// Table-shaped feature statistics: sparsity is the % of latent entries with
/// |a| < 1e-6; active features is the % of latent dimensions whose mean
/// activation exceeds 0.1.
pub fn sae_metrics(latents: &Tensor, recon_err: f64) -> Result<SaeMetrics> {
    if latents.shape.len() != 2 || latents.data.is_empty() {
        return Err(SsmError::EmptyInput("sae_metrics"));
    }
    latents.check_finite("sae_metrics")?;
    let (n, d) = (latents.shape[0], latents.shape[1]);
    let zeros = latents
        .data
        .iter()
        .filter(|a| a.abs() < SPARSITY_EPS)
        .count();
    let active = (0..d)
        .filter(|&j| {
            let mean = (0..n).map(|i| latents.at2(i, j)).sum::<f64>() / n as f64;
            mean > ACTIVE_THRESHOLD
        })
        .count();
    Ok(SaeMetrics {
        reconstruction_error: recon_err,
        sparsity_pct: 100.0 * zeros as f64 / latents.data.len() as f64,
        active_features_pct: 100.0 * active as f64 / d as f64,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictConfig {
    pub dict_size: usize,
    pub alpha: f64,
    pub iterations: usize,
}

impl DictConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dict_size == 0 {
            return Err(SsmError::InvalidConfig("dict_size must be >= 1".into()));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(SsmError::InvalidConfig(
                "alpha must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct DictResult {
    /// dict_size × d, rows unit-norm.
    pub atoms: Tensor,
    /// N × dict_size sparse codes.
    pub codes: Tensor,
    /// Mean per-sample squared reconstruction error at the final state.
    pub reconstruction_error: f64,
    /// Penalized objective after each alternation (non-increasing).
    pub objective_curve: Vec<f64>,
    /// (iteration, atom index) for every degenerate-atom re-initialization.
    pub reinit_events: Vec<(usize, usize)>,
}

fn soft_threshold(x: f64, t: f64) -> f64 {
    if x > t {
        x - t
    } else if x < -t {
        x + t
    } else {
        0.0
    }
}

/// One lasso coordinate-descent solve for a single sample against unit-norm
/// atoms. `code` is updated in place.
fn sparse_code(x: &[f64], atoms: &Tensor, alpha: f64, code: &mut [f64]) {
    let k = atoms.shape[0];
    let d = atoms.shape[1];
    // residual r = x - atoms^T code
    let mut r: Vec<f64> = x.to_vec();
    for j in 0..k {
        if code[j] != 0.0 {
            for (rv, av) in r.iter_mut().zip(atoms.row(j)) {
                *rv -= code[j] * av;
            }
        }
    }
    for _sweep in 0..20 {
        let mut max_delta = 0.0f64;
        for j in 0..k {
            let aj = atoms.row(j);
            let mut rho = 0.0;
            for i in 0..d {
                rho += aj[i] * (r[i] + code[j] * aj[i]);
            }
            let new = soft_threshold(rho, alpha);
            let delta = new - code[j];
            if delta != 0.0 {
                for i in 0..d {
                    r[i] -= delta * aj[i];
                }
                code[j] = new;
                max_delta = max_delta.max(delta.abs());
            }
        }
        if max_delta < 1e-12 {
            break;
        }
    }
}

fn penalized_objective(data: &Tensor, atoms: &Tensor, codes: &Tensor, alpha: f64) -> f64 {
    let (n, d) = (data.shape[0], data.shape[1]);
    let k = atoms.shape[0];
    let mut obj = 0.0;
    for i in 0..n {
        for c in 0..d {
            let mut xhat = 0.0;
            for j in 0..k {
                xhat += codes.at2(i, j) * atoms.at2(j, c);
            }
            let e = data.at2(i, c) - xhat;
            obj += 0.5 * e * e;
        }
        for j in 0..k {
            obj += alpha * codes.at2(i, j).abs();
        }
    }
    obj
}

/// Alternating sparse coding (coordinate-descent lasso) and unit-norm atom
/// updates. A degenerate atom (zero update norm) is re-seeded from the data
/// row with the largest current residual; each such event is recorded.
pub fn dict_learn(data: &Tensor, config: &DictConfig) -> Result<DictResult> {
    config.validate()?;
    if data.shape.len() != 2 || data.data.is_empty() {
        return Err(SsmError::EmptyInput("dict_learn"));
    }
    data.check_finite("dict_learn")?;
    let (n, d) = (data.shape[0], data.shape[1]);
    if config.dict_size > n {
        return Err(SsmError::InvalidConfig(format!(
            "dict_size {} exceeds sample count {n}",
            config.dict_size
        )));
    }
    let k = config.dict_size;

    // Initialize atoms from normalized data rows (zero rows fall back to a
    // coordinate vector).
    let mut atoms = Tensor::zeros(&[k, d]);
    for j in 0..k {
        let row = data.row(j * n / k.max(1));
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for c in 0..d {
            atoms.set2(j, c, if norm > 0.0 { row[c] / norm } else { 0.0 });
        }
        if norm == 0.0 {
            atoms.set2(j, j % d, 1.0);
        }
    }

    let mut codes = Tensor::zeros(&[n, k]);
    let mut objective_curve = Vec::with_capacity(config.iterations);
    let mut reinit_events = Vec::new();

    for it in 0..config.iterations {
        // sparse coding step
        for i in 0..n {
            let x = data.row(i).to_vec();
            let mut code = codes.row(i).to_vec();
            sparse_code(&x, &atoms, config.alpha, &mut code);
            for j in 0..k {
                codes.set2(i, j, code[j]);
            }
        }

        // atom updates: d_j = R c_j / ||R c_j|| with R the residual
        // excluding atom j's own contribution.
        for j in 0..k {
            let mut upd = vec![0.0f64; d];
            let mut used = false;
            for i in 0..n {
                let cij = codes.at2(i, j);
                if cij == 0.0 {
                    continue;
                }
                used = true;
                for c in 0..d {
                    let mut xhat = 0.0;
                    for jj in 0..k {
                        if jj != j {
                            xhat += codes.at2(i, jj) * atoms.at2(jj, c);
                        }
                    }
                    upd[c] += cij * (data.at2(i, c) - xhat);
                }
            }
            let norm = upd.iter().map(|v| v * v).sum::<f64>().sqrt();
            if used && norm > 1e-12 {
                for c in 0..d {
                    atoms.set2(j, c, upd[c] / norm);
                }
            } else {
                // degenerate: re-seed from the worst-reconstructed sample
                let mut worst = (0usize, -1.0f64);
                for i in 0..n {
                    let mut e = 0.0;
                    for c in 0..d {
                        let mut xhat = 0.0;
                        for jj in 0..k {
                            xhat += codes.at2(i, jj) * atoms.at2(jj, c);
                        }
                        let r = data.at2(i, c) - xhat;
                        e += r * r;
                    }
                    if e > worst.1 {
                        worst = (i, e);
                    }
                }
                let row = data.row(worst.0);
                let rn = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                for c in 0..d {
                    atoms.set2(j, c, if rn > 0.0 { row[c] / rn } else { 0.0 });
                }
                if rn == 0.0 {
                    atoms.set2(j, j % d, 1.0);
                }
                for i in 0..n {
                    codes.set2(i, j, 0.0);
                }
                reinit_events.push((it, j));
            }
        }

        objective_curve.push(penalized_objective(data, &atoms, &codes, config.alpha));
    }

    let mut recon = 0.0;
    for i in 0..n {
        for c in 0..d {
            let mut xhat = 0.0;
            for j in 0..k {
                xhat += codes.at2(i, j) * atoms.at2(j, c);
            }
            let e = data.at2(i, c) - xhat;
            recon += e * e;
        }
    }
    Ok(DictResult {
        atoms,
        codes,
        reconstruction_error: recon / n as f64,
        objective_curve,
        reinit_events,
    })
}
