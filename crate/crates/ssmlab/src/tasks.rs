//! Synthetic desk-scale tasks (copy/induction, needle-in-a-haystack
//! retrieval, character-level LM over a seeded grammar), a deterministic
//! training loop with gradient clipping, and evaluation metrics.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, SsmError};
use crate::ssm::{Intervention, Model};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Copy,
    Needle,
    Charlm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub kind: TaskKind,
    pub vocab_size: usize,
    pub seq_len: usize,
    pub n_train: usize,
    pub n_eval: usize,
    pub seed: u64,
}

/// One sequence plus its scoring mask. `score_mask[i]` marks position `i`
/// as scored for predicting `tokens[i + 1]`; the last entry is unused.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskRecord {
    pub tokens: Vec<usize>,
    pub score_mask: Vec<bool>,
}

impl TaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 || self.seq_len < 2 {
            return Err(SsmError::InvalidConfig(
                "task needs vocab_size >= 2 and seq_len >= 2".into(),
            ));
        }
        match self.kind {
            TaskKind::Copy => {
                if self.seq_len % 2 != 0 {
                    return Err(SsmError::InvalidConfig(
                        "copy task needs an even seq_len".into(),
                    ));
                }
            }
            TaskKind::Needle => {
                // key pair (2) + query marker + key (2) + answer (1)
                if self.seq_len < 5 {
                    return Err(SsmError::InvalidConfig(
                        "needle task needs seq_len >= 5".into(),
                    ));
                }
                if self.vocab_size < 5 {
                    return Err(SsmError::InvalidConfig(
                        "needle task needs vocab_size >= 5 (marker + keys + values)"
                            .into(),
                    ));
                }
            }
            TaskKind::Charlm => {}
        }
        Ok(())
    }
}

fn gen_copy(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> TaskRecord {
    let half = spec.seq_len / 2;
    let prefix: Vec<usize> = (0..half).map(|_| rng.gen_range(0..spec.vocab_size)).collect();
    let mut tokens = prefix.clone();
    tokens.extend_from_slice(&prefix);
    // score predictions whose target lies in the second half
    let mut mask = vec![false; spec.seq_len];
    for i in half - 1..spec.seq_len - 1 {
        mask[i] = true;
    }
    TaskRecord {
        tokens,
        score_mask: mask,
    }
}

/// Needle layout: token 0 is the query marker, keys live in
/// [1, 1 + n_keys), values in [1 + n_keys, vocab). Filler is drawn from the
/// key range (never the value range), so the answer value occurs exactly
/// once in the context: inside the planted (key, value) pair.
fn needle_ranges(vocab: usize) -> (usize, usize) {
    let n_keys = (vocab - 1) / 2;
    (1, 1 + n_keys)
}

fn gen_needle(spec: &TaskSpec, rng: &mut ChaCha8Rng) -> TaskRecord {
    let (key_lo, key_hi) = needle_ranges(spec.vocab_size);
    let key = rng.gen_range(key_lo..key_hi);
    let value = rng.gen_range(key_hi..spec.vocab_size);
    let len = spec.seq_len;
    // suffix: [marker, key, value]; the pair sits somewhere in the body
    let body_len = len - 3;
    let pair_pos = rng.gen_range(0..=body_len - 2);
    let mut tokens = Vec::with_capacity(len);
    for i in 0..body_len {
        if i == pair_pos {
            tokens.push(key);
        } else if i == pair_pos + 1 {
            tokens.push(value);
        } else {
            tokens.push(rng.gen_range(key_lo..key_hi));
        }
    }
    tokens.push(0);
    tokens.push(key);
    tokens.push(value);
    let mut mask = vec![false; len];
    mask[len - 2] = true; // score only the answer value
    TaskRecord {
        tokens,
        score_mask: mask,
    }
}

/// Seeded second-order grammar with planted facts: next ~ P(· | prev two
/// tokens) from a concentrated random transition table, except each
/// designated key token deterministically emits its fact value. The
/// second-order dependence makes the task unsolvable from the current token
/// alone, so the temporal (mixer) path must carry signal. Keys are the even
/// tokens in the upper half of the vocabulary; facts map
/// key k -> (k + vocab/4) mod vocab.
pub fn charlm_facts(vocab: usize) -> Vec<(usize, usize)> {
    (vocab / 2..vocab)
        .filter(|k| k % 2 == 0)
        .map(|k| (k, (k + vocab / 4).max(1) % vocab))
        .collect()
}

struct CharlmGrammar {
    /// vocab² × vocab row-stochastic transition table indexed by
    /// (prev2 · vocab + prev1).
    trans: Vec<f64>,
    vocab: usize,
    fact: Vec<Option<usize>>,
}

impl CharlmGrammar {
    fn new(vocab: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut trans = vec![0.0; vocab * vocab * vocab];
        for r in 0..vocab * vocab {
            let row = &mut trans[r * vocab..(r + 1) * vocab];
            let mut total = 0.0;
            for v in row.iter_mut() {
                let u: f64 = rng.gen_range(0.0..1.0);
                *v = u * u * u * u; // powering concentrates the distribution
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let mut fact = vec![None; vocab];
        for (k, v) in charlm_facts(vocab) {
            fact[k] = Some(v);
        }
        CharlmGrammar { trans, vocab, fact }
    }

    fn next(&self, prev2: usize, prev1: usize, rng: &mut ChaCha8Rng) -> usize {
        if let Some(v) = self.fact[prev1] {
            return v;
        }
        let r = prev2 * self.vocab + prev1;
        let row = &self.trans[r * self.vocab..(r + 1) * self.vocab];
        let mut u: f64 = rng.gen_range(0.0..1.0);
        for (t, &p) in row.iter().enumerate() {
            u -= p;
            if u <= 0.0 {
                return t;
            }
        }
        self.vocab - 1
    }
}

fn gen_charlm(spec: &TaskSpec, grammar: &CharlmGrammar, rng: &mut ChaCha8Rng) -> TaskRecord {
    let mut tokens = Vec::with_capacity(spec.seq_len);
    tokens.push(rng.gen_range(0..spec.vocab_size));
    if spec.seq_len > 1 {
        let second = match grammar.fact[tokens[0]] {
            Some(v) => v,
            None => rng.gen_range(0..spec.vocab_size),
        };
        tokens.push(second);
    }
    for _ in 2..spec.seq_len {
        let prev1 = tokens[tokens.len() - 1];
        let prev2 = tokens[tokens.len() - 2];
        tokens.push(grammar.next(prev2, prev1, rng));
    }
    let mut mask = vec![true; spec.seq_len];
    mask[spec.seq_len - 1] = false;
    TaskRecord {
        tokens,
        score_mask: mask,
    }
}

/// Generates (train set, eval set) deterministically from the spec's seed.
pub fn generate_task(spec: &TaskSpec) -> Result<(Vec<TaskRecord>, Vec<TaskRecord>)> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let grammar = match spec.kind {
        TaskKind::Charlm => Some(CharlmGrammar::new(spec.vocab_size, spec.seed ^ 0x5eed)),
        _ => None,
    };
    let gen = |n: usize, rng: &mut ChaCha8Rng| -> Vec<TaskRecord> {
        (0..n)
            .map(|_| match spec.kind {
                TaskKind::Copy => gen_copy(spec, rng),
                TaskKind::Needle => gen_needle(spec, rng),
                TaskKind::Charlm => gen_charlm(spec, grammar.as_ref().unwrap(), rng),
            })
            .collect()
    };
    let train = gen(spec.n_train, &mut rng);
    let eval = gen(spec.n_eval, &mut rng);
    Ok((train, eval))
}

/// Serializes records as newline-delimited JSON, one record per line.
pub fn records_to_ndjson(records: &[TaskRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Parses NDJSON task records. Blank lines are skipped; any malformed line
/// is an error (never a panic).
pub fn records_from_ndjson(text: &str) -> Result<Vec<TaskRecord>> {
    let mut out = Vec::new();
    for line in text.lines() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: TaskRecord = serde_json::from_str(line)?;
        if rec.score_mask.len() != rec.tokens.len() {
            return Err(SsmError::InvalidConfig(format!(
                "record mask length {} does not match token length {}",
                rec.score_mask.len(),
                rec.tokens.len()
            )));
        }
        out.push(rec);
    }
    Ok(out)
}

/// Cross-entropy SGD with global gradient-norm clipping at 1.0. Samples one
/// record per step from a seeded stream; returns the per-step loss curve.
/// The model is updated in place (it is the checkpoint).
pub fn train(
    model: &mut Model,
    train_set: &[TaskRecord],
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<Vec<f64>> {
    if train_set.is_empty() {
        return Err(SsmError::EmptyInput("train"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut curve = Vec::with_capacity(steps);
    for step in 0..steps {
        let rec = &train_set[rng.gen_range(0..train_set.len())];
        let mut fwd = model.forward(&rec.tokens, false, None)?;
        let loss = model.loss_on(&mut fwd, &rec.tokens, &rec.score_mask)?;
        let loss_val = fwd.tape.value(loss).item();
        if !loss_val.is_finite() {
            return Err(SsmError::Diverged(step));
        }
        curve.push(loss_val);

        let mut grads = model.param_grads(&fwd, loss)?;
        let norm_sq: f64 = grads
            .iter()
            .flat_map(|(_, g)| g.data.iter())
            .map(|v| v * v)
            .sum();
        let norm = norm_sq.sqrt();
        if norm > 1.0 {
            let s = 1.0 / norm;
            for (_, g) in grads.iter_mut() {
                for v in g.data.iter_mut() {
                    *v *= s;
                }
            }
        }
        for ((name, p), (gname, g)) in model.named_params_mut().into_iter().zip(&grads) {
            debug_assert_eq!(&name, gname);
            for (pv, gv) in p.data.iter_mut().zip(&g.data) {
                *pv -= lr * gv;
            }
        }
    }
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub top1_acc: f64,
    pub perplexity: f64,
    /// Mean accuracy per scored position; None where no sequence scores it.
    pub per_position: Vec<Option<f64>>,
}

/// Evaluates any logits function (T×V rows for T tokens) over an eval set.
/// Scored positions only; perplexity = exp(mean NLL). Reductions are sorted
/// before summation so the report is bit-identical under eval-set reordering.
pub fn evaluate_with<F>(logits_fn: F, eval_set: &[TaskRecord]) -> Result<EvalReport>
where
    F: Fn(&[usize]) -> Result<Tensor>,
{
    if eval_set.is_empty() {
        return Err(SsmError::EmptyInput("evaluate"));
    }
    let max_pos = eval_set
        .iter()
        .map(|r| r.tokens.len().saturating_sub(1))
        .max()
        .unwrap();
    let mut nlls: Vec<f64> = Vec::new();
    let mut hits = 0usize;
    let mut total = 0usize;
    let mut pos_hits = vec![0usize; max_pos];
    let mut pos_total = vec![0usize; max_pos];

    for rec in eval_set {
        if rec.score_mask.len() != rec.tokens.len() {
            return Err(SsmError::InvalidConfig(
                "score mask length mismatch".into(),
            ));
        }
        let logits = logits_fn(&rec.tokens)?;
        let v = logits.shape[1];
        for i in 0..rec.tokens.len().saturating_sub(1) {
            if !rec.score_mask[i] {
                continue;
            }
            let target = rec.tokens[i + 1];
            let row = logits.row(i);
            // log-softmax NLL of the target
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
            nlls.push(lse - row[target]);
            let mut best = 0usize;
            for j in 1..v {
                if row[j] > row[best] {
                    best = j;
                }
            }
            total += 1;
            pos_total[i] += 1;
            if best == target {
                hits += 1;
                pos_hits[i] += 1;
            }
        }
    }
    if total == 0 {
        return Err(SsmError::EmptyInput("evaluate: no scored positions"));
    }
    nlls.sort_by(f64::total_cmp);
    let mean_nll: f64 = nlls.iter().sum::<f64>() / nlls.len() as f64;
    let per_position = (0..max_pos)
        .map(|i| {
            if pos_total[i] > 0 {
                Some(pos_hits[i] as f64 / pos_total[i] as f64)
            } else {
                None
            }
        })
        .collect();
    Ok(EvalReport {
        top1_acc: hits as f64 / total as f64,
        perplexity: mean_nll.exp(),
        per_position,
    })
}

pub fn evaluate(model: &Model, eval_set: &[TaskRecord]) -> Result<EvalReport> {
    evaluate_with(|tokens| model.logits(tokens, None), eval_set)
}

/// Perplexity before and after zeroing `dims` at `layer`'s hook site.
pub fn perturb_ppl(
    model: &Model,
    layer: usize,
    dims: &[usize],
    eval_set: &[TaskRecord],
) -> Result<(f64, f64)> {
    let before = evaluate(model, eval_set)?.perplexity;
    if dims.is_empty() {
        return Ok((before, before));
    }
    let iv = Intervention::Ablate {
        layer,
        dims: dims.to_vec(),
    };
    let after =
        evaluate_with(|tokens| model.logits(tokens, Some(&iv)), eval_set)?.perplexity;
    Ok((before, after))
}
