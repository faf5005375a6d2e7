//! Tiny autoregressive policy: stacked tanh recurrent cells over token
//! embeddings with an output projection shared across time steps.
//!
//! Everything is f64 and exact: forward passes cache per-position hidden
//! states for the probe's feature extractor, and the hand-written backward
//! pass is validated against finite differences in the tests.

use rand_chacha::ChaCha20Rng;

use crate::env::{self, PromptInstance, TaskSpec, Token};
use crate::error::{CoreError, Result};
use crate::numerics;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PolicyConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub seed: u64,
}

impl PolicyConfig {
    /// Default desk-scale shape for a given vocabulary.
    pub fn for_vocab(vocab_size: usize, seed: u64) -> Self {
        PolicyConfig {
            vocab_size,
            embed_dim: 16,
            hidden_dim: 32,
            num_layers: 2,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(CoreError::InvalidConfig(format!(
                "vocab size must be at least 2, got {}",
                self.vocab_size
            )));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.num_layers == 0 {
            return Err(CoreError::InvalidConfig(
                "embed_dim, hidden_dim and num_layers must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Offsets of each parameter block inside the flat vector.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub embed: std::ops::Range<usize>,
    pub cells: Vec<CellLayout>,
    pub out_w: std::ops::Range<usize>,
    pub out_b: std::ops::Range<usize>,
    pub total: usize,
}

#[derive(Debug, Clone)]
pub struct CellLayout {
    pub w_in: std::ops::Range<usize>,
    pub w_h: std::ops::Range<usize>,
    pub bias: std::ops::Range<usize>,
    pub in_dim: usize,
}

pub fn layout(cfg: &PolicyConfig) -> ParamLayout {
    let v = cfg.vocab_size;
    let e = cfg.embed_dim;
    let h = cfg.hidden_dim;
    let mut cursor = 0usize;
    let mut range = |len: usize| {
        let r = cursor..cursor + len;
        cursor += len;
        r
    };
    let embed = range(v * e);
    let mut cells = Vec::with_capacity(cfg.num_layers);
    for l in 0..cfg.num_layers {
        let in_dim = if l == 0 { e } else { h };
        cells.push(CellLayout {
            w_in: range(h * in_dim),
            w_h: range(h * h),
            bias: range(h),
            in_dim,
        });
    }
    let out_w = range(v * h);
    let out_b = range(v);
    ParamLayout {
        embed,
        cells,
        out_w,
        out_b,
        total: cursor,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    pub values: Vec<f64>,
}

impl PolicyParams {
    pub fn zeros(cfg: &PolicyConfig) -> Self {
        PolicyParams {
            values: vec![0.0; layout(cfg).total],
        }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }
}

/// Seeded init: weights are zero-mean normal with scale 1/sqrt(fan-in),
/// biases start at zero.
pub fn init_params(cfg: &PolicyConfig) -> PolicyParams {
    let lay = layout(cfg);
    let mut values = vec![0.0; lay.total];
    let mut rng = rng::stream(cfg.seed, rng::tag::PARAM_INIT, 0, 0);
    let fill = |range: std::ops::Range<usize>, scale: f64, values: &mut Vec<f64>, rng: &mut ChaCha20Rng| {
        for slot in &mut values[range] {
            *slot = scale * rng::standard_normal(rng);
        }
    };
    fill(lay.embed.clone(), 1.0 / (cfg.embed_dim as f64).sqrt(), &mut values, &mut rng);
    for cell in &lay.cells {
        fill(cell.w_in.clone(), 1.0 / (cell.in_dim as f64).sqrt(), &mut values, &mut rng);
        fill(cell.w_h.clone(), 1.0 / (cfg.hidden_dim as f64).sqrt(), &mut values, &mut rng);
        // Biases stay zero.
    }
    fill(lay.out_w.clone(), 1.0 / (cfg.hidden_dim as f64).sqrt(), &mut values, &mut rng);
    PolicyParams { values }
}

// Dense helpers over row-major blocks.

fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    for r in 0..rows {
        out[r] = numerics::dot(&w[r * cols..(r + 1) * cols], x);
    }
}

/// out[c] += sum_r w[r, c] * y[r]
fn matvec_transpose_acc(w: &[f64], rows: usize, cols: usize, y: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        let yr = y[r];
        if yr == 0.0 {
            continue;
        }
        let row = &w[r * cols..(r + 1) * cols];
        for c in 0..cols {
            out[c] += row[c] * yr;
        }
    }
}

/// g[r, c] += y[r] * x[c]
fn outer_acc(g: &mut [f64], rows: usize, cols: usize, y: &[f64], x: &[f64]) {
    debug_assert_eq!(g.len(), rows * cols);
    for r in 0..rows {
        let yr = y[r];
        if yr == 0.0 {
            continue;
        }
        let row = &mut g[r * cols..(r + 1) * cols];
        for c in 0..cols {
            row[c] += yr * x[c];
        }
    }
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.iter().map(|e| e / z).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|l| l - lse).collect()
}

/// Entropy in nats of the next-token distribution for the given logits.
pub fn entropy_of_logits(logits: &[f64]) -> f64 {
    let lp = log_softmax(logits);
    -lp.iter().map(|&l| if l.is_finite() { l.exp() * l } else { 0.0 }).sum::<f64>()
}

fn check_tokens(cfg: &PolicyConfig, tokens: &[Token]) -> Result<()> {
    for &t in tokens {
        if t >= cfg.vocab_size {
            return Err(CoreError::InvalidToken {
                token: t,
                vocab: cfg.vocab_size,
            });
        }
    }
    Ok(())
}

/// Advance every layer by one token. `prev` is None at the first position
/// (zero initial state).
fn advance(
    params: &PolicyParams,
    cfg: &PolicyConfig,
    lay: &ParamLayout,
    prev: Option<&Vec<Vec<f64>>>,
    token: Token,
) -> Vec<Vec<f64>> {
    let h = cfg.hidden_dim;
    let embed = &params.values[lay.embed.clone()];
    let mut states = Vec::with_capacity(cfg.num_layers);
    let mut input: Vec<f64> = embed[token * cfg.embed_dim..(token + 1) * cfg.embed_dim].to_vec();
    for (l, cell) in lay.cells.iter().enumerate() {
        let mut pre = vec![0.0; h];
        matvec(&params.values[cell.w_in.clone()], h, cell.in_dim, &input, &mut pre);
        if let Some(prev) = prev {
            let mut rec = vec![0.0; h];
            matvec(&params.values[cell.w_h.clone()], h, h, &prev[l], &mut rec);
            for i in 0..h {
                pre[i] += rec[i];
            }
        }
        let bias = &params.values[cell.bias.clone()];
        let state: Vec<f64> = (0..h).map(|i| (pre[i] + bias[i]).tanh()).collect();
        input = state.clone();
        states.push(state);
    }
    states
}

fn logits_from_top(params: &PolicyParams, cfg: &PolicyConfig, lay: &ParamLayout, top: &[f64]) -> Vec<f64> {
    let mut logits = vec![0.0; cfg.vocab_size];
    matvec(&params.values[lay.out_w.clone()], cfg.vocab_size, cfg.hidden_dim, top, &mut logits);
    let out_b = &params.values[lay.out_b.clone()];
    for (l, b) in logits.iter_mut().zip(out_b) {
        *l += b;
    }
    logits
}

/// Next-token logits after consuming `prefix`, plus the per-layer hidden
/// states at the last position.
pub fn forward_logits(
    params: &PolicyParams,
    cfg: &PolicyConfig,
    prefix: &[Token],
) -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
    if prefix.is_empty() {
        return Err(CoreError::EmptyInput("forward_logits needs a non-empty prefix".into()));
    }
    check_tokens(cfg, prefix)?;
    let lay = layout(cfg);
    let mut state: Option<Vec<Vec<f64>>> = None;
    for &t in prefix {
        state = Some(advance(params, cfg, &lay, state.as_ref(), t));
    }
    let state = state.expect("non-empty prefix");
    let logits = logits_from_top(params, cfg, &lay, state.last().expect("at least one layer"));
    Ok((logits, state))
}

/// Teacher-forced forward pass over a full sequence, caching hidden states
/// and logits at every position.
pub(crate) struct SeqCache {
    pub hs: Vec<Vec<Vec<f64>>>,
    pub logits: Vec<Vec<f64>>,
}

pub(crate) fn forward_seq(params: &PolicyParams, cfg: &PolicyConfig, tokens: &[Token]) -> Result<SeqCache> {
    if tokens.is_empty() {
        return Err(CoreError::EmptyInput("forward pass needs at least one token".into()));
    }
    check_tokens(cfg, tokens)?;
    let lay = layout(cfg);
    let mut hs: Vec<Vec<Vec<f64>>> = Vec::with_capacity(tokens.len());
    let mut logits = Vec::with_capacity(tokens.len());
    for (t, &token) in tokens.iter().enumerate() {
        let state = advance(params, cfg, &lay, if t == 0 { None } else { Some(&hs[t - 1]) }, token);
        logits.push(logits_from_top(params, cfg, &lay, state.last().expect("layer")));
        hs.push(state);
    }
    Ok(SeqCache { hs, logits })
}

/// Per-token per-layer activations plus the sampling-time entropy and
/// log-probability of each generated token.
#[derive(Debug, Clone)]
pub struct HiddenTrace {
    /// hidden[t][l]: layer-l state after consuming position t of the full
    /// sequence (prompt positions first). Length = prompt + generated.
    pub hidden: Vec<Vec<Vec<f64>>>,
    /// Entropy (nats) of the distribution each generated token came from.
    pub entropies: Vec<f64>,
    /// Log-probability of each generated token under that distribution.
    pub logprobs: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct RolloutRecord {
    pub prompt: PromptInstance,
    pub generated: Vec<Token>,
    /// Generated-index of the first answer delimiter; generated length when
    /// the rollout produced none. Everything before it is reasoning.
    pub reasoning_end: usize,
    pub trace: HiddenTrace,
    pub reward: f64,
    /// Sampling-time log-probs, the denominator of later PPO ratios.
    pub behavior_logprobs: Vec<f64>,
}

impl RolloutRecord {
    pub fn reasoning_len(&self) -> usize {
        self.reasoning_end
    }
}

fn sample_index(probs: &[f64], rng: &mut ChaCha20Rng) -> usize {
    use rand::Rng;
    let u: f64 = rng.gen();
    let mut cum = 0.0;
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

/// Sample a response for `prompt`, recording the full hidden trace.
/// Generation stops at the task's end-of-sequence token or after `max_len`
/// tokens; the verifier fills in the binary reward.
pub fn sample_rollout(
    params: &PolicyParams,
    cfg: &PolicyConfig,
    spec: &TaskSpec,
    prompt: &PromptInstance,
    max_len: usize,
    rng: &mut ChaCha20Rng,
) -> Result<RolloutRecord> {
    if max_len == 0 {
        return Err(CoreError::InvalidConfig("max_len must be at least 1".into()));
    }
    check_tokens(cfg, &prompt.tokens)?;
    if prompt.tokens.is_empty() {
        return Err(CoreError::EmptyInput("prompt has no tokens".into()));
    }
    let lay = layout(cfg);
    let eos = spec.eos_token();
    let delim = spec.answer_delimiter();

    let mut hidden: Vec<Vec<Vec<f64>>> = Vec::with_capacity(prompt.tokens.len() + max_len);
    for (t, &token) in prompt.tokens.iter().enumerate() {
        let state = advance(params, cfg, &lay, if t == 0 { None } else { Some(&hidden[t - 1]) }, token);
        hidden.push(state);
    }

    let mut generated: Vec<Token> = Vec::with_capacity(max_len);
    let mut entropies = Vec::with_capacity(max_len);
    let mut logprobs = Vec::with_capacity(max_len);
    loop {
        let top = hidden.last().expect("prompt consumed").last().expect("layer");
        let logits = logits_from_top(params, cfg, &lay, top);
        let probs = softmax(&logits);
        let token = sample_index(&probs, rng);
        entropies.push(entropy_of_logits(&logits));
        logprobs.push(log_softmax(&logits)[token]);
        generated.push(token);
        let state = advance(params, cfg, &lay, hidden.last(), token);
        hidden.push(state);
        if Some(token) == eos || generated.len() == max_len {
            break;
        }
    }

    let reasoning_end = match delim {
        Some(d) => generated.iter().position(|&t| t == d).unwrap_or(generated.len()),
        None => generated.len(),
    };
    let reward = env::verify(spec, prompt, &generated);
    Ok(RolloutRecord {
        prompt: prompt.clone(),
        generated,
        reasoning_end,
        trace: HiddenTrace {
            hidden,
            entropies: entropies.clone(),
            logprobs: logprobs.clone(),
        },
        reward,
        behavior_logprobs: logprobs,
    })
}

/// Build the record a sampled rollout would have produced had it drawn
/// exactly `generated`. Used by enumeration code that walks outcomes.
pub fn teacher_forced_record(
    params: &PolicyParams,
    cfg: &PolicyConfig,
    spec: &TaskSpec,
    prompt: &PromptInstance,
    generated: &[Token],
) -> Result<RolloutRecord> {
    if generated.is_empty() {
        return Err(CoreError::EmptyRollout);
    }
    let mut tokens = prompt.tokens.clone();
    tokens.extend_from_slice(generated);
    let cache = forward_seq(params, cfg, &tokens)?;
    let p = prompt.tokens.len();
    let mut entropies = Vec::with_capacity(generated.len());
    let mut logprobs = Vec::with_capacity(generated.len());
    for (k, &token) in generated.iter().enumerate() {
        let logits = &cache.logits[p - 1 + k];
        entropies.push(entropy_of_logits(logits));
        logprobs.push(log_softmax(logits)[token]);
    }
    let reasoning_end = match spec.answer_delimiter() {
        Some(d) => generated.iter().position(|&t| t == d).unwrap_or(generated.len()),
        None => generated.len(),
    };
    let reward = env::verify(spec, prompt, generated);
    Ok(RolloutRecord {
        prompt: prompt.clone(),
        generated: generated.to_vec(),
        reasoning_end,
        trace: HiddenTrace {
            hidden: cache.hs,
            entropies,
            logprobs: logprobs.clone(),
        },
        reward,
        behavior_logprobs: logprobs,
    })
}

/// Per-token log-probabilities of `generated` under the current params
/// (forward only). Entry k conditions on the prompt plus generated[..k].
pub fn token_logprobs(
    params: &PolicyParams,
    cfg: &PolicyConfig,
    prompt: &[Token],
    generated: &[Token],
) -> Result<Vec<f64>> {
    if prompt.is_empty() {
        return Err(CoreError::EmptyInput("prompt has no tokens".into()));
    }
    if generated.is_empty() {
        return Ok(Vec::new());
    }
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(generated);
    let cache = forward_seq(params, cfg, &tokens)?;
    let p = prompt.len();
    Ok(generated
        .iter()
        .enumerate()
        .map(|(k, &token)| log_softmax(&cache.logits[p - 1 + k])[token])
        .collect())
}

/// Total log-probability of `generated` given `prompt` (forward only).
pub fn sequence_logprob(
    params: &PolicyParams,
    cfg: &PolicyConfig,
    prompt: &[Token],
    generated: &[Token],
) -> Result<f64> {
    if prompt.is_empty() {
        return Err(CoreError::EmptyInput("prompt has no tokens".into()));
    }
    if generated.is_empty() {
        return Ok(0.0);
    }
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(generated);
    let cache = forward_seq(params, cfg, &tokens)?;
    let p = prompt.len();
    let mut total = 0.0;
    for (k, &token) in generated.iter().enumerate() {
        total += log_softmax(&cache.logits[p - 1 + k])[token];
    }
    Ok(total)
}

pub struct WeightedGrad {
    /// Current log-probability of each generated token.
    pub logprobs: Vec<f64>,
    /// Gradient of sum_k weights[k] * logprobs[k] w.r.t. the flat params.
    pub grad: Vec<f64>,
}

/// Backprop through time for a weighted sum of generated-token log-probs.
/// The plain policy-gradient case is weights = 1.
pub fn weighted_logprob_grad(
    params: &PolicyParams,
    cfg: &PolicyConfig,
    prompt: &[Token],
    generated: &[Token],
    weights: &[f64],
) -> Result<WeightedGrad> {
    logprob_grad_with(params, cfg, prompt, generated, |_| weights.to_vec())
}

/// Like [`weighted_logprob_grad`], but the weights are computed from the
/// current per-token log-probs, so callers that need ratio-dependent
/// weights (clipped surrogates) pay for a single forward pass.
pub fn logprob_grad_with<F>(
    params: &PolicyParams,
    cfg: &PolicyConfig,
    prompt: &[Token],
    generated: &[Token],
    weight_fn: F,
) -> Result<WeightedGrad>
where
    F: FnOnce(&[f64]) -> Vec<f64>,
{
    if prompt.is_empty() {
        return Err(CoreError::EmptyInput("prompt has no tokens".into()));
    }
    let lay = layout(cfg);
    if generated.is_empty() {
        let weights = weight_fn(&[]);
        if !weights.is_empty() {
            return Err(CoreError::ShapeMismatch(format!(
                "{} weights for 0 generated tokens",
                weights.len()
            )));
        }
        return Ok(WeightedGrad {
            logprobs: Vec::new(),
            grad: vec![0.0; lay.total],
        });
    }
    let mut tokens = prompt.to_vec();
    tokens.extend_from_slice(generated);
    let cache = forward_seq(params, cfg, &tokens)?;
    let total = tokens.len();
    let p = prompt.len();
    let h = cfg.hidden_dim;
    let v = cfg.vocab_size;
    let layers = cfg.num_layers;

    let mut logprobs = Vec::with_capacity(generated.len());
    for (k, &token) in generated.iter().enumerate() {
        logprobs.push(log_softmax(&cache.logits[p - 1 + k])[token]);
    }
    let weights = weight_fn(&logprobs);
    if weights.len() != generated.len() {
        return Err(CoreError::ShapeMismatch(format!(
            "{} weights for {} generated tokens",
            weights.len(),
            generated.len()
        )));
    }

    let mut grad = vec![0.0; lay.total];
    // dz at position t+1, per layer; carries the recurrent path backwards.
    let mut dz_next: Vec<Vec<f64>> = vec![vec![0.0; h]; layers];
    let embed = params.values[lay.embed.clone()].to_vec();

    for t in (0..total).rev() {
        let mut dh: Vec<Vec<f64>> = vec![vec![0.0; h]; layers];
        if t + 1 < total {
            for (l, cell) in lay.cells.iter().enumerate() {
                matvec_transpose_acc(&params.values[cell.w_h.clone()], h, h, &dz_next[l], &mut dh[l]);
            }
        }
        // Positions p-1 .. total-2 predict generated tokens.
        if t + 1 >= p && t + 2 <= total {
            let k = t + 1 - p;
            let w = weights[k];
            if w != 0.0 {
                let probs = softmax(&cache.logits[t]);
                let mut dlogits = vec![0.0; v];
                for (i, pr) in probs.iter().enumerate() {
                    dlogits[i] = -w * pr;
                }
                dlogits[tokens[t + 1]] += w;
                let top = cache.hs[t].last().expect("layer");
                outer_acc(&mut grad[lay.out_w.clone()], v, h, &dlogits, top);
                for (slot, d) in grad[lay.out_b.clone()].iter_mut().zip(&dlogits) {
                    *slot += d;
                }
                matvec_transpose_acc(&params.values[lay.out_w.clone()], v, h, &dlogits, &mut dh[layers - 1]);
            }
        }
        for l in (0..layers).rev() {
            let cell = &lay.cells[l];
            let state = &cache.hs[t][l];
            let dz: Vec<f64> = (0..h).map(|i| dh[l][i] * (1.0 - state[i] * state[i])).collect();
            if t > 0 {
                outer_acc(&mut grad[cell.w_h.clone()], h, h, &dz, &cache.hs[t - 1][l]);
            }
            if l == 0 {
                let e = cfg.embed_dim;
                let input = &embed[tokens[t] * e..(tokens[t] + 1) * e];
                outer_acc(&mut grad[cell.w_in.clone()], h, e, &dz, input);
                // Route into the embedding row of the consumed token.
                let mut dinput = vec![0.0; e];
                matvec_transpose_acc(&params.values[cell.w_in.clone()], h, e, &dz, &mut dinput);
                let row = lay.embed.start + tokens[t] * e;
                for (i, d) in dinput.iter().enumerate() {
                    grad[row + i] += d;
                }
            } else {
                outer_acc(&mut grad[cell.w_in.clone()], h, h, &dz, &cache.hs[t][l - 1]);
                let mut down = vec![0.0; h];
                matvec_transpose_acc(&params.values[cell.w_in.clone()], h, h, &dz, &mut down);
                for (i, d) in down.iter().enumerate() {
                    dh[l - 1][i] += d;
                }
            }
            for (slot, d) in grad[cell.bias.clone()].iter_mut().zip(&dz) {
                *slot += d;
            }
            dz_next[l] = dz;
        }
    }
    Ok(WeightedGrad { logprobs, grad })
}

/// Gradient of the total response log-probability. Zero-length responses
/// have log-probability 0 and a zero gradient.
pub fn logprob_grad(
    params: &PolicyParams,
    cfg: &PolicyConfig,
    prompt: &[Token],
    generated: &[Token],
) -> Result<(f64, Vec<f64>)> {
    let weights = vec![1.0; generated.len()];
    let out = weighted_logprob_grad(params, cfg, prompt, generated, &weights)?;
    Ok((numerics::pairwise_sum(&out.logprobs), out.grad))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntropyStats {
    pub mean: f64,
    pub std: f64,
    pub last: f64,
}

/// (mean, population std, last) of per-token sampling entropies over the
/// reasoning segment. A rollout whose first token already ended reasoning
/// falls back to all generated positions so the statistics stay defined.
pub fn entropy_stats(record: &RolloutRecord) -> Result<EntropyStats> {
    if record.generated.is_empty() {
        return Err(CoreError::EmptyRollout);
    }
    let slice = if record.reasoning_end > 0 {
        &record.trace.entropies[..record.reasoning_end]
    } else {
        &record.trace.entropies[..]
    };
    Ok(EntropyStats {
        mean: numerics::mean(slice),
        std: numerics::population_std(slice),
        last: *slice.last().expect("non-empty entropy slice"),
    })
}

const POLICY_CHECKPOINT_HEADER: &str = "policy-checkpoint v1";

/// Versioned textual checkpoint; 17-significant-digit floats round-trip to
/// the exact bit pattern.
pub fn save_policy(path: &std::path::Path, cfg: &PolicyConfig, params: &PolicyParams) -> Result<()> {
    use std::io::Write;
    let mut out = String::new();
    out.push_str(POLICY_CHECKPOINT_HEADER);
    out.push('\n');
    out.push_str(&format!("vocab_size={}\n", cfg.vocab_size));
    out.push_str(&format!("embed_dim={}\n", cfg.embed_dim));
    out.push_str(&format!("hidden_dim={}\n", cfg.hidden_dim));
    out.push_str(&format!("num_layers={}\n", cfg.num_layers));
    out.push_str(&format!("seed={}\n", cfg.seed));
    out.push_str(&format!("param_count={}\n", params.values.len()));
    for v in &params.values {
        out.push_str(&numerics::fmt_f64(*v));
        out.push('\n');
    }
    let mut file = std::fs::File::create(path)?;
    file.write_all(out.as_bytes())?;
    Ok(())
}

pub fn load_policy(path: &std::path::Path) -> Result<(PolicyConfig, PolicyParams)> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().unwrap_or_default();
    if header != POLICY_CHECKPOINT_HEADER {
        return Err(CoreError::Parse(format!(
            "unrecognized policy checkpoint header: {header:?}"
        )));
    }
    let mut field = |name: &str| -> Result<u64> {
        let line = lines
            .next()
            .ok_or_else(|| CoreError::Parse(format!("missing field {name}")))?;
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| CoreError::Parse(format!("malformed line {line:?}")))?;
        if key != name {
            return Err(CoreError::Parse(format!("expected field {name}, got {key}")));
        }
        value
            .parse()
            .map_err(|e| CoreError::Parse(format!("field {name}: {e}")))
    };
    let cfg = PolicyConfig {
        vocab_size: field("vocab_size")? as usize,
        embed_dim: field("embed_dim")? as usize,
        hidden_dim: field("hidden_dim")? as usize,
        num_layers: field("num_layers")? as usize,
        seed: field("seed")?,
    };
    let count = field("param_count")? as usize;
    let mut values = Vec::with_capacity(count);
    for line in lines {
        if line.is_empty() {
            continue;
        }
        values.push(
            line.parse::<f64>()
                .map_err(|e| CoreError::Parse(format!("parameter value {line:?}: {e}")))?,
        );
    }
    if values.len() != count {
        return Err(CoreError::Parse(format!(
            "expected {count} parameters, found {}",
            values.len()
        )));
    }
    let expected = layout(&cfg).total;
    if expected != count {
        return Err(CoreError::ShapeMismatch(format!(
            "checkpoint has {count} parameters, config needs {expected}"
        )));
    }
    Ok((cfg, PolicyParams { values }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream, tag};
    use proptest::prelude::*;

    fn small_cfg() -> PolicyConfig {
        PolicyConfig {
            vocab_size: 6,
            embed_dim: 3,
            hidden_dim: 4,
            num_layers: 2,
            seed: 5,
        }
    }

    fn arith_policy() -> (TaskSpec, PolicyConfig, PolicyParams) {
        let spec = TaskSpec::mod_arith_default(0);
        let cfg = PolicyConfig::for_vocab(spec.vocab_size, 3);
        let params = init_params(&cfg);
        (spec, cfg, params)
    }

    #[test]
    fn parameter_count_matches_block_formula() {
        let cfg = PolicyConfig::for_vocab(16, 0);
        let lay = layout(&cfg);
        // embedding + per-cell (input, recurrent, bias) + output projection.
        let expected = 16 * 16
            + (32 * 16 + 32 * 32 + 32)
            + (32 * 32 + 32 * 32 + 32)
            + (16 * 32 + 16);
        assert_eq!(lay.total, expected);
        assert_eq!(init_params(&cfg).dim(), expected);
    }

    #[test]
    fn init_is_seeded_and_finite() {
        let cfg = small_cfg();
        let a = init_params(&cfg);
        let b = init_params(&cfg);
        assert_eq!(a.values, b.values);
        assert!(a.values.iter().all(|v| v.is_finite()));
        let other = init_params(&PolicyConfig { seed: 6, ..cfg });
        assert_ne!(a.values, other.values);
    }

    #[test]
    fn zero_params_give_uniform_distribution() {
        let cfg = small_cfg();
        let params = PolicyParams::zeros(&cfg);
        let (logits, state) = forward_logits(&params, &cfg, &[0, 1]).unwrap();
        let probs = softmax(&logits);
        for p in &probs {
            assert!((p - 1.0 / 6.0).abs() < 1e-15);
        }
        assert_eq!(state.len(), cfg.num_layers);
        assert!((entropy_of_logits(&logits) - (6.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one() {
        let cfg = small_cfg();
        let params = init_params(&cfg);
        for len in 1..5 {
            let prefix: Vec<usize> = (0..len).map(|i| i % cfg.vocab_size).collect();
            let (logits, _) = forward_logits(&params, &cfg, &prefix).unwrap();
            let total: f64 = softmax(&logits).iter().sum();
            assert!((total - 1.0).abs() < 1e-12, "sum {total}");
        }
    }

    #[test]
    fn invalid_token_is_an_error() {
        let cfg = small_cfg();
        let params = init_params(&cfg);
        assert!(matches!(
            forward_logits(&params, &cfg, &[0, 99]),
            Err(CoreError::InvalidToken { token: 99, .. })
        ));
    }

    // The gradient oracle: central finite differences of the forward-only
    // log-probability, step 1e-5, compared in relative L2 norm.
    fn finite_diff_grad(
        params: &PolicyParams,
        cfg: &PolicyConfig,
        prompt: &[Token],
        generated: &[Token],
    ) -> Vec<f64> {
        let step = 1e-5;
        let mut fd = vec![0.0; params.dim()];
        let mut work = params.clone();
        for i in 0..params.dim() {
            work.values[i] = params.values[i] + step;
            let up = sequence_logprob(&work, cfg, prompt, generated).unwrap();
            work.values[i] = params.values[i] - step;
            let down = sequence_logprob(&work, cfg, prompt, generated).unwrap();
            work.values[i] = params.values[i];
            fd[i] = (up - down) / (2.0 * step);
        }
        fd
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let cfg = small_cfg();
        for trial in 0..4u64 {
            let params = init_params(&PolicyConfig { seed: 11 + trial, ..cfg.clone() });
            let prompt = [0usize, 3, 1];
            let generated = [2usize, 5, 1, 4];
            let (lp, grad) = logprob_grad(&params, &cfg, &prompt, &generated).unwrap();
            let direct = sequence_logprob(&params, &cfg, &prompt, &generated).unwrap();
            assert!((lp - direct).abs() < 1e-12);
            let fd = finite_diff_grad(&params, &cfg, &prompt, &generated);
            let diff: Vec<f64> = grad.iter().zip(&fd).map(|(a, b)| a - b).collect();
            let rel = numerics::l2_norm(&diff) / numerics::l2_norm(&fd).max(1e-12);
            assert!(rel < 1e-4, "relative error {rel} on trial {trial}");
        }
    }

    #[test]
    fn weighted_grad_is_linear_in_weights() {
        let cfg = small_cfg();
        let params = init_params(&cfg);
        let prompt = [1usize, 0];
        let generated = [3usize, 2, 5];
        let weights = [0.7, -1.3, 0.4];
        let combined = weighted_logprob_grad(&params, &cfg, &prompt, &generated, &weights).unwrap();
        let mut accumulated = vec![0.0; params.dim()];
        for k in 0..generated.len() {
            let mut one_hot = vec![0.0; generated.len()];
            one_hot[k] = weights[k];
            let single = weighted_logprob_grad(&params, &cfg, &prompt, &generated, &one_hot).unwrap();
            for (acc, g) in accumulated.iter_mut().zip(&single.grad) {
                *acc += g;
            }
        }
        let diff: Vec<f64> = combined.grad.iter().zip(&accumulated).map(|(a, b)| a - b).collect();
        assert!(numerics::l2_norm(&diff) < 1e-10);
    }

    #[test]
    fn zero_length_response_has_zero_gradient() {
        let cfg = small_cfg();
        let params = init_params(&cfg);
        let (lp, grad) = logprob_grad(&params, &cfg, &[0, 1], &[]).unwrap();
        assert_eq!(lp, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
        assert_eq!(grad.len(), params.dim());
    }

    #[test]
    fn rollout_trace_covers_every_position() {
        let (spec, cfg, params) = arith_policy();
        let prompt = env::sample_prompt(&spec, &mut stream(0, tag::PROMPT, 0, 0));
        let record = sample_rollout(
            &params,
            &cfg,
            &spec,
            &prompt,
            spec.max_rollout_len(),
            &mut stream(0, tag::ROLLOUT, 0, 0),
        )
        .unwrap();
        assert_eq!(
            record.trace.hidden.len(),
            prompt.tokens.len() + record.generated.len()
        );
        assert_eq!(record.trace.entropies.len(), record.generated.len());
        assert_eq!(record.trace.logprobs.len(), record.generated.len());
        assert!(record.reasoning_end <= record.generated.len());
        if let Some(pos) = record
            .generated
            .iter()
            .position(|&t| Some(t) == spec.answer_delimiter())
        {
            assert_eq!(record.reasoning_end, pos);
        }
        let max_entropy = (cfg.vocab_size as f64).ln() + 1e-9;
        for e in &record.trace.entropies {
            assert!((0.0..=max_entropy).contains(e));
        }
        for lp in &record.behavior_logprobs {
            assert!(*lp <= 0.0);
        }
    }

    #[test]
    fn teacher_forcing_reproduces_sampled_records() {
        let (spec, cfg, params) = arith_policy();
        let prompt = env::sample_prompt(&spec, &mut stream(2, tag::PROMPT, 0, 0));
        let sampled = sample_rollout(
            &params,
            &cfg,
            &spec,
            &prompt,
            spec.max_rollout_len(),
            &mut stream(2, tag::ROLLOUT, 0, 0),
        )
        .unwrap();
        let forced = teacher_forced_record(&params, &cfg, &spec, &prompt, &sampled.generated).unwrap();
        assert_eq!(forced.reasoning_end, sampled.reasoning_end);
        assert_eq!(forced.reward, sampled.reward);
        for (a, b) in forced.behavior_logprobs.iter().zip(&sampled.behavior_logprobs) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in forced.trace.entropies.iter().zip(&sampled.trace.entropies) {
            assert!((a - b).abs() < 1e-12);
        }
        for (ha, hb) in forced.trace.hidden.iter().zip(&sampled.trace.hidden) {
            for (la, lb) in ha.iter().zip(hb) {
                for (x, y) in la.iter().zip(lb) {
                    assert!((x - y).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn first_token_frequencies_match_softmax() {
        // Chi-square goodness of fit at alpha = 0.001. The policy vocab is
        // 16, so 15 degrees of freedom; critical value 37.697.
        let spec = TaskSpec::table_bandit(1, 16, 0.5, 0).unwrap();
        let cfg = PolicyConfig {
            vocab_size: 16,
            embed_dim: 8,
            hidden_dim: 12,
            num_layers: 1,
            seed: 21,
        };
        let params = init_params(&cfg);
        let prompt = env::bandit_prompt(&spec, 0);
        let (logits, _) = forward_logits(&params, &cfg, &prompt.tokens).unwrap();
        let probs = softmax(&logits);

        let n = 100_000;
        let mut counts = vec![0usize; 16];
        let mut rng = stream(77, tag::EVAL, 0, 0);
        for _ in 0..n {
            let record = sample_rollout(&params, &cfg, &spec, &prompt, 1, &mut rng).unwrap();
            counts[record.generated[0]] += 1;
        }
        let mut chi2 = 0.0;
        for (count, p) in counts.iter().zip(&probs) {
            let expected = p * n as f64;
            chi2 += (*count as f64 - expected).powi(2) / expected;
        }
        assert!(chi2 < 37.697, "chi-square statistic {chi2}");
    }

    #[test]
    fn entropy_stats_cover_reasoning_segment() {
        let (spec, cfg, params) = arith_policy();
        let prompt = env::sample_prompt(&spec, &mut stream(4, tag::PROMPT, 0, 0));
        let delim = spec.answer_delimiter().unwrap();

        // Three reasoning tokens, then delimiter and answer.
        let record = teacher_forced_record(&params, &cfg, &spec, &prompt, &[2, 4, 11, delim, 1]).unwrap();
        assert_eq!(record.reasoning_end, 3);
        let stats = entropy_stats(&record).unwrap();
        let slice = &record.trace.entropies[..3];
        assert!((stats.mean - numerics::mean(slice)).abs() < 1e-15);
        assert!((stats.std - numerics::population_std(slice)).abs() < 1e-15);
        assert_eq!(stats.last, slice[2]);

        // Immediate delimiter: stats fall back to all generated positions.
        let immediate = teacher_forced_record(&params, &cfg, &spec, &prompt, &[delim, 1]).unwrap();
        assert_eq!(immediate.reasoning_end, 0);
        let stats = entropy_stats(&immediate).unwrap();
        assert!((stats.mean - numerics::mean(&immediate.trace.entropies)).abs() < 1e-15);

        // Single token: std 0, last equals mean.
        let single = teacher_forced_record(&params, &cfg, &spec, &prompt, &[2]).unwrap();
        let stats = entropy_stats(&single).unwrap();
        assert_eq!(stats.std, 0.0);
        assert_eq!(stats.last, stats.mean);
    }

    #[test]
    fn uniform_policy_reasoning_entropy_is_log_vocab() {
        let spec = TaskSpec::mod_arith_default(0);
        let cfg = PolicyConfig::for_vocab(16, 0);
        let params = PolicyParams::zeros(&cfg);
        let prompt = env::sample_prompt(&spec, &mut stream(1, tag::PROMPT, 0, 0));
        let record = sample_rollout(&params, &cfg, &spec, &prompt, 8, &mut stream(1, tag::ROLLOUT, 0, 0)).unwrap();
        let stats = entropy_stats(&record).unwrap();
        assert!((stats.mean - 16.0f64.ln()).abs() < 1e-9, "mean {}", stats.mean);
        assert!((stats.mean - 2.7725887222397812).abs() < 1e-9);
    }

    #[test]
    fn empty_rollout_entropy_is_an_error() {
        let (spec, cfg, params) = arith_policy();
        let prompt = env::sample_prompt(&spec, &mut stream(5, tag::PROMPT, 0, 0));
        let mut record = sample_rollout(&params, &cfg, &spec, &prompt, 3, &mut stream(5, tag::ROLLOUT, 0, 0)).unwrap();
        record.generated.clear();
        record.trace.entropies.clear();
        assert!(matches!(entropy_stats(&record), Err(CoreError::EmptyRollout)));
    }

    #[test]
    fn checkpoint_round_trips_bit_exactly() {
        let cfg = small_cfg();
        let params = init_params(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("policy.txt");
        save_policy(&path, &cfg, &params).unwrap();
        let (cfg2, params2) = load_policy(&path).unwrap();
        assert_eq!(cfg, cfg2);
        assert_eq!(params.values.len(), params2.values.len());
        for (a, b) in params.values.iter().zip(&params2.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn corrupt_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.txt");
        std::fs::write(&path, "not a checkpoint\n").unwrap();
        assert!(matches!(load_policy(&path), Err(CoreError::Parse(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn sampled_rollouts_satisfy_invariants(seed in 0u64..300) {
            let (spec, cfg, params) = arith_policy();
            let prompt = env::sample_prompt(&spec, &mut stream(seed, tag::PROMPT, 0, 0));
            let record = sample_rollout(
                &params, &cfg, &spec, &prompt, spec.max_rollout_len(),
                &mut stream(seed, tag::ROLLOUT, 0, 0),
            ).unwrap();
            prop_assert!(!record.generated.is_empty());
            prop_assert!(record.generated.len() <= spec.max_rollout_len());
            prop_assert!(record.reasoning_end <= record.generated.len());
            prop_assert_eq!(record.trace.hidden.len(), prompt.tokens.len() + record.generated.len());
            prop_assert!(record.behavior_logprobs.iter().all(|&lp| lp <= 0.0));
            let cap = (cfg.vocab_size as f64).ln() + 1e-9;
            prop_assert!(record.trace.entropies.iter().all(|&e| (0.0..=cap).contains(&e)));
            prop_assert!(record.reward == 0.0 || record.reward == 1.0);
        }
    }
}
