//! Synthetic verifiable-reward tasks.
//!
//! Two families: modular arithmetic with free-form reasoning tokens, and an
//! enumerable contextual bandit used by the exact variance lab. Rewards are
//! binary and computed by an exact verifier, never by a learned model.

use rand::Rng;
use rand_chacha::ChaCha20Rng;

use crate::error::{CoreError, Result};
use crate::rng;

pub type Token = usize;

/// Largest outcome space `enumerate_outcomes` will materialize.
pub const ENUMERATION_LIMIT: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskFamily {
    ModArith,
    TableBandit,
}

impl TaskFamily {
    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::ModArith => "mod_arith",
            TaskFamily::TableBandit => "table_bandit",
        }
    }
}

/// Frozen description of a task instance. For the bandit family the reward
/// table is drawn once at construction and stored explicitly, so every
/// later query is a table lookup.
#[derive(Debug, Clone)]
pub struct TaskSpec {
    pub family: TaskFamily,
    pub vocab_size: usize,
    /// Modulus for the arithmetic family.
    pub modulus: usize,
    pub context_count: usize,
    pub action_count: usize,
    /// Bandit rewards, context-major: `reward_table[context][action]`.
    pub reward_table: Vec<Vec<u8>>,
    pub max_reasoning_len: usize,
    pub seed: u64,
}

impl TaskSpec {
    pub fn mod_arith(modulus: usize, vocab_size: usize, max_reasoning_len: usize, seed: u64) -> Result<Self> {
        let spec = TaskSpec {
            family: TaskFamily::ModArith,
            vocab_size,
            modulus,
            context_count: 0,
            action_count: 0,
            reward_table: Vec::new(),
            max_reasoning_len,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Default arithmetic instance: modulus 7, vocab 16, reasoning budget 8.
    pub fn mod_arith_default(seed: u64) -> Self {
        TaskSpec::mod_arith(7, 16, 8, seed).expect("default spec is valid")
    }

    /// Bandit with a seeded Bernoulli(density) reward table.
    pub fn table_bandit(context_count: usize, action_count: usize, density: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&density) {
            return Err(CoreError::InvalidConfig(format!(
                "reward density {density} outside [0, 1]"
            )));
        }
        let mut rng = rng::stream(seed, rng::tag::REWARD_TABLE, 0, 0);
        let table: Vec<Vec<u8>> = (0..context_count)
            .map(|_| {
                (0..action_count)
                    .map(|_| u8::from(rng.gen::<f64>() < density))
                    .collect()
            })
            .collect();
        TaskSpec::table_bandit_with_table(table, seed)
    }

    /// Bandit with an explicit table, used to engineer degenerate rows.
    pub fn table_bandit_with_table(reward_table: Vec<Vec<u8>>, seed: u64) -> Result<Self> {
        let context_count = reward_table.len();
        let action_count = reward_table.first().map_or(0, Vec::len);
        let spec = TaskSpec {
            family: TaskFamily::TableBandit,
            // One generated token is the action, so the action set is the
            // whole vocabulary; that keeps exact enumeration over responses
            // identical to enumeration over actions.
            vocab_size: action_count,
            modulus: 0,
            context_count,
            action_count,
            reward_table,
            max_reasoning_len: 0,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        match self.family {
            TaskFamily::ModArith => {
                if self.modulus < 2 {
                    return Err(CoreError::InvalidConfig(format!(
                        "modulus must be at least 2, got {}",
                        self.modulus
                    )));
                }
                // Digits, two operators, the answer delimiter, end-of-sequence.
                if self.vocab_size < self.modulus + 4 {
                    return Err(CoreError::InvalidConfig(format!(
                        "vocab size {} below modulus + 4 = {}",
                        self.vocab_size,
                        self.modulus + 4
                    )));
                }
                Ok(())
            }
            TaskFamily::TableBandit => {
                if self.context_count == 0 || self.action_count == 0 {
                    return Err(CoreError::InvalidConfig(
                        "bandit needs at least one context and one action".into(),
                    ));
                }
                if self.vocab_size != self.action_count {
                    return Err(CoreError::InvalidConfig(format!(
                        "bandit vocab size {} must equal action count {}",
                        self.vocab_size, self.action_count
                    )));
                }
                if self.context_count > self.vocab_size {
                    return Err(CoreError::InvalidConfig(format!(
                        "bandit context count {} exceeds vocab size {}; contexts are prompt tokens",
                        self.context_count, self.vocab_size
                    )));
                }
                if self.reward_table.len() != self.context_count {
                    return Err(CoreError::ShapeMismatch(format!(
                        "reward table has {} rows, expected {}",
                        self.reward_table.len(),
                        self.context_count
                    )));
                }
                for (c, row) in self.reward_table.iter().enumerate() {
                    if row.len() != self.action_count {
                        return Err(CoreError::ShapeMismatch(format!(
                            "reward table row {c} has {} entries, expected {}",
                            row.len(),
                            self.action_count
                        )));
                    }
                    if let Some(bad) = row.iter().find(|&&r| r > 1) {
                        return Err(CoreError::InvalidConfig(format!(
                            "reward table entries must be 0 or 1, got {bad}"
                        )));
                    }
                }
                Ok(())
            }
        }
    }

    // Token layout for the arithmetic family: digits occupy [0, modulus),
    // then the two operators, the answer delimiter, end-of-sequence.
    pub fn op_add_token(&self) -> Token {
        self.modulus
    }

    pub fn op_mul_token(&self) -> Token {
        self.modulus + 1
    }

    pub fn answer_delimiter(&self) -> Option<Token> {
        match self.family {
            TaskFamily::ModArith => Some(self.modulus + 2),
            TaskFamily::TableBandit => None,
        }
    }

    pub fn eos_token(&self) -> Option<Token> {
        match self.family {
            TaskFamily::ModArith => Some(self.modulus + 3),
            TaskFamily::TableBandit => None,
        }
    }

    /// Generation budget: reasoning tokens plus the delimiter and answer for
    /// arithmetic; a single action token for the bandit.
    pub fn max_rollout_len(&self) -> usize {
        match self.family {
            TaskFamily::ModArith => self.max_reasoning_len + 2,
            TaskFamily::TableBandit => 1,
        }
    }
}

/// One sampled problem. `ground_truth` is the verifying answer: the correct
/// digit for arithmetic, the context index for the bandit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptInstance {
    pub id: u64,
    pub tokens: Vec<Token>,
    pub ground_truth: usize,
}

/// Draw one prompt. Identical rng states give identical prompts; ids are
/// content-derived so equal problems compare equal across runs.
///
/// Arithmetic prompts are addition problems `a + b =`; the multiplication
/// operator token is reserved in the vocabulary and understood by `verify`,
/// but the sampled distribution is pure addition so the prompt space is the
/// p*p grid of operand pairs.
pub fn sample_prompt(spec: &TaskSpec, rng: &mut ChaCha20Rng) -> PromptInstance {
    match spec.family {
        TaskFamily::ModArith => {
            let p = spec.modulus;
            let a = rng.gen_range(0..p);
            let b = rng.gen_range(0..p);
            let delim = spec.answer_delimiter().expect("arithmetic family has a delimiter");
            PromptInstance {
                id: (a * p + b) as u64,
                tokens: vec![a, spec.op_add_token(), b, delim],
                ground_truth: (a + b) % p,
            }
        }
        TaskFamily::TableBandit => {
            let context = rng.gen_range(0..spec.context_count);
            PromptInstance {
                id: context as u64,
                tokens: vec![context],
                ground_truth: context,
            }
        }
    }
}

/// Exact binary verifier.
///
/// Arithmetic: the response must restate the answer delimiter; the token
/// right after the first generated delimiter is the answer. A missing
/// delimiter or a delimiter with nothing after it scores 0, not an error.
/// Bandit: the first generated token is the action.
pub fn verify(spec: &TaskSpec, prompt: &PromptInstance, generated: &[Token]) -> f64 {
    match spec.family {
        TaskFamily::ModArith => {
            let delim = spec.answer_delimiter().expect("arithmetic family has a delimiter");
            let Some(pos) = generated.iter().position(|&t| t == delim) else {
                return 0.0;
            };
            match generated.get(pos + 1) {
                Some(&answer) if answer == prompt.ground_truth => 1.0,
                _ => 0.0,
            }
        }
        TaskFamily::TableBandit => {
            let Some(&action) = generated.first() else {
                return 0.0;
            };
            let context = prompt.ground_truth;
            f64::from(spec.reward_table[context][action])
        }
    }
}

/// All (context, action, reward) triples of an enumerable bandit in
/// context-major order. The arithmetic family has an open-ended response
/// space and is rejected.
pub fn enumerate_outcomes(spec: &TaskSpec) -> Result<Vec<(usize, Token, f64)>> {
    if spec.family != TaskFamily::TableBandit {
        return Err(CoreError::UnsupportedFamily {
            required: TaskFamily::TableBandit.name(),
            got: spec.family.name(),
        });
    }
    let size = spec.context_count * spec.action_count;
    if size > ENUMERATION_LIMIT {
        return Err(CoreError::OutcomeSpaceTooLarge {
            size,
            limit: ENUMERATION_LIMIT,
        });
    }
    let mut outcomes = Vec::with_capacity(size);
    for context in 0..spec.context_count {
        for action in 0..spec.action_count {
            outcomes.push((context, action, f64::from(spec.reward_table[context][action])));
        }
    }
    Ok(outcomes)
}

/// Bandit prompt for a chosen context, bypassing the sampler. Handy for
/// exact enumeration code that walks contexts directly.
pub fn bandit_prompt(spec: &TaskSpec, context: usize) -> PromptInstance {
    debug_assert_eq!(spec.family, TaskFamily::TableBandit);
    debug_assert!(context < spec.context_count);
    PromptInstance {
        id: context as u64,
        tokens: vec![context],
        ground_truth: context,
    }
}
