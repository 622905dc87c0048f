//! Synthetic tasks with exact programmatic verifiers.
//!
//! Token layout is fixed: digits `0..=9`, then `+ = | E O`, then
//! `BOS EOS PAD`, padded with unused ids up to [`VOCAB_SIZE`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub type Token = usize;

pub const VOCAB_SIZE: usize = 32;
pub const PLUS: Token = 10;
pub const EQUALS: Token = 11;
pub const SEP: Token = 12;
pub const PLAN_EVEN: Token = 13;
pub const PLAN_ODD: Token = 14;
pub const BOS: Token = 15;
pub const EOS: Token = 16;
pub const PAD: Token = 17;

const SYMBOLS: [&str; 18] = [
    "0", "1", "2", "3", "4", "5", "6", "7", "8", "9", "+", "=", "|", "E", "O", "<bos>", "<eos>",
    "<pad>",
];

/// Human-readable rendering of a token sequence.
pub fn render(tokens: &[Token]) -> String {
    tokens
        .iter()
        .map(|&t| SYMBOLS.get(t).copied().unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn digits(mut n: u32) -> Vec<Token> {
    if n == 0 {
        return vec![0];
    }
    let mut out = Vec::new();
    while n > 0 {
        out.push((n % 10) as Token);
        n /= 10;
    }
    out.reverse();
    out
}

fn parse_number(tokens: &[Token]) -> Option<u32> {
    if tokens.is_empty() || tokens.len() > 3 || tokens.iter().any(|&t| t > 9) {
        return None;
    }
    if tokens.len() > 1 && tokens[0] == 0 {
        return None;
    }
    Some(tokens.iter().fold(0, |acc, &d| acc * 10 + d as u32))
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TaskError {
    #[error("difficulty out of range: {0}")]
    DifficultyOutOfRange(String),
    #[error("bad task spec: {0}")]
    Parse(String),
}

/// A task family together with its difficulty.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSpec {
    /// `a + b = ` with the answer `(a + b) mod modulus`, operands in `0..modulus`.
    ModAdd { modulus: u32 },
    /// Digit string of fixed length, answered reversed.
    Reverse { length: usize },
    /// Bit string; answer is a parity plan token then the ones count.
    PlanParity { bits: usize },
}

impl Default for TaskSpec {
    fn default() -> Self {
        TaskSpec::ModAdd { modulus: 10 }
    }
}

/// `kind:param`, e.g. `mod_add:10`, `reverse:4`, `plan_parity:6`.
impl std::str::FromStr for TaskSpec {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, TaskError> {
        let bad = || TaskError::Parse(format!("expected mod_add:N, reverse:N or plan_parity:N, got {s:?}"));
        let (kind, n) = s.split_once(':').ok_or_else(bad)?;
        let n: usize = n.trim().parse().map_err(|_| bad())?;
        let spec = match kind.trim() {
            "mod_add" => TaskSpec::ModAdd {
                modulus: u32::try_from(n).map_err(|_| bad())?,
            },
            "reverse" => TaskSpec::Reverse { length: n },
            "plan_parity" => TaskSpec::PlanParity { bits: n },
            _ => return Err(bad()),
        };
        spec.validate()?;
        Ok(spec)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    ModAdd,
    Reverse,
    PlanParity,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub prompt_tokens: Vec<Token>,
    pub oracle_response: Vec<Token>,
}

impl TaskSpec {
    pub fn kind(&self) -> TaskKind {
        match self {
            TaskSpec::ModAdd { .. } => TaskKind::ModAdd,
            TaskSpec::Reverse { .. } => TaskKind::Reverse,
            TaskSpec::PlanParity { .. } => TaskKind::PlanParity,
        }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        let ok = match *self {
            TaskSpec::ModAdd { modulus } => (2..=100).contains(&modulus),
            TaskSpec::Reverse { length } => (1..=12).contains(&length),
            TaskSpec::PlanParity { bits } => (1..=16).contains(&bits),
        };
        if ok {
            Ok(())
        } else {
            Err(TaskError::DifficultyOutOfRange(format!(
                "{self:?} (ModAdd modulus 2..=100, Reverse length 1..=12, PlanParity bits 1..=16)"
            )))
        }
    }

    /// Longest canonical answer, EOS included.
    pub fn max_answer_len(&self) -> usize {
        match *self {
            TaskSpec::ModAdd { modulus } => digits(modulus.saturating_sub(1)).len() + 1,
            TaskSpec::Reverse { length } => length + 1,
            TaskSpec::PlanParity { bits } => digits(bits as u32).len() + 2,
        }
    }

    /// Longest prompt, BOS included.
    pub fn max_prompt_len(&self) -> usize {
        match *self {
            TaskSpec::ModAdd { modulus } => 2 * digits(modulus.saturating_sub(1)).len() + 3,
            TaskSpec::Reverse { length } => length + 2,
            TaskSpec::PlanParity { bits } => bits + 2,
        }
    }

    /// Deterministic instance for `seed`.
    pub fn generate(&self, seed: u64) -> Result<TaskInstance, TaskError> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let prompt_tokens = match *self {
            TaskSpec::ModAdd { modulus } => {
                let a = rng.gen_range(0..modulus);
                let b = rng.gen_range(0..modulus);
                let mut p = vec![BOS];
                p.extend(digits(a));
                p.push(PLUS);
                p.extend(digits(b));
                p.push(EQUALS);
                p
            }
            TaskSpec::Reverse { length } => {
                let mut p = vec![BOS];
                p.extend((0..length).map(|_| rng.gen_range(0..10)));
                p.push(SEP);
                p
            }
            TaskSpec::PlanParity { bits } => {
                let mut p = vec![BOS];
                p.extend((0..bits).map(|_| rng.gen_range(0..2)));
                p.push(SEP);
                p
            }
        };
        let oracle_response = self
            .canonical_answer(&prompt_tokens)
            .expect("generated prompts are well formed");
        Ok(TaskInstance {
            prompt_tokens,
            oracle_response,
        })
    }

    /// The unique rewarded response for a prompt, or `None` if the prompt is
    /// not a well-formed prompt of this task.
    pub fn canonical_answer(&self, prompt: &[Token]) -> Option<Vec<Token>> {
        let body = prompt.strip_prefix(&[BOS])?;
        let mut answer = match *self {
            TaskSpec::ModAdd { modulus } => {
                let body = body.strip_suffix(&[EQUALS])?;
                let plus = body.iter().position(|&t| t == PLUS)?;
                let a = parse_number(&body[..plus])?;
                let b = parse_number(&body[plus + 1..])?;
                if a >= modulus || b >= modulus {
                    return None;
                }
                digits((a + b) % modulus)
            }
            TaskSpec::Reverse { length } => {
                let body = body.strip_suffix(&[SEP])?;
                if body.len() != length || body.iter().any(|&t| t > 9) {
                    return None;
                }
                body.iter().rev().copied().collect()
            }
            TaskSpec::PlanParity { bits } => {
                let body = body.strip_suffix(&[SEP])?;
                if body.len() != bits || body.iter().any(|&t| t > 1) {
                    return None;
                }
                let ones = body.iter().filter(|&&t| t == 1).count() as u32;
                let plan = if ones % 2 == 0 { PLAN_EVEN } else { PLAN_ODD };
                let mut a = vec![plan];
                a.extend(digits(ones));
                a
            }
        };
        answer.push(EOS);
        Some(answer)
    }

    /// Exact-match reward in `{0, 1}`.
    pub fn verify(&self, prompt: &[Token], response: &[Token]) -> f64 {
        match self.canonical_answer(prompt) {
            Some(answer) if answer == response => 1.0,
            _ => 0.0,
        }
    }
}

/// Free-function form of [`TaskSpec::generate`].
pub fn gen_instance(spec: &TaskSpec, seed: u64) -> Result<TaskInstance, TaskError> {
    spec.generate(seed)
}

/// Free-function form of [`TaskSpec::verify`].
pub fn verify(spec: &TaskSpec, prompt: &[Token], response: &[Token]) -> f64 {
    spec.verify(prompt, response)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn parses_task_specs() {
        assert_eq!("mod_add:10".parse::<TaskSpec>().unwrap(), TaskSpec::ModAdd { modulus: 10 });
        assert_eq!("reverse:4".parse::<TaskSpec>().unwrap(), TaskSpec::Reverse { length: 4 });
        assert_eq!("plan_parity:6".parse::<TaskSpec>().unwrap(), TaskSpec::PlanParity { bits: 6 });
        for bad in ["mod_add", "mod_add:x", "sort:3", "reverse:0", "mod_add:1"] {
            assert!(bad.parse::<TaskSpec>().is_err(), "{bad}");
        }
    }

    const MOD10: TaskSpec = TaskSpec::ModAdd { modulus: 10 };

    #[test]
    fn mod_add_example() {
        let prompt = vec![BOS, 2, PLUS, 3, EQUALS];
        assert_eq!(MOD10.canonical_answer(&prompt), Some(vec![5, EOS]));
        assert_eq!(MOD10.verify(&prompt, &[5, EOS]), 1.0);
        assert_eq!(MOD10.verify(&prompt, &[6, EOS]), 0.0);
        assert_eq!(MOD10.verify(&prompt, &[5]), 0.0);
        assert_eq!(MOD10.verify(&prompt, &[5, EOS, EOS]), 0.0);
    }

    #[test]
    fn reverse_example() {
        let spec = TaskSpec::Reverse { length: 3 };
        let prompt = vec![BOS, 1, 2, 3, SEP];
        assert_eq!(spec.canonical_answer(&prompt), Some(vec![3, 2, 1, EOS]));
    }

    #[test]
    fn plan_parity_example() {
        let spec = TaskSpec::PlanParity { bits: 4 };
        let prompt = vec![BOS, 1, 1, 0, 1, SEP];
        assert_eq!(spec.canonical_answer(&prompt), Some(vec![PLAN_ODD, 3, EOS]));
        assert_eq!(spec.verify(&prompt, &[PLAN_EVEN, 3, EOS]), 0.0);
        assert_eq!(spec.verify(&prompt, &[PLAN_ODD, 3, EOS]), 1.0);
    }

    #[test]
    fn difficulty_ranges_are_enforced() {
        assert!(TaskSpec::ModAdd { modulus: 101 }.generate(0).is_err());
        assert!(TaskSpec::Reverse { length: 13 }.generate(0).is_err());
        assert!(TaskSpec::PlanParity { bits: 17 }.generate(0).is_err());
        assert!(TaskSpec::PlanParity { bits: 0 }.generate(0).is_err());
        assert!(TaskSpec::ModAdd { modulus: 100 }.generate(0).is_ok());
    }

    #[test]
    fn modular_wraparound_and_multi_digit() {
        let spec = TaskSpec::ModAdd { modulus: 100 };
        let prompt = vec![BOS, 9, 9, PLUS, 5, EQUALS];
        assert_eq!(spec.canonical_answer(&prompt), Some(vec![4, EOS]));
        let prompt = vec![BOS, 4, 0, PLUS, 2, 5, EQUALS];
        assert_eq!(spec.canonical_answer(&prompt), Some(vec![6, 5, EOS]));
        // Leading zeros are not canonical operands.
        assert_eq!(spec.canonical_answer(&[BOS, 0, 5, PLUS, 1, EQUALS]), None);
    }

    #[test]
    fn malformed_prompts_never_reward() {
        assert_eq!(MOD10.verify(&[2, PLUS, 3, EQUALS], &[5, EOS]), 0.0);
        assert_eq!(MOD10.verify(&[], &[EOS]), 0.0);
    }

    #[test]
    fn plan_token_is_decisive() {
        let spec = TaskSpec::PlanParity { bits: 8 };
        for seed in 0..200 {
            let inst = spec.generate(seed).unwrap();
            let mut flipped = inst.oracle_response.clone();
            flipped[0] = if flipped[0] == PLAN_EVEN { PLAN_ODD } else { PLAN_EVEN };
            assert_eq!(spec.verify(&inst.prompt_tokens, &inst.oracle_response), 1.0);
            assert_eq!(spec.verify(&inst.prompt_tokens, &flipped), 0.0);
        }
    }

    fn any_spec() -> impl Strategy<Value = TaskSpec> {
        prop_oneof![
            (2u32..=100).prop_map(|modulus| TaskSpec::ModAdd { modulus }),
            (1usize..=12).prop_map(|length| TaskSpec::Reverse { length }),
            (1usize..=16).prop_map(|bits| TaskSpec::PlanParity { bits }),
        ]
    }

    proptest! {
        #[test]
        fn oracle_is_rewarded_and_unique(spec in any_spec(), seed in any::<u64>(),
                                         other in proptest::collection::vec(0usize..VOCAB_SIZE, 0..6)) {
            let inst = spec.generate(seed).unwrap();
            prop_assert_eq!(&inst, &spec.generate(seed).unwrap());
            prop_assert_eq!(spec.verify(&inst.prompt_tokens, &inst.oracle_response), 1.0);
            prop_assert!(inst.oracle_response.len() <= spec.max_answer_len());
            prop_assert!(inst.prompt_tokens.len() <= spec.max_prompt_len());
            prop_assert!(!inst.prompt_tokens.contains(&PAD));
            prop_assert!(!inst.oracle_response.contains(&PAD));
            let reward = spec.verify(&inst.prompt_tokens, &other);
            prop_assert_eq!(reward == 1.0, other == inst.oracle_response);
        }
    }
}
