//! Synthetic verifiable math tasks with a controllable difficulty knob.
//!
//! Four problem families stand in for a curated math corpus. Each family has
//! an exact oracle, and difficulty is a structural parameter of the instance
//! (chain length or digit count), so the minimal correct completion length
//! is non-decreasing in difficulty by construction.
//!
//! Prompts are short symbol strings over a fixed token alphabet and always
//! end with the query marker `=`. A completion is correct when its last
//! balanced boxed span contains the oracle answer (see [`crate::verifier`]).

use std::collections::HashSet;
use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seeding::{fnv1a64, rng_from};

/// Dense token identifier into a [`Vocabulary`].
pub type TokenId = usize;

/// Errors from task generation, parsing, and dataset I/O.
#[derive(Debug, Error)]
pub enum TaskError {
    #[error("unknown family: {0}")]
    UnknownFamily(String),
    #[error("difficulty {difficulty} outside supported range [1, {max}] for {family}")]
    DifficultyOutOfRange { family: Family, difficulty: u32, max: u32 },
    #[error("malformed prompt for {family}: {prompt:?}")]
    MalformedPrompt { family: Family, prompt: String },
    #[error("text contains a symbol outside the task vocabulary: {0:?}")]
    UnknownSymbol(char),
    #[error("invalid vocabulary: {0}")]
    InvalidVocabulary(String),
    #[error("duplicate problem id in dataset: {0}")]
    DuplicateId(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// Ordered token alphabet shared by tasks, policy, and verifier.
///
/// Token ids are dense from 0 in declaration order. The four special tokens
/// are always present exactly once. `BOX_OPEN` renders as `\boxed{` and
/// `BOX_CLOSE` as `}`, so a rendered completion carries the usual boxed-answer
/// syntax and the token-level and text-level extractors agree.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    tokens: Vec<String>,
    bos: TokenId,
    eos: TokenId,
    box_open: TokenId,
    box_close: TokenId,
}

pub const BOS_TEXT: &str = "<bos>";
pub const EOS_TEXT: &str = "<eos>";
pub const BOX_OPEN_TEXT: &str = "\\boxed{";
pub const BOX_CLOSE_TEXT: &str = "}";

impl Vocabulary {
    /// The standard task alphabet: specials, digits, and operator symbols.
    pub fn standard() -> Self {
        let mut tokens: Vec<String> = vec![
            BOS_TEXT.into(),
            EOS_TEXT.into(),
            BOX_OPEN_TEXT.into(),
            BOX_CLOSE_TEXT.into(),
        ];
        for d in 0..10 {
            tokens.push(d.to_string());
        }
        for sym in ["+", "-", "*", "%", "#", "=", "s", "e"] {
            tokens.push(sym.into());
        }
        Self::from_tokens(tokens).expect("standard vocabulary is well-formed")
    }

    /// A minimal vocabulary for exact-enumeration diagnostics: the four
    /// specials plus the given extra symbols.
    pub fn minimal(extra: &[&str]) -> Result<Self, TaskError> {
        let mut tokens: Vec<String> = vec![
            BOS_TEXT.into(),
            EOS_TEXT.into(),
            BOX_OPEN_TEXT.into(),
            BOX_CLOSE_TEXT.into(),
        ];
        tokens.extend(extra.iter().map(|s| s.to_string()));
        Self::from_tokens(tokens)
    }

    /// Builds a vocabulary from an explicit token list, validating that each
    /// special token appears exactly once and ids are dense.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TaskError> {
        let find_unique = |text: &str| -> Result<TokenId, TaskError> {
            let hits: Vec<usize> = tokens
                .iter()
                .enumerate()
                .filter(|(_, t)| t.as_str() == text)
                .map(|(i, _)| i)
                .collect();
            match hits.as_slice() {
                [one] => Ok(*one),
                [] => Err(TaskError::InvalidVocabulary(format!("missing special token {text:?}"))),
                _ => Err(TaskError::InvalidVocabulary(format!("special token {text:?} repeated"))),
            }
        };
        let bos = find_unique(BOS_TEXT)?;
        let eos = find_unique(EOS_TEXT)?;
        let box_open = find_unique(BOX_OPEN_TEXT)?;
        let box_close = find_unique(BOX_CLOSE_TEXT)?;
        let mut seen = HashSet::new();
        for t in &tokens {
            if !seen.insert(t.clone()) {
                return Err(TaskError::InvalidVocabulary(format!("duplicate token {t:?}")));
            }
        }
        Ok(Self { tokens, bos, eos, box_open, box_close })
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn bos(&self) -> TokenId {
        self.bos
    }

    pub fn eos(&self) -> TokenId {
        self.eos
    }

    pub fn box_open(&self) -> TokenId {
        self.box_open
    }

    pub fn box_close(&self) -> TokenId {
        self.box_close
    }

    /// Text of one token.
    pub fn text_of(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    /// Id of the token with the given text.
    pub fn id_of(&self, text: &str) -> Option<TokenId> {
        self.tokens.iter().position(|t| t == text)
    }

    /// Tokenizes prompt text. Prompts are single-character symbols only;
    /// special tokens never appear in stored prompt text.
    pub fn encode_text(&self, text: &str) -> Result<Vec<TokenId>, TaskError> {
        text.chars()
            .map(|c| {
                let mut buf = [0u8; 4];
                let s: &str = c.encode_utf8(&mut buf);
                self.id_of(s).ok_or(TaskError::UnknownSymbol(c))
            })
            .collect()
    }

    /// Renders tokens to text. BOS and EOS render empty; the box tokens
    /// render as `\boxed{` and `}`.
    pub fn render(&self, tokens: &[TokenId]) -> String {
        let mut out = String::new();
        for &t in tokens {
            if t == self.bos || t == self.eos {
                continue;
            }
            if let Some(s) = self.text_of(t) {
                out.push_str(s);
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Families and problems
// ---------------------------------------------------------------------------

/// Synthetic problem family (the domain tag of a [`Problem`]).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    /// Iterated `+`, `-`, `*` modulo 10; difficulty = chain length.
    /// Prompt `3+4*2%10=`, answer = the final residue.
    ChainMod,
    /// Maximum of `difficulty + 1` digits separated by `#`.
    /// Prompt `3#7#2=`, answer = the largest digit.
    ChainMax,
    /// Sum of `difficulty` digits. Prompt `372s=`, answer = the decimal sum.
    DigitSum,
    /// Repeat the digit block. Prompt `372e=`, answer = the block itself as a
    /// canonical integer; answer length equals difficulty.
    Echo,
}

impl Family {
    pub fn all() -> [Family; 4] {
        [Family::ChainMod, Family::ChainMax, Family::DigitSum, Family::Echo]
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Family::ChainMod => "chain-mod",
            Family::ChainMax => "chain-max",
            Family::DigitSum => "digit-sum",
            Family::Echo => "echo",
        }
    }

    /// Largest supported difficulty for this family.
    pub fn max_difficulty(&self) -> u32 {
        match self {
            Family::ChainMod => 16,
            Family::ChainMax => 16,
            Family::DigitSum => 16,
            Family::Echo => 12,
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Family {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Family::all()
            .into_iter()
            .find(|f| f.tag() == s)
            .ok_or_else(|| TaskError::UnknownFamily(s.to_string()))
    }
}

/// One verifiable task instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Problem {
    pub id: String,
    pub domain: Family,
    pub difficulty: u32,
    /// Stored as plain text; tokenize with [`Vocabulary::encode_text`].
    pub prompt: String,
    #[serde(rename = "answer")]
    pub gold_answer: String,
}

impl Problem {
    /// Prompt as token ids over the given vocabulary.
    pub fn prompt_tokens(&self, vocab: &Vocabulary) -> Result<Vec<TokenId>, TaskError> {
        vocab.encode_text(&self.prompt)
    }

    /// The minimal correct completion: box-open, answer digits, box-close,
    /// EOS. Its length is `answer length + 3`, non-decreasing in difficulty
    /// within each family.
    pub fn canonical_completion(&self, vocab: &Vocabulary) -> Result<Vec<TokenId>, TaskError> {
        let mut toks = vec![vocab.box_open()];
        toks.extend(vocab.encode_text(&self.gold_answer)?);
        toks.push(vocab.box_close());
        toks.push(vocab.eos());
        Ok(toks)
    }
}

/// Strips leading zeros of a digit string, keeping a single `"0"`.
fn canonical_digits(digits: &str) -> String {
    let trimmed = digits.trim_start_matches('0');
    if trimmed.is_empty() {
        "0".to_string()
    } else {
        trimmed.to_string()
    }
}

/// Generates one problem, deterministic in `(family, difficulty, seed)`.
pub fn generate_problem(family: Family, difficulty: u32, seed: u64) -> Result<Problem, TaskError> {
    if difficulty < 1 || difficulty > family.max_difficulty() {
        return Err(TaskError::DifficultyOutOfRange {
            family,
            difficulty,
            max: family.max_difficulty(),
        });
    }
    let mut rng = rng_from(&[fnv1a64(family.tag().as_bytes()), difficulty as u64, seed]);
    let prompt = match family {
        Family::ChainMod => {
            let mut s = rng.random_range(0..10u32).to_string();
            for _ in 0..difficulty {
                let op = ["+", "-", "*"][rng.random_range(0..3usize)];
                s.push_str(op);
                s.push_str(&rng.random_range(0..10u32).to_string());
            }
            s.push_str("%10=");
            s
        }
        Family::ChainMax => {
            let digits: Vec<String> =
                (0..=difficulty).map(|_| rng.random_range(0..10u32).to_string()).collect();
            format!("{}=", digits.join("#"))
        }
        Family::DigitSum => {
            let digits: String =
                (0..difficulty).map(|_| char::from(b'0' + rng.random_range(0..10u8))).collect();
            format!("{digits}s=")
        }
        Family::Echo => {
            // First digit nonzero for multi-digit blocks so the block is
            // already a canonical integer.
            let mut digits = String::new();
            for i in 0..difficulty {
                let d = if i == 0 && difficulty > 1 {
                    rng.random_range(1..10u8)
                } else {
                    rng.random_range(0..10u8)
                };
                digits.push(char::from(b'0' + d));
            }
            format!("{digits}e=")
        }
    };
    let id = format!("{}-d{}-{:016x}", family.tag(), difficulty, fnv1a64(prompt.as_bytes()));
    let mut problem =
        Problem { id, domain: family, difficulty, prompt, gold_answer: String::new() };
    problem.gold_answer = oracle_solve(&problem)?;
    Ok(problem)
}

/// Exact answer by direct evaluation of the prompt.
pub fn oracle_solve(problem: &Problem) -> Result<String, TaskError> {
    let malformed = || TaskError::MalformedPrompt {
        family: problem.domain,
        prompt: problem.prompt.clone(),
    };
    let body = problem.prompt.strip_suffix('=').ok_or_else(malformed)?;
    match problem.domain {
        Family::ChainMod => {
            let chain = body.strip_suffix("%10").ok_or_else(malformed)?;
            let mut value: Option<i64> = None;
            let mut pending_op: Option<char> = None;
            for c in chain.chars() {
                match c {
                    '0'..='9' => {
                        let d = (c as u8 - b'0') as i64;
                        value = Some(match (value, pending_op.take()) {
                            (None, None) => d,
                            (Some(v), Some('+')) => (v + d).rem_euclid(10),
                            (Some(v), Some('-')) => (v - d).rem_euclid(10),
                            (Some(v), Some('*')) => (v * d).rem_euclid(10),
                            _ => return Err(malformed()),
                        });
                    }
                    '+' | '-' | '*' => {
                        if value.is_none() || pending_op.is_some() {
                            return Err(malformed());
                        }
                        pending_op = Some(c);
                    }
                    _ => return Err(malformed()),
                }
            }
            if pending_op.is_some() {
                return Err(malformed());
            }
            Ok(value.ok_or_else(malformed)?.rem_euclid(10).to_string())
        }
        Family::ChainMax => {
            let mut best: Option<u32> = None;
            for part in body.split('#') {
                let d = part.parse::<u32>().map_err(|_| malformed())?;
                if part.len() != 1 {
                    return Err(malformed());
                }
                best = Some(best.map_or(d, |b| b.max(d)));
            }
            Ok(best.ok_or_else(malformed)?.to_string())
        }
        Family::DigitSum => {
            let digits = body.strip_suffix('s').ok_or_else(malformed)?;
            if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit()) {
                return Err(malformed());
            }
            let sum: u32 = digits.chars().map(|c| (c as u8 - b'0') as u32).sum();
            Ok(sum.to_string())
        }
        Family::Echo => {
            let digits = body.strip_suffix('e').ok_or_else(malformed)?;
            if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit()) {
                return Err(malformed());
            }
            Ok(canonical_digits(digits))
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset construction and I/O
// ---------------------------------------------------------------------------

/// One line of a dataset mix: (family, difficulty, count).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MixEntry {
    pub family: Family,
    pub difficulty: u32,
    pub count: usize,
}

impl MixEntry {
    pub fn new(family: Family, difficulty: u32, count: usize) -> Self {
        Self { family, difficulty, count }
    }
}

/// Builds a deterministic dataset honoring the mix, with a deduplication
/// pass: a prompt appears at most once per family. When a family/difficulty
/// space is too small for the requested count the entry yields fewer
/// problems, so the final size may be below the requested total.
pub fn build_dataset(mix: &[MixEntry], seed: u64) -> Result<Vec<Problem>, TaskError> {
    let mut seen_ids: HashSet<String> = HashSet::new();
    let mut out = Vec::new();
    for (entry_idx, entry) in mix.iter().enumerate() {
        let mut produced = 0usize;
        let mut attempt = 0u64;
        let max_attempts = 64 * entry.count as u64 + 256;
        while produced < entry.count && attempt < max_attempts {
            let sub_seed = crate::seeding::mix_seed(&[seed, entry_idx as u64, attempt]);
            attempt += 1;
            let problem = generate_problem(entry.family, entry.difficulty, sub_seed)?;
            if seen_ids.insert(problem.id.clone()) {
                out.push(problem);
                produced += 1;
            }
        }
    }
    Ok(out)
}

/// Writes a dataset as JSON lines: `{id, domain, difficulty, prompt, answer}`.
pub fn write_dataset(path: &Path, problems: &[Problem]) -> Result<(), TaskError> {
    let mut w = BufWriter::new(File::create(path)?);
    for p in problems {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a JSONL dataset, enforcing id uniqueness.
pub fn read_dataset(path: &Path) -> Result<Vec<Problem>, TaskError> {
    let reader = BufReader::new(File::open(path)?);
    let mut seen = HashSet::new();
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let p: Problem = serde_json::from_str(&line)?;
        if !seen.insert(p.id.clone()) {
            return Err(TaskError::DuplicateId(p.id));
        }
        out.push(p);
    }
    Ok(out)
}
