//! Boxed-answer extraction and the binary verifiable reward.
//!
//! A completion commits to an answer by enclosing it in `\boxed{...}`. The
//! verifier takes the contents of the last balanced box (nested braces are
//! handled by depth counting), normalizes it, and assigns reward 1 exactly
//! when it matches the normalized gold answer. Truncated rollouts score 0
//! regardless of content.

use serde::{Deserialize, Serialize};

use crate::policy::Rollout;
use crate::tasks::{Problem, TokenId, Vocabulary};

/// Why a completion failed verification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailureKind {
    /// Verification passed or the extracted answer simply did not match.
    None,
    /// No box marker present.
    NoBox,
    /// A box was opened but never balanced.
    Unbalanced,
    /// The rollout hit the token budget before EOS.
    Truncated,
}

/// Outcome of scoring one rollout against its problem.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    /// Contents of the last balanced box, if any.
    pub extracted: Option<String>,
    /// Exactly 0.0 or 1.0.
    pub reward: f64,
    pub failure_kind: FailureKind,
}

/// Extracts the contents of the last balanced `\boxed{...}` group from text.
///
/// Depth counting handles nested braces, so `\boxed{\frac{1}{2}}` yields
/// `\frac{1}{2}`. Returns `None` when no box opens or none balances.
pub fn extract_boxed(text: &str) -> Option<String> {
    const MARKER: &str = "\\boxed{";
    let mut last: Option<String> = None;
    let mut search_from = 0usize;
    while let Some(found) = text[search_from..].find(MARKER) {
        let open = search_from + found;
        let body_start = open + MARKER.len();
        let mut depth = 1i64;
        let mut end = None;
        for (i, c) in text[body_start..].char_indices() {
            match c {
                '{' => depth += 1,
                '}' => {
                    depth -= 1;
                    if depth == 0 {
                        end = Some(body_start + i);
                        break;
                    }
                }
                _ => {}
            }
        }
        if let Some(end) = end {
            last = Some(text[body_start..end].to_string());
        }
        search_from = body_start;
    }
    last
}

/// Token-level form of [`extract_boxed`]: the last balanced span between
/// `BOX_OPEN` and `BOX_CLOSE` tokens, rendered to text.
pub fn extract_boxed_tokens(tokens: &[TokenId], vocab: &Vocabulary) -> Option<String> {
    let open = vocab.box_open();
    let close = vocab.box_close();
    let mut last: Option<String> = None;
    for (i, &t) in tokens.iter().enumerate() {
        if t != open {
            continue;
        }
        let mut depth = 1i64;
        for (j, &u) in tokens.iter().enumerate().skip(i + 1) {
            if u == open {
                depth += 1;
            } else if u == close {
                depth -= 1;
                if depth == 0 {
                    last = Some(vocab.render(&tokens[i + 1..j]));
                    break;
                }
            }
        }
    }
    last
}

/// Canonicalizes an answer string: trims whitespace, lowercases, strips one
/// leading `+`, and removes leading zeros of integers (keeping a single
/// `0`; `-0` canonicalizes to `0`). Non-integer strings pass through
/// otherwise untouched.
pub fn normalize_answer(raw: &str) -> String {
    let s = raw.trim().to_lowercase();
    let s = s.strip_prefix('+').unwrap_or(&s);
    let (sign, digits) = match s.strip_prefix('-') {
        Some(rest) => ("-", rest),
        None => ("", s),
    };
    if !digits.is_empty() && digits.chars().all(|c| c.is_ascii_digit()) {
        let stripped = digits.trim_start_matches('0');
        if stripped.is_empty() {
            return "0".to_string();
        }
        return format!("{sign}{stripped}");
    }
    s.to_string()
}

/// Scores a rollout against its problem with a binary exact-match reward.
///
/// Truncated rollouts receive reward 0 with `failure_kind = Truncated`
/// regardless of content; the box is still extracted for telemetry.
pub fn score(rollout: &Rollout, problem: &Problem, vocab: &Vocabulary) -> Verdict {
    debug_assert_eq!(rollout.problem_id, problem.id, "rollout does not belong to problem");
    let extracted = extract_boxed_tokens(&rollout.tokens, vocab);
    if rollout.truncated {
        return Verdict { extracted, reward: 0.0, failure_kind: FailureKind::Truncated };
    }
    match extracted {
        None => {
            let opened = rollout.tokens.contains(&vocab.box_open());
            let kind = if opened { FailureKind::Unbalanced } else { FailureKind::NoBox };
            Verdict { extracted: None, reward: 0.0, failure_kind: kind }
        }
        Some(ans) => {
            let reward = if normalize_answer(&ans) == normalize_answer(&problem.gold_answer) {
                1.0
            } else {
                0.0
            };
            Verdict { extracted: Some(ans), reward, failure_kind: FailureKind::None }
        }
    }
}
