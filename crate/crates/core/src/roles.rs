//! Segmentation of a trace into prompt / chain-of-thought / answer spans and
//! the per-role masks every metric and intervention consumes.
//!
//! A well-formed trace is
//! `<s> prompt… <think> cot… </think> <ans> answer… </ans> </s> [pad…]`,
//! where the BOS token and the delimiters belong to no role.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab;

#[derive(Debug, Error, PartialEq, Eq)]
#[error("malformed trace: {0}")]
pub struct MalformedTrace(pub &'static str);

/// Half-open index range `[start, end)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start: usize,
    pub end: usize,
}

impl Span {
    pub fn new(start: usize, end: usize) -> Self {
        assert!(start <= end, "invalid span {start}..{end}");
        Span { start, end }
    }

    pub fn len(&self) -> usize {
        self.end - self.start
    }

    pub fn is_empty(&self) -> bool {
        self.start == self.end
    }

    pub fn contains(&self, i: usize) -> bool {
        i >= self.start && i < self.end
    }

    pub fn iter(&self) -> std::ops::Range<usize> {
        self.start..self.end
    }
}

/// Position role. Delimiters, BOS, EOS and trailing PAD are `Delim`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Role {
    Prompt,
    Cot,
    Answer,
    Delim,
}

/// Disjoint, ordered prompt < cot < answer spans of one trace.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleSpans {
    pub prompt: Span,
    pub cot: Span,
    pub answer: Span,
}

impl RoleSpans {
    pub fn fits(&self, len: usize) -> bool {
        self.prompt.start <= self.prompt.end
            && self.prompt.end <= self.cot.start
            && self.cot.end <= self.answer.start
            && self.answer.end <= len
    }

    pub fn role_of(&self, i: usize) -> Role {
        if self.prompt.contains(i) {
            Role::Prompt
        } else if self.cot.contains(i) {
            Role::Cot
        } else if self.answer.contains(i) {
            Role::Answer
        } else {
            Role::Delim
        }
    }

    /// Per-position role labels for a sequence of `len` tokens.
    pub fn roles(&self, len: usize) -> Vec<Role> {
        (0..len).map(|i| self.role_of(i)).collect()
    }
}

/// Boolean mask that is true exactly on positions of `role`.
pub fn role_mask(spans: &RoleSpans, len: usize, role: Role) -> Vec<bool> {
    (0..len).map(|i| spans.role_of(i) == role).collect()
}

/// Split a trace into role spans by its reserved delimiter tokens.
///
/// Pure function of token ids. Returns `MalformedTrace` when a structural
/// token is missing, duplicated, or out of order; an empty CoT (adjacent
/// think delimiters) is accepted, and the answer closes at the first of
/// `</ans>`, `</s>`, or end-of-sequence.
pub fn segment(tokens: &[usize]) -> Result<RoleSpans, MalformedTrace> {
    if tokens.is_empty() || tokens[0] != vocab::BOS {
        return Err(MalformedTrace("missing BOS"));
    }
    let find_unique = |id: usize, what: &'static str| -> Result<Option<usize>, MalformedTrace> {
        let mut found = None;
        for (i, &t) in tokens.iter().enumerate() {
            if t == id {
                if found.is_some() {
                    return Err(MalformedTrace(what));
                }
                found = Some(i);
            }
        }
        Ok(found)
    };
    if tokens[1..].contains(&vocab::BOS) {
        return Err(MalformedTrace("duplicate BOS"));
    }
    let think_open =
        find_unique(vocab::THINK_OPEN, "duplicate <think>")?.ok_or(MalformedTrace("missing <think>"))?;
    let think_close = find_unique(vocab::THINK_CLOSE, "duplicate </think>")?
        .ok_or(MalformedTrace("missing </think>"))?;
    let ans_open = find_unique(vocab::ANSWER_OPEN, "duplicate <ans>")?
        .ok_or(MalformedTrace("missing <ans>"))?;
    let ans_close = find_unique(vocab::ANSWER_CLOSE, "duplicate </ans>")?;
    let eos = find_unique(vocab::EOS, "duplicate </s>")?;

    if !(0 < think_open && think_open < think_close && think_close < ans_open) {
        return Err(MalformedTrace("delimiters out of order"));
    }
    if let Some(c) = ans_close {
        if c <= ans_open {
            return Err(MalformedTrace("</ans> before <ans>"));
        }
    }
    let mut answer_end = tokens.len();
    if let Some(c) = ans_close {
        answer_end = answer_end.min(c);
    }
    if let Some(e) = eos {
        if e <= ans_open {
            return Err(MalformedTrace("</s> before <ans>"));
        }
        answer_end = answer_end.min(e);
        // only PAD may trail EOS
        if tokens[e + 1..].iter().any(|&t| t != vocab::PAD) {
            return Err(MalformedTrace("content after </s>"));
        }
    }
    if tokens[..answer_end].contains(&vocab::PAD) {
        return Err(MalformedTrace("PAD before answer end"));
    }

    Ok(RoleSpans {
        prompt: Span::new(1, think_open),
        cot: Span::new(think_open + 1, think_close),
        answer: Span::new(ans_open + 1, answer_end),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::{Vocab, ANSWER_CLOSE, ANSWER_OPEN, BOS, EOS, PAD, THINK_CLOSE, THINK_OPEN};

    fn d(v: &Vocab, c: char) -> usize {
        v.char_id(c).unwrap()
    }

    #[test]
    fn segment_by_construction() {
        // BOS p p <think> c c </think> <ans> a </ans>
        let v = Vocab::new();
        let toks = vec![
            BOS,
            d(&v, '1'),
            d(&v, '2'),
            THINK_OPEN,
            d(&v, '3'),
            d(&v, '4'),
            THINK_CLOSE,
            ANSWER_OPEN,
            d(&v, '5'),
            ANSWER_CLOSE,
        ];
        let s = segment(&toks).unwrap();
        assert_eq!(s.prompt, Span::new(1, 3));
        assert_eq!(s.cot, Span::new(4, 6));
        assert_eq!(s.answer, Span::new(8, 9));
    }

    #[test]
    fn empty_cot_accepted() {
        let v = Vocab::new();
        let toks =
            vec![BOS, d(&v, '7'), THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, d(&v, '7'), ANSWER_CLOSE, EOS];
        let s = segment(&toks).unwrap();
        assert!(s.cot.is_empty());
        assert_eq!(s.answer.len(), 1);
    }

    #[test]
    fn missing_answer_open_is_malformed() {
        let v = Vocab::new();
        let toks = vec![BOS, d(&v, '7'), THINK_OPEN, d(&v, '8'), THINK_CLOSE, d(&v, '9')];
        assert!(segment(&toks).is_err());
    }

    #[test]
    fn out_of_order_is_malformed() {
        let toks = vec![BOS, THINK_CLOSE, THINK_OPEN, ANSWER_OPEN];
        assert!(segment(&toks).is_err());
    }

    #[test]
    fn duplicate_delimiter_is_malformed() {
        let toks = vec![BOS, THINK_OPEN, THINK_OPEN, THINK_CLOSE, ANSWER_OPEN];
        assert!(segment(&toks).is_err());
    }

    #[test]
    fn answer_closes_at_eos_without_close_tag() {
        let v = Vocab::new();
        let toks = vec![BOS, d(&v, '1'), THINK_OPEN, THINK_CLOSE, ANSWER_OPEN, d(&v, '2'), EOS, PAD, PAD];
        let s = segment(&toks).unwrap();
        assert_eq!(s.answer, Span::new(5, 6));
    }

    #[test]
    fn role_masks_partition_positions() {
        let v = Vocab::new();
        let toks = vec![
            BOS,
            d(&v, '1'),
            THINK_OPEN,
            d(&v, '2'),
            THINK_CLOSE,
            ANSWER_OPEN,
            d(&v, '3'),
            ANSWER_CLOSE,
            EOS,
        ];
        let s = segment(&toks).unwrap();
        let masks = [
            role_mask(&s, toks.len(), Role::Prompt),
            role_mask(&s, toks.len(), Role::Cot),
            role_mask(&s, toks.len(), Role::Answer),
            role_mask(&s, toks.len(), Role::Delim),
        ];
        for i in 0..toks.len() {
            let count = masks.iter().filter(|m| m[i]).count();
            assert_eq!(count, 1, "position {i} covered by {count} masks");
        }
    }

    #[test]
    fn answer_role_mask_empty_answer() {
        let spans = RoleSpans {
            prompt: Span::new(1, 3),
            cot: Span::new(4, 6),
            answer: Span::new(8, 8),
        };
        let m = role_mask(&spans, 9, Role::Answer);
        assert!(m.iter().all(|&b| !b));
    }
}
