//! Token inventory, the token → numeric value map, and digit-level number
//! encoding.
//!
//! Every loss in [`crate::losses`] reads numbers through
//! [`NumberVocabulary::number_indices`] and [`NumberVocabulary::number_values`];
//! token spelling only matters for encoding and decoding text.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io;
use std::path::Path;

use thiserror::Error;

/// Relative tolerance of the equal-spacing test.
pub const SPACING_RTOL: f64 = 1e-12;

pub const PAD: &str = "<pad>";
pub const EOS: &str = "<eos>";
pub const SIGN: &str = "-";
pub const DECIMAL_POINT: &str = ".";

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("duplicate token {0:?}")]
    DuplicateToken(String),
    #[error("token {token:?} has non-finite value {value}")]
    NonFiniteValue { token: String, value: f64 },
    #[error("vocabulary has no number tokens")]
    NoNumberTokens,
    #[error("malformed number literal {0:?}")]
    MalformedNumber(String),
    #[error("vocabulary has no token {0:?}")]
    MissingToken(String),
    #[error("cannot tokenize {text:?} at byte {offset}")]
    Untokenizable { text: String, offset: usize },
    #[error("token id {id} out of range for vocabulary of size {size}")]
    IdOutOfRange { id: usize, size: usize },
    #[error("token {0:?} cannot be serialized (contains tab or newline)")]
    Unserializable(String),
    #[error("vocabulary file line {line}: {reason}")]
    Parse { line: usize, reason: String },
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Vocabulary plus the partial map from tokens to numeric values.
#[derive(Debug, Clone, PartialEq)]
pub struct NumberVocabulary {
    tokens: Vec<String>,
    values: Vec<Option<f64>>,
    number_indices: Vec<usize>,
    sorted_equidistant: bool,
    lookup: HashMap<String, usize>,
}

impl NumberVocabulary {
    /// Builds a vocabulary with `text_tokens` first, followed by
    /// `number_tokens` in the given order.
    pub fn build<S: AsRef<str>>(
        text_tokens: &[S],
        number_tokens: &[(S, f64)],
    ) -> Result<Self, VocabError> {
        let entries = text_tokens
            .iter()
            .map(|t| (t.as_ref().to_string(), None))
            .chain(
                number_tokens
                    .iter()
                    .map(|(t, v)| (t.as_ref().to_string(), Some(*v))),
            )
            .collect();
        Self::from_entries(entries)
    }

    /// Builds a vocabulary from `(token, value)` pairs in index order, so
    /// number tokens may sit anywhere in the inventory.
    pub fn from_entries(entries: Vec<(String, Option<f64>)>) -> Result<Self, VocabError> {
        let mut tokens = Vec::with_capacity(entries.len());
        let mut values = Vec::with_capacity(entries.len());
        let mut lookup = HashMap::with_capacity(entries.len());
        let mut number_indices = Vec::new();
        for (idx, (token, value)) in entries.into_iter().enumerate() {
            if let Some(v) = value {
                if !v.is_finite() {
                    return Err(VocabError::NonFiniteValue { token, value: v });
                }
                number_indices.push(idx);
            }
            if lookup.insert(token.clone(), idx).is_some() {
                return Err(VocabError::DuplicateToken(token));
            }
            tokens.push(token);
            values.push(value);
        }
        if number_indices.is_empty() {
            return Err(VocabError::NoNumberTokens);
        }
        let nums: Vec<f64> = number_indices.iter().map(|&i| values[i].unwrap()).collect();
        let sorted_equidistant = is_sorted_equidistant(&nums);
        Ok(Self {
            tokens,
            values,
            number_indices,
            sorted_equidistant,
            lookup,
        })
    }

    /// Digit-level vocabulary used by the arithmetic and copy tasks.
    pub fn task_default() -> Self {
        let mut text: Vec<String> = [PAD, EOS, "What is ", "Copy ", " + ", " - ", " * ", "?"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        text.push(SIGN.into());
        text.push(DECIMAL_POINT.into());
        text.extend(('a'..='z').map(|c| c.to_string()));
        let digits: Vec<(String, f64)> = (0..10).map(|d| (d.to_string(), d as f64)).collect();
        Self::build(&text, &digits).expect("built-in vocabulary is valid")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.lookup.get(token).copied()
    }

    pub fn require(&self, token: &str) -> Result<usize, VocabError> {
        self.id(token)
            .ok_or_else(|| VocabError::MissingToken(token.to_string()))
    }

    pub fn value_of(&self, id: usize) -> Option<f64> {
        self.values.get(id).copied().flatten()
    }

    /// Vocabulary indices of value-bearing tokens, in insertion order.
    pub fn number_indices(&self) -> &[usize] {
        &self.number_indices
    }

    /// Values of the number tokens, aligned with [`Self::number_indices`].
    pub fn number_values(&self) -> Vec<f64> {
        self.number_indices
            .iter()
            .map(|&i| self.values[i].unwrap())
            .collect()
    }

    /// Position of vocabulary id `id` inside the number slice.
    pub fn slice_position(&self, id: usize) -> Option<usize> {
        self.number_indices.iter().position(|&i| i == id)
    }

    /// Maps each vocabulary id to its position in the number slice.
    pub fn slice_positions(&self) -> Vec<Option<usize>> {
        let mut out = vec![None; self.len()];
        for (k, &i) in self.number_indices.iter().enumerate() {
            out[i] = Some(k);
        }
        out
    }

    pub fn sorted_equidistant(&self) -> bool {
        self.sorted_equidistant
    }

    /// Constant gap between consecutive number values, when there is one.
    pub fn spacing(&self) -> Option<f64> {
        if !self.sorted_equidistant {
            return None;
        }
        let v = self.number_values();
        match v.len() {
            0 | 1 => Some(1.0),
            _ => Some((v[1] - v[0]).abs()),
        }
    }

    /// Encodes a decimal literal with one token per character.
    pub fn encode_number(&self, literal: &str) -> Result<TokenSequence, VocabError> {
        if !is_decimal_literal(literal) {
            return Err(VocabError::MalformedNumber(literal.to_string()));
        }
        let mut ids = Vec::with_capacity(literal.len());
        for ch in literal.chars() {
            let mut buf = [0u8; 4];
            ids.push(self.require(ch.encode_utf8(&mut buf))?);
        }
        Ok(TokenSequence {
            ids,
            text: literal.to_string(),
        })
    }

    /// Parses the longest numeric literal starting at `start`.
    ///
    /// Returns the value and the index one past the literal, or `None` when
    /// no digit follows the optional sign.
    pub fn decode_number_span(&self, ids: &[usize], start: usize) -> Option<(f64, usize)> {
        let is_digits = |id: usize| -> Option<&str> {
            let tok = self.token(id)?;
            (self.value_of(id).is_some()
                && !tok.is_empty()
                && tok.bytes().all(|b| b.is_ascii_digit()))
            .then_some(tok)
        };
        let mut pos = start;
        let mut literal = String::new();
        if self.token(*ids.get(pos)?) == Some(SIGN) {
            literal.push('-');
            pos += 1;
        }
        let int_start = pos;
        while let Some(tok) = ids.get(pos).and_then(|&id| is_digits(id)) {
            literal.push_str(tok);
            pos += 1;
        }
        if pos == int_start {
            return None;
        }
        if ids.get(pos).and_then(|&id| self.token(id)) == Some(DECIMAL_POINT) {
            let mut frac = String::new();
            let mut q = pos + 1;
            while let Some(tok) = ids.get(q).and_then(|&id| is_digits(id)) {
                frac.push_str(tok);
                q += 1;
            }
            if !frac.is_empty() {
                literal.push('.');
                literal.push_str(&frac);
                pos = q;
            }
        }
        literal.parse::<f64>().ok().map(|v| (v, pos))
    }

    /// Greedy longest-match tokenization of arbitrary text.
    pub fn encode_text(&self, text: &str) -> Result<TokenSequence, VocabError> {
        let max_len = self.tokens.iter().map(String::len).max().unwrap_or(0);
        let mut ids = Vec::new();
        let mut offset = 0;
        while offset < text.len() {
            let rest = &text[offset..];
            let mut found = None;
            let mut len = max_len.min(rest.len());
            while len > 0 {
                if rest.is_char_boundary(len) {
                    if let Some(id) = self.id(&rest[..len]) {
                        found = Some((id, len));
                        break;
                    }
                }
                len -= 1;
            }
            let (id, len) = found.ok_or_else(|| VocabError::Untokenizable {
                text: text.to_string(),
                offset,
            })?;
            ids.push(id);
            offset += len;
        }
        Ok(TokenSequence {
            ids,
            text: text.to_string(),
        })
    }

    pub fn decode(&self, ids: &[usize]) -> Result<String, VocabError> {
        let mut out = String::new();
        for &id in ids {
            out.push_str(self.token(id).ok_or(VocabError::IdOutOfRange {
                id,
                size: self.len(),
            })?);
        }
        Ok(out)
    }

    /// Line-oriented form: `token<TAB>value|NONE`, one token per line.
    pub fn to_text(&self) -> Result<String, VocabError> {
        let mut out = String::new();
        for (tok, val) in self.tokens.iter().zip(&self.values) {
            if tok.contains(['\t', '\n', '\r']) {
                return Err(VocabError::Unserializable(tok.clone()));
            }
            match val {
                Some(v) => writeln!(out, "{tok}\t{v:?}").unwrap(),
                None => writeln!(out, "{tok}\tNONE").unwrap(),
            }
        }
        Ok(out)
    }

    pub fn from_text(text: &str) -> Result<Self, VocabError> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let (tok, val) = line.rsplit_once('\t').ok_or_else(|| VocabError::Parse {
                line: n + 1,
                reason: "missing tab separator".into(),
            })?;
            let value = if val == "NONE" {
                None
            } else {
                Some(val.parse::<f64>().map_err(|e| VocabError::Parse {
                    line: n + 1,
                    reason: e.to_string(),
                })?)
            };
            entries.push((tok.to_string(), value));
        }
        Self::from_entries(entries)
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        std::fs::write(path, self.to_text()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Token ids together with the text they render to.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub text: String,
}

/// Ground-truth token ids per position plus a padding mask
/// (`true` = padded, excluded from every loss).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelBatch {
    pub ids: Vec<usize>,
    pub pad_mask: Vec<bool>,
}

impl LabelBatch {
    pub fn new(ids: Vec<usize>, pad_mask: Vec<bool>) -> Self {
        assert_eq!(ids.len(), pad_mask.len(), "ids and pad mask lengths differ");
        Self { ids, pad_mask }
    }

    /// Labels with no padding.
    pub fn unpadded(ids: Vec<usize>) -> Self {
        let n = ids.len();
        Self::new(ids, vec![false; n])
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn active(&self) -> usize {
        self.pad_mask.iter().filter(|&&p| !p).count()
    }

    pub fn check_range(&self, vocab_size: usize) -> Result<(), VocabError> {
        match self.ids.iter().find(|&&id| id >= vocab_size) {
            Some(&id) => Err(VocabError::IdOutOfRange {
                id,
                size: vocab_size,
            }),
            None => Ok(()),
        }
    }
}

/// `true` where the label is a value-bearing token on a non-padded position.
pub fn number_mask(labels: &LabelBatch, vocab: &NumberVocabulary) -> Result<Vec<bool>, VocabError> {
    labels.check_range(vocab.len())?;
    Ok(labels
        .ids
        .iter()
        .zip(&labels.pad_mask)
        .map(|(&id, &pad)| !pad && vocab.value_of(id).is_some())
        .collect())
}

fn is_sorted_equidistant(values: &[f64]) -> bool {
    if values.len() <= 2 {
        return true;
    }
    let gap = values[1] - values[0];
    if gap <= 0.0 {
        return false;
    }
    values
        .windows(2)
        .all(|w| w[1] > w[0] && ((w[1] - w[0]) - gap).abs() <= SPACING_RTOL * gap.abs())
}

fn is_decimal_literal(s: &str) -> bool {
    let body = s.strip_prefix('-').unwrap_or(s);
    let (int, frac) = match body.split_once('.') {
        Some((i, f)) => (i, Some(f)),
        None => (body, None),
    };
    let digits = |p: &str| !p.is_empty() && p.bytes().all(|b| b.is_ascii_digit());
    digits(int) && frac.is_none_or(digits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn digits() -> Vec<(String, f64)> {
        (0..10).map(|d| (d.to_string(), d as f64)).collect()
    }

    #[test]
    fn builds_digit_vocabulary() {
        let v = NumberVocabulary::build(&["<pad>".to_string(), "+".into(), "=".into()], &digits())
            .unwrap();
        assert_eq!(v.len(), 13);
        assert_eq!(v.number_indices().len(), 10);
        assert!(v.sorted_equidistant());
        assert_eq!(v.number_values(), (0..10).map(f64::from).collect::<Vec<_>>());
        assert_eq!(v.value_of(0), None);
    }

    #[test]
    fn spacing_flag() {
        let v = NumberVocabulary::build(&["a"], &[("1", 1.0), ("10", 10.0), ("100", 100.0)]).unwrap();
        assert!(!v.sorted_equidistant());
        // vacuous for two points
        let v = NumberVocabulary::build(&["a"], &[("10", 10.0), ("100", 100.0)]).unwrap();
        assert!(v.sorted_equidistant());
        let v = NumberVocabulary::build(&["a"], &[("2", 2.0), ("1", 1.0), ("0", 0.0)]).unwrap();
        assert!(!v.sorted_equidistant());
    }

    #[test]
    fn rejects_bad_input() {
        let mut d = digits();
        d.push(("5".into(), 5.0));
        assert!(matches!(
            NumberVocabulary::build(&["a".to_string()], &d),
            Err(VocabError::DuplicateToken(t)) if t == "5"
        ));
        assert!(matches!(
            NumberVocabulary::build(&["a"], &[("x", f64::NAN)]),
            Err(VocabError::NonFiniteValue { .. })
        ));
        assert!(matches!(
            NumberVocabulary::build::<&str>(&["a"], &[]),
            Err(VocabError::NoNumberTokens)
        ));
    }

    #[test]
    fn encodes_numbers_per_character() {
        let v = NumberVocabulary::task_default();
        let seq = v.encode_number("407").unwrap();
        assert_eq!(v.decode(&seq.ids).unwrap(), "407");
        assert_eq!(seq.ids, vec![v.id("4").unwrap(), v.id("0").unwrap(), v.id("7").unwrap()]);
        let seq = v.encode_number("-3.5").unwrap();
        let toks: Vec<_> = seq.ids.iter().map(|&i| v.token(i).unwrap()).collect();
        assert_eq!(toks, ["-", "3", ".", "5"]);
        for bad in ["4a7", "", "-", "1.", ".5", "1.2.3", "+4"] {
            assert!(v.encode_number(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn decodes_spans() {
        let v = NumberVocabulary::task_default();
        let ids = |s: &[&str]| s.iter().map(|t| v.id(t).unwrap()).collect::<Vec<_>>();
        assert_eq!(v.decode_number_span(&ids(&["5", "4"]), 0), Some((54.0, 2)));
        assert_eq!(v.decode_number_span(&ids(&["-", "3", ".", "5"]), 0), Some((-3.5, 4)));
        assert_eq!(v.decode_number_span(&ids(&[" + "]), 0), None);
        assert_eq!(v.decode_number_span(&ids(&["-", "?"]), 0), None);
        assert_eq!(v.decode_number_span(&ids(&["7", ".", "?"]), 0), Some((7.0, 1)));
        assert_eq!(v.decode_number_span(&ids(&["?", "1", "2", "<eos>"]), 1), Some((12.0, 3)));
        assert_eq!(v.decode_number_span(&ids(&["1"]), 5), None);
    }

    #[test]
    fn decodes_multi_digit_tokens() {
        let v = NumberVocabulary::build(&["-"], &[("1", 1.0), ("10", 10.0), ("1001", 1001.0)]).unwrap();
        let ids = [v.id("10").unwrap(), v.id("1001").unwrap()];
        assert_eq!(v.decode_number_span(&ids, 0), Some((101001.0, 2)));
    }

    #[test]
    fn masks_number_labels() {
        let v = NumberVocabulary::task_default();
        let id = |t: &str| v.id(t).unwrap();
        let labels = LabelBatch::unpadded(vec![id("4"), id(" + "), id("2")]);
        assert_eq!(number_mask(&labels, &v).unwrap(), [true, false, true]);
        let labels = LabelBatch::new(vec![id("4"); 3], vec![true; 3]);
        assert_eq!(number_mask(&labels, &v).unwrap(), [false; 3]);
        let labels = LabelBatch::unpadded(vec![id("4"), id("0"), id("9")]);
        assert_eq!(number_mask(&labels, &v).unwrap(), [true; 3]);
        let labels = LabelBatch::unpadded(vec![v.len()]);
        assert!(number_mask(&labels, &v).is_err());
    }

    #[test]
    fn text_tokenization_round_trips() {
        let v = NumberVocabulary::task_default();
        let q = "What is 13 + 54 - 7?";
        let seq = v.encode_text(q).unwrap();
        assert_eq!(v.decode(&seq.ids).unwrap(), q);
        assert_eq!(v.encode_text(&v.decode(&seq.ids).unwrap()).unwrap().ids, seq.ids);
        assert!(v.encode_text("What is 1 / 2?").is_err());
    }

    #[test]
    fn serialization_is_bit_exact() {
        let v = NumberVocabulary::build(
            &["<pad>", "What is "],
            &[("a", 0.1), ("b", 1e-300), ("c", -2.5), ("d", 1.0 / 3.0)],
        )
        .unwrap();
        let text = v.to_text().unwrap();
        assert!(text.starts_with("<pad>\tNONE\nWhat is \tNONE\n"));
        let back = NumberVocabulary::from_text(&text).unwrap();
        assert_eq!(back, v);
        for (a, b) in back.number_values().iter().zip(v.number_values()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        let bad = NumberVocabulary::build(&["a\tb"], &[("1", 1.0)]).unwrap();
        assert!(bad.to_text().is_err());
    }
}
