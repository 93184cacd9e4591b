//! Text preprocessing: canonicalization, WordPiece segmentation and
//! assembly of `[CLS] … [SEP]` model inputs.

mod vocab;

use std::path::PathBuf;

use unicode_general_category::{get_general_category, GeneralCategory};
use unicode_normalization::UnicodeNormalization;

pub use vocab::{build_vocab, Vocab, CLS, MASK, PAD, SEP, SPECIALS, UNK};

pub const CONTINUATION: &str = "##";

/// Words longer than this many characters become a single `[UNK]`.
pub const MAX_WORD_CHARS: usize = 100;

#[derive(Debug, thiserror::Error)]
pub enum TokenizerError {
    #[error(
        "vocab target {target} is below the {required} tokens needed for specials and the alphabet"
    )]
    TargetTooSmall { target: usize, required: usize },
    #[error("special token {0} missing from its reserved position")]
    MissingSpecial(String),
    #[error("duplicate vocab token {0:?}")]
    DuplicateToken(String),
    #[error("invalid vocab token {0:?}")]
    InvalidToken(String),
    #[error("{0}: {1}")]
    Io(PathBuf, std::io::Error),
}

/// Lowercases, strips accents (NFD then drop nonspacing marks), turns
/// decimal digits and punctuation into spaces, and collapses whitespace.
pub fn canonicalize(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.to_lowercase().nfd() {
        let cat = get_general_category(c);
        if cat == GeneralCategory::NonspacingMark {
            continue;
        }
        if cat == GeneralCategory::DecimalNumber || cat.abbreviation().starts_with('P') {
            out.push(' ');
        } else {
            out.push(c);
        }
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Greedy longest-match-first segmentation of one canonicalized word.
/// Returns `[UNK]` alone when some suffix cannot be matched.
pub fn wordpiece(word: &str, vocab: &Vocab) -> Vec<u32> {
    let bounds: Vec<usize> = word
        .char_indices()
        .map(|(i, _)| i)
        .chain(std::iter::once(word.len()))
        .collect();
    let n = bounds.len() - 1;
    if n == 0 {
        return Vec::new();
    }
    if n > MAX_WORD_CHARS {
        return vec![vocab.unk_id()];
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    let mut candidate = String::with_capacity(word.len() + CONTINUATION.len());
    while start < n {
        let mut found = None;
        for end in (start + 1..=n).rev() {
            candidate.clear();
            if start > 0 {
                candidate.push_str(CONTINUATION);
            }
            candidate.push_str(&word[bounds[start]..bounds[end]]);
            if let Some(id) = vocab.id(&candidate) {
                found = Some((id, end));
                break;
            }
        }
        match found {
            Some((id, end)) => {
                pieces.push(id);
                start = end;
            }
            None => return vec![vocab.unk_id()],
        }
    }
    pieces
}

/// Canonicalizes `text` and segments every word.
pub fn pieces(text: &str, vocab: &Vocab) -> Vec<u32> {
    canonicalize(text)
        .split(' ')
        .filter(|w| !w.is_empty())
        .flat_map(|w| wordpiece(w, vocab))
        .collect()
}

/// Fixed-length model input.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub segment_ids: Vec<u8>,
    pub mask: Vec<u8>,
    pub n_real: usize,
}

impl TokenSequence {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    fn framed(real: Vec<u32>, segments: Vec<u8>, max_len: usize, pad: u32) -> Self {
        let n_real = real.len();
        let mut ids = real;
        let mut segment_ids = segments;
        ids.resize(max_len, pad);
        segment_ids.resize(max_len, 0);
        let mut mask = vec![1u8; n_real];
        mask.resize(max_len, 0);
        Self {
            ids,
            segment_ids,
            mask,
            n_real,
        }
    }

    /// Checks the framing rules: leading `[CLS]`, a `[SEP]` closing every
    /// segment, mask/pad agreement and segment ids switching after the
    /// first `[SEP]` only.
    pub fn validate(&self, vocab: &Vocab) -> Result<(), String> {
        let n = self.ids.len();
        if self.segment_ids.len() != n || self.mask.len() != n {
            return Err("length mismatch".into());
        }
        if self.n_real < 2 || self.n_real > n {
            return Err(format!("n_real {} out of range", self.n_real));
        }
        if self.ids[0] != vocab.cls_id() {
            return Err("first token is not [CLS]".into());
        }
        if self.ids[self.n_real - 1] != vocab.sep_id() {
            return Err("last real token is not [SEP]".into());
        }
        for i in 0..n {
            let is_pad = self.ids[i] == vocab.pad_id();
            if (self.mask[i] == 0) != is_pad {
                return Err(format!("mask/pad disagreement at {i}"));
            }
            if (i < self.n_real) != (self.mask[i] == 1) {
                return Err(format!("padding not contiguous at {i}"));
            }
        }
        let seps: Vec<usize> = (0..self.n_real)
            .filter(|&i| self.ids[i] == vocab.sep_id())
            .collect();
        let segments = if self.segment_ids[..self.n_real].contains(&1) {
            2
        } else {
            1
        };
        if seps.len() != segments {
            return Err(format!("{} [SEP] for {segments} segment(s)", seps.len()));
        }
        for i in 0..self.n_real {
            let expected = u8::from(i > seps[0]);
            if self.segment_ids[i] != expected {
                return Err(format!("segment id wrong at {i}"));
            }
        }
        Ok(())
    }
}

/// `[CLS] pieces [SEP]`, right-truncated to `max_len`, then padded.
///
/// # Panics
/// If `max_len < 3`.
pub fn encode(text: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    assert!(max_len >= 3, "max_len must be at least 3");
    let mut body = pieces(text, vocab);
    body.truncate(max_len - 2);
    let mut real = Vec::with_capacity(body.len() + 2);
    real.push(vocab.cls_id());
    real.extend(body);
    real.push(vocab.sep_id());
    let segs = vec![0u8; real.len()];
    TokenSequence::framed(real, segs, max_len, vocab.pad_id())
}

/// Drops pieces from the end of the longer side (the second side on ties)
/// until both fit in `budget`.
pub fn truncate_pair(a: &mut Vec<u32>, b: &mut Vec<u32>, budget: usize) {
    while a.len() + b.len() > budget {
        if a.len() > b.len() {
            a.pop();
        } else {
            b.pop();
        }
    }
}

/// `[CLS] a [SEP] b [SEP]` with segment 0 through the first `[SEP]`.
///
/// # Panics
/// If `max_len < 5`.
pub fn encode_pair(a: &str, b: &str, vocab: &Vocab, max_len: usize) -> TokenSequence {
    assert!(max_len >= 5, "max_len must be at least 5");
    let mut pa = pieces(a, vocab);
    let mut pb = pieces(b, vocab);
    truncate_pair(&mut pa, &mut pb, max_len - 3);
    let mut real = Vec::with_capacity(pa.len() + pb.len() + 3);
    real.push(vocab.cls_id());
    real.extend(&pa);
    real.push(vocab.sep_id());
    let first_len = real.len();
    real.extend(&pb);
    real.push(vocab.sep_id());
    let mut segs = vec![0u8; first_len];
    segs.resize(real.len(), 1);
    TokenSequence::framed(real, segs, max_len, vocab.pad_id())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(pieces: &[&str]) -> Vocab {
        Vocab::with_pieces(pieces).unwrap()
    }

    fn toks(ids: &[u32], v: &Vocab) -> Vec<String> {
        ids.iter().map(|&i| v.token(i).to_string()).collect()
    }

    #[test]
    fn canonicalize_examples() {
        assert_eq!(canonicalize("Playing 123!"), "playing");
        assert_eq!(canonicalize("Café-au-lait"), "cafe au lait");
        assert_eq!(canonicalize(""), "");
        assert_eq!(canonicalize("  A  b\tC "), "a b c");
        assert_eq!(canonicalize("naïve résumé"), "naive resume");
        assert_eq!(canonicalize("don't"), "don t");
    }

    #[test]
    fn wordpiece_examples() {
        let v = vocab(&["play", "##ing", "p", "##l"]);
        assert_eq!(toks(&wordpiece("playing", &v), &v), vec!["play", "##ing"]);
        assert_eq!(toks(&wordpiece("play", &v), &v), vec!["play"]);
        assert_eq!(toks(&wordpiece("xyz", &v), &v), vec![UNK]);
        // Partial match followed by a dead end still yields one [UNK].
        assert_eq!(toks(&wordpiece("plays", &v), &v), vec![UNK]);
    }

    #[test]
    fn overlong_word_is_unknown() {
        let v = vocab(&["a", "##a"]);
        let long = "a".repeat(MAX_WORD_CHARS + 1);
        assert_eq!(wordpiece(&long, &v), vec![v.unk_id()]);
        assert_eq!(wordpiece(&long[..MAX_WORD_CHARS], &v).len(), MAX_WORD_CHARS);
    }

    #[test]
    fn encode_examples() {
        let v = vocab(&["play", "##ing"]);
        let s = encode("playing", &v, 8);
        assert_eq!(
            toks(&s.ids, &v),
            vec![CLS, "play", "##ing", SEP, PAD, PAD, PAD, PAD]
        );
        assert_eq!(s.n_real, 4);
        assert_eq!(s.mask, vec![1, 1, 1, 1, 0, 0, 0, 0]);
        s.validate(&v).unwrap();

        let e = encode("", &v, 4);
        assert_eq!(toks(&e.ids, &v), vec![CLS, SEP, PAD, PAD]);
        e.validate(&v).unwrap();

        let long = vec!["play"; 100].join(" ");
        let t = encode(&long, &v, 8);
        assert_eq!(t.n_real, 8);
        assert_eq!(t.ids[7], v.sep_id());
        assert_eq!(&t.ids[1..7], &[v.id("play").unwrap(); 6]);
        t.validate(&v).unwrap();
    }

    #[test]
    fn encode_pair_examples() {
        let v = vocab(&["play", "##ing"]);
        let s = encode_pair("play", "play", &v, 8);
        assert_eq!(
            toks(&s.ids, &v),
            vec![CLS, "play", SEP, "play", SEP, PAD, PAD, PAD]
        );
        assert_eq!(s.segment_ids, vec![0, 0, 0, 1, 1, 0, 0, 0]);
        s.validate(&v).unwrap();

        let d = encode_pair("play", "", &v, 8);
        assert_eq!(toks(&d.ids[..4], &v), vec![CLS, "play", SEP, SEP]);
        assert_eq!(&d.segment_ids[..4], &[0, 0, 0, 1]);
        d.validate(&v).unwrap();
    }

    #[test]
    fn pair_truncation_balances() {
        // Oracle: simulate the pop loop on lengths alone.
        fn simulate(mut a: usize, mut b: usize, budget: usize) -> (usize, usize) {
            while a + b > budget {
                if a > b {
                    a -= 1
                } else {
                    b -= 1
                }
            }
            (a, b)
        }
        for la in 0..30 {
            for lb in 0..30 {
                for budget in [2, 5, 13] {
                    let mut a = vec![7u32; la];
                    let mut b = vec![9u32; lb];
                    truncate_pair(&mut a, &mut b, budget);
                    assert_eq!((a.len(), b.len()), simulate(la, lb, budget));
                    if la >= budget && lb >= budget {
                        let d = a.len() as i64 - b.len() as i64;
                        assert!(d == 0 || d == 1, "{la} {lb} {budget}");
                    }
                }
            }
        }
    }

    #[test]
    fn vocab_file_round_trip_and_checks() {
        let v = vocab(&["play", "##ing"]);
        assert_eq!(Vocab::parse(&v.to_text()).unwrap(), v);
        assert!(Vocab::parse("[UNK]\n[PAD]\n[CLS]\n[SEP]\n[MASK]\n").is_err());
        assert!(Vocab::with_pieces(&["a", "a"]).is_err());
        assert!(v.is_continuation(v.id("##ing").unwrap()));
        assert!(!v.is_continuation(v.id("play").unwrap()));
    }

    #[test]
    fn build_vocab_hand_counted() {
        // words: aa ×2, ab ×1; alphabet {a, b}; no prefixes or internal
        // pieces of length ≥ 2 exist for two-letter words.
        let v = build_vocab(&["aa aa ab"], 12).unwrap();
        let expect: Vec<&str> = SPECIALS
            .iter()
            .copied()
            .chain(["a", "b", "##a", "##b", "aa", "ab"])
            .collect();
        assert_eq!(v.tokens(), expect.as_slice());

        let v = build_vocab(&["aa aa ab"], 10).unwrap();
        assert_eq!(v.token(9), "aa");
    }

    #[test]
    fn build_vocab_minimum_and_errors() {
        let v = build_vocab(&["abc cab"], 5 + 6).unwrap();
        assert_eq!(v.len(), 11);
        assert_eq!(toks(&wordpiece("cab", &v), &v), vec!["c", "##a", "##b"]);
        assert!(matches!(
            build_vocab(&["abc"], 10),
            Err(TokenizerError::TargetTooSmall { required: 11, .. })
        ));
        let empty: [&str; 0] = [];
        assert_eq!(build_vocab(&empty, 5).unwrap().len(), 5);
    }

    #[test]
    fn build_vocab_learns_suffixes() {
        let text = "playing saying staying playing walking talking";
        let v = build_vocab(&[text], 60).unwrap();
        assert!(v.id("##ing").is_some());
        assert_eq!(build_vocab(&[text], 60).unwrap(), v);
    }
}
