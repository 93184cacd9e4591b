use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use super::{canonicalize, TokenizerError, CONTINUATION, MAX_WORD_CHARS};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const MASK: &str = "[MASK]";

/// Special tokens in their fixed id order.
pub const SPECIALS: [&str; 5] = [PAD, UNK, CLS, SEP, MASK];

/// Token inventory; a token's id is its position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocab from an ordered token list. The five specials must
    /// occupy ids 0–4 in [`SPECIALS`] order and no token may repeat.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self, TokenizerError> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*s) {
                return Err(TokenizerError::MissingSpecial(s.to_string()));
            }
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(TokenizerError::InvalidToken(t.clone()));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(TokenizerError::DuplicateToken(t.clone()));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Specials followed by `pieces`.
    pub fn with_pieces<S: AsRef<str>>(pieces: &[S]) -> Result<Self, TokenizerError> {
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(pieces.iter().map(|p| p.as_ref().to_string()))
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> &str {
        &self.tokens[id as usize]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn pad_id(&self) -> u32 {
        0
    }
    pub fn unk_id(&self) -> u32 {
        1
    }
    pub fn cls_id(&self) -> u32 {
        2
    }
    pub fn sep_id(&self) -> u32 {
        3
    }
    pub fn mask_id(&self) -> u32 {
        4
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < SPECIALS.len()
    }

    /// True for `##`-prefixed pieces.
    pub fn is_continuation(&self, id: u32) -> bool {
        self.token(id).starts_with(CONTINUATION) && !self.is_special(id)
    }

    /// One token per line, in id order.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for t in &self.tokens {
            out.push_str(t);
            out.push('\n');
        }
        out
    }

    pub fn parse(text: &str) -> Result<Self, TokenizerError> {
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn load(path: &Path) -> Result<Self, TokenizerError> {
        let text =
            fs::read_to_string(path).map_err(|e| TokenizerError::Io(path.to_path_buf(), e))?;
        Self::parse(&text)
    }

    pub fn save(&self, path: &Path) -> Result<(), TokenizerError> {
        fs::write(path, self.to_text()).map_err(|e| TokenizerError::Io(path.to_path_buf(), e))
    }

    /// 64-bit FNV-1a over the serialized vocab, for checkpoint pairing.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0100_0000_01b3);
        }
        h
    }
}

/// Frequency-ranked vocab induction.
///
/// Layout: specials, then every character of the canonicalized corpus as a
/// word-initial token, then every character as a `##` continuation, then the
/// most frequent whole words, word prefixes and `##` word-internal substrings
/// (ties broken lexicographically) until `target_size` is reached or the
/// candidates run out.
pub fn build_vocab<S: AsRef<str>>(
    texts: &[S],
    target_size: usize,
) -> Result<Vocab, TokenizerError> {
    let mut word_freq: HashMap<String, usize> = HashMap::new();
    for text in texts {
        for w in canonicalize(text.as_ref())
            .split(' ')
            .filter(|w| !w.is_empty())
        {
            *word_freq.entry(w.to_string()).or_default() += 1;
        }
    }
    if word_freq.is_empty() {
        log::warn!("building a vocab from an empty corpus: specials only");
    }
    let alphabet: BTreeSet<char> = word_freq.keys().flat_map(|w| w.chars()).collect();
    let floor = SPECIALS.len() + 2 * alphabet.len();
    if target_size < floor {
        return Err(TokenizerError::TargetTooSmall {
            target: target_size,
            required: floor,
        });
    }

    let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
    tokens.extend(alphabet.iter().map(|c| c.to_string()));
    tokens.extend(alphabet.iter().map(|c| format!("{CONTINUATION}{c}")));

    let mut counts: HashMap<String, usize> = HashMap::new();
    for (word, &freq) in &word_freq {
        let chars: Vec<(usize, char)> = word.char_indices().collect();
        let n = chars.len();
        if !(2..=MAX_WORD_CHARS).contains(&n) {
            continue;
        }
        let offset = |i: usize| if i == n { word.len() } else { chars[i].0 };
        // Whole word and prefixes.
        for end in 2..=n {
            *counts.entry(word[..offset(end)].to_string()).or_default() += freq;
        }
        // Word-internal continuation pieces.
        for start in 1..n {
            for end in start + 2..=n {
                let piece = format!("{CONTINUATION}{}", &word[offset(start)..offset(end)]);
                *counts.entry(piece).or_default() += freq;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    let room = target_size - tokens.len();
    tokens.extend(ranked.into_iter().take(room).map(|(t, _)| t));
    Vocab::from_tokens(tokens)
}
