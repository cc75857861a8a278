//! Tokens, token sequences, and vocabularies shared by every model and
//! dataset, plus the two tokenizers (ABC text and REMI note events) and a
//! minimal Standard MIDI File reader/writer.

pub mod abc;
pub mod midi;
pub mod remi;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Lexical class of a token. ABC tokens use the first eight kinds, REMI
/// streams use `Bar`, `Position`, `Pitch`, `Velocity` and `Duration`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TokenKind {
    Meter,
    Key,
    Bar,
    Pitch,
    Duration,
    BrokenRhythm,
    Grouping,
    Rest,
    Position,
    Velocity,
    Special,
}

/// Which notation family a token belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenFamily {
    Abc,
    Remi,
    Special,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    pub text: String,
    pub kind: TokenKind,
}

impl Token {
    pub fn new(text: impl Into<String>, kind: TokenKind) -> Self {
        Self { text: text.into(), kind }
    }

    /// Classify a bare token string into its kind. Accepts special tokens,
    /// REMI tokens, and anything the ABC lexer recognizes as a single token.
    pub fn classify(text: &str) -> Result<Self, TokenizeError> {
        if SPECIAL_TOKENS.contains(&text) {
            return Ok(Token::new(text, TokenKind::Special));
        }
        if let Some(kind) = remi::classify_remi(text) {
            return Ok(Token::new(text, kind));
        }
        let toks = abc::tokenize(text)?;
        if toks.tokens.len() == 1 && toks.tokens[0].text == text {
            return Ok(toks.tokens.into_iter().next().unwrap());
        }
        Err(TokenizeError::Unrecognized { offset: 0, fragment: text.to_string() })
    }

    pub fn family(&self) -> TokenFamily {
        match self.kind {
            TokenKind::Special => TokenFamily::Special,
            TokenKind::Position | TokenKind::Velocity => TokenFamily::Remi,
            _ => {
                if remi::classify_remi(&self.text).is_some() {
                    TokenFamily::Remi
                } else {
                    TokenFamily::Abc
                }
            }
        }
    }
}

/// An ordered token list, optionally paired with integer ids once encoded
/// against a vocabulary.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TokenSequence {
    pub tokens: Vec<Token>,
    pub ids: Option<Vec<u32>>,
    /// Fingerprint of the vocabulary the ids were produced under.
    pub vocab_fingerprint: Option<u64>,
}

impl TokenSequence {
    pub fn from_tokens(tokens: Vec<Token>) -> Self {
        Self { tokens, ids: None, vocab_fingerprint: None }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.tokens.iter().map(|t| t.text.as_str())
    }

    /// Serialize to the JSON-lines record form `{"tokens": [...], "ids": [...]}`.
    pub fn to_json_record(&self) -> String {
        #[derive(Serialize)]
        struct Record<'a> {
            tokens: Vec<&'a str>,
            #[serde(skip_serializing_if = "Option::is_none")]
            ids: &'a Option<Vec<u32>>,
        }
        serde_json::to_string(&Record { tokens: self.texts().collect(), ids: &self.ids })
            .expect("token record serialization cannot fail")
    }

    pub fn from_json_record(line: &str) -> Result<Self, TokenizeError> {
        #[derive(Deserialize)]
        struct Record {
            tokens: Vec<String>,
            #[serde(default)]
            ids: Option<Vec<u32>>,
        }
        let rec: Record = serde_json::from_str(line)
            .map_err(|e| TokenizeError::Unrecognized { offset: 0, fragment: e.to_string() })?;
        let tokens = rec
            .tokens
            .iter()
            .map(|t| Token::classify(t))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Self { tokens, ids: rec.ids, vocab_fingerprint: None })
    }
}

#[derive(Debug, Error)]
pub enum TokenizeError {
    #[error("unrecognized input at byte {offset}: {fragment:?}")]
    Unrecognized { offset: usize, fragment: String },
}

#[derive(Debug, Error)]
pub enum DetokenizeError {
    #[error("token {index} ({text:?}) is not an ABC token")]
    Kind { index: usize, text: String },
}

#[derive(Debug, Error)]
pub enum VocabError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
}

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

pub const PAD_TOKEN: &str = "<pad>";
pub const BOS_TOKEN: &str = "<bos>";
pub const EOS_TOKEN: &str = "<eos>";
pub const UNK_TOKEN: &str = "<unk>";

const SPECIAL_TOKENS: [&str; 4] = [PAD_TOKEN, BOS_TOKEN, EOS_TOKEN, UNK_TOKEN];

/// Bijection between token strings and contiguous integer ids. Ids 0..=3 are
/// reserved for the PAD/BOS/EOS/UNK specials; corpus tokens follow in first
/// occurrence order.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    id_to_token: Vec<String>,
    token_to_id: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build from a token corpus. Deterministic: specials first, then first
    /// occurrence order of distinct token texts.
    pub fn build<'a, I>(corpus: I) -> Result<Self, VocabError>
    where
        I: IntoIterator<Item = &'a TokenSequence>,
    {
        let mut vocab = Self::empty();
        let mut saw_any = false;
        for seq in corpus {
            saw_any = true;
            for tok in &seq.tokens {
                vocab.intern(&tok.text);
            }
        }
        if !saw_any {
            return Err(VocabError::EmptyCorpus);
        }
        Ok(vocab)
    }

    fn empty() -> Self {
        let mut vocab = Self { id_to_token: Vec::new(), token_to_id: HashMap::new() };
        for special in SPECIAL_TOKENS {
            vocab.intern(special);
        }
        vocab
    }

    /// Rebuild from a stored id-ordered token list (checkpoint loading).
    pub fn from_id_ordered(tokens: Vec<String>) -> Result<Self, TokenizeError> {
        for (i, special) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(special) {
                return Err(TokenizeError::Unrecognized {
                    offset: i,
                    fragment: format!("vocabulary slot {i} is not the {special} special"),
                });
            }
        }
        let token_to_id =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        Ok(Self { id_to_token: tokens, token_to_id })
    }

    fn intern(&mut self, text: &str) -> u32 {
        if let Some(&id) = self.token_to_id.get(text) {
            return id;
        }
        let id = self.id_to_token.len() as u32;
        self.id_to_token.push(text.to_string());
        self.token_to_id.insert(text.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn is_empty(&self) -> bool {
        false // specials are always present
    }

    pub fn id_of(&self, text: &str) -> Option<u32> {
        self.token_to_id.get(text).copied()
    }

    pub fn token_of(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn id_ordered_tokens(&self) -> &[String] {
        &self.id_to_token
    }

    pub fn is_special(&self, id: u32) -> bool {
        id < SPECIAL_TOKENS.len() as u32
    }

    /// FNV-1a over the id-ordered token list; tags encoded sequences.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf29ce484222325;
        for tok in &self.id_to_token {
            for b in tok.as_bytes() {
                h ^= u64::from(*b);
                h = h.wrapping_mul(0x100000001b3);
            }
            h ^= 0xff;
            h = h.wrapping_mul(0x100000001b3);
        }
        h
    }

    /// Map ids back to tokens. Ids out of range come back as UNK.
    pub fn decode(&self, ids: &[u32]) -> Vec<Token> {
        ids.iter()
            .map(|&id| {
                let text = self.token_of(id).unwrap_or(UNK_TOKEN);
                Token::classify(text).unwrap_or_else(|_| Token::new(text, TokenKind::Special))
            })
            .collect()
    }
}

/// Populate `seq.ids` under `vocab`. Unknown tokens map to UNK; with
/// `add_bos_eos` the id stream is wrapped as `[BOS] body [EOS]`.
pub fn encode(seq: &TokenSequence, vocab: &Vocabulary, add_bos_eos: bool) -> TokenSequence {
    let mut ids = Vec::with_capacity(seq.tokens.len() + 2);
    if add_bos_eos {
        ids.push(BOS_ID);
    }
    ids.extend(seq.tokens.iter().map(|t| vocab.id_of(&t.text).unwrap_or(UNK_ID)));
    if add_bos_eos {
        ids.push(EOS_ID);
    }
    let mut tokens = seq.tokens.clone();
    if add_bos_eos {
        tokens.insert(0, Token::new(BOS_TOKEN, TokenKind::Special));
        tokens.push(Token::new(EOS_TOKEN, TokenKind::Special));
    }
    TokenSequence { tokens, ids: Some(ids), vocab_fingerprint: Some(vocab.fingerprint()) }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq_of(texts: &[&str]) -> TokenSequence {
        TokenSequence::from_tokens(
            texts.iter().map(|t| Token::classify(t).unwrap()).collect(),
        )
    }

    #[test]
    fn vocabulary_counts_distinct_tokens() {
        let seq = seq_of(&["G", "A", "G"]);
        let vocab = Vocabulary::build([&seq]).unwrap();
        assert_eq!(vocab.len(), 6);
        assert_eq!(vocab.id_of("<pad>"), Some(PAD_ID));
        assert_eq!(vocab.id_of("G"), Some(4));
        assert_eq!(vocab.id_of("A"), Some(5));
    }

    #[test]
    fn vocabulary_idempotent_under_duplicate_sequences() {
        let seq = seq_of(&["G", "A", "G"]);
        let once = Vocabulary::build([&seq]).unwrap();
        let twice = Vocabulary::build([&seq, &seq]).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn empty_corpus_is_an_error() {
        let err = Vocabulary::build(std::iter::empty::<&TokenSequence>()).unwrap_err();
        assert!(matches!(err, VocabError::EmptyCorpus));
    }

    #[test]
    fn encode_without_specials() {
        let seq = seq_of(&["G", "A", "G"]);
        let vocab = Vocabulary::build([&seq]).unwrap();
        let enc = encode(&seq_of(&["G", "A"]), &vocab, false);
        assert_eq!(enc.ids.as_deref(), Some(&[4, 5][..]));
    }

    #[test]
    fn encode_with_bos_eos() {
        let seq = seq_of(&["G", "A", "G"]);
        let vocab = Vocabulary::build([&seq]).unwrap();
        let enc = encode(&seq_of(&["G", "A"]), &vocab, true);
        assert_eq!(enc.ids.as_deref(), Some(&[BOS_ID, 4, 5, EOS_ID][..]));
    }

    #[test]
    fn unknown_token_maps_to_unk() {
        let seq = seq_of(&["G", "A"]);
        let vocab = Vocabulary::build([&seq]).unwrap();
        let enc = encode(&seq_of(&["c"]), &vocab, false);
        assert_eq!(enc.ids.as_deref(), Some(&[UNK_ID][..]));
    }

    #[test]
    fn decode_inverts_encode_for_known_tokens() {
        let seq = seq_of(&["M:4/4", "K:Cmaj", "|:", "G", "A", "|"]);
        let vocab = Vocabulary::build([&seq]).unwrap();
        let enc = encode(&seq, &vocab, false);
        let decoded = vocab.decode(enc.ids.as_ref().unwrap());
        assert_eq!(decoded, seq.tokens);
    }

    #[test]
    fn json_record_round_trip() {
        let mut seq = seq_of(&["M:4/4", "K:Cmaj", "G", "2"]);
        seq.ids = Some(vec![4, 5, 6, 7]);
        let line = seq.to_json_record();
        let back = TokenSequence::from_json_record(&line).unwrap();
        assert_eq!(back.tokens, seq.tokens);
        assert_eq!(back.ids, seq.ids);
    }

    #[test]
    fn family_distinguishes_remi_from_abc() {
        assert_eq!(Token::classify("Pitch_60").unwrap().family(), TokenFamily::Remi);
        assert_eq!(Token::classify("_B").unwrap().family(), TokenFamily::Abc);
        assert_eq!(Token::classify("Bar").unwrap().family(), TokenFamily::Remi);
        assert_eq!(Token::classify("|").unwrap().family(), TokenFamily::Abc);
        assert_eq!(Token::classify("<pad>").unwrap().family(), TokenFamily::Special);
    }
}
