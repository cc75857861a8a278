//! Record-level transforms: the two tokenizers, random bar / subsequence
//! sampling, and vocabulary encoding. Each is registered by name and chained
//! in config declaration order.

use rand::Rng;

use super::{DataError, Payload, Transform, TransformCtx};
use crate::tokenize::{abc, encode, midi::read_midi, remi, Token, TokenKind, TokenSequence};

/// Bar structure of a token sequence: leading header tokens plus one index
/// range per bar. ABC bars end at their bar symbol (pickup material before
/// the first bar line counts as bar 0); REMI bars start at each `Bar` token.
pub struct BarLayout {
    pub header_len: usize,
    pub spans: Vec<std::ops::Range<usize>>,
}

pub fn bar_layout(seq: &TokenSequence) -> Result<Option<BarLayout>, DataError> {
    let toks = &seq.tokens;
    let header_len = toks
        .iter()
        .take_while(|t| matches!(t.kind, TokenKind::Meter | TokenKind::Key))
        .count();
    if header_len == toks.len() {
        return Ok(None);
    }
    let body = header_len..toks.len();
    let is_remi = toks[body.clone()].iter().any(|t| t.text == "Bar");
    let mut spans = Vec::new();
    if is_remi {
        let mut start = body.start;
        let mut seen_bar = false;
        for i in body.clone() {
            if toks[i].text == "Bar" {
                if i > start {
                    spans.push(start..i);
                }
                start = i;
                seen_bar = true;
            }
        }
        if start < body.end {
            spans.push(start..body.end);
        }
        debug_assert!(seen_bar);
    } else {
        let mut start = body.start;
        for i in body.clone() {
            if toks[i].kind == TokenKind::Bar {
                spans.push(start..i + 1);
                start = i + 1;
            }
        }
        if spans.is_empty() {
            return Err(DataError::NoBars);
        }
        if start < body.end {
            spans.push(start..body.end); // trailing material without a final bar line
        }
    }
    Ok(Some(BarLayout { header_len, spans }))
}

/// Sample `n` contiguous bars uniformly over all n-bar windows, keeping the
/// tune's header tokens. Sequences with fewer than `n` bars come back
/// unchanged; `n == 0` yields an empty sequence.
pub fn sample_bars(
    seq: &TokenSequence,
    n: usize,
    rng: &mut impl Rng,
) -> Result<TokenSequence, DataError> {
    if n == 0 {
        return Ok(TokenSequence::default());
    }
    let layout = match bar_layout(seq)? {
        Some(layout) => layout,
        None => return Ok(seq.clone()),
    };
    if layout.spans.len() < n {
        return Ok(seq.clone());
    }
    let start = rng.gen_range(0..=layout.spans.len() - n);
    let window = layout.spans[start].start..layout.spans[start + n - 1].end;
    let mut tokens: Vec<Token> = seq.tokens[..layout.header_len].to_vec();
    tokens.extend_from_slice(&seq.tokens[window]);
    Ok(TokenSequence::from_tokens(tokens))
}

/// Sample a contiguous token window of exactly `length`, start uniform over
/// valid starts. Shorter sequences come back unchanged.
pub fn sample_subsequence(seq: &TokenSequence, length: usize, rng: &mut impl Rng) -> TokenSequence {
    if length == 0 {
        return TokenSequence::default();
    }
    if seq.len() <= length {
        return seq.clone();
    }
    let start = rng.gen_range(0..=seq.len() - length);
    TokenSequence {
        tokens: seq.tokens[start..start + length].to_vec(),
        ids: seq.ids.as_ref().map(|ids| ids[start..start + length].to_vec()),
        vocab_fingerprint: seq.vocab_fingerprint,
    }
}

fn expect_tokens(
    payload: Payload,
    transform: &str,
) -> Result<TokenSequence, DataError> {
    match payload {
        Payload::Tokens(seq) => Ok(seq),
        other => Err(DataError::WrongPayload {
            transform: transform.to_string(),
            expected: "tokens",
            got: other.kind_name(),
        }),
    }
}

/// ABC text -> token sequence.
pub struct AbcTokenizer;

impl Transform for AbcTokenizer {
    fn name(&self) -> &str {
        "abc_tokenizer"
    }

    fn apply(&self, payload: Payload, _ctx: &mut TransformCtx) -> Result<Payload, DataError> {
        match payload {
            Payload::Text(text) => Ok(Payload::Tokens(abc::tokenize(&text)?)),
            other => Err(DataError::WrongPayload {
                transform: self.name().to_string(),
                expected: "text",
                got: other.kind_name(),
            }),
        }
    }
}

/// MIDI file -> REMI token sequence, using the file's own meter.
pub struct MidiTokenizer;

impl Transform for MidiTokenizer {
    fn name(&self) -> &str {
        "midi_tokenizer"
    }

    fn apply(&self, payload: Payload, _ctx: &mut TransformCtx) -> Result<Payload, DataError> {
        match payload {
            Payload::MidiFile(path) => {
                let (events, meter) = read_midi(&path)?;
                Ok(Payload::Tokens(remi::tokenize(&events, meter)?))
            }
            other => Err(DataError::WrongPayload {
                transform: self.name().to_string(),
                expected: "midi-file",
                got: other.kind_name(),
            }),
        }
    }
}

pub struct SampleBars {
    pub bars: usize,
}

impl Transform for SampleBars {
    fn name(&self) -> &str {
        "sample_bars"
    }

    fn apply(&self, payload: Payload, ctx: &mut TransformCtx) -> Result<Payload, DataError> {
        let seq = expect_tokens(payload, self.name())?;
        Ok(Payload::Tokens(sample_bars(&seq, self.bars, &mut ctx.rng)?))
    }

    fn stochastic(&self) -> bool {
        true
    }
}

pub struct SampleSubsequence {
    pub length: usize,
}

impl Transform for SampleSubsequence {
    fn name(&self) -> &str {
        "sample_subsequence"
    }

    fn apply(&self, payload: Payload, ctx: &mut TransformCtx) -> Result<Payload, DataError> {
        let seq = expect_tokens(payload, self.name())?;
        Ok(Payload::Tokens(sample_subsequence(&seq, self.length, &mut ctx.rng)))
    }

    fn stochastic(&self) -> bool {
        true
    }
}

/// Populate ids from the experiment vocabulary, optionally wrapping the
/// stream in BOS/EOS.
pub struct EncodeIds {
    pub add_bos_eos: bool,
}

impl Transform for EncodeIds {
    fn name(&self) -> &str {
        "encode_ids"
    }

    fn apply(&self, payload: Payload, ctx: &mut TransformCtx) -> Result<Payload, DataError> {
        let seq = expect_tokens(payload, self.name())?;
        let vocab = ctx
            .vocab
            .ok_or_else(|| DataError::NoVocabulary { transform: self.name().to_string() })?;
        Ok(Payload::Tokens(encode(&seq, vocab, self.add_bos_eos)))
    }

    fn needs_vocab(&self) -> bool {
        true
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn abc_seq(src: &str) -> TokenSequence {
        abc::tokenize(src).unwrap()
    }

    #[test]
    fn sample_bars_returns_contiguous_window_with_headers() {
        let seq = abc_seq("M:4/4\nK:Cmaj\nAB|cd|ef|ga|");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            let out = sample_bars(&seq, 2, &mut rng).unwrap();
            assert_eq!(out.tokens[0].text, "M:4/4");
            assert_eq!(out.tokens[1].text, "K:Cmaj");
            let body: Vec<&str> = out.tokens[2..].iter().map(|t| t.text.as_str()).collect();
            let windows = [
                vec!["A", "B", "|", "c", "d", "|"],
                vec!["c", "d", "|", "e", "f", "|"],
                vec!["e", "f", "|", "g", "a", "|"],
            ];
            assert!(windows.contains(&body), "unexpected window {body:?}");
        }
    }

    #[test]
    fn sample_bars_short_track_unchanged() {
        let seq = abc_seq("M:4/4\nK:Cmaj\nAB|cd|");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = sample_bars(&seq, 4, &mut rng).unwrap();
        assert_eq!(out, seq);
    }

    #[test]
    fn sample_bars_whole_sequence_single_window() {
        let seq = abc_seq("K:Cmaj\nAB|cd|ef|ga|gg|");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = sample_bars(&seq, 5, &mut rng).unwrap();
        assert_eq!(out.tokens, seq.tokens);
    }

    #[test]
    fn sample_bars_zero_is_empty() {
        let seq = abc_seq("K:Cmaj\nAB|cd|");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(sample_bars(&seq, 0, &mut rng).unwrap().is_empty());
    }

    #[test]
    fn content_without_bars_is_an_error() {
        let seq = abc_seq("K:Cmaj\nABcd");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(sample_bars(&seq, 1, &mut rng), Err(DataError::NoBars)));
    }

    #[test]
    fn pickup_counts_as_bar_zero() {
        let seq = abc_seq("K:Cmaj\nA|BC|");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // 2 bars: pickup "A |" and "B C |"
        let out = sample_bars(&seq, 2, &mut rng).unwrap();
        assert_eq!(out.tokens, seq.tokens);
    }

    #[test]
    fn remi_bars_start_at_bar_tokens() {
        use crate::tokenize::remi::{tokenize as remi_tok, NoteEvent, TimeSignature};
        use num_rational::Rational64;
        let events: Vec<NoteEvent> = (0..4)
            .map(|i| {
                NoteEvent::new(60 + i, 80, Rational64::new(4 * i64::from(i), 1), Rational64::new(1, 1))
            })
            .collect();
        let seq = remi_tok(&events, TimeSignature::FOUR_FOUR).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let out = sample_bars(&seq, 2, &mut rng).unwrap();
            assert_eq!(out.tokens[0].text, "Bar");
            assert_eq!(out.tokens.iter().filter(|t| t.text == "Bar").count(), 2);
            assert_eq!(out.len(), 10);
        }
    }

    #[test]
    fn subsequence_windows_and_short_input() {
        let seq = abc_seq("K:Cmaj\nABcdefg");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = sample_subsequence(&seq, 4, &mut rng);
        assert_eq!(out.len(), 4);
        let short = sample_subsequence(&seq, 100, &mut rng);
        assert_eq!(short, seq);
        let exact = sample_subsequence(&seq, seq.len(), &mut rng);
        assert_eq!(exact, seq);
    }

    #[test]
    fn subsequence_slices_ids_in_lockstep() {
        let mut seq = abc_seq("K:Cmaj\nABcd");
        seq.ids = Some(vec![10, 11, 12, 13, 14]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = sample_subsequence(&seq, 3, &mut rng);
        let ids = out.ids.unwrap();
        for (tok, id) in out.tokens.iter().zip(&ids) {
            let full_pos = seq.ids.as_ref().unwrap().iter().position(|x| x == id).unwrap();
            assert_eq!(seq.tokens[full_pos].text, tok.text);
        }
    }
}
