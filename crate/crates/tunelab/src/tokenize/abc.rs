//! Lexer and canonical printer for the folk-corpus ABC subset.
//!
//! Token classes: `M:`/`K:` header fields (single tokens), bar and repeat
//! symbols, pitches (accidental + letter + octave marks fused), standalone
//! duration tokens, broken-rhythm markers, tuplet openers, and the rest `z`.
//! Anything outside the table is a hard [`TokenizeError`] rather than being
//! skipped.

use super::{DetokenizeError, Token, TokenFamily, TokenKind, TokenSequence, TokenizeError};

const BAR_SYMBOLS: [&str; 6] = ["|:", "|]", "||", "::", ":|", "|"];

pub fn is_bar_symbol(text: &str) -> bool {
    BAR_SYMBOLS.contains(&text)
}

/// Lex an ABC tune (headers plus body) into a token sequence. Whitespace
/// separates tokens and is otherwise insignificant.
pub fn tokenize(text: &str) -> Result<TokenSequence, TokenizeError> {
    let bytes = text.as_bytes();
    let mut tokens = Vec::new();
    let mut pos = 0;
    while pos < bytes.len() {
        let b = bytes[pos];
        if b.is_ascii_whitespace() {
            pos += 1;
            continue;
        }
        let (token, len) = lex_one(text, pos)?;
        tokens.push(token);
        pos += len;
    }
    Ok(TokenSequence::from_tokens(tokens))
}

fn lex_one(text: &str, pos: usize) -> Result<(Token, usize), TokenizeError> {
    let bytes = text.as_bytes();
    let rest = &text[pos..];
    let b = bytes[pos];

    if rest.starts_with("M:") {
        return lex_meter(text, pos);
    }
    if rest.starts_with("K:") {
        return lex_key(text, pos);
    }
    for bar in BAR_SYMBOLS {
        if rest.starts_with(bar) {
            return Ok((Token::new(bar, TokenKind::Bar), bar.len()));
        }
    }
    match b {
        b'^' | b'_' | b'=' | b'A'..=b'G' | b'a'..=b'g' => lex_pitch(text, pos),
        b'0'..=b'9' | b'/' => Ok(lex_duration(text, pos)),
        b'>' | b'<' => Ok((Token::new(&rest[..1], TokenKind::BrokenRhythm), 1)),
        b'(' => {
            if matches!(bytes.get(pos + 1), Some(b'2'..=b'9')) {
                Ok((Token::new(&rest[..2], TokenKind::Grouping), 2))
            } else {
                Err(unrecognized(text, pos))
            }
        }
        b'z' => Ok((Token::new("z", TokenKind::Rest), 1)),
        _ => Err(unrecognized(text, pos)),
    }
}

fn lex_meter(text: &str, pos: usize) -> Result<(Token, usize), TokenizeError> {
    // M:<num>/<den>
    let bytes = text.as_bytes();
    let mut end = pos + 2;
    let num_start = end;
    while matches!(bytes.get(end), Some(b'0'..=b'9')) {
        end += 1;
    }
    if end == num_start || bytes.get(end) != Some(&b'/') {
        return Err(unrecognized(text, pos));
    }
    end += 1;
    let den_start = end;
    while matches!(bytes.get(end), Some(b'0'..=b'9')) {
        end += 1;
    }
    if end == den_start {
        return Err(unrecognized(text, pos));
    }
    Ok((Token::new(&text[pos..end], TokenKind::Meter), end - pos))
}

fn lex_key(text: &str, pos: usize) -> Result<(Token, usize), TokenizeError> {
    // K:<tonic>(#|b)?<mode letters>
    let bytes = text.as_bytes();
    let mut end = pos + 2;
    if !matches!(bytes.get(end), Some(b'A'..=b'G')) {
        return Err(unrecognized(text, pos));
    }
    end += 1;
    if matches!(bytes.get(end), Some(b'#') | Some(b'b')) {
        end += 1;
    }
    while matches!(bytes.get(end), Some(b'a'..=b'z')) {
        end += 1;
    }
    Ok((Token::new(&text[pos..end], TokenKind::Key), end - pos))
}

fn lex_pitch(text: &str, pos: usize) -> Result<(Token, usize), TokenizeError> {
    let bytes = text.as_bytes();
    let mut end = pos;
    match bytes[end] {
        b'^' | b'_' => {
            end += 1;
            if bytes.get(end) == Some(&bytes[pos]) {
                end += 1; // ^^ or __
            }
        }
        b'=' => end += 1,
        _ => {}
    }
    if !matches!(bytes.get(end), Some(b'A'..=b'G') | Some(b'a'..=b'g')) {
        return Err(unrecognized(text, pos));
    }
    end += 1;
    while matches!(bytes.get(end), Some(b'\'') | Some(b',')) {
        end += 1;
    }
    Ok((Token::new(&text[pos..end], TokenKind::Pitch), end - pos))
}

fn lex_duration(text: &str, pos: usize) -> (Token, usize) {
    // integer, integer/integer, /integer, or bare /
    let bytes = text.as_bytes();
    let mut end = pos;
    while matches!(bytes.get(end), Some(b'0'..=b'9')) {
        end += 1;
    }
    if end == pos {
        // starts with '/': bare slash or /<digits>
        end += 1;
        while matches!(bytes.get(end), Some(b'0'..=b'9')) {
            end += 1;
        }
    } else if bytes.get(end) == Some(&b'/') && matches!(bytes.get(end + 1), Some(b'0'..=b'9')) {
        end += 1;
        while matches!(bytes.get(end), Some(b'0'..=b'9')) {
            end += 1;
        }
    }
    (Token::new(&text[pos..end], TokenKind::Duration), end - pos)
}

fn unrecognized(text: &str, pos: usize) -> TokenizeError {
    let fragment: String = text[pos..].chars().take(8).collect();
    TokenizeError::Unrecognized { offset: pos, fragment }
}

/// Print a token sequence as canonical ABC text: header tokens each on their
/// own line, body tokens space-joined. Inverse of [`tokenize`] up to
/// whitespace normalization.
pub fn detokenize(seq: &TokenSequence) -> Result<String, DetokenizeError> {
    for (index, tok) in seq.tokens.iter().enumerate() {
        if tok.family() != TokenFamily::Abc {
            return Err(DetokenizeError::Kind { index, text: tok.text.clone() });
        }
    }
    let mut out = String::new();
    let mut line_has_body = false;
    for tok in &seq.tokens {
        match tok.kind {
            TokenKind::Meter | TokenKind::Key => {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&tok.text);
                line_has_body = false;
            }
            _ => {
                if out.is_empty() {
                    // body starts the text
                } else if line_has_body {
                    out.push(' ');
                } else {
                    out.push('\n');
                }
                out.push_str(&tok.text);
                line_has_body = true;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(seq: &TokenSequence) -> Vec<&str> {
        seq.texts().collect()
    }

    #[test]
    fn tokenizes_headers_and_body() {
        let seq = tokenize("M:4/4\nK:Cmaj\n|:GABc|").unwrap();
        assert_eq!(texts(&seq), ["M:4/4", "K:Cmaj", "|:", "G", "A", "B", "c", "|"]);
        assert_eq!(seq.tokens[0].kind, TokenKind::Meter);
        assert_eq!(seq.tokens[2].kind, TokenKind::Bar);
        assert_eq!(seq.tokens[3].kind, TokenKind::Pitch);
    }

    #[test]
    fn empty_input_yields_empty_sequence() {
        assert!(tokenize("").unwrap().is_empty());
    }

    #[test]
    fn accidental_fuses_with_pitch_duration_stays_separate() {
        let seq = tokenize("K:Cmaj\n_B2>A").unwrap();
        assert_eq!(texts(&seq), ["K:Cmaj", "_B", "2", ">", "A"]);
        assert_eq!(seq.tokens[1].kind, TokenKind::Pitch);
        assert_eq!(seq.tokens[2].kind, TokenKind::Duration);
        assert_eq!(seq.tokens[3].kind, TokenKind::BrokenRhythm);
    }

    #[test]
    fn octave_marks_and_double_accidentals() {
        let seq = tokenize("^^c'' __B,, =f,").unwrap();
        assert_eq!(texts(&seq), ["^^c''", "__B,,", "=f,"]);
        assert!(seq.tokens.iter().all(|t| t.kind == TokenKind::Pitch));
    }

    #[test]
    fn duration_forms() {
        let seq = tokenize("A2 B3/2 c/2 d/ e12").unwrap();
        assert_eq!(texts(&seq), ["A", "2", "B", "3/2", "c", "/2", "d", "/", "e", "12"]);
    }

    #[test]
    fn bar_symbols_longest_match() {
        let seq = tokenize("|:A:|B||C|]D::E|F").unwrap();
        assert_eq!(
            texts(&seq),
            ["|:", "A", ":|", "B", "||", "C", "|]", "D", "::", "E", "|", "F"]
        );
    }

    #[test]
    fn tuplets_and_rests() {
        let seq = tokenize("(3ABc z2").unwrap();
        assert_eq!(texts(&seq), ["(3", "A", "B", "c", "z", "2"]);
        assert_eq!(seq.tokens[0].kind, TokenKind::Grouping);
        assert_eq!(seq.tokens[4].kind, TokenKind::Rest);
    }

    #[test]
    fn unrecognized_character_reports_offset_and_fragment() {
        let err = tokenize("AB?cd").unwrap_err();
        match err {
            TokenizeError::Unrecognized { offset, fragment } => {
                assert_eq!(offset, 2);
                assert!(fragment.starts_with('?'));
            }
        }
    }

    #[test]
    fn bare_paren_is_an_error() {
        assert!(tokenize("(A)").is_err());
    }

    #[test]
    fn detokenize_headers_on_own_lines() {
        let seq = tokenize("M:4/4\nK:Cmaj\n|:GABc|").unwrap();
        let text = detokenize(&seq).unwrap();
        assert_eq!(text, "M:4/4\nK:Cmaj\n|: G A B c |");
    }

    #[test]
    fn detokenize_empty_is_empty() {
        assert_eq!(detokenize(&TokenSequence::default()).unwrap(), "");
    }

    #[test]
    fn detokenize_rejects_remi_tokens() {
        let seq = TokenSequence::from_tokens(vec![
            Token::classify("G").unwrap(),
            Token::classify("Pitch_60").unwrap(),
        ]);
        let err = detokenize(&seq).unwrap_err();
        match err {
            DetokenizeError::Kind { index, text } => {
                assert_eq!(index, 1);
                assert_eq!(text, "Pitch_60");
            }
        }
    }

    #[test]
    fn round_trips_through_detokenize() {
        let sources = [
            "M:4/4\nK:Cmaj\n|:GABc|",
            "M:6/8\nK:Gmix\nG>A (3Bcd|",
            "K:Amin\n_B,2 ^c' z/2 ::",
        ];
        for src in sources {
            let toks = tokenize(src).unwrap();
            let text = detokenize(&toks).unwrap();
            let again = tokenize(&text).unwrap();
            assert_eq!(again.tokens, toks.tokens, "round trip failed for {src:?}");
        }
    }
}
