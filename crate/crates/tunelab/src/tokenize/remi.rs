//! REMI-style note-event tokenization: music as a stream of
//! `Bar (Position Pitch Velocity Duration)*` tokens on a fixed grid.
//!
//! Quantization tables: 4 position slots per quarter note, 32 uniform
//! velocity bins over 1..=127, and a duration vocabulary of 1..=32 grid
//! steps (one step = a quarter of a beat).

use num_rational::Rational64;
use thiserror::Error;

use super::{Token, TokenKind, TokenSequence};

pub const SLOTS_PER_BEAT: i64 = 4;
pub const VELOCITY_BINS: u32 = 32;
pub const MAX_DURATION_STEPS: i64 = 32;

/// One note in beat time. `onset` and `duration` are measured in quarter-note
/// beats from the start of the track.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoteEvent {
    pub pitch: u8,
    pub velocity: u8,
    pub onset: Rational64,
    pub duration: Rational64,
}

impl NoteEvent {
    pub fn new(pitch: u8, velocity: u8, onset: Rational64, duration: Rational64) -> Self {
        Self { pitch, velocity, onset, duration }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TimeSignature {
    pub numerator: u32,
    pub denominator: u32,
}

impl TimeSignature {
    pub fn new(numerator: u32, denominator: u32) -> Self {
        Self { numerator, denominator }
    }

    pub const FOUR_FOUR: TimeSignature = TimeSignature { numerator: 4, denominator: 4 };

    /// Number of position slots in one bar, if the meter fits the grid.
    pub fn slots_per_bar(&self) -> Result<i64, RemiError> {
        if self.numerator == 0 || self.denominator == 0 {
            return Err(RemiError::UnsupportedMeter {
                numerator: self.numerator,
                denominator: self.denominator,
            });
        }
        let numerator = 16 * i64::from(self.numerator);
        let denominator = i64::from(self.denominator);
        if numerator % denominator != 0 {
            return Err(RemiError::UnsupportedMeter {
                numerator: self.numerator,
                denominator: self.denominator,
            });
        }
        Ok(numerator / denominator)
    }
}

impl std::fmt::Display for TimeSignature {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}/{}", self.numerator, self.denominator)
    }
}

#[derive(Debug, Error)]
pub enum RemiError {
    #[error("event {index}: {what} {value} outside MIDI range")]
    Range { index: usize, what: &'static str, value: i64 },
    #[error("meter {numerator}/{denominator} does not fit the position grid")]
    UnsupportedMeter { numerator: u32, denominator: u32 },
    #[error("token {index}: {msg}")]
    Structure { index: usize, msg: String },
}

/// Classify a token string against the REMI table. Returns None for
/// non-REMI strings.
pub fn classify_remi(text: &str) -> Option<TokenKind> {
    if text == "Bar" {
        return Some(TokenKind::Bar);
    }
    for (prefix, kind) in [
        ("Position_", TokenKind::Position),
        ("Pitch_", TokenKind::Pitch),
        ("Velocity_", TokenKind::Velocity),
        ("Duration_", TokenKind::Duration),
    ] {
        if let Some(rest) = text.strip_prefix(prefix) {
            if !rest.is_empty() && rest.bytes().all(|b| b.is_ascii_digit()) {
                return Some(kind);
            }
        }
    }
    None
}

pub fn velocity_bin(velocity: u8) -> u32 {
    (u32::from(velocity) - 1) * VELOCITY_BINS / 127
}

/// Representative velocity of a bin: the smallest velocity mapping into it.
pub fn velocity_of_bin(bin: u32) -> u8 {
    (1 + (bin * 127).div_ceil(VELOCITY_BINS)) as u8
}

fn round_rational(x: Rational64) -> i64 {
    // floor(x + 1/2)
    let doubled = x * 2 + 1;
    (doubled / 2).floor().to_integer()
}

/// Convert note events into a REMI token stream. One `Bar` token opens every
/// bar from the start of the track up to the bar containing the last note.
pub fn tokenize(events: &[NoteEvent], meter: TimeSignature) -> Result<TokenSequence, RemiError> {
    let slots_per_bar = meter.slots_per_bar()?;
    let mut quantized = Vec::with_capacity(events.len());
    for (index, ev) in events.iter().enumerate() {
        if ev.pitch > 127 {
            return Err(RemiError::Range { index, what: "pitch", value: i64::from(ev.pitch) });
        }
        if ev.velocity == 0 || ev.velocity > 127 {
            return Err(RemiError::Range {
                index,
                what: "velocity",
                value: i64::from(ev.velocity),
            });
        }
        if ev.onset < Rational64::from_integer(0) {
            return Err(RemiError::Range { index, what: "onset", value: 0 });
        }
        let slot = round_rational(ev.onset * SLOTS_PER_BEAT);
        let steps = round_rational(ev.duration * SLOTS_PER_BEAT).clamp(1, MAX_DURATION_STEPS);
        quantized.push((slot, ev.pitch, ev.velocity, steps));
    }
    quantized.sort_unstable();

    let mut tokens = Vec::new();
    let mut bars_opened: i64 = 0;
    for (slot, pitch, velocity, steps) in quantized {
        let bar = slot / slots_per_bar;
        let position = slot % slots_per_bar;
        while bars_opened <= bar {
            tokens.push(Token::new("Bar", TokenKind::Bar));
            bars_opened += 1;
        }
        tokens.push(Token::new(format!("Position_{position}"), TokenKind::Position));
        tokens.push(Token::new(format!("Pitch_{pitch}"), TokenKind::Pitch));
        tokens.push(Token::new(
            format!("Velocity_{}", velocity_bin(velocity)),
            TokenKind::Velocity,
        ));
        tokens.push(Token::new(format!("Duration_{steps}"), TokenKind::Duration));
    }
    Ok(TokenSequence::from_tokens(tokens))
}

/// Parse a REMI token stream back into note events on the quantization grid.
pub fn detokenize(
    seq: &TokenSequence,
    meter: TimeSignature,
) -> Result<Vec<NoteEvent>, RemiError> {
    let slots_per_bar = meter.slots_per_bar()?;
    let mut events = Vec::new();
    let mut bar: i64 = -1;
    let mut i = 0;
    let toks = &seq.tokens;
    while i < toks.len() {
        match toks[i].text.as_str() {
            "Bar" => {
                bar += 1;
                i += 1;
            }
            _ => {
                if bar < 0 {
                    return Err(RemiError::Structure {
                        index: i,
                        msg: format!("{:?} before any Bar token", toks[i].text),
                    });
                }
                let position = expect_number(toks, i, "Position_")?;
                if position >= slots_per_bar {
                    return Err(RemiError::Structure {
                        index: i,
                        msg: format!("position {position} exceeds bar grid ({slots_per_bar} slots)"),
                    });
                }
                let pitch = expect_number(toks, i + 1, "Pitch_")?;
                let velocity_bin = expect_number(toks, i + 2, "Velocity_")?;
                let steps = expect_number(toks, i + 3, "Duration_")?;
                if pitch > 127 {
                    return Err(RemiError::Range { index: i + 1, what: "pitch", value: pitch });
                }
                if velocity_bin >= i64::from(VELOCITY_BINS) {
                    return Err(RemiError::Structure {
                        index: i + 2,
                        msg: format!("velocity bin {velocity_bin} out of range"),
                    });
                }
                if !(1..=MAX_DURATION_STEPS).contains(&steps) {
                    return Err(RemiError::Structure {
                        index: i + 3,
                        msg: format!("duration {steps} outside 1..={MAX_DURATION_STEPS}"),
                    });
                }
                let slot = bar * slots_per_bar + position;
                events.push(NoteEvent {
                    pitch: pitch as u8,
                    velocity: velocity_of_bin(velocity_bin as u32),
                    onset: Rational64::new(slot, SLOTS_PER_BEAT),
                    duration: Rational64::new(steps, SLOTS_PER_BEAT),
                });
                i += 4;
            }
        }
    }
    Ok(events)
}

fn expect_number(toks: &[Token], index: usize, prefix: &str) -> Result<i64, RemiError> {
    let tok = toks.get(index).ok_or_else(|| RemiError::Structure {
        index,
        msg: format!("stream ends where a {} token was expected", prefix.trim_end_matches('_')),
    })?;
    tok.text
        .strip_prefix(prefix)
        .and_then(|n| n.parse::<i64>().ok())
        .ok_or_else(|| RemiError::Structure {
            index,
            msg: format!(
                "expected a {} token, found {:?}",
                prefix.trim_end_matches('_'),
                tok.text
            ),
        })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn beats(n: i64, d: i64) -> Rational64 {
        Rational64::new(n, d)
    }

    fn texts(seq: &TokenSequence) -> Vec<&str> {
        seq.texts().collect()
    }

    #[test]
    fn single_note_layout() {
        // velocity 100 -> bin (99*32)/127 = 24; duration 1 beat -> 4 steps
        let events = [NoteEvent::new(60, 100, beats(0, 1), beats(1, 1))];
        let seq = tokenize(&events, TimeSignature::FOUR_FOUR).unwrap();
        assert_eq!(texts(&seq), ["Bar", "Position_0", "Pitch_60", "Velocity_24", "Duration_4"]);
    }

    #[test]
    fn empty_events_empty_stream() {
        let seq = tokenize(&[], TimeSignature::FOUR_FOUR).unwrap();
        assert!(seq.is_empty());
    }

    #[test]
    fn one_bar_token_per_bar_up_to_last_note() {
        let events = [
            NoteEvent::new(60, 100, beats(0, 1), beats(1, 1)),
            NoteEvent::new(64, 100, beats(4, 1), beats(1, 1)),
        ];
        let seq = tokenize(&events, TimeSignature::FOUR_FOUR).unwrap();
        let bar_count = seq.tokens.iter().filter(|t| t.text == "Bar").count();
        assert_eq!(bar_count, 2);
        assert_eq!(
            texts(&seq),
            [
                "Bar",
                "Position_0",
                "Pitch_60",
                "Velocity_24",
                "Duration_4",
                "Bar",
                "Position_0",
                "Pitch_64",
                "Velocity_24",
                "Duration_4"
            ]
        );
    }

    #[test]
    fn intervening_empty_bars_still_open() {
        let events = [NoteEvent::new(72, 64, beats(8, 1), beats(1, 2))];
        let seq = tokenize(&events, TimeSignature::FOUR_FOUR).unwrap();
        let bar_count = seq.tokens.iter().filter(|t| t.text == "Bar").count();
        assert_eq!(bar_count, 3); // bars 0 and 1 are empty but still open
    }

    #[test]
    fn detokenize_inverts_single_note() {
        let events = [NoteEvent::new(60, 100, beats(0, 1), beats(1, 1))];
        let seq = tokenize(&events, TimeSignature::FOUR_FOUR).unwrap();
        let back = detokenize(&seq, TimeSignature::FOUR_FOUR).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].pitch, 60);
        assert_eq!(back[0].onset, beats(0, 1));
        assert_eq!(back[0].duration, beats(1, 1));
        // velocity comes back as the bin representative
        assert_eq!(velocity_bin(back[0].velocity), velocity_bin(100));
    }

    #[test]
    fn detokenize_empty() {
        assert!(detokenize(&TokenSequence::default(), TimeSignature::FOUR_FOUR)
            .unwrap()
            .is_empty());
    }

    #[test]
    fn pitch_without_bar_is_structure_error() {
        let seq =
            TokenSequence::from_tokens(vec![Token::new("Pitch_60", TokenKind::Pitch)]);
        match detokenize(&seq, TimeSignature::FOUR_FOUR).unwrap_err() {
            RemiError::Structure { index, .. } => assert_eq!(index, 0),
            other => panic!("expected structure error, got {other:?}"),
        }
    }

    #[test]
    fn zero_velocity_is_range_error() {
        let events = [NoteEvent::new(60, 0, beats(0, 1), beats(1, 1))];
        assert!(matches!(
            tokenize(&events, TimeSignature::FOUR_FOUR).unwrap_err(),
            RemiError::Range { what: "velocity", .. }
        ));
    }

    #[test]
    fn velocity_bins_round_trip() {
        for bin in 0..VELOCITY_BINS {
            let v = velocity_of_bin(bin);
            assert!((1..=127).contains(&v));
            assert_eq!(velocity_bin(v), bin, "bin {bin} representative {v}");
        }
    }

    #[test]
    fn compound_meter_grid() {
        let six_eight = TimeSignature::new(6, 8);
        assert_eq!(six_eight.slots_per_bar().unwrap(), 12);
        let events = [NoteEvent::new(60, 80, beats(3, 1), beats(1, 2))];
        let seq = tokenize(&events, six_eight).unwrap();
        // onset 3 beats = slot 12 = bar 1 position 0
        assert_eq!(
            texts(&seq),
            ["Bar", "Bar", "Position_0", "Pitch_60", "Velocity_19", "Duration_2"]
        );
    }

    #[test]
    fn meter_off_grid_is_rejected() {
        assert!(TimeSignature::new(1, 3).slots_per_bar().is_err());
    }

    #[test]
    fn positions_non_decreasing_within_bar() {
        let events = [
            NoteEvent::new(60, 90, beats(0, 1), beats(1, 4)),
            NoteEvent::new(62, 90, beats(1, 2), beats(1, 4)),
            NoteEvent::new(64, 90, beats(1, 2), beats(1, 4)),
            NoteEvent::new(65, 90, beats(3, 1), beats(1, 4)),
        ];
        let seq = tokenize(&events, TimeSignature::FOUR_FOUR).unwrap();
        let mut last = -1i64;
        for tok in &seq.tokens {
            if tok.text == "Bar" {
                last = -1;
            } else if let Some(p) = tok.text.strip_prefix("Position_") {
                let p: i64 = p.parse().unwrap();
                assert!(p >= last);
                last = p;
            }
        }
    }
}
