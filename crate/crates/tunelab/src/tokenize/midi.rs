//! Minimal Standard MIDI File (format 0/1) reading and writing.
//!
//! Reading pairs note-on/note-off messages into [`NoteEvent`]s measured in
//! beats, merging all non-percussion tracks and dropping channel 10. Tempo
//! is ignored; beats are the time unit throughout. Writing emits the minimal
//! single-track form needed to put sampled notes back on disk.

use std::collections::VecDeque;
use std::io::Write;
use std::path::Path;

use num_rational::Rational64;
use thiserror::Error;

use super::remi::{NoteEvent, TimeSignature};

#[derive(Debug, Error)]
pub enum MidiError {
    #[error("malformed MIDI file at byte {offset}: {msg}")]
    Parse { offset: usize, msg: String },
    #[error("unsupported MIDI feature: {0}")]
    Unsupported(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(data: &'a [u8]) -> Self {
        Self { data, pos: 0 }
    }

    fn error(&self, msg: impl Into<String>) -> MidiError {
        MidiError::Parse { offset: self.pos, msg: msg.into() }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        if self.pos + n > self.data.len() {
            return Err(self.error(format!("truncated: needed {n} more bytes")));
        }
        let slice = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u8(&mut self) -> Result<u8, MidiError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, MidiError> {
        let b = self.take(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, MidiError> {
        let b = self.take(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn varlen(&mut self) -> Result<u32, MidiError> {
        let mut value: u32 = 0;
        for _ in 0..4 {
            let byte = self.u8()?;
            value = (value << 7) | u32::from(byte & 0x7f);
            if byte & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(self.error("variable-length quantity longer than 4 bytes"))
    }
}

/// Read a Standard MIDI File into note events in beats plus its meter.
/// Files without a time-signature event default to 4/4; a mid-track meter
/// change is rejected as unsupported.
pub fn read_midi(path: &Path) -> Result<(Vec<NoteEvent>, TimeSignature), MidiError> {
    let bytes = std::fs::read(path)?;
    read_midi_bytes(&bytes)
}

pub fn read_midi_bytes(bytes: &[u8]) -> Result<(Vec<NoteEvent>, TimeSignature), MidiError> {
    let mut cur = Cursor::new(bytes);
    if cur.take(4)? != b"MThd" {
        return Err(MidiError::Parse { offset: 0, msg: "missing MThd header".into() });
    }
    let header_len = cur.u32()?;
    if header_len < 6 {
        return Err(cur.error("header chunk shorter than 6 bytes"));
    }
    let format = cur.u16()?;
    if format > 1 {
        return Err(MidiError::Unsupported(format!("SMF format {format}")));
    }
    let ntrks = cur.u16()?;
    let division = cur.u16()?;
    if division & 0x8000 != 0 {
        return Err(MidiError::Unsupported("SMPTE time division".into()));
    }
    if division == 0 {
        return Err(cur.error("zero ticks per quarter note"));
    }
    cur.take(header_len as usize - 6)?;

    let division = i64::from(division);
    let mut meter: Option<TimeSignature> = None;
    let mut notes: Vec<NoteEvent> = Vec::new();
    for _ in 0..ntrks {
        read_track(&mut cur, division, &mut meter, &mut notes)?;
    }
    notes.sort_by_key(|n| (n.onset, n.pitch, n.velocity, n.duration));
    Ok((notes, meter.unwrap_or(TimeSignature::FOUR_FOUR)))
}

fn read_track(
    cur: &mut Cursor,
    division: i64,
    meter: &mut Option<TimeSignature>,
    notes: &mut Vec<NoteEvent>,
) -> Result<(), MidiError> {
    if cur.take(4)? != b"MTrk" {
        return Err(cur.error("missing MTrk chunk"));
    }
    let track_len = cur.u32()? as usize;
    let track_end = cur.pos + track_len;
    if track_end > cur.data.len() {
        return Err(cur.error("truncated: track length exceeds file"));
    }

    // open note-ons keyed by (channel, pitch), FIFO per key
    let mut open: Vec<((u8, u8), VecDeque<(i64, u8)>)> = Vec::new();
    let mut tick: i64 = 0;
    let mut running_status: Option<u8> = None;

    while cur.pos < track_end {
        tick += i64::from(cur.varlen()?);
        let first = cur.u8()?;
        let status = if first & 0x80 != 0 {
            first
        } else {
            cur.pos -= 1;
            running_status.ok_or_else(|| cur.error("data byte with no running status"))?
        };
        match status {
            0xff => {
                running_status = None;
                let meta_type = cur.u8()?;
                let len = cur.varlen()? as usize;
                let data = cur.take(len)?;
                match meta_type {
                    0x58 => {
                        if data.len() < 2 {
                            return Err(cur.error("time signature meta too short"));
                        }
                        let sig = TimeSignature::new(
                            u32::from(data[0]),
                            1u32 << u32::from(data[1]),
                        );
                        match *meter {
                            None => *meter = Some(sig),
                            Some(existing) if existing == sig => {}
                            Some(_) => {
                                return Err(MidiError::Unsupported(
                                    "meter change inside the file".into(),
                                ))
                            }
                        }
                    }
                    0x2f => {
                        cur.pos = track_end;
                        break;
                    }
                    _ => {}
                }
            }
            0xf0 | 0xf7 => {
                running_status = None;
                let len = cur.varlen()? as usize;
                cur.take(len)?;
            }
            _ => {
                running_status = Some(status);
                let kind = status & 0xf0;
                let channel = status & 0x0f;
                match kind {
                    0x90 | 0x80 => {
                        let pitch = cur.u8()? & 0x7f;
                        let velocity = cur.u8()? & 0x7f;
                        if channel == 9 {
                            continue; // percussion
                        }
                        let key = (channel, pitch);
                        if kind == 0x90 && velocity > 0 {
                            match open.iter_mut().find(|(k, _)| *k == key) {
                                Some((_, q)) => q.push_back((tick, velocity)),
                                None => {
                                    let mut q = VecDeque::new();
                                    q.push_back((tick, velocity));
                                    open.push((key, q));
                                }
                            }
                        } else if let Some((_, q)) =
                            open.iter_mut().find(|(k, _)| *k == key)
                        {
                            if let Some((on_tick, on_vel)) = q.pop_front() {
                                if tick > on_tick {
                                    notes.push(NoteEvent::new(
                                        pitch,
                                        on_vel,
                                        Rational64::new(on_tick, division),
                                        Rational64::new(tick - on_tick, division),
                                    ));
                                }
                            }
                        }
                    }
                    0xa0 | 0xb0 | 0xe0 => {
                        cur.take(2)?;
                    }
                    0xc0 | 0xd0 => {
                        cur.take(1)?;
                    }
                    _ => return Err(cur.error(format!("unexpected status byte {status:#04x}"))),
                }
            }
        }
    }
    cur.pos = track_end;
    Ok(())
}

const TICKS_PER_QUARTER: i64 = 480;

/// Write note events as a minimal single-track (format 0) MIDI file.
pub fn write_midi(
    path: &Path,
    events: &[NoteEvent],
    meter: TimeSignature,
) -> Result<(), MidiError> {
    let bytes = midi_bytes(events, meter)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn midi_bytes(events: &[NoteEvent], meter: TimeSignature) -> Result<Vec<u8>, MidiError> {
    // (tick, off-before-on flag, pitch, velocity)
    let mut messages: Vec<(i64, u8, u8, u8)> = Vec::with_capacity(events.len() * 2);
    for ev in events {
        let on = (ev.onset * TICKS_PER_QUARTER).round().to_integer();
        let off = ((ev.onset + ev.duration) * TICKS_PER_QUARTER).round().to_integer();
        messages.push((on, 1, ev.pitch, ev.velocity));
        messages.push((off.max(on + 1), 0, ev.pitch, 0));
    }
    messages.sort_unstable();

    let mut track = Vec::new();
    // time signature at tick 0
    let dd = meter.denominator.trailing_zeros() as u8;
    track.extend_from_slice(&[0x00, 0xff, 0x58, 0x04, meter.numerator as u8, dd, 24, 8]);
    let mut last_tick = 0;
    for (tick, is_on, pitch, velocity) in messages {
        push_varlen(&mut track, (tick - last_tick) as u32);
        last_tick = tick;
        let status = if is_on == 1 { 0x90 } else { 0x80 };
        track.extend_from_slice(&[status, pitch, velocity]);
    }
    track.extend_from_slice(&[0x00, 0xff, 0x2f, 0x00]); // end of track

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes()); // format 0
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(TICKS_PER_QUARTER as u16).to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    Ok(out)
}

fn push_varlen(out: &mut Vec<u8>, mut value: u32) {
    let mut stack = [0u8; 4];
    let mut n = 0;
    loop {
        stack[n] = (value & 0x7f) as u8;
        value >>= 7;
        n += 1;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        let mut byte = stack[i];
        if i > 0 {
            byte |= 0x80;
        }
        out.push(byte);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Hand-assembled format-0 file: one C4 quarter note at tick 0,
    /// 96 ticks per quarter, 4/4 meter.
    fn minimal_c4_smf() -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(b"MThd");
        b.extend_from_slice(&[0, 0, 0, 6]); // length 6
        b.extend_from_slice(&[0, 0]); // format 0
        b.extend_from_slice(&[0, 1]); // one track
        b.extend_from_slice(&[0, 96]); // 96 ticks per quarter
        let track = [
            0x00, 0xff, 0x58, 0x04, 0x04, 0x02, 0x18, 0x08, // 4/4
            0x00, 0x90, 60, 100, // note on C4
            0x60, 0x80, 60, 0, // note off after 96 ticks
            0x00, 0xff, 0x2f, 0x00, // end of track
        ];
        b.extend_from_slice(b"MTrk");
        b.extend_from_slice(&(track.len() as u32).to_be_bytes());
        b.extend_from_slice(&track);
        b
    }

    #[test]
    fn reads_single_quarter_note() {
        let (events, meter) = read_midi_bytes(&minimal_c4_smf()).unwrap();
        assert_eq!(meter, TimeSignature::FOUR_FOUR);
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].pitch, 60);
        assert_eq!(events[0].velocity, 100);
        assert_eq!(events[0].onset, Rational64::from_integer(0));
        assert_eq!(events[0].duration, Rational64::from_integer(1));
    }

    #[test]
    fn zero_note_file_gives_empty_list() {
        let mut b = Vec::new();
        b.extend_from_slice(b"MThd");
        b.extend_from_slice(&[0, 0, 0, 6, 0, 0, 0, 1, 0, 96]);
        let track = [0x00u8, 0xff, 0x2f, 0x00];
        b.extend_from_slice(b"MTrk");
        b.extend_from_slice(&(track.len() as u32).to_be_bytes());
        b.extend_from_slice(&track);
        let (events, _) = read_midi_bytes(&b).unwrap();
        assert!(events.is_empty());
    }

    #[test]
    fn truncated_file_is_parse_error() {
        let mut bytes = minimal_c4_smf();
        bytes.truncate(bytes.len() - 7);
        assert!(matches!(read_midi_bytes(&bytes), Err(MidiError::Parse { .. })));
    }

    #[test]
    fn garbage_is_parse_error() {
        assert!(matches!(read_midi_bytes(b"not midi"), Err(MidiError::Parse { .. })));
    }

    #[test]
    fn running_status_and_velocity_zero_note_off() {
        let mut b = Vec::new();
        b.extend_from_slice(b"MThd");
        b.extend_from_slice(&[0, 0, 0, 6, 0, 0, 0, 1, 0, 96]);
        let track = [
            0x00, 0x90, 60, 100, // note on
            0x00, 64, 100, // running status: second note on
            0x60, 60, 0, // running status: C4 off via velocity 0
            0x30, 64, 0, // E4 off
            0x00, 0xff, 0x2f, 0x00,
        ];
        b.extend_from_slice(b"MTrk");
        b.extend_from_slice(&(track.len() as u32).to_be_bytes());
        b.extend_from_slice(&track);
        let (events, _) = read_midi_bytes(&b).unwrap();
        assert_eq!(events.len(), 2);
        assert_eq!(events[0].pitch, 60);
        assert_eq!(events[0].duration, Rational64::from_integer(1));
        assert_eq!(events[1].pitch, 64);
        assert_eq!(events[1].duration, Rational64::new(3, 2));
    }

    #[test]
    fn percussion_channel_dropped() {
        let mut b = Vec::new();
        b.extend_from_slice(b"MThd");
        b.extend_from_slice(&[0, 0, 0, 6, 0, 0, 0, 1, 0, 96]);
        let track = [
            0x00, 0x99, 36, 100, // channel 10 kick drum
            0x60, 0x89, 36, 0,
            0x00, 0xff, 0x2f, 0x00,
        ];
        b.extend_from_slice(b"MTrk");
        b.extend_from_slice(&(track.len() as u32).to_be_bytes());
        b.extend_from_slice(&track);
        let (events, _) = read_midi_bytes(&b).unwrap();
        assert!(events.is_empty());
    }

    #[test]
    fn mid_track_meter_change_is_unsupported() {
        let mut b = Vec::new();
        b.extend_from_slice(b"MThd");
        b.extend_from_slice(&[0, 0, 0, 6, 0, 0, 0, 1, 0, 96]);
        let track = [
            0x00, 0xff, 0x58, 0x04, 0x04, 0x02, 0x18, 0x08, // 4/4
            0x60, 0xff, 0x58, 0x04, 0x03, 0x02, 0x18, 0x08, // 3/4 later
            0x00, 0xff, 0x2f, 0x00,
        ];
        b.extend_from_slice(b"MTrk");
        b.extend_from_slice(&(track.len() as u32).to_be_bytes());
        b.extend_from_slice(&track);
        assert!(matches!(read_midi_bytes(&b), Err(MidiError::Unsupported(_))));
    }

    #[test]
    fn write_then_read_round_trip() {
        let events = vec![
            NoteEvent::new(60, 100, Rational64::new(0, 1), Rational64::new(1, 1)),
            NoteEvent::new(64, 90, Rational64::new(1, 1), Rational64::new(1, 2)),
            NoteEvent::new(67, 80, Rational64::new(3, 2), Rational64::new(1, 4)),
        ];
        let bytes = midi_bytes(&events, TimeSignature::FOUR_FOUR).unwrap();
        let (back, meter) = read_midi_bytes(&bytes).unwrap();
        assert_eq!(meter, TimeSignature::FOUR_FOUR);
        assert_eq!(back, events);
    }
}
