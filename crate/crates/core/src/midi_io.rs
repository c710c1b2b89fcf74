//! Standard MIDI File subset reader/writer.
//!
//! Only the events the pipeline consumes are kept: notes, sustain pedal
//! (CC64), set-tempo and time-signature meta events. Everything is merged
//! onto a single absolute timeline at [`RESOLUTION`] ticks per quarter note.

use thiserror::Error;

/// Absolute time in ticks at [`RESOLUTION`] ticks per quarter note.
pub type Tick = u32;

/// Ticks per quarter note used throughout the crate.
pub const RESOLUTION: Tick = 480;
/// One 4/4 bar.
pub const BAR_TICKS: Tick = 4 * RESOLUTION;

const DEFAULT_MICROS_PER_QUARTER: u32 = 500_000;
const SUSTAIN_CONTROLLER: u8 = 64;
const WRITE_VELOCITY: u8 = 64;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MidiError {
    #[error("malformed MIDI file at byte {offset}: {reason}")]
    MalformedFile { offset: usize, reason: String },
    #[error("SMPTE time division (0x{0:04x}) is not supported")]
    UnsupportedDivision(u16),
    #[error("unsupported meter {numerator}/{denominator} at tick {tick}; only 4/4 is accepted")]
    UnsupportedMeter {
        tick: Tick,
        numerator: u8,
        denominator: u32,
    },
    #[error("file contains no notes")]
    EmptyScore,
}

fn malformed(offset: usize, reason: impl Into<String>) -> MidiError {
    MidiError::MalformedFile {
        offset,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RawEventKind {
    NoteOn { pitch: u8, velocity: u8 },
    NoteOff { pitch: u8 },
    ControlChange64 { value: u8 },
    SetTempo { micros_per_quarter: u32 },
    TimeSignature { numerator: u8, denominator: u32 },
}

/// One pipeline-relevant event on the merged, rescaled timeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawEvent {
    pub tick: Tick,
    pub kind: RawEventKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Note {
    pub onset: Tick,
    pub pitch: u8,
    pub duration: Tick,
}

impl Note {
    pub fn new(onset: Tick, pitch: u8, duration: Tick) -> Self {
        Self {
            onset,
            pitch,
            duration,
        }
    }

    pub fn end(&self) -> Tick {
        self.onset + self.duration
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TempoEvent {
    pub tick: Tick,
    pub micros_per_quarter: u32,
}

impl TempoEvent {
    pub fn from_bpm(tick: Tick, bpm: f64) -> Self {
        let mpq = (60_000_000.0 / bpm).round().clamp(1.0, 0xFF_FFFF as f64) as u32;
        Self {
            tick,
            micros_per_quarter: mpq,
        }
    }

    /// Beats per minute; exact quotient 60 000 000 / microseconds-per-quarter.
    pub fn bpm(&self) -> f64 {
        60_000_000.0 / f64::from(self.micros_per_quarter)
    }
}

/// A (tick, controller value) sample of the sustain pedal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PedalEvent {
    pub tick: Tick,
    pub value: u8,
}

/// Piano performance on a fixed 480-ticks-per-quarter, 4/4 grid.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Score {
    pub notes: Vec<Note>,
    pub tempo_events: Vec<TempoEvent>,
    pub raw_pedal: Vec<PedalEvent>,
}

impl Score {
    pub fn resolution(&self) -> Tick {
        RESOLUTION
    }

    /// Last tick touched by any note end, tempo change or pedal sample.
    pub fn end_tick(&self) -> Tick {
        let notes = self.notes.iter().map(Note::end).max().unwrap_or(0);
        let tempo = self.tempo_events.iter().map(|t| t.tick).max().unwrap_or(0);
        let pedal = self.raw_pedal.iter().map(|p| p.tick).max().unwrap_or(0);
        notes.max(tempo).max(pedal)
    }

    /// Bar start ticks covering the whole score (at least one bar).
    pub fn bars(&self) -> Vec<Tick> {
        let n = self.end_tick().div_ceil(BAR_TICKS).max(1);
        (0..n).map(|b| b * BAR_TICKS).collect()
    }

    /// Notes sorted by (onset, pitch, duration).
    pub fn sorted_notes(&self) -> Vec<Note> {
        let mut notes = self.notes.clone();
        notes.sort_unstable();
        notes
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        if self.remaining() < n {
            return Err(malformed(
                self.pos,
                format!("unexpected end of data (need {n} bytes)"),
            ));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
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

    fn varint(&mut self) -> Result<u32, MidiError> {
        let start = self.pos;
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | u32::from(b & 0x7F);
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(malformed(
            start,
            "variable-length quantity longer than 4 bytes",
        ))
    }

    fn data_byte(&mut self) -> Result<u8, MidiError> {
        let at = self.pos;
        let b = self.u8()?;
        if b & 0x80 != 0 {
            return Err(malformed(
                at,
                format!("expected data byte, found 0x{b:02x}"),
            ));
        }
        Ok(b)
    }
}

/// Events read from one track, with raw (unscaled) absolute ticks.
fn read_track(
    data: &[u8],
    base: usize,
    out: &mut Vec<(u64, RawEventKind)>,
) -> Result<u64, MidiError> {
    let mut r = Reader::new(data);
    let mut tick: u64 = 0;
    let mut running: Option<u8> = None;
    let at = |r: &Reader| base + r.pos;

    while r.remaining() > 0 {
        tick += u64::from(r.varint().map_err(|e| rebase(e, base))?);
        let status_pos = at(&r);
        let first = r.u8().map_err(|e| rebase(e, base))?;
        let status = if first & 0x80 != 0 {
            first
        } else {
            // Running status: the byte we just read is the first data byte.
            r.pos -= 1;
            running.ok_or_else(|| malformed(status_pos, "data byte without running status"))?
        };

        match status {
            0xFF => {
                running = None;
                let kind = r.u8().map_err(|e| rebase(e, base))?;
                let len = r.varint().map_err(|e| rebase(e, base))? as usize;
                let payload = r.take(len).map_err(|e| rebase(e, base))?;
                match kind {
                    0x51 => {
                        if len != 3 {
                            return Err(malformed(status_pos, "set-tempo payload must be 3 bytes"));
                        }
                        let mpq = u32::from_be_bytes([0, payload[0], payload[1], payload[2]]);
                        if mpq == 0 {
                            return Err(malformed(status_pos, "zero tempo"));
                        }
                        out.push((
                            tick,
                            RawEventKind::SetTempo {
                                micros_per_quarter: mpq,
                            },
                        ));
                    }
                    0x58 => {
                        if len < 2 {
                            return Err(malformed(status_pos, "time-signature payload too short"));
                        }
                        let denominator = 1u32.checked_shl(u32::from(payload[1])).unwrap_or(0);
                        out.push((
                            tick,
                            RawEventKind::TimeSignature {
                                numerator: payload[0],
                                denominator,
                            },
                        ));
                    }
                    0x2F => return Ok(tick),
                    _ => {}
                }
            }
            0xF0 | 0xF7 => {
                running = None;
                let len = r.varint().map_err(|e| rebase(e, base))? as usize;
                r.take(len).map_err(|e| rebase(e, base))?;
            }
            0xF1..=0xFE => {
                return Err(malformed(
                    status_pos,
                    format!("unexpected system status 0x{status:02x} in file"),
                ));
            }
            _ => {
                running = Some(status);
                let a = r.data_byte().map_err(|e| rebase(e, base))?;
                let b = match status & 0xF0 {
                    0xC0 | 0xD0 => 0,
                    _ => r.data_byte().map_err(|e| rebase(e, base))?,
                };
                match status & 0xF0 {
                    0x80 => out.push((tick, RawEventKind::NoteOff { pitch: a })),
                    0x90 if b == 0 => out.push((tick, RawEventKind::NoteOff { pitch: a })),
                    0x90 => out.push((
                        tick,
                        RawEventKind::NoteOn {
                            pitch: a,
                            velocity: b,
                        },
                    )),
                    0xB0 if a == SUSTAIN_CONTROLLER => {
                        out.push((tick, RawEventKind::ControlChange64 { value: b }))
                    }
                    _ => {}
                }
            }
        }
    }
    Ok(tick)
}

fn rebase(e: MidiError, base: usize) -> MidiError {
    match e {
        MidiError::MalformedFile { offset, reason } => MidiError::MalformedFile {
            offset: offset + base,
            reason,
        },
        other => other,
    }
}

fn rescale(tick: u64, division: u64) -> Result<Tick, MidiError> {
    // Nearest integer, halves rounded up.
    let scaled = (tick * 2 * u64::from(RESOLUTION) + division) / (2 * division);
    Tick::try_from(scaled).map_err(|_| malformed(0, format!("tick {tick} overflows the timeline")))
}

/// Reads every pipeline-relevant event, merged across tracks and rescaled to
/// [`RESOLUTION`]. Also returns the final (end-of-track) tick of the file.
pub fn read_events(bytes: &[u8]) -> Result<(Vec<RawEvent>, Tick), MidiError> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != b"MThd" {
        return Err(malformed(0, "missing MThd header"));
    }
    let header_len = r.u32()? as usize;
    if header_len < 6 {
        return Err(malformed(4, "header chunk shorter than 6 bytes"));
    }
    let header_start = r.pos;
    let format = r.u16()?;
    let ntracks = r.u16()?;
    let division = r.u16()?;
    r.take(header_len - (r.pos - header_start))?;
    if format > 1 {
        return Err(malformed(8, format!("unsupported SMF format {format}")));
    }
    if division & 0x8000 != 0 {
        return Err(MidiError::UnsupportedDivision(division));
    }
    if division == 0 {
        return Err(malformed(12, "zero ticks-per-quarter division"));
    }

    let mut raw: Vec<(u64, usize, RawEventKind)> = Vec::new();
    let mut last_tick = 0u64;
    let mut tracks_seen = 0usize;
    while r.remaining() > 0 && tracks_seen < usize::from(ntracks) {
        let chunk_pos = r.pos;
        let id = r.take(4)?;
        let len = r.u32()? as usize;
        let data = r
            .take(len)
            .map_err(|_| malformed(chunk_pos, "chunk length exceeds file size"))?;
        if id != b"MTrk" {
            continue;
        }
        let mut events = Vec::new();
        let end = read_track(data, chunk_pos + 8, &mut events)?;
        last_tick = last_tick.max(end);
        raw.extend(events.into_iter().map(|(t, k)| (t, tracks_seen, k)));
        tracks_seen += 1;
    }
    if tracks_seen < usize::from(ntracks) {
        return Err(malformed(
            r.pos,
            format!("expected {ntracks} tracks, found {tracks_seen}"),
        ));
    }

    // Stable sort keeps in-track order for equal ticks; tracks merge in file order.
    raw.sort_by_key(|&(t, track, _)| (t, track));
    let division = u64::from(division);
    let events = raw
        .into_iter()
        .map(|(t, _, kind)| {
            Ok(RawEvent {
                tick: rescale(t, division)?,
                kind,
            })
        })
        .collect::<Result<Vec<_>, MidiError>>()?;
    Ok((events, rescale(last_tick, division)?))
}

/// Parses a format 0/1 Standard MIDI File into a [`Score`].
pub fn parse_midi(bytes: &[u8]) -> Result<Score, MidiError> {
    let (mut events, last_tick) = read_events(bytes)?;
    // Note-offs resolve before note-ons sharing a tick.
    events.sort_by_key(|e| (e.tick, !matches!(e.kind, RawEventKind::NoteOff { .. })));

    let mut open: [Option<Tick>; 128] = [None; 128];
    let mut score = Score::default();
    let close = |notes: &mut Vec<Note>, pitch: u8, onset: Tick, end: Tick| {
        if end > onset {
            notes.push(Note::new(onset, pitch, end - onset));
        }
    };

    for e in &events {
        match e.kind {
            RawEventKind::NoteOn { pitch, .. } => {
                if let Some(onset) = open[pitch as usize].replace(e.tick) {
                    close(&mut score.notes, pitch, onset, e.tick);
                }
            }
            RawEventKind::NoteOff { pitch } => {
                if let Some(onset) = open[pitch as usize].take() {
                    close(&mut score.notes, pitch, onset, e.tick);
                }
            }
            RawEventKind::ControlChange64 { value } => score.raw_pedal.push(PedalEvent {
                tick: e.tick,
                value,
            }),
            RawEventKind::SetTempo { micros_per_quarter } => score.tempo_events.push(TempoEvent {
                tick: e.tick,
                micros_per_quarter,
            }),
            RawEventKind::TimeSignature {
                numerator,
                denominator,
            } => {
                if numerator != 4 || denominator != 4 {
                    return Err(MidiError::UnsupportedMeter {
                        tick: e.tick,
                        numerator,
                        denominator,
                    });
                }
            }
        }
    }
    let file_end = events.last().map_or(0, |e| e.tick).max(last_tick);
    for (pitch, onset) in open.iter().enumerate() {
        if let Some(onset) = onset {
            close(&mut score.notes, pitch as u8, *onset, file_end);
        }
    }
    if score.notes.is_empty() {
        return Err(MidiError::EmptyScore);
    }
    score.notes.sort_unstable();
    Ok(score)
}

fn write_varint(out: &mut Vec<u8>, mut value: u32) {
    let mut buf = [0u8; 4];
    let mut i = 3;
    buf[i] = (value & 0x7F) as u8;
    value >>= 7;
    while value > 0 {
        i -= 1;
        buf[i] = 0x80 | (value & 0x7F) as u8;
        value >>= 7;
    }
    out.extend_from_slice(&buf[i..]);
}

/// Emits a format-0 file at division 480 with notes (velocity 64), tempo
/// changes, a 4/4 time signature and one CC64 down/up pair per pedal span
/// `(onset, duration)`.
pub fn write_midi(score: &Score, pedal: &[(Tick, Tick)]) -> Vec<u8> {
    // Order within a tick: releases, then tempo/meter, then presses.
    let mut events: Vec<(Tick, u8, [u8; 3], usize)> = Vec::new();
    events.push((0, 2, [0xFF, 0x58, 0], 0));
    let mut tempi = score.tempo_events.clone();
    tempi.sort_unstable();
    for t in &tempi {
        let b = t.micros_per_quarter.min(0xFF_FFFF).to_be_bytes();
        events.push((t.tick, 2, [b[1], b[2], b[3]], 1));
    }
    for n in &score.notes {
        events.push((n.onset, 4, [0x90, n.pitch & 0x7F, WRITE_VELOCITY], 2));
        events.push((n.end(), 0, [0x80, n.pitch & 0x7F, WRITE_VELOCITY], 2));
    }
    for &(onset, duration) in pedal {
        events.push((onset, 3, [0xB0, SUSTAIN_CONTROLLER, 127], 2));
        events.push((onset + duration, 1, [0xB0, SUSTAIN_CONTROLLER, 0], 2));
    }
    events.sort_by_key(|&(tick, order, bytes, _)| (tick, order, bytes));

    let mut track = Vec::new();
    let mut now = 0;
    for (tick, _, bytes, kind) in &events {
        write_varint(&mut track, tick - now);
        now = *tick;
        match kind {
            0 => track.extend_from_slice(&[0xFF, 0x58, 0x04, 4, 2, 24, 8]),
            1 => {
                track.extend_from_slice(&[0xFF, 0x51, 0x03]);
                track.extend_from_slice(bytes);
            }
            _ => track.extend_from_slice(bytes),
        }
    }
    write_varint(&mut track, 0);
    track.extend_from_slice(&[0xFF, 0x2F, 0x00]);

    let mut out = Vec::with_capacity(track.len() + 22);
    out.extend_from_slice(b"MThd");
    out.extend_from_slice(&6u32.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(RESOLUTION as u16).to_be_bytes());
    out.extend_from_slice(b"MTrk");
    out.extend_from_slice(&(track.len() as u32).to_be_bytes());
    out.extend_from_slice(&track);
    out
}

/// Tempo assumed by MIDI when a file carries no set-tempo event.
pub fn default_tempo() -> TempoEvent {
    TempoEvent {
        tick: 0,
        micros_per_quarter: DEFAULT_MICROS_PER_QUARTER,
    }
}
