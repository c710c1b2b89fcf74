//! Compound-word codec between scores and super-token sequences.
//!
//! Every timestep is one [`SuperToken`] whose family decides which of its
//! fields are live. Metrical tokens carry the grid position and any tempo,
//! chord or sustain-pedal event at that position; note tokens carry pitch and
//! duration; a single EOS token terminates the sequence.
//!
//! Integer codes reserve 0 in every field but `family` for IGNORE, so a model
//! head for a field has `size + 1` outputs.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::harmony::{ChordLabel, TempoClass};
use crate::midi_io::{Note, Score, TempoEvent, Tick, BAR_TICKS};
use crate::pedal::{snap, PedalClass, PedalSpan, SUBBEAT_TICKS};

/// Note durations are counted in 32nd notes.
pub const DURATION_STEP_TICKS: Tick = 60;
pub const MAX_DURATION_STEPS: Tick = 64;
pub const SUBBEATS_PER_BAR: u8 = 16;
pub const IGNORE: usize = 0;
/// First line of the integer token form.
pub const INTEGER_HEADER: &str = "pedalcw-tokens v1";
const IGNORE_TEXT: &str = "_";

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TokenError {
    #[error("{what} at tick {tick} is off the quantization grid")]
    UnquantizedInput { what: &'static str, tick: Tick },
    #[error("{what} value {value} is out of range")]
    OutOfRange { what: &'static str, value: u32 },
    #[error("more than one {what} event at tick {tick}")]
    DuplicateEvent { what: &'static str, tick: Tick },
    #[error("malformed sequence at token {index}: {reason}")]
    MalformedSequence { index: usize, reason: String },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

fn malformed(index: usize, reason: impl Into<String>) -> TokenError {
    TokenError::MalformedSequence {
        index,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Field {
    Family,
    Position,
    Tempo,
    Chord,
    Pedal,
    Pitch,
    Duration,
}

impl Field {
    pub const ALL: [Field; 7] = [
        Field::Family,
        Field::Position,
        Field::Tempo,
        Field::Chord,
        Field::Pedal,
        Field::Pitch,
        Field::Duration,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Field::Family => "family",
            Field::Position => "position",
            Field::Tempo => "tempo",
            Field::Chord => "chord",
            Field::Pedal => "pedal",
            Field::Pitch => "pitch",
            Field::Duration => "duration",
        }
    }
}

/// Field alphabets and their integer codings.
#[derive(Debug, Clone, Copy, Default)]
pub struct Vocabulary;

impl Vocabulary {
    /// Number of real symbols in a field (IGNORE excluded).
    pub fn size(field: Field) -> usize {
        match field {
            Field::Family => 3,
            Field::Position => 1 + SUBBEATS_PER_BAR as usize,
            Field::Tempo => TempoClass::COUNT,
            Field::Chord => ChordLabel::COUNT,
            Field::Pedal => PedalClass::COUNT,
            Field::Pitch => 128,
            Field::Duration => MAX_DURATION_STEPS as usize,
        }
    }

    /// Number of integer codes, i.e. model head width.
    pub fn head_size(field: Field) -> usize {
        match field {
            Field::Family => Self::size(field),
            _ => Self::size(field) + 1,
        }
    }

    pub fn head_sizes() -> [usize; 7] {
        Field::ALL.map(Self::head_size)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Family {
    Metrical,
    Note,
    Eos,
}

impl Family {
    pub const ALL: [Family; 3] = [Family::Metrical, Family::Note, Family::Eos];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(code: usize) -> Option<Self> {
        Self::ALL.get(code).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Position {
    Bar,
    Subbeat(u8),
}

impl Position {
    pub fn code(self) -> usize {
        match self {
            Position::Bar => 1,
            Position::Subbeat(k) => 2 + k as usize,
        }
    }

    pub fn from_code(code: usize) -> Option<Self> {
        match code {
            1 => Some(Position::Bar),
            c if (2..2 + SUBBEATS_PER_BAR as usize).contains(&c) => {
                Some(Position::Subbeat((c - 2) as u8))
            }
            _ => None,
        }
    }
}

impl fmt::Display for Position {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Position::Bar => f.write_str("B"),
            Position::Subbeat(k) => write!(f, "S{k}"),
        }
    }
}

/// Note length in 32nd notes, 1..=64.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NoteDuration(u8);

impl NoteDuration {
    pub fn from_steps(steps: u32) -> Option<Self> {
        (1..=MAX_DURATION_STEPS)
            .contains(&steps)
            .then_some(Self(steps as u8))
    }

    pub fn from_ticks(ticks: Tick) -> Option<Self> {
        if !ticks.is_multiple_of(DURATION_STEP_TICKS) {
            return None;
        }
        Self::from_steps(ticks / DURATION_STEP_TICKS)
    }

    pub fn steps(self) -> u32 {
        u32::from(self.0)
    }

    pub fn ticks(self) -> Tick {
        self.steps() * DURATION_STEP_TICKS
    }
}

/// One compound-word timestep. `None` is the IGNORE symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SuperToken {
    pub family: Family,
    pub position: Option<Position>,
    pub tempo: Option<TempoClass>,
    pub chord: Option<ChordLabel>,
    pub pedal: Option<PedalClass>,
    pub pitch: Option<u8>,
    pub duration: Option<NoteDuration>,
}

impl SuperToken {
    pub fn metrical(position: Position) -> Self {
        Self {
            family: Family::Metrical,
            position: Some(position),
            tempo: None,
            chord: None,
            pedal: None,
            pitch: None,
            duration: None,
        }
    }

    pub fn bar() -> Self {
        Self::metrical(Position::Bar)
    }

    pub fn subbeat(k: u8) -> Self {
        Self::metrical(Position::Subbeat(k))
    }

    pub fn note(pitch: u8, duration: NoteDuration) -> Self {
        Self {
            family: Family::Note,
            position: None,
            tempo: None,
            chord: None,
            pedal: None,
            pitch: Some(pitch),
            duration: Some(duration),
        }
    }

    pub fn eos() -> Self {
        Self {
            family: Family::Eos,
            position: None,
            tempo: None,
            chord: None,
            pedal: None,
            pitch: None,
            duration: None,
        }
    }

    pub fn with_tempo(mut self, tempo: TempoClass) -> Self {
        self.tempo = Some(tempo);
        self
    }

    pub fn with_chord(mut self, chord: ChordLabel) -> Self {
        self.chord = Some(chord);
        self
    }

    pub fn with_pedal(mut self, pedal: PedalClass) -> Self {
        self.pedal = Some(pedal);
        self
    }

    /// Checks which fields may be live for this token's family.
    pub fn validate(&self) -> Result<(), String> {
        let context = self.tempo.is_some() || self.chord.is_some() || self.pedal.is_some();
        let note = self.pitch.is_some() || self.duration.is_some();
        match self.family {
            Family::Metrical if self.position.is_none() => {
                Err("metrical token without a position".into())
            }
            Family::Metrical if note => Err("metrical token carries note fields".into()),
            Family::Note if self.pitch.is_none() || self.duration.is_none() => {
                Err("note token needs both pitch and duration".into())
            }
            Family::Note if self.position.is_some() || context => {
                Err("note token carries metrical fields".into())
            }
            Family::Eos if self.position.is_some() || context || note => {
                Err("EOS token carries fields".into())
            }
            _ => Ok(()),
        }
    }

    pub fn codes(&self) -> [usize; 7] {
        [
            self.family.code(),
            self.position.map_or(IGNORE, Position::code),
            self.tempo.map_or(IGNORE, |t| t.code() + 1),
            self.chord.map_or(IGNORE, |c| c.code() + 1),
            self.pedal.map_or(IGNORE, |p| p.index() + 1),
            self.pitch.map_or(IGNORE, |p| p as usize + 1),
            self.duration.map_or(IGNORE, |d| d.steps() as usize),
        ]
    }

    /// Rebuilds a token from integer codes; does not check family validity.
    pub fn from_codes(codes: [usize; 7]) -> Result<Self, String> {
        fn opt<T>(
            code: usize,
            field: Field,
            f: impl FnOnce(usize) -> Option<T>,
        ) -> Result<Option<T>, String> {
            if code == IGNORE {
                return Ok(None);
            }
            f(code)
                .map(Some)
                .ok_or_else(|| format!("{} code {code} out of range", field.name()))
        }
        Ok(Self {
            family: Family::from_code(codes[0])
                .ok_or_else(|| format!("family code {} out of range", codes[0]))?,
            position: opt(codes[1], Field::Position, Position::from_code)?,
            tempo: opt(codes[2], Field::Tempo, |c| TempoClass::from_code(c - 1))?,
            chord: opt(codes[3], Field::Chord, |c| ChordLabel::from_code(c - 1))?,
            pedal: opt(codes[4], Field::Pedal, |c| PedalClass::from_index(c - 1))?,
            pitch: opt(codes[5], Field::Pitch, |c| {
                (c <= 128).then(|| (c - 1) as u8)
            })?,
            duration: opt(codes[6], Field::Duration, |c| {
                NoteDuration::from_steps(c as u32)
            })?,
        })
    }
}

/// Snaps notes onto the token grid: onsets to 120 ticks, durations to
/// 32nd notes within 60..=3840, ties rounded down. Same-pitch overlaps are
/// then cut at the later onset and duplicate (onset, pitch) pairs keep the
/// longest note, so the result is representable as plain MIDI note pairs.
pub fn quantize_notes(notes: &[Note]) -> Vec<Note> {
    let mut out: Vec<Note> = notes
        .iter()
        .map(|n| {
            let onset = snap(n.onset, SUBBEAT_TICKS);
            let duration = snap(n.duration, DURATION_STEP_TICKS).clamp(
                DURATION_STEP_TICKS,
                MAX_DURATION_STEPS * DURATION_STEP_TICKS,
            );
            Note::new(onset, n.pitch, duration)
        })
        .collect();
    // Longest first within an (onset, pitch) pair.
    out.sort_by_key(|n| (n.pitch, n.onset, std::cmp::Reverse(n.duration)));
    out.dedup_by_key(|n| (n.pitch, n.onset));
    for i in 1..out.len() {
        let next = out[i];
        let prev = &mut out[i - 1];
        if prev.pitch == next.pitch && prev.end() > next.onset {
            prev.duration = next.onset - prev.onset;
        }
    }
    out.sort_unstable();
    out
}

#[derive(Default)]
struct Slot {
    tempo: Option<TempoClass>,
    chord: Option<ChordLabel>,
    pedal: Option<PedalClass>,
    notes: Vec<(u8, NoteDuration)>,
}

fn on_grid(what: &'static str, tick: Tick) -> Result<Tick, TokenError> {
    if !tick.is_multiple_of(SUBBEAT_TICKS) {
        return Err(TokenError::UnquantizedInput { what, tick });
    }
    Ok(tick)
}

fn set_once<T>(
    slot: &mut Option<T>,
    value: T,
    what: &'static str,
    tick: Tick,
) -> Result<(), TokenError> {
    if slot.replace(value).is_some() {
        return Err(TokenError::DuplicateEvent { what, tick });
    }
    Ok(())
}

/// Encodes quantized material into a super-token sequence.
///
/// Layout: per bar a `Bar` token, then per occupied subbeat a metrical token
/// holding that tick's tempo/chord/pedal followed by its notes in ascending
/// pitch; one EOS at the end. Subbeat 0 of the first bar is always present.
pub fn encode(
    score: &Score,
    pedal: &[PedalSpan],
    chords: &[(Tick, ChordLabel)],
    tempi: &[(Tick, TempoClass)],
) -> Result<Vec<SuperToken>, TokenError> {
    let mut slots: BTreeMap<Tick, Slot> = BTreeMap::new();
    slots.insert(0, Slot::default());
    for n in &score.notes {
        let tick = on_grid("note onset", n.onset)?;
        if n.duration % DURATION_STEP_TICKS != 0 || n.duration == 0 {
            return Err(TokenError::UnquantizedInput {
                what: "note duration",
                tick: n.onset,
            });
        }
        let duration = NoteDuration::from_ticks(n.duration).ok_or(TokenError::OutOfRange {
            what: "note duration",
            value: n.duration,
        })?;
        if n.pitch > 127 {
            return Err(TokenError::OutOfRange {
                what: "pitch",
                value: u32::from(n.pitch),
            });
        }
        slots
            .entry(tick)
            .or_default()
            .notes
            .push((n.pitch, duration));
    }
    for span in pedal {
        let tick = on_grid("pedal onset", span.onset)?;
        set_once(
            &mut slots.entry(tick).or_default().pedal,
            span.class,
            "pedal",
            tick,
        )?;
    }
    for &(tick, chord) in chords {
        let tick = on_grid("chord", tick)?;
        set_once(
            &mut slots.entry(tick).or_default().chord,
            chord,
            "chord",
            tick,
        )?;
    }
    for &(tick, tempo) in tempi {
        let tick = on_grid("tempo", tick)?;
        set_once(
            &mut slots.entry(tick).or_default().tempo,
            tempo,
            "tempo",
            tick,
        )?;
    }

    let last_bar = slots.keys().next_back().copied().unwrap_or(0) / BAR_TICKS;
    let mut tokens = Vec::with_capacity(slots.len() * 2 + last_bar as usize + 2);
    let mut slots = slots.into_iter().peekable();
    for bar in 0..=last_bar {
        tokens.push(SuperToken::bar());
        let bar_end = (bar + 1) * BAR_TICKS;
        while let Some((tick, mut slot)) = slots.next_if(|(t, _)| *t < bar_end) {
            let k = ((tick - bar * BAR_TICKS) / SUBBEAT_TICKS) as u8;
            tokens.push(SuperToken {
                tempo: slot.tempo,
                chord: slot.chord,
                pedal: slot.pedal,
                ..SuperToken::subbeat(k)
            });
            slot.notes.sort_by_key(|&(p, _)| p);
            tokens.extend(slot.notes.iter().map(|&(p, d)| SuperToken::note(p, d)));
        }
    }
    tokens.push(SuperToken::eos());
    Ok(tokens)
}

/// Everything recoverable from a token sequence.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Decoded {
    pub score: Score,
    pub pedal: Vec<PedalSpan>,
    pub chords: Vec<(Tick, ChordLabel)>,
    pub tempi: Vec<(Tick, TempoClass)>,
    /// Set when the sequence ended without an EOS token.
    pub truncated: bool,
}

/// Replays a token sequence on a running bar/subbeat clock.
pub fn decode(tokens: &[SuperToken]) -> Result<Decoded, TokenError> {
    let mut out = Decoded::default();
    match tokens.first() {
        Some(t) if t.family == Family::Metrical && t.position == Some(Position::Bar) => {}
        Some(_) if tokens[0].family == Family::Note => {
            return Err(malformed(0, "note before any metrical token"))
        }
        _ => return Err(malformed(0, "sequence must start with a bar token")),
    }

    let mut bar: Option<Tick> = None;
    let mut subbeat: Option<u8> = None;
    let mut tick: Tick = 0;
    let mut ended = false;
    for (i, token) in tokens.iter().enumerate() {
        if ended {
            return Err(malformed(i, "tokens after EOS"));
        }
        token.validate().map_err(|e| malformed(i, e))?;
        match token.family {
            Family::Eos => ended = true,
            Family::Note => {
                let (Some(pitch), Some(duration)) = (token.pitch, token.duration) else {
                    unreachable!("validated note token");
                };
                out.score
                    .notes
                    .push(Note::new(tick, pitch, duration.ticks()));
            }
            Family::Metrical => {
                match token.position.expect("validated metrical token") {
                    Position::Bar => {
                        let b = bar.map_or(0, |b| b + 1);
                        bar = Some(b);
                        subbeat = None;
                        tick = b
                            .checked_mul(BAR_TICKS)
                            .ok_or_else(|| malformed(i, "too many bars"))?;
                    }
                    Position::Subbeat(k) => {
                        if subbeat.is_some_and(|s| k <= s) {
                            return Err(malformed(
                                i,
                                format!("subbeat {k} does not advance the clock"),
                            ));
                        }
                        subbeat = Some(k);
                        tick = bar.expect("first token is a bar") * BAR_TICKS
                            + Tick::from(k) * SUBBEAT_TICKS;
                    }
                }
                if let Some(t) = token.tempo {
                    out.tempi.push((tick, t));
                    out.score
                        .tempo_events
                        .push(TempoEvent::from_bpm(tick, f64::from(t.bpm())));
                }
                if let Some(c) = token.chord {
                    out.chords.push((tick, c));
                }
                if let Some(p) = token.pedal {
                    out.pedal.push(PedalSpan::quantized(tick, p));
                }
            }
        }
    }
    if !ended {
        log::warn!(
            "token sequence has no EOS; decoded {} tokens best-effort",
            tokens.len()
        );
        out.truncated = true;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TokenFormat {
    /// Tab-separated human-readable fields.
    #[default]
    Text,
    /// Header line plus comma-separated integer codes.
    Integer,
}

fn text_field(token: &SuperToken, field: Field) -> String {
    let ignore = || IGNORE_TEXT.to_string();
    match field {
        Field::Family => match token.family {
            Family::Metrical => "M",
            Family::Note => "N",
            Family::Eos => "E",
        }
        .to_string(),
        Field::Position => token.position.map_or_else(ignore, |p| p.to_string()),
        Field::Tempo => token.tempo.map_or_else(ignore, |t| t.to_string()),
        Field::Chord => token.chord.map_or_else(ignore, |c| c.to_string()),
        Field::Pedal => token.pedal.map_or_else(ignore, |p| p.to_string()),
        Field::Pitch => token.pitch.map_or_else(ignore, |p| p.to_string()),
        Field::Duration => token
            .duration
            .map_or_else(ignore, |d| d.ticks().to_string()),
    }
}

/// One token per line, LF-terminated.
pub fn serialize(tokens: &[SuperToken], format: TokenFormat) -> String {
    let mut out = String::new();
    match format {
        TokenFormat::Text => {
            for t in tokens {
                let fields: Vec<String> = Field::ALL.iter().map(|&f| text_field(t, f)).collect();
                out.push_str(&fields.join("\t"));
                out.push('\n');
            }
        }
        TokenFormat::Integer => {
            out.push_str(INTEGER_HEADER);
            out.push('\n');
            for t in tokens {
                let codes: Vec<String> = t.codes().iter().map(usize::to_string).collect();
                out.push_str(&codes.join(","));
                out.push('\n');
            }
        }
    }
    out
}

fn parse_text_line(line: &str) -> Result<SuperToken, String> {
    let fields: Vec<&str> = line.split('\t').collect();
    if fields.len() != 7 {
        return Err(format!(
            "expected 7 tab-separated fields, found {}",
            fields.len()
        ));
    }
    fn opt<T>(s: &str, f: impl FnOnce(&str) -> Option<T>, what: &str) -> Result<Option<T>, String> {
        if s == IGNORE_TEXT {
            return Ok(None);
        }
        f(s).map(Some)
            .ok_or_else(|| format!("invalid {what} {s:?}"))
    }
    let family = match fields[0] {
        "M" => Family::Metrical,
        "N" => Family::Note,
        "E" => Family::Eos,
        other => return Err(format!("invalid family {other:?}")),
    };
    let token = SuperToken {
        family,
        position: opt(
            fields[1],
            |s| match s {
                "B" => Some(Position::Bar),
                _ => s
                    .strip_prefix('S')
                    .and_then(|k| k.parse::<u8>().ok())
                    .filter(|&k| k < SUBBEATS_PER_BAR)
                    .map(Position::Subbeat),
            },
            "position",
        )?,
        tempo: opt(
            fields[2],
            |s| s.parse().ok().and_then(TempoClass::from_bpm_exact),
            "tempo",
        )?,
        chord: opt(fields[3], |s| s.parse().ok(), "chord")?,
        pedal: opt(
            fields[4],
            |s| s.parse().ok().and_then(|t| PedalClass::from_ticks(t).ok()),
            "pedal",
        )?,
        pitch: opt(
            fields[5],
            |s| s.parse::<u8>().ok().filter(|&p| p < 128),
            "pitch",
        )?,
        duration: opt(
            fields[6],
            |s| s.parse().ok().and_then(NoteDuration::from_ticks),
            "duration",
        )?,
    };
    token.validate()?;
    Ok(token)
}

fn parse_integer_line(line: &str) -> Result<SuperToken, String> {
    let parts: Vec<&str> = line.split(',').collect();
    if parts.len() != 7 {
        return Err(format!(
            "expected 7 comma-separated codes, found {}",
            parts.len()
        ));
    }
    let mut codes = [0usize; 7];
    for (c, p) in codes.iter_mut().zip(&parts) {
        *c = p
            .trim()
            .parse()
            .map_err(|_| format!("invalid code {p:?}"))?;
    }
    let token = SuperToken::from_codes(codes)?;
    token.validate()?;
    Ok(token)
}

/// Parses either token form; the integer form is recognised by its header.
/// Blank lines are skipped; errors carry 1-based line numbers.
pub fn parse_tokens(text: &str) -> Result<Vec<SuperToken>, TokenError> {
    let mut lines = text.lines().enumerate().peekable();
    let integer = lines
        .peek()
        .is_some_and(|(_, l)| l.trim_end() == INTEGER_HEADER);
    if integer {
        lines.next();
    }
    let mut tokens = Vec::new();
    for (i, line) in lines {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let parsed = if integer {
            parse_integer_line(line)
        } else {
            parse_text_line(line)
        };
        tokens.push(parsed.map_err(|reason| TokenError::Parse {
            line: i + 1,
            reason,
        })?);
    }
    Ok(tokens)
}
