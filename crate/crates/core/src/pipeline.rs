//! End-to-end glue: MIDI bytes to super tokens and back.

use thiserror::Error;

use crate::harmony::{detect_chords, quantize_tempo, ChordLabel, TempoClass};
use crate::midi_io::{self, MidiError, Score, TempoEvent, Tick};
use crate::par::Exec;
use crate::pedal::{self, quantize_onset, PedalSpan};
use crate::tokenizer::{self, Decoded, SuperToken, TokenError};

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Midi(#[from] MidiError),
    #[error(transparent)]
    Token(#[from] TokenError),
}

/// A score reduced to exactly what the token vocabulary can express.
#[derive(Debug, Clone, PartialEq)]
pub struct Prepared {
    /// Quantized notes and binned tempo events.
    pub score: Score,
    pub pedal: Vec<PedalSpan>,
    pub chords: Vec<(Tick, ChordLabel)>,
    pub tempi: Vec<(Tick, TempoClass)>,
}

/// Binned tempo changes on the subbeat grid. A score without a tempo event
/// at tick 0 starts at the MIDI default of 120 BPM. Later events landing on
/// the same grid tick overwrite earlier ones; repeats of the running tempo
/// are dropped.
pub fn tempo_track(events: &[TempoEvent]) -> Vec<(Tick, TempoClass)> {
    let mut sorted = events.to_vec();
    sorted.sort_by_key(|e| e.tick);
    if sorted.first().is_none_or(|e| e.tick > 0) {
        sorted.insert(0, midi_io::default_tempo());
    }
    let mut out: Vec<(Tick, TempoClass)> = Vec::new();
    for e in &sorted {
        let tick = quantize_onset(e.tick);
        let class = quantize_tempo(e.bpm());
        if out.last().is_some_and(|&(t, _)| t == tick) {
            out.pop();
        }
        if out.last().is_some_and(|&(_, c)| c == class) {
            continue;
        }
        out.push((tick, class));
    }
    out
}

pub fn prepare(score: &Score) -> Prepared {
    let pedal = pedal::pedal_spans(&score.raw_pedal, score.end_tick());
    let notes = tokenizer::quantize_notes(&score.notes);
    let tempi = tempo_track(&score.tempo_events);
    let quantized = Score {
        notes,
        tempo_events: tempi
            .iter()
            .map(|&(tick, c)| TempoEvent::from_bpm(tick, f64::from(c.bpm())))
            .collect(),
        raw_pedal: Vec::new(),
    };
    let chords = detect_chords(&quantized);
    Prepared {
        score: quantized,
        pedal,
        chords,
        tempi,
    }
}

impl Prepared {
    pub fn encode(&self) -> Result<Vec<SuperToken>, TokenError> {
        tokenizer::encode(&self.score, &self.pedal, &self.chords, &self.tempi)
    }
}

/// MIDI file bytes to a super-token sequence.
pub fn encode_midi(bytes: &[u8]) -> Result<Vec<SuperToken>, PipelineError> {
    let score = midi_io::parse_midi(bytes)?;
    Ok(prepare(&score).encode()?)
}

/// Encodes many files, in parallel when `exec` allows; output order matches input.
pub fn encode_batch<B: AsRef<[u8]> + Sync>(
    files: &[B],
    exec: Exec,
) -> Vec<Result<Vec<SuperToken>, PipelineError>> {
    exec.map(files, |bytes| encode_midi(bytes.as_ref()))
}

/// Writes decoded tokens as MIDI, sustain pedal included.
pub fn decoded_to_midi(decoded: &Decoded) -> Vec<u8> {
    let spans: Vec<(Tick, Tick)> = decoded.pedal.iter().map(PedalSpan::as_interval).collect();
    midi_io::write_midi(&decoded.score, &spans)
}

/// Super tokens to MIDI file bytes.
pub fn decode_to_midi(tokens: &[SuperToken]) -> Result<Vec<u8>, TokenError> {
    Ok(decoded_to_midi(&tokenizer::decode(tokens)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::midi_io::{Note, PedalEvent};

    #[test]
    fn default_tempo_inserted_and_repeats_dropped() {
        let t = tempo_track(&[]);
        assert_eq!(t.len(), 1);
        assert_eq!((t[0].0, t[0].1.bpm()), (0, 120));
        let events = [
            TempoEvent::from_bpm(0, 100.0),
            TempoEvent::from_bpm(485, 101.0),
            TempoEvent::from_bpm(960, 90.0),
            TempoEvent::from_bpm(1000, 140.0),
        ];
        let t: Vec<_> = tempo_track(&events)
            .iter()
            .map(|&(tick, c)| (tick, c.bpm()))
            .collect();
        assert_eq!(t, vec![(0, 100), (960, 140)]);
    }

    #[test]
    fn prepare_then_encode_roundtrips_through_midi() {
        let score = Score {
            notes: vec![
                Note::new(3, 60, 470),
                Note::new(481, 64, 950),
                Note::new(960, 67, 1000),
            ],
            tempo_events: vec![TempoEvent::from_bpm(0, 96.0)],
            raw_pedal: vec![
                PedalEvent {
                    tick: 10,
                    value: 127,
                },
                PedalEvent {
                    tick: 930,
                    value: 0,
                },
                PedalEvent {
                    tick: 990,
                    value: 100,
                },
                PedalEvent {
                    tick: 1900,
                    value: 0,
                },
            ],
        };
        let prepared = prepare(&score);
        assert_eq!(prepared.pedal.len(), 2);
        assert_eq!(prepared.pedal[0].onset, 0);
        assert_eq!(prepared.pedal[1].onset, 960);
        let bytes = decode_to_midi(&prepared.encode().unwrap()).unwrap();
        let back = midi_io::parse_midi(&bytes).unwrap();
        assert_eq!(back.notes, prepared.score.notes);
        let again = prepare(&back);
        assert_eq!(
            again
                .pedal
                .iter()
                .map(|s| s.as_interval())
                .collect::<Vec<_>>(),
            prepared
                .pedal
                .iter()
                .map(|s| s.as_interval())
                .collect::<Vec<_>>()
        );
        assert_eq!(again.tempi, prepared.tempi);
        assert_eq!(again.chords, prepared.chords);
    }
}
