#![allow(dead_code)]

use pedalcw::harmony::{ChordLabel, TempoClass};
use pedalcw::midi_io::{Note, PedalEvent, Score, TempoEvent, Tick, BAR_TICKS};
use pedalcw::pedal::{PedalClass, PedalSpan, SUBBEAT_TICKS};
use pedalcw::tokenizer::{DURATION_STEP_TICKS, MAX_DURATION_STEPS};
use rand::seq::IteratorRandom;
use rand::Rng;

/// Grid-aligned material the tokenizer accepts verbatim.
#[derive(Debug, Clone)]
pub struct Case {
    pub score: Score,
    pub pedal: Vec<PedalSpan>,
    pub chords: Vec<(Tick, ChordLabel)>,
    pub tempi: Vec<(Tick, TempoClass)>,
}

impl Case {
    pub fn pedal_intervals(&self) -> Vec<(Tick, Tick)> {
        self.pedal.iter().map(|s| (s.onset, s.duration())).collect()
    }

    /// CC64 stream `write_midi` produces for the pedal spans.
    pub fn pedal_events(&self) -> Vec<PedalEvent> {
        let mut ev: Vec<(Tick, u8, u8)> = Vec::new();
        for s in &self.pedal {
            ev.push((s.onset, 1, 127));
            ev.push((s.onset + s.duration(), 0, 0));
        }
        ev.sort();
        ev.into_iter()
            .map(|(tick, _, value)| PedalEvent { tick, value })
            .collect()
    }
}

fn distinct_grid_ticks<R: Rng>(rng: &mut R, slots: Tick, n: usize) -> Vec<Tick> {
    let mut t: Vec<Tick> = (0..slots).choose_multiple(rng, n.min(slots as usize));
    t.sort_unstable();
    t.into_iter().map(|s| s * SUBBEAT_TICKS).collect()
}

/// Random quantized score: at most 32 bars, 500 notes and 64 pedal spans.
/// Same-pitch notes never overlap and pedal spans never overlap, so the
/// material is also expressible as plain MIDI.
pub fn random_case<R: Rng>(rng: &mut R) -> Case {
    let bars: Tick = rng.random_range(1..=32);
    let slots = bars * BAR_TICKS / SUBBEAT_TICKS;

    let n_notes = rng.random_range(1..=500);
    let mut notes: Vec<Note> = (0..n_notes)
        .map(|_| {
            let onset = rng.random_range(0..slots) * SUBBEAT_TICKS;
            let room = (slots * SUBBEAT_TICKS - onset) / DURATION_STEP_TICKS;
            let steps = rng.random_range(1..=MAX_DURATION_STEPS.min(room));
            Note::new(
                onset,
                rng.random_range(0..=127),
                steps * DURATION_STEP_TICKS,
            )
        })
        .collect();
    notes.sort_by_key(|n| (n.pitch, n.onset));
    let mut kept: Vec<Note> = Vec::with_capacity(notes.len());
    for n in notes {
        if kept
            .last()
            .is_some_and(|p| p.pitch == n.pitch && p.end() > n.onset)
        {
            continue;
        }
        kept.push(n);
    }
    kept.sort_unstable();

    let n_pedal = rng.random_range(0..=64);
    let onsets = distinct_grid_ticks(rng, slots, n_pedal);
    let mut pedal = Vec::new();
    for (i, &onset) in onsets.iter().enumerate() {
        let room = onsets
            .get(i + 1)
            .map_or(slots * SUBBEAT_TICKS, |&next| next)
            - onset;
        let fitting: Vec<PedalClass> = PedalClass::all().filter(|c| c.ticks() <= room).collect();
        if let Some(&class) = fitting.get(rng.random_range(0..fitting.len().max(1))) {
            pedal.push(PedalSpan::quantized(onset, class));
        }
    }

    let n_chords = rng.random_range(0..=2 * bars as usize);
    let chords = distinct_grid_ticks(rng, slots, n_chords)
        .into_iter()
        .map(|t| {
            (
                t,
                ChordLabel::from_code(rng.random_range(0..ChordLabel::COUNT)).unwrap(),
            )
        })
        .collect();

    let n_tempi = rng.random_range(0..=8);
    let tempi: Vec<(Tick, TempoClass)> = distinct_grid_ticks(rng, slots, n_tempi)
        .into_iter()
        .map(|t| {
            (
                t,
                TempoClass::from_code(rng.random_range(0..TempoClass::COUNT)).unwrap(),
            )
        })
        .collect();

    let score = Score {
        notes: kept,
        tempo_events: tempi
            .iter()
            .map(|&(t, c)| TempoEvent::from_bpm(t, f64::from(c.bpm())))
            .collect(),
        raw_pedal: Vec::new(),
    };
    Case {
        score,
        pedal,
        chords,
        tempi,
    }
}

pub fn sorted<T: Ord + Clone>(v: &[T]) -> Vec<T> {
    let mut v = v.to_vec();
    v.sort();
    v
}
