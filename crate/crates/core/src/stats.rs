//! How sustain-pedal presses line up with beats and chord changes.

use std::fmt::Write as _;

use serde::Serialize;
use thiserror::Error;

use crate::harmony::ChordLabel;
use crate::midi_io::{Score, Tick, RESOLUTION};
use crate::par::Exec;
use crate::pedal::{PedalClass, PedalSpan};
use crate::pipeline;

/// A press counts as on-beat within this distance of a 480-tick multiple.
pub const BEAT_TOLERANCE: Tick = 60;
/// A press counts as on a chord change within this distance of one.
pub const CHORD_TOLERANCE: Tick = 120;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum StatsError {
    #[error("corpus is empty")]
    EmptyCorpus,
}

/// Pedal presses and chord changes of one song.
#[derive(Debug, Clone, PartialEq)]
pub struct SongInput {
    pub name: String,
    pub pedal: Vec<PedalSpan>,
    pub chords: Vec<(Tick, ChordLabel)>,
}

impl SongInput {
    pub fn from_score(name: impl Into<String>, score: &Score) -> Self {
        let prepared = pipeline::prepare(score);
        Self {
            name: name.into(),
            pedal: prepared.pedal,
            chords: prepared.chords,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentCounts {
    pub pedal_count: usize,
    pub beat_aligned: usize,
    pub chord_aligned: usize,
    /// `None` when there are no pedal presses.
    pub beat_fraction: Option<f64>,
    pub chord_fraction: Option<f64>,
    /// Presses per duration class, 240 through 3840 ticks.
    pub duration_histogram: [usize; PedalClass::COUNT],
}

impl AlignmentCounts {
    fn from_parts(
        pedal_count: usize,
        beat_aligned: usize,
        chord_aligned: usize,
        hist: [usize; 10],
    ) -> Self {
        let frac = |n: usize| (pedal_count > 0).then(|| n as f64 / pedal_count as f64);
        Self {
            pedal_count,
            beat_aligned,
            chord_aligned,
            beat_fraction: frac(beat_aligned),
            chord_fraction: frac(chord_aligned),
            duration_histogram: hist,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SongReport {
    pub name: String,
    #[serde(flatten)]
    pub counts: AlignmentCounts,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlignmentReport {
    pub aggregate: AlignmentCounts,
    /// Sorted by name.
    pub songs: Vec<SongReport>,
}

fn is_on_beat(tick: Tick) -> bool {
    let offset = tick % RESOLUTION;
    offset.min(RESOLUTION - offset) <= BEAT_TOLERANCE
}

fn near_chord_change(tick: Tick, changes: &[Tick]) -> bool {
    // changes is sorted; only the neighbours of the insertion point matter
    let i = changes.partition_point(|&c| c < tick);
    let after = changes.get(i).map(|&c| c - tick);
    let before = i.checked_sub(1).map(|j| tick - changes[j]);
    after
        .into_iter()
        .chain(before)
        .any(|d| d <= CHORD_TOLERANCE)
}

pub fn analyze_song(song: &SongInput) -> SongReport {
    let mut changes: Vec<Tick> = song.chords.iter().map(|&(t, _)| t).collect();
    changes.sort_unstable();
    let mut hist = [0usize; PedalClass::COUNT];
    let (mut beat, mut chord) = (0, 0);
    for span in &song.pedal {
        beat += usize::from(is_on_beat(span.raw_onset));
        chord += usize::from(near_chord_change(span.raw_onset, &changes));
        hist[span.class.index()] += 1;
    }
    SongReport {
        name: song.name.clone(),
        counts: AlignmentCounts::from_parts(song.pedal.len(), beat, chord, hist),
    }
}

/// Per-song reports plus pooled totals over the whole corpus.
pub fn analyze(corpus: &[SongInput], exec: Exec) -> Result<AlignmentReport, StatsError> {
    if corpus.is_empty() {
        return Err(StatsError::EmptyCorpus);
    }
    let mut songs = exec.map(corpus, analyze_song);
    songs.sort_by(|a, b| {
        a.name.cmp(&b.name).then_with(|| {
            let key = |s: &SongReport| {
                (
                    s.counts.pedal_count,
                    s.counts.beat_aligned,
                    s.counts.chord_aligned,
                    s.counts.duration_histogram,
                )
            };
            key(a).cmp(&key(b))
        })
    });
    let mut hist = [0usize; PedalClass::COUNT];
    let (mut count, mut beat, mut chord) = (0, 0, 0);
    for s in &songs {
        count += s.counts.pedal_count;
        beat += s.counts.beat_aligned;
        chord += s.counts.chord_aligned;
        for (h, x) in hist.iter_mut().zip(&s.counts.duration_histogram) {
            *h += x;
        }
    }
    Ok(AlignmentReport {
        aggregate: AlignmentCounts::from_parts(count, beat, chord, hist),
        songs,
    })
}

impl AlignmentReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned plain-text table, one row per song and a total row.
    pub fn to_table(&self) -> String {
        let fmt_frac = |f: Option<f64>| f.map_or_else(|| "-".to_string(), |v| format!("{v:.3}"));
        let width = self
            .songs
            .iter()
            .map(|s| s.name.len())
            .max()
            .unwrap_or(0)
            .max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "{:<width$}  {:>6}  {:>6}  {:>6}  histogram (240..3840)",
            "song", "pedals", "beat", "chord"
        );
        let mut row = |name: &str, c: &AlignmentCounts| {
            let hist: Vec<String> = c.duration_histogram.iter().map(usize::to_string).collect();
            let _ = writeln!(
                out,
                "{:<width$}  {:>6}  {:>6}  {:>6}  {}",
                name,
                c.pedal_count,
                fmt_frac(c.beat_fraction),
                fmt_frac(c.chord_fraction),
                hist.join(" ")
            );
        };
        for s in &self.songs {
            row(&s.name, &s.counts);
        }
        row("TOTAL", &self.aggregate);
        out
    }
}
