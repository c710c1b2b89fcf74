//! Chord and tempo alphabets, half-bar template chord detection and tempo binning.

use std::fmt;
use std::str::FromStr;

use crate::midi_io::{Score, Tick};

/// Chord analysis window: half a 4/4 bar.
pub const CHORD_WINDOW_TICKS: Tick = 960;

const PITCH_NAMES: [&str; 12] = [
    "C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Quality {
    Major,
    Minor,
    Diminished,
    Augmented,
    Dominant7,
}

impl Quality {
    pub const ALL: [Quality; 5] = [
        Quality::Major,
        Quality::Minor,
        Quality::Diminished,
        Quality::Augmented,
        Quality::Dominant7,
    ];

    /// Chord tones as semitone offsets from the root.
    pub fn intervals(self) -> &'static [u8] {
        match self {
            Quality::Major => &[0, 4, 7],
            Quality::Minor => &[0, 3, 7],
            Quality::Diminished => &[0, 3, 6],
            Quality::Augmented => &[0, 4, 8],
            Quality::Dominant7 => &[0, 4, 7, 10],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Quality::Major => "maj",
            Quality::Minor => "min",
            Quality::Diminished => "dim",
            Quality::Augmented => "aug",
            Quality::Dominant7 => "dom7",
        }
    }

    fn index(self) -> usize {
        self as usize
    }
}

/// Root pitch class plus quality; 12 x 5 = 60 labels coded `root * 5 + quality`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ChordLabel {
    pub root: u8,
    pub quality: Quality,
}

impl ChordLabel {
    pub const COUNT: usize = 60;

    pub fn new(root: u8, quality: Quality) -> Self {
        assert!(root < 12, "root pitch class out of range: {root}");
        Self { root, quality }
    }

    pub fn code(self) -> usize {
        self.root as usize * Quality::ALL.len() + self.quality.index()
    }

    pub fn from_code(code: usize) -> Option<Self> {
        (code < Self::COUNT).then(|| Self {
            root: (code / Quality::ALL.len()) as u8,
            quality: Quality::ALL[code % Quality::ALL.len()],
        })
    }

    pub fn all() -> impl Iterator<Item = ChordLabel> {
        (0..Self::COUNT).filter_map(Self::from_code)
    }

    /// 12-bit pitch-class membership of the chord tones.
    pub fn template(self) -> [bool; 12] {
        let mut t = [false; 12];
        for &i in self.quality.intervals() {
            t[((self.root + i) % 12) as usize] = true;
        }
        t
    }

    pub fn transpose(self, semitones: i32) -> Self {
        Self::new(
            (self.root as i32 + semitones).rem_euclid(12) as u8,
            self.quality,
        )
    }
}

impl fmt::Display for ChordLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}:{}",
            PITCH_NAMES[self.root as usize],
            self.quality.name()
        )
    }
}

impl FromStr for ChordLabel {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (root, quality) = s
            .split_once(':')
            .ok_or_else(|| format!("chord {s:?} lacks ':'"))?;
        let root = PITCH_NAMES
            .iter()
            .position(|&n| n == root)
            .ok_or_else(|| format!("unknown chord root {root:?}"))?;
        let quality = Quality::ALL
            .into_iter()
            .find(|q| q.name() == quality)
            .ok_or_else(|| format!("unknown chord quality {quality:?}"))?;
        Ok(Self::new(root as u8, quality))
    }
}

/// One of 56 tempo bins: 32, 36, ..., 252 BPM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TempoClass(u8);

impl TempoClass {
    pub const COUNT: usize = 56;
    pub const MIN_BPM: u32 = 32;
    pub const MAX_BPM: u32 = 252;
    pub const STEP_BPM: u32 = 4;

    pub fn from_code(code: usize) -> Option<Self> {
        (code < Self::COUNT).then_some(Self(code as u8))
    }

    pub fn from_bpm_exact(bpm: u32) -> Option<Self> {
        if !(Self::MIN_BPM..=Self::MAX_BPM).contains(&bpm)
            || !(bpm - Self::MIN_BPM).is_multiple_of(Self::STEP_BPM)
        {
            return None;
        }
        Some(Self(((bpm - Self::MIN_BPM) / Self::STEP_BPM) as u8))
    }

    pub fn code(self) -> usize {
        self.0 as usize
    }

    pub fn bpm(self) -> u32 {
        Self::MIN_BPM + Self::STEP_BPM * u32::from(self.0)
    }

    pub fn all() -> impl Iterator<Item = TempoClass> {
        (0..Self::COUNT).map(|c| Self(c as u8))
    }
}

impl fmt::Display for TempoClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.bpm())
    }
}

/// Clamps to [32, 252] and rounds to the nearest multiple of 4, ties down.
/// Non-finite or non-positive input lands in the lowest bin.
pub fn quantize_tempo(bpm: f64) -> TempoClass {
    if !bpm.is_finite() || bpm <= 0.0 {
        return TempoClass(0);
    }
    let clamped = bpm.clamp(TempoClass::MIN_BPM as f64, TempoClass::MAX_BPM as f64);
    let steps = (clamped - TempoClass::MIN_BPM as f64) / TempoClass::STEP_BPM as f64;
    let below = steps.floor();
    let code = if steps - below > 0.5 {
        below + 1.0
    } else {
        below
    };
    TempoClass(code as u8)
}

/// Best label for a pitch-class weight vector: on-template weight minus
/// off-template weight, lowest code on ties.
pub fn best_chord(weights: &[f64; 12]) -> ChordLabel {
    let total: f64 = weights.iter().sum();
    let mut best = (f64::NEG_INFINITY, 0usize);
    for label in ChordLabel::all() {
        let t = label.template();
        let on: f64 = (0..12).filter(|&pc| t[pc]).map(|pc| weights[pc]).sum();
        let score = on - (total - on);
        if score > best.0 {
            best = (score, label.code());
        }
    }
    ChordLabel::from_code(best.1).expect("code in range")
}

/// Half-bar chord labels, emitted at window starts where notes sound and the
/// label differs from the previously emitted one.
pub fn detect_chords(score: &Score) -> Vec<(Tick, ChordLabel)> {
    let end = score.notes.iter().map(|n| n.end()).max().unwrap_or(0);
    let windows = end.div_ceil(CHORD_WINDOW_TICKS) as usize;
    let mut weights = vec![[0u64; 12]; windows];
    for n in &score.notes {
        let first = n.onset / CHORD_WINDOW_TICKS;
        let last = (n.end() - 1) / CHORD_WINDOW_TICKS;
        for w in first..=last {
            let lo = (w * CHORD_WINDOW_TICKS).max(n.onset);
            let hi = ((w + 1) * CHORD_WINDOW_TICKS).min(n.end());
            weights[w as usize][(n.pitch % 12) as usize] += u64::from(hi - lo);
        }
    }

    let mut out: Vec<(Tick, ChordLabel)> = Vec::new();
    for (w, counts) in weights.iter().enumerate() {
        if counts.iter().all(|&c| c == 0) {
            continue;
        }
        let label = best_chord(&counts.map(|c| c as f64));
        if out.last().is_some_and(|&(_, prev)| prev == label) {
            continue;
        }
        out.push((w as Tick * CHORD_WINDOW_TICKS, label));
    }
    out
}
