//! Sustain-pedal spans: CC64 thresholding and quantization to the ten
//! duration classes on the 120-tick subbeat grid.

use std::fmt;

use thiserror::Error;

use crate::midi_io::{PedalEvent, Tick};

/// Controller values at or above this count as "pedal down".
pub const PEDAL_DOWN_THRESHOLD: u8 = 64;
/// Subbeat grid step: a 1920-tick bar split into 16 bins.
pub const SUBBEAT_TICKS: Tick = 120;

/// The ten pedal durations, from an eighth note up to two bars' worth of beats.
pub const PEDAL_CLASSES: [Tick; 10] = [240, 480, 720, 960, 1440, 1920, 2400, 2880, 3360, 3840];

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PedalError {
    #[error("pedal duration must be positive")]
    NonPositiveDuration,
    #[error("{0} ticks is not a pedal duration class")]
    UnknownClass(Tick),
}

/// Index into [`PEDAL_CLASSES`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PedalClass(u8);

impl PedalClass {
    pub const COUNT: usize = PEDAL_CLASSES.len();

    pub fn from_index(index: usize) -> Option<Self> {
        (index < Self::COUNT).then_some(Self(index as u8))
    }

    pub fn from_ticks(ticks: Tick) -> Result<Self, PedalError> {
        PEDAL_CLASSES
            .iter()
            .position(|&c| c == ticks)
            .map(|i| Self(i as u8))
            .ok_or(PedalError::UnknownClass(ticks))
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }

    pub fn ticks(self) -> Tick {
        PEDAL_CLASSES[self.index()]
    }

    pub fn all() -> impl Iterator<Item = PedalClass> {
        (0..Self::COUNT).map(|i| Self(i as u8))
    }
}

impl fmt::Display for PedalClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.ticks())
    }
}

/// An unquantized pedal-down interval.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct RawSpan {
    pub onset: Tick,
    pub duration: Tick,
}

/// One quantized sustain-pedal press.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PedalSpan {
    /// Grid-aligned onset (multiple of [`SUBBEAT_TICKS`]).
    pub onset: Tick,
    pub class: PedalClass,
    /// Onset before grid quantization.
    pub raw_onset: Tick,
    /// Duration before class quantization.
    pub raw_duration: Tick,
}

impl PedalSpan {
    /// A span that is already quantized (raw values equal the quantized ones).
    pub fn quantized(onset: Tick, class: PedalClass) -> Self {
        Self {
            onset,
            class,
            raw_onset: onset,
            raw_duration: class.ticks(),
        }
    }

    pub fn duration(&self) -> Tick {
        self.class.ticks()
    }

    /// `(onset, duration)` in the form the MIDI writer takes.
    pub fn as_interval(&self) -> (Tick, Tick) {
        (self.onset, self.duration())
    }
}

/// Splits a CC64 stream into maximal pedal-down intervals. A pedal still
/// down when the stream ends is closed at `end_tick` (the score's last tick).
pub fn extract_spans(raw_pedal: &[PedalEvent], end_tick: Tick) -> Vec<RawSpan> {
    let mut spans = Vec::new();
    let mut down_since: Option<Tick> = None;
    for e in raw_pedal {
        let down = e.value >= PEDAL_DOWN_THRESHOLD;
        match (down_since, down) {
            (None, true) => down_since = Some(e.tick),
            (Some(onset), false) => {
                if e.tick > onset {
                    spans.push(RawSpan {
                        onset,
                        duration: e.tick - onset,
                    });
                }
                down_since = None;
            }
            _ => {}
        }
    }
    if let Some(onset) = down_since {
        let end = end_tick.max(raw_pedal.last().map_or(0, |e| e.tick));
        if end > onset {
            spans.push(RawSpan {
                onset,
                duration: end - onset,
            });
        }
    }
    spans
}

/// Nearest duration class; ties go to the shorter class, long presses
/// saturate at 3840.
pub fn quantize_duration(raw: Tick) -> Result<PedalClass, PedalError> {
    if raw == 0 {
        return Err(PedalError::NonPositiveDuration);
    }
    let idx = PEDAL_CLASSES.partition_point(|&c| c < raw);
    if idx == 0 {
        return Ok(PedalClass(0));
    }
    if idx == PEDAL_CLASSES.len() {
        return Ok(PedalClass((idx - 1) as u8));
    }
    let (below, above) = (PEDAL_CLASSES[idx - 1], PEDAL_CLASSES[idx]);
    let pick = if raw - below <= above - raw {
        idx - 1
    } else {
        idx
    };
    Ok(PedalClass(pick as u8))
}

/// Nearest subbeat grid point, ties rounded down.
pub fn quantize_onset(tick: Tick) -> Tick {
    snap(tick, SUBBEAT_TICKS)
}

/// Nearest multiple of `step`, ties rounded down.
pub(crate) fn snap(tick: Tick, step: Tick) -> Tick {
    let below = tick / step * step;
    if tick - below > step / 2 {
        below + step
    } else {
        below
    }
}

/// Keeps one span per onset (the longest class). Input must be sorted by onset.
pub fn dedupe(spans: &[PedalSpan]) -> Vec<PedalSpan> {
    let mut out: Vec<PedalSpan> = Vec::with_capacity(spans.len());
    for span in spans {
        match out.last_mut() {
            Some(last) if last.onset == span.onset => {
                if span.class > last.class {
                    *last = *span;
                }
            }
            _ => out.push(*span),
        }
    }
    out
}

/// Quantizes raw spans onto the grid and classes, sorted and deduplicated.
pub fn quantize_spans(raw: &[RawSpan]) -> Vec<PedalSpan> {
    let mut spans: Vec<PedalSpan> = raw
        .iter()
        .filter_map(|s| {
            let class = quantize_duration(s.duration).ok()?;
            Some(PedalSpan {
                onset: quantize_onset(s.onset),
                class,
                raw_onset: s.onset,
                raw_duration: s.duration,
            })
        })
        .collect();
    spans.sort_by_key(|s| s.onset);
    dedupe(&spans)
}

/// Full pedal path: threshold, split into spans, quantize, dedupe.
pub fn pedal_spans(raw_pedal: &[PedalEvent], end_tick: Tick) -> Vec<PedalSpan> {
    quantize_spans(&extract_spans(raw_pedal, end_tick))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ev(list: &[(Tick, u8)]) -> Vec<PedalEvent> {
        list.iter()
            .map(|&(tick, value)| PedalEvent { tick, value })
            .collect()
    }

    fn raw(onset: Tick, duration: Tick) -> RawSpan {
        RawSpan { onset, duration }
    }

    /// Linear scan over the class list; first minimum wins, i.e. ties go low.
    fn brute_force_class(raw: Tick) -> Tick {
        let mut best = PEDAL_CLASSES[0];
        for &c in &PEDAL_CLASSES {
            if raw.abs_diff(c) < raw.abs_diff(best) {
                best = c;
            }
        }
        best
    }

    #[test]
    fn extract_examples() {
        assert_eq!(
            extract_spans(&ev(&[(0, 127), (480, 0)]), 480),
            vec![raw(0, 480)]
        );
        assert_eq!(
            extract_spans(&ev(&[(0, 100), (200, 80), (480, 10)]), 480),
            vec![raw(0, 480)]
        );
        assert_eq!(extract_spans(&ev(&[(0, 30)]), 960), vec![]);
        assert_eq!(extract_spans(&[], 960), vec![]);
    }

    #[test]
    fn extract_closes_open_span_at_score_end() {
        assert_eq!(
            extract_spans(&ev(&[(240, 127)]), 1920),
            vec![raw(240, 1680)]
        );
        // zero-length spans vanish
        assert_eq!(extract_spans(&ev(&[(240, 127), (240, 0)]), 1920), vec![]);
        assert_eq!(extract_spans(&ev(&[(1920, 127)]), 1920), vec![]);
    }

    #[test]
    fn threshold_boundary() {
        assert_eq!(
            extract_spans(&ev(&[(0, 64), (100, 63)]), 100),
            vec![raw(0, 100)]
        );
        assert_eq!(extract_spans(&ev(&[(0, 63), (100, 0)]), 100), vec![]);
    }

    #[test]
    fn quantize_duration_examples() {
        assert_eq!(quantize_duration(240).unwrap().ticks(), 240);
        assert_eq!(quantize_duration(360).unwrap().ticks(), 240);
        assert_eq!(quantize_duration(361).unwrap().ticks(), 480);
        assert_eq!(quantize_duration(1).unwrap().ticks(), 240);
        assert_eq!(quantize_duration(1200).unwrap().ticks(), 960);
        assert_eq!(quantize_duration(100_000).unwrap().ticks(), 3840);
        assert_eq!(quantize_duration(0), Err(PedalError::NonPositiveDuration));
    }

    #[test]
    fn quantize_duration_matches_scan_exhaustively() {
        for raw in 1..6000 {
            assert_eq!(
                quantize_duration(raw).unwrap().ticks(),
                brute_force_class(raw),
                "raw {raw}"
            );
        }
    }

    #[test]
    fn quantize_duration_error_bound_and_idempotence() {
        for raw in 1..=10_000 {
            let c = quantize_duration(raw).unwrap().ticks();
            if raw <= 3840 + 240 {
                assert!(raw.abs_diff(c) <= 240, "raw {raw} -> {c}");
            } else {
                assert_eq!(c, 3840);
            }
        }
        for c in PEDAL_CLASSES {
            assert_eq!(quantize_duration(c).unwrap().ticks(), c);
        }
    }

    #[test]
    fn quantize_onset_examples() {
        assert_eq!(quantize_onset(0), 0);
        assert_eq!(quantize_onset(179), 120);
        assert_eq!(quantize_onset(180), 120);
        assert_eq!(quantize_onset(181), 240);
        assert_eq!(quantize_onset(60), 0);
    }

    #[test]
    fn dedupe_examples() {
        let c = |t| PedalClass::from_ticks(t).unwrap();
        assert_eq!(dedupe(&[]), vec![]);
        let spans = [
            PedalSpan::quantized(0, c(240)),
            PedalSpan::quantized(0, c(960)),
        ];
        assert_eq!(dedupe(&spans), vec![PedalSpan::quantized(0, c(960))]);
    }

    #[test]
    fn class_lookup() {
        assert_eq!(PedalClass::all().count(), 10);
        assert_eq!(PedalClass::from_ticks(1440).unwrap().index(), 4);
        assert_eq!(
            PedalClass::from_ticks(1000),
            Err(PedalError::UnknownClass(1000))
        );
        assert!(PedalClass::from_index(10).is_none());
    }

    fn pedal_stream() -> impl Strategy<Value = Vec<PedalEvent>> {
        prop::collection::vec((0u32..400, 0u8..128), 0..60).prop_map(|steps| {
            let mut tick = 0;
            steps
                .into_iter()
                .map(|(delta, value)| {
                    tick += delta;
                    PedalEvent { tick, value }
                })
                .collect()
        })
    }

    proptest! {
        #[test]
        fn spans_are_ordered_and_disjoint(stream in pedal_stream(), tail in 0u32..2000) {
            let end = stream.last().map_or(0, |e| e.tick) + tail;
            let spans = extract_spans(&stream, end);
            for s in &spans {
                prop_assert!(s.duration > 0);
            }
            for w in spans.windows(2) {
                prop_assert!(w[0].onset + w[0].duration <= w[1].onset);
            }
        }

        #[test]
        fn quantized_spans_satisfy_invariants(stream in pedal_stream(), tail in 0u32..2000) {
            let end = stream.last().map_or(0, |e| e.tick) + tail;
            let spans = pedal_spans(&stream, end);
            for s in &spans {
                prop_assert_eq!(s.onset % SUBBEAT_TICKS, 0);
                prop_assert!(PEDAL_CLASSES.contains(&s.duration()));
            }
            for w in spans.windows(2) {
                prop_assert!(w[0].onset < w[1].onset);
            }
            prop_assert_eq!(spans.clone(), pedal_spans(&stream, end));
        }

        #[test]
        fn dedupe_yields_strictly_increasing_onsets(
            mut list in prop::collection::vec((0u32..40, 0usize..10), 0..50)
        ) {
            list.sort_by_key(|&(o, _)| o);
            let spans: Vec<_> = list
                .iter()
                .map(|&(o, c)| PedalSpan::quantized(o * SUBBEAT_TICKS, PedalClass::from_index(c).unwrap()))
                .collect();
            let out = dedupe(&spans);
            for w in out.windows(2) {
                prop_assert!(w[0].onset < w[1].onset);
            }
            for s in &out {
                let best = spans.iter().filter(|x| x.onset == s.onset).map(|x| x.class).max().unwrap();
                prop_assert_eq!(s.class, best);
            }
        }
    }
}
