//! Pedal-aware compound-word symbolic music toolkit.
//!
//! The pipeline reads a Standard MIDI File ([`midi_io`]), turns the CC64
//! stream into quantized sustain-pedal spans ([`pedal`]), labels half-bar
//! chords and bins tempo ([`harmony`]), and encodes everything as
//! compound-word super tokens ([`tokenizer`]) in which pedal presses live in
//! the metrical family next to chord and tempo. [`model`] is a small
//! Transformer decoder over those tokens and [`stats`] measures how pedal
//! presses line up with beats and chord changes.

pub mod harmony;
pub mod midi_io;
pub mod model;
pub mod par;
pub mod pedal;
pub mod pipeline;
pub mod stats;
pub mod tokenizer;

pub use harmony::{ChordLabel, Quality, TempoClass};
pub use midi_io::{Note, Score, Tick};
pub use par::Exec;
pub use pedal::{PedalClass, PedalSpan};
pub use tokenizer::{Family, Position, SuperToken, TokenFormat, Vocabulary};
