//! Chord sequence estimation from audio features, MIDI files and guitar
//! tabs, alignment of symbolic sources to audio, fusion of the resulting
//! sequences, and evaluation against reference annotations.

pub mod annotations;
pub mod chord;
pub mod evaluation;
pub mod audio;
pub mod dtw;
pub mod midi;
pub mod synth;
pub mod cassette;
pub mod tab;
pub mod hmm;
pub mod jump;
pub mod fusion;
pub mod pipeline;
