//! Quantized multi-channel scores, keys and pitch arithmetic.
//!
//! Time is measured in steps (sixteenth notes). A 4/4 measure holds
//! [`STEPS_PER_MEASURE`] steps.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const STEPS_PER_MEASURE: u32 = 16;
pub const STEPS_PER_BEAT: u32 = 4;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ScoreError {
    #[error("pitch {0} is outside the MIDI range 0-127")]
    OutOfRange(i32),
    #[error("channel {0} has no notes")]
    EmptyChannel(ChannelId),
    #[error("invalid note: {0}")]
    InvalidNote(String),
    #[error("score length {0} is not a whole number of measures")]
    PartialMeasure(u32),
    #[error("invalid key `{0}`")]
    InvalidKey(String),
}

/// MIDI pitch number, 60 = middle C (C4).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub struct Pitch(u8);

impl Pitch {
    pub const MAX: u8 = 127;

    pub fn new(value: i32) -> Result<Self, ScoreError> {
        if (0..=Self::MAX as i32).contains(&value) {
            Ok(Pitch(value as u8))
        } else {
            Err(ScoreError::OutOfRange(value))
        }
    }

    pub const fn value(self) -> u8 {
        self.0
    }

    pub const fn pitch_class(self) -> u8 {
        self.0 % 12
    }

    pub fn shifted(self, semitones: i32) -> Result<Self, ScoreError> {
        Pitch::new(self.0 as i32 + semitones)
    }

    /// Scientific pitch notation with sharps, e.g. `C4`, `F#5`, `C-1`.
    pub fn name(self) -> String {
        const NAMES: [&str; 12] = [
            "C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B",
        ];
        let octave = self.0 as i32 / 12 - 1;
        format!("{}{}", NAMES[self.pitch_class() as usize], octave)
    }

    /// Parses scientific pitch notation (`C4`, `Eb3`, `F#5`, `B-1`).
    pub fn from_name(name: &str) -> Option<Self> {
        let mut chars = name.chars();
        let letter = chars.next()?.to_ascii_uppercase();
        let base = match letter {
            'C' => 0,
            'D' => 2,
            'E' => 4,
            'F' => 5,
            'G' => 7,
            'A' => 9,
            'B' => 11,
            _ => return None,
        };
        let rest = chars.as_str();
        let (accidental, octave) = if let Some(r) = rest.strip_prefix('#') {
            (1, r)
        } else if let Some(r) = rest.strip_prefix('b') {
            (-1, r)
        } else {
            (0, rest)
        };
        let octave: i32 = octave.parse().ok()?;
        Pitch::new((octave + 1) * 12 + base + accidental).ok()
    }
}

impl TryFrom<u8> for Pitch {
    type Error = ScoreError;

    fn try_from(value: u8) -> Result<Self, Self::Error> {
        Pitch::new(value as i32)
    }
}

impl From<Pitch> for u8 {
    fn from(p: Pitch) -> u8 {
        p.0
    }
}

impl fmt::Display for Pitch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Note {
    pub pitch: Pitch,
    /// Global step index of the attack.
    pub onset: u32,
    /// Length in steps, at least 1.
    pub duration: u32,
}

impl Note {
    pub fn new(pitch: Pitch, onset: u32, duration: u32) -> Result<Self, ScoreError> {
        if duration == 0 {
            return Err(ScoreError::InvalidNote(format!(
                "zero duration at step {onset}"
            )));
        }
        Ok(Note {
            pitch,
            onset,
            duration,
        })
    }

    pub const fn end(&self) -> u32 {
        self.onset + self.duration
    }

    pub const fn sounds_at(&self, step: u32) -> bool {
        self.onset <= step && step < self.end()
    }
}

/// The three modeled parts, in scan order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelId {
    Melody,
    Chords,
    Bass,
}

impl ChannelId {
    pub const ALL: [ChannelId; 3] = [ChannelId::Melody, ChannelId::Chords, ChannelId::Bass];

    pub const fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(index: usize) -> Option<Self> {
        Self::ALL.get(index).copied()
    }

    pub const fn name(self) -> &'static str {
        match self {
            ChannelId::Melody => "melody",
            ChannelId::Chords => "chords",
            ChannelId::Bass => "bass",
        }
    }
}

impl fmt::Display for ChannelId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A quantized three-channel score.
///
/// Notes are kept sorted by `(onset, pitch, duration)` so that structural
/// equality is independent of insertion order. The length is normally a whole
/// number of measures; short excerpts are allowed and can be checked with
/// [`Score::ensure_whole_measures`].
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Score {
    channels: [Vec<Note>; 3],
    length_steps: u32,
}

impl Score {
    pub fn empty(length_steps: u32) -> Self {
        Score {
            channels: Default::default(),
            length_steps,
        }
    }

    /// Builds a score, validating bounds and same-pitch overlap per channel.
    pub fn new(channels: [Vec<Note>; 3], length_steps: u32) -> Result<Self, ScoreError> {
        let mut score = Score {
            channels,
            length_steps,
        };
        for notes in &mut score.channels {
            notes.sort();
        }
        score.validate()?;
        Ok(score)
    }

    pub fn from_channel_lists(
        melody: Vec<Note>,
        chords: Vec<Note>,
        bass: Vec<Note>,
        length_steps: u32,
    ) -> Result<Self, ScoreError> {
        Score::new([melody, chords, bass], length_steps)
    }

    fn validate(&self) -> Result<(), ScoreError> {
        for (ci, notes) in self.channels.iter().enumerate() {
            for note in notes {
                if note.duration == 0 {
                    return Err(ScoreError::InvalidNote(format!(
                        "zero-length note at step {}",
                        note.onset
                    )));
                }
                if note.end() > self.length_steps {
                    return Err(ScoreError::InvalidNote(format!(
                        "{} note {} ends at step {} past score length {}",
                        ChannelId::ALL[ci],
                        note.pitch,
                        note.end(),
                        self.length_steps
                    )));
                }
            }
            // Sorted by onset, so only the latest-ending earlier note of each
            // pitch needs checking.
            let mut last_end = [0u32; 128];
            let mut seen = [false; 128];
            for note in notes {
                let p = note.pitch.value() as usize;
                if seen[p] && note.onset < last_end[p] {
                    return Err(ScoreError::InvalidNote(format!(
                        "overlapping {} notes in {} at step {}",
                        note.pitch,
                        ChannelId::ALL[ci],
                        note.onset
                    )));
                }
                seen[p] = true;
                last_end[p] = last_end[p].max(note.end());
            }
        }
        Ok(())
    }

    pub fn ensure_whole_measures(&self) -> Result<(), ScoreError> {
        if self.length_steps.is_multiple_of(STEPS_PER_MEASURE) {
            Ok(())
        } else {
            Err(ScoreError::PartialMeasure(self.length_steps))
        }
    }

    pub fn length_steps(&self) -> u32 {
        self.length_steps
    }

    pub fn measures(&self) -> u32 {
        self.length_steps.div_ceil(STEPS_PER_MEASURE)
    }

    pub fn channel(&self, channel: ChannelId) -> &[Note] {
        &self.channels[channel.index()]
    }

    pub fn channels(&self) -> &[Vec<Note>; 3] {
        &self.channels
    }

    pub fn note_count(&self) -> usize {
        self.channels.iter().map(Vec::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.note_count() == 0
    }

    /// Pitches of `channel` sounding at `step`, highest first.
    pub fn sounding_at(&self, channel: ChannelId, step: u32) -> Vec<&Note> {
        let mut notes: Vec<&Note> = self.channels[channel.index()]
            .iter()
            .filter(|n| n.sounds_at(step))
            .collect();
        notes.sort_by_key(|n| std::cmp::Reverse(n.pitch));
        notes
    }

    /// Replaces one channel's notes.
    pub fn with_channel(&self, channel: ChannelId, notes: Vec<Note>) -> Result<Self, ScoreError> {
        let mut channels = self.channels.clone();
        channels[channel.index()] = notes;
        Score::new(channels, self.length_steps)
    }

    /// Concatenates `other` after `self`, offsetting its onsets.
    pub fn concat(&self, other: &Score) -> Score {
        let offset = self.length_steps;
        let mut channels = self.channels.clone();
        for (dst, src) in channels.iter_mut().zip(&other.channels) {
            dst.extend(src.iter().map(|n| Note {
                onset: n.onset + offset,
                ..*n
            }));
        }
        Score::new(channels, self.length_steps + other.length_steps)
            .expect("concatenation of valid scores is valid")
    }

    /// Lowest and highest pitch across all channels.
    pub fn pitch_range(&self) -> Option<(Pitch, Pitch)> {
        let mut iter = self.channels.iter().flatten().map(|n| n.pitch);
        let first = iter.next()?;
        Some(iter.fold((first, first), |(lo, hi), p| (lo.min(p), hi.max(p))))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Major,
    Minor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Key {
    tonic: u8,
    mode: Mode,
}

const MAJOR_STEPS: [u8; 7] = [0, 2, 4, 5, 7, 9, 11];
const NATURAL_MINOR_STEPS: [u8; 7] = [0, 2, 3, 5, 7, 8, 10];

impl Key {
    pub fn new(tonic: u8, mode: Mode) -> Result<Self, ScoreError> {
        if tonic < 12 {
            Ok(Key { tonic, mode })
        } else {
            Err(ScoreError::InvalidKey(format!("tonic {tonic}")))
        }
    }

    pub const fn tonic(self) -> u8 {
        self.tonic
    }

    pub const fn mode(self) -> Mode {
        self.mode
    }

    pub fn pitch_classes(self) -> BTreeSet<u8> {
        key_pitch_classes(self)
    }

    /// Membership mask indexed by pitch class.
    pub fn pitch_class_mask(self) -> [bool; 12] {
        let mut mask = [false; 12];
        for pc in key_pitch_classes(self) {
            mask[pc as usize] = true;
        }
        mask
    }

    pub fn contains(self, pitch: Pitch) -> bool {
        self.pitch_class_mask()[pitch.pitch_class() as usize]
    }
}

impl FromStr for Key {
    type Err = ScoreError;

    /// Accepts `C`, `C major`, `Am`, `A minor`, `F#m`, `Bb major`, `eb:minor`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || ScoreError::InvalidKey(s.to_string());
        let text = s.trim();
        let mut chars = text.chars();
        let letter = chars.next().ok_or_else(bad)?.to_ascii_uppercase();
        let mut tonic: i32 = match letter {
            'C' => 0,
            'D' => 2,
            'E' => 4,
            'F' => 5,
            'G' => 7,
            'A' => 9,
            'B' => 11,
            _ => return Err(bad()),
        };
        let mut rest = chars.as_str();
        if let Some(r) = rest.strip_prefix('#') {
            tonic += 1;
            rest = r;
        } else if let Some(r) = rest.strip_prefix('b') {
            tonic -= 1;
            rest = r;
        }
        let rest = rest.trim_start_matches([' ', ':', '-', '_']).to_ascii_lowercase();
        let mode = match rest.as_str() {
            "" | "maj" | "major" => Mode::Major,
            "m" | "min" | "minor" => Mode::Minor,
            _ => return Err(bad()),
        };
        Key::new(tonic.rem_euclid(12) as u8, mode)
    }
}

impl TryFrom<String> for Key {
    type Error = ScoreError;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Key> for String {
    fn from(k: Key) -> String {
        k.to_string()
    }
}

impl fmt::Display for Key {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const NAMES: [&str; 12] = [
            "C", "C#", "D", "D#", "E", "F", "F#", "G", "G#", "A", "A#", "B",
        ];
        let mode = match self.mode {
            Mode::Major => "major",
            Mode::Minor => "minor",
        };
        write!(f, "{} {}", NAMES[self.tonic as usize], mode)
    }
}

/// The seven diatonic pitch classes of `key` (natural minor for minor keys).
pub fn key_pitch_classes(key: Key) -> BTreeSet<u8> {
    let steps = match key.mode {
        Mode::Major => &MAJOR_STEPS,
        Mode::Minor => &NATURAL_MINOR_STEPS,
    };
    steps.iter().map(|s| (s + key.tonic) % 12).collect()
}

pub fn transpose(score: &Score, semitones: i32) -> Result<Score, ScoreError> {
    let mut channels: [Vec<Note>; 3] = Default::default();
    for (dst, src) in channels.iter_mut().zip(score.channels()) {
        *dst = shift_notes(src, semitones)?;
    }
    Score::new(channels, score.length_steps())
}

fn shift_notes(notes: &[Note], semitones: i32) -> Result<Vec<Note>, ScoreError> {
    notes
        .iter()
        .map(|n| {
            Ok(Note {
                pitch: n.pitch.shifted(semitones)?,
                ..*n
            })
        })
        .collect()
}

fn mean_pitch(notes: &[Note]) -> Option<f64> {
    if notes.is_empty() {
        return None;
    }
    let sum: f64 = notes.iter().map(|n| n.pitch.value() as f64).sum();
    Some(sum / notes.len() as f64)
}

/// Unweighted mean pitch of one channel.
pub fn channel_mean_pitch(score: &Score, channel: ChannelId) -> Result<f64, ScoreError> {
    mean_pitch(score.channel(channel)).ok_or(ScoreError::EmptyChannel(channel))
}

/// Octave shift (in octaves) that moves the channel mean closest to
/// `target_mean` while keeping every pitch in range.
///
/// Ties go to the shift closer to zero, then to the negative shift.
pub fn octave_shift_for(notes: &[Note], target_mean: f64) -> Option<i32> {
    let mean = mean_pitch(notes)?;
    let lo = notes.iter().map(|n| n.pitch.value() as i32).min()?;
    let hi = notes.iter().map(|n| n.pitch.value() as i32).max()?;
    // Feasible k satisfy lo + 12k >= 0 and hi + 12k <= 127.
    let k_min = (-lo).div_euclid(12) + i32::from((-lo).rem_euclid(12) != 0);
    let k_max = (127 - hi).div_euclid(12);
    (k_min..=k_max).min_by(|&a, &b| {
        let da = (mean + 12.0 * a as f64 - target_mean).abs();
        let db = (mean + 12.0 * b as f64 - target_mean).abs();
        da.total_cmp(&db)
            .then(a.abs().cmp(&b.abs()))
            .then(a.cmp(&b))
    })
}

/// Shifts a channel by whole octaves toward `target_mean`.
pub fn octave_align(notes: &[Note], target_mean: f64) -> Result<Vec<Note>, ScoreError> {
    if notes.is_empty() {
        return Err(ScoreError::EmptyChannel(ChannelId::Melody));
    }
    let k = octave_shift_for(notes, target_mean)
        .ok_or_else(|| ScoreError::OutOfRange(notes[0].pitch.value() as i32))?;
    shift_notes(notes, 12 * k)
}
