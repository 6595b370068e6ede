//! Zig-zag event encoding of three-channel scores.
//!
//! For each step the scan visits melody, chords and bass in order. Inside a
//! channel every sounding note emits `NEW_NOTE(p)` (attack at this step) or
//! `CNT_NOTE(p)` (held from the previous step), highest pitch first. Channel
//! boundaries emit `NXT_CHNL` and every step is closed by `NXT_STEP`, so a
//! score of `n` steps encodes to exactly `n` step terminators.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::score::{ChannelId, Note, Pitch, Score, ScoreError};

pub const BEAT_BITS: usize = 5;
/// Beat flags plus the melody gate.
pub const FEATURE_DIM: usize = BEAT_BITS + 1;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EncodeError {
    #[error("grammar error at symbol {position}: {reason}")]
    Grammar { position: usize, reason: String },
    #[error("pitch {0} is outside the vocabulary")]
    PitchOutOfVocabulary(u8),
    #[error("token id {0} is outside the vocabulary")]
    TokenOutOfRange(usize),
    #[error("invalid vocabulary range {0}..={1}")]
    InvalidVocabulary(u8, u8),
    #[error("cannot parse symbol `{0}`")]
    BadSymbol(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

fn grammar(position: usize, reason: impl Into<String>) -> EncodeError {
    EncodeError::Grammar {
        position,
        reason: reason.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Symbol {
    NewNote(Pitch),
    ContNote(Pitch),
    NxtChnl,
    NxtStep,
}

impl Symbol {
    pub fn pitch(self) -> Option<Pitch> {
        match self {
            Symbol::NewNote(p) | Symbol::ContNote(p) => Some(p),
            _ => None,
        }
    }

    pub fn is_note(self) -> bool {
        self.pitch().is_some()
    }
}

impl fmt::Display for Symbol {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Symbol::NewNote(p) => write!(f, "NEW_NOTE({p})"),
            Symbol::ContNote(p) => write!(f, "CNT_NOTE({p})"),
            Symbol::NxtChnl => f.write_str("NXT_CHNL"),
            Symbol::NxtStep => f.write_str("NXT_STEP"),
        }
    }
}

impl FromStr for Symbol {
    type Err = EncodeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        match s {
            "NXT_CHNL" => return Ok(Symbol::NxtChnl),
            "NXT_STEP" => return Ok(Symbol::NxtStep),
            _ => {}
        }
        let bad = || EncodeError::BadSymbol(s.to_string());
        let (kind, rest) = s.split_once('(').ok_or_else(bad)?;
        let name = rest.strip_suffix(')').ok_or_else(bad)?;
        let pitch = Pitch::from_name(name)
            .or_else(|| name.parse::<i32>().ok().and_then(|v| Pitch::new(v).ok()))
            .ok_or_else(bad)?;
        match kind {
            "NEW_NOTE" => Ok(Symbol::NewNote(pitch)),
            "CNT_NOTE" => Ok(Symbol::ContNote(pitch)),
            _ => Err(bad()),
        }
    }
}

/// One symbol per line, in the `NEW_NOTE(C5)` / `NXT_CHNL` text form.
pub fn dump_symbols(symbols: &[Symbol]) -> String {
    let mut out = String::with_capacity(symbols.len() * 12);
    for s in symbols {
        out.push_str(&s.to_string());
        out.push('\n');
    }
    out
}

/// Parses the output of [`dump_symbols`]. Blank lines and `#` comments are skipped.
pub fn parse_symbols(text: &str) -> Result<Vec<Symbol>, EncodeError> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::parse)
        .collect()
}

/// Contiguous pitch set `T = [low, high]` and the token layout over it:
/// new notes ascending, continued notes ascending, `NXT_CHNL`, `NXT_STEP`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Vocabulary {
    low: u8,
    high: u8,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Vocabulary { low: 0, high: 127 }
    }
}

impl Vocabulary {
    pub fn new(low: u8, high: u8) -> Result<Self, EncodeError> {
        if low > high || high > Pitch::MAX {
            return Err(EncodeError::InvalidVocabulary(low, high));
        }
        Ok(Vocabulary { low, high })
    }

    pub fn full() -> Self {
        Self::default()
    }

    pub const fn low(&self) -> u8 {
        self.low
    }

    pub const fn high(&self) -> u8 {
        self.high
    }

    pub const fn pitch_count(&self) -> usize {
        (self.high - self.low) as usize + 1
    }

    /// `|S| = 2|T| + 2`.
    pub const fn size(&self) -> usize {
        2 * self.pitch_count() + 2
    }

    pub fn contains(&self, pitch: Pitch) -> bool {
        (self.low..=self.high).contains(&pitch.value())
    }

    pub fn pitches(&self) -> impl Iterator<Item = Pitch> {
        (self.low..=self.high).map(|v| Pitch::new(v as i32).expect("vocabulary within MIDI range"))
    }

    pub const fn nxt_chnl_id(&self) -> usize {
        2 * self.pitch_count()
    }

    pub const fn nxt_step_id(&self) -> usize {
        2 * self.pitch_count() + 1
    }

    pub fn new_note_id(&self, pitch: Pitch) -> Result<usize, EncodeError> {
        self.offset(pitch)
    }

    pub fn cont_note_id(&self, pitch: Pitch) -> Result<usize, EncodeError> {
        Ok(self.pitch_count() + self.offset(pitch)?)
    }

    fn offset(&self, pitch: Pitch) -> Result<usize, EncodeError> {
        if self.contains(pitch) {
            Ok((pitch.value() - self.low) as usize)
        } else {
            Err(EncodeError::PitchOutOfVocabulary(pitch.value()))
        }
    }

    pub fn token_id(&self, symbol: Symbol) -> Result<usize, EncodeError> {
        match symbol {
            Symbol::NewNote(p) => self.new_note_id(p),
            Symbol::ContNote(p) => self.cont_note_id(p),
            Symbol::NxtChnl => Ok(self.nxt_chnl_id()),
            Symbol::NxtStep => Ok(self.nxt_step_id()),
        }
    }

    pub fn symbol_of(&self, id: usize) -> Result<Symbol, EncodeError> {
        let n = self.pitch_count();
        let pitch = |offset: usize| {
            Pitch::new(self.low as i32 + offset as i32).expect("offset within vocabulary")
        };
        match id {
            i if i < n => Ok(Symbol::NewNote(pitch(i))),
            i if i < 2 * n => Ok(Symbol::ContNote(pitch(i - n))),
            i if i == 2 * n => Ok(Symbol::NxtChnl),
            i if i == 2 * n + 1 => Ok(Symbol::NxtStep),
            i => Err(EncodeError::TokenOutOfRange(i)),
        }
    }

    pub fn token_ids(&self, symbols: &[Symbol]) -> Result<Vec<usize>, EncodeError> {
        symbols.iter().map(|&s| self.token_id(s)).collect()
    }
}

/// Beat flags and melody gate attached to every symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureVector {
    pub beat: [bool; BEAT_BITS],
    pub melody_gate: bool,
}

impl FeatureVector {
    pub fn at_step(step: u32, melody_gate: bool) -> Self {
        FeatureVector {
            beat: beat_feature(step),
            melody_gate,
        }
    }

    pub fn as_array(&self) -> [f64; FEATURE_DIM] {
        let mut out = [0.0; FEATURE_DIM];
        for (o, &b) in out.iter_mut().zip(&self.beat) {
            *o = if b { 1.0 } else { 0.0 };
        }
        out[BEAT_BITS] = if self.melody_gate { 1.0 } else { 0.0 };
        out
    }
}

/// Component `j` is set iff `step` is a multiple of `2^j`, for `j = 0..5`.
pub fn beat_feature(step: u32) -> [bool; BEAT_BITS] {
    std::array::from_fn(|j| step.is_multiple_of(1u32 << j))
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct EncodedSequence {
    pub symbols: Vec<Symbol>,
    pub features: Vec<FeatureVector>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    /// Number of completed steps (`NXT_STEP` count).
    pub fn step_count(&self) -> usize {
        count_steps(&self.symbols)
    }

    /// The prefix covering the first `steps` steps.
    pub fn prefix_steps(&self, steps: usize) -> EncodedSequence {
        let end = prefix_len_for_steps(&self.symbols, steps);
        EncodedSequence {
            symbols: self.symbols[..end].to_vec(),
            features: self.features[..end].to_vec(),
        }
    }

    pub fn token_ids(&self, vocab: &Vocabulary) -> Result<Vec<usize>, EncodeError> {
        vocab.token_ids(&self.symbols)
    }

    /// Shifts every pitch by `semitones`, keeping features.
    pub fn transposed(&self, semitones: i32) -> Result<EncodedSequence, EncodeError> {
        let symbols = self
            .symbols
            .iter()
            .map(|s| {
                Ok(match *s {
                    Symbol::NewNote(p) => Symbol::NewNote(p.shifted(semitones)?),
                    Symbol::ContNote(p) => Symbol::ContNote(p.shifted(semitones)?),
                    other => other,
                })
            })
            .collect::<Result<_, ScoreError>>()?;
        Ok(EncodedSequence {
            symbols,
            features: self.features.clone(),
        })
    }
}

pub fn count_steps(symbols: &[Symbol]) -> usize {
    symbols.iter().filter(|s| **s == Symbol::NxtStep).count()
}

/// Length of the shortest prefix containing `steps` step terminators (or the
/// whole slice if it has fewer).
pub fn prefix_len_for_steps(symbols: &[Symbol], steps: usize) -> usize {
    if steps == 0 {
        return 0;
    }
    let mut seen = 0;
    for (i, s) in symbols.iter().enumerate() {
        if *s == Symbol::NxtStep {
            seen += 1;
            if seen == steps {
                return i + 1;
            }
        }
    }
    symbols.len()
}

pub fn encode(score: &Score) -> EncodedSequence {
    let mut symbols = Vec::new();
    let mut features = Vec::new();
    for step in 0..score.length_steps() {
        let gate = !score.sounding_at(ChannelId::Melody, step).is_empty();
        let feature = FeatureVector::at_step(step, gate);
        let start = symbols.len();
        for channel in ChannelId::ALL {
            if channel != ChannelId::Melody {
                symbols.push(Symbol::NxtChnl);
            }
            for note in score.sounding_at(channel, step) {
                symbols.push(if note.onset == step {
                    Symbol::NewNote(note.pitch)
                } else {
                    Symbol::ContNote(note.pitch)
                });
            }
        }
        symbols.push(Symbol::NxtStep);
        features.extend(std::iter::repeat_n(feature, symbols.len() - start));
    }
    EncodedSequence { symbols, features }
}

/// Tracks grammar position while consuming symbols one at a time.
///
/// Shared by [`decode`] and the sampler so both agree on what is legal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScanCursor {
    step: u32,
    channel: usize,
    /// Last pitch emitted in the current channel-step.
    last_pitch: Option<Pitch>,
    notes_this_channel_step: usize,
    /// Bitsets over 128 pitches: sounding at the previous step / so far this step.
    previous: [u128; 3],
    current: [u128; 3],
}

impl Default for ScanCursor {
    fn default() -> Self {
        Self::new()
    }
}

impl ScanCursor {
    pub fn new() -> Self {
        ScanCursor {
            step: 0,
            channel: 0,
            last_pitch: None,
            notes_this_channel_step: 0,
            previous: [0; 3],
            current: [0; 3],
        }
    }

    pub fn step(&self) -> u32 {
        self.step
    }

    pub fn channel(&self) -> ChannelId {
        ChannelId::ALL[self.channel]
    }

    pub fn last_pitch(&self) -> Option<Pitch> {
        self.last_pitch
    }

    pub fn notes_this_channel_step(&self) -> usize {
        self.notes_this_channel_step
    }

    /// Whether `pitch` sounded in the current channel at the previous step.
    pub fn was_sounding(&self, pitch: Pitch) -> bool {
        self.previous[self.channel] & (1u128 << pitch.value()) != 0
    }

    pub fn below_last(&self, pitch: Pitch) -> bool {
        self.last_pitch.is_none_or(|last| pitch < last)
    }

    /// Checks `symbol` against the grammar without consuming it.
    pub fn check(&self, symbol: Symbol) -> Result<(), String> {
        match symbol {
            Symbol::NewNote(p) | Symbol::ContNote(p) => {
                if !self.below_last(p) {
                    return Err(format!(
                        "pitch {p} does not descend below {}",
                        self.last_pitch.expect("set when not below")
                    ));
                }
                if matches!(symbol, Symbol::ContNote(_)) && !self.was_sounding(p) {
                    return Err(format!(
                        "CNT_NOTE({p}) with no sounding {p} in {} at the previous step",
                        self.channel()
                    ));
                }
                Ok(())
            }
            Symbol::NxtChnl if self.channel >= 2 => {
                Err("NXT_CHNL after the last channel".to_string())
            }
            Symbol::NxtStep if self.channel != 2 => Err(format!(
                "NXT_STEP in {} before both channel boundaries",
                self.channel()
            )),
            _ => Ok(()),
        }
    }

    /// Consumes `symbol`, returning an error if it violates the grammar.
    pub fn advance(&mut self, symbol: Symbol) -> Result<(), String> {
        self.check(symbol)?;
        match symbol {
            Symbol::NewNote(p) | Symbol::ContNote(p) => {
                self.last_pitch = Some(p);
                self.notes_this_channel_step += 1;
                self.current[self.channel] |= 1u128 << p.value();
            }
            Symbol::NxtChnl => {
                self.channel += 1;
                self.last_pitch = None;
                self.notes_this_channel_step = 0;
            }
            Symbol::NxtStep => {
                self.previous = self.current;
                self.current = [0; 3];
                self.channel = 0;
                self.last_pitch = None;
                self.notes_this_channel_step = 0;
                self.step += 1;
            }
        }
        Ok(())
    }

    /// True at a step boundary (nothing consumed since the last `NXT_STEP`).
    pub fn at_step_start(&self) -> bool {
        self.channel == 0 && self.notes_this_channel_step == 0
    }
}

pub fn decode(symbols: &[Symbol]) -> Result<Score, EncodeError> {
    let mut cursor = ScanCursor::new();
    let mut channels: [Vec<Note>; 3] = Default::default();
    // Index into `channels[c]` of the note currently held at each pitch.
    let mut open: [[Option<usize>; 128]; 3] = [[None; 128]; 3];
    let mut touched: [Vec<u8>; 3] = Default::default();

    for (position, &symbol) in symbols.iter().enumerate() {
        let channel = cursor.channel.min(2);
        cursor.advance(symbol).map_err(|r| grammar(position, r))?;
        match symbol {
            Symbol::NewNote(p) => {
                let idx = channels[channel].len();
                channels[channel].push(Note {
                    pitch: p,
                    onset: cursor.step,
                    duration: 1,
                });
                open[channel][p.value() as usize] = Some(idx);
                touched[channel].push(p.value());
            }
            Symbol::ContNote(p) => {
                let idx = open[channel][p.value() as usize]
                    .ok_or_else(|| grammar(position, "continued note was never started"))?;
                channels[channel][idx].duration += 1;
                touched[channel].push(p.value());
            }
            Symbol::NxtStep => {
                // Notes not continued at this step are closed.
                for c in 0..3 {
                    let mut keep = [None; 128];
                    for &p in &touched[c] {
                        keep[p as usize] = open[c][p as usize];
                    }
                    open[c] = keep;
                    touched[c].clear();
                }
            }
            Symbol::NxtChnl => {}
        }
    }
    if !cursor.at_step_start() {
        return Err(grammar(symbols.len(), "sequence ends inside a step"));
    }
    Ok(Score::new(channels, cursor.step)?)
}
