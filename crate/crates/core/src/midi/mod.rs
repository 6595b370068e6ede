//! Standard MIDI File ingestion and rendering.
//!
//! [`read_midi`] maps three source tracks onto the melody, chords and bass
//! channels and quantizes them to the sixteenth-note grid. [`write_midi`]
//! renders a score as a format-1 file with one track per channel, plus an
//! optional percussion track on MIDI channel 10.

mod drums;
pub mod smf;

use std::fmt;
use std::path::PathBuf;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::score::{ChannelId, Note, Pitch, Score, ScoreError, STEPS_PER_BEAT, STEPS_PER_MEASURE};
use smf::{EventKind, Smf, TrackEvent};

pub use drums::{builtin_drum_library, load_drum_library, parse_drum_pattern, DrumEvent, DrumPattern};

pub const PERCUSSION_CHANNEL: u8 = 9;
pub const NOTE_VELOCITY: u8 = 96;

#[derive(Debug, Error)]
pub enum MidiError {
    #[error("malformed MIDI file: {0}")]
    Malformed(String),
    #[error("unsupported MIDI file: {0}")]
    Unsupported(String),
    #[error("time signature {numerator}/{denominator} is not 4/4")]
    NotCommonTime { numerator: u8, denominator: u32 },
    #[error("no track matches selector {0}")]
    MissingTrack(TrackSelector),
    #[error("invalid channel map: {0}")]
    InvalidChannelMap(String),
    #[error("{}:{line}: {message}", file.display())]
    Parse {
        file: PathBuf,
        line: usize,
        message: String,
    },
    #[error("i/o error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Score(#[from] ScoreError),
}

/// Chooses the notes of one score channel from a MIDI file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TrackSelector {
    /// Zero-based track chunk index.
    Index(usize),
    /// Regular expression matched against track names; all matching tracks merge.
    Name(String),
    /// All note events on a MIDI channel (1-16), across every track.
    Channel { channel: u8 },
}

impl fmt::Display for TrackSelector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrackSelector::Index(i) => write!(f, "track #{i}"),
            TrackSelector::Name(re) => write!(f, "track name /{re}/"),
            TrackSelector::Channel { channel } => write!(f, "MIDI channel {channel}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelMap {
    pub melody_track: TrackSelector,
    pub chords_track: TrackSelector,
    pub bass_track: TrackSelector,
}

impl ChannelMap {
    /// The layout produced by [`write_midi`]: conductor track, then one
    /// track per channel.
    pub fn canonical() -> Self {
        ChannelMap {
            melody_track: TrackSelector::Index(1),
            chords_track: TrackSelector::Index(2),
            bass_track: TrackSelector::Index(3),
        }
    }

    pub fn selector(&self, channel: ChannelId) -> &TrackSelector {
        match channel {
            ChannelId::Melody => &self.melody_track,
            ChannelId::Chords => &self.chords_track,
            ChannelId::Bass => &self.bass_track,
        }
    }

    pub fn validate(&self) -> Result<(), MidiError> {
        let s = [&self.melody_track, &self.chords_track, &self.bass_track];
        if s[0] == s[1] || s[0] == s[2] || s[1] == s[2] {
            return Err(MidiError::InvalidChannelMap(
                "selectors must be distinct".into(),
            ));
        }
        for sel in s {
            match sel {
                TrackSelector::Name(re) => {
                    Regex::new(re).map_err(|e| MidiError::InvalidChannelMap(e.to_string()))?;
                }
                TrackSelector::Channel { channel } if !(1..=16).contains(channel) => {
                    return Err(MidiError::InvalidChannelMap(format!(
                        "MIDI channel {channel} not in 1-16"
                    )));
                }
                _ => {}
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MidiMeta {
    pub ticks_per_quarter: u16,
    pub tempo_bpm: f64,
    pub time_signature: (u8, u8),
}

impl Default for MidiMeta {
    fn default() -> Self {
        MidiMeta {
            ticks_per_quarter: 480,
            tempo_bpm: 120.0,
            time_signature: (4, 4),
        }
    }
}

impl MidiMeta {
    pub fn with_tempo(tempo_bpm: f64) -> Self {
        MidiMeta {
            tempo_bpm,
            ..Default::default()
        }
    }

    pub fn microseconds_per_quarter(&self) -> u32 {
        (60_000_000.0 / self.tempo_bpm).round() as u32
    }
}

/// General MIDI program numbers (0-based) for the three channels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Programs {
    pub melody: u8,
    pub chords: u8,
    pub bass: u8,
}

impl Default for Programs {
    fn default() -> Self {
        // Grand piano lead, steel-string guitar, fingered electric bass.
        Programs {
            melody: 0,
            chords: 25,
            bass: 33,
        }
    }
}

impl Programs {
    pub fn get(&self, channel: ChannelId) -> u8 {
        match channel {
            ChannelId::Melody => self.melody,
            ChannelId::Chords => self.chords,
            ChannelId::Bass => self.bass,
        }
    }
}

/// Rounds `num / den` to the nearest integer, halves toward negative infinity.
fn round_half_down(num: u64, den: u64) -> u64 {
    // ceil((2num - den) / 2den), clamped at 0.
    let twice = 2 * num;
    if twice <= den {
        return 0;
    }
    (twice - den).div_ceil(2 * den)
}

/// Quantizes a tick position to a step index.
pub fn ticks_to_steps(ticks: u64, ticks_per_quarter: u16) -> u64 {
    round_half_down(ticks * STEPS_PER_BEAT as u64, ticks_per_quarter as u64)
}

fn steps_to_ticks(steps: u32, ticks_per_quarter: u16) -> u32 {
    let num = steps as u64 * ticks_per_quarter as u64;
    ((num + 2) / STEPS_PER_BEAT as u64) as u32
}

struct RawNote {
    start: u64,
    end: u64,
    key: u8,
}

fn absolute(track: &[TrackEvent]) -> impl Iterator<Item = (u64, &EventKind)> {
    track.iter().scan(0u64, |t, ev| {
        *t += ev.delta as u64;
        Some((*t, &ev.kind))
    })
}

/// Pairs note-ons with note-offs (first-in first-out per channel and key).
fn collect_notes(track: &[TrackEvent], channel_filter: Option<u8>) -> Vec<RawNote> {
    let mut open: Vec<Vec<u64>> = vec![Vec::new(); 16 * 128];
    let mut notes = Vec::new();
    let mut last_tick = 0;
    for (tick, kind) in absolute(track) {
        last_tick = tick;
        let (channel, key, on) = match *kind {
            EventKind::NoteOn {
                channel,
                key,
                velocity,
            } => (channel, key, velocity > 0),
            EventKind::NoteOff { channel, key, .. } => (channel, key, false),
            _ => continue,
        };
        if channel_filter.is_some_and(|c| c != channel) {
            continue;
        }
        let slot = &mut open[channel as usize * 128 + key as usize];
        if on {
            slot.push(tick);
        } else if !slot.is_empty() {
            let start = slot.remove(0);
            notes.push(RawNote {
                start,
                end: tick,
                key,
            });
        }
    }
    for (idx, starts) in open.into_iter().enumerate() {
        for start in starts {
            notes.push(RawNote {
                start,
                end: last_tick.max(start),
                key: (idx % 128) as u8,
            });
        }
    }
    notes
}

fn track_name(track: &[TrackEvent]) -> Option<String> {
    track.iter().find_map(|ev| match &ev.kind {
        EventKind::TrackName(name) => Some(String::from_utf8_lossy(name).into_owned()),
        _ => None,
    })
}

fn select_notes(smf: &Smf, selector: &TrackSelector) -> Result<Vec<RawNote>, MidiError> {
    let missing = || MidiError::MissingTrack(selector.clone());
    match selector {
        TrackSelector::Index(i) => Ok(collect_notes(smf.tracks.get(*i).ok_or_else(missing)?, None)),
        TrackSelector::Name(pattern) => {
            let re = Regex::new(pattern).map_err(|e| MidiError::InvalidChannelMap(e.to_string()))?;
            let matching: Vec<_> = smf
                .tracks
                .iter()
                .filter(|t| track_name(t).is_some_and(|n| re.is_match(&n)))
                .collect();
            if matching.is_empty() {
                return Err(missing());
            }
            Ok(matching.into_iter().flat_map(|t| collect_notes(t, None)).collect())
        }
        TrackSelector::Channel { channel } => {
            let ch = channel.checked_sub(1).filter(|c| *c < 16).ok_or_else(missing)?;
            let notes: Vec<_> = smf
                .tracks
                .iter()
                .flat_map(|t| collect_notes(t, Some(ch)))
                .collect();
            if notes.is_empty() {
                return Err(missing());
            }
            Ok(notes)
        }
    }
}

/// Quantizes raw notes and merges same-pitch overlaps into their union.
fn quantize(raw: &[RawNote], tpq: u16) -> Result<Vec<Note>, MidiError> {
    let mut notes: Vec<(u8, u64, u64)> = raw
        .iter()
        .map(|n| {
            let onset = ticks_to_steps(n.start, tpq);
            let duration = ticks_to_steps(n.end - n.start, tpq).max(1);
            (n.key, onset, onset + duration)
        })
        .collect();
    notes.sort_unstable();
    let mut merged: Vec<(u8, u64, u64)> = Vec::with_capacity(notes.len());
    for (key, start, end) in notes {
        match merged.last_mut() {
            Some(last) if last.0 == key && start < last.2 => last.2 = last.2.max(end),
            _ => merged.push((key, start, end)),
        }
    }
    merged
        .into_iter()
        .map(|(key, start, end)| {
            let to_u32 = |v: u64| {
                u32::try_from(v).map_err(|_| MidiError::Malformed("note position overflow".into()))
            };
            Ok(Note::new(
                Pitch::new(key as i32)?,
                to_u32(start)?,
                to_u32(end - start)?,
            )?)
        })
        .collect()
}

/// Parses a MIDI file and quantizes the mapped tracks into a [`Score`].
pub fn read_midi(bytes: &[u8], map: &ChannelMap) -> Result<(Score, MidiMeta), MidiError> {
    map.validate()?;
    let smf = Smf::parse(bytes)?;
    let tpq = smf.ticks_per_quarter;

    let mut tempo: Option<(u64, u32)> = None;
    let mut end_tick = 0u64;
    for track in &smf.tracks {
        for (tick, kind) in absolute(track) {
            end_tick = end_tick.max(tick);
            match *kind {
                EventKind::TimeSignature {
                    numerator,
                    denominator_pow2,
                    ..
                } => {
                    if numerator != 4 || denominator_pow2 != 2 {
                        return Err(MidiError::NotCommonTime {
                            numerator,
                            denominator: 1u32.checked_shl(denominator_pow2 as u32).unwrap_or(0),
                        });
                    }
                }
                EventKind::Tempo(us) if us > 0 && tempo.is_none_or(|(t, _)| tick < t) => {
                    tempo = Some((tick, us));
                }
                _ => {}
            }
        }
    }

    let mut channels: [Vec<Note>; 3] = Default::default();
    for channel in ChannelId::ALL {
        let raw = select_notes(&smf, map.selector(channel))?;
        channels[channel.index()] = quantize(&raw, tpq)?;
    }
    let last_note_end = channels
        .iter()
        .flatten()
        .map(|n| n.end())
        .max()
        .unwrap_or(0);
    let end_steps = u32::try_from(ticks_to_steps(end_tick, tpq))
        .map_err(|_| MidiError::Malformed("track too long".into()))?;
    let length = last_note_end
        .max(end_steps)
        .div_ceil(STEPS_PER_MEASURE)
        * STEPS_PER_MEASURE;
    let score = Score::new(channels, length)?;
    let meta = MidiMeta {
        ticks_per_quarter: tpq,
        tempo_bpm: tempo.map_or(120.0, |(_, us)| 60_000_000.0 / us as f64),
        time_signature: (4, 4),
    };
    Ok((score, meta))
}

/// A drum pattern placed at a measure offset in the output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlacedPattern {
    pub pattern: DrumPattern,
    pub start_measure: u32,
}

fn finish_track(mut timed: Vec<(u32, u8, EventKind)>, end_tick: u32) -> Vec<TrackEvent> {
    // Sort by tick, then by priority (meta, program, note-off, note-on).
    timed.sort_by_key(|(tick, prio, _)| (*tick, *prio));
    let mut out = Vec::with_capacity(timed.len() + 1);
    let mut now = 0;
    for (tick, _, kind) in timed {
        out.push(TrackEvent {
            delta: tick - now,
            kind,
        });
        now = tick;
    }
    out.push(TrackEvent {
        delta: end_tick.saturating_sub(now),
        kind: EventKind::EndOfTrack,
    });
    out
}

/// Renders a score (and optional drums) as a format-1 Standard MIDI File.
pub fn write_midi(
    score: &Score,
    meta: &MidiMeta,
    programs: &Programs,
    drums: &[PlacedPattern],
) -> Vec<u8> {
    let tpq = meta.ticks_per_quarter.max(1);
    let end_tick = steps_to_ticks(score.length_steps(), tpq);
    let mut tracks = Vec::with_capacity(5);

    let conductor = vec![
        (0, 0, EventKind::TrackName(b"conductor".to_vec())),
        (0, 1, EventKind::Tempo(meta.microseconds_per_quarter())),
        (
            0,
            1,
            EventKind::TimeSignature {
                numerator: 4,
                denominator_pow2: 2,
                clocks: 24,
                thirty_seconds: 8,
            },
        ),
    ];
    tracks.push(finish_track(conductor, end_tick));

    for channel in ChannelId::ALL {
        let ch = channel.index() as u8;
        let mut timed = vec![
            (0, 0, EventKind::TrackName(channel.name().as_bytes().to_vec())),
            (
                0,
                1,
                EventKind::ProgramChange {
                    channel: ch,
                    program: programs.get(channel) & 0x7f,
                },
            ),
        ];
        for note in score.channel(channel) {
            let key = note.pitch.value();
            timed.push((
                steps_to_ticks(note.onset, tpq),
                3,
                EventKind::NoteOn {
                    channel: ch,
                    key,
                    velocity: NOTE_VELOCITY,
                },
            ));
            timed.push((
                steps_to_ticks(note.end(), tpq),
                2,
                EventKind::NoteOff {
                    channel: ch,
                    key,
                    velocity: 0,
                },
            ));
        }
        tracks.push(finish_track(timed, end_tick));
    }

    if !drums.is_empty() {
        let mut timed = vec![(0, 0, EventKind::TrackName(b"drums".to_vec()))];
        for placed in drums {
            let base = placed.start_measure * STEPS_PER_MEASURE;
            for ev in &placed.pattern.events {
                let step = base + ev.step;
                if step >= score.length_steps() {
                    continue;
                }
                timed.push((
                    steps_to_ticks(step, tpq),
                    3,
                    EventKind::NoteOn {
                        channel: PERCUSSION_CHANNEL,
                        key: ev.pitch,
                        velocity: ev.velocity,
                    },
                ));
                timed.push((
                    steps_to_ticks(step + 1, tpq),
                    2,
                    EventKind::NoteOff {
                        channel: PERCUSSION_CHANNEL,
                        key: ev.pitch,
                        velocity: 0,
                    },
                ));
            }
        }
        tracks.push(finish_track(timed, end_tick));
    }

    Smf {
        format: 1,
        ticks_per_quarter: tpq,
        tracks,
    }
    .to_bytes()
}

/// Playback length of a MIDI file in seconds, assuming the first tempo
/// holds throughout.
pub fn duration_seconds(bytes: &[u8]) -> Result<f64, MidiError> {
    let smf = Smf::parse(bytes)?;
    let mut end = 0u64;
    let mut tempo_us = 500_000u32;
    let mut tempo_tick = None;
    for track in &smf.tracks {
        for (tick, kind) in absolute(track) {
            end = end.max(tick);
            if let EventKind::Tempo(us) = *kind {
                if tempo_tick.is_none_or(|t| tick < t) {
                    tempo_tick = Some(tick);
                    tempo_us = us;
                }
            }
        }
    }
    Ok(end as f64 / smf.ticks_per_quarter as f64 * tempo_us as f64 / 1e6)
}
