//! Minimal Standard MIDI File (format 0/1) container reader and writer.
//!
//! The reader accepts running status. The writer always emits explicit
//! status bytes.

use super::MidiError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EventKind {
    NoteOn { channel: u8, key: u8, velocity: u8 },
    NoteOff { channel: u8, key: u8, velocity: u8 },
    ProgramChange { channel: u8, program: u8 },
    /// Any other channel voice message (aftertouch, CC, pitch bend); ignored.
    OtherChannel { status: u8, data: Vec<u8> },
    Tempo(u32),
    TimeSignature { numerator: u8, denominator_pow2: u8, clocks: u8, thirty_seconds: u8 },
    TrackName(Vec<u8>),
    EndOfTrack,
    OtherMeta { kind: u8, data: Vec<u8> },
    SysEx(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrackEvent {
    pub delta: u32,
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Smf {
    pub format: u16,
    pub ticks_per_quarter: u16,
    pub tracks: Vec<Vec<TrackEvent>>,
}

fn malformed(msg: impl Into<String>) -> MidiError {
    MidiError::Malformed(msg.into())
}

pub fn write_vlq(out: &mut Vec<u8>, mut value: u32) {
    assert!(value < 1 << 28, "variable-length quantity out of range");
    let mut buf = [0u8; 4];
    let mut n = 0;
    loop {
        buf[n] = (value & 0x7f) as u8;
        n += 1;
        value >>= 7;
        if value == 0 {
            break;
        }
    }
    for i in (0..n).rev() {
        out.push(if i > 0 { buf[i] | 0x80 } else { buf[i] });
    }
}

struct Reader<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn new(data: &'a [u8]) -> Self {
        Reader { data, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.data.len() - self.pos
    }

    fn u8(&mut self) -> Result<u8, MidiError> {
        let b = *self
            .data
            .get(self.pos)
            .ok_or_else(|| malformed(format!("unexpected end of data at byte {}", self.pos)))?;
        self.pos += 1;
        Ok(b)
    }

    fn peek(&self) -> Result<u8, MidiError> {
        self.data
            .get(self.pos)
            .copied()
            .ok_or_else(|| malformed(format!("unexpected end of data at byte {}", self.pos)))
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8], MidiError> {
        if self.remaining() < n {
            return Err(malformed(format!(
                "need {n} bytes at offset {}, only {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16, MidiError> {
        let b = self.bytes(2)?;
        Ok(u16::from_be_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32, MidiError> {
        let b = self.bytes(4)?;
        Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn vlq(&mut self) -> Result<u32, MidiError> {
        let mut value = 0u32;
        for _ in 0..4 {
            let b = self.u8()?;
            value = (value << 7) | (b & 0x7f) as u32;
            if b & 0x80 == 0 {
                return Ok(value);
            }
        }
        Err(malformed("variable-length quantity longer than 4 bytes"))
    }
}

impl Smf {
    pub fn parse(bytes: &[u8]) -> Result<Smf, MidiError> {
        let mut r = Reader::new(bytes);
        if r.bytes(4)? != b"MThd" {
            return Err(malformed("missing MThd header"));
        }
        let header_len = r.u32()? as usize;
        if header_len < 6 {
            return Err(malformed("header chunk too short"));
        }
        let format = r.u16()?;
        let ntracks = r.u16()?;
        let division = r.u16()?;
        r.bytes(header_len - 6)?;
        if format > 1 {
            return Err(MidiError::Unsupported(format!("MIDI format {format}")));
        }
        if division & 0x8000 != 0 {
            return Err(MidiError::Unsupported("SMPTE time division".into()));
        }
        if division == 0 {
            return Err(malformed("zero ticks per quarter note"));
        }
        let mut tracks = Vec::with_capacity(ntracks as usize);
        while tracks.len() < ntracks as usize {
            let id = r.bytes(4)?;
            let len = r.u32()? as usize;
            let body = r.bytes(len)?;
            if id == b"MTrk" {
                tracks.push(parse_track(body)?);
            }
            // Unknown chunk types are skipped.
        }
        Ok(Smf {
            format,
            ticks_per_quarter: division,
            tracks,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(b"MThd");
        out.extend_from_slice(&6u32.to_be_bytes());
        out.extend_from_slice(&self.format.to_be_bytes());
        out.extend_from_slice(&(self.tracks.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.ticks_per_quarter.to_be_bytes());
        for track in &self.tracks {
            let body = write_track(track);
            out.extend_from_slice(b"MTrk");
            out.extend_from_slice(&(body.len() as u32).to_be_bytes());
            out.extend_from_slice(&body);
        }
        out
    }
}

fn channel_data_len(status: u8) -> usize {
    match status & 0xf0 {
        0xc0 | 0xd0 => 1,
        _ => 2,
    }
}

fn parse_track(body: &[u8]) -> Result<Vec<TrackEvent>, MidiError> {
    let mut r = Reader::new(body);
    let mut events = Vec::new();
    let mut running: Option<u8> = None;
    while r.remaining() > 0 {
        let delta = r.vlq()?;
        let first = r.peek()?;
        let kind = if first == 0xff {
            r.u8()?;
            let meta = r.u8()?;
            let len = r.vlq()? as usize;
            let data = r.bytes(len)?;
            running = None;
            match meta {
                0x2f => EventKind::EndOfTrack,
                0x51 if len == 3 => {
                    EventKind::Tempo(u32::from_be_bytes([0, data[0], data[1], data[2]]))
                }
                0x58 if len == 4 => EventKind::TimeSignature {
                    numerator: data[0],
                    denominator_pow2: data[1],
                    clocks: data[2],
                    thirty_seconds: data[3],
                },
                0x03 => EventKind::TrackName(data.to_vec()),
                kind => EventKind::OtherMeta {
                    kind,
                    data: data.to_vec(),
                },
            }
        } else if first == 0xf0 || first == 0xf7 {
            r.u8()?;
            let len = r.vlq()? as usize;
            running = None;
            EventKind::SysEx(r.bytes(len)?.to_vec())
        } else {
            let status = if first & 0x80 != 0 {
                r.u8()?;
                first
            } else {
                running.ok_or_else(|| malformed("data byte without running status"))?
            };
            if status >= 0xf0 {
                return Err(malformed(format!("unexpected system status {status:#04x}")));
            }
            running = Some(status);
            let data = r.bytes(channel_data_len(status))?;
            if data.iter().any(|b| b & 0x80 != 0) {
                return Err(malformed("channel data byte with high bit set"));
            }
            let channel = status & 0x0f;
            match status & 0xf0 {
                0x90 => EventKind::NoteOn {
                    channel,
                    key: data[0],
                    velocity: data[1],
                },
                0x80 => EventKind::NoteOff {
                    channel,
                    key: data[0],
                    velocity: data[1],
                },
                0xc0 => EventKind::ProgramChange {
                    channel,
                    program: data[0],
                },
                _ => EventKind::OtherChannel {
                    status,
                    data: data.to_vec(),
                },
            }
        };
        let end = kind == EventKind::EndOfTrack;
        events.push(TrackEvent { delta, kind });
        if end {
            break;
        }
    }
    Ok(events)
}

fn write_track(events: &[TrackEvent]) -> Vec<u8> {
    let mut out = Vec::new();
    for ev in events {
        write_vlq(&mut out, ev.delta);
        match &ev.kind {
            EventKind::NoteOn {
                channel,
                key,
                velocity,
            } => out.extend_from_slice(&[0x90 | channel, *key, *velocity]),
            EventKind::NoteOff {
                channel,
                key,
                velocity,
            } => out.extend_from_slice(&[0x80 | channel, *key, *velocity]),
            EventKind::ProgramChange { channel, program } => {
                out.extend_from_slice(&[0xc0 | channel, *program])
            }
            EventKind::OtherChannel { status, data } => {
                out.push(*status);
                out.extend_from_slice(data);
            }
            EventKind::Tempo(us) => {
                let b = us.to_be_bytes();
                out.extend_from_slice(&[0xff, 0x51, 0x03, b[1], b[2], b[3]]);
            }
            EventKind::TimeSignature {
                numerator,
                denominator_pow2,
                clocks,
                thirty_seconds,
            } => out.extend_from_slice(&[
                0xff,
                0x58,
                0x04,
                *numerator,
                *denominator_pow2,
                *clocks,
                *thirty_seconds,
            ]),
            EventKind::TrackName(name) => write_meta(&mut out, 0x03, name),
            EventKind::EndOfTrack => out.extend_from_slice(&[0xff, 0x2f, 0x00]),
            EventKind::OtherMeta { kind, data } => write_meta(&mut out, *kind, data),
            EventKind::SysEx(data) => {
                out.push(0xf0);
                write_vlq(&mut out, data.len() as u32);
                out.extend_from_slice(data);
            }
        }
    }
    out
}

fn write_meta(out: &mut Vec<u8>, kind: u8, data: &[u8]) {
    out.extend_from_slice(&[0xff, kind]);
    write_vlq(out, data.len() as u32);
    out.extend_from_slice(data);
}
