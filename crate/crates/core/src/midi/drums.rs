//! Precomposed drum patterns.
//!
//! One pattern per `.drum` file, named after the file stem:
//!
//! ```text
//! # basic rock beat
//! measures 1
//! 0 36 110
//! 4 38 100
//! ```
//!
//! Each event line is `step pitch velocity`, with `step` counted from the
//! start of the pattern (so it must be below `measures * 16`).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::MidiError;
use crate::score::STEPS_PER_MEASURE;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrumEvent {
    pub step: u32,
    pub pitch: u8,
    pub velocity: u8,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DrumPattern {
    pub name: String,
    pub measures: u32,
    pub events: Vec<DrumEvent>,
}

impl DrumPattern {
    pub fn length_steps(&self) -> u32 {
        self.measures * STEPS_PER_MEASURE
    }

    /// The first `measures` measures of the pattern.
    pub fn truncated(&self, measures: u32) -> DrumPattern {
        let measures = measures.min(self.measures);
        let limit = measures * STEPS_PER_MEASURE;
        DrumPattern {
            name: self.name.clone(),
            measures,
            events: self.events.iter().copied().filter(|e| e.step < limit).collect(),
        }
    }
}

pub fn parse_drum_pattern(text: &str, name: &str, file: impl AsRef<Path>) -> Result<DrumPattern, MidiError> {
    let err = |line: usize, message: String| MidiError::Parse {
        file: file.as_ref().to_path_buf(),
        line,
        message,
    };
    let mut measures = None;
    let mut events = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields[0] == "measures" {
            if measures.is_some() {
                return Err(err(lineno, "duplicate `measures` header".into()));
            }
            let n: u32 = fields
                .get(1)
                .and_then(|v| v.parse().ok())
                .filter(|n| *n > 0 && fields.len() == 2)
                .ok_or_else(|| err(lineno, format!("bad header `{line}`")))?;
            measures = Some(n);
            continue;
        }
        let Some(m) = measures else {
            return Err(err(lineno, "event before `measures N` header".into()));
        };
        if fields.len() != 3 {
            return Err(err(lineno, format!("expected `step pitch velocity`, got `{line}`")));
        }
        let num = |s: &str, what: &str, max: u32| -> Result<u32, MidiError> {
            s.parse::<u32>()
                .ok()
                .filter(|v| *v <= max)
                .ok_or_else(|| err(lineno, format!("bad {what} `{s}`")))
        };
        let step = num(fields[0], "step", u32::MAX)?;
        if step >= m * STEPS_PER_MEASURE {
            return Err(err(
                lineno,
                format!("step {step} outside a {m}-measure pattern"),
            ));
        }
        let pitch = num(fields[1], "pitch", 127)? as u8;
        let velocity = num(fields[2], "velocity", 127)? as u8;
        events.push(DrumEvent {
            step,
            pitch,
            velocity,
        });
    }
    let measures = measures.ok_or_else(|| err(0, "missing `measures N` header".into()))?;
    events.sort_by_key(|e| (e.step, e.pitch));
    Ok(DrumPattern {
        name: name.to_string(),
        measures,
        events,
    })
}

const BUILTIN: [(&str, &str); 3] = [
    ("rock", include_str!("../../assets/drums/rock.drum")),
    ("halftime", include_str!("../../assets/drums/halftime.drum")),
    ("shuffle", include_str!("../../assets/drums/shuffle.drum")),
];

/// Patterns shipped with the crate.
pub fn builtin_drum_library() -> BTreeMap<String, DrumPattern> {
    BUILTIN
        .iter()
        .map(|(name, text)| {
            let pattern = parse_drum_pattern(text, name, format!("<builtin {name}>"))
                .expect("builtin drum patterns parse");
            (name.to_string(), pattern)
        })
        .collect()
}

/// Loads every `*.drum` file in `dir`, keyed by file stem.
pub fn load_drum_library(dir: impl AsRef<Path>) -> Result<BTreeMap<String, DrumPattern>, MidiError> {
    let dir = dir.as_ref();
    let io = |source| MidiError::Io {
        path: dir.to_path_buf(),
        source,
    };
    let mut library = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("drum") || !path.is_file() {
            continue;
        }
        let name = path
            .file_stem()
            .and_then(|s| s.to_str())
            .unwrap_or_default()
            .to_string();
        let text = std::fs::read_to_string(&path).map_err(|source| MidiError::Io {
            path: path.clone(),
            source,
        })?;
        let pattern = parse_drum_pattern(&text, &name, &path)?;
        library.insert(name, pattern);
    }
    Ok(library)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_of_one() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("rock.drum"), "measures 1\n0 36 100\n4 38 100\n").unwrap();
        std::fs::write(dir.path().join("README"), "not a pattern").unwrap();
        let lib = load_drum_library(dir.path()).unwrap();
        assert_eq!(lib.len(), 1);
        assert_eq!(lib["rock"].events.len(), 2);
    }

    #[test]
    fn offset_out_of_range() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("bad.drum"), "measures 1\n0 36 100\n16 38 100\n").unwrap();
        match load_drum_library(dir.path()) {
            Err(MidiError::Parse { line, file, .. }) => {
                assert_eq!(line, 3);
                assert!(file.ends_with("bad.drum"));
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn empty_directory() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_drum_library(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn header_rules() {
        assert!(parse_drum_pattern("0 36 100\n", "x", "x.drum").is_err());
        assert!(parse_drum_pattern("measures 0\n", "x", "x.drum").is_err());
        assert!(parse_drum_pattern("measures 2\n20 36 128\n", "x", "x.drum").is_err());
        let p = parse_drum_pattern("# comment\nmeasures 2\n\n20 42 60 # hat\n", "x", "x.drum").unwrap();
        assert_eq!(p.length_steps(), 32);
        assert_eq!(p.truncated(1).events.len(), 0);
    }

    #[test]
    fn builtins_parse() {
        let lib = builtin_drum_library();
        assert_eq!(lib.keys().collect::<Vec<_>>(), vec!["halftime", "rock", "shuffle"]);
        assert_eq!(lib["halftime"].measures, 2);
        assert!(lib.values().all(|p| p.events.iter().all(|e| e.step < p.length_steps())));
    }
}
