//! Song assembly from per-section clips and a structure template.
//!
//! Template text is a run of section labels optionally followed by
//! `;`-separated per-label overrides:
//!
//! ```text
//! AABA
//! ABABCBB; A measures=8 drums=rock; B measures=4 melody=off
//! AABA; B melody=1100
//! ```
//!
//! `melody` takes `on`, `off`, or one `0`/`1` flag per measure.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::encoder::{decode, EncodeError, EncodedSequence};
use crate::midi::{write_midi, DrumPattern, MidiMeta, PlacedPattern, Programs};
use crate::sampler::{GateSchedule, MAX_SECTION_MEASURES, MIN_SECTION_MEASURES};
use crate::score::{Score, STEPS_PER_MEASURE};

#[derive(Debug, thiserror::Error)]
pub enum AssembleError {
    #[error("bad template: {0}")]
    BadTemplate(String),
    #[error("no clip supplied for section {0}")]
    MissingClip(char),
    #[error("clip for section {label} has {actual} steps, expected {expected}")]
    LengthMismatch { label: char, expected: u32, actual: u32 },
    #[error(transparent)]
    Encode(#[from] EncodeError),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SectionSpec {
    pub measures: u32,
    pub drums: Option<String>,
    pub melody: GateSchedule,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TemplateDefaults {
    pub measures: u32,
    pub drums: Option<String>,
}

impl Default for TemplateDefaults {
    fn default() -> Self {
        TemplateDefaults {
            measures: 8,
            drums: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SongTemplate {
    /// Original template text.
    pub text: String,
    pub sections: Vec<char>,
    pub specs: BTreeMap<char, SectionSpec>,
}

fn bad(msg: impl Into<String>) -> AssembleError {
    AssembleError::BadTemplate(msg.into())
}

fn parse_melody(value: &str, measures: u32) -> Result<GateSchedule, AssembleError> {
    match value {
        "on" => Ok(GateSchedule::AlwaysOn),
        "off" => Ok(GateSchedule::AlwaysOff),
        bits if !bits.is_empty() && bits.chars().all(|c| c == '0' || c == '1') => {
            if bits.len() != measures as usize {
                return Err(bad(format!(
                    "melody pattern {bits} has {} flags for {measures} measures",
                    bits.len()
                )));
            }
            Ok(GateSchedule::from_measures(
                &bits.chars().map(|c| c == '1').collect::<Vec<_>>(),
            ))
        }
        other => Err(bad(format!("melody must be on, off or 0/1 flags, got {other:?}"))),
    }
}

pub fn parse_template(text: &str, defaults: &TemplateDefaults) -> Result<SongTemplate, AssembleError> {
    let mut parts = text.split(';');
    let structure = parts.next().unwrap_or("").trim();
    if structure.is_empty() {
        return Err(bad("empty structure"));
    }
    if let Some(c) = structure.chars().find(|c| !c.is_ascii_uppercase()) {
        return Err(bad(format!("section labels must be A-Z, found {c:?}")));
    }
    let sections: Vec<char> = structure.chars().collect();
    let mut specs: BTreeMap<char, SectionSpec> = BTreeMap::new();
    let mut melody_text: BTreeMap<char, String> = BTreeMap::new();
    for &label in &sections {
        specs.entry(label).or_insert_with(|| SectionSpec {
            measures: defaults.measures,
            drums: defaults.drums.clone(),
            melody: GateSchedule::AlwaysOn,
        });
    }

    for clause in parts {
        let mut words = clause.split_whitespace();
        let Some(label_text) = words.next() else {
            continue;
        };
        let mut chars = label_text.chars();
        let label = match (chars.next(), chars.next()) {
            (Some(c), None) if c.is_ascii_uppercase() => c,
            _ => return Err(bad(format!("override must start with a section label, got {label_text:?}"))),
        };
        let spec = specs
            .get_mut(&label)
            .ok_or_else(|| bad(format!("override for {label}, which is not in {structure}")))?;
        for word in words {
            let (key, value) = word
                .split_once('=')
                .ok_or_else(|| bad(format!("expected key=value, got {word:?}")))?;
            match key {
                "measures" => {
                    spec.measures = value
                        .parse()
                        .map_err(|_| bad(format!("measures must be a number, got {value:?}")))?;
                }
                "drums" => {
                    spec.drums = match value {
                        "none" | "" => None,
                        name => Some(name.to_string()),
                    };
                }
                "melody" => {
                    melody_text.insert(label, value.to_string());
                }
                other => return Err(bad(format!("unknown option {other:?}"))),
            }
        }
    }

    for (label, spec) in specs.iter_mut() {
        if !(MIN_SECTION_MEASURES..=MAX_SECTION_MEASURES).contains(&spec.measures) {
            return Err(bad(format!(
                "section {label} has {} measures; allowed {MIN_SECTION_MEASURES} to {MAX_SECTION_MEASURES}",
                spec.measures
            )));
        }
        if let Some(m) = melody_text.get(label) {
            spec.melody = parse_melody(m, spec.measures)?;
        }
    }

    Ok(SongTemplate {
        text: text.trim().to_string(),
        sections,
        specs,
    })
}

impl SongTemplate {
    /// Labels in order of first appearance.
    pub fn distinct_labels(&self) -> Vec<char> {
        let mut out = Vec::new();
        for &l in &self.sections {
            if !out.contains(&l) {
                out.push(l);
            }
        }
        out
    }

    pub fn spec(&self, label: char) -> &SectionSpec {
        &self.specs[&label]
    }

    pub fn total_measures(&self) -> u32 {
        self.sections.iter().map(|l| self.specs[l].measures).sum()
    }

    /// First measure of each section.
    pub fn section_starts(&self) -> Vec<u32> {
        let mut start = 0;
        self.sections
            .iter()
            .map(|l| {
                let s = start;
                start += self.specs[l].measures;
                s
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SongDraft {
    pub template: SongTemplate,
    pub clips: BTreeMap<char, EncodedSequence>,
    pub score: Score,
    pub drums: Vec<PlacedPattern>,
    pub warnings: Vec<String>,
}

/// Repeats `pattern` from `start_measure` to fill `measures`, cutting the
/// last copy at the section end.
pub fn tile_drums(pattern: &DrumPattern, start_measure: u32, measures: u32) -> Vec<PlacedPattern> {
    let mut out = Vec::new();
    if pattern.measures == 0 {
        return out;
    }
    let mut offset = 0;
    while offset < measures {
        out.push(PlacedPattern {
            pattern: pattern.truncated(measures - offset),
            start_measure: start_measure + offset,
        });
        offset += pattern.measures;
    }
    out
}

pub fn assemble(
    template: &SongTemplate,
    clips: &BTreeMap<char, EncodedSequence>,
    drum_library: &BTreeMap<String, DrumPattern>,
) -> Result<SongDraft, AssembleError> {
    let mut section_scores: BTreeMap<char, Score> = BTreeMap::new();
    for label in template.distinct_labels() {
        let clip = clips.get(&label).ok_or(AssembleError::MissingClip(label))?;
        let expected = template.spec(label).measures * STEPS_PER_MEASURE;
        let actual = clip.step_count() as u32;
        if actual != expected || clip.symbols.last().is_some_and(|s| *s != crate::encoder::Symbol::NxtStep) {
            return Err(AssembleError::LengthMismatch { label, expected, actual });
        }
        section_scores.insert(label, decode(&clip.symbols)?);
    }

    let mut score = Score::empty(0);
    let mut drums = Vec::new();
    let mut warnings = Vec::new();
    for (&label, start) in template.sections.iter().zip(template.section_starts()) {
        score = score.concat(&section_scores[&label]);
        let spec = template.spec(label);
        if let Some(name) = &spec.drums {
            match drum_library.get(name) {
                Some(pattern) => drums.extend(tile_drums(pattern, start, spec.measures)),
                None => {
                    let w = format!("drum pattern {name:?} for section {label} not found; section left without drums");
                    if !warnings.contains(&w) {
                        warnings.push(w);
                    }
                }
            }
        }
    }

    Ok(SongDraft {
        template: template.clone(),
        clips: template
            .distinct_labels()
            .into_iter()
            .map(|l| (l, clips[&l].clone()))
            .collect(),
        score,
        drums,
        warnings,
    })
}

pub fn render_song(draft: &SongDraft, meta: &MidiMeta, programs: &Programs) -> Vec<u8> {
    write_midi(&draft.score, meta, programs, &draft.drums)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn template_examples() {
        let d = TemplateDefaults::default();
        let t = parse_template("AABA", &d).unwrap();
        assert_eq!(t.sections.len(), 4);
        assert_eq!(t.distinct_labels(), vec!['A', 'B']);
        let t = parse_template("ABABCBB", &d).unwrap();
        assert_eq!(t.sections.len(), 7);
        assert_eq!(t.distinct_labels().len(), 3);
        assert!(matches!(parse_template("a1", &d), Err(AssembleError::BadTemplate(_))));
        assert!(matches!(parse_template("", &d), Err(AssembleError::BadTemplate(_))));
    }

    #[test]
    fn overrides() {
        let d = TemplateDefaults {
            measures: 8,
            drums: Some("rock".into()),
        };
        let t = parse_template("AABA; B measures=4 drums=none melody=0110", &d).unwrap();
        assert_eq!(t.spec('A').measures, 8);
        assert_eq!(t.spec('A').drums.as_deref(), Some("rock"));
        assert_eq!(t.spec('B').measures, 4);
        assert_eq!(t.spec('B').drums, None);
        assert!(!t.spec('B').melody.at(0) && t.spec('B').melody.at(16));
        assert_eq!(t.total_measures(), 28);
        assert_eq!(t.section_starts(), vec![0, 8, 16, 20]);

        for bad_text in [
            "AB; C measures=4",
            "AB; A measures=3",
            "AB; A measures=17",
            "AB; A tempo=3",
            "AB; A melody=101",
            "AB; A measures",
            "AB; ab measures=4",
        ] {
            assert!(parse_template(bad_text, &d).is_err(), "{bad_text}");
        }
    }

    #[test]
    fn drum_tiling_stays_inside_section() {
        let pattern = DrumPattern {
            name: "x".into(),
            measures: 3,
            events: (0..48).map(|s| crate::midi::DrumEvent { step: s, pitch: 36, velocity: 90 }).collect(),
        };
        let placed = tile_drums(&pattern, 4, 8);
        assert_eq!(placed.iter().map(|p| p.start_measure).collect::<Vec<_>>(), vec![4, 7, 10]);
        assert_eq!(placed[2].pattern.measures, 2);
        let end = placed
            .iter()
            .flat_map(|p| p.pattern.events.iter().map(move |e| p.start_measure * 16 + e.step))
            .max()
            .unwrap();
        assert!(end < 12 * 16);
    }
}
