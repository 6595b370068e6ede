use std::collections::BTreeMap;

use bandsmith_core::assembler::*;
use bandsmith_core::encoder::{encode, prefix_len_for_steps, EncodedSequence};
use bandsmith_core::midi::{
    duration_seconds, read_midi, smf::Smf, ChannelMap, DrumEvent, DrumPattern, MidiMeta, Programs,
};
use bandsmith_core::score::{Note, Pitch, Score};

fn n(p: i32, on: u32, d: u32) -> Note {
    Note::new(Pitch::new(p).unwrap(), on, d).unwrap()
}

/// A simple section: a melody note per beat, a held triad and a bass note per measure.
fn section(measures: u32, root: i32) -> EncodedSequence {
    let mut melody = Vec::new();
    let mut chords = Vec::new();
    let mut bass = Vec::new();
    for m in 0..measures {
        let base = m * 16;
        for beat in 0..4 {
            melody.push(n(root + 24 + [0, 2, 4, 7][beat as usize], base + beat * 4, 3));
        }
        for offset in [0, 4, 7] {
            chords.push(n(root + 12 + offset, base, 16));
        }
        bass.push(n(root, base, 8));
        bass.push(n(root + 7, base + 8, 8));
    }
    encode(&Score::new([melody, chords, bass], measures * 16).unwrap())
}

fn rock() -> DrumPattern {
    DrumPattern {
        name: "rock".into(),
        measures: 1,
        events: vec![
            DrumEvent { step: 0, pitch: 36, velocity: 100 },
            DrumEvent { step: 4, pitch: 38, velocity: 100 },
            DrumEvent { step: 8, pitch: 36, velocity: 100 },
            DrumEvent { step: 12, pitch: 38, velocity: 100 },
        ],
    }
}

fn section_tokens(score: &Score, starts: &[u32], measures: &[u32]) -> Vec<Vec<String>> {
    let all = encode(score).symbols;
    starts
        .iter()
        .zip(measures)
        .map(|(s, m)| {
            let a = prefix_len_for_steps(&all, (*s * 16) as usize);
            let b = prefix_len_for_steps(&all, ((*s + *m) * 16) as usize);
            all[a..b].iter().map(|x| x.to_string()).collect()
        })
        .collect()
}

#[test]
fn aaba_song_has_expected_shape() {
    let template = parse_template("AABA", &TemplateDefaults { measures: 8, drums: Some("rock".into()) }).unwrap();
    let clips = BTreeMap::from([('A', section(8, 48)), ('B', section(8, 53))]);
    let library = BTreeMap::from([("rock".to_string(), rock())]);
    let draft = assemble(&template, &clips, &library).unwrap();
    assert_eq!(draft.score.length_steps(), 512);
    assert_eq!(draft.score.measures(), 32);
    let tokens = section_tokens(&draft.score, &template.section_starts(), &[8, 8, 8, 8]);
    assert_eq!(tokens[0], tokens[1]);
    assert_eq!(tokens[0], tokens[3]);
    assert_ne!(tokens[0], tokens[2]);
    assert_eq!(draft.drums.len(), 32);
    assert!(draft.warnings.is_empty());

    let bytes = render_song(&draft, &MidiMeta::with_tempo(120.0), &Programs::default());
    assert!((duration_seconds(&bytes).unwrap() - 64.0).abs() < 1e-9);
    let (back, _) = read_midi(&bytes, &ChannelMap::canonical()).unwrap();
    assert_eq!(back, draft.score);
    assert_eq!(Smf::parse(&bytes).unwrap().tracks.len(), 5);
}

#[test]
fn single_section_is_identity() {
    let template = parse_template("A", &TemplateDefaults::default()).unwrap();
    let clip = section(8, 50);
    let draft = assemble(&template, &BTreeMap::from([('A', clip.clone())]), &BTreeMap::new()).unwrap();
    assert_eq!(encode(&draft.score).symbols, clip.symbols);
    let bytes = render_song(&draft, &MidiMeta::default(), &Programs::default());
    assert_eq!(Smf::parse(&bytes).unwrap().tracks.len(), 4);
}

#[test]
fn missing_drum_pattern_is_a_warning() {
    let template = parse_template("AA", &TemplateDefaults { measures: 4, drums: Some("jazz".into()) }).unwrap();
    let draft = assemble(&template, &BTreeMap::from([('A', section(4, 50))]), &BTreeMap::new()).unwrap();
    assert!(draft.drums.is_empty());
    assert_eq!(draft.warnings.len(), 1);
}

#[test]
fn clip_errors() {
    let template = parse_template("AB", &TemplateDefaults::default()).unwrap();
    let clips = BTreeMap::from([('A', section(8, 48)), ('B', section(7, 48))]);
    assert!(matches!(
        assemble(&template, &clips, &BTreeMap::new()),
        Err(AssembleError::LengthMismatch { label: 'B', expected: 128, actual: 112 })
    ));
    let clips = BTreeMap::from([('A', section(8, 48))]);
    assert!(matches!(assemble(&template, &clips, &BTreeMap::new()), Err(AssembleError::MissingClip('B'))));
}
