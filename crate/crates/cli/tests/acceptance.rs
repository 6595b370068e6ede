//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use bandsmith_cli::{cmd_clips, cmd_compose};
use bandsmith_core::dataset::{augment, global_channel_means, CorpusEntry, TokenStream};
use bandsmith_core::encoder::{decode, encode, EncodedSequence, Symbol, Vocabulary};
use bandsmith_core::neural::{
    clip_gradients, evaluate, loss_and_grads, save_checkpoint, train, AdamState, Checkpoint, Dropout, NetworkParams,
    RnnState, TrainConfig,
};
use bandsmith_core::pipeline::{compose, Model, StudioConfig};
use bandsmith_core::sampler::{generate_section, generate_section_observed, GateSchedule, GenerationConfig};
use bandsmith_core::score::{ChannelId, Key, Note, Pitch, Score};
use bandsmith_core::workspace::Workspace;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn p(v: i32) -> Pitch {
    Pitch::new(v).unwrap()
}

fn note(pitch: i32, onset: u32, duration: u32) -> Note {
    Note::new(p(pitch), onset, duration).unwrap()
}

// C3 = 48, so C5 = 72.
fn excerpt_score() -> Score {
    let melody = vec![note(79, 1, 1), note(77, 2, 1), note(76, 3, 1)];
    let chords = vec![
        note(72, 0, 2),
        note(67, 0, 2),
        note(64, 0, 2),
        note(72, 2, 2),
        note(67, 2, 2),
        note(64, 2, 2),
    ];
    let bass = vec![note(48, 0, 3), note(48, 3, 1)];
    Score::new([melody, chords, bass], 4).unwrap()
}

fn golden_encoding() -> Outcome {
    use Symbol::*;
    let (c5, g4, e4, c3, g5, f5, e5) = (p(72), p(67), p(64), p(48), p(79), p(77), p(76));
    let expected = vec![
        NxtChnl, NewNote(c5), NewNote(g4), NewNote(e4), NxtChnl, NewNote(c3), NxtStep,
        NewNote(g5), NxtChnl, ContNote(c5), ContNote(g4), ContNote(e4), NxtChnl, ContNote(c3), NxtStep,
        NewNote(f5), NxtChnl, NewNote(c5), NewNote(g4), NewNote(e4), NxtChnl, ContNote(c3), NxtStep,
        NewNote(e5), NxtChnl, ContNote(c5), ContNote(g4), ContNote(e4), NxtChnl, NewNote(c3),
    ];
    check(expected.len() == 30, "golden list is not 30 symbols")?;
    let score = excerpt_score();
    let encoded = encode(&score);
    check(encoded.symbols.last() == Some(&NxtStep), "missing terminator")?;
    let stripped = &encoded.symbols[..encoded.symbols.len() - 1];
    if stripped != expected.as_slice() {
        let at = stripped.iter().zip(&expected).position(|(a, b)| a != b).unwrap_or(stripped.len().min(30));
        return Err(format!("sequence differs at position {} (len {})", at + 1, stripped.len()));
    }
    let mut with_term = expected.clone();
    with_term.push(NxtStep);
    check(decode(&with_term).map_err(|e| e.to_string())? == score, "decode does not reproduce the score")?;
    Ok("30 symbols exact; decode reproduces score".into())
}

fn vocabulary_size() -> Outcome {
    let vocab = Vocabulary::new(0, 127).map_err(|e| e.to_string())?;
    let size = vocab.size();
    check(size == 128 * 2 + 2, format!("size {size}"))?;
    for id in 0..size {
        let s = vocab.symbol_of(id).map_err(|e| e.to_string())?;
        let back = vocab.token_id(s).map_err(|e| e.to_string())?;
        check(back == id, format!("id {id} does not round trip"))?;
    }
    Ok(format!("|S| = {size}"))
}

/// Random valid score: up to 16 measures, at most `max_poly` notes sounding
/// per channel at any step.
fn random_score(rng: &mut ChaCha8Rng, max_poly: usize) -> Score {
    let measures = rng.gen_range(1..=16u32);
    let length = measures * 16;
    let mut channels: [Vec<Note>; 3] = Default::default();
    for (ci, notes) in channels.iter_mut().enumerate() {
        let (lo, hi) = [(55, 96), (40, 80), (24, 60)][ci];
        // (pitch, onset, end)
        let mut active: Vec<(i32, u32, u32)> = Vec::new();
        for step in 0..length {
            active.retain(|&(pitch, onset, end)| {
                if end > step {
                    true
                } else {
                    notes.push(note(pitch, onset, end - onset));
                    false
                }
            });
            let starts = rng.gen_range(0..=max_poly - active.len().min(max_poly));
            let starts = if rng.gen_bool(0.5) { 0 } else { starts };
            for _ in 0..starts {
                let pitch = rng.gen_range(lo..=hi);
                if active.iter().any(|a| a.0 == pitch) {
                    continue;
                }
                let dur = rng.gen_range(1..=length - step).min(rng.gen_range(1..=24));
                active.push((pitch, step, step + dur));
            }
        }
        for (pitch, onset, end) in active {
            notes.push(note(pitch, onset, end - onset));
        }
    }
    Score::new(channels, length).unwrap()
}

fn max_polyphony(score: &Score) -> usize {
    (0..score.length_steps())
        .flat_map(|s| ChannelId::ALL.map(|c| score.sounding_at(c, s).len()))
        .max()
        .unwrap_or(0)
}

fn round_trip() -> Outcome {
    let results: Vec<(bool, usize, usize)> = (0..10_000u64)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + i);
            let score = random_score(&mut rng, 6);
            let ok = decode(&encode(&score).symbols).map(|s| s == score).unwrap_or(false);
            (ok, max_polyphony(&score), score.channels().iter().map(Vec::len).sum())
        })
        .collect();
    let failures = results.iter().filter(|r| !r.0).count();
    let poly = results.iter().map(|r| r.1).max().unwrap_or(0);
    let notes: usize = results.iter().map(|r| r.2).sum();
    check(poly <= 6, format!("generator produced polyphony {poly}"))?;
    check(failures == 0, format!("{failures} of 10000 scores failed"))?;
    Ok(format!("10000 scores, {notes} notes, max polyphony {poly}, 0 failures"))
}

fn augmentation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let score = random_score(&mut rng, 3);
    let entry = CorpusEntry {
        id: "song".into(),
        score: score.clone(),
        key: None,
        source: "song.mid".into(),
    };
    // With the song's own means as targets, octave alignment is the identity.
    let means = global_channel_means(std::slice::from_ref(&entry));
    let out = augment(&entry, &means, &Vocabulary::full()).map_err(|e| e.to_string())?;
    check(out.sequences.len() == 12, format!("{} sequences", out.sequences.len()))?;
    let mut shifts: Vec<i32> = out.sequences.iter().map(|(k, _)| *k).collect();
    shifts.sort_unstable();
    check(shifts == (-5..=6).collect::<Vec<_>>(), format!("shifts {shifts:?}"))?;
    for (k, seq) in &out.sequences {
        let decoded = decode(&seq.symbols).map_err(|e| e.to_string())?;
        let expected: [Vec<Note>; 3] = std::array::from_fn(|c| {
            score.channels()[c]
                .iter()
                .map(|n| note(n.pitch.value() as i32 + k, n.onset, n.duration))
                .collect()
        });
        let expected = Score::new(expected, score.length_steps()).unwrap();
        check(decoded == expected, format!("copy {k:+} is not a {k:+} semitone transposition"))?;
    }
    Ok("12 sequences, shifts -5..=6, each an exact transposition".into())
}

fn gradient_check() -> Outcome {
    use bandsmith_core::dataset::{Input, TrainingBatch, Window};
    let mut params = NetworkParams::init(6, 4, 2, 0.5, 1.0, &mut ChaCha8Rng::seed_from_u64(3));
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut window = |len: usize, valid: usize, reset: bool| Window {
        inputs: (0..len)
            .map(|i| Input {
                token: if i == 0 && reset { None } else { Some(rng.gen_range(0..6)) },
                features: std::array::from_fn(|_| if rng.gen_bool(0.5) { 1.0 } else { 0.0 }),
            })
            .collect(),
        targets: (0..len).map(|_| rng.gen_range(0..6)).collect(),
        mask: (0..len).map(|i| i < valid).collect(),
        reset,
    };
    let batch = TrainingBatch {
        lanes: vec![window(6, 6, true), window(6, 4, false)],
    };
    let mut state = RnnState::for_params(&params, 2);
    for v in state.c.iter_mut().chain(state.h.iter_mut()) {
        v.iter_mut().for_each(|x| *x = rng.gen_range(-0.5..0.5));
    }
    let analytic: Vec<f64> = loss_and_grads(&params, &batch, &state, Dropout::Off)
        .map_err(|e| e.to_string())?
        .grads
        .tensors()
        .iter()
        .flat_map(|(_, t)| t.to_vec())
        .collect();
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, &a) in analytic.iter().enumerate() {
        let nudge = |params: &mut NetworkParams, delta: f64| {
            let mut offset = 0;
            for t in params.tensors_mut() {
                if k < offset + t.len() {
                    t[k - offset] += delta;
                    return;
                }
                offset += t.len();
            }
        };
        nudge(&mut params, h);
        let plus = loss_and_grads(&params, &batch, &state, Dropout::Off).unwrap().loss;
        nudge(&mut params, -2.0 * h);
        let minus = loss_and_grads(&params, &batch, &state, Dropout::Off).unwrap().loss;
        nudge(&mut params, h);
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8));
    }
    check(worst <= 1e-4, format!("max relative error {worst:.3e}"))?;
    Ok(format!("{} parameters, max relative error {worst:.2e} <= 1e-4", analytic.len()))
}

fn clipping() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let template = NetworkParams::zeros(6, 4, 2);
    let mut worst: f64 = 0.0;
    let mut clipped = 0;
    for trial in 0..1000 {
        let mut grads = template.clone();
        let scale = 10f64.powf(rng.gen_range(-3.0..3.0));
        for t in grads.tensors_mut() {
            t.iter_mut().for_each(|x| *x = rng.gen_range(-1.0..1.0) * scale);
        }
        let before: Vec<f64> = grads.tensors().iter().flat_map(|(_, t)| t.to_vec()).collect();
        let norm_before = before.iter().map(|x| x * x).sum::<f64>().sqrt();
        clip_gradients(&mut grads, 1.0).map_err(|e| e.to_string())?;
        let after: Vec<f64> = grads.tensors().iter().flat_map(|(_, t)| t.to_vec()).collect();
        let norm_after = after.iter().map(|x| x * x).sum::<f64>().sqrt();
        check(norm_after <= 1.0 + 1e-12, format!("trial {trial}: norm {norm_after}"))?;
        if norm_before <= 1.0 {
            check(after == before, format!("trial {trial}: gradient below the bound was changed"))?;
        } else {
            clipped += 1;
            check((norm_after - 1.0).abs() <= 1e-12, format!("trial {trial}: clipped norm {norm_after}"))?;
            let ratio = norm_after / norm_before;
            for (a, b) in after.iter().zip(&before) {
                check((a - b * ratio).abs() <= 1e-12 * b.abs().max(1.0), format!("trial {trial}: direction changed"))?;
            }
        }
        worst = worst.max(norm_after);
    }
    Ok(format!("1000 trials ({clipped} clipped), max post-clip norm {worst:.15}"))
}

fn overfit_score() -> Score {
    let mut melody = Vec::new();
    let mut chords = Vec::new();
    let mut bass = Vec::new();
    let roots = [48, 53, 55, 48];
    let tune = [72, 74, 76, 79, 77, 76, 74, 72];
    for (m, &root) in roots.iter().enumerate() {
        let base = m as u32 * 16;
        for (i, off) in [0, 4, 7].into_iter().enumerate() {
            chords.push(note(root + 12 + off + if i == 0 { 12 } else { 0 }, base, 8));
            chords.push(note(root + 12 + off + if i == 0 { 12 } else { 0 }, base + 8, 8));
        }
        bass.push(note(root, base, 6));
        bass.push(note(root + 7, base + 8, 4));
        bass.push(note(root, base + 12, 4));
        if m != 2 {
            for (i, &t) in tune.iter().enumerate() {
                melody.push(note(t + m as i32, base + i as u32 * 2, 2));
            }
        }
    }
    Score::new([melody, chords, bass], 64).unwrap()
}

fn overfit() -> Outcome {
    let score = overfit_score();
    let vocab = Vocabulary::new(36, 96).map_err(|e| e.to_string())?;
    let sequence = encode(&score);
    let stream = TokenStream::from_sequence(&sequence, &vocab).map_err(|e| e.to_string())?;
    let config = TrainConfig {
        layers: 3,
        hidden: 32,
        dropout: 0.0,
        learning_rate: 1e-2,
        window: 128,
        batch: 1,
        max_epochs: 1500,
        patience: 1500,
        seed: 5,
        init_scale: 0.1,
        target_train_loss: Some(0.005),
        ..TrainConfig::default()
    };
    let init = NetworkParams::init(vocab.size(), 32, 3, config.init_scale, config.forget_bias, &mut ChaCha8Rng::seed_from_u64(5));
    let streams = vec![stream];
    let outcome = train(init, None, &streams, &streams, &config, |_| {}).map_err(|e| e.to_string())?;
    let loss = evaluate(&outcome.best_params, &streams, config.window, 1).map_err(|e| e.to_string())?;
    check(loss < 0.05, format!("loss {loss:.4} nats/symbol after {} epochs", outcome.log.len()))?;

    let generation = GenerationConfig {
        greedy: true,
        melody_gate: GateSchedule::from_score(&score),
        ..GenerationConfig::default()
    };
    let first_step = sequence.prefix_steps(1);
    let generated = generate_section(&outcome.best_params, &vocab, Some(&first_step), 4, &generation)
        .map_err(|e| e.to_string())?;
    let diverged = generated.symbols.iter().zip(&sequence.symbols).position(|(a, b)| a != b);
    check(
        generated.symbols == sequence.symbols,
        format!("greedy output diverges at symbol {diverged:?} of {}", sequence.symbols.len()),
    )?;
    Ok(format!(
        "{} symbols, loss {loss:.4} nats/symbol after {} epochs; greedy reproduction exact",
        sequence.symbols.len(),
        outcome.log.len()
    ))
}

/// Small untrained network: near-uniform outputs exercise every branch of
/// the mask.
fn random_model(vocab: &Vocabulary, seed: u64) -> NetworkParams {
    NetworkParams::init(vocab.size(), 16, 2, 0.3, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

fn key_mask() -> Outcome {
    let vocab = Vocabulary::new(24, 100).map_err(|e| e.to_string())?;
    let params = random_model(&vocab, 8);
    let c_major = [0u8, 2, 4, 5, 7, 9, 11];
    let key: Key = "C major".parse().map_err(|e: bandsmith_core::score::ScoreError| e.to_string())?;
    let results: Vec<Result<(usize, usize, f64), String>> = (0..1000u64)
        .into_par_iter()
        .map(|i| {
            let config = GenerationConfig {
                key: Some(key),
                seed: 1000 + i,
                temperature: [0.7, 1.0, 1.5][i as usize % 3],
                ..GenerationConfig::default()
            };
            let mut worst_sum: f64 = 0.0;
            let mut leaked = 0;
            let mut observer = |e: &bandsmith_core::sampler::SampleEvent| {
                worst_sum = worst_sum.max((e.probs.iter().sum::<f64>() - 1.0).abs());
                for (id, (&allowed, &q)) in e.mask.iter().zip(e.probs).enumerate() {
                    if !allowed && q != 0.0 {
                        leaked += 1;
                    }
                    if let Ok(Symbol::NewNote(pitch)) = vocab.symbol_of(id) {
                        if q > 0.0 && !c_major.contains(&(pitch.value() % 12)) {
                            leaked += 1;
                        }
                    }
                }
            };
            let seq = generate_section_observed(&params, &vocab, None, 4, &config, &mut observer)
                .map_err(|e| format!("section {i}: {e}"))?;
            let mut notes = 0;
            let mut outside = 0;
            for s in &seq.symbols {
                if let Symbol::NewNote(pitch) = s {
                    notes += 1;
                    if !c_major.contains(&(pitch.value() % 12)) {
                        outside += 1;
                    }
                }
            }
            if leaked > 0 {
                return Err(format!("section {i}: {leaked} masked entries with probability"));
            }
            Ok((notes, outside, worst_sum))
        })
        .collect();
    let (mut notes, mut outside, mut worst) = (0, 0, 0.0f64);
    for r in results {
        let (n, o, w) = r?;
        notes += n;
        outside += o;
        worst = worst.max(w);
    }
    check(outside == 0, format!("{outside} NewNote tokens outside C major"))?;
    check(worst <= 1e-9, format!("distribution sum off by {worst:.3e}"))?;
    check(notes > 0, "no notes generated")?;
    Ok(format!("1000 sections, {notes} NewNote tokens, 0 outside key, max |sum-1| {worst:.1e}"))
}

fn grammar_safety() -> Outcome {
    let vocab = Vocabulary::full();
    let params = random_model(&vocab, 9);
    let seed_score = overfit_score();
    let seed = encode(&seed_score).prefix_steps(32);
    let failures: Vec<String> = (0..1000u64)
        .into_par_iter()
        .filter_map(|i| {
            let measures = 4 + (i % 3) as u32 * 2;
            let gate = match i % 4 {
                0 => GateSchedule::AlwaysOn,
                1 => GateSchedule::AlwaysOff,
                2 => GateSchedule::from_measures(&[true, false]),
                _ => GateSchedule::from_score(&seed_score),
            };
            let config = GenerationConfig {
                seed: 50_000 + i,
                temperature: [0.5, 1.0, 2.0][i as usize % 3],
                melody_gate: gate,
                ..GenerationConfig::default()
            };
            let seeded = i % 5 == 0;
            let result = generate_section(&params, &vocab, seeded.then_some(&seed), measures, &config);
            match result {
                Err(e) => Some(format!("section {i}: {e}")),
                Ok(seq) => match decode(&seq.symbols) {
                    Err(e) => Some(format!("section {i}: {e}")),
                    Ok(s) if s.length_steps() != measures * 16 => Some(format!("section {i}: {} steps", s.length_steps())),
                    Ok(_) => None,
                },
            }
        })
        .collect();
    check(failures.is_empty(), format!("{} failures, first: {}", failures.len(), failures.first().cloned().unwrap_or_default()))?;
    Ok("1000 sections decode without grammar errors".into())
}

fn write_checkpoint(path: &Path, vocab: &Vocabulary, seed: u64) {
    let params = random_model(vocab, seed);
    let ckpt = Checkpoint {
        adam: AdamState::new(&params, Default::default()),
        params,
        vocab: *vocab,
        config: TrainConfig {
            layers: 2,
            hidden: 16,
            ..TrainConfig::default()
        },
    };
    std::fs::write(path, save_checkpoint(&ckpt).unwrap()).unwrap();
}

fn steps_of(seq: &EncodedSequence, from: usize, to: usize) -> Vec<Symbol> {
    let start = seq.prefix_steps(from).len();
    let end = seq.prefix_steps(to).len();
    seq.symbols[start..end].to_vec()
}

fn assembly() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let ws = Workspace::open(dir.path()).map_err(|e| e.to_string())?;
    let vocab = Vocabulary::new(24, 100).unwrap();
    let ckpt = dir.path().join("m.ckpt");
    write_checkpoint(&ckpt, &vocab, 12);
    let model = Model::load(&ckpt).map_err(|e| e.to_string())?;
    let config = StudioConfig::default();
    let clips = bandsmith_core::pipeline::make_clips(&ws, &model, 2, 8, &config).map_err(|e| e.to_string())?;
    let seeds = BTreeMap::from([('A', clips[0].id.clone()), ('B', clips[1].id.clone())]);
    let song = compose(&ws, &model, "AABA", &seeds, &config).map_err(|e| e.to_string())?;
    let seq = encode(&song.score);
    check(song.score.length_steps() == 512, format!("{} steps", song.score.length_steps()))?;
    check(song.score.measures() == 32 && song.manifest.total_measures == 32, "not 32 measures")?;
    let a1 = steps_of(&seq, 0, 128);
    check(a1 == steps_of(&seq, 128, 256), "second A differs from first")?;
    check(a1 == steps_of(&seq, 384, 512), "last A differs from first")?;
    check(a1 != steps_of(&seq, 256, 384), "B equals A")?;
    for (label, start) in [('A', 0usize), ('B', 256)] {
        let clip = ws.load_clip(&seeds[&label]).map_err(|e| e.to_string())?;
        let prefix = clip.sequence.prefix_steps(32);
        check(
            steps_of(&seq, start, start + 32) == prefix.symbols,
            format!("section {label} lost its seed prefix"),
        )?;
    }
    let midi = std::fs::read(ws.song_path(&song.id, "mid").unwrap()).map_err(|e| e.to_string())?;
    let (reread, _) = bandsmith_core::midi::read_midi(&midi, &bandsmith_core::midi::ChannelMap::canonical())
        .map_err(|e| e.to_string())?;
    check(reread == song.score, "stored MIDI does not decode to the assembled score")?;
    Ok("AABA: 512 steps, 32 measures, repeats token-identical, 2-measure seed prefixes verbatim".into())
}

fn determinism() -> Outcome {
    let run = |root: &Path| -> Result<(Vec<Vec<u8>>, Vec<u8>), String> {
        let ws = Workspace::open(root).map_err(|e| e.to_string())?;
        let ckpt = ws.checkpoint_path("model");
        write_checkpoint(&ckpt, &Vocabulary::new(24, 100).unwrap(), 21);
        let mut config = StudioConfig::default();
        config.generation.seed = 314;
        config.generation.key = Some("G".parse().unwrap());
        let mut sink = Vec::new();
        let clips = cmd_clips(&ws, None, 4, 8, &config, &mut sink).map_err(|e| format!("{e:#}"))?;
        let clip_midi = clips
            .iter()
            .map(|c| std::fs::read(ws.clip_path(&c.id, "mid").unwrap()).map_err(|e| e.to_string()))
            .collect::<Result<Vec<_>, _>>()?;
        let seeds = BTreeMap::from([('A', clips[0].id.clone()), ('B', clips[2].id.clone())]);
        let song = cmd_compose(&ws, None, "AABA", &seeds, &config, &mut sink).map_err(|e| format!("{e:#}"))?;
        let song_midi = std::fs::read(ws.song_path(&song.id, "mid").unwrap()).map_err(|e| e.to_string())?;
        Ok((clip_midi, song_midi))
    };
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    let first = run(a.path())?;
    let second = run(b.path())?;
    check(first.0 == second.0, "clip MIDI differs between runs")?;
    check(first.1 == second.1, "song MIDI differs between runs")?;
    let distinct = first.0.iter().collect::<std::collections::BTreeSet<_>>().len();
    check(distinct == first.0.len(), "clips with different seeds are identical")?;
    Ok(format!("{} clip files and 1 song ({} bytes) byte-identical across runs", first.0.len(), first.1.len()))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("Golden encoding", golden_encoding),
        ("Vocabulary size", vocabulary_size),
        ("Round trip", round_trip),
        ("Augmentation count", augmentation),
        ("Gradient check", gradient_check),
        ("Gradient clipping", clipping),
        ("Overfit oracle", overfit),
        ("Key mask exactness", key_mask),
        ("Grammar safety", grammar_safety),
        ("Assembly", assembly),
        ("Determinism", determinism),
    ];
    let mut failed = 0;
    for (name, f) in criteria {
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS  {name}: {detail} ({secs:.1}s)"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name}: {detail} ({secs:.1}s)");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 11 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
