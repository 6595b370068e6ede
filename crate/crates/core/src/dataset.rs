//! Training corpus preparation: octave alignment, transposition
//! augmentation, song-level splits and windowed batches for truncated BPTT.

use std::path::{Path, PathBuf};
use std::sync::mpsc::{sync_channel, Receiver};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{encode, EncodedSequence, Vocabulary, FEATURE_DIM};
use crate::midi::{ChannelMap, TrackSelector};
use crate::score::{octave_shift_for, ChannelId, Key, Note, Score, ScoreError};

/// Transpositions applied to every song, in semitones.
pub const AUGMENT_SHIFTS: std::ops::RangeInclusive<i32> = -5..=6;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("need at least one song on each side of the split, got {songs} song(s)")]
    TooFewSongs { songs: usize },
    #[error("validation fraction {0} must be strictly between 0 and 1")]
    BadFraction(f64),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Score(#[from] ScoreError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusEntry {
    pub id: String,
    pub score: Score,
    #[serde(default)]
    pub key: Option<Key>,
    pub source: PathBuf,
}

/// One line of a corpus manifest: where a song lives and how its tracks map
/// onto the three channels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub melody_track: TrackSelector,
    pub chords_track: TrackSelector,
    pub bass_track: TrackSelector,
    #[serde(default)]
    pub key: Option<Key>,
    #[serde(default = "default_true")]
    pub include: bool,
}

fn default_true() -> bool {
    true
}

impl ManifestEntry {
    pub fn channel_map(&self) -> ChannelMap {
        ChannelMap {
            melody_track: self.melody_track.clone(),
            chords_track: self.chords_track.clone(),
            bass_track: self.bass_track.clone(),
        }
    }
}

/// Parses a JSON manifest (an array of entries). Relative paths are resolved
/// against `base_dir`.
pub fn parse_manifest(json: &str, base_dir: &Path) -> Result<Vec<ManifestEntry>, DatasetError> {
    let mut entries: Vec<ManifestEntry> =
        serde_json::from_str(json).map_err(|e| DatasetError::Manifest(e.to_string()))?;
    for entry in &mut entries {
        if entry.path.is_relative() {
            entry.path = base_dir.join(&entry.path);
        }
    }
    Ok(entries)
}

/// Per-channel mean pitch pooled over every note of the corpus.
pub fn global_channel_means(corpus: &[CorpusEntry]) -> [Option<f64>; 3] {
    std::array::from_fn(|c| {
        let (sum, count) = corpus
            .iter()
            .flat_map(|e| e.score.channels()[c].iter())
            .fold((0.0, 0usize), |(s, n), note| (s + note.pitch.value() as f64, n + 1));
        (count > 0).then(|| sum / count as f64)
    })
}

/// Octave-aligns every non-empty channel to its corpus-wide target mean.
pub fn align_octaves(score: &Score, means: &[Option<f64>; 3]) -> Result<Score, ScoreError> {
    let mut channels = score.channels().clone();
    for (notes, target) in channels.iter_mut().zip(means) {
        let Some(target) = *target else { continue };
        if let Some(k) = octave_shift_for(notes, target) {
            *notes = shift(notes, 12 * k)?;
        }
    }
    Score::new(channels, score.length_steps())
}

fn shift(notes: &[Note], semitones: i32) -> Result<Vec<Note>, ScoreError> {
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

fn channel_fits(notes: &[Note], vocab: &Vocabulary) -> bool {
    notes.iter().all(|n| vocab.contains(n.pitch))
}

/// Moves `notes` by `semitones`, then by one more octave if needed to land
/// inside the vocabulary.
fn transpose_into(notes: &[Note], semitones: i32, vocab: &Vocabulary) -> Option<Vec<Note>> {
    [0, -12, 12].iter().find_map(|&octave| {
        let moved = shift(notes, semitones + octave).ok()?;
        channel_fits(&moved, vocab).then_some(moved)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    /// `(semitone shift, encoding)` for each transposition kept.
    pub sequences: Vec<(i32, EncodedSequence)>,
    pub warnings: Vec<String>,
}

/// Octave-aligns a song and encodes its twelve transpositions.
///
/// A transposition that pushes a channel outside the vocabulary is retried
/// with that channel moved one octave back; if it still does not fit the
/// transposition is skipped with a warning.
pub fn augment(
    entry: &CorpusEntry,
    global_channel_means: &[Option<f64>; 3],
    vocab: &Vocabulary,
) -> Result<Augmented, DatasetError> {
    let aligned = align_octaves(&entry.score, global_channel_means)?;
    let mut sequences = Vec::with_capacity(12);
    let mut warnings = Vec::new();
    'shifts: for k in AUGMENT_SHIFTS {
        let mut channels: [Vec<Note>; 3] = Default::default();
        for channel in ChannelId::ALL {
            match transpose_into(aligned.channel(channel), k, vocab) {
                Some(notes) => channels[channel.index()] = notes,
                None => {
                    let msg = format!(
                        "{}: skipping transposition {k:+}: {channel} leaves pitch range {}..={}",
                        entry.id,
                        vocab.low(),
                        vocab.high()
                    );
                    warn!("{msg}");
                    warnings.push(msg);
                    continue 'shifts;
                }
            }
        }
        let score = Score::new(channels, aligned.length_steps())?;
        sequences.push((k, encode(&score)));
    }
    Ok(Augmented {
        sequences,
        warnings,
    })
}

/// Splits items into `(train, validation)` at item granularity.
///
/// The validation side gets `round(n * fraction)` items, at least one.
pub fn split<T: Clone>(items: &[T], validation_fraction: f64, seed: u64) -> Result<(Vec<T>, Vec<T>), DatasetError> {
    if !(validation_fraction > 0.0 && validation_fraction < 1.0) {
        return Err(DatasetError::BadFraction(validation_fraction));
    }
    let n = items.len();
    let n_val = ((n as f64 * validation_fraction).round() as usize).max(1);
    if n_val >= n {
        return Err(DatasetError::TooFewSongs { songs: n });
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut is_val = vec![false; n];
    for &i in &order[..n_val] {
        is_val[i] = true;
    }
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (item, v) in items.iter().zip(is_val) {
        if v {
            val.push(item.clone());
        } else {
            train.push(item.clone());
        }
    }
    Ok((train, val))
}

/// One network input: optional token (`None` = all-zero one-hot) and features.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Input {
    pub token: Option<usize>,
    pub features: [f64; FEATURE_DIM],
}

impl Input {
    pub const PAD: Input = Input {
        token: None,
        features: [0.0; FEATURE_DIM],
    };
}

/// Next-symbol training pairs for one song.
///
/// Position 0 sees an empty token with the first symbol's features and must
/// predict the first symbol; position `i > 0` sees symbol `i-1` and predicts
/// symbol `i`. A song of `n` symbols therefore yields `n` positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStream {
    pub inputs: Vec<Input>,
    pub targets: Vec<usize>,
}

impl TokenStream {
    pub fn from_sequence(seq: &EncodedSequence, vocab: &Vocabulary) -> Result<Self, crate::encoder::EncodeError> {
        let ids = seq.token_ids(vocab)?;
        let mut inputs = Vec::with_capacity(ids.len());
        for i in 0..ids.len() {
            let (token, feature) = if i == 0 {
                (None, seq.features[0])
            } else {
                (Some(ids[i - 1]), seq.features[i - 1])
            };
            inputs.push(Input {
                token,
                features: feature.as_array(),
            });
        }
        Ok(TokenStream {
            inputs,
            targets: ids,
        })
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub inputs: Vec<Input>,
    pub targets: Vec<usize>,
    /// False at padded positions, which are excluded from the loss.
    pub mask: Vec<bool>,
    /// Zero the recurrent state before this window.
    pub reset: bool,
}

impl Window {
    pub fn padding(len: usize) -> Self {
        Window {
            inputs: vec![Input::PAD; len],
            targets: vec![0; len],
            mask: vec![false; len],
            reset: false,
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }

    pub fn valid_positions(&self) -> usize {
        self.mask.iter().filter(|m| **m).count()
    }
}

/// Cuts a song into consecutive windows of length `window`, padding the last.
pub fn song_windows(stream: &TokenStream, window: usize) -> Vec<Window> {
    assert!(window >= 1);
    stream
        .inputs
        .chunks(window)
        .zip(stream.targets.chunks(window))
        .enumerate()
        .map(|(i, (inputs, targets))| {
            let mut w = Window {
                inputs: inputs.to_vec(),
                targets: targets.to_vec(),
                mask: vec![true; inputs.len()],
                reset: i == 0,
            };
            let pad = window - inputs.len();
            w.inputs.extend(std::iter::repeat_n(Input::PAD, pad));
            w.targets.extend(std::iter::repeat_n(0, pad));
            w.mask.extend(std::iter::repeat_n(false, pad));
            w
        })
        .collect()
}

/// One lane per batch row; consecutive batches continue each lane so the
/// recurrent state can carry over between windows of the same song.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingBatch {
    pub lanes: Vec<Window>,
}

impl TrainingBatch {
    pub fn window_len(&self) -> usize {
        self.lanes.first().map_or(0, Window::len)
    }

    pub fn valid_positions(&self) -> usize {
        self.lanes.iter().map(Window::valid_positions).sum()
    }
}

fn lay_out_lanes(streams: &[&TokenStream], window: usize, batch: usize) -> Vec<TrainingBatch> {
    let lanes = batch.min(streams.len()).max(1);
    let mut lane_windows: Vec<Vec<Window>> = vec![Vec::new(); lanes];
    for stream in streams {
        let windows = song_windows(stream, window);
        let shortest = (0..lanes)
            .min_by_key(|&l| (lane_windows[l].len(), l))
            .expect("at least one lane");
        lane_windows[shortest].extend(windows);
    }
    let n_batches = lane_windows.iter().map(Vec::len).max().unwrap_or(0);
    let mut lane_iters: Vec<_> = lane_windows.into_iter().map(Vec::into_iter).collect();
    (0..n_batches)
        .map(|_| TrainingBatch {
            lanes: lane_iters
                .iter_mut()
                .map(|it| it.next().unwrap_or_else(|| Window::padding(window)))
                .collect(),
        })
        .collect()
}

/// Shuffles songs (not windows) and packs them into `batch` lanes.
pub fn window_batches(streams: &[TokenStream], window: usize, batch: usize, seed: u64) -> Vec<TrainingBatch> {
    assert!(window >= 2 && batch >= 1, "window must be >= 2 and batch >= 1");
    let mut order: Vec<&TokenStream> = streams.iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    lay_out_lanes(&order, window, batch)
}

/// Same packing as [`window_batches`] without shuffling (for evaluation).
pub fn sequential_batches(streams: &[TokenStream], window: usize, batch: usize) -> Vec<TrainingBatch> {
    let order: Vec<&TokenStream> = streams.iter().collect();
    lay_out_lanes(&order, window, batch)
}

/// Prepares batches on a background thread; the receiver yields them in order.
///
/// `bound` limits how many prepared batches may wait in the channel.
pub fn spawn_batch_producer(
    streams: Vec<TokenStream>,
    window: usize,
    batch: usize,
    seed: u64,
    bound: usize,
) -> Receiver<TrainingBatch> {
    let (tx, rx) = sync_channel(bound.max(1));
    std::thread::spawn(move || {
        for b in window_batches(&streams, window, batch, seed) {
            if tx.send(b).is_err() {
                break;
            }
        }
    });
    rx
}
