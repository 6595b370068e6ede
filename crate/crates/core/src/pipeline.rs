//! End-to-end operations over a [`Workspace`]: ingest a MIDI corpus, train,
//! generate clips, compose songs and verify stored token streams.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembler::{assemble, parse_template, render_song, AssembleError, TemplateDefaults};
use crate::dataset::{augment, global_channel_means, parse_manifest, split, CorpusEntry, DatasetError, TokenStream};
use crate::encoder::{decode, dump_symbols, encode, parse_symbols, EncodeError, EncodedSequence, Vocabulary};
use crate::midi::{builtin_drum_library, load_drum_library, read_midi, write_midi, MidiError, MidiMeta, Programs};
use crate::neural::{self, load_checkpoint, save_checkpoint, Checkpoint, NetworkParams, NeuralError, TrainConfig};
use crate::sampler::{generate_clips, generate_section, GenerationConfig, SampleError};
use crate::score::{Score, STEPS_PER_MEASURE};
use crate::workspace::{content_id, Clip, ClipMeta, SongManifest, Workspace, WorkspaceError};

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Workspace(#[from] WorkspaceError),
    #[error(transparent)]
    Midi(#[from] MidiError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Neural(#[from] NeuralError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Assemble(#[from] AssembleError),
    #[error(transparent)]
    Encode(#[from] EncodeError),
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("invalid config: {0}")]
    Config(String),
}

impl PipelineError {
    /// True for problems with the caller's input rather than the program.
    pub fn is_user_error(&self) -> bool {
        !matches!(
            self,
            PipelineError::Io { .. }
                | PipelineError::Neural(NeuralError::NonFiniteLoss | NeuralError::NonFiniteGradient)
                | PipelineError::Workspace(WorkspaceError::Io { .. })
        )
    }
}

type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> PipelineError + '_ {
    move |source| PipelineError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Everything a config file may set. Missing fields take defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudioConfig {
    pub train: TrainConfig,
    pub generation: GenerationConfig,
    /// Pitch range of the model vocabulary.
    pub pitch_low: u8,
    pub pitch_high: u8,
    pub tempo_bpm: f64,
    pub programs: Programs,
    /// Leading measures of a seed clip used to start a section.
    pub seed_measures: u32,
    /// Section length when the template does not say.
    pub section_measures: u32,
    /// Drum pattern for sections that do not name one.
    pub drums: Option<String>,
    /// Extra `*.drum` files; they override built-in patterns of the same name.
    pub drum_dir: Option<PathBuf>,
}

impl Default for StudioConfig {
    fn default() -> Self {
        StudioConfig {
            train: TrainConfig::default(),
            generation: GenerationConfig::default(),
            pitch_low: 0,
            pitch_high: 127,
            tempo_bpm: 120.0,
            programs: Programs::default(),
            seed_measures: 2,
            section_measures: 8,
            drums: Some("rock".to_string()),
            drum_dir: None,
        }
    }
}

impl StudioConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(io_err(path))?;
        let config: StudioConfig =
            serde_json::from_str(&text).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.generation.validate()?;
        self.vocabulary()?;
        if !(self.tempo_bpm > 0.0 && self.tempo_bpm.is_finite()) {
            return Err(PipelineError::Config("tempo_bpm must be positive".into()));
        }
        Ok(())
    }

    pub fn vocabulary(&self) -> Result<Vocabulary> {
        Vocabulary::new(self.pitch_low, self.pitch_high)
            .map_err(|e| PipelineError::Config(format!("pitch range: {e}")))
    }

    pub fn midi_meta(&self) -> MidiMeta {
        MidiMeta::with_tempo(self.tempo_bpm)
    }

    pub fn drum_library(&self) -> Result<BTreeMap<String, crate::midi::DrumPattern>> {
        let mut library = builtin_drum_library();
        if let Some(dir) = &self.drum_dir {
            library.extend(load_drum_library(dir)?);
        }
        Ok(library)
    }
}

// Ingestion.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestedSong {
    pub id: String,
    pub source: PathBuf,
    pub measures: u32,
    pub notes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Rejection {
    pub source: PathBuf,
    /// Short machine-readable cause, e.g. `NotCommonTime`.
    pub kind: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IngestReport {
    pub ingested: Vec<IngestedSong>,
    pub rejected: Vec<Rejection>,
}

impl IngestReport {
    pub fn summary(&self) -> String {
        let mut kinds: Vec<&str> = self.rejected.iter().map(|r| r.kind.as_str()).collect();
        kinds.sort_unstable();
        kinds.dedup();
        let mut s = format!("{} ingested, {} rejected", self.ingested.len(), self.rejected.len());
        if !kinds.is_empty() {
            s.push_str(&format!(" ({})", kinds.join(", ")));
        }
        s
    }
}

fn midi_error_kind(e: &MidiError) -> &'static str {
    match e {
        MidiError::Malformed(_) => "Malformed",
        MidiError::Unsupported(_) => "Unsupported",
        MidiError::NotCommonTime { .. } => "NotCommonTime",
        MidiError::MissingTrack(_) => "MissingTrack",
        MidiError::InvalidChannelMap(_) => "InvalidChannelMap",
        MidiError::Parse { .. } => "Parse",
        MidiError::Io { .. } => "Io",
        MidiError::Score(_) => "InvalidScore",
    }
}

/// Reads every included song of a manifest into the workspace corpus.
pub fn ingest(ws: &Workspace, manifest_path: &Path) -> Result<IngestReport> {
    let text = fs::read_to_string(manifest_path).map_err(io_err(manifest_path))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let entries = parse_manifest(&text, base)?;
    let results: Vec<Result<CorpusEntry, Rejection>> = entries
        .par_iter()
        .filter(|e| e.include)
        .map(|entry| {
            let reject = |e: MidiError| Rejection {
                source: entry.path.clone(),
                kind: midi_error_kind(&e).to_string(),
                message: e.to_string(),
            };
            let bytes = fs::read(&entry.path).map_err(|source| {
                reject(MidiError::Io {
                    path: entry.path.clone(),
                    source,
                })
            })?;
            let (score, _) = read_midi(&bytes, &entry.channel_map()).map_err(reject)?;
            let id = content_id(dump_symbols(&encode(&score).symbols).as_bytes());
            Ok(CorpusEntry {
                id,
                score,
                key: entry.key,
                source: entry.path.clone(),
            })
        })
        .collect();

    let mut report = IngestReport::default();
    for result in results {
        match result {
            Ok(entry) => {
                if report.ingested.iter().any(|s| s.id == entry.id) {
                    report.rejected.push(Rejection {
                        source: entry.source.clone(),
                        kind: "Duplicate".into(),
                        message: format!("same content as song {}", entry.id),
                    });
                    continue;
                }
                ws.save_corpus_entry(&entry)?;
                info!("ingested {} as {}", entry.source.display(), entry.id);
                report.ingested.push(IngestedSong {
                    id: entry.id.clone(),
                    source: entry.source.clone(),
                    measures: entry.score.measures(),
                    notes: entry.score.note_count(),
                });
            }
            Err(rejection) => {
                warn!("rejected {}: {}", rejection.source.display(), rejection.message);
                report.rejected.push(rejection);
            }
        }
    }
    Ok(report)
}

// Training.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub train_songs: usize,
    pub validation_songs: usize,
    pub train_sequences: usize,
    pub epochs: usize,
    pub best_epoch: usize,
    pub best_validation_loss: f64,
    pub warnings: Vec<String>,
}

/// Training and validation streams for a corpus.
///
/// Training songs contribute all transpositions; validation songs only their
/// untransposed copy. A single-song corpus is used for both sides.
pub fn prepare_streams(
    corpus: &[CorpusEntry],
    vocab: &Vocabulary,
    validation_fraction: f64,
    seed: u64,
) -> Result<(Vec<TokenStream>, Vec<TokenStream>, Vec<String>)> {
    let mut warnings = Vec::new();
    let (train_songs, val_songs) = match corpus.len() {
        0 => return Err(DatasetError::TooFewSongs { songs: 0 }.into()),
        1 => {
            warnings.push("corpus has a single song; it is used for validation as well".to_string());
            (corpus.to_vec(), corpus.to_vec())
        }
        _ => split(corpus, validation_fraction, seed)?,
    };
    let means = global_channel_means(corpus);
    let mut train_streams = Vec::new();
    for song in &train_songs {
        let aug = augment(song, &means, vocab)?;
        warnings.extend(aug.warnings);
        for (_, seq) in &aug.sequences {
            train_streams.push(TokenStream::from_sequence(seq, vocab)?);
        }
    }
    let mut val_streams = Vec::new();
    for song in &val_songs {
        let aug = augment(song, &means, vocab)?;
        if let Some((_, seq)) = aug.sequences.iter().find(|(k, _)| *k == 0).or(aug.sequences.first()) {
            val_streams.push(TokenStream::from_sequence(seq, vocab)?);
        }
    }
    if train_streams.is_empty() || val_streams.is_empty() {
        return Err(DatasetError::TooFewSongs { songs: corpus.len() }.into());
    }
    Ok((train_streams, val_streams, warnings))
}

pub fn train_corpus(
    ws: &Workspace,
    config: &StudioConfig,
    out: &Path,
    resume: Option<&Path>,
    mut on_epoch: impl FnMut(&neural::EpochRecord),
) -> Result<TrainReport> {
    config.validate()?;
    let _lock = ws.lock_training()?;
    let vocab = config.vocabulary()?;
    let corpus = ws.load_corpus()?;
    let tc = &config.train;
    let (train_streams, val_streams, warnings) = prepare_streams(&corpus, &vocab, tc.validation_fraction, tc.seed)?;
    for w in &warnings {
        warn!("{w}");
    }

    let (params, adam) = match resume {
        Some(path) => {
            let ckpt = load_checkpoint(&fs::read(path).map_err(io_err(path))?)?;
            ckpt.ensure_vocabulary(&vocab)?;
            if ckpt.params.num_layers() != tc.layers || ckpt.params.hidden_dim != tc.hidden {
                return Err(NeuralError::ShapeMismatch(format!(
                    "checkpoint has {} layers x {} units, config asks for {} x {}",
                    ckpt.params.num_layers(),
                    ckpt.params.hidden_dim,
                    tc.layers,
                    tc.hidden
                ))
                .into());
            }
            info!("resuming from {} at Adam step {}", path.display(), ckpt.adam.timestep);
            (ckpt.params, Some(ckpt.adam))
        }
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
            let p = NetworkParams::init(vocab.size(), tc.hidden, tc.layers, tc.init_scale, tc.forget_bias, &mut rng);
            (p, None)
        }
    };

    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("train");
    let log_path = ws.logs_dir().join(format!("{stem}.jsonl"));
    let mut log_file = fs::File::create(&log_path).map_err(io_err(&log_path))?;
    let mut log_error = None;
    let outcome = neural::train(params, adam, &train_streams, &val_streams, tc, |record| {
        let line = serde_json::to_string(record).expect("serializable");
        if let Err(e) = writeln!(log_file, "{line}") {
            log_error.get_or_insert(e);
        }
        info!(
            "epoch {} train {:.4} val {:.4} ({:.1}s)",
            record.epoch, record.train_loss, record.val_loss, record.wallclock
        );
        on_epoch(record);
    })?;
    if let Some(e) = log_error {
        return Err(io_err(&log_path)(e));
    }

    let ckpt = Checkpoint {
        params: outcome.best_params,
        adam: outcome.best_adam,
        vocab,
        config: tc.clone(),
    };
    let bytes = save_checkpoint(&ckpt)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    fs::write(out, bytes).map_err(io_err(out))?;
    let best = outcome.log.iter().find(|r| r.epoch == outcome.best_epoch);
    Ok(TrainReport {
        checkpoint: out.to_path_buf(),
        log: log_path,
        train_songs: if corpus.len() == 1 { 1 } else { corpus.len() - val_streams.len() },
        validation_songs: val_streams.len(),
        train_sequences: train_streams.len(),
        epochs: outcome.log.len(),
        best_epoch: outcome.best_epoch,
        best_validation_loss: best.map_or(f64::NAN, |r| r.val_loss),
        warnings,
    })
}

// Generation.

/// A loaded checkpoint plus the digest that identifies it in artifacts.
#[derive(Debug, Clone)]
pub struct Model {
    pub checkpoint: Checkpoint,
    pub id: String,
}

impl Model {
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(io_err(path))?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Ok(Model {
            checkpoint: load_checkpoint(bytes)?,
            id: content_id(bytes),
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.checkpoint.vocab
    }

    pub fn params(&self) -> &NetworkParams {
        &self.checkpoint.params
    }
}

fn config_hash(generation: &GenerationConfig, model: &Model, measures: u32) -> String {
    let unseeded = GenerationConfig {
        seed: 0,
        ..generation.clone()
    };
    let text = serde_json::json!({
        "generation": unseeded,
        "checkpoint": model.id,
        "measures": measures,
    });
    content_id(text.to_string().as_bytes())
}

pub fn render_sequence(sequence: &EncodedSequence, config: &StudioConfig) -> Result<(Score, Vec<u8>)> {
    let score = decode(&sequence.symbols)?;
    let bytes = write_midi(&score, &config.midi_meta(), &config.programs, &[]);
    Ok((score, bytes))
}

/// Generates `count` clips and stores them in the workspace.
pub fn make_clips(
    ws: &Workspace,
    model: &Model,
    count: usize,
    measures: u32,
    config: &StudioConfig,
) -> Result<Vec<ClipMeta>> {
    let generation = &config.generation;
    let clips = generate_clips(model.params(), model.vocab(), count, measures, generation)?;
    let hash = config_hash(generation, model, measures);
    let mut out = Vec::with_capacity(clips.len());
    for clip in clips {
        let tokens = dump_symbols(&clip.sequence.symbols);
        let id = content_id(format!("{hash}\n{}\n{tokens}", clip.seed).as_bytes());
        let meta = ClipMeta {
            id,
            rng_seed: clip.seed,
            config_hash: hash.clone(),
            checkpoint_id: model.id.clone(),
            measures,
            generation: GenerationConfig {
                seed: clip.seed,
                ..generation.clone()
            },
            symbol_count: clip.sequence.len(),
        };
        let (_, midi) = render_sequence(&clip.sequence, config)?;
        ws.save_clip(
            &Clip {
                meta: meta.clone(),
                sequence: clip.sequence,
            },
            &midi,
        )?;
        out.push(meta);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposedSong {
    pub id: String,
    pub manifest: SongManifest,
    pub midi: Vec<u8>,
    pub score: Score,
}

/// Generates one section per template label (seeded from the chosen clips),
/// assembles them and stores the song.
///
/// Label `i` (in order of first appearance) uses rng seed
/// `config.generation.seed + i`. Labels without a seed clip are generated
/// unseeded and listed in the manifest.
pub fn compose(
    ws: &Workspace,
    model: &Model,
    template_text: &str,
    seeds: &BTreeMap<char, String>,
    config: &StudioConfig,
) -> Result<ComposedSong> {
    config.generation.validate()?;
    let defaults = TemplateDefaults {
        measures: config.section_measures,
        drums: config.drums.clone(),
    };
    let template = parse_template(template_text, &defaults)?;
    let labels = template.distinct_labels();
    let mut warnings = Vec::new();
    for label in seeds.keys() {
        if !labels.contains(label) {
            warnings.push(format!("seed given for {label}, which the template does not use"));
        }
    }
    let mut seed_clips: BTreeMap<char, Clip> = BTreeMap::new();
    for label in &labels {
        if let Some(id) = seeds.get(label) {
            seed_clips.insert(*label, ws.load_clip(id)?);
        }
    }

    let seed_steps = (config.seed_measures * STEPS_PER_MEASURE) as usize;
    let sections: Vec<(char, u64, EncodedSequence)> = labels
        .par_iter()
        .enumerate()
        .map(|(i, &label)| {
            let spec = template.spec(label);
            let rng_seed = config.generation.seed.wrapping_add(i as u64);
            let generation = GenerationConfig {
                seed: rng_seed,
                melody_gate: spec.melody.clone(),
                ..config.generation.clone()
            };
            let prefix = seed_clips.get(&label).map(|c| c.sequence.prefix_steps(seed_steps));
            let section = generate_section(model.params(), model.vocab(), prefix.as_ref(), spec.measures, &generation)?;
            Ok((label, rng_seed, section))
        })
        .collect::<Result<_, SampleError>>()?;

    let clips: BTreeMap<char, EncodedSequence> = sections.iter().map(|(l, _, s)| (*l, s.clone())).collect();
    let draft = assemble(&template, &clips, &config.drum_library()?)?;
    warnings.extend(draft.warnings.iter().cloned());
    let midi = render_song(&draft, &config.midi_meta(), &config.programs);

    let label_key = |l: &char| l.to_string();
    let manifest = SongManifest {
        template: template.text.clone(),
        seeds: labels
            .iter()
            .map(|l| (label_key(l), seeds.get(l).cloned()))
            .collect(),
        unseeded: labels.iter().filter(|l| !seeds.contains_key(l)).map(label_key).collect(),
        section_seeds: sections.iter().map(|(l, s, _)| (label_key(l), *s)).collect(),
        measures: labels.iter().map(|l| (label_key(l), template.spec(*l).measures)).collect(),
        drums: labels
            .iter()
            .map(|l| (label_key(l), template.spec(*l).drums.clone()))
            .collect(),
        seed_measures: config.seed_measures,
        tempo_bpm: config.tempo_bpm,
        programs: config.programs,
        checkpoint_id: model.id.clone(),
        generation: config.generation.clone(),
        total_measures: template.total_measures(),
        warnings,
    };
    let id = ws.save_song(&manifest, &midi)?;
    Ok(ComposedSong {
        id,
        manifest,
        midi,
        score: draft.score,
    })
}

// Verification.

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VerifyReport {
    pub checked: usize,
    pub failures: Vec<(String, String)>,
    pub warnings: Vec<String>,
}

/// Re-decodes every stored corpus token file and checks it against the
/// stored score and a fresh encoding.
pub fn verify(ws: &Workspace) -> Result<VerifyReport> {
    let mut report = VerifyReport::default();
    let ids = ws.corpus_ids()?;
    if ids.is_empty() {
        report.warnings.push("corpus is empty".to_string());
    }
    for id in ids {
        report.checked += 1;
        if let Err(reason) = verify_song(ws, &id) {
            report.failures.push((id, reason));
        }
    }
    Ok(report)
}

fn verify_song(ws: &Workspace, id: &str) -> Result<(), String> {
    let entry = ws.load_corpus_entry(id).map_err(|e| e.to_string())?;
    let path = ws.corpus_tokens_path(id);
    let text = fs::read_to_string(&path).map_err(|e| format!("{}: {e}", path.display()))?;
    let symbols = parse_symbols(&text).map_err(|e| e.to_string())?;
    let decoded = decode(&symbols).map_err(|e| e.to_string())?;
    if encode(&decoded).symbols != symbols {
        return Err("token stream is not in canonical order".to_string());
    }
    let stored = Score::new(entry.score.channels().clone(), entry.score.length_steps()).map_err(|e| e.to_string())?;
    if decoded != stored {
        return Err("decoded tokens differ from the stored score".to_string());
    }
    Ok(())
}
