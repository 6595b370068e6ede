//! On-disk layout shared by the command line and the HTTP service.
//!
//! ```text
//! <root>/corpus/<id>.json, <id>.tokens     ingested songs
//! <root>/checkpoints/<name>.ckpt           trained models
//! <root>/clips/<id>.json, .tokens, .mid    generated clips
//! <root>/songs/<id>.json, .mid             assembled songs
//! <root>/logs/                             training logs
//! <root>/seeds.json                        clips marked as section seeds
//! ```
//!
//! Artifact ids are truncated SHA-256 digests of their content, and
//! artifacts are never rewritten once they exist.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::CorpusEntry;
use crate::encoder::{dump_symbols, parse_symbols, EncodeError, EncodedSequence, FeatureVector, ScanCursor, Symbol};
use crate::midi::Programs;
use crate::sampler::{GateSchedule, GenerationConfig};

/// Hex characters kept from the digest.
pub const ID_LEN: usize = 16;

#[derive(Debug, thiserror::Error)]
pub enum WorkspaceError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: PathBuf, message: String },
    #[error("unknown clip id {0}")]
    UnknownClip(String),
    #[error("unknown song id {0}")]
    UnknownSong(String),
    #[error("another training run holds {0}")]
    Locked(PathBuf),
    #[error("invalid id {0:?}")]
    InvalidId(String),
}

type Result<T, E = WorkspaceError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> WorkspaceError + '_ {
    move |source| WorkspaceError::Io {
        path: path.to_path_buf(),
        source,
    }
}

pub fn content_id(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    hex::encode(digest)[..ID_LEN].to_string()
}

fn check_id(id: &str) -> Result<()> {
    if id.len() == ID_LEN && id.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()) {
        Ok(())
    } else {
        Err(WorkspaceError::InvalidId(id.to_string()))
    }
}

/// Writes `bytes` unless the file already exists. Goes through a temporary
/// file so readers never see a partial artifact.
fn write_once(path: &Path, bytes: &[u8]) -> Result<()> {
    if path.exists() {
        return Ok(());
    }
    write_replace(path, bytes)
}

fn write_replace(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    fs::write(&tmp, bytes).map_err(io_err(&tmp))?;
    fs::rename(&tmp, path).map_err(io_err(path))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    serde_json::from_str(&text).map_err(|e| WorkspaceError::Format {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut bytes = serde_json::to_vec_pretty(value).expect("serializable");
    bytes.push(b'\n');
    bytes
}

/// Features for a generated token stream: beat flags from the step index and
/// the melody gate from `gate`.
pub fn features_for(symbols: &[Symbol], gate: &GateSchedule) -> Result<Vec<FeatureVector>, EncodeError> {
    let mut cursor = ScanCursor::new();
    let mut out = Vec::with_capacity(symbols.len());
    for (position, &s) in symbols.iter().enumerate() {
        out.push(FeatureVector::at_step(cursor.step(), gate.at(cursor.step())));
        cursor
            .advance(s)
            .map_err(|reason| EncodeError::Grammar { position, reason })?;
    }
    Ok(out)
}

/// Metadata stored next to a clip's tokens and MIDI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipMeta {
    pub id: String,
    pub rng_seed: u64,
    /// Digest of the generation settings and checkpoint (seed excluded).
    pub config_hash: String,
    pub checkpoint_id: String,
    pub measures: u32,
    pub generation: GenerationConfig,
    pub symbol_count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    pub meta: ClipMeta,
    pub sequence: EncodedSequence,
}

/// Recipe and outcome of one assembled song.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SongManifest {
    pub template: String,
    /// Seed clip per label; `None` where the section was generated unseeded.
    pub seeds: BTreeMap<String, Option<String>>,
    pub unseeded: Vec<String>,
    /// RNG seed used for each label's section.
    pub section_seeds: BTreeMap<String, u64>,
    pub measures: BTreeMap<String, u32>,
    pub drums: BTreeMap<String, Option<String>>,
    pub seed_measures: u32,
    pub tempo_bpm: f64,
    pub programs: Programs,
    pub checkpoint_id: String,
    pub generation: GenerationConfig,
    pub total_measures: u32,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SeedMark {
    pub clip_id: String,
    pub label: String,
}

/// Removes the training lock file when dropped.
#[derive(Debug)]
pub struct TrainLock {
    path: PathBuf,
}

impl Drop for TrainLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[derive(Debug, Clone)]
pub struct Workspace {
    root: PathBuf,
}

impl Workspace {
    /// Opens `root`, creating any missing subdirectories.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let ws = Workspace { root: root.into() };
        for dir in [
            ws.corpus_dir(),
            ws.checkpoints_dir(),
            ws.clips_dir(),
            ws.songs_dir(),
            ws.logs_dir(),
        ] {
            fs::create_dir_all(&dir).map_err(io_err(&dir))?;
        }
        Ok(ws)
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.root.join("corpus")
    }

    pub fn checkpoints_dir(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn clips_dir(&self) -> PathBuf {
        self.root.join("clips")
    }

    pub fn songs_dir(&self) -> PathBuf {
        self.root.join("songs")
    }

    pub fn logs_dir(&self) -> PathBuf {
        self.root.join("logs")
    }

    pub fn checkpoint_path(&self, name: &str) -> PathBuf {
        self.checkpoints_dir().join(format!("{name}.ckpt"))
    }

    pub fn lock_training(&self) -> Result<TrainLock> {
        let path = self.checkpoints_dir().join("train.lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(TrainLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(WorkspaceError::Locked(path)),
            Err(e) => Err(io_err(&path)(e)),
        }
    }

    // Corpus.

    pub fn save_corpus_entry(&self, entry: &CorpusEntry) -> Result<()> {
        check_id(&entry.id)?;
        let dir = self.corpus_dir();
        let tokens = dump_symbols(&crate::encoder::encode(&entry.score).symbols);
        write_once(&dir.join(format!("{}.tokens", entry.id)), tokens.as_bytes())?;
        write_once(&dir.join(format!("{}.json", entry.id)), &to_json(entry))
    }

    fn ids_with_extension(dir: &Path, ext: &str) -> Result<Vec<String>> {
        let mut ids = Vec::new();
        for item in fs::read_dir(dir).map_err(io_err(dir))? {
            let path = item.map_err(io_err(dir))?.path();
            if path.extension().and_then(|e| e.to_str()) != Some(ext) {
                continue;
            }
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                if check_id(stem).is_ok() {
                    ids.push(stem.to_string());
                }
            }
        }
        ids.sort();
        Ok(ids)
    }

    pub fn corpus_ids(&self) -> Result<Vec<String>> {
        Self::ids_with_extension(&self.corpus_dir(), "json")
    }

    pub fn load_corpus_entry(&self, id: &str) -> Result<CorpusEntry> {
        check_id(id)?;
        read_json(&self.corpus_dir().join(format!("{id}.json")))
    }

    pub fn load_corpus(&self) -> Result<Vec<CorpusEntry>> {
        self.corpus_ids()?.iter().map(|id| self.load_corpus_entry(id)).collect()
    }

    pub fn corpus_tokens_path(&self, id: &str) -> PathBuf {
        self.corpus_dir().join(format!("{id}.tokens"))
    }

    // Clips.

    pub fn clip_path(&self, id: &str, ext: &str) -> Result<PathBuf> {
        check_id(id)?;
        Ok(self.clips_dir().join(format!("{id}.{ext}")))
    }

    pub fn save_clip(&self, clip: &Clip, midi: &[u8]) -> Result<()> {
        let tokens = dump_symbols(&clip.sequence.symbols);
        write_once(&self.clip_path(&clip.meta.id, "tokens")?, tokens.as_bytes())?;
        write_once(&self.clip_path(&clip.meta.id, "mid")?, midi)?;
        // Metadata last: its presence marks the clip as complete.
        write_once(&self.clip_path(&clip.meta.id, "json")?, &to_json(&clip.meta))
    }

    pub fn clip_exists(&self, id: &str) -> bool {
        self.clip_path(id, "json").is_ok_and(|p| p.exists())
    }

    pub fn clip_ids(&self) -> Result<Vec<String>> {
        Self::ids_with_extension(&self.clips_dir(), "json")
    }

    pub fn load_clip(&self, id: &str) -> Result<Clip> {
        if !self.clip_exists(id) {
            return Err(WorkspaceError::UnknownClip(id.to_string()));
        }
        let meta: ClipMeta = read_json(&self.clip_path(id, "json")?)?;
        let tokens_path = self.clip_path(id, "tokens")?;
        let text = fs::read_to_string(&tokens_path).map_err(io_err(&tokens_path))?;
        let format = |e: EncodeError| WorkspaceError::Format {
            path: tokens_path.clone(),
            message: e.to_string(),
        };
        let symbols = parse_symbols(&text).map_err(format)?;
        let features = features_for(&symbols, &meta.generation.melody_gate).map_err(format)?;
        Ok(Clip {
            meta,
            sequence: EncodedSequence { symbols, features },
        })
    }

    // Songs.

    pub fn song_path(&self, id: &str, ext: &str) -> Result<PathBuf> {
        check_id(id)?;
        Ok(self.songs_dir().join(format!("{id}.{ext}")))
    }

    /// Stores a song under the digest of its manifest and returns the id.
    pub fn save_song(&self, manifest: &SongManifest, midi: &[u8]) -> Result<String> {
        let json = to_json(manifest);
        let mut hashed = json.clone();
        hashed.extend_from_slice(midi);
        let id = content_id(&hashed);
        write_once(&self.song_path(&id, "mid")?, midi)?;
        write_once(&self.song_path(&id, "json")?, &json)?;
        Ok(id)
    }

    pub fn song_ids(&self) -> Result<Vec<String>> {
        Self::ids_with_extension(&self.songs_dir(), "json")
    }

    pub fn load_song_manifest(&self, id: &str) -> Result<SongManifest> {
        let path = self.song_path(id, "json")?;
        if !path.exists() {
            return Err(WorkspaceError::UnknownSong(id.to_string()));
        }
        read_json(&path)
    }

    // Seeds.

    fn seeds_path(&self) -> PathBuf {
        self.root.join("seeds.json")
    }

    pub fn seeds(&self) -> Result<Vec<SeedMark>> {
        let path = self.seeds_path();
        if !path.exists() {
            return Ok(Vec::new());
        }
        read_json(&path)
    }

    /// Records `clip_id` as a seed for `label`. Returns false if the pair was
    /// already registered.
    pub fn mark_seed(&self, clip_id: &str, label: &str) -> Result<bool> {
        if !self.clip_exists(clip_id) {
            return Err(WorkspaceError::UnknownClip(clip_id.to_string()));
        }
        let mark = SeedMark {
            clip_id: clip_id.to_string(),
            label: label.to_string(),
        };
        let mut seeds = self.seeds()?;
        if seeds.contains(&mark) {
            return Ok(false);
        }
        seeds.push(mark);
        seeds.sort();
        write_replace(&self.seeds_path(), &to_json(&seeds))?;
        Ok(true)
    }

    /// Removes a seed mark. Returns false if it was not registered.
    pub fn unmark_seed(&self, clip_id: &str, label: &str) -> Result<bool> {
        let mut seeds = self.seeds()?;
        let before = seeds.len();
        seeds.retain(|m| !(m.clip_id == clip_id && m.label == label));
        if seeds.len() == before {
            return Ok(false);
        }
        write_replace(&self.seeds_path(), &to_json(&seeds))?;
        Ok(true)
    }
}
