//! The `bandsmith` command line.
//!
//! Each subcommand is a thin wrapper over [`bandsmith_core::pipeline`]; the
//! `cmd_*` functions are public so tests can drive them without a process.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bandsmith_core::pipeline::{self, IngestReport, Model, PipelineError, StudioConfig, TrainReport, VerifyReport};
use bandsmith_core::score::Key;
use bandsmith_core::workspace::{ClipMeta, Workspace, WorkspaceError};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "bandsmith", version, about = "Multi-instrument song generation from a MIDI corpus")]
pub struct Cli {
    /// Workspace root; missing subdirectories are created.
    #[arg(long, global = true, default_value = ".")]
    pub workspace: PathBuf,
    /// JSON config with `train` and `generation` sections.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(flatten)]
    pub generation: GenerationArgs,
    #[command(subcommand)]
    pub command: Command,
}

/// Overrides applied on top of the config file's `generation` section.
#[derive(Debug, Clone, Default, Args)]
pub struct GenerationArgs {
    /// Base RNG seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Restrict new notes to a key, e.g. `C`, `Am`, `Bb major`.
    #[arg(long, global = true)]
    pub key: Option<String>,
    #[arg(long, global = true)]
    pub temperature: Option<f64>,
    /// Always take the most likely allowed symbol.
    #[arg(long, global = true)]
    pub greedy: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read the songs listed in a manifest into the workspace corpus.
    Ingest { manifest: PathBuf },
    /// Train a model on the workspace corpus.
    Train {
        /// Output checkpoint; defaults to checkpoints/model.ckpt.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from a checkpoint, restoring its optimizer state.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Generate unseeded clips to audition as seeds.
    Clips {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 5)]
        count: usize,
        #[arg(long, default_value_t = 8)]
        measures: u32,
    },
    /// Mark a clip as the seed for a section label.
    Mark { clip: String, label: String },
    /// Compose a song from a structure template and seed clips.
    Compose {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Structure such as `AABA` or `AABA; B measures=4 melody=off`.
        #[arg(long)]
        template: String,
        /// Seed clip for a label, as `A=<clip id>`. Repeatable.
        #[arg(long = "clip", value_name = "LABEL=ID")]
        clips: Vec<String>,
        /// Use seeds marked in the workspace for labels without `--clip`.
        #[arg(long)]
        marked: bool,
        /// Section length for labels the template does not size.
        #[arg(long)]
        measures: Option<u32>,
    },
    /// Check every stored corpus token file against its score.
    Verify,
}

/// A problem with the command line itself, reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

/// 1 for bad input, 2 for everything else.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return 1;
        }
        if let Some(e) = cause.downcast_ref::<PipelineError>() {
            return if e.is_user_error() { 1 } else { 2 };
        }
        if let Some(e) = cause.downcast_ref::<WorkspaceError>() {
            return if matches!(e, WorkspaceError::Io { .. }) { 2 } else { 1 };
        }
    }
    2
}

pub fn load_config(path: Option<&Path>, overrides: &GenerationArgs) -> Result<StudioConfig> {
    let mut config = match path {
        Some(p) => StudioConfig::load(p)?,
        None => StudioConfig::default(),
    };
    if let Some(seed) = overrides.seed {
        config.generation.seed = seed;
        config.train.seed = seed;
    }
    if let Some(key) = &overrides.key {
        let key: Key = key.parse().map_err(|e| usage(format!("--key: {e}")))?;
        config.generation.key = Some(key);
    }
    if let Some(t) = overrides.temperature {
        config.generation.temperature = t;
    }
    if overrides.greedy {
        config.generation.greedy = true;
    }
    config.validate()?;
    Ok(config)
}

fn default_checkpoint(ws: &Workspace, given: Option<&Path>) -> PathBuf {
    given.map_or_else(|| ws.checkpoint_path("model"), Path::to_path_buf)
}

pub fn cmd_ingest(ws: &Workspace, manifest: &Path, out: &mut dyn Write) -> Result<IngestReport> {
    let report = pipeline::ingest(ws, manifest)?;
    for song in &report.ingested {
        writeln!(out, "ok       {}  {} ({} measures, {} notes)", song.id, song.source.display(), song.measures, song.notes)?;
    }
    for r in &report.rejected {
        writeln!(out, "rejected {}  {}: {}", r.kind, r.source.display(), r.message)?;
    }
    writeln!(out, "{}", report.summary())?;
    if report.ingested.is_empty() {
        bail!(usage("no usable songs in manifest"));
    }
    Ok(report)
}

pub fn cmd_train(
    ws: &Workspace,
    config: &StudioConfig,
    out_path: Option<&Path>,
    resume: Option<&Path>,
    out: &mut dyn Write,
) -> Result<TrainReport> {
    let target = default_checkpoint(ws, out_path);
    let report = pipeline::train_corpus(ws, config, &target, resume, |_| {})?;
    for w in &report.warnings {
        writeln!(out, "warning: {w}")?;
    }
    writeln!(
        out,
        "{} epochs on {} sequences; best validation loss {:.4} at epoch {}",
        report.epochs, report.train_sequences, report.best_validation_loss, report.best_epoch
    )?;
    writeln!(out, "checkpoint {}", report.checkpoint.display())?;
    writeln!(out, "log {}", report.log.display())?;
    Ok(report)
}

pub fn cmd_clips(
    ws: &Workspace,
    checkpoint: Option<&Path>,
    count: usize,
    measures: u32,
    config: &StudioConfig,
    out: &mut dyn Write,
) -> Result<Vec<ClipMeta>> {
    if count == 0 {
        bail!(usage("--count must be at least 1"));
    }
    let path = default_checkpoint(ws, checkpoint);
    let model = Model::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let clips = pipeline::make_clips(ws, &model, count, measures, config)?;
    for clip in &clips {
        writeln!(out, "{}  seed {}  {}", clip.id, clip.rng_seed, ws.clip_path(&clip.id, "mid")?.display())?;
    }
    Ok(clips)
}

/// Parses `A=<id>` bindings.
pub fn parse_bindings(items: &[String]) -> Result<BTreeMap<char, String>> {
    let mut map = BTreeMap::new();
    for item in items {
        let (label, id) = item
            .split_once('=')
            .ok_or_else(|| usage(format!("expected LABEL=ID, got {item:?}")))?;
        let mut chars = label.trim().chars();
        let label = match (chars.next(), chars.next()) {
            (Some(c), None) if c.is_ascii_uppercase() => c,
            _ => bail!(usage(format!("section label must be one letter A-Z, got {label:?}"))),
        };
        if map.insert(label, id.trim().to_string()).is_some() {
            bail!(usage(format!("label {label} bound twice")));
        }
    }
    Ok(map)
}

/// Adds workspace seed marks for labels not already bound.
fn add_marked(ws: &Workspace, seeds: &mut BTreeMap<char, String>) -> Result<()> {
    let mut marked: BTreeMap<char, Vec<String>> = BTreeMap::new();
    for mark in ws.seeds()? {
        if let Some(c) = mark.label.chars().next().filter(|_| mark.label.len() == 1) {
            marked.entry(c).or_default().push(mark.clip_id);
        }
    }
    for (label, ids) in marked {
        if seeds.contains_key(&label) {
            continue;
        }
        if ids.len() > 1 {
            bail!(usage(format!("{} clips are marked for {label}; pick one with --clip {label}=ID", ids.len())));
        }
        seeds.insert(label, ids[0].clone());
    }
    Ok(())
}

pub fn cmd_compose(
    ws: &Workspace,
    checkpoint: Option<&Path>,
    template: &str,
    seeds: &BTreeMap<char, String>,
    config: &StudioConfig,
    out: &mut dyn Write,
) -> Result<pipeline::ComposedSong> {
    let path = default_checkpoint(ws, checkpoint);
    let model = Model::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let song = pipeline::compose(ws, &model, template, seeds, config)?;
    for w in &song.manifest.warnings {
        writeln!(out, "warning: {w}")?;
    }
    if !song.manifest.unseeded.is_empty() {
        writeln!(out, "generated without seed: {}", song.manifest.unseeded.join(", "))?;
    }
    writeln!(out, "{}  {} measures  {}", song.id, song.manifest.total_measures, ws.song_path(&song.id, "mid")?.display())?;
    Ok(song)
}

pub fn cmd_verify(ws: &Workspace, out: &mut dyn Write) -> Result<VerifyReport> {
    let report = pipeline::verify(ws)?;
    for w in &report.warnings {
        writeln!(out, "warning: {w}")?;
    }
    for (id, reason) in &report.failures {
        writeln!(out, "FAIL {id}: {reason}")?;
    }
    writeln!(out, "{} checked, {} failed", report.checked, report.failures.len())?;
    if !report.failures.is_empty() {
        bail!(usage(format!("{} corpus entries failed verification", report.failures.len())));
    }
    Ok(report)
}

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<()> {
    let ws = Workspace::open(&cli.workspace)?;
    let config = || load_config(cli.config.as_deref(), &cli.generation);
    match &cli.command {
        Command::Ingest { manifest } => {
            cmd_ingest(&ws, manifest, out)?;
        }
        Command::Train { out: target, resume } => {
            cmd_train(&ws, &config()?, target.as_deref(), resume.as_deref(), out)?;
        }
        Command::Clips {
            checkpoint,
            count,
            measures,
        } => {
            cmd_clips(&ws, checkpoint.as_deref(), *count, *measures, &config()?, out)?;
        }
        Command::Mark { clip, label } => {
            let added = ws.mark_seed(clip, label)?;
            writeln!(out, "{clip} {} {label}", if added { "marked as" } else { "already marked as" })?;
        }
        Command::Compose {
            checkpoint,
            template,
            clips,
            marked,
            measures,
        } => {
            let mut config = config()?;
            if let Some(m) = measures {
                config.section_measures = *m;
            }
            let mut seeds = parse_bindings(clips)?;
            if *marked {
                add_marked(&ws, &mut seeds)?;
            }
            cmd_compose(&ws, checkpoint.as_deref(), template, &seeds, &config, out)?;
        }
        Command::Verify => {
            cmd_verify(&ws, out)?;
        }
    }
    Ok(())
}
