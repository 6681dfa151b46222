//! Command-line entry point. Every subcommand checks its flags and inputs
//! before touching `--out`; failures after that point leave a `.failed`
//! marker in the output directory.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::dataset::{write_manifest, ManifestEntry, PatchDataset, Split, MANIFEST_FILE};
use crate::error::{Error, Result};
use crate::gan_trainer::{self, synthesize_dataset, write_config, GanConfig, GanTrainer};
use crate::labels::ClassLabel;
use crate::malignancy_classifier::{
    evaluate, format_table, load_examples, run_experiment_with, Classifier, ClassifierConfig, ExperimentResult,
    Regime,
};
use crate::patch_pipeline::PipelineConfig;
use crate::phantom::{default_splits, extract_dataset, make_phantom_fixture, read_splits, FixtureConfig};
use crate::volume_io::{parse_annotations, save_volume, Volume};

pub const FAILED_MARKER: &str = ".failed";
pub const EXPERIMENT_FILE: &str = "experiment.json";
pub const TABLE_FILE: &str = "table.txt";
pub const SOURCE_FILE: &str = "source.json";
pub const THREADS_ENV: &str = "INPAINT_GAN_THREADS";

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "inpaint-gan", version, about = "Class-conditional nodule in-painting and malignancy experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Extract normalised nodule patches from annotated volumes.
    ExtractPatches(ExtractArgs),
    /// Write a procedurally generated phantom study.
    MakePhantom(PhantomArgs),
    /// Train the in-painting GAN on the train split of a patch directory.
    TrainGan(TrainGanArgs),
    /// In-paint class-conditioned synthetic patches from a GAN checkpoint.
    Synthesize(SynthesizeArgs),
    /// Train malignancy classifiers under one regime over several seeds.
    TrainClassifier(TrainClassifierArgs),
    /// Evaluate a trained classifier on one split.
    Evaluate(EvaluateArgs),
    /// Collect experiment results into one table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    pub annotations: PathBuf,
    #[arg(long)]
    pub volumes: PathBuf,
    /// `volume_id,split` table; a stratified split is drawn when omitted.
    #[arg(long)]
    pub splits: Option<PathBuf>,
    /// Pipeline config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct PhantomArgs {
    /// Fixture config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainGanArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// GAN config (JSON); desk-scale defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint directory to continue from.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SynthesizeArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Patch directory; its train-split patches of the target class are the sources.
    #[arg(long)]
    pub source: PathBuf,
    #[arg(long)]
    pub label: ClassLabel,
    #[arg(long)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainClassifierArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub regime: Regime,
    /// Synthetic patch directory, required by raw-synthesis.
    #[arg(long)]
    pub synthetic: Option<PathBuf>,
    /// Classifier config (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2, 3, 4])]
    pub seeds: Vec<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    /// Model directory written by train-classifier.
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: Split,
    /// Patch directory; defaults to the one the model was trained on.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Report file (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// train-classifier output directories.
    #[arg(long, num_args = 1.., required = true)]
    pub inputs: Vec<PathBuf>,
    /// Table file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct SourceRecord {
    data: PathBuf,
    regime: Regime,
    seed: u64,
}

/// Failure classes mapped onto exit codes.
enum Failure {
    Validation(String),
    Runtime { marker: PathBuf, msg: String },
}

/// Work that has passed validation and may now write under `out`.
type Plan = Box<dyn FnOnce() -> Result<()>>;

/// Parses `argv` (program name first), runs the subcommand and returns the exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_VALIDATION,
            };
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(Failure::Validation(msg)) => {
            eprintln!("error: {msg}");
            EXIT_VALIDATION
        }
        Err(Failure::Runtime { marker, msg }) => {
            eprintln!("error: {msg}");
            if let Some(dir) = marker.parent() {
                let _ = std::fs::create_dir_all(dir);
            }
            if let Err(e) = std::fs::write(&marker, format!("{msg}\n")) {
                eprintln!("could not write {}: {e}", marker.display());
            }
            EXIT_RUNTIME
        }
    }
}

fn run(cli: Cli) -> std::result::Result<(), Failure> {
    let invalid = |e: Error| Failure::Validation(e.to_string());
    // Directory outputs get `out/.failed`; single-file outputs get `out.failed`.
    let (out, is_dir, plan) = match cli.command {
        Command::ExtractPatches(a) => (a.out.clone(), true, plan_extract(a).map_err(invalid)?),
        Command::MakePhantom(a) => (a.out.clone(), true, plan_phantom(a).map_err(invalid)?),
        Command::TrainGan(a) => (a.out.clone(), true, plan_train_gan(a).map_err(invalid)?),
        Command::Synthesize(a) => (a.out.clone(), true, plan_synthesize(a).map_err(invalid)?),
        Command::TrainClassifier(a) => (a.out.clone(), true, plan_train_classifier(a).map_err(invalid)?),
        Command::Evaluate(a) => (a.out.clone(), false, plan_evaluate(a).map_err(invalid)?),
        Command::Report(a) => (a.out.clone(), false, plan_report(a).map_err(invalid)?),
    };
    plan().map_err(|e| {
        let marker = if is_dir {
            out.join(FAILED_MARKER)
        } else {
            let mut s = out.into_os_string();
            s.push(FAILED_MARKER);
            PathBuf::from(s)
        };
        Failure::Runtime {
            marker,
            msg: e.to_string(),
        }
    })
}

/// Caps rayon's pool from `INPAINT_GAN_THREADS`.
pub fn init_threads() -> Result<()> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn read_json<T: DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(Error::json(format!("{what} {}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(Error::json(path.display().to_string()))?;
    std::fs::write(path, text + "\n").map_err(Error::io(path))
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        return Err(Error::Validation(format!("{what} {} is not a directory", path.display())));
    }
    Ok(())
}

/// Rejects an output location that coincides with an input.
fn distinct(out: &Path, inputs: &[&Path]) -> Result<()> {
    let canon = |p: &Path| std::fs::canonicalize(p).unwrap_or_else(|_| p.to_path_buf());
    let o = canon(out);
    if inputs.iter().any(|i| canon(i) == o) {
        return Err(Error::Validation(format!("--out {} would overwrite an input", out.display())));
    }
    Ok(())
}

fn create_out(out: &Path) -> Result<()> {
    std::fs::create_dir_all(out).map_err(Error::io(out))
}

fn plan_extract(a: ExtractArgs) -> Result<Plan> {
    let annotations = parse_annotations(&a.annotations)?;
    require_dir(&a.volumes, "--volumes")?;
    distinct(&a.out, &[&a.volumes])?;
    let mut config = match &a.config {
        Some(p) => read_json::<PipelineConfig>(p, "pipeline config")?,
        None => PipelineConfig::default(),
    };
    config.seed = a.seed;
    config.validate()?;
    let splits = match &a.splits {
        Some(p) => read_splits(p)?,
        None => default_splits(&annotations, a.seed)?,
    };
    for ann in &annotations {
        if !splits.iter().any(|(id, _)| *id == ann.source_volume_id) {
            return Err(Error::Validation(format!("volume `{}` has no split", ann.source_volume_id)));
        }
        let vol = a.volumes.join(format!("{}.vol", ann.source_volume_id));
        if !vol.is_file() {
            return Err(Error::Validation(format!("missing volume {}", vol.display())));
        }
    }
    Ok(Box::new(move || {
        let entries = extract_dataset(&a.volumes, &annotations, &splits, &config, &a.out)?;
        log::info!("wrote {} patches to {}", entries.len(), a.out.display());
        Ok(())
    }))
}

fn plan_phantom(a: PhantomArgs) -> Result<Plan> {
    let config = match &a.config {
        Some(p) => read_json::<FixtureConfig>(p, "fixture config")?,
        None => FixtureConfig::default(),
    };
    config.phantom.validate()?;
    config.pipeline().validate()?;
    Ok(Box::new(move || {
        let fx = make_phantom_fixture(&a.out, a.seed, &config)?;
        log::info!("phantom fixture written to {}", fx.root.display());
        Ok(())
    }))
}

fn plan_train_gan(a: TrainGanArgs) -> Result<Plan> {
    let ds = PatchDataset::open(&a.data)?;
    distinct(&a.out, &[&a.data])?;
    let mut config = match &a.config {
        Some(p) => GanConfig::from_json(&std::fs::read_to_string(p).map_err(Error::io(p))?)?,
        None => GanConfig::desk(),
    };
    if let Some(s) = a.seed {
        config.seed = s;
    }
    config.validate()?;
    if let Some(r) = &a.resume {
        require_dir(r, "--resume")?;
        if !r.join(gan_trainer::STATE_FILE).is_file() {
            return Err(Error::Validation(format!("{} is not a checkpoint", r.display())));
        }
    }
    if ds.split(Split::Train).next().is_none() {
        return Err(Error::Validation(format!("{} has no train patches", a.data.display())));
    }
    Ok(Box::new(move || {
        let samples = ds.load_split(Split::Train, config.noise, config.seed)?;
        create_out(&a.out)?;
        write_config(&a.out.join("config.json"), &config)?;
        let t = gan_trainer::train(&samples, &config, &a.out, a.resume.as_deref())?;
        log::info!("GAN training finished at step {}", t.counters.step);
        Ok(())
    }))
}

fn plan_synthesize(a: SynthesizeArgs) -> Result<Plan> {
    require_dir(&a.ckpt, "--ckpt")?;
    let trainer = GanTrainer::load_checkpoint(&a.ckpt)?;
    let ds = PatchDataset::open(&a.source)?;
    distinct(&a.out, &[&a.source, &a.ckpt])?;
    let picks: Vec<usize> = ds
        .split(Split::Train)
        .filter(|(_, e)| e.label == a.label && !e.synthetic)
        .map(|(i, _)| i)
        .collect();
    if a.count > 0 && picks.is_empty() {
        return Err(Error::Validation(format!(
            "{} has no real {} train patches to synthesize from",
            a.source.display(),
            a.label
        )));
    }
    Ok(Box::new(move || {
        let noise = trainer.config.noise;
        let source = picks
            .iter()
            .map(|&i| ds.load_sample(i, noise, a.seed))
            .collect::<Result<Vec<_>>>()?;
        let spacing = match picks.first() {
            Some(&i) => ds.load_patch(&ds.entries[i])?.spacing(),
            None => [1.0; 3],
        };
        let synth = synthesize_dataset(
            &trainer.generator,
            &trainer.g_params,
            trainer.counters.step,
            &source,
            a.label,
            a.count,
            a.seed,
            noise,
        )?;
        create_out(&a.out)?;
        let mut entries = Vec::with_capacity(synth.len());
        for (i, s) in synth.into_iter().enumerate() {
            let file = format!("syn{i:05}.vol");
            save_volume(&Volume::new(s.raw, spacing, [0.0; 3])?, &a.out.join(&file))?;
            entries.push(ManifestEntry {
                patch_file: file,
                label: s.label,
                diameter_mm: s.diameter_mm,
                split: Split::Train,
                synthetic: true,
            });
        }
        write_manifest(&a.out.join(MANIFEST_FILE), &entries)?;
        log::info!("wrote {} synthetic {} patches", entries.len(), a.label);
        Ok(())
    }))
}

fn plan_train_classifier(a: TrainClassifierArgs) -> Result<Plan> {
    let data = PatchDataset::open(&a.data)?;
    let synthetic = match (&a.synthetic, a.regime) {
        (Some(p), Regime::RawSynthesis) => Some(PatchDataset::open(p)?),
        (None, Regime::RawSynthesis) => {
            return Err(Error::Validation("--regime raw-synthesis requires --synthetic".into()))
        }
        (Some(_), r) => return Err(Error::Validation(format!("--synthetic conflicts with --regime {r}"))),
        (None, _) => None,
    };
    let mut inputs = vec![a.data.as_path()];
    inputs.extend(a.synthetic.as_deref());
    distinct(&a.out, &inputs)?;
    let config = match &a.config {
        Some(p) => ClassifierConfig::from_json(&std::fs::read_to_string(p).map_err(Error::io(p))?)?,
        None => ClassifierConfig::default(),
    };
    if a.seeds.is_empty() {
        return Err(Error::Validation("--seeds must list at least one seed".into()));
    }
    for split in [Split::Train, Split::Val, Split::Test] {
        if data.split(split).next().is_none() {
            return Err(Error::Validation(format!("{} has no {split} patches", a.data.display())));
        }
    }
    let data_root = std::fs::canonicalize(&a.data).map_err(Error::io(&a.data))?;
    Ok(Box::new(move || {
        create_out(&a.out)?;
        let regime = a.regime;
        let result = run_experiment_with(&data, synthetic.as_ref(), regime, &config, &a.seeds, |seed, net, params| {
            let dir = a.out.join(format!("seed_{seed}"));
            net.save(&dir, params)?;
            write_json(
                &dir.join(SOURCE_FILE),
                &SourceRecord {
                    data: data_root.clone(),
                    regime,
                    seed,
                },
            )
        })?;
        write_json(&a.out.join(EXPERIMENT_FILE), &result)?;
        let table = format_table(std::slice::from_ref(&result));
        std::fs::write(a.out.join(TABLE_FILE), &table).map_err(Error::io(a.out.join(TABLE_FILE)))?;
        print!("{table}");
        Ok(())
    }))
}

fn plan_evaluate(a: EvaluateArgs) -> Result<Plan> {
    require_dir(&a.ckpt, "--ckpt")?;
    let (net, params) = Classifier::load(&a.ckpt)?;
    let data_root = match &a.data {
        Some(d) => d.clone(),
        None => read_json::<SourceRecord>(&a.ckpt.join(SOURCE_FILE), "model source")
            .map_err(|e| Error::Validation(format!("no --data given and {e}")))?
            .data,
    };
    let ds = PatchDataset::open(&data_root)?;
    let threshold = a.threshold.unwrap_or(net.config.threshold);
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Validation(format!("--threshold must lie in [0, 1], got {threshold}")));
    }
    if a.out.is_dir() {
        return Err(Error::Validation(format!("--out {} is a directory", a.out.display())));
    }
    Ok(Box::new(move || {
        let examples = load_examples(&ds, a.split)?;
        let report = evaluate(&net, &params, &examples, threshold)?;
        if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_out(parent)?;
        }
        write_json(&a.out, &report)?;
        println!("{}", serde_json::to_string(&report).map_err(Error::json("metrics report"))?);
        Ok(())
    }))
}

fn plan_report(a: ReportArgs) -> Result<Plan> {
    let results = a
        .inputs
        .iter()
        .map(|d| read_json::<ExperimentResult>(&d.join(EXPERIMENT_FILE), "experiment result"))
        .collect::<Result<Vec<_>>>()?;
    if a.out.is_dir() {
        return Err(Error::Validation(format!("--out {} is a directory", a.out.display())));
    }
    Ok(Box::new(move || {
        let table = format_table(&results);
        if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_out(parent)?;
        }
        std::fs::write(&a.out, &table).map_err(Error::io(&a.out))?;
        print!("{table}");
        Ok(())
    }))
}
