//! Command-line front end. Every numeric hyperparameter lives in the config
//! file, so a run is fully described by its config and its manifest.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::data::{
    read_captions, read_features, write_captions, write_features, Dataset, Splits, SynthBundle, Vocabulary,
};
use crate::error::{Error, Result};
use crate::metrics::{cider_d, evaluate_all, rouge_l, DocFreq};
use crate::model::{CaptionModel, Checkpoint};
use crate::train::{caption_images, train_scst, train_xe, RunConfig, TrainOutcome};

pub const FEATURES_FILE: &str = "features.cmlf";
pub const CAPTIONS_FILE: &str = "captions.jsonl";
pub const SPLITS_FILE: &str = "splits.json";
pub const VOCAB_FILE: &str = "vocab.json";

#[derive(Parser, Debug)]
#[command(name = "mtcaption", version, about = "Mean-teacher image captioning at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Which {
    Online,
    Target,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate the synthetic dataset into `data_dir`.
    GenData {
        #[arg(long)]
        config: PathBuf,
    },
    /// Cross-entropy training with distillation and EMA targets.
    TrainXe {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Self-critical fine-tuning from an XE (or SCST) checkpoint.
    TrainScst {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Caption every grid in a feature file as JSON lines.
    Caption {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long, value_enum, default_value = "target")]
        model: Which,
        #[arg(long, default_value_t = 5)]
        beam: usize,
        /// Output file; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score captions against references.
    Evaluate {
        #[arg(long)]
        captions: PathBuf,
        #[arg(long)]
        references: PathBuf,
        /// Also write per-image scores as CSV.
        #[arg(long)]
        per_image: Option<PathBuf>,
        /// Metrics JSON file; stdout when omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

/// Written once per successful command.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config: Option<String>,
    pub seed: Option<u64>,
    pub start_step: Option<u64>,
    pub end_step: Option<u64>,
    pub outputs: Vec<PathBuf>,
    pub scores: BTreeMap<String, f64>,
}

impl RunManifest {
    fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// One line of `caption` output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionLine {
    pub id: u64,
    pub caption: String,
    pub logprob: f64,
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Numeric(_) => 4,
        _ => 3,
    }
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => "config",
        Error::Numeric(_) => "numeric",
        _ => "data",
    }
}

/// Parses arguments, runs the command and returns the process exit code.
/// Failures print a one-line JSON error on stderr.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let code = exit_code(&e);
            let msg = serde_json::json!({
                "error": error_kind(&e),
                "message": e.to_string(),
                "exit_code": code,
            });
            eprintln!("{msg}");
            code
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenData { config } => gen_data(&config),
        Command::TrainXe { config, resume } => cmd_train_xe(&config, resume.as_deref()),
        Command::TrainScst { config, checkpoint } => cmd_train_scst(&config, &checkpoint),
        Command::Caption {
            checkpoint,
            features,
            model,
            beam,
            output,
        } => cmd_caption(&checkpoint, &features, model, beam, output.as_deref()),
        Command::Evaluate {
            captions,
            references,
            per_image,
            output,
        } => cmd_evaluate(&captions, &references, per_image.as_deref(), output.as_deref()),
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

fn gen_data(config: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let bundle = SynthBundle::generate(&cfg.synth(), cfg.vocab_size, cfg.num_val, cfg.num_test)?;
    let dir = &cfg.data_dir;
    create_dir(dir)?;
    let paths = [FEATURES_FILE, CAPTIONS_FILE, SPLITS_FILE, VOCAB_FILE].map(|f| dir.join(f));
    write_features(&paths[0], &bundle.features)?;
    write_captions(&paths[1], &bundle.captions)?;
    write_json(&paths[2], &bundle.splits)?;
    write_json(&paths[3], &bundle.vocab)?;
    RunManifest {
        command: "gen-data".into(),
        config: Some(cfg.to_text()),
        seed: Some(cfg.seed),
        outputs: paths.to_vec(),
        ..RunManifest::default()
    }
    .write(&dir.join("gen-data.manifest.json"))
}

/// Loads the dataset and vocabulary written by `gen-data`.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, Vocabulary)> {
    let dir = &cfg.data_dir;
    let vocab: Vocabulary = read_json(&dir.join(VOCAB_FILE))?;
    let splits: Splits = read_json(&dir.join(SPLITS_FILE))?;
    let features = read_features(dir.join(FEATURES_FILE))?;
    if features.first().is_some_and(|f| f.dim != cfg.feature_dim) {
        return Err(Error::Config(format!(
            "feature_dim {} disagrees with feature file width {}",
            cfg.feature_dim, features[0].dim
        )));
    }
    let captions = read_captions(dir.join(CAPTIONS_FILE))?;
    let data = Dataset::assemble(features, &captions, &vocab, &splits)?;
    if data.train.is_empty() {
        return Err(Error::Data("training split is empty".into()));
    }
    Ok((data, vocab))
}

fn finish_training(stage: &str, cfg: &RunConfig, start: u64, out: TrainOutcome, log_path: PathBuf) -> Result<()> {
    let dir = cfg.out_dir.join(stage);
    let last = dir.join("last.ckpt");
    out.last.save(&last)?;
    let mut outputs = vec![log_path, last];
    if let Some(best) = &out.best {
        let p = dir.join("best.ckpt");
        best.save(&p)?;
        outputs.push(p);
    }
    let mut scores = BTreeMap::new();
    if let Some(v) = out.validations.last() {
        scores.insert("val_online_CIDEr-D".into(), v.online_cider);
        scores.insert("val_target_CIDEr-D".into(), v.target_cider);
    }
    RunManifest {
        command: format!("train-{stage}"),
        config: Some(cfg.to_text()),
        seed: Some(cfg.seed),
        start_step: Some(start),
        end_step: Some(out.state.step),
        outputs,
        scores,
    }
    .write(&dir.join("manifest.json"))
}

fn open_log(dir: &Path, append: bool) -> Result<(BufWriter<File>, PathBuf)> {
    create_dir(dir)?;
    let path = dir.join("log.jsonl");
    let f = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    Ok((BufWriter::new(f), path))
}

fn cmd_train_xe(config: &Path, resume: Option<&Path>) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (data, vocab) = load_data(&cfg)?;
    let ck = resume.map(Checkpoint::load).transpose()?;
    let start = ck.as_ref().map_or(0, |c| c.step);
    let (mut log, log_path) = open_log(&cfg.out_dir.join("xe"), ck.is_some())?;
    let out = train_xe(&cfg, &data, &vocab, ck.as_ref(), &mut log)?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    finish_training("xe", &cfg, start, out, log_path)
}

fn cmd_train_scst(config: &Path, checkpoint: &Path) -> Result<()> {
    let cfg = RunConfig::load(config)?;
    let (data, vocab) = load_data(&cfg)?;
    let ck = Checkpoint::load(checkpoint)?;
    if ck.vocab.as_ref().is_some_and(|v| v != &vocab) {
        return Err(Error::Config(
            "checkpoint vocabulary disagrees with the dataset vocabulary".into(),
        ));
    }
    let resuming = ck.settings.get("stage").map(String::as_str) == Some("scst");
    let (mut log, log_path) = open_log(&cfg.out_dir.join("scst"), resuming)?;
    let out = train_scst(&cfg, &data, &vocab, &ck, &mut log)?;
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    finish_training("scst", &cfg, ck.step, out, log_path)
}

fn cmd_caption(checkpoint: &Path, features: &Path, which: Which, beam: usize, output: Option<&Path>) -> Result<()> {
    if beam == 0 {
        return Err(Error::invalid("--beam must be at least 1"));
    }
    let ck = Checkpoint::load(checkpoint)?;
    let vocab = ck
        .vocab
        .clone()
        .ok_or_else(|| Error::Data("checkpoint carries no vocabulary".into()))?;
    let prefix = match which {
        Which::Online => "online",
        Which::Target => "target",
    };
    let model = CaptionModel::<f32>::from_params(ck.config.clone(), ck.params(prefix)?)?;
    let grids = read_features(features)?;
    let refs: Vec<_> = grids.iter().collect();
    let hyps = caption_images(&model, &refs, beam)?;
    let mut text = String::new();
    for (g, h) in grids.iter().zip(&hyps) {
        let line = CaptionLine {
            id: g.id,
            caption: vocab.decode(h.body()),
            logprob: h.logprob,
        };
        text.push_str(&serde_json::to_string(&line)?);
        text.push('\n');
    }
    let manifest = RunManifest {
        command: "caption".into(),
        seed: Some(ck.seed),
        end_step: Some(ck.step),
        outputs: output.map(Path::to_path_buf).into_iter().collect(),
        ..RunManifest::default()
    };
    emit(output, &text, &manifest)
}

/// Writes `text` to `output` with a sibling manifest, or to stdout with the
/// manifest on stderr.
fn emit(output: Option<&Path>, text: &str, manifest: &RunManifest) -> Result<()> {
    match output {
        Some(p) => {
            std::fs::write(p, text).map_err(|e| Error::io(p, e))?;
            let mut name = p.as_os_str().to_owned();
            name.push(".manifest.json");
            manifest.write(Path::new(&name))
        }
        None => {
            print!("{text}");
            eprintln!("{}", serde_json::to_string(manifest)?);
            Ok(())
        }
    }
}

fn read_caption_lines(path: &Path) -> Result<Vec<CaptionLine>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(n, l)| serde_json::from_str(l).map_err(|e| Error::Data(format!("{}:{}: {e}", path.display(), n + 1))))
        .collect()
}

fn cmd_evaluate(captions: &Path, references: &Path, per_image: Option<&Path>, output: Option<&Path>) -> Result<()> {
    let cands = read_caption_lines(captions)?;
    let refs: BTreeMap<u64, Vec<String>> = read_captions(references)?.into_iter().map(|r| (r.id, r.refs)).collect();
    let mut texts = Vec::with_capacity(cands.len());
    let mut ref_sets = Vec::with_capacity(cands.len());
    for c in &cands {
        let r = refs
            .get(&c.id)
            .ok_or_else(|| Error::Data(format!("no references for image {}", c.id)))?;
        texts.push(c.caption.clone());
        ref_sets.push(r.clone());
    }
    let scores = evaluate_all(&texts, &ref_sets)?;
    if let Some(p) = per_image {
        let df = DocFreq::build(&ref_sets)?;
        let cider = cider_d(&texts, &ref_sets, &df)?.per_image.unwrap_or_default();
        let rouge = rouge_l(&texts, &ref_sets)?.per_image.unwrap_or_default();
        let mut csv = String::from("id,ROUGE-L,CIDEr-D\n");
        for ((c, r), d) in cands.iter().zip(&rouge).zip(&cider) {
            csv.push_str(&format!("{},{r},{d}\n", c.id));
        }
        std::fs::write(p, csv).map_err(|e| Error::io(p, e))?;
    }
    let mut text = serde_json::to_string_pretty(&scores)?;
    text.push('\n');
    let manifest = RunManifest {
        command: "evaluate".into(),
        outputs: output.into_iter().chain(per_image).map(Path::to_path_buf).collect(),
        scores: scores.clone(),
        ..RunManifest::default()
    };
    emit(output, &text, &manifest)
}
