//! The `rawspoof` command-line tool.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{make_eval_sequence, prepare_frames, Split};
use crate::error::{Error, Result};
use crate::features::FeatureExtractor;
use crate::gmm::{em_fit, GmmBaseline};
use crate::gradsuite::{run_check, Check};
use crate::manifest::{load_manifest, Manifest};
use crate::metrics::{evaluate, write_scores, ScoreRecord, Truth};
use crate::model::CldnnModel;
use crate::synth::{generate_synthetic_corpus, SynthSpec};
use crate::train::{prepare_split, score_utterances, train};
use crate::{par, wav};

#[derive(Debug, Parser)]
#[command(name = "rawspoof", version, about = "Raw-waveform spoofing detection")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Workers {
    /// Threads for data loading and scoring (0 = all cores).
    #[arg(long)]
    pub workers: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic four-class corpus and its manifest.
    Synth {
        /// Corpus spec (`per_class`, `duration_seconds`, `splits`); defaults if omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the CLDNN and keep the best dev checkpoint.
    Train {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Per-epoch JSON lines; defaults to `<out>.history.jsonl`.
        #[arg(long)]
        history: Option<PathBuf>,
        #[command(flatten)]
        workers: Workers,
    },
    /// Pick the threshold on DEV, report HTER on EVAL.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Score file; defaults to `<report>.scores.tsv`.
        #[arg(long)]
        scores: Option<PathBuf>,
        #[command(flatten)]
        workers: Workers,
    },
    /// Print the genuine log-likelihood of one WAV file.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        wav: PathBuf,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        /// One of conv1d, maxpool, batchnorm, dropout, linear, lstm, softmax_ce, cldnn.
        #[arg(long)]
        layer: Option<String>,
        #[arg(long, default_value_t = 20)]
        seeds: usize,
    },
    /// Fit the genuine and spoof GMMs on TRAIN.
    GmmTrain {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        #[command(flatten)]
        workers: Workers,
    },
    /// GMM counterpart of `eval`.
    GmmEval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        scores: Option<PathBuf>,
        #[command(flatten)]
        workers: Workers,
    },
}

fn with_suffix(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    path.map_or_else(|| Ok(RunConfig::default()), RunConfig::load)
}

fn print_resolved(out: &mut dyn Write, command: &str, text: &str) -> Result<()> {
    let w = |e| Error::io("<stdout>", e);
    writeln!(out, "# rawspoof {command}: resolved configuration").map_err(w)?;
    out.write_all(text.as_bytes()).map_err(w)?;
    writeln!(out, "# end configuration").map_err(w)
}

fn say(out: &mut dyn Write, line: impl AsRef<str>) -> Result<()> {
    writeln!(out, "{}", line.as_ref()).map_err(|e| Error::io("<stdout>", e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn require_protocol_splits(manifest: &Manifest) -> Result<()> {
    if !manifest.has_split(Split::Dev) {
        return Err(Error::Data("dev split required for threshold selection".into()));
    }
    if !manifest.has_split(Split::Eval) {
        return Err(Error::Data("eval split required for HTER".into()));
    }
    Ok(())
}

fn categories(manifest: &Manifest) -> Vec<String> {
    let mut c: Vec<String> = manifest
        .records
        .iter()
        .filter(|r| !r.category.is_empty())
        .map(|r| r.category.clone())
        .collect();
    c.sort();
    c.dedup();
    c
}

fn finish_report(
    out: &mut dyn Write,
    dev: &[ScoreRecord],
    eval: &[ScoreRecord],
    manifest: &Manifest,
    report: &Path,
    scores: Option<&Path>,
) -> Result<()> {
    let r = evaluate(dev, eval, &categories(manifest))?;
    let all: Vec<ScoreRecord> = dev.iter().chain(eval).cloned().collect();
    let scores = scores.map_or_else(|| with_suffix(report, ".scores.tsv"), Path::to_path_buf);
    write_scores(&scores, &all)?;
    write_file(report, &r.to_json())?;
    for w in &r.warnings {
        eprintln!("warning: {w}");
    }
    say(out, r.to_human())?;
    say(out, format!("report written to {}", report.display()))
}

/// Runs one parsed command, writing progress to `out`.
pub fn run(cli: Cli, out: &mut dyn Write) -> Result<()> {
    match cli.command {
        Command::Synth { spec, out: dir, seed } => {
            let spec = spec.as_deref().map_or_else(|| Ok(SynthSpec::default()), SynthSpec::load)?;
            let splits: Vec<String> = spec.splits.iter().map(ToString::to_string).collect();
            print_resolved(
                out,
                "synth",
                &format!(
                    "per_class = {}\nduration_seconds = {}\nsplits = {}\nseed = {seed}\n",
                    spec.per_class,
                    spec.duration_seconds,
                    splits.join(",")
                ),
            )?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let m = generate_synthetic_corpus(&spec, &mut rng, &dir)?;
            say(out, format!("wrote {} utterances to {}", m.records.len(), dir.display()))
        }
        Command::Train {
            manifest,
            config,
            out: ckpt,
            seed,
            history,
            workers,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(w) = workers.workers {
                cfg.train.workers = w;
            }
            cfg.validate()?;
            print_resolved(out, "train", &cfg.to_text())?;
            let m = load_manifest(&manifest)?;
            if !m.has_split(Split::Train) {
                return Err(Error::Data("train split required for training".into()));
            }
            if !m.has_split(Split::Dev) {
                return Err(Error::Data("dev split required for model selection".into()));
            }
            let w = cfg.train.workers;
            let train_set = prepare_split(&m, Split::Train, &cfg.model, w)?;
            let dev_set = prepare_split(&m, Split::Dev, &cfg.model, w)?;
            if let Some(u) = dev_set.iter().find(|u| u.frames.is_empty()) {
                return Err(Error::Data(format!("{}: dev utterance shorter than one frame", u.id)));
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            let model = CldnnModel::build(&cfg.model, &mut rng)?;
            say(out, model.summary())?;
            let history_path = history.unwrap_or_else(|| with_suffix(&ckpt, ".history.jsonl"));
            let mut lines = String::new();
            let start = Instant::now();
            let mut log_err = None;
            let outcome = train(model, &train_set, &dev_set, &cfg.train, &mut |rec| {
                lines.push_str(&rec.to_json_line());
                lines.push('\n');
                let line = format!(
                    "epoch {:>3}  loss {:.5}  dev FAR {:.2}%  FRR {:.2}%  metric {:.2}%  dev loss {:.5}{}  [{:.1}s]",
                    rec.epoch,
                    rec.train_loss,
                    100.0 * rec.dev_far,
                    100.0 * rec.dev_frr,
                    100.0 * rec.dev_metric,
                    rec.dev_loss,
                    if rec.improved { " *" } else { "" },
                    start.elapsed().as_secs_f64()
                );
                if let Err(e) = say(out, line) {
                    log_err.get_or_insert(e);
                }
            })?;
            if let Some(e) = log_err {
                return Err(e);
            }
            write_file(&history_path, &lines)?;
            save_checkpoint(&outcome.model, &outcome.meta, &ckpt)?;
            say(
                out,
                format!(
                    "best epoch {} (dev metric {:.2}%){}; checkpoint {}; history {}",
                    outcome.meta.epoch,
                    100.0 * outcome.meta.dev_metric,
                    if outcome.stopped_early { ", stopped early" } else { "" },
                    ckpt.display(),
                    history_path.display()
                ),
            )
        }
        Command::Eval {
            model,
            manifest,
            report,
            scores,
            workers,
        } => {
            let (model, meta) = load_checkpoint(&model)?;
            let w = workers.workers.unwrap_or(0);
            let mut text = RunConfig {
                model: model.config.clone(),
                ..RunConfig::default()
            }
            .to_text();
            text.push_str(&format!("# checkpoint epoch {}, seed {}\nworkers = {w}\n", meta.epoch, meta.seed));
            print_resolved(out, "eval", &text)?;
            let m = load_manifest(&manifest)?;
            require_protocol_splits(&m)?;
            let mut split_scores = Vec::new();
            for split in [Split::Dev, Split::Eval] {
                let utts = prepare_split(&m, split, &model.config, w)?;
                if let Some(u) = utts.iter().find(|u| u.frames.is_empty()) {
                    return Err(Error::Data(format!("{}: utterance shorter than one frame", u.id)));
                }
                split_scores.push(score_utterances(&model, &utts, w)?);
            }
            finish_report(out, &split_scores[0], &split_scores[1], &m, &report, scores.as_deref())
        }
        Command::Score { model, wav: path } => {
            let (model, _) = load_checkpoint(&model)?;
            let text = RunConfig {
                model: model.config.clone(),
                ..RunConfig::default()
            }
            .to_text();
            print_resolved(out, "score", &text)?;
            let audio = wav::read_wav(&path)?;
            let frames = prepare_frames(&audio.samples, model.config.frame_len, model.config.hop())?;
            let seq = make_eval_sequence(&frames, &path.display().to_string())?;
            say(out, format!("{}", model.score(&seq)?))
        }
        Command::Gradcheck { layer, seeds } => {
            let checks = match layer {
                Some(name) => vec![name.parse::<Check>()?],
                None => Check::ALL.to_vec(),
            };
            let names: Vec<_> = checks.iter().map(|c| c.name()).collect();
            print_resolved(out, "gradcheck", &format!("layers = {}\nseeds = {seeds}\n", names.join(",")))?;
            let mut failed = Vec::new();
            for c in checks {
                let r = run_check(c, seeds)?;
                say(
                    out,
                    format!(
                        "{:<11} max rel error {:.3e} (tolerance {:.0e}, worst seed {}) {}",
                        c.name(),
                        r.max_rel_error,
                        c.tolerance(),
                        r.worst_seed,
                        if r.passed() { "ok" } else { "FAIL" }
                    ),
                )?;
                if !r.passed() {
                    failed.push(c.name());
                }
            }
            if failed.is_empty() {
                Ok(())
            } else {
                Err(Error::NonFinite(format!(
                    "gradient check above tolerance for {}",
                    failed.join(", ")
                )))
            }
        }
        Command::GmmTrain {
            manifest,
            config,
            out: path,
            seed,
            workers,
        } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            if let Some(w) = workers.workers {
                cfg.train.workers = w;
            }
            print_resolved(out, "gmm-train", &cfg.to_text())?;
            let m = load_manifest(&manifest)?;
            let recs: Vec<_> = m.split(Split::Train).collect();
            if recs.is_empty() {
                return Err(Error::Data("train split required for GMM training".into()));
            }
            let fx = FeatureExtractor::new(&cfg.features)?;
            let feats = par::map(&recs, cfg.train.workers, |r| {
                let u = m.load_utterance(r)?;
                Ok((u.label.is_genuine(), fx.extract(&u.samples)?))
            })?;
            let (mut genuine, mut spoof) = (Vec::new(), Vec::new());
            for (is_genuine, f) in feats {
                if is_genuine { genuine.extend(f) } else { spoof.extend(f) }
            }
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            let g = cfg.gmm.clone();
            let mut fit = |name: &str, frames: &[Vec<f64>]| -> Result<_> {
                let f = em_fit(frames, g.components, g.iters, g.var_floor, &mut rng)
                    .map_err(|e| Error::Data(format!("{name} model: {e}")))?;
                say(
                    &mut *out,
                    format!(
                        "{name}: {} frames, K={}, avg loglik {:.4} -> {:.4}, reseeded {}",
                        frames.len(),
                        g.components,
                        f.trace.first().copied().unwrap_or(0.0) / frames.len() as f64,
                        f.trace.last().copied().unwrap_or(0.0) / frames.len() as f64,
                        f.reseeded
                    ),
                )?;
                Ok(f.gmm)
            };
            let genuine = fit("genuine", &genuine)?;
            let spoof = fit("spoof", &spoof)?;
            GmmBaseline {
                genuine,
                spoof,
                features: cfg.features.clone(),
                average: cfg.gmm.average,
            }
            .save(&path)?;
            say(out, format!("GMM baseline written to {}", path.display()))
        }
        Command::GmmEval {
            model,
            manifest,
            report,
            scores,
            workers,
        } => {
            let base = GmmBaseline::load(&model)?;
            let w = workers.workers.unwrap_or(0);
            let mut text = String::new();
            for (k, v) in crate::config::ConfigSection::entries(&base.features) {
                text.push_str(&format!("{k} = {v}\n"));
            }
            text.push_str(&format!(
                "gmm_components = {}/{}\ngmm_average = {}\nworkers = {w}\n",
                base.genuine.k(),
                base.spoof.k(),
                base.average
            ));
            print_resolved(out, "gmm-eval", &text)?;
            let m = load_manifest(&manifest)?;
            require_protocol_splits(&m)?;
            let fx = FeatureExtractor::new(&base.features)?;
            let mut split_scores = Vec::new();
            for split in [Split::Dev, Split::Eval] {
                let recs: Vec<_> = m.split(split).collect();
                split_scores.push(par::map(&recs, w, |r| {
                    let u = m.load_utterance(r)?;
                    let truth = if u.label.is_genuine() { Truth::Genuine } else { Truth::Attack };
                    let s = base.score(&fx.extract(&u.samples)?)?;
                    Ok(ScoreRecord::new(u.id, s, truth, u.category))
                })?);
            }
            finish_report(out, &split_scores[0], &split_scores[1], &m, &report, scores.as_deref())
        }
    }
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let mut lock = stdout.lock();
    match run(cli, &mut lock) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
