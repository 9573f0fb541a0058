//! `tts`: preprocess a corpus, train both networks and synthesize speech.
//!
//! Exit status is 0 on success, 1 when the input or configuration is
//! invalid, and 2 when a command fails at run time.

use std::fs::OpenOptions;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tts_core::autodiff::Checkpoint;
use tts_core::dsp::wav::write_wav;
use tts_core::pipeline::{self, features, FeatureKind, RunConfig, VocoderChoice};
use tts_core::predictor::Predictor;
use tts_core::train::{
    self, evaluate_predictor, evaluate_vocoder, make_gta, predictor_from_checkpoint, stream_seed,
    vocoder_from_checkpoint, PredictorTrainer, VocoderTrainer,
};
use tts_core::vocoder::Vocoder;
use tts_core::{Error, Result};

const PREDICTOR_INIT: u64 = 10;
const VOCODER_INIT: u64 = 11;

#[derive(Parser)]
#[command(name = "tts", version, about = "Two-stage neural text-to-speech")]
struct Cli {
    /// Root seed for every random choice.
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Run configuration (TOML). Defaults to the desk-scale preset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Extract features for every utterance in a manifest.
    Preprocess {
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the spectrogram predictor with teacher forcing.
    TrainPredictor {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Total optimizer steps; defaults to `train.predictor_steps`.
        #[arg(long)]
        steps: Option<u64>,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Write teacher-forced predictor outputs aligned with the ground truth.
    MakeGta {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        predictor: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the vocoder on mel features (ground truth or GTA) and audio.
    TrainVocoder {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        steps: Option<u64>,
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Turn text into a 16-bit WAV file.
    Synthesize {
        #[arg(long)]
        text: String,
        #[arg(long)]
        predictor: PathBuf,
        /// A vocoder checkpoint, or `griffinlim`.
        #[arg(long)]
        vocoder: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Objective metrics for trained checkpoints on a preprocessed set.
    Evaluate {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        predictor: Option<PathBuf>,
        #[arg(long)]
        vocoder: Option<PathBuf>,
    },
    /// Receptive field of a vocoder stack.
    AnalyzeRf {
        #[arg(long, required_unless_present = "table4")]
        layers: Option<usize>,
        #[arg(long, required_unless_present = "table4")]
        cycles: Option<usize>,
        #[arg(long, required_unless_present = "table4")]
        cycle_size: Option<usize>,
        /// Print the four reference stack geometries.
        #[arg(long)]
        table4: bool,
    },
    /// Write the bundled synthetic corpus and its manifest.
    ToyCorpus {
        #[arg(long)]
        out: PathBuf,
    },
}

fn load_config(path: Option<&Path>, seed: u64) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::desk(),
    };
    cfg.train.seed = seed;
    Ok(cfg)
}

fn open_log(path: &Path, append: bool) -> Result<BufWriter<std::fs::File>> {
    let f = OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?;
    Ok(BufWriter::new(f))
}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(cli.config.as_deref(), cli.seed)?;
    match cli.command {
        Command::Preprocess { manifest, out } => {
            let entries = pipeline::read_manifest(&manifest)?;
            let report = pipeline::preprocess(&entries, &cfg, &out)?;
            println!(
                "wrote {} utterances to {}",
                report.written.len(),
                out.display()
            );
            for (id, err) in &report.failures {
                eprintln!("failed {id}: {err}");
            }
            if !report.failures.is_empty() {
                return Err(Error::Invalid(format!(
                    "{} utterances failed",
                    report.failures.len()
                )));
            }
        }
        Command::TrainPredictor {
            features,
            out,
            steps,
            resume,
        } => {
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml())?;
            let data = pipeline::load_predictor_examples::<f32>(&features, cfg.features)?;
            let trainer = match &resume {
                Some(p) => PredictorTrainer::resume(Checkpoint::load(p)?, cfg.train.clone())?,
                None => {
                    let model = Predictor::new(
                        cfg.predictor.clone(),
                        stream_seed(cli.seed, PREDICTOR_INIT, 0, 0),
                    )?;
                    PredictorTrainer::new(model, cfg.train.clone())?
                }
            };
            let mut trainer = trainer.with_clip_floor(cfg.dsp.clip_floor);
            let until = steps.unwrap_or(cfg.train.predictor_steps);
            let mut log = open_log(&out.join("predictor.log"), resume.is_some())?;
            let recs = train::run(
                &mut trainer,
                &data,
                until,
                cfg.train.checkpoint_every,
                Some(&out),
                &mut log,
            )?;
            if let (Some(first), Some(last)) = (recs.first(), recs.last()) {
                println!(
                    "steps {}..{} loss {:.5} -> {:.5}",
                    first.step,
                    last.step + 1,
                    first.loss,
                    last.loss
                );
            }
        }
        Command::MakeGta {
            features,
            predictor,
            out,
        } => {
            let model = predictor_from_checkpoint(&Checkpoint::<f32>::load(&predictor)?)?;
            if model.cfg.output_dim != cfg.dsp.mel_channels {
                return Err(Error::Config(
                    "GTA features need a mel-output predictor".into(),
                ));
            }
            let data = pipeline::load_predictor_examples::<f32>(&features, FeatureKind::Mel)?;
            let gta = make_gta(&model, &data)?;
            std::fs::create_dir_all(&out)?;
            for (ex, g) in data.iter().zip(&gta) {
                features::write(pipeline::feature_path(&out, &ex.id, FeatureKind::Mel), g)?;
            }
            std::fs::copy(
                features.join(pipeline::INDEX_FILE),
                out.join(pipeline::INDEX_FILE),
            )?;
            println!(
                "wrote {} aligned feature files to {}",
                gta.len(),
                out.display()
            );
        }
        Command::TrainVocoder {
            features,
            out,
            steps,
            resume,
        } => {
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.toml"), cfg.to_toml())?;
            let data = pipeline::load_vocoder_examples::<f32>(&features, &cfg.dsp)?;
            let mut trainer = match &resume {
                Some(p) => VocoderTrainer::resume(Checkpoint::load(p)?, cfg.train.clone())?,
                None => {
                    let model = Vocoder::new(
                        cfg.vocoder.clone(),
                        stream_seed(cli.seed, VOCODER_INIT, 0, 0),
                    )?;
                    VocoderTrainer::new(model, cfg.train.clone())?
                }
            };
            let until = steps.unwrap_or(cfg.train.vocoder_steps);
            let mut log = open_log(&out.join("vocoder.log"), resume.is_some())?;
            let recs = train::run(
                &mut trainer,
                &data,
                until,
                cfg.train.checkpoint_every,
                Some(&out),
                &mut log,
            )?;
            if let (Some(first), Some(last)) = (recs.first(), recs.last()) {
                println!(
                    "steps {}..{} nll {:.5} -> {:.5}",
                    first.step,
                    last.step + 1,
                    first.loss,
                    last.loss
                );
            }
        }
        Command::Synthesize {
            text,
            predictor,
            vocoder,
            out,
        } => {
            let choice = if vocoder == "griffinlim" {
                VocoderChoice::GriffinLim
            } else {
                VocoderChoice::WaveNet(PathBuf::from(vocoder))
            };
            let s = pipeline::synthesize(&text, &predictor, &choice, &cfg.dsp, cli.seed)?;
            write_wav(&out, &s.waveform)?;
            println!(
                "frames {} samples {} truncated {}",
                s.frames,
                s.waveform.len(),
                s.truncated
            );
        }
        Command::Evaluate {
            features,
            predictor,
            vocoder,
        } => {
            if predictor.is_none() && vocoder.is_none() {
                return Err(Error::Invalid("give --predictor, --vocoder or both".into()));
            }
            if let Some(p) = predictor {
                let model = predictor_from_checkpoint(&Checkpoint::<f32>::load(&p)?)?;
                let data = pipeline::load_predictor_examples::<f32>(&features, cfg.features)?;
                let m = evaluate_predictor(&model, &data)?;
                println!("{}", serde_json::to_string(&m).expect("metrics serialize"));
            }
            if let Some(v) = vocoder {
                let model = vocoder_from_checkpoint(&Checkpoint::<f32>::load(&v)?)?;
                let data = pipeline::load_vocoder_examples::<f32>(&features, &cfg.dsp)?;
                println!("{{\"vocoder_nll\":{}}}", evaluate_vocoder(&model, &data)?);
            }
        }
        Command::AnalyzeRf {
            layers,
            cycles,
            cycle_size,
            table4,
        } => {
            if table4 {
                print!("{}", pipeline::table4_report());
            }
            if let (Some(l), Some(c), Some(k)) = (layers, cycles, cycle_size) {
                println!("{}", pipeline::analyze_receptive_field(l, c, k)?);
            }
        }
        Command::ToyCorpus { out } => {
            let path = pipeline::toy::write_toy_corpus(&out, cfg.dsp.sample_rate_hz, cli.seed)?;
            println!("{}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}
