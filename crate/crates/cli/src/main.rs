use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use stiv::conditioning::TaskKind;
use stiv::flow::{GuidanceScheme, SIT_GRID_SCALES};
use stiv::train::RopeMode;
use stiv_cli::commands::eval::{cmd_eval, cmd_export_corpus, corpus_for, EvalArgs};
use stiv_cli::commands::gridsearch::{cmd_gridsearch, GridsearchArgs};
use stiv_cli::commands::long_video::{cmd_long_video, LongVideoArgs};
use stiv_cli::commands::sample::{cmd_sample, GuidanceArgs, SampleArgs};
use stiv_cli::commands::surgery::{cmd_surgery, SurgeryArgs};
use stiv_cli::commands::train::{cmd_train, TrainArgs};
use stiv_cli::config::load_model_config;
use stiv_cli::error::Result;
use stiv_cli::threads_from_env;

#[derive(Parser)]
#[command(name = "stiv", version, about = "Toy-scale video diffusion transformer")]
struct Cli {
    /// Directory every output is written under.
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from a run config, writing checkpoints, loss.csv and eval.json.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run of the same config.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Sample one clip as PPM frames plus the raw latent.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_parser = parse_mode, default_value = "t2v")]
        mode: TaskKind,
        /// Space-separated caption tokens; empty for no text.
        #[arg(long, default_value = "")]
        caption: String,
        /// Condition image, repeated once per pinned frame.
        #[arg(long = "image")]
        images: Vec<PathBuf>,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Keyframes followed by interpolation between consecutive keyframes.
    LongVideo {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, default_value = "")]
        caption: String,
        #[arg(long, default_value_t = 20)]
        keyframe_stride: u32,
        /// Frames per segment; defaults to the model's clip length.
        #[arg(long)]
        segment_frames: Option<usize>,
        /// Number of keyframes; defaults to the segment length.
        #[arg(long)]
        keyframes: Option<usize>,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Initialize a model from trained smaller ones.
    Surgery {
        #[arg(long)]
        from_t2i: Option<PathBuf>,
        #[arg(long)]
        from_t2v: Option<PathBuf>,
        /// Target architecture as a model config JSON file.
        #[arg(long)]
        target: PathBuf,
        #[arg(long, value_parser = parse_rope)]
        rope: Option<RopeMode>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Evaluate separate image/text guidance over a grid of scales.
    Gridsearch {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = SIT_GRID_SCALES)]
        scales1: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = SIT_GRID_SCALES)]
        scales2: Vec<f64>,
        #[arg(long, value_delimiter = ',', value_parser = parse_mode, default_value = "ti2v")]
        modes: Vec<TaskKind>,
        #[arg(long)]
        max_clips: Option<usize>,
        #[arg(long, default_value_t = 25)]
        steps: usize,
        #[arg(long)]
        renorm: bool,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        raw: bool,
    },
    /// Score a checkpoint on its held-out clips.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, value_delimiter = ',', value_parser = parse_mode, default_value = "ti2v,t2v")]
        modes: Vec<TaskKind>,
        #[arg(long)]
        max_clips: Option<usize>,
        #[command(flatten)]
        sampling: Sampling,
    },
    /// Write the synthetic corpus as PPM frames with caption sidecars.
    ExportCorpus {
        /// Size the corpus for this model config; the default corpus otherwise.
        #[arg(long)]
        model: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Sampling {
    #[arg(long, default_value_t = 25)]
    steps: usize,
    #[arg(long = "cfg", value_parser = parse_scheme, default_value = "jit")]
    scheme: GuidanceScheme,
    #[arg(long, default_value_t = 7.5)]
    scale: f64,
    #[arg(long, default_value_t = 7.5)]
    s1: f64,
    #[arg(long, default_value_t = 7.5)]
    s2: f64,
    #[arg(long)]
    renorm: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Use raw weights even when EMA weights are stored.
    #[arg(long)]
    raw: bool,
}

impl Sampling {
    fn guidance(&self) -> GuidanceArgs {
        GuidanceArgs {
            scheme: self.scheme,
            scale: self.scale,
            s1: self.s1,
            s2: self.s2,
            renorm: self.renorm,
        }
    }
}

fn parse_mode(s: &str) -> std::result::Result<TaskKind, String> {
    TaskKind::parse(s).map_err(|e| e.to_string())
}

fn parse_rope(s: &str) -> std::result::Result<RopeMode, String> {
    RopeMode::parse(s).map_err(|e| e.to_string())
}

fn parse_scheme(s: &str) -> std::result::Result<GuidanceScheme, String> {
    match s {
        "none" => Ok(GuidanceScheme::None),
        "jit" => Ok(GuidanceScheme::Jit),
        "sit" => Ok(GuidanceScheme::Sit),
        _ => Err(format!("unknown guidance `{s}`, expected none, jit or sit")),
    }
}

fn run(cli: Cli) -> Result<()> {
    threads_from_env()?;
    let out_dir = cli.out_dir;
    match cli.command {
        Command::Train { config, resume } => {
            let s = cmd_train(&TrainArgs {
                config,
                out_dir,
                resume,
            })?;
            let loss = s.final_loss.map_or("n/a".to_string(), |l| format!("{l:.6}"));
            println!("trained {} steps, final loss {loss}, checkpoint {}", s.steps, s.checkpoint.display());
            if let Some(eval) = s.eval {
                for m in eval.modes {
                    println!(
                        "{}: direction {:.3} motion {:.3} nan-free {:.3}",
                        m.mode.name(),
                        m.direction_accuracy,
                        m.motion_presence,
                        m.nan_free
                    );
                }
            }
        }
        Command::Sample {
            ckpt,
            mode,
            caption,
            images,
            sampling,
        } => {
            let video = cmd_sample(&SampleArgs {
                ckpt,
                mode,
                caption,
                images,
                steps: sampling.steps,
                guidance: sampling.guidance(),
                seed: sampling.seed,
                raw: sampling.raw,
                out_dir: out_dir.clone(),
            })?;
            println!("wrote {} frames to {}", video.frames, out_dir.display());
        }
        Command::LongVideo {
            ckpt,
            caption,
            keyframe_stride,
            segment_frames,
            keyframes,
            sampling,
        } => {
            let (_, report) = cmd_long_video(&LongVideoArgs {
                ckpt,
                caption,
                keyframe_stride,
                segment_frames,
                keyframes,
                steps: sampling.steps,
                guidance: sampling.guidance(),
                seed: sampling.seed,
                raw: sampling.raw,
                out_dir: out_dir.clone(),
            })?;
            println!("wrote {} frames from {} keyframes to {}", report.frames, report.keyframes, out_dir.display());
        }
        Command::Surgery {
            from_t2i,
            from_t2v,
            target,
            rope,
            seed,
        } => {
            let s = cmd_surgery(&SurgeryArgs {
                from_t2i,
                from_t2v,
                target,
                rope,
                seed,
                out_dir,
            })?;
            println!("wrote {} ({} tensors audited)", s.checkpoint.display(), s.audit.len());
        }
        Command::Gridsearch {
            ckpt,
            scales1,
            scales2,
            modes,
            max_clips,
            steps,
            renorm,
            seed,
            raw,
        } => {
            let rows = cmd_gridsearch(&GridsearchArgs {
                ckpt,
                scales1,
                scales2,
                modes,
                max_clips,
                steps,
                renorm,
                seed,
                raw,
                out_dir: out_dir.clone(),
            })?;
            println!("wrote {} rows to {}", rows.len(), out_dir.join("gridsearch.csv").display());
        }
        Command::Eval {
            ckpt,
            modes,
            max_clips,
            sampling,
        } => {
            let report = cmd_eval(&EvalArgs {
                ckpt,
                modes,
                max_clips,
                steps: sampling.steps,
                guidance: sampling.guidance().config(),
                seed: sampling.seed,
                raw: sampling.raw,
                out_dir,
            })?;
            println!("held-out loss {:.6}", report.heldout_loss);
            for m in report.modes {
                println!(
                    "{}: direction {:.3} motion {:.3} nan-free {:.3}",
                    m.mode.name(),
                    m.direction_accuracy,
                    m.motion_presence,
                    m.nan_free
                );
            }
        }
        Command::ExportCorpus { model } => {
            let config = match model {
                Some(path) => corpus_for(&load_model_config(&path)?),
                None => Default::default(),
            };
            let (train, heldout) = cmd_export_corpus(&config, &out_dir)?;
            println!("exported {train} training and {heldout} held-out clips to {}", out_dir.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let detail: Vec<&str> = text
                .lines()
                .take_while(|l| !l.starts_with("Usage:"))
                .map(|l| l.trim().trim_start_matches("error: "))
                .filter(|l| !l.is_empty() && !l.starts_with("tip:") && !l.starts_with("For more information"))
                .collect();
            eprintln!("error: usage: {}", detail.join(" "));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.one_line());
            ExitCode::FAILURE
        }
    }
}
