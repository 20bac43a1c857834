use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

/// Weakly supervised video object segmentation toolkit.
#[derive(Parser, Debug)]
#[command(name = "wsvos", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train backbone, teacher and student from a run config.
    Train {
        #[arg(long, required_unless_present = "resume")]
        config: Option<PathBuf>,
        /// Output root: config echo, checkpoints, logs and reports land here.
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Stop once this many epochs are complete (resume later with --resume).
        #[arg(long)]
        stop_after: Option<usize>,
    },
    /// Evaluate a checkpoint on a dataset directory.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// t (teacher CAM), fusion (teacher/student fusion) or full (student CAM).
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long)]
        report: PathBuf,
        /// Also write predicted masks, one PNG per frame and class.
        #[arg(long)]
        masks: Option<PathBuf>,
    },
    /// Generate a synthetic dataset from the config's [synth] block.
    Synth {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        count: usize,
        #[arg(long)]
        out: PathBuf,
        /// Overrides synth.seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Cut a frame sequence into labeled clips.
    Split {
        /// Directory of numbered PNG frames.
        #[arg(long)]
        frames: PathBuf,
        /// CSV with a header of class names and one 0/1 row per frame.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value_t = 30)]
        clip_len: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print per-class presence statistics of a dataset.
    Stats {
        #[arg(long)]
        data: PathBuf,
    },
    /// Render CAM overlays for one clip and class.
    Viz {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Clip id; defaults to the first clip.
        #[arg(long)]
        clip: Option<String>,
        /// Class name or index; defaults to the first class present in the clip.
        #[arg(long)]
        class: Option<String>,
        #[arg(long, default_value = "full")]
        variant: String,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Prints one JSON object on stderr: `{"error": <code>, "message": <text>}`.
fn report_error(code: &str, message: &str) {
    let line = serde_json::json!({ "error": code, "message": message });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help / --version
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let msg: Vec<&str> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .collect();
            let msg = msg.join(" ");
            report_error("usage", msg.trim_start_matches("error: "));
            return ExitCode::from(2);
        }
    };
    let res = match cli.command {
        Command::Train {
            config,
            out,
            resume,
            stop_after,
        } => commands::train(config.as_deref(), &out, resume.as_deref(), stop_after),
        Command::Eval {
            ckpt,
            data,
            variant,
            report,
            masks,
        } => commands::eval(&ckpt, &data, &variant, &report, masks.as_deref()),
        Command::Synth {
            config,
            count,
            out,
            seed,
        } => commands::synth(&config, count, &out, seed),
        Command::Split {
            frames,
            labels,
            clip_len,
            out,
        } => commands::split(&frames, &labels, clip_len, &out),
        Command::Stats { data } => commands::stats(&data),
        Command::Viz {
            ckpt,
            data,
            clip,
            class,
            variant,
            out,
        } => commands::viz(&ckpt, &data, clip.as_deref(), class.as_deref(), &variant, &out),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let code = e
                .chain()
                .find_map(|c| c.downcast_ref::<wsvos_core::Error>())
                .map_or("internal", |e| e.code());
            // Core errors already print their cause; skip causes that repeat.
            let mut msg = String::new();
            for cause in e.chain() {
                let c = cause.to_string();
                if !msg.ends_with(&c) {
                    if !msg.is_empty() {
                        msg.push_str(": ");
                    }
                    msg.push_str(&c);
                }
            }
            let msg = msg.replace('\n', " ");
            report_error(code, &msg);
            ExitCode::FAILURE
        }
    }
}
