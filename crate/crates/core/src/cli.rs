//! Command-line front end. `run` maps argv to an exit code: 0 on success, 1 on
//! invalid input or configuration, 2 on runtime failure.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};

use crate::config::Config;
use crate::dataio::{load_checkpoint, load_frames_dir, moving_square, save_prediction, write_png, Checkpoint};
use crate::error::{Error, Result};
use crate::evaluation::{difference_map, temporal_profile, Axis, MetricReport};
use crate::events::{read_events_csv, simulate_events, voxelize, write_events_csv};
use crate::livt::QuerySpec;
use crate::model::{EvEnhancer, ModelInput};
use crate::nn::{InitScheme, ParamStore};
use crate::selftest;
use crate::training::{Dataset, Trainer};

/// Environment variable naming the default output directory.
pub const OUT_ENV: &str = "EVENHANCER_OUT";

#[derive(Debug, Parser)]
#[command(name = "evenhancer", version, about = "Event-guided continuous space-time video super-resolution")]
struct Cli {
    /// TOML config file; keys not given take their defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// RNG seed, overriding the config's `seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, env = OUT_ENV, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Debug, Subcommand)]
enum Cmd {
    /// Simulate events from a frame folder into `events.csv`.
    Simulate {
        /// Folder of ordered PNG frames.
        #[arg(long)]
        frames_dir: Option<PathBuf>,
        /// Instead of reading frames, render this many frames of a moving
        /// square into `<out>/frames` first.
        #[arg(long)]
        synthetic: Option<usize>,
        /// Side of the synthetic frames.
        #[arg(long, default_value_t = 64)]
        size: usize,
        /// Config overrides as `key=value`.
        overrides: Vec<String>,
    },
    /// Train from a folder of sequences; writes checkpoints and `train_log.jsonl`.
    Train {
        /// A folder of PNG frames, or a folder of such folders.
        #[arg(long)]
        frames_dir: Option<PathBuf>,
        /// Resume from this checkpoint.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        overrides: Vec<String>,
    },
    /// Render frames at scale `s` between the first and last frame of a folder.
    Infer {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// LR frames; the first and last are the endpoints. Events are
        /// simulated over all of them unless `--events` is given.
        #[arg(long)]
        frames_dir: Option<PathBuf>,
        /// Event CSV at LR resolution with times normalized to [0, 1].
        #[arg(long)]
        events: Option<PathBuf>,
        #[arg(long, default_value_t = 4.0)]
        s: f64,
        /// Uniform temporal scale: `t + 1` frames at `k / t`.
        #[arg(long, default_value_t = 8)]
        t: usize,
        /// Explicit comma-separated target times in [0, 1]; replaces `--t`.
        #[arg(long, value_delimiter = ',')]
        times: Option<Vec<f64>>,
    },
    /// Score predicted frames against ground truth; writes `metrics.jsonl`.
    Eval {
        /// Predicted frames.
        #[arg(long)]
        frames_dir: Option<PathBuf>,
        /// Ground-truth frames.
        #[arg(long)]
        gt: Option<PathBuf>,
    },
    /// Write a temporal profile and, with `--gt`, difference maps.
    Profile {
        #[arg(long)]
        frames_dir: Option<PathBuf>,
        #[arg(long)]
        gt: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = AxisArg::Row)]
        axis: AxisArg,
        /// Row or column index; defaults to the middle.
        #[arg(long)]
        index: Option<usize>,
    },
    /// Run the built-in oracle checks.
    Selftest,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AxisArg {
    Row,
    Column,
}

fn command() -> clap::Command {
    let keys: String = Config::documented_keys().iter().map(|(k, v)| format!("  {k} = {v}\n")).collect();
    Cli::command().after_long_help(format!("Config keys (override with key=value):\n{keys}"))
}

/// Parse `argv` (program name first), execute, and return the exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 1;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                1
            } else {
                2
            }
        }
    }
}

fn required<'a>(v: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
    v.as_deref().ok_or_else(|| Error::InvalidConfig(format!("{flag} is required")))
}

fn config(cli: &Cli, overrides: &[String]) -> Result<Config> {
    let mut cfg = Config::load(cli.config.as_deref(), overrides)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli) -> Result<&Path> {
    fs::create_dir_all(&cli.out).map_err(|e| Error::io(&cli.out, e))?;
    Ok(&cli.out)
}

fn execute(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Simulate { frames_dir, synthetic, size, overrides } => {
            let cfg = config(&cli, overrides)?;
            let out = out_dir(&cli)?;
            let frames = match (synthetic, frames_dir) {
                (Some(n), _) => {
                    if *n < 2 || *size < 4 {
                        return Err(Error::InvalidConfig("--synthetic needs >= 2 frames and --size >= 4".into()));
                    }
                    let frames = moving_square(*n, *size, *size, 1.5);
                    save_prediction(&frames, &out.join("frames"))?;
                    frames
                }
                (None, dir) => load_frames_dir(required(dir, "--frames-dir")?)?,
            };
            let events = simulate_events(&frames, cfg.data.threshold)?;
            let path = out.join("events.csv");
            write_events_csv(&path, &events)?;
            println!("{} events from {} frames -> {}", events.len(), frames.len(), path.display());
        }
        Cmd::Train { frames_dir, checkpoint, overrides } => {
            let data = Dataset::new(load_sequences(required(frames_dir, "--frames-dir")?)?);
            let mut trainer = match checkpoint {
                Some(p) => {
                    let mut ck = load_checkpoint(p)?;
                    if !overrides.is_empty() || cli.seed.is_some() {
                        ck.config = ck.config.with_overrides(overrides)?;
                        if let Some(s) = cli.seed {
                            ck.config.seed = s;
                        }
                    }
                    Trainer::from_checkpoint(&ck, data)?
                }
                None => Trainer::new(&config(&cli, overrides)?, data)?,
            };
            let out = out_dir(&cli)?;
            let log_path = out.join("train_log.jsonl");
            let file = fs::File::create(&log_path).map_err(|e| Error::io(&log_path, e))?;
            let mut log = std::io::BufWriter::new(file);
            let summary = trainer.run(Some(out), &mut log)?;
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            let last = summary.losses.last().copied().unwrap_or(f64::NAN);
            println!("trained {} steps, final loss {last:.6}", summary.losses.len());
            if let Some(b) = summary.best_psnr {
                println!("best validation Y-PSNR {b:.3} dB");
            }
        }
        Cmd::Infer { checkpoint, frames_dir, events, s, t, times } => {
            let ck = load_checkpoint(required(checkpoint, "--checkpoint")?)?;
            let (model, store) = model_from(&ck)?;
            let frames = load_frames_dir(required(frames_dir, "--frames-dir")?)?;
            if frames.len() < 2 {
                return Err(Error::InvalidConfig(format!("--frames-dir needs at least 2 frames, found {}", frames.len())));
            }
            let (h, w) = (frames[0].height(), frames[0].width());
            let stream = match events {
                Some(p) => read_events_csv(p)?,
                None => simulate_events(&frames, ck.config.data.threshold)?,
            };
            let vox = voxelize(&stream, h, w, ck.config.model.segments)?;
            let input = ModelInput::new(frames[0].clone(), frames[frames.len() - 1].clone(), vox);
            let query = match times {
                Some(ts) => QuerySpec::explicit(*s, ts.clone())?,
                None => QuerySpec::uniform(*s, *t)?,
            };
            let pred: Vec<_> = model.infer(&store, &input, &query)?.iter().map(|f| f.clamped()).collect();
            let out = out_dir(&cli)?;
            save_prediction(&pred, out)?;
            println!("{} frames of {}x{} -> {}", pred.len(), pred[0].height(), pred[0].width(), out.display());
        }
        Cmd::Eval { frames_dir, gt } => {
            let pred = load_frames_dir(required(frames_dir, "--frames-dir")?)?;
            let gt = load_frames_dir(required(gt, "--gt")?)?;
            let report = MetricReport::compute(&pred, &gt)?;
            let out = out_dir(&cli)?;
            let path = out.join("metrics.jsonl");
            fs::write(&path, report.to_json_lines()).map_err(|e| Error::io(&path, e))?;
            print!("{}", report.table());
        }
        Cmd::Profile { frames_dir, gt, axis, index } => {
            let frames = load_frames_dir(required(frames_dir, "--frames-dir")?)?;
            let axis = match axis {
                AxisArg::Row => Axis::Row,
                AxisArg::Column => Axis::Column,
            };
            let extent = match axis {
                Axis::Row => frames[0].height(),
                Axis::Column => frames[0].width(),
            };
            let index = index.unwrap_or(extent / 2);
            let out = out_dir(&cli)?;
            write_png(&out.join("profile.png"), &temporal_profile(&frames, axis, index)?)?;
            if let Some(dir) = gt {
                let gt = load_frames_dir(dir)?;
                if gt.len() != frames.len() {
                    return Err(Error::InvalidConfig(format!("--gt has {} frames, --frames-dir has {}", gt.len(), frames.len())));
                }
                write_png(&out.join("profile_gt.png"), &temporal_profile(&gt, axis, index)?)?;
                for (i, (p, g)) in frames.iter().zip(&gt).enumerate() {
                    write_png(&out.join(format!("diff_{i:04}.png")), &difference_map(p, g)?)?;
                }
            }
            println!("profile written to {}", out.display());
        }
        Cmd::Selftest => {
            let results = selftest::run_all();
            for r in &results {
                println!("{} {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            let failed = results.iter().filter(|r| !r.passed).count();
            if failed > 0 {
                return Err(Error::CheckFailed(format!("{failed} of {} selftest checks failed", results.len())));
            }
        }
    }
    Ok(())
}

/// PNGs directly in `dir` form one sequence; otherwise each subdirectory does.
fn load_sequences(dir: &Path) -> Result<Vec<Vec<crate::frame::Frame>>> {
    let has_png = |d: &Path| -> Result<bool> {
        let rd = fs::read_dir(d).map_err(|e| Error::io(d, e))?;
        Ok(rd.filter_map(|e| e.ok()).any(|e| e.path().extension().is_some_and(|x| x.eq_ignore_ascii_case("png"))))
    };
    if has_png(dir)? {
        return Ok(vec![load_frames_dir(dir)?]);
    }
    let mut subdirs: Vec<PathBuf> =
        fs::read_dir(dir).map_err(|e| Error::io(dir, e))?.filter_map(|e| e.ok()).map(|e| e.path()).filter(|p| p.is_dir()).collect();
    subdirs.sort();
    if subdirs.is_empty() {
        return Err(Error::InvalidConfig(format!("--frames-dir {} holds no PNG frames or sequence folders", dir.display())));
    }
    subdirs.iter().map(|d| load_frames_dir(d)).collect()
}

fn model_from(ck: &Checkpoint) -> Result<(EvEnhancer, ParamStore)> {
    let mut store = ParamStore::new();
    let model = EvEnhancer::new(&mut store, &ck.config, InitScheme::Standard)?;
    ck.restore(&mut store)?;
    Ok((model, store))
}
