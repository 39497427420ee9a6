//! `erp-decoder`: staged experiment runner for the ERP in-car interface
//! decoder. Exit codes: 0 success, 2 configuration error, 3 data-format
//! error, 4 training divergence.

use clap::{Parser, Subcommand};
use erp_cli::{
    paths, run_pipeline, stage_evaluate, stage_features, stage_online, stage_preprocess,
    stage_record, stage_record_from_raw, stage_report, stage_synth_raw, stage_train,
    ExperimentConfig,
};
use erp_core::error::Error;
use erp_core::stream::{export_csv, read_recording};
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "erp-decoder",
    version,
    about = "Synthetic ERP decoding experiments: generation, wireless recording, preprocessing, classification, and reports",
    disable_help_subcommand = true
)]
struct Cli {
    /// Experiment configuration JSON (default: built-in profile).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override the configuration's master seed.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,
    /// Override the configuration's output directory.
    #[arg(long, global = true, value_name = "DIR")]
    output_dir: Option<PathBuf>,
    /// Restrict to one subject id; repeat for several.
    #[arg(long = "subject", global = true, value_name = "ID")]
    subjects: Vec<String>,
    /// Worker threads for per-subject parallelism.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize raw sessions (continuous streams plus markers) into raw/.
    Synth,
    /// Simulate wireless transport of raw sessions into recordings/.
    Record,
    /// Export one recorded session to CSV (samples and markers).
    ExportCsv {
        /// Session id, e.g. lab-01 or car-03.
        #[arg(long, value_name = "ID")]
        session: String,
        /// Directory for the CSV files (default: <output_dir>/export).
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Filter, epoch and artifact-reject recordings into epochs/.
    Preprocess,
    /// Extract per-trial feature tables from kept epochs into features/.
    Features,
    /// Fit and persist every requested (tag, family) model cell.
    Train,
    /// Score persisted models on the held-out sessions and write reports.
    Evaluate,
    /// Replay held-out recordings through the online decoder and compare
    /// with the offline pipeline.
    OnlineSim {
        /// Stream-time/wall-time multiplier (default: no pacing).
        #[arg(long, value_name = "X")]
        rate: Option<f64>,
    },
    /// Signal-quality statistics and plot data into report/.
    Report,
    /// Run every stage in order and write the artifact manifest.
    Pipeline,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    if let Some(dir) = &cli.output_dir {
        cfg.output_dir = dir.clone();
    }
    if !cli.subjects.is_empty() {
        cfg.subjects = Some(cli.subjects.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    let roster = cfg.resolve_roster()?;
    match &cli.command {
        Command::Synth => {
            stage_synth_raw(&cfg, &roster)?;
        }
        Command::Record => {
            // prefer previously synthesized raw sessions; fall back to the
            // fused synth+record path when none exist
            let have_raw = roster.iter().all(|s| {
                cfg.output_dir
                    .join(paths::raw(&s.subject_id, "lab-01"))
                    .exists()
            });
            if have_raw {
                stage_record_from_raw(&cfg, &roster)?;
            } else {
                stage_record(&cfg, &roster)?;
            }
        }
        Command::ExportCsv { session, out } => {
            let out_dir = out.clone().unwrap_or_else(|| cfg.output_dir.join("export"));
            fs::create_dir_all(&out_dir)?;
            for subject in &roster {
                let sid = &subject.subject_id;
                let rec = read_recording(&cfg.output_dir.join(paths::recording(sid, session)))?;
                let mut samples = Vec::new();
                let mut markers = Vec::new();
                export_csv(&rec, &mut samples, &mut markers)?;
                fs::write(out_dir.join(format!("{sid}_{session}_samples.csv")), samples)?;
                fs::write(out_dir.join(format!("{sid}_{session}_markers.csv")), markers)?;
                log::info!("exported {sid}/{session}");
            }
        }
        Command::Preprocess => {
            stage_preprocess(&cfg, &roster)?;
        }
        Command::Features => {
            stage_features(&cfg, &roster)?;
        }
        Command::Train => {
            stage_train(&cfg, &roster)?;
        }
        Command::Evaluate => {
            let (report, _) = stage_evaluate(&cfg, &roster)?;
            print!("{}", erp_core::eval::render_table(&report));
        }
        Command::OnlineSim { rate } => {
            let mut cfg = cfg.clone();
            if rate.is_some() {
                cfg.online_rate = *rate;
            }
            stage_online(&cfg, &roster)?;
        }
        Command::Report => {
            stage_report(&cfg, &roster)?;
        }
        Command::Pipeline => {
            let report = run_pipeline(&cfg)?;
            print!("{}", erp_core::eval::render_table(&report));
            println!("manifest: {}", cfg.output_dir.join(paths::manifest()).display());
        }
    }
    Ok(())
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) | Error::DegenerateInput(_) | Error::RunUndecidable { .. } => 2,
        Error::Format { .. } | Error::Io(_) | Error::Json(_) => 3,
        Error::TrainingDivergence { .. } => 4,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ERP_DECODER_LOG", "info"))
        .format_timestamp_millis()
        .init();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: cannot configure {jobs} worker threads: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
