use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lensfuse::data::{synthesize_pair, write_pair, NARROW_ZOOM};
use lensfuse::evaluation::{LossLog, MetricReport, MetricRow, SMOOTHING_WINDOW};
use lensfuse::imaging::Image;
use lensfuse::inference::{cascade, LensStack, Model};
use lensfuse::train::{dataset_from_manifest, Checkpoint, TrainConfig, Trainer};

#[derive(Parser)]
#[command(name = "lensfuse", about = "Reference-guided wide-view enhancement", disable_version_flag = true)]
struct Cli {
    /// Print version and the default configuration hash.
    #[arg(short = 'V', long)]
    version: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize a narrow/wide/ground-truth triplet from one image.
    Simulate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = NARROW_ZOOM)]
        zoom: f64,
        #[arg(long, default_value_t = 2)]
        down_factor: usize,
        /// Output name prefix (defaults to the input file stem).
        #[arg(long)]
        id: Option<String>,
    },
    /// Pretrain and then adversarially train a generator.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from a checkpoint written with the same configuration.
        #[arg(long)]
        resume: Option<PathBuf>,
        #[arg(long, value_enum, default_value_t = Phase::All)]
        phase: Phase,
    },
    /// Enhance a wide image using a narrow reference.
    Enhance {
        #[arg(long)]
        narrow: PathBuf,
        #[arg(long)]
        wide: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        dump_matches: Option<PathBuf>,
    },
    /// Enhance outward across a lens stack.
    Cascade {
        /// JSON list of {"zoom": .., "path": ..}, narrowest first.
        #[arg(long)]
        stack: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score predictions against ground truth.
    Eval {
        #[arg(long, required = true, num_args = 1..)]
        pred: Vec<PathBuf>,
        #[arg(long, required = true, num_args = 1..)]
        gt: Vec<PathBuf>,
        /// Emit CSV rows instead of JSON.
        #[arg(long, conflicts_with = "text")]
        csv: bool,
        /// Emit an aligned text table instead of JSON.
        #[arg(long)]
        text: bool,
        /// `random:<seed>` or a VGG-19 tensor container.
        #[arg(long, default_value = "random:0")]
        backbone: String,
    },
    /// Render raw and smoothed loss curves from a training log.
    PlotLosses {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = SMOOTHING_WINDOW)]
        window: usize,
        /// Also write the smoothed series as CSV.
        #[arg(long)]
        smoothed_csv: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Phase {
    Pretrain,
    Adversarial,
    All,
}

type CliResult = Result<(), Box<dyn std::error::Error>>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.version {
        println!(
            "lensfuse {} (default config {})",
            env!("CARGO_PKG_VERSION"),
            TrainConfig::default().hash()
        );
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        use clap::CommandFactory;
        eprintln!("{}", Cli::command().render_help());
        return ExitCode::from(2);
    };
    match run(command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let mut msg = e.to_string();
            let mut src = e.source();
            while let Some(s) = src {
                let text = s.to_string();
                if !msg.contains(&text) {
                    msg = format!("{msg}: {text}");
                }
                src = s.source();
            }
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> CliResult {
    match command {
        Command::Simulate {
            input,
            seed,
            out,
            zoom,
            down_factor,
            id,
        } => {
            let gt = Image::open(&input)?;
            let id = id.unwrap_or_else(|| stem(&input));
            let (pair, spec) = synthesize_pair(&id, &gt, zoom, down_factor, seed)?;
            for p in write_pair(&out, &pair, &spec, zoom, seed)? {
                println!("{}", p.display());
            }
        }
        Command::Train {
            config,
            data,
            out,
            resume,
            phase,
        } => train(config, &data, &out, resume, phase)?,
        Command::Enhance {
            narrow,
            wide,
            ckpt,
            out,
            dump_matches,
        } => {
            let model = Model::load(&ckpt)?;
            let result = model.enhance_with_matches(&Image::open(&narrow)?, &Image::open(&wide)?)?;
            result.image.save_png(&out)?;
            if let Some(path) = dump_matches {
                let report = model.match_report(result.matches);
                std::fs::write(&path, serde_json::to_string_pretty(&report)?)?;
            }
        }
        Command::Cascade { stack, ckpt, out } => {
            let model = Model::load(&ckpt)?;
            let stack = LensStack::load(&stack)?;
            let result = cascade(&stack, &model)?;
            for s in &result.stages {
                println!(
                    "{}x -> {}x: {}x{}",
                    s.reference_zoom, s.wide_zoom, s.output_dims.1, s.output_dims.0
                );
            }
            result.image.save_png(&out)?;
        }
        Command::Eval {
            pred,
            gt,
            csv,
            text,
            backbone,
        } => {
            if pred.len() != gt.len() {
                return Err(format!("{} predictions but {} ground-truth images", pred.len(), gt.len()).into());
            }
            let cfg = TrainConfig {
                backbone,
                ..TrainConfig::default()
            };
            let bb = cfg.load_backbone()?;
            let rows = pred
                .iter()
                .zip(&gt)
                .map(|(p, g)| MetricRow::compute(stem(p), &Image::open(p)?, &Image::open(g)?, Some(&bb)))
                .collect::<lensfuse::Result<Vec<_>>>()?;
            let report = MetricReport::new(rows);
            if csv {
                print!("{}", report.to_csv());
            } else if text {
                print!("{}", report.to_text());
            } else if report.rows.len() == 1 {
                println!("{}", serde_json::to_string(&report.rows[0])?);
            } else {
                println!("{}", report.to_json()?);
            }
        }
        Command::PlotLosses {
            log,
            out,
            window,
            smoothed_csv,
        } => {
            let log = LossLog::read(&log)?;
            log.render(window, (480, 240)).save(&out)?;
            if let Some(p) = smoothed_csv {
                std::fs::write(p, log.smoothed_csv(window))?;
            }
        }
    }
    Ok(())
}

fn train(config: Option<PathBuf>, data: &Path, out: &Path, resume: Option<PathBuf>, phase: Phase) -> CliResult {
    let cfg = match &config {
        Some(p) => TrainConfig::load(p)?,
        None => TrainConfig::default(),
    };
    let dataset = dataset_from_manifest(data, &cfg)?;
    let mut trainer = match resume {
        Some(p) => {
            let ckpt = Checkpoint::load(&p)?;
            ckpt.ensure_config(&cfg)?;
            Trainer::resume(ckpt, dataset)?
        }
        None => Trainer::new(&cfg, dataset)?,
    }
    .with_output(out)?;
    let target = match phase {
        Phase::Pretrain => cfg.pretrain_iterations(),
        Phase::Adversarial | Phase::All => cfg.total_iterations(),
    };
    if phase == Phase::Adversarial && trainer.iteration() < cfg.pretrain_iterations() {
        return Err("the adversarial phase needs a checkpoint that finished pretraining".into());
    }
    trainer.run_until(target)?;
    if let Some(p) = trainer.save_checkpoint()? {
        println!("{}", p.display());
    }
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| p.display().to_string())
}
