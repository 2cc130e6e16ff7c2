use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use opaseg::commands::{self, Common, PhantomArgs};
use opaseg::{Error, Result};
use opaseg_core::opacity::OpacityGroups;
use opaseg_core::taxonomy::LabelKind;

#[derive(Parser)]
#[command(
    name = "opaseg",
    version,
    about = "Pulmonary opacity segmentation from multi-annotator labels"
)]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct GlobalArgs {
    /// Base seed; overrides seeds in config files.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON config (a phantom spec for `phantom`, a training config for `train`).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Comma-separated group IDs counted as opacity.
    #[arg(long, global = true, default_value = "2,3,4")]
    opacity_groups: String,
    /// Whether input masks hold fine classes or groups.
    #[arg(long, global = true, value_enum, default_value_t = Kind::Group)]
    label_kind: Kind,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Class,
    Group,
}

impl From<Kind> for LabelKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Class => LabelKind::Class,
            Kind::Group => LabelKind::Group,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize phantom scans with ground truth and simulated annotators.
    Phantom {
        /// Annotator model JSON.
        #[arg(long)]
        annotator_model: Option<PathBuf>,
        #[arg(long, default_value_t = 12)]
        annotators: usize,
        #[arg(long, default_value_t = 1)]
        scans: usize,
        /// Shape of random phantoms as D,H,W.
        #[arg(long, default_value = "16,64,64", value_parser = parse_shape)]
        shape: [usize; 3],
        /// Opacity blobs per random phantom.
        #[arg(long, default_value_t = 4)]
        blobs: usize,
    },
    /// Fuse annotator masks into a soft label.
    Fuse {
        #[arg(required = true)]
        masks: Vec<PathBuf>,
    },
    /// Pairwise and versus-average opacity agreement of annotators.
    Agree {
        #[arg(required = true)]
        masks: Vec<PathBuf>,
    },
    /// Train the segmentation net on a directory of scans.
    Train { data_dir: PathBuf },
    /// Predict group probabilities for a CT volume.
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,
        volume: PathBuf,
    },
    /// Score predictions against ground truth, given as PRED GT pairs.
    Report {
        #[arg(required = true, num_args = 2.., value_names = ["PRED", "GT"])]
        paths: Vec<PathBuf>,
    },
}

fn parse_shape(s: &str) -> std::result::Result<[usize; 3], String> {
    let dims: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad dimension {p:?}")))
        .collect::<std::result::Result<_, _>>()?;
    <[usize; 3]>::try_from(dims).map_err(|_| "expected D,H,W".to_string())
}

fn init_threads() -> Result<()> {
    let Ok(v) = std::env::var("OPASEG_THREADS") else {
        return Ok(());
    };
    let n: usize = v.trim().parse().ok().filter(|&n| n > 0).ok_or_else(|| {
        Error::validation(format!("OPASEG_THREADS={v:?} is not a positive integer"))
    })?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(Error::validation)
}

fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    let g = cli.global;
    let common = Common {
        seed: g.seed,
        config: g.config,
        out: g.out,
        opacity_groups: OpacityGroups::parse(&g.opacity_groups)?,
    };
    let kind = LabelKind::from(g.label_kind);
    match cli.command {
        Command::Phantom {
            annotator_model,
            annotators,
            scans,
            shape,
            blobs,
        } => {
            let args = PhantomArgs {
                spec: None,
                annotator_model,
                annotators,
                scans,
                shape,
                blobs,
            };
            commands::cmd_phantom(&common, &args)
        }
        Command::Fuse { masks } => commands::cmd_fuse(&common, &masks, kind),
        Command::Agree { masks } => commands::cmd_agree(&common, &masks, kind),
        Command::Train { data_dir } => commands::cmd_train(&common, &data_dir, kind, &mut |r| {
            let val = r
                .val_opacity_iou
                .map_or("-".to_string(), |v| format!("{v:.4}"));
            eprintln!(
                "epoch {} lr {:e} loss {:.6} val_opacity_iou {val}",
                r.epoch, r.lr, r.train_loss
            );
        }),
        Command::Predict { checkpoint, volume } => {
            commands::cmd_predict(&common, &checkpoint, &volume)
        }
        Command::Report { paths } => {
            if paths.len() % 2 != 0 {
                return Err(Error::validation("report takes PRED GT pairs"));
            }
            let pairs: Vec<_> = paths
                .chunks(2)
                .map(|p| (p[0].clone(), p[1].clone()))
                .collect();
            commands::cmd_report(&common, &pairs, kind)
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg
                .lines()
                .next()
                .unwrap_or("invalid arguments")
                .trim_start_matches("error: ");
            let err = Error::validation(first.to_string());
            eprintln!("{}", err.diagnostic());
            return ExitCode::from(err.kind.exit_code() as u8);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", err.diagnostic());
            ExitCode::from(err.kind.exit_code() as u8)
        }
    }
}
