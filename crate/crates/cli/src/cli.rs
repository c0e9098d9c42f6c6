//! Command-line parsing and dispatch.

use std::path::PathBuf;

use albumfill_core::engine::SelectionMode;
use albumfill_core::eval::EncoderKind;
use albumfill_core::Bucket;
use clap::{Args, Parser, Subcommand};

use crate::app::load_config;
use crate::commands::{self, parse_encoder, QueryOptions, QuerySpec};
use crate::error::CliError;
use crate::service;

#[derive(Debug, Parser)]
#[command(
    name = "albumfill",
    version,
    about = "Album-grounded retrieval and completion of masked photos"
)]
pub struct Cli {
    /// Config file (default: $AF_CONFIG, ./albumfill.toml, or one next to the manifest)
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Dataset manifest; its directory becomes the dataset root
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// More log output (-v info, -vv debug)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build a dataset manifest from raw detections and face observations
    BuildDataset(BuildDatasetArgs),
    /// Embed every dataset image into embeddings.bin
    Index {
        /// Output directory (default: the dataset directory)
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Rank album images for one query
    Retrieve {
        #[command(flatten)]
        query: QueryArgs,
        #[command(flatten)]
        options: OptionArgs,
        /// Print the ranking as JSON
        #[arg(long)]
        json: bool,
    },
    /// Run the full pipeline and journal the results under runs/<run>
    Complete {
        #[arg(long)]
        run: String,
        #[command(flatten)]
        query: QueryArgs,
        #[command(flatten)]
        options: OptionArgs,
        /// Reference image for --selection manual
        #[arg(long)]
        choice: Option<String>,
        #[arg(long)]
        concurrency: Option<usize>,
    },
    /// Recall@k and mAP@k for a run
    EvaluateRetrieval {
        #[arg(long)]
        run: String,
        /// Cutoffs, comma separated
        #[arg(long = "k", value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        #[arg(long)]
        by_bucket: bool,
        /// Other runs to report alongside, on the queries all runs share
        #[arg(long, value_delimiter = ',')]
        compare: Vec<String>,
        /// Also report how many queries have a relevant image at each cutoff
        #[arg(long)]
        coverage: bool,
    },
    /// Image quality and semantic similarity of completed outputs
    EvaluateCompletion {
        #[arg(long)]
        run: String,
        #[arg(long)]
        by_bucket: bool,
        #[arg(long, value_delimiter = ',')]
        compare: Vec<String>,
        /// Pixel metrics over the masked region only
        #[arg(long)]
        masked_only: bool,
        #[arg(long, value_delimiter = ',', value_parser = parse_encoder)]
        encoders: Option<Vec<EncoderKind>>,
    },
    /// Score a run's reasoning text with an independent judge model
    Judge {
        #[arg(long)]
        run: String,
        /// A [judges.<name>] entry from the config, or an endpoint URL
        #[arg(long)]
        judge_endpoint: Option<String>,
        #[arg(long)]
        concurrency: Option<usize>,
    },
    /// Gather a run's evaluation sections into report.json and report.md
    Report {
        #[arg(long)]
        run: String,
    },
    /// Serve the HTTP API
    Serve {
        #[arg(long)]
        listen: Option<String>,
    },
}

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    /// Directory with images.json, faces.json and the images
    #[arg(long)]
    pub raw: PathBuf,
    /// Face embeddings used for identity clustering (default: <raw>/face_embeddings.bin)
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub cluster_threshold: Option<f64>,
    #[arg(long)]
    pub relevance_threshold: Option<f64>,
    #[arg(long, default_value_t = 1)]
    pub masks_per_image: usize,
    /// Generate masks in one bucket only
    #[arg(long)]
    pub bucket: Option<Bucket>,
    #[arg(long)]
    pub threads: Option<usize>,
}

#[derive(Debug, Args)]
pub struct QueryArgs {
    /// Manifest query id; repeat or comma separate for a batch
    #[arg(long, value_delimiter = ',')]
    pub query: Vec<String>,
    /// Ad-hoc query: album id
    #[arg(long)]
    pub album: Option<String>,
    /// Ad-hoc query: target image id
    #[arg(long)]
    pub target: Option<String>,
    /// Ad-hoc query: mask PNG (white is occluded)
    #[arg(long)]
    pub mask: Option<PathBuf>,
    /// Ad-hoc query: id used in the journal
    #[arg(long)]
    pub query_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct OptionArgs {
    #[arg(long)]
    pub k: Option<usize>,
    /// image_only, text_only, internal_fusion or external_compose
    #[arg(long)]
    pub compose_mode: Option<String>,
    /// Text weight for internal_fusion
    #[arg(long)]
    pub alpha: Option<f64>,
    /// auto_top1, manual or wrong_reference
    #[arg(long, default_value = "auto_top1")]
    pub selection: SelectionMode,
    #[arg(long)]
    pub seed: Option<u64>,
}

impl From<QueryArgs> for QuerySpec {
    fn from(a: QueryArgs) -> Self {
        QuerySpec {
            query: a.query,
            album: a.album,
            target: a.target,
            mask: a.mask,
            query_id: a.query_id,
        }
    }
}

impl From<OptionArgs> for QueryOptions {
    fn from(a: OptionArgs) -> Self {
        QueryOptions {
            k: a.k,
            compose_mode: a.compose_mode,
            alpha: a.alpha,
            selection: a.selection,
            seed: a.seed,
        }
    }
}

async fn dispatch(cli: Cli) -> Result<String, CliError> {
    let config = || load_config(cli.config.as_deref(), cli.manifest.as_deref());
    match cli.command {
        Command::BuildDataset(a) => commands::build_dataset(&commands::BuildDataset {
            embeddings: a
                .embeddings
                .unwrap_or_else(|| a.raw.join("face_embeddings.bin")),
            raw: a.raw,
            out: a.out,
            seed: a.seed,
            cluster_threshold: a.cluster_threshold,
            relevance_threshold: a.relevance_threshold,
            masks_per_image: a.masks_per_image,
            bucket: a.bucket,
            threads: a.threads,
        }),
        Command::Index { out } => commands::index(&config()?, out.as_deref()).await,
        Command::Retrieve {
            query,
            options,
            json,
        } => commands::retrieve(&config()?, &query.into(), &options.into(), json).await,
        Command::Complete {
            run,
            query,
            options,
            choice,
            concurrency,
        } => {
            commands::complete(
                &config()?,
                &commands::Complete {
                    run,
                    spec: query.into(),
                    options: options.into(),
                    choice,
                    concurrency,
                },
            )
            .await
        }
        Command::EvaluateRetrieval {
            run,
            ks,
            by_bucket,
            compare,
            coverage,
        } => commands::evaluate_retrieval(
            &config()?,
            &commands::EvaluateRetrieval {
                run,
                ks,
                by_bucket,
                compare,
                coverage,
            },
        ),
        Command::EvaluateCompletion {
            run,
            by_bucket,
            compare,
            masked_only,
            encoders,
        } => {
            commands::evaluate_completion(
                &config()?,
                &commands::EvaluateCompletion {
                    run,
                    by_bucket,
                    compare,
                    masked_only,
                    encoders,
                },
            )
            .await
        }
        Command::Judge {
            run,
            judge_endpoint,
            concurrency,
        } => {
            commands::judge(
                &config()?,
                &commands::Judge {
                    run,
                    judge_endpoint,
                    concurrency,
                },
            )
            .await
        }
        Command::Report { run } => commands::report(&config()?, &run),
        Command::Serve { listen } => {
            let mut config = config()?;
            if let Some(l) = listen {
                config.listen = l;
            }
            service::serve(config).await.map(|_| String::new())
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
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            if code != 0 {
                eprintln!("error[usage]: see --help");
            }
            return code;
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let runtime = match tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
    {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error[runtime]: {e}");
            return 1;
        }
    };
    match runtime.block_on(dispatch(cli)) {
        Ok(out) => {
            print!("{out}");
            0
        }
        Err(e) => {
            eprintln!("error[{}]: {}", e.code, e.message);
            e.exit_code()
        }
    }
}
