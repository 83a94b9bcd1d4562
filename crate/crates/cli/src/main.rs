use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use mgclip::adapters::Mode;
use mgclip::annotator::{
    annotate_record, compute_stats, read_jsonl, write_jsonl, AnnotateConfig, AnnotateSummary, BoxInteriorOracle,
    MaskOracle, DEFAULT_CONFIDENCE, DEFAULT_NMS_IOU, DEFAULT_STABILITY,
};
use mgclip::harness::{
    evaluate, gen_corpus, load_checkpoint, train, Domain, RunConfig, Split, CHECKPOINT_FILE, METRICS_FILE,
};

#[derive(Parser)]
#[command(name = "mgclip", version, about = "Multi-granularity vision-language alignment on a synthetic corpus")]
struct Cli {
    /// JSON run configuration; unknown keys are rejected.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, or the output file for `annotate` and `stats`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic annotation records as JSON lines.
    GenData {
        #[arg(long, default_value_t = 256)]
        images: usize,
        #[arg(long, default_value_t = 3)]
        max_regions: usize,
        #[arg(long, value_enum, default_value_t = SplitArg::Train)]
        split: SplitArg,
        #[arg(long, value_enum, default_value_t = DomainArg::Standard)]
        domain: DomainArg,
    },
    /// Pretrain from random weights.
    Train {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch: Option<usize>,
    },
    /// Adapt a pretrained checkpoint to the shifted domain.
    Adapt {
        /// Pretrained checkpoint; falls back to `base_checkpoint` in the config.
        #[arg(long)]
        base: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        /// Train the projection heads only.
        #[arg(long)]
        heads_only: bool,
    },
    /// Retrieval and tag metrics of a checkpoint on held-out scenes.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: Option<usize>,
        #[arg(long, value_enum)]
        domain: Option<DomainArg>,
    },
    /// Filter, merge and stability-check the regions of a corpus.
    Annotate {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long, default_value_t = DEFAULT_CONFIDENCE)]
        conf: f64,
        #[arg(long, default_value_t = DEFAULT_NMS_IOU)]
        nms_iou: f64,
        #[arg(long, default_value_t = DEFAULT_STABILITY)]
        stability: f64,
        /// Mask source for the stability check.
        #[arg(long, value_enum, default_value_t = OracleArg::BoxInterior)]
        mask_oracle: OracleArg,
    },
    /// Corpus statistics as one JSON document.
    Stats {
        #[arg(long = "in")]
        input: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Eval,
}

#[derive(Clone, Copy, ValueEnum)]
enum DomainArg {
    Standard,
    Shifted,
}

#[derive(Clone, Copy, ValueEnum)]
enum OracleArg {
    /// Masks are the box interiors.
    BoxInterior,
    /// Skip the stability check.
    None,
}

impl From<DomainArg> for Domain {
    fn from(d: DomainArg) -> Self {
        match d {
            DomainArg::Standard => Domain::Standard,
            DomainArg::Shifted => Domain::Shifted,
        }
    }
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    match &cli.command {
        Command::GenData { images, max_regions, split, domain } => {
            let config = run_config(&cli, RunConfig::default())?;
            let dir = out_dir(&cli)?;
            let split = match split {
                SplitArg::Train => Split::Train,
                SplitArg::Eval => Split::Eval,
            };
            let corpus = gen_corpus(config.seed, *images, *max_regions, split)?.with_domain((*domain).into());
            let records: Vec<_> = corpus.map(|(_, r)| r).collect();
            let path = dir.join("records.jsonl");
            write_jsonl(BufWriter::new(File::create(&path)?), &records)?;
            println!("wrote {} records to {}", records.len(), path.display());
        }
        Command::Train { steps, batch } => {
            let mut config = run_config(&cli, RunConfig::default())?;
            config.mode = Mode::Pretrain;
            config.steps = steps.unwrap_or(config.steps);
            config.batch = batch.unwrap_or(config.batch);
            config.out_dir = Some(out_dir(&cli)?);
            run(&config)?;
        }
        Command::Adapt { base, steps, heads_only } => {
            let mut config = run_config(&cli, RunConfig::adapt_default())?;
            config.mode = Mode::Adapt;
            config.steps = steps.unwrap_or(config.steps);
            config.base_checkpoint = base.clone().or(config.base_checkpoint);
            if config.base_checkpoint.is_none() {
                bail!("adapt needs --base or base_checkpoint in the config");
            }
            if *heads_only {
                config.use_adapters = false;
            }
            config.out_dir = Some(out_dir(&cli)?);
            run(&config)?;
        }
        Command::Eval { checkpoint, images, domain } => {
            let config = run_config(&cli, RunConfig::default())?;
            let (model, _) = load_checkpoint::<f32>(checkpoint, None)
                .with_context(|| format!("loading {}", checkpoint.display()))?;
            let domain = domain.map(Domain::from).unwrap_or(config.data.domain);
            let n = images.unwrap_or(config.data.eval_images);
            let scenes: Vec<_> = gen_corpus(config.seed, n, config.data.max_regions, Split::Eval)?
                .with_domain(domain)
                .map(|(s, _)| s)
                .collect();
            let metrics = evaluate(&model, &scenes)?;
            let text = serde_json::to_string_pretty(&metrics)?;
            println!("{text}");
            if let Some(dir) = &cli.out {
                std::fs::create_dir_all(dir)?;
                std::fs::write(dir.join("eval.json"), text + "\n")?;
            }
        }
        Command::Annotate { input, conf, nms_iou, stability, mask_oracle } => {
            let out = out_file(&cli)?;
            let config = AnnotateConfig {
                confidence: *conf,
                nms_iou: *nms_iou,
                stability: *stability,
                ..AnnotateConfig::default()
            };
            let oracle: Option<&dyn MaskOracle> = match mask_oracle {
                OracleArg::BoxInterior => Some(&BoxInteriorOracle),
                OracleArg::None => None,
            };
            let records = read_records(input)?;
            let mut total = AnnotateSummary::default();
            let mut kept = Vec::with_capacity(records.len());
            for rec in &records {
                let (r, s) = annotate_record(rec, &config, oracle).with_context(|| format!("record {}", rec.image_id))?;
                total.merge(&s);
                kept.push(r);
            }
            write_jsonl(BufWriter::new(File::create(out)?), &kept)?;
            eprintln!(
                "regions: {} in, {} after confidence, {} after nms, {} after stability",
                total.input, total.after_confidence, total.after_nms, total.after_stability
            );
        }
        Command::Stats { input } => {
            let out = out_file(&cli)?;
            let stats = compute_stats(&read_records(input)?);
            let mut w = BufWriter::new(File::create(out)?);
            serde_json::to_writer_pretty(&mut w, &stats)?;
            writeln!(w)?;
        }
    }
    Ok(())
}

fn run_config(cli: &Cli, default: RunConfig) -> Result<RunConfig> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path).with_context(|| format!("reading {}", path.display()))?,
        None => default,
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    Ok(config)
}

fn out_dir(cli: &Cli) -> Result<PathBuf> {
    let dir = cli.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn out_file(cli: &Cli) -> Result<&Path> {
    cli.out.as_deref().context("--out <file> is required")
}

fn read_records(path: &Path) -> Result<Vec<mgclip::annotator::AnnotationRecord>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    read_jsonl(BufReader::new(file)).with_context(|| format!("parsing {}", path.display()))
}

fn run(config: &RunConfig) -> Result<()> {
    let outcome = train(config, None)?;
    let dir = config.out_dir.as_deref().unwrap_or(Path::new("."));
    if let Some(last) = outcome.metrics.last() {
        println!("step {} loss {:.4} temperature {:.4}", last.step, last.loss_total, last.temperature);
    }
    println!("checkpoint {}", dir.join(CHECKPOINT_FILE).display());
    println!("metrics {}", dir.join(METRICS_FILE).display());
    Ok(())
}
