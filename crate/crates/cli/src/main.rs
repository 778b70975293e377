use std::io::Write as _;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use same_core::attack::QuerySet;
use same_core::data::{load_archive, load_idx_dataset, make_synthetic_corpus, save_archive, CorpusKind, ImageTensor, Shape};
use same_core::detector::{anomaly_score, write_bundle, DetectorBundle};
use same_core::experiment::{emit_report, ExperimentConfig, ExperimentReport, Pipeline, ReportFormat, Workspace};
use same_core::par::Execution;
use same_core::rng::RngHandle;
use same_gateway::{DefensePolicy, Gateway, GatewayConfig, PolicyKind, PowParams};

#[derive(Parser)]
#[command(name = "same", version, about = "Detect model-extraction queries by sample reconstruction")]
struct Cli {
    /// Run every data-parallel loop on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    /// Log filter, e.g. `info` or `same_core=debug`.
    #[arg(long, global = true, default_value = "info")]
    log: String,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build or import datasets.
    #[command(subcommand)]
    Data(DataCmd),
    /// Train one pipeline stage (cached under the output directory).
    Train {
        stage: TrainStage,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Generate attack queries.
    #[command(subcommand)]
    Attack(AttackCmd),
    #[command(subcommand)]
    Detect(DetectCmd),
    /// Run experiments.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Serve the victim behind the detector over HTTP.
    Serve(ServeArgs),
    #[command(subcommand)]
    Report(ReportCmd),
}

#[derive(Subcommand)]
enum DataCmd {
    /// Import a local IDX image/label pair into an archive.
    Fetch {
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate a procedural corpus.
    Synth {
        #[arg(long)]
        kind: String,
        #[arg(long)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// `channels,height,width`
        #[arg(long, default_value = "1,28,28")]
        shape: String,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainStage {
    Victim,
    Mae,
    Aux,
    Oe,
    Edm,
}

#[derive(Subcommand)]
enum AttackCmd {
    /// Generate (or reuse cached) queries for one attack of the config.
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Attack label from the config, e.g. `jbda` or `dfme-noise`.
        #[arg(long)]
        attack: String,
        /// Defaults to the largest configured budget.
        #[arg(long)]
        budget: Option<usize>,
    },
}

#[derive(Subcommand)]
enum DetectCmd {
    /// Train what is missing, calibrate, and write a detector bundle.
    Calibrate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Defaults to `<output_dir>/detector/bundle.json`.
        #[arg(long)]
        bundle: Option<PathBuf>,
    },
    /// Score every image of an archive, one JSON record per line.
    Score {
        #[arg(long)]
        bundle: PathBuf,
        /// Archive stem.
        #[arg(long)]
        input: PathBuf,
        /// Output file; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Full experiment: train, attack, score, report.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_delimiter = ',', default_value = "json,csv,markdown")]
        formats: Vec<String>,
    },
}

#[derive(Subcommand)]
enum ReportCmd {
    /// Re-render a JSON report into other formats.
    Render {
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "json,csv,markdown")]
        formats: Vec<String>,
    },
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long, default_value = "reject")]
    policy: String,
    #[arg(long, default_value = "127.0.0.1:8080")]
    addr: SocketAddr,
    #[arg(long, default_value_t = PowParams::default().base_bits)]
    base_bits: u32,
    #[arg(long, default_value_t = PowParams::default().max_bits)]
    max_bits: u32,
    #[arg(long, default_value_t = PowParams::default().slope)]
    slope: f64,
    /// Challenge lifetime in seconds.
    #[arg(long, default_value_t = 120)]
    ttl: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(short, long)]
    config: PathBuf,
    /// Override a config key, e.g. `--set data.train_count=2000`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(&self.config).with_context(|| format!("reading {}", self.config.display()))?;
        let mut table: toml::Table = text.parse().context("parsing config")?;
        for o in &self.overrides {
            let (k, v) = o.split_once('=').with_context(|| format!("override `{o}` is not KEY=VALUE"))?;
            set_key(&mut table, k.trim(), parse_value(v.trim()))?;
        }
        if let Some(s) = self.seed {
            table.insert("seed".into(), toml::Value::Integer(s as i64));
        }
        let mut cfg = ExperimentConfig::from_toml(&toml::to_string(&table)?)?;
        cfg.rebase(self.config.parent().unwrap_or(Path::new("")));
        if let Some(d) = &self.output_dir {
            cfg.output_dir = d.clone();
        }
        Ok(cfg)
    }
}

fn parse_value(v: &str) -> toml::Value {
    format!("x = {v}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("x"))
        .unwrap_or_else(|| toml::Value::String(v.to_string()))
}

fn set_key(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().context("empty override key")?;
    let mut t = table;
    for p in parts {
        t = t
            .entry(p)
            .or_insert_with(|| toml::Value::Table(toml::Table::new()))
            .as_table_mut()
            .with_context(|| format!("`{p}` in `{key}` is not a table"))?;
    }
    t.insert(last.to_string(), value);
    Ok(())
}

fn parse_formats(f: &[String]) -> Result<Vec<ReportFormat>> {
    Ok(f.iter().map(|s| s.parse()).collect::<same_core::Result<_>>()?)
}

fn parse_shape(s: &str) -> Result<Shape> {
    let v: Vec<usize> = s.split(',').map(|x| x.trim().parse()).collect::<std::result::Result<_, _>>().context("shape must be c,h,w")?;
    let [c, h, w] = v[..] else { bail!("shape must have three dimensions") };
    Ok(Shape::new(c, h, w))
}

fn main() -> Result<()> {
    let cli = Cli::parse();
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_new(&cli.log).context("log filter")?)
        .with_writer(std::io::stderr)
        .init();
    let exec = if cli.sequential { Execution::Sequential } else { Execution::default() };
    match cli.cmd {
        Command::Data(DataCmd::Fetch { images, labels, out }) => {
            let d = load_idx_dataset(&images, &labels)?;
            let provenance = serde_json::json!({"source": "idx", "images": images, "labels": labels});
            let m = save_archive(&out, &d, provenance)?;
            println!("{} samples, fingerprint {}", d.len(), m.fingerprint);
        }
        Command::Data(DataCmd::Synth { kind, count, seed, shape, out }) => {
            let k: CorpusKind = kind.parse()?;
            let d = make_synthetic_corpus(&k, count, parse_shape(&shape)?, &RngHandle::new(seed, "data"))?;
            let m = save_archive(&out, &d, serde_json::json!({"source": "synthetic", "kind": k, "seed": seed}))?;
            println!("{} samples, fingerprint {}", d.len(), m.fingerprint);
        }
        Command::Train { stage, cfg } => {
            let ws = Workspace::open(cfg.load()?, exec)?;
            let stem = match stage {
                TrainStage::Victim => ws.victim()?.1,
                TrainStage::Mae => ws.mae()?.2,
                TrainStage::Aux => {
                    let (v, _) = ws.victim()?;
                    let (m, _, _) = ws.mae()?;
                    ws.auxiliary(&v, &m)?.1
                }
                TrainStage::Oe => ws.oe()?.1,
                TrainStage::Edm => ws.edm()?.1,
            };
            println!("{}", stem.display());
        }
        Command::Attack(AttackCmd::Gen { cfg, attack, budget }) => {
            let ws = Workspace::open(cfg.load()?, exec)?;
            let spec = ws
                .cfg
                .attacks
                .iter()
                .find(|a| a.label() == attack)
                .with_context(|| format!("attack `{attack}` is not in the config"))?
                .clone();
            let budget = budget.unwrap_or_else(|| ws.cfg.max_budget());
            let (v, _) = ws.victim()?;
            let (q, stem) = ws.queries(&v, &spec, budget)?;
            println!("{} queries at {}", q.len(), stem.display());
        }
        Command::Detect(DetectCmd::Calibrate { cfg, bundle }) => {
            let ws = Workspace::open(cfg.load()?, exec)?;
            let (v, _) = ws.victim()?;
            let (m, _, _) = ws.mae()?;
            let (a, _) = ws.auxiliary(&v, &m)?;
            let det = ws.detector(v, m, a)?;
            let path = bundle.unwrap_or_else(|| ws.cfg.output_dir.join("detector").join("bundle.json"));
            let b = write_bundle(&det, &ws.data.calibration.fingerprint(), &path)?;
            println!("threshold {} written to {}", b.config.threshold.unwrap_or(f64::NAN), path.display());
        }
        Command::Detect(DetectCmd::Score { bundle, input, out }) => {
            let det = DetectorBundle::load(&bundle)?.open(&bundle)?;
            let samples = load_samples(&input)?;
            let mut w: Box<dyn std::io::Write> = match &out {
                Some(p) => Box::new(std::io::BufWriter::new(std::fs::File::create(p).with_context(|| format!("creating {}", p.display()))?)),
                None => Box::new(std::io::stdout().lock()),
            };
            for x in &samples {
                writeln!(w, "{}", serde_json::to_string(&anomaly_score(x, &det)?)?)?;
            }
        }
        Command::Eval(EvalCmd::Run { cfg, formats }) => {
            let formats = parse_formats(&formats)?;
            let mut p = Pipeline::prepare_with(cfg.load()?, exec)?;
            let report = p.evaluate()?;
            let bundle = p.ws.cfg.output_dir.join("detector").join("bundle.json");
            write_bundle(&p.detector, &p.ws.data.calibration.fingerprint(), &bundle)?;
            for f in emit_report(&report, &p.ws.cfg.output_dir, &formats)? {
                println!("{}", f.display());
            }
        }
        Command::Serve(a) => {
            let det = DetectorBundle::load(&a.bundle)?.open(&a.bundle)?;
            let policy = DefensePolicy {
                kind: a.policy.parse::<PolicyKind>()?,
                pow: PowParams {
                    base_bits: a.base_bits,
                    max_bits: a.max_bits,
                    slope: a.slope,
                },
            };
            let gw = Gateway::new(
                det,
                GatewayConfig {
                    policy,
                    challenge_ttl_secs: a.ttl,
                    seed: a.seed,
                },
            )?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(same_gateway::http::serve(Arc::new(gw), a.addr))?;
        }
        Command::Report(ReportCmd::Render { report, out, formats }) => {
            let text = std::fs::read_to_string(&report).with_context(|| format!("reading {}", report.display()))?;
            let r = ExperimentReport::from_json(&text)?;
            for f in emit_report(&r, &out, &parse_formats(&formats)?)? {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

/// Samples of an archive, whether a plain dataset or a saved query set.
fn load_samples(stem: &Path) -> Result<Vec<ImageTensor>> {
    if let Ok(q) = QuerySet::load(stem) {
        return Ok(q.samples);
    }
    Ok(load_archive(stem)?.0.samples().to_vec())
}
