//! Command-line front end: `sahr train | eval | analyze | sweep`.

pub mod commands;
pub mod config;

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sahr::analysis::{plan_from_threshold, PrunePlan};
use sahr::attention::Site;

use commands::{EvalRequest, Split, AVERAGED_CKPT, SNAPSHOT_FILE};
use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "sahr", version, about = "Stochastic attention head removal experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one configuration and write a run directory.
    Train(TrainArgs),
    /// Evaluate a checkpoint with every head active.
    Eval(EvalArgs),
    /// Attention and scoring reports.
    #[command(subcommand)]
    Analyze(AnalyzeCommand),
    /// Train every (q, seed) combination and summarise.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a key, e.g. `--set sahr_q=0.125` or `--set train.epochs=5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => RunConfig::load(p, &self.overrides),
            None => RunConfig::from_toml("", &self.overrides),
        }
    }

    fn run_name(&self) -> String {
        self.config
            .as_deref()
            .and_then(Path::file_stem)
            .map_or_else(|| "run".to_string(), |s| s.to_string_lossy().into_owned())
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Replace an existing run directory.
    #[arg(long)]
    pub overwrite: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Run directory; supplies the config snapshot, the averaged checkpoint and the output location.
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, default_value = "dev")]
    pub split: Split,
    /// Write ATTNDMP1 files under `dumps/`.
    #[arg(long)]
    pub dump_attention: bool,
    /// Evaluate only the first N utterances.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Directory receiving `reports/` and `dumps/`; defaults to the run directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum AnalyzeCommand {
    /// Mean diagonality per (layer, head) as CSV.
    Heatmap {
        #[arg(long = "dump", required = true)]
        dumps: Vec<PathBuf>,
        #[arg(long, default_value = "encoder-self")]
        site: Site,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the heatmap as a whitespace-separated matrix.
        #[arg(long)]
        matrix_out: Option<PathBuf>,
    },
    /// Mean inter-head similarity per layer.
    Similarity {
        #[arg(long = "dump", required = true)]
        dumps: Vec<PathBuf>,
        #[arg(long)]
        site: Option<Site>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Static prune plan from a heatmap threshold or topmost-layer removal.
    Plan {
        /// Heatmap CSV written by `analyze heatmap`.
        #[arg(long, conflicts_with = "dumps")]
        heatmap: Option<PathBuf>,
        #[arg(long = "dump")]
        dumps: Vec<PathBuf>,
        #[arg(long, default_value = "encoder-self")]
        site: Site,
        /// Remove heads whose diagonality exceeds this value.
        #[arg(long, conflicts_with = "topmost")]
        tau: Option<f64>,
        /// Remove every head of the last layer.
        #[arg(long)]
        topmost: bool,
        /// Grid size for `--topmost` without a heatmap.
        #[arg(long, requires = "heads")]
        layers: Option<usize>,
        #[arg(long, requires = "layers")]
        heads: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Corpus word error rate.
    Wer {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        hypothesis: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Matched-pairs segment error significance test between two systems.
    Mapsswe {
        #[arg(long)]
        reference: PathBuf,
        #[arg(long)]
        hyp_a: PathBuf,
        #[arg(long)]
        hyp_b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Removal probabilities, comma separated.
    #[arg(long = "q", value_delimiter = ',', required = true)]
    pub qs: Vec<f64>,
    #[arg(long, value_delimiter = ',', required = true)]
    pub seeds: Vec<u64>,
    /// Sweep directory; defaults to the configured output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub overwrite: bool,
}

fn emit(text: &str, out: Option<&Path>) -> Result<()> {
    print!("{text}");
    if let Some(p) = out {
        if let Some(parent) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        fs::write(p, text).with_context(|| format!("writing {}", p.display()))?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Sweep(a) => cmd_sweep(a),
    }
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let dir = cfg.resolve_output_dir(&a.config.run_name());
    let outcome = commands::train_run(&cfg, &a.config.overrides, &dir, a.overwrite)?;
    if let Some(last) = outcome.metrics.last() {
        println!("{last}");
    }
    println!("run directory: {}", dir.display());
    Ok(())
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let cfg = match (&a.run, &a.config.config) {
        (Some(run), None) => RunConfig::load(&run.join(SNAPSHOT_FILE), &a.config.overrides)?,
        (None, Some(_)) => a.config.load()?,
        (Some(_), Some(_)) => bail!("give either --run or --config, not both"),
        (None, None) => bail!("eval needs --run or --config"),
    };
    let checkpoint = match (&a.checkpoint, &a.run) {
        (Some(c), _) => c.clone(),
        (None, Some(run)) => run.join(AVERAGED_CKPT),
        (None, None) => bail!("eval with --config needs --checkpoint"),
    };
    let out = match (&a.out, &a.run) {
        (Some(o), _) => o.clone(),
        (None, Some(run)) => run.clone(),
        (None, None) => bail!("eval with --config needs --out"),
    };
    let rep = commands::eval_run(
        &cfg,
        &EvalRequest {
            checkpoint: &checkpoint,
            split: a.split,
            dump_attention: a.dump_attention,
            limit: a.limit,
            out_dir: &out,
        },
    )?;
    let n = rep.hypotheses.len();
    print!("{}", commands::eval_report_text(a.split, n, &rep));
    Ok(())
}

fn cmd_analyze(a: AnalyzeCommand) -> Result<()> {
    match a {
        AnalyzeCommand::Heatmap {
            dumps,
            site,
            out,
            matrix_out,
        } => {
            let hm = commands::heatmap_report(&dumps, site)?;
            if let Some(p) = matrix_out {
                fs::write(&p, hm.to_matrix_text()).with_context(|| format!("writing {}", p.display()))?;
            }
            emit(&hm.to_csv(), out.as_deref())
        }
        AnalyzeCommand::Similarity { dumps, site, out } => {
            emit(&commands::similarity_report(&dumps, site)?, out.as_deref())
        }
        AnalyzeCommand::Plan {
            heatmap,
            dumps,
            site,
            tau,
            topmost,
            layers,
            heads,
            out,
        } => {
            let hm = match (&heatmap, dumps.is_empty()) {
                (Some(p), _) => {
                    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    Some(commands::parse_heatmap_csv(&text, site)?)
                }
                (None, false) => Some(commands::heatmap_report(&dumps, site)?),
                (None, true) => None,
            };
            let plan = match (tau, topmost) {
                (Some(t), false) => {
                    let hm = hm.context("--tau needs --heatmap or --dump")?;
                    plan_from_threshold(&hm, t)?
                }
                (None, true) => {
                    let (l, h) = match (&hm, layers, heads) {
                        (_, Some(l), Some(h)) => (l, h),
                        (Some(hm), _, _) => (hm.layers(), hm.heads()),
                        _ => bail!("--topmost needs --heatmap, --dump, or --layers and --heads"),
                    };
                    PrunePlan::remove_topmost(site, l, h)
                }
                _ => bail!("give exactly one of --tau or --topmost"),
            };
            if let Some(parent) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(parent)?;
            }
            fs::write(&out, plan.to_text()).with_context(|| format!("writing {}", out.display()))?;
            println!(
                "site={} total={} kept={} removed={}",
                plan.site,
                plan.total(),
                plan.remaining(),
                plan.removed()
            );
            Ok(())
        }
        AnalyzeCommand::Wer {
            reference,
            hypothesis,
            out,
        } => emit(&commands::wer_report(&reference, &hypothesis)?, out.as_deref()),
        AnalyzeCommand::Mapsswe {
            reference,
            hyp_a,
            hyp_b,
            out,
        } => emit(&commands::mapsswe_report(&reference, &hyp_a, &hyp_b)?, out.as_deref()),
    }
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let cfg = a.config.load()?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| cfg.resolve_output_dir(&format!("{}-sweep", a.config.run_name())));
    let base = RunConfig {
        output_dir: None,
        ..cfg
    };
    let rows = commands::sweep(&base, &a.config.overrides, &a.qs, &a.seeds, &out, a.overwrite)?;
    println!("{}", commands::SUMMARY_HEADER);
    for r in &rows {
        println!("{}", r.csv());
    }
    let failed = rows.iter().filter(|r| r.status != "ok").count();
    if failed > 0 {
        bail!("{failed} of {} sweep runs failed; see {}", rows.len(), out.join("summary.csv").display());
    }
    Ok(())
}
