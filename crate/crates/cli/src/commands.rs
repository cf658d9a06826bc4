//! Implementations of the `train`, `eval`, `analyze` and `sweep` commands.
//!
//! Run directory layout: `config.snapshot`, `metrics.log`, `ckpt/epoch-N`,
//! `ckpt/averaged`, `dumps/<split>-<site>.attn`, `reports/`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use sahr::analysis::{
    build_heatmap, edit_distance_wer, head_similarity, mapsswe, similarity_by_layer, Heatmap,
    PrunePlan, SegmentErrors,
};
use sahr::attention::{read_dump, write_dump, DumpRecord, Site};
use sahr::model::{load_checkpoint, save_checkpoint};
use sahr::tasks::{generate, Dataset};
use sahr::training::{evaluate, metrics_log, similarity_summary, site_records, train, EvalReport, TrainOutcome};
use sahr::{Dataset64, Model64};

use crate::config::RunConfig;

pub const SNAPSHOT_FILE: &str = "config.snapshot";
pub const METRICS_FILE: &str = "metrics.log";
pub const AVERAGED_CKPT: &str = "ckpt/averaged";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Dev,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = anyhow::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "dev" => Ok(Split::Dev),
            "test" => Ok(Split::Test),
            other => bail!("unknown split `{other}`; expected train, dev or test"),
        }
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn load_plans(cfg: &RunConfig) -> Result<Vec<PrunePlan>> {
    cfg.prune_plans
        .iter()
        .map(|p| {
            let text = fs::read_to_string(p).with_context(|| format!("reading prune plan {}", p.display()))?;
            PrunePlan::parse(&text).with_context(|| format!("in prune plan {}", p.display()))
        })
        .collect()
}

fn dataset(cfg: &RunConfig, split: Split) -> Result<Dataset64> {
    let splits = generate::<f64>(&cfg.task_spec()?)?;
    Ok(match split {
        Split::Train => splits.train,
        Split::Dev => splits.dev,
        Split::Test => splits.test,
    })
}

/// Empties `dir` for a new run. An existing non-empty directory is only
/// replaced with `overwrite`, and only if it holds a config snapshot.
fn prepare_run_dir(dir: &Path, overwrite: bool) -> Result<()> {
    let occupied = dir.exists() && fs::read_dir(dir)?.next().is_some();
    if occupied {
        if !overwrite {
            bail!("output directory {} already exists; pass --overwrite to replace it", dir.display());
        }
        if !dir.join(SNAPSHOT_FILE).exists() {
            bail!("refusing to overwrite {}: it does not look like a run directory", dir.display());
        }
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Trains one configuration into `dir` and writes every run artifact.
pub fn train_run(cfg: &RunConfig, overrides: &[String], dir: &Path, overwrite: bool) -> Result<TrainOutcome<f64>> {
    cfg.validate()?;
    let plans = load_plans(cfg)?;
    let spec = cfg.task_spec()?;
    let splits = generate::<f64>(&spec)?;
    prepare_run_dir(dir, overwrite)?;
    write_file(&dir.join(SNAPSHOT_FILE), cfg.snapshot(overrides)?)?;
    let ckpt_dir = dir.join("ckpt");
    fs::create_dir_all(&ckpt_dir)?;
    let mut hook = |epoch: usize, params: &sahr::params::ParamStore<f64>| {
        save_checkpoint(params, &ckpt_dir.join(format!("epoch-{epoch}")))
    };
    let outcome = train(
        &cfg.model_config()?,
        &plans,
        &splits.train,
        &splits.dev,
        &cfg.train_config(),
        cfg.seed,
        &mut hook,
    )?;
    write_file(&dir.join(METRICS_FILE), metrics_log(&outcome.metrics))?;
    save_checkpoint(&outcome.averaged, &dir.join(AVERAGED_CKPT))?;
    Ok(outcome)
}

/// Builds the configured model and loads `checkpoint` into it.
pub fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<Model64> {
    let params = load_checkpoint::<f64>(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model64::new(cfg.model_config()?, &mut rng)?;
    model
        .load_params(&params)
        .with_context(|| format!("checkpoint {} does not match the configured model", checkpoint.display()))?;
    for plan in load_plans(cfg)? {
        model.apply_prune_plan(&plan)?;
    }
    Ok(model)
}

/// `key=value` lines describing an evaluation.
pub fn eval_report_text(split: Split, utterances: usize, rep: &EvalReport<f64>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "split={}", split.as_str());
    let _ = writeln!(s, "utterances={utterances}");
    let _ = writeln!(s, "loss={}", rep.loss);
    let _ = writeln!(s, "loss_dec={}", rep.loss_dec);
    let _ = writeln!(s, "loss_ctc={}", rep.loss_ctc);
    let _ = writeln!(s, "acc={}", rep.acc);
    if let Some(g) = rep.greedy {
        let _ = writeln!(s, "greedy_acc={}", g.token_accuracy);
        let _ = writeln!(s, "wer={}", g.wer);
        let _ = writeln!(s, "errors={}", g.errors);
        let _ = writeln!(s, "ref_tokens={}", g.ref_tokens);
        let _ = writeln!(s, "exact_sequences={}", g.exact_sequences);
    }
    s
}

fn token_lines(seqs: &[Vec<usize>]) -> String {
    seqs.iter()
        .map(|s| s.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ") + "\n")
        .collect()
}

pub struct EvalRequest<'a> {
    pub checkpoint: &'a Path,
    pub split: Split,
    pub dump_attention: bool,
    /// Evaluate only the first `limit` utterances.
    pub limit: Option<usize>,
    pub out_dir: &'a Path,
}

/// Evaluates with every head active and writes `reports/eval-<split>.txt`,
/// hypothesis and reference token files, and attention dumps when requested.
pub fn eval_run(cfg: &RunConfig, req: &EvalRequest<'_>) -> Result<EvalReport<f64>> {
    cfg.validate()?;
    let model = load_model(cfg, req.checkpoint)?;
    let mut data = dataset(cfg, req.split)?;
    if let Some(n) = req.limit {
        data.examples.truncate(n);
    }
    if data.is_empty() {
        bail!("split {} has no utterances to evaluate", req.split.as_str());
    }
    let rep = evaluate(&model, &data, cfg.train.batch_size, true, req.dump_attention)?;
    let split = req.split.as_str();
    let reports = req.out_dir.join("reports");
    write_file(&reports.join(format!("eval-{split}.txt")), eval_report_text(req.split, data.len(), &rep))?;
    write_file(&reports.join(format!("hyp-{split}.txt")), token_lines(&rep.hypotheses))?;
    let refs: Vec<Vec<usize>> = data.examples.iter().map(|e| e.target.clone()).collect();
    write_file(&reports.join(format!("ref-{split}.txt")), token_lines(&refs))?;
    if req.dump_attention {
        for site in Site::ALL {
            let recs = site_records(&rep.records, site)?;
            if recs.is_empty() {
                continue;
            }
            let mut buf = Vec::new();
            write_dump(&mut buf, &recs)?;
            write_file(&req.out_dir.join("dumps").join(format!("{split}-{site}.attn")), buf)?;
        }
    }
    Ok(rep)
}

pub fn read_dumps(paths: &[PathBuf]) -> Result<Vec<DumpRecord>> {
    let mut all = Vec::new();
    for p in paths {
        let bytes = fs::read(p).with_context(|| format!("reading {}", p.display()))?;
        all.extend(read_dump(&bytes).with_context(|| format!("in dump {}", p.display()))?);
    }
    Ok(all)
}

fn of_site(records: Vec<DumpRecord>, site: Site) -> Result<Vec<DumpRecord>> {
    let recs: Vec<DumpRecord> = records.into_iter().filter(|r| r.site == site).collect();
    if recs.is_empty() {
        bail!("no {site} attention in the given dumps");
    }
    Ok(recs)
}

pub fn heatmap_report(dumps: &[PathBuf], site: Site) -> Result<Heatmap> {
    Ok(build_heatmap(&of_site(read_dumps(dumps)?, site)?)?)
}

/// Parses the `layer,head,diagonality` CSV written by `analyze heatmap`.
pub fn parse_heatmap_csv(text: &str, site: Site) -> Result<Heatmap> {
    let mut cells = Vec::new();
    for (i, line) in text.lines().enumerate().skip(1) {
        if line.trim().is_empty() {
            continue;
        }
        let bad = || anyhow!("heatmap line {}: expected `layer,head,diagonality`", i + 1);
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 3 {
            return Err(bad());
        }
        let l: usize = f[0].trim().parse().map_err(|_| bad())?;
        let h: usize = f[1].trim().parse().map_err(|_| bad())?;
        let d: f64 = f[2].trim().parse().map_err(|_| bad())?;
        cells.push((l, h, d));
    }
    let layers = cells.iter().map(|c| c.0 + 1).max().unwrap_or(0);
    let heads = cells.iter().map(|c| c.1 + 1).max().unwrap_or(0);
    if layers == 0 || layers * heads != cells.len() {
        bail!("heatmap cells do not cover a full layer × head grid");
    }
    let mut values = vec![vec![f64::NAN; heads]; layers];
    for (l, h, d) in cells {
        values[l][h] = d;
    }
    if values.iter().flatten().any(|v| v.is_nan()) {
        bail!("heatmap has duplicate or missing cells");
    }
    Ok(Heatmap {
        site,
        values,
        utterances: 0,
    })
}

/// Per-layer and overall mean head similarity for every site in the dumps.
pub fn similarity_report(dumps: &[PathBuf], site: Option<Site>) -> Result<String> {
    let records = read_dumps(dumps)?;
    let sites: Vec<Site> = match site {
        Some(s) => vec![s],
        None => Site::ALL.into_iter().filter(|s| records.iter().any(|r| r.site == *s)).collect(),
    };
    if sites.is_empty() {
        bail!("the given dumps hold no attention records");
    }
    let mut s = String::from("site,layer,similarity\n");
    let mut all = Vec::new();
    for site in sites {
        let recs = of_site(records.clone(), site)?;
        head_similarity(&recs).with_context(|| format!("similarity of {site}"))?;
        for (layer, sim) in similarity_by_layer(&recs)? {
            let _ = writeln!(s, "{site},{layer},{}", sim.mean);
            all.push(sim.mean);
        }
    }
    let _ = writeln!(s, "mean,,{}", all.iter().sum::<f64>() / all.len() as f64);
    Ok(s)
}

fn read_segments(path: &Path) -> Result<Vec<Vec<String>>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(text
        .lines()
        .map(|l| l.split_whitespace().map(str::to_string).collect())
        .collect())
}

/// Corpus WER of `hyp` against `reference`, one segment per line.
pub fn wer_report(reference: &Path, hyp: &Path) -> Result<String> {
    let refs = read_segments(reference)?;
    let hyps = read_segments(hyp)?;
    if refs.len() != hyps.len() {
        bail!("{} reference segments but {} hypothesis segments", refs.len(), hyps.len());
    }
    let (mut s, mut d, mut i, mut n) = (0, 0, 0, 0);
    for (r, h) in refs.iter().zip(&hyps) {
        let w = edit_distance_wer(r, h);
        s += w.substitutions;
        d += w.deletions;
        i += w.insertions;
        n += w.ref_len;
    }
    Ok(format!(
        "segments={}\nref_words={n}\nsubstitutions={s}\ndeletions={d}\ninsertions={i}\nwer={}\n",
        refs.len(),
        (s + d + i) as f64 / n.max(1) as f64
    ))
}

/// Matched-pairs significance of system A against system B.
pub fn mapsswe_report(reference: &Path, hyp_a: &Path, hyp_b: &Path) -> Result<String> {
    let refs = read_segments(reference)?;
    let a = SegmentErrors::from_segments(&refs, &read_segments(hyp_a)?)?;
    let b = SegmentErrors::from_segments(&refs, &read_segments(hyp_b)?)?;
    let m = mapsswe(&a, &b)?;
    Ok(format!(
        "segments={}\nmean_difference={}\nz={}\np={}\n",
        m.segments, m.mean_difference, m.z, m.p
    ))
}

/// One row of the sweep summary.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepRow {
    pub q: f64,
    pub seed: u64,
    pub status: String,
    pub dev_loss: Option<f64>,
    pub acc: Option<f64>,
    pub wer: Option<f64>,
    pub similarity: Option<f64>,
}

pub const SUMMARY_HEADER: &str = "q,seed,status,dev_loss,acc,wer,similarity";

impl SweepRow {
    pub fn csv(&self) -> String {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        format!(
            "{},{},{},{},{},{},{}",
            self.q,
            self.seed,
            self.status.replace([',', '\n'], ";"),
            cell(self.dev_loss),
            cell(self.acc),
            cell(self.wer),
            cell(self.similarity)
        )
    }
}

pub fn run_dir_name(q: f64, seed: u64) -> String {
    format!("q{q}-seed{seed}")
}

fn sweep_one(base: &RunConfig, overrides: &[String], q: f64, seed: u64, dir: &Path, overwrite: bool) -> Result<SweepRow> {
    let mut run_overrides = overrides.to_vec();
    run_overrides.push(format!("model.sahr_q={q}"));
    run_overrides.push(format!("seed={seed}"));
    run_overrides.push(format!("output_dir=\"{}\"", dir.display().to_string().replace('\\', "\\\\")));
    let cfg = RunConfig::from_toml(&toml::to_string(base)?, &run_overrides)?;
    train_run(&cfg, &run_overrides, dir, overwrite)?;
    let model = load_model(&cfg, &dir.join(AVERAGED_CKPT))?;
    let dev: Dataset<f64> = dataset(&cfg, Split::Dev)?;
    let rep = evaluate(&model, &dev, cfg.train.batch_size, true, true)?;
    write_file(
        &dir.join("reports").join("eval-dev.txt"),
        eval_report_text(Split::Dev, dev.len(), &rep),
    )?;
    let similarity = similarity_summary(&rep.records).ok().map(|s| s.mean);
    let greedy = rep.greedy.ok_or_else(|| anyhow!("evaluation did not decode"))?;
    Ok(SweepRow {
        q,
        seed,
        status: "ok".into(),
        dev_loss: Some(rep.loss),
        acc: Some(greedy.token_accuracy),
        wer: Some(greedy.wer),
        similarity,
    })
}

/// Trains every `(q, seed)` pair into `out/q<q>-seed<seed>` and writes
/// `out/summary.csv`. A failed run is recorded and the sweep continues.
pub fn sweep(base: &RunConfig, overrides: &[String], qs: &[f64], seeds: &[u64], out: &Path, overwrite: bool) -> Result<Vec<SweepRow>> {
    if qs.is_empty() || seeds.is_empty() {
        bail!("sweep needs at least one q and one seed");
    }
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut rows = Vec::new();
    for &q in qs {
        for &seed in seeds {
            let dir = out.join(run_dir_name(q, seed));
            let row = sweep_one(base, overrides, q, seed, &dir, overwrite).unwrap_or_else(|e| SweepRow {
                q,
                seed,
                status: format!("failed: {e:#}"),
                dev_loss: None,
                acc: None,
                wer: None,
                similarity: None,
            });
            rows.push(row);
        }
    }
    let mut csv = format!("{SUMMARY_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    write_file(&out.join("summary.csv"), csv)?;
    Ok(rows)
}
