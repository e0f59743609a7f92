//! The pipeline stages behind the command-line tool.
//!
//! Every stage writes result files whose bytes depend only on the
//! configuration and the inputs. Wall-clock times go to [`TIMING_LOG`] in the
//! output directory, which is the only file allowed to differ between runs.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::backbone::View;
use crate::checkpoint;
use crate::config::RunConfig;
use crate::data::{build_dataset, pad_shift, pgm_bytes, Dataset, PadMode, PadSpec, Split};
use crate::error::{Error, Result};
use crate::gradcheck::{self, GradcheckConfig, GradcheckReport};
use crate::heads::{Descriptor, Mode};
use crate::mfaf::Pooling;
use crate::model::Model;
use crate::retrieval::{write_descriptor_table, MetricReport};
use crate::tensor::mft;
use crate::tensor::Tensor;
use crate::train::{EpochStats, Trainer};

pub const TIMING_LOG: &str = "timing.log";
pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOSS_CSV: &str = "loss.csv";
/// Default strip widths of the shift sweep: seven steps up to 12 px on 32 px images.
pub const DEFAULT_PAD_PX: [usize; 7] = [0, 2, 4, 6, 8, 10, 12];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    /// Drone queries against the satellite gallery, distractors included.
    D2s,
    /// Satellite queries against the drone gallery.
    S2d,
}

impl Direction {
    pub fn as_str(self) -> &'static str {
        match self {
            Direction::D2s => "d2s",
            Direction::S2d => "s2d",
        }
    }

    pub fn query_view(self) -> View {
        match self {
            Direction::D2s => View::Drone,
            Direction::S2d => View::Satellite,
        }
    }
}

pub fn run_id(cfg: &RunConfig, command: &str) -> String {
    format!("{command}-{}-s{}", &cfg.hash()[..12], cfg.seed)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_file(path, text.as_bytes())
}

/// Appends one line with the wall-clock start, duration and run id.
pub fn log_timing(out: &Path, command: &str, run_id: &str, started: Instant) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let path = out.join(TIMING_LOG);
    let now = SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs());
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(&path, e))?;
    writeln!(
        f,
        "unix_time={now} command={command} run_id={run_id} wall_seconds={:.3}",
        started.elapsed().as_secs_f64()
    )
    .map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GenerateSummary {
    pub images: usize,
    pub manifest_sha256: String,
}

/// Renders the synthetic dataset into `dir`.
pub fn generate(cfg: &RunConfig, dir: &Path) -> Result<GenerateSummary> {
    let started = Instant::now();
    let ds = build_dataset(&cfg.dataset, cfg.seed)?;
    ds.write(dir)?;
    log_timing(dir, "generate", &run_id(cfg, "generate"), started)?;
    Ok(GenerateSummary {
        images: ds.images.len(),
        manifest_sha256: crate::data::manifest_checksum(dir)?,
    })
}

pub fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    Ok(Dataset::load(&cfg.dataset_dir)?)
}

fn loss_history(path: &Path, keep_epochs: usize) -> Vec<String> {
    let Ok(text) = fs::read_to_string(path) else {
        return Vec::new();
    };
    text.lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|e| e.parse::<usize>().ok())
                .is_some_and(|e| e <= keep_epochs)
        })
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub trainer: Trainer,
    pub epochs: Vec<EpochStats>,
}

/// Trains to `optim.epochs`, saving the checkpoint and loss table after
/// every epoch. With `resume`, training continues from that checkpoint and
/// the loss rows of the epochs it already covers are kept.
pub fn train(cfg: &RunConfig, ds: &Dataset, out: &Path, resume: Option<&Path>) -> Result<TrainSummary> {
    let started = Instant::now();
    let mut trainer = match resume {
        Some(dir) => checkpoint::load(dir, Some(cfg))?,
        None => Trainer::new(cfg.clone())?,
    };
    trainer.check_dataset(ds)?;
    write_json(&out.join("config.json"), cfg)?;
    let loss_path = out.join(LOSS_CSV);
    let mut rows = if resume.is_some() {
        loss_history(&loss_path, trainer.epoch)
    } else {
        Vec::new()
    };
    let ckpt = out.join(CHECKPOINT_DIR);
    let write_loss = |rows: &[String]| -> Result<()> {
        let mut text = format!("{}\n", EpochStats::CSV_HEADER);
        for r in rows {
            text += r;
            text.push('\n');
        }
        write_file(&loss_path, text.as_bytes())
    };
    write_loss(&rows)?;
    checkpoint::save(&ckpt, &trainer)?;
    let epochs = trainer.fit(ds, |s, t| {
        rows.push(s.csv_row());
        write_loss(&rows)?;
        checkpoint::save(&ckpt, t)
    })?;
    log_timing(out, "train", &run_id(cfg, "train"), started)?;
    Ok(TrainSummary { trainer, epochs })
}

/// Query and gallery image indices of the test split.
pub fn retrieval_sets(ds: &Dataset, direction: Direction) -> (Vec<usize>, Vec<usize>) {
    let qv = direction.query_view();
    let queries = ds
        .select(Split::Test, qv)
        .into_iter()
        .filter(|&i| !ds.manifest.images[i].distractor)
        .collect();
    (queries, ds.select(Split::Test, qv.other()))
}

pub fn descriptors(model: &Model<f32>, ds: &Dataset, idx: &[usize], pad: Option<PadSpec>) -> Result<Vec<Descriptor>> {
    idx.iter()
        .map(|&i| -> Result<Descriptor> {
            Ok(match pad {
                Some(p) if p.px > 0 => model.descriptor(&pad_shift(&ds.images[i], p)?)?,
                _ => model.descriptor(&ds.images[i])?,
            })
        })
        .collect()
}

/// Metrics with every query shifted by `pad`; `None` is the plain evaluation.
pub fn metrics(
    model: &Model<f32>,
    ds: &Dataset,
    cfg: &RunConfig,
    direction: Direction,
    pad: Option<PadSpec>,
) -> Result<MetricReport> {
    let (q, g) = retrieval_sets(ds, direction);
    let queries = descriptors(model, ds, &q, pad)?;
    let gallery = descriptors(model, ds, &g, None)?;
    Ok(MetricReport::evaluate(&queries, &gallery, &cfg.metrics)?)
}

/// One metric value in long format.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ResultsRow {
    pub run_id: String,
    pub config_hash: String,
    pub metric: String,
    pub k: Option<usize>,
    pub value: f64,
}

impl ResultsRow {
    pub const CSV_HEADER: &'static str = "run_id,config_hash,metric,k,value";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{:.6}",
            self.run_id,
            self.config_hash,
            self.metric,
            self.k.map_or(String::new(), |k| k.to_string()),
            self.value
        )
    }

    pub fn from_report(run_id: &str, cfg: &RunConfig, r: &MetricReport) -> Vec<Self> {
        let row = |metric: &str, k, value| ResultsRow {
            run_id: run_id.to_string(),
            config_hash: cfg.hash(),
            metric: metric.to_string(),
            k,
            value,
        };
        let mut rows: Vec<Self> = r.recall_at.iter().map(|(&k, &v)| row("recall", Some(k), v)).collect();
        rows.push(row("ap", None, r.ap_mean));
        rows.extend(r.sdm_at.iter().map(|(&k, &v)| row("sdm", Some(k), v)));
        rows
    }
}

fn results_csv(rows: &[ResultsRow]) -> String {
    let mut s = format!("{}\n", ResultsRow::CSV_HEADER);
    for r in rows {
        s += &r.csv_row();
        s.push('\n');
    }
    s
}

fn channel_mean(t: &Tensor<f32>) -> Vec<f32> {
    let c = *t.shape().last().unwrap_or(&1);
    t.data()
        .chunks_exact(c.max(1))
        .map(|px| px.iter().sum::<f32>() / c as f32)
        .collect()
}

/// Writes `W_freq` of every active branch and `W_edge` for one image as MFT1
/// tensors, with min-max scaled PGM previews (the channel mean of `W_freq`
/// and `W_edge` laid out as one row per direction).
pub fn dump_attention(model: &Model<f32>, pixels: &Tensor<f32>, dir: &Path) -> Result<Vec<PathBuf>> {
    let (_, cache) = model.forward(&[pixels], Mode::Test)?;
    let m = cache.mfaf(0);
    let mut written = Vec::new();
    let mut emit = |stem: String, t: &Tensor<f32>, w: usize, h: usize, preview: Vec<f32>| -> Result<()> {
        let base = dir.join(stem);
        let mft_path = base.with_extension("mft");
        write_file(&mft_path, &mft::encode(t))?;
        let pgm_path = base.with_extension("pgm");
        write_file(&pgm_path, &pgm_bytes(w, h, &preview))?;
        written.push(mft_path);
        written.push(pgm_path);
        Ok(())
    };
    for b in model.active_branches() {
        if let Some(fsa) = m.attention(b) {
            let w = fsa.attention();
            let (h, wd) = (w.shape()[0], w.shape()[1]);
            emit(format!("w_freq_{}", b.as_str()), w, wd, h, channel_mean(w))?;
        }
    }
    if let Some(hf) = m.high_freq() {
        let e = hf.edge_weights();
        let c = e.len() / 4;
        emit("w_edge_hf".into(), e, c, 4, e.data().to_vec())?;
    }
    Ok(written)
}

#[derive(Debug, Clone)]
pub struct EvaluateSummary {
    pub report: MetricReport,
    pub rows: Vec<ResultsRow>,
}

/// Evaluates one direction and writes the metric report, the long-format
/// results table, both descriptor tables and the attention maps of the first
/// query.
pub fn evaluate(
    cfg: &RunConfig,
    model: &Model<f32>,
    ds: &Dataset,
    direction: Direction,
    out: &Path,
) -> Result<EvaluateSummary> {
    let started = Instant::now();
    let d = direction.as_str();
    let (q, g) = retrieval_sets(ds, direction);
    let queries = descriptors(model, ds, &q, None)?;
    let gallery = descriptors(model, ds, &g, None)?;
    let report = MetricReport::evaluate(&queries, &gallery, &cfg.metrics)?;
    let id = run_id(cfg, &format!("evaluate-{d}"));
    let rows = ResultsRow::from_report(&id, cfg, &report);
    write_json(&out.join(format!("metrics_{d}.json")), &report)?;
    write_file(&out.join(format!("metrics_{d}.csv")), results_csv(&rows).as_bytes())?;
    write_descriptor_table(&out.join(format!("descriptors_{d}_query.mft")), &queries)?;
    write_descriptor_table(&out.join(format!("descriptors_{d}_gallery.mft")), &gallery)?;
    if let Some(&first) = q.first() {
        dump_attention(model, &ds.images[first].pixels, &out.join(format!("attention_{d}")))?;
    }
    log_timing(out, "evaluate", &id, started)?;
    Ok(EvaluateSummary { report, rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ShiftRow {
    pub pad_mode: PadMode,
    pub pad_px: usize,
    pub r1: f64,
    pub ap: f64,
    /// Drop from the unshifted value; positive means worse.
    pub decline_r1: f64,
    pub decline_ap: f64,
}

impl ShiftRow {
    pub const CSV_HEADER: &'static str = "pad_mode,pad_px,r@1,ap,decline_r1,decline_ap";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6}",
            self.pad_mode.as_str(),
            self.pad_px,
            self.r1,
            self.ap,
            self.decline_r1,
            self.decline_ap
        )
    }
}

/// True when R@1 and AP never increase along the rows.
pub fn is_monotone(rows: &[ShiftRow]) -> bool {
    rows.windows(2).all(|w| w[1].r1 <= w[0].r1 && w[1].ap <= w[0].ap)
}

fn recall_at_1(r: &MetricReport) -> Result<f64> {
    r.r1()
        .ok_or_else(|| Error::Config("metrics.recall_ks must include 1".into()))
}

/// Shifts every query by each width in `pad_px` and reports the drop from
/// the unshifted evaluation.
pub fn shift_robustness(
    cfg: &RunConfig,
    model: &Model<f32>,
    ds: &Dataset,
    direction: Direction,
    mode: PadMode,
    pad_px: &[usize],
    out: &Path,
) -> Result<Vec<ShiftRow>> {
    let started = Instant::now();
    let base = metrics(model, ds, cfg, direction, None)?;
    let (r1_0, ap_0) = (recall_at_1(&base)?, base.ap_mean);
    let mut rows = Vec::with_capacity(pad_px.len());
    for &px in pad_px {
        let r = if px == 0 {
            base.clone()
        } else {
            metrics(model, ds, cfg, direction, Some(PadSpec { mode, px }))?
        };
        let r1 = recall_at_1(&r)?;
        rows.push(ShiftRow {
            pad_mode: mode,
            pad_px: px,
            r1,
            ap: r.ap_mean,
            decline_r1: r1_0 - r1,
            decline_ap: ap_0 - r.ap_mean,
        });
    }
    let stem = format!("shift_{}_{}", direction.as_str(), mode.as_str());
    let mut csv = format!("{}\n", ShiftRow::CSV_HEADER);
    for r in &rows {
        csv += &r.csv_row();
        csv.push('\n');
    }
    write_file(&out.join(format!("{stem}.csv")), csv.as_bytes())?;
    write_json(&out.join(format!("{stem}.json")), &rows)?;
    log_timing(out, "shift-robustness", &run_id(cfg, &stem), started)?;
    Ok(rows)
}

/// Runs every registered gradient check and writes the report as JSON and CSV.
pub fn gradcheck(cfg: &GradcheckConfig, out: &Path) -> Result<GradcheckReport> {
    let started = Instant::now();
    let report = gradcheck::run(&gradcheck::registry(), cfg);
    write_json(&out.join("gradcheck.json"), &report)?;
    write_file(&out.join("gradcheck.csv"), report.csv().as_bytes())?;
    log_timing(out, "gradcheck", &format!("gradcheck-s{}", cfg.seed), started)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    /// `branches` or `pooling`.
    pub group: &'static str,
    pub cell: String,
    pub hf_branch: bool,
    pub lf_branch: bool,
    pub pooling: Pooling,
    pub r1: f64,
    pub ap: f64,
}

impl AblationRow {
    pub const CSV_HEADER: &'static str = "group,cell,hf_branch,lf_branch,pooling,r@1,ap";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{:.6}",
            self.group,
            self.cell,
            self.hf_branch,
            self.lf_branch,
            self.pooling.as_str(),
            self.r1,
            self.ap
        )
    }
}

/// The ablation cells derived from a base configuration: the full model with
/// HF or LF switched off, then the full model with each channel pooling.
pub fn ablation_cells(base: &RunConfig) -> Vec<(&'static str, String, RunConfig)> {
    let mut cells = Vec::new();
    let full = |hf, lf, pooling| {
        let mut c = base.clone();
        c.mfaf.hf_branch = hf;
        c.mfaf.lf_branch = lf;
        c.mfaf.pooling = pooling;
        c
    };
    let p = base.mfaf.pooling;
    cells.push(("branches", "full".to_string(), full(true, true, p)));
    cells.push(("branches", "hf-off".to_string(), full(false, true, p)));
    cells.push(("branches", "lf-off".to_string(), full(true, false, p)));
    for pooling in [Pooling::Zpool, Pooling::Aap, Pooling::Ap, Pooling::Mp] {
        cells.push(("pooling", pooling.as_str().to_string(), full(true, true, pooling)));
    }
    cells
}

/// Trains and evaluates (drone to satellite) every ablation cell and writes
/// `ablation.csv`. Cells with an identical configuration are trained once.
pub fn ablation(base: &RunConfig, ds: &Dataset, out: &Path) -> Result<Vec<AblationRow>> {
    let started = Instant::now();
    let mut done: Vec<(String, f64, f64)> = Vec::new();
    let mut rows = Vec::new();
    for (group, cell, cfg) in ablation_cells(base) {
        let hash = cfg.hash();
        let (r1, ap) = match done.iter().find(|(h, _, _)| *h == hash) {
            Some(&(_, r1, ap)) => (r1, ap),
            None => {
                let mut trainer = Trainer::new(cfg.clone())?;
                trainer.fit(ds, |_, _| Ok(()))?;
                let r = metrics(&trainer.model, ds, &cfg, Direction::D2s, None)?;
                let v = (recall_at_1(&r)?, r.ap_mean);
                log::info!("ablation {group}/{cell}: R@1 {:.3} AP {:.3}", v.0, v.1);
                done.push((hash, v.0, v.1));
                v
            }
        };
        rows.push(AblationRow {
            group,
            cell,
            hf_branch: cfg.mfaf.hf_branch,
            lf_branch: cfg.mfaf.lf_branch,
            pooling: cfg.mfaf.pooling,
            r1,
            ap,
        });
    }
    let mut csv = format!("{}\n", AblationRow::CSV_HEADER);
    for r in &rows {
        csv += &r.csv_row();
        csv.push('\n');
    }
    write_file(&out.join("ablation.csv"), csv.as_bytes())?;
    log_timing(out, "ablate", &run_id(base, "ablate"), started)?;
    Ok(rows)
}
