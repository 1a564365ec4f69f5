//! Subcommand implementations. Each takes a validated [`RunConfig`] and
//! explicit paths so it can be driven from tests without a process.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ecgmoe::beats::{detect_r_peaks, segment_beats};
use ecgmoe::model::PreparedRecord;
use ecgmoe::signal::{load_record, EcgRecord};
use ecgmoe::training::{self, load_checkpoint, save_checkpoint, MetricsReport, TrainReport};
use ecgmoe::{Model64, Task};
use serde::{Deserialize, Serialize};

use crate::args::{Cli, Command, SplitArg};
use crate::config::RunConfig;
use crate::dataset::{self, Dataset, Split};
use crate::CliError;

/// Resolved paths of one invocation: flags override the config.
#[derive(Clone, Debug)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub out_dir: PathBuf,
    pub checkpoint: PathBuf,
    /// Whether `--out` was given; dumps go to stdout otherwise.
    pub out_given: bool,
}

impl Paths {
    pub fn resolve(cfg: &RunConfig, cli: &Cli) -> Paths {
        let out_dir = cli.out.clone().unwrap_or_else(|| cfg.paths.out_dir.clone());
        let checkpoint = cli.checkpoint.clone().unwrap_or_else(|| match (&cli.out, &cfg.paths.checkpoint) {
            (_, Some(p)) if cli.out.is_none() => p.clone(),
            _ => out_dir.join("model.ckpt"),
        });
        Paths {
            data_dir: cli.data.clone().unwrap_or_else(|| cfg.paths.data_dir.clone()),
            out_dir,
            checkpoint,
            out_given: cli.out.is_some(),
        }
    }
}

/// Loads the config named on the command line (or the defaults), applies
/// `--seed` and revalidates.
pub fn load_config(cli: &Cli) -> Result<RunConfig, CliError> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.override_seed(seed);
    }
    Ok(cfg)
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = load_config(cli)?;
    let paths = Paths::resolve(&cfg, cli);
    match &cli.command {
        Command::Synth => {
            let n = synth(&cfg, &paths.data_dir)?;
            log::info!("wrote {n} records to {}", paths.data_dir.display());
        }
        Command::Train => {
            let data = load_or_generate(&cfg, &paths.data_dir)?;
            let out = train(&cfg, &data, &paths.out_dir, &paths.checkpoint)?;
            if let Some(test) = &out.test {
                println!("{}", to_json(test)?);
            }
        }
        Command::Eval { split } => {
            let data = load_or_generate(&cfg, &paths.data_dir)?;
            let model = load_model(&cfg, &paths.checkpoint)?;
            let report = eval(&cfg, &model, &data, *split)?;
            create_dir(&paths.out_dir)?;
            write_file(&paths.out_dir.join("eval.json"), to_json(&report)?.as_bytes())?;
            println!("{}", to_json(&report)?);
        }
        Command::Bench { split, batch, repeats } => {
            let data = load_or_generate(&cfg, &paths.data_dir)?;
            let model = load_model(&cfg, &paths.checkpoint)?;
            let records = select(&data, *split);
            let report = bench(&model, &records, batch.unwrap_or(cfg.train.batch_size), *repeats)?;
            let report = BenchReport {
                checkpoint: paths.checkpoint.display().to_string(),
                ..report
            };
            let json = to_json(&report)?;
            if paths.out_given {
                create_dir(&paths.out_dir)?;
                write_file(&paths.out_dir.join("bench.json"), json.as_bytes())?;
            }
            println!("{json}");
        }
        Command::GateInspect { record } | Command::AttnDump { record } => {
            let model = load_model(&cfg, &paths.checkpoint)?;
            let records = if record.is_empty() {
                let data = load_or_generate(&cfg, &paths.data_dir)?;
                select(&data, SplitArg::Test)
            } else {
                record.iter().map(|p| load_record(p)).collect::<Result<_, _>>()?
            };
            let gates = matches!(cli.command, Command::GateInspect { .. });
            let name = if gates { "gates.csv" } else { "attention.csv" };
            with_sink(&paths, name, |w| {
                if gates {
                    gate_inspect(&model, &records, w)
                } else {
                    attn_dump(&model, &records, w)
                }
            })?;
        }
        Command::Beats { record, lead } => {
            let rec = load_record(record)?;
            let lead = lead.unwrap_or(cfg.model.detection_lead);
            with_sink(&paths, &format!("{}.beats.csv", rec.record_id), |w| beats(&rec, lead, w))?;
        }
        Command::Export { record } => {
            let rec = load_record(record)?;
            with_sink(&paths, &format!("{}.csv", rec.record_id), |w| {
                rec.write_csv(w).map_err(|e| CliError::Runtime(e.to_string()))
            })?;
        }
    }
    Ok(())
}

/// Writes a dataset under `dir` and returns its record count.
pub fn synth(cfg: &RunConfig, dir: &Path) -> Result<usize, CliError> {
    let data = dataset::generate(&cfg.data)?;
    data.save(dir)?;
    Ok(data.records.len())
}

/// The dataset on disk, or one generated from the config when `dir` has no
/// manifest.
pub fn load_or_generate(cfg: &RunConfig, dir: &Path) -> Result<Dataset, CliError> {
    if dir.join("manifest.csv").exists() {
        Dataset::load(dir)
    } else {
        log::warn!("no dataset at {}; generating it in memory", dir.display());
        dataset::generate(&cfg.data)
    }
}

pub fn load_model(cfg: &RunConfig, path: &Path) -> Result<Model64, CliError> {
    if !path.exists() {
        return Err(CliError::Runtime(format!(
            "checkpoint {} not found; run `ecgmoe train` first",
            path.display()
        )));
    }
    Ok(load_checkpoint(path, &cfg.model)?)
}

fn select(data: &Dataset, split: SplitArg) -> Vec<EcgRecord> {
    match split.split() {
        Some(s) => data.split(s).into_iter().cloned().collect(),
        None => data.records.clone(),
    }
}

pub fn prepare_all<'a>(
    model: &Model64,
    records: impl IntoIterator<Item = &'a EcgRecord>,
) -> Result<Vec<PreparedRecord<f64>>, CliError> {
    records
        .into_iter()
        .map(|r| model.prepare(r).map_err(|e| CliError::Runtime(format!("record {}: {e}", r.record_id))))
        .collect()
}

/// Outcome of [`fit`].
pub struct Fitted {
    pub model: Model64,
    pub report: TrainReport,
    /// Test metrics before and after training, when there is a test split.
    pub untrained_test: Option<MetricsReport>,
    pub test: Option<MetricsReport>,
}

/// Trains a fresh model (initialized from `train.seed`) on the dataset's
/// train split, selecting weights on its validation split.
pub fn fit(cfg: &RunConfig, data: &Dataset) -> Result<Fitted, CliError> {
    let mut model = Model64::new(cfg.model.clone(), cfg.train.seed)?;
    let train = prepare_all(&model, data.split(Split::Train))?;
    let val = prepare_all(&model, data.split(Split::Val))?;
    let test = prepare_all(&model, data.split(Split::Test))?;
    model.fit_target_norms(train.iter().map(|x| &x.labels));
    let eval_test = |m: &Model64| -> Result<Option<MetricsReport>, CliError> {
        if test.is_empty() {
            Ok(None)
        } else {
            Ok(Some(training::evaluate(m, &test, &cfg.train)?))
        }
    };
    let untrained_test = eval_test(&model)?;
    let report = training::train(&mut model, &train, &val, &cfg.train)?;
    let test = eval_test(&model)?;
    Ok(Fitted {
        model,
        report,
        untrained_test,
        test,
    })
}

#[derive(Serialize)]
struct MetricsJson<'a> {
    train: &'a TrainReport,
    untrained_test: &'a Option<MetricsReport>,
    test: &'a Option<MetricsReport>,
}

/// Trains and writes `metrics.csv`, `metrics.json` and the checkpoint.
pub fn train(cfg: &RunConfig, data: &Dataset, out_dir: &Path, checkpoint: &Path) -> Result<Fitted, CliError> {
    let fitted = fit(cfg, data)?;
    create_dir(out_dir)?;
    if let Some(parent) = checkpoint.parent() {
        create_dir(parent)?;
    }
    save_checkpoint(&fitted.model, checkpoint)?;
    let csv_path = out_dir.join("metrics.csv");
    let mut w = csv::Writer::from_path(&csv_path).map_err(|e| CliError::Runtime(format!("{}: {e}", csv_path.display())))?;
    w.write_record(["epoch", "split", "task", "metric", "value"])
        .and_then(|_| {
            for row in metric_rows(&fitted.report) {
                w.write_record(&row)?;
            }
            w.flush().map_err(csv::Error::from)
        })
        .map_err(|e| CliError::Runtime(format!("{}: {e}", csv_path.display())))?;
    let json = to_json(&MetricsJson {
        train: &fitted.report,
        untrained_test: &fitted.untrained_test,
        test: &fitted.test,
    })?;
    write_file(&out_dir.join("metrics.json"), json.as_bytes())?;
    Ok(fitted)
}

/// Long-format rows `epoch,split,task,metric,value` of a training report.
pub fn metric_rows(report: &TrainReport) -> Vec<[String; 5]> {
    let mut rows = Vec::new();
    for e in &report.epochs {
        let mut push = |split: &str, task: &str, metric: &str, value: f64| {
            rows.push([e.epoch.to_string(), split.into(), task.into(), metric.into(), value.to_string()]);
        };
        loss_rows("train", &e.train, &mut push);
        if let Some(val) = &e.val {
            for m in &val.tasks {
                push("val", m.task.name(), &m.metric, m.value);
            }
            loss_rows("val", &val.loss, &mut push);
        }
    }
    rows
}

fn loss_rows(split: &str, loss: &training::LossBreakdown, push: &mut impl FnMut(&str, &str, &str, f64)) {
    for t in Task::ALL {
        if let Some(v) = loss.task(t) {
            push(split, t.name(), "loss", v);
        }
    }
    push(split, "contrastive", "loss", loss.contrastive);
    push(split, "all", "loss", loss.total);
}

pub fn eval(cfg: &RunConfig, model: &Model64, data: &Dataset, split: SplitArg) -> Result<MetricsReport, CliError> {
    let records = select(data, split);
    let prepared = prepare_all(model, &records)?;
    Ok(training::evaluate(model, &prepared, &cfg.train)?)
}

/// Inference cost summary. Every key is always present; `peak_rss_bytes`
/// is null where the platform does not report it.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub checkpoint: String,
    pub scalar: String,
    pub records: usize,
    pub batch_size: usize,
    pub batches: usize,
    pub tasks: usize,
    pub seconds: f64,
    pub records_per_s: f64,
    pub latency_ms_p50: f64,
    pub latency_ms_p95: f64,
    pub peak_rss_bytes: Option<u64>,
}

pub const BENCH_KEYS: [&str; 11] = [
    "checkpoint",
    "scalar",
    "records",
    "batch_size",
    "batches",
    "tasks",
    "seconds",
    "records_per_s",
    "latency_ms_p50",
    "latency_ms_p95",
    "peak_rss_bytes",
];

/// Times end-to-end inference (preprocessing plus every task head) over
/// `records` in batches of `batch_size`, `repeats` times.
pub fn bench(model: &Model64, records: &[EcgRecord], batch_size: usize, repeats: usize) -> Result<BenchReport, CliError> {
    if records.is_empty() {
        return Err(CliError::Runtime("no records to benchmark".into()));
    }
    if batch_size == 0 || repeats == 0 {
        return Err(CliError::Usage("--batch and --repeats must be >= 1".into()));
    }
    let mut latencies = Vec::new();
    let started = Instant::now();
    for _ in 0..repeats {
        for chunk in records.chunks(batch_size) {
            let t0 = Instant::now();
            for r in chunk {
                let x = model.prepare(r)?;
                let shared = model.forward_shared(&x)?;
                for t in Task::ALL {
                    std::hint::black_box(model.forward_task(&x, &shared, t)?.output);
                }
            }
            latencies.push(t0.elapsed().as_secs_f64() * 1e3);
        }
    }
    let seconds = started.elapsed().as_secs_f64();
    let total = records.len() * repeats;
    Ok(BenchReport {
        checkpoint: String::new(),
        scalar: "f64".into(),
        records: total,
        batch_size,
        batches: latencies.len(),
        tasks: Task::ALL.len(),
        seconds,
        records_per_s: total as f64 / seconds.max(f64::MIN_POSITIVE),
        latency_ms_p50: percentile(&mut latencies, 0.50),
        latency_ms_p95: percentile(&mut latencies, 0.95),
        peak_rss_bytes: peak_rss_bytes(),
    })
}

/// Nearest-rank percentile.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.sort_by(f64::total_cmp);
    let rank = (q * values.len() as f64).ceil() as usize;
    values[rank.clamp(1, values.len()) - 1]
}

/// High-water mark of resident memory (`VmHWM`), Linux only.
pub fn peak_rss_bytes() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    let kb: u64 = line.split_whitespace().nth(1)?.parse().ok()?;
    Some(kb * 1024)
}

/// CSV `record_id,task,g0..g4,alpha_m,alpha_p`; gate columns are empty
/// without the periodic branch.
pub fn gate_inspect(model: &Model64, records: &[EcgRecord], w: &mut dyn Write) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Runtime(e.to_string());
    writeln!(w, "record_id,task,g0,g1,g2,g3,g4,alpha_m,alpha_p").map_err(io)?;
    for r in records {
        let x = model.prepare(r)?;
        let shared = model.forward_shared(&x)?;
        for t in Task::ALL {
            let s = model.forward_task(&x, &shared, t)?;
            let gates: Vec<String> = match s.gate_weights() {
                Some(g) => g.data().iter().map(|v| v.to_string()).collect(),
                None => vec![String::new(); 5],
            };
            let alpha_p = s.alpha_p().map(|v| v.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{},{}", r.record_id, t, gates.join(","), s.alpha_m(), alpha_p).map_err(io)?;
        }
    }
    Ok(())
}

/// CSV `record_id,task,stage,head,query,key,weight`, one row per attention
/// weight. Empty (header only) without the periodic branch.
pub fn attn_dump(model: &Model64, records: &[EcgRecord], w: &mut dyn Write) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Runtime(e.to_string());
    writeln!(w, "record_id,task,stage,head,query,key,weight").map_err(io)?;
    for r in records {
        let x = model.prepare(r)?;
        let shared = model.forward_shared(&x)?;
        for t in Task::ALL {
            let s = model.forward_task(&x, &shared, t)?;
            let Some(p) = &s.periodic else { continue };
            for map in &p.attention {
                let [heads, nq, nk] = map.weights.shape()[..] else {
                    return Err(CliError::Runtime(format!("attention map `{}` is not 3-d", map.stage)));
                };
                let data = map.weights.data();
                for h in 0..heads {
                    for q in 0..nq {
                        for k in 0..nk {
                            let v = data[(h * nq + q) * nk + k];
                            writeln!(w, "{},{},{},{h},{q},{k},{v}", r.record_id, t, map.stage).map_err(io)?;
                        }
                    }
                }
            }
        }
    }
    Ok(())
}

/// CSV `index,sample,rr_ms`; `rr_ms` is the gap ending at the peak and is
/// empty for the first one.
pub fn beats(record: &EcgRecord, lead: usize, w: &mut dyn Write) -> Result<(), CliError> {
    let peaks = detect_r_peaks(record, lead)?;
    let to_ms = 1000.0 / record.sample_rate_hz;
    let io = |e: std::io::Error| CliError::Runtime(e.to_string());
    writeln!(w, "index,sample,rr_ms").map_err(io)?;
    for (i, &p) in peaks.iter().enumerate() {
        match i.checked_sub(1).map(|j| peaks[j]) {
            Some(prev) => writeln!(w, "{i},{p},{}", (p - prev) as f64 * to_ms),
            None => writeln!(w, "{i},{p},"),
        }
        .map_err(io)?;
    }
    // Segmentation must accept what detection found.
    segment_beats(record, lead, &peaks, ecgmoe::beats::DEFAULT_BEAT_LEN)?;
    Ok(())
}

fn with_sink(paths: &Paths, name: &str, f: impl FnOnce(&mut dyn Write) -> Result<(), CliError>) -> Result<(), CliError> {
    if paths.out_given {
        create_dir(&paths.out_dir)?;
        let path = paths.out_dir.join(name);
        let file = std::fs::File::create(&path).map_err(|e| CliError::io(&path, e))?;
        let mut w = std::io::BufWriter::new(file);
        f(&mut w)?;
        w.flush().map_err(|e| CliError::io(&path, e))
    } else {
        let stdout = std::io::stdout();
        let mut w = std::io::BufWriter::new(stdout.lock());
        f(&mut w)?;
        w.flush().map_err(|e| CliError::Runtime(e.to_string()))
    }
}

fn create_dir(dir: &Path) -> Result<(), CliError> {
    if dir.as_os_str().is_empty() {
        return Ok(());
    }
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

fn to_json<T: Serialize>(v: &T) -> Result<String, CliError> {
    serde_json::to_string_pretty(v).map_err(|e| CliError::Runtime(e.to_string()))
}
