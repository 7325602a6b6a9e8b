//! Command-line front end: experiments, sweeps and studies.
//!
//! A run directory contains
//!
//! * `manifest.json`: resolved config and dataset, written before training,
//! * `metrics.jsonl`: one [`RoundMetrics`] object per line,
//! * `timing.jsonl`: `{"round", "wall_ms"}` per line (not reproducible),
//! * `summary.json`: best/final accuracy, state bytes, compression ratio and
//!   client heterogeneity.

mod args;

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use clap::Parser;
use serde::{Deserialize, Serialize};

pub use args::{AnalysisArgs, Cli, Command, RunArgs, Study, SweepArgs, SweepAxis};

use crate::analysis::{
    compare_storage, histogram_warmup, log_uniform, precision_study, scaling_projection, scaling_tsv,
    state_histograms,
};
use crate::data::{generate_synthetic, load_flat_file, Dataset, HeterogeneityStats};
use crate::fed::{run_federated_with, streams, FederatedConfig, RoundMetrics, RunSummary};
use crate::ndcore::RngStream;
use crate::optim::OptimizerMode;
use crate::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TIMING_FILE: &str = "timing.jsonl";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DatasetSpec {
    Synthetic {
        train: usize,
        test: usize,
        features: usize,
        classes: usize,
        class_sep: f32,
    },
    File {
        path: PathBuf,
        test_fraction: f64,
    },
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec::Synthetic { train: 5000, test: 1000, features: 80, classes: 10, class_sep: 3.0 }
    }
}

impl DatasetSpec {
    /// Train and test sets. Synthetic sets draw from the run seed on fixed streams.
    pub fn load(&self, seed: u64) -> Result<(Dataset, Dataset)> {
        match self {
            DatasetSpec::Synthetic { train, test, features, classes, class_sep } => Ok((
                generate_synthetic(&mut RngStream::new(seed, streams::TRAIN_DATA), *train, *features, *classes, *class_sep)?,
                generate_synthetic(&mut RngStream::new(seed, streams::TEST_DATA), *test, *features, *classes, *class_sep)?,
            )),
            DatasetSpec::File { path, test_fraction } => {
                let all = load_flat_file(path)?;
                let n = all.len();
                let n_test = ((n as f64) * test_fraction).round() as usize;
                if n_test == 0 || n_test >= n {
                    return Err(Error::config(
                        "test-fraction",
                        format!("{test_fraction} leaves no train or no test samples out of {n}"),
                    ));
                }
                let idx: Vec<usize> = (0..n).collect();
                let (tr, te) = idx.split_at(n - n_test);
                Ok((all.subset(tr)?, all.subset(te)?))
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputPaths {
    pub metrics: PathBuf,
    pub summary: PathBuf,
    pub timing: PathBuf,
}

/// Everything needed to reproduce a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub started_unix_s: u64,
    pub config: FederatedConfig,
    pub dataset: DatasetSpec,
    pub outputs: OutputPaths,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRecord {
    #[serde(flatten)]
    pub run: RunSummary,
    pub heterogeneity: HeterogeneityStats,
}

/// Parses `args` (including the program name) and executes the command.
pub fn run_cli<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(|e| match e.kind() {
        clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => {
            let _ = e.print();
            Error::Usage(String::new())
        }
        _ => Error::Usage(e.to_string()),
    })?;
    execute(cli)
}

pub fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let out = run_experiment(&args)?;
            if !args.quiet {
                println!("{}", serde_json::to_string_pretty(&out)?);
            }
            Ok(())
        }
        Command::Sweep(args) => {
            let rows = run_sweep(&args)?;
            print!("{}", sweep_table(&rows));
            Ok(())
        }
        Command::Analysis(a) => run_analysis(&a.study),
    }
}

/// Applies config file and flags on top of the defaults.
pub fn resolve(args: &RunArgs) -> Result<(FederatedConfig, DatasetSpec)> {
    if let Some(path) = &args.manifest {
        let m: RunManifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        return Ok((m.config, m.dataset));
    }
    let mut cfg = match &args.config {
        Some(path) => serde_json::from_str(&fs::read_to_string(path)?)
            .map_err(|e| Error::config("config", format!("{}: {e}", path.display())))?,
        None => FederatedConfig::default(),
    };
    macro_rules! set {
        ($($flag:ident => $field:ident),*) => {$(
            if let Some(v) = args.$flag.clone() { cfg.$field = v; }
        )*};
    }
    set!(mode => mode, alpha => alpha, clients => num_clients, per_round => clients_per_round,
         rounds => rounds, epochs => local_epochs, batch => batch_size, lr => lr, beta1 => beta1,
         beta2 => beta2, eps => eps, block_size => block_size, seed => seed, hidden => hidden);
    cfg.validate()?;

    let dataset = match args.dataset.as_deref().unwrap_or("synthetic") {
        "synthetic" => {
            let DatasetSpec::Synthetic { train, test, features, classes, class_sep } = DatasetSpec::default() else {
                unreachable!()
            };
            DatasetSpec::Synthetic {
                train: args.train_size.unwrap_or(train),
                test: args.test_size.unwrap_or(test),
                features: args.features.unwrap_or(features),
                classes: args.classes.unwrap_or(classes),
                class_sep: args.class_sep.unwrap_or(class_sep),
            }
        }
        other => match other.strip_prefix("file:") {
            Some(path) if !path.is_empty() => DatasetSpec::File {
                path: PathBuf::from(path),
                test_fraction: args.test_fraction.unwrap_or(0.2),
            },
            _ => return Err(Error::config("dataset", format!("expected 'synthetic' or 'file:<path>', got '{other}'"))),
        },
    };
    Ok((cfg, dataset))
}

fn default_out(cfg: &FederatedConfig) -> PathBuf {
    PathBuf::from(format!("runs/{}-seed{}", cfg.mode, cfg.seed))
}

/// Runs one experiment and writes its files, returning the summary.
pub fn run_experiment(args: &RunArgs) -> Result<SummaryRecord> {
    let (cfg, dataset) = resolve(args)?;
    let out = args.out.clone().unwrap_or_else(|| default_out(&cfg));
    run_resolved(&cfg, &dataset, &out, args.threads, args.quiet)
}

pub fn run_resolved(
    cfg: &FederatedConfig,
    dataset: &DatasetSpec,
    out: &Path,
    threads: Option<usize>,
    quiet: bool,
) -> Result<SummaryRecord> {
    fs::create_dir_all(out)?;
    let manifest = RunManifest {
        version: concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION")).to_string(),
        started_unix_s: SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0),
        config: cfg.clone(),
        dataset: dataset.clone(),
        outputs: OutputPaths {
            metrics: out.join(METRICS_FILE),
            summary: out.join(SUMMARY_FILE),
            timing: out.join(TIMING_FILE),
        },
    };
    fs::write(out.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)? + "\n")?;

    let (train, test) = dataset.load(cfg.seed)?;
    let mut metrics = BufWriter::new(File::create(&manifest.outputs.metrics)?);
    let mut timing = BufWriter::new(File::create(&manifest.outputs.timing)?);
    let run = run_federated_with(cfg, &train, &test, threads, |r: &RoundMetrics| {
        writeln!(metrics, "{}", serde_json::to_string(r)?)?;
        metrics.flush()?;
        writeln!(timing, "{}", serde_json::json!({ "round": r.round, "wall_ms": r.wall_ms }))?;
        if !quiet {
            eprintln!(
                "round {:>3}  acc {:.4}  loss {:.4}  {:.0} ms",
                r.round, r.test_accuracy, r.test_loss, r.wall_ms
            );
        }
        Ok(())
    })?;
    timing.flush()?;
    let record = SummaryRecord { run: run.summary, heterogeneity: run.heterogeneity };
    fs::write(&manifest.outputs.summary, serde_json::to_string_pretty(&record)? + "\n")?;
    Ok(record)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub mode: OptimizerMode,
    /// Axis value, or `"-"` when the axis is the seed.
    pub value: String,
    pub runs: usize,
    pub best_accuracy_mean: f64,
    pub best_accuracy_std: f64,
    pub final_accuracy_mean: f64,
    pub final_accuracy_std: f64,
    pub state_bytes: u64,
    pub compression_ratio: f64,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One run per (mode, value); rows are grouped per mode and, unless the
/// axis is the seed, per value. Seeds stay fixed on other axes.
pub fn run_sweep(args: &SweepArgs) -> Result<Vec<SweepRow>> {
    if args.values.is_empty() || args.values.iter().any(|v| v.trim().is_empty()) {
        return Err(Error::Usage("sweep needs at least one value".into()));
    }
    let (base, dataset) = resolve(&args.base)?;
    let modes = match (&args.modes, args.axis) {
        (_, SweepAxis::Mode) | (None, _) => vec![base.mode],
        (Some(m), _) => m.clone(),
    };
    let root = args.base.out.clone().unwrap_or_else(|| PathBuf::from("sweeps"));
    let mut rows = Vec::new();
    for mode in modes {
        let mut groups: Vec<(String, Vec<SummaryRecord>)> = Vec::new();
        for raw in &args.values {
            let raw = raw.trim();
            let mut cfg = FederatedConfig { mode, ..base.clone() };
            let field = match args.axis {
                SweepAxis::Mode => {
                    cfg.mode = raw.parse()?;
                    "mode"
                }
                SweepAxis::Alpha => {
                    cfg.alpha = raw.parse()?;
                    "alpha"
                }
                SweepAxis::BlockSize => {
                    cfg.block_size = raw.parse().map_err(|_| Error::Usage(format!("bad block size '{raw}'")))?;
                    "block_size"
                }
                SweepAxis::Lr => {
                    cfg.lr = raw.parse().map_err(|_| Error::Usage(format!("bad learning rate '{raw}'")))?;
                    "lr"
                }
                SweepAxis::Seed => {
                    cfg.seed = raw.parse().map_err(|_| Error::Usage(format!("bad seed '{raw}'")))?;
                    "seed"
                }
            };
            cfg.validate()?;
            let out = root.join(format!("{}-{field}={raw}", cfg.mode));
            let rec = run_resolved(&cfg, &dataset, &out, args.base.threads, true)?;
            if !args.base.quiet {
                eprintln!("{} {field}={raw}: best {:.4} final {:.4}", cfg.mode, rec.run.best_accuracy, rec.run.final_accuracy);
            }
            let key = if args.axis == SweepAxis::Seed { "-".to_string() } else { raw.to_string() };
            match groups.iter_mut().find(|g| g.0 == key) {
                Some(g) => g.1.push(rec),
                None => groups.push((key, vec![rec])),
            }
        }
        for (value, recs) in groups {
            let best: Vec<f64> = recs.iter().map(|r| r.run.best_accuracy).collect();
            let fin: Vec<f64> = recs.iter().map(|r| r.run.final_accuracy).collect();
            let (bm, bs) = mean_std(&best);
            let (fm, fs) = mean_std(&fin);
            rows.push(SweepRow {
                mode: recs[0].run.mode,
                value,
                runs: recs.len(),
                best_accuracy_mean: bm,
                best_accuracy_std: bs,
                final_accuracy_mean: fm,
                final_accuracy_std: fs,
                state_bytes: recs[0].run.state_bytes,
                compression_ratio: recs[0].run.compression_ratio,
            });
        }
    }
    fs::create_dir_all(&root)?;
    fs::write(root.join("sweep.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
    fs::write(root.join("sweep.tsv"), sweep_table(&rows))?;
    Ok(rows)
}

pub fn sweep_table(rows: &[SweepRow]) -> String {
    let mut s = String::from("mode\tvalue\truns\tbest_acc\tfinal_acc\tstate_bytes\tratio\n");
    for r in rows {
        s.push_str(&format!(
            "{}\t{}\t{}\t{:.4}±{:.4}\t{:.4}±{:.4}\t{}\t{:.3}\n",
            r.mode,
            r.value,
            r.runs,
            r.best_accuracy_mean,
            r.best_accuracy_std,
            r.final_accuracy_mean,
            r.final_accuracy_std,
            r.state_bytes,
            r.compression_ratio
        ));
    }
    s
}

fn parse_count(s: &str) -> Result<u64> {
    let v: f64 = s.trim().parse().map_err(|_| Error::Usage(format!("bad parameter count '{s}'")))?;
    if !(v >= 1.0 && v.fract() == 0.0 && v <= u64::MAX as f64) {
        return Err(Error::Usage(format!("parameter count must be a positive integer, got '{s}'")));
    }
    Ok(v as u64)
}

pub fn run_analysis(study: &Study) -> Result<()> {
    match study {
        Study::Precision { n, lo, hi, block_size, seed, out } => {
            let s = precision_study(&mut RngStream::new(*seed, 0), *n, *lo, *hi, *block_size)?;
            let v = log_uniform(&mut RngStream::new(*seed, 0), *n, *lo, *hi)?;
            fs::create_dir_all(out)?;
            fs::write(out.join("precision.json"), serde_json::to_string_pretty(&s)? + "\n")?;
            fs::write(out.join("precision.tsv"), s.to_tsv())?;
            let storage = compare_storage(&v, *block_size)?;
            fs::write(out.join("storage.json"), serde_json::to_string_pretty(&storage)? + "\n")?;
            println!("scheme\tmean_relative_error");
            for r in [&s.log_space, &s.dynamic_tree, &s.log_space_whole] {
                println!("{}\t{:.4}%", r.scheme, 100.0 * r.mean_relative_error);
            }
            println!("ratio\t{:.1}x", s.error_ratio());
        }
        Study::Histograms { steps, mode, seed, out } => {
            let w = histogram_warmup(*seed, *steps, *mode)?;
            let h = state_histograms(&w.state)?;
            fs::create_dir_all(out)?;
            fs::write(out.join("histogram_m.tsv"), h.momentum.to_tsv())?;
            fs::write(out.join("histogram_v.tsv"), h.variance.to_tsv())?;
            fs::write(out.join("histograms.json"), serde_json::to_string_pretty(&h)? + "\n")?;
            println!(
                "m in [{:.3e}, {:.3e}], v spans {:.2} decades ({} zeros), max |g| {:.3e}",
                h.momentum.min, h.momentum.max, h.variance.occupied_span(), h.variance.underflow, w.max_abs_grad
            );
        }
        Study::Scaling { params, block_size, out } => {
            let counts = params.iter().map(|p| parse_count(p)).collect::<Result<Vec<_>>>()?;
            let rows = scaling_projection(&counts, *block_size)?;
            fs::create_dir_all(out)?;
            fs::write(out.join("scaling.json"), serde_json::to_string_pretty(&rows)? + "\n")?;
            let tsv = scaling_tsv(&rows);
            fs::write(out.join("scaling.tsv"), &tsv)?;
            print!("{tsv}");
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Concentration;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("qlocal").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.json");
        fs::write(&path, r#"{"rounds": 7, "lr": 0.0005, "mode": "m-only"}"#).unwrap();
        let Command::Run(a) = parse(&["run", "--config", path.to_str().unwrap(), "--rounds", "3", "--alpha", "iid"]).command else {
            panic!()
        };
        let (cfg, ds) = resolve(&a).unwrap();
        assert_eq!(cfg.rounds, 3);
        assert_eq!(cfg.lr, 0.0005);
        assert_eq!(cfg.mode, OptimizerMode::MomentumOnly);
        assert_eq!(cfg.alpha, Concentration::Iid);
        assert_eq!(cfg.local_epochs, 2);
        assert_eq!(ds, DatasetSpec::default());
    }

    #[test]
    fn invalid_values_name_the_field() {
        let Command::Run(a) = parse(&["run", "--per-round", "20"]).command else { panic!() };
        assert!(matches!(resolve(&a), Err(Error::Config { field, .. }) if field == "per-round"));
        let Command::Run(a) = parse(&["run", "--dataset", "lmdb:x"]).command else { panic!() };
        assert!(matches!(resolve(&a), Err(Error::Config { field, .. }) if field == "dataset"));
        assert!(matches!(run_cli(["qlocal", "run", "--mode", "sgd"]), Err(Error::Usage(_))));
        assert!(matches!(run_cli(["qlocal", "analysis", "spectra"]), Err(Error::Usage(_))));
    }

    #[test]
    fn file_dataset_spec() {
        let Command::Run(a) = parse(&["run", "--dataset", "file:/tmp/d.txt", "--test-fraction", "0.25"]).command else {
            panic!()
        };
        let (_, ds) = resolve(&a).unwrap();
        assert_eq!(ds, DatasetSpec::File { path: "/tmp/d.txt".into(), test_fraction: 0.25 });
    }

    #[test]
    fn parameter_counts_accept_scientific() {
        assert_eq!(parse_count("10e6").unwrap(), 10_000_000);
        assert_eq!(parse_count("1e9").unwrap(), 1_000_000_000);
        assert!(parse_count("1.5").is_err());
        assert!(parse_count("0").is_err());
    }
}
