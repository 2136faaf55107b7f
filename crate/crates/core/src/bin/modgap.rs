//! `modgap` command-line interface.
//!
//! Any config key can be overridden as `--section.key value` (or
//! `--section.key=value`); precedence is flags > `--config` file > defaults.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use modgap::checkpoint::Checkpoint;
use modgap::config::RunConfig;
use modgap::data::Dataset;
use modgap::gap::{collect_gaps, GapSet};
use modgap::mixture::{fit_values, FitOptions, MixtureFamily, MixtureFit};
use modgap::pipeline::{ablation_means, run_ablation_suite, Experiment};
use modgap::report::{Record, TrainReport};
use modgap::{Error, Result};

const OUT_ROOT_ENV: &str = "MODGAP_OUT_ROOT";

#[derive(Parser, Debug)]
#[command(name = "modgap", version, about = "Mixture-guided adaptive training for imbalanced two-modality classifiers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// TOML config file; dotted `--section.key value` flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Sets both `data.seed` and `schedule.seed`.
    #[arg(long)]
    seed: Option<u64>,
    /// Overwrite existing outputs.
    #[arg(long)]
    force: bool,
    /// Root for default output paths.
    #[arg(long, env = OUT_ROOT_ENV, default_value = "runs")]
    out_root: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset file.
    Generate {
        #[command(flatten)]
        common: Common,
        /// Output file (default: <out_root>/dataset-seed<seed>.csv).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Warm-up plus adaptive training into a run directory.
    Train {
        #[command(flatten)]
        common: Common,
        /// Dataset file; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Run directory (default: <out_root>/train-seed<seed>).
        #[arg(long)]
        run_dir: Option<PathBuf>,
        /// Resume from a checkpoint (e.g. a finished warm-up).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Fine-tune the warm-up checkpoint of a run on its high-quality subset.
    Finetune {
        #[arg(long)]
        run_dir: PathBuf,
        /// Keep samples with balanced posterior w0 >= threshold.
        #[arg(long)]
        threshold: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Output directory (default: <run_dir>-finetune-<threshold>).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Fit a two-component mixture to a gap CSV.
    Fit {
        /// CSV with a `gap` column.
        #[arg(long)]
        gaps: PathBuf,
        #[arg(long, value_enum, default_value_t = Family::Gaussian)]
        family: Family,
        #[arg(long, default_value_t = 4.0)]
        nu: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Write the fit record here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Run every loss ablation over the configured seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Output directory (default: <out_root>/ablate).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Convert a run directory into plot-ready CSV series.
    Report {
        #[arg(long)]
        run_dir: PathBuf,
        /// Output directory (default: <run_dir>-report).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
    /// Dump per-sample gaps of a run checkpoint over all splits.
    Gaps {
        #[arg(long)]
        run_dir: PathBuf,
        /// Checkpoint name inside `<run_dir>/checkpoints` (warmup, adaptive).
        #[arg(long, default_value = "warmup")]
        checkpoint: String,
        /// Output CSV (default: <run_dir>-gaps-<checkpoint>.csv).
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        force: bool,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Family {
    Gaussian,
    StudentT,
}

impl From<Family> for MixtureFamily {
    fn from(f: Family) -> Self {
        match f {
            Family::Gaussian => MixtureFamily::Gaussian,
            Family::StudentT => MixtureFamily::StudentT,
        }
    }
}

/// Pulls `--a.b value` / `--a.b=value` pairs out of the raw arguments.
fn split_overrides(args: Vec<String>) -> Result<(Vec<String>, Vec<(String, String)>)> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let dotted = |f: &&str| f.split('=').next().is_some_and(|name| name.contains('.'));
        let Some(flag) = arg.strip_prefix("--").filter(dotted) else {
            rest.push(arg);
            continue;
        };
        if let Some((k, v)) = flag.split_once('=') {
            overrides.push((k.to_string(), v.to_string()));
        } else {
            let v = it
                .next()
                .ok_or_else(|| Error::config(flag, "missing value"))?;
            overrides.push((flag.to_string(), v));
        }
    }
    Ok((rest, overrides))
}

fn load_config(common: &Common, overrides: &[(String, String)]) -> Result<RunConfig> {
    let mut all = overrides.to_vec();
    if let Some(seed) = common.seed {
        all.push(("data.seed".into(), seed.to_string()));
        all.push(("schedule.seed".into(), seed.to_string()));
    }
    RunConfig::load(common.config.as_deref(), &all)
}

fn io<T>(path: &Path, r: std::io::Result<T>) -> Result<T> {
    r.map_err(|e| Error::io(path, e))
}

/// Refuses to reuse `path` unless `force`, in which case it is removed.
fn claim(path: &Path, force: bool) -> Result<()> {
    if path.exists() {
        if !force {
            return Err(Error::Exists(path.to_path_buf()));
        }
        if path.is_dir() {
            io(path, fs::remove_dir_all(path))?;
        } else {
            io(path, fs::remove_file(path))?;
        }
    }
    Ok(())
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        io(parent, fs::create_dir_all(parent))?;
    }
    io(path, fs::write(path, contents))
}

/// `<dir><suffix>` next to `dir`; outputs never go inside an existing run.
fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    dir.with_file_name(name)
}

fn require_dir(dir: &Path) -> Result<()> {
    if !dir.is_dir() {
        return Err(Error::config("run_dir", format!("{} is not a directory", dir.display())));
    }
    Ok(())
}

fn fit_json(fit: &MixtureFit) -> String {
    serde_json::to_string_pretty(fit).expect("fit serializes") + "\n"
}

fn gap_csv(gaps: &GapSet, split: &str, out: &mut String) {
    for (id, g) in gaps.sample_ids.iter().zip(&gaps.gaps) {
        writeln!(out, "{id},{g},{split},{}", gaps.snapshot_epoch).unwrap();
    }
}

const GAP_HEADER: &str = "sample_id,gap,split,snapshot_epoch\n";

fn read_gap_column(path: &Path) -> Result<Vec<f64>> {
    let text = io(path, fs::read_to_string(path))?;
    let ctx = path.display().to_string();
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::format(&ctx, "empty file"))?;
    let col = header
        .split(',')
        .position(|h| h.trim() == "gap")
        .ok_or_else(|| Error::format(&ctx, "no `gap` column"))?;
    lines
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.split(',')
                .nth(col)
                .and_then(|v| v.trim().parse::<f64>().ok())
                .filter(|v| v.is_finite())
                .ok_or_else(|| Error::format(&ctx, format!("line {}: bad gap value", n + 2)))
        })
        .collect()
}

struct RunDir {
    root: PathBuf,
}

impl RunDir {
    fn config(&self) -> PathBuf {
        self.root.join("config.toml")
    }
    fn dataset(&self) -> PathBuf {
        self.root.join("dataset.csv")
    }
    fn report(&self) -> PathBuf {
        self.root.join("report.jsonl")
    }
    fn checkpoint(&self, name: &str) -> PathBuf {
        self.root.join("checkpoints").join(format!("{name}.ckpt"))
    }

    fn load(root: &Path) -> Result<(RunDir, Experiment)> {
        require_dir(root)?;
        let dir = RunDir {
            root: root.to_path_buf(),
        };
        let cfg = RunConfig::load(Some(&dir.config()), &[])?;
        let dataset = Dataset::load(&dir.dataset())?;
        let exp = Experiment::new(cfg, dataset)?;
        Ok((dir, exp))
    }
}

fn cmd_generate(common: &Common, overrides: &[(String, String)], out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common, overrides)?;
    let out = out.unwrap_or_else(|| common.out_root.join(format!("dataset-seed{}.csv", cfg.data.seed)));
    claim(&out, common.force)?;
    let dataset = modgap::data::generate(&cfg.data)?;
    write(&out, dataset.to_text())?;
    println!("wrote {} samples to {}", dataset.len(), out.display());
    Ok(())
}

fn cmd_train(
    common: &Common,
    overrides: &[(String, String)],
    data: Option<PathBuf>,
    run_dir: Option<PathBuf>,
    resume: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = load_config(common, overrides)?;
    let dataset = match &data {
        Some(p) => {
            let ds = Dataset::load(p)?;
            // The snapshot must regenerate exactly this data.
            cfg.data = ds.config.clone();
            ds
        }
        None => modgap::data::generate(&cfg.data)?,
    };
    let root = run_dir.unwrap_or_else(|| common.out_root.join(format!("train-seed{}", cfg.schedule.seed)));
    claim(&root, common.force)?;
    let dir = RunDir { root };
    write(&dir.config(), cfg.to_toml())?;
    write(&dir.dataset(), dataset.to_text())?;
    let exp = Experiment::new(cfg, dataset)?;

    let mut report = TrainReport::default();
    report.push(Record::Run {
        config_hash: exp.cfg.hash(),
    });
    let result = train_into(&exp, &dir, resume.as_deref(), &mut report);
    // Written even on failure so an aborted run stays diagnosable.
    write(&dir.report(), report.to_jsonl())?;
    result?;
    println!("run written to {}", dir.root.display());
    Ok(())
}

fn train_into(exp: &Experiment, dir: &RunDir, resume: Option<&Path>, report: &mut TrainReport) -> Result<()> {
    let hash = exp.cfg.hash();
    let mut state = match resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.config_hash != hash {
                report.event(format!("resumed from {} written under a different config", p.display()));
            }
            ck.state
        }
        None => exp.init_state(),
    };
    exp.run_warmup(&mut state, report)?;
    exp.evaluate_test(&state.model, "warmup", report)?;
    Checkpoint::new(&hash, state.clone()).save(&dir.checkpoint("warmup"))?;

    let mut on_step = |step: usize, gaps: &GapSet, fit: &MixtureFit| -> Result<()> {
        let mut csv = GAP_HEADER.to_string();
        gap_csv(gaps, "train", &mut csv);
        write(&dir.root.join("gaps").join(format!("step{step}.csv")), csv)?;
        write(&dir.root.join("fits").join(format!("step{step}.json")), fit_json(fit))
    };
    exp.run_adaptive_observed(&mut state, &exp.cfg.adaptive, report, &mut on_step)?;
    exp.evaluate_test(&state.model, "adaptive", report)?;
    Checkpoint::new(&hash, state).save(&dir.checkpoint("adaptive"))
}

fn cmd_finetune(
    run_dir: &Path,
    threshold: Option<f64>,
    epochs: Option<usize>,
    out: Option<PathBuf>,
    force: bool,
) -> Result<()> {
    let (dir, mut exp) = RunDir::load(run_dir)?;
    if let Some(t) = threshold {
        exp.cfg.finetune.threshold = t;
    }
    if let Some(e) = epochs {
        exp.cfg.finetune.epochs = e;
    }
    exp.cfg.validate()?;
    let tau = exp.cfg.finetune.threshold;
    let out = out.unwrap_or_else(|| sibling(&dir.root, &format!("-finetune-{tau}")));
    claim(&out, force)?;
    write(&out.join("config.toml"), exp.cfg.to_toml())?;
    let warm = Checkpoint::load(&dir.checkpoint("warmup"))?;

    let mut report = TrainReport::default();
    report.push(Record::Run {
        config_hash: exp.cfg.hash(),
    });
    let result = (|| -> Result<()> {
        exp.evaluate_test(&warm.state.model, "warmup", &mut report)?;
        let (model, selection) = exp.finetune_high_quality(&warm.state.model, tau, &mut report)?;
        let m = exp.evaluate_test(&model, "finetune", &mut report)?;
        let mut state = warm.state.clone();
        state.model = model;
        state.optimizer = state.optimizer.reset_optimizer();
        Checkpoint::new(exp.cfg.hash(), state).save(&out.join("checkpoints").join("finetune.ckpt"))?;
        println!(
            "retained {:.4} of training samples; held-out accuracy {:.4}",
            selection.retained_fraction, m.fused_accuracy
        );
        Ok(())
    })();
    write(&out.join("report.jsonl"), report.to_jsonl())?;
    result
}

fn cmd_fit(gaps: &Path, family: Family, nu: f64, seed: u64, out: Option<PathBuf>, force: bool) -> Result<()> {
    let values = read_gap_column(gaps)?;
    let opts = FitOptions {
        seed,
        nu,
        ..FitOptions::default()
    };
    opts.validate()?;
    let fit = fit_values(&values, family.into(), &opts)?;
    let text = fit_json(&fit);
    match out {
        Some(p) => {
            claim(&p, force)?;
            write(&p, text)
        }
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_ablate(common: &Common, overrides: &[(String, String)], out: Option<PathBuf>) -> Result<()> {
    let cfg = load_config(common, overrides)?;
    let out = out.unwrap_or_else(|| common.out_root.join("ablate"));
    claim(&out, common.force)?;
    write(&out.join("config.toml"), cfg.to_toml())?;
    let report = run_ablation_suite(&cfg, &cfg.ablation.seeds)?;
    write(&out.join("report.jsonl"), report.to_jsonl())?;
    for (name, m, n) in ablation_means(&report) {
        println!("{name:<12} accuracy {:.4} macro_f1 {:.4} ({n} seeds)", m.fused_accuracy, m.macro_f1);
    }
    Ok(())
}

fn report_csvs(report: &TrainReport) -> Vec<(&'static str, String)> {
    let mut files = Vec::new();

    let mut hist = String::from("step,bin_lo,bin_hi,count\n");
    let mut traj = String::from("step,pi0,pi1,mu0,mu1,sigma0,sigma1,loglik,iterations,converged,collapsed\n");
    for s in report.steps() {
        let edges = s.histogram.edges();
        for (i, c) in s.histogram.counts.iter().enumerate() {
            writeln!(hist, "{},{},{},{}", s.step, edges[i], edges[i + 1], c).unwrap();
        }
        let f = &s.fit;
        writeln!(
            traj,
            "{},{},{},{},{},{},{},{},{},{},{}",
            s.step, f.pi[0], f.pi[1], f.mu[0], f.mu[1], f.sigma[0], f.sigma[1], f.loglik, f.iterations, f.converged, f.collapsed
        )
        .unwrap();
    }
    if report.steps().next().is_some() {
        files.push(("gap_histograms.csv", hist));
        files.push(("mixture_trajectory.csv", traj));
    }

    let mut curves = String::from(
        "epoch,stage,stage_epoch,train_loss,fused_accuracy,unimodal_accuracy_a,unimodal_accuracy_v,macro_f1,clipped_batches\n",
    );
    for e in report.epochs() {
        let m = &e.metrics;
        writeln!(
            curves,
            "{},{},{},{},{},{},{},{},{}",
            e.epoch, e.stage, e.stage_epoch, e.train_loss, m.fused_accuracy, m.unimodal_accuracy_a, m.unimodal_accuracy_v, m.macro_f1, e.clipped_batches
        )
        .unwrap();
    }
    if report.epochs().next().is_some() {
        files.push(("accuracy_curves.csv", curves));
    }

    let mut evals = String::from("label,split,fused_accuracy,macro_f1,unimodal_accuracy_a,unimodal_accuracy_v\n");
    let mut any_eval = false;
    for r in &report.records {
        if let Record::Eval { label, split, metrics: m } = r {
            any_eval = true;
            writeln!(
                evals,
                "{label},{split},{},{},{},{}",
                m.fused_accuracy, m.macro_f1, m.unimodal_accuracy_a, m.unimodal_accuracy_v
            )
            .unwrap();
        }
    }
    if any_eval {
        files.push(("evaluations.csv", evals));
    }

    if report.ablations().next().is_some() {
        let mut rows = String::from("variant,seed,fused_accuracy,macro_f1,unimodal_accuracy_a,unimodal_accuracy_v\n");
        for a in report.ablations() {
            let m = &a.metrics;
            writeln!(
                rows,
                "{},{},{},{},{},{}",
                a.variant, a.seed, m.fused_accuracy, m.macro_f1, m.unimodal_accuracy_a, m.unimodal_accuracy_v
            )
            .unwrap();
        }
        files.push(("ablation_runs.csv", rows));
        let mut table = String::from("variant,seeds,mean_fused_accuracy,mean_macro_f1\n");
        for (name, m, n) in ablation_means(report) {
            writeln!(table, "{name},{n},{},{}", m.fused_accuracy, m.macro_f1).unwrap();
        }
        files.push(("ablation_table.csv", table));
    }
    files
}

fn cmd_report(run_dir: &Path, out: Option<PathBuf>, force: bool) -> Result<()> {
    require_dir(run_dir)?;
    let report = TrainReport::load(&run_dir.join("report.jsonl"))?;
    let out = out.unwrap_or_else(|| sibling(run_dir, "-report"));
    claim(&out, force)?;
    io(&out, fs::create_dir_all(&out))?;
    for (name, body) in report_csvs(&report) {
        write(&out.join(name), body)?;
        println!("{}", out.join(name).display());
    }
    Ok(())
}

fn cmd_gaps(run_dir: &Path, checkpoint: &str, out: Option<PathBuf>, force: bool) -> Result<()> {
    let (dir, exp) = RunDir::load(run_dir)?;
    let ck = Checkpoint::load(&dir.checkpoint(checkpoint))?;
    let out = out.unwrap_or_else(|| sibling(&dir.root, &format!("-gaps-{checkpoint}.csv")));
    claim(&out, force)?;
    let mut csv = GAP_HEADER.to_string();
    for (name, idx) in [("train", &exp.split.train), ("val", &exp.split.val), ("test", &exp.split.test)] {
        if idx.is_empty() {
            continue;
        }
        let gaps = collect_gaps(&ck.state.model, &exp.dataset, idx, exp.cfg.adaptive.gap_metric, ck.state.epoch)?;
        gap_csv(&gaps, name, &mut csv);
    }
    write(&out, csv)?;
    println!("{}", out.display());
    Ok(())
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<()> {
    let config_free = !matches!(
        cli.command,
        Command::Generate { .. } | Command::Train { .. } | Command::Ablate { .. }
    );
    if config_free {
        if let Some((key, _)) = overrides.first() {
            return Err(Error::config(key, "this subcommand takes no config overrides"));
        }
    }
    match cli.command {
        Command::Generate { common, out } => cmd_generate(&common, overrides, out),
        Command::Train {
            common,
            data,
            run_dir,
            resume,
        } => cmd_train(&common, overrides, data, run_dir, resume),
        Command::Finetune {
            run_dir,
            threshold,
            epochs,
            out,
            force,
        } => cmd_finetune(&run_dir, threshold, epochs, out, force),
        Command::Fit {
            gaps,
            family,
            nu,
            seed,
            out,
            force,
        } => cmd_fit(&gaps, family, nu, seed, out, force),
        Command::Ablate { common, out } => cmd_ablate(&common, overrides, out),
        Command::Report { run_dir, out, force } => cmd_report(&run_dir, out, force),
        Command::Gaps {
            run_dir,
            checkpoint,
            out,
            force,
        } => cmd_gaps(&run_dir, &checkpoint, out, force),
    }
}

fn main() -> ExitCode {
    let raw: Vec<String> = std::env::args().collect();
    let (args, overrides) = match split_overrides(raw) {
        Ok(v) => v,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    };
    let cli = Cli::try_parse_from(args).unwrap_or_else(|e| e.exit());
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
