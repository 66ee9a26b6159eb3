use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use topo_core::retinotopy::{gen_rings, gen_wedges, to_pgm, StimulusGeometry};
use topo_lab::analyze::{self, AnalyzeOptions, Family};
use topo_lab::compare::{parse_grouping, read_tables, summarize, SUMMARY_COLUMNS};
use topo_lab::config::{ExperimentConfig, Origin};
use topo_lab::io::write_atomic;
use topo_lab::sweep::{run_sweep, write_provenance, Manifest, MANIFEST_FILE};
use topo_lab::table::write_table;
use topo_lab::{LabError, Result};

/// Topographic CNN laboratory: train sweeps, analyses and result tables.
#[derive(Parser)]
#[command(name = "topolab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every (constraint, λ, seed) cell that is not already done.
    Train(TrainArgs),
    /// Run analysis families over the checkpoints in a manifest.
    Analyze(AnalyzeArgs),
    /// Mean and sd over seeds of metric tables.
    Compare(CompareArgs),
    /// Write the wedge and ring stimuli as PGM images.
    StimuliExport(StimuliArgs),
}

#[derive(Args)]
struct TrainArgs {
    /// TOML experiment config; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    experiment: Option<String>,
    #[arg(long)]
    arch: Option<String>,
    /// Dataset directory (default: $TOPOLAB_DATA_ROOT/<mnist|cifar10>).
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated: control, ws, as, as_global.
    #[arg(long, value_delimiter = ',')]
    constraint: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    lambdas: Option<Vec<f64>>,
    #[arg(long)]
    seeds: Option<u64>,
    #[arg(long)]
    seed_base: Option<u64>,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    train_limit: Option<usize>,
    #[arg(long)]
    test_limit: Option<usize>,
    /// Desk-scale profile.
    #[arg(long)]
    reduced: bool,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Manifest written by `train`.
    #[arg(long, conflicts_with = "config")]
    manifest: Option<PathBuf>,
    /// Experiment config; the manifest is read from its output directory.
    #[arg(long)]
    config: Option<PathBuf>,
    /// all, or a comma-separated list of rsm|noise|entropy|topo|retino|calib|ed.
    #[arg(long, default_value = "all")]
    which: String,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    weight_reps: Option<usize>,
    #[arg(long)]
    noise_reps: Option<usize>,
    #[arg(long)]
    permutations: Option<usize>,
    #[arg(long)]
    similarity: Option<String>,
}

#[derive(Args)]
struct CompareArgs {
    /// Metric tables (CSV or JSON) sharing the metric schema.
    #[arg(required = true)]
    tables: Vec<PathBuf>,
    /// Grouping keys; the rest are pooled.
    #[arg(long, default_value = "constraint,lambda,metric,param1,param2")]
    by: String,
    /// Keep only these metrics.
    #[arg(long, value_delimiter = ',')]
    metric: Option<Vec<String>>,
    /// Output directory for summary.csv and summary.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StimuliArgs {
    #[arg(long, default_value_t = 28)]
    size: usize,
    #[arg(long)]
    out: PathBuf,
}

fn train(a: TrainArgs) -> Result<()> {
    let (mut cfg, mut origin) = match &a.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => (ExperimentConfig::default(), Origin::default()),
    };
    macro_rules! set {
        ($flag:expr, $field:expr, $key:literal) => {
            if let Some(v) = $flag {
                $field = v;
                origin.mark($key);
            }
        };
    }
    set!(a.experiment, cfg.experiment, "experiment");
    set!(a.arch, cfg.arch, "arch");
    set!(a.data.map(Some), cfg.data_dir, "data_dir");
    set!(a.out, cfg.out_dir, "out_dir");
    set!(a.constraint, cfg.constraints, "constraints");
    set!(a.lambdas, cfg.lambdas, "lambdas");
    set!(a.seeds, cfg.seeds, "seeds");
    set!(a.seed_base, cfg.seed_base, "seed_base");
    set!(a.workers, cfg.workers, "workers");
    set!(a.epochs.map(Some), cfg.train.epochs, "train.epochs");
    set!(a.batch_size.map(Some), cfg.train.batch_size, "train.batch_size");
    set!(a.lr, cfg.train.lr, "train.lr");
    set!(a.train_limit.map(Some), cfg.train.train_limit, "train.train_limit");
    set!(a.test_limit.map(Some), cfg.train.test_limit, "train.test_limit");
    if a.reduced {
        cfg.reduced = true;
    }
    let r = cfg.resolve(&origin)?;
    let report = run_sweep(&r)?;
    let seeds: Vec<u64> = (cfg.seed_base..cfg.seed_base + cfg.seeds).collect();
    write_provenance(&r.exp_dir, "train", &cfg.hash(), &seeds)?;
    println!("{}", report.summary());
    println!("manifest: {}", r.exp_dir.join(MANIFEST_FILE).display());
    if report.failed.is_empty() {
        Ok(())
    } else {
        Err(LabError::Internal(format!("{} cells failed", report.failed.len())))
    }
}

fn analyze(a: AnalyzeArgs) -> Result<()> {
    let manifest_path = match (&a.manifest, &a.config) {
        (Some(m), _) => m.clone(),
        (None, Some(c)) => {
            let (cfg, _) = ExperimentConfig::load(c)?;
            cfg.out_dir.join(&cfg.experiment).join(MANIFEST_FILE)
        }
        (None, None) => return Err(LabError::user("analyze needs --manifest or --config")),
    };
    let manifest = Manifest::load(&manifest_path)?;
    let mut analysis = manifest.config.analysis.clone();
    if let Some(v) = a.weight_reps {
        analysis.weight_repetitions = v;
    }
    if let Some(v) = a.noise_reps {
        analysis.noise_repetitions = v;
    }
    if let Some(v) = a.permutations {
        analysis.colocalization_permutations = v;
    }
    if let Some(v) = a.similarity {
        analysis.similarity = v;
    }
    let opts = AnalyzeOptions {
        families: Family::parse_list(&a.which)?,
        workers: a.workers.unwrap_or(manifest.config.workers),
        data_dir: a.data,
        analysis,
        ladders: manifest.config.ladders.clone(),
    };
    let summary = analyze::run(&manifest_path, &opts)?;
    for s in &summary {
        println!("{}: {} rows written for {} models -> {}", s.family.tag(), s.rows, s.models, s.dir.display());
    }
    let exp_dir = manifest_path.parent().unwrap_or(std::path::Path::new("."));
    let seeds: Vec<u64> = manifest.entries.iter().map(|e| e.seed).collect();
    let hash = topo_lab::io::sha256_hex(format!("{:?}|{:?}", opts.analysis, opts.ladders).as_bytes());
    write_provenance(exp_dir, &format!("analyze {}", a.which), &hash, &seeds)
}

fn compare(a: CompareArgs) -> Result<()> {
    let by = parse_grouping(&a.by)?;
    let mut rows = read_tables(&a.tables)?;
    if let Some(keep) = &a.metric {
        rows.retain(|r| keep.contains(&r.metric));
    }
    let mut seeds: Vec<u64> = rows.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    seeds.dedup();
    let summary = summarize(&rows, &by);
    write_table(&a.out, "summary", &SUMMARY_COLUMNS, &summary)?;
    let hash = topo_lab::io::sha256_hex(format!("{:?}|{}", a.tables, a.by).as_bytes());
    write_provenance(&a.out, "compare", &hash, &seeds)?;
    println!("{} groups from {} rows -> {}", summary.len(), rows.len(), a.out.join("summary.csv").display());
    Ok(())
}

fn stimuli_export(a: StimuliArgs) -> Result<()> {
    if a.size != 28 && a.size != 32 {
        return Err(LabError::user(format!("stimulus size must be 28 or 32, got {}", a.size)));
    }
    let g = StimulusGeometry::default();
    let mut n = 0;
    for (name, set) in [("wedge", gen_wedges(a.size, &g)), ("ring", gen_rings(a.size, &g))] {
        for (k, img) in set.images.iter().enumerate() {
            write_atomic(&a.out.join(format!("{name}_{k:02}.pgm")), &to_pgm(img, a.size))?;
            n += 1;
        }
    }
    write_provenance(&a.out, "stimuli-export", "", &[])?;
    println!("{n} stimuli written to {}", a.out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let res = match cli.command {
        Command::Train(a) => train(a),
        Command::Analyze(a) => analyze(a),
        Command::Compare(a) => compare(a),
        Command::StimuliExport(a) => stimuli_export(a),
    };
    match res {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
