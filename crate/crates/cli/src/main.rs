use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

use signreg_core::categorizer::CategoryAssignment;
use signreg_core::ensemble::Variant;
use signreg_core::gateway::{record_store_merge, Gateway};
use signreg_core::harness::{
    build_gateway, fit_full, reliability_report, resolve_assignments, run_ablation, run_experiment, run_sweep,
    run_transfer, ArtifactWriter, Dataset, ExperimentConfig, MiRows, ProviderKind, SweepAxis,
};
use signreg_core::metrics::DEFAULT_TAUS;
use signreg_core::synth::{make_synthetic, SyntheticSpec};

#[derive(Parser)]
#[command(
    name = "signreg",
    version,
    about = "Few-shot regional indicator estimation with sign-constrained ensembles"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// Experiment config (JSON). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the provider kind: live, replay or mock.
    #[arg(long, global = true)]
    provider: Option<String>,
    /// Transcript files for the replay provider.
    #[arg(long, global = true)]
    replay: Vec<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    /// Worker threads (0 = all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Categorize every feature module of a dataset.
    Categorize {
        #[arg(long)]
        dataset: Option<String>,
    },
    /// Run interaction discovery and filtering for a dataset.
    Discover {
        #[arg(long)]
        dataset: Option<String>,
        /// Assignments JSON written by `categorize`.
        #[arg(long)]
        assignments: Option<PathBuf>,
    },
    /// Fit one model on all labeled rows and print the largest weights.
    Fit {
        #[arg(long)]
        dataset: Option<String>,
        #[arg(long)]
        assignments: Option<PathBuf>,
        #[arg(long, default_value_t = 15)]
        top: usize,
    },
    /// Few-shot experiment over all datasets, shot settings and runs.
    Run,
    /// Compare model variants on identical shots.
    Ablate {
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "simple_linear,selection_only,no_nonlinear,no_constraints,full"
        )]
        variants: Vec<Variant>,
    },
    /// Full-shot cross-dataset transfer matrix.
    Transfer,
    /// Sweep k_percent or ensemble_size.
    Sweep {
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Categorization agreement with correlation thresholds, and MI gain of
    /// discovered features.
    Reliability {
        #[arg(long, value_delimiter = ',')]
        taus: Vec<f64>,
        /// Compute MI on a seeded sample of this many rows instead of all rows.
        #[arg(long)]
        mi_shots: Option<usize>,
    },
    /// Write a synthetic dataset (CSV plus registry JSON).
    Synth {
        /// Synthetic spec JSON.
        #[arg(long)]
        spec: PathBuf,
    },
    /// Merge transcript files into one deduplicated file.
    ReplayMerge {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
}

fn load_config(g: &Global) -> Result<(ExperimentConfig, PathBuf)> {
    let (mut cfg, base) = match &g.config {
        Some(path) => (
            ExperimentConfig::load(path)?,
            path.parent().map(Path::to_path_buf).unwrap_or_default(),
        ),
        None => (ExperimentConfig::default(), PathBuf::from(".")),
    };
    if let Some(p) = &g.provider {
        cfg.provider.kind = p.parse::<ProviderKind>()?;
    }
    if !g.replay.is_empty() {
        cfg.provider.replay = g.replay.iter().map(std::path::absolute).collect::<Result<_, _>>()?;
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(w) = g.workers {
        cfg.workers = w;
    }
    cfg.validate()?;
    Ok((cfg, base))
}

struct Session {
    cfg: ExperimentConfig,
    datasets: Vec<Dataset>,
    gateway: Gateway,
    writer: ArtifactWriter,
}

fn open(g: &Global) -> Result<Session> {
    let (cfg, base) = load_config(g)?;
    let datasets = cfg.load_datasets(&base)?;
    if datasets.is_empty() {
        bail!("config lists no datasets");
    }
    let writer = ArtifactWriter::new(&g.out_dir)?;
    let record = (cfg.provider.kind == ProviderKind::Live).then(|| g.out_dir.join("live_transcripts.jsonl"));
    let gateway = build_gateway(&cfg, &base, record.as_deref())?;
    Ok(Session {
        cfg,
        datasets,
        gateway,
        writer,
    })
}

fn pick<'a>(datasets: &'a [Dataset], name: Option<&str>) -> Result<&'a Dataset> {
    match name {
        None => Ok(&datasets[0]),
        Some(n) => datasets
            .iter()
            .find(|d| d.name == n)
            .with_context(|| format!("no dataset named {n:?}")),
    }
}

fn read_assignments(path: &Path) -> Result<Vec<CategoryAssignment>> {
    let text = std::fs::read_to_string(path).with_context(|| path.display().to_string())?;
    serde_json::from_str(&text).with_context(|| path.display().to_string())
}

fn assignments_for(s: &Session, ds: &Dataset, file: Option<&Path>) -> Result<Vec<CategoryAssignment>> {
    match file {
        Some(p) => read_assignments(p),
        None => {
            let (a, warnings) = resolve_assignments(&s.cfg, ds, &s.gateway, 0)?;
            for w in warnings {
                warn!("{w}");
            }
            Ok(a)
        }
    }
}

fn save_transcripts(s: &Session) -> Result<()> {
    let path = s.writer.root().join("transcripts.jsonl");
    signreg_core::gateway::write_jsonl(&path, &s.gateway.transcripts())?;
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let g = &cli.global;

    match cli.command {
        Command::Synth { spec } => {
            let text = std::fs::read_to_string(&spec).with_context(|| spec.display().to_string())?;
            let spec: SyntheticSpec = serde_json::from_str(&text)?;
            let data = make_synthetic(&spec)?;
            let w = ArtifactWriter::new(&g.out_dir)?;
            w.write_text("synthetic.csv", &data.table.to_csv_string())?;
            w.write_text("registry.json", &data.registry.to_json())?;
            w.write_json("truth.json", &data.truth)?;
            info!("wrote {} rows to {}", data.table.n_rows(), g.out_dir.display());
        }
        Command::ReplayMerge { inputs, output } => {
            let store = record_store_merge(&inputs)?;
            store.write_jsonl(&output)?;
            info!("merged {} transcripts into {}", store.len(), output.display());
        }
        Command::Categorize { dataset } => {
            let s = open(g)?;
            let ds = pick(&s.datasets, dataset.as_deref())?;
            let a = assignments_for(&s, ds, None)?;
            for x in &a {
                println!("{:<32} {}", x.module, x.category);
            }
            s.writer.write_json(&format!("categorize_{}.json", ds.name), &a)?;
            save_transcripts(&s)?;
        }
        Command::Discover { dataset, assignments } => {
            let s = open(g)?;
            let ds = pick(&s.datasets, dataset.as_deref())?;
            let a = assignments_for(&s, ds, assignments.as_deref())?;
            let cfg = ExperimentConfig {
                variant: Variant::Full,
                discovery: true,
                ..s.cfg.clone()
            };
            let full = fit_full(&cfg, ds, &s.gateway, a, 0)?;
            for w in &full.augmentation.warnings {
                warn!("{w}");
            }
            for d in &full.augmentation.discovered {
                println!(
                    "{:<48} {:<10} |r|={:.4}",
                    d.name,
                    d.category.to_string(),
                    d.mean_abs_corr
                );
            }
            s.writer
                .write_json(&format!("discover_{}.json", ds.name), &full.augmentation.discovered)?;
            save_transcripts(&s)?;
        }
        Command::Fit {
            dataset,
            assignments,
            top,
        } => {
            let s = open(g)?;
            let ds = pick(&s.datasets, dataset.as_deref())?;
            let a = assignments_for(&s, ds, assignments.as_deref())?;
            let full = fit_full(&s.cfg, ds, &s.gateway, a, 0)?;
            print!("{}", full.report(top));
            s.writer.write_json(
                &format!("fit_{}.json", ds.name),
                &full.fit.to_record(&full.names, &full.categories),
            )?;
            s.writer
                .write_text(&format!("weights_{}.txt", ds.name), &full.report(top))?;
            save_transcripts(&s)?;
        }
        Command::Run => {
            let s = open(g)?;
            let rep = run_experiment(&s.cfg, &s.datasets, &s.gateway, Some(&s.writer))?;
            for c in &rep.cells {
                for (m, sc) in &c.scores {
                    println!(
                        "{:<24} {:<8} {m}: pearson {:.3} ± {:.3}  rmse {:.3} ± {:.3}",
                        c.dataset, c.setting, sc.pearson, sc.pearson_se, sc.rmse, sc.rmse_se
                    );
                }
            }
        }
        Command::Ablate { variants } => {
            let s = open(g)?;
            let rep = run_ablation(&s.cfg, &s.datasets, &s.gateway, &variants, Some(&s.writer))?;
            print!("{}", rep.win_pearson.to_csv());
            save_transcripts(&s)?;
        }
        Command::Transfer => {
            let s = open(g)?;
            let rep = run_transfer(&s.cfg, &s.datasets, &s.gateway, Some(&s.writer))?;
            print!("{}", rep.to_csv());
        }
        Command::Sweep { axis, values } => {
            let s = open(g)?;
            let rep = run_sweep(&s.cfg, &s.datasets, &s.gateway, axis, &values, Some(&s.writer))?;
            print!("{}", rep.to_csv());
            save_transcripts(&s)?;
        }
        Command::Reliability { taus, mi_shots } => {
            let s = open(g)?;
            let taus = if taus.is_empty() { DEFAULT_TAUS.to_vec() } else { taus };
            let mi_rows = mi_shots.map_or(MiRows::All, MiRows::Shots);
            let rep = reliability_report(&s.cfg, &s.datasets, &s.gateway, &taus, mi_rows, Some(&s.writer))?;
            print!("{}", rep.jaccard.to_markdown());
            for m in &rep.mi {
                match (m.mean_percent, m.se_percent) {
                    (Some(mean), Some(se)) => println!("{}: MI gain {mean:.2}% ± {se:.2}", m.dataset),
                    _ => println!("{}: no discovered features", m.dataset),
                }
            }
            save_transcripts(&s)?;
        }
    }
    Ok(())
}
