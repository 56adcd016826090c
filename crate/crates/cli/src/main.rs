//! `hydra-peft` command-line entry point.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 runtime error
//! (I/O, parsing, shapes, divergence), 3 invariant or contract violation.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use hydra_peft::adapters::{hydra_forward, merge_infer, Adapter};
use hydra_peft::analysis::{self, CostDims, CostSpec};
use hydra_peft::clustering::init_hydra_from_corpus;
use hydra_peft::corpus::{synth_corpus, SynthSpec};
use hydra_peft::params::{param_count, ParamQuery};
use hydra_peft::trainer::{self, HetConfig, Obs1Config, Obs2Config};
use hydra_peft::{Checkpoint, Corpus, Error, Matrix, Scheme, SeededRng, TrainConfig};

/// Environment variable capping the worker threads used by `bench`.
const THREADS_ENV: &str = "HYDRA_PEFT_THREADS";

#[derive(Parser)]
#[command(
    name = "hydra-peft",
    version,
    about = "Asymmetric LoRA toolkit: cluster, train, merge and analyze adapters"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Choose the expert count for a JSONL corpus by TF-IDF k-means and the elbow rule.
    Cluster {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value_t = 8)]
        k_max: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Use this expert count instead of the elbow choice.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train adapters as described by a TOML config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a trained checkpoint on the held-out split of its config.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Compare merged-expert inference with per-expert mixing for every Hydra adapter.
    MergeInfer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// JSON file holding one input vector or an array of them.
        #[arg(long, conflicts_with = "random")]
        input: Option<PathBuf>,
        /// Number of random Gaussian inputs to draw instead.
        #[arg(long, default_value_t = 16)]
        random: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Distances, PCA embedding and cost of the adapters in several checkpoints.
    Analyze {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Also write an SVG scatter of the embedding.
        #[arg(long)]
        svg: bool,
    },
    /// Trainable parameter count and share of the base model.
    Params {
        #[arg(long)]
        scheme: String,
        #[arg(long)]
        rank: u64,
        #[arg(long)]
        experts: Option<u64>,
        #[arg(long)]
        heads: Option<u64>,
        #[arg(long)]
        d: u64,
        #[arg(long)]
        k: u64,
        #[arg(long)]
        layers: u64,
        #[arg(long)]
        matrices_per_layer: u64,
        #[arg(long)]
        base_total: u64,
    },
    /// Run an experiment harness over seeds 0..N.
    Bench {
        #[arg(long, value_enum)]
        suite: Suite,
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        /// Write the full results as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write a synthetic corpus with planted components as JSONL.
    Synth {
        #[arg(long, default_value_t = 3)]
        clusters: usize,
        #[arg(long, default_value_t = 50)]
        docs_per_cluster: usize,
        #[arg(long, default_value_t = 0.8)]
        disjointness: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Tag each document with its component as the task.
        #[arg(long)]
        tag_tasks: bool,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Suite {
    Obs1,
    Obs2,
    Het,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Usage(_) => 1,
        Error::Contract(_) | Error::Invariant(_) => 3,
        _ => 2,
    }
}

fn run(command: Command) -> hydra_peft::Result<()> {
    match command {
        Command::Cluster {
            corpus,
            k_max,
            seed,
            k,
            out,
        } => {
            let corpus = Corpus::load(&corpus)?;
            let report = init_hydra_from_corpus(&corpus, k_max, seed, k)?;
            write(&out, &json(&report))?;
            println!("k_selected: {}", report.k_selected);
        }
        Command::Train { config, out } => {
            let cfg = TrainConfig::load(&config)?;
            let run = trainer::run_config(&cfg)?;
            fs::create_dir_all(&out)?;
            run.checkpoint.save(out.join("checkpoint.txt"))?;
            let mut csv = Vec::new();
            run.report.write_csv(&mut csv)?;
            write(
                &out.join("report.csv"),
                &String::from_utf8(csv).expect("csv is utf-8"),
            )?;
            write(&out.join("report.json"), &run.report.to_json())?;
            eprintln!(
                "trained {} for {} steps: loss {} -> {}",
                cfg.scheme.as_str(),
                cfg.steps,
                run.report.initial_loss,
                run.report.final_loss
            );
            println!("final_loss: {}", run.report.final_loss);
        }
        Command::Eval { config, checkpoint } => {
            let cfg = TrainConfig::load(&config)?;
            let mut prepared = trainer::prepare(&cfg)?;
            prepared
                .model
                .load_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let out = prepared.model.forward(&prepared.data.eval)?;
            let labels = match &prepared.data.eval.targets {
                hydra_peft::model::Targets::Classes(l) => l.clone(),
                hydra_peft::model::Targets::Values(_) => Vec::new(),
            };
            let summary = serde_json::json!({
                "loss": out.loss,
                "accuracy": (!labels.is_empty()).then(|| out.accuracy(&labels)),
                "gate_usage": out.gate_usage,
            });
            println!("{}", serde_json::to_string_pretty(&summary).expect("json"));
        }
        Command::MergeInfer {
            checkpoint,
            input,
            random,
            seed,
        } => merge_command(&checkpoint, input.as_deref(), random, seed)?,
        Command::Analyze {
            checkpoints,
            out,
            svg,
        } => analyze_command(&checkpoints, &out, svg)?,
        Command::Params {
            scheme,
            rank,
            experts,
            heads,
            d,
            k,
            layers,
            matrices_per_layer,
            base_total,
        } => {
            let scheme: Scheme = scheme.parse()?;
            let count = match (scheme, experts, heads) {
                (Scheme::Lora, _, _) => 1,
                (_, Some(n), None) | (_, None, Some(n)) => n,
                (_, Some(_), Some(_)) => return Err(usage("give --experts or --heads, not both")),
                (s, None, None) => {
                    return Err(usage(&format!("{} needs --experts or --heads", s.as_str())))
                }
            };
            let q = ParamQuery {
                scheme,
                d,
                k,
                rank,
                count,
                matrices_per_layer,
                layers,
                base_total,
            };
            println!("{}", param_count(&q)?.display());
        }
        Command::Bench { suite, seeds, out } => {
            let threads = std::env::var(THREADS_ENV)
                .ok()
                .and_then(|v| v.parse::<usize>().ok())
                .unwrap_or(0);
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Io(std::io::Error::other(e)))?;
            let seeds: Vec<u64> = (0..seeds).collect();
            let results = pool.install(|| bench(suite, &seeds))?;
            if let Some(out) = out {
                write(
                    &out,
                    &format!(
                        "{}\n",
                        serde_json::to_string_pretty(&results).expect("json")
                    ),
                )?;
            }
        }
        Command::Synth {
            clusters,
            docs_per_cluster,
            disjointness,
            seed,
            tag_tasks,
            out,
        } => {
            let mut spec = SynthSpec::new(clusters, docs_per_cluster, disjointness, seed);
            spec.tag_tasks = tag_tasks;
            let synth = synth_corpus(&spec)?;
            synth.corpus.save(&out)?;
            eprintln!(
                "wrote {} documents to {}",
                synth.corpus.len(),
                out.display()
            );
        }
    }
    Ok(())
}

fn usage(msg: &str) -> Error {
    Error::Usage(msg.to_string())
}

fn json(value: &impl serde::Serialize) -> String {
    format!(
        "{}\n",
        serde_json::to_string_pretty(value).expect("value serializes")
    )
}

fn write(path: &Path, text: &str) -> hydra_peft::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, text)?;
    Ok(())
}

fn read_inputs(path: &Path) -> hydra_peft::Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path)?;
    let value: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Line {
        line: e.line(),
        message: e.to_string(),
    })?;
    let parse = |v: &serde_json::Value| -> Option<Vec<f64>> {
        v.as_array()?.iter().map(|x| x.as_f64()).collect()
    };
    let rows = match value.as_array() {
        Some(items) if items.iter().all(|v| v.is_array()) => {
            items.iter().map(parse).collect::<Option<Vec<_>>>()
        }
        Some(_) => parse(&value).map(|r| vec![r]),
        None => None,
    };
    rows.filter(|r| !r.is_empty()).ok_or_else(|| Error::Parse {
        offset: 0,
        message: "expected a numeric array or an array of them".into(),
    })
}

fn merge_command(
    checkpoint: &Path,
    input: Option<&Path>,
    random: usize,
    seed: u64,
) -> hydra_peft::Result<()> {
    let ck = Checkpoint::load(checkpoint)?;
    let given = input.map(read_inputs).transpose()?;
    let mut rng = SeededRng::new(seed);
    let mut report = serde_json::Map::new();
    let mut worst: f64 = 0.0;
    for (point, adapter) in ck.adapters()? {
        let Adapter::Hydra(h) = adapter else { continue };
        let w0 = Matrix::zeros(h.out_dim(), h.in_dim());
        let inputs = match &given {
            Some(rows) => rows.clone(),
            None => (0..random.max(1))
                .map(|_| (0..h.in_dim()).map(|_| rng.normal()).collect())
                .collect(),
        };
        let mut max_diff: f64 = 0.0;
        for x in &inputs {
            let (moe, _) = hydra_forward(x, &w0, &h)?;
            let merged = merge_infer(x, &w0, &h)?;
            for (a, b) in moe.iter().zip(&merged) {
                max_diff = max_diff.max((a - b).abs());
            }
        }
        worst = worst.max(max_diff);
        report.insert(
            point,
            serde_json::json!({ "inputs": inputs.len(), "max_abs_diff": max_diff }),
        );
    }
    if report.is_empty() {
        return Err(usage("checkpoint holds no hydra adapters"));
    }
    eprintln!("{}", serde_json::to_string_pretty(&report).expect("json"));
    println!("max |merge - moe|: {worst:e}");
    Ok(())
}

fn checkpoint_ids(paths: &[PathBuf]) -> Vec<String> {
    let stems: Vec<String> = paths
        .iter()
        .map(|p| {
            let stem = p
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            match p.parent().and_then(Path::file_name) {
                Some(dir) if stem == "checkpoint" => dir.to_string_lossy().into_owned(),
                _ => stem,
            }
        })
        .collect();
    if stems.iter().collect::<BTreeSet<_>>().len() == stems.len() {
        stems
    } else {
        paths.iter().map(|p| p.display().to_string()).collect()
    }
}

fn analyze_command(paths: &[PathBuf], out: &Path, svg: bool) -> hydra_peft::Result<()> {
    if paths.len() < 2 {
        return Err(usage("analyze needs at least two --checkpoint files"));
    }
    let ids = checkpoint_ids(paths);
    let checkpoints = ids
        .iter()
        .cloned()
        .zip(paths)
        .map(|(id, p)| Ok((id, Checkpoint::load(p)?)))
        .collect::<hydra_peft::Result<Vec<_>>>()?;
    let report = analysis::breakdown(&checkpoints)?;
    fs::create_dir_all(out)?;
    analysis::write_distance_csv(&report, fs::File::create(out.join("distances.csv"))?)?;
    analysis::write_embedding_csv(&report, fs::File::create(out.join("embedding.csv"))?)?;
    if svg {
        write(
            &out.join("embedding.svg"),
            &analysis::embedding_svg(&report),
        )?;
    }

    let mut costs = Vec::new();
    let mut reference: Option<CostSpec> = None;
    for (_, ck) in &checkpoints {
        let adapters = ck.adapters()?;
        let (_, first) = &adapters[0];
        let spec = CostSpec {
            scheme: first.scheme(),
            rank: first.rank() as u64,
            count: first.count() as u64,
        };
        let dims = CostDims {
            d: first.out_dim() as u64,
            k: first.in_dim() as u64,
            matrices: adapters.len() as u64,
        };
        let reference = *reference.get_or_insert(spec);
        costs.push(analysis::cost(&spec, &dims, &reference)?);
    }
    analysis::write_cost_csv(&costs, fs::File::create(out.join("cost.csv"))?)?;
    let s = report.separation;
    write(
        &out.join("summary.json"),
        &json(&serde_json::json!({ "checkpoints": ids, "separation": s })),
    )?;
    println!(
        "D_A: {} D_B: {} D_B/D_A: {}{}",
        s.d_a,
        s.d_b,
        s.ratio,
        s.flag.map(|f| format!(" ({f:?})")).unwrap_or_default()
    );
    Ok(())
}

fn bench(suite: Suite, seeds: &[u64]) -> hydra_peft::Result<serde_json::Value> {
    Ok(match suite {
        Suite::Obs1 => {
            let r = trainer::run_observation1(seeds, &Obs1Config::default())?;
            let control = trainer::run_observation1(
                seeds,
                &Obs1Config {
                    homogeneous: true,
                    ..Obs1Config::default()
                },
            )?;
            println!("seed,single_loss,split_loss,split_wins");
            for row in &r.rows {
                println!(
                    "{},{},{},{}",
                    row.seed, row.single_loss, row.split_loss, row.split_wins
                );
            }
            println!(
                "split wins: {}/{} at {} trainable parameters",
                r.wins,
                seeds.len(),
                r.params
            );
            println!("homogeneous control wins: {}/{}", control.wins, seeds.len());
            serde_json::json!({ "interference": r, "homogeneous": control })
        }
        Suite::Obs2 => {
            let r = trainer::run_observation2(seeds, &Obs2Config::default())?;
            println!("seed,d_a,d_b,ratio");
            for row in &r.rows {
                let s = row.separation;
                println!("{},{},{},{}", row.seed, s.d_a, s.d_b, s.ratio);
            }
            println!("D_B/D_A > 1 wins: {}/{}", r.wins, seeds.len());
            serde_json::to_value(&r).expect("json")
        }
        Suite::Het => {
            let curves = trainer::run_heterogeneity_seeds(seeds, &HetConfig::default())?;
            println!("seed,level,fft_metric,peft_metric,gap");
            let mut wins = 0;
            for (seed, rows) in &curves {
                for row in rows {
                    println!(
                        "{seed},{},{},{},{}",
                        row.level, row.fft_metric, row.peft_metric, row.gap
                    );
                }
                if rows.last().map(|r| r.gap) > rows.first().map(|r| r.gap) {
                    wins += 1;
                }
            }
            println!("gap widens: {wins}/{}", seeds.len());
            serde_json::to_value(&curves).expect("json")
        }
    })
}
