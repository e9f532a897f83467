//! Experiment runner for population-based architecture search: run configs,
//! compare result sets, sweep ablations and population sizes, build soups,
//! and render reports.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use pbtnas::analysis::{aggregate, bonferroni_threshold, pair_by_seed, wilcoxon_one_sided, RunSet};
use pbtnas::config::{Algorithm, ExperimentConfig};
use pbtnas::evolve::greedy_soup;
use pbtnas::network::NetworkState;
use pbtnas::persist::{load_checkpoint, read_summary, write_run_artifacts};
use pbtnas::report::{find_run_dirs, render_line_chart, write_report, Series};
use pbtnas::runner::{resume_experiment, run_experiment_with, RunOptions};
use pbtnas::tasks::{evaluate_fitness, EvalSplit};

#[derive(Parser)]
#[command(
    name = "pbtnas",
    version,
    about = "Population based training with architecture mixing, at desk scale"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment config over its seed list.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Run only this seed (required with --resume).
        #[arg(long)]
        seed: Option<u64>,
        /// Override the worker count from the config.
        #[arg(long)]
        workers: Option<usize>,
        /// Resume from a checkpoint directory written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Override the output directory from the config.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exact one-sided Wilcoxon comparison of two finished result trees
    /// (tests whether runs in DIR_A beat the seed-paired runs in DIR_B).
    Compare {
        dir_a: PathBuf,
        dir_b: PathBuf,
        #[arg(long, default_value_t = 0.05)]
        alpha: f64,
        /// Number of tests the Bonferroni correction accounts for.
        #[arg(long, default_value_t = 4)]
        tests: usize,
        /// Where to write the comparison table.
        #[arg(long, default_value = "comparison.csv")]
        out: PathBuf,
    },
    /// Run the weight-inheritance ablation grid: default shrink-perturb,
    /// copy-exact, reinitialize, and no-mixing.
    Ablate {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated seed list overriding the config.
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the population scaling study over a list of population sizes.
    Scale {
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated population sizes, e.g. 4,8,16.
        #[arg(long)]
        populations: String,
        #[arg(long)]
        seeds: Option<String>,
        #[arg(long)]
        workers: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Build a greedy weight-averaging soup from a finished run.
    Soup {
        run_dir: PathBuf,
        /// Kept for interface compatibility; at this scale whole networks
        /// are averaged and eligibility is identical-genome, so all values
        /// behave the same.
        #[arg(long, default_value = "both", value_parser = ["encoder", "actor", "both"])]
        what: String,
    },
    /// Render CSV tables and SVG charts for a finished run directory.
    Report { run_dir: PathBuf },
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            seed,
            workers,
            resume,
            out,
        } => cmd_run(&config, seed, workers, resume.as_deref(), out),
        Command::Compare {
            dir_a,
            dir_b,
            alpha,
            tests,
            out,
        } => cmd_compare(&dir_a, &dir_b, alpha, tests, &out),
        Command::Ablate {
            config,
            seeds,
            workers,
            out,
        } => cmd_ablate(&config, seeds.as_deref(), workers, out),
        Command::Scale {
            config,
            populations,
            seeds,
            workers,
            out,
        } => cmd_scale(&config, &populations, seeds.as_deref(), workers, out),
        Command::Soup { run_dir, what } => cmd_soup(&run_dir, &what),
        Command::Report { run_dir } => cmd_report(&run_dir),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn parse_seed_list(s: &str) -> Result<Vec<u64>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<u64>()
                .with_context(|| format!("bad seed {v:?}"))
        })
        .collect()
}

/// Run one (config, seed) and write its artifacts under `base/seed_<s>`.
fn run_one_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    workers: Option<usize>,
    base: &Path,
) -> Result<f64> {
    let run_dir = base.join(format!("seed_{seed}"));
    std::fs::create_dir_all(&run_dir)?;
    let opts = RunOptions {
        workers,
        checkpoint_dir: Some(run_dir.join("checkpoint")),
        stop_after: None,
    };
    let out = run_experiment_with(cfg, seed, &opts)?;
    write_run_artifacts(&run_dir, cfg, &out)?;
    println!(
        "[run] {} seed {seed}: final best fitness {:.6} (member {}) -> {}",
        cfg.algorithm.label(),
        out.best.fitness,
        out.best.member_id,
        run_dir.display()
    );
    Ok(out.best.fitness)
}

fn cmd_run(
    config_path: &Path,
    seed: Option<u64>,
    workers: Option<usize>,
    resume: Option<&Path>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut cfg = ExperimentConfig::from_path(config_path)?;
    if let Some(out) = out {
        cfg.out_dir = out;
    }
    let base = cfg.out_dir.join(cfg.algorithm.label());
    if let Some(ckpt) = resume {
        let Some(seed) = seed else {
            bail!("--resume requires --seed");
        };
        let run_dir = base.join(format!("seed_{seed}"));
        std::fs::create_dir_all(&run_dir)?;
        let opts = RunOptions {
            workers,
            checkpoint_dir: Some(run_dir.join("checkpoint")),
            stop_after: None,
        };
        let out = resume_experiment(&cfg, seed, ckpt, &opts)?;
        write_run_artifacts(&run_dir, &cfg, &out)?;
        println!(
            "[run] resumed seed {seed}: final best fitness {:.6} -> {}",
            out.best.fitness,
            run_dir.display()
        );
        return Ok(());
    }
    let seeds = match seed {
        Some(s) => vec![s],
        None => cfg.seeds.clone(),
    };
    let mut finals = Vec::new();
    for s in &seeds {
        finals.push(run_one_seed(&cfg, *s, workers, &base)?);
    }
    if finals.len() > 1 {
        let agg = aggregate(&finals)?;
        println!(
            "[run] {} over {} seeds: mean {:.6} std {:.6}",
            cfg.algorithm.label(),
            finals.len(),
            agg.mean,
            agg.std
        );
    }
    Ok(())
}

fn load_run_set(dir: &Path) -> Result<RunSet> {
    let mut runs = Vec::new();
    let mut algorithm = String::new();
    let mut task = String::new();
    for rd in find_run_dirs(dir)? {
        let summary = read_summary(&rd)?;
        algorithm = summary.algorithm.clone();
        task = summary.task_kind.clone();
        runs.push((summary.seed, summary.final_best.fitness));
    }
    runs.sort_by_key(|(s, _)| *s);
    Ok(RunSet {
        algorithm: format!("{algorithm} ({task})"),
        runs,
    })
}

fn cmd_compare(dir_a: &Path, dir_b: &Path, alpha: f64, tests: usize, out: &Path) -> Result<()> {
    let a = load_run_set(dir_a)?;
    let b = load_run_set(dir_b)?;
    let (xs, ys) = pair_by_seed(&a, &b);
    if xs.is_empty() {
        bail!("no seed-paired runs between {} and {}", dir_a.display(), dir_b.display());
    }
    let p = wilcoxon_one_sided(&xs, &ys)?;
    let threshold = bonferroni_threshold(alpha, tests)?;
    let verdict = if p < threshold { "significant" } else { "not significant" };
    println!(
        "[compare] H1: {} > {} over {} paired seeds",
        a.algorithm,
        b.algorithm,
        xs.len()
    );
    println!("[compare] exact one-sided Wilcoxon p = {p}");
    println!("[compare] threshold {threshold} (alpha {alpha}, {tests} tests): {verdict}");
    let csv = format!(
        "algorithm_1,algorithm_2,setting,p_value\n{},{},{},{}\n",
        a.algorithm.replace(',', ";"),
        b.algorithm.replace(',', ";"),
        "final-fitness",
        p
    );
    std::fs::write(out, csv)?;
    println!("[compare] table written to {}", out.display());
    Ok(())
}

fn cmd_ablate(
    config_path: &Path,
    seeds: Option<&str>,
    workers: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut base_cfg = ExperimentConfig::from_path(config_path)?;
    if let Some(out) = out {
        base_cfg.out_dir = out;
    }
    if let Some(seeds) = seeds {
        base_cfg.seeds = parse_seed_list(seeds)?;
    }
    let out_root = base_cfg.out_dir.join("ablate");

    // the inheritance grid plus the no-mixing control
    let variants: Vec<(&str, ExperimentConfig)> = vec![
        ("pbt-nas", {
            let mut c = base_cfg.clone();
            c.algorithm = Algorithm::PbtNas;
            c
        }),
        ("copy-exact", {
            let mut c = base_cfg.clone();
            c.algorithm = Algorithm::PbtNas;
            c.mix.lambda = 1.0;
            c.mix.gamma = 0.0;
            c
        }),
        ("reinit", {
            let mut c = base_cfg.clone();
            c.algorithm = Algorithm::PbtNas;
            c.mix.lambda = 0.0;
            c.mix.gamma = 1.0;
            c
        }),
        ("no-mixing", {
            let mut c = base_cfg.clone();
            c.algorithm = Algorithm::NoMixing;
            c
        }),
    ];

    let mut table = String::from("variant,lambda,gamma,seeds,mean_final,std_final\n");
    let mut sets: Vec<(String, RunSet)> = Vec::new();
    for (name, cfg) in &variants {
        cfg.validate()?;
        let base = out_root.join(name);
        let mut runs = Vec::new();
        for &s in &cfg.seeds {
            let f = run_one_seed(cfg, s, workers, &base)?;
            runs.push((s, f));
        }
        let agg = aggregate(&runs.iter().map(|(_, f)| *f).collect::<Vec<_>>())?;
        println!(
            "[ablate] {name}: mean {:.6} std {:.6} over {} seeds",
            agg.mean,
            agg.std,
            runs.len()
        );
        table.push_str(&format!(
            "{name},{},{},{},{},{}\n",
            cfg.mix.lambda,
            cfg.mix.gamma,
            runs.len(),
            agg.mean,
            agg.std
        ));
        sets.push((name.to_string(), RunSet { algorithm: name.to_string(), runs }));
    }

    // paired tests of the default against each alternative; seed-paired runs
    // can coincide exactly, which leaves the test undefined
    let mut tests_csv = String::from("algorithm_1,algorithm_2,setting,p_value\n");
    let default_set = sets[0].1.clone();
    for (name, set) in sets.iter().skip(1) {
        let (xs, ys) = pair_by_seed(&default_set, set);
        let p = match wilcoxon_one_sided(&xs, &ys) {
            Ok(p) => p.to_string(),
            Err(_) => "undefined".to_string(),
        };
        println!("[ablate] pbt-nas vs {name}: exact p = {p}");
        tests_csv.push_str(&format!("pbt-nas,{name},ablation,{p}\n"));
    }
    std::fs::create_dir_all(&out_root)?;
    std::fs::write(out_root.join("ablate_table.csv"), table)?;
    std::fs::write(out_root.join("ablate_tests.csv"), tests_csv)?;
    println!("[ablate] tables written to {}", out_root.display());
    Ok(())
}

fn cmd_scale(
    config_path: &Path,
    populations: &str,
    seeds: Option<&str>,
    workers: Option<usize>,
    out: Option<PathBuf>,
) -> Result<()> {
    let mut base_cfg = ExperimentConfig::from_path(config_path)?;
    if let Some(out) = out {
        base_cfg.out_dir = out;
    }
    if let Some(seeds) = seeds {
        base_cfg.seeds = parse_seed_list(seeds)?;
    }
    let sizes: Vec<usize> = populations
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .with_context(|| format!("bad population size {v:?}"))
        })
        .collect::<Result<_>>()?;
    if sizes.is_empty() {
        bail!("--populations needs at least one size");
    }
    let out_root = base_cfg.out_dir.join("scale");

    let mut table = String::from("population,seeds,mean_final,std_final\n");
    let mut means = Vec::new();
    for &n in &sizes {
        let mut cfg = base_cfg.clone();
        cfg.population = n;
        cfg.validate().with_context(|| {
            format!("population {n} is invalid for this config (check tau)")
        })?;
        let base = out_root.join(format!("n{n}"));
        let mut finals = Vec::new();
        for &s in &cfg.seeds {
            finals.push(run_one_seed(&cfg, s, workers, &base)?);
        }
        let agg = aggregate(&finals)?;
        println!(
            "[scale] N = {n}: mean {:.6} std {:.6} over {} seeds",
            agg.mean,
            agg.std,
            finals.len()
        );
        table.push_str(&format!("{n},{},{},{}\n", finals.len(), agg.mean, agg.std));
        means.push((n as f64, agg.mean));
    }
    std::fs::create_dir_all(&out_root)?;
    std::fs::write(out_root.join("scale.csv"), table)?;
    let chart = render_line_chart(
        "final fitness vs population size",
        "population size",
        "mean final fitness",
        &[Series {
            name: base_cfg.algorithm.label().to_string(),
            points: means,
        }],
    );
    std::fs::write(out_root.join("scale.svg"), chart)?;
    println!("[scale] results written to {}", out_root.display());
    Ok(())
}

fn cmd_soup(run_dir: &Path, what: &str) -> Result<()> {
    for rd in find_run_dirs(run_dir)? {
        let summary = read_summary(&rd)?;
        let cfg = summary.config.clone();
        let task = cfg.build_task()?;
        let (pop, _) = load_checkpoint(&rd.join("checkpoint"), cfg.optim_spec())?;
        let candidates: Vec<&NetworkState> = pop.members.iter().collect();
        let result = greedy_soup(&candidates, |net| {
            evaluate_fitness(net, &task, EvalSplit::Heldout)
        })?;
        let delta = result.heldout_fitness - result.best_individual_heldout;
        println!(
            "[soup] {} (what={what}): held-out best individual {:.6}, soup {:.6} (delta {:+.6}), {} ingredient(s)",
            rd.display(),
            result.best_individual_heldout,
            result.heldout_fitness,
            delta,
            result.ingredients.len()
        );
        let json = serde_json::json!({
            "what": what,
            "best_individual_heldout": result.best_individual_heldout,
            "soup_heldout": result.heldout_fitness,
            "delta": delta,
            "ingredients": result.ingredients.iter().map(|m| m.0).collect::<Vec<_>>(),
            "genome": result.network.genome.0,
        });
        std::fs::write(rd.join("soup.json"), serde_json::to_string_pretty(&json)?)?;
    }
    Ok(())
}

fn cmd_report(run_dir: &Path) -> Result<()> {
    write_report(run_dir)?;
    println!("[report] charts and tables written under {}", run_dir.display());
    Ok(())
}
