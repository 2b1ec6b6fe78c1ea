//! `spd`: train, evaluate and analyse self-predictive dynamics agents.
//!
//! Exit status: 0 on success, 1 when a run fails, 2 for usage errors
//! (unknown verb or flag, missing or malformed config, bad override).

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand};
use spd_core::config::TrainConfig;
use spd_core::eval::{
    export_latents, generalization_eval, latent_dataset, load_frames, random_baseline, representation_distance,
    BUILTIN_PAIRINGS,
};
use spd_core::pixelenv::BackgroundKind;
use spd_core::trainer::{load_run, seed_dir, sweep, train, RunOptions, SweepGrid};

#[derive(Parser, Debug)]
#[command(name = "spd", version, about = "Self-predictive dynamics agents on a pixel reacher task")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct ConfigArgs {
    /// Config file of `key = value` lines (a leading `profile = NAME` picks the preset).
    #[arg(long, value_name = "FILE")]
    config: PathBuf,
    /// Override one key, e.g. `--set spd.lambda_psi=0.2` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args, Debug)]
struct RootArgs {
    /// Run root; defaults to `$SPD_RUN_ROOT/<config name>`, else `runs/<config name>`.
    #[arg(long, value_name = "DIR")]
    run_dir: Option<PathBuf>,
    /// Base directory for default run roots.
    #[arg(long, env = "SPD_RUN_ROOT", value_name = "DIR", hide_env_values = true)]
    run_root: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one seed (or every seed in `train.seeds`) into `<run root>/seed_<n>`.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        root: RootArgs,
        /// Train only this seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from the run's checkpoint (config and seed must match).
        #[arg(long)]
        resume: bool,
        /// Stop with a checkpoint after this many raw environment steps.
        #[arg(long, value_name = "STEPS")]
        stop_after: Option<usize>,
        /// Do not echo evaluation results.
        #[arg(long)]
        quiet: bool,
    },
    /// Evaluate a trained run, or with `--random` the uniform-random floor of a config.
    Eval {
        /// Seed directory of a trained run.
        #[arg(long, value_name = "DIR", required_unless_present = "random")]
        run: Option<PathBuf>,
        /// Measure the random-policy baseline of `--config` instead.
        #[arg(long, requires = "config")]
        random: bool,
        #[arg(long, value_name = "FILE")]
        config: Option<PathBuf>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Episodes (default: `train.eval_episodes`, or `eval.baseline_episodes` with `--random`).
        #[arg(long)]
        episodes: Option<usize>,
        /// Evaluation seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Evaluate under this background instead of the training one.
        #[arg(long)]
        background: Option<BackgroundKind>,
    },
    /// Evaluate a run on its training background and on an unseen one.
    Generalize {
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        /// Default: `eval.test_background` of the run's config.
        #[arg(long)]
        test_background: Option<BackgroundKind>,
        #[arg(long)]
        episodes: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Latent distance between same-state observations under different backgrounds.
    Distance {
        /// `NAME=DIR` for each method's trained run (repeatable).
        #[arg(long = "method", value_name = "NAME=DIR", required = true)]
        methods: Vec<String>,
        /// Method every column is normalized to.
        #[arg(long, default_value = "spd")]
        reference: String,
        /// Pairs per background pairing (default: `eval.distance_pairs`).
        #[arg(long)]
        pairs: Option<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train and evaluate a grid of self-predictive loss weights.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[command(flatten)]
        root: RootArgs,
        /// `standard` for the 4×5 decade grid, or `PSI,PSI..:ADV,ADV..`.
        #[arg(long, default_value = "standard")]
        grid: String,
        #[arg(long)]
        quiet: bool,
    },
    /// Write latents of rendered observations as `state,background,z0..` rows.
    ExportLatents {
        #[arg(long, value_name = "DIR")]
        run: PathBuf,
        #[arg(long, value_name = "FILE")]
        out: PathBuf,
        /// Physical states, each rendered under every background.
        #[arg(long, default_value_t = 100)]
        states: usize,
        /// Comma-separated background kinds.
        #[arg(long, value_delimiter = ',', default_value = "default,simple_distractor,textured_video")]
        backgrounds: Vec<BackgroundKind>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

/// Failures split by exit status.
enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Self::Runtime(e)
    }
}

fn usage<T>(r: anyhow::Result<T>) -> Result<T, Failure> {
    r.map_err(Failure::Usage)
}

fn load_config(path: &Path, overrides: &[String]) -> anyhow::Result<TrainConfig> {
    let mut c = TrainConfig::load(path).with_context(|| format!("loading {}", path.display()))?;
    for o in overrides {
        c.apply_override(o).with_context(|| format!("override {o:?}"))?;
    }
    c.validate().context("resolved configuration")?;
    Ok(c)
}

fn run_root(root: &RootArgs, config: &Path) -> PathBuf {
    if let Some(d) = &root.run_dir {
        return d.clone();
    }
    let stem = config.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "run".into());
    root.run_root.clone().unwrap_or_else(|| PathBuf::from("runs")).join(stem)
}

fn parse_grid(text: &str) -> anyhow::Result<SweepGrid> {
    if text == "standard" {
        return Ok(SweepGrid::standard());
    }
    let (psi, adv) = text.split_once(':').ok_or_else(|| anyhow!("grid {text:?} is neither `standard` nor PSI..:ADV.."))?;
    let list = |s: &str| -> anyhow::Result<Vec<f64>> {
        s.split(',').map(|v| v.trim().parse::<f64>().with_context(|| format!("grid value {v:?}"))).collect()
    };
    let grid = SweepGrid { lambda_psi: list(psi)?, lambda_adv: list(adv)? };
    if grid.cells().is_empty() {
        bail!("grid is empty");
    }
    Ok(grid)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Train { config, root, seed, resume, stop_after, quiet } => {
            let cfg = usage(load_config(&config.config, &config.overrides))?;
            print!("{}", cfg.canonical_text());
            let root = run_root(&root, &config.config);
            let seeds = seed.map(|s| vec![s]).unwrap_or_else(|| cfg.train.seeds.clone());
            let opts = RunOptions { resume, stop_after, verbose: !quiet };
            for s in seeds {
                let dir = seed_dir(&root, s);
                let out = train(&cfg, s, &dir, &opts).with_context(|| format!("training seed {s}"))?;
                let eval = out.last_eval.map(|(m, sd)| format!("{m} ± {sd}")).unwrap_or_else(|| "-".into());
                let state = if out.completed { "finished" } else { "stopped" };
                println!("seed {s}: {state} at step {} (eval {eval}) -> {}", out.raw_steps, dir.display());
            }
        }
        Command::Eval { run, random, config, overrides, episodes, seed, background } => {
            if random {
                let path = config.expect("clap enforces --config with --random");
                let cfg = usage(load_config(&path, &overrides))?;
                let env = background.map(|b| cfg.env.with_background(b)).unwrap_or_else(|| cfg.env.clone());
                let frames = load_frames(&env).map_err(|e| Failure::Usage(e.into()))?;
                let s = random_baseline(&env, frames, episodes.unwrap_or(cfg.eval.baseline_episodes), seed)
                    .context("random baseline")?;
                println!("policy,background,episodes,mean,std");
                println!("random,{},{},{},{}", env.background, s.returns.len(), s.mean, s.std);
            } else {
                let dir = run.expect("clap enforces --run without --random");
                let loaded = load_run(&dir).with_context(|| format!("loading run {}", dir.display()))?;
                let env = background
                    .map(|b| loaded.config.env.with_background(b))
                    .unwrap_or_else(|| loaded.config.env.clone());
                let n = episodes.unwrap_or(loaded.config.train.eval_episodes);
                let s = spd_core::eval::evaluate(loaded.agent(), &env, load_frames(&env).context("frames")?, n, seed)
                    .context("evaluation")?;
                println!("policy,background,episodes,mean,std");
                println!("{},{},{},{},{}", dir.display(), env.background, n, s.mean, s.std);
            }
        }
        Command::Generalize { run, test_background, episodes, seed } => {
            let loaded = load_run(&run).with_context(|| format!("loading run {}", run.display()))?;
            let c = &loaded.config;
            let test = c.env.with_background(test_background.unwrap_or(c.eval.test_background));
            let row =
                generalization_eval(loaded.agent(), &c.env, &test, episodes.unwrap_or(c.train.eval_episodes), seed)
                    .context("generalization evaluation")?;
            println!("train_bg,test_bg,mean,std,gap");
            println!(
                "{},{},{},{},{}",
                row.train_background,
                row.test_background,
                row.test.mean,
                row.test.std,
                row.gap()
            );
        }
        Command::Distance { methods, reference, pairs, seed } => {
            let mut runs = Vec::new();
            for m in &methods {
                let (name, dir) = usage(m.split_once('=').ok_or_else(|| anyhow!("--method {m:?} is not NAME=DIR")))?;
                let loaded = load_run(Path::new(dir)).with_context(|| format!("loading run {dir}"))?;
                runs.push((name.to_string(), loaded));
            }
            if !runs.iter().any(|(n, _)| *n == reference) {
                return Err(Failure::Usage(anyhow!("reference method {reference:?} was not given with --method")));
            }
            let base = &runs[0].1.config;
            let encoders: Vec<(&str, &spd_core::nets::Encoder)> =
                runs.iter().map(|(n, r)| (n.as_str(), &r.agent().encoder)).collect();
            let table = representation_distance(
                &encoders,
                &reference,
                &base.env,
                &BUILTIN_PAIRINGS,
                pairs.unwrap_or(base.eval.distance_pairs),
                seed,
            )
            .context("representation distance")?;
            print!("{table}");
            for p in &table.degenerate {
                eprintln!("note: reference distance is zero for {}/{}; values are raw", p.0, p.1);
            }
        }
        Command::Sweep { config, root, grid, quiet } => {
            let cfg = usage(load_config(&config.config, &config.overrides))?;
            let grid = usage(parse_grid(&grid))?;
            let root = run_root(&root, &config.config);
            let opts = RunOptions { verbose: !quiet, ..Default::default() };
            let cells = sweep(&cfg, &grid, &root, &opts).context("sweep")?;
            println!("lambda_psi,lambda_adv,mean_return");
            for c in &cells {
                println!("{},{},{}", c.lambda_psi, c.lambda_adv, c.mean());
            }
            println!("# table written to {}", root.join(spd_core::trainer::SWEEP_FILE).display());
        }
        Command::ExportLatents { run, out, states, backgrounds, seed } => {
            let loaded = load_run(&run).with_context(|| format!("loading run {}", run.display()))?;
            let items =
                latent_dataset(&loaded.config.env, &backgrounds, states, seed).context("rendering observations")?;
            let rows = export_latents(&loaded.agent().encoder, &items, &out).context("exporting latents")?;
            println!("{} rows -> {}", rows.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("usage error: {e:#}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
