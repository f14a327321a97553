use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use a2po_core::dataset::{collect, mix, read_dataset, write_dataset, MixRecipe};
use a2po_core::envs::{BehaviorTier, EnvKind, EnvSpec};
use a2po_core::evalsuite::{evaluate, export_latent_dump, xi_sweep, EvalRecord};
use a2po_core::rng::StreamRng;
use a2po_core::trainer::{parse_pairs, read_checkpoint, run_from, write_checkpoint, TrainConfig, TrainState};

use crate::{CheckpointArgs, EvalArgs, ExportArgs, GenDataArgs, SweepArgs, TrainArgs};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] a2po_core::Error),

    #[error("{0}")]
    Usage(String),

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(a2po_core::Error::Diverged { .. } | a2po_core::Error::NonFinite(_)) => 3,
            _ => 2,
        }
    }
}

type Result<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(io_err(path))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(io_err(path))
}

fn json<T: serde::Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

pub fn gen_data(args: &GenDataArgs, root: &Path) -> Result<()> {
    let env: EnvKind = args.env.parse()?;
    let spec = EnvSpec::from_kind(env);
    let mut rng = StreamRng::new(args.seed, "data");
    if let Some(text) = &args.mix {
        let recipe = MixRecipe::parse(text, args.total)?;
        let mut sources = BTreeMap::new();
        for (tier, n) in recipe.shares() {
            sources.insert(tier, collect(&spec, tier, n, &mut rng)?);
        }
        let data = mix(&recipe, &sources, &mut rng)?;
        let path = match &args.output {
            Some(p) => p.clone(),
            None => root.join(format!("{env}_mix_seed{}.jsonl", args.seed)),
        };
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        write_dataset(&data, &path)?;
        println!("{} {}", path.display(), json(&data.meta.tier_counts));
        return Ok(());
    }
    if args.output.is_some() {
        return Err(CliError::Usage("--output applies only with --mix".into()));
    }
    let tiers: Vec<BehaviorTier> = args
        .tiers
        .split(',')
        .map(|t| t.trim().parse())
        .collect::<a2po_core::Result<_>>()?;
    if tiers.is_empty() || args.size == 0 {
        return Err(CliError::Usage("need at least one tier and a positive --size".into()));
    }
    let mut collected = Vec::new();
    for tier in tiers {
        collected.push((tier, collect(&spec, tier, args.size, &mut rng)?));
    }
    create_dir(root)?;
    for (tier, data) in collected {
        let path = root.join(format!("{env}_{tier}_seed{}.jsonl", args.seed));
        write_dataset(&data, &path)?;
        println!("{} {}", path.display(), json(&data.meta.tier_counts));
    }
    Ok(())
}

struct TrainPlan {
    config: TrainConfig,
    /// Whether `env` was given; otherwise it is taken from the dataset.
    env_given: bool,
    dataset: PathBuf,
    seeds: Vec<u64>,
}

fn parse_seeds(text: &str) -> Result<Vec<u64>> {
    let seeds: Vec<u64> = text
        .split(',')
        .map(|s| s.trim().parse().map_err(|_| CliError::Usage(format!("bad seed {s:?}"))))
        .collect::<Result<_>>()?;
    if seeds.is_empty() {
        return Err(CliError::Usage("seed list is empty".into()));
    }
    Ok(seeds)
}

fn plan(args: &TrainArgs) -> Result<TrainPlan> {
    let mut env_given = false;
    let (mut config, extra) = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path).map_err(io_err(path))?;
            let parsed = TrainConfig::parse_lenient(&text)
                .map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            env_given = parse_pairs(&text)?.iter().any(|(k, _)| k == "env");
            parsed
        }
        None => (TrainConfig::default(), Vec::new()),
    };
    let mut dataset = None;
    let mut seeds = None;
    for (key, value) in extra {
        match key.as_str() {
            "dataset" => {
                // relative to the config file's directory
                let base = args.config.as_ref().and_then(|p| p.parent()).unwrap_or(Path::new(""));
                dataset = Some(base.join(value));
            }
            "seeds" => seeds = Some(parse_seeds(&value)?),
            other => return Err(CliError::Usage(format!("unknown config key {other:?}"))),
        }
    }
    if let Some(v) = &args.variant {
        config.variant = v.parse()?;
    }
    if let Some(d) = &args.dataset {
        dataset = Some(d.clone());
    }
    if let Some(s) = &args.seeds {
        seeds = Some(parse_seeds(s)?);
    }
    for kv in &args.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        env_given |= k.trim() == "env";
        config.set(k.trim(), v)?;
    }
    let dataset = dataset.ok_or_else(|| CliError::Usage("no dataset given (--dataset or `dataset =`)".into()))?;
    if !dataset.is_file() {
        return Err(CliError::Usage(format!("dataset {} does not exist", dataset.display())));
    }
    let seeds = seeds.unwrap_or_else(|| vec![config.seed]);
    Ok(TrainPlan {
        config,
        env_given,
        dataset,
        seeds,
    })
}

pub fn train(args: &TrainArgs, root: &Path) -> Result<()> {
    let mut plan = plan(args)?;
    let data = read_dataset(&plan.dataset)?;
    if !plan.env_given {
        plan.config.env = data.spec.kind;
    }
    plan.config.validate()?;
    TrainState::new(plan.config.clone())?.check_dataset(&data)?;
    for &seed in &plan.seeds {
        let mut config = plan.config.clone();
        config.seed = seed;
        let dir = root.join(config.variant.to_string()).join(format!("seed_{seed}"));
        create_dir(&dir)?;
        write_text(&dir.join("config.cfg"), &config.to_text())?;

        let mut state = TrainState::new(config.clone())?;
        let metrics_path = dir.join("metrics.jsonl");
        let file = File::create(&metrics_path).map_err(io_err(&metrics_path))?;
        let mut w = BufWriter::new(file);
        let mut sink = |m: &a2po_core::trainer::StepMetrics| {
            writeln!(w, "{}", json(m)).map_err(|e| a2po_core::Error::Io {
                path: metrics_path.clone(),
                source: e,
            })
        };
        let outcome = run_from(&mut state, &data, &mut sink);
        w.flush().map_err(io_err(&metrics_path))?;
        outcome?;

        write_checkpoint(&state, &dir.join("checkpoint.bin"))?;
        let mut rng = StreamRng::new(seed, "eval/final");
        let report = evaluate(&state, &state.spec, 1.0, config.eval_episodes, &mut rng)?;
        let record = EvalRecord::new(&config.variant.to_string(), seed, &report);
        write_text(&dir.join("eval.json"), &(json(&record) + "\n"))?;
        println!("{} {}", dir.display(), json(&record));
    }
    Ok(())
}

fn load(common: &CheckpointArgs) -> Result<(TrainState, usize, StreamRng)> {
    let state = read_checkpoint(&common.checkpoint)?;
    let episodes = common.episodes.unwrap_or(state.config.eval_episodes);
    if episodes == 0 {
        return Err(CliError::Usage("--episodes must be positive".into()));
    }
    let rng = StreamRng::new(common.seed.unwrap_or(state.config.seed), "eval");
    Ok((state, episodes, rng))
}

fn emit(lines: &[String], output: Option<&PathBuf>) -> Result<()> {
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    print!("{text}");
    if let Some(path) = output {
        write_text(path, &text)?;
    }
    Ok(())
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    let (state, episodes, mut rng) = load(&args.common)?;
    let report = evaluate(&state, &state.spec, args.xi, episodes, &mut rng)?;
    let record = EvalRecord::new(&state.config.variant.to_string(), state.config.seed, &report);
    emit(&[json(&record)], args.common.output.as_ref())
}

pub fn sweep(args: &SweepArgs) -> Result<()> {
    let xis: Vec<f64> = args
        .xis
        .split(',')
        .map(|x| x.trim().parse().map_err(|_| CliError::Usage(format!("bad condition {x:?}"))))
        .collect::<Result<_>>()?;
    let (state, episodes, rng) = load(&args.common)?;
    let reports = xi_sweep(&state, &state.spec, &xis, episodes, &rng)?;
    let variant = state.config.variant.to_string();
    let lines: Vec<String> = reports
        .iter()
        .map(|r| json(&EvalRecord::new(&variant, state.config.seed, r)))
        .collect();
    emit(&lines, args.common.output.as_ref())
}

pub fn export_latent(args: &ExportArgs, root: &Path) -> Result<()> {
    let state = read_checkpoint(&args.checkpoint)?;
    let path = args.output.clone().unwrap_or_else(|| root.join("latent.csv"));
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    let mut rng = StreamRng::new(args.seed.unwrap_or(state.config.seed), "eval/latent");
    let dump = export_latent_dump(&state, &state.spec, args.n, &mut rng, &path)?;
    println!(
        "{} rows={} degenerate={}",
        path.display(),
        dump.rows.len(),
        dump.pca.degenerate
    );
    Ok(())
}
