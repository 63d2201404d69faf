use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::{debug, info};
use meshfuse::dataset::{generate, DomainPrototypes, LabelRules};
use meshfuse::narrative::Narrative;
use meshfuse::neural::{forward, ModelWeights, NeuralConfig, NeuralInput};
use meshfuse::sim::{metrics, run, SimConfig};
use meshfuse::{
    evaluate_cmb, AgentProfile, Cmb, CmbKey, FieldEncoder, FieldId, MemoryStore, NewCmb, ProfileCatalog, SvafConfig,
    Thresholds,
};
use serde_json::json;

const LATENCY_BUDGET: Duration = Duration::from_millis(1);

#[derive(Parser, Debug)]
#[command(name = "meshfuse", version, about = "Field-level memory fusion for agent meshes")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Seed for every random choice.
    #[arg(long, global = true, env = "MESHFUSE_SEED", default_value_t = 0)]
    seed: u64,
    /// Field vector width.
    #[arg(long, global = true, default_value_t = 64)]
    dim: usize,
    /// Drift thresholds as `redundant,aligned,guarded`.
    #[arg(long, global = true, value_parser = parse_thresholds)]
    thresholds: Option<Thresholds>,
    /// Profile catalog (JSON); defaults to the built-in one.
    #[arg(long, global = true)]
    profiles: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    format: Format,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Format {
    Text,
    JsonLines,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Evaluate one CMB against a store snapshot and print the audit line.
    Evaluate {
        /// Incoming CMB (JSON).
        #[arg(long)]
        cmb: PathBuf,
        /// Receiver's store: JSON lines of CMBs, parents before children.
        #[arg(long)]
        store: PathBuf,
        /// Evaluation time; defaults to the incoming timestamp.
        #[arg(long)]
        now: Option<i64>,
    },
    /// Run a mesh simulation from a scenario file.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        duration: Option<i64>,
        /// Trace output (JSON lines).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate a labelled training set from narratives.
    Dataset {
        #[arg(long)]
        narratives: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Label rules (JSON); defaults to the built-in table.
        #[arg(long)]
        rules: Option<PathBuf>,
    },
    /// Time the heuristic evaluation loop.
    Bench {
        #[arg(long, default_value_t = 5)]
        anchors: usize,
        #[arg(long, default_value_t = 1000)]
        iters: usize,
    },
    /// Lineage of one block, or of every block in a store snapshot.
    Lineage {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        key: Option<String>,
    },
    /// Neural inference over a batch of inputs (JSON lines).
    Neural {
        #[arg(long)]
        input: PathBuf,
        /// Weight manifest; without it weights are initialized from `--seed`.
        #[arg(long)]
        weights: Option<PathBuf>,
        /// Use the small configuration when initializing weights.
        #[arg(long)]
        tiny: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn parse_thresholds(s: &str) -> Result<Thresholds, String> {
    let xs: Vec<f64> = s
        .split(',')
        .map(|x| x.trim().parse::<f64>().map_err(|e| format!("`{x}`: {e}")))
        .collect::<Result<_, _>>()?;
    let [redundant, aligned, guarded] = xs[..] else {
        return Err("expected three comma-separated values".into());
    };
    let t = Thresholds {
        redundant,
        aligned,
        guarded,
    };
    t.validate().map_err(|e| e.to_string())?;
    Ok(t)
}

/// Exit 2 for bad input, 1 for everything else.
enum Failure {
    Invalid(String),
    Runtime(String),
}

fn invalid(e: impl std::fmt::Display) -> Failure {
    Failure::Invalid(e.to_string())
}

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

type Res<T> = Result<T, Failure>;

fn read(path: &Path) -> Res<String> {
    fs::read_to_string(path).map_err(|e| runtime(format!("{}: {e}", path.display())))
}

fn create(path: &Path) -> Res<BufWriter<fs::File>> {
    fs::File::create(path)
        .map(BufWriter::new)
        .map_err(|e| runtime(format!("{}: {e}", path.display())))
}

struct Ctx {
    seed: u64,
    encoder: FieldEncoder,
    catalog: ProfileCatalog,
    svaf: SvafConfig,
    format: Format,
}

impl Ctx {
    fn new(g: &Global) -> Res<Self> {
        let catalog = match &g.profiles {
            Some(p) => ProfileCatalog::from_json(&read(p)?).map_err(invalid)?,
            None => ProfileCatalog::builtin(),
        };
        if g.dim < meshfuse::encoder::MIN_DIM {
            return Err(invalid(format!("--dim must be at least {}", meshfuse::encoder::MIN_DIM)));
        }
        let mut svaf = SvafConfig::default();
        if let Some(t) = g.thresholds {
            svaf.thresholds = t;
        }
        Ok(Ctx {
            seed: g.seed,
            encoder: FieldEncoder::ngram(g.dim),
            catalog,
            svaf,
            format: g.format,
        })
    }

    fn profile(&self, agent: &str) -> Res<AgentProfile> {
        self.catalog.for_agent(agent).map_err(invalid)
    }
}

/// Reads a snapshot: JSON lines of CMBs owned by one agent.
fn load_store(path: &Path, encoder: &FieldEncoder) -> Res<MemoryStore> {
    let text = read(path)?;
    let mut store: Option<MemoryStore> = None;
    for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let cmb = Cmb::from_json(line, Some(encoder)).map_err(|e| invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
        let s = store.get_or_insert_with(|| MemoryStore::new(cmb.origin().clone()));
        s.append(cmb).map_err(|e| invalid(format!("{}:{}: {e}", path.display(), i + 1)))?;
    }
    store.ok_or_else(|| invalid(format!("{}: empty store snapshot", path.display())))
}

fn evaluate(ctx: &Ctx, cmb: &Path, store: &Path, now: Option<i64>) -> Res<()> {
    let incoming = Cmb::from_json(&read(cmb)?, Some(&ctx.encoder)).map_err(|e| invalid(format!("{}: {e}", cmb.display())))?;
    let store = load_store(store, &ctx.encoder)?;
    let profile = ctx.profile(store.owner().as_str())?;
    let t = now.unwrap_or(incoming.ts());
    debug!("evaluating {} against {} blocks at t={t}", incoming.key(), store.len());
    let out = evaluate_cmb(&store, &profile, &incoming, t, &ctx.svaf).map_err(invalid)?;
    if ctx.format == Format::Text {
        println!("{}", out.decision.name());
    }
    println!("{}", out.audit_line());
    Ok(())
}

fn simulate(ctx: &Ctx, scenario: &Path, duration: Option<i64>, out: Option<&Path>) -> Res<()> {
    let narrative = Narrative::load(scenario).map_err(invalid)?;
    let config = SimConfig::from_narrative(&narrative, &ctx.catalog, ctx.seed, duration).map_err(invalid)?;
    config.validate().map_err(invalid)?;
    info!("simulating {} agents for {}s", config.agents.len(), config.duration);
    let trace = run(config).map_err(runtime)?;
    if let Some(path) = out {
        let mut w = create(path)?;
        trace.write_jsonl(&mut w).and_then(|_| w.flush()).map_err(runtime)?;
    }
    let summary = metrics(&trace);
    println!("{}", serde_json::to_string(&summary).map_err(runtime)?);
    Ok(())
}

fn dataset(ctx: &Ctx, dir: &Path, out: &Path, rules: Option<&Path>) -> Res<()> {
    let narratives = Narrative::load_dir(dir).map_err(invalid)?;
    let rules = match rules {
        Some(p) => serde_json::from_str::<LabelRules>(&read(p)?).map_err(invalid)?,
        None => LabelRules::default(),
    };
    let profiles: Vec<AgentProfile> = ctx.catalog.types().map(|t| ctx.catalog.get(t).unwrap().clone()).collect();
    let prototypes = DomainPrototypes::builtin(&profiles, &ctx.encoder);
    let d = generate(&narratives, &rules, &profiles, &ctx.encoder, &prototypes, ctx.seed).map_err(invalid)?;
    fs::create_dir_all(out).map_err(|e| runtime(format!("{}: {e}", out.display())))?;
    d.write_dir(out).map_err(runtime)?;
    info!("{} samples written to {}", d.samples.len(), out.display());
    println!("{}", serde_json::to_string(&d.stats).map_err(runtime)?);
    Ok(())
}

fn bench(ctx: &Ctx, anchors: usize, iters: usize) -> Res<bool> {
    use rand::{Rng, SeedableRng};
    if anchors == 0 || iters == 0 {
        return Err(invalid("--anchors and --iters must be positive"));
    }
    let words = [
        "debugging", "playlist", "tired", "deadline", "river", "calm", "tests", "sitting", "focus", "budget", "sleep",
        "review", "energy", "music", "stretch", "failing",
    ];
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(ctx.seed);
    let phrase = |rng: &mut rand_chacha::ChaCha8Rng| {
        (0..4).map(|_| words[rng.gen_range(0..words.len())]).collect::<Vec<_>>().join(" ")
    };
    let draft = |rng: &mut rand_chacha::ChaCha8Rng, ts: i64| NewCmb {
        ts,
        confidence: 0.9,
        texts: FieldId::ALL.iter().map(|f| (*f, phrase(rng))).collect(),
        mood_va: Some((rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))),
        parents: vec![],
        method: "observation".into(),
    };
    let profile = ctx.profile("fitness-agent")?;
    let mut store = MemoryStore::new(profile.agent_id.clone());
    for i in 0..anchors {
        let d = draft(&mut rng, i as i64 * 60);
        store.create_cmb(d, &ctx.encoder).map_err(runtime)?;
    }
    let mut sender = MemoryStore::new("coding-agent".into());
    let t_now = anchors as i64 * 60;
    let incoming = sender.create_cmb(draft(&mut rng, t_now), &ctx.encoder).map_err(runtime)?;

    let mut times = Vec::with_capacity(iters);
    for _ in 0..iters {
        let t = Instant::now();
        let out = evaluate_cmb(&store, &profile, &incoming, t_now, &ctx.svaf).map_err(runtime)?;
        times.push(t.elapsed());
        std::hint::black_box(out);
    }
    times.sort();
    let pct = |p: f64| times[((times.len() - 1) as f64 * p).round() as usize].as_secs_f64() * 1e3;
    let mean = times.iter().map(Duration::as_secs_f64).sum::<f64>() / times.len() as f64 * 1e3;
    let median = pct(0.5);
    let pass = median < LATENCY_BUDGET.as_secs_f64() * 1e3;
    match ctx.format {
        Format::JsonLines => println!(
            "{}",
            json!({
                "anchors": anchors, "dim": ctx.encoder.dim(), "iters": iters,
                "median_ms": median, "mean_ms": mean, "p90_ms": pct(0.9), "p99_ms": pct(0.99),
                "budget_ms": 1.0, "pass": pass,
            })
        ),
        Format::Text => {
            println!("anchors {anchors}, dim {}, {iters} iterations", ctx.encoder.dim());
            println!("median {median:.4} ms  mean {mean:.4} ms  p90 {:.4} ms  p99 {:.4} ms", pct(0.9), pct(0.99));
            println!("{} (budget 1 ms)", if pass { "pass" } else { "fail" });
        }
    }
    Ok(pass)
}

fn lineage(ctx: &Ctx, store: &Path, key: Option<&str>) -> Res<()> {
    let store = load_store(store, &ctx.encoder)?;
    let keys: Vec<CmbKey> = match key {
        Some(k) => vec![CmbKey::parse(k).map_err(invalid)?],
        None => store.topological_order().map_err(runtime)?,
    };
    for k in keys {
        let info = store.lineage_query(&k).map_err(invalid)?;
        println!(
            "{}",
            json!({
                "key": k,
                "parents": info.parents,
                "ancestors": info.ancestors,
                "descendants": info.descendants,
                "remix_count": info.remix_count,
                "lineage_depth": info.lineage_depth,
            })
        );
    }
    Ok(())
}

fn neural(ctx: &Ctx, input: &Path, weights: Option<&Path>, tiny: bool, out: Option<&Path>) -> Res<()> {
    let w = match weights {
        Some(p) => ModelWeights::load(p).map_err(invalid)?,
        None => {
            let config = if tiny { NeuralConfig::tiny() } else { NeuralConfig::default() };
            ModelWeights::init(&config, ctx.seed).map_err(invalid)?
        }
    };
    let file = fs::File::open(input).map_err(|e| runtime(format!("{}: {e}", input.display())))?;
    let mut sink: Box<dyn Write> = match out {
        Some(p) => Box::new(create(p)?),
        None => Box::new(std::io::stdout().lock()),
    };
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(runtime)?;
        if line.trim().is_empty() {
            continue;
        }
        let at = |e: &dyn std::fmt::Display| invalid(format!("{}:{}: {e}", input.display(), i + 1));
        let x: NeuralInput = serde_json::from_str(&line).map_err(|e| at(&e))?;
        let y = forward(&w, &x).map_err(|e| at(&e))?;
        writeln!(sink, "{}", serde_json::to_string(&y).map_err(runtime)?).map_err(runtime)?;
    }
    sink.flush().map_err(runtime)
}

fn dispatch(cli: Cli) -> Res<bool> {
    let ctx = Ctx::new(&cli.global)?;
    match &cli.command {
        Command::Evaluate { cmb, store, now } => evaluate(&ctx, cmb, store, *now),
        Command::Simulate {
            scenario,
            duration,
            out,
        } => simulate(&ctx, scenario, *duration, out.as_deref()),
        Command::Dataset { narratives, out, rules } => dataset(&ctx, narratives, out, rules.as_deref()),
        Command::Bench { anchors, iters } => return bench(&ctx, *anchors, *iters),
        Command::Lineage { store, key } => lineage(&ctx, store, key.as_deref()),
        Command::Neural {
            input,
            weights,
            tiny,
            out,
        } => neural(&ctx, input, weights.as_deref(), *tiny, out.as_deref()),
    }?;
    Ok(true)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match cli.global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(Failure::Invalid(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}
