use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use ontorec::binning::{bin_item, BinningConfig, VectorTable};
use ontorec::demographic::write_users_csv;
use ontorec::engine::EngineConfig;
use ontorec::eventlog::{decode_log, restore, state_digest, Snapshot};
use ontorec::metrics::{evaluate, item_features, read_ratings_csv, read_recs_csv, EvalSet, FeatureLevel, UserEval, CSV_HEADER};
use ontorec::ontology::{load_ontology, ItemRecord, OntologyGraph};
use ontorec::simulation::{run_simulation, write_outputs, SimulationPlan};
use ontorec::synthetic::{
    gen_latent_prefs, gen_ratings, gen_users, read_items_jsonl, write_dense_csv, write_prefs_csv, write_ratings_csv,
    GenConfig,
};
use ontorec::{Error, ItemId, UserId};
use ontorec_service::{serve, AppState, ServiceConfig};

#[derive(Debug, Parser)]
#[command(name = "ontorec", version, about = "Phase-evolving tourism recommender")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Seed for every random stream.
    #[arg(long, global = true, default_value_t = 7)]
    seed: u64,
    /// Engine config (JSON); `serve` takes a service config instead.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// List length and metric cutoff.
    #[arg(long, global = true, default_value_t = 5)]
    k: usize,
    /// Single-threaded execution; with the seed this fixes every output byte.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate synthetic users, latent preferences and ratings.
    #[command(after_help = "Examples:\n  \
        ontorec gen-data --users 98 --seed 7 --out data/\n  \
        ontorec gen-data --users 1000 --sparsity 0.03 --out big/\n  \
        ontorec gen-data --users 250 --items my_items.jsonl --out run2/")]
    GenData {
        #[arg(long, default_value_t = 98)]
        users: usize,
        /// Fraction of user-item pairs that get a rating.
        #[arg(long)]
        sparsity: Option<f64>,
        /// Item catalog (JSON lines); defaults to the bundled 29 offers.
        #[arg(long)]
        items: Option<PathBuf>,
    },
    /// Link items to ontology classes from their descriptions and keywords.
    #[command(after_help = "Examples:\n  \
        ontorec bin-items --items fixtures/table4.jsonl\n  \
        ontorec bin-items --items new_offers.jsonl --threshold 0.6 --out report/\n  \
        ontorec bin-items --items offers.jsonl --vectors glove.txt --stopwords stop.txt")]
    BinItems {
        #[arg(long)]
        items: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
        /// Word vectors (`token v1 v2 ...` per line); defaults to the bundled table.
        #[arg(long)]
        vectors: Option<PathBuf>,
        #[arg(long, requires = "vectors")]
        stopwords: Option<PathBuf>,
    },
    /// Replay the growth of the catalog and score every active model at each milestone.
    #[command(after_help = "Examples:\n  \
        ontorec simulate --out results/\n  \
        ontorec simulate --milestones 98:0,98:64,198:191,250:191 --seed 3 --out run/\n  \
        ontorec simulate --config low_thresholds.json --k 10 --out k10/")]
    Simulate {
        /// Comma-separated `users:ratings` checkpoints.
        #[arg(long, value_delimiter = ',', value_parser = parse_milestone)]
        milestones: Vec<(usize, usize)>,
    },
    /// Compute the seven metrics for given rec lists against rated ground truth.
    #[command(after_help = "Examples:\n  \
        ontorec evaluate --recs recs.csv --truth ratings.csv --k 5\n  \
        ontorec evaluate --recs recs.csv --truth ratings.csv --items catalog.jsonl\n  \
        ontorec evaluate --recs recs.csv --truth ratings.csv --threshold 4 --out eval/")]
    Evaluate {
        /// `userid,itemid` rows in rank order.
        #[arg(long)]
        recs: PathBuf,
        /// `userid,itemid,rating` rows.
        #[arg(long)]
        truth: PathBuf,
        /// Ratings at or above this count as relevant.
        #[arg(long, default_value_t = ontorec::metrics::RELEVANCE_THRESHOLD)]
        threshold: f64,
        #[arg(long)]
        items: Option<PathBuf>,
    },
    /// Start the HTTP service.
    #[command(after_help = "Examples:\n  \
        ontorec serve --log events.log\n  \
        ontorec serve --config service.json --addr 0.0.0.0:8080\n  \
        ONTOREC_API_KEY=secret ontorec serve --log events.log --snapshot state.snap")]
    Serve {
        #[arg(long)]
        addr: Option<String>,
        #[arg(long)]
        log: Option<PathBuf>,
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
    /// Rebuild engine state from an event log and optional snapshot.
    #[command(after_help = "Examples:\n  \
        ontorec replay --log events.log\n  \
        ontorec replay --log events.log --snapshot state.snap\n  \
        ontorec replay --log events.log --write-snapshot fresh.snap")]
    Replay {
        #[arg(long)]
        log: PathBuf,
        #[arg(long)]
        snapshot: Option<PathBuf>,
        #[arg(long)]
        write_snapshot: Option<PathBuf>,
    },
}

fn parse_milestone(m: &str) -> Result<(usize, usize), String> {
    let (u, r) = m.split_once(':').ok_or_else(|| format!("`{m}` is not users:ratings"))?;
    Ok((
        u.trim().parse().map_err(|_| format!("bad user count `{u}`"))?,
        r.trim().parse().map_err(|_| format!("bad rating count `{r}`"))?,
    ))
}

/// A failure with the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_INVARIANT: u8 = 3;

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::SequenceGap { .. } | Error::Integrity(_) | Error::NonFiniteLoss { .. } => EXIT_INVARIANT,
            _ => EXIT_DATA,
        };
        Failure { code, message: e.to_string() }
    }
}

fn data_err(path: &Path, e: impl std::fmt::Display) -> Failure {
    Failure { code: EXIT_DATA, message: format!("{}: {e}", path.display()) }
}

fn usage(message: impl Into<String>) -> Failure {
    Failure { code: EXIT_USAGE, message: message.into() }
}

fn read(path: &Path) -> Result<String, Failure> {
    fs::read_to_string(path).map_err(|e| data_err(path, e))
}

fn engine_config(common: &Common) -> Result<EngineConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => EngineConfig::from_json(&read(p)?).map_err(|e| data_err(p, e))?,
        None => EngineConfig::default(),
    };
    cfg.seed = common.seed;
    Ok(cfg)
}

fn out_dir(common: &Common) -> Result<PathBuf, Failure> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&dir).map_err(|e| data_err(&dir, e))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<File>, Failure> {
    File::create(path).map(BufWriter::new).map_err(|e| data_err(path, e))
}

/// The bundled ontology with its item lines replaced by `items`.
fn graph_with_items(items: Vec<ItemRecord>) -> Result<OntologyGraph, Error> {
    let classes: String = OntologyGraph::fixture_document()
        .lines()
        .filter(|l| !l.starts_with("I\t"))
        .map(|l| format!("{l}\n"))
        .collect();
    let mut g = load_ontology(&classes)?;
    for item in items {
        g.add_item(item)?;
    }
    Ok(g)
}

fn load_graph(items: Option<&Path>) -> Result<OntologyGraph, Failure> {
    match items {
        Some(p) => {
            let parsed = read_items_jsonl(&read(p)?).map_err(|e| data_err(p, e))?;
            graph_with_items(parsed).map_err(|e| data_err(p, e))
        }
        None => Ok(OntologyGraph::fixture()),
    }
}

fn gen_data(common: &Common, users: usize, sparsity: Option<f64>, items: Option<&Path>) -> Result<(), Failure> {
    let graph = load_graph(items)?;
    let mut cfg = GenConfig { n_users: users, seed: common.seed, ..Default::default() };
    if let Some(s) = sparsity {
        cfg.sparsity = s;
    }
    let people = gen_users(&cfg)?;
    let prefs = gen_latent_prefs(&people, &cfg)?;
    let ratings = gen_ratings(&prefs, &graph, &cfg)?;
    let dir = out_dir(common)?;
    let ids: Vec<UserId> = people.iter().map(|u| u.id).collect();
    let files = [
        ("users.csv", write_users_csv(&people, create(&dir.join("users.csv"))?)),
        ("preferences.csv", write_prefs_csv(&prefs, create(&dir.join("preferences.csv"))?)),
        ("ratings.csv", write_ratings_csv(&ratings, create(&dir.join("ratings.csv"))?)),
        ("ratings_dense.csv", write_dense_csv(&ids, &graph.item_ids(), &ratings, create(&dir.join("ratings_dense.csv"))?)),
    ];
    for (name, res) in files {
        res.map_err(|e| data_err(&dir.join(name), e))?;
        println!("wrote {}", dir.join(name).display());
    }
    println!("{} users, {} items, {} ratings", people.len(), graph.items().len(), ratings.len());
    Ok(())
}

fn bin_items(
    common: &Common,
    items: &Path,
    threshold: Option<f64>,
    vectors: Option<&Path>,
    stopwords: Option<&Path>,
) -> Result<(), Failure> {
    let records = read_items_jsonl(&read(items)?).map_err(|e| data_err(items, e))?;
    let table = match vectors {
        Some(p) => {
            let t = VectorTable::parse(&read(p)?).map_err(|e| data_err(p, e))?;
            match stopwords {
                Some(s) => t.with_stopwords(&read(s)?),
                None => t,
            }
        }
        None => VectorTable::bundled(),
    };
    let cfg = match threshold {
        Some(t) => BinningConfig::new(t).map_err(|e| usage(e.to_string()))?,
        None => BinningConfig::default(),
    };
    let classes = graph_with_items(Vec::new())?;
    let mut report = Vec::new();
    let mut linked = 0;
    for item in &records {
        let binned = bin_item(item, &classes, &table, &cfg).map_err(|e| data_err(items, e))?;
        let mut by_category = Vec::new();
        for c in item.categories.iter().flatten() {
            by_category.extend(classes.resolve_category(c).map_err(|e| data_err(items, e))?);
        }
        if !binned.links.is_empty() || !by_category.is_empty() {
            linked += 1;
        }
        report.push(json!({
            "id": item.id,
            "links": binned.links,
            "category_links": by_category,
            "diagnostic": binned.diagnostic,
        }));
    }
    let path = out_dir(common)?.join("links.jsonl");
    let mut w = create(&path)?;
    for r in &report {
        writeln!(w, "{r}").map_err(|e| data_err(&path, e))?;
    }
    w.flush().map_err(|e| data_err(&path, e))?;
    println!("{} items, {linked} linked to at least one low-level class", records.len());
    println!("wrote {}", path.display());
    Ok(())
}

fn simulate(common: &Common, milestones: Vec<(usize, usize)>) -> Result<(), Failure> {
    let mut plan = SimulationPlan { seed: common.seed, k: common.k, ..Default::default() };
    if !milestones.is_empty() {
        plan.milestones = milestones;
    }
    let graph = OntologyGraph::fixture();
    plan.validate(graph.items().len()).map_err(|e| usage(e.to_string()))?;
    let results = run_simulation(&plan, &graph, &engine_config(common)?)?;
    let dir = out_dir(common)?;
    for r in &results {
        let models: Vec<&str> = r.models.iter().map(|m| m.model.label()).collect();
        println!(
            "{} users, {} ratings: phase {} (density {:.4}), models {}",
            r.users,
            r.ratings,
            r.phase,
            r.density,
            models.join(", ")
        );
    }
    for p in write_outputs(&results, &dir)? {
        println!("wrote {}", p.display());
    }
    Ok(())
}

fn run_evaluate(common: &Common, recs: &Path, truth: &Path, threshold: f64, items: Option<&Path>) -> Result<(), Failure> {
    let lists = read_recs_csv(File::open(recs).map_err(|e| data_err(recs, e))?).map_err(|e| data_err(recs, e))?;
    let ratings =
        read_ratings_csv(File::open(truth).map_err(|e| data_err(truth, e))?).map_err(|e| data_err(truth, e))?;
    let graph = load_graph(items)?;
    let mut relevant: BTreeMap<UserId, BTreeSet<ItemId>> = BTreeMap::new();
    let mut consumers: BTreeMap<ItemId, BTreeSet<UserId>> = BTreeMap::new();
    for &(u, i, r) in &ratings {
        consumers.entry(i).or_default().insert(u);
        if r >= threshold {
            relevant.entry(u).or_default().insert(i);
        }
    }
    let population = lists.keys().chain(ratings.iter().map(|r| &r.0)).collect::<BTreeSet<_>>().len();
    let set = EvalSet {
        users: lists
            .into_iter()
            .map(|(user, recs)| UserEval { user, recs, relevant: relevant.remove(&user).unwrap_or_default() })
            .collect(),
        train_items: graph.item_ids().into_iter().collect(),
        counts: consumers.into_iter().map(|(i, s)| (i, s.len())).collect(),
        population: Some(population),
    };
    let report = evaluate(
        &set,
        common.k,
        &item_features(&graph, FeatureLevel::Hl),
        &item_features(&graph, FeatureLevel::Ll),
    )?;
    let header = CSV_HEADER.join(",").replace("@K", &format!("@{}", common.k));
    println!("{header}");
    println!("{}", report.csv_row());
    if report.users_without_relevant > 0 {
        eprintln!("note: {} users have no relevant item", report.users_without_relevant);
    }
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir).map_err(|e| data_err(dir, e))?;
        let path = dir.join("evaluation.csv");
        fs::write(&path, format!("{header}\n{}\n", report.csv_row())).map_err(|e| data_err(&path, e))?;
    }
    Ok(())
}

fn run_serve(common: &Common, addr: Option<String>, log: Option<PathBuf>, snapshot: Option<PathBuf>) -> Result<(), Failure> {
    let mut cfg = match &common.config {
        Some(p) => ServiceConfig::from_json(&read(p)?).map_err(|e| data_err(p, e))?,
        None => ServiceConfig::default(),
    };
    cfg = cfg.with_env()?;
    if let Some(a) = addr {
        cfg.addr = a.parse().map_err(|_| usage(format!("--addr `{a}` is not host:port")))?;
    }
    cfg.log_path = log.or(cfg.log_path);
    cfg.snapshot_path = snapshot.or(cfg.snapshot_path);
    cfg.engine.seed = common.seed;
    let addr = cfg.addr;
    let state = AppState::open(OntologyGraph::fixture(), cfg)?;
    let mut rt = if common.deterministic {
        tokio::runtime::Builder::new_current_thread()
    } else {
        tokio::runtime::Builder::new_multi_thread()
    };
    let rt = rt.enable_all().build().map_err(|e| Failure { code: EXIT_DATA, message: e.to_string() })?;
    eprintln!("listening on http://{addr}");
    rt.block_on(serve(state)).map_err(|e| Failure { code: EXIT_DATA, message: format!("{addr}: {e}") })
}

fn replay(common: &Common, log: &Path, snapshot: Option<&Path>, write_snapshot: Option<&Path>) -> Result<(), Failure> {
    let snap = snapshot.map(|p| Snapshot::read(p).map_err(|e| Failure::from(e).at(p))).transpose()?;
    let records = decode_log(&read(log)?).map_err(|e| Failure::from(e).at(log))?;
    let engine = restore(OntologyGraph::fixture(), engine_config(common)?, snap, &records)?;
    let s = engine.state();
    println!(
        "{}",
        json!({
            "records": records.len(),
            "events_applied": s.events_applied,
            "users": s.users.len(),
            "ratings": s.rating_count,
            "items": s.graph.items().len(),
            "phase": s.phase,
            "state_sha256": state_digest(s)?,
        })
    );
    if let Some(p) = write_snapshot {
        let hw = records.last().map_or(0, |r| r.seq);
        Snapshot::capture(&engine, hw)?.write(p).map_err(|e| Failure::from(e).at(p))?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

impl Failure {
    fn at(mut self, path: &Path) -> Self {
        self.message = format!("{}: {}", path.display(), self.message);
        self
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let c = &cli.common;
    if c.k == 0 {
        return Err(usage("--k must be at least 1"));
    }
    match cli.command {
        Command::GenData { users, sparsity, items } => gen_data(c, users, sparsity, items.as_deref()),
        Command::BinItems { items, threshold, vectors, stopwords } => {
            bin_items(c, &items, threshold, vectors.as_deref(), stopwords.as_deref())
        }
        Command::Simulate { milestones } => simulate(c, milestones),
        Command::Evaluate { recs, truth, threshold, items } => run_evaluate(c, &recs, &truth, threshold, items.as_deref()),
        Command::Serve { addr, log, snapshot } => run_serve(c, addr, log, snapshot),
        Command::Replay { log, snapshot, write_snapshot } => {
            replay(c, &log, snapshot.as_deref(), write_snapshot.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_USAGE) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
