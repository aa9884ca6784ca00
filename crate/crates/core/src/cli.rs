//! Command-line front end: `synth`, `split`, `train`, `recommend`,
//! `evaluate` and `pipeline`.
//!
//! Settings come from three layers, later ones winning: built-in defaults,
//! an optional `key = value` file (`--config`), then command-line flags.
//! Every key can be given as a long flag of the same name, for example
//! `--cf.lambda 0.1`, or through `--set key=value`.
//!
//! Output layout under `--out`:
//!
//! ```text
//! data/            reservations.csv, hotels.csv, truth.json (synth)
//! scenario-<id>/   train.csv, test.csv, stats.json, rejects.csv (split)
//! scenario-<id>/model/
//!                  scaling.csv, pca.csv, kmeans.csv, kmeans_assignment.csv,
//!                  cf_model.bin, loss_trace.csv (train)
//! scenario-<id>/   recommendations.csv, recommend_errors.csv (recommend)
//! report.csv, report.md (evaluate)
//! ```
//!
//! Seeds: the synthetic corpus uses the root `seed` directly. k-means and
//! ALS for scenario `s` use `derive_seed(derive_seed(seed, stream), s)`
//! with the stream ids in [`crate::synth::stream`].

use std::collections::{BTreeMap, HashSet};
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;

use crate::catalog::{
    clean_hotels, parse_hotels, parse_reservations, write_rejects, write_reservations, Bound, FeatureCatalog,
    FeatureKind, HotelFeatureVector, ReservationRecord, ScaleParams,
};
use crate::cf_engine::{read_model, write_loss_trace, write_model, AlsConfig};
use crate::content_engine::{ClusterModel, PcaModel};
use crate::engines::{CfModel, ContentConfig, ContentMode, ContentModel, Engine, EngineConfig, TrainedEngines};
use crate::error::{Error, Result};
use crate::eval::{emit_report, evaluate_scenario, EvalReport};
use crate::linalg::Matrix;
use crate::ranking::Source;
use crate::scenario::{materialize_scenario, ScenarioSpec, SplitDataset};
use crate::synth::{derive_seed, generate, stream, SynthSpec};

type F = f64;

/// Every recognized key and its default. `bound.<feature>` keys are also
/// accepted and add a plausibility bound such as `>0` to that feature.
const DEFAULTS: &[(&str, &str)] = &[
    ("seed", "42"),
    ("out", "out"),
    ("data", ""),
    ("scenario", ""),
    ("engine", ""),
    ("n", "5,10,100"),
    ("synth.users", "1000"),
    ("synth.hotels", "300"),
    ("synth.feature_dim", "24"),
    ("synth.latent_rank", "8"),
    ("synth.min_res", "2"),
    ("synth.max_res", "10"),
    ("synth.clusters", "8"),
    ("content.pca_dims", "11"),
    ("content.kmeans_k", "50"),
    ("content.kmeans_max_iter", "100"),
    ("content.mode", "full"),
    ("cf.latent_dim", "20"),
    ("cf.lambda", "0.1"),
    ("cf.sweeps", "15"),
    ("cf.tol", "0.0001"),
    ("hybrid.first", "content"),
    ("hybrid.odd_slot", "content"),
];

#[derive(Debug, Parser)]
#[command(name = "hotelrec", version, about = "Hybrid hotel recommender and offline evaluation harness")]
pub struct Cli {
    #[command(flatten)]
    pub settings: Settings,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic corpus into <out>/data.
    Synth {
        #[arg(long)]
        users: Option<String>,
        #[arg(long)]
        hotels: Option<String>,
        #[arg(long = "feature-dim")]
        feature_dim: Option<String>,
        #[arg(long = "latent-rank")]
        latent_rank: Option<String>,
        #[arg(long = "min-res")]
        min_res: Option<String>,
        #[arg(long = "max-res")]
        max_res: Option<String>,
        #[arg(long)]
        clusters: Option<String>,
    },
    /// Materialize train/test splits for the selected scenarios.
    Split,
    /// Fit the content and CF models on each selected split.
    Train,
    /// Write top-N lists for the given users (or --all) of one scenario.
    Recommend {
        /// Recommend for every training user of the scenario.
        #[arg(long, conflicts_with = "users")]
        all: bool,
        users: Vec<String>,
    },
    /// Score every engine on every selected scenario.
    Evaluate,
    /// synth, split, train, recommend --all and evaluate in one run.
    Pipeline,
}

/// Configuration overrides shared by every command.
#[derive(Debug, Default, Args)]
pub struct Settings {
    /// key = value file; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Extra `key=value` override; may be repeated.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[arg(long, global = true)]
    pub seed: Option<String>,
    #[arg(long, global = true)]
    pub out: Option<String>,
    /// Directory holding reservations.csv and hotels.csv (default <out>/data).
    #[arg(long, global = true)]
    pub data: Option<String>,
    /// Scenario id 1..5 (default: all five; recommend defaults to 1).
    #[arg(long, global = true)]
    pub scenario: Option<String>,
    /// content-full, content-cluster, cf, hybrid, hybrid-full, hybrid-cluster or all.
    #[arg(long, global = true)]
    pub engine: Option<String>,
    /// Comma-separated list lengths.
    #[arg(long, global = true)]
    pub n: Option<String>,
    #[arg(long = "content.pca_dims", global = true)]
    pub content_pca_dims: Option<String>,
    #[arg(long = "content.kmeans_k", global = true)]
    pub content_kmeans_k: Option<String>,
    #[arg(long = "content.kmeans_max_iter", global = true)]
    pub content_kmeans_max_iter: Option<String>,
    /// full or cluster; what the `hybrid` engine alias resolves to.
    #[arg(long = "content.mode", global = true)]
    pub content_mode: Option<String>,
    #[arg(long = "cf.latent_dim", global = true)]
    pub cf_latent_dim: Option<String>,
    #[arg(long = "cf.lambda", global = true)]
    pub cf_lambda: Option<String>,
    #[arg(long = "cf.sweeps", global = true)]
    pub cf_sweeps: Option<String>,
    #[arg(long = "cf.tol", global = true)]
    pub cf_tol: Option<String>,
    #[arg(long = "hybrid.first", global = true)]
    pub hybrid_first: Option<String>,
    #[arg(long = "hybrid.odd_slot", global = true)]
    pub hybrid_odd_slot: Option<String>,
}

impl Settings {
    fn flag_pairs(&self) -> Vec<(&'static str, &Option<String>)> {
        vec![
            ("seed", &self.seed),
            ("out", &self.out),
            ("data", &self.data),
            ("scenario", &self.scenario),
            ("engine", &self.engine),
            ("n", &self.n),
            ("content.pca_dims", &self.content_pca_dims),
            ("content.kmeans_k", &self.content_kmeans_k),
            ("content.kmeans_max_iter", &self.content_kmeans_max_iter),
            ("content.mode", &self.content_mode),
            ("cf.latent_dim", &self.cf_latent_dim),
            ("cf.lambda", &self.cf_lambda),
            ("cf.sweeps", &self.cf_sweeps),
            ("cf.tol", &self.cf_tol),
            ("hybrid.first", &self.hybrid_first),
            ("hybrid.odd_slot", &self.hybrid_odd_slot),
        ]
    }
}

fn known_key(key: &str) -> bool {
    DEFAULTS.iter().any(|(k, _)| *k == key) || key.strip_prefix("bound.").is_some_and(|f| !f.is_empty())
}

/// Parses `key = value` lines. Blank lines and lines starting with `#`
/// are ignored.
pub fn parse_config_text(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("config line {}: expected key = value", i + 1)))?;
        let key = k.trim();
        if !known_key(key) {
            return Err(Error::invalid(format!("config line {}: unknown key '{key}'", i + 1)));
        }
        out.insert(key.to_string(), v.trim().to_string());
    }
    Ok(out)
}

/// Fully resolved settings.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    /// Explicit input directory; `None` means `<out>/data`.
    pub data: Option<PathBuf>,
    pub scenario: Option<u8>,
    pub engine: Option<String>,
    pub ns: Vec<usize>,
    pub synth: SynthSpec,
    pub content: ContentConfig,
    pub cf: AlsConfig<F>,
    pub hybrid_first: Source,
    pub hybrid_odd_slot: Source,
    pub bounds: Vec<(String, Bound<F>)>,
}

fn parse_value<V: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str) -> Result<V> {
    let raw = map.get(key).map(String::as_str).unwrap_or_default();
    raw.parse()
        .map_err(|_| Error::invalid(format!("invalid value '{raw}' for {key}")))
}

impl RunConfig {
    /// Resolves defaults, then `file`, then `overrides`.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut map: BTreeMap<String, String> =
            DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        if let Some(path) = file {
            let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            map.extend(parse_config_text(&text)?);
        }
        for (k, v) in overrides {
            if !known_key(k) {
                return Err(Error::invalid(format!("unknown setting '{k}'")));
            }
            map.insert(k.clone(), v.clone());
        }
        Self::from_map(&map)
    }

    fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let seed: u64 = parse_value(map, "seed")?;
        let text = |k: &str| map.get(k).cloned().unwrap_or_default();
        let out = PathBuf::from(text("out"));
        if out.as_os_str().is_empty() {
            return Err(Error::invalid("out must not be empty"));
        }
        let data = Some(text("data")).filter(|d| !d.is_empty()).map(PathBuf::from);
        let scenario = match text("scenario").as_str() {
            "" => None,
            s => {
                let id: u8 = s
                    .parse()
                    .map_err(|_| Error::invalid(format!("invalid scenario '{s}'")))?;
                ScenarioSpec::standard(id)?;
                Some(id)
            }
        };
        let engine = Some(text("engine")).filter(|e| !e.is_empty());
        let ns = parse_ns(&text("n"))?;
        let synth = SynthSpec {
            users: parse_value(map, "synth.users")?,
            hotels: parse_value(map, "synth.hotels")?,
            feature_dim: parse_value(map, "synth.feature_dim")?,
            latent_rank: parse_value(map, "synth.latent_rank")?,
            reservations_per_user: (parse_value(map, "synth.min_res")?, parse_value(map, "synth.max_res")?),
            cluster_count: parse_value(map, "synth.clusters")?,
            seed,
        };
        let content = ContentConfig {
            pca_dims: parse_value(map, "content.pca_dims")?,
            kmeans_k: parse_value(map, "content.kmeans_k")?,
            kmeans_max_iter: parse_value(map, "content.kmeans_max_iter")?,
            mode: parse_value(map, "content.mode")?,
            seed: derive_seed(seed, stream::KMEANS),
        };
        if content.pca_dims == 0 || content.kmeans_k == 0 || content.kmeans_max_iter == 0 {
            return Err(Error::invalid("content.pca_dims, content.kmeans_k and content.kmeans_max_iter must be positive"));
        }
        let cf = AlsConfig {
            latent_dim: parse_value(map, "cf.latent_dim")?,
            lambda: parse_value(map, "cf.lambda")?,
            sweeps: parse_value(map, "cf.sweeps")?,
            seed: derive_seed(seed, stream::ALS),
            tol: parse_value(map, "cf.tol")?,
        };
        cf.validate()?;
        let bounds = map
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("bound.").map(|f| (f, v)))
            .flat_map(|(f, v)| v.split(',').map(move |b| (f, b.trim())))
            .map(|(f, b)| Ok((f.to_string(), Bound::parse(b)?)))
            .collect::<Result<_>>()?;
        Ok(RunConfig {
            seed,
            out,
            data,
            scenario,
            engine,
            ns,
            synth,
            content,
            cf,
            hybrid_first: parse_value(map, "hybrid.first")?,
            hybrid_odd_slot: parse_value(map, "hybrid.odd_slot")?,
            bounds,
        })
    }

    fn data_dir(&self) -> PathBuf {
        self.data.clone().unwrap_or_else(|| self.out.join("data"))
    }

    fn scenario_dir(&self, id: u8) -> PathBuf {
        self.out.join(format!("scenario-{id}"))
    }

    fn model_dir(&self, id: u8) -> PathBuf {
        self.scenario_dir(id).join("model")
    }

    /// Selected scenario, or all five in dependency order.
    fn scenarios(&self) -> Vec<u8> {
        self.scenario.map_or_else(|| (1..=5).collect(), |s| vec![s])
    }

    fn engine_config(&self, scenario: u8) -> EngineConfig<F> {
        EngineConfig {
            content: ContentConfig {
                seed: derive_seed(self.content.seed, u64::from(scenario)),
                ..self.content.clone()
            },
            cf: AlsConfig {
                seed: derive_seed(self.cf.seed, u64::from(scenario)),
                ..self.cf
            },
            hybrid_first: self.hybrid_first,
            hybrid_odd_slot: self.hybrid_odd_slot,
        }
    }

    /// Engines named by `engine` (default: all five). `hybrid` follows
    /// `content.mode`.
    fn engines(&self) -> Result<Vec<Engine>> {
        match self.engine.as_deref() {
            None | Some("all") => Ok(Engine::ALL.to_vec()),
            Some("hybrid") => Ok(vec![match self.content.mode {
                ContentMode::Full => Engine::HybridFull,
                ContentMode::Cluster => Engine::HybridClustered,
            }]),
            Some(list) => list.split(',').map(|e| e.trim().parse()).collect(),
        }
    }
}

fn parse_ns(s: &str) -> Result<Vec<usize>> {
    let mut ns = s
        .split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .ok()
                .filter(|&n| n > 0)
                .ok_or_else(|| Error::invalid(format!("invalid list length '{}' in --n", p.trim())))
        })
        .collect::<Result<Vec<_>>>()?;
    ns.sort_unstable();
    ns.dedup();
    Ok(ns)
}

/// Entry point used by the binary; returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let mut overrides: Vec<(String, String)> = cli
        .settings
        .flag_pairs()
        .into_iter()
        .filter_map(|(k, v)| v.as_ref().map(|v| (k.to_string(), v.clone())))
        .collect();
    if let Command::Synth {
        users,
        hotels,
        feature_dim,
        latent_rank,
        min_res,
        max_res,
        clusters,
    } = &cli.command
    {
        for (k, v) in [
            ("synth.users", users),
            ("synth.hotels", hotels),
            ("synth.feature_dim", feature_dim),
            ("synth.latent_rank", latent_rank),
            ("synth.min_res", min_res),
            ("synth.max_res", max_res),
            ("synth.clusters", clusters),
        ] {
            if let Some(v) = v {
                overrides.push((k.to_string(), v.clone()));
            }
        }
    }
    for kv in &cli.settings.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("--set expects key=value, got '{kv}'")))?;
        overrides.push((k.trim().to_string(), v.trim().to_string()));
    }
    let config = RunConfig::resolve(cli.settings.config.as_deref(), &overrides)?;
    match cli.command {
        Command::Synth { .. } => cmd_synth(&config),
        Command::Split => cmd_split(&config),
        Command::Train => cmd_train(&config),
        Command::Recommend { all, users } => cmd_recommend(&config, all, &users),
        Command::Evaluate => cmd_evaluate(&config),
        Command::Pipeline => cmd_pipeline(&config),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    File::open(path).map(BufReader::new).map_err(|e| Error::io(path, e))
}

fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<File>>> {
    Ok(csv::Writer::from_writer(create(path)?))
}

fn csv_reader(path: &Path) -> Result<csv::Reader<BufReader<File>>> {
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open(path)?))
}

fn finish<W: Write>(w: csv::Writer<W>, path: &Path) -> Result<()> {
    w.into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?
        .flush()
        .map_err(|e| Error::io(path, e))
}

fn num(field: &str, what: &str, path: &Path) -> Result<F> {
    field
        .parse()
        .map_err(|_| Error::data(format!("{}: invalid {what} '{field}'", path.display())))
}

pub fn cmd_synth(config: &RunConfig) -> Result<()> {
    let corpus = generate(&config.synth)?;
    let dir = config.out.join("data");
    corpus.write_to(&dir)?;
    eprintln!(
        "synth: {} reservations, {} hotels -> {}",
        corpus.reservations.len(),
        corpus.hotels.len(),
        dir.display()
    );
    Ok(())
}

/// Reads a split file; any malformed row is fatal.
fn read_split_file(path: &Path) -> Result<Vec<ReservationRecord>> {
    let parsed = parse_reservations(open(path)?)?;
    if let Some(r) = parsed.rejects.first() {
        return Err(Error::data(format!("{}: line {}: {}", path.display(), r.line, r.reason)));
    }
    Ok(parsed.records)
}

fn load_split(config: &RunConfig, id: u8) -> Result<SplitDataset> {
    let dir = config.scenario_dir(id);
    let train = read_split_file(&dir.join("train.csv"))?;
    let test = read_split_file(&dir.join("test.csv"))?;
    Ok(SplitDataset::new(id, train, test))
}

pub fn cmd_split(config: &RunConfig) -> Result<()> {
    let path = config.data_dir().join("reservations.csv");
    let parsed = parse_reservations(open(&path)?)?;
    if !parsed.rejects.is_empty() {
        eprintln!("warning: {} malformed rows skipped in {}", parsed.rejects.len(), path.display());
    }
    let mut done: BTreeMap<u8, SplitDataset> = BTreeMap::new();
    for id in config.scenarios() {
        let spec = ScenarioSpec::standard(id)?;
        let prior = match spec.test_rule {
            crate::scenario::TestRule::LastPerUser => None,
            crate::scenario::TestRule::BorrowTestFrom(src) => Some(match done.remove(&src) {
                Some(d) => d,
                None => load_split(config, src).map_err(|e| {
                    Error::data(format!("scenario {id} needs scenario {src} to be split first: {e}"))
                })?,
            }),
        };
        let split = materialize_scenario(&spec, &parsed.records, prior.as_ref())?;
        if let Some(p) = prior {
            done.insert(p.scenario_id, p);
        }
        let dir = config.scenario_dir(id);
        write_reservations(create(&dir.join("train.csv"))?, &split.train)?;
        write_reservations(create(&dir.join("test.csv"))?, &split.test)?;
        write_rejects(create(&dir.join("rejects.csv"))?, &parsed.rejects)?;
        let mut stats = serde_json::to_string_pretty(&split.stats)?;
        stats.push('\n');
        fs::write(dir.join("stats.json"), stats).map_err(|e| Error::io(dir.join("stats.json"), e))?;
        eprintln!(
            "split: scenario {id}: {} train records, {} users, {} test records",
            split.stats.train_records, split.stats.train_users, split.stats.test_records
        );
        done.insert(id, split);
    }
    Ok(())
}

/// Parsed, cleaned hotels and the raw catalog they are laid out in.
fn load_hotels(config: &RunConfig) -> Result<(FeatureCatalog<F>, Vec<HotelFeatureVector<F>>)> {
    let path = config.data_dir().join("hotels.csv");
    let table = parse_hotels::<F, _>(open(&path)?)?;
    let mut catalog = FeatureCatalog::infer(table.feature_names, &table.hotels)?;
    for (feature, bound) in &config.bounds {
        catalog = catalog.with_bound(feature, *bound)?;
    }
    let cleaned = clean_hotels(&table.hotels, &catalog)?;
    if cleaned.len() < table.hotels.len() {
        eprintln!("warning: {} hotels dropped by plausibility bounds", table.hotels.len() - cleaned.len());
    }
    Ok((catalog, cleaned))
}

fn write_content_model(dir: &Path, model: &ContentModel<F>) -> Result<()> {
    let params = model.catalog.scale_params().expect("fitted catalog");
    let path = dir.join("scaling.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["feature", "kind", "mean", "stddev"])?;
    for ((name, kind), p) in model.catalog.names().iter().zip(model.catalog.kinds()).zip(params) {
        w.write_record([name.clone(), kind.to_string(), p.mean.to_string(), p.stddev.to_string()])?;
    }
    finish(w, &path)?;

    let pca = &model.pca;
    let path = dir.join("pca.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(
        ["row", "explained_variance"]
            .into_iter()
            .map(str::to_string)
            .chain(model.catalog.names().iter().cloned()),
    )?;
    w.write_record(
        ["mean".to_string(), String::new()]
            .into_iter()
            .chain(pca.input_mean.iter().map(F::to_string)),
    )?;
    for c in 0..pca.out_dim() {
        w.write_record(
            [format!("pc{}", c + 1), pca.explained_variance[c].to_string()]
                .into_iter()
                .chain(pca.components.column(c).iter().map(F::to_string)),
        )?;
    }
    finish(w, &path)?;

    let clusters = &model.clusters;
    let path = dir.join("kmeans.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(std::iter::once("cluster".to_string()).chain((1..=pca.out_dim()).map(|c| format!("pc{c}"))))?;
    for (c, centroid) in clusters.centroids.iter().enumerate() {
        w.write_record(std::iter::once(c.to_string()).chain(centroid.iter().map(F::to_string)))?;
    }
    finish(w, &path)?;

    let path = dir.join("kmeans_assignment.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["hotel_code", "cluster"])?;
    for (code, c) in model.hotel_codes().zip(&clusters.assignment) {
        w.write_record([code.to_string(), c.to_string()])?;
    }
    finish(w, &path)
}

fn read_content_model(
    dir: &Path,
    raw_catalog: &FeatureCatalog<F>,
    hotels: &[HotelFeatureVector<F>],
) -> Result<ContentModel<F>> {
    let path = dir.join("scaling.csv");
    let (mut names, mut kinds, mut params) = (Vec::new(), Vec::new(), Vec::new());
    for row in csv_reader(&path)?.records() {
        let row = row?;
        if row.len() != 4 {
            return Err(Error::data(format!("{}: expected 4 columns", path.display())));
        }
        names.push(row[0].to_string());
        kinds.push(row[1].parse::<FeatureKind>()?);
        params.push(ScaleParams {
            mean: num(&row[2], "mean", &path)?,
            stddev: num(&row[3], "stddev", &path)?,
        });
    }
    let catalog = FeatureCatalog::from_fitted(names, kinds, params)?;

    let path = dir.join("pca.csv");
    let mut reader = csv_reader(&path)?;
    let header = reader.headers()?.clone();
    if header.len() != catalog.len() + 2 || header.iter().skip(2).ne(catalog.names().iter().map(String::as_str)) {
        return Err(Error::data(format!("{}: columns do not match scaling.csv", path.display())));
    }
    let mut rows = reader.records();
    let mean_row = rows
        .next()
        .ok_or_else(|| Error::data(format!("{}: missing mean row", path.display())))??;
    let input_mean = mean_row.iter().skip(2).map(|x| num(x, "mean", &path)).collect::<Result<Vec<_>>>()?;
    let mut variances = Vec::new();
    let mut columns: Vec<Vec<F>> = Vec::new();
    for row in rows {
        let row = row?;
        variances.push(num(&row[1], "explained variance", &path)?);
        columns.push(row.iter().skip(2).map(|x| num(x, "loading", &path)).collect::<Result<_>>()?);
    }
    if columns.is_empty() {
        return Err(Error::data(format!("{}: no components", path.display())));
    }
    let out_dim = columns.len();
    let components = Matrix::from_fn(catalog.len(), out_dim, |i, c| columns[c][i]);
    let pca = PcaModel {
        components,
        explained_variance: variances,
        input_mean,
    };

    let path = dir.join("kmeans.csv");
    let mut centroids = Vec::new();
    for row in csv_reader(&path)?.records() {
        let row = row?;
        if row.len() != out_dim + 1 {
            return Err(Error::data(format!("{}: centroid width does not match pca.csv", path.display())));
        }
        centroids.push(row.iter().skip(1).map(|x| num(x, "centroid", &path)).collect::<Result<Vec<_>>>()?);
    }
    let path = dir.join("kmeans_assignment.csv");
    let mut assignment = Vec::new();
    let mut codes = Vec::new();
    for row in csv_reader(&path)?.records() {
        let row = row?;
        codes.push(row[0].to_string());
        assignment.push(
            row[1]
                .parse::<usize>()
                .map_err(|_| Error::data(format!("{}: invalid cluster '{}'", path.display(), &row[1])))?,
        );
    }
    let clusters = ClusterModel::from_parts(centroids, assignment)?;
    let model = ContentModel::restore(catalog, pca, clusters, raw_catalog, hotels)?;
    if model.hotel_codes().ne(codes.iter().map(String::as_str)) {
        return Err(Error::data(format!(
            "{}: hotels differ from the current hotel table",
            path.display()
        )));
    }
    Ok(model)
}

fn train_one(config: &RunConfig, id: u8, raw: &FeatureCatalog<F>, hotels: &[HotelFeatureVector<F>]) -> Result<()> {
    let split = load_split(config, id)?;
    let engines = TrainedEngines::train(&split.train, raw, hotels, &config.engine_config(id))?;
    let dir = config.model_dir(id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    write_content_model(&dir, &engines.content)?;
    let path = dir.join("cf_model.bin");
    let mut w = create(&path)?;
    write_model(&mut w, &engines.cf.factors).map_err(|e| Error::io(&path, e))?;
    write_loss_trace(create(&dir.join("loss_trace.csv"))?, &engines.cf.trace)?;
    let last = engines.cf.trace.last().map_or(F::NAN, |p| p.loss);
    eprintln!(
        "train: scenario {id}: {} hotels, {} users, final loss {last}",
        engines.content.reduced.len(),
        engines.cf.interactions.n_users()
    );
    Ok(())
}

pub fn cmd_train(config: &RunConfig) -> Result<()> {
    let (raw, hotels) = load_hotels(config)?;
    for id in config.scenarios() {
        train_one(config, id, &raw, &hotels)?;
    }
    Ok(())
}

fn load_engines(
    config: &RunConfig,
    split: &SplitDataset,
    raw: &FeatureCatalog<F>,
    hotels: &[HotelFeatureVector<F>],
) -> Result<TrainedEngines<F>> {
    let dir = config.model_dir(split.scenario_id);
    let content = read_content_model(&dir, raw, hotels)?;
    let factors = read_model(open(&dir.join("cf_model.bin"))?)?;
    let universe: Vec<String> = content.hotel_codes().map(str::to_string).collect();
    let cf = CfModel::restore(&split.train, &universe, factors)?;
    Ok(TrainedEngines::assemble(
        content,
        cf,
        &split.train,
        config.hybrid_first,
        config.hybrid_odd_slot,
    ))
}

pub fn cmd_recommend(config: &RunConfig, all: bool, users: &[String]) -> Result<()> {
    if !all && users.is_empty() {
        return Err(Error::invalid("recommend needs user ids or --all"));
    }
    let id = config.scenario.unwrap_or(1);
    let n = *config.ns.last().expect("non-empty list lengths");
    let engine_list = config.engines()?;
    let (raw, hotels) = load_hotels(config)?;
    let split = load_split(config, id)?;
    let engines = load_engines(config, &split, &raw, &hotels)?;
    let users: Vec<String> = if all { engines.users().to_vec() } else { users.to_vec() };

    let per_user: Vec<Vec<(Engine, Result<crate::ranking::RankedList<F>>)>> = users
        .par_iter()
        .map(|u| engine_list.iter().map(|&e| (e, engines.recommend(u, e, n))).collect())
        .collect();

    let dir = config.scenario_dir(id);
    let path = dir.join("recommendations.csv");
    let mut w = csv_writer(&path)?;
    w.write_record(["user_id", "rank", "hotel_code", "score", "source", "engine"])?;
    let err_path = dir.join("recommend_errors.csv");
    let mut errors = Vec::new();
    for (user, lists) in users.iter().zip(per_user) {
        for (engine, list) in lists {
            match list {
                Ok(list) => {
                    for (rank, item) in list.items.iter().enumerate() {
                        w.write_record([
                            user.clone(),
                            (rank + 1).to_string(),
                            item.hotel_code.clone(),
                            item.score.to_string(),
                            item.source.to_string(),
                            engine.to_string(),
                        ])?;
                    }
                }
                Err(e) => errors.push([user.clone(), engine.to_string(), e.to_string()]),
            }
        }
    }
    finish(w, &path)?;
    let mut ew = csv_writer(&err_path)?;
    ew.write_record(["user_id", "engine", "error"])?;
    for e in &errors {
        ew.write_record(e)?;
    }
    finish(ew, &err_path)?;
    if !errors.is_empty() {
        eprintln!(
            "warning: {} user/engine pairs had no recommendations; see {}",
            errors.len(),
            err_path.display()
        );
    }
    eprintln!("recommend: scenario {id}: {} users -> {}", users.len(), path.display());
    Ok(())
}

pub fn cmd_evaluate(config: &RunConfig) -> Result<()> {
    let (raw, hotels) = load_hotels(config)?;
    let selected: HashSet<Engine> = config.engines()?.into_iter().collect();
    let mut reports: Vec<EvalReport> = Vec::new();
    for id in config.scenarios() {
        let split = load_split(config, id)?;
        let engines = load_engines(config, &split, &raw, &hotels)?;
        reports.extend(
            evaluate_scenario(&split, &engines, &config.ns)?
                .into_iter()
                .filter(|r| selected.contains(&r.engine)),
        );
    }
    emit_report(&reports, &config.out)?;
    eprintln!("evaluate: {} report rows -> {}", reports.len() * config.ns.len(), config.out.join("report.csv").display());
    Ok(())
}

pub fn cmd_pipeline(config: &RunConfig) -> Result<()> {
    if config.data.is_none() {
        cmd_synth(config)?;
    }
    let all_scenarios = RunConfig {
        scenario: None,
        ..config.clone()
    };
    cmd_split(&all_scenarios)?;
    cmd_train(&all_scenarios)?;
    cmd_recommend(config, true, &[])?;
    cmd_evaluate(&all_scenarios)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn resolve(pairs: &[(&str, &str)]) -> Result<RunConfig> {
        let o: Vec<(String, String)> = pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        RunConfig::resolve(None, &o)
    }

    #[test]
    fn config_text_parsing() {
        let m = parse_config_text("# comment\n\ncf.lambda = 0.5\nbound.stars = >0\n").unwrap();
        assert_eq!(m["cf.lambda"], "0.5");
        assert_eq!(m["bound.stars"], ">0");
        assert!(parse_config_text("nope = 1").is_err());
        assert!(parse_config_text("cf.lambda").is_err());
    }

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("run.conf");
        fs::write(&file, "cf.lambda = 0.5\ncf.latent_dim = 7\n").unwrap();
        let c = RunConfig::resolve(Some(&file), &[("cf.lambda".into(), "0.25".into())]).unwrap();
        assert_eq!(c.cf.lambda, 0.25);
        assert_eq!(c.cf.latent_dim, 7);
    }

    #[test]
    fn defaults_and_validation() {
        let c = resolve(&[]).unwrap();
        assert_eq!(c.ns, vec![5, 10, 100]);
        assert_eq!(c.cf.latent_dim, 20);
        assert_eq!(c.cf.lambda, 0.1);
        assert_eq!(c.content.pca_dims, 11);
        assert_eq!(c.scenarios(), vec![1, 2, 3, 4, 5]);
        assert_eq!(c.engines().unwrap().len(), 5);
        for bad in [
            ("scenario", "6"),
            ("n", "5,0"),
            ("n", "x"),
            ("cf.lambda", "-1"),
            ("seed", "abc"),
            ("engine", "nope"),
            ("content.mode", "fast"),
        ] {
            let r = resolve(&[bad]).and_then(|c| c.engines().map(|_| ()));
            assert!(matches!(r, Err(Error::InvalidArgument(_))), "{bad:?}");
        }
    }

    #[test]
    fn hybrid_alias_follows_content_mode() {
        let c = resolve(&[("engine", "hybrid"), ("content.mode", "cluster")]).unwrap();
        assert_eq!(c.engines().unwrap(), vec![Engine::HybridClustered]);
        let c = resolve(&[("engine", "hybrid")]).unwrap();
        assert_eq!(c.engines().unwrap(), vec![Engine::HybridFull]);
    }

    #[test]
    fn per_scenario_seeds_differ() {
        let c = resolve(&[]).unwrap();
        assert_ne!(c.engine_config(1).cf.seed, c.engine_config(2).cf.seed);
        assert_ne!(c.engine_config(1).content.seed, c.engine_config(1).cf.seed);
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(main_with_args(["hotelrec", "frobnicate"]), 1);
        assert_eq!(main_with_args(["hotelrec", "--help"]), 0);
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().to_str().unwrap();
        assert_eq!(main_with_args(["hotelrec", "synth", "--users", "0", "--out", out]), 1);
        assert_eq!(main_with_args(["hotelrec", "split", "--out", out]), 2);
    }

    fn small_run(dir: &Path) -> Vec<String> {
        let out = dir.to_str().unwrap().to_string();
        [
            "--out", &out, "--seed", "3", "--set", "synth.users=80", "--set", "synth.hotels=40",
            "--set", "synth.feature_dim=9", "--set", "synth.latent_rank=3", "--set", "synth.clusters=3",
            "--content.kmeans_k", "4", "--content.pca_dims", "5", "--cf.latent_dim", "4", "--n", "5,10",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect()
    }

    fn hotelrec(cmd: &[&str], common: &[String]) -> i32 {
        let args: Vec<String> = std::iter::once("hotelrec".to_string())
            .chain(cmd.iter().map(|s| s.to_string()))
            .chain(common.iter().cloned())
            .collect();
        main_with_args(args)
    }

    #[test]
    fn commands_compose_and_restore_matches_training() {
        let dir = tempfile::tempdir().unwrap();
        let common = small_run(dir.path());
        assert_eq!(hotelrec(&["pipeline"], &common), 0);
        let report = fs::read_to_string(dir.path().join("report.csv")).unwrap();
        assert_eq!(report.lines().count(), 1 + 5 * 5 * 2);
        for id in 1..=5 {
            let m = dir.path().join(format!("scenario-{id}/model"));
            for f in ["scaling.csv", "pca.csv", "kmeans.csv", "cf_model.bin", "loss_trace.csv"] {
                assert!(m.join(f).exists(), "scenario {id} {f}");
            }
        }

        // Restored engines rank exactly like freshly trained ones.
        let args: Vec<(String, String)> = common
            .chunks(2)
            .filter(|p| p[0] != "--set")
            .map(|p| (p[0].trim_start_matches("--").to_string(), p[1].clone()))
            .chain(common.chunks(2).filter(|p| p[0] == "--set").map(|p| {
                let (k, v) = p[1].split_once('=').unwrap();
                (k.to_string(), v.to_string())
            }))
            .collect();
        let config = RunConfig::resolve(None, &args).unwrap();
        let (raw, hotels) = load_hotels(&config).unwrap();
        let split = load_split(&config, 2).unwrap();
        let fresh = TrainedEngines::train(&split.train, &raw, &hotels, &config.engine_config(2)).unwrap();
        let restored = load_engines(&config, &split, &raw, &hotels).unwrap();
        for user in fresh.users().iter().take(10) {
            for e in Engine::ALL {
                assert_eq!(fresh.recommend(user, e, 10).unwrap(), restored.recommend(user, e, 10).unwrap());
            }
        }

        // Unknown user: row-level error, exit 0.
        assert_eq!(hotelrec(&["recommend", "ghost", "--engine", "cf"], &common), 0);
        let errs = fs::read_to_string(dir.path().join("scenario-1/recommend_errors.csv")).unwrap();
        assert!(errs.lines().nth(1).unwrap().starts_with("ghost,cf,"));
    }

    #[test]
    fn scenario_three_requires_scenario_one() {
        let dir = tempfile::tempdir().unwrap();
        let common = small_run(dir.path());
        assert_eq!(hotelrec(&["synth"], &common), 0);
        assert_eq!(hotelrec(&["split", "--scenario", "3"], &common), 2);
        assert_eq!(hotelrec(&["split", "--scenario", "1"], &common), 0);
        assert_eq!(hotelrec(&["split", "--scenario", "3"], &common), 0);
    }

    #[test]
    fn corrupted_split_file_fails_training() {
        let dir = tempfile::tempdir().unwrap();
        let common = small_run(dir.path());
        assert_eq!(hotelrec(&["synth"], &common), 0);
        assert_eq!(hotelrec(&["split", "--scenario", "1"], &common), 0);
        let train = dir.path().join("scenario-1/train.csv");
        let mut text = fs::read_to_string(&train).unwrap();
        text.push_str("u1,h1,not-a-date\n");
        fs::write(&train, text).unwrap();
        assert_eq!(hotelrec(&["train", "--scenario", "1"], &common), 2);
    }

    #[test]
    fn model_header_records_cf_settings() {
        let dir = tempfile::tempdir().unwrap();
        let mut common = small_run(dir.path());
        common.extend(["--cf.lambda", "0.1", "--cf.latent_dim", "20"].map(String::from));
        let pos = common.iter().position(|a| a == "--cf.latent_dim").unwrap();
        common.drain(pos..pos + 2);
        assert_eq!(hotelrec(&["synth"], &common), 0);
        assert_eq!(hotelrec(&["split", "--scenario", "1"], &common), 0);
        assert_eq!(hotelrec(&["train", "--scenario", "1"], &common), 0);
        let model: crate::cf_engine::FactorModel<f64> =
            read_model(File::open(dir.path().join("scenario-1/model/cf_model.bin")).unwrap()).unwrap();
        assert_eq!(model.config.latent_dim, 20);
        assert_eq!(model.config.lambda, 0.1);
    }
}
