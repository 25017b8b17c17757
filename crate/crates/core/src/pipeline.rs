//! Config-driven experiment orchestration: ingest, similarities, latent
//! features, training over a λ grid, and a single final evaluation on the
//! test split. Similarities and factor pairs are cached on disk under keys
//! that hash the input files and every hyperparameter that shaped them.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fm::{
    assemble_features, assemble_one_hot, predict_table, ColumnScaler, FeatureTable, FmParams, GroupLayout,
    GroupWeighting, ModelFile, RegConfig, RegMode,
};
use crate::hin::{ingest, split_ratings, HinStore, Ingested, RatingRange, RatingSet, SchemaDecl};
use crate::latent::{
    factorize_mf, factorize_nnr, read_factor_pair, write_factor_pair, zero_unobserved, FactorMethod, FactorPair,
    MfOptions, NnrOptions, ObservedMatrix,
};
use crate::metagraph::{
    compile_plan, execute_plan, parse_metagraph_file, read_similarity, write_similarity, CompileOptions, ExecOptions,
    MetagraphSpec, SimilarityMatrix,
};
use crate::metrics::{mean_std, nnz_ratio, report_selected, rmse, selected_metagraphs, GroupReport};
use crate::solvers::{train, Problem, SolverConfig, TrainTrace};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FeatureConfig {
    pub method: FactorMethod,
    /// Rank `F` of MF features.
    pub rank: usize,
    /// Regularization weight `μ` of MF or NNR.
    pub mu: f64,
    pub mf: MfOptions,
    pub nnr: NnrOptions,
    pub exec: ExecOptions,
    pub compile: CompileOptions,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        FeatureConfig {
            method: FactorMethod::Mf,
            rank: 10,
            mu: 0.1,
            mf: MfOptions::default(),
            nnr: NnrOptions::default(),
            exec: ExecOptions::default(),
            compile: CompileOptions::default(),
        }
    }
}

pub fn default_lambdas() -> Vec<f64> {
    vec![0.0, 1e-3, 2e-3, 5e-3, 0.01, 0.02, 0.05, 0.1, 0.2, 0.5]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FmConfig {
    pub k: usize,
    /// Candidate weights, each applied to both `w` and `V`.
    pub lambdas: Vec<f64>,
    pub mode: RegMode,
    pub weighting: GroupWeighting,
    /// Z-score feature columns using training statistics.
    pub standardize: bool,
    /// Group norms above this count as selected.
    pub select_threshold: f64,
    /// Visit the grid in increasing order and also start each λ from the
    /// previous solution; the start with the lower validation RMSE (training
    /// objective without a validation split) is kept.
    pub warm_start: bool,
}

impl Default for FmConfig {
    fn default() -> Self {
        FmConfig {
            k: 10,
            lambdas: default_lambdas(),
            mode: RegMode::Lsp,
            weighting: GroupWeighting::Unit,
            standardize: false,
            select_threshold: 1e-3,
            warm_start: true,
        }
    }
}

/// Which models to train besides nothing: all metagraphs together, each
/// metagraph alone, and the rating-only factorization machine on one-hot
/// user and item indicators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunSelection {
    pub all: bool,
    pub single: bool,
    pub rating_only: bool,
}

impl Default for RunSelection {
    fn default() -> Self {
        RunSelection {
            all: true,
            single: false,
            rating_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub schema: PathBuf,
    pub metagraphs: PathBuf,
    /// Restrict to these metagraph names; all stanzas of the file otherwise.
    pub use_metagraphs: Option<Vec<String>>,
    pub features: FeatureConfig,
    pub fm: FmConfig,
    pub solver: SolverConfig,
    /// Train, validation and test fractions.
    pub splits: (f64, f64, f64),
    pub seed: u64,
    /// Clip predictions to the rating range before scoring.
    pub clip: bool,
    pub runs: RunSelection,
    pub repeats: usize,
    pub out_dir: Option<PathBuf>,
    /// Defaults to `<out_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            schema: PathBuf::new(),
            metagraphs: PathBuf::new(),
            use_metagraphs: None,
            features: FeatureConfig::default(),
            fm: FmConfig::default(),
            solver: SolverConfig::default(),
            splits: (0.8, 0.1, 0.1),
            seed: 0,
            clip: true,
            runs: RunSelection::default(),
            repeats: 1,
            out_dir: None,
            cache_dir: None,
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON config; relative paths resolve against its directory.
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.schema, &mut cfg.metagraphs] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        for p in [&mut cfg.out_dir, &mut cfg.cache_dir].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        for p in [&self.schema, &self.metagraphs] {
            if !p.is_file() {
                return Err(Error::Validation(format!("{} does not exist", p.display())));
            }
        }
        if self.fm.k == 0 {
            return Err(Error::Validation("K must be at least 1".into()));
        }
        if self.fm.lambdas.is_empty() || self.fm.lambdas.iter().any(|l| !(*l >= 0.0 && l.is_finite())) {
            return Err(Error::Validation(
                "λ grid must be nonempty with finite nonnegative entries".into(),
            ));
        }
        if self.repeats == 0 {
            return Err(Error::Validation("repeats must be at least 1".into()));
        }
        if !(self.features.mu >= 0.0) {
            return Err(Error::Validation("μ must be nonnegative".into()));
        }
        if self.fm.lambdas.len() > 1 && self.splits.1 <= 0.0 {
            return Err(Error::Validation("a λ grid needs a validation split".into()));
        }
        if !(self.runs.all || self.runs.single || self.runs.rating_only) {
            return Err(Error::Validation("no runs selected".into()));
        }
        self.solver.validate()
    }

    pub fn cache_dir(&self) -> Option<PathBuf> {
        self.cache_dir
            .clone()
            .or_else(|| self.out_dir.as_ref().map(|d| d.join("cache")))
    }
}

/// Instrumentation of stage boundaries and of access to test labels.
pub trait Observer: Sync {
    fn stage(&self, _name: &'static str) {}
    fn test_labels_read(&self) {}
}

pub struct Silent;

impl Observer for Silent {}

/// Test ratings that can only be read through [`Sealed::open`], which reports
/// the access to the observer.
#[derive(Debug, Clone)]
pub struct Sealed(RatingSet);

impl Sealed {
    pub fn open(&self, observer: &dyn Observer) -> &RatingSet {
        observer.test_labels_read();
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Result of the ingest stage for one split seed.
pub struct Prepared {
    pub ingested: Ingested,
    pub store: HinStore,
    pub train: RatingSet,
    pub valid: RatingSet,
    pub test: Sealed,
    pub specs: Vec<MetagraphSpec>,
    pub users: usize,
    pub items: usize,
    pub range: RatingRange,
    /// Hash of the schema and all data files it references.
    pub input_hash: String,
    pub seed: u64,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn key_of(value: &serde_json::Value) -> String {
    sha256_hex(value.to_string().as_bytes())
}

pub fn hash_inputs(schema_path: &Path, schema: &SchemaDecl) -> Result<String> {
    let mut h = Sha256::new();
    let mut add = |p: &Path| -> Result<()> {
        let bytes = fs::read(p).map_err(|e| Error::io(p, e))?;
        h.update((bytes.len() as u64).to_le_bytes());
        h.update(&bytes);
        Ok(())
    };
    add(schema_path)?;
    for p in schema.input_files() {
        add(p)?;
    }
    Ok(hex::encode(h.finalize()))
}

pub fn load_metagraphs(cfg: &ExperimentConfig) -> Result<Vec<MetagraphSpec>> {
    let text = fs::read_to_string(&cfg.metagraphs).map_err(|e| Error::io(&cfg.metagraphs, e))?;
    let mut specs = parse_metagraph_file(&text)?;
    if let Some(names) = &cfg.use_metagraphs {
        for n in names {
            if !specs.iter().any(|s| &s.name == n) {
                return Err(Error::Validation(format!("metagraph `{n}` is not defined")));
            }
        }
        specs.retain(|s| names.contains(&s.name));
    }
    if specs.is_empty() {
        return Err(Error::NoMetagraphs);
    }
    Ok(specs)
}

/// Loads the network, splits the ratings with `seed` and builds the store
/// from the training ratings only.
pub fn prepare(cfg: &ExperimentConfig, seed: u64, observer: &dyn Observer) -> Result<Prepared> {
    observer.stage("ingest");
    let run = || -> Result<Prepared> {
        let specs = load_metagraphs(cfg)?;
        let schema = SchemaDecl::load(&cfg.schema)?;
        let input_hash = hash_inputs(&cfg.schema, &schema)?;
        let ingested = ingest(&schema)?;
        let (train, valid, test) = split_ratings(&ingested.ratings, cfg.splits, seed)?;
        if train.is_empty() {
            return Err(Error::Validation("training split is empty".into()));
        }
        let store = ingested.into_store(&train)?;
        let users = store.entity_count(&schema.ratings.user_type)?;
        let items = store.entity_count(&schema.ratings.item_type)?;
        Ok(Prepared {
            range: ingested.range,
            ingested,
            store,
            train,
            valid,
            test: Sealed(test),
            specs,
            users,
            items,
            input_hash,
            seed,
        })
    };
    run().map_err(|e| e.in_stage("ingest"))
}

/// Disk cache with write-then-rename, so an interrupted run never leaves a
/// readable partial entry.
#[derive(Debug, Clone)]
pub struct Cache {
    dir: Option<PathBuf>,
}

impl Cache {
    pub fn new(dir: Option<PathBuf>) -> Self {
        Cache { dir }
    }

    fn sim_path(&self, name: &str, key: &str) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join("similarity").join(format!("{name}-{key}.tsv")))
    }

    fn factor_dir(&self) -> Option<PathBuf> {
        self.dir.as_ref().map(|d| d.join("factors"))
    }

    fn load_similarity(&self, name: &str, key: &str) -> Option<SimilarityMatrix> {
        let p = self.sim_path(name, key)?;
        if !p.is_file() {
            return None;
        }
        match read_similarity(&p) {
            Ok(s) => Some(s),
            Err(e) => {
                log::warn!("ignoring unreadable cache entry {}: {e}", p.display());
                None
            }
        }
    }

    fn store_similarity(&self, sim: &SimilarityMatrix, name: &str, key: &str) -> Result<()> {
        let Some(p) = self.sim_path(name, key) else {
            return Ok(());
        };
        let dir = p.parent().unwrap();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tmp = p.with_extension(format!("tmp{}", std::process::id()));
        write_similarity(sim, &tmp)?;
        fs::rename(&tmp, &p).map_err(|e| Error::io(&p, e))
    }

    fn load_factors(&self, stem: &str) -> Option<FactorPair> {
        let dir = self.factor_dir()?;
        if !dir.join(format!("{stem}.user.tsv")).is_file() || !dir.join(format!("{stem}.item.tsv")).is_file() {
            return None;
        }
        match read_factor_pair(&dir, stem) {
            Ok(p) => Some(p),
            Err(e) => {
                log::warn!("ignoring unreadable cached factors {stem}: {e}");
                None
            }
        }
    }

    fn store_factors(&self, pair: &FactorPair, stem: &str) -> Result<()> {
        let Some(dir) = self.factor_dir() else {
            return Ok(());
        };
        let tmp_stem = format!("{stem}.tmp{}", std::process::id());
        write_factor_pair(pair, &dir, &tmp_stem)?;
        for side in ["user", "item"] {
            let from = dir.join(format!("{tmp_stem}.{side}.tsv"));
            let to = dir.join(format!("{stem}.{side}.tsv"));
            fs::rename(&from, &to).map_err(|e| Error::io(&to, e))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheStats {
    pub hits: usize,
    pub misses: usize,
}

#[derive(Default)]
struct Counter {
    hits: AtomicUsize,
    misses: AtomicUsize,
}

impl Counter {
    fn record(&self, hit: bool) {
        if hit {
            self.hits.fetch_add(1, Ordering::Relaxed);
        } else {
            self.misses.fetch_add(1, Ordering::Relaxed);
        }
    }

    fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
        }
    }
}

/// Similarity matrix of one metagraph with the key it is cached under.
#[derive(Debug, Clone)]
pub struct KeyedSimilarity {
    pub sim: SimilarityMatrix,
    pub key: String,
}

pub fn similarity_key(cfg: &ExperimentConfig, prep: &Prepared, spec: &MetagraphSpec) -> Result<String> {
    Ok(key_of(&json!({
        "inputs": prep.input_hash,
        "splits": cfg.splits,
        "seed": prep.seed,
        "binarize": prep.ingested.binarize,
        "metagraph": spec.canonical()?.to_dsl()?,
        "exec": cfg.features.exec,
        "compile": cfg.features.compile,
    })))
}

/// Per-metagraph similarity matrices, computed concurrently.
pub fn similarities(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    cache: &Cache,
    observer: &dyn Observer,
) -> Result<(Vec<KeyedSimilarity>, CacheStats)> {
    observer.stage("similarity");
    let counter = Counter::default();
    let out = prep
        .specs
        .par_iter()
        .map(|spec| {
            let key = similarity_key(cfg, prep, spec)?;
            if let Some(sim) = cache.load_similarity(&spec.name, &key) {
                counter.record(true);
                return Ok(KeyedSimilarity { sim, key });
            }
            counter.record(false);
            let plan = compile_plan(spec, &prep.store, cfg.features.compile)?;
            let sim = execute_plan(&plan, &prep.store, &cfg.features.exec)?;
            if sim.matrix.shape() != (prep.users, prep.items) {
                return Err(Error::Shape(format!(
                    "metagraph `{}` yields {:?}, expected users x items {:?}",
                    spec.name,
                    sim.matrix.shape(),
                    (prep.users, prep.items)
                )));
            }
            cache.store_similarity(&sim, &spec.name, &key)?;
            Ok(KeyedSimilarity { sim, key })
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("similarity"))?;
    Ok((out, counter.stats()))
}

pub fn factor_key(cfg: &ExperimentConfig, sim_key: &str, seed: u64) -> String {
    let f = &cfg.features;
    let opts = match f.method {
        FactorMethod::Mf => json!({ "rank": f.rank, "mf": MfOptions { seed, ..f.mf } }),
        FactorMethod::Nnr => json!({ "nnr": NnrOptions { seed, ..f.nnr } }),
    };
    key_of(&json!({ "similarity": sim_key, "method": f.method.tag(), "mu": f.mu, "opts": opts }))
}

/// Latent user and item features of one similarity matrix; users and items
/// with no nonzero similarity get zero rows.
pub fn factorize(cfg: &ExperimentConfig, sim: &SimilarityMatrix, seed: u64) -> Result<FactorPair> {
    let obs = ObservedMatrix::from_similarity(sim);
    let f = &cfg.features;
    let mut pair = match f.method {
        FactorMethod::Mf => {
            let opts = MfOptions { seed, ..f.mf };
            factorize_mf(&obs, f.rank, f.mu, &opts, &sim.metagraph)?.0
        }
        FactorMethod::Nnr => {
            let opts = NnrOptions { seed, ..f.nnr };
            let (pair, state) = factorize_nnr(&obs, f.mu, &opts, &sim.metagraph)?;
            log::info!(
                "{}: nnr rank {} (emitted {})",
                sim.metagraph,
                state.x.rank(),
                pair.rank()
            );
            pair
        }
    };
    zero_unobserved(&mut pair, &obs);
    Ok(pair)
}

pub fn factor_pairs(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    sims: &[KeyedSimilarity],
    cache: &Cache,
    observer: &dyn Observer,
) -> Result<(Vec<FactorPair>, CacheStats)> {
    observer.stage("factorize");
    let counter = Counter::default();
    let out = sims
        .par_iter()
        .map(|ks| {
            let key = factor_key(cfg, &ks.key, prep.seed);
            let stem = format!("{}-{}", ks.sim.metagraph, key);
            if let Some(pair) = cache.load_factors(&stem) {
                counter.record(true);
                return Ok(pair);
            }
            counter.record(false);
            let pair = factorize(cfg, &ks.sim, prep.seed)?;
            cache.store_factors(&pair, &stem)?;
            Ok(pair)
        })
        .collect::<Result<Vec<_>>>()
        .map_err(|e| e.in_stage("factorize"))?;
    Ok((out, counter.stats()))
}

/// One point of the λ path.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaPoint {
    pub lambda: f64,
    pub valid_rmse: Option<f64>,
    pub train_rmse: f64,
    pub nnz: f64,
    pub objective: f64,
    pub iterations: usize,
    pub selected: Vec<String>,
    pub groups: Vec<GroupReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRmse {
    pub train: f64,
    pub valid: Option<f64>,
    pub test: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub name: String,
    pub repeat: usize,
    pub metagraphs: Vec<String>,
    pub lambda: f64,
    pub rmse: SplitRmse,
    pub nnz: f64,
    pub groups: Vec<GroupReport>,
    pub selected: Vec<String>,
    pub path: Vec<LambdaPoint>,
}

impl RunReport {
    pub fn new(
        run: &RunData,
        params: &FmParams,
        reg: RegConfig,
        rmse: SplitRmse,
        path: Vec<LambdaPoint>,
        repeat: usize,
        select_threshold: f64,
    ) -> RunReport {
        let groups = report_selected(params, &run.layout, select_threshold);
        RunReport {
            name: run.name.clone(),
            repeat,
            metagraphs: run.metagraphs.clone(),
            lambda: reg.lambda_w,
            rmse,
            nnz: nnz_ratio(params),
            selected: selected_metagraphs(&groups),
            groups,
            path,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub name: String,
    pub test_rmse_mean: f64,
    pub test_rmse_std: f64,
    pub repeats: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageTiming {
    pub stage: String,
    pub repeat: usize,
    pub seconds: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache: Option<CacheStats>,
}

/// Everything a run measured. `runs` and `summary` are deterministic given the
/// config; `stages` holds wall-clock timings and cache statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub runs: Vec<RunReport>,
    pub summary: Vec<RunSummary>,
    pub stages: Vec<StageTiming>,
}

impl MetricsReport {
    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<MetricsReport> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Equality of everything except timings and cache statistics.
    pub fn same_results(&self, other: &MetricsReport) -> bool {
        self.runs == other.runs && self.summary == other.summary
    }

    pub fn cache_stats(&self, stage: &str) -> CacheStats {
        self.stages
            .iter()
            .filter(|s| s.stage == stage)
            .filter_map(|s| s.cache)
            .fold(CacheStats::default(), |a, b| CacheStats {
                hits: a.hits + b.hits,
                misses: a.misses + b.misses,
            })
    }

    pub fn run(&self, name: &str) -> Option<&RunReport> {
        self.runs.iter().find(|r| r.name == name)
    }
}

/// Train and validation tables of one run, with the layout and scaler.
pub struct RunData {
    pub name: String,
    pub metagraphs: Vec<String>,
    pub train: FeatureTable,
    pub valid: FeatureTable,
    pub layout: GroupLayout,
    pub scaler: Option<ColumnScaler>,
    features: Features,
}

enum Features {
    Latent(Vec<FactorPair>),
    OneHot { users: usize, items: usize },
}

impl RunData {
    fn table(&self, ratings: &RatingSet) -> Result<FeatureTable> {
        let mut t = match &self.features {
            Features::Latent(pairs) => assemble_features(pairs, ratings)?.0,
            Features::OneHot { users, items } => assemble_one_hot(ratings, *users, *items)?.0,
        };
        if let Some(s) = &self.scaler {
            s.apply(&mut t);
        }
        Ok(t)
    }

    fn build(
        name: String,
        metagraphs: Vec<String>,
        features: Features,
        prep: &Prepared,
        standardize: bool,
    ) -> Result<RunData> {
        let (mut train, layout) = match &features {
            Features::Latent(pairs) => assemble_features(pairs, &prep.train)?,
            Features::OneHot { users, items } => assemble_one_hot(&prep.train, *users, *items)?,
        };
        let scaler = standardize.then(|| ColumnScaler::fit(&train));
        if let Some(s) = &scaler {
            s.apply(&mut train);
        }
        let mut run = RunData {
            name,
            metagraphs,
            train,
            valid: FeatureTable::empty(layout.d()),
            layout,
            scaler,
            features,
        };
        run.valid = run.table(&prep.valid)?;
        Ok(run)
    }

    /// All metagraphs together.
    pub fn all(pairs: &[FactorPair], prep: &Prepared, standardize: bool) -> Result<RunData> {
        let names = pairs.iter().map(|p| p.metagraph.clone()).collect();
        RunData::build("all".into(), names, Features::Latent(pairs.to_vec()), prep, standardize)
    }

    pub fn single(pair: &FactorPair, prep: &Prepared, standardize: bool) -> Result<RunData> {
        RunData::build(
            pair.metagraph.clone(),
            vec![pair.metagraph.clone()],
            Features::Latent(vec![pair.clone()]),
            prep,
            standardize,
        )
    }

    pub fn rating_only(prep: &Prepared) -> Result<RunData> {
        let features = Features::OneHot {
            users: prep.users,
            items: prep.items,
        };
        RunData::build("rating-only".into(), Vec::new(), features, prep, false)
    }
}

fn scored_rmse(p: &FmParams, table: &FeatureTable, range: RatingRange, clip: bool) -> Result<f64> {
    let mut pred = predict_table(p, table);
    if clip {
        pred.iter_mut().for_each(|y| *y = range.clip(*y));
    }
    rmse(&pred, table.labels())
}

/// Outcome of training over the λ grid.
pub struct Trained {
    pub params: FmParams,
    pub reg: RegConfig,
    pub trace: TrainTrace,
    pub path: Vec<LambdaPoint>,
}

/// Trains one model per λ and keeps the one with the lowest validation RMSE
/// (the first on ties).
pub fn train_grid(run: &RunData, cfg: &ExperimentConfig, range: RatingRange, seed: u64) -> Result<Trained> {
    let solver = SolverConfig {
        seed,
        ..cfg.solver.clone()
    };
    let mut lambdas = cfg.fm.lambdas.clone();
    if cfg.fm.warm_start {
        lambdas.sort_by(f64::total_cmp);
    }
    let mut best: Option<(f64, Trained)> = None;
    let mut path = Vec::with_capacity(lambdas.len());
    let mut prev: Option<FmParams> = None;
    for &lambda in &lambdas {
        let reg = RegConfig {
            weighting: cfg.fm.weighting,
            ..RegConfig::new(cfg.fm.mode, lambda)
        };
        let problem = Problem {
            train: &run.train,
            layout: &run.layout,
            reg,
            k: cfg.fm.k,
            valid: None,
            start: None,
        };
        let score = |p: &FmParams| -> Result<Option<f64>> {
            if run.valid.is_empty() {
                Ok(None)
            } else {
                scored_rmse(p, &run.valid, range, cfg.clip).map(Some)
            }
        };
        let (mut params, mut trace) = train(&problem, &solver)?;
        let mut valid_rmse = score(&params)?;
        if let Some(p) = &prev {
            let (wp, wt) = train(
                &Problem {
                    start: Some(p),
                    ..problem
                },
                &solver,
            )?;
            let wv = score(&wp)?;
            let better = match (wv, valid_rmse) {
                (Some(a), Some(b)) => a < b,
                _ => wt.final_objective() < trace.final_objective(),
            };
            if better {
                (params, trace, valid_rmse) = (wp, wt, wv);
            }
        }
        if cfg.fm.warm_start {
            prev = Some(params.clone());
        }
        let report = report_selected(&params, &run.layout, cfg.fm.select_threshold);
        path.push(LambdaPoint {
            lambda,
            valid_rmse,
            train_rmse: scored_rmse(&params, &run.train, range, cfg.clip)?,
            nnz: nnz_ratio(&params),
            objective: trace.final_objective(),
            iterations: trace.records.last().map_or(0, |r| r.iter),
            selected: selected_metagraphs(&report),
            groups: report,
        });
        let score = valid_rmse.unwrap_or(f64::INFINITY);
        if best.as_ref().is_none_or(|(s, _)| score < *s) {
            best = Some((
                score,
                Trained {
                    params,
                    reg,
                    trace,
                    path: Vec::new(),
                },
            ));
        }
    }
    let mut trained = best.expect("nonempty grid").1;
    trained.path = path;
    Ok(trained)
}

/// Scores a model on every split, opening the sealed test labels.
pub fn evaluate(
    run: &RunData,
    params: &FmParams,
    prep: &Prepared,
    cfg: &ExperimentConfig,
    observer: &dyn Observer,
) -> Result<SplitRmse> {
    if params.d() != run.layout.d() || params.k != cfg.fm.k {
        return Err(Error::Shape(format!(
            "model for `{}` has d = {}, K = {}; features need d = {}, K = {}",
            run.name,
            params.d(),
            params.k,
            run.layout.d(),
            cfg.fm.k
        )));
    }
    let train = scored_rmse(params, &run.train, prep.range, cfg.clip)?;
    let valid = if run.valid.is_empty() {
        None
    } else {
        Some(scored_rmse(params, &run.valid, prep.range, cfg.clip)?)
    };
    let test = if prep.test.is_empty() {
        None
    } else {
        let table = run.table(prep.test.open(observer))?;
        Some(scored_rmse(params, &table, prep.range, cfg.clip)?)
    };
    Ok(SplitRmse { train, valid, test })
}

/// Builds the feature tables of every run the config selects.
pub fn assemble_runs(
    cfg: &ExperimentConfig,
    prep: &Prepared,
    pairs: &[FactorPair],
    observer: &dyn Observer,
) -> Result<Vec<RunData>> {
    observer.stage("assemble");
    let build = || -> Result<Vec<RunData>> {
        let mut out = Vec::new();
        if cfg.runs.all {
            out.push(RunData::all(pairs, prep, cfg.fm.standardize)?);
        }
        if cfg.runs.single {
            for p in pairs {
                out.push(RunData::single(p, prep, cfg.fm.standardize)?);
            }
        }
        if cfg.runs.rating_only {
            out.push(RunData::rating_only(prep)?);
        }
        Ok(out)
    };
    build().map_err(|e| e.in_stage("assemble"))
}

/// `-r{repeat}` when the config asks for several repeats, else empty.
pub fn artifact_suffix(cfg: &ExperimentConfig, repeat: usize) -> String {
    if cfg.repeats > 1 {
        format!("-r{repeat}")
    } else {
        String::new()
    }
}

pub fn model_path(out: &Path, name: &str, suffix: &str) -> PathBuf {
    out.join(format!("model-{name}{suffix}.json"))
}

pub fn lambda_path_path(out: &Path, name: &str, suffix: &str) -> PathBuf {
    out.join(format!("path-{name}{suffix}.json"))
}

/// Writes the model, the solver trace and the λ path of one trained run.
pub fn write_run_artifacts(
    out: &Path,
    run: &RunData,
    t: &Trained,
    cfg: &ExperimentConfig,
    repeat: usize,
) -> Result<()> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let suffix = artifact_suffix(cfg, repeat);
    let model = ModelFile {
        d: run.layout.d(),
        k: cfg.fm.k,
        layout: run.layout.clone(),
        reg: t.reg,
        params: t.params.clone(),
        scaler: run.scaler.clone(),
    };
    model.write(&model_path(out, &run.name, &suffix))?;
    t.trace
        .write_jsonl(&out.join(format!("trace-{}{suffix}.jsonl", run.name)))?;
    let path = lambda_path_path(out, &run.name, &suffix);
    fs::write(&path, serde_json::to_string_pretty(&t.path)?).map_err(|e| Error::io(&path, e))
}

/// Mean and standard deviation of test RMSE per run name, in first-seen
/// order.
pub fn summarize(runs: &[RunReport]) -> Vec<RunSummary> {
    let mut by_name: BTreeMap<&str, Vec<f64>> = BTreeMap::new();
    let mut order = Vec::new();
    for r in runs {
        if !by_name.contains_key(r.name.as_str()) {
            order.push(r.name.as_str());
        }
        by_name.entry(&r.name).or_default().extend(r.rmse.test);
    }
    order
        .iter()
        .map(|&name| {
            let xs = &by_name[name];
            let (m, s) = mean_std(xs);
            RunSummary {
                name: name.into(),
                test_rmse_mean: m,
                test_rmse_std: s,
                repeats: xs.len(),
            }
        })
        .collect()
}

struct Clock {
    stages: Vec<StageTiming>,
    repeat: usize,
    start: Instant,
}

impl Clock {
    fn lap(&mut self, stage: &str, cache: Option<CacheStats>) {
        let now = Instant::now();
        self.stages.push(StageTiming {
            stage: stage.into(),
            repeat: self.repeat,
            seconds: (now - self.start).as_secs_f64(),
            cache,
        });
        self.start = now;
    }
}

pub fn run_pipeline(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    run_pipeline_with(cfg, &Silent)
}

pub fn run_pipeline_with(cfg: &ExperimentConfig, observer: &dyn Observer) -> Result<MetricsReport> {
    cfg.validate().map_err(|e| e.in_stage("config"))?;
    if let Some(out) = &cfg.out_dir {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e).in_stage("config"))?;
    }
    let cache = Cache::new(cfg.cache_dir());
    let mut clock = Clock {
        stages: Vec::new(),
        repeat: 0,
        start: Instant::now(),
    };
    let mut runs = Vec::new();
    for repeat in 0..cfg.repeats {
        clock.repeat = repeat;
        clock.start = Instant::now();
        let seed = cfg.seed.wrapping_add(repeat as u64);
        let prep = prepare(cfg, seed, observer)?;
        clock.lap("ingest", None);
        let (sims, stats) = similarities(cfg, &prep, &cache, observer)?;
        clock.lap("similarity", Some(stats));
        let (pairs, stats) = factor_pairs(cfg, &prep, &sims, &cache, observer)?;
        clock.lap("factorize", Some(stats));

        let data = assemble_runs(cfg, &prep, &pairs, observer)?;
        clock.lap("assemble", None);

        observer.stage("train");
        let trained = data
            .iter()
            .map(|run| train_grid(run, cfg, prep.range, seed))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.in_stage("train"))?;
        clock.lap("train", None);

        observer.stage("evaluate");
        for (run, t) in data.iter().zip(&trained) {
            let rmse = evaluate(run, &t.params, &prep, cfg, observer).map_err(|e| e.in_stage("evaluate"))?;
            if let Some(out) = &cfg.out_dir {
                write_run_artifacts(out, run, t, cfg, repeat).map_err(|e| e.in_stage("evaluate"))?;
            }
            runs.push(RunReport::new(
                run,
                &t.params,
                t.reg,
                rmse,
                t.path.clone(),
                repeat,
                cfg.fm.select_threshold,
            ));
        }
        clock.lap("evaluate", None);
    }

    let report = MetricsReport {
        summary: summarize(&runs),
        runs,
        stages: clock.stages,
    };
    if let Some(out) = &cfg.out_dir {
        report
            .write(&out.join("metrics.json"))
            .map_err(|e| e.in_stage("report"))?;
    }
    Ok(report)
}
