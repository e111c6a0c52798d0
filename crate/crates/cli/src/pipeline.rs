//! End-to-end run: ledger → graphs → features → detectors → evaluation.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use btc_anomaly::eval::{
    build_ownership, centroid_distance_ratios, dual_evaluation, ground_truth_hits, HitReport,
};
use btc_anomaly::features::{extract_transaction_features, extract_user_features, normalize};
use btc_anomaly::gaussian::{self, Ridge};
use btc_anomaly::graphs::{build_transaction_graph, build_user_graph};
use btc_anomaly::kmeans::{
    cluster_entropy, fit_kmeans, select_k, write_entropy_curve, EntropyPoint, KMeansConfig,
};
use btc_anomaly::ledger::{load_user_map, parse_ledger, validate_ledger};
use btc_anomaly::ocsvm::{self, tune_nu, write_nu_sweep, NuSweepPoint};
use btc_anomaly::{
    AnomalyRanking, DualEvalResult, EntityKind, FeatureMatrix, GraphKind, GroundTruth, KMeansModel,
    OcSvmModel, OcSvmParams, SmoConfig, Threshold, UserMap,
};
use log::{info, warn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{describe, Detector, KChoice, PipelineConfig};
use crate::scatter::render_scatter;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Config,
    Parse,
    Validate,
    Graphs,
    Features,
    KMeans,
    Gaussian,
    OcSvm,
    Evaluate,
    Write,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Parse => "parse",
            Stage::Validate => "validate",
            Stage::Graphs => "graphs",
            Stage::Features => "features",
            Stage::KMeans => "kmeans",
            Stage::Gaussian => "gaussian",
            Stage::OcSvm => "ocsvm",
            Stage::Evaluate => "evaluate",
            Stage::Write => "write",
        })
    }
}

#[derive(Debug)]
pub struct StageError {
    pub stage: Stage,
    pub source: anyhow::Error,
}

impl fmt::Display for StageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "[{}] {:#}", self.stage, self.source)
    }
}

impl std::error::Error for StageError {}

trait AtStage<T> {
    fn at(self, stage: Stage) -> Result<T, StageError>;
}

impl<T, E: Into<anyhow::Error>> AtStage<T> for Result<T, E> {
    fn at(self, stage: Stage) -> Result<T, StageError> {
        self.map_err(|e| StageError {
            stage,
            source: e.into(),
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct LedgerMetrics {
    pub records: usize,
    pub coinbase: usize,
    pub addresses: usize,
    pub users: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GraphMetrics {
    pub nodes: usize,
    pub edges: usize,
    /// Feature rows after sampling.
    pub rows: usize,
    pub sampled: bool,
    pub k: usize,
    pub kmeans_objective: f64,
    pub entropy: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dangling_inputs: Option<usize>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OcSvmSummary {
    pub nu: f64,
    pub gamma: f64,
    pub rho: f64,
    pub support_vectors: usize,
    pub converged: bool,
    pub iterations: usize,
    pub rho_fallback: bool,
    pub kernel_storage: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct RankingMetrics {
    pub flagged: usize,
    pub centroid_ratio: f64,
    pub ratio_top: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub hits: Option<HitReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub model: Option<OcSvmSummary>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct DetectorMetrics {
    pub graphs: BTreeMap<String, RankingMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dual: Option<DualEvalResult>,
}

#[derive(Debug, Clone, Serialize)]
pub struct Metrics {
    pub config: BTreeMap<&'static str, String>,
    pub ledger: LedgerMetrics,
    pub graphs: BTreeMap<String, GraphMetrics>,
    pub detectors: BTreeMap<String, DetectorMetrics>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub nu_sweep: Option<Vec<NuSweepPoint>>,
}

#[derive(Debug)]
pub struct RunReport {
    pub out: PathBuf,
    pub metrics: Metrics,
    /// Written files, relative to `out`.
    pub files: Vec<PathBuf>,
}

struct GraphRun {
    kind: GraphKind,
    raw: FeatureMatrix,
    z: FeatureMatrix,
    kmeans: KMeansModel,
    curve: Vec<EntropyPoint>,
    metrics: GraphMetrics,
}

fn entity_kind(kind: GraphKind) -> EntityKind {
    match kind {
        GraphKind::User => EntityKind::User,
        GraphKind::Transaction => EntityKind::Tx,
    }
}

/// Node-uniform sample without replacement; rows keep their order.
pub fn sample_rows(fm: &FeatureMatrix, limit: usize, seed: u64) -> FeatureMatrix {
    if fm.rows() <= limit {
        return fm.clone();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = rand::seq::index::sample(&mut rng, fm.rows(), limit).into_vec();
    idx.sort_unstable();
    fm.select_rows(&idx)
}

fn graph_seed(seed: u64, kind: GraphKind) -> u64 {
    match kind {
        GraphKind::User => seed,
        GraphKind::Transaction => seed ^ 0x9e37_79b9_7f4a_7c15,
    }
}

fn smo_config(cfg: &PipelineConfig) -> SmoConfig {
    SmoConfig {
        tol: cfg.smo_tol,
        seed: cfg.seed,
        cache_bytes: cfg.cache_mb << 20,
        ..SmoConfig::default()
    }
}

fn fit_svm(cfg: &PipelineConfig, g: &GraphRun, nu: f64) -> btc_anomaly::Result<(OcSvmModel, AnomalyRanking)> {
    let gamma = cfg.gamma.unwrap_or(1.0 / g.z.cols() as f64);
    let model = ocsvm::fit_ocsvm(&g.z.values, &OcSvmParams { nu, gamma }, &smo_config(cfg))?;
    if !model.converged {
        warn!("{} graph: SMO did not converge at nu = {nu}", g.kind);
    }
    let ranking = ocsvm::flag_anomalies(&model, &g.z.values, &g.z.entity_ids)?;
    Ok((model, ranking))
}

fn svm_summary(model: &OcSvmModel) -> OcSvmSummary {
    OcSvmSummary {
        nu: model.nu,
        gamma: model.gamma,
        rho: model.rho,
        support_vectors: model.support_count(),
        converged: model.converged,
        iterations: model.iterations,
        rho_fallback: model.rho_fallback,
        kernel_storage: format!("{:?}", model.kernel_storage),
    }
}

fn prepare_graph(
    cfg: &PipelineConfig,
    kind: GraphKind,
    raw_full: FeatureMatrix,
    nodes: usize,
    edges: usize,
    dangling: Option<usize>,
) -> Result<GraphRun, StageError> {
    let total = raw_full.rows();
    let raw = sample_rows(&raw_full, cfg.sample_limit, graph_seed(cfg.seed, kind));
    if raw.rows() < total {
        info!("{kind} graph: sampled {} of {total} nodes", raw.rows());
    }
    if raw.rows() < 2 {
        return Err(anyhow::anyhow!("{kind} graph has {} nodes; need at least 2", raw.rows()))
            .at(Stage::Features);
    }
    let z = normalize(&raw).at(Stage::Features)?;
    let (k, curve) = match cfg.k {
        KChoice::Fixed(k) => (k.min(z.rows()), Vec::new()),
        KChoice::Range(lo, hi) => {
            let hi = hi.min(z.rows());
            select_k(&z.values, lo.min(hi), hi, cfg.seed).at(Stage::KMeans)?
        }
    };
    let kmeans = fit_kmeans(&z.values, &KMeansConfig::new(k, cfg.seed)).at(Stage::KMeans)?;
    let entropy = cluster_entropy(&kmeans, &z.values).at(Stage::KMeans)?;
    info!("{kind} graph: k = {k}, objective {:.4}", kmeans.objective);
    let metrics = GraphMetrics {
        nodes,
        edges,
        rows: z.rows(),
        sampled: z.rows() < total,
        k,
        kmeans_objective: kmeans.objective,
        entropy,
        dangling_inputs: dangling,
    };
    Ok(GraphRun {
        kind,
        raw,
        z,
        kmeans,
        curve,
        metrics,
    })
}

/// Output files, built in memory and written at the end.
#[derive(Default)]
struct Outputs {
    files: Vec<(PathBuf, Vec<u8>)>,
    svgs: Vec<(PathBuf, FeatureMatrix, AnomalyRanking, String)>,
}

impl Outputs {
    fn add(&mut self, rel: impl Into<PathBuf>, f: impl FnOnce(&mut Vec<u8>) -> btc_anomaly::Result<()>) -> anyhow::Result<()> {
        let mut buf = Vec::new();
        f(&mut buf)?;
        self.files.push((rel.into(), buf));
        Ok(())
    }
}

/// Runs every configured stage and writes the results under `cfg.out`.
///
/// Files are staged in a hidden directory inside `cfg.out` and moved into
/// place only when everything succeeded; on failure the staging directory
/// is removed.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport, StageError> {
    cfg.validate().at(Stage::Config)?;

    let records = File::open(&cfg.ledger)
        .map_err(anyhow::Error::from)
        .and_then(|f| Ok(parse_ledger(BufReader::new(f))?))
        .with_context(|| cfg.ledger.display().to_string())
        .at(Stage::Parse)?;
    let user_map = match &cfg.user_map {
        Some(p) => File::open(p)
            .map_err(anyhow::Error::from)
            .and_then(|f| Ok(load_user_map(BufReader::new(f), &records)?))
            .with_context(|| p.display().to_string())
            .at(Stage::Parse)?,
        None => {
            let mut m = UserMap::new();
            m.complete(&records);
            m
        }
    };
    let truth = match &cfg.truth {
        Some(p) => Some(
            File::open(p)
                .map_err(anyhow::Error::from)
                .and_then(|f| Ok(GroundTruth::read_csv(BufReader::new(f))?))
                .with_context(|| p.display().to_string())
                .at(Stage::Parse)?,
        ),
        None => None,
    };
    info!("parsed {} records, {} addresses", records.len(), user_map.len());

    let report = validate_ledger(&records);
    if !report.is_clean() {
        let first = &report.errors[0];
        return Err(anyhow::anyhow!(
            "{} invalid records; first at record {}: {}",
            report.error_count,
            first.line,
            first.reason
        ))
        .at(Stage::Validate);
    }
    let users: std::collections::BTreeSet<u64> = user_map.sorted_entries().iter().map(|e| e.1).collect();
    let ledger_metrics = LedgerMetrics {
        records: records.len(),
        coinbase: records.iter().filter(|r| r.is_coinbase()).count(),
        addresses: user_map.len(),
        users: users.len(),
    };

    let mut runs: Vec<GraphRun> = Vec::new();
    if cfg.runs(GraphKind::User) {
        let g = build_user_graph(&records, &user_map).at(Stage::Graphs)?;
        let raw = extract_user_features(&g, &cfg.user_features).at(Stage::Features)?;
        runs.push(prepare_graph(cfg, GraphKind::User, raw, g.node_count(), g.edge_count(), None)?);
    }
    if cfg.runs(GraphKind::Transaction) {
        let g = build_transaction_graph(&records);
        if !g.dangling.is_empty() {
            warn!("{} inputs spend outputs not in the ledger", g.dangling.len());
        }
        let raw = extract_transaction_features(&g, &records, &cfg.tx_features).at(Stage::Features)?;
        let dangling = Some(g.dangling.len());
        runs.push(prepare_graph(cfg, GraphKind::Transaction, raw, g.node_count(), g.edge_count(), dangling)?);
    }

    // rankings[detector][graph index]
    let mut rankings: BTreeMap<&'static str, Vec<AnomalyRanking>> = BTreeMap::new();
    let mut svm_models: Vec<OcSvmModel> = Vec::new();
    let mut sweep: Option<Vec<NuSweepPoint>> = None;

    if cfg.uses(Detector::Gaussian) {
        let threshold = match cfg.epsilon {
            Some(e) => Threshold::Epsilon(e),
            None => Threshold::Quantile(cfg.quantile),
        };
        let mut out = Vec::new();
        for g in &runs {
            let model = gaussian::fit_gaussian(&g.z.values, Ridge::Relative).at(Stage::Gaussian)?;
            out.push(gaussian::flag_anomalies(&model, &g.z.values, &g.z.entity_ids, threshold).at(Stage::Gaussian)?);
        }
        rankings.insert(Detector::Gaussian.name(), out);
    }

    let ownership = build_ownership(&records, &user_map).at(Stage::Evaluate)?;
    let both = runs.len() == 2;
    let dual_sizes = |u: &AnomalyRanking, t: &AnomalyRanking| (cfg.top_users.min(u.len()), cfg.top_txs.min(t.len()));

    if cfg.uses(Detector::OcSvm) {
        if cfg.nu.len() > 1 {
            if !both {
                return Err(anyhow::anyhow!("a nu sweep needs both graphs")).at(Stage::OcSvm);
            }
            let (ug, tg) = (&runs[0], &runs[1]);
            let mut user_fits = Vec::new();
            let mut tx_fits = Vec::new();
            let (n, m) = (cfg.top_users.min(ug.z.rows()), cfg.top_txs.min(tg.z.rows()));
            let (best, curve) = tune_nu(
                |nu| {
                    info!("nu sweep: fitting user graph at {nu}");
                    let (model, r) = fit_svm(cfg, ug, nu)?;
                    user_fits.push(model);
                    Ok(r)
                },
                |nu| {
                    info!("nu sweep: fitting tx graph at {nu}");
                    let (model, r) = fit_svm(cfg, tg, nu)?;
                    tx_fits.push(model);
                    Ok(r)
                },
                &cfg.nu,
                &ownership,
                n,
                m,
            )
            .at(Stage::OcSvm)?;
            info!("nu sweep picked {best}");
            let i = cfg.nu.iter().position(|&v| v == best).expect("best is a candidate");
            let mut out = Vec::new();
            for (g, model) in runs.iter().zip([user_fits.swap_remove(i), tx_fits.swap_remove(i)]) {
                out.push(ocsvm::flag_anomalies(&model, &g.z.values, &g.z.entity_ids).at(Stage::OcSvm)?);
                svm_models.push(model);
            }
            rankings.insert(Detector::OcSvm.name(), out);
            sweep = Some(curve);
        } else {
            let mut out = Vec::new();
            for g in &runs {
                let (model, r) = fit_svm(cfg, g, cfg.nu[0]).at(Stage::OcSvm)?;
                svm_models.push(model);
                out.push(r);
            }
            rankings.insert(Detector::OcSvm.name(), out);
        }
    }

    let mut detectors = BTreeMap::new();
    for (&name, rs) in &rankings {
        let mut dm = DetectorMetrics::default();
        for (i, (g, r)) in runs.iter().zip(rs).enumerate() {
            let ratio_top = cfg.ratio_top.min(r.len());
            let centroid_ratio = centroid_distance_ratios(&g.kmeans, &g.z, r, ratio_top).at(Stage::Evaluate)?;
            let hits = match &truth {
                Some(t) => {
                    let top = ((cfg.hit_fraction * r.len() as f64).ceil() as usize).clamp(1, r.len());
                    Some(ground_truth_hits(r, t, entity_kind(g.kind), top).at(Stage::Evaluate)?)
                }
                None => None,
            };
            let model = (name == Detector::OcSvm.name()).then(|| svm_summary(&svm_models[i]));
            dm.graphs.insert(
                g.kind.to_string(),
                RankingMetrics {
                    flagged: r.flagged_count,
                    centroid_ratio,
                    ratio_top,
                    hits,
                    model,
                },
            );
        }
        if both {
            let (n, m) = dual_sizes(&rs[0], &rs[1]);
            dm.dual = Some(dual_evaluation(&rs[0], &rs[1], &ownership, n, m).at(Stage::Evaluate)?);
        }
        detectors.insert(name.to_string(), dm);
    }
    if sweep.is_none() && both {
        if let Some(d) = detectors.get(Detector::OcSvm.name()).and_then(|d| d.dual) {
            sweep = Some(vec![NuSweepPoint {
                nu: cfg.nu[0],
                a1: d.a1,
                a2: d.a2,
                m_de: d.m_de,
            }]);
        }
    }

    let metrics = Metrics {
        config: describe(cfg),
        ledger: ledger_metrics,
        graphs: runs.iter().map(|g| (g.kind.to_string(), g.metrics.clone())).collect(),
        detectors,
        nu_sweep: sweep.clone(),
    };

    let mut outputs = Outputs::default();
    (|| -> anyhow::Result<()> {
        outputs.add("metrics.json", |w| {
            serde_json::to_writer_pretty(&mut *w, &metrics)?;
            w.push(b'\n');
            Ok(())
        })?;
        if let Some(curve) = &sweep {
            outputs.add("nu_sweep.csv", |w| write_nu_sweep(w, curve))?;
        }
        for g in &runs {
            let dir = PathBuf::from(g.kind.to_string());
            outputs.add(dir.join("features.csv"), |w| g.raw.write_csv(w))?;
            if !g.curve.is_empty() {
                outputs.add(dir.join("entropy_curve.csv"), |w| write_entropy_curve(w, &g.curve))?;
            }
        }
        for (&name, rs) in &rankings {
            for (g, r) in runs.iter().zip(rs) {
                let dir = PathBuf::from(name);
                outputs.add(dir.join(format!("{}_ranking.csv", g.kind)), |w| r.write_csv(w))?;
                if cfg.scatter {
                    let title = format!("{name} anomalies: {} graph", if g.kind == GraphKind::User { "user" } else { "transaction" });
                    outputs
                        .svgs
                        .push((dir.join(format!("{}_scatter.svg", g.kind)), g.z.clone(), r.clone(), title));
                }
            }
        }
        Ok(())
    })()
    .at(Stage::Write)?;

    let files = commit(&cfg.out, &outputs).at(Stage::Write)?;
    info!("wrote {} files to {}", files.len(), cfg.out.display());
    Ok(RunReport {
        out: cfg.out.clone(),
        metrics,
        files,
    })
}

fn staging_dir(out: &Path) -> PathBuf {
    out.join(format!(".partial-{}", std::process::id()))
}

fn write_all(staging: &Path, outputs: &Outputs) -> anyhow::Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for (rel, bytes) in &outputs.files {
        let path = staging.join(rel);
        fs::create_dir_all(path.parent().expect("joined path"))?;
        fs::write(&path, bytes).with_context(|| path.display().to_string())?;
        written.push(rel.clone());
    }
    for (rel, fm, r, title) in &outputs.svgs {
        let path = staging.join(rel);
        fs::create_dir_all(path.parent().expect("joined path"))?;
        match render_scatter(fm, r, &path, title) {
            Ok(()) => written.push(rel.clone()),
            Err(e) => match e.downcast_ref::<btc_anomaly::Error>() {
                Some(btc_anomaly::Error::DegenerateProjection(why)) => {
                    warn!("skipping {}: {why}", rel.display());
                }
                _ => return Err(e),
            },
        }
    }
    Ok(written)
}

/// Writes everything into a staging directory, then moves it into place.
fn commit(out: &Path, outputs: &Outputs) -> anyhow::Result<Vec<PathBuf>> {
    let created_out = !out.exists();
    fs::create_dir_all(out).with_context(|| out.display().to_string())?;
    let staging = staging_dir(out);
    if staging.exists() {
        fs::remove_dir_all(&staging)?;
    }
    let result = write_all(&staging, outputs).and_then(|written| {
        for rel in &written {
            let dest = out.join(rel);
            if let Some(parent) = dest.parent() {
                fs::create_dir_all(parent)?;
            }
            fs::rename(staging.join(rel), &dest)?;
        }
        Ok(written)
    });
    let _ = fs::remove_dir_all(&staging);
    if result.is_err() && created_out {
        let _ = fs::remove_dir_all(out);
    }
    result
}

/// Hits of each ranking file against a ground truth. The entity kind comes
/// from `kind`, or else from the file name (`user...` or `tx...`).
pub fn eval_rankings(
    rankings: &[PathBuf],
    truth: &Path,
    kind: Option<EntityKind>,
    top: Option<usize>,
    hit_fraction: f64,
) -> anyhow::Result<Vec<(PathBuf, HitReport)>> {
    let truth = GroundTruth::read_csv(BufReader::new(
        File::open(truth).with_context(|| truth.display().to_string())?,
    ))?;
    let mut out = Vec::new();
    for path in rankings {
        let r = AnomalyRanking::read_csv(BufReader::new(
            File::open(path).with_context(|| path.display().to_string())?,
        ))
        .with_context(|| path.display().to_string())?;
        let kind = match kind {
            Some(k) => k,
            None => {
                let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
                if name.starts_with("user") {
                    EntityKind::User
                } else if name.starts_with("tx") {
                    EntityKind::Tx
                } else {
                    bail!("cannot tell whether {} ranks users or transactions; pass --kind", path.display());
                }
            }
        };
        let n = top
            .unwrap_or_else(|| (hit_fraction * r.len() as f64).ceil() as usize)
            .clamp(1, r.len().max(1));
        out.push((path.clone(), ground_truth_hits(&r, &truth, kind, n.min(r.len()))?));
    }
    Ok(out)
}

/// Writes a synthetic ledger, its user map and ground truth into `dir`.
pub fn write_synth(dir: &Path, ledger: &btc_anomaly::synth::SynthLedger) -> anyhow::Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let paths = [dir.join("ledger.csv"), dir.join("users.csv"), dir.join("truth.csv")];
    let mut w = BufWriter::new(File::create(&paths[0])?);
    btc_anomaly::ledger::write_ledger(&mut w, &ledger.records)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(&paths[1])?);
    ledger.user_map.write(&mut w)?;
    w.flush()?;
    let mut w = BufWriter::new(File::create(&paths[2])?);
    ledger.truth.write_csv(&mut w)?;
    w.flush()?;
    Ok(paths.to_vec())
}
