//! Command-line front end. Each subcommand wraps one pipeline stage and
//! reads or writes the same JSON documents the full run emits.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::align::{AlignmentResult, ShiftSearchConfig};
use crate::bc_signal::{trim_bounds, trim_with_bounds, OnaConfig, SeriesPoint, TrimConfig, TrimMode};
use crate::error::{Error, Result};
use crate::eval::{compare_models, metrics, EvalReport, PairedTest, Split, SplitKind, SplitSpec};
use crate::explain::{background_sample, beeswarm_csv, explain_table, global_importance, ShapReport};
use crate::features::{parse_feature_rows, write_feature_csv, write_feature_rows, FeatureConfig, FeatureRow, Target};
use crate::ingest::Session;
use crate::model::{
    grid_search, ForestParams, GbtHyperParams, Model, ModelDocument, ModelSpec, ParamGrid, Predictor,
};
use crate::pipeline::{
    align_session, load_session, preprocess_session, read_bytes, read_json, render_report, run_pipeline,
    scenario_pipeline_config, select_features, session_counts, split_table, to_json, trim_train_rows, vision_events,
    Artifacts, CountsDocument, InputPaths, PipelineConfig, Predictions, RunReport, Stamped, VisionParams,
};
use crate::report::{metrics_csv, MetricRow, Stamp};
use crate::synth::{generate_scenario, write_scenario, ScenarioConfig};
use crate::vision::{bin_counts, BinSpec, LaneGeometry};

#[derive(Debug, Parser)]
#[command(name = "bctrace", version, about = "Street-level black carbon estimation from vehicle detections")]
pub struct Cli {
    /// Caps worker threads for parallel stages.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Reads raw inputs into one session document.
    Ingest(IngestArgs),
    /// ONA smoothing, plus an audit of cells outside the trim bounds.
    Preprocess(PreprocessArgs),
    /// Finds the BC lag against vehicle activity and re-times the session.
    Align(AlignArgs),
    /// Lane geometry, tracking and per-bin counts from detection boxes.
    Vision(VisionArgs),
    /// Joins counts, weather, traffic and BC into a feature table.
    Features(FeaturesArgs),
    /// Fits one model on the training side of a split.
    Train(TrainArgs),
    /// Grid search with k-fold cross-validation.
    Tune(TuneArgs),
    /// Scores a model on both sides of a split.
    Evaluate(EvaluateArgs),
    /// Exact Shapley attributions for table rows.
    Explain(ExplainArgs),
    /// Writes a synthetic scenario with known ground truth.
    Simulate(SimulateArgs),
    /// Re-renders tables and charts of a finished run.
    Report(ReportArgs),
    /// Full run driven by a pipeline config.
    Run(RunArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct IngestArgs {
    #[arg(long)]
    pub ae51: PathBuf,
    #[arg(long)]
    pub events: Option<PathBuf>,
    #[arg(long)]
    pub stops: Option<PathBuf>,
    #[arg(long)]
    pub detections: Option<PathBuf>,
    #[arg(long)]
    pub lane_image: Option<PathBuf>,
    #[arg(long)]
    pub weather: PathBuf,
    #[arg(long)]
    pub traffic: Option<PathBuf>,
    #[arg(long, default_value = "site")]
    pub dataset: String,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum TrimArg {
    Local,
    Global,
    None,
}

#[derive(Debug, Args, Serialize)]
pub struct PreprocessArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 0.05)]
    pub ona_delta: f64,
    #[arg(long, value_enum, default_value = "local")]
    pub trim: TrimArg,
    #[arg(long, default_value_t = 0.95)]
    pub level: f64,
    /// Audit CSV; defaults to the output path with a `.trim.csv` suffix.
    #[arg(long)]
    pub audit: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct AlignArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long, default_value_t = 600)]
    pub max_shift: i64,
    #[arg(long, default_value_t = 1)]
    pub step: i64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub curve: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct VisionArgs {
    /// A PGM still of the road, or a folder of them.
    #[arg(long)]
    pub frames: PathBuf,
    #[arg(long)]
    pub detections: PathBuf,
    /// `auto` or a saved lane geometry JSON.
    #[arg(long, default_value = "auto")]
    pub lanes: String,
    #[arg(long, default_value_t = 30)]
    pub bin: i64,
    /// Bins cover this session's BC span instead of the detection span.
    #[arg(long)]
    pub session: Option<PathBuf>,
    #[arg(long)]
    pub geometry_out: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum TargetArg {
    BcPost,
    BcRaw,
}

impl From<TargetArg> for Target {
    fn from(t: TargetArg) -> Self {
        match t {
            TargetArg::BcPost => Target::BcPost,
            TargetArg::BcRaw => Target::BcRaw,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct FeaturesArgs {
    #[arg(long)]
    pub session: PathBuf,
    /// Counts from `vision`; when absent they come from the session events.
    #[arg(long)]
    pub counts: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "bc-post")]
    pub target: TargetArg,
    #[arg(long, default_value_t = 0.70)]
    pub threshold: f64,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub corr: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// Shared options deciding which rows and columns a model sees.
#[derive(Debug, Args, Serialize)]
pub struct TableArgs {
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long, value_enum, default_value = "bc-post")]
    pub target: TargetArg,
    #[arg(long, default_value_t = 0.70)]
    pub threshold: f64,
    #[arg(long, default_value_t = false)]
    pub no_traffic: bool,
    #[arg(long, value_enum, default_value = "stratified")]
    pub split: SplitArg,
    #[arg(long, value_enum, default_value = "local")]
    pub trim: TrimArg,
    #[arg(long, env = "BCTRACE_SEED", default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum SplitArg {
    Stratified,
    Windowed,
}

#[derive(Debug, Clone, Copy, ValueEnum, Serialize)]
pub enum ModelArg {
    Gbt,
    Rf,
    Lr,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    pub table: TableArgs,
    #[arg(long, value_enum, default_value = "gbt")]
    pub model: ModelArg,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 5)]
    pub depth: usize,
    #[arg(long, default_value_t = 50)]
    pub trees: usize,
    #[arg(long, default_value_t = 1.0)]
    pub lambda: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TuneArgs {
    #[command(flatten)]
    pub table: TableArgs,
    /// Grid JSON, or one of `xgb`, `gb`, `rf` for the built-in grids.
    #[arg(long, default_value = "xgb")]
    pub grid: String,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long)]
    pub model_out: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub table: TableArgs,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub report: PathBuf,
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct ExplainArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub table: PathBuf,
    #[arg(long, value_enum, default_value = "bc-post")]
    pub target: TargetArg,
    /// `all` or comma-separated row indices.
    #[arg(long, default_value = "all")]
    pub rows: String,
    #[arg(long, default_value_t = 100)]
    pub background: usize,
    #[arg(long, env = "BCTRACE_SEED", default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, env = "BCTRACE_SEED")]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Folder holding report.json and predictions.json of a run.
    #[arg(long)]
    pub run_dir: PathBuf,
    /// Defaults to the run folder.
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct RunArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out_dir: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Stamp for a single-stage command: hash of its arguments.
fn stamp_of<A: Serialize>(args: &A, seed: u64) -> Stamp {
    Stamp {
        config_hash: crate::pipeline::hash_json(args),
        seed,
    }
}

fn write(path: &Path, text: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_stamped<T: Serialize>(path: &Path, stamp: &Stamp, body: &T) -> Result<()> {
    write(
        path,
        to_json(&Stamped {
            stamp: stamp.clone(),
            body,
        }),
    )
}

fn stage<T>(name: &'static str, input: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name, Some(input.to_path_buf())))
}

fn load_rows(path: &Path) -> Result<Vec<FeatureRow>> {
    stage(
        "features",
        path,
        read_bytes(path).and_then(|b| parse_feature_rows(&b).map_err(Error::from)),
    )
}

fn load_model(path: &Path) -> Result<ModelDocument> {
    let text = String::from_utf8(read_bytes(path)?).map_err(|e| Error::json(path, e))?;
    stage("model", path, ModelDocument::from_json(&text).map_err(Error::from))
}

fn trim_cfg(t: TrimArg, level: f64) -> Option<TrimConfig> {
    let mode = match t {
        TrimArg::Local => TrimMode::Local,
        TrimArg::Global => TrimMode::Global,
        TrimArg::None => return None,
    };
    Some(TrimConfig { mode, level })
}

/// Table, column selection, split and train-side trimming shared by
/// `train`, `tune` and `evaluate`.
struct Prepared {
    rows: Vec<FeatureRow>,
    ds: crate::Dataset,
    split: Split,
    train: Vec<usize>,
    trimmed: Vec<usize>,
}

fn prepare(a: &TableArgs) -> Result<Prepared> {
    let rows = load_rows(&a.table)?;
    let target = Target::from(a.target);
    let sel = stage("features", &a.table, select_features(&rows, !a.no_traffic, a.threshold, target))?;
    let spec = SplitSpec {
        kind: match a.split {
            SplitArg::Stratified => SplitKind::Stratified,
            SplitArg::Windowed => SplitKind::Windowed,
        },
        seed: a.seed,
        ..SplitSpec::default()
    };
    let split = stage("split", &a.table, split_table(&sel.dataset, &spec))?;
    let (train, trimmed) = match trim_cfg(a.trim, 0.95) {
        Some(cfg) => {
            let (kept, gone) = stage("split", &a.table, trim_train_rows(&rows, &split.train, &cfg, target))?;
            (kept, gone.into_iter().map(|g| g.0).collect())
        }
        None => (split.train.clone(), Vec::new()),
    };
    Ok(Prepared {
        rows,
        ds: sel.dataset,
        split,
        train,
        trimmed,
    })
}

fn cmd_ingest(a: &IngestArgs) -> Result<()> {
    let inputs = InputPaths {
        ae51: a.ae51.clone(),
        events: a.events.clone(),
        stops: a.stops.clone(),
        detections: a.detections.clone(),
        lane_image: a.lane_image.clone(),
        weather: a.weather.clone(),
        traffic: a.traffic.clone(),
    };
    let (session, _) = load_session(&a.dataset, &inputs, &VisionParams::default())?;
    write_stamped(&a.out, &stamp_of(a, 0), &session)
}

fn cmd_preprocess(a: &PreprocessArgs) -> Result<()> {
    let session: Session = stage("preprocess", &a.input, read_json(&a.input))?;
    let session = stage(
        "preprocess",
        &a.input,
        preprocess_session(session, &OnaConfig { delta_atn: a.ona_delta }),
    )?;
    let stamp = stamp_of(a, 0);
    if let Some(cfg) = trim_cfg(a.trim, a.level) {
        let post = session.bc_post.as_ref().expect("set by preprocess");
        let points: Vec<SeriesPoint> = (0..post.len())
            .filter_map(|i| {
                post.values[i].map(|value| SeriesPoint {
                    source: session.dataset.clone(),
                    index: i,
                    timestamp: post.time_at(i),
                    value,
                })
            })
            .collect();
        let bounds = stage("preprocess", &a.input, trim_bounds(&points, &cfg).map_err(Error::from))?;
        let outcome = trim_with_bounds(&points, &bounds);
        let mut csv = String::from("index,timestamp,source,value,reason\n");
        for r in &outcome.removed {
            csv.push_str(&format!("{},{},{},{},\"{}\"\n", r.row.index, r.row.timestamp, r.source, r.value, r.reason));
        }
        let audit = a.audit.clone().unwrap_or_else(|| a.out.with_extension("trim.csv"));
        write(&audit, stamp.csv(&csv))?;
    }
    write_stamped(&a.out, &stamp, &session)
}

fn cmd_align(a: &AlignArgs) -> Result<()> {
    let mut session: Session = stage("align", &a.input, read_json(&a.input))?;
    let cfg = ShiftSearchConfig::symmetric(a.max_shift, a.step);
    let r: AlignmentResult = stage("align", &a.input, align_session(&mut session, &cfg))?;
    let stamp = stamp_of(a, 0);
    if let Some(c) = &a.curve {
        write(c, stamp.csv(&r.curve_csv()))?;
    }
    write_stamped(&a.out, &stamp, &session)
}

fn first_pgm(path: &Path) -> Result<PathBuf> {
    if path.is_file() {
        return Ok(path.to_path_buf());
    }
    let mut pgms: Vec<PathBuf> = fs::read_dir(path)
        .map_err(|e| Error::io(path, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("pgm")))
        .collect();
    pgms.sort();
    pgms.into_iter()
        .next()
        .ok_or_else(|| Error::Config(format!("no .pgm frame in {}", path.display())))
}

fn cmd_vision(a: &VisionArgs) -> Result<()> {
    let params = VisionParams::default();
    let still = first_pgm(&a.frames)?;
    let (auto_geom, events, stops) = vision_events(&a.detections, &still, &params)?;
    let geom: LaneGeometry = if a.lanes == "auto" {
        auto_geom
    } else {
        let p = PathBuf::from(&a.lanes);
        let g: LaneGeometry = stage("vision", &p, read_json(&p))?;
        // Re-assign lanes against the supplied geometry.
        let frames = stage(
            "vision",
            &a.detections,
            read_bytes(&a.detections)
                .and_then(|b| crate::ingest::parse_detection_frames(&b).map_err(Error::from)),
        )?;
        let tracks = crate::vision::track_frames(&frames, &params.tracker)?;
        let (e, s) = crate::vision::tracks_to_events(&tracks, Some(&g));
        return finish_vision(a, &g, &e, &s);
    };
    finish_vision(a, &geom, &events, &stops)
}

fn finish_vision(
    a: &VisionArgs,
    geom: &LaneGeometry,
    events: &[crate::ingest::DetectionEvent],
    stops: &[crate::ingest::StopInterval],
) -> Result<()> {
    let lanes = geom.lane_count() as usize;
    let spec = match &a.session {
        Some(p) => {
            let s: Session = stage("vision", p, read_json(p))?;
            BinSpec::covering(s.bc.start, s.bc.end(), a.bin)
        }
        None => {
            let t0 = events.iter().map(|e| e.timestamp).min().unwrap_or(0);
            let t1 = events.iter().map(|e| e.timestamp + 1).max().unwrap_or(t0);
            let t0 = t0.div_euclid(a.bin) * a.bin;
            BinSpec::covering(t0, t1, a.bin)
        }
    };
    let bins = stage("vision", &a.detections, bin_counts(events, stops, &spec, lanes).map_err(Error::from))?;
    let stamp = stamp_of(a, 0);
    if let Some(g) = &a.geometry_out {
        write(g, to_json(geom))?;
    }
    write_stamped(
        &a.out,
        &stamp,
        &CountsDocument {
            lanes,
            bin_seconds: a.bin,
            bins,
        },
    )
}

fn cmd_features(a: &FeaturesArgs) -> Result<()> {
    let session: Session = stage("features", &a.session, read_json(&a.session))?;
    let cfg = FeatureConfig::default();
    let counts = match &a.counts {
        Some(p) => {
            let c: CountsDocument = stage("features", p, read_json(p))?;
            c.bins
        }
        None => stage("features", &a.session, session_counts(&session, cfg.bin_seconds, None))?.bins,
    };
    let target = Target::from(a.target);
    if target == Target::BcPost && session.bc_post.is_none() {
        return Err(Error::Config("target bc-post needs a preprocessed session".into()).in_stage("features", Some(a.session.clone())));
    }
    let (rows, _) = stage(
        "features",
        &a.session,
        crate::pipeline::session_table(&session, &counts, &cfg, target),
    )?;
    let stamp = stamp_of(a, 0);
    if a.csv.is_some() || a.corr.is_some() {
        let sel = stage("features", &a.session, select_features(&rows, true, a.threshold, target))?;
        if let Some(p) = &a.csv {
            write(p, stamp.csv(&write_feature_csv(&rows, &sel.kept)))?;
        }
        if let Some(p) = &a.corr {
            write(p, stamp.csv(&sel.correlation.to_csv()))?;
        }
    }
    write(&a.out, write_feature_rows(&rows))
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let p = prepare(&a.table)?;
    let spec = match a.model {
        ModelArg::Gbt => ModelSpec::Gbt(GbtHyperParams {
            n_estimators: a.trees,
            learning_rate: a.lr,
            max_depth: a.depth,
            lambda: a.lambda,
            ..GbtHyperParams::default()
        }),
        ModelArg::Rf => ModelSpec::Forest(ForestParams {
            n_trees: a.trees,
            max_depth: Some(a.depth),
            ..ForestParams::default()
        }),
        ModelArg::Lr => ModelSpec::Linear,
    };
    let train = p.ds.subset(&p.train);
    let model = stage("train", &a.table.table, spec.fit(&train, a.table.seed).map_err(Error::from))?;
    let stamp = stamp_of(a, a.table.seed);
    write(&a.out, ModelDocument::new(model, a.table.seed, stamp.config_hash).to_json())
}

fn cmd_tune(a: &TuneArgs) -> Result<()> {
    let grid = match a.grid.as_str() {
        "xgb" => ParamGrid::xgb_default(),
        "gb" => ParamGrid::gb_default(),
        "rf" => ParamGrid::rf_default(),
        path => {
            let p = PathBuf::from(path);
            stage("tune", &p, read_json(&p))?
        }
    };
    let p = prepare(&a.table)?;
    let train = p.ds.subset(&p.train);
    let out = stage(
        "tune",
        &a.table.table,
        grid_search::<f64>(&train, &grid.expand(), a.k, a.table.seed).map_err(Error::from),
    )?;
    let stamp = stamp_of(a, a.table.seed);
    if let Some(m) = &a.model_out {
        write(m, ModelDocument::new(out.model.clone(), a.table.seed, stamp.config_hash.clone()).to_json())?;
    }
    #[derive(Serialize)]
    struct TuneDoc<'a> {
        k: usize,
        n_configs: usize,
        best_index: usize,
        best: &'a ModelSpec,
        cv_table: &'a [crate::model::CvRow],
    }
    write_stamped(
        &a.out,
        &stamp,
        &TuneDoc {
            k: a.k,
            n_configs: out.cv_table.len(),
            best_index: out.best_index,
            best: &out.best,
            cv_table: &out.cv_table,
        },
    )
}

#[derive(Debug, Serialize)]
struct EvaluateDoc {
    model: String,
    split: SplitKind,
    features: Vec<String>,
    train_rows: Vec<i64>,
    test_rows: Vec<i64>,
    trimmed_rows: Vec<i64>,
    metrics: Vec<MetricRow>,
    comparison: PairedTest,
}

fn cmd_evaluate(a: &EvaluateArgs) -> Result<()> {
    let doc = load_model(&a.model)?;
    let p = prepare(&a.table)?;
    let names = doc.model.feature_names().to_vec();
    let ds = p.ds.select(&names).ok_or_else(|| {
        Error::Config(format!("table lacks a model feature (model uses {})", names.join(", ")))
            .in_stage("evaluate", Some(a.table.table.clone()))
    })?;
    let train = ds.subset(&p.train);
    let test = ds.subset(&p.split.test);
    let split_name = format!("{:?}", a.table.split).to_lowercase();
    let run = || -> Result<(Vec<MetricRow>, PairedTest)> {
        let baseline = Model::Linear(crate::model::fit_linear(&train)?);
        let errs = |m: &Model<f64>| -> Result<Vec<f64>> {
            Ok(m.predict(&test)?.iter().zip(&test.y).map(|(p, y)| p - y).collect())
        };
        let cmp = compare_models(&errs(&doc.model)?, &errs(&baseline)?)?;
        let mut rows = Vec::new();
        for (name, m) in [(doc.model.kind(), &doc.model), ("lr", &baseline)] {
            for (side, part) in [("train", &train), ("test", &test)] {
                let mut r: EvalReport = metrics(&m.predict(part)?, &part.y)?;
                if side == "test" && name != "lr" {
                    r.p_value = Some(cmp.p);
                    r.comparator = Some("lr".into());
                }
                rows.push(MetricRow {
                    model: name.into(),
                    split: split_name.clone(),
                    side: side.into(),
                    report: r,
                });
            }
        }
        Ok((rows, cmp))
    };
    let (rows, comparison) = stage("evaluate", &a.table.table, run())?;
    let ts = |idx: &[usize]| idx.iter().map(|&i| p.rows[i].timestamp).collect::<Vec<_>>();
    let stamp = stamp_of(a, a.table.seed);
    if let Some(c) = &a.csv {
        write(c, stamp.csv(&metrics_csv(&rows)))?;
    }
    write_stamped(
        &a.report,
        &stamp,
        &EvaluateDoc {
            model: doc.model.kind().into(),
            split: match a.table.split {
                SplitArg::Stratified => SplitKind::Stratified,
                SplitArg::Windowed => SplitKind::Windowed,
            },
            features: names,
            train_rows: ts(&p.train),
            test_rows: ts(&p.split.test),
            trimmed_rows: ts(&p.trimmed),
            metrics: rows,
            comparison,
        },
    )
}

fn parse_rows(spec: &str, n: usize) -> Result<Vec<usize>> {
    if spec == "all" {
        return Ok((0..n).collect());
    }
    spec.split(',')
        .map(|s| {
            let i: usize = s.trim().parse().map_err(|_| Error::Config(format!("bad row id {s:?}")))?;
            if i >= n {
                return Err(Error::Config(format!("row {i} out of range (table has {n})")));
            }
            Ok(i)
        })
        .collect()
}

fn cmd_explain(a: &ExplainArgs) -> Result<()> {
    let doc = load_model(&a.model)?;
    let rows = load_rows(&a.table)?;
    let names = doc.model.feature_names().to_vec();
    let ds: crate::Dataset = stage(
        "explain",
        &a.table,
        crate::features::to_dataset(&rows, &names, Target::from(a.target)).map_err(Error::from),
    )?;
    let ids = parse_rows(&a.rows, ds.n_rows())?;
    let bg = background_sample(&ds, a.background, a.seed);
    let reports: Vec<ShapReport> = stage(
        "explain",
        &a.table,
        explain_table(&doc.model, &ds, Some(&ids), &bg).map_err(Error::from),
    )?;
    let stamp = stamp_of(a, a.seed);
    if let Some(c) = &a.csv {
        write(c, stamp.csv(&beeswarm_csv(&reports)))?;
    }
    #[derive(Serialize)]
    struct ShapDoc<'a> {
        ranking: Vec<(String, f64)>,
        reports: &'a [ShapReport],
    }
    write_stamped(
        &a.out,
        &stamp,
        &ShapDoc {
            ranking: global_importance(&reports),
            reports: &reports,
        },
    )
}

fn cmd_simulate(a: &SimulateArgs) -> Result<()> {
    let mut cfg: ScenarioConfig = match &a.config {
        Some(p) => stage("simulate", p, read_json(p))?,
        None => ScenarioConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let sc = generate_scenario(&cfg)?;
    let files = write_scenario(&sc, &a.out_dir).map_err(|e| Error::io(&a.out_dir, e))?;
    let pc = scenario_pipeline_config(&files, &cfg.dataset, cfg.seed);
    write(&a.out_dir.join("pipeline.json"), to_json(&pc))
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    #[derive(serde::Deserialize)]
    struct Doc<T> {
        #[serde(flatten)]
        stamp: Stamp,
        #[serde(flatten)]
        body: T,
    }
    let rp = a.run_dir.join("report.json");
    let report: Doc<RunReport> = stage("report", &rp, read_json(&rp))?;
    let pp = a.run_dir.join("predictions.json");
    let preds: Doc<Predictions> = stage("report", &pp, read_json(&pp))?;
    let ap = a.run_dir.join("alignment.json");
    let alignment: Option<AlignmentResult> = if ap.exists() {
        let d: Doc<AlignmentResult> = stage("report", &ap, read_json(&ap))?;
        Some(d.body)
    } else {
        None
    };
    let out = a.out_dir.clone().unwrap_or_else(|| a.run_dir.clone());
    let mut art = Artifacts::new(&out, report.stamp)?;
    render_report(&mut art, &report.body, &preds.body, alignment.as_ref())?;
    art.commit_files()?;
    Ok(())
}

fn cmd_run(a: &RunArgs) -> Result<()> {
    let mut cfg = PipelineConfig::load(&a.config).map_err(|e| e.in_stage("config", Some(a.config.clone())))?;
    if let Ok(s) = std::env::var("BCTRACE_SEED") {
        cfg.seed = s
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("BCTRACE_SEED={s:?} is not an unsigned integer")))?;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(d) = &a.out_dir {
        cfg.out_dir = d.clone();
    }
    let out = run_pipeline(&cfg)?;
    let test = out
        .report
        .metrics
        .iter()
        .find(|m| m.side == "test" && m.model != "lr");
    if let Some(m) = test {
        eprintln!(
            "{}: test rmse {:.2}, mae {:.2}, r2 {}; {} artifacts in {}",
            out.report.dataset,
            m.report.rmse,
            m.report.mae,
            m.report.r2.map(|r| format!("{r:.3}")).unwrap_or_else(|| "n/a".into()),
            out.artifacts.len(),
            cfg.out_dir.display()
        );
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| Error::Internal(e.to_string()))?;
    }
    match &cli.command {
        Command::Ingest(a) => cmd_ingest(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Align(a) => cmd_align(a),
        Command::Vision(a) => cmd_vision(a),
        Command::Features(a) => cmd_features(a),
        Command::Train(a) => cmd_train(a),
        Command::Tune(a) => cmd_tune(a),
        Command::Evaluate(a) => cmd_evaluate(a),
        Command::Explain(a) => cmd_explain(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Report(a) => cmd_report(a),
        Command::Run(a) => cmd_run(a),
    }
}

/// Runs the parsed command and maps the outcome to a process exit code.
pub fn main_with(cli: Cli) -> i32 {
    match execute(&cli) {
        Ok(()) => crate::error::EXIT_OK,
        Err(e) => {
            let top = e.to_string();
            eprintln!("error: {top}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                let m = s.to_string();
                if !top.contains(&m) {
                    eprintln!("  caused by: {m}");
                }
                src = s.source();
            }
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn parses_documented_invocations() {
        for argv in [
            "bctrace preprocess --in s.json --ona-delta 0.05 --trim local --out p.json",
            "bctrace align --in p.json --max-shift 600 --out a.json --curve c.csv",
            "bctrace train --table t.json --model gbt --lr 0.05 --depth 5 --trees 50 --seed 7 --out m.json",
            "bctrace tune --table t.json --grid xgb --k 5 --out g.json",
            "bctrace evaluate --table t.json --split windowed --model m.json --report r.json",
            "bctrace explain --model m.json --table t.json --rows 0,3 --out shap.json",
            "bctrace --threads 2 run --config pipeline.json",
        ] {
            Cli::try_parse_from(argv.split_whitespace()).unwrap_or_else(|e| panic!("{argv}: {e}"));
        }
    }

    #[test]
    fn row_ids() {
        assert_eq!(parse_rows("all", 3).unwrap(), vec![0, 1, 2]);
        assert_eq!(parse_rows("2, 0", 3).unwrap(), vec![2, 0]);
        assert!(parse_rows("5", 3).is_err());
        assert!(parse_rows("x", 3).is_err());
    }
}
