//! End-to-end run: ingest, preprocess, align, features, split, train,
//! evaluate, explain and report. Each stage is also callable on its own.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{apply_shift, find_optimal_shift, AlignmentResult, ShiftSearchConfig};
use crate::bc_signal::{ona_filter, trim_outliers, OnaConfig, Removed, TrimConfig};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::eval::{compare_models, kfold_cv, metrics, stratified_split, windowed_split, PairedTest, Split, SplitKind, SplitSpec};
use crate::explain::{background_sample, beeswarm_csv, explain_table, global_importance, ShapReport};
use crate::features::{
    build_feature_table, default_feature_names, filter_correlated, to_dataset, write_feature_csv, write_feature_rows,
    BuildInputs, CorrelationReport, DroppedFeature, FeatureConfig, FeatureRow, RawTarget, Target,
};
use crate::ingest::{
    parse_ae51_csv, parse_detection_frames, parse_event_log, parse_traffic, parse_weather, resample_to_grid,
    AppliedShift, BcSample, Session, StopInterval,
};
use crate::model::{fit_gbt, fit_linear, grid_search, CvRow, GbtHyperParams, Model, ModelDocument, ModelSpec, ParamGrid, Predictor};
use crate::report::{importance_csv, line_chart_svg, metrics_csv, MetricRow, Series, Stamp};
use crate::vision::{
    activity_from_events, bin_counts, detect_lanes, track_frames, tracks_to_events, BinCounts, BinSpec, CannyConfig,
    GrayImage, HoughConfig, LaneGeometry, LaneSelectConfig, TrackerConfig,
};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InputPaths {
    pub ae51: PathBuf,
    /// Plain-text event log; alternative to `detections`.
    #[serde(default)]
    pub events: Option<PathBuf>,
    /// JSON list of stop intervals accompanying `events`.
    #[serde(default)]
    pub stops: Option<PathBuf>,
    /// Per-frame detection boxes; requires `lane_image`.
    #[serde(default)]
    pub detections: Option<PathBuf>,
    #[serde(default)]
    pub lane_image: Option<PathBuf>,
    pub weather: PathBuf,
    #[serde(default)]
    pub traffic: Option<PathBuf>,
}

impl InputPaths {
    fn resolve(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.ae51);
        fix(&mut self.weather);
        for p in [&mut self.events, &mut self.stops, &mut self.detections, &mut self.lane_image, &mut self.traffic]
            .into_iter()
            .flatten()
        {
            fix(p);
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VisionParams {
    pub canny: CannyConfig,
    pub hough: HoughConfig,
    pub lanes: LaneSelectConfig,
    pub tracker: TrackerConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageToggles {
    pub ona: bool,
    pub align: bool,
    pub trim: bool,
    pub explain: bool,
}

impl Default for StageToggles {
    fn default() -> Self {
        Self {
            ona: true,
            align: true,
            trim: true,
            explain: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExplainParams {
    /// Test rows explained, earliest first.
    pub max_rows: usize,
    pub background: usize,
}

impl Default for ExplainParams {
    fn default() -> Self {
        Self {
            max_rows: 200,
            background: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    #[serde(default = "default_dataset")]
    pub dataset: String,
    pub inputs: InputPaths,
    #[serde(default)]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub stages: StageToggles,
    #[serde(default)]
    pub ona: OnaConfig,
    #[serde(default)]
    pub trim: TrimConfig,
    #[serde(default)]
    pub shift: ShiftSearchConfig,
    #[serde(default)]
    pub features: FeatureConfig,
    #[serde(default = "default_corr")]
    pub correlation_threshold: f64,
    #[serde(default)]
    pub target: Target,
    #[serde(default = "yes")]
    pub use_traffic: bool,
    #[serde(default)]
    pub split: SplitSpec,
    #[serde(default)]
    pub gbt: GbtHyperParams,
    /// Replaces `gbt` with the best boosting configuration found by k-fold
    /// search on the training rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tune: Option<ParamGrid>,
    #[serde(default = "default_folds")]
    pub cv_folds: usize,
    #[serde(default)]
    pub vision: VisionParams,
    #[serde(default)]
    pub explain: ExplainParams,
    #[serde(default)]
    pub seed: u64,
}

fn default_dataset() -> String {
    "site".into()
}
fn default_corr() -> f64 {
    0.70
}
fn yes() -> bool {
    true
}
fn default_folds() -> usize {
    5
}

impl PipelineConfig {
    pub fn new(inputs: InputPaths, out_dir: PathBuf) -> Self {
        Self {
            dataset: default_dataset(),
            inputs,
            out_dir,
            stages: StageToggles::default(),
            ona: OnaConfig::default(),
            trim: TrimConfig::default(),
            shift: ShiftSearchConfig::default(),
            features: FeatureConfig::default(),
            correlation_threshold: default_corr(),
            target: Target::default(),
            use_traffic: true,
            split: SplitSpec::default(),
            gbt: GbtHyperParams::default(),
            tune: None,
            cv_folds: default_folds(),
            vision: VisionParams::default(),
            explain: ExplainParams::default(),
            seed: 0,
        }
    }

    /// Reads a config; relative paths are taken from the config's folder.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: Self = read_json(path)?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.inputs.resolve(base);
        if cfg.out_dir.is_relative() {
            cfg.out_dir = base.join(&cfg.out_dir);
        }
        Ok(cfg)
    }

    /// SHA-256 of the config with the output folder blanked and input paths
    /// reduced to file names, so relocating a run does not change it.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let name = |p: &mut PathBuf| {
            if let Some(n) = p.file_name() {
                *p = PathBuf::from(n);
            }
        };
        name(&mut c.inputs.ae51);
        name(&mut c.inputs.weather);
        for p in [
            &mut c.inputs.events,
            &mut c.inputs.stops,
            &mut c.inputs.detections,
            &mut c.inputs.lane_image,
            &mut c.inputs.traffic,
        ]
        .into_iter()
        .flatten()
        {
            name(p);
        }
        hash_json(&c)
    }

    pub fn stamp(&self) -> Stamp {
        Stamp {
            config_hash: self.hash(),
            seed: self.seed,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.target == Target::BcPost && !self.stages.ona {
            return Err(Error::Config("target bc_post needs the ona stage".into()));
        }
        if !(self.correlation_threshold > 0.0 && self.correlation_threshold <= 1.0) {
            return Err(Error::Config(format!("correlation_threshold {}", self.correlation_threshold)));
        }
        if self.split.kind == SplitKind::Kfold {
            return Err(Error::Config("the hold-out split must be stratified or windowed".into()));
        }
        self.gbt.validate()?;
        match &self.tune {
            None | Some(ParamGrid::Xgb { .. } | ParamGrid::Gb { .. }) => {}
            Some(_) => return Err(Error::Config("tune accepts xgb or gb grids only".into())),
        }
        if self.tune.is_some() && self.cv_folds < 2 {
            return Err(Error::Config("tune needs cv_folds >= 2".into()));
        }
        Ok(())
    }
}

pub fn hash_json<T: Serialize>(v: &T) -> String {
    let text = serde_json::to_string(v).expect("config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

// ---------------------------------------------------------------------------
// File helpers
// ---------------------------------------------------------------------------

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    serde_json::from_slice(&read_bytes(path)?).map_err(|e| Error::json(path, e))
}

pub fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("plain data serializes");
    s.push('\n');
    s
}

/// JSON object carrying the run stamp next to the payload's own fields.
#[derive(Debug, Serialize, Deserialize)]
pub struct Stamped<T> {
    #[serde(flatten)]
    pub stamp: Stamp,
    #[serde(flatten)]
    pub body: T,
}

/// Collects a run's outputs under `<name>.partial` and renames them all
/// once the run succeeds; a failed run leaves only `.partial` files.
pub struct Artifacts {
    dir: PathBuf,
    pub stamp: Stamp,
    written: Vec<(String, Vec<u8>)>,
}

impl Artifacts {
    pub fn new(dir: &Path, stamp: Stamp) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            stamp,
            written: Vec::new(),
        })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    pub fn put(&mut self, name: &str, bytes: impl Into<Vec<u8>>) -> Result<()> {
        let bytes = bytes.into();
        let p = self.dir.join(format!("{name}.partial"));
        fs::write(&p, &bytes).map_err(|e| Error::io(&p, e))?;
        self.written.push((name.to_string(), bytes));
        Ok(())
    }

    pub fn put_csv(&mut self, name: &str, body: &str) -> Result<()> {
        let s = self.stamp.csv(body);
        self.put(name, s)
    }

    pub fn put_stamped<T: Serialize>(&mut self, name: &str, body: &T) -> Result<()> {
        let s = to_json(&Stamped {
            stamp: self.stamp.clone(),
            body,
        });
        self.put(name, s)
    }

    /// Writes `artifacts.json` (name and SHA-256 of every output) and
    /// drops the `.partial` suffixes.
    pub fn commit(mut self) -> Result<Vec<PathBuf>> {
        let index: BTreeMap<String, String> = self
            .written
            .iter()
            .map(|(n, b)| (n.clone(), hex::encode(Sha256::digest(b))))
            .collect();
        #[derive(Serialize)]
        struct Index {
            artifacts: BTreeMap<String, String>,
        }
        self.put_stamped("artifacts.json", &Index { artifacts: index })?;
        self.commit_files()
    }

    /// Drops the `.partial` suffixes without writing an index.
    pub fn commit_files(self) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for (name, _) in &self.written {
            let from = self.dir.join(format!("{name}.partial"));
            let to = self.dir.join(name);
            fs::rename(&from, &to).map_err(|e| Error::io(&from, e))?;
            out.push(to);
        }
        Ok(out)
    }
}

// ---------------------------------------------------------------------------
// Stages
// ---------------------------------------------------------------------------

/// Most frequent positive gap between consecutive samples.
pub fn infer_step(samples: &[BcSample]) -> i64 {
    let mut freq: BTreeMap<i64, usize> = BTreeMap::new();
    for w in samples.windows(2) {
        let d = w[1].timestamp - w[0].timestamp;
        if d > 0 {
            *freq.entry(d).or_default() += 1;
        }
    }
    freq.into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
        .map(|(d, _)| d)
        .unwrap_or(1)
}

fn staged<T>(stage: &'static str, input: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(stage, Some(input.to_path_buf())))
}

/// Lane geometry from a still frame, then tracks from per-frame boxes.
pub fn vision_events(
    frames_path: &Path,
    lane_image: &Path,
    params: &VisionParams,
) -> Result<(LaneGeometry, Vec<crate::ingest::DetectionEvent>, Vec<StopInterval>)> {
    let img = staged("vision", lane_image, GrayImage::read_pgm(lane_image).map_err(Error::from))?;
    let geom = staged(
        "vision",
        lane_image,
        detect_lanes(&[img], &params.canny, &params.hough, &params.lanes).map_err(Error::from),
    )?;
    let frames = staged(
        "vision",
        frames_path,
        read_bytes(frames_path).and_then(|b| parse_detection_frames(&b).map_err(Error::from)),
    )?;
    let tracks = staged("vision", frames_path, track_frames(&frames, &params.tracker).map_err(Error::from))?;
    let (events, stops) = tracks_to_events(&tracks, Some(&geom));
    Ok((geom, events, stops))
}

/// Reads every input into one session. Events come from the detection
/// boxes when given, else from the event log.
pub fn load_session(dataset: &str, inputs: &InputPaths, vision: &VisionParams) -> Result<(Session, Option<LaneGeometry>)> {
    let ae51 = &inputs.ae51;
    let samples = staged("ingest", ae51, read_bytes(ae51).and_then(|b| parse_ae51_csv(&b).map_err(Error::from)))?;
    let bc = staged("ingest", ae51, resample_to_grid(&samples, infer_step(&samples)).map_err(Error::from))?;
    let w = &inputs.weather;
    let weather = staged("ingest", w, read_bytes(w).and_then(|b| parse_weather(&b).map_err(Error::from)))?;
    let traffic = match &inputs.traffic {
        Some(p) => staged("ingest", p, read_bytes(p).and_then(|b| parse_traffic(&b).map_err(Error::from)))?,
        None => Vec::new(),
    };
    let (geom, events, stops) = match (&inputs.detections, &inputs.lane_image, &inputs.events) {
        (Some(d), Some(img), _) => {
            let (g, e, s) = vision_events(d, img, vision)?;
            (Some(g), e, s)
        }
        (Some(_), None, _) => {
            return Err(Error::Config("detections need a lane_image".into()).in_stage("ingest", None));
        }
        (None, _, Some(p)) => {
            let events = staged("ingest", p, read_bytes(p).and_then(|b| parse_event_log(&b).map_err(Error::from)))?;
            let stops: Vec<StopInterval> = match &inputs.stops {
                Some(s) => staged("ingest", s, read_json(s))?,
                None => Vec::new(),
            };
            (None, events, stops)
        }
        (None, _, None) => {
            return Err(Error::Config("either events or detections must be given".into()).in_stage("ingest", None));
        }
    };
    Ok((
        Session {
            dataset: dataset.to_string(),
            bc,
            bc_post: None,
            events,
            stops,
            weather,
            traffic,
            alignment: None,
        },
        geom,
    ))
}

/// ONA-smoothed copy of the raw series as the post-processed target.
pub fn preprocess_session(mut s: Session, ona: &OnaConfig) -> Result<Session> {
    s.bc_post = Some(ona_filter(&s.bc, ona)?);
    Ok(s)
}

/// Lag between raw BC and first-sighting activity; both BC series are
/// re-timed by it.
pub fn align_session(s: &mut Session, cfg: &ShiftSearchConfig) -> Result<AlignmentResult> {
    let act = activity_from_events(&s.events, s.bc.start, s.bc.end(), cfg.resample_step.max(1));
    let r = find_optimal_shift(&s.bc, &act, cfg)?;
    s.bc = apply_shift(&s.bc, r.optimal_shift)?;
    if let Some(p) = &s.bc_post {
        s.bc_post = Some(apply_shift(p, r.optimal_shift)?);
    }
    s.alignment = Some(AppliedShift {
        shift_seconds: r.optimal_shift,
        max_similarity: r.max_similarity,
    });
    Ok(r)
}

/// Number of lanes referenced by events or stops.
pub fn session_lanes(s: &Session) -> usize {
    s.events
        .iter()
        .filter_map(|e| e.lane)
        .chain(s.stops.iter().filter_map(|st| st.lane))
        .max()
        .unwrap_or(0) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CountsDocument {
    pub lanes: usize,
    pub bin_seconds: i64,
    pub bins: Vec<BinCounts>,
}

/// Per-bin counts over the span of the (possibly re-timed) BC series.
pub fn session_counts(s: &Session, bin_seconds: i64, lanes: Option<usize>) -> Result<CountsDocument> {
    let lanes = lanes.unwrap_or_else(|| session_lanes(s));
    let spec = BinSpec::covering(s.bc.start, s.bc.end(), bin_seconds);
    Ok(CountsDocument {
        lanes,
        bin_seconds,
        bins: bin_counts(&s.events, &s.stops, &spec, lanes)?,
    })
}

pub fn session_table(
    s: &Session,
    counts: &[BinCounts],
    cfg: &FeatureConfig,
    target: Target,
) -> Result<(Vec<FeatureRow>, crate::features::BuildReport)> {
    Ok(build_feature_table(
        &BuildInputs {
            dataset: &s.dataset,
            counts,
            weather: &s.weather,
            traffic: &s.traffic,
            bc_raw: &s.bc,
            bc_post: s.bc_post.as_ref(),
            target,
        },
        cfg,
    )?)
}

/// Candidate features for a table; traffic only when every row has it.
pub fn candidate_features(rows: &[FeatureRow], use_traffic: bool) -> Vec<String> {
    let lanes = rows.first().map(|r| r.lanes()).unwrap_or(0);
    let traffic = use_traffic && !rows.is_empty() && rows.iter().all(|r| r.traffic.is_some());
    default_feature_names(lanes, traffic)
}

pub struct FeatureSelection {
    pub candidates: Vec<String>,
    pub kept: Vec<String>,
    pub correlation: CorrelationReport,
    /// The table restricted to `kept`.
    pub dataset: Dataset<f64>,
}

/// Candidate columns minus those removed by the correlation filter, which
/// is computed on the whole table.
pub fn select_features(rows: &[FeatureRow], use_traffic: bool, threshold: f64, target: Target) -> Result<FeatureSelection> {
    let candidates = candidate_features(rows, use_traffic);
    let full: Dataset<f64> = to_dataset(rows, &candidates, target)?;
    let (dataset, correlation) = filter_correlated(&full, threshold)?;
    let kept = dataset.names.clone();
    Ok(FeatureSelection {
        candidates,
        kept,
        correlation,
        dataset,
    })
}

pub fn split_table<T: crate::Scalar>(ds: &Dataset<T>, spec: &SplitSpec) -> Result<Split> {
    Ok(match spec.kind {
        SplitKind::Windowed => windowed_split(&ds.groups, &ds.timestamps, spec)?,
        _ => stratified_split(&ds.y, spec)?,
    })
}

/// Removes outlying targets from the training rows only.
pub fn trim_train_rows(
    rows: &[FeatureRow],
    train: &[usize],
    cfg: &TrimConfig,
    target: Target,
) -> Result<(Vec<usize>, Vec<(usize, f64, String)>)> {
    let (kept, removed): (Vec<usize>, Vec<(usize, f64, String)>) = match target {
        Target::BcPost => {
            let sub: Vec<FeatureRow> = train.iter().map(|&i| rows[i].clone()).collect();
            let out = trim_outliers(&sub, cfg)?;
            split_outcome(train, out.removed)
        }
        Target::BcRaw => {
            let sub: Vec<RawTarget> = train.iter().map(|&i| RawTarget(rows[i].clone())).collect();
            let out = trim_outliers(&sub, cfg)?;
            split_outcome(train, out.removed)
        }
    };
    Ok((kept, removed))
}

fn split_outcome<R>(train: &[usize], removed: Vec<Removed<R>>) -> (Vec<usize>, Vec<(usize, f64, String)>) {
    let gone: Vec<(usize, f64, String)> = removed.into_iter().map(|r| (train[r.index], r.value, r.reason)).collect();
    let kept = train
        .iter()
        .copied()
        .filter(|i| !gone.iter().any(|(g, _, _)| g == i))
        .collect();
    (kept, gone)
}

// ---------------------------------------------------------------------------
// Full run
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureSummary {
    pub candidates: Vec<String>,
    pub kept: Vec<String>,
    pub dropped: Vec<DroppedFeature>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvSummary {
    pub k: usize,
    pub mean_rmse: f64,
    pub mean_mae: f64,
    pub mean_r2: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub dataset: String,
    pub lanes: usize,
    pub bc_step: i64,
    pub alignment: Option<AppliedShift>,
    pub n_rows: usize,
    pub rows_without_target: usize,
    pub split: SplitKind,
    pub n_train: usize,
    pub n_test: usize,
    pub n_trimmed: usize,
    pub features: FeatureSummary,
    pub metrics: Vec<MetricRow>,
    pub comparison: PairedTest,
    pub cv: Option<CvSummary>,
    pub shap_ranking: Vec<(String, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub timestamp: i64,
    pub side: String,
    pub observed: f64,
    pub gbt: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictions {
    pub rows: Vec<PredictionRow>,
}

fn split_name(k: SplitKind) -> &'static str {
    match k {
        SplitKind::Stratified => "stratified",
        SplitKind::Windowed => "windowed",
        SplitKind::Kfold => "kfold",
    }
}

/// Charts and tables derived from a finished run.
pub fn render_report(
    art: &mut Artifacts,
    report: &RunReport,
    preds: &Predictions,
    alignment: Option<&AlignmentResult>,
) -> Result<()> {
    art.put_csv("metrics.csv", &metrics_csv(&report.metrics))?;
    art.put_csv("shap_importance.csv", &importance_csv(&report.shap_ranking))?;
    let t0 = preds.rows.first().map(|r| r.timestamp).unwrap_or(0);
    let pts = |f: fn(&PredictionRow) -> f64| -> Vec<(f64, f64)> {
        preds.rows.iter().map(|r| ((r.timestamp - t0) as f64 / 60.0, f(r))).collect()
    };
    let series = vec![
        Series {
            name: "observed".into(),
            points: pts(|r| r.observed),
        },
        Series {
            name: "gbt".into(),
            points: pts(|r| r.gbt),
        },
        Series {
            name: "linear".into(),
            points: pts(|r| r.lr),
        },
    ];
    art.put(
        "observed_vs_predicted.svg",
        line_chart_svg(
            &format!("{}: observed and predicted BC", report.dataset),
            "minutes from first bin",
            "BC (ng/m3)",
            &series,
            &art.stamp.clone(),
        ),
    )?;
    if let Some(a) = alignment {
        let curve = Series {
            name: "similarity".into(),
            points: a.similarity_curve.iter().map(|&(d, v)| (d as f64, v)).collect(),
        };
        art.put(
            "similarity_curve.svg",
            line_chart_svg("lag search", "shift (s)", "cosine similarity", &[curve], &art.stamp.clone()),
        )?;
    }
    Ok(())
}

pub struct RunOutcome {
    pub report: RunReport,
    pub artifacts: Vec<PathBuf>,
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunOutcome> {
    cfg.validate()?;
    let mut art = Artifacts::new(&cfg.out_dir, cfg.stamp())?;

    let (session, geom) = load_session(&cfg.dataset, &cfg.inputs, &cfg.vision)?;
    if let Some(g) = &geom {
        art.put_stamped("lanes.json", g)?;
    }
    let bc_step = session.bc.step;
    let mut session = if cfg.stages.ona {
        preprocess_session(session, &cfg.ona).map_err(|e| e.in_stage("preprocess", None))?
    } else {
        session
    };
    let alignment = if cfg.stages.align {
        let r = align_session(&mut session, &cfg.shift).map_err(|e| e.in_stage("align", None))?;
        art.put_stamped("alignment.json", &r)?;
        art.put_csv("similarity_curve.csv", &r.curve_csv())?;
        Some(r)
    } else {
        None
    };
    art.put_stamped("session.json", &session)?;

    let lanes = geom.as_ref().map(|g| g.lane_count() as usize);
    let counts = session_counts(&session, cfg.features.bin_seconds, lanes).map_err(|e| e.in_stage("features", None))?;
    art.put_stamped("counts.json", &counts)?;
    let (rows, build) =
        session_table(&session, &counts.bins, &cfg.features, cfg.target).map_err(|e| e.in_stage("features", None))?;
    art.put("table.json", write_feature_rows(&rows))?;
    let sel = select_features(&rows, cfg.use_traffic, cfg.correlation_threshold, cfg.target)
        .map_err(|e| e.in_stage("features", None))?;
    art.put_csv("correlation.csv", &sel.correlation.to_csv())?;
    art.put_csv("table.csv", &write_feature_csv(&rows, &sel.kept))?;
    let ds = sel.dataset;
    let mut split_spec = cfg.split;
    split_spec.seed = cfg.seed;

    let split = split_table(&ds, &split_spec).map_err(|e| e.in_stage("split", None))?;
    let (train_idx, trimmed) = if cfg.stages.trim {
        trim_train_rows(&rows, &split.train, &cfg.trim, cfg.target).map_err(|e| e.in_stage("split", None))?
    } else {
        (split.train.clone(), Vec::new())
    };
    #[derive(Serialize)]
    struct SplitDoc<'a> {
        kind: SplitKind,
        train: &'a [usize],
        test: &'a [usize],
        trimmed: Vec<usize>,
    }
    art.put_stamped(
        "split.json",
        &SplitDoc {
            kind: cfg.split.kind,
            train: &split.train,
            test: &split.test,
            trimmed: trimmed.iter().map(|t| t.0).collect(),
        },
    )?;
    let mut audit = String::from("row,timestamp,value,reason\n");
    for (i, v, why) in &trimmed {
        audit.push_str(&format!("{i},{},{v},\"{why}\"\n", rows[*i].timestamp));
    }
    art.put_csv("trimmed.csv", &audit)?;

    let train = ds.subset(&train_idx);
    let test = ds.subset(&split.test);
    let mut fit = || -> Result<(Model<f64>, ModelSpec)> {
        Ok(match &cfg.tune {
        None => (Model::Gbt(fit_gbt(&train, &cfg.gbt, cfg.seed)?), ModelSpec::Gbt(cfg.gbt)),
        Some(grid) => {
            let out = grid_search(&train, &grid.expand(), cfg.cv_folds, cfg.seed)?;
            art.put_stamped(
                "tuning.json",
                &TuningDoc {
                    best_index: out.best_index,
                    best: out.best,
                    cv_table: out.cv_table,
                },
            )?;
            (out.model, out.best)
        }
        })
    };
    let (gbt, spec) = fit().map_err(|e| e.in_stage("train", None))?;
    let lr = fit_linear(&train).map_err(|e| Error::from(e).in_stage("train", None))?;
    let lr = Model::Linear(lr);
    art.put("model.json", ModelDocument::new(gbt.clone(), cfg.seed, art.stamp.config_hash.clone()).to_json())?;
    art.put("baseline.json", ModelDocument::new(lr.clone(), cfg.seed, art.stamp.config_hash.clone()).to_json())?;

    let evaluate = || -> Result<(Vec<MetricRow>, PairedTest, Option<CvSummary>)> {
        let sname = split_name(cfg.split.kind).to_string();
        let mut out = Vec::new();
        let pg = gbt.predict(&test)?;
        let pl = lr.predict(&test)?;
        let eg: Vec<f64> = pg.iter().zip(&test.y).map(|(p, y)| p - y).collect();
        let el: Vec<f64> = pl.iter().zip(&test.y).map(|(p, y)| p - y).collect();
        let cmp = compare_models(&eg, &el)?;
        for (name, m) in [(gbt.kind(), &gbt), ("lr", &lr)] {
            for (side, part) in [("train", &train), ("test", &test)] {
                let mut r = metrics(&m.predict(part)?, &part.y)?;
                if side == "test" && name != "lr" {
                    r.p_value = Some(cmp.p);
                    r.comparator = Some("lr".into());
                }
                out.push(MetricRow {
                    model: name.to_string(),
                    split: sname.clone(),
                    side: side.to_string(),
                    report: r,
                });
            }
        }
        let cv = if cfg.cv_folds >= 2 && train.n_rows() >= cfg.cv_folds {
            let r = kfold_cv(&train, cfg.cv_folds, cfg.seed, |d| spec.fit(d, cfg.seed))?;
            Some(CvSummary {
                k: cfg.cv_folds,
                mean_rmse: r.mean_rmse,
                mean_mae: r.mean_mae,
                mean_r2: r.mean_r2,
            })
        } else {
            None
        };
        Ok((out, cmp, cv))
    };
    let (metric_rows, comparison, cv) = evaluate().map_err(|e| e.in_stage("evaluate", None))?;
    art.put_stamped(
        "metrics.json",
        &MetricsDoc {
            metrics: metric_rows.clone(),
            comparison: comparison.clone(),
            cv: cv.clone(),
        },
    )?;

    let mut pred_rows = Vec::new();
    for (side, idx) in [("train", &train_idx), ("test", &split.test)] {
        for &i in idx.iter() {
            pred_rows.push(PredictionRow {
                timestamp: ds.timestamps[i],
                side: side.to_string(),
                observed: ds.y[i],
                gbt: gbt.predict_row(&ds.x[i]),
                lr: lr.predict_row(&ds.x[i]),
            });
        }
    }
    pred_rows.sort_by_key(|r| r.timestamp);
    let preds = Predictions { rows: pred_rows };
    art.put_stamped("predictions.json", &preds)?;

    let shap_ranking = if cfg.stages.explain {
        let explain = || -> Result<Vec<ShapReport>> {
            let bg = background_sample(&train, cfg.explain.background, cfg.seed);
            let rows: Vec<usize> = (0..test.n_rows().min(cfg.explain.max_rows)).collect();
            Ok(explain_table(&gbt, &test, Some(&rows), &bg)?)
        };
        let reports = explain().map_err(|e| e.in_stage("explain", None))?;
        #[derive(Serialize)]
        struct ShapDoc<'a> {
            reports: &'a [ShapReport],
        }
        art.put_stamped("shap.json", &ShapDoc { reports: &reports })?;
        art.put_csv("shap_beeswarm.csv", &beeswarm_csv(&reports))?;
        global_importance(&reports)
    } else {
        Vec::new()
    };

    let report = RunReport {
        dataset: cfg.dataset.clone(),
        lanes: counts.lanes,
        bc_step,
        alignment: session.alignment.clone(),
        n_rows: rows.len(),
        rows_without_target: build.without_target.len(),
        split: cfg.split.kind,
        n_train: train_idx.len(),
        n_test: split.test.len(),
        n_trimmed: trimmed.len(),
        features: FeatureSummary {
            candidates: sel.candidates,
            kept: sel.kept,
            dropped: sel.correlation.dropped.clone(),
        },
        metrics: metric_rows,
        comparison,
        cv,
        shap_ranking,
    };
    render_report(&mut art, &report, &preds, alignment.as_ref())?;
    art.put_stamped("report.json", &report)?;
    let artifacts = art.commit()?;
    Ok(RunOutcome { report, artifacts })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuningDoc {
    pub best_index: usize,
    pub best: ModelSpec,
    pub cv_table: Vec<CvRow>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsDoc {
    pub metrics: Vec<MetricRow>,
    pub comparison: PairedTest,
    pub cv: Option<CvSummary>,
}

/// Config for a scenario written by [`crate::synth::write_scenario`].
pub fn scenario_pipeline_config(files: &crate::synth::ScenarioFiles, dataset: &str, seed: u64) -> PipelineConfig {
    let name = |p: &Path| PathBuf::from(p.file_name().expect("file name"));
    let inputs = InputPaths {
        ae51: name(&files.ae51),
        events: Some(name(&files.events)),
        stops: Some(name(&files.stops)),
        detections: files.detections.as_deref().map(name),
        lane_image: files.detections.as_ref().map(|_| name(&files.lane_image)),
        weather: name(&files.weather),
        traffic: Some(name(&files.traffic)),
    };
    let mut cfg = PipelineConfig::new(inputs, PathBuf::from("run"));
    cfg.dataset = dataset.to_string();
    cfg.seed = seed;
    cfg
}
