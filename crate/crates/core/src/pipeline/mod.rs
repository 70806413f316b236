//! Split / train / eval / search orchestration over an output directory.
//!
//! Training follows a two-stage protocol: stage 1 fits on the inner-train
//! classes and picks the stacking constant on the validation classes;
//! stage 2 refits on every training sample with all seen classes.

mod config;
mod search;

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use config::{GammaKeyword, GammaSetting, RunConfig};
pub use search::{best_trial, SearchSpace, TrialRecord};

use crate::attributes::{compute_attributes, to_csv, AttributeVector};
use crate::dataset::{load_ucr_files, make_gzsl_split, znormalize, Dataset, GzslSplit};
use crate::embedder::{train_embedder, EmbedderModel};
use crate::error::{Error, Result};
use crate::gzsl_model::{
    build_input, train_gzsl, AttributeStandardizer, ClassLayout, GzslModel, ModelSidecar,
};
use crate::metrics::{ausuc_sweep, evaluate, EvalReport, SUCurve};
use crate::numcore::{container, rng_for, ParamSet};

const STAGE1_ENCODER_STREAM: u64 = 10;
const STAGE1_MODEL_STREAM: u64 = 11;
const STAGE2_ENCODER_STREAM: u64 = 20;
const STAGE2_MODEL_STREAM: u64 = 21;
const SEARCH_STREAM: u64 = 30;

/// Writes to a sibling temp file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid("write_atomic", format!("{} has no file name", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.tmp{}",
        name.to_string_lossy(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

fn read_required(path: &Path) -> Result<String> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    Ok(fs::read_to_string(path)?)
}

/// File names inside an output directory.
#[derive(Debug, Clone)]
pub struct Artifacts {
    pub dir: PathBuf,
}

impl Artifacts {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Artifacts { dir: dir.into() }
    }
    pub fn config(&self) -> PathBuf {
        self.dir.join("config.json")
    }
    pub fn split(&self) -> PathBuf {
        self.dir.join("split.json")
    }
    pub fn encoder(&self) -> PathBuf {
        self.dir.join("encoder.bin")
    }
    pub fn model(&self) -> PathBuf {
        self.dir.join("model.bin")
    }
    pub fn sidecar(&self) -> PathBuf {
        self.dir.join("model.json")
    }
    pub fn embed_curve(&self) -> PathBuf {
        self.dir.join("embed_curve.csv")
    }
    pub fn gzsl_curve(&self) -> PathBuf {
        self.dir.join("gzsl_curve.csv")
    }
    pub fn validation(&self) -> PathBuf {
        self.dir.join("validation.json")
    }
    pub fn metrics(&self) -> PathBuf {
        self.dir.join("metrics.json")
    }
    pub fn sweep_csv(&self) -> PathBuf {
        self.dir.join("sweep.csv")
    }
    pub fn sweep_svg(&self) -> PathBuf {
        self.dir.join("sweep.svg")
    }
    pub fn attributes(&self) -> PathBuf {
        self.dir.join("attributes.csv")
    }
    pub fn trials(&self) -> PathBuf {
        self.dir.join("search").join("trials.json")
    }
    pub fn best_config(&self) -> PathBuf {
        self.dir.join("search").join("best_config.json")
    }
}

/// Dataset plus per-series attributes, after optional z-normalization.
struct Prepared {
    ds: Dataset,
    attrs: Vec<AttributeVector>,
}

fn load_dataset(cfg: &RunConfig) -> Result<Dataset> {
    if cfg.dataset.is_empty() {
        return Err(Error::Config("no dataset files configured".into()));
    }
    let ds = load_ucr_files(&cfg.dataset)?;
    Ok(if cfg.normalize { znormalize(&ds) } else { ds })
}

fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let ds = load_dataset(cfg)?;
    let attrs = ds
        .series
        .iter()
        .map(|s| compute_attributes(&s.values, cfg.apen()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared { ds, attrs })
}

fn load_split(art: &Artifacts, ds: &Dataset) -> Result<GzslSplit> {
    let split = GzslSplit::from_json(&read_required(&art.split())?)?;
    split.validate(&ds.labels())?;
    Ok(split)
}

/// Model inputs for the series at `idx`.
fn inputs(
    data: &Prepared,
    mode: crate::gzsl_model::RunMode,
    encoder: Option<&EmbedderModel>,
    standardizer: Option<&AttributeStandardizer>,
    idx: &[usize],
) -> Result<Vec<Vec<f64>>> {
    let embeddings = match encoder {
        Some(e) if mode.uses_embedder() => {
            let batch: Vec<&[f64]> = idx.iter().map(|&i| data.ds.series[i].values.as_slice()).collect();
            Some(e.embed_batch(&batch)?)
        }
        _ => None,
    };
    idx.iter()
        .enumerate()
        .map(|(k, &i)| {
            build_input(
                mode,
                embeddings.as_ref().map(|e| e[k].as_slice()),
                &data.ds.series[i].values,
                &data.attrs[i],
                standardizer,
            )
        })
        .collect()
}

struct StageOutput {
    encoder: Option<EmbedderModel>,
    model: GzslModel,
    embed_curve: Vec<f64>,
    gzsl_curve: Vec<f64>,
}

fn fit_stage(
    cfg: &RunConfig,
    data: &Prepared,
    train_idx: &[usize],
    layout: ClassLayout,
    streams: (u64, u64),
) -> Result<StageOutput> {
    let mode = cfg.mode;
    let (encoder, embed_curve) = if mode.uses_embedder() {
        let mut rng = rng_for(cfg.seed, streams.0);
        let series: Vec<&[f64]> = train_idx.iter().map(|&i| data.ds.series[i].values.as_slice()).collect();
        let (e, curve) = train_embedder(&series, &cfg.encoder(), &mut rng)?;
        (Some(e), curve)
    } else {
        (None, Vec::new())
    };
    let standardizer = if mode.uses_attributes() {
        let a: Vec<AttributeVector> = train_idx.iter().map(|&i| data.attrs[i]).collect();
        Some(AttributeStandardizer::fit(&a)?)
    } else {
        None
    };
    let x = inputs(data, mode, encoder.as_ref(), standardizer.as_ref(), train_idx)?;
    let y: Vec<usize> = train_idx.iter().map(|&i| data.ds.series[i].label).collect();
    let mut rng = rng_for(cfg.seed, streams.1);
    let input_dim = mode.input_dim(cfg.repr_dim, data.ds.series_length);
    let mut model = GzslModel::new(cfg.latent(), mode, input_dim, layout, standardizer, &mut rng)?;
    let gzsl_curve = train_gzsl(&mut model, &x, &y, cfg.tau, &mut rng)?;
    Ok(StageOutput {
        encoder,
        model,
        embed_curve,
        gzsl_curve,
    })
}

fn probabilities(
    data: &Prepared,
    encoder: Option<&EmbedderModel>,
    model: &GzslModel,
    idx: &[usize],
    tau: f64,
) -> Result<Vec<Vec<f64>>> {
    let x = inputs(data, model.mode, encoder, model.standardizer.as_ref(), idx)?;
    model.probabilities(&x, tau)
}

/// Stage-1 outcome on the validation classes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub ausuc: f64,
    pub gamma: f64,
    pub report: EvalReport,
}

fn validate_stage(cfg: &RunConfig, data: &Prepared, split: &GzslSplit) -> Result<ValidationReport> {
    let inner = &split.inner;
    let layout = ClassLayout::new(inner.inner_train_classes.clone(), inner.val_classes.clone())?;
    let stage = fit_stage(
        cfg,
        data,
        &inner.inner_train_idx,
        layout.clone(),
        (STAGE1_ENCODER_STREAM, STAGE1_MODEL_STREAM),
    )?;
    let idx: Vec<usize> = inner.seen_val_idx.iter().chain(&inner.unseen_val_idx).copied().collect();
    let labels: Vec<usize> = idx.iter().map(|&i| data.ds.series[i].label).collect();
    let probs = probabilities(data, stage.encoder.as_ref(), &stage.model, &idx, cfg.tau)?;
    let curve = ausuc_sweep(&probs, &labels, &layout)?;
    let gamma = match cfg.gamma {
        GammaSetting::Fixed(g) => g,
        GammaSetting::Keyword(GammaKeyword::Sweep) => curve.best_h().map_or(0.0, |p| p.gamma),
    };
    let report = evaluate(&probs, &labels, &layout, gamma, cfg.tau)?;
    Ok(ValidationReport {
        ausuc: curve.ausuc,
        gamma,
        report,
    })
}

fn apply_overrides(cfg: &mut RunConfig, ov: &Overrides) {
    if let Some(s) = ov.seed {
        cfg.seed = s;
    }
    if let Some(m) = ov.mode {
        cfg.mode = m;
    }
    if let Some(o) = &ov.out {
        cfg.out = o.clone();
    }
}

/// Command-line values that take precedence over the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub mode: Option<crate::gzsl_model::RunMode>,
    pub out: Option<PathBuf>,
}

/// Reads `path` (or defaults), applies overrides and validates.
pub fn resolve_config(path: Option<&Path>, ov: &Overrides) -> Result<RunConfig> {
    let mut cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    apply_overrides(&mut cfg, ov);
    cfg.validate()?;
    Ok(cfg)
}

/// Writes `split.json` and the resolved `config.json`.
pub fn cmd_split(cfg: &RunConfig) -> Result<GzslSplit> {
    let art = Artifacts::new(&cfg.out);
    let ds = load_dataset(cfg)?;
    let split = make_gzsl_split(&ds, cfg.seed)?;
    for w in &split.warnings {
        eprintln!("warning: {w}");
    }
    let mut text = split.to_json()?;
    text.push('\n');
    write_atomic(&art.split(), text.as_bytes())?;
    write_json(&art.config(), cfg)?;
    Ok(split)
}

fn curve_csv(losses: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (e, l) in losses.iter().enumerate() {
        s.push_str(&format!("{},{}\n", e + 1, l));
    }
    s
}

/// Stage 1 (validation, gamma selection) then stage 2 (refit on all
/// training samples). Writes model containers, sidecar and curves.
pub fn cmd_train(cfg: &RunConfig) -> Result<ValidationReport> {
    let art = Artifacts::new(&cfg.out);
    let data = prepare(cfg)?;
    let split = load_split(&art, &data.ds)?;
    let validation = validate_stage(cfg, &data, &split)?;
    write_json(&art.validation(), &validation)?;

    let layout = ClassLayout::new(split.seen_classes.clone(), split.unseen_classes.clone())?;
    let stage = fit_stage(
        cfg,
        &data,
        &split.train_idx,
        layout.clone(),
        (STAGE2_ENCODER_STREAM, STAGE2_MODEL_STREAM),
    )?;
    if let Some(e) = &stage.encoder {
        write_atomic(&art.encoder(), &container::encode(&e.params))?;
        write_atomic(&art.embed_curve(), curve_csv(&stage.embed_curve).as_bytes())?;
    } else {
        // Stale files from an earlier run in another mode would mislead eval.
        for stale in [art.encoder(), art.embed_curve()] {
            if stale.exists() {
                fs::remove_file(stale)?;
            }
        }
    }
    write_atomic(&art.model(), &container::encode(&stage.model.params))?;
    let sidecar = ModelSidecar {
        mode: cfg.mode,
        tau: cfg.tau,
        gamma: validation.gamma,
        input_dim: stage.model.input_dim,
        layout,
        standardizer: stage.model.standardizer.clone(),
        latent: cfg.latent(),
        encoder: cfg.mode.uses_embedder().then(|| cfg.encoder()),
        normalize: cfg.normalize,
        apen: cfg.apen(),
    };
    write_json(&art.sidecar(), &sidecar)?;
    write_atomic(&art.gzsl_curve(), curve_csv(&stage.gzsl_curve).as_bytes())?;
    write_json(&art.config(), cfg)?;
    if cfg.dump_attributes {
        let idx: Vec<usize> = (0..data.ds.len()).collect();
        write_atomic(&art.attributes(), to_csv(&idx, &data.attrs).as_bytes())?;
    }
    Ok(validation)
}

/// Contents of `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsFile {
    pub dataset: String,
    pub mode: crate::gzsl_model::RunMode,
    /// At the stacking constant chosen in stage 1.
    pub selected: EvalReport,
    /// At the grid point maximizing the test harmonic mean.
    pub best_h: EvalReport,
    pub ausuc: f64,
    pub grid_points: usize,
}

/// Loads saved artifacts, evaluates on the test sets and writes
/// `metrics.json`, `sweep.csv` and `sweep.svg`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<(MetricsFile, SUCurve)> {
    let art = Artifacts::new(&cfg.out);
    let sidecar: ModelSidecar = serde_json::from_str(&read_required(&art.sidecar())?)?;
    if sidecar.mode != cfg.mode {
        return Err(Error::Mismatch(format!(
            "model was trained with mode {}, config asks for {}",
            sidecar.mode, cfg.mode
        )));
    }
    let data_cfg = RunConfig {
        normalize: sidecar.normalize,
        apen_m: sidecar.apen.m,
        apen_r_factor: sidecar.apen.r_factor,
        ..cfg.clone()
    };
    let data = prepare(&data_cfg)?;
    let split = load_split(&art, &data.ds)?;
    let expected = ClassLayout::new(split.seen_classes.clone(), split.unseen_classes.clone())?;
    if sidecar.layout != expected {
        return Err(Error::Mismatch(format!(
            "model class layout {:?}/{:?} differs from split {:?}/{:?}",
            sidecar.layout.seen, sidecar.layout.unseen, expected.seen, expected.unseen
        )));
    }
    let encoder = match &sidecar.encoder {
        Some(ec) => {
            let params = read_container(&art.encoder())?;
            Some(EmbedderModel::from_params(ec.clone(), params)?)
        }
        None => None,
    };
    let mut rng = rng_for(0, 0);
    let model = GzslModel::new(
        sidecar.latent.clone(),
        sidecar.mode,
        sidecar.input_dim,
        sidecar.layout.clone(),
        sidecar.standardizer.clone(),
        &mut rng,
    )?
    .with_params(read_container(&art.model())?)?;

    let idx: Vec<usize> = split.seen_test_idx.iter().chain(&split.unseen_test_idx).copied().collect();
    let labels: Vec<usize> = idx.iter().map(|&i| data.ds.series[i].label).collect();
    let probs = probabilities(&data, encoder.as_ref(), &model, &idx, sidecar.tau)?;
    let selected = evaluate(&probs, &labels, &model.layout, sidecar.gamma, sidecar.tau)?;
    let curve = ausuc_sweep(&probs, &labels, &model.layout)?;
    let best_gamma = curve.best_h().map_or(sidecar.gamma, |p| p.gamma);
    let best_h = evaluate(&probs, &labels, &model.layout, best_gamma, sidecar.tau)?;
    let metrics = MetricsFile {
        dataset: data.ds.name.clone(),
        mode: sidecar.mode,
        selected,
        best_h,
        ausuc: curve.ausuc,
        grid_points: curve.points.len(),
    };
    write_json(&art.metrics(), &metrics)?;
    write_atomic(&art.sweep_csv(), curve.to_csv().as_bytes())?;
    write_atomic(&art.sweep_svg(), curve.to_svg(&data.ds.name).as_bytes())?;
    Ok((metrics, curve))
}

fn read_container(path: &Path) -> Result<ParamSet> {
    if !path.exists() {
        return Err(Error::MissingArtifact(path.to_path_buf()));
    }
    container::decode(&fs::read(path)?)
}

/// Seeded random search scored by validation AUSUC. Needs `split.json`.
/// Writes `search/trials.json` and `search/best_config.json`.
pub fn cmd_search(cfg: &RunConfig, space: &SearchSpace) -> Result<(RunConfig, Vec<TrialRecord>)> {
    space.validate()?;
    let art = Artifacts::new(&cfg.out);
    let data = prepare(cfg)?;
    let split = load_split(&art, &data.ds)?;
    let mut rng = rng_for(cfg.seed, SEARCH_STREAM);
    let mut trials = Vec::with_capacity(space.trials);
    for trial in 0..space.trials {
        let candidate = space.sample(cfg, &mut rng);
        candidate.validate()?;
        let v = validate_stage(&candidate, &data, &split)?;
        eprintln!(
            "trial {trial}: validation AUSUC {:.4} (gamma {}, H {:.4})",
            v.ausuc, v.gamma, v.report.h
        );
        trials.push(TrialRecord {
            trial,
            validation_ausuc: v.ausuc,
            validation_gamma: v.gamma,
            validation_h: v.report.h,
            config: candidate,
        });
    }
    let best = trials[best_trial(&trials).expect("at least one trial")].config.clone();
    write_json(&art.trials(), &trials)?;
    write_json(&art.best_config(), &best)?;
    Ok((best, trials))
}

/// `split`, `search`, `train` with the best configuration, then `eval`.
pub fn cmd_pipeline(cfg: &RunConfig, space: &SearchSpace) -> Result<MetricsFile> {
    cmd_split(cfg)?;
    let (best, _) = cmd_search(cfg, space)?;
    cmd_train(&best)?;
    Ok(cmd_eval(&best)?.0)
}
