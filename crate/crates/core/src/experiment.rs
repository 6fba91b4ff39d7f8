//! End-to-end experiment pipeline: configuration, data preparation,
//! training of every requested method and sweep point, and artifacts.
//!
//! Directory layout produced by [`run_experiment`] (see `docs/formats.md`):
//!
//! ```text
//! out/
//!   config.json            resolved spec
//!   portion_summary.csv
//!   comparison.csv
//!   INCOMPLETE             present only while running or after a failure
//!   <point>/               one per sweep value (r_0.3, m_5, ...); absent without a sweep
//!     config.json dataset.bin portion_summary.csv comparison.csv
//!     <method>/[seed_<s>/] epochs.csv summary.json model.ckpt
//! ```

use crate::architecture::{Arch, Model, ModelConfig};
use crate::cells::MaskConstants;
use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::data::{
    extract_sequences, load_pamap2, read_cache, split_dataset, synth_generate, write_cache, SequenceDataset, Standardizer,
    SynthConfig,
};
use crate::error::{Error, Result};
use crate::metrics::{mean_portion, PortionRow};
use crate::report::{
    comparison_table, write_comparison_csv, write_epochs_csv, write_json, write_portion_csv, ComparisonRow, RunSummary,
    CACHE_FILE, CHECKPOINT_FILE, COMPARISON_FILE, CONFIG_FILE, EPOCHS_FILE, INCOMPLETE_MARKER, PORTIONS_FILE,
    SUMMARY_FILE,
};
use crate::tensor::{init_params, InitScheme};
use crate::training::{
    evaluate, finite_diff_check, finite_diff_check_extended, train_on, Example, GradCheckReport, TrainConfig, TrainData,
    TrainReport,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::fs;
use std::path::{Path, PathBuf};

/// Overrides `data.pamap2.root` when set.
pub const DATA_ROOT_ENV: &str = "ADASEQ_DATA_ROOT";

fn one() -> u64 {
    1
}

/// Model settings; input and class counts come from the dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub arch: Arch,
    pub hidden: usize,
    pub cells: usize,
    #[serde(default)]
    pub mask: MaskConstants,
    #[serde(default = "one")]
    pub seed: u64,
}

impl ModelSpec {
    pub fn config(&self, input_dim: usize, num_classes: usize) -> ModelConfig {
        ModelConfig {
            arch: self.arch,
            hidden: self.hidden,
            cells: self.cells,
            input_dim,
            num_classes,
            mask: self.mask,
            seed: self.seed,
        }
    }
}

fn default_ratio() -> f64 {
    0.5
}
fn default_steps() -> usize {
    200
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Pamap2Source {
    /// A `.dat` file or a directory of them.
    pub root: PathBuf,
    #[serde(default = "default_ratio")]
    pub transient_ratio: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "one")]
    pub seed: u64,
}

/// Exactly one data source.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Synth(SynthConfig),
    Pamap2(Pamap2Source),
}

impl DataSource {
    fn transient_ratio_mut(&mut self) -> &mut f64 {
        match self {
            DataSource::Synth(s) => &mut s.transient_ratio,
            DataSource::Pamap2(p) => &mut p.transient_ratio,
        }
    }

    fn seed_mut(&mut self) -> &mut u64 {
        match self {
            DataSource::Synth(s) => &mut s.seed,
            DataSource::Pamap2(p) => &mut p.seed,
        }
    }

    fn seed(&self) -> u64 {
        match self {
            DataSource::Synth(s) => s.seed,
            DataSource::Pamap2(p) => p.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Sweep {
    TransientRatio(Vec<f64>),
    Cells(Vec<usize>),
}

impl Sweep {
    pub fn name(&self) -> &'static str {
        match self {
            Sweep::TransientRatio(_) => "transient_ratio",
            Sweep::Cells(_) => "cells",
        }
    }

    fn len(&self) -> usize {
        match self {
            Sweep::TransientRatio(v) => v.len(),
            Sweep::Cells(v) => v.len(),
        }
    }
}

fn default_gc_steps() -> usize {
    4
}
fn default_gc_batch() -> usize {
    2
}
fn default_gc_step() -> f64 {
    1e-5
}
fn default_gc_tol() -> f64 {
    1e-4
}
fn default_gc_input() -> usize {
    5
}
fn default_gc_classes() -> usize {
    4
}

/// Settings for the `gradcheck` subcommand; the model shape comes from `model`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradcheckSpec {
    #[serde(default = "default_gc_steps")]
    pub steps: usize,
    #[serde(default = "default_gc_batch")]
    pub batch: usize,
    #[serde(default = "default_gc_step")]
    pub step: f64,
    #[serde(default = "default_gc_tol")]
    pub tolerance: f64,
    #[serde(default = "default_gc_input")]
    pub input_dim: usize,
    #[serde(default = "default_gc_classes")]
    pub num_classes: usize,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        serde_json::from_str("{}").expect("all fields defaulted")
    }
}

fn yes() -> bool {
    true
}

/// Everything a run needs, as read from the JSON config.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSpec {
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataSource,
    #[serde(default)]
    pub sweep: Option<Sweep>,
    /// Further architectures trained on the same data for comparison.
    #[serde(default)]
    pub baselines: Vec<Arch>,
    /// Repeat every run with data, init and shuffling seeded by each value.
    /// Empty means a single run with the seeds given in each section.
    #[serde(default)]
    pub seeds: Vec<u64>,
    /// Standardize features with training-split statistics.
    #[serde(default = "yes")]
    pub standardize: bool,
    /// Checkpoint read by `eval`; defaults to `<out>/<arch>/model.ckpt`.
    #[serde(default)]
    pub checkpoint: Option<PathBuf>,
    #[serde(default)]
    pub gradcheck: GradcheckSpec,
}

/// Sets `path` (dot-separated keys) in a JSON document. The value is parsed
/// as JSON when possible and kept as a string otherwise.
pub fn apply_override(doc: &mut Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let mut cur = doc;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        if part.is_empty() {
            return Err(Error::Config(format!("empty key segment in `{key}`")));
        }
        if !cur.is_object() {
            *cur = Value::Object(Default::default());
        }
        let obj = cur.as_object_mut().expect("object");
        if i + 1 == parts.len() {
            obj.insert(part.to_string(), value);
            return Ok(());
        }
        cur = obj.entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    unreachable!("split always yields at least one segment")
}

impl ExperimentSpec {
    /// Parses a config document after applying `key=value` overrides and
    /// the dataset-root environment variable.
    pub fn from_value(mut doc: Value, overrides: &[String]) -> Result<Self> {
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let mut spec: ExperimentSpec =
            serde_json::from_value(doc).map_err(|e| Error::Config(format!("invalid config: {e}")))?;
        if let (Ok(root), DataSource::Pamap2(p)) = (std::env::var(DATA_ROOT_ENV), &mut spec.data) {
            if !root.is_empty() {
                p.root = PathBuf::from(root);
            }
        }
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>, overrides: &[String]) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let doc: Value = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_value(doc, overrides)
    }

    fn input_shape(&self) -> (usize, usize) {
        match &self.data {
            DataSource::Synth(s) => (s.input_dim, s.num_classes),
            // class count is only known after loading; any value ≥ 1 validates
            DataSource::Pamap2(_) => (crate::data::PAMAP2_FEATURES, 2),
        }
    }

    /// Checks everything that can be checked without touching the data.
    pub fn validate(&self) -> Result<()> {
        let (input_dim, classes) = self.input_shape();
        for arch in self.methods() {
            let mut m = self.model.clone();
            m.arch = arch;
            m.config(input_dim, classes).validate()?;
        }
        self.train.validate()?;
        let ratio_ok = |r: f64| r > 0.0 && r < 1.0;
        match &self.data {
            DataSource::Synth(s) => {
                if !ratio_ok(s.transient_ratio) || s.steps == 0 || s.sequences < 10 || s.num_classes < 2 || s.input_dim < 2 {
                    return Err(Error::Config(format!("invalid synthetic data settings {s:?}")));
                }
            }
            DataSource::Pamap2(p) => {
                if !ratio_ok(p.transient_ratio) || p.steps == 0 {
                    return Err(Error::Config("pamap2 needs 0 < transient_ratio < 1 and steps > 0".into()));
                }
            }
        }
        if let Some(sweep) = &self.sweep {
            if sweep.len() == 0 {
                return Err(Error::Config("sweep list is empty".into()));
            }
            match sweep {
                Sweep::TransientRatio(rs) => {
                    if let Some(r) = rs.iter().find(|r| !ratio_ok(**r)) {
                        return Err(Error::Config(format!("sweep ratio {r} outside (0, 1)")));
                    }
                }
                Sweep::Cells(ms) => {
                    for &m in ms {
                        for arch in self.methods() {
                            let mut spec = self.model.clone();
                            spec.arch = arch;
                            spec.cells = m;
                            spec.config(input_dim, classes).validate()?;
                        }
                    }
                }
            }
        }
        let mut seeds = self.seeds.clone();
        seeds.sort_unstable();
        seeds.dedup();
        if seeds.len() != self.seeds.len() {
            return Err(Error::Config("seeds must be distinct".into()));
        }
        let gc = &self.gradcheck;
        if gc.steps == 0 || gc.batch == 0 || gc.input_dim == 0 || gc.num_classes == 0 || !(gc.step > 0.0) {
            return Err(Error::Config("gradcheck sizes and step must be positive".into()));
        }
        Ok(())
    }

    /// The primary architecture followed by distinct baselines.
    pub fn methods(&self) -> Vec<Arch> {
        let mut out = vec![self.model.arch];
        for &b in &self.baselines {
            if !out.contains(&b) {
                out.push(b);
            }
        }
        out
    }

    /// One single-point spec per sweep value, with its directory label.
    pub fn points(&self) -> Vec<(Option<String>, ExperimentSpec)> {
        let base = ExperimentSpec {
            sweep: None,
            ..self.clone()
        };
        match &self.sweep {
            None => vec![(None, base)],
            Some(Sweep::TransientRatio(rs)) => rs
                .iter()
                .map(|&r| {
                    let mut s = base.clone();
                    *s.data.transient_ratio_mut() = r;
                    (Some(format!("r_{r}")), s)
                })
                .collect(),
            Some(Sweep::Cells(ms)) => ms
                .iter()
                .map(|&m| {
                    let mut s = base.clone();
                    s.model.cells = m;
                    (Some(format!("m_{m}")), s)
                })
                .collect(),
        }
    }

    /// The spec with every seed replaced by `seed`.
    pub fn reseeded(&self, seed: u64) -> ExperimentSpec {
        let mut s = self.clone();
        s.model.seed = seed;
        s.train.seed = seed;
        *s.data.seed_mut() = seed;
        s
    }

    /// `(seed label, spec)` for each repeat.
    fn repeats(&self) -> Vec<(Option<u64>, ExperimentSpec)> {
        if self.seeds.is_empty() {
            vec![(None, self.clone())]
        } else {
            self.seeds.iter().map(|&s| (Some(s), self.reseeded(s))).collect()
        }
    }
}

/// Loads or generates the data and assigns splits (unstandardized).
pub fn build_dataset(source: &DataSource) -> Result<SequenceDataset> {
    let ds = match source {
        DataSource::Synth(cfg) => synth_generate(cfg)?,
        DataSource::Pamap2(p) => {
            let records = load_pamap2(&p.root)?;
            extract_sequences(&records, p.transient_ratio, p.steps, p.seed)?
        }
    };
    split_dataset(ds, source.seed())
}

/// Training data in `f64`, standardized with training statistics if asked.
pub fn train_data(dataset: &SequenceDataset, standardize: bool) -> Result<TrainData<f64>> {
    if standardize {
        let mut ds = dataset.clone();
        Standardizer::fit(&ds)?.apply(&mut ds);
        TrainData::from_dataset(&ds)
    } else {
        TrainData::from_dataset(dataset)
    }
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Validates, builds the dataset, and writes `dataset.bin` plus the resolved
/// config to `out`.
pub fn prepare_data(spec: &ExperimentSpec, out: &Path) -> Result<SequenceDataset> {
    spec.validate()?;
    if spec.sweep.is_some() || !spec.seeds.is_empty() {
        return Err(Error::Config("data prepare takes a single point; drop sweep and seeds".into()));
    }
    let ds = build_dataset(&spec.data)?;
    create_dir(out)?;
    write_json(spec, out.join(CONFIG_FILE))?;
    write_cache(&ds, out.join(CACHE_FILE))?;
    Ok(ds)
}

/// One trained model.
#[derive(Clone, Debug)]
pub struct MethodRun {
    pub arch: Arch,
    pub seed: Option<u64>,
    pub report: TrainReport,
}

/// All runs at one sweep value.
#[derive(Clone, Debug)]
pub struct PointOutcome {
    pub label: Option<String>,
    pub runs: Vec<MethodRun>,
}

impl PointOutcome {
    pub fn runs_of(&self, arch: Arch) -> impl Iterator<Item = &MethodRun> {
        self.runs.iter().filter(move |r| r.arch == arch)
    }

    /// Mean over repeats of each run's converged average `p`.
    pub fn seed_avg_p(&self, arch: Arch) -> Option<f64> {
        let ps: Vec<f64> = self.runs_of(arch).filter_map(|r| r.report.avg_p_converged).collect();
        mean_portion(&ps)
    }

    fn portion_samples(&self, arch: Arch) -> usize {
        self.runs_of(arch).map(|r| r.report.converged_portions.len()).sum()
    }

    fn comparison(&self) -> Vec<ComparisonRow> {
        let labels: Vec<String> = self
            .runs
            .iter()
            .map(|r| {
                let mut l = r.arch.label().to_string();
                if let Some(s) = r.seed {
                    l.push_str(&format!(" seed {s}"));
                }
                if let Some(p) = &self.label {
                    l.push_str(&format!(" [{p}]"));
                }
                l
            })
            .collect();
        comparison_table(labels.iter().map(String::as_str).zip(self.runs.iter().map(|r| &r.report)))
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub points: Vec<PointOutcome>,
    pub portion_summary: Vec<PortionRow>,
}

fn run_point(spec: &ExperimentSpec, dir: &Path, sweep: Option<(&str, &str)>) -> Result<(PointOutcome, Vec<PortionRow>)> {
    create_dir(dir)?;
    write_json(spec, dir.join(CONFIG_FILE))?;
    let repeats = spec.repeats();
    let mut runs = Vec::new();
    for (seed, rspec) in &repeats {
        let ds = build_dataset(&rspec.data)?;
        let cache = match seed {
            Some(s) => format!("dataset_seed_{s}.bin"),
            None => CACHE_FILE.to_string(),
        };
        write_cache(&ds, dir.join(cache))?;
        let data = train_data(&ds, rspec.standardize)?;
        for arch in rspec.methods() {
            let mut mspec = rspec.model.clone();
            mspec.arch = arch;
            let config = mspec.config(ds.meta.input_dim, ds.meta.num_classes());
            let mut run_dir = dir.join(arch.name());
            if let Some(s) = seed {
                run_dir = run_dir.join(format!("seed_{s}"));
            }
            create_dir(&run_dir)?;
            log::info!("training {} into {}", arch.name(), run_dir.display());
            let outcome = train_on(Model::<f64>::new(config)?, &rspec.train, &data)?;
            write_epochs_csv(&outcome.report.epochs, run_dir.join(EPOCHS_FILE))?;
            write_json(&RunSummary::from_report(&outcome.report), run_dir.join(SUMMARY_FILE))?;
            save_checkpoint(&outcome.model, run_dir.join(CHECKPOINT_FILE))?;
            runs.push(MethodRun {
                arch,
                seed: *seed,
                report: outcome.report,
            });
        }
    }
    let point = PointOutcome {
        label: sweep.map(|(_, v)| v.to_string()),
        runs,
    };
    let rows: Vec<PortionRow> = spec
        .methods()
        .into_iter()
        .map(|arch| PortionRow {
            sweep: sweep.map_or("method", |(n, _)| n).to_string(),
            value: match sweep {
                Some((_, v)) => format!("{v}/{}", arch.name()),
                None => arch.name().to_string(),
            },
            avg_p: point.seed_avg_p(arch),
            samples: point.portion_samples(arch),
        })
        .collect();
    write_portion_csv(&rows, dir.join(PORTIONS_FILE))?;
    write_comparison_csv(&point.comparison(), dir.join(COMPARISON_FILE))?;
    Ok((point, rows))
}

/// Runs every sweep point and method, writing artifacts under `out`.
///
/// The spec is validated before anything is created. While running, an
/// `INCOMPLETE` marker sits in `out`; it is removed only on success.
pub fn run_experiment(spec: &ExperimentSpec, out: &Path) -> Result<ExperimentOutcome> {
    spec.validate()?;
    create_dir(out)?;
    let marker = out.join(INCOMPLETE_MARKER);
    fs::write(&marker, b"run did not finish\n").map_err(|e| Error::io(&marker, e))?;
    write_json(spec, out.join(CONFIG_FILE))?;

    let sweep_name = spec.sweep.as_ref().map(Sweep::name);
    let mut points = Vec::new();
    let mut point_rows = Vec::new();
    for (label, pspec) in spec.points() {
        let (point, rows) = match (&label, sweep_name) {
            (Some(l), Some(name)) => {
                let value = l.split_once('_').map_or(l.as_str(), |(_, v)| v);
                run_point(&pspec, &out.join(l), Some((name, value)))?
            }
            _ => run_point(&pspec, out, None)?,
        };
        points.push(point);
        point_rows = rows;
    }

    let primary = spec.model.arch;
    let portion_summary = if let Some(name) = sweep_name {
        let rows: Vec<PortionRow> = points
            .iter()
            .map(|p| PortionRow {
                sweep: name.to_string(),
                value: p.label.clone().unwrap_or_default(),
                avg_p: p.seed_avg_p(primary),
                samples: p.portion_samples(primary),
            })
            .collect();
        write_portion_csv(&rows, out.join(PORTIONS_FILE))?;
        let mut table: Vec<ComparisonRow> = points.iter().flat_map(|p| p.comparison()).collect();
        table.retain(|r| r.final_ce.is_some());
        table.extend(comparison_table([]));
        write_comparison_csv(&table, out.join(COMPARISON_FILE))?;
        rows
    } else {
        point_rows
    };
    fs::remove_file(&marker).map_err(|e| Error::io(&marker, e))?;
    Ok(ExperimentOutcome {
        points,
        portion_summary,
    })
}

/// Losses of a saved model on each split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint: PathBuf,
    pub method: String,
    pub train_ce: f64,
    pub val_ce: f64,
    pub test_ce: f64,
    pub avg_p_validation: Option<f64>,
    /// Effective multiplications of one forward pass over the test split.
    pub test_eff_mults: u64,
}

/// Evaluates the configured checkpoint on the configured data and writes
/// `eval.json` to `out`.
pub fn evaluate_checkpoint(spec: &ExperimentSpec, out: &Path) -> Result<EvalReport> {
    spec.validate()?;
    if spec.sweep.is_some() || !spec.seeds.is_empty() {
        return Err(Error::Config("eval takes a single point; drop sweep and seeds".into()));
    }
    let path = spec
        .checkpoint
        .clone()
        .unwrap_or_else(|| out.join(spec.model.arch.name()).join(CHECKPOINT_FILE));
    let model: Model<f64> = load_checkpoint(&path)?;
    let cache = out.join(CACHE_FILE);
    let ds = if cache.is_file() {
        read_cache(&cache)?
    } else {
        build_dataset(&spec.data)?
    };
    if model.config.input_dim != ds.meta.input_dim || model.config.num_classes != ds.meta.num_classes() {
        return Err(Error::Config(format!(
            "checkpoint expects {} inputs / {} classes, data has {} / {}",
            model.config.input_dim,
            model.config.num_classes,
            ds.meta.input_dim,
            ds.meta.num_classes()
        )));
    }
    let data = train_data(&ds, spec.standardize)?;
    let (train_ce, _, _) = evaluate(&model, &data.train)?;
    let (val_ce, portions, _) = evaluate(&model, &data.validation)?;
    let (test_ce, _, test_eff_mults) = evaluate(&model, &data.test)?;
    let report = EvalReport {
        checkpoint: path,
        method: model.config.arch.name().to_string(),
        train_ce,
        val_ce,
        test_ce,
        avg_p_validation: mean_portion(&portions),
        test_eff_mults,
    };
    create_dir(out)?;
    write_json(&report, out.join("eval.json"))?;
    Ok(report)
}

/// Gradient check of one architecture.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckOutcome {
    pub method: String,
    /// Differences evaluated in double-double precision.
    pub extended: GradCheckReport,
    /// Differences evaluated in `f64`, for reference.
    pub native: GradCheckReport,
}

impl GradcheckOutcome {
    pub fn passed(&self) -> bool {
        self.extended.passed()
    }
}

/// Random inputs in `[-2, 2]` and uniformly drawn labels.
pub fn gradcheck_batch(config: &ModelConfig, steps: usize, batch: usize, seed: u64) -> Vec<Example<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..batch)
        .map(|b| {
            let x = init_params::<f64>(steps, config.input_dim, seed.wrapping_add(1 + b as u64), InitScheme::Uniform)
                .scale(2.0 * (config.input_dim as f64).sqrt());
            let labels = (0..steps).map(|_| rng.random_range(0..config.num_classes)).collect();
            Example::new(&x, labels).expect("consistent shapes")
        })
        .collect()
}

/// Checks every method of the spec at the gradcheck sizes.
pub fn run_gradcheck(spec: &ExperimentSpec) -> Result<Vec<GradcheckOutcome>> {
    spec.validate()?;
    let gc = &spec.gradcheck;
    spec.methods()
        .into_iter()
        .map(|arch| {
            let mut m = spec.model.clone();
            m.arch = arch;
            let config = m.config(gc.input_dim, gc.num_classes);
            let model = Model::<f64>::new(config.clone())?;
            let examples = gradcheck_batch(&config, gc.steps, gc.batch, spec.model.seed);
            let batch: Vec<&Example<f64>> = examples.iter().collect();
            Ok(GradcheckOutcome {
                method: arch.name().to_string(),
                extended: finite_diff_check_extended(&model, &batch, gc.step, gc.tolerance)?,
                native: finite_diff_check(&model, &batch, gc.step, gc.tolerance)?,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn base() -> Value {
        json!({
            "model": {"arch": "da_lstm", "hidden": 4, "cells": 2},
            "train": {"max_epochs": 1, "batch_size": 8},
            "data": {"synth": {"sequences": 20, "steps": 12, "input_dim": 3, "num_classes": 3}}
        })
    }

    #[test]
    fn overrides_set_nested_keys() {
        let mut doc = base();
        apply_override(&mut doc, "model.hidden=9").unwrap();
        apply_override(&mut doc, "train.learning_rate=0.5").unwrap();
        apply_override(&mut doc, "model.arch=stacked_lstm").unwrap();
        apply_override(&mut doc, "sweep.cells=[2,3]").unwrap();
        let spec = ExperimentSpec::from_value(doc, &[]).unwrap();
        assert_eq!(spec.model.hidden, 9);
        assert_eq!(spec.model.arch, Arch::StackedLstm);
        assert_eq!(spec.train.learning_rate, 0.5);
        assert_eq!(spec.sweep, Some(Sweep::Cells(vec![2, 3])));
        assert!(apply_override(&mut base(), "no_equals").is_err());
    }

    #[test]
    fn unknown_keys_and_two_sources_are_rejected() {
        let err = ExperimentSpec::from_value(base(), &["model.hiden=3".into()]).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        let both = ExperimentSpec::from_value(base(), &["data.pamap2={\"root\":\"x\"}".into()]);
        assert!(both.is_err());
    }

    #[test]
    fn validation_catches_bad_specs() {
        let spec = ExperimentSpec::from_value(base(), &["model.cells=1".into()]).unwrap();
        assert!(spec.validate().is_err());
        let spec = ExperimentSpec::from_value(base(), &["sweep.transient_ratio=[]".into()]).unwrap();
        assert!(spec.validate().is_err());
        let spec = ExperimentSpec::from_value(base(), &["sweep.transient_ratio=[0.5,1.0]".into()]).unwrap();
        assert!(spec.validate().is_err());
        let spec = ExperimentSpec::from_value(base(), &["seeds=[1,1]".into()]).unwrap();
        assert!(spec.validate().is_err());
        assert!(ExperimentSpec::from_value(base(), &[]).unwrap().validate().is_ok());
    }

    #[test]
    fn sweep_points_and_reseeding() {
        let spec = ExperimentSpec::from_value(base(), &["sweep.transient_ratio=[0.3,0.5]".into()]).unwrap();
        let pts = spec.points();
        assert_eq!(pts.len(), 2);
        assert_eq!(pts[0].0.as_deref(), Some("r_0.3"));
        assert!(matches!(&pts[1].1.data, DataSource::Synth(s) if s.transient_ratio == 0.5));
        let r = spec.reseeded(7);
        assert_eq!((r.model.seed, r.train.seed, r.data.seed()), (7, 7, 7));
    }

    #[test]
    fn pipeline_writes_artifacts_and_clears_marker() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ExperimentSpec::from_value(base(), &["baselines=[\"stacked_lstm\"]".into()]).unwrap();
        let out = run_experiment(&spec, dir.path()).unwrap();
        assert_eq!(out.points[0].runs.len(), 2);
        for f in [CONFIG_FILE, CACHE_FILE, PORTIONS_FILE, COMPARISON_FILE] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        for f in [EPOCHS_FILE, SUMMARY_FILE, CHECKPOINT_FILE] {
            assert!(dir.path().join("da_lstm").join(f).is_file(), "{f}");
        }
        assert!(!dir.path().join(INCOMPLETE_MARKER).exists());
        let resolved: ExperimentSpec = crate::report::read_json(dir.path().join(CONFIG_FILE)).unwrap();
        assert_eq!(resolved, spec);

        let eval = evaluate_checkpoint(&spec, dir.path()).unwrap();
        let summary: RunSummary = crate::report::read_json(dir.path().join("da_lstm").join(SUMMARY_FILE)).unwrap();
        assert_eq!(eval.test_ce, summary.test_ce);
    }

    #[test]
    fn gradcheck_covers_every_method() {
        let spec = ExperimentSpec::from_value(
            base(),
            &["baselines=[\"deep_transition_lstm\"]".into(), "gradcheck.steps=2".into()],
        )
        .unwrap();
        let out = run_gradcheck(&spec).unwrap();
        assert_eq!(out.len(), 2);
        assert!(out.iter().all(GradcheckOutcome::passed));
    }
}
