//! The class-incremental protocol.
//!
//! For each task: train on the task's data plus replayed exemplars, optionally
//! merge with the parameters the task started from, refresh the exemplar
//! memory, then evaluate on the test data of every class seen so far.
//!
//! Labels inside a run are positions in the order classes were revealed, so
//! the logits for previously seen classes always form a prefix.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::adapters::{self, AdapterKind, AdapterParams, AttentionMode, InitScheme};
use crate::baselines::{expand_head, ProbeHead};
use crate::embedding::{split_tasks, Dataset, Manifest, Record};
use crate::error::{Error, Result};
use crate::linalg::{self, DenseMatrix, DenseVector};
use crate::memory::ExemplarBuffer;
use crate::objective::{self, Batch, Distill, LogitConfig, TextHead};
use crate::optim::{CosineSchedule, OptimizerConfig, OptimizerState};
use crate::retention::{self, RetentionConfig, Strategy};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Adapter trained per task, then merged with drift-ranked (or random) retention.
    AdapterRetention,
    /// Adapter fine-tuned task after task without merging.
    AdapterPlain,
    /// Cosine classification of the raw embeddings; nothing is trained.
    ZeroShot,
    /// Affine head over raw embeddings, expanded with each task.
    LinearProbe,
    /// Adapter with a distillation term towards the previous task's adapter.
    AdapterKd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdapterSpec {
    pub kind: AdapterKind,
    #[serde(default)]
    pub attention_mode: AttentionMode,
    /// Defaults to [`InitScheme::default_for`] the kind.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitScheme>,
}

impl Default for AdapterSpec {
    fn default() -> Self {
        Self {
            kind: AdapterKind::Linear,
            attention_mode: AttentionMode::Outer,
            init: None,
        }
    }
}

impl AdapterSpec {
    pub fn init_scheme(&self) -> InitScheme {
        self.init.unwrap_or_else(|| InitScheme::default_for(self.kind))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KdConfig {
    pub temperature: f64,
    pub weight: f64,
}

impl Default for KdConfig {
    fn default() -> Self {
        Self {
            temperature: 2.0,
            weight: 1.0,
        }
    }
}

fn default_epochs() -> usize {
    30
}
fn default_batch_size() -> usize {
    128
}
fn default_budget() -> usize {
    2000
}

/// Everything about a run except the data and the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub method: Method,
    #[serde(default)]
    pub adapter: AdapterSpec,
    #[serde(default)]
    pub retention: RetentionConfig,
    /// Required to be absent for zero-shot; other methods default to SGD.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerConfig>,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_budget")]
    pub exemplar_budget: usize,
    #[serde(default)]
    pub logits: LogitConfig,
    /// Only for `adapter_kd`, which defaults it.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kd: Option<KdConfig>,
}

impl ScenarioConfig {
    pub fn new(method: Method) -> Self {
        Self {
            method,
            adapter: AdapterSpec::default(),
            retention: RetentionConfig::default(),
            optimizer: None,
            epochs: default_epochs(),
            batch_size: default_batch_size(),
            exemplar_budget: default_budget(),
            logits: LogitConfig::default(),
            kd: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.logits.validate()?;
        self.retention.validate()?;
        if let Some(opt) = &self.optimizer {
            opt.validate()?;
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if let Some(InitScheme::IdentityPerturbed { epsilon }) = self.adapter.init {
            if !(epsilon >= 0.0 && epsilon.is_finite()) {
                return Err(Error::config("adapter.init.epsilon must be finite and >= 0"));
            }
        }
        match self.method {
            Method::ZeroShot if self.optimizer.is_some() => Err(Error::config(
                "zero_shot trains nothing; remove the optimizer settings",
            )),
            Method::AdapterKd => {
                let kd = self.kd.unwrap_or_default();
                if !(kd.temperature > 0.0) || !(kd.weight >= 0.0) {
                    return Err(Error::config("kd needs temperature > 0 and weight >= 0"));
                }
                Ok(())
            }
            _ if self.kd.is_some() => Err(Error::config(
                "kd settings are only valid with method adapter_kd",
            )),
            _ => Ok(()),
        }
    }

    pub fn optimizer_or_default(&self) -> OptimizerConfig {
        self.optimizer.unwrap_or_else(OptimizerConfig::sgd_default)
    }

    fn train_settings(&self) -> TrainSettings {
        TrainSettings {
            optimizer: self.optimizer_or_default(),
            epochs: self.epochs,
            batch_size: self.batch_size,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainSettings {
    pub optimizer: OptimizerConfig,
    pub epochs: usize,
    pub batch_size: usize,
}

/// Passed to the step observer after every optimizer update.
#[derive(Debug)]
pub struct StepReport<'a> {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub params: &'a [f64],
    pub grads: &'a [f64],
}

/// Minibatch descent over `n` samples with a per-call cosine schedule and
/// fresh optimizer state.
fn optimize(
    flat: &mut [f64],
    n: usize,
    settings: &TrainSettings,
    seed: u64,
    mut loss_grad: impl FnMut(&[f64], &[usize]) -> Result<(f64, Vec<f64>)>,
    on_step: &mut dyn FnMut(&StepReport<'_>),
) -> Result<()> {
    if n == 0 || settings.epochs == 0 {
        return Ok(());
    }
    let per_epoch = n.div_ceil(settings.batch_size);
    let schedule = CosineSchedule::new(settings.optimizer.lr(), settings.epochs * per_epoch);
    let mut state = OptimizerState::new(settings.optimizer, flat.len());
    let mut shuffle = rng::stream(seed, "shuffle");
    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    for _ in 0..settings.epochs {
        order.shuffle(&mut shuffle);
        for chunk in order.chunks(settings.batch_size) {
            let (loss, grads) = loss_grad(flat, chunk)?;
            let lr = schedule.lr_at(step)?;
            state.step(flat, &grads, lr)?;
            step += 1;
            on_step(&StepReport {
                step,
                lr,
                loss,
                params: flat,
                grads: &grads,
            });
        }
    }
    Ok(())
}

/// Trains `params` in place on `(label, embedding)` samples.
pub fn train_adapter(
    params: &mut AdapterParams,
    samples: &[(usize, &DenseVector)],
    head: &TextHead,
    settings: &TrainSettings,
    distill: Option<&Distill<'_>>,
    seed: u64,
    on_step: &mut dyn FnMut(&StepReport<'_>),
) -> Result<()> {
    let mut flat = params.flatten().0;
    let mut work = params.clone();
    optimize(
        &mut flat,
        samples.len(),
        settings,
        seed,
        |theta, idx| {
            work.assign_flat(theta)?;
            let batch = Batch::new(
                idx.iter().map(|&i| samples[i].1).collect(),
                idx.iter().map(|&i| samples[i].0).collect(),
            )?;
            objective::adapter_loss_grad(&work, &batch, head, distill).map(|(l, g)| (l, g.0))
        },
        on_step,
    )?;
    params.assign_flat(&flat)
}

/// Trains a probe head in place on `(label, embedding)` samples.
pub fn train_probe(
    head: &mut ProbeHead,
    samples: &[(usize, &DenseVector)],
    settings: &TrainSettings,
    seed: u64,
    on_step: &mut dyn FnMut(&StepReport<'_>),
) -> Result<()> {
    let mut flat = head.flatten().0;
    let mut work = head.clone();
    optimize(
        &mut flat,
        samples.len(),
        settings,
        seed,
        |theta, idx| {
            work.assign_flat(theta)?;
            let batch = Batch::new(
                idx.iter().map(|&i| samples[i].1).collect(),
                idx.iter().map(|&i| samples[i].0).collect(),
            )?;
            objective::probe_loss_grad(&work, &batch).map(|(l, g)| (l, g.0))
        },
        on_step,
    )?;
    head.assign_flat(&flat)
}

pub trait Classifier {
    fn predict(&self, x: &DenseVector) -> Result<usize>;
}

/// Adapter followed by similarity logits against the seen classes' text rows.
pub struct AdapterClassifier<'a> {
    pub params: &'a AdapterParams,
    pub head: &'a TextHead,
}

impl Classifier for AdapterClassifier<'_> {
    fn predict(&self, x: &DenseVector) -> Result<usize> {
        let a = adapters::forward(self.params, x)?;
        linalg::argmax(&self.head.logits(&a)?)
    }
}

impl Classifier for ProbeHead {
    fn predict(&self, x: &DenseVector) -> Result<usize> {
        linalg::argmax(&self.logits(x)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub correct: usize,
    pub total: usize,
    /// label → (correct, total)
    pub per_class: BTreeMap<usize, (usize, usize)>,
    pub predictions: Vec<usize>,
}

impl EvalReport {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.total as f64
    }
}

/// Fraction of samples whose predicted label matches.
pub fn evaluate(model: &dyn Classifier, samples: &[(usize, &DenseVector)]) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::contract("evaluate needs at least one sample"));
    }
    let mut report = EvalReport {
        correct: 0,
        total: samples.len(),
        per_class: BTreeMap::new(),
        predictions: Vec::with_capacity(samples.len()),
    };
    for &(label, x) in samples {
        let pred = model.predict(x)?;
        let slot = report.per_class.entry(label).or_insert((0, 0));
        slot.1 += 1;
        if pred == label {
            report.correct += 1;
            slot.0 += 1;
        }
        report.predictions.push(pred);
    }
    Ok(report)
}

/// Accuracy after each task, overall and broken down by task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    /// `overall[t]`: accuracy on the union of test sets of tasks `0..=t` after task `t`.
    pub overall: Vec<f64>,
    /// Lower-triangular: `per_task[t][j]` for `j <= t`.
    pub per_task: Vec<Vec<f64>>,
    /// Test-set size of each task.
    pub test_sizes: Vec<usize>,
}

impl AccuracyMatrix {
    /// `overall[t]` recomputed as the size-weighted mean of row `t`.
    pub fn weighted_row(&self, t: usize) -> f64 {
        let row = &self.per_task[t];
        let (mut num, mut den) = (0.0, 0.0);
        for (acc, &n) in row.iter().zip(&self.test_sizes) {
            num += acc * n as f64;
            den += n as f64;
        }
        num / den
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunResult {
    pub manifest: Manifest,
    pub config: ScenarioConfig,
    pub seed: u64,
    /// Class indices of each task, in order.
    pub tasks: Vec<Vec<usize>>,
    pub accuracy: AccuracyMatrix,
    /// Mean of `accuracy.overall`.
    pub avg: f64,
    /// `accuracy.overall` after the final task.
    pub last: f64,
    /// Training + evaluation time per task. Not serialized, so that result
    /// files depend only on the configuration and seed.
    #[serde(skip)]
    pub wall_clock_secs: Vec<f64>,
}

impl RunResult {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// `seed,task,overall,avg_so_far` rows, tasks numbered from 1.
    pub fn csv_rows(&self) -> Vec<String> {
        let mut sum = 0.0;
        self.accuracy
            .overall
            .iter()
            .enumerate()
            .map(|(t, &acc)| {
                sum += acc;
                format!("{},{},{},{}", self.seed, t + 1, acc, sum / (t + 1) as f64)
            })
            .collect()
    }
}

pub const CSV_HEADER: &str = "seed,task,overall,avg_so_far";

/// A run's result plus the state needed to inspect it further.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub result: RunResult,
    /// Final adapter (identity for zero-shot, absent for the linear probe).
    pub adapter: Option<AdapterParams>,
    pub probe: Option<ProbeHead>,
    /// Classes in the order they were revealed.
    pub seen_classes: Vec<usize>,
    /// After each task: predicted class index for every test sample of the
    /// seen tasks, task by task in file order.
    pub predictions: Vec<Vec<usize>>,
}

/// Loads the manifest's data and runs.
pub fn run(manifest: &Manifest, config: &ScenarioConfig, seed: u64) -> Result<RunOutcome> {
    config.validate()?;
    let data = Dataset::load(manifest)?;
    run_on(&data, manifest, config, seed)
}

/// Runs on already loaded data; `manifest` supplies the task split.
pub fn run_on(
    data: &Dataset,
    manifest: &Manifest,
    config: &ScenarioConfig,
    seed: u64,
) -> Result<RunOutcome> {
    config.validate()?;
    manifest.validate()?;
    let dim = data.dim();
    let k = data.num_classes();
    let tasks = split_tasks(manifest, k)?;
    let text_all = data.text.text_matrix()?;

    let test_by_task: Vec<Vec<&Record>> = tasks.iter().map(|c| data.test.filter_classes(c)).collect();
    if let Some(t) = test_by_task.iter().position(Vec::is_empty) {
        return Err(Error::config(format!("task {} has no test samples", t + 1)));
    }

    let settings = config.train_settings();
    let trains_adapter = matches!(
        config.method,
        Method::AdapterRetention | Method::AdapterPlain | Method::AdapterKd
    );
    let mut adapter = match config.method {
        Method::LinearProbe => None,
        Method::ZeroShot => Some(AdapterParams::identity(dim)),
        _ => Some(adapters::init(
            config.adapter.kind,
            config.adapter.attention_mode,
            dim,
            rng::derive(seed, "adapter_init"),
            config.adapter.init_scheme(),
        )?),
    };
    let mut probe = (config.method == Method::LinearProbe).then(|| ProbeHead::zeros(0, dim));
    let kd = config.kd.unwrap_or_default();
    let mut buffer = ExemplarBuffer::new(config.exemplar_budget, rng::derive(seed, "exemplars"));

    let mut seen: Vec<usize> = Vec::new();
    let mut position: HashMap<usize, usize> = HashMap::new();
    let mut overall = Vec::with_capacity(tasks.len());
    let mut per_task = Vec::with_capacity(tasks.len());
    let mut predictions = Vec::with_capacity(tasks.len());
    let mut wall = Vec::with_capacity(tasks.len());

    for (t, classes) in tasks.iter().enumerate() {
        let started = Instant::now();
        let num_old = seen.len();
        for &c in classes {
            position.insert(c, seen.len());
            seen.push(c);
        }
        let text_seen = select_rows(&text_all, &seen)?;
        let head = TextHead::new(&text_seen, config.logits)?;

        let current = data.train.filter_classes(classes);
        let replay = buffer.entries();
        let samples: Vec<(usize, &DenseVector)> = current
            .iter()
            .copied()
            .chain(replay.iter())
            .map(|r| (position[&r.class_index], &r.vector))
            .collect();
        let task_seed = rng::derive(seed, &format!("task/{t}"));

        if let Some(params) = adapter.as_mut().filter(|_| trains_adapter) {
            let start = params.clone();
            let distill = (config.method == Method::AdapterKd && num_old > 0).then(|| Distill {
                prev: &start,
                num_old,
                temperature: kd.temperature,
                weight: kd.weight,
            });
            train_adapter(
                params,
                &samples,
                &head,
                &settings,
                distill.as_ref(),
                task_seed,
                &mut |_| {},
            )?;
            if config.method == Method::AdapterRetention
                && t > 0
                && config.retention.strategy != Strategy::None
            {
                let cfg = RetentionConfig {
                    seed: rng::derive(task_seed, "retention"),
                    ..config.retention
                };
                *params = retention::merge_adapter(&start, params, &cfg)?;
            }
        }
        if let Some(h) = probe.as_mut() {
            *h = expand_head(h, classes.len(), rng::derive(task_seed, "probe_head"))?;
            train_probe(h, &samples, &settings, task_seed, &mut |_| {})?;
        }

        if config.method != Method::ZeroShot {
            buffer.rebalance_and_add(&current, &seen)?;
        }

        let classifier: Box<dyn Classifier + '_> = match (&adapter, &probe) {
            (Some(params), _) => Box::new(AdapterClassifier {
                params,
                head: &head,
            }),
            (None, Some(h)) => Box::new(h.clone()),
            (None, None) => unreachable!("every method carries a model"),
        };
        let mut row = Vec::with_capacity(t + 1);
        let mut preds = Vec::new();
        let (mut correct, mut total) = (0usize, 0usize);
        for test in &test_by_task[..=t] {
            let samples: Vec<(usize, &DenseVector)> = test
                .iter()
                .map(|r| (position[&r.class_index], &r.vector))
                .collect();
            let report = evaluate(classifier.as_ref(), &samples)?;
            row.push(report.accuracy());
            correct += report.correct;
            total += report.total;
            preds.extend(report.predictions.iter().map(|&p| seen[p]));
        }
        overall.push(correct as f64 / total as f64);
        per_task.push(row);
        predictions.push(preds);
        wall.push(started.elapsed().as_secs_f64());
    }

    let avg = overall.iter().sum::<f64>() / overall.len() as f64;
    let last = *overall.last().expect("at least one task");
    let result = RunResult {
        manifest: manifest.clone(),
        config: config.clone(),
        seed,
        tasks: tasks.clone(),
        accuracy: AccuracyMatrix {
            overall,
            per_task,
            test_sizes: test_by_task.iter().map(Vec::len).collect(),
        },
        avg,
        last,
        wall_clock_secs: wall,
    };
    Ok(RunOutcome {
        result,
        adapter,
        probe,
        seen_classes: seen,
        predictions,
    })
}

fn select_rows(m: &DenseMatrix, rows: &[usize]) -> Result<DenseMatrix> {
    let mut data = Vec::with_capacity(rows.len() * m.cols());
    for &r in rows {
        data.extend_from_slice(m.row(r));
    }
    DenseMatrix::from_vec(rows.len(), m.cols(), data)
}

/// Mean and sample standard deviation of Avg and Last over seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub n: usize,
    pub seeds: Vec<u64>,
    pub avg_mean: f64,
    pub avg_std: f64,
    pub last_mean: f64,
    pub last_std: f64,
}

/// `(mean, std)` with an `n − 1` denominator; a single value has std 0.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate(results: &[RunResult]) -> Result<Aggregate> {
    let first = results
        .first()
        .ok_or_else(|| Error::contract("aggregate needs at least one result"))?;
    if results
        .iter()
        .any(|r| r.config != first.config || r.manifest != first.manifest)
    {
        return Err(Error::contract(
            "aggregate: results come from different configurations",
        ));
    }
    let avgs: Vec<f64> = results.iter().map(|r| r.avg).collect();
    let lasts: Vec<f64> = results.iter().map(|r| r.last).collect();
    let (avg_mean, avg_std) = mean_std(&avgs);
    let (last_mean, last_std) = mean_std(&lasts);
    Ok(Aggregate {
        n: results.len(),
        seeds: results.iter().map(|r| r.seed).collect(),
        avg_mean,
        avg_std,
        last_mean,
        last_std,
    })
}

/// Writes a run's final adapter as a `CADP` checkpoint.
pub fn save_final_adapter(outcome: &RunOutcome, path: impl AsRef<Path>) -> Result<()> {
    match &outcome.adapter {
        Some(p) => adapters::save_checkpoint(p, path),
        None => Err(Error::contract("this run has no adapter to save")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embedding::{EmbeddingSet, Split};

    fn tiny_dataset() -> (Dataset, Manifest) {
        // 4 classes on the axes of R^4, two train + one test sample each
        let names: Vec<String> = (0..4).map(|c| format!("c{c}")).collect();
        let axis = |c: usize, wobble: f64| {
            let mut v = vec![wobble; 4];
            v[c] = 1.0;
            DenseVector::new(v)
        };
        let rec = |c, w| Record { class_index: c, vector: axis(c, w) };
        let train = (0..4).flat_map(|c| [rec(c, 0.1), rec(c, -0.1)]).collect();
        let test = (0..4).map(|c| rec(c, 0.05)).collect();
        let text = (0..4).map(|c| rec(c, 0.0)).collect();
        let ds = Dataset::new(
            EmbeddingSet::new(4, names.clone(), train).unwrap(),
            EmbeddingSet::new(4, names.clone(), test).unwrap(),
            EmbeddingSet::new(4, names, text).unwrap(),
        )
        .unwrap();
        let m = Manifest {
            image_embeddings: vec!["unused".into()],
            text_embeddings: "unused".into(),
            split: Split::B0,
            num_tasks: 2,
            seed: 3,
            class_order: None,
            base_dir: None,
        };
        (ds, m)
    }

    #[test]
    fn evaluate_counts() {
        let text = DenseMatrix::identity(2);
        let head = TextHead::new(&text, LogitConfig::default()).unwrap();
        let p = AdapterParams::identity(2);
        let clf = AdapterClassifier { params: &p, head: &head };
        let a = DenseVector::new(vec![1.0, 0.0]);
        let b = DenseVector::new(vec![0.0, 1.0]);
        let r = evaluate(&clf, &[(0, &a), (0, &b), (1, &b)]).unwrap();
        assert_eq!((r.correct, r.total), (2, 3));
        assert_eq!(r.per_class[&0], (1, 2));
        assert_eq!(r.predictions, vec![0, 1, 1]);
        let single = evaluate(&clf, &[(1, &a)]).unwrap();
        assert_eq!(single.accuracy(), 0.0);
        assert!(evaluate(&clf, &[]).is_err());
    }

    #[test]
    fn mean_std_examples() {
        let (m, s) = mean_std(&[0.7, 0.8, 0.9]);
        assert!((m - 0.8).abs() < 1e-15);
        assert!((s - 0.1).abs() < 1e-12);
        assert_eq!(mean_std(&[0.42]), (0.42, 0.0));
        assert_eq!(mean_std(&[0.5, 0.5]).1, 0.0);
    }

    #[test]
    fn config_validation() {
        let mut c = ScenarioConfig::new(Method::ZeroShot);
        assert!(c.validate().is_ok());
        c.optimizer = Some(OptimizerConfig::sgd_default());
        assert!(matches!(c.validate(), Err(Error::Config(_))));

        let mut c = ScenarioConfig::new(Method::AdapterPlain);
        c.kd = Some(KdConfig::default());
        assert!(c.validate().is_err());
        c.method = Method::AdapterKd;
        assert!(c.validate().is_ok());

        let mut c = ScenarioConfig::new(Method::AdapterRetention);
        c.retention.gamma = 1.2;
        assert!(c.validate().is_err());
        let mut c = ScenarioConfig::new(Method::AdapterRetention);
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_strict() {
        let c: ScenarioConfig = serde_json::from_str(r#"{"method":"adapter_retention"}"#).unwrap();
        assert_eq!(c, ScenarioConfig::new(Method::AdapterRetention));
        assert!(serde_json::from_str::<ScenarioConfig>(r#"{"method":"zero_shot","epoch":3}"#).is_err());
        let c: ScenarioConfig = serde_json::from_str(
            r#"{"method":"adapter_plain","adapter":{"kind":"self_attention","attention_mode":"scalar","init":{"scheme":"gaussian"}}}"#,
        )
        .unwrap();
        assert_eq!(c.adapter.attention_mode, AttentionMode::Scalar);
        assert_eq!(c.adapter.init_scheme(), InitScheme::Gaussian);
    }

    #[test]
    fn tiny_runs_have_consistent_matrices() {
        let (ds, m) = tiny_dataset();
        for method in [
            Method::ZeroShot,
            Method::AdapterPlain,
            Method::AdapterRetention,
            Method::LinearProbe,
            Method::AdapterKd,
        ] {
            let mut c = ScenarioConfig::new(method);
            if method != Method::ZeroShot {
                c.epochs = 3;
                c.batch_size = 4;
                c.exemplar_budget = 4;
            }
            let out = run_on(&ds, &m, &c, 1).unwrap();
            let r = &out.result;
            assert_eq!(r.accuracy.overall.len(), 2);
            for t in 0..2 {
                assert_eq!(r.accuracy.per_task[t].len(), t + 1);
                assert!((r.accuracy.weighted_row(t) - r.accuracy.overall[t]).abs() < 1e-12);
            }
            let mean = r.accuracy.overall.iter().sum::<f64>() / 2.0;
            assert!((r.avg - mean).abs() < 1e-12);
            assert_eq!(r.last, r.accuracy.overall[1]);
            assert_eq!(out.predictions[1].len(), 4);
            assert_eq!(r.csv_rows().len(), 2);
        }
    }

    #[test]
    fn zero_shot_on_aligned_data_is_perfect() {
        let (ds, m) = tiny_dataset();
        let out = run_on(&ds, &m, &ScenarioConfig::new(Method::ZeroShot), 0).unwrap();
        assert_eq!(out.result.accuracy.overall, vec![1.0, 1.0]);
    }

    #[test]
    fn aggregate_rejects_mixed_configs() {
        let (ds, m) = tiny_dataset();
        let zs = ScenarioConfig::new(Method::ZeroShot);
        let a = run_on(&ds, &m, &zs, 1).unwrap().result;
        let b = run_on(&ds, &m, &zs, 2).unwrap().result;
        let agg = aggregate(&[a.clone(), b]).unwrap();
        assert_eq!(agg.n, 2);
        assert_eq!(agg.avg_std, 0.0);
        let mut other = a.clone();
        other.config.exemplar_budget = 7;
        assert!(aggregate(&[a, other]).is_err());
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn result_json_round_trips() {
        let (ds, m) = tiny_dataset();
        let mut c = ScenarioConfig::new(Method::AdapterRetention);
        c.epochs = 2;
        let r = run_on(&ds, &m, &c, 4).unwrap().result;
        let json = r.to_json().unwrap();
        let back = RunResult::from_json(&json).unwrap();
        assert_eq!(back.accuracy, r.accuracy);
        assert_eq!(back.avg.to_bits(), r.avg.to_bits());
        assert_eq!(back.to_json().unwrap(), json);
    }
}
