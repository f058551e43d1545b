//! Episodic evaluation, baselines, ablation and report export.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{DatasetCatalog, FeatureTable, Representation, SplitFile, SplitSide};
use crate::episodes::{sample_episode_in_stream, Episode, EpisodeSpec};
use crate::error::{Error, Result};
use crate::fewshot;
use crate::nnet::Encoder;
use crate::rng::stream;

pub const DEFAULT_EPISODES: usize = 600;
pub const MULTI_SEEDS: [u64; 3] = [42, 1337, 2024];
pub const ABLATION_SHOTS: [usize; 3] = [1, 3, 5];

/// Maps feature rows to embeddings.
pub trait Embedder: Sync {
    fn embed(&self, x: &Array2<f64>) -> Result<Array2<f64>>;
}

/// Uses feature vectors as embeddings.
#[derive(Debug, Clone, Copy, Default)]
pub struct Identity;

impl Embedder for Identity {
    fn embed(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        Ok(x.clone())
    }
}

impl Embedder for Encoder {
    fn embed(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.forward_eval(x)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSpec {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub episodes: usize,
    pub seed: u64,
}

impl Default for EvalSpec {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 5,
            q_query: 15,
            episodes: DEFAULT_EPISODES,
            seed: 42,
        }
    }
}

impl EvalSpec {
    pub fn episode_spec(&self) -> Result<EpisodeSpec> {
        if self.episodes == 0 {
            return Err(Error::Config("episodes must be at least 1".into()));
        }
        EpisodeSpec::new(self.n_way, self.k_shot, self.q_query, self.seed)
    }
}

/// How queries are labelled inside an episode.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classifier {
    NearestPrototype,
    /// Softmax regression fitted on the support embeddings.
    EpisodeLinear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub q_query: usize,
    pub episodes: usize,
    pub seed: u64,
    pub representation: String,
    /// `none` for input-space evaluation, otherwise a description of the
    /// encoder state (e.g. a checkpoint digest).
    pub encoder: String,
    pub classifier: Classifier,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    pub class_id: usize,
    pub class_name: String,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionEntry {
    pub true_class: usize,
    pub predicted_class: usize,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config: ReportConfig,
    pub mean: f64,
    pub std: f64,
    pub ci95_halfwidth: f64,
    pub total_queries: usize,
    pub episode_accuracies: Vec<f64>,
    /// Ascending by class id.
    pub per_class_accuracy: Vec<ClassAccuracy>,
    /// Non-zero cells, ascending by (true, predicted).
    pub confusion: Vec<ConfusionEntry>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_text(path.as_ref(), &self.to_json()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Sample standard deviation (`n - 1` denominator); zero for fewer than two values.
pub fn sample_std(values: &[f64]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let ss: f64 = values.iter().map(|v| (v - mean) * (v - mean)).sum();
    (ss / (n - 1) as f64).sqrt()
}

/// `1.96 * sample_std / sqrt(n)`.
pub fn ci95_halfwidth(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    1.96 * sample_std(values) / (values.len() as f64).sqrt()
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// Full-batch gradient-descent softmax regression.
///
/// Inputs are standardised per dimension with the fit set's statistics and
/// divided by `sqrt(dim)`, which bounds the curvature of the mean
/// cross-entropy by 1/2 so that the fixed step size is stable.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SoftmaxConfig {
    pub iterations: usize,
    pub learning_rate: f64,
    /// Penalty `l2 / 2 * ||W||^2`; biases are not penalised.
    pub l2: f64,
}

impl Default for SoftmaxConfig {
    fn default() -> Self {
        Self {
            iterations: 500,
            learning_rate: 0.1,
            l2: 1e-3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxRegression {
    shift: Array1<f64>,
    scale: Array1<f64>,
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl SoftmaxRegression {
    /// Fits `n_classes` outputs to rows `x` with labels in `0..n_classes`,
    /// starting from zero weights.
    pub fn fit(x: ArrayView2<f64>, labels: &[usize], n_classes: usize, cfg: &SoftmaxConfig) -> Result<Self> {
        let (n, d) = x.dim();
        if n == 0 || n != labels.len() {
            return Err(Error::Shape(format!("{n} rows for {} labels", labels.len())));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
            return Err(Error::Shape(format!("label {bad} out of range for {n_classes} classes")));
        }
        let shift = x.mean_axis(Axis(0)).expect("non-empty");
        let root_d = (d as f64).sqrt();
        let scale = x.std_axis(Axis(0), 0.0).mapv(|sd| 1.0 / (sd.max(1e-8) * root_d));
        let z = (&x - &shift) * &scale;

        let mut onehot = Array2::<f64>::zeros((n, n_classes));
        for (i, &l) in labels.iter().enumerate() {
            onehot[[i, l]] = 1.0;
        }
        let mut w = Array2::<f64>::zeros((d, n_classes));
        let mut b = Array1::<f64>::zeros(n_classes);
        for _ in 0..cfg.iterations {
            let mut p = z.dot(&w) + &b;
            softmax_rows(&mut p);
            p -= &onehot;
            p /= n as f64;
            let gw = z.t().dot(&p) + &w * cfg.l2;
            let gb = p.sum_axis(Axis(0));
            w.scaled_add(-cfg.learning_rate, &gw);
            b.scaled_add(-cfg.learning_rate, &gb);
        }
        Ok(Self {
            shift,
            scale,
            weights: w,
            bias: b,
        })
    }

    pub fn logits(&self, x: ArrayView2<f64>) -> Array2<f64> {
        ((&x - &self.shift) * &self.scale).dot(&self.weights) + &self.bias
    }

    /// Arg-max class per row; ties go to the lowest index.
    pub fn predict(&self, x: ArrayView2<f64>) -> Vec<usize> {
        self.logits(x)
            .rows()
            .into_iter()
            .map(|r| {
                let mut best = 0;
                for (j, &v) in r.iter().enumerate() {
                    if v > r[best] {
                        best = j;
                    }
                }
                best
            })
            .collect()
    }
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

struct EpisodeResult {
    accuracy: f64,
    /// (true class id, predicted class id) per query.
    pairs: Vec<(usize, usize)>,
}

fn run_episode<E: Embedder + ?Sized>(
    embedder: &E,
    table: &FeatureTable,
    episode: &Episode,
    classifier: Classifier,
    softmax: &SoftmaxConfig,
) -> Result<EpisodeResult> {
    let rows: Vec<usize> = episode.support_rows().into_iter().chain(episode.query_rows()).collect();
    let emb = embedder.embed(&table.features.select(Axis(0), &rows))?;
    let ns = episode.support.len();
    let support = emb.slice(s![..ns, ..]);
    let query = emb.slice(s![ns.., ..]);
    let support_labels = episode.support_labels();
    let predicted = match classifier {
        Classifier::NearestPrototype => {
            let protos = fewshot::compute_prototypes(support, &support_labels, episode.n_way())?;
            fewshot::classify(query, &protos)
        }
        Classifier::EpisodeLinear => {
            SoftmaxRegression::fit(support, &support_labels, episode.n_way(), softmax)?.predict(query)
        }
    };
    let pairs: Vec<(usize, usize)> = episode
        .query
        .iter()
        .zip(&predicted)
        .map(|(item, &p)| (episode.class_map[item.label], episode.class_map[p]))
        .collect();
    let correct = pairs.iter().filter(|(t, p)| t == p).count();
    Ok(EpisodeResult {
        accuracy: correct as f64 / pairs.len() as f64,
        pairs,
    })
}

/// Evaluates `spec.episodes` episodes (indices `0..episodes`, seeds
/// `spec.seed + index`) drawn from the classes of `table` with at least
/// `K + Q` rows. Episodes run in parallel; results are aggregated in index
/// order, so the report does not depend on the worker count.
pub fn evaluate_with<E: Embedder + ?Sized>(
    embedder: &E,
    encoder_label: &str,
    table: &FeatureTable,
    spec: &EvalSpec,
    classifier: Classifier,
) -> Result<EvalReport> {
    let ep_spec = spec.episode_spec()?;
    let pool = table.eligible_pool(spec.k_shot, spec.q_query);
    if pool.len() < spec.n_way {
        return Err(Error::InsufficientClasses {
            needed: spec.n_way,
            available: pool.len(),
        });
    }
    let softmax = SoftmaxConfig::default();
    let results: Vec<EpisodeResult> = (0..spec.episodes as u64)
        .into_par_iter()
        .map(|i| {
            let episode = sample_episode_in_stream(&pool, &ep_spec.at(i), stream::EPISODE)?;
            run_episode(embedder, table, &episode, classifier, &softmax)
        })
        .collect::<Result<_>>()?;

    let accuracies: Vec<f64> = results.iter().map(|r| r.accuracy).collect();
    let mut confusion: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for r in &results {
        for &pair in &r.pairs {
            *confusion.entry(pair).or_insert(0) += 1;
        }
    }
    let mut per_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for (&(t, p), &count) in &confusion {
        let e = per_class.entry(t).or_insert((0, 0));
        e.1 += count;
        if t == p {
            e.0 += count;
        }
    }
    let class_name = |c: usize| table.class_names.get(c).cloned().unwrap_or_else(|| c.to_string());
    Ok(EvalReport {
        config: ReportConfig {
            n_way: spec.n_way,
            k_shot: spec.k_shot,
            q_query: spec.q_query,
            episodes: spec.episodes,
            seed: spec.seed,
            representation: table.representation.name().to_owned(),
            encoder: encoder_label.to_owned(),
            classifier,
        },
        mean: mean(&accuracies),
        std: sample_std(&accuracies),
        ci95_halfwidth: ci95_halfwidth(&accuracies),
        total_queries: confusion.values().sum(),
        episode_accuracies: accuracies,
        per_class_accuracy: per_class
            .into_iter()
            .map(|(class_id, (correct, total))| ClassAccuracy {
                class_id,
                class_name: class_name(class_id),
                correct,
                total,
                accuracy: correct as f64 / total as f64,
            })
            .collect(),
        confusion: confusion
            .into_iter()
            .map(|((t, p), count)| ConfusionEntry {
                true_class: t,
                predicted_class: p,
                count,
            })
            .collect(),
    })
}

/// Nearest-prototype evaluation with an encoder, or in input space when
/// `encoder` is `None`.
pub fn evaluate(encoder: Option<(&Encoder, &str)>, table: &FeatureTable, spec: &EvalSpec) -> Result<EvalReport> {
    match encoder {
        Some((enc, label)) => evaluate_with(enc, label, table, spec, Classifier::NearestPrototype),
        None => input_space_baseline(table, spec),
    }
}

pub fn input_space_baseline(table: &FeatureTable, spec: &EvalSpec) -> Result<EvalReport> {
    evaluate_with(&Identity, "none", table, spec, Classifier::NearestPrototype)
}

pub fn episode_linear_baseline(
    encoder: &Encoder,
    encoder_label: &str,
    table: &FeatureTable,
    spec: &EvalSpec,
) -> Result<EvalReport> {
    evaluate_with(encoder, encoder_label, table, spec, Classifier::EpisodeLinear)
}

/// Softmax regression on every training row, scored on every test row.
/// Test rows of classes absent from training count as errors.
pub fn full_data_linear(train: &FeatureTable, test: &FeatureTable) -> Result<f64> {
    let classes: Vec<usize> = train.class_counts().into_keys().collect();
    if classes.len() < 2 {
        return Err(Error::DegenerateProblem(format!(
            "training split has {} class(es); at least 2 are needed",
            classes.len()
        )));
    }
    if test.is_empty() {
        return Err(Error::DegenerateProblem("test split is empty".into()));
    }
    let index: BTreeMap<usize, usize> = classes.iter().enumerate().map(|(i, &c)| (c, i)).collect();
    let labels: Vec<usize> = train.class_ids.iter().map(|c| index[c]).collect();
    let model = SoftmaxRegression::fit(train.features.view(), &labels, classes.len(), &SoftmaxConfig::default())?;
    let predicted = model.predict(test.features.view());
    let correct = predicted
        .iter()
        .zip(&test.class_ids)
        .filter(|(&p, &c)| classes[p] == c)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

/// Row labels of the cumulative normalisation ablation with the input
/// representation each row uses.
pub const ABLATION_SETTINGS: [(&str, Representation); 3] = [
    ("No normalisation", Representation::RawUnnormalized),
    ("+ Wrist-centring & scale", Representation::Raw),
    ("+ Geometry-aware (angle)", Representation::Angle),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub k_shot: usize,
    pub mean: f64,
    pub ci95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub representation: Representation,
    pub cells: Vec<AblationCell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub dataset: String,
    pub encoder: String,
    pub rows: Vec<AblationRow>,
}

/// Runs the three ablation settings for each K in `shots` on the test side
/// of `split`. `embedder_for` supplies the encoder for a representation;
/// returning `None` evaluates in input space.
pub fn ablation_normalization<F>(
    catalog: &DatasetCatalog,
    split: &SplitFile,
    spec: &EvalSpec,
    shots: &[usize],
    mut embedder_for: F,
) -> Result<AblationTable>
where
    F: FnMut(Representation) -> Result<Option<(Encoder, String)>>,
{
    let mut rows = Vec::with_capacity(ABLATION_SETTINGS.len());
    let mut encoder_labels = Vec::new();
    for (setting, repr) in ABLATION_SETTINGS {
        let table = FeatureTable::from_split(catalog, split, SplitSide::Test, repr)?;
        let embedder = embedder_for(repr)?;
        let label = embedder.as_ref().map_or("none".to_owned(), |(_, l)| l.clone());
        encoder_labels.push(label.clone());
        let mut cells = Vec::with_capacity(shots.len());
        for &k in shots {
            let s = EvalSpec { k_shot: k, ..*spec };
            let report = match &embedder {
                Some((enc, l)) => evaluate_with(enc, l, &table, &s, Classifier::NearestPrototype)?,
                None => input_space_baseline(&table, &s)?,
            };
            cells.push(AblationCell {
                k_shot: k,
                mean: report.mean,
                ci95: report.ci95_halfwidth,
            });
        }
        rows.push(AblationRow {
            setting: setting.to_owned(),
            representation: repr,
            cells,
        });
    }
    encoder_labels.dedup();
    Ok(AblationTable {
        dataset: catalog.name.clone(),
        encoder: encoder_labels.join("+"),
        rows,
    })
}

impl AblationTable {
    pub fn table_rows(&self, mode: &str) -> Vec<TableRow> {
        let mut out = Vec::new();
        for row in &self.rows {
            for cell in &row.cells {
                out.push(TableRow {
                    dataset: self.dataset.clone(),
                    repr: row.setting.clone(),
                    encoder: self.encoder.clone(),
                    mode: mode.to_owned(),
                    k: cell.k_shot,
                    mean: cell.mean,
                    ci95: cell.ci95,
                });
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub mean: f64,
    pub ci95: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MultiSeedReport {
    pub per_seed: Vec<SeedResult>,
    pub mean_of_means: f64,
    /// Across-seed sample standard deviation of the means.
    pub std: f64,
}

/// Runs `run(seed)` for each seed and aggregates the means.
pub fn multi_seed<F>(seeds: &[u64], mut run: F) -> Result<MultiSeedReport>
where
    F: FnMut(u64) -> Result<EvalReport>,
{
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let report = run(seed)?;
        per_seed.push(SeedResult {
            seed,
            mean: report.mean,
            ci95: report.ci95_halfwidth,
        });
    }
    let means: Vec<f64> = per_seed.iter().map(|r| r.mean).collect();
    Ok(MultiSeedReport {
        mean_of_means: mean(&means),
        std: sample_std(&means),
        per_seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorAnalysis {
    /// Ascending by accuracy, then class id.
    pub ranking: Vec<ClassAccuracy>,
    /// Off-diagonal confusion cells, descending by count, then ascending by
    /// (true, predicted).
    pub confused_pairs: Vec<ConfusionEntry>,
}

pub fn error_analysis(report: &EvalReport) -> ErrorAnalysis {
    let mut ranking = report.per_class_accuracy.clone();
    ranking.sort_by(|a, b| a.accuracy.total_cmp(&b.accuracy).then(a.class_id.cmp(&b.class_id)));
    let mut confused_pairs: Vec<ConfusionEntry> = report
        .confusion
        .iter()
        .filter(|e| e.true_class != e.predicted_class && e.count > 0)
        .copied()
        .collect();
    confused_pairs.sort_by(|a, b| {
        b.count
            .cmp(&a.count)
            .then(a.true_class.cmp(&b.true_class))
            .then(a.predicted_class.cmp(&b.predicted_class))
    });
    ErrorAnalysis { ranking, confused_pairs }
}

/// One line of a results table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub dataset: String,
    pub repr: String,
    pub encoder: String,
    pub mode: String,
    #[serde(rename = "K")]
    pub k: usize,
    pub mean: f64,
    pub ci95: f64,
}

impl TableRow {
    pub fn from_report(dataset: &str, mode: &str, report: &EvalReport) -> Self {
        Self {
            dataset: dataset.to_owned(),
            repr: report.config.representation.clone(),
            encoder: report.config.encoder.clone(),
            mode: mode.to_owned(),
            k: report.config.k_shot,
            mean: report.mean,
            ci95: report.ci95_halfwidth,
        }
    }
}

pub fn table_csv(rows: &[TableRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    // An empty table still gets its header.
    if rows.is_empty() {
        w.write_record(["dataset", "repr", "encoder", "mode", "K", "mean", "ci95"])
            .map_err(|e| Error::Config(format!("csv: {e}")))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn write_table_csv(rows: &[TableRow], path: impl AsRef<Path>) -> Result<()> {
    write_text(path.as_ref(), &table_csv(rows)?)
}

/// LaTeX `tabular` body with accuracies as percentages.
pub fn table_latex(rows: &[TableRow]) -> String {
    let mut out = String::from("\\begin{tabular}{lllllr}\n\\hline\nDataset & Repr. & Encoder & Mode & $K$ & Accuracy (\\%) \\\\\n\\hline\n");
    for r in rows {
        out.push_str(&format!(
            "{} & {} & {} & {} & {} & {:.1} $\\pm$ {:.1} \\\\\n",
            latex_escape(&r.dataset),
            latex_escape(&r.repr),
            latex_escape(&r.encoder),
            latex_escape(&r.mode),
            r.k,
            100.0 * r.mean,
            100.0 * r.ci95
        ));
    }
    out.push_str("\\hline\n\\end{tabular}\n");
    out
}

fn latex_escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' | '%' | '$' | '#' | '_' | '{' | '}' => {
                out.push('\\');
                out.push(c);
            }
            _ => out.push(c),
        }
    }
    out
}
