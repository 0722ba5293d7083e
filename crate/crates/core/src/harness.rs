//! Experiment drivers and artifact persistence behind the `rlcs` binary.
//!
//! Every command is a pure function of the configuration, its seed and the
//! files it reads. Artifacts live under `output_dir`:
//!
//! ```text
//! data/{human,sft,rl_human,rl_syn,eval}.jsonl   header line, then one record per line
//! data/manifest.json                            seed, config hash, kept/dropped counts
//! checkpoints/<stage>.policy                    policy text format
//! checkpoints/<stage>.meta.json                 stage, seed, config hash, parameter hash
//! metrics/<stage>.csv                           `# config_hash <hex>` line, then the table
//! reports/eval_<target>.json
//! reports/sweep_rollout.csv, reports/sweep_rollout_timing.csv
//! reports/ablate_shaping.csv, reports/ablate_shaping.json
//! ```
//!
//! Every artifact records the config hash and loading an artifact written
//! under a different configuration fails. Wall-clock measurements are kept
//! out of the deterministic files and written to `*_timing.csv` instead.

use std::fmt;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::{Error, Result};
use crate::genrm::{
    evaluate_accuracy, initial_params, train_genrm_grpo, train_genrm_sft, EvalReport, GenrmConfig,
    GenrmJudge, JudgeEncoder, ReferenceJudge,
};
use crate::grpo::{write_metrics_csv, GrpoRun, MetricsRow};
use crate::pipeline::{build_datasets, DataCounts, Datasets};
use crate::policy::PolicyParameters;
use crate::preference::{PreferenceRecord, StoryContext};
use crate::shaping::ShapingWeights;
use crate::sft::SftOutcome;
use crate::story::{
    generate_story_items, mean_story_quality, train_story_policy, train_story_sft, ComparatorKind,
    GenrmComparator, OracleComparator, StoryItem,
};
use crate::stream_rng;

// rng streams under the experiment seed
const STREAM_GENRM_INIT: u64 = 0;
const STREAM_GENRM_SFT: u64 = 1;
const STREAM_GENRM_GRPO: u64 = 2;
const STREAM_STORY_ITEMS: u64 = 19;
const STREAM_STORY_SFT: u64 = 20;
const STREAM_STORY_RL: u64 = 21;
const STREAM_STORY_EVAL: u64 = 30;
const STREAM_GENRM_EVAL: u64 = 31;

const DATASETS: [&str; 5] = ["human", "sft", "rl_human", "rl_syn", "eval"];
const GEN_DATA: &str = "gen-data";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    GenrmSft,
    GenrmGrpo,
    StorySft,
    StoryRl,
}

impl Stage {
    pub const ALL: [Stage; 4] = [Stage::GenrmSft, Stage::GenrmGrpo, Stage::StorySft, Stage::StoryRl];

    pub fn name(self) -> &'static str {
        match self {
            Stage::GenrmSft => "genrm_sft",
            Stage::GenrmGrpo => "genrm_grpo",
            Stage::StorySft => "story_sft",
            Stage::StoryRl => "story_rl",
        }
    }

    pub fn is_genrm(self) -> bool {
        matches!(self, Stage::GenrmSft | Stage::GenrmGrpo)
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stage::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown stage `{s}`")))
    }
}

/// Paths of every artifact under one output directory.
#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn dataset(&self, name: &str) -> PathBuf {
        self.root.join("data").join(format!("{name}.jsonl"))
    }

    pub fn manifest(&self) -> PathBuf {
        self.root.join("data").join("manifest.json")
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stage}.policy"))
    }

    pub fn checkpoint_meta(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(format!("{stage}.meta.json"))
    }

    pub fn metrics(&self, stage: Stage) -> PathBuf {
        self.root.join("metrics").join(format!("{stage}.csv"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut out = serde_json::to_vec_pretty(value).expect("report serializes");
    out.push(b'\n');
    out
}

fn check_hash(path: &Path, found: &str, expected: &str) -> Result<()> {
    if found == expected {
        Ok(())
    } else {
        Err(Error::HashMismatch {
            path: path.to_path_buf(),
            expected: expected.to_string(),
            found: found.to_string(),
        })
    }
}

fn missing(requested: &str, needed: &str, path: &Path) -> Error {
    Error::MissingStage {
        requested: requested.to_string(),
        needed: needed.to_string(),
        path: path.to_path_buf(),
    }
}

fn hash_prefixed_csv(hash: &str, body: &[u8]) -> Vec<u8> {
    let mut out = format!("# config_hash {hash}\n").into_bytes();
    out.extend_from_slice(body);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetHeader {
    pub dataset: String,
    pub config_hash: String,
    pub records: usize,
}

pub fn write_dataset(path: &Path, name: &str, hash: &str, records: &[PreferenceRecord]) -> Result<()> {
    let header = DatasetHeader {
        dataset: name.to_string(),
        config_hash: hash.to_string(),
        records: records.len(),
    };
    let mut out = serde_json::to_vec(&header).expect("header serializes");
    out.push(b'\n');
    for r in records {
        serde_json::to_writer(&mut out, r).expect("record serializes");
        out.push(b'\n');
    }
    write_file(path, &out)
}

pub fn read_dataset(path: &Path, hash: &str) -> Result<Vec<PreferenceRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let ctx = path.display().to_string();
    let mut lines = text.lines();
    let header: DatasetHeader = serde_json::from_str(lines.next().unwrap_or(""))
        .map_err(|e| Error::parse(ctx.clone(), format!("header: {e}")))?;
    check_hash(path, &header.config_hash, hash)?;
    let records = lines
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(ctx.clone(), format!("line {}: {e}", i + 2))))
        .collect::<Result<Vec<PreferenceRecord>>>()?;
    if records.len() != header.records {
        return Err(Error::parse(
            ctx,
            format!("header announces {} records, found {}", header.records, records.len()),
        ));
    }
    Ok(records)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub stage: Stage,
    pub seed: u64,
    pub config_hash: String,
    pub params_hash: String,
}

pub fn write_checkpoint(layout: &Layout, stage: Stage, config: &ExperimentConfig, params: &PolicyParameters) -> Result<()> {
    let meta = CheckpointMeta {
        stage,
        seed: config.seed,
        config_hash: config.hash(),
        params_hash: params.content_hash(),
    };
    write_file(&layout.checkpoint(stage), params.to_text().as_bytes())?;
    write_file(&layout.checkpoint_meta(stage), &to_json(&meta))
}

/// Loads the checkpoint of `stage`; `requested` names the stage that needs it.
pub fn read_checkpoint(layout: &Layout, stage: Stage, config: &ExperimentConfig, requested: &str) -> Result<PolicyParameters> {
    let path = layout.checkpoint(stage);
    let meta_path = layout.checkpoint_meta(stage);
    if !path.exists() || !meta_path.exists() {
        return Err(missing(requested, stage.name(), &path));
    }
    let meta_text = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta =
        serde_json::from_str(&meta_text).map_err(|e| Error::parse(meta_path.display().to_string(), e))?;
    check_hash(&meta_path, &meta.config_hash, &config.hash())?;
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let params = PolicyParameters::from_text(&text)?;
    if params.content_hash() != meta.params_hash {
        return Err(Error::parse(path.display().to_string(), "parameters do not match their metadata"));
    }
    Ok(params)
}

fn load_data(layout: &Layout, config: &ExperimentConfig, name: &str, requested: &str) -> Result<Vec<PreferenceRecord>> {
    let path = layout.dataset(name);
    if !path.exists() {
        return Err(missing(requested, GEN_DATA, &path));
    }
    read_dataset(&path, &config.hash())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config_hash: String,
    pub counts: DataCounts,
}

/// Builds and writes every dataset and the manifest.
pub fn cmd_gen_data(config: &ExperimentConfig) -> Result<Manifest> {
    config.validate()?;
    let layout = Layout::new(&config.output_dir);
    let hash = config.hash();
    let d = build_datasets(&config.data, &config.oracle, config.seed)?;
    for (name, records) in DATASETS.iter().zip([&d.human, &d.sft, &d.rl_human, &d.rl_syn, &d.eval]) {
        write_dataset(&layout.dataset(name), name, &hash, records)?;
    }
    let manifest = Manifest {
        seed: config.seed,
        config_hash: hash,
        counts: d.counts(config.data.synthetic_records),
    };
    write_file(&layout.manifest(), &to_json(&manifest))?;
    Ok(manifest)
}

fn sft_metrics_csv(outcome: &SftOutcome) -> Vec<u8> {
    let mut out = b"epoch,mean_loss\n".to_vec();
    for (k, loss) in outcome.epoch_losses.iter().enumerate() {
        let _ = writeln!(out, "{},{loss}", k + 1);
    }
    out
}

fn grpo_metrics_csv(rows: &[MetricsRow]) -> Vec<u8> {
    let mut out = Vec::new();
    write_metrics_csv(rows, &mut out).expect("writing to memory");
    out
}

/// Story training contexts with their reference stories.
pub fn story_training_items(config: &ExperimentConfig) -> Result<Vec<StoryItem>> {
    generate_story_items(
        config.story.dataset_size,
        &config.data.shape,
        &config.oracle,
        config.vocabulary()?.eos(),
        &mut stream_rng(config.seed, STREAM_STORY_ITEMS),
    )
}

pub fn genrm_sft_stage(config: &ExperimentConfig, encoder: &JudgeEncoder, d_sft: &[PreferenceRecord]) -> Result<SftOutcome> {
    let init = initial_params(
        config.vocabulary()?,
        &config.genrm,
        &mut stream_rng(config.seed, STREAM_GENRM_INIT),
    )?;
    train_genrm_sft(&init, encoder, d_sft, &config.genrm, &mut stream_rng(config.seed, STREAM_GENRM_SFT))
}

pub fn genrm_grpo_stage(
    config: &ExperimentConfig,
    genrm: &GenrmConfig,
    encoder: &JudgeEncoder,
    sft_params: &PolicyParameters,
    d_rl: &[PreferenceRecord],
) -> Result<GrpoRun> {
    genrm.validate()?;
    train_genrm_grpo(sft_params, encoder, d_rl, genrm, &mut stream_rng(config.seed, STREAM_GENRM_GRPO))
}

pub fn story_sft_stage(config: &ExperimentConfig, items: &[StoryItem]) -> Result<SftOutcome> {
    let init = PolicyParameters::zeros(config.vocabulary()?, config.story.window)?;
    train_story_sft(&init, items, &config.story, &mut stream_rng(config.seed, STREAM_STORY_SFT))
}

/// Story RL with the configured comparator; `genrm` is required only when
/// the comparator is the reward model.
pub fn story_rl_stage(
    config: &ExperimentConfig,
    encoder: &JudgeEncoder,
    sft_params: &PolicyParameters,
    genrm: Option<&PolicyParameters>,
    items: &[StoryItem],
) -> Result<GrpoRun> {
    let mut rng = stream_rng(config.seed, STREAM_STORY_RL);
    match config.story.comparator {
        ComparatorKind::Oracle => {
            let comparator = OracleComparator {
                oracle: config.oracle.clone(),
            };
            train_story_policy(sft_params, &comparator, items, &config.oracle, &config.story, &mut rng)
        }
        ComparatorKind::Genrm => {
            let params = genrm.ok_or_else(|| Error::InvalidArgument("GenRM comparator needs GenRM parameters".into()))?;
            let comparator = GenrmComparator {
                judge: GenrmJudge {
                    params,
                    encoder,
                    reasoning_cap: config.genrm.reasoning_cap,
                },
                both_orders: config.story.comparator_both_orders,
            };
            train_story_policy(sft_params, &comparator, items, &config.oracle, &config.story, &mut rng)
        }
    }
}

pub fn genrm_accuracy(config: &ExperimentConfig, encoder: &JudgeEncoder, params: &PolicyParameters, eval: &[PreferenceRecord]) -> Result<EvalReport> {
    let judge = GenrmJudge {
        params,
        encoder,
        reasoning_cap: config.genrm.reasoning_cap,
    };
    evaluate_accuracy(&judge, eval, &mut stream_rng(config.seed, STREAM_GENRM_EVAL))
}

pub fn story_eval_contexts(config: &ExperimentConfig, eval: &[PreferenceRecord]) -> Vec<StoryContext> {
    eval.iter()
        .take(config.story.eval_contexts)
        .map(|r| r.context.clone())
        .collect()
}

/// Mean oracle quality of sampled stories on held-out contexts; the same
/// sampling stream is used for every policy so comparisons are paired.
pub fn story_quality(config: &ExperimentConfig, params: &PolicyParameters, contexts: &[StoryContext]) -> Result<f64> {
    mean_story_quality(
        params,
        contexts,
        &config.oracle,
        config.story.eval_samples,
        config.story.grpo.max_response_len,
        &mut stream_rng(config.seed, STREAM_STORY_EVAL),
    )
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub stage: Stage,
    pub checkpoint: PathBuf,
    pub metrics: PathBuf,
    pub metrics_rows: usize,
    pub params_hash: String,
}

/// Trains one stage from its upstream artifacts and writes its checkpoint
/// and metrics CSV.
pub fn cmd_train(config: &ExperimentConfig, stage: Stage) -> Result<TrainSummary> {
    config.validate()?;
    let layout = Layout::new(&config.output_dir);
    let encoder = config.encoder()?;
    let requested = stage.name();
    let (params, csv, rows) = match stage {
        Stage::GenrmSft => {
            let d_sft = load_data(&layout, config, "sft", requested)?;
            let out = genrm_sft_stage(config, &encoder, &d_sft)?;
            let csv = sft_metrics_csv(&out);
            (out.params, csv, out.epoch_losses.len())
        }
        Stage::GenrmGrpo => {
            let sft = read_checkpoint(&layout, Stage::GenrmSft, config, requested)?;
            let mut d_rl = load_data(&layout, config, "rl_human", requested)?;
            d_rl.extend(load_data(&layout, config, "rl_syn", requested)?);
            let run = genrm_grpo_stage(config, &config.genrm, &encoder, &sft, &d_rl)?;
            (run.params, grpo_metrics_csv(&run.metrics), run.metrics.len())
        }
        Stage::StorySft => {
            let items = story_training_items(config)?;
            let out = story_sft_stage(config, &items)?;
            let csv = sft_metrics_csv(&out);
            (out.params, csv, out.epoch_losses.len())
        }
        Stage::StoryRl => {
            let sft = read_checkpoint(&layout, Stage::StorySft, config, requested)?;
            let genrm = match config.story.comparator {
                ComparatorKind::Genrm => Some(read_checkpoint(&layout, Stage::GenrmGrpo, config, requested)?),
                ComparatorKind::Oracle => None,
            };
            let items = story_training_items(config)?;
            let run = story_rl_stage(config, &encoder, &sft, genrm.as_ref(), &items)?;
            (run.params, grpo_metrics_csv(&run.metrics), run.metrics.len())
        }
    };
    write_checkpoint(&layout, stage, config, &params)?;
    write_file(&layout.metrics(stage), &hash_prefixed_csv(&config.hash(), &csv))?;
    Ok(TrainSummary {
        stage,
        checkpoint: layout.checkpoint(stage),
        metrics: layout.metrics(stage),
        metrics_rows: rows,
        params_hash: params.content_hash(),
    })
}

/// What `eval` measures.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EvalTarget {
    Stage(Stage),
    /// Fair-coin judge: the chance-level reference.
    Coin,
    /// Always-first judge: the fully position-biased reference.
    AlwaysFirst,
    /// Ground-truth judge.
    Oracle,
}

impl EvalTarget {
    pub fn name(self) -> &'static str {
        match self {
            EvalTarget::Stage(s) => s.name(),
            EvalTarget::Coin => "coin",
            EvalTarget::AlwaysFirst => "always_first",
            EvalTarget::Oracle => "oracle",
        }
    }

    fn is_story(self) -> bool {
        matches!(self, EvalTarget::Stage(s) if !s.is_genrm())
    }
}

impl FromStr for EvalTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coin" => Ok(EvalTarget::Coin),
            "always_first" => Ok(EvalTarget::AlwaysFirst),
            "oracle" => Ok(EvalTarget::Oracle),
            _ => s.parse().map(EvalTarget::Stage),
        }
    }
}

/// Judge metrics or story quality, depending on the target.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Metrics {
    Judge(EvalReport),
    Story { mean_oracle_quality: f64, contexts: usize, samples: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOutput {
    pub target: String,
    pub config_hash: String,
    pub metrics: Metrics,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub baseline: Option<Box<EvalOutput>>,
    /// `target - baseline` for every shared metric, counts excluded.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub paired_delta: Option<serde_json::Map<String, serde_json::Value>>,
}

fn evaluate_target(config: &ExperimentConfig, layout: &Layout, target: EvalTarget) -> Result<EvalOutput> {
    let requested = "eval";
    let eval = load_data(layout, config, "eval", requested)?;
    let metrics = if target.is_story() {
        let EvalTarget::Stage(stage) = target else { unreachable!() };
        let params = read_checkpoint(layout, stage, config, requested)?;
        let contexts = story_eval_contexts(config, &eval);
        Metrics::Story {
            mean_oracle_quality: story_quality(config, &params, &contexts)?,
            contexts: contexts.len(),
            samples: config.story.eval_samples,
        }
    } else {
        let mut rng = stream_rng(config.seed, STREAM_GENRM_EVAL);
        Metrics::Judge(match target {
            EvalTarget::Stage(stage) => {
                let params = read_checkpoint(layout, stage, config, requested)?;
                genrm_accuracy(config, &config.encoder()?, &params, &eval)?
            }
            EvalTarget::Coin => evaluate_accuracy(&ReferenceJudge::Coin, &eval, &mut rng)?,
            EvalTarget::AlwaysFirst => evaluate_accuracy(&ReferenceJudge::AlwaysFirst, &eval, &mut rng)?,
            EvalTarget::Oracle => evaluate_accuracy(&ReferenceJudge::Oracle(config.oracle.clone()), &eval, &mut rng)?,
        })
    };
    Ok(EvalOutput {
        target: target.name().to_string(),
        config_hash: config.hash(),
        metrics,
        baseline: None,
        paired_delta: None,
    })
}

const COUNT_FIELDS: [&str; 3] = ["trials", "contexts", "samples"];

fn numeric_delta(a: &Metrics, b: &Metrics) -> serde_json::Map<String, serde_json::Value> {
    let (serde_json::Value::Object(a), serde_json::Value::Object(b)) =
        (serde_json::to_value(a).expect("metrics serialize"), serde_json::to_value(b).expect("metrics serialize"))
    else {
        return serde_json::Map::new();
    };
    a.iter()
        .filter(|(k, _)| !COUNT_FIELDS.contains(&k.as_str()))
        .filter_map(|(k, x)| Some((k.clone(), serde_json::json!(x.as_f64()? - b.get(k)?.as_f64()?))))
        .collect()
}

/// Evaluates `target`, optionally against `baseline` on the same held-out
/// records, and writes `reports/eval_<target>.json`.
pub fn cmd_eval(config: &ExperimentConfig, target: EvalTarget, baseline: Option<EvalTarget>) -> Result<EvalOutput> {
    config.validate()?;
    let layout = Layout::new(&config.output_dir);
    let mut out = evaluate_target(config, &layout, target)?;
    if let Some(b) = baseline {
        if b.is_story() != target.is_story() {
            return Err(Error::InvalidArgument(format!(
                "cannot compare `{}` with `{}`",
                target.name(),
                b.name()
            )));
        }
        let base = evaluate_target(config, &layout, b)?;
        out.paired_delta = Some(numeric_delta(&out.metrics, &base.metrics));
        out.baseline = Some(Box::new(base));
    }
    let name = match baseline {
        Some(b) => format!("eval_{}_vs_{}.json", target.name(), b.name()),
        None => format!("eval_{}.json", target.name()),
    };
    write_file(&layout.report(&name), &to_json(&out))?;
    Ok(out)
}

/// Population variance of `mean_reward` over the last `window` steps.
pub fn reward_curve_variance(rows: &[MetricsRow], window: usize) -> Result<f64> {
    if window == 0 || rows.len() < window {
        return Err(Error::InvalidArgument(format!(
            "need {window} metric rows, found {}",
            rows.len()
        )));
    }
    let tail: Vec<f64> = rows[rows.len() - window..].iter().map(|r| r.mean_reward).collect();
    let mean = tail.iter().sum::<f64>() / window as f64;
    Ok(tail.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / window as f64)
}

/// Datasets, SFT checkpoint and its held-out accuracy for one seed.
pub struct GenrmBase {
    pub config: ExperimentConfig,
    pub encoder: JudgeEncoder,
    pub datasets: Datasets,
    pub sft: SftOutcome,
    pub sft_eval: EvalReport,
}

pub fn genrm_base(config: &ExperimentConfig, seed: u64) -> Result<GenrmBase> {
    let config = ExperimentConfig {
        seed,
        ..config.clone()
    };
    config.validate()?;
    let encoder = config.encoder()?;
    let datasets = build_datasets(&config.data, &config.oracle, seed)?;
    let sft = genrm_sft_stage(&config, &encoder, &datasets.sft)?;
    let sft_eval = genrm_accuracy(&config, &encoder, &sft.params, &datasets.eval)?;
    Ok(GenrmBase {
        config,
        encoder,
        datasets,
        sft,
        sft_eval,
    })
}

impl GenrmBase {
    /// GRPO from the SFT checkpoint under `genrm`, with held-out accuracy.
    pub fn grpo(&self, genrm: &GenrmConfig) -> Result<(GrpoRun, EvalReport)> {
        let run = genrm_grpo_stage(&self.config, genrm, &self.encoder, &self.sft.params, &self.datasets.rl)?;
        let report = genrm_accuracy(&self.config, &self.encoder, &run.params, &self.datasets.eval)?;
        Ok((run, report))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub group_size: usize,
    pub seed: u64,
    pub sft_accuracy: f64,
    pub final_accuracy: f64,
    pub malformed_rate: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepOutput {
    pub rows: Vec<SweepRow>,
    /// Wall-clock seconds of the GRPO stage per group size.
    pub seconds: Vec<(usize, f64)>,
}

/// GRPO from one shared SFT checkpoint for each group size, at the
/// configured seed.
pub fn cmd_sweep_rollout(config: &ExperimentConfig, group_sizes: &[usize]) -> Result<SweepOutput> {
    if group_sizes.len() < 2 {
        return Err(Error::InvalidArgument("sweep needs at least two group sizes".into()));
    }
    let base = genrm_base(config, config.seed)?;
    let mut rows = Vec::new();
    let mut seconds = Vec::new();
    for &g in group_sizes {
        let mut genrm = config.genrm.clone();
        genrm.grpo.group_size = g;
        let start = Instant::now();
        let (_, report) = base.grpo(&genrm)?;
        seconds.push((g, start.elapsed().as_secs_f64()));
        rows.push(SweepRow {
            group_size: g,
            seed: config.seed,
            sft_accuracy: base.sft_eval.accuracy,
            final_accuracy: report.accuracy,
            malformed_rate: report.malformed_rate,
        });
    }
    let layout = Layout::new(&config.output_dir);
    let hash = config.hash();
    let mut csv = b"group_size,seed,sft_accuracy,final_accuracy,malformed_rate\n".to_vec();
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{}",
            r.group_size, r.seed, r.sft_accuracy, r.final_accuracy, r.malformed_rate
        );
    }
    write_file(&layout.report("sweep_rollout.csv"), &hash_prefixed_csv(&hash, &csv))?;
    let mut timing = b"group_size,wall_clock_seconds\n".to_vec();
    for (g, s) in &seconds {
        let _ = writeln!(timing, "{g},{s:.3}");
    }
    write_file(&layout.report("sweep_rollout_timing.csv"), &hash_prefixed_csv(&hash, &timing))?;
    Ok(SweepOutput { rows, seconds })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Shaped,
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub seed: u64,
    pub variant: Variant,
    pub sft_accuracy: f64,
    pub final_accuracy: f64,
    pub reward_variance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub config_hash: String,
    pub seeds: usize,
    pub variance_window: usize,
    /// Seeds where the shaped variance is at most the uniform one.
    pub shaped_variance_not_higher: usize,
    /// Median over seeds of shaped minus uniform final accuracy.
    pub median_accuracy_delta: f64,
    pub rows: Vec<AblationRow>,
}

/// Shaped and uniform GRPO from the same SFT checkpoint and rollout stream.
/// The uniform variant keeps shaping on with every weight at 1.0.
pub fn ablation_seed(config: &ExperimentConfig, seed: u64) -> Result<[AblationRow; 2]> {
    let base = genrm_base(config, seed)?;
    let window = config.experiments.variance_window;
    let row = |variant, weights| -> Result<AblationRow> {
        let mut genrm = config.genrm.clone();
        genrm.shaping.enabled = true;
        genrm.shaping.weights = weights;
        let (run, report) = base.grpo(&genrm)?;
        Ok(AblationRow {
            seed,
            variant,
            sft_accuracy: base.sft_eval.accuracy,
            final_accuracy: report.accuracy,
            reward_variance: reward_curve_variance(&run.metrics, window)?,
        })
    };
    Ok([
        row(Variant::Shaped, config.genrm.shaping.weights)?,
        row(Variant::Uniform, ShapingWeights::uniform())?,
    ])
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

pub fn cmd_ablate_shaping(config: &ExperimentConfig, seeds: &[u64]) -> Result<AblationSummary> {
    if seeds.len() < 2 {
        return Err(Error::InvalidArgument("ablation needs at least two seeds".into()));
    }
    config.validate()?;
    let pairs = seeds
        .par_iter()
        .map(|&s| ablation_seed(config, s))
        .collect::<Result<Vec<_>>>()?;
    let shaped_variance_not_higher = pairs
        .iter()
        .filter(|[s, u]| s.reward_variance <= u.reward_variance)
        .count();
    let mut deltas: Vec<f64> = pairs.iter().map(|[s, u]| s.final_accuracy - u.final_accuracy).collect();
    let summary = AblationSummary {
        config_hash: config.hash(),
        seeds: seeds.len(),
        variance_window: config.experiments.variance_window,
        shaped_variance_not_higher,
        median_accuracy_delta: median(&mut deltas),
        rows: pairs.into_iter().flatten().collect(),
    };
    let layout = Layout::new(&config.output_dir);
    let mut csv = b"seed,variant,sft_accuracy,final_accuracy,reward_variance\n".to_vec();
    for r in &summary.rows {
        let variant = match r.variant {
            Variant::Shaped => "shaped",
            Variant::Uniform => "uniform",
        };
        let _ = writeln!(
            csv,
            "{},{variant},{},{},{}",
            r.seed, r.sft_accuracy, r.final_accuracy, r.reward_variance
        );
    }
    write_file(&layout.report("ablate_shaping.csv"), &hash_prefixed_csv(&summary.config_hash, &csv))?;
    write_file(&layout.report("ablate_shaping.json"), &to_json(&summary))?;
    Ok(summary)
}

/// SFT-only and RL story policies for one seed, measured on held-out
/// contexts with the same sampling stream.
#[derive(Clone, Debug)]
pub struct StoryOutcome {
    pub sft_quality: f64,
    pub rl_quality: f64,
    pub run: GrpoRun,
}

/// Full story pipeline for one seed from an already trained GenRM (ignored
/// when the configured comparator is the oracle).
pub fn story_outcome(
    config: &ExperimentConfig,
    genrm: Option<&PolicyParameters>,
    eval: &[PreferenceRecord],
) -> Result<StoryOutcome> {
    let items = story_training_items(config)?;
    let sft = story_sft_stage(config, &items)?;
    let run = story_rl_stage(config, &config.encoder()?, &sft.params, genrm, &items)?;
    let contexts = story_eval_contexts(config, eval);
    Ok(StoryOutcome {
        sft_quality: story_quality(config, &sft.params, &contexts)?,
        rl_quality: story_quality(config, &run.params, &contexts)?,
        run,
    })
}
