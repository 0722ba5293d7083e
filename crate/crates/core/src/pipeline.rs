//! End-to-end dataset construction: simulated human labels, teacher
//! consistency filtering, multi-judge consensus and the SFT / RL split.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preference::{
    annotate, consensus_filter, generate_synthetic_corpus, label_with, sft_consistency_filter,
    split_datasets, CorpusShape, PreferenceRecord, QualityOracle, SimulatedJudge, Source,
};
use crate::stream_rng;

pub const TEACHER: &str = "teacher";
pub const HUMAN: &str = "human";

const SYNTHETIC_ID_BASE: u64 = 1 << 32;
const EVAL_ID_BASE: u64 = 2 << 32;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JudgeSpec {
    pub accuracy: f64,
    pub position_bias: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub human_records: usize,
    pub synthetic_records: usize,
    pub eval_records: usize,
    pub human: JudgeSpec,
    pub teacher: JudgeSpec,
    pub judges: JudgeSpec,
    pub judge_count: usize,
    #[serde(default)]
    pub shape: CorpusShape,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            human_records: 2000,
            synthetic_records: 2000,
            eval_records: 1000,
            human: JudgeSpec {
                accuracy: 0.95,
                position_bias: 0.0,
            },
            teacher: JudgeSpec {
                accuracy: 0.9,
                position_bias: 0.2,
            },
            judges: JudgeSpec {
                accuracy: 0.9,
                position_bias: 0.2,
            },
            judge_count: 2,
            shape: CorpusShape::default(),
        }
    }
}

impl DataConfig {
    pub fn validate(&self, oracle: &QualityOracle) -> Result<()> {
        self.shape.validate(oracle)?;
        if self.human_records == 0 || self.eval_records == 0 {
            return Err(Error::Config(
                "data.human_records and data.eval_records must be positive".into(),
            ));
        }
        if self.judge_count < 2 {
            return Err(Error::Config("data.judge_count must be at least 2".into()));
        }
        for (name, j) in [("human", self.human), ("teacher", self.teacher), ("judges", self.judges)] {
            SimulatedJudge::new(name, j.accuracy, j.position_bias, 0)
                .map_err(|e| Error::Config(format!("data.{name}: {e}")))?;
        }
        Ok(())
    }

    pub fn judge_names(&self) -> Vec<String> {
        (0..self.judge_count).map(|k| format!("judge{k}")).collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Datasets {
    pub human: Vec<PreferenceRecord>,
    pub sft: Vec<PreferenceRecord>,
    pub rl_human: Vec<PreferenceRecord>,
    pub rl_syn: Vec<PreferenceRecord>,
    pub rl: Vec<PreferenceRecord>,
    /// Held-out records with oracle labels.
    pub eval: Vec<PreferenceRecord>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataCounts {
    pub human: usize,
    pub sft_kept: usize,
    pub sft_dropped: usize,
    pub rl_human: usize,
    pub synthetic: usize,
    pub rl_syn_kept: usize,
    pub rl_syn_dropped: usize,
    pub rl: usize,
    pub eval: usize,
}

impl Datasets {
    pub fn counts(&self, synthetic_total: usize) -> DataCounts {
        DataCounts {
            human: self.human.len(),
            sft_kept: self.sft.len(),
            sft_dropped: self.human.len() - self.sft.len(),
            rl_human: self.rl_human.len(),
            synthetic: synthetic_total,
            rl_syn_kept: self.rl_syn.len(),
            rl_syn_dropped: synthetic_total - self.rl_syn.len(),
            rl: self.rl.len(),
            eval: self.eval.len(),
        }
    }
}

/// Builds every dataset from `seed`. Corpora, annotators and judges draw
/// from disjoint streams, so changing one size leaves the others intact.
pub fn build_datasets(config: &DataConfig, oracle: &QualityOracle, seed: u64) -> Result<Datasets> {
    config.validate(oracle)?;
    let mut human = generate_synthetic_corpus(
        config.human_records,
        0,
        &config.shape,
        oracle,
        Source::HumanSim,
        &mut stream_rng(seed, 10),
    )?;
    let annotator = SimulatedJudge::new(HUMAN, config.human.accuracy, config.human.position_bias, 1)?;
    label_with(&mut human, &annotator, oracle, seed, Source::HumanSim);
    let teacher = SimulatedJudge::new(TEACHER, config.teacher.accuracy, config.teacher.position_bias, 2)?;
    annotate(&mut human, &[teacher], oracle, seed);
    let sft = sft_consistency_filter(&human, TEACHER);

    let names = config.judge_names();
    let mut rl_syn = Vec::new();
    if config.synthetic_records > 0 {
        let mut synthetic = generate_synthetic_corpus(
            config.synthetic_records,
            SYNTHETIC_ID_BASE,
            &config.shape,
            oracle,
            Source::SyntheticConsensus,
            &mut stream_rng(seed, 11),
        )?;
        let judges = names
            .iter()
            .enumerate()
            .map(|(k, n)| SimulatedJudge::new(n.clone(), config.judges.accuracy, config.judges.position_bias, 3 + k as u64))
            .collect::<Result<Vec<_>>>()?;
        annotate(&mut synthetic, &judges, oracle, seed);
        let refs: Vec<&str> = names.iter().map(String::as_str).collect();
        rl_syn = consensus_filter(&synthetic, &refs)?;
    }
    let (rl_human, rl) = split_datasets(&human, &sft, &rl_syn)?;

    let eval = generate_synthetic_corpus(
        config.eval_records,
        EVAL_ID_BASE,
        &config.shape,
        oracle,
        Source::OracleEval,
        &mut stream_rng(seed, 12),
    )?;
    Ok(Datasets {
        human,
        sft,
        rl_human,
        rl_syn,
        rl,
        eval,
    })
}
