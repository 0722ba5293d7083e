//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Runs without the libtest harness so every line is shown.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::Rng;
use rlcs_core::config::ExperimentConfig;
use rlcs_core::grpo::{group_advantages, grpo_loss, AdvantageMode, RatioMode};
use rlcs_core::harness::{
    self, ablation_seed, genrm_base, story_outcome, EvalTarget, Stage,
};
use rlcs_core::pipeline::{build_datasets, DataConfig, JudgeSpec};
use rlcs_core::policy::{logprob_gradient, sequence_logprob, PolicyParameters, Token};
use rlcs_core::preference::{
    annotate, consensus_filter, generate_synthetic_corpus, sft_consistency_filter, CorpusShape,
    JudgeVerdicts, Preference, PreferenceRecord, QualityOracle, SimulatedJudge, Source, StoryContext,
};
use rlcs_core::sft::sft_loss;
use rlcs_core::shaping::{shaping_weight, ShapingWeights};
use rlcs_core::story::{combined_loss, pivot_pointwise_rewards, ComparatorKind, Negated, OracleComparator, PairComparator};
use rlcs_core::{stream_rng, Result};

use common::*;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn gradient_oracle() -> Verdict {
    let mut rng = stream_rng(1, 0);
    let mut worst: BTreeMap<&str, f64> = BTreeMap::new();
    let mut record = |name, err: f64| {
        let w = worst.entry(name).or_insert(0.0);
        *w = w.max(err);
    };
    const INSTANCES: usize = 100;
    for _ in 0..INSTANCES {
        let params = random_params(&mut rng);
        let v = params.vocab_size();
        let reference = PolicyParameters::random(params.vocab(), params.window(), 1.0, &mut rng).unwrap();

        let (q, r) = (random_query(&mut rng, v), random_response(&mut rng, v));
        record(
            "sequence_logprob",
            check_gradient(&params, |p| Ok((sequence_logprob(p, &q, &r)?, logprob_gradient(p, &q, &r)?))),
        );

        let demos = random_demos(&mut rng, v);
        record("sft_loss", check_gradient(&params, |p| sft_loss(p, &demos)));

        for (name, mode) in [("grpo_loss/token", RatioMode::TokenLevel), ("grpo_loss/sequence", RatioMode::SequenceLevel)] {
            let config = random_grpo_config(&mut rng, mode);
            let groups = random_groups(&mut rng, &params, &config, false);
            record(name, check_gradient(&params, |p| grpo_loss(p, &reference, &groups, &config)));
        }

        let mode = *[RatioMode::TokenLevel, RatioMode::SequenceLevel].choose(&mut rng).unwrap();
        let config = random_grpo_config(&mut rng, mode);
        let groups = random_groups(&mut rng, &params, &config, true);
        let (alpha, beta) = (rng.gen_range(0.1..2.0), rng.gen_range(0.1..2.0));
        record(
            "combined_loss",
            check_gradient(&params, |p| combined_loss(p, &reference, &groups, &config, alpha, beta)),
        );
    }
    let max = worst.values().copied().fold(0.0, f64::max);
    let parts: Vec<String> = worst.iter().map(|(k, e)| format!("{k} {e:.1e}")).collect();
    verdict(
        max < FD_TOLERANCE,
        format!("{INSTANCES} instances each, max relative error: {}", parts.join(", ")),
    )
}

fn shaping_table() -> Verdict {
    let w = ShapingWeights::default();
    // (entropy relative to threshold, reward) -> weight
    let table = [
        (-1, -1.0, 1.5),
        (0, -1.0, 1.5),
        (1, -1.0, 1.0),
        (-1, 1.0, 0.5),
        (0, 1.0, 0.5),
        (1, 1.0, 1.5),
    ];
    let mut checked = 0;
    let mut bad = Vec::new();
    for tau in [0.0, 0.35, 1.0, 2.302585092994046] {
        for (rel, reward, expected) in table {
            let h = match rel {
                -1 => tau - 0.25,
                0 => tau,
                _ => tau + 0.25,
            };
            let got = shaping_weight(h, tau, reward, &w).unwrap();
            checked += 1;
            if got != expected {
                bad.push(format!("H-tau={rel} r={reward}: {got}"));
            }
        }
    }
    verdict(bad.is_empty(), format!("{checked} grid cells exact{}", if bad.is_empty() { String::new() } else { format!("; mismatches {bad:?}") }))
}

fn advantage_properties() -> Verdict {
    let mut rng = stream_rng(3, 0);
    let (mut max_mean, mut max_var_err) = (0.0f64, 0.0f64);
    let mut degenerate = 0;
    let mut degenerate_ok = true;
    for _ in 0..10_000 {
        let n = rng.gen_range(2..=16);
        let rewards: Vec<f64> = match rng.gen_range(0..4) {
            0 => (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            1 => (0..n).map(|_| if rng.gen() { 1.0 } else { -1.0 }).collect(),
            2 => (0..n).map(|_| [-1.0, 0.0, 1.0][rng.gen_range(0..3)]).collect(),
            _ => vec![rng.gen_range(-1.5..1.5); n],
        };
        let constant = rewards.iter().all(|r| *r == rewards[0]);
        let a = group_advantages(&rewards, AdvantageMode::MeanOnly).unwrap();
        let s = group_advantages(&rewards, AdvantageMode::MeanStd).unwrap();
        if constant {
            degenerate += 1;
            degenerate_ok &= a.iter().chain(&s).all(|x| *x == 0.0);
            continue;
        }
        let nf = n as f64;
        max_mean = max_mean.max((a.iter().sum::<f64>() / nf).abs());
        let mean_s = s.iter().sum::<f64>() / nf;
        max_mean = max_mean.max(mean_s.abs());
        let var = s.iter().map(|x| (x - mean_s).powi(2)).sum::<f64>() / nf;
        max_var_err = max_var_err.max((var - 1.0).abs());
    }
    verdict(
        max_mean < 1e-9 && max_var_err < 1e-9 && degenerate_ok && degenerate > 0,
        format!(
            "10000 groups: max |mean| {max_mean:.1e}, max |var-1| {max_var_err:.1e}, {degenerate} constant groups all-zero: {degenerate_ok}"
        ),
    )
}

fn random_verdict(rng: &mut impl Rng) -> Preference {
    if rng.gen() {
        Preference::S1Better
    } else {
        Preference::S2Better
    }
}

/// Keep-rate of consensus over `n` records with `k` unbiased judges of accuracy `a`.
fn consensus_keep_rate(n: usize, k: usize, a: f64, seed: u64) -> (f64, f64) {
    let oracle = QualityOracle::default();
    let mut records = generate_synthetic_corpus(
        n,
        0,
        &CorpusShape::default(),
        &oracle,
        Source::SyntheticConsensus,
        &mut stream_rng(seed, 1),
    )
    .unwrap();
    let judges: Vec<SimulatedJudge> = (0..k)
        .map(|j| SimulatedJudge::new(format!("j{j}"), a, 0.0, 100 + j as u64).unwrap())
        .collect();
    annotate(&mut records, &judges, &oracle, seed);
    let names: Vec<&str> = judges.iter().map(|j| j.name.as_str()).collect();
    let kept = consensus_filter(&records, &names).unwrap().len();
    let p = a.powi(2 * k as i32) + (1.0 - a).powi(2 * k as i32);
    let sigma = (p * (1.0 - p) / n as f64).sqrt();
    (kept as f64 / n as f64 - p, sigma)
}

fn filter_equivalence() -> Verdict {
    let mut rng = stream_rng(4, 0);
    let oracle = QualityOracle::default();
    let mut records = generate_synthetic_corpus(10_000, 0, &CorpusShape::default(), &oracle, Source::HumanSim, &mut rng).unwrap();
    let judges = ["teacher", "j0", "j1", "j2"];
    for r in &mut records {
        r.canonical_label = random_verdict(&mut rng);
        r.verdict_log.clear();
        for name in judges {
            if rng.gen_bool(0.93) {
                r.verdict_log.push(JudgeVerdicts {
                    judge: name.to_string(),
                    orig: random_verdict(&mut rng),
                    swap: random_verdict(&mut rng),
                });
            }
        }
    }
    // brute-force recount straight from the logs
    let lookup = |r: &PreferenceRecord, name: &str| r.verdict_log.iter().find(|v| v.judge == name).map(|v| (v.orig, v.swap));
    let expected_sft: Vec<u64> = records
        .iter()
        .filter(|r| lookup(r, "teacher") == Some((r.canonical_label, r.canonical_label)))
        .map(|r| r.id)
        .collect();
    let expected_consensus: Vec<(u64, Preference)> = records
        .iter()
        .filter_map(|r| {
            let all: Vec<Preference> = judges[1..]
                .iter()
                .map(|j| lookup(r, j))
                .collect::<Option<Vec<_>>>()?
                .into_iter()
                .flat_map(|(o, s)| [o, s])
                .collect();
            all.iter().all(|p| *p == all[0]).then(|| (r.id, all[0]))
        })
        .collect();
    let got_sft: Vec<u64> = sft_consistency_filter(&records, "teacher").iter().map(|r| r.id).collect();
    let got_consensus: Vec<(u64, Preference)> = consensus_filter(&records, &judges[1..])
        .unwrap()
        .iter()
        .map(|r| (r.id, r.canonical_label))
        .collect();
    let exact = got_sft == expected_sft && got_consensus == expected_consensus;

    let (dev2, sigma2) = consensus_keep_rate(10_000, 2, 0.9, 5);
    let (dev3, sigma3) = consensus_keep_rate(10_000, 3, 0.9, 6);
    let rates_ok = dev2.abs() <= 3.0 * sigma2 && dev3.abs() <= 3.0 * sigma3;
    verdict(
        exact && rates_ok,
        format!(
            "10000 records: SFT {} kept, consensus {} kept, recount identical: {exact}; keep-rate deviation K=2 {:+.2} sigma, K=3 {:+.2} sigma",
            got_sft.len(),
            got_consensus.len(),
            dev2 / sigma2,
            dev3 / sigma3
        ),
    )
}

/// Closed-form SFT keep probability for a human annotator of accuracy
/// `human` (no position bias) and a teacher `(a, b)`.
fn sft_keep_probability(human: f64, a: f64, b: f64) -> f64 {
    let both_true = (b + (1.0 - b) * a) * (1.0 - b) * a;
    let both_false = (1.0 - b) * (1.0 - a) * (b + (1.0 - b) * (1.0 - a));
    human * both_true + (1.0 - human) * both_false
}

fn set_algebra() -> Verdict {
    let oracle = QualityOracle::default();
    let mut corpora = 0;
    let mut identity = true;
    for seed in 0..8 {
        for human_records in [50, 500, 2000] {
            let config = DataConfig {
                human_records,
                synthetic_records: 200,
                eval_records: 10,
                ..DataConfig::default()
            };
            let d = build_datasets(&config, &oracle, seed).unwrap();
            identity &= d.sft.len() + d.rl_human.len() == d.human.len();
            corpora += 1;
        }
    }
    // target proportions: 4,000 human pairs, about 1,400 kept for SFT
    let teacher = JudgeSpec {
        accuracy: 0.7,
        position_bias: 0.35,
    };
    let p = sft_keep_probability(0.95, teacher.accuracy, teacher.position_bias);
    let mut scaled = Vec::new();
    let mut proportion_ok = (p - 1400.0 / 4000.0).abs() < 0.01;
    for (seed, n) in [(0, 4000), (1, 2000), (2, 1000)] {
        let config = DataConfig {
            human_records: n,
            synthetic_records: 100,
            eval_records: 10,
            teacher,
            ..DataConfig::default()
        };
        let d = build_datasets(&config, &oracle, seed).unwrap();
        let sigma = (p * (1.0 - p) / n as f64).sqrt();
        let frac = d.sft.len() as f64 / n as f64;
        proportion_ok &= (frac - 1400.0 / 4000.0).abs() <= 3.0 * sigma;
        identity &= d.sft.len() + d.rl_human.len() == n;
        scaled.push(format!("{n}/{}/{}", d.sft.len(), d.rl_human.len()));
    }
    verdict(
        identity && proportion_ok,
        format!(
            "identity exact on {corpora} corpora; human/SFT/RL_human with teacher (0.7, 0.35), keep p={p:.4}: {}",
            scaled.join(", ")
        ),
    )
}

fn genrm_two_stage() -> Verdict {
    let config = ExperimentConfig::default();
    let mut gains = Vec::new();
    let mut min_sft = f64::INFINITY;
    let mut cells = Vec::new();
    for seed in 0..10 {
        let base = genrm_base(&config, seed).unwrap();
        let (_, report) = base.grpo(&config.genrm).unwrap();
        min_sft = min_sft.min(base.sft_eval.accuracy);
        gains.push(report.accuracy - base.sft_eval.accuracy);
        cells.push(format!("{:.3}->{:.3}", base.sft_eval.accuracy, report.accuracy));
    }
    let wins = gains.iter().filter(|g| **g >= 0.02).count();
    verdict(
        min_sft >= 0.70 && wins >= 8,
        format!(
            "min SFT accuracy {min_sft:.3}; gain >= 0.02 on {wins}/10 seeds; per seed {}",
            cells.join(" ")
        ),
    )
}

fn shaping_ablation() -> Verdict {
    let config = ExperimentConfig::default();
    let mut not_higher = 0;
    let mut deltas = Vec::new();
    for &seed in &config.experiments.ablation_seeds {
        let [shaped, uniform] = ablation_seed(&config, seed).unwrap();
        if shaped.reward_variance <= uniform.reward_variance {
            not_higher += 1;
        }
        deltas.push(shaped.final_accuracy - uniform.final_accuracy);
    }
    let n = deltas.len();
    let median = harness::median(&mut deltas);
    verdict(
        2 * not_higher > n && median >= 0.0,
        format!("shaped variance <= uniform on {not_higher}/{n} seeds; median accuracy delta (shaped - uniform) {median:+.4}"),
    )
}

fn story_improvement() -> Verdict {
    let config = ExperimentConfig::default();
    let mut genrm_wins = 0;
    let mut genrm_gains = Vec::new();
    let mut oracle_gains = Vec::new();
    for seed in 0..10 {
        let base = genrm_base(&config, seed).unwrap();
        let (judge, _) = base.grpo(&config.genrm).unwrap();
        let with_genrm = story_outcome(&base.config, Some(&judge.params), &base.datasets.eval).unwrap();
        if with_genrm.rl_quality > with_genrm.sft_quality {
            genrm_wins += 1;
        }
        genrm_gains.push(with_genrm.rl_quality - with_genrm.sft_quality);
        let mut oracle_config = base.config.clone();
        oracle_config.story.comparator = ComparatorKind::Oracle;
        let with_oracle = story_outcome(&oracle_config, None, &base.datasets.eval).unwrap();
        oracle_gains.push(with_oracle.rl_quality - with_oracle.sft_quality);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let min = |v: &[f64]| v.iter().copied().fold(f64::INFINITY, f64::min);
    let oracle_mean = mean(&oracle_gains);
    verdict(
        genrm_wins >= 8 && oracle_mean >= 0.1,
        format!(
            "GenRM pivot beats SFT-only on {genrm_wins}/10 seeds (mean gain {:+.3}); oracle pivot gain after {} steps mean {oracle_mean:+.3}, min {:+.3}",
            mean(&genrm_gains),
            config.story.grpo.steps,
            min(&oracle_gains)
        ),
    )
}

/// Pseudo-random but deterministic verdicts, with some unusable judgments.
struct Scrambled;

impl PairComparator for Scrambled {
    fn compare(&self, _c: &StoryContext, candidate: &[Token], pivot: &[Token]) -> Result<Option<Preference>> {
        let h = candidate.iter().chain(pivot).fold(17usize, |h, t| h.wrapping_mul(31).wrapping_add(*t));
        Ok(match h % 3 {
            0 => None,
            1 => Some(Preference::S1Better),
            _ => Some(Preference::S2Better),
        })
    }
}

fn pivot_contract() -> Verdict {
    let shape = CorpusShape::default();
    let oracle = QualityOracle::default();
    let comparator = OracleComparator { oracle: oracle.clone() };
    let negated = Negated(comparator.clone());
    let mut rng = stream_rng(9, 0);
    let (mut contract, mut oracle_signs, mut negation) = (true, true, true);
    for k in 0..10_000 {
        let context = shape.random_context(&oracle, &mut rng);
        let n = rng.gen_range(2..=16);
        let stories: Vec<Vec<Token>> = (0..n).map(|_| shape.random_story(&context, &mut rng)).collect();
        let refs: Vec<&[Token]> = stories.iter().map(Vec::as_slice).collect();
        let seed = rng.gen::<u64>();
        let assignment = match k % 2 {
            0 => pivot_pointwise_rewards(&context, &refs, &comparator, &mut stream_rng(seed, 0)).unwrap(),
            _ => pivot_pointwise_rewards(&context, &refs, &Scrambled, &mut stream_rng(seed, 0)).unwrap(),
        };
        let zeros = assignment.rewards.iter().filter(|r| **r == 0.0).count();
        contract &= zeros == 1
            && assignment.rewards[assignment.pivot_index] == 0.0
            && assignment.comparisons().all(|(_, r)| r == 1.0 || r == -1.0)
            && assignment.rewards.len() == n;
        if k % 2 == 0 {
            let q_pivot = oracle.score(refs[assignment.pivot_index], &context);
            for (i, r) in assignment.comparisons() {
                let better = oracle.score(refs[i], &context) > q_pivot;
                oracle_signs &= (r == 1.0) == better;
            }
            let flipped = pivot_pointwise_rewards(&context, &refs, &negated, &mut stream_rng(seed, 0)).unwrap();
            negation &= flipped.pivot_index == assignment.pivot_index
                && flipped.comparisons().zip(assignment.comparisons()).all(|((_, a), (_, b))| a == -b);
        }
    }
    verdict(
        contract && oracle_signs && negation,
        format!("10000 groups: one zero at the pivot, rest +-1: {contract}; oracle signs: {oracle_signs}; negation flips: {negation}"),
    )
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn run_every_command(config: &ExperimentConfig) -> Result<()> {
    harness::cmd_gen_data(config)?;
    for stage in Stage::ALL {
        harness::cmd_train(config, stage)?;
    }
    let genrm = (EvalTarget::Stage(Stage::GenrmGrpo), Some(EvalTarget::Stage(Stage::GenrmSft)));
    let story = (EvalTarget::Stage(Stage::StoryRl), Some(EvalTarget::Stage(Stage::StorySft)));
    for (target, baseline) in [genrm, story, (EvalTarget::Coin, None)] {
        harness::cmd_eval(config, target, baseline)?;
    }
    harness::cmd_sweep_rollout(config, &config.experiments.sweep_group_sizes)?;
    harness::cmd_ablate_shaping(config, &config.experiments.ablation_seeds)?;
    Ok(())
}

fn determinism() -> Verdict {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    for dir in &dirs {
        let mut config = ExperimentConfig::default();
        config.output_dir = dir.path().to_path_buf();
        config.experiments.ablation_seeds = vec![0, 1, 2];
        run_every_command(&config).unwrap();
    }
    let files = files_under(dirs[0].path());
    let same_listing = files == files_under(dirs[1].path());
    let compared: Vec<&PathBuf> = files
        .iter()
        .filter(|f| !f.to_string_lossy().ends_with("_timing.csv"))
        .collect();
    let differing: Vec<String> = compared
        .iter()
        .filter(|f| std::fs::read(dirs[0].path().join(f)).unwrap() != std::fs::read(dirs[1].path().join(f)).unwrap())
        .map(|f| f.display().to_string())
        .collect();
    let csvs = compared.iter().filter(|f| f.extension().is_some_and(|e| e == "csv")).count();
    let checkpoints = compared.iter().filter(|f| f.extension().is_some_and(|e| e == "policy")).count();
    verdict(
        same_listing && differing.is_empty() && csvs > 0 && checkpoints == 4,
        format!(
            "every command run twice: {} artifacts byte-identical ({csvs} CSVs, {checkpoints} checkpoints); differing {differing:?}; wall-clock timing files excluded",
            compared.len() - differing.len()
        ),
    )
}

fn main() {
    type Check = fn() -> Verdict;
    let criteria: [(u32, &str, Check, Duration); 10] = [
        (1, "gradient oracle", gradient_oracle, Duration::from_secs(60)),
        (2, "shaping table exactness", shaping_table, Duration::from_secs(1)),
        (3, "advantage properties", advantage_properties, Duration::from_secs(60)),
        (4, "filter oracle equivalence", filter_equivalence, Duration::from_secs(120)),
        (5, "set algebra", set_algebra, Duration::from_secs(120)),
        (6, "two-stage GenRM", genrm_two_stage, Duration::from_secs(600)),
        (7, "shaped vs uniform ablation", shaping_ablation, Duration::from_secs(900)),
        (8, "story policy improvement", story_improvement, Duration::from_secs(600)),
        (9, "pivot contract", pivot_contract, Duration::from_secs(120)),
        (10, "determinism", determinism, Duration::from_secs(600)),
    ];
    let filter: Option<u32> = std::env::args().skip(1).find_map(|a| a.parse().ok());
    let mut failed = 0;
    for (id, name, check, budget) in criteria {
        if filter.is_some_and(|f| f != id) {
            continue;
        }
        let start = Instant::now();
        let v = check();
        let elapsed = start.elapsed();
        let pass = v.pass && elapsed <= budget;
        if !pass {
            failed += 1;
        }
        println!(
            "[{}] criterion {id:>2} {name}: {} ({:.1} s of {} s budget)",
            if pass { "PASS" } else { "FAIL" },
            v.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
