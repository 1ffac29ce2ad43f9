//! Configuration files, presets and the multi-seed experiment runner.
//!
//! A config is a flat TOML table. Every key is optional; omitted keys take
//! the defaults below, and environment keys override the chosen preset.
//!
//! ```toml
//! preset = "trap"
//! group_size = 8
//! omega = 0.3
//! steps = 200
//! seeds = [0, 1, 2]
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::budget::{chain_budget, predicted_budget, treerpo_budget};
use crate::env::{EnvConfig, Environment, TerminationMode, TopicEnv, TrapConfig, TrapEnv};
use crate::error::{Error, Result};
use crate::hparams::{GroupWeighting, Hyperparams, DEFAULT_LEARNING_RATE};
use crate::trainer::{initial_policy, train_run, Method, RunOptions, RunReport, StepMetrics};

/// Full-expansion runs are only scheduled by comparisons up to this depth.
pub const COMPARE_TREERPO_MAX_DEPTH: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    /// Two actions: an immediately cheap trap and a slow-start explore arm.
    #[default]
    Trap,
    /// Several topics with delayed payoff on one of them.
    Topics,
    /// No delayed structure.
    Flat,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Trap, Preset::Topics, Preset::Flat];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Trap => "trap",
            Preset::Topics => "topics",
            Preset::Flat => "flat",
        }
    }
}

impl std::fmt::Display for Preset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| {
                Error::config(
                    "preset",
                    format!("unknown preset {s:?}; expected trap, topics or flat"),
                )
            })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub preset: Preset,

    pub group_size: usize,
    pub adaptive_width: usize,
    pub gamma: f64,
    pub omega: f64,
    pub max_depth: usize,
    pub clip_epsilon: f64,
    pub kl_beta: f64,
    pub threshold_lambda: f64,
    pub learning_rate: f64,
    pub group_weighting: GroupWeighting,
    pub parallel: bool,

    pub steps: u64,
    pub seeds: Vec<u64>,
    pub eval_every: u64,
    pub eval_episodes: usize,

    #[serde(skip_serializing_if = "Option::is_none")]
    pub termination: Option<TerminationMode>,

    // Topic-environment overrides.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub num_topics: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub interest_profile: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub engagement_decay: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub engagement_weight: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trap_action: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trap_bonus: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trap_penalty_rate: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub exploration_unlock: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub base_logit: Option<f64>,

    // Trap-environment overrides.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trap_base: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub trap_step: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub explore_base: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub explore_settled: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub settle_after: Option<u32>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let h = Hyperparams::default();
        Self {
            preset: Preset::Trap,
            group_size: h.group_size,
            adaptive_width: h.adaptive_width,
            gamma: h.gamma,
            omega: h.omega,
            max_depth: h.max_depth,
            clip_epsilon: h.clip_epsilon,
            kl_beta: h.kl_beta,
            threshold_lambda: h.threshold_lambda,
            learning_rate: DEFAULT_LEARNING_RATE,
            group_weighting: h.group_weighting,
            parallel: h.parallel,
            steps: 100,
            seeds: vec![0, 1, 2],
            eval_every: 1,
            eval_episodes: 1,
            termination: None,
            num_topics: None,
            interest_profile: None,
            engagement_decay: None,
            engagement_weight: None,
            trap_action: None,
            trap_bonus: None,
            trap_penalty_rate: None,
            exploration_unlock: None,
            base_logit: None,
            trap_base: None,
            trap_step: None,
            explore_base: None,
            explore_settled: None,
            settle_after: None,
        }
    }
}

/// Environment selected by a config.
#[derive(Debug, Clone)]
pub enum EnvSpec {
    Trap(TrapConfig),
    Topics(EnvConfig),
}

impl EnvSpec {
    pub fn num_actions(&self) -> usize {
        match self {
            EnvSpec::Trap(_) => 2,
            EnvSpec::Topics(c) => c.num_topics,
        }
    }

    pub fn build(&self) -> Result<Box<dyn Environment>> {
        Ok(match self {
            EnvSpec::Trap(c) => Box::new(TrapEnv::new(c.clone())?),
            EnvSpec::Topics(c) => Box::new(TopicEnv::new(c.clone())?),
        })
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut c = Self {
            preset,
            ..Default::default()
        };
        if preset == Preset::Trap {
            c.steps = 200;
        }
        c
    }

    pub fn hyperparams(&self, seed: u64) -> Hyperparams {
        Hyperparams {
            group_size: self.group_size,
            adaptive_width: self.adaptive_width,
            gamma: self.gamma,
            omega: self.omega,
            max_depth: self.max_depth,
            clip_epsilon: self.clip_epsilon,
            kl_beta: self.kl_beta,
            threshold_lambda: self.threshold_lambda,
            learning_rate: self.learning_rate,
            seed,
            group_weighting: self.group_weighting,
            parallel: self.parallel,
        }
    }

    pub fn run_options(&self) -> RunOptions {
        RunOptions {
            eval_every: self.eval_every,
            eval_episodes: self.eval_episodes,
        }
    }

    fn topic_overrides(&self) -> [(&'static str, bool); 9] {
        [
            ("num_topics", self.num_topics.is_some()),
            ("interest_profile", self.interest_profile.is_some()),
            ("engagement_decay", self.engagement_decay.is_some()),
            ("engagement_weight", self.engagement_weight.is_some()),
            ("trap_action", self.trap_action.is_some()),
            ("trap_bonus", self.trap_bonus.is_some()),
            ("trap_penalty_rate", self.trap_penalty_rate.is_some()),
            ("exploration_unlock", self.exploration_unlock.is_some()),
            ("base_logit", self.base_logit.is_some()),
        ]
    }

    fn trap_overrides(&self) -> [(&'static str, bool); 5] {
        [
            ("trap_base", self.trap_base.is_some()),
            ("trap_step", self.trap_step.is_some()),
            ("explore_base", self.explore_base.is_some()),
            ("explore_settled", self.explore_settled.is_some()),
            ("settle_after", self.settle_after.is_some()),
        ]
    }

    pub fn env_spec(&self) -> Result<EnvSpec> {
        match self.preset {
            Preset::Trap => {
                if let Some((key, _)) = self.topic_overrides().into_iter().find(|o| o.1) {
                    return Err(Error::config(
                        key,
                        "only applies to the topics and flat presets",
                    ));
                }
                let d = TrapConfig::default();
                Ok(EnvSpec::Trap(TrapConfig {
                    trap_base: self.trap_base.unwrap_or(d.trap_base),
                    trap_step: self.trap_step.unwrap_or(d.trap_step),
                    explore_base: self.explore_base.unwrap_or(d.explore_base),
                    explore_settled: self.explore_settled.unwrap_or(d.explore_settled),
                    settle_after: self.settle_after.unwrap_or(d.settle_after),
                    termination: self.termination.unwrap_or(d.termination),
                }))
            }
            Preset::Topics | Preset::Flat => {
                if let Some((key, _)) = self.trap_overrides().into_iter().find(|o| o.1) {
                    return Err(Error::config(key, "only applies to the trap preset"));
                }
                let d = if self.preset == Preset::Topics {
                    EnvConfig::topics_preset()
                } else {
                    EnvConfig::flat_preset()
                };
                Ok(EnvSpec::Topics(EnvConfig {
                    num_topics: self.num_topics.unwrap_or(d.num_topics),
                    interest_profile: self.interest_profile.clone().unwrap_or(d.interest_profile),
                    engagement_decay: self.engagement_decay.unwrap_or(d.engagement_decay),
                    engagement_weight: self.engagement_weight.unwrap_or(d.engagement_weight),
                    trap_action: self.trap_action.or(d.trap_action),
                    trap_bonus: self.trap_bonus.unwrap_or(d.trap_bonus),
                    trap_penalty_rate: self.trap_penalty_rate.unwrap_or(d.trap_penalty_rate),
                    exploration_unlock: self.exploration_unlock.unwrap_or(d.exploration_unlock),
                    base_logit: self.base_logit.unwrap_or(d.base_logit),
                    termination: self.termination.unwrap_or(d.termination),
                }))
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.hyperparams(0).validate()?;
        if self.steps == 0 {
            return Err(Error::config("steps", "must be at least 1"));
        }
        if self.seeds.is_empty() {
            return Err(Error::config("seeds", "must list at least one seed"));
        }
        if self.eval_episodes == 0 {
            return Err(Error::config("eval_episodes", "must be at least 1"));
        }
        match self.env_spec()? {
            EnvSpec::Trap(c) => c.validate(),
            EnvSpec::Topics(c) => c.validate(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| {
            let key = unknown_key(e.message()).unwrap_or_else(|| "config".into());
            Error::config(key, e.message().trim().to_string())
        })?;
        config.validate()?;
        Ok(config)
    }

    /// Normalized TOML: every resolved key, overrides only when set.
    pub fn dump(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Internal(format!("config serialization: {e}")))
    }
}

fn unknown_key(message: &str) -> Option<String> {
    let rest = message.split("unknown field `").nth(1)?;
    Some(rest.split('`').next()?.to_string())
}

pub fn load_config(path: impl AsRef<Path>) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)?;
    ExperimentConfig::from_toml(&text)
}

/// Per-step statistics across seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SummaryRow {
    pub step: u64,
    pub seeds: usize,
    pub avg_r_median: f64,
    pub avg_r_q1: f64,
    pub avg_r_q3: f64,
    #[serde(rename = "avg_L_median")]
    pub avg_l_median: f64,
    #[serde(rename = "avg_L_q1")]
    pub avg_l_q1: f64,
    #[serde(rename = "avg_L_q3")]
    pub avg_l_q3: f64,
    pub budget_median: f64,
}

/// Linear-interpolation quantile of already sorted data.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

fn quartiles(mut v: Vec<f64>) -> (f64, f64, f64) {
    v.sort_by(f64::total_cmp);
    (quantile(&v, 0.25), quantile(&v, 0.5), quantile(&v, 0.75))
}

/// Median and interquartile range per evaluated step across runs.
pub fn summarize_runs(runs: &[Vec<StepMetrics>]) -> Vec<SummaryRow> {
    let steps = runs.iter().map(|r| r.len()).min().unwrap_or(0);
    let mut rows = Vec::new();
    for s in 0..steps {
        let evaluated: Vec<&StepMetrics> = runs
            .iter()
            .map(|r| &r[s])
            .filter(|m| m.avg_reward.is_some() && m.avg_length.is_some())
            .collect();
        if evaluated.is_empty() {
            continue;
        }
        let (r1, r2, r3) = quartiles(evaluated.iter().filter_map(|m| m.avg_reward).collect());
        let (l1, l2, l3) = quartiles(evaluated.iter().filter_map(|m| m.avg_length).collect());
        let (_, b, _) = quartiles(runs.iter().map(|r| r[s].budget as f64).collect());
        rows.push(SummaryRow {
            step: runs[0][s].step,
            seeds: evaluated.len(),
            avg_r_median: r2,
            avg_r_q1: r1,
            avg_r_q3: r3,
            avg_l_median: l2,
            avg_l_q1: l1,
            avg_l_q3: l3,
            budget_median: b,
        });
    }
    rows
}

pub fn write_jsonl(path: &Path, steps: &[StepMetrics]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for m in steps {
        serde_json::to_writer(&mut w, m)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<StepMetrics>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn write_summary(path: &Path, rows: &[SummaryRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// Files and in-memory reports of one method's multi-seed run.
#[derive(Debug, Clone)]
pub struct ExperimentReport {
    pub method: Method,
    pub jsonl: Vec<PathBuf>,
    pub summary_csv: PathBuf,
    pub summary: Vec<SummaryRow>,
    pub runs: Vec<RunReport>,
}

pub fn jsonl_path(out_dir: &Path, method: Method, seed: u64) -> PathBuf {
    out_dir.join(format!("{method}_seed{seed}.jsonl"))
}

/// Trains `method` once per seed, writing one metrics JSONL per seed and
/// a per-step summary CSV. Seeds run on the rayon pool; outputs depend only
/// on `(config, method, seed)`.
pub fn run_experiment(
    config: &ExperimentConfig,
    method: Method,
    seeds: &[u64],
    out_dir: &Path,
    env: &dyn Environment,
) -> Result<ExperimentReport> {
    config.validate()?;
    if seeds.is_empty() {
        return Err(Error::config("seeds", "must list at least one seed"));
    }
    std::fs::create_dir_all(out_dir)?;
    let runs: Vec<RunReport> = seeds
        .par_iter()
        .map(|&seed| {
            let h = config.hyperparams(seed);
            let policy = initial_policy(env, h.max_depth);
            let report = train_run(
                method,
                policy,
                env,
                &h,
                config.steps,
                config.run_options(),
                |_| Ok(()),
            )?;
            write_jsonl(&jsonl_path(out_dir, method, seed), &report.steps)?;
            log::info!("{method} seed {seed}: {} steps", report.steps.len());
            Ok(report)
        })
        .collect::<Result<_>>()?;
    let summary = summarize_runs(&runs.iter().map(|r| r.steps.clone()).collect::<Vec<_>>());
    let summary_csv = out_dir.join(format!("{method}_summary.csv"));
    write_summary(&summary_csv, &summary)?;
    Ok(ExperimentReport {
        method,
        jsonl: seeds
            .iter()
            .map(|&s| jsonl_path(out_dir, method, s))
            .collect(),
        summary_csv,
        summary,
        runs,
    })
}

/// Closed-form interactions per tree without termination.
pub fn nominal_budget(method: Method, config: &ExperimentConfig) -> u128 {
    let (big_w, w, l) = (config.group_size, config.adaptive_width, config.max_depth);
    match method {
        Method::AtGrpo => predicted_budget(big_w, w, config.gamma, l),
        Method::ChainGrpo => chain_budget(big_w, l),
        Method::FullTreeRpo => treerpo_budget(big_w, l),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub method: Method,
    pub final_step: u64,
    pub final_avg_r_median: f64,
    #[serde(rename = "final_avg_L_median")]
    pub final_avg_l_median: f64,
    pub nominal_budget: u128,
    pub observed_budget_median: f64,
}

#[derive(Debug, Clone)]
pub struct Comparison {
    pub rows: Vec<ComparisonRow>,
    pub reports: Vec<ExperimentReport>,
    pub skipped: Vec<(Method, String)>,
    pub csv: PathBuf,
}

/// Runs every method under the same seeds. Full expansion is skipped, with
/// a logged reason, when the horizon is too deep.
pub fn compare_methods(
    config: &ExperimentConfig,
    seeds: &[u64],
    out_dir: &Path,
    env: &dyn Environment,
) -> Result<Comparison> {
    let mut reports = Vec::new();
    let mut skipped = Vec::new();
    for method in Method::ALL {
        if method == Method::FullTreeRpo && config.max_depth > COMPARE_TREERPO_MAX_DEPTH {
            let reason = format!(
                "L = {} exceeds {COMPARE_TREERPO_MAX_DEPTH}; a full tree would need {} interactions per step",
                config.max_depth,
                treerpo_budget(config.group_size, config.max_depth)
            );
            log::warn!("skipping {method}: {reason}");
            skipped.push((method, reason));
            continue;
        }
        reports.push(run_experiment(config, method, seeds, out_dir, env)?);
    }
    let mut rows = Vec::new();
    for r in &reports {
        let last = r
            .summary
            .last()
            .ok_or_else(|| Error::Internal("empty summary".into()))?;
        let (_, observed, _) = quartiles(
            r.runs
                .iter()
                .flat_map(|run| run.steps.iter().map(|m| m.budget as f64))
                .collect(),
        );
        rows.push(ComparisonRow {
            method: r.method,
            final_step: last.step,
            final_avg_r_median: last.avg_r_median,
            final_avg_l_median: last.avg_l_median,
            nominal_budget: nominal_budget(r.method, config),
            observed_budget_median: observed,
        });
    }
    let csv = out_dir.join("comparison.csv");
    let mut w = csv::Writer::from_path(&csv)?;
    for row in &rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(Comparison {
        rows,
        reports,
        skipped,
        csv,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn preset_names_match_the_config_spelling() {
        for p in Preset::ALL {
            let c = ExperimentConfig::from_toml(&format!("preset = \"{p}\"")).unwrap();
            assert_eq!(c.preset, p);
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        assert!("trapp".parse::<Preset>().is_err());
    }

    #[test]
    fn empty_config_gives_defaults() {
        let c = ExperimentConfig::from_toml("").unwrap();
        assert_eq!(c, ExperimentConfig::default());
        let h = c.hyperparams(0);
        assert_eq!((h.group_size, h.adaptive_width, h.max_depth), (8, 2, 10));
        assert_eq!((h.gamma, h.omega, h.clip_epsilon), (2.0, 0.3, 0.2));
        assert_eq!((h.kl_beta, h.threshold_lambda), (0.01, 0.02));
    }

    #[test]
    fn out_of_range_names_the_key() {
        match ExperimentConfig::from_toml("omega = 1.5") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "omega"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn unknown_key_is_rejected_by_name() {
        match ExperimentConfig::from_toml("omgea = 0.5") {
            Err(Error::Config { key, .. }) => assert_eq!(key, "omgea"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn overrides_must_match_the_preset() {
        assert!(ExperimentConfig::from_toml("preset = \"trap\"\nnum_topics = 3").is_err());
        assert!(ExperimentConfig::from_toml("preset = \"flat\"\ntrap_step = 0.1").is_err());
        let c = ExperimentConfig::from_toml(
            "preset = \"topics\"\nnum_topics = 2\ninterest_profile = [0.1, 0.9]\ntrap_action = 0",
        )
        .unwrap();
        assert_eq!(c.env_spec().unwrap().num_actions(), 2);
    }

    #[test]
    fn dump_normalizes() {
        let text = "omega = 0.4\n\n# comment\nsteps = 7\npreset = \"flat\"\nbase_logit = 0.25\n";
        let c = ExperimentConfig::from_toml(text).unwrap();
        let dumped = c.dump().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&dumped).unwrap(), c);
        assert_eq!(
            ExperimentConfig::from_toml(&dumped)
                .unwrap()
                .dump()
                .unwrap(),
            dumped
        );
        assert!(dumped.contains("base_logit = 0.25"));
        assert!(!dumped.contains("trap_base"));
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.25), 1.75);
        assert_eq!(quantile(&[7.0], 0.75), 7.0);
    }

    #[test]
    fn nominal_budgets() {
        let c = ExperimentConfig::default();
        assert_eq!(nominal_budget(Method::AtGrpo, &c), 1744);
        assert_eq!(nominal_budget(Method::ChainGrpo, &c), 80);
        let shallow = ExperimentConfig {
            max_depth: 4,
            ..Default::default()
        };
        assert_eq!(nominal_budget(Method::FullTreeRpo, &shallow), 4680);
    }
}
