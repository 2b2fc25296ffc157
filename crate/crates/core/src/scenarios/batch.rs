//! Random environments around a base scenario, filtered to "interesting" cases.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::monte_carlo::{derive_seed, estimate_mc, rollout_rng, McConfig};
use crate::sde_models::Shape;

use super::Scenario;

/// Candidates whose probe risk falls below this are discarded.
pub const INTERESTING_MIN_RISK: f64 = 0.01;
/// Examined candidates before the rejection rate is judged, per requested scenario.
const JUDGE_AFTER_PER_SCENARIO: usize = 10;
/// Hard cap on examined candidates, per requested scenario.
const BUDGET_PER_SCENARIO: usize = 100;
const MAX_REJECTION_RATE: f64 = 0.99;

/// Circles sampled uniformly in the given ranges and appended to `base`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BatchTemplate {
    pub base: Scenario,
    /// Inclusive range of obstacle counts.
    pub obstacle_count: [usize; 2],
    /// One `[lo, hi]` range per workspace axis.
    pub center_ranges: Vec<[f64; 2]>,
    pub radius_range: [f64; 2],
    /// Smallest surface-to-surface distance between sampled circles; candidates
    /// violating it are rejected as invalid. Unset allows overlap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_gap: Option<f64>,
}

impl BatchTemplate {
    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        let template: Self = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: format!("line {}, column {}: {e}", e.line(), e.column()),
        })?;
        template.validate()?;
        Ok(template)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Error::ScenarioInvalid { check: "batch_template", detail };
        let [lo, hi] = self.obstacle_count;
        if lo > hi || hi == 0 {
            return Err(bad(format!("obstacle_count [{lo}, {hi}] is empty")));
        }
        if self.center_ranges.len() != self.base.goal.len() {
            return Err(bad("center_ranges must have one range per workspace axis".into()));
        }
        let ranges = self.center_ranges.iter().chain(std::iter::once(&self.radius_range));
        for r in ranges {
            if !(r[0] <= r[1]) || !r[0].is_finite() || !r[1].is_finite() {
                return Err(bad(format!("invalid range {r:?}")));
            }
        }
        if !(self.radius_range[0] > 0.0) {
            return Err(bad("radii must be positive".into()));
        }
        if let Some(gap) = self.min_gap {
            if !(gap >= 0.0) || !gap.is_finite() {
                return Err(bad(format!("min_gap must be finite and >= 0, got {gap}")));
            }
        }
        self.base.validate()
    }

    fn gaps_ok(&self, circles: &[(Vec<f64>, f64)]) -> bool {
        let Some(gap) = self.min_gap else {
            return true;
        };
        circles.iter().enumerate().all(|(i, (ci, ri))| {
            circles[i + 1..].iter().all(|(cj, rj)| {
                let d = ci.iter().zip(cj).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
                d - ri - rj >= gap
            })
        })
    }

    /// Candidate `index`, or `None` when the sampled circles are too close.
    fn sample(&self, seed: u64, index: usize) -> Option<Scenario> {
        let mut rng = rollout_rng(seed, index as u64);
        let count = rng.random_range(self.obstacle_count[0]..=self.obstacle_count[1]);
        let uniform = |rng: &mut rand_chacha::ChaCha8Rng, r: [f64; 2]| r[0] + (r[1] - r[0]) * rng.random::<f64>();
        let circles: Vec<(Vec<f64>, f64)> = (0..count)
            .map(|_| {
                let center = self.center_ranges.iter().map(|&r| uniform(&mut rng, r)).collect();
                (center, uniform(&mut rng, self.radius_range))
            })
            .collect();
        if !self.gaps_ok(&circles) {
            return None;
        }
        let mut scenario = self.base.clone();
        scenario.obstacles.extend(circles.into_iter().map(|(center, radius)| Shape::Circle { center, radius }));
        Some(scenario)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedBatch {
    pub seed: u64,
    pub count: usize,
    pub scenarios: Vec<Scenario>,
    /// Probe risk of each retained scenario.
    pub probe_risk: Vec<f64>,
    /// Candidate index of each retained scenario; its probe ran with
    /// `derive_seed(seed, index)`.
    pub candidate_index: Vec<usize>,
    pub examined: usize,
    pub rejected_invalid: usize,
    pub rejected_collision: usize,
    pub rejected_uninteresting: usize,
}

impl GeneratedBatch {
    fn rejection_summary(&self) -> String {
        format!(
            "{} invalid, {} in collision, {} uninteresting",
            self.rejected_invalid, self.rejected_collision, self.rejected_uninteresting
        )
    }

    pub fn rejected(&self) -> usize {
        self.rejected_invalid + self.rejected_collision + self.rejected_uninteresting
    }
}

enum Candidate {
    Retained(Box<Scenario>, f64),
    Invalid,
    Collision,
    Uninteresting,
}

fn evaluate(template: &BatchTemplate, seed: u64, index: usize, probe: &McConfig) -> Candidate {
    let Some(scenario) = template.sample(seed, index) else {
        return Candidate::Invalid;
    };
    let instance = match scenario.instantiate() {
        Ok(i) => i,
        Err(Error::NominalInCollision { .. }) => return Candidate::Collision,
        Err(_) => return Candidate::Invalid,
    };
    let config = McConfig { seed: derive_seed(seed, index as u64), ..*probe };
    match estimate_mc(
        instance.system.as_ref(),
        &instance.safe_set,
        &instance.design,
        &instance.initial_mean,
        &instance.partition,
        &config,
    ) {
        Ok(r) if r.estimate >= INTERESTING_MIN_RISK => Candidate::Retained(Box::new(scenario), r.estimate),
        Ok(_) => Candidate::Uninteresting,
        Err(_) => Candidate::Invalid,
    }
}

/// Samples candidates in index order and keeps the first `count` that are
/// valid, collision-free and have probe risk `>= INTERESTING_MIN_RISK`.
///
/// Candidates are evaluated concurrently in fixed-size chunks, so the result
/// depends only on `(template, count, seed, probe)`.
pub fn generate_batch(template: &BatchTemplate, count: usize, seed: u64, probe: &McConfig) -> Result<GeneratedBatch> {
    if count == 0 {
        return Err(Error::invalid("count must be >= 1"));
    }
    template.validate()?;
    probe.validate()?;
    let mut batch = GeneratedBatch {
        seed,
        count,
        scenarios: Vec::with_capacity(count),
        probe_risk: Vec::with_capacity(count),
        candidate_index: Vec::with_capacity(count),
        examined: 0,
        rejected_invalid: 0,
        rejected_collision: 0,
        rejected_uninteresting: 0,
    };
    let judge_after = JUDGE_AFTER_PER_SCENARIO * count;
    let budget = BUDGET_PER_SCENARIO * count;
    let chunk = count.max(8);

    while batch.scenarios.len() < count {
        let start = batch.examined;
        let end = (start + chunk).min(budget);
        let results: Vec<Candidate> = (start..end).into_par_iter().map(|i| evaluate(template, seed, i, probe)).collect();
        for (index, result) in (start..end).zip(results) {
            if batch.scenarios.len() == count {
                break;
            }
            batch.examined += 1;
            match result {
                Candidate::Retained(s, risk) => {
                    batch.scenarios.push(*s);
                    batch.probe_risk.push(risk);
                    batch.candidate_index.push(index);
                }
                Candidate::Invalid => batch.rejected_invalid += 1,
                Candidate::Collision => batch.rejected_collision += 1,
                Candidate::Uninteresting => batch.rejected_uninteresting += 1,
            }
        }
        if batch.scenarios.len() == count {
            break;
        }
        let rejection_rate = batch.rejected() as f64 / batch.examined as f64;
        if batch.examined >= judge_after && rejection_rate > MAX_REJECTION_RATE {
            return Err(Error::TemplateInfeasible {
                retained: batch.scenarios.len(),
                examined: batch.examined,
                reason: format!(
                    "rejection rate {:.1}% exceeds 99%; {}",
                    100.0 * rejection_rate,
                    batch.rejection_summary()
                ),
            });
        }
        if batch.examined >= budget {
            return Err(Error::TemplateInfeasible {
                retained: batch.scenarios.len(),
                examined: batch.examined,
                reason: format!("candidate budget of {budget} exhausted; {}", batch.rejection_summary()),
            });
        }
    }
    Ok(batch)
}
