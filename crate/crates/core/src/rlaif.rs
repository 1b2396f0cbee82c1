//! Preference data from claim-level AI feedback, and the DPO objective.
//!
//! Each sampled response is split into atomic claims that a judge marks valid
//! or invalid. A response scores `-n_rej`, the negated number of invalid
//! claims. Responses to the same instruction are then paired so that the
//! higher-scoring one is preferred; equal scores never form a pair.

use std::collections::HashMap;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const DEFAULT_BETA: f64 = 0.1;
pub const DEFAULT_MAX_PAIRS_PER_INSTRUCTION: usize = 2;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClaimVerdict {
    #[serde(rename = "text")]
    pub claim_text: String,
    pub valid: bool,
}

impl ClaimVerdict {
    pub fn new(claim_text: impl Into<String>, valid: bool) -> Self {
        Self { claim_text: claim_text.into(), valid }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResponseRecord {
    pub response_id: String,
    pub instruction_id: String,
    pub claims: Vec<ClaimVerdict>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub score: Option<i64>,
}

impl ResponseRecord {
    pub fn new(response_id: impl Into<String>, instruction_id: impl Into<String>, claims: Vec<ClaimVerdict>) -> Self {
        let mut r = Self {
            response_id: response_id.into(),
            instruction_id: instruction_id.into(),
            claims,
            score: None,
        };
        r.score = Some(r.computed_score());
        r
    }

    pub fn computed_score(&self) -> i64 {
        score_response(&self.claims)
    }

    /// Fills in the score, or checks a score that is already present.
    pub fn ensure_scored(&mut self) -> Result<i64> {
        let computed = self.computed_score();
        match self.score {
            Some(s) if s != computed => Err(Error::InvalidInput(format!(
                "response {:?} has score {s} but its claims give {computed}",
                self.response_id
            ))),
            _ => {
                self.score = Some(computed);
                Ok(computed)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PreferencePair {
    pub instruction_id: String,
    pub winner_id: String,
    pub loser_id: String,
    pub winner_score: i64,
    pub loser_score: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpoOutput {
    pub loss: f64,
    pub grad_w: f64,
    pub grad_l: f64,
}

/// `-n_rej`: minus the number of claims judged invalid.
pub fn score_response(claims: &[ClaimVerdict]) -> i64 {
    -(claims.iter().filter(|c| !c.valid).count() as i64)
}

/// Samples up to `max_pairs_per_instruction` preference pairs per instruction.
///
/// For every instruction (in order of first appearance) all pairs of
/// responses with different scores are enumerated, higher score first, and a
/// uniform subset is drawn without replacement. The generator for each
/// instruction is seeded from `SHA-256(seed || instruction_id)`, so the result
/// does not depend on how instructions are scheduled. Sampled pairs keep
/// their enumeration order.
pub fn build_preference_pairs(
    responses: &[ResponseRecord],
    seed: u64,
    max_pairs_per_instruction: usize,
) -> Result<Vec<PreferencePair>> {
    let mut scored = Vec::with_capacity(responses.len());
    for r in responses {
        let mut r = r.clone();
        r.ensure_scored()?;
        scored.push(r);
    }
    let mut out = Vec::new();
    for (instruction, group) in group_by_instruction(&scored) {
        let candidates = candidate_pairs(&group);
        let take = max_pairs_per_instruction.min(candidates.len());
        if take == 0 {
            continue;
        }
        let mut rng = instruction_rng(seed, instruction);
        let mut picked = index::sample(&mut rng, candidates.len(), take).into_vec();
        picked.sort_unstable();
        out.extend(picked.into_iter().map(|i| {
            let (w, l) = candidates[i];
            PreferencePair {
                instruction_id: instruction.to_string(),
                winner_id: w.response_id.clone(),
                loser_id: l.response_id.clone(),
                winner_score: w.score.expect("scored"),
                loser_score: l.score.expect("scored"),
            }
        }));
    }
    Ok(out)
}

/// All (winner, loser) pairs with a strictly higher winner score, in index
/// order of the pair's earlier response.
pub fn candidate_pairs<'a>(group: &[&'a ResponseRecord]) -> Vec<(&'a ResponseRecord, &'a ResponseRecord)> {
    let mut pairs = Vec::new();
    for (i, a) in group.iter().enumerate() {
        for b in &group[i + 1..] {
            match a.score.cmp(&b.score) {
                std::cmp::Ordering::Greater => pairs.push((*a, *b)),
                std::cmp::Ordering::Less => pairs.push((*b, *a)),
                std::cmp::Ordering::Equal => {}
            }
        }
    }
    pairs
}

fn instruction_rng(seed: u64, instruction_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(instruction_id.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    ChaCha8Rng::from_seed(digest)
}

/// `-ln sigmoid(beta * margin)` with
/// `margin = (logp_w_policy - logp_w_ref) - (logp_l_policy - logp_l_ref)`,
/// and its derivatives with respect to the two policy log-probabilities.
pub fn dpo_loss(
    beta: f64,
    logp_w_policy: f64,
    logp_w_ref: f64,
    logp_l_policy: f64,
    logp_l_ref: f64,
) -> Result<DpoOutput> {
    if !(beta > 0.0 && beta.is_finite()) {
        return Err(Error::BadBeta(beta));
    }
    for lp in [logp_w_policy, logp_w_ref, logp_l_policy, logp_l_ref] {
        if !lp.is_finite() || lp > 0.0 {
            return Err(Error::BadLogProb(lp));
        }
    }
    let margin = (logp_w_policy - logp_w_ref) - (logp_l_policy - logp_l_ref);
    let z = beta * margin;
    // d/dz [-ln sigmoid(z)] = -sigmoid(-z)
    let pull = beta * sigmoid(-z);
    Ok(DpoOutput { loss: softplus(-z), grad_w: -pull, grad_l: pull })
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Responses grouped by instruction, in order of first appearance.
fn group_by_instruction(responses: &[ResponseRecord]) -> Vec<(&str, Vec<&ResponseRecord>)> {
    let mut slots: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<(&str, Vec<&ResponseRecord>)> = Vec::new();
    for r in responses {
        let id = r.instruction_id.as_str();
        let slot = *slots.entry(id).or_insert_with(|| {
            groups.push((id, Vec::new()));
            groups.len() - 1
        });
        groups[slot].1.push(r);
    }
    groups
}
