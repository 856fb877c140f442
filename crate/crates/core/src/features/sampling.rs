//! Seeded few-shot prompt selection.
//!
//! Selection indexes into the set's record order, so a seed picks the same
//! prompts wherever the same container is loaded.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::types::{FeatureRecord, FeatureSet, PromptBank};
use crate::error::{Error, Result};

/// How prompt banks are grouped relative to the query.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum BankScope {
    /// Prompts share the query's class name.
    #[default]
    PerClass,
    /// Prompts come from every normal record.
    WholeSet,
}

/// Picks `k` distinct positions out of `candidates`, returned in ascending order.
pub(crate) fn choose_sorted(candidates: &[usize], k: usize, rng: &mut ChaCha8Rng) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::Argument("K must be at least 1".into()));
    }
    if candidates.len() < k {
        return Err(Error::InsufficientNormals {
            needed: k,
            available: candidates.len(),
        });
    }
    let mut picked: Vec<usize> = rand::seq::index::sample(rng, candidates.len(), k)
        .into_iter()
        .map(|i| candidates[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

fn bank_from(records: &[FeatureRecord], candidates: &[usize], k: usize, seed: u64) -> Result<PromptBank> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = choose_sorted(candidates, k, &mut rng)?;
    PromptBank::new(picked.into_iter().map(|i| records[i].clone()).collect())
}

/// Draws `k` distinct normal records from the whole set.
pub fn sample_prompts(set: &FeatureSet, k: usize, seed: u64) -> Result<PromptBank> {
    let candidates: Vec<usize> = set
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_normal())
        .map(|(i, _)| i)
        .collect();
    bank_from(set.records(), &candidates, k, seed)
}

/// Draws `k` distinct normal records of one class.
pub fn sample_class_prompts(set: &FeatureSet, class_name: &str, k: usize, seed: u64) -> Result<PromptBank> {
    let candidates: Vec<usize> = set
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.is_normal() && r.class_name == class_name)
        .map(|(i, _)| i)
        .collect();
    bank_from(set.records(), &candidates, k, seed)
}

/// Builds a bank from explicit record ids, in the order given.
pub fn bank_from_ids(set: &FeatureSet, ids: &[String]) -> Result<PromptBank> {
    let prompts = ids
        .iter()
        .map(|id| {
            set.records()
                .iter()
                .find(|r| &r.id == id)
                .cloned()
                .ok_or_else(|| Error::Argument(format!("prompt id `{id}` not found")))
        })
        .collect::<Result<Vec<_>>>()?;
    PromptBank::new(prompts)
}
