//! Synthetic prompt families and token-file loading.
//!
//! Three structural families stand in for datasets:
//!
//! * `Uniform` — independent random tokens; attention rows stay broad,
//!   the worst case for pruning.
//! * `Skewed` — heavy token repetition; rotary phase alignment makes
//!   attention concentrate on nearby repeats, the best case.
//! * `Retrieval` — a marker/payload pair planted mid-prompt with the
//!   marker repeated at the end; probes policies that only keep sinks
//!   and recent positions.

use crate::error::Error;
use crate::rng::Rng;
use crate::Result;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptFamily {
    Uniform,
    Skewed,
    Retrieval,
    /// Round-robin over the three families.
    Mixed,
}

impl PromptFamily {
    pub fn parse(s: &str) -> Result<PromptFamily> {
        match s {
            "uniform" => Ok(PromptFamily::Uniform),
            "skewed" => Ok(PromptFamily::Skewed),
            "retrieval" => Ok(PromptFamily::Retrieval),
            "mixed" => Ok(PromptFamily::Mixed),
            other => Err(Error::InvalidInput(format!(
                "unknown prompt family '{other}' (expected uniform|skewed|retrieval|mixed)"
            ))),
        }
    }
}

pub fn uniform_prompt(len: usize, vocab: usize, rng: &mut Rng) -> Vec<u32> {
    (0..len).map(|_| rng.next_below(vocab as u64) as u32).collect()
}

/// Repeated-token structure: one token repeated across the prompt.
/// Every position then matches the query's content, and attention
/// collapses onto the nearest repeats.
pub fn skewed_prompt(len: usize, vocab: usize, rng: &mut Rng) -> Vec<u32> {
    let base = rng.next_below(vocab as u64) as u32;
    vec![base; len]
}

/// Noise with a marker followed by a block of payload repeats planted
/// at `target_frac` of the length, and the marker repeated as the
/// final token. The payload block sits far from both the sinks and the
/// recency window, so policies that only keep those lose it.
pub fn retrieval_prompt(len: usize, vocab: usize, target_frac: f64, rng: &mut Rng) -> Vec<u32> {
    let marker = (vocab - 1) as u32;
    let payload = (vocab - 2) as u32;
    let noise_vocab = (vocab - 2).max(1) as u64;
    let mut prompt: Vec<u32> = (0..len).map(|_| rng.next_below(noise_vocab) as u32).collect();
    let block = 8.min(len / 4);
    if len >= 4 && block >= 1 {
        let target = ((len as f64 * target_frac) as usize).clamp(1, len - block - 2);
        prompt[target] = marker;
        for i in 0..block {
            prompt[target + 1 + i] = payload;
        }
        let last = prompt.len() - 1;
        prompt[last] = marker;
    }
    prompt
}

/// Deterministic prompt set for one family.
pub fn generate(
    family: PromptFamily,
    count: usize,
    len: usize,
    vocab: usize,
    seed: u64,
) -> Result<Vec<Vec<u32>>> {
    if count == 0 || len == 0 {
        return Err(Error::InvalidInput(
            "prompt count and length must be nonzero".into(),
        ));
    }
    if vocab < 8 {
        return Err(Error::InvalidInput(format!(
            "vocab {vocab} too small for synthetic prompts"
        )));
    }
    let mut rng = Rng::new(seed);
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let f = match family {
            PromptFamily::Mixed => match i % 3 {
                0 => PromptFamily::Uniform,
                1 => PromptFamily::Skewed,
                _ => PromptFamily::Retrieval,
            },
            f => f,
        };
        out.push(match f {
            PromptFamily::Uniform => uniform_prompt(len, vocab, &mut rng),
            PromptFamily::Skewed => skewed_prompt(len, vocab, &mut rng),
            PromptFamily::Retrieval => retrieval_prompt(len, vocab, 0.5, &mut rng),
            PromptFamily::Mixed => unreachable!(),
        });
    }
    Ok(out)
}

/// Loads prompts from a text file: one prompt per line, token ids
/// separated by whitespace; blank lines are skipped.
pub fn load_token_file(path: &Path, vocab: usize) -> Result<Vec<Vec<u32>>> {
    let text = std::fs::read_to_string(path)?;
    let mut prompts = Vec::new();
    for (line_no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let mut tokens = Vec::new();
        for field in line.split_whitespace() {
            let id: u32 = field.parse().map_err(|_| {
                Error::InvalidInput(format!(
                    "line {}: '{field}' is not a token id",
                    line_no + 1
                ))
            })?;
            if id as usize >= vocab {
                return Err(Error::InvalidInput(format!(
                    "line {}: token id {id} outside vocab {vocab}",
                    line_no + 1
                )));
            }
            tokens.push(id);
        }
        prompts.push(tokens);
    }
    if prompts.is_empty() {
        return Err(Error::InvalidInput("token file holds no prompts".into()));
    }
    Ok(prompts)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let a = generate(PromptFamily::Mixed, 6, 32, 128, 9).unwrap();
        let b = generate(PromptFamily::Mixed, 6, 32, 128, 9).unwrap();
        assert_eq!(a, b);
        let c = generate(PromptFamily::Mixed, 6, 32, 128, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn retrieval_places_marker_and_payload() {
        let mut rng = Rng::new(4);
        let p = retrieval_prompt(64, 128, 0.5, &mut rng);
        assert_eq!(p[32], 127);
        assert_eq!(p[33], 126);
        assert_eq!(p[63], 127);
    }

    #[test]
    fn skewed_prompts_repeat() {
        let mut rng = Rng::new(4);
        let p = skewed_prompt(64, 128, &mut rng);
        assert_eq!(p[0], p[1]);
        assert_eq!(p[0], p[14]);
    }

    #[test]
    fn token_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("prompts.txt");
        std::fs::write(&path, "1 2 3\n\n7 8\n").unwrap();
        let prompts = load_token_file(&path, 16).unwrap();
        assert_eq!(prompts, vec![vec![1, 2, 3], vec![7, 8]]);
        std::fs::write(&path, "1 99\n").unwrap();
        assert!(load_token_file(&path, 16).is_err());
        std::fs::write(&path, "1 x\n").unwrap();
        assert!(load_token_file(&path, 16).is_err());
    }
}
