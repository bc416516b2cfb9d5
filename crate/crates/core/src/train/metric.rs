use crate::data::NUM_ANSWERS;
use crate::error::{bail, Result};

/// Answer comparison is exact after lowercasing and trimming.
pub fn normalize_answer(a: &str) -> String {
    a.trim().to_lowercase()
}

/// Mean over the ten leave-one-out subsets of `min(matches / 3, 1)`.
pub fn vqa_accuracy(predicted: &str, answers: &[String]) -> Result<f64> {
    if answers.len() != NUM_ANSWERS {
        bail!(Data, "{} answers given, expected {}", answers.len(), NUM_ANSWERS);
    }
    let p = normalize_answer(predicted);
    let hits: Vec<bool> = answers.iter().map(|a| normalize_answer(a) == p).collect();
    let total = hits.iter().filter(|&&h| h).count();
    // Summing min(m, 3) as integers keeps the result exact.
    let thirds: usize = hits.iter().map(|&dropped| (total - usize::from(dropped)).min(3)).sum();
    Ok(thirds as f64 / (3 * NUM_ANSWERS) as f64)
}

/// Target per answer slot: the accuracy that answer would score.
/// Answers outside the vocabulary contribute to no slot.
pub fn soft_targets(answers: &[String], vocab: &[String]) -> Result<Vec<f64>> {
    let mut t = vec![0.0; vocab.len()];
    let mut any = false;
    for (slot, a) in vocab.iter().enumerate() {
        if answers.iter().any(|x| normalize_answer(x) == *a) {
            t[slot] = vqa_accuracy(a, answers)?;
            any = true;
        }
    }
    if !any {
        if answers.len() != NUM_ANSWERS {
            bail!(Data, "{} answers given, expected {}", answers.len(), NUM_ANSWERS);
        }
        log::warn!("no annotator answer is in the answer vocabulary: {:?}", answers);
    }
    Ok(t)
}
