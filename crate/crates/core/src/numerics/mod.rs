//! Dense matrices, seeded randomness and small selection helpers.

mod matrix;
mod rng;

pub use matrix::{frobenius_norm, gaussian_fill, mat_mul, Matrix};
pub use rng::Rng;

use crate::error::{Error, Result};

/// Indices of the `k` largest `scores` among positions where `alive` is set.
///
/// Ties are broken by ascending index. The result is sorted ascending.
pub fn top_k_indices(scores: &[f64], k: usize, alive: &[bool]) -> Result<Vec<usize>> {
    if scores.len() != alive.len() {
        return Err(Error::contract(format!(
            "scores ({}) and alive ({}) lengths differ",
            scores.len(),
            alive.len()
        )));
    }
    let mut candidates: Vec<usize> = (0..scores.len()).filter(|&i| alive[i]).collect();
    if k > candidates.len() {
        return Err(Error::contract(format!(
            "top-k of {k} requested but only {} positions alive",
            candidates.len()
        )));
    }
    if candidates.iter().any(|&i| scores[i].is_nan()) {
        return Err(Error::contract("scores must not be NaN"));
    }
    candidates.sort_by(|&i, &j| scores[j].total_cmp(&scores[i]).then(i.cmp(&j)));
    let mut picked = candidates[..k].to_vec();
    picked.sort_unstable();
    Ok(picked)
}
