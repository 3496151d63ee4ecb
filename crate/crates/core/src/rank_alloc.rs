//! Dynamic rank allocation: the global triplet budget over rounds, magnitude
//! importance of triplets, local top-budget masks and server-side threshold
//! arbitration.

use crate::adapters::{Adapter, Flavor};
use crate::error::{Error, Result};
use crate::numerics::top_k_indices;

/// Cubic decay of the total triplet budget from `b0` to `b_final`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BudgetSchedule {
    pub b0: usize,
    pub b_final: usize,
    /// Warm-up rounds at full budget.
    pub t_warmup: usize,
    /// Trailing rounds held at `b_final`.
    pub t_final: usize,
    pub total_rounds: usize,
}

impl BudgetSchedule {
    pub fn new(
        b0: usize,
        b_final: usize,
        t_warmup: usize,
        t_final: usize,
        total_rounds: usize,
    ) -> Result<Self> {
        let s = Self {
            b0,
            b_final,
            t_warmup,
            t_final,
            total_rounds,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.b_final > self.b0 {
            return Err(Error::Config(format!(
                "final budget {} exceeds initial budget {}",
                self.b_final, self.b0
            )));
        }
        if self.t_final >= self.total_rounds || self.t_warmup >= self.total_rounds - self.t_final {
            return Err(Error::Config(format!(
                "schedule requires t_w < T - t_f (t_w={}, t_f={}, T={})",
                self.t_warmup, self.t_final, self.total_rounds
            )));
        }
        Ok(())
    }

    /// Budget at round `t`.
    pub fn budget(&self, t: usize) -> usize {
        let decay_end = self.total_rounds - self.t_final;
        if t < self.t_warmup {
            self.b0
        } else if t >= decay_end {
            self.b_final
        } else {
            let p = (t - self.t_warmup) as f64 / (decay_end - self.t_warmup) as f64;
            let span = (self.b0 - self.b_final) as f64;
            self.b_final + (span * (1.0 - p).powi(3)).floor() as usize
        }
    }
}

/// Global triplet mask, one boolean per triplet slot per adapter site.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct RankMask {
    sites: Vec<Vec<bool>>,
}

impl RankMask {
    pub fn new(sites: Vec<Vec<bool>>) -> Self {
        Self { sites }
    }

    pub fn all_true(ranks: &[usize]) -> Self {
        Self {
            sites: ranks.iter().map(|&r| vec![true; r]).collect(),
        }
    }

    /// Current alive pattern of a set of adapters.
    pub fn from_adapters(adapters: &[Adapter]) -> Self {
        Self {
            sites: adapters.iter().map(|a| a.alive().to_vec()).collect(),
        }
    }

    pub fn sites(&self) -> &[Vec<bool>] {
        &self.sites
    }

    pub fn site(&self, i: usize) -> &[bool] {
        &self.sites[i]
    }

    pub fn num_sites(&self) -> usize {
        self.sites.len()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.sites.iter().map(Vec::len).collect()
    }

    pub fn count(&self) -> usize {
        self.sites.iter().flatten().filter(|&&b| b).count()
    }

    pub fn site_count(&self, i: usize) -> usize {
        self.sites[i].iter().filter(|&&b| b).count()
    }

    /// Elementwise `self <= other`.
    pub fn is_subset_of(&self, other: &RankMask) -> bool {
        self.shape() == other.shape()
            && self
                .sites
                .iter()
                .flatten()
                .zip(other.sites.iter().flatten())
                .all(|(&a, &b)| !a || b)
    }

    fn flat(&self) -> Vec<bool> {
        self.sites.iter().flatten().copied().collect()
    }

    fn from_flat(shape: &[usize], flat: &[bool]) -> Self {
        let mut sites = Vec::with_capacity(shape.len());
        let mut offset = 0;
        for &r in shape {
            sites.push(flat[offset..offset + r].to_vec());
            offset += r;
        }
        Self { sites }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TripletScore {
    pub site: usize,
    pub triplet: usize,
    pub score: f64,
}

/// Magnitude importance of each triplet of a truncated-SVD adapter:
/// `|E[i]| + mean_j |B[j, i]| + mean_j |A[i, j]|`. Dead triplets score `-inf`.
pub fn triplet_importance(site: usize, adapter: &Adapter) -> Result<Vec<TripletScore>> {
    if adapter.flavor() != Flavor::TruncSvd {
        return Err(Error::contract("triplet importance is defined for TruncSvd adapters"));
    }
    let d1 = adapter.d_out() as f64;
    let d2 = adapter.d_in() as f64;
    Ok((0..adapter.r_init())
        .map(|i| {
            let score = if adapter.alive()[i] {
                let (b_col, e, a_row) = adapter.triplet(i);
                e.abs()
                    + b_col.iter().map(|v| v.abs()).sum::<f64>() / d1
                    + a_row.iter().map(|v| v.abs()).sum::<f64>() / d2
            } else {
                f64::NEG_INFINITY
            };
            TripletScore {
                site,
                triplet: i,
                score,
            }
        })
        .collect())
}

/// Marks the top-`budget` alive slots by score, ranked across all sites.
/// Ties go to the lower `(site, triplet)`. When fewer than `budget` slots are
/// alive, every alive slot is kept.
pub fn select_top_budget(scores: &[Vec<f64>], alive: &RankMask, budget: usize) -> Result<RankMask> {
    let shape = alive.shape();
    if scores.iter().map(Vec::len).collect::<Vec<_>>() != shape {
        return Err(Error::contract("score and mask shapes differ"));
    }
    let flat_alive = alive.flat();
    let flat_scores: Vec<f64> = scores.iter().flatten().copied().collect();
    let k = budget.min(alive.count());
    let picked = top_k_indices(&flat_scores, k, &flat_alive)?;
    let mut flat = vec![false; flat_alive.len()];
    for i in picked {
        flat[i] = true;
    }
    Ok(RankMask::from_flat(&shape, &flat))
}

/// Local mask at round `t`: the top-`budget(t)` alive triplets of the model.
pub fn gen_local_mask(adapters: &[Adapter], t: usize, schedule: &BudgetSchedule) -> Result<RankMask> {
    let mut scores = Vec::with_capacity(adapters.len());
    for (site, ad) in adapters.iter().enumerate() {
        scores.push(triplet_importance(site, ad)?.into_iter().map(|s| s.score).collect());
    }
    select_top_budget(&scores, &RankMask::from_adapters(adapters), schedule.budget(t))
}

/// Threshold arbitration of the participating clients' local masks.
///
/// A slot survives iff it is alive in `prev_global` and the fraction of
/// clients voting for it strictly exceeds `threshold`.
pub fn arbitrate(local_masks: &[RankMask], threshold: f64, prev_global: &RankMask) -> Result<RankMask> {
    if local_masks.is_empty() {
        return Err(Error::contract("arbitration needs at least one client mask"));
    }
    if !(0.0..1.0).contains(&threshold) {
        return Err(Error::contract(format!("threshold {threshold} outside [0, 1)")));
    }
    let shape = prev_global.shape();
    if local_masks.iter().any(|m| m.shape() != shape) {
        return Err(Error::contract("local mask shapes differ from the global mask"));
    }
    let k = local_masks.len() as f64;
    let sites = prev_global
        .sites
        .iter()
        .enumerate()
        .map(|(s, prev)| {
            prev.iter()
                .enumerate()
                .map(|(i, &alive)| {
                    let votes = local_masks.iter().filter(|m| m.sites[s][i]).count();
                    alive && (votes as f64 / k) > threshold
                })
                .collect()
        })
        .collect();
    Ok(RankMask { sites })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapters::{new_svd_adapter, AdapterConfig};
    use crate::numerics::{Matrix, Rng};
    use proptest::prelude::*;

    fn paper_schedule() -> BudgetSchedule {
        BudgetSchedule::new(32, 8, 5, 50, 100).unwrap()
    }

    #[test]
    fn budget_examples() {
        let s = paper_schedule();
        assert_eq!(s.budget(0), 32);
        assert_eq!(s.budget(5), 32);
        assert_eq!(s.budget(50), 8);
        assert_eq!(s.budget(100), 8);
        // 8 + floor(24 * (22/45)^3) = 8 + floor(2.804...)
        assert_eq!(s.budget(28), 10);
    }

    #[test]
    fn schedule_validation() {
        assert!(BudgetSchedule::new(8, 32, 5, 50, 100).is_err());
        assert!(BudgetSchedule::new(32, 8, 50, 50, 100).is_err());
        assert!(BudgetSchedule::new(32, 8, 0, 100, 100).is_err());
        assert!(BudgetSchedule::new(32, 8, 0, 0, 1).is_ok());
    }

    proptest! {
        #[test]
        fn budget_non_increasing_with_exact_endpoints(
            b_final in 0usize..40, extra in 0usize..60,
            total in 2usize..200, tw_frac in 0.0f64..1.0, tf_frac in 0.0f64..1.0,
        ) {
            let t_final = ((total - 1) as f64 * tf_frac) as usize;
            let t_warmup = ((total - t_final - 1) as f64 * tw_frac) as usize;
            let s = BudgetSchedule::new(b_final + extra, b_final, t_warmup, t_final, total).unwrap();
            prop_assert_eq!(s.budget(0), s.b0);
            prop_assert_eq!(s.budget(t_warmup), s.b0);
            prop_assert_eq!(s.budget(total - t_final), s.b_final);
            for t in 1..=total {
                prop_assert!(s.budget(t) <= s.budget(t - 1));
            }
        }
    }

    fn fixture_adapter(b_col: &[f64], e: f64, a_row: &[f64]) -> Adapter {
        let d_out = b_col.len();
        let d_in = a_row.len();
        let mut rng = Rng::new(0);
        let cfg = AdapterConfig::new(Flavor::TruncSvd, 1);
        let ad = new_svd_adapter(&mut rng, Matrix::zeros(d_out, d_in), cfg).unwrap();
        ad.with_factors(
            Matrix::from_vec(d_out, 1, b_col.to_vec()).unwrap(),
            vec![e],
            Matrix::from_vec(1, d_in, a_row.to_vec()).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn importance_hand_example() {
        let ad = fixture_adapter(&[0.2, -0.4], 0.5, &[0.1, -0.1, 0.4]);
        let s = triplet_importance(0, &ad).unwrap();
        assert!((s[0].score - 1.0).abs() < 1e-15);

        let flipped = fixture_adapter(&[-0.2, 0.4], -0.5, &[-0.1, 0.1, -0.4]);
        assert_eq!(triplet_importance(0, &flipped).unwrap()[0].score, s[0].score);

        let zero = fixture_adapter(&[0.0, 0.0], 0.0, &[0.0, 0.0, 0.0]);
        assert_eq!(triplet_importance(0, &zero).unwrap()[0].score, 0.0);
    }

    #[test]
    fn importance_rejects_lora_and_scores_dead_as_neg_inf() {
        let mut rng = Rng::new(0);
        let lora = Adapter::new(&mut rng, Matrix::zeros(4, 4), AdapterConfig::new(Flavor::Lora, 2)).unwrap();
        assert!(triplet_importance(0, &lora).is_err());
        let mut svd = Adapter::new(&mut rng, Matrix::zeros(4, 4), AdapterConfig::new(Flavor::TruncSvd, 2)).unwrap();
        svd.apply_mask(&[false, true]).unwrap();
        let s = triplet_importance(0, &svd).unwrap();
        assert_eq!(s[0].score, f64::NEG_INFINITY);
        assert!(s[1].score.is_finite());
    }

    #[test]
    fn top_budget_across_sites() {
        let scores = vec![vec![1.0, 0.2], vec![0.9, 0.8]];
        let alive = RankMask::all_true(&[2, 2]);
        let m = select_top_budget(&scores, &alive, 2).unwrap();
        assert_eq!(m.sites(), &[vec![true, false], vec![true, false]]);
        // budget above alive count keeps every alive slot
        let partial = RankMask::new(vec![vec![true, false], vec![false, true]]);
        let m = select_top_budget(&scores, &partial, 10).unwrap();
        assert_eq!(m, partial);
    }

    #[test]
    fn local_mask_respects_budget() {
        let mut rng = Rng::new(4);
        let adapters: Vec<Adapter> = (0..4)
            .map(|_| {
                let base = Matrix::gaussian(&mut rng, 16, 16, 0.25).unwrap();
                new_svd_adapter(&mut rng, base, AdapterConfig::new(Flavor::TruncSvd, 8)).unwrap()
            })
            .collect();
        let s = paper_schedule();
        for t in [0, 10, 28, 60] {
            let m = gen_local_mask(&adapters, t, &s).unwrap();
            assert_eq!(m.count(), s.budget(t));
        }
    }

    #[test]
    fn arbitration_cases() {
        let slot = |v: bool| RankMask::new(vec![vec![v]]);
        let votes = |yes: usize| -> Vec<RankMask> { (0..10).map(|k| slot(k < yes)).collect() };
        assert!(arbitrate(&votes(6), 0.5, &slot(true)).unwrap().site(0)[0]);
        assert!(!arbitrate(&votes(5), 0.5, &slot(true)).unwrap().site(0)[0]);
        assert!(!arbitrate(&votes(10), 0.5, &slot(false)).unwrap().site(0)[0]);
        assert!(arbitrate(&[], 0.5, &slot(true)).is_err());
        assert!(arbitrate(&votes(1), 1.0, &slot(true)).is_err());
    }

    proptest! {
        #[test]
        fn unanimous_masks_pass_through(bits in prop::collection::vec(any::<bool>(), 12), th in 0.0f64..0.999) {
            let m = RankMask::new(vec![bits[..4].to_vec(), bits[4..].to_vec()]);
            let prev = RankMask::all_true(&[4, 8]);
            let out = arbitrate(&[m.clone(), m.clone(), m.clone()], th, &prev).unwrap();
            prop_assert_eq!(out, m);
        }
    }
}
