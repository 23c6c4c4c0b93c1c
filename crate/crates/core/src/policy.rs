//! Per-block categorical policy over redundancy operations.
//!
//! A policy is an `L x O` row-stochastic matrix: row `l` is the sampling
//! distribution over the operation pool for block `l`. Each attack
//! iteration samples `s` distinct operations per block (without
//! replacement, renormalizing the remaining mass per draw) and afterwards
//! nudges the sampled entries with a score-function update using the
//! iteration's adversarial loss as reward, minus a running baseline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::redundancy::{OpKind, OP_POOL};
use crate::rng::StreamRng;

/// Policy hyperparameters as they appear in experiment configs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicyParams {
    /// Operations sampled per block each iteration.
    pub s: usize,
    pub lr: f64,
    pub prob_floor: f64,
}

impl Default for PolicyParams {
    fn default() -> Self {
        Self { s: 2, lr: 0.05, prob_floor: 0.01 }
    }
}

/// The trainable sampling matrix plus its update state.
#[derive(Clone, Debug)]
pub struct OpPolicy {
    matrix: Vec<Vec<f64>>,
    op_pool: Vec<OpKind>,
    s: usize,
    lr: f64,
    prob_floor: f64,
    baseline: f64,
}

/// Decay of the running reward baseline.
const BASELINE_DECAY: f64 = 0.9;

impl OpPolicy {
    /// Uniform rows over `op_pool`, zero baseline.
    pub fn init(
        num_blocks: usize,
        op_pool: Vec<OpKind>,
        s: usize,
        lr: f64,
        prob_floor: f64,
    ) -> Result<Self> {
        let o = op_pool.len();
        if o == 0 || num_blocks == 0 {
            return Err(Error::Config("policy needs at least one block and one operation".into()));
        }
        if !(0.0..=1.0).contains(&prob_floor) || prob_floor * o as f64 >= 1.0 {
            return Err(Error::Config(format!(
                "prob_floor {prob_floor} infeasible for {o} operations"
            )));
        }
        if s > o {
            return Err(Error::Config(format!("cannot sample {s} distinct ops from a pool of {o}")));
        }
        if !lr.is_finite() || lr < 0.0 {
            return Err(Error::Config(format!("bad policy learning rate {lr}")));
        }
        let row = vec![1.0 / o as f64; o];
        Ok(Self {
            matrix: vec![row; num_blocks],
            op_pool,
            s,
            lr,
            prob_floor,
            baseline: 0.0,
        })
    }

    /// The default pool with the crate's standard hyperparameters.
    pub fn standard(num_blocks: usize, params: &PolicyParams) -> Result<Self> {
        Self::init(num_blocks, OP_POOL.to_vec(), params.s, params.lr, params.prob_floor)
    }

    /// A policy that deterministically samples only `Identity`
    /// (probability one, zero floor). Used for neutral-reduction checks.
    pub fn identity_forced(num_blocks: usize, s: usize) -> Self {
        let mut row = vec![0.0; OP_POOL.len()];
        row[OpKind::Identity.index()] = 1.0;
        Self {
            matrix: vec![row; num_blocks],
            op_pool: OP_POOL.to_vec(),
            s,
            lr: 0.0,
            prob_floor: 0.0,
            baseline: 0.0,
        }
    }

    pub fn num_blocks(&self) -> usize {
        self.matrix.len()
    }

    pub fn op_pool(&self) -> &[OpKind] {
        &self.op_pool
    }

    pub fn matrix(&self) -> &[Vec<f64>] {
        &self.matrix
    }

    pub fn baseline(&self) -> f64 {
        self.baseline
    }

    /// Draws up to `s` distinct operations per block. Each draw is
    /// categorical over the renormalized mass of the not-yet-drawn pool;
    /// draws stop early if no probability mass remains.
    pub fn sample_schedule(&self, rng: &mut StreamRng) -> Vec<Vec<OpKind>> {
        self.matrix
            .iter()
            .map(|row| {
                let mut remaining: Vec<(usize, f64)> =
                    row.iter().copied().enumerate().collect();
                let mut picks = Vec::with_capacity(self.s);
                for _ in 0..self.s {
                    let total: f64 = remaining.iter().map(|(_, p)| p).sum();
                    if total <= 0.0 {
                        break;
                    }
                    let mut u = rng.next_f64() * total;
                    let mut chosen = remaining.len() - 1;
                    for (slot, (_, p)) in remaining.iter().enumerate() {
                        if u < *p {
                            chosen = slot;
                            break;
                        }
                        u -= p;
                    }
                    let (idx, _) = remaining.remove(chosen);
                    picks.push(self.op_pool[idx]);
                }
                picks
            })
            .collect()
    }

    /// Score-function update: with advantage `A = reward - baseline`, every
    /// sampled entry moves by `lr * A / M[l,o]` (ascent on the expected
    /// reward), rows are clamped to the floor and renormalized, and the
    /// baseline absorbs the reward with decay 0.9.
    pub fn reinforce_update(&mut self, sampled: &[Vec<OpKind>], reward: f64) -> Result<()> {
        if sampled.len() != self.matrix.len() {
            return Err(Error::Contract(format!(
                "sampled sets cover {} blocks, policy has {}",
                sampled.len(),
                self.matrix.len()
            )));
        }
        for kinds in sampled {
            for k in kinds {
                if !self.op_pool.contains(k) {
                    return Err(Error::Contract(format!("operation {k:?} not in policy pool")));
                }
            }
        }

        let advantage = reward - self.baseline;
        let step = self.lr * advantage;
        if step != 0.0 {
            for (row, kinds) in self.matrix.iter_mut().zip(sampled) {
                for kind in kinds {
                    let idx = self
                        .op_pool
                        .iter()
                        .position(|k| k == kind)
                        .expect("pool membership checked");
                    if row[idx] > 0.0 {
                        row[idx] += step / row[idx];
                    }
                }
                project_row(row, self.prob_floor);
            }
        }
        self.baseline = BASELINE_DECAY * self.baseline + (1.0 - BASELINE_DECAY) * reward;
        Ok(())
    }
}

/// Projects a nonnegative row onto the simplex with entrywise lower bound
/// `floor`: entries at/below the floor are pinned and the free mass is
/// rescaled until feasible, then the largest entry absorbs the residual
/// rounding error so the row sums to one.
fn project_row(row: &mut [f64], floor: f64) {
    let o = row.len();
    let mut fixed = vec![false; o];
    for (v, f) in row.iter_mut().zip(fixed.iter_mut()) {
        if *v < floor {
            *v = floor;
            *f = true;
        }
    }
    loop {
        let fixed_count = fixed.iter().filter(|f| **f).count();
        if fixed_count == o {
            break;
        }
        let target = 1.0 - floor * fixed_count as f64;
        let free_sum: f64 = row.iter().zip(&fixed).filter(|(_, f)| !**f).map(|(v, _)| v).sum();
        if free_sum <= 0.0 {
            let share = target / (o - fixed_count) as f64;
            for (v, f) in row.iter_mut().zip(&fixed) {
                if !f {
                    *v = share;
                }
            }
            break;
        }
        let scale = target / free_sum;
        let mut newly_pinned = false;
        for (v, f) in row.iter_mut().zip(fixed.iter_mut()) {
            if !*f {
                *v *= scale;
                if *v < floor {
                    *v = floor;
                    *f = true;
                    newly_pinned = true;
                }
            }
        }
        if !newly_pinned {
            break;
        }
    }
    let sum: f64 = row.iter().sum();
    let err = 1.0 - sum;
    let argmax = row
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite probabilities"))
        .map(|(i, _)| i)
        .expect("non-empty row");
    row[argmax] += err;
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::tag;

    fn assert_valid_rows(policy: &OpPolicy, floor: f64) {
        for row in policy.matrix() {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12, "row sum {sum}");
            for &p in row {
                assert!(p >= floor - 1e-15 && p <= 1.0 + 1e-12, "entry {p}");
            }
        }
    }

    #[test]
    fn init_is_uniform() {
        let p = OpPolicy::init(4, OP_POOL.to_vec(), 2, 0.05, 0.01).unwrap();
        assert_eq!(p.matrix().len(), 4);
        for row in p.matrix() {
            assert_eq!(row.len(), 5);
            for &v in row {
                assert_eq!(v, 0.2);
            }
            assert_eq!(row.iter().sum::<f64>(), 1.0);
        }
    }

    #[test]
    fn init_rejects_bad_floor() {
        let err = OpPolicy::init(4, OP_POOL.to_vec(), 2, 0.05, 0.2).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }

    #[test]
    fn sample_respects_s() {
        let p = OpPolicy::init(3, OP_POOL.to_vec(), 0, 0.05, 0.01).unwrap();
        let mut rng = StreamRng::from_tags(1, &[tag::POLICY_SAMPLE]);
        let sets = p.sample_schedule(&mut rng);
        assert!(sets.iter().all(|s| s.is_empty()));

        let p = OpPolicy::init(3, OP_POOL.to_vec(), 5, 0.05, 0.01).unwrap();
        let sets = p.sample_schedule(&mut rng);
        for set in sets {
            assert_eq!(set.len(), 5);
            let mut kinds = set.clone();
            kinds.sort_by_key(|k| k.index());
            kinds.dedup();
            assert_eq!(kinds.len(), 5, "all ops drawn once");
        }
    }

    #[test]
    fn sample_is_dominated_by_heavy_entry() {
        // Mass 1 - 4*floor on GhostMoe: it should lead the draw order
        // in at least 95% of 1000 draws.
        let mut p = OpPolicy::init(1, OP_POOL.to_vec(), 1, 0.05, 0.01).unwrap();
        let heavy = OpKind::GhostMoe.index();
        for (i, v) in p.matrix[0].iter_mut().enumerate() {
            *v = if i == heavy { 1.0 - 4.0 * 0.01 } else { 0.01 };
        }
        let mut rng = StreamRng::from_tags(99, &[tag::POLICY_SAMPLE]);
        let mut hits = 0;
        for _ in 0..1000 {
            let sets = p.sample_schedule(&mut rng);
            if sets[0][0] == OpKind::GhostMoe {
                hits += 1;
            }
        }
        assert!(hits >= 950, "heavy op drawn first only {hits}/1000 times");
    }

    #[test]
    fn zero_advantage_leaves_matrix_bit_identical() {
        let mut p = OpPolicy::init(2, OP_POOL.to_vec(), 2, 0.05, 0.01).unwrap();
        let before = p.matrix().to_vec();
        // baseline starts at 0, reward 0 -> advantage 0
        p.reinforce_update(&[vec![OpKind::Identity], vec![OpKind::GhostMoe]], 0.0).unwrap();
        for (rb, ra) in before.iter().zip(p.matrix()) {
            for (b, a) in rb.iter().zip(ra) {
                assert_eq!(b.to_bits(), a.to_bits());
            }
        }
    }

    #[test]
    fn positive_advantage_raises_sampled_lowers_rest() {
        let mut p = OpPolicy::init(1, OP_POOL.to_vec(), 1, 0.05, 0.01).unwrap();
        p.reinforce_update(&[vec![OpKind::PermuteHeads]], 1.0).unwrap();
        let row = &p.matrix()[0];
        let target = OpKind::PermuteHeads.index();
        for (i, &v) in row.iter().enumerate() {
            if i == target {
                assert!(v > 0.2, "sampled entry should rise, got {v}");
            } else {
                assert!(v < 0.2, "unsampled entry should fall, got {v}");
            }
        }
        assert_valid_rows(&p, 0.01);
    }

    #[test]
    fn hand_computed_update() {
        // Uniform row, s = 1, sampled op index 2, lr = 0.01, advantage 1:
        // raw [0.2, 0.2, 0.25, 0.2, 0.2] -> renormalized
        // [0.19048, 0.19048, 0.23810, 0.19048, 0.19048].
        let mut p = OpPolicy::init(1, OP_POOL.to_vec(), 1, 0.01, 0.0).unwrap();
        let sampled = vec![vec![OP_POOL[2]]];
        p.reinforce_update(&sampled, 1.0).unwrap();
        let row = &p.matrix()[0];
        let want = [0.19048, 0.19048, 0.23810, 0.19048, 0.19048];
        for (got, want) in row.iter().zip(want) {
            assert!((got - want).abs() < 5e-6, "got {got}, want {want}");
        }
        // baseline moved toward the reward
        assert!((p.baseline() - 0.1).abs() < 1e-15);
    }

    #[test]
    fn rows_stay_valid_under_noisy_updates() {
        let mut p = OpPolicy::init(4, OP_POOL.to_vec(), 2, 0.05, 0.01).unwrap();
        let mut rng = StreamRng::from_tags(5, &[tag::POLICY_SAMPLE]);
        for i in 0..300 {
            let sampled = p.sample_schedule(&mut rng);
            let reward = (i % 7) as f64 * 0.37 - 1.0;
            p.reinforce_update(&sampled, reward).unwrap();
            assert_valid_rows(&p, 0.01);
        }
    }

    #[test]
    fn update_rejects_foreign_ops() {
        let mut p =
            OpPolicy::init(1, vec![OpKind::Identity, OpKind::GhostMoe], 1, 0.05, 0.01).unwrap();
        let err = p.reinforce_update(&[vec![OpKind::PermuteHeads]], 1.0).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
    }

    #[test]
    fn bandit_concentrates_on_dominant_op() {
        // One op kind deterministically yields reward 1, others 0; the
        // winning op's probability must exceed 0.9 in every row within
        // 500 updates at lr = 0.05, floor = 0.01.
        let num_blocks = 4;
        let winner = OpKind::CleanInject;
        let mut p = OpPolicy::init(num_blocks, OP_POOL.to_vec(), 1, 0.05, 0.01).unwrap();
        let mut rng = StreamRng::from_tags(17, &[tag::POLICY_SAMPLE, 7]);
        let mut converged_at = None;
        for step in 0..500 {
            let sampled = p.sample_schedule(&mut rng);
            let hits = sampled.iter().filter(|set| set.contains(&winner)).count();
            let reward = hits as f64 / num_blocks as f64;
            p.reinforce_update(&sampled, reward).unwrap();
            assert_valid_rows(&p, 0.01);
            if p.matrix().iter().all(|row| row[winner.index()] > 0.9) {
                converged_at = Some(step);
                break;
            }
        }
        assert!(converged_at.is_some(), "no concentration within 500 updates");
    }
}
