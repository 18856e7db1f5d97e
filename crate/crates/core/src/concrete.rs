//! Grouping probabilities and Gumbel-Softmax assignment sampling.
//!
//! Each convolution kernel carries a categorical distribution over the
//! groups [task-1, shared, task-2]. Learned parameterizations keep
//! unconstrained logits that are mapped through softplus and normalized
//! per row; baselines freeze the probability rows directly, which allows
//! exact zeros and therefore exact one-hot samples.

use rand::Rng;

use crate::tensor::{Result, Tensor, TensorError};

/// Number of groups for the two-task case: [task-1, shared, task-2].
pub const NUM_GROUPS: usize = 3;

/// Column order of every probability / assignment row.
pub const GROUP_NAMES: [&str; NUM_GROUPS] = ["task1", "shared", "task2"];

/// Inverse of softplus: x such that ln(1+e^x) = y, for y > 0.
/// Shannon entropy of one probability row (natural log, 0·ln 0 = 0).
pub fn entropy_of_row(r: &[f64; NUM_GROUPS]) -> f64 {
    -r.iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

pub fn softplus_inverse(y: f64) -> f64 {
    // ln(e^y - 1), stable for small and large y
    if y > 30.0 {
        y
    } else {
        (y.exp() - 1.0).ln()
    }
}

/// Per-kernel grouping distribution over [p1, ps, p2].
pub enum GroupingParams {
    /// Trainable: p = normalize(softplus(logits)) per row.
    Learned { logits: Tensor },
    /// Fixed probability rows (may contain exact zeros / one-hots).
    Frozen { p: Tensor },
}

impl GroupingParams {
    /// Trainable parameters initialised so that every row's probabilities
    /// equal `p_init` (softplus ratios solved in closed form by pinning the
    /// row's softplus sum to 1).
    pub fn learned(num_kernels: usize, p_init: [f64; NUM_GROUPS]) -> Result<GroupingParams> {
        let s: f64 = p_init.iter().sum();
        if p_init.iter().any(|&v| v <= 0.0) || (s - 1.0).abs() > 1e-9 {
            return Err(TensorError::Invalid(format!(
                "learned grouping init must be strictly positive and sum to 1, got {p_init:?}"
            )));
        }
        let mut data = Vec::with_capacity(num_kernels * NUM_GROUPS);
        for _ in 0..num_kernels {
            for &v in &p_init {
                data.push(softplus_inverse(v));
            }
        }
        Ok(GroupingParams::Learned {
            logits: Tensor::param(data, &[num_kernels, NUM_GROUPS])?,
        })
    }

    /// Trainable parameters with one explicit probability row per kernel.
    pub fn learned_rows(rows: &[[f64; NUM_GROUPS]]) -> Result<GroupingParams> {
        let mut data = Vec::with_capacity(rows.len() * NUM_GROUPS);
        for row in rows {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&v| v <= 0.0) || (s - 1.0).abs() > 1e-9 {
                return Err(TensorError::Invalid(format!(
                    "learned grouping row must be strictly positive and sum to 1, got {row:?}"
                )));
            }
            for &v in row {
                data.push(softplus_inverse(v));
            }
        }
        Ok(GroupingParams::Learned {
            logits: Tensor::param(data, &[rows.len(), NUM_GROUPS])?,
        })
    }

    /// Fixed probability rows; rows must be non-negative and sum to 1.
    pub fn frozen(rows: &[[f64; NUM_GROUPS]]) -> Result<GroupingParams> {
        let mut data = Vec::with_capacity(rows.len() * NUM_GROUPS);
        for row in rows {
            let s: f64 = row.iter().sum();
            if row.iter().any(|&v| v < 0.0) || (s - 1.0).abs() > 1e-9 {
                return Err(TensorError::Invalid(format!(
                    "frozen grouping row must be a probability vector, got {row:?}"
                )));
            }
            data.extend_from_slice(row);
        }
        Ok(GroupingParams::Frozen {
            p: Tensor::from_vec(data, &[rows.len(), NUM_GROUPS])?,
        })
    }

    pub fn num_kernels(&self) -> usize {
        match self {
            GroupingParams::Learned { logits } => logits.shape()[0],
            GroupingParams::Frozen { p } => p.shape()[0],
        }
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self, GroupingParams::Learned { .. })
    }

    pub fn logits(&self) -> Option<&Tensor> {
        match self {
            GroupingParams::Learned { logits } => Some(logits),
            GroupingParams::Frozen { .. } => None,
        }
    }

    /// Probability rows [K, 3]; differentiable w.r.t. logits when learned.
    pub fn probs(&self) -> Result<Tensor> {
        match self {
            GroupingParams::Learned { logits } => logits.softplus()?.normalize_lastdim(),
            GroupingParams::Frozen { p } => Ok(p.clone()),
        }
    }

    /// Probability rows as plain values.
    pub fn prob_rows(&self) -> Result<Vec<[f64; NUM_GROUPS]>> {
        let p = self.probs()?;
        let d = p.data();
        Ok((0..self.num_kernels())
            .map(|k| [d[k * 3], d[k * 3 + 1], d[k * 3 + 2]])
            .collect())
    }

    /// Per-kernel entropy H(p) = -sum_i p_i ln p_i, shape [K]; differentiable.
    pub fn entropy(&self) -> Result<Tensor> {
        entropy_rows(&self.probs()?)
    }
}

/// Row-wise entropy of a [K, C] probability tensor, with 0·ln 0 = 0.
pub fn entropy_rows(p: &Tensor) -> Result<Tensor> {
    let [k, c] = match p.shape() {
        [k, c] => [*k, *c],
        other => {
            return Err(TensorError::BadShape {
                op: "entropy_rows",
                expected: "rank-2 probability tensor".into(),
                got: other.to_vec(),
            })
        }
    };
    let src = p.data();
    let data: Vec<f64> = (0..k)
        .map(|i| {
            -src[i * c..(i + 1) * c]
                .iter()
                .map(|&v| if v > 0.0 { v * v.ln() } else { 0.0 })
                .sum::<f64>()
        })
        .collect();
    drop(src);
    let pin = p.clone();
    Tensor::make_op(
        "entropy_rows",
        data,
        vec![k],
        vec![p.clone()],
        Box::new(move |ctx| {
            let pv = pin.data();
            let mut g = vec![0.0; k * c];
            for i in 0..k {
                for j in 0..c {
                    let v = pv[i * c + j];
                    // dH/dp = -(ln p + 1); only reachable on strictly
                    // positive rows (learned parameterization)
                    g[i * c + j] = -ctx.upstream[i] * (v.max(1e-300).ln() + 1.0);
                }
            }
            vec![Some(g)]
        }),
    )
}

/// One relaxed (or straight-through one-hot) group assignment per kernel.
pub struct AssignmentSample {
    /// [K, 3]; rows sum to 1. Participates in the graph when the grouping
    /// parameters are trainable.
    pub z: Tensor,
    pub tau: f64,
    pub hard: bool,
}

impl AssignmentSample {
    /// Hard group index per kernel.
    pub fn group_of(&self) -> Result<Vec<usize>> {
        self.z.argmax_rows()
    }
}

/// Draw standard Gumbel noise for a [K, 3] sample, clamped away from 0/1.
pub fn gumbel_noise<R: Rng>(num_kernels: usize, rng: &mut R) -> Tensor {
    let data: Vec<f64> = (0..num_kernels * NUM_GROUPS)
        .map(|_| {
            let u: f64 = rng.gen::<f64>().clamp(1e-12, 1.0 - 1e-12);
            -(-u.ln()).ln()
        })
        .collect();
    Tensor::from_vec(data, &[num_kernels, NUM_GROUPS]).expect("finite gumbel noise")
}

/// Gumbel-Softmax sample: z_i = softmax((ln p_i + g_i) / tau) per row.
/// `hard` rounds to the argmax one-hot with straight-through gradients.
pub fn gsm_sample<R: Rng>(
    gp: &GroupingParams,
    tau: f64,
    rng: &mut R,
    hard: bool,
) -> Result<AssignmentSample> {
    let noise = gumbel_noise(gp.num_kernels(), rng);
    gsm_sample_with_noise(gp, tau, &noise, hard)
}

/// Same as `gsm_sample` but with the Gumbel noise supplied by the caller,
/// so a draw can be replayed (finite-difference checks, MC estimators).
pub fn gsm_sample_with_noise(
    gp: &GroupingParams,
    tau: f64,
    noise: &Tensor,
    hard: bool,
) -> Result<AssignmentSample> {
    if tau <= 0.0 {
        return Err(TensorError::Invalid(format!(
            "gumbel-softmax temperature must be positive, got {tau}"
        )));
    }
    let p = gp.probs()?;
    if noise.shape() != p.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "gsm_sample",
            lhs: p.shape().to_vec(),
            rhs: noise.shape().to_vec(),
        });
    }
    let log_p = if p.requires_grad() {
        p.ln()?
    } else {
        // frozen rows may contain exact zeros; clamp the log so the softmax
        // assigns them exactly zero mass
        let data: Vec<f64> = p
            .data()
            .iter()
            .map(|&v| if v > 0.0 { v.ln() } else { -1e30 })
            .collect();
        Tensor::from_vec(data, p.shape())?
    };
    let z = log_p.add(noise)?.mul_scalar(1.0 / tau)?.softmax()?;
    let z = if hard { z.straight_through_onehot()? } else { z };
    Ok(AssignmentSample { z, tau, hard })
}

/// Temperature annealing: tau(t) = max(floor, exp(-rate * t)).
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct TempSchedule {
    pub rate: f64,
    pub floor: f64,
}

impl TempSchedule {
    pub fn new(rate: f64) -> TempSchedule {
        TempSchedule { rate, floor: 0.10 }
    }

    pub fn temperature(&self, t: u64) -> f64 {
        self.floor.max((-self.rate * t as f64).exp())
    }
}

impl Default for TempSchedule {
    fn default() -> Self {
        TempSchedule {
            rate: 1e-5,
            floor: 0.10,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn zero_logits_give_uniform_probs() {
        let gp = GroupingParams::Learned {
            logits: Tensor::param(vec![0.0; 3], &[1, 3]).unwrap(),
        };
        for v in gp.probs().unwrap().to_vec() {
            assert!((v - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn learned_init_hits_target_probs() {
        let gp = GroupingParams::learned(4, [0.2, 0.6, 0.2]).unwrap();
        for row in gp.prob_rows().unwrap() {
            assert!((row[0] - 0.2).abs() < 1e-9);
            assert!((row[1] - 0.6).abs() < 1e-9);
            assert!((row[2] - 0.2).abs() < 1e-9);
        }
    }

    #[test]
    fn probs_rows_sum_to_one() {
        let gp = GroupingParams::Learned {
            logits: Tensor::param(vec![1.5, -2.0, 0.3, -8.0, 4.0, 0.0], &[2, 3]).unwrap(),
        };
        let p = gp.probs().unwrap();
        let d = p.to_vec();
        for k in 0..2 {
            let s: f64 = d[k * 3..(k + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(d[k * 3..(k + 1) * 3].iter().all(|&v| v > 0.0));
        }
    }

    #[test]
    fn entropy_uniform_is_ln3() {
        let gp = GroupingParams::learned(1, [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).unwrap();
        let h = gp.entropy().unwrap();
        assert!((h.item() - 3.0f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn entropy_one_hot_is_zero() {
        let gp = GroupingParams::frozen(&[[0.0, 1.0, 0.0]]).unwrap();
        assert_eq!(gp.entropy().unwrap().item(), 0.0);
    }

    #[test]
    fn entropy_default_init_value() {
        // -(0.4 ln 0.2 + 0.6 ln 0.6)
        let gp = GroupingParams::learned(1, [0.2, 0.6, 0.2]).unwrap();
        let expect = -(0.4 * 0.2f64.ln() + 0.6 * 0.6f64.ln());
        assert!((gp.entropy().unwrap().item() - expect).abs() < 1e-9);
        assert!((expect - 0.95027).abs() < 1e-5);
    }

    #[test]
    fn schedule_values() {
        let sched = TempSchedule::default();
        assert_eq!(sched.temperature(0), 1.0);
        assert!((sched.temperature(50_000) - (-0.5f64).exp()).abs() < 1e-12);
        assert_eq!(sched.temperature(230_259), 0.10);
    }

    #[test]
    fn schedule_is_monotone() {
        let sched = TempSchedule::new(3e-4);
        let mut last = f64::INFINITY;
        for t in 0..2000 {
            let tau = sched.temperature(t * 13);
            assert!(tau <= last);
            last = tau;
        }
    }

    #[test]
    fn sample_rows_sum_to_one() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let gp = GroupingParams::learned(5, [0.2, 0.6, 0.2]).unwrap();
        let s = gsm_sample(&gp, 0.7, &mut rng, false).unwrap();
        let d = s.z.to_vec();
        for k in 0..5 {
            let sum: f64 = d[k * 3..(k + 1) * 3].iter().sum();
            assert!((sum - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn hard_sample_is_one_hot() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let gp = GroupingParams::learned(6, [0.2, 0.6, 0.2]).unwrap();
        let s = gsm_sample(&gp, 0.5, &mut rng, true).unwrap();
        for row in s.z.to_vec().chunks(3) {
            let ones = row.iter().filter(|&&v| v == 1.0).count();
            let zeros = row.iter().filter(|&&v| v == 0.0).count();
            assert_eq!((ones, zeros), (1, 2));
        }
    }

    #[test]
    fn frozen_one_hot_rows_sample_deterministically() {
        let gp = GroupingParams::frozen(&[[1.0, 0.0, 0.0], [0.0, 0.0, 1.0]]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        for _ in 0..20 {
            let s = gsm_sample(&gp, 1.0, &mut rng, false).unwrap();
            assert_eq!(s.z.to_vec(), vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        }
    }

    #[test]
    fn non_positive_tau_is_an_error() {
        let gp = GroupingParams::learned(1, [0.2, 0.6, 0.2]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        assert!(gsm_sample(&gp, 0.0, &mut rng, false).is_err());
        assert!(gsm_sample(&gp, -1.0, &mut rng, false).is_err());
    }

    #[test]
    fn near_deterministic_categorical() {
        let eps = 1e-12;
        let gp = GroupingParams::frozen(&[[1.0 - 2.0 * eps, eps, eps]]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let mut hits = 0usize;
        let draws = 100_000;
        for _ in 0..draws {
            let s = gsm_sample(&gp, 1.0, &mut rng, false).unwrap();
            if s.group_of().unwrap()[0] == 0 {
                hits += 1;
            }
        }
        assert!(hits as f64 / draws as f64 >= 0.999);
    }

    #[test]
    fn tiny_tau_samples_are_nearly_one_hot() {
        let gp = GroupingParams::learned(1, [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]).unwrap();
        let mut rng = ChaCha20Rng::seed_from_u64(9);
        let draws = 2000;
        let mut sharp = 0usize;
        for _ in 0..draws {
            let s = gsm_sample(&gp, 1e-3, &mut rng, false).unwrap();
            let mx = s.z.to_vec().iter().cloned().fold(f64::MIN, f64::max);
            if mx > 0.999 {
                sharp += 1;
            }
        }
        assert!(sharp as f64 / draws as f64 >= 0.99);
    }
}
