//! Posterior and loss computations: prototype softmax posteriors, cross
//! entropy, KL consistency, and the instance/triplet/supervised baselines.
//!
//! Everything is computed from shifted logits in log-space; probabilities are
//! derived quantities and never fed back into a log.

use serde::Serialize;

use crate::embedder::LinearHead;
use crate::error::{Result, VispeError};

const UNIT_NORM_TOL: f64 = 1e-6;

/// Numerically safe log-softmax (max-logit subtraction).
pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits
        .iter()
        .map(|&z| (z - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    logits.iter().map(|&z| z - log_sum).collect()
}

#[derive(Debug, Clone)]
pub struct Posterior {
    pub logits: Vec<f64>,
    pub log_probs: Vec<f64>,
    pub probs: Vec<f64>,
    pub tau: f64,
}

impl Posterior {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

fn check_unit(v: &[f64], what: &str) -> Result<()> {
    let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if (n - 1.0).abs() > UNIT_NORM_TOL {
        return Err(VispeError::Numeric(format!(
            "{what} is not unit-norm (|v| = {n})"
        )));
    }
    Ok(())
}

/// Softmax posterior over `protos` for one anchor: probs[i] ∝ exp(p_i·a / τ).
pub fn prototype_posterior(anchor: &[f64], protos: &[Vec<f64>], tau: f64) -> Result<Posterior> {
    if tau <= 0.0 {
        return Err(VispeError::Config("tau must be > 0".into()));
    }
    if protos.is_empty() {
        return Err(VispeError::Config("need at least one prototype".into()));
    }
    check_unit(anchor, "anchor")?;
    for (i, p) in protos.iter().enumerate() {
        check_unit(p, &format!("prototype {i}"))?;
    }
    let logits: Vec<f64> = protos
        .iter()
        .map(|p| p.iter().zip(anchor).map(|(x, y)| x * y).sum::<f64>() / tau)
        .collect();
    let log_probs = log_softmax(&logits);
    let probs = log_probs.iter().map(|lp| lp.exp()).collect();
    Ok(Posterior {
        logits,
        log_probs,
        probs,
        tau,
    })
}

/// −log p[target], from the log-space path.
pub fn proto_ce_loss(posterior: &Posterior, target: usize) -> Result<f64> {
    if target >= posterior.len() {
        return Err(VispeError::Config(format!(
            "target {target} out of range for posterior of length {}",
            posterior.len()
        )));
    }
    Ok(-posterior.log_probs[target])
}

/// KL(p ‖ q) in nats, with 0·log(0/q) := 0.
pub fn kl_div(p: &Posterior, q: &Posterior) -> Result<f64> {
    if p.len() != q.len() {
        return Err(VispeError::Config("posterior length mismatch".into()));
    }
    Ok(p
        .probs
        .iter()
        .zip(p.log_probs.iter().zip(&q.log_probs))
        .map(|(&pk, (lp, lq))| if pk == 0.0 { 0.0 } else { pk * (lp - lq) })
        .sum())
}

#[derive(Debug, Clone, Serialize)]
pub struct LossBreakdown {
    pub l_s1: f64,
    pub l_s2: f64,
    pub l_kl: f64,
    pub total: f64,
    pub alpha: f64,
    pub tau: f64,
}

/// Full per-example loss L = L_{s'_1} + L_{s'_2} + α·L_{KL'}.
pub fn total_loss(
    anchor: &[f64],
    protos_1: &[Vec<f64>],
    protos_2: &[Vec<f64>],
    target: usize,
    tau: f64,
    alpha: f64,
) -> Result<LossBreakdown> {
    if protos_1.len() != protos_2.len() {
        return Err(VispeError::Config(
            "prototype sets must have equal length".into(),
        ));
    }
    let p1 = prototype_posterior(anchor, protos_1, tau)?;
    let p2 = prototype_posterior(anchor, protos_2, tau)?;
    let l_s1 = proto_ce_loss(&p1, target)?;
    let l_s2 = proto_ce_loss(&p2, target)?;
    let l_kl = kl_div(&p1, &p2)?;
    Ok(LossBreakdown {
        l_s1,
        l_s2,
        l_kl,
        total: l_s1 + l_s2 + alpha * l_kl,
        alpha,
        tau,
    })
}

/// Average KL over all ordered pairs of prototype sets, with coefficient
/// K = 2 / (|S|(|S|−1)). Defined as 0 for fewer than two sets.
pub fn avg_pairwise_kl(anchor: &[f64], sets: &[Vec<Vec<f64>>], tau: f64) -> Result<f64> {
    let s = sets.len();
    if s <= 1 {
        return Ok(0.0);
    }
    let posteriors: Vec<Posterior> = sets
        .iter()
        .map(|set| prototype_posterior(anchor, set, tau))
        .collect::<Result<_>>()?;
    let mut sum = 0.0;
    for p in 0..s {
        for q in 0..s {
            if p != q {
                sum += kl_div(&posteriors[p], &posteriors[q])?;
            }
        }
    }
    Ok(2.0 / (s as f64 * (s as f64 - 1.0)) * sum)
}

/// −log softmax(W·feature)[target] for the instance-classifier baseline.
pub fn instance_softmax_loss(head: &LinearHead, feature: &[f64], target: usize) -> Result<f64> {
    if target >= head.rows {
        return Err(VispeError::Config(format!(
            "instance target {target} out of range ({} instances)",
            head.rows
        )));
    }
    let lp = log_softmax(&head.logits(feature));
    Ok(-lp[target])
}

/// max(0, ‖a−p‖² − ‖a−n‖² + margin) on unit vectors.
pub fn triplet_loss(anchor: &[f64], positive: &[f64], negative: &[f64], margin: f64) -> f64 {
    let dp: f64 = anchor
        .iter()
        .zip(positive)
        .map(|(a, p)| (a - p) * (a - p))
        .sum();
    let dn: f64 = anchor
        .iter()
        .zip(negative)
        .map(|(a, n)| (a - n) * (a - n))
        .sum();
    (dp - dn + margin).max(0.0)
}

/// Softmax cross-entropy over the seen-class head.
pub fn supervised_ce_loss(head: &LinearHead, feature: &[f64], class_label: usize) -> Result<f64> {
    if class_label >= head.rows {
        return Err(VispeError::Config(format!(
            "class label {class_label} not among the {} seen classes",
            head.rows
        )));
    }
    let lp = log_softmax(&head.logits(feature));
    Ok(-lp[class_label])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn unit(v: Vec<f64>) -> Vec<f64> {
        let n: f64 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.into_iter().map(|x| x / n).collect()
    }

    fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
        unit((0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    #[test]
    fn posterior_m1_is_one() {
        let a = unit(vec![1.0, 0.0, 0.0]);
        let p = prototype_posterior(&a, &[a.clone()], 0.05).unwrap();
        assert_eq!(p.probs, vec![1.0]);
    }

    #[test]
    fn posterior_orthogonal_uniform() {
        let a = unit(vec![1.0, 0.0, 0.0]);
        let protos = vec![
            unit(vec![0.0, 1.0, 0.0]),
            unit(vec![0.0, 0.0, 1.0]),
            unit(vec![0.0, -1.0, 0.0]),
        ];
        let p = prototype_posterior(&a, &protos, 0.05).unwrap();
        for &pk in &p.probs {
            assert!((pk - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn posterior_worked_m2() {
        // dot products (1.0, 0.0) at tau = 0.05 -> softmax(20, 0)
        let a = unit(vec![1.0, 0.0]);
        let protos = vec![a.clone(), unit(vec![0.0, 1.0])];
        let p = prototype_posterior(&a, &protos, 0.05).unwrap();
        let e = (-20.0f64).exp();
        let expect0 = 1.0 / (1.0 + e);
        let expect1 = e / (1.0 + e);
        assert!((p.probs[0] - expect0).abs() < 1e-15);
        assert!(((p.probs[1] - expect1) / expect1).abs() < 1e-12);
        assert!((p.probs[1] - 2.06e-9).abs() < 0.01e-9);
    }

    #[test]
    fn posterior_rejects_bad_inputs() {
        let a = unit(vec![1.0, 0.0]);
        assert!(prototype_posterior(&a, &[a.clone()], 0.0).is_err());
        assert!(prototype_posterior(&[0.5, 0.0], &[a.clone()], 0.05).is_err());
    }

    #[test]
    fn posterior_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let a = random_unit(8, &mut rng);
            let protos: Vec<_> = (0..6).map(|_| random_unit(8, &mut rng)).collect();
            let p = prototype_posterior(&a, &protos, 0.05).unwrap();
            let s: f64 = p.probs.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(p.probs.iter().all(|&x| x >= 0.0 && x.is_finite()));
        }
    }

    #[test]
    fn ce_uniform_is_ln_m() {
        let a = unit(vec![1.0, 0.0, 0.0]);
        let protos: Vec<_> = (0..4)
            .map(|i| {
                let mut v = vec![0.0; 3];
                v[1 + i % 2] = if i < 2 { 1.0 } else { -1.0 };
                unit(v)
            })
            .collect();
        let p = prototype_posterior(&a, &protos, 0.05).unwrap();
        for t in 0..4 {
            let l = proto_ce_loss(&p, t).unwrap();
            assert!((l - 4.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn ce_certain_is_zero_and_m1() {
        let a = unit(vec![1.0, 0.0]);
        let p = prototype_posterior(&a, &[a.clone()], 0.05).unwrap();
        assert_eq!(proto_ce_loss(&p, 0).unwrap(), 0.0);
    }

    #[test]
    fn kl_identical_zero_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random_unit(5, &mut rng);
        let protos: Vec<_> = (0..4).map(|_| random_unit(5, &mut rng)).collect();
        let p = prototype_posterior(&a, &protos, 0.05).unwrap();
        assert_eq!(kl_div(&p, &p).unwrap(), 0.0);
    }

    #[test]
    fn kl_hand_value() {
        // p = (1/2, 1/2), q = (1/4, 3/4)
        let p = Posterior {
            logits: vec![0.0, 0.0],
            log_probs: vec![0.5f64.ln(), 0.5f64.ln()],
            probs: vec![0.5, 0.5],
            tau: 1.0,
        };
        let q = Posterior {
            logits: vec![0.0, 0.0],
            log_probs: vec![0.25f64.ln(), 0.75f64.ln()],
            probs: vec![0.25, 0.75],
            tau: 1.0,
        };
        let expect = 0.5 * 2.0f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        let got = kl_div(&p, &q).unwrap();
        assert!((got - expect).abs() < 1e-15);
        assert!((got - 0.14384).abs() < 1e-5);
    }

    #[test]
    fn kl_nonneg_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..1000 {
            let a = random_unit(6, &mut rng);
            let protos1: Vec<_> = (0..5).map(|_| random_unit(6, &mut rng)).collect();
            let protos2: Vec<_> = (0..5).map(|_| random_unit(6, &mut rng)).collect();
            let p = prototype_posterior(&a, &protos1, 0.1).unwrap();
            let q = prototype_posterior(&a, &protos2, 0.1).unwrap();
            assert!(kl_div(&p, &q).unwrap() >= 0.0);
        }
    }

    #[test]
    fn total_loss_identical_sets() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = random_unit(6, &mut rng);
        let protos: Vec<_> = (0..3).map(|_| random_unit(6, &mut rng)).collect();
        let b = total_loss(&a, &protos, &protos, 1, 0.05, 5.0).unwrap();
        assert_eq!(b.l_kl, 0.0);
        assert!((b.total - 2.0 * b.l_s1).abs() < 1e-12);
    }

    #[test]
    fn total_loss_alpha_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random_unit(6, &mut rng);
        let p1: Vec<_> = (0..3).map(|_| random_unit(6, &mut rng)).collect();
        let p2: Vec<_> = (0..3).map(|_| random_unit(6, &mut rng)).collect();
        let b = total_loss(&a, &p1, &p2, 0, 0.05, 0.0).unwrap();
        assert!((b.total - (b.l_s1 + b.l_s2)).abs() < 1e-12);
    }

    #[test]
    fn total_loss_additivity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let a = random_unit(8, &mut rng);
            let p1: Vec<_> = (0..4).map(|_| random_unit(8, &mut rng)).collect();
            let p2: Vec<_> = (0..4).map(|_| random_unit(8, &mut rng)).collect();
            let b = total_loss(&a, &p1, &p2, 2, 0.05, 5.0).unwrap();
            assert!((b.total - (b.l_s1 + b.l_s2 + b.alpha * b.l_kl)).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_matches_scalar_oracle() {
        // m=2 worked case: dot products against protos1 are (1, 0)
        let a = unit(vec![1.0, 0.0]);
        let p1 = vec![a.clone(), unit(vec![0.0, 1.0])];
        let p2 = vec![unit(vec![0.0, -1.0]), a.clone()];
        let tau = 0.05;
        let b = total_loss(&a, &p1, &p2, 0, tau, 5.0).unwrap();
        // scalar brute force
        let soft = |l0: f64, l1: f64| {
            let m = l0.max(l1);
            let z = (l0 - m).exp() + (l1 - m).exp();
            ((l0 - m).exp() / z, (l1 - m).exp() / z)
        };
        let (p1a, p1b) = soft(1.0 / tau, 0.0);
        let (p2a, p2b) = soft(0.0, 1.0 / tau);
        let l1 = -p1a.ln();
        let l2 = -p2a.ln();
        let kl = p1a * (p1a / p2a).ln() + p1b * (p1b / p2b).ln();
        assert!((b.l_s1 - l1).abs() < 1e-10);
        assert!((b.l_s2 - l2).abs() < 1e-10);
        assert!((b.l_kl - kl).abs() < 1e-10);
        assert!((b.total - (l1 + l2 + 5.0 * kl)).abs() < 1e-10);
    }

    #[test]
    fn avg_pairwise_kl_degenerate_and_two() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let a = random_unit(6, &mut rng);
        let s1: Vec<_> = (0..3).map(|_| random_unit(6, &mut rng)).collect();
        let s2: Vec<_> = (0..3).map(|_| random_unit(6, &mut rng)).collect();
        assert_eq!(avg_pairwise_kl(&a, &[s1.clone()], 0.05).unwrap(), 0.0);
        let got = avg_pairwise_kl(&a, &[s1.clone(), s2.clone()], 0.05).unwrap();
        let p = prototype_posterior(&a, &s1, 0.05).unwrap();
        let q = prototype_posterior(&a, &s2, 0.05).unwrap();
        let expect = kl_div(&p, &q).unwrap() + kl_div(&q, &p).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn avg_pairwise_kl_three_sets_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = random_unit(6, &mut rng);
        let sets: Vec<Vec<Vec<f64>>> = (0..3)
            .map(|_| (0..3).map(|_| random_unit(6, &mut rng)).collect())
            .collect();
        let got = avg_pairwise_kl(&a, &sets, 0.05).unwrap();
        // nested-loop oracle over the 6 ordered pairs
        let posts: Vec<_> = sets
            .iter()
            .map(|s| prototype_posterior(&a, s, 0.05).unwrap())
            .collect();
        let mut vals = Vec::new();
        for p in 0..3 {
            for q in 0..3 {
                if p != q {
                    vals.push(kl_div(&posts[p], &posts[q]).unwrap());
                }
            }
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        assert!((got - 2.0 * mean).abs() < 1e-10);
    }

    #[test]
    fn tau_monotonicity() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let a = random_unit(6, &mut rng);
            let protos: Vec<_> = (0..5).map(|_| random_unit(6, &mut rng)).collect();
            let p_hi = prototype_posterior(&a, &protos, 0.5).unwrap();
            let p_lo = prototype_posterior(&a, &protos, 0.05).unwrap();
            let max_hi = p_hi.probs.iter().cloned().fold(0.0, f64::max);
            let max_lo = p_lo.probs.iter().cloned().fold(0.0, f64::max);
            assert!(max_lo > max_hi);
        }
    }

    #[test]
    fn instance_loss_cases() {
        let head = LinearHead {
            w: vec![0.0; 3 * 4],
            rows: 3,
            cols: 4,
        };
        let f = unit(vec![1.0, 1.0, 0.0, 0.0]);
        // all-zero head: uniform logits -> ln N
        let l = instance_softmax_loss(&head, &f, 1).unwrap();
        assert!((l - 3.0f64.ln()).abs() < 1e-12);
        let head1 = LinearHead {
            w: vec![0.3, -0.1, 0.9, 0.0],
            rows: 1,
            cols: 4,
        };
        assert_eq!(instance_softmax_loss(&head1, &f, 0).unwrap(), 0.0);
    }

    #[test]
    fn instance_loss_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let head = LinearHead {
            w: (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            rows: 3,
            cols: 4,
        };
        let f = random_unit(4, &mut rng);
        let got = instance_softmax_loss(&head, &f, 2).unwrap();
        let logits: Vec<f64> = (0..3)
            .map(|r| (0..4).map(|c| head.w[r * 4 + c] * f[c]).sum())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        let expect = -(logits[2].exp() / z).ln();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn triplet_cases() {
        let a = unit(vec![1.0, 0.0, 0.0]);
        let n = unit(vec![0.0, 1.0, 0.0]);
        // p == a, |a-n|^2 = 2 >= margin
        assert_eq!(triplet_loss(&a, &a, &n, 1.0), 0.0);
        // p == n: distances cancel
        assert_eq!(triplet_loss(&a, &n, &n, 1.0), 1.0);
    }

    #[test]
    fn triplet_scalar_oracle() {
        // a·p = 0.9, a·n = 0.1 on unit vectors
        let a = vec![1.0, 0.0];
        let p = vec![0.9, (1.0f64 - 0.81).sqrt()];
        let n = vec![0.1, (1.0f64 - 0.01).sqrt()];
        let l = triplet_loss(&a, &p, &n, 1.0);
        // |a-p|^2 = 0.2, |a-n|^2 = 1.8 -> max(0, 0.2 - 1.8 + 1) = 0
        assert!(l.abs() < 1e-12);
    }

    #[test]
    fn supervised_cases() {
        let head = LinearHead {
            w: vec![0.0; 12 * 4],
            rows: 12,
            cols: 4,
        };
        let f = unit(vec![0.5, 0.5, 0.5, 0.5]);
        let l = supervised_ce_loss(&head, &f, 3).unwrap();
        assert!((l - 12.0f64.ln()).abs() < 1e-12);
        assert!(supervised_ce_loss(&head, &f, 12).is_err());
        let one = LinearHead {
            w: vec![0.1, 0.2, 0.3, 0.4],
            rows: 1,
            cols: 4,
        };
        assert_eq!(supervised_ce_loss(&one, &f, 0).unwrap(), 0.0);
    }
}
