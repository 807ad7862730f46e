use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::NumError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvmModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub c: f64,
}

/// Decision value `w . x + b`.
pub fn svm_score(model: &LinearSvmModel, x: &[f64]) -> Result<f64, NumError> {
    if x.len() != model.weights.len() {
        return Err(NumError::Dimension { expected: model.weights.len(), found: x.len() });
    }
    Ok(model.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>() + model.bias)
}

/// Primal objective `0.5 ||w||^2 + c * sum_i hinge_i` over both sample sets.
pub fn primal_objective(model: &LinearSvmModel, pos: &[Vec<f64>], neg: &[Vec<f64>]) -> f64 {
    let reg: f64 = 0.5 * model.weights.iter().map(|w| w * w).sum::<f64>();
    let mut hinge = 0.0;
    for x in pos {
        let s = svm_score(model, x).expect("dimension checked by caller");
        hinge += (1.0 - s).max(0.0);
    }
    for x in neg {
        let s = svm_score(model, x).expect("dimension checked by caller");
        hinge += (1.0 + s).max(0.0);
    }
    reg + model.c * hinge
}

/// Trains a binary linear SVM minimizing `0.5 ||w||^2 + c * sum hinge` by
/// stochastic subgradient descent with a deterministic per-epoch shuffle and
/// iterate averaging over the tail half of the run. The bias rides along as
/// an augmented coordinate. The returned model is the best of the averaged
/// iterate, the final iterate, and the zero model by primal objective, so
/// training never ends worse than doing nothing.
pub fn train_linear_svm(
    pos: &[Vec<f64>],
    neg: &[Vec<f64>],
    c: f64,
    epochs: usize,
    seed: u64,
) -> Result<LinearSvmModel, NumError> {
    if pos.is_empty() || neg.is_empty() {
        return Err(NumError::InvalidArgument("both classes need at least one sample".into()));
    }
    if !(c > 0.0) || !c.is_finite() {
        return Err(NumError::InvalidArgument(format!("c must be positive, got {c}")));
    }
    if epochs == 0 {
        return Err(NumError::InvalidArgument("epochs must be at least 1".into()));
    }
    let d = pos[0].len();
    let mut data: Vec<(&[f64], f64)> = Vec::with_capacity(pos.len() + neg.len());
    for x in pos {
        if x.len() != d {
            return Err(NumError::Dimension { expected: d, found: x.len() });
        }
        data.push((x.as_slice(), 1.0));
    }
    for x in neg {
        if x.len() != d {
            return Err(NumError::Dimension { expected: d, found: x.len() });
        }
        data.push((x.as_slice(), -1.0));
    }
    for (x, _) in &data {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(NumError::InvalidArgument("non-finite feature value".into()));
        }
    }

    let m = data.len();
    let lambda = 1.0 / (c * m as f64);
    // Offsetting the step schedule by ~1/lambda bounds the first steps near
    // unit size instead of the 1/(lambda t) blow-up.
    let t0 = (1.0 / lambda).ceil();
    let total_steps = epochs * m;
    let avg_from = total_steps / 2;

    let mut w = vec![0.0; d + 1]; // last coordinate is the bias
    let mut w_sum = vec![0.0; d + 1];
    let mut avg_count = 0u64;
    let mut order: Vec<usize> = (0..m).collect();
    let mut rng = super::rng_from(seed, 0x57A4);
    let mut t = 0usize;

    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let (x, y) = data[i];
            let eta = 1.0 / (lambda * (t0 + t as f64));
            let margin = y * (dot(&w[..d], x) + w[d]);
            let shrink = 1.0 - eta * lambda;
            for v in w.iter_mut() {
                *v *= shrink;
            }
            if margin < 1.0 {
                let g = eta * y;
                for (wj, xj) in w[..d].iter_mut().zip(x) {
                    *wj += g * xj;
                }
                w[d] += g;
            }
            if t > avg_from {
                for (s, v) in w_sum.iter_mut().zip(&w) {
                    *s += v;
                }
                avg_count += 1;
            }
        }
    }

    let averaged = if avg_count > 0 {
        w_sum.iter().map(|v| v / avg_count as f64).collect()
    } else {
        w.clone()
    };
    let candidates = [averaged, w, vec![0.0; d + 1]];
    let mut best: Option<LinearSvmModel> = None;
    let mut best_obj = f64::INFINITY;
    for cand in candidates {
        let model = LinearSvmModel { weights: cand[..d].to_vec(), bias: cand[d], c };
        let obj = primal_objective(&model, pos, neg);
        if obj < best_obj {
            best_obj = obj;
            best = Some(model);
        }
    }
    Ok(best.expect("candidate list is non-empty"))
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separable_pair_reaches_unit_margins() {
        let pos = vec![vec![1.0, 0.0]];
        let neg = vec![vec![-1.0, 0.0]];
        let m = train_linear_svm(&pos, &neg, 100.0, 200_000, 5).unwrap();
        let sp = svm_score(&m, &pos[0]).unwrap();
        let sn = svm_score(&m, &neg[0]).unwrap();
        assert!(sp >= 1.0 - 1e-3, "positive margin {sp}");
        assert!(-sn >= 1.0 - 1e-3, "negative margin {sn}");
    }

    #[test]
    fn degenerate_identical_classes_score_zero_at_origin() {
        let pt = vec![vec![0.0, 0.0]];
        let m = train_linear_svm(&pt, &pt, 4.0, 20_000, 3).unwrap();
        let s = svm_score(&m, &[0.0, 0.0]).unwrap();
        assert!(s.abs() < 5e-2, "decision value at origin was {s}");
    }

    #[test]
    fn fifty_separable_points_train_to_zero_errors() {
        let mut rng = crate::numerics::rng_from(0x5E9A, 0);
        use rand::Rng;
        let pos: Vec<Vec<f64>> =
            (0..25).map(|_| vec![1.0 + rng.gen_range(0.0..0.5), rng.gen_range(-1.0..1.0)]).collect();
        let neg: Vec<Vec<f64>> =
            (0..25).map(|_| vec![-1.0 - rng.gen_range(0.0..0.5), rng.gen_range(-1.0..1.0)]).collect();
        let m = train_linear_svm(&pos, &neg, 10.0, 2_000, 1).unwrap();
        for x in &pos {
            assert!(svm_score(&m, x).unwrap() > 0.0);
        }
        for x in &neg {
            assert!(svm_score(&m, x).unwrap() < 0.0);
        }
    }

    #[test]
    fn trained_objective_never_exceeds_zero_model() {
        let pos = vec![vec![0.3, 0.4], vec![0.2, 0.9], vec![0.6, 0.1]];
        let neg = vec![vec![-0.4, -0.1], vec![0.1, -0.8]];
        let c = 3.0;
        let m = train_linear_svm(&pos, &neg, c, 300, 9).unwrap();
        let zero = LinearSvmModel { weights: vec![0.0, 0.0], bias: 0.0, c };
        assert!(primal_objective(&m, &pos, &neg) <= primal_objective(&zero, &pos, &neg) + 1e-12);
    }

    #[test]
    fn self_convergence_within_two_percent_of_double_epochs() {
        let mut rng = crate::numerics::rng_from(0xC09, 1);
        use rand::Rng;
        let pos: Vec<Vec<f64>> =
            (0..20).map(|_| vec![0.8 + rng.gen_range(0.0..0.6), rng.gen_range(-0.5..0.5)]).collect();
        let neg: Vec<Vec<f64>> =
            (0..20).map(|_| vec![-0.8 - rng.gen_range(0.0..0.6), rng.gen_range(-0.5..0.5)]).collect();
        let epochs = 4_000;
        let a = train_linear_svm(&pos, &neg, 5.0, epochs, 2).unwrap();
        let b = train_linear_svm(&pos, &neg, 5.0, epochs * 2, 2).unwrap();
        let oa = primal_objective(&a, &pos, &neg);
        let ob = primal_objective(&b, &pos, &neg);
        assert!((oa - ob).abs() <= 0.02 * ob.max(1e-12), "objectives {oa} vs {ob}");
    }

    #[test]
    fn zero_weight_model_scores_its_bias() {
        let m = LinearSvmModel { weights: vec![0.0, 0.0, 0.0], bias: 0.7, c: 1.0 };
        assert_eq!(svm_score(&m, &[5.0, -3.0, 2.0]).unwrap(), 0.7);
    }

    #[test]
    fn dimension_mismatch_is_an_error() {
        let m = LinearSvmModel { weights: vec![1.0, 2.0], bias: 0.0, c: 1.0 };
        assert!(svm_score(&m, &[1.0]).is_err());
        assert!(train_linear_svm(&[vec![1.0]], &[vec![1.0, 2.0]], 1.0, 1, 0).is_err());
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let pos = vec![vec![1.0]];
        let neg = vec![vec![-1.0]];
        assert!(train_linear_svm(&pos, &neg, 0.0, 10, 0).is_err());
        assert!(train_linear_svm(&pos, &neg, -2.0, 10, 0).is_err());
        assert!(train_linear_svm(&pos, &neg, 1.0, 0, 0).is_err());
        assert!(train_linear_svm(&[], &neg, 1.0, 10, 0).is_err());
    }
}
