use super::ObjectiveError;
use crate::numkernel::{Graph, Real, Tensor, Var};

fn zero<T: Real>(g: &mut Graph<'_, T>) -> Var {
    g.constant(Tensor::scalar(T::zero()))
}

fn rows_of<T: Real>(
    g: &Graph<'_, T>,
    loss: &'static str,
    logits: Option<Var>,
    targets: usize,
) -> Result<Option<(Var, usize)>, ObjectiveError> {
    match logits {
        None if targets == 0 => Ok(None),
        None => Err(ObjectiveError::RowMismatch {
            loss,
            rows: 0,
            targets,
        }),
        Some(v) => {
            let shape = g.shape(v);
            if shape.len() != 2 || shape[0] != targets {
                return Err(ObjectiveError::RowMismatch {
                    loss,
                    rows: shape.first().copied().unwrap_or(0),
                    targets,
                });
            }
            Ok(Some((v, shape[1])))
        }
    }
}

fn mean_ce<T: Real>(
    g: &mut Graph<'_, T>,
    loss: &'static str,
    logits: Option<Var>,
    targets: &[u32],
) -> Result<Var, ObjectiveError> {
    let Some((logits, classes)) = rows_of(g, loss, logits, targets.len())? else {
        return Ok(zero(g));
    };
    let w = T::one() / T::from_f64(targets.len() as f64);
    let mut terms = Vec::with_capacity(targets.len());
    for (row, &t) in targets.iter().enumerate() {
        if t as usize >= classes {
            return Err(ObjectiveError::TargetOutOfRange {
                loss,
                target: t as usize,
                classes,
            });
        }
        terms.push((row, t as usize, w));
    }
    Ok(g.cross_entropy(logits, &terms)?)
}

/// Mean cross-entropy over masked text positions; exactly 0 with no positions.
pub fn mlm_loss<T: Real>(
    g: &mut Graph<'_, T>,
    logits: Option<Var>,
    targets: &[u32],
) -> Result<Var, ObjectiveError> {
    mean_ce(g, "mlm", logits, targets)
}

/// Mean cross-entropy of masked regions against their detector class.
pub fn mrc_loss<T: Real>(
    g: &mut Graph<'_, T>,
    logits: Option<Var>,
    targets: &[u32],
) -> Result<Var, ObjectiveError> {
    mean_ce(g, "mrc", logits, targets)
}

/// Mean over masked regions of the squared L2 distance to the original feature.
pub fn mrfr_loss<T: Real>(
    g: &mut Graph<'_, T>,
    pred: Option<Var>,
    targets: &[Vec<f32>],
) -> Result<Var, ObjectiveError> {
    let Some((pred, dim)) = rows_of(g, "mrfr", pred, targets.len())? else {
        return Ok(zero(g));
    };
    let mut flat = Vec::with_capacity(targets.len() * dim);
    for t in targets {
        if t.len() != dim {
            return Err(ObjectiveError::RowMismatch {
                loss: "mrfr",
                rows: dim,
                targets: t.len(),
            });
        }
        flat.extend(t.iter().map(|&x| T::from_f32(x)));
    }
    Ok(g.squared_error(pred, &flat)?)
}

/// For each masked region, the mean cross-entropy against each token of its
/// linked phrase; then the mean over regions.
pub fn p_mrtc_loss<T: Real>(
    g: &mut Graph<'_, T>,
    logits: Option<Var>,
    targets: &[Vec<u32>],
) -> Result<Var, ObjectiveError> {
    let Some((logits, classes)) = rows_of(g, "p_mrtc", logits, targets.len())? else {
        return Ok(zero(g));
    };
    let regions = T::from_f64(targets.len() as f64);
    let mut terms = Vec::new();
    for (row, tokens) in targets.iter().enumerate() {
        if tokens.is_empty() {
            return Err(ObjectiveError::EmptyPhrase(row));
        }
        let w = T::one() / (regions * T::from_f64(tokens.len() as f64));
        for &t in tokens {
            if t as usize >= classes {
                return Err(ObjectiveError::TargetOutOfRange {
                    loss: "p_mrtc",
                    target: t as usize,
                    classes,
                });
            }
            terms.push((row, t as usize, w));
        }
    }
    Ok(g.cross_entropy(logits, &terms)?)
}

/// Binary cross-entropy of `logistic(score)` against `label`.
pub fn itm_loss<T: Real>(
    g: &mut Graph<'_, T>,
    score: Var,
    label: u8,
) -> Result<Var, ObjectiveError> {
    if label > 1 {
        return Err(ObjectiveError::BadLabel(label));
    }
    Ok(g.bce_with_logits(score, T::from_f64(label as f64))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn logits(g: &mut Graph<'_, f64>, rows: Vec<Vec<f64>>) -> Var {
        g.input(Tensor::from_rows(&rows).unwrap(), true)
    }

    fn ce(row: &[f64], t: usize) -> f64 {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln() - row[t]
    }

    #[test]
    fn uniform_logits_give_log_classes() {
        let mut g = Graph::standalone();
        let l = logits(&mut g, vec![vec![0.0; 10]; 3]);
        let v = mlm_loss(&mut g, Some(l), &[1, 4, 9]).unwrap();
        assert!((g.scalar(v) - 10f64.ln()).abs() < 1e-12);
        let l = logits(&mut g, vec![vec![0.0; 4]]);
        let v = mrc_loss(&mut g, Some(l), &[2]).unwrap();
        assert!((g.scalar(v) - 4f64.ln()).abs() < 1e-12);
        let l = logits(&mut g, vec![vec![0.0; 7]; 2]);
        let v = p_mrtc_loss(&mut g, Some(l), &[vec![1, 2, 3], vec![6]]).unwrap();
        assert!((g.scalar(v) - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn empty_plans_give_exact_zero() {
        let mut g = Graph::<f64>::standalone();
        for v in [
            mlm_loss(&mut g, None, &[]).unwrap(),
            mrc_loss(&mut g, None, &[]).unwrap(),
            mrfr_loss(&mut g, None, &[]).unwrap(),
            p_mrtc_loss(&mut g, None, &[]).unwrap(),
        ] {
            assert_eq!(g.scalar(v), 0.0);
        }
    }

    #[test]
    fn confident_prediction_approaches_zero() {
        let mut g = Graph::standalone();
        let l = logits(&mut g, vec![vec![-50.0, 50.0, -50.0]]);
        let v = mlm_loss(&mut g, Some(l), &[1]).unwrap();
        assert!(g.scalar(v) < 1e-40);
    }

    #[test]
    fn mean_reduction_over_positions() {
        let rows = vec![vec![0.3, -1.0, 2.0], vec![1.5, 0.1, -0.4]];
        let mut g = Graph::standalone();
        let l = logits(&mut g, rows.clone());
        let v = mlm_loss(&mut g, Some(l), &[2, 0]).unwrap();
        let expect = (ce(&rows[0], 2) + ce(&rows[1], 0)) / 2.0;
        assert!((g.scalar(v) - expect).abs() < 1e-12);
    }

    #[test]
    fn phrase_loss_averages_tokens_then_regions() {
        let rows = vec![vec![0.3, -1.0, 2.0, 0.0], vec![1.5, 0.1, -0.4, 0.9]];
        let mut g = Graph::standalone();
        let l = logits(&mut g, rows.clone());
        let v = p_mrtc_loss(&mut g, Some(l), &[vec![0, 3], vec![2]]).unwrap();
        let first = (ce(&rows[0], 0) + ce(&rows[0], 3)) / 2.0;
        let expect = (first + ce(&rows[1], 2)) / 2.0;
        assert!((g.scalar(v) - expect).abs() < 1e-12);
        let single = {
            let mut g = Graph::standalone();
            let l = logits(&mut g, vec![rows[1].clone()]);
            let v = p_mrtc_loss(&mut g, Some(l), &[vec![2]]).unwrap();
            g.scalar(v)
        };
        assert!((single - ce(&rows[1], 2)).abs() < 1e-12);
    }

    #[test]
    fn regression_matches_sum_of_squares_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..50 {
            let n = rng.gen_range(1..5);
            let d = rng.gen_range(1..9);
            let pred: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect())
                .collect();
            let target: Vec<Vec<f32>> = (0..n)
                .map(|_| (0..d).map(|_| rng.gen_range(-2.0f32..2.0)).collect())
                .collect();
            let mut oracle = 0.0;
            for (p, t) in pred.iter().zip(&target) {
                for (a, &b) in p.iter().zip(t) {
                    oracle += (a - b as f64) * (a - b as f64);
                }
            }
            oracle /= n as f64;
            let mut g = Graph::standalone();
            let p = logits(&mut g, pred);
            let v = mrfr_loss(&mut g, Some(p), &target).unwrap();
            assert!((g.scalar(v) - oracle).abs() < 1e-6);
        }
    }

    #[test]
    fn unit_offset_regression_is_one() {
        let mut g = Graph::standalone();
        let p = logits(&mut g, vec![vec![1.0, 0.0, 2.0]]);
        let v = mrfr_loss(&mut g, Some(p), &[vec![1.0, 1.0, 2.0]]).unwrap();
        assert_eq!(g.scalar(v), 1.0);
        let p = logits(&mut g, vec![vec![1.0, 0.0, 2.0]]);
        let v = mrfr_loss(&mut g, Some(p), &[vec![1.0, 0.0, 2.0]]).unwrap();
        assert_eq!(g.scalar(v), 0.0);
    }

    #[test]
    fn itm_closed_forms() {
        let mut g = Graph::standalone();
        let s = g.input(Tensor::scalar(0.0f64), true);
        for y in [0, 1] {
            let v = itm_loss(&mut g, s, y).unwrap();
            assert!((g.scalar(v) - 2f64.ln()).abs() < 1e-7);
        }
        let s = g.input(Tensor::scalar(1.0f64), true);
        let v = itm_loss(&mut g, s, 1).unwrap();
        assert!((g.scalar(v) - 0.3133).abs() < 1e-4);
        assert!((g.scalar(v) - (1.0 + (-1.0f64).exp()).ln()).abs() < 1e-15);
        let s = g.input(Tensor::scalar(40.0f64), true);
        let v = itm_loss(&mut g, s, 1).unwrap();
        assert!(g.scalar(v) < 1e-15);
        assert!(itm_loss(&mut g, s, 2).is_err());
    }

    #[test]
    fn invalid_targets_are_errors() {
        let mut g = Graph::standalone();
        let l = logits(&mut g, vec![vec![0.0; 5]]);
        assert!(matches!(
            mlm_loss(&mut g, Some(l), &[5]),
            Err(ObjectiveError::TargetOutOfRange {
                target: 5,
                classes: 5,
                ..
            })
        ));
        assert!(matches!(
            p_mrtc_loss(&mut g, Some(l), &[vec![]]),
            Err(ObjectiveError::EmptyPhrase(0))
        ));
        assert!(mlm_loss(&mut g, Some(l), &[0, 1]).is_err());
        assert!(mlm_loss(&mut g, None, &[0]).is_err());
    }
}
