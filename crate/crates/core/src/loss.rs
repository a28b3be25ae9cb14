//! Batch-all triplet loss over part-wise embeddings and per-strip
//! cross-entropy.

use crate::error::{Error, Result};
use crate::tensor::{softmax_in_place, Matrix};

pub const DEFAULT_TRIPLET_MARGIN: f64 = 0.2;

#[derive(Debug, Clone, PartialEq)]
pub struct TripletOutput {
    pub loss: f64,
    /// Gradient per input embedding, same shapes as the inputs.
    pub grads: Vec<Matrix>,
    /// Number of (anchor, positive, negative, strip) terms considered.
    pub terms: usize,
    /// Terms with a strictly positive hinge.
    pub active: usize,
    /// Set when the batch has no valid triplet; the loss is then 0.
    pub no_valid_triplet: bool,
}

fn strip_distance(a: &Matrix, b: &Matrix, s: usize) -> f64 {
    a.row(s).iter().zip(b.row(s)).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Batch-all triplet loss: every (anchor, positive, negative) combination and
/// every strip contributes `max(0, d(a,p) − d(a,n) + margin)` with per-strip
/// Euclidean distances; the loss averages the nonzero terms only.
pub fn triplet_loss(embeddings: &[Matrix], labels: &[usize], margin: f64) -> Result<TripletOutput> {
    if embeddings.len() != labels.len() {
        return Err(Error::shape(format!("{} embeddings but {} labels", embeddings.len(), labels.len())));
    }
    let n = embeddings.len();
    let mut grads: Vec<Matrix> = embeddings.iter().map(|e| Matrix::zeros(e.rows(), e.cols())).collect();
    let Some(first) = embeddings.first() else {
        return Ok(TripletOutput { loss: 0.0, grads, terms: 0, active: 0, no_valid_triplet: true });
    };
    let (strips, dim) = (first.rows(), first.cols());
    if embeddings.iter().any(|e| (e.rows(), e.cols()) != (strips, dim)) {
        return Err(Error::shape("embeddings must share one shape"));
    }
    // dist[s][i][j]
    let mut dist = vec![vec![vec![0.0; n]; n]; strips];
    for (s, plane) in dist.iter_mut().enumerate() {
        for i in 0..n {
            for j in (i + 1)..n {
                let d = strip_distance(&embeddings[i], &embeddings[j], s);
                plane[i][j] = d;
                plane[j][i] = d;
            }
        }
    }
    // Accumulate coefficients on distances first, then chain through them.
    let mut coef = vec![vec![vec![0.0; n]; n]; strips];
    let (mut total, mut terms, mut active) = (0.0, 0usize, 0usize);
    for a in 0..n {
        for p in 0..n {
            if p == a || labels[p] != labels[a] {
                continue;
            }
            for q in 0..n {
                if labels[q] == labels[a] {
                    continue;
                }
                for s in 0..strips {
                    terms += 1;
                    let v = dist[s][a][p] - dist[s][a][q] + margin;
                    if v > 0.0 {
                        total += v;
                        active += 1;
                        coef[s][a][p] += 1.0;
                        coef[s][a][q] -= 1.0;
                    }
                }
            }
        }
    }
    if terms == 0 {
        return Ok(TripletOutput { loss: 0.0, grads, terms, active, no_valid_triplet: true });
    }
    if active == 0 {
        return Ok(TripletOutput { loss: 0.0, grads, terms, active, no_valid_triplet: false });
    }
    let scale = 1.0 / active as f64;
    let mut gdata: Vec<Vec<f64>> = grads.iter().map(|g| g.data().to_vec()).collect();
    for s in 0..strips {
        for i in 0..n {
            for j in 0..n {
                let c = coef[s][i][j];
                let d = dist[s][i][j];
                if c == 0.0 || d == 0.0 {
                    continue;
                }
                let k = c * scale / d;
                let (ei, ej) = (embeddings[i].row(s), embeddings[j].row(s));
                for t in 0..dim {
                    let diff = ei[t] - ej[t];
                    gdata[i][s * dim + t] += k * diff;
                    gdata[j][s * dim + t] -= k * diff;
                }
            }
        }
    }
    grads = gdata.into_iter().map(|d| Matrix::from_vec(strips, dim, d).expect("sized")).collect();
    Ok(TripletOutput { loss: total * scale, grads, terms, active, no_valid_triplet: false })
}

/// Mean over strips of `−log softmax(logits[s])[label]`, with its gradient
/// with respect to the logits.
pub fn cross_entropy_loss(logits: &Matrix, label: usize) -> Result<(f64, Matrix)> {
    let classes = logits.cols();
    if label >= classes {
        return Err(Error::config(format!("label {label} out of range for {classes} classes")));
    }
    let strips = logits.rows();
    if strips == 0 {
        return Err(Error::shape("cross-entropy needs at least one strip"));
    }
    let mut grad = Vec::with_capacity(strips * classes);
    let mut loss = 0.0;
    for s in 0..strips {
        let row = logits.row(s);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[label];
        let mut p = row.to_vec();
        softmax_in_place(&mut p);
        p[label] -= 1.0;
        grad.extend(p.into_iter().map(|v| v / strips as f64));
    }
    Ok((loss / strips as f64, Matrix::from_vec(strips, classes, grad)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{finite_difference_grad, max_relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn m1(v: f64) -> Matrix {
        Matrix::from_vec(1, 1, vec![v]).unwrap()
    }

    #[test]
    fn identical_embeddings_give_margin() {
        let e = vec![Matrix::from_vec(2, 3, vec![0.5; 6]).unwrap(); 4];
        let out = triplet_loss(&e, &[0, 0, 1, 1], 0.2).unwrap();
        assert!((out.loss - 0.2).abs() < 1e-15);
        assert_eq!(out.active, out.terms);
        assert!(out.grads.iter().all(|g| g.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn separated_batch_has_zero_loss() {
        let e = vec![m1(0.0), m1(0.0), m1(5.0), m1(5.0)];
        let out = triplet_loss(&e, &[0, 0, 1, 1], 0.2).unwrap();
        assert_eq!(out.loss, 0.0);
        assert!(!out.no_valid_triplet);
    }

    #[test]
    fn hand_placed_triplets() {
        let out = triplet_loss(&[m1(0.0), m1(1.0), m1(1.5)], &[0, 0, 1], 0.2).unwrap();
        // Anchor 0: max(0, 1 − 1.5 + 0.2) = 0. Anchor 1: max(0, 1 − 0.5 + 0.2) = 0.7.
        assert!((out.loss - 0.7).abs() < 1e-12);
        assert_eq!(out.active, 1);

        let out = triplet_loss(&[m1(0.0), m1(1.0), m1(1.1)], &[0, 0, 1], 0.2).unwrap();
        // Anchor 0: 1 − 1.1 + 0.2 = 0.1. Anchor 1: 1 − 0.1 + 0.2 = 1.1.
        assert!((out.loss - 0.6).abs() < 1e-12);

        // Single-anchor view of the same configurations.
        let single = |a: f64, p: f64, n: f64| ((p - a).abs() - (n - a).abs() + 0.2).max(0.0);
        assert_eq!(single(0.0, 1.0, 1.5), 0.0);
        assert!((single(0.0, 1.0, 1.1) - 0.1).abs() < 1e-12);
    }

    #[test]
    fn no_valid_triplet_is_flagged() {
        let out = triplet_loss(&[m1(0.0), m1(1.0)], &[0, 1], 0.2).unwrap();
        assert!(out.no_valid_triplet);
        assert_eq!(out.loss, 0.0);
        let out = triplet_loss(&[m1(0.0), m1(1.0)], &[0, 0], 0.2).unwrap();
        assert!(out.no_valid_triplet);
        assert!(triplet_loss(&[m1(0.0)], &[0, 1], 0.2).is_err());
    }

    #[test]
    fn triplet_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let labels = [0, 0, 1, 1, 2, 2];
        let flat: Vec<f64> = (0..6 * 2 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let build =
            |p: &[f64]| -> Vec<Matrix> { p.chunks(6).map(|c| Matrix::from_vec(2, 3, c.to_vec()).unwrap()).collect() };
        let out = triplet_loss(&build(&flat), &labels, 0.5).unwrap();
        let analytic: Vec<f64> = out.grads.iter().flat_map(|g| g.data().to_vec()).collect();
        let fd = finite_difference_grad(|p| triplet_loss(&build(p), &labels, 0.5).unwrap().loss, &flat, 1e-6).unwrap();
        assert!(max_relative_error(&analytic, &fd, 1e-6) <= 1e-4);
    }

    #[test]
    fn cross_entropy_examples() {
        let uniform = Matrix::from_vec(2, 5, vec![0.3; 10]).unwrap();
        let (loss, _) = cross_entropy_loss(&uniform, 2).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);

        let dominant = Matrix::from_vec(1, 3, vec![0.0, 800.0, 0.0]).unwrap();
        let (loss, grad) = cross_entropy_loss(&dominant, 1).unwrap();
        assert!(loss.abs() < 1e-12);
        assert!(grad.data().iter().all(|v| v.abs() < 1e-12));

        assert!(cross_entropy_loss(&uniform, 5).is_err());
    }

    #[test]
    fn cross_entropy_matches_hand_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = Matrix::from_vec(3, 4, (0..12).map(|_| rng.random_range(-3.0..3.0)).collect()).unwrap();
        let (loss, grad) = cross_entropy_loss(&logits, 3).unwrap();
        let mut want = 0.0;
        for s in 0..3 {
            let z: f64 = logits.row(s).iter().map(|v| v.exp()).sum();
            want += -(logits.at(s, 3).exp() / z).ln();
        }
        assert!((loss - want / 3.0).abs() <= 1e-12);
        let fd = finite_difference_grad(
            |p| cross_entropy_loss(&Matrix::from_vec(3, 4, p.to_vec()).unwrap(), 3).unwrap().0,
            logits.data(),
            1e-6,
        )
        .unwrap();
        assert!(max_relative_error(grad.data(), &fd, 1e-6) <= 1e-4);
    }
}
