//! DPP kernel construction, DPP maximum-likelihood loss, actionness
//! cross-entropy and their combination.

use crate::error::{Error, Result};
use crate::labels::ActionnessRank;
use crate::numerics::{dot, Cholesky, Matrix, SYMMETRY_TOL};

/// Floor applied to predicted probabilities before taking logs.
pub const PROB_FLOOR: f64 = 1e-12;

/// Symmetric PSD DPP kernel `L`.
#[derive(Clone, Debug, PartialEq)]
pub struct DppKernel(Matrix);

impl DppKernel {
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_symmetric(SYMMETRY_TOL) {
            return Err(Error::InvalidArgument("DPP kernel must be symmetric".into()));
        }
        Ok(Self(m))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn n(&self) -> usize {
        self.0.rows()
    }
}

/// `L_ij = q_i (φ_i · φ_j) q_j`, the Gram matrix of the rows `q_i φ_i`.
pub fn build_dpp_kernel(phi: &Matrix, q: &[f64]) -> Result<DppKernel> {
    if phi.rows() != q.len() {
        return Err(Error::shape("build_dpp_kernel", format!("{} quality scores", phi.rows()), q.len()));
    }
    if phi.rows() == 0 {
        return Err(Error::EmptyInput("no frames for DPP kernel"));
    }
    if q.iter().any(|v| !v.is_finite()) {
        return Err(Error::non_finite("quality scores"));
    }
    let n = q.len();
    let mut l = Matrix::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let v = q[i] * dot(phi.row(i), phi.row(j)) * q[j];
            l[(i, j)] = v;
            l[(j, i)] = v;
        }
    }
    Ok(DppKernel(l))
}

fn check_subset(y: &[usize], n: usize) -> Result<()> {
    for (k, &i) in y.iter().enumerate() {
        if i >= n {
            return Err(Error::IndexOutOfRange {
                start: i,
                end: i + 1,
                len: n,
            });
        }
        if y[..k].contains(&i) {
            return Err(Error::InvalidArgument(format!("frame {i} repeated in subset")));
        }
    }
    Ok(())
}

fn plus_identity(l: &Matrix) -> Matrix {
    let mut m = l.clone();
    for i in 0..m.rows() {
        m[(i, i)] += 1.0;
    }
    m
}

fn subset_cholesky(l: &Matrix, y: &[usize]) -> Result<Cholesky> {
    Cholesky::new(&l.principal_submatrix(y)).map_err(|e| match e {
        Error::NotPositiveDefinite { .. } => Error::SingularSubset,
        other => other,
    })
}

/// `−log(det(L_y) / det(L + I))`; the empty subset has determinant 1.
pub fn dpp_mle_loss(kernel: &DppKernel, y: &[usize]) -> Result<f64> {
    let l = kernel.matrix();
    check_subset(y, l.rows())?;
    let norm = Cholesky::new(&plus_identity(l))?.logdet();
    let sub = if y.is_empty() { 0.0 } else { subset_cholesky(l, y)?.logdet() };
    Ok(norm - sub)
}

/// Loss together with `∂loss/∂L = (L+I)⁻¹ − scatter_y((L_y)⁻¹)`.
pub fn dpp_mle_loss_and_grad(kernel: &DppKernel, y: &[usize]) -> Result<(f64, Matrix)> {
    let l = kernel.matrix();
    check_subset(y, l.rows())?;
    let norm = Cholesky::new(&plus_identity(l))?;
    let mut grad = norm.inverse();
    let mut loss = norm.logdet();
    if !y.is_empty() {
        let sub = subset_cholesky(l, y)?;
        loss -= sub.logdet();
        let inv = sub.inverse();
        for (a, &i) in y.iter().enumerate() {
            for (b, &j) in y.iter().enumerate() {
                grad[(i, j)] -= inv[(a, b)];
            }
        }
    }
    if !loss.is_finite() || !grad.is_finite() {
        return Err(Error::non_finite("DPP loss"));
    }
    Ok((loss, grad))
}

pub fn dpp_mle_grad(kernel: &DppKernel, y: &[usize]) -> Result<Matrix> {
    Ok(dpp_mle_loss_and_grad(kernel, y)?.1)
}

/// One-hot target rows for per-frame ranks.
pub fn one_hot(ranks: &[ActionnessRank]) -> Matrix {
    Matrix::from_fn(ranks.len(), ActionnessRank::COUNT, |i, j| {
        if ranks[i].index() == j {
            1.0
        } else {
            0.0
        }
    })
}

/// `−Σ_i Σ_j t_ij log p_ij`, summed over frames.
pub fn actionness_ce_loss(p: &Matrix, t: &Matrix) -> Result<f64> {
    if p.shape() != t.shape() {
        return Err(Error::shape(
            "actionness_ce_loss",
            format!("{:?}", t.shape()),
            format!("{:?}", p.shape()),
        ));
    }
    if p.cols() != ActionnessRank::COUNT {
        return Err(Error::shape("actionness_ce_loss", "4 classes", p.cols()));
    }
    let mut loss = 0.0;
    for (&pv, &tv) in p.as_slice().iter().zip(t.as_slice()) {
        if tv != 0.0 {
            loss -= tv * pv.max(PROB_FLOOR).ln();
        }
    }
    Ok(loss)
}

/// Gradient of the cross-entropy with respect to the softmax logits for
/// one-hot targets: `p − t`, zeroed on rows whose target probability sits
/// below the floor (the clamp is flat there).
pub fn actionness_ce_logit_grad(p: &Matrix, ranks: &[ActionnessRank]) -> Result<Matrix> {
    if p.rows() != ranks.len() || p.cols() != ActionnessRank::COUNT {
        return Err(Error::shape(
            "actionness_ce_logit_grad",
            format!("({}, 4)", ranks.len()),
            format!("{:?}", p.shape()),
        ));
    }
    let mut g = p.clone();
    for (i, r) in ranks.iter().enumerate() {
        let row = g.row_mut(i);
        if row[r.index()] < PROB_FLOOR {
            row.iter_mut().for_each(|v| *v = 0.0);
        } else {
            row[r.index()] -= 1.0;
        }
    }
    Ok(g)
}

/// `S + λ·R`
pub fn joint_loss(summarization: f64, regularizer: f64, lambda: f64) -> f64 {
    summarization + lambda * regularizer
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn det(m: &Matrix) -> f64 {
        DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice()).determinant()
    }

    fn random_kernel(n: usize, k: usize, rng: &mut ChaCha8Rng) -> DppKernel {
        let phi = Matrix::from_fn(n, k, |_, _| rng.random_range(-1.0..1.0));
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.5)).collect();
        build_dpp_kernel(&phi, &q).unwrap()
    }

    #[test]
    fn kernel_examples() {
        let l = build_dpp_kernel(&Matrix::identity(3), &[1.0; 3]).unwrap();
        assert_eq!(l.matrix(), &Matrix::identity(3));
        let phi = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.6, 0.8]]).unwrap();
        let l = build_dpp_kernel(&phi, &[2.0, 3.0]).unwrap();
        let want = [4.0, 3.6, 3.6, 9.0];
        for (a, b) in l.matrix().as_slice().iter().zip(want) {
            assert!((a - b).abs() < 1e-14);
        }
        assert!(build_dpp_kernel(&phi, &[1.0]).is_err());
    }

    #[test]
    fn kernel_is_psd() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let n = rng.random_range(1..10);
            let l = random_kernel(n, rng.random_range(1..6), &mut rng);
            let m = l.matrix();
            let eig = DMatrix::from_row_slice(n, n, m.as_slice()).symmetric_eigen().eigenvalues;
            assert!(eig.iter().all(|&v| v >= -1e-9));
        }
    }

    #[test]
    fn loss_examples() {
        let l = DppKernel::new(Matrix::identity(2)).unwrap();
        assert!((dpp_mle_loss(&l, &[0]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!((dpp_mle_loss(&l, &[]).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(dpp_mle_loss(&l, &[2]).is_err());
        assert!(dpp_mle_loss(&l, &[0, 0]).is_err());
    }

    #[test]
    fn singular_subset() {
        let phi = Matrix::from_rows(&[vec![1.0, 0.0], vec![2.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let l = build_dpp_kernel(&phi, &[1.0; 3]).unwrap();
        assert!(matches!(dpp_mle_loss(&l, &[0, 1]), Err(Error::SingularSubset)));
        assert!(dpp_mle_loss(&l, &[0, 2]).is_ok());
    }

    #[test]
    fn subset_probabilities_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..10 {
            let n = rng.random_range(1..=8);
            let l = random_kernel(n, n + 2, &mut rng);
            let mut total = 0.0;
            for bits in 0u32..(1 << n) {
                let y: Vec<usize> = (0..n).filter(|i| bits & (1 << i) != 0).collect();
                total += (-dpp_mle_loss(&l, &y).unwrap()).exp();
            }
            assert!((total - 1.0).abs() < 1e-10, "{total}");
            let sum_det: f64 = (0u32..(1 << n))
                .map(|bits| {
                    let y: Vec<usize> = (0..n).filter(|i| bits & (1 << i) != 0).collect();
                    if y.is_empty() {
                        1.0
                    } else {
                        det(&l.matrix().principal_submatrix(&y))
                    }
                })
                .sum();
            let norm = det(&plus_identity(l.matrix()));
            assert!(((sum_det - norm) / norm).abs() < 1e-8);
        }
    }

    #[test]
    fn grad_identity_full_subset() {
        let l = DppKernel::new(Matrix::identity(3)).unwrap();
        let g = dpp_mle_grad(&l, &[0, 1, 2]).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want = if i == j { -0.5 } else { 0.0 };
                assert!((g[(i, j)] - want).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn grad_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..5 {
            let l = random_kernel(4, 4, &mut rng);
            let y = [0, 2];
            let g = dpp_mle_grad(&l, &y).unwrap();
            assert!(g.is_symmetric(1e-12));
            // Perturb entries one at a time; the functional is defined on all
            // matrices, the gradient is its unconstrained partial derivative.
            let eps = 1e-6;
            for i in 0..4 {
                for j in 0..4 {
                    let f = |d: f64| {
                        let mut m = l.matrix().clone();
                        m[(i, j)] += d;
                        let a = plus_identity(&m);
                        let sub = m.principal_submatrix(&y);
                        det(&a).ln() - det(&sub).ln()
                    };
                    let fd = (f(eps) - f(-eps)) / (2.0 * eps);
                    let rel = (fd - g[(i, j)]).abs() / g[(i, j)].abs().max(1.0);
                    assert!(rel < 1e-6, "({i},{j}) {fd} vs {}", g[(i, j)]);
                }
            }
        }
    }

    #[test]
    fn quality_scaling_preserves_equal_size_ordering() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 6;
        let phi = Matrix::from_fn(n, 5, |_, _| rng.random_range(-1.0..1.0));
        let q: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.5)).collect();
        let scaled: Vec<f64> = q.iter().map(|v| v * 2.5).collect();
        let l1 = build_dpp_kernel(&phi, &q).unwrap();
        let l2 = build_dpp_kernel(&phi, &scaled).unwrap();
        let pairs: Vec<[usize; 2]> = (0..n).flat_map(|a| (a + 1..n).map(move |b| [a, b])).collect();
        for y1 in &pairs {
            for y2 in &pairs {
                let d1 = (det(&l1.matrix().principal_submatrix(y1)), det(&l1.matrix().principal_submatrix(y2)));
                let d2 = (det(&l2.matrix().principal_submatrix(y1)), det(&l2.matrix().principal_submatrix(y2)));
                if (d1.0 - d1.1).abs() > 1e-9 {
                    assert_eq!(d1.0 > d1.1, d2.0 > d2.1);
                }
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let ranks: Vec<_> = [0u8, 3, 1].iter().map(|&r| ActionnessRank::new(r).unwrap()).collect();
        let t = one_hot(&ranks);
        assert_eq!(actionness_ce_loss(&t, &t).unwrap(), 0.0);
        let uniform = Matrix::from_fn(3, 4, |_, _| 0.25);
        assert!((actionness_ce_loss(&uniform, &t).unwrap() - 3.0 * 4f64.ln()).abs() < 1e-12);
        let p = Matrix::from_rows(&[vec![0.1, 0.2, 0.6, 0.1]]).unwrap();
        let t2 = one_hot(&[ActionnessRank::PARTIAL]);
        let v = actionness_ce_loss(&p, &t2).unwrap();
        assert!((v + 0.6f64.ln()).abs() < 1e-15);
        assert!((v - 0.5108).abs() < 1e-4);
        assert!(actionness_ce_loss(&p, &t).is_err());
        let zero = Matrix::from_rows(&[vec![0.0, 0.0, 1.0, 0.0]]).unwrap();
        let clamped = actionness_ce_loss(&zero, &one_hot(&[ActionnessRank::NONE])).unwrap();
        assert!((clamped - (-PROB_FLOOR.ln())).abs() < 1e-9);
    }

    #[test]
    fn joint_loss_cases() {
        assert_eq!(joint_loss(1.7, 9.0, 0.0), 1.7);
        assert!((joint_loss(0.0, 1.0, 0.003) - 0.003).abs() < 1e-18);
        let (s, r, l) = (2.0, 5.0, 0.003);
        assert!(((joint_loss(s, r, 2.0 * l) - joint_loss(s, r, l)) - l * r).abs() < 1e-15);
    }
}
