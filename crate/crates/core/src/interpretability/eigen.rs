use nalgebra::{DMatrix, DVector};

use crate::autodiff::{Graph, Nonlinearity};
use crate::dau::Dau;
use crate::error::{Error, Result};
use crate::tensor::{Rng, Scalar, Tensor};
use crate::training::AdamState;

/// A real eigenpair of `A B` with a unit eigenvector whose largest-magnitude
/// entry is positive.
#[derive(Clone, Debug, PartialEq)]
pub struct EigenPair {
    pub value: f64,
    pub vector: Vec<f64>,
}

fn to_matrix<S: Scalar>(t: &Tensor<S>) -> Result<DMatrix<f64>> {
    let [r, c] = t.shape()[..] else {
        return Err(Error::shape("eigen", t.shape(), &[]));
    };
    Ok(DMatrix::from_row_iterator(r, c, t.data().iter().map(|v| v.as_f64())))
}

/// Real eigenpairs of the `d x d` matrix `A B` with non-negligible
/// eigenvalue, computed through the `r x r` matrix `B A`: if `B A u = l u`
/// then `A B (A u) = l (A u)`. Sorted by decreasing `|eigenvalue|`.
///
/// Complex pairs and defective directions are skipped, so fewer than `r`
/// pairs may come back.
pub fn dau_eigenvectors<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Vec<EigenPair>> {
    let (a, b) = (to_matrix(a)?, to_matrix(b)?);
    if a.ncols() != b.nrows() || a.nrows() != b.ncols() {
        return Err(Error::Input(format!(
            "A is {}x{} but B is {}x{}",
            a.nrows(),
            a.ncols(),
            b.nrows(),
            b.ncols()
        )));
    }
    let r = a.ncols();
    let ba = &b * &a;
    let scale = ba.norm();
    if scale == 0.0 {
        return Ok(Vec::new());
    }
    let tol = 1e-9 * scale;
    let schur = ba
        .clone()
        .try_schur(f64::EPSILON, 1000 * r.max(1))
        .ok_or_else(|| Error::Contract("eigenvalue iteration did not converge".into()))?;
    let mut values: Vec<f64> = schur
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= tol && z.re.abs() > tol)
        .map(|z| z.re)
        .collect();
    values.sort_by(|x, y| y.abs().total_cmp(&x.abs()).then(y.total_cmp(x)));

    let mut pairs = Vec::new();
    let mut i = 0;
    while i < values.len() {
        let mut j = i + 1;
        while j < values.len() && (values[j] - values[i]).abs() <= 1e-6 * scale {
            j += 1;
        }
        let lambda = values[i..j].iter().sum::<f64>() / (j - i) as f64;
        let shifted = &ba - DMatrix::identity(r, r) * lambda;
        for u in null_space(shifted, 1e-7 * scale).into_iter().take(j - i) {
            let v = &a * u;
            let n = v.norm();
            if n <= f64::MIN_POSITIVE {
                continue;
            }
            let mut vector: Vec<f64> = v.iter().map(|x| x / n).collect();
            let big = vector
                .iter()
                .copied()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if big < 0.0 {
                vector.iter_mut().for_each(|x| *x = -*x);
            }
            pairs.push(EigenPair { value: lambda, vector });
        }
        i = j;
    }
    Ok(pairs)
}

/// Basis of the null space of `m` from its reduced row echelon form: one
/// vector per free column, with a 1 in that column and 0 in the other free
/// columns.
fn null_space(mut m: DMatrix<f64>, tol: f64) -> Vec<DVector<f64>> {
    let (rows, cols) = m.shape();
    let mut pivots = Vec::new();
    let mut row = 0;
    for col in 0..cols {
        if row == rows {
            break;
        }
        let (best, val) =
            (row..rows)
                .map(|i| (i, m[(i, col)].abs()))
                .fold((row, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if val <= tol {
            continue;
        }
        m.swap_rows(row, best);
        let p = m[(row, col)];
        for c in 0..cols {
            m[(row, c)] /= p;
        }
        for i in 0..rows {
            if i != row {
                let f = m[(i, col)];
                if f != 0.0 {
                    for c in 0..cols {
                        m[(i, c)] -= f * m[(row, c)];
                    }
                }
            }
        }
        pivots.push(col);
        row += 1;
    }
    (0..cols)
        .filter(|c| !pivots.contains(c))
        .map(|free| {
            let mut v = DVector::zeros(cols);
            v[free] = 1.0;
            for (i, &pc) in pivots.iter().enumerate() {
                v[pc] = -m[(i, free)];
            }
            v
        })
        .collect()
}

/// Norm of the projection of `target` onto the span of `basis`, relative
/// to the norm of `target`.
pub fn subspace_cosine(basis: &[Vec<f64>], target: &[f64]) -> f64 {
    let mut ortho: Vec<Vec<f64>> = Vec::new();
    for v in basis {
        let mut u = v.clone();
        for q in &ortho {
            let d: f64 = u.iter().zip(q).map(|(a, b)| a * b).sum();
            u.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
        }
        let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-10 {
            ortho.push(u.into_iter().map(|x| x / n).collect());
        }
    }
    let tn = target.iter().map(|x| x * x).sum::<f64>().sqrt();
    if tn == 0.0 {
        return 0.0;
    }
    let proj: f64 = ortho
        .iter()
        .map(|q| q.iter().zip(target).map(|(a, b)| a * b).sum::<f64>().powi(2))
        .sum();
    proj.sqrt() / tn
}

/// Settings for output maximisation of a single bias-free DAU.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OutputMaxConfig {
    pub rank: usize,
    pub steps: usize,
    pub lr: f64,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
}

impl Default for OutputMaxConfig {
    fn default() -> Self {
        OutputMaxConfig {
            rank: 3,
            steps: 2000,
            lr: 5e-2,
            nonlinearity: Nonlinearity::L2,
            seed: 0,
        }
    }
}

/// Trains a bias-free DAU to maximise its mean output over `samples` by
/// full-batch Adam on the negated mean. Returns the unit and the mean
/// output seen at each step, before its update.
pub fn maximise_output(samples: &[Tensor<f32>], cfg: &OutputMaxConfig) -> Result<(Dau<f64>, Vec<f64>)> {
    let n = samples.len();
    let d = samples.first().ok_or_else(|| Error::Input("no samples".into()))?.len();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::Input("samples differ in size".into()));
    }
    if cfg.rank == 0 || cfg.rank > d {
        return Err(Error::Config(format!("rank {} invalid for dimension {d}", cfg.rank)));
    }
    let x = Tensor::<f64>::from_fn(&[d, n], |i| samples[i[1]].data()[i[0]] as f64);
    let mut rng = Rng::new(cfg.seed);
    let mut dau = Dau::random(d, cfg.rank, cfg.nonlinearity, &mut rng);
    let mut adam = AdamState::<f64>::new([dau.a.shape(), dau.b.shape()]);
    let mut history = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let mut g = Graph::new();
        let a = g.param(dau.a.clone());
        let b = g.param(dau.b.clone());
        let xv = g.constant(x.clone());
        let bx = g.matmul(b, xv)?;
        let u = g.matmul(a, bx)?;
        let w = g.rescale(u, 0, cfg.nonlinearity)?;
        let y = g.mul(w, xv)?;
        let total = g.sum(y);
        let loss = g.scale(total, -1.0 / n as f64);
        history.push(-g.value(loss).item()?);
        let mut grads = g.backward(loss)?;
        let ga = grads.take(a).expect("A is trainable");
        let gb = grads.take(b).expect("B is trainable");
        adam.update(&mut [&mut dau.a, &mut dau.b], &[ga, gb], cfg.lr)?;
    }
    Ok((dau, history))
}

/// Outcome of [`eigen_recovery`].
#[derive(Clone, Debug, PartialEq)]
pub struct EigenRecovery {
    pub pairs: Vec<EigenPair>,
    /// Subspace cosine of each clean base against the eigenvector span.
    pub cosines: Vec<f64>,
    /// Mean output per optimisation step.
    pub history: Vec<f64>,
}

/// Output-maximises a DAU on `n` noisy copies of `bases` and measures how
/// well the eigenvectors of its `A B` span each clean base.
pub fn eigen_recovery(
    bases: &[Tensor<f32>],
    n: usize,
    noise_std: f64,
    data_seed: u64,
    cfg: &OutputMaxConfig,
) -> Result<EigenRecovery> {
    let set = crate::datasets::make_noisy_digits(bases, n, noise_std, &mut Rng::new(data_seed))?;
    let samples: Vec<Tensor<f32>> = (0..set.len()).map(|i| set.image(i)).collect();
    let (dau, history) = maximise_output(&samples, cfg)?;
    let pairs = dau_eigenvectors(&dau.a, &dau.b)?;
    let basis: Vec<Vec<f64>> = pairs.iter().map(|p| p.vector.clone()).collect();
    let cosines = bases
        .iter()
        .map(|b| subspace_cosine(&basis, &b.data().iter().map(|&v| v as f64).collect::<Vec<_>>()))
        .collect();
    Ok(EigenRecovery {
        pairs,
        cosines,
        history,
    })
}
