//! Exact tabular pipeline: the empirical cross-moment matrix from one-hot
//! transition stacks, its SVD-based representation and pseudo-count bonus,
//! and numerical verifiers for the identities behind them.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::env::{collect_transitions, Encoder, GridSpec, NUM_CELLS};
use crate::matrix::{self, pinv, svd, weighted_norm_sq, Matrix, MatrixError, SvdResult, RANK_TOL};
use crate::stats;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TabularError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("k={k} exceeds numerical rank {rank}; singular values {sigma:?}")]
    RankExceeded { k: usize, rank: usize, sigma: Vec<f64> },
    #[error("transition matrix must be symmetric for the resolvent verifier (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

/// Normalized transition-count matrix: entry (i, j) = count(i -> j) / n.
pub fn build_a_n_from_pairs(pairs: &[(usize, usize)], dim: usize) -> Result<Matrix, TabularError> {
    if pairs.is_empty() {
        return Err(TabularError::EmptyDataset);
    }
    // integer counts then one division keeps exactly-representable entries
    let mut a = Matrix::zeros(dim, dim);
    for &(s, s2) in pairs {
        a.set(s, s2, a.get(s, s2) + 1.0);
    }
    Ok(a.scale(1.0 / pairs.len() as f64))
}

/// The estimator over the full one-hot dimension (walls included).
pub fn build_a_n(ds: &crate::env::TransitionDataset) -> Result<Matrix, TabularError> {
    let pairs: Vec<(usize, usize)> =
        ds.states.iter().zip(&ds.next_states).map(|(&s, &s2)| (s, s2)).collect();
    build_a_n_from_pairs(&pairs, NUM_CELLS)
}

/// Full SVD of the estimator plus the top-k representation
/// (rows of U) and squared singular values.
#[derive(Debug, Clone)]
pub struct TabularDecomposition {
    pub a_n: Matrix,
    pub svd: SvdResult,
    pub k: usize,
    /// Row s is the k-dimensional representation of state s.
    pub rep: Matrix,
    /// Top-k squared singular values.
    pub lambda: Vec<f64>,
}

pub fn decompose(a_n: &Matrix, k: usize) -> Result<TabularDecomposition, TabularError> {
    let dec = svd(a_n, None)?;
    let rank = dec.rank();
    if k > rank {
        return Err(TabularError::RankExceeded { k, rank, sigma: dec.sigma.clone() });
    }
    let mut rep = Matrix::zeros(a_n.rows(), k);
    for i in 0..a_n.rows() {
        for t in 0..k {
            rep.set(i, t, dec.u.get(i, t));
        }
    }
    let lambda: Vec<f64> = dec.sigma.iter().take(k).map(|s| s * s).collect();
    Ok(TabularDecomposition { a_n: a_n.clone(), svd: dec, k, rep, lambda })
}

impl TabularDecomposition {
    /// Inverse-spectrum weighted squared norm of the representation row.
    pub fn bonus(&self, s: usize) -> f64 {
        weighted_norm_sq(self.rep.row(s), &self.lambda).expect("rep row matches lambda length")
    }

    /// Bonus divided by the state-dependent constant of the exact identity
    /// (requires the full-rank decomposition of D P to equal 1/d(s)^2).
    pub fn alpha_normalized_bonus(&self, s: usize, alpha_s: f64) -> f64 {
        self.bonus(s) / alpha_s
    }
}

/// Discounted value identity carrier: the resolvent, a reward vector, and
/// the value vector computed independently by value iteration. Construction
/// verifies the two routes agree within 1e-10.
#[derive(Debug, Clone)]
pub struct ValueCheck {
    pub gamma: f64,
    pub resolvent: Matrix,
    pub reward: Vec<f64>,
    pub value: Vec<f64>,
    pub route_gap: f64,
}

pub fn value_check(p: &Matrix, gamma: f64, reward: &[f64]) -> Result<ValueCheck, TabularError> {
    let n = p.rows();
    let mut shifted = p.scale(-gamma);
    for i in 0..n {
        shifted.set(i, i, shifted.get(i, i) + 1.0);
    }
    let resolvent = pinv(&shifted, RANK_TOL)?;
    let direct = resolvent.matvec(reward)?;
    // independent route: value iteration to fixed point
    let mut v = vec![0.0; n];
    for _ in 0..200_000 {
        let pv = p.matvec(&v)?;
        let mut delta = 0.0f64;
        for i in 0..n {
            let nv = reward[i] + gamma * pv[i];
            delta = delta.max((nv - v[i]).abs());
            v[i] = nv;
        }
        if delta < 1e-14 {
            break;
        }
    }
    let route_gap =
        direct.iter().zip(&v).map(|(a, b)| (a - b).abs()).fold(0.0f64, f64::max);
    Ok(ValueCheck { gamma, resolvent, reward: reward.to_vec(), value: v, route_gap })
}

/// Report from the resolvent-eigenvector equivalence verifier.
#[derive(Debug, Clone)]
pub struct ResolventReport {
    pub gamma: f64,
    pub k: usize,
    pub eigenvalues: Vec<f64>,
    pub resolvent_eigenvalues: Vec<f64>,
    /// Angle (radians) between the i-th eigenvector of P and of the
    /// resolvent, both sorted by their own eigenvalues descending.
    pub pair_angles: Vec<f64>,
    /// max_i |1/(1 - gamma lambda_i) - lambda'_i|
    pub map_residual: f64,
    pub ordering_agrees: bool,
    /// gamma = 0 collapses the resolvent spectrum to all-ones; ordering
    /// comparison is skipped.
    pub degenerate_spectrum: bool,
    pub value_route_gap: f64,
    pub max_angle: f64,
}

impl ResolventReport {
    pub fn passes(&self, angle_tol: f64) -> bool {
        if self.degenerate_spectrum {
            return self.value_route_gap <= 1e-10;
        }
        self.max_angle <= angle_tol
            && self.ordering_agrees
            && self.map_residual <= 1e-8
            && self.value_route_gap <= 1e-10
    }
}

/// Checks that the top-k eigenvectors of a symmetric row-stochastic matrix
/// and of its discounted resolvent coincide, with the eigenvalue map
/// `1/(1 - gamma lambda)` preserving order.
pub fn verify_resolvent_eigenvectors(
    p: &Matrix,
    gamma: f64,
    k: usize,
) -> Result<ResolventReport, TabularError> {
    let n = p.rows();
    let mut asym = 0.0f64;
    for i in 0..n {
        for j in 0..n {
            asym = asym.max((p.get(i, j) - p.get(j, i)).abs());
        }
    }
    if asym > 1e-10 {
        return Err(TabularError::NotSymmetric(asym));
    }
    let eig_p = matrix::eig_real(p)?;
    let mut shifted = p.scale(-gamma);
    for i in 0..n {
        shifted.set(i, i, shifted.get(i, i) + 1.0);
    }
    let resolvent = pinv(&shifted, RANK_TOL)?;
    let eig_r = matrix::eig_real(&resolvent)?;

    let reward: Vec<f64> = (0..n).map(|i| ((i * 37 + 11) % 17) as f64 / 17.0).collect();
    let vc = value_check(p, gamma, &reward)?;

    let degenerate = gamma == 0.0;
    let k = k.min(n);
    let mut pair_angles = Vec::with_capacity(k);
    if !degenerate {
        for i in 0..k {
            let a = eig_p.vectors.column(i);
            let b = eig_r.vectors.column(i);
            let dot: f64 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
            pair_angles.push(dot.abs().clamp(0.0, 1.0).acos());
        }
    }
    let mapped: Vec<f64> = eig_p.values.iter().map(|l| 1.0 / (1.0 - gamma * l)).collect();
    // eig_r.values sorted descending; the map is increasing in lambda, so
    // elementwise agreement means the orderings coincide
    let map_residual = mapped
        .iter()
        .zip(&eig_r.values)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    let ordering_agrees = !degenerate && map_residual <= 1e-8;
    let max_angle = pair_angles.iter().copied().fold(0.0f64, f64::max);
    Ok(ResolventReport {
        gamma,
        k,
        eigenvalues: eig_p.values,
        resolvent_eigenvalues: eig_r.values,
        pair_angles,
        map_residual,
        ordering_agrees,
        degenerate_spectrum: degenerate,
        value_route_gap: vc.route_gap,
        max_angle,
    })
}

/// Random symmetric row-stochastic matrix with all eigen-gaps at least
/// `min_gap` (resampling until the gap condition holds).
pub fn random_symmetric_stochastic(rng: &mut ChaCha8Rng, n: usize, min_gap: f64) -> Matrix {
    loop {
        let mut w = Matrix::zeros(n, n);
        for i in 0..n {
            for j in (i + 1)..n {
                let v = rng.gen_range(0.0..1.0);
                w.set(i, j, v);
                w.set(j, i, v);
            }
        }
        // scale rows to sum <= 1, keeping symmetry, then add diagonal slack
        let max_rowsum = (0..n)
            .map(|i| w.row(i).iter().sum::<f64>())
            .fold(0.0f64, f64::max)
            .max(1e-12);
        let scale = rng.gen_range(0.5..0.95) / max_rowsum;
        let mut p = w.scale(scale);
        for i in 0..n {
            let rowsum: f64 = p.row(i).iter().sum();
            p.set(i, i, p.get(i, i) + 1.0 - rowsum);
        }
        if n == 1 {
            return p;
        }
        if let Ok(eig) = matrix::eig_real(&p) {
            let ok = eig.values.windows(2).all(|w| w[0] - w[1] >= min_gap);
            if ok {
                return p;
            }
        }
    }
}

/// Random ergodic chain (strong diagonal plus strictly positive random
/// rows) with invertible P P'.
pub fn random_ergodic_chain(rng: &mut ChaCha8Rng, n: usize) -> Matrix {
    let mut p = Matrix::zeros(n, n);
    for i in 0..n {
        // Dirichlet(1) row via normalized exponentials
        let mut row: Vec<f64> = (0..n).map(|_| -(rng.gen_range(1e-12..1.0f64)).ln()).collect();
        let sum: f64 = row.iter().sum();
        for v in row.iter_mut() {
            *v /= sum;
        }
        for j in 0..n {
            let v = 0.3 * row[j] + if i == j { 0.7 } else { 0.0 };
            p.set(i, j, v);
        }
    }
    p
}

/// Stationary distribution via the SVD null space of (P' - I); exact for
/// ergodic chains.
pub fn stationary_exact(p: &Matrix) -> Result<Vec<f64>, TabularError> {
    let n = p.rows();
    let mut m = p.transpose();
    for i in 0..n {
        m.set(i, i, m.get(i, i) - 1.0);
    }
    let dec = svd(&m, None)?;
    let mut d = dec.v.column(n - 1);
    let total: f64 = d.iter().sum();
    for v in d.iter_mut() {
        *v /= total;
    }
    Ok(d)
}

/// Dense Gauss-Jordan inverse with partial pivoting. Used only as the
/// independent oracle route inside verifiers.
pub fn gauss_jordan_inverse(a: &Matrix) -> Option<Matrix> {
    let n = a.rows();
    if a.cols() != n {
        return None;
    }
    let mut aug: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut row = a.row(i).to_vec();
            row.extend((0..n).map(|j| if i == j { 1.0 } else { 0.0 }));
            row
        })
        .collect();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| {
            aug[i][col].abs().partial_cmp(&aug[j][col].abs()).unwrap()
        })?;
        if aug[pivot][col].abs() < 1e-300 {
            return None;
        }
        aug.swap(col, pivot);
        let pv = aug[col][col];
        for v in aug[col].iter_mut() {
            *v /= pv;
        }
        for i in 0..n {
            if i == col {
                continue;
            }
            let f = aug[i][col];
            if f == 0.0 {
                continue;
            }
            for j in 0..2 * n {
                aug[i][j] -= f * aug[col][j];
            }
        }
    }
    let data: Vec<f64> = aug.iter().flat_map(|row| row[n..].iter().copied()).collect();
    Some(Matrix::from_parts(n, n, data))
}

/// Report from the bonus-identity verifier over random ergodic chains.
#[derive(Debug, Clone)]
pub struct BonusIdentityReport {
    pub chains: usize,
    pub per_chain_max_err: Vec<f64>,
    pub max_abs_err: f64,
}

/// On random ergodic chains, checks `bonus(s) * d(s)^2 == ((P P')^{-1})_ss`
/// with the full-rank decomposition of D P, against a Gauss-Jordan inverse
/// oracle.
pub fn verify_bonus_identity(
    chains: usize,
    size_range: (usize, usize),
    seed: u64,
) -> Result<BonusIdentityReport, TabularError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut per_chain = Vec::with_capacity(chains);
    for _ in 0..chains {
        let n = rng.gen_range(size_range.0..=size_range.1);
        let p = random_ergodic_chain(&mut rng, n);
        let d = stationary_exact(&p)?;
        let mut a = Matrix::zeros(n, n);
        for i in 0..n {
            for j in 0..n {
                a.set(i, j, d[i] * p.get(i, j));
            }
        }
        let dec = decompose(&a, n)?;
        let ppt = p.matmul(&p.transpose())?;
        let inv = gauss_jordan_inverse(&ppt).expect("P P' invertible by construction");
        let mut worst = 0.0f64;
        for s in 0..n {
            let lhs = dec.bonus(s) * d[s] * d[s];
            let rhs = inv.get(s, s);
            worst = worst.max((lhs - rhs).abs());
        }
        per_chain.push(worst);
    }
    let max_abs_err = per_chain.iter().copied().fold(0.0f64, f64::max);
    Ok(BonusIdentityReport { chains, per_chain_max_err: per_chain, max_abs_err })
}

/// Exact expectation of the estimator on the four-rooms chain: diag(dbar) P
/// embedded into the full one-hot dimension.
pub fn exact_dp(env: &GridSpec, n: usize, horizon: Option<usize>) -> Matrix {
    let p = env.exact_transition_matrix();
    let dbar = env.exact_source_marginal(n, horizon);
    let mut out = Matrix::zeros(NUM_CELLS, NUM_CELLS);
    for (i, &s) in env.open_states().iter().enumerate() {
        if dbar[i] == 0.0 {
            continue;
        }
        for (j, &s2) in env.open_states().iter().enumerate() {
            let v = dbar[i] * p.get(i, j);
            if v != 0.0 {
                out.set(s, s2, v);
            }
        }
    }
    out
}

/// Consistency curve: max-entry error of the estimator against its exact
/// expectation across sample sizes and seeds.
#[derive(Debug, Clone)]
pub struct ConsistencyReport {
    pub ns: Vec<usize>,
    pub per_seed_errors: Vec<Vec<f64>>,
    pub median_errors: Vec<f64>,
    pub loglog_slope: f64,
    /// Fraction of seeds with error(last n) < error(first n).
    pub decreasing_fraction: f64,
}

pub fn verify_estimator_consistency(
    env: &GridSpec,
    ns: &[usize],
    seeds: &[u64],
    horizon: Option<usize>,
) -> Result<ConsistencyReport, TabularError> {
    let exacts: Vec<Matrix> = ns.iter().map(|&n| exact_dp(env, n, horizon)).collect();
    let mut per_seed = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut errs = Vec::with_capacity(ns.len());
        for (idx, &n) in ns.iter().enumerate() {
            let ds = collect_transitions(env, n, seed, Encoder::Onehot, horizon);
            let a = build_a_n(&ds)?;
            errs.push(a.sub(&exacts[idx])?.max_abs());
        }
        per_seed.push(errs);
    }
    let median_errors: Vec<f64> = (0..ns.len())
        .map(|i| stats::median(&per_seed.iter().map(|e| e[i]).collect::<Vec<_>>()))
        .collect();
    let xs: Vec<f64> = ns.iter().map(|n| (*n as f64).ln()).collect();
    let ys: Vec<f64> = median_errors.iter().map(|e| e.ln()).collect();
    let loglog_slope = stats::regression_slope(&xs, &ys);
    let decreasing = per_seed.iter().filter(|e| e[ns.len() - 1] < e[0]).count();
    Ok(ConsistencyReport {
        ns: ns.to_vec(),
        per_seed_errors: per_seed,
        median_errors,
        loglog_slope,
        decreasing_fraction: decreasing as f64 / seeds.len() as f64,
    })
}

/// Unbiasedness check: mean estimator over many seeds against the exact
/// expectation, entrywise within 3 binomial standard errors of the mean.
#[derive(Debug, Clone)]
pub struct UnbiasednessReport {
    pub entries: usize,
    pub within: usize,
    pub fraction_within: f64,
    pub max_z: f64,
}

pub fn verify_estimator_unbiasedness(
    env: &GridSpec,
    n: usize,
    seeds: &[u64],
    horizon: Option<usize>,
) -> Result<UnbiasednessReport, TabularError> {
    let exact = exact_dp(env, n, horizon);
    let mut mean = Matrix::zeros(NUM_CELLS, NUM_CELLS);
    for &seed in seeds {
        let ds = collect_transitions(env, n, seed, Encoder::Onehot, horizon);
        let a = build_a_n(&ds)?;
        mean = mean.add(&a)?;
    }
    mean = mean.scale(1.0 / seeds.len() as f64);
    let total_samples = (n * seeds.len()) as f64;
    let mut within = 0usize;
    let mut max_z = 0.0f64;
    let entries = NUM_CELLS * NUM_CELLS;
    for i in 0..NUM_CELLS {
        for j in 0..NUM_CELLS {
            let pij = exact.get(i, j);
            let err = (mean.get(i, j) - pij).abs();
            let se = (pij * (1.0 - pij) / total_samples).sqrt();
            if err <= 3.0 * se {
                within += 1;
            }
            if se > 0.0 {
                max_z = max_z.max(err / se);
            }
        }
    }
    Ok(UnbiasednessReport {
        entries,
        within,
        fraction_within: within as f64 / entries as f64,
        max_z,
    })
}
