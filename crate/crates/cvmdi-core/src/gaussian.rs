//! Covariance-matrix algebra for multimode Gaussian states.
//!
//! Conventions, fixed across the whole workspace:
//!
//! * shot-noise units — the vacuum state has quadrature variance 1;
//! * quadrature ordering `(q1, p1, q2, p2, ...)`;
//! * entropies are measured in bits (base-2 logarithms).
//!
//! A [`CovMatrix`] is symmetric by construction. Physicality (every
//! symplectic eigenvalue at least 1) is *not* enforced on construction:
//! conditioning and reduction can leave eigenvalues that sit a rounding
//! error below 1, and intermediate matrices during a computation may be
//! checked separately with [`CovMatrix::is_physical`].

use nalgebra::DMatrix;

use crate::error::{CoreError, Result};

/// Absolute tolerance for the symmetry check in [`CovMatrix::new`].
pub const SYMMETRY_TOL: f64 = 1e-12;

/// Relative tolerance used for rank decisions when conditioning on a
/// homodyne outcome.
pub const RANK_TOL: f64 = 1e-10;

/// Slack below 1 tolerated by [`CovMatrix::is_physical`].
pub const PHYSICALITY_TOL: f64 = 1e-9;

/// A quadrature label for single-quadrature (homodyne) operations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Quadrature {
    Q,
    P,
}

impl Quadrature {
    fn offset(self) -> usize {
        match self {
            Quadrature::Q => 0,
            Quadrature::P => 1,
        }
    }
}

/// Covariance matrix of an `m`-mode Gaussian state.
#[derive(Debug, Clone, PartialEq)]
pub struct CovMatrix {
    modes: usize,
    m: DMatrix<f64>,
}

impl CovMatrix {
    /// Builds a covariance matrix from an explicit square matrix.
    ///
    /// The matrix must have even dimension `2 * modes` and be symmetric
    /// within [`SYMMETRY_TOL`] (absolute, entry-wise). The stored matrix is
    /// exactly symmetrized so downstream algebra never sees asymmetry.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(CoreError::Domain(format!(
                "covariance matrix must be square, got {}x{}",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.nrows() == 0 || m.nrows() % 2 != 0 {
            return Err(CoreError::Domain(format!(
                "covariance matrix dimension must be a positive even number, got {}",
                m.nrows()
            )));
        }
        for i in 0..m.nrows() {
            for j in (i + 1)..m.ncols() {
                if (m[(i, j)] - m[(j, i)]).abs() > SYMMETRY_TOL {
                    return Err(CoreError::Domain(format!(
                        "covariance matrix is not symmetric at ({i}, {j}): {} vs {}",
                        m[(i, j)],
                        m[(j, i)]
                    )));
                }
            }
        }
        Ok(Self::wrap(m))
    }

    /// Wraps a matrix that is already known to be square with even
    /// dimension, symmetrizing it exactly.
    fn wrap(m: DMatrix<f64>) -> Self {
        let modes = m.nrows() / 2;
        let sym = 0.5 * (&m + m.transpose());
        Self { modes, m: sym }
    }

    /// Number of modes.
    pub fn modes(&self) -> usize {
        self.modes
    }

    /// The underlying `2m x 2m` matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    /// Vacuum state of `modes` modes (identity matrix).
    pub fn vacuum(modes: usize) -> Result<Self> {
        if modes == 0 {
            return Err(CoreError::Domain("state must have at least one mode".into()));
        }
        Ok(Self {
            modes,
            m: DMatrix::identity(2 * modes, 2 * modes),
        })
    }

    /// Single-mode thermal state with quadrature variance `omega >= 1`.
    pub fn thermal(omega: f64) -> Result<Self> {
        if !(omega >= 1.0) {
            return Err(CoreError::Domain(format!(
                "thermal variance must satisfy omega >= 1, got {omega}"
            )));
        }
        Ok(Self {
            modes: 1,
            m: DMatrix::identity(2, 2) * omega,
        })
    }

    /// Two-mode squeezed vacuum (EPR) state with local variance `mu >= 1`:
    ///
    /// ```text
    /// [ mu I           sqrt(mu^2-1) Z ]
    /// [ sqrt(mu^2-1) Z         mu I   ]
    /// ```
    ///
    /// with `Z = diag(1, -1)`. At `mu = 1` this degenerates to two vacua.
    pub fn epr(mu: f64) -> Result<Self> {
        if !(mu >= 1.0) {
            return Err(CoreError::Domain(format!(
                "EPR local variance must satisfy mu >= 1, got {mu}"
            )));
        }
        let c = (mu * mu - 1.0).sqrt();
        let mut m = DMatrix::zeros(4, 4);
        for k in 0..4 {
            m[(k, k)] = mu;
        }
        m[(0, 2)] = c;
        m[(2, 0)] = c;
        m[(1, 3)] = -c;
        m[(3, 1)] = -c;
        Ok(Self { modes: 2, m })
    }

    /// Tensor product (direct sum of covariance matrices), `self` first.
    pub fn tensor(&self, other: &CovMatrix) -> CovMatrix {
        let (na, nb) = (2 * self.modes, 2 * other.modes);
        let mut m = DMatrix::zeros(na + nb, na + nb);
        m.view_mut((0, 0), (na, na)).copy_from(&self.m);
        m.view_mut((na, na), (nb, nb)).copy_from(&other.m);
        CovMatrix {
            modes: self.modes + other.modes,
            m,
        }
    }

    /// Applies a beamsplitter of transmissivity `tau` to modes
    /// `(mode_a, mode_b)`:
    ///
    /// ```text
    /// a' =  sqrt(tau) a + sqrt(1-tau) b
    /// b' = -sqrt(1-tau) a + sqrt(tau) b
    /// ```
    pub fn apply_beamsplitter(&self, mode_a: usize, mode_b: usize, tau: f64) -> Result<CovMatrix> {
        self.check_mode(mode_a)?;
        self.check_mode(mode_b)?;
        if mode_a == mode_b {
            return Err(CoreError::Domain(
                "beamsplitter needs two distinct modes".into(),
            ));
        }
        if !(0.0..=1.0).contains(&tau) {
            return Err(CoreError::Domain(format!(
                "transmissivity must lie in [0, 1], got {tau}"
            )));
        }
        let (c, r) = (tau.sqrt(), (1.0 - tau).sqrt());
        let mut s = DMatrix::identity(2 * self.modes, 2 * self.modes);
        for k in 0..2 {
            let (ia, ib) = (2 * mode_a + k, 2 * mode_b + k);
            s[(ia, ia)] = c;
            s[(ia, ib)] = r;
            s[(ib, ia)] = -r;
            s[(ib, ib)] = c;
        }
        Ok(Self::wrap(&s * &self.m * s.transpose()))
    }

    /// Conditions the state on a homodyne measurement of one quadrature of
    /// `mode`, returning the covariance matrix of the remaining modes:
    ///
    /// ```text
    /// G' = G_R - s (X B X)^+ s^T
    /// ```
    ///
    /// where `B` is the 2x2 block of the measured mode, `X` keeps only the
    /// measured quadrature, and the pseudoinverse reduces to `1 / B_kk` on
    /// the measured diagonal entry. A Gaussian conditional covariance does
    /// not depend on the outcome, so none is taken.
    pub fn condition_homodyne(&self, mode: usize, quad: Quadrature) -> Result<CovMatrix> {
        self.check_mode(mode)?;
        if self.modes < 2 {
            return Err(CoreError::Domain(
                "conditioning needs at least one unmeasured mode".into(),
            ));
        }
        let qi = 2 * mode + quad.offset();
        let b = self.m[(qi, qi)];
        let block_scale = self
            .m
            .view((2 * mode, 2 * mode), (2, 2))
            .iter()
            .fold(1.0f64, |acc, v| acc.max(v.abs()));
        if b <= RANK_TOL * block_scale {
            return Err(CoreError::Numerical(format!(
                "measured quadrature variance {b} is not positive"
            )));
        }
        let rest = self.rest_indices(mode);
        let mut reduced = self.submatrix(&rest);
        let c: Vec<f64> = rest.iter().map(|&i| self.m[(i, qi)]).collect();
        for (r, &ci) in c.iter().enumerate() {
            for (s, &cj) in c.iter().enumerate() {
                reduced[(r, s)] -= ci * cj / b;
            }
        }
        Ok(Self::wrap(reduced))
    }

    /// Conditions the state on a heterodyne measurement of `mode`:
    ///
    /// ```text
    /// G' = G_R - s (B + I)^{-1} s^T
    /// ```
    pub fn condition_heterodyne(&self, mode: usize) -> Result<CovMatrix> {
        self.check_mode(mode)?;
        if self.modes < 2 {
            return Err(CoreError::Domain(
                "conditioning needs at least one unmeasured mode".into(),
            ));
        }
        let (b00, b01, b11) = (
            self.m[(2 * mode, 2 * mode)] + 1.0,
            self.m[(2 * mode, 2 * mode + 1)],
            self.m[(2 * mode + 1, 2 * mode + 1)] + 1.0,
        );
        let det = b00 * b11 - b01 * b01;
        if det <= 0.0 {
            return Err(CoreError::Numerical(format!(
                "heterodyne block B + I is not positive definite (det = {det})"
            )));
        }
        // Inverse of the symmetric 2x2 block B + I.
        let (i00, i01, i11) = (b11 / det, -b01 / det, b00 / det);
        let rest = self.rest_indices(mode);
        let mut reduced = self.submatrix(&rest);
        let cq: Vec<f64> = rest.iter().map(|&i| self.m[(i, 2 * mode)]).collect();
        let cp: Vec<f64> = rest.iter().map(|&i| self.m[(i, 2 * mode + 1)]).collect();
        for r in 0..rest.len() {
            for s in 0..rest.len() {
                reduced[(r, s)] -= cq[r] * (i00 * cq[s] + i01 * cp[s])
                    + cp[r] * (i01 * cq[s] + i11 * cp[s]);
            }
        }
        Ok(Self::wrap(reduced))
    }

    /// Covariance matrix of the listed modes (in the listed order).
    ///
    /// Duplicate or out-of-range indices are rejected.
    pub fn reduce(&self, modes: &[usize]) -> Result<CovMatrix> {
        if modes.is_empty() {
            return Err(CoreError::Domain("cannot reduce to zero modes".into()));
        }
        let mut seen = vec![false; self.modes];
        for &k in modes {
            self.check_mode(k)?;
            if seen[k] {
                return Err(CoreError::Domain(format!("duplicate mode index {k}")));
            }
            seen[k] = true;
        }
        let idx: Vec<usize> = modes.iter().flat_map(|&k| [2 * k, 2 * k + 1]).collect();
        Ok(Self::wrap(self.submatrix(&idx)))
    }

    /// Symplectic eigenvalues, sorted in descending order.
    ///
    /// The computation factors `G = L L^T` through a symmetric
    /// eigendecomposition (robust to eigenvalues a rounding error below
    /// zero), forms the antisymmetric `M = L^T Omega L` and reads the
    /// spectrum off the symmetric positive semidefinite `-M^2`, whose
    /// eigenvalues are the squared symplectic eigenvalues, each twice.
    pub fn symplectic_eigenvalues(&self) -> Result<SymplecticEigenvalues> {
        let l = self.psd_factor()?;
        let omega = symplectic_form(self.modes);
        let m = l.transpose() * omega * &l;
        let s = -(&m * &m);
        let s = 0.5 * (&s + s.transpose());
        let eig = s.symmetric_eigen();
        let mut v: Vec<f64> = eig.eigenvalues.iter().map(|&x| x.max(0.0).sqrt()).collect();
        v.sort_by(|a, b| b.partial_cmp(a).expect("eigenvalues are finite"));
        // The spectrum of -M^2 carries each nu^2 twice; average the pairs.
        let values = (0..self.modes)
            .map(|k| 0.5 * (v[2 * k] + v[2 * k + 1]))
            .collect();
        SymplecticEigenvalues::new(values)
    }

    /// Smallest symplectic eigenvalue.
    pub fn min_symplectic_eigenvalue(&self) -> Result<f64> {
        let nus = self.symplectic_eigenvalues()?;
        Ok(*nus
            .values()
            .last()
            .expect("at least one mode by construction"))
    }

    /// Whether the state satisfies the uncertainty principle, allowing
    /// [`PHYSICALITY_TOL`] of slack scaled by the matrix magnitude.
    pub fn is_physical(&self) -> Result<bool> {
        let scale = self.m.iter().fold(1.0f64, |acc, v| acc.max(v.abs()));
        Ok(self.min_symplectic_eigenvalue()? >= 1.0 - PHYSICALITY_TOL * scale)
    }

    /// Von Neumann entropy in bits: the sum of `g(nu)` over the symplectic
    /// spectrum.
    pub fn von_neumann_entropy(&self) -> Result<f64> {
        let nus = self.symplectic_eigenvalues()?;
        Ok(nus.values().iter().map(|&nu| g_function(nu)).sum())
    }

    fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.modes {
            return Err(CoreError::Domain(format!(
                "mode index {mode} out of range for {} modes",
                self.modes
            )));
        }
        Ok(())
    }

    /// Quadrature indices of all modes except `mode`, in order.
    fn rest_indices(&self, mode: usize) -> Vec<usize> {
        (0..self.modes)
            .filter(|&k| k != mode)
            .flat_map(|k| [2 * k, 2 * k + 1])
            .collect()
    }

    fn submatrix(&self, idx: &[usize]) -> DMatrix<f64> {
        DMatrix::from_fn(idx.len(), idx.len(), |r, s| self.m[(idx[r], idx[s])])
    }

    /// Factor `G = L L^T` with `L = Q sqrt(D)` from the symmetric
    /// eigendecomposition, clamping eigenvalues within rounding of zero.
    fn psd_factor(&self) -> Result<DMatrix<f64>> {
        let eig = self.m.clone().symmetric_eigen();
        let scale = eig
            .eigenvalues
            .iter()
            .fold(1.0f64, |acc, v| acc.max(v.abs()));
        let mut sqrt_d = DMatrix::zeros(self.m.nrows(), self.m.ncols());
        for (k, &lam) in eig.eigenvalues.iter().enumerate() {
            if lam < -1e-9 * scale {
                return Err(CoreError::Numerical(format!(
                    "covariance matrix has negative eigenvalue {lam}"
                )));
            }
            sqrt_d[(k, k)] = lam.max(0.0).sqrt();
        }
        Ok(eig.eigenvectors * sqrt_d)
    }
}

/// Sorted (descending) symplectic spectrum of a state.
#[derive(Debug, Clone, PartialEq)]
pub struct SymplecticEigenvalues {
    values: Vec<f64>,
}

impl SymplecticEigenvalues {
    fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(CoreError::Domain("empty symplectic spectrum".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(CoreError::Numerical(
                "non-finite symplectic eigenvalue".into(),
            ));
        }
        Ok(Self { values })
    }

    /// Eigenvalues in descending order.
    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

/// Symplectic form `Omega = diag([[0, 1], [-1, 0]], ...)` in `(q, p)`
/// ordering.
pub fn symplectic_form(modes: usize) -> DMatrix<f64> {
    let mut w = DMatrix::zeros(2 * modes, 2 * modes);
    for k in 0..modes {
        w[(2 * k, 2 * k + 1)] = 1.0;
        w[(2 * k + 1, 2 * k)] = -1.0;
    }
    w
}

/// Bosonic entropy function in bits,
/// `g(nu) = ((nu+1)/2) log2((nu+1)/2) - ((nu-1)/2) log2((nu-1)/2)`.
///
/// Values `nu <= 1` (pure-mode eigenvalues, possibly a rounding error
/// below 1) give 0. For `0 < (nu-1)/2 < 1e-6` the direct expression
/// cancels badly, so a series expansion is used.
pub fn g_function(nu: f64) -> f64 {
    let x = 0.5 * (nu - 1.0);
    if x <= 0.0 {
        return 0.0;
    }
    if x < 1e-6 {
        // g = [x - x ln x + x^2/2 + O(x^3)] / ln 2
        return (x - x * x.ln() + 0.5 * x * x) / std::f64::consts::LN_2;
    }
    let a = x + 1.0;
    (a * a.ln() - x * x.ln()) / std::f64::consts::LN_2
}

/// Mutual information in bits between two two-dimensional Gaussian
/// variables with per-quadrature variances `x`, `y` and cross covariance
/// `z` on both quadrature pairs:
///
/// ```text
/// I = log2( x y / (x y - z^2) )
/// ```
pub fn gaussian_mutual_information(x: f64, y: f64, z: f64) -> Result<f64> {
    if !(x > 0.0) || !(y > 0.0) {
        return Err(CoreError::Domain(format!(
            "variances must be positive, got x = {x}, y = {y}"
        )));
    }
    let det = x * y - z * z;
    if det <= 0.0 {
        return Err(CoreError::Domain(format!(
            "covariance block is not positive definite (x y - z^2 = {det})"
        )));
    }
    Ok((x * y / det).log2())
}
