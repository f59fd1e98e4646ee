//! Gaussian basis functions for the baseline hazard on the transformed time
//! scale, knot placement, and the roughness penalty matrix.
//!
//! The baseline hazard is approximated as λ₀(κ) = Σ_u θ_u ψ_u(κ) with
//! ψ_u(κ) = φ((κ-μ_u)/σ_u)/σ_u, so the cumulative baseline hazard has the
//! closed form Λ₀(κ) = Σ_u θ_u [Φ((κ-μ_u)/σ_u) - Φ(-μ_u/σ_u)], anchored so
//! that Λ₀(0) = 0.

use ndarray::{Array1, Array2, ArrayView1};
use statrs::function::erf::erfc;

use crate::error::{Error, Result};
use crate::linalg;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub(crate) fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() * FRAC_1_SQRT_2PI
}

#[inline]
pub(crate) fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * std::f64::consts::FRAC_1_SQRT_2)
}

/// Gaussian basis layout: knots `mu`, widths `sigma`, and the penalty
/// integration boundary `[d1, d2]`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BasisConfig {
    mu: Array1<f64>,
    sigma: Array1<f64>,
    pub d1: f64,
    pub d2: f64,
}

impl BasisConfig {
    pub fn new(mu: Array1<f64>, sigma: Array1<f64>, d1: f64, d2: f64) -> Result<Self> {
        if mu.is_empty() {
            return Err(Error::InvalidBasis("m must be at least 1".into()));
        }
        if mu.len() != sigma.len() {
            return Err(Error::InvalidBasis(format!(
                "{} knots but {} widths",
                mu.len(),
                sigma.len()
            )));
        }
        if mu.iter().any(|v| !v.is_finite()) || sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidBasis("non-finite knot or width".into()));
        }
        if sigma.iter().any(|&s| s <= 0.0) {
            return Err(Error::InvalidBasis("widths must be positive".into()));
        }
        if mu.as_slice().unwrap().windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::InvalidBasis("knots must be strictly increasing".into()));
        }
        if !(d1 < d2) {
            return Err(Error::InvalidBasis(format!(
                "integration boundary must satisfy d1 < d2, got [{d1}, {d2}]"
            )));
        }
        Ok(Self { mu, sigma, d1, d2 })
    }

    pub fn m(&self) -> usize {
        self.mu.len()
    }

    pub fn mu(&self) -> &Array1<f64> {
        &self.mu
    }

    pub fn sigma(&self) -> &Array1<f64> {
        &self.sigma
    }

    fn check_index(&self, u: usize) -> Result<()> {
        if u >= self.m() {
            return Err(Error::BasisIndex { u, m: self.m() });
        }
        Ok(())
    }

    /// ψ_u(κ): the scaled normal density, strictly positive everywhere.
    pub fn psi(&self, u: usize, k: f64) -> Result<f64> {
        self.check_index(u)?;
        let s = self.sigma[u];
        Ok(normal_pdf((k - self.mu[u]) / s) / s)
    }

    /// Ψ_u(κ) = Φ((κ-μ_u)/σ_u) - Φ(-μ_u/σ_u): the antiderivative of ψ_u
    /// anchored at 0.
    pub fn cum_psi(&self, u: usize, k: f64) -> Result<f64> {
        self.check_index(u)?;
        let (mu, s) = (self.mu[u], self.sigma[u]);
        Ok(normal_cdf((k - mu) / s) - normal_cdf(-mu / s))
    }

    /// ψ′_u(κ) = -ψ_u(κ)(κ-μ_u)/σ_u².
    pub fn psi_d1(&self, u: usize, k: f64) -> Result<f64> {
        self.check_index(u)?;
        let (mu, s) = (self.mu[u], self.sigma[u]);
        Ok(-self.psi(u, k)? * (k - mu) / (s * s))
    }

    /// ψ″_u(κ) = ψ_u(κ)[(κ-μ_u)²/σ_u⁴ - 1/σ_u²].
    pub fn psi_d2(&self, u: usize, k: f64) -> Result<f64> {
        self.check_index(u)?;
        let (mu, s) = (self.mu[u], self.sigma[u]);
        let s2 = s * s;
        let d = k - mu;
        Ok(self.psi(u, k)? * (d * d / (s2 * s2) - 1.0 / s2))
    }

    /// All of (ψ_u, Ψ_u, ψ′_u, ψ″_u) at κ = `k` in one pass.
    pub fn eval_vectors(&self, k: f64) -> BasisValues {
        let m = self.m();
        let mut psi = Array1::zeros(m);
        let mut cum = Array1::zeros(m);
        let mut psi1 = Array1::zeros(m);
        let mut psi2 = Array1::zeros(m);
        for u in 0..m {
            let (mu, s) = (self.mu[u], self.sigma[u]);
            let s2 = s * s;
            let t = (k - mu) / s;
            let p = normal_pdf(t) / s;
            psi[u] = p;
            cum[u] = normal_cdf(t) - normal_cdf(-mu / s);
            psi1[u] = -p * (k - mu) / s2;
            psi2[u] = p * ((k - mu) * (k - mu) / (s2 * s2) - 1.0 / s2);
        }
        BasisValues { psi, cum, psi1, psi2 }
    }

    /// (λ₀(κ), Λ₀(κ)) as a fused dot product; no bounds or sign checks —
    /// the line-search hot path. Each term is formed exactly as in
    /// `eval_vectors` and accumulated in coordinate order, so streaming and
    /// cached evaluations of the likelihood agree bit-for-bit.
    pub(crate) fn hazard_pair(&self, theta: ArrayView1<'_, f64>, k: f64) -> (f64, f64) {
        let mut lam = 0.0;
        let mut cum = 0.0;
        for u in 0..self.m() {
            let (mu, s) = (self.mu[u], self.sigma[u]);
            let t = (k - mu) / s;
            let p = normal_pdf(t) / s;
            let c = normal_cdf(t) - normal_cdf(-mu / s);
            lam += theta[u] * p;
            cum += theta[u] * c;
        }
        (lam, cum)
    }

    /// λ₀(κ) = Σ θ_u ψ_u(κ), nonnegative for θ ≥ 0.
    pub fn baseline_hazard(&self, theta: &Array1<f64>, k: f64) -> Result<f64> {
        self.check_theta(theta)?;
        Ok((0..self.m()).map(|u| theta[u] * self.psi(u, k).unwrap()).sum())
    }

    /// Λ₀(κ) = Σ θ_u Ψ_u(κ), nondecreasing with Λ₀(0) = 0.
    pub fn baseline_cumhaz(&self, theta: &Array1<f64>, k: f64) -> Result<f64> {
        self.check_theta(theta)?;
        Ok((0..self.m()).map(|u| theta[u] * self.cum_psi(u, k).unwrap()).sum())
    }

    /// λ₀′(κ).
    pub fn baseline_hazard_d1(&self, theta: &Array1<f64>, k: f64) -> Result<f64> {
        self.check_theta(theta)?;
        Ok((0..self.m()).map(|u| theta[u] * self.psi_d1(u, k).unwrap()).sum())
    }

    /// λ₀″(κ).
    pub fn baseline_hazard_d2(&self, theta: &Array1<f64>, k: f64) -> Result<f64> {
        self.check_theta(theta)?;
        Ok((0..self.m()).map(|u| theta[u] * self.psi_d2(u, k).unwrap()).sum())
    }

    fn check_theta(&self, theta: &Array1<f64>) -> Result<()> {
        if theta.len() != self.m() {
            return Err(Error::DimensionMismatch {
                context: "theta vs basis count",
                expected: self.m(),
                got: theta.len(),
            });
        }
        for (u, &t) in theta.iter().enumerate() {
            if !(t >= 0.0) {
                return Err(Error::NegativeTheta { index: u, value: t });
            }
        }
        Ok(())
    }
}

/// Basis function values and derivatives at a single κ.
#[derive(Debug, Clone)]
pub struct BasisValues {
    pub psi: Array1<f64>,
    pub cum: Array1<f64>,
    pub psi1: Array1<f64>,
    pub psi2: Array1<f64>,
}

/// The default basis size: the cube root of the sample size, rounded.
pub fn default_knot_count(n: usize) -> usize {
    ((n as f64).cbrt().round() as usize).max(1)
}

/// Places `m` knots at the equally spaced quantiles (levels j/(m+1)) of the
/// observed κ values; widths are 2/3 of the larger neighbouring knot gap and
/// the boundary is the data range.
pub fn knot_placement(kappa_values: &[f64], m: usize) -> Result<BasisConfig> {
    if m < 1 {
        return Err(Error::InvalidBasis("m must be at least 1".into()));
    }
    if kappa_values.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidBasis("non-finite kappa value".into()));
    }
    let mut sorted: Vec<f64> = kappa_values.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut distinct = 0usize;
    for i in 0..sorted.len() {
        if i == 0 || sorted[i] > sorted[i - 1] {
            distinct += 1;
        }
    }
    if distinct < m.max(2) {
        return Err(Error::TooFewDistinct {
            need: m.max(2),
            found: distinct,
        });
    }

    let mu = Array1::from_iter((1..=m).map(|j| quantile(&sorted, j as f64 / (m + 1) as f64)));
    if mu.as_slice().unwrap().windows(2).any(|w| !(w[0] < w[1])) {
        return Err(Error::InvalidBasis(
            "quantile knots are not strictly increasing; too many tied values".into(),
        ));
    }

    let d1 = sorted[0];
    let d2 = sorted[sorted.len() - 1];
    let mut sigma = Array1::zeros(m);
    for u in 0..m {
        let left = if u > 0 { mu[u] - mu[u - 1] } else { f64::NAN };
        let right = if u + 1 < m { mu[u + 1] - mu[u] } else { f64::NAN };
        let gap = match (left.is_nan(), right.is_nan()) {
            (false, false) => left.max(right),
            (false, true) => left,
            (true, false) => right,
            // Single knot: fall back to the larger half-range.
            (true, true) => (mu[u] - d1).max(d2 - mu[u]),
        };
        sigma[u] = 2.0 / 3.0 * gap;
    }
    BasisConfig::new(mu, sigma, d1, d2)
}

/// Type-7 (linear interpolation) sample quantile of sorted data.
fn quantile(sorted: &[f64], level: f64) -> f64 {
    let n = sorted.len();
    let h = (n - 1) as f64 * level;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// The roughness penalty matrix R with R[u][v] = ∫ψ″_u ψ″_v over [d1, d2],
/// symmetrized and eigen-clipped to be positive semidefinite.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PenaltyMatrix {
    pub r: Array2<f64>,
}

impl PenaltyMatrix {
    pub fn zero(m: usize) -> Self {
        Self {
            r: Array2::zeros((m, m)),
        }
    }

    /// θᵀRθ.
    pub fn quadratic_form(&self, theta: ArrayView1<'_, f64>) -> f64 {
        let mut acc = 0.0;
        for u in 0..self.r.nrows() {
            let mut row = 0.0;
            for v in 0..self.r.ncols() {
                row += self.r[(u, v)] * theta[v];
            }
            acc += theta[u] * row;
        }
        acc
    }

    /// Rθ.
    pub fn mul_theta(&self, theta: ArrayView1<'_, f64>) -> Array1<f64> {
        let m = self.r.nrows();
        Array1::from_shape_fn(m, |u| (0..m).map(|v| self.r[(u, v)] * theta[v]).sum())
    }
}

pub(crate) const PENALTY_NODES_PER_PANEL: usize = 50;

/// Composite Gauss–Legendre quadrature of the ψ″ products over [d1, d2],
/// panelled at the knots (50 nodes per panel).
pub fn penalty_matrix(cfg: &BasisConfig) -> PenaltyMatrix {
    penalty_matrix_with_nodes(cfg, PENALTY_NODES_PER_PANEL)
}

/// As [`penalty_matrix`] with an explicit node count; denser rules serve as a
/// quadrature oracle in tests.
pub fn penalty_matrix_with_nodes(cfg: &BasisConfig, nodes_per_panel: usize) -> PenaltyMatrix {
    let m = cfg.m();
    let rule = GaussLegendre::new(nodes_per_panel);
    let mut edges = Vec::with_capacity(m + 2);
    edges.push(cfg.d1);
    for &mu in cfg.mu().iter() {
        if mu > cfg.d1 && mu < cfg.d2 {
            edges.push(mu);
        }
    }
    edges.push(cfg.d2);

    let mut r = Array2::<f64>::zeros((m, m));
    let mut d2vals = vec![0.0; m];
    for panel in edges.windows(2) {
        let (a, b) = (panel[0], panel[1]);
        if !(b > a) {
            continue;
        }
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        for (node, w) in rule.nodes.iter().zip(&rule.weights) {
            let s = mid + half * node;
            for (u, slot) in d2vals.iter_mut().enumerate() {
                *slot = cfg.psi_d2(u, s).unwrap();
            }
            let weight = w * half;
            for u in 0..m {
                for v in u..m {
                    r[(u, v)] += weight * d2vals[u] * d2vals[v];
                }
            }
        }
    }
    for u in 0..m {
        for v in 0..u {
            r[(u, v)] = r[(v, u)];
        }
    }
    PenaltyMatrix {
        r: clip_to_psd(&r),
    }
}

/// Symmetrizes and clips negative eigenvalues to zero, guarding downstream
/// divisions by θᵀRθ against round-off.
fn clip_to_psd(r: &Array2<f64>) -> Array2<f64> {
    let sym = 0.5 * (r + &r.t());
    linalg::psd_project(&sym).0
}

/// Gauss–Legendre nodes and weights on [-1, 1], by Newton iteration on the
/// Legendre recurrence.
pub struct GaussLegendre {
    pub nodes: Vec<f64>,
    pub weights: Vec<f64>,
}

impl GaussLegendre {
    pub fn new(n: usize) -> Self {
        assert!(n >= 1, "quadrature degree must be at least 1");
        let mut nodes = vec![0.0; n];
        let mut weights = vec![0.0; n];
        for i in 0..n.div_ceil(2) {
            let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
            let mut dp = 0.0;
            for _ in 0..100 {
                let (p, d) = legendre(n, x);
                dp = d;
                let dx = p / d;
                x -= dx;
                if dx.abs() < 1e-15 {
                    break;
                }
            }
            let w = 2.0 / ((1.0 - x * x) * dp * dp);
            nodes[i] = -x;
            weights[i] = w;
            nodes[n - 1 - i] = x;
            weights[n - 1 - i] = w;
        }
        Self { nodes, weights }
    }

    /// ∫_a^b f(s) ds.
    pub fn integrate(&self, a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
        let half = 0.5 * (b - a);
        let mid = 0.5 * (a + b);
        self.nodes
            .iter()
            .zip(&self.weights)
            .map(|(x, w)| w * f(mid + half * x))
            .sum::<f64>()
            * half
    }
}

/// (P_n(x), P_n′(x)) via the three-term recurrence.
fn legendre(n: usize, x: f64) -> (f64, f64) {
    let mut p0 = 1.0;
    let mut p1 = x;
    for k in 2..=n {
        let kf = k as f64;
        let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
        p0 = p1;
        p1 = p2;
    }
    let d = n as f64 * (x * p1 - p0) / (x * x - 1.0);
    (p1, d)
}
