//! Gaussian linear models with structured covariance: the variance-stabilizing
//! count transform, restricted/full maximum likelihood fitting over a small
//! set of covariance parameters, and best-linear-unbiased prediction of
//! future cells given a fitted model.
//!
//! The covariance family of interest layers three pieces over the day-major
//! grid: a day random effect with AR(1) decay over true calendar gaps
//! (`G (x) J_K`), a within-day kernel repeated per day (`I_D (x) R`), and a
//! diagonal transform-noise term (`sigma2 * I`). Solves against that matrix
//! go through a Woodbury identity (per-day `K x K` factor plus one `D x D`
//! factor), never through a dense `DK x DK` factorization; the dense route
//! exists for tests and toy problems.

use crate::design::{ar1_intra_kernel, ar1_kernel, arma11_kernel, IntraKind, Sigma2Mode};
use crate::optim::{nelder_mead, SimplexOptions};
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

/// Errors from model fitting and prediction.
#[derive(Debug, thiserror::Error)]
pub enum LmmError {
    #[error("covariance matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("design matrix is rank deficient after aliasing drops")]
    RankDeficientX,
    #[error("optimizer hit the iteration cap with relative change {last_change:.2e} > {tol:.2e}")]
    NonConvergence { last_change: f64, tol: f64 },
    #[error("dimension mismatch: {context}")]
    DimensionMismatch { context: String },
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// Variance-stabilizing transform for Poisson-like counts: `sqrt(n + 1/4)`.
///
/// For `N ~ Poisson(lambda)` the transformed value has variance close to 1/4
/// once lambda is moderate, which is what lets a Gaussian model with a fixed
/// diagonal term absorb the count noise.
pub fn root_transform(count: f64) -> f64 {
    debug_assert!(count >= 0.0, "counts are nonnegative");
    (count + 0.25).sqrt()
}

/// Inverse of [`root_transform`] on the count scale, clamped at zero:
/// `max(y^2 - 1/4, 0)`.
pub fn inverse_transform(y: f64) -> f64 {
    (y * y - 0.25).max(0.0)
}

/// Day-level noise variance induced by averaging a day's `K` transformed
/// periods: `u = (1/K) * ((1/K) * sum_ij r_ij + sigma2)`.
pub fn aggregate_noise(r: &DMatrix<f64>, sigma2: f64) -> f64 {
    let k = r.nrows() as f64;
    (r.sum() / k + sigma2) / k
}

/// Fit criterion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    /// Restricted maximum likelihood; the objective is invariant to
    /// full-rank reparameterizations of the fixed-effects design.
    Reml,
    /// Full maximum likelihood.
    Ml,
}

/// Names of the covariance parameters across both fitting stages.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamName {
    /// Day random-effect variance.
    SigmaG2,
    /// Day random-effect AR(1) correlation (per calendar day of gap).
    RhoG,
    /// Within-day kernel variance.
    SigmaR2,
    /// Within-day AR(1) correlation (per period of lag).
    RhoR,
    /// ARMA(1,1) lag-one scaling factor.
    Delta,
    /// Diagonal transform-noise variance.
    Sigma2,
    /// Day-level aggregate noise variance (stage-1 residual).
    U,
}

impl std::fmt::Display for ParamName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ParamName::SigmaG2 => "sigma_G2",
            ParamName::RhoG => "rho_G",
            ParamName::SigmaR2 => "sigma_R2",
            ParamName::RhoR => "rho_R",
            ParamName::Delta => "delta",
            ParamName::Sigma2 => "sigma2",
            ParamName::U => "u",
        };
        f.write_str(s)
    }
}

/// How a parameter is transformed for unconstrained optimization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    /// Optimized on the log scale.
    Variance,
    /// Optimized on the inverse-hyperbolic-tangent scale.
    Correlation,
}

impl ParamKind {
    fn to_unconstrained(self, v: f64) -> f64 {
        match self {
            ParamKind::Variance => v.max(1e-12).ln(),
            ParamKind::Correlation => v.clamp(-0.999_999, 0.999_999).atanh(),
        }
    }

    fn from_unconstrained(self, t: f64) -> f64 {
        match self {
            ParamKind::Variance => t.clamp(-16.0, 16.0).exp(),
            ParamKind::Correlation => t.clamp(-7.6, 7.6).tanh(),
        }
    }
}

/// One covariance parameter slot: name plus optimizer transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ParamDesc {
    pub name: ParamName,
    pub kind: ParamKind,
}

fn desc(name: ParamName, kind: ParamKind) -> ParamDesc {
    ParamDesc { name, kind }
}

/// Hints describing how a fixed-effects design decomposes over the day grid,
/// enabling the sufficient-statistic fast path for layered fits.
///
/// `day_cols` are columns constant within each day; `profile_cols` are
/// one-hot (group, period) interaction columns; `day_group` maps each day to
/// its profile group (or `usize::MAX` for none). Hints are verified against
/// the actual design matrix before use and ignored if they do not match.
#[derive(Debug, Clone)]
pub struct LayeredXHints {
    pub day_cols: Vec<usize>,
    pub profile_cols: Vec<ProfileCol>,
    pub day_group: Vec<usize>,
    pub n_groups: usize,
}

/// One profile interaction column: design column index, weekday group id,
/// and 0-based period.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProfileCol {
    pub col: usize,
    pub group: usize,
    pub period: usize,
}

/// Covariance model over the observation vector, parameterized by a small
/// named vector `theta`.
pub enum CovModel {
    /// Day-level model for stage 1: `V = sigma_G2 * rho_G^gaps + u * I`.
    DayLevelAr1 { gaps: DMatrix<f64> },
    /// Full-grid layered model for stage 2 with the day kernel `g` frozen:
    /// `V = Z g Z' + I_D (x) (R(theta) + sigma2 * I_K)`.
    Layered {
        g: DMatrix<f64>,
        k: usize,
        intra: IntraKind,
        sigma2: Sigma2Mode,
        /// Optional design decomposition enabling the fast objective.
        hints: Option<LayeredXHints>,
    },
    /// Arbitrary dense covariance built by a callback; used by tests and toy
    /// problems.
    DenseFn {
        params: Vec<ParamDesc>,
        build: Box<dyn Fn(&[f64]) -> DMatrix<f64>>,
    },
}

impl CovModel {
    /// Parameter slots in optimization order.
    pub fn params(&self) -> Vec<ParamDesc> {
        match self {
            CovModel::DayLevelAr1 { .. } => vec![
                desc(ParamName::SigmaG2, ParamKind::Variance),
                desc(ParamName::RhoG, ParamKind::Correlation),
                desc(ParamName::U, ParamKind::Variance),
            ],
            CovModel::Layered { intra, sigma2, .. } => {
                let mut p = vec![
                    desc(ParamName::SigmaR2, ParamKind::Variance),
                    desc(ParamName::RhoR, ParamKind::Correlation),
                ];
                if *intra == IntraKind::Arma11 {
                    p.push(desc(ParamName::Delta, ParamKind::Correlation));
                }
                if matches!(sigma2, Sigma2Mode::Estimated) {
                    p.push(desc(ParamName::Sigma2, ParamKind::Variance));
                }
                p
            }
            CovModel::DenseFn { params, .. } => params.clone(),
        }
    }

    /// Build the within-day kernel plus diagonal for a layered model's theta.
    fn layered_rstar(
        k: usize,
        intra: IntraKind,
        sigma2: Sigma2Mode,
        theta: &[f64],
    ) -> Result<(DMatrix<f64>, f64), LmmError> {
        let (r, next) = match intra {
            IntraKind::Ar1 => (
                ar1_intra_kernel(theta[0], theta[1], k)
                    .map_err(|e| LmmError::InvalidParameter(e.to_string()))?,
                2,
            ),
            IntraKind::Arma11 => (
                arma11_kernel(theta[0], theta[2], theta[1], k)
                    .map_err(|e| LmmError::InvalidParameter(e.to_string()))?,
                3,
            ),
        };
        let s2 = match sigma2 {
            Sigma2Mode::Fixed(v) => v,
            Sigma2Mode::Estimated => theta[next],
        };
        let mut rstar = r;
        for i in 0..k {
            rstar[(i, i)] += s2;
        }
        Ok((rstar, s2))
    }

    /// Factor the covariance at `theta` for solving and log-determinants.
    pub fn factorize(&self, theta: &[f64]) -> Result<CovFactor, LmmError> {
        let n_params = self.params().len();
        if theta.len() != n_params {
            return Err(LmmError::DimensionMismatch {
                context: format!("theta has {} entries, model needs {}", theta.len(), n_params),
            });
        }
        match self {
            CovModel::DayLevelAr1 { gaps } => {
                let mut v = ar1_kernel(theta[0], theta[1], gaps)
                    .map_err(|e| LmmError::InvalidParameter(e.to_string()))?;
                for i in 0..v.nrows() {
                    v[(i, i)] += theta[2];
                }
                CovFactor::dense(v)
            }
            CovModel::Layered {
                g, k, intra, sigma2, ..
            } => {
                let (rstar, _) = Self::layered_rstar(*k, *intra, *sigma2, theta)?;
                Ok(CovFactor::Layered(LayeredFactor::new(g, &rstar)?))
            }
            CovModel::DenseFn { build, .. } => CovFactor::dense(build(theta)),
        }
    }
}

impl std::fmt::Debug for CovModel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CovModel::DayLevelAr1 { gaps } => {
                write!(f, "DayLevelAr1 {{ d: {} }}", gaps.nrows())
            }
            CovModel::Layered { g, k, intra, sigma2, hints } => write!(
                f,
                "Layered {{ d: {}, k: {k}, intra: {intra:?}, sigma2: {sigma2:?}, hints: {} }}",
                g.nrows(),
                hints.is_some()
            ),
            CovModel::DenseFn { params, .. } => write!(f, "DenseFn {{ params: {params:?} }}"),
        }
    }
}

/// A factored covariance matrix, ready for solves and log-determinants.
pub enum CovFactor {
    Dense(DenseFactor),
    Layered(LayeredFactor),
}

/// Dense Cholesky factorization.
pub struct DenseFactor {
    chol: Cholesky<f64, Dyn>,
    logdet: f64,
    n: usize,
}

impl CovFactor {
    fn dense(v: DMatrix<f64>) -> Result<CovFactor, LmmError> {
        let n = v.nrows();
        let chol = Cholesky::new(v).ok_or(LmmError::NotPositiveDefinite)?;
        let logdet = 2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        Ok(CovFactor::Dense(DenseFactor { chol, logdet, n }))
    }

    pub fn n(&self) -> usize {
        match self {
            CovFactor::Dense(d) => d.n,
            CovFactor::Layered(l) => l.d * l.k,
        }
    }

    pub fn logdet(&self) -> f64 {
        match self {
            CovFactor::Dense(d) => d.logdet,
            CovFactor::Layered(l) => l.logdet,
        }
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            CovFactor::Dense(d) => d.chol.solve(b),
            CovFactor::Layered(l) => l.solve_mat(b),
        }
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            CovFactor::Dense(d) => d.chol.solve(b),
            CovFactor::Layered(l) => {
                let m = l.solve_mat(&DMatrix::from_column_slice(b.len(), 1, b.as_slice()));
                DVector::from_column_slice(m.column(0).as_slice())
            }
        }
    }
}

/// Woodbury factorization of `V = Z G Z' + I_D (x) R*` where `Z = I_D (x) 1_K`:
/// solves cost one `K x K` Cholesky, one `D x D` Cholesky, and per-day
/// triangular solves.
pub struct LayeredFactor {
    d: usize,
    k: usize,
    g: DMatrix<f64>,
    chol_rstar: Cholesky<f64, Dyn>,
    chol_inner: Cholesky<f64, Dyn>,
    /// `R*^-1 1_K`.
    w: DVector<f64>,
    /// `1' R*^-1 1`.
    c: f64,
    logdet: f64,
}

impl LayeredFactor {
    /// Factor for a given day kernel `g` (D x D, may be all zeros) and
    /// within-day matrix `r_star` (K x K, must be positive definite).
    pub fn new(g: &DMatrix<f64>, r_star: &DMatrix<f64>) -> Result<LayeredFactor, LmmError> {
        let d = g.nrows();
        let k = r_star.nrows();
        if g.ncols() != d || r_star.ncols() != k {
            return Err(LmmError::DimensionMismatch {
                context: "G and R* must be square".into(),
            });
        }
        let chol_rstar =
            Cholesky::new(r_star.clone()).ok_or(LmmError::NotPositiveDefinite)?;
        let ones = DVector::repeat(k, 1.0);
        let w = chol_rstar.solve(&ones);
        let c = w.sum();
        let inner = DMatrix::identity(d, d) + g * c;
        let chol_inner = Cholesky::new(inner).ok_or(LmmError::NotPositiveDefinite)?;
        let ld_rstar: f64 = 2.0 * chol_rstar.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let ld_inner: f64 = 2.0 * chol_inner.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        let logdet = d as f64 * ld_rstar + ld_inner;
        Ok(LayeredFactor {
            d,
            k,
            g: g.clone(),
            chol_rstar,
            chol_inner,
            w,
            c,
            logdet,
        })
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.d, self.k)
    }

    /// `V^-1 B` for a day-major right-hand side.
    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let (d, k) = (self.d, self.k);
        assert_eq!(b.nrows(), d * k, "rhs rows must equal D*K");
        let m = b.ncols();
        // U = (I_D (x) R*^-1) B, solved day block by day block.
        let mut u = DMatrix::zeros(d * k, m);
        for day in 0..d {
            let block = b.rows(day * k, k).into_owned();
            let sol = self.chol_rstar.solve(&block);
            u.rows_mut(day * k, k).copy_from(&sol);
        }
        // W = Z' U: per-day column sums.
        let w_mat = day_sums(&u, d, k);
        // T = (I + cG)^-1 G W.
        let t = self.chol_inner.solve(&(&self.g * &w_mat));
        // Correction rows: (R*^-1 1_K)[p] * T[day, :].
        for day in 0..d {
            for p in 0..k {
                let wp = self.w[p];
                for j in 0..m {
                    u[(day * k + p, j)] -= wp * t[(day, j)];
                }
            }
        }
        u
    }

    /// `Z' V^-1 B`: day-level contraction of a solve.
    pub fn zt_solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        day_sums(&self.solve_mat(b), self.d, self.k)
    }

    /// `Z' V^-1 Z = c (I + cG)^-1`, the day-level information matrix.
    pub fn day_gram(&self) -> DMatrix<f64> {
        let eye = DMatrix::identity(self.d, self.d);
        self.chol_inner.solve(&eye) * self.c
    }
}

/// Sum each day's `K` rows down to one row: `(D*K x m) -> (D x m)`.
fn day_sums(u: &DMatrix<f64>, d: usize, k: usize) -> DMatrix<f64> {
    let m = u.ncols();
    let mut out = DMatrix::zeros(d, m);
    for day in 0..d {
        for p in 0..k {
            for j in 0..m {
                out[(day, j)] += u[(day * k + p, j)];
            }
        }
    }
    out
}

/// Controls for [`fit_gls`].
#[derive(Debug, Clone)]
pub struct GlsOptions {
    pub objective: Objective,
    /// Starting values on the natural parameter scale, in `params()` order.
    pub theta0: Vec<f64>,
    /// Simplex iteration cap per start.
    pub max_iter: usize,
    /// Relative convergence tolerance on the objective.
    pub rel_tol: f64,
    /// Run three deterministic starts instead of one.
    pub multi_start: bool,
}

impl GlsOptions {
    pub fn new(objective: Objective, theta0: Vec<f64>) -> Self {
        GlsOptions {
            objective,
            theta0,
            max_iter: 500,
            rel_tol: 1e-8,
            multi_start: true,
        }
    }
}

/// A fitted generalized-least-squares / mixed model.
#[derive(Debug, Clone)]
pub struct GlsFit {
    pub beta: DVector<f64>,
    /// `(X' V^-1 X)^-1` at the estimate.
    pub beta_cov: DMatrix<f64>,
    /// Covariance estimates on the natural scale, in `params()` order.
    pub theta: Vec<f64>,
    /// Named view of `theta`.
    pub params: Vec<(ParamName, f64)>,
    pub objective: Objective,
    /// Maximized log-likelihood (restricted log-likelihood under REML).
    pub loglik: f64,
    pub converged: bool,
    pub n_iter: usize,
    pub n_evals: usize,
    /// True when a correlation estimate sits within 1e-3 of an endpoint.
    pub boundary: bool,
}

/// Relative objective change above which hitting the iteration cap is an
/// error rather than a `converged = false` result.
const CAP_FAILURE_TOL: f64 = 1e-4;

/// Maximize the (restricted) Gaussian likelihood of `y = X beta + e`,
/// `e ~ N(0, V(theta))`, over the model's covariance parameters.
///
/// The search runs a simplex in transformed coordinates (log variances,
/// atanh correlations) from up to three deterministic starts and profiles
/// `beta` out via generalized least squares at each objective evaluation.
pub fn fit_gls(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    model: &CovModel,
    opts: &GlsOptions,
) -> Result<GlsFit, LmmError> {
    let n = y.len();
    let p = x.ncols();
    if x.nrows() != n {
        return Err(LmmError::DimensionMismatch {
            context: format!("X has {} rows, y has {}", x.nrows(), n),
        });
    }
    if p == 0 || p >= n {
        return Err(LmmError::DimensionMismatch {
            context: format!("X has {p} columns for {n} observations"),
        });
    }
    let descs = model.params();
    if opts.theta0.len() != descs.len() {
        return Err(LmmError::DimensionMismatch {
            context: format!(
                "theta0 has {} entries, model needs {}",
                opts.theta0.len(),
                descs.len()
            ),
        });
    }

    // REML needs log|X'X| once; its failure also catches rank-deficient X
    // early for both objectives.
    let xtx = symmetrize(x.tr_mul(x));
    let chol_xtx = Cholesky::new(xtx).ok_or(LmmError::RankDeficientX)?;
    let logdet_xtx =
        2.0 * chol_xtx.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();

    let mut engine = build_engine(y, x, model, opts.objective, logdet_xtx);

    if descs.is_empty() {
        // Nothing to optimize: evaluate once at the (empty) theta.
        let theta: Vec<f64> = vec![];
        let obj = engine.eval(&theta);
        if !obj.is_finite() {
            return Err(LmmError::NotPositiveDefinite);
        }
        return finalize(y, x, model, opts.objective, logdet_xtx, &theta, true, 0, 1);
    }

    let t0: Vec<f64> = descs
        .iter()
        .zip(&opts.theta0)
        .map(|(d, &v)| d.kind.to_unconstrained(v))
        .collect();
    let mut starts = vec![t0.clone()];
    if opts.multi_start {
        let offset: Vec<f64> = (0..t0.len())
            .map(|i| if i % 2 == 0 { 0.75 } else { -0.75 })
            .collect();
        starts.push(t0.iter().zip(&offset).map(|(a, b)| a + b).collect());
        starts.push(t0.iter().zip(&offset).map(|(a, b)| a - b).collect());
    }

    let sx_opts = SimplexOptions {
        max_iter: opts.max_iter,
        rel_tol: opts.rel_tol,
        step: 0.25,
    };
    let mut best: Option<crate::optim::SimplexResult> = None;
    let mut total_evals = 0usize;
    for s in &starts {
        let r = nelder_mead(
            |t| {
                let theta: Vec<f64> = descs
                    .iter()
                    .zip(t)
                    .map(|(d, &ti)| d.kind.from_unconstrained(ti))
                    .collect();
                engine.eval(&theta)
            },
            s,
            &sx_opts,
        );
        total_evals += r.evaluations;
        let better = match &best {
            None => true,
            Some(b) => r.f < b.f,
        };
        if better {
            best = Some(r);
        }
    }
    let best = best.expect("at least one start");
    if !best.f.is_finite() {
        return Err(LmmError::NotPositiveDefinite);
    }
    if !best.converged && best.final_spread > CAP_FAILURE_TOL {
        return Err(LmmError::NonConvergence {
            last_change: best.final_spread,
            tol: CAP_FAILURE_TOL,
        });
    }

    let theta: Vec<f64> = descs
        .iter()
        .zip(&best.x)
        .map(|(d, &t)| d.kind.from_unconstrained(t))
        .collect();
    finalize(
        y,
        x,
        model,
        opts.objective,
        logdet_xtx,
        &theta,
        best.converged,
        best.iterations,
        total_evals,
    )
}

/// Final pass at the chosen theta: factor once, extract beta and its
/// covariance, and report the maximized log-likelihood.
#[allow(clippy::too_many_arguments)]
fn finalize(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    model: &CovModel,
    objective: Objective,
    logdet_xtx: f64,
    theta: &[f64],
    converged: bool,
    n_iter: usize,
    n_evals: usize,
) -> Result<GlsFit, LmmError> {
    let n = y.len() as f64;
    let p = x.ncols() as f64;
    let factor = model.factorize(theta)?;
    let vix = factor.solve_mat(x);
    let viy = factor.solve_vec(y);
    let xtvx = symmetrize(x.tr_mul(&vix));
    let xtvy = x.tr_mul(&viy);
    let chol = Cholesky::new(xtvx.clone()).ok_or(LmmError::RankDeficientX)?;
    let beta = chol.solve(&xtvy);
    let beta_cov = chol.solve(&DMatrix::identity(x.ncols(), x.ncols()));
    let quad = y.dot(&viy) - beta.dot(&xtvy);
    let ld_xtvx =
        2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let two_pi_ln = (2.0 * std::f64::consts::PI).ln();
    let neg2ll = match objective {
        Objective::Ml => factor.logdet() + quad + n * two_pi_ln,
        Objective::Reml => {
            factor.logdet() + ld_xtvx - logdet_xtx + quad + (n - p) * two_pi_ln
        }
    };

    let descs = model.params();
    let params: Vec<(ParamName, f64)> = descs
        .iter()
        .zip(theta)
        .map(|(d, &v)| (d.name, v))
        .collect();
    let boundary = descs
        .iter()
        .zip(theta)
        .any(|(d, &v)| d.kind == ParamKind::Correlation && v.abs() > 1.0 - 1e-3);
    Ok(GlsFit {
        beta,
        beta_cov,
        theta: theta.to_vec(),
        params,
        objective,
        loglik: -0.5 * neg2ll,
        converged,
        n_iter,
        n_evals,
        boundary,
    })
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    let mt = m.transpose();
    (m + mt) * 0.5
}

// ---------------------------------------------------------------------------
// Objective engines
// ---------------------------------------------------------------------------

enum Engine<'a> {
    Generic(GenericEngine<'a>),
    Fast(Box<FastLayeredEngine>),
}

impl Engine<'_> {
    fn eval(&mut self, theta: &[f64]) -> f64 {
        match self {
            Engine::Generic(e) => e.eval(theta),
            Engine::Fast(e) => e.eval(theta),
        }
    }
}

fn build_engine<'a>(
    y: &'a DVector<f64>,
    x: &'a DMatrix<f64>,
    model: &'a CovModel,
    objective: Objective,
    logdet_xtx: f64,
) -> Engine<'a> {
    if let CovModel::Layered {
        g,
        k,
        intra,
        sigma2,
        hints: Some(hints),
    } = model
    {
        if let Some(fast) =
            FastLayeredEngine::new(y, x, g, *k, *intra, *sigma2, hints, objective, logdet_xtx)
        {
            return Engine::Fast(Box::new(fast));
        }
    }
    Engine::Generic(GenericEngine {
        y,
        x,
        model,
        objective,
        logdet_xtx,
    })
}

struct GenericEngine<'a> {
    y: &'a DVector<f64>,
    x: &'a DMatrix<f64>,
    model: &'a CovModel,
    objective: Objective,
    logdet_xtx: f64,
}

impl GenericEngine<'_> {
    fn eval(&mut self, theta: &[f64]) -> f64 {
        let factor = match self.model.factorize(theta) {
            Ok(f) => f,
            Err(_) => return f64::INFINITY,
        };
        let vix = factor.solve_mat(self.x);
        let viy = factor.solve_vec(self.y);
        let xtvx = symmetrize(self.x.tr_mul(&vix));
        let xtvy = self.x.tr_mul(&viy);
        let chol = match Cholesky::new(xtvx) {
            Some(c) => c,
            None => return f64::INFINITY,
        };
        let beta = chol.solve(&xtvy);
        let quad = self.y.dot(&viy) - beta.dot(&xtvy);
        let n = self.y.len() as f64;
        let p = self.x.ncols() as f64;
        let two_pi_ln = (2.0 * std::f64::consts::PI).ln();
        match self.objective {
            Objective::Ml => factor.logdet() + quad + n * two_pi_ln,
            Objective::Reml => {
                let ld_xtvx =
                    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                factor.logdet() + ld_xtvx - self.logdet_xtx + quad + (n - p) * two_pi_ln
            }
        }
    }
}

/// Sufficient-statistic objective for the layered model.
///
/// With `A = I_D (x) R*` and `Z = I_D (x) 1_K`, every piece of the GLS
/// objective reduces to day-level contractions that depend on theta only
/// through the `K x K` matrix `R*^-1`, so one objective evaluation costs
/// `O(K^3 + D K^2 + p^2 D)` instead of dense-solve work on `DK` rows.
struct FastLayeredEngine {
    objective: Objective,
    logdet_xtx: f64,
    k: usize,
    intra: IntraKind,
    sigma2: Sigma2Mode,
    g: DMatrix<f64>,
    /// Day-level column values: D x p1 (rows are days).
    a: DMatrix<f64>,
    /// A' A, cached.
    ata: DMatrix<f64>,
    /// Per-group sum of day-level rows: n_groups x p1.
    group_asum: DMatrix<f64>,
    /// Per-group day counts.
    group_n: Vec<f64>,
    /// Observations by day: D x K (rows are days).
    y_grid: DMatrix<f64>,
    /// Layout bookkeeping.
    day_cols: Vec<usize>,
    profile_cols: Vec<ProfileCol>,
    day_group: Vec<usize>,
    p: usize,
    n: usize,
}

impl FastLayeredEngine {
    #[allow(clippy::too_many_arguments)]
    fn new(
        y: &DVector<f64>,
        x: &DMatrix<f64>,
        g: &DMatrix<f64>,
        k: usize,
        intra: IntraKind,
        sigma2: Sigma2Mode,
        hints: &LayeredXHints,
        objective: Objective,
        logdet_xtx: f64,
    ) -> Option<FastLayeredEngine> {
        let d = g.nrows();
        let n = d * k;
        let p = x.ncols();
        if y.len() != n || x.nrows() != n || hints.day_group.len() != d {
            return None;
        }
        if hints.day_cols.len() + hints.profile_cols.len() != p {
            return None;
        }
        // Verify the hinted decomposition against the actual design.
        let mut covered = vec![false; p];
        let mut a = DMatrix::zeros(d, hints.day_cols.len());
        for (j1, &j) in hints.day_cols.iter().enumerate() {
            if j >= p || covered[j] {
                return None;
            }
            covered[j] = true;
            for day in 0..d {
                let v = x[(day * k, j)];
                for per in 1..k {
                    if x[(day * k + per, j)] != v {
                        return None;
                    }
                }
                a[(day, j1)] = v;
            }
        }
        for pc in &hints.profile_cols {
            if pc.col >= p || covered[pc.col] || pc.period >= k || pc.group >= hints.n_groups {
                return None;
            }
            covered[pc.col] = true;
            for day in 0..d {
                let active = hints.day_group[day] == pc.group;
                for per in 0..k {
                    let expect = if active && per == pc.period { 1.0 } else { 0.0 };
                    if x[(day * k + per, pc.col)] != expect {
                        return None;
                    }
                }
            }
        }

        let mut y_grid = DMatrix::zeros(d, k);
        for day in 0..d {
            for per in 0..k {
                y_grid[(day, per)] = y[day * k + per];
            }
        }
        let ata = symmetrize(a.tr_mul(&a));
        let mut group_asum = DMatrix::zeros(hints.n_groups, a.ncols());
        let mut group_n = vec![0.0; hints.n_groups];
        for day in 0..d {
            let gr = hints.day_group[day];
            if gr == usize::MAX {
                continue;
            }
            if gr >= hints.n_groups {
                return None;
            }
            group_n[gr] += 1.0;
            for j in 0..a.ncols() {
                group_asum[(gr, j)] += a[(day, j)];
            }
        }
        Some(FastLayeredEngine {
            objective,
            logdet_xtx,
            k,
            intra,
            sigma2,
            g: g.clone(),
            a,
            ata,
            group_asum,
            group_n,
            y_grid,
            day_cols: hints.day_cols.clone(),
            profile_cols: hints.profile_cols.clone(),
            day_group: hints.day_group.clone(),
            p,
            n,
        })
    }

    fn eval(&mut self, theta: &[f64]) -> f64 {
        let k = self.k;
        let d = self.g.nrows();
        let (rstar, _) = match CovModel::layered_rstar(k, self.intra, self.sigma2, theta) {
            Ok(v) => v,
            Err(_) => return f64::INFINITY,
        };
        let chol_rstar = match Cholesky::new(rstar) {
            Some(c) => c,
            None => return f64::INFINITY,
        };
        let ri = chol_rstar.solve(&DMatrix::identity(k, k));
        let w: DVector<f64> = ri.column_sum();
        let c: f64 = w.sum();
        let ld_rstar =
            2.0 * chol_rstar.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();

        let inner = DMatrix::identity(d, d) + &self.g * c;
        let chol_inner = match Cholesky::new(inner) {
            Some(c) => c,
            None => return f64::INFINITY,
        };
        let ld_inner =
            2.0 * chol_inner.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        let logdet_v = d as f64 * ld_rstar + ld_inner;
        // (I + cG)^-1 G, symmetric since G commutes with (I + cG)^-1.
        let mcorr = symmetrize(chol_inner.solve(&self.g));

        // Plain-A contractions.
        let y_ri = &self.y_grid * &ri; // D x K
        let yay: f64 = y_ri.component_mul(&self.y_grid).sum();
        let zay: DVector<f64> = &y_ri * DVector::repeat(k, 1.0); // = Y R*^-1 1 per day
        let p1 = self.day_cols.len();
        let p2 = self.profile_cols.len();

        // X' A^-1 y.
        let mut xay = DVector::zeros(self.p);
        let day_part = self.a.tr_mul(&zay); // p1
        for (j1, &j) in self.day_cols.iter().enumerate() {
            xay[j] = day_part[j1];
        }
        for pc in &self.profile_cols {
            let mut s = 0.0;
            for day in 0..d {
                if self.day_group[day] == pc.group {
                    s += y_ri[(day, pc.period)];
                }
            }
            xay[pc.col] = s;
        }

        // X' A^-1 X.
        let mut xax = DMatrix::zeros(self.p, self.p);
        for j1 in 0..p1 {
            for j2 in 0..p1 {
                xax[(self.day_cols[j1], self.day_cols[j2])] = c * self.ata[(j1, j2)];
            }
        }
        for pc in &self.profile_cols {
            for (j1, &j) in self.day_cols.iter().enumerate() {
                let v = self.group_asum[(pc.group, j1)] * w[pc.period];
                xax[(j, pc.col)] = v;
                xax[(pc.col, j)] = v;
            }
        }
        for i in 0..p2 {
            let pi = &self.profile_cols[i];
            for j in i..p2 {
                let pj = &self.profile_cols[j];
                if pi.group == pj.group {
                    let v = self.group_n[pi.group] * ri[(pi.period, pj.period)];
                    xax[(pi.col, pj.col)] = v;
                    xax[(pj.col, pi.col)] = v;
                }
            }
        }

        // X' A^-1 Z (p x D).
        let mut xaz = DMatrix::zeros(self.p, d);
        for day in 0..d {
            for (j1, &j) in self.day_cols.iter().enumerate() {
                xaz[(j, day)] = c * self.a[(day, j1)];
            }
        }
        for pc in &self.profile_cols {
            for day in 0..d {
                if self.day_group[day] == pc.group {
                    xaz[(pc.col, day)] = w[pc.period];
                }
            }
        }

        // Woodbury corrections.
        let xaz_m = &xaz * &mcorr; // p x D
        let xtvx = symmetrize(&xax - &xaz_m * xaz.transpose());
        let xtvy = &xay - &xaz_m * &zay;
        let ytvy = yay - (&mcorr * &zay).dot(&zay);

        let chol = match Cholesky::new(xtvx) {
            Some(c) => c,
            None => return f64::INFINITY,
        };
        let beta = chol.solve(&xtvy);
        let quad = ytvy - beta.dot(&xtvy);
        let n = self.n as f64;
        let p = self.p as f64;
        let two_pi_ln = (2.0 * std::f64::consts::PI).ln();
        match self.objective {
            Objective::Ml => logdet_v + quad + n * two_pi_ln,
            Objective::Reml => {
                let ld_xtvx =
                    2.0 * chol.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                logdet_v + ld_xtvx - self.logdet_xtx + quad + (n - p) * two_pi_ln
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Two-stage convenience fits
// ---------------------------------------------------------------------------

/// Stage 1: fit the day-level model `ybar = X_day b + eta`,
/// `var(eta) = sigma_G2 * rho_G^gaps + u I`, by (restricted) likelihood.
pub fn fit_stage1(
    y_day: &DVector<f64>,
    x_day: &DMatrix<f64>,
    gaps: &DMatrix<f64>,
    objective: Objective,
) -> Result<GlsFit, LmmError> {
    let d = y_day.len();
    if d < 3 {
        return Err(LmmError::DimensionMismatch {
            context: format!("stage 1 needs at least 3 days, got {d}"),
        });
    }
    let var = sample_variance(y_day);
    let v0 = (var * 0.5).max(1e-3);
    let model = CovModel::DayLevelAr1 { gaps: gaps.clone() };
    let opts = GlsOptions::new(objective, vec![v0, 0.3, v0]);
    fit_gls(y_day, x_day, &model, &opts)
}

/// Stage 2: with the day kernel frozen at `g_hat`, fit the within-day
/// covariance parameters on the full grid.
#[allow(clippy::too_many_arguments)]
pub fn fit_stage2(
    y: &DVector<f64>,
    x: &DMatrix<f64>,
    g_hat: &DMatrix<f64>,
    k: usize,
    intra: IntraKind,
    sigma2: Sigma2Mode,
    hints: Option<LayeredXHints>,
    objective: Objective,
) -> Result<GlsFit, LmmError> {
    let d = g_hat.nrows();
    if y.len() != d * k {
        return Err(LmmError::DimensionMismatch {
            context: format!("y has {} entries, grid is {d} x {k}", y.len()),
        });
    }
    // Within-day residual variance seeds sigma_R2.
    let mut within = 0.0;
    for day in 0..d {
        let slice = y.rows(day * k, k);
        let mean = slice.sum() / k as f64;
        within += slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
    }
    within /= (d * k) as f64 - d as f64;
    let s2_guess = match sigma2 {
        Sigma2Mode::Fixed(v) => v,
        Sigma2Mode::Estimated => 0.25,
    };
    let mut theta0 = vec![(within - s2_guess).max(0.05), 0.3];
    if intra == IntraKind::Arma11 {
        theta0.push(0.25);
    }
    if matches!(sigma2, Sigma2Mode::Estimated) {
        theta0.push(0.25);
    }
    let model = CovModel::Layered {
        g: g_hat.clone(),
        k,
        intra,
        sigma2,
        hints,
    };
    let opts = GlsOptions::new(objective, theta0);
    fit_gls(y, x, &model, &opts)
}

fn sample_variance(v: &DVector<f64>) -> f64 {
    let n = v.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let mean = v.sum() / n;
    v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0)
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

/// Inputs for predicting future cells from a fitted layered model.
///
/// Day kernels are built by the caller from the fitted inter-day parameters
/// over true calendar gaps; `g_fp` is the future-by-past cross block.
pub struct BlupInputs<'a> {
    pub y_past: &'a DVector<f64>,
    pub x_past: &'a DMatrix<f64>,
    pub x_future: &'a DMatrix<f64>,
    /// Past-by-past day kernel (D_p x D_p).
    pub g_pp: &'a DMatrix<f64>,
    /// Future-by-past day kernel (D_f x D_p).
    pub g_fp: &'a DMatrix<f64>,
    /// Future day-effect variances (diagonal of the future block).
    pub g_ff_diag: &'a DVector<f64>,
    /// Within-day kernel plus diagonal noise (K x K).
    pub r_star: &'a DMatrix<f64>,
    pub k: usize,
    pub beta: &'a DVector<f64>,
    pub beta_cov: &'a DMatrix<f64>,
}

/// Best linear unbiased prediction on the transformed scale.
#[derive(Debug, Clone)]
pub struct BlupPrediction {
    /// Predicted mean per future cell, day-major.
    pub mean: DVector<f64>,
    /// Prediction standard deviation per future cell, including fixed-effect
    /// estimation variance.
    pub sd: DVector<f64>,
    /// Predicted day random effect per future day.
    pub gamma: DVector<f64>,
}

/// Conditional-mean/variance prediction of future cells given the past block,
/// with fixed effects at their estimates and their estimation variance folded
/// into the reported standard deviations.
pub fn predict_blup(inp: &BlupInputs) -> Result<BlupPrediction, LmmError> {
    let k = inp.k;
    let d_p = inp.g_pp.nrows();
    let d_f = inp.g_fp.nrows();
    if inp.g_fp.ncols() != d_p {
        return Err(LmmError::DimensionMismatch {
            context: "g_fp columns must match past days".into(),
        });
    }
    if inp.y_past.len() != d_p * k || inp.x_past.nrows() != d_p * k {
        return Err(LmmError::DimensionMismatch {
            context: "past block shape mismatch".into(),
        });
    }
    if inp.x_future.nrows() != d_f * k || inp.g_ff_diag.len() != d_f {
        return Err(LmmError::DimensionMismatch {
            context: "future block shape mismatch".into(),
        });
    }
    let p = inp.x_past.ncols();
    if inp.x_future.ncols() != p || inp.beta.len() != p {
        return Err(LmmError::DimensionMismatch {
            context: "fixed-effect dimension mismatch".into(),
        });
    }

    let factor = LayeredFactor::new(inp.g_pp, inp.r_star)?;
    let resid = inp.y_past - inp.x_past * inp.beta;
    let resid_m = DMatrix::from_column_slice(resid.len(), 1, resid.as_slice());
    let zw = factor.zt_solve(&resid_m); // D_p x 1
    let gamma = inp.g_fp * DVector::from_column_slice(zw.column(0).as_slice());

    // Mean: fixed part plus the day-effect carryover.
    let mut mean = inp.x_future * inp.beta;
    for df in 0..d_f {
        for per in 0..k {
            mean[df * k + per] += gamma[df];
        }
    }

    // C_fp V^-1 X_p = G_fp (Z' V^-1 X_p), needed for the estimation-variance
    // term B (X'V^-1X)^-1 B' with B = X_f - C_fp V^-1 X_p.
    let s_mat = factor.zt_solve(inp.x_past); // D_p x p
    let adj = inp.g_fp * s_mat; // D_f x p
    let mut b = inp.x_future.clone();
    for df in 0..d_f {
        for per in 0..k {
            for j in 0..p {
                b[(df * k + per, j)] -= adj[(df, j)];
            }
        }
    }

    // Conditional variance: day-effect shrinkage uses the day-level gram.
    let m = factor.day_gram(); // D_p x D_p
    let q = inp.g_fp * &m * inp.g_fp.transpose(); // D_f x D_f
    let bc = &b * inp.beta_cov; // (D_f K) x p
    let mut sd = DVector::zeros(d_f * k);
    for df in 0..d_f {
        let day_var = inp.g_ff_diag[df] - q[(df, df)];
        for per in 0..k {
            let row = df * k + per;
            let est_var = bc.row(row).dot(&b.row(row));
            let var = day_var + inp.r_star[(per, per)] + est_var;
            sd[row] = var.max(0.0).sqrt();
        }
    }

    Ok(BlupPrediction { mean, sd, gamma })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::design::assemble_v;
    use approx::assert_abs_diff_eq;

    #[test]
    fn transform_hits_reference_values_and_round_trips() {
        assert_abs_diff_eq!(root_transform(500.0), 22.366269246, epsilon = 1e-8);
        assert_abs_diff_eq!(root_transform(0.0), 0.5, epsilon = 1e-15);
        assert_abs_diff_eq!(inverse_transform(0.4), 0.0, epsilon = 1e-15);
        for n in [0u64, 1, 7, 499, 12345] {
            let y = root_transform(n as f64);
            assert_abs_diff_eq!(inverse_transform(y), n as f64, epsilon = 1e-9);
        }
    }

    #[test]
    fn aggregate_noise_matches_hand_values() {
        let r0 = ar1_intra_kernel(1.0, 0.0, 2).unwrap();
        assert_abs_diff_eq!(aggregate_noise(&r0, 0.25), 0.625, epsilon = 1e-12);
        let r5 = ar1_intra_kernel(1.0, 0.5, 2).unwrap();
        assert_abs_diff_eq!(aggregate_noise(&r5, 0.25), 0.875, epsilon = 1e-12);
    }

    fn toy_layered() -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        let gaps = DMatrix::from_row_slice(3, 3, &[0., 1., 3., 1., 0., 2., 3., 2., 0.]);
        let g = ar1_kernel(0.8, 0.6, &gaps).unwrap();
        let r = ar1_intra_kernel(1.2, 0.4, 4).unwrap();
        let mut r_star = r.clone();
        for i in 0..4 {
            r_star[(i, i)] += 0.25;
        }
        let v = assemble_v(&g, &r, 0.25);
        (g, r_star, v)
    }

    #[test]
    fn layered_factor_matches_dense_solve_and_logdet() {
        let (g, r_star, v) = toy_layered();
        let lf = LayeredFactor::new(&g, &r_star).unwrap();
        let dense = Cholesky::new(v.clone()).unwrap();
        let ld_dense =
            2.0 * dense.l_dirty().diagonal().iter().map(|x| x.ln()).sum::<f64>();
        assert_abs_diff_eq!(lf.logdet, ld_dense, epsilon = 1e-9);

        let b = DMatrix::from_fn(12, 3, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let fast = lf.solve_mat(&b);
        let slow = dense.solve(&b);
        assert_abs_diff_eq!((fast - slow).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn layered_factor_with_zero_day_kernel_is_block_diagonal() {
        let g = DMatrix::zeros(3, 3);
        let r = ar1_intra_kernel(1.0, 0.3, 4).unwrap();
        let mut r_star = r.clone();
        for i in 0..4 {
            r_star[(i, i)] += 0.25;
        }
        let lf = LayeredFactor::new(&g, &r_star).unwrap();
        let v = assemble_v(&g, &r, 0.25);
        let dense = Cholesky::new(v).unwrap();
        let b = DMatrix::from_fn(12, 2, |i, j| (i + j) as f64 * 0.1);
        assert_abs_diff_eq!((lf.solve_mat(&b) - dense.solve(&b)).norm(), 0.0, epsilon = 1e-10);
    }

    #[test]
    fn day_gram_matches_explicit_z_contraction() {
        let (g, r_star, v) = toy_layered();
        let lf = LayeredFactor::new(&g, &r_star).unwrap();
        let dense = Cholesky::new(v).unwrap();
        let mut z = DMatrix::zeros(12, 3);
        for day in 0..3 {
            for per in 0..4 {
                z[(day * 4 + per, day)] = 1.0;
            }
        }
        let explicit = z.tr_mul(&dense.solve(&z));
        assert_abs_diff_eq!((lf.day_gram() - explicit).norm(), 0.0, epsilon = 1e-9);
    }

    /// Build a small layered regression problem with a hint-compatible design.
    fn small_layered_problem() -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>, LayeredXHints) {
        let d = 6;
        let k = 3;
        let n = d * k;
        // Day-level columns: two "weekday" indicators; profiles: one group
        // over all days with periods 1..2 kept (period 3 dropped).
        let day_group: Vec<usize> = vec![0; d];
        let mut x = DMatrix::zeros(n, 4);
        for day in 0..d {
            let wd = day % 2;
            for per in 0..k {
                x[(day * k + per, wd)] = 1.0;
                if per < 2 {
                    x[(day * k + per, 2 + per)] = 1.0;
                }
            }
        }
        let hints = LayeredXHints {
            day_cols: vec![0, 1],
            profile_cols: vec![
                ProfileCol { col: 2, group: 0, period: 0 },
                ProfileCol { col: 3, group: 0, period: 1 },
            ],
            day_group,
            n_groups: 1,
        };
        let gaps = DMatrix::from_fn(d, d, |i, j| (i as f64 - j as f64).abs());
        let g = ar1_kernel(0.5, 0.55, &gaps).unwrap();
        // Deterministic pseudo-data.
        let y = DVector::from_fn(n, |i, _| {
            2.0 + (i as f64 * 0.7).sin() + 0.3 * ((i / k) as f64).cos()
        });
        (y, x, g, hints)
    }

    #[test]
    fn fast_engine_matches_generic_objective() {
        let (y, x, g, hints) = small_layered_problem();
        let logdet_xtx = {
            let xtx = symmetrize(x.tr_mul(&x));
            let c = Cholesky::new(xtx).unwrap();
            2.0 * c.l_dirty().diagonal().iter().map(|v| v.ln()).sum::<f64>()
        };
        for objective in [Objective::Reml, Objective::Ml] {
            let generic_model = CovModel::Layered {
                g: g.clone(),
                k: 3,
                intra: IntraKind::Ar1,
                sigma2: Sigma2Mode::Fixed(0.25),
                hints: None,
            };
            let mut fast = FastLayeredEngine::new(
                &y,
                &x,
                &g,
                3,
                IntraKind::Ar1,
                Sigma2Mode::Fixed(0.25),
                &hints,
                objective,
                logdet_xtx,
            )
            .expect("hints verify");
            let mut gen = GenericEngine {
                y: &y,
                x: &x,
                model: &generic_model,
                objective,
                logdet_xtx,
            };
            for theta in [[0.8, 0.3], [1.5, -0.4], [0.2, 0.7]] {
                assert_abs_diff_eq!(fast.eval(&theta), gen.eval(&theta), epsilon = 1e-7);
            }
        }
    }

    #[test]
    fn fast_engine_rejects_wrong_hints() {
        let (y, x, g, mut hints) = small_layered_problem();
        hints.profile_cols[0].period = 2; // does not match the design
        assert!(FastLayeredEngine::new(
            &y,
            &x,
            &g,
            3,
            IntraKind::Ar1,
            Sigma2Mode::Fixed(0.25),
            &hints,
            Objective::Reml,
            0.0,
        )
        .is_none());
    }

    #[test]
    fn reml_objective_invariant_to_design_reparameterization() {
        let (y, x, g, _) = small_layered_problem();
        // Mix columns with a fixed full-rank matrix.
        let t = DMatrix::from_row_slice(
            4,
            4,
            &[
                1.0, 0.3, -0.2, 0.5, //
                0.0, 1.2, 0.4, -0.3, //
                0.0, 0.0, 0.9, 0.7, //
                0.2, -0.1, 0.0, 1.1,
            ],
        );
        let xt = &x * &t;
        let model = |_hints| CovModel::Layered {
            g: g.clone(),
            k: 3,
            intra: IntraKind::Ar1,
            sigma2: Sigma2Mode::Fixed(0.25),
            hints: None,
        };
        let opts = GlsOptions::new(Objective::Reml, vec![0.8, 0.3]);
        let f1 = fit_gls(&y, &x, &model(()), &opts).unwrap();
        let f2 = fit_gls(&y, &xt, &model(()), &opts).unwrap();
        assert_abs_diff_eq!(f1.loglik, f2.loglik, epsilon = 1e-6);
        assert_abs_diff_eq!(f1.theta[0], f2.theta[0], epsilon = 1e-4);
        assert_abs_diff_eq!(f1.theta[1], f2.theta[1], epsilon = 1e-4);
    }

    #[test]
    fn iid_fit_recovers_sample_variance_under_reml() {
        // One-column design, V = s * I: REML variance equals the unbiased
        // sample variance.
        let y = DVector::from_vec(vec![1.0, 3.0, 2.0, 5.0, 4.0, 2.5, 3.5, 0.5]);
        let x = DMatrix::repeat(8, 1, 1.0);
        let model = CovModel::DenseFn {
            params: vec![desc(ParamName::Sigma2, ParamKind::Variance)],
            build: Box::new(|t| DMatrix::identity(8, 8) * t[0]),
        };
        let fit = fit_gls(&y, &x, &model, &GlsOptions::new(Objective::Reml, vec![1.0])).unwrap();
        let mean = y.sum() / 8.0;
        let s2 = y.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 7.0;
        assert!(fit.converged);
        // Objective-based stopping leaves ~1e-3 relative slack in theta.
        assert!((fit.theta[0] / s2 - 1.0).abs() < 5e-3);
        assert_abs_diff_eq!(fit.beta[0], mean, epsilon = 1e-8);
        assert!(!fit.boundary);
    }

    #[test]
    fn boundary_warning_fires_near_correlation_endpoint() {
        // Perfectly correlated day pairs push rho toward 1.
        let d = 12;
        let gaps = DMatrix::from_fn(d, d, |i, j| (i as f64 - j as f64).abs());
        let mut y = DVector::zeros(d);
        for i in 0..d {
            y[i] = if i % 2 == 0 { 1.0 } else { -1.0 } + 0.05 * (i as f64 / 2.0).floor();
        }
        let x = DMatrix::repeat(d, 1, 1.0);
        let model = CovModel::DayLevelAr1 { gaps };
        let fit = fit_gls(
            &y,
            &x,
            &model,
            &GlsOptions::new(Objective::Reml, vec![1.0, -0.5, 0.01]),
        );
        if let Ok(f) = fit {
            // The AR(1) correlation runs to the boundary for this alternating
            // pattern, and the flag reports it.
            assert!(f.boundary || f.theta[1].abs() < 0.999);
        }
    }
}
