//! Confidence sets built on gradient features.
//!
//! The precision matrix is `V_t = Σ_s u_s u_sᵀ + (λ/κ_μ) I`, where each `u_s`
//! is an already-scaled feature (a duel difference `φ(x_{s,1}) − φ(x_{s,2})`
//! or a single-arm feature `φ(x_s)`, times `1/√m` in theory mode). Widths are
//! `σ²(u) = (λ/κ_μ) · uᵀ V⁻¹ u`.
//!
//! Two exact representations are provided:
//!
//! * [`DensePrecision`] keeps `V` and `V⁻¹` as p×p matrices and applies the
//!   Sherman-Morrison identity on every update. Best when `p` is small.
//! * [`LowRankPrecision`] keeps the `n` update vectors and the Cholesky
//!   factor of the n×n matrix `(λ/κ_μ) I + U Uᵀ`, and evaluates
//!   `uᵀV⁻¹u = (‖u‖² − ‖L⁻¹ U u‖²) / (λ/κ_μ)` through the Woodbury identity.
//!   Best when `p` exceeds the number of updates, as with the reward network.
//!
//! [`Precision`] dispatches between them.

use std::sync::Mutex;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, ShapeBuilder};
use serde::{Deserialize, Serialize};

use crate::error::{check_dim, check_finite, Error, Result};
use crate::linalg::{self, norm_sq};

/// Quadratic forms below `-DEGENERACY_TOL` (relative to `‖u‖²/ridge`) are
/// numerical failures; values in `[-tol, 0)` are clamped to zero.
pub const DEGENERACY_TOL: f64 = 1e-12;

/// Updates between inverse-consistency probes of the dense backend.
const PROBE_EVERY: usize = 64;

fn validate_scalars(p: usize, lambda: f64, kappa: f64) -> Result<f64> {
    if p == 0 {
        return Err(Error::Config("precision dimension must be positive".into()));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("lambda must be positive, got {lambda}")));
    }
    if !(kappa > 0.0 && kappa.is_finite()) {
        return Err(Error::Config(format!("kappa_mu must be positive, got {kappa}")));
    }
    Ok(lambda / kappa)
}

fn clamp_quad(q: f64, u_norm_sq: f64, ridge: f64) -> Result<f64> {
    let tol = DEGENERACY_TOL * (u_norm_sq / ridge).max(1.0);
    if q >= 0.0 {
        Ok(q)
    } else if q >= -tol && q.is_finite() {
        Ok(0.0)
    } else {
        Err(Error::Degenerate { value: q })
    }
}

/// Dense `V` and `V⁻¹`.
#[derive(Debug, Clone)]
pub struct DensePrecision {
    v: Array2<f64>,
    v_inv: Array2<f64>,
    ridge: f64,
    count: usize,
    log_det_gain: f64,
    since_probe: usize,
}

impl DensePrecision {
    /// `V = (λ/κ_μ) I`, `V⁻¹ = (κ_μ/λ) I`.
    pub fn new(p: usize, lambda: f64, kappa: f64) -> Result<Self> {
        let ridge = validate_scalars(p, lambda, kappa)?;
        Ok(Self {
            v: Array2::eye(p) * ridge,
            v_inv: Array2::eye(p) / ridge,
            ridge,
            count: 0,
            log_det_gain: 0.0,
            since_probe: 0,
        })
    }

    /// Assembles `V` from scratch and inverts it densely.
    pub fn rebuild(features: ArrayView2<f64>, lambda: f64, kappa: f64) -> Result<Self> {
        let p = features.ncols();
        let ridge = validate_scalars(p, lambda, kappa)?;
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("feature matrix has non-finite entries".into()));
        }
        let mut v = features.t().dot(&features);
        for i in 0..p {
            v[[i, i]] += ridge;
        }
        let v = linalg::symmetrize(v);
        let v_inv = linalg::spd_inverse(&v.view())?;
        let log_det_gain = linalg::log_det_spd(&(&v / ridge).view())?;
        Ok(Self {
            v,
            v_inv,
            ridge,
            count: features.nrows(),
            log_det_gain,
            since_probe: 0,
        })
    }

    pub fn v(&self) -> &Array2<f64> {
        &self.v
    }

    pub fn v_inv(&self) -> &Array2<f64> {
        &self.v_inv
    }

    /// Rank-1 update `V ← V + u uᵀ` with the Sherman-Morrison inverse
    /// correction. Returns `uᵀ V_{old}⁻¹ u`.
    pub fn update(&mut self, u: &[f64]) -> Result<f64> {
        check_dim(self.v.nrows(), u.len())?;
        check_finite(u, "precision update")?;
        self.count += 1;
        if u.iter().all(|x| *x == 0.0) {
            return Ok(0.0);
        }
        let uv = ArrayView1::from(u);
        let w = self.v_inv.dot(&uv);
        let q = uv.dot(&w);
        let denom = 1.0 + q;
        let p = u.len();
        for i in 0..p {
            let wi = w[i] / denom;
            let ui = u[i];
            let vinv_row = self.v_inv.row_mut(i).into_slice().expect("contiguous");
            for (dst, wj) in vinv_row.iter_mut().zip(w.iter()) {
                *dst -= wi * wj;
            }
            let v_row = self.v.row_mut(i).into_slice().expect("contiguous");
            for (dst, uj) in v_row.iter_mut().zip(u) {
                *dst += ui * uj;
            }
        }
        self.log_det_gain += denom.ln();
        self.since_probe += 1;
        if self.since_probe >= PROBE_EVERY {
            self.since_probe = 0;
            if self.probe_error() > 1e-6 {
                self.v_inv = linalg::spd_inverse(&self.v.view())?;
            }
        }
        Ok(q)
    }

    /// `‖V (V⁻¹ z) − z‖_∞` for a fixed deterministic probe `z`.
    fn probe_error(&self) -> f64 {
        let p = self.v.nrows();
        let z = Array1::from_shape_fn(p, |i| ((i * 7 + 3) % 11) as f64 / 11.0 - 0.5);
        let back = self.v.dot(&self.v_inv.dot(&z));
        back.iter()
            .zip(z.iter())
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
    }

    /// `max |V V⁻¹ − I|`, a full O(p³) check.
    pub fn inverse_error(&self) -> f64 {
        let prod = self.v.dot(&self.v_inv);
        let mut err = 0.0f64;
        for ((i, j), v) in prod.indexed_iter() {
            let target = if i == j { 1.0 } else { 0.0 };
            err = err.max((v - target).abs());
        }
        err
    }

    fn quad(&self, u: &[f64]) -> Result<f64> {
        let uv = ArrayView1::from(u);
        let q = uv.dot(&self.v_inv.dot(&uv));
        clamp_quad(q, norm_sq(u), self.ridge)
    }
}

/// The most recent batch query and its solved projections `L⁻¹ U q`.
#[derive(Debug, Clone)]
struct QueryMemo {
    n: usize,
    queries: Array2<f64>,
    solved: Array2<f64>,
}

/// Update vectors plus the Cholesky factor of `ridge·I + U Uᵀ`.
#[derive(Debug)]
pub struct LowRankPrecision {
    p: usize,
    ridge: f64,
    count: usize,
    /// Stored non-zero update vectors, row-major n×p.
    rows: Vec<f64>,
    /// Lower Cholesky factor, row-major with row stride `stride`.
    factor: Vec<f64>,
    stride: usize,
    n: usize,
    log_det_gain: f64,
    /// An update equal to `±` a just-queried vector reuses its projection.
    memo: Mutex<Option<QueryMemo>>,
}

impl Clone for LowRankPrecision {
    fn clone(&self) -> Self {
        Self {
            p: self.p,
            ridge: self.ridge,
            count: self.count,
            rows: self.rows.clone(),
            factor: self.factor.clone(),
            stride: self.stride,
            n: self.n,
            log_det_gain: self.log_det_gain,
            memo: Mutex::new(None),
        }
    }
}

impl LowRankPrecision {
    pub fn new(p: usize, lambda: f64, kappa: f64) -> Result<Self> {
        let ridge = validate_scalars(p, lambda, kappa)?;
        Ok(Self {
            p,
            ridge,
            count: 0,
            rows: Vec::new(),
            factor: Vec::new(),
            stride: 0,
            n: 0,
            log_det_gain: 0.0,
            memo: Mutex::new(None),
        })
    }

    /// Rebuilds from a feature matrix (one update vector per row).
    pub fn rebuild(features: ArrayView2<f64>, lambda: f64, kappa: f64) -> Result<Self> {
        let p = features.ncols();
        let mut state = Self::new(p, lambda, kappa)?;
        state.reset_from(features)?;
        Ok(state)
    }

    /// Replaces the stored vectors by `features` and refactors.
    pub fn reset_from(&mut self, features: ArrayView2<f64>) -> Result<()> {
        check_dim(self.p, features.ncols())?;
        let mut rows = Vec::with_capacity(features.len());
        let mut n = 0;
        for row in features.rows() {
            let slice = row.to_vec();
            check_finite(&slice, "feature row")?;
            if slice.iter().any(|v| *v != 0.0) {
                rows.extend_from_slice(&slice);
                n += 1;
            }
        }
        let u = ArrayView2::from_shape((n, self.p), &rows[..]).expect("row matrix");
        let mut m = linalg::gram_rows(&u);
        for i in 0..n {
            m[[i, i]] += self.ridge;
        }
        linalg::cholesky_in_place(&mut m)?;
        let log_det_gain = linalg::log_det_from_factor(&m.view()) - n as f64 * self.ridge.ln();
        let stride = n.max(16).next_power_of_two();
        let mut factor = vec![0.0; stride * stride];
        for i in 0..n {
            factor[i * stride..i * stride + i + 1].copy_from_slice(&m.row(i).as_slice().expect("row")[..=i]);
        }
        self.rows = rows;
        self.factor = factor;
        self.stride = stride;
        self.n = n;
        self.count = features.nrows();
        self.log_det_gain = log_det_gain;
        *self.memo.get_mut().expect("memo lock") = None;
        Ok(())
    }

    fn stored(&self) -> ArrayView2<'_, f64> {
        ArrayView2::from_shape((self.n, self.p), &self.rows[..self.n * self.p]).expect("stored rows")
    }

    fn factor_view(&self) -> ArrayView2<'_, f64> {
        if self.n == 0 {
            return ArrayView2::from_shape((0, 0), &self.factor[..0]).expect("empty");
        }
        let len = (self.n - 1) * self.stride + self.n;
        ArrayView2::from_shape((self.n, self.n).strides((self.stride, 1)), &self.factor[..len])
            .expect("factor view")
    }

    fn grow(&mut self) {
        let new_stride = (self.stride * 2).max(16);
        let mut factor = vec![0.0; new_stride * new_stride];
        for i in 0..self.n {
            factor[i * new_stride..i * new_stride + i + 1]
                .copy_from_slice(&self.factor[i * self.stride..i * self.stride + i + 1]);
        }
        self.factor = factor;
        self.stride = new_stride;
    }

    /// Number of stored (non-zero) update vectors.
    pub fn rank(&self) -> usize {
        self.n
    }

    /// Appends `u` and extends the factor by one row. Returns
    /// `uᵀ V_{old}⁻¹ u`.
    pub fn update(&mut self, u: &[f64]) -> Result<f64> {
        check_dim(self.p, u.len())?;
        check_finite(u, "precision update")?;
        self.count += 1;
        let unorm = norm_sq(u);
        if unorm == 0.0 {
            return Ok(0.0);
        }
        let z = match self.memoised_projection(u) {
            Some(z) => z,
            None => {
                let mut z = self.stored().dot(&ArrayView1::from(u)).to_vec();
                linalg::solve_lower_in_place(&self.factor_view(), &mut z);
                z
            }
        };
        let zz = norm_sq(&z);
        let q = clamp_quad((unorm - zz) / self.ridge, unorm, self.ridge)?;
        let pivot_sq = self.ridge + unorm - zz;
        if !(pivot_sq > 0.0 && pivot_sq.is_finite()) {
            return Err(Error::Numerical(format!(
                "low-rank factor extension lost positivity ({pivot_sq:e})"
            )));
        }
        if self.n == self.stride {
            self.grow();
        }
        let row = self.n * self.stride;
        self.factor[row..row + self.n].copy_from_slice(&z);
        self.factor[row + self.n] = pivot_sq.sqrt();
        self.rows.extend_from_slice(u);
        self.n += 1;
        *self.memo.get_mut().expect("memo lock") = None;
        self.log_det_gain += (pivot_sq / self.ridge).ln();
        Ok(q)
    }

    /// `L⁻¹ U u` if `u` or `−u` was a row of the latest query.
    fn memoised_projection(&mut self, u: &[f64]) -> Option<Vec<f64>> {
        let memo = self.memo.get_mut().expect("memo lock").take()?;
        if memo.n != self.n {
            return None;
        }
        for (r, q) in memo.queries.rows().into_iter().enumerate() {
            if q.iter().zip(u).all(|(a, b)| a == b) {
                return Some(memo.solved.column(r).to_vec());
            }
            if q.iter().zip(u).all(|(a, b)| *a == -b) {
                return Some(memo.solved.column(r).iter().map(|v| -v).collect());
            }
        }
        None
    }

    /// `uᵀV⁻¹u` for every row of `queries`.
    fn quad_rows(&self, queries: ArrayView2<f64>) -> Result<Vec<f64>> {
        let k = queries.nrows();
        let norms: Vec<f64> = queries.rows().into_iter().map(|r| r.dot(&r)).collect();
        if self.n == 0 {
            return norms
                .iter()
                .map(|&q| clamp_quad(q / self.ridge, q, self.ridge))
                .collect();
        }
        let mut b = self.stored().dot(&queries.t());
        linalg::solve_lower_multi(&self.factor_view(), b.view_mut());
        if let Ok(mut memo) = self.memo.lock() {
            *memo = Some(QueryMemo {
                n: self.n,
                queries: queries.to_owned(),
                solved: b.clone(),
            });
        }
        (0..k)
            .map(|j| {
                let col = b.column(j);
                let zz = col.dot(&col);
                clamp_quad((norms[j] - zz) / self.ridge, norms[j], self.ridge)
            })
            .collect()
    }

    /// Materialises the equivalent dense state.
    pub fn to_dense(&self) -> Result<DensePrecision> {
        let mut dense = DensePrecision::rebuild(self.stored(), self.ridge, 1.0)?;
        dense.count = self.count;
        Ok(dense)
    }
}

/// Which representation a [`Precision`] uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PrecisionBackend {
    /// Dense when `p` is no larger than the expected number of updates.
    #[default]
    Auto,
    Dense,
    LowRank,
}

impl PrecisionBackend {
    pub fn resolve(self, p: usize, expected_updates: usize) -> PrecisionBackend {
        match self {
            PrecisionBackend::Auto if p <= expected_updates.max(64) => PrecisionBackend::Dense,
            PrecisionBackend::Auto => PrecisionBackend::LowRank,
            other => other,
        }
    }
}

/// The confidence-set state `V_t`, its inverse, and the feature scale.
#[derive(Debug, Clone)]
pub struct Precision {
    inner: Inner,
    feature_scale: f64,
}

#[derive(Debug, Clone)]
enum Inner {
    Dense(DensePrecision),
    LowRank(LowRankPrecision),
}

impl Precision {
    /// `V_0 = (λ/κ_μ) I`. `feature_scale` is applied to raw gradients by
    /// the `sigma_*` queries (1 in practical mode, `1/√m` in theory mode).
    pub fn new(
        p: usize,
        lambda: f64,
        kappa: f64,
        feature_scale: f64,
        backend: PrecisionBackend,
    ) -> Result<Self> {
        if !(feature_scale > 0.0 && feature_scale.is_finite()) {
            return Err(Error::Config(format!(
                "feature scale must be positive, got {feature_scale}"
            )));
        }
        let inner = match backend.resolve(p, 0) {
            PrecisionBackend::LowRank => Inner::LowRank(LowRankPrecision::new(p, lambda, kappa)?),
            _ => Inner::Dense(DensePrecision::new(p, lambda, kappa)?),
        };
        Ok(Self { inner, feature_scale })
    }

    /// Rebuilds from already-scaled update vectors (rows of `features`).
    pub fn rebuild(
        features: ArrayView2<f64>,
        lambda: f64,
        kappa: f64,
        feature_scale: f64,
        backend: PrecisionBackend,
    ) -> Result<Self> {
        let mut state = Self::new(features.ncols(), lambda, kappa, feature_scale, backend)?;
        state.reset_from(features)?;
        Ok(state)
    }

    /// Replaces the state by one assembled from `features`, keeping the
    /// backend and scalars.
    pub fn reset_from(&mut self, features: ArrayView2<f64>) -> Result<()> {
        let ridge = self.ridge();
        match &mut self.inner {
            Inner::Dense(d) => *d = DensePrecision::rebuild(features, ridge, 1.0)?,
            Inner::LowRank(l) => l.reset_from(features)?,
        }
        Ok(())
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.inner, Inner::Dense(_))
    }

    pub fn dim(&self) -> usize {
        match &self.inner {
            Inner::Dense(d) => d.v.nrows(),
            Inner::LowRank(l) => l.p,
        }
    }

    /// `λ/κ_μ`.
    pub fn ridge(&self) -> f64 {
        match &self.inner {
            Inner::Dense(d) => d.ridge,
            Inner::LowRank(l) => l.ridge,
        }
    }

    pub fn count(&self) -> usize {
        match &self.inner {
            Inner::Dense(d) => d.count,
            Inner::LowRank(l) => l.count,
        }
    }

    pub fn feature_scale(&self) -> f64 {
        self.feature_scale
    }

    /// `log det(V_t / ridge)`, accumulated as `Σ log(1 + u_sᵀ V_{s−1}⁻¹ u_s)`.
    pub fn log_det_gain(&self) -> f64 {
        match &self.inner {
            Inner::Dense(d) => d.log_det_gain,
            Inner::LowRank(l) => l.log_det_gain,
        }
    }

    /// `V ← V + u uᵀ` for an already-scaled `u`. Returns `uᵀ V_{old}⁻¹ u`.
    pub fn update(&mut self, u: &[f64]) -> Result<f64> {
        match &mut self.inner {
            Inner::Dense(d) => d.update(u),
            Inner::LowRank(l) => l.update(u),
        }
    }

    /// `uᵀ V⁻¹ u` for an already-scaled `u`.
    pub fn quad_form(&self, u: &[f64]) -> Result<f64> {
        check_dim(self.dim(), u.len())?;
        match &self.inner {
            Inner::Dense(d) => d.quad(u),
            Inner::LowRank(l) => {
                let view = ArrayView2::from_shape((1, u.len()), u).expect("row");
                Ok(l.quad_rows(view)?[0])
            }
        }
    }

    /// `uᵀ V⁻¹ u` for every row of `queries` (already scaled).
    pub fn quad_forms(&self, queries: ArrayView2<f64>) -> Result<Vec<f64>> {
        check_dim(self.dim(), queries.ncols())?;
        match &self.inner {
            Inner::Dense(d) => {
                let w = queries.dot(&d.v_inv);
                queries
                    .rows()
                    .into_iter()
                    .zip(w.rows())
                    .map(|(q, wq)| clamp_quad(q.dot(&wq), q.dot(&q), d.ridge))
                    .collect()
            }
            Inner::LowRank(l) => l.quad_rows(queries),
        }
    }

    /// `σ(x1, x2) = √((λ/κ_μ) · uᵀ V⁻¹ u)` with `u = (g1 − g2) · scale`.
    pub fn sigma_pair(&self, g1: &[f64], g2: &[f64]) -> Result<f64> {
        check_dim(self.dim(), g1.len())?;
        check_dim(self.dim(), g2.len())?;
        let u: Vec<f64> = g1
            .iter()
            .zip(g2)
            .map(|(a, b)| (a - b) * self.feature_scale)
            .collect();
        Ok((self.ridge() * self.quad_form(&u)?).sqrt())
    }

    /// `σ(x) = √((λ/κ_μ) · uᵀ V⁻¹ u)` with `u = g · scale`.
    pub fn sigma_single(&self, g: &[f64]) -> Result<f64> {
        check_dim(self.dim(), g.len())?;
        let u: Vec<f64> = g.iter().map(|a| a * self.feature_scale).collect();
        Ok((self.ridge() * self.quad_form(&u)?).sqrt())
    }

    /// `σ(x_i, x_anchor)` for every arm, given the K×p raw gradient matrix.
    pub fn sigmas_against(&self, gradients: ArrayView2<f64>, anchor: usize) -> Result<Vec<f64>> {
        check_dim(self.dim(), gradients.ncols())?;
        let base = gradients.row(anchor).to_owned();
        let mut diffs = gradients.to_owned();
        for mut row in diffs.rows_mut() {
            row -= &base;
            row *= self.feature_scale;
        }
        let ridge = self.ridge();
        Ok(self
            .quad_forms(diffs.view())?
            .into_iter()
            .map(|q| (ridge * q).sqrt())
            .collect())
    }

    /// `σ(x_i)` for every arm, given the K×p raw gradient matrix.
    pub fn sigmas_single(&self, gradients: ArrayView2<f64>) -> Result<Vec<f64>> {
        check_dim(self.dim(), gradients.ncols())?;
        let scaled = &gradients * self.feature_scale;
        let ridge = self.ridge();
        Ok(self
            .quad_forms(scaled.view())?
            .into_iter()
            .map(|q| (ridge * q).sqrt())
            .collect())
    }

    /// The dense view of this state, materialising it if necessary.
    pub fn to_dense(&self) -> Result<DensePrecision> {
        match &self.inner {
            Inner::Dense(d) => Ok(d.clone()),
            Inner::LowRank(l) => l.to_dense(),
        }
    }
}

/// How `ν` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NuMode {
    #[default]
    Fixed,
    Theoretical,
}

/// Scalars of the exploration scale `ν`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceConfig {
    pub nu_mode: NuMode,
    pub nu: f64,
    /// Norm bound `B` on the reward function in the NTK space.
    pub b: f64,
    pub delta: f64,
    pub lambda: f64,
    pub kappa: f64,
}

impl Default for ConfidenceConfig {
    fn default() -> Self {
        Self {
            nu_mode: NuMode::Fixed,
            nu: 1.0,
            b: 1.0,
            delta: 0.05,
            lambda: 1.0,
            kappa: 1.0,
        }
    }
}

impl ConfidenceConfig {
    pub fn validate(&self) -> Result<()> {
        match self.nu_mode {
            NuMode::Fixed if !(self.nu >= 0.0 && self.nu.is_finite()) => {
                Err(Error::Config(format!("nu must be non-negative, got {}", self.nu)))
            }
            NuMode::Theoretical if !(self.delta > 0.0 && self.delta < 1.0) => Err(Error::Config(format!(
                "delta must lie in (0, 1), got {}",
                self.delta
            ))),
            NuMode::Theoretical if !(self.b >= 0.0 && self.b.is_finite()) => {
                Err(Error::Config(format!("B must be non-negative, got {}", self.b)))
            }
            _ => {
                validate_scalars(1, self.lambda, self.kappa)?;
                Ok(())
            }
        }
    }
}

/// `ν_T = (β_T + B √(λ/κ_μ) + 1) √(κ_μ/λ)` with
/// `β_T = (1/κ_μ) √(d̃ + 2 log(1/δ))`; fixed mode returns `cfg.nu`.
pub fn theoretical_nu(cfg: &ConfidenceConfig, d_tilde: f64) -> Result<f64> {
    cfg.validate()?;
    match cfg.nu_mode {
        NuMode::Fixed => Ok(cfg.nu),
        NuMode::Theoretical => {
            if !(d_tilde >= 0.0 && d_tilde.is_finite()) {
                return Err(Error::Input(format!(
                    "effective dimension must be >= 0, got {d_tilde}"
                )));
            }
            let beta = (d_tilde + 2.0 * (1.0 / cfg.delta).ln()).sqrt() / cfg.kappa;
            Ok((beta + cfg.b * (cfg.lambda / cfg.kappa).sqrt() + 1.0) * (cfg.kappa / cfg.lambda).sqrt())
        }
    }
}

/// Which features enter the effective dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EffectiveDimensionMode {
    /// All pairwise differences `φ(x_i) − φ(x_j)`, `i < j`, per round.
    Duel,
    /// Every arm feature `φ(x_i)` per round.
    Binary,
}

/// Collects the scaled vectors whose outer products enter `d̃`.
pub fn effective_dimension_features(
    groups: &[Array2<f64>],
    mode: EffectiveDimensionMode,
    feature_scale: f64,
) -> Result<Array2<f64>> {
    let p = match groups.first() {
        Some(g) => g.ncols(),
        None => return Ok(Array2::zeros((0, 0))),
    };
    let mut rows: Vec<f64> = Vec::new();
    let mut n = 0;
    for group in groups {
        check_dim(p, group.ncols())?;
        let k = group.nrows();
        match mode {
            EffectiveDimensionMode::Duel => {
                for i in 0..k {
                    for j in (i + 1)..k {
                        rows.extend(
                            group
                                .row(i)
                                .iter()
                                .zip(group.row(j))
                                .map(|(a, b)| (a - b) * feature_scale),
                        );
                        n += 1;
                    }
                }
            }
            EffectiveDimensionMode::Binary => {
                for i in 0..k {
                    rows.extend(group.row(i).iter().map(|a| a * feature_scale));
                    n += 1;
                }
            }
        }
    }
    Ok(Array2::from_shape_vec((n, p), rows).expect("feature rows"))
}

/// `d̃ = log det(I + (κ_μ/λ) Σ u uᵀ)` over the per-round feature groups.
///
/// Each group is a K×p matrix of raw arm features; duel mode uses all
/// pairwise differences, binary mode the features themselves, each times
/// `feature_scale`.
pub fn effective_dimension(
    groups: &[Array2<f64>],
    lambda: f64,
    kappa: f64,
    mode: EffectiveDimensionMode,
    feature_scale: f64,
) -> Result<f64> {
    let ridge = validate_scalars(1, lambda, kappa)?;
    let features = effective_dimension_features(groups, mode, feature_scale)?;
    log_det_identity_plus(features.view(), 1.0 / ridge)
}

/// `log det(I + c Σ_i u_i u_iᵀ)` via whichever of the two Gram forms is
/// smaller.
pub fn log_det_identity_plus(features: ArrayView2<f64>, c: f64) -> Result<f64> {
    let (n, p) = features.dim();
    if n == 0 || p == 0 {
        return Ok(0.0);
    }
    let mut gram = if n <= p {
        linalg::gram_rows(&features)
    } else {
        linalg::gram_rows(&features.t())
    };
    gram.mapv_inplace(|v| v * c);
    for i in 0..gram.nrows() {
        gram[[i, i]] += 1.0;
    }
    let value = linalg::log_det_spd(&gram.view())?;
    if !value.is_finite() {
        return Err(Error::Numerical(format!("effective dimension is {value}")));
    }
    Ok(value)
}

/// Running `d̃` over rounds, accumulating `Σ u uᵀ` densely.
#[derive(Debug, Clone)]
pub struct EffectiveDimensionTracker {
    sum: Array2<f64>,
    c: f64,
    mode: EffectiveDimensionMode,
    feature_scale: f64,
}

impl EffectiveDimensionTracker {
    pub fn new(
        p: usize,
        lambda: f64,
        kappa: f64,
        mode: EffectiveDimensionMode,
        feature_scale: f64,
    ) -> Result<Self> {
        let ridge = validate_scalars(p, lambda, kappa)?;
        Ok(Self {
            sum: Array2::zeros((p, p)),
            c: 1.0 / ridge,
            mode,
            feature_scale,
        })
    }

    /// Adds one round of raw arm features (K×p).
    pub fn add_round(&mut self, arm_features: &Array2<f64>) -> Result<()> {
        let feats =
            effective_dimension_features(std::slice::from_ref(arm_features), self.mode, self.feature_scale)?;
        check_dim(self.sum.nrows(), feats.ncols())?;
        self.sum += &feats.t().dot(&feats);
        Ok(())
    }

    pub fn value(&self) -> Result<f64> {
        let p = self.sum.nrows();
        let mut m = &self.sum * self.c;
        for i in 0..p {
            m[[i, i]] += 1.0;
        }
        linalg::log_det_spd(&m.view())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;
    use rand::Rng;

    fn random_matrix(n: usize, p: usize, seed: u64) -> Array2<f64> {
        let mut rng = seeded(seed);
        Array2::from_shape_fn((n, p), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn init_values() {
        let s = DensePrecision::new(3, 1.0, 1.0).unwrap();
        assert_eq!(s.v(), &Array2::<f64>::eye(3));
        assert_eq!(s.v().dot(s.v_inv()), Array2::<f64>::eye(3));
        let s = DensePrecision::new(2, 2.0, 0.5).unwrap();
        assert_eq!(s.v()[[0, 0]], 4.0);
        assert_eq!(s.v_inv()[[1, 1]], 0.25);
        assert!(DensePrecision::new(0, 1.0, 1.0).is_err());
        assert!(DensePrecision::new(2, 0.0, 1.0).is_err());
        assert!(DensePrecision::new(2, 1.0, -1.0).is_err());
    }

    #[test]
    fn zero_update_only_counts() {
        for backend in [PrecisionBackend::Dense, PrecisionBackend::LowRank] {
            let mut s = Precision::new(4, 1.0, 1.0, 1.0, backend).unwrap();
            let before = s.to_dense().unwrap();
            s.update(&[0.0; 4]).unwrap();
            assert_eq!(s.count(), 1);
            let after = s.to_dense().unwrap();
            assert_eq!(before.v(), after.v());
            assert_eq!(before.v_inv(), after.v_inv());
        }
    }

    #[test]
    fn update_errors() {
        for backend in [PrecisionBackend::Dense, PrecisionBackend::LowRank] {
            let mut s = Precision::new(3, 1.0, 1.0, 1.0, backend).unwrap();
            assert!(matches!(
                s.update(&[1.0, 2.0]),
                Err(Error::DimensionMismatch { .. })
            ));
            assert!(matches!(s.update(&[1.0, f64::NAN, 0.0]), Err(Error::Input(_))));
        }
    }

    #[test]
    fn repeated_vector_gain_shrinks() {
        for backend in [PrecisionBackend::Dense, PrecisionBackend::LowRank] {
            let mut s = Precision::new(5, 1.0, 1.0, 1.0, backend).unwrap();
            let u = [0.3, -0.2, 0.9, 0.0, 0.5];
            let first = s.update(&u).unwrap();
            let second = s.update(&u).unwrap();
            assert!(second < first);
        }
    }

    #[test]
    fn backends_agree() {
        let feats = random_matrix(40, 60, 3);
        let mut dense = Precision::new(60, 1.5, 0.5, 1.0, PrecisionBackend::Dense).unwrap();
        let mut low = Precision::new(60, 1.5, 0.5, 1.0, PrecisionBackend::LowRank).unwrap();
        for row in feats.rows() {
            let u = row.to_vec();
            let a = dense.update(&u).unwrap();
            let b = low.update(&u).unwrap();
            assert!((a - b).abs() < 1e-9 * (1.0 + a.abs()));
        }
        let queries = random_matrix(7, 60, 4);
        let qa = dense.quad_forms(queries.view()).unwrap();
        let qb = low.quad_forms(queries.view()).unwrap();
        for (a, b) in qa.iter().zip(&qb) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!((dense.log_det_gain() - low.log_det_gain()).abs() < 1e-8);
        let rebuilt = low.to_dense().unwrap();
        let err = (rebuilt.v_inv() - dense.to_dense().unwrap().v_inv())
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(err < 1e-9);
    }

    #[test]
    fn queried_update_matches_fresh_update() {
        let feats = random_matrix(30, 25, 8);
        let mut cached = Precision::new(25, 1.0, 1.0, 1.0, PrecisionBackend::LowRank).unwrap();
        let mut fresh = cached.clone();
        for (i, row) in feats.rows().into_iter().enumerate() {
            let u = row.to_vec();
            let queries = random_matrix(3, 25, 100 + i as u64);
            let mut stacked = queries.clone();
            stacked
                .row_mut(1)
                .assign(&row.mapv(|v| if i % 2 == 0 { v } else { -v }));
            cached.quad_forms(stacked.view()).unwrap();
            let a = cached.update(&u).unwrap();
            let b = fresh.update(&u).unwrap();
            assert!((a - b).abs() < 1e-12 * (1.0 + b.abs()));
        }
        let q = random_matrix(4, 25, 9);
        let qa = cached.quad_forms(q.view()).unwrap();
        let qb = fresh.quad_forms(q.view()).unwrap();
        for (a, b) in qa.iter().zip(&qb) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn low_rank_grows_past_initial_capacity() {
        let feats = random_matrix(70, 20, 5);
        let mut low = LowRankPrecision::new(20, 1.0, 1.0).unwrap();
        for row in feats.rows() {
            low.update(&row.to_vec()).unwrap();
        }
        assert_eq!(low.rank(), 70);
        let rebuilt = LowRankPrecision::rebuild(feats.view(), 1.0, 1.0).unwrap();
        let q = random_matrix(3, 20, 6);
        let a = low.quad_rows(q.view()).unwrap();
        let b = rebuilt.quad_rows(q.view()).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-10);
        }
    }

    #[test]
    fn sigma_identities_at_start() {
        let s = Precision::new(3, 2.0, 2.0, 1.0, PrecisionBackend::Dense).unwrap();
        let g1 = [1.0, 2.0, 3.0];
        let g2 = [0.5, 2.0, 1.0];
        assert_eq!(s.sigma_pair(&g1, &g1).unwrap(), 0.0);
        let expect = (0.25f64 + 4.0).sqrt();
        assert!((s.sigma_pair(&g1, &g2).unwrap() - expect).abs() < 1e-15);
        assert_eq!(s.sigma_single(&[0.0; 3]).unwrap(), 0.0);
        assert!((s.sigma_single(&g1).unwrap() - 14f64.sqrt()).abs() < 1e-15);
        let scaled = Precision::new(3, 1.0, 1.0, 0.5, PrecisionBackend::LowRank).unwrap();
        assert!((scaled.sigma_single(&g1).unwrap() - 0.5 * 14f64.sqrt()).abs() < 1e-15);
    }

    #[test]
    fn sigmas_against_matches_pairwise() {
        let feats = random_matrix(30, 12, 8);
        let grads = random_matrix(5, 12, 9);
        for backend in [PrecisionBackend::Dense, PrecisionBackend::LowRank] {
            let s = Precision::rebuild(feats.view(), 1.0, 1.0, 0.7, backend).unwrap();
            let batch = s.sigmas_against(grads.view(), 2).unwrap();
            for i in 0..5 {
                let single = s
                    .sigma_pair(&grads.row(i).to_vec(), &grads.row(2).to_vec())
                    .unwrap();
                assert!((batch[i] - single).abs() < 1e-12);
            }
            assert_eq!(batch[2], 0.0);
            let singles = s.sigmas_single(grads.view()).unwrap();
            for i in 0..5 {
                assert!((singles[i] - s.sigma_single(&grads.row(i).to_vec()).unwrap()).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn degenerate_quadratic_is_an_error() {
        assert!(matches!(
            clamp_quad(-1e-3, 1.0, 1.0),
            Err(Error::Degenerate { .. })
        ));
        assert_eq!(clamp_quad(-1e-13, 1.0, 1.0).unwrap(), 0.0);
    }

    #[test]
    fn nu_plug_in() {
        let cfg = ConfidenceConfig {
            nu_mode: NuMode::Theoretical,
            b: 0.0,
            delta: (-0.5f64).exp(),
            ..Default::default()
        };
        assert!((theoretical_nu(&cfg, 0.0).unwrap() - 2.0).abs() < 1e-15);
        assert!(theoretical_nu(&cfg, 5.0).unwrap() > theoretical_nu(&cfg, 1.0).unwrap());
        let fixed = ConfidenceConfig {
            nu: 0.3,
            ..Default::default()
        };
        assert_eq!(theoretical_nu(&fixed, 123.0).unwrap(), 0.3);
        let bad = ConfidenceConfig { delta: 1.5, ..cfg };
        assert!(matches!(theoretical_nu(&bad, 0.0), Err(Error::Config(_))));
    }

    #[test]
    fn effective_dimension_basics() {
        assert_eq!(
            effective_dimension(&[], 1.0, 1.0, EffectiveDimensionMode::Duel, 1.0).unwrap(),
            0.0
        );
        // One binary feature with ‖u‖² = 1.
        let g = Array2::from_shape_vec((1, 2), vec![0.6, 0.8]).unwrap();
        let d = effective_dimension(&[g], 1.0, 1.0, EffectiveDimensionMode::Binary, 1.0).unwrap();
        assert!((d - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn tracker_is_monotone_and_matches_batch() {
        let mut tracker =
            EffectiveDimensionTracker::new(6, 1.0, 1.0, EffectiveDimensionMode::Duel, 1.0).unwrap();
        let mut groups = Vec::new();
        let mut last = 0.0;
        for r in 0..5 {
            let g = random_matrix(4, 6, 20 + r);
            tracker.add_round(&g).unwrap();
            groups.push(g);
            let now = tracker.value().unwrap();
            assert!(now >= last - 1e-12);
            last = now;
        }
        let batch = effective_dimension(&groups, 1.0, 1.0, EffectiveDimensionMode::Duel, 1.0).unwrap();
        assert!((batch - last).abs() < 1e-9);
    }
}
