//! Collaborative filtering by regularized alternating least squares.
//!
//! The loss is taken over observed entries only:
//!
//! ```text
//! L(P, Q) = Σ_{(i,j) observed} (r_ij − p_i · q_j)² + λ (‖P‖² + ‖Q‖²)
//! ```
//!
//! With one side fixed, `L` separates into independent ridge problems per
//! row of the other side, each solved exactly from its k × k normal
//! equations. Every half-sweep therefore cannot increase `L`.

use std::collections::HashSet;
use std::fmt;
use std::io::{Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::catalog::InteractionMatrix;
use crate::error::{Error, Result};
use crate::linalg::{cholesky, cholesky_solve, pinv_solve, Matrix};
use crate::ranking::{top_n, RankedItem, RankedList, Source};
use crate::scalar::{dot, Scalar};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AlsConfig<T> {
    pub latent_dim: usize,
    pub lambda: T,
    pub sweeps: usize,
    pub seed: u64,
    /// Stop once a full sweep improves the loss by less than this fraction.
    /// Zero disables early stopping.
    pub tol: T,
}

impl<T: Scalar> Default for AlsConfig<T> {
    fn default() -> Self {
        AlsConfig {
            latent_dim: 20,
            lambda: T::lit(0.1),
            sweeps: 15,
            seed: 0,
            tol: T::lit(1e-4),
        }
    }
}

impl<T: Scalar> AlsConfig<T> {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent dimension must be at least 1"));
        }
        if !(self.lambda >= T::zero()) || !self.lambda.is_finite() {
            return Err(Error::invalid("regularization must be a finite value >= 0"));
        }
        if self.sweeps == 0 {
            return Err(Error::invalid("ALS needs at least one sweep"));
        }
        if !(self.tol >= T::zero()) {
            return Err(Error::invalid("tolerance must be >= 0"));
        }
        Ok(())
    }
}

/// Sparse observed ratings, indexed both by row (user) and column (hotel).
#[derive(Debug, Clone, PartialEq)]
pub struct RatingMatrix<T> {
    n_users: usize,
    n_hotels: usize,
    row_ptr: Vec<usize>,
    row_idx: Vec<usize>,
    row_val: Vec<T>,
    col_ptr: Vec<usize>,
    col_idx: Vec<usize>,
    col_val: Vec<T>,
}

impl<T: Scalar> RatingMatrix<T> {
    /// Builds from `(user, hotel, value)` triplets; duplicate keys are
    /// rejected.
    pub fn from_triplets(n_users: usize, n_hotels: usize, mut entries: Vec<(usize, usize, T)>) -> Result<Self> {
        if entries.iter().any(|&(i, j, _)| i >= n_users || j >= n_hotels) {
            return Err(Error::invalid("rating entry outside matrix bounds"));
        }
        if entries.iter().any(|e| !e.2.is_finite()) {
            return Err(Error::data("rating entry is not finite"));
        }
        entries.sort_by(|a, b| (a.0, a.1).cmp(&(b.0, b.1)));
        if entries.windows(2).any(|w| (w[0].0, w[0].1) == (w[1].0, w[1].1)) {
            return Err(Error::invalid("duplicate rating entry"));
        }
        let mut row_ptr = vec![0; n_users + 1];
        let mut col_ptr = vec![0; n_hotels + 1];
        for &(i, j, _) in &entries {
            row_ptr[i + 1] += 1;
            col_ptr[j + 1] += 1;
        }
        for i in 0..n_users {
            row_ptr[i + 1] += row_ptr[i];
        }
        for j in 0..n_hotels {
            col_ptr[j + 1] += col_ptr[j];
        }
        let mut col_idx = vec![0; entries.len()];
        let mut col_val = vec![T::zero(); entries.len()];
        let mut cursor = col_ptr.clone();
        for &(i, j, v) in &entries {
            col_idx[cursor[j]] = i;
            col_val[cursor[j]] = v;
            cursor[j] += 1;
        }
        Ok(RatingMatrix {
            n_users,
            n_hotels,
            row_ptr,
            row_idx: entries.iter().map(|e| e.1).collect(),
            row_val: entries.iter().map(|e| e.2).collect(),
            col_ptr,
            col_idx,
            col_val,
        })
    }

    /// Visit counts as ratings.
    pub fn from_interactions(r: &InteractionMatrix) -> Self {
        let entries = r.entries().map(|(i, j, c)| (i, j, T::from_count(c as usize))).collect();
        Self::from_triplets(r.n_users(), r.n_hotels(), entries).expect("interaction entries are valid")
    }

    pub fn n_users(&self) -> usize {
        self.n_users
    }

    pub fn n_hotels(&self) -> usize {
        self.n_hotels
    }

    pub fn nnz(&self) -> usize {
        self.row_idx.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[T]) {
        let r = self.row_ptr[i]..self.row_ptr[i + 1];
        (&self.row_idx[r.clone()], &self.row_val[r])
    }

    pub fn column(&self, j: usize) -> (&[usize], &[T]) {
        let r = self.col_ptr[j]..self.col_ptr[j + 1];
        (&self.col_idx[r.clone()], &self.col_val[r])
    }

    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, T)> + '_ {
        (0..self.n_users).flat_map(move |i| {
            let (js, vs) = self.row(i);
            js.iter().zip(vs).map(move |(&j, &v)| (i, j, v))
        })
    }
}

/// User factors `P` (m × k) and hotel factors `Q` (k × u).
///
/// `Q` is held hotel-major (row `j` is `q_j`) for contiguous access.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorModel<T> {
    pub user_factors: Matrix<T>,
    pub hotel_factors: Matrix<T>,
    pub config: AlsConfig<T>,
}

impl<T: Scalar> FactorModel<T> {
    pub fn n_users(&self) -> usize {
        self.user_factors.rows()
    }

    pub fn n_hotels(&self) -> usize {
        self.hotel_factors.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.user_factors.cols()
    }

    pub fn predict(&self, i: usize, j: usize) -> T {
        dot(self.user_factors.row(i), self.hotel_factors.row(j))
    }

    /// `p_i · Q` over all hotels.
    pub fn predict_row(&self, i: usize) -> Vec<T> {
        let p = self.user_factors.row(i);
        (0..self.n_hotels()).map(|j| dot(p, self.hotel_factors.row(j))).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.user_factors.is_finite() && self.hotel_factors.is_finite()
    }

    /// `‖P‖² + ‖Q‖²`.
    pub fn norm_sq(&self) -> T {
        self.user_factors.frobenius_sq() + self.hotel_factors.frobenius_sq()
    }

    fn check_shape(&self, r: &RatingMatrix<T>) -> Result<()> {
        if self.n_users() != r.n_users() || self.n_hotels() != r.n_hotels() {
            return Err(Error::invalid(format!(
                "model is {}x{} but ratings are {}x{}",
                self.n_users(),
                self.n_hotels(),
                r.n_users(),
                r.n_hotels()
            )));
        }
        Ok(())
    }
}

/// Entries i.i.d. uniform in `[0, 1/√k)`, users first, from `config.seed`.
pub fn init_factors<T: Scalar>(m: usize, u: usize, config: &AlsConfig<T>) -> Result<FactorModel<T>> {
    config.validate()?;
    if m == 0 || u == 0 {
        return Err(Error::invalid("factor model needs at least one user and one hotel"));
    }
    let k = config.latent_dim;
    let scale = 1.0 / (k as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut draw = |_: usize, _: usize| T::lit(rng.gen::<f64>() * scale);
    let user_factors = Matrix::from_fn(m, k, &mut draw);
    let hotel_factors = Matrix::from_fn(u, k, &mut draw);
    Ok(FactorModel {
        user_factors,
        hotel_factors,
        config: *config,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Users,
    Hotels,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::Users => "users",
            Side::Hotels => "hotels",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SweepDiagnostics {
    /// Rows whose normal equations were singular and fell back to the
    /// pseudo-inverse.
    pub pinv_rows: usize,
}

/// Ridge solution for one row: `(λI + Σ f fᵀ) x = Σ r f` over the row's
/// observed entries.
fn solve_row<T: Scalar>(fixed: &Matrix<T>, idx: &[usize], val: &[T], lambda: T) -> Result<(Vec<T>, bool)> {
    let k = fixed.cols();
    let mut a = Matrix::zeros(k, k);
    let mut b = vec![T::zero(); k];
    for (&j, &r) in idx.iter().zip(val) {
        let f = fixed.row(j);
        for p in 0..k {
            b[p] = b[p] + r * f[p];
            for q in p..k {
                a[(p, q)] = a[(p, q)] + f[p] * f[q];
            }
        }
    }
    for p in 0..k {
        a[(p, p)] = a[(p, p)] + lambda;
        for q in 0..p {
            a[(p, q)] = a[(q, p)];
        }
    }
    match cholesky(&a) {
        Some(l) => Ok((cholesky_solve(&l, &b), false)),
        None => Ok((pinv_solve(&a, &b)?, true)),
    }
}

/// One half-sweep: re-solves every row of `side` with the other side fixed.
/// Rows without observations keep their current factor.
pub fn als_sweep<T: Scalar>(model: &mut FactorModel<T>, r: &RatingMatrix<T>, side: Side) -> Result<SweepDiagnostics> {
    model.check_shape(r)?;
    let lambda = model.config.lambda;
    let (target, fixed, n) = match side {
        Side::Users => (&mut model.user_factors, &model.hotel_factors, r.n_users()),
        Side::Hotels => (&mut model.hotel_factors, &model.user_factors, r.n_hotels()),
    };
    let solved: Vec<Option<(Vec<T>, bool)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let (idx, val) = match side {
                Side::Users => r.row(i),
                Side::Hotels => r.column(i),
            };
            if idx.is_empty() {
                Ok(None)
            } else {
                solve_row(fixed, idx, val, lambda).map(Some)
            }
        })
        .collect::<Result<_>>()?;
    let mut diag = SweepDiagnostics::default();
    for (i, s) in solved.into_iter().enumerate() {
        if let Some((x, pinv)) = s {
            target.row_mut(i).copy_from_slice(&x);
            diag.pinv_rows += pinv as usize;
        }
    }
    Ok(diag)
}

/// Regularized observed-entry loss.
pub fn loss<T: Scalar>(model: &FactorModel<T>, r: &RatingMatrix<T>) -> T {
    let fit: T = r
        .entries()
        .map(|(i, j, v)| {
            let e = v - model.predict(i, j);
            e * e
        })
        .sum();
    fit + model.config.lambda * model.norm_sq()
}

/// Root-mean-square error over observed entries, without regularization.
pub fn observed_rmse<T: Scalar>(model: &FactorModel<T>, r: &RatingMatrix<T>) -> T {
    if r.nnz() == 0 {
        return T::zero();
    }
    let sse: T = r
        .entries()
        .map(|(i, j, v)| {
            let e = v - model.predict(i, j);
            e * e
        })
        .sum();
    (sse / T::from_count(r.nnz())).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossPoint<T> {
    /// 0 for the initial model, then 1-based sweep number.
    pub sweep: usize,
    /// `None` for the initial model.
    pub side: Option<Side>,
    pub loss: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitResult<T> {
    pub model: FactorModel<T>,
    pub trace: Vec<LossPoint<T>>,
    pub pinv_rows: usize,
    pub stopped_early: bool,
}

/// Relative slack allowed when checking that a half-sweep did not raise
/// the loss.
pub const MONOTONE_SLACK: f64 = 1e-9;

/// Alternates user and hotel half-sweeps from [`init_factors`].
pub fn fit<T: Scalar>(r: &RatingMatrix<T>, config: &AlsConfig<T>) -> Result<FitResult<T>> {
    config.validate()?;
    if r.nnz() == 0 {
        return Err(Error::data("cannot factorize a matrix with no observations"));
    }
    let mut model = init_factors(r.n_users(), r.n_hotels(), config)?;
    let mut trace = vec![LossPoint {
        sweep: 0,
        side: None,
        loss: loss(&model, r),
    }];
    let mut pinv_rows = 0;
    let mut stopped_early = false;
    let slack = T::lit(MONOTONE_SLACK);
    for sweep in 1..=config.sweeps {
        let before_sweep = trace.last().expect("trace non-empty").loss;
        for side in [Side::Users, Side::Hotels] {
            pinv_rows += als_sweep(&mut model, r, side)?.pinv_rows;
            let prev = trace.last().expect("trace non-empty").loss;
            let cur = loss(&model, r);
            if !cur.is_finite() || !model.is_finite() {
                return Err(Error::numerical(format!(
                    "ALS loss became {cur} at sweep {sweep} ({side}); previous loss {prev}"
                )));
            }
            if cur > prev + slack * prev.abs().max(T::one()) {
                return Err(Error::numerical(format!(
                    "ALS loss increased from {prev} to {cur} at sweep {sweep} ({side})"
                )));
            }
            trace.push(LossPoint {
                sweep,
                side: Some(side),
                loss: cur,
            });
        }
        let after = trace.last().expect("trace non-empty").loss;
        if config.tol > T::zero() && before_sweep > T::zero() && (before_sweep - after) / before_sweep < config.tol {
            stopped_early = sweep < config.sweeps;
            break;
        }
    }
    Ok(FitResult {
        model,
        trace,
        pinv_rows,
        stopped_early,
    })
}

/// Scores every hotel for a user, min–max normalizes the row to `[0, 1]`
/// (a constant row maps to 0), drops `exclude` and returns the top `n`.
/// Ranking uses the raw predictions with hotel-index tie-break.
pub fn recommend_cf<T: Scalar>(
    model: &FactorModel<T>,
    ids: &InteractionMatrix,
    user_id: &str,
    exclude: &HashSet<usize>,
    n: usize,
) -> Result<RankedList<T>> {
    if model.n_users() != ids.n_users() || model.n_hotels() != ids.n_hotels() {
        return Err(Error::invalid("factor model does not match the interaction matrix"));
    }
    let i = ids
        .user_index(user_id)
        .ok_or_else(|| Error::data(format!("unknown user '{user_id}'")))?;
    let raw = model.predict_row(i);
    let normalized = min_max(&raw);
    let candidates: Vec<(usize, T)> = raw
        .iter()
        .enumerate()
        .filter(|(j, _)| !exclude.contains(j))
        .map(|(j, &s)| (j, s))
        .collect();
    let items = top_n(candidates, n)
        .into_iter()
        .map(|(j, _)| RankedItem {
            hotel_code: ids.hotel_codes()[j].clone(),
            score: normalized[j],
            source: Source::Cf,
        })
        .collect();
    Ok(RankedList {
        user_id: user_id.to_string(),
        items,
    })
}

pub fn min_max<T: Scalar>(row: &[T]) -> Vec<T> {
    let lo = row.iter().copied().fold(T::infinity(), T::min);
    let hi = row.iter().copied().fold(T::neg_infinity(), T::max);
    let span = hi - lo;
    row.iter()
        .map(|&x| if span > T::zero() { (x - lo) / span } else { T::zero() })
        .collect()
}

const MODEL_MAGIC: &[u8; 4] = b"HRCF";
const MODEL_VERSION: u32 = 1;

/// Writes the model in little-endian binary:
///
/// ```text
/// offset  size      field
/// 0       4         magic "HRCF"
/// 4       4         u32 version (1)
/// 8       8         u64 m (users)
/// 16      8         u64 u (hotels)
/// 24      8         u64 k (latent dim)
/// 32      8         f64 lambda
/// 40      8         u64 seed
/// 48      8         u64 sweeps
/// 56      8         f64 tol
/// 64      8·m·k     P, f64 row-major m × k
/// …       8·k·u     Q, f64 row-major k × u
/// ```
pub fn write_model<T: Scalar, W: Write>(mut w: W, model: &FactorModel<T>) -> std::io::Result<()> {
    let c = &model.config;
    w.write_all(MODEL_MAGIC)?;
    w.write_all(&MODEL_VERSION.to_le_bytes())?;
    for v in [model.n_users(), model.n_hotels(), model.latent_dim()] {
        w.write_all(&(v as u64).to_le_bytes())?;
    }
    w.write_all(&c.lambda.as_f64().to_le_bytes())?;
    w.write_all(&c.seed.to_le_bytes())?;
    w.write_all(&(c.sweeps as u64).to_le_bytes())?;
    w.write_all(&c.tol.as_f64().to_le_bytes())?;
    for &x in model.user_factors.as_slice() {
        w.write_all(&x.as_f64().to_le_bytes())?;
    }
    for l in 0..model.latent_dim() {
        for j in 0..model.n_hotels() {
            w.write_all(&model.hotel_factors[(j, l)].as_f64().to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read_model<T: Scalar, R: Read>(mut r: R) -> Result<FactorModel<T>> {
    let io = |e: std::io::Error| Error::data(format!("truncated or unreadable factor model: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MODEL_MAGIC {
        return Err(Error::data("not a factor model file (bad magic)"));
    }
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io)?;
    if u32::from_le_bytes(b4) != MODEL_VERSION {
        return Err(Error::data("unsupported factor model version"));
    }
    let mut b8 = [0u8; 8];
    let mut next_u64 = |r: &mut R| -> Result<u64> {
        r.read_exact(&mut b8).map_err(io)?;
        Ok(u64::from_le_bytes(b8))
    };
    let m = next_u64(&mut r)? as usize;
    let u = next_u64(&mut r)? as usize;
    let k = next_u64(&mut r)? as usize;
    let lambda = f64::from_bits(next_u64(&mut r)?);
    let seed = next_u64(&mut r)?;
    let sweeps = next_u64(&mut r)? as usize;
    let tol = f64::from_bits(next_u64(&mut r)?);
    let mut read_f = |r: &mut R| -> Result<T> { next_u64(r).map(|b| T::lit(f64::from_bits(b))) };
    let mut p = Vec::with_capacity(m * k);
    for _ in 0..m * k {
        p.push(read_f(&mut r)?);
    }
    let mut q_t = Vec::with_capacity(k * u);
    for _ in 0..k * u {
        q_t.push(read_f(&mut r)?);
    }
    let user_factors = Matrix::from_row_major(m, k, p)?;
    let hotel_factors = Matrix::from_row_major(k, u, q_t)?.transpose();
    let config = AlsConfig {
        latent_dim: k,
        lambda: T::lit(lambda),
        sweeps,
        seed,
        tol: T::lit(tol),
    };
    config.validate().map_err(|e| Error::data(format!("factor model header: {e}")))?;
    let model = FactorModel {
        user_factors,
        hotel_factors,
        config,
    };
    if !model.is_finite() {
        return Err(Error::data("factor model contains non-finite entries"));
    }
    Ok(model)
}

pub fn write_loss_trace<T: Scalar, W: Write>(w: W, trace: &[LossPoint<T>]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    w.write_record(["sweep", "side", "loss"])?;
    for p in trace {
        let side = p.side.map_or_else(|| "init".to_string(), |s| s.to_string());
        w.write_record([p.sweep.to_string(), side, p.loss.as_f64().to_string()])?;
    }
    w.flush().map_err(|e| Error::io("<csv sink>", e))?;
    Ok(())
}
