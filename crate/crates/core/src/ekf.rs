//! Error-state Kalman machinery: prediction, Joseph-form update,
//! observation stacking, and chi-square innovation gating.
//!
//! The update keeps the covariance symmetric positive semidefinite by
//! construction (Joseph form), which matters under the very small
//! measurement noise of stop-line observations. Innovation covariance
//! inversion goes through Cholesky; failure surfaces as a rejected
//! update instead of a silent pseudo-inverse.

use nalgebra::{DMatrix, DVector, OMatrix, SMatrix, U15};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

use crate::ins::{ErrorState15, STATE_DIM};

pub type StateMatrix = SMatrix<f64, STATE_DIM, STATE_DIM>;
/// Observation matrix with a run-time number of rows.
pub type ObsMatrix = OMatrix<f64, nalgebra::Dyn, U15>;

/// Default gating tail probability for V2V rows.
pub const DEFAULT_GATE_ALPHA: f64 = 0.001;

#[derive(Debug, Error)]
pub enum FilterError {
    #[error(
        "observation dimensions inconsistent: z {z}, H {h_rows}x{h_cols}, R {r_rows}x{r_cols}"
    )]
    Dimensions {
        z: usize,
        h_rows: usize,
        h_cols: usize,
        r_rows: usize,
        r_cols: usize,
    },
    #[error("observation noise not symmetric PSD")]
    BadNoise,
    #[error("innovation covariance singular or ill-conditioned; update rejected")]
    UpdateRejected { innovation: DVector<f64> },
    #[error("process noise not symmetric")]
    BadProcessNoise,
    #[error("cannot stack an empty observation list")]
    EmptyStack,
}

/// Which observation equation a block of rows came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObservationKind {
    /// GNSS self-positioning rows.
    Sp,
    /// Stop-line-aided self-positioning rows.
    SpSl,
    /// A linearized inter-vehicle range row.
    V2v,
    /// Row-concatenation of several parts.
    Stacked,
}

impl std::fmt::Display for ObservationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ObservationKind::Sp => "sp",
            ObservationKind::SpSl => "sp_sl",
            ObservationKind::V2v => "v2v",
            ObservationKind::Stacked => "stacked",
        };
        f.write_str(s)
    }
}

/// A linear(ized) observation z = H x + v, v ~ N(0, R).
#[derive(Debug, Clone)]
pub struct Observation {
    pub z: DVector<f64>,
    pub h: ObsMatrix,
    pub r: DMatrix<f64>,
    pub kind: ObservationKind,
}

impl Observation {
    pub fn new(
        z: DVector<f64>,
        h: ObsMatrix,
        r: DMatrix<f64>,
        kind: ObservationKind,
    ) -> Result<Self, FilterError> {
        let m = z.len();
        if h.nrows() != m || r.nrows() != m || r.ncols() != m {
            return Err(FilterError::Dimensions {
                z: m,
                h_rows: h.nrows(),
                h_cols: h.ncols(),
                r_rows: r.nrows(),
                r_cols: r.ncols(),
            });
        }
        for i in 0..m {
            for j in (i + 1)..m {
                if (r[(i, j)] - r[(j, i)]).abs() > 1e-9 {
                    return Err(FilterError::BadNoise);
                }
            }
            if r[(i, i)] < -1e-12 {
                return Err(FilterError::BadNoise);
            }
        }
        Ok(Self { z, h, r, kind })
    }

    pub fn rows(&self) -> usize {
        self.z.len()
    }
}

/// Filter state: error estimate plus covariance.
#[derive(Debug, Clone)]
pub struct FilterState {
    pub x: ErrorState15,
    pub p: StateMatrix,
    pub timestamp: f64,
}

impl FilterState {
    pub fn new(x: ErrorState15, p: StateMatrix, timestamp: f64) -> Self {
        Self { x, p, timestamp }
    }
}

fn symmetrize(m: &mut StateMatrix) {
    let t = m.transpose();
    *m = (*m + t) * 0.5;
}

/// One-step prediction: x' = F x, P' = F P F^T + Q.
pub fn predict(fs: &FilterState, f: &StateMatrix, q: &StateMatrix) -> FilterState {
    debug_assert!((q - q.transpose()).norm() <= 1e-9 * (1.0 + q.norm()));
    let x = ErrorState15::from(f * fs.x.0);
    let mut p = f * fs.p * f.transpose() + q;
    symmetrize(&mut p);
    FilterState {
        x,
        p,
        timestamp: fs.timestamp,
    }
}

/// Joseph-form measurement update.
///
/// K = P H^T S^-1 with S = H P H^T + R (Cholesky), then
/// P+ = (I - K H) P (I - K H)^T + K R K^T. A singular or
/// ill-conditioned S rejects the update, carrying the innovation out
/// for diagnostics.
pub fn update(fs: &FilterState, obs: &Observation) -> Result<FilterState, FilterError> {
    let innovation = &obs.z - &obs.h * fs.x.0;
    let s = &obs.h * fs.p * obs.h.transpose() + &obs.r;

    let chol = match s.clone().cholesky() {
        Some(c) => c,
        None => return Err(FilterError::UpdateRejected { innovation }),
    };
    // Condition estimate from the Cholesky diagonal.
    let (mut dmin, mut dmax) = (f64::INFINITY, 0.0f64);
    for i in 0..s.nrows() {
        let d = chol.l_dirty()[(i, i)];
        dmin = dmin.min(d);
        dmax = dmax.max(d);
    }
    if !(dmin > 0.0) || (dmax / dmin).powi(2) > 1e12 {
        return Err(FilterError::UpdateRejected { innovation });
    }

    // K^T = S^-1 H P (P symmetric).
    let kt = chol.solve(&(&obs.h * fs.p));
    let k = kt.transpose();

    let x = ErrorState15::from(fs.x.0 + &k * &innovation);
    let ikh = StateMatrix::identity() - &k * &obs.h;
    let mut p = ikh * fs.p * ikh.transpose() + &k * &obs.r * k.transpose();
    symmetrize(&mut p);
    Ok(FilterState {
        x,
        p,
        timestamp: fs.timestamp,
    })
}

/// Row-concatenate observations; noises are independent across parts,
/// so R is block-diagonal.
pub fn stack(parts: &[Observation]) -> Result<Observation, FilterError> {
    if parts.is_empty() {
        return Err(FilterError::EmptyStack);
    }
    let m: usize = parts.iter().map(|o| o.rows()).sum();
    let mut z = DVector::zeros(m);
    let mut h = ObsMatrix::zeros(m);
    let mut r = DMatrix::zeros(m, m);
    let mut row = 0;
    for part in parts {
        let n = part.rows();
        z.rows_mut(row, n).copy_from(&part.z);
        h.view_mut((row, 0), (n, STATE_DIM)).copy_from(&part.h);
        r.view_mut((row, row), (n, n)).copy_from(&part.r);
        row += n;
    }
    Observation::new(z, h, r, ObservationKind::Stacked)
}

/// Chi-square quantile for `dof` degrees of freedom at probability `p`.
pub fn chi_square_quantile(dof: usize, p: f64) -> f64 {
    if p <= 0.0 {
        return 0.0;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    ChiSquared::new(dof as f64).expect("dof > 0").inverse_cdf(p)
}

/// Mahalanobis gate: accept iff d^2 = y^T S^-1 y is below the
/// chi-square quantile at 1 - alpha for dim(y) degrees of freedom.
pub fn gate(innovation: &DVector<f64>, s: &DMatrix<f64>, alpha: f64) -> bool {
    let m = innovation.len();
    debug_assert_eq!(s.nrows(), m);
    let chol = match s.clone().cholesky() {
        Some(c) => c,
        None => return false,
    };
    let d2 = (innovation.transpose() * chol.solve(innovation))[(0, 0)];
    d2 <= chi_square_quantile(m, 1.0 - alpha)
}
