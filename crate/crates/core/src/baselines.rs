//! Pilot-based two-stage reference pipeline: orthogonal pilots, LMMSE channel
//! estimation per block, the oracle LMMSE bound that uses the true transmitted
//! signal as pilot, and closed-form source decoding for linear encoders.

use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::channel::BlockFadingChannel;
use crate::encoder::Encoder;
use crate::linalg::ComplexMatrix;
use crate::priors::{GaussianPrior, ScorePrior};
use crate::{Error, Result};

/// `N_t × N_p` pilot block, transmitted identically in every fading block.
#[derive(Debug, Clone, PartialEq)]
pub struct PilotMatrix {
    x: ComplexMatrix,
}

impl PilotMatrix {
    pub fn matrix(&self) -> &ComplexMatrix {
        &self.x
    }

    pub fn pilots(&self) -> usize {
        self.x.cols()
    }

    /// The `N_t K × N_p` pilot signal over `k` blocks.
    pub fn stacked(&self, k: usize) -> ComplexMatrix {
        let n_t = self.x.rows();
        ComplexMatrix::from_fn(n_t * k, self.x.cols(), |r, c| self.x[(r % n_t, c)])
    }
}

/// Rows of the `N_p`-point DFT matrix scaled to per-entry power `P`
/// (row index taken modulo `N_p` when `N_t > N_p`).
pub fn make_pilots(n_t: usize, n_p: usize, power: f64) -> Result<PilotMatrix> {
    if n_t == 0 || n_p == 0 {
        return Err(Error::InvalidArgument(
            "pilot matrix needs N_t, N_p ≥ 1".into(),
        ));
    }
    if !(power > 0.0 && power.is_finite()) {
        return Err(Error::InvalidArgument(
            "pilot power must be positive".into(),
        ));
    }
    let amp = power.sqrt();
    let x = ComplexMatrix::from_fn(n_t, n_p, |r, c| {
        let phase = -2.0 * std::f64::consts::PI * ((r % n_p) * c) as f64 / n_p as f64;
        Complex64::from_polar(amp, phase)
    });
    Ok(PilotMatrix { x })
}

/// Prior covariance of each channel row.
#[derive(Debug, Clone, PartialEq)]
pub enum ChannelCovariance {
    /// i.i.d. `CN(0, σ_h²)` entries.
    Iid(f64),
    /// Known transmit-side covariance `R_tx` (`E[hᴴ h]` for each row `h`).
    Transmit(ComplexMatrix),
}

impl ChannelCovariance {
    fn matrix(&self, n_t: usize) -> Result<ComplexMatrix> {
        match self {
            Self::Iid(v) => {
                if !(*v > 0.0 && v.is_finite()) {
                    return Err(Error::Covariance(format!(
                        "channel variance must be positive, got {v}"
                    )));
                }
                Ok(ComplexMatrix::identity(n_t).scale(*v))
            }
            Self::Transmit(c) => {
                if c.shape() != (n_t, n_t) {
                    return Err(Error::Covariance(format!(
                        "transmit covariance is {:?}, expected {n_t}x{n_t}",
                        c.shape()
                    )));
                }
                Ok(c.clone())
            }
        }
    }
}

/// `Ĥ = Y Xᴴ (C X Xᴴ + σ_n² I)⁻¹ C` for one block (`Y`: `N_r × L`, `X`: `N_t × L`).
pub fn lmmse_block(
    y: &ComplexMatrix,
    x: &ComplexMatrix,
    cov: &ChannelCovariance,
    sigma_n2: f64,
) -> Result<ComplexMatrix> {
    if y.cols() != x.cols() {
        return Err(Error::Shape(format!(
            "observation has {} slots, signal has {}",
            y.cols(),
            x.cols()
        )));
    }
    if !(sigma_n2 >= 0.0) {
        return Err(Error::InvalidArgument(
            "noise variance must be non-negative".into(),
        ));
    }
    let c = cov.matrix(x.rows())?;
    let xh = x.adjoint();
    let normal = c
        .matmul(&x.matmul(&xh)?)?
        .add(&ComplexMatrix::identity(x.rows()).scale(sigma_n2))?;
    normal.right_solve(&y.matmul(&xh)?)?.matmul(&c)
}

/// Per-block LMMSE from the pilot observation `Y_p` (`N_r K × N_p`).
pub fn lmmse_channel(
    y_p: &ComplexMatrix,
    pilots: &PilotMatrix,
    n_r: usize,
    cov: &ChannelCovariance,
    sigma_n2: f64,
) -> Result<BlockFadingChannel> {
    if n_r == 0 || y_p.rows() % n_r != 0 {
        return Err(Error::Shape(format!(
            "{} observation rows for N_r = {n_r}",
            y_p.rows()
        )));
    }
    let k = y_p.rows() / n_r;
    let blocks = (0..k)
        .map(|b| lmmse_block(&y_p.row_block(b * n_r, n_r), pilots.matrix(), cov, sigma_n2))
        .collect::<Result<Vec<_>>>()?;
    BlockFadingChannel::new(blocks)
}

/// LMMSE that uses the true transmitted signal `X` (`N_t K × T`) as the pilot.
pub fn oracle_lmmse(
    y: &ComplexMatrix,
    x_true: &ComplexMatrix,
    n_r: usize,
    cov: &ChannelCovariance,
    sigma_n2: f64,
) -> Result<BlockFadingChannel> {
    if n_r == 0 || y.rows() % n_r != 0 {
        return Err(Error::Shape(format!(
            "{} observation rows for N_r = {n_r}",
            y.rows()
        )));
    }
    let k = y.rows() / n_r;
    if x_true.rows() % k != 0 {
        return Err(Error::Shape(format!(
            "{} signal rows for K = {k}",
            x_true.rows()
        )));
    }
    let n_t = x_true.rows() / k;
    let blocks = (0..k)
        .map(|b| {
            lmmse_block(
                &y.row_block(b * n_r, n_r),
                &x_true.row_block(b * n_t, n_t),
                cov,
                sigma_n2,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    BlockFadingChannel::new(blocks)
}

/// Multi-user LMMSE: the users' channels are estimated jointly as one
/// `N_r × N_u N_t` channel per block from stacked signals `X⁽ⁱ⁾` (`N_t K × L`).
pub fn lmmse_multi(
    y: &ComplexMatrix,
    signals: &[ComplexMatrix],
    n_r: usize,
    cov: &ChannelCovariance,
    sigma_n2: f64,
) -> Result<Vec<BlockFadingChannel>> {
    let first = signals
        .first()
        .ok_or_else(|| Error::InvalidArgument("no users".into()))?;
    if n_r == 0 || y.rows() % n_r != 0 {
        return Err(Error::Shape(format!(
            "{} observation rows for N_r = {n_r}",
            y.rows()
        )));
    }
    let k = y.rows() / n_r;
    if first.rows() % k != 0 || signals.iter().any(|s| s.shape() != first.shape()) {
        return Err(Error::Shape(
            "user signals must share an N_t K × L shape".into(),
        ));
    }
    let n_t = first.rows() / k;
    let n_u = signals.len();
    let cov = match cov {
        ChannelCovariance::Iid(v) => ChannelCovariance::Iid(*v),
        ChannelCovariance::Transmit(c) => {
            let c = ChannelCovariance::Transmit(c.clone()).matrix(n_t)?;
            ChannelCovariance::Transmit(ComplexMatrix::from_fn(n_u * n_t, n_u * n_t, |r, s| {
                if r / n_t == s / n_t {
                    c[(r % n_t, s % n_t)]
                } else {
                    Complex64::new(0.0, 0.0)
                }
            }))
        }
    };
    let mut per_user: Vec<Vec<ComplexMatrix>> = vec![Vec::with_capacity(k); n_u];
    for b in 0..k {
        let mut x = ComplexMatrix::zeros(n_u * n_t, first.cols());
        for (i, s) in signals.iter().enumerate() {
            x.set_row_block(i * n_t, &s.row_block(b * n_t, n_t))?;
        }
        let h = lmmse_block(&y.row_block(b * n_r, n_r), &x, &cov, sigma_n2)?;
        for (i, blocks) in per_user.iter_mut().enumerate() {
            blocks.push(ComplexMatrix::from_fn(n_r, n_t, |r, c| h[(r, i * n_t + c)]));
        }
    }
    per_user.into_iter().map(BlockFadingChannel::new).collect()
}

/// Closed-form MMSE estimate of a Gaussian source observed through a linear
/// encoder and an estimated channel treated as exact.
pub fn two_stage_decode(
    y_d: &ComplexMatrix,
    h_hat: &BlockFadingChannel,
    enc: &dyn Encoder,
    prior: &GaussianPrior<f64>,
    sigma_n2: f64,
) -> Result<Vec<f64>> {
    let mut out =
        two_stage_decode_multi(y_d, std::slice::from_ref(h_hat), &[enc], &[prior], sigma_n2)?;
    Ok(out.remove(0))
}

/// Joint two-stage decoding of all users from the superposed observation.
pub fn two_stage_decode_multi(
    y_d: &ComplexMatrix,
    h_hats: &[BlockFadingChannel],
    encoders: &[&dyn Encoder],
    priors: &[&GaussianPrior<f64>],
    sigma_n2: f64,
) -> Result<Vec<Vec<f64>>> {
    if h_hats.len() != encoders.len() || encoders.len() != priors.len() || encoders.is_empty() {
        return Err(Error::InvalidArgument(
            "one channel, encoder and prior per user".into(),
        ));
    }
    if !(sigma_n2 >= 0.0) {
        return Err(Error::InvalidArgument(
            "noise variance must be non-negative".into(),
        ));
    }
    // Real-valued composite map: [Re; Im] of vec(H f(e_i)) for every source entry.
    let m = y_d.rows() * y_d.cols();
    let mut columns: Vec<Vec<f64>> = Vec::new();
    let mut means = Vec::new();
    let mut variances = Vec::new();
    let mut sizes = Vec::new();
    for ((h, enc), prior) in h_hats.iter().zip(encoders).zip(priors) {
        let lin = enc.as_linear().ok_or_else(|| {
            Error::Unsupported("closed-form two-stage decoding needs a linear encoder".into())
        })?;
        if prior.dim() != lin.input_dim() {
            return Err(Error::Shape(
                "source prior and encoder dimensions differ".into(),
            ));
        }
        let mut e = vec![0.0; lin.input_dim()];
        for i in 0..lin.input_dim() {
            e[i] = 1.0;
            let col = h.apply(&lin.encode(&e)?)?;
            e[i] = 0.0;
            if col.shape() != y_d.shape() {
                return Err(Error::Shape(format!(
                    "observation is {:?}, model predicts {:?}",
                    y_d.shape(),
                    col.shape()
                )));
            }
            columns.push(
                col.as_slice()
                    .iter()
                    .map(|z| z.re)
                    .chain(col.as_slice().iter().map(|z| z.im))
                    .collect(),
            );
        }
        means.extend(prior.mean());
        variances.extend(std::iter::repeat_n(prior.variance(), lin.input_dim()));
        sizes.push(lin.input_dim());
    }
    let n = columns.len();
    let b = DMatrix::from_fn(2 * m, n, |r, c| columns[c][r]);
    let y = nalgebra::DVector::from_iterator(
        2 * m,
        y_d.as_slice()
            .iter()
            .map(|z| z.re)
            .chain(y_d.as_slice().iter().map(|z| z.im)),
    );
    let mean = nalgebra::DVector::from_vec(means);
    let s = nalgebra::DVector::from_vec(variances);
    let innovation = &y - &b * &mean;
    // Real noise variance per stacked component is σ_n²/2.
    let half = sigma_n2 / 2.0;
    let delta = if n <= 2 * m {
        // (Bᵀ B + (σ_n²/2) S⁻¹) δ = Bᵀ r
        let mut normal = b.transpose() * &b;
        for i in 0..n {
            normal[(i, i)] += half / s[i];
        }
        let rhs = b.transpose() * &innovation;
        normal
            .lu()
            .solve(&rhs)
            .ok_or_else(|| Error::Singular("two-stage normal matrix".into()))?
    } else {
        // δ = S Bᵀ (B S Bᵀ + σ_n²/2 I)⁻¹ r
        let bs = DMatrix::from_fn(2 * m, n, |r, c| b[(r, c)] * s[c]);
        let mut gram = &bs * b.transpose();
        for i in 0..2 * m {
            gram[(i, i)] += half;
        }
        let w = gram
            .lu()
            .solve(&innovation)
            .ok_or_else(|| Error::Singular("two-stage observation covariance".into()))?;
        bs.transpose() * w
    };
    if delta.iter().any(|v| !v.is_finite()) {
        return Err(Error::Singular(
            "two-stage decoding produced non-finite values".into(),
        ));
    }
    let est = mean + delta;
    let mut out = Vec::with_capacity(sizes.len());
    let mut offset = 0;
    for size in sizes {
        out.push(est.as_slice()[offset..offset + size].to_vec());
        offset += size;
    }
    Ok(out)
}
