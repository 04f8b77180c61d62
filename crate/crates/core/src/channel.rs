//! Block-fading MIMO channels and the (multi-user) transmission model.
//!
//! A user's compound channel `H_0` is block-diagonal with `K` blocks `H̃_k` of
//! shape `N_r × N_t`. Only the blocks are stored; [`compound`] materialises the
//! full `N_r K × N_t K` matrix when explicitly asked for.

use num_complex::Complex64;
use rand::Rng;

use crate::linalg::{sample_cn, ComplexMatrix};
use crate::{Error, MimoDims, Result};

/// One user's `K` per-block channel matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct BlockFadingChannel {
    blocks: Vec<ComplexMatrix>,
}

impl BlockFadingChannel {
    pub fn new(blocks: Vec<ComplexMatrix>) -> Result<Self> {
        let first = blocks
            .first()
            .ok_or_else(|| Error::InvalidDims("a channel needs at least one block".into()))?
            .shape();
        if blocks.iter().any(|b| b.shape() != first) {
            return Err(Error::Shape("all blocks must share one shape".into()));
        }
        Ok(Self { blocks })
    }

    pub fn zeros(n_r: usize, n_t: usize, k: usize) -> Self {
        Self {
            blocks: vec![ComplexMatrix::zeros(n_r, n_t); k],
        }
    }

    pub fn blocks(&self) -> &[ComplexMatrix] {
        &self.blocks
    }

    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// `(N_r, N_t)` of each block.
    pub fn block_shape(&self) -> (usize, usize) {
        self.blocks[0].shape()
    }

    /// Free entries, block after block, each block row-major.
    pub fn to_free(&self) -> Vec<Complex64> {
        self.blocks
            .iter()
            .flat_map(|b| b.as_slice().iter().copied())
            .collect()
    }

    /// Inverse of [`to_free`](Self::to_free).
    pub fn from_free(n_r: usize, n_t: usize, k: usize, free: &[Complex64]) -> Result<Self> {
        if free.len() != n_r * n_t * k {
            return Err(Error::Shape(format!(
                "{} free entries for {k} blocks of {n_r}x{n_t}",
                free.len()
            )));
        }
        let blocks = free
            .chunks(n_r * n_t)
            .map(|c| ComplexMatrix::from_vec(n_r, n_t, c.to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }

    pub fn frobenius_norm_sqr(&self) -> f64 {
        self.blocks
            .iter()
            .map(ComplexMatrix::frobenius_norm_sqr)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().all(ComplexMatrix::is_finite)
    }

    /// `H_0 X` evaluated block by block. `x` must be `N_t K × T`.
    pub fn apply(&self, x: &ComplexMatrix) -> Result<ComplexMatrix> {
        let (n_r, n_t) = self.block_shape();
        let k = self.blocks.len();
        if x.rows() != n_t * k {
            return Err(Error::Shape(format!(
                "signal has {} rows, channel expects {}",
                x.rows(),
                n_t * k
            )));
        }
        let mut y = ComplexMatrix::zeros(n_r * k, x.cols());
        for (b, h) in self.blocks.iter().enumerate() {
            let yb = h.matmul(&x.row_block(b * n_t, n_t))?;
            y.set_row_block(b * n_r, &yb)?;
        }
        Ok(y)
    }

    /// `H_0ᴴ R` evaluated block by block. `r` must be `N_r K × T`.
    pub fn apply_adjoint(&self, r: &ComplexMatrix) -> Result<ComplexMatrix> {
        let (n_r, n_t) = self.block_shape();
        let k = self.blocks.len();
        if r.rows() != n_r * k {
            return Err(Error::Shape(format!(
                "residual has {} rows, channel expects {}",
                r.rows(),
                n_r * k
            )));
        }
        let mut out = ComplexMatrix::zeros(n_t * k, r.cols());
        for (b, h) in self.blocks.iter().enumerate() {
            let ob = h.adjoint().matmul(&r.row_block(b * n_r, n_r))?;
            out.set_row_block(b * n_t, &ob)?;
        }
        Ok(out)
    }

    /// Block-diagonal part of `R Xᴴ`: block `k` is `R_k X_kᴴ`.
    pub fn outer_blocks(
        r: &ComplexMatrix,
        x: &ComplexMatrix,
        n_r: usize,
        n_t: usize,
    ) -> Result<Self> {
        if r.cols() != x.cols() || r.rows() % n_r != 0 || x.rows() != (r.rows() / n_r) * n_t {
            return Err(Error::Shape(format!(
                "outer blocks of {}x{} and {}x{}",
                r.rows(),
                r.cols(),
                x.rows(),
                x.cols()
            )));
        }
        let k = r.rows() / n_r;
        let blocks = (0..k)
            .map(|b| {
                r.row_block(b * n_r, n_r)
                    .matmul(&x.row_block(b * n_t, n_t).adjoint())
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { blocks })
    }
}

/// I.i.d. CN(0, 1) block-fading channels, one per user.
pub fn draw_rayleigh<R: Rng + ?Sized>(
    dims: &MimoDims,
    rng: &mut R,
) -> Result<Vec<BlockFadingChannel>> {
    dims.validate()?;
    Ok((0..dims.n_u)
        .map(|_| BlockFadingChannel {
            blocks: (0..dims.k)
                .map(|_| ComplexMatrix::random_cn(dims.n_r, dims.n_t, 1.0, rng))
                .collect(),
        })
        .collect())
}

/// Kronecker-correlated channels `H̃_k = R_rx^{1/2} G R_tx^{1/2}` with `G` i.i.d. CN(0, 1).
///
/// Draws `G` in exactly the order [`draw_rayleigh`] does, so identity covariances
/// reproduce it for the same generator state.
pub fn draw_kronecker_correlated<R: Rng + ?Sized>(
    dims: &MimoDims,
    r_rx: &ComplexMatrix,
    r_tx: &ComplexMatrix,
    rng: &mut R,
) -> Result<Vec<BlockFadingChannel>> {
    dims.validate()?;
    if r_rx.shape() != (dims.n_r, dims.n_r) || r_tx.shape() != (dims.n_t, dims.n_t) {
        return Err(Error::Shape(format!(
            "covariances must be {0}x{0} and {1}x{1}",
            dims.n_r, dims.n_t
        )));
    }
    let rx_sqrt = covariance_sqrt(r_rx)?;
    let tx_sqrt = covariance_sqrt(r_tx)?;
    let users = draw_rayleigh(dims, rng)?;
    users
        .into_iter()
        .map(|ch| {
            let blocks = ch
                .blocks
                .into_iter()
                .map(|g| {
                    let g = match &rx_sqrt {
                        Some(s) => s.matmul(&g)?,
                        None => g,
                    };
                    match &tx_sqrt {
                        Some(s) => g.matmul(s),
                        None => Ok(g),
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(BlockFadingChannel { blocks })
        })
        .collect()
}

/// `None` for an exact identity (no transform needed).
fn covariance_sqrt(r: &ComplexMatrix) -> Result<Option<ComplexMatrix>> {
    if *r == ComplexMatrix::identity(r.rows()) {
        return Ok(None);
    }
    r.psd_sqrt().map(Some)
}

/// Exponential correlation matrix `R_ij = ρ^{|i−j|}`.
pub fn exponential_correlation(n: usize, rho: f64) -> ComplexMatrix {
    ComplexMatrix::from_fn(n, n, |i, j| {
        Complex64::new(rho.powi(i.abs_diff(j) as i32), 0.0)
    })
}

/// The block-diagonal compound matrix `H_0` (`N_r K × N_t K`).
pub fn compound(ch: &BlockFadingChannel) -> ComplexMatrix {
    let (n_r, n_t) = ch.block_shape();
    let k = ch.block_count();
    let mut h = ComplexMatrix::zeros(n_r * k, n_t * k);
    for (b, blk) in ch.blocks.iter().enumerate() {
        for r in 0..n_r {
            for c in 0..n_t {
                h[(b * n_r + r, b * n_t + c)] = blk[(r, c)];
            }
        }
    }
    h
}

/// Noise-free superposition `Σ_i H⁽ⁱ⁾ X⁽ⁱ⁾`.
pub fn superpose(
    channels: &[BlockFadingChannel],
    signals: &[ComplexMatrix],
) -> Result<ComplexMatrix> {
    if channels.len() != signals.len() || channels.is_empty() {
        return Err(Error::Shape(format!(
            "{} channels for {} signals",
            channels.len(),
            signals.len()
        )));
    }
    let mut y = channels[0].apply(&signals[0])?;
    for (h, x) in channels.iter().zip(signals).skip(1) {
        y.add_assign(&h.apply(x)?)?;
    }
    Ok(y)
}

/// `Y = Σ_i H⁽ⁱ⁾ X⁽ⁱ⁾ + N` with `N` i.i.d. CN(0, σ_n²).
pub fn transmit<R: Rng + ?Sized>(
    channels: &[BlockFadingChannel],
    signals: &[ComplexMatrix],
    sigma_n2: f64,
    rng: &mut R,
) -> Result<ComplexMatrix> {
    if !(sigma_n2 >= 0.0) {
        return Err(Error::InvalidArgument(
            "noise power must be non-negative".into(),
        ));
    }
    let mut y = superpose(channels, signals)?;
    if sigma_n2 > 0.0 {
        let std = (sigma_n2 / 2.0).sqrt();
        for z in y.as_mut_slice() {
            *z += sample_cn(rng, std);
        }
    }
    Ok(y)
}
