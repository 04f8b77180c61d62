//! Block-fading MIMO link simulation and blind joint channel/source recovery.
//!
//! The crate is organised bottom-up:
//!
//! * [`linalg`] – the dense complex matrix used for received signals, channels and
//!   transmitted symbols.
//! * [`channel`] – Rayleigh and Kronecker-correlated block-fading channels and the
//!   multi-user transmission model `Y = Σ H⁽ⁱ⁾ X⁽ⁱ⁾ + N`.
//! * [`encoder`] – deterministic source-to-signal maps with vector-Jacobian products.
//! * [`priors`] – analytic score priors (first-order score and Hessian trace at any
//!   smoothing level).
//! * [`pvd`] – the parallel variational diffusion reverse process.
//! * [`baselines`] – pilot LMMSE channel estimation and two-stage decoding.
//! * [`metrics`] – NMSE, SNR, channel bandwidth ratio and source MSE.

pub mod baselines;
pub mod channel;
pub mod encoder;
mod error;
pub mod linalg;
pub mod metrics;
pub mod priors;
pub mod pvd;

pub use error::{Error, Result};
pub use linalg::ComplexMatrix;
pub use num_complex::Complex64;

/// System dimensions shared by every stage of the link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MimoDims {
    /// Receive antennas.
    pub n_r: usize,
    /// Transmit antennas per user.
    pub n_t: usize,
    /// Transmission blocks.
    pub k: usize,
    /// Slots per block.
    pub t: usize,
    /// Users.
    pub n_u: usize,
    /// Source dimension per user.
    pub n: usize,
    /// Average transmit power per symbol.
    pub power: f64,
    /// Noise power σ_n².
    pub sigma_n2: f64,
}

impl MimoDims {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("n_r", self.n_r),
            ("n_t", self.n_t),
            ("k", self.k),
            ("t", self.t),
            ("n_u", self.n_u),
            ("n", self.n),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidDims(format!("{name} must be at least 1")));
            }
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return Err(Error::InvalidDims("power must be positive".into()));
        }
        if !(self.sigma_n2 >= 0.0 && self.sigma_n2.is_finite()) {
            return Err(Error::InvalidDims("sigma_n2 must be non-negative".into()));
        }
        Ok(())
    }

    /// Shape of one user's transmitted signal matrix, `N_t K × T`.
    pub fn signal_shape(&self) -> (usize, usize) {
        (self.n_t * self.k, self.t)
    }

    /// Shape of the received signal matrix, `N_r K × T`.
    pub fn observation_shape(&self) -> (usize, usize) {
        (self.n_r * self.k, self.t)
    }

    /// Free (non-structural) complex entries of one user's compound channel.
    pub fn channel_free_entries(&self) -> usize {
        self.n_r * self.n_t * self.k
    }
}
