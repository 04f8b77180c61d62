//! Parallel variational diffusion (PVD): blind joint recovery of channels and
//! source data from `Y = Σ_i H⁽ⁱ⁾ f_i(D⁽ⁱ⁾) + N`.
//!
//! Two reverse diffusion processes, one over the channel blocks and one over the
//! source, run in lock-step from `j = J − 1` down to `0`. At each reverse step the
//! Gaussian variational means are refined by `J_in` stochastic gradient steps on
//! the log-posterior `ln p(Ψ_{j+1} | Ψ_j) + ln p_σ(Ψ_j) + ln q(Y | Ψ_j)`, where the
//! likelihood is evaluated at the Tweedie denoised estimates and widened by the
//! expected power of the estimation-error noise.

use std::io::Write;

use num_complex::Complex64;
use rand::Rng;

use crate::channel::BlockFadingChannel;
use crate::encoder::{weighted_jacobian_frobenius2, Encoder, ProbeConfig};
use crate::linalg::ComplexMatrix;
use crate::priors::{tweedie_error_variance, tweedie_mean, Field, ScorePrior};
use crate::{Error, MimoDims, Result};

/// `σ_j = σ_1 (σ_J/σ_1)^{j/J}` for `j ≥ 1`, `σ_0 = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSchedule {
    sigma_min: f64,
    sigma_max: f64,
    steps: usize,
}

impl NoiseSchedule {
    pub fn new(sigma_min: f64, sigma_max: f64, steps: usize) -> Result<Self> {
        if !(sigma_min > 0.0 && sigma_min < sigma_max && sigma_max.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "schedule needs 0 < sigma_1 < sigma_J, got {sigma_min} and {sigma_max}"
            )));
        }
        if steps < 1 {
            return Err(Error::InvalidArgument(
                "schedule needs at least one step".into(),
            ));
        }
        Ok(Self {
            sigma_min,
            sigma_max,
            steps,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn sigma_min(&self) -> f64 {
        self.sigma_min
    }

    pub fn sigma_max(&self) -> f64 {
        self.sigma_max
    }

    pub fn value(&self, j: usize) -> Result<f64> {
        if j > self.steps {
            return Err(Error::InvalidArgument(format!(
                "step {j} outside 0..={}",
                self.steps
            )));
        }
        if j == 0 {
            return Ok(0.0);
        }
        if j == self.steps {
            return Ok(self.sigma_max);
        }
        let ratio = self.sigma_max / self.sigma_min;
        Ok(self.sigma_min * ratio.powf(j as f64 / self.steps as f64))
    }

    pub fn variance(&self, j: usize) -> Result<f64> {
        self.value(j).map(|s| s * s)
    }

    /// `σ²_{j+1} − σ²_j`.
    pub fn gap(&self, j: usize) -> Result<f64> {
        Ok(self.variance(j + 1)? - self.variance(j)?)
    }
}

/// Variational precision at step `j`:
/// `Λ_j = σ²_{j+1} / (σ²_j (σ²_{j+1} − σ²_j))`, infinite at `j = 0`.
pub fn precision(schedule: &NoiseSchedule, j: usize) -> Result<f64> {
    if j >= schedule.steps() {
        return Err(Error::InvalidArgument(format!(
            "precision step {j} outside 0..{}",
            schedule.steps()
        )));
    }
    let lo = schedule.variance(j)?;
    let hi = schedule.variance(j + 1)?;
    precision_from_levels(lo, hi)
}

/// Precision for an arbitrary pair of consecutive variances `σ²_j < σ²_{j+1}`.
pub fn precision_from_levels(var_j: f64, var_next: f64) -> Result<f64> {
    if !(var_next > var_j) {
        return Err(Error::InvalidArgument(format!(
            "noise levels must increase: {var_j} then {var_next}"
        )));
    }
    if var_j == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(var_next / (var_j * (var_next - var_j)))
}

/// `(Λ_{H_j}, Λ_{D_j})`.
pub fn precisions(s_h: &NoiseSchedule, s_d: &NoiseSchedule, j: usize) -> Result<(f64, f64)> {
    Ok((precision(s_h, j)?, precision(s_d, j)?))
}

#[derive(Debug, Clone, PartialEq)]
pub struct PvdConfig {
    pub schedule_h: NoiseSchedule,
    pub schedule_d: NoiseSchedule,
    /// Gradient steps per reverse step (`J_in`).
    pub inner_iters: usize,
    /// Samples per gradient estimate (`L`).
    pub samples: usize,
    pub zeta_h: f64,
    pub zeta_d: f64,
    /// Chain likelihood gradients through the exact Tweedie Jacobian instead of
    /// treating it as the identity.
    pub chain_through_score: bool,
    pub probes: ProbeConfig,
    /// Record one [`StepDiagnostics`] per reverse step.
    pub diagnostics: bool,
}

impl PvdConfig {
    /// J = 30, σ ∈ [0.01, 100], J_in = 20, L = 1.
    pub fn standard(zeta_h: f64, zeta_d: f64) -> Self {
        let schedule = NoiseSchedule::new(0.01, 100.0, 30).expect("valid constants");
        Self {
            schedule_h: schedule,
            schedule_d: schedule,
            inner_iters: 20,
            samples: 1,
            zeta_h,
            zeta_d,
            chain_through_score: true,
            probes: ProbeConfig::default(),
            diagnostics: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.schedule_h.steps() != self.schedule_d.steps() {
            return Err(Error::InvalidArgument(
                "channel and source schedules must have the same step count".into(),
            ));
        }
        if self.inner_iters < 1 || self.samples < 1 {
            return Err(Error::InvalidArgument(
                "J_in and L must be at least 1".into(),
            ));
        }
        if !(self.zeta_h > 0.0 && self.zeta_d > 0.0) {
            return Err(Error::InvalidArgument(
                "step-size multipliers must be positive".into(),
            ));
        }
        Ok(())
    }

    /// `(ε_{H_j}, ε_{D_j}) = (ζ_H (σ²_{H_{j+1}} − σ²_{H_j}), ζ_D (σ²_{D_{j+1}} − σ²_{D_j}))`.
    pub fn step_sizes(&self, j: usize) -> Result<(f64, f64)> {
        Ok((
            self.zeta_h * self.schedule_h.gap(j)?,
            self.zeta_d * self.schedule_d.gap(j)?,
        ))
    }
}

impl Default for PvdConfig {
    fn default() -> Self {
        Self::standard(0.1, 0.05)
    }
}

/// What the receiver knows about one user.
#[derive(Debug, Clone, Copy)]
pub struct UserModel<'a> {
    pub encoder: &'a dyn Encoder,
    pub channel_prior: &'a dyn ScorePrior<Complex64>,
    pub source_prior: &'a dyn ScorePrior<f64>,
}

/// Latents of one user at the current reverse step.
#[derive(Debug, Clone, PartialEq)]
pub struct UserLatents {
    /// `H_{j+1}` (free channel entries).
    pub h_next: Vec<Complex64>,
    pub d_next: Vec<f64>,
    /// Variational means `Ĥ_j`, `D̂_j`.
    pub h_mean: Vec<Complex64>,
    pub d_mean: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PvdState {
    pub users: Vec<UserLatents>,
    pub lambda_h: f64,
    pub lambda_d: f64,
}

/// One draw `(H_j, D_j)` per user.
pub type LatentSample = (Vec<Complex64>, Vec<f64>);

fn sample_around<T: Field, R: Rng + ?Sized>(mean: &[T], precision: f64, rng: &mut R) -> Vec<T> {
    if precision.is_infinite() {
        return mean.to_vec();
    }
    let var = 1.0 / precision;
    mean.iter().map(|&m| m + T::gaussian(rng, var)).collect()
}

/// Draws `H_j ~ CN(Ĥ_j, Λ_H⁻¹)`, `D_j ~ N(D̂_j, Λ_D⁻¹)` for each user; infinite
/// precision returns the means.
pub fn sample_variational<R: Rng + ?Sized>(state: &PvdState, rng: &mut R) -> Vec<LatentSample> {
    state
        .users
        .iter()
        .map(|u| {
            (
                sample_around(&u.h_mean, state.lambda_h, rng),
                sample_around(&u.d_mean, state.lambda_d, rng),
            )
        })
        .collect()
}

/// Tweedie denoised estimates `(Ĥ_{0|j}, D̂_{0|j})`.
pub fn tweedie(
    prior_h: &dyn ScorePrior<Complex64>,
    prior_d: &dyn ScorePrior<f64>,
    h: &[Complex64],
    d: &[f64],
    sigma_h: f64,
    sigma_d: f64,
) -> (Vec<Complex64>, Vec<f64>) {
    (
        tweedie_mean(prior_h, h, sigma_h),
        tweedie_mean(prior_d, d, sigma_d),
    )
}

/// Per-entry error variances `(σ²_{H_{0|j}}, σ²_{D_{0|j}})` of the Tweedie
/// estimates, normalised by the free-entry counts of the priors.
pub fn error_variances(
    prior_h: &dyn ScorePrior<Complex64>,
    prior_d: &dyn ScorePrior<f64>,
    h: &[Complex64],
    d: &[f64],
    sigma_h: f64,
    sigma_d: f64,
) -> (f64, f64) {
    (
        tweedie_error_variance(prior_h, h, sigma_h),
        tweedie_error_variance(prior_d, d, sigma_d),
    )
}

/// Expected per-entry power of the aggregated estimation-error noise of one user:
///
/// `[σ²_H N_r ‖f(D̂)‖² + σ²_D ‖Ĥ J‖² + σ²_H σ²_D N_r ‖J‖²] / (N_r K T)`
///
/// with `J` the encoder Jacobian at `D̂`.
#[allow(clippy::too_many_arguments)]
pub fn aggregated_noise_variance<R: Rng + ?Sized>(
    enc: &dyn Encoder,
    h_hat: &BlockFadingChannel,
    d_hat: &[f64],
    var_h: f64,
    var_d: f64,
    dims: &MimoDims,
    probes: &ProbeConfig,
    rng: &mut R,
) -> Result<f64> {
    if var_h < 0.0 || var_d < 0.0 {
        return Err(Error::InvalidArgument(
            "error variances must be non-negative".into(),
        ));
    }
    if var_h == 0.0 && var_d == 0.0 {
        return Ok(0.0);
    }
    let n_r = dims.n_r as f64;
    let mut total = 0.0;
    if var_h > 0.0 {
        total += var_h * n_r * enc.encode(d_hat)?.frobenius_norm_sqr();
    }
    if var_d > 0.0 {
        let hj = weighted_jacobian_frobenius2(
            enc,
            d_hat,
            dims.observation_shape(),
            |c| h_hat.apply_adjoint(c),
            probes,
            rng,
        )?;
        total += var_d * hj;
        if var_h > 0.0 {
            let j2 = weighted_jacobian_frobenius2(
                enc,
                d_hat,
                enc.output_shape(),
                |c| Ok(c.clone()),
                probes,
                rng,
            )?;
            total += var_h * var_d * n_r * j2;
        }
    }
    Ok(total / (dims.n_r * dims.k * dims.t) as f64)
}

/// Gradients of `−‖R‖²/s²` for one user, with respect to the denoised estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct LikelihoodGradient {
    /// Conjugate-Wirtinger gradient on the free channel entries.
    pub channel: Vec<Complex64>,
    pub source: Vec<f64>,
}

/// Residual `R = Y − Σ_i Ĥ⁽ⁱ⁾ f_i(D̂⁽ⁱ⁾)`, also returning each `f_i(D̂⁽ⁱ⁾)`.
pub fn residual(
    y: &ComplexMatrix,
    encoders: &[&dyn Encoder],
    channels: &[BlockFadingChannel],
    sources: &[Vec<f64>],
) -> Result<(ComplexMatrix, Vec<ComplexMatrix>)> {
    let mut r = y.clone();
    let mut signals = Vec::with_capacity(encoders.len());
    for ((enc, h), d) in encoders.iter().zip(channels).zip(sources) {
        let x = enc.encode(d)?;
        let hx = h.apply(&x)?;
        if hx.shape() != r.shape() {
            return Err(Error::Shape(format!(
                "observation is {:?}, model predicts {:?}",
                r.shape(),
                hx.shape()
            )));
        }
        r.axpy(-1.0, &hx)?;
        signals.push(x);
    }
    Ok((r, signals))
}

/// Likelihood scores `∇ −‖Y − Σ Ĥ f(D̂)‖²/(σ²_ΔN + σ_n²)` per user, taken with
/// respect to the denoised estimates `(Ĥ_{0|j}, D̂_{0|j})`:
/// `R f(D̂)ᴴ/s²` restricted to the diagonal blocks, and `vjp(D̂, Ĥᴴ R/s²)`.
pub fn likelihood_scores(
    y: &ComplexMatrix,
    encoders: &[&dyn Encoder],
    channels: &[BlockFadingChannel],
    sources: &[Vec<f64>],
    sigma_dn2: f64,
    sigma_n2: f64,
) -> Result<Vec<LikelihoodGradient>> {
    let s2 = sigma_dn2 + sigma_n2;
    if !(s2 > 0.0) {
        return Err(Error::InvalidArgument(
            "likelihood variance sigma_dn2 + sigma_n2 must be positive".into(),
        ));
    }
    let (r, signals) = residual(y, encoders, channels, sources)?;
    let inv = 1.0 / s2;
    channels
        .iter()
        .zip(encoders)
        .zip(sources.iter().zip(&signals))
        .map(|((h, enc), (d, x))| {
            let (n_r, n_t) = h.block_shape();
            let gh = BlockFadingChannel::outer_blocks(&r, x, n_r, n_t)?;
            let channel = gh.to_free().into_iter().map(|z| z * inv).collect();
            let source = enc.vjp(d, &h.apply_adjoint(&r)?.scale(inv))?;
            Ok(LikelihoodGradient { channel, source })
        })
        .collect()
}

/// Transition scores `((H_{j+1} − H_j)/(σ²_{H_{j+1}} − σ²_{H_j}), (D_{j+1} − D_j)/(…))`.
pub fn transition_scores(
    h_next: &[Complex64],
    h: &[Complex64],
    d_next: &[f64],
    d: &[f64],
    s_h: &NoiseSchedule,
    s_d: &NoiseSchedule,
    j: usize,
) -> Result<(Vec<Complex64>, Vec<f64>)> {
    let gap_h = s_h.gap(j)?;
    let gap_d = s_d.gap(j)?;
    if !(gap_h > 0.0 && gap_d > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "zero variance gap at step {j}"
        )));
    }
    Ok((
        transition_score(h_next, h, gap_h),
        transition_score(d_next, d, gap_d),
    ))
}

fn transition_score<T: Field>(next: &[T], cur: &[T], gap: f64) -> Vec<T> {
    next.iter()
        .zip(cur)
        .map(|(&a, &b)| (a - b) * (1.0 / gap))
        .collect()
}

/// `mean ← mean + ε · score`.
pub fn update_means<T: Field>(mean: &mut [T], score: &[T], step: f64) {
    for (m, &s) in mean.iter_mut().zip(score) {
        *m = *m + s * step;
    }
}

/// Per reverse-step trace.
#[derive(Debug, Clone, PartialEq)]
pub struct StepDiagnostics {
    pub step: usize,
    pub sigma_h: f64,
    pub sigma_d: f64,
    /// `‖Y − Σ Ĥ_j f(D̂_j)‖_F` at the end of the step.
    pub residual: f64,
    /// Aggregated-noise variance of the last inner iteration.
    pub sigma_dn2: f64,
    /// Norms of the last averaged combined scores.
    pub grad_norm_h: f64,
    pub grad_norm_d: f64,
}

pub fn write_diagnostics_csv<W: Write>(
    w: &mut W,
    trace: &[StepDiagnostics],
) -> std::io::Result<()> {
    writeln!(
        w,
        "step,sigma_h,sigma_d,residual,sigma_dn2,grad_norm_h,grad_norm_d"
    )?;
    for s in trace {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            s.step, s.sigma_h, s.sigma_d, s.residual, s.sigma_dn2, s.grad_norm_h, s.grad_norm_d
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryResult {
    pub channels: Vec<BlockFadingChannel>,
    pub sources: Vec<Vec<f64>>,
    /// `‖Y − Σ Ĥ_0 f(D̂_0)‖_F`.
    pub residual: f64,
    /// Residual of the random initial means `Ĥ_{J−1}, D̂_{J−1}`.
    pub initial_residual: f64,
    pub diagnostics: Vec<StepDiagnostics>,
}

/// Single-user convenience wrapper around [`run`].
#[allow(clippy::too_many_arguments)]
pub fn run_single<R: Rng + ?Sized>(
    y: &ComplexMatrix,
    encoder: &dyn Encoder,
    channel_prior: &dyn ScorePrior<Complex64>,
    source_prior: &dyn ScorePrior<f64>,
    dims: &MimoDims,
    config: &PvdConfig,
    rng: &mut R,
) -> Result<RecoveryResult> {
    let user = UserModel {
        encoder,
        channel_prior,
        source_prior,
    };
    run(y, &[user], dims, config, rng)
}

fn check_models(y: &ComplexMatrix, users: &[UserModel<'_>], dims: &MimoDims) -> Result<()> {
    dims.validate()?;
    if users.len() != dims.n_u {
        return Err(Error::Shape(format!(
            "{} user models for n_u = {}",
            users.len(),
            dims.n_u
        )));
    }
    if y.shape() != dims.observation_shape() {
        return Err(Error::Shape(format!(
            "observation is {:?}, expected {:?}",
            y.shape(),
            dims.observation_shape()
        )));
    }
    for (i, u) in users.iter().enumerate() {
        if u.encoder.output_shape() != dims.signal_shape() {
            return Err(Error::Shape(format!(
                "user {i}: encoder output does not match dims"
            )));
        }
        if u.encoder.input_dim() != u.source_prior.dim() {
            return Err(Error::Shape(format!(
                "user {i}: source prior dimension mismatch"
            )));
        }
        if u.channel_prior.dim() != dims.channel_free_entries() {
            return Err(Error::Shape(format!(
                "user {i}: channel prior has {} entries, channel has {}",
                u.channel_prior.dim(),
                dims.channel_free_entries()
            )));
        }
    }
    Ok(())
}

fn to_channels(dims: &MimoDims, free: &[&[Complex64]]) -> Result<Vec<BlockFadingChannel>> {
    free.iter()
        .map(|h| BlockFadingChannel::from_free(dims.n_r, dims.n_t, dims.k, h))
        .collect()
}

fn all_finite<T: Field>(v: &[T]) -> bool {
    v.iter().all(|x| x.is_finite())
}

fn norm<T: Field>(v: &[T]) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// Runs the full reverse process and returns the final variational means.
pub fn run<R: Rng + ?Sized>(
    y: &ComplexMatrix,
    users: &[UserModel<'_>],
    dims: &MimoDims,
    config: &PvdConfig,
    rng: &mut R,
) -> Result<RecoveryResult> {
    check_models(y, users, dims)?;
    config.validate()?;
    if !y.is_finite() {
        return Err(Error::NonFinite {
            step: config.schedule_h.steps(),
            what: "observation".into(),
        });
    }
    let s_h = &config.schedule_h;
    let s_d = &config.schedule_d;
    let big_j = s_h.steps();
    let encoders: Vec<&dyn Encoder> = users.iter().map(|u| u.encoder).collect();

    let mut state = PvdState {
        users: users
            .iter()
            .map(|u| {
                let h_next = (0..u.channel_prior.dim())
                    .map(|_| Complex64::gaussian(rng, s_h.variance(big_j).unwrap_or(0.0)))
                    .collect();
                let d_next = (0..u.source_prior.dim())
                    .map(|_| f64::gaussian(rng, s_d.variance(big_j).unwrap_or(0.0)))
                    .collect();
                let h_mean = (0..u.channel_prior.dim())
                    .map(|_| Complex64::gaussian(rng, s_h.variance(big_j - 1).unwrap_or(0.0)))
                    .collect();
                let d_mean = (0..u.source_prior.dim())
                    .map(|_| f64::gaussian(rng, s_d.variance(big_j - 1).unwrap_or(0.0)))
                    .collect();
                UserLatents {
                    h_next,
                    d_next,
                    h_mean,
                    d_mean,
                }
            })
            .collect(),
        lambda_h: 0.0,
        lambda_d: 0.0,
    };

    let mean_residual = |state: &PvdState| -> Result<f64> {
        let free: Vec<&[Complex64]> = state.users.iter().map(|u| u.h_mean.as_slice()).collect();
        let sources: Vec<Vec<f64>> = state.users.iter().map(|u| u.d_mean.clone()).collect();
        let (r, _) = residual(y, &encoders, &to_channels(dims, &free)?, &sources)?;
        Ok(r.frobenius_norm())
    };
    let initial_residual = mean_residual(&state)?;
    let mut diagnostics = Vec::new();

    for j in (0..big_j).rev() {
        let (lambda_h, lambda_d) = precisions(s_h, s_d, j)?;
        state.lambda_h = lambda_h;
        state.lambda_d = lambda_d;
        let sigma_h = s_h.value(j)?;
        let sigma_d = s_d.value(j)?;
        let (eps_h, eps_d) = config.step_sizes(j)?;
        let mut last = (0.0, 0.0, 0.0);

        for _ in 0..config.inner_iters {
            let mut acc_h: Vec<Vec<Complex64>> = state
                .users
                .iter()
                .map(|u| vec![Complex64::new(0.0, 0.0); u.h_mean.len()])
                .collect();
            let mut acc_d: Vec<Vec<f64>> = state
                .users
                .iter()
                .map(|u| vec![0.0; u.d_mean.len()])
                .collect();
            let mut sigma_dn2 = 0.0;

            for _ in 0..config.samples {
                let samples = sample_variational(&state, rng);
                let mut h0s = Vec::with_capacity(users.len());
                let mut d0s = Vec::with_capacity(users.len());
                sigma_dn2 = 0.0;
                for (u, (h, d)) in users.iter().zip(&samples) {
                    let (h0, d0) = tweedie(u.channel_prior, u.source_prior, h, d, sigma_h, sigma_d);
                    let (var_h, var_d) =
                        error_variances(u.channel_prior, u.source_prior, h, d, sigma_h, sigma_d);
                    let h0 = BlockFadingChannel::from_free(dims.n_r, dims.n_t, dims.k, &h0)?;
                    sigma_dn2 += aggregated_noise_variance(
                        u.encoder,
                        &h0,
                        &d0,
                        var_h,
                        var_d,
                        dims,
                        &config.probes,
                        rng,
                    )?;
                    h0s.push(h0);
                    d0s.push(d0);
                }
                if !sigma_dn2.is_finite() {
                    return Err(Error::NonFinite {
                        step: j,
                        what: "aggregated noise variance".into(),
                    });
                }
                let lik = likelihood_scores(y, &encoders, &h0s, &d0s, sigma_dn2, dims.sigma_n2)?;

                for (i, ((u, (h, d)), g)) in users.iter().zip(&samples).zip(lik).enumerate() {
                    let latents = &state.users[i];
                    let (lik_h, lik_d) = if config.chain_through_score {
                        (
                            u.channel_prior.tweedie_vjp(h, sigma_h, &g.channel),
                            u.source_prior.tweedie_vjp(d, sigma_d, &g.source),
                        )
                    } else {
                        (g.channel, g.source)
                    };
                    let (tr_h, tr_d) =
                        transition_scores(&latents.h_next, h, &latents.d_next, d, s_h, s_d, j)?;
                    let prior_h = u.channel_prior.first_order(h, sigma_h);
                    let prior_d = u.source_prior.first_order(d, sigma_d);
                    for (k, a) in acc_h[i].iter_mut().enumerate() {
                        *a += tr_h[k] + prior_h[k] + lik_h[k];
                    }
                    for (k, a) in acc_d[i].iter_mut().enumerate() {
                        *a += tr_d[k] + prior_d[k] + lik_d[k];
                    }
                }
            }

            let inv_l = 1.0 / config.samples as f64;
            let mut gh = 0.0;
            let mut gd = 0.0;
            for (latents, (sh, sd)) in state.users.iter_mut().zip(acc_h.iter().zip(&acc_d)) {
                update_means(&mut latents.h_mean, sh, eps_h * inv_l);
                update_means(&mut latents.d_mean, sd, eps_d * inv_l);
                if !all_finite(&latents.h_mean) || !all_finite(&latents.d_mean) {
                    return Err(Error::NonFinite {
                        step: j,
                        what: "variational means".into(),
                    });
                }
                gh += norm(sh).powi(2);
                gd += norm(sd).powi(2);
            }
            last = (sigma_dn2, gh.sqrt() * inv_l, gd.sqrt() * inv_l);
        }

        if config.diagnostics {
            diagnostics.push(StepDiagnostics {
                step: j,
                sigma_h,
                sigma_d,
                residual: mean_residual(&state)?,
                sigma_dn2: last.0,
                grad_norm_h: last.1,
                grad_norm_d: last.2,
            });
        }
        // H_j ← Ĥ_j; the mean carries over as the initial Ĥ_{j−1}.
        for u in &mut state.users {
            u.h_next.clone_from(&u.h_mean);
            u.d_next.clone_from(&u.d_mean);
        }
    }

    let free: Vec<&[Complex64]> = state.users.iter().map(|u| u.h_mean.as_slice()).collect();
    let channels = to_channels(dims, &free)?;
    let sources: Vec<Vec<f64>> = state.users.iter().map(|u| u.d_mean.clone()).collect();
    let residual = residual(y, &encoders, &channels, &sources)?
        .0
        .frobenius_norm();
    Ok(RecoveryResult {
        channels,
        sources,
        residual,
        initial_residual,
        diagnostics,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::LinearEncoder;
    use crate::priors::GaussianPrior;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn default_schedule() -> NoiseSchedule {
        NoiseSchedule::new(0.01, 100.0, 30).unwrap()
    }

    #[test]
    fn schedule_values() {
        let s = default_schedule();
        assert_eq!(s.value(0).unwrap(), 0.0);
        assert_eq!(s.value(30).unwrap(), 100.0);
        assert!((s.value(15).unwrap() - 1.0).abs() < 1e-12);
        // 0.01 · 10^(4/30)
        assert!((s.value(1).unwrap() - 0.013_593_563_908_785_26).abs() < 1e-12);
        assert!(s.value(31).is_err());
        for j in 1..30 {
            assert!(s.value(j + 1).unwrap() > s.value(j).unwrap());
        }
    }

    #[test]
    fn schedule_rejects_bad_levels() {
        assert!(NoiseSchedule::new(1.0, 1.0, 10).is_err());
        assert!(NoiseSchedule::new(0.0, 1.0, 10).is_err());
        assert!(NoiseSchedule::new(0.1, 1.0, 0).is_err());
    }

    #[test]
    fn precision_examples() {
        assert!((precision_from_levels(1.0, 4.0).unwrap() - 4.0 / 3.0).abs() < 1e-15);
        assert!(precision_from_levels(0.0, 4.0).unwrap().is_infinite());
        assert!(precision_from_levels(1.0, 1.0).is_err());
        let s = default_schedule();
        assert!(precision(&s, 0).unwrap().is_infinite());
        for j in 1..30 {
            let l = precision(&s, j).unwrap();
            assert!(l > 0.0 && l.is_finite());
        }
        assert!(precision(&s, 30).is_err());
    }

    #[test]
    fn infinite_precision_sample_is_the_mean() {
        let state = PvdState {
            users: vec![UserLatents {
                h_next: vec![],
                d_next: vec![],
                h_mean: vec![Complex64::new(0.3, -1.7)],
                d_mean: vec![0.1, 0.2],
            }],
            lambda_h: f64::INFINITY,
            lambda_d: f64::INFINITY,
        };
        let s = sample_variational(&state, &mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(s[0].0, state.users[0].h_mean);
        assert_eq!(s[0].1, state.users[0].d_mean);
    }

    #[test]
    fn unit_precision_sample_variance() {
        let state = PvdState {
            users: vec![UserLatents {
                h_next: vec![],
                d_next: vec![],
                h_mean: vec![Complex64::new(0.0, 0.0); 10],
                d_mean: vec![0.0; 10],
            }],
            lambda_h: 1.0,
            lambda_d: 1.0,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (mut vh, mut vd) = (0.0, 0.0);
        let draws = 10_000;
        for _ in 0..draws {
            let s = sample_variational(&state, &mut rng);
            vh += s[0].0.iter().map(|z| z.norm_sqr()).sum::<f64>();
            vd += s[0].1.iter().map(|x| x * x).sum::<f64>();
        }
        let n = (draws * 10) as f64;
        assert!((vh / n - 1.0).abs() < 0.03);
        assert!((vd / n - 1.0).abs() < 0.03);
        let again = sample_variational(&state, &mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(
            again,
            sample_variational(&state, &mut ChaCha8Rng::seed_from_u64(4))
        );
    }

    #[test]
    fn tweedie_examples() {
        let ph = GaussianPrior::isotropic(1, Complex64::new(0.0, 0.0), 1.0).unwrap();
        let pd = GaussianPrior::isotropic(1, 0.0, 1.0).unwrap();
        let h = [Complex64::new(2.0, 0.0)];
        let (h0, d0) = tweedie(&ph, &pd, &h, &[2.0], 1.0, 0.0);
        assert!((h0[0] - Complex64::new(1.0, 0.0)).norm() < 1e-15);
        assert_eq!(d0, vec![2.0]);

        let delta = GaussianPrior::isotropic(1, 0.7, 1e-12).unwrap();
        let (_, d0) = tweedie(&ph, &delta, &h, &[5.0], 0.0, 2.0);
        assert!((d0[0] - 0.7).abs() < 1e-9);
    }

    #[test]
    fn error_variance_examples() {
        let ph = GaussianPrior::isotropic(3, Complex64::new(0.0, 0.0), 1.0).unwrap();
        let pd = GaussianPrior::isotropic(2, 0.0, 1.0).unwrap();
        let h = [Complex64::new(0.2, 0.0); 3];
        let (vh, vd) = error_variances(&ph, &pd, &h, &[0.0, 1.0], 1.0, 0.0);
        assert!((vh - 0.5).abs() < 1e-15);
        assert_eq!(vd, 0.0);
    }

    #[test]
    fn aggregated_noise_first_term() {
        // f(D̂) = √10 in a single symbol; N_r = 2, K = 1, T = 5 is emulated via dims.
        let dims = MimoDims {
            n_r: 2,
            n_t: 1,
            k: 1,
            t: 5,
            n_u: 1,
            n: 5,
            power: 1.0,
            sigma_n2: 0.1,
        };
        let enc = LinearEncoder::new(ComplexMatrix::identity(5), 1, 5).unwrap();
        let d = [10f64.sqrt(), 0.0, 0.0, 0.0, 0.0];
        let h = BlockFadingChannel::new(vec![ComplexMatrix::from_real(2, 1, &[1.0, 0.5]).unwrap()])
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let probes = ProbeConfig::default();
        assert_eq!(
            aggregated_noise_variance(&enc, &h, &d, 0.0, 0.0, &dims, &probes, &mut rng).unwrap(),
            0.0
        );
        let v =
            aggregated_noise_variance(&enc, &h, &d, 0.1, 0.0, &dims, &probes, &mut rng).unwrap();
        assert!((v - 0.2).abs() < 1e-12, "{v}");
    }

    #[test]
    fn transition_examples() {
        let s = NoiseSchedule::new(1.0, 2.0, 1).unwrap();
        // σ²_1 − σ²_0 = 4 at j = 0 for this schedule.
        let (th, td) = transition_scores(
            &[Complex64::new(1.0, 1.0)],
            &[Complex64::new(1.0, 1.0)],
            &[8.0],
            &[-4.0],
            &s,
            &s,
            0,
        )
        .unwrap();
        assert_eq!(th[0], Complex64::new(0.0, 0.0));
        assert_eq!(td[0], 3.0);
        let (_, doubled) = transition_scores(&[], &[], &[20.0], &[-4.0], &s, &s, 0).unwrap();
        assert_eq!(doubled[0], 6.0);
        assert!(transition_scores(&[], &[], &[], &[], &s, &s, 1).is_err());
    }

    #[test]
    fn update_examples() {
        let mut m = [0.0];
        update_means(&mut m, &[0.0], 0.5);
        assert_eq!(m, [0.0]);
        update_means(&mut m, &[2.0], 0.5);
        assert_eq!(m, [1.0]);
    }

    #[test]
    fn ascent_converges_to_gaussian_mean() {
        // Prior-only objective ln N(x; 1.5, 0.4): the ascent update reaches the mean.
        let p = GaussianPrior::isotropic(1, 1.5, 0.4).unwrap();
        let mut m = [-3.0];
        for _ in 0..200 {
            let s = p.first_order(&m, 0.0);
            update_means(&mut m, &s, 0.1);
        }
        assert!((m[0] - 1.5).abs() < 1e-3);
    }

    #[test]
    fn zero_residual_gives_zero_likelihood_gradient() {
        let enc = LinearEncoder::new(ComplexMatrix::from_real(2, 1, &[1.0, -0.5]).unwrap(), 1, 2)
            .unwrap();
        let h = BlockFadingChannel::new(vec![ComplexMatrix::from_real(2, 1, &[0.3, 1.2]).unwrap()])
            .unwrap();
        let d = vec![0.7];
        let y = h.apply(&enc.encode(&d).unwrap()).unwrap();
        let g = likelihood_scores(&y, &[&enc], &[h], &[d], 0.0, 0.1).unwrap();
        assert!(g[0].channel.iter().all(|z| z.norm() == 0.0));
        assert!(g[0].source.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn scalar_likelihood_gradient() {
        let enc =
            LinearEncoder::new(ComplexMatrix::from_real(1, 1, &[1.0]).unwrap(), 1, 1).unwrap();
        let h =
            BlockFadingChannel::new(vec![ComplexMatrix::from_real(1, 1, &[1.0]).unwrap()]).unwrap();
        let y = ComplexMatrix::from_real(1, 1, &[2.0]).unwrap();
        let g = likelihood_scores(&y, &[&enc], &[h], &[vec![1.0]], 0.0, 1.0).unwrap();
        assert_eq!(g[0].channel, vec![Complex64::new(1.0, 0.0)]);
        // d/dD of −|2 − D|² at D = 1 is 2.
        assert_eq!(g[0].source, vec![2.0]);
        assert!(likelihood_scores(
            &y,
            &[&enc],
            &[BlockFadingChannel::zeros(1, 1, 1)],
            &[vec![1.0]],
            0.0,
            0.0
        )
        .is_err());
    }

    #[test]
    fn config_validation() {
        let mut cfg = PvdConfig::default();
        assert!(cfg.validate().is_ok());
        cfg.inner_iters = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = PvdConfig::default();
        cfg.zeta_d = 0.0;
        assert!(cfg.validate().is_err());
        let cfg = PvdConfig::standard(0.5, 2.0);
        let s1 = cfg.schedule_h.variance(1).unwrap();
        let (eh, ed) = cfg.step_sizes(0).unwrap();
        assert!((eh - 0.5 * s1).abs() < 1e-18);
        assert!((ed - 2.0 * s1).abs() < 1e-18);
    }
}
