//! Monte Carlo runner: one scene per (SNR point, trial), every enabled method
//! scored against it.

use std::fmt;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context};
use blind_mimo::baselines::{
    lmmse_multi, make_pilots, oracle_lmmse, two_stage_decode_multi, ChannelCovariance, PilotMatrix,
};
use blind_mimo::channel::{
    draw_kronecker_correlated, draw_rayleigh, exponential_correlation, superpose, transmit,
    BlockFadingChannel,
};
use blind_mimo::encoder::{
    read_encoder, Encoder, LinearEncoder, PowerNormalized, ProbeConfig, SaturatingEncoder,
};
use blind_mimo::metrics::{cbr, nmse_db, source_mse};
use blind_mimo::priors::{Field, GaussianMixturePrior, GaussianPrior, ScorePrior};
use blind_mimo::pvd::{self, NoiseSchedule, PvdConfig, UserModel};
use blind_mimo::{Complex64, ComplexMatrix, MimoDims};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{
    ChannelModel, ChannelPriorKind, EncoderKind, ExperimentConfig, SourcePriorKind,
};

/// Step-size inflation applied to trials listed in `experiment.diverge_trials`.
pub const DIVERGENCE_FACTOR: f64 = 1e8;

const SCENE_STREAM: u64 = 0;
const PVD_STREAM: u64 = 1;
const PILOT_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Method {
    Pvd,
    Lmmse,
    Oracle,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Pvd => "pvd",
            Method::Lmmse => "lmmse",
            Method::Oracle => "oracle",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One CSV row. Failed methods carry NaN metrics and the error text.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialRow {
    pub trial: usize,
    pub seed: u64,
    pub snr_db: f64,
    pub cbr: f64,
    pub nmse_db: f64,
    pub source_mse: f64,
    pub residual: f64,
    pub method: Method,
    pub wall_ms: f64,
    pub error: Option<String>,
}

/// splitmix64 finaliser.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of one trial; depends on nothing but its three arguments.
pub fn trial_seed(master: u64, snr_index: usize, trial: usize) -> u64 {
    mix(mix(mix(master) ^ snr_index as u64) ^ trial as u64)
}

/// Seed of one sweep point.
pub fn point_seed(master: u64, point: usize) -> u64 {
    mix(mix(master ^ 0x5eed) ^ point as u64)
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Row-major reshape of another encoder's output.
#[derive(Debug)]
struct Reshaped {
    inner: Box<dyn Encoder>,
    rows: usize,
    cols: usize,
}

impl Encoder for Reshaped {
    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn output_shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    fn encode(&self, d: &[f64]) -> blind_mimo::Result<ComplexMatrix> {
        self.inner.encode(d)?.reshape(self.rows, self.cols)
    }

    fn vjp(&self, d: &[f64], cotangent: &ComplexMatrix) -> blind_mimo::Result<Vec<f64>> {
        let (r, c) = self.inner.output_shape();
        self.inner.vjp(d, &cotangent.clone().reshape(r, c)?)
    }
}

/// Everything fixed for the whole experiment.
#[derive(Debug)]
pub struct Prepared {
    pub config: ExperimentConfig,
    pub dims: MimoDims,
    /// One encoder per user, known to the receiver.
    pub encoders: Vec<Box<dyn Encoder>>,
    pilot: Option<PilotScheme>,
    pub pvd: PvdConfig,
    pub diagnostics: Option<PathBuf>,
}

#[derive(Debug)]
struct PilotScheme {
    dims: MimoDims,
    pilots: PilotMatrix,
    encoders: Vec<Box<dyn Encoder>>,
}

fn pvd_config(cfg: &ExperimentConfig) -> anyhow::Result<PvdConfig> {
    let p = &cfg.pvd;
    let schedule_d = NoiseSchedule::new(p.sigma_min, p.sigma_max, p.steps)?;
    let schedule_h = NoiseSchedule::new(
        p.channel_sigma_min.unwrap_or(p.sigma_min),
        p.sigma_max,
        p.steps,
    )?;
    Ok(PvdConfig {
        schedule_h,
        schedule_d,
        inner_iters: p.inner_iters,
        samples: p.samples,
        zeta_h: p.zeta_h,
        zeta_d: p.zeta_d,
        chain_through_score: p.chain_through_score,
        probes: ProbeConfig {
            probes: p.probes,
            exact_threshold: p.exact_threshold,
        },
        diagnostics: false,
    })
}

fn build_encoders(
    cfg: &ExperimentConfig,
    dims: &MimoDims,
    base_dir: &Path,
) -> anyhow::Result<Vec<Box<dyn Encoder>>> {
    let e = &cfg.encoder;
    let mut rng = ChaCha8Rng::seed_from_u64(e.seed);
    let mut out = Vec::with_capacity(dims.n_u);
    for user in 0..dims.n_u {
        let enc: Box<dyn Encoder> = match e.kind {
            EncoderKind::Linear => Box::new(LinearEncoder::random(dims, &mut rng)),
            EncoderKind::Saturating => Box::new(SaturatingEncoder::random(dims, e.gain, &mut rng)?),
            EncoderKind::File => {
                let rel = e
                    .file
                    .as_ref()
                    .ok_or_else(|| anyhow!("encoder.file: missing"))?;
                let path = base_dir.join(rel);
                let file = std::fs::File::open(&path)
                    .with_context(|| format!("encoder.file: cannot open {}", path.display()))?;
                let enc = read_encoder(std::io::BufReader::new(file))
                    .with_context(|| format!("encoder.file: {}", path.display()))?;
                if enc.output_shape() != dims.signal_shape() || enc.input_dim() != dims.n {
                    bail!(
                        "encoder.file: user {user} encoder maps {} → {:?}, dims need {} → {:?}",
                        enc.input_dim(),
                        enc.output_shape(),
                        dims.n,
                        dims.signal_shape()
                    );
                }
                enc
            }
        };
        let enc: Box<dyn Encoder> = if e.normalize_power {
            Box::new(PowerNormalized::new(enc, dims.power)?)
        } else {
            enc
        };
        out.push(enc);
    }
    Ok(out)
}

fn reshape_encoder(
    enc: &dyn Encoder,
    rows: usize,
    cols: usize,
    copy: Box<dyn Encoder>,
) -> anyhow::Result<Box<dyn Encoder>> {
    if let Some(lin) = enc.as_linear() {
        return Ok(Box::new(lin.reshaped(rows, cols)?));
    }
    Ok(Box::new(Reshaped {
        inner: copy,
        rows,
        cols,
    }))
}

impl Prepared {
    /// Builds encoders and schedules. `base_dir` resolves relative encoder files.
    pub fn new(config: ExperimentConfig, base_dir: &Path) -> anyhow::Result<Self> {
        let violations = config.validate();
        if !violations.is_empty() {
            let text: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            bail!("invalid config:\n  {}", text.join("\n  "));
        }
        let dims = config.mimo_dims();
        let encoders = build_encoders(&config, &dims, base_dir)?;
        let pilot = if config.baselines.lmmse {
            let n_p = config.baselines.n_p;
            let data_slots = dims.t - n_p;
            let pdims = MimoDims {
                k: dims.k * dims.t / data_slots,
                ..dims
            };
            // The pilot scheme reuses the same codebooks, rearranged over its data slots.
            let copies = build_encoders(&config, &dims, base_dir)?;
            let encoders = encoders
                .iter()
                .zip(copies)
                .map(|(e, c)| reshape_encoder(e.as_ref(), dims.n_t * pdims.k, data_slots, c))
                .collect::<anyhow::Result<Vec<_>>>()?;
            Some(PilotScheme {
                dims: pdims,
                pilots: make_pilots(dims.n_u * dims.n_t, n_p, dims.power)?,
                encoders,
            })
        } else {
            None
        };
        let pvd = pvd_config(&config)?;
        Ok(Self {
            config,
            dims,
            encoders,
            pilot,
            pvd,
            diagnostics: None,
        })
    }

    pub fn with_diagnostics(mut self, dir: Option<PathBuf>) -> Self {
        self.pvd.diagnostics = dir.is_some();
        self.diagnostics = dir;
        self
    }

    pub fn methods(&self) -> Vec<Method> {
        let mut m = Vec::new();
        if self.config.pvd.enabled {
            m.push(Method::Pvd);
        }
        if self.config.baselines.lmmse {
            m.push(Method::Lmmse);
        }
        if self.config.baselines.oracle {
            m.push(Method::Oracle);
        }
        m
    }

    fn channel_covariance(&self) -> ChannelCovariance {
        match self.config.channel.model {
            ChannelModel::Rayleigh => ChannelCovariance::Iid(1.0),
            ChannelModel::Kronecker => ChannelCovariance::Transmit(exponential_correlation(
                self.dims.n_t,
                self.config.channel.rho_tx,
            )),
            ChannelModel::Prior => ChannelCovariance::Iid(self.config.prior.channel.variance),
        }
    }

    /// Known channel mean (nonzero only when channels are drawn from the prior).
    fn channel_mean(&self, dims: &MimoDims) -> Option<BlockFadingChannel> {
        if self.config.channel.model != ChannelModel::Prior {
            return None;
        }
        let [re, im] = self.config.prior.channel.mean;
        if re == 0.0 && im == 0.0 {
            return None;
        }
        let blocks =
            vec![ComplexMatrix::from_fn(dims.n_r, dims.n_t, |_, _| Complex64::new(re, im)); dims.k];
        BlockFadingChannel::new(blocks).ok()
    }

    fn draw_channels(
        &self,
        dims: &MimoDims,
        rng: &mut ChaCha8Rng,
    ) -> anyhow::Result<Vec<BlockFadingChannel>> {
        let c = &self.config.channel;
        Ok(match c.model {
            ChannelModel::Rayleigh => draw_rayleigh(dims, rng)?,
            ChannelModel::Kronecker => draw_kronecker_correlated(
                dims,
                &exponential_correlation(dims.n_r, c.rho_rx),
                &exponential_correlation(dims.n_t, c.rho_tx),
                rng,
            )?,
            ChannelModel::Prior => {
                let p = &self.config.prior.channel;
                let mean = Complex64::new(p.mean[0], p.mean[1]);
                (0..dims.n_u)
                    .map(|_| {
                        let free: Vec<Complex64> = (0..dims.channel_free_entries())
                            .map(|_| mean + Complex64::gaussian(rng, p.variance))
                            .collect();
                        BlockFadingChannel::from_free(dims.n_r, dims.n_t, dims.k, &free)
                    })
                    .collect::<blind_mimo::Result<Vec<_>>>()?
            }
        })
    }

    fn draw_source(&self, rng: &mut ChaCha8Rng) -> Vec<f64> {
        let s = &self.config.prior.source;
        let n = self.dims.n;
        match s.kind {
            SourcePriorKind::Gaussian => (0..n)
                .map(|_| s.mean + f64::gaussian(rng, s.variance))
                .collect(),
            SourcePriorKind::Oracle => (0..n)
                .map(|_| s.mean + f64::gaussian(rng, s.spread))
                .collect(),
            SourcePriorKind::Mixture => {
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut comp = s.weights.len() - 1;
                for (i, w) in s.weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        comp = i;
                        break;
                    }
                }
                (0..n)
                    .map(|_| s.means[comp] + f64::gaussian(rng, s.variance))
                    .collect()
            }
        }
    }

    fn channel_prior(
        &self,
        truth: &BlockFadingChannel,
    ) -> anyhow::Result<Box<dyn ScorePrior<Complex64>>> {
        let p = &self.config.prior.channel;
        Ok(match p.kind {
            ChannelPriorKind::Gaussian => Box::new(GaussianPrior::isotropic(
                self.dims.channel_free_entries(),
                Complex64::new(p.mean[0], p.mean[1]),
                p.variance,
            )?),
            ChannelPriorKind::Oracle => Box::new(GaussianPrior::new(truth.to_free(), p.variance)?),
        })
    }

    fn source_prior(&self, truth: &[f64]) -> anyhow::Result<Box<dyn ScorePrior<f64>>> {
        let s = &self.config.prior.source;
        let n = self.dims.n;
        Ok(match s.kind {
            SourcePriorKind::Mixture => Box::new(GaussianMixturePrior::new(
                s.means.iter().map(|&m| vec![m; n]).collect(),
                s.weights.clone(),
                s.variance,
            )?),
            _ => Box::new(self.gaussian_source_prior(truth)?.expect("gaussian kinds")),
        })
    }

    /// The source prior when it is Gaussian (closed-form decoding applies).
    fn gaussian_source_prior(&self, truth: &[f64]) -> anyhow::Result<Option<GaussianPrior<f64>>> {
        let s = &self.config.prior.source;
        Ok(match s.kind {
            SourcePriorKind::Gaussian => {
                Some(GaussianPrior::isotropic(self.dims.n, s.mean, s.variance)?)
            }
            SourcePriorKind::Oracle => Some(GaussianPrior::new(truth.to_vec(), s.variance)?),
            SourcePriorKind::Mixture => None,
        })
    }
}

/// One realisation of the blind link.
#[derive(Debug, Clone)]
pub struct Scene {
    pub channels: Vec<BlockFadingChannel>,
    pub sources: Vec<Vec<f64>>,
    pub signals: Vec<ComplexMatrix>,
    pub y: ComplexMatrix,
    pub sigma_n2: f64,
}

/// `σ_n²` that puts `‖clean‖²/E‖N‖²` at the target SNR.
pub fn noise_for_snr(clean: &ComplexMatrix, snr_db: f64) -> anyhow::Result<f64> {
    let energy = clean.frobenius_norm_sqr();
    if !(energy > 0.0) {
        bail!("noise-free signal has zero energy");
    }
    let count = (clean.rows() * clean.cols()) as f64;
    Ok(energy / (count * 10f64.powf(snr_db / 10.0)))
}

fn fresh_dims(dims: &MimoDims, sigma_n2: f64) -> MimoDims {
    MimoDims { sigma_n2, ..*dims }
}

/// Draws channels, sources and the noisy observation for one trial seed.
pub fn draw_scene(p: &Prepared, seed: u64, snr_db: f64) -> anyhow::Result<Scene> {
    let mut rng = stream(seed, SCENE_STREAM);
    let channels = p.draw_channels(&p.dims, &mut rng)?;
    let sources: Vec<Vec<f64>> = (0..p.dims.n_u).map(|_| p.draw_source(&mut rng)).collect();
    let signals = p
        .encoders
        .iter()
        .zip(&sources)
        .map(|(e, d)| e.encode(d))
        .collect::<blind_mimo::Result<Vec<_>>>()?;
    let sigma_n2 = noise_for_snr(&superpose(&channels, &signals)?, snr_db)?;
    let y = transmit(&channels, &signals, sigma_n2, &mut rng)?;
    Ok(Scene {
        channels,
        sources,
        signals,
        y,
        sigma_n2,
    })
}

struct Scores {
    nmse_db: f64,
    source_mse: f64,
    residual: f64,
}

fn flat(sources: &[Vec<f64>]) -> Vec<f64> {
    sources.iter().flatten().copied().collect()
}

fn run_pvd(
    p: &Prepared,
    scene: &Scene,
    seed: u64,
    snr_index: usize,
    trial: usize,
) -> anyhow::Result<Scores> {
    let channel_priors = scene
        .channels
        .iter()
        .map(|h| p.channel_prior(h))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let source_priors = scene
        .sources
        .iter()
        .map(|d| p.source_prior(d))
        .collect::<anyhow::Result<Vec<_>>>()?;
    let users: Vec<UserModel<'_>> = p
        .encoders
        .iter()
        .zip(&channel_priors)
        .zip(&source_priors)
        .map(|((e, hp), sp)| UserModel {
            encoder: e.as_ref(),
            channel_prior: hp.as_ref(),
            source_prior: sp.as_ref(),
        })
        .collect();
    let mut cfg = p.pvd.clone();
    if p.config.experiment.diverge_trials.contains(&trial) {
        cfg.zeta_h *= DIVERGENCE_FACTOR;
        cfg.zeta_d *= DIVERGENCE_FACTOR;
    }
    let dims = fresh_dims(&p.dims, scene.sigma_n2);
    let mut rng = stream(seed, PVD_STREAM);
    let out = pvd::run(&scene.y, &users, &dims, &cfg, &mut rng)?;
    if let Some(dir) = &p.diagnostics {
        let path = dir.join(format!("pvd_snr{snr_index}_trial{trial}.csv"));
        let mut f = std::io::BufWriter::new(
            std::fs::File::create(&path)
                .with_context(|| format!("cannot create {}", path.display()))?,
        );
        pvd::write_diagnostics_csv(&mut f, &out.diagnostics)?;
    }
    Ok(Scores {
        nmse_db: nmse_db(&scene.channels, &out.channels)?,
        source_mse: source_mse(&flat(&scene.sources), &flat(&out.sources))?,
        residual: out.residual,
    })
}

fn subtract_mean(
    y: &ComplexMatrix,
    mean: Option<&BlockFadingChannel>,
    signals: &[ComplexMatrix],
) -> anyhow::Result<ComplexMatrix> {
    let Some(m) = mean else { return Ok(y.clone()) };
    let mut out = y.clone();
    for x in signals {
        out.axpy(-1.0, &m.apply(x)?)?;
    }
    Ok(out)
}

fn add_mean(
    est: Vec<BlockFadingChannel>,
    mean: Option<&BlockFadingChannel>,
) -> anyhow::Result<Vec<BlockFadingChannel>> {
    let Some(m) = mean else { return Ok(est) };
    est.into_iter()
        .map(|h| {
            let blocks = h
                .blocks()
                .iter()
                .zip(m.blocks())
                .map(|(a, b)| a.add(b))
                .collect::<blind_mimo::Result<Vec<_>>>()?;
            Ok(BlockFadingChannel::new(blocks)?)
        })
        .collect()
}

/// LMMSE from a known transmitted signal per user.
fn estimate_channels(
    p: &Prepared,
    dims: &MimoDims,
    y: &ComplexMatrix,
    signals: &[ComplexMatrix],
    sigma_n2: f64,
) -> anyhow::Result<Vec<BlockFadingChannel>> {
    let mean = p.channel_mean(dims);
    let y = subtract_mean(y, mean.as_ref(), signals)?;
    let cov = p.channel_covariance();
    let est = if signals.len() == 1 {
        vec![oracle_lmmse(&y, &signals[0], dims.n_r, &cov, sigma_n2)?]
    } else {
        lmmse_multi(&y, signals, dims.n_r, &cov, sigma_n2)?
    };
    add_mean(est, mean.as_ref())
}

/// Closed-form source decoding and its residual; NaN when no closed form exists.
fn decode(
    p: &Prepared,
    y: &ComplexMatrix,
    h_hats: &[BlockFadingChannel],
    encoders: &[&dyn Encoder],
    truth: &[Vec<f64>],
    sigma_n2: f64,
) -> anyhow::Result<(f64, f64)> {
    let priors = truth
        .iter()
        .map(|d| p.gaussian_source_prior(d))
        .collect::<anyhow::Result<Option<Vec<_>>>>()?;
    let Some(priors) = priors else {
        return Ok((f64::NAN, f64::NAN));
    };
    if encoders.iter().any(|e| e.as_linear().is_none()) {
        return Ok((f64::NAN, f64::NAN));
    }
    let refs: Vec<&GaussianPrior<f64>> = priors.iter().collect();
    let d_hat = two_stage_decode_multi(y, h_hats, encoders, &refs, sigma_n2)?;
    let (r, _) = pvd::residual(y, encoders, h_hats, &d_hat)?;
    Ok((source_mse(&flat(truth), &flat(&d_hat))?, r.frobenius_norm()))
}

fn run_oracle(p: &Prepared, scene: &Scene) -> anyhow::Result<Scores> {
    let est = estimate_channels(p, &p.dims, &scene.y, &scene.signals, scene.sigma_n2)?;
    let encoders: Vec<&dyn Encoder> = p.encoders.iter().map(|e| e.as_ref()).collect();
    let (mse, residual) = decode(p, &scene.y, &est, &encoders, &scene.sources, scene.sigma_n2)?;
    Ok(Scores {
        nmse_db: nmse_db(&scene.channels, &est)?,
        source_mse: mse,
        residual,
    })
}

fn columns(m: &ComplexMatrix, start: usize, count: usize) -> ComplexMatrix {
    ComplexMatrix::from_fn(m.rows(), count, |r, c| m[(r, start + c)])
}

/// Pilot scheme: its own channel realisation over `K_p = K T/(T − N_p)` blocks,
/// each carrying `N_p` pilot slots followed by data.
fn run_lmmse(p: &Prepared, scene: &Scene, seed: u64, snr_db: f64) -> anyhow::Result<Scores> {
    let scheme = p
        .pilot
        .as_ref()
        .ok_or_else(|| anyhow!("pilot scheme not configured"))?;
    let dims = scheme.dims;
    let (n_t, n_p) = (dims.n_t, scheme.pilots.pilots());
    let data_slots = dims.t - n_p;
    let mut rng = stream(seed, PILOT_STREAM);
    let channels = p.draw_channels(&dims, &mut rng)?;
    let mut pilot_signals = Vec::with_capacity(dims.n_u);
    let mut data_signals = Vec::with_capacity(dims.n_u);
    let mut full = Vec::with_capacity(dims.n_u);
    for (i, (enc, d)) in scheme.encoders.iter().zip(&scene.sources).enumerate() {
        let own = scheme.pilots.matrix().row_block(i * n_t, n_t);
        let xp = ComplexMatrix::from_fn(n_t * dims.k, n_p, |r, c| own[(r % n_t, c)]);
        let xd = enc.encode(d)?;
        full.push(ComplexMatrix::from_fn(n_t * dims.k, dims.t, |r, c| {
            if c < n_p {
                xp[(r, c)]
            } else {
                xd[(r, c - n_p)]
            }
        }));
        pilot_signals.push(xp);
        data_signals.push(xd);
    }
    let sigma_n2 = noise_for_snr(&superpose(&channels, &full)?, snr_db)?;
    let y = transmit(&channels, &full, sigma_n2, &mut rng)?;
    let y_p = columns(&y, 0, n_p);
    let y_d = columns(&y, n_p, data_slots);
    let est = estimate_channels(p, &dims, &y_p, &pilot_signals, sigma_n2)?;
    let encoders: Vec<&dyn Encoder> = scheme.encoders.iter().map(|e| e.as_ref()).collect();
    let (mse, residual) = decode(p, &y_d, &est, &encoders, &scene.sources, sigma_n2)?;
    Ok(Scores {
        nmse_db: nmse_db(&channels, &est)?,
        source_mse: mse,
        residual,
    })
}

/// Rows of one (SNR point, trial), in method order.
pub fn run_trial(p: &Prepared, snr_index: usize, trial: usize) -> Vec<TrialRow> {
    let x = &p.config.experiment;
    let snr = x.snr_db[snr_index];
    let seed = trial_seed(x.seed, snr_index, trial);
    let scene = draw_scene(p, seed, snr);
    p.methods()
        .into_iter()
        .map(|method| {
            let data_slots = match method {
                Method::Lmmse => p.dims.t - p.config.baselines.n_p,
                _ => p.dims.t,
            };
            let start = Instant::now();
            let result = scene
                .as_ref()
                .map_err(|e| anyhow!("scene: {e:#}"))
                .and_then(|s| match method {
                    Method::Pvd => run_pvd(p, s, seed, snr_index, trial),
                    Method::Lmmse => run_lmmse(p, s, seed, snr),
                    Method::Oracle => run_oracle(p, s),
                });
            let wall_ms = if x.record_timing {
                start.elapsed().as_secs_f64() * 1e3
            } else {
                0.0
            };
            let base = TrialRow {
                trial,
                seed,
                snr_db: snr,
                cbr: cbr(&p.dims, data_slots).unwrap_or(f64::NAN),
                nmse_db: f64::NAN,
                source_mse: f64::NAN,
                residual: f64::NAN,
                method,
                wall_ms,
                error: None,
            };
            match result {
                Ok(s) => TrialRow {
                    nmse_db: s.nmse_db,
                    source_mse: s.source_mse,
                    residual: s.residual,
                    ..base
                },
                Err(e) => TrialRow {
                    error: Some(format!("{e:#}")),
                    ..base
                },
            }
        })
        .collect()
}

/// All rows in (SNR, trial, method) order. `workers = 0` uses every core.
pub fn run_experiment(p: &Prepared) -> anyhow::Result<Vec<TrialRow>> {
    if let Some(dir) = &p.diagnostics {
        std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    let x = &p.config.experiment;
    let jobs: Vec<(usize, usize)> = (0..x.snr_db.len())
        .flat_map(|s| (0..x.trials).map(move |t| (s, t)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(x.workers)
        .build()?;
    let rows: Vec<Vec<TrialRow>> =
        pool.install(|| jobs.par_iter().map(|&(s, t)| run_trial(p, s, t)).collect());
    Ok(rows.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeds_differ_across_coordinates() {
        let a = trial_seed(1, 0, 0);
        assert_ne!(a, trial_seed(1, 0, 1));
        assert_ne!(a, trial_seed(1, 1, 0));
        assert_ne!(a, trial_seed(2, 0, 0));
        assert_ne!(trial_seed(1, 0, 1), trial_seed(1, 1, 0));
    }

    #[test]
    fn noise_hits_target() {
        let clean = ComplexMatrix::from_real(2, 2, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        assert!((noise_for_snr(&clean, 0.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((noise_for_snr(&clean, 20.0).unwrap() - 0.01).abs() < 1e-15);
        assert!(noise_for_snr(&ComplexMatrix::zeros(2, 2), 0.0).is_err());
    }

    #[test]
    fn reshaped_vjp_matches_inner() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dims = MimoDims {
            n_r: 1,
            n_t: 2,
            k: 2,
            t: 3,
            n_u: 1,
            n: 4,
            power: 1.0,
            sigma_n2: 0.0,
        };
        let inner = SaturatingEncoder::random(&dims, 0.7, &mut rng).unwrap();
        let r = Reshaped {
            inner: Box::new(inner.clone()),
            rows: 3,
            cols: 4,
        };
        let d = [0.3, -0.2, 1.1, 0.5];
        let c = ComplexMatrix::random_cn(3, 4, 1.0, &mut rng);
        let via = r.vjp(&d, &c).unwrap();
        let direct = inner.vjp(&d, &c.clone().reshape(4, 3).unwrap()).unwrap();
        assert_eq!(via, direct);
        assert_eq!(
            r.encode(&d).unwrap().as_slice(),
            inner.encode(&d).unwrap().as_slice()
        );
    }
}
