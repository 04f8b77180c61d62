//! Scoring of channel and source recovery.

use crate::channel::BlockFadingChannel;
use crate::linalg::ComplexMatrix;
use crate::{Error, MimoDims, Result};

/// Normalised channel error in dB, averaged over users:
/// `10 log10(Σ_i ‖H⁽ⁱ⁾ − Ĥ⁽ⁱ⁾‖² / (N_u ‖H⁽ⁱ⁾‖²))`.
///
/// Exact recovery yields `f64::NEG_INFINITY`.
pub fn nmse_db(truth: &[BlockFadingChannel], est: &[BlockFadingChannel]) -> Result<f64> {
    if truth.is_empty() || truth.len() != est.len() {
        return Err(Error::Shape(format!(
            "{} true channels, {} estimates",
            truth.len(),
            est.len()
        )));
    }
    let mut total = 0.0;
    for (h, e) in truth.iter().zip(est) {
        if h.block_shape() != e.block_shape() || h.block_count() != e.block_count() {
            return Err(Error::Shape(
                "channel estimate shape differs from truth".into(),
            ));
        }
        let norm = h.frobenius_norm_sqr();
        if norm == 0.0 {
            return Err(Error::InvalidArgument("true channel has zero norm".into()));
        }
        let err: f64 = h
            .blocks()
            .iter()
            .zip(e.blocks())
            .map(|(a, b)| a.sub(b).map(|d| d.frobenius_norm_sqr()))
            .sum::<Result<f64>>()?;
        total += err / norm;
    }
    Ok(10.0 * (total / truth.len() as f64).log10())
}

/// `10 log10(‖S‖² / ‖N‖²)`.
pub fn snr_db(signal: &ComplexMatrix, noise: &ComplexMatrix) -> Result<f64> {
    if signal.shape() != noise.shape() {
        return Err(Error::Shape("signal and noise shapes differ".into()));
    }
    let n = noise.frobenius_norm_sqr();
    if n == 0.0 {
        return Err(Error::InvalidArgument("noise part is zero".into()));
    }
    Ok(10.0 * (signal.frobenius_norm_sqr() / n).log10())
}

/// Signal matrix elements per source dimension.
///
/// With `data_slots < T` (pilots occupying the rest of each block) the block
/// count is rescaled to `K T / data_slots` so the data payload `N_t K T` is kept.
pub fn cbr(dims: &MimoDims, data_slots: usize) -> Result<f64> {
    if data_slots == 0 || data_slots > dims.t || dims.n == 0 {
        return Err(Error::InvalidArgument(format!(
            "data slots {data_slots} must lie in 1..={}",
            dims.t
        )));
    }
    let num = (dims.n_t * dims.k * dims.t * dims.t) as f64;
    let den = (data_slots * dims.n) as f64;
    Ok(num / den)
}

/// Mean squared error per entry.
pub fn source_mse(truth: &[f64], est: &[f64]) -> Result<f64> {
    if truth.len() != est.len() {
        return Err(Error::Shape(format!(
            "source has {} entries, estimate {}",
            truth.len(),
            est.len()
        )));
    }
    if truth.is_empty() {
        return Ok(0.0);
    }
    let s: f64 = truth.iter().zip(est).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(s / truth.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub trial: usize,
    pub seed: u64,
    pub snr_db: f64,
    pub cbr: f64,
    /// May be `-inf` on exact recovery.
    pub nmse_db: f64,
    pub source_mse: f64,
    pub residual: f64,
}

/// CSV rendering of a dB value; `-inf` for exact recovery.
pub fn format_db(v: f64) -> String {
    if v == f64::NEG_INFINITY {
        "-inf".to_string()
    } else {
        format!("{v}")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;

    fn scalar(v: f64) -> BlockFadingChannel {
        BlockFadingChannel::new(vec![ComplexMatrix::from_real(1, 1, &[v]).unwrap()]).unwrap()
    }

    fn dims(n_t: usize, k: usize, t: usize, n: usize) -> MimoDims {
        MimoDims {
            n_r: 1,
            n_t,
            k,
            t,
            n_u: 1,
            n,
            power: 1.0,
            sigma_n2: 0.1,
        }
    }

    #[test]
    fn nmse_examples() {
        assert_eq!(
            nmse_db(&[scalar(1.0)], &[scalar(1.0)]).unwrap(),
            f64::NEG_INFINITY
        );
        assert!(
            nmse_db(&[scalar(2.0)], &[BlockFadingChannel::zeros(1, 1, 1)])
                .unwrap()
                .abs()
                < 1e-12
        );
        assert!((nmse_db(&[scalar(1.0)], &[scalar(1.1)]).unwrap() + 20.0).abs() < 1e-9);
        assert!(nmse_db(&[BlockFadingChannel::zeros(1, 1, 1)], &[scalar(1.0)]).is_err());
        assert!(nmse_db(&[scalar(1.0)], &[]).is_err());
    }

    #[test]
    fn nmse_averages_users() {
        // −20 dB and 0 dB users: mean of 0.01 and 1.
        let v = nmse_db(&[scalar(1.0), scalar(1.0)], &[scalar(1.1), scalar(0.0)]).unwrap();
        assert!((v - 10.0 * (0.505f64).log10()).abs() < 1e-12);
    }

    #[test]
    fn snr_examples() {
        let s = ComplexMatrix::from_real(1, 1, &[1.0]).unwrap();
        assert!(snr_db(&s, &s).unwrap().abs() < 1e-12);
        let s = ComplexMatrix::from_real(1, 1, &[10.0]).unwrap();
        let n = ComplexMatrix::from_real(1, 1, &[1.0]).unwrap();
        assert!((snr_db(&s, &n).unwrap() - 20.0).abs() < 1e-12);
        assert!((snr_db(&s.scale(10.0), &n).unwrap() - 40.0).abs() < 1e-12);
        assert!(snr_db(&s, &ComplexMatrix::zeros(1, 1)).is_err());
    }

    #[test]
    fn cbr_reference_values() {
        assert_eq!(cbr(&dims(8, 24, 24, 196_608), 24).unwrap(), 0.0234375);
        assert_eq!(cbr(&dims(8, 24, 24, 196_608), 8).unwrap(), 0.0703125);
        assert_eq!(cbr(&dims(8, 72, 24, 196_608), 8).unwrap(), 0.2109375);
        let v = cbr(&dims(1, 192, 24, 196_608), 24).unwrap();
        assert_eq!(v, 0.0234375);
        assert!(cbr(&dims(1, 1, 4, 4), 0).is_err());
        assert!(cbr(&dims(1, 1, 4, 4), 5).is_err());
    }

    #[test]
    fn source_mse_examples() {
        assert_eq!(source_mse(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), 0.0);
        assert_eq!(source_mse(&[0.0, 0.0], &[1.0, 1.0]).unwrap(), 1.0);
        let d = [0.3, -1.0, 2.0];
        let shifted: Vec<f64> = d.iter().map(|x| x + 0.5).collect();
        assert!((source_mse(&d, &shifted).unwrap() - 0.25).abs() < 1e-15);
        assert!(source_mse(&[1.0], &[]).is_err());
    }

    #[test]
    fn sentinel_formatting() {
        assert_eq!(format_db(f64::NEG_INFINITY), "-inf");
        assert_eq!(format_db(-3.5), "-3.5");
        let _ = Complex64::new(0.0, 0.0);
    }
}
