use blind_mimo::baselines::{lmmse_channel, make_pilots, oracle_lmmse, ChannelCovariance};
use blind_mimo::channel::{draw_rayleigh, BlockFadingChannel};
use blind_mimo::linalg::ComplexMatrix;
use blind_mimo::{Complex64, MimoDims};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn cn(rng: &mut ChaCha8Rng, var: f64) -> Complex64 {
    let s = (var / 2.0).sqrt();
    Complex64::new(
        s * rng.sample::<f64, _>(StandardNormal),
        s * rng.sample::<f64, _>(StandardNormal),
    )
}

fn noisy(clean: &ComplexMatrix, sigma_n2: f64, rng: &mut ChaCha8Rng) -> ComplexMatrix {
    ComplexMatrix::from_fn(clean.rows(), clean.cols(), |r, c| {
        clean[(r, c)] + cn(rng, sigma_n2)
    })
}

fn sq_err(a: &BlockFadingChannel, b: &BlockFadingChannel) -> f64 {
    a.blocks()
        .iter()
        .zip(b.blocks())
        .map(|(x, y)| x.sub(y).unwrap().frobenius_norm_sqr())
        .sum()
}

fn scalar_dims(k: usize, t: usize) -> MimoDims {
    MimoDims {
        n_r: 4,
        n_t: 1,
        k,
        t,
        n_u: 1,
        n: 1,
        power: 1.0,
        sigma_n2: 0.0,
    }
}

#[test]
fn pilot_lmmse_matches_analytic_error() {
    let (n_p, power, sigma_n2) = (4, 1.0, 0.5);
    let d = scalar_dims(4, n_p);
    let pilots = make_pilots(1, n_p, power).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (mut err, mut entries) = (0.0, 0usize);
    for _ in 0..1000 {
        let h = draw_rayleigh(&d, &mut rng).unwrap().remove(0);
        let y = noisy(&h.apply(&pilots.stacked(d.k)).unwrap(), sigma_n2, &mut rng);
        let est =
            lmmse_channel(&y, &pilots, d.n_r, &ChannelCovariance::Iid(1.0), sigma_n2).unwrap();
        err += sq_err(&h, &est);
        entries += d.channel_free_entries();
    }
    let empirical = err / entries as f64;
    let analytic = sigma_n2 / (n_p as f64 * power + sigma_n2);
    assert!(
        (empirical - analytic).abs() / analytic < 0.05,
        "{empirical} vs {analytic}"
    );
}

#[test]
fn oracle_lmmse_matches_analytic_error() {
    let (t, sigma_n2) = (8, 1.0);
    let d = scalar_dims(4, t);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let (mut err, mut bound, mut entries) = (0.0, 0.0, 0usize);
    for _ in 0..1000 {
        let h = draw_rayleigh(&d, &mut rng).unwrap().remove(0);
        // Constant-modulus symbols give ‖x‖² = T·P exactly.
        let x = ComplexMatrix::from_fn(d.k, t, |_, _| {
            Complex64::from_polar(1.0, rng.random::<f64>() * std::f64::consts::TAU)
        });
        let y = noisy(&h.apply(&x).unwrap(), sigma_n2, &mut rng);
        let est = oracle_lmmse(&y, &x, d.n_r, &ChannelCovariance::Iid(1.0), sigma_n2).unwrap();
        err += sq_err(&h, &est);
        bound += sigma_n2 / (t as f64 + sigma_n2) * d.channel_free_entries() as f64;
        entries += d.channel_free_entries();
    }
    let (empirical, analytic) = (err / entries as f64, bound / entries as f64);
    assert!(
        (empirical - analytic).abs() / analytic < 0.05,
        "{empirical} vs {analytic}"
    );
}

#[test]
fn oracle_beats_pilots_with_more_slots() {
    let d = MimoDims {
        n_r: 2,
        n_t: 2,
        k: 3,
        t: 12,
        n_u: 1,
        n: 1,
        power: 1.0,
        sigma_n2: 0.0,
    };
    let sigma_n2 = 0.3;
    let pilots = make_pilots(2, 4, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let (mut e_pilot, mut e_oracle) = (0.0, 0.0);
    for _ in 0..300 {
        let h = draw_rayleigh(&d, &mut rng).unwrap().remove(0);
        let yp = noisy(&h.apply(&pilots.stacked(d.k)).unwrap(), sigma_n2, &mut rng);
        let x = ComplexMatrix::from_fn(d.n_t * d.k, d.t, |_, _| cn(&mut rng, 1.0));
        let y = noisy(&h.apply(&x).unwrap(), sigma_n2, &mut rng);
        let cov = ChannelCovariance::Iid(1.0);
        e_pilot += sq_err(
            &h,
            &lmmse_channel(&yp, &pilots, d.n_r, &cov, sigma_n2).unwrap(),
        );
        e_oracle += sq_err(&h, &oracle_lmmse(&y, &x, d.n_r, &cov, sigma_n2).unwrap());
    }
    assert!(e_oracle < e_pilot, "oracle {e_oracle}, pilot {e_pilot}");
}

#[test]
fn lmmse_beats_least_squares_and_zero() {
    let d = MimoDims {
        n_r: 2,
        n_t: 2,
        k: 2,
        t: 2,
        n_u: 1,
        n: 1,
        power: 1.0,
        sigma_n2: 0.0,
    };
    let sigma_n2 = 1.0;
    let pilots = make_pilots(2, 2, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (mut e_lmmse, mut e_ls, mut e_zero) = (0.0, 0.0, 0.0);
    for _ in 0..300 {
        let h = draw_rayleigh(&d, &mut rng).unwrap().remove(0);
        let y = noisy(&h.apply(&pilots.stacked(d.k)).unwrap(), sigma_n2, &mut rng);
        let lmmse =
            lmmse_channel(&y, &pilots, d.n_r, &ChannelCovariance::Iid(1.0), sigma_n2).unwrap();
        // Least squares is the zero-regularisation limit.
        let ls = lmmse_channel(&y, &pilots, d.n_r, &ChannelCovariance::Iid(1.0), 0.0).unwrap();
        e_lmmse += sq_err(&h, &lmmse);
        e_ls += sq_err(&h, &ls);
        e_zero += h.frobenius_norm_sqr();
    }
    assert!(
        e_lmmse < e_ls && e_lmmse < e_zero,
        "{e_lmmse} {e_ls} {e_zero}"
    );
}
