//! Monte-Carlo checks of the channel against its closed forms.

use semcom::channel::{draw_noise, normalize_power, sample_snr, snr_to_sigma2, transmit, ChannelConfig};
use semcom::rng::Stream;
use semcom::tensor::{Tape, Tensor};

const DRAWS: usize = 1_000_000;

#[test]
fn sigma2_closed_forms() {
    assert_eq!(snr_to_sigma2(0.0), 1.0);
    assert!((snr_to_sigma2(10.0) - 0.1).abs() < 1e-15);
    assert!((snr_to_sigma2(3.0) - 0.501_187_233_627_272_3).abs() < 1e-15);
    assert_eq!(snr_to_sigma2(f64::INFINITY), 0.0);
}

#[test]
fn noise_variance_within_one_percent() {
    for snr in [1.0, 3.0, 5.0, 7.0] {
        let mut s = Stream::derive(42, &format!("test/noise/{snr}"));
        let draw = draw_noise(vec![DRAWS], snr, &mut s).unwrap();
        let xs = draw.sample.data();
        let mean = xs.iter().sum::<f64>() / DRAWS as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (DRAWS - 1) as f64;
        let target = 10f64.powf(-snr / 10.0);
        assert!((var / target - 1.0).abs() < 0.01, "{snr} dB: {var} vs {target}");
        assert!(mean.abs() < 5.0 * (target / DRAWS as f64).sqrt());
    }
}

#[test]
fn empirical_snr_at_three_db() {
    let mut s = Stream::from_seed(9);
    let x = Tensor::new(vec![DRAWS], (0..DRAWS).map(|_| s.normal() + 0.3).collect()).unwrap();
    let x = normalize_power(&x).unwrap();
    let mut tape = Tape::no_grad();
    let vx = tape.constant(x.clone());
    let y = transmit(&mut tape, vx, 3.0, &mut Stream::from_seed(10)).unwrap();
    let noise: Vec<f64> = tape.value(y).iter().zip(x.data()).map(|(y, x)| y - x).collect();
    let signal = x.data().iter().map(|v| v * v).sum::<f64>() / DRAWS as f64;
    let var = noise.iter().map(|v| v * v).sum::<f64>() / DRAWS as f64;
    let snr = 10.0 * (signal / var).log10();
    assert!((snr - 3.0).abs() < 0.1, "{snr}");
}

#[test]
fn normalized_power_is_one() {
    let mut s = Stream::from_seed(11);
    for c in 0..200 {
        let n = 1 + c % 37;
        let scale = 10f64.powi((c % 9) as i32 - 4);
        let x = Tensor::new(vec![2, n], (0..2 * n).map(|_| scale * s.normal()).collect()).unwrap();
        let y = normalize_power(&x).unwrap();
        for row in y.data().chunks(n) {
            let p = row.iter().map(|v| v * v).sum::<f64>() / n as f64;
            assert!((p - 1.0).abs() < 1e-12, "{p}");
        }
    }
    assert!(normalize_power(&Tensor::zeros(vec![1, 4])).is_err());
}

#[test]
fn noiseless_and_repeatable() {
    let x = Tensor::new(vec![4], vec![1.0, -1.0, 0.5, 2.0]).unwrap();
    let mut tape = Tape::no_grad();
    let v = tape.constant(x.clone());
    let y = transmit(&mut tape, v, f64::INFINITY, &mut Stream::from_seed(1)).unwrap();
    assert_eq!(tape.value(y), x.data());
    let a = semcom::channel::transmit_tensor(&x, 3.0, &mut Stream::from_seed(2)).unwrap();
    let b = semcom::channel::transmit_tensor(&x, 3.0, &mut Stream::from_seed(2)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn gradient_passes_through_noise() {
    let x = Tensor::new(vec![3], vec![0.2, -0.4, 1.0]).unwrap().with_grad();
    let w = Tensor::new(vec![3], vec![3.0, -2.0, 0.5]).unwrap();
    let mut tape = Tape::new();
    let vx = tape.leaf(&x);
    let y = transmit(&mut tape, vx, 1.0, &mut Stream::from_seed(4)).unwrap();
    let vw = tape.constant(w.clone());
    let p = tape.mul(y, vw).unwrap();
    let loss = tape.sum(p).unwrap();
    tape.backward(loss).unwrap();
    assert_eq!(tape.grad(vx).unwrap(), w.data());
}

#[test]
fn snr_draws_are_uniform() {
    let config = ChannelConfig::default();
    let mut s = Stream::from_seed(12);
    let n = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        let snr = sample_snr(&config, &mut s);
        counts[config.snr_set_db.iter().position(|&v| v == snr).unwrap()] += 1;
    }
    for c in counts {
        assert!((c as f64 / n as f64 - 0.25).abs() < 0.01, "{counts:?}");
    }
    let single = ChannelConfig {
        snr_set_db: vec![3.0],
        ..ChannelConfig::default()
    };
    assert!((0..100).all(|_| sample_snr(&single, &mut s) == 3.0));
}
