//! Naive loop implementations and randomized comparisons against the tape.
//!
//! Shared with the CLI acceptance suite through a `#[path]` include, so it
//! only depends on the public `semcom` API.

#![allow(dead_code)]

use std::sync::Arc;

use semcom::data::{Dataset, Split};
use semcom::metrics::{eval_stream, evaluate, psnr};
use semcom::model::{DecoderId, Model, ParameterSet};
use semcom::rng::Stream;
use semcom::tensor::{Tape, Tensor};

pub const CASES: u64 = 100;

pub fn random(shape: &[usize], s: &mut Stream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| s.normal()).collect()).unwrap()
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

pub fn softmax(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let total: f64 = exps.iter().sum();
        out.extend(exps.iter().map(|e| e / total));
    }
    out
}

/// Windowed multi-head attention, one window and head at a time. `mask`
/// holds `window²` booleans per pattern, patterns cycling over windows.
pub fn attention(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    heads: usize,
    window: usize,
    mask: Option<&[bool]>,
) -> Vec<f64> {
    let rows = q.len() / d;
    let dh = d / heads;
    let mut out = vec![0.0; rows * d];
    for w in 0..rows / window {
        for h in 0..heads {
            for i in 0..window {
                let qi = w * window + i;
                let mut logits = Vec::new();
                let mut keys = Vec::new();
                for j in 0..window {
                    if let Some(m) = mask {
                        let patterns = m.len() / (window * window);
                        if !m[(w % patterns) * window * window + i * window + j] {
                            continue;
                        }
                    }
                    let kj = w * window + j;
                    let mut dot = 0.0;
                    for c in 0..dh {
                        dot += q[qi * d + h * dh + c] * k[kj * d + h * dh + c];
                    }
                    logits.push(dot / (dh as f64).sqrt());
                    keys.push(kj);
                }
                let p = softmax(&logits, logits.len());
                for (pj, &kj) in p.iter().zip(&keys) {
                    for c in 0..dh {
                        out[qi * d + h * dh + c] += pj * v[kj * d + h * dh + c];
                    }
                }
            }
        }
    }
    out
}

pub fn mse(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..a.len() {
        acc += (a[i] - b[i]) * (a[i] - b[i]);
    }
    acc / a.len() as f64
}

pub fn psnr_loop(a: &[f64], b: &[f64]) -> f64 {
    10.0 * (1.0 / mse(a, b)).log10()
}

/// Worst absolute deviation of `Tape::matmul` over random (batched) shapes.
pub fn matmul_cases(cases: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for c in 0..cases {
        let mut s = Stream::derive_indexed(11, "oracle/matmul", c);
        let (m, k, n) = (1 + s.below(7), 1 + s.below(7), 1 + s.below(7));
        let lead = 1 + s.below(3);
        let (a, b) = (random(&[lead, m, k], &mut s), random(&[k, n], &mut s));
        let mut tape = Tape::no_grad();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let out = tape.matmul(va, vb).unwrap();
        assert_eq!(tape.shape(out), &[lead, m, n]);
        // A leading batch of row blocks is one tall matrix.
        let expect = matmul(a.data(), b.data(), lead * m, k, n);
        worst = worst.max(max_abs_diff(tape.value(out), &expect));
    }
    worst
}

pub fn softmax_cases(cases: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for c in 0..cases {
        let mut s = Stream::derive_indexed(12, "oracle/softmax", c);
        let (m, n) = (1 + s.below(6), 1 + s.below(9));
        let scale = [1.0, 10.0, 300.0][s.below(3)];
        let x = Tensor::new(vec![m, n], (0..m * n).map(|_| scale * s.normal()).collect()).unwrap();
        let mut tape = Tape::no_grad();
        let v = tape.constant(x.clone());
        let out = tape.softmax(v).unwrap();
        worst = worst.max(max_abs_diff(tape.value(out), &softmax(x.data(), n)));
    }
    worst
}

pub fn attention_cases(cases: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for c in 0..cases {
        let mut s = Stream::derive_indexed(13, "oracle/attention", c);
        let heads = 1 + s.below(3);
        let d = heads * (1 + s.below(3));
        let window = 1 + s.below(4);
        let rows = window * (1 + s.below(3));
        let mask: Option<Vec<bool>> = (c % 2 == 1).then(|| {
            let patterns = 1 + s.below(2);
            let mut bits: Vec<bool> = (0..patterns * window * window).map(|_| s.below(3) > 0).collect();
            for p in 0..patterns {
                for i in 0..window {
                    bits[p * window * window + i * window + i] = true;
                }
            }
            bits
        });
        let (q, k, v) = (
            random(&[rows, d], &mut s),
            random(&[rows, d], &mut s),
            random(&[rows, d], &mut s),
        );
        let mut tape = Tape::no_grad();
        let (vq, vk, vv) = (
            tape.constant(q.clone()),
            tape.constant(k.clone()),
            tape.constant(v.clone()),
        );
        let out = tape
            .window_attention(vq, vk, vv, heads, window, mask.clone().map(Arc::new))
            .unwrap();
        let expect = attention(q.data(), k.data(), v.data(), d, heads, window, mask.as_deref());
        worst = worst.max(max_abs_diff(tape.value(out), &expect));
    }
    worst
}

pub fn mse_cases(cases: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for c in 0..cases {
        let mut s = Stream::derive_indexed(14, "oracle/mse", c);
        let shape = [1 + s.below(5), 1 + s.below(5), 3];
        let (a, b) = (random(&shape, &mut s), random(&shape, &mut s));
        let mut tape = Tape::no_grad();
        let (va, vb) = (tape.constant(a.clone()), tape.constant(b.clone()));
        let out = tape.mse(va, vb).unwrap();
        let got = tape.item(out).unwrap();
        worst = worst.max((got - mse(a.data(), b.data())).abs());
        worst = worst.max((semcom::metrics::mse(a.data(), b.data()).unwrap() - mse(a.data(), b.data())).abs());
    }
    worst
}

/// Image pairs in `[0, 1]`: library PSNR against the loop formula.
pub fn psnr_cases(cases: u64) -> f64 {
    let mut worst: f64 = 0.0;
    for c in 0..cases {
        let mut s = Stream::derive_indexed(15, "oracle/psnr", c);
        let shape = [1 + s.below(8), 1 + s.below(8), 3];
        let n: usize = shape.iter().product();
        let a = Tensor::new(shape.to_vec(), (0..n).map(|_| s.next_f64()).collect()).unwrap();
        let b = Tensor::new(shape.to_vec(), (0..n).map(|_| s.next_f64()).collect()).unwrap();
        worst = worst.max((psnr(&a, &b, 1.0).unwrap() - psnr_loop(a.data(), b.data())).abs());
    }
    worst
}

/// `evaluate` against a per-image loop: encode, normalize, add the image's
/// own evaluation noise, decode, clamp, score, average.
pub fn evaluate_vs_loop(model: &Model, params: &ParameterSet, data: &Dataset, snrs: &[f64], eval_seed: u64) -> f64 {
    assert_eq!(data.images()[0].shape().len(), 3);
    let (h, w) = data.extent();
    let scores = evaluate(model, params, DecoderId::Lcd, data, snrs, eval_seed).unwrap();
    let mut worst: f64 = 0.0;
    for (score, &snr) in scores.iter().zip(snrs) {
        let sigma = 10f64.powf(-snr / 20.0);
        let mut total = 0.0;
        for (i, img) in data.images().iter().enumerate() {
            let z = model.encode_image(params, img).unwrap();
            let power = z.data().iter().map(|v| v * v).sum::<f64>() / z.len() as f64;
            let mut stream = eval_stream(eval_seed, snr, i);
            let y: Vec<f64> = z
                .data()
                .iter()
                .map(|v| v / power.sqrt() + sigma * stream.normal())
                .collect();
            let y = Tensor::new(vec![y.len()], y).unwrap();
            let out = model.decode_symbols(params, &y, DecoderId::Lcd, h, w).unwrap();
            let clamped: Vec<f64> = out.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
            total += psnr_loop(img.data(), &clamped);
        }
        worst = worst.max((score.psnr_db - total / data.len() as f64).abs());
    }
    worst
}

pub fn tiny_eval_fixture() -> (Model, ParameterSet, Dataset) {
    let config = semcom::verify::tiny_model_config();
    let model = Model::new(config.clone()).unwrap();
    let params = ParameterSet::build(&config, 3).unwrap();
    let data = semcom::data::synth_dataset(10, semcom::verify::TINY_EXTENT, 4, Split::Test).unwrap();
    (model, params, data)
}
