//! Finite-difference verification of every differentiable op and of the
//! full encode, transmit, decode and distillation-loss pipeline.

use std::sync::Arc;

use crate::channel::transmit;
use crate::error::Result;
use crate::model::{Binding, DecoderId, Model, ModelConfig, ParameterSet};
use crate::rng::Stream;
use crate::tensor::{grad_check_report, OpKind, Tape, Tensor, Var};
use crate::training::loss_combined;

/// Pass threshold on the max relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const STEP: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub coordinates: usize,
    pub max_rel_error: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

fn random(shape: Vec<usize>, stream: &mut Stream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| stream.normal()).collect()).expect("finite")
}

fn extent(stream: &mut Stream) -> usize {
    1 + stream.below(6)
}

/// Reduces an arbitrary output to a scalar with fixed random weights, so
/// every output coordinate contributes a distinct amount.
fn project(tape: &mut Tape, out: Var, stream: &mut Stream) -> Result<Var> {
    let w = tape.constant(random(tape.shape(out).to_vec(), stream));
    let y = tape.mul(out, w)?;
    tape.sum(y)
}

type Objective = Box<dyn Fn(&mut Tape, &[Var]) -> Result<Var>>;
type Case = (Vec<Tensor>, Objective);

/// A random instance exercising `kind`, with extents at most 6.
fn case(kind: OpKind, seed: u64) -> Case {
    let mut s = Stream::derive_indexed(seed, &format!("gradcheck/{}", kind.name()), 0);
    let proj = s.next_u64();
    let (m, n) = (extent(&mut s), extent(&mut s));
    let with_projection =
        |f: Objective| -> Objective {
            Box::new(move |tape, v| {
                let out = f(tape, v)?;
                project(tape, out, &mut Stream::from_seed(proj))
            })
        };
    match kind {
        OpKind::MatMul => {
            let (k, lead) = (extent(&mut s), 1 + s.below(2));
            let a = random(vec![lead, m, k], &mut s);
            (
                vec![a, random(vec![k, n], &mut s)],
                with_projection(Box::new(|t, v| t.matmul(v[0], v[1]))),
            )
        }
        OpKind::AddBias => (
            vec![random(vec![m, n], &mut s), random(vec![n], &mut s)],
            with_projection(Box::new(|t, v| t.add_bias(v[0], v[1]))),
        ),
        OpKind::Add | OpKind::Sub | OpKind::Mul => {
            let inputs = vec![random(vec![m, n], &mut s), random(vec![m, n], &mut s)];
            let f: Objective = match kind {
                OpKind::Add => Box::new(|t, v| t.add(v[0], v[1])),
                OpKind::Sub => Box::new(|t, v| t.sub(v[0], v[1])),
                _ => Box::new(|t, v| t.mul(v[0], v[1])),
            };
            (inputs, with_projection(f))
        }
        OpKind::Scale => {
            let factor = 2.0 * s.next_f64() - 1.0;
            (
                vec![random(vec![m, n], &mut s)],
                with_projection(Box::new(move |t, v| t.scale(v[0], factor))),
            )
        }
        OpKind::LayerNorm => {
            let d = 2 + s.below(5);
            (
                vec![
                    random(vec![m, d], &mut s),
                    random(vec![d], &mut s),
                    random(vec![d], &mut s),
                ],
                with_projection(Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5))),
            )
        }
        OpKind::Softmax => (
            vec![random(vec![m, n], &mut s)],
            with_projection(Box::new(|t, v| t.softmax(v[0]))),
        ),
        OpKind::Gelu => (
            vec![random(vec![m, n], &mut s)],
            with_projection(Box::new(|t, v| t.gelu(v[0]))),
        ),
        OpKind::Attention => {
            let heads = 1 + s.below(3);
            let d = heads * (1 + s.below(2));
            let window = 1 + s.below(3);
            let windows = 1 + s.below(2);
            let rows = window * windows;
            let masked = seed % 2 == 1;
            let mask = masked.then(|| {
                let mut bits: Vec<bool> = (0..window * window).map(|_| s.below(2) == 1).collect();
                // Every query keeps at least itself.
                (0..window).for_each(|i| bits[i * window + i] = true);
                Arc::new(bits)
            });
            let inputs = (0..3).map(|_| random(vec![rows, d], &mut s)).collect();
            (
                inputs,
                with_projection(Box::new(move |t, v| {
                    t.window_attention(v[0], v[1], v[2], heads, window, mask.clone())
                })),
            )
        }
        OpKind::GatherRows => {
            let out_rows = extent(&mut s);
            let index: Arc<Vec<usize>> = Arc::new((0..out_rows).map(|_| s.below(m)).collect());
            (
                vec![random(vec![m, n], &mut s)],
                with_projection(Box::new(move |t, v| {
                    t.gather_rows(v[0], index.clone(), vec![out_rows, n])
                })),
            )
        }
        OpKind::Reshape => (
            vec![random(vec![m, n], &mut s)],
            with_projection(Box::new(move |t, v| t.reshape(v[0], vec![n, m]))),
        ),
        OpKind::Mse => (
            vec![random(vec![m, n], &mut s), random(vec![m, n], &mut s)],
            Box::new(|t, v| t.mse(v[0], v[1])),
        ),
        OpKind::Sum => (vec![random(vec![m, n], &mut s)], Box::new(|t, v| t.sum(v[0]))),
        OpKind::NormalizePower => (
            vec![random(vec![m, 1 + n], &mut s)],
            with_projection(Box::new(|t, v| t.normalize_power(v[0]))),
        ),
        OpKind::Leaf => unreachable!("leaves have no backward rule"),
    }
}

/// Grad-checks `kind` on `seeds` random instances and keeps the worst.
pub fn check_op(kind: OpKind, seeds: u64) -> Result<CheckResult> {
    let mut result = CheckResult {
        name: kind.name().to_string(),
        cases: 0,
        coordinates: 0,
        max_rel_error: 0.0,
    };
    for seed in 0..seeds {
        let (inputs, f) = case(kind, seed);
        let report = grad_check_report(&inputs, STEP, f)?;
        result.cases += 1;
        result.coordinates += report.coordinates;
        if !(report.max_rel_error <= result.max_rel_error) {
            result.max_rel_error = report.max_rel_error;
        }
    }
    Ok(result)
}

/// Smallest layout the model accepts: unit patches, four stages on a
/// 16×16 image (2×2 tokens, one window, at the deepest stage).
pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        patch_size: 1,
        stage_dims: [4, 4, 8, 8],
        encoder_depths: [1, 1, 1, 1],
        hcd_depths: [1, 2, 1, 1],
        lcd_depths: [1, 1, 1, 1],
        heads: [1, 1, 2, 2],
        window: 2,
        mlp_ratio: 2,
        ..ModelConfig::default()
    }
}

pub const TINY_EXTENT: usize = 16;

/// Gradient of `loss_combined(I, D₂(E(I) + N), D₁(E(I) + N), α)` with
/// respect to every encoder and LCD parameter, against central
/// differences. The teacher output is computed once and held constant.
pub fn check_end_to_end(seed: u64) -> Result<CheckResult> {
    let config = tiny_model_config();
    let model = Model::new(config.clone())?;
    let params = ParameterSet::build(&config, seed)?;
    let e = TINY_EXTENT;
    let mut s = Stream::derive(seed, "gradcheck/pipeline");
    let image = Tensor::new(vec![1, e, e, 3], (0..e * e * 3).map(|_| s.next_f64()).collect())?;
    let (snr, alpha) = (3.0, 0.5);
    let noise_seed = s.next_u64();

    let forward_to_channel = |tape: &mut Tape, binding: &mut Binding, x: Var| -> Result<Var> {
        let z = model.encode(tape, &params, binding, x)?;
        let z = tape.normalize_power(z)?;
        transmit(tape, z, snr, &mut Stream::from_seed(noise_seed))
    };
    let teacher = {
        let mut tape = Tape::no_grad();
        let mut binding = Binding::new();
        let x = tape.constant(image.clone());
        let y = forward_to_channel(&mut tape, &mut binding, x)?;
        let out = model.decode(&mut tape, &params, &mut binding, y, DecoderId::Hcd, e, e)?;
        tape.tensor(out)
    };

    let names: Vec<String> = params.select(&["enc.", "dec2."])?;
    let inputs: Vec<Tensor> = names.iter().map(|n| params.get(n).cloned()).collect::<Result<_>>()?;
    let f = |tape: &mut Tape, vars: &[Var]| -> Result<Var> {
        let mut binding = Binding::new();
        for (n, &v) in names.iter().zip(vars) {
            binding.bind(n.clone(), v);
        }
        let x = tape.constant(image.clone());
        let y = forward_to_channel(tape, &mut binding, x)?;
        let out = model.decode(tape, &params, &mut binding, y, DecoderId::Lcd, e, e)?;
        let t = tape.constant(teacher.clone());
        loss_combined(tape, x, out, t, alpha)
    };
    let report = grad_check_report(&inputs, STEP, f)?;
    Ok(CheckResult {
        name: "pipeline".to_string(),
        cases: 1,
        coordinates: report.coordinates,
        max_rel_error: report.max_rel_error,
    })
}

/// Every differentiable op over `seeds` instances, then the pipeline.
pub fn run_suite(seeds: u64) -> Result<Vec<CheckResult>> {
    let mut out = Vec::with_capacity(OpKind::DIFFERENTIABLE.len() + 1);
    for kind in OpKind::DIFFERENTIABLE {
        out.push(check_op(kind, seeds)?);
    }
    out.push(check_end_to_end(0)?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::set_backward_fault;

    #[test]
    fn every_op_passes() {
        for kind in OpKind::DIFFERENTIABLE {
            let r = check_op(kind, 10).unwrap();
            assert!(r.passed(), "{}: {}", r.name, r.max_rel_error);
            assert_eq!(r.cases, 10);
        }
    }

    #[test]
    fn corrupted_rule_is_caught() {
        set_backward_fault(Some(OpKind::Softmax));
        let r = check_op(OpKind::Softmax, 3);
        set_backward_fault(None);
        assert!(r.unwrap().max_rel_error > 1e-2);
    }
}
