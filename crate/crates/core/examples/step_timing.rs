//! Times one forward and backward pass of the encoder and HCD on a batch
//! of eight 32×32 images.

use std::time::Instant;

use semcom::model::{Binding, DecoderId, Model, ModelConfig, ParameterSet};
use semcom::tensor::{Tape, Tensor};

fn main() {
    let cfg = ModelConfig::default();
    let model = Model::new(cfg.clone()).unwrap();
    let params = ParameterSet::build(&cfg, 0).unwrap();
    let batch = 8;
    let values = (0..batch * 32 * 32 * 3)
        .map(|i| (i as f64 * 0.01).sin() * 0.5 + 0.5)
        .collect();
    let img = Tensor::new(vec![batch, 32, 32, 3], values).unwrap();
    for _ in 0..3 {
        let t0 = Instant::now();
        let mut tape = Tape::new();
        let mut binding = Binding::new();
        let x = tape.constant(img.clone());
        let z = model.encode(&mut tape, &params, &mut binding, x).unwrap();
        let z = tape.normalize_power(z).unwrap();
        let out = model
            .decode(&mut tape, &params, &mut binding, z, DecoderId::Hcd, 32, 32)
            .unwrap();
        let loss = tape.mse(out, x).unwrap();
        let t1 = Instant::now();
        tape.backward(loss).unwrap();
        let t2 = Instant::now();
        println!(
            "fwd {:?} bwd {:?} flops {} nodes {}",
            t1 - t0,
            t2 - t1,
            tape.flops(),
            tape.len()
        );
    }
}
