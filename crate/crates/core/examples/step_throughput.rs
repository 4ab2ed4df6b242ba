//! Times forward/backward/update steps on the replication network.

use std::time::Instant;

use qsd_core::dilution::DilutionConfig;
use qsd_core::netcore::{
    backward, forward, init_variance_scaling, sgd_momentum_step, ForwardMode, MlpSpec,
    OptimizerState, Tensor,
};
use qsd_core::stochastics::RngStream;

fn main() {
    let spec = MlpSpec::mnist(DilutionConfig::qsd(0.2, 0.2).unwrap());
    let mut init = RngStream::new(0, 0);
    let mut model = init_variance_scaling(&spec, &mut init).unwrap();
    let mut state = OptimizerState::new(&model, 0.9);
    let mut dilution = RngStream::new(0, 1);
    let batch =
        Tensor::from_vec(&[64, 784], (0..64 * 784).map(|_| init.uniform()).collect()).unwrap();
    let labels: Vec<u8> = (0..64).map(|i| (i % 10) as u8).collect();

    let steps = 200;
    let start = Instant::now();
    for _ in 0..steps {
        let (_, cache) = forward(&model, &batch, ForwardMode::Train(&mut dilution), None).unwrap();
        let grads = backward(&model, &cache, &labels).unwrap();
        sgd_momentum_step(&mut model, &grads, &mut state, 0.01).unwrap();
    }
    let secs = start.elapsed().as_secs_f64();
    let flops = 6.0 * 64.0 * model.parameter_count() as f64 * steps as f64;
    println!(
        "{steps} steps in {secs:.3}s: {:.2} ms/step, {:.2} GFLOP/s",
        1e3 * secs / steps as f64,
        flops / secs / 1e9
    );
}
