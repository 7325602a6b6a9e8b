//! Every optimizer storage mode on the same task and seed.
//!
//! Quantized modes can blow up under strong label skew; those runs are
//! reported with the round they stopped at.

use qlocal::data::{generate_synthetic, Concentration};
use qlocal::fed::{run_federated_with, streams, FederatedConfig};
use qlocal::ndcore::RngStream;
use qlocal::optim::OptimizerMode;

fn main() -> qlocal::Result<()> {
    let alpha: Concentration = std::env::args().nth(1).unwrap_or_else(|| "0.1".into()).parse()?;
    let seed = 42;
    let train = generate_synthetic(&mut RngStream::new(seed, streams::TRAIN_DATA), 5000, 80, 10, 3.0)?;
    let test = generate_synthetic(&mut RngStream::new(seed, streams::TEST_DATA), 1000, 80, 10, 3.0)?;

    println!("alpha {alpha}, 15 rounds");
    for mode in OptimizerMode::ALL {
        let cfg = FederatedConfig { mode, seed, alpha, rounds: 15, ..FederatedConfig::default() };
        let (mut best, mut last) = (0.0f64, 0);
        let res = run_federated_with(&cfg, &train, &test, None, |r| {
            best = best.max(r.test_accuracy);
            last = r.round;
            Ok(())
        });
        match res {
            Ok(run) => println!(
                "{:<11} best {:.4}  final {:.4}  ratio {:.2}",
                mode.name(),
                run.summary.best_accuracy,
                run.summary.final_accuracy,
                run.summary.compression_ratio
            ),
            Err(e) => println!("{:<11} best {best:.4}  diverged after round {last}: {e}", mode.name()),
        }
    }
    Ok(())
}
