//! A short federated run on the default synthetic task.
//!
//! `cargo run --release --example federated_training -- [mode] [rounds]`

use qlocal::data::{generate_synthetic, Concentration};
use qlocal::fed::{run_federated_with, streams, FederatedConfig};
use qlocal::ndcore::RngStream;

fn main() -> qlocal::Result<()> {
    let mut args = std::env::args().skip(1);
    let mode = args.next().unwrap_or_else(|| "qlocaladam".into()).parse()?;
    let rounds = args.next().map_or(Ok(10), |r| r.parse()).map_err(|_| qlocal::Error::Usage("rounds must be an integer".into()))?;
    let cfg = FederatedConfig { mode, rounds, alpha: Concentration::Dirichlet(0.5), ..FederatedConfig::default() };

    let train = generate_synthetic(&mut RngStream::new(cfg.seed, streams::TRAIN_DATA), 5000, 80, 10, 3.0)?;
    let test = generate_synthetic(&mut RngStream::new(cfg.seed, streams::TEST_DATA), 1000, 80, 10, 3.0)?;

    let run = run_federated_with(&cfg, &train, &test, None, |r| {
        println!(
            "round {:>3}  acc {:.4}  loss {:.4}  clients {:?}",
            r.round, r.test_accuracy, r.test_loss, r.selected_clients
        );
        Ok(())
    })?;
    let s = &run.summary;
    println!(
        "{}: best {:.4} at round {}, final {:.4}; state {} bytes per client ({:.2}x smaller)",
        s.mode, s.best_accuracy, s.best_round, s.final_accuracy, s.state_bytes, s.compression_ratio
    );
    Ok(())
}
