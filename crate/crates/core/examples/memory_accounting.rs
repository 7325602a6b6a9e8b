use qlocal::optim::{init_state, state_memory_bytes, AdamHyper, OptimizerMode};
use qlocal::quant::{quantized_state_bytes, state_bytes_formula};

fn main() -> qlocal::Result<()> {
    // the default MLP: 80 -> 128 -> 64 -> 10
    let shapes = vec![vec![128, 80], vec![128], vec![64, 128], vec![64], vec![10, 64], vec![10]];
    println!("{:<12} {:>10} {:>10} {:>8} {:>8}", "mode", "bytes", "fp32", "ratio", "meta%");
    for mode in OptimizerMode::ALL {
        let st = init_state(&shapes, mode, AdamHyper::default(), 64)?;
        let r = state_memory_bytes(&st);
        println!(
            "{:<12} {:>10} {:>10} {:>8.3} {:>8.2}",
            mode.name(),
            r.total_bytes,
            r.fp32_equivalent_bytes,
            r.compression_ratio,
            100.0 * r.metadata_fraction()
        );
    }

    // per-tensor blocks pad each bias separately, so the exact count sits above 2N + 16N/B
    let n: u64 = shapes.iter().map(|s| s.iter().product::<usize>() as u64).sum();
    println!("N = {n}: formula {:.1} bytes per state pair", state_bytes_formula(n, 64));
    println!("single flat tensor: {} bytes", 2 * quantized_state_bytes(n, 64));
    Ok(())
}
