use qlocal::analysis::{histogram_warmup, state_histograms};
use qlocal::optim::OptimizerMode;

fn main() -> qlocal::Result<()> {
    let w = histogram_warmup(42, 50, OptimizerMode::Fp32)?;
    let h = state_histograms(&w.state)?;
    println!("after {} steps, max |g| {:.3e}", w.steps, w.max_abs_grad);
    println!("m: {} values in [{:.3e}, {:.3e}]", h.momentum.total, h.momentum.min, h.momentum.max);
    println!(
        "v: {} values in [{:.3e}, {:.3e}], {:.1} decades occupied",
        h.variance.total,
        h.variance.min,
        h.variance.max,
        h.variance.occupied_span()
    );
    for ((lo, hi), c) in h.variance.edges.windows(2).map(|e| (e[0], e[1])).zip(&h.variance.counts) {
        if *c > 0 {
            println!("  [10^{lo:.2}, 10^{hi:.2})  {c:>6} {}", "#".repeat((*c as f64).log2().ceil() as usize));
        }
    }
    Ok(())
}
