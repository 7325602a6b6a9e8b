use qlocal::data::{generate_synthetic, heterogeneity_stats, partition_dirichlet, Concentration};
use qlocal::ndcore::RngStream;

fn main() -> qlocal::Result<()> {
    let data = generate_synthetic(&mut RngStream::new(42, 3), 5000, 80, 10, 3.0)?;
    for conc in ["0.1", "0.5", "1.0", "iid"] {
        let conc: Concentration = conc.parse()?;
        let parts = partition_dirichlet(&mut RngStream::new(42, 1 << 32), &data, 10, conc)?;
        let s = heterogeneity_stats(&parts);
        println!(
            "alpha {conc:<4}  dominant {:5.1}%  size std {:7.1}  sizes {:?}",
            100.0 * s.avg_dominant_pct,
            s.sample_std,
            s.sample_counts
        );
    }

    let parts = partition_dirichlet(&mut RngStream::new(42, 1 << 32), &data, 10, Concentration::Dirichlet(0.1))?;
    println!("class histograms at alpha 0.1:");
    for p in &parts {
        println!("  client {}: {:?}", p.client_id, p.class_histogram);
    }
    Ok(())
}
