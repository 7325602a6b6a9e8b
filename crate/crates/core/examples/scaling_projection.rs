use qlocal::analysis::{scaling_projection, scaling_tsv};

fn main() -> qlocal::Result<()> {
    let rows = scaling_projection(&[11_000_000, 25_000_000, 125_000_000, 1_300_000_000, 7_000_000_000], 64)?;
    print!("{}", scaling_tsv(&rows));
    Ok(())
}
