use qlocal::analysis::{compare_storage, log_uniform, precision_study};
use qlocal::ndcore::RngStream;

fn main() -> qlocal::Result<()> {
    let s = precision_study(&mut RngStream::new(42, 0), 3000, 1e-7, 1.0, 64)?;
    println!(
        "log-space {:.2}%  dynamic tree {:.2}%  ({:.1}x)",
        100.0 * s.log_space.mean_relative_error,
        100.0 * s.dynamic_tree.mean_relative_error,
        s.error_ratio()
    );
    print!("{}", s.to_tsv());

    let v = log_uniform(&mut RngStream::new(5, 0), 3000, 1e-12, 1e-3)?;
    let c = compare_storage(&v, 64)?;
    println!(
        "values in [1e-12, 1e-3]: linear zeroes {:.1}%, {:.1}% off by over half; log mean error {:.2}%",
        100.0 * c.linear_fraction_zeroed,
        100.0 * c.linear_fraction_over_half,
        100.0 * c.log_mean_relative_error
    );
    Ok(())
}
