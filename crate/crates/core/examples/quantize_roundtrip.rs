//! Quantize a small array both ways and look at what comes back.

use qlocal::quant::{quantize_linear, quantize_log, DEFAULT_EPSILON};

fn main() -> qlocal::Result<()> {
    let x: Vec<f32> = vec![-0.8, -0.1, 0.0, 0.05, 0.3, 0.9, 1.2];
    let q = quantize_linear(&x, 4)?;
    println!("linear, B=4: codes {:?}", &q.payload()[..x.len()]);
    println!("  lo {:?} hi {:?}", q.lo(), q.hi());
    for (a, b) in x.iter().zip(q.dequantize()) {
        println!("  {a:>8.4} -> {b:>8.4}");
    }

    // second moments span decades, which is what the log mode is for
    let v: Vec<f32> = vec![1e-11, 3e-9, 2e-7, 5e-6, 1e-4, 4e-3];
    let q = quantize_log(&v, 8, DEFAULT_EPSILON)?;
    println!("log, B=8: codes {:?}", &q.payload()[..v.len()]);
    for (a, b) in v.iter().zip(q.dequantize()) {
        println!("  {a:>10.3e} -> {b:>10.3e}  rel {:.3}", ((b - a) / a).abs());
    }

    let lin = quantize_linear(&v, 8)?;
    println!("same values, linear:");
    for (a, b) in v.iter().zip(lin.dequantize()) {
        println!("  {a:>10.3e} -> {b:>10.3e}");
    }
    Ok(())
}
