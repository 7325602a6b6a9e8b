//! Save a quantized optimizer state and a single tensor, then read both back.

use qlocal::ndcore::{DenseTensor, RngStream};
use qlocal::optim::{init_state, load_checkpoint, save_checkpoint, AdamHyper, OptimizerMode};
use qlocal::quant::{quantize_log, QuantizedTensor, DEFAULT_EPSILON, HEADER_LEN};

fn main() -> qlocal::Result<()> {
    let mut rng = RngStream::new(1, 0);
    let shapes = vec![vec![16, 8], vec![16]];
    let mut params: Vec<DenseTensor> = shapes.iter().map(|s| DenseTensor::zeros(s)).collect();
    let mut st = init_state(&shapes, OptimizerMode::QLocalAdam, AdamHyper::default(), 64)?;
    for _ in 0..3 {
        let grads: Vec<DenseTensor> = shapes
            .iter()
            .map(|s| DenseTensor::new(rng.gaussian_vec(0.0, 0.1, s.iter().product()), s.clone()))
            .collect::<qlocal::Result<_>>()?;
        st.step(&mut params, &grads)?;
    }

    let bytes = save_checkpoint(&st)?;
    let back = load_checkpoint(&bytes)?;
    println!("checkpoint: {} bytes, step {}, identical: {}", bytes.len(), back.step_count(), back == st);

    let v = st.variance().remove(0);
    let q = quantize_log(&v, 64, DEFAULT_EPSILON)?;
    let raw = q.to_bytes()?;
    println!("v[0]: {} values -> {} bytes ({} header)", v.len(), raw.len(), HEADER_LEN);
    println!("round trip identical: {}", QuantizedTensor::from_bytes(&raw)? == q);
    Ok(())
}
