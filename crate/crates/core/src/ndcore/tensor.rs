use crate::{Error, Result};

/// Row-major FP32 array with a shape.
///
/// Every constructor and public arithmetic operation rejects non-finite
/// values, so a `DenseTensor` never carries NaN or Inf.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseTensor {
    data: Vec<f32>,
    shape: Vec<usize>,
}

fn check_finite(data: &[f32], what: &str) -> Result<()> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::Data(format!(
            "{what}: non-finite value {} at flat index {i}",
            data[i]
        )));
    }
    Ok(())
}

impl DenseTensor {
    pub fn new(data: Vec<f32>, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Dimension(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        check_finite(&data, "tensor construction")?;
        Ok(Self { data, shape })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            data: vec![0.0; shape.iter().product()],
            shape: shape.to_vec(),
        }
    }

    /// 1-D tensor over `data`.
    pub fn from_vec(data: Vec<f32>) -> Result<Self> {
        let n = data.len();
        Self::new(data, vec![n])
    }

    pub fn from_rows(rows: &[Vec<f32>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        Self::new(rows.concat(), vec![rows.len(), cols])
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable view of the elements. Callers must keep values finite.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 0,
            1 => 1,
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn reshape(self, shape: Vec<usize>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::Dimension(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            data: self.data,
            shape,
        })
    }

    fn expect_matrix(&self, name: &str) -> Result<(usize, usize)> {
        if self.shape.len() != 2 {
            return Err(Error::Dimension(format!(
                "{name} must be 2-D, has shape {:?}",
                self.shape
            )));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    /// `self · other`.
    pub fn matmul(&self, other: &DenseTensor) -> Result<DenseTensor> {
        let (m, k) = self.expect_matrix("lhs")?;
        let (k2, n) = other.expect_matrix("rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dimensions differ: {m}x{k} · {k2}x{n}"
            )));
        }
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            // i-k-j keeps each out[i][j] summed over k in increasing order
            for (kk, &a) in a_row.iter().enumerate() {
                let b_row = &other.data[kk * n..(kk + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        check_finite(&out, "matmul")?;
        Ok(DenseTensor {
            data: out,
            shape: vec![m, n],
        })
    }

    /// `self · otherᵀ`, i.e. rows of `self` dotted with rows of `other`.
    pub fn matmul_transposed(&self, other: &DenseTensor) -> Result<DenseTensor> {
        let (m, k) = self.expect_matrix("lhs")?;
        let (n, k2) = other.expect_matrix("rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul_transposed inner dimensions differ: {m}x{k} · ({n}x{k2})ᵀ"
            )));
        }
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            let a_row = &self.data[i * k..(i + 1) * k];
            for j in 0..n {
                let b_row = &other.data[j * k..(j + 1) * k];
                let mut acc = 0.0f32;
                for (&a, &b) in a_row.iter().zip(b_row) {
                    acc += a * b;
                }
                out[i * n + j] = acc;
            }
        }
        check_finite(&out, "matmul_transposed")?;
        Ok(DenseTensor {
            data: out,
            shape: vec![m, n],
        })
    }

    /// `selfᵀ · other`.
    pub fn transposed_matmul(&self, other: &DenseTensor) -> Result<DenseTensor> {
        let (k, m) = self.expect_matrix("lhs")?;
        let (k2, n) = other.expect_matrix("rhs")?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "transposed_matmul inner dimensions differ: ({k}x{m})ᵀ · {k2}x{n}"
            )));
        }
        let mut out = vec![0.0f32; m * n];
        for kk in 0..k {
            let a_row = &self.data[kk * m..(kk + 1) * m];
            let b_row = &other.data[kk * n..(kk + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out[i * n..(i + 1) * n];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        check_finite(&out, "transposed_matmul")?;
        Ok(DenseTensor {
            data: out,
            shape: vec![m, n],
        })
    }

    /// Adds `bias` to every row of a 2-D tensor in place.
    pub fn add_row_vector(&mut self, bias: &DenseTensor) -> Result<()> {
        let (_, n) = self.expect_matrix("self")?;
        if bias.len() != n {
            return Err(Error::Dimension(format!(
                "row vector of length {} cannot broadcast over {n} columns",
                bias.len()
            )));
        }
        for row in self.data.chunks_exact_mut(n) {
            for (v, &b) in row.iter_mut().zip(&bias.data) {
                *v += b;
            }
        }
        check_finite(&self.data, "add_row_vector")
    }

    /// Column sums of a 2-D tensor, accumulated in f64.
    pub fn sum_rows(&self) -> Result<DenseTensor> {
        let (_, n) = self.expect_matrix("self")?;
        let mut acc = vec![0.0f64; n];
        for row in self.data.chunks_exact(n.max(1)) {
            for (a, &v) in acc.iter_mut().zip(row) {
                *a += f64::from(v);
            }
        }
        DenseTensor::new(acc.into_iter().map(|v| v as f32).collect(), vec![n])
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Result<DenseTensor> {
        DenseTensor::new(self.data.iter().map(|&v| f(v)).collect(), self.shape.clone())
    }

    pub fn zip_map(&self, other: &DenseTensor, f: impl Fn(f32, f32) -> f32) -> Result<DenseTensor> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "elementwise op on {:?} and {:?}",
                self.shape, other.shape
            )));
        }
        DenseTensor::new(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
            self.shape.clone(),
        )
    }

    pub fn scale(&self, s: f32) -> Result<DenseTensor> {
        self.map(|v| v * s)
    }

    /// Sum of all elements in f64.
    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| f64::from(v)).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, v| m.max(v.abs()))
    }
}

/// Free-function form of [`DenseTensor::matmul`].
pub fn matmul(a: &DenseTensor, b: &DenseTensor) -> Result<DenseTensor> {
    a.matmul(b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndcore::RngStream;

    fn naive(a: &DenseTensor, b: &DenseTensor) -> Vec<f32> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0f32;
                for kk in 0..k {
                    s += a.data()[i * k + kk] * b.data()[kk * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn identity_is_neutral() {
        let a = DenseTensor::from_rows(&[vec![1.5, -2.0], vec![0.25, 4.0]]).unwrap();
        assert_eq!(DenseTensor::identity(2).matmul(&a).unwrap(), a);
    }

    #[test]
    fn hand_evaluated_product() {
        let a = DenseTensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = DenseTensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), &[2, 1]);
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn zero_annihilates() {
        let a = DenseTensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let z = DenseTensor::zeros(&[2, 3]);
        assert!(a.matmul(&z).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_dimension_error() {
        let a = DenseTensor::zeros(&[2, 3]);
        let b = DenseTensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
        assert!(matches!(
            DenseTensor::new(vec![1.0; 5], vec![2, 3]),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn non_finite_rejected() {
        assert!(matches!(
            DenseTensor::from_vec(vec![1.0, f32::NAN]),
            Err(Error::Data(_))
        ));
        let big = DenseTensor::from_rows(&[vec![f32::MAX, f32::MAX]]).unwrap();
        let col = DenseTensor::from_rows(&[vec![2.0], vec![2.0]]).unwrap();
        assert!(matches!(big.matmul(&col), Err(Error::Data(_))));
    }

    #[test]
    fn matches_naive_triple_loop_exactly() {
        let mut rng = RngStream::new(7, 0);
        for _ in 0..200 {
            let a = DenseTensor::new(rng.gaussian_vec(0.0, 1.0, 16), vec![4, 4]).unwrap();
            let b = DenseTensor::new(rng.gaussian_vec(0.0, 1.0, 16), vec![4, 4]).unwrap();
            assert_eq!(a.matmul(&b).unwrap().data(), naive(&a, &b).as_slice());
        }
    }

    #[test]
    fn transposed_variants_agree_with_matmul() {
        let mut rng = RngStream::new(8, 0);
        let a = DenseTensor::new(rng.gaussian_vec(0.0, 1.0, 15), vec![3, 5]).unwrap();
        let b = DenseTensor::new(rng.gaussian_vec(0.0, 1.0, 20), vec![4, 5]).unwrap();
        let bt = DenseTensor::new(
            (0..5)
                .flat_map(|c| (0..4).map(move |r| (r, c)))
                .map(|(r, c)| b.data()[r * 5 + c])
                .collect(),
            vec![5, 4],
        )
        .unwrap();
        let want = a.matmul(&bt).unwrap();
        let got = a.matmul_transposed(&b).unwrap();
        for (x, y) in want.data().iter().zip(got.data()) {
            assert!((x - y).abs() < 1e-5);
        }
        // aᵀ·a' with a' = (3x4)
        let c = DenseTensor::new(rng.gaussian_vec(0.0, 1.0, 12), vec![3, 4]).unwrap();
        let atc = a.transposed_matmul(&c).unwrap();
        assert_eq!(atc.shape(), &[5, 4]);
        for i in 0..5 {
            for j in 0..4 {
                let s: f32 = (0..3).map(|k| a.data()[k * 5 + i] * c.data()[k * 4 + j]).sum();
                assert!((atc.data()[i * 4 + j] - s).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn row_broadcast_and_column_sums() {
        let mut t = DenseTensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        t.add_row_vector(&DenseTensor::from_vec(vec![10.0, 20.0]).unwrap())
            .unwrap();
        assert_eq!(t.data(), &[11.0, 22.0, 13.0, 24.0]);
        assert_eq!(t.sum_rows().unwrap().data(), &[24.0, 46.0]);
    }
}
