//! Dense row-major tensors and the matrix kernels the layers are built on.

use std::fmt::Debug;
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Element type of a [`Tensor`]. Implemented for `f32` (training) and `f64`
/// (gradient checking).
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Default + Debug + Send + Sync + 'static
{
    const PRECISION: Precision;

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion is total for float types")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float to f64 is total")
    }
}

impl Scalar for f32 {
    const PRECISION: Precision = Precision::Single;
}

impl Scalar for f64 {
    const PRECISION: Precision = Precision::Double;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    Single,
    Double,
}

/// Dense N-dimensional array, last axis fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::config(format!("tensor shape {shape:?} has a zero extent")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::config(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, T::zero())
    }

    pub fn full(shape: &[usize], value: T) -> Self {
        assert!(shape.iter().all(|&d| d > 0), "zero extent in {shape:?}");
        let len = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let len: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..len).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn precision(&self) -> Precision {
        T::PRECISION
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Row-major flat offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        assert_eq!(index.len(), self.shape.len(), "index rank mismatch");
        index
            .iter()
            .zip(&self.shape)
            .fold(0, |acc, (&i, &d)| {
                assert!(i < d, "index {i} out of bounds for extent {d}");
                acc * d + i
            })
    }

    /// Inverse of [`Tensor::offset`].
    pub fn unravel(&self, mut flat: usize) -> Vec<usize> {
        let mut index = vec![0; self.shape.len()];
        for (slot, &d) in index.iter_mut().zip(&self.shape).rev() {
            *slot = flat % d;
            flat /= d;
        }
        index
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    pub fn set(&mut self, index: &[usize], value: T) {
        let off = self.offset(index);
        self.data[off] = value;
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Fails with a numeric error naming `what` when any element is NaN or infinite.
    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        match self.data.iter().position(|v| !v.is_finite()) {
            None => Ok(()),
            Some(i) => Err(Error::numeric(format!(
                "{what} has non-finite value at index {:?}",
                self.unravel(i)
            ))),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|&v| U::from_f64_lossy(v.as_f64()))
                .collect(),
        }
    }

    /// Sub-tensor along the leading axis.
    pub fn slice_outer(&self, index: usize) -> Tensor<T> {
        assert!(self.ndim() >= 2 && index < self.shape[0]);
        let inner: usize = self.shape[1..].iter().product();
        Tensor {
            shape: self.shape[1..].to_vec(),
            data: self.data[index * inner..(index + 1) * inner].to_vec(),
        }
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::config("cannot stack zero tensors"))?;
        let mut data = Vec::with_capacity(first.len() * items.len());
        for t in items {
            if t.shape != first.shape {
                return Err(Error::config(format!(
                    "cannot stack shapes {:?} and {:?}",
                    first.shape, t.shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }
}

fn matrix_dims<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<(usize, usize)> {
    match *t.shape() {
        [r, c] => Ok((r, c)),
        ref s => Err(Error::config(format!("{what} must be 2-D, got shape {s:?}"))),
    }
}

/// Matrix product of an `M×K` and a `K×N` tensor.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, k) = matrix_dims(a, "left operand")?;
    let (k2, n) = matrix_dims(b, "right operand")?;
    if k != k2 {
        return Err(Error::config(format!(
            "matmul inner dimensions differ: {m}x{k} · {k2}x{n}"
        )));
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: gemm(a.data(), b.data(), m, k, n),
    })
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    let (m, n) = matrix_dims(a, "transpose operand")?;
    Ok(Tensor {
        shape: vec![n, m],
        data: transpose_raw(a.data(), m, n),
    })
}

pub(crate) fn transpose_raw<T: Copy + Default>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::default(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

const PARALLEL_WORK: usize = 1 << 16;

/// Row-major `m×k · k×n`. Each output element accumulates over `k` in index
/// order, so results do not depend on how rows are split across threads.
pub(crate) fn gemm<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    let mut out = vec![T::zero(); m * n];
    let row = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &b_pj) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * b_pj;
            }
        }
    };
    if m * k * n >= PARALLEL_WORK && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

/// Row-major `m×k · (n×k)ᵀ`, computed as row dot products without
/// materialising the transpose.
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    let mut out = vec![T::zero(); m * n];
    let row = |(i, out_row): (usize, &mut [T])| {
        let a_row = &a[i * k..(i + 1) * k];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            *o = a_row
                .iter()
                .zip(b_row)
                .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
        }
    };
    if m * k * n >= PARALLEL_WORK && m > 1 {
        out.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        out.chunks_mut(n).enumerate().for_each(row);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn triple_loop(a: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = Tensor::zeros(&[m, n]);
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a.get(&[i, p]) * b.get(&[p, j]);
                }
                out.set(&[i, j], s);
            }
        }
        out
    }

    #[test]
    fn identity_times_a_is_a() {
        let a = random(&[4, 3], 1);
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        assert_eq!(matmul(&eye, &a).unwrap(), a);
    }

    #[test]
    fn scalar_product() {
        let a = Tensor::new(vec![1, 1], vec![3.0f32]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![-2.5f32]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[-7.5]);
    }

    #[test]
    fn matches_triple_loop_oracle() {
        let a = random(&[7, 5], 2);
        let b = random(&[5, 3], 3);
        let got = matmul(&a, &b).unwrap();
        let want = triple_loop(&a, &b);
        for (g, w) in got.data().iter().zip(want.data()) {
            assert!((g - w).abs() <= 1e-6 * w.abs().max(1.0));
        }
    }

    #[test]
    fn parallel_path_matches_oracle_bitwise() {
        let a = random(&[70, 40], 4);
        let b = random(&[40, 30], 5);
        const { assert!(70 * 40 * 30 >= PARALLEL_WORK) };
        assert_eq!(matmul(&a, &b).unwrap(), triple_loop(&a, &b));
    }

    #[test]
    fn gemm_nt_matches_explicit_transpose() {
        let a = random(&[6, 4], 6);
        let b = random(&[5, 4], 7);
        let bt = transpose(&b).unwrap();
        let want = triple_loop(&a, &bt);
        let got = gemm_nt(a.data(), b.data(), 6, 4, 5);
        for (g, w) in got.iter().zip(want.data()) {
            assert!((g - w).abs() < 1e-12);
        }
    }

    #[test]
    fn inner_dimension_mismatch_is_config_error() {
        let a = random(&[2, 3], 0);
        let b = random(&[2, 3], 0);
        let err = matmul(&a, &b).unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("2x3 · 2x3")));
    }

    #[test]
    fn shape_and_length_must_agree() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn non_finite_values_are_reported() {
        let mut t = Tensor::<f32>::zeros(&[2, 2]);
        t.set(&[1, 0], f32::NAN);
        let err = t.ensure_finite("probe").unwrap_err();
        assert!(matches!(err, Error::Numeric(ref m) if m.contains("[1, 0]")));
    }

    proptest! {
        #[test]
        fn offset_round_trips(dims in prop::collection::vec(1usize..5, 1..5), seed in 0u64..1000) {
            let t = Tensor::<f32>::zeros(&dims);
            let flat = (seed as usize) % t.len();
            let idx = t.unravel(flat);
            prop_assert_eq!(t.offset(&idx), flat);
        }

        #[test]
        fn transpose_is_an_involution(r in 1usize..6, c in 1usize..6, seed in 0u64..100) {
            let a = random(&[r, c], seed);
            prop_assert_eq!(transpose(&transpose(&a).unwrap()).unwrap(), a);
        }
    }
}
