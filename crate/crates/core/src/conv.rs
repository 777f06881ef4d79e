//! Zero-padded 2-D cross-correlation through im2col and a single GEMM.
//!
//! Layouts: images are `H×W×C`, kernels are `k×k×C×F`. Reading the kernel
//! tensor as a `(k·k·C)×F` matrix lines its rows up with the im2col patch
//! columns, so a forward pass is `im2col(x) · K + b`.

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, transpose_raw, Scalar, Tensor};

/// Square-kernel convolution geometry. Stride is always 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub padding: usize,
    pub stride: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvGeometry {
    pub fn new(kernel: usize, padding: usize, in_channels: usize, out_channels: usize) -> Result<Self> {
        if kernel == 0 || in_channels == 0 || out_channels == 0 {
            return Err(Error::config(format!(
                "kernel ({kernel}), in_channels ({in_channels}) and out_channels ({out_channels}) must be positive"
            )));
        }
        Ok(ConvGeometry {
            kernel,
            padding,
            stride: 1,
            in_channels,
            out_channels,
        })
    }

    /// `input + 2·padding − kernel + 1`, or a configuration error if that is below 1.
    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::config(format!(
                "input extent {input} with padding {} is smaller than kernel {}",
                self.padding, self.kernel
            )));
        }
        Ok(padded - self.kernel + 1)
    }

    pub fn kernel_shape(&self) -> [usize; 4] {
        [self.kernel, self.kernel, self.in_channels, self.out_channels]
    }

    fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }

    fn check_input<T: Scalar>(&self, input: &Tensor<T>) -> Result<(usize, usize, usize, usize)> {
        let [h, w, c] = *input.shape() else {
            return Err(Error::config(format!(
                "convolution input must be H×W×C, got {:?}",
                input.shape()
            )));
        };
        if c != self.in_channels {
            return Err(Error::config(format!(
                "input has {c} channels but geometry expects {}",
                self.in_channels
            )));
        }
        let oh = self.output_extent(h)?;
        let ow = self.output_extent(w)?;
        Ok((h, w, oh, ow))
    }

    fn check_kernels<T: Scalar>(&self, kernels: &Tensor<T>) -> Result<()> {
        if kernels.shape() != self.kernel_shape() {
            return Err(Error::config(format!(
                "kernel tensor shape {:?} does not match geometry {:?}",
                kernels.shape(),
                self.kernel_shape()
            )));
        }
        Ok(())
    }
}

/// Unrolls every zero-padded receptive field into one row of an
/// `(H'·W')×(k·k·C)` matrix, output positions in row-major order.
pub fn im2col<T: Scalar>(input: &Tensor<T>, geom: &ConvGeometry) -> Result<Tensor<T>> {
    let (h, w, oh, ow) = geom.check_input(input)?;
    let data = im2col_raw(input.data(), h, w, oh, ow, geom);
    Tensor::new(vec![oh * ow, geom.patch_len()], data)
}

fn im2col_raw<T: Scalar>(
    x: &[T],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    geom: &ConvGeometry,
) -> Vec<T> {
    let (k, p, c) = (geom.kernel, geom.padding, geom.in_channels);
    let cols = geom.patch_len();
    let mut out = vec![T::zero(); oh * ow * cols];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &mut out[(oy * ow + ox) * cols..(oy * ow + ox + 1) * cols];
            for ky in 0..k {
                let iy = oy + ky;
                if iy < p || iy - p >= h {
                    continue;
                }
                let iy = iy - p;
                for kx in 0..k {
                    let ix = ox + kx;
                    if ix < p || ix - p >= w {
                        continue;
                    }
                    let ix = ix - p;
                    let src = &x[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                    row[(ky * k + kx) * c..(ky * k + kx + 1) * c].copy_from_slice(src);
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatter-adds patch rows back onto an `H×W×C` image.
fn col2im_raw<T: Scalar>(
    cols_data: &[T],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    geom: &ConvGeometry,
) -> Vec<T> {
    let (k, p, c) = (geom.kernel, geom.padding, geom.in_channels);
    let cols = geom.patch_len();
    let mut out = vec![T::zero(); h * w * c];
    for oy in 0..oh {
        for ox in 0..ow {
            let row = &cols_data[(oy * ow + ox) * cols..(oy * ow + ox + 1) * cols];
            for ky in 0..k {
                let iy = oy + ky;
                if iy < p || iy - p >= h {
                    continue;
                }
                let iy = iy - p;
                for kx in 0..k {
                    let ix = ox + kx;
                    if ix < p || ix - p >= w {
                        continue;
                    }
                    let ix = ix - p;
                    let dst = &mut out[(iy * w + ix) * c..(iy * w + ix + 1) * c];
                    let src = &row[(ky * k + kx) * c..(ky * k + kx + 1) * c];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d = *d + s;
                    }
                }
            }
        }
    }
    out
}

/// Cross-correlation of a zero-padded `H×W×C` image with `F` kernels plus bias.
pub fn conv2d_forward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    bias: &Tensor<T>,
    geom: &ConvGeometry,
) -> Result<Tensor<T>> {
    let (h, w, oh, ow) = geom.check_input(input)?;
    geom.check_kernels(kernels)?;
    if bias.shape() != [geom.out_channels] {
        return Err(Error::config(format!(
            "bias shape {:?} does not match {} filters",
            bias.shape(),
            geom.out_channels
        )));
    }
    input.ensure_finite("convolution input")?;
    let cols = im2col_raw(input.data(), h, w, oh, ow, geom);
    let f = geom.out_channels;
    let mut out = gemm(&cols, kernels.data(), oh * ow, geom.patch_len(), f);
    for px in out.chunks_mut(f) {
        for (o, &b) in px.iter_mut().zip(bias.data()) {
            *o = *o + b;
        }
    }
    let out = Tensor::new(vec![oh, ow, f], out)?;
    out.ensure_finite("convolution output")?;
    Ok(out)
}

/// Gradients of [`conv2d_forward`] with respect to its three inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGrads<T> {
    pub input: Tensor<T>,
    pub kernels: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv2d_backward<T: Scalar>(
    input: &Tensor<T>,
    kernels: &Tensor<T>,
    geom: &ConvGeometry,
    upstream: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let (h, w, oh, ow) = geom.check_input(input)?;
    geom.check_kernels(kernels)?;
    let f = geom.out_channels;
    if upstream.shape() != [oh, ow, f] {
        return Err(Error::config(format!(
            "upstream gradient shape {:?} does not match forward output [{oh}, {ow}, {f}]",
            upstream.shape()
        )));
    }
    let positions = oh * ow;
    let patch = geom.patch_len();
    let cols = im2col_raw(input.data(), h, w, oh, ow, geom);

    // dK = colsᵀ · G
    let cols_t = transpose_raw(&cols, positions, patch);
    let grad_kernels = gemm(&cols_t, upstream.data(), patch, positions, f);

    // dcols = G · Kᵀ, folded back onto the image
    let grad_cols = gemm_nt(upstream.data(), kernels.data(), positions, f, patch);
    let grad_input = col2im_raw(&grad_cols, h, w, oh, ow, geom);

    let mut grad_bias = vec![T::zero(); f];
    for px in upstream.data().chunks(f) {
        for (g, &u) in grad_bias.iter_mut().zip(px) {
            *g = *g + u;
        }
    }

    Ok(ConvGrads {
        input: Tensor::new(input.shape().to_vec(), grad_input)?,
        kernels: Tensor::new(kernels.shape().to_vec(), grad_kernels)?,
        bias: Tensor::new(vec![f], grad_bias)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct definition: out[y,x,f] = b[f] + Σ x_pad[y+i, x+j, c] · K[i,j,c,f].
    fn direct_conv(x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>, pad: usize) -> Tensor<f64> {
        let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (ks, f) = (k.shape()[0], k.shape()[3]);
        let (oh, ow) = (h + 2 * pad - ks + 1, w + 2 * pad - ks + 1);
        let mut out = Tensor::zeros(&[oh, ow, f]);
        for oy in 0..oh {
            for ox in 0..ow {
                for fi in 0..f {
                    let mut s = b.get(&[fi]);
                    for i in 0..ks {
                        for j in 0..ks {
                            let (py, px) = (oy + i, ox + j);
                            if py < pad || px < pad || py - pad >= h || px - pad >= w {
                                continue;
                            }
                            for ci in 0..c {
                                s += x.get(&[py - pad, px - pad, ci]) * k.get(&[i, j, ci, fi]);
                            }
                        }
                    }
                    out.set(&[oy, ox, fi], s);
                }
            }
        }
        out
    }

    fn assert_close(a: &Tensor<f64>, b: &Tensor<f64>, rel: f64) {
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() <= rel * y.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn all_ones_sum() {
        let g = ConvGeometry::new(3, 0, 1, 1).unwrap();
        let x = Tensor::full(&[3, 3, 1], 1.0f32);
        let k = Tensor::full(&[3, 3, 1, 1], 1.0f32);
        let b = Tensor::zeros(&[1]);
        let y = conv2d_forward(&x, &k, &b, &g).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.data(), &[9.0]);
    }

    #[test]
    fn center_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let g = ConvGeometry::new(3, 1, 1, 1).unwrap();
        let x = random(&[4, 4, 1], &mut rng);
        let mut k = Tensor::zeros(&[3, 3, 1, 1]);
        k.set(&[1, 1, 0, 0], 1.0);
        let y = conv2d_forward(&x, &k, &Tensor::zeros(&[1]), &g).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn padded_random_case_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let g = ConvGeometry::new(3, 2, 2, 2).unwrap();
        let x = random(&[5, 5, 2], &mut rng);
        let k = random(&[3, 3, 2, 2], &mut rng);
        let b = random(&[2], &mut rng);
        let y = conv2d_forward(&x, &k, &b, &g).unwrap();
        assert_eq!(y.shape(), &[7, 7, 2]);
        assert_close(&y, &direct_conv(&x, &k, &b, 2), 1e-6);
    }

    #[test]
    fn im2col_single_pixel() {
        let g = ConvGeometry::new(1, 0, 3, 1).unwrap();
        let x = Tensor::new(vec![1, 1, 3], vec![0.5f32, -1.0, 2.0]).unwrap();
        let cols = im2col(&x, &g).unwrap();
        assert_eq!(cols.shape(), &[1, 3]);
        assert_eq!(cols.data(), x.data());
    }

    #[test]
    fn im2col_whole_image_patch() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = ConvGeometry::new(4, 0, 2, 1).unwrap();
        let x = random(&[4, 4, 2], &mut rng);
        let cols = im2col(&x, &g).unwrap();
        assert_eq!(cols.shape(), &[1, 32]);
        assert_eq!(cols.data(), x.data());
    }

    #[test]
    fn im2col_times_reshaped_kernels_reconstructs_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = ConvGeometry::new(3, 1, 3, 4).unwrap();
        let x = random(&[6, 5, 3], &mut rng);
        let k = random(&[3, 3, 3, 4], &mut rng);
        let b = random(&[4], &mut rng);
        let cols = im2col(&x, &g).unwrap();
        let kmat = k.clone().reshape(&[27, 4]).unwrap();
        let mut prod = crate::tensor::matmul(&cols, &kmat).unwrap();
        for px in prod.data_mut().chunks_mut(4) {
            for (o, bb) in px.iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
        let direct = direct_conv(&x, &k, &b, 1);
        assert_close(&prod.reshape(&[6, 5, 4]).unwrap(), &direct, 1e-6);
    }

    #[test]
    fn zero_upstream_gives_zero_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let g = ConvGeometry::new(3, 1, 2, 3).unwrap();
        let x = random(&[4, 4, 2], &mut rng);
        let k = random(&[3, 3, 2, 3], &mut rng);
        let grads = conv2d_backward(&x, &k, &g, &Tensor::zeros(&[4, 4, 3])).unwrap();
        assert!(grads.input.data().iter().all(|&v| v == 0.0));
        assert!(grads.kernels.data().iter().all(|&v| v == 0.0));
        assert!(grads.bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_chain_rule() {
        let g = ConvGeometry::new(1, 0, 1, 1).unwrap();
        let x = Tensor::new(vec![1, 1, 1], vec![1.5f64]).unwrap();
        let k = Tensor::new(vec![1, 1, 1, 1], vec![-0.75f64]).unwrap();
        let up = Tensor::new(vec![1, 1, 1], vec![2.0f64]).unwrap();
        let grads = conv2d_backward(&x, &k, &g, &up).unwrap();
        assert_eq!(grads.input.data(), &[-1.5]);
        assert_eq!(grads.kernels.data(), &[3.0]);
        assert_eq!(grads.bias.data(), &[2.0]);
    }

    #[test]
    fn gradients_match_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let g = ConvGeometry::new(3, 2, 2, 2).unwrap();
        let x = random(&[4, 3, 2], &mut rng);
        let k = random(&[3, 3, 2, 2], &mut rng);
        let b = random(&[2], &mut rng);
        let up = random(&[6, 5, 2], &mut rng);
        let loss = |x: &Tensor<f64>, k: &Tensor<f64>, b: &Tensor<f64>| -> f64 {
            let y = conv2d_forward(x, k, b, &g).unwrap();
            y.data().iter().zip(up.data()).map(|(a, u)| a * u).sum()
        };
        let grads = conv2d_backward(&x, &k, &g, &up).unwrap();
        let eps = 1e-5;
        let fd = |t: &Tensor<f64>, which: usize| -> Vec<f64> {
            (0..t.len())
                .map(|i| {
                    let mut plus = t.clone();
                    let mut minus = t.clone();
                    plus.data_mut()[i] += eps;
                    minus.data_mut()[i] -= eps;
                    let (lp, lm) = match which {
                        0 => (loss(&plus, &k, &b), loss(&minus, &k, &b)),
                        1 => (loss(&x, &plus, &b), loss(&x, &minus, &b)),
                        _ => (loss(&x, &k, &plus), loss(&x, &k, &minus)),
                    };
                    (lp - lm) / (2.0 * eps)
                })
                .collect()
        };
        for (analytic, which) in [(&grads.input, 0), (&grads.kernels, 1), (&grads.bias, 2)] {
            let numeric = fd(if which == 0 { &x } else if which == 1 { &k } else { &b }, which);
            for (a, n) in analytic.data().iter().zip(&numeric) {
                let rel = (a - n).abs() / (a.abs() + n.abs()).max(1e-8);
                assert!(rel < 1e-4, "tensor {which}: analytic {a} numeric {n}");
            }
        }
    }

    #[test]
    fn bias_gradient_sums_spatial_positions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let g = ConvGeometry::new(3, 0, 1, 2).unwrap();
        let x = random(&[5, 5, 1], &mut rng);
        let k = random(&[3, 3, 1, 2], &mut rng);
        let up = random(&[3, 3, 2], &mut rng);
        let grads = conv2d_backward(&x, &k, &g, &up).unwrap();
        for f in 0..2 {
            let s: f64 = up.data().iter().skip(f).step_by(2).sum();
            assert!((grads.bias.data()[f] - s).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors_name_dimensions() {
        let g = ConvGeometry::new(3, 0, 2, 1).unwrap();
        let x = Tensor::<f32>::zeros(&[4, 4, 3]);
        let err = conv2d_forward(&x, &Tensor::zeros(&[3, 3, 2, 1]), &Tensor::zeros(&[1]), &g)
            .unwrap_err();
        assert!(matches!(err, Error::Config(ref m) if m.contains("3 channels")));

        let small = Tensor::<f32>::zeros(&[2, 2, 2]);
        assert!(conv2d_forward(&small, &Tensor::zeros(&[3, 3, 2, 1]), &Tensor::zeros(&[1]), &g).is_err());

        let up = Tensor::<f32>::zeros(&[3, 3, 1]);
        let x = Tensor::<f32>::zeros(&[4, 4, 2]);
        assert!(conv2d_backward(&x, &Tensor::zeros(&[3, 3, 2, 1]), &g, &up).is_err());
    }

    #[test]
    fn non_finite_input_is_numeric_error() {
        let g = ConvGeometry::new(1, 0, 1, 1).unwrap();
        let x = Tensor::new(vec![1, 1, 1], vec![f32::INFINITY]).unwrap();
        let err = conv2d_forward(&x, &Tensor::full(&[1, 1, 1, 1], 1.0), &Tensor::zeros(&[1]), &g)
            .unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
    }

    proptest! {
        #[test]
        fn im2col_conv_equals_direct(
            h in 1usize..9, w in 1usize..9, c in 1usize..4, f in 1usize..5,
            k in 1usize..4, p in 0usize..3, seed in 0u64..10_000,
        ) {
            prop_assume!(h + 2 * p >= k && w + 2 * p >= k);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = ConvGeometry::new(k, p, c, f).unwrap();
            let x = random(&[h, w, c], &mut rng);
            let kk = random(&[k, k, c, f], &mut rng);
            let b = random(&[f], &mut rng);
            let y = conv2d_forward(&x, &kk, &b, &g).unwrap();
            prop_assert_eq!(y.shape(), &[h + 2 * p - k + 1, w + 2 * p - k + 1, f]);
            let d = direct_conv(&x, &kk, &b, p);
            for (a, e) in y.data().iter().zip(d.data()) {
                prop_assert!((a - e).abs() <= 1e-6 * e.abs().max(1.0));
            }
        }

        #[test]
        fn forward_is_deterministic(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let g = ConvGeometry::new(3, 2, 2, 3).unwrap();
            let x = random(&[6, 6, 2], &mut rng).cast::<f32>();
            let k = random(&[3, 3, 2, 3], &mut rng).cast::<f32>();
            let b = random(&[3], &mut rng).cast::<f32>();
            let y1 = conv2d_forward(&x, &k, &b, &g).unwrap();
            let y2 = conv2d_forward(&x, &k, &b, &g).unwrap();
            prop_assert_eq!(y1.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            y2.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
