//! Fixed 3×3 convolution and learnable 1×1 convolution.

use super::{Result, Scalar, Tensor, TensorError};

fn kernel3<T: Scalar>(kernel: &Tensor<T>) -> Result<[[T; 3]; 3]> {
    if kernel.shape() != [3, 3] {
        return Err(TensorError::InvalidArgument {
            op: "conv2d_fixed",
            reason: format!("kernel must be 3x3, got {:?}", kernel.shape()),
        });
    }
    let d = kernel.data();
    Ok([[d[0], d[1], d[2]], [d[3], d[4], d[5]], [d[6], d[7], d[8]]])
}

/// Border handling for [`conv2d_fixed`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Padding {
    /// Out-of-bounds taps read zero.
    #[default]
    Zero,
    /// Out-of-bounds taps read the nearest edge element.
    Replicate,
}

impl Padding {
    fn source(self, pos: usize, offset: usize, extent: usize) -> Option<usize> {
        let s = pos as isize + offset as isize - 1;
        if (0..extent as isize).contains(&s) {
            return Some(s as usize);
        }
        match self {
            Padding::Zero => None,
            Padding::Replicate => Some(s.clamp(0, extent as isize - 1) as usize),
        }
    }
}

/// Cross-correlation of an `H × W × C` map with one 3×3 kernel, stride 1,
/// one element of padding on every side so the output keeps `H × W`.
///
/// With `grouped` the kernel runs over every channel independently and the
/// output keeps `C` channels. Without it the per-channel responses are summed
/// into a single output channel.
pub fn conv2d_fixed<T: Scalar>(
    input: &Tensor<T>,
    kernel: &Tensor<T>,
    grouped: bool,
    padding: Padding,
) -> Result<Tensor<T>> {
    let (h, w, c) = input.dims3("conv2d_fixed")?;
    let k = kernel3(kernel)?;
    let x = input.data();
    let mut out = Tensor::zeros(&[h, w, c]);
    {
        let o = out.data_mut();
        for y in 0..h {
            for xcol in 0..w {
                let base = (y * w + xcol) * c;
                for (dy, row) in k.iter().enumerate() {
                    let Some(sy) = padding.source(y, dy, h) else {
                        continue;
                    };
                    for (dx, &kv) in row.iter().enumerate() {
                        let Some(sx) = padding.source(xcol, dx, w) else {
                            continue;
                        };
                        let src = (sy * w + sx) * c;
                        for ch in 0..c {
                            o[base + ch] = o[base + ch] + x[src + ch] * kv;
                        }
                    }
                }
            }
        }
    }
    if grouped {
        return Ok(out);
    }
    let summed = out.data().chunks(c).map(|px| px.iter().copied().sum()).collect();
    Tensor::new(vec![h, w, 1], summed)
}

/// Gradient of [`conv2d_fixed`] with respect to its input. The kernel is fixed
/// and receives no gradient.
pub fn conv2d_fixed_backward<T: Scalar>(
    input_shape: &[usize],
    kernel: &Tensor<T>,
    grouped: bool,
    padding: Padding,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [h, w, c] = *input_shape else {
        return Err(TensorError::Rank {
            op: "conv2d_fixed_backward",
            expected: 3,
            actual: input_shape.to_vec(),
        });
    };
    let k = kernel3(kernel)?;
    let out_c = if grouped { c } else { 1 };
    if grad_out.shape() != [h, w, out_c] {
        return Err(TensorError::ShapeMismatch {
            op: "conv2d_fixed_backward",
            left: vec![h, w, out_c],
            right: grad_out.shape().to_vec(),
        });
    }
    let g = grad_out.data();
    let mut grad_in = Tensor::zeros(&[h, w, c]);
    let gi = grad_in.data_mut();
    for y in 0..h {
        for xcol in 0..w {
            let gbase = (y * w + xcol) * out_c;
            for (dy, row) in k.iter().enumerate() {
                let Some(sy) = padding.source(y, dy, h) else {
                    continue;
                };
                for (dx, &kv) in row.iter().enumerate() {
                    let Some(sx) = padding.source(xcol, dx, w) else {
                        continue;
                    };
                    let dst = (sy * w + sx) * c;
                    for ch in 0..c {
                        let go = if grouped { g[gbase + ch] } else { g[gbase] };
                        gi[dst + ch] = gi[dst + ch] + go * kv;
                    }
                }
            }
        }
    }
    Ok(grad_in)
}

/// Per-location affine map `out[h,w,:] = W · x[h,w,:] + b` with `W: Cout × Cin`.
pub fn conv1x1<T: Scalar>(input: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, cin) = input.dims3("conv1x1")?;
    let (cout, wcin) = weight.dims2("conv1x1")?;
    if wcin != cin || bias.shape() != [cout] {
        return Err(TensorError::ShapeMismatch {
            op: "conv1x1",
            left: input.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    let x = input.data();
    let wd = weight.data();
    let b = bias.data();
    let mut out = Vec::with_capacity(h * w * cout);
    for px in x.chunks(cin) {
        for o in 0..cout {
            let row = &wd[o * cin..(o + 1) * cin];
            let mut acc = b[o];
            for (&wv, &xv) in row.iter().zip(px) {
                acc = acc + wv * xv;
            }
            out.push(acc);
        }
    }
    Tensor::new(vec![h, w, cout], out)
}

#[derive(Debug, Clone)]
pub struct Conv1x1Grads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn conv1x1_backward<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<Conv1x1Grads<T>> {
    let (h, w, cin) = input.dims3("conv1x1_backward")?;
    let (cout, wcin) = weight.dims2("conv1x1_backward")?;
    if wcin != cin || grad_out.shape() != [h, w, cout] {
        return Err(TensorError::ShapeMismatch {
            op: "conv1x1_backward",
            left: vec![h, w, cout],
            right: grad_out.shape().to_vec(),
        });
    }
    let x = input.data();
    let wd = weight.data();
    let g = grad_out.data();
    let mut gx = Tensor::zeros(&[h, w, cin]);
    let mut gw = Tensor::zeros(&[cout, cin]);
    let mut gb = Tensor::zeros(&[cout]);
    {
        let gxd = gx.data_mut();
        let gwd = gw.data_mut();
        let gbd = gb.data_mut();
        for p in 0..h * w {
            let xp = &x[p * cin..(p + 1) * cin];
            let gp = &g[p * cout..(p + 1) * cout];
            let gxp = &mut gxd[p * cin..(p + 1) * cin];
            for (o, &go) in gp.iter().enumerate() {
                if go == T::zero() {
                    continue;
                }
                gbd[o] = gbd[o] + go;
                let wrow = &wd[o * cin..(o + 1) * cin];
                let gwrow = &mut gwd[o * cin..(o + 1) * cin];
                for i in 0..cin {
                    gxp[i] = gxp[i] + go * wrow[i];
                    gwrow[i] = gwrow[i] + go * xp[i];
                }
            }
        }
    }
    Ok(Conv1x1Grads {
        input: gx,
        weight: gw,
        bias: gb,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sobel_x() -> Tensor<f64> {
        Tensor::new(vec![3, 3], vec![-1., 0., 1., -2., 0., 2., -1., 0., 1.]).unwrap()
    }

    #[test]
    fn constant_input_and_hand_checked_center() {
        let t = Tensor::full(&[5, 5, 2], 5.0);
        let out = conv2d_fixed(&t, &sobel_x(), true, Padding::Replicate).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
        // Zero padding lets the border see the implicit zeros.
        let out = conv2d_fixed(&t, &sobel_x(), true, Padding::Zero).unwrap();
        assert_eq!(out.data()[(2 * 5 + 2) * 2], 0.0);
        assert_eq!(out.data()[(2 * 5) * 2], 20.0);
        let patch = Tensor::new(vec![3, 3, 1], vec![0., 0., 1., 0., 0., 1., 0., 0., 1.]).unwrap();
        for padding in [Padding::Zero, Padding::Replicate] {
            let out = conv2d_fixed(&patch, &sobel_x(), true, padding).unwrap();
            assert_eq!(out.data()[4], 4.0);
        }
    }

    #[test]
    fn ungrouped_sums_channel_responses() {
        let t = Tensor::from_fn(&[3, 4, 3], |i| (i as f64 * 0.37).sin());
        let g = conv2d_fixed(&t, &sobel_x(), true, Padding::Zero).unwrap();
        let u = conv2d_fixed(&t, &sobel_x(), false, Padding::Zero).unwrap();
        assert_eq!(u.shape(), &[3, 4, 1]);
        for (p, px) in g.data().chunks(3).enumerate() {
            let s: f64 = px.iter().sum();
            assert!((s - u.data()[p]).abs() < 1e-12);
        }
    }

    #[test]
    fn rejects_bad_kernel_and_rank() {
        let t = Tensor::<f64>::zeros(&[2, 2, 1]);
        assert!(conv2d_fixed(&t, &Tensor::zeros(&[2, 2]), true, Padding::Zero).is_err());
        assert!(conv2d_fixed(&Tensor::zeros(&[4, 4]), &sobel_x(), true, Padding::Zero).is_err());
    }

    #[test]
    fn conv1x1_zero_and_identity() {
        let x = Tensor::from_fn(&[2, 3, 4], |i| i as f64 - 7.5);
        let zero = conv1x1(&x, &Tensor::zeros(&[5, 4]), &Tensor::zeros(&[5])).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let eye = Tensor::from_fn(&[4, 4], |i| if i / 4 == i % 4 { 1.0 } else { 0.0 });
        assert_eq!(conv1x1(&x, &eye, &Tensor::zeros(&[4])).unwrap(), x);
        assert!(conv1x1(&x, &Tensor::zeros(&[4, 3]), &Tensor::zeros(&[4])).is_err());
    }
}
