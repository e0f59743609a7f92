//! Elementwise maps, channel bookkeeping and the small vector ops used by the heads.

use super::{Result, Scalar, Tensor, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Sigmoid,
    Relu,
    Abs,
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub fn pointwise<T: Scalar>(input: &Tensor<T>, f: Unary) -> Tensor<T> {
    let data = input
        .data()
        .iter()
        .map(|&x| match f {
            Unary::Sigmoid => sigmoid(x),
            Unary::Relu => x.max(T::zero()),
            Unary::Abs => x.abs(),
        })
        .collect();
    Tensor::new(input.shape().to_vec(), data).expect("shape preserved")
}

/// Backward of [`pointwise`]. Sigmoid uses the forward output; relu and abs use
/// the forward input. Both relu and abs have zero gradient at exactly zero.
pub fn pointwise_backward<T: Scalar>(
    input: &Tensor<T>,
    output: &Tensor<T>,
    f: Unary,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    input.same_shape(grad_out, "pointwise_backward")?;
    input.same_shape(output, "pointwise_backward")?;
    let data = input
        .data()
        .iter()
        .zip(output.data())
        .zip(grad_out.data())
        .map(|((&x, &y), &g)| match f {
            Unary::Sigmoid => g * y * (T::one() - y),
            Unary::Relu => {
                if x > T::zero() {
                    g
                } else {
                    T::zero()
                }
            }
            Unary::Abs => {
                if x > T::zero() {
                    g
                } else if x < T::zero() {
                    -g
                } else {
                    T::zero()
                }
            }
        })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.same_shape(b, "add")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x + y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.same_shape(b, "mul")?;
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// Returns `(∂/∂a, ∂/∂b)`.
pub fn mul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, grad_out: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
    a.same_shape(grad_out, "mul_backward")?;
    Ok((mul(grad_out, b)?, mul(grad_out, a)?))
}

/// Concatenates feature maps along the channel axis, first map first.
pub fn concat_channels<T: Scalar>(maps: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let first = maps.first().ok_or(TensorError::InvalidArgument {
        op: "concat_channels",
        reason: "no inputs".into(),
    })?;
    let (h, w, _) = first.dims3("concat_channels")?;
    let mut widths = Vec::with_capacity(maps.len());
    for m in maps {
        let (mh, mw, mc) = m.dims3("concat_channels")?;
        if (mh, mw) != (h, w) {
            return Err(TensorError::ShapeMismatch {
                op: "concat_channels",
                left: first.shape().to_vec(),
                right: m.shape().to_vec(),
            });
        }
        widths.push(mc);
    }
    let total: usize = widths.iter().sum();
    let mut out = Vec::with_capacity(h * w * total);
    for p in 0..h * w {
        for (m, &c) in maps.iter().zip(&widths) {
            out.extend_from_slice(&m.data()[p * c..(p + 1) * c]);
        }
    }
    Tensor::new(vec![h, w, total], out)
}

/// Splits a channel-concatenated gradient back into per-input pieces.
pub fn concat_channels_backward<T: Scalar>(grad_out: &Tensor<T>, widths: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (h, w, c) = grad_out.dims3("concat_channels_backward")?;
    if widths.iter().sum::<usize>() != c {
        return Err(TensorError::InvalidArgument {
            op: "concat_channels_backward",
            reason: format!("widths {widths:?} do not sum to {c}"),
        });
    }
    let mut parts: Vec<Vec<T>> = widths.iter().map(|&wc| Vec::with_capacity(h * w * wc)).collect();
    for px in grad_out.data().chunks(c) {
        let mut off = 0;
        for (part, &wc) in parts.iter_mut().zip(widths) {
            part.extend_from_slice(&px[off..off + wc]);
            off += wc;
        }
    }
    parts
        .into_iter()
        .zip(widths)
        .map(|(d, &wc)| Tensor::new(vec![h, w, wc], d))
        .collect()
}

/// Sums `groups` consecutive channel blocks: `H × W × (G·C) → H × W × C`.
pub fn group_sum_channels<T: Scalar>(input: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let (h, w, gc) = input.dims3("group_sum_channels")?;
    if groups == 0 || gc % groups != 0 {
        return Err(TensorError::InvalidArgument {
            op: "group_sum_channels",
            reason: format!("{groups} groups do not divide {gc} channels"),
        });
    }
    let c = gc / groups;
    let mut out = Vec::with_capacity(h * w * c);
    for px in input.data().chunks(gc) {
        for ch in 0..c {
            let mut acc = T::zero();
            for g in 0..groups {
                acc = acc + px[g * c + ch];
            }
            out.push(acc);
        }
    }
    Tensor::new(vec![h, w, c], out)
}

pub fn group_sum_channels_backward<T: Scalar>(grad_out: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let (h, w, c) = grad_out.dims3("group_sum_channels_backward")?;
    let mut out = Vec::with_capacity(h * w * c * groups);
    for px in grad_out.data().chunks(c) {
        for _ in 0..groups {
            out.extend_from_slice(px);
        }
    }
    Tensor::new(vec![h, w, c * groups], out)
}

/// Multiplies every channel `c` of a feature map by `scale[c]`.
pub fn scale_channels<T: Scalar>(input: &Tensor<T>, scale: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = input.dims3("scale_channels")?;
    if scale.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            op: "scale_channels",
            left: input.shape().to_vec(),
            right: scale.shape().to_vec(),
        });
    }
    let s = scale.data();
    let mut out = Vec::with_capacity(h * w * c);
    for px in input.data().chunks(c) {
        out.extend(px.iter().zip(s).map(|(&x, &k)| x * k));
    }
    Tensor::new(vec![h, w, c], out)
}

/// Returns `(∂/∂input, ∂/∂scale)`.
pub fn scale_channels_backward<T: Scalar>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (_, _, c) = input.dims3("scale_channels_backward")?;
    input.same_shape(grad_out, "scale_channels_backward")?;
    let gx = scale_channels(grad_out, scale)?;
    let mut gs = vec![T::zero(); c];
    for (px, gp) in input.data().chunks(c).zip(grad_out.data().chunks(c)) {
        for ((acc, &x), &g) in gs.iter_mut().zip(px).zip(gp) {
            *acc = *acc + x * g;
        }
    }
    Ok((gx, Tensor::vector(gs)))
}

/// Spatial mean of every channel: `H × W × C → C`.
pub fn global_avgpool<T: Scalar>(input: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w, c) = input.dims3("global_avgpool")?;
    let mut acc = vec![T::zero(); c];
    for px in input.data().chunks(c) {
        for (a, &v) in acc.iter_mut().zip(px) {
            *a = *a + v;
        }
    }
    let n = T::lit((h * w) as f64);
    Ok(Tensor::vector(acc.into_iter().map(|a| a / n).collect()))
}

pub fn global_avgpool_backward<T: Scalar>(grad_out: &Tensor<T>, input_shape: &[usize]) -> Result<Tensor<T>> {
    let [h, w, c] = *input_shape else {
        return Err(TensorError::Rank {
            op: "global_avgpool_backward",
            expected: 3,
            actual: input_shape.to_vec(),
        });
    };
    if grad_out.shape() != [c] {
        return Err(TensorError::ShapeMismatch {
            op: "global_avgpool_backward",
            left: vec![c],
            right: grad_out.shape().to_vec(),
        });
    }
    let n = T::lit((h * w) as f64);
    let per: Vec<T> = grad_out.data().iter().map(|&g| g / n).collect();
    let mut out = Vec::with_capacity(h * w * c);
    for _ in 0..h * w {
        out.extend_from_slice(&per);
    }
    Tensor::new(vec![h, w, c], out)
}

/// `W · x + b` for a vector `x`, `W: Out × In`.
pub fn linear<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let n_in = x.dims1("linear")?;
    let (n_out, w_in) = weight.dims2("linear")?;
    if w_in != n_in || bias.shape() != [n_out] {
        return Err(TensorError::ShapeMismatch {
            op: "linear",
            left: x.shape().to_vec(),
            right: weight.shape().to_vec(),
        });
    }
    let xv = x.data();
    let out = weight
        .data()
        .chunks(n_in)
        .zip(bias.data())
        .map(|(row, &b)| row.iter().zip(xv).fold(b, |acc, (&wv, &xv)| acc + wv * xv))
        .collect();
    Ok(Tensor::vector(out))
}

#[derive(Debug, Clone)]
pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Scalar>(x: &Tensor<T>, weight: &Tensor<T>, grad_out: &Tensor<T>) -> Result<LinearGrads<T>> {
    let n_in = x.dims1("linear_backward")?;
    let (n_out, w_in) = weight.dims2("linear_backward")?;
    if w_in != n_in || grad_out.shape() != [n_out] {
        return Err(TensorError::ShapeMismatch {
            op: "linear_backward",
            left: vec![n_out],
            right: grad_out.shape().to_vec(),
        });
    }
    let xv = x.data();
    let g = grad_out.data();
    let mut gx = vec![T::zero(); n_in];
    let mut gw = Vec::with_capacity(n_out * n_in);
    for (row, &go) in weight.data().chunks(n_in).zip(g) {
        for (i, (&wv, &xi)) in row.iter().zip(xv).enumerate() {
            gx[i] = gx[i] + go * wv;
            gw.push(go * xi);
        }
    }
    Ok(LinearGrads {
        input: Tensor::vector(gx),
        weight: Tensor::new(vec![n_out, n_in], gw)?,
        bias: grad_out.clone(),
    })
}

pub fn log_softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    x.dims1("log_softmax")?;
    let m = x.data().iter().copied().fold(T::neg_infinity(), T::max);
    let lse = m + x.data().iter().map(|&v| (v - m).exp()).sum::<T>().ln();
    Ok(Tensor::vector(x.data().iter().map(|&v| v - lse).collect()))
}

/// Backward of [`log_softmax`] from its output: `g − softmax · Σg`.
pub fn log_softmax_backward<T: Scalar>(output: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    output.same_shape(grad_out, "log_softmax_backward")?;
    let total: T = grad_out.data().iter().copied().sum();
    let data = output
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&y, &g)| g - y.exp() * total)
        .collect();
    Tensor::new(output.shape().to_vec(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sigmoid_at_zero_and_extremes() {
        let t = Tensor::vector(vec![0.0f64, 800.0, -800.0]);
        let s = pointwise(&t, Unary::Sigmoid);
        assert_eq!(s.data()[0], 0.5);
        assert_eq!(s.data()[1], 1.0);
        assert!(s.data()[2] >= 0.0 && s.data()[2].is_finite());
    }

    #[test]
    fn abs_and_relu_gradient_at_zero() {
        let x = Tensor::vector(vec![0.0f64, -1.0, 2.0]);
        let g = Tensor::vector(vec![1.0, 1.0, 1.0]);
        let ga = pointwise_backward(&x, &pointwise(&x, Unary::Abs), Unary::Abs, &g).unwrap();
        assert_eq!(ga.data(), &[0.0, -1.0, 1.0]);
        let gr = pointwise_backward(&x, &pointwise(&x, Unary::Relu), Unary::Relu, &g).unwrap();
        assert_eq!(gr.data(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn concat_layout_and_split() {
        let a = Tensor::from_fn(&[2, 2, 3], |i| i as f64);
        let b = Tensor::from_fn(&[2, 2, 3], |i| 100.0 + i as f64);
        let c = concat_channels(&[&a, &b]).unwrap();
        assert_eq!(c.shape(), &[2, 2, 6]);
        assert_eq!(&c.data()[..6], &[0.0, 1.0, 2.0, 100.0, 101.0, 102.0]);
        let parts = concat_channels_backward(&c, &[3, 3]).unwrap();
        assert_eq!(parts[0], a);
        assert_eq!(parts[1], b);
        let bad = Tensor::<f64>::zeros(&[2, 3, 1]);
        assert!(concat_channels(&[&a, &bad]).is_err());
    }

    #[test]
    fn binary_ops_reject_mismatched_shapes() {
        let a = Tensor::<f64>::zeros(&[2, 3]);
        let b = Tensor::<f64>::zeros(&[3, 2]);
        assert!(add(&a, &b).is_err());
        assert!(mul(&a, &b).is_err());
        let x = Tensor::<f64>::zeros(&[3]);
        assert!(linear(&x, &Tensor::zeros(&[2, 4]), &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn log_softmax_uniform() {
        let y = log_softmax(&Tensor::vector(vec![0.3f64; 4])).unwrap();
        for &v in y.data() {
            assert!((v + 4f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn group_sum_adds_direction_blocks() {
        let x = Tensor::new(vec![1, 1, 4], vec![1.0f64, 2.0, 10.0, 20.0]).unwrap();
        let s = group_sum_channels(&x, 2).unwrap();
        assert_eq!(s.data(), &[11.0, 22.0]);
        assert!(group_sum_channels(&x, 3).is_err());
    }
}
