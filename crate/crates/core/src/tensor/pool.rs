//! Spatial average pooling and per-location channel statistics.

use super::{Result, Scalar, Tensor, TensorError};

fn check_odd(k: usize, op: &'static str) -> Result<usize> {
    if k.is_multiple_of(2) {
        return Err(TensorError::InvalidArgument {
            op,
            reason: format!("kernel size must be odd, got {k}"),
        });
    }
    Ok(k / 2)
}

/// Stride-1 `k × k` average pooling that keeps `H × W`.
///
/// Each output is the mean over the in-bounds part of its window: border
/// outputs divide by the number of valid elements, not by `k²`.
pub fn avgpool_same<T: Scalar>(input: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (h, w, c) = input.dims3("avgpool_same")?;
    let r = check_odd(k, "avgpool_same")?;
    let x = input.data();
    let mut out = Tensor::zeros(&[h, w, c]);
    let o = out.data_mut();
    let mut acc = vec![T::zero(); c];
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
        for xc in 0..w {
            let (x0, x1) = (xc.saturating_sub(r), (xc + r).min(w - 1));
            acc.iter_mut().for_each(|a| *a = T::zero());
            for sy in y0..=y1 {
                for sx in x0..=x1 {
                    let src = (sy * w + sx) * c;
                    for (a, &v) in acc.iter_mut().zip(&x[src..src + c]) {
                        *a = *a + v;
                    }
                }
            }
            let count = T::lit(((y1 - y0 + 1) * (x1 - x0 + 1)) as f64);
            let dst = (y * w + xc) * c;
            for (slot, &a) in o[dst..dst + c].iter_mut().zip(&acc) {
                *slot = a / count;
            }
        }
    }
    Ok(out)
}

pub fn avgpool_same_backward<T: Scalar>(grad_out: &Tensor<T>, k: usize) -> Result<Tensor<T>> {
    let (h, w, c) = grad_out.dims3("avgpool_same_backward")?;
    let r = check_odd(k, "avgpool_same_backward")?;
    let g = grad_out.data();
    let mut grad_in = Tensor::zeros(&[h, w, c]);
    let gi = grad_in.data_mut();
    for y in 0..h {
        let (y0, y1) = (y.saturating_sub(r), (y + r).min(h - 1));
        for xc in 0..w {
            let (x0, x1) = (xc.saturating_sub(r), (xc + r).min(w - 1));
            let count = T::lit(((y1 - y0 + 1) * (x1 - x0 + 1)) as f64);
            let src = (y * w + xc) * c;
            for sy in y0..=y1 {
                for sx in x0..=x1 {
                    let dst = (sy * w + sx) * c;
                    for ch in 0..c {
                        gi[dst + ch] = gi[dst + ch] + g[src + ch] / count;
                    }
                }
            }
        }
    }
    Ok(grad_in)
}

/// Statistic computed across channels at every location.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChannelPoolMode {
    /// Channel mean, one output channel.
    Mean,
    /// Channel max, one output channel; ties resolve to the lowest channel.
    Max,
    /// `[mean, max]`, two output channels.
    Both,
    /// Adaptive average pooling of the channel axis into `bins` contiguous
    /// groups with PyTorch bin boundaries `⌊iC/b⌋ .. ⌈(i+1)C/b⌉`.
    AdaptiveMean(usize),
}

impl ChannelPoolMode {
    pub fn out_channels(self) -> usize {
        match self {
            ChannelPoolMode::Mean | ChannelPoolMode::Max => 1,
            ChannelPoolMode::Both => 2,
            ChannelPoolMode::AdaptiveMean(b) => b,
        }
    }
}

fn adaptive_bin(i: usize, bins: usize, c: usize) -> (usize, usize) {
    ((i * c) / bins, ((i + 1) * c).div_ceil(bins))
}

fn argmax<T: Scalar>(px: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in px.iter().enumerate().skip(1) {
        if v > px[best] {
            best = i;
        }
    }
    best
}

fn mean<T: Scalar>(px: &[T]) -> T {
    let s: T = px.iter().copied().sum();
    s / T::lit(px.len() as f64)
}

pub fn channel_pool<T: Scalar>(input: &Tensor<T>, mode: ChannelPoolMode) -> Result<Tensor<T>> {
    let (h, w, c) = input.dims3("channel_pool")?;
    if let ChannelPoolMode::AdaptiveMean(0) = mode {
        return Err(TensorError::InvalidArgument {
            op: "channel_pool",
            reason: "adaptive pooling needs at least one bin".into(),
        });
    }
    let oc = mode.out_channels();
    let mut out = Vec::with_capacity(h * w * oc);
    for px in input.data().chunks(c) {
        match mode {
            ChannelPoolMode::Mean => out.push(mean(px)),
            ChannelPoolMode::Max => out.push(px[argmax(px)]),
            ChannelPoolMode::Both => {
                out.push(mean(px));
                out.push(px[argmax(px)]);
            }
            ChannelPoolMode::AdaptiveMean(bins) => {
                for i in 0..bins {
                    let (s, e) = adaptive_bin(i, bins, c);
                    out.push(mean(&px[s..e]));
                }
            }
        }
    }
    Tensor::new(vec![h, w, oc], out)
}

pub fn channel_pool_backward<T: Scalar>(
    input: &Tensor<T>,
    mode: ChannelPoolMode,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let (h, w, c) = input.dims3("channel_pool_backward")?;
    let oc = mode.out_channels();
    if grad_out.shape() != [h, w, oc] {
        return Err(TensorError::ShapeMismatch {
            op: "channel_pool_backward",
            left: vec![h, w, oc],
            right: grad_out.shape().to_vec(),
        });
    }
    let mut grad_in = Tensor::zeros(&[h, w, c]);
    let g = grad_out.data();
    let cf = T::lit(c as f64);
    for (p, (px, gi)) in input.data().chunks(c).zip(grad_in.data_mut().chunks_mut(c)).enumerate() {
        let go = &g[p * oc..(p + 1) * oc];
        match mode {
            ChannelPoolMode::Mean => gi.iter_mut().for_each(|v| *v = go[0] / cf),
            ChannelPoolMode::Max => gi[argmax(px)] = go[0],
            ChannelPoolMode::Both => {
                gi.iter_mut().for_each(|v| *v = go[0] / cf);
                let m = argmax(px);
                gi[m] = gi[m] + go[1];
            }
            ChannelPoolMode::AdaptiveMean(bins) => {
                for (i, &gv) in go.iter().enumerate().take(bins) {
                    let (s, e) = adaptive_bin(i, bins, c);
                    let n = T::lit((e - s) as f64);
                    for v in &mut gi[s..e] {
                        *v = *v + gv / n;
                    }
                }
            }
        }
    }
    Ok(grad_in)
}
