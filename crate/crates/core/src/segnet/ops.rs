//! Dense kernels on channel-major planes (`channels x height x width`).

/// Geometry of a square convolution with "same" zero padding.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvShape {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl ConvShape {
    pub fn n_weights(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }
}

/// Visits every kernel tap with the valid output range it touches.
///
/// Calls `f(co, ci, weight_index, y0, y1, x0, x1, dy, dx)` where the output rows
/// `y0..y1` and columns `x0..x1` read input at offset `(dy, dx)`.
#[inline]
fn for_each_tap<F>(shape: ConvShape, h: usize, w: usize, mut f: F)
where
    F: FnMut(usize, usize, usize, usize, usize, usize, usize, isize, isize),
{
    let pad = (shape.k / 2) as isize;
    for co in 0..shape.cout {
        for ci in 0..shape.cin {
            for ky in 0..shape.k {
                let dy = ky as isize - pad;
                let y0 = (-dy).max(0) as usize;
                let y1 = (h as isize - dy).min(h as isize).max(0) as usize;
                for kx in 0..shape.k {
                    let dx = kx as isize - pad;
                    let x0 = (-dx).max(0) as usize;
                    let x1 = (w as isize - dx).min(w as isize).max(0) as usize;
                    let wi = ((co * shape.cin + ci) * shape.k + ky) * shape.k + kx;
                    f(co, ci, wi, y0, y1, x0, x1, dy, dx);
                }
            }
        }
    }
}

pub(crate) fn conv_forward(
    shape: ConvShape,
    h: usize,
    w: usize,
    input: &[f64],
    weight: &[f64],
    bias: &[f64],
    out: &mut [f64],
) {
    let hw = h * w;
    debug_assert_eq!(input.len(), shape.cin * hw);
    debug_assert_eq!(out.len(), shape.cout * hw);
    for co in 0..shape.cout {
        out[co * hw..(co + 1) * hw]
            .iter_mut()
            .for_each(|o| *o = bias[co]);
    }
    for_each_tap(shape, h, w, |co, ci, wi, y0, y1, x0, x1, dy, dx| {
        let wv = weight[wi];
        let src = &input[ci * hw..(ci + 1) * hw];
        let dst = &mut out[co * hw..(co + 1) * hw];
        for y in y0..y1 {
            let sy = (y as isize + dy) as usize;
            let o = &mut dst[y * w + x0..y * w + x1];
            let sx0 = (x0 as isize + dx) as usize;
            let i = &src[sy * w + sx0..sy * w + sx0 + (x1 - x0)];
            for (o, i) in o.iter_mut().zip(i) {
                *o += wv * i;
            }
        }
    });
}

/// Accumulates weight, bias and (optionally) input gradients.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_backward(
    shape: ConvShape,
    h: usize,
    w: usize,
    input: &[f64],
    weight: &[f64],
    grad_out: &[f64],
    grad_weight: &mut [f64],
    grad_bias: &mut [f64],
    mut grad_input: Option<&mut [f64]>,
) {
    let hw = h * w;
    for co in 0..shape.cout {
        grad_bias[co] += grad_out[co * hw..(co + 1) * hw].iter().sum::<f64>();
    }
    for_each_tap(shape, h, w, |co, ci, wi, y0, y1, x0, x1, dy, dx| {
        let g = &grad_out[co * hw..(co + 1) * hw];
        let src = &input[ci * hw..(ci + 1) * hw];
        let sx0 = (x0 as isize + dx) as usize;
        let n = x1 - x0;
        let mut acc = 0.0;
        for y in y0..y1 {
            let sy = (y as isize + dy) as usize;
            let go = &g[y * w + x0..y * w + x1];
            let i = &src[sy * w + sx0..sy * w + sx0 + n];
            acc += go.iter().zip(i).map(|(a, b)| a * b).sum::<f64>();
        }
        grad_weight[wi] += acc;
        if let Some(gi) = grad_input.as_deref_mut() {
            let wv = weight[wi];
            let dst = &mut gi[ci * hw..(ci + 1) * hw];
            for y in y0..y1 {
                let sy = (y as isize + dy) as usize;
                let go = &g[y * w + x0..y * w + x1];
                let d = &mut dst[sy * w + sx0..sy * w + sx0 + n];
                for (d, go) in d.iter_mut().zip(go) {
                    *d += wv * go;
                }
            }
        }
    });
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

/// SiLU activation `x * sigmoid(x)`; smooth, so finite differences stay clean.
pub(crate) fn activate(pre: &[f64]) -> alloc::vec::Vec<f64> {
    pre.iter().map(|&x| x * sigmoid(x)).collect()
}

/// Multiplies `grad` in place by the activation derivative at `pre`.
pub(crate) fn activate_backward(pre: &[f64], grad: &mut [f64]) {
    for (g, &x) in grad.iter_mut().zip(pre) {
        let s = sigmoid(x);
        *g *= s * (1.0 + x * (1.0 - s));
    }
}

/// 2x2 average pooling.
pub(crate) fn pool_forward(c: usize, h: usize, w: usize, input: &[f64]) -> alloc::vec::Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = alloc::vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &input[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let s = src[2 * y * w + 2 * x]
                    + src[2 * y * w + 2 * x + 1]
                    + src[(2 * y + 1) * w + 2 * x]
                    + src[(2 * y + 1) * w + 2 * x + 1];
                out[(ch * oh + y) * ow + x] = 0.25 * s;
            }
        }
    }
    out
}

/// Gradient of 2x2 average pooling; `h`, `w` are the full-resolution dims.
pub(crate) fn pool_backward(
    c: usize,
    h: usize,
    w: usize,
    grad_out: &[f64],
) -> alloc::vec::Vec<f64> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = alloc::vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = 0.25 * grad_out[(ch * oh + y / 2) * ow + x / 2];
            }
        }
    }
    out
}

/// Nearest-neighbour 2x upsampling; `h`, `w` are the low-resolution dims.
pub(crate) fn upsample_forward(
    c: usize,
    h: usize,
    w: usize,
    input: &[f64],
) -> alloc::vec::Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = alloc::vec![0.0; c * oh * ow];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[(ch * oh + y) * ow + x] = input[(ch * h + y / 2) * w + x / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample_backward(
    c: usize,
    h: usize,
    w: usize,
    grad_out: &[f64],
) -> alloc::vec::Vec<f64> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = alloc::vec![0.0; c * h * w];
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                out[(ch * h + y / 2) * w + x / 2] += grad_out[(ch * oh + y) * ow + x];
            }
        }
    }
    out
}

/// Per-pixel softmax over channel planes.
pub(crate) fn softmax_planes(c: usize, hw: usize, logits: &[f64], out: &mut [f64]) {
    for p in 0..hw {
        let max = (0..c)
            .map(|k| logits[k * hw + p])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for k in 0..c {
            let e = libm::exp(logits[k * hw + p] - max);
            out[k * hw + p] = e;
            sum += e;
        }
        for k in 0..c {
            out[k * hw + p] /= sum;
        }
    }
}

/// Pulls a gradient with respect to probabilities back through the softmax.
pub(crate) fn softmax_backward(
    c: usize,
    hw: usize,
    probs: &[f64],
    grad_probs: &[f64],
    out: &mut [f64],
) {
    for p in 0..hw {
        let dot: f64 = (0..c)
            .map(|k| probs[k * hw + p] * grad_probs[k * hw + p])
            .sum();
        for k in 0..c {
            out[k * hw + p] = probs[k * hw + p] * (grad_probs[k * hw + p] - dot);
        }
    }
}
