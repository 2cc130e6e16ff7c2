use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ops::{self, ConvShape};
use super::NetError;
use crate::metrics::ProbMap;
use crate::taxonomy::N_GROUPS;
use crate::volume::{NormalizedSlice, Shape3};

/// Architecture of the encoder-decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct NetConfig {
    /// Number of resolution levels, including the bottleneck.
    pub depth: usize,
    /// Channels at full resolution; doubled at each coarser level.
    pub base_channels: usize,
    pub in_channels: usize,
    pub n_classes: usize,
    /// Seed for parameter initialization.
    pub init_seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        NetConfig {
            depth: 3,
            base_channels: 8,
            in_channels: 1,
            n_classes: N_GROUPS,
            init_seed: 0,
        }
    }
}

impl NetConfig {
    fn validate(&self) -> Result<(), NetError> {
        if self.depth == 0
            || self.depth > 8
            || self.base_channels == 0
            || self.in_channels == 0
            || self.n_classes < 2
        {
            return Err(NetError::InvalidConfig);
        }
        Ok(())
    }

    /// Spatial dims must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << (self.depth - 1)
    }

    fn channels(&self, level: usize) -> usize {
        self.base_channels << level
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    shape: ConvShape,
    weight: usize,
    bias: usize,
}

impl Conv {
    fn weight<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.weight..self.weight + self.shape.n_weights()]
    }

    fn bias<'a>(&self, params: &'a [f64]) -> &'a [f64] {
        &params[self.bias..self.bias + self.shape.cout]
    }

    fn forward(&self, params: &[f64], h: usize, w: usize, input: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.shape.cout * h * w];
        ops::conv_forward(
            self.shape,
            h,
            w,
            input,
            self.weight(params),
            self.bias(params),
            &mut out,
        );
        out
    }

    /// Accumulates parameter gradients into `grads`, returning the input gradient if asked.
    #[allow(clippy::too_many_arguments)]
    fn backward(
        &self,
        params: &[f64],
        grads: &mut [f64],
        h: usize,
        w: usize,
        input: &[f64],
        grad_out: &[f64],
        want_input: bool,
    ) -> Option<Vec<f64>> {
        let mut grad_in = want_input.then(|| vec![0.0; self.shape.cin * h * w]);
        let (gw, gb) = {
            // weights precede biases in the flat layout
            let (head, tail) = grads.split_at_mut(self.bias);
            (
                &mut head[self.weight..self.weight + self.shape.n_weights()],
                &mut tail[..self.shape.cout],
            )
        };
        ops::conv_backward(
            self.shape,
            h,
            w,
            input,
            self.weight(params),
            grad_out,
            gw,
            gb,
            grad_in.as_deref_mut(),
        );
        grad_in
    }
}

#[derive(Debug, Clone)]
struct Layout {
    encoder: Vec<(Conv, Conv)>,
    /// Indexed by the level the decoder stage outputs.
    decoder: Vec<(Conv, Conv)>,
    head: Conv,
    n_params: usize,
}

impl Layout {
    fn new(config: &NetConfig) -> Self {
        let mut offset = 0;
        let mut conv = |cin, cout, k| {
            let shape = ConvShape { cin, cout, k };
            let c = Conv {
                shape,
                weight: offset,
                bias: offset + shape.n_weights(),
            };
            offset += shape.n_weights() + cout;
            c
        };
        let mut encoder = Vec::new();
        for level in 0..config.depth {
            let cin = if level == 0 {
                config.in_channels
            } else {
                config.channels(level - 1)
            };
            let c = config.channels(level);
            encoder.push((conv(cin, c, 3), conv(c, c, 3)));
        }
        let mut decoder = Vec::new();
        for level in 0..config.depth - 1 {
            let c = config.channels(level);
            decoder.push((conv(config.channels(level + 1), c, 3), conv(c, c, 3)));
        }
        let head = conv(config.channels(0), config.n_classes, 1);
        Layout {
            encoder,
            decoder,
            head,
            n_params: offset,
        }
    }

    fn convs(&self) -> impl Iterator<Item = &Conv> {
        self.encoder
            .iter()
            .chain(self.decoder.iter())
            .flat_map(|(a, b)| [a, b])
            .chain(core::iter::once(&self.head))
    }
}

/// Activations of one sample kept for the backward pass.
#[derive(Debug, Clone)]
struct SampleTape {
    enc: Vec<EncTape>,
    dec: Vec<DecTape>,
    head_input: Vec<f64>,
    probs: Vec<f64>,
}

#[derive(Debug, Clone)]
struct EncTape {
    input: Vec<f64>,
    a_pre: Vec<f64>,
    a: Vec<f64>,
    b_pre: Vec<f64>,
}

#[derive(Debug, Clone)]
struct DecTape {
    up: Vec<f64>,
    c_pre: Vec<f64>,
    sum: Vec<f64>,
    d_pre: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Tape {
    height: usize,
    width: usize,
    samples: Vec<SampleTape>,
}

/// Small encoder-decoder producing per-pixel class probabilities.
///
/// Each level applies two 3x3 convolutions with SiLU; levels are linked by
/// 2x2 average pooling on the way down and nearest upsampling on the way up,
/// with additive skip connections. A 1x1 head and a softmax produce the output.
#[derive(Debug, Clone)]
pub struct SegNet {
    config: NetConfig,
    layout: Layout,
    params: Vec<f64>,
    tape: Option<Tape>,
}

impl PartialEq for SegNet {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

impl SegNet {
    /// Builds a network with seeded fan-in-scaled uniform weights and zero biases.
    pub fn new(config: NetConfig) -> Result<Self, NetError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.n_params];
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        for conv in layout.convs() {
            let fan_in = (conv.shape.cin * conv.shape.k * conv.shape.k) as f64;
            let bound = libm::sqrt(6.0 / fan_in);
            for p in &mut params[conv.weight..conv.weight + conv.shape.n_weights()] {
                *p = rng.random_range(-bound..bound);
            }
        }
        Ok(SegNet {
            config,
            layout,
            params,
            tape: None,
        })
    }

    /// Restores a network from a flat parameter vector.
    pub fn from_params(config: NetConfig, params: Vec<f64>) -> Result<Self, NetError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.n_params {
            return Err(NetError::ParamCount {
                expected: layout.n_params,
                got: params.len(),
            });
        }
        Ok(SegNet {
            config,
            layout,
            params,
            tape: None,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    /// Mutable parameter view. Invalidates any recorded forward pass.
    pub fn params_mut(&mut self) -> &mut [f64] {
        self.tape = None;
        &mut self.params
    }

    /// Zeroes the output head so every pixel predicts the uniform distribution.
    pub fn zero_head(&mut self) {
        let head = self.layout.head;
        let end = head.bias + head.shape.cout;
        self.params_mut()[head.weight..end]
            .iter_mut()
            .for_each(|p| *p = 0.0);
    }

    fn check_batch(&self, batch: &[NormalizedSlice]) -> Result<(usize, usize), NetError> {
        let first = batch.first().ok_or(NetError::EmptyBatch)?;
        let (h, w) = (first.height, first.width);
        let m = self.config.size_multiple();
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(NetError::IndivisibleInput {
                height: h,
                width: w,
                multiple: m,
            });
        }
        if self.config.in_channels != 1 {
            return Err(NetError::InvalidConfig);
        }
        for s in batch {
            if s.height != h || s.width != w || s.values.len() != h * w {
                return Err(NetError::BatchShapeMismatch);
            }
        }
        Ok((h, w))
    }

    /// Per-pixel class probabilities for a batch of equally sized slices.
    ///
    /// The result stacks the batch along the depth axis.
    pub fn forward(&self, batch: &[NormalizedSlice]) -> Result<ProbMap, NetError> {
        let (h, w) = self.check_batch(batch)?;
        let mut data = Vec::with_capacity(batch.len() * self.config.n_classes * h * w);
        for s in batch {
            data.extend(self.run(&s.values, h, w).probs);
        }
        Ok(ProbMap::from_raw(
            Shape3::new(batch.len(), h, w),
            self.config.n_classes,
            data,
        ))
    }

    /// Like [`forward`](Self::forward) but records activations for [`backward`](Self::backward).
    pub fn forward_train(&mut self, batch: &[NormalizedSlice]) -> Result<ProbMap, NetError> {
        let (h, w) = self.check_batch(batch)?;
        let samples: Vec<SampleTape> = batch.iter().map(|s| self.run(&s.values, h, w)).collect();
        let mut data = Vec::with_capacity(batch.len() * self.config.n_classes * h * w);
        for s in &samples {
            data.extend_from_slice(&s.probs);
        }
        self.tape = Some(Tape {
            height: h,
            width: w,
            samples,
        });
        Ok(ProbMap::from_raw(
            Shape3::new(batch.len(), h, w),
            self.config.n_classes,
            data,
        ))
    }

    fn run(&self, input: &[f64], h0: usize, w0: usize) -> SampleTape {
        let p = &self.params;
        let depth = self.config.depth;
        let mut enc = Vec::with_capacity(depth);
        let mut skips: Vec<Vec<f64>> = Vec::with_capacity(depth);
        let mut cur = input.to_vec();
        let (mut h, mut w) = (h0, w0);
        for level in 0..depth {
            let (ca, cb) = &self.layout.encoder[level];
            let a_pre = ca.forward(p, h, w, &cur);
            let a = ops::activate(&a_pre);
            let b_pre = cb.forward(p, h, w, &a);
            let b = ops::activate(&b_pre);
            enc.push(EncTape {
                input: cur,
                a_pre,
                a,
                b_pre,
            });
            if level + 1 < depth {
                cur = ops::pool_forward(cb.shape.cout, h, w, &b);
                skips.push(b);
                h /= 2;
                w /= 2;
            } else {
                cur = b;
            }
        }
        let mut dec: Vec<Option<DecTape>> = (0..depth - 1).map(|_| None).collect();
        for level in (0..depth - 1).rev() {
            let (cu, cd) = &self.layout.decoder[level];
            let up = ops::upsample_forward(cu.shape.cin, h, w, &cur);
            h *= 2;
            w *= 2;
            let c_pre = cu.forward(p, h, w, &up);
            let mut sum = ops::activate(&c_pre);
            for (s, k) in sum.iter_mut().zip(&skips[level]) {
                *s += k;
            }
            let d_pre = cd.forward(p, h, w, &sum);
            cur = ops::activate(&d_pre);
            dec[level] = Some(DecTape {
                up,
                c_pre,
                sum,
                d_pre,
            });
        }
        let logits = self.layout.head.forward(p, h, w, &cur);
        let mut probs = vec![0.0; logits.len()];
        ops::softmax_planes(self.config.n_classes, h * w, &logits, &mut probs);
        SampleTape {
            enc,
            dec: dec
                .into_iter()
                .map(|d| d.expect("every decoder level runs"))
                .collect(),
            head_input: cur,
            probs,
        }
    }

    /// Gradient of a scalar loss with respect to every parameter, given the loss
    /// gradient with respect to the pre-softmax logits of the recorded batch.
    ///
    /// Consumes the recorded forward pass.
    pub fn backward(&mut self, grad_logits: &[f64]) -> Result<Vec<f64>, NetError> {
        let tape = self.tape.take().ok_or(NetError::BackwardBeforeForward)?;
        let (h0, w0) = (tape.height, tape.width);
        let per_sample = self.config.n_classes * h0 * w0;
        if grad_logits.len() != per_sample * tape.samples.len() {
            return Err(NetError::GradientShape {
                expected: per_sample * tape.samples.len(),
                got: grad_logits.len(),
            });
        }
        let mut grads = vec![0.0; self.params.len()];
        for (s, tape) in tape.samples.iter().enumerate() {
            self.backward_sample(
                tape,
                &grad_logits[s * per_sample..(s + 1) * per_sample],
                h0,
                w0,
                &mut grads,
            );
        }
        Ok(grads)
    }

    fn backward_sample(
        &self,
        tape: &SampleTape,
        grad_logits: &[f64],
        h0: usize,
        w0: usize,
        grads: &mut [f64],
    ) {
        let p = &self.params;
        let depth = self.config.depth;
        let (mut h, mut w) = (h0, w0);
        let mut g = self
            .layout
            .head
            .backward(p, grads, h, w, &tape.head_input, grad_logits, true)
            .expect("requested");
        let mut skip_grads: Vec<Vec<f64>> = Vec::with_capacity(depth);
        for level in 0..depth - 1 {
            let (cu, cd) = &self.layout.decoder[level];
            let dt = &tape.dec[level];
            ops::activate_backward(&dt.d_pre, &mut g);
            let mut g_sum = cd
                .backward(p, grads, h, w, &dt.sum, &g, true)
                .expect("requested");
            skip_grads.push(g_sum.clone());
            ops::activate_backward(&dt.c_pre, &mut g_sum);
            let g_up = cu
                .backward(p, grads, h, w, &dt.up, &g_sum, true)
                .expect("requested");
            h /= 2;
            w /= 2;
            g = ops::upsample_backward(cu.shape.cin, h, w, &g_up);
        }
        for level in (0..depth).rev() {
            let (ca, cb) = &self.layout.encoder[level];
            let et = &tape.enc[level];
            let mut g_b = if level + 1 < depth {
                h *= 2;
                w *= 2;
                let mut gb = ops::pool_backward(cb.shape.cout, h, w, &g);
                for (a, b) in gb.iter_mut().zip(&skip_grads[level]) {
                    *a += b;
                }
                gb
            } else {
                core::mem::take(&mut g)
            };
            ops::activate_backward(&et.b_pre, &mut g_b);
            let mut g_a = cb
                .backward(p, grads, h, w, &et.a, &g_b, true)
                .expect("requested");
            ops::activate_backward(&et.a_pre, &mut g_a);
            if let Some(gi) = ca.backward(p, grads, h, w, &et.input, &g_a, level > 0) {
                g = gi;
            }
        }
    }
}
