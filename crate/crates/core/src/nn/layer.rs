//! Layer kinds with their forward passes and gradients.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::tensor::Tensor;
use crate::scalar::{lit, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Sigmoid,
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply<T: Scalar>(self, x: T) -> T {
        match self {
            Activation::Sigmoid => T::one() / (T::one() + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(T::zero()),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn slope_from_output<T: Scalar>(self, y: T) -> T {
        match self {
            Activation::Sigmoid => y * (T::one() - y),
            Activation::Tanh => T::one() - y * y,
            Activation::Relu => {
                if y > T::zero() {
                    T::one()
                } else {
                    T::zero()
                }
            }
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Sigmoid => 0,
            Activation::Tanh => 1,
            Activation::Relu => 2,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Sigmoid),
            1 => Some(Activation::Tanh),
            2 => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Architecture description of one layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LayerSpec {
    /// Valid (unpadded) cross-correlation over `[channels, h, w]` inputs.
    Conv2dValid {
        kernels: usize,
        kh: usize,
        kw: usize,
    },
    /// 2x2 max pooling, stride 2; odd extents are floored.
    MaxPool2x2,
    Dense {
        units: usize,
    },
    Activation(Activation),
    /// Softmax over `groups` equal contiguous slices of a flat input.
    Softmax {
        groups: usize,
    },
    Flatten,
    /// One tower per input channel; tower outputs are flattened and
    /// concatenated in tower order.
    ConcatTowers(Vec<Vec<LayerSpec>>),
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Conv2dValid { .. } => "Conv2dValid",
            LayerSpec::MaxPool2x2 => "MaxPool2x2",
            LayerSpec::Dense { .. } => "Dense",
            LayerSpec::Activation(_) => "Activation",
            LayerSpec::Softmax { .. } => "Softmax",
            LayerSpec::Flatten => "Flatten",
            LayerSpec::ConcatTowers(_) => "ConcatTowers",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub(crate) enum Layer<T> {
    Conv {
        kernels: usize,
        kh: usize,
        kw: usize,
        /// `[channels, h, w]`
        input: [usize; 3],
        /// `[kernels, channels * kh * kw]`
        weight: Vec<T>,
        bias: Vec<T>,
    },
    Pool {
        input: [usize; 3],
    },
    Dense {
        inputs: usize,
        units: usize,
        /// `[units, inputs]`
        weight: Vec<T>,
        bias: Vec<T>,
    },
    Act(Activation),
    Softmax {
        groups: usize,
        len: usize,
    },
    Flatten,
    Towers {
        input: [usize; 3],
        towers: Vec<Vec<Layer<T>>>,
        /// Per-sample output length of each tower.
        tower_out: Vec<usize>,
    },
}

pub(crate) enum Cache<T> {
    /// Layer input, kept for weight gradients.
    Input(Tensor<T>),
    PoolArgmax(Vec<u32>),
    Output(Tensor<T>),
    Towers(Vec<Vec<Cache<T>>>),
    None,
}

fn shape_err(layer: usize, spec: &LayerSpec, expected: Vec<usize>, actual: &[usize]) -> Error {
    Error::LayerShape {
        layer,
        kind: spec.name().to_string(),
        expected,
        actual: actual.to_vec(),
    }
}

fn as_chw(shape: &[usize]) -> Option<[usize; 3]> {
    match shape {
        [c, h, w] => Some([*c, *h, *w]),
        _ => None,
    }
}

/// Builds the layers for `specs`, returning them with the output shape.
/// `next_activation` lets an initializer see which nonlinearity follows.
pub(crate) fn build_layers<T: Scalar, R: Rng>(
    specs: &[LayerSpec],
    input_shape: &[usize],
    rng: &mut R,
    layer_offset: usize,
) -> Result<(Vec<Layer<T>>, Vec<usize>)> {
    let mut shape = input_shape.to_vec();
    let mut layers = Vec::with_capacity(specs.len());
    for (i, spec) in specs.iter().enumerate() {
        let idx = layer_offset + i;
        let follower = specs[i + 1..]
            .iter()
            .find(|s| {
                matches!(
                    s,
                    LayerSpec::Activation(_) | LayerSpec::Dense { .. } | LayerSpec::Conv2dValid { .. }
                )
            })
            .and_then(|s| match s {
                LayerSpec::Activation(a) => Some(*a),
                _ => None,
            });
        let (layer, out) = match spec {
            LayerSpec::Conv2dValid { kernels, kh, kw } => {
                let [c, h, w] = as_chw(&shape).ok_or_else(|| shape_err(idx, spec, vec![0, 0, 0], &shape))?;
                if *kernels == 0 || *kh == 0 || *kw == 0 || *kh > h || *kw > w {
                    return Err(shape_err(idx, spec, vec![c, *kh, *kw], &shape));
                }
                let taps = c * kh * kw;
                let bound = glorot_bound::<T>(taps, kernels * kh * kw, follower);
                let weight = (0..kernels * taps).map(|_| uniform(rng, bound)).collect();
                (
                    Layer::Conv {
                        kernels: *kernels,
                        kh: *kh,
                        kw: *kw,
                        input: [c, h, w],
                        weight,
                        bias: vec![T::zero(); *kernels],
                    },
                    vec![*kernels, h - kh + 1, w - kw + 1],
                )
            }
            LayerSpec::MaxPool2x2 => {
                let [c, h, w] = as_chw(&shape).ok_or_else(|| shape_err(idx, spec, vec![0, 2, 2], &shape))?;
                if h < 2 || w < 2 {
                    return Err(shape_err(idx, spec, vec![c, 2, 2], &shape));
                }
                (Layer::Pool { input: [c, h, w] }, vec![c, h / 2, w / 2])
            }
            LayerSpec::Dense { units } => {
                if shape.len() != 1 || *units == 0 {
                    let flat = shape.iter().product();
                    return Err(shape_err(idx, spec, vec![flat], &shape));
                }
                let inputs = shape[0];
                let bound = glorot_bound::<T>(inputs, *units, follower);
                let weight = (0..units * inputs).map(|_| uniform(rng, bound)).collect();
                (
                    Layer::Dense {
                        inputs,
                        units: *units,
                        weight,
                        bias: vec![T::zero(); *units],
                    },
                    vec![*units],
                )
            }
            LayerSpec::Activation(a) => (Layer::Act(*a), shape.clone()),
            LayerSpec::Softmax { groups } => {
                let len = shape.iter().product::<usize>();
                if shape.len() != 1 || *groups == 0 || len % groups != 0 {
                    return Err(shape_err(
                        idx,
                        spec,
                        vec![groups.max(&1) * (len / groups.max(&1)).max(1)],
                        &shape,
                    ));
                }
                (Layer::Softmax { groups: *groups, len }, shape.clone())
            }
            LayerSpec::Flatten => (Layer::Flatten, vec![shape.iter().product()]),
            LayerSpec::ConcatTowers(tower_specs) => {
                let [c, h, w] = as_chw(&shape).ok_or_else(|| shape_err(idx, spec, vec![tower_specs.len(), 0, 0], &shape))?;
                if c != tower_specs.len() || c == 0 {
                    return Err(shape_err(idx, spec, vec![tower_specs.len(), h, w], &shape));
                }
                let mut towers = Vec::with_capacity(c);
                let mut tower_out = Vec::with_capacity(c);
                for ts in tower_specs {
                    let (layers, out) = build_layers(ts, &[1, h, w], rng, idx)?;
                    tower_out.push(out.iter().product());
                    towers.push(layers);
                }
                let total = tower_out.iter().sum();
                (
                    Layer::Towers {
                        input: [c, h, w],
                        towers,
                        tower_out,
                    },
                    vec![total],
                )
            }
        };
        layers.push(layer);
        shape = out;
    }
    Ok((layers, shape))
}

fn glorot_bound<T: Scalar>(fan_in: usize, fan_out: usize, follower: Option<Activation>) -> T {
    let base = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let scale = match follower {
        Some(Activation::Sigmoid) => 4.0,
        _ => 1.0,
    };
    lit(base * scale)
}

fn uniform<T: Scalar, R: Rng>(rng: &mut R, bound: T) -> T {
    let u: f64 = rng.gen_range(-1.0..1.0);
    T::from_f64_lossy(u) * bound
}

impl<T: Scalar> Layer<T> {
    pub(crate) fn spec(&self) -> LayerSpec {
        match self {
            Layer::Conv { kernels, kh, kw, .. } => LayerSpec::Conv2dValid {
                kernels: *kernels,
                kh: *kh,
                kw: *kw,
            },
            Layer::Pool { .. } => LayerSpec::MaxPool2x2,
            Layer::Dense { units, .. } => LayerSpec::Dense { units: *units },
            Layer::Act(a) => LayerSpec::Activation(*a),
            Layer::Softmax { groups, .. } => LayerSpec::Softmax { groups: *groups },
            Layer::Flatten => LayerSpec::Flatten,
            Layer::Towers { towers, .. } => {
                LayerSpec::ConcatTowers(towers.iter().map(|t| t.iter().map(|l| l.spec()).collect()).collect())
            }
        }
    }

    pub(crate) fn visit_params<'a>(&'a self, out: &mut Vec<&'a [T]>) {
        match self {
            Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias, .. } => {
                out.push(weight);
                out.push(bias);
            }
            Layer::Towers { towers, .. } => {
                for t in towers {
                    for l in t {
                        l.visit_params(out);
                    }
                }
            }
            _ => {}
        }
    }

    pub(crate) fn visit_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Vec<T>>) {
        match self {
            Layer::Conv { weight, bias, .. } | Layer::Dense { weight, bias, .. } => {
                out.push(weight);
                out.push(bias);
            }
            Layer::Towers { towers, .. } => {
                for t in towers {
                    for l in t {
                        l.visit_params_mut(out);
                    }
                }
            }
            _ => {}
        }
    }

    pub(crate) fn forward(&self, x: Tensor<T>, keep: bool) -> (Tensor<T>, Cache<T>) {
        match self {
            Layer::Conv {
                kernels,
                kh,
                kw,
                input,
                weight,
                bias,
            } => {
                let out = conv_forward(&x, *kernels, *kh, *kw, *input, weight, bias);
                (out, if keep { Cache::Input(x) } else { Cache::None })
            }
            Layer::Pool { input } => {
                let (out, arg) = pool_forward(&x, *input);
                (out, if keep { Cache::PoolArgmax(arg) } else { Cache::None })
            }
            Layer::Dense {
                inputs,
                units,
                weight,
                bias,
            } => {
                let b = x.batch();
                let mut out = vec![T::zero(); b * units];
                for row in out.chunks_exact_mut(*units) {
                    row.copy_from_slice(bias);
                }
                T::gemm(
                    b,
                    *inputs,
                    *units,
                    T::one(),
                    x.data(),
                    *inputs as isize,
                    1,
                    weight,
                    1,
                    *inputs as isize,
                    T::one(),
                    &mut out,
                    *units as isize,
                    1,
                );
                let out = Tensor::new(vec![b, *units], out).expect("dense output shape");
                (out, if keep { Cache::Input(x) } else { Cache::None })
            }
            Layer::Act(a) => {
                let mut y = x;
                for v in y.data_mut() {
                    *v = a.apply(*v);
                }
                let cache = if keep { Cache::Output(y.clone()) } else { Cache::None };
                (y, cache)
            }
            Layer::Softmax { groups, len } => {
                let mut y = x;
                let g = len / groups;
                for chunk in y.data_mut().chunks_exact_mut(g) {
                    softmax_in_place(chunk);
                }
                let cache = if keep { Cache::Output(y.clone()) } else { Cache::None };
                (y, cache)
            }
            Layer::Flatten => {
                let b = x.batch();
                let n = x.sample_len();
                (x.reshape(vec![b, n]).expect("flatten keeps length"), Cache::None)
            }
            Layer::Towers {
                input,
                towers,
                tower_out,
            } => {
                let b = x.batch();
                let [_, h, w] = *input;
                let plane = h * w;
                let total: usize = tower_out.iter().sum();
                let mut out = vec![T::zero(); b * total];
                let mut caches = Vec::with_capacity(towers.len());
                let mut offset = 0;
                for (t, layers) in towers.iter().enumerate() {
                    let mut channel = Vec::with_capacity(b * plane);
                    for s in 0..b {
                        channel.extend_from_slice(&x.sample(s)[t * plane..(t + 1) * plane]);
                    }
                    let mut cur = Tensor::new(vec![b, 1, h, w], channel).expect("tower input");
                    let mut tc = Vec::with_capacity(layers.len());
                    for l in layers {
                        let (next, c) = l.forward(cur, keep);
                        tc.push(c);
                        cur = next;
                    }
                    let n = tower_out[t];
                    for s in 0..b {
                        out[s * total + offset..s * total + offset + n].copy_from_slice(cur.sample(s));
                    }
                    offset += n;
                    caches.push(tc);
                }
                let out = Tensor::new(vec![b, total], out).expect("tower output");
                (out, if keep { Cache::Towers(caches) } else { Cache::None })
            }
        }
    }

    /// Accumulates parameter gradients into `grads` (in `visit_params` order,
    /// starting at `*slot`) and returns the input gradient when requested.
    pub(crate) fn backward(
        &self,
        cache: &Cache<T>,
        grad_out: Tensor<T>,
        grads: &mut [Vec<T>],
        slot: &mut usize,
        need_input: bool,
    ) -> Option<Tensor<T>> {
        match (self, cache) {
            (
                Layer::Conv {
                    kernels,
                    kh,
                    kw,
                    input,
                    weight,
                    ..
                },
                Cache::Input(x),
            ) => {
                let (gw, rest) = grads[*slot..].split_at_mut(1);
                let gin = conv_backward(
                    x,
                    &grad_out,
                    *kernels,
                    *kh,
                    *kw,
                    *input,
                    weight,
                    &mut gw[0],
                    &mut rest[0],
                    need_input,
                );
                *slot += 2;
                gin
            }
            (Layer::Pool { input }, Cache::PoolArgmax(arg)) => need_input.then(|| pool_backward(&grad_out, *input, arg)),
            (
                Layer::Dense {
                    inputs, units, weight, ..
                },
                Cache::Input(x),
            ) => {
                let b = x.batch();
                let g = grad_out.data();
                {
                    let gw = &mut grads[*slot];
                    // dW[units, inputs] += dOut^T x
                    T::gemm(
                        *units,
                        b,
                        *inputs,
                        T::one(),
                        g,
                        1,
                        *units as isize,
                        x.data(),
                        *inputs as isize,
                        1,
                        T::one(),
                        gw,
                        *inputs as isize,
                        1,
                    );
                }
                {
                    let gb = &mut grads[*slot + 1];
                    for row in g.chunks_exact(*units) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += *v;
                        }
                    }
                }
                *slot += 2;
                need_input.then(|| {
                    let mut gx = vec![T::zero(); b * inputs];
                    T::gemm(
                        b,
                        *units,
                        *inputs,
                        T::one(),
                        g,
                        *units as isize,
                        1,
                        weight,
                        *inputs as isize,
                        1,
                        T::zero(),
                        &mut gx,
                        *inputs as isize,
                        1,
                    );
                    Tensor::new(x.shape().to_vec(), gx).expect("dense input grad")
                })
            }
            (Layer::Act(a), Cache::Output(y)) => need_input.then(|| {
                let mut g = grad_out;
                for (gv, yv) in g.data_mut().iter_mut().zip(y.data()) {
                    *gv *= a.slope_from_output(*yv);
                }
                g
            }),
            (Layer::Softmax { groups, len }, Cache::Output(y)) => need_input.then(|| {
                let n = len / groups;
                let mut g = grad_out;
                for (gc, yc) in g.data_mut().chunks_exact_mut(n).zip(y.data().chunks_exact(n)) {
                    let dot: T = gc.iter().zip(yc).map(|(a, b)| *a * *b).sum();
                    for (gv, yv) in gc.iter_mut().zip(yc) {
                        *gv = *yv * (*gv - dot);
                    }
                }
                g
            }),
            (Layer::Flatten, _) => {
                // the caller restores the pre-flatten shape
                Some(grad_out)
            }
            (
                Layer::Towers {
                    input,
                    towers,
                    tower_out,
                },
                Cache::Towers(caches),
            ) => {
                let b = grad_out.batch();
                let [c, h, w] = *input;
                let plane = h * w;
                let total: usize = tower_out.iter().sum();
                let mut gin = if need_input {
                    vec![T::zero(); b * c * plane]
                } else {
                    Vec::new()
                };
                let mut offset = 0;
                for (t, (layers, tc)) in towers.iter().zip(caches).enumerate() {
                    let n = tower_out[t];
                    let mut g = Vec::with_capacity(b * n);
                    for s in 0..b {
                        g.extend_from_slice(&grad_out.data()[s * total + offset..s * total + offset + n]);
                    }
                    offset += n;
                    let mut shapes = vec![vec![b, 1, h, w]];
                    shapes.extend(tower_shapes(layers, b, h, w));
                    let mut cur = Tensor::new(shapes.last().unwrap().clone(), g).expect("tower grad");
                    // parameter slots of this tower start at the running slot
                    let first_slot = *slot;
                    let mut tower_slot_ends = Vec::with_capacity(layers.len());
                    let mut s_acc = first_slot;
                    for l in layers {
                        s_acc += l.param_count_tensors();
                        tower_slot_ends.push(s_acc);
                    }
                    for (li, l) in layers.iter().enumerate().rev() {
                        let mut ls = if li == 0 { first_slot } else { tower_slot_ends[li - 1] };
                        let need = need_input || li > 0;
                        match l.backward(&tc[li], cur, grads, &mut ls, need) {
                            Some(next) => {
                                cur = next.reshape(shapes[li].clone()).expect("tower grad shape");
                            }
                            None => {
                                cur = Tensor::zeros(vec![0]);
                                break;
                            }
                        }
                    }
                    *slot = s_acc;
                    if need_input {
                        for s in 0..b {
                            gin[(s * c + t) * plane..(s * c + t + 1) * plane].copy_from_slice(cur.sample(s));
                        }
                    }
                }
                need_input.then(|| Tensor::new(vec![b, c, h, w], gin).expect("tower input grad"))
            }
            _ => unreachable!("layer/cache mismatch"),
        }
    }

    pub(crate) fn param_count_tensors(&self) -> usize {
        let mut v = Vec::new();
        self.visit_params(&mut v);
        v.len()
    }

    /// Per-sample output shape produced from the given per-sample input shape.
    pub(crate) fn out_shape(&self, input: &[usize]) -> Vec<usize> {
        match self {
            Layer::Conv { kernels, kh, kw, .. } => vec![*kernels, input[1] - kh + 1, input[2] - kw + 1],
            Layer::Pool { .. } => vec![input[0], input[1] / 2, input[2] / 2],
            Layer::Dense { units, .. } => vec![*units],
            Layer::Act(_) | Layer::Softmax { .. } => input.to_vec(),
            Layer::Flatten => vec![input.iter().product()],
            Layer::Towers { tower_out, .. } => vec![tower_out.iter().sum()],
        }
    }
}

/// Batched shapes after each layer of a tower.
fn tower_shapes<T: Scalar>(layers: &[Layer<T>], b: usize, h: usize, w: usize) -> Vec<Vec<usize>> {
    let mut shape = vec![1, h, w];
    let mut out = Vec::with_capacity(layers.len());
    for l in layers {
        shape = l.out_shape(&shape);
        let mut full = vec![b];
        full.extend_from_slice(&shape);
        out.push(full);
    }
    out
}

pub(crate) fn softmax_in_place<T: Scalar>(v: &mut [T]) {
    let max = v.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x = *x / sum;
    }
}

fn im2col<T: Scalar>(x: &[T], [c, h, w]: [usize; 3], kh: usize, kw: usize, cols: &mut [T]) {
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    let p = ho * wo;
    for ch in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ch * kh + i) * kw + j;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let src = &x[(ch * h + oy + i) * w + j..(ch * h + oy + i) * w + j + wo];
                    dst[oy * wo..(oy + 1) * wo].copy_from_slice(src);
                }
            }
        }
    }
}

fn col2im_add<T: Scalar>(cols: &[T], [c, h, w]: [usize; 3], kh: usize, kw: usize, x: &mut [T]) {
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    let p = ho * wo;
    for ch in 0..c {
        for i in 0..kh {
            for j in 0..kw {
                let row = (ch * kh + i) * kw + j;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..ho {
                    let dst = &mut x[(ch * h + oy + i) * w + j..(ch * h + oy + i) * w + j + wo];
                    for (d, s) in dst.iter_mut().zip(&src[oy * wo..(oy + 1) * wo]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

fn conv_forward<T: Scalar>(
    x: &Tensor<T>,
    kernels: usize,
    kh: usize,
    kw: usize,
    input: [usize; 3],
    weight: &[T],
    bias: &[T],
) -> Tensor<T> {
    let b = x.batch();
    let [c, h, w] = input;
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    let p = ho * wo;
    let taps = c * kh * kw;
    let mut cols = vec![T::zero(); taps * p];
    let mut out = vec![T::zero(); b * kernels * p];
    for s in 0..b {
        im2col(x.sample(s), input, kh, kw, &mut cols);
        let dst = &mut out[s * kernels * p..(s + 1) * kernels * p];
        for (k, row) in dst.chunks_exact_mut(p).enumerate() {
            row.fill(bias[k]);
        }
        T::gemm(
            kernels,
            taps,
            p,
            T::one(),
            weight,
            taps as isize,
            1,
            &cols,
            p as isize,
            1,
            T::one(),
            dst,
            p as isize,
            1,
        );
    }
    Tensor::new(vec![b, kernels, ho, wo], out).expect("conv output shape")
}

#[allow(clippy::too_many_arguments)]
fn conv_backward<T: Scalar>(
    x: &Tensor<T>,
    grad_out: &Tensor<T>,
    kernels: usize,
    kh: usize,
    kw: usize,
    input: [usize; 3],
    weight: &[T],
    gw: &mut [T],
    gb: &mut [T],
    need_input: bool,
) -> Option<Tensor<T>> {
    let b = x.batch();
    let [c, h, w] = input;
    let (ho, wo) = (h - kh + 1, w - kw + 1);
    let p = ho * wo;
    let taps = c * kh * kw;
    let mut cols = vec![T::zero(); taps * p];
    let mut dcols = if need_input { vec![T::zero(); taps * p] } else { Vec::new() };
    let mut gin = if need_input {
        vec![T::zero(); b * c * h * w]
    } else {
        Vec::new()
    };
    for s in 0..b {
        let g = &grad_out.data()[s * kernels * p..(s + 1) * kernels * p];
        for (k, row) in g.chunks_exact(p).enumerate() {
            gb[k] += row.iter().copied().sum::<T>();
        }
        im2col(x.sample(s), input, kh, kw, &mut cols);
        // dW[kernels, taps] += g[kernels, p] * cols^T
        T::gemm(
            kernels,
            p,
            taps,
            T::one(),
            g,
            p as isize,
            1,
            &cols,
            1,
            p as isize,
            T::one(),
            gw,
            taps as isize,
            1,
        );
        if need_input {
            // dcols[taps, p] = W^T g
            T::gemm(
                taps,
                kernels,
                p,
                T::one(),
                weight,
                1,
                taps as isize,
                g,
                p as isize,
                1,
                T::zero(),
                &mut dcols,
                p as isize,
                1,
            );
            col2im_add(&dcols, input, kh, kw, &mut gin[s * c * h * w..(s + 1) * c * h * w]);
        }
    }
    need_input.then(|| Tensor::new(vec![b, c, h, w], gin).expect("conv input grad"))
}

fn pool_forward<T: Scalar>(x: &Tensor<T>, [c, h, w]: [usize; 3]) -> (Tensor<T>, Vec<u32>) {
    let b = x.batch();
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(b * c * ho * wo);
    let mut arg = Vec::with_capacity(b * c * ho * wo);
    for s in 0..b {
        let xs = x.sample(s);
        for ch in 0..c {
            let base = ch * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = base + 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                        if xs[i] > xs[best] {
                            best = i;
                        }
                    }
                    out.push(xs[best]);
                    arg.push(best as u32);
                }
            }
        }
    }
    (Tensor::new(vec![b, c, ho, wo], out).expect("pool output shape"), arg)
}

fn pool_backward<T: Scalar>(grad_out: &Tensor<T>, [c, h, w]: [usize; 3], arg: &[u32]) -> Tensor<T> {
    let b = grad_out.batch();
    let n_in = c * h * w;
    let n_out = grad_out.sample_len();
    let mut gin = vec![T::zero(); b * n_in];
    for s in 0..b {
        let g = grad_out.sample(s);
        let a = &arg[s * n_out..(s + 1) * n_out];
        let dst = &mut gin[s * n_in..(s + 1) * n_in];
        for (gv, &i) in g.iter().zip(a) {
            dst[i as usize] += *gv;
        }
    }
    Tensor::new(vec![b, c, h, w], gin).expect("pool input grad")
}
