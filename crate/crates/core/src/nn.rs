//! Minimal feed-forward network engine with hand-written backpropagation.
//!
//! Spatial activations use a channel-major layout `[C][N][H][W]` so that a
//! convolution over a whole batch is one GEMM over im2col columns. Dense
//! activations are sample-major `[N][F]`.
//!
//! Besides the usual reverse pass, a network built only from linear layers and
//! leaky ReLUs can be *linearized* around a recorded forward pass: pushing a
//! tangent `v` through the same layers (biases dropped, activation masks
//! frozen) yields `J v`. Backpropagating that tangent pass gives the exact
//! parameter gradient of `<v, grad_x D(x)>`, which is what the gradient
//! penalty needs.

use rand::Rng;

use crate::error::{Error, Result};
use crate::scalar::{cst, Scalar};

/// Batched activation.
#[derive(Clone, Debug, PartialEq)]
pub enum Act<T> {
    /// Channel-major feature maps `[C][N][H][W]`.
    Map {
        c: usize,
        n: usize,
        h: usize,
        w: usize,
        data: Vec<T>,
    },
    /// Sample-major feature vectors `[N][F]`.
    Flat { n: usize, f: usize, data: Vec<T> },
}

impl<T: Scalar> Act<T> {
    pub fn batch(&self) -> usize {
        match self {
            Act::Map { n, .. } | Act::Flat { n, .. } => *n,
        }
    }

    pub fn data(&self) -> &[T] {
        match self {
            Act::Map { data, .. } | Act::Flat { data, .. } => data,
        }
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        match self {
            Act::Map { data, .. } | Act::Flat { data, .. } => data,
        }
    }

    pub fn into_data(self) -> Vec<T> {
        match self {
            Act::Map { data, .. } | Act::Flat { data, .. } => data,
        }
    }

    /// Same shape, all zeros.
    pub fn zeros_like(&self) -> Self {
        match self {
            Act::Map { c, n, h, w, data } => Act::Map {
                c: *c,
                n: *n,
                h: *h,
                w: *w,
                data: vec![T::zero(); data.len()],
            },
            Act::Flat { n, f, data } => Act::Flat {
                n: *n,
                f: *f,
                data: vec![T::zero(); data.len()],
            },
        }
    }

    /// Stack single-channel images (each `h*w`, row-major) into a map.
    pub fn from_images(images: &[&[T]], h: usize, w: usize) -> Result<Self> {
        let mut data = Vec::with_capacity(images.len() * h * w);
        for img in images {
            if img.len() != h * w {
                return Err(Error::Shape(format!(
                    "image with {} values in a {h}x{w} batch",
                    img.len()
                )));
            }
            data.extend_from_slice(img);
        }
        Ok(Act::Map {
            c: 1,
            n: images.len(),
            h,
            w,
            data,
        })
    }

    /// Per-sample contiguous slice of a single-channel map or a flat batch.
    pub fn sample(&self, i: usize) -> &[T] {
        match self {
            Act::Map { c, h, w, data, .. } => {
                assert_eq!(*c, 1, "sample() requires a single-channel map");
                &data[i * h * w..(i + 1) * h * w]
            }
            Act::Flat { f, data, .. } => &data[i * f..(i + 1) * f],
        }
    }
}

/// Convolution geometry shared by forward and transposed layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geom {
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geom {
    pub fn new(k: usize, stride: usize, pad: usize) -> Self {
        Self { k, stride, pad }
    }

    /// Output extent of a forward convolution.
    pub fn conv_out(&self, len: usize) -> Result<usize> {
        let padded = len + 2 * self.pad;
        if padded < self.k || (padded - self.k) % self.stride != 0 {
            return Err(Error::Shape(format!(
                "extent {len} incompatible with kernel {} stride {} pad {}",
                self.k, self.stride, self.pad
            )));
        }
        Ok((padded - self.k) / self.stride + 1)
    }

    /// Output extent of a transposed convolution.
    pub fn conv_t_out(&self, len: usize) -> Result<usize> {
        let full = (len - 1) * self.stride + self.k;
        if full < 2 * self.pad {
            return Err(Error::Shape("transposed convolution collapses".into()));
        }
        Ok(full - 2 * self.pad)
    }
}

/// Output columns `[lo, hi)` whose kernel tap `kx` lands inside `[0, w)`.
#[inline]
fn valid_span(ow: usize, w: usize, g: Geom, kx: usize) -> (usize, usize) {
    // ix = ox * stride + kx - pad must satisfy 0 <= ix < w
    let lo = if kx >= g.pad {
        0
    } else {
        (g.pad - kx).div_ceil(g.stride)
    };
    let hi = if w + g.pad > kx {
        ((w + g.pad - kx - 1) / g.stride + 1).min(ow)
    } else {
        0
    };
    (lo, hi.max(lo))
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Scalar>(
    x: &[T],
    c: usize,
    n: usize,
    h: usize,
    w: usize,
    g: Geom,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let k = g.k;
    let np = n * oh * ow;
    let mut cols = vec![T::zero(); c * k * k * np];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst_row = &mut cols[row * np..(row + 1) * np];
                for ni in 0..n {
                    let src = &x[(ci * n + ni) * h * w..(ci * n + ni + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src_row = &src[iy as usize * w..(iy as usize + 1) * w];
                        let dst = &mut dst_row[(ni * oh + oy) * ow..(ni * oh + oy + 1) * ow];
                        let (lo, hi) = valid_span(ow, w, g, kx);
                        let start = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            dst[lo..hi].copy_from_slice(&src_row[start..start + (hi - lo)]);
                        } else {
                            for (d, &s) in dst[lo..hi]
                                .iter_mut()
                                .zip(src_row[start..].iter().step_by(g.stride))
                            {
                                *d = s;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Scalar>(
    cols: &[T],
    c: usize,
    n: usize,
    h: usize,
    w: usize,
    g: Geom,
    oh: usize,
    ow: usize,
) -> Vec<T> {
    let k = g.k;
    let np = n * oh * ow;
    let mut x = vec![T::zero(); c * n * h * w];
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src_row = &cols[row * np..(row + 1) * np];
                for ni in 0..n {
                    let dst = &mut x[(ci * n + ni) * h * w..(ci * n + ni + 1) * h * w];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst_row = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                        let src = &src_row[(ni * oh + oy) * ow..(ni * oh + oy + 1) * ow];
                        let (lo, hi) = valid_span(ow, w, g, kx);
                        let start = lo * g.stride + kx - g.pad;
                        for (d, &s) in dst_row[start..]
                            .iter_mut()
                            .step_by(g.stride)
                            .zip(&src[lo..hi])
                        {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
    x
}

fn avg_pool<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (oh, ow) = (h / f, w / f);
    let scale = T::one() / cst::<T>((f * f) as f64);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for y in 0..h {
            let row = &mut dst[(y / f) * ow..(y / f + 1) * ow];
            for (xo, chunk) in src[y * w..(y + 1) * w].chunks(f).enumerate() {
                row[xo] += chunk.iter().copied().sum::<T>();
            }
        }
        dst.iter_mut().for_each(|v| *v *= scale);
    }
    out
}

fn avg_pool_adjoint<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (oh, ow) = (h / f, w / f);
    let scale = T::one() / cst::<T>((f * f) as f64);
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            let row = &src[(y / f) * ow..(y / f + 1) * ow];
            for (x, d) in dst[y * w..(y + 1) * w].iter_mut().enumerate() {
                *d = row[x / f] * scale;
            }
        }
    }
    out
}

/// Source taps `(i0, i1, t)` for each output index of a bilinear upsample.
fn interp_taps<T: Scalar>(len: usize, f: usize) -> Vec<(usize, usize, T)> {
    (0..len * f)
        .map(|o| {
            let src = (o as f64 + 0.5) / f as f64 - 0.5;
            if src <= 0.0 {
                return (0, 0, T::zero());
            }
            let i0 = (src.floor() as usize).min(len - 1);
            let i1 = (i0 + 1).min(len - 1);
            (i0, i1, cst(src - i0 as f64))
        })
        .collect()
}

fn upsample<T: Scalar>(x: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (oh, ow) = (h * f, w * f);
    let ty = interp_taps::<T>(h, f);
    let tx = interp_taps::<T>(w, f);
    let mut out = vec![T::zero(); planes * oh * ow];
    for p in 0..planes {
        let src = &x[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for (oy, &(y0, y1, sy)) in ty.iter().enumerate() {
            let (r0, r1) = (&src[y0 * w..(y0 + 1) * w], &src[y1 * w..(y1 + 1) * w]);
            for (d, &(x0, x1, sx)) in dst[oy * ow..(oy + 1) * ow].iter_mut().zip(&tx) {
                let top = r0[x0] + sx * (r0[x1] - r0[x0]);
                let bot = r1[x0] + sx * (r1[x1] - r1[x0]);
                *d = top + sy * (bot - top);
            }
        }
    }
    out
}

fn upsample_adjoint<T: Scalar>(g: &[T], planes: usize, h: usize, w: usize, f: usize) -> Vec<T> {
    let (oh, ow) = (h * f, w * f);
    let ty = interp_taps::<T>(h, f);
    let tx = interp_taps::<T>(w, f);
    let one = T::one();
    let mut out = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &g[p * oh * ow..(p + 1) * oh * ow];
        let dst = &mut out[p * h * w..(p + 1) * h * w];
        for (oy, &(y0, y1, sy)) in ty.iter().enumerate() {
            for (&gv, &(x0, x1, sx)) in src[oy * ow..(oy + 1) * ow].iter().zip(&tx) {
                let top = gv * (one - sy);
                let bot = gv * sy;
                dst[y0 * w + x0] += top * (one - sx);
                dst[y0 * w + x1] += top * sx;
                dst[y1 * w + x0] += bot * (one - sx);
                dst[y1 * w + x1] += bot * sx;
            }
        }
    }
    out
}

fn uniform_init<T: Scalar, R: Rng>(len: usize, bound: f64, rng: &mut R) -> Vec<T> {
    (0..len)
        .map(|_| cst::<T>(rng.gen_range(-bound..bound)))
        .collect()
}

/// He-style bound for layers followed by a leaky ReLU.
fn he_bound(fan_in: usize, slope: f64) -> f64 {
    let gain = (2.0 / (1.0 + slope * slope)).sqrt();
    gain * (3.0 / fan_in as f64).sqrt()
}

/// A layer together with its parameters.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv {
        cin: usize,
        cout: usize,
        geom: Geom,
        /// `[cout][cin*k*k]`
        weight: Vec<T>,
        bias: Vec<T>,
    },
    ConvT {
        cin: usize,
        cout: usize,
        geom: Geom,
        /// `[cin][cout*k*k]`
        weight: Vec<T>,
        bias: Vec<T>,
    },
    Dense {
        fin: usize,
        fout: usize,
        /// `[fout][fin]`
        weight: Vec<T>,
        bias: Vec<T>,
    },
    LeakyRelu(T),
    Sigmoid,
    Flatten,
    Unflatten { c: usize, h: usize, w: usize },
    /// Non-overlapping `f x f` mean pooling.
    AvgPool(usize),
    /// Bilinear upsampling by an integer factor (half-pixel centers, edge clamp).
    Upsample(usize),
}

impl<T: Scalar> Layer<T> {
    pub fn conv<R: Rng>(cin: usize, cout: usize, geom: Geom, slope: f64, rng: &mut R) -> Self {
        let fan_in = cin * geom.k * geom.k;
        Layer::Conv {
            cin,
            cout,
            geom,
            weight: uniform_init(cout * fan_in, he_bound(fan_in, slope), rng),
            bias: vec![T::zero(); cout],
        }
    }

    pub fn conv_t<R: Rng>(cin: usize, cout: usize, geom: Geom, slope: f64, rng: &mut R) -> Self {
        let taps = (geom.k / geom.stride).max(1);
        let fan_in = cin * taps * taps;
        Layer::ConvT {
            cin,
            cout,
            geom,
            weight: uniform_init(cin * cout * geom.k * geom.k, he_bound(fan_in, slope), rng),
            bias: vec![T::zero(); cout],
        }
    }

    pub fn dense<R: Rng>(fin: usize, fout: usize, slope: f64, rng: &mut R) -> Self {
        Layer::Dense {
            fin,
            fout,
            weight: uniform_init(fout * fin, he_bound(fin, slope), rng),
            bias: vec![T::zero(); fout],
        }
    }

    /// Mutable (weight, bias) if the layer is parametric.
    pub fn params_mut(&mut self) -> Option<(&mut Vec<T>, &mut Vec<T>)> {
        match self {
            Layer::Conv { weight, bias, .. }
            | Layer::ConvT { weight, bias, .. }
            | Layer::Dense { weight, bias, .. } => Some((weight, bias)),
            _ => None,
        }
    }

    pub fn params(&self) -> Option<(&[T], &[T])> {
        match self {
            Layer::Conv { weight, bias, .. }
            | Layer::ConvT { weight, bias, .. }
            | Layer::Dense { weight, bias, .. } => Some((weight, bias)),
            _ => None,
        }
    }
}

/// Values recorded during a forward pass.
#[derive(Clone, Debug)]
enum Cache<T> {
    Conv {
        cols: Vec<T>,
        n: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    },
    ConvT {
        x: Vec<T>,
        n: usize,
        h: usize,
        w: usize,
        oh: usize,
        ow: usize,
    },
    Dense {
        x: Vec<T>,
        n: usize,
    },
    Leaky {
        positive: Vec<bool>,
    },
    Sigmoid {
        y: Vec<T>,
    },
    Flatten {
        c: usize,
        n: usize,
        h: usize,
        w: usize,
    },
    Unflatten {
        n: usize,
    },
    Resample {
        c: usize,
        n: usize,
        h: usize,
        w: usize,
    },
}

/// Forward record needed by [`Net::backward`] and [`Net::linearize`].
#[derive(Clone, Debug)]
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
}

/// Per-layer parameter gradients, parallel to [`Net::layers`].
#[derive(Clone, Debug, PartialEq)]
pub struct Grads<T> {
    pub layers: Vec<Option<(Vec<T>, Vec<T>)>>,
}

impl<T: Scalar> Grads<T> {
    pub fn scale(&mut self, factor: T) {
        for (w, b) in self.layers.iter_mut().flatten() {
            w.iter_mut().for_each(|v| *v *= factor);
            b.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn add(&mut self, other: &Grads<T>) {
        for (mine, theirs) in self.layers.iter_mut().zip(&other.layers) {
            if let (Some((w, b)), Some((ow, ob))) = (mine, theirs) {
                w.iter_mut().zip(ow).for_each(|(a, &x)| *a += x);
                b.iter_mut().zip(ob).for_each(|(a, &x)| *a += x);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .flatten()
            .all(|(w, b)| w.iter().chain(b.iter()).all(|v| v.is_finite()))
    }

    /// Flattened view in parameter order.
    pub fn flatten(&self) -> Vec<T> {
        let mut out = Vec::new();
        for (w, b) in self.layers.iter().flatten() {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }
}

/// Sequential network.
#[derive(Clone, Debug, PartialEq)]
pub struct Net<T> {
    pub layers: Vec<Layer<T>>,
}

enum Mode<'a, T> {
    Primal,
    Tangent(&'a Tape<T>),
}

impl<T: Scalar> Net<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Self { layers }
    }

    pub fn param_count(&self) -> usize {
        self.layers
            .iter()
            .filter_map(|l| l.params())
            .map(|(w, b)| w.len() + b.len())
            .sum()
    }

    pub fn zero_grads(&self) -> Grads<T> {
        Grads {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    l.params()
                        .map(|(w, b)| (vec![T::zero(); w.len()], vec![T::zero(); b.len()]))
                })
                .collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .filter_map(|l| l.params())
            .all(|(w, b)| w.iter().chain(b.iter()).all(|v| v.is_finite()))
    }

    /// Flattened parameter vector in layer order (weights then bias).
    pub fn flat_params(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.param_count());
        for (w, b) in self.layers.iter().filter_map(|l| l.params()) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    /// Overwrite parameters from a flattened vector produced by [`Net::flat_params`].
    pub fn set_flat_params(&mut self, flat: &[T]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::Shape(format!(
                "{} parameters supplied for a network with {}",
                flat.len(),
                self.param_count()
            )));
        }
        let mut off = 0;
        for (w, b) in self.layers.iter_mut().filter_map(|l| l.params_mut()) {
            let (wl, bl) = (w.len(), b.len());
            w.copy_from_slice(&flat[off..off + wl]);
            off += wl;
            b.copy_from_slice(&flat[off..off + bl]);
            off += bl;
        }
        Ok(())
    }

    pub fn forward(&self, x: Act<T>) -> Result<(Act<T>, Tape<T>)> {
        self.run(x, Mode::Primal)
    }

    /// Forward pass without keeping a tape.
    pub fn infer(&self, x: Act<T>) -> Result<Act<T>> {
        Ok(self.run(x, Mode::Primal)?.0)
    }

    /// Push a tangent through the network linearized at `primal`.
    ///
    /// Returns `J v` and a tape that, fed to [`Net::backward`] with
    /// `with_bias = false`, differentiates `<dy, J v>` with respect to the
    /// weights.
    pub fn linearize(&self, primal: &Tape<T>, v: Act<T>) -> Result<(Act<T>, Tape<T>)> {
        self.run(v, Mode::Tangent(primal))
    }

    fn run(&self, mut x: Act<T>, mode: Mode<'_, T>) -> Result<(Act<T>, Tape<T>)> {
        let mut caches = Vec::with_capacity(self.layers.len());
        let tangent = matches!(mode, Mode::Tangent(_));
        for (li, layer) in self.layers.iter().enumerate() {
            let (y, cache) = match layer {
                Layer::Conv {
                    cin,
                    cout,
                    geom,
                    weight,
                    bias,
                } => {
                    let Act::Map { c, n, h, w, data } = x else {
                        return Err(Error::Shape("convolution expects feature maps".into()));
                    };
                    if c != *cin {
                        return Err(Error::Shape(format!("conv expects {cin} channels, got {c}")));
                    }
                    let oh = geom.conv_out(h)?;
                    let ow = geom.conv_out(w)?;
                    let cols = im2col(&data, c, n, h, w, *geom, oh, ow);
                    let np = n * oh * ow;
                    let ckk = cin * geom.k * geom.k;
                    let mut out = vec![T::zero(); cout * np];
                    T::gemm(
                        *cout, ckk, np, T::one(), weight, ckk as isize, 1, &cols, np as isize, 1,
                        T::zero(), &mut out, np as isize, 1,
                    );
                    if !tangent {
                        for (o, row) in out.chunks_mut(np).enumerate() {
                            let b = bias[o];
                            row.iter_mut().for_each(|v| *v += b);
                        }
                    }
                    (
                        Act::Map {
                            c: *cout,
                            n,
                            h: oh,
                            w: ow,
                            data: out,
                        },
                        Cache::Conv {
                            cols,
                            n,
                            h,
                            w,
                            oh,
                            ow,
                        },
                    )
                }
                Layer::ConvT {
                    cin,
                    cout,
                    geom,
                    weight,
                    bias,
                } => {
                    let Act::Map { c, n, h, w, data } = x else {
                        return Err(Error::Shape(
                            "transposed convolution expects feature maps".into(),
                        ));
                    };
                    if c != *cin {
                        return Err(Error::Shape(format!(
                            "conv_t expects {cin} channels, got {c}"
                        )));
                    }
                    let oh = geom.conv_t_out(h)?;
                    let ow = geom.conv_t_out(w)?;
                    let nhw = n * h * w;
                    let rows = cout * geom.k * geom.k;
                    let mut cols = vec![T::zero(); rows * nhw];
                    T::gemm(
                        rows, *cin, nhw, T::one(), weight, 1, rows as isize, &data, nhw as isize,
                        1, T::zero(), &mut cols, nhw as isize, 1,
                    );
                    let mut out = col2im(&cols, *cout, n, oh, ow, *geom, h, w);
                    if !tangent {
                        let plane = n * oh * ow;
                        for (o, chunk) in out.chunks_mut(plane).enumerate() {
                            let b = bias[o];
                            chunk.iter_mut().for_each(|v| *v += b);
                        }
                    }
                    (
                        Act::Map {
                            c: *cout,
                            n,
                            h: oh,
                            w: ow,
                            data: out,
                        },
                        Cache::ConvT {
                            x: data,
                            n,
                            h,
                            w,
                            oh,
                            ow,
                        },
                    )
                }
                Layer::Dense {
                    fin,
                    fout,
                    weight,
                    bias,
                } => {
                    let Act::Flat { n, f, data } = x else {
                        return Err(Error::Shape("dense layer expects flat features".into()));
                    };
                    if f != *fin {
                        return Err(Error::Shape(format!("dense expects {fin} features, got {f}")));
                    }
                    let mut out = vec![T::zero(); n * fout];
                    T::gemm(
                        n, *fin, *fout, T::one(), &data, *fin as isize, 1, weight, 1,
                        *fin as isize, T::zero(), &mut out, *fout as isize, 1,
                    );
                    if !tangent {
                        for row in out.chunks_mut(*fout) {
                            row.iter_mut().zip(bias).for_each(|(v, &b)| *v += b);
                        }
                    }
                    (
                        Act::Flat {
                            n,
                            f: *fout,
                            data: out,
                        },
                        Cache::Dense { x: data, n },
                    )
                }
                Layer::LeakyRelu(slope) => {
                    let slope = *slope;
                    match &mode {
                        Mode::Primal => {
                            let positive: Vec<bool> = x.data().iter().map(|&v| v > T::zero()).collect();
                            for (v, &p) in x.data_mut().iter_mut().zip(&positive) {
                                if !p {
                                    *v *= slope;
                                }
                            }
                            (x, Cache::Leaky { positive })
                        }
                        Mode::Tangent(primal) => {
                            let Cache::Leaky { positive } = &primal.caches[li] else {
                                return Err(Error::State("tape does not match network".into()));
                            };
                            for (v, &p) in x.data_mut().iter_mut().zip(positive) {
                                if !p {
                                    *v *= slope;
                                }
                            }
                            (
                                x,
                                Cache::Leaky {
                                    positive: positive.clone(),
                                },
                            )
                        }
                    }
                }
                Layer::Sigmoid => {
                    if tangent {
                        return Err(Error::Numeric(
                            "sigmoid output layer cannot be linearized for the gradient penalty".into(),
                        ));
                    }
                    for v in x.data_mut() {
                        *v = T::one() / (T::one() + (-*v).exp());
                    }
                    let y = x.data().to_vec();
                    (x, Cache::Sigmoid { y })
                }
                Layer::Flatten => {
                    let Act::Map { c, n, h, w, data } = x else {
                        return Err(Error::Shape("flatten expects feature maps".into()));
                    };
                    let hw = h * w;
                    let f = c * hw;
                    let mut out = vec![T::zero(); n * f];
                    for ci in 0..c {
                        for ni in 0..n {
                            out[ni * f + ci * hw..ni * f + (ci + 1) * hw]
                                .copy_from_slice(&data[(ci * n + ni) * hw..(ci * n + ni + 1) * hw]);
                        }
                    }
                    (Act::Flat { n, f, data: out }, Cache::Flatten { c, n, h, w })
                }
                Layer::Unflatten { c, h, w } => {
                    let Act::Flat { n, f, data } = x else {
                        return Err(Error::Shape("unflatten expects flat features".into()));
                    };
                    let hw = h * w;
                    if f != c * hw {
                        return Err(Error::Shape(format!(
                            "cannot unflatten {f} features to {c}x{h}x{w}"
                        )));
                    }
                    let mut out = vec![T::zero(); n * f];
                    for ci in 0..*c {
                        for ni in 0..n {
                            out[(ci * n + ni) * hw..(ci * n + ni + 1) * hw]
                                .copy_from_slice(&data[ni * f + ci * hw..ni * f + (ci + 1) * hw]);
                        }
                    }
                    (
                        Act::Map {
                            c: *c,
                            n,
                            h: *h,
                            w: *w,
                            data: out,
                        },
                        Cache::Unflatten { n },
                    )
                }
                Layer::AvgPool(f) => {
                    let Act::Map { c, n, h, w, data } = x else {
                        return Err(Error::Shape("pooling expects feature maps".into()));
                    };
                    if *f == 0 || h % f != 0 || w % f != 0 {
                        return Err(Error::Shape(format!("{h}x{w} is not divisible by pool {f}")));
                    }
                    (
                        Act::Map {
                            c,
                            n,
                            h: h / f,
                            w: w / f,
                            data: avg_pool(&data, c * n, h, w, *f),
                        },
                        Cache::Resample { c, n, h, w },
                    )
                }
                Layer::Upsample(f) => {
                    let Act::Map { c, n, h, w, data } = x else {
                        return Err(Error::Shape("upsampling expects feature maps".into()));
                    };
                    if *f == 0 {
                        return Err(Error::Shape("upsampling factor must be positive".into()));
                    }
                    (
                        Act::Map {
                            c,
                            n,
                            h: h * f,
                            w: w * f,
                            data: upsample(&data, c * n, h, w, *f),
                        },
                        Cache::Resample { c, n, h, w },
                    )
                }
            };
            caches.push(cache);
            x = y;
        }
        Ok((x, Tape { caches }))
    }

    /// Reverse pass.
    ///
    /// Accumulates parameter gradients into `grads` when given (bias
    /// gradients only if `with_bias`), and returns the input gradient when
    /// `want_input` is set.
    pub fn backward(
        &self,
        tape: &Tape<T>,
        dy: Act<T>,
        mut grads: Option<&mut Grads<T>>,
        with_bias: bool,
        want_input: bool,
    ) -> Result<Option<Act<T>>> {
        if tape.caches.len() != self.layers.len() {
            return Err(Error::State("tape does not match network".into()));
        }
        let mut g = dy;
        for li in (0..self.layers.len()).rev() {
            let need_dx = want_input || li > 0;
            let layer = &self.layers[li];
            let cache = &tape.caches[li];
            let slot = grads.as_deref_mut().and_then(|gr| gr.layers[li].as_mut());
            g = match (layer, cache) {
                (
                    Layer::Conv {
                        cin,
                        cout,
                        geom,
                        weight,
                        ..
                    },
                    Cache::Conv {
                        cols,
                        n,
                        h,
                        w,
                        oh,
                        ow,
                    },
                ) => {
                    let dy = g.into_data();
                    let np = n * oh * ow;
                    let ckk = cin * geom.k * geom.k;
                    if let Some((dw, db)) = slot {
                        T::gemm(
                            *cout, np, ckk, T::one(), &dy, np as isize, 1, cols, 1, np as isize,
                            T::one(), dw, ckk as isize, 1,
                        );
                        if with_bias {
                            for (o, row) in dy.chunks(np).enumerate() {
                                db[o] += row.iter().copied().sum::<T>();
                            }
                        }
                    }
                    if !need_dx {
                        return Ok(None);
                    }
                    let mut dcols = vec![T::zero(); ckk * np];
                    T::gemm(
                        ckk, *cout, np, T::one(), weight, 1, ckk as isize, &dy, np as isize, 1,
                        T::zero(), &mut dcols, np as isize, 1,
                    );
                    Act::Map {
                        c: *cin,
                        n: *n,
                        h: *h,
                        w: *w,
                        data: col2im(&dcols, *cin, *n, *h, *w, *geom, *oh, *ow),
                    }
                }
                (
                    Layer::ConvT {
                        cin,
                        cout,
                        geom,
                        weight,
                        ..
                    },
                    Cache::ConvT {
                        x,
                        n,
                        h,
                        w,
                        oh,
                        ow,
                    },
                ) => {
                    let dy = g.into_data();
                    let nhw = n * h * w;
                    let rows = cout * geom.k * geom.k;
                    let dcols = im2col(&dy, *cout, *n, *oh, *ow, *geom, *h, *w);
                    if let Some((dw, db)) = slot {
                        T::gemm(
                            *cin, nhw, rows, T::one(), x, nhw as isize, 1, &dcols, 1,
                            nhw as isize, T::one(), dw, rows as isize, 1,
                        );
                        if with_bias {
                            let plane = n * oh * ow;
                            for (o, chunk) in dy.chunks(plane).enumerate() {
                                db[o] += chunk.iter().copied().sum::<T>();
                            }
                        }
                    }
                    if !need_dx {
                        return Ok(None);
                    }
                    let mut dx = vec![T::zero(); cin * nhw];
                    T::gemm(
                        *cin, rows, nhw, T::one(), weight, rows as isize, 1, &dcols, nhw as isize,
                        1, T::zero(), &mut dx, nhw as isize, 1,
                    );
                    Act::Map {
                        c: *cin,
                        n: *n,
                        h: *h,
                        w: *w,
                        data: dx,
                    }
                }
                (
                    Layer::Dense {
                        fin, fout, weight, ..
                    },
                    Cache::Dense { x, n },
                ) => {
                    let dy = g.into_data();
                    if let Some((dw, db)) = slot {
                        T::gemm(
                            *fout, *n, *fin, T::one(), &dy, 1, *fout as isize, x, *fin as isize,
                            1, T::one(), dw, *fin as isize, 1,
                        );
                        if with_bias {
                            for row in dy.chunks(*fout) {
                                db.iter_mut().zip(row).for_each(|(b, &v)| *b += v);
                            }
                        }
                    }
                    if !need_dx {
                        return Ok(None);
                    }
                    let mut dx = vec![T::zero(); n * fin];
                    T::gemm(
                        *n, *fout, *fin, T::one(), &dy, *fout as isize, 1, weight, *fin as isize,
                        1, T::zero(), &mut dx, *fin as isize, 1,
                    );
                    Act::Flat {
                        n: *n,
                        f: *fin,
                        data: dx,
                    }
                }
                (Layer::LeakyRelu(slope), Cache::Leaky { positive }) => {
                    let mut g = g;
                    for (v, &p) in g.data_mut().iter_mut().zip(positive) {
                        if !p {
                            *v *= *slope;
                        }
                    }
                    g
                }
                (Layer::Sigmoid, Cache::Sigmoid { y }) => {
                    let mut g = g;
                    for (v, &s) in g.data_mut().iter_mut().zip(y) {
                        *v *= s * (T::one() - s);
                    }
                    g
                }
                (Layer::Flatten, Cache::Flatten { c, n, h, w }) => {
                    let data = g.into_data();
                    let hw = h * w;
                    let f = c * hw;
                    let mut out = vec![T::zero(); data.len()];
                    for ci in 0..*c {
                        for ni in 0..*n {
                            out[(ci * n + ni) * hw..(ci * n + ni + 1) * hw]
                                .copy_from_slice(&data[ni * f + ci * hw..ni * f + (ci + 1) * hw]);
                        }
                    }
                    Act::Map {
                        c: *c,
                        n: *n,
                        h: *h,
                        w: *w,
                        data: out,
                    }
                }
                (Layer::Unflatten { c, h, w }, Cache::Unflatten { n }) => {
                    let data = g.into_data();
                    let hw = h * w;
                    let f = c * hw;
                    let mut out = vec![T::zero(); data.len()];
                    for ci in 0..*c {
                        for ni in 0..*n {
                            out[ni * f + ci * hw..ni * f + (ci + 1) * hw]
                                .copy_from_slice(&data[(ci * n + ni) * hw..(ci * n + ni + 1) * hw]);
                        }
                    }
                    Act::Flat {
                        n: *n,
                        f,
                        data: out,
                    }
                }
                (Layer::AvgPool(f), Cache::Resample { c, n, h, w }) => Act::Map {
                    c: *c,
                    n: *n,
                    h: *h,
                    w: *w,
                    data: avg_pool_adjoint(g.data(), c * n, *h, *w, *f),
                },
                (Layer::Upsample(f), Cache::Resample { c, n, h, w }) => Act::Map {
                    c: *c,
                    n: *n,
                    h: *h,
                    w: *w,
                    data: upsample_adjoint(g.data(), c * n, *h, *w, *f),
                },
                _ => return Err(Error::State("tape does not match network".into())),
            };
        }
        Ok(if want_input { Some(g) } else { None })
    }
}

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    /// First and second moments, parallel to parameter order.
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> AdamW<T> {
    pub fn new(param_count: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: vec![T::zero(); param_count],
            v: vec![T::zero(); param_count],
        }
    }

    pub fn update(&mut self, net: &mut Net<T>, grads: &Grads<T>, lr: f64, weight_decay: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (cst::<T>(self.beta1), cst::<T>(self.beta2));
        let (one_b1, one_b2) = (cst::<T>(1.0 - self.beta1), cst::<T>(1.0 - self.beta2));
        let step_size = cst::<T>(lr / bc1);
        let inv_bc2 = cst::<T>(1.0 / bc2);
        let eps = cst::<T>(self.eps);
        let decay = cst::<T>(1.0 - lr * weight_decay);
        let mut off = 0;
        for (layer, g) in net.layers.iter_mut().zip(&grads.layers) {
            let (Some((w, b)), Some((gw, gb))) = (layer.params_mut(), g.as_ref()) else {
                continue;
            };
            for (p, &gr) in w.iter_mut().chain(b.iter_mut()).zip(gw.iter().chain(gb.iter())) {
                let m = &mut self.m[off];
                let v = &mut self.v[off];
                *m = b1 * *m + one_b1 * gr;
                *v = b2 * *v + one_b2 * gr * gr;
                *p = *p * decay - step_size * *m / ((*v * inv_bc2).sqrt() + eps);
                off += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_net(rng: &mut ChaCha8Rng) -> Net<f64> {
        Net::new(vec![
            Layer::AvgPool(2),
            Layer::conv(1, 3, Geom::new(4, 2, 1), 0.2, rng),
            Layer::LeakyRelu(0.2),
            Layer::conv(3, 2, Geom::new(2, 2, 0), 0.2, rng),
            Layer::LeakyRelu(0.2),
            Layer::Flatten,
            Layer::dense(2, 5, 0.2, rng),
            Layer::LeakyRelu(0.2),
            Layer::dense(5, 8, 0.2, rng),
            Layer::Unflatten { c: 2, h: 2, w: 2 },
            Layer::conv_t(2, 2, Geom::new(4, 2, 1), 0.2, rng),
            Layer::LeakyRelu(0.2),
            Layer::conv_t(2, 1, Geom::new(2, 2, 0), 0.2, rng),
            Layer::Sigmoid,
            Layer::Upsample(1),
        ])
    }

    fn input(n: usize, rng: &mut ChaCha8Rng) -> Act<f64> {
        Act::Map {
            c: 1,
            n,
            h: 8,
            w: 8,
            data: (0..n * 64).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        }
    }

    // Weighted sum of outputs, a scalar objective for finite differences.
    fn objective(net: &Net<f64>, x: &Act<f64>, wts: &[f64]) -> f64 {
        let y = net.infer(x.clone()).unwrap();
        y.data().iter().zip(wts).map(|(a, b)| a * b).sum()
    }

    #[test]
    fn shapes_round_trip_through_encoder_decoder() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = small_net(&mut rng);
        let y = net.infer(input(3, &mut rng)).unwrap();
        match y {
            Act::Map { c, n, h, w, .. } => assert_eq!((c, n, h, w), (1, 3, 8, 8)),
            _ => panic!("expected map"),
        }
    }

    #[test]
    fn backward_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = small_net(&mut rng);
        let x = input(2, &mut rng);
        let (y, tape) = net.forward(x.clone()).unwrap();
        let wts: Vec<f64> = (0..y.data().len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut dy = y.zeros_like();
        dy.data_mut().copy_from_slice(&wts);
        let mut grads = net.zero_grads();
        let dx = net
            .backward(&tape, dy, Some(&mut grads), true, true)
            .unwrap()
            .unwrap();

        let eps = 1e-6;
        let analytic = grads.flatten();
        let base = net.flat_params();
        for idx in (0..base.len()).step_by(7) {
            let mut p = base.clone();
            p[idx] += eps;
            net.set_flat_params(&p).unwrap();
            let up = objective(&net, &x, &wts);
            p[idx] -= 2.0 * eps;
            net.set_flat_params(&p).unwrap();
            let down = objective(&net, &x, &wts);
            let fd = (up - down) / (2.0 * eps);
            assert!(
                (fd - analytic[idx]).abs() <= 1e-6 + 1e-4 * fd.abs(),
                "param {idx}: fd {fd} vs analytic {}",
                analytic[idx]
            );
        }
        net.set_flat_params(&base).unwrap();
        for idx in (0..x.data().len()).step_by(5) {
            let mut xp = x.clone();
            xp.data_mut()[idx] += eps;
            let up = objective(&net, &xp, &wts);
            xp.data_mut()[idx] -= 2.0 * eps;
            let down = objective(&net, &xp, &wts);
            let fd = (up - down) / (2.0 * eps);
            assert!((fd - dx.data()[idx]).abs() <= 1e-6 + 1e-4 * fd.abs());
        }
    }

    #[test]
    fn linearization_yields_directional_derivative() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Net::new(vec![
            Layer::conv(1, 4, Geom::new(4, 2, 1), 0.2, &mut rng),
            Layer::LeakyRelu(0.2),
            Layer::Flatten,
            Layer::dense(64, 1, 0.2, &mut rng),
        ]);
        let x = input(1, &mut rng);
        let v = input(1, &mut rng);
        let (_, tape) = net.forward(x.clone()).unwrap();
        let (jv, _) = net.linearize(&tape, v.clone()).unwrap();
        let eps = 1e-6;
        let mut xp = x.clone();
        let mut xm = x.clone();
        for ((a, b), d) in xp.data_mut().iter_mut().zip(xm.data_mut()).zip(v.data()) {
            *a += eps * d;
            *b -= eps * d;
        }
        let fd = (net.infer(xp).unwrap().data()[0] - net.infer(xm).unwrap().data()[0]) / (2.0 * eps);
        assert!((fd - jv.data()[0]).abs() < 1e-6);
    }

    #[test]
    fn resampling_layers_are_adjoint_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for (layer, h, w, oh, ow) in [
            (Layer::<f64>::AvgPool(2), 6, 4, 3, 2),
            (Layer::Upsample(3), 3, 2, 9, 6),
        ] {
            let net = Net::new(vec![layer]);
            let x: Vec<f64> = (0..2 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let g: Vec<f64> = (0..2 * oh * ow).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let xa = Act::Map { c: 1, n: 2, h, w, data: x.clone() };
            let (y, tape) = net.forward(xa).unwrap();
            let ga = Act::Map { c: 1, n: 2, h: oh, w: ow, data: g.clone() };
            let gx = net.backward(&tape, ga, None, true, true).unwrap().unwrap();
            let lhs: f64 = y.data().iter().zip(&g).map(|(a, b)| a * b).sum();
            let rhs: f64 = x.iter().zip(gx.data()).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12);
        }
    }

    #[test]
    fn upsample_preserves_constants_and_range() {
        let net = Net::new(vec![Layer::<f64>::Upsample(4)]);
        let x = Act::Map { c: 1, n: 1, h: 2, w: 2, data: vec![0.0, 1.0, 1.0, 0.0] };
        let y = net.infer(x).unwrap();
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        let c = Act::Map { c: 1, n: 1, h: 3, w: 3, data: vec![0.3; 9] };
        assert!(net.infer(c).unwrap().data().iter().all(|&v| (v - 0.3).abs() < 1e-15));
    }

    #[test]
    fn adamw_moves_against_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = Net::new(vec![Layer::<f64>::dense(3, 1, 0.0, &mut rng)]);
        let before = net.flat_params();
        let mut grads = net.zero_grads();
        if let Some((w, b)) = grads.layers[0].as_mut() {
            w.iter_mut().for_each(|v| *v = 1.0);
            b[0] = -1.0;
        }
        let mut opt = AdamW::new(net.param_count());
        opt.update(&mut net, &grads, 0.1, 0.0);
        let after = net.flat_params();
        for i in 0..3 {
            assert!((before[i] - after[i] - 0.1).abs() < 1e-6);
        }
        assert!((after[3] - before[3] - 0.1).abs() < 1e-6);
    }
}
