//! Triplane feature fields and the small fully-connected heads that turn a
//! feature into Gaussian parameters.
//!
//! Both structures are generic over their parameter storage so the optimizer
//! can evaluate them directly on borrowed parameter slices.

use std::ops::Range;

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{Quat, Vec3};
use crate::hand::softmax;

/// Planes in storage order, with the canonical axes each one spans.
pub const PLANE_AXES: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];

/// Three `R x R x d` feature planes (XY, XZ, YZ) over an axis-aligned box.
/// Storage is plane-major, then row (second axis), column (first axis),
/// channel.
#[derive(Debug, Clone, PartialEq)]
pub struct TriplaneField<D = Vec<f64>> {
    pub resolution: usize,
    pub width: usize,
    pub bbox_min: Vec3,
    pub bbox_max: Vec3,
    pub data: D,
}

/// Bilinear corners of one query on all three planes.
#[derive(Debug, Clone, PartialEq)]
pub struct Stencil {
    /// Flat offset of the first channel of each corner, and its weight.
    pub corners: [[(usize, f64); 4]; 3],
    /// Derivative of each corner weight with respect to the query position.
    pub d_weight: [[Vec3; 4]; 3],
    /// True when the query fell outside the box and was clamped.
    pub clamped: bool,
}

impl TriplaneField {
    pub fn zeros(resolution: usize, width: usize, bbox_min: Vec3, bbox_max: Vec3) -> Result<Self> {
        let f = TriplaneField {
            resolution,
            width,
            bbox_min,
            bbox_max,
            data: vec![0.0; 3 * resolution * resolution * width],
        };
        f.validate()?;
        Ok(f)
    }

    /// Zero-mean uniform initialization of half-width `amplitude`.
    pub fn random(resolution: usize, width: usize, bbox_min: Vec3, bbox_max: Vec3, amplitude: f64, rng: &mut impl Rng) -> Result<Self> {
        let mut f = TriplaneField::zeros(resolution, width, bbox_min, bbox_max)?;
        for v in f.data.iter_mut() {
            *v = rng.random_range(-amplitude..=amplitude);
        }
        Ok(f)
    }
}

impl<D: AsRef<[f64]>> TriplaneField<D> {
    pub fn param_count(resolution: usize, width: usize) -> usize {
        3 * resolution * resolution * width
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 2 || self.width == 0 {
            return Err(Error::Shape(format!("triplane {}x{}", self.resolution, self.width)));
        }
        if self.data.as_ref().len() != Self::param_count(self.resolution, self.width) {
            return Err(Error::Shape(format!(
                "triplane storage {} != {}",
                self.data.as_ref().len(),
                Self::param_count(self.resolution, self.width)
            )));
        }
        if (0..3).any(|k| !(self.bbox_max[k] > self.bbox_min[k])) {
            return Err(Error::Spec("triplane box has non-positive extent".into()));
        }
        Ok(())
    }

    /// Borrowed view with a different storage.
    pub fn with_data<E: AsRef<[f64]>>(&self, data: E) -> TriplaneField<E> {
        TriplaneField {
            resolution: self.resolution,
            width: self.width,
            bbox_min: self.bbox_min,
            bbox_max: self.bbox_max,
            data,
        }
    }

    /// Index of channel `c` at node `(i, j)` of plane `p`.
    pub fn node(&self, p: usize, i: usize, j: usize, c: usize) -> usize {
        ((p * self.resolution + j) * self.resolution + i) * self.width + c
    }

    pub fn stencil(&self, mu: &Vec3) -> Stencil {
        let r1 = (self.resolution - 1) as f64;
        let mut grid = [0.0; 3];
        let mut scale = [0.0; 3];
        let mut clamped = false;
        for k in 0..3 {
            let extent = self.bbox_max[k] - self.bbox_min[k];
            let g = (mu[k] - self.bbox_min[k]) / extent * r1;
            if g < 0.0 || g > r1 || !g.is_finite() {
                clamped = true;
                scale[k] = 0.0;
            } else {
                scale[k] = r1 / extent;
            }
            grid[k] = if g.is_finite() { g.clamp(0.0, r1) } else { 0.0 };
        }
        let mut corners = [[(0usize, 0.0f64); 4]; 3];
        let mut d_weight = [[Vec3::zeros(); 4]; 3];
        for (p, (a, b)) in PLANE_AXES.iter().enumerate() {
            let (gu, gv) = (grid[*a], grid[*b]);
            let i0 = (gu.floor() as usize).min(self.resolution - 2);
            let j0 = (gv.floor() as usize).min(self.resolution - 2);
            let (fu, fv) = (gu - i0 as f64, gv - j0 as f64);
            let cells = [(0, 0), (1, 0), (0, 1), (1, 1)];
            for (n, (di, dj)) in cells.iter().enumerate() {
                let wu = if *di == 0 { 1.0 - fu } else { fu };
                let wv = if *dj == 0 { 1.0 - fv } else { fv };
                let su = if *di == 0 { -1.0 } else { 1.0 };
                let sv = if *dj == 0 { -1.0 } else { 1.0 };
                corners[p][n] = (self.node(p, i0 + di, j0 + dj, 0), wu * wv);
                let mut d = Vec3::zeros();
                d[*a] = su * wv * scale[*a];
                d[*b] = sv * wu * scale[*b];
                d_weight[p][n] = d;
            }
        }
        Stencil {
            corners,
            d_weight,
            clamped,
        }
    }

    /// Sum of bilinear samples from the three planes.
    pub fn interp(&self, mu: &Vec3) -> Vec<f64> {
        self.interp_stencil(&self.stencil(mu))
    }

    pub fn interp_stencil(&self, s: &Stencil) -> Vec<f64> {
        let data = self.data.as_ref();
        let mut out = vec![0.0; self.width];
        for plane in &s.corners {
            for (off, w) in plane {
                if *w != 0.0 {
                    for (c, o) in out.iter_mut().enumerate() {
                        *o += w * data[off + c];
                    }
                }
            }
        }
        out
    }

    /// Accumulates `d_feature` into plane gradients and returns the gradient
    /// with respect to the query position.
    pub fn interp_backward(&self, s: &Stencil, d_feature: &[f64], d_planes: &mut [f64]) -> Vec3 {
        let data = self.data.as_ref();
        let mut d_mu = Vec3::zeros();
        for (plane, dws) in s.corners.iter().zip(&s.d_weight) {
            for ((off, w), dw) in plane.iter().zip(dws) {
                let mut dot = 0.0;
                for (c, g) in d_feature.iter().enumerate() {
                    d_planes[off + c] += w * g;
                    dot += data[off + c] * g;
                }
                d_mu += dw * dot;
            }
        }
        d_mu
    }
}

/// What a head emits and how its raw outputs are squashed.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum HeadKind {
    /// Color through a logistic per channel, then opacity through a logistic.
    Appearance,
    /// Center offset `delta_max * tanh`, rotation as a normalized 4-vector
    /// biased towards identity, log-scale `base + range * tanh`.
    Geometry {
        delta_max: f64,
        log_scale_base: f64,
        log_scale_range: f64,
    },
    /// Skinning weights through a softmax.
    Deformation { joints: usize },
}

impl HeadKind {
    pub fn outputs(&self) -> usize {
        match self {
            HeadKind::Appearance => 4,
            HeadKind::Geometry { .. } => 10,
            HeadKind::Deformation { joints } => *joints,
        }
    }
}

/// Fully-connected network with ReLU between layers and a linear last layer,
/// followed by the squashing of its [`HeadKind`]. Each layer stores its
/// row-major weight matrix followed by its bias.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpHead<D = Vec<f64>> {
    pub kind: HeadKind,
    /// Input width followed by every layer's output width.
    pub widths: Vec<usize>,
    pub params: D,
}

/// Activations saved by [`MlpHead::forward`].
#[derive(Debug, Clone, PartialEq)]
pub struct HeadCache {
    /// Input of every layer; the last entry is the raw (pre-squash) output.
    pub activations: Vec<Vec<f64>>,
    /// Squashed output.
    pub output: Vec<f64>,
}

/// Squashed head output, laid out flat:
/// appearance `[r, g, b, o]`, geometry `[dx, dy, dz, qw, qx, qy, qz, sx, sy, sz]`
/// (scales, not log-scales), deformation `[w_0 .. w_K]`.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadOutput(pub Vec<f64>);

impl HeadOutput {
    pub fn color(&self) -> Vec3 {
        Vec3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn opacity(&self) -> f64 {
        self.0[3]
    }

    pub fn offset(&self) -> Vec3 {
        Vec3::new(self.0[0], self.0[1], self.0[2])
    }

    pub fn rotation(&self) -> Quat {
        Quat::new(self.0[3], self.0[4], self.0[5], self.0[6])
    }

    pub fn scale(&self) -> Vec3 {
        Vec3::new(self.0[7], self.0[8], self.0[9])
    }
}

fn layer_sizes(widths: &[usize]) -> impl Iterator<Item = (usize, usize)> + '_ {
    widths.windows(2).map(|w| (w[0], w[1]))
}

impl MlpHead {
    /// He-uniform hidden layers and a zero last layer, so a fresh head emits
    /// the neutral output of its kind.
    pub fn init(kind: HeadKind, input: usize, hidden: &[usize], rng: &mut impl Rng) -> Self {
        let mut widths = vec![input];
        widths.extend_from_slice(hidden);
        widths.push(kind.outputs());
        let n_layers = widths.len() - 1;
        let mut params = Vec::with_capacity(Self::param_count(&widths));
        for (l, (i, o)) in layer_sizes(&widths).enumerate() {
            let bound = (6.0 / i as f64).sqrt();
            for _ in 0..i * o {
                params.push(if l + 1 == n_layers { 0.0 } else { rng.random_range(-bound..bound) });
            }
            params.extend(std::iter::repeat_n(0.0, o));
        }
        MlpHead { kind, widths, params }
    }

    /// Two ReLU layers of width `2 * input` that reproduce feature channels
    /// `select` exactly at the raw output: `[x, -x]`, identity, then
    /// `h+ - h-`. With `select = None` the raw output is zero.
    pub fn passthrough(kind: HeadKind, input: usize, select: Option<Range<usize>>) -> Self {
        let h = 2 * input;
        let out = kind.outputs();
        let widths = vec![input, h, h, out];
        let mut params = Vec::with_capacity(Self::param_count(&widths));
        for r in 0..h {
            for c in 0..input {
                params.push(if r == c { 1.0 } else if r == c + input { -1.0 } else { 0.0 });
            }
        }
        params.extend(std::iter::repeat_n(0.0, h));
        for r in 0..h {
            for c in 0..h {
                params.push(if r == c { 1.0 } else { 0.0 });
            }
        }
        params.extend(std::iter::repeat_n(0.0, h));
        for r in 0..out {
            for c in 0..h {
                let v = match &select {
                    Some(s) if s.len() == out => {
                        let src = s.start + r;
                        if c == src {
                            1.0
                        } else if c == src + input {
                            -1.0
                        } else {
                            0.0
                        }
                    }
                    _ => 0.0,
                };
                params.push(v);
            }
        }
        params.extend(std::iter::repeat_n(0.0, out));
        MlpHead { kind, widths, params }
    }
}

impl<D: AsRef<[f64]>> MlpHead<D> {
    pub fn param_count(widths: &[usize]) -> usize {
        layer_sizes(widths).map(|(i, o)| i * o + o).sum()
    }

    pub fn with_params<E: AsRef<[f64]>>(&self, params: E) -> MlpHead<E> {
        MlpHead {
            kind: self.kind,
            widths: self.widths.clone(),
            params,
        }
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 || *self.widths.last().unwrap() != self.kind.outputs() {
            return Err(Error::Shape(format!("head widths {:?} for {:?}", self.widths, self.kind)));
        }
        if self.params.as_ref().len() != Self::param_count(&self.widths) {
            return Err(Error::Shape(format!(
                "head storage {} != {}",
                self.params.as_ref().len(),
                Self::param_count(&self.widths)
            )));
        }
        Ok(())
    }

    pub fn forward(&self, feature: &[f64]) -> Result<(HeadOutput, HeadCache)> {
        if feature.len() != self.input_width() {
            return Err(Error::Shape(format!(
                "feature width {} for head input {}",
                feature.len(),
                self.input_width()
            )));
        }
        let p = self.params.as_ref();
        let n_layers = self.widths.len() - 1;
        let mut activations = vec![feature.to_vec()];
        let mut off = 0;
        for (l, (ni, no)) in layer_sizes(&self.widths).enumerate() {
            let x = activations.last().unwrap();
            let (w, b) = (&p[off..off + ni * no], &p[off + ni * no..off + ni * no + no]);
            let mut y: Vec<f64> = (0..no)
                .map(|r| b[r] + w[r * ni..(r + 1) * ni].iter().zip(x).map(|(a, v)| a * v).sum::<f64>())
                .collect();
            if l + 1 < n_layers {
                for v in y.iter_mut() {
                    *v = v.max(0.0);
                }
            }
            activations.push(y);
            off += ni * no + no;
        }
        let output = squash(&self.kind, activations.last().unwrap());
        Ok((
            HeadOutput(output.clone()),
            HeadCache {
                activations,
                output,
            },
        ))
    }

    /// Accumulates parameter gradients into `d_params` and returns the
    /// gradient with respect to the input feature.
    pub fn backward(&self, cache: &HeadCache, d_output: &[f64], d_params: &mut [f64]) -> Vec<f64> {
        let p = self.params.as_ref();
        let raw = cache.activations.last().unwrap();
        let mut g = squash_backward(&self.kind, raw, &cache.output, d_output);
        let n_layers = self.widths.len() - 1;
        let offsets: Vec<usize> = layer_sizes(&self.widths)
            .scan(0, |acc, (i, o)| {
                let start = *acc;
                *acc += i * o + o;
                Some(start)
            })
            .collect();
        for l in (0..n_layers).rev() {
            let (ni, no) = (self.widths[l], self.widths[l + 1]);
            let off = offsets[l];
            let x = &cache.activations[l];
            if l + 1 < n_layers {
                let y = &cache.activations[l + 1];
                for (gv, yv) in g.iter_mut().zip(y) {
                    if *yv <= 0.0 {
                        *gv = 0.0;
                    }
                }
            }
            let mut gx = vec![0.0; ni];
            for r in 0..no {
                if g[r] == 0.0 {
                    continue;
                }
                let row = off + r * ni;
                for c in 0..ni {
                    d_params[row + c] += g[r] * x[c];
                    gx[c] += g[r] * p[row + c];
                }
                d_params[off + ni * no + r] += g[r];
            }
            g = gx;
        }
        g
    }
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn squash(kind: &HeadKind, z: &[f64]) -> Vec<f64> {
    match kind {
        HeadKind::Appearance => z.iter().map(|v| sigmoid(*v)).collect(),
        HeadKind::Geometry {
            delta_max,
            log_scale_base,
            log_scale_range,
        } => {
            let mut y = Vec::with_capacity(10);
            y.extend(z[0..3].iter().map(|v| delta_max * v.tanh()));
            let q = [1.0 + z[3], z[4], z[5], z[6]];
            let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
            y.extend(q.iter().map(|v| v / n));
            y.extend(z[7..10].iter().map(|v| (log_scale_base + log_scale_range * v.tanh()).exp()));
            y
        }
        HeadKind::Deformation { .. } => softmax(z),
    }
}

fn squash_backward(kind: &HeadKind, z: &[f64], y: &[f64], dy: &[f64]) -> Vec<f64> {
    match kind {
        HeadKind::Appearance => y.iter().zip(dy).map(|(y, d)| d * y * (1.0 - y)).collect(),
        HeadKind::Geometry {
            delta_max,
            log_scale_range,
            ..
        } => {
            let mut dz = vec![0.0; 10];
            for k in 0..3 {
                let t = z[k].tanh();
                dz[k] = dy[k] * delta_max * (1.0 - t * t);
            }
            let n = ((1.0 + z[3]).powi(2) + z[4] * z[4] + z[5] * z[5] + z[6] * z[6]).sqrt();
            let dot: f64 = (3..7).map(|k| y[k] * dy[k]).sum();
            for k in 3..7 {
                dz[k] = (dy[k] - y[k] * dot) / n;
            }
            for k in 7..10 {
                let t = z[k].tanh();
                dz[k] = dy[k] * y[k] * log_scale_range * (1.0 - t * t);
            }
            dz
        }
        HeadKind::Deformation { .. } => {
            let dot: f64 = y.iter().zip(dy).map(|(a, b)| a * b).sum();
            y.iter().zip(dy).map(|(y, d)| y * (d - dot)).collect()
        }
    }
}
