//! Score-distillation guidance on the canonical object.
//!
//! The diffusion prior is abstracted as a [`GuidanceOracle`] that maps a
//! rendered image to a per-pixel residual. The latent encoder is taken as the
//! identity, so the residual is pushed straight through the rasterizer
//! backward into the object fields, heads and anchors.

use std::io::{Read, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::time::Duration;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{exp_so3, Camera, GaussianSet, Vec3};
use crate::image::Image;
use crate::model::{Canonical, CanonicalGrad, ModelSpec};
use crate::params::{GradStore, ParamStore};
use crate::raster;

/// Tabulated weighting over integer diffusion steps `t_min..=t_max`.
#[derive(Debug, Clone, PartialEq)]
pub struct GuidanceSchedule {
    pub t_min: u32,
    pub t_max: u32,
    pub weights: Vec<f64>,
    /// Virtual cameras per guidance step.
    pub samples: usize,
}

impl GuidanceSchedule {
    /// Linear ramp over 1000 steps, `scale * t / 1000`, restricted to
    /// `[t_min, t_max]`.
    pub fn linear(t_min: u32, t_max: u32, scale: f64, samples: usize) -> Result<Self> {
        let s = GuidanceSchedule {
            t_min,
            t_max,
            weights: (t_min..=t_max).map(|t| scale * t as f64 / 1000.0).collect(),
            samples,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.t_min > self.t_max || self.weights.len() != (self.t_max - self.t_min + 1) as usize {
            return Err(Error::Config("guidance step range and weight table disagree".into()));
        }
        if self.weights.iter().any(|w| !(*w > 0.0) || !w.is_finite()) {
            return Err(Error::Config("guidance weights must be positive".into()));
        }
        if self.samples == 0 {
            return Err(Error::Config("guidance needs at least one sample".into()));
        }
        Ok(())
    }

    pub fn weight(&self, t: u32) -> f64 {
        self.weights[(t - self.t_min) as usize]
    }

    pub fn draw(&self, rng: &mut impl Rng) -> u32 {
        rng.random_range(self.t_min..=self.t_max)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        GuidanceSchedule {
            weights: self.weights.iter().map(|w| w * factor).collect(),
            ..self.clone()
        }
    }
}

pub trait GuidanceOracle: Send + Sync {
    /// Per-pixel residual for `image` rendered from `camera` at step `t`.
    fn query(&self, image: &Image, camera: &Camera, t: u32, noise_seed: u64) -> Result<Image>;
}

/// Idealized prior that knows the true object: the residual is the
/// difference to the reference render, plus optional Gaussian noise.
pub struct MockOracle {
    pub reference: GaussianSet,
    pub noise: f64,
}

impl MockOracle {
    pub fn new(reference: GaussianSet, noise: f64) -> Self {
        MockOracle { reference, noise }
    }
}

impl GuidanceOracle for MockOracle {
    fn query(&self, image: &Image, camera: &Camera, _t: u32, noise_seed: u64) -> Result<Image> {
        let target = raster::render(&self.reference, camera)?.image;
        image.check_shape(&target, "oracle target")?;
        let mut out = image.clone();
        for (o, r) in out.data.iter_mut().zip(&target.data) {
            *o -= r;
        }
        if self.noise > 0.0 {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(noise_seed);
            let n = Normal::new(0.0, self.noise).map_err(|e| Error::Config(e.to_string()))?;
            for o in &mut out.data {
                *o += n.sample(&mut rng);
            }
        }
        Ok(out)
    }
}

/// Wire protocol of the external oracle. Request and response both start
/// with a 24-byte header: the 8-byte magic, then width, height, channels and
/// step `t` as little-endian `u32`. A request continues with 16 `f32`
/// camera values (fx fy cx cy, row-major rotation, translation) and the
/// image; the response carries the gradient image. Pixel payloads are
/// row-major, channel-interleaved little-endian `f32`.
pub const WIRE_MAGIC: &[u8; 8] = b"HSPLSDS1";

pub fn encode_request(image: &Image, camera: &Camera, t: u32) -> Vec<u8> {
    let mut out = header(image, t);
    let mut cam = vec![camera.fx, camera.fy, camera.cx, camera.cy];
    cam.extend(camera.rotation.transpose().iter());
    cam.extend(camera.translation.iter());
    for v in cam {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    push_pixels(&mut out, image);
    out
}

fn header(image: &Image, t: u32) -> Vec<u8> {
    let mut out = Vec::with_capacity(24 + 4 * image.data.len());
    out.extend_from_slice(WIRE_MAGIC);
    for v in [image.width as u32, image.height as u32, image.channels as u32, t] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn push_pixels(out: &mut Vec<u8>, image: &Image) {
    for v in &image.data {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

pub fn encode_response(gradient: &Image, t: u32) -> Vec<u8> {
    let mut out = header(gradient, t);
    push_pixels(&mut out, gradient);
    out
}

/// Reads a header and returns (width, height, channels, t).
pub fn read_header(r: &mut impl Read) -> Result<(usize, usize, usize, u32)> {
    let mut h = [0u8; 24];
    r.read_exact(&mut h)?;
    if &h[..8] != WIRE_MAGIC {
        return Err(Error::GuidanceUnavailable("bad magic in oracle message".into()));
    }
    let u = |k: usize| u32::from_le_bytes(h[8 + 4 * k..12 + 4 * k].try_into().unwrap());
    Ok((u(0) as usize, u(1) as usize, u(2) as usize, u(3)))
}

pub fn read_floats(r: &mut impl Read, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; 4 * n];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect())
}

/// Oracle served by another process over a local TCP stream, one connection
/// per query.
pub struct ExternalOracle {
    pub address: String,
    pub timeout: Duration,
}

impl ExternalOracle {
    fn exchange(&self, image: &Image, camera: &Camera, t: u32) -> Result<Image> {
        let addr = self
            .address
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| Error::GuidanceUnavailable(format!("cannot resolve {}", self.address)))?;
        let mut stream = TcpStream::connect_timeout(&addr, self.timeout)?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        stream.write_all(&encode_request(image, camera, t))?;
        let (w, h, c, _) = read_header(&mut stream)?;
        if (w, h, c) != (image.width, image.height, image.channels) {
            return Err(Error::GuidanceUnavailable(format!("oracle answered {w}x{h}x{c}")));
        }
        let data = read_floats(&mut stream, w * h * c)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::GuidanceUnavailable("oracle returned non-finite gradient".into()));
        }
        Ok(Image {
            width: w,
            height: h,
            channels: c,
            data,
        })
    }
}

impl GuidanceOracle for ExternalOracle {
    fn query(&self, image: &Image, camera: &Camera, t: u32, _noise_seed: u64) -> Result<Image> {
        self.exchange(image, camera, t).map_err(|e| match e {
            Error::GuidanceUnavailable(_) => e,
            other => Error::GuidanceUnavailable(other.to_string()),
        })
    }
}

/// Camera on the sphere of `radius` around `center`, looking at it, with
/// azimuth uniform in [0, 2pi), elevation uniform in [-60, 60] degrees and
/// the up vector tilted by at most 10 degrees.
pub fn sample_virtual_camera(center: &Vec3, radius: f64, size: usize, rng: &mut impl Rng) -> Camera {
    let az = rng.random_range(0.0..std::f64::consts::TAU);
    let el = rng.random_range(-60f64.to_radians()..=60f64.to_radians());
    let dir = Vec3::new(el.cos() * az.cos(), el.sin(), el.cos() * az.sin());
    let eye = center + dir * radius;
    let tilt_axis_angle = rng.random_range(0.0..std::f64::consts::TAU);
    let tilt = rng.random_range(0.0..=10f64.to_radians());
    let axis = Vec3::new(tilt_axis_angle.cos(), 0.0, tilt_axis_angle.sin());
    let up = exp_so3(&(axis * tilt)) * Vec3::y();
    Camera::look_at(&eye, center, &up, size as f64, size, size)
}

/// Centroid and bounding radius of a set's centers.
pub fn bounding_sphere(set: &GaussianSet) -> (Vec3, f64) {
    let n = set.len().max(1) as f64;
    let c = set.gaussians.iter().fold(Vec3::zeros(), |a, g| a + g.center) / n;
    let r = set.gaussians.iter().map(|g| (g.center - c).norm()).fold(0.0, f64::max);
    (c, r)
}

pub const SPHERE_FACTOR: f64 = 2.5;

#[derive(Debug, Clone)]
pub struct SdsSample {
    pub t: u32,
    pub camera: Camera,
    /// Mean squared residual returned by the oracle.
    pub residual: f64,
}

/// One guidance step: renders the canonical object from `schedule.samples`
/// virtual cameras, queries the oracle, weights each residual by the
/// schedule and backpropagates into the object groups of `out`. Samples are
/// drawn sequentially, evaluated in parallel and merged in sample order.
pub fn sds_step(
    model: &ModelSpec,
    store: &ParamStore,
    object: &Canonical,
    oracle: &dyn GuidanceOracle,
    schedule: &GuidanceSchedule,
    size: usize,
    rng: &mut impl Rng,
    out: &mut GradStore,
) -> Result<Vec<SdsSample>> {
    let (center, r) = bounding_sphere(&object.set);
    if !(r > 0.0) {
        return Err(Error::Degenerate("object has zero extent".into()));
    }
    let draws: Vec<(Camera, u32, u64)> = (0..schedule.samples)
        .map(|_| (sample_virtual_camera(&center, SPHERE_FACTOR * r, size, rng), schedule.draw(rng), rng.random()))
        .collect();
    let per: Vec<(CanonicalGrad, SdsSample)> = draws
        .into_par_iter()
        .map(|(cam, t, seed)| {
            let img = raster::render(&object.set, &cam)?.image;
            let mut g = oracle.query(&img, &cam, t, seed)?;
            img.check_shape(&g, "oracle gradient")?;
            let residual = g.data.iter().map(|v| v * v).sum::<f64>() / g.data.len() as f64;
            let w = schedule.weight(t) / schedule.samples as f64;
            for v in &mut g.data {
                *v *= w;
            }
            let rg = raster::render_backward(&object.set, &cam, &g)?;
            let mut cg = CanonicalGrad::zeros(object);
            cg.add_render(&rg);
            Ok((cg, SdsSample { t, camera: cam, residual }))
        })
        .collect::<Result<_>>()?;
    let mut total = CanonicalGrad::zeros(object);
    let mut samples = Vec::with_capacity(per.len());
    for (cg, s) in per {
        total.add_assign(&cg);
        samples.push(s);
    }
    model.canonical_backward(store, object, &total, out)?;
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn virtual_camera_on_sphere_and_looking_at_center() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Vec3::new(0.1, -0.2, 0.3);
        for _ in 0..200 {
            let cam = sample_virtual_camera(&c, 0.7, 32, &mut rng);
            let pos = cam.position();
            assert!(((pos - c).norm() - 0.7).abs() < 1e-9);
            let axis = cam.rotation.row(2).transpose();
            let off = (c - pos) - axis * axis.dot(&(c - pos));
            assert!(off.norm() < 1e-9);
            let up = -cam.rotation.row(1).transpose();
            let tilt = up.dot(&Vec3::y()).clamp(-1.0, 1.0).acos();
            let el = ((pos - c).y / 0.7).asin();
            assert!(el.abs() <= 60f64.to_radians() + 1e-12);
            // the camera up is the tilted world up projected off the view axis
            assert!(tilt <= 10f64.to_radians() + el.abs() + 1e-9);
        }
        let a = sample_virtual_camera(&c, 0.7, 32, &mut ChaCha8Rng::seed_from_u64(9));
        let b = sample_virtual_camera(&c, 0.7, 32, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn schedule_is_positive_linear() {
        let s = GuidanceSchedule::linear(20, 980, 2.0, 1).unwrap();
        assert_eq!(s.weight(500), 1.0);
        assert!(GuidanceSchedule::linear(0, 10, 1.0, 1).is_err());
    }

    #[test]
    fn wire_round_trip() {
        let img = Image::from_fn(3, 2, 3, |x, y, c| (x + 2 * y + 7 * c) as f64 * 0.25);
        let cam = Camera::look_at(&Vec3::new(0.0, 0.0, -1.0), &Vec3::zeros(), &Vec3::y(), 3.0, 3, 2);
        let bytes = encode_request(&img, &cam, 42);
        assert_eq!(bytes.len(), 24 + 16 * 4 + 18 * 4);
        let mut r = &bytes[..];
        assert_eq!(read_header(&mut r).unwrap(), (3, 2, 3, 42));
        let cam_vals = read_floats(&mut r, 16).unwrap();
        assert_eq!(cam_vals[0], 3.0);
        assert_eq!(read_floats(&mut r, 18).unwrap(), img.data);
    }

    #[test]
    fn external_oracle_over_tcp() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let server = std::thread::spawn(move || {
            let (mut s, _) = listener.accept().unwrap();
            let (w, h, c, t) = read_header(&mut s).unwrap();
            read_floats(&mut s, 16).unwrap();
            let img = read_floats(&mut s, w * h * c).unwrap();
            let g = Image {
                width: w,
                height: h,
                channels: c,
                data: img.iter().map(|v| -v).collect(),
            };
            s.write_all(&encode_response(&g, t)).unwrap();
        });
        let oracle = ExternalOracle {
            address: addr.to_string(),
            timeout: Duration::from_secs(5),
        };
        let img = Image::from_fn(4, 4, 3, |x, y, _| (x * y) as f64 / 16.0);
        let cam = Camera::look_at(&Vec3::new(0.0, 0.0, -1.0), &Vec3::zeros(), &Vec3::y(), 4.0, 4, 4);
        let g = oracle.query(&img, &cam, 100, 0).unwrap();
        server.join().unwrap();
        for (a, b) in g.data.iter().zip(&img.data) {
            assert_eq!(*a, -(*b as f32 as f64));
        }
    }

    #[test]
    fn unreachable_oracle_is_unavailable() {
        let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        drop(listener);
        let oracle = ExternalOracle {
            address: addr.to_string(),
            timeout: Duration::from_millis(200),
        };
        let img = Image::zeros(2, 2, 3);
        let cam = Camera::look_at(&Vec3::new(0.0, 0.0, -1.0), &Vec3::zeros(), &Vec3::y(), 2.0, 2, 2);
        assert!(matches!(oracle.query(&img, &cam, 1, 0), Err(Error::GuidanceUnavailable(_))));
    }
}
