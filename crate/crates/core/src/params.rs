//! Named parameter groups and the binary checkpoint container.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "HSPLCKPT"
//! version   u32      1
//! count     u32      number of blocks
//! block     repeated `count` times, in name order:
//!   name_len u32, name (UTF-8)
//!   kind     u8      0 = euclidean, 1 = rotation (9 values per entry)
//!   lr       f32
//!   ndim     u32, dims u64 x ndim
//!   values   f32 x product(dims)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{exp_so3, orthonormalize, Mat3, Vec3};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HSPLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GroupKind {
    Euclidean,
    /// Row-major 3x3 rotations updated through left-multiplied axis-angle
    /// increments; gradients have 3 entries per rotation.
    Rotation,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Group {
    pub kind: GroupKind,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub lr: f64,
}

impl Group {
    pub fn euclidean(shape: Vec<usize>, values: Vec<f64>, lr: f64) -> Result<Self> {
        let g = Group {
            kind: GroupKind::Euclidean,
            shape,
            values,
            lr,
        };
        g.check()?;
        Ok(g)
    }

    pub fn rotations(rots: &[Mat3], lr: f64) -> Self {
        let mut values = Vec::with_capacity(9 * rots.len());
        for r in rots {
            for i in 0..3 {
                for j in 0..3 {
                    values.push(r[(i, j)]);
                }
            }
        }
        Group {
            kind: GroupKind::Rotation,
            shape: vec![rots.len(), 3, 3],
            values,
            lr,
        }
    }

    fn check(&self) -> Result<()> {
        let n: usize = self.shape.iter().product();
        if n != self.values.len() {
            return Err(Error::Shape(format!("group shape {:?} holds {} values", self.shape, self.values.len())));
        }
        if self.kind == GroupKind::Rotation && n % 9 != 0 {
            return Err(Error::Shape("rotation group size not a multiple of 9".into()));
        }
        Ok(())
    }

    /// Length of the gradient vector for this group.
    pub fn grad_len(&self) -> usize {
        match self.kind {
            GroupKind::Euclidean => self.values.len(),
            GroupKind::Rotation => self.values.len() / 3,
        }
    }

    pub fn rotation(&self, i: usize) -> Mat3 {
        Mat3::from_row_slice(&self.values[9 * i..9 * i + 9])
    }

    pub fn set_rotation(&mut self, i: usize, r: &Mat3) {
        for a in 0..3 {
            for b in 0..3 {
                self.values[9 * i + 3 * a + b] = r[(a, b)];
            }
        }
    }

    pub fn vec3(&self, i: usize) -> Vec3 {
        Vec3::new(self.values[3 * i], self.values[3 * i + 1], self.values[3 * i + 2])
    }

    pub fn set_vec3(&mut self, i: usize, v: &Vec3) {
        self.values[3 * i..3 * i + 3].copy_from_slice(v.as_slice());
    }

    /// Row `i` of a 2-d group.
    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.values.len() / self.shape[0];
        &self.values[i * w..(i + 1) * w]
    }

    /// Applies a step in gradient coordinates: added for euclidean groups,
    /// composed as `R <- exp(delta) R` and re-orthonormalized for rotations.
    pub fn apply_step(&mut self, step: &[f64]) {
        match self.kind {
            GroupKind::Euclidean => {
                for (v, s) in self.values.iter_mut().zip(step) {
                    *v += s;
                }
            }
            GroupKind::Rotation => {
                for i in 0..self.values.len() / 9 {
                    let d = Vec3::new(step[3 * i], step[3 * i + 1], step[3 * i + 2]);
                    if d == Vec3::zeros() {
                        continue;
                    }
                    let r = orthonormalize(&(exp_so3(&d) * self.rotation(i)));
                    self.set_rotation(i, &r);
                }
            }
        }
    }
}

/// Every learnable quantity, keyed by group name.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore {
    groups: BTreeMap<String, Group>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, group: Group) {
        self.groups.insert(name.to_string(), group);
    }

    pub fn get(&self, name: &str) -> Result<&Group> {
        self.groups
            .get(name)
            .ok_or_else(|| Error::Shape(format!("no parameter group `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Group> {
        self.groups
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("no parameter group `{name}`")))
    }

    pub fn values(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.get(name)?.values)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.groups.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.groups.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Group)> {
        self.groups.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Group)> {
        self.groups.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn set_lr(&mut self, name: &str, lr: f64) -> Result<()> {
        self.get_mut(name)?.lr = lr;
        Ok(())
    }

    /// Serializes the groups accepted by `keep`.
    pub fn to_bytes_filtered(&self, keep: impl Fn(&str) -> bool) -> Vec<u8> {
        let selected: Vec<(&String, &Group)> = self.groups.iter().filter(|(k, _)| keep(k)).collect();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(selected.len() as u32).to_le_bytes());
        for (name, g) in selected {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(match g.kind {
                GroupKind::Euclidean => 0,
                GroupKind::Rotation => 1,
            });
            out.extend_from_slice(&(g.lr as f32).to_le_bytes());
            out.extend_from_slice(&(g.shape.len() as u32).to_le_bytes());
            for d in &g.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            for v in &g.values {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.to_bytes_filtered(|_| true)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(Error::Parse {
                line: 0,
                msg: "not a checkpoint (bad magic)".into(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Parse {
                line: 0,
                msg: format!("unsupported checkpoint version {version}"),
            });
        }
        let count = r.u32()?;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| r.err("block name is not UTF-8"))?
                .to_string();
            let kind = match r.take(1)?[0] {
                0 => GroupKind::Euclidean,
                1 => GroupKind::Rotation,
                k => return Err(r.err(&format!("unknown block kind {k}"))),
            };
            let lr = r.f32()? as f64;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut values = Vec::with_capacity(n);
            for _ in 0..n {
                values.push(r.f32()? as f64);
            }
            let g = Group { kind, shape, values, lr };
            g.check()?;
            store.groups.insert(name, g);
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after last block"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        crate::io::write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        ParamStore::from_bytes(&crate::io::read_bytes(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Parse {
            line: 0,
            msg: format!("checkpoint byte {}: {msg}", self.pos),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Gradient buffers shaped like a [`ParamStore`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradStore {
    pub groups: BTreeMap<String, Vec<f64>>,
}

impl GradStore {
    pub fn zeros_like(store: &ParamStore) -> Self {
        GradStore {
            groups: store
                .iter()
                .map(|(k, g)| (k.to_string(), vec![0.0; g.grad_len()]))
                .collect(),
        }
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Vec<f64> {
        self.groups
            .get_mut(name)
            .unwrap_or_else(|| panic!("gradient buffer `{name}` missing"))
    }

    pub fn get(&self, name: &str) -> &[f64] {
        &self.groups[name]
    }

    pub fn add_assign(&mut self, other: &GradStore) {
        for (k, v) in other.groups.iter() {
            if let Some(dst) = self.groups.get_mut(k) {
                for (a, b) in dst.iter_mut().zip(v) {
                    *a += b;
                }
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for v in self.groups.values_mut() {
            for x in v.iter_mut() {
                *x *= s;
            }
        }
    }

    /// Zeroes every group not accepted by `keep`.
    pub fn retain(&mut self, keep: impl Fn(&str) -> bool) {
        for (k, v) in self.groups.iter_mut() {
            if !keep(k) {
                v.iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }

    pub fn add_vec3(&mut self, name: &str, i: usize, v: &Vec3) {
        let g = self.get_mut(name);
        for k in 0..3 {
            g[3 * i + k] += v[k];
        }
    }

    /// First group holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.groups
            .iter()
            .find(|(_, v)| v.iter().any(|x| !x.is_finite()))
            .map(|(k, _)| k.as_str())
    }
}
