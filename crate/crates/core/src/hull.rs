//! Incremental 3D convex hull, used to turn object Gaussian centers into a
//! watertight mesh for visualization.

use std::collections::HashSet;

use crate::error::{Error, Result};
use crate::geometry::Vec3;

/// Degeneracy tolerance on signed plane distances, scaled by the extent of
/// the input.
pub const HULL_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct TriMesh {
    pub vertices: Vec<Vec3>,
    pub triangles: Vec<[usize; 3]>,
}

impl TriMesh {
    /// Enclosed volume by the divergence theorem (outward winding).
    pub fn volume(&self) -> f64 {
        self.triangles
            .iter()
            .map(|t| self.vertices[t[0]].dot(&self.vertices[t[1]].cross(&self.vertices[t[2]])) / 6.0)
            .sum()
    }

    /// Every directed edge appears exactly once and its reverse exactly once.
    pub fn is_watertight(&self) -> bool {
        let mut edges = HashSet::new();
        for t in &self.triangles {
            for k in 0..3 {
                if !edges.insert((t[k], t[(k + 1) % 3])) {
                    return false;
                }
            }
        }
        edges.iter().all(|(a, b)| edges.contains(&(*b, *a)))
    }

    /// Wavefront OBJ text.
    pub fn to_obj(&self) -> String {
        let mut s = String::new();
        for v in &self.vertices {
            s.push_str(&format!("v {} {} {}\n", v.x, v.y, v.z));
        }
        for t in &self.triangles {
            s.push_str(&format!("f {} {} {}\n", t[0] + 1, t[1] + 1, t[2] + 1));
        }
        s
    }
}

#[derive(Clone)]
struct Face {
    v: [usize; 3],
    normal: Vec3,
    offset: f64,
}

impl Face {
    fn new(points: &[Vec3], v: [usize; 3]) -> Self {
        let n = (points[v[1]] - points[v[0]]).cross(&(points[v[2]] - points[v[0]]));
        let normal = n / n.norm();
        Face {
            v,
            normal,
            offset: normal.dot(&points[v[0]]),
        }
    }

    fn distance(&self, p: &Vec3) -> f64 {
        self.normal.dot(p) - self.offset
    }
}

pub fn convex_hull(points: &[Vec3]) -> Result<TriMesh> {
    if points.len() < 4 {
        return Err(Error::Degenerate(format!("{} points cannot span a volume", points.len())));
    }
    let extent = points.iter().map(|p| p.amax()).fold(1.0f64, f64::max);
    let eps = HULL_EPS * extent;

    let i0 = 0;
    let i1 = (0..points.len())
        .max_by(|&a, &b| (points[a] - points[i0]).norm().total_cmp(&(points[b] - points[i0]).norm()))
        .unwrap();
    let axis = points[i1] - points[i0];
    if axis.norm() <= eps {
        return Err(Error::Degenerate("all points coincide".into()));
    }
    let line_dist = |p: &Vec3| (p - points[i0]).cross(&axis).norm() / axis.norm();
    let i2 = (0..points.len()).max_by(|&a, &b| line_dist(&points[a]).total_cmp(&line_dist(&points[b]))).unwrap();
    if line_dist(&points[i2]) <= eps {
        return Err(Error::Degenerate("points are collinear".into()));
    }
    let base = Face::new(points, [i0, i1, i2]);
    let i3 = (0..points.len())
        .max_by(|&a, &b| base.distance(&points[a]).abs().total_cmp(&base.distance(&points[b]).abs()))
        .unwrap();
    if base.distance(&points[i3]).abs() <= eps {
        return Err(Error::Degenerate("points are coplanar".into()));
    }

    let tet = if base.distance(&points[i3]) > 0.0 {
        [[i0, i2, i1], [i0, i1, i3], [i1, i2, i3], [i2, i0, i3]]
    } else {
        [[i0, i1, i2], [i0, i3, i1], [i1, i3, i2], [i2, i3, i0]]
    };
    let mut faces: Vec<Face> = tet.iter().map(|v| Face::new(points, *v)).collect();

    for (p_idx, p) in points.iter().enumerate() {
        if [i0, i1, i2, i3].contains(&p_idx) {
            continue;
        }
        let visible: Vec<bool> = faces.iter().map(|f| f.distance(p) > eps).collect();
        if !visible.iter().any(|v| *v) {
            continue;
        }
        let mut edges = HashSet::new();
        for (f, _) in faces.iter().zip(&visible).filter(|(_, v)| **v) {
            for k in 0..3 {
                edges.insert((f.v[k], f.v[(k + 1) % 3]));
            }
        }
        let mut horizon: Vec<(usize, usize)> = edges.iter().copied().filter(|(a, b)| !edges.contains(&(*b, *a))).collect();
        horizon.sort_unstable();
        let mut kept: Vec<Face> = faces.into_iter().zip(visible).filter(|(_, v)| !*v).map(|(f, _)| f).collect();
        for (a, b) in horizon {
            kept.push(Face::new(points, [a, b, p_idx]));
        }
        faces = kept;
    }

    // compact to the vertices actually used, in input order
    let mut used: Vec<usize> = faces.iter().flat_map(|f| f.v).collect();
    used.sort_unstable();
    used.dedup();
    let mut remap = vec![usize::MAX; points.len()];
    for (new, old) in used.iter().enumerate() {
        remap[*old] = new;
    }
    let mut triangles: Vec<[usize; 3]> = faces.iter().map(|f| f.v.map(|i| remap[i])).collect();
    triangles.sort_unstable();
    Ok(TriMesh {
        vertices: used.iter().map(|i| points[*i]).collect(),
        triangles,
    })
}
