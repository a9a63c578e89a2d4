//! Gaussian point clouds as binary little-endian PLY.
//!
//! Layout: an ASCII header
//!
//! ```text
//! ply
//! format binary_little_endian 1.0
//! comment subject <left|right|object>
//! element vertex <N>
//! property float x            (and y, z)
//! property float scale_0      (and scale_1, scale_2; natural log of the scale)
//! property float rot_0        (and rot_1..rot_3; quaternion w, x, y, z)
//! property float opacity      (logit of the opacity)
//! property float red          (and green, blue; linear color)
//! end_header
//! ```
//!
//! followed by `N` records of 14 `f32` values in that order.

use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Gaussian3D, GaussianSet, Quat, Subject, Vec3};

pub const PROPERTIES: [&str; 14] = [
    "x", "y", "z", "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3", "opacity", "red", "green", "blue",
];

fn record(g: &Gaussian3D) -> [f32; 14] {
    let logit = (g.opacity / (1.0 - g.opacity)).ln();
    [
        g.center.x as f32,
        g.center.y as f32,
        g.center.z as f32,
        g.scale.x.ln() as f32,
        g.scale.y.ln() as f32,
        g.scale.z.ln() as f32,
        g.rotation.w as f32,
        g.rotation.x as f32,
        g.rotation.y as f32,
        g.rotation.z as f32,
        logit as f32,
        g.color.x as f32,
        g.color.y as f32,
        g.color.z as f32,
    ]
}

fn from_record(r: &[f32; 14]) -> Gaussian3D {
    let v = |i: usize| r[i] as f64;
    Gaussian3D {
        center: Vec3::new(v(0), v(1), v(2)),
        scale: Vec3::new(v(3).exp(), v(4).exp(), v(5).exp()),
        rotation: Quat::new(v(6), v(7), v(8), v(9)),
        opacity: 1.0 / (1.0 + (-v(10)).exp()),
        color: Vec3::new(v(11), v(12), v(13)),
    }
}

pub fn to_bytes(set: &GaussianSet) -> Vec<u8> {
    let mut header = format!(
        "ply\nformat binary_little_endian 1.0\ncomment subject {}\nelement vertex {}\n",
        set.subject.as_str(),
        set.len()
    );
    for p in PROPERTIES {
        header.push_str(&format!("property float {p}\n"));
    }
    header.push_str("end_header\n");
    let mut out = header.into_bytes();
    out.reserve(set.len() * 14 * 4);
    for g in &set.gaussians {
        for v in record(g) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<GaussianSet> {
    let mut pos = 0;
    let mut line_no = 0;
    let mut next_line = |pos: &mut usize| -> Result<(usize, String)> {
        let rest = &bytes[*pos..];
        let end = rest
            .iter()
            .position(|b| *b == b'\n')
            .ok_or(Error::Parse { line: line_no + 1, msg: "unterminated header".into() })?;
        let line = std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::Parse { line: line_no + 1, msg: "header is not UTF-8".into() })?
            .trim_end_matches('\r')
            .to_string();
        *pos += end + 1;
        line_no += 1;
        Ok((line_no, line))
    };
    let err = |line: usize, msg: &str| Error::Parse { line, msg: msg.to_string() };

    let (l, magic) = next_line(&mut pos)?;
    if magic != "ply" {
        return Err(err(l, "missing `ply` magic"));
    }
    let (l, format) = next_line(&mut pos)?;
    if format != "format binary_little_endian 1.0" {
        return Err(err(l, "only binary_little_endian 1.0 is supported"));
    }
    let mut subject = Subject::Object;
    let mut count = None;
    let mut props = Vec::new();
    loop {
        let (l, line) = next_line(&mut pos)?;
        let words: Vec<&str> = line.split_whitespace().collect();
        match words.as_slice() {
            ["end_header"] => break,
            ["comment", "subject", s] => {
                subject = match *s {
                    "left" => Subject::LeftHand,
                    "right" => Subject::RightHand,
                    "object" => Subject::Object,
                    _ => return Err(err(l, "unknown subject")),
                }
            }
            ["comment", ..] => {}
            ["element", "vertex", n] => {
                if count.is_some() {
                    return Err(err(l, "duplicate vertex element"));
                }
                count = Some(n.parse::<usize>().map_err(|_| err(l, "bad vertex count"))?);
            }
            ["property", "float", name] => {
                if count.is_none() {
                    return Err(err(l, "property before element"));
                }
                props.push((l, name.to_string()));
            }
            _ => return Err(err(l, &format!("unexpected header line `{line}`"))),
        }
    }
    let count = count.ok_or(err(line_no, "no vertex element"))?;
    if props.len() != PROPERTIES.len() {
        return Err(err(line_no, &format!("expected {} properties, found {}", PROPERTIES.len(), props.len())));
    }
    for ((l, got), want) in props.iter().zip(PROPERTIES) {
        if got != want {
            return Err(err(*l, &format!("expected property `{want}`, found `{got}`")));
        }
    }
    let body = &bytes[pos..];
    if body.len() != count * 14 * 4 {
        return Err(err(line_no, &format!("body has {} bytes, expected {}", body.len(), count * 56)));
    }
    let gaussians = body
        .chunks_exact(56)
        .map(|rec| {
            let mut r = [0f32; 14];
            for (k, v) in r.iter_mut().enumerate() {
                *v = f32::from_le_bytes(rec[4 * k..4 * k + 4].try_into().unwrap());
            }
            from_record(&r)
        })
        .collect();
    Ok(GaussianSet::new(subject, gaussians))
}

pub fn export_ply(set: &GaussianSet, path: &Path) -> Result<()> {
    crate::io::write_atomic(path, &to_bytes(set))
}

pub fn import_ply(path: &Path) -> Result<GaussianSet> {
    from_bytes(&crate::io::read_bytes(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two() -> GaussianSet {
        GaussianSet::new(
            Subject::LeftHand,
            vec![
                Gaussian3D::isotropic(Vec3::new(0.1, -0.2, 0.3), 0.01, 0.7, Vec3::new(0.2, 0.4, 0.6)),
                Gaussian3D {
                    center: Vec3::new(1.0, 2.0, 3.0),
                    scale: Vec3::new(0.5, 0.25, 2.0),
                    rotation: Quat::new(0.5, 0.5, -0.5, 0.5),
                    opacity: 0.5,
                    color: Vec3::new(1.0, 0.0, 0.5),
                },
            ],
        )
    }

    #[test]
    fn byte_level_layout() {
        let bytes = to_bytes(&two());
        let text = String::from_utf8_lossy(&bytes);
        let start = text.find("end_header\n").unwrap() + "end_header\n".len();
        let body = &bytes[start..];
        assert_eq!(body.len(), 2 * 56);
        let f = |k: usize| f32::from_le_bytes(body[4 * k..4 * k + 4].try_into().unwrap());
        // second record: x, scale_1 = ln 0.25, rot_2, opacity logit 0, blue
        assert_eq!(f(14), 1.0);
        assert_eq!(f(14 + 4), (0.25f64).ln() as f32);
        assert_eq!(f(14 + 8), -0.5);
        assert_eq!(f(14 + 10), 0.0);
        assert_eq!(f(14 + 13), 0.5);
        assert!(text.starts_with("ply\nformat binary_little_endian 1.0\ncomment subject left\nelement vertex 2\nproperty float x\n"));
    }

    #[test]
    fn round_trip_is_bit_exact_after_quantization() {
        let bytes = to_bytes(&two());
        let once = from_bytes(&bytes).unwrap();
        assert_eq!(once.subject, Subject::LeftHand);
        assert_eq!(to_bytes(&once), bytes);
        let twice = from_bytes(&to_bytes(&once)).unwrap();
        assert_eq!(once, twice);
    }

    #[test]
    fn empty_set() {
        let set = GaussianSet::new(Subject::Object, vec![]);
        let back = from_bytes(&to_bytes(&set)).unwrap();
        assert!(back.is_empty());
    }

    #[test]
    fn malformed_header_reports_line() {
        let bad = b"ply\nformat binary_little_endian 1.0\nelement vertex x\n";
        match from_bytes(bad) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        let mut swapped = to_bytes(&two());
        let pos = swapped.windows(9).position(|w| w == b"float red").unwrap();
        swapped[pos + 6..pos + 9].copy_from_slice(b"xyz");
        assert!(matches!(from_bytes(&swapped), Err(Error::Parse { .. })));
    }
}
