//! File-system helpers and the plain-text camera table.
//!
//! `cameras.txt` holds one row per frame:
//!
//! ```text
//! frame fx fy cx cy r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz
//! ```
//!
//! where `r` is the row-major world-to-camera rotation and `t` the
//! world-to-camera translation. Lines starting with `#` are comments. Image
//! size and near plane are not part of the row; they come from the scene
//! metadata.

use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::{Camera, Mat3, Vec3};

/// Writes through a sibling temporary file and renames it into place, so a
/// reader never observes a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".into());
    let tmp = path.with_file_name(format!(".{file_name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read_to_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn format_cameras(cameras: &[Camera]) -> String {
    let mut s = String::from("# frame fx fy cx cy r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz\n");
    for (i, c) in cameras.iter().enumerate() {
        write!(s, "{i} {} {} {} {}", c.fx, c.fy, c.cx, c.cy).unwrap();
        for r in 0..3 {
            for k in 0..3 {
                write!(s, " {}", c.rotation[(r, k)]).unwrap();
            }
        }
        writeln!(s, " {} {} {}", c.translation.x, c.translation.y, c.translation.z).unwrap();
    }
    s
}

pub fn parse_cameras(text: &str, width: usize, height: usize, near: f64) -> Result<Vec<Camera>> {
    let mut cams = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| Error::Parse { line: lineno + 1, msg };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 17 {
            return Err(err(format!("expected 17 fields, found {}", fields.len())));
        }
        let frame: usize = fields[0].parse().map_err(|_| err(format!("bad frame index `{}`", fields[0])))?;
        if frame != cams.len() {
            return Err(err(format!("frame {frame} out of order")));
        }
        let v: Vec<f64> = fields[1..]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| err(format!("bad number `{f}`"))))
            .collect::<Result<_>>()?;
        let rotation = Mat3::from_row_slice(&v[4..13]);
        let translation = Vec3::new(v[13], v[14], v[15]);
        let cam = Camera::new(v[0], v[1], v[2], v[3], rotation, translation, width, height, near)
            .map_err(|e| err(e.to_string()))?;
        cams.push(cam);
    }
    Ok(cams)
}
