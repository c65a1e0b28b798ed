//! Plain-text camera list: one pinhole camera per line.
//!
//! Columns: `fx fy cx cy width height r00..r22 tx ty tz` (world-to-camera
//! rotation row major, then translation). `#` comments allowed.

use desplat_core::camera::Camera;
use desplat_core::math::{Mat3, Vec3};
use std::fmt::Write as _;
use std::fs;
use std::io;
use std::path::Path;

pub fn cameras_to_text(cameras: &[Camera]) -> String {
    let mut out =
        String::from("# fx fy cx cy width height r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz\n");
    for c in cameras {
        let m = &c.rotation.m;
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            c.focal[0],
            c.focal[1],
            c.principal_point[0],
            c.principal_point[1],
            c.resolution[0],
            c.resolution[1],
            m[0][0],
            m[0][1],
            m[0][2],
            m[1][0],
            m[1][1],
            m[1][2],
            m[2][0],
            m[2][1],
            m[2][2],
            c.translation.x,
            c.translation.y,
            c.translation.z,
        );
    }
    out
}

pub fn write_cameras(path: &Path, cameras: &[Camera]) -> io::Result<()> {
    fs::write(path, cameras_to_text(cameras))
}

pub fn read_cameras(path: &Path) -> io::Result<Vec<Camera>> {
    let text = fs::read_to_string(path)?;
    parse_cameras(&text).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

pub fn parse_cameras(text: &str) -> Result<Vec<Camera>, String> {
    let mut cams = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 18 {
            return Err(format!(
                "line {}: expected 18 fields, got {}",
                lineno + 1,
                fields.len()
            ));
        }
        let num = |i: usize| -> Result<f64, String> {
            fields[i]
                .parse()
                .map_err(|_| format!("line {}: bad number `{}`", lineno + 1, fields[i]))
        };
        let int = |i: usize| -> Result<u32, String> {
            fields[i]
                .parse()
                .map_err(|_| format!("line {}: bad integer `{}`", lineno + 1, fields[i]))
        };
        let rotation = Mat3::from_rows([
            [num(6)?, num(7)?, num(8)?],
            [num(9)?, num(10)?, num(11)?],
            [num(12)?, num(13)?, num(14)?],
        ]);
        let camera = Camera::new(
            [num(0)?, num(1)?],
            [num(2)?, num(3)?],
            [int(4)?, int(5)?],
            rotation,
            Vec3::new(num(15)?, num(16)?, num(17)?),
        )
        .map_err(|e| format!("line {}: {e}", lineno + 1))?;
        cams.push(camera);
    }
    Ok(cams)
}
