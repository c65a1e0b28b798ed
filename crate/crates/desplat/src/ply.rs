//! Scene persistence in the community splat PLY layout.
//!
//! Binary little-endian PLY with per-vertex properties
//! `x y z f_dc_0..2 opacity scale_0..2 rot_0..3` (opacity as a logit, scales
//! as logs, rotation in (w, x, y, z) order). Properties are written as
//! `double` so the f64 pipeline round-trips bit-exactly; the reader also
//! accepts `float` properties from externally produced files. Degree-0 RGB
//! color is stored directly in the `f_dc_*` slots.

use desplat_core::gaussian::GaussianPrimitive;
use desplat_core::math::{Quat, Vec3};
use desplat_core::scene::Scene;
use std::fs;
use std::io::{self, Write};
use std::path::Path;

const PROPERTIES: [&str; 14] = [
    "x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity", "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
];

pub fn write_ply(path: &Path, scene: &Scene) -> io::Result<()> {
    let mut out = Vec::with_capacity(512 + scene.len() * 14 * 8);
    write!(out, "ply\nformat binary_little_endian 1.0\n")?;
    write!(out, "comment desplat splat scene\n")?;
    write!(out, "comment rng_seed {}\n", scene.rng_seed)?;
    write!(out, "comment next_stream {}\n", scene.next_stream)?;
    write!(out, "element vertex {}\n", scene.len())?;
    for name in PROPERTIES {
        write!(out, "property double {name}\n")?;
    }
    write!(out, "end_header\n")?;
    for p in &scene.primitives {
        let values = [
            p.mean.x,
            p.mean.y,
            p.mean.z,
            p.color.x,
            p.color.y,
            p.color.z,
            p.raw_opacity,
            p.log_scale.x,
            p.log_scale.y,
            p.log_scale.z,
            p.rotation.w,
            p.rotation.x,
            p.rotation.y,
            p.rotation.z,
        ];
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum PropType {
    Float,
    Double,
}

impl PropType {
    fn size(self) -> usize {
        match self {
            PropType::Float => 4,
            PropType::Double => 8,
        }
    }
}

pub fn read_ply(path: &Path) -> io::Result<Scene> {
    let bytes = fs::read(path)?;
    parse_ply(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
}

fn parse_ply(bytes: &[u8]) -> Result<Scene, String> {
    let header_end = find_header_end(bytes).ok_or("missing end_header")?;
    let header = std::str::from_utf8(&bytes[..header_end]).map_err(|_| "non-utf8 header")?;
    let body = &bytes[header_end..];

    let mut count: Option<usize> = None;
    let mut props: Vec<(String, PropType)> = Vec::new();
    let mut rng_seed = 0u64;
    let mut next_stream = 0u64;
    let mut saw_format = false;

    for line in header.lines() {
        let line = line.trim();
        let mut words = line.split_whitespace();
        match words.next() {
            Some("ply") | Some("end_header") | None => {}
            Some("format") => {
                if line != "format binary_little_endian 1.0" {
                    return Err(format!("unsupported format line: {line}"));
                }
                saw_format = true;
            }
            Some("comment") => {
                let rest: Vec<&str> = words.collect();
                if rest.len() == 2 {
                    match rest[0] {
                        "rng_seed" => rng_seed = rest[1].parse().unwrap_or(0),
                        "next_stream" => next_stream = rest[1].parse().unwrap_or(0),
                        _ => {}
                    }
                }
            }
            Some("element") => {
                let kind = words.next().ok_or("bad element line")?;
                if kind != "vertex" {
                    return Err(format!("unsupported element {kind}"));
                }
                count = Some(
                    words
                        .next()
                        .ok_or("missing vertex count")?
                        .parse()
                        .map_err(|_| "bad vertex count")?,
                );
            }
            Some("property") => {
                let ty = match words.next() {
                    Some("float") | Some("float32") => PropType::Float,
                    Some("double") | Some("float64") => PropType::Double,
                    Some(other) => return Err(format!("unsupported property type {other}")),
                    None => return Err("bad property line".into()),
                };
                let name = words.next().ok_or("missing property name")?;
                props.push((name.to_string(), ty));
            }
            Some(other) => return Err(format!("unexpected header keyword {other}")),
        }
    }

    if !saw_format {
        return Err("missing format line".into());
    }
    let count = count.ok_or("missing vertex element")?;
    let stride: usize = props.iter().map(|(_, t)| t.size()).sum();
    if body.len() < count * stride {
        return Err("truncated vertex data".into());
    }

    // Byte offset of each required property within a vertex record.
    let mut offsets = [usize::MAX; 14];
    let mut types = [PropType::Double; 14];
    for (slot, wanted) in PROPERTIES.iter().enumerate() {
        let mut off = 0;
        let mut found = false;
        for (name, ty) in &props {
            if name == wanted {
                offsets[slot] = off;
                types[slot] = *ty;
                found = true;
                break;
            }
            off += ty.size();
        }
        if !found {
            return Err(format!("missing property {wanted}"));
        }
    }

    let read_value = |record: &[u8], slot: usize| -> f64 {
        let off = offsets[slot];
        match types[slot] {
            PropType::Float => {
                f32::from_le_bytes(record[off..off + 4].try_into().unwrap()) as f64
            }
            PropType::Double => f64::from_le_bytes(record[off..off + 8].try_into().unwrap()),
        }
    };

    let mut primitives = Vec::with_capacity(count);
    for i in 0..count {
        let record = &body[i * stride..(i + 1) * stride];
        let v: Vec<f64> = (0..14).map(|s| read_value(record, s)).collect();
        primitives.push(GaussianPrimitive {
            mean: Vec3::new(v[0], v[1], v[2]),
            color: Vec3::new(v[3], v[4], v[5]),
            raw_opacity: v[6],
            log_scale: Vec3::new(v[7], v[8], v[9]),
            rotation: Quat::new(v[10], v[11], v[12], v[13]),
        });
    }

    Ok(Scene::from_parts(primitives, rng_seed, Vec::new(), next_stream))
}

fn find_header_end(bytes: &[u8]) -> Option<usize> {
    let needle = b"end_header\n";
    bytes
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|pos| pos + needle.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use desplat_core::rng::StreamRng;

    fn random_scene(seed: u64, n: usize) -> Scene {
        let mut rng = StreamRng::new(seed, 2);
        let prims = (0..n)
            .map(|_| {
                let q = rng.next_unit_quat();
                GaussianPrimitive {
                    mean: Vec3::new(
                        rng.next_range(-1.0, 1.0),
                        rng.next_range(-1.0, 1.0),
                        rng.next_range(-1.0, 1.0),
                    ),
                    log_scale: Vec3::new(
                        rng.next_range(-4.0, 0.0),
                        rng.next_range(-4.0, 0.0),
                        rng.next_range(-4.0, 0.0),
                    ),
                    rotation: Quat::new(q[0], q[1], q[2], q[3]),
                    raw_opacity: rng.next_range(-6.0, 4.0),
                    color: Vec3::new(rng.next_f64(), rng.next_f64(), rng.next_f64()),
                }
            })
            .collect();
        Scene::new(prims, seed)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join("desplat_ply_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.ply");
        let scene = random_scene(1, 57);
        write_ply(&path, &scene).unwrap();
        let back = read_ply(&path).unwrap();
        assert_eq!(back.rng_seed, scene.rng_seed);
        assert_eq!(back.next_stream, scene.next_stream);
        assert_eq!(back.primitives.len(), scene.primitives.len());
        for (a, b) in scene.primitives.iter().zip(back.primitives.iter()) {
            // Bit-exact: compare raw bits, not tolerances.
            assert_eq!(a.mean.x.to_bits(), b.mean.x.to_bits());
            assert_eq!(a.log_scale.y.to_bits(), b.log_scale.y.to_bits());
            assert_eq!(a.rotation.w.to_bits(), b.rotation.w.to_bits());
            assert_eq!(a.raw_opacity.to_bits(), b.raw_opacity.to_bits());
            assert_eq!(a.color.z.to_bits(), b.color.z.to_bits());
        }
        // Byte-identical files on re-save.
        let path2 = dir.join("rt2.ply");
        write_ply(&path2, &back).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn reads_float32_files() {
        // External community files store float32; synthesize one by hand.
        let dir = std::env::temp_dir().join("desplat_ply_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("f32.ply");
        let mut out: Vec<u8> = Vec::new();
        out.extend_from_slice(b"ply\nformat binary_little_endian 1.0\nelement vertex 1\n");
        for name in PROPERTIES {
            out.extend_from_slice(format!("property float {name}\n").as_bytes());
        }
        out.extend_from_slice(b"end_header\n");
        let values: [f32; 14] = [
            1.0, 2.0, 3.0, 0.5, 0.25, 0.75, -1.5, -2.0, -2.5, -3.0, 1.0, 0.0, 0.0, 0.0,
        ];
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(&path, out).unwrap();

        let scene = read_ply(&path).unwrap();
        assert_eq!(scene.len(), 1);
        let p = &scene.primitives[0];
        assert_eq!(p.mean, Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(p.raw_opacity, -1.5);
        assert_eq!(p.rotation, Quat::new(1.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn missing_property_is_an_error() {
        let dir = std::env::temp_dir().join("desplat_ply_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ply");
        std::fs::write(
            &path,
            b"ply\nformat binary_little_endian 1.0\nelement vertex 0\nproperty double x\nend_header\n",
        )
        .unwrap();
        assert!(read_ply(&path).is_err());
    }
}
