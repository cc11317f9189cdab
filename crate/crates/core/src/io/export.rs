//! Plain-text keypoint, mesh and joint files.

use std::fmt::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::inference::Keypoints;

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses `joint_id,x,y,visibility` rows; a header line is optional and
/// joints absent from the file are invisible.
pub fn parse_keypoints(text: &str, n_joints: usize) -> Result<Keypoints> {
    let mut kp = Keypoints {
        points: vec![[0.0; 2]; n_joints],
        visible: vec![false; n_joints],
    };
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("joint_id")) {
            continue;
        }
        let bad = |why: String| Error::Data(format!("keypoints line {}: {why}", i + 1));
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        if fields.len() != 4 {
            return Err(bad(format!("expected 4 fields, got {}", fields.len())));
        }
        let j: usize = fields[0].parse().map_err(|_| bad(format!("bad joint id `{}`", fields[0])))?;
        if j >= n_joints {
            return Err(bad(format!("joint id {j} out of range 0..{n_joints}")));
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad(format!("bad number `{s}`")));
        let (x, y, v) = (num(fields[1])?, num(fields[2])?, num(fields[3])?);
        kp.points[j] = [x, y];
        kp.visible[j] = v > 0.0;
    }
    Ok(kp)
}

pub fn read_keypoints(path: &Path, n_joints: usize) -> Result<Keypoints> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_keypoints(&text, n_joints)
}

pub fn keypoints_csv(kp: &Keypoints) -> String {
    let mut out = String::from("joint_id,x,y,visibility\n");
    for (j, (p, &v)) in kp.points.iter().zip(&kp.visible).enumerate() {
        writeln!(out, "{j},{},{},{}", p[0], p[1], u8::from(v)).expect("string write");
    }
    out
}

pub fn write_keypoints(path: &Path, kp: &Keypoints) -> Result<()> {
    write_text(path, &keypoints_csv(kp))
}

/// Vertices-only ASCII OBJ.
pub fn write_obj(path: &Path, vertices: &[[f64; 3]]) -> Result<()> {
    let mut out = String::new();
    for v in vertices {
        writeln!(out, "v {} {} {}", v[0], v[1], v[2]).expect("string write");
    }
    write_text(path, &out)
}

pub fn write_joints2d(path: &Path, joints: &[[f64; 2]]) -> Result<()> {
    let mut out = String::from("joint_id,x,y\n");
    for (j, p) in joints.iter().enumerate() {
        writeln!(out, "{j},{},{}", p[0], p[1]).expect("string write");
    }
    write_text(path, &out)
}

pub fn write_joints3d(path: &Path, joints: &[[f64; 3]]) -> Result<()> {
    let mut out = String::from("joint_id,x,y,z\n");
    for (j, p) in joints.iter().enumerate() {
        writeln!(out, "{j},{},{},{}", p[0], p[1], p[2]).expect("string write");
    }
    write_text(path, &out)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

/// Comma-separated table with a header row.
pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<()> {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    write_text(path, &out)
}

/// Rows of any serializable struct, columns in field order.
pub fn write_records<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for r in rows {
        w.serialize(r).map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
