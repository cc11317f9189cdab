//! JSON-lines samples with an optional binary image sidecar.
//!
//! Sidecar layout, little-endian: `"GHIM" | u32 version | u32 H | u32 W |
//! u32 C | u64 n | u64 offsets[n] | f32 pixels...`, offsets counted in
//! floats from the start of the pixel block.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use crate::body::{NUM_BETAS, NUM_JOINTS};
use crate::error::{Error, Result};
use crate::training::{Dataset, Sample};

pub const IMAGE_MAGIC: &[u8; 4] = b"GHIM";
const IMAGE_VERSION: u32 = 1;

/// `data.jsonl` → `data.images.bin`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("images.bin")
}

pub fn write_dataset(path: &Path, data: &Dataset) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    for s in &data.samples {
        serde_json::to_writer(&mut out, s).map_err(|e| Error::Data(e.to_string()))?;
        out.write_all(b"\n").map_err(io)?;
    }
    out.flush().map_err(io)?;
    let side = sidecar_path(path);
    match &data.images {
        Some(images) => write_images(&side, images, data.image_shape),
        None => match std::fs::remove_file(&side) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(Error::io(&side, e)),
            _ => Ok(()),
        },
    }
}

fn write_images(path: &Path, images: &[Vec<f32>], shape: [usize; 3]) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut out = BufWriter::new(File::create(path).map_err(io)?);
    let mut header = Vec::with_capacity(28 + 8 * images.len());
    header.extend_from_slice(IMAGE_MAGIC);
    header.extend_from_slice(&IMAGE_VERSION.to_le_bytes());
    for d in shape {
        header.extend_from_slice(&(d as u32).to_le_bytes());
    }
    header.extend_from_slice(&(images.len() as u64).to_le_bytes());
    let mut offset = 0u64;
    for img in images {
        header.extend_from_slice(&offset.to_le_bytes());
        offset += img.len() as u64;
    }
    out.write_all(&header).map_err(io)?;
    for img in images {
        for v in img {
            out.write_all(&v.to_le_bytes()).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

fn read_images(path: &Path) -> Result<(Vec<Vec<f32>>, [usize; 3])> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |why: &str| Error::Data(format!("{}: {why}", path.display()));
    if bytes.len() < 28 || &bytes[..4] != IMAGE_MAGIC {
        return Err(bad("not an image sidecar"));
    }
    let u32_at = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().expect("4 bytes")) as usize;
    let u64_at = |i: usize| u64::from_le_bytes(bytes[i..i + 8].try_into().expect("8 bytes")) as usize;
    if u32_at(4) != IMAGE_VERSION as usize {
        return Err(bad("unsupported version"));
    }
    let shape = [u32_at(8), u32_at(12), u32_at(16)];
    let n = u64_at(20);
    let pixels_at = 28 + 8 * n;
    let per = shape.iter().product::<usize>();
    if bytes.len() != pixels_at + 4 * n * per {
        return Err(bad("size does not match header"));
    }
    let images = (0..n)
        .map(|i| {
            let start = pixels_at + 4 * u64_at(28 + 8 * i);
            bytes
                .get(start..start + 4 * per)
                .ok_or_else(|| bad("offset out of range"))
                .map(|raw| {
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                        .collect()
                })
        })
        .collect::<Result<_>>()?;
    Ok((images, shape))
}

fn check_sample(s: &Sample, line: usize) -> Result<()> {
    let bad = |what: &str, n: usize, want: usize| {
        Err(Error::Data(format!("line {line}: `{what}` has {n} entries, expected {want}")))
    };
    if s.theta.len() != NUM_JOINTS {
        return bad("theta", s.theta.len(), NUM_JOINTS);
    }
    if s.beta.len() != NUM_BETAS {
        return bad("beta", s.beta.len(), NUM_BETAS);
    }
    if s.joints3d.len() != NUM_JOINTS {
        return bad("joints3d", s.joints3d.len(), NUM_JOINTS);
    }
    if s.joints2d.len() != NUM_JOINTS {
        return bad("joints2d", s.joints2d.len(), NUM_JOINTS);
    }
    Ok(())
}

/// Reads samples and, when the sidecar exists, their images.
/// `image_size` sets the reported shape of image-less datasets.
pub fn read_dataset(path: &Path, image_size: usize) -> Result<Dataset> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut samples = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: Sample = serde_json::from_str(&line).map_err(|e| Error::Data(format!("line {}: {e}", i + 1)))?;
        check_sample(&s, i + 1)?;
        samples.push(s);
    }
    let side = sidecar_path(path);
    if !side.exists() {
        return Ok(Dataset {
            samples,
            images: None,
            image_shape: [image_size, image_size, NUM_JOINTS],
        });
    }
    let (images, image_shape) = read_images(&side)?;
    if images.len() != samples.len() {
        return Err(Error::Data(format!(
            "{} samples but {} images in {}",
            samples.len(),
            images.len(),
            side.display()
        )));
    }
    Ok(Dataset {
        samples,
        images: Some(images),
        image_shape,
    })
}
