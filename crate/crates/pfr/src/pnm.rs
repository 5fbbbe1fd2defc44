//! Binary PPM (P6) colour images and PGM (P5) class maps, maxval 255.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use pfr_core::Tensor;

#[derive(Debug, thiserror::Error)]
pub enum PnmError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: {detail}")]
    Format { path: PathBuf, detail: String },
}

/// Decoded header fields and the offset of the first pixel byte.
struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header, String> {
    if bytes.len() < 2 {
        return Err("file too short for a header".into());
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(_) => break,
                None => return Err("truncated header".into()),
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or("malformed header number")?;
    }
    // exactly one whitespace byte separates maxval from the raster
    if !bytes.get(pos).is_some_and(u8::is_ascii_whitespace) {
        return Err("missing whitespace after maxval".into());
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}, expected 255"));
    }
    if width == 0 || height == 0 {
        return Err("zero image extent".into());
    }
    Ok(Header {
        magic,
        width,
        height,
        offset: pos + 1,
    })
}

fn read(path: &Path, magic: &[u8; 2], channels: usize) -> Result<(usize, usize, Vec<u8>), PnmError> {
    let bytes = fs::read(path).map_err(|source| PnmError::Io {
        path: path.into(),
        source,
    })?;
    let format = |detail: String| PnmError::Format {
        path: path.into(),
        detail,
    };
    let h = parse_header(&bytes).map_err(format)?;
    if &h.magic != magic {
        return Err(format(format!(
            "expected magic {}, found {:?}",
            String::from_utf8_lossy(magic),
            String::from_utf8_lossy(&h.magic)
        )));
    }
    let len = h.width * h.height * channels;
    let raster = &bytes[h.offset..];
    if raster.len() != len {
        return Err(format(format!(
            "raster holds {} bytes, expected {len}",
            raster.len()
        )));
    }
    Ok((h.width, h.height, raster.to_vec()))
}

fn write(path: &Path, magic: &str, width: usize, height: usize, raster: &[u8]) -> Result<(), PnmError> {
    let mut out = format!("{magic}\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(raster);
    fs::write(path, out).map_err(|source| PnmError::Io {
        path: path.into(),
        source,
    })
}

/// Quantizes a `[3, H, W]` image in `[0, 1]` to 8 bits, interleaved RGB.
pub fn encode_rgb(image: &Tensor<f32>) -> Vec<u8> {
    let [c, h, w] = image.shape()[..] else {
        panic!("encode_rgb expects [3, H, W]")
    };
    assert_eq!(c, 3, "encode_rgb expects 3 channels");
    let plane = h * w;
    let data = image.data();
    (0..plane)
        .flat_map(|p| (0..3).map(move |ch| (data[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect()
}

pub fn write_ppm(path: &Path, image: &Tensor<f32>) -> Result<(), PnmError> {
    let shape = image.shape();
    write(path, "P6", shape[2], shape[1], &encode_rgb(image))
}

/// Reads a P6 file into a planar `[3, H, W]` tensor scaled to `[0, 1]`.
pub fn read_ppm(path: &Path) -> Result<Tensor<f32>, PnmError> {
    let (w, h, raster) = read(path, b"P6", 3)?;
    let plane = w * h;
    let mut data = vec![0.0f32; 3 * plane];
    for (i, &b) in raster.iter().enumerate() {
        data[(i % 3) * plane + i / 3] = b as f32 / 255.0;
    }
    Ok(Tensor::new([3, h, w], data).expect("sized from header"))
}

pub fn write_pgm(path: &Path, width: usize, height: usize, values: &[u8]) -> Result<(), PnmError> {
    assert_eq!(values.len(), width * height, "pgm raster size");
    write(path, "P5", width, height, values)
}

/// Returns `(width, height, values)`.
pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>), PnmError> {
    read(path, b"P5", 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_is_exact_on_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.ppm");
        let img = Tensor::from_fn([3, 2, 3], |i| ((i * 37) % 256) as f32 / 255.0);
        write_ppm(&path, &img).unwrap();
        let back = read_ppm(&path).unwrap();
        assert_eq!(back.shape(), &[3, 2, 3]);
        assert_eq!(encode_rgb(&back), encode_rgb(&img));
        let bytes = fs::read(&path).unwrap();
        assert!(bytes.starts_with(b"P6\n3 2\n255\n"));
    }

    #[test]
    fn pgm_round_trip_and_comments() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.pgm");
        write_pgm(&path, 2, 2, &[0, 1, 4, 3]).unwrap();
        assert_eq!(read_pgm(&path).unwrap(), (2, 2, vec![0, 1, 4, 3]));
        fs::write(&path, b"P5 # comment\n2 1\n255\n\x02\x00").unwrap();
        assert_eq!(read_pgm(&path).unwrap(), (2, 1, vec![2, 0]));
    }

    #[test]
    fn rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.pgm");
        fs::write(&path, b"P6\n1 1\n255\n\x00\x00\x00").unwrap();
        assert!(matches!(read_pgm(&path), Err(PnmError::Format { .. })));
        fs::write(&path, b"P5\n2 2\n255\n\x00").unwrap();
        assert!(matches!(read_pgm(&path), Err(PnmError::Format { .. })));
        fs::write(&path, b"P5\n1 1\n65535\n\x00\x00").unwrap();
        assert!(read_pgm(&path).is_err());
        assert!(matches!(
            read_pgm(&dir.path().join("missing.pgm")),
            Err(PnmError::Io { .. })
        ));
    }
}
