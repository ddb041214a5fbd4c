//! 8-bit grayscale PNG and PGM codecs. Intensities map linearly between
//! [0, 1] and 0..=255.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use sonoqa_core::preprocess::GrayImage;

use crate::{CliError, CliResult};

fn to_bytes(img: &GrayImage) -> Vec<u8> {
    img.data().iter().map(|&v| (v * 255.0).round().clamp(0.0, 255.0) as u8).collect()
}

fn from_bytes(width: usize, height: usize, bytes: &[u8]) -> CliResult<GrayImage> {
    let data: Vec<f64> = bytes.iter().map(|&b| b as f64 / 255.0).collect();
    GrayImage::new(width, height, data).map_err(CliError::from)
}

pub fn write_png(path: &Path, img: &GrayImage) -> CliResult<()> {
    let file = File::create(path)?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), img.width() as u32, img.height() as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| CliError::Data(format!("png encode {}: {e}", path.display())))?;
    writer
        .write_image_data(&to_bytes(img))
        .map_err(|e| CliError::Data(format!("png encode {}: {e}", path.display())))?;
    Ok(())
}

pub fn read_png(path: &Path) -> CliResult<GrayImage> {
    let file = File::open(path)?;
    let decoder = png::Decoder::new(file);
    let mut reader = decoder
        .read_info()
        .map_err(|e| CliError::Data(format!("corrupt png {}: {e}", path.display())))?;
    let mut buf = vec![0u8; reader.output_buffer_size()];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| CliError::Data(format!("corrupt png {}: {e}", path.display())))?;
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Eight {
        return Err(CliError::Data(format!(
            "{}: expected 8-bit grayscale, got {:?}/{:?}",
            path.display(),
            info.color_type,
            info.bit_depth
        )));
    }
    from_bytes(info.width as usize, info.height as usize, &buf[..info.buffer_size()])
}

pub fn write_pgm(path: &Path, img: &GrayImage) -> CliResult<()> {
    let mut f = BufWriter::new(File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", img.width(), img.height())?;
    f.write_all(&to_bytes(img))?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> CliResult<GrayImage> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    let bad = |m: &str| CliError::Data(format!("corrupt pgm {}: {m}", path.display()));
    // header: magic, width, height, maxval, single whitespace, then data
    let mut pos = 0usize;
    let mut token = |raw: &[u8]| -> CliResult<String> {
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < raw.len() && raw[pos] == b'#' {
            while pos < raw.len() && raw[pos] != b'\n' {
                pos += 1;
            }
        }
        while pos < raw.len() && raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < raw.len() && !raw[pos].is_ascii_whitespace() {
            pos += 1;
        }
        Ok(String::from_utf8_lossy(&raw[start..pos]).into_owned())
    };
    if token(&raw)? != "P5" {
        return Err(bad("not a P5 file"));
    }
    let width: usize = token(&raw)?.parse().map_err(|_| bad("bad width"))?;
    let height: usize = token(&raw)?.parse().map_err(|_| bad("bad height"))?;
    let maxval: usize = token(&raw)?.parse().map_err(|_| bad("bad maxval"))?;
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    pos += 1; // single whitespace after maxval
    if raw.len() < pos + width * height {
        return Err(bad("truncated pixel data"));
    }
    from_bytes(width, height, &raw[pos..pos + width * height])
}

/// Dispatch on the file extension (png or pgm).
pub fn read_image(path: &Path) -> CliResult<GrayImage> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => read_png(path),
        Some("pgm") => read_pgm(path),
        other => Err(CliError::Data(format!(
            "unsupported image extension {other:?} for {}",
            path.display()
        ))),
    }
}

pub fn write_image(path: &Path, img: &GrayImage) -> CliResult<()> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => write_png(path, img),
        Some("pgm") => write_pgm(path, img),
        other => Err(CliError::Data(format!(
            "unsupported image extension {other:?} for {}",
            path.display()
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use sonoqa_core::rng::Rng;

    fn random_image(seed: u64) -> GrayImage {
        let mut rng = Rng::new(seed);
        GrayImage::new(24, 16, (0..384).map(|_| rng.next_f64()).collect()).unwrap()
    }

    #[test]
    fn png_roundtrip_preserves_quantized_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let img = random_image(1);
        write_png(&path, &img).unwrap();
        let back = read_png(&path).unwrap();
        assert_eq!(back.width(), 24);
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
        // a second read is bit-identical
        assert_eq!(read_png(&path).unwrap(), back);
    }

    #[test]
    fn pgm_roundtrip_matches_png() {
        let dir = tempfile::tempdir().unwrap();
        let img = random_image(2);
        let png_path = dir.path().join("img.png");
        let pgm_path = dir.path().join("img.pgm");
        write_png(&png_path, &img).unwrap();
        write_pgm(&pgm_path, &img).unwrap();
        assert_eq!(read_png(&png_path).unwrap(), read_pgm(&pgm_path).unwrap());
    }

    #[test]
    fn corrupt_files_are_data_errors() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("broken.png");
        std::fs::write(&path, b"not a png at all").unwrap();
        assert!(matches!(read_png(&path), Err(CliError::Data(_))));
        let path2 = dir.path().join("broken.pgm");
        std::fs::write(&path2, b"P5\n3").unwrap();
        assert!(matches!(read_pgm(&path2), Err(CliError::Data(_))));
    }
}
