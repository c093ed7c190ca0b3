//! Binary PPM (P6) and PGM (P5) decoding, bilinear resizing, and pixel
//! normalization.
//!
//! Images come back as 3 x R x R tensors in [-0.5, 0.5]: values scale to
//! [0, 1] then subtract the documented channel mean of 0.5. Grayscale input
//! promotes to three equal channels.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Channel mean subtracted after scaling pixels to [0, 1].
pub const PIXEL_MEAN: f32 = 0.5;

struct RawImage {
    width: usize,
    height: usize,
    /// interleaved rgb, one f32 per channel in [0, 1]
    pixels: Vec<f32>,
}

fn decode_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Decode {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Pull the next whitespace-delimited token, skipping `#` comments.
fn next_token(bytes: &[u8], pos: &mut usize) -> Option<Vec<u8>> {
    while *pos < bytes.len() {
        let b = bytes[*pos];
        if b == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
        } else if b.is_ascii_whitespace() {
            *pos += 1;
        } else {
            break;
        }
    }
    if *pos >= bytes.len() {
        return None;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    Some(bytes[start..*pos].to_vec())
}

fn parse_dim(token: Option<Vec<u8>>, what: &str, path: &Path) -> Result<usize> {
    let t = token.ok_or_else(|| decode_err(path, format!("missing {what}")))?;
    std::str::from_utf8(&t)
        .ok()
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| decode_err(path, format!("unreadable {what}")))
}

fn decode(bytes: &[u8], path: &Path) -> Result<RawImage> {
    if bytes.len() < 2 {
        return Err(decode_err(path, "file shorter than a magic number"));
    }
    let magic = &bytes[..2];
    let channels = match magic {
        b"P6" => 3usize,
        b"P5" => 1usize,
        _ => {
            return Err(Error::Format(format!(
                "{}: not a binary PPM/PGM (magic {:?})",
                path.display(),
                String::from_utf8_lossy(magic)
            )));
        }
    };
    let mut pos = 2;
    let width = parse_dim(next_token(bytes, &mut pos), "width", path)?;
    let height = parse_dim(next_token(bytes, &mut pos), "height", path)?;
    let maxval = parse_dim(next_token(bytes, &mut pos), "maxval", path)?;
    if width == 0 || height == 0 {
        return Err(decode_err(path, "zero image dimension"));
    }
    if maxval == 0 || maxval > 255 {
        return Err(decode_err(path, format!("unsupported maxval {maxval}")));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(decode_err(path, "missing raster separator"));
    }
    pos += 1;
    let need = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() < need {
        return Err(decode_err(
            path,
            format!("truncated raster: {} of {need} bytes", raster.len()),
        ));
    }
    let max = maxval as f32;
    let mut pixels = vec![0.0f32; width * height * 3];
    for i in 0..width * height {
        if channels == 3 {
            for c in 0..3 {
                pixels[i * 3 + c] = raster[i * 3 + c].min(maxval as u8) as f32 / max;
            }
        } else {
            let v = raster[i].min(maxval as u8) as f32 / max;
            pixels[i * 3] = v;
            pixels[i * 3 + 1] = v;
            pixels[i * 3 + 2] = v;
        }
    }
    Ok(RawImage {
        width,
        height,
        pixels,
    })
}

/// Plain bilinear resample (no aspect preservation), the
/// half-pixel-center convention: src = (dst + 0.5) * scale - 0.5, clamped.
fn bilinear_resize(img: &RawImage, target: usize) -> Vec<f32> {
    let (w, h) = (img.width, img.height);
    let sx = w as f64 / target as f64;
    let sy = h as f64 / target as f64;
    let mut out = vec![0.0f32; target * target * 3];
    for dy in 0..target {
        let fy = ((dy as f64 + 0.5) * sy - 0.5).clamp(0.0, (h - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = (fy - y0 as f64) as f32;
        for dx in 0..target {
            let fx = ((dx as f64 + 0.5) * sx - 0.5).clamp(0.0, (w - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = (fx - x0 as f64) as f32;
            for c in 0..3 {
                let p = |y: usize, x: usize| img.pixels[(y * w + x) * 3 + c];
                let top = p(y0, x0) * (1.0 - wx) + p(y0, x1) * wx;
                let bottom = p(y1, x0) * (1.0 - wx) + p(y1, x1) * wx;
                out[(dy * target + dx) * 3 + c] = top * (1.0 - wy) + bottom * wy;
            }
        }
    }
    out
}

/// Interleaved [0,1] rgb to a normalized CHW tensor.
fn to_tensor(rgb: &[f32], resolution: usize) -> Result<Tensor> {
    let hw = resolution * resolution;
    let mut values = vec![0.0f32; 3 * hw];
    for i in 0..hw {
        for c in 0..3 {
            values[c * hw + i] = rgb[i * 3 + c] - PIXEL_MEAN;
        }
    }
    Tensor::new(&[3, resolution, resolution], values)
}

/// Decode a PPM/PGM file, resize to `target_resolution`, normalize.
pub fn load_image(path: &Path, target_resolution: usize) -> Result<Tensor> {
    if target_resolution == 0 {
        return Err(Error::Input("target resolution must be positive".into()));
    }
    let bytes = std::fs::read(path).map_err(|e| decode_err(path, e.to_string()))?;
    let img = decode(&bytes, path)?;
    let resized = bilinear_resize(&img, target_resolution);
    to_tensor(&resized, target_resolution)
}

/// Write an 8-bit binary PPM from interleaved rgb bytes.
pub fn write_ppm(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    if rgb.len() != width * height * 3 {
        return Err(Error::Input(format!(
            "rgb buffer {} does not match {width}x{height}x3",
            rgb.len()
        )));
    }
    let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
    bytes.extend_from_slice(rgb);
    std::fs::write(path, bytes)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Write;

    fn temp_ppm(name: &str, contents: &[u8]) -> std::path::PathBuf {
        let path = std::env::temp_dir().join(format!("memefuse-ppm-{name}-{}", std::process::id()));
        let mut f = std::fs::File::create(&path).unwrap();
        f.write_all(contents).unwrap();
        path
    }

    fn p6(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
        let mut bytes = format!("P6\n{width} {height}\n255\n").into_bytes();
        bytes.extend_from_slice(rgb);
        bytes
    }

    #[test]
    fn solid_color_resizes_exactly() {
        let rgb: Vec<u8> = (0..10 * 10).flat_map(|_| [200u8, 100, 50]).collect();
        let path = temp_ppm("solid", &p6(10, 10, &rgb));
        let t = load_image(&path, 4).unwrap();
        std::fs::remove_file(&path).unwrap();
        let hw = 16;
        for i in 0..hw {
            assert_eq!(t.values()[i], 200.0 / 255.0 - 0.5);
            assert_eq!(t.values()[hw + i], 100.0 / 255.0 - 0.5);
            assert_eq!(t.values()[2 * hw + i], 50.0 / 255.0 - 0.5);
        }
    }

    #[test]
    fn checkerboard_2x2_to_4x4_matches_closed_form() {
        // gray channel checkerboard [[1,0],[0,1]] upsampled to 4x4 with the
        // half-pixel convention; expected weights per axis:
        // fy/fx = 0, toward index 0; .25; .75; then clamped onto index 1
        let rgb = [255u8, 255, 255, 0, 0, 0, 0, 0, 0, 255, 255, 255];
        let path = temp_ppm("checker", &p6(2, 2, &rgb));
        let t = load_image(&path, 4).unwrap();
        std::fs::remove_file(&path).unwrap();
        // oracle computed independently at f64 from the convention
        let axis = [(0usize, 0.0f64), (0, 0.25), (0, 0.75), (1, 0.0)];
        let src = [[1.0f64, 0.0], [0.0, 1.0]];
        let mut expect = [0.0f64; 16];
        for (dy, &(y0, wy)) in axis.iter().enumerate() {
            for (dx, &(x0, wx)) in axis.iter().enumerate() {
                let y1 = (y0 + 1).min(1);
                let x1 = (x0 + 1).min(1);
                let top = src[y0][x0] * (1.0 - wx) + src[y0][x1] * wx;
                let bottom = src[y1][x0] * (1.0 - wx) + src[y1][x1] * wx;
                expect[dy * 4 + dx] = top * (1.0 - wy) + bottom * wy;
            }
        }
        for (i, want) in expect.iter().enumerate() {
            let got = t.values()[i] + 0.5;
            assert!((got as f64 - want).abs() < 1e-6, "pixel {i}: {got} vs {want}");
        }
    }

    #[test]
    fn grayscale_promotes_to_three_equal_channels() {
        let mut bytes = b"P5\n2 2\n255\n".to_vec();
        bytes.extend_from_slice(&[10u8, 60, 110, 160]);
        let path = temp_ppm("gray", &bytes);
        let t = load_image(&path, 2).unwrap();
        std::fs::remove_file(&path).unwrap();
        let hw = 4;
        for i in 0..hw {
            assert_eq!(t.values()[i], t.values()[hw + i]);
            assert_eq!(t.values()[i], t.values()[2 * hw + i]);
        }
    }

    #[test]
    fn truncated_raster_is_decode_error() {
        let path = temp_ppm("trunc", &p6(4, 4, &[0u8; 10]));
        let err = load_image(&path, 4).unwrap_err();
        std::fs::remove_file(&path).unwrap();
        assert!(matches!(err, Error::Decode { .. }));
        assert!(err.to_string().contains("truncated"));
    }

    #[test]
    fn non_image_is_format_error() {
        let path = temp_ppm("bad", b"GIF89a whatever");
        let err = load_image(&path, 4).unwrap_err();
        std::fs::remove_file(&path).unwrap();
        assert!(matches!(err, Error::Format(_)));
    }

    #[test]
    fn comments_in_header_are_skipped() {
        let mut bytes = b"P6 # a comment\n# another\n2 1\n255\n".to_vec();
        bytes.extend_from_slice(&[1u8, 2, 3, 4, 5, 6]);
        let path = temp_ppm("comment", &bytes);
        let t = load_image(&path, 2).unwrap();
        std::fs::remove_file(&path).unwrap();
        assert_eq!(t.shape(), &[3, 2, 2]);
    }

    #[test]
    fn write_then_load_roundtrips_at_same_resolution() {
        let rgb: Vec<u8> = (0..8 * 8 * 3).map(|i| (i * 7 % 256) as u8).collect();
        let path = std::env::temp_dir().join(format!("memefuse-rt-{}.ppm", std::process::id()));
        write_ppm(&path, 8, 8, &rgb).unwrap();
        let t = load_image(&path, 8).unwrap();
        std::fs::remove_file(&path).unwrap();
        // same-size bilinear is the identity, so values reproduce exactly
        let hw = 64;
        for i in 0..hw {
            for c in 0..3 {
                let expect = rgb[i * 3 + c] as f32 / 255.0 - 0.5;
                assert_eq!(t.values()[c * hw + i], expect);
            }
        }
    }
}
