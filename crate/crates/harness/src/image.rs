//! Binary PGM/PPM emission with min-max normalization.

use std::fs;
use std::path::Path;

use usm_core::tensor::Tensor;

use crate::error::{HarnessError, Result};

fn normalize_to_bytes(data: &[f64]) -> Vec<u8> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in data {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        // degenerate range maps to mid-gray
        return vec![128u8; data.len()];
    }
    data.iter()
        .map(|&v| (((v - lo) / (hi - lo)) * 255.0).round() as u8)
        .collect()
}

/// Encode a [c, h, w] tensor: P5 (grayscale) for c = 1, P6 (color) for c = 3;
/// c = 4 drops the fourth channel with a warning. Values are min-max
/// normalized over the whole tensor.
pub fn encode_image(z: &Tensor) -> Result<Vec<u8>> {
    let (c, h, w) = match z.shape() {
        [c, h, w] => (*c, *h, *w),
        s => {
            return Err(HarnessError::malformed(
                "image",
                format!("expected [c, h, w], got {s:?}"),
            ))
        }
    };
    let c_eff = match c {
        1 => 1,
        3 => 3,
        4 => {
            log::warn!("emit_image: dropping the fourth channel of a 4-channel tensor");
            3
        }
        other => {
            return Err(HarnessError::malformed(
                "image",
                format!("unsupported channel count {other} (need 1, 3 or 4)"),
            ))
        }
    };
    let bytes = normalize_to_bytes(&z.data()[..c * h * w]);
    let mut out = Vec::new();
    if c_eff == 1 {
        out.extend_from_slice(format!("P5\n{w} {h}\n255\n").as_bytes());
        out.extend_from_slice(&bytes[..h * w]);
    } else {
        out.extend_from_slice(format!("P6\n{w} {h}\n255\n").as_bytes());
        // channel-planar to interleaved RGB
        for y in 0..h {
            for x in 0..w {
                for ch in 0..3 {
                    out.push(bytes[ch * h * w + y * w + x]);
                }
            }
        }
    }
    Ok(out)
}

pub fn emit_image(z: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_image(z)?;
    fs::write(path, bytes).map_err(HarnessError::io(path))?;
    Ok(())
}

/// Tile k samples of an [n, c, h, w] tensor into a near-square montage.
/// Each tile is normalized independently.
pub fn encode_montage(samples: &Tensor) -> Result<Vec<u8>> {
    let (n, c, h, w) = match samples.shape() {
        [n, c, h, w] => (*n, *c, *h, *w),
        s => {
            return Err(HarnessError::malformed(
                "montage",
                format!("expected [n, c, h, w], got {s:?}"),
            ))
        }
    };
    if n == 0 {
        return Err(HarnessError::malformed("montage", "no samples"));
    }
    let cols = (n as f64).sqrt().ceil() as usize;
    let rows = n.div_ceil(cols);
    let c_eff = match c {
        1 => 1usize,
        3 | 4 => 3usize,
        other => {
            return Err(HarnessError::malformed(
                "montage",
                format!("unsupported channel count {other}"),
            ))
        }
    };
    if c == 4 {
        log::warn!("montage: dropping the fourth channel");
    }
    let (gh, gw) = (rows * h, cols * w);
    let mut canvas = vec![0u8; gh * gw * c_eff];
    let per = c * h * w;
    for i in 0..n {
        let tile = normalize_to_bytes(&samples.data()[i * per..(i + 1) * per]);
        let (ty, tx) = (i / cols, i % cols);
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c_eff {
                    let src = ch * h * w + y * w + x;
                    let dst = ((ty * h + y) * gw + tx * w + x) * c_eff + ch;
                    canvas[dst] = tile[src];
                }
            }
        }
    }
    let mut out = Vec::new();
    let tag = if c_eff == 1 { "P5" } else { "P6" };
    out.extend_from_slice(format!("{tag}\n{gw} {gh}\n255\n").as_bytes());
    out.extend_from_slice(&canvas);
    Ok(out)
}

pub fn emit_montage(samples: &Tensor, path: &Path) -> Result<()> {
    let bytes = encode_montage(samples)?;
    fs::write(path, bytes).map_err(HarnessError::io(path))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_input_maps_to_mid_gray() {
        let z = Tensor::full(&[1, 2, 2], 3.7);
        let bytes = encode_image(&z).unwrap();
        let header_end = bytes.len() - 4;
        assert_eq!(&bytes[header_end..], &[128u8; 4]);
    }

    #[test]
    fn hand_scaled_two_by_two() {
        let z = Tensor::new(vec![1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let bytes = encode_image(&z).unwrap();
        let px = &bytes[bytes.len() - 4..];
        assert_eq!(px, &[0, 85, 170, 255]);
    }

    #[test]
    fn montage_of_four_8x8_tiles_is_16x16() {
        let samples = Tensor::zeros(&[4, 1, 8, 8]);
        let bytes = encode_montage(&samples).unwrap();
        let header = String::from_utf8_lossy(&bytes[..15]);
        assert!(header.starts_with("P5\n16 16\n255"), "header: {header}");
        assert_eq!(bytes.len(), "P5\n16 16\n255\n".len() + 256);
    }

    #[test]
    fn unsupported_channel_count_is_rejected() {
        let z = Tensor::zeros(&[2, 4, 4]);
        assert!(encode_image(&z).is_err());
    }
}
