//! Binary PGM / PPM export.

use std::io::Write;
use std::path::Path;

use crate::error::{FlowError, Result};
use crate::tensor::Tensor;

fn quantize(v: f64) -> u8 {
    let v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
    (v * 255.0 + 0.5).floor() as u8
}

/// Encode `[H, W]` as `P5` or `[3, H, W]` as `P6`.
pub fn encode_image(x: &Tensor) -> Result<Vec<u8>> {
    let (magic, h, w, channels) = match *x.shape() {
        [h, w] => ("P5", h, w, 1),
        [3, h, w] => ("P6", h, w, 3),
        _ => return Err(FlowError::shape(format!("cannot export tensor of shape {:?} as an image", x.shape()))),
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = x.data();
    for p in 0..plane {
        for c in 0..channels {
            out.push(quantize(d[c * plane + p]));
        }
    }
    Ok(out)
}

pub fn export_image(x: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_image(x)?;
    let mut f = std::fs::File::create(path).map_err(|e| FlowError::io(path, e))?;
    f.write_all(&bytes).map_err(|e| FlowError::io(path, e))
}
