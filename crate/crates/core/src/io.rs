//! File helpers: atomic writes and PPM (P6) image export/import.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Write `bytes` to `path` via a sibling temp file and a rename, so readers
/// never observe a partially written file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    fs::create_dir_all(dir)?;
    let name = path
        .file_name()
        .ok_or_else(|| Error::Format(format!("not a file path: {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

/// Encode a `3×H×W` image with values in `[0, 1]` as binary PPM.
pub fn encode_ppm(image: &Tensor) -> Result<Vec<u8>> {
    let &[3, h, w] = image.shape() else {
        return Err(Error::shape("encode_ppm", image.shape(), &[3, 0, 0]));
    };
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    let d = image.data();
    for i in 0..plane {
        for c in 0..3 {
            let v = (d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8;
            out.push(v);
        }
    }
    Ok(out)
}

pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    atomic_write(path, &encode_ppm(image)?)
}

/// Decode a binary PPM into a `3×H×W` tensor in `[0, 1]`.
pub fn decode_ppm(bytes: &[u8]) -> Result<Tensor> {
    let mut fields = Vec::with_capacity(4);
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if pos < bytes.len() && bytes[pos] == b'#' {
            while pos < bytes.len() && bytes[pos] != b'\n' {
                pos += 1;
            }
            continue;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(Error::Format("truncated PPM header".into()));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(Error::Format(format!("unsupported PPM magic {}", fields[0])));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::Format(format!("bad PPM header field {s:?}")))
    };
    let (w, h, maxval) = (parse(&fields[1])?, parse(&fields[2])?, parse(&fields[3])?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::Format(format!("unsupported PPM maxval {maxval}")));
    }
    let plane = w * h;
    let body = bytes
        .get(pos..pos + 3 * plane)
        .ok_or_else(|| Error::Format("truncated PPM body".into()))?;
    let mut data = vec![0.0; 3 * plane];
    for i in 0..plane {
        for c in 0..3 {
            data[c * plane + i] = body[3 * i + c] as f64 / maxval as f64;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

/// Bilinear resize of a `C×H×W` image to `C×out_h×out_w` (pixel-center aligned).
pub fn resize_bilinear(image: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::shape("resize_bilinear", image.shape(), &[3, out_h, out_w]));
    };
    if (h, w) == (out_h, out_w) {
        return Ok(image.clone());
    }
    let src = image.data();
    let sample = |plane: &[f64], y: f64, x: f64| {
        let y = y.clamp(0.0, (h - 1) as f64);
        let x = x.clamp(0.0, (w - 1) as f64);
        let (y0, x0) = (y.floor() as usize, x.floor() as usize);
        let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
        let (fy, fx) = (y - y0 as f64, x - x0 as f64);
        let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
        let bottom = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
        top * (1.0 - fy) + bottom * fy
    };
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for oy in 0..out_h {
            for ox in 0..out_w {
                let y = (oy as f64 + 0.5) * sy - 0.5;
                let x = (ox as f64 + 0.5) * sx - 0.5;
                out.push(sample(plane, y, x));
            }
        }
    }
    Tensor::new(vec![c, out_h, out_w], out)
}
