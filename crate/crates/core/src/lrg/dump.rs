use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGES_FILE: &str = "images.f32";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PREVIEW_FILE: &str = "preview.ppm";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DumpManifest {
    pub count: usize,
    /// Per-image `[C, H, W]`.
    pub shape: Vec<usize>,
    pub dtype: String,
    pub images: String,
    pub labels: Vec<usize>,
}

/// Writes `manifest.json`, the raw little-endian f32 images and a preview grid.
pub fn write_dump(dir: &Path, images: &Tensor<f32>, labels: &[usize]) -> Result<DumpManifest> {
    let s = images.shape();
    if s.len() != 4 || s[0] != labels.len() {
        return Err(Error::Shape(format!(
            "dump needs N×C×H×W with N labels, got {s:?}"
        )));
    }
    fs::create_dir_all(dir)?;
    let bytes: Vec<u8> = images.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    fs::write(dir.join(IMAGES_FILE), bytes)?;
    let manifest = DumpManifest {
        count: s[0],
        shape: s[1..].to_vec(),
        dtype: "f32le".into(),
        images: IMAGES_FILE.into(),
        labels: labels.to_vec(),
    };
    fs::write(
        dir.join(MANIFEST_FILE),
        serde_json::to_vec_pretty(&manifest)?,
    )?;
    let cols = (s[0] as f64).sqrt().ceil() as usize;
    write_ppm_grid(&dir.join(PREVIEW_FILE), images, cols.max(1))?;
    Ok(manifest)
}

pub fn load_dump(dir: &Path) -> Result<(Tensor<f32>, Vec<usize>)> {
    let manifest: DumpManifest = serde_json::from_slice(&fs::read(dir.join(MANIFEST_FILE))?)
        .map_err(|e| Error::Format(format!("dump manifest: {e}")))?;
    if manifest.dtype != "f32le" {
        return Err(Error::Format(format!(
            "unsupported dump dtype {}",
            manifest.dtype
        )));
    }
    if manifest.labels.len() != manifest.count {
        return Err(Error::Format(
            "label count does not match image count".into(),
        ));
    }
    let bytes = fs::read(dir.join(&manifest.images))?;
    let per: usize = manifest.shape.iter().product();
    let need = manifest.count * per * 4;
    if bytes.len() < need {
        return Err(Error::Format(format!(
            "image payload truncated at byte offset {} (expected {need})",
            bytes.len()
        )));
    }
    let data = bytes[..need]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
        .collect();
    let mut shape = vec![manifest.count];
    shape.extend(&manifest.shape);
    Ok((Tensor::new(&shape, data)?, manifest.labels))
}

/// Binary PPM (P6) grid of images in `[−1, 1]`, one pixel of black between
/// tiles. Single-channel images are shown as grey.
pub fn write_ppm_grid(path: &Path, images: &Tensor<f32>, cols: usize) -> Result<()> {
    let s = images.shape();
    if s.len() != 4 || !(s[1] == 1 || s[1] == 3) {
        return Err(Error::Shape(format!(
            "preview needs N×{{1,3}}×H×W, got {s:?}"
        )));
    }
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let cols = cols.clamp(1, n);
    let rows = n.div_ceil(cols);
    let (gw, gh) = (cols * (w + 1) + 1, rows * (h + 1) + 1);
    let mut px = vec![0u8; gw * gh * 3];
    let d = images.data();
    for i in 0..n {
        let (ty, tx) = (i / cols, i % cols);
        for y in 0..h {
            for x in 0..w {
                let (gy, gx) = (ty * (h + 1) + 1 + y, tx * (w + 1) + 1 + x);
                for ch in 0..3 {
                    let src = if c == 1 { 0 } else { ch };
                    let v = d[((i * c + src) * h + y) * w + x];
                    px[(gy * gw + gx) * 3 + ch] =
                        (((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round()) as u8;
                }
            }
        }
    }
    let mut out = format!("P6\n{gw} {gh}\n255\n").into_bytes();
    out.extend(px);
    fs::write(path, out)?;
    Ok(())
}
