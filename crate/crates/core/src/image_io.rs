//! PNG files <-> `[3, H, W]` tensors in `[-1, 1]`.

use std::path::Path;

use image::{ImageBuffer, Luma, Rgb};
use sigan_autodiff::Tensor;

use crate::error::{Error, Result};

/// Decodes any supported image to a 3-channel tensor in `[-1, 1]`.
pub fn load_rgb(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| match source {
            image::ImageError::IoError(e) => Error::io(path, e),
            source => Error::Image {
                path: path.to_path_buf(),
                source,
            },
        })?
        .to_rgb8();
    Ok(from_rgb8(&img))
}

pub fn from_rgb8(img: &ImageBuffer<Rgb<u8>, Vec<u8>>) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[(c * h + y as usize) * w + x as usize] = px.0[c] as f32 / 127.5 - 1.0;
        }
    }
    Tensor::new(&[3, h, w], data)
}

fn to_u8(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn to_rgb8(t: &Tensor) -> ImageBuffer<Rgb<u8>, Vec<u8>> {
    let (c, h, w) = t.chw();
    assert_eq!(c, 3, "expected a 3-channel image");
    let d = t.data();
    ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        Rgb([to_u8(d[i]), to_u8(d[h * w + i]), to_u8(d[2 * h * w + i])])
    })
}

pub fn save_rgb(t: &Tensor, path: &Path) -> Result<()> {
    to_rgb8(t).save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Writes a single-channel map, min-max normalized to the full 8-bit range.
pub fn save_heatmap(map: &Tensor, path: &Path) -> Result<()> {
    let (c, h, w) = map.chw();
    assert_eq!(c, 1);
    let (lo, hi) = (map.min(), map.max());
    let span = if hi > lo { hi - lo } else { 1.0 };
    let d = map.data();
    let img: ImageBuffer<Luma<u8>, Vec<u8>> = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let v = (d[y as usize * w + x as usize] - lo) / span;
        Luma([(v * 255.0).round() as u8])
    });
    img.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Loads a mask as `[1, H, W]` gray levels in `[0, 1]`.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.pixels().map(|p| p.0[0] as f32 / 255.0).collect();
    Ok(Tensor::new(&[1, h, w], data))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_the_8bit_grid() {
        let t = Tensor::from_fn(&[3, 4, 5], |i| (i % 256) as f32 / 127.5 - 1.0);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.png");
        save_rgb(&t, &p).unwrap();
        let back = load_rgb(&p).unwrap();
        assert!(back.max_abs_diff(&t) < 1e-6);
    }

    #[test]
    fn missing_file_is_an_io_error() {
        let err = load_rgb(Path::new("/nonexistent/none.png")).unwrap_err();
        assert!(matches!(err, Error::Io { .. }), "{err}");
    }
}
