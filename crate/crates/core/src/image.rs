//! Image container and PNG I/O.
//!
//! All pixel data lives in `[-1, 1]` as `(C, H, W)` f32; files on disk are
//! 8-bit PNG in `[0, 255]`. Conversions are the only place the two ranges
//! meet.

use ndarray::{Array3, Axis};
use std::path::Path;

use crate::error::{Error, Result};

/// H×W×C raster in `[-1, 1]`, stored channel-major `(C, H, W)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    pub data: Array3<f32>,
}

impl Image {
    pub fn new(data: Array3<f32>) -> Self {
        Image { data }
    }

    /// Constant-valued image.
    pub fn constant(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Image {
            data: Array3::from_elem((channels, height, width), value),
        }
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self::constant(channels, height, width, 0.0)
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn same_shape(&self, other: &Image) -> bool {
        self.data.shape() == other.data.shape()
    }

    /// Mean absolute difference against another image of the same shape.
    pub fn mean_abs_diff(&self, other: &Image) -> f32 {
        assert_eq!(self.data.shape(), other.data.shape());
        let n = self.data.len() as f32;
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f32>()
            / n
    }

    /// Clamp into the legal range (generation can overshoot before tanh).
    pub fn clamped(&self) -> Image {
        Image {
            data: self.data.mapv(|v| v.clamp(-1.0, 1.0)),
        }
    }

    pub fn load_png(path: &Path) -> Result<Image> {
        let img = image::open(path)?.into_rgb8();
        let (w, h) = img.dimensions();
        let mut data = Array3::zeros((3, h as usize, w as usize));
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[c, y as usize, x as usize]] = px.0[c] as f32 / 127.5 - 1.0;
            }
        }
        Ok(Image { data })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (c, h, w) = (self.channels(), self.height(), self.width());
        if c != 1 && c != 3 {
            return Err(Error::contract(format!(
                "only 1- or 3-channel images can be written, got {c}"
            )));
        }
        let mut buf = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = |ch: usize| {
                    let v = self.data[[ch.min(c - 1), y, x]];
                    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
                };
                buf.put_pixel(x as u32, y as u32, image::Rgb([px(0), px(1), px(2)]));
            }
        }
        buf.save(path)?;
        Ok(())
    }
}

/// Binary H×W field. 1.0 marks the masked (hidden) region.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    pub data: ndarray::Array2<f32>,
}

impl Mask {
    pub fn zeros(height: usize, width: usize) -> Self {
        Mask {
            data: ndarray::Array2::zeros((height, width)),
        }
    }

    pub fn full(height: usize, width: usize) -> Self {
        Mask {
            data: ndarray::Array2::from_elem((height, width), 1.0),
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn count_ones(&self) -> usize {
        self.data.iter().filter(|&&v| v > 0.5).count()
    }

    /// Tight bounding rectangle of the set pixels, as (y0, x0, y1, x1) inclusive.
    /// None when the mask is empty.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let (h, w) = (self.height(), self.width());
        let (mut y0, mut x0, mut y1, mut x1) = (h, w, 0usize, 0usize);
        let mut any = false;
        for y in 0..h {
            for x in 0..w {
                if self.data[[y, x]] > 0.5 {
                    any = true;
                    y0 = y0.min(y);
                    x0 = x0.min(x);
                    y1 = y1.max(y);
                    x1 = x1.max(x);
                }
            }
        }
        any.then_some((y0, x0, y1, x1))
    }

    pub fn load_png(path: &Path) -> Result<Mask> {
        let img = image::open(path)?.into_luma8();
        let (w, h) = img.dimensions();
        let mut data = ndarray::Array2::zeros((h as usize, w as usize));
        for (x, y, px) in img.enumerate_pixels() {
            data[[y as usize, x as usize]] = if px.0[0] > 127 { 1.0 } else { 0.0 };
        }
        Ok(Mask { data })
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let (h, w) = (self.height(), self.width());
        let mut buf = image::GrayImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let v = if self.data[[y, x]] > 0.5 { 255u8 } else { 0u8 };
                buf.put_pixel(x as u32, y as u32, image::Luma([v]));
            }
        }
        buf.save(path)?;
        Ok(())
    }
}

/// Separable gaussian blur with reflected borders. Used by the metric tests
/// and nowhere in the training path.
pub fn gaussian_blur(img: &Image, sigma: f32) -> Image {
    assert!(sigma > 0.0);
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f32> = (-radius..=radius)
        .map(|i| (-0.5 * (i as f32 / sigma).powi(2)).exp())
        .collect();
    let norm: f32 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| k / norm).collect();

    let (c, h, w) = (img.channels(), img.height(), img.width());
    let reflect = |i: isize, n: isize| -> usize {
        let mut i = i;
        while i < 0 || i >= n {
            if i < 0 {
                i = -i - 1;
            }
            if i >= n {
                i = 2 * n - 1 - i;
            }
        }
        i as usize
    };

    let mut tmp = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sx = reflect(x as isize + ki as isize - radius, w as isize);
                    acc += k * img.data[[ch, y, sx]];
                }
                tmp[[ch, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::<f32>::zeros((c, h, w));
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (ki, k) in kernel.iter().enumerate() {
                    let sy = reflect(y as isize + ki as isize - radius, h as isize);
                    acc += k * tmp[[ch, sy, x]];
                }
                out[[ch, y, x]] = acc;
            }
        }
    }
    Image { data: out }
}

/// Checkerboard test card, `cell` pixels per square.
pub fn checkerboard(height: usize, width: usize, cell: usize) -> Image {
    let mut img = Image::zeros(3, height, width);
    for y in 0..height {
        for x in 0..width {
            let on = ((y / cell) + (x / cell)) % 2 == 0;
            let v = if on { 1.0 } else { -1.0 };
            img.data[[0, y, x]] = v;
            img.data[[1, y, x]] = if on { 0.2 } else { -0.2 };
            img.data[[2, y, x]] = -v;
        }
    }
    img
}

/// Tile rows of (reference, cloth, output) into one grid image.
pub fn tile_grid(rows: &[(Image, Image, Image)]) -> Result<Image> {
    if rows.is_empty() {
        return Err(Error::contract("cannot tile an empty image list"));
    }
    let (h, w) = (rows[0].0.height(), rows[0].0.width());
    for (a, b, c) in rows {
        for img in [a, b, c] {
            if img.height() != h || img.width() != w || img.channels() != 3 {
                return Err(Error::contract("mixed resolutions in image grid"));
            }
        }
    }
    let mut out = Image::constant(3, h * rows.len(), w * 3, 1.0);
    for (r, (a, b, c)) in rows.iter().enumerate() {
        for (col, img) in [a, b, c].into_iter().enumerate() {
            let mut view = out.data.slice_mut(ndarray::s![
                ..,
                r * h..(r + 1) * h,
                col * w..(col + 1) * w
            ]);
            view.assign(&img.data);
        }
    }
    Ok(out)
}

/// Stack per-channel planes into the leading axis of a 4D batch entry.
pub fn to_batch(images: &[&Image]) -> ndarray::Array4<f32> {
    assert!(!images.is_empty());
    let (c, h, w) = (images[0].channels(), images[0].height(), images[0].width());
    let mut out = ndarray::Array4::zeros((images.len(), c, h, w));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&img.data);
    }
    out
}
