//! Pixel and latent video arrays plus the numbered-PNG clip storage format.

use std::fs;
use std::path::Path;

use image::{ImageBuffer, Rgb, RgbImage};
use ndarray::{s, Array4, ArrayView3, Axis};

use crate::error::{Error, Result};

/// Pixel-space clip, shape `(T, H, W, 3)`, values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoTensor {
    data: Array4<f64>,
}

impl VideoTensor {
    /// Wraps `data`, clamping into `[-1, 1]`.
    pub fn new(mut data: Array4<f64>) -> Result<Self> {
        let (t, h, w, c) = data.dim();
        if t == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("empty video {:?}", data.dim())));
        }
        if c != 3 {
            return Err(Error::shape(format!("pixel clips need 3 channels, got {c}")));
        }
        data.mapv_inplace(|v| v.clamp(-1.0, 1.0));
        Ok(VideoTensor { data })
    }

    pub fn zeros(frames: usize, height: usize, width: usize) -> Self {
        VideoTensor {
            data: Array4::zeros((frames, height, width, 3)),
        }
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn into_data(self) -> Array4<f64> {
        self.data
    }

    /// `(T, H, W, C)`
    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().1
    }

    pub fn width(&self) -> usize {
        self.data.dim().2
    }

    pub fn frame(&self, t: usize) -> ArrayView3<'_, f64> {
        self.data.index_axis(Axis(0), t)
    }

    /// Frames `[start, end)` as a new clip.
    pub fn slice_frames(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.frames() {
            return Err(Error::shape(format!(
                "frame range {start}..{end} outside 0..{}",
                self.frames()
            )));
        }
        Ok(VideoTensor {
            data: self.data.slice(s![start..end, .., .., ..]).to_owned(),
        })
    }

    /// Mirror image across the vertical axis.
    pub fn flip_horizontal(&self) -> Self {
        VideoTensor {
            data: self.data.slice(s![.., .., ..;-1, ..]).to_owned(),
        }
    }
}

/// Latent clip, shape `(T', H', W', C_lat)`.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentTensor {
    data: Array4<f64>,
}

impl LatentTensor {
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (t, h, w, c) = data.dim();
        if t == 0 || h == 0 || w == 0 || c == 0 {
            return Err(Error::shape(format!("empty latent {:?}", data.dim())));
        }
        Ok(LatentTensor { data })
    }

    pub fn zeros(shape: (usize, usize, usize, usize)) -> Self {
        LatentTensor {
            data: Array4::zeros(shape),
        }
    }

    pub fn from_elem(shape: (usize, usize, usize, usize), v: f64) -> Self {
        LatentTensor {
            data: Array4::from_elem(shape, v),
        }
    }

    pub fn data(&self) -> &Array4<f64> {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut Array4<f64> {
        &mut self.data
    }

    pub fn into_data(self) -> Array4<f64> {
        self.data
    }

    pub fn shape(&self) -> (usize, usize, usize, usize) {
        self.data.dim()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Latent frame 0 as a `(1, H', W', C)` tensor.
    pub fn first_frame(&self) -> LatentTensor {
        LatentTensor {
            data: self.data.slice(s![0..1, .., .., ..]).to_owned(),
        }
    }

    pub fn ensure_same_shape(&self, other: &LatentTensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::shape(format!(
                "latent shapes differ: {:?} vs {:?}",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }
}

fn to_u8(v: f64) -> u8 {
    (((v.clamp(-1.0, 1.0) + 1.0) * 0.5) * 255.0).round() as u8
}

fn from_u8(v: u8) -> f64 {
    v as f64 / 255.0 * 2.0 - 1.0
}

pub fn frame_file_name(index: usize) -> String {
    format!("{index:05}.png")
}

/// Writes every frame as `NNNNN.png` (8-bit RGB) into `dir`.
pub fn write_frames(clip: &VideoTensor, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let (_, h, w, _) = clip.shape();
    for t in 0..clip.frames() {
        let frame = clip.frame(t);
        let img: RgbImage = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
            let (x, y) = (x as usize, y as usize);
            Rgb([
                to_u8(frame[[y, x, 0]]),
                to_u8(frame[[y, x, 1]]),
                to_u8(frame[[y, x, 2]]),
            ])
        });
        let path = dir.join(frame_file_name(t));
        img.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            message: e.to_string(),
        })?;
    }
    Ok(())
}

fn read_png(path: &Path) -> Result<RgbImage> {
    Ok(image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?
        .to_rgb8())
}

/// Reads a single image as a one-frame clip.
pub fn read_image(path: &Path) -> Result<VideoTensor> {
    let img = read_png(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = Array4::zeros((1, h, w, 3));
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            data[[0, y as usize, x as usize, c]] = from_u8(p.0[c]);
        }
    }
    VideoTensor::new(data)
}

/// Reads numbered frames `00000.png, 00001.png, ...` until the first gap.
pub fn read_frames(dir: &Path) -> Result<VideoTensor> {
    let mut frames = Vec::new();
    loop {
        let path = dir.join(frame_file_name(frames.len()));
        if !path.exists() {
            break;
        }
        frames.push(read_png(&path)?);
    }
    let first = frames.first().ok_or_else(|| Error::Image {
        path: dir.to_path_buf(),
        message: "no frames found".into(),
    })?;
    let (w, h) = (first.width() as usize, first.height() as usize);
    let mut data = Array4::zeros((frames.len(), h, w, 3));
    for (t, img) in frames.iter().enumerate() {
        if img.width() as usize != w || img.height() as usize != h {
            return Err(Error::Image {
                path: dir.join(frame_file_name(t)),
                message: "frame size differs from frame 0".into(),
            });
        }
        for (x, y, p) in img.enumerate_pixels() {
            for c in 0..3 {
                data[[t, y as usize, x as usize, c]] = from_u8(p.0[c]);
            }
        }
    }
    VideoTensor::new(data)
}
