use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image with `f64` channels nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize) -> Self {
        Self::filled(width, height, [0.0; 3])
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn from_data(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::shape(format!(
                "image data has {} values, expected {}x{}x3",
                data.len(),
                width,
                height
            )));
        }
        if let Some(v) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("image channel value {v}")));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    /// Builds an image by evaluating `f(x, y)` at every pixel.
    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend_from_slice(&f(x, y));
            }
        }
        Self {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_count(&self) -> usize {
        self.width * self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Pixel by flat row-major index.
    pub fn pixel(&self, index: usize) -> [f64; 3] {
        let i = index * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn same_dims(&self, other: &ImageBuffer) -> bool {
        self.width == other.width && self.height == other.height
    }

    pub fn clamped(&self) -> ImageBuffer {
        ImageBuffer {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| v.clamp(0.0, 1.0)).collect(),
        }
    }
}

/// Binary pixel mask, row-major.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::shape(format!(
                "mask has {} entries, expected {}x{}",
                bits.len(),
                width,
                height
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// Number of set pixels.
    pub fn area(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn matches(&self, image: &ImageBuffer) -> bool {
        self.width == image.width() && self.height == image.height()
    }
}

/// Loads an 8-bit RGB PNG; every byte `v` maps to `v / 255`.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageBuffer> {
    let path = path.as_ref();
    let decoded = open_png(path)?;
    let rgb = match decoded {
        image::DynamicImage::ImageRgb8(rgb) => rgb,
        other => {
            return Err(Error::Image {
                path: path.to_owned(),
                message: format!("unsupported pixel format {:?}, expected 8-bit RGB", other.color()),
            })
        }
    };
    let (w, h) = rgb.dimensions();
    let data = rgb.into_raw().into_iter().map(|b| f64::from(b) / 255.0).collect();
    Ok(ImageBuffer {
        width: w as usize,
        height: h as usize,
        data,
    })
}

/// Quantizes a channel value: `round(clamp(v, 0, 1) * 255)`, halves rounded up.
pub fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8
}

/// Writes an 8-bit RGB PNG.
pub fn save_image(image: &ImageBuffer, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes: Vec<u8> = image.data.iter().map(|v| quantize(*v)).collect();
    let buf = image::RgbImage::from_raw(image.width as u32, image.height as u32, bytes)
        .expect("buffer length checked by construction");
    write_png(path, &image::DynamicImage::ImageRgb8(buf))
}

/// Loads a mask PNG (8-bit gray or RGB); any non-zero pixel is set.
pub fn load_mask(path: impl AsRef<Path>) -> Result<Mask> {
    let path = path.as_ref();
    let decoded = open_png(path)?;
    let (w, h, bits) = match decoded {
        image::DynamicImage::ImageLuma8(g) => {
            let (w, h) = g.dimensions();
            (w, h, g.into_raw().into_iter().map(|b| b != 0).collect())
        }
        image::DynamicImage::ImageRgb8(rgb) => {
            let (w, h) = rgb.dimensions();
            let bits = rgb.into_raw().chunks(3).map(|p| p.iter().any(|b| *b != 0)).collect();
            (w, h, bits)
        }
        other => {
            return Err(Error::Image {
                path: path.to_owned(),
                message: format!("unsupported mask format {:?}", other.color()),
            })
        }
    };
    Mask::new(w as usize, h as usize, bits)
}

/// Writes a mask as an 8-bit grayscale PNG (0 or 255).
pub fn save_mask(mask: &Mask, path: impl AsRef<Path>) -> Result<()> {
    let bytes = mask.bits.iter().map(|b| if *b { 255 } else { 0 }).collect();
    let buf = image::GrayImage::from_raw(mask.width as u32, mask.height as u32, bytes)
        .expect("buffer length checked by construction");
    write_png(path.as_ref(), &image::DynamicImage::ImageLuma8(buf))
}

fn open_png(path: &Path) -> Result<image::DynamicImage> {
    let reader = image::ImageReader::open(path).map_err(|e| Error::io(path, e))?;
    reader.with_guessed_format().map_err(|e| Error::io(path, e))?.decode().map_err(|e| Error::Image {
        path: path.to_owned(),
        message: e.to_string(),
    })
}

fn write_png(path: &Path, image: &image::DynamicImage) -> Result<()> {
    image.save_with_format(path, image::ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_owned(),
            message: other.to_string(),
        },
    })
}
