//! Real-valued rasters in `[-1, 1]`, stored height-major with interleaved channels.

use std::path::Path;

use candle_core::{Device, Tensor};

use crate::error::{invalid, Error, Result};

/// An `H x W x C` raster. Values are nominally in `[-1, 1]`; they are only clamped
/// when written to disk or handed back to a user.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid!("image dimensions must be positive, got {height}x{width}"));
        }
        if channels != 1 && channels != 3 {
            return Err(invalid!("image must have 1 or 3 channels, got {channels}"));
        }
        if data.len() != height * width * channels {
            return Err(invalid!(
                "image buffer has {} values, expected {}",
                data.len(),
                height * width * channels
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid!("image contains non-finite values"));
        }
        Ok(Self { height, width, channels, data })
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(height, width, channels, vec![value; height * width * channels])
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(height * width * channels);
        for h in 0..height {
            for w in 0..width {
                for c in 0..channels {
                    data.push(f(h, w, c));
                }
            }
        }
        Self::new(height, width, channels, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.height, self.width, self.channels)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, h: usize, w: usize, c: usize) -> f64 {
        self.data[(h * self.width + w) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, h: usize, w: usize, c: usize, v: f64) {
        self.data[(h * self.width + w) * self.channels + c] = v;
    }

    pub fn same_shape(&self, other: &ImageTensor) -> bool {
        self.shape() == other.shape()
    }

    pub(crate) fn check_same_shape(&self, other: &ImageTensor, what: &str) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(invalid!(
                "{what}: shape mismatch {:?} vs {:?}",
                self.shape(),
                other.shape()
            ))
        }
    }

    pub fn clamped(&self) -> ImageTensor {
        ImageTensor {
            data: self.data.iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
            ..self.clone()
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<ImageTensor> {
        ImageTensor::new(
            self.height,
            self.width,
            self.channels,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    /// Luma (mean over channels) plane.
    pub fn gray(&self) -> Vec<f64> {
        self.data
            .chunks(self.channels)
            .map(|px| px.iter().sum::<f64>() / self.channels as f64)
            .collect()
    }

    /// Channel-major copy (`C x H x W`), the layout used by the tensor backend.
    pub fn to_planar(&self) -> Vec<f64> {
        let hw = self.height * self.width;
        let mut out = vec![0.0; hw * self.channels];
        for (p, px) in self.data.chunks(self.channels).enumerate() {
            for (c, &v) in px.iter().enumerate() {
                out[c * hw + p] = v;
            }
        }
        out
    }

    pub fn from_planar(height: usize, width: usize, channels: usize, planar: &[f64]) -> Result<Self> {
        let hw = height * width;
        if planar.len() != hw * channels {
            return Err(invalid!("planar buffer has wrong length"));
        }
        let mut data = vec![0.0; hw * channels];
        for c in 0..channels {
            for p in 0..hw {
                data[p * channels + c] = planar[c * hw + p];
            }
        }
        Self::new(height, width, channels, data)
    }

    /// Stacks images into a `B x C x H x W` f32 tensor.
    pub fn batch_to_tensor(images: &[&ImageTensor], device: &Device) -> Result<Tensor> {
        let first = images
            .first()
            .ok_or_else(|| invalid!("cannot batch zero images"))?;
        let (h, w, c) = first.shape();
        let mut buf = Vec::with_capacity(images.len() * h * w * c);
        for img in images {
            first.check_same_shape(img, "batch")?;
            buf.extend(img.to_planar().into_iter().map(|v| v as f32));
        }
        Ok(Tensor::from_vec(buf, (images.len(), c, h, w), device)?)
    }

    /// Splits a `B x C x H x W` tensor back into images.
    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<ImageTensor>> {
        let (b, c, h, w) = t.dims4()?;
        let flat: Vec<f32> = t.flatten_all()?.to_dtype(candle_core::DType::F32)?.to_vec1()?;
        let per = c * h * w;
        (0..b)
            .map(|i| {
                let planar: Vec<f64> = flat[i * per..(i + 1) * per].iter().map(|&v| v as f64).collect();
                ImageTensor::from_planar(h, w, c, &planar)
            })
            .collect()
    }

    /// Reads an 8-bit image file, resizes it to `size x size` when needed and maps it to `[-1, 1]`.
    pub fn load_png(path: &Path, size: Option<(usize, usize)>, channels: usize) -> Result<Self> {
        let img = image::open(path).map_err(|source| Error::Image { path: path.into(), source })?;
        let img = match size {
            Some((h, w)) if img.height() as usize != h || img.width() as usize != w => img.resize_exact(
                w as u32,
                h as u32,
                image::imageops::FilterType::Triangle,
            ),
            _ => img,
        };
        let (w, h) = (img.width() as usize, img.height() as usize);
        let bytes: Vec<u8> = match channels {
            1 => img.to_luma8().into_raw(),
            3 => img.to_rgb8().into_raw(),
            other => return Err(invalid!("unsupported channel count {other}")),
        };
        Self::new(h, w, channels, bytes.iter().map(|&b| b as f64 / 127.5 - 1.0).collect())
    }

    /// Writes the image as an 8-bit PNG after clamping to `[-1, 1]`.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let bytes = self.to_u8();
        let (w, h) = (self.width as u32, self.height as u32);
        let res = if self.channels == 3 {
            image::RgbImage::from_raw(w, h, bytes)
                .expect("buffer sized from image dims")
                .save(path)
        } else {
            image::GrayImage::from_raw(w, h, bytes)
                .expect("buffer sized from image dims")
                .save(path)
        };
        res.map_err(|source| Error::Image { path: path.into(), source })
    }

    pub fn to_u8(&self) -> Vec<u8> {
        self.data
            .iter()
            .map(|v| ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(ImageTensor::new(0, 2, 1, vec![]).is_err());
        assert!(ImageTensor::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(ImageTensor::new(2, 2, 1, vec![0.0; 3]).is_err());
        assert!(ImageTensor::new(1, 1, 1, vec![f64::NAN]).is_err());
    }

    #[test]
    fn planar_round_trip() {
        let img = ImageTensor::from_fn(3, 4, 3, |h, w, c| (h * 100 + w * 10 + c) as f64 / 1000.0).unwrap();
        let planar = img.to_planar();
        assert_eq!(planar[12], img.get(0, 0, 1));
        assert_eq!(ImageTensor::from_planar(3, 4, 3, &planar).unwrap(), img);
    }

    #[test]
    fn tensor_round_trip() {
        let a = ImageTensor::from_fn(4, 4, 3, |h, w, c| (h as f64 - w as f64) * 0.1 + c as f64 * 0.05).unwrap();
        let b = a.map(|v| -v).unwrap();
        let t = ImageTensor::batch_to_tensor(&[&a, &b], &Device::Cpu).unwrap();
        assert_eq!(t.dims(), &[2, 3, 4, 4]);
        let back = ImageTensor::batch_from_tensor(&t).unwrap();
        for (x, y) in back[1].data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn u8_quantization_bound() {
        let img = ImageTensor::from_fn(5, 5, 1, |h, w, _| -1.0 + (h * 5 + w) as f64 * 0.0833).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.png");
        img.save_png(&p).unwrap();
        let back = ImageTensor::load_png(&p, None, 1).unwrap();
        for (x, y) in back.data().iter().zip(img.data()) {
            assert!((x - y).abs() <= 1.0 / 127.5);
        }
    }
}
