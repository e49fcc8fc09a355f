//! Slicing a pixel stream into a time series of m×m grayscale images and
//! back, plus the `HNIMG1` image bundle file.
//!
//! Segment `k` holds pixels `[k·m², (k+1)·m²)` in row-major order. The last
//! segment is zero-padded. An empty stream yields an empty series.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::pixel::PixelStream;

pub const IMAGE_MAGIC: &[u8; 6] = b"HNIMG1";

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("image side must be at least 1")]
    ZeroSide,
    #[error("image of side {side} needs {expected} bytes, got {actual}")]
    BadImageSize {
        side: usize,
        expected: usize,
        actual: usize,
    },
    #[error("original length {original} exceeds capacity {capacity} of the series")]
    LengthMismatch { original: usize, capacity: usize },
    #[error("malformed image file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    side: usize,
    data: Vec<u8>,
}

impl GrayImage {
    pub fn new(side: usize, data: Vec<u8>) -> Result<Self, ImageError> {
        if side == 0 {
            return Err(ImageError::ZeroSide);
        }
        if data.len() != side * side {
            return Err(ImageError::BadImageSize {
                side,
                expected: side * side,
                actual: data.len(),
            });
        }
        Ok(GrayImage { side, data })
    }

    pub fn filled(side: usize, value: u8) -> Self {
        GrayImage {
            side,
            data: vec![value; side * side],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Row-major pixel data.
    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> u8 {
        self.data[row * self.side + col]
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().map(|&p| f64::from(p)).sum::<f64>() / self.data.len() as f64
    }
}

/// Three-channel image, interleaved (row, column, channel).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    side: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn side(&self) -> usize {
        self.side
    }

    pub fn as_bytes(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize, channel: usize) -> u8 {
        self.data[(row * self.side + col) * 3 + channel]
    }

    /// One channel as a row-major plane.
    pub fn channel(&self, channel: usize) -> Vec<u8> {
        self.data.iter().skip(channel).step_by(3).copied().collect()
    }
}

/// Replicates the gray plane into three channels.
pub fn to_three_channel(image: &GrayImage) -> RgbImage {
    RgbImage {
        side: image.side,
        data: image.data.iter().flat_map(|&p| [p, p, p]).collect(),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageSeries {
    pub trace_id: String,
    pub side: usize,
    pub images: Vec<GrayImage>,
    /// Pixel count before padding.
    pub original_length: usize,
}

impl ImageSeries {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Number of m×m segments needed for `len` pixels.
pub fn segment_count(len: usize, side: usize) -> usize {
    len.div_ceil(side * side)
}

pub fn segment(stream: &PixelStream, side: usize) -> Result<ImageSeries, ImageError> {
    if side == 0 {
        return Err(ImageError::ZeroSide);
    }
    let area = side * side;
    let images = stream
        .pixels
        .chunks(area)
        .map(|chunk| {
            let mut data = chunk.to_vec();
            data.resize(area, 0);
            GrayImage { side, data }
        })
        .collect();
    Ok(ImageSeries {
        trace_id: stream.source_trace_id.clone(),
        side,
        images,
        original_length: stream.len(),
    })
}

pub fn reassemble(series: &ImageSeries) -> Result<PixelStream, ImageError> {
    let capacity = series.images.len() * series.side * series.side;
    if series.original_length > capacity {
        return Err(ImageError::LengthMismatch {
            original: series.original_length,
            capacity,
        });
    }
    let mut pixels = Vec::with_capacity(capacity);
    for image in &series.images {
        if image.side != series.side {
            return Err(ImageError::BadImageSize {
                side: series.side,
                expected: series.side * series.side,
                actual: image.data.len(),
            });
        }
        pixels.extend_from_slice(&image.data);
    }
    pixels.truncate(series.original_length);
    Ok(PixelStream::new(series.trace_id.clone(), pixels))
}

/// Contents of an `HNIMG1` file: magic, u32 side, u32 count, u8 channels,
/// then `count × side × side × channels` raw bytes. Integers little-endian.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ImageBundle {
    pub side: usize,
    pub channels: u8,
    pub images: Vec<Vec<u8>>,
}

impl ImageBundle {
    pub fn from_gray<'a, I>(side: usize, images: I) -> Self
    where
        I: IntoIterator<Item = &'a GrayImage>,
    {
        ImageBundle {
            side,
            channels: 1,
            images: images.into_iter().map(|i| i.data.clone()).collect(),
        }
    }

    pub fn image_bytes(&self) -> usize {
        self.side * self.side * self.channels as usize
    }

    pub fn to_gray(&self) -> Result<Vec<GrayImage>, ImageError> {
        if self.channels != 1 {
            return Err(ImageError::Format(format!(
                "expected 1 channel, file has {}",
                self.channels
            )));
        }
        self.images
            .iter()
            .map(|d| GrayImage::new(self.side, d.clone()))
            .collect()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), ImageError> {
        let side =
            u32::try_from(self.side).map_err(|_| ImageError::Format("side too large".into()))?;
        let count = u32::try_from(self.images.len())
            .map_err(|_| ImageError::Format("too many images".into()))?;
        w.write_all(IMAGE_MAGIC)?;
        w.write_all(&side.to_le_bytes())?;
        w.write_all(&count.to_le_bytes())?;
        w.write_all(&[self.channels])?;
        for image in &self.images {
            if image.len() != self.image_bytes() {
                return Err(ImageError::BadImageSize {
                    side: self.side,
                    expected: self.image_bytes(),
                    actual: image.len(),
                });
            }
            w.write_all(image)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, ImageError> {
        let mut magic = [0u8; 6];
        r.read_exact(&mut magic)?;
        if &magic != IMAGE_MAGIC {
            return Err(ImageError::Format("bad magic".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let side = u32::from_le_bytes(word) as usize;
        r.read_exact(&mut word)?;
        let count = u32::from_le_bytes(word) as usize;
        let mut channels = [0u8; 1];
        r.read_exact(&mut channels)?;
        if side == 0 || channels[0] == 0 {
            return Err(ImageError::Format("zero side or channel count".into()));
        }
        let bundle = ImageBundle {
            side,
            channels: channels[0],
            images: Vec::new(),
        };
        let size = bundle.image_bytes();
        let mut images = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let mut buf = vec![0u8; size];
            r.read_exact(&mut buf)?;
            images.push(buf);
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(ImageError::Format("trailing bytes".into()));
        }
        Ok(ImageBundle { images, ..bundle })
    }

    pub fn save(&self, path: &Path) -> Result<(), ImageError> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self, ImageError> {
        ImageBundle::read_from(BufReader::new(File::open(path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stream(pixels: Vec<u8>) -> PixelStream {
        PixelStream::new("t", pixels)
    }

    #[test]
    fn segment_pads_last_image() {
        let series = segment(&stream((1..=10).collect()), 2).unwrap();
        assert_eq!(series.len(), 3);
        assert_eq!(series.images[2].as_bytes(), &[9, 10, 0, 0]);
        assert_eq!(
            reassemble(&series).unwrap().pixels,
            (1..=10).collect::<Vec<u8>>()
        );
    }

    #[test]
    fn segment_exact_fit_and_row_major() {
        let series = segment(&stream((0..16).collect()), 2).unwrap();
        assert_eq!(series.len(), 4);
        for (k, image) in series.images.iter().enumerate() {
            let base = 4 * k as u8;
            assert_eq!(image.get(0, 0), base);
            assert_eq!(image.get(0, 1), base + 1);
            assert_eq!(image.get(1, 0), base + 2);
            assert_eq!(image.get(1, 1), base + 3);
        }
        let one = segment(&stream(vec![5; 9]), 3).unwrap();
        assert_eq!(one.len(), 1);
        assert_eq!(one.images[0].as_bytes(), &[5; 9]);
    }

    #[test]
    fn empty_stream_gives_empty_series() {
        let series = segment(&stream(vec![]), 28).unwrap();
        assert!(series.is_empty());
        assert!(reassemble(&series).unwrap().is_empty());
        assert!(matches!(
            segment(&stream(vec![1]), 0),
            Err(ImageError::ZeroSide)
        ));
    }

    #[test]
    fn reassemble_rejects_long_original() {
        let mut series = segment(&stream((1..=10).collect()), 2).unwrap();
        series.original_length = 13;
        assert!(matches!(
            reassemble(&series),
            Err(ImageError::LengthMismatch {
                original: 13,
                capacity: 12
            })
        ));
    }

    #[test]
    fn three_channel_replicates() {
        let zero = to_three_channel(&GrayImage::filled(4, 0));
        assert!(zero.as_bytes().iter().all(|&p| p == 0));
        let image = GrayImage::new(3, (10..19).collect()).unwrap();
        let rgb = to_three_channel(&image);
        for c in 0..3 {
            assert_eq!(rgb.channel(c), image.as_bytes());
        }
        assert_eq!(rgb.get(2, 1, 2), image.get(2, 1));
    }

    #[test]
    fn bundle_round_trip_and_layout() {
        let images = [
            GrayImage::new(2, vec![1, 2, 3, 4]).unwrap(),
            GrayImage::filled(2, 9),
        ];
        let bundle = ImageBundle::from_gray(2, &images);
        let mut bytes = Vec::new();
        bundle.write_to(&mut bytes).unwrap();
        assert_eq!(&bytes[..6], b"HNIMG1");
        assert_eq!(&bytes[6..15], &[2, 0, 0, 0, 2, 0, 0, 0, 1]);
        assert_eq!(&bytes[15..], &[1, 2, 3, 4, 9, 9, 9, 9]);
        let back = ImageBundle::read_from(bytes.as_slice()).unwrap();
        assert_eq!(back, bundle);
        assert_eq!(back.to_gray().unwrap(), images);

        bytes.push(0);
        assert!(matches!(
            ImageBundle::read_from(bytes.as_slice()),
            Err(ImageError::Format(_))
        ));
        assert!(ImageBundle::read_from(&bytes[..10]).is_err());
    }
}
