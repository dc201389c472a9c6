//! Raster file formats.
//!
//! `float32-raster` (`.dpr`):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "DPR1"
//! 4       1     version (0x01 single channel, 0x02 multi-channel)
//! 5       3     reserved, zero
//! 8       4     height, u32 LE
//! 12      4     width, u32 LE
//! 16      4     channels, u32 LE           (version 0x02 only)
//! ..            f32 LE payload, row-major; planar channel-major for 0x02
//! ```
//!
//! `png16-mm`: single-channel 16-bit PNG holding `round(depth_m * 1000)`.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::propagation::AffinityField;
use crate::raster::{check_dims, DepthRaster, ImageRaster};

pub const MAGIC: &[u8; 4] = b"DPR1";
pub const VERSION_SINGLE: u8 = 0x01;
pub const VERSION_MULTI: u8 = 0x02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RasterFormat {
    Float32Raster,
    Png16Mm,
}

impl RasterFormat {
    /// Guesses the format from a file extension (`.png` or anything else).
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("png") => RasterFormat::Png16Mm,
            _ => RasterFormat::Float32Raster,
        }
    }
}

impl std::str::FromStr for RasterFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "float32-raster" => Ok(RasterFormat::Float32Raster),
            "png16-mm" => Ok(RasterFormat::Png16Mm),
            other => Err(Error::Format(format!("unknown raster format '{other}'"))),
        }
    }
}

/// A multi-channel float raster as stored in a version 0x02 file.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelRaster {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub values: Vec<f32>,
}

pub fn read_raster(path: impl AsRef<Path>, format: RasterFormat) -> Result<DepthRaster> {
    let path = path.as_ref();
    match format {
        RasterFormat::Float32Raster => {
            let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
            decode_float32(&bytes)
        }
        RasterFormat::Png16Mm => read_png16(path),
    }
}

pub fn write_raster(raster: &DepthRaster, path: impl AsRef<Path>, format: RasterFormat) -> Result<()> {
    let path = path.as_ref();
    match format {
        RasterFormat::Float32Raster => {
            std::fs::write(path, encode_float32(raster)).map_err(|e| Error::io(path, e))
        }
        RasterFormat::Png16Mm => write_png16(raster, path),
    }
}

pub fn encode_float32(raster: &DepthRaster) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + 4 * raster.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION_SINGLE, 0, 0, 0]);
    out.extend_from_slice(&(raster.height() as u32).to_le_bytes());
    out.extend_from_slice(&(raster.width() as u32).to_le_bytes());
    for v in raster.values() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_float32(bytes: &[u8]) -> Result<DepthRaster> {
    let (version, mut cursor) = parse_preamble(bytes)?;
    if version != VERSION_SINGLE {
        return Err(Error::Format(format!(
            "expected single-channel version 0x01, found 0x{version:02x}"
        )));
    }
    let height = cursor.u32()? as usize;
    let width = cursor.u32()? as usize;
    let values = cursor.f32_payload(height, width, 1)?;
    DepthRaster::new(height, width, values)
}

pub fn encode_channels(raster: &ChannelRaster) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + 4 * raster.values.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[VERSION_MULTI, 0, 0, 0]);
    out.extend_from_slice(&(raster.height as u32).to_le_bytes());
    out.extend_from_slice(&(raster.width as u32).to_le_bytes());
    out.extend_from_slice(&(raster.channels as u32).to_le_bytes());
    for v in &raster.values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Decodes a version 0x02 file. Values need only be finite.
pub fn decode_channels(bytes: &[u8]) -> Result<ChannelRaster> {
    let (version, mut cursor) = parse_preamble(bytes)?;
    if version != VERSION_MULTI {
        return Err(Error::Format(format!(
            "expected multi-channel version 0x02, found 0x{version:02x}"
        )));
    }
    let height = cursor.u32()? as usize;
    let width = cursor.u32()? as usize;
    let channels = cursor.u32()? as usize;
    if channels == 0 {
        return Err(Error::Format("channel count must be positive".into()));
    }
    let values = cursor.f32_payload(height, width, channels)?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("non-finite value in channel raster".into()));
    }
    Ok(ChannelRaster {
        height,
        width,
        channels,
        values,
    })
}

pub fn read_channels(path: impl AsRef<Path>) -> Result<ChannelRaster> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_channels(&bytes)
}

pub fn write_channels(raster: &ChannelRaster, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_channels(raster)).map_err(|e| Error::io(path, e))
}

pub fn read_image(path: impl AsRef<Path>) -> Result<ImageRaster> {
    let raw = read_channels(path)?;
    if raw.values.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Data("image values must lie in [0, 1]".into()));
    }
    ImageRaster::new(raw.height, raw.width, raw.channels, raw.values)
}

pub fn write_image(image: &ImageRaster, path: impl AsRef<Path>) -> Result<()> {
    write_channels(
        &ChannelRaster {
            height: image.height(),
            width: image.width(),
            channels: image.channels(),
            values: image.values().to_vec(),
        },
        path,
    )
}

/// Reads a raw (unnormalized) affinity field; the channel count must be a
/// square of an odd stencil size.
pub fn read_affinity(path: impl AsRef<Path>) -> Result<AffinityField> {
    let raw = read_channels(path)?;
    let stencil = (raw.channels as f64).sqrt().round() as usize;
    if stencil * stencil != raw.channels {
        return Err(Error::Format(format!(
            "affinity channel count {} is not a perfect square",
            raw.channels
        )));
    }
    AffinityField::new(raw.height, raw.width, stencil, raw.values)
}

pub fn write_affinity(field: &AffinityField, path: impl AsRef<Path>) -> Result<()> {
    write_channels(
        &ChannelRaster {
            height: field.height(),
            width: field.width(),
            channels: field.channels(),
            values: field.weights().to_vec(),
        },
        path,
    )
}

fn parse_preamble(bytes: &[u8]) -> Result<(u8, Cursor<'_>)> {
    if bytes.len() < 8 {
        return Err(Error::Format("file shorter than header".into()));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::Format("bad magic, expected \"DPR1\"".into()));
    }
    if bytes[5..8] != [0, 0, 0] {
        return Err(Error::Format("reserved header bytes must be zero".into()));
    }
    Ok((
        bytes[4],
        Cursor {
            bytes,
            offset: 8,
        },
    ))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    offset: usize,
}

impl Cursor<'_> {
    fn u32(&mut self) -> Result<u32> {
        let end = self.offset + 4;
        let chunk = self
            .bytes
            .get(self.offset..end)
            .ok_or_else(|| Error::Format("truncated header".into()))?;
        self.offset = end;
        Ok(u32::from_le_bytes(chunk.try_into().unwrap()))
    }

    fn f32_payload(&mut self, height: usize, width: usize, channels: usize) -> Result<Vec<f32>> {
        if height == 0 || width == 0 {
            return Err(Error::Format(format!(
                "dimensions must be positive, got {height}x{width}"
            )));
        }
        let count = height
            .checked_mul(width)
            .and_then(|n| n.checked_mul(channels))
            .ok_or_else(|| Error::Format("dimensions overflow".into()))?;
        let payload = &self.bytes[self.offset..];
        if payload.len() != count * 4 {
            return Err(Error::Format(format!(
                "payload is {} bytes, header implies {}",
                payload.len(),
                count * 4
            )));
        }
        self.offset = self.bytes.len();
        Ok(payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn read_png16(path: &Path) -> Result<DepthRaster> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let decoder = png::Decoder::new(BufReader::new(file));
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    let info = reader.info();
    if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
        return Err(Error::Format(format!(
            "png16-mm expects 16-bit grayscale, got {:?} / {:?}",
            info.color_type, info.bit_depth
        )));
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::Format("png too large".into()))?;
    let mut buf = vec![0u8; size];
    reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Format(format!("png: {e}")))?;
    let values: Vec<f32> = buf
        .chunks_exact(2)
        .take(width * height)
        .map(|c| u16::from_be_bytes([c[0], c[1]]) as f32 / 1000.0)
        .collect();
    check_dims(height, width, values.len(), 1).map_err(|e| Error::Format(e.to_string()))?;
    DepthRaster::new(height, width, values)
}

fn write_png16(raster: &DepthRaster, path: &Path) -> Result<()> {
    let mut data = Vec::with_capacity(raster.len() * 2);
    for &v in raster.values() {
        let mm = (v as f64 * 1000.0).round();
        if mm > u16::MAX as f64 {
            return Err(Error::Data(format!(
                "depth {v} m exceeds the png16-mm range (65.535 m)"
            )));
        }
        data.extend_from_slice(&(mm as u16).to_be_bytes());
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(
        BufWriter::new(file),
        raster.width() as u32,
        raster.height() as u32,
    );
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Sixteen);
    let png_err = |e: png::EncodingError| match e {
        png::EncodingError::IoError(io) => Error::io(path, io),
        other => Error::Format(format!("png: {other}")),
    };
    let mut writer = encoder.write_header().map_err(png_err)?;
    writer.write_image_data(&data).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

/// Reads a whole file; small helper shared by the CLI.
pub fn read_bytes(path: impl AsRef<Path>) -> Result<Vec<u8>> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    File::open(path)
        .and_then(|mut f| f.read_to_end(&mut buf))
        .map_err(|e| Error::io(path, e))?;
    Ok(buf)
}

pub fn write_bytes(path: impl AsRef<Path>, bytes: &[u8]) -> Result<()> {
    let path = path.as_ref();
    File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_pixel_file_is_twenty_bytes() {
        let r = DepthRaster::new(1, 1, vec![2.0]).unwrap();
        let bytes = encode_float32(&r);
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[..8], b"DPR1\x01\0\0\0");
        assert_eq!(decode_float32(&bytes).unwrap(), r);
    }

    #[test]
    fn malformed_headers_are_format_errors() {
        let r = DepthRaster::new(2, 2, vec![1.0, 0.0, 2.5, 3.0]).unwrap();
        let good = encode_float32(&r);

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        assert!(matches!(decode_float32(&bad_magic), Err(Error::Format(_))));

        let mut bad_reserved = good.clone();
        bad_reserved[6] = 1;
        assert!(matches!(decode_float32(&bad_reserved), Err(Error::Format(_))));

        assert!(matches!(
            decode_float32(&good[..good.len() - 1]),
            Err(Error::Format(_))
        ));
        assert!(matches!(decode_float32(&good[..10]), Err(Error::Format(_))));
    }

    #[test]
    fn negative_or_nan_payload_is_data_error() {
        let r = DepthRaster::new(1, 2, vec![1.0, 1.0]).unwrap();
        let mut bytes = encode_float32(&r);
        bytes[16..20].copy_from_slice(&(-1.0f32).to_le_bytes());
        assert!(matches!(decode_float32(&bytes), Err(Error::Data(_))));
        bytes[16..20].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode_float32(&bytes), Err(Error::Data(_))));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let raw = ChannelRaster {
            height: 1,
            width: 1,
            channels: 2,
            values: vec![0.5, -0.5],
        };
        let bytes = encode_channels(&raw);
        assert_eq!(decode_channels(&bytes).unwrap(), raw);
        assert!(matches!(decode_float32(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn format_names_parse() {
        assert_eq!(
            "png16-mm".parse::<RasterFormat>().unwrap(),
            RasterFormat::Png16Mm
        );
        assert!("jpeg".parse::<RasterFormat>().is_err());
        assert_eq!(
            RasterFormat::from_path(Path::new("a/b.PNG")),
            RasterFormat::Png16Mm
        );
    }
}
