//! 8-bit image files. Byte `b` maps to `2·b/255 − 1`; writing clamps to
//! `[-1, 1]` and maps back with round-half-up.

use std::path::Path;

use fgd::{ImageBuffer, Shape};
use image::{DynamicImage, ImageFormat};

use crate::error::{io_error, CliError, CliResult};

pub fn byte_to_value(b: u8) -> f64 {
    2.0 * (b as f64 / 255.0) - 1.0
}

pub fn value_to_byte(v: f64) -> u8 {
    let v = v.clamp(-1.0, 1.0);
    ((v + 1.0) * 127.5 + 0.5).floor() as u8
}

pub fn read_image(path: &Path) -> CliResult<ImageBuffer> {
    let img =
        image::open(path).map_err(|e| CliError::config(format!("{}: {e}", path.display())))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let (channels, bytes) = match img {
        DynamicImage::ImageLuma8(b) => (1, b.into_raw()),
        DynamicImage::ImageLumaA8(b) => (2, b.into_raw()),
        DynamicImage::ImageRgb8(b) => (3, b.into_raw()),
        DynamicImage::ImageRgba8(b) => (4, b.into_raw()),
        other => {
            return Err(CliError::config(format!(
                "{}: only 8-bit images are supported, got {:?}",
                path.display(),
                other.color()
            )))
        }
    };
    let data = bytes.into_iter().map(byte_to_value).collect();
    ImageBuffer::new(Shape::new(h, w, channels), data)
        .map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// Writes PNG (1–4 channels), PGM (1) or PPM (3), chosen by extension.
pub fn write_image(path: &Path, x: &ImageBuffer) -> CliResult<()> {
    let format = ImageFormat::from_path(path).map_err(|e| io_error(path, e))?;
    let (w, h) = (x.width() as u32, x.height() as u32);
    let bytes: Vec<u8> = x.data().iter().map(|&v| value_to_byte(v)).collect();
    let img = match x.channels() {
        1 => image::GrayImage::from_raw(w, h, bytes).map(DynamicImage::ImageLuma8),
        2 => image::GrayAlphaImage::from_raw(w, h, bytes).map(DynamicImage::ImageLumaA8),
        3 => image::RgbImage::from_raw(w, h, bytes).map(DynamicImage::ImageRgb8),
        4 => image::RgbaImage::from_raw(w, h, bytes).map(DynamicImage::ImageRgba8),
        c => {
            return Err(CliError::runtime(format!(
                "cannot store {c}-channel images"
            )))
        }
    }
    .expect("buffer length matches dimensions");
    let ok = match format {
        ImageFormat::Png => true,
        ImageFormat::Pnm => matches!(
            (path.extension().and_then(|e| e.to_str()), x.channels()),
            (Some("pgm"), 1) | (Some("ppm"), 3)
        ),
        _ => false,
    };
    if !ok {
        return Err(CliError::config(format!(
            "{}: cannot write a {}-channel image in this format",
            path.display(),
            x.channels()
        )));
    }
    if format == ImageFormat::Pnm {
        let file = std::fs::File::create(path).map_err(|e| io_error(path, e))?;
        let subtype = if x.channels() == 1 {
            image::codecs::pnm::PnmSubtype::Graymap(image::codecs::pnm::SampleEncoding::Binary)
        } else {
            image::codecs::pnm::PnmSubtype::Pixmap(image::codecs::pnm::SampleEncoding::Binary)
        };
        let enc = image::codecs::pnm::PnmEncoder::new(std::io::BufWriter::new(file))
            .with_subtype(subtype);
        img.write_with_encoder(enc).map_err(|e| io_error(path, e))
    } else {
        img.save_with_format(path, format)
            .map_err(|e| io_error(path, e))
    }
}

/// Tiles equally sized images into a grid with a 2-pixel black border.
pub fn contact_sheet(rows: &[Vec<ImageBuffer>]) -> CliResult<ImageBuffer> {
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| CliError::runtime("contact sheet needs at least one image"))?;
    let s = first.shape();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let gap = 2;
    let shape = Shape::new(
        rows.len() * (s.height + gap) + gap,
        cols * (s.width + gap) + gap,
        s.channels,
    );
    let mut sheet = ImageBuffer::filled(shape, -1.0)?;
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            img.ensure_shape(s)?;
            let (oy, ox) = (gap + r * (s.height + gap), gap + c * (s.width + gap));
            for y in 0..s.height {
                for x in 0..s.width {
                    for ch in 0..s.channels {
                        sheet.set(oy + y, ox + x, ch, img.get(y, x, ch));
                    }
                }
            }
        }
    }
    Ok(sheet)
}
