//! 8-bit RGB PNG encoding of generator output.

use crate::error::{ensure, Error, Result};
use crate::tensor::Tensor;

/// `[-1, 1]` to `[0, 255]`, linear, ties to even, clamped.
pub fn to_u8(x: f64) -> u8 {
    ((x.clamp(-1.0, 1.0) + 1.0) * 127.5).round_ties_even() as u8
}

/// Interleaved RGB bytes of a `[3, H, W]` or `[1, 3, H, W]` image.
pub fn to_rgb8(img: &Tensor) -> Result<(usize, usize, Vec<u8>)> {
    let s = img.shape();
    let (c, h, w) = match s {
        [c, h, w] => (*c, *h, *w),
        [1, c, h, w] => (*c, *h, *w),
        _ => return Err(Error::Contract(format!("expected one image, got {s:?}"))),
    };
    ensure!(c == 3, "PNG output needs 3 channels, got {c}");
    let d = img.data();
    let mut out = Vec::with_capacity(h * w * 3);
    for i in 0..h {
        for j in 0..w {
            for ch in 0..3 {
                out.push(to_u8(d[(ch * h + i) * w + j]));
            }
        }
    }
    Ok((h, w, out))
}

pub fn encode_png(img: &Tensor) -> Result<Vec<u8>> {
    let (h, w, rgb) = to_rgb8(img)?;
    let err = |e: png::EncodingError| Error::Format(e.to_string());
    let mut buf = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut buf, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().map_err(err)?;
        writer.write_image_data(&rgb).map_err(err)?;
    }
    Ok(buf)
}

/// `(width, height, rgb bytes)` of an 8-bit RGB PNG.
pub fn decode_png(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let err = |e: png::DecodingError| Error::Format(e.to_string());
    let mut reader = png::Decoder::new(std::io::Cursor::new(bytes)).read_info().map_err(err)?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Format("image too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    ensure!(
        info.color_type == png::ColorType::Rgb && info.bit_depth == png::BitDepth::Eight,
        "expected 8-bit RGB, got {:?} {:?}",
        info.color_type,
        info.bit_depth
    );
    buf.truncate(info.buffer_size());
    Ok((info.width as usize, info.height as usize, buf))
}
