use lpal_core::datapool::quantize;

/// 8-bit grayscale PNG of a square `[0, 1]` image.
pub fn encode_png(side: usize, pixels: &[f32]) -> Result<Vec<u8>, png::EncodingError> {
    let mut out = Vec::new();
    let mut encoder = png::Encoder::new(&mut out, side as u32, side as u32);
    encoder.set_color(png::ColorType::Grayscale);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&quantize(pixels))?;
    writer.finish()?;
    Ok(out)
}
