//! Grayscale PNG rendering of magnitude images.

use ndarray::Array2;

/// Largest thumbnail side in pixels.
pub const THUMBNAIL_SIDE: usize = 128;

/// 8-bit PNG of `img` windowed to `[0, range]`.
pub fn encode_png(img: &Array2<f64>, range: f64) -> Vec<u8> {
    let (h, w) = img.dim();
    let scale = if range > 0.0 && range.is_finite() { 255.0 / range } else { 0.0 };
    let pixels: Vec<u8> = img
        .iter()
        .map(|&v| if v.is_finite() { (v * scale).round().clamp(0.0, 255.0) as u8 } else { 0 })
        .collect();
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header().expect("writing to a Vec cannot fail");
        writer.write_image_data(&pixels).expect("writing to a Vec cannot fail");
    }
    out
}

/// Box-filtered downsample so neither side exceeds `max_side`.
pub fn thumbnail(img: &Array2<f64>, max_side: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    let f = h.max(w).div_ceil(max_side.max(1)).max(1);
    if f == 1 {
        return img.clone();
    }
    let (th, tw) = (h.div_ceil(f), w.div_ceil(f));
    Array2::from_shape_fn((th, tw), |(i, j)| {
        let block = img.slice(ndarray::s![i * f..((i + 1) * f).min(h), j * f..((j + 1) * f).min(w)]);
        block.sum() / block.len() as f64
    })
}
