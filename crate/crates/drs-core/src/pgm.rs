//! Heatmap export as binary PGM (P5).
//!
//! Header is exactly `P5\n<width> <height>\n255\n`, followed by one byte per
//! cell, row-major with rows = range bins and columns = azimuth bins. Pixel
//! value is `round(255 * normalized power)`.

use std::path::Path;

use crate::scene::{normalize_frame, RadarFrame};

pub fn frame_to_pgm_bytes(frame: &RadarFrame) -> Vec<u8> {
    let norm = normalize_frame(frame);
    let (h, w) = (frame.spec.n_range, frame.spec.n_azimuth);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(
        norm.data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub fn write_pgm(path: &Path, frame: &RadarFrame) -> std::io::Result<()> {
    std::fs::write(path, frame_to_pgm_bytes(frame))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scene::{render_points, PolarGridSpec};

    #[test]
    fn header_matches_documented_format() {
        let spec = PolarGridSpec::default();
        let frame = render_points(&[], &spec);
        let bytes = frame_to_pgm_bytes(&frame);
        assert!(bytes.starts_with(b"P5\n64 64\n255\n"));
        assert_eq!(bytes.len(), b"P5\n64 64\n255\n".len() + 64 * 64);
    }

    #[test]
    fn pixel_values_follow_normalized_power() {
        let spec = PolarGridSpec::default();
        let mut frame = render_points(&[], &spec);
        frame.power.set3(0, 0, 0, 0.0); // ceiling -> 255
        frame.power.set3(0, 1, 0, -45.0); // midpoint -> 128
        let bytes = frame_to_pgm_bytes(&frame);
        let header_len = b"P5\n64 64\n255\n".len();
        assert_eq!(bytes[header_len], 255);
        assert_eq!(bytes[header_len + 1], 128);
        assert_eq!(bytes[header_len + 2], 0);
    }
}
