//! Static detection overlays: boxes, class names and confidences drawn
//! onto a copy of the image, plus a footer strip with the detection count.

use image::{Rgb, RgbImage};

use crate::detector::{BBox, Detection, Label};

pub const PRED_COLOUR: Rgb<u8> = Rgb([0, 255, 64]);
pub const TRUTH_COLOUR: Rgb<u8> = Rgb([255, 0, 255]);
pub const FOOTER_HEIGHT: u32 = 9;
const GLYPH_W: u32 = 3;
const GLYPH_H: u32 = 5;

#[rustfmt::skip]
const GLYPHS: &[(char, [&str; 5])] = &[
    ('A', ["010", "101", "111", "101", "101"]), ('B', ["110", "101", "110", "101", "110"]),
    ('C', ["011", "100", "100", "100", "011"]), ('D', ["110", "101", "101", "101", "110"]),
    ('E', ["111", "100", "110", "100", "111"]), ('F', ["111", "100", "110", "100", "100"]),
    ('G', ["011", "100", "101", "101", "011"]), ('H', ["101", "101", "111", "101", "101"]),
    ('I', ["111", "010", "010", "010", "111"]), ('J', ["001", "001", "001", "101", "010"]),
    ('K', ["101", "101", "110", "101", "101"]), ('L', ["100", "100", "100", "100", "111"]),
    ('M', ["101", "111", "111", "101", "101"]), ('N', ["110", "101", "101", "101", "101"]),
    ('O', ["010", "101", "101", "101", "010"]), ('P', ["110", "101", "110", "100", "100"]),
    ('Q', ["010", "101", "101", "110", "011"]), ('R', ["110", "101", "110", "101", "101"]),
    ('S', ["011", "100", "010", "001", "110"]), ('T', ["111", "010", "010", "010", "010"]),
    ('U', ["101", "101", "101", "101", "111"]), ('V', ["101", "101", "101", "101", "010"]),
    ('W', ["101", "101", "111", "111", "101"]), ('X', ["101", "101", "010", "101", "101"]),
    ('Y', ["101", "101", "010", "010", "010"]), ('Z', ["111", "001", "010", "100", "111"]),
    ('0', ["111", "101", "101", "101", "111"]), ('1', ["010", "110", "010", "010", "111"]),
    ('2', ["110", "001", "010", "100", "111"]), ('3', ["110", "001", "010", "001", "110"]),
    ('4', ["101", "101", "111", "001", "001"]), ('5', ["111", "100", "110", "001", "110"]),
    ('6', ["011", "100", "110", "101", "010"]), ('7', ["111", "001", "010", "010", "010"]),
    ('8', ["010", "101", "010", "101", "010"]), ('9', ["010", "101", "011", "001", "110"]),
    ('.', ["000", "000", "000", "000", "010"]), ('-', ["000", "000", "111", "000", "000"]),
    ('_', ["000", "000", "000", "000", "111"]), (':', ["000", "010", "000", "010", "000"]),
    ('/', ["001", "001", "010", "100", "100"]), ('?', ["110", "001", "010", "000", "010"]),
    (' ', ["000", "000", "000", "000", "000"]),
];

fn glyph(c: char) -> [&'static str; 5] {
    let c = c.to_ascii_uppercase();
    GLYPHS
        .iter()
        .find(|(g, _)| *g == c)
        .or_else(|| GLYPHS.iter().find(|(g, _)| *g == '?'))
        .map(|(_, rows)| *rows)
        .expect("fallback glyph present")
}

/// Pixel width of `text` in the built-in 3×5 font.
pub fn text_width(text: &str) -> u32 {
    let n = text.chars().count() as u32;
    if n == 0 {
        0
    } else {
        n * (GLYPH_W + 1) - 1
    }
}

/// Draws `text` with its top-left corner at `(x, y)`, clipped to the image.
pub fn draw_text(img: &mut RgbImage, x: u32, y: u32, text: &str, colour: Rgb<u8>) {
    for (i, c) in text.chars().enumerate() {
        let gx = x + i as u32 * (GLYPH_W + 1);
        for (row, bits) in glyph(c).iter().enumerate() {
            for (col, bit) in bits.bytes().enumerate() {
                let (px, py) = (gx + col as u32, y + row as u32);
                if bit == b'1' && px < img.width() && py < img.height() {
                    img.put_pixel(px, py, colour);
                }
            }
        }
    }
}

/// A rectangle outline drawn on the overlay, inclusive pixel bounds.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DrawnBox {
    pub x0: u32,
    pub y0: u32,
    pub x1: u32,
    pub y1: u32,
    pub ground_truth: bool,
}

/// Inclusive pixel bounds of a normalized box, clipped to `w × h`.
pub fn pixel_rect(b: &BBox<f64>, w: u32, h: u32) -> (u32, u32, u32, u32) {
    let (x0, y0, x1, y1) = b.corners();
    let px = |v: f64, n: u32| (v * n as f64).round().clamp(0.0, n as f64) as u32;
    let (l, t) = (px(x0, w).min(w - 1), px(y0, h).min(h - 1));
    let (r, bt) = (px(x1, w).saturating_sub(1).max(l), px(y1, h).saturating_sub(1).max(t));
    (l, t, r.min(w - 1), bt.min(h - 1))
}

fn outline(img: &mut RgbImage, (x0, y0, x1, y1): (u32, u32, u32, u32), colour: Rgb<u8>) {
    for x in x0..=x1 {
        img.put_pixel(x, y0, colour);
        img.put_pixel(x, y1, colour);
    }
    for y in y0..=y1 {
        img.put_pixel(x0, y, colour);
        img.put_pixel(x1, y, colour);
    }
}

/// Copy of `image` with a footer strip; ground truth (when given) is drawn
/// first, predictions on top with `name confidence` captions.
pub fn render_overlay(
    image: &RgbImage,
    detections: &[Detection<f64>],
    truths: Option<&[Label<f64>]>,
    class_names: &[String],
) -> (RgbImage, Vec<DrawnBox>) {
    let (w, h) = image.dimensions();
    let mut out = RgbImage::new(w, h + FOOTER_HEIGHT);
    for (x, y, p) in image.enumerate_pixels() {
        out.put_pixel(x, y, *p);
    }
    let mut drawn = Vec::new();
    if w == 0 || h == 0 {
        return (out, drawn);
    }
    let mut frame = RgbImage::from_fn(w, h, |x, y| *out.get_pixel(x, y));
    for t in truths.unwrap_or(&[]) {
        let r = pixel_rect(&t.bbox, w, h);
        outline(&mut frame, r, TRUTH_COLOUR);
        drawn.push(DrawnBox { x0: r.0, y0: r.1, x1: r.2, y1: r.3, ground_truth: true });
    }
    for d in detections {
        let r = pixel_rect(&d.bbox, w, h);
        outline(&mut frame, r, PRED_COLOUR);
        let name = class_names.get(d.class_id).cloned().unwrap_or_else(|| format!("c{}", d.class_id));
        let caption = format!("{name} {:.2}", d.confidence);
        let ty = if r.1 >= GLYPH_H + 1 { r.1 - GLYPH_H - 1 } else { r.1 + 2 };
        draw_text(&mut frame, r.0 + 1, ty, &caption, PRED_COLOUR);
        drawn.push(DrawnBox { x0: r.0, y0: r.1, x1: r.2, y1: r.3, ground_truth: false });
    }
    for (x, y, p) in frame.enumerate_pixels() {
        out.put_pixel(x, y, *p);
    }
    let n = detections.len();
    let footer = format!("{n} detection{}", if n == 1 { "" } else { "s" });
    draw_text(&mut out, 2, h + 2, &footer, Rgb([255, 255, 255]));
    (out, drawn)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(w: u32, h: u32) -> RgbImage {
        RgbImage::from_fn(w, h, |x, y| Rgb([(x * 7) as u8, (y * 5) as u8, ((x + y) % 2 * 200) as u8]))
    }

    #[test]
    fn empty_overlay_only_adds_footer() {
        let img = checker(40, 24);
        let (out, drawn) = render_overlay(&img, &[], None, &[]);
        assert_eq!(out.dimensions(), (40, 24 + FOOTER_HEIGHT));
        assert!(drawn.is_empty());
        for (x, y, p) in img.enumerate_pixels() {
            assert_eq!(out.get_pixel(x, y), p);
        }
        let lit = (24..24 + FOOTER_HEIGHT).flat_map(|y| (0..40).map(move |x| (x, y))).filter(|&(x, y)| out.get_pixel(x, y).0 == [255; 3]).count();
        assert!(lit > 0, "footer text drawn");
    }

    #[test]
    fn oracle_predictions_coincide_with_truth() {
        let img = checker(64, 64);
        let truths = [
            Label { class_id: 0, bbox: BBox::from_corners(0.1, 0.2, 0.4, 0.5) },
            Label { class_id: 2, bbox: BBox::from_corners(0.55, 0.6, 0.95, 0.97) },
        ];
        let dets: Vec<Detection<f64>> = truths.iter().map(|t| t.as_detection(0.9)).collect();
        let names = vec!["triangle".to_string(), "circle".into(), "octagon".into()];
        let (_, drawn) = render_overlay(&img, &dets, Some(&truths), &names);
        let (gt, pred): (Vec<DrawnBox>, Vec<DrawnBox>) = drawn.into_iter().partition(|d| d.ground_truth);
        assert_eq!(pred.len(), 2);
        for p in &pred {
            assert!(gt.iter().any(|g| {
                g.x0.abs_diff(p.x0) <= 1 && g.y0.abs_diff(p.y0) <= 1 && g.x1.abs_diff(p.x1) <= 1 && g.y1.abs_diff(p.y1) <= 1
            }));
        }
    }

    #[test]
    fn rect_of_full_image_box() {
        assert_eq!(pixel_rect(&BBox::from_corners(0.0, 0.0, 1.0, 1.0), 64, 32), (0, 0, 63, 31));
        assert_eq!(pixel_rect(&BBox::from_corners(0.25, 0.5, 0.5, 0.75), 64, 32), (16, 16, 31, 23));
    }

    #[test]
    fn text_metrics() {
        assert_eq!(text_width(""), 0);
        assert_eq!(text_width("0 detections"), 12 * 4 - 1);
        let mut img = RgbImage::new(8, 6);
        draw_text(&mut img, 0, 0, "1", Rgb([9, 9, 9]));
        assert_eq!(img.get_pixel(1, 0).0, [9, 9, 9]);
        assert_eq!(img.get_pixel(0, 0).0, [0, 0, 0]);
    }
}
