use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Axis-aligned box as centre and size, normalized to the image dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox<T> {
    pub cx: T,
    pub cy: T,
    pub w: T,
    pub h: T,
}

impl<T: Scalar> BBox<T> {
    /// Checked constructor: `w, h > 0` and centre inside the unit square.
    pub fn new(cx: T, cy: T, w: T, h: T) -> Result<Self> {
        let b = BBox { cx, cy, w, h };
        b.validate()?;
        Ok(b)
    }

    pub fn from_corners(x0: T, y0: T, x1: T, y1: T) -> Self {
        let two = T::lit(2.0);
        BBox { cx: (x0 + x1) / two, cy: (y0 + y1) / two, w: x1 - x0, h: y1 - y0 }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: T| v >= T::zero() && v <= T::one();
        if !(self.w > T::zero() && self.h > T::zero()) {
            return Err(Error::input(format!("degenerate box size {}×{}", self.w, self.h)));
        }
        if !(in_unit(self.cx) && in_unit(self.cy)) {
            return Err(Error::input(format!("box centre ({}, {}) outside [0,1]", self.cx, self.cy)));
        }
        Ok(())
    }

    pub fn corners(&self) -> (T, T, T, T) {
        let two = T::lit(2.0);
        (self.cx - self.w / two, self.cy - self.h / two, self.cx + self.w / two, self.cy + self.h / two)
    }

    pub fn area(&self) -> T {
        self.w * self.h
    }

    /// Mirror across the vertical centre line.
    pub fn hflip(&self) -> Self {
        BBox { cx: T::one() - self.cx, ..*self }
    }

    pub fn cast<U: Scalar>(&self) -> BBox<U> {
        BBox { cx: U::lit(self.cx.as_f64()), cy: U::lit(self.cy.as_f64()), w: U::lit(self.w.as_f64()), h: U::lit(self.h.as_f64()) }
    }
}

/// Intersection over union; zero for disjoint boxes.
pub fn iou<T: Scalar>(a: &BBox<T>, b: &BBox<T>) -> T {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(T::zero());
    let ih = (ay1.min(by1) - ay0.max(by0)).max(T::zero());
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= T::zero() {
        return T::zero();
    }
    (inter / union).min(T::one())
}

/// A ground-truth box with its class.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Label<T> {
    pub class_id: usize,
    pub bbox: BBox<T>,
}

/// A scored prediction.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection<T> {
    pub bbox: BBox<T>,
    pub class_id: usize,
    /// `p_obj · p(class)`.
    pub confidence: T,
}

impl<T: Scalar> Label<T> {
    pub fn as_detection(&self, confidence: T) -> Detection<T> {
        Detection { bbox: self.bbox, class_id: self.class_id, confidence }
    }
}

/// Parses one label file: `class_id cx cy w h` per line.
pub fn parse_labels<T: Scalar>(text: &str) -> Result<Vec<Label<T>>> {
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(Error::input(format!("label line {}: expected 5 fields, got {}", ln + 1, fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| Error::input(format!("label line {}: bad class id {:?}", ln + 1, fields[0])))?;
        let mut v = [0.0f64; 4];
        for (slot, f) in v.iter_mut().zip(&fields[1..]) {
            *slot = f
                .parse()
                .map_err(|_| Error::input(format!("label line {}: bad number {f:?}", ln + 1)))?;
        }
        let bbox = BBox::new(T::lit(v[0]), T::lit(v[1]), T::lit(v[2]), T::lit(v[3]))?;
        out.push(Label { class_id, bbox });
    }
    Ok(out)
}

/// Inverse of [`parse_labels`]; LF-terminated lines.
pub fn format_labels<T: Scalar>(labels: &[Label<T>]) -> String {
    labels
        .iter()
        .map(|l| {
            format!(
                "{} {:.6} {:.6} {:.6} {:.6}\n",
                l.class_id,
                l.bbox.cx.as_f64(),
                l.bbox.cy.as_f64(),
                l.bbox.w.as_f64(),
                l.bbox.h.as_f64()
            )
        })
        .collect()
}
