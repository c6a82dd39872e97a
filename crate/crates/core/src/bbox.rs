use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box as normalized center and size.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Axis-aligned box as `(x0, y0, x1, y1)` corners.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Corners {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Self {
        BBox { cx, cy, w, h }
    }

    pub fn corners(&self) -> Corners {
        Corners {
            x0: self.cx - self.w / 2.0,
            y0: self.cy - self.h / 2.0,
            x1: self.cx + self.w / 2.0,
            y1: self.cy + self.h / 2.0,
        }
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn l1(&self, other: &BBox) -> f64 {
        self.to_array()
            .iter()
            .zip(other.to_array())
            .map(|(a, b)| (a - b).abs())
            .sum()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        let c = self.corners();
        x >= c.x0 && x <= c.x1 && y >= c.y0 && y <= c.y1
    }
}

impl Corners {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Corners { x0, y0, x1, y1 }
    }

    pub fn to_bbox(&self) -> BBox {
        BBox {
            cx: (self.x0 + self.x1) / 2.0,
            cy: (self.y0 + self.y1) / 2.0,
            w: self.x1 - self.x0,
            h: self.y1 - self.y0,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x1 - self.x0).max(0.0) * (self.y1 - self.y0).max(0.0)
    }

    fn intersection(&self, o: &Corners) -> f64 {
        let w = (self.x1.min(o.x1) - self.x0.max(o.x0)).max(0.0);
        let h = (self.y1.min(o.y1) - self.y0.max(o.y0)).max(0.0);
        w * h
    }

    fn hull(&self, o: &Corners) -> f64 {
        (self.x1.max(o.x1) - self.x0.min(o.x0)) * (self.y1.max(o.y1) - self.y0.min(o.y0))
    }

    fn is_degenerate(&self) -> bool {
        !(self.x1 > self.x0 && self.y1 > self.y0) || ![self.x0, self.y0, self.x1, self.y1].iter().all(|v| v.is_finite())
    }
}

/// Intersection over union; 0 when both boxes are empty.
pub fn iou(a: &Corners, b: &Corners) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Generalized IoU: `IoU − (hull − union) / hull`, in `(−1, 1]`.
pub fn giou(a: &Corners, b: &Corners) -> Result<f64> {
    if a.is_degenerate() || b.is_degenerate() {
        return Err(Error::contract(format!("giou needs boxes with positive extent: {a:?}, {b:?}")));
    }
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    let hull = a.hull(b);
    Ok(inter / union - (hull - union) / hull)
}
