use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box on an integer cell grid: left edge `x`, top edge `y`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[i64; 4]", into = "[i64; 4]")]
pub struct BoundingBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

impl BoundingBox {
    pub fn new(x: i64, y: i64, w: i64, h: i64) -> Result<Self> {
        if w <= 0 || h <= 0 {
            return Err(Error::Argument(format!("invalid box ({x}, {y}, {w}, {h}): width and height must be positive")));
        }
        if x < 0 || y < 0 {
            return Err(Error::Argument(format!("invalid box ({x}, {y}, {w}, {h}): negative origin")));
        }
        let fit = |v: i64| u32::try_from(v).map_err(|_| Error::Argument(format!("box coordinate {v} too large")));
        Ok(Self { x: fit(x)?, y: fit(y)?, w: fit(w)?, h: fit(h)? })
    }

    pub fn area(&self) -> u64 {
        self.w as u64 * self.h as u64
    }

    pub fn right(&self) -> u64 {
        self.x as u64 + self.w as u64
    }

    pub fn bottom(&self) -> u64 {
        self.y as u64 + self.h as u64
    }

    pub fn fits_within(&self, width: usize, height: usize) -> bool {
        self.right() <= width as u64 && self.bottom() <= height as u64
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> u64 {
        let left = self.x.max(other.x) as u64;
        let top = self.y.max(other.y) as u64;
        let right = self.right().min(other.right());
        let bottom = self.bottom().min(other.bottom());
        right.saturating_sub(left) * bottom.saturating_sub(top)
    }

    pub fn contains_cell(&self, col: usize, row: usize) -> bool {
        (col as u64) >= self.x as u64 && (col as u64) < self.right() && (row as u64) >= self.y as u64 && (row as u64) < self.bottom()
    }
}

impl TryFrom<[i64; 4]> for BoundingBox {
    type Error = Error;

    fn try_from(v: [i64; 4]) -> Result<Self> {
        BoundingBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BoundingBox> for [i64; 4] {
    fn from(b: BoundingBox) -> Self {
        [b.x as i64, b.y as i64, b.w as i64, b.h as i64]
    }
}

/// Intersection over union of two boxes, in `[0, 1]`.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    // Positive widths and heights keep the union non-zero.
    inter as f64 / union as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn bx(x: i64, y: i64, w: i64, h: i64) -> BoundingBox {
        BoundingBox::new(x, y, w, h).unwrap()
    }

    /// Cell-by-cell count over the bounding region of both boxes.
    fn iou_by_cells(a: &BoundingBox, b: &BoundingBox) -> f64 {
        let cols = a.right().max(b.right()) as usize;
        let rows = a.bottom().max(b.bottom()) as usize;
        let (mut inter, mut union) = (0u64, 0u64);
        for r in 0..rows {
            for c in 0..cols {
                let (ia, ib) = (a.contains_cell(c, r), b.contains_cell(c, r));
                inter += (ia && ib) as u64;
                union += (ia || ib) as u64;
            }
        }
        inter as f64 / union as f64
    }

    #[test]
    fn identical_boxes() {
        assert_eq!(iou(&bx(0, 0, 4, 4), &bx(0, 0, 4, 4)), 1.0);
    }

    #[test]
    fn disjoint_boxes() {
        assert_eq!(iou(&bx(0, 0, 2, 2), &bx(5, 5, 2, 2)), 0.0);
        // touching edges share no cells
        assert_eq!(iou(&bx(0, 0, 2, 2), &bx(2, 0, 2, 2)), 0.0);
    }

    #[test]
    fn one_cell_overlap() {
        let (a, b) = (bx(0, 0, 2, 2), bx(1, 1, 2, 2));
        assert_eq!(iou_by_cells(&a, &b), 1.0 / 7.0);
        assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_degenerate() {
        assert!(BoundingBox::new(1, 1, 0, 5).is_err());
        assert!(BoundingBox::new(1, 1, 3, -1).is_err());
        assert!(BoundingBox::new(-1, 1, 3, 3).is_err());
    }

    #[test]
    fn serde_as_array() {
        let b = bx(2, 3, 4, 5);
        assert_eq!(serde_json::to_string(&b).unwrap(), "[2,3,4,5]");
        assert_eq!(serde_json::from_str::<BoundingBox>("[2,3,4,5]").unwrap(), b);
        assert!(serde_json::from_str::<BoundingBox>("[2,3,0,5]").is_err());
    }

    fn arb_box() -> impl Strategy<Value = BoundingBox> {
        (0i64..12, 0i64..12, 1i64..8, 1i64..8).prop_map(|(x, y, w, h)| bx(x, y, w, h))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(2000))]

        #[test]
        fn symmetric_bounded_and_matches_cells(a in arb_box(), b in arb_box()) {
            let v = iou(&a, &b);
            prop_assert_eq!(v, iou(&b, &a));
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert!((v - iou_by_cells(&a, &b)).abs() < 1e-12);
            prop_assert_eq!(iou(&a, &a), 1.0);
        }
    }
}
