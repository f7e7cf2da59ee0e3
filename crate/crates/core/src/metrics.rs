//! Volumetric Dice and normalized surface Dice.

use crate::error::{Error, Result};

/// Binary mask on a `D×H×W` grid (x fastest).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub dims: [usize; 3],
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(dims: [usize; 3], data: Vec<bool>) -> Result<Self> {
        if dims.iter().product::<usize>() != data.len() {
            return Err(Error::Data(format!("mask dims {dims:?} vs {} values", data.len())));
        }
        Ok(Self { dims, data })
    }

    /// Voxels whose label equals `cls`.
    pub fn of_class(dims: [usize; 3], labels: &[u16], cls: u16) -> Result<Self> {
        Self::new(dims, labels.iter().map(|&l| l == cls).collect())
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    fn at(&self, z: usize, y: usize, x: usize) -> bool {
        let [_, h, w] = self.dims;
        self.data[(z * h + y) * w + x]
    }

    /// Mask voxels with at least one 6-neighbour outside the mask; voxels
    /// beyond the grid count as outside.
    pub fn boundary(&self) -> Mask {
        let [d, h, w] = self.dims;
        let mut out = vec![false; self.data.len()];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    if !self.at(z, y, x) {
                        continue;
                    }
                    let edge = z == 0 || y == 0 || x == 0 || z + 1 == d || y + 1 == h || x + 1 == w;
                    out[(z * h + y) * w + x] = edge
                        || !self.at(z - 1, y, x)
                        || !self.at(z + 1, y, x)
                        || !self.at(z, y - 1, x)
                        || !self.at(z, y + 1, x)
                        || !self.at(z, y, x - 1)
                        || !self.at(z, y, x + 1);
                }
            }
        }
        Mask {
            dims: self.dims,
            data: out,
        }
    }

    /// Coordinates `(z, y, x)` of set voxels in memory order.
    pub fn points(&self) -> Vec<[usize; 3]> {
        let [_, h, w] = self.dims;
        self.data
            .iter()
            .enumerate()
            .filter(|(_, &b)| b)
            .map(|(i, _)| [i / (h * w), (i / w) % h, i % w])
            .collect()
    }
}

fn check_dims(a: &Mask, b: &Mask) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::Data(format!("mask dims differ: {:?} vs {:?}", a.dims, b.dims)));
    }
    Ok(())
}

/// `2|P∩G| / (|P|+|G|)`, 1.0 when both masks are empty.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_dims(pred, gt)?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

pub fn dice_score(dims: [usize; 3], pred: &[u16], gt: &[u16], cls: u16) -> Result<f64> {
    dice(&Mask::of_class(dims, pred, cls)?, &Mask::of_class(dims, gt, cls)?)
}

/// Squared physical distance between voxels `a` and `b`.
pub fn squared_distance(a: [usize; 3], b: [usize; 3], spacing: [f64; 3]) -> f64 {
    let mut s = 0.0;
    for k in 0..3 {
        let d = (a[k] as f64 - b[k] as f64) * spacing[k];
        s += d * d;
    }
    s
}

/// Number of `from` boundary voxels with a `to` boundary voxel within
/// `tol` mm (`d² ≤ tol²`), searched in the bounding box the tolerance allows.
fn within_tolerance(from: &Mask, to: &Mask, spacing: [f64; 3], tol: f64) -> usize {
    let [d, h, w] = to.dims;
    // one extra voxel of reach guards against rounding in tol / spacing
    let reach: [usize; 3] = std::array::from_fn(|k| (tol / spacing[k]).floor() as usize + 1);
    let tol2 = tol * tol;
    let mut hits = 0;
    for p in from.points() {
        let lo: [usize; 3] = std::array::from_fn(|k| p[k].saturating_sub(reach[k]));
        let hi = [
            (p[0] + reach[0]).min(d - 1),
            (p[1] + reach[1]).min(h - 1),
            (p[2] + reach[2]).min(w - 1),
        ];
        let found = (lo[0]..=hi[0]).any(|z| {
            (lo[1]..=hi[1])
                .any(|y| (lo[2]..=hi[2]).any(|x| to.at(z, y, x) && squared_distance(p, [z, y, x], spacing) <= tol2))
        });
        hits += found as usize;
    }
    hits
}

/// Normalized surface Dice at `tol` mm with 6-connected voxel boundaries.
/// 1.0 when both masks are empty, 0.0 when exactly one is.
pub fn nsd(pred: &Mask, gt: &Mask, spacing: [f64; 3], tol: f64) -> Result<f64> {
    check_dims(pred, gt)?;
    if spacing.iter().any(|&s| !(s > 0.0)) || !(tol >= 0.0) {
        return Err(Error::Data(format!("invalid spacing {spacing:?} or tolerance {tol}")));
    }
    let (bp, bg) = (pred.boundary(), gt.boundary());
    let (np, ng) = (bp.count(), bg.count());
    match (np, ng) {
        (0, 0) => return Ok(1.0),
        (0, _) | (_, 0) => return Ok(0.0),
        _ => {}
    }
    let a = within_tolerance(&bp, &bg, spacing, tol);
    let b = within_tolerance(&bg, &bp, spacing, tol);
    Ok((a + b) as f64 / (np + ng) as f64)
}

pub fn nsd_score(dims: [usize; 3], spacing: [f64; 3], pred: &[u16], gt: &[u16], cls: u16, tol: f64) -> Result<f64> {
    nsd(
        &Mask::of_class(dims, pred, cls)?,
        &Mask::of_class(dims, gt, cls)?,
        spacing,
        tol,
    )
}
