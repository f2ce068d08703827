//! Analytic shape membership, sampled at pixel centres.

use super::Category;
use crate::tensor::Rng;

/// One placed shape: category, centre, radius-like size and rotation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) struct Placement {
    pub category: Category,
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub theta: f64,
}

impl Category {
    /// Whether the local point `(u, v)` (shape frame, y pointing down) lies
    /// inside a shape of size `r`.
    fn contains(self, u: f64, v: f64, r: f64) -> bool {
        match self {
            Category::Triangle => {
                // apex (0, -r), base corners (-r, r) and (r, r)
                if v > r || v < -r {
                    return false;
                }
                let half_width = (v + r) / 2.0;
                u.abs() <= half_width
            }
            Category::Cross => {
                let arm = 0.3 * r;
                (u.abs() <= r && v.abs() <= arm) || (v.abs() <= r && u.abs() <= arm)
            }
            Category::Ring => {
                let d2 = u * u + v * v;
                d2 <= r * r && d2 >= 0.25 * r * r
            }
            Category::Bar => u.abs() <= r && v.abs() <= 0.4 * r,
            Category::Disk => u * u + v * v <= r * r,
            Category::Square => u.abs() <= 0.85 * r && v.abs() <= 0.85 * r,
        }
    }

    /// Radius of a disc around the centre that contains the shape.
    fn extent(self, r: f64) -> f64 {
        match self {
            Category::Triangle => r * std::f64::consts::SQRT_2,
            Category::Cross => r * (1.0f64 + 0.09).sqrt(),
            Category::Ring | Category::Disk => r,
            Category::Bar => r * (1.0f64 + 0.16).sqrt(),
            Category::Square => 0.85 * r * std::f64::consts::SQRT_2,
        }
    }

    fn rotates(self) -> bool {
        !matches!(self, Category::Ring | Category::Disk)
    }
}

impl Placement {
    /// Random size, rotation and a centre that keeps the shape inside a
    /// `size x size` canvas.
    pub(crate) fn random(category: Category, size: usize, r_range: (f64, f64), rng: &mut Rng) -> Self {
        let r = rng.uniform(r_range.0, r_range.1);
        let theta = if category.rotates() { rng.uniform(0.0, std::f64::consts::TAU) } else { 0.0 };
        let ext = category.extent(r);
        let (lo, hi) = (ext + 1.0, size as f64 - ext - 1.0);
        let cx = rng.uniform(lo, hi);
        let cy = rng.uniform(lo, hi);
        Placement { category, cx, cy, r, theta }
    }

    /// Binary support on a `size x size` grid, row-major.
    pub(crate) fn rasterize(&self, size: usize) -> Vec<bool> {
        let (sin, cos) = libm::sincos(self.theta);
        let mut out = vec![false; size * size];
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 + 0.5 - self.cx;
                let dy = y as f64 + 0.5 - self.cy;
                // rotate into the shape frame by -theta
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                out[y * size + x] = self.category.contains(u, v, self.r);
            }
        }
        out
    }
}

/// Grows a support by one pixel in each of the eight directions.
pub(crate) fn dilate(mask: &[bool], size: usize) -> Vec<bool> {
    let mut out = mask.to_vec();
    for y in 0..size {
        for x in 0..size {
            if !mask[y * size + x] {
                continue;
            }
            for ny in y.saturating_sub(1)..(y + 2).min(size) {
                for nx in x.saturating_sub(1)..(x + 2).min(size) {
                    out[ny * size + nx] = true;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn count(m: &[bool]) -> usize {
        m.iter().filter(|&&b| b).count()
    }

    #[test]
    fn disk_area_is_close_to_analytic() {
        let p = Placement { category: Category::Disk, cx: 16.0, cy: 16.0, r: 8.0, theta: 0.0 };
        let n = count(&p.rasterize(32)) as f64;
        assert!((n - std::f64::consts::PI * 64.0).abs() < 12.0, "{n}");
    }

    #[test]
    fn ring_has_a_hole() {
        let p = Placement { category: Category::Ring, cx: 16.0, cy: 16.0, r: 8.0, theta: 0.0 };
        let m = p.rasterize(32);
        assert!(!m[15 * 32 + 15] && !m[16 * 32 + 16]);
        assert!(m[16 * 32 + 22]);
    }

    #[test]
    fn shapes_stay_inside_the_canvas() {
        let mut rng = Rng::new(5);
        for &c in &Category::ALL {
            for _ in 0..50 {
                let p = Placement::random(c, 32, (5.0, 8.0), &mut rng);
                let m = p.rasterize(32);
                let border = (0..32).flat_map(|i| [i, 31 * 32 + i, i * 32, i * 32 + 31]);
                assert!(border.into_iter().all(|i| !m[i]), "{p:?}");
                assert!(count(&m) > 0);
            }
        }
    }

    #[test]
    fn dilation_adds_a_one_pixel_ring() {
        let mut m = vec![false; 25];
        m[12] = true;
        assert_eq!(count(&dilate(&m, 5)), 9);
        m = vec![false; 25];
        m[0] = true;
        assert_eq!(count(&dilate(&m, 5)), 4);
    }
}
