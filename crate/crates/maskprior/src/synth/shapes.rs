//! Procedural shape geometry and surface textures.
//!
//! Each class maps deterministically to one of eight geometry families and
//! one of four surface textures, so class identity is visible both in outline
//! and in appearance. All tests work in the shape's local frame: pixel
//! centers are translated to the instance center and rotated by `-theta`,
//! then tested against an analytic region of circumradius `r`.

/// Geometry families, indexed by `class % 8`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Family {
    Disk,
    Ring,
    Triangle,
    Square,
    Star,
    Cross,
    Diamond,
    Crescent,
}

pub const FAMILIES: [Family; 8] = [
    Family::Disk,
    Family::Ring,
    Family::Triangle,
    Family::Square,
    Family::Star,
    Family::Cross,
    Family::Diamond,
    Family::Crescent,
];

impl Family {
    pub fn of_class(class: usize) -> Family {
        FAMILIES[class % 8]
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Disk => "disk",
            Family::Ring => "ring",
            Family::Triangle => "triangle",
            Family::Square => "square",
            Family::Star => "star",
            Family::Cross => "cross",
            Family::Diamond => "diamond",
            Family::Crescent => "crescent",
        }
    }

    /// Membership test in local coordinates, `r` = circumradius.
    pub fn contains(self, x: f64, y: f64, r: f64) -> bool {
        let d2 = x * x + y * y;
        match self {
            Family::Disk => d2 <= r * r,
            Family::Ring => {
                let inner = 0.55 * r;
                d2 <= r * r && d2 >= inner * inner
            }
            Family::Triangle => in_regular_polygon(x, y, r, 3, std::f64::consts::FRAC_PI_2),
            Family::Square => {
                let s = r * std::f64::consts::FRAC_1_SQRT_2;
                x.abs() <= s && y.abs() <= s
            }
            Family::Star => in_star(x, y, r),
            Family::Cross => {
                // Arm length chosen so the arm corners stay inside radius r.
                let arm = 0.34 * r;
                let len = 0.94 * r;
                (x.abs() <= arm && y.abs() <= len) || (y.abs() <= arm && x.abs() <= len)
            }
            Family::Diamond => x.abs() + y.abs() <= r,
            Family::Crescent => {
                let bite_r = 0.78 * r;
                let bx = 0.5 * r;
                let in_disk = d2 <= r * r;
                let in_bite = (x - bx) * (x - bx) + y * y <= bite_r * bite_r;
                in_disk && !in_bite
            }
        }
    }
}

/// Even-odd ray-casting point-in-polygon test.
fn in_polygon(x: f64, y: f64, verts: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let n = verts.len();
    for i in 0..n {
        let (x0, y0) = verts[i];
        let (x1, y1) = verts[(i + 1) % n];
        if (y0 > y) != (y1 > y) {
            let xi = x0 + (y - y0) / (y1 - y0) * (x1 - x0);
            if x < xi {
                inside = !inside;
            }
        }
    }
    inside
}

fn in_regular_polygon(x: f64, y: f64, r: f64, sides: usize, phase: f64) -> bool {
    let verts: Vec<(f64, f64)> = (0..sides)
        .map(|i| {
            let a = phase + i as f64 * std::f64::consts::TAU / sides as f64;
            (r * a.cos(), -r * a.sin())
        })
        .collect();
    in_polygon(x, y, &verts)
}

fn in_star(x: f64, y: f64, r: f64) -> bool {
    let inner = 0.45 * r;
    let verts: Vec<(f64, f64)> = (0..10)
        .map(|i| {
            let a = std::f64::consts::FRAC_PI_2 + i as f64 * std::f64::consts::TAU / 10.0;
            let rad = if i % 2 == 0 { r } else { inner };
            (rad * a.cos(), -rad * a.sin())
        })
        .collect();
    in_polygon(x, y, &verts)
}

/// Surface textures, indexed by `class % 4`. Textures modulate brightness in
/// the local frame so they rotate with the shape.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Texture {
    Solid,
    Stripes,
    Checker,
    Dots,
}

impl Texture {
    pub fn of_class(class: usize) -> Texture {
        match class % 4 {
            0 => Texture::Solid,
            1 => Texture::Stripes,
            2 => Texture::Checker,
            _ => Texture::Dots,
        }
    }

    /// Brightness multiplier at local position `(x, y)` for a shape of
    /// circumradius `r`.
    pub fn shade(self, x: f64, y: f64, r: f64) -> f64 {
        match self {
            Texture::Solid => 1.0,
            Texture::Stripes => {
                if (x / (0.35 * r)).floor().rem_euclid(2.0) == 0.0 {
                    1.0
                } else {
                    0.55
                }
            }
            Texture::Checker => {
                let cell = 0.4 * r;
                if ((x / cell).floor() + (y / cell).floor()).rem_euclid(2.0) == 0.0 {
                    1.0
                } else {
                    0.55
                }
            }
            Texture::Dots => {
                let cell = 0.5 * r;
                let fx = x.rem_euclid(cell) - 0.5 * cell;
                let fy = y.rem_euclid(cell) - 0.5 * cell;
                if fx * fx + fy * fy <= (0.18 * r) * (0.18 * r) {
                    0.45
                } else {
                    1.0
                }
            }
        }
    }
}

/// HSV (h in degrees, s/v in [0,1]) to RGB bytes.
pub fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let i = h.floor() as i32 % 6;
    let f = h - h.floor();
    let p = v * (1.0 - s);
    let q = v * (1.0 - f * s);
    let t = v * (1.0 - (1.0 - f) * s);
    let (r, g, b) = match i {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    };
    [
        (r * 255.0).round().clamp(0.0, 255.0) as u8,
        (g * 255.0).round().clamp(0.0, 255.0) as u8,
        (b * 255.0).round().clamp(0.0, 255.0) as u8,
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    fn area(f: Family, r: f64) -> f64 {
        // Monte-Carlo-free area: integrate over a fine grid.
        let n = 400;
        let mut count = 0usize;
        for i in 0..n {
            for j in 0..n {
                let x = (i as f64 + 0.5) / n as f64 * 2.4 * r - 1.2 * r;
                let y = (j as f64 + 0.5) / n as f64 * 2.4 * r - 1.2 * r;
                if f.contains(x, y, r) {
                    count += 1;
                }
            }
        }
        count as f64 * (2.4 * r / n as f64).powi(2)
    }

    #[test]
    fn disk_area_close_to_analytic() {
        let r = 10.0;
        let a = area(Family::Disk, r);
        assert!((a - std::f64::consts::PI * r * r).abs() / (r * r) < 0.05, "area {a}");
    }

    #[test]
    fn every_family_is_bounded_and_nonempty() {
        for f in FAMILIES {
            assert!(area(f, 8.0) > 10.0, "{f:?} empty");
            // Nothing outside the circumradius.
            for a in 0..64 {
                let phi = a as f64 / 64.0 * std::f64::consts::TAU;
                let (x, y) = ((8.0 * 1.02) * phi.cos(), (8.0 * 1.02) * phi.sin());
                assert!(!f.contains(x, y, 8.0), "{f:?} leaks outside r at {phi}");
            }
        }
    }

    #[test]
    fn topology_markers() {
        // Ring has a hole at the center, crescent has a bite on the +x side.
        assert!(!Family::Ring.contains(0.0, 0.0, 10.0));
        assert!(Family::Ring.contains(8.0, 0.0, 10.0));
        assert!(!Family::Crescent.contains(5.0, 0.0, 10.0));
        assert!(Family::Crescent.contains(-8.0, 0.0, 10.0));
        // Cross: inside along the arms, outside at the diagonal corners.
        assert!(Family::Cross.contains(0.0, 9.0, 10.0));
        assert!(!Family::Cross.contains(7.0, 7.0, 10.0));
        // Star: point tips are in, the angle between tips at full radius is out.
        assert!(Family::Star.contains(0.0, -9.9, 10.0));
        assert!(!Family::Star.contains(0.0, 9.9, 10.0));
    }

    #[test]
    fn textures_shade_in_unit_range() {
        for t in [Texture::Solid, Texture::Stripes, Texture::Checker, Texture::Dots] {
            for i in -20..20 {
                for j in -20..20 {
                    let s = t.shade(i as f64 * 0.7, j as f64 * 0.7, 10.0);
                    assert!((0.0..=1.0).contains(&s));
                }
            }
        }
    }

    #[test]
    fn hsv_primaries() {
        assert_eq!(hsv_to_rgb(0.0, 1.0, 1.0), [255, 0, 0]);
        assert_eq!(hsv_to_rgb(120.0, 1.0, 1.0), [0, 255, 0]);
        assert_eq!(hsv_to_rgb(240.0, 1.0, 1.0), [0, 0, 255]);
        assert_eq!(hsv_to_rgb(360.0, 0.0, 0.5), [128, 128, 128]);
    }
}
