//! Dense binary instance masks.

/// A binary mask over an `H × W` pixel grid (row-major).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BitMask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl BitMask {
    pub fn new(h: usize, w: usize) -> Self {
        BitMask { h, w, data: vec![false; h * w] }
    }

    pub fn from_fn(h: usize, w: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut m = BitMask::new(h, w);
        for y in 0..h {
            for x in 0..w {
                m.data[y * w + x] = f(y, x);
            }
        }
        m
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn area(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn any(&self) -> bool {
        self.data.iter().any(|&b| b)
    }

    pub fn pixels(&self) -> &[bool] {
        &self.data
    }

    /// Remove every pixel that is set in `other`.
    pub fn subtract(&mut self, other: &BitMask) {
        assert_eq!((self.h, self.w), (other.h, other.w));
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            if b {
                *a = false;
            }
        }
    }

    /// Intersection-over-union of the two pixel sets (0 when both are empty).
    pub fn iou(&self, other: &BitMask) -> f64 {
        assert_eq!((self.h, self.w), (other.h, other.w));
        let mut inter = 0usize;
        let mut union = 0usize;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            inter += (a && b) as usize;
            union += (a || b) as usize;
        }
        if union == 0 {
            0.0
        } else {
            inter as f64 / union as f64
        }
    }

    pub fn intersects(&self, other: &BitMask) -> bool {
        self.data.iter().zip(&other.data).any(|(&a, &b)| a && b)
    }

    /// Tight bounding box `[x0, y0, w, h]` in pixels, or `None` for an empty
    /// mask.
    pub fn bbox(&self) -> Option<[u32; 4]> {
        let (mut x0, mut y0, mut x1, mut y1) = (usize::MAX, usize::MAX, 0usize, 0usize);
        let mut found = false;
        for y in 0..self.h {
            for x in 0..self.w {
                if self.data[y * self.w + x] {
                    found = true;
                    x0 = x0.min(x);
                    y0 = y0.min(y);
                    x1 = x1.max(x);
                    y1 = y1.max(y);
                }
            }
        }
        found.then(|| [x0 as u32, y0 as u32, (x1 - x0 + 1) as u32, (y1 - y0 + 1) as u32])
    }
}
