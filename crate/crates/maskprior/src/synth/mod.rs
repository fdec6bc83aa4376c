//! Synthetic overlapping-shapes benchmark: geometry, rendering, annotations.

pub mod annotations;
pub mod generate;
pub mod mask;
pub mod rle;
pub mod shapes;

pub use annotations::{generate_dataset, load_dataset, validate, write_dataset, Dataset, DatasetJson};
pub use generate::{generate_scene, generate_scenes, overlap_affinity, GenConfig, Scene};
pub use mask::BitMask;
pub use rle::Rle;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// SplitMix64 mixing step, used to derive independent per-scene seeds.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Partition of the class set into strongly supervised classes (masks + boxes
/// available) and weakly supervised classes (boxes only).
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSplit {
    num_classes: usize,
    strong: Vec<usize>,
}

impl ClassSplit {
    /// Build a split from explicit strong class indices. Indices are
    /// deduplicated and sorted; out-of-range indices are an error.
    pub fn new(num_classes: usize, strong: &[usize]) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::Config("class split needs at least one class".into()));
        }
        let mut s: Vec<usize> = strong.to_vec();
        s.sort_unstable();
        s.dedup();
        if let Some(&bad) = s.iter().find(|&&c| c >= num_classes) {
            return Err(Error::Config(format!(
                "strong class {bad} out of range (num_classes = {num_classes})"
            )));
        }
        Ok(ClassSplit { num_classes, strong: s })
    }

    /// The first `n` classes strong, the rest weak.
    pub fn first_n(num_classes: usize, n: usize) -> Result<Self> {
        if n > num_classes {
            return Err(Error::Config(format!("{n} strong classes > {num_classes} total")));
        }
        Self::new(num_classes, &(0..n).collect::<Vec<_>>())
    }

    /// Parse a comma-separated list of strong class indices, e.g. `"0,1,2,3"`.
    /// An empty string means no strong classes.
    pub fn parse(num_classes: usize, text: &str) -> Result<Self> {
        let mut strong = Vec::new();
        for part in text.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let c: usize = part
                .parse()
                .map_err(|_| Error::Config(format!("bad class index {part:?} in split")))?;
            strong.push(c);
        }
        Self::new(num_classes, &strong)
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn strong(&self) -> &[usize] {
        &self.strong
    }

    /// Complement of the strong set.
    pub fn weak(&self) -> Vec<usize> {
        (0..self.num_classes).filter(|c| !self.is_strong(*c)).collect()
    }

    pub fn is_strong(&self, class: usize) -> bool {
        self.strong.binary_search(&class).is_ok()
    }
}
