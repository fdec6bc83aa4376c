//! Column-major run-length encoding of binary masks.
//!
//! The format matches the COCO convention: the mask is read down each column
//! (Fortran order) and `counts` alternates runs of background and foreground
//! pixels, always starting with a background run (which may be zero-length).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::mask::BitMask;

/// Run-length encoded mask.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rle {
    /// `[height, width]`.
    pub size: [u32; 2],
    pub counts: Vec<u32>,
}

/// Encode a mask in column-major order, first run counting zeros.
pub fn encode(mask: &BitMask) -> Rle {
    let (h, w) = (mask.height(), mask.width());
    let mut counts = Vec::new();
    let mut current = false; // runs start with background
    let mut run = 0u32;
    for x in 0..w {
        for y in 0..h {
            let v = mask.get(y, x);
            if v == current {
                run += 1;
            } else {
                counts.push(run);
                current = v;
                run = 1;
            }
        }
    }
    counts.push(run);
    Rle { size: [h as u32, w as u32], counts }
}

/// Decode back to a dense mask. Fails if the run lengths do not cover the
/// stated size exactly.
pub fn decode(rle: &Rle) -> Result<BitMask> {
    let (h, w) = (rle.size[0] as usize, rle.size[1] as usize);
    let total: u64 = rle.counts.iter().map(|&c| c as u64).sum();
    if total != (h * w) as u64 {
        return Err(Error::Dataset(format!(
            "rle covers {total} pixels but size is {h}x{w}"
        )));
    }
    let mut mask = BitMask::new(h, w);
    let mut pos = 0usize;
    let mut value = false;
    for &c in &rle.counts {
        for _ in 0..c {
            let (x, y) = (pos / h, pos % h);
            if value {
                mask.set(y, x, true);
            }
            pos += 1;
        }
        value = !value;
    }
    Ok(mask)
}
