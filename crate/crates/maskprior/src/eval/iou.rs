//! Box IoU on continuous `[x0, y0, x1, y1]` rectangles.
//!
//! Mask IoU lives on [`crate::synth::BitMask`]; this module covers the box
//! geometry used for ambiguity and overlap analysis.

/// Intersection-over-union of two boxes given as `[x0, y0, x1, y1]` with
/// `x1 > x0`, `y1 > y0`. Degenerate (empty) boxes yield 0.
pub fn box_iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let area_a = (a[2] - a[0]).max(0.0) * (a[3] - a[1]).max(0.0);
    let area_b = (b[2] - b[0]).max(0.0) * (b[3] - b[1]).max(0.0);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Convert a pixel-space `[x0, y0, w, h]` box to `[x0, y0, x1, y1]`.
pub fn xywh_to_xyxy(b: [u32; 4]) -> [f64; 4] {
    [
        b[0] as f64,
        b[1] as f64,
        (b[0] + b[2]) as f64,
        (b[1] + b[3]) as f64,
    ]
}
