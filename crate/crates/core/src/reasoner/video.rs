//! Masked-video assembly and event-index overlay.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::Sample;
use crate::error::{Error, Result};
use crate::rng::Rng64;
use crate::tensor::Tensor;

pub const GLYPH: usize = 8;
pub const DEFAULT_FRAME_HW: (usize, usize) = (16, 16);

/// 8×8 digit bitmaps, one byte per row, most significant bit leftmost.
const DIGITS: [[u8; 8]; 10] = [
    [0x3C, 0x66, 0x6E, 0x76, 0x66, 0x66, 0x3C, 0x00],
    [0x18, 0x38, 0x18, 0x18, 0x18, 0x18, 0x7E, 0x00],
    [0x3C, 0x66, 0x06, 0x0C, 0x30, 0x60, 0x7E, 0x00],
    [0x3C, 0x66, 0x06, 0x1C, 0x06, 0x66, 0x3C, 0x00],
    [0x0C, 0x1C, 0x3C, 0x6C, 0x7E, 0x0C, 0x0C, 0x00],
    [0x7E, 0x60, 0x7C, 0x06, 0x06, 0x66, 0x3C, 0x00],
    [0x3C, 0x60, 0x7C, 0x66, 0x66, 0x66, 0x3C, 0x00],
    [0x7E, 0x06, 0x0C, 0x18, 0x30, 0x30, 0x30, 0x00],
    [0x3C, 0x66, 0x66, 0x3C, 0x66, 0x66, 0x3C, 0x00],
    [0x3C, 0x66, 0x66, 0x3E, 0x06, 0x0C, 0x38, 0x00],
];

pub fn glyph_pixel(digit: usize, row: usize, col: usize) -> bool {
    (DIGITS[digit][row] >> (7 - col)) & 1 == 1
}

/// `(event_id, start, end)` with `end` exclusive.
pub type Boundary = (usize, usize, usize);

#[derive(Debug, Clone, PartialEq)]
pub struct AssembledVideo {
    pub frames: Tensor,
    pub boundaries: Vec<Boundary>,
    /// Frame range `[start, end)` of the placeholder block.
    pub placeholder: (usize, usize),
}

/// Mean observed event length, rounded, at least 1.
pub fn default_placeholder_len(sample: &Sample) -> usize {
    let counts: Vec<usize> = sample.observed().map(|e| e.frame_count()).collect();
    let mean = counts.iter().sum::<usize>() as f64 / counts.len().max(1) as f64;
    ((mean + 0.5) as usize).max(1)
}

fn frame_hw(sample: &Sample) -> (usize, usize) {
    sample.events.iter().find_map(|e| e.frame_hw()).unwrap_or(DEFAULT_FRAME_HW)
}

/// Concatenates observed frames in order and fills the masked slot with
/// `placeholder_len` uniform-random frames. Events carrying only features
/// contribute black frames of the common size.
pub fn assemble_video(sample: &Sample, placeholder_len: usize, seed: u64) -> Result<AssembledVideo> {
    if placeholder_len == 0 {
        return Err(Error::precondition("placeholder_len must be >= 1"));
    }
    sample.validate()?;
    let (h, w) = frame_hw(sample);
    let per_frame = h * w * 3;
    let mut data = Vec::new();
    let mut boundaries = Vec::with_capacity(sample.events.len());
    let mut placeholder = (0, 0);
    let mut rng = Rng64::new(seed);
    let mut start = 0;
    for (i, ev) in sample.events.iter().enumerate() {
        let n = if i == sample.mask_index {
            for _ in 0..placeholder_len * per_frame {
                data.push(rng.next_f64());
            }
            placeholder = (start, start + placeholder_len);
            placeholder_len
        } else {
            match &ev.frames {
                Some(f) => data.extend_from_slice(f.data()),
                None => data.extend(core::iter::repeat(0.0).take(ev.frame_count() * per_frame)),
            }
            ev.frame_count()
        };
        boundaries.push((i, start, start + n));
        start += n;
    }
    Ok(AssembledVideo {
        frames: Tensor::new(vec![start, h, w, 3], data)?,
        boundaries,
        placeholder,
    })
}

/// Stamps the 1-based event number of every frame into its top-left corner
/// (white digits on black, all channels) and returns the per-frame event
/// ids.
pub fn overlay_event_indices(frames: &Tensor, boundaries: &[Boundary]) -> Result<(Tensor, Vec<usize>)> {
    if frames.rank() != 4 || frames.dim(3) != 3 {
        return Err(Error::shape(format!("frames must be (F, H, W, 3), got {:?}", frames.shape())));
    }
    let (f, h, w) = (frames.dim(0), frames.dim(1), frames.dim(2));
    let mut expect = 0;
    let mut owner = vec![0; f];
    for &(id, s, e) in boundaries {
        if s != expect || e <= s {
            return Err(Error::precondition(format!("boundaries must tile the frames; bad segment ({id}, {s}, {e})")));
        }
        owner[s..e.min(f)].iter_mut().for_each(|o| *o = id);
        expect = e;
    }
    if expect != f {
        return Err(Error::precondition(format!("boundaries cover {expect} of {f} frames")));
    }
    let mut out = frames.clone();
    let data = out.data_mut();
    for (fi, &id) in owner.iter().enumerate() {
        let label = format!("{}", id + 1);
        for (di, ch) in label.bytes().enumerate() {
            let digit = (ch - b'0') as usize;
            for r in 0..GLYPH.min(h) {
                for c in 0..GLYPH {
                    let x = di * GLYPH + c;
                    if x >= w {
                        break;
                    }
                    let v = if glyph_pixel(digit, r, c) { 1.0 } else { 0.0 };
                    let base = ((fi * h + r) * w + x) * 3;
                    data[base..base + 3].iter_mut().for_each(|p| *p = v);
                }
            }
        }
    }
    Ok((out, owner))
}
