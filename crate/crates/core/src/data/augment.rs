//! Training-time image augmentation on `[C, H, W]` tensors.

use rand::Rng;

use crate::tensor::{Real, Tensor};

pub const FLIP_P: f64 = 0.5;
pub const CROP_PAD: usize = 4;
pub const ERASE_P: f64 = 0.5;
pub const ERASE_AREA: (f64, f64) = (0.02, 0.4);
pub const ERASE_ASPECT: (f64, f64) = (0.3, 1.0 / 0.3);
const ERASE_ATTEMPTS: usize = 100;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentFlags {
    pub flip: bool,
    pub crop: bool,
    pub erase: bool,
}

impl AugmentFlags {
    pub const ALL: AugmentFlags = AugmentFlags {
        flip: true,
        crop: true,
        erase: true,
    };
    pub const NONE: AugmentFlags = AugmentFlags {
        flip: false,
        crop: false,
        erase: false,
    };

    pub fn any(self) -> bool {
        self.flip || self.crop || self.erase
    }
}

/// What one call actually did.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct AugmentTrace {
    pub flipped: bool,
    /// Top-left corner of the crop window in padded coordinates.
    pub crop: Option<(usize, usize)>,
    /// `(top, left, height, width)` of the erased rectangle.
    pub erase: Option<(usize, usize, usize, usize)>,
}

pub fn hflip<T: Real>(img: &Tensor<T>) -> Tensor<T> {
    let (c, h, w) = dims(img);
    let d = img.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let x = i % w;
        d[i - x + (w - 1 - x)]
    })
}

/// Zero-pads by `pad` on every side, then cuts the `H×W` window at `(top, left)`.
pub fn pad_crop<T: Real>(img: &Tensor<T>, pad: usize, top: usize, left: usize) -> Tensor<T> {
    let (c, h, w) = dims(img);
    let d = img.data();
    Tensor::from_fn(&[c, h, w], |i| {
        let (ch, y, x) = (i / (h * w), (i / w) % h, i % w);
        let (sy, sx) = ((y + top).wrapping_sub(pad), (x + left).wrapping_sub(pad));
        if sy < h && sx < w {
            d[ch * h * w + sy * w + sx]
        } else {
            T::zero()
        }
    })
}

fn dims<T: Real>(img: &Tensor<T>) -> (usize, usize, usize) {
    match *img.shape() {
        [c, h, w] => (c, h, w),
        ref s => panic!("augment expects [C, H, W], got {s:?}"),
    }
}

/// Picks an erase rectangle whose rounded area still lies in `ERASE_AREA`,
/// or `None` when no attempt fits.
fn erase_rect(h: usize, w: usize, rng: &mut impl Rng) -> Option<(usize, usize, usize, usize)> {
    let area = (h * w) as f64;
    for _ in 0..ERASE_ATTEMPTS {
        let target = area * rng.gen_range(ERASE_AREA.0..=ERASE_AREA.1);
        let log_r = rng.gen_range(ERASE_ASPECT.0.ln()..=ERASE_ASPECT.1.ln());
        let r = log_r.exp();
        let eh = (target * r).sqrt().round() as usize;
        let ew = (target / r).sqrt().round() as usize;
        let frac = (eh * ew) as f64 / area;
        if eh >= 1 && ew >= 1 && eh < h && ew < w && (ERASE_AREA.0..=ERASE_AREA.1).contains(&frac) {
            let top = rng.gen_range(0..=h - eh);
            let left = rng.gen_range(0..=w - ew);
            return Some((top, left, eh, ew));
        }
    }
    None
}

pub fn augment_traced<T: Real>(img: &Tensor<T>, rng: &mut impl Rng, flags: AugmentFlags) -> (Tensor<T>, AugmentTrace) {
    let mut trace = AugmentTrace::default();
    if !flags.any() {
        return (img.clone(), trace);
    }
    let (c, h, w) = dims(img);
    let mut out = img.clone();
    if flags.flip && rng.gen_bool(FLIP_P) {
        out = hflip(&out);
        trace.flipped = true;
    }
    if flags.crop {
        let top = rng.gen_range(0..=2 * CROP_PAD);
        let left = rng.gen_range(0..=2 * CROP_PAD);
        out = pad_crop(&out, CROP_PAD, top, left);
        trace.crop = Some((top, left));
    }
    if flags.erase && rng.gen_bool(ERASE_P) {
        if let Some((top, left, eh, ew)) = erase_rect(h, w, rng) {
            let d = out.data_mut();
            for ch in 0..c {
                for y in top..top + eh {
                    for x in left..left + ew {
                        d[ch * h * w + y * w + x] = T::lit(rng.gen_range(0.0..1.0));
                    }
                }
            }
            trace.erase = Some((top, left, eh, ew));
        }
    }
    (out, trace)
}

pub fn augment<T: Real>(img: &Tensor<T>, rng: &mut impl Rng, flags: AugmentFlags) -> Tensor<T> {
    augment_traced(img, rng, flags).0
}
