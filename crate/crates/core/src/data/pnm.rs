//! Binary PGM (P5) and PPM (P6) with maxval 255.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PnmImage {
    pub width: usize,
    pub height: usize,
    /// 1 for P5, 3 for P6.
    pub channels: usize,
    /// Interleaved row-major samples.
    pub pixels: Vec<u8>,
}

struct Header<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Header<'_> {
    fn skip_space_and_comments(&mut self) {
        while self.pos < self.bytes.len() {
            match self.bytes[self.pos] {
                b'#' => {
                    while self.pos < self.bytes.len() && self.bytes[self.pos] != b'\n' {
                        self.pos += 1;
                    }
                }
                b' ' | b'\t' | b'\n' | b'\r' | 0x0b | 0x0c => self.pos += 1,
                _ => return,
            }
        }
    }

    fn number(&mut self, field: &str) -> Result<usize> {
        self.skip_space_and_comments();
        let start = self.pos;
        while self.pos < self.bytes.len() && self.bytes[self.pos].is_ascii_digit() {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Parse(format!("pnm {field}: expected a decimal number at byte {start}")));
        }
        let s = std::str::from_utf8(&self.bytes[start..self.pos]).expect("ascii digits");
        s.parse()
            .map_err(|_| Error::Parse(format!("pnm {field}: {s:?} is out of range")))
    }
}

pub fn parse_pnm(bytes: &[u8]) -> Result<PnmImage> {
    let channels = match bytes.get(..2) {
        Some(b"P5") => 1,
        Some(b"P6") => 3,
        _ => return Err(Error::Parse("pnm magic: expected P5 or P6".into())),
    };
    let mut h = Header { bytes, pos: 2 };
    let width = h.number("width")?;
    let height = h.number("height")?;
    let maxval = h.number("maxval")?;
    if width == 0 || height == 0 {
        return Err(Error::Parse(format!("pnm width/height: zero-sized image {width}x{height}")));
    }
    if maxval != 255 {
        return Err(Error::Parse(format!("pnm maxval: {maxval} is not supported, expected 255")));
    }
    match bytes.get(h.pos) {
        Some(c) if c.is_ascii_whitespace() => h.pos += 1,
        _ => return Err(Error::Parse("pnm maxval: missing whitespace before the payload".into())),
    }
    let need = width * height * channels;
    let payload = &bytes[h.pos..];
    if payload.len() < need {
        return Err(Error::Parse(format!(
            "pnm payload: {} bytes for a {width}x{height}x{channels} image needing {need}",
            payload.len()
        )));
    }
    Ok(PnmImage {
        width,
        height,
        channels,
        pixels: payload[..need].to_vec(),
    })
}

pub fn encode_pnm(img: &PnmImage) -> Vec<u8> {
    let magic = if img.channels == 3 { "P6" } else { "P5" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend_from_slice(&img.pixels);
    out
}

impl PnmImage {
    /// `[C, H, W]` in `[0, 1]`, replicating a grey channel when `channels`
    /// asks for 3.
    pub fn to_tensor<T: Real>(&self, channels: usize) -> Result<Tensor<T>> {
        let (h, w) = (self.height, self.width);
        let src_c = self.channels;
        if channels != src_c && !(src_c == 1 && channels == 3) {
            return Err(Error::Input(format!("cannot turn a {src_c}-channel image into {channels} channels")));
        }
        let scale = T::lit(255.0);
        let data = (0..channels * h * w)
            .map(|i| {
                let (c, p) = (i / (h * w), i % (h * w));
                let c = if src_c == 1 { 0 } else { c };
                T::from_u8(self.pixels[p * src_c + c]).unwrap() / scale
            })
            .collect();
        Tensor::new(vec![channels, h, w], data)
    }
}

pub fn load_image<T: Real>(path: &Path, channels: usize) -> Result<Tensor<T>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = parse_pnm(&bytes).map_err(|e| match e {
        Error::Parse(m) => Error::Parse(format!("{}: {m}", path.display())),
        other => other,
    })?;
    img.to_tensor(channels)
}
