//! Binary netpbm (P6 color, P5 gray) with 8-bit samples mapped to [−1, 1].

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NetpbmFormat {
    /// `P6`, three channels.
    Ppm,
    /// `P5`, one channel.
    Pgm,
}

impl NetpbmFormat {
    pub fn for_channels(c: usize) -> Result<Self> {
        match c {
            3 => Ok(NetpbmFormat::Ppm),
            1 => Ok(NetpbmFormat::Pgm),
            _ => Err(Error::Input(format!("netpbm stores 1 or 3 channels, not {c}"))),
        }
    }

    pub fn channels(self) -> usize {
        match self {
            NetpbmFormat::Ppm => 3,
            NetpbmFormat::Pgm => 1,
        }
    }

    pub fn extension(self) -> &'static str {
        match self {
            NetpbmFormat::Ppm => "ppm",
            NetpbmFormat::Pgm => "pgm",
        }
    }
}

fn to_byte(v: f64) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

fn from_byte(b: u8) -> f64 {
    b as f64 / 127.5 - 1.0
}

/// Encode a `[C, H, W]` image (C ∈ {1, 3}).
pub fn encode_netpbm(image: &Tensor) -> Result<Vec<u8>> {
    let &[c, h, w] = image.shape() else {
        return Err(Error::Shape(format!("image must be [C, H, W], got {:?}", image.shape())));
    };
    let fmt = NetpbmFormat::for_channels(c)?;
    let magic = match fmt {
        NetpbmFormat::Ppm => "P6",
        NetpbmFormat::Pgm => "P5",
    };
    let mut out = format!("{magic}\n{w} {h}\n255\n").into_bytes();
    let plane = h * w;
    out.reserve(c * plane);
    for i in 0..plane {
        for ch in 0..c {
            out.push(to_byte(image.data()[ch * plane + i]));
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::Parse {
            offset: self.pos,
            message: message.into(),
        }
    }

    /// Skip whitespace and `#` comments.
    fn skip_blank(&mut self) {
        while let Some(&b) = self.buf.get(self.pos) {
            if b == b'#' {
                while self.buf.get(self.pos).is_some_and(|&b| b != b'\n') {
                    self.pos += 1;
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    /// Next decimal field and the offset where it starts.
    fn number(&mut self, what: &str) -> Result<(usize, usize)> {
        self.skip_blank();
        let start = self.pos;
        while self.buf.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(self.err(format!("expected {what}")));
        }
        std::str::from_utf8(&self.buf[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .map(|v| (start, v))
            .ok_or_else(|| Error::Parse {
                offset: start,
                message: format!("{what} out of range"),
            })
    }
}

/// Decode a binary P6 or P5 file into `[C, H, W]`.
pub fn decode_netpbm(buf: &[u8]) -> Result<Tensor> {
    let mut cur = Cursor { buf, pos: 0 };
    let fmt = match buf.get(..2) {
        Some(b"P6") => NetpbmFormat::Ppm,
        Some(b"P5") => NetpbmFormat::Pgm,
        _ => return Err(cur.err("expected magic P6 or P5")),
    };
    cur.pos = 2;
    if !buf.get(2).is_some_and(|b| b.is_ascii_whitespace() || *b == b'#') {
        return Err(cur.err("expected whitespace after magic"));
    }
    let (_, w) = cur.number("width")?;
    let (_, h) = cur.number("height")?;
    let (maxval_at, maxval) = cur.number("maxval")?;
    if maxval != 255 {
        return Err(Error::Parse {
            offset: maxval_at,
            message: format!("only maxval 255 is supported, got {maxval}"),
        });
    }
    if w == 0 || h == 0 {
        return Err(cur.err("zero-sized image"));
    }
    if !buf.get(cur.pos).is_some_and(u8::is_ascii_whitespace) {
        return Err(cur.err("expected one whitespace byte before the raster"));
    }
    cur.pos += 1;
    let c = fmt.channels();
    let plane = w * h;
    let need = plane * c;
    let raster = &buf[cur.pos..];
    if raster.len() < need {
        return Err(Error::Parse {
            offset: buf.len(),
            message: format!("truncated raster: {} of {need} bytes", raster.len()),
        });
    }
    if raster.len() > need {
        return Err(Error::Parse {
            offset: cur.pos + need,
            message: format!("{} trailing bytes after the raster", raster.len() - need),
        });
    }
    let mut data = vec![0.0; need];
    for i in 0..plane {
        for ch in 0..c {
            data[ch * plane + i] = from_byte(raster[i * c + ch]);
        }
    }
    Tensor::new(&[c, h, w], data)
}

pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    decode_netpbm(&std::fs::read(path)?)
}

pub fn write_image(path: impl AsRef<Path>, image: &Tensor) -> Result<()> {
    std::fs::write(path, encode_netpbm(image)?)?;
    Ok(())
}
