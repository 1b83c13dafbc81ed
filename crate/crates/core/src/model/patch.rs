use crate::error::{Error, Result};
use crate::tensor::{Tensor, Var};

/// Within-patch order is (row, col, channel); patches are row-major.
const TO_TOKENS: [usize; 6] = [0, 2, 4, 3, 5, 1];
const FROM_TOKENS: [usize; 6] = [0, 5, 1, 3, 2, 4];

fn image_dims(shape: &[usize], p: usize) -> Result<(usize, usize, usize, usize)> {
    if shape.len() != 4 {
        return Err(Error::Shape(format!("expected [B, C, H, W], got {shape:?}")));
    }
    let (b, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(Error::Shape(format!(
            "image {h}x{w} is not divisible by patch size {p}"
        )));
    }
    Ok((b, c, h, w))
}

/// `[B, C, H, W]` → `[B, L, p²·C]`.
pub fn patchify<'t>(x: Var<'t>, p: usize) -> Result<Var<'t>> {
    let (b, c, h, w) = image_dims(&x.shape(), p)?;
    let (gh, gw) = (h / p, w / p);
    x.reshape(&[b, c, gh, p, gw, p])?
        .permute(&TO_TOKENS)?
        .reshape(&[b, gh * gw, p * p * c])
}

/// Inverse of [`patchify`] for an image of `channels × hw.0 × hw.1`.
pub fn unpatchify<'t>(tokens: Var<'t>, p: usize, channels: usize, hw: (usize, usize)) -> Result<Var<'t>> {
    let (b, gh, gw) = token_dims(&tokens.shape(), p, channels, hw)?;
    tokens
        .reshape(&[b, gh, gw, p, p, channels])?
        .permute(&FROM_TOKENS)?
        .reshape(&[b, channels, hw.0, hw.1])
}

fn token_dims(shape: &[usize], p: usize, c: usize, hw: (usize, usize)) -> Result<(usize, usize, usize)> {
    image_dims(&[1, c, hw.0, hw.1], p)?;
    let (gh, gw) = (hw.0 / p, hw.1 / p);
    if shape.len() != 3 || shape[1] != gh * gw || shape[2] != p * p * c {
        return Err(Error::Shape(format!(
            "tokens {shape:?} do not tile a {c}x{}x{} image with p={p}",
            hw.0, hw.1
        )));
    }
    Ok((shape[0], gh, gw))
}

/// Tensor form of [`patchify`] for code that runs off the tape.
pub fn patchify_tensor(x: &Tensor, p: usize) -> Result<Tensor> {
    let (b, c, h, w) = image_dims(x.shape(), p)?;
    let (gh, gw) = (h / p, w / p);
    x.reshape(&[b, c, gh, p, gw, p])?
        .permute(&TO_TOKENS)?
        .reshape(&[b, gh * gw, p * p * c])
}

pub fn unpatchify_tensor(tokens: &Tensor, p: usize, channels: usize, hw: (usize, usize)) -> Result<Tensor> {
    let (b, gh, gw) = token_dims(tokens.shape(), p, channels, hw)?;
    tokens
        .reshape(&[b, gh, gw, p, p, channels])?
        .permute(&FROM_TOKENS)?
        .reshape(&[b, channels, hw.0, hw.1])
}
