use super::image::{resize_bilinear, GrayImage};
use crate::error::{Error, Result};
use crate::graph::PATCH_SIZE;
use rand::Rng;

/// Height the patch baseline rescales whole images to before cropping.
pub const PATCH_SOURCE_HEIGHT: usize = 40;
pub const PATCH_MIN_SIDE: usize = 25;
pub const PATCH_MAX_SIDE: usize = 40;

/// `max(1, floor(w / 16))`.
pub fn patch_count(width: usize) -> usize {
    (width / 16).max(1)
}

/// Random square crops with side uniform in `[25, 40]`, each rescaled to
/// 32x32. Images narrower than the drawn side are centred and edge-padded on
/// both sides.
pub fn sample_patches<R: Rng + ?Sized>(image: &GrayImage, rng: &mut R) -> Result<Vec<GrayImage>> {
    if image.height() != PATCH_SOURCE_HEIGHT {
        return Err(Error::contract(format!(
            "patch sampling expects height {PATCH_SOURCE_HEIGHT}, got {}",
            image.height()
        )));
    }
    let n = patch_count(image.width());
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        let side = rng.gen_range(PATCH_MIN_SIDE..=PATCH_MAX_SIDE);
        let y = rng.gen_range(0..=PATCH_SOURCE_HEIGHT - side);
        let crop = if image.width() >= side {
            let x = rng.gen_range(0..=image.width() - side);
            image.crop(y, x, side, side)?
        } else {
            centre_pad(image, side)?.crop(y, 0, side, side)?
        };
        out.push(resize_bilinear(&crop, PATCH_SIZE, PATCH_SIZE)?);
    }
    Ok(out)
}

fn centre_pad(image: &GrayImage, width: usize) -> Result<GrayImage> {
    let left = (width - image.width()) / 2;
    let mut px = Vec::with_capacity(image.height() * width);
    for y in 0..image.height() {
        let row = image.row(y);
        px.extend(std::iter::repeat(row[0]).take(left));
        px.extend_from_slice(row);
        px.extend(std::iter::repeat(row[row.len() - 1]).take(width - left - row.len()));
    }
    GrayImage::new(image.height(), width, px)
}
