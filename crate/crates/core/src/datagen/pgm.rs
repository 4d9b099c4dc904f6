//! 8-bit grayscale image I/O. Binary PGM (P5) is written for
//! visualization; reading accepts anything the decoder understands.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, GrayImage, ImageEncoder, Luma};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn quantize(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Height and width of a `[H, W]` or `[1, H, W]` tensor.
fn image_dims(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [h, w] | [1, h, w] => Ok((*h, *w)),
        s => Err(Error::shape("write_pgm", format!("expected [H, W] or [1, H, W], got {s:?}"))),
    }
}

pub fn to_gray(t: &Tensor) -> Result<GrayImage> {
    let (h, w) = image_dims(t)?;
    Ok(GrayImage::from_fn(w as u32, h as u32, |x, y| {
        Luma([quantize(t.data()[y as usize * w + x as usize])])
    }))
}

/// Writes intensities in [0, 1] (clipped) as an 8-bit binary PGM.
pub fn write_pgm(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let img = to_gray(t)?;
    let out = BufWriter::new(File::create(path)?);
    PnmEncoder::new(out)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), ExtendedColorType::L8)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))
}

/// Reads a grayscale image as a `[1, H, W]` tensor in [0, 1].
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let img = image::open(path)
        .map_err(|e| Error::Image(format!("{}: {e}", path.display())))?
        .into_luma8();
    let (w, h) = img.dimensions();
    let data = img.pixels().map(|p| f64::from(p.0[0]) / 255.0).collect();
    Tensor::new(vec![1, h as usize, w as usize], data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_binary_pgm() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.pgm");
        write_pgm(&path, &Tensor::from_fn(&[1, 2, 3], |i| i as f64 / 5.0)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..2], b"P5");
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 51, 102, 153, 204, 255]);
    }

    #[test]
    fn rejects_multi_channel() {
        assert!(to_gray(&Tensor::zeros(&[2, 2, 2])).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn quantized_round_trip_is_lossless(levels in prop::collection::vec(0u8..=255, 12)) {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("f.pgm");
            let t = Tensor::new(vec![1, 3, 4], levels.iter().map(|&l| f64::from(l) / 255.0).collect()).unwrap();
            write_pgm(&path, &t).unwrap();
            let back = read_image(&path).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            prop_assert!(back.bit_eq(&t));
        }
    }
}
