//! PNG bridges for every on-disk artifact: RGB images, binary masks,
//! parse-label maps, and pose maps. Values are quantized to 8 bits on save;
//! loading a previously saved file is idempotent on that grid.

use std::path::Path;

use image::{GrayImage, ImageReader, RgbImage};

use crate::control::{PoseKind, PoseMap};
use crate::dataset::ParseMap;
use crate::error::{Result, WeftError};
use crate::latent::{LatentTensor, Space};
use crate::tensor::Tensor;

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Saves a pixel-space `[3, H, W]` tensor as 8-bit RGB.
pub fn save_image(path: &Path, image: &LatentTensor) -> Result<()> {
    image.expect_space(Space::Pixel)?;
    if image.channels() != 3 {
        return Err(WeftError::ShapeMismatch {
            expected: "[3, H, W]".into(),
            got: format!("{:?}", image.tensor().shape()),
        });
    }
    let (h, w) = (image.height(), image.width());
    let hw = h * w;
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    to_u8(image.data()[i]),
                    to_u8(image.data()[hw + i]),
                    to_u8(image.data()[2 * hw + i]),
                ]),
            );
        }
    }
    img.save(path)?;
    Ok(())
}

/// Loads an RGB PNG as a pixel-space `[3, H, W]` tensor in `[0, 1]`.
pub fn load_image(path: &Path) -> Result<LatentTensor> {
    let img = ImageReader::open(path)?.decode()?.into_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for y in 0..h {
        for x in 0..w {
            let p = img.get_pixel(x as u32, y as u32);
            for c in 0..3 {
                data[c * hw + y * w + x] = p.0[c] as f64 / 255.0;
            }
        }
    }
    LatentTensor::new(Tensor::from_vec(&[3, h, w], data), Space::Pixel)
}

/// Saves a binary `[1, H, W]` mask as 8-bit grayscale (0 or 255).
pub fn save_mask(path: &Path, mask: &Tensor) -> Result<()> {
    if mask.shape().len() != 3 || mask.shape()[0] != 1 {
        return Err(WeftError::ShapeMismatch {
            expected: "[1, H, W]".into(),
            got: format!("{:?}", mask.shape()),
        });
    }
    let (h, w) = (mask.shape()[1], mask.shape()[2]);
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let v = mask.data()[y * w + x];
            if v != 0.0 && v != 1.0 {
                return Err(WeftError::InvalidTensor(format!("mask must be binary, found {v}")));
            }
            img.put_pixel(x as u32, y as u32, image::Luma([if v == 1.0 { 255 } else { 0 }]));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Loads a grayscale PNG as a binary mask, thresholding at 128.
pub fn load_mask(path: &Path) -> Result<Tensor> {
    let img = ImageReader::open(path)?.decode()?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            data[y * w + x] = if img.get_pixel(x as u32, y as u32).0[0] >= 128 { 1.0 } else { 0.0 };
        }
    }
    Ok(Tensor::from_vec(&[1, h, w], data))
}

/// Saves a parse map as grayscale PNG carrying the raw label values.
pub fn save_parse(path: &Path, parse: &ParseMap) -> Result<()> {
    let (h, w) = (parse.height(), parse.width());
    let mut img = GrayImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            img.put_pixel(x as u32, y as u32, image::Luma([parse.labels()[y * w + x]]));
        }
    }
    img.save(path)?;
    Ok(())
}

/// Loads a parse map saved by [`save_parse`], validating every label.
pub fn load_parse(path: &Path) -> Result<ParseMap> {
    let img = ImageReader::open(path)?.decode()?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut labels = vec![0u8; h * w];
    for y in 0..h {
        for x in 0..w {
            labels[y * w + x] = img.get_pixel(x as u32, y as u32).0[0];
        }
    }
    ParseMap::new(labels, h, w)
}

/// Saves a pose map. Dense coordinates go to the red/green channels of an
/// RGB PNG; keypoint renderings go to grayscale. Pose kind `None` has no
/// pixels to store and is rejected.
pub fn save_pose(path: &Path, pose: &PoseMap) -> Result<()> {
    let (h, w) = (pose.height(), pose.width());
    match pose.kind {
        PoseKind::None => Err(WeftError::Config("pose kind none has no image to save".into())),
        PoseKind::KeypointRender => {
            let mut img = GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    img.put_pixel(x as u32, y as u32, image::Luma([to_u8(pose.data.data()[y * w + x])]));
                }
            }
            img.save(path)?;
            Ok(())
        }
        PoseKind::DenseCoords => {
            let hw = h * w;
            let mut img = RgbImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    let i = y * w + x;
                    img.put_pixel(
                        x as u32,
                        y as u32,
                        image::Rgb([to_u8(pose.data.data()[i]), to_u8(pose.data.data()[hw + i]), 0]),
                    );
                }
            }
            img.save(path)?;
            Ok(())
        }
    }
}

/// Loads a pose map saved by [`save_pose`]; the kind selects the decoding.
pub fn load_pose(path: &Path, kind: PoseKind) -> Result<PoseMap> {
    match kind {
        PoseKind::None => Err(WeftError::Config("pose kind none has no image to load".into())),
        PoseKind::KeypointRender => {
            let img = ImageReader::open(path)?.decode()?.into_luma8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let mut data = vec![0.0; h * w];
            for y in 0..h {
                for x in 0..w {
                    data[y * w + x] = img.get_pixel(x as u32, y as u32).0[0] as f64 / 255.0;
                }
            }
            PoseMap::new(Tensor::from_vec(&[1, h, w], data), kind)
        }
        PoseKind::DenseCoords => {
            let img = ImageReader::open(path)?.decode()?.into_rgb8();
            let (w, h) = (img.width() as usize, img.height() as usize);
            let hw = h * w;
            let mut data = vec![0.0; 2 * hw];
            for y in 0..h {
                for x in 0..w {
                    let p = img.get_pixel(x as u32, y as u32);
                    data[y * w + x] = p.0[0] as f64 / 255.0;
                    data[hw + y * w + x] = p.0[1] as f64 / 255.0;
                }
            }
            PoseMap::new(Tensor::from_vec(&[2, h, w], data), kind)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::ParseLabel;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use tempfile::tempdir;

    #[test]
    fn image_save_load_is_idempotent_on_the_8bit_grid() {
        let dir = tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw = Tensor::randn(&[3, 8, 8], &mut rng);
        let clamped: Vec<f64> = raw.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
        let img =
            LatentTensor::new(Tensor::from_vec(&[3, 8, 8], clamped), Space::Pixel).unwrap();

        let p1 = dir.path().join("a.png");
        save_image(&p1, &img).unwrap();
        let once = load_image(&p1).unwrap();
        let p2 = dir.path().join("b.png");
        save_image(&p2, &once).unwrap();
        let twice = load_image(&p2).unwrap();
        assert_eq!(once.data(), twice.data());
        assert!(img.max_abs_diff(&once) <= 0.5 / 255.0 + 1e-12);
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn mask_round_trips_exactly() {
        let dir = tempdir().unwrap();
        let mut mask = Tensor::zeros(&[1, 6, 5]);
        mask.data_mut()[7] = 1.0;
        mask.data_mut()[12] = 1.0;
        let path = dir.path().join("m.png");
        save_mask(&path, &mask).unwrap();
        let back = load_mask(&path).unwrap();
        assert_eq!(back.shape(), &[1, 6, 5]);
        assert_eq!(back.data(), mask.data());

        let mut bad = mask.clone();
        bad.data_mut()[0] = 0.25;
        assert!(save_mask(&dir.path().join("bad.png"), &bad).is_err());
    }

    #[test]
    fn parse_map_round_trips_exactly() {
        let dir = tempdir().unwrap();
        let mut pm = ParseMap::filled(ParseLabel::Background, 5, 4);
        pm.set(0, 0, ParseLabel::Skin);
        pm.set(1, 1, ParseLabel::Hair);
        pm.set(2, 2, ParseLabel::Garment);
        pm.set(3, 3, ParseLabel::Other);
        let path = dir.path().join("p.png");
        save_parse(&path, &pm).unwrap();
        let back = load_parse(&path).unwrap();
        assert_eq!(back.labels(), pm.labels());
    }

    #[test]
    fn pose_maps_round_trip_on_the_8bit_grid() {
        let dir = tempdir().unwrap();
        let mut dense = Tensor::zeros(&[2, 4, 4]);
        for (i, v) in dense.data_mut().iter_mut().enumerate() {
            *v = (i % 256) as f64 / 255.0;
        }
        let pose = PoseMap::new(dense, PoseKind::DenseCoords).unwrap();
        let path = dir.path().join("d.png");
        save_pose(&path, &pose).unwrap();
        let back = load_pose(&path, PoseKind::DenseCoords).unwrap();
        assert_eq!(back.data.data(), pose.data.data());

        let mut kp = Tensor::zeros(&[1, 4, 4]);
        kp.data_mut()[5] = 1.0;
        let pose = PoseMap::new(kp, PoseKind::KeypointRender).unwrap();
        let path = dir.path().join("k.png");
        save_pose(&path, &pose).unwrap();
        let back = load_pose(&path, PoseKind::KeypointRender).unwrap();
        assert_eq!(back.data.data(), pose.data.data());

        assert!(save_pose(&dir.path().join("n.png"), &PoseMap::none(4, 4)).is_err());
    }
}
