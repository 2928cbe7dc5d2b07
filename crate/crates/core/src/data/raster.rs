use std::path::Path;

use image::RgbImage;

use super::ImageRecord;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `[3, H, W]` tensor with channel values in `[0, 1]`.
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let raw = img.as_raw();
    Tensor::from_fn(&[3, h, w], |i| {
        let c = i / (h * w);
        let p = i % (h * w);
        f64::from(raw[p * 3 + c]) / 255.0
    })
}

/// Load the pixels of `rec`, cropping tiles out of their source file.
/// `root` is the directory the dataset JSON lives in.
pub fn load_image(root: &Path, rec: &ImageRecord) -> Result<Tensor> {
    let path = root.join(&rec.file);
    let img = image::open(&path)
        .map_err(|source| Error::Image {
            path: path.clone(),
            source,
        })?
        .to_rgb8();
    let (x, y) = rec.origin.as_ref().map_or((0, 0), |o| (o.x, o.y));
    if x + rec.width > img.width() || y + rec.height > img.height() {
        return Err(Error::Data(format!(
            "image `{}` ({}x{} at {x},{y}) exceeds its {}x{} file",
            rec.id,
            rec.width,
            rec.height,
            img.width(),
            img.height()
        )));
    }
    let crop = image::imageops::crop_imm(&img, x, y, rec.width, rec.height).to_image();
    Ok(rgb_to_tensor(&crop))
}

/// Zero-pad a `[C, H, W]` tensor on the bottom and right to multiples of `m`.
pub fn pad_to_multiple(t: &Tensor, m: usize) -> Tensor {
    let [c, h, w] = *t.shape() else {
        panic!("pad_to_multiple expects [C, H, W], got {:?}", t.shape());
    };
    let (ph, pw) = (h.div_ceil(m) * m, w.div_ceil(m) * m);
    if (ph, pw) == (h, w) {
        return t.clone();
    }
    let mut out = Tensor::zeros(&[c, ph, pw]);
    for ci in 0..c {
        for y in 0..h {
            let src = &t.data()[(ci * h + y) * w..][..w];
            let o = (ci * ph + y) * pw;
            out.data_mut()[o..o + w].copy_from_slice(src);
        }
    }
    out
}
