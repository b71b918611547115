//! Small generated datasets for desk-scale runs.

use super::format::TaskRecord;
use crate::imagecodec::{Codebook, RasterImage, Rgb};
use crate::vocab::VocabManifest;

pub const COLORS: [(&str, Rgb); 8] = [
    ("red", [1.0, 0.0, 0.0]),
    ("green", [0.0, 1.0, 0.0]),
    ("blue", [0.0, 0.0, 1.0]),
    ("yellow", [1.0, 1.0, 0.0]),
    ("cyan", [0.0, 1.0, 1.0]),
    ("magenta", [1.0, 0.0, 1.0]),
    ("white", [1.0, 1.0, 1.0]),
    ("black", [0.0, 0.0, 0.0]),
];

/// Byte text, one code per palette color, 8 px patches, up to 16 patches a side.
pub fn desk_manifest() -> VocabManifest {
    VocabManifest::new(256, COLORS.len() as u32, 16, 8).expect("valid desk manifest")
}

/// A codebook whose entry `i` is the solid patch of `COLORS[i]`.
pub fn color_codebook(patch_px: u32) -> Codebook {
    let colors: Vec<Rgb> = COLORS.iter().map(|c| c.1).collect();
    Codebook::from_colors(patch_px, &colors)
}

/// Color name → solid image of that color.
pub fn color_records(width: u32, height: u32) -> Vec<TaskRecord> {
    COLORS
        .iter()
        .map(|&(name, rgb)| TaskRecord::TextToImage {
            description: name.to_string(),
            image: RasterImage::solid(width, height, rgb),
        })
        .collect()
}

/// "A and B stripes" → vertical stripes of `stripe` px alternating A and B.
pub fn stripe_records(width: u32, height: u32, stripe: u32) -> Vec<TaskRecord> {
    let stripe = stripe.max(1);
    COLORS
        .iter()
        .zip(COLORS.iter().cycle().skip(1))
        .map(|(&(a, ca), &(b, cb))| TaskRecord::TextToImage {
            description: format!("{a} and {b} stripes"),
            image: RasterImage::from_fn(width, height, |x, _| if (x / stripe) % 2 == 0 { ca } else { cb }),
        })
        .collect()
}

/// Solid image → "a {color} square".
pub fn caption_records(width: u32, height: u32) -> Vec<TaskRecord> {
    COLORS
        .iter()
        .map(|&(name, rgb)| TaskRecord::Captioning {
            image: RasterImage::solid(width, height, rgb),
            caption: format!("a {name} square"),
        })
        .collect()
}

/// Palette index of the color name, if it is one.
pub fn color_index(name: &str) -> Option<usize> {
    COLORS.iter().position(|c| c.0 == name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imagecodec::encode_image;

    #[test]
    fn palette_codes_match_names() {
        let m = desk_manifest();
        let cb = color_codebook(m.patch_px);
        cb.check(&m).unwrap();
        for (i, r) in color_records(16, 8).iter().enumerate() {
            let TaskRecord::TextToImage { description, image } = r else { panic!() };
            assert_eq!(color_index(description), Some(i));
            let g = encode_image(&m, image, &cb).unwrap();
            assert!(g.codes.iter().all(|&c| c as usize == i));
        }
        let stripes = stripe_records(32, 8, 8);
        let TaskRecord::TextToImage { image, .. } = &stripes[0] else { panic!() };
        let g = encode_image(&m, image, &cb).unwrap();
        assert_eq!(g.codes, vec![0, 1, 0, 1]);
        assert_eq!(caption_records(8, 8).len(), 8);
    }
}
