//! Procedural stand-in dataset: small figures (ellipse body, head, limbs)
//! wearing procedurally textured garments, with parse maps, dense body
//! coordinates, and masks derived analytically from the generator so labels
//! are exact by construction.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::control::{PoseKind, PoseMap};
use crate::dataset::{DatasetRecord, ParseLabel, ParseMap};
use crate::error::{Result, WeftError};
use crate::latent::{LatentTensor, Space};
use crate::tensor::Tensor;

/// Canvas edge length for toy images. Divisible by the default codec factor
/// and deep enough for the default denoiser.
pub const TOY_SIZE: usize = 32;

/// The three garment texture families the generator cycles through.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TextureFamily {
    Solid,
    Stripes,
    Glyphs,
}

impl TextureFamily {
    pub const ALL: [TextureFamily; 3] =
        [TextureFamily::Solid, TextureFamily::Stripes, TextureFamily::Glyphs];

    fn word(&self) -> &'static str {
        match self {
            TextureFamily::Solid => "solid",
            TextureFamily::Stripes => "striped",
            TextureFamily::Glyphs => "dotted",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Category {
    Shirt,
    Dress,
    Jacket,
}

impl Category {
    const ALL: [Category; 3] = [Category::Shirt, Category::Dress, Category::Jacket];

    fn word(&self) -> &'static str {
        match self {
            Category::Shirt => "shirt",
            Category::Dress => "dress",
            Category::Jacket => "jacket",
        }
    }

    fn hem(&self) -> usize {
        match self {
            Category::Shirt => 23,
            Category::Dress => 27,
            Category::Jacket => 23,
        }
    }

    fn covers_arms(&self) -> bool {
        matches!(self, Category::Jacket)
    }
}

const COLORS: [(&str, [f64; 3]); 6] = [
    ("red", [0.82, 0.18, 0.16]),
    ("green", [0.18, 0.62, 0.24]),
    ("blue", [0.17, 0.32, 0.78]),
    ("yellow", [0.88, 0.80, 0.20]),
    ("purple", [0.55, 0.22, 0.68]),
    ("orange", [0.92, 0.52, 0.14]),
];

const TARGET_TEMPLATES: [&str; 4] = [
    "a person wearing {garment}",
    "a photo of a person in {garment}",
    "someone dressed in {garment}",
    "a model wearing {garment} outdoors",
];

/// Everything needed to rasterize one figure deterministically.
struct FigureSpec {
    bg: [f64; 3],
    skin: [f64; 3],
    hair: [f64; 3],
    color_idx: usize,
    family: TextureFamily,
    category: Category,
    cx: i64,
    body_rx: i64,
    stripe_period: usize,
    template_idx: usize,
}

fn sample_spec(rng: &mut ChaCha8Rng, family: TextureFamily) -> FigureSpec {
    let shade = 0.80 + 0.12 * rng.random::<f64>();
    let skin_base = 0.55 + 0.25 * rng.random::<f64>();
    FigureSpec {
        bg: [shade, shade * 0.98, shade * 0.95],
        skin: [skin_base + 0.2, skin_base, skin_base * 0.75],
        hair: [0.15 + 0.1 * rng.random::<f64>(), 0.10, 0.08],
        color_idx: rng.random_range(0..COLORS.len()),
        family,
        category: Category::ALL[rng.random_range(0..Category::ALL.len())],
        cx: 16 + rng.random_range(-2..=2),
        body_rx: rng.random_range(6..=8),
        stripe_period: rng.random_range(2..=3),
        template_idx: rng.random_range(0..TARGET_TEMPLATES.len()),
    }
}

fn inside_ellipse(x: i64, y: i64, cx: i64, cy: i64, rx: i64, ry: i64) -> bool {
    let dx = (x - cx) as f64 / rx as f64;
    let dy = (y - cy) as f64 / ry as f64;
    dx * dx + dy * dy <= 1.0
}

fn garment_texel(spec: &FigureSpec, y: usize, x: usize) -> [f64; 3] {
    let base = COLORS[spec.color_idx].1;
    let dark = [base[0] * 0.45, base[1] * 0.45, base[2] * 0.45];
    match spec.family {
        TextureFamily::Solid => base,
        TextureFamily::Stripes => {
            if (y / spec.stripe_period) % 2 == 0 {
                base
            } else {
                dark
            }
        }
        TextureFamily::Glyphs => {
            if y % 3 == 1 && x % 3 == 1 {
                dark
            } else {
                base
            }
        }
    }
}

/// Rasterizes one figure into (person image, garment product shot, parse
/// map, dense coordinates). All label planes come from the same geometry the
/// renderer uses, so they are exact.
fn render(spec: &FigureSpec) -> (Tensor, Tensor, ParseMap, Tensor) {
    let s = TOY_SIZE;
    let mut person = Tensor::zeros(&[3, s, s]);
    let mut garment = Tensor::full(&[3, s, s], 1.0);
    let mut parse = ParseMap::filled(ParseLabel::Background, s, s);

    let cx = spec.cx;
    let body_cy = 17;
    let body_ry = 10;
    let head_cy = 5;
    let head_r = 3;
    let shoulder_y = 12;
    let hem_y = spec.category.hem();
    let arm_rx = 1;
    let arm_left = cx - spec.body_rx - 1;
    let arm_right = cx + spec.body_rx + 1;

    let put = |img: &mut Tensor, y: usize, x: usize, c: [f64; 3]| {
        for (ch, &v) in c.iter().enumerate() {
            img.data_mut()[(ch * s + y) * s + x] = v;
        }
    };

    for y in 0..s {
        for x in 0..s {
            let (xi, yi) = (x as i64, y as i64);
            let in_body = inside_ellipse(xi, yi, cx, body_cy, spec.body_rx, body_ry);
            let in_head = inside_ellipse(xi, yi, cx, head_cy, head_r, head_r);
            let in_hair = in_head && yi <= head_cy;
            let in_arm = (xi - arm_left).abs() <= arm_rx || (xi - arm_right).abs() <= arm_rx;
            let in_arm = in_arm && (shoulder_y..=20).contains(&(y));
            let in_feet = (25..=27).contains(&y)
                && ((xi - (cx - 3)).abs() <= 1 || (xi - (cx + 3)).abs() <= 1)
                && !in_body;
            let torso = in_body && (shoulder_y..=hem_y).contains(&y);
            let in_garment = torso || (spec.category.covers_arms() && in_arm);

            let (color, label) = if in_garment {
                (garment_texel(spec, y, x), ParseLabel::Garment)
            } else if in_hair {
                (spec.hair, ParseLabel::Hair)
            } else if in_head || in_body || in_arm {
                (spec.skin, ParseLabel::Skin)
            } else if in_feet {
                ([0.2, 0.2, 0.22], ParseLabel::Other)
            } else {
                (spec.bg, ParseLabel::Background)
            };
            put(&mut person, y, x, color);
            parse.set(y, x, label);
            if in_garment {
                put(&mut garment, y, x, garment_texel(spec, y, x));
            }
        }
    }

    // Dense coordinates normalized over the figure's bounding box.
    let mut dense = Tensor::zeros(&[2, s, s]);
    let figure: Vec<(usize, usize)> = (0..s)
        .flat_map(|y| (0..s).map(move |x| (y, x)))
        .filter(|&(y, x)| parse.get(y, x) != ParseLabel::Background)
        .collect();
    let (mut y0, mut y1, mut x0, mut x1) = (s, 0, s, 0);
    for &(y, x) in &figure {
        y0 = y0.min(y);
        y1 = y1.max(y);
        x0 = x0.min(x);
        x1 = x1.max(x);
    }
    for &(y, x) in &figure {
        let u = (x - x0) as f64 / (x1 - x0).max(1) as f64;
        let v = (y - y0) as f64 / (y1 - y0).max(1) as f64;
        dense.data_mut()[y * s + x] = u;
        dense.data_mut()[(s + y) * s + x] = v;
    }

    (person, garment, parse, dense)
}

/// Generates `n` deterministic records. Texture families rotate through all
/// three with a seed-dependent phase, so any run with `n >= 3` contains
/// every family.
pub fn make_toy_dataset(n: usize, rng: &mut ChaCha8Rng) -> Result<Vec<DatasetRecord>> {
    if n < 1 {
        return Err(WeftError::Config("toy dataset needs at least one record".into()));
    }
    let phase = rng.random_range(0..TextureFamily::ALL.len());
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let family = TextureFamily::ALL[(i + phase) % TextureFamily::ALL.len()];
        let spec = sample_spec(rng, family);
        let (person, garment, parse, dense) = render(&spec);
        let mask = parse.mask_for(ParseLabel::Garment);
        let description = format!(
            "a {} {} {}",
            COLORS[spec.color_idx].0,
            spec.family.word(),
            spec.category.word()
        );
        let target = TARGET_TEMPLATES[spec.template_idx].replace("{garment}", &description);
        let rec = DatasetRecord {
            person_image: LatentTensor::new(person, Space::Pixel)?,
            garment_image: LatentTensor::new(garment, Space::Pixel)?,
            dense_map: PoseMap::new(dense, PoseKind::DenseCoords)?,
            parse_map: parse,
            agnostic_mask: mask,
            garment_category_prompt: description,
            target_prompt: target,
        };
        rec.validate()?;
        out.push(rec);
    }
    Ok(out)
}

/// Renders a sparse keypoint pose for a record: small blobs at the head,
/// shoulders, and hips of the figure, located from the parse map. Used for
/// the keypoint-conditioning ablation.
pub fn toy_keypoint_pose(rec: &DatasetRecord) -> Result<PoseMap> {
    let pm = &rec.parse_map;
    let (h, w) = (pm.height(), pm.width());
    let body: Vec<(usize, usize)> = (0..h)
        .flat_map(|y| (0..w).map(move |x| (y, x)))
        .filter(|&(y, x)| pm.get(y, x) != ParseLabel::Background && pm.get(y, x) != ParseLabel::Other)
        .collect();
    if body.is_empty() {
        return Err(WeftError::EmptyGarment);
    }
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
    for &(y, x) in &body {
        y0 = y0.min(y);
        y1 = y1.max(y);
        x0 = x0.min(x);
        x1 = x1.max(x);
    }
    let cy = |f: f64| y0 + ((y1 - y0) as f64 * f) as usize;
    let cx = (x0 + x1) / 2;
    let lx = x0 + (x1 - x0) / 4;
    let rx = x1 - (x1 - x0) / 4;
    let points = [(y0, cx), (cy(0.3), lx), (cy(0.3), rx), (cy(0.7), lx), (cy(0.7), rx)];

    let mut canvas = Tensor::zeros(&[1, h, w]);
    for &(py, px) in &points {
        for dy in 0..2usize {
            for dx in 0..2usize {
                let (y, x) = ((py + dy).min(h - 1), (px + dx).min(w - 1));
                canvas.data_mut()[y * w + x] = 1.0;
            }
        }
    }
    PoseMap::new(canvas, PoseKind::KeypointRender)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use std::collections::BTreeSet;

    fn dataset(n: usize, seed: u64) -> Vec<DatasetRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        make_toy_dataset(n, &mut rng).unwrap()
    }

    #[test]
    fn records_pass_validation_and_sizes_are_fixed() {
        for rec in dataset(6, 3) {
            rec.validate().unwrap();
            assert_eq!(rec.person_image.tensor().shape(), &[3, TOY_SIZE, TOY_SIZE]);
            assert!(rec.person_image.tensor().all_finite());
        }
    }

    #[test]
    fn mask_exactly_matches_the_garment_label_region() {
        for rec in dataset(8, 4) {
            let truth = rec.parse_map.mask_for(ParseLabel::Garment);
            let mut intersection = 0.0;
            let mut union = 0.0;
            for (a, b) in rec.agnostic_mask.data().iter().zip(truth.data()) {
                if *a == 1.0 && *b == 1.0 {
                    intersection += 1.0;
                }
                if *a == 1.0 || *b == 1.0 {
                    union += 1.0;
                }
            }
            assert!(union > 0.0);
            assert_eq!(intersection / union, 1.0);
        }
    }

    #[test]
    fn fixed_seed_is_deterministic() {
        let a = dataset(8, 9);
        let b = dataset(8, 9);
        for (ra, rb) in a.iter().zip(&b) {
            assert_eq!(ra.content_hash(), rb.content_hash());
        }
        let c = dataset(8, 10);
        assert_ne!(a[0].content_hash(), c[0].content_hash());
    }

    #[test]
    fn at_least_three_texture_families_for_eight_records() {
        let words: BTreeSet<String> = dataset(8, 5)
            .iter()
            .map(|r| {
                r.garment_category_prompt.split_whitespace().nth(2).unwrap().to_string()
            })
            .collect();
        assert!(words.len() >= 3, "families seen: {words:?}");
    }

    #[test]
    fn dense_coordinates_stay_in_unit_range_and_cover_the_figure() {
        for rec in dataset(4, 6) {
            let d = &rec.dense_map.data;
            assert!(d.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            // Somewhere on the figure the coordinates are strictly positive.
            assert!(d.data().iter().any(|&v| v > 0.5));
        }
    }

    #[test]
    fn garment_product_shot_shows_texture_on_white() {
        for rec in dataset(4, 7) {
            let g = rec.garment_image.tensor();
            let hw = TOY_SIZE * TOY_SIZE;
            let mask = &rec.agnostic_mask;
            for i in 0..hw {
                if mask.data()[i] == 0.0 {
                    assert_eq!(g.data()[i], 1.0);
                    assert_eq!(g.data()[hw + i], 1.0);
                    assert_eq!(g.data()[2 * hw + i], 1.0);
                }
            }
            // Garment pixels are not white.
            let inside = (0..hw).find(|&i| mask.data()[i] == 1.0).unwrap();
            assert!(g.data()[inside] < 1.0);
        }
    }

    #[test]
    fn prompts_follow_the_caption_grammar() {
        for rec in dataset(6, 8) {
            let parts: Vec<&str> = rec.garment_category_prompt.split_whitespace().collect();
            assert_eq!(parts.len(), 4);
            assert_eq!(parts[0], "a");
            assert!(COLORS.iter().any(|(name, _)| *name == parts[1]));
            assert!(["solid", "striped", "dotted"].contains(&parts[2]));
            assert!(["shirt", "dress", "jacket"].contains(&parts[3]));
            assert!(rec.target_prompt.contains(&rec.garment_category_prompt));
        }
    }

    #[test]
    fn keypoint_pose_marks_a_handful_of_figure_points() {
        for rec in dataset(3, 11) {
            let kp = toy_keypoint_pose(&rec).unwrap();
            assert_eq!(kp.kind, PoseKind::KeypointRender);
            let on: f64 = kp.data.data().iter().sum();
            assert!(on >= 4.0 && on <= 24.0, "blob pixel count {on}");
        }
    }

    #[test]
    fn parse_map_contains_all_person_labels() {
        let rec = &dataset(1, 12)[0];
        for label in
            [ParseLabel::Background, ParseLabel::Skin, ParseLabel::Hair, ParseLabel::Garment]
        {
            assert!(rec.parse_map.count(label) > 0, "missing {label:?}");
        }
    }
}
