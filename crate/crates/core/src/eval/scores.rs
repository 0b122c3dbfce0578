use crate::data::{symmetry_period, unit_area, SubjectSpec};
use crate::embedding::Vocab;
use crate::error::{ensure, Error, Result};
use crate::geometry::BoxNorm;
use crate::palette::{ShapeKind, SubjectColor};
use crate::tensor::Tensor;

/// Largest per-channel distance at which a pixel counts as a given color.
pub const COLOR_TOLERANCE: f64 = 0.25;
/// Pixel fraction at which a mention counts as fully present.
pub const PRESENCE_SATURATION: f64 = 0.02;
pub const LAYOUT_EPS: f64 = 1e-6;
const ROTATION_STEP_DEG: f64 = 3.0;

pub fn color_mask(image: &Tensor, color: SubjectColor) -> Result<Vec<bool>> {
    let s = image.shape();
    ensure!(s.len() == 3 && s[2] == 3, Shape, "expected an H×W×3 image, got {:?}", s);
    let rgb = color.rgb();
    Ok(image
        .data()
        .chunks_exact(3)
        .map(|p| p.iter().zip(&rgb).all(|(a, b)| (a - b).abs() <= COLOR_TOLERANCE))
        .collect())
}

/// Color/shape pairs mentioned by a prompt of the toy grammar: every
/// subject color must be followed by a shape.
pub fn parse_mentions(prompt: &str) -> Result<Vec<(SubjectColor, ShapeKind)>> {
    let vocab = Vocab::toy();
    let words: Vec<String> = crate::embedding::prompt_words(prompt).collect();
    let mut out = Vec::new();
    let mut i = 0;
    while i < words.len() {
        let w = &words[i];
        vocab.id(w).map_err(|_| Error::Contract(format!("prompt token {w:?} is not part of the grammar")))?;
        if let Ok(color) = w.parse::<SubjectColor>() {
            let next = words.get(i + 1).map(String::as_str).unwrap_or("");
            let shape = next
                .parse::<ShapeKind>()
                .map_err(|_| Error::Contract(format!("color {w:?} is followed by {next:?} instead of a shape")))?;
            out.push((color, shape));
            i += 2;
            continue;
        }
        if w.parse::<ShapeKind>().is_ok() {
            return Err(Error::Contract(format!("shape {w:?} has no color")));
        }
        i += 1;
    }
    Ok(out)
}

/// Best IoU between a pixel set and the shape template with the same area
/// and centroid, over rotations.
pub fn shape_match(mask: &[bool], h: usize, w: usize, shape: ShapeKind) -> f64 {
    let count = mask.iter().filter(|&&m| m).count();
    if count < 3 {
        return 0.0;
    }
    let (mut cx, mut cy) = (0.0, 0.0);
    for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
        cx += ((i % w) as f64 + 0.5) / w as f64;
        cy += ((i / w) as f64 + 0.5) / h as f64;
    }
    let center = (cx / count as f64, cy / count as f64);
    let half = (count as f64 / (h * w) as f64 / unit_area(shape)).sqrt();
    let period = symmetry_period(shape);
    let steps = if period == 0.0 { 1 } else { (period.to_degrees() / ROTATION_STEP_DEG).round() as usize };
    let mut best: f64 = 0.0;
    for k in 0..steps {
        let spec = SubjectSpec {
            shape,
            color: SubjectColor::Red,
            center,
            scale: 2.0 * half,
            rotation: (k as f64 * ROTATION_STEP_DEG).to_radians(),
        };
        let (mut inter, mut union) = (0usize, 0usize);
        for (i, &m) in mask.iter().enumerate() {
            let t = spec.contains(((i % w) as f64 + 0.5) / w as f64, ((i / w) as f64 + 0.5) / h as f64);
            inter += (m && t) as usize;
            union += (m || t) as usize;
        }
        best = best.max(inter as f64 / union as f64);
    }
    best
}

/// Mean over mentions of presence × shape match; 1 for a prompt without
/// mentions.
pub fn text_fidelity(image: &Tensor, prompt: &str) -> Result<f64> {
    let mentions = parse_mentions(prompt)?;
    if mentions.is_empty() {
        return Ok(1.0);
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut total = 0.0;
    for (color, shape) in &mentions {
        let mask = color_mask(image, *color)?;
        let frac = mask.iter().filter(|&&m| m).count() as f64 / mask.len() as f64;
        let presence = (frac / PRESENCE_SATURATION).min(1.0);
        total += presence * shape_match(&mask, h, w, *shape);
    }
    Ok(total / mentions.len() as f64)
}

/// Per subject, the share of its color's pixels that fall inside its box;
/// averaged over subjects.
pub fn layout_adherence(image: &Tensor, subjects: &[(BoxNorm, SubjectColor)]) -> Result<f64> {
    if subjects.is_empty() {
        return Ok(1.0);
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut total = 0.0;
    for (bbox, color) in subjects {
        let mask = color_mask(image, *color)?;
        let inside = bbox.cell_mask(h, w);
        let all = mask.iter().filter(|&&m| m).count() as f64;
        let within = mask.iter().zip(&inside).filter(|(&m, &b)| m && b).count() as f64;
        total += within / (all + LAYOUT_EPS);
    }
    Ok(total / subjects.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{render, SceneSpec};
    use crate::palette::Background;

    fn scene(subjects: Vec<SubjectSpec>) -> Tensor {
        render(&SceneSpec { subjects, background: Background::Gray, canvas: 32 }).unwrap().image
    }

    fn spec(shape: ShapeKind, color: SubjectColor, center: (f64, f64), scale: f64) -> SubjectSpec {
        SubjectSpec { shape, color, center, scale, rotation: 0.3 }
    }

    #[test]
    fn grammar() {
        assert_eq!(
            parse_mentions("a red circle, a blue star, and a green square on a gray background").unwrap(),
            vec![
                (SubjectColor::Red, ShapeKind::Circle),
                (SubjectColor::Blue, ShapeKind::Star),
                (SubjectColor::Green, ShapeKind::Square)
            ]
        );
        assert!(parse_mentions("a red dog").unwrap_err().to_string().contains("dog"));
        assert!(parse_mentions("a circle").is_err());
        assert_eq!(text_fidelity(&Tensor::zeros(vec![8, 8, 3]), "on a gray background").unwrap(), 1.0);
    }

    #[test]
    fn blank_image_has_no_presence() {
        let img = Tensor::full(vec![16, 16, 3], 0.5);
        assert_eq!(text_fidelity(&img, "a red circle and a blue star").unwrap(), 0.0);
    }

    #[test]
    fn own_caption_scores_high() {
        let img = scene(vec![spec(ShapeKind::Square, SubjectColor::Red, (0.3, 0.3), 0.35)]);
        let own = text_fidelity(&img, "a red square").unwrap();
        assert!(own > 0.8, "{own}");
        assert!(text_fidelity(&img, "a red star").unwrap() < own);
    }

    #[test]
    fn layout_inside_and_outside() {
        let img = scene(vec![spec(ShapeKind::Circle, SubjectColor::Blue, (0.25, 0.25), 0.3)]);
        let left = BoxNorm::new(0.0, 0.0, 0.5, 0.5).unwrap();
        let right = BoxNorm::new(0.5, 0.5, 1.0, 1.0).unwrap();
        assert!((layout_adherence(&img, &[(left, SubjectColor::Blue)]).unwrap() - 1.0).abs() < 1e-6);
        assert!(layout_adherence(&img, &[(right, SubjectColor::Blue)]).unwrap() < 1e-6);
    }
}
