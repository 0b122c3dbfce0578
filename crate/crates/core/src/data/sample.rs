use serde::{Deserialize, Serialize};

use crate::embedding::{TokenId, Vocab};
use crate::error::Result;
use crate::geometry::BoxNorm;
use crate::palette::{Background, ShapeKind, SubjectColor};
use crate::resampler::{SubjectInput, MAX_SUBJECTS};
use crate::tensor::Tensor;

/// One of the four subject slots of a training sample.
#[derive(Clone, Debug, PartialEq)]
pub struct SubjectSlot {
    /// `crop_size × crop_size × 3` reference crop; zeros for pads.
    pub crop: Tensor,
    pub entity: TokenId,
    /// Box in the target frame.
    pub bbox: BoxNorm,
    pub is_pad: bool,
}

impl SubjectSlot {
    pub fn pad(vocab: &Vocab, crop_size: usize) -> Self {
        SubjectSlot {
            crop: Tensor::zeros(vec![crop_size, crop_size, 3]),
            entity: vocab.pad(),
            bbox: BoxNorm::FULL,
            is_pad: true,
        }
    }

    pub fn to_input(&self) -> SubjectInput {
        SubjectInput { image: self.crop.clone(), entity: self.entity, bbox: self.bbox }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainingSample {
    /// `H×W×3` target frame in `[0, 1]`.
    pub target: Tensor,
    pub caption: String,
    pub caption_ids: Vec<TokenId>,
    /// Exactly four slots, real subjects first.
    pub subjects: Vec<SubjectSlot>,
}

impl TrainingSample {
    pub fn active_subjects(&self) -> impl Iterator<Item = &SubjectSlot> {
        self.subjects.iter().filter(|s| !s.is_pad)
    }

    pub fn num_active(&self) -> usize {
        self.active_subjects().count()
    }
}

/// A subject that survived matching, before filtering.
#[derive(Clone, Debug, PartialEq)]
pub struct MatchedSubject {
    pub crop: Tensor,
    pub shape: ShapeKind,
    pub color: SubjectColor,
    pub bbox: BoxNorm,
    /// The reference crop came from the target frame because matching failed.
    pub from_target: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchedSample {
    pub target: Tensor,
    pub background: Background,
    pub subjects: Vec<MatchedSubject>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub min_area: f64,
    pub max_area: f64,
    pub min_aspect: f64,
    pub max_aspect: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig { min_area: 0.02, max_area: 0.8, min_aspect: 0.2, max_aspect: 5.0 }
    }
}

impl FilterConfig {
    /// Closed intervals on both area and aspect ratio.
    pub fn keeps(&self, b: &BoxNorm) -> bool {
        let (area, aspect) = (b.area(), b.aspect());
        self.min_area <= area && area <= self.max_area && self.min_aspect <= aspect && aspect <= self.max_aspect
    }
}

/// `"a red circle and a blue square on a gray background"`.
pub fn caption_for(subjects: &[(SubjectColor, ShapeKind)], background: Background) -> String {
    if subjects.is_empty() {
        return format!("a {background} background");
    }
    let parts: Vec<String> = subjects.iter().map(|(c, s)| format!("a {c} {s}")).collect();
    format!("{} on a {background} background", parts.join(" and "))
}

/// Drop subjects that fail the box rules, then pad to four slots. `None`
/// when nothing survives.
pub fn filter_and_pad(
    sample: MatchedSample,
    filter: &FilterConfig,
    vocab: &Vocab,
    crop_size: usize,
) -> Result<Option<TrainingSample>> {
    let kept: Vec<MatchedSubject> =
        sample.subjects.into_iter().filter(|s| filter.keeps(&s.bbox)).take(MAX_SUBJECTS).collect();
    if kept.is_empty() {
        return Ok(None);
    }
    let mentions: Vec<_> = kept.iter().map(|s| (s.color, s.shape)).collect();
    let caption = caption_for(&mentions, sample.background);
    let caption_ids = vocab.encode(&caption)?;
    let mut subjects: Vec<SubjectSlot> = kept
        .into_iter()
        .map(|s| SubjectSlot { crop: s.crop, entity: vocab.shape_id(s.shape), bbox: s.bbox, is_pad: false })
        .collect();
    while subjects.len() < MAX_SUBJECTS {
        subjects.push(SubjectSlot::pad(vocab, crop_size));
    }
    Ok(Some(TrainingSample { target: sample.target, caption, caption_ids, subjects }))
}

/// Position of each subject's entity word in the caption: the k-th subject
/// with a given entity maps to the k-th occurrence of that word.
pub fn entity_positions(caption_ids: &[TokenId], entities: &[TokenId]) -> Vec<Option<usize>> {
    let mut used = vec![false; caption_ids.len()];
    entities
        .iter()
        .map(|e| {
            let pos = caption_ids.iter().enumerate().position(|(i, id)| id == e && !used[i]);
            if let Some(p) = pos {
                used[p] = true;
            }
            pos
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn subject(bbox: BoxNorm) -> MatchedSubject {
        MatchedSubject {
            crop: Tensor::full(vec![4, 4, 3], 0.5),
            shape: ShapeKind::Square,
            color: SubjectColor::Red,
            bbox,
            from_target: false,
        }
    }

    fn sample(boxes: &[BoxNorm]) -> MatchedSample {
        MatchedSample {
            target: Tensor::zeros(vec![8, 8, 3]),
            background: Background::Gray,
            subjects: boxes.iter().map(|b| subject(*b)).collect(),
        }
    }

    #[test]
    fn area_and_aspect_rules() {
        let f = FilterConfig::default();
        assert!(!f.keeps(&BoxNorm::new(0.0, 0.0, 0.1, 0.1).unwrap()));
        assert!(f.keeps(&BoxNorm::new(0.0, 0.0, 0.5, 0.1).unwrap()));
        assert!(f.keeps(&BoxNorm::new(0.0, 0.0, 0.1, 0.5).unwrap()));
        assert!(!f.keeps(&BoxNorm::new(0.0, 0.0, 0.6, 0.1).unwrap()));
        assert!(!f.keeps(&BoxNorm::FULL));
    }

    #[test]
    fn pads_after_survivors() {
        let vocab = Vocab::toy();
        let boxes = [BoxNorm::CENTER, BoxNorm::new(0.0, 0.0, 0.05, 0.05).unwrap(), BoxNorm::new(0.5, 0.5, 1.0, 1.0).unwrap()];
        let s = filter_and_pad(sample(&boxes), &FilterConfig::default(), &vocab, 4).unwrap().unwrap();
        assert_eq!(s.subjects.len(), 4);
        assert_eq!(s.subjects.iter().map(|x| x.is_pad).collect::<Vec<_>>(), vec![false, false, true, true]);
        assert_eq!(s.subjects[2].bbox, BoxNorm::FULL);
        assert_eq!(s.subjects[3].entity, vocab.pad());
        assert_eq!(s.caption, "a red square and a red square on a gray background");
        assert_eq!(entity_positions(&s.caption_ids, &[s.subjects[0].entity, s.subjects[1].entity]), vec![Some(2), Some(6)]);
    }

    #[test]
    fn nothing_survives() {
        let vocab = Vocab::toy();
        let tiny = BoxNorm::new(0.0, 0.0, 0.1, 0.1).unwrap();
        assert!(filter_and_pad(sample(&[tiny]), &FilterConfig::default(), &vocab, 4).unwrap().is_none());
    }
}
