//! Bounding boxes and overlap scoring.
//!
//! [`NormBox`] is the canonical form everywhere inside the toolkit: corner
//! coordinates as fractions of the page width/height. [`PromptBox`] is the
//! `[x, y, w, h]` thousandths convention models are asked to answer in, and
//! only exists at the prompt/parse boundary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized corner form, `0 <= x1 <= x2 <= 1` and
/// `0 <= y1 <= y2 <= 1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct NormBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl NormBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let ok = [x1, y1, x2, y2].iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v))
            && x1 <= x2
            && y1 <= y2;
        if ok {
            Ok(Self { x1, y1, x2, y2 })
        } else {
            Err(Error::validation(format!(
                "invalid normalized box [{x1}, {y1}, {x2}, {y2}]"
            )))
        }
    }

    /// Builds a box from two arbitrary corner estimates, ordering each axis
    /// and clamping into the unit square. Non-finite values map to 0.
    pub fn from_unordered(a: f64, b: f64, c: f64, d: f64) -> Self {
        let fix = |v: f64| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
        let (a, b, c, d) = (fix(a), fix(b), fix(c), fix(d));
        Self {
            x1: a.min(c),
            y1: b.min(d),
            x2: a.max(c),
            y2: b.max(d),
        }
    }

    pub fn full_page() -> Self {
        Self {
            x1: 0.0,
            y1: 0.0,
            x2: 1.0,
            y2: 1.0,
        }
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }
    pub fn y1(&self) -> f64 {
        self.y1
    }
    pub fn x2(&self) -> f64 {
        self.x2
    }
    pub fn y2(&self) -> f64 {
        self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center_y(&self) -> f64 {
        0.5 * (self.y1 + self.y2)
    }

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// True when `other` lies entirely inside `self`.
    pub fn contains(&self, other: &NormBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn intersection_area(&self, other: &NormBox) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }
}

impl TryFrom<[f64; 4]> for NormBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        NormBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<NormBox> for [f64; 4] {
    fn from(b: NormBox) -> Self {
        b.to_array()
    }
}

/// `[x, y, w, h]` in page thousandths, top-left origin.
///
/// Fields are signed so raw, possibly out-of-range values read from a model
/// response or a corpus file can be carried to [`from_prompt_box`], which
/// clamps them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(from = "[i64; 4]", into = "[i64; 4]")]
pub struct PromptBox {
    pub x: i64,
    pub y: i64,
    pub w: i64,
    pub h: i64,
}

pub const PROMPT_SCALE: i64 = 1000;

impl PromptBox {
    pub const fn new(x: i64, y: i64, w: i64, h: i64) -> Self {
        Self { x, y, w, h }
    }

    pub fn in_range(&self) -> bool {
        let r = 0..=PROMPT_SCALE;
        r.contains(&self.x)
            && r.contains(&self.y)
            && r.contains(&self.w)
            && r.contains(&self.h)
            && self.x + self.w <= PROMPT_SCALE
            && self.y + self.h <= PROMPT_SCALE
    }
}

impl From<[i64; 4]> for PromptBox {
    fn from(v: [i64; 4]) -> Self {
        PromptBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<PromptBox> for [i64; 4] {
    fn from(b: PromptBox) -> Self {
        [b.x, b.y, b.w, b.h]
    }
}

impl std::fmt::Display for PromptBox {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}, {}, {}]", self.x, self.y, self.w, self.h)
    }
}

/// Result of converting a [`PromptBox`]; `clamped` is set when any input had
/// to be pulled back into the page.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Converted {
    pub bbox: NormBox,
    pub clamped: bool,
}

pub fn from_prompt_box(pb: PromptBox) -> Converted {
    let scale = PROMPT_SCALE;
    let x1 = pb.x.clamp(0, scale);
    let y1 = pb.y.clamp(0, scale);
    let x2 = pb.x.saturating_add(pb.w).clamp(x1, scale);
    let y2 = pb.y.saturating_add(pb.h).clamp(y1, scale);
    let clamped = !pb.in_range();
    let s = scale as f64;
    Converted {
        bbox: NormBox {
            x1: x1 as f64 / s,
            y1: y1 as f64 / s,
            x2: x2 as f64 / s,
            y2: y2 as f64 / s,
        },
        clamped,
    }
}

/// Round half up, the one rounding rule used at the prompt boundary.
pub fn round_half_up(v: f64) -> i64 {
    (v + 0.5).floor() as i64
}

pub fn to_prompt_box(nb: &NormBox) -> PromptBox {
    let s = PROMPT_SCALE as f64;
    PromptBox {
        x: round_half_up(s * nb.x1),
        y: round_half_up(s * nb.y1),
        w: round_half_up(s * (nb.x2 - nb.x1)),
        h: round_half_up(s * (nb.y2 - nb.y1)),
    }
}

/// Intersection over union. Two boxes whose union has zero area score 0.
pub fn iou(a: &NormBox, b: &NormBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Smallest box enclosing every input.
pub fn union_box(boxes: &[NormBox]) -> Result<NormBox> {
    let (first, rest) = boxes
        .split_first()
        .ok_or_else(|| Error::config("union_box called with no boxes"))?;
    Ok(rest.iter().fold(*first, |acc, b| NormBox {
        x1: acc.x1.min(b.x1),
        y1: acc.y1.min(b.y1),
        x2: acc.x2.max(b.x2),
        y2: acc.y2.max(b.y2),
    }))
}

/// Mean IoU over `(prediction, ground truth)` pairs. A missing prediction
/// counts as 0; an empty list scores 0.
pub fn mean_iou<'a, I>(pairs: I) -> f64
where
    I: IntoIterator<Item = (Option<&'a NormBox>, &'a NormBox)>,
{
    let (sum, n) = pairs.into_iter().fold((0.0, 0usize), |(s, n), (p, g)| {
        (s + p.map_or(0.0, |p| iou(p, g)), n + 1)
    });
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn nb(x1: f64, y1: f64, x2: f64, y2: f64) -> NormBox {
        NormBox::new(x1, y1, x2, y2).unwrap()
    }

    #[test]
    fn prompt_box_conversion_examples() {
        let c = from_prompt_box(PromptBox::new(100, 50, 200, 30));
        assert_eq!(c.bbox, nb(0.1, 0.05, 0.3, 0.08));
        assert!(!c.clamped);

        let c = from_prompt_box(PromptBox::new(0, 0, 1000, 1000));
        assert_eq!(c.bbox, NormBox::full_page());
        assert!(!c.clamped);

        let c = from_prompt_box(PromptBox::new(990, 990, 50, 50));
        assert_eq!(c.bbox, nb(0.99, 0.99, 1.0, 1.0));
        assert!(c.clamped);
    }

    #[test]
    fn negative_and_inverted_inputs_clamp_to_valid_box() {
        let c = from_prompt_box(PromptBox::new(-20, 1200, -5, 3));
        assert!(c.clamped);
        assert_eq!(c.bbox, nb(0.0, 1.0, 0.0, 1.0));
    }

    #[test]
    fn to_prompt_box_examples() {
        assert_eq!(to_prompt_box(&nb(0.1, 0.05, 0.3, 0.08)), PromptBox::new(100, 50, 200, 30));
        assert_eq!(to_prompt_box(&nb(0.0, 0.0, 0.0, 0.0)), PromptBox::new(0, 0, 0, 0));
        assert_eq!(
            to_prompt_box(&nb(0.0004, 0.0004, 0.0006, 0.0006)),
            PromptBox::new(0, 0, 0, 0)
        );
        assert_eq!(round_half_up(0.5), 1);
        assert_eq!(round_half_up(2.5), 3);
        assert_eq!(round_half_up(-0.5), 0);
    }

    #[test]
    fn iou_examples() {
        let a = nb(0.1, 0.1, 0.5, 0.5);
        assert_eq!(iou(&a, &a), 1.0);
        assert_eq!(iou(&nb(0.0, 0.0, 0.2, 0.2), &nb(0.5, 0.5, 0.9, 0.9)), 0.0);
        let third = iou(&nb(0.0, 0.0, 0.2, 0.2), &nb(0.1, 0.0, 0.3, 0.2));
        assert!((third - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_union_scores_zero() {
        let p = nb(0.3, 0.3, 0.3, 0.3);
        assert_eq!(iou(&p, &p), 0.0);
    }

    #[test]
    fn union_box_examples() {
        let a = nb(0.1, 0.1, 0.2, 0.2);
        assert_eq!(union_box(&[a]).unwrap(), a);
        assert_eq!(
            union_box(&[a, nb(0.3, 0.1, 0.4, 0.2)]).unwrap(),
            nb(0.1, 0.1, 0.4, 0.2)
        );
        assert_eq!(
            union_box(&[NormBox::full_page(), nb(0.4, 0.4, 0.5, 0.5)]).unwrap(),
            NormBox::full_page()
        );
        assert!(matches!(union_box(&[]), Err(Error::Config(_))));
    }

    #[test]
    fn mean_iou_examples() {
        let gt = nb(0.2, 0.2, 0.4, 0.4);
        assert_eq!(mean_iou([(Some(&gt), &gt), (None, &gt)]), 0.5);
        assert_eq!(mean_iou(std::iter::empty()), 0.0);
        let a = nb(0.0, 0.0, 0.2, 0.2);
        let b = nb(0.1, 0.0, 0.3, 0.2);
        assert!((mean_iou([(Some(&a), &b)]) - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_invalid_boxes() {
        assert!(NormBox::new(0.5, 0.0, 0.4, 1.0).is_err());
        assert!(NormBox::new(0.0, 0.0, 1.1, 1.0).is_err());
        assert!(NormBox::new(f64::NAN, 0.0, 0.5, 1.0).is_err());
        assert!(serde_json::from_str::<NormBox>("[0.2, 0.2, 0.1, 0.3]").is_err());
    }

    fn arb_box() -> impl Strategy<Value = NormBox> {
        (0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64, 0.0..=1.0f64)
            .prop_map(|(a, b, c, d)| NormBox::from_unordered(a, b, c, d))
    }

    proptest! {
        #[test]
        fn union_contains_inputs(boxes in prop::collection::vec(arb_box(), 1..8)) {
            let u = union_box(&boxes).unwrap();
            for b in &boxes {
                prop_assert!(u.contains(b));
            }
        }

        #[test]
        fn mean_iou_permutation_invariant(
            pairs in prop::collection::vec((arb_box(), arb_box()), 0..12),
            rot in 0usize..12,
        ) {
            let fwd: Vec<_> = pairs.iter().map(|(p, g)| (Some(p), g)).collect();
            let mut shuffled = fwd.clone();
            if !shuffled.is_empty() {
                let k = rot % shuffled.len();
                shuffled.rotate_left(k);
                shuffled.reverse();
            }
            let a = mean_iou(fwd);
            let b = mean_iou(shuffled);
            prop_assert!((a - b).abs() < 1e-12);
        }

        #[test]
        fn prompt_round_trip_in_range(x in 0i64..=1000, y in 0i64..=1000, w in 0i64..=1000, h in 0i64..=1000) {
            let pb = PromptBox::new(x, y, w.min(1000 - x), h.min(1000 - y));
            let c = from_prompt_box(pb);
            prop_assert!(!c.clamped);
            prop_assert_eq!(to_prompt_box(&c.bbox), pb);
        }
    }
}
