//! Training losses (focal, dice) and IoU evaluation.

use crate::error::{Error, Result};
use crate::mask_ops::MaskStack;
use crate::numerics::Tensor;
use crate::scalar::Scalar;

/// Dice smoothing term; keeps empty channels away from 0/0.
pub const DICE_EPS: f64 = 1e-6;
/// Probability floor inside the focal-loss log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-class focal weights and the focusing exponent.
#[derive(Clone, Debug)]
pub struct ClassWeights<F: Scalar> {
    pub alpha: Vec<F>,
    pub gamma: F,
}

impl<F: Scalar> ClassWeights<F> {
    pub fn uniform(n_classes: usize) -> Self {
        ClassWeights {
            alpha: vec![F::one(); n_classes],
            gamma: F::of_f64(2.0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.alpha.iter().all(|a| a.is_finite() && *a > F::zero())
            && self.gamma.is_finite()
            && self.gamma >= F::zero();
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig {
                what: "class weights",
                why: "alpha must be positive and finite, gamma non-negative".into(),
            })
        }
    }
}

/// Focal loss value plus the count of exactly-zero probabilities that hit
/// the log floor (an event worth surfacing in training logs).
pub struct FocalLossValue<F: Scalar> {
    pub loss: Tensor<F>,
    pub clamped: usize,
}

/// Mean over valid samples of `−α_t (1−p_t)^γ ln(p_t)`, `p_t` being the
/// probability of the true class. Differentiable through `probs`.
pub fn focal_loss<F: Scalar>(
    probs: &Tensor<F>,
    targets: &[usize],
    weights: &ClassWeights<F>,
    valid: &[bool],
) -> Result<FocalLossValue<F>> {
    weights.validate()?;
    let shape = probs.shape().to_vec();
    if shape.len() != 2 || targets.len() != shape[0] || valid.len() != shape[0] {
        return Err(Error::ShapeMismatch {
            op: "focal_loss",
            lhs: shape,
            rhs: vec![targets.len(), valid.len()],
        });
    }
    let (m, c) = (shape[0], shape[1]);
    if weights.alpha.len() != c {
        return Err(Error::ShapeMismatch {
            op: "focal_loss",
            lhs: vec![c],
            rhs: vec![weights.alpha.len()],
        });
    }
    let tol = F::of_f64(1e-6);
    for r in 0..m {
        let row_sum = probs.data()[r * c..(r + 1) * c]
            .iter()
            .fold(F::zero(), |acc, v| acc + *v);
        if (row_sum - F::one()).abs() > tol {
            return Err(Error::InvalidConfig {
                what: "focal_loss probabilities",
                why: format!("row {r} sums to {row_sum}"),
            });
        }
        if targets[r] >= c {
            return Err(Error::ClassOutOfRange {
                class: targets[r],
                len: c,
            });
        }
    }

    let n_valid = valid.iter().filter(|v| **v).count();
    if n_valid == 0 {
        return Ok(FocalLossValue {
            loss: Tensor::zeros(&[1]),
            clamped: 0,
        });
    }

    let p_t = probs.take_per_row(targets)?;
    let clamped = p_t
        .data()
        .iter()
        .zip(valid.iter())
        .filter(|(p, v)| **v && **p == F::zero())
        .count();
    let log_p = p_t.clamp_min(F::of_f64(PROB_FLOOR))?.ln()?;
    // the focus base is clamped at zero so resampling overshoot past p=1
    // cannot feed a negative base into a fractional power
    let focus = p_t
        .neg()?
        .add_scalar(F::one())?
        .clamp_min(F::zero())?
        .powf(weights.gamma)?;
    let term = focus.mul(&log_p)?.neg()?;
    // fold α_t, validity and the mean into one row weighting
    let inv_n = F::one() / F::of_f64(n_valid as f64);
    let row_weights: Vec<F> = targets
        .iter()
        .zip(valid.iter())
        .map(|(&t, &v)| if v { weights.alpha[t] * inv_n } else { F::zero() })
        .collect();
    let loss = term.scale_rows(&row_weights)?.sum()?;
    Ok(FocalLossValue { loss, clamped })
}

/// Inverse-relative-frequency alphas, normalized to mean 1. Classes with a
/// zero count fall back to a count of 1, which hands them the largest alpha.
pub fn alpha_from_frequencies<F: Scalar>(class_counts: &[u64]) -> Result<Vec<F>> {
    if class_counts.is_empty() || class_counts.iter().all(|&c| c == 0) {
        return Err(Error::InvalidConfig {
            what: "class counts",
            why: "need at least one positive count".into(),
        });
    }
    let total: f64 = class_counts.iter().map(|&c| c as f64).sum();
    let k = class_counts.len() as f64;
    let raw: Vec<f64> = class_counts
        .iter()
        .map(|&c| total / (k * (c.max(1) as f64)))
        .collect();
    let mean: f64 = raw.iter().sum::<f64>() / k;
    Ok(raw.iter().map(|a| F::of_f64(a / mean)).collect())
}

/// Channel-averaged dice loss `1 − (2Σpg + ε)/(Σp + Σg + ε)` over
/// pixel-major `(H·W)×C` matrices. Differentiable through `pred`.
pub fn dice_loss<F: Scalar>(pred: &Tensor<F>, gt: &Tensor<F>) -> Result<Tensor<F>> {
    if pred.shape() != gt.shape() || pred.shape().len() != 2 {
        return Err(Error::ShapeMismatch {
            op: "dice_loss",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    // tolerate a few ulp of overshoot from resampling arithmetic
    let slack = F::of_f64(1e-9);
    if pred
        .data()
        .iter()
        .any(|v| *v < -slack || *v > F::one() + slack)
    {
        return Err(Error::InvalidConfig {
            what: "dice_loss predictions",
            why: "values outside [0,1]".into(),
        });
    }
    let eps = F::of_f64(DICE_EPS);
    let overlap = pred.mul(gt)?.sum_cols()?;
    let numerator = overlap.scale(F::of_f64(2.0))?.add_scalar(eps)?;
    let denominator = pred.sum_cols()?.add(&gt.sum_cols()?)?.add_scalar(eps)?;
    let ratio = numerator.div(&denominator)?;
    ratio.mean()?.neg()?.add_scalar(F::one())
}

/// Which classes a mean IoU covers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ClassSubset {
    /// Every class.
    All,
    /// Object classes only (background and water excluded).
    Targets,
    /// The water channel only.
    Drivable,
}

impl ClassSubset {
    pub fn contains(&self, class: usize, n_classes: usize) -> bool {
        match self {
            ClassSubset::All => true,
            ClassSubset::Targets => class != 0 && class != n_classes - 1,
            ClassSubset::Drivable => class == n_classes - 1,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(ClassSubset::All),
            "targets" => Ok(ClassSubset::Targets),
            "drivable" => Ok(ClassSubset::Drivable),
            other => Err(Error::InvalidConfig {
                what: "class subset",
                why: format!("unknown subset `{other}`"),
            }),
        }
    }
}

/// Dataset-level IoU state: intersections and per-side counts accumulate
/// over scenes and merge associatively, so evaluation can be sharded.
#[derive(Clone, Debug, PartialEq)]
pub struct IouAccumulator {
    pub n_classes: usize,
    intersection: Vec<u64>,
    pred_count: Vec<u64>,
    gt_count: Vec<u64>,
}

impl IouAccumulator {
    pub fn new(n_classes: usize) -> Self {
        IouAccumulator {
            n_classes,
            intersection: vec![0; n_classes],
            pred_count: vec![0; n_classes],
            gt_count: vec![0; n_classes],
        }
    }

    pub fn update(&mut self, pred: &[usize], gt: &[usize]) {
        debug_assert_eq!(pred.len(), gt.len());
        for (&p, &g) in pred.iter().zip(gt.iter()) {
            self.pred_count[p] += 1;
            self.gt_count[g] += 1;
            if p == g {
                self.intersection[p] += 1;
            }
        }
    }

    pub fn merge(&mut self, other: &IouAccumulator) {
        debug_assert_eq!(self.n_classes, other.n_classes);
        for c in 0..self.n_classes {
            self.intersection[c] += other.intersection[c];
            self.pred_count[c] += other.pred_count[c];
            self.gt_count[c] += other.gt_count[c];
        }
    }

    /// Per-class IoU; None when the class is absent from both prediction and
    /// ground truth.
    pub fn class_iou(&self) -> Vec<Option<f64>> {
        (0..self.n_classes)
            .map(|c| {
                let union = self.pred_count[c] + self.gt_count[c] - self.intersection[c];
                if union == 0 {
                    None
                } else {
                    Some(self.intersection[c] as f64 / union as f64)
                }
            })
            .collect()
    }

    /// Mean IoU over the subset, excluding absent classes. None when every
    /// subset class is absent.
    pub fn mean_iou(&self, subset: ClassSubset) -> Option<f64> {
        let ious = self.class_iou();
        let mut sum = 0.0;
        let mut count = 0usize;
        for (c, iou) in ious.iter().enumerate() {
            if subset.contains(c, self.n_classes) {
                if let Some(v) = iou {
                    sum += v;
                    count += 1;
                }
            }
        }
        if count == 0 {
            None
        } else {
            Some(sum / count as f64)
        }
    }
}

/// Dataset-of-one convenience: IoU of a predicted stack against ground
/// truth, both argmaxed.
pub fn miou<F: Scalar>(
    pred: &MaskStack<F>,
    gt: &MaskStack<F>,
    subset: ClassSubset,
) -> Result<(Vec<Option<f64>>, Option<f64>)> {
    pred.same_layout(gt)?;
    let mut acc = IouAccumulator::new(pred.n_classes());
    acc.update(&pred.argmax_map(), &gt.argmax_map());
    Ok((acc.class_iou(), acc.mean_iou(subset)))
}

fn fmt_iou(iou: &Option<f64>) -> String {
    match iou {
        Some(v) => format!("{v:.4}"),
        None => "absent".to_string(),
    }
}

/// Human-readable per-class IoU table with summary means.
pub fn format_iou_table(
    legend: &[String],
    ious: &[Option<f64>],
    means: &[(&str, Option<f64>)],
) -> String {
    let name_w = legend.iter().map(|n| n.len()).max().unwrap_or(5).max(5);
    let mut out = String::new();
    out.push_str(&format!("{:<name_w$}  IoU\n", "class"));
    for (name, iou) in legend.iter().zip(ious.iter()) {
        out.push_str(&format!("{name:<name_w$}  {}\n", fmt_iou(iou)));
    }
    for (label, value) in means {
        out.push_str(&format!("{label:<name_w$}  {}\n", fmt_iou(value)));
    }
    out
}

/// Machine-readable evaluation records, one line per class plus one per
/// summary mean.
pub fn format_iou_records(
    legend: &[String],
    ious: &[Option<f64>],
    means: &[(&str, Option<f64>)],
) -> String {
    let mut out = String::new();
    for (name, iou) in legend.iter().zip(ious.iter()) {
        match iou {
            Some(v) => out.push_str(&format!("class={name} iou={v}\n")),
            None => out.push_str(&format!("class={name} iou=absent\n")),
        }
    }
    for (label, value) in means {
        match value {
            Some(v) => out.push_str(&format!("mean={label} miou={v}\n")),
            None => out.push_str(&format!("mean={label} miou=absent\n")),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probs_of(rows: &[&[f64]]) -> Tensor<f64> {
        let c = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Tensor::from_vec(&[rows.len(), c], data).unwrap()
    }

    #[test]
    fn focal_loss_is_zero_for_perfect_predictions() {
        let probs = probs_of(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let w = ClassWeights::uniform(2);
        let out = focal_loss(&probs, &[0, 1], &w, &[true, true]).unwrap();
        assert_eq!(out.loss.item(), 0.0);
    }

    #[test]
    fn focal_with_gamma_zero_reduces_to_cross_entropy() {
        let probs = probs_of(&[&[0.5, 0.5]]);
        let w = ClassWeights {
            alpha: vec![1.0, 1.0],
            gamma: 0.0,
        };
        let out = focal_loss(&probs, &[0], &w, &[true]).unwrap();
        assert!((out.loss.item() - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn focal_hand_value_gamma_two() {
        let probs = probs_of(&[&[0.9, 0.1]]);
        let w = ClassWeights {
            alpha: vec![1.0, 1.0],
            gamma: 2.0,
        };
        let out = focal_loss(&probs, &[0], &w, &[true]).unwrap();
        let expect = -(0.1f64.powi(2)) * 0.9f64.ln();
        assert!((out.loss.item() - expect).abs() < 1e-9);
    }

    #[test]
    fn focal_counts_exact_zero_probabilities() {
        let probs = probs_of(&[&[0.0, 1.0], &[0.3, 0.7]]);
        let w = ClassWeights::uniform(2);
        let out = focal_loss(&probs, &[0, 1], &w, &[true, true]).unwrap();
        assert_eq!(out.clamped, 1);
        assert!(out.loss.item().is_finite());
    }

    #[test]
    fn focal_excludes_invalid_rows() {
        let probs = probs_of(&[&[0.9, 0.1], &[0.5, 0.5]]);
        let w = ClassWeights::uniform(2);
        let with = focal_loss(&probs, &[0, 0], &w, &[true, false]).unwrap();
        let only_first = focal_loss(&probs_of(&[&[0.9, 0.1]]), &[0], &w, &[true]).unwrap();
        assert!((with.loss.item() - only_first.loss.item()).abs() < 1e-15);
    }

    #[test]
    fn alpha_uniform_counts_give_unit_weights() {
        let a: Vec<f64> = alpha_from_frequencies(&[10, 10, 10]).unwrap();
        for v in a {
            assert!((v - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn alpha_inverse_frequency_hand_value() {
        let a: Vec<f64> = alpha_from_frequencies(&[90, 10]).unwrap();
        assert!((a[0] - 0.2).abs() < 1e-12);
        assert!((a[1] - 1.8).abs() < 1e-12);
    }

    #[test]
    fn alpha_zero_count_class_gets_the_largest_weight() {
        let a: Vec<f64> = alpha_from_frequencies(&[50, 0, 10]).unwrap();
        assert!(a[1] > a[0] && a[1] > a[2]);
        assert!(alpha_from_frequencies::<f64>(&[0, 0]).is_err());
    }

    #[test]
    fn dice_perfect_and_disjoint() {
        let gt = probs_of(&[&[1.0], &[1.0], &[0.0], &[0.0]]);
        let loss = dice_loss(&gt, &gt).unwrap().item();
        assert!(loss.abs() < 1e-6);

        let pred = probs_of(&[&[0.0], &[0.0], &[1.0], &[1.0]]);
        let loss = dice_loss(&pred, &gt).unwrap().item();
        assert!((loss - 1.0).abs() < 1e-6);
    }

    #[test]
    fn dice_hand_value_half_overlap() {
        // pred all 0.5, gt half ones on a 2×2 channel → 1 − 2/4 = 0.5
        let pred = probs_of(&[&[0.5], &[0.5], &[0.5], &[0.5]]);
        let gt = probs_of(&[&[1.0], &[1.0], &[0.0], &[0.0]]);
        let loss = dice_loss(&pred, &gt).unwrap().item();
        assert!((loss - 0.5).abs() < 1e-6);
    }

    #[test]
    fn dice_decreases_toward_ground_truth() {
        let gt = probs_of(&[&[1.0], &[0.0], &[1.0], &[0.0]]);
        let mut last = f64::INFINITY;
        for t in [0.0, 0.25, 0.5, 0.75, 1.0] {
            let pred_data: Vec<f64> = gt.data().iter().map(|&g| 0.5 + t * (g - 0.5)).collect();
            let pred = Tensor::from_vec(&[4, 1], pred_data).unwrap();
            let loss = dice_loss(&pred, &gt).unwrap().item();
            assert!(loss < last);
            last = loss;
        }
    }

    fn stack_from(legend: &[&str], h: usize, w: usize, planes: &[f64]) -> MaskStack<f64> {
        MaskStack::from_planes(
            legend.iter().map(|s| s.to_string()).collect(),
            h,
            w,
            planes.to_vec(),
        )
        .unwrap()
    }

    #[test]
    fn miou_perfect_match_is_one() {
        let gt = stack_from(
            &["background", "boat", "water"],
            2,
            2,
            &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 1.0],
        );
        let (ious, mean) = miou(&gt, &gt, ClassSubset::All).unwrap();
        assert!(ious.iter().all(|i| i.unwrap() == 1.0));
        assert_eq!(mean, Some(1.0));
    }

    #[test]
    fn miou_half_overlap_is_one_third() {
        // two equal squares overlapping half their area
        let mut acc = IouAccumulator::new(2);
        // 4 pixels: gt square = pixels {0,1}, pred square = pixels {1,2}
        acc.update(&[0, 1, 1, 0], &[1, 1, 0, 0]);
        let iou = acc.class_iou()[1].unwrap();
        assert!((iou - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn miou_excludes_classes_absent_from_both() {
        let mut acc = IouAccumulator::new(3);
        acc.update(&[0, 0, 1], &[0, 1, 1]);
        let ious = acc.class_iou();
        assert!(ious[2].is_none());
        let mean = acc.mean_iou(ClassSubset::All).unwrap();
        let expect = (1.0 / 2.0 + 1.0 / 2.0) / 2.0;
        assert!((mean - expect).abs() < 1e-12);
    }

    #[test]
    fn miou_subsets_pick_their_classes() {
        let mut acc = IouAccumulator::new(4);
        acc.update(&[0, 1, 2, 3], &[0, 1, 1, 3]);
        let t = acc.mean_iou(ClassSubset::Targets).unwrap();
        let ious = acc.class_iou();
        let expect = (ious[1].unwrap() + ious[2].unwrap()) / 2.0;
        assert!((t - expect).abs() < 1e-12);
        assert_eq!(acc.mean_iou(ClassSubset::Drivable), ious[3]);
    }

    #[test]
    fn miou_is_permutation_invariant_over_pixels() {
        use rand::{seq::SliceRandom, RngExt, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        let pred: Vec<usize> = (0..60).map(|_| rng.random_range(0..4)).collect();
        let gt: Vec<usize> = (0..60).map(|_| rng.random_range(0..4)).collect();
        let mut acc = IouAccumulator::new(4);
        acc.update(&pred, &gt);
        let mut paired: Vec<(usize, usize)> = pred.into_iter().zip(gt).collect();
        paired.shuffle(&mut rng);
        let mut shuffled = IouAccumulator::new(4);
        let (p2, g2): (Vec<usize>, Vec<usize>) = paired.into_iter().unzip();
        shuffled.update(&p2, &g2);
        assert_eq!(acc, shuffled);
    }

    #[test]
    fn accumulator_merge_is_associative_and_order_free() {
        let mut a = IouAccumulator::new(2);
        a.update(&[0, 1], &[1, 1]);
        let mut b = IouAccumulator::new(2);
        b.update(&[1, 1], &[1, 0]);
        let mut ab = a.clone();
        ab.merge(&b);
        let mut ba = b.clone();
        ba.merge(&a);
        assert_eq!(ab, ba);
    }
}
