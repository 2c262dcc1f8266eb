//! Training objective: dice loss with false-positive suppression on the
//! aligned attention map, per-class binary cross-entropy on logits, and their
//! unweighted sum.

use serde::{Deserialize, Serialize};

use crate::diffcore::{sigmoid, Grid};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiceFpConfig {
    pub alpha: f64,
    pub epsilon: f64,
    pub w_fp: f64,
}

impl Default for DiceFpConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            epsilon: 1e-6,
            w_fp: 2.0,
        }
    }
}

impl DiceFpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0) {
            return Err(Error::Config(format!("dice alpha must be >= 0, got {}", self.alpha)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "dice epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.w_fp >= 1.0) {
            return Err(Error::Config(format!("w_fp must be >= 1, got {}", self.w_fp)));
        }
        Ok(())
    }
}

/// Binary expert attention mask. Nonzero cells are the positive pixels.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTarget {
    mask: Grid,
}

impl AttentionTarget {
    pub fn new(mask: Grid) -> Result<Self> {
        if let Some(bad) = mask.as_slice().iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(Error::Domain(format!("mask entries must be 0 or 1, found {bad}")));
        }
        Ok(Self { mask })
    }

    pub fn from_bits(rows: usize, cols: usize, bits: &[bool]) -> Result<Self> {
        let data = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        Ok(Self {
            mask: Grid::from_vec(rows, cols, data)?,
        })
    }

    pub fn mask(&self) -> &Grid {
        &self.mask
    }

    pub fn shape(&self) -> (usize, usize) {
        self.mask.shape()
    }

    pub fn contains(&self, index: usize) -> bool {
        self.mask.as_slice()[index] != 0.0
    }

    pub fn count(&self) -> usize {
        self.mask.as_slice().iter().filter(|&&v| v != 0.0).count()
    }

    pub fn is_empty(&self) -> bool {
        self.count() == 0
    }

    /// Downsamples by max pooling over `factor × factor` blocks: a coarse cell
    /// is positive if any fine pixel under it is.
    pub fn max_pool(&self, factor: usize) -> Result<Self> {
        let (rows, cols) = self.shape();
        if factor == 0 || rows % factor != 0 || cols % factor != 0 {
            return Err(Error::Dimension(format!(
                "cannot pool {rows}x{cols} mask by factor {factor}"
            )));
        }
        let (out_r, out_c) = (rows / factor, cols / factor);
        let mut out = Grid::zeros(out_r, out_c);
        for r in 0..rows {
            for c in 0..cols {
                if self.mask.get(r, c) != 0.0 {
                    out.set(r / factor, c / factor, 1.0);
                }
            }
        }
        Ok(Self { mask: out })
    }
}

/// Dice loss with false-positive suppression, summed over every pixel of
/// the map:
///
/// ```text
/// loss = 1 − (2 ΣYP + α + ε) / (Σ(Y + P) + (w_fp − 1) Σ P(1 − Y) + α + ε)
/// ```
///
/// Returns the loss and `∂loss/∂P`. The caller must only pass positive
/// samples; an all-zero mask is rejected.
pub fn dice_fp_loss(target: &AttentionTarget, pred: &Grid, cfg: &DiceFpConfig) -> Result<(f64, Grid)> {
    if target.shape() != pred.shape() {
        return Err(Error::dimension("dice mask/prediction", target.shape(), pred.shape()));
    }
    if let Some(bad) = pred.as_slice().iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::Domain(format!("prediction entry {bad} outside [0, 1]")));
    }
    if target.is_empty() {
        return Err(Error::Precondition(
            "dice loss on an empty mask; negative samples must be skipped".into(),
        ));
    }
    let y = target.mask().as_slice();
    let p = pred.as_slice();
    let mut overlap = 0.0;
    let mut mass = 0.0;
    let mut false_pos = 0.0;
    for (&yi, &pi) in y.iter().zip(p) {
        overlap += yi * pi;
        mass += yi + pi;
        false_pos += pi * (1.0 - yi);
    }
    let smooth = cfg.alpha + cfg.epsilon;
    let num = 2.0 * overlap + smooth;
    let den = mass + (cfg.w_fp - 1.0) * false_pos + smooth;
    let loss = 1.0 - num / den;

    let den2 = den * den;
    let grad: Vec<f64> = y
        .iter()
        .map(|&yi| {
            let dnum = 2.0 * yi;
            let dden = 1.0 + (cfg.w_fp - 1.0) * (1.0 - yi);
            (num * dden - den * dnum) / den2
        })
        .collect();
    Ok((loss, Grid::from_vec(pred.rows(), pred.cols(), grad)?))
}

/// `ln(1 + e^z)` without overflow.
#[inline]
fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// Binary cross-entropy summed over classes, in logit form:
/// `Σ_c softplus(z_c) − y_c z_c`. Gradient is `σ(z) − y`.
pub fn cross_entropy(labels: &[bool], logits: &[f64]) -> Result<(f64, Vec<f64>)> {
    if labels.len() != logits.len() {
        return Err(Error::dimension(
            "cross-entropy labels/logits",
            (1, labels.len()),
            (1, logits.len()),
        ));
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&y, &z) in labels.iter().zip(logits) {
        let yf = if y { 1.0 } else { 0.0 };
        loss += softplus(z) - yf * z;
        grad.push(sigmoid(z) - yf);
    }
    Ok((loss, grad))
}

pub fn total_loss(ce: f64, al: f64) -> Result<f64> {
    if !ce.is_finite() || !al.is_finite() {
        return Err(Error::Evaluation(format!("non-finite loss term (ce={ce}, al={al})")));
    }
    Ok(ce + al)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::grad_check;
    use proptest::prelude::*;

    fn target(bits: &[u8], rows: usize, cols: usize) -> AttentionTarget {
        let b: Vec<bool> = bits.iter().map(|&v| v != 0).collect();
        AttentionTarget::from_bits(rows, cols, &b).unwrap()
    }

    fn pred(v: &[f64], rows: usize, cols: usize) -> Grid {
        Grid::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    #[test]
    fn dice_worked_examples() {
        let cfg = DiceFpConfig::default();
        let (l, _) = dice_fp_loss(&target(&[1, 1, 1, 1], 2, 2), &pred(&[1.0; 4], 2, 2), &cfg).unwrap();
        assert_eq!(l, 0.0);

        let (l, _) = dice_fp_loss(
            &target(&[1, 1, 0, 0], 2, 2),
            &pred(&[1.0, 0.0, 1.0, 0.0], 2, 2),
            &cfg,
        )
        .unwrap();
        assert!((l - (1.0 - 3.000001 / 6.000001)).abs() < 1e-12);
        assert!((l - 0.5).abs() < 1e-5);

        let (l, _) = dice_fp_loss(&target(&[1, 1, 0, 0], 2, 2), &pred(&[0.0; 4], 2, 2), &cfg).unwrap();
        assert!((l - (1.0 - 1.000001 / 3.000001)).abs() < 1e-12);
        assert!((l - 0.66667).abs() < 1e-5);
    }

    #[test]
    fn dice_errors() {
        let cfg = DiceFpConfig::default();
        let t = target(&[1, 0, 0, 0], 2, 2);
        assert!(matches!(
            dice_fp_loss(&t, &Grid::zeros(1, 4), &cfg),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            dice_fp_loss(&t, &pred(&[0.0, 1.2, 0.0, 0.0], 2, 2), &cfg),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            dice_fp_loss(&target(&[0, 0, 0, 0], 2, 2), &Grid::zeros(2, 2), &cfg),
            Err(Error::Precondition(_))
        ));
        assert!(AttentionTarget::new(pred(&[0.5, 0.0, 0.0, 1.0], 2, 2)).is_err());
    }

    #[test]
    fn max_pool_marks_any_covered_cell() {
        let mut bits = vec![0u8; 16];
        bits[5] = 1; // (1,1) -> coarse (0,0)
        bits[15] = 1; // (3,3) -> coarse (1,1)
        let pooled = target(&bits, 4, 4).max_pool(2).unwrap();
        assert_eq!(pooled.mask().as_slice(), &[1.0, 0.0, 0.0, 1.0]);
        assert!(target(&bits, 4, 4).max_pool(3).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let (l, g) = cross_entropy(&[true], &[0.0]).unwrap();
        assert!((l - 2f64.ln()).abs() < 1e-15);
        assert_eq!(g, vec![-0.5]);

        let z = 9f64.ln(); // p = 0.9
        let (l, _) = cross_entropy(&[true, false], &[z, -z]).unwrap();
        assert!((l - (-2.0 * 0.9f64.ln())).abs() < 1e-12);
        assert!((l - 0.21072).abs() < 1e-5);

        let (l, g) = cross_entropy(&[true], &[60.0]).unwrap();
        assert!(l <= 1e-20 && l >= 0.0 && g[0].is_finite());
        let (l, _) = cross_entropy(&[false], &[800.0]).unwrap();
        assert_eq!(l, 800.0);

        assert!(matches!(cross_entropy(&[true], &[0.0, 1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(0.5, 0.25).unwrap(), 0.75);
        assert_eq!(total_loss(1.234, 0.0).unwrap(), 1.234);
        let ce = 2f64.ln();
        let al = 1.0 - 3.000001 / 6.000001;
        assert!((total_loss(ce, al).unwrap() - 1.19315).abs() < 1e-5);
        assert!(total_loss(f64::NAN, 0.0).is_err());
    }

    fn masks_and_preds() -> impl Strategy<Value = (Vec<u8>, Vec<f64>)> {
        (1usize..40).prop_flat_map(|n| {
            (
                prop::collection::vec(0u8..2, n).prop_filter("nonempty mask", |m| m.iter().any(|&b| b == 1)),
                prop::collection::vec(0.0f64..=1.0, n),
            )
        })
    }

    proptest! {
        #[test]
        fn dice_bounded_in_unit_interval((m, p) in masks_and_preds(), w in 1.0f64..6.0) {
            let n = m.len();
            let cfg = DiceFpConfig { w_fp: w, ..Default::default() };
            let (l, _) = dice_fp_loss(&target(&m, 1, n), &pred(&p, 1, n), &cfg).unwrap();
            prop_assert!((0.0..=1.0).contains(&l));
        }

        #[test]
        fn dice_strictly_increasing_in_fp_weight((m, p) in masks_and_preds(), w in 1.0f64..4.0, dw in 0.01f64..3.0) {
            let n = m.len();
            let fp: f64 = m.iter().zip(&p).map(|(&y, &pi)| pi * (1.0 - y as f64)).sum();
            prop_assume!(fp > 1e-6);
            let t = target(&m, 1, n);
            let pg = pred(&p, 1, n);
            let lo = dice_fp_loss(&t, &pg, &DiceFpConfig { w_fp: w, ..Default::default() }).unwrap().0;
            let hi = dice_fp_loss(&t, &pg, &DiceFpConfig { w_fp: w + dw, ..Default::default() }).unwrap().0;
            prop_assert!(hi > lo);
        }

        #[test]
        fn dice_zero_iff_binary_prediction_matches(m in prop::collection::vec(0u8..2, 1..30), flip in any::<prop::sample::Index>()) {
            prop_assume!(m.iter().any(|&b| b == 1));
            let n = m.len();
            let t = target(&m, 1, n);
            let exact: Vec<f64> = m.iter().map(|&b| b as f64).collect();
            prop_assert_eq!(dice_fp_loss(&t, &pred(&exact, 1, n), &DiceFpConfig::default()).unwrap().0, 0.0);
            let mut off = exact.clone();
            let i = flip.index(n);
            off[i] = 1.0 - off[i];
            prop_assert!(dice_fp_loss(&t, &pred(&off, 1, n), &DiceFpConfig::default()).unwrap().0 > 0.0);
        }

        #[test]
        fn cross_entropy_nonnegative_with_exact_gradient(z in prop::collection::vec(-40.0f64..40.0, 1..6), seed in any::<u64>()) {
            let y: Vec<bool> = (0..z.len()).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            let (l, g) = cross_entropy(&y, &z).unwrap();
            prop_assert!(l >= 0.0);
            for ((gi, &zi), &yi) in g.iter().zip(&z).zip(&y) {
                prop_assert_eq!(*gi, sigmoid(zi) - if yi { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let (rows, cols) = (rng.random_range(2..7), rng.random_range(2..7));
            let n = rows * cols;
            let mut bits: Vec<bool> = (0..n).map(|_| rng.random_bool(0.4)).collect();
            bits[rng.random_range(0..n)] = true;
            let t = AttentionTarget::from_bits(rows, cols, &bits).unwrap();
            // keep probes inside [0, 1]
            let p: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.99)).collect();
            let cfg = DiceFpConfig {
                w_fp: rng.random_range(1.0..4.0),
                ..Default::default()
            };
            let (_, grad) = dice_fp_loss(&t, &pred(&p, rows, cols), &cfg).unwrap();
            let f = |q: &[f64]| dice_fp_loss(&t, &pred(q, rows, cols), &cfg).unwrap().0;
            let err = grad_check(f, grad.as_slice(), &p, 1e-5).unwrap();
            assert!(err <= 1e-4, "relative error {err}");
        }
    }
}
