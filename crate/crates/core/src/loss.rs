//! Cross-entropy, Lovász-softmax, entropy and the weighted loss composition.
//!
//! Per-term losses take logits laid out row-major (`N × C`) and return the
//! gradient with respect to those logits alongside the value. Rows whose
//! target is [`IGNORE`] contribute nothing.

use crate::config::{KeyValues, KvWriter};
use crate::{ClassId, Error, Result, IGNORE};

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let mut out = logits.to_vec();
    softmax_inplace(&mut out);
    out
}

/// Max-subtracted softmax.
pub fn softmax_inplace(v: &mut [f64]) {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    for x in v.iter_mut() {
        *x /= z;
    }
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
    logits.iter().map(|x| x - lse).collect()
}

/// `-log softmax(logits)[target]`; zero for [`IGNORE`].
pub fn cross_entropy(logits: &[f64], target: ClassId) -> f64 {
    if target == IGNORE {
        return 0.0;
    }
    -log_softmax(logits)[target as usize]
}

/// Entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(probs: &[f64]) -> f64 {
    -probs.iter().filter(|&&p| p > 0.0).map(|p| p * p.ln()).sum::<f64>()
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Gradient of the Lovász extension of the Jaccard loss with respect to
/// sorted errors, given foreground indicators in the same order.
pub fn lovasz_grad(gt_sorted: &[bool]) -> Vec<f64> {
    let gts = gt_sorted.iter().filter(|&&g| g).count() as f64;
    let mut jac = Vec::with_capacity(gt_sorted.len());
    let (mut inter_cum, mut union_cum) = (0.0, 0.0);
    for &g in gt_sorted {
        if g {
            inter_cum += 1.0;
        } else {
            union_cum += 1.0;
        }
        let inter = gts - inter_cum;
        let union = gts + union_cum;
        jac.push(1.0 - inter / union);
    }
    for i in (1..jac.len()).rev() {
        jac[i] -= jac[i - 1];
    }
    jac
}

/// Lovász-softmax over `N × C` probabilities, averaged over the classes
/// present in `targets`. Returns the value and `∂/∂probs`.
pub fn lovasz_softmax_grad(probs: &[f64], targets: &[ClassId], classes: usize) -> (f64, Vec<f64>) {
    let mut grad = vec![0.0; probs.len()];
    let valid: Vec<usize> = (0..targets.len()).filter(|&i| targets[i] != IGNORE).collect();
    let mut present = 0usize;
    let mut total = 0.0;
    let mut per_class: Vec<(Vec<usize>, Vec<f64>, Vec<bool>)> = Vec::new();
    for c in 0..classes {
        if !valid.iter().any(|&i| targets[i] as usize == c) {
            continue;
        }
        present += 1;
        let mut order: Vec<(usize, f64, bool)> = valid
            .iter()
            .map(|&i| {
                let fg = targets[i] as usize == c;
                let p = probs[i * classes + c];
                (i, if fg { 1.0 - p } else { p }, fg)
            })
            .collect();
        order.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        let gt_sorted: Vec<bool> = order.iter().map(|o| o.2).collect();
        let g = lovasz_grad(&gt_sorted);
        total += order.iter().zip(&g).map(|(o, gi)| o.1 * gi).sum::<f64>();
        per_class.push((order.iter().map(|o| o.0 * classes + c).collect(), g, gt_sorted));
    }
    if present == 0 {
        return (0.0, grad);
    }
    let scale = 1.0 / present as f64;
    for (idx, g, fg) in per_class {
        for ((i, gi), f) in idx.into_iter().zip(g).zip(fg) {
            grad[i] += if f { -gi } else { gi } * scale;
        }
    }
    (total * scale, grad)
}

pub fn lovasz_softmax(probs: &[f64], targets: &[ClassId], classes: usize) -> f64 {
    lovasz_softmax_grad(probs, targets, classes).0
}

#[derive(Debug, Clone, PartialEq)]
pub struct TermLoss {
    /// `μ·CE + ν·Lovász`.
    pub value: f64,
    pub ce: f64,
    pub lovasz: f64,
    /// Gradient of `value` with respect to the input logits.
    pub grad: Vec<f64>,
}

/// `μ · mean CE + ν · Lovász-softmax` over `N × C` logits.
pub fn term_loss(logits: &[f64], targets: &[ClassId], classes: usize, mu: f64, nu: f64) -> TermLoss {
    let n = targets.len();
    assert_eq!(logits.len(), n * classes, "logits must be N x C");
    let mut probs = logits.to_vec();
    for row in probs.chunks_exact_mut(classes) {
        softmax_inplace(row);
    }
    let n_valid = targets.iter().filter(|&&t| t != IGNORE).count();
    let mut grad = vec![0.0; logits.len()];
    if n_valid == 0 {
        return TermLoss { value: 0.0, ce: 0.0, lovasz: 0.0, grad };
    }
    let inv = 1.0 / n_valid as f64;
    let mut ce = 0.0;
    for (i, &t) in targets.iter().enumerate() {
        if t == IGNORE {
            continue;
        }
        let row = &logits[i * classes..(i + 1) * classes];
        ce += cross_entropy(row, t);
        let g = &mut grad[i * classes..(i + 1) * classes];
        for (c, gc) in g.iter_mut().enumerate() {
            let onehot = if c == t as usize { 1.0 } else { 0.0 };
            *gc = mu * inv * (probs[i * classes + c] - onehot);
        }
    }
    ce *= inv;
    let (lovasz, gp) = lovasz_softmax_grad(&probs, targets, classes);
    if nu != 0.0 {
        // chain through softmax: dl = p ⊙ (gp - <gp, p>)
        for i in 0..n {
            let p = &probs[i * classes..(i + 1) * classes];
            let q = &gp[i * classes..(i + 1) * classes];
            let inner: f64 = p.iter().zip(q).map(|(a, b)| a * b).sum();
            for c in 0..classes {
                grad[i * classes + c] += nu * p[c] * (q[c] - inner);
            }
        }
    }
    TermLoss { value: mu * ce + nu * lovasz, ce, lovasz, grad }
}

/// Loss-composition weights and the γ schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma0: f64,
    pub lambda: f64,
    pub mu: f64,
    pub nu: f64,
    /// Segment acceptance threshold, nats.
    pub entropy_threshold: f64,
    pub epochs: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { beta: 0.5, gamma0: 1.0, lambda: 0.1, mu: 3.0, nu: 1.0, entropy_threshold: 1.6, epochs: 10 }
    }
}

impl LossWeights {
    /// `γ0 · max(0, 1 − e/E)`.
    pub fn gamma(&self, epoch: usize) -> f64 {
        self.gamma0 * (1.0 - epoch as f64 / self.epochs as f64).max(0.0)
    }

    pub fn total(&self, vox: f64, nerf3d: f64, nerf2d: f64, epoch: usize) -> f64 {
        self.beta * vox + self.gamma(epoch) * nerf3d + self.lambda * nerf2d
    }

    pub fn validate(&self) -> Result<()> {
        let w = [self.beta, self.gamma0, self.lambda, self.mu, self.nu, self.entropy_threshold];
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::config("loss weights and entropy threshold must be finite and >= 0"));
        }
        if self.epochs == 0 {
            return Err(Error::config("epochs must be >= 1"));
        }
        Ok(())
    }

    pub fn from_kv(kv: &mut KeyValues) -> Result<Self> {
        let d = LossWeights::default();
        let w = LossWeights {
            beta: kv.take_or("beta", d.beta)?,
            gamma0: kv.take_or("gamma0", d.gamma0)?,
            lambda: kv.take_or("lambda", d.lambda)?,
            mu: kv.take_or("mu", d.mu)?,
            nu: kv.take_or("nu", d.nu)?,
            entropy_threshold: kv.take_or("entropy_threshold", d.entropy_threshold)?,
            epochs: kv.take_or("epochs", d.epochs)?,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn write_kv(&self, w: &mut KvWriter) {
        w.put("beta", self.beta)
            .put("gamma0", self.gamma0)
            .put("lambda", self.lambda)
            .put("mu", self.mu)
            .put("nu", self.nu)
            .put("entropy_threshold", self.entropy_threshold)
            .put("epochs", self.epochs);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_cases() {
        assert!(cross_entropy(&[50.0, -50.0], 0).abs() < 1e-12);
        assert!((cross_entropy(&[0.3, 0.3], 1) - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(cross_entropy(&[1.0, 2.0], IGNORE), 0.0);
    }

    #[test]
    fn entropy_cases() {
        assert_eq!(entropy(&[0.0, 1.0, 0.0]), 0.0);
        assert!((entropy(&[0.25; 4]) - 4f64.ln()).abs() < 1e-15);
        // -(0.7 ln 0.7 + 0.2 ln 0.2 + 0.1 ln 0.1)
        let oracle = -(0.7f64 * 0.7f64.ln() + 0.2 * 0.2f64.ln() + 0.1 * 0.1f64.ln());
        assert!((entropy(&[0.7, 0.2, 0.1]) - oracle).abs() < 1e-15);
        assert!((oracle - 0.801819).abs() < 1e-6);
    }

    #[test]
    fn gamma_schedule() {
        let w = LossWeights::default();
        assert_eq!(w.gamma(0), 1.0);
        assert_eq!(w.gamma(5), 0.5);
        assert_eq!(w.gamma(10), 0.0);
        assert_eq!(w.gamma(12), 0.0);
        assert!((w.total(1.0, 1.0, 1.0, 0) - 1.6).abs() < 1e-15);
        assert_eq!(w.total(0.0, 1.0, 0.0, 10), 0.0);
    }

    #[test]
    fn lovasz_hand_example() {
        // 4 pixels, foreground = {0, 1}; hard prediction: 0 fg (correct),
        // 1 bg (missed), 2 fg (false positive), 3 bg.
        let fg = [1.0, 0.0, 1.0, 0.0];
        let probs: Vec<f64> = fg.iter().flat_map(|&p| [1.0 - p, p]).collect();
        let targets = [1, 1, 0, 0];
        // class 1: intersection 1, union 3 -> 1 - 1/3; class 0 likewise
        let (v, _) = lovasz_softmax_grad(&probs, &targets, 2);
        assert!((v - 2.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_predictions_have_zero_lovasz() {
        let probs = [1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        assert_eq!(lovasz_softmax(&probs, &[0, 1, 2], 3), 0.0);
    }

    #[test]
    fn term_loss_ignores_ignored_rows() {
        let logits = [1.0, -1.0, 0.5, 0.2];
        let a = term_loss(&logits, &[0, IGNORE], 2, 3.0, 1.0);
        let b = term_loss(&logits[..2], &[0], 2, 3.0, 1.0);
        assert!((a.value - b.value).abs() < 1e-15);
        assert_eq!(&a.grad[2..], &[0.0, 0.0]);
        let none = term_loss(&logits, &[IGNORE, IGNORE], 2, 3.0, 1.0);
        assert_eq!(none.value, 0.0);
        assert!(none.grad.iter().all(|&g| g == 0.0));
    }
}
