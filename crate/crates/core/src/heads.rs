//! Task heads on top of the hub representation.
//!
//! Retrieval uses a one-hidden-layer MLP that maps the hub vector into the
//! candidate embedding space; training pushes the cosine of the generated
//! vector to the ground-truth candidate above every negative by a margin.
//! The classification head is a single affine map to two logits.

use crate::math::layers::{softmax, softmax_cross_entropy, tanh_backward, tanh_forward};
use crate::math::{Affine, AffineGrads, MathError, SeedStream, Vector};
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HeadError {
    DimMismatch { what: &'static str, expected: usize, got: usize },
    /// A zero vector has no cosine direction.
    ZeroNorm,
    EmptyCandidates,
    BadIndex { index: usize, len: usize },
    BadMargin,
    Math(MathError),
}

impl fmt::Display for HeadError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            HeadError::DimMismatch { what, expected, got } => {
                write!(f, "{what}: expected dim {expected}, got {got}")
            }
            HeadError::ZeroNorm => write!(f, "zero-norm embedding in cosine"),
            HeadError::EmptyCandidates => write!(f, "empty candidate list"),
            HeadError::BadIndex { index, len } => {
                write!(f, "index {index} out of range for {len} candidates")
            }
            HeadError::BadMargin => write!(f, "margin must be finite and non-negative"),
            HeadError::Math(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for HeadError {}

impl From<MathError> for HeadError {
    fn from(e: MathError) -> Self {
        HeadError::Math(e)
    }
}

// ── Retrieval head ──────────────────────────────────────────────────────────

/// `g = W2 tanh(W1 h + b1) + b2`, mapping hub space to candidate space.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalHead {
    hidden: Affine,
    output: Affine,
}

#[derive(Debug, Clone)]
pub struct RetrievalCache {
    input: Vector,
    hidden_act: Vector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalHeadGrads {
    pub hidden: AffineGrads,
    pub output: AffineGrads,
}

impl RetrievalHeadGrads {
    pub fn scale(&mut self, alpha: f64) {
        self.hidden.scale(alpha);
        self.output.scale(alpha);
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        self.hidden.flatten_into(out);
        self.output.flatten_into(out);
    }
}

impl RetrievalHead {
    pub fn init(hub_dim: usize, hidden_dim: usize, out_dim: usize, seeds: &SeedStream) -> Self {
        let head = seeds.substream("retrieval-head");
        RetrievalHead {
            hidden: Affine::init(hidden_dim, hub_dim, &head.substream("hidden")),
            output: Affine::init(out_dim, hidden_dim, &head.substream("output")),
        }
    }

    pub fn from_parts(hidden: Affine, output: Affine) -> Result<Self, HeadError> {
        if output.in_dim() != hidden.out_dim() {
            return Err(HeadError::DimMismatch {
                what: "retrieval head output layer",
                expected: hidden.out_dim(),
                got: output.in_dim(),
            });
        }
        Ok(RetrievalHead { hidden, output })
    }

    pub fn hidden(&self) -> &Affine {
        &self.hidden
    }

    pub fn output(&self) -> &Affine {
        &self.output
    }

    pub fn hub_dim(&self) -> usize {
        self.hidden.in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.output.out_dim()
    }

    pub fn forward(&self, hub: &[f64]) -> Result<(Vector, RetrievalCache), HeadError> {
        if hub.len() != self.hub_dim() {
            return Err(HeadError::DimMismatch {
                what: "retrieval head input",
                expected: self.hub_dim(),
                got: hub.len(),
            });
        }
        let hidden_act = tanh_forward(&self.hidden.forward(hub)?);
        let out = self.output.forward(&hidden_act)?;
        Ok((out, RetrievalCache { input: Vector::from_vec(hub.to_vec()), hidden_act }))
    }

    /// Accumulates parameter gradients and returns the hub gradient.
    pub fn backward(
        &self,
        grad_out: &[f64],
        cache: &RetrievalCache,
        grads: &mut RetrievalHeadGrads,
    ) -> Result<Vector, HeadError> {
        let grad_hidden_act =
            self.output.backward_into(&cache.hidden_act, grad_out, &mut grads.output)?;
        let grad_hidden_pre = tanh_backward(&cache.hidden_act, &grad_hidden_act);
        Ok(self.hidden.backward_into(&cache.input, &grad_hidden_pre, &mut grads.hidden)?)
    }

    pub fn grads_like(&self) -> RetrievalHeadGrads {
        RetrievalHeadGrads { hidden: self.hidden.grads_like(), output: self.output.grads_like() }
    }

    pub fn param_count(&self) -> usize {
        self.hidden.param_count() + self.output.param_count()
    }

    pub fn flatten_into(&self, out: &mut Vec<f64>) {
        self.hidden.flatten_into(out);
        self.output.flatten_into(out);
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.flatten_into(&mut out);
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<(), HeadError> {
        if flat.len() != self.param_count() {
            return Err(HeadError::Math(MathError::ShapeMismatch {
                left: self.param_count(),
                right: flat.len(),
            }));
        }
        let at = self.hidden.unflatten_from(flat)?;
        self.output.unflatten_from(&flat[at..])?;
        Ok(())
    }
}

// ── Classification head ─────────────────────────────────────────────────────

/// Single affine layer producing two logits: class 0 original, class 1 foiled.
#[derive(Debug, Clone, PartialEq)]
pub struct FoilHead {
    output: Affine,
}

impl FoilHead {
    pub const CLASSES: usize = 2;

    pub fn init(hub_dim: usize, seeds: &SeedStream) -> Self {
        FoilHead { output: Affine::init(Self::CLASSES, hub_dim, &seeds.substream("foil-head")) }
    }

    pub fn from_parts(output: Affine) -> Result<Self, HeadError> {
        if output.out_dim() != Self::CLASSES {
            return Err(HeadError::DimMismatch {
                what: "classifier logits",
                expected: Self::CLASSES,
                got: output.out_dim(),
            });
        }
        Ok(FoilHead { output })
    }

    pub fn output(&self) -> &Affine {
        &self.output
    }

    pub fn hub_dim(&self) -> usize {
        self.output.in_dim()
    }

    pub fn logits(&self, hub: &[f64]) -> Result<Vector, HeadError> {
        if hub.len() != self.hub_dim() {
            return Err(HeadError::DimMismatch {
                what: "classifier input",
                expected: self.hub_dim(),
                got: hub.len(),
            });
        }
        Ok(self.output.forward(hub)?)
    }

    pub fn probabilities(&self, hub: &[f64]) -> Result<Vector, HeadError> {
        Ok(softmax(&self.logits(hub)?))
    }

    /// Predicted class (ties go to class 0) and class probabilities.
    pub fn predict(&self, hub: &[f64]) -> Result<(usize, Vector), HeadError> {
        let logits = self.logits(hub)?;
        let predicted = if logits[1] > logits[0] { 1 } else { 0 };
        Ok((predicted, softmax(&logits)))
    }

    /// Cross-entropy loss and its logit gradient for one datapoint.
    pub fn loss(&self, hub: &[f64], class: usize) -> Result<(f64, Vector), HeadError> {
        let logits = self.logits(hub)?;
        Ok(softmax_cross_entropy(&logits, class)?)
    }

    /// Accumulates parameter gradients and returns the hub gradient.
    pub fn backward(
        &self,
        grad_logits: &[f64],
        hub: &[f64],
        grads: &mut AffineGrads,
    ) -> Result<Vector, HeadError> {
        Ok(self.output.backward_into(hub, grad_logits, grads)?)
    }

    pub fn grads_like(&self) -> AffineGrads {
        self.output.grads_like()
    }

    pub fn param_count(&self) -> usize {
        self.output.param_count()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.output.flatten_into(&mut out);
        out
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<(), HeadError> {
        if flat.len() != self.param_count() {
            return Err(HeadError::Math(MathError::ShapeMismatch {
                left: self.param_count(),
                right: flat.len(),
            }));
        }
        self.output.unflatten_from(flat)?;
        Ok(())
    }
}

// ── Margin loss and ranking ─────────────────────────────────────────────────

/// How per-negative hinge terms combine into one loss value.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Aggregation {
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossConfig {
    pub margin: f64,
    pub aggregation: Aggregation,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { margin: 0.1, aggregation: Aggregation::Mean }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), HeadError> {
        if !self.margin.is_finite() || self.margin < 0.0 {
            return Err(HeadError::BadMargin);
        }
        Ok(())
    }
}

/// Cosine and its gradient with respect to the first argument.
fn cosine_with_grad(g: &[f64], e: &[f64]) -> Result<(f64, Vec<f64>), HeadError> {
    if g.len() != e.len() {
        return Err(HeadError::DimMismatch { what: "cosine operand", expected: g.len(), got: e.len() });
    }
    let mut dot = 0.0;
    let mut ng = 0.0;
    let mut ne = 0.0;
    for i in 0..g.len() {
        dot += g[i] * e[i];
        ng += g[i] * g[i];
        ne += e[i] * e[i];
    }
    if ng == 0.0 || ne == 0.0 {
        return Err(HeadError::ZeroNorm);
    }
    let (ng, ne) = (ng.sqrt(), ne.sqrt());
    let cos = dot / (ng * ne);
    let grad = (0..g.len()).map(|i| e[i] / (ng * ne) - cos * g[i] / (ng * ng)).collect();
    Ok((cos, grad))
}

/// Hinge margin loss over a candidate list.
///
/// For every non-ground-truth candidate `e`, adds
/// `max(0, margin + cos(g, e) - cos(g, e_gt))`; terms are aggregated by sum
/// or mean over the negatives. Returns the loss and its gradient on `g`.
pub fn retrieval_loss(
    g: &[f64],
    candidates: &[Vector],
    gt_index: usize,
    config: &LossConfig,
) -> Result<(f64, Vector), HeadError> {
    config.validate()?;
    if candidates.is_empty() {
        return Err(HeadError::EmptyCandidates);
    }
    if gt_index >= candidates.len() {
        return Err(HeadError::BadIndex { index: gt_index, len: candidates.len() });
    }
    let (cos_gt, grad_cos_gt) = cosine_with_grad(g, &candidates[gt_index])?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; g.len()];
    for (i, candidate) in candidates.iter().enumerate() {
        if i == gt_index {
            continue;
        }
        let (cos_neg, grad_cos_neg) = cosine_with_grad(g, candidate)?;
        let hinge = config.margin + cos_neg - cos_gt;
        if hinge > 0.0 {
            loss += hinge;
            for j in 0..grad.len() {
                grad[j] += grad_cos_neg[j] - grad_cos_gt[j];
            }
        }
    }
    if config.aggregation == Aggregation::Mean && candidates.len() > 1 {
        let inv = 1.0 / (candidates.len() - 1) as f64;
        loss *= inv;
        for gj in grad.iter_mut() {
            *gj *= inv;
        }
    }
    Ok((loss, Vector::from_vec(grad)))
}

/// Result of ranking a candidate list against a generated embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct Ranking {
    /// Candidate indices from best to worst (ties broken by lower index).
    pub order: Vec<usize>,
    /// 1-based position of the ground truth in `order`.
    pub rank_of_gt: usize,
    pub reciprocal_rank: f64,
}

impl Ranking {
    /// 1 when the ground truth sits inside the top `k`, else 0.
    pub fn precision_at(&self, k: usize) -> f64 {
        if self.rank_of_gt <= k {
            1.0
        } else {
            0.0
        }
    }
}

/// Ranks candidates by descending cosine to `g`.
pub fn rank_candidates(
    g: &[f64],
    candidates: &[Vector],
    gt_index: usize,
) -> Result<Ranking, HeadError> {
    if candidates.is_empty() {
        return Err(HeadError::EmptyCandidates);
    }
    if gt_index >= candidates.len() {
        return Err(HeadError::BadIndex { index: gt_index, len: candidates.len() });
    }
    let mut scored = Vec::with_capacity(candidates.len());
    for (i, candidate) in candidates.iter().enumerate() {
        let (cos, _) = cosine_with_grad(g, candidate)?;
        scored.push((i, cos));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).expect("cosines are finite").then(a.0.cmp(&b.0)));
    let order: Vec<usize> = scored.iter().map(|&(i, _)| i).collect();
    let rank_of_gt = order.iter().position(|&i| i == gt_index).unwrap() + 1;
    Ok(Ranking { order, rank_of_gt, reciprocal_rank: 1.0 / rank_of_gt as f64 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::math::gradcheck::{grad_check, GradCheckConfig};
    use rand::Rng;

    fn vecs(rows: &[&[f64]]) -> Vec<Vector> {
        rows.iter().map(|r| Vector::from_vec(r.to_vec())).collect()
    }

    #[test]
    fn loss_zero_when_gt_clearly_wins() {
        // cos(g, gt) = 1, cos(g, neg) = 0: hinge 0.1 + 0 - 1 clips to zero
        let candidates = vecs(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let (loss, grad) =
            retrieval_loss(&[1.0, 0.0], &candidates, 0, &LossConfig::default()).unwrap();
        assert_eq!(loss, 0.0);
        assert!(grad.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn loss_hand_value_when_negative_wins() {
        // cos(g, gt) = 0, cos(g, neg) = 1: hinge is 0.1 + 1 - 0
        let candidates = vecs(&[&[0.0, 1.0], &[1.0, 0.0]]);
        let (loss, _) =
            retrieval_loss(&[1.0, 0.0], &candidates, 0, &LossConfig::default()).unwrap();
        assert!((loss - 1.1).abs() < 1e-15);
    }

    #[test]
    fn mean_vs_sum_aggregation() {
        let candidates = vecs(&[&[0.0, 1.0], &[1.0, 0.0], &[0.8, 0.6]]);
        let mean_cfg = LossConfig { margin: 0.1, aggregation: Aggregation::Mean };
        let sum_cfg = LossConfig { margin: 0.1, aggregation: Aggregation::Sum };
        let (mean_loss, mean_grad) = retrieval_loss(&[1.0, 0.0], &candidates, 0, &mean_cfg).unwrap();
        let (sum_loss, sum_grad) = retrieval_loss(&[1.0, 0.0], &candidates, 0, &sum_cfg).unwrap();
        assert!((sum_loss - 2.0 * mean_loss).abs() < 1e-12);
        for (s, m) in sum_grad.iter().zip(mean_grad.iter()) {
            assert!((s - 2.0 * m).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_errors() {
        let candidates = vecs(&[&[1.0, 0.0], &[0.0, 0.0]]);
        assert_eq!(
            retrieval_loss(&[1.0, 0.0], &candidates, 0, &LossConfig::default()).unwrap_err(),
            HeadError::ZeroNorm
        );
        assert_eq!(
            retrieval_loss(&[1.0, 0.0], &[], 0, &LossConfig::default()).unwrap_err(),
            HeadError::EmptyCandidates
        );
        assert_eq!(
            retrieval_loss(&[1.0, 0.0], &vecs(&[&[1.0, 0.0]]), 3, &LossConfig::default())
                .unwrap_err(),
            HeadError::BadIndex { index: 3, len: 1 }
        );
        let bad = LossConfig { margin: -0.1, aggregation: Aggregation::Mean };
        assert_eq!(
            retrieval_loss(&[1.0, 0.0], &vecs(&[&[1.0, 0.0]]), 0, &bad).unwrap_err(),
            HeadError::BadMargin
        );
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        // all hinges comfortably active or inactive, away from the kink
        let g = [0.6, 0.8, -0.2];
        let candidates = vecs(&[&[1.0, 0.1, 0.0], &[0.0, 1.0, 0.3], &[-0.3, 0.5, 0.9]]);
        for config in [
            LossConfig::default(),
            LossConfig { margin: 0.25, aggregation: Aggregation::Sum },
        ] {
            let (_, analytic) = retrieval_loss(&g, &candidates, 0, &config).unwrap();
            let mut f =
                |p: &[f64]| retrieval_loss(p, &candidates, 0, &config).unwrap().0;
            let err = grad_check(&mut f, &g, &analytic, &GradCheckConfig::default());
            assert!(err < 1e-7, "worst relative error {err}");
        }
    }

    #[test]
    fn ranking_orders_and_breaks_ties_by_index() {
        // candidate 0 and 1 tie at cosine 1; tie goes to index 0
        let candidates = vecs(&[&[2.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let ranking = rank_candidates(&[1.0, 0.0], &candidates, 1).unwrap();
        assert_eq!(ranking.order, vec![0, 1, 2]);
        assert_eq!(ranking.rank_of_gt, 2);
        assert_eq!(ranking.precision_at(1), 0.0);
        assert_eq!(ranking.precision_at(2), 1.0);
        assert!((ranking.reciprocal_rank - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ranking_rejects_bad_input() {
        assert_eq!(
            rank_candidates(&[1.0, 0.0], &[], 0).unwrap_err(),
            HeadError::EmptyCandidates
        );
        let candidates = vecs(&[&[1.0, 0.0]]);
        assert_eq!(
            rank_candidates(&[0.0, 0.0], &candidates, 0).unwrap_err(),
            HeadError::ZeroNorm
        );
        assert_eq!(
            rank_candidates(&[1.0, 0.0], &candidates, 1).unwrap_err(),
            HeadError::BadIndex { index: 1, len: 1 }
        );
    }

    #[test]
    fn retrieval_head_gradients_match_finite_differences() {
        let seeds = SeedStream::new(41);
        let head = RetrievalHead::init(5, 4, 3, &seeds);
        let mut rng = seeds.substream("data").rng();
        let hub: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let weights: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();

        let (out, cache) = head.forward(&hub).unwrap();
        assert_eq!(out.dim(), 3);
        let mut grads = head.grads_like();
        head.backward(&weights, &cache, &mut grads).unwrap();
        let mut analytic = Vec::new();
        grads.flatten_into(&mut analytic);

        let params = head.to_flat();
        let mut f = |flat: &[f64]| {
            let mut probe = head.clone();
            probe.load_flat(flat).unwrap();
            let (out, _) = probe.forward(&hub).unwrap();
            out.iter().zip(weights.iter()).map(|(o, w)| o * w).sum::<f64>()
        };
        let err = grad_check(&mut f, &params, &analytic, &GradCheckConfig::default());
        assert!(err < 1e-6, "worst relative error {err}");
    }

    #[test]
    fn retrieval_head_hub_gradient_matches_finite_differences() {
        let seeds = SeedStream::new(43);
        let head = RetrievalHead::init(4, 3, 2, &seeds);
        let mut rng = seeds.substream("data").rng();
        let hub: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let weights = [0.3, -0.9];

        let (_, cache) = head.forward(&hub).unwrap();
        let mut grads = head.grads_like();
        let grad_hub = head.backward(&weights, &cache, &mut grads).unwrap();
        let mut f = |h: &[f64]| {
            let (out, _) = head.forward(h).unwrap();
            out.iter().zip(weights.iter()).map(|(o, w)| o * w).sum::<f64>()
        };
        let err = grad_check(&mut f, &hub, grad_hub.as_slice(), &GradCheckConfig::default());
        assert!(err < 1e-6, "worst relative error {err}");
    }

    #[test]
    fn foil_head_gradients_match_finite_differences() {
        let seeds = SeedStream::new(47);
        let head = FoilHead::init(6, &seeds);
        let mut rng = seeds.substream("data").rng();
        let hub: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();

        let (_, grad_logits) = head.loss(&hub, 1).unwrap();
        let mut grads = head.grads_like();
        head.backward(&grad_logits, &hub, &mut grads).unwrap();
        let mut analytic = Vec::new();
        grads.flatten_into(&mut analytic);

        let params = head.to_flat();
        let mut f = |flat: &[f64]| {
            let mut probe = head.clone();
            probe.load_flat(flat).unwrap();
            probe.loss(&hub, 1).unwrap().0
        };
        let err = grad_check(&mut f, &params, &analytic, &GradCheckConfig::default());
        assert!(err < 1e-6, "worst relative error {err}");
    }

    #[test]
    fn foil_head_prediction_ties_go_to_class_zero() {
        let head = FoilHead::from_parts(Affine::zeros(2, 3)).unwrap();
        let (predicted, probs) = head.predict(&[0.5, -0.5, 1.0]).unwrap();
        assert_eq!(predicted, 0);
        assert_eq!(probs[0], 0.5);
        assert_eq!(probs[1], 0.5);
    }

    #[test]
    fn head_init_is_seed_deterministic() {
        let a = RetrievalHead::init(4, 3, 2, &SeedStream::new(1));
        let b = RetrievalHead::init(4, 3, 2, &SeedStream::new(1));
        assert_eq!(a, b);
        let c = FoilHead::init(4, &SeedStream::new(1));
        let d = FoilHead::init(4, &SeedStream::new(1));
        assert_eq!(c, d);
        // encoder and head draws must not alias even with the same root
        let enc = crate::encoder::init_encoder(
            crate::encoder::EncoderDims { visual: 4, language: 4, projected: 4, hidden: 4 },
            true,
            &SeedStream::new(1),
        )
        .unwrap();
        assert_ne!(&enc.to_flat()[..8], &a.to_flat()[..8]);
    }
}
