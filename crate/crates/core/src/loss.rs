//! Pairwise hinge ranking loss over a mini-batch, with the efficient
//! all-pairs gradient and the naive pairwise oracle used to prove it.
//!
//! The efficient route forwards every batch image once, reduces all active
//! pairs to one output-gradient coefficient per sample at the loss layer, and
//! runs a single backward pass. The naive route forwards both members of
//! every comparable pair independently, which is what a traditional
//! two-branch implementation pays: `n^2 - n` passes for one group of `n`
//! levels versus `n`.
//!
//! Sign convention: for an active pair the derivative of
//! `max(0, y_lo - y_hi + margin)` is -1 toward the higher-ranked score and
//! +1 toward the lower-ranked one. Finite differences arbitrate this; see the
//! gradcheck tests.

use crate::error::{Error, Result};
use crate::gradcheck::ScoreLoss;
use crate::net::{backward, backward_into, forward, NetworkSpec, ParameterStore};
use crate::tensor::Tensor;

/// Pairwise order labels for one mini-batch: entry `(i, j)` is +1 when sample
/// `i` is known higher quality than `j`, -1 for lower, 0 when the pair is not
/// comparable (different distortion kind or reference image). Antisymmetric
/// with a zero diagonal by construction. Carries the hinge margin.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparabilityMatrix {
    m: usize,
    labels: Vec<i8>,
    margin: f32,
}

impl ComparabilityMatrix {
    pub fn new(m: usize, margin: f32) -> Result<ComparabilityMatrix> {
        if !(margin > 0.0) || !margin.is_finite() {
            return Err(Error::Config(format!("margin must be positive, got {margin}")));
        }
        Ok(ComparabilityMatrix {
            m,
            labels: vec![0; m * m],
            margin,
        })
    }

    /// Builds labels from per-sample `(group, level)` tags: two samples are
    /// comparable exactly when they share a group and differ in level, and
    /// the lower level index is the higher-quality side.
    pub fn from_sample_groups(samples: &[(usize, usize)], margin: f32) -> Result<ComparabilityMatrix> {
        let mut mat = ComparabilityMatrix::new(samples.len(), margin)?;
        for i in 0..samples.len() {
            for j in (i + 1)..samples.len() {
                let (gi, li) = samples[i];
                let (gj, lj) = samples[j];
                if gi == gj && li != lj {
                    mat.set_label(i, j, if li < lj { 1 } else { -1 })?;
                }
            }
        }
        Ok(mat)
    }

    pub fn set_label(&mut self, i: usize, j: usize, label: i8) -> Result<()> {
        if i >= self.m || j >= self.m {
            return Err(Error::Shape(format!(
                "pair ({i}, {j}) out of range for batch of {}",
                self.m
            )));
        }
        if !(-1..=1).contains(&label) {
            return Err(Error::Config(format!("label must be in {{-1, 0, 1}}, got {label}")));
        }
        if i == j {
            return Err(Error::Config("diagonal labels must stay zero".into()));
        }
        self.labels[i * self.m + j] = label;
        self.labels[j * self.m + i] = -label;
        Ok(())
    }

    pub fn label(&self, i: usize, j: usize) -> i8 {
        self.labels[i * self.m + j]
    }

    pub fn size(&self) -> usize {
        self.m
    }

    pub fn margin(&self) -> f32 {
        self.margin
    }

    /// Upper-triangle comparable pairs as `(i, j, l_ij)` with `j > i`.
    pub fn comparable_pairs(&self) -> impl Iterator<Item = (usize, usize, i8)> + '_ {
        (0..self.m).flat_map(move |i| {
            ((i + 1)..self.m).filter_map(move |j| {
                let l = self.labels[i * self.m + j];
                (l != 0).then_some((i, j, l))
            })
        })
    }

    pub fn comparable_pair_count(&self) -> usize {
        self.comparable_pairs().count()
    }
}

/// Hinge ranking loss for one pair, `max(0, y_lo - y_hi + margin)`, where
/// `y_hi` scores the image known to be of higher quality.
pub fn hinge_pair_loss(y_hi: f32, y_lo: f32, margin: f32) -> Result<f32> {
    if !(margin > 0.0) || !margin.is_finite() {
        return Err(Error::Config(format!("margin must be positive, got {margin}")));
    }
    Ok((y_lo - y_hi + margin).max(0.0))
}

/// Whether a pair contributes gradient: false when incomparable or when the
/// scores already satisfy the margin (the hinge sits at or below zero, which
/// takes the zero subgradient).
pub fn pair_active(y_i: f32, y_j: f32, l_ij: i8, margin: f32) -> bool {
    l_ij != 0 && (l_ij as f32) * (y_j - y_i) + margin > 0.0
}

fn check_scores(scores: &[f32], labels: &ComparabilityMatrix) -> Result<()> {
    if scores.len() != labels.size() {
        return Err(Error::Shape(format!(
            "{} scores for a {}-sample comparability matrix",
            scores.len(),
            labels.size()
        )));
    }
    Ok(())
}

/// Sum of hinge losses over all comparable pairs (`j > i`).
///
/// The hinge for each pair is evaluated in f32 exactly as the coefficient
/// routine sees it, so the loss is zero iff the coefficient vector is zero;
/// the accumulation runs in f64.
pub fn batch_loss(scores: &[f32], labels: &ComparabilityMatrix) -> Result<f64> {
    check_scores(scores, labels)?;
    let mut total = 0.0f64;
    for (i, j, l) in labels.comparable_pairs() {
        let (hi, lo) = if l > 0 { (i, j) } else { (j, i) };
        let hinge = scores[lo] - scores[hi] + labels.margin();
        if hinge > 0.0 {
            total += hinge as f64;
        }
    }
    Ok(total)
}

/// Per-sample output-gradient coefficients: the row sums of the active-pair
/// derivative matrix. Feeding these to `backward` after a single batched
/// forward yields the full mini-batch gradient in exactly `M` passes.
#[derive(Debug, Clone, PartialEq)]
pub struct PairCoefficients {
    per_sample: Vec<f32>,
    active_pairs: usize,
}

impl PairCoefficients {
    pub fn per_sample(&self) -> &[f32] {
        &self.per_sample
    }

    pub fn active_pairs(&self) -> usize {
        self.active_pairs
    }

    pub fn is_zero(&self) -> bool {
        self.active_pairs == 0
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.per_sample
    }
}

/// Builds the coefficient vector in O(M^2) scalar work without materializing
/// the pair matrix: each active pair pushes -1 onto its higher-ranked sample
/// and +1 onto its lower-ranked one.
pub fn output_gradient_coefficients(scores: &[f32], labels: &ComparabilityMatrix) -> Result<PairCoefficients> {
    check_scores(scores, labels)?;
    let mut c = vec![0.0f32; scores.len()];
    let mut active = 0usize;
    for (i, j, l) in labels.comparable_pairs() {
        let (hi, lo) = if l > 0 { (i, j) } else { (j, i) };
        if scores[lo] - scores[hi] + labels.margin() > 0.0 {
            c[hi] -= 1.0;
            c[lo] += 1.0;
            active += 1;
        }
    }
    Ok(PairCoefficients {
        per_sample: c,
        active_pairs: active,
    })
}

/// Dense M x M matrix of active-pair derivatives, entry `(i, j)` being the
/// derivative of the pair loss with respect to score `i`. Expository: the
/// training path only ever builds the row sums.
pub fn dense_pair_matrix(scores: &[f32], labels: &ComparabilityMatrix) -> Result<Vec<f32>> {
    check_scores(scores, labels)?;
    let m = labels.size();
    let mut p = vec![0.0f32; m * m];
    for (i, j, l) in labels.comparable_pairs() {
        let (hi, lo) = if l > 0 { (i, j) } else { (j, i) };
        if scores[lo] - scores[hi] + labels.margin() > 0.0 {
            p[hi * m + lo] = -1.0;
            p[lo * m + hi] = 1.0;
        }
    }
    Ok(p)
}

/// Ranking batch loss as a [`ScoreLoss`] for gradient checking.
pub struct RankingScoreLoss<'a> {
    pub labels: &'a ComparabilityMatrix,
}

impl ScoreLoss for RankingScoreLoss<'_> {
    fn loss(&self, scores: &[f64]) -> f64 {
        let margin = self.labels.margin() as f64;
        let mut total = 0.0;
        for (i, j, l) in self.labels.comparable_pairs() {
            let (hi, lo) = if l > 0 { (i, j) } else { (j, i) };
            total += (scores[lo] - scores[hi] + margin).max(0.0);
        }
        total
    }

    fn output_grads(&self, scores: &[f32]) -> Vec<f32> {
        output_gradient_coefficients(scores, self.labels)
            .expect("score/label sizes already validated")
            .into_vec()
    }
}

/// Gradient of the batch ranking loss via the single-pass route, packaged for
/// comparison against [`naive_pairwise_gradient`]. Does not touch `params`'
/// own gradient state.
pub struct AllPairsGradient {
    pub grads: Vec<Tensor>,
    pub forward_passes: usize,
    pub loss: f64,
    pub coefficients: PairCoefficients,
}

pub fn allpairs_gradient(
    spec: &NetworkSpec,
    params: &ParameterStore,
    batch: &Tensor,
    labels: &ComparabilityMatrix,
) -> Result<AllPairsGradient> {
    let mut work = params.clone();
    work.zero_grads();
    let (scores, cache) = forward(spec, &work, batch)?;
    let coefficients = output_gradient_coefficients(scores.data(), labels)?;
    let loss = batch_loss(scores.data(), labels)?;
    backward(spec, &mut work, &cache, coefficients.per_sample())?;
    Ok(AllPairsGradient {
        grads: work.grads(),
        forward_passes: batch.shape()[0],
        loss,
        coefficients,
    })
}

/// Result of the naive two-forwards-per-pair route.
pub struct NaivePairwiseGradient {
    pub grads: Vec<Tensor>,
    pub forward_passes: usize,
    pub pair_count: usize,
}

/// Reference gradient: every comparable pair forwards both of its members
/// independently and backpropagates the analytic pair derivative. O(M^2)
/// forwards; the per-pair gradients are reduced in f64 end to end (the
/// oracle's headroom), since pairs of near-identical images cancel almost
/// everything and an intermediate f32 round-trip would wipe out exactly the
/// digits under test.
pub fn naive_pairwise_gradient(
    spec: &NetworkSpec,
    params: &ParameterStore,
    batch: &Tensor,
    labels: &ComparabilityMatrix,
) -> Result<NaivePairwiseGradient> {
    if batch.shape().is_empty() || batch.shape()[0] != labels.size() {
        return Err(Error::Shape(format!(
            "batch of {:?} against a {}-sample comparability matrix",
            batch.shape(),
            labels.size()
        )));
    }

    let mut accum: Vec<Vec<f64>> = params.params().iter().map(|p| vec![0.0; p.value.len()]).collect();
    let mut passes = 0usize;
    let mut pair_count = 0usize;

    for (i, j, l) in labels.comparable_pairs() {
        pair_count += 1;
        let (hi, lo) = if l > 0 { (i, j) } else { (j, i) };

        let x_hi = batch.batch_slice(hi)?;
        let (s_hi, cache_hi) = forward(spec, params, &x_hi)?;
        passes += 1;
        let x_lo = batch.batch_slice(lo)?;
        let (s_lo, cache_lo) = forward(spec, params, &x_lo)?;
        passes += 1;

        if s_lo.data()[0] - s_hi.data()[0] + labels.margin() > 0.0 {
            backward_into(spec, params, &cache_hi, &[-1.0], &mut accum)?;
            backward_into(spec, params, &cache_lo, &[1.0], &mut accum)?;
        }
    }

    let grads = accum
        .iter()
        .zip(params.params())
        .map(|(acc, p)| {
            Tensor::from_vec(p.value.shape(), acc.iter().map(|v| *v as f32).collect())
                .expect("accumulator matches parameter shape")
        })
        .collect();

    Ok(NaivePairwiseGradient {
        grads,
        forward_passes: passes,
        pair_count,
    })
}

/// Worst per-tensor relative disagreement between two gradient sets: the
/// infinity norm of the difference over the larger infinity norm of the pair.
pub fn max_relative_error(a: &[Tensor], b: &[Tensor]) -> f64 {
    let mut worst = 0.0f64;
    for (ta, tb) in a.iter().zip(b) {
        let mut diff = 0.0f64;
        let mut norm = 0.0f64;
        for (x, y) in ta.data().iter().zip(tb.data()) {
            diff = diff.max((*x as f64 - *y as f64).abs());
            norm = norm.max((*x as f64).abs().max((*y as f64).abs()));
        }
        if norm > 0.0 {
            worst = worst.max(diff / norm);
        } else if diff > 0.0 {
            worst = f64::INFINITY;
        }
    }
    worst
}
