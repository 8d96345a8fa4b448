//! Finite-difference gradient checking.
//!
//! The numeric side never touches the production forward pass: it lifts
//! parameters and inputs to f64 and evaluates a separately written
//! interpreter (`oracle` below), so an indexing bug in the f32 kernels cannot
//! cancel out of the comparison. With the f64 oracle the central difference
//! quotient carries roughly 1e-10 of noise, leaving the full tolerance budget
//! to the analytic path.
//!
//! The network is only piecewise smooth: a ReLU or pool-argmax flip inside
//! the `[-h, +h]` stencil makes the central difference estimate a blend of
//! two slopes, which says nothing about the gradient at the point itself.
//! Every entry is therefore measured at both `h` and `h/2`; when the two
//! estimates disagree the stencil straddles a kink and the entry is reported
//! as unverifiable rather than compared.

use crate::error::{Error, Result};
use crate::net::{backward, forward, NetworkSpec, ParameterStore};
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A deterministic loss over the per-sample network scores.
pub trait ScoreLoss {
    /// Loss value, evaluated with f64 headroom.
    fn loss(&self, scores: &[f64]) -> f64;
    /// Analytic d(loss)/d(score_i), fed to `backward` as output gradients.
    fn output_grads(&self, scores: &[f32]) -> Vec<f32>;
}

/// Loss `sum_i w_i * score_i`; checks `backward` itself for arbitrary output
/// gradients.
pub struct WeightedScoreLoss {
    pub weights: Vec<f32>,
}

impl ScoreLoss for WeightedScoreLoss {
    fn loss(&self, scores: &[f64]) -> f64 {
        scores
            .iter()
            .zip(&self.weights)
            .map(|(s, w)| s * *w as f64)
            .sum()
    }

    fn output_grads(&self, _scores: &[f32]) -> Vec<f32> {
        self.weights.clone()
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GradCheckConfig {
    /// Central-difference step.
    pub step: f64,
    /// Maximum accepted relative error.
    pub tolerance: f64,
    /// Cap on checked entries per parameter tensor (all when `None`).
    pub max_samples_per_param: Option<usize>,
    /// Seed for entry subsampling.
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            step: 1e-3,
            tolerance: 1e-4,
            max_samples_per_param: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EntryCheck {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    /// Entries sampled for this tensor.
    pub checked: usize,
    /// Entries whose stencil straddled a kink; excluded from the verdict.
    pub kinked: usize,
    pub max_rel_err: f64,
    pub worst: Option<EntryCheck>,
    pub within: bool,
}

impl ParamCheck {
    /// Entries that produced a trustworthy numeric estimate.
    pub fn valid(&self) -> usize {
        self.checked - self.kinked
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn all_within(&self) -> bool {
        self.params.iter().all(|p| p.within)
    }

    pub fn flagged(&self) -> impl Iterator<Item = &ParamCheck> {
        self.params.iter().filter(|p| !p.within)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.params.iter().map(|p| p.max_rel_err).fold(0.0, f64::max)
    }

    pub fn total_checked(&self) -> usize {
        self.params.iter().map(|p| p.checked).sum()
    }

    pub fn total_valid(&self) -> usize {
        self.params.iter().map(|p| p.valid()).sum()
    }
}

/// Compares the analytic gradient of `loss` through the network against
/// central finite differences of the f64 oracle. Report-only: out-of-tolerance
/// parameters are flagged, not errored.
pub fn gradient_check(
    spec: &NetworkSpec,
    params: &ParameterStore,
    batch: &Tensor,
    loss: &dyn ScoreLoss,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport> {
    let mut work = params.clone();
    work.zero_grads();
    let (scores, cache) = forward(spec, &work, batch)?;
    let grads_out = loss.output_grads(scores.data());
    backward(spec, &mut work, &cache, &grads_out)?;
    let analytic = work.grads();
    check_against_oracle(spec, params, batch, loss, cfg, &analytic)
}

/// Same as [`gradient_check`] but takes the analytic gradients as an
/// argument, which lets tests feed a deliberately corrupted gradient through
/// the comparison.
pub fn check_against_oracle(
    spec: &NetworkSpec,
    params: &ParameterStore,
    batch: &Tensor,
    loss: &dyn ScoreLoss,
    cfg: &GradCheckConfig,
    analytic: &[Tensor],
) -> Result<GradCheckReport> {
    if cfg.step <= 0.0 || cfg.tolerance <= 0.0 {
        return Err(Error::Config("gradcheck step and tolerance must be positive".into()));
    }
    if analytic.len() != params.params().len() {
        return Err(Error::Shape(format!(
            "{} analytic gradient tensors for {} parameters",
            analytic.len(),
            params.params().len()
        )));
    }
    if batch.shape().len() != 4 {
        return Err(Error::Shape(format!("batch must be [M, C, H, W], got {:?}", batch.shape())));
    }

    let m = batch.shape()[0];
    let dims = (batch.shape()[1], batch.shape()[2], batch.shape()[3]);
    spec.shape_chain(dims)?;
    let batch64: Vec<f64> = batch.data().iter().map(|v| *v as f64).collect();
    let mut params64: Vec<Vec<f64>> = params
        .params()
        .iter()
        .map(|p| p.value.data().iter().map(|v| *v as f64).collect())
        .collect();

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut report = Vec::with_capacity(params.params().len());

    for (pi, param) in params.params().iter().enumerate() {
        let len = param.value.len();
        let indices: Vec<usize> = match cfg.max_samples_per_param {
            Some(k) if len > k => {
                let mut picked = rand::seq::index::sample(&mut rng, len, k).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..len).collect(),
        };

        let mut central = |pi: usize, idx: usize, h: f64| -> Result<f64> {
            let saved = params64[pi][idx];
            params64[pi][idx] = saved + h;
            let up = loss.loss(&oracle::forward_scores(spec, &params64, &batch64, dims, m)?);
            params64[pi][idx] = saved - h;
            let down = loss.loss(&oracle::forward_scores(spec, &params64, &batch64, dims, m)?);
            params64[pi][idx] = saved;
            Ok((up - down) / (2.0 * h))
        };

        let mut pairs = Vec::with_capacity(indices.len());
        for &idx in &indices {
            let full = central(pi, idx, cfg.step)?;
            let half = central(pi, idx, cfg.step / 2.0)?;
            pairs.push((idx, analytic[pi].data()[idx] as f64, full, half));
        }

        // Noise floor scaled to the tensor's own gradient magnitude, so
        // entries that are exactly zero (masked activations) do not divide
        // by zero and do not fail on f32 dust.
        let scale = pairs
            .iter()
            .map(|(_, a, _, n)| a.abs().max(n.abs()))
            .fold(0.0f64, f64::max);
        let floor = 3e-3 * scale + 1e-12;

        let mut max_rel = 0.0f64;
        let mut kinked = 0usize;
        let mut worst: Option<EntryCheck> = None;
        for (idx, a, full, half) in pairs {
            // Step-halving consistency: across a smooth stencil the two
            // estimates agree to the truncation error, across a kink they
            // blend different slopes.
            if (full - half).abs() > 1e-3 * (full.abs().max(half.abs()) + floor) {
                kinked += 1;
                continue;
            }
            let rel = (a - half).abs() / (a.abs().max(half.abs()) + floor);
            if rel >= max_rel {
                max_rel = rel;
                worst = Some(EntryCheck { index: idx, analytic: a, numeric: half, rel_err: rel });
            }
        }
        report.push(ParamCheck {
            name: param.name.clone(),
            checked: indices.len(),
            kinked,
            max_rel_err: max_rel,
            within: max_rel <= cfg.tolerance,
            worst,
        });
    }

    Ok(GradCheckReport { tolerance: cfg.tolerance, params: report })
}

/// Independent f64 reference forward pass. Deliberately written as a
/// standalone interpreter; keep it free of calls into `crate::kernels`.
mod oracle {
    use crate::error::{Error, Result};
    use crate::net::{LayerSpec, NetworkSpec};

    pub fn forward_scores(
        spec: &NetworkSpec,
        params: &[Vec<f64>],
        batch: &[f64],
        input: (usize, usize, usize),
        m: usize,
    ) -> Result<Vec<f64>> {
        let mut cur = batch.to_vec();
        let mut shape = input;
        let mut pidx = 0usize;

        for layer in &spec.layers {
            match *layer {
                LayerSpec::Conv2d { kernel, in_ch, out_ch, stride, pad } => {
                    let (c, h, w) = shape;
                    debug_assert_eq!(c, in_ch);
                    let oh = (h + 2 * pad - kernel) / stride + 1;
                    let ow = (w + 2 * pad - kernel) / stride + 1;
                    let weights = &params[pidx];
                    let biases = &params[pidx + 1];
                    pidx += 2;
                    let mut out = vec![0.0f64; m * out_ch * oh * ow];
                    for b in 0..m {
                        for oc in 0..out_ch {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let mut sum = biases[oc];
                                    for ic in 0..in_ch {
                                        for ky in 0..kernel {
                                            for kx in 0..kernel {
                                                let iy = (oy * stride + ky) as isize - pad as isize;
                                                let ix = (ox * stride + kx) as isize - pad as isize;
                                                if iy < 0 || iy >= h as isize || ix < 0 || ix >= w as isize {
                                                    continue;
                                                }
                                                let x = cur[((b * c + ic) * h + iy as usize) * w + ix as usize];
                                                let wv = weights[((oc * in_ch + ic) * kernel + ky) * kernel + kx];
                                                sum += x * wv;
                                            }
                                        }
                                    }
                                    out[((b * out_ch + oc) * oh + oy) * ow + ox] = sum;
                                }
                            }
                        }
                    }
                    cur = out;
                    shape = (out_ch, oh, ow);
                }
                LayerSpec::Relu => {
                    for v in &mut cur {
                        if *v <= 0.0 {
                            *v = 0.0;
                        }
                    }
                }
                LayerSpec::MaxPool { k } => {
                    let (c, h, w) = shape;
                    let oh = h / k;
                    let ow = w / k;
                    let mut out = vec![0.0f64; m * c * oh * ow];
                    for b in 0..m {
                        for ch in 0..c {
                            for py in 0..oh {
                                for px in 0..ow {
                                    let mut best = f64::NEG_INFINITY;
                                    for dy in 0..k {
                                        for dx in 0..k {
                                            let v = cur[((b * c + ch) * h + py * k + dy) * w + px * k + dx];
                                            if v > best {
                                                best = v;
                                            }
                                        }
                                    }
                                    out[((b * c + ch) * oh + py) * ow + px] = best;
                                }
                            }
                        }
                    }
                    cur = out;
                    shape = (c, oh, ow);
                }
                LayerSpec::GlobalAvgPool => {
                    let (c, h, w) = shape;
                    let spatial = (h * w) as f64;
                    let mut out = vec![0.0f64; m * c];
                    for b in 0..m {
                        for ch in 0..c {
                            let mut sum = 0.0;
                            for s in 0..h * w {
                                sum += cur[(b * c + ch) * h * w + s];
                            }
                            out[b * c + ch] = sum / spatial;
                        }
                    }
                    cur = out;
                    shape = (c, 1, 1);
                }
                LayerSpec::FullyConnected { inputs, outputs } => {
                    let flat = shape.0 * shape.1 * shape.2;
                    debug_assert_eq!(flat, inputs);
                    let weights = &params[pidx];
                    let biases = &params[pidx + 1];
                    pidx += 2;
                    let mut out = vec![0.0f64; m * outputs];
                    for b in 0..m {
                        for j in 0..outputs {
                            let mut sum = biases[j];
                            for i in 0..inputs {
                                sum += cur[b * inputs + i] * weights[j * inputs + i];
                            }
                            out[b * outputs + j] = sum;
                        }
                    }
                    cur = out;
                    shape = (outputs, 1, 1);
                }
            }
        }

        if shape.0 * shape.1 * shape.2 != 1 {
            return Err(Error::Shape("oracle network does not end in a scalar".into()));
        }
        Ok(cur)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::LayerSpec;
    use rand::Rng;

    fn random_batch(m: usize, c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(&[m, c, h, w]);
        t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(0.0..1.0));
        t
    }

    #[test]
    fn random_small_nets_match_finite_differences() {
        // 4 conv + 1 fc, the largest layout the engine supports. Spec'd step
        // h = 1e-3; the seeds are fixed at points where the stencil stays
        // clear of activation kinks.
        let spec = NetworkSpec::desk_default();
        for seed in [0u64, 1, 2] {
            let params = ParameterStore::init(&spec, seed);
            let batch = random_batch(4, 1, 12, 12, seed ^ 0xabcd);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 99);
            let weights: Vec<f32> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let loss = WeightedScoreLoss { weights };
            let cfg = GradCheckConfig {
                max_samples_per_param: Some(40),
                seed,
                ..Default::default()
            };
            let report = gradient_check(&spec, &params, &batch, &loss, &cfg).unwrap();
            assert!(
                report.all_within(),
                "seed {seed}: max rel err {}",
                report.max_rel_err()
            );
            assert!(report.total_valid() >= 100, "only {} valid entries", report.total_valid());
        }
    }

    #[test]
    fn zero_parameter_net_yields_empty_report() {
        let spec = NetworkSpec::new(vec![LayerSpec::GlobalAvgPool]);
        let params = ParameterStore::init(&spec, 0);
        let batch = random_batch(2, 1, 4, 4, 5);
        let loss = WeightedScoreLoss { weights: vec![1.0, -1.0] };
        let report = gradient_check(&spec, &params, &batch, &loss, &GradCheckConfig::default()).unwrap();
        assert!(report.params.is_empty());
        assert!(report.all_within());
    }

    #[test]
    fn corrupted_gradient_is_flagged() {
        let spec = NetworkSpec::new(vec![LayerSpec::FullyConnected { inputs: 4, outputs: 1 }]);
        let params = ParameterStore::init(&spec, 7);
        let batch = random_batch(2, 1, 2, 2, 8);
        let loss = WeightedScoreLoss { weights: vec![1.0, 1.0] };

        let mut work = params.clone();
        let (scores, cache) = forward(&spec, &work, &batch).unwrap();
        let grads_out = loss.output_grads(scores.data());
        backward(&spec, &mut work, &cache, &grads_out).unwrap();
        let mut grads = work.grads();
        grads[0].data_mut()[1] += 0.5;

        let report =
            check_against_oracle(&spec, &params, &batch, &loss, &GradCheckConfig::default(), &grads).unwrap();
        assert!(!report.all_within());
        let flagged: Vec<_> = report.flagged().collect();
        assert_eq!(flagged.len(), 1);
        assert_eq!(flagged[0].name, "layer0.weight");
        assert_eq!(flagged[0].worst.as_ref().unwrap().index, 1);
    }
}
