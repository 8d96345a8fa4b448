//! Minimal network engine: layer specs, parameter store, forward and
//! backward passes for one scoring branch.
//!
//! The final layer always produces a single scalar per sample, so a batch
//! forward yields one score per image. Backward propagates arbitrary
//! per-sample output gradients, which is what the all-pairs ranking layer and
//! the regression loss feed in.

use crate::error::{Error, Result};
use crate::kernels::{self, ConvDims};
use crate::tensor::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv2d {
        kernel: usize,
        in_ch: usize,
        out_ch: usize,
        stride: usize,
        pad: usize,
    },
    Relu,
    MaxPool {
        k: usize,
    },
    GlobalAvgPool,
    FullyConnected {
        inputs: usize,
        outputs: usize,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(layers: Vec<LayerSpec>) -> NetworkSpec {
        NetworkSpec { layers }
    }

    /// Default desk-scale scoring branch: four 3x3 conv stages at toy width,
    /// two of them pooled, then global average pooling into a single output.
    pub fn desk_default() -> NetworkSpec {
        use LayerSpec::*;
        NetworkSpec::new(vec![
            Conv2d { kernel: 3, in_ch: 1, out_ch: 8, stride: 1, pad: 1 },
            Relu,
            MaxPool { k: 2 },
            Conv2d { kernel: 3, in_ch: 8, out_ch: 16, stride: 1, pad: 1 },
            Relu,
            MaxPool { k: 2 },
            Conv2d { kernel: 3, in_ch: 16, out_ch: 32, stride: 1, pad: 1 },
            Relu,
            Conv2d { kernel: 3, in_ch: 32, out_ch: 32, stride: 1, pad: 1 },
            Relu,
            GlobalAvgPool,
            FullyConnected { inputs: 32, outputs: 1 },
        ])
    }

    /// Walks the shape chain for an input of `(channels, h, w)`, returning the
    /// output shape of every layer. Fails on any inconsistency, including a
    /// final output that is not exactly one scalar.
    pub fn shape_chain(&self, input: (usize, usize, usize)) -> Result<Vec<(usize, usize, usize)>> {
        let mut cur = input;
        let mut chain = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            cur = match *layer {
                LayerSpec::Conv2d { kernel, in_ch, out_ch, stride, pad } => {
                    if kernel == 0 || stride == 0 || out_ch == 0 {
                        return Err(Error::Config(format!("layer {i}: conv2d sizes must be positive")));
                    }
                    if in_ch != cur.0 {
                        return Err(Error::Shape(format!(
                            "layer {i}: conv2d expects {in_ch} input channels, got {}",
                            cur.0
                        )));
                    }
                    let oh = (cur.1 + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1);
                    let ow = (cur.2 + 2 * pad).checked_sub(kernel).map(|v| v / stride + 1);
                    match (oh, ow) {
                        (Some(h), Some(w)) if h > 0 && w > 0 => (out_ch, h, w),
                        _ => {
                            return Err(Error::Shape(format!(
                                "layer {i}: conv2d kernel {kernel} too large for {}x{} input",
                                cur.1, cur.2
                            )))
                        }
                    }
                }
                LayerSpec::Relu => cur,
                LayerSpec::MaxPool { k } => {
                    if k == 0 || cur.1 / k == 0 || cur.2 / k == 0 {
                        return Err(Error::Shape(format!(
                            "layer {i}: maxpool window {k} too large for {}x{} input",
                            cur.1, cur.2
                        )));
                    }
                    (cur.0, cur.1 / k, cur.2 / k)
                }
                LayerSpec::GlobalAvgPool => (cur.0, 1, 1),
                LayerSpec::FullyConnected { inputs, outputs } => {
                    let flat = cur.0 * cur.1 * cur.2;
                    if flat != inputs {
                        return Err(Error::Shape(format!(
                            "layer {i}: fully_connected expects {inputs} inputs, got {flat}"
                        )));
                    }
                    if outputs == 0 {
                        return Err(Error::Config(format!("layer {i}: fully_connected outputs must be positive")));
                    }
                    (outputs, 1, 1)
                }
            };
            chain.push(cur);
        }
        let last = chain.last().copied().unwrap_or(input);
        if last.0 * last.1 * last.2 != 1 {
            return Err(Error::Shape(format!(
                "final layer must output exactly one scalar, got shape {last:?}"
            )));
        }
        Ok(chain)
    }

    /// Compact single-line descriptor, stable across versions; also the
    /// serialized form used in checkpoints.
    pub fn descriptor(&self) -> String {
        self.layers
            .iter()
            .map(|l| match *l {
                LayerSpec::Conv2d { kernel, in_ch, out_ch, stride, pad } => {
                    format!("conv2d({kernel},{in_ch},{out_ch},{stride},{pad})")
                }
                LayerSpec::Relu => "relu".to_string(),
                LayerSpec::MaxPool { k } => format!("maxpool({k})"),
                LayerSpec::GlobalAvgPool => "global_avg_pool".to_string(),
                LayerSpec::FullyConnected { inputs, outputs } => format!("fc({inputs},{outputs})"),
            })
            .collect::<Vec<_>>()
            .join("/")
    }

    pub fn parse_descriptor(s: &str) -> Result<NetworkSpec> {
        fn args(item: &str, name: &str, n: usize) -> Result<Vec<usize>> {
            let inner = item
                .strip_prefix(name)
                .and_then(|r| r.strip_prefix('('))
                .and_then(|r| r.strip_suffix(')'))
                .ok_or_else(|| Error::Config(format!("bad layer descriptor `{item}`")))?;
            let vals: Vec<usize> = inner
                .split(',')
                .map(|v| v.trim().parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::Config(format!("bad layer descriptor `{item}`")))?;
            if vals.len() != n {
                return Err(Error::Config(format!(
                    "layer `{name}` takes {n} arguments, got {}",
                    vals.len()
                )));
            }
            Ok(vals)
        }

        let mut layers = Vec::new();
        for item in s.split('/').map(str::trim).filter(|v| !v.is_empty()) {
            let layer = if item == "relu" {
                LayerSpec::Relu
            } else if item == "global_avg_pool" {
                LayerSpec::GlobalAvgPool
            } else if item.starts_with("conv2d") {
                let v = args(item, "conv2d", 5)?;
                LayerSpec::Conv2d { kernel: v[0], in_ch: v[1], out_ch: v[2], stride: v[3], pad: v[4] }
            } else if item.starts_with("maxpool") {
                let v = args(item, "maxpool", 1)?;
                LayerSpec::MaxPool { k: v[0] }
            } else if item.starts_with("fc") {
                let v = args(item, "fc", 2)?;
                LayerSpec::FullyConnected { inputs: v[0], outputs: v[1] }
            } else {
                return Err(Error::Config(format!("unknown layer `{item}`")));
            };
            layers.push(layer);
        }
        if layers.is_empty() {
            return Err(Error::Config("empty network descriptor".into()));
        }
        Ok(NetworkSpec::new(layers))
    }
}

impl std::fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.descriptor())
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub grad: Tensor,
}

/// Named parameter tensors with paired gradients, in layer order. Iteration
/// order is fixed by the spec, so serialization and SGD walk identical
/// sequences on every run.
#[derive(Debug, Clone)]
pub struct ParameterStore {
    params: Vec<Param>,
}

impl ParameterStore {
    /// He-style scaled uniform init (bound `sqrt(6 / fan_in)`), biases zero.
    pub fn init(spec: &NetworkSpec, seed: u64) -> ParameterStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        for (i, layer) in spec.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv2d { kernel, in_ch, out_ch, .. } => {
                    let fan_in = (in_ch * kernel * kernel) as f32;
                    let bound = (6.0 / fan_in).sqrt();
                    let mut w = Tensor::zeros(&[out_ch, in_ch, kernel, kernel]);
                    w.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
                    params.push(Param {
                        name: format!("layer{i}.weight"),
                        grad: Tensor::zeros(w.shape()),
                        value: w,
                    });
                    params.push(Param {
                        name: format!("layer{i}.bias"),
                        value: Tensor::zeros(&[out_ch]),
                        grad: Tensor::zeros(&[out_ch]),
                    });
                }
                LayerSpec::FullyConnected { inputs, outputs } => {
                    let bound = (6.0 / inputs as f32).sqrt();
                    let mut w = Tensor::zeros(&[outputs, inputs]);
                    w.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-bound..bound));
                    params.push(Param {
                        name: format!("layer{i}.weight"),
                        grad: Tensor::zeros(w.shape()),
                        value: w,
                    });
                    params.push(Param {
                        name: format!("layer{i}.bias"),
                        value: Tensor::zeros(&[outputs]),
                        grad: Tensor::zeros(&[outputs]),
                    });
                }
                _ => {}
            }
        }
        ParameterStore { params }
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.fill(0.0);
        }
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Snapshot of all gradient tensors, in store order.
    pub fn grads(&self) -> Vec<Tensor> {
        self.params.iter().map(|p| p.grad.clone()).collect()
    }
}

/// First index into the parameter store for each layer (layers without
/// parameters get `None`). Must mirror `ParameterStore::init` order.
fn param_layout(spec: &NetworkSpec) -> Vec<Option<usize>> {
    let mut next = 0;
    spec.layers
        .iter()
        .map(|l| match l {
            LayerSpec::Conv2d { .. } | LayerSpec::FullyConnected { .. } => {
                let at = next;
                next += 2;
                Some(at)
            }
            _ => None,
        })
        .collect()
}

fn conv_dims(layer: &LayerSpec, input: (usize, usize, usize), output: (usize, usize, usize)) -> ConvDims {
    match *layer {
        LayerSpec::Conv2d { kernel, in_ch, out_ch, stride, pad } => ConvDims {
            in_ch,
            out_ch,
            kernel,
            stride,
            pad,
            in_h: input.1,
            in_w: input.2,
            out_h: output.1,
            out_w: output.2,
        },
        _ => unreachable!("conv_dims on non-conv layer"),
    }
}

/// Activations recorded by [`forward`]; consumed by [`backward`].
#[derive(Debug, Clone)]
pub struct ForwardCache {
    spec: NetworkSpec,
    batch: usize,
    input_shape: (usize, usize, usize),
    shapes: Vec<(usize, usize, usize)>,
    /// Input activation of each layer; `inputs[0]` is the batch itself.
    inputs: Vec<Tensor>,
    argmax: Vec<Option<Vec<u32>>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.batch
    }
}

/// Runs the batch through the network, returning one score per sample and a
/// cache of the activations backward needs.
pub fn forward(spec: &NetworkSpec, params: &ParameterStore, batch: &Tensor) -> Result<(Tensor, ForwardCache)> {
    if batch.shape().len() != 4 {
        return Err(Error::Shape(format!(
            "batch must be [M, C, H, W], got {:?}",
            batch.shape()
        )));
    }
    let m = batch.shape()[0];
    if m == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    let input_shape = (batch.shape()[1], batch.shape()[2], batch.shape()[3]);
    let shapes = spec.shape_chain(input_shape)?;
    let layout = param_layout(spec);
    let expected_params: usize = layout.iter().filter(|p| p.is_some()).count() * 2;
    if params.params.len() != expected_params {
        return Err(Error::State(format!(
            "parameter store has {} tensors but the spec needs {}",
            params.params.len(),
            expected_params
        )));
    }

    let mut inputs: Vec<Tensor> = Vec::with_capacity(spec.layers.len());
    let mut argmax: Vec<Option<Vec<u32>>> = Vec::with_capacity(spec.layers.len());
    let mut cur = batch.clone();
    let mut cur_shape = input_shape;

    for (i, layer) in spec.layers.iter().enumerate() {
        let out_shape = shapes[i];
        let mut out = Tensor::zeros(&[m, out_shape.0, out_shape.1, out_shape.2]);
        let mut arg = None;
        match layer {
            LayerSpec::Conv2d { .. } => {
                let d = conv_dims(layer, cur_shape, out_shape);
                let (w, b) = layer_params(params, &layout, i);
                kernels::conv2d_forward(&d, m, cur.data(), w.value.data(), b.value.data(), out.data_mut());
            }
            LayerSpec::Relu => {
                kernels::relu_forward(cur.data(), out.data_mut());
            }
            LayerSpec::MaxPool { k } => {
                let mut a = vec![0u32; out.len()];
                kernels::maxpool_forward(cur_shape.0, cur_shape.1, cur_shape.2, *k, m, cur.data(), out.data_mut(), &mut a);
                arg = Some(a);
            }
            LayerSpec::GlobalAvgPool => {
                kernels::global_avg_pool_forward(cur_shape.0, cur_shape.1 * cur_shape.2, m, cur.data(), out.data_mut());
            }
            LayerSpec::FullyConnected { inputs: fin, outputs } => {
                let (w, b) = layer_params(params, &layout, i);
                kernels::fc_forward(*fin, *outputs, m, cur.data(), w.value.data(), b.value.data(), out.data_mut());
            }
        }
        inputs.push(cur);
        argmax.push(arg);
        cur = out;
        cur_shape = out_shape;
    }

    let scores = cur.reshaped(&[m])?;
    Ok((
        scores,
        ForwardCache {
            spec: spec.clone(),
            batch: m,
            input_shape,
            shapes,
            inputs,
            argmax,
        },
    ))
}

fn layer_params<'a>(params: &'a ParameterStore, layout: &[Option<usize>], layer: usize) -> (&'a Param, &'a Param) {
    let at = layout[layer].expect("layer has no parameters");
    (&params.params[at], &params.params[at + 1])
}

/// Backpropagates per-sample output gradients, accumulating into the store's
/// gradient tensors. Gradients add across calls until `zero_grads`.
///
/// With output gradients `g`, each parameter receives
/// `d(sum_i g_i * score_i) / d theta`. Gradients travel in f64 inside one
/// call and round to f32 only when added to the store.
pub fn backward(
    spec: &NetworkSpec,
    params: &mut ParameterStore,
    cache: &ForwardCache,
    output_grads: &[f32],
) -> Result<()> {
    let mut sink: Vec<Vec<f64>> = params.params.iter().map(|p| vec![0.0; p.value.len()]).collect();
    backward_into(spec, params, cache, output_grads, &mut sink)?;
    for (param, grads) in params.params.iter_mut().zip(&sink) {
        for (d, s) in param.grad.data_mut().iter_mut().zip(grads) {
            *d += *s as f32;
        }
    }
    Ok(())
}

/// Backward pass that adds parameter gradients into f64 accumulators instead
/// of the store's f32 tensors. The pairwise gradient oracle sums hundreds of
/// per-pair gradients of nearly identical images; keeping that reduction in
/// f64 end to end is what preserves the cancelled digits it compares on.
pub fn backward_into(
    spec: &NetworkSpec,
    params: &ParameterStore,
    cache: &ForwardCache,
    output_grads: &[f32],
    sink: &mut [Vec<f64>],
) -> Result<()> {
    if *spec != cache.spec {
        return Err(Error::State(
            "backward called with a cache produced by a different network spec".into(),
        ));
    }
    if output_grads.len() != cache.batch {
        return Err(Error::Shape(format!(
            "output_grads has {} entries for a batch of {}",
            output_grads.len(),
            cache.batch
        )));
    }
    if sink.len() != params.params.len()
        || sink
            .iter()
            .zip(&params.params)
            .any(|(s, p)| s.len() != p.value.len())
    {
        return Err(Error::Shape("gradient sink does not match the parameter store".into()));
    }
    let m = cache.batch;
    let layout = param_layout(spec);

    let mut grad: Vec<f64> = output_grads.iter().map(|g| *g as f64).collect();
    for i in (0..spec.layers.len()).rev() {
        let layer = &spec.layers[i];
        let in_shape = if i == 0 { cache.input_shape } else { cache.shapes[i - 1] };
        let out_shape = cache.shapes[i];
        let input = &cache.inputs[i];
        let mut in_grad = vec![0.0f64; m * in_shape.0 * in_shape.1 * in_shape.2];

        match layer {
            LayerSpec::Conv2d { .. } => {
                let d = conv_dims(layer, in_shape, out_shape);
                let at = layout[i].expect("conv layer params");
                let (gw, gb) = sink_pair(sink, at);
                kernels::conv2d_backward_params(&d, m, input.data(), &grad, gw, gb);
                kernels::conv2d_backward_input(&d, m, params.params[at].value.data(), &grad, &mut in_grad);
            }
            LayerSpec::Relu => {
                kernels::relu_backward(input.data(), &grad, &mut in_grad);
            }
            LayerSpec::MaxPool { k } => {
                let arg = cache.argmax[i].as_ref().expect("maxpool argmax cached");
                kernels::maxpool_backward(in_shape.0, in_shape.1, in_shape.2, *k, m, &grad, arg, &mut in_grad);
            }
            LayerSpec::GlobalAvgPool => {
                kernels::global_avg_pool_backward(in_shape.0, in_shape.1 * in_shape.2, m, &grad, &mut in_grad);
            }
            LayerSpec::FullyConnected { inputs: fin, outputs } => {
                let at = layout[i].expect("fc layer params");
                let (gw, gb) = sink_pair(sink, at);
                kernels::fc_backward_params(*fin, *outputs, m, input.data(), &grad, gw, gb);
                kernels::fc_backward_input(*fin, *outputs, m, params.params[at].value.data(), &grad, &mut in_grad);
            }
        }
        grad = in_grad;
    }
    Ok(())
}

fn sink_pair(sink: &mut [Vec<f64>], at: usize) -> (&mut [f64], &mut [f64]) {
    let (a, b) = sink[at..].split_at_mut(1);
    (&mut a[0], &mut b[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_fc_spec() -> NetworkSpec {
        NetworkSpec::new(vec![LayerSpec::FullyConnected { inputs: 1, outputs: 1 }])
    }

    fn store_with(spec: &NetworkSpec, weight: f32, bias: f32) -> ParameterStore {
        let mut ps = ParameterStore::init(spec, 0);
        ps.params_mut()[0].value.data_mut()[0] = weight;
        ps.params_mut()[1].value.data_mut()[0] = bias;
        ps
    }

    #[test]
    fn identity_fc_scores_its_input() {
        let spec = single_fc_spec();
        let ps = store_with(&spec, 1.0, 0.0);
        let batch = Tensor::from_vec(&[1, 1, 1, 1], vec![3.0]).unwrap();
        let (scores, _) = forward(&spec, &ps, &batch).unwrap();
        assert_eq!(scores.data(), &[3.0]);
    }

    #[test]
    fn fc_backward_matches_linear_derivative() {
        let spec = single_fc_spec();
        let mut ps = store_with(&spec, 0.7, 0.1);
        let batch = Tensor::from_vec(&[1, 1, 1, 1], vec![2.5]).unwrap();
        let (_, cache) = forward(&spec, &ps, &batch).unwrap();
        backward(&spec, &mut ps, &cache, &[1.0]).unwrap();
        assert_eq!(ps.params()[0].grad.data()[0], 2.5); // d(w*x+b)/dw = x
        assert_eq!(ps.params()[1].grad.data()[0], 1.0); // d(w*x+b)/db = 1
    }

    #[test]
    fn zero_output_grads_leave_zero_param_grads() {
        let spec = NetworkSpec::desk_default();
        let mut ps = ParameterStore::init(&spec, 1);
        let batch = Tensor::filled(&[2, 1, 12, 12], 0.5);
        let (_, cache) = forward(&spec, &ps, &batch).unwrap();
        backward(&spec, &mut ps, &cache, &[0.0, 0.0]).unwrap();
        for p in ps.params() {
            assert!(p.grad.data().iter().all(|v| *v == 0.0), "{} not zero", p.name);
        }
    }

    #[test]
    fn gradient_accumulation_is_additive() {
        let spec = NetworkSpec::desk_default();
        let mut ps = ParameterStore::init(&spec, 2);
        let batch = Tensor::filled(&[1, 1, 12, 12], 0.3);
        let (_, cache) = forward(&spec, &ps, &batch).unwrap();
        backward(&spec, &mut ps, &cache, &[1.0]).unwrap();
        let once = ps.grads();
        backward(&spec, &mut ps, &cache, &[1.0]).unwrap();
        for (p, g1) in ps.params().iter().zip(&once) {
            for (twice, once) in p.grad.data().iter().zip(g1.data()) {
                assert!((twice - 2.0 * once).abs() <= 1e-6 * once.abs().max(1.0));
            }
        }
        ps.zero_grads();
        assert!(ps.params().iter().all(|p| p.grad.data().iter().all(|v| *v == 0.0)));
    }

    #[test]
    fn forward_is_pure() {
        let spec = NetworkSpec::desk_default();
        let ps = ParameterStore::init(&spec, 3);
        let batch = Tensor::filled(&[3, 1, 16, 16], 0.25);
        let (a, _) = forward(&spec, &ps, &batch).unwrap();
        let (b, _) = forward(&spec, &ps, &batch).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn shape_errors_are_descriptive() {
        let spec = NetworkSpec::desk_default();
        let ps = ParameterStore::init(&spec, 0);
        // 2 channels into a 1-channel conv.
        let bad = Tensor::filled(&[1, 2, 16, 16], 0.0);
        let err = forward(&spec, &ps, &bad).unwrap_err();
        assert!(err.to_string().contains("input channels"), "{err}");
        // final output must be scalar
        let spec2 = NetworkSpec::new(vec![LayerSpec::FullyConnected { inputs: 4, outputs: 2 }]);
        assert!(spec2.shape_chain((1, 2, 2)).is_err());
    }

    #[test]
    fn backward_rejects_mismatched_grads_and_foreign_cache() {
        let spec = NetworkSpec::desk_default();
        let mut ps = ParameterStore::init(&spec, 0);
        let batch = Tensor::filled(&[2, 1, 12, 12], 0.5);
        let (_, cache) = forward(&spec, &ps, &batch).unwrap();
        assert!(backward(&spec, &mut ps, &cache, &[1.0]).is_err());
        let other = single_fc_spec();
        let mut other_ps = ParameterStore::init(&other, 0);
        assert!(backward(&other, &mut other_ps, &cache, &[1.0, 1.0]).is_err());
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let spec = NetworkSpec::desk_default();
        let a = ParameterStore::init(&spec, 9);
        let b = ParameterStore::init(&spec, 9);
        let c = ParameterStore::init(&spec, 10);
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.value.data(), pb.value.data());
        }
        assert_ne!(a.params()[0].value.data(), c.params()[0].value.data());
    }

    #[test]
    fn descriptor_round_trips() {
        let spec = NetworkSpec::desk_default();
        let parsed = NetworkSpec::parse_descriptor(&spec.descriptor()).unwrap();
        assert_eq!(spec, parsed);
        assert!(NetworkSpec::parse_descriptor("conv2d(3,1)").is_err());
        assert!(NetworkSpec::parse_descriptor("warp(9)").is_err());
    }
}
