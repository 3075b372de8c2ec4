use rand::Rng;

use super::{merge_graph, surgery_graph, BasisSource, LayerKind, ModelGraph, SurgeryOptions};
use crate::error::{Error, Result};
use crate::refconv::{refocus_dims, RefConvLayer};
use crate::tensor::{
    conv2d_backward, conv2d_forward, global_avg_pool, global_avg_pool_backward, linear_backward, linear_forward,
    relu_backward, relu_forward, BatchNorm, BatchNormCache, ConvSpec, Scalar, Tensor4,
};

/// Parameter state of one layer.
#[derive(Clone, Debug, PartialEq)]
pub enum Layer<T> {
    Conv { weight: Tensor4<T>, bias: Option<Vec<T>> },
    RefConv(RefConvLayer<T>),
    BatchNorm(BatchNorm<T>),
    Relu,
    GlobalPool,
    Linear { weight: Tensor4<T>, bias: Vec<T> },
}

/// How the optimizer treats a parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    Trainable { decay: bool },
    Frozen,
    /// Running statistics: updated by forward passes, never by the optimizer.
    Buffer,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamInfo {
    pub layer: usize,
    pub layer_name: String,
    pub role: &'static str,
    pub dims: [usize; 4],
    pub kind: ParamKind,
}

impl ParamInfo {
    /// `layer.role`, also used as the checkpoint blob stem.
    pub fn key(&self) -> String {
        format!("{}.{}", self.layer_name, self.role)
    }

    pub fn is_trainable(&self) -> bool {
        matches!(self.kind, ParamKind::Trainable { .. })
    }
}

enum CacheEntry<T> {
    None,
    BatchNorm(BatchNormCache<T>),
    Transformed(Tensor4<T>),
}

/// Activations saved by [`Network::forward_train`] for the backward pass.
pub struct ForwardCache<T> {
    inputs: Vec<Tensor4<T>>,
    entries: Vec<CacheEntry<T>>,
}

/// Gradients of every trainable parameter, keyed by `(layer index, role)`.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    pub entries: Vec<(usize, &'static str, Vec<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, layer: usize, role: &str) -> Option<&[T]> {
        self.entries.iter().find(|(l, r, _)| *l == layer && *r == role).map(|(_, _, g)| g.as_slice())
    }
}

/// A [`ModelGraph`] together with its parameter values.
#[derive(Clone, Debug, PartialEq)]
pub struct Network<T> {
    graph: ModelGraph,
    layers: Vec<Layer<T>>,
}

fn vec_dims(len: usize) -> [usize; 4] {
    [len, 1, 1, 1]
}

fn kaiming<T: Scalar, R: Rng + ?Sized>(spec: &ConvSpec, rng: &mut R) -> Tensor4<T> {
    let fan_in = spec.in_per_group() * spec.kernel * spec.kernel;
    Tensor4::normal(spec.weight_dims(), (2.0 / fan_in as f64).sqrt(), rng)
}

impl<T: Scalar> Network<T> {
    /// Fresh initialization: He-normal convs, default batchnorm, uniform
    /// `+-1/sqrt(in)` classifier weights with zero bias.
    pub fn init<R: Rng + ?Sized>(graph: ModelGraph, rng: &mut R) -> Result<Self> {
        Self::build(graph, Some(rng))
    }

    /// Same structure as [`Network::init`] with every parameter zero and
    /// batchnorm at its identity state; meant to be filled from a checkpoint.
    pub fn zeroed(graph: ModelGraph) -> Result<Self> {
        Self::build::<rand::rngs::ThreadRng>(graph, None)
    }

    fn build<R: Rng + ?Sized>(graph: ModelGraph, mut rng: Option<&mut R>) -> Result<Self> {
        graph.validate()?;
        let mut layers = Vec::with_capacity(graph.layers.len());
        for d in &graph.layers {
            let layer = match &d.kind {
                LayerKind::Conv { spec, bias } => Layer::Conv {
                    weight: match rng.as_deref_mut() {
                        Some(r) => kaiming(spec, r),
                        None => Tensor4::zeros(spec.weight_dims()),
                    },
                    bias: bias.then(|| vec![T::zero(); spec.c_out]),
                },
                LayerKind::RefConv { spec, bias, map_kernel, map_groups, shortcut, basis_trainable } => {
                    let dims = refocus_dims(spec, *map_kernel, *map_groups);
                    let (basis, refocus) = match rng.as_deref_mut() {
                        Some(r) => {
                            let basis = kaiming(spec, r);
                            let fan = (dims[0] + dims[1]) * map_kernel * map_kernel;
                            let bound = (6.0 / fan as f64).sqrt();
                            (basis, Tensor4::uniform(dims, -bound, bound, r))
                        }
                        None => (Tensor4::zeros(spec.weight_dims()), Tensor4::zeros(dims)),
                    };
                    let bias = bias.then(|| vec![T::zero(); spec.c_out]);
                    let mut rc = RefConvLayer::from_parts(*spec, basis, refocus, *map_groups, *shortcut, bias)?;
                    rc.basis.frozen = !basis_trainable;
                    Layer::RefConv(rc)
                }
                LayerKind::BatchNorm { channels } => Layer::BatchNorm(BatchNorm::new(*channels)),
                LayerKind::Relu => Layer::Relu,
                LayerKind::GlobalPool => Layer::GlobalPool,
                LayerKind::Linear { inputs, outputs } => {
                    let dims = [*outputs, *inputs, 1, 1];
                    let bound = 1.0 / (*inputs as f64).sqrt();
                    Layer::Linear {
                        weight: match rng.as_deref_mut() {
                            Some(r) => Tensor4::uniform(dims, -bound, bound, r),
                            None => Tensor4::zeros(dims),
                        },
                        bias: vec![T::zero(); *outputs],
                    }
                }
            };
            layers.push(layer);
        }
        Ok(Network { graph, layers })
    }

    pub fn graph(&self) -> &ModelGraph {
        &self.graph
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layer_index(&self, name: &str) -> Option<usize> {
        self.graph.layers.iter().position(|l| l.name == name)
    }

    pub fn refconv(&self, name: &str) -> Option<&RefConvLayer<T>> {
        match self.layers.get(self.layer_index(name)?)? {
            Layer::RefConv(rc) => Some(rc),
            _ => None,
        }
    }

    /// Names of all refocused layers, in graph order.
    pub fn refconv_names(&self) -> Vec<String> {
        self.graph
            .layers
            .iter()
            .zip(&self.layers)
            .filter(|(_, l)| matches!(l, Layer::RefConv(_)))
            .map(|(d, _)| d.name.clone())
            .collect()
    }

    /// Every parameter and buffer with its current values, in a fixed order.
    pub fn params(&self) -> Vec<(ParamInfo, &[T])> {
        let mut out = Vec::new();
        for (i, (d, layer)) in self.graph.layers.iter().zip(&self.layers).enumerate() {
            let train = |decay| if d.trainable { ParamKind::Trainable { decay } } else { ParamKind::Frozen };
            let push = |role, dims, kind, data| (ParamInfo { layer: i, layer_name: d.name.clone(), role, dims, kind }, data);
            let entries: Vec<(ParamInfo, &[T])> = match layer {
                Layer::Conv { weight, bias } => {
                    let mut v = vec![push("weight", weight.dims(), train(true), weight.data())];
                    if let Some(b) = bias {
                        v.push(push("bias", vec_dims(b.len()), train(false), b));
                    }
                    v
                }
                Layer::RefConv(rc) => {
                    let basis_kind = if rc.basis.frozen { ParamKind::Frozen } else { train(true) };
                    let mut v = vec![
                        push("basis", rc.basis.weights.dims(), basis_kind, rc.basis.weights.data()),
                        push("refocus", rc.refocus.weights.dims(), train(true), rc.refocus.weights.data()),
                    ];
                    if let Some(b) = &rc.bias {
                        v.push(push("bias", vec_dims(b.len()), ParamKind::Frozen, b));
                    }
                    v
                }
                Layer::BatchNorm(bn) => {
                    let dims = vec_dims(bn.channels());
                    vec![
                        push("gamma", dims, train(false), &bn.gamma),
                        push("beta", dims, train(false), &bn.beta),
                        push("running_mean", dims, ParamKind::Buffer, &bn.running_mean),
                        push("running_var", dims, ParamKind::Buffer, &bn.running_var),
                    ]
                }
                Layer::Linear { weight, bias } => vec![
                    push("weight", weight.dims(), train(true), weight.data()),
                    push("bias", vec_dims(bias.len()), train(false), bias),
                ],
                Layer::Relu | Layer::GlobalPool => Vec::new(),
            };
            out.extend(entries);
        }
        out
    }

    pub fn param_infos(&self) -> Vec<ParamInfo> {
        self.params().into_iter().map(|(i, _)| i).collect()
    }

    /// Calls `f` on every parameter and buffer, in the order of [`Network::params`].
    pub fn visit_params_mut(&mut self, mut f: impl FnMut(&ParamInfo, &mut [T]) -> Result<()>) -> Result<()> {
        let infos = self.param_infos();
        let mut it = infos.iter();
        for layer in &mut self.layers {
            let slots: Vec<&mut [T]> = match layer {
                Layer::Conv { weight, bias } => {
                    let mut v = vec![weight.data_mut()];
                    if let Some(b) = bias {
                        v.push(b.as_mut_slice());
                    }
                    v
                }
                Layer::RefConv(rc) => {
                    let mut v = vec![rc.basis.weights.data_mut(), rc.refocus.weights.data_mut()];
                    if let Some(b) = &mut rc.bias {
                        v.push(b.as_mut_slice());
                    }
                    v
                }
                Layer::BatchNorm(bn) => vec![
                    bn.gamma.as_mut_slice(),
                    bn.beta.as_mut_slice(),
                    bn.running_mean.as_mut_slice(),
                    bn.running_var.as_mut_slice(),
                ],
                Layer::Linear { weight, bias } => vec![weight.data_mut(), bias.as_mut_slice()],
                Layer::Relu | Layer::GlobalPool => Vec::new(),
            };
            for slot in slots {
                let info = it.next().expect("parameter order is fixed");
                f(info, slot)?;
            }
        }
        Ok(())
    }

    /// Learnable parameter count, trainable or frozen (buffers excluded).
    pub fn param_count(&self) -> usize {
        self.params().iter().filter(|(i, _)| i.kind != ParamKind::Buffer).map(|(_, d)| d.len()).sum()
    }

    pub fn trainable_param_count(&self) -> usize {
        self.params().iter().filter(|(i, _)| i.is_trainable()).map(|(_, d)| d.len()).sum()
    }

    /// Inference-mode forward pass (batchnorm uses running statistics).
    pub fn predict(&self, x: &Tensor4<T>) -> Result<Tensor4<T>> {
        let mut cur = x.clone();
        for (d, layer) in self.graph.layers.iter().zip(&self.layers) {
            cur = match layer {
                Layer::Conv { weight, bias } => {
                    conv2d_forward(&cur, weight, d.kind.conv_spec().expect("conv layer"), bias.as_deref())?
                }
                Layer::RefConv(rc) => rc.forward(&cur)?,
                Layer::BatchNorm(bn) => {
                    bn.apply_inference(&mut cur)?;
                    cur
                }
                Layer::Relu => {
                    cur.data_mut().iter_mut().for_each(|v| *v = v.max(T::zero()));
                    cur
                }
                Layer::GlobalPool => global_avg_pool(&cur),
                Layer::Linear { weight, bias } => linear_forward(&cur, weight, bias)?,
            };
        }
        Ok(cur)
    }

    /// Training-mode forward pass; updates batchnorm running statistics.
    pub fn forward_train(&mut self, x: &Tensor4<T>) -> Result<(Tensor4<T>, ForwardCache<T>)> {
        let n = self.layers.len();
        let mut cache = ForwardCache { inputs: Vec::with_capacity(n), entries: Vec::with_capacity(n) };
        let mut cur = x.clone();
        for (d, layer) in self.graph.layers.iter().zip(&mut self.layers) {
            let (next, entry) = match layer {
                Layer::Conv { weight, bias } => (
                    conv2d_forward(&cur, weight, d.kind.conv_spec().expect("conv layer"), bias.as_deref())?,
                    CacheEntry::None,
                ),
                Layer::RefConv(rc) => {
                    let w_t = rc.transform()?;
                    (rc.forward_with(&cur, &w_t)?, CacheEntry::Transformed(w_t))
                }
                Layer::BatchNorm(bn) => {
                    let (y, c) = bn.forward_train(&cur)?;
                    (y, CacheEntry::BatchNorm(c))
                }
                Layer::Relu => (relu_forward(&cur), CacheEntry::None),
                Layer::GlobalPool => (global_avg_pool(&cur), CacheEntry::None),
                Layer::Linear { weight, bias } => (linear_forward(&cur, weight, bias)?, CacheEntry::None),
            };
            cache.inputs.push(std::mem::replace(&mut cur, next));
            cache.entries.push(entry);
        }
        Ok((cur, cache))
    }

    /// Backpropagates `grad_out` (gradient w.r.t. the logits) through the
    /// cached forward pass. Only trainable parameters receive gradients.
    pub fn backward(&self, cache: &ForwardCache<T>, grad_out: &Tensor4<T>) -> Result<Gradients<T>> {
        self.backward_full(cache, grad_out).map(|(g, _)| g)
    }

    /// Like [`Network::backward`], also returning the gradient w.r.t. the input.
    pub fn backward_full(&self, cache: &ForwardCache<T>, grad_out: &Tensor4<T>) -> Result<(Gradients<T>, Tensor4<T>)> {
        if cache.inputs.len() != self.layers.len() {
            return Err(Error::Shape("forward cache does not belong to this network".into()));
        }
        let mut grads = Gradients::default();
        let mut g = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            let d = &self.graph.layers[i];
            let x = &cache.inputs[i];
            g = match (&self.layers[i], &cache.entries[i]) {
                (Layer::Conv { weight, bias }, _) => {
                    let cg = conv2d_backward(x, weight, d.kind.conv_spec().expect("conv layer"), &g)?;
                    if d.trainable {
                        grads.entries.push((i, "weight", cg.grad_w.into_data()));
                        if bias.is_some() {
                            grads.entries.push((i, "bias", cg.grad_bias));
                        }
                    }
                    cg.grad_x
                }
                (Layer::RefConv(rc), CacheEntry::Transformed(w_t)) => {
                    let rg = rc.backward_with(x, w_t, &g)?;
                    if let Some(gb) = rg.grad_basis {
                        grads.entries.push((i, "basis", gb.into_data()));
                    }
                    if d.trainable {
                        grads.entries.push((i, "refocus", rg.grad_refocus.into_data()));
                    }
                    rg.grad_x
                }
                (Layer::BatchNorm(bn), CacheEntry::BatchNorm(c)) => {
                    let (gx, gg, gb) = bn.backward(c, &g)?;
                    if d.trainable {
                        grads.entries.push((i, "gamma", gg));
                        grads.entries.push((i, "beta", gb));
                    }
                    gx
                }
                (Layer::Relu, _) => relu_backward(x, &g)?,
                (Layer::GlobalPool, _) => global_avg_pool_backward(&g, x.dims())?,
                (Layer::Linear { weight, .. }, _) => {
                    let lg = linear_backward(x, weight, &g)?;
                    if d.trainable {
                        grads.entries.push((i, "weight", lg.grad_w.into_data()));
                        grads.entries.push((i, "bias", lg.grad_bias));
                    }
                    lg.grad_x
                }
                _ => return Err(Error::Shape(format!("forward cache entry for `{}` has the wrong kind", d.name))),
            };
        }
        Ok((grads, g))
    }

    /// Replaces every conv with `K >= 2` by a refocusing layer built on its weights.
    pub fn surgery<R: Rng + ?Sized>(&self, options: &SurgeryOptions, rng: &mut R) -> Result<Network<T>> {
        let graph = surgery_graph(&self.graph, options)?;
        let mut layers = Vec::with_capacity(self.layers.len());
        for (d, layer) in graph.layers.iter().zip(&self.layers) {
            let next = match (&d.kind, layer) {
                (LayerKind::RefConv { spec, .. }, Layer::Conv { weight, bias }) => {
                    let basis = match options.basis {
                        BasisSource::Pretrained => weight.clone(),
                        BasisSource::Random => kaiming(spec, rng),
                    };
                    let mut rc = RefConvLayer::new(*spec, basis, options.map_kernel, options.init, rng)?;
                    rc.use_identity_shortcut = options.shortcut;
                    rc.bias = bias.clone();
                    rc.basis.frozen = !options.basis_trainable;
                    Layer::RefConv(rc)
                }
                (_, other) => other.clone(),
            };
            layers.push(next);
        }
        Ok(Network { graph, layers })
    }

    /// Collapses every refocusing layer into a plain conv holding `W_t`.
    pub fn merged(&self) -> Result<Network<T>> {
        let layers = self
            .layers
            .iter()
            .map(|l| match l {
                Layer::RefConv(rc) => {
                    let m = rc.merge()?;
                    Ok(Layer::Conv { weight: m.weight, bias: m.bias })
                }
                other => Ok(other.clone()),
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Network { graph: merge_graph(&self.graph), layers })
    }

    /// Converts every parameter to another precision.
    pub fn cast<U: Scalar>(&self) -> Result<Network<U>> {
        let mut out = Network::<U>::zeroed(self.graph.clone())?;
        let src = self.params();
        let mut i = 0;
        out.visit_params_mut(|_, dst| {
            for (d, s) in dst.iter_mut().zip(src[i].1) {
                *d = U::of(s.as_f64());
            }
            i += 1;
            Ok(())
        })?;
        // batchnorm hyper-parameters are not part of the parameter list
        for (a, b) in out.layers.iter_mut().zip(&self.layers) {
            if let (Layer::BatchNorm(x), Layer::BatchNorm(y)) = (a, b) {
                x.momentum = U::of(y.momentum.as_f64());
                x.eps = U::of(y.eps.as_f64());
            }
        }
        Ok(out)
    }
}
