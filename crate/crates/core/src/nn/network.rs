use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::layers::{
    backward_nodes, compile, dense_blocks, forward_nodes, materialize, scatter_grad, Aux,
    BlockGrad, Eff, Node, WeightBlock,
};
use super::scalar::{Dual, Scalar};
use super::spec::{DiscSpec, GenSpec, MlpSpec, NetworkSpec};
use super::Tensor;
use crate::error::{Error, Result};

/// Everything the reverse pass needs from one forward evaluation.
#[derive(Debug, Clone)]
pub struct Trace<S> {
    batch: usize,
    effs: Vec<Eff>,
    acts: Vec<Vec<S>>,
    aux: Vec<Aux<S>>,
}

impl<S: Scalar> Trace<S> {
    pub fn batch(&self) -> usize {
        self.batch
    }

    pub fn output(&self) -> &[S] {
        self.acts.last().expect("trace has an output")
    }

    /// Input of layer `i` (so `activation(0)` is the network input).
    pub fn activation(&self, i: usize) -> &[S] {
        &self.acts[i]
    }

    /// Input of the final layer, i.e. the penultimate features.
    pub fn features(&self) -> &[S] {
        &self.acts[self.acts.len() - 2]
    }
}

/// Parameter and input gradients of a reverse pass.
#[derive(Debug, Clone)]
pub struct Gradients<S> {
    pub params: Vec<S>,
    pub input: Vec<S>,
}

#[derive(Debug)]
pub struct Network {
    spec: NetworkSpec,
    nodes: Vec<Node>,
    blocks: Vec<WeightBlock>,
    dense: Vec<bool>,
    params: Vec<f64>,
    output_shape: Vec<usize>,
    cache: Option<Trace<f64>>,
    passes: AtomicU64,
}

impl Clone for Network {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            nodes: self.nodes.clone(),
            blocks: self.blocks.clone(),
            dense: self.dense.clone(),
            params: self.params.clone(),
            output_shape: self.output_shape.clone(),
            cache: None,
            passes: AtomicU64::new(0),
        }
    }
}

pub fn build_generator(spec: &GenSpec, seed: u64) -> Result<Network> {
    Network::new(spec.network_spec()?, seed)
}

pub fn build_discriminator(spec: &DiscSpec, seed: u64) -> Result<Network> {
    Network::new(spec.network_spec()?, seed)
}

pub fn build_mlp(spec: &MlpSpec, seed: u64) -> Result<Network> {
    Network::new(spec.network_spec()?, seed)
}

impl Network {
    /// Validates the shape chain and initialises every weight block
    /// orthogonally (biases zero, gains equal to the initial row norms).
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut net = Self::uninitialised(spec)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for block in net.blocks.clone() {
            let w = orthogonal(block.out, block.fan_in, &mut rng);
            net.params[block.weights_range()].copy_from_slice(&w);
        }
        for block in net.blocks.clone() {
            if let Some(gr) = block.gain_range() {
                let norms = row_norms(&net.params[block.weights_range()], block.fan_in);
                net.params[gr].copy_from_slice(&norms);
            }
        }
        net.renormalize();
        Ok(net)
    }

    /// Network with every parameter zero.
    pub fn uninitialised(spec: NetworkSpec) -> Result<Self> {
        if spec.layers.is_empty() {
            return Err(Error::ShapeChain {
                layer: "network".into(),
                detail: "no layers".into(),
            });
        }
        let mut blocks = Vec::new();
        let mut offset = 0;
        let (nodes, output_shape) = compile(&spec.layers, &spec.input_shape, "", &mut blocks, &mut offset)?;
        let mut dense = vec![false; blocks.len()];
        dense_blocks(&nodes, &mut dense);
        Ok(Self {
            spec,
            nodes,
            blocks,
            dense,
            params: vec![0.0; offset],
            output_shape,
            cache: None,
            passes: AtomicU64::new(0),
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.spec.input_shape
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.output_shape
    }

    pub fn input_size(&self) -> usize {
        self.spec.input_shape.iter().product()
    }

    pub fn output_size(&self) -> usize {
        self.output_shape.iter().product()
    }

    /// Width of the penultimate features (input of the last layer).
    pub fn feature_size(&self) -> usize {
        self.nodes.last().expect("non-empty").in_size
    }

    pub fn n_layers(&self) -> usize {
        self.nodes.len()
    }

    /// Top-level layer names such as `3 (residual)`.
    pub fn layer_names(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.name.as_str()).collect()
    }

    pub fn n_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.cache = None;
        &mut self.params
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.params.len() {
            return Err(Error::LengthMismatch(p.len(), self.params.len()));
        }
        self.params.copy_from_slice(p);
        self.cache = None;
        Ok(())
    }

    /// Weight blocks in parameter order.
    pub fn weight_blocks(&self) -> &[WeightBlock] {
        &self.blocks
    }

    /// Effective (post-normalisation) weights of block `i`, row-major
    /// `out x fan_in`.
    pub fn effective_weights(&self, i: usize) -> Vec<f64> {
        materialize(&self.blocks[i], &self.params, false).w
    }

    /// Number of reverse passes run through this network so far.
    pub fn backward_passes(&self) -> u64 {
        self.passes.load(Ordering::Relaxed)
    }

    pub fn reset_backward_passes(&self) {
        self.passes.store(0, Ordering::Relaxed);
    }

    /// Rescales every weight-normalised direction row to unit norm. The
    /// effective weights are unchanged.
    pub fn renormalize(&mut self) {
        for block in &self.blocks {
            if !block.weight_norm {
                continue;
            }
            let wr = block.weights_range();
            for o in 0..block.out {
                let row = &mut self.params[wr.start + o * block.fan_in..wr.start + (o + 1) * block.fan_in];
                let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if n > 0.0 {
                    for v in row.iter_mut() {
                        *v /= n;
                    }
                }
            }
        }
        self.cache = None;
    }

    /// Adam update followed by direction renormalisation.
    pub fn adam_update(&mut self, grads: &[f64], state: &mut AdamState, cfg: &AdamConfig) -> Result<()> {
        adam_step(&mut self.params, grads, state, cfg)?;
        self.renormalize();
        Ok(())
    }

    fn effs(&self) -> Vec<Eff> {
        self.blocks
            .iter()
            .zip(&self.dense)
            .map(|(b, d)| materialize(b, &self.params, *d))
            .collect()
    }

    fn check_batch(&self, len: usize, batch: usize) -> Result<()> {
        if batch == 0 {
            return Err(Error::EmptyBatch);
        }
        if len != batch * self.input_size() {
            let mut expected = vec![batch];
            expected.extend(&self.spec.input_shape);
            return Err(Error::Shape {
                expected,
                got: vec![len],
            });
        }
        Ok(())
    }

    /// Forward pass on a flat batch, keeping every intermediate.
    pub fn trace<S: Scalar>(&self, x: &[S], batch: usize) -> Result<Trace<S>> {
        self.check_batch(x.len(), batch)?;
        let effs = self.effs();
        let (acts, aux) = forward_nodes(&self.nodes, &effs, x.to_vec(), batch);
        Ok(Trace {
            batch,
            effs,
            acts,
            aux,
        })
    }

    /// Reverse pass from the output.
    pub fn backprop<S: Scalar>(&self, trace: &Trace<S>, upstream: &[S]) -> Result<Gradients<S>> {
        self.backprop_from(trace, self.nodes.len(), upstream)
    }

    /// Reverse pass seeded at the input of layer `layer` (the output when
    /// `layer == n_layers()`).
    pub fn backprop_from<S: Scalar>(&self, trace: &Trace<S>, layer: usize, upstream: &[S]) -> Result<Gradients<S>> {
        if layer > self.nodes.len() {
            return Err(Error::Dimension(format!(
                "layer {layer} of a {}-layer network",
                self.nodes.len()
            )));
        }
        let expected = trace.acts[layer].len();
        if upstream.len() != expected {
            return Err(Error::LengthMismatch(upstream.len(), expected));
        }
        let mut grads: Vec<BlockGrad<S>> = self.blocks.iter().map(BlockGrad::zeros).collect();
        let input = backward_nodes(
            &self.nodes,
            &trace.effs,
            &trace.acts,
            &trace.aux,
            layer,
            upstream.to_vec(),
            trace.batch,
            &mut grads,
        );
        let mut params = vec![S::zero(); self.params.len()];
        for ((block, eff), g) in self.blocks.iter().zip(&trace.effs).zip(&grads) {
            scatter_grad(block, &self.params, eff, g, &mut params);
        }
        self.passes.fetch_add(1, Ordering::Relaxed);
        Ok(Gradients { params, input })
    }

    /// `∇_θ Σ_s upstream[s]·dirₛᵀ∇ₓ f(xₛ)` for a network with one output, from
    /// a single reverse pass over dual inputs `x + ε·dir`.
    pub fn mixed_param_grad(&self, x: &[f64], dir: &[f64], upstream: &[f64], batch: usize) -> Result<Vec<f64>> {
        if self.output_size() != 1 {
            return Err(Error::Shape {
                expected: vec![1],
                got: self.output_shape.clone(),
            });
        }
        if dir.len() != x.len() {
            return Err(Error::LengthMismatch(dir.len(), x.len()));
        }
        if upstream.len() != batch {
            return Err(Error::LengthMismatch(upstream.len(), batch));
        }
        let xd: Vec<Dual> = x.iter().zip(dir).map(|(a, b)| Dual::new(*a, *b)).collect();
        let trace = self.trace(&xd, batch)?;
        let up: Vec<Dual> = upstream.iter().map(|u| Dual::new(*u, 0.0)).collect();
        let g = self.backprop(&trace, &up)?;
        Ok(g.params.into_iter().map(|d| d.eps).collect())
    }

    /// Stateless evaluation of a `[batch, ...input_shape]` tensor.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let batch = self.batch_of(x)?;
        let t = self.trace(&x.values, batch)?;
        let mut shape = vec![batch];
        shape.extend(&self.output_shape);
        Tensor::new(shape, t.output().to_vec())
    }

    fn batch_of(&self, x: &Tensor) -> Result<usize> {
        if x.shape.len() != self.spec.input_shape.len() + 1 || x.shape[1..] != self.spec.input_shape[..] {
            let mut expected = vec![x.shape.first().copied().unwrap_or(0)];
            expected.extend(&self.spec.input_shape);
            return Err(Error::Shape {
                expected,
                got: x.shape.clone(),
            });
        }
        Ok(x.shape[0])
    }

    /// Forward pass that caches intermediates for [`Network::backward`].
    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let batch = self.batch_of(x)?;
        let t = self.trace(&x.values, batch)?;
        let mut shape = vec![batch];
        shape.extend(&self.output_shape);
        let out = Tensor::new(shape, t.output().to_vec())?;
        self.cache = Some(t);
        Ok(out)
    }

    /// Reverse pass for the last [`Network::forward`]; returns parameter
    /// gradients (shape `[n_params]`) and the input gradient.
    pub fn backward(&mut self, upstream: &Tensor) -> Result<(Tensor, Tensor)> {
        let trace = self.cache.as_ref().ok_or(Error::BackwardBeforeForward)?;
        let mut expected = vec![trace.batch];
        expected.extend(&self.output_shape);
        if upstream.shape != expected {
            return Err(Error::Shape {
                expected,
                got: upstream.shape.clone(),
            });
        }
        let g = self.backprop(trace, &upstream.values)?;
        let mut in_shape = vec![trace.batch];
        in_shape.extend(&self.spec.input_shape);
        Ok((
            Tensor::new(vec![g.params.len()], g.params)?,
            Tensor::new(in_shape, g.input)?,
        ))
    }
}

fn row_norms(w: &[f64], fan_in: usize) -> Vec<f64> {
    w.chunks(fan_in)
        .map(|r| r.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect()
}

/// Semi-orthogonal `rows x cols` matrix: orthonormal rows when rows <= cols,
/// orthonormal columns otherwise.
pub fn orthogonal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (long, short) = if rows >= cols { (rows, cols) } else { (cols, rows) };
    // `short` orthonormal vectors of length `long`, by Gram-Schmidt applied twice
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(short);
    while basis.len() < short {
        let mut v: Vec<f64> = (0..long).map(|_| StandardNormal.sample(rng)).collect();
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= d * y;
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-8 {
            continue;
        }
        v.iter_mut().for_each(|x| *x /= n);
        basis.push(v);
    }
    let mut w = vec![0.0; rows * cols];
    for (k, b) in basis.iter().enumerate() {
        for (l, v) in b.iter().enumerate() {
            if rows >= cols {
                w[l * cols + k] = *v;
            } else {
                w[k * cols + l] = *v;
            }
        }
    }
    w
}
