use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::gemm::{matmul_nn, matmul_nt, matmul_tn};
use super::params::ParamVector;
use crate::error::{config_err, shape_err, Error, Result};
use crate::math;
use crate::rng::{self, Stream};

/// Hidden-layer nonlinearity. The final layer is always affine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "lowercase"))]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

/// Optional normalization applied after the final affine layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "lowercase"))]
pub enum Head {
    Linear,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Arch {
    pub sizes: Vec<usize>,
    pub activation: Activation,
    pub head: Head,
}

impl Arch {
    pub fn new(sizes: Vec<usize>, activation: Activation, head: Head) -> Result<Self> {
        let arch = Self { sizes, activation, head };
        arch.validate()?;
        Ok(arch)
    }

    /// `input → hidden[0] → … → output`.
    pub fn with_hidden(input: usize, hidden: &[usize], output: usize, activation: Activation, head: Head) -> Result<Self> {
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(input);
        sizes.extend_from_slice(hidden);
        sizes.push(output);
        Self::new(sizes, activation, head)
    }

    pub fn validate(&self) -> Result<()> {
        if self.sizes.len() < 2 {
            return Err(config_err!("an architecture needs at least an input and an output size"));
        }
        if self.sizes.iter().any(|&s| s == 0) {
            return Err(config_err!("layer sizes must be positive, got {:?}", self.sizes));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.sizes.last().expect("validated")
    }

    pub fn num_layers(&self) -> usize {
        self.sizes.len() - 1
    }

    pub fn param_count(&self) -> usize {
        self.sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }

    fn extents(&self) -> Vec<(alloc::string::String, usize)> {
        let mut out = Vec::new();
        for (l, w) in self.sizes.windows(2).enumerate() {
            out.push((format!("layer{l}.weight"), w[0] * w[1]));
            out.push((format!("layer{l}.bias"), w[1]));
        }
        out
    }
}

/// Training target for [`backprop`] and [`loss_value`].
#[derive(Debug, Clone, Copy)]
pub enum Targets<'a> {
    /// One class index per sample.
    Classes(&'a [usize]),
    /// `n × output_dim` row-major values.
    Values(&'a [f64]),
}

#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize), serde(rename_all = "kebab-case"))]
pub enum Loss {
    /// `-ln softmax(logits)[y]`; the head's own softmax, if any, is folded in.
    CrossEntropy,
    /// `Σ_d (y_d - t_d)²` on the head output.
    SquaredError,
    /// Isotropic Gaussian negative log-likelihood of the target around the head output.
    GaussianNll { sigma: f64 },
}

/// Activations retained by a forward pass, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    n: usize,
    /// `acts[0]` is the input; `acts[l + 1]` is layer `l`'s output (logits for the last).
    acts: Vec<Vec<f64>>,
    output: Vec<f64>,
}

impl ForwardCache {
    pub fn batch_len(&self) -> usize {
        self.n
    }

    /// Head output, `n × output_dim`.
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    /// Final affine layer output, before any softmax head.
    pub fn logits(&self) -> &[f64] {
        self.acts.last().expect("at least one layer")
    }
}

/// A fixed-architecture multilayer perceptron.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    arch: Arch,
    params: ParamVector,
}

impl Mlp {
    pub fn new(arch: Arch, params: ParamVector) -> Result<Self> {
        arch.validate()?;
        let expected = arch.extents();
        if params.segments().len() != expected.len()
            || params.segments().iter().zip(&expected).any(|(s, (name, len))| &s.name != name || s.len != *len)
        {
            return Err(shape_err!(
                "parameter vector of length {} does not match architecture {:?} ({} parameters)",
                params.len(),
                arch.sizes,
                arch.param_count()
            ));
        }
        Ok(Self { arch, params })
    }

    /// Builds a network from a flat value vector laid out as the architecture dictates.
    pub fn from_values(arch: Arch, values: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        if values.len() != arch.param_count() {
            return Err(shape_err!("expected {} parameters for {:?}, got {}", arch.param_count(), arch.sizes, values.len()));
        }
        let mut params = ParamVector::zeros(arch.extents());
        params.values_mut().copy_from_slice(&values);
        Self::new(arch, params)
    }

    pub fn zeros(arch: Arch) -> Result<Self> {
        arch.validate()?;
        let params = ParamVector::zeros(arch.extents());
        Ok(Self { arch, params })
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(arch: Arch, stream: &mut Stream) -> Result<Self> {
        let mut mlp = Self::zeros(arch)?;
        for l in 0..mlp.arch.num_layers() {
            let (fan_in, fan_out) = (mlp.arch.sizes[l], mlp.arch.sizes[l + 1]);
            let limit = math::sqrt(6.0 / (fan_in + fan_out) as f64);
            let (w, _) = mlp.layer_offsets(l);
            for v in &mut mlp.params.values_mut()[w..w + fan_in * fan_out] {
                *v = rng::uniform(stream, -limit, limit);
            }
        }
        Ok(mlp)
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &ParamVector {
        &self.params
    }

    pub fn values(&self) -> &[f64] {
        self.params.values()
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.params.values_mut()
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    fn layer_offsets(&self, l: usize) -> (usize, usize) {
        let segs = self.params.segments();
        (segs[2 * l].offset, segs[2 * l + 1].offset)
    }

    fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (w, b) = self.layer_offsets(l);
        let (i, o) = (self.arch.sizes[l], self.arch.sizes[l + 1]);
        let v = self.params.values();
        (&v[w..w + i * o], &v[b..b + o])
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        self.forward_batch(input, 1)
    }

    /// Evaluates `n` row-major inputs at once.
    pub fn forward_batch(&self, inputs: &[f64], n: usize) -> Result<Vec<f64>> {
        Ok(self.forward_cached(inputs, n)?.output)
    }

    pub fn forward_cached(&self, inputs: &[f64], n: usize) -> Result<ForwardCache> {
        let in_dim = self.arch.input_dim();
        if inputs.len() != n * in_dim {
            return Err(shape_err!("expected {} inputs of width {}, got {} values", n, in_dim, inputs.len()));
        }
        let layers = self.arch.num_layers();
        let mut acts = Vec::with_capacity(layers + 1);
        acts.push(inputs.to_vec());
        for l in 0..layers {
            let (i, o) = (self.arch.sizes[l], self.arch.sizes[l + 1]);
            let (w, b) = self.layer(l);
            let mut out = Vec::with_capacity(n * o);
            for _ in 0..n {
                out.extend_from_slice(b);
            }
            matmul_nt(n, i, o, &acts[l], w, 1.0, &mut out);
            if l + 1 < layers {
                apply_activation(self.arch.activation, &mut out);
            }
            if !math::all_finite(&out) {
                return Err(Error::NonFinite { layer: l });
            }
            acts.push(out);
        }
        let logits = acts.last().expect("at least one layer");
        let output = match self.arch.head {
            Head::Linear => logits.clone(),
            Head::Softmax => {
                let o = self.arch.output_dim();
                let mut probs = vec![0.0; logits.len()];
                for (src, dst) in logits.chunks(o).zip(probs.chunks_mut(o)) {
                    math::softmax_into(src, dst);
                }
                probs
            }
        };
        Ok(ForwardCache { n, acts, output })
    }

    /// Vector-Jacobian product through the head and all layers.
    ///
    /// `d_output` is the cotangent of the head output. Returns the cotangent of
    /// the input; parameter gradients are accumulated into `param_grad` when given.
    pub fn backward(&self, cache: &ForwardCache, d_output: &[f64], param_grad: Option<&mut [f64]>) -> Result<Vec<f64>> {
        match self.arch.head {
            Head::Linear => self.backward_from_logits(cache, d_output, param_grad),
            Head::Softmax => {
                let o = self.arch.output_dim();
                let mut d_logits = vec![0.0; d_output.len()];
                for ((p, g), dl) in cache.output.chunks(o).zip(d_output.chunks(o)).zip(d_logits.chunks_mut(o)) {
                    let pg = math::dot(p, g);
                    for c in 0..o {
                        dl[c] = p[c] * (g[c] - pg);
                    }
                }
                self.backward_from_logits(cache, &d_logits, param_grad)
            }
        }
    }

    /// Like [`Mlp::backward`] but starting from the cotangent of the logits.
    pub fn backward_from_logits(
        &self,
        cache: &ForwardCache,
        d_logits: &[f64],
        mut param_grad: Option<&mut [f64]>,
    ) -> Result<Vec<f64>> {
        let n = cache.n;
        if d_logits.len() != n * self.arch.output_dim() {
            return Err(shape_err!("cotangent has {} values, expected {}", d_logits.len(), n * self.arch.output_dim()));
        }
        if let Some(g) = param_grad.as_deref() {
            if g.len() != self.num_params() {
                return Err(shape_err!("gradient buffer has {} slots, network has {} parameters", g.len(), self.num_params()));
            }
        }
        let layers = self.arch.num_layers();
        let mut delta = d_logits.to_vec();
        for l in (0..layers).rev() {
            let (i, o) = (self.arch.sizes[l], self.arch.sizes[l + 1]);
            if l + 1 < layers {
                apply_activation_derivative(self.arch.activation, &cache.acts[l + 1], &mut delta);
            }
            if let Some(g) = param_grad.as_deref_mut() {
                let (wo, bo) = self.layer_offsets(l);
                matmul_tn(o, n, i, &delta, &cache.acts[l], 1.0, &mut g[wo..wo + o * i]);
                let gb = &mut g[bo..bo + o];
                for row in delta.chunks(o) {
                    for (acc, d) in gb.iter_mut().zip(row) {
                        *acc += d;
                    }
                }
                if !math::all_finite(&g[wo..bo + o]) {
                    return Err(Error::NonFinite { layer: l });
                }
            }
            let (w, _) = self.layer(l);
            let mut d_in = vec![0.0; n * i];
            matmul_nn(n, o, i, &delta, w, 0.0, &mut d_in);
            if !math::all_finite(&d_in) {
                return Err(Error::NonFinite { layer: l });
            }
            delta = d_in;
        }
        Ok(delta)
    }
}

fn apply_activation(act: Activation, xs: &mut [f64]) {
    match act {
        Activation::Tanh => math::tanh_in_place(xs),
        Activation::Relu => xs.iter_mut().for_each(|x| *x = x.max(0.0)),
        Activation::Identity => {}
    }
}

/// Multiplies `delta` by the activation derivative, given the post-activation values.
fn apply_activation_derivative(act: Activation, post: &[f64], delta: &mut [f64]) {
    match act {
        Activation::Tanh => delta.iter_mut().zip(post).for_each(|(d, y)| *d *= 1.0 - y * y),
        Activation::Relu => delta.iter_mut().zip(post).for_each(|(d, y)| {
            if *y <= 0.0 {
                *d = 0.0
            }
        }),
        Activation::Identity => {}
    }
}

fn check_batch(mlp: &Mlp, inputs: &[f64], targets: Targets<'_>) -> Result<usize> {
    let in_dim = mlp.arch.input_dim();
    if inputs.is_empty() {
        return Err(Error::Precondition("batch must be nonempty".into()));
    }
    if inputs.len() % in_dim != 0 {
        return Err(shape_err!("input buffer of {} values is not a multiple of width {}", inputs.len(), in_dim));
    }
    let n = inputs.len() / in_dim;
    match targets {
        Targets::Classes(c) => {
            if c.len() != n {
                return Err(shape_err!("{} class targets for {} inputs", c.len(), n));
            }
            if let Some(&bad) = c.iter().find(|&&c| c >= mlp.arch.output_dim()) {
                return Err(shape_err!("class target {} out of range for {} outputs", bad, mlp.arch.output_dim()));
            }
        }
        Targets::Values(v) => {
            if v.len() != n * mlp.arch.output_dim() {
                return Err(shape_err!("{} value targets for {} outputs", v.len(), n * mlp.arch.output_dim()));
            }
        }
    }
    Ok(n)
}

/// Per-sample losses and the cotangent of the mean loss.
///
/// The cotangent is w.r.t. logits for cross-entropy and w.r.t. the head output otherwise.
fn loss_and_cotangent(mlp: &Mlp, cache: &ForwardCache, targets: Targets<'_>, loss: Loss) -> Result<(f64, Vec<f64>)> {
    let n = cache.n;
    let o = mlp.arch.output_dim();
    let inv_n = 1.0 / n as f64;
    let mut total = 0.0;
    let mut cot;
    match (loss, targets) {
        (Loss::CrossEntropy, Targets::Classes(classes)) => {
            cot = vec![0.0; n * o];
            let mut lp = vec![0.0; o];
            for ((row, &y), d) in cache.logits().chunks(o).zip(classes).zip(cot.chunks_mut(o)) {
                math::log_softmax_into(row, &mut lp);
                total -= lp[y];
                for c in 0..o {
                    d[c] = math::exp(lp[c]) * inv_n;
                }
                d[y] -= inv_n;
            }
        }
        (Loss::SquaredError, Targets::Values(t)) => {
            cot = vec![0.0; n * o];
            for ((y, t), d) in cache.output.iter().zip(t).zip(cot.iter_mut()) {
                let r = y - t;
                total += r * r;
                *d = 2.0 * r * inv_n;
            }
        }
        (Loss::GaussianNll { sigma }, Targets::Values(t)) => {
            if !(sigma > 0.0) {
                return Err(config_err!("gaussian-nll sigma must be positive, got {sigma}"));
            }
            let s2 = sigma * sigma;
            cot = vec![0.0; n * o];
            let per_dim_const = math::ln(sigma) + 0.5 * math::LN_2PI;
            for ((y, t), d) in cache.output.iter().zip(t).zip(cot.iter_mut()) {
                let r = y - t;
                total += r * r / (2.0 * s2) + per_dim_const;
                *d = r / s2 * inv_n;
            }
        }
        (loss, _) => return Err(config_err!("loss {:?} does not accept these targets", loss)),
    }
    Ok((total * inv_n, cot))
}

/// Mean loss over the batch.
pub fn loss_value(mlp: &Mlp, inputs: &[f64], targets: Targets<'_>, loss: Loss) -> Result<f64> {
    let n = check_batch(mlp, inputs, targets)?;
    let cache = mlp.forward_cached(inputs, n)?;
    Ok(loss_and_cotangent(mlp, &cache, targets, loss)?.0)
}

/// Gradient of the mean batch loss w.r.t. the network parameters.
pub fn backprop(mlp: &Mlp, inputs: &[f64], targets: Targets<'_>, loss: Loss) -> Result<Vec<f64>> {
    Ok(backprop_with_loss(mlp, inputs, targets, loss)?.1)
}

/// Mean batch loss together with its parameter gradient.
pub fn backprop_with_loss(mlp: &Mlp, inputs: &[f64], targets: Targets<'_>, loss: Loss) -> Result<(f64, Vec<f64>)> {
    let n = check_batch(mlp, inputs, targets)?;
    let cache = mlp.forward_cached(inputs, n)?;
    let (value, cot) = loss_and_cotangent(mlp, &cache, targets, loss)?;
    let mut grad = vec![0.0; mlp.num_params()];
    match loss {
        Loss::CrossEntropy => mlp.backward_from_logits(&cache, &cot, Some(&mut grad))?,
        _ => mlp.backward(&cache, &cot, Some(&mut grad))?,
    };
    Ok((value, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn arch(sizes: &[usize], act: Activation, head: Head) -> Arch {
        Arch::new(sizes.to_vec(), act, head).unwrap()
    }

    /// Independent straight-line forward pass: explicit loops, no GEMM.
    fn reference_forward(mlp: &Mlp, x: &[f64]) -> Vec<f64> {
        let a = mlp.arch();
        let v = mlp.values();
        let mut h = x.to_vec();
        let mut off = 0;
        for l in 0..a.num_layers() {
            let (i, o) = (a.sizes[l], a.sizes[l + 1]);
            let w = &v[off..off + i * o];
            let b = &v[off + i * o..off + i * o + o];
            off += i * o + o;
            let mut next = vec![0.0; o];
            for r in 0..o {
                let mut acc = b[r];
                for c in 0..i {
                    acc += w[r * i + c] * h[c];
                }
                next[r] = if l + 1 < a.num_layers() {
                    match a.activation {
                        Activation::Tanh => libm::tanh(acc),
                        Activation::Relu => acc.max(0.0),
                        Activation::Identity => acc,
                    }
                } else {
                    acc
                };
            }
            h = next;
        }
        if a.head == Head::Softmax {
            let m = h.iter().cloned().fold(f64::MIN, f64::max);
            let z: f64 = h.iter().map(|x| libm::exp(x - m)).sum();
            h = h.iter().map(|x| libm::exp(x - m) / z).collect();
        }
        h
    }

    fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        let mut x = x.to_vec();
        (0..x.len())
            .map(|i| {
                let orig = x[i];
                x[i] = orig + h;
                let up = f(&x);
                x[i] = orig - h;
                let down = f(&x);
                x[i] = orig;
                (up - down) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).abs() / (x.abs().max(y.abs()).max(1e-6))).fold(0.0, f64::max)
    }

    #[test]
    fn zero_network_softmax_is_uniform() {
        let mlp = Mlp::zeros(arch(&[3, 8, 4], Activation::Tanh, Head::Softmax)).unwrap();
        let out = mlp.forward(&[0.3, -2.0, 7.0]).unwrap();
        for p in out {
            assert!((p - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn identity_linear_layer() {
        let a = arch(&[3, 3], Activation::Identity, Head::Linear);
        let mut vals = vec![0.0; a.param_count()];
        for i in 0..3 {
            vals[i * 3 + i] = 1.0;
        }
        let mlp = Mlp::from_values(a, vals).unwrap();
        assert_eq!(mlp.forward(&[1.5, -2.0, 0.25]).unwrap(), vec![1.5, -2.0, 0.25]);
    }

    #[test]
    fn forward_matches_reference_implementation() {
        let mut s = stream(7);
        let mlp = Mlp::init(arch(&[2, 32, 32, 3], Activation::Tanh, Head::Softmax), &mut s).unwrap();
        let got = mlp.forward(&[0.5, 0.5]).unwrap();
        let want = reference_forward(&mlp, &[0.5, 0.5]);
        assert!(max_rel_err(&got, &want) < 1e-10, "{got:?} vs {want:?}");
        let sum: f64 = got.iter().sum();
        assert!((sum - 1.0).abs() < 1e-9);
        assert!(got.iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn batch_forward_matches_rowwise() {
        let mut s = stream(3);
        let mlp = Mlp::init(arch(&[4, 16, 5], Activation::Relu, Head::Linear), &mut s).unwrap();
        let xs: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let batch = mlp.forward_batch(&xs, 10).unwrap();
        for r in 0..10 {
            let single = reference_forward(&mlp, &xs[r * 4..r * 4 + 4]);
            assert!(max_rel_err(&batch[r * 5..r * 5 + 5], &single) < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let mlp = Mlp::zeros(arch(&[2, 3], Activation::Tanh, Head::Linear)).unwrap();
        assert!(matches!(mlp.forward(&[1.0, 2.0, 3.0]), Err(Error::Shape(_))));
        let a = arch(&[2, 3], Activation::Tanh, Head::Linear);
        assert!(matches!(Mlp::from_values(a, vec![0.0; 4]), Err(Error::Shape(_))));
    }

    #[test]
    fn squared_error_gradient_closed_form() {
        // single linear layer: grad_W = 2 (Wx - y) xᵀ, grad_b = 2 (Wx + b - y)
        let a = arch(&[2, 2], Activation::Identity, Head::Linear);
        let w = [0.5, -1.0, 2.0, 0.25];
        let mut vals = w.to_vec();
        vals.extend([0.0, 0.0]);
        let mlp = Mlp::from_values(a, vals).unwrap();
        let x = [1.5, -0.5];
        let y = [0.2, 0.7];
        let g = backprop(&mlp, &x, Targets::Values(&y), Loss::SquaredError).unwrap();
        let wx = [w[0] * x[0] + w[1] * x[1], w[2] * x[0] + w[3] * x[1]];
        let r = [wx[0] - y[0], wx[1] - y[1]];
        let want = [2.0 * r[0] * x[0], 2.0 * r[0] * x[1], 2.0 * r[1] * x[0], 2.0 * r[1] * x[1], 2.0 * r[0], 2.0 * r[1]];
        for (a, b) in g.iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn backprop_matches_finite_differences() {
        let mut s = stream(11);
        let cases: [(Arch, Loss, bool); 3] = [
            (arch(&[2, 8, 8, 3], Activation::Tanh, Head::Softmax), Loss::CrossEntropy, true),
            (arch(&[3, 6, 2], Activation::Tanh, Head::Linear), Loss::GaussianNll { sigma: 0.3 }, false),
            (arch(&[3, 5, 4], Activation::Tanh, Head::Softmax), Loss::SquaredError, false),
        ];
        for (a, loss, classes) in cases {
            let mlp = Mlp::init(a.clone(), &mut s).unwrap();
            let n = 5;
            let x: Vec<f64> = (0..n * a.input_dim()).map(|_| rng::uniform(&mut s, -1.0, 1.0)).collect();
            let cls: Vec<usize> = (0..n).map(|i| i % a.output_dim()).collect();
            let vals: Vec<f64> = (0..n * a.output_dim()).map(|_| rng::uniform(&mut s, -1.0, 1.0)).collect();
            let t = if classes { Targets::Classes(&cls) } else { Targets::Values(&vals) };
            let g = backprop(&mlp, &x, t, loss).unwrap();
            let fd = central_difference(
                |p| {
                    let m = Mlp::from_values(a.clone(), p.to_vec()).unwrap();
                    loss_value(&m, &x, t, loss).unwrap()
                },
                mlp.values(),
                1e-5,
            );
            let err = max_rel_err(&g, &fd);
            assert!(err < 1e-4, "{loss:?}: max rel err {err}");
        }
    }

    #[test]
    fn input_vjp_matches_finite_differences() {
        let mut s = stream(5);
        let a = arch(&[3, 7, 7, 4], Activation::Tanh, Head::Softmax);
        let mlp = Mlp::init(a, &mut s).unwrap();
        let x = [0.2, -0.4, 0.9];
        let w = [0.3, -1.0, 2.0, 0.5];
        let cache = mlp.forward_cached(&x, 1).unwrap();
        let g = mlp.backward(&cache, &w, None).unwrap();
        let fd = central_difference(|x| math::dot(&mlp.forward(x).unwrap(), &w), &x, 1e-5);
        assert!(max_rel_err(&g, &fd) < 1e-6);
    }

    #[test]
    fn cross_entropy_converges_to_stationary_point() {
        let mut s = stream(2);
        let a = arch(&[2, 4, 2], Activation::Tanh, Head::Softmax);
        let mut mlp = Mlp::init(a, &mut s).unwrap();
        let x = [0.5, -0.5];
        let mut adam = super::super::AdamState::new(mlp.num_params(), super::super::AdamConfig { step_size: 0.05, ..Default::default() });
        let mut norm = f64::MAX;
        for _ in 0..20_000 {
            let g = backprop(&mlp, &x, Targets::Classes(&[1]), Loss::CrossEntropy).unwrap();
            norm = math::norm(&g);
            if norm < 1e-6 {
                break;
            }
            adam.step(mlp.values_mut(), &g).unwrap();
        }
        assert!(norm < 1e-6, "gradient norm {norm}");
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mlp = Mlp::zeros(arch(&[2, 2], Activation::Tanh, Head::Linear)).unwrap();
        assert!(matches!(
            backprop(&mlp, &[], Targets::Values(&[]), Loss::SquaredError),
            Err(Error::Precondition(_))
        ));
    }

    #[test]
    fn non_finite_reports_layer() {
        let a = arch(&[1, 2, 1], Activation::Identity, Head::Linear);
        let mlp = Mlp::from_values(a, vec![1e300, 1e300, 0.0, 0.0, 1e300, 1e300, 0.0]).unwrap();
        assert_eq!(mlp.forward(&[1e300]), Err(Error::NonFinite { layer: 0 }));
    }
}
