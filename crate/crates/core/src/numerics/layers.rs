use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{gemm, gemm_into, Tensor2, Trans};

/// Handle to one named tensor inside a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Flat, ordered collection of named parameter tensors.
///
/// Gradients and optimizer state are stores with the same layout, so a
/// `ParamId` indexes all of them.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor2>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor2) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &Tensor2 {
        &self.tensors[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor2 {
        &mut self.tensors[id.0]
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor2)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor2)> {
        self.names
            .iter()
            .map(String::as_str)
            .zip(self.tensors.iter_mut())
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    /// A store with identical names and shapes, all zeros.
    pub fn zeros_like(&self) -> ParamStore {
        ParamStore {
            names: self.names.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|t| Tensor2::zeros(t.rows(), t.cols()))
                .collect(),
        }
    }

    pub fn accumulate(&mut self, id: ParamId, delta: &Tensor2) {
        self.tensors[id.0].add_assign(delta);
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data().len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(Tensor2::is_finite)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    #[default]
    Gelu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                0.5 * x * (1.0 + u.tanh())
            }
        }
    }

    #[inline]
    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let u = GELU_C * (x + GELU_A * x * x * x);
                let t = u.tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
        }
    }
}

/// Affine map `y = x W + b` with `W: in×out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    /// Registers a new layer with Glorot-uniform weights and zero bias.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let w = Tensor2::from_fn(input, output, |_, _| rng.gen_range(-limit..limit));
        let weight = store.add(format!("{name}.weight"), w);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor2::zeros(1, output)));
        Self { weight, bias }
    }

    pub fn in_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).rows()
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        store.get(self.weight).cols()
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor2) -> Tensor2 {
        let w = store.get(self.weight);
        let mut y = Tensor2::zeros(x.rows(), w.cols());
        if let Some(b) = self.bias {
            let b = store.get(b);
            for r in 0..y.rows() {
                y.row_mut(r).copy_from_slice(b.data());
            }
            gemm_into(1.0, x, Trans::N, w, Trans::N, 1.0, &mut y);
        } else {
            gemm_into(1.0, x, Trans::N, w, Trans::N, 0.0, &mut y);
        }
        y
    }

    /// Accumulates parameter gradients into `grads` and returns `dx`.
    pub fn backward(
        &self,
        store: &ParamStore,
        x: &Tensor2,
        dy: &Tensor2,
        grads: &mut ParamStore,
    ) -> Tensor2 {
        self.backward_params(x, dy, grads);
        gemm(dy, Trans::N, store.get(self.weight), Trans::T)
    }

    /// Parameter-only backward, for layers whose input needs no gradient.
    pub fn backward_params(&self, x: &Tensor2, dy: &Tensor2, grads: &mut ParamStore) {
        gemm_into(
            1.0,
            x,
            Trans::T,
            dy,
            Trans::N,
            1.0,
            grads.get_mut(self.weight),
        );
        if let Some(b) = self.bias {
            grads.accumulate(b, &dy.sum_rows());
        }
    }
}

/// Multi-layer perceptron with an activation between layers (none after the last).
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Linear>,
    pub activation: Activation,
}

#[derive(Debug, Clone)]
pub struct MlpCache {
    inputs: Vec<Tensor2>,
    pre: Vec<Tensor2>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: &[usize],
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(dims.len() >= 2, "an MLP needs input and output dims");
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| Linear::new(store, &format!("{name}.{i}"), w[0], w[1], true, rng))
            .collect();
        Self { layers, activation }
    }

    pub fn out_dim(&self, store: &ParamStore) -> usize {
        self.layers.last().map_or(0, |l| l.out_dim(store))
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor2) -> Tensor2 {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(store, &h);
            if i + 1 < self.layers.len() {
                h = h.map(|v| self.activation.apply(v));
            }
        }
        h
    }

    pub fn forward_cached(&self, store: &ParamStore, x: &Tensor2) -> (Tensor2, MlpCache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.forward(store, &h);
            inputs.push(h);
            if i + 1 < self.layers.len() {
                h = z.map(|v| self.activation.apply(v));
                pre.push(z);
            } else {
                h = z;
            }
        }
        (h, MlpCache { inputs, pre })
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &MlpCache,
        dy: &Tensor2,
        grads: &mut ParamStore,
    ) -> Tensor2 {
        let mut d = dy.clone();
        for i in (0..self.layers.len()).rev() {
            if i + 1 < self.layers.len() {
                let z = &cache.pre[i];
                for (g, &zv) in d.data_mut().iter_mut().zip(z.data()) {
                    *g *= self.activation.derivative(zv);
                }
            }
            d = self.layers[i].backward(store, &cache.inputs[i], &d, grads);
        }
        d
    }
}

/// Per-row layer normalization with learnable gain and offset.
#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache {
    normalized: Tensor2,
    inv_std: Vec<f64>,
}

const LN_EPS: f64 = 1e-5;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor2::filled(1, dim, 1.0));
        let beta = store.add(format!("{name}.beta"), Tensor2::zeros(1, dim));
        Self { gamma, beta }
    }

    pub fn forward_cached(&self, store: &ParamStore, x: &Tensor2) -> (Tensor2, LayerNormCache) {
        let gamma = store.get(self.gamma).data();
        let beta = store.get(self.beta).data();
        let d = x.cols() as f64;
        let mut normalized = Tensor2::zeros(x.rows(), x.cols());
        let mut out = Tensor2::zeros(x.rows(), x.cols());
        let mut inv_std = Vec::with_capacity(x.rows());
        for r in 0..x.rows() {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std.push(is);
            let nrow = normalized.row_mut(r);
            for (n, v) in nrow.iter_mut().zip(row) {
                *n = (v - mean) * is;
            }
            let nrow = normalized.row(r).to_vec();
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = nrow[c] * gamma[c] + beta[c];
            }
        }
        (
            out,
            LayerNormCache {
                normalized,
                inv_std,
            },
        )
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor2) -> Tensor2 {
        self.forward_cached(store, x).0
    }

    pub fn backward(
        &self,
        store: &ParamStore,
        cache: &LayerNormCache,
        dy: &Tensor2,
        grads: &mut ParamStore,
    ) -> Tensor2 {
        let gamma = store.get(self.gamma).data();
        let cols = dy.cols();
        let d = cols as f64;
        let mut dgamma = Tensor2::zeros(1, cols);
        let mut dbeta = Tensor2::zeros(1, cols);
        let mut dx = Tensor2::zeros(dy.rows(), cols);
        let mut dxhat = vec![0.0; cols];
        for r in 0..dy.rows() {
            let dyr = dy.row(r);
            let xh = cache.normalized.row(r);
            for c in 0..cols {
                dgamma.data_mut()[c] += dyr[c] * xh[c];
                dbeta.data_mut()[c] += dyr[c];
                dxhat[c] = dyr[c] * gamma[c];
            }
            let mean_d = dxhat.iter().sum::<f64>() / d;
            let mean_dx = dxhat.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d;
            let is = cache.inv_std[r];
            for (c, o) in dx.row_mut(r).iter_mut().enumerate() {
                *o = is * (dxhat[c] - mean_d - xh[c] * mean_dx);
            }
        }
        grads.accumulate(self.gamma, &dgamma);
        grads.accumulate(self.beta, &dbeta);
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::finite_diff_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rel_err(a: &[f64], b: &[f64]) -> f64 {
        let scale = b.iter().chain(a).fold(1e-8f64, |m, v| m.max(v.abs()));
        a.iter()
            .zip(b)
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max)
            / scale
    }

    /// Checks d(Σ w⊙f(x))/dθ for every parameter and for the input.
    fn check<F, B>(store: &ParamStore, x: &Tensor2, forward: F, backward: B)
    where
        F: Fn(&ParamStore, &Tensor2) -> Tensor2,
        B: Fn(&ParamStore, &Tensor2, &Tensor2, &mut ParamStore) -> Tensor2,
    {
        let y = forward(store, x);
        let w = Tensor2::from_fn(y.rows(), y.cols(), |r, c| {
            ((r * 7 + c * 3) % 5) as f64 * 0.3 - 0.5
        });
        let obj = |s: &ParamStore, x: &Tensor2| -> f64 {
            forward(s, x)
                .data()
                .iter()
                .zip(w.data())
                .map(|(a, b)| a * b)
                .sum()
        };
        let mut grads = store.zeros_like();
        let dx = backward(store, x, &w, &mut grads);
        let fdx = finite_diff_grad(
            |v| {
                obj(
                    store,
                    &Tensor2::from_vec(x.rows(), x.cols(), v.to_vec()).unwrap(),
                )
            },
            x.data(),
            1e-5,
        )
        .unwrap();
        assert!(rel_err(dx.data(), &fdx) < 1e-4, "input gradient mismatch");
        for id in store.ids() {
            let t = store.get(id);
            let fd = finite_diff_grad(
                |v| {
                    let mut s = store.clone();
                    *s.get_mut(id) = Tensor2::from_vec(t.rows(), t.cols(), v.to_vec()).unwrap();
                    obj(&s, x)
                },
                t.data(),
                1e-5,
            )
            .unwrap();
            assert!(
                rel_err(grads.get(id).data(), &fd) < 1e-4,
                "param {} gradient mismatch",
                store.name(id)
            );
        }
    }

    #[test]
    fn mlp_gradients() {
        for act in [Activation::Gelu, Activation::Relu] {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut store = ParamStore::new();
            let mlp = Mlp::new(&mut store, "m", &[4, 6, 3], act, &mut rng);
            let x = Tensor2::from_fn(5, 4, |_, _| rng.gen_range(-1.0..1.0));
            check(
                &store,
                &x,
                |s, x| mlp.forward(s, x),
                |s, x, dy, g| {
                    let (_, cache) = mlp.forward_cached(s, x);
                    mlp.backward(s, &cache, dy, g)
                },
            );
        }
    }

    #[test]
    fn layer_norm_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 5);
        for v in store.get_mut(ln.gamma).data_mut() {
            *v = rng.gen_range(0.5..1.5);
        }
        for v in store.get_mut(ln.beta).data_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let x = Tensor2::from_fn(4, 5, |_, _| rng.gen_range(-1.0..1.0));
        check(
            &store,
            &x,
            |s, x| ln.forward(s, x),
            |s, x, dy, g| {
                let (_, cache) = ln.forward_cached(s, x);
                ln.backward(s, &cache, dy, g)
            },
        );
    }

    #[test]
    fn layer_norm_output_is_standardized() {
        let mut store = ParamStore::new();
        let ln = LayerNorm::new(&mut store, "ln", 4);
        let x = Tensor2::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap();
        let y = ln.forward(&store, &x);
        let mean: f64 = y.data().iter().sum::<f64>() / 4.0;
        let var: f64 = y.data().iter().map(|v| v * v).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-12);
        assert!((var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn linear_without_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "l", 3, 2, false, &mut rng);
        assert_eq!(store.len(), 1);
        let x = Tensor2::from_fn(2, 3, |_, _| rng.gen_range(-1.0..1.0));
        check(
            &store,
            &x,
            |s, x| lin.forward(s, x),
            |s, x, dy, g| lin.backward(s, x, dy, g),
        );
    }
}
