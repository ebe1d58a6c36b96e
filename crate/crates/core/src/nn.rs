//! Dense layers with explicit backward passes.
//!
//! Every layer exposes `forward` (inference), a training forward that keeps
//! what the backward pass needs, and `backward`, which writes parameter
//! gradients into a [`Gradients`] store under dotted names such as
//! `encoder.blocks.0.mlp.fc1.weight` and returns the input gradient.

use std::collections::BTreeMap;

use ndarray::{Array1, Array2, ArrayD, ArrayView2, ArrayViewD, ArrayViewMutD, Axis, Dimension, Zip};

use crate::init::{self, SeededRng};
use crate::scalar::Scalar;

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const INIT_STD: f64 = 0.02;

/// Gradients keyed by dotted parameter name.
#[derive(Debug, Clone, Default)]
pub struct Gradients<T> {
    map: BTreeMap<String, ArrayD<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn new() -> Self {
        Self { map: BTreeMap::new() }
    }

    pub fn accumulate<D: Dimension>(&mut self, name: &str, grad: ndarray::ArrayView<'_, T, D>) {
        let grad = grad.into_dyn();
        match self.map.get_mut(name) {
            Some(acc) => *acc += &grad,
            None => {
                self.map.insert(name.to_string(), grad.to_owned());
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<T>> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<T>)> {
        self.map.iter()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Largest absolute entry over all parameters whose name starts with `prefix`.
    pub fn max_abs_with_prefix(&self, prefix: &str) -> T {
        self.map
            .iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .flat_map(|(_, v)| v.iter())
            .fold(T::zero(), |m, &v| m.max(v.abs()))
    }
}

/// Enumerates named parameter tensors.
pub trait Parameterized<T: Scalar> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>);
    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>);
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// `y = x W + b` with `W: [in, out]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    pub weight: Array2<T>,
    pub bias: Option<Array1<T>>,
}

impl<T: Scalar> Linear<T> {
    pub fn init(rng: &mut SeededRng, d_in: usize, d_out: usize, bias: bool) -> Self {
        Self::init_with_std(rng, d_in, d_out, bias, INIT_STD)
    }

    pub fn init_with_std(rng: &mut SeededRng, d_in: usize, d_out: usize, bias: bool, std: f64) -> Self {
        Self {
            weight: init::trunc_normal(rng, (d_in, d_out), std),
            bias: bias.then(|| Array1::zeros(d_out)),
        }
    }

    pub fn zeros(d_in: usize, d_out: usize, bias: bool) -> Self {
        Self {
            weight: Array2::zeros((d_in, d_out)),
            bias: bias.then(|| Array1::zeros(d_out)),
        }
    }

    pub fn d_in(&self) -> usize {
        self.weight.nrows()
    }

    pub fn d_out(&self) -> usize {
        self.weight.ncols()
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        let mut y = x.dot(&self.weight);
        if let Some(b) = &self.bias {
            y += b;
        }
        y
    }

    pub fn backward(
        &self,
        x: ArrayView2<'_, T>,
        dy: ArrayView2<'_, T>,
        grads: &mut Gradients<T>,
        prefix: &str,
    ) -> Array2<T> {
        grads.accumulate(&join(prefix, "weight"), x.t().dot(&dy).view());
        if self.bias.is_some() {
            grads.accumulate(&join(prefix, "bias"), dy.sum_axis(Axis(0)).view());
        }
        dy.dot(&self.weight.t())
    }
}

impl<T: Scalar> Parameterized<T> for Linear<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        out.push((join(prefix, "weight"), self.weight.view().into_dyn()));
        if let Some(b) = &self.bias {
            out.push((join(prefix, "bias"), b.view().into_dyn()));
        }
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        out.push((join(prefix, "weight"), self.weight.view_mut().into_dyn()));
        if let Some(b) = &mut self.bias {
            out.push((join(prefix, "bias"), b.view_mut().into_dyn()));
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm<T> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
}

#[derive(Debug, Clone)]
pub struct LayerNormCache<T> {
    xhat: Array2<T>,
    inv_std: Array1<T>,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(dim: usize) -> Self {
        Self {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        self.forward_train(x).0
    }

    pub fn forward_train(&self, x: ArrayView2<'_, T>) -> (Array2<T>, LayerNormCache<T>) {
        let n = T::from_usize_lossy(x.ncols());
        let eps = T::c(LAYER_NORM_EPS);
        let mut xhat = x.to_owned();
        let mut inv_std = Array1::zeros(x.nrows());
        for (mut row, s) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
            let mean = row.sum() / n;
            row.mapv_inplace(|v| v - mean);
            let var = row.iter().map(|&v| v * v).sum::<T>() / n;
            *s = T::one() / (var + eps).sqrt();
            let k = *s;
            row.mapv_inplace(|v| v * k);
        }
        let y = &xhat * &self.gamma + &self.beta;
        (y, LayerNormCache { xhat, inv_std })
    }

    pub fn backward(
        &self,
        dy: ArrayView2<'_, T>,
        cache: &LayerNormCache<T>,
        grads: &mut Gradients<T>,
        prefix: &str,
    ) -> Array2<T> {
        grads.accumulate(&join(prefix, "gamma"), (&dy * &cache.xhat).sum_axis(Axis(0)).view());
        grads.accumulate(&join(prefix, "beta"), dy.sum_axis(Axis(0)).view());
        let n = T::from_usize_lossy(dy.ncols());
        let dxhat = &dy * &self.gamma;
        let mut dx = Array2::zeros(dy.raw_dim());
        for ((mut out, g), (xh, &s)) in dx
            .rows_mut()
            .into_iter()
            .zip(dxhat.rows())
            .zip(cache.xhat.rows().into_iter().zip(cache.inv_std.iter()))
        {
            let mean_g = g.sum() / n;
            let mean_gx = g.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<T>() / n;
            Zip::from(&mut out)
                .and(&g)
                .and(&xh)
                .for_each(|o, &gi, &xi| *o = s * (gi - mean_g - xi * mean_gx));
        }
        dx
    }
}

impl<T: Scalar> Parameterized<T> for LayerNorm<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        out.push((join(prefix, "gamma"), self.gamma.view().into_dyn()));
        out.push((join(prefix, "beta"), self.beta.view().into_dyn()));
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        out.push((join(prefix, "gamma"), self.gamma.view_mut().into_dyn()));
        out.push((join(prefix, "beta"), self.beta.view_mut().into_dyn()));
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu<T: Scalar>(x: T) -> T {
    let inner = T::c(SQRT_2_OVER_PI) * (x + T::c(GELU_CUBIC) * x * x * x);
    T::c(0.5) * x * (T::one() + inner.tanh())
}

#[inline]
pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let k = T::c(SQRT_2_OVER_PI);
    let a = T::c(GELU_CUBIC);
    let th = (k * (x + a * x * x * x)).tanh();
    let half = T::c(0.5);
    half * (T::one() + th) + half * x * (T::one() - th * th) * k * (T::one() + T::c(3.0) * a * x * x)
}

/// Two-layer perceptron `fc2(gelu(fc1(x)))`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp<T> {
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Debug, Clone)]
pub struct MlpCache<T> {
    pre: Array2<T>,
    hidden: Array2<T>,
}

impl<T: Scalar> Mlp<T> {
    pub fn init(rng: &mut SeededRng, d_in: usize, d_hidden: usize, d_out: usize) -> Self {
        Self {
            fc1: Linear::init(rng, d_in, d_hidden, true),
            fc2: Linear::init(rng, d_hidden, d_out, true),
        }
    }

    pub fn forward(&self, x: ArrayView2<'_, T>) -> Array2<T> {
        self.forward_train(x).0
    }

    pub fn forward_train(&self, x: ArrayView2<'_, T>) -> (Array2<T>, MlpCache<T>) {
        let pre = self.fc1.forward(x);
        let hidden = pre.mapv(gelu);
        let y = self.fc2.forward(hidden.view());
        (y, MlpCache { pre, hidden })
    }

    pub fn backward(
        &self,
        x: ArrayView2<'_, T>,
        dy: ArrayView2<'_, T>,
        cache: &MlpCache<T>,
        grads: &mut Gradients<T>,
        prefix: &str,
    ) -> Array2<T> {
        let dh = self.fc2.backward(cache.hidden.view(), dy, grads, &join(prefix, "fc2"));
        let dpre = Zip::from(&dh).and(&cache.pre).map_collect(|&g, &p| g * gelu_grad(p));
        self.fc1.backward(x, dpre.view(), grads, &join(prefix, "fc1"))
    }
}

impl<T: Scalar> Parameterized<T> for Mlp<T> {
    fn params<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        self.fc1.params(&join(prefix, "fc1"), out);
        self.fc2.params(&join(prefix, "fc2"), out);
    }

    fn params_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        self.fc1.params_mut(&join(prefix, "fc1"), out);
        self.fc2.params_mut(&join(prefix, "fc2"), out);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;

    /// Central-difference derivative of `loss` with respect to `x[idx]`.
    fn numeric(x: &Array2<f64>, idx: (usize, usize), loss: impl Fn(&Array2<f64>) -> f64) -> f64 {
        let h = 1e-5;
        let mut xp = x.clone();
        xp[idx] += h;
        let mut xm = x.clone();
        xm[idx] -= h;
        (loss(&xp) - loss(&xm)) / (2.0 * h)
    }

    #[test]
    fn gelu_derivative_matches_central_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.2, 1.5, 4.0] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x = {x}");
        }
    }

    #[test]
    fn layer_norm_input_gradient() {
        let mut rng = init::rng(5);
        let mut ln = LayerNorm::<f64>::new(6);
        ln.gamma = init::normal(&mut rng, 6, 1.0);
        ln.beta = init::normal(&mut rng, 6, 1.0);
        let x: Array2<f64> = init::normal(&mut rng, (3, 6), 1.0);
        let r: Array2<f64> = init::normal(&mut rng, (3, 6), 1.0);
        let loss = |x: &Array2<f64>| (&ln.forward(x.view()) * &r).sum();
        let (_, cache) = ln.forward_train(x.view());
        let mut grads = Gradients::new();
        let dx = ln.backward(r.view(), &cache, &mut grads, "ln");
        for idx in [(0, 0), (1, 3), (2, 5)] {
            assert!((dx[idx] - numeric(&x, idx, loss)).abs() < 1e-7);
        }
        assert!(grads.get("ln.gamma").is_some() && grads.get("ln.beta").is_some());
    }

    #[test]
    fn mlp_input_gradient() {
        let mut rng = init::rng(9);
        let mlp = Mlp::<f64>::init(&mut rng, 4, 8, 3);
        let x: Array2<f64> = init::normal(&mut rng, (5, 4), 1.0);
        let r: Array2<f64> = init::normal(&mut rng, (5, 3), 1.0);
        let loss = |x: &Array2<f64>| (&mlp.forward(x.view()) * &r).sum();
        let (_, cache) = mlp.forward_train(x.view());
        let mut grads = Gradients::new();
        let dx = mlp.backward(x.view(), r.view(), &cache, &mut grads, "mlp");
        for idx in [(0, 0), (2, 1), (4, 3)] {
            assert!((dx[idx] - numeric(&x, idx, loss)).abs() < 1e-9);
        }
        assert_eq!(grads.len(), 4);
    }

    #[test]
    fn gradients_accumulate_by_name() {
        let mut g = Gradients::<f32>::new();
        g.accumulate("a", ndarray::arr1(&[1.0, 2.0]).view());
        g.accumulate("a", ndarray::arr1(&[0.5, -4.0]).view());
        assert_eq!(g.get("a").unwrap().as_slice().unwrap(), &[1.5, -2.0]);
        assert_eq!(g.max_abs_with_prefix("a"), 2.0);
        assert_eq!(g.max_abs_with_prefix("b"), 0.0);
    }
}
