use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::{Tape, Tensor, Var};

/// Named model weight. Untrainable parameters are never touched by the optimizer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct Parameter<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub trainable: bool,
}

impl<T: Scalar> Parameter<T> {
    pub fn new(name: impl Into<String>, tensor: Tensor<T>, trainable: bool) -> Self {
        Self {
            name: name.into(),
            tensor: tensor.with_requires_grad(true),
            trainable,
        }
    }
}

/// Ordered collection of parameters; the order fixes optimizer-state layout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(bound = "T: Scalar")]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn push(&mut self, p: Parameter<T>) -> usize {
        self.params.push(p);
        self.params.len() - 1
    }

    pub fn get(&self, i: usize) -> &Parameter<T> {
        &self.params[i]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut Parameter<T> {
        &mut self.params[i]
    }

    pub fn find(&self, name: &str) -> Option<usize> {
        self.params.iter().position(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.tensor.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.tensor.len()).sum()
    }

    /// Puts every parameter on `tape` as a leaf; trainable ones require grad.
    pub fn register(&self, tape: &mut Tape<T>) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone().with_requires_grad(p.trainable)))
            .collect()
    }

    /// Gradients of the registered leaves after `tape.backward`, zero-filled
    /// for parameters the loss did not reach. Also stored on each parameter.
    pub fn collect_grads(&mut self, tape: &Tape<T>, vars: &[Var]) -> Vec<Vec<T>> {
        let grads: Vec<Vec<T>> = self
            .params
            .iter()
            .zip(vars)
            .map(|(p, &v)| match tape.grad(v) {
                Some(g) if p.trainable => g.to_vec(),
                _ => vec![T::zero(); p.tensor.len()],
            })
            .collect();
        for (p, g) in self.params.iter_mut().zip(&grads) {
            p.tensor.set_grad(g.clone()).expect("grad shape matches parameter");
        }
        grads
    }

    /// FNV-1a over the bit patterns of every value, for cheap equality checks.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for p in &self.params {
            for v in p.tensor.data() {
                for b in v.to_f64_lossy().to_bits().to_le_bytes() {
                    h ^= u64::from(b);
                    h = h.wrapping_mul(0x0100_0000_01b3);
                }
            }
        }
        h
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment buffers, lazily shaped on the first step.
#[derive(Debug, Clone, Default)]
pub struct AdamState<T> {
    step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new() -> Self {
        Self {
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&self) -> u64 {
        self.step
    }
}

/// One bias-corrected Adam update on every trainable parameter.
pub fn adam_step<T: Scalar>(
    params: &mut ParamStore<T>,
    grads: &[Vec<T>],
    hp: &AdamConfig,
    state: &mut AdamState<T>,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::StateCorruption(format!(
            "{} gradients for {} parameters",
            grads.len(),
            params.len()
        )));
    }
    if state.step == 0 && state.m.is_empty() {
        state.m = params.iter().map(|p| vec![T::zero(); p.tensor.len()]).collect();
        state.v = state.m.clone();
    }
    if state.m.len() != params.len() {
        return Err(Error::StateCorruption("parameter count changed".into()));
    }
    for (i, p) in params.iter().enumerate() {
        if state.m[i].len() != p.tensor.len() || grads[i].len() != p.tensor.len() {
            return Err(Error::StateCorruption(p.name.clone()));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (T::lit(hp.beta1), T::lit(hp.beta2));
    let bc1 = T::one() - b1.powi(t);
    let bc2 = T::one() - b2.powi(t);
    let (lr, eps) = (T::lit(hp.lr), T::lit(hp.eps));
    for (i, g) in grads.iter().enumerate() {
        let p = params.get_mut(i);
        if !p.trainable {
            continue;
        }
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for (j, w) in p.tensor.data_mut().iter_mut().enumerate() {
            m[j] = b1 * m[j] + (T::one() - b1) * g[j];
            v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            *w -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}

pub fn global_norm<T: Scalar>(grads: &[Vec<T>]) -> T {
    let mut s = T::zero();
    for g in grads {
        for &x in g {
            s += x * x;
        }
    }
    s.sqrt()
}

/// Rescales all gradients by `max_norm / norm` when their joint L2 norm
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm<T: Scalar>(grads: &mut [Vec<T>], max_norm: T) -> T {
    let norm = global_norm(grads);
    if norm > max_norm {
        let f = max_norm / norm;
        for g in grads.iter_mut() {
            for x in g.iter_mut() {
                *x *= f;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store(vals: &[f64], trainable: bool) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        s.push(Parameter::new("w", Tensor::vector(vals.to_vec()), trainable));
        s
    }

    #[test]
    fn first_step_with_unit_gradient() {
        let mut s = store(&[0.5, -0.25], true);
        let mut st = AdamState::new();
        adam_step(&mut s, &[vec![1.0, 1.0]], &AdamConfig::default(), &mut st).unwrap();
        // m_hat = v_hat = 1, so the step is lr / (1 + eps)
        let expected: f64 = 1e-4 / (1.0 + 1e-8);
        let d = s.get(0).tensor.data();
        assert!(((0.5 - d[0]) - expected).abs() < 1e-15);
        assert!(((-0.25 - d[1]) - expected).abs() < 1e-15);
        assert!(((0.5 - d[0]) - 9.99999995e-5f64).abs() / 9.99999995e-5 < 1e-8);
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut s = store(&[0.5, -0.25], true);
        let mut st = AdamState::new();
        for _ in 0..3 {
            adam_step(&mut s, &[vec![0.0, 0.0]], &AdamConfig::default(), &mut st).unwrap();
        }
        assert_eq!(s.get(0).tensor.data(), &[0.5, -0.25]);
    }

    #[test]
    fn untrainable_bank_is_bitwise_frozen() {
        let mut s = store(&[0.1, 0.2], true);
        s.push(Parameter::new("bank", Tensor::vector(vec![3.0, -3.0]), false));
        let before = s.get(1).tensor.data().to_vec();
        let mut st = AdamState::new();
        for _ in 0..100 {
            adam_step(
                &mut s,
                &[vec![0.3, -0.1], vec![1.0, 1.0]],
                &AdamConfig::default(),
                &mut st,
            )
            .unwrap();
        }
        assert_eq!(
            s.get(1).tensor.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>(),
            before.iter().map(|x| x.to_bits()).collect::<Vec<_>>()
        );
        assert_ne!(s.get(0).tensor.data(), &[0.1, 0.2]);
    }

    #[test]
    fn shape_drift_is_state_corruption() {
        let mut s = store(&[0.1, 0.2], true);
        let mut st = AdamState::new();
        adam_step(&mut s, &[vec![0.1, 0.1]], &AdamConfig::default(), &mut st).unwrap();
        let mut bigger = store(&[0.1, 0.2, 0.3], true);
        let err = adam_step(&mut bigger, &[vec![0.1; 3]], &AdamConfig::default(), &mut st);
        assert!(matches!(err, Err(Error::StateCorruption(_))));
    }

    #[test]
    fn clipping_examples() {
        let mut g = vec![vec![0.3, 0.4]];
        clip_global_norm(&mut g, 1.0);
        assert_eq!(g, vec![vec![0.3, 0.4]]);

        let mut g: Vec<Vec<f64>> = vec![vec![3.0, 4.0]];
        let n = clip_global_norm(&mut g, 1.0);
        assert_eq!(n, 5.0);
        assert!((g[0][0] - 0.6).abs() < 1e-15 && (g[0][1] - 0.8).abs() < 1e-15);

        let mut g = vec![vec![0.0; 3], vec![0.0]];
        clip_global_norm(&mut g, 1.0);
        assert!(g.iter().flatten().all(|&x| x == 0.0));
    }
}
