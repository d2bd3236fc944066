//! Named parameter tensors with gradient accumulators and AdamW state.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{RecorrError, Result};
use crate::vol::Scalar;

use super::kernels::ConvShape;

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub shape: Vec<usize>,
    pub values: Vec<T>,
    pub grad: Vec<T>,
    /// First and second AdamW moments.
    pub m: Vec<T>,
    pub v: Vec<T>,
}

impl<T: Scalar> ParamEntry<T> {
    fn new(shape: Vec<usize>, values: Vec<T>) -> Self {
        let n = values.len();
        ParamEntry {
            shape,
            values,
            grad: vec![T::zero(); n],
            m: vec![T::zero(); n],
            v: vec![T::zero(); n],
        }
    }
}

/// All trainable tensors of a model, keyed by name. The BTreeMap keeps
/// iteration order deterministic, which checkpoints and the optimizer
/// rely on.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: BTreeMap<String, ParamEntry<T>>,
    /// Completed optimizer steps.
    pub step: u64,
}

#[derive(Debug, Clone, Copy)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamW {
    fn default() -> Self {
        AdamW {
            lr: 7e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 4e-4,
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            entries: BTreeMap::new(),
            step: 0,
        }
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, values: Vec<T>) -> Result<()> {
        let n: usize = shape.iter().product();
        if n != values.len() {
            return Err(RecorrError::shape(
                "ParamStore::insert",
                format!("{n} values for shape {shape:?}"),
                format!("{}", values.len()),
            ));
        }
        if self.entries.contains_key(name) {
            return Err(RecorrError::InvalidArgument(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        self.entries.insert(name.to_string(), ParamEntry::new(shape, values));
        Ok(())
    }

    /// Conv weights initialized uniformly in +-sqrt(1 / fan_in), biases
    /// (when requested) at zero under "<name>.b".
    pub fn init_conv<R: Rng>(
        &mut self,
        name: &str,
        shape: ConvShape,
        bias: bool,
        rng: &mut R,
    ) -> Result<()> {
        let fan_in = (shape.c_in * shape.k[0] * shape.k[1] * shape.k[2]) as f64;
        let bound = (1.0 / fan_in).sqrt();
        let values: Vec<T> = (0..shape.len())
            .map(|_| T::from_f64(rng.gen_range(-bound..bound)))
            .collect();
        self.insert(name, shape.dims_vec(), values)?;
        if bias {
            self.insert(&format!("{name}.b"), vec![shape.c_out], vec![T::zero(); shape.c_out])?;
        }
        Ok(())
    }

    /// Zero-initialized conv (used for the residual-field heads) plus a
    /// zero bias when requested.
    pub fn init_conv_zero(&mut self, name: &str, shape: ConvShape, bias: bool) -> Result<()> {
        self.insert(name, shape.dims_vec(), vec![T::zero(); shape.len()])?;
        if bias {
            self.insert(&format!("{name}.b"), vec![shape.c_out], vec![T::zero(); shape.c_out])?;
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Result<&ParamEntry<T>> {
        self.entries
            .get(name)
            .ok_or_else(|| RecorrError::InvalidArgument(format!("unknown parameter {name:?}")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut ParamEntry<T>> {
        self.entries
            .get_mut(name)
            .ok_or_else(|| RecorrError::InvalidArgument(format!("unknown parameter {name:?}")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &ParamEntry<T>)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut ParamEntry<T>)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn param_count(&self) -> usize {
        self.entries.values().map(|e| e.values.len()).sum()
    }

    /// Adds `g` into the gradient accumulator of `name`.
    pub fn accumulate_grad(&mut self, name: &str, g: &[T]) -> Result<()> {
        let e = self.get_mut(name)?;
        if e.grad.len() != g.len() {
            return Err(RecorrError::shape(
                "accumulate_grad",
                format!("{} values", e.grad.len()),
                format!("{}", g.len()),
            ));
        }
        for (a, b) in e.grad.iter_mut().zip(g.iter()) {
            *a += *b;
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for e in self.entries.values_mut() {
            e.grad.fill(T::zero());
        }
    }

    /// Global L2 norm of all gradient accumulators.
    pub fn grad_norm(&self) -> f64 {
        let mut s = 0.0;
        for e in self.entries.values() {
            for g in &e.grad {
                let g = g.as_f64();
                s += g * g;
            }
        }
        s.sqrt()
    }

    /// Scales every gradient so the global norm is at most `max_norm`.
    /// Returns the pre-clip norm when clipping fired.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> Option<f64> {
        let norm = self.grad_norm();
        if norm <= max_norm || norm == 0.0 {
            return None;
        }
        let k = T::from_f64(max_norm / norm);
        for e in self.entries.values_mut() {
            for g in e.grad.iter_mut() {
                *g *= k;
            }
        }
        Some(norm)
    }

    pub fn grads_all_finite(&self) -> bool {
        self.entries
            .values()
            .all(|e| e.grad.iter().all(|g| g.is_finite()))
    }

    /// One decoupled-weight-decay Adam step over every entry; gradient
    /// accumulators are cleared afterwards.
    pub fn adamw_step(&mut self, hp: &AdamW) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - hp.beta1.powi(t);
        let bc2 = 1.0 - hp.beta2.powi(t);
        let (b1, b2) = (T::from_f64(hp.beta1), T::from_f64(hp.beta2));
        let (ob1, ob2) = (T::from_f64(1.0 - hp.beta1), T::from_f64(1.0 - hp.beta2));
        let lr = T::from_f64(hp.lr);
        let wd = T::from_f64(hp.weight_decay);
        let eps = T::from_f64(hp.eps);
        let inv_bc1 = T::from_f64(1.0 / bc1);
        let inv_bc2 = T::from_f64(1.0 / bc2);
        for e in self.entries.values_mut() {
            for i in 0..e.values.len() {
                let g = e.grad[i];
                e.m[i] = b1 * e.m[i] + ob1 * g;
                e.v[i] = b2 * e.v[i] + ob2 * g * g;
                let m_hat = e.m[i] * inv_bc1;
                let v_hat = e.v[i] * inv_bc2;
                let p = e.values[i];
                e.values[i] = p - lr * (m_hat / (v_hat.sqrt() + eps) + wd * p);
            }
            e.grad.fill(T::zero());
        }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        let conv = |v: &[T]| v.iter().map(|x| U::from_f64(x.as_f64())).collect();
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            shape: e.shape.clone(),
                            values: conv(&e.values),
                            grad: conv(&e.grad),
                            m: conv(&e.m),
                            v: conv(&e.v),
                        },
                    )
                })
                .collect(),
            step: self.step,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn insert_rejects_duplicates_and_bad_shapes() {
        let mut s = ParamStore::<f64>::new();
        s.insert("a", vec![2, 2], vec![0.0; 4]).unwrap();
        assert!(s.insert("a", vec![1], vec![0.0]).is_err());
        assert!(s.insert("b", vec![3], vec![0.0; 4]).is_err());
    }

    #[test]
    fn adamw_first_step_moves_by_lr() {
        // p = 1, g = 1, lr = 0.1, wd = 0: bias-corrected first step gives
        // m_hat = 1, v_hat = 1, so p moves to 1 - 0.1/(1 + eps).
        let mut s = ParamStore::<f64>::new();
        s.insert("p", vec![1], vec![1.0]).unwrap();
        s.accumulate_grad("p", &[1.0]).unwrap();
        let hp = AdamW {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamW::default()
        };
        s.adamw_step(&hp);
        let p = s.get("p").unwrap().values[0];
        assert!((p - 0.9).abs() < 1e-6, "p = {p}");
        assert_eq!(s.step, 1);
        assert_eq!(s.get("p").unwrap().grad[0], 0.0);
    }

    #[test]
    fn adamw_zero_grad_zero_decay_is_noop() {
        let mut s = ParamStore::<f64>::new();
        s.insert("p", vec![2], vec![1.5, -2.0]).unwrap();
        let hp = AdamW {
            weight_decay: 0.0,
            ..AdamW::default()
        };
        s.adamw_step(&hp);
        assert_eq!(s.get("p").unwrap().values, vec![1.5, -2.0]);
    }

    #[test]
    fn adamw_minimizes_quadratic() {
        // 300 steps on (p - 3)^2 starting at 0 should land near 3.
        let mut s = ParamStore::<f64>::new();
        s.insert("p", vec![1], vec![0.0]).unwrap();
        let hp = AdamW {
            lr: 0.1,
            weight_decay: 0.0,
            ..AdamW::default()
        };
        for _ in 0..300 {
            let p = s.get("p").unwrap().values[0];
            s.accumulate_grad("p", &[2.0 * (p - 3.0)]).unwrap();
            s.adamw_step(&hp);
        }
        let p = s.get("p").unwrap().values[0];
        assert!((p - 3.0).abs() < 1e-2, "p = {p}");
    }

    #[test]
    fn decoupled_decay_shrinks_params_without_gradient() {
        let mut s = ParamStore::<f64>::new();
        s.insert("p", vec![1], vec![1.0]).unwrap();
        let hp = AdamW {
            lr: 0.1,
            weight_decay: 0.5,
            ..AdamW::default()
        };
        s.adamw_step(&hp);
        let p = s.get("p").unwrap().values[0];
        // Zero gradient: only the decay term lr*wd*p applies.
        assert!((p - (1.0 - 0.1 * 0.5)).abs() < 1e-12, "p = {p}");
    }

    #[test]
    fn clip_rescales_to_max_norm() {
        let mut s = ParamStore::<f64>::new();
        s.insert("p", vec![2], vec![0.0, 0.0]).unwrap();
        s.accumulate_grad("p", &[3.0, 4.0]).unwrap();
        let pre = s.clip_grad_norm(1.0);
        assert_eq!(pre, Some(5.0));
        assert!((s.grad_norm() - 1.0).abs() < 1e-12);
        // Under the limit: untouched.
        assert_eq!(s.clip_grad_norm(10.0), None);
    }

    #[test]
    fn init_conv_is_deterministic_and_bounded() {
        let shape = ConvShape {
            c_out: 4,
            c_in: 2,
            k: [3, 3, 3],
        };
        let mut a = ParamStore::<f32>::new();
        let mut b = ParamStore::<f32>::new();
        a.init_conv("w", shape, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        b.init_conv("w", shape, true, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        assert_eq!(a.get("w").unwrap().values, b.get("w").unwrap().values);
        let bound = (1.0f64 / (2.0 * 27.0)).sqrt() as f32;
        assert!(a.get("w").unwrap().values.iter().all(|v| v.abs() <= bound));
        assert!(a.get("w.b").unwrap().values.iter().all(|&v| v == 0.0));
    }
}
