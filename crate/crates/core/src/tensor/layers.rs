use super::{Gradients, Scalar, SeededRng, Tape, Tensor, TensorError, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// A named trainable tensor and its most recent gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub grad: Option<Vec<T>>,
}

/// Ordered collection of named parameters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: &str, value: Tensor<T>) -> ParamId {
        assert!(
            self.find(name).is_none(),
            "duplicate parameter name {name}"
        );
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad = Some(vec![T::ZERO; p.value.numel()]);
        }
    }

    /// Replaces all gradients with those recorded in `grads`; unbound parameters get zeros.
    pub fn set_grads(&mut self, grads: &Gradients<T>) {
        self.zero_grads();
        for (id, g) in grads.params() {
            if let (Some(g), Some(dst)) = (g, self.params[id.0].grad.as_mut()) {
                for (d, s) in dst.iter_mut().zip(g) {
                    *d += *s;
                }
            }
        }
    }

    pub fn grads_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.grad.as_ref().is_none_or(|g| g.iter().all(|v| v.is_finite())))
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    grad: p
                        .grad
                        .as_ref()
                        .map(|g| g.iter().map(|v| U::from_f64(v.to_f64())).collect()),
                })
                .collect(),
        }
    }

    /// Overwrites values by name from `other`; shapes must agree.
    pub fn load_values(&mut self, other: &[(String, Tensor<T>)]) -> Result<(), TensorError> {
        for p in &mut self.params {
            let (_, t) = other
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| TensorError::InvalidArgument {
                    op: "load_values",
                    reason: format!("missing parameter {}", p.name),
                })?;
            if t.shape() != p.value.shape() {
                return Err(TensorError::ShapeMismatch {
                    op: "load_values",
                    lhs: p.value.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            p.value = t.clone();
        }
        Ok(())
    }
}

/// He-normal initialisation scaled by `gain`.
fn he_normal<T: Scalar>(shape: &[usize], fan_in: usize, gain: f64, rng: &mut SeededRng) -> Tensor<T> {
    let std = gain * (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.normal() * std)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

/// Square-kernel convolution with bias.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut SeededRng,
    ) -> Self {
        let shape = [out_channels, in_channels, kernel, kernel];
        let weight = store.add(
            &format!("{name}.weight"),
            he_normal(&shape, in_channels * kernel * kernel, 1.0, rng),
        );
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[out_channels]));
        Self {
            weight,
            bias,
            stride,
            pad,
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var, TensorError> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.conv2d(x, w, self.stride, self.pad)?;
        tape.add_bias(y, b)
    }
}

/// Fully connected layer, `[N, in] → [N, out]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        rng: &mut SeededRng,
    ) -> Self {
        Self::with_gain(store, name, inputs, outputs, 1.0, rng)
    }

    /// `gain = 0` gives a zero-initialised layer.
    pub fn with_gain<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        inputs: usize,
        outputs: usize,
        gain: f64,
        rng: &mut SeededRng,
    ) -> Self {
        let weight = store.add(
            &format!("{name}.weight"),
            he_normal(&[inputs, outputs], inputs, gain, rng),
        );
        let bias = store.add(&format!("{name}.bias"), Tensor::zeros(&[outputs]));
        Self { weight, bias }
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        store: &ParamStore<T>,
        x: Var,
    ) -> Result<Var, TensorError> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}
