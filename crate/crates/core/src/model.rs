//! Student embedding network with logit and classification heads, and the
//! frozen teacher that supplies semantic distributions.

use serde::{Deserialize, Serialize};

use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{OanError, Result};
use crate::modality::Modality;
use crate::rng;
use crate::scalar::Scalar;

/// Initial scale of the per-modality input offsets.
const MODALITY_INIT_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d_in: usize,
    pub hidden: usize,
    pub embed: usize,
    /// Width M of the logit head (semantic labels).
    pub semantic: usize,
    /// Width of the classification head (seen classes).
    pub classes: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("d_in", self.d_in),
            ("hidden", self.hidden),
            ("embed", self.embed),
            ("semantic", self.semantic),
            ("classes", self.classes),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(OanError::config(format!("model dimension {name} must be >= 1")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Scalar> Linear<T> {
    fn init(r: &mut rng::Rng, fan_in: usize, fan_out: usize) -> Self {
        let std = 1.0 / (fan_in as f64).sqrt();
        Self {
            weight: rng::gaussian_tensor(r, fan_in, fan_out, std),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> LinearVars {
        let leaf = |tape: &mut Tape<T>, t: &Tensor<T>| {
            if trainable {
                tape.param(t.detached())
            } else {
                tape.constant(t.detached())
            }
        };
        LinearVars {
            weight: leaf(tape, &self.weight),
            bias: leaf(tape, &self.bias),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LinearVars {
    pub weight: Var,
    pub bias: Var,
}

impl LinearVars {
    pub fn apply<T: Scalar>(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let y = tape.matmul(x, self.weight)?;
        tape.add_row(y, self.bias)
    }
}

/// Modality offset followed by two fully-connected layers with a ReLU between.
#[derive(Clone, Debug, PartialEq)]
pub struct Trunk<T> {
    pub modality: Tensor<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Copy, Debug)]
pub struct TrunkVars {
    pub modality: Var,
    pub fc1: LinearVars,
    pub fc2: LinearVars,
}

impl<T: Scalar> Trunk<T> {
    fn init(r: &mut rng::Rng, d_in: usize, hidden: usize, embed: usize) -> Self {
        Self {
            modality: rng::gaussian_tensor(r, Modality::ALL.len(), d_in, MODALITY_INIT_STD),
            fc1: Linear::init(r, d_in, hidden),
            fc2: Linear::init(r, hidden, embed),
        }
    }

    fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> TrunkVars {
        let m = self.modality.detached();
        TrunkVars {
            modality: if trainable { tape.param(m) } else { tape.constant(m) },
            fc1: self.fc1.bind(tape, trainable),
            fc2: self.fc2.bind(tape, trainable),
        }
    }
}

impl TrunkVars {
    /// `fc2(relu(fc1(x + modality[flag])))`.
    pub fn embed<T: Scalar>(&self, tape: &mut Tape<T>, inputs: Var, modality: &[Modality]) -> Result<Var> {
        let (n, d_in) = tape.shape(inputs);
        if modality.len() != n || tape.shape(self.modality).1 != d_in {
            return Err(OanError::Shape {
                op: "embed",
                left: (n, d_in),
                right: (modality.len(), tape.shape(self.modality).1),
            });
        }
        let ids: Vec<usize> = modality.iter().map(|m| m.index()).collect();
        let offsets = tape.gather_rows(self.modality, &ids)?;
        let x = tape.add(inputs, offsets)?;
        let h = self.fc1.apply(tape, x)?;
        let h = tape.relu(h);
        self.fc2.apply(tape, h)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OanModel<T> {
    pub trunk: Trunk<T>,
    pub logit_head: Linear<T>,
    pub class_head: Linear<T>,
}

/// Tape handles of a bound [`OanModel`].
#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub trunk: TrunkVars,
    pub logit_head: LinearVars,
    pub class_head: LinearVars,
}

impl ModelVars {
    /// Inverse of [`ModelVars::all`]; `vars` must hold 9 handles.
    pub fn from_slice(vars: &[Var]) -> Self {
        Self {
            trunk: TrunkVars {
                modality: vars[0],
                fc1: LinearVars { weight: vars[1], bias: vars[2] },
                fc2: LinearVars { weight: vars[3], bias: vars[4] },
            },
            logit_head: LinearVars { weight: vars[5], bias: vars[6] },
            class_head: LinearVars { weight: vars[7], bias: vars[8] },
        }
    }

    /// Handles in [`OanModel::named_params`] order.
    pub fn all(&self) -> Vec<Var> {
        vec![
            self.trunk.modality,
            self.trunk.fc1.weight,
            self.trunk.fc1.bias,
            self.trunk.fc2.weight,
            self.trunk.fc2.bias,
            self.logit_head.weight,
            self.logit_head.bias,
            self.class_head.weight,
            self.class_head.bias,
        ]
    }

    pub fn embed<T: Scalar>(&self, tape: &mut Tape<T>, inputs: Var, modality: &[Modality]) -> Result<Var> {
        self.trunk.embed(tape, inputs, modality)
    }

    /// `(G, C)`: logit-layer and classification-layer outputs of one embedding.
    pub fn heads<T: Scalar>(&self, tape: &mut Tape<T>, emb: Var) -> Result<(Var, Var)> {
        let g = self.logit_head.apply(tape, emb)?;
        let c = self.class_head.apply(tape, emb)?;
        Ok((g, c))
    }
}

pub const PARAM_NAMES: [&str; 9] = [
    "modality",
    "fc1.weight",
    "fc1.bias",
    "fc2.weight",
    "fc2.bias",
    "logit.weight",
    "logit.bias",
    "class.weight",
    "class.bias",
];

impl<T: Scalar> OanModel<T> {
    /// Weights ~ N(0, 1/fan_in), zero biases. Deterministic in `seed`.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut r = rng::seeded(seed);
        Ok(Self {
            trunk: Trunk::init(&mut r, dims.d_in, dims.hidden, dims.embed),
            logit_head: Linear::init(&mut r, dims.embed, dims.semantic),
            class_head: Linear::init(&mut r, dims.embed, dims.classes),
        })
    }

    pub fn dims(&self) -> ModelDims {
        ModelDims {
            d_in: self.trunk.modality.cols(),
            hidden: self.trunk.fc1.weight.cols(),
            embed: self.trunk.fc2.weight.cols(),
            semantic: self.logit_head.weight.cols(),
            classes: self.class_head.weight.cols(),
        }
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let ps = [
            &self.trunk.modality,
            &self.trunk.fc1.weight,
            &self.trunk.fc1.bias,
            &self.trunk.fc2.weight,
            &self.trunk.fc2.bias,
            &self.logit_head.weight,
            &self.logit_head.bias,
            &self.class_head.weight,
            &self.class_head.bias,
        ];
        PARAM_NAMES.into_iter().zip(ps).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.trunk.modality,
            &mut self.trunk.fc1.weight,
            &mut self.trunk.fc1.bias,
            &mut self.trunk.fc2.weight,
            &mut self.trunk.fc2.bias,
            &mut self.logit_head.weight,
            &mut self.logit_head.bias,
            &mut self.class_head.weight,
            &mut self.class_head.bias,
        ]
    }

    /// Rebuilds a model from tensors in [`PARAM_NAMES`] order.
    pub fn from_params(params: Vec<Tensor<T>>) -> Result<Self> {
        let [modality, w1, b1, w2, b2, gw, gb, cw, cb]: [Tensor<T>; 9] = params
            .try_into()
            .map_err(|v: Vec<Tensor<T>>| OanError::config(format!("expected 9 model parameters, got {}", v.len())))?;
        let model = Self {
            trunk: Trunk {
                modality,
                fc1: Linear { weight: w1, bias: b1 },
                fc2: Linear { weight: w2, bias: b2 },
            },
            logit_head: Linear { weight: gw, bias: gb },
            class_head: Linear { weight: cw, bias: cb },
        };
        model.check_shapes()?;
        Ok(model)
    }

    fn check_shapes(&self) -> Result<()> {
        let d = self.dims();
        let expected = [
            (2, d.d_in),
            (d.d_in, d.hidden),
            (1, d.hidden),
            (d.hidden, d.embed),
            (1, d.embed),
            (d.embed, d.semantic),
            (1, d.semantic),
            (d.embed, d.classes),
            (1, d.classes),
        ];
        for ((name, t), want) in self.named_params().into_iter().zip(expected) {
            if t.shape() != want {
                return Err(OanError::Shape {
                    op: name,
                    left: t.shape(),
                    right: want,
                });
            }
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, t)| t.len()).sum()
    }

    /// Records every parameter as a trainable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> ModelVars {
        ModelVars {
            trunk: self.trunk.bind(tape, true),
            logit_head: self.logit_head.bind(tape, true),
            class_head: self.class_head.bind(tape, true),
        }
    }

    /// Embeddings without recording gradients, e.g. for evaluation.
    pub fn embed_detached(&self, inputs: &Tensor<T>, modality: &[Modality]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = ModelVars {
            trunk: self.trunk.bind(&mut tape, false),
            logit_head: self.logit_head.bind(&mut tape, false),
            class_head: self.class_head.bind(&mut tape, false),
        };
        let x = tape.constant(inputs.detached());
        let e = vars.embed(&mut tape, x, modality)?;
        Ok(tape.value(e).clone())
    }

    /// `(embedding, G, C)` without recording gradients.
    pub fn forward_detached(&self, inputs: &Tensor<T>, modality: &[Modality]) -> Result<[Tensor<T>; 3]> {
        let mut tape = Tape::new();
        let vars = ModelVars {
            trunk: self.trunk.bind(&mut tape, false),
            logit_head: self.logit_head.bind(&mut tape, false),
            class_head: self.class_head.bind(&mut tape, false),
        };
        let x = tape.constant(inputs.detached());
        let e = vars.embed(&mut tape, x, modality)?;
        let (g, c) = vars.heads(&mut tape, e)?;
        Ok([tape.value(e).clone(), tape.value(g).clone(), tape.value(c).clone()])
    }
}

/// Trunk plus logit head with frozen parameters once training is done.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherModel<T> {
    pub trunk: Trunk<T>,
    pub logit_head: Linear<T>,
    pub tau: T,
}

#[derive(Clone, Copy, Debug)]
pub struct TeacherVars {
    pub trunk: TrunkVars,
    pub logit_head: LinearVars,
}

impl TeacherVars {
    pub fn all(&self) -> Vec<Var> {
        vec![
            self.trunk.modality,
            self.trunk.fc1.weight,
            self.trunk.fc1.bias,
            self.trunk.fc2.weight,
            self.trunk.fc2.bias,
            self.logit_head.weight,
            self.logit_head.bias,
        ]
    }

    pub fn logits<T: Scalar>(&self, tape: &mut Tape<T>, inputs: Var, modality: &[Modality]) -> Result<Var> {
        let e = self.trunk.embed(tape, inputs, modality)?;
        self.logit_head.apply(tape, e)
    }
}

impl<T: Scalar> TeacherModel<T> {
    pub fn init(dims: ModelDims, tau: T, seed: u64) -> Result<Self> {
        dims.validate()?;
        if !(tau > T::zero()) {
            return Err(OanError::config(format!("teacher temperature must be > 0, got {tau}")));
        }
        let mut r = rng::seeded(seed);
        Ok(Self {
            trunk: Trunk::init(&mut r, dims.d_in, dims.hidden, dims.embed),
            logit_head: Linear::init(&mut r, dims.embed, dims.semantic),
            tau,
        })
    }

    pub fn named_params(&self) -> Vec<(&'static str, &Tensor<T>)> {
        let ps = [
            &self.trunk.modality,
            &self.trunk.fc1.weight,
            &self.trunk.fc1.bias,
            &self.trunk.fc2.weight,
            &self.trunk.fc2.bias,
            &self.logit_head.weight,
            &self.logit_head.bias,
        ];
        PARAM_NAMES[..7].iter().copied().zip(ps).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        vec![
            &mut self.trunk.modality,
            &mut self.trunk.fc1.weight,
            &mut self.trunk.fc1.bias,
            &mut self.trunk.fc2.weight,
            &mut self.trunk.fc2.bias,
            &mut self.logit_head.weight,
            &mut self.logit_head.bias,
        ]
    }

    pub fn from_params(params: Vec<Tensor<T>>, tau: T) -> Result<Self> {
        let [modality, w1, b1, w2, b2, gw, gb]: [Tensor<T>; 7] = params
            .try_into()
            .map_err(|v: Vec<Tensor<T>>| OanError::config(format!("expected 7 teacher parameters, got {}", v.len())))?;
        Ok(Self {
            trunk: Trunk {
                modality,
                fc1: Linear { weight: w1, bias: b1 },
                fc2: Linear { weight: w2, bias: b2 },
            },
            logit_head: Linear { weight: gw, bias: gb },
            tau,
        })
    }

    /// Trainable binding, used only while pre-training the teacher.
    pub fn bind_trainable(&self, tape: &mut Tape<T>) -> TeacherVars {
        TeacherVars {
            trunk: self.trunk.bind(tape, true),
            logit_head: self.logit_head.bind(tape, true),
        }
    }

    /// Teacher logits `G_T` as a plain tensor.
    pub fn logits(&self, inputs: &Tensor<T>, modality: &[Modality]) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = TeacherVars {
            trunk: self.trunk.bind(&mut tape, false),
            logit_head: self.logit_head.bind(&mut tape, false),
        };
        let x = tape.constant(inputs.detached());
        let g = vars.logits(&mut tape, x, modality)?;
        Ok(tape.value(g).clone())
    }

    /// `softmax(G_T / τ)` per row.
    pub fn distribution(&self, inputs: &Tensor<T>, modality: &[Modality]) -> Result<Tensor<T>> {
        let logits = self.logits(inputs, modality)?;
        let mut tape = Tape::new();
        let g = tape.constant(logits);
        let scaled = tape.scale(g, T::one() / self.tau);
        let lp = tape.log_softmax_rows(scaled)?;
        let mut p = tape.value(lp).map(T::exp);
        // exact renormalization keeps row sums at 1 to rounding
        for r in 0..p.rows() {
            let s: T = p.row(r).iter().copied().sum();
            p.row_mut(r).iter_mut().for_each(|v| *v /= s);
        }
        Ok(p)
    }
}
