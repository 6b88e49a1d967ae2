//! The three classifiers behind one interface, plus the shallow baseline.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::capsnet::{self, CapsNet, CapsNetConfig, Mode};
use crate::cnn::{self, Cnn, CnnConfig};
use crate::error::{Error, Result};
use crate::tensor::{Graph, Tensor};
use crate::Label;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    CapsNet,
    Cnn,
    Mlp,
}

impl ModelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ModelKind::CapsNet => "capsnet",
            ModelKind::Cnn => "cnn",
            ModelKind::Mlp => "mlp",
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "capsnet" => Ok(ModelKind::CapsNet),
            "cnn" => Ok(ModelKind::Cnn),
            "mlp" => Ok(ModelKind::Mlp),
            other => Err(Error::format(
                "model kind",
                format!("`{other}` (expected capsnet, cnn or mlp)"),
            )),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One hidden ReLU layer on raw pixels followed by a softmax head.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub input_h: usize,
    pub input_w: usize,
    pub hidden_w: Tensor,
    pub hidden_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

pub const MLP_HIDDEN: usize = 512;
pub const MLP_PARAM_NAMES: [&str; 4] = ["hidden.weight", "hidden.bias", "out.weight", "out.bias"];

impl Mlp {
    pub fn new<R: Rng + ?Sized>(input_h: usize, input_w: usize, hidden: usize, std: f64, rng: &mut R) -> Self {
        Self {
            input_h,
            input_w,
            hidden_w: Tensor::truncated_normal(&[hidden, input_h * input_w], std, rng),
            hidden_b: Tensor::zeros(&[hidden]),
            out_w: Tensor::truncated_normal(&[2, hidden], std, rng),
            out_b: Tensor::zeros(&[2]),
        }
    }

    pub fn hidden(&self) -> usize {
        self.hidden_b.len()
    }

    pub fn fingerprint(&self) -> String {
        format!(
            "mlp-v1;input={}x{};hidden={}",
            self.input_h,
            self.input_w,
            self.hidden()
        )
    }

    pub fn tensors(&self) -> [&Tensor; 4] {
        [&self.hidden_w, &self.hidden_b, &self.out_w, &self.out_b]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 4] {
        [&mut self.hidden_w, &mut self.hidden_b, &mut self.out_w, &mut self.out_b]
    }

    fn check(&self, image: &[f64]) -> Result<()> {
        if image.len() != self.input_h * self.input_w {
            return Err(Error::shape(
                "mlp_forward",
                format!(
                    "{} pixels, model expects {}×{}",
                    image.len(),
                    self.input_h,
                    self.input_w
                ),
            ));
        }
        Ok(())
    }

    pub fn logits(&self, image: &[f64]) -> Result<Tensor> {
        self.check(image)?;
        let mut g = Graph::new();
        let [w1, b1, w2, b2] = self.tensors().map(|t| g.param(t));
        let x = g.constant(Tensor::new(&[image.len()], image.to_vec())?);
        let h = g.affine(x, w1, b1)?;
        let h = g.relu(h)?;
        let z = g.affine(h, w2, b2)?;
        Ok(g.value(z).clone())
    }

    pub fn loss_and_gradients(&self, image: &[f64], label: Label) -> Result<(f64, Vec<Tensor>, Label)> {
        self.check(image)?;
        let mut g = Graph::new();
        let vars = self.tensors().map(|t| g.param(t));
        let x = g.constant(Tensor::new(&[image.len()], image.to_vec())?);
        let h = g.affine(x, vars[0], vars[1])?;
        let h = g.relu(h)?;
        let z = g.affine(h, vars[2], vars[3])?;
        let logits = g.value(z).data();
        let predicted = if logits[1] > logits[0] {
            Label::Drowsy
        } else {
            Label::Alert
        };
        let loss = g.softmax_cross_entropy(z, label.index())?;
        let mut grads = g.backward(loss)?;
        let grads = vars
            .iter()
            .zip(self.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((g.value(loss).data()[0], grads, predicted))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    CapsNet(CapsNet),
    Cnn(Cnn),
    Mlp(Mlp),
}

impl Model {
    /// The published architecture of `kind` for a `height × width` input.
    pub fn new<R: Rng + ?Sized>(kind: ModelKind, height: usize, width: usize, rng: &mut R) -> Result<Self> {
        Ok(match kind {
            ModelKind::CapsNet => Model::CapsNet(CapsNet::new(CapsNetConfig::for_input(height, width), rng)?),
            ModelKind::Cnn => Model::Cnn(Cnn::new(CnnConfig::for_input(height, width), rng)?),
            ModelKind::Mlp => Model::Mlp(Mlp::new(height, width, MLP_HIDDEN, 0.1, rng)),
        })
    }

    pub fn kind(&self) -> ModelKind {
        match self {
            Model::CapsNet(_) => ModelKind::CapsNet,
            Model::Cnn(_) => ModelKind::Cnn,
            Model::Mlp(_) => ModelKind::Mlp,
        }
    }

    pub fn input_dims(&self) -> (usize, usize) {
        match self {
            Model::CapsNet(m) => (m.config.input_h, m.config.input_w),
            Model::Cnn(m) => (m.config.input_h, m.config.input_w),
            Model::Mlp(m) => (m.input_h, m.input_w),
        }
    }

    pub fn fingerprint(&self) -> String {
        match self {
            Model::CapsNet(m) => m.config.fingerprint(),
            Model::Cnn(m) => m.config.fingerprint(),
            Model::Mlp(m) => m.fingerprint(),
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            Model::CapsNet(_) => &capsnet::PARAM_NAMES,
            Model::Cnn(_) => &cnn::PARAM_NAMES,
            Model::Mlp(_) => &MLP_PARAM_NAMES,
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        match self {
            Model::CapsNet(m) => m.params.tensors().to_vec(),
            Model::Cnn(m) => m.params.tensors().to_vec(),
            Model::Mlp(m) => m.tensors().to_vec(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match self {
            Model::CapsNet(m) => m.params.tensors_mut().into_iter().collect(),
            Model::Cnn(m) => m.params.tensors_mut().into_iter().collect(),
            Model::Mlp(m) => m.tensors_mut().into_iter().collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    /// Training loss, parameter gradients in [`Model::tensors`] order, and the
    /// prediction made on the way. `dropout_seed` only affects the CNN.
    pub fn loss_and_gradients(
        &self,
        image: &[f64],
        label: Label,
        dropout_seed: u64,
    ) -> Result<(f64, Vec<Tensor>, Label)> {
        match self {
            Model::CapsNet(m) => m.loss_and_gradients(image, label),
            Model::Cnn(m) => m.loss_and_gradients(image, label, Some(dropout_seed)),
            Model::Mlp(m) => m.loss_and_gradients(image, label),
        }
    }

    /// Inference on an image scaled to `[0, 1]`.
    pub fn predict_unit(&self, image: &[f64]) -> Result<Label> {
        match self {
            Model::CapsNet(m) => Ok(m.forward_unit(image, Mode::Infer)?.predicted),
            Model::Cnn(m) => {
                let z = m.forward_unit(image, None)?;
                Ok(if z.data()[1] > z.data()[0] {
                    Label::Drowsy
                } else {
                    Label::Alert
                })
            }
            Model::Mlp(m) => {
                let z = m.logits(image)?;
                Ok(if z.data()[1] > z.data()[0] {
                    Label::Drowsy
                } else {
                    Label::Alert
                })
            }
        }
    }
}
