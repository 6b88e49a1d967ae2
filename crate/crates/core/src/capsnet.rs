//! Capsule network: a two-convolution stem, primary capsules, dynamic
//! routing-by-agreement to one capsule per class, and a fully connected
//! reconstruction decoder used as a regularizer.
//!
//! Routing is built from ordinary tape operations, so gradients flow through
//! every unrolled iteration including the coupling softmax and the agreement
//! updates.

use rand::Rng;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::tensor::graph::{norm, squash_factor, MarginConstants};
use crate::tensor::kernels::ConvGeometry;
use crate::tensor::{Graph, Tensor, Var};
use crate::Label;

pub const CLASSES: usize = 2;

#[derive(Clone, Debug, PartialEq)]
pub struct CapsNetConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub conv1_channels: usize,
    pub conv1_kernel: usize,
    pub conv1_stride: usize,
    pub conv2_channels: usize,
    pub conv2_kernel: usize,
    pub conv2_stride: usize,
    pub primary_dim: usize,
    pub secondary_dim: usize,
    pub routing_iterations: usize,
    pub decoder_hidden: [usize; 2],
    pub recon_scale: f64,
    pub margin: MarginConstants,
    pub init_std: f64,
}

impl CapsNetConfig {
    /// The published architecture for a `height × width` input.
    pub fn for_input(height: usize, width: usize) -> Self {
        Self {
            input_h: height,
            input_w: width,
            conv1_channels: 64,
            conv1_kernel: 5,
            conv1_stride: 2,
            conv2_channels: 128,
            conv2_kernel: 9,
            conv2_stride: 2,
            primary_dim: 16,
            secondary_dim: 10,
            routing_iterations: 5,
            decoder_hidden: [512, 1024],
            recon_scale: 0.0005,
            margin: MarginConstants::default(),
            init_std: 0.1,
        }
    }

    fn conv1_geometry(&self) -> Result<ConvGeometry> {
        ConvGeometry::new(
            &[1, self.input_h, self.input_w],
            &[self.conv1_channels, 1, self.conv1_kernel, self.conv1_kernel],
            self.conv1_stride,
            (0, 0),
        )
    }

    fn conv2_geometry(&self) -> Result<ConvGeometry> {
        let g1 = self.conv1_geometry()?;
        ConvGeometry::new(
            &[self.conv1_channels, g1.out_h, g1.out_w],
            &[
                self.conv2_channels,
                self.conv1_channels,
                self.conv2_kernel,
                self.conv2_kernel,
            ],
            self.conv2_stride,
            (0, 0),
        )
    }

    pub fn capsule_types(&self) -> usize {
        self.conv2_channels / self.primary_dim
    }

    /// Primary capsule count: one per capsule type per spatial cell of conv2.
    pub fn num_primary(&self) -> Result<usize> {
        let g2 = self.conv2_geometry()?;
        Ok(g2.out_h * g2.out_w * self.capsule_types())
    }

    pub fn validate(&self) -> Result<()> {
        if self.primary_dim == 0 || !self.conv2_channels.is_multiple_of(self.primary_dim) {
            return Err(Error::invalid(
                "capsnet",
                format!(
                    "{} conv2 channels are not divisible into {}-dim capsules",
                    self.conv2_channels, self.primary_dim
                ),
            ));
        }
        if self.routing_iterations < 1 {
            return Err(Error::invalid("capsnet", "routing needs at least one iteration"));
        }
        self.num_primary().map(|_| ())
    }

    pub fn fingerprint(&self) -> String {
        format!(
            "capsnet-v1;input={}x{};conv1={}x{}s{};conv2={}x{}s{};primary_dim={};secondary_dim={};routing={};decoder={},{}",
            self.input_h,
            self.input_w,
            self.conv1_channels,
            self.conv1_kernel,
            self.conv1_stride,
            self.conv2_channels,
            self.conv2_kernel,
            self.conv2_stride,
            self.primary_dim,
            self.secondary_dim,
            self.routing_iterations,
            self.decoder_hidden[0],
            self.decoder_hidden[1],
        )
    }
}

/// Every learnable tensor of the network.
#[derive(Clone, Debug, PartialEq)]
pub struct CapsNetParams {
    pub conv1_w: Tensor,
    pub conv1_b: Tensor,
    pub conv2_w: Tensor,
    pub conv2_b: Tensor,
    /// `[P, 2, secondary_dim, primary_dim]`.
    pub routing_w: Tensor,
    pub dec1_w: Tensor,
    pub dec1_b: Tensor,
    pub dec2_w: Tensor,
    pub dec2_b: Tensor,
    pub dec3_w: Tensor,
    pub dec3_b: Tensor,
}

pub const PARAM_NAMES: [&str; 11] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "routing.weight",
    "decoder1.weight",
    "decoder1.bias",
    "decoder2.weight",
    "decoder2.bias",
    "decoder3.weight",
    "decoder3.bias",
];

impl CapsNetParams {
    pub fn init<R: Rng + ?Sized>(config: &CapsNetConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let std = config.init_std;
        let p = config.num_primary()?;
        let pixels = config.input_h * config.input_w;
        let [h1, h2] = config.decoder_hidden;
        let caps_out = CLASSES * config.secondary_dim;
        Ok(Self {
            conv1_w: Tensor::truncated_normal(
                &[config.conv1_channels, 1, config.conv1_kernel, config.conv1_kernel],
                std,
                rng,
            ),
            conv1_b: Tensor::zeros(&[config.conv1_channels]),
            conv2_w: Tensor::truncated_normal(
                &[
                    config.conv2_channels,
                    config.conv1_channels,
                    config.conv2_kernel,
                    config.conv2_kernel,
                ],
                std,
                rng,
            ),
            conv2_b: Tensor::zeros(&[config.conv2_channels]),
            routing_w: Tensor::truncated_normal(&[p, CLASSES, config.secondary_dim, config.primary_dim], std, rng),
            dec1_w: Tensor::truncated_normal(&[h1, caps_out], std, rng),
            dec1_b: Tensor::zeros(&[h1]),
            dec2_w: Tensor::truncated_normal(&[h2, h1], std, rng),
            dec2_b: Tensor::zeros(&[h2]),
            dec3_w: Tensor::truncated_normal(&[pixels, h2], std, rng),
            dec3_b: Tensor::zeros(&[pixels]),
        })
    }

    pub fn tensors(&self) -> [&Tensor; 11] {
        [
            &self.conv1_w,
            &self.conv1_b,
            &self.conv2_w,
            &self.conv2_b,
            &self.routing_w,
            &self.dec1_w,
            &self.dec1_b,
            &self.dec2_w,
            &self.dec2_b,
            &self.dec3_w,
            &self.dec3_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 11] {
        [
            &mut self.conv1_w,
            &mut self.conv1_b,
            &mut self.conv2_w,
            &mut self.conv2_b,
            &mut self.routing_w,
            &mut self.dec1_w,
            &mut self.dec1_b,
            &mut self.dec2_w,
            &mut self.dec2_b,
            &mut self.dec3_w,
            &mut self.dec3_b,
        ]
    }
}

struct Bound {
    vars: [Var; 11],
}

impl Bound {
    fn new<'a>(g: &mut Graph<'a>, params: &'a CapsNetParams) -> Self {
        Self {
            vars: params.tensors().map(|t| g.param(t)),
        }
    }
}

/// Squash of one vector: same direction, length `‖s‖²/(1+‖s‖²)`.
pub fn squash(s: &[f64]) -> Vec<f64> {
    let f = squash_factor(norm(s));
    s.iter().map(|v| v * f).collect()
}

/// Index map regrouping `[C, h, w]` conv output into `[h·w·types, dim]`
/// capsules: capsule `(cell·types + type)` takes channels
/// `type·dim .. (type+1)·dim` at that cell.
fn primary_capsule_index(channels: usize, h: usize, w: usize, dim: usize) -> Vec<usize> {
    let types = channels / dim;
    let cells = h * w;
    let mut index = Vec::with_capacity(channels * cells);
    for cell in 0..cells {
        for t in 0..types {
            for d in 0..dim {
                index.push((t * dim + d) * cells + cell);
            }
        }
    }
    index
}

/// Regroups conv features into squashed primary capsules `[h·w·types, dim]`.
pub fn primary_capsules(g: &mut Graph<'_>, conv_out: Var, dim: usize) -> Result<Var> {
    let [c, h, w] = *g.value(conv_out).shape() else {
        return Err(Error::shape("primary_capsules", "expected [C,h,w] features"));
    };
    if dim == 0 || c % dim != 0 {
        return Err(Error::invalid(
            "primary_capsules",
            format!("{c} channels not divisible by capsule dim {dim}"),
        ));
    }
    let p = h * w * (c / dim);
    let caps = g.gather(conv_out, primary_capsule_index(c, h, w, dim), &[p, dim])?;
    g.squash_rows(caps)
}

/// Logits and couplings after the final routing iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct RoutingState {
    /// `[P, J]`.
    pub logits: Tensor,
    /// `[P, J]`; every row sums to one.
    pub couplings: Tensor,
    pub iteration: usize,
}

/// Routing-by-agreement on tape. Logits start at zero; each iteration takes
/// a softmax over output capsules, forms the coupling-weighted vote sum,
/// squashes it, and adds the vote/output agreement to the logits.
pub fn route(g: &mut Graph<'_>, votes: Var, iterations: usize) -> Result<(Var, RoutingState)> {
    if iterations < 1 {
        return Err(Error::invalid("dynamic_routing", "iterations must be at least 1"));
    }
    let [p, j, _] = *g.value(votes).shape() else {
        return Err(Error::shape("dynamic_routing", "votes must be [P,J,D]"));
    };
    let mut logits = g.constant(Tensor::zeros(&[p, j]));
    let mut outputs = None;
    let mut couplings = None;
    for it in 0..iterations {
        let c = g.softmax(logits, 1)?;
        let s = g.route_sum(c, votes)?;
        let v = g.squash_rows(s)?;
        couplings = Some(c);
        outputs = Some(v);
        if it + 1 < iterations {
            let agreement = g.agreement(votes, v)?;
            logits = g.add(logits, agreement)?;
        }
    }
    let v = outputs.expect("at least one iteration");
    let state = RoutingState {
        logits: g.value(logits).clone(),
        couplings: g.value(couplings.expect("at least one iteration")).clone(),
        iteration: iterations,
    };
    Ok((v, state))
}

/// Routing on plain tensors: `votes: [P,J,D]` → `v: [J,D]`.
pub fn dynamic_routing(votes: &Tensor, iterations: usize) -> Result<(Tensor, RoutingState)> {
    let mut g = Graph::new();
    let u = g.constant(votes.clone());
    let (v, state) = route(&mut g, u, iterations)?;
    Ok((g.value(v).clone(), state))
}

/// `û[p,j] = W[p,j] · u[p]` on plain tensors.
pub fn votes(caps: &Tensor, weights: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let u = g.constant(caps.clone());
    let w = g.constant(weights.clone());
    let out = g.votes(u, w)?;
    Ok(g.value(out).clone())
}

/// Capsule lengths and the winning class; ties go to Alert.
pub fn classify(v: &Tensor) -> Result<([f64; CLASSES], Label)> {
    let [classes, dim] = *v.shape() else {
        return Err(Error::shape("classify", "expected [2,D] capsules"));
    };
    if classes != CLASSES {
        return Err(Error::shape("classify", format!("{classes} output capsules")));
    }
    let data = v.data();
    let probs = [norm(&data[..dim]), norm(&data[dim..])];
    let label = if probs[1] > probs[0] {
        Label::Drowsy
    } else {
        Label::Alert
    };
    Ok((probs, label))
}

/// Reconstruction loss term for one image.
pub fn reconstruction_penalty(recon: &[f64], image: &[f64], scale: f64) -> f64 {
    scale * recon.iter().zip(image).map(|(r, x)| (r - x) * (r - x)).sum::<f64>()
}

/// Which capsule feeds the decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Mask with the true label.
    Train(Label),
    /// Mask with the predicted label.
    Infer,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ShapeTrace {
    pub conv1: Vec<usize>,
    pub conv2: Vec<usize>,
    pub primary: Vec<usize>,
    pub secondary: Vec<usize>,
    pub reconstruction: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CapsNetOutput {
    /// `[2, secondary_dim]`.
    pub capsules: Tensor,
    pub probabilities: [f64; CLASSES],
    pub predicted: Label,
    /// Decoder output in `(0, 1)`, one value per input pixel.
    pub reconstruction: Vec<f64>,
    pub routing: RoutingState,
    pub trace: ShapeTrace,
}

struct Recorded {
    params: [Var; 11],
    v: Var,
    recon: Var,
    output: CapsNetOutput,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CapsNet {
    pub config: CapsNetConfig,
    pub params: CapsNetParams,
}

impl CapsNet {
    pub fn new<R: Rng + ?Sized>(config: CapsNetConfig, rng: &mut R) -> Result<Self> {
        let params = CapsNetParams::init(&config, rng)?;
        Ok(Self { config, params })
    }

    fn check_image(&self, image: &GrayImage) -> Result<()> {
        if (image.height(), image.width()) != (self.config.input_h, self.config.input_w) {
            return Err(Error::shape(
                "capsnet_forward",
                format!(
                    "image {}×{}, model expects {}×{}",
                    image.height(),
                    image.width(),
                    self.config.input_h,
                    self.config.input_w
                ),
            ));
        }
        Ok(())
    }

    fn record<'a>(&'a self, g: &mut Graph<'a>, image: &[f64], mode: Mode) -> Result<Recorded> {
        let cfg = &self.config;
        let b = Bound::new(g, &self.params);
        let [c1w, c1b, c2w, c2b, rw, d1w, d1b, d2w, d2b, d3w, d3b] = b.vars;
        let x = g.constant(Tensor::new(&[1, cfg.input_h, cfg.input_w], image.to_vec())?);
        let h1 = g.conv2d(x, c1w, c1b, cfg.conv1_stride, (0, 0))?;
        let h1 = g.relu(h1)?;
        let h2 = g.conv2d(h1, c2w, c2b, cfg.conv2_stride, (0, 0))?;
        let h2 = g.relu(h2)?;
        let u = primary_capsules(g, h2, cfg.primary_dim)?;
        let u_hat = g.votes(u, rw)?;
        let (v, routing) = route(g, u_hat, cfg.routing_iterations)?;
        let (probabilities, predicted) = classify(g.value(v))?;

        let selected = match mode {
            Mode::Train(label) => label,
            Mode::Infer => predicted,
        };
        let recon = decode(g, v, selected, [d1w, d1b, d2w, d2b, d3w, d3b])?;

        let trace = ShapeTrace {
            conv1: g.value(h1).shape().to_vec(),
            conv2: g.value(h2).shape().to_vec(),
            primary: g.value(u).shape().to_vec(),
            secondary: g.value(v).shape().to_vec(),
            reconstruction: g.value(recon).len(),
        };
        let output = CapsNetOutput {
            capsules: g.value(v).clone(),
            probabilities,
            predicted,
            reconstruction: g.value(recon).data().to_vec(),
            routing,
            trace,
        };
        Ok(Recorded {
            params: b.vars,
            v,
            recon,
            output,
        })
    }

    /// Full forward pass without gradients.
    pub fn forward(&self, image: &GrayImage, mode: Mode) -> Result<CapsNetOutput> {
        self.check_image(image)?;
        self.forward_unit(&image.to_unit(), mode)
    }

    /// Forward pass on pixels already scaled to `[0, 1]`.
    pub fn forward_unit(&self, image: &[f64], mode: Mode) -> Result<CapsNetOutput> {
        if image.len() != self.config.input_h * self.config.input_w {
            return Err(Error::shape(
                "capsnet_forward",
                format!(
                    "{} pixels, model expects {}×{}",
                    image.len(),
                    self.config.input_h,
                    self.config.input_w
                ),
            ));
        }
        let mut g = Graph::new();
        Ok(self.record(&mut g, image, mode)?.output)
    }

    /// Margin loss plus the scaled reconstruction error, recorded on `g`.
    fn record_loss<'a>(&'a self, g: &mut Graph<'a>, image: &[f64], label: Label) -> Result<(Var, Recorded)> {
        let rec = self.record(g, image, Mode::Train(label))?;
        let margin = g.margin_loss(rec.v, label.index(), self.config.margin)?;
        let sq = g.squared_error(rec.recon, image)?;
        let recon = g.scale(sq, self.config.recon_scale)?;
        let total = g.add(margin, recon)?;
        Ok((total, rec))
    }

    /// Training loss for one image.
    pub fn loss(&self, image: &GrayImage, label: Label) -> Result<f64> {
        self.loss_unit(&image.to_unit(), label)
    }

    /// Training loss for an image already scaled to `[0, 1]`.
    pub fn loss_unit(&self, image: &[f64], label: Label) -> Result<f64> {
        let mut g = Graph::new();
        let (total, _) = self.record_loss(&mut g, image, label)?;
        Ok(g.value(total).data()[0])
    }

    /// Loss, gradients in [`PARAM_NAMES`] order, and the prediction.
    pub fn loss_and_gradients(&self, image: &[f64], label: Label) -> Result<(f64, Vec<Tensor>, Label)> {
        let mut g = Graph::new();
        let (total, rec) = self.record_loss(&mut g, image, label)?;
        let mut grads = g.backward(total)?;
        let grads = rec
            .params
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((g.value(total).data()[0], grads, rec.output.predicted))
    }
}

/// Decoder over the masked capsule pair: only the `selected` capsule is
/// non-zero in the flattened `2·D` input.
pub fn decode(g: &mut Graph<'_>, v: Var, selected: Label, layers: [Var; 6]) -> Result<Var> {
    let [classes, dim] = *g.value(v).shape() else {
        return Err(Error::shape("decode", "expected [2,D] capsules"));
    };
    let mask = (0..classes * dim)
        .map(|i| if i / dim == selected.index() { 1.0 } else { 0.0 })
        .collect();
    let masked = g.mul_const(v, mask)?;
    let flat = g.reshape(masked, &[classes * dim])?;
    let [w1, b1, w2, b2, w3, b3] = layers;
    let h = g.affine(flat, w1, b1)?;
    let h = g.relu(h)?;
    let h = g.affine(h, w2, b2)?;
    let h = g.relu(h)?;
    let out = g.affine(h, w3, b3)?;
    g.sigmoid(out)
}
