//! Baseline CNN: three conv(3×3, same)–ReLU–maxpool blocks with 32/64/128
//! maps, a 512-unit hidden layer with dropout, and a two-way softmax head
//! trained with cross-entropy plus an L2 penalty on the weights.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::tensor::kernels::{ConvGeometry, PoolGeometry};
use crate::tensor::{Graph, Tensor, Var};
use crate::Label;

#[derive(Clone, Debug, PartialEq)]
pub struct CnnConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub channels: [usize; 3],
    pub kernel: usize,
    /// `(rows, cols)`: 2×2 for square inputs, 4×2 for stacked Fz/Pz.
    pub pool_window: (usize, usize),
    pub pool_stride: usize,
    pub hidden: usize,
    pub keep_prob: f64,
    pub l2_beta: f64,
    pub init_std: f64,
}

impl CnnConfig {
    pub fn for_input(height: usize, width: usize) -> Self {
        let pool_rows = if height > width { 4 } else { 2 };
        Self {
            input_h: height,
            input_w: width,
            channels: [32, 64, 128],
            kernel: 3,
            pool_window: (pool_rows, 2),
            pool_stride: 2,
            hidden: 512,
            keep_prob: 0.5,
            l2_beta: 0.001,
            init_std: 0.1,
        }
    }

    /// `(C, H, W)` after each pooling block.
    pub fn block_shapes(&self) -> Result<[(usize, usize, usize); 3]> {
        let mut dims = (1, self.input_h, self.input_w);
        let mut out = [(0, 0, 0); 3];
        for (i, &c) in self.channels.iter().enumerate() {
            let pad = self.kernel / 2;
            let conv = ConvGeometry::new(
                &[dims.0, dims.1, dims.2],
                &[c, dims.0, self.kernel, self.kernel],
                1,
                (pad, pad),
            )?;
            let pool = PoolGeometry::new(&[c, conv.out_h, conv.out_w], self.pool_window, self.pool_stride, true)?;
            dims = (c, pool.out_h, pool.out_w);
            out[i] = dims;
        }
        Ok(out)
    }

    pub fn flat_len(&self) -> Result<usize> {
        let (c, h, w) = self.block_shapes()?[2];
        Ok(c * h * w)
    }

    pub fn fingerprint(&self) -> String {
        format!(
            "cnn-v1;input={}x{};channels={},{},{};kernel={};pool={}x{}s{};hidden={}",
            self.input_h,
            self.input_w,
            self.channels[0],
            self.channels[1],
            self.channels[2],
            self.kernel,
            self.pool_window.0,
            self.pool_window.1,
            self.pool_stride,
            self.hidden
        )
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CnnParams {
    pub conv_w: [Tensor; 3],
    pub conv_b: [Tensor; 3],
    pub fc1_w: Tensor,
    pub fc1_b: Tensor,
    pub out_w: Tensor,
    pub out_b: Tensor,
}

pub const PARAM_NAMES: [&str; 10] = [
    "conv1.weight",
    "conv1.bias",
    "conv2.weight",
    "conv2.bias",
    "conv3.weight",
    "conv3.bias",
    "fc1.weight",
    "fc1.bias",
    "out.weight",
    "out.bias",
];

impl CnnParams {
    pub fn init<R: Rng + ?Sized>(config: &CnnConfig, rng: &mut R) -> Result<Self> {
        let flat = config.flat_len()?;
        let k = config.kernel;
        let [c1, c2, c3] = config.channels;
        let std = config.init_std;
        Ok(Self {
            conv_w: [
                Tensor::truncated_normal(&[c1, 1, k, k], std, rng),
                Tensor::truncated_normal(&[c2, c1, k, k], std, rng),
                Tensor::truncated_normal(&[c3, c2, k, k], std, rng),
            ],
            conv_b: [Tensor::zeros(&[c1]), Tensor::zeros(&[c2]), Tensor::zeros(&[c3])],
            fc1_w: Tensor::truncated_normal(&[config.hidden, flat], std, rng),
            fc1_b: Tensor::zeros(&[config.hidden]),
            out_w: Tensor::truncated_normal(&[2, config.hidden], std, rng),
            out_b: Tensor::zeros(&[2]),
        })
    }

    pub fn tensors(&self) -> [&Tensor; 10] {
        [
            &self.conv_w[0],
            &self.conv_b[0],
            &self.conv_w[1],
            &self.conv_b[1],
            &self.conv_w[2],
            &self.conv_b[2],
            &self.fc1_w,
            &self.fc1_b,
            &self.out_w,
            &self.out_b,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        let [w0, w1, w2] = &mut self.conv_w;
        let [b0, b1, b2] = &mut self.conv_b;
        [
            w0,
            b0,
            w1,
            b1,
            w2,
            b2,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.out_w,
            &mut self.out_b,
        ]
    }

    /// Σ‖W‖² over every weight tensor, biases excluded.
    pub fn weight_norm_sq(&self) -> f64 {
        self.conv_w.iter().map(Tensor::sum_squares).sum::<f64>() + self.fc1_w.sum_squares() + self.out_w.sum_squares()
    }
}

/// Dropout draw: `None` at inference, otherwise the seed of the mask.
pub type DropoutSeed = Option<u64>;

#[derive(Clone, Debug, PartialEq)]
pub struct Cnn {
    pub config: CnnConfig,
    pub params: CnnParams,
}

struct Recorded {
    params: [Var; 10],
    logits: Var,
    shapes: Vec<Vec<usize>>,
}

impl Cnn {
    pub fn new<R: Rng + ?Sized>(config: CnnConfig, rng: &mut R) -> Result<Self> {
        let params = CnnParams::init(&config, rng)?;
        Ok(Self { config, params })
    }

    fn record<'a>(&'a self, g: &mut Graph<'a>, image: &[f64], dropout: DropoutSeed) -> Result<Recorded> {
        let cfg = &self.config;
        if image.len() != cfg.input_h * cfg.input_w {
            return Err(Error::shape(
                "cnn_forward",
                format!("{} pixels, model expects {}×{}", image.len(), cfg.input_h, cfg.input_w),
            ));
        }
        let vars = self.params.tensors().map(|t| g.param(t));
        let pad = cfg.kernel / 2;
        let mut x = g.constant(Tensor::new(&[1, cfg.input_h, cfg.input_w], image.to_vec())?);
        let mut shapes = Vec::new();
        for block in 0..3 {
            x = g.conv2d(x, vars[2 * block], vars[2 * block + 1], 1, (pad, pad))?;
            x = g.relu(x)?;
            shapes.push(g.value(x).shape().to_vec());
            x = g.maxpool2d(x, cfg.pool_window, cfg.pool_stride, true)?;
            shapes.push(g.value(x).shape().to_vec());
        }
        let flat = g.reshape(x, &[g.value(x).len()])?;
        shapes.push(g.value(flat).shape().to_vec());
        let h = g.affine(flat, vars[6], vars[7])?;
        let mut h = g.relu(h)?;
        shapes.push(g.value(h).shape().to_vec());
        if let Some(seed) = dropout {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let keep = cfg.keep_prob;
            let mask = (0..cfg.hidden)
                .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                .collect();
            h = g.mul_const(h, mask)?;
        }
        let logits = g.affine(h, vars[8], vars[9])?;
        shapes.push(g.value(logits).shape().to_vec());
        Ok(Recorded {
            params: vars,
            logits,
            shapes,
        })
    }

    /// Logits for one image scaled to `[0, 1]`; dropout only when seeded.
    pub fn forward_unit(&self, image: &[f64], dropout: DropoutSeed) -> Result<Tensor> {
        let mut g = Graph::new();
        let rec = self.record(&mut g, image, dropout)?;
        Ok(g.value(rec.logits).clone())
    }

    pub fn forward(&self, image: &GrayImage, dropout: DropoutSeed) -> Result<Tensor> {
        self.forward_unit(&image.to_unit(), dropout)
    }

    /// Activation shapes after every conv, pool, flatten, hidden and output layer.
    pub fn shape_trace(&self, image: &GrayImage) -> Result<Vec<Vec<usize>>> {
        let mut g = Graph::new();
        Ok(self.record(&mut g, &image.to_unit(), None)?.shapes)
    }

    fn record_loss<'a>(
        &'a self,
        g: &mut Graph<'a>,
        image: &[f64],
        label: Label,
        dropout: DropoutSeed,
    ) -> Result<(Var, Recorded)> {
        let rec = self.record(g, image, dropout)?;
        let ce = g.softmax_cross_entropy(rec.logits, label.index())?;
        let mut penalty = None;
        for &w in &[
            rec.params[0],
            rec.params[2],
            rec.params[4],
            rec.params[6],
            rec.params[8],
        ] {
            let sq = g.sum_squares(w)?;
            penalty = Some(match penalty {
                None => sq,
                Some(acc) => g.add(acc, sq)?,
            });
        }
        let penalty = g.scale(penalty.expect("five weight tensors"), self.config.l2_beta)?;
        let total = g.add(ce, penalty)?;
        Ok((total, rec))
    }

    /// Cross-entropy plus `β·Σ‖W‖²`.
    pub fn loss_unit(&self, image: &[f64], label: Label, dropout: DropoutSeed) -> Result<f64> {
        let mut g = Graph::new();
        let (total, _) = self.record_loss(&mut g, image, label, dropout)?;
        Ok(g.value(total).data()[0])
    }

    pub fn loss_and_gradients(
        &self,
        image: &[f64],
        label: Label,
        dropout: DropoutSeed,
    ) -> Result<(f64, Vec<Tensor>, Label)> {
        let mut g = Graph::new();
        let (total, rec) = self.record_loss(&mut g, image, label, dropout)?;
        let logits = g.value(rec.logits).data();
        let predicted = if logits[1] > logits[0] {
            Label::Drowsy
        } else {
            Label::Alert
        };
        let mut grads = g.backward(total)?;
        let grads = rec
            .params
            .iter()
            .zip(self.params.tensors())
            .map(|(&v, t)| grads.take(v).unwrap_or_else(|| Tensor::zeros(t.shape())))
            .collect();
        Ok((g.value(total).data()[0], grads, predicted))
    }

    pub fn predict(&self, image: &GrayImage) -> Result<Label> {
        let logits = self.forward(image, None)?;
        Ok(if logits.data()[1] > logits.data()[0] {
            Label::Drowsy
        } else {
            Label::Alert
        })
    }
}

/// Paper-derived training defaults for the CNN.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CnnTrainDefaults {
    pub epochs: usize,
    pub batch_size: usize,
    pub keep_prob: f64,
    pub l2_beta: f64,
}

pub fn cnn_train_defaults() -> CnnTrainDefaults {
    CnnTrainDefaults {
        epochs: 500,
        batch_size: 32,
        keep_prob: 0.5,
        l2_beta: 0.001,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(h: usize, w: usize) -> Cnn {
        Cnn::new(CnnConfig::for_input(h, w), &mut ChaCha8Rng::seed_from_u64(1)).unwrap()
    }

    #[test]
    fn square_input_trace() {
        let cnn = net(32, 32);
        let trace = cnn.shape_trace(&GrayImage::filled(32, 32, 100)).unwrap();
        let expected: Vec<Vec<usize>> = vec![
            vec![32, 32, 32],
            vec![32, 16, 16],
            vec![64, 16, 16],
            vec![64, 8, 8],
            vec![128, 8, 8],
            vec![128, 4, 4],
            vec![2048],
            vec![512],
            vec![2],
        ];
        assert_eq!(trace, expected);
    }

    #[test]
    fn stacked_input_trace() {
        let cnn = net(64, 32);
        assert_eq!(cnn.config.pool_window, (4, 2));
        let trace = cnn.shape_trace(&GrayImage::filled(64, 32, 100)).unwrap();
        assert_eq!(trace[5], vec![128, 8, 4]);
        assert_eq!(trace[6], vec![4096]);
        assert_eq!(trace[8], vec![2]);
    }

    #[test]
    fn inference_is_deterministic() {
        let cnn = net(32, 32);
        let img = GrayImage::new(32, 32, (0..1024).map(|i| (i % 251) as u8).collect()).unwrap();
        assert_eq!(cnn.forward(&img, None).unwrap(), cnn.forward(&img, None).unwrap());
        assert!(cnn.forward(&GrayImage::filled(64, 32, 0), None).is_err());
    }

    #[test]
    fn symmetric_logits_cost_ln2_plus_penalty() {
        let mut cnn = net(32, 32);
        // Zero output weights make the logits equal (both biases are zero).
        cnn.params.out_w = Tensor::zeros(&[2, 512]);
        let img = vec![0.5; 1024];
        let loss = cnn.loss_unit(&img, Label::Drowsy, None).unwrap();
        let expected = 2f64.ln() + 0.001 * cnn.params.weight_norm_sq();
        assert!((loss - expected).abs() < 1e-12);
    }

    #[test]
    fn confident_zero_weight_limit() {
        let mut cnn = net(32, 32);
        for w in cnn.params.tensors_mut() {
            w.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
        cnn.params.out_b = Tensor::new(&[2], vec![-30.0, 30.0]).unwrap();
        let loss = cnn.loss_unit(&[0.2; 1024], Label::Drowsy, None).unwrap();
        assert!(loss < 1e-20);
    }

    #[test]
    fn cross_entropy_matches_log_sum_exp() {
        let cnn = net(32, 32);
        let img: Vec<f64> = (0..1024).map(|i| (i % 17) as f64 / 17.0).collect();
        let z = cnn.forward_unit(&img, None).unwrap();
        let (a, b) = (z.data()[0], z.data()[1]);
        let lse = (a.exp() + b.exp()).ln();
        let expected = lse - a + 0.001 * cnn.params.weight_norm_sq();
        let loss = cnn.loss_unit(&img, Label::Alert, None).unwrap();
        assert!((loss - expected).abs() < 1e-10);
    }

    #[test]
    fn l2_grows_with_any_weight() {
        let mut cnn = net(32, 32);
        let before = cnn.params.weight_norm_sq();
        let w = &mut cnn.params.fc1_w.data_mut()[17];
        *w = w.abs() + 0.5;
        assert!(cnn.params.weight_norm_sq() > before);
    }

    #[test]
    fn defaults() {
        let d = cnn_train_defaults();
        assert_eq!(d.epochs, 500);
        assert_eq!(d.keep_prob, 0.5);
        assert_eq!(d.l2_beta, 0.001);
        assert_eq!(d.batch_size, 32);
    }
}
