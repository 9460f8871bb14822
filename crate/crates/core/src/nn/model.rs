use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::N_BEHAVIORS;
use crate::error::{Error, Result};
use crate::pll::Logits;
use crate::spectrogram::SpectrogramImage;

use super::tape::{Tape, Var};
use super::tensor::{ParamStore, Real, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Channels the stem expects. Monochrome images are replicated to fit.
    pub input_channels: usize,
    pub stem_width: usize,
    /// 2x2 max pool after the stem.
    pub stem_pool: bool,
    pub stage_widths: Vec<usize>,
    pub blocks_per_stage: Vec<usize>,
    pub n_classes: usize,
    /// Multiplier on the He init of each block's second convolution.
    pub branch_init_scale: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_channels: 1,
            stem_width: 16,
            stem_pool: true,
            stage_widths: vec![16, 32, 64],
            blocks_per_stage: vec![2, 2, 2],
            n_classes: N_BEHAVIORS,
            branch_init_scale: 0.5,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Stage layout of ResNet-34 (3, 4, 6, 3 blocks at 64..512 channels).
    pub fn resnet34(seed: u64) -> Self {
        Self {
            input_channels: 3,
            stem_width: 64,
            stem_pool: true,
            stage_widths: vec![64, 128, 256, 512],
            blocks_per_stage: vec![3, 4, 6, 3],
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes != N_BEHAVIORS {
            return Err(Error::invalid(format!("n_classes must be {N_BEHAVIORS}, got {}", self.n_classes)));
        }
        if self.input_channels == 0 || self.stem_width == 0 {
            return Err(Error::invalid("input_channels and stem_width must be positive"));
        }
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.blocks_per_stage.len() {
            return Err(Error::invalid("stage_widths and blocks_per_stage must be non-empty and equal length"));
        }
        if self.stage_widths.contains(&0) || self.blocks_per_stage.contains(&0) {
            return Err(Error::invalid("stage widths and block counts must be positive"));
        }
        if !(self.branch_init_scale.is_finite() && self.branch_init_scale >= 0.0) {
            return Err(Error::invalid("branch_init_scale must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Indices into the parameter store for one residual block.
#[derive(Debug, Clone)]
struct BlockParams {
    conv1: (usize, usize),
    conv2: (usize, usize),
    proj: Option<(usize, usize)>,
    stride: usize,
}

/// Four-headed residual CNN: stem conv, residual stages, global average
/// pool, fully connected head.
#[derive(Debug, Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    stem: (usize, usize),
    blocks: Vec<Vec<BlockParams>>,
    head: (usize, usize),
}

fn he_tensor<T: Real>(shape: Vec<usize>, fan_in: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let std = scale * (2.0 / fan_in as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::of(normal.sample(rng))).collect();
    Tensor::new(shape, data).expect("shape matches")
}

impl<T: Real> Model<T> {
    /// Seeded He-normal weights, zero biases.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ParamStore::default();
        let mut conv = |params: &mut ParamStore<T>, name: &str, cin: usize, cout: usize, k: usize, scale: f64| {
            let w = params.add(
                format!("{name}.weight"),
                he_tensor(vec![cout, cin, k, k], cin * k * k, scale, &mut rng),
            );
            let b = params.add(format!("{name}.bias"), Tensor::zeros(vec![cout]));
            (w, b)
        };
        let stem = conv(&mut params, "stem", config.input_channels, config.stem_width, 3, 1.0);
        let mut blocks = Vec::new();
        let mut cin = config.stem_width;
        for (s, (&width, &n)) in config.stage_widths.iter().zip(&config.blocks_per_stage).enumerate() {
            let mut stage = Vec::new();
            for b in 0..n {
                let stride = if s > 0 && b == 0 { 2 } else { 1 };
                let name = format!("stage{s}.block{b}");
                let conv1 = conv(&mut params, &format!("{name}.conv1"), cin, width, 3, 1.0);
                let conv2 = conv(&mut params, &format!("{name}.conv2"), width, width, 3, config.branch_init_scale);
                let proj = (stride != 1 || cin != width)
                    .then(|| conv(&mut params, &format!("{name}.proj"), cin, width, 1, 1.0));
                stage.push(BlockParams {
                    conv1,
                    conv2,
                    proj,
                    stride,
                });
                cin = width;
            }
            blocks.push(stage);
        }
        let head_w = he_tensor(vec![config.n_classes, cin], cin, 1.0, &mut rng);
        let head = (
            params.add("head.weight", head_w),
            params.add("head.bias", Tensor::zeros(vec![config.n_classes])),
        );
        Ok(Self {
            config,
            params,
            stem,
            blocks,
            head,
        })
    }

    /// Zero the fully connected head so every class scores equally.
    pub fn zero_head(&mut self) {
        for i in [self.head.0, self.head.1] {
            self.params.tensors[i].data.iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_parameters()
    }

    /// Same architecture and values at another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            stem: self.stem,
            blocks: self.blocks.clone(),
            head: self.head,
        }
    }

    /// Replace parameter values by name; shapes must match.
    pub fn load_params(&mut self, named: Vec<(String, Tensor<T>)>) -> Result<()> {
        if named.len() != self.params.len() {
            return Err(Error::validation(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                named.len()
            )));
        }
        for (name, t) in named {
            let i = self
                .params
                .index_of(&name)
                .ok_or_else(|| Error::validation(format!("unknown parameter '{name}'")))?;
            if self.params.tensors[i].shape != t.shape {
                return Err(Error::validation(format!(
                    "parameter '{name}' has shape {:?}, expected {:?}",
                    t.shape, self.params.tensors[i].shape
                )));
            }
            self.params.tensors[i].data = t.data;
        }
        Ok(())
    }

    fn conv(&self, tape: &mut Tape<T>, x: Var, p: (usize, usize), stride: usize, pad: usize) -> Result<Var> {
        let w = tape.param(&self.params, p.0);
        let b = tape.param(&self.params, p.1);
        tape.conv2d(x, w, b, stride, pad)
    }

    /// `relu(conv2(relu(conv1(x))) + skip(x))`.
    pub fn block_forward(&self, tape: &mut Tape<T>, x: Var, stage: usize, block: usize) -> Result<Var> {
        let bp = self
            .blocks
            .get(stage)
            .and_then(|s| s.get(block))
            .ok_or_else(|| Error::invalid(format!("no block {stage}.{block}")))?;
        let h = self.conv(tape, x, bp.conv1, bp.stride, 1)?;
        let h = tape.relu(h);
        let h = self.conv(tape, h, bp.conv2, 1, 1)?;
        let skip = match bp.proj {
            Some(p) => self.conv(tape, x, p, bp.stride, 0)?,
            None => x,
        };
        let sum = tape.add(h, skip)?;
        Ok(tape.relu(sum))
    }

    /// `[B, 1 | input_channels, H, W] -> [B, 4]` logits.
    pub fn forward(&self, tape: &mut Tape<T>, input: Var) -> Result<Var> {
        let s = tape.shape(input).to_vec();
        let c = self.config.input_channels;
        if s.len() != 4 || !(s[1] == 1 || s[1] == c) || s[0] == 0 {
            return Err(Error::invalid(format!(
                "model input must be [B, 1 or {c}, H, W], got {s:?}"
            )));
        }
        let min_side = 1 << (self.blocks.len() - 1 + usize::from(self.config.stem_pool));
        if s[2] < min_side || s[3] < min_side {
            return Err(Error::invalid(format!(
                "model input {}x{} is smaller than {min_side}x{min_side}",
                s[2], s[3]
            )));
        }
        let x = if s[1] != c {
            let t = replicate_channels(&tape.tensor(input), c);
            tape.input(&t)
        } else {
            input
        };
        let mut h = self.conv(tape, x, self.stem, 1, 1)?;
        h = tape.relu(h);
        if self.config.stem_pool {
            h = tape.max_pool2d(h, 2)?;
        }
        for (s, stage) in self.blocks.iter().enumerate() {
            for b in 0..stage.len() {
                h = self.block_forward(tape, h, s, b)?;
            }
        }
        let pooled = tape.global_avg_pool(h)?;
        let w = tape.param(&self.params, self.head.0);
        let b = tape.param(&self.params, self.head.1);
        tape.linear(pooled, w, b)
    }

    /// Inference-only logits for a batch tensor.
    pub fn logits(&self, batch: &Tensor<T>) -> Result<Vec<Logits>> {
        let mut tape = Tape::new();
        let x = tape.input(batch);
        let out = self.forward(&mut tape, x)?;
        Ok(tape
            .value(out)
            .chunks_exact(N_BEHAVIORS)
            .map(|r| std::array::from_fn(|i| r[i].as_f64()))
            .collect())
    }
}

fn replicate_channels<T: Real>(t: &Tensor<T>, c: usize) -> Tensor<T> {
    let (b, plane) = (t.shape[0], t.shape[2] * t.shape[3]);
    let mut data = Vec::with_capacity(b * c * plane);
    for img in t.data.chunks_exact(plane) {
        for _ in 0..c {
            data.extend_from_slice(img);
        }
    }
    Tensor::new(vec![b, c, t.shape[2], t.shape[3]], data).expect("shape matches")
}

/// Stack normalized images into a `[B, 1, H, W]` batch scaled to `[0, 1]`.
pub fn batch_from_images<T: Real>(images: &[&SpectrogramImage]) -> Result<Tensor<T>> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
    let (rows, cols) = (first.rows, first.cols);
    let mut data = Vec::with_capacity(images.len() * rows * cols);
    for img in images {
        if (img.rows, img.cols) != (rows, cols) {
            return Err(Error::invalid(format!(
                "image {}x{} does not match batch size {rows}x{cols}",
                img.rows, img.cols
            )));
        }
        data.extend(img.values.iter().map(|v| T::of(v / 255.0)));
    }
    Tensor::new(vec![images.len(), 1, rows, cols], data)
}
