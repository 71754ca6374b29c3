//! The segmentation network: four pooling encoder blocks (the first without
//! pooling), a bottleneck, four transposed-convolution decoder blocks with
//! skip concatenation, and a 1×1 sigmoid head.
//!
//! Every 3×3 convolution is followed by ELU and then batch normalization.
//! Channel widths double with depth: `base, 2·base, 4·base, 8·base` in the
//! encoder and `16·base` at the bottleneck.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::rng::{derive_seed, rng_from_seed, SeedPart};
use crate::tensor::{BatchStats, BnMode, Checkpoint, CheckpointEntry, Real, Tape, Tensor, Var};

/// Number of 2× poolings between input and bottleneck.
pub const DEPTH: usize = 4;
/// Running-statistics momentum: `running = m·running + (1 − m)·batch`.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Network input `(height, width)`; both divisible by 16.
    pub input_size: [usize; 2],
    pub base_channels: usize,
    /// Output channels including background.
    pub num_classes: usize,
    /// Dropout rate per depth 0–4 (depth 4 is the bottleneck).
    pub dropout_schedule: [f64; DEPTH + 1],
    /// Kernel size of the upsampling transposed convolution: 2, or 3 with output padding.
    pub upsample_kernel: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_size: [224, 224],
            base_channels: 32,
            num_classes: 4,
            dropout_schedule: [0.3, 0.37, 0.43, 0.5, 0.5],
            upsample_kernel: 2,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be positive and divisible by 16"
            )));
        }
        if self.base_channels == 0 || self.num_classes == 0 {
            return Err(Error::Config("channel counts must be positive".into()));
        }
        for (i, &r) in self.dropout_schedule.iter().enumerate() {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("dropout rate {r} at depth {i} outside [0, 1)")));
            }
        }
        if self.dropout_schedule.windows(2).any(|p| p[1] < p[0]) {
            return Err(Error::Config("dropout rates must not decrease with depth".into()));
        }
        if !matches!(self.upsample_kernel, 2 | 3) {
            return Err(Error::Config(format!(
                "upsample kernel must be 2 or 3, got {}",
                self.upsample_kernel
            )));
        }
        Ok(())
    }

    pub fn channels_at(&self, depth: usize) -> usize {
        self.base_channels << depth
    }
}

/// Forward-pass behaviour.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunMode {
    pub train: bool,
    /// Use running statistics in batch norm even when training.
    pub freeze_batchnorm: bool,
    pub dropout_seed: u64,
}

impl RunMode {
    pub const INFER: RunMode = RunMode { train: false, freeze_batchnorm: false, dropout_seed: 0 };

    pub fn train(dropout_seed: u64) -> Self {
        RunMode { train: true, freeze_batchnorm: false, dropout_seed }
    }
}

#[derive(Debug, Clone)]
struct ConvUnit {
    kernel: usize,
    bias: usize,
    gamma: usize,
    beta: usize,
    bn: usize,
}

#[derive(Debug, Clone)]
struct Block {
    depth: usize,
    pool: bool,
    first: ConvUnit,
    second: ConvUnit,
}

#[derive(Debug, Clone)]
struct UpBlock {
    kernel: usize,
    bias: usize,
    block: Block,
}

#[derive(Debug, Clone)]
struct RunningStats<T> {
    name: String,
    mean: Vec<T>,
    var: Vec<T>,
}

/// Instantiated network parameters plus the layer wiring that uses them.
#[derive(Debug, Clone)]
pub struct UNetModel<T> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    running: Vec<RunningStats<T>>,
    encoder: Vec<Block>,
    bottleneck: Block,
    decoder: Vec<UpBlock>,
    head_kernel: usize,
    head_bias: usize,
}

struct Builder<'a, T> {
    rng: &'a mut crate::rng::SeededRng,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    running: Vec<RunningStats<T>>,
}

impl<T: Real> Builder<'_, T> {
    fn add(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.params.push(t);
        self.params.len() - 1
    }

    fn uniform(&mut self, shape: &[usize], limit: f64) -> Tensor<T> {
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::lit(self.rng.gen_range(-limit..limit))).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    fn conv_unit(&mut self, prefix: &str, cin: usize, cout: usize) -> ConvUnit {
        // He-uniform variance scaling, suited to ELU
        let limit = (6.0 / (cin * 9) as f64).sqrt();
        let k = self.uniform(&[cout, cin, 3, 3], limit);
        let kernel = self.add(format!("{prefix}.kernel"), k);
        let bias = self.add(format!("{prefix}.bias"), Tensor::zeros(&[cout]));
        let gamma = self.add(format!("{prefix}.bn.gamma"), Tensor::full(&[cout], T::one()));
        let beta = self.add(format!("{prefix}.bn.beta"), Tensor::zeros(&[cout]));
        self.running.push(RunningStats {
            name: format!("{prefix}.bn"),
            mean: vec![T::zero(); cout],
            var: vec![T::one(); cout],
        });
        ConvUnit { kernel, bias, gamma, beta, bn: self.running.len() - 1 }
    }

    fn block(&mut self, prefix: &str, depth: usize, pool: bool, cin: usize, cout: usize) -> Block {
        Block {
            depth,
            pool,
            first: self.conv_unit(&format!("{prefix}.conv1"), cin, cout),
            second: self.conv_unit(&format!("{prefix}.conv2"), cout, cout),
        }
    }
}

impl<T: Real> UNetModel<T> {
    /// Deterministically initializes a network from `config.seed`.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = rng_from_seed(config.seed);
        let mut b = Builder::<T> { rng: &mut rng, names: vec![], params: vec![], running: vec![] };
        let mut encoder = Vec::with_capacity(DEPTH);
        let mut cin = 1;
        for d in 0..DEPTH {
            let c = config.channels_at(d);
            encoder.push(b.block(&format!("enc{d}"), d, d > 0, cin, c));
            cin = c;
        }
        let bottleneck = b.block("bottleneck", DEPTH, true, cin, config.channels_at(DEPTH));
        let k = config.upsample_kernel;
        let mut decoder = Vec::with_capacity(DEPTH);
        for d in (0..DEPTH).rev() {
            let (cin, cout) = (config.channels_at(d + 1), config.channels_at(d));
            let fan_in = (cin * k * k / 4).max(1);
            let t = b.uniform(&[cin, cout, k, k], (6.0 / fan_in as f64).sqrt());
            let kernel = b.add(format!("dec{d}.up.kernel"), t);
            let bias = b.add(format!("dec{d}.up.bias"), Tensor::zeros(&[cout]));
            let block = b.block(&format!("dec{d}"), d, false, 2 * cout, cout);
            decoder.push(UpBlock { kernel, bias, block });
        }
        let (c0, nc) = (config.channels_at(0), config.num_classes);
        let t = b.uniform(&[nc, c0, 1, 1], (6.0 / (c0 + nc) as f64).sqrt());
        let head_kernel = b.add("head.kernel".into(), t);
        let head_bias = b.add("head.bias".into(), Tensor::zeros(&[nc]));
        Ok(Self {
            config: config.clone(),
            names: b.names,
            params: b.params,
            running: b.running,
            encoder,
            bottleneck,
            decoder,
            head_kernel,
            head_bias,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    /// Number of trainable scalars (running statistics excluded).
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Pushes every trainable tensor onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape<T>, requires_grad: bool) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.clone(), requires_grad)).collect()
    }

    fn conv_unit(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        unit: &ConvUnit,
        x: Var,
        mode: &RunMode,
        stats: &mut Vec<(usize, BatchStats<T>)>,
    ) -> Result<Var> {
        let y = tape.conv2d(x, vars[unit.kernel], Some(vars[unit.bias]))?;
        let y = tape.elu(y);
        let bn_mode = if mode.train && !mode.freeze_batchnorm {
            BnMode::Batch
        } else {
            let r = &self.running[unit.bn];
            BnMode::Running { mean: r.mean.clone(), var: r.var.clone() }
        };
        let (y, s) = tape.batchnorm2d(y, vars[unit.gamma], vars[unit.beta], bn_mode)?;
        if let Some(s) = s {
            stats.push((unit.bn, s));
        }
        Ok(y)
    }

    fn block(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        block: &Block,
        x: Var,
        mode: &RunMode,
        stats: &mut Vec<(usize, BatchStats<T>)>,
    ) -> Result<Var> {
        let x = if block.pool { tape.maxpool2(x)? } else { x };
        let y = self.conv_unit(tape, vars, &block.first, x, mode, stats)?;
        let rate = self.config.dropout_schedule[block.depth];
        let seed = derive_seed(mode.dropout_seed, &[SeedPart::Int(block.first.bn as u64)]);
        let y = tape.dropout(y, rate, mode.train, seed)?;
        self.conv_unit(tape, vars, &block.second, y, mode, stats)
    }

    /// Encoder block at `depth` (0–3), or the bottleneck at depth 4. Blocks past
    /// the first max-pool their input before convolving; the result feeds both
    /// the next block and the decoder skip connection.
    pub fn down_block(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        depth: usize,
        x: Var,
        mode: &RunMode,
        stats: &mut Vec<(usize, BatchStats<T>)>,
    ) -> Result<Var> {
        let block = match depth {
            d if d < DEPTH => &self.encoder[d],
            DEPTH => &self.bottleneck,
            _ => return Err(Error::Parameter(format!("no encoder block at depth {depth}"))),
        };
        let [_, _, h, w] = tape.value(x).dims4("down block input")?;
        if block.pool && (h % 2 != 0 || w % 2 != 0) {
            return Err(shape_err!("down block at depth {depth} needs even dims, got {h}x{w}"));
        }
        self.block(tape, vars, block, x, mode, stats)
    }

    /// Decoder block at `depth` (3 down to 0): upsample `x` 2×, concatenate
    /// `skip`, then two conv units.
    pub fn up_block(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        depth: usize,
        x: Var,
        skip: Var,
        mode: &RunMode,
        stats: &mut Vec<(usize, BatchStats<T>)>,
    ) -> Result<Var> {
        if depth >= DEPTH {
            return Err(Error::Parameter(format!("no decoder block at depth {depth}")));
        }
        let up = &self.decoder[DEPTH - 1 - depth];
        let [_, _, xh, xw] = tape.value(x).dims4("up block input")?;
        let [_, _, sh, sw] = tape.value(skip).dims4("skip input")?;
        if sh != 2 * xh || sw != 2 * xw {
            return Err(shape_err!(
                "skip {sh}x{sw} must be exactly twice the upsampled input {xh}x{xw}"
            ));
        }
        let (pad, out_pad) = if self.config.upsample_kernel == 3 { (1, 1) } else { (0, 0) };
        let u = tape.conv_transpose2d(x, vars[up.kernel], Some(vars[up.bias]), pad, out_pad)?;
        let cat = tape.concat_channels(u, skip)?;
        self.block(tape, vars, &up.block, cat, mode, stats)
    }

    /// Full network on `x` (`[B, 1, H, W]`) returning per-channel probabilities and
    /// the batch statistics gathered by train-mode batch norm layers.
    pub fn forward_graph(
        &self,
        tape: &mut Tape<T>,
        vars: &[Var],
        x: Var,
        mode: &RunMode,
    ) -> Result<(Var, Vec<(usize, BatchStats<T>)>)> {
        let [_, c, h, w] = tape.value(x).dims4("network input")?;
        if c != 1 || [h, w] != self.config.input_size {
            return Err(shape_err!(
                "network expects [B, 1, {}, {}], got [_, {c}, {h}, {w}]",
                self.config.input_size[0],
                self.config.input_size[1]
            ));
        }
        let mut stats = Vec::new();
        let mut skips = Vec::with_capacity(DEPTH);
        let mut cur = x;
        for d in 0..DEPTH {
            cur = self.down_block(tape, vars, d, cur, mode, &mut stats)?;
            skips.push(cur);
        }
        cur = self.down_block(tape, vars, DEPTH, cur, mode, &mut stats)?;
        for d in (0..DEPTH).rev() {
            cur = self.up_block(tape, vars, d, cur, skips[d], mode, &mut stats)?;
        }
        let logits = tape.conv2d(cur, vars[self.head_kernel], Some(vars[self.head_bias]))?;
        Ok((tape.sigmoid(logits), stats))
    }

    /// Folds train-mode batch statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &[(usize, BatchStats<T>)]) {
        let m = T::lit(BN_MOMENTUM);
        let one_m = T::one() - m;
        for (idx, s) in stats {
            let r = &mut self.running[*idx];
            for (rm, &bm) in r.mean.iter_mut().zip(&s.mean) {
                *rm = m * *rm + one_m * bm;
            }
            for (rv, &bv) in r.var.iter_mut().zip(&s.var) {
                *rv = m * *rv + one_m * bv;
            }
        }
    }

    /// Overwrites running statistics with the given batch statistics.
    pub fn set_running_stats(&mut self, stats: &[(usize, BatchStats<T>)]) {
        for (idx, s) in stats {
            self.running[*idx].mean = s.mean.clone();
            self.running[*idx].var = s.var.clone();
        }
    }

    /// Inference-mode probabilities for a `[B, 1, H, W]` batch.
    pub fn predict(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        self.run(batch, &RunMode::INFER)
    }

    /// Forward without gradient bookkeeping; running statistics are not updated.
    pub fn run(&self, batch: &Tensor<T>, mode: &RunMode) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(batch.clone());
        let (y, _) = self.forward_graph(&mut tape, &vars, x, mode)?;
        Ok(tape.value(y).clone())
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut entries: Vec<CheckpointEntry<T>> = self
            .names
            .iter()
            .zip(&self.params)
            .map(|(n, t)| CheckpointEntry { name: n.clone(), tensor: t.clone() })
            .collect();
        for r in &self.running {
            let c = r.mean.len();
            entries.push(CheckpointEntry {
                name: format!("{}.running_mean", r.name),
                tensor: Tensor::new(vec![c], r.mean.clone()).unwrap(),
            });
            entries.push(CheckpointEntry {
                name: format!("{}.running_var", r.name),
                tensor: Tensor::new(vec![c], r.var.clone()).unwrap(),
            });
        }
        Checkpoint {
            entries,
            metadata: serde_json::json!({ "model_config": self.config }),
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        let config: ModelConfig = serde_json::from_value(
            ckpt.metadata
                .get("model_config")
                .cloned()
                .ok_or_else(|| Error::Validation("checkpoint lacks model_config".into()))?,
        )?;
        let mut model = Self::build(&config)?;
        let lookup = |name: &str| {
            ckpt.entries
                .iter()
                .find(|e| e.name == name)
                .map(|e| &e.tensor)
                .ok_or_else(|| Error::Validation(format!("checkpoint lacks tensor {name}")))
        };
        for (name, p) in model.names.iter().zip(model.params.iter_mut()) {
            let t = lookup(name)?;
            if t.shape() != p.shape() {
                return Err(shape_err!("checkpoint tensor {name} has shape {:?}", t.shape()));
            }
            *p = t.clone();
        }
        for r in &mut model.running {
            r.mean = lookup(&format!("{}.running_mean", r.name))?.data().to_vec();
            r.var = lookup(&format!("{}.running_var", r.name))?.data().to_vec();
        }
        Ok(model)
    }

    /// Same network at another precision.
    pub fn cast<U: Real>(&self) -> UNetModel<U> {
        UNetModel {
            config: self.config.clone(),
            names: self.names.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            running: self
                .running
                .iter()
                .map(|r| RunningStats {
                    name: r.name.clone(),
                    mean: r.mean.iter().map(|v| U::lit(v.as_f64())).collect(),
                    var: r.var.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
            encoder: self.encoder.clone(),
            bottleneck: self.bottleneck.clone(),
            decoder: self.decoder.clone(),
            head_kernel: self.head_kernel,
            head_bias: self.head_bias,
        }
    }
}
