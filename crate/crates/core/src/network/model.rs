use std::collections::{BTreeMap, HashMap};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal, Uniform};

use super::{ModelConfig, NORM_EPS, NORM_MOMENTUM};
use crate::error::{Error, Result};
use crate::tensor::{self, NormStats, Tape, Tensor, Var};

/// Shape descriptor of a convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub has_bias: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    /// `[out, in, k, k]`
    pub weight: Tensor,
    pub bias: Option<Tensor>,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    fn he(rng: &mut ChaCha8Rng, out_c: usize, in_c: usize, k: usize, bias: bool) -> Self {
        let std = (2.0 / (in_c * k * k) as f64).sqrt();
        let weight = Tensor::from_fn(&[out_c, in_c, k, k], |_| {
            std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
        });
        Self {
            weight,
            bias: bias.then(|| Tensor::zeros(&[out_c])),
            stride: 1,
            padding: k / 2,
        }
    }

    pub fn spec(&self) -> ConvSpec {
        let s = self.weight.shape();
        ConvSpec {
            in_channels: s[1],
            out_channels: s[0],
            kernel: s[2],
            stride: self.stride,
            padding: self.padding,
            has_bias: self.bias.is_some(),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        tensor::conv2d_forward(
            x,
            &self.weight,
            self.bias.as_ref(),
            self.stride,
            self.padding,
        )
    }
}

/// Per-channel affine normalisation with running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct AffineNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub eps: f64,
}

impl AffineNorm {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::full(&[channels], 1.0),
            beta: Tensor::zeros(&[channels]),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            eps: NORM_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn update(&mut self, stats: &NormStats) {
        for (r, m) in self.running_mean.iter_mut().zip(&stats.mean) {
            *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * m;
        }
        for (r, v) in self.running_var.iter_mut().zip(&stats.var) {
            *r = (1.0 - NORM_MOMENTUM) * *r + NORM_MOMENTUM * v;
        }
    }

    /// Inference-mode output `γ·(x − mean)/sqrt(var+eps) + β`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        let g = tape.constant(self.gamma.clone());
        let b = tape.constant(self.beta.clone());
        let y = tensor::affine_norm(
            &mut tape,
            xv,
            g,
            b,
            &self.running_mean,
            &self.running_var,
            self.eps,
        )?;
        Ok(tape.value(y).clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    /// `[out, in]`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn uniform(rng: &mut ChaCha8Rng, out_f: usize, in_f: usize) -> Self {
        let bound = 1.0 / (in_f as f64).sqrt();
        let dist = Uniform::new(-bound, bound).expect("valid bound");
        Self {
            weight: Tensor::from_fn(&[out_f, in_f], |_| dist.sample(rng)),
            bias: Tensor::zeros(&[out_f]),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    /// 2×2 average pool applied to the block input (first block of a stage
    /// and the stem transition).
    pub downsample: bool,
    pub conv3: Conv,
    pub norm: Option<AffineNorm>,
    /// `[D, D, 1, 1]`, identity at initialisation.
    pub compactor: Option<Tensor>,
    pub conv1: Conv,
    pub shortcut: Option<Conv>,
}

impl Block {
    /// Channel count between conv3×3 and conv1×1.
    pub fn inner_width(&self) -> usize {
        self.conv3.out_channels()
    }

    pub fn in_channels(&self) -> usize {
        self.conv3.in_channels()
    }

    pub fn out_channels(&self) -> usize {
        self.conv1.out_channels()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamKind {
    StemWeight,
    StemGamma,
    StemBeta,
    Conv3Weight(usize),
    Conv3Bias(usize),
    NormGamma(usize),
    NormBeta(usize),
    Compactor(usize),
    Conv1Weight(usize),
    Conv1Bias(usize),
    ShortcutWeight(usize),
    ShortcutBias(usize),
    EmbedWeight,
    EmbedBias,
    ClassifierWeight,
    ClassifierBias,
}

impl ParamKind {
    pub fn name(&self) -> String {
        use ParamKind::*;
        match *self {
            StemWeight => "stem.weight".into(),
            StemGamma => "stem_norm.gamma".into(),
            StemBeta => "stem_norm.beta".into(),
            Conv3Weight(b) => format!("blocks.{b}.conv3.weight"),
            Conv3Bias(b) => format!("blocks.{b}.conv3.bias"),
            NormGamma(b) => format!("blocks.{b}.norm.gamma"),
            NormBeta(b) => format!("blocks.{b}.norm.beta"),
            Compactor(b) => format!("blocks.{b}.compactor"),
            Conv1Weight(b) => format!("blocks.{b}.conv1.weight"),
            Conv1Bias(b) => format!("blocks.{b}.conv1.bias"),
            ShortcutWeight(b) => format!("blocks.{b}.shortcut.weight"),
            ShortcutBias(b) => format!("blocks.{b}.shortcut.bias"),
            EmbedWeight => "embed.weight".into(),
            EmbedBias => "embed.bias".into(),
            ClassifierWeight => "classifier.weight".into(),
            ClassifierBias => "classifier.bias".into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Parameters of a [`Model`] bound to a tape.
pub struct ModelVars {
    order: Vec<ParamKind>,
    vars: HashMap<ParamKind, Var>,
}

impl ModelVars {
    /// Adopt variables already on a tape, one per entry of
    /// [`Model::params`] in the same order.
    pub fn from_vars(model: &Model, vars: &[Var]) -> Result<Self> {
        let order: Vec<ParamKind> = model.params().into_iter().map(|(k, _)| k).collect();
        if order.len() != vars.len() {
            return Err(Error::InvalidArgument(format!(
                "model has {} parameters, got {} variables",
                order.len(),
                vars.len()
            )));
        }
        let vars = order.iter().copied().zip(vars.iter().copied()).collect();
        Ok(Self { order, vars })
    }

    pub fn get(&self, kind: ParamKind) -> Var {
        self.vars[&kind]
    }

    pub fn kinds(&self) -> &[ParamKind] {
        &self.order
    }

    /// Gradients in parameter order; zeros where nothing was accumulated.
    pub fn grads(&self, tape: &Tape) -> Vec<Tensor> {
        self.order
            .iter()
            .map(|k| tape.grad_tensor(self.vars[k]))
            .collect()
    }
}

pub struct ForwardResult {
    pub embedding: Var,
    pub logits: Var,
    /// GAP of each block's tap point.
    pub block_features: Vec<Var>,
    /// Tap maps before pooling.
    pub block_maps: Vec<Var>,
    /// Batch statistics of every norm layer (train mode only), stem first.
    pub norm_stats: Vec<NormStats>,
}

/// Eval-mode outputs as plain tensors.
#[derive(Clone, Debug)]
pub struct Inference {
    pub embedding: Tensor,
    pub logits: Tensor,
    pub block_features: Vec<Tensor>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub stem: Conv,
    pub stem_norm: AffineNorm,
    pub blocks: Vec<Block>,
    pub embed: Linear,
    pub classifier: Linear,
}

impl Model {
    /// Seeded initialisation. Compactors draw no randomness, so a teacher
    /// and a student built from the same seed share every other weight.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stem = Conv::he(&mut rng, config.widths[0], config.in_channels, 3, false);
        let stem_norm = AffineNorm::new(config.widths[0]);
        let mut blocks = Vec::with_capacity(config.num_blocks());
        let mut in_c = config.widths[0];
        for (&width, &count) in config.widths.iter().zip(&config.blocks_per_stage) {
            for i in 0..count {
                let conv3 = Conv::he(&mut rng, width, in_c, 3, false);
                let conv1 = Conv::he(&mut rng, width, width, 1, true);
                let shortcut = (in_c != width).then(|| Conv::he(&mut rng, width, in_c, 1, true));
                blocks.push(Block {
                    downsample: i == 0,
                    conv3,
                    norm: Some(AffineNorm::new(width)),
                    compactor: config
                        .with_compactors
                        .then(|| Tensor::identity_kernel(width)),
                    conv1,
                    shortcut,
                });
                in_c = width;
            }
        }
        let embed = Linear::uniform(&mut rng, config.embedding_dim, in_c);
        let classifier = Linear::uniform(&mut rng, config.num_classes, config.embedding_dim);
        Ok(Self {
            config: config.clone(),
            stem,
            stem_norm,
            blocks,
            embed,
            classifier,
        })
    }

    pub fn num_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn has_compactors(&self) -> bool {
        self.blocks.iter().any(|b| b.compactor.is_some())
    }

    /// Trainable tensors in canonical order.
    pub fn params(&self) -> Vec<(ParamKind, &Tensor)> {
        use ParamKind::*;
        let mut out = vec![
            (StemWeight, &self.stem.weight),
            (StemGamma, &self.stem_norm.gamma),
            (StemBeta, &self.stem_norm.beta),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((Conv3Weight(i), &b.conv3.weight));
            if let Some(bias) = &b.conv3.bias {
                out.push((Conv3Bias(i), bias));
            }
            if let Some(n) = &b.norm {
                out.push((NormGamma(i), &n.gamma));
                out.push((NormBeta(i), &n.beta));
            }
            if let Some(c) = &b.compactor {
                out.push((Compactor(i), c));
            }
            out.push((Conv1Weight(i), &b.conv1.weight));
            out.push((Conv1Bias(i), b.conv1.bias.as_ref().expect("conv1 has bias")));
            if let Some(s) = &b.shortcut {
                out.push((ShortcutWeight(i), &s.weight));
                out.push((ShortcutBias(i), s.bias.as_ref().expect("shortcut has bias")));
            }
        }
        out.extend([
            (EmbedWeight, &self.embed.weight),
            (EmbedBias, &self.embed.bias),
            (ClassifierWeight, &self.classifier.weight),
            (ClassifierBias, &self.classifier.bias),
        ]);
        out
    }

    pub fn params_mut(&mut self) -> Vec<(ParamKind, &mut Tensor)> {
        use ParamKind::*;
        let mut out = vec![
            (StemWeight, &mut self.stem.weight),
            (StemGamma, &mut self.stem_norm.gamma),
            (StemBeta, &mut self.stem_norm.beta),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            out.push((Conv3Weight(i), &mut b.conv3.weight));
            if let Some(bias) = &mut b.conv3.bias {
                out.push((Conv3Bias(i), bias));
            }
            if let Some(n) = &mut b.norm {
                out.push((NormGamma(i), &mut n.gamma));
                out.push((NormBeta(i), &mut n.beta));
            }
            if let Some(c) = &mut b.compactor {
                out.push((Compactor(i), c));
            }
            out.push((Conv1Weight(i), &mut b.conv1.weight));
            out.push((Conv1Bias(i), b.conv1.bias.as_mut().expect("conv1 has bias")));
            if let Some(s) = &mut b.shortcut {
                out.push((ShortcutWeight(i), &mut s.weight));
                out.push((ShortcutBias(i), s.bias.as_mut().expect("shortcut has bias")));
            }
        }
        out.extend([
            (EmbedWeight, &mut self.embed.weight),
            (EmbedBias, &mut self.embed.bias),
            (ClassifierWeight, &mut self.classifier.weight),
            (ClassifierBias, &mut self.classifier.bias),
        ]);
        out
    }

    pub fn param(&self, kind: ParamKind) -> Option<&Tensor> {
        self.params()
            .into_iter()
            .find(|(k, _)| *k == kind)
            .map(|(_, t)| t)
    }

    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> ModelVars {
        let mut order = Vec::new();
        let mut vars = HashMap::new();
        for (kind, t) in self.params() {
            order.push(kind);
            vars.insert(kind, tape.leaf(t.clone(), requires_grad));
        }
        ModelVars { order, vars }
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let want = self.config.input_shape();
        if shape.len() != 4 || shape[1..] != want {
            return Err(Error::Shape {
                op: "model input",
                lhs: shape.to_vec(),
                rhs: [0, want[0], want[1], want[2]].to_vec(),
            });
        }
        Ok(())
    }

    fn norm(
        tape: &mut Tape,
        x: Var,
        gamma: Var,
        beta: Var,
        norm: &AffineNorm,
        mode: Mode,
        stats: &mut Vec<NormStats>,
    ) -> Result<Var> {
        match mode {
            Mode::Train => {
                let (y, s) = tensor::batch_norm(tape, x, gamma, beta, norm.eps)?;
                stats.push(s);
                Ok(y)
            }
            Mode::Eval => tensor::affine_norm(
                tape,
                x,
                gamma,
                beta,
                &norm.running_mean,
                &norm.running_var,
                norm.eps,
            ),
        }
    }

    pub fn forward_with_taps(
        &self,
        tape: &mut Tape,
        vars: &ModelVars,
        input: Var,
        mode: Mode,
    ) -> Result<ForwardResult> {
        use ParamKind::*;
        self.check_input(tape.value(input).shape())?;
        let mut stats = Vec::new();
        let x = tensor::conv2d(tape, input, vars.get(StemWeight), None, 1, 1)?;
        let x = Self::norm(
            tape,
            x,
            vars.get(StemGamma),
            vars.get(StemBeta),
            &self.stem_norm,
            mode,
            &mut stats,
        )?;
        let mut x = tensor::relu(tape, x);
        let mut block_features = Vec::with_capacity(self.blocks.len());
        let mut block_maps = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            if b.downsample {
                x = tensor::avg_pool2(tape, x)?;
            }
            let bias = b.conv3.bias.as_ref().map(|_| vars.get(Conv3Bias(i)));
            let mut h = tensor::conv2d(tape, x, vars.get(Conv3Weight(i)), bias, 1, 1)?;
            if let Some(n) = &b.norm {
                h = Self::norm(
                    tape,
                    h,
                    vars.get(NormGamma(i)),
                    vars.get(NormBeta(i)),
                    n,
                    mode,
                    &mut stats,
                )?;
            }
            if b.compactor.is_some() {
                h = tensor::conv2d(tape, h, vars.get(Compactor(i)), None, 1, 0)?;
            }
            block_maps.push(h);
            block_features.push(tensor::gap(tape, h)?);
            let h = tensor::relu(tape, h);
            let h = tensor::conv2d(
                tape,
                h,
                vars.get(Conv1Weight(i)),
                Some(vars.get(Conv1Bias(i))),
                1,
                0,
            )?;
            let sc = match &b.shortcut {
                Some(_) => tensor::conv2d(
                    tape,
                    x,
                    vars.get(ShortcutWeight(i)),
                    Some(vars.get(ShortcutBias(i))),
                    1,
                    0,
                )?,
                None => x,
            };
            let sum = tensor::add(tape, h, sc)?;
            x = tensor::relu(tape, sum);
        }
        let pooled = tensor::gap(tape, x)?;
        let embedding = tensor::linear(
            tape,
            pooled,
            vars.get(EmbedWeight),
            Some(vars.get(EmbedBias)),
        )?;
        let logits = tensor::linear(
            tape,
            embedding,
            vars.get(ClassifierWeight),
            Some(vars.get(ClassifierBias)),
        )?;
        Ok(ForwardResult {
            embedding,
            logits,
            block_features,
            block_maps,
            norm_stats: stats,
        })
    }

    /// Fold batch statistics from a train-mode forward into running estimates.
    pub fn update_running_stats(&mut self, stats: &[NormStats]) {
        let mut it = stats.iter();
        if let Some(s) = it.next() {
            self.stem_norm.update(s);
        }
        for b in &mut self.blocks {
            if let Some(n) = &mut b.norm {
                if let Some(s) = it.next() {
                    n.update(s);
                }
            }
        }
    }

    /// Eval-mode forward in chunks, without gradients.
    pub fn infer(&self, batch: &Tensor) -> Result<Inference> {
        self.check_input(batch.shape())?;
        const CHUNK: usize = 64;
        let n = batch.shape()[0];
        let mut emb = Vec::new();
        let mut logits = Vec::new();
        let mut feats: Vec<Vec<f64>> = vec![Vec::new(); self.blocks.len()];
        let mut start = 0;
        while start < n {
            let rows: Vec<usize> = (start..(start + CHUNK).min(n)).collect();
            let mut tape = Tape::new();
            let vars = self.bind(&mut tape, false);
            let x = tape.constant(batch.select_rows(&rows));
            let out = self.forward_with_taps(&mut tape, &vars, x, Mode::Eval)?;
            emb.extend_from_slice(tape.value(out.embedding).data());
            logits.extend_from_slice(tape.value(out.logits).data());
            for (acc, f) in feats.iter_mut().zip(&out.block_features) {
                acc.extend_from_slice(tape.value(*f).data());
            }
            start += CHUNK;
        }
        let block_features = feats
            .into_iter()
            .zip(&self.blocks)
            .map(|(d, b)| Tensor::new(vec![n, b.inner_width()], d))
            .collect::<Result<_>>()?;
        Ok(Inference {
            embedding: Tensor::new(vec![n, self.config.embedding_dim], emb)?,
            logits: Tensor::new(vec![n, self.config.num_classes], logits)?,
            block_features,
        })
    }

    /// Parameters plus norm running statistics, keyed by name.
    pub fn to_named_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self
            .params()
            .into_iter()
            .map(|(k, t)| (k.name(), t.clone()))
            .collect();
        let stats = |prefix: &str, n: &AffineNorm| {
            let c = n.channels();
            [
                (
                    format!("{prefix}.running_mean"),
                    Tensor::new(vec![c], n.running_mean.clone()).expect("len"),
                ),
                (
                    format!("{prefix}.running_var"),
                    Tensor::new(vec![c], n.running_var.clone()).expect("len"),
                ),
            ]
        };
        out.extend(stats("stem_norm", &self.stem_norm));
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(n) = &b.norm {
                out.extend(stats(&format!("blocks.{i}.norm"), n));
            }
        }
        out
    }

    /// Rebuild a model from named tensors. Optional parts of each block
    /// (norm, compactor, conv3 bias) are recognised by name; widths come
    /// from the stored shapes.
    pub fn from_named_tensors(
        config: &ModelConfig,
        tensors: &BTreeMap<String, Tensor>,
    ) -> Result<Self> {
        let mut model = Model::build(&config.teacher(), 0)?;
        let get = |name: &str| -> Result<Tensor> {
            tensors
                .get(name)
                .cloned()
                .ok_or_else(|| Error::Compat(format!("missing tensor {name}")))
        };
        let load_norm = |prefix: &str| -> Result<AffineNorm> {
            let gamma = get(&format!("{prefix}.gamma"))?;
            Ok(AffineNorm {
                beta: get(&format!("{prefix}.beta"))?,
                running_mean: get(&format!("{prefix}.running_mean"))?.into_data(),
                running_var: get(&format!("{prefix}.running_var"))?.into_data(),
                eps: NORM_EPS,
                gamma,
            })
        };
        model.stem.weight = get("stem.weight")?;
        model.stem_norm = load_norm("stem_norm")?;
        for (i, b) in model.blocks.iter_mut().enumerate() {
            let p = format!("blocks.{i}");
            b.conv3.weight = get(&format!("{p}.conv3.weight"))?;
            b.conv3.bias = tensors.get(&format!("{p}.conv3.bias")).cloned();
            b.norm = if tensors.contains_key(&format!("{p}.norm.gamma")) {
                Some(load_norm(&format!("{p}.norm"))?)
            } else {
                None
            };
            b.compactor = tensors.get(&format!("{p}.compactor")).cloned();
            b.conv1.weight = get(&format!("{p}.conv1.weight"))?;
            b.conv1.bias = Some(get(&format!("{p}.conv1.bias"))?);
            if let Some(s) = &mut b.shortcut {
                s.weight = get(&format!("{p}.shortcut.weight"))?;
                s.bias = Some(get(&format!("{p}.shortcut.bias"))?);
            }
        }
        model.embed = Linear {
            weight: get("embed.weight")?,
            bias: get("embed.bias")?,
        };
        model.classifier = Linear {
            weight: get("classifier.weight")?,
            bias: get("classifier.bias")?,
        };
        model.config.with_compactors = model.has_compactors();
        model.check_consistency()?;
        Ok(model)
    }

    /// Verify that adjacent layer extents agree.
    pub fn check_consistency(&self) -> Result<()> {
        let compat = |what: String| Err(Error::Compat(what));
        let mut in_c = self.stem.out_channels();
        if self.stem.in_channels() != self.config.in_channels || self.stem_norm.channels() != in_c {
            return compat("stem extents disagree with config".into());
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let d = b.inner_width();
            if b.in_channels() != in_c {
                return compat(format!(
                    "blocks.{i}.conv3 expects {} input channels, got {in_c}",
                    b.in_channels()
                ));
            }
            if b.norm.as_ref().is_some_and(|n| n.channels() != d) {
                return compat(format!("blocks.{i}.norm width differs from conv3"));
            }
            if b.compactor
                .as_ref()
                .is_some_and(|c| c.shape() != [d, d, 1, 1])
            {
                return compat(format!("blocks.{i}.compactor is not {d}x{d}"));
            }
            if b.conv1.in_channels() != d {
                return compat(format!(
                    "blocks.{i}.conv1 expects {} inputs, conv3 yields {d}",
                    b.conv1.in_channels()
                ));
            }
            in_c = b.out_channels();
        }
        if self.embed.weight.shape() != [self.config.embedding_dim, in_c]
            || self.classifier.weight.shape()
                != [self.config.num_classes, self.config.embedding_dim]
        {
            return compat("head extents disagree with config".into());
        }
        Ok(())
    }
}
