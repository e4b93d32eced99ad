//! Object/action encoders and the effect decoder, with an explicit backward
//! pass.
//!
//! Encoders: batch norm over the raw input, `hidden_layers - 1` ReLU layers,
//! then a linear layer with `tanh`. Decoder: layer norm over `[z_o, z_a]`,
//! `hidden_layers` ReLU layers, then a linear output (`[μ, log σ²]` per axis
//! for the distribution head, three values for the point head). Dropout
//! follows every ReLU in train mode.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::loss::{mse_batch, nll_batch, nt_xent_batch, LOG_VAR_RANGE};
use crate::model::matrix::Matrix;
use crate::model::{EffectDist, Embedding, ModelConfig};
use crate::rng::{stream_rng, streams};
use crate::scalar::Scalar;
use crate::world::{Action, Effect};

pub const OBJECT_FEATURES: usize = 4;
pub const ACTION_FEATURES: usize = Action::DIM;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadMode {
    /// Per-axis Gaussian, trained with NLL.
    Distribution,
    /// Direct effect regression, trained with MSE.
    Point,
}

impl HeadMode {
    pub fn outputs(self) -> usize {
        match self {
            HeadMode::Distribution => 6,
            HeadMode::Point => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            HeadMode::Distribution => "distribution",
            HeadMode::Point => "point",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics for batch norm, dropout active.
    Train,
    /// Running statistics, no dropout; pure.
    Eval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Linear<T> {
    /// `in × out`
    pub weight: Matrix<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Linear<T> {
    fn init<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| T::of(rng.random_range(-bound..=bound)))
            .collect();
        Self {
            weight: Matrix::from_vec(fan_in, fan_out, data),
            bias: vec![T::zero(); fan_out],
        }
    }

    fn forward(&self, x: &Matrix<T>) -> Matrix<T> {
        let mut y = x.matmul(&self.weight);
        y.add_row_vector(&self.bias);
        y
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, x: &Matrix<T>, dy: &Matrix<T>, grad: &mut Linear<T>) -> Matrix<T> {
        x.add_transpose_matmul(dy, &mut grad.weight);
        for (g, s) in grad.bias.iter_mut().zip(dy.sum_rows()) {
            *g += s;
        }
        dy.matmul(&self.weight.transpose())
    }

    fn zeros_like(&self) -> Self {
        Self {
            weight: Matrix::zeros(self.weight.rows(), self.weight.cols()),
            bias: vec![T::zero(); self.bias.len()],
        }
    }
}

/// Affine parameters of a batch or layer normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gamma: Vec<T>,
    pub beta: Vec<T>,
}

impl<T: Scalar> Norm<T> {
    fn identity(width: usize) -> Self {
        Self {
            gamma: vec![T::one(); width],
            beta: vec![T::zero(); width],
        }
    }
}

/// A normalization followed by linear layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack<T> {
    pub norm: Norm<T>,
    pub layers: Vec<Linear<T>>,
}

impl<T: Scalar> Stack<T> {
    fn init<R: Rng + ?Sized>(input: usize, width: usize, hidden: usize, output: usize, rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(hidden + 1);
        let mut fan_in = input;
        for _ in 0..hidden {
            layers.push(Linear::init(fan_in, width, rng));
            fan_in = width;
        }
        layers.push(Linear::init(fan_in, output, rng));
        Self {
            norm: Norm::identity(input),
            layers,
        }
    }

    fn zeros_like(&self) -> Self {
        Self {
            norm: Norm {
                gamma: vec![T::zero(); self.norm.gamma.len()],
                beta: vec![T::zero(); self.norm.beta.len()],
            },
            layers: self.layers.iter().map(Linear::zeros_like).collect(),
        }
    }

    fn hidden(&self) -> usize {
        self.layers.len() - 1
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, Vec<usize>, &'a [T])>) {
        out.push((format!("{prefix}.norm.gamma"), vec![self.norm.gamma.len()], &self.norm.gamma));
        out.push((format!("{prefix}.norm.beta"), vec![self.norm.beta.len()], &self.norm.beta));
        for (i, l) in self.layers.iter().enumerate() {
            out.push((
                format!("{prefix}.layers.{i}.weight"),
                vec![l.weight.rows(), l.weight.cols()],
                l.weight.data(),
            ));
            out.push((format!("{prefix}.layers.{i}.bias"), vec![l.bias.len()], &l.bias));
        }
    }

    fn collect_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [T]>) {
        out.push(&mut self.norm.gamma);
        out.push(&mut self.norm.beta);
        for l in self.layers.iter_mut() {
            out.push(l.weight.data_mut());
            out.push(&mut l.bias);
        }
    }
}

/// Every trainable tensor. Gradients and optimizer moments share this type.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub object_encoder: Stack<T>,
    pub action_encoder: Stack<T>,
    pub decoder: Stack<T>,
}

impl<T: Scalar> Params<T> {
    pub fn zeros_like(&self) -> Self {
        Self {
            object_encoder: self.object_encoder.zeros_like(),
            action_encoder: self.action_encoder.zeros_like(),
            decoder: self.decoder.zeros_like(),
        }
    }

    /// `(name, shape, values)` in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out = Vec::new();
        self.object_encoder.collect("object_encoder", &mut out);
        self.action_encoder.collect("action_encoder", &mut out);
        self.decoder.collect("decoder", &mut out);
        out
    }

    /// Mutable views in the same order as [`Params::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut [T]> {
        let mut out = Vec::new();
        self.object_encoder.collect_mut(&mut out);
        self.action_encoder.collect_mut(&mut out);
        self.decoder.collect_mut(&mut out);
        out
    }

    pub fn squared_norm(&self) -> T {
        self.named_tensors()
            .iter()
            .flat_map(|(_, _, t)| t.iter())
            .map(|&v| v * v)
            .sum()
    }

    pub fn scale(&mut self, factor: T) {
        for t in self.tensors_mut() {
            for v in t.iter_mut() {
                *v *= factor;
            }
        }
    }

    pub fn count(&self) -> usize {
        self.named_tensors().iter().map(|(_, _, t)| t.len()).sum()
    }
}

/// Batch-norm running statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    fn new(width: usize) -> Self {
        Self {
            mean: vec![T::zero(); width],
            var: vec![T::one(); width],
        }
    }
}

/// Per-layer dropout multipliers (0 or `1 / (1 - p)`).
#[derive(Debug, Clone, PartialEq)]
pub struct DropoutMasks<T> {
    pub object: Vec<Matrix<T>>,
    pub action: Vec<Matrix<T>>,
    pub decoder: Vec<Matrix<T>>,
}

impl<T: Scalar> DropoutMasks<T> {
    pub fn sample<R: Rng + ?Sized>(model: &EffectModel<T>, rows: usize, rng: &mut R) -> Self {
        let p = model.config.dropout_rate;
        let keep = T::of(1.0 / (1.0 - p));
        let mut layer_masks = |stack: &Stack<T>| -> Vec<Matrix<T>> {
            stack.layers[..stack.hidden()]
                .iter()
                .map(|l| {
                    let data = (0..rows * l.bias.len())
                        .map(|_| if p > 0.0 && rng.random::<f64>() < p { T::zero() } else { keep })
                        .collect();
                    Matrix::from_vec(rows, l.bias.len(), data)
                })
                .collect()
        };
        let object = layer_masks(&model.params.object_encoder);
        let action = layer_masks(&model.params.action_encoder);
        let decoder = layer_masks(&model.params.decoder);
        Self {
            object,
            action,
            decoder,
        }
    }
}

/// Mean and biased variance of one batch, per encoder input feature.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    rows: usize,
    object: (Vec<T>, Vec<T>),
    action: (Vec<T>, Vec<T>),
}

#[derive(Debug, Clone)]
struct StackTape<T> {
    xhat: Matrix<T>,
    /// Per column (batch norm) or per row (layer norm).
    inv_std: Vec<T>,
    /// `inputs[l]` feeds layer `l`; `inputs[0]` is the normalized input.
    inputs: Vec<Matrix<T>>,
    pre: Vec<Matrix<T>>,
    output: Matrix<T>,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
}

#[derive(Debug, Clone)]
struct Tape<T> {
    object: StackTape<T>,
    action: StackTape<T>,
    decoder: StackTape<T>,
    /// Continuous `[z_o, z_a]`.
    code: Matrix<T>,
}

/// Components of one batch loss evaluation (already averaged over the batch).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossParts {
    /// NLL or MSE, depending on the head.
    pub head: f64,
    pub ntxent: f64,
    /// `λ (head + ntxent)`
    pub total: f64,
}

/// A training batch in the model's scalar type.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub objects: Matrix<T>,
    pub actions: Matrix<T>,
    pub effects: Matrix<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(objects: Matrix<T>, actions: Matrix<T>, effects: Matrix<T>) -> Result<Self> {
        let n = objects.rows();
        if n == 0 {
            return Err(Error::Degenerate("empty batch".into()));
        }
        if actions.rows() != n || effects.rows() != n {
            return Err(Error::Input("batch row counts differ".into()));
        }
        if objects.cols() != OBJECT_FEATURES || actions.cols() != ACTION_FEATURES || effects.cols() != 3 {
            return Err(Error::Input("batch column counts are wrong".into()));
        }
        Ok(Self {
            objects,
            actions,
            effects,
        })
    }

    pub fn rows(&self) -> usize {
        self.objects.rows()
    }
}

/// The effect-prediction encoder-decoder.
#[derive(Debug, Clone, PartialEq)]
pub struct EffectModel<T> {
    pub(crate) config: ModelConfig,
    pub(crate) head: HeadMode,
    pub(crate) params: Params<T>,
    pub(crate) object_stats: RunningStats<T>,
    pub(crate) action_stats: RunningStats<T>,
    pub(crate) step: u64,
}

impl<T: Scalar> EffectModel<T> {
    /// Fresh model: uniform fan-in weights, zero biases, identity norms.
    pub fn new(config: ModelConfig, head: HeadMode, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, streams::INIT);
        let w = config.hidden_width;
        let h = config.hidden_layers;
        let object_encoder = Stack::init(OBJECT_FEATURES, w, h - 1, config.object_code_bits, &mut rng);
        let action_encoder = Stack::init(ACTION_FEATURES, w, h - 1, config.action_code_bits, &mut rng);
        let decoder = Stack::init(config.code_width(), w, h, head.outputs(), &mut rng);
        Ok(Self {
            config,
            head,
            params: Params {
                object_encoder,
                action_encoder,
                decoder,
            },
            object_stats: RunningStats::new(OBJECT_FEATURES),
            action_stats: RunningStats::new(ACTION_FEATURES),
            step: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn head(&self) -> HeadMode {
        self.head
    }

    pub fn params(&self) -> &Params<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params<T> {
        &mut self.params
    }

    /// Optimizer updates applied so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub(crate) fn bump_step(&mut self) {
        self.step += 1;
    }

    /// Batch-norm running statistics: `(name, values)`.
    pub fn named_buffers(&self) -> Vec<(String, &[T])> {
        vec![
            ("object_encoder.norm.running_mean".into(), &self.object_stats.mean[..]),
            ("object_encoder.norm.running_var".into(), &self.object_stats.var[..]),
            ("action_encoder.norm.running_mean".into(), &self.action_stats.mean[..]),
            ("action_encoder.norm.running_var".into(), &self.action_stats.var[..]),
        ]
    }

    pub(crate) fn buffers_mut(&mut self) -> Vec<&mut Vec<T>> {
        vec![
            &mut self.object_stats.mean,
            &mut self.object_stats.var,
            &mut self.action_stats.mean,
            &mut self.action_stats.var,
        ]
    }

    pub fn object_stats(&self) -> &RunningStats<T> {
        &self.object_stats
    }

    pub fn action_stats(&self) -> &RunningStats<T> {
        &self.action_stats
    }

    pub fn object_stats_mut(&mut self) -> &mut RunningStats<T> {
        &mut self.object_stats
    }

    pub fn action_stats_mut(&mut self) -> &mut RunningStats<T> {
        &mut self.action_stats
    }

    fn require_head(&self, expected: HeadMode) -> Result<()> {
        if self.head == expected {
            Ok(())
        } else {
            Err(Error::HeadMode {
                expected: expected.name(),
                actual: self.head.name(),
            })
        }
    }

    // ---- forward -------------------------------------------------------

    fn encoder_forward(
        stack: &Stack<T>,
        stats: &RunningStats<T>,
        x: &Matrix<T>,
        mode: Mode,
        masks: Option<&[Matrix<T>]>,
    ) -> StackTape<T> {
        let n = x.rows();
        let d = x.cols();
        let eps = T::of(NORM_EPS);
        let (mean, var) = match mode {
            Mode::Train => {
                let inv_n = T::one() / T::of(n as f64);
                let mean: Vec<T> = x.sum_rows().into_iter().map(|s| s * inv_n).collect();
                let mut var = vec![T::zero(); d];
                for i in 0..n {
                    for (j, &v) in x.row(i).iter().enumerate() {
                        let c = v - mean[j];
                        var[j] += c * c;
                    }
                }
                var.iter_mut().for_each(|v| *v *= inv_n);
                (mean, var)
            }
            Mode::Eval => (stats.mean.clone(), stats.var.clone()),
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = x.clone();
        for i in 0..n {
            for (j, v) in xhat.row_mut(i).iter_mut().enumerate() {
                *v = (*v - mean[j]) * inv_std[j];
            }
        }
        let normed = affine_columns(&xhat, &stack.norm);
        let mut tape = Self::stack_body(stack, xhat, inv_std, normed, masks, true);
        tape.batch_mean = mean;
        tape.batch_var = var;
        tape
    }

    fn decoder_forward(&self, code: &Matrix<T>, masks: Option<&[Matrix<T>]>) -> StackTape<T> {
        let input = if self.config.straight_through {
            code.map(|v| if v > T::zero() { T::one() } else { T::zero() })
        } else {
            code.clone()
        };
        let n = input.rows();
        let d = input.cols();
        let eps = T::of(NORM_EPS);
        let inv_d = T::one() / T::of(d as f64);
        let mut xhat = input;
        let mut inv_std = Vec::with_capacity(n);
        for i in 0..n {
            let row = xhat.row_mut(i);
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let is = T::one() / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * is);
            inv_std.push(is);
        }
        let normed = affine_columns(&xhat, &self.params.decoder.norm);
        Self::stack_body(&self.params.decoder, xhat, inv_std, normed, masks, false)
    }

    fn stack_body(
        stack: &Stack<T>,
        xhat: Matrix<T>,
        inv_std: Vec<T>,
        normed: Matrix<T>,
        masks: Option<&[Matrix<T>]>,
        tanh_output: bool,
    ) -> StackTape<T> {
        let hidden = stack.hidden();
        let mut inputs = Vec::with_capacity(hidden + 1);
        let mut pre = Vec::with_capacity(hidden);
        inputs.push(normed);
        for l in 0..hidden {
            let a = stack.layers[l].forward(&inputs[l]);
            let mut h = a.map(|v| v.max(T::zero()));
            if let Some(m) = masks {
                h.hadamard_assign(&m[l]);
            }
            pre.push(a);
            inputs.push(h);
        }
        let mut output = stack.layers[hidden].forward(&inputs[hidden]);
        if tanh_output {
            output = output.map(|v| v.tanh());
        }
        StackTape {
            xhat,
            inv_std,
            inputs,
            pre,
            output,
            batch_mean: Vec::new(),
            batch_var: Vec::new(),
        }
    }

    fn forward_tape(
        &self,
        objects: &Matrix<T>,
        actions: &Matrix<T>,
        mode: Mode,
        masks: Option<&DropoutMasks<T>>,
    ) -> Tape<T> {
        let object = Self::encoder_forward(
            &self.params.object_encoder,
            &self.object_stats,
            objects,
            mode,
            masks.map(|m| &m.object[..]),
        );
        let action = Self::encoder_forward(
            &self.params.action_encoder,
            &self.action_stats,
            actions,
            mode,
            masks.map(|m| &m.action[..]),
        );
        let code = object.output.hconcat(&action.output);
        let decoder = self.decoder_forward(&code, masks.map(|m| &m.decoder[..]));
        Tape {
            object,
            action,
            decoder,
            code,
        }
    }

    /// Raw decoder outputs for a batch.
    pub fn forward(
        &self,
        objects: &Matrix<T>,
        actions: &Matrix<T>,
        mode: Mode,
        masks: Option<&DropoutMasks<T>>,
    ) -> Matrix<T> {
        self.forward_tape(objects, actions, mode, masks).decoder.output
    }

    /// Object embeddings, `rows × j`.
    pub fn encode_objects(&self, objects: &Matrix<T>, mode: Mode) -> Matrix<T> {
        Self::encoder_forward(&self.params.object_encoder, &self.object_stats, objects, mode, None).output
    }

    /// Action embeddings, `rows × k`.
    pub fn encode_actions(&self, actions: &Matrix<T>, mode: Mode) -> Matrix<T> {
        Self::encoder_forward(&self.params.action_encoder, &self.action_stats, actions, mode, None).output
    }

    /// Decoder outputs from embedding rows `[z_o, z_a]`, eval mode.
    pub fn decode_codes(&self, code: &Matrix<T>) -> Matrix<T> {
        self.decoder_forward(code, None).output
    }

    // ---- single-sample convenience API (eval mode) --------------------

    pub fn encode_object(&self, features: &[f64; 4]) -> Result<Embedding> {
        check_finite(features)?;
        let out = self.encode_objects(&Matrix::from_rows(&[features]), Mode::Eval);
        Ok(Embedding::from_scalars(out.row(0)))
    }

    pub fn encode_action(&self, action: &Action) -> Result<Embedding> {
        let a = action.to_array();
        check_finite(&a)?;
        let out = self.encode_actions(&Matrix::from_rows(&[a]), Mode::Eval);
        Ok(Embedding::from_scalars(out.row(0)))
    }

    /// Gaussian effect prediction from a pair of embeddings.
    pub fn decode(&self, object: &Embedding, action: &Embedding) -> Result<EffectDist> {
        self.require_head(HeadMode::Distribution)?;
        self.check_code_widths(object, action)?;
        let code = Matrix::from_rows(&[[object.values.clone(), action.values.clone()].concat()]);
        Ok(dist_from_row(self.decode_codes(&code).row(0)))
    }

    /// Point-head prediction from a pair of embeddings.
    pub fn decode_point(&self, object: &Embedding, action: &Embedding) -> Result<Effect> {
        self.require_head(HeadMode::Point)?;
        self.check_code_widths(object, action)?;
        let code = Matrix::from_rows(&[[object.values.clone(), action.values.clone()].concat()]);
        Ok(effect_from_row(self.decode_codes(&code).row(0)))
    }

    fn check_code_widths(&self, object: &Embedding, action: &Embedding) -> Result<()> {
        if object.values.len() != self.config.object_code_bits
            || action.values.len() != self.config.action_code_bits
        {
            return Err(Error::Input(format!(
                "embedding widths {}+{} do not match model {}+{}",
                object.values.len(),
                action.values.len(),
                self.config.object_code_bits,
                self.config.action_code_bits
            )));
        }
        Ok(())
    }

    /// Predicted effect distributions for paired rows.
    pub fn predict_dists(&self, objects: &[[f64; 4]], actions: &[[f64; 12]]) -> Result<Vec<EffectDist>> {
        self.require_head(HeadMode::Distribution)?;
        let out = self.eval_rows(objects, actions)?;
        Ok((0..out.rows()).map(|i| dist_from_row(out.row(i))).collect())
    }

    /// The model's effect estimate: `μ` for the distribution head, the raw
    /// output for the point head.
    pub fn predict_means(&self, objects: &[[f64; 4]], actions: &[[f64; 12]]) -> Result<Vec<Effect>> {
        let out = self.eval_rows(objects, actions)?;
        Ok((0..out.rows()).map(|i| effect_from_row(out.row(i))).collect())
    }

    /// Direct effect prediction of a point-head model.
    pub fn point_head_variant(&self, object: &[f64; 4], action: &Action) -> Result<Effect> {
        self.require_head(HeadMode::Point)?;
        Ok(self.predict_means(&[*object], &[action.to_array()])?[0])
    }

    /// Effect distributions for many candidate actions on one object. The
    /// object is encoded once and broadcast.
    pub fn score_candidates(&self, object: &[f64; 4], actions: &[[f64; 12]]) -> Result<Vec<EffectDist>> {
        self.require_head(HeadMode::Distribution)?;
        check_finite(object)?;
        if actions.is_empty() {
            return Ok(Vec::new());
        }
        for a in actions {
            check_finite(a)?;
        }
        let z_o = self.encode_objects(&Matrix::from_rows(&[object]), Mode::Eval);
        let z_a = self.encode_actions(&Matrix::from_rows(actions), Mode::Eval);
        let code = z_o.repeat_row(0, actions.len()).hconcat(&z_a);
        let out = self.decode_codes(&code);
        Ok((0..out.rows()).map(|i| dist_from_row(out.row(i))).collect())
    }

    fn eval_rows(&self, objects: &[[f64; 4]], actions: &[[f64; 12]]) -> Result<Matrix<T>> {
        if objects.len() != actions.len() {
            return Err(Error::Input("object and action counts differ".into()));
        }
        for o in objects {
            check_finite(o)?;
        }
        for a in actions {
            check_finite(a)?;
        }
        if objects.is_empty() {
            return Ok(Matrix::zeros(0, self.head.outputs()));
        }
        Ok(self.forward(&Matrix::from_rows(objects), &Matrix::from_rows(actions), Mode::Eval, None))
    }

    // ---- losses and gradients -----------------------------------------

    /// Train-mode loss of one batch without gradients.
    pub fn batch_loss(&self, batch: &Batch<T>, masks: Option<&DropoutMasks<T>>) -> LossParts {
        let tape = self.forward_tape(&batch.objects, &batch.actions, Mode::Train, masks);
        self.head_and_contrastive(&tape, &batch.effects).0
    }

    fn head_and_contrastive(&self, tape: &Tape<T>, effects: &Matrix<T>) -> (LossParts, Matrix<T>, Matrix<T>) {
        let (head, d_out) = match self.head {
            HeadMode::Distribution => nll_batch(&tape.decoder.output, effects),
            HeadMode::Point => mse_batch(&tape.decoder.output, effects),
        };
        let (ntxent, d_code) = nt_xent_batch(&tape.code, self.config.temperature);
        let lambda = self.config.loss_coefficient;
        let head = head.to_f64_lossy();
        let ntxent = ntxent.to_f64_lossy();
        (
            LossParts {
                head,
                ntxent,
                total: lambda * (head + ntxent),
            },
            d_out,
            d_code,
        )
    }

    /// Train-mode loss and exact gradients of `λ (head + NT-Xent)` with
    /// respect to every trainable tensor.
    pub fn loss_and_gradients(
        &self,
        batch: &Batch<T>,
        masks: Option<&DropoutMasks<T>>,
    ) -> (LossParts, Params<T>, BatchStats<T>) {
        let tape = self.forward_tape(&batch.objects, &batch.actions, Mode::Train, masks);
        let (parts, grads, _) = self.backward(&tape, &batch.effects, masks);
        let stats = BatchStats {
            rows: batch.rows(),
            object: (tape.object.batch_mean, tape.object.batch_var),
            action: (tape.action.batch_mean, tape.action.batch_var),
        };
        (parts, grads, stats)
    }

    /// Train-mode gradients of the loss with respect to the raw object and
    /// action inputs (through batch statistics).
    pub fn loss_input_gradients(
        &self,
        batch: &Batch<T>,
        masks: Option<&DropoutMasks<T>>,
    ) -> (Matrix<T>, Matrix<T>) {
        let tape = self.forward_tape(&batch.objects, &batch.actions, Mode::Train, masks);
        self.backward(&tape, &batch.effects, masks).2
    }

    fn backward(
        &self,
        tape: &Tape<T>,
        effects: &Matrix<T>,
        masks: Option<&DropoutMasks<T>>,
    ) -> (LossParts, Params<T>, (Matrix<T>, Matrix<T>)) {
        let (parts, mut d_out, mut d_code) = self.head_and_contrastive(tape, effects);
        let lambda = T::of(self.config.loss_coefficient);
        d_out.data_mut().iter_mut().for_each(|v| *v *= lambda);
        d_code.data_mut().iter_mut().for_each(|v| *v *= lambda);

        let mut grads = self.params.zeros_like();
        let d_normed = backward_stack(
            &self.params.decoder,
            &tape.decoder,
            d_out,
            masks.map(|m| &m.decoder[..]),
            false,
            &mut grads.decoder,
        );
        accumulate_norm_grads(&tape.decoder, &d_normed, &mut grads.decoder.norm);
        // Straight-through: the binarization passes gradients unchanged.
        let d_decoder_input = layer_norm_backward(&tape.decoder, &self.params.decoder.norm, d_normed);
        for (a, &b) in d_code.data_mut().iter_mut().zip(d_decoder_input.data()) {
            *a += b;
        }
        let j = self.config.object_code_bits;
        let k = self.config.action_code_bits;

        let d_norm = backward_stack(
            &self.params.object_encoder,
            &tape.object,
            d_code.columns(0, j),
            masks.map(|m| &m.object[..]),
            true,
            &mut grads.object_encoder,
        );
        accumulate_norm_grads(&tape.object, &d_norm, &mut grads.object_encoder.norm);
        let d_objects = batch_norm_input_backward(&tape.object, &self.params.object_encoder.norm, &d_norm);

        let d_norm = backward_stack(
            &self.params.action_encoder,
            &tape.action,
            d_code.columns(j, j + k),
            masks.map(|m| &m.action[..]),
            true,
            &mut grads.action_encoder,
        );
        accumulate_norm_grads(&tape.action, &d_norm, &mut grads.action_encoder.norm);
        let d_actions = batch_norm_input_backward(&tape.action, &self.params.action_encoder.norm, &d_norm);

        (parts, grads, (d_objects, d_actions))
    }

    /// Gradient of `Σ_rows Σ_k d_embedding[r,k] · φ_a(a_r)_k` with respect
    /// to the action inputs, in eval mode. Parameters are untouched.
    pub fn action_input_gradient(&self, actions: &Matrix<T>, d_embedding: &Matrix<T>) -> (Matrix<T>, Matrix<T>) {
        let tape = Self::encoder_forward(
            &self.params.action_encoder,
            &self.action_stats,
            actions,
            Mode::Eval,
            None,
        );
        let mut scratch = self.params.action_encoder.zeros_like();
        let d_norm = backward_stack(
            &self.params.action_encoder,
            &tape,
            d_embedding.clone(),
            None,
            true,
            &mut scratch,
        );
        let mut dx = d_norm;
        for i in 0..dx.rows() {
            for (j, v) in dx.row_mut(i).iter_mut().enumerate() {
                *v *= self.params.action_encoder.norm.gamma[j] * tape.inv_std[j];
            }
        }
        (tape.output, dx)
    }

    /// Fold one batch's statistics into the running estimates.
    pub fn update_running_stats(&mut self, stats: &BatchStats<T>) {
        let m = T::of(self.config.batch_norm_momentum);
        let correction = if stats.rows > 1 {
            T::of(stats.rows as f64 / (stats.rows as f64 - 1.0))
        } else {
            T::one()
        };
        for (running, batch) in [
            (&mut self.object_stats, &stats.object),
            (&mut self.action_stats, &stats.action),
        ] {
            for (r, &b) in running.mean.iter_mut().zip(&batch.0) {
                *r = (T::one() - m) * *r + m * b;
            }
            for (r, &b) in running.var.iter_mut().zip(&batch.1) {
                *r = (T::one() - m) * *r + m * b * correction;
            }
        }
    }
}

fn affine_columns<T: Scalar>(xhat: &Matrix<T>, norm: &Norm<T>) -> Matrix<T> {
    let mut y = xhat.clone();
    for i in 0..y.rows() {
        for (j, v) in y.row_mut(i).iter_mut().enumerate() {
            *v = *v * norm.gamma[j] + norm.beta[j];
        }
    }
    y
}

/// Backward through the linear/ReLU/dropout layers of a stack. Returns the
/// gradient with respect to the normalization output.
fn backward_stack<T: Scalar>(
    stack: &Stack<T>,
    tape: &StackTape<T>,
    d_output: Matrix<T>,
    masks: Option<&[Matrix<T>]>,
    tanh_output: bool,
    grads: &mut Stack<T>,
) -> Matrix<T> {
    let hidden = stack.hidden();
    let mut d = d_output;
    if tanh_output {
        for (g, &y) in d.data_mut().iter_mut().zip(tape.output.data()) {
            *g *= T::one() - y * y;
        }
    }
    d = stack.layers[hidden].backward(&tape.inputs[hidden], &d, &mut grads.layers[hidden]);
    for l in (0..hidden).rev() {
        if let Some(m) = masks {
            d.hadamard_assign(&m[l]);
        }
        for (g, &a) in d.data_mut().iter_mut().zip(tape.pre[l].data()) {
            if a <= T::zero() {
                *g = T::zero();
            }
        }
        d = stack.layers[l].backward(&tape.inputs[l], &d, &mut grads.layers[l]);
    }
    d
}

fn accumulate_norm_grads<T: Scalar>(tape: &StackTape<T>, d_normed: &Matrix<T>, grads: &mut Norm<T>) {
    for i in 0..d_normed.rows() {
        for (j, &g) in d_normed.row(i).iter().enumerate() {
            grads.gamma[j] += g * tape.xhat.get(i, j);
            grads.beta[j] += g;
        }
    }
}

/// Layer-norm input gradient (per row).
fn layer_norm_backward<T: Scalar>(tape: &StackTape<T>, norm: &Norm<T>, d_normed: Matrix<T>) -> Matrix<T> {
    let n = d_normed.rows();
    let d = d_normed.cols();
    let dd = T::of(d as f64);
    let mut dx = Matrix::zeros(n, d);
    for i in 0..n {
        let xh = tape.xhat.row(i);
        let dxhat: Vec<T> = d_normed.row(i).iter().zip(&norm.gamma).map(|(&g, &w)| g * w).collect();
        let s1: T = dxhat.iter().copied().sum();
        let s2: T = dxhat.iter().zip(xh).map(|(&a, &b)| a * b).sum();
        let scale = tape.inv_std[i] / dd;
        for (k, o) in dx.row_mut(i).iter_mut().enumerate() {
            *o = scale * (dd * dxhat[k] - s1 - xh[k] * s2);
        }
    }
    dx
}

/// Batch-norm backward with batch statistics (train mode).
fn batch_norm_input_backward<T: Scalar>(tape: &StackTape<T>, norm: &Norm<T>, d_normed: &Matrix<T>) -> Matrix<T> {
    let n = d_normed.rows();
    let d = d_normed.cols();
    let nn = T::of(n as f64);
    let mut s1 = vec![T::zero(); d];
    let mut s2 = vec![T::zero(); d];
    for i in 0..n {
        for j in 0..d {
            let dxhat = d_normed.get(i, j) * norm.gamma[j];
            s1[j] += dxhat;
            s2[j] += dxhat * tape.xhat.get(i, j);
        }
    }
    let mut dx = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let dxhat = d_normed.get(i, j) * norm.gamma[j];
            dx.set(
                i,
                j,
                tape.inv_std[j] / nn * (nn * dxhat - s1[j] - tape.xhat.get(i, j) * s2[j]),
            );
        }
    }
    dx
}

pub(crate) fn dist_from_row<T: Scalar>(row: &[T]) -> EffectDist {
    let clamp = |v: f64| v.clamp(LOG_VAR_RANGE.0, LOG_VAR_RANGE.1);
    EffectDist {
        mean: [row[0].to_f64_lossy(), row[1].to_f64_lossy(), row[2].to_f64_lossy()],
        log_var: [
            clamp(row[3].to_f64_lossy()),
            clamp(row[4].to_f64_lossy()),
            clamp(row[5].to_f64_lossy()),
        ],
    }
}

fn effect_from_row<T: Scalar>(row: &[T]) -> Effect {
    Effect::new(row[0].to_f64_lossy(), row[1].to_f64_lossy(), row[2].to_f64_lossy())
}

fn check_finite(values: &[f64]) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Input("non-finite model input".into()))
    }
}
