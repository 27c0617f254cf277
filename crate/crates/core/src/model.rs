//! Attentive-fusion classifier over image and text embeddings.
//!
//! Layout of one forward pass, per batch row:
//!
//! ```text
//! F_I = adapter_i(x_img)            F_T = adapter_t(x_txt)
//! f_I = Norm(Dropout(F_I))          f_T = Norm(Dropout(F_T))
//! D_i = Dense_i(f_I)                D_t = Dense_t(f_T)         (scalars)
//! [s_i, s_t] = softmax([D_i, D_t]·W_f + b_f)
//! S_i = 1 + s_i                     S_t = 1 + s_t
//! F_MM = tanh([S_i·f_I ‖ S_t·f_T]·W_r + b_r)
//! f_MM = Norm(Dropout(F_MM))
//! logits = Linear(GeLU(Linear(GeLU(Linear(f_MM)))))
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Result, StiltError};
use crate::ops::{
    dropout, softmax_row, softmax_row_backward, tanh_act, tanh_backward, DenseCache, DenseStack,
    DropoutMask, Linear, Mode, NormCache, NormState,
};
use crate::rng::DeterministicRng;
use crate::scalar::Scalar;
use crate::tensor::{Matrix, Param, ParamSet};

pub const NUM_CLASSES: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width `D` of both modalities.
    pub dim: usize,
    /// Width `D_f` of the fused representation.
    pub fused_dim: usize,
    /// Hidden widths of each modality's attention stack; a final width-1
    /// layer is always appended.
    pub attention_hidden: Vec<usize>,
    /// Hidden widths of the classification head; the 3-way output layer is
    /// always appended.
    pub head_hidden: Vec<usize>,
    pub norm_momentum: f64,
    pub norm_eps: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 512,
            fused_dim: 512,
            attention_hidden: vec![256, 64, 8],
            head_hidden: vec![1024, 256],
            norm_momentum: 0.1,
            norm_eps: 1e-5,
        }
    }
}

impl ModelConfig {
    pub fn with_dims(dim: usize, fused_dim: usize) -> Self {
        ModelConfig {
            dim,
            fused_dim,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.fused_dim == 0 {
            return Err(StiltError::Config(format!(
                "model dims must be >= 1 (dim={}, fused_dim={})",
                self.dim, self.fused_dim
            )));
        }
        if self.attention_hidden.contains(&0) || self.head_hidden.contains(&0) {
            return Err(StiltError::Config("hidden layer widths must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.norm_momentum) || !(self.norm_eps > 0.0) {
            return Err(StiltError::Config(format!(
                "invalid norm settings (momentum={}, eps={})",
                self.norm_momentum, self.norm_eps
            )));
        }
        Ok(())
    }

    fn attention_widths(&self) -> Vec<usize> {
        let mut w = self.attention_hidden.clone();
        w.push(1);
        w
    }

    fn head_widths(&self) -> Vec<usize> {
        let mut w = self.head_hidden.clone();
        w.push(NUM_CLASSES);
        w
    }
}

/// Which modality adapters are frozen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct FreezeSpec {
    pub freeze_image_adapter: bool,
    pub freeze_text_adapter: bool,
}

/// All trainable weights plus normalisation state.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    config: ModelConfig,
    pub image_adapter: Linear<T>,
    pub text_adapter: Linear<T>,
    pub norm_image: NormState<T>,
    pub norm_text: NormState<T>,
    pub attn_image: DenseStack<T>,
    pub attn_text: DenseStack<T>,
    /// `W_f` (2×2) and `b_f`.
    pub fusion_gate: Linear<T>,
    /// `W_r` (2D×D_f) and `b_r`.
    pub fusion_proj: Linear<T>,
    pub norm_fused: NormState<T>,
    /// `W_x`, `W_mm`, `W_l` and their biases.
    pub head: DenseStack<T>,
    version: u64,
}

/// A batch of resolved (blank-substituted) inputs, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub image: Matrix<T>,
    pub text: Matrix<T>,
}

impl<T: Scalar> Batch<T> {
    pub fn new(image: Matrix<T>, text: Matrix<T>) -> Result<Self> {
        if image.shape() != text.shape() {
            return Err(StiltError::dim("Batch::new", image.shape_str(), text.shape_str()));
        }
        Ok(Batch { image, text })
    }

    pub fn len(&self) -> usize {
        self.image.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Every intermediate activation of one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T> {
    version: u64,
    mode: Mode,
    pub input_image: Matrix<T>,
    pub input_text: Matrix<T>,
    /// `F_I`, `F_T`.
    pub image_encoded: Matrix<T>,
    pub text_encoded: Matrix<T>,
    drop_image: DropoutMask<T>,
    drop_text: DropoutMask<T>,
    norm_image: NormCache<T>,
    norm_text: NormCache<T>,
    /// `f_I`, `f_T`.
    pub image_features: Matrix<T>,
    pub text_features: Matrix<T>,
    attn_image: DenseCache<T>,
    attn_text: DenseCache<T>,
    /// `[D_i, D_t]` per row.
    pub attention_logits: Matrix<T>,
    /// `[s_i, s_t]` per row.
    pub scores: Matrix<T>,
    /// `[S_i, S_t] = 1 + [s_i, s_t]` per row.
    pub shifted_scores: Matrix<T>,
    concat: Matrix<T>,
    /// `F_MM`.
    pub fused_raw: Matrix<T>,
    drop_fused: DropoutMask<T>,
    norm_fused: NormCache<T>,
    /// `f_MM`.
    pub fused: Matrix<T>,
    head: DenseCache<T>,
    /// Output of the last hidden head layer after GeLU (`X_MM`).
    pub head_hidden: Matrix<T>,
    pub logits: Matrix<T>,
}

impl<T> ForwardTrace<T> {
    pub fn mode(&self) -> Mode {
        self.mode
    }
}

impl<T: Scalar> Model<T> {
    /// Random fusion/head weights, identity adapters, neutral norms.
    pub fn init(config: &ModelConfig, rng: &mut DeterministicRng) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let norm = |n| NormState::new(n, config.norm_momentum, config.norm_eps);
        let attn_image = DenseStack::init(d, &config.attention_widths(), rng);
        let attn_text = DenseStack::init(d, &config.attention_widths(), rng);
        let fusion_gate = Linear::init(2, 2, rng);
        let fusion_proj = Linear::init(2 * d, config.fused_dim, rng);
        let head = DenseStack::init(config.fused_dim, &config.head_widths(), rng);
        Ok(Model {
            config: config.clone(),
            image_adapter: Linear::identity(d),
            text_adapter: Linear::identity(d),
            norm_image: norm(d),
            norm_text: norm(d),
            attn_image,
            attn_text,
            fusion_gate,
            fusion_proj,
            norm_fused: norm(config.fused_dim),
            head,
            version: 0,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Incremented whenever parameter values change.
    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn set_freeze(&mut self, spec: FreezeSpec) {
        self.image_adapter.set_trainable(!spec.freeze_image_adapter);
        self.text_adapter.set_trainable(!spec.freeze_text_adapter);
    }

    pub fn freeze_state(&self) -> FreezeSpec {
        FreezeSpec {
            freeze_image_adapter: !self.image_adapter.weight.trainable(),
            freeze_text_adapter: !self.text_adapter.weight.trainable(),
        }
    }

    pub fn forward(
        &self,
        batch: &Batch<T>,
        mode: Mode,
        dropout_rate: f64,
        rng: &mut DeterministicRng,
    ) -> Result<ForwardTrace<T>> {
        let d = self.config.dim;
        if batch.image.cols() != d || batch.text.cols() != d {
            return Err(StiltError::dim(
                "forward",
                format!("image {} / text {}", batch.image.shape_str(), batch.text.shape_str()),
                format!("D={d}"),
            ));
        }
        let b = batch.len();

        let image_encoded = self.image_adapter.forward(&batch.image)?;
        let text_encoded = self.text_adapter.forward(&batch.text)?;
        let (img_drop, drop_image) = dropout(&image_encoded, dropout_rate, mode, rng)?;
        let (txt_drop, drop_text) = dropout(&text_encoded, dropout_rate, mode, rng)?;
        let (image_features, norm_image) = self.norm_image.forward(&img_drop, mode)?;
        let (text_features, norm_text) = self.norm_text.forward(&txt_drop, mode)?;

        let (d_i, attn_image) = self.attn_image.forward(&image_features)?;
        let (d_t, attn_text) = self.attn_text.forward(&text_features)?;
        let attention_logits = d_i.hconcat(&d_t)?;
        let scores = softmax_row(&self.fusion_gate.forward(&attention_logits)?);
        let shifted_scores = scores.map(|s| T::one() + s);

        let mut weighted_image = image_features.clone();
        let mut weighted_text = text_features.clone();
        for r in 0..b {
            let (si, st) = (shifted_scores.get(r, 0), shifted_scores.get(r, 1));
            weighted_image.row_mut(r).iter_mut().for_each(|v| *v *= si);
            weighted_text.row_mut(r).iter_mut().for_each(|v| *v *= st);
        }
        let concat = weighted_image.hconcat(&weighted_text)?;
        let fused_raw = tanh_act(&self.fusion_proj.forward(&concat)?);
        let (fused_drop, drop_fused) = dropout(&fused_raw, dropout_rate, mode, rng)?;
        let (fused, norm_fused) = self.norm_fused.forward(&fused_drop, mode)?;

        let (logits, head) = self.head.forward(&fused)?;
        let head_hidden = head.last_input().clone();

        for r in 0..b {
            debug_assert!((scores.get(r, 0) + scores.get(r, 1) - T::one()).abs() <= T::cst(1e-12));
        }
        if !logits.is_finite() {
            return Err(StiltError::NonFinite("forward logits".into()));
        }

        Ok(ForwardTrace {
            version: self.version,
            mode,
            input_image: batch.image.clone(),
            input_text: batch.text.clone(),
            image_encoded,
            text_encoded,
            drop_image,
            drop_text,
            norm_image,
            norm_text,
            image_features,
            text_features,
            attn_image,
            attn_text,
            attention_logits,
            scores,
            shifted_scores,
            concat,
            fused_raw,
            drop_fused,
            norm_fused,
            fused,
            head,
            head_hidden,
            logits,
        })
    }

    /// Eval-mode logits; never touches a random stream.
    pub fn predict_logits(&self, batch: &Batch<T>) -> Result<Matrix<T>> {
        let mut unused = DeterministicRng::new(0);
        Ok(self.forward(batch, Mode::Eval, 0.0, &mut unused)?.logits)
    }

    /// Accumulates exact gradients of a loss with upstream gradient
    /// `dlogits` into every trainable tensor.
    pub fn backward(&mut self, trace: &ForwardTrace<T>, dlogits: &Matrix<T>) -> Result<()> {
        if trace.version != self.version {
            return Err(StiltError::StaleTrace {
                trace: trace.version,
                model: self.version,
            });
        }
        if trace.mode != Mode::Train {
            return Err(StiltError::Contract(
                "backward needs a train-mode forward trace".into(),
            ));
        }
        if dlogits.shape() != trace.logits.shape() {
            return Err(StiltError::dim(
                "backward",
                dlogits.shape_str(),
                trace.logits.shape_str(),
            ));
        }
        let d = self.config.dim;
        let b = dlogits.rows();

        let d_fused = self.head.backward(&trace.head, dlogits)?;
        let d_fused_drop = self.norm_fused.backward(&trace.norm_fused, &d_fused)?;
        let d_fused_raw = trace.drop_fused.backward(&d_fused_drop)?;
        let d_proj = tanh_backward(&trace.fused_raw, &d_fused_raw)?;
        let d_concat = self.fusion_proj.backward(&trace.concat, &d_proj)?;
        let (d_wimg, d_wtxt) = d_concat.hsplit(d)?;

        // concat = [S_i·f_I ‖ S_t·f_T]
        let mut d_shifted = Matrix::zeros(b, 2);
        let mut d_img_feat = d_wimg.clone();
        let mut d_txt_feat = d_wtxt.clone();
        for r in 0..b {
            let gi: T = d_wimg
                .row(r)
                .iter()
                .zip(trace.image_features.row(r))
                .map(|(&g, &f)| g * f)
                .sum();
            let gt: T = d_wtxt
                .row(r)
                .iter()
                .zip(trace.text_features.row(r))
                .map(|(&g, &f)| g * f)
                .sum();
            d_shifted.set(r, 0, gi);
            d_shifted.set(r, 1, gt);
            let (si, st) = (trace.shifted_scores.get(r, 0), trace.shifted_scores.get(r, 1));
            d_img_feat.row_mut(r).iter_mut().for_each(|v| *v *= si);
            d_txt_feat.row_mut(r).iter_mut().for_each(|v| *v *= st);
        }
        let d_gate_logits = softmax_row_backward(&trace.scores, &d_shifted)?;
        let d_attention = self
            .fusion_gate
            .backward(&trace.attention_logits, &d_gate_logits)?;
        let (d_di, d_dt) = d_attention.hsplit(1)?;
        d_img_feat.add_assign(&self.attn_image.backward(&trace.attn_image, &d_di)?)?;
        d_txt_feat.add_assign(&self.attn_text.backward(&trace.attn_text, &d_dt)?)?;

        let d_img_drop = self.norm_image.backward(&trace.norm_image, &d_img_feat)?;
        let d_txt_drop = self.norm_text.backward(&trace.norm_text, &d_txt_feat)?;
        let d_img_enc = trace.drop_image.backward(&d_img_drop)?;
        let d_txt_enc = trace.drop_text.backward(&d_txt_drop)?;
        if self.image_adapter.weight.trainable() {
            self.image_adapter.backward(&trace.input_image, &d_img_enc)?;
        }
        if self.text_adapter.weight.trainable() {
            self.text_adapter.backward(&trace.input_text, &d_txt_enc)?;
        }
        Ok(())
    }

    /// Folds the batch statistics of a train-mode trace into the running
    /// normalisation statistics.
    pub fn commit_norm_stats(&mut self, trace: &ForwardTrace<T>) {
        self.norm_image.commit(&trace.norm_image);
        self.norm_text.commit(&trace.norm_text);
        self.norm_fused.commit(&trace.norm_fused);
    }

    /// Running statistics in checkpoint order.
    pub fn running_stats(&self) -> Vec<(String, &Matrix<T>)> {
        vec![
            ("norm_image.running_mean".into(), &self.norm_image.running_mean),
            ("norm_image.running_var".into(), &self.norm_image.running_var),
            ("norm_text.running_mean".into(), &self.norm_text.running_mean),
            ("norm_text.running_var".into(), &self.norm_text.running_var),
            ("norm_fused.running_mean".into(), &self.norm_fused.running_mean),
            ("norm_fused.running_var".into(), &self.norm_fused.running_var),
        ]
    }

    pub fn running_stats_mut(&mut self) -> Vec<(String, &mut Matrix<T>)> {
        vec![
            ("norm_image.running_mean".into(), &mut self.norm_image.running_mean),
            ("norm_image.running_var".into(), &mut self.norm_image.running_var),
            ("norm_text.running_mean".into(), &mut self.norm_text.running_mean),
            ("norm_text.running_var".into(), &mut self.norm_text.running_var),
            ("norm_fused.running_mean".into(), &mut self.norm_fused.running_mean),
            ("norm_fused.running_var".into(), &mut self.norm_fused.running_var),
        ]
    }

    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|(_, p)| p.value.as_slice().len()).sum()
    }
}

fn norm_params<'a, T>(prefix: &str, n: &'a NormState<T>) -> [(String, &'a Param<T>); 2] {
    [
        (format!("{prefix}.gamma"), &n.gamma),
        (format!("{prefix}.beta"), &n.beta),
    ]
}

fn norm_params_mut<'a, T>(prefix: &str, n: &'a mut NormState<T>) -> [(String, &'a mut Param<T>); 2] {
    [
        (format!("{prefix}.gamma"), &mut n.gamma),
        (format!("{prefix}.beta"), &mut n.beta),
    ]
}

impl<T: Scalar> ParamSet<T> for Model<T> {
    fn params(&self) -> Vec<(String, &Param<T>)> {
        let mut out = vec![
            ("image_adapter.weight".to_string(), &self.image_adapter.weight),
            ("image_adapter.bias".to_string(), &self.image_adapter.bias),
            ("text_adapter.weight".to_string(), &self.text_adapter.weight),
            ("text_adapter.bias".to_string(), &self.text_adapter.bias),
        ];
        out.extend(norm_params("norm_image", &self.norm_image));
        out.extend(norm_params("norm_text", &self.norm_text));
        out.extend(self.attn_image.params("attn_image"));
        out.extend(self.attn_text.params("attn_text"));
        out.push(("fusion_gate.weight".into(), &self.fusion_gate.weight));
        out.push(("fusion_gate.bias".into(), &self.fusion_gate.bias));
        out.push(("fusion_proj.weight".into(), &self.fusion_proj.weight));
        out.push(("fusion_proj.bias".into(), &self.fusion_proj.bias));
        out.extend(norm_params("norm_fused", &self.norm_fused));
        out.extend(self.head.params("head"));
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Param<T>)> {
        // Any caller holding mutable parameter access may change values.
        self.version += 1;
        let mut out = vec![
            ("image_adapter.weight".to_string(), &mut self.image_adapter.weight),
            ("image_adapter.bias".to_string(), &mut self.image_adapter.bias),
            ("text_adapter.weight".to_string(), &mut self.text_adapter.weight),
            ("text_adapter.bias".to_string(), &mut self.text_adapter.bias),
        ];
        out.extend(norm_params_mut("norm_image", &mut self.norm_image));
        out.extend(norm_params_mut("norm_text", &mut self.norm_text));
        out.extend(self.attn_image.params_mut("attn_image"));
        out.extend(self.attn_text.params_mut("attn_text"));
        out.push(("fusion_gate.weight".into(), &mut self.fusion_gate.weight));
        out.push(("fusion_gate.bias".into(), &mut self.fusion_gate.bias));
        out.push(("fusion_proj.weight".into(), &mut self.fusion_proj.weight));
        out.push(("fusion_proj.bias".into(), &mut self.fusion_proj.bias));
        out.extend(norm_params_mut("norm_fused", &mut self.norm_fused));
        out.extend(self.head.params_mut("head"));
        out
    }

    fn zero_grad(&mut self) {
        let version = self.version;
        for (_, p) in self.params_mut() {
            p.zero_grad();
        }
        self.version = version;
    }
}
