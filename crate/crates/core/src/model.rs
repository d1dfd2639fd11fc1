//! The full model: patch embedding, encoder, saliency, diagonal attention,
//! decoder and output head, plus an optional recognition head.

use mubert_tensor::{Graph, Real, Tensor, Var};

use crate::backbone::{decoder_forward, encoder_forward, project_output, AttentionConfig, BlockParams, EncoderOutput};
use crate::error::{Error, Result};
use crate::micro_attention::{contextual_features, dma, dma_with_poi, poi_scores_var, DmaOutput, DmaParams};
use crate::objectives::{agreement_loss, reconstruction_loss, total_loss, LossWeights};
use crate::params::{Bound, Init, Linear, ParamStore};
use crate::patch::{check_divisible, positional_table, EmbedParams};

/// Rescaling applied to the per-patch value weights before they scale
/// the values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum WeightNorm {
    /// Weights used as computed.
    None,
    /// Weights divided by their mean, so they average 1.
    Mean,
}

impl WeightNorm {
    pub fn as_str(self) -> &'static str {
        match self {
            WeightNorm::None => "none",
            WeightNorm::Mean => "mean",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(WeightNorm::None),
            "mean" => Ok(WeightNorm::Mean),
            _ => Err(Error::config(format!("unknown weight normalization {s:?} (none|mean)"))),
        }
    }
}

/// Reduction of the feature rows before the recognition classifier.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pooling {
    Mean,
    Sum,
    /// Values averaged with the normalized patch weights, `Σ wᵢvᵢ / Σ wᵢ`.
    Weighted,
}

impl Pooling {
    pub fn as_str(self) -> &'static str {
        match self {
            Pooling::Mean => "mean",
            Pooling::Sum => "sum",
            Pooling::Weighted => "weighted",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(Pooling::Mean),
            "sum" => Ok(Pooling::Sum),
            "weighted" => Ok(Pooling::Weighted),
            _ => Err(Error::config(format!("unknown pooling {s:?} (mean|sum|weighted)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub d: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub n_heads: usize,
    pub mlp_ratio: usize,
    pub attn_scale: bool,
    pub ln_eps: f64,
    pub contextual_token: bool,
    /// Multiply the diagonal weights by the saliency scores.
    pub use_poi: bool,
    pub weight_norm: WeightNorm,
    pub pooling: Pooling,
    /// Recognition classes; 0 means no classifier head.
    pub classes: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::smoke()
    }
}

impl ModelConfig {
    /// Desk-scale configuration: 64×64 grayscale, 8×8 patches.
    pub fn smoke() -> Self {
        Self {
            height: 64,
            width: 64,
            channels: 1,
            patch_size: 8,
            d: 64,
            enc_layers: 2,
            dec_layers: 2,
            n_heads: 4,
            mlp_ratio: 2,
            attn_scale: true,
            ln_eps: 1e-5,
            contextual_token: true,
            use_poi: true,
            weight_norm: WeightNorm::None,
            pooling: Pooling::Mean,
            classes: 0,
        }
    }

    /// Published configuration: 224×224 RGB, d = 512, four layers each side.
    pub fn published() -> Self {
        Self {
            height: 224,
            width: 224,
            channels: 3,
            patch_size: 8,
            d: 512,
            enc_layers: 4,
            dec_layers: 4,
            n_heads: 8,
            mlp_ratio: 4,
            ..Self::smoke()
        }
    }

    pub fn grid(&self) -> (usize, usize) {
        (self.height / self.patch_size, self.width / self.patch_size)
    }

    pub fn n_patches(&self) -> usize {
        let (h, w) = self.grid();
        h * w
    }

    pub fn patch_len(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn seq_len(&self) -> usize {
        self.n_patches() + usize::from(self.contextual_token)
    }

    pub fn attention(&self) -> AttentionConfig {
        AttentionConfig { n_heads: self.n_heads, scaled: self.attn_scale, ln_eps: self.ln_eps }
    }

    pub fn validate(&self) -> Result<()> {
        check_divisible(self.height, self.width, self.patch_size)?;
        if self.channels == 0 {
            return Err(Error::config("channels must be positive"));
        }
        if self.d == 0 || !self.d.is_multiple_of(2) {
            return Err(Error::config(format!("latent width {} must be positive and even", self.d)));
        }
        if self.n_heads == 0 || !self.d.is_multiple_of(self.n_heads) {
            return Err(Error::config(format!("{} heads do not divide width {}", self.n_heads, self.d)));
        }
        if self.enc_layers < 1 || self.dec_layers < 1 {
            return Err(Error::config("encoder and decoder need at least one layer each"));
        }
        if self.mlp_ratio < 1 {
            return Err(Error::config("mlp ratio must be at least 1"));
        }
        if self.use_poi && !self.contextual_token {
            return Err(Error::config("saliency scores need the contextual token"));
        }
        if self.classes == 1 {
            return Err(Error::config("a classifier needs at least 2 classes"));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(Error::config("layer-norm epsilon must be positive"));
        }
        Ok(())
    }
}

/// Model parameters and their layout.
#[derive(Clone, Debug)]
pub struct MuBert<T> {
    pub config: ModelConfig,
    pub store: ParamStore<T>,
    pub embed: EmbedParams,
    pub encoder: Vec<BlockParams>,
    pub dma: DmaParams,
    pub decoder: Vec<BlockParams>,
    pub head: Linear,
    pub classifier: Option<Linear>,
    positions: Tensor<T>,
}

/// Inputs for one pretraining sample, each a `[N_p × ps²C]` patch matrix.
#[derive(Clone, Debug)]
pub struct PretrainInput<T> {
    /// Earlier frame after swapping.
    pub swapped: Tensor<T>,
    /// Later frame.
    pub later: Tensor<T>,
    /// Crop of the later frame, resized to full size.
    pub crop: Option<Tensor<T>>,
    /// Earlier frame, the reconstruction target.
    pub target: Tensor<T>,
}

#[derive(Debug, Clone, Copy)]
pub struct PairFeatures {
    pub dma: DmaOutput,
    /// Saliency from the later frame's contextual token.
    pub saliency: Option<Var>,
    /// Weights that actually scaled the values.
    pub weights: Var,
    /// Later-frame encoder latent, including the contextual-token row.
    pub later_latent: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct PretrainOutput {
    pub loss: Var,
    pub reconstruction_loss: Var,
    pub agreement_loss: Option<Var>,
    /// `[N_p × ps²C]` reconstruction.
    pub reconstruction: Var,
    pub features: PairFeatures,
}

pub const CLASSIFIER_PREFIX: &str = "mer.";

impl<T: Real> MuBert<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let d = config.d;
        let proj = Linear::new(&mut store, &mut init, "embed.proj", config.patch_len(), d, true);
        let contextual_token = config
            .contextual_token
            .then(|| store.add("embed.contextual_token", init.normal(vec![d], 0.02), false));
        let embed = EmbedParams { proj, contextual_token };
        let encoder = (0..config.enc_layers)
            .map(|i| BlockParams::new(&mut store, &mut init, &format!("encoder.{i}"), d, config.mlp_ratio))
            .collect();
        let dma = DmaParams::new(&mut store, &mut init, "dma", d);
        let decoder = (0..config.dec_layers)
            .map(|i| BlockParams::new(&mut store, &mut init, &format!("decoder.{i}"), d, config.mlp_ratio))
            .collect();
        let head = Linear::new(&mut store, &mut init, "decoder.head", d, config.patch_len(), true);
        let classifier = (config.classes >= 2)
            .then(|| Linear::new(&mut store, &mut init, "mer.classifier", d, config.classes, true));
        let positions = positional_table(config.seq_len(), d)?;
        Ok(Self { config, store, embed, encoder, dma, decoder, head, classifier, positions })
    }

    /// Adds (or replaces) a freshly initialized classifier for `classes`.
    pub fn with_classifier(mut self, classes: usize, seed: u64) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config("a classifier needs at least 2 classes"));
        }
        if self.classifier.is_some() {
            return Err(Error::usage("model already has a classifier"));
        }
        let mut init = Init::new(seed ^ 0xC1A5);
        self.classifier = Some(Linear::new(&mut self.store, &mut init, "mer.classifier", self.config.d, classes, true));
        self.config.classes = classes;
        Ok(self)
    }

    pub fn positions(&self) -> &Tensor<T> {
        &self.positions
    }

    fn check_patches(&self, g: &Graph<T>, v: Var) -> Result<()> {
        let want = [self.config.n_patches(), self.config.patch_len()];
        if g.shape(v) != want {
            return Err(Error::Tensor(mubert_tensor::TensorError::Shape {
                op: "model input",
                lhs: g.shape(v).to_vec(),
                rhs: want.to_vec(),
            }));
        }
        Ok(())
    }

    pub fn encode(&self, g: &mut Graph<T>, p: &Bound, patches: Var) -> Result<EncoderOutput> {
        self.check_patches(g, patches)?;
        let z = crate::patch::embed(g, p, &self.embed, patches, &self.positions)?;
        encoder_forward(g, p, &self.encoder, z, &self.config.attention())
    }

    fn patch_rows(&self, g: &mut Graph<T>, latent: Var) -> Result<Var> {
        if !self.config.contextual_token {
            return Ok(latent);
        }
        let n = g.shape(latent)[0];
        Ok(g.slice_rows(latent, 1, n)?)
    }

    /// Encodes both frames and applies saliency and diagonal attention, with
    /// queries from `later` and keys/values from `earlier`.
    pub fn pair_features(&self, g: &mut Graph<T>, p: &Bound, earlier: Var, later: Var) -> Result<PairFeatures> {
        let e_early = self.encode(g, p, earlier)?;
        let e_late = self.encode(g, p, later)?;
        let rows_late = self.patch_rows(g, e_late.latent)?;
        let rows_early = self.patch_rows(g, e_early.latent)?;
        let scaled = self.config.attn_scale;
        let (dma_out, saliency) = if self.config.use_poi {
            let s = poi_scores_var(g, e_late.last_attention)?;
            (dma_with_poi(g, p, &self.dma, rows_late, rows_early, s, scaled)?, Some(s))
        } else {
            (dma(g, p, &self.dma, rows_late, rows_early, scaled)?, None)
        };
        let raw = dma_out.combined.unwrap_or(dma_out.diagonal);
        let (out, weights) = match self.config.weight_norm {
            WeightNorm::None => (dma_out, raw),
            WeightNorm::Mean => {
                let n = self.config.n_patches() as f64;
                let w = g.normalize_sum(raw)?;
                let w = g.scale(w, T::lit(n))?;
                let features = g.mul_rows(w, dma_out.values)?;
                (DmaOutput { features, ..dma_out }, w)
            }
        };
        Ok(PairFeatures { dma: out, saliency, weights, later_latent: e_late.latent })
    }

    /// Decodes diagonal-attention features to a `[N_p × ps²C]` image.
    pub fn decode(&self, g: &mut Graph<T>, p: &Bound, features: Var) -> Result<Var> {
        let q = decoder_forward(g, p, &self.decoder, features, false, &self.config.attention())?;
        project_output(g, p, &self.head, q, self.config.n_patches())
    }

    pub fn pretrain_forward(
        &self,
        g: &mut Graph<T>,
        p: &Bound,
        input: &PretrainInput<T>,
        weights: &LossWeights,
        agg_stop_gradient: bool,
    ) -> Result<PretrainOutput> {
        let swapped = g.constant(input.swapped.clone());
        let later = g.constant(input.later.clone());
        let target = g.constant(input.target.clone());
        let features = self.pair_features(g, p, swapped, later)?;
        let reconstruction = self.decode(g, p, features.dma.features)?;
        let recon = reconstruction_loss(g, reconstruction, target)?;
        let agree = match (&input.crop, weights.beta > 0.0) {
            (Some(crop), true) => {
                let has_ct = self.config.contextual_token;
                let crop = g.constant(crop.clone());
                let e_crop = self.encode(g, p, crop)?;
                let a = contextual_features(g, features.later_latent, has_ct)?;
                let mut b = contextual_features(g, e_crop.latent, has_ct)?;
                if agg_stop_gradient {
                    b = g.detach(b)?;
                }
                Some(agreement_loss(g, a, b)?)
            }
            (None, true) => return Err(Error::usage("agreement weight is positive but no crop was supplied")),
            _ => None,
        };
        let loss = match agree {
            Some(a) => total_loss(g, recon, a, weights)?,
            None => g.scale(recon, T::lit(weights.gamma))?,
        };
        Ok(PretrainOutput { loss, reconstruction_loss: recon, agreement_loss: agree, reconstruction, features })
    }

    /// Class logits for an (onset, apex) pair.
    pub fn classify(&self, g: &mut Graph<T>, p: &Bound, onset: Var, apex: Var) -> Result<(Var, PairFeatures)> {
        let head = self
            .classifier
            .as_ref()
            .ok_or_else(|| Error::usage("model has no classifier head"))?;
        let f = self.pair_features(g, p, onset, apex)?;
        let n = T::lit(self.config.n_patches() as f64);
        let pooled = match self.config.pooling {
            Pooling::Mean => g.mean_rows(f.dma.features)?,
            Pooling::Sum => {
                let m = g.mean_rows(f.dma.features)?;
                g.scale(m, n)?
            }
            Pooling::Weighted => {
                let w = g.normalize_sum(f.weights)?;
                let x = g.mul_rows(w, f.dma.values)?;
                let m = g.mean_rows(x)?;
                g.scale(m, n)?
            }
        };
        let row = g.reshape(pooled, vec![1, self.config.d])?;
        let logits = head.forward(g, p, row)?;
        let logits = g.reshape(logits, vec![self.config.classes])?;
        Ok((logits, f))
    }

    /// Parameter names used by recognition: embedding, encoder, diagonal
    /// attention and the classifier.
    pub fn is_recognition_param(name: &str) -> bool {
        !name.starts_with("decoder.")
    }

    pub fn cast<U: Real>(&self) -> MuBert<U> {
        MuBert {
            config: self.config.clone(),
            store: self.store.cast(),
            embed: self.embed.clone(),
            encoder: self.encoder.clone(),
            dma: self.dma.clone(),
            decoder: self.decoder.clone(),
            head: self.head.clone(),
            classifier: self.classifier.clone(),
            positions: self.positions.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelConfig {
        ModelConfig {
            height: 4,
            width: 4,
            channels: 1,
            patch_size: 2,
            d: 8,
            enc_layers: 1,
            dec_layers: 1,
            n_heads: 1,
            mlp_ratio: 2,
            ..ModelConfig::smoke()
        }
    }

    fn input(cfg: &ModelConfig, k: f64) -> PretrainInput<f64> {
        let shape = vec![cfg.n_patches(), cfg.patch_len()];
        let t = |o: f64| Tensor::from_fn(shape.clone(), |i| 0.5 + 0.4 * ((i as f64 + o) * k).sin());
        PretrainInput { swapped: t(0.0), later: t(1.0), crop: Some(t(2.0)), target: t(3.0) }
    }

    #[test]
    fn published_configuration_shapes() {
        let cfg = ModelConfig::published();
        assert_eq!(cfg.n_patches(), 784);
        assert_eq!(cfg.seq_len(), 785);
        assert_eq!(cfg.patch_len(), 192);
        cfg.validate().unwrap();
    }

    #[test]
    fn pretrain_forward_shapes_and_finiteness() {
        let cfg = tiny();
        let model = MuBert::<f64>::new(cfg.clone(), 1).unwrap();
        let mut g = Graph::new();
        let p = model.store.bind(&mut g, true);
        let out = model.pretrain_forward(&mut g, &p, &input(&cfg, 0.7), &LossWeights::default(), false).unwrap();
        assert_eq!(g.shape(out.reconstruction), &[4, 4]);
        assert_eq!(g.shape(out.features.dma.attention), &[4, 4]);
        assert!(g.value(out.loss).item().unwrap().is_finite());
        let s: f64 = g.value(out.features.saliency.unwrap()).sum();
        assert!((s - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mean_weight_norm_averages_one() {
        let cfg = ModelConfig { weight_norm: WeightNorm::Mean, ..tiny() };
        let model = MuBert::<f64>::new(cfg.clone(), 2).unwrap();
        let mut g = Graph::new();
        let p = model.store.bind(&mut g, false);
        let inp = input(&cfg, 0.3);
        let a = g.constant(inp.swapped.clone());
        let b = g.constant(inp.later.clone());
        let f = model.pair_features(&mut g, &p, a, b).unwrap();
        assert!((g.value(f.weights).sum() - 4.0).abs() < 1e-9);
    }

    #[test]
    fn classifier_logits() {
        let model = MuBert::<f64>::new(tiny(), 3).unwrap().with_classifier(3, 4).unwrap();
        let mut g = Graph::new();
        let p = model.store.bind(&mut g, true);
        let inp = input(&model.config, 0.5);
        let a = g.constant(inp.swapped.clone());
        let b = g.constant(inp.later.clone());
        let (logits, _) = model.classify(&mut g, &p, a, b).unwrap();
        assert_eq!(g.shape(logits), &[3]);
        assert!(MuBert::<f64>::new(tiny(), 3).unwrap().with_classifier(1, 0).is_err());
    }

    #[test]
    fn invalid_configs() {
        assert!(ModelConfig { d: 7, ..tiny() }.validate().is_err());
        assert!(ModelConfig { n_heads: 3, ..tiny() }.validate().is_err());
        assert!(ModelConfig { height: 5, ..tiny() }.validate().is_err());
        assert!(ModelConfig { contextual_token: false, ..tiny() }.validate().is_err());
    }

    #[test]
    fn wrong_input_shape_is_rejected() {
        let model = MuBert::<f64>::new(tiny(), 1).unwrap();
        let mut g = Graph::new();
        let p = model.store.bind(&mut g, false);
        let x = g.constant(Tensor::zeros(vec![3, 4]));
        assert!(model.encode(&mut g, &p, x).is_err());
    }
}
