//! The complete multi-style captioning model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::corpus::{ExampleRecord, ImageFeatures};
use crate::decoder::{fuse_and_project, stack_rows, AttentionMemory, Branch, DecoderState, StepOutput};
use crate::encoders::{encode_dense_captions, encode_visual, EncodedCaptions, EncodedVisual, LstmCell, WordStateSource};
use crate::error::{Error, Result};
use crate::layers::{Linear, Session};
use crate::params::{ParamGroup, ParamStore};
use crate::style::{stylize, StyleEmbedder, WordEmbedder};

/// Which components are enabled. Disabling style drops the style vector from
/// the word input; disabling text or visual removes that decoder branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    pub use_style: bool,
    pub use_text: bool,
    pub use_visual: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Ablation {
            use_style: true,
            use_text: true,
            use_visual: true,
        }
    }
}

impl Ablation {
    pub fn label(&self) -> &'static str {
        match (self.use_style, self.use_text, self.use_visual) {
            (true, true, true) => "full",
            (false, true, true) => "no-style",
            (true, false, true) => "no-text",
            (true, true, false) => "no-visual",
            _ => "custom",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    pub word_dim: usize,
    pub style_embed_dim: usize,
    pub style_dim: usize,
    pub encoder_hidden: usize,
    pub visual_hidden: usize,
    pub decoder_hidden: usize,
    pub attention_dim: usize,
}

impl Default for ModelDims {
    fn default() -> Self {
        ModelDims {
            word_dim: 128,
            style_embed_dim: 64,
            style_dim: 64,
            encoder_hidden: 128,
            visual_hidden: 128,
            decoder_hidden: 128,
            attention_dim: 128,
        }
    }
}

impl ModelDims {
    /// Small dimensions for tests and toy runs.
    pub fn tiny() -> Self {
        ModelDims {
            word_dim: 8,
            style_embed_dim: 4,
            style_dim: 4,
            encoder_hidden: 6,
            visual_hidden: 6,
            decoder_hidden: 8,
            attention_dim: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub num_styles: usize,
    /// Visual feature dimension of the input files.
    pub feature_dim: usize,
    pub dims: ModelDims,
    pub dropout: f64,
    pub word_state_source: WordStateSource,
    pub ablation: Ablation,
    pub init_scale: f64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize, num_styles: usize, feature_dim: usize) -> Self {
        ModelConfig {
            vocab_size,
            num_styles,
            feature_dim,
            dims: ModelDims::default(),
            dropout: 0.2,
            word_state_source: WordStateSource::Cell,
            ablation: Ablation::default(),
            init_scale: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = &self.dims;
        let sizes = [
            ("vocab_size", self.vocab_size),
            ("num_styles", self.num_styles),
            ("feature_dim", self.feature_dim),
            ("word_dim", d.word_dim),
            ("style_embed_dim", d.style_embed_dim),
            ("style_dim", d.style_dim),
            ("encoder_hidden", d.encoder_hidden),
            ("visual_hidden", d.visual_hidden),
            ("decoder_hidden", d.decoder_hidden),
            ("attention_dim", d.attention_dim),
        ];
        for (name, v) in sizes {
            if v == 0 {
                return Err(Error::Parameter(format!("{name} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Parameter(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !self.ablation.use_text && !self.ablation.use_visual {
            return Err(Error::Parameter(
                "at least one of the text and visual branches must be enabled".into(),
            ));
        }
        if !(self.init_scale > 0.0) {
            return Err(Error::Parameter("init_scale must be positive".into()));
        }
        Ok(())
    }

    /// Width of the stylized word vector.
    pub fn stylized_dim(&self) -> usize {
        self.dims.word_dim + if self.ablation.use_style { self.dims.style_dim } else { 0 }
    }
}

/// Parameter handles of every component, `None` for ablated ones.
#[derive(Clone, Debug)]
pub struct Components {
    pub word: WordEmbedder,
    pub style: Option<StyleEmbedder>,
    pub caption_encoder: Option<LstmCell>,
    pub visual_encoder: Option<Linear>,
    pub caption_branch: Option<Branch>,
    pub visual_branch: Option<Branch>,
    pub projection: Linear,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    components: Components,
}

/// The per-example inputs the model conditions on.
#[derive(Clone, Copy, Debug)]
pub struct ExampleInput<'a> {
    pub features: &'a ImageFeatures,
    pub dense_captions: &'a [Vec<usize>],
    pub style: usize,
}

impl<'a> From<&'a ExampleRecord> for ExampleInput<'a> {
    fn from(r: &'a ExampleRecord) -> Self {
        ExampleInput {
            features: &r.features,
            dense_captions: &r.dense_captions,
            style: r.style,
        }
    }
}

/// Encoder outputs for one example, ready for step-wise decoding.
#[derive(Clone, Debug)]
pub struct Encoded {
    pub captions: Option<EncodedCaptions>,
    pub visual: Option<EncodedVisual>,
    pub style_vec: Option<Var>,
    caption_memory: Option<AttentionMemory>,
    visual_memory: Option<AttentionMemory>,
}

impl Model {
    /// Initializes weights uniformly in ±`init_scale`, biases at zero and
    /// LSTM forget biases at one.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let d = config.dims;
        let scale = config.init_scale;
        let ab = config.ablation;

        let word = WordEmbedder::new(&mut store, config.vocab_size, d.word_dim, scale, &mut rng);
        let style = ab.use_style.then(|| {
            StyleEmbedder::new(&mut store, config.num_styles, d.style_embed_dim, d.style_dim, scale, &mut rng)
        });
        let w_dim = config.stylized_dim();
        let (caption_encoder, caption_branch) = if ab.use_text {
            let enc = LstmCell::new(&mut store, "caption_encoder", ParamGroup::CaptionEncoder, d.word_dim, d.encoder_hidden, scale, &mut rng);
            let br = Branch::new(
                &mut store,
                "caption_branch",
                ParamGroup::CaptionBranch,
                crate::corpus::NUM_DENSE_CAPTIONS * d.encoder_hidden,
                d.encoder_hidden,
                w_dim,
                d.decoder_hidden,
                d.attention_dim,
                scale,
                &mut rng,
            );
            (Some(enc), Some(br))
        } else {
            (None, None)
        };
        let (visual_encoder, visual_branch) = if ab.use_visual {
            let enc = Linear::new(&mut store, "visual_encoder", ParamGroup::VisualEncoder, config.feature_dim, d.visual_hidden, scale, &mut rng);
            let br = Branch::new(
                &mut store,
                "visual_branch",
                ParamGroup::VisualBranch,
                d.visual_hidden,
                d.visual_hidden,
                w_dim,
                d.decoder_hidden,
                d.attention_dim,
                scale,
                &mut rng,
            );
            (Some(enc), Some(br))
        } else {
            (None, None)
        };
        let projection = Linear::new(&mut store, "projection", ParamGroup::Projection, d.decoder_hidden, config.vocab_size, scale, &mut rng);
        Ok(Model {
            config,
            params: store,
            components: Components {
                word,
                style,
                caption_encoder,
                visual_encoder,
                caption_branch,
                visual_branch,
                projection,
            },
        })
    }

    pub fn components(&self) -> &Components {
        &self.components
    }

    pub fn vocab_size(&self) -> usize {
        self.config.vocab_size
    }

    pub fn session(&self, training: bool, seed: u64) -> Session<'_> {
        Session::new(&self.params, training, seed)
    }

    pub fn encode(&self, s: &mut Session, input: ExampleInput<'_>) -> Result<Encoded> {
        let c = &self.components;
        if input.style >= self.config.num_styles {
            return Err(Error::Parameter(format!(
                "style id {} out of range for {} styles",
                input.style, self.config.num_styles
            )));
        }
        let style_vec = c.style.as_ref().map(|st| st.embed(s, input.style)).transpose()?;

        let (captions, caption_memory) = match (&c.caption_encoder, &c.caption_branch) {
            (Some(cell), Some(branch)) => {
                let mut embedded = Vec::with_capacity(input.dense_captions.len());
                for cap in input.dense_captions {
                    embedded.push(cap.iter().map(|&t| c.word.embed(s, t)).collect::<Result<Vec<_>>>()?);
                }
                let enc = encode_dense_captions(s, cell, &embedded, self.config.word_state_source)?;
                let values = stack_rows(s, &enc.word_states)?;
                let mem = branch.attention.prepare(s, values)?;
                (Some(enc), Some(mem))
            }
            _ => (None, None),
        };

        let (visual, visual_memory) = match (&c.visual_encoder, &c.visual_branch) {
            (Some(layer), Some(branch)) => {
                let mean = s.constant(input.features.mean_pooled.clone());
                let spatial = s.constant(input.features.spatial.clone());
                let enc = encode_visual(s, layer, self.config.dropout, mean, spatial)?;
                let mem = branch.attention.prepare(s, enc.spatial)?;
                (Some(enc), Some(mem))
            }
            _ => (None, None),
        };

        Ok(Encoded {
            captions,
            visual,
            style_vec,
            caption_memory,
            visual_memory,
        })
    }

    /// All-zero hidden and cell states.
    pub fn initial_state(&self, s: &mut Session) -> DecoderState {
        let m = self.config.dims.decoder_hidden;
        let c = &self.components;
        DecoderState {
            h_lang: s.zeros(m),
            h_att: s.zeros(m),
            caption: c.caption_branch.as_ref().map(|b| b.zero_cells(s)),
            visual: c.visual_branch.as_ref().map(|b| b.zero_cells(s)),
        }
    }

    /// One generation step: embed and stylize `prev_token`, run each active
    /// branch, fuse and project.
    pub fn decode_step(&self, s: &mut Session, enc: &Encoded, prev_token: usize, prev: &DecoderState) -> Result<StepOutput> {
        let c = &self.components;
        let word = c.word.embed(s, prev_token)?;
        let w_t = stylize(s, word, enc.style_vec)?;

        let cap_out = match (&c.caption_branch, &enc.captions, &enc.caption_memory, prev.caption) {
            (Some(br), Some(caps), Some(mem), Some(cells)) => Some(br.step(s, caps.v_cap, mem, w_t, prev, cells)?),
            (None, ..) => None,
            _ => return Err(Error::Contract("caption branch inputs missing".into())),
        };
        let vis_out = match (&c.visual_branch, &enc.visual, &enc.visual_memory, prev.visual) {
            (Some(br), Some(vis), Some(mem), Some(cells)) => Some(br.step(s, vis.mean_pool, mem, w_t, prev, cells)?),
            (None, ..) => None,
            _ => return Err(Error::Contract("visual branch inputs missing".into())),
        };
        fuse_and_project(s, cap_out.as_ref(), vis_out.as_ref(), &c.projection, self.config.dropout)
    }

    /// Teacher-forced log-probabilities: step `t` consumes `target[t]` and
    /// predicts `target[t + 1]`.
    pub fn teacher_forced(&self, s: &mut Session, enc: &Encoded, target: &[usize]) -> Result<Vec<StepOutput>> {
        let mut state = self.initial_state(s);
        let mut outs = Vec::with_capacity(target.len().saturating_sub(1));
        for &tok in &target[..target.len().saturating_sub(1)] {
            let out = self.decode_step(s, enc, tok, &state)?;
            state = out.state;
            outs.push(out);
        }
        Ok(outs)
    }

    /// Summed negative log-likelihood of `target[1..]` as a scalar node.
    pub fn caption_nll(&self, s: &mut Session, input: ExampleInput<'_>, target: &[usize]) -> Result<Var> {
        if target.len() < 2 {
            return Err(Error::Contract("target needs at least two tokens".into()));
        }
        let enc = self.encode(s, input)?;
        let outs = self.teacher_forced(s, &enc, target)?;
        let lps: Vec<Var> = outs.iter().map(|o| o.logprobs).collect();
        let flat = s.tape.concat(&lps, 0)?;
        let steps = lps.len();
        let stacked = s.tape.reshape(flat, &[1, steps, self.config.vocab_size])?;
        s.tape
            .masked_nll_sum(stacked, &[target[1..].to_vec()], &[vec![1.0; steps]])
    }

    /// Overwrites parameters by name from `other`, checking shapes.
    pub fn load_params(&mut self, other: &ParamStore) -> Result<()> {
        for (id, p) in other.iter() {
            let _ = id;
            let target = self
                .params
                .find(&p.name)
                .ok_or_else(|| Error::Data(format!("unexpected parameter {:?}", p.name)))?;
            if self.params.value(target).shape() != p.value.shape() {
                return Err(Error::Data(format!(
                    "parameter {:?} has shape {:?}, model expects {:?}",
                    p.name,
                    p.value.shape(),
                    self.params.value(target).shape()
                )));
            }
            *self.params.value_mut(target) = p.value.clone();
        }
        if other.len() != self.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, model has {}",
                other.len(),
                self.params.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::EOS;
    use crate::tensor::Tensor;
    use rand::Rng;

    pub(crate) fn tiny_config(ablation: Ablation) -> ModelConfig {
        ModelConfig {
            dims: ModelDims::tiny(),
            dropout: 0.0,
            ablation,
            init_scale: 0.5,
            ..ModelConfig::new(9, 3, 4)
        }
    }

    fn features(seed: u64) -> ImageFeatures {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageFeatures {
            mean_pooled: Tensor::vector((0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()),
            spatial: Tensor::matrix(3, 4, (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap(),
        }
    }

    fn captions() -> Vec<Vec<usize>> {
        vec![vec![4, 5], vec![6], vec![EOS], vec![7, 8, 4], vec![5]]
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config(Ablation::default());
        assert!(c.validate().is_ok());
        c.ablation.use_text = false;
        c.ablation.use_visual = false;
        assert!(matches!(Model::new(c, 0), Err(Error::Parameter(_))));
    }

    #[test]
    fn ablated_components_are_absent() {
        let m = Model::new(tiny_config(Ablation { use_style: false, ..Default::default() }), 0).unwrap();
        assert!(m.components().style.is_none());
        assert!(!m.params.groups().contains(&ParamGroup::Style));
        let m = Model::new(tiny_config(Ablation { use_text: false, ..Default::default() }), 0).unwrap();
        assert!(m.components().caption_branch.is_none());
        assert!(!m.params.groups().contains(&ParamGroup::CaptionEncoder));
    }

    #[test]
    fn step_is_a_log_distribution() {
        for ab in [
            Ablation::default(),
            Ablation { use_style: false, ..Default::default() },
            Ablation { use_text: false, ..Default::default() },
            Ablation { use_visual: false, ..Default::default() },
        ] {
            let m = Model::new(tiny_config(ab), 1).unwrap();
            let f = features(2);
            let caps = captions();
            let mut s = m.session(false, 0);
            let enc = m.encode(&mut s, ExampleInput { features: &f, dense_captions: &caps, style: 2 }).unwrap();
            let st = m.initial_state(&mut s);
            let out = m.decode_step(&mut s, &enc, crate::corpus::BOS, &st).unwrap();
            let z: f64 = s.tape.value(out.logprobs).iter().map(|x| x.exp()).sum();
            assert!((z - 1.0).abs() < 1e-8, "{ab:?}");
        }
    }

    #[test]
    fn shared_word_embedding_feeds_dense_captions() {
        let m = Model::new(tiny_config(Ablation::default()), 1).unwrap();
        let f = features(2);
        let caps = captions();
        let mut s = m.session(false, 0);
        // the caption encoder reads only through the shared embedding table
        let enc = m.encode(&mut s, ExampleInput { features: &f, dense_captions: &caps, style: 0 }).unwrap();
        let loss = s.tape.sum(enc.captions.unwrap().v_cap);
        let mut g = crate::params::ParamGrads::zeros(&m.params);
        s.accumulate_grads(loss, 1.0, &mut g).unwrap();
        let table = m.components().word.table;
        let grad = g.get(table);
        let d = m.config.dims.word_dim;
        let row_nonzero = |r: usize| grad[r * d..(r + 1) * d].iter().any(|&x| x != 0.0);
        for tok in [4, 5, 6, 7, 8, EOS] {
            assert!(row_nonzero(tok), "token {tok}");
        }
        assert!(!row_nonzero(crate::corpus::BOS));
    }

    #[test]
    fn out_of_range_style_is_rejected() {
        let m = Model::new(tiny_config(Ablation::default()), 1).unwrap();
        let f = features(2);
        let caps = captions();
        let mut s = m.session(false, 0);
        let r = m.encode(&mut s, ExampleInput { features: &f, dense_captions: &caps, style: 3 });
        assert!(matches!(r, Err(Error::Parameter(_))));
    }

    #[test]
    fn load_params_checks_names_and_shapes() {
        let a = Model::new(tiny_config(Ablation::default()), 1).unwrap();
        let mut b = Model::new(tiny_config(Ablation::default()), 2).unwrap();
        b.load_params(&a.params).unwrap();
        assert_eq!(a.params, b.params);
        let mut c = Model::new(tiny_config(Ablation { use_style: false, ..Default::default() }), 1).unwrap();
        assert!(c.load_params(&a.params).is_err());
    }
}
