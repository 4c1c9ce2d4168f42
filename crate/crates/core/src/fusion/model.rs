use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{FusedInput, FusionError, ModelConfig};
use crate::numkernel::{Graph, ParamId, ParamStore, Real, Tensor, Var};


#[derive(Debug, Clone, Copy)]
struct LinearIds {
    weight: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct NormIds {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    q: LinearIds,
    k: LinearIds,
    v: LinearIds,
    out: LinearIds,
    attn_norm: NormIds,
    ffn_in: LinearIds,
    ffn_out: LinearIds,
    ffn_norm: NormIds,
}

#[derive(Debug, Clone)]
struct Ids {
    token: ParamId,
    position: ParamId,
    modality: ParamId,
    text_norm: NormIds,
    feature: LinearIds,
    geometry: LinearIds,
    visual_norm: NormIds,
    layers: Vec<LayerIds>,
    final_norm: NormIds,
    mlm_dense: LinearIds,
    mlm_norm: NormIds,
    phrase_dense: LinearIds,
    phrase_norm: NormIds,
    vocab_weight: ParamId,
    vocab_bias: ParamId,
    mrc: LinearIds,
    mrfr: LinearIds,
    itm: LinearIds,
}

/// Which heads to evaluate and at which positions.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HeadQuery {
    /// Sequence positions scored by the masked-language head.
    pub mlm: Vec<usize>,
    /// Region indices scored by the class and feature heads.
    pub regions: Vec<usize>,
    /// Region indices scored by the phrase-token head.
    pub phrase_regions: Vec<usize>,
    pub itm: bool,
    /// Keep per-head attention probabilities.
    pub attention: bool,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    /// Final hidden states, `[seq, hidden]`.
    pub hidden: Var,
    /// `[mlm.len(), vocab]`.
    pub mlm_logits: Option<Var>,
    /// `[regions.len(), classes]`.
    pub mrc_logits: Option<Var>,
    /// `[regions.len(), feature_dim]`.
    pub mrfr: Option<Var>,
    /// `[phrase_regions.len(), vocab]`.
    pub phrase_logits: Option<Var>,
    /// `[1, 1]` logit on `[CLS]`.
    pub itm_score: Option<Var>,
    /// `attention[layer][head]`, each `[seq, seq]`.
    pub attention: Vec<Vec<Var>>,
}

/// Transformer weights plus the handles needed to run them.
#[derive(Debug, Clone)]
pub struct FusionModel<T: Real> {
    config: ModelConfig,
    params: ParamStore<T>,
    ids: Ids,
}

struct Builder<'a, T: Real, R: Rng> {
    store: &'a mut ParamStore<T>,
    rng: R,
    std: f64,
}

impl<'a, T: Real, R: Rng> Builder<'a, T, R> {
    fn normal(&mut self, name: String, shape: &[usize]) -> ParamId {
        let std = self.std;
        let dist = Normal::new(0.0, std).expect("valid std");
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        while data.len() < n {
            let x: f64 = dist.sample(&mut self.rng);
            if x.abs() <= 2.0 * std {
                data.push(T::from_f64(x));
            }
        }
        self.store
            .add(name, Tensor::new(shape.to_vec(), data).expect("shape"))
    }

    fn filled(&mut self, name: String, shape: &[usize], value: f64) -> ParamId {
        self.store
            .add(name, Tensor::full(shape, T::from_f64(value)))
    }

    fn linear(&mut self, name: &str, inputs: usize, outputs: usize) -> LinearIds {
        LinearIds {
            weight: self.normal(format!("{name}.weight"), &[inputs, outputs]),
            bias: self.filled(format!("{name}.bias"), &[outputs], 0.0),
        }
    }

    fn norm(&mut self, name: &str, width: usize) -> NormIds {
        NormIds {
            gain: self.filled(format!("{name}.gain"), &[width], 1.0),
            bias: self.filled(format!("{name}.bias"), &[width], 0.0),
        }
    }
}

fn build_ids<T: Real, R: Rng>(c: &ModelConfig, store: &mut ParamStore<T>, rng: R) -> Ids {
    let h = c.hidden;
    let mut b = Builder {
        store,
        rng,
        std: c.init_std,
    };
    let token = b.normal("embed.token".into(), &[c.vocab_size, h]);
    let position = b.normal("embed.position".into(), &[c.max_tokens, h]);
    let modality = b.normal("embed.modality".into(), &[c.modalities, h]);
    let text_norm = b.norm("embed.text_norm", h);
    let feature = b.linear("embed.feature", c.feature_dim, h);
    let geometry = b.linear("embed.geometry", 5, h);
    let visual_norm = b.norm("embed.visual_norm", h);
    let layers = (0..c.layers)
        .map(|l| LayerIds {
            q: b.linear(&format!("layer{l}.attn.q"), h, h),
            k: b.linear(&format!("layer{l}.attn.k"), h, h),
            v: b.linear(&format!("layer{l}.attn.v"), h, h),
            out: b.linear(&format!("layer{l}.attn.out"), h, h),
            attn_norm: b.norm(&format!("layer{l}.attn.norm"), h),
            ffn_in: b.linear(&format!("layer{l}.ffn.in"), h, c.intermediate),
            ffn_out: b.linear(&format!("layer{l}.ffn.out"), c.intermediate, h),
            ffn_norm: b.norm(&format!("layer{l}.ffn.norm"), h),
        })
        .collect();
    let final_norm = b.norm("encoder.norm", h);
    let mlm_dense = b.linear("head.mlm.dense", h, h);
    let mlm_norm = b.norm("head.mlm.norm", h);
    let phrase_dense = b.linear("head.phrase.dense", h, h);
    let phrase_norm = b.norm("head.phrase.norm", h);
    let vocab_weight = b.normal("head.vocab.weight".into(), &[c.vocab_size, h]);
    let vocab_bias = b.filled("head.vocab.bias".into(), &[c.vocab_size], 0.0);
    let mrc = b.linear("head.mrc", h, c.num_classes);
    let mrfr = b.linear("head.mrfr", h, c.feature_dim);
    let itm = b.linear("head.itm", h, 1);
    Ids {
        token,
        position,
        modality,
        text_norm,
        feature,
        geometry,
        visual_norm,
        layers,
        final_norm,
        mlm_dense,
        mlm_norm,
        phrase_dense,
        phrase_norm,
        vocab_weight,
        vocab_bias,
        mrc,
        mrfr,
        itm,
    }
}

impl<T: Real> FusionModel<T> {
    /// Fresh weights: truncated normal (`init_std`, cut at 2 std) for matrices
    /// and embeddings, zero biases, unit norm gains.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, FusionError> {
        config.validate()?;
        let mut params = ParamStore::new();
        let ids = build_ids(&config, &mut params, ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            config,
            params,
            ids,
        })
    }

    /// Wraps loaded weights, checking every name and shape against `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self, FusionError> {
        let template = Self::new(config.clone(), 0)?;
        if template.params.len() != params.len() {
            return Err(FusionError::Param {
                name: "<all>".into(),
                reason: format!(
                    "expected {} tensors, got {}",
                    template.params.len(),
                    params.len()
                ),
            });
        }
        for ((_, want_name, want), (_, name, got)) in template.params.iter().zip(params.iter()) {
            if want_name != name {
                return Err(FusionError::Param {
                    name: name.to_string(),
                    reason: format!("expected parameter {want_name}"),
                });
            }
            if want.shape() != got.shape() {
                return Err(FusionError::Param {
                    name: name.to_string(),
                    reason: format!("shape {:?} != expected {:?}", got.shape(), want.shape()),
                });
            }
        }
        Ok(Self {
            config,
            params,
            ids: template.ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn into_params(self) -> ParamStore<T> {
        self.params
    }

    pub fn cast<U: Real>(&self) -> FusionModel<U> {
        FusionModel {
            config: self.config.clone(),
            params: self.params.cast(),
            ids: self.ids.clone(),
        }
    }

    fn check_input(&self, input: &FusedInput) -> Result<(), FusionError> {
        let c = &self.config;
        if input.text_len() > c.max_tokens {
            return Err(FusionError::TooLong {
                what: "text",
                len: input.text_len(),
                max: c.max_tokens,
            });
        }
        if input.num_regions() > c.max_regions {
            return Err(FusionError::TooLong {
                what: "regions",
                len: input.num_regions(),
                max: c.max_regions,
            });
        }
        if let Some(&id) = input.tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(FusionError::TokenOutOfRange {
                id,
                vocab: c.vocab_size,
            });
        }
        if let Some(f) = input.features.iter().find(|f| f.len() != c.feature_dim) {
            return Err(FusionError::FeatureDim {
                got: f.len(),
                expected: c.feature_dim,
            });
        }
        Ok(())
    }

    fn linear(&self, g: &mut Graph<'_, T>, x: Var, l: LinearIds) -> Result<Var, FusionError> {
        let w = g.param(l.weight);
        let b = g.param(l.bias);
        Ok(g.linear(x, w, b)?)
    }

    fn norm(&self, g: &mut Graph<'_, T>, x: Var, n: NormIds) -> Result<Var, FusionError> {
        let gain = g.param(n.gain);
        let bias = g.param(n.bias);
        let eps = T::from_f64(self.config.layer_norm_eps);
        Ok(g.layer_norm(x, gain, bias, eps)?)
    }

    fn embed(&self, g: &mut Graph<'_, T>, input: &FusedInput) -> Result<Var, FusionError> {
        let ids = &self.ids;
        let n_t = input.text_len();
        let tokens: Vec<usize> = input.tokens.iter().map(|&t| t as usize).collect();
        let tok_table = g.param(ids.token);
        let pos_table = g.param(ids.position);
        let mod_table = g.param(ids.modality);
        let tok = g.gather_rows(tok_table, &tokens)?;
        let positions: Vec<usize> = (0..n_t).collect();
        let pos = g.gather_rows(pos_table, &positions)?;
        let text_mod = g.gather_rows(mod_table, &vec![0; n_t])?;
        let text = g.add_n(&[tok, pos, text_mod])?;
        let text = self.norm(g, text, ids.text_norm)?;
        let n_r = input.num_regions();
        if n_r == 0 {
            return Ok(text);
        }
        let to_t = |rows: Vec<Vec<f32>>| -> Result<Tensor<T>, FusionError> {
            let rows: Vec<Vec<T>> = rows
                .into_iter()
                .map(|r| r.into_iter().map(T::from_f32).collect())
                .collect();
            Ok(Tensor::from_rows(&rows)?)
        };
        let feats = g.constant(to_t(input.features.clone())?);
        let geo = g.constant(to_t(input.geometry.iter().map(|b| b.to_vec()).collect())?);
        let f = self.linear(g, feats, ids.feature)?;
        let b = self.linear(g, geo, ids.geometry)?;
        let vis_mod = g.gather_rows(mod_table, &vec![1; n_r])?;
        let vis = g.add_n(&[f, b, vis_mod])?;
        let vis = self.norm(g, vis, ids.visual_norm)?;
        Ok(g.concat_rows(&[text, vis])?)
    }

    fn layer(
        &self,
        g: &mut Graph<'_, T>,
        x: Var,
        l: &LayerIds,
        valid: &[bool],
        keep: Option<&mut Vec<Var>>,
    ) -> Result<Var, FusionError> {
        let c = &self.config;
        let dh = c.head_dim();
        let h = self.norm(g, x, l.attn_norm)?;
        let q = self.linear(g, h, l.q)?;
        let k = self.linear(g, h, l.k)?;
        let v = self.linear(g, h, l.v)?;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let mut heads = Vec::with_capacity(c.heads);
        let mut probs = Vec::with_capacity(c.heads);
        for h in 0..c.heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let s = g.matmul_bt(qh, kh)?;
            let s = g.scale(s, scale);
            let p = g.softmax_rows(s, Some(valid))?;
            probs.push(p);
            heads.push(g.matmul(p, vh)?);
        }
        if let Some(keep) = keep {
            keep.extend(probs);
        }
        let o = g.concat_cols(&heads)?;
        let a = self.linear(g, o, l.out)?;
        let x = g.add(x, a)?;
        let h = self.norm(g, x, l.ffn_norm)?;
        let f = self.linear(g, h, l.ffn_in)?;
        let f = g.gelu(f);
        let f = self.linear(g, f, l.ffn_out)?;
        Ok(g.add(x, f)?)
    }

    /// Shared vocabulary decoder applied after a head-specific transform.
    fn decode_tokens(
        &self,
        g: &mut Graph<'_, T>,
        rows: Var,
        dense: LinearIds,
        norm: NormIds,
    ) -> Result<Var, FusionError> {
        let t = self.linear(g, rows, dense)?;
        let t = g.gelu(t);
        let t = self.norm(g, t, norm)?;
        let w = g.param(self.ids.vocab_weight);
        let b = g.param(self.ids.vocab_bias);
        let logits = g.matmul_bt(t, w)?;
        Ok(g.add_row(logits, b)?)
    }

    /// Builds the forward pass on `g`, which must have been created over
    /// [`Self::params`].
    pub fn forward(
        &self,
        g: &mut Graph<'_, T>,
        input: &FusedInput,
        query: &HeadQuery,
    ) -> Result<ForwardOutput, FusionError> {
        self.check_input(input)?;
        let valid = input.valid();
        let mut x = self.embed(g, input)?;
        let mut attention = Vec::new();
        for l in &self.ids.layers {
            let mut keep = Vec::new();
            x = self.layer(g, x, l, &valid, query.attention.then_some(&mut keep))?;
            if query.attention {
                attention.push(keep);
            }
        }
        let x = self.norm(g, x, self.ids.final_norm)?;
        let region_rows =
            |rs: &[usize]| -> Vec<usize> { rs.iter().map(|&r| input.region_position(r)).collect() };
        let mut out = ForwardOutput {
            hidden: x,
            mlm_logits: None,
            mrc_logits: None,
            mrfr: None,
            phrase_logits: None,
            itm_score: None,
            attention,
        };
        if !query.mlm.is_empty() {
            let rows = g.gather_rows(x, &query.mlm)?;
            out.mlm_logits =
                Some(self.decode_tokens(g, rows, self.ids.mlm_dense, self.ids.mlm_norm)?);
        }
        if !query.regions.is_empty() {
            let rows = g.gather_rows(x, &region_rows(&query.regions))?;
            out.mrc_logits = Some(self.linear(g, rows, self.ids.mrc)?);
            out.mrfr = Some(self.linear(g, rows, self.ids.mrfr)?);
        }
        if !query.phrase_regions.is_empty() {
            let rows = g.gather_rows(x, &region_rows(&query.phrase_regions))?;
            out.phrase_logits =
                Some(self.decode_tokens(g, rows, self.ids.phrase_dense, self.ids.phrase_norm)?);
        }
        if query.itm {
            let cls = g.gather_rows(x, &[0])?;
            out.itm_score = Some(self.linear(g, cls, self.ids.itm)?);
        }
        Ok(out)
    }

    /// Image-text match logit without building gradients.
    pub fn itm_logit(&self, input: &FusedInput) -> Result<T, FusionError> {
        let mut g = Graph::new(&self.params);
        let q = HeadQuery {
            itm: true,
            ..HeadQuery::default()
        };
        let out = self.forward(&mut g, input, &q)?;
        Ok(g.value(out.itm_score.expect("requested"))[0])
    }
}
