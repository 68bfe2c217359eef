use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{MctError, Result};
use crate::model::config::{HeadMode, ModelConfig, Variant};
use crate::model::params::{LayerParams, ModelParameters, ParamSet};

const NORM_EPS: f64 = 1e-6;

/// Post-softmax token-to-token attention of every head in every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionStack {
    layers: Vec<Vec<Tensor>>,
}

impl AttentionStack {
    /// `layers[l][h]` must be square `T×T` for a common `T`, with the same
    /// head count in every layer.
    pub fn new(layers: Vec<Vec<Tensor>>) -> Result<Self> {
        let first = layers
            .first()
            .and_then(|l| l.first())
            .ok_or(MctError::Empty("attention stack"))?;
        let t = first.shape()[0];
        let heads = layers[0].len();
        for layer in &layers {
            if layer.len() != heads {
                return Err(MctError::shape("attention_stack", &[heads], &[layer.len()]));
            }
            for m in layer {
                if m.shape() != [t, t] {
                    return Err(MctError::shape("attention_stack", &[t, t], m.shape()));
                }
            }
        }
        Ok(Self { layers })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn num_heads(&self) -> usize {
        self.layers[0].len()
    }

    pub fn num_tokens(&self) -> usize {
        self.layers[0][0].shape()[0]
    }

    pub fn layer(&self, l: usize) -> &[Tensor] {
        &self.layers[l]
    }

    pub fn head(&self, l: usize, h: usize) -> &Tensor {
        &self.layers[l][h]
    }

    /// Largest deviation of any row sum from one.
    pub fn max_row_sum_error(&self) -> f64 {
        let t = self.num_tokens();
        self.layers
            .iter()
            .flatten()
            .flat_map(|m| (0..t).map(move |r| (m.row(r).iter().sum::<f64>() - 1.0).abs()))
            .fold(0.0, f64::max)
    }
}

/// Everything a forward pass produces that downstream code reads.
#[derive(Clone, Debug)]
pub struct ForwardRecord {
    pub class_scores_cls: Tensor,
    /// PatchCAM scores, V2 only.
    pub class_scores_patch: Option<Tensor>,
    pub output_class_tokens: Tensor,
    pub output_patch_tokens: Tensor,
    /// Pre-pooling PatchCAM features `N×N×C`, V2 only.
    pub patch_cam_features: Option<Tensor>,
    pub attention_stack: AttentionStack,
}

/// Graph handles for the pieces of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub scores_cls: Var,
    pub scores_patch: Option<Var>,
    pub class_tokens: Var,
    pub patch_tokens: Var,
    pub cam_features: Option<Var>,
    pub attention: Vec<Vec<Var>>,
}

impl ForwardVars {
    pub fn record(&self, g: &Graph) -> Result<ForwardRecord> {
        let attention = self
            .attention
            .iter()
            .map(|l| l.iter().map(|&v| g.value(v).clone()).collect())
            .collect();
        Ok(ForwardRecord {
            class_scores_cls: g.value(self.scores_cls).clone(),
            class_scores_patch: self.scores_patch.map(|v| g.value(v).clone()),
            output_class_tokens: g.value(self.class_tokens).clone(),
            output_patch_tokens: g.value(self.patch_tokens).clone(),
            patch_cam_features: self.cam_features.map(|v| g.value(v).clone()),
            attention_stack: AttentionStack::new(attention)?,
        })
    }
}

/// Splits a `3×S×S` image into `N²` row-major patches, each flattened in
/// channel, row, column order.
pub fn patchify(image: &Tensor, config: &ModelConfig) -> Result<Tensor> {
    let side = config.image_side();
    if image.shape() != [3, side, side] {
        return Err(MctError::shape("embed", image.shape(), &[3, side, side]));
    }
    let (n, p) = (config.grid_side, config.patch_size);
    let mut out = Vec::with_capacity(n * n * config.patch_dim());
    for gi in 0..n {
        for gj in 0..n {
            for ch in 0..3 {
                for py in 0..p {
                    let row = gi * p + py;
                    let start = (ch * side + row) * side + gj * p;
                    out.extend_from_slice(&image.data()[start..start + p]);
                }
            }
        }
    }
    Tensor::new(&[n * n, config.patch_dim()], out)
}

pub(crate) fn embed_graph(g: &mut Graph, p: &ParamSet<Var>, patches: Var) -> Result<Var> {
    let projected = g.matmul(patches, p.patch_projection)?;
    let tokens = g.concat_rows(&[p.class_tokens, projected])?;
    g.add(tokens, p.positional_embedding)
}

fn encoder_layer(g: &mut Graph, lp: &LayerParams<Var>, x: Var, config: &ModelConfig) -> Result<(Var, Vec<Var>)> {
    let dh = config.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let h = g.layer_norm(x, lp.norm1_gamma, lp.norm1_beta, NORM_EPS)?;
    let q = g.matmul(h, lp.wq)?;
    let q = g.add_bias(q, lp.bq)?;
    let k = g.matmul(h, lp.wk)?;
    let k = g.add_bias(k, lp.bk)?;
    let v = g.matmul(h, lp.wv)?;
    let v = g.add_bias(v, lp.bv)?;
    let mut attn = Vec::with_capacity(config.num_heads);
    let mut heads = Vec::with_capacity(config.num_heads);
    for head in 0..config.num_heads {
        let qh = g.slice_cols(q, head * dh, dh)?;
        let kh = g.slice_cols(k, head * dh, dh)?;
        let vh = g.slice_cols(v, head * dh, dh)?;
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, scale);
        let a = g.softmax_rows(logits)?;
        attn.push(a);
        heads.push(g.matmul(a, vh)?);
    }
    let o = g.concat_cols(&heads)?;
    let o = g.matmul(o, lp.wo)?;
    let o = g.add_bias(o, lp.bo)?;
    let x = g.add(x, o)?;

    let h = g.layer_norm(x, lp.norm2_gamma, lp.norm2_beta, NORM_EPS)?;
    let m = g.matmul(h, lp.mlp_w1)?;
    let m = g.add_bias(m, lp.mlp_b1)?;
    let m = g.gelu(m);
    let m = g.matmul(m, lp.mlp_w2)?;
    let m = g.add_bias(m, lp.mlp_b2)?;
    Ok((g.add(x, m)?, attn))
}

pub(crate) fn encode_graph(
    g: &mut Graph,
    p: &ParamSet<Var>,
    tokens: Var,
    config: &ModelConfig,
) -> Result<(Var, Vec<Vec<Var>>)> {
    let expect = [config.num_tokens(), config.embed_dim];
    if g.value(tokens).shape() != expect {
        return Err(MctError::shape("encode", g.value(tokens).shape(), &expect));
    }
    let mut x = tokens;
    let mut stack = Vec::with_capacity(p.layers.len());
    for lp in &p.layers {
        let (next, attn) = encoder_layer(g, lp, x, config)?;
        x = next;
        stack.push(attn);
    }
    Ok((x, stack))
}

pub(crate) fn class_head_graph(g: &mut Graph, p: &ParamSet<Var>, class_tokens: Var, mode: HeadMode) -> Result<Var> {
    match mode {
        HeadMode::AveragePool => g.mean_cols(class_tokens),
        HeadMode::MaxPool => g.max_cols(class_tokens),
        HeadMode::FullyConnected => {
            let (w, b) = p
                .head_weights
                .zip(p.head_bias)
                .ok_or_else(|| MctError::Config("fully_connected head needs head_weights".into()))?;
            let (c, d) = g.value(class_tokens).dims2()?;
            let flat = g.reshape(class_tokens, &[1, c * d])?;
            let y = g.matmul(flat, w)?;
            let y = g.add_bias(y, b)?;
            g.reshape(y, &[c])
        }
    }
}

/// Returns `(features N×N×C, scores C)`.
pub(crate) fn patch_cam_graph(
    g: &mut Graph,
    p: &ParamSet<Var>,
    patch_tokens: Var,
    config: &ModelConfig,
) -> Result<(Var, Var)> {
    let (kernels, bias) = p.cam_kernels.zip(p.cam_bias).ok_or(MctError::UnsupportedVariant {
        variant: Variant::V1.to_string(),
        what: "patch_cam_forward",
    })?;
    let (m, d) = g.value(patch_tokens).dims2()?;
    let n = config.grid_side;
    if m != n * n {
        return Err(MctError::shape("patch_cam_forward", &[m, d], &[n * n, d]));
    }
    let grid = g.reshape(patch_tokens, &[n, n, d])?;
    let features = g.conv3x3(grid, kernels, bias)?;
    let flat = g.reshape(features, &[m, config.num_classes])?;
    let scores = g.mean_rows(flat)?;
    Ok((features, scores))
}

/// Builds the whole forward pass on `g` from an already-patchified image.
pub fn forward_graph(g: &mut Graph, p: &ParamSet<Var>, config: &ModelConfig, patches: Var) -> Result<ForwardVars> {
    let tokens = embed_graph(g, p, patches)?;
    let (out, attention) = encode_graph(g, p, tokens, config)?;
    let c = config.num_classes;
    let class_tokens = g.slice_rows(out, 0, c)?;
    let patch_tokens = g.slice_rows(out, c, config.num_patches())?;
    let scores_cls = class_head_graph(g, p, class_tokens, config.head_mode)?;
    let (cam_features, scores_patch) = match config.variant {
        Variant::V1 => (None, None),
        Variant::V2 => {
            let (f, s) = patch_cam_graph(g, p, patch_tokens, config)?;
            (Some(f), Some(s))
        }
    };
    Ok(ForwardVars {
        scores_cls,
        scores_patch,
        class_tokens,
        patch_tokens,
        cam_features,
        attention,
    })
}

/// Loads every parameter into `g` as a constant (inference) or trainable leaf.
pub fn load_params(g: &mut Graph, params: &ModelParameters, trainable: bool) -> ParamSet<Var> {
    params.map(|_, t| {
        if trainable {
            g.param(t.clone())
        } else {
            g.constant(t.clone())
        }
    })
}

/// Input tokens: class tokens, then projected patches, plus positional embedding.
pub fn embed(image: &Tensor, params: &ModelParameters, config: &ModelConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let patches = g.constant(patchify(image, config)?);
    let p = load_params(&mut g, params, false);
    let v = embed_graph(&mut g, &p, patches)?;
    Ok(g.value(v).clone())
}

/// Runs the encoder stack on a token sequence.
pub fn encode(tokens: &Tensor, params: &ModelParameters, config: &ModelConfig) -> Result<(Tensor, AttentionStack)> {
    let mut g = Graph::new();
    let p = load_params(&mut g, params, false);
    let t = g.constant(tokens.clone());
    let (out, attention) = encode_graph(&mut g, &p, t, config)?;
    let attention = attention
        .iter()
        .map(|l| l.iter().map(|&v| g.value(v).clone()).collect())
        .collect();
    Ok((g.value(out).clone(), AttentionStack::new(attention)?))
}

pub fn class_scores_from_tokens(
    output_class_tokens: &Tensor,
    head_mode: HeadMode,
    params: &ModelParameters,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let p = load_params(&mut g, params, false);
    let t = g.constant(output_class_tokens.clone());
    let y = class_head_graph(&mut g, &p, t, head_mode)?;
    Ok(g.value(y).clone())
}

/// PatchCAM head: reshape to the grid, 3×3 conv to `C` channels, global
/// average pool. Returns `(features, scores)`.
pub fn patch_cam_forward(
    output_patch_tokens: &Tensor,
    params: &ModelParameters,
    config: &ModelConfig,
) -> Result<(Tensor, Tensor)> {
    if config.variant != Variant::V2 {
        return Err(MctError::UnsupportedVariant {
            variant: config.variant.to_string(),
            what: "patch_cam_forward",
        });
    }
    let mut g = Graph::new();
    let p = load_params(&mut g, params, false);
    let t = g.constant(output_patch_tokens.clone());
    let (f, s) = patch_cam_graph(&mut g, &p, t, config)?;
    Ok((g.value(f).clone(), g.value(s).clone()))
}

/// Full inference pass.
pub fn forward(params: &ModelParameters, config: &ModelConfig, image: &Tensor) -> Result<ForwardRecord> {
    let mut g = Graph::new();
    let patches = g.constant(patchify(image, config)?);
    let p = load_params(&mut g, params, false);
    forward_graph(&mut g, &p, config, patches)?.record(&g)
}
