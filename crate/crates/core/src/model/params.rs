use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::Tensor;
use crate::error::{MctError, Result};
use crate::model::config::{HeadMode, ModelConfig, Variant};

/// Weights of one pre-norm encoder layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub norm1_gamma: T,
    pub norm1_beta: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub norm2_gamma: T,
    pub norm2_beta: T,
    pub mlp_w1: T,
    pub mlp_b1: T,
    pub mlp_w2: T,
    pub mlp_b2: T,
}

/// Full parameter set, generic over the leaf type so the same layout serves
/// both stored tensors and graph handles.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T> {
    pub patch_projection: T,
    pub class_tokens: T,
    pub positional_embedding: T,
    pub layers: Vec<LayerParams<T>>,
    /// PatchCAM convolution, V2 only.
    pub cam_kernels: Option<T>,
    pub cam_bias: Option<T>,
    /// Linear class head, `fully_connected` head mode only.
    pub head_weights: Option<T>,
    pub head_bias: Option<T>,
}

pub type ModelParameters = ParamSet<Tensor>;

const LAYER_FIELDS: [&str; 16] = [
    "norm1_gamma",
    "norm1_beta",
    "wq",
    "bq",
    "wk",
    "bk",
    "wv",
    "bv",
    "wo",
    "bo",
    "norm2_gamma",
    "norm2_beta",
    "mlp_w1",
    "mlp_b1",
    "mlp_w2",
    "mlp_b2",
];

impl<T> LayerParams<T> {
    fn fields(&self) -> [&T; 16] {
        [
            &self.norm1_gamma,
            &self.norm1_beta,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.norm2_gamma,
            &self.norm2_beta,
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
        ]
    }

    fn fields_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.norm1_gamma,
            &mut self.norm1_beta,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.norm2_gamma,
            &mut self.norm2_beta,
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
        ]
    }

    fn from_fields(mut next: impl FnMut(&str) -> Result<T>) -> Result<Self> {
        Ok(Self {
            norm1_gamma: next("norm1_gamma")?,
            norm1_beta: next("norm1_beta")?,
            wq: next("wq")?,
            bq: next("bq")?,
            wk: next("wk")?,
            bk: next("bk")?,
            wv: next("wv")?,
            bv: next("bv")?,
            wo: next("wo")?,
            bo: next("bo")?,
            norm2_gamma: next("norm2_gamma")?,
            norm2_beta: next("norm2_beta")?,
            mlp_w1: next("mlp_w1")?,
            mlp_b1: next("mlp_b1")?,
            mlp_w2: next("mlp_w2")?,
            mlp_b2: next("mlp_b2")?,
        })
    }
}

impl<T> ParamSet<T> {
    /// Parameters in canonical order with their stable names.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out: Vec<(String, &T)> = vec![
            ("patch_projection".into(), &self.patch_projection),
            ("class_tokens".into(), &self.class_tokens),
            ("positional_embedding".into(), &self.positional_embedding),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            for (field, t) in LAYER_FIELDS.iter().zip(layer.fields()) {
                out.push((format!("layers.{l}.{field}"), t));
            }
        }
        let optional = [
            ("cam_kernels", &self.cam_kernels),
            ("cam_bias", &self.cam_bias),
            ("head_weights", &self.head_weights),
            ("head_bias", &self.head_bias),
        ];
        for (name, t) in optional {
            if let Some(t) = t {
                out.push((name.into(), t));
            }
        }
        out
    }

    /// Mutable view in the same order as [`ParamSet::named`].
    pub fn values_mut(&mut self) -> Vec<&mut T> {
        let mut out: Vec<&mut T> = vec![
            &mut self.patch_projection,
            &mut self.class_tokens,
            &mut self.positional_embedding,
        ];
        for layer in &mut self.layers {
            out.extend(layer.fields_mut());
        }
        for t in [
            &mut self.cam_kernels,
            &mut self.cam_bias,
            &mut self.head_weights,
            &mut self.head_bias,
        ]
        .into_iter()
        .flatten()
        {
            out.push(t);
        }
        out
    }

    /// Rebuilds a set with the same layout, mapping every leaf.
    pub fn try_map<U>(&self, mut f: impl FnMut(&str, &T) -> Result<U>) -> Result<ParamSet<U>> {
        let mut named = self.named().into_iter();
        let mut next = |expect: &str| -> Result<U> {
            let (name, t) = named.next().expect("layout walk out of sync");
            debug_assert!(name.ends_with(expect));
            f(&name, t)
        };
        let patch_projection = next("patch_projection")?;
        let class_tokens = next("class_tokens")?;
        let positional_embedding = next("positional_embedding")?;
        let layers = (0..self.layers.len())
            .map(|_| LayerParams::from_fields(&mut next))
            .collect::<Result<_>>()?;
        let cam_kernels = self.cam_kernels.as_ref().map(|_| next("cam_kernels")).transpose()?;
        let cam_bias = self.cam_bias.as_ref().map(|_| next("cam_bias")).transpose()?;
        let head_weights = self.head_weights.as_ref().map(|_| next("head_weights")).transpose()?;
        let head_bias = self.head_bias.as_ref().map(|_| next("head_bias")).transpose()?;
        Ok(ParamSet {
            patch_projection,
            class_tokens,
            positional_embedding,
            layers,
            cam_kernels,
            cam_bias,
            head_weights,
            head_bias,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ParamSet<U> {
        self.try_map(|n, t| Ok(f(n, t))).expect("infallible map")
    }

    pub fn len(&self) -> usize {
        self.named().len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Whether AdamW weight decay applies to the parameter with this name.
/// Matrices and kernels decay; biases, norm affines and embeddings do not.
pub fn decays(name: &str) -> bool {
    let leaf = name.rsplit('.').next().unwrap_or(name);
    matches!(
        leaf,
        "patch_projection" | "wq" | "wk" | "wv" | "wo" | "mlp_w1" | "mlp_w2" | "cam_kernels" | "head_weights"
    )
}

/// Expected shape of every parameter for `config`, in canonical order.
pub fn expected_shapes(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    ModelParameters::zeros(config)
        .named()
        .into_iter()
        .map(|(n, t)| (n, t.shape().to_vec()))
        .collect()
}

impl ModelParameters {
    /// All-zero parameters with the layout implied by `config`
    /// (norm scales are zero too).
    pub fn zeros(config: &ModelConfig) -> Self {
        let (c, d, t) = (config.num_classes, config.embed_dim, config.num_tokens());
        let hidden = config.mlp_hidden();
        let z = |s: &[usize]| Tensor::zeros(s);
        let layer = || LayerParams {
            norm1_gamma: z(&[d]),
            norm1_beta: z(&[d]),
            wq: z(&[d, d]),
            bq: z(&[d]),
            wk: z(&[d, d]),
            bk: z(&[d]),
            wv: z(&[d, d]),
            bv: z(&[d]),
            wo: z(&[d, d]),
            bo: z(&[d]),
            norm2_gamma: z(&[d]),
            norm2_beta: z(&[d]),
            mlp_w1: z(&[d, hidden]),
            mlp_b1: z(&[hidden]),
            mlp_w2: z(&[hidden, d]),
            mlp_b2: z(&[d]),
        };
        let v2 = config.variant == Variant::V2;
        let fc = config.head_mode == HeadMode::FullyConnected;
        Self {
            patch_projection: z(&[config.patch_dim(), d]),
            class_tokens: z(&[c, d]),
            positional_embedding: z(&[t, d]),
            layers: (0..config.num_layers).map(|_| layer()).collect(),
            cam_kernels: v2.then(|| z(&[c, 3, 3, d])),
            cam_bias: v2.then(|| z(&[c])),
            head_weights: fc.then(|| z(&[c * d, c])),
            head_bias: fc.then(|| z(&[c])),
        }
    }

    /// Truncated-normal (σ = 0.02, cut at 2σ) weights and tokens, zero biases,
    /// unit norm scales.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.02).expect("valid std");
        let mut params = Self::zeros(config);
        // `named` and `values_mut` share one order; names decide the rule.
        let names: Vec<String> = params.named().into_iter().map(|(n, _)| n).collect();
        for (name, t) in names.iter().zip(params.values_mut()) {
            let leaf = name.rsplit('.').next().unwrap_or(name);
            match leaf {
                "norm1_gamma" | "norm2_gamma" => t.data_mut().fill(1.0),
                "bq" | "bk" | "bv" | "bo" | "mlp_b1" | "mlp_b2" | "norm1_beta" | "norm2_beta" | "cam_bias"
                | "head_bias" => {}
                _ => {
                    for v in t.data_mut() {
                        *v = truncated(&normal, &mut rng);
                    }
                }
            }
        }
        Ok(params)
    }

    /// Checks every tensor against the layout implied by `config`.
    pub fn check_layout(&self, config: &ModelConfig) -> Result<()> {
        let expected = expected_shapes(config);
        let actual = self.named();
        if expected.len() != actual.len() {
            return Err(MctError::Config(format!(
                "parameter count {} does not match config ({} expected)",
                actual.len(),
                expected.len()
            )));
        }
        for ((en, es), (an, at)) in expected.iter().zip(actual) {
            if *en != an || es.as_slice() != at.shape() {
                return Err(MctError::Config(format!(
                    "parameter `{an}` {:?} does not match config (`{en}` {es:?})",
                    at.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn num_scalars(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

fn truncated(normal: &Normal<f64>, rng: &mut impl Rng) -> f64 {
    loop {
        let v = normal.sample(rng);
        if v.abs() <= 0.04 {
            return v;
        }
    }
}
