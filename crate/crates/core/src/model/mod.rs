//! The fusion regressor: a ResNet-18 image branch with a three-layer linear
//! neck, a three-layer feature branch, and a four-layer head over the
//! concatenated embeddings.
//!
//! Parameter names follow the layer hierarchy, e.g. `layer3.0.down.weight`,
//! `head.fc4.bias`. Batchnorm running statistics live in a separate buffer map
//! and are not optimized.

mod checkpoint;
mod config;

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{BatchStats, Graph, NormMode, PoolKind, Real, Tensor, TensorError, Var};

pub use checkpoint::{
    decode as decode_checkpoint, encode as encode_checkpoint, load_checkpoint, save_checkpoint, Checkpoint,
    CheckpointMeta, FORMAT_VERSION, MAGIC,
};
pub use config::SarcNetConfig;

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("checkpoint io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("missing parameter `{0}`")]
    MissingParam(String),
    #[error("dimension error: expected {expected:?}, got {got:?}")]
    Dimension { expected: Vec<usize>, got: Vec<usize> },
}

pub type Result<T, E = ModelError> = std::result::Result<T, E>;

/// One convolution of the backbone, with its batchnorm.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvSpec {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Shortcut projection rather than a main-path convolution.
    pub projection: bool,
}

/// Backbone convolutions in forward order.
pub fn conv_specs(cfg: &SarcNetConfig) -> Vec<ConvSpec> {
    let conv = |name: String, in_ch, out_ch, kernel, stride, padding, projection| ConvSpec {
        name,
        in_ch,
        out_ch,
        kernel,
        stride,
        padding,
        projection,
    };
    let mut specs = vec![conv("stem".into(), 3, cfg.stage_widths[0], 7, 2, 3, false)];
    let mut prev = cfg.stage_widths[0];
    for (s, &w) in cfg.stage_widths.iter().enumerate() {
        for b in 0..2 {
            let stride = if s > 0 && b == 0 { 2 } else { 1 };
            let in_ch = if b == 0 { prev } else { w };
            let p = format!("layer{}.{b}", s + 1);
            specs.push(conv(format!("{p}.conv1"), in_ch, w, 3, stride, 1, false));
            specs.push(conv(format!("{p}.conv2"), w, w, 3, 1, 1, false));
            if stride != 1 || in_ch != w {
                specs.push(conv(format!("{p}.down"), in_ch, w, 1, stride, 0, true));
            }
        }
        prev = w;
    }
    specs
}

/// Convolution counts of the constructed backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BackboneDepth {
    /// Stem plus the two convolutions of each basic block.
    pub main_path_convs: usize,
    pub projection_convs: usize,
    /// Linear layers after global average pooling.
    pub linear_layers: usize,
}

impl BackboneDepth {
    pub fn of(cfg: &SarcNetConfig) -> Self {
        let specs = conv_specs(cfg);
        let projection_convs = specs.iter().filter(|s| s.projection).count();
        Self {
            main_path_convs: specs.len() - projection_convs,
            projection_convs,
            linear_layers: 3,
        }
    }

    pub fn total_convs(&self) -> usize {
        self.main_path_convs + self.projection_convs
    }

    /// Weighted layers on the main path up to the first classifier-position
    /// linear layer, the count behind the name "ResNet-18".
    pub fn resnet_depth(&self) -> usize {
        self.main_path_convs + 1
    }
}

#[derive(Debug, Clone, Copy)]
enum Init {
    Kaiming { fan_in: usize },
    Zeros,
    Ones,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

fn linear_stack(prefix: &str, widths: &[usize], out: &mut Vec<ParamSpec>) {
    for (i, pair) in widths.windows(2).enumerate() {
        out.push(ParamSpec {
            name: format!("{prefix}.fc{}.weight", i + 1),
            shape: vec![pair[1], pair[0]],
            init: Init::Kaiming { fan_in: pair[0] },
        });
        out.push(ParamSpec {
            name: format!("{prefix}.fc{}.bias", i + 1),
            shape: vec![pair[1]],
            init: Init::Zeros,
        });
    }
}

fn feature_widths(cfg: &SarcNetConfig) -> [usize; 4] {
    [
        cfg.feature_dim(),
        cfg.feature_hidden[0],
        cfg.feature_hidden[1],
        cfg.embed_dim,
    ]
}

fn head_widths(cfg: &SarcNetConfig) -> [usize; 5] {
    let h = cfg.head_widths;
    [2 * cfg.embed_dim, h[0], h[1], h[2], h[3]]
}

fn param_specs(cfg: &SarcNetConfig) -> Vec<ParamSpec> {
    let mut out = Vec::new();
    for c in conv_specs(cfg) {
        out.push(ParamSpec {
            name: format!("{}.weight", c.name),
            shape: vec![c.out_ch, c.in_ch, c.kernel, c.kernel],
            init: Init::Kaiming {
                fan_in: c.in_ch * c.kernel * c.kernel,
            },
        });
        out.push(ParamSpec {
            name: format!("{}.bn.gamma", c.name),
            shape: vec![c.out_ch],
            init: Init::Ones,
        });
        out.push(ParamSpec {
            name: format!("{}.bn.beta", c.name),
            shape: vec![c.out_ch],
            init: Init::Zeros,
        });
    }
    linear_stack("backbone", &cfg.backbone_linear_widths(), &mut out);
    linear_stack("feature", &feature_widths(cfg), &mut out);
    linear_stack("head", &head_widths(cfg), &mut out);
    out
}

fn buffer_specs(cfg: &SarcNetConfig) -> Vec<ParamSpec> {
    conv_specs(cfg)
        .into_iter()
        .flat_map(|c| {
            [
                ParamSpec {
                    name: format!("{}.bn.running_mean", c.name),
                    shape: vec![c.out_ch],
                    init: Init::Zeros,
                },
                ParamSpec {
                    name: format!("{}.bn.running_var", c.name),
                    shape: vec![c.out_ch],
                    init: Init::Ones,
                },
            ]
        })
        .collect()
}

/// Trainable parameter count as a function of the config.
pub fn parameter_count(cfg: &SarcNetConfig) -> usize {
    param_specs(cfg).iter().map(|s| s.shape.iter().product::<usize>()).sum()
}

/// All weights and batchnorm buffers of one network.
#[derive(Debug, Clone, PartialEq)]
pub struct SarcNetParams<T: Real = f32> {
    pub config: SarcNetConfig,
    pub weights: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> SarcNetParams<T> {
    /// Kaiming-uniform (fan-in, ReLU gain) weights, zero biases, unit gammas.
    pub fn init(config: &SarcNetConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let make = |spec: &ParamSpec, rng: &mut ChaCha8Rng| -> Tensor<T> {
            let n: usize = spec.shape.iter().product();
            let data = match spec.init {
                Init::Zeros => vec![T::zero(); n],
                Init::Ones => vec![T::one(); n],
                Init::Kaiming { fan_in } => {
                    let bound = (6.0 / fan_in as f64).sqrt() as f32;
                    (0..n)
                        .map(|_| T::lit(rng.random_range(-bound..=bound) as f64))
                        .collect()
                }
            };
            Tensor::new(spec.shape.clone(), data).expect("spec shapes are positive")
        };
        let weights = param_specs(config)
            .iter()
            .map(|s| (s.name.clone(), make(s, &mut rng)))
            .collect();
        let buffers = buffer_specs(config)
            .iter()
            .map(|s| (s.name.clone(), make(s, &mut rng)))
            .collect();
        Ok(Self {
            config: config.clone(),
            weights,
            buffers,
        })
    }

    pub fn parameter_count(&self) -> usize {
        self.weights.values().map(|t| t.len()).sum()
    }

    pub fn weight(&self, name: &str) -> Result<&Tensor<T>> {
        self.weights
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn cast<U: Real>(&self) -> SarcNetParams<U> {
        SarcNetParams {
            config: self.config.clone(),
            weights: self.weights.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.weights
            .values()
            .chain(self.buffers.values())
            .all(|t| t.is_finite())
    }

    /// Checks that names and shapes are exactly those implied by the config.
    pub fn validate_layout(&self) -> Result<()> {
        let check = |specs: Vec<ParamSpec>, map: &BTreeMap<String, Tensor<T>>| -> Result<()> {
            if specs.len() != map.len() {
                return Err(ModelError::Checkpoint(format!(
                    "expected {} tensors, found {}",
                    specs.len(),
                    map.len()
                )));
            }
            for s in specs {
                let t = map.get(&s.name).ok_or(ModelError::MissingParam(s.name.clone()))?;
                if t.shape() != s.shape.as_slice() {
                    return Err(ModelError::Dimension {
                        expected: s.shape,
                        got: t.shape().to_vec(),
                    });
                }
            }
            Ok(())
        };
        check(param_specs(&self.config), &self.weights)?;
        check(buffer_specs(&self.config), &self.buffers)
    }

    /// Copies every tensor of `source` whose name and shape match this
    /// network. Returns the number of tensors copied.
    pub fn import_matching(&mut self, source: &SarcNetParams<T>) -> usize {
        let mut copied = 0;
        for (name, t) in self.weights.iter_mut().chain(self.buffers.iter_mut()) {
            let src = source.weights.get(name).or_else(|| source.buffers.get(name));
            if let Some(src) = src.filter(|s| s.shape() == t.shape()) {
                *t = src.clone();
                copied += 1;
            }
        }
        copied
    }

    /// Records every weight as a leaf on `g`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Bound {
        let vars = self
            .weights
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Exponential moving average update of batchnorm running statistics.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats<T>)]) -> Result<()> {
        let m = T::lit(BN_MOMENTUM);
        for (prefix, s) in stats {
            for (suffix, batch) in [("running_mean", &s.mean), ("running_var", &s.var)] {
                let key = format!("{prefix}.{suffix}");
                let t = self.buffers.get_mut(&key).ok_or(ModelError::MissingParam(key))?;
                for (r, &b) in t.data_mut().iter_mut().zip(batch) {
                    *r = (T::one() - m) * *r + m * b;
                }
            }
        }
        Ok(())
    }
}

/// Graph handles of bound weights.
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Forward-pass context: the network, its graph handles and the norm mode.
pub struct Forward<'a, T: Real> {
    pub params: &'a SarcNetParams<T>,
    pub bound: &'a Bound,
    pub mode: NormMode,
    /// Batch statistics collected in train mode, keyed by batchnorm prefix.
    pub stats: Vec<(String, BatchStats<T>)>,
    /// Output of each residual stage, in order.
    pub stage_maps: Vec<Var>,
}

/// Outputs of [`Forward::sarcnet`].
#[derive(Debug, Clone, Copy)]
pub struct SarcNetOutput {
    /// `[B, 1]` scores.
    pub score: Var,
    /// Output of the final residual stage, `[B, w3, h, w]`.
    pub feature_map: Var,
    pub image_embedding: Var,
    pub feature_embedding: Var,
}

impl<'a, T: Real> Forward<'a, T> {
    pub fn new(params: &'a SarcNetParams<T>, bound: &'a Bound, mode: NormMode) -> Self {
        Self {
            params,
            bound,
            mode,
            stats: Vec::new(),
            stage_maps: Vec::new(),
        }
    }

    fn conv_bn(&mut self, g: &mut Graph<T>, x: Var, spec: &ConvSpec) -> Result<Var> {
        let w = self.bound.get(&format!("{}.weight", spec.name))?;
        let y = g.conv2d(x, w, None, spec.stride, spec.padding)?;
        let prefix = format!("{}.bn", spec.name);
        let gamma = self.bound.get(&format!("{prefix}.gamma"))?;
        let beta = self.bound.get(&format!("{prefix}.beta"))?;
        let running = match self.mode {
            NormMode::Eval => {
                let get = |s: &str| {
                    let key = format!("{prefix}.{s}");
                    self.params
                        .buffers
                        .get(&key)
                        .map(|t| t.data())
                        .ok_or(ModelError::MissingParam(key))
                };
                Some((get("running_mean")?, get("running_var")?))
            }
            NormMode::Train => None,
        };
        let (out, stats) = g.batchnorm2d(y, gamma, beta, running, self.mode)?;
        if let Some(stats) = stats {
            self.stats.push((prefix, stats));
        }
        Ok(out)
    }

    fn linear_stack(&self, g: &mut Graph<T>, prefix: &str, mut x: Var, layers: usize) -> Result<Var> {
        for i in 1..=layers {
            let w = self.bound.get(&format!("{prefix}.fc{i}.weight"))?;
            let b = self.bound.get(&format!("{prefix}.fc{i}.bias"))?;
            x = g.linear(x, w, b)?;
            if i < layers {
                x = g.relu(x);
            }
        }
        Ok(x)
    }

    /// Image branch: `[B,3,S,S]` → (`[B,E]` embedding, final stage map).
    pub fn backbone(&mut self, g: &mut Graph<T>, images: Var) -> Result<(Var, Var)> {
        let cfg = &self.params.config;
        let s = cfg.input_size;
        let shape = g.shape(images);
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(ModelError::Dimension {
                expected: vec![shape.first().copied().unwrap_or(0), 3, s, s],
                got: shape.to_vec(),
            });
        }
        let specs = conv_specs(cfg);
        let mut x = self.conv_bn(g, images, &specs[0])?;
        x = g.relu(x);
        x = g.pool2d(
            x,
            PoolKind::Max {
                window: 3,
                stride: 2,
                padding: 1,
            },
        )?;
        let mut i = 1;
        let mut block = 0;
        while i < specs.len() {
            let (c1, c2) = (&specs[i], &specs[i + 1]);
            let down = specs.get(i + 2).filter(|s| s.projection);
            let mut out = self.conv_bn(g, x, c1)?;
            out = g.relu(out);
            out = self.conv_bn(g, out, c2)?;
            let shortcut = match down {
                Some(d) => self.conv_bn(g, x, d)?,
                None => x,
            };
            out = g.add(out, shortcut)?;
            x = g.relu(out);
            i += if down.is_some() { 3 } else { 2 };
            block += 1;
            if block % 2 == 0 {
                self.stage_maps.push(x);
            }
        }
        let fmap = x;
        let pooled = g.pool2d(fmap, PoolKind::GlobalAvg)?;
        let flat = g.flatten(pooled)?;
        let emb = self.linear_stack(g, "backbone", flat, 3)?;
        Ok((emb, fmap))
    }

    /// Feature branch: `[B,F]` → `[B,E]`.
    pub fn feature_branch(&self, g: &mut Graph<T>, features: Var) -> Result<Var> {
        let f = self.params.config.feature_dim();
        let shape = g.shape(features);
        if shape.len() != 2 || shape[1] != f {
            return Err(ModelError::Dimension {
                expected: vec![shape.first().copied().unwrap_or(0), f],
                got: shape.to_vec(),
            });
        }
        self.linear_stack(g, "feature", features, 3)
    }

    /// Concatenates `[image, feature]` embeddings and applies the head.
    pub fn fuse_and_head(&self, g: &mut Graph<T>, img_emb: Var, feat_emb: Var) -> Result<Var> {
        let e = self.params.config.embed_dim;
        for v in [img_emb, feat_emb] {
            if g.shape(v).len() != 2 || g.shape(v)[1] != e {
                return Err(ModelError::Dimension {
                    expected: vec![g.shape(v)[0], e],
                    got: g.shape(v).to_vec(),
                });
            }
        }
        let joint = g.concat(img_emb, feat_emb)?;
        self.linear_stack(g, "head", joint, 4)
    }

    pub fn sarcnet(&mut self, g: &mut Graph<T>, images: Var, features: Var) -> Result<SarcNetOutput> {
        let (bi, bf) = (g.shape(images)[0], g.shape(features)[0]);
        if bi != bf {
            return Err(ModelError::Dimension {
                expected: vec![bi],
                got: vec![bf],
            });
        }
        let (image_embedding, feature_map) = self.backbone(g, images)?;
        let feature_embedding = self.feature_branch(g, features)?;
        let score = self.fuse_and_head(g, image_embedding, feature_embedding)?;
        Ok(SarcNetOutput {
            score,
            feature_map,
            image_embedding,
            feature_embedding,
        })
    }
}

/// Eval-mode scores for a batch, without gradient tracking.
pub fn predict<T: Real>(params: &SarcNetParams<T>, images: Tensor<T>, features: Tensor<T>) -> Result<Vec<T>> {
    let mut g = Graph::new();
    let bound = params.bind(&mut g, false);
    let x = g.constant(images);
    let f = g.constant(features);
    let mut fwd = Forward::new(params, &bound, NormMode::Eval);
    let out = fwd.sarcnet(&mut g, x, f)?;
    Ok(g.value(out.score).data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> SarcNetConfig {
        SarcNetConfig {
            input_size: 32,
            stage_widths: [4, 4, 8, 8],
            embed_dim: 8,
            feature_hidden: [6, 6],
            head_widths: [8, 4, 4, 1],
            ..SarcNetConfig::default()
        }
    }

    #[test]
    fn resnet18_topology() {
        let depth = BackboneDepth::of(&SarcNetConfig::default());
        assert_eq!(depth.main_path_convs, 17);
        assert_eq!(depth.projection_convs, 3);
        assert_eq!(depth.total_convs(), 20);
        assert_eq!(depth.linear_layers, 3);
        assert_eq!(depth.resnet_depth(), 18);
    }

    #[test]
    fn parameter_count_formula() {
        // conv k·c·kh·kw + bn 2k per conv, then (in+1)·out per linear layer
        let cfg = SarcNetConfig::default();
        let conv_bn = |i: usize, o: usize, k: usize| o * i * k * k + 2 * o;
        let w = cfg.stage_widths;
        let mut n = conv_bn(3, w[0], 7);
        let mut prev = w[0];
        for &c in &w {
            n += conv_bn(prev, c, 3) + conv_bn(c, c, 3) + 2 * conv_bn(c, c, 3);
            if prev != c {
                n += conv_bn(prev, c, 1);
            }
            prev = c;
        }
        let lin = |ws: &[usize]| ws.windows(2).map(|p| (p[0] + 1) * p[1]).sum::<usize>();
        n += lin(&[512, 256, 64, 32]) + lin(&[11, 64, 64, 32]) + lin(&[64, 32, 16, 8, 1]);
        assert_eq!(parameter_count(&cfg), n);
        let params = SarcNetParams::<f32>::init(&cfg).unwrap();
        assert_eq!(params.parameter_count(), n);
        // the well-known ResNet-18 trunk (no fc) has 11,176,512 weights
        let trunk: usize = params
            .weights
            .iter()
            .filter(|(k, _)| !k.contains("fc"))
            .map(|(_, t)| t.len())
            .sum();
        assert_eq!(trunk, 11_176_512);
    }

    #[test]
    fn same_seed_same_params() {
        let a = SarcNetParams::<f32>::init(&tiny()).unwrap();
        let b = SarcNetParams::<f32>::init(&tiny()).unwrap();
        assert_eq!(a, b);
        let c = SarcNetParams::<f32>::init(&tiny().with_seed(1)).unwrap();
        assert_ne!(a, c);
        a.validate_layout().unwrap();
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = tiny();
        let params = SarcNetParams::<f32>::init(&cfg).unwrap();
        let img: Vec<f32> = (0..3 * 32 * 32).map(|i| ((i * 7) % 13) as f32 / 13.0 - 0.5).collect();
        let mut batch = img.clone();
        batch.extend(&img);
        let images = Tensor::new(vec![2, 3, 32, 32], batch).unwrap();
        let feats = Tensor::new(vec![2, 11], vec![0.3; 22]).unwrap();
        let a = predict(&params, images.clone(), feats.clone()).unwrap();
        let b = predict(&params, images, feats).unwrap();
        assert_eq!(a.len(), 2);
        assert_eq!(a, b);
        assert!((a[0] - a[1]).abs() < 1e-6);
    }

    #[test]
    fn wrong_input_size_is_rejected() {
        let params = SarcNetParams::<f32>::init(&tiny()).unwrap();
        let images = Tensor::zeros(vec![1, 3, 40, 40]);
        let feats = Tensor::zeros(vec![1, 11]);
        assert!(matches!(
            predict(&params, images, feats),
            Err(ModelError::Dimension { .. })
        ));
        let images = Tensor::zeros(vec![1, 3, 32, 32]);
        assert!(predict(&params, images, Tensor::zeros(vec![1, 5])).is_err());
    }

    #[test]
    fn branch_contracts() {
        let mut params = SarcNetParams::<f64>::init(&tiny()).unwrap();
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let fwd = Forward::new(&params, &bound, NormMode::Eval);
        let f = g.constant(Tensor::zeros(vec![3, 11]));
        let e = fwd.feature_branch(&mut g, f).unwrap();
        assert_eq!(g.shape(e), &[3, 8]);
        // zero biases and zero input give a zero embedding
        assert!(g.value(e).data().iter().all(|&v| v == 0.0));

        // swapped embeddings change the score
        let a = g.constant(Tensor::new(vec![1, 8], (0..8).map(|i| i as f64 * 0.3).collect()).unwrap());
        let b = g.constant(Tensor::new(vec![1, 8], (0..8).map(|i| 1.0 - i as f64 * 0.2).collect()).unwrap());
        let ab = fwd.fuse_and_head(&mut g, a, b).unwrap();
        let ba = fwd.fuse_and_head(&mut g, b, a).unwrap();
        assert_eq!(g.shape(ab), &[1, 1]);
        assert_ne!(g.value(ab).data(), g.value(ba).data());

        // zero head weights: the score is the output bias
        for (k, t) in params.weights.iter_mut() {
            if k.starts_with("head") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        params.weights.get_mut("head.fc4.bias").unwrap().data_mut()[0] = 2.5;
        let mut g = Graph::new();
        let bound = params.bind(&mut g, false);
        let fwd = Forward::new(&params, &bound, NormMode::Eval);
        let z = g.constant(Tensor::zeros(vec![2, 8]));
        let s = fwd.fuse_and_head(&mut g, z, z).unwrap();
        assert_eq!(g.value(s).data(), &[2.5, 2.5]);
    }

    #[test]
    fn running_stats_update() {
        let mut params = SarcNetParams::<f64>::init(&tiny()).unwrap();
        let stats = vec![(
            "stem.bn".to_string(),
            BatchStats {
                mean: vec![1.0; 4],
                var: vec![3.0; 4],
            },
        )];
        params.update_running_stats(&stats).unwrap();
        assert_eq!(params.buffers["stem.bn.running_mean"].data(), &[0.1; 4]);
        assert!((params.buffers["stem.bn.running_var"].data()[0] - 1.2).abs() < 1e-12);
    }

    #[test]
    fn import_copies_matching_tensors() {
        let src = SarcNetParams::<f32>::init(&tiny().with_seed(5)).unwrap();
        let mut dst = SarcNetParams::<f32>::init(&tiny().with_protocol(crate::features::Protocol::P1)).unwrap();
        let n = dst.import_matching(&src);
        // everything except the first feature-branch weight matrix
        assert_eq!(n, dst.weights.len() + dst.buffers.len() - 1);
        assert_eq!(dst.weights["stem.weight"], src.weights["stem.weight"]);
    }
}
