//! Anatomical/domain encoders, segmentor, generator and the parameter bundle.
//!
//! Encoders are stacks of `[3x3 stride-2 conv, ReLU, 3x3 conv, ReLU]` stages.
//! The segmentor and generator are mirrored decoders of
//! `[2x nearest upsample, 3x3 conv, ReLU]` stages followed by a 3x3 conv to
//! one channel and a sigmoid. The generator consumes the channel-wise
//! concatenation of an anatomical and a domain feature map.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use safetensors::tensor::{Dtype as StDtype, SafeTensors, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::mine::MineNetwork;
use crate::nn::{hash_params, upsample2x_cbhw, Conv3x3, Param};
use crate::seed::derived_rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub resolution: usize,
    /// Output channels of each anatomical encoder stage.
    pub anatomy_channels: Vec<usize>,
    /// Output channels of each domain encoder stage.
    pub domain_channels: Vec<usize>,
    /// Output channels of each decoder stage (segmentor and generator).
    pub decoder_channels: Vec<usize>,
    pub mine_hidden: usize,
    pub mine_hidden_layers: usize,
    /// Pool the domain features to a vector and broadcast it inside the generator.
    pub pool_domain_features: bool,
    /// Feed intermediate anatomical encoder activations to the segmentor.
    pub segmentor_skips: bool,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            resolution: 256,
            anatomy_channels: vec![32, 64, 128, 256],
            domain_channels: vec![32, 64, 128, 256],
            decoder_channels: vec![128, 64, 32, 16],
            mine_hidden: 128,
            mine_hidden_layers: 2,
            pool_domain_features: false,
            segmentor_skips: false,
        }
    }
}

impl NetworkConfig {
    /// Small configuration for 64x64 inputs.
    pub fn small(resolution: usize) -> Self {
        Self {
            resolution,
            anatomy_channels: vec![16, 32, 64],
            domain_channels: vec![8, 16, 16],
            decoder_channels: vec![32, 16, 8],
            ..Self::default()
        }
    }

    pub fn stages(&self) -> usize {
        self.anatomy_channels.len()
    }

    /// Spatial side of the encoder outputs.
    pub fn feature_side(&self) -> usize {
        self.resolution >> self.stages()
    }

    pub fn anatomy_feature_channels(&self) -> usize {
        *self.anatomy_channels.last().unwrap_or(&0)
    }

    pub fn domain_feature_channels(&self) -> usize {
        *self.domain_channels.last().unwrap_or(&0)
    }

    pub fn validate(&self) -> Result<()> {
        let stages = self.stages();
        if stages == 0 {
            return Err(Error::config("network.anatomy_channels", "needs at least one stage"));
        }
        if self.domain_channels.len() != stages {
            return Err(Error::config(
                "network.domain_channels",
                format!("needs {stages} stages to match anatomy_channels"),
            ));
        }
        if self.decoder_channels.len() != stages {
            return Err(Error::config(
                "network.decoder_channels",
                format!("needs {stages} stages to match anatomy_channels"),
            ));
        }
        for (key, list) in [
            ("network.anatomy_channels", &self.anatomy_channels),
            ("network.domain_channels", &self.domain_channels),
            ("network.decoder_channels", &self.decoder_channels),
        ] {
            if list.contains(&0) {
                return Err(Error::config(key, "channel counts must be positive"));
            }
        }
        if self.resolution == 0 || self.resolution % (1 << stages) != 0 {
            return Err(Error::config(
                "network.resolution",
                format!("must be a positive multiple of {}", 1 << stages),
            ));
        }
        if self.mine_hidden == 0 {
            return Err(Error::config("network.mine_hidden", "must be positive"));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    AnatomyEncoder,
    DomainEncoder,
    Segmentor,
    Generator,
    Mine,
}

impl Component {
    pub const ALL: [Component; 5] = [
        Component::AnatomyEncoder,
        Component::DomainEncoder,
        Component::Segmentor,
        Component::Generator,
        Component::Mine,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Component::AnatomyEncoder => "anatomy_encoder",
            Component::DomainEncoder => "domain_encoder",
            Component::Segmentor => "segmentor",
            Component::Generator => "generator",
            Component::Mine => "mine",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureRole {
    Anatomical,
    Domain,
}

/// Encoder output in `(C, B, h, w)` layout, tagged with its role.
#[derive(Clone)]
pub struct FeatureMap {
    pub values: Tensor,
    pub role: FeatureRole,
    /// Intermediate activations, finest first; only filled for anatomical
    /// features when segmentor skips are enabled.
    pub skips: Vec<Tensor>,
}

impl FeatureMap {
    pub fn batch_size(&self) -> Result<usize> {
        Ok(self.values.dim(1)?)
    }

    /// Global average pool to `(B, C)` rows.
    pub fn pooled(&self) -> Result<Tensor> {
        Ok(self.values.mean(3)?.mean(2)?.t()?.contiguous()?)
    }

    pub fn detach(&self) -> FeatureMap {
        FeatureMap {
            values: self.values.detach(),
            role: self.role,
            skips: self.skips.iter().map(Tensor::detach).collect(),
        }
    }
}

#[derive(Clone)]
struct Encoder {
    stages: Vec<(Conv3x3, Conv3x3)>,
}

impl Encoder {
    fn new(channels: &[usize], seed: u64, label: &str) -> Result<Self> {
        let mut rng = derived_rng(label, seed, 0);
        let mut stages = Vec::with_capacity(channels.len());
        let mut in_c = 1;
        for &c in channels {
            stages.push((Conv3x3::new(in_c, c, 2, &mut rng)?, Conv3x3::new(c, c, 1, &mut rng)?));
            in_c = c;
        }
        Ok(Self { stages })
    }

    /// Returns the final activation and every stage output (finest first).
    fn forward(&self, x: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut h = x.clone();
        let mut outputs = Vec::with_capacity(self.stages.len());
        for (down, conv) in &self.stages {
            h = down.forward_relu(&h)?;
            h = conv.forward_relu(&h)?;
            outputs.push(h.clone());
        }
        Ok((h, outputs))
    }

    fn params(&self) -> Vec<Param> {
        self.stages
            .iter()
            .enumerate()
            .flat_map(|(i, (a, b))| {
                let mut p = a.params(&format!("stage{i}.down"));
                p.extend(b.params(&format!("stage{i}.conv")));
                p
            })
            .collect()
    }
}

#[derive(Clone)]
struct Decoder {
    stages: Vec<Conv3x3>,
    head: Conv3x3,
}

impl Decoder {
    /// `extra[i]` is the number of channels concatenated before stage `i`'s conv.
    fn new(in_channels: usize, channels: &[usize], extra: &[usize], seed: u64, label: &str) -> Result<Self> {
        let mut rng = derived_rng(label, seed, 0);
        let mut stages = Vec::with_capacity(channels.len());
        let mut in_c = in_channels;
        for (i, &c) in channels.iter().enumerate() {
            stages.push(Conv3x3::new(in_c + extra.get(i).copied().unwrap_or(0), c, 1, &mut rng)?);
            in_c = c;
        }
        let head = Conv3x3::new(in_c, 1, 1, &mut rng)?;
        Ok(Self { stages, head })
    }

    fn forward(&self, x: &Tensor, skips: &[Option<&Tensor>]) -> Result<Tensor> {
        let mut h = x.clone();
        for (i, conv) in self.stages.iter().enumerate() {
            h = upsample2x_cbhw(&h)?;
            if let Some(Some(skip)) = skips.get(i) {
                h = Tensor::cat(&[&h, *skip], 0)?;
            }
            h = conv.forward_relu(&h)?;
        }
        Ok(candle_nn::ops::sigmoid(&self.head.forward(&h)?)?)
    }

    fn params(&self) -> Vec<Param> {
        let mut p: Vec<Param> = self
            .stages
            .iter()
            .enumerate()
            .flat_map(|(i, c)| c.params(&format!("stage{i}")))
            .collect();
        p.extend(self.head.params("head"));
        p
    }
}

/// The five trainable components. Each owns its own, disjoint set of variables.
#[derive(Clone)]
pub struct ModelBundle {
    config: NetworkConfig,
    anatomy_encoder: Encoder,
    domain_encoder: Encoder,
    segmentor: Decoder,
    generator: Decoder,
    mine: MineNetwork,
}

/// Stacks images into a `(1, B, H, W)` tensor (equivalently `(B, 1, H, W)`).
pub fn images_to_tensor(images: &[&Image]) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::Shape("empty image batch".into()));
    };
    let (w, h) = (first.width(), first.height());
    let mut buf = Vec::with_capacity(images.len() * w * h);
    for img in images {
        if img.width() != w || img.height() != h {
            return Err(Error::Shape("images in a batch must share a size".into()));
        }
        buf.extend_from_slice(img.pixels());
    }
    Ok(Tensor::from_vec(buf, (1, images.len(), h, w), &Device::Cpu)?)
}

impl ModelBundle {
    /// Fresh weights; each component's initialization stream is derived from `seed`.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let stages = config.stages();
        let ca = config.anatomy_feature_channels();
        let cd = config.domain_feature_channels();
        let anatomy_encoder = Encoder::new(&config.anatomy_channels, seed, Component::AnatomyEncoder.as_str())?;
        let domain_encoder = Encoder::new(&config.domain_channels, seed, Component::DomainEncoder.as_str())?;
        let skip_channels: Vec<usize> = if config.segmentor_skips {
            (0..stages)
                .map(|i| if i + 1 < stages { config.anatomy_channels[stages - 2 - i] } else { 0 })
                .collect()
        } else {
            Vec::new()
        };
        let segmentor = Decoder::new(ca, &config.decoder_channels, &skip_channels, seed, Component::Segmentor.as_str())?;
        let generator = Decoder::new(ca + cd, &config.decoder_channels, &[], seed, Component::Generator.as_str())?;
        let mut mine_rng = derived_rng(Component::Mine.as_str(), seed, 0);
        let mine = MineNetwork::new(ca, cd, config.mine_hidden, config.mine_hidden_layers, DType::F32, &mut mine_rng)?;
        Ok(Self {
            config,
            anatomy_encoder,
            domain_encoder,
            segmentor,
            generator,
            mine,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn mine(&self) -> &MineNetwork {
        &self.mine
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        let (c, _, h, w) = x.dims4()?;
        let r = self.config.resolution;
        if c != 1 || h != r || w != r {
            return Err(Error::Shape(format!(
                "expected (1, B, {r}, {r}) input, got {:?}",
                x.dims()
            )));
        }
        Ok(())
    }

    /// Anatomical features of a `(1, B, H, W)` image batch.
    pub fn encode_anatomy(&self, x: &Tensor) -> Result<FeatureMap> {
        self.check_input(x)?;
        let (values, mut outputs) = self.anatomy_encoder.forward(x)?;
        let skips = if self.config.segmentor_skips {
            outputs.pop();
            outputs
        } else {
            Vec::new()
        };
        Ok(FeatureMap {
            values,
            role: FeatureRole::Anatomical,
            skips,
        })
    }

    /// Domain features of a `(1, B, H, W)` image batch.
    pub fn encode_domain(&self, x: &Tensor) -> Result<FeatureMap> {
        self.check_input(x)?;
        let (values, _) = self.domain_encoder.forward(x)?;
        Ok(FeatureMap {
            values,
            role: FeatureRole::Domain,
            skips: Vec::new(),
        })
    }

    /// Per-pixel foreground probabilities `(1, B, H, W)` from anatomical features only.
    pub fn segment(&self, fa: &FeatureMap) -> Result<Tensor> {
        if fa.role != FeatureRole::Anatomical {
            return Err(Error::Contract("segmentor accepts anatomical features only".into()));
        }
        let skips: Vec<Option<&Tensor>> = fa.skips.iter().rev().map(Some).collect();
        self.segmentor.forward(&fa.values, &skips)
    }

    /// Reconstruction `(1, B, H, W)` from one anatomical and one domain feature map.
    pub fn generate(&self, fa: &FeatureMap, fd: &FeatureMap) -> Result<Tensor> {
        if fa.role != FeatureRole::Anatomical || fd.role != FeatureRole::Domain {
            return Err(Error::Contract(
                "generator needs one anatomical and one domain feature map".into(),
            ));
        }
        let domain = if self.config.pool_domain_features {
            let (_, _, h, w) = fd.values.dims4()?;
            fd.values.mean_keepdim(3)?.mean_keepdim(2)?.repeat((1, 1, h, w))?
        } else {
            fd.values.clone()
        };
        let z = Tensor::cat(&[&fa.values, &domain], 0)?;
        self.generator.forward(&z, &[])
    }

    pub fn params(&self, component: Component) -> Vec<Param> {
        match component {
            Component::AnatomyEncoder => self.anatomy_encoder.params(),
            Component::DomainEncoder => self.domain_encoder.params(),
            Component::Segmentor => self.segmentor.params(),
            Component::Generator => self.generator.params(),
            Component::Mine => self.mine.params(),
        }
    }

    pub fn vars(&self, component: Component) -> Vec<Var> {
        self.params(component).into_iter().map(|p| p.var).collect()
    }

    pub fn param_hash(&self, component: Component) -> Result<String> {
        hash_params(&self.params(component))
    }

    pub fn param_hashes(&self) -> Result<BTreeMap<Component, String>> {
        Component::ALL
            .iter()
            .map(|&c| Ok((c, self.param_hash(c)?)))
            .collect()
    }

    /// Independent copy with freshly allocated variables.
    pub fn deep_clone(&self) -> Result<Self> {
        let copy = Self::new(self.config.clone(), 0)?;
        for c in Component::ALL {
            for (dst, src) in copy.params(c).iter().zip(self.params(c)) {
                dst.var.set(&src.var.as_tensor().copy()?)?;
            }
        }
        Ok(copy)
    }

    /// Writes all five components to a safetensors archive. Tensor names are
    /// `<component>/<param>`; metadata carries the network config and its hash.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::new();
        for c in Component::ALL {
            for p in self.params(c) {
                let t = p.var.as_tensor();
                let values: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
                let bytes = values.iter().flat_map(|v| v.to_le_bytes()).collect();
                buffers.push((format!("{c}/{}", p.name), t.dims().to_vec(), bytes));
            }
        }
        let views = buffers
            .iter()
            .map(|(name, shape, bytes)| {
                TensorView::new(StDtype::F32, shape.clone(), bytes)
                    .map(|v| (name.clone(), v))
                    .map_err(|e| Error::Checkpoint(e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mut metadata = HashMap::new();
        metadata.insert("network_config".to_string(), serde_json::to_string(&self.config)?);
        metadata.insert("config_hash".to_string(), self.config.hash());
        safetensors::serialize_to_file(views, Some(metadata), path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
    }

    /// Loads a checkpoint, verifying the stored config hash and that every
    /// parameter is present with the expected shape.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let (_, header) = SafeTensors::read_metadata(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let meta = header
            .metadata()
            .as_ref()
            .ok_or_else(|| Error::Checkpoint("checkpoint has no metadata".into()))?;
        let config_json = meta
            .get("network_config")
            .ok_or_else(|| Error::Checkpoint("checkpoint metadata lacks network_config".into()))?;
        let stored_hash = meta
            .get("config_hash")
            .ok_or_else(|| Error::Checkpoint("checkpoint metadata lacks config_hash".into()))?;
        let config: NetworkConfig = serde_json::from_str(config_json)?;
        if &config.hash() != stored_hash {
            return Err(Error::Checkpoint(format!(
                "config hash mismatch in {}: stored {stored_hash}, computed {}",
                path.display(),
                config.hash()
            )));
        }
        let tensors = SafeTensors::deserialize(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let bundle = Self::new(config, 0)?;
        let mut expected = 0;
        for c in Component::ALL {
            for p in bundle.params(c) {
                expected += 1;
                let name = format!("{c}/{}", p.name);
                let view = tensors
                    .tensor(&name)
                    .map_err(|_| Error::Checkpoint(format!("missing tensor {name}")))?;
                if view.dtype() != StDtype::F32 || view.shape() != p.var.dims() {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        view.shape(),
                        p.var.dims()
                    )));
                }
                let values: Vec<f32> = view
                    .data()
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                    .collect();
                p.var.set(&Tensor::from_vec(values, p.var.shape(), &Device::Cpu)?)?;
            }
        }
        if tensors.len() != expected {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, expected {expected}",
                tensors.len()
            )));
        }
        Ok(bundle)
    }

    /// Loads a checkpoint and additionally requires its config to equal `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &NetworkConfig) -> Result<Self> {
        let bundle = Self::load(path)?;
        if bundle.config.hash() != expected.hash() {
            return Err(Error::Checkpoint("checkpoint was trained with a different network config".into()));
        }
        Ok(bundle)
    }
}

/// Short identifier of a checkpoint file: first 16 hex digits of its SHA-256.
pub fn checkpoint_id(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes))[..16].to_string())
}
