//! ImageNet backbones (ResNet, EfficientNet, ViT) on the candle runtime,
//! plus catalogue entries for architectures this build cannot execute.
//!
//! Pretrained weights are read from `$REEFCOND_WEIGHTS_DIR/<name>.safetensors`
//! using torchvision tensor names for ResNet and EfficientNet and Hugging
//! Face names for ViT. Any classifier tensors in the bundle are ignored; the
//! 8-logit head is always freshly initialized from the seed.
//!
//! Batch-norm layers run on their stored statistics in both training and
//! inference; every other parameter is fine-tuned.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use candle_core::{DType, Device, Module, Tensor, Var};
use candle_nn::{Optimizer, ParamsAdamW, VarBuilder, VarMap};
use candle_transformers::models::{efficientnet, vit};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
mod resnet;

use reefcond::train::{
    bce_multilabel_loss_grad, AdamWConfig, BackboneProvider, BackboneRegistry, BackboneSpec, BuildOptions,
    ImageBatch, Network, TrainError, WEIGHTS_DIR_ENV,
};

const IMAGENET_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f32; 3] = [0.229, 0.224, 0.225];
/// Class count of the ImageNet configuration the architectures are usually quoted at.
pub const IMAGENET_CLASSES: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Arch {
    ResNet(u32),
    EfficientNet(u32),
    VitB16,
}

impl Arch {
    fn head_prefix(self) -> &'static str {
        match self {
            Arch::ResNet(_) => "fc.",
            Arch::EfficientNet(_) => "classifier.1.",
            Arch::VitB16 => "classifier.",
        }
    }

    fn fixed_side(self) -> Option<u32> {
        matches!(self, Arch::VitB16).then_some(224)
    }
}

/// One catalogue entry.
#[derive(Debug, Clone, Copy)]
pub struct BackboneInfo {
    pub name: &'static str,
    pub native_resolution: u32,
    arch: Option<Arch>,
}

impl BackboneInfo {
    /// Whether this build can construct and train the architecture.
    pub fn runnable(&self) -> bool {
        self.arch.is_some()
    }
}

macro_rules! entry {
    ($name:expr, $side:expr, $arch:expr) => {
        BackboneInfo {
            name: $name,
            native_resolution: $side,
            arch: $arch,
        }
    };
}

pub const CATALOG: &[BackboneInfo] = &[
    entry!("resnet18", 224, Some(Arch::ResNet(18))),
    entry!("resnet34", 224, Some(Arch::ResNet(34))),
    entry!("resnet50", 224, Some(Arch::ResNet(50))),
    entry!("resnet101", 224, Some(Arch::ResNet(101))),
    entry!("resnet152", 224, Some(Arch::ResNet(152))),
    entry!("efficientnet_b4", 380, Some(Arch::EfficientNet(4))),
    entry!("efficientnet_b5", 456, Some(Arch::EfficientNet(5))),
    entry!("efficientnet_b6", 528, Some(Arch::EfficientNet(6))),
    entry!("efficientnet_b7", 600, Some(Arch::EfficientNet(7))),
    entry!("vit_b_16", 224, Some(Arch::VitB16)),
    entry!("vgg13_bn", 224, None),
    entry!("vgg16_bn", 224, None),
    entry!("vgg19_bn", 224, None),
    entry!("densenet121", 224, None),
    entry!("densenet161", 224, None),
    entry!("densenet201", 224, None),
    entry!("inception_v3", 299, None),
    entry!("swin_t", 224, None),
    entry!("swin_s", 224, None),
    entry!("swin_b", 224, None),
];

fn normalize(name: &str) -> String {
    name.chars()
        .filter(|c| c.is_ascii_alphanumeric())
        .map(|c| c.to_ascii_lowercase())
        .collect()
}

/// Looks a backbone up by name, ignoring case and punctuation
/// (`ResNet-50`, `resnet_50` and `resnet50` are the same entry).
pub fn lookup(name: &str) -> Option<&'static BackboneInfo> {
    let key = normalize(name);
    let alias = match key.as_str() {
        "vitbase16" | "vitb16" | "vit16" => "vitb16",
        "swintransformertiny" => "swint",
        "swintransformersmall" => "swins",
        "swintransformerbase" => "swinb",
        k => k,
    };
    let alias = alias.replace("wbn", "bn");
    CATALOG.iter().find(|b| normalize(b.name) == alias)
}

fn backend(e: candle_core::Error) -> TrainError {
    TrainError::Backend(e.to_string())
}

enum Model {
    ResNet(resnet::ResNet),
    Efficient(efficientnet::EfficientNet),
    Vit(vit::Model),
}

impl Model {
    fn build(arch: Arch, classes: usize, vb: VarBuilder<'static>) -> candle_core::Result<Self> {
        Ok(match arch {
            Arch::ResNet(d) => Model::ResNet(resnet::ResNet::new(d, classes, vb)?),
            Arch::EfficientNet(v) => {
                let cfg = match v {
                    4 => efficientnet::MBConvConfig::b4(),
                    5 => efficientnet::MBConvConfig::b5(),
                    6 => efficientnet::MBConvConfig::b6(),
                    7 => efficientnet::MBConvConfig::b7(),
                    _ => candle_core::bail!("no EfficientNet-B{v}"),
                };
                Model::Efficient(efficientnet::EfficientNet::new(vb, cfg, classes)?)
            }
            Arch::VitB16 => Model::Vit(vit::Model::new(&vit::Config::vit_base_patch16_224(), classes, vb)?),
        })
    }

    fn forward(&self, xs: &Tensor) -> candle_core::Result<Tensor> {
        match self {
            Model::ResNet(m) => m.forward(xs),
            Model::Efficient(m) => m.forward(xs),
            Model::Vit(m) => m.forward(xs),
        }
    }
}

fn is_trainable(name: &str) -> bool {
    !name.contains("running_")
}

fn trainable_count(map: &VarMap) -> u64 {
    let data = map.data().lock().expect("var map lock");
    data.iter()
        .filter(|(n, _)| is_trainable(n))
        .map(|(_, v)| v.elem_count() as u64)
        .sum()
}

/// Trainable parameters of the architecture with a `head_classes`-way
/// head, counted by constructing it. Batch-norm running statistics are
/// excluded. No weights are needed.
pub fn architecture_parameter_count(name: &str, head_classes: usize) -> Result<u64, TrainError> {
    let info = lookup(name).ok_or_else(|| unknown(name))?;
    let arch = info.arch.ok_or_else(|| TrainError::Unavailable(info.name.to_string()))?;
    let map = VarMap::new();
    let vb = VarBuilder::from_varmap(&map, DType::F32, &Device::Cpu);
    Model::build(arch, head_classes, vb).map_err(backend)?;
    Ok(trainable_count(&map))
}

/// (in_features, head parameters) of the classification head as built.
pub fn head_shape(name: &str, head_classes: usize) -> Result<(usize, u64), TrainError> {
    let info = lookup(name).ok_or_else(|| unknown(name))?;
    let arch = info.arch.ok_or_else(|| TrainError::Unavailable(info.name.to_string()))?;
    let map = VarMap::new();
    let vb = VarBuilder::from_varmap(&map, DType::F32, &Device::Cpu);
    Model::build(arch, head_classes, vb).map_err(backend)?;
    let data = map.data().lock().expect("var map lock");
    let head: Vec<(&String, &Var)> = data.iter().filter(|(n, _)| n.starts_with(arch.head_prefix())).collect();
    let in_features = head
        .iter()
        .find(|(n, _)| n.ends_with("weight"))
        .map(|(_, v)| v.dims()[1])
        .ok_or_else(|| TrainError::Backend(format!("{} has no head weight", info.name)))?;
    Ok((in_features, head.iter().map(|(_, v)| v.elem_count() as u64).sum()))
}

fn unknown(name: &str) -> TrainError {
    TrainError::UnknownBackbone {
        name: name.to_string(),
        known: CATALOG.iter().map(|b| b.name.to_string()).collect(),
    }
}

/// Seeded values for every variable. Matrices and kernels draw from
/// U(-1/√fan_in, 1/√fan_in); norm scales start at 1, running variances at
/// 1 and every other vector at 0.
fn seeded_init(shape: &[usize], name: &str, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n: usize = shape.iter().product();
    if shape.len() >= 2 {
        let fan_in: usize = shape[1..].iter().product();
        let bound = if name.contains("token") || name.contains("position") {
            0.02
        } else {
            1.0 / (fan_in.max(1) as f32).sqrt()
        };
        return (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    }
    let one = name.ends_with("running_var") || name.ends_with(".weight");
    vec![if one { 1.0 } else { 0.0 }; n]
}

fn head_init(shape: &[usize], rng: &mut ChaCha8Rng, fan_in: usize) -> Vec<f32> {
    let bound = 1.0 / (fan_in as f32).sqrt();
    (0..shape.iter().product::<usize>()).map(|_| rng.gen_range(-bound..=bound)).collect()
}

/// Where values for the variables come from.
enum Source<'a> {
    Seeded,
    /// Backbone from the bundle, head from the seed.
    Pretrained(&'a Path),
    /// Everything from a checkpoint written by `save_weights`.
    Checkpoint(&'a Path),
}

pub struct CandleNetwork {
    spec: BackboneSpec,
    classes: usize,
    side: u32,
    map: VarMap,
    model: Model,
    trainable: Vec<Var>,
    optimizer: Mutex<Option<candle_nn::AdamW>>,
    device: Device,
}

impl CandleNetwork {
    fn assemble(spec: BackboneSpec, arch: Arch, opts: &BuildOptions, source: Source<'_>) -> Result<Self, TrainError> {
        let device = Device::Cpu;
        let side = match arch.fixed_side() {
            Some(s) if s != opts.input_side => {
                return Err(TrainError::Resolution(format!(
                    "{} runs only at {s}×{s}, not {}",
                    spec.name, opts.input_side
                )))
            }
            _ => opts.input_side,
        };
        if side < 32 {
            return Err(TrainError::Resolution(format!("input side {side} is below 32")));
        }
        let map = VarMap::new();
        Model::build(arch, opts.classes, VarBuilder::from_varmap(&map, DType::F32, &device)).map_err(backend)?;

        let loaded: HashMap<String, Tensor> = match source {
            Source::Seeded => HashMap::new(),
            Source::Pretrained(p) | Source::Checkpoint(p) => {
                candle_core::safetensors::load(p, &device).map_err(|e| {
                    TrainError::Pretrained(format!("{}: {e}", p.display()))
                })?
            }
        };
        let from_file = |name: &str| match source {
            Source::Seeded => false,
            Source::Pretrained(_) => !name.starts_with(arch.head_prefix()),
            Source::Checkpoint(_) => true,
        };
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        {
            let data = map.data().lock().expect("var map lock");
            let mut names: Vec<&String> = data.keys().collect();
            names.sort();
            let head_fan_in = names
                .iter()
                .find(|n| n.starts_with(arch.head_prefix()) && n.ends_with("weight"))
                .map(|n| data[*n].dims()[1])
                .unwrap_or(1);
            for name in names {
                let var = &data[name];
                let dims = var.dims().to_vec();
                let value = if from_file(name) {
                    let t = loaded.get(name).ok_or_else(|| {
                        TrainError::Pretrained(format!("weight bundle lacks tensor `{name}`"))
                    })?;
                    if t.dims() != dims.as_slice() {
                        return Err(TrainError::Pretrained(format!(
                            "tensor `{name}` has shape {:?}, expected {dims:?}",
                            t.dims()
                        )));
                    }
                    t.to_dtype(DType::F32).map_err(backend)?
                } else {
                    let v = if name.starts_with(arch.head_prefix()) {
                        head_init(&dims, &mut rng, head_fan_in)
                    } else {
                        seeded_init(&dims, name, &mut rng)
                    };
                    Tensor::from_vec(v, dims.as_slice(), &device).map_err(backend)?
                };
                var.set(&value).map_err(backend)?;
            }
        }
        let vb = VarBuilder::from_varmap(&map, DType::F32, &device);
        let model = Model::build(arch, opts.classes, vb).map_err(backend)?;
        let trainable = {
            let data = map.data().lock().expect("var map lock");
            let mut named: Vec<(&String, &Var)> = data.iter().filter(|(n, _)| is_trainable(n)).collect();
            named.sort_by(|a, b| a.0.cmp(b.0));
            named.into_iter().map(|(_, v)| v.clone()).collect()
        };
        let spec = BackboneSpec {
            parameter_count: Some(trainable_count(&map)),
            ..spec
        };
        Ok(Self {
            spec,
            classes: opts.classes,
            side,
            map,
            model,
            trainable,
            optimizer: Mutex::new(None),
            device,
        })
    }

    fn input(&self, batch: &ImageBatch) -> Result<Tensor, TrainError> {
        if batch.side != self.side {
            return Err(TrainError::Resolution(format!(
                "batch tiles are {0}×{0}, network expects {1}×{1}",
                batch.side, self.side
            )));
        }
        let s = self.side as usize;
        let raw: Vec<f32> = batch.pixels.iter().map(|&p| p as f32 / 255.0).collect();
        let x = Tensor::from_vec(raw, (batch.len, s, s, 3), &self.device)
            .and_then(|t| t.permute((0, 3, 1, 2)))
            .map_err(backend)?;
        let mean = Tensor::new(&IMAGENET_MEAN, &self.device).and_then(|t| t.reshape((1, 3, 1, 1)));
        let std = Tensor::new(&IMAGENET_STD, &self.device).and_then(|t| t.reshape((1, 3, 1, 1)));
        x.broadcast_sub(&mean.map_err(backend)?)
            .and_then(|t| t.broadcast_div(&std?))
            .and_then(|t| t.contiguous())
            .map_err(backend)
    }

    fn forward(&self, batch: &ImageBatch) -> Result<Tensor, TrainError> {
        let x = self.input(batch)?;
        let logits = self.model.forward(&x).map_err(backend)?;
        if logits.dims() != [batch.len, self.classes] {
            return Err(TrainError::Shape(format!("logits shape {:?}", logits.dims())));
        }
        Ok(logits)
    }
}

impl Network for CandleNetwork {
    fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    fn classes(&self) -> usize {
        self.classes
    }

    fn input_side(&self) -> u32 {
        self.side
    }

    fn parameter_count(&self) -> u64 {
        self.spec.parameter_count.unwrap_or(0)
    }

    fn logits(&self, batch: &ImageBatch) -> Result<Vec<f32>, TrainError> {
        if batch.len == 0 {
            return Ok(Vec::new());
        }
        let z: Vec<f32> = self.forward(batch)?.flatten_all().and_then(|t| t.to_vec1()).map_err(backend)?;
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(TrainError::NonFinite(format!("logit {i} is {}", z[i])));
        }
        Ok(z)
    }

    fn train_step(&mut self, batch: &ImageBatch, targets: &[u8], opt: &AdamWConfig) -> Result<f64, TrainError> {
        let logits = self.forward(batch)?;
        let z: Vec<f64> = logits
            .flatten_all()
            .and_then(|t| t.to_vec1::<f32>())
            .map_err(backend)?
            .into_iter()
            .map(f64::from)
            .collect();
        let (loss, grad) = bce_multilabel_loss_grad(&z, targets, self.classes)?;
        let g: Vec<f32> = grad.iter().map(|&v| v as f32).collect();
        let g = Tensor::from_vec(g, (batch.len, self.classes), &self.device).map_err(backend)?;
        // d/dθ Σ logits·g equals the loss gradient because g is held constant
        let grads = logits
            .mul(&g)
            .and_then(|t| t.sum_all())
            .and_then(|t| t.backward())
            .map_err(backend)?;
        let params = ParamsAdamW {
            lr: opt.learning_rate,
            beta1: opt.beta1,
            beta2: opt.beta2,
            eps: opt.eps,
            weight_decay: opt.weight_decay,
        };
        let mut slot = self.optimizer.lock().expect("optimizer lock");
        let optimizer = match slot.as_mut() {
            Some(o) => {
                o.set_params(params);
                o
            }
            None => slot.insert(candle_nn::AdamW::new(self.trainable.clone(), params).map_err(backend)?),
        };
        optimizer.step(&grads).map_err(backend)?;
        Ok(loss)
    }

    fn save_weights(&self, path: &Path) -> Result<(), TrainError> {
        self.map
            .save(path)
            .map_err(|e| TrainError::Checkpoint(format!("{}: {e}", path.display())))
    }
}

/// Serves every [`CATALOG`] entry; entries without a runtime are listed
/// but refuse to build.
pub struct CandleProvider;

impl CandleProvider {
    fn resolve(spec: &BackboneSpec) -> Result<(&'static BackboneInfo, Arch), TrainError> {
        let info = lookup(&spec.name).ok_or_else(|| unknown(&spec.name))?;
        let arch = info.arch.ok_or_else(|| TrainError::Unavailable(info.name.to_string()))?;
        Ok((info, arch))
    }

    fn weights_path(info: &BackboneInfo, opts: &BuildOptions) -> Result<PathBuf, TrainError> {
        let dir = opts.weights_dir.as_ref().ok_or_else(|| {
            TrainError::Pretrained(format!(
                "{} is pretrained but {WEIGHTS_DIR_ENV} is not set; point it at a directory holding {}.safetensors",
                info.name, info.name
            ))
        })?;
        let path = dir.join(format!("{}.safetensors", info.name));
        if !path.is_file() {
            return Err(TrainError::Pretrained(format!("weight bundle {} not found", path.display())));
        }
        Ok(path)
    }
}

impl BackboneProvider for CandleProvider {
    fn names(&self) -> Vec<String> {
        CATALOG.iter().map(|b| b.name.to_string()).collect()
    }

    fn spec(&self, name: &str) -> Option<BackboneSpec> {
        lookup(name).map(|b| BackboneSpec {
            name: b.name.to_string(),
            pretrained: true,
            native_resolution: b.native_resolution,
            parameter_count: None,
        })
    }

    fn build(&self, spec: &BackboneSpec, opts: &BuildOptions) -> Result<Box<dyn Network>, TrainError> {
        let (info, arch) = Self::resolve(spec)?;
        let spec = BackboneSpec {
            name: info.name.to_string(),
            ..spec.clone()
        };
        let net = if spec.pretrained {
            let path = Self::weights_path(info, opts)?;
            CandleNetwork::assemble(spec, arch, opts, Source::Pretrained(&path))?
        } else {
            CandleNetwork::assemble(spec, arch, opts, Source::Seeded)?
        };
        Ok(Box::new(net))
    }

    fn load(&self, spec: &BackboneSpec, opts: &BuildOptions, weights: &Path) -> Result<Box<dyn Network>, TrainError> {
        let (_, arch) = Self::resolve(spec)?;
        let net = CandleNetwork::assemble(spec.clone(), arch, opts, Source::Checkpoint(weights))
            .map_err(|e| match e {
                TrainError::Pretrained(m) => TrainError::Checkpoint(m),
                other => other,
            })?;
        Ok(Box::new(net))
    }
}

/// Adds the catalogue to `registry`.
pub fn register(registry: &mut BackboneRegistry) {
    registry.register(Arc::new(CandleProvider));
}

/// The built-in registry extended with the catalogue.
pub fn full_registry() -> BackboneRegistry {
    let mut r = BackboneRegistry::builtin();
    register(&mut r);
    r
}
