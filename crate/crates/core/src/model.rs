//! Model configuration, parameter containers, seeded initialization and
//! checkpoint I/O.
//!
//! Parameters are addressed by stable dotted names ("decoder.l0.ffn.w1").
//! The optimizer, the frozen mask and checkpoint manifests all key off
//! these names, and [`ModelParams::param_refs`] yields them in a fixed
//! order so every consumer sees the same sequence.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{AttentionParams, InjectionParams};
use crate::encoders::{
    EncoderConfig, ExemplarProjection, FixtureEncoderParams, RoiConfig, FIXTURE_CV_STRIDES,
};
use crate::error::{Error, Result};
use crate::io;
use crate::tensor::Tensor;

fn default_k() -> usize {
    900
}
fn default_heads() -> usize {
    8
}
fn default_d() -> usize {
    16
}
fn default_c_cv() -> usize {
    8
}
fn default_layers() -> usize {
    1
}
fn default_ffn_hidden() -> usize {
    32
}
fn default_levels() -> usize {
    FIXTURE_CV_STRIDES.len()
}

/// Model geometry. The defaults are desk scale; `k` keeps the standard
/// 900-query budget and clamps to the token count on small grids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_d")]
    pub d: usize,
    #[serde(default = "default_heads")]
    pub heads: usize,
    #[serde(default = "default_c_cv")]
    pub c_cv: usize,
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_layers")]
    pub l_enh: usize,
    #[serde(default = "default_layers")]
    pub l_dec: usize,
    #[serde(default = "default_ffn_hidden")]
    pub ffn_hidden: usize,
    #[serde(default = "default_k")]
    pub k: usize,
    #[serde(default)]
    pub roi: RoiConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: default_d(),
            heads: default_heads(),
            c_cv: default_c_cv(),
            levels: default_levels(),
            l_enh: default_layers(),
            l_dec: default_layers(),
            ffn_hidden: default_ffn_hidden(),
            k: default_k(),
            roi: RoiConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::arg(
                "model_config",
                format!("width {} must be divisible by {} heads", self.d, self.heads),
            ));
        }
        if self.k == 0 {
            return Err(Error::arg("model_config", "k must be at least 1".to_string()));
        }
        if self.levels == 0 || self.l_enh == 0 || self.l_dec == 0 || self.ffn_hidden == 0 {
            return Err(Error::arg("model_config", "layer and level counts must be positive".to_string()));
        }
        Ok(())
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            c_cv: self.c_cv,
            d: self.d,
        }
    }
}

/// Two-layer feed-forward block, applied with a residual connection.
#[derive(Debug, Clone, PartialEq)]
pub struct FfnParams {
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhancerLayer {
    pub img_self: AttentionParams,
    pub prompt_self: AttentionParams,
    /// Image tokens attend to the prompt.
    pub img_cross: AttentionParams,
    /// Prompt tokens attend to the image.
    pub prompt_cross: AttentionParams,
    pub img_ffn: FfnParams,
    pub prompt_ffn: FfnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhancerParams {
    pub layers: Vec<EnhancerLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub self_attn: AttentionParams,
    pub img_cross: AttentionParams,
    pub prompt_cross: AttentionParams,
    pub ffn: FfnParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub layers: Vec<DecoderLayer>,
    /// Affine d -> 2 head; centers are sigmoids of its output, so they land
    /// in the unit square.
    pub center_w: Tensor,
    pub center_b: Tensor,
}

/// Every parameter of the counting model. The encoder block stands in for
/// the frozen image/text backbones; everything else is trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub encoder: FixtureEncoderParams,
    pub injection: InjectionParams,
    pub exemplar_proj: ExemplarProjection,
    pub enhancer: EnhancerParams,
    pub decoder: DecoderParams,
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Tensor::new(vec![rows, cols], data).expect("finite by construction")
}

fn init_attention(rng: &mut ChaCha8Rng, d: usize, heads: usize) -> AttentionParams {
    AttentionParams::new(
        heads,
        xavier(rng, d, d),
        xavier(rng, d, d),
        xavier(rng, d, d),
        xavier(rng, d, d),
    )
    .expect("square weights")
}

fn init_ffn(rng: &mut ChaCha8Rng, d: usize, hidden: usize) -> FfnParams {
    FfnParams {
        w1: xavier(rng, d, hidden),
        b1: Tensor::zeros(vec![hidden]),
        w2: xavier(rng, hidden, d),
        b2: Tensor::zeros(vec![d]),
    }
}

impl ModelParams {
    /// Seeded initialization; same (config, seed) yields bit-identical
    /// parameters.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.d;
        let injection = InjectionParams {
            level_proj: (0..cfg.levels)
                .map(|_| (xavier(&mut rng, cfg.c_cv, d), Tensor::zeros(vec![d])))
                .collect(),
            attention: init_attention(&mut rng, d, cfg.heads),
        };
        let exemplar_proj = ExemplarProjection {
            levels: (0..cfg.levels)
                .map(|_| (xavier(&mut rng, d, d), Tensor::zeros(vec![d])))
                .collect(),
        };
        let enhancer = EnhancerParams {
            layers: (0..cfg.l_enh)
                .map(|_| EnhancerLayer {
                    img_self: init_attention(&mut rng, d, cfg.heads),
                    prompt_self: init_attention(&mut rng, d, cfg.heads),
                    img_cross: init_attention(&mut rng, d, cfg.heads),
                    prompt_cross: init_attention(&mut rng, d, cfg.heads),
                    img_ffn: init_ffn(&mut rng, d, cfg.ffn_hidden),
                    prompt_ffn: init_ffn(&mut rng, d, cfg.ffn_hidden),
                })
                .collect(),
        };
        let decoder_layers: Vec<DecoderLayer> = (0..cfg.l_dec)
            .map(|_| DecoderLayer {
                self_attn: init_attention(&mut rng, d, cfg.heads),
                img_cross: init_attention(&mut rng, d, cfg.heads),
                prompt_cross: init_attention(&mut rng, d, cfg.heads),
                ffn: init_ffn(&mut rng, d, cfg.ffn_hidden),
            })
            .collect();
        Ok(ModelParams {
            encoder: FixtureEncoderParams::from_seed(seed, cfg.encoder()),
            injection,
            exemplar_proj,
            enhancer,
            decoder: DecoderParams {
                layers: decoder_layers,
                center_w: xavier(&mut rng, d, 2),
                center_b: Tensor::zeros(vec![2]),
            },
        })
    }

    /// All parameters with their stable names, in the canonical order.
    pub fn param_refs(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        fn push_attn<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, a: &'a AttentionParams) {
            out.push((format!("{prefix}.w_q"), &a.w_q));
            out.push((format!("{prefix}.w_k"), &a.w_k));
            out.push((format!("{prefix}.w_v"), &a.w_v));
            out.push((format!("{prefix}.w_o"), &a.w_o));
        }
        fn push_ffn<'a>(out: &mut Vec<(String, &'a Tensor)>, prefix: &str, f: &'a FfnParams) {
            out.push((format!("{prefix}.w1"), &f.w1));
            out.push((format!("{prefix}.b1"), &f.b1));
            out.push((format!("{prefix}.w2"), &f.w2));
            out.push((format!("{prefix}.b2"), &f.b2));
        }
        for (i, (w, b)) in self.encoder.cv_proj.iter().enumerate() {
            out.push((format!("encoder.cv{i}.weight"), w));
            out.push((format!("encoder.cv{i}.bias"), b));
        }
        out.push(("encoder.rs.weight".to_string(), &self.encoder.rs_proj.0));
        out.push(("encoder.rs.bias".to_string(), &self.encoder.rs_proj.1));
        for (i, (w, b)) in self.injection.level_proj.iter().enumerate() {
            out.push((format!("injection.level{i}.weight"), w));
            out.push((format!("injection.level{i}.bias"), b));
        }
        push_attn(&mut out, "injection.attn", &self.injection.attention);
        for (i, (w, b)) in self.exemplar_proj.levels.iter().enumerate() {
            out.push((format!("exemplar.level{i}.weight"), w));
            out.push((format!("exemplar.level{i}.bias"), b));
        }
        for (i, layer) in self.enhancer.layers.iter().enumerate() {
            push_attn(&mut out, &format!("enhancer.l{i}.img_self"), &layer.img_self);
            push_attn(&mut out, &format!("enhancer.l{i}.prompt_self"), &layer.prompt_self);
            push_attn(&mut out, &format!("enhancer.l{i}.img_cross"), &layer.img_cross);
            push_attn(&mut out, &format!("enhancer.l{i}.prompt_cross"), &layer.prompt_cross);
            push_ffn(&mut out, &format!("enhancer.l{i}.img_ffn"), &layer.img_ffn);
            push_ffn(&mut out, &format!("enhancer.l{i}.prompt_ffn"), &layer.prompt_ffn);
        }
        for (i, layer) in self.decoder.layers.iter().enumerate() {
            push_attn(&mut out, &format!("decoder.l{i}.self_attn"), &layer.self_attn);
            push_attn(&mut out, &format!("decoder.l{i}.img_cross"), &layer.img_cross);
            push_attn(&mut out, &format!("decoder.l{i}.prompt_cross"), &layer.prompt_cross);
            push_ffn(&mut out, &format!("decoder.l{i}.ffn"), &layer.ffn);
        }
        out.push(("decoder.center.weight".to_string(), &self.decoder.center_w));
        out.push(("decoder.center.bias".to_string(), &self.decoder.center_b));
        out
    }

    /// Mutable view of the parameters, same names and order as
    /// [`Self::param_refs`].
    pub fn param_refs_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        fn push_attn<'a>(out: &mut Vec<(String, &'a mut Tensor)>, prefix: &str, a: &'a mut AttentionParams) {
            out.push((format!("{prefix}.w_q"), &mut a.w_q));
            out.push((format!("{prefix}.w_k"), &mut a.w_k));
            out.push((format!("{prefix}.w_v"), &mut a.w_v));
            out.push((format!("{prefix}.w_o"), &mut a.w_o));
        }
        fn push_ffn<'a>(out: &mut Vec<(String, &'a mut Tensor)>, prefix: &str, f: &'a mut FfnParams) {
            out.push((format!("{prefix}.w1"), &mut f.w1));
            out.push((format!("{prefix}.b1"), &mut f.b1));
            out.push((format!("{prefix}.w2"), &mut f.w2));
            out.push((format!("{prefix}.b2"), &mut f.b2));
        }
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        for (i, (w, b)) in self.encoder.cv_proj.iter_mut().enumerate() {
            out.push((format!("encoder.cv{i}.weight"), w));
            out.push((format!("encoder.cv{i}.bias"), b));
        }
        out.push(("encoder.rs.weight".to_string(), &mut self.encoder.rs_proj.0));
        out.push(("encoder.rs.bias".to_string(), &mut self.encoder.rs_proj.1));
        for (i, (w, b)) in self.injection.level_proj.iter_mut().enumerate() {
            out.push((format!("injection.level{i}.weight"), w));
            out.push((format!("injection.level{i}.bias"), b));
        }
        push_attn(&mut out, "injection.attn", &mut self.injection.attention);
        for (i, (w, b)) in self.exemplar_proj.levels.iter_mut().enumerate() {
            out.push((format!("exemplar.level{i}.weight"), w));
            out.push((format!("exemplar.level{i}.bias"), b));
        }
        for (i, layer) in self.enhancer.layers.iter_mut().enumerate() {
            push_attn(&mut out, &format!("enhancer.l{i}.img_self"), &mut layer.img_self);
            push_attn(&mut out, &format!("enhancer.l{i}.prompt_self"), &mut layer.prompt_self);
            push_attn(&mut out, &format!("enhancer.l{i}.img_cross"), &mut layer.img_cross);
            push_attn(&mut out, &format!("enhancer.l{i}.prompt_cross"), &mut layer.prompt_cross);
            push_ffn(&mut out, &format!("enhancer.l{i}.img_ffn"), &mut layer.img_ffn);
            push_ffn(&mut out, &format!("enhancer.l{i}.prompt_ffn"), &mut layer.prompt_ffn);
        }
        for (i, layer) in self.decoder.layers.iter_mut().enumerate() {
            push_attn(&mut out, &format!("decoder.l{i}.self_attn"), &mut layer.self_attn);
            push_attn(&mut out, &format!("decoder.l{i}.img_cross"), &mut layer.img_cross);
            push_attn(&mut out, &format!("decoder.l{i}.prompt_cross"), &mut layer.prompt_cross);
            push_ffn(&mut out, &format!("decoder.l{i}.ffn"), &mut layer.ffn);
        }
        out.push(("decoder.center.weight".to_string(), &mut self.decoder.center_w));
        out.push(("decoder.center.bias".to_string(), &mut self.decoder.center_b));
        out
    }
}

/// Parameter-name prefixes excluded from optimization. The stand-in
/// encoders stay frozen by default.
pub fn default_frozen() -> Vec<String> {
    vec!["encoder.".to_string()]
}

pub fn is_frozen(frozen: &[String], name: &str) -> bool {
    frozen.iter().any(|p| name.starts_with(p.as_str()))
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointManifest {
    params: BTreeMap<String, String>,
    frozen: Vec<String>,
}

/// Writes every parameter as an OVCT tensor plus a manifest mapping names
/// to files and recording the frozen mask.
pub fn save_checkpoint(dir: &Path, params: &ModelParams, frozen: &[String]) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = CheckpointManifest {
        params: BTreeMap::new(),
        frozen: frozen.to_vec(),
    };
    for (name, tensor) in params.param_refs() {
        let file = format!("{name}.ovct");
        io::save_tensor(&dir.join(&file), tensor)?;
        manifest.params.insert(name, file);
    }
    io::write_json(&dir.join("manifest.json"), &manifest)
}

/// Loads a checkpoint into the structure implied by `cfg`. Every parameter
/// must be present with matching dims. Returns the parameters and the
/// frozen mask recorded in the manifest.
pub fn load_checkpoint(dir: &Path, cfg: &ModelConfig) -> Result<(ModelParams, Vec<String>)> {
    let manifest: CheckpointManifest = io::read_json(&dir.join("manifest.json"))?;
    let mut params = ModelParams::init(cfg, 0)?;
    for (name, slot) in params.param_refs_mut() {
        let file = manifest.params.get(&name).ok_or_else(|| {
            Error::format(dir, format!("checkpoint is missing parameter {name}"))
        })?;
        let loaded = io::load_tensor(&dir.join(file))?;
        if loaded.dims() != slot.dims() {
            return Err(Error::format(
                dir,
                format!(
                    "parameter {name}: checkpoint dims {:?} vs model dims {:?}",
                    loaded.dims(),
                    slot.dims()
                ),
            ));
        }
        *slot = loaded;
    }
    let expected: usize = params.param_refs().len();
    if manifest.params.len() != expected {
        return Err(Error::format(
            dir,
            format!(
                "checkpoint lists {} parameters, model has {}",
                manifest.params.len(),
                expected
            ),
        ));
    }
    Ok((params, manifest.frozen))
}
