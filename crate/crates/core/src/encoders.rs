//! Stand-in image/text encoders, feature-file ingestion, RoIAlign and
//! exemplar token extraction.
//!
//! The fixture encoders are deterministic functions of (input, seed): they
//! compute non-overlapping patch means and push them through a seeded affine
//! projection. They exist so the rest of the pipeline can be exercised and
//! finetuned without pretrained backbones; real encoder output can be fed
//! in instead through OVCT feature files (see [`load_features`]).

use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io;
use crate::par;
use crate::tensor::{self, Tensor};

/// Pyramid strides produced by the fixture image encoder.
pub const FIXTURE_CV_STRIDES: [usize; 3] = [8, 16, 32];
/// Stride of the fixture aerial-domain feature map.
pub const FIXTURE_RS_STRIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenRole {
    Image,
    Exemplar,
    Text,
    Fused,
}

/// A set of d-dimensional tokens with the role they play in the pipeline.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenMatrix {
    pub tokens: Tensor,
    pub role: TokenRole,
}

impl TokenMatrix {
    pub fn new(tokens: Tensor, role: TokenRole) -> Result<Self> {
        if tokens.rank() != 2 {
            return Err(Error::shape(
                "token_matrix",
                format!("expected rank 2, got {:?}", tokens.dims()),
            ));
        }
        Ok(TokenMatrix { tokens, role })
    }

    pub fn count(&self) -> usize {
        self.tokens.dims()[0]
    }

    pub fn width(&self) -> usize {
        self.tokens.dims()[1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidLevel {
    /// Pixels per cell in the source grid this level was computed at. Kept
    /// as level identity after fusion even though fused maps live on the
    /// query grid; map boxes into a level via its map dims, not the stride.
    pub stride: usize,
    pub map: Tensor,
}

/// Ordered multi-resolution feature maps, finest first.
#[derive(Debug, Clone, PartialEq)]
pub struct FeaturePyramid {
    levels: Vec<PyramidLevel>,
    image_dims: (usize, usize),
}

impl FeaturePyramid {
    pub fn new(levels: Vec<PyramidLevel>, image_dims: (usize, usize)) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::arg("feature_pyramid", "no levels".to_string()));
        }
        let mut prev = 0usize;
        for (i, level) in levels.iter().enumerate() {
            if level.map.rank() != 3 {
                return Err(Error::shape(
                    "feature_pyramid",
                    format!("level {} map has dims {:?}", i, level.map.dims()),
                ));
            }
            if level.map.dims()[0] * level.map.dims()[1] == 0 {
                return Err(Error::arg(
                    "feature_pyramid",
                    format!("level {} has an empty spatial grid", i),
                ));
            }
            if level.stride <= prev {
                return Err(Error::arg(
                    "feature_pyramid",
                    format!("strides must be strictly increasing, got {} after {}", level.stride, prev),
                ));
            }
            prev = level.stride;
        }
        Ok(FeaturePyramid { levels, image_dims })
    }

    pub fn levels(&self) -> &[PyramidLevel] {
        &self.levels
    }

    pub fn image_dims(&self) -> (usize, usize) {
        self.image_dims
    }
}

/// Exemplar bounding boxes in image pixel coordinates, (x0, y0, x1, y1).
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarBoxes {
    boxes: Vec<[f64; 4]>,
}

impl ExemplarBoxes {
    pub fn new(boxes: Vec<[f64; 4]>, image_dims: (usize, usize)) -> Result<Self> {
        let (h, w) = (image_dims.0 as f64, image_dims.1 as f64);
        for (i, b) in boxes.iter().enumerate() {
            if !(b[2] > b[0] && b[3] > b[1]) {
                return Err(Error::arg(
                    "exemplar_boxes",
                    format!("box {} has non-positive extent: {:?}", i, b),
                ));
            }
            if b[0] < 0.0 || b[1] < 0.0 || b[2] > w || b[3] > h {
                return Err(Error::arg(
                    "exemplar_boxes",
                    format!("box {} outside image bounds {:?}: {:?}", i, image_dims, b),
                ));
            }
        }
        Ok(ExemplarBoxes { boxes })
    }

    pub fn empty() -> Self {
        ExemplarBoxes { boxes: Vec::new() }
    }

    pub fn boxes(&self) -> &[[f64; 4]] {
        &self.boxes
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }
}

/// RoIAlign over an h x w x C map. The box is given in continuous
/// feature-map coordinates (cell (r, c) spans [c, c+1) x [r, r+1)). Each
/// output cell averages `samples_per_cell`^2 bilinear samples taken at
/// regular sub-positions inside the cell.
pub fn roi_align(
    map: &Tensor,
    feat_box: [f64; 4],
    out_size: usize,
    samples_per_cell: usize,
) -> Result<Tensor> {
    if map.rank() != 3 {
        return Err(Error::shape(
            "roi_align",
            format!("expected rank 3, got {:?}", map.dims()),
        ));
    }
    if out_size == 0 || samples_per_cell == 0 {
        return Err(Error::arg("roi_align", "output size and sample count must be positive".to_string()));
    }
    let [x0, y0, x1, y1] = feat_box;
    if !(x1 > x0 && y1 > y0) {
        return Err(Error::arg(
            "roi_align",
            format!("box has non-positive area: {:?}", feat_box),
        ));
    }
    let (h, w, c) = (map.dims()[0], map.dims()[1], map.dims()[2]);
    let s = out_size;
    let spc = samples_per_cell;
    let cell_h = (y1 - y0) / s as f64;
    let cell_w = (x1 - x0) / s as f64;
    let norm = 1.0 / (spc * spc) as f64;
    let data = map.data();
    let mut out = vec![0.0; s * s * c];
    let mut sample = vec![0.0; c];
    for i in 0..s {
        for j in 0..s {
            let acc = &mut out[(i * s + j) * c..(i * s + j + 1) * c];
            for sy in 0..spc {
                let y = y0 + (i as f64 + (sy as f64 + 0.5) / spc as f64) * cell_h;
                for sx in 0..spc {
                    let x = x0 + (j as f64 + (sx as f64 + 0.5) / spc as f64) * cell_w;
                    // Continuous coords place cell centers at half-integers;
                    // shift into index space for sampling.
                    tensor::bilinear_sample(data, h, w, c, y - 0.5, x - 0.5, &mut sample);
                    for (a, &v) in acc.iter_mut().zip(&sample) {
                        *a += v;
                    }
                }
            }
            for a in acc.iter_mut() {
                *a *= norm;
            }
        }
    }
    Tensor::new(vec![s, s, c], out)
}

/// Mean-pooled RoIAlign expressed as one weight per map cell: the pooled
/// C-vector equals weights (1 x hw) times the flattened map (hw x C). The
/// training path uses this linear form so gradients reach the fused maps.
pub fn roi_pool_weights(
    map_h: usize,
    map_w: usize,
    feat_box: [f64; 4],
    out_size: usize,
    samples_per_cell: usize,
) -> Result<Tensor> {
    let [x0, y0, x1, y1] = feat_box;
    if !(x1 > x0 && y1 > y0) {
        return Err(Error::arg(
            "roi_pool_weights",
            format!("box has non-positive area: {:?}", feat_box),
        ));
    }
    if out_size == 0 || samples_per_cell == 0 {
        return Err(Error::arg("roi_pool_weights", "output size and sample count must be positive".to_string()));
    }
    let s = out_size;
    let spc = samples_per_cell;
    let cell_h = (y1 - y0) / s as f64;
    let cell_w = (x1 - x0) / s as f64;
    let norm = 1.0 / (s * s * spc * spc) as f64;
    let mut weights = vec![0.0; map_h * map_w];
    for i in 0..s {
        for sy in 0..spc {
            let y = y0 + (i as f64 + (sy as f64 + 0.5) / spc as f64) * cell_h - 0.5;
            let yc = y.clamp(0.0, (map_h - 1) as f64);
            let iy0 = yc.floor() as usize;
            let iy1 = (iy0 + 1).min(map_h - 1);
            let wy = yc - iy0 as f64;
            for j in 0..s {
                for sx in 0..spc {
                    let x = x0 + (j as f64 + (sx as f64 + 0.5) / spc as f64) * cell_w - 0.5;
                    let xc = x.clamp(0.0, (map_w - 1) as f64);
                    let ix0 = xc.floor() as usize;
                    let ix1 = (ix0 + 1).min(map_w - 1);
                    let wx = xc - ix0 as f64;
                    weights[iy0 * map_w + ix0] += norm * (1.0 - wy) * (1.0 - wx);
                    weights[iy0 * map_w + ix1] += norm * (1.0 - wy) * wx;
                    weights[iy1 * map_w + ix0] += norm * wy * (1.0 - wx);
                    weights[iy1 * map_w + ix1] += norm * wy * wx;
                }
            }
        }
    }
    Tensor::new(vec![1, map_h * map_w], weights)
}

/// Maps an image-pixel box into a level's continuous feature coordinates,
/// scaling each axis by the level grid size over the image size.
pub fn box_to_feature_coords(
    image_box: [f64; 4],
    map_dims: (usize, usize),
    image_dims: (usize, usize),
) -> [f64; 4] {
    let fy = map_dims.0 as f64 / image_dims.0 as f64;
    let fx = map_dims.1 as f64 / image_dims.1 as f64;
    [
        image_box[0] * fx,
        image_box[1] * fy,
        image_box[2] * fx,
        image_box[3] * fy,
    ]
}

/// Per-level linear maps taking pooled exemplar features to the model width.
#[derive(Debug, Clone, PartialEq)]
pub struct ExemplarProjection {
    /// One (weight C x d, bias d) pair per pyramid level.
    pub levels: Vec<(Tensor, Tensor)>,
}

/// RoIAlign geometry used when pooling exemplars.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoiConfig {
    pub size: usize,
    pub samples_per_cell: usize,
}

impl Default for RoiConfig {
    fn default() -> Self {
        RoiConfig {
            size: 7,
            samples_per_cell: 2,
        }
    }
}

/// Extracts one exemplar token per (box, level): RoIAlign to s x s,
/// mean-pool to a single C-vector, project to the model width. Rows are
/// ordered box-major (all levels of box 0, then box 1, ...). An empty box
/// list yields a 0 x d matrix.
pub fn extract_exemplar_tokens(
    pyramid: &FeaturePyramid,
    boxes: &ExemplarBoxes,
    proj: &ExemplarProjection,
    roi: RoiConfig,
) -> Result<TokenMatrix> {
    if proj.levels.len() != pyramid.levels().len() {
        return Err(Error::shape(
            "extract_exemplar_tokens",
            format!(
                "{} projections for {} levels",
                proj.levels.len(),
                pyramid.levels().len()
            ),
        ));
    }
    let d = proj.levels[0].1.dims()[0];
    let mut rows: Vec<f64> = Vec::new();
    for b in boxes.boxes() {
        for (level, (w, bias)) in pyramid.levels().iter().zip(&proj.levels) {
            let (lh, lw, _) = (
                level.map.dims()[0],
                level.map.dims()[1],
                level.map.dims()[2],
            );
            let fb = box_to_feature_coords(*b, (lh, lw), pyramid.image_dims());
            let aligned = roi_align(&level.map, fb, roi.size, roi.samples_per_cell)?;
            let c = aligned.dims()[2];
            let cells = roi.size * roi.size;
            let mut pooled = vec![0.0; c];
            for cell in 0..cells {
                for (p, &v) in pooled
                    .iter_mut()
                    .zip(&aligned.data()[cell * c..(cell + 1) * c])
                {
                    *p += v;
                }
            }
            for p in pooled.iter_mut() {
                *p /= cells as f64;
            }
            let pooled = Tensor::new(vec![1, c], pooled)?;
            let projected = tensor::broadcast_add_row(&tensor::matmul(&pooled, w)?, bias)?;
            rows.extend_from_slice(projected.data());
        }
    }
    let count = boxes.len() * pyramid.levels().len();
    TokenMatrix::new(Tensor::new(vec![count, d], rows)?, TokenRole::Exemplar)
}

/// Geometry of the fixture encoders.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Channels of each general-vision pyramid level.
    pub c_cv: usize,
    /// Channels of the aerial-domain map; equal to the model width.
    pub d: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig { c_cv: 8, d: 16 }
    }
}

/// Seeded affine projections standing in for the frozen image encoders.
#[derive(Debug, Clone, PartialEq)]
pub struct FixtureEncoderParams {
    /// One (weight 3 x c_cv, bias c_cv) per pyramid stride.
    pub cv_proj: Vec<(Tensor, Tensor)>,
    /// (weight 3 x d, bias d) for the aerial-domain map.
    pub rs_proj: (Tensor, Tensor),
    pub config: EncoderConfig,
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

fn seeded_affine(rng: &mut ChaCha8Rng, c_in: usize, c_out: usize) -> (Tensor, Tensor) {
    let w: Vec<f64> = (0..c_in * c_out).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..c_out).map(|_| rng.random_range(-0.25..0.25)).collect();
    (
        Tensor::new(vec![c_in, c_out], w).expect("finite by construction"),
        Tensor::new(vec![c_out], b).expect("finite by construction"),
    )
}

impl FixtureEncoderParams {
    pub fn from_seed(seed: u64, config: EncoderConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed ^ 0x6669_7874_7572_6573));
        let cv_proj = FIXTURE_CV_STRIDES
            .iter()
            .map(|_| seeded_affine(&mut rng, 3, config.c_cv))
            .collect();
        let rs_proj = seeded_affine(&mut rng, 3, config.d);
        FixtureEncoderParams {
            cv_proj,
            rs_proj,
            config,
        }
    }
}

fn patch_means(image: &Tensor, stride: usize) -> Result<Tensor> {
    let (h, w, c) = (image.dims()[0], image.dims()[1], image.dims()[2]);
    let (gh, gw) = (h / stride, w / stride);
    let norm = 1.0 / (stride * stride) as f64;
    let src = image.data();
    let mut out = vec![0.0; gh * gw * c];
    par::for_each_chunk_mut(&mut out, gw * c, |gy, row| {
        for gx in 0..gw {
            let acc = &mut row[gx * c..(gx + 1) * c];
            for py in 0..stride {
                let y = gy * stride + py;
                for px in 0..stride {
                    let x = gx * stride + px;
                    for (a, &v) in acc.iter_mut().zip(&src[(y * w + x) * c..(y * w + x + 1) * c]) {
                        *a += v;
                    }
                }
            }
            for a in acc.iter_mut() {
                *a *= norm;
            }
        }
    });
    Tensor::new(vec![gh, gw, c], out)
}

/// Encodes an image with the fixture parameters: patch means at the fixed
/// strides, then the stored affine projection per level.
pub fn encode_image(image: &Tensor, params: &FixtureEncoderParams) -> Result<(FeaturePyramid, Tensor)> {
    if image.rank() != 3 || image.dims()[2] != 3 {
        return Err(Error::shape(
            "encode_image",
            format!("expected H x W x 3, got {:?}", image.dims()),
        ));
    }
    let (h, w) = (image.dims()[0], image.dims()[1]);
    if h % 32 != 0 || w % 32 != 0 {
        return Err(Error::arg(
            "encode_image",
            format!("image dims {}x{} must be divisible by 32", h, w),
        ));
    }
    let mut levels = Vec::with_capacity(FIXTURE_CV_STRIDES.len());
    for (&stride, (pw, pb)) in FIXTURE_CV_STRIDES.iter().zip(&params.cv_proj) {
        let means = patch_means(image, stride)?;
        levels.push(PyramidLevel {
            stride,
            map: tensor::project_1x1(&means, pw, pb)?,
        });
    }
    let rs_means = patch_means(image, FIXTURE_RS_STRIDE)?;
    let z_rs = tensor::project_1x1(&rs_means, &params.rs_proj.0, &params.rs_proj.1)?;
    Ok((FeaturePyramid::new(levels, (h, w))?, z_rs))
}

/// Deterministic stand-in for the frozen image encoders: same (image, seed)
/// always yields bit-identical features.
pub fn fixture_image_encoder(
    image: &Tensor,
    seed: u64,
    config: EncoderConfig,
) -> Result<(FeaturePyramid, Tensor)> {
    encode_image(image, &FixtureEncoderParams::from_seed(seed, config))
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Whitespace token-id mapping for the fixture text encoder.
pub fn tokenize(prompt: &str) -> Result<Vec<u64>> {
    let ids: Vec<u64> = prompt.split_whitespace().map(|w| fnv1a(w.as_bytes())).collect();
    if ids.is_empty() {
        return Err(Error::arg("tokenize", "empty prompt".to_string()));
    }
    Ok(ids)
}

/// Embedding row for one token id; pure function of (seed, id).
pub fn fixture_text_embedding(seed: u64, token_id: u64, d: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(splitmix64(seed) ^ splitmix64(token_id));
    (0..d).map(|_| rng.random_range(-0.5..0.5)).collect()
}

/// Deterministic stand-in for the frozen text encoder: each token id maps
/// through a seeded embedding to the model width.
pub fn fixture_text_encoder(prompt_ids: &[u64], seed: u64, d: usize) -> Result<TokenMatrix> {
    if prompt_ids.is_empty() {
        return Err(Error::arg("fixture_text_encoder", "empty prompt".to_string()));
    }
    let mut data = Vec::with_capacity(prompt_ids.len() * d);
    for &id in prompt_ids {
        data.extend(fixture_text_embedding(seed, id, d));
    }
    TokenMatrix::new(
        Tensor::new(vec![prompt_ids.len(), d], data)?,
        TokenRole::Text,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureRole {
    CvPyramidLevel,
    RsMap,
    TextTokens,
}

/// JSON sidecar declaring what an OVCT feature file holds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureSidecar {
    pub role: FeatureRole,
    pub stride: usize,
    pub level: usize,
}

#[derive(Debug, Clone)]
pub enum LoadedFeature {
    /// A pyramid level or an aerial-domain map; the latter arrives as a
    /// single-level pyramid.
    Pyramid(FeaturePyramid),
    Tokens(TokenMatrix),
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

/// Writes a feature tensor and its sidecar next to each other.
pub fn save_feature(path: &Path, t: &Tensor, sidecar: &FeatureSidecar) -> Result<()> {
    io::save_tensor(path, t)?;
    io::write_json(&sidecar_path(path), sidecar)
}

/// Loads one OVCT feature file with its sidecar, checking that the declared
/// role is consistent with the tensor's shape.
pub fn load_features(path: &Path) -> Result<LoadedFeature> {
    let t = io::load_tensor(path)?;
    let sidecar: FeatureSidecar = io::read_json(&sidecar_path(path))?;
    if sidecar.stride == 0 {
        return Err(Error::format(path, "sidecar stride must be positive"));
    }
    match sidecar.role {
        FeatureRole::CvPyramidLevel | FeatureRole::RsMap => {
            if t.rank() != 3 {
                return Err(Error::format(
                    path,
                    format!("role {:?} needs a rank-3 tensor, got {:?}", sidecar.role, t.dims()),
                ));
            }
            let image_dims = (sidecar.stride * t.dims()[0], sidecar.stride * t.dims()[1]);
            Ok(LoadedFeature::Pyramid(FeaturePyramid::new(
                vec![PyramidLevel {
                    stride: sidecar.stride,
                    map: t,
                }],
                image_dims,
            )?))
        }
        FeatureRole::TextTokens => {
            if t.rank() != 2 {
                return Err(Error::format(
                    path,
                    format!("text tokens need a rank-2 tensor, got {:?}", t.dims()),
                ));
            }
            Ok(LoadedFeature::Tokens(TokenMatrix::new(t, TokenRole::Text)?))
        }
    }
}

/// Assembles a multi-level pyramid from `cv_level*.ovct` files in a
/// directory, ordering levels by their sidecar index.
pub fn load_cv_pyramid(dir: &Path) -> Result<FeaturePyramid> {
    let mut found: Vec<(usize, PyramidLevel)> = Vec::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        if path.extension().and_then(|e| e.to_str()) != Some("ovct") {
            continue;
        }
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        if !name.starts_with("cv_level") {
            continue;
        }
        let t = io::load_tensor(&path)?;
        let sidecar: FeatureSidecar = io::read_json(&sidecar_path(&path))?;
        if !matches!(sidecar.role, FeatureRole::CvPyramidLevel) {
            return Err(Error::format(&path, "expected role cv_pyramid_level"));
        }
        if t.rank() != 3 {
            return Err(Error::format(&path, format!("expected rank 3, got {:?}", t.dims())));
        }
        found.push((
            sidecar.level,
            PyramidLevel {
                stride: sidecar.stride,
                map: t,
            },
        ));
    }
    if found.is_empty() {
        return Err(Error::format(dir, "no cv_level*.ovct files"));
    }
    found.sort_by_key(|(level, _)| *level);
    for (i, (level, _)) in found.iter().enumerate() {
        if *level != i {
            return Err(Error::format(dir, format!("missing pyramid level {}", i)));
        }
    }
    let image_dims = {
        let l0 = &found[0].1;
        (l0.stride * l0.map.dims()[0], l0.stride * l0.map.dims()[1])
    };
    for (_, level) in &found {
        if level.stride * level.map.dims()[0] != image_dims.0
            || level.stride * level.map.dims()[1] != image_dims.1
        {
            return Err(Error::format(
                dir,
                format!(
                    "level stride {} and grid {:?} disagree with image dims {:?}",
                    level.stride,
                    &level.map.dims()[..2],
                    image_dims
                ),
            ));
        }
    }
    FeaturePyramid::new(found.into_iter().map(|(_, l)| l).collect(), image_dims)
}

/// Flattens an H x W x C map into row-major HW x C tokens.
pub fn map_to_tokens(map: &Tensor) -> Result<Tensor> {
    let d = map.dims();
    if d.len() != 3 {
        return Err(Error::shape(
            "map_to_tokens",
            format!("expected rank 3, got {:?}", d),
        ));
    }
    map.reshape(vec![d[0] * d[1], d[2]])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil;

    fn toy_pyramid(seed: u64) -> FeaturePyramid {
        let mut rng = testutil::rng(seed);
        FeaturePyramid::new(
            vec![
                PyramidLevel {
                    stride: 8,
                    map: testutil::random_tensor(&mut rng, vec![8, 8, 4]),
                },
                PyramidLevel {
                    stride: 16,
                    map: testutil::random_tensor(&mut rng, vec![4, 4, 4]),
                },
                PyramidLevel {
                    stride: 32,
                    map: testutil::random_tensor(&mut rng, vec![2, 2, 4]),
                },
            ],
            (64, 64),
        )
        .unwrap()
    }

    #[test]
    fn pyramid_requires_increasing_strides() {
        let level = |stride| PyramidLevel {
            stride,
            map: Tensor::zeros(vec![2, 2, 1]),
        };
        assert!(FeaturePyramid::new(vec![level(8), level(8)], (16, 16)).is_err());
        assert!(FeaturePyramid::new(vec![level(16), level(8)], (16, 16)).is_err());
        assert!(FeaturePyramid::new(vec![level(8), level(16)], (16, 16)).is_ok());
    }

    #[test]
    fn roi_align_constant_map_is_constant() {
        let map = Tensor::full(vec![5, 6, 3], 2.5).unwrap();
        for (s, spc) in [(1, 1), (3, 2), (7, 4)] {
            let out = roi_align(&map, [0.0, 0.0, 6.0, 5.0], s, spc).unwrap();
            assert!(out.data().iter().all(|&v| (v - 2.5).abs() < 1e-12));
        }
    }

    #[test]
    fn roi_align_single_sample_hits_cell_center() {
        let mut rng = testutil::rng(2);
        let map = testutil::random_tensor(&mut rng, vec![4, 4, 2]);
        // Box centered on the center of cell (2, 1), which sits at
        // continuous coordinates (x, y) = (1.5, 2.5).
        let out = roi_align(&map, [1.0, 2.0, 2.0, 3.0], 1, 1).unwrap();
        assert_eq!(out.get3(0, 0, 0), map.get3(2, 1, 0));
        assert_eq!(out.get3(0, 0, 1), map.get3(2, 1, 1));
    }

    #[test]
    fn roi_align_degenerate_box_errors() {
        let map = Tensor::zeros(vec![4, 4, 1]);
        assert!(roi_align(&map, [1.0, 0.0, 1.0, 2.0], 2, 1).is_err());
    }

    // Independent brute-force oracle: averages bilinear samples computed
    // with its own interpolation code.
    fn roi_oracle(map: &Tensor, b: [f64; 4], s: usize, spc: usize) -> Vec<f64> {
        let (h, w, c) = (map.dims()[0], map.dims()[1], map.dims()[2]);
        let bilin = |y: f64, x: f64, ch: usize| -> f64 {
            let y = (y - 0.5).clamp(0.0, (h - 1) as f64);
            let x = (x - 0.5).clamp(0.0, (w - 1) as f64);
            let (y0, x0) = (y.floor() as usize, x.floor() as usize);
            let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
            let (fy, fx) = (y - y0 as f64, x - x0 as f64);
            map.get3(y0, x0, ch) * (1.0 - fy) * (1.0 - fx)
                + map.get3(y0, x1, ch) * (1.0 - fy) * fx
                + map.get3(y1, x0, ch) * fy * (1.0 - fx)
                + map.get3(y1, x1, ch) * fy * fx
        };
        let mut out = vec![0.0; s * s * c];
        for i in 0..s {
            for j in 0..s {
                for ch in 0..c {
                    let mut acc = 0.0;
                    for sy in 0..spc {
                        for sx in 0..spc {
                            let y = b[1] + (i as f64 + (sy as f64 + 0.5) / spc as f64) * (b[3] - b[1]) / s as f64;
                            let x = b[0] + (j as f64 + (sx as f64 + 0.5) / spc as f64) * (b[2] - b[0]) / s as f64;
                            acc += bilin(y, x, ch);
                        }
                    }
                    out[(i * s + j) * c + ch] = acc / (spc * spc) as f64;
                }
            }
        }
        out
    }

    #[test]
    fn roi_align_matches_brute_force_oracle() {
        for seed in 0..100u64 {
            let mut rng = testutil::rng(seed);
            let h = testutil::random_int(&mut rng, 2, 8) as usize;
            let w = testutil::random_int(&mut rng, 2, 8) as usize;
            let map = testutil::random_tensor(&mut rng, vec![h, w, 2]);
            let x0 = rng.random_range(0.0..w as f64 - 0.5);
            let y0 = rng.random_range(0.0..h as f64 - 0.5);
            let x1 = rng.random_range(x0 + 0.1..w as f64);
            let y1 = rng.random_range(y0 + 0.1..h as f64);
            let s = testutil::random_int(&mut rng, 1, 5) as usize;
            let spc = testutil::random_int(&mut rng, 1, 3) as usize;
            let got = roi_align(&map, [x0, y0, x1, y1], s, spc).unwrap();
            let want = roi_oracle(&map, [x0, y0, x1, y1], s, spc);
            for (g, w) in got.data().iter().zip(&want) {
                assert!((g - w).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn roi_pool_weights_match_direct_pooling() {
        for seed in 0..30u64 {
            let mut rng = testutil::rng(seed + 900);
            let map = testutil::random_tensor(&mut rng, vec![5, 7, 3]);
            let feat_box = [0.7, 1.1, 5.9, 4.3];
            let aligned = roi_align(&map, feat_box, 7, 2).unwrap();
            let c = 3;
            let cells = 49;
            let mut direct = vec![0.0; c];
            for cell in 0..cells {
                for (ch, d) in direct.iter_mut().enumerate() {
                    *d += aligned.data()[cell * c + ch];
                }
            }
            for d in direct.iter_mut() {
                *d /= cells as f64;
            }
            let weights = roi_pool_weights(5, 7, feat_box, 7, 2).unwrap();
            let flat = map_to_tokens(&map).unwrap();
            let pooled = tensor::matmul(&weights, &flat).unwrap();
            for (g, w) in pooled.data().iter().zip(&direct) {
                assert!((g - w).abs() < 1e-10);
            }
        }
    }

    fn toy_projection(levels: usize, c: usize, d: usize, seed: u64) -> ExemplarProjection {
        let mut rng = testutil::rng(seed);
        ExemplarProjection {
            levels: (0..levels)
                .map(|_| {
                    (
                        testutil::random_tensor(&mut rng, vec![c, d]),
                        testutil::random_tensor(&mut rng, vec![d]),
                    )
                })
                .collect(),
        }
    }

    #[test]
    fn exemplar_token_count_is_boxes_times_levels() {
        let pyr = toy_pyramid(1);
        let proj = toy_projection(3, 4, 6, 2);
        let boxes = ExemplarBoxes::new(
            vec![
                [4.0, 4.0, 20.0, 20.0],
                [10.0, 12.0, 30.0, 40.0],
                [0.0, 0.0, 8.0, 8.0],
            ],
            (64, 64),
        )
        .unwrap();
        let tokens = extract_exemplar_tokens(&pyr, &boxes, &proj, RoiConfig::default()).unwrap();
        assert_eq!(tokens.count(), 9);
        assert_eq!(tokens.width(), 6);

        let empty = extract_exemplar_tokens(&pyr, &ExemplarBoxes::empty(), &proj, RoiConfig::default()).unwrap();
        assert_eq!(empty.count(), 0);
    }

    #[test]
    fn duplicated_box_duplicates_rows() {
        let pyr = toy_pyramid(3);
        let proj = toy_projection(3, 4, 6, 4);
        let boxes = ExemplarBoxes::new(
            vec![[4.0, 4.0, 20.0, 20.0], [4.0, 4.0, 20.0, 20.0]],
            (64, 64),
        )
        .unwrap();
        let tokens = extract_exemplar_tokens(&pyr, &boxes, &proj, RoiConfig::default()).unwrap();
        assert_eq!(tokens.tokens.row(0), tokens.tokens.row(3));
        assert_eq!(tokens.tokens.row(1), tokens.tokens.row(4));
    }

    #[test]
    fn invalid_box_is_rejected() {
        assert!(ExemplarBoxes::new(vec![[5.0, 1.0, 5.0, 3.0]], (64, 64)).is_err());
        assert!(ExemplarBoxes::new(vec![[-1.0, 0.0, 5.0, 3.0]], (64, 64)).is_err());
        assert!(ExemplarBoxes::new(vec![[0.0, 0.0, 65.0, 3.0]], (64, 64)).is_err());
    }

    #[test]
    fn fixture_image_encoder_shapes_and_determinism() {
        let mut rng = testutil::rng(8);
        let img = testutil::random_tensor(&mut rng, vec![64, 64, 3]);
        let cfg = EncoderConfig::default();
        let (pyr_a, rs_a) = fixture_image_encoder(&img, 7, cfg).unwrap();
        let (pyr_b, rs_b) = fixture_image_encoder(&img, 7, cfg).unwrap();
        assert_eq!(pyr_a, pyr_b);
        assert_eq!(rs_a, rs_b);
        let dims: Vec<_> = pyr_a
            .levels()
            .iter()
            .map(|l| (l.map.dims()[0], l.map.dims()[1]))
            .collect();
        assert_eq!(dims, vec![(8, 8), (4, 4), (2, 2)]);
        assert_eq!(rs_a.dims(), &[4, 4, 16]);

        let (pyr_c, _) = fixture_image_encoder(&img, 8, cfg).unwrap();
        assert_ne!(pyr_a, pyr_c);
    }

    #[test]
    fn zero_image_features_equal_biases() {
        let img = Tensor::zeros(vec![32, 32, 3]);
        let cfg = EncoderConfig::default();
        let params = FixtureEncoderParams::from_seed(5, cfg);
        let (pyr, rs) = encode_image(&img, &params).unwrap();
        for (level, (_, bias)) in pyr.levels().iter().zip(&params.cv_proj) {
            for cell in level.map.data().chunks(cfg.c_cv) {
                assert_eq!(cell, bias.data());
            }
        }
        for cell in rs.data().chunks(cfg.d) {
            assert_eq!(cell, params.rs_proj.1.data());
        }
    }

    #[test]
    fn indivisible_image_dims_error() {
        let img = Tensor::zeros(vec![48, 64, 3]);
        assert!(fixture_image_encoder(&img, 1, EncoderConfig::default()).is_err());
    }

    #[test]
    fn text_encoder_rows_match_seeded_table() {
        let ids = tokenize("cargo ship near pier").unwrap();
        assert_eq!(ids.len(), 4);
        let z = fixture_text_encoder(&ids, 11, 8).unwrap();
        assert_eq!(z.count(), 4);
        for (i, &id) in ids.iter().enumerate() {
            assert_eq!(z.tokens.row(i), fixture_text_embedding(11, id, 8));
        }
        let again = fixture_text_encoder(&ids, 11, 8).unwrap();
        assert_eq!(z, again);
        assert!(fixture_text_encoder(&[], 11, 8).is_err());
        assert!(tokenize("   ").is_err());
    }

    #[test]
    fn feature_round_trip_and_sidecar_validation() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = testutil::rng(12);
        let map = testutil::random_tensor(&mut rng, vec![4, 4, 2]);

        let path = dir.path().join("rs.ovct");
        save_feature(
            &path,
            &map,
            &FeatureSidecar {
                role: FeatureRole::RsMap,
                stride: 16,
                level: 0,
            },
        )
        .unwrap();
        match load_features(&path).unwrap() {
            LoadedFeature::Pyramid(p) => {
                assert_eq!(p.levels().len(), 1);
                assert_eq!(p.image_dims(), (64, 64));
            }
            _ => panic!("expected pyramid"),
        }

        // Declaring a rank-3 map as text tokens must fail.
        let bad = dir.path().join("bad.ovct");
        save_feature(
            &bad,
            &map,
            &FeatureSidecar {
                role: FeatureRole::TextTokens,
                stride: 1,
                level: 0,
            },
        )
        .unwrap();
        assert!(load_features(&bad).is_err());
    }

    #[test]
    fn cv_pyramid_loads_levels_in_order() {
        let dir = tempfile::tempdir().unwrap();
        let pyr = toy_pyramid(20);
        for (i, level) in pyr.levels().iter().enumerate() {
            save_feature(
                &dir.path().join(format!("cv_level{}.ovct", i)),
                &level.map,
                &FeatureSidecar {
                    role: FeatureRole::CvPyramidLevel,
                    stride: level.stride,
                    level: i,
                },
            )
            .unwrap();
        }
        let loaded = load_cv_pyramid(dir.path()).unwrap();
        assert_eq!(loaded.levels().len(), 3);
        assert_eq!(loaded.image_dims(), (64, 64));
        for (a, b) in loaded.levels().iter().zip(pyr.levels()) {
            assert_eq!(a.stride, b.stride);
            // Values pass through f32 on disk.
            for (x, y) in a.map.data().iter().zip(b.map.data()) {
                assert!((x - y).abs() < 1e-6);
            }
        }
    }
}
