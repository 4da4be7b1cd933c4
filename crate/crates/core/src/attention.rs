//! Multi-head attention and cross-domain feature injection.
//!
//! Attention here is the plain scaled dot-product kind: no masking, no
//! dropout, no positional encodings. The injection step cross-attends each
//! general-vision pyramid level (keys/values) with the aerial-domain map
//! (queries), so fused levels come out on the query grid.
//!
//! Every forward runs through the autodiff tape builders below; the pure
//! functions are thin wrappers over a throwaway tape. That keeps training
//! and inference on one code path.

use crate::autodiff::{NodeId, Tape};
use crate::encoders::{FeaturePyramid, PyramidLevel};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::{self, Tensor};

/// Projection weights for one attention block. All four weights are d x d;
/// heads split the projected width evenly.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub heads: usize,
    pub w_q: Tensor,
    pub w_k: Tensor,
    pub w_v: Tensor,
    pub w_o: Tensor,
}

impl AttentionParams {
    pub fn new(heads: usize, w_q: Tensor, w_k: Tensor, w_v: Tensor, w_o: Tensor) -> Result<Self> {
        let p = AttentionParams {
            heads,
            w_q,
            w_k,
            w_v,
            w_o,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn width(&self) -> usize {
        self.w_q.dims()[0]
    }

    fn validate(&self) -> Result<()> {
        let d = self.w_q.dims().first().copied().unwrap_or(0);
        for (name, w) in [
            ("w_q", &self.w_q),
            ("w_k", &self.w_k),
            ("w_v", &self.w_v),
            ("w_o", &self.w_o),
        ] {
            if w.rank() != 2 || w.dims() != [d, d] {
                return Err(Error::shape(
                    "attention_params",
                    format!("{} must be {}x{}, got {:?}", name, d, d, w.dims()),
                ));
            }
        }
        if self.heads == 0 || d == 0 || d % self.heads != 0 {
            return Err(Error::arg(
                "attention_params",
                format!("width {} not divisible by {} heads", d, self.heads),
            ));
        }
        Ok(())
    }
}

/// Tape handles for one attention block's weights.
#[derive(Debug, Clone)]
pub struct AttentionNodes {
    pub heads: usize,
    pub w_q: NodeId,
    pub w_k: NodeId,
    pub w_v: NodeId,
    pub w_o: NodeId,
}

pub fn attention_leaves(tape: &mut Tape, p: &AttentionParams) -> AttentionNodes {
    AttentionNodes {
        heads: p.heads,
        w_q: tape.leaf(p.w_q.clone()),
        w_k: tape.leaf(p.w_k.clone()),
        w_v: tape.leaf(p.w_v.clone()),
        w_o: tape.leaf(p.w_o.clone()),
    }
}

/// Scaled dot-product attention with `heads` heads on the tape. Heads are
/// sliced from the projected width, attended independently with scale
/// 1/sqrt(d/heads), concatenated and passed through the output weight.
pub fn mha_node(tape: &mut Tape, q: NodeId, kv: NodeId, a: &AttentionNodes) -> Result<NodeId> {
    let d = tape.value(a.w_q)?.dims()[0];
    let qd = tape.value(q)?.dims().to_vec();
    let kvd = tape.value(kv)?.dims().to_vec();
    if qd.len() != 2 || qd[1] != d {
        return Err(Error::shape(
            "multi_head_attention",
            format!("queries {:?} vs width {}", qd, d),
        ));
    }
    if kvd.len() != 2 || kvd[1] != d {
        return Err(Error::shape(
            "multi_head_attention",
            format!("keys/values {:?} vs width {}", kvd, d),
        ));
    }
    if kvd[0] == 0 {
        return Err(Error::arg("multi_head_attention", "empty key/value set".to_string()));
    }
    let heads = a.heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let qp = tape.matmul(q, a.w_q)?;
    let kp = tape.matmul(kv, a.w_k)?;
    let vp = tape.matmul(kv, a.w_v)?;

    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.gather_cols(qp, h * dh, dh)?;
        let kh = tape.gather_cols(kp, h * dh, dh)?;
        let vh = tape.gather_cols(vp, h * dh, dh)?;
        let kt = tape.transpose(kh)?;
        let logits = tape.matmul(qh, kt)?;
        let scaled = tape.scale(logits, scale)?;
        let weights = tape.softmax(scaled, 1)?;
        outs.push(tape.matmul(weights, vh)?);
    }
    let concat = tape.concat_cols(&outs)?;
    tape.matmul(concat, a.w_o)
}

/// Standard multi-head attention as a pure function over token matrices
/// (n_q x d queries, n_kv x d keys/values).
pub fn multi_head_attention(q: &Tensor, kv: &Tensor, p: &AttentionParams) -> Result<Tensor> {
    p.validate()?;
    let mut tape = Tape::new();
    let qn = tape.leaf(q.clone());
    let kvn = tape.leaf(kv.clone());
    let nodes = attention_leaves(&mut tape, p);
    let out = mha_node(&mut tape, qn, kvn, &nodes)?;
    Ok(tape.value(out)?.clone())
}

/// Parameters of the feature-injection step: one channel projection per
/// pyramid level plus a shared attention block at the aerial feature width.
#[derive(Debug, Clone, PartialEq)]
pub struct InjectionParams {
    /// Per-level (weight C_cv x C_rs, bias C_rs).
    pub level_proj: Vec<(Tensor, Tensor)>,
    pub attention: AttentionParams,
}

/// Tape handles for the injection parameters.
#[derive(Debug, Clone)]
pub struct InjectionNodes {
    pub level_proj: Vec<(NodeId, NodeId)>,
    pub attention: AttentionNodes,
}

pub fn injection_leaves(tape: &mut Tape, p: &InjectionParams) -> InjectionNodes {
    InjectionNodes {
        level_proj: p
            .level_proj
            .iter()
            .map(|(w, b)| (tape.leaf(w.clone()), tape.leaf(b.clone())))
            .collect(),
        attention: attention_leaves(tape, &p.attention),
    }
}

/// Fuses one resized pyramid level with the aerial queries on the tape.
/// `resized_flat` is the level bilinearly resized to the query grid and
/// flattened (hw x C_cv); `rs_flat` is the flattened query map (hw x C_rs).
pub fn inject_level_node(
    tape: &mut Tape,
    resized_flat: NodeId,
    rs_flat: NodeId,
    proj: (NodeId, NodeId),
    attention: &AttentionNodes,
) -> Result<NodeId> {
    let projected = tape.matmul(resized_flat, proj.0)?;
    let tokens = tape.broadcast_add_row(projected, proj.1)?;
    mha_node(tape, rs_flat, tokens, attention)
}

/// Injects the aerial-domain map into every pyramid level: resize the level
/// to the query grid, project its channels to the query width, then
/// cross-attend with the flattened query map. Output levels keep their
/// source strides as identity but live on the query grid.
pub fn rs_feature_injection(
    z_cv: &FeaturePyramid,
    z_rs: &Tensor,
    p: &InjectionParams,
) -> Result<FeaturePyramid> {
    if z_rs.rank() != 3 {
        return Err(Error::shape(
            "rs_feature_injection",
            format!("query map must be rank 3, got {:?}", z_rs.dims()),
        ));
    }
    if p.level_proj.len() != z_cv.levels().len() {
        return Err(Error::shape(
            "rs_feature_injection",
            format!(
                "{} level projections for {} pyramid levels",
                p.level_proj.len(),
                z_cv.levels().len()
            ),
        ));
    }
    let (hr, wr, c_rs) = (z_rs.dims()[0], z_rs.dims()[1], z_rs.dims()[2]);
    let rs_flat = z_rs.reshape(vec![hr * wr, c_rs])?;

    let jobs: Vec<(&PyramidLevel, &(Tensor, Tensor))> =
        z_cv.levels().iter().zip(&p.level_proj).collect();
    let fused: Vec<Result<Tensor>> = par::map_items(&jobs, |(level, proj)| {
        let resized = tensor::bilinear_resize(&level.map, (hr, wr))?;
        let flat = resized.reshape(vec![hr * wr, resized.dims()[2]])?;
        let mut tape = Tape::new();
        let flat_n = tape.leaf(flat);
        let rs_n = tape.leaf(rs_flat.clone());
        let proj_n = (tape.leaf(proj.0.clone()), tape.leaf(proj.1.clone()));
        let attn = attention_leaves(&mut tape, &p.attention);
        let out = inject_level_node(&mut tape, flat_n, rs_n, proj_n, &attn)?;
        tape.value(out)?.reshape(vec![hr, wr, c_rs])
    });

    let mut levels = Vec::with_capacity(jobs.len());
    for (result, level) in fused.into_iter().zip(z_cv.levels()) {
        levels.push(PyramidLevel {
            stride: level.stride,
            map: result?,
        });
    }
    FeaturePyramid::new(levels, z_cv.image_dims())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil;

    fn identity(d: usize) -> Tensor {
        let mut data = vec![0.0; d * d];
        for i in 0..d {
            data[i * d + i] = 1.0;
        }
        Tensor::new(vec![d, d], data).unwrap()
    }

    fn random_params(d: usize, heads: usize, seed: u64) -> AttentionParams {
        let mut rng = testutil::rng(seed);
        AttentionParams::new(
            heads,
            testutil::random_tensor(&mut rng, vec![d, d]),
            testutil::random_tensor(&mut rng, vec![d, d]),
            testutil::random_tensor(&mut rng, vec![d, d]),
            testutil::random_tensor(&mut rng, vec![d, d]),
        )
        .unwrap()
    }

    #[test]
    fn width_must_divide_by_heads() {
        let t = Tensor::zeros(vec![6, 6]);
        assert!(AttentionParams::new(4, t.clone(), t.clone(), t.clone(), t.clone()).is_err());
        assert!(AttentionParams::new(3, t.clone(), t.clone(), t.clone(), t).is_ok());
    }

    #[test]
    fn single_key_returns_projected_value_row() {
        // With one key/value pair the softmax weight is 1, so before the
        // output projection every query yields the projected value row.
        // Identity output weight makes that observable.
        let mut rng = testutil::rng(21);
        let d = 4;
        let p = AttentionParams::new(
            2,
            testutil::random_tensor(&mut rng, vec![d, d]),
            testutil::random_tensor(&mut rng, vec![d, d]),
            testutil::random_tensor(&mut rng, vec![d, d]),
            identity(d),
        )
        .unwrap();
        let q = testutil::random_tensor(&mut rng, vec![3, d]);
        let kv = testutil::random_tensor(&mut rng, vec![1, d]);
        let out = multi_head_attention(&q, &kv, &p).unwrap();
        let projected = tensor::matmul(&kv, &p.w_v).unwrap();
        for i in 0..3 {
            for (a, b) in out.row(i).iter().zip(projected.row(0)) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn permuting_keys_and_values_changes_nothing() {
        let mut rng = testutil::rng(22);
        let p = random_params(8, 4, 23);
        let q = testutil::random_tensor(&mut rng, vec![5, 8]);
        let kv = testutil::random_tensor(&mut rng, vec![6, 8]);
        let out = multi_head_attention(&q, &kv, &p).unwrap();

        let perm = [3usize, 0, 5, 1, 4, 2];
        let kv_perm = tensor::gather_rows(&kv, &perm).unwrap();
        let out_perm = multi_head_attention(&q, &kv_perm, &p).unwrap();
        for (a, b) in out.data().iter().zip(out_perm.data()) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn single_head_matches_direct_formula() {
        // heads = 1, identity projections: out = softmax(QK^T / sqrt(d)) V.
        let d = 2;
        let p = AttentionParams::new(1, identity(d), identity(d), identity(d), identity(d)).unwrap();
        let q = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.5, -1.0]).unwrap();
        let kv = Tensor::new(vec![2, 2], vec![0.2, 0.4, -0.6, 1.0]).unwrap();
        let got = multi_head_attention(&q, &kv, &p).unwrap();

        let kt = kv.transpose2().unwrap();
        let logits = tensor::matmul(&q, &kt).unwrap();
        let scaled = tensor::ew_map(&logits, |x| x / (d as f64).sqrt()).unwrap();
        let weights = tensor::softmax(&scaled, 1).unwrap();
        let want = tensor::matmul(&weights, &kv).unwrap();
        for (a, b) in got.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn output_rows_stay_in_projected_value_bounds() {
        // Pre-output-projection, each head's rows are convex combinations
        // of the projected value rows; with identity w_o the concatenated
        // heads must fall inside the per-coordinate bounds of those rows.
        for seed in 0..20u64 {
            let mut rng = testutil::rng(seed + 40);
            let d = 6;
            let heads = 3;
            let p = AttentionParams::new(
                heads,
                testutil::random_tensor(&mut rng, vec![d, d]),
                testutil::random_tensor(&mut rng, vec![d, d]),
                testutil::random_tensor(&mut rng, vec![d, d]),
                identity(d),
            )
            .unwrap();
            let n_kv = 1 + (seed as usize % 8);
            let q = testutil::random_tensor(&mut rng, vec![4, d]);
            let kv = testutil::random_tensor(&mut rng, vec![n_kv, d]);
            let out = multi_head_attention(&q, &kv, &p).unwrap();
            let vp = tensor::matmul(&kv, &p.w_v).unwrap();
            for i in 0..4 {
                for c in 0..d {
                    let column: Vec<f64> = (0..n_kv).map(|r| vp.get2(r, c)).collect();
                    let lo = column.iter().cloned().fold(f64::INFINITY, f64::min);
                    let hi = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let v = out.get2(i, c);
                    assert!(v >= lo - 1e-10 && v <= hi + 1e-10);
                }
            }
        }
    }

    #[test]
    fn width_mismatch_and_empty_kv_error() {
        let p = random_params(4, 2, 1);
        let q = Tensor::zeros(vec![2, 6]);
        let kv = Tensor::zeros(vec![2, 4]);
        assert!(multi_head_attention(&q, &kv, &p).is_err());
        let q = Tensor::zeros(vec![2, 4]);
        let empty = Tensor::zeros(vec![0, 4]);
        assert!(multi_head_attention(&q, &empty, &p).is_err());
    }

    fn toy_injection_params(levels: usize, c_cv: usize, c_rs: usize, heads: usize, seed: u64) -> InjectionParams {
        let mut rng = testutil::rng(seed);
        InjectionParams {
            level_proj: (0..levels)
                .map(|_| {
                    (
                        testutil::random_tensor(&mut rng, vec![c_cv, c_rs]),
                        testutil::random_tensor(&mut rng, vec![c_rs]),
                    )
                })
                .collect(),
            attention: random_params(c_rs, heads, seed + 1),
        }
    }

    #[test]
    fn constant_level_with_identity_projection_stays_constant() {
        // Attention over identical value rows is a convex combination of
        // that one row, so the constant survives projection and fusion.
        let c = 4;
        let level = PyramidLevel {
            stride: 8,
            map: Tensor::full(vec![4, 4, c], 0.6).unwrap(),
        };
        let pyr = FeaturePyramid::new(vec![level], (32, 32)).unwrap();
        let mut rng = testutil::rng(50);
        let z_rs = testutil::random_tensor(&mut rng, vec![2, 2, c]);
        let p = InjectionParams {
            level_proj: vec![(identity(c), Tensor::zeros(vec![c]))],
            attention: AttentionParams::new(2, identity(c), identity(c), identity(c), identity(c)).unwrap(),
        };
        let fused = rs_feature_injection(&pyr, &z_rs, &p).unwrap();
        assert_eq!(fused.levels()[0].map.dims(), &[2, 2, c]);
        for &v in fused.levels()[0].map.data() {
            assert!((v - 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn single_level_equals_one_attention_call() {
        let mut rng = testutil::rng(51);
        let c_cv = 3;
        let c_rs = 4;
        let level_map = testutil::random_tensor(&mut rng, vec![4, 4, c_cv]);
        let pyr = FeaturePyramid::new(
            vec![PyramidLevel {
                stride: 16,
                map: level_map.clone(),
            }],
            (64, 64),
        )
        .unwrap();
        let z_rs = testutil::random_tensor(&mut rng, vec![4, 4, c_rs]);
        let p = toy_injection_params(1, c_cv, c_rs, 2, 52);

        let fused = rs_feature_injection(&pyr, &z_rs, &p).unwrap();

        // Same steps spelled out with the pure kernels.
        let resized = tensor::bilinear_resize(&level_map, (4, 4)).unwrap();
        let projected = tensor::project_1x1(&resized, &p.level_proj[0].0, &p.level_proj[0].1).unwrap();
        let kv = projected.reshape(vec![16, c_rs]).unwrap();
        let queries = z_rs.reshape(vec![16, c_rs]).unwrap();
        let want = multi_head_attention(&queries, &kv, &p.attention).unwrap();
        for (a, b) in fused.levels()[0].map.data().iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn two_level_pyramid_matches_stepwise_composition() {
        let mut rng = testutil::rng(53);
        let c_cv = 3;
        let c_rs = 4;
        let maps = [
            testutil::random_tensor(&mut rng, vec![4, 4, c_cv]),
            testutil::random_tensor(&mut rng, vec![2, 2, c_cv]),
        ];
        let pyr = FeaturePyramid::new(
            vec![
                PyramidLevel {
                    stride: 8,
                    map: maps[0].clone(),
                },
                PyramidLevel {
                    stride: 16,
                    map: maps[1].clone(),
                },
            ],
            (32, 32),
        )
        .unwrap();
        let z_rs = testutil::random_tensor(&mut rng, vec![2, 2, c_rs]);
        let p = toy_injection_params(2, c_cv, c_rs, 2, 54);

        let fused = rs_feature_injection(&pyr, &z_rs, &p).unwrap();
        assert_eq!(fused.levels().len(), 2);
        let queries = z_rs.reshape(vec![4, c_rs]).unwrap();
        for (i, map) in maps.iter().enumerate() {
            let resized = tensor::bilinear_resize(map, (2, 2)).unwrap();
            let projected =
                tensor::project_1x1(&resized, &p.level_proj[i].0, &p.level_proj[i].1).unwrap();
            let kv = projected.reshape(vec![4, c_rs]).unwrap();
            let want = multi_head_attention(&queries, &kv, &p.attention).unwrap();
            assert_eq!(fused.levels()[i].map.dims(), &[2, 2, c_rs]);
            for (a, b) in fused.levels()[i].map.data().iter().zip(want.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn fused_levels_take_query_grid_dims() {
        for seed in 0..10u64 {
            let mut rng = testutil::rng(seed + 60);
            let hr = testutil::random_int(&mut rng, 1, 4) as usize;
            let wr = testutil::random_int(&mut rng, 1, 4) as usize;
            let pyr = FeaturePyramid::new(
                vec![
                    PyramidLevel {
                        stride: 8,
                        map: testutil::random_tensor(&mut rng, vec![6, 3, 2]),
                    },
                    PyramidLevel {
                        stride: 16,
                        map: testutil::random_tensor(&mut rng, vec![3, 2, 2]),
                    },
                ],
                (48, 24),
            )
            .unwrap();
            let z_rs = testutil::random_tensor(&mut rng, vec![hr, wr, 4]);
            let p = toy_injection_params(2, 2, 4, 2, seed + 61);
            let fused = rs_feature_injection(&pyr, &z_rs, &p).unwrap();
            for level in fused.levels() {
                assert_eq!(&level.map.dims()[..2], &[hr, wr]);
                assert_eq!(level.map.dims()[2], 4);
            }
        }
    }

    #[test]
    fn level_count_mismatch_errors() {
        let pyr = FeaturePyramid::new(
            vec![PyramidLevel {
                stride: 8,
                map: Tensor::zeros(vec![2, 2, 3]),
            }],
            (16, 16),
        )
        .unwrap();
        let z_rs = Tensor::zeros(vec![2, 2, 4]);
        let p = toy_injection_params(2, 3, 4, 2, 70);
        assert!(rs_feature_injection(&pyr, &z_rs, &p).is_err());
    }
}
