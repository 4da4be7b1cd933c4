//! Matching, losses and the frozen-encoder finetune step.
//!
//! Predictions pair with ground-truth points through a minimum-cost
//! assignment on L1 center distance. Among cost-equal assignments the
//! lexicographically smallest pair list wins, which the solver enforces by
//! fixing pairs in order and re-solving the remainder.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape};
use crate::error::{Error, Result};
use crate::model::{is_frozen, ModelConfig, ModelParams};
use crate::pipeline::{forward_graph, model_leaves, ForwardInputs};
use crate::tensor::{self, Tensor};

/// Weights of the combined objective: loc on matched centers, cls on the
/// similarity matrix.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_loc: f64,
    pub lambda_cls: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_loc: 1.0,
            lambda_cls: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_loc.is_finite() && self.lambda_cls.is_finite())
            || self.lambda_loc < 0.0
            || self.lambda_cls < 0.0
        {
            return Err(Error::arg(
                "loss_weights",
                format!("weights must be finite and non-negative: {:?}", self),
            ));
        }
        Ok(())
    }
}

/// Focal loss shape parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FocalParams {
    pub alpha: f64,
    pub gamma: f64,
}

impl Default for FocalParams {
    fn default() -> Self {
        FocalParams {
            alpha: 0.25,
            gamma: 2.0,
        }
    }
}

/// One-to-one pairing between predictions and ground-truth points.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// (prediction index, ground-truth index), sorted ascending.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_pred: Vec<usize>,
    pub unmatched_gt: Vec<usize>,
}

fn l1(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).abs() + (a[1] - b[1]).abs()
}

/// Minimum-cost assignment of `rows` onto `cols` (all rows matched; needs
/// rows.len() <= cols.len()). Shortest-augmenting-path Hungarian with
/// potentials.
fn assignment_cost(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    let n = rows.len();
    let m = cols.len();
    debug_assert!(n <= m);
    if n == 0 {
        return 0.0;
    }
    const INF: f64 = f64::INFINITY;
    // 1-based arrays; p[j] is the row matched to column j.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![INF; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = INF;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[rows[i0 - 1]][cols[j - 1]] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut total = 0.0;
    for j in 1..=m {
        if p[j] != 0 {
            total += cost[rows[p[j] - 1]][cols[j - 1]];
        }
    }
    total
}

/// Minimum cost of assigning every remaining row if rows outnumber columns
/// the extra rows stay unmatched (solved by transposing).
fn remainder_cost(cost: &[Vec<f64>], rows: &[usize], cols: &[usize]) -> f64 {
    if rows.is_empty() || cols.is_empty() {
        return 0.0;
    }
    if rows.len() <= cols.len() {
        assignment_cost(cost, rows, cols)
    } else {
        // Transpose: assign each column to a distinct row.
        let t: Vec<Vec<f64>> = (0..cost[0].len())
            .map(|j| (0..cost.len()).map(|i| cost[i][j]).collect())
            .collect();
        assignment_cost(&t, cols, rows)
    }
}

/// Pairs predictions with ground-truth points minimizing total L1 distance
/// over all one-to-one assignments of size min(m, g). Cost ties resolve to
/// the lexicographically smallest pair list. Coordinates must be
/// normalized to the unit square.
pub fn hungarian_match(pred_centers: &[[f64; 2]], gt_points: &[[f64; 2]]) -> Result<MatchResult> {
    for (tag, pts) in [("pred", pred_centers), ("gt", gt_points)] {
        for p in pts {
            if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
                return Err(Error::arg(
                    "hungarian_match",
                    format!("{tag} point {:?} outside the unit square", p),
                ));
            }
        }
    }
    let m = pred_centers.len();
    let g = gt_points.len();
    if m == 0 || g == 0 {
        return Ok(MatchResult {
            pairs: Vec::new(),
            unmatched_pred: (0..m).collect(),
            unmatched_gt: (0..g).collect(),
        });
    }
    let cost: Vec<Vec<f64>> = pred_centers
        .iter()
        .map(|p| gt_points.iter().map(|q| l1(*p, *q)).collect())
        .collect();

    let all_rows: Vec<usize> = (0..m).collect();
    let all_cols: Vec<usize> = (0..g).collect();
    let optimal = remainder_cost(&cost, &all_rows, &all_cols);
    let eps = 1e-9 * optimal.abs().max(1.0);

    // Fix pairs row by row: the smallest column that still admits an
    // optimal completion wins; leaving a row unmatched is the last resort
    // and only legal while the pair quota min(m, g) stays reachable.
    let quota = m.min(g);
    let mut pairs = Vec::with_capacity(quota);
    let mut free_cols = all_cols;
    let mut fixed_cost = 0.0;
    let mut unmatched_pred = Vec::new();
    for i in 0..m {
        let rows_left: Vec<usize> = (i + 1..m).collect();
        let mut chosen: Option<usize> = None;
        for (ci, &j) in free_cols.iter().enumerate() {
            let rest: Vec<usize> = free_cols
                .iter()
                .enumerate()
                .filter(|(x, _)| *x != ci)
                .map(|(_, &c)| c)
                .collect();
            if pairs.len() + 1 + rows_left.len().min(rest.len()) < quota {
                continue;
            }
            let total = fixed_cost + cost[i][j] + remainder_cost(&cost, &rows_left, &rest);
            if total <= optimal + eps {
                chosen = Some(ci);
                break;
            }
        }
        match chosen {
            Some(ci) => {
                let j = free_cols.remove(ci);
                fixed_cost += cost[i][j];
                pairs.push((i, j));
            }
            None => unmatched_pred.push(i),
        }
        if free_cols.is_empty() {
            unmatched_pred.extend(i + 1..m);
            break;
        }
    }
    debug_assert_eq!(pairs.len(), quota);
    Ok(MatchResult {
        pairs,
        unmatched_pred,
        unmatched_gt: free_cols,
    })
}

/// Mean L1 distance over matched pairs; 0 when nothing is matched.
pub fn loc_loss(m: &MatchResult, pred_centers: &[[f64; 2]], gt_points: &[[f64; 2]]) -> f64 {
    if m.pairs.is_empty() {
        return 0.0;
    }
    let total: f64 = m
        .pairs
        .iter()
        .map(|&(p, g)| l1(pred_centers[p], gt_points[g]))
        .sum();
    total / m.pairs.len() as f64
}

fn validate_focal(y: &Tensor, targets: &Tensor, fp: FocalParams) -> Result<()> {
    if y.dims() != targets.dims() {
        return Err(Error::shape(
            "focal_loss",
            format!("{:?} vs targets {:?}", y.dims(), targets.dims()),
        ));
    }
    if y.is_empty() {
        return Err(Error::arg("focal_loss", "empty similarity matrix".to_string()));
    }
    if let Some(&bad) = y.data().iter().find(|&&v| v <= 0.0 || v >= 1.0) {
        return Err(Error::arg(
            "focal_loss",
            format!("entry {} outside (0, 1)", bad),
        ));
    }
    if targets.data().iter().any(|&t| t != 0.0 && t != 1.0) {
        return Err(Error::arg("focal_loss", "targets must be binary".to_string()));
    }
    if !(0.0..=1.0).contains(&fp.alpha) || fp.gamma < 0.0 {
        return Err(Error::arg(
            "focal_loss",
            format!("alpha {} must be in [0,1], gamma {} non-negative", fp.alpha, fp.gamma),
        ));
    }
    Ok(())
}

/// Focal loss over similarity entries: mean of -a_t (1 - p_t)^gamma ln p_t
/// with p_t = y for positives and 1 - y for negatives, weight alpha on
/// positives and 1 - alpha on negatives.
pub fn focal_loss(y: &Tensor, targets: &Tensor, fp: FocalParams) -> Result<f64> {
    validate_focal(y, targets, fp)?;
    let mut total = 0.0;
    for (&p, &t) in y.data().iter().zip(targets.data()) {
        let (p_t, a) = if t == 1.0 { (p, fp.alpha) } else { (1.0 - p, 1.0 - fp.alpha) };
        total += -a * (1.0 - p_t).powf(fp.gamma) * p_t.ln();
    }
    Ok(total / y.len() as f64)
}

/// Focal loss on the tape; gradients flow to the similarity entries.
pub fn focal_loss_node(tape: &mut Tape, y: NodeId, targets: &Tensor, fp: FocalParams) -> Result<NodeId> {
    validate_focal(tape.value(y)?, targets, fp)?;
    let alpha_t = tensor::ew_map(targets, |t| if t == 1.0 { fp.alpha } else { 1.0 - fp.alpha })?;
    let t_node = tape.leaf(targets.clone());
    let not_t = tape.leaf(tensor::ew_map(targets, |t| 1.0 - t)?);
    let alpha_node = tape.leaf(alpha_t);

    let pos = tape.mul(t_node, y)?;
    let y_neg = tape.neg(y)?;
    let one_minus_y = tape.add_scalar(y_neg, 1.0)?;
    let neg = tape.mul(not_t, one_minus_y)?;
    let p_t = tape.add(pos, neg)?;

    let p_t_neg = tape.neg(p_t)?;
    let one_minus_pt = tape.add_scalar(p_t_neg, 1.0)?;
    let focus = tape.pow_const(one_minus_pt, fp.gamma)?;
    let ln_pt = tape.ln(p_t)?;
    let weighted = tape.mul(focus, ln_pt)?;
    let weighted = tape.mul(alpha_node, weighted)?;
    let neg_loss = tape.mean_all(weighted)?;
    tape.neg(neg_loss)
}

/// L = lambda_loc * loc + lambda_cls * cls.
pub fn total_loss(loc: f64, cls: f64, w: LossWeights) -> f64 {
    w.lambda_loc * loc + w.lambda_cls * cls
}

/// Adam state over named parameters. Frozen names (prefix match) are never
/// updated; their tensors stay bit-identical across steps.
#[derive(Debug, Clone)]
pub struct OptimizerState {
    pub step: u64,
    pub learn_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub frozen: Vec<String>,
    first_moment: BTreeMap<String, Tensor>,
    second_moment: BTreeMap<String, Tensor>,
}

impl OptimizerState {
    pub fn new(learn_rate: f64, frozen: Vec<String>) -> Self {
        OptimizerState {
            step: 0,
            learn_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            frozen,
            first_moment: BTreeMap::new(),
            second_moment: BTreeMap::new(),
        }
    }

    /// One bias-corrected Adam update for a single named parameter.
    fn update(&mut self, name: &str, param: &mut Tensor, grad: &Tensor, t: u64) -> Result<()> {
        let (b1, b2, lr, eps) = (self.beta1, self.beta2, self.learn_rate, self.epsilon);
        let m_slot = self
            .first_moment
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.dims().to_vec()));
        *m_slot = tensor::ew_zip(m_slot, grad, "adam-m", |m, g| b1 * m + (1.0 - b1) * g)?;
        let m = m_slot.clone();
        let v_slot = self
            .second_moment
            .entry(name.to_string())
            .or_insert_with(|| Tensor::zeros(param.dims().to_vec()));
        *v_slot = tensor::ew_zip(v_slot, grad, "adam-v", |v, g| b2 * v + (1.0 - b2) * g * g)?;
        let bc1 = 1.0 - b1.powi(t as i32);
        let bc2 = 1.0 - b2.powi(t as i32);
        let v = v_slot.clone();
        *param = tensor::ew_zip(
            param,
            &tensor::ew_zip(&m, &v, "adam-mv", |m, v| {
                (m / bc1) / ((v / bc2).sqrt() + eps)
            })?,
            "adam-step",
            |p, d| p - lr * d,
        )?;
        Ok(())
    }
}

/// One training sample: model inputs plus normalized ground-truth centers.
#[derive(Debug, Clone)]
pub struct TrainSample {
    pub inputs: ForwardInputs,
    /// (x, y) in the unit square.
    pub gt_points: Vec<[f64; 2]>,
}

/// Loss summary for one step, taken before the parameter update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepStats {
    pub total: f64,
    pub loc: f64,
    pub cls: f64,
}

fn tensor_points(t: &Tensor) -> Vec<[f64; 2]> {
    (0..t.dims()[0]).map(|i| [t.get2(i, 0), t.get2(i, 1)]).collect()
}

/// Classification targets: row i is all ones iff selected token i was
/// matched to a ground-truth point (every prompt column belongs to the
/// sample's own conditioning).
fn focal_targets(k: usize, prompt_width: usize, pairs: &[(usize, usize)]) -> Tensor {
    let mut data = vec![0.0; k * prompt_width];
    for &(row, _) in pairs {
        for v in &mut data[row * prompt_width..(row + 1) * prompt_width] {
            *v = 1.0;
        }
    }
    Tensor::from_raw(vec![k, prompt_width], data).expect("binary targets are finite")
}

/// One optimization step over a batch: forward every sample on a shared
/// tape, match centers to ground truth, combine focal and loc losses, then
/// apply one Adam update to every unfrozen parameter. Returns the batch
/// loss means measured before the update.
pub fn finetune_step(
    params: &mut ModelParams,
    batch: &[TrainSample],
    opt: &mut OptimizerState,
    cfg: &ModelConfig,
    weights: LossWeights,
    focal: FocalParams,
) -> Result<StepStats> {
    weights.validate()?;
    if batch.is_empty() {
        return Err(Error::arg("finetune_step", "empty batch".to_string()));
    }
    let mut tape = Tape::new();
    let (nodes, registry) = model_leaves(&mut tape, params);

    let mut total_node: Option<NodeId> = None;
    let mut loc_sum = 0.0;
    let mut cls_sum = 0.0;
    for sample in batch {
        let fwd = forward_graph(&mut tape, &sample.inputs, &nodes, cfg)?;
        let centers_val = tape.value(fwd.centers)?.clone();
        let pred = tensor_points(&centers_val);
        let matched = hungarian_match(&pred, &sample.gt_points)?;

        let y_dims = tape.value(fwd.y)?.dims().to_vec();
        let targets = focal_targets(y_dims[0], y_dims[1], &matched.pairs);
        let cls_node = focal_loss_node(&mut tape, fwd.y, &targets, focal)?;

        let loc_node = if matched.pairs.is_empty() {
            tape.leaf(Tensor::scalar(0.0)?)
        } else {
            let rows: Vec<usize> = matched.pairs.iter().map(|&(p, _)| p).collect();
            let gt: Vec<f64> = matched
                .pairs
                .iter()
                .flat_map(|&(_, g)| sample.gt_points[g])
                .collect();
            let gt_node = tape.leaf(Tensor::from_raw(vec![rows.len(), 2], gt)?);
            let picked = tape.gather_rows(fwd.centers, &rows)?;
            let diff = tape.sub(picked, gt_node)?;
            let dist = tape.abs(diff)?;
            let sum = tape.sum_all(dist)?;
            tape.scale(sum, 1.0 / rows.len() as f64)?
        };

        loc_sum += tape.scalar_value(loc_node)?;
        cls_sum += tape.scalar_value(cls_node)?;

        let loc_w = tape.scale(loc_node, weights.lambda_loc)?;
        let cls_w = tape.scale(cls_node, weights.lambda_cls)?;
        let sample_total = tape.add(loc_w, cls_w)?;
        total_node = Some(match total_node {
            Some(acc) => tape.add(acc, sample_total)?,
            None => sample_total,
        });
    }
    let batch_total = tape.scale(total_node.expect("non-empty batch"), 1.0 / batch.len() as f64)?;
    let stats = StepStats {
        total: tape.scalar_value(batch_total)?,
        loc: loc_sum / batch.len() as f64,
        cls: cls_sum / batch.len() as f64,
    };

    let grads = tape.grad(batch_total)?;
    opt.step += 1;
    let t = opt.step;
    let frozen = opt.frozen.clone();
    let mut updates: BTreeMap<String, Tensor> = BTreeMap::new();
    for (name, node) in &registry {
        if is_frozen(&frozen, name) {
            continue;
        }
        updates.insert(name.clone(), grads.get(*node)?.clone());
    }
    for (name, param) in params.param_refs_mut() {
        if let Some(grad) = updates.get(&name) {
            opt.update(&name, param, grad, t)?;
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::testutil;
    use rand::Rng;

    #[test]
    fn identical_point_sets_match_identically() {
        let pts = vec![[0.1, 0.2], [0.5, 0.5], [0.9, 0.1]];
        let m = hungarian_match(&pts, &pts).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1), (2, 2)]);
        assert!(m.unmatched_pred.is_empty());
        assert_eq!(loc_loss(&m, &pts, &pts), 0.0);
    }

    #[test]
    fn single_pair_and_empty_inputs() {
        let m = hungarian_match(&[[0.3, 0.3]], &[[0.8, 0.4]]).unwrap();
        assert_eq!(m.pairs, vec![(0, 0)]);

        let empty = hungarian_match(&[], &[[0.5, 0.5]]).unwrap();
        assert!(empty.pairs.is_empty());
        assert_eq!(empty.unmatched_gt, vec![0]);
    }

    #[test]
    fn out_of_range_points_are_rejected() {
        assert!(hungarian_match(&[[1.2, 0.0]], &[[0.5, 0.5]]).is_err());
    }

    // Exhaustive matcher with the same lexicographic preference, used as
    // the assignment oracle.
    pub(crate) fn brute_force_match(pred: &[[f64; 2]], gt: &[[f64; 2]]) -> (Vec<(usize, usize)>, f64) {
        let m = pred.len();
        let g = gt.len();
        let want = m.min(g);
        let mut best: Option<(Vec<(usize, usize)>, f64)> = None;
        #[allow(clippy::too_many_arguments)]
        fn recurse(
            i: usize,
            m: usize,
            g: usize,
            want: usize,
            used: &mut Vec<bool>,
            current: &mut Vec<(usize, usize)>,
            cost_so_far: f64,
            pred: &[[f64; 2]],
            gt: &[[f64; 2]],
            best: &mut Option<(Vec<(usize, usize)>, f64)>,
        ) {
            if current.len() == want {
                if best.as_ref().is_none_or(|(_, c)| cost_so_far < c - 1e-12) {
                    *best = Some((current.clone(), cost_so_far));
                }
                return;
            }
            if i == m {
                return;
            }
            // Columns in ascending order, then "skip this row" if enough
            // rows remain to fill the quota.
            for j in 0..g {
                if !used[j] {
                    used[j] = true;
                    current.push((i, j));
                    let c = (pred[i][0] - gt[j][0]).abs() + (pred[i][1] - gt[j][1]).abs();
                    recurse(i + 1, m, g, want, used, current, cost_so_far + c, pred, gt, best);
                    current.pop();
                    used[j] = false;
                }
            }
            if m - i > want - current.len() {
                recurse(i + 1, m, g, want, used, current, cost_so_far, pred, gt, best);
            }
        }
        let mut used = vec![false; g];
        let mut current = Vec::new();
        recurse(0, m, g, want, &mut used, &mut current, 0.0, pred, gt, &mut best);
        best.unwrap_or((Vec::new(), 0.0))
    }

    #[test]
    fn random_instances_match_brute_force() {
        for seed in 0..200u64 {
            let mut rng = testutil::rng(seed);
            let m = testutil::random_int(&mut rng, 1, 6) as usize;
            let g = testutil::random_int(&mut rng, 1, 6) as usize;
            let pred: Vec<[f64; 2]> = (0..m)
                .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
                .collect();
            let gt: Vec<[f64; 2]> = (0..g)
                .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
                .collect();
            let got = hungarian_match(&pred, &gt).unwrap();
            let (want_pairs, want_cost) = brute_force_match(&pred, &gt);
            let got_cost: f64 = got
                .pairs
                .iter()
                .map(|&(p, q)| (pred[p][0] - gt[q][0]).abs() + (pred[p][1] - gt[q][1]).abs())
                .sum();
            assert!((got_cost - want_cost).abs() < 1e-9, "seed {seed}");
            assert_eq!(got.pairs, want_pairs, "seed {seed}");
            assert_eq!(got.pairs.len(), m.min(g));
        }
    }

    #[test]
    fn four_by_four_matches_all_24_permutations() {
        let mut rng = testutil::rng(500);
        for _ in 0..20 {
            let pred: Vec<[f64; 2]> = (0..4)
                .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
                .collect();
            let gt: Vec<[f64; 2]> = (0..4)
                .map(|_| [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)])
                .collect();
            let got = hungarian_match(&pred, &gt).unwrap();
            let got_cost: f64 = got
                .pairs
                .iter()
                .map(|&(p, q)| l1(pred[p], gt[q]))
                .sum();
            // All 24 permutations, explicitly.
            let mut best = f64::INFINITY;
            let perm4: Vec<[usize; 4]> = {
                let mut out = Vec::new();
                for a in 0..4 {
                    for b in 0..4 {
                        for c in 0..4 {
                            for d in 0..4 {
                                let p = [a, b, c, d];
                                let mut seen = [false; 4];
                                if p.iter().all(|&x| !std::mem::replace(&mut seen[x], true)) {
                                    out.push(p);
                                }
                            }
                        }
                    }
                }
                out
            };
            assert_eq!(perm4.len(), 24);
            for p in perm4 {
                let cost: f64 = (0..4).map(|i| l1(pred[i], gt[p[i]])).sum();
                best = best.min(cost);
            }
            assert!((got_cost - best).abs() < 1e-9);
        }
    }

    #[test]
    fn ties_prefer_lexicographic_pairs() {
        // Two predictions equidistant from two ground-truth points; costs
        // are exact quarters so tie checks hit exactly.
        let pred = vec![[0.25, 0.25], [0.75, 0.25]];
        let gt = vec![[0.25, 0.75], [0.75, 0.75]];
        // All four pairings cost 0.5 per pair; both complete matchings
        // total 1.0. Lexicographic order demands (0,0),(1,1).
        let m = hungarian_match(&pred, &gt).unwrap();
        assert_eq!(m.pairs, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn loc_loss_values() {
        let m = MatchResult {
            pairs: vec![(0, 0)],
            unmatched_pred: vec![],
            unmatched_gt: vec![],
        };
        let loss = loc_loss(&m, &[[0.3, 0.5]], &[[0.4, 0.7]]);
        assert!((loss - 0.3).abs() < 1e-12);

        let empty = MatchResult {
            pairs: vec![],
            unmatched_pred: vec![0],
            unmatched_gt: vec![],
        };
        assert_eq!(loc_loss(&empty, &[[0.3, 0.5]], &[]), 0.0);
    }

    #[test]
    fn focal_loss_known_values() {
        // Single positive at y = 0.5 with alpha 0.25, gamma 2:
        // -0.25 * 0.25 * ln 0.5.
        let y = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
        let t = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let got = focal_loss(&y, &t, FocalParams { alpha: 0.25, gamma: 2.0 }).unwrap();
        let want = -0.25 * 0.25 * 0.5f64.ln();
        assert!((got - want).abs() < 1e-12);
        assert!((got - 0.043322).abs() < 1e-6);
    }

    #[test]
    fn focal_with_gamma_zero_is_half_bce() {
        let mut rng = testutil::rng(33);
        let logits = testutil::random_tensor(&mut rng, vec![4, 3]);
        let y = tensor::sigmoid_map(&logits).unwrap();
        let t = Tensor::new(
            vec![4, 3],
            (0..12).map(|i| f64::from(i % 2)).collect(),
        )
        .unwrap();
        let got = focal_loss(&y, &t, FocalParams { alpha: 0.5, gamma: 0.0 }).unwrap();
        // Mean binary cross-entropy.
        let bce: f64 = y
            .data()
            .iter()
            .zip(t.data())
            .map(|(&p, &t)| if t == 1.0 { -p.ln() } else { -(1.0 - p).ln() })
            .sum::<f64>()
            / 12.0;
        assert!((got - 0.5 * bce).abs() < 1e-12);
    }

    #[test]
    fn focal_positive_term_vanishes_as_y_approaches_one() {
        let t = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let fp = FocalParams::default();
        let mut prev = f64::INFINITY;
        for y in [0.9, 0.99, 0.9999, 1.0 - 1e-9] {
            let loss = focal_loss(&Tensor::new(vec![1, 1], vec![y]).unwrap(), &t, fp).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-17);
    }

    #[test]
    fn focal_rejects_saturated_entries() {
        let y = Tensor::new(vec![1, 2], vec![0.5, 1.0]).unwrap();
        let t = Tensor::zeros(vec![1, 2]);
        assert!(focal_loss(&y, &t, FocalParams::default()).is_err());
    }

    #[test]
    fn focal_node_matches_plain_and_finite_differences() {
        let mut rng = testutil::rng(34);
        let logits = testutil::random_tensor(&mut rng, vec![3, 4]);
        let y0 = tensor::sigmoid_map(&logits).unwrap();
        let targets = Tensor::new(
            vec![3, 4],
            (0..12).map(|i| f64::from(i % 3 == 0)).collect(),
        )
        .unwrap();
        let fp = FocalParams::default();

        let mut tape = Tape::new();
        let y = tape.leaf(y0.clone());
        let loss = focal_loss_node(&mut tape, y, &targets, fp).unwrap();
        let plain = focal_loss(&y0, &targets, fp).unwrap();
        assert!((tape.scalar_value(loss).unwrap() - plain).abs() < 1e-12);

        let analytic = tape.grad(loss).unwrap().get(y).unwrap().clone();
        let numeric = testutil::fd_gradient(|t| focal_loss(t, &targets, fp).unwrap(), &y0, 1e-6);
        testutil::assert_close_rel(&analytic, &numeric, 1e-6);
    }

    #[test]
    fn total_loss_is_the_weighted_sum() {
        let w = LossWeights {
            lambda_loc: 2.0,
            lambda_cls: 1.0,
        };
        assert!((total_loss(0.3, 0.04, w) - 0.64).abs() < 1e-12);
        let only_cls = LossWeights {
            lambda_loc: 0.0,
            lambda_cls: 1.0,
        };
        assert_eq!(total_loss(5.0, 0.25, only_cls), 0.25);
        let unit = LossWeights::default();
        assert_eq!(total_loss(0.5, 0.25, unit), 0.75);
    }

    #[test]
    fn total_loss_is_linear_in_each_argument() {
        let w = LossWeights {
            lambda_loc: 1.5,
            lambda_cls: 0.5,
        };
        for i in 0..10 {
            let a = i as f64 * 0.1;
            let base = total_loss(a, 0.2, w);
            let bumped = total_loss(a + 1.0, 0.2, w);
            assert!((bumped - base - w.lambda_loc).abs() < 1e-12);
            let bumped_cls = total_loss(a, 1.2, w);
            assert!((bumped_cls - total_loss(a, 0.2, w) - w.lambda_cls).abs() < 1e-12);
        }
    }

    #[test]
    fn adam_with_zero_gradient_changes_nothing() {
        let mut opt = OptimizerState::new(0.01, vec![]);
        let mut param = Tensor::new(vec![2], vec![0.5, -0.5]).unwrap();
        let before = param.clone();
        let zero = Tensor::zeros(vec![2]);
        opt.update("p", &mut param, &zero, 1).unwrap();
        assert_eq!(param, before);
    }
}
