//! Training objectives: masked reconstruction, cross-scale adjustment,
//! cross-scale contrastive alignment, class-balanced classification,
//! interpolation, forecasting, and the weighted total. All losses are built
//! on the tape so gradients flow to every upstream parameter.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{NodeId, Tape};

fn default_lambda() -> f64 {
    1.0
}

/// Scale factors for the adjustment, contrastive, and task terms.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct LossWeights {
    #[serde(default = "default_lambda")]
    pub lambda1: f64,
    #[serde(default = "default_lambda")]
    pub lambda2: f64,
    #[serde(default = "default_lambda")]
    pub lambda3: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights { lambda1: 1.0, lambda2: 1.0, lambda3: 1.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda1", self.lambda1), ("lambda2", self.lambda2), ("lambda3", self.lambda3)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::config(format!("{name} must be a nonnegative finite number, got {v}")));
            }
        }
        Ok(())
    }
}

/// Mean squared error over masked cells only. The mask marks the hidden
/// observations to reconstruct; values at mask-false cells never reach the
/// loss. With zero masked cells the loss is a constant 0 and the returned
/// flag is set.
pub fn recon_loss(tape: &mut Tape, xhat: NodeId, x: NodeId, mask: &[bool]) -> (NodeId, bool) {
    assert_eq!(tape.shape(xhat), tape.shape(x), "recon_loss: shape mismatch");
    if !mask.iter().any(|&m| m) {
        return (tape.constant(vec![1, 1], vec![0.0]), true);
    }
    let diff = tape.sub(xhat, x);
    (tape.masked_sq_mean(diff, mask), false)
}

/// Interpolation objective: the reconstruction loss at the finest scale with
/// an evaluation mask (held-out observations) in place of the training mask.
pub fn interp_loss(tape: &mut Tape, xhat: NodeId, x: NodeId, mask: &[bool]) -> (NodeId, bool) {
    recon_loss(tape, xhat, x, mask)
}

/// Cross-scale adjustment: pool the finer reconstruction onto the coarser
/// grid (`assignment[r]` names the coarse row receiving fine row `r`) and
/// penalize squared deviation from the coarser reconstruction over cells the
/// coarser level actually observed. Flag set when no coarse cell is
/// observed.
pub fn adjust_loss(
    tape: &mut Tape,
    xhat_fine: NodeId,
    xhat_coarse: NodeId,
    assignment: &[usize],
    coarse_obs: &[bool],
) -> Result<(NodeId, bool)> {
    let fine_rows = tape.shape(xhat_fine)[0];
    let coarse_rows = tape.shape(xhat_coarse)[0];
    let cols = tape.shape(xhat_coarse)[1];
    if tape.shape(xhat_fine)[1] != cols {
        return Err(Error::data(format!(
            "adjust_loss: channel mismatch between scales ({} vs {})",
            tape.shape(xhat_fine)[1],
            cols
        )));
    }
    if assignment.len() != fine_rows {
        return Err(Error::data(format!(
            "adjust_loss: assignment covers {} rows but the finer scale has {}",
            assignment.len(),
            fine_rows
        )));
    }
    if let Some(&bad) = assignment.iter().find(|&&w| w >= coarse_rows) {
        return Err(Error::data(format!(
            "adjust_loss: assignment target {bad} outside the coarser scale's {coarse_rows} rows"
        )));
    }
    if coarse_obs.len() != coarse_rows * cols {
        return Err(Error::data(format!(
            "adjust_loss: observation mask has {} cells, expected {}",
            coarse_obs.len(),
            coarse_rows * cols
        )));
    }
    if !coarse_obs.iter().any(|&m| m) {
        return Ok((tape.constant(vec![1, 1], vec![0.0]), true));
    }
    let pooled = tape.avg_pool_rows(xhat_fine, assignment, coarse_rows);
    let diff = tape.sub(pooled, xhat_coarse);
    Ok((tape.masked_sq_mean(diff, coarse_obs), false))
}

/// Cross-scale contrastive alignment between two batches of summary vectors
/// (rows aligned by instance). For instance i the positive is its own
/// summary at the other scale; negatives are every other instance's summary
/// at both scales. Rows are L2-normalized before the dot products so the
/// exponentials stay bounded. Mean over instances.
pub fn contrastive_loss(tape: &mut Tape, h_l: NodeId, h_lm1: NodeId) -> Result<NodeId> {
    let b = tape.shape(h_l)[0];
    if tape.shape(h_lm1)[0] != b || tape.shape(h_lm1)[1] != tape.shape(h_l)[1] {
        return Err(Error::data(format!(
            "contrastive_loss: summary shapes differ across scales ({:?} vs {:?})",
            tape.shape(h_l),
            tape.shape(h_lm1)
        )));
    }
    if b < 2 {
        return Err(Error::data(format!(
            "contrastive_loss: batch of {b} has no negatives (need at least 2 instances)"
        )));
    }
    let a = tape.l2_normalize_rows(h_l);
    let p = tape.l2_normalize_rows(h_lm1);
    let pt = tape.transpose(p);
    let cross = tape.matmul(a, pt); // cross[i][j] = h_i^(l) . h_j^(l-1)
    let at = tape.transpose(a);
    let within = tape.matmul(a, at); // within[i][j] = h_i^(l) . h_j^(l)
    let cross_exp = tape.exp(cross);
    let within_exp = tape.exp(within);
    let cross_sum = tape.row_sum(cross_exp);
    let within_sum = tape.row_sum(within_exp);
    let within_diag = tape.take_diag(within);
    let within_diag_exp = tape.exp(within_diag);
    let within_off = tape.sub(within_sum, within_diag_exp); // excludes j = i
    let denom = tape.add(cross_sum, within_off);
    let log_denom = tape.log(denom);
    let pos = tape.take_diag(cross);
    let per_instance = tape.sub(log_denom, pos);
    Ok(tape.mean_all(per_instance))
}

/// Class-balanced softmax cross-entropy: each present class contributes the
/// mean CE of its members, averaged over the classes present in the batch.
/// Classes absent from the batch are skipped and the average renormalizes
/// over those present.
pub fn cls_loss(tape: &mut Tape, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
    let b = tape.shape(logits)[0];
    let c = tape.shape(logits)[1];
    if labels.len() != b {
        return Err(Error::data(format!("cls_loss: {} labels for {} rows", labels.len(), b)));
    }
    if b == 0 {
        return Err(Error::data("cls_loss: empty batch"));
    }
    let mut counts = vec![0usize; c];
    for &y in labels {
        if y >= c {
            return Err(Error::data(format!("cls_loss: label {y} outside 0..{c}")));
        }
        counts[y] += 1;
    }
    let present = counts.iter().filter(|&&n| n > 0).count();
    let weights: Vec<f64> = labels.iter().map(|&y| 1.0 / (present * counts[y]) as f64).collect();
    Ok(tape.cross_entropy_rows(logits, labels, &weights))
}

/// Forecast objective: mean squared error over the valid ground-truth cells
/// in the horizon.
pub fn forecast_loss(tape: &mut Tape, xhat: NodeId, x: NodeId, valid: &[bool]) -> Result<NodeId> {
    assert_eq!(tape.shape(xhat), tape.shape(x), "forecast_loss: shape mismatch");
    if !valid.iter().any(|&m| m) {
        return Err(Error::data("forecast_loss: no valid ground-truth cells in the horizon"));
    }
    let diff = tape.sub(xhat, x);
    Ok(tape.masked_sq_mean(diff, valid))
}

/// The weighted combination
/// `(1/L)·Σ recon + (λ1/(L−1))·Σ adjust + (λ2/(L−1))·Σ contrast + λ3·task`.
/// Reconstruction terms cover levels 1..L; adjustment and contrastive terms
/// cover consecutive level pairs (empty slices drop their term, e.g. when a
/// batch is too small for negatives). `task` is `None` for interpolation,
/// where the finest-scale reconstruction already is the objective.
pub fn total_loss(
    tape: &mut Tape,
    recon: &[NodeId],
    adjust: &[NodeId],
    contrast: &[NodeId],
    task: Option<NodeId>,
    weights: &LossWeights,
) -> NodeId {
    let l = recon.len();
    assert!(l >= 1, "total_loss: no reconstruction terms");
    assert!(
        adjust.is_empty() || adjust.len() == l - 1,
        "total_loss: {} adjustment terms for {} levels",
        adjust.len(),
        l
    );
    assert!(
        contrast.is_empty() || contrast.len() == l - 1,
        "total_loss: {} contrastive terms for {} levels",
        contrast.len(),
        l
    );
    let sum_nodes = |tape: &mut Tape, nodes: &[NodeId]| -> Option<NodeId> {
        let mut it = nodes.iter();
        let first = *it.next()?;
        Some(it.fold(first, |acc, &n| tape.add(acc, n)))
    };
    let recon_sum = sum_nodes(tape, recon).expect("at least one reconstruction term");
    let mut total = tape.scale(recon_sum, 1.0 / l as f64);
    let pair_norm = if l > 1 { 1.0 / (l - 1) as f64 } else { 1.0 };
    if let Some(adj_sum) = sum_nodes(tape, adjust) {
        let term = tape.scale(adj_sum, weights.lambda1 * pair_norm);
        total = tape.add(total, term);
    }
    if let Some(con_sum) = sum_nodes(tape, contrast) {
        let term = tape.scale(con_sum, weights.lambda2 * pair_norm);
        total = tape.add(total, term);
    }
    if let Some(t) = task {
        let term = tape.scale(t, weights.lambda3);
        total = tape.add(total, term);
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    use crate::rng::substream;

    fn rand_mat(rng: &mut impl Rng, m: usize, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..m * n).map(|_| rng.gen_range(lo..hi)).collect()
    }

    #[test]
    fn recon_is_zero_on_exact_match() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 7.0]);
        let xhat = tape.constant(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 7.0]);
        let (loss, flag) = recon_loss(&mut tape, xhat, x, &[true; 6]);
        assert_eq!(tape.value(loss)[0], 0.0);
        assert!(!flag);
    }

    #[test]
    fn recon_single_masked_cell_is_squared_error() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 2], vec![0.0; 4]);
        let xhat = tape.constant(vec![2, 2], vec![9.0, 0.7, 9.0, 9.0]);
        let (loss, flag) = recon_loss(&mut tape, xhat, x, &[false, true, false, false]);
        assert!((tape.value(loss)[0] - 0.49).abs() < 1e-15);
        assert!(!flag);
    }

    #[test]
    fn recon_matches_loop_oracle_on_random_batches() {
        let mut rng = substream(101, "recon-oracle");
        for _ in 0..50 {
            let m = rng.gen_range(1..6);
            let n = rng.gen_range(1..5);
            let xv = rand_mat(&mut rng, m, n, -2.0, 2.0);
            let hv = rand_mat(&mut rng, m, n, -2.0, 2.0);
            let mut mask: Vec<bool> = (0..m * n).map(|_| rng.gen_bool(0.5)).collect();
            if !mask.iter().any(|&b| b) {
                mask[0] = true;
            }
            let mut tape = Tape::new();
            let x = tape.constant(vec![m, n], xv.clone());
            let xhat = tape.constant(vec![m, n], hv.clone());
            let (loss, _) = recon_loss(&mut tape, xhat, x, &mask);
            let count = mask.iter().filter(|&&b| b).count();
            let mut expect = 0.0;
            for i in 0..m * n {
                if mask[i] {
                    expect += (hv[i] - xv[i]).powi(2);
                }
            }
            expect /= count as f64;
            assert!((tape.value(loss)[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn recon_zero_mask_returns_zero_with_flag() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 2], vec![1.0, 2.0]);
        let xhat = tape.constant(vec![1, 2], vec![3.0, 4.0]);
        let (loss, flag) = recon_loss(&mut tape, xhat, x, &[false, false]);
        assert_eq!(tape.value(loss)[0], 0.0);
        assert!(flag);
    }

    #[test]
    fn adjust_constant_scales_agree() {
        let mut tape = Tape::new();
        let fine = tape.constant(vec![4, 2], vec![3.0; 8]);
        let coarse = tape.constant(vec![2, 2], vec![3.0; 4]);
        let (loss, flag) =
            adjust_loss(&mut tape, fine, coarse, &[0, 0, 1, 1], &[true; 4]).unwrap();
        assert_eq!(tape.value(loss)[0], 0.0);
        assert!(!flag);
    }

    #[test]
    fn adjust_two_cell_pooling_example() {
        let (a, b, m) = (1.3, -0.4, 0.25);
        let mut tape = Tape::new();
        let fine = tape.constant(vec![2, 1], vec![a, b]);
        let coarse = tape.constant(vec![1, 1], vec![m]);
        let (loss, _) = adjust_loss(&mut tape, fine, coarse, &[0, 0], &[true]).unwrap();
        let expect = ((a + b) / 2.0 - m).powi(2);
        assert!((tape.value(loss)[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn adjust_matches_group_by_oracle() {
        let mut rng = substream(103, "adjust-oracle");
        for _ in 0..30 {
            let coarse_rows = rng.gen_range(1..4);
            let fine_rows = coarse_rows * 2;
            let n = rng.gen_range(1..4);
            let fv = rand_mat(&mut rng, fine_rows, n, -1.0, 1.0);
            let cv = rand_mat(&mut rng, coarse_rows, n, -1.0, 1.0);
            let assign: Vec<usize> = (0..fine_rows).map(|r| r / 2).collect();
            let mut obs: Vec<bool> = (0..coarse_rows * n).map(|_| rng.gen_bool(0.7)).collect();
            if !obs.iter().any(|&b| b) {
                obs[0] = true;
            }
            let mut tape = Tape::new();
            let fine = tape.constant(vec![fine_rows, n], fv.clone());
            let coarse = tape.constant(vec![coarse_rows, n], cv.clone());
            let (loss, _) = adjust_loss(&mut tape, fine, coarse, &assign, &obs).unwrap();
            let mut expect = 0.0;
            let mut count = 0usize;
            for w in 0..coarse_rows {
                for j in 0..n {
                    if obs[w * n + j] {
                        let pooled = (fv[(2 * w) * n + j] + fv[(2 * w + 1) * n + j]) / 2.0;
                        expect += (pooled - cv[w * n + j]).powi(2);
                        count += 1;
                    }
                }
            }
            expect /= count as f64;
            assert!((tape.value(loss)[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn adjust_rejects_mismatched_assignment() {
        let mut tape = Tape::new();
        let fine = tape.constant(vec![4, 1], vec![0.0; 4]);
        let coarse = tape.constant(vec![2, 1], vec![0.0; 2]);
        assert!(adjust_loss(&mut tape, fine, coarse, &[0, 0, 1], &[true, true]).is_err());
        assert!(adjust_loss(&mut tape, fine, coarse, &[0, 0, 1, 5], &[true, true]).is_err());
    }

    #[test]
    fn contrastive_needs_two_instances() {
        let mut tape = Tape::new();
        let h1 = tape.constant(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]);
        let h2 = tape.constant(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]);
        let err = contrastive_loss(&mut tape, h1, h2).unwrap_err();
        assert!(err.to_string().contains("at least 2"));
    }

    #[test]
    fn contrastive_matches_direct_scalar_evaluation() {
        // Batch of 2 with orthonormal rows and aligned positives:
        // cross = I, within = I.
        let mut tape = Tape::new();
        let h = vec![1.0, 0.0, 0.0, 1.0];
        let hl = tape.constant(vec![2, 2], h.clone());
        let hlm1 = tape.constant(vec![2, 2], h);
        let loss = contrastive_loss(&mut tape, hl, hlm1).unwrap();
        // Per instance: -log(e / (e + e^0 + e^0)) = log(e + 2) - 1.
        let expect = (std::f64::consts::E + 2.0).ln() - 1.0;
        assert!((tape.value(loss)[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn contrastive_is_nonnegative() {
        let mut rng = substream(107, "contrastive-nonneg");
        for _ in 0..100 {
            let b = rng.gen_range(2..6);
            let n = rng.gen_range(1..8);
            let mut tape = Tape::new();
            let hl = tape.constant(vec![b, n], rand_mat(&mut rng, b, n, -3.0, 3.0));
            let hlm1 = tape.constant(vec![b, n], rand_mat(&mut rng, b, n, -3.0, 3.0));
            let loss = contrastive_loss(&mut tape, hl, hlm1).unwrap();
            assert!(tape.value(loss)[0] >= 0.0);
        }
    }

    #[test]
    fn contrastive_is_invariant_to_batch_order() {
        let mut rng = substream(109, "contrastive-perm");
        let b = 5;
        let n = 4;
        let hv = rand_mat(&mut rng, b, n, -2.0, 2.0);
        let pv = rand_mat(&mut rng, b, n, -2.0, 2.0);
        let eval = |order: &[usize]| {
            let hs: Vec<f64> = order.iter().flat_map(|&i| hv[i * n..(i + 1) * n].to_vec()).collect();
            let ps: Vec<f64> = order.iter().flat_map(|&i| pv[i * n..(i + 1) * n].to_vec()).collect();
            let mut tape = Tape::new();
            let hl = tape.constant(vec![b, n], hs);
            let hlm1 = tape.constant(vec![b, n], ps);
            let loss = contrastive_loss(&mut tape, hl, hlm1).unwrap();
            tape.value(loss)[0]
        };
        let base = eval(&[0, 1, 2, 3, 4]);
        let shuffled = eval(&[3, 0, 4, 2, 1]);
        assert!((base - shuffled).abs() < 1e-12);
    }

    #[test]
    fn cls_confident_correct_logits_vanish() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![2, 2], vec![60.0, 0.0, 0.0, 60.0]);
        let loss = cls_loss(&mut tape, logits, &[0, 1]).unwrap();
        assert!(tape.value(loss)[0] < 1e-20);
    }

    #[test]
    fn cls_uniform_two_classes_is_ln_two() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![4, 2], vec![0.3; 8]);
        let loss = cls_loss(&mut tape, logits, &[0, 1, 0, 1]).unwrap();
        assert!((tape.value(loss)[0] - 2.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cls_balanced_form_matches_loop_oracle() {
        let mut rng = substream(113, "cls-oracle");
        // 9:1 imbalance; equal per-instance CE makes balanced == unbalanced.
        let mut tape = Tape::new();
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for i in 0..10 {
            let y = usize::from(i >= 9);
            // Same margin for every instance: CE identical across the batch.
            if y == 0 {
                data.extend_from_slice(&[1.0, 0.0]);
            } else {
                data.extend_from_slice(&[0.0, 1.0]);
            }
            labels.push(y);
        }
        let logits = tape.constant(vec![10, 2], data);
        let balanced = cls_loss(&mut tape, logits, &labels).unwrap();
        let uniform_w = vec![0.1; 10];
        let unbalanced = tape.cross_entropy_rows(logits, &labels, &uniform_w);
        assert!((tape.value(balanced)[0] - tape.value(unbalanced)[0]).abs() < 1e-12);

        // Unequal per-class errors: compare against the explicit
        // (1/C_present) sum_c (1/n_c) sum_{i in c} CE_i loop.
        for _ in 0..20 {
            let b = rng.gen_range(2..8);
            let c = rng.gen_range(2..4);
            let data = rand_mat(&mut rng, b, c, -2.0, 2.0);
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
            let mut tape = Tape::new();
            let logits = tape.constant(vec![b, c], data.clone());
            let loss = cls_loss(&mut tape, logits, &labels).unwrap();
            let ce = |i: usize| {
                let xs = &data[i * c..(i + 1) * c];
                let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
                lse - xs[labels[i]]
            };
            let mut counts = vec![0usize; c];
            for &y in &labels {
                counts[y] += 1;
            }
            let present = counts.iter().filter(|&&n| n > 0).count();
            let mut expect = 0.0;
            for cls in 0..c {
                if counts[cls] > 0 {
                    let class_sum: f64 = (0..b).filter(|&i| labels[i] == cls).map(ce).sum();
                    expect += class_sum / counts[cls] as f64;
                }
            }
            expect /= present as f64;
            assert!((tape.value(loss)[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn cls_rejects_out_of_range_labels() {
        let mut tape = Tape::new();
        let logits = tape.constant(vec![1, 2], vec![0.0, 0.0]);
        assert!(cls_loss(&mut tape, logits, &[2]).is_err());
    }

    #[test]
    fn forecast_perfect_and_single_cell() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let same = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let loss = forecast_loss(&mut tape, same, x, &[true; 4]).unwrap();
        assert_eq!(tape.value(loss)[0], 0.0);

        let off = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0 + 1.5]);
        let loss2 = forecast_loss(&mut tape, off, x, &[false, false, false, true]).unwrap();
        assert!((tape.value(loss2)[0] - 2.25).abs() < 1e-15);
    }

    #[test]
    fn forecast_matches_loop_oracle_and_rejects_empty() {
        let mut rng = substream(127, "forecast-oracle");
        for _ in 0..30 {
            let m = rng.gen_range(1..5);
            let n = rng.gen_range(1..4);
            let xv = rand_mat(&mut rng, m, n, -2.0, 2.0);
            let hv = rand_mat(&mut rng, m, n, -2.0, 2.0);
            let mut valid: Vec<bool> = (0..m * n).map(|_| rng.gen_bool(0.6)).collect();
            if !valid.iter().any(|&b| b) {
                valid[0] = true;
            }
            let mut tape = Tape::new();
            let x = tape.constant(vec![m, n], xv.clone());
            let xhat = tape.constant(vec![m, n], hv.clone());
            let loss = forecast_loss(&mut tape, xhat, x, &valid).unwrap();
            let count = valid.iter().filter(|&&b| b).count();
            let expect: f64 = (0..m * n)
                .filter(|&i| valid[i])
                .map(|i| (hv[i] - xv[i]).powi(2))
                .sum::<f64>()
                / count as f64;
            assert!((tape.value(loss)[0] - expect).abs() < 1e-12);
        }
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 1], vec![0.0]);
        let xhat = tape.constant(vec![1, 1], vec![1.0]);
        assert!(forecast_loss(&mut tape, xhat, x, &[false]).is_err());
    }

    #[test]
    fn total_with_zero_lambdas_is_mean_recon() {
        let mut tape = Tape::new();
        let r1 = tape.constant(vec![1, 1], vec![0.9]);
        let r2 = tape.constant(vec![1, 1], vec![0.3]);
        let a = tape.constant(vec![1, 1], vec![5.0]);
        let c = tape.constant(vec![1, 1], vec![7.0]);
        let t = tape.constant(vec![1, 1], vec![11.0]);
        let w = LossWeights { lambda1: 0.0, lambda2: 0.0, lambda3: 0.0 };
        let total = total_loss(&mut tape, &[r1, r2], &[a], &[c], Some(t), &w);
        assert!((tape.value(total)[0] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn total_matches_recombination_oracle() {
        let mut rng = substream(131, "total-oracle");
        for _ in 0..30 {
            let l = rng.gen_range(2..6);
            let rv: Vec<f64> = (0..l).map(|_| rng.gen_range(0.0..2.0)).collect();
            let av: Vec<f64> = (0..l - 1).map(|_| rng.gen_range(0.0..2.0)).collect();
            let cv: Vec<f64> = (0..l - 1).map(|_| rng.gen_range(0.0..2.0)).collect();
            let tv = rng.gen_range(0.0..2.0);
            let w = LossWeights {
                lambda1: rng.gen_range(0.0..2.0),
                lambda2: rng.gen_range(0.0..2.0),
                lambda3: rng.gen_range(0.0..2.0),
            };
            let mut tape = Tape::new();
            let rn: Vec<_> = rv.iter().map(|&v| tape.constant(vec![1, 1], vec![v])).collect();
            let an: Vec<_> = av.iter().map(|&v| tape.constant(vec![1, 1], vec![v])).collect();
            let cn: Vec<_> = cv.iter().map(|&v| tape.constant(vec![1, 1], vec![v])).collect();
            let tn = tape.constant(vec![1, 1], vec![tv]);
            let total = total_loss(&mut tape, &rn, &an, &cn, Some(tn), &w);
            let expect = rv.iter().sum::<f64>() / l as f64
                + w.lambda1 * av.iter().sum::<f64>() / (l - 1) as f64
                + w.lambda2 * cv.iter().sum::<f64>() / (l - 1) as f64
                + w.lambda3 * tv;
            assert!((tape.value(total)[0] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn total_two_levels_uses_unit_pair_normalizer() {
        let mut tape = Tape::new();
        let r1 = tape.constant(vec![1, 1], vec![0.0]);
        let r2 = tape.constant(vec![1, 1], vec![0.0]);
        let a = tape.constant(vec![1, 1], vec![0.8]);
        let c = tape.constant(vec![1, 1], vec![0.5]);
        let w = LossWeights { lambda1: 1.0, lambda2: 1.0, lambda3: 1.0 };
        let total = total_loss(&mut tape, &[r1, r2], &[a], &[c], None, &w);
        assert!((tape.value(total)[0] - 1.3).abs() < 1e-15);
    }

    #[test]
    fn total_is_linear_in_each_lambda() {
        let mut rng = substream(137, "total-linear");
        let rv = [0.4, 1.1, 0.2];
        let av = [0.9, 0.1];
        let cv = [0.6, 1.4];
        let tv = 0.7;
        let eval = |l1: f64, l2: f64, l3: f64| {
            let mut tape = Tape::new();
            let rn: Vec<_> = rv.iter().map(|&v| tape.constant(vec![1, 1], vec![v])).collect();
            let an: Vec<_> = av.iter().map(|&v| tape.constant(vec![1, 1], vec![v])).collect();
            let cn: Vec<_> = cv.iter().map(|&v| tape.constant(vec![1, 1], vec![v])).collect();
            let tn = tape.constant(vec![1, 1], vec![tv]);
            let w = LossWeights { lambda1: l1, lambda2: l2, lambda3: l3 };
            let total = total_loss(&mut tape, &rn, &an, &cn, Some(tn), &w);
            tape.value(total)[0]
        };
        for _ in 0..10 {
            let base = [rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0), rng.gen_range(0.0..2.0)];
            for k in 0..3 {
                let mut lo = base;
                lo[k] = 0.0;
                let mut hi = base;
                hi[k] = 2.0 * base[k];
                let f0 = eval(lo[0], lo[1], lo[2]);
                let f1 = eval(base[0], base[1], base[2]);
                let f2 = eval(hi[0], hi[1], hi[2]);
                assert!((f2 - f0 - 2.0 * (f1 - f0)).abs() < 1e-12, "lambda {k}");
            }
        }
    }

    #[test]
    fn masked_losses_ignore_unmasked_cells() {
        let mut rng = substream(139, "mask-fuzz");
        for _ in 0..50 {
            let m = rng.gen_range(2..5);
            let n = rng.gen_range(1..4);
            let xv = rand_mat(&mut rng, m, n, -1.0, 1.0);
            let hv = rand_mat(&mut rng, m, n, -1.0, 1.0);
            let mut mask: Vec<bool> = (0..m * n).map(|_| rng.gen_bool(0.5)).collect();
            if !mask.iter().any(|&b| b) {
                mask[0] = true;
            }
            let eval_recon = |hvv: &[f64], xvv: &[f64]| {
                let mut tape = Tape::new();
                let x = tape.constant(vec![m, n], xvv.to_vec());
                let xhat = tape.constant(vec![m, n], hvv.to_vec());
                let (loss, _) = recon_loss(&mut tape, xhat, x, &mask);
                tape.value(loss)[0]
            };
            let base = eval_recon(&hv, &xv);
            let mut hv2 = hv.clone();
            let mut xv2 = xv.clone();
            for i in 0..m * n {
                if !mask[i] {
                    hv2[i] += rng.gen_range(10.0..100.0);
                    xv2[i] -= rng.gen_range(10.0..100.0);
                }
            }
            let poked = eval_recon(&hv2, &xv2);
            assert_eq!(base.to_bits(), poked.to_bits());
        }
    }

    #[test]
    fn adjust_ignores_cells_the_coarse_scale_never_observed() {
        let mut rng = substream(149, "adjust-mask-fuzz");
        for _ in 0..30 {
            let coarse_rows = 3;
            let fine_rows = 6;
            let n = 2;
            let fv = rand_mat(&mut rng, fine_rows, n, -1.0, 1.0);
            let cv = rand_mat(&mut rng, coarse_rows, n, -1.0, 1.0);
            let assign: Vec<usize> = (0..fine_rows).map(|r| r / 2).collect();
            let mut obs: Vec<bool> = (0..coarse_rows * n).map(|_| rng.gen_bool(0.5)).collect();
            obs[0] = true;
            let eval = |fvv: &[f64], cvv: &[f64]| {
                let mut tape = Tape::new();
                let fine = tape.constant(vec![fine_rows, n], fvv.to_vec());
                let coarse = tape.constant(vec![coarse_rows, n], cvv.to_vec());
                let (loss, _) = adjust_loss(&mut tape, fine, coarse, &assign, &obs).unwrap();
                tape.value(loss)[0]
            };
            let base = eval(&fv, &cv);
            let mut fv2 = fv.clone();
            let mut cv2 = cv.clone();
            for w in 0..coarse_rows {
                for j in 0..n {
                    if !obs[w * n + j] {
                        cv2[w * n + j] += 50.0;
                        // Fine rows pooling into this unobserved coarse cell.
                        fv2[(2 * w) * n + j] -= 30.0;
                        fv2[(2 * w + 1) * n + j] += 70.0;
                    }
                }
            }
            let poked = eval(&fv2, &cv2);
            assert_eq!(base.to_bits(), poked.to_bits());
        }
    }

    #[test]
    fn loss_weight_validation_rejects_negatives() {
        let bad = LossWeights { lambda1: -0.1, lambda2: 1.0, lambda3: 1.0 };
        assert!(bad.validate().is_err());
        assert!(LossWeights::default().validate().is_ok());
    }
}
