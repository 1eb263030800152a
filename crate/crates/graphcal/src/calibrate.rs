//! Post-hoc confidence calibration: node-level representation blending
//! toward predicted class centroids (with a larger coefficient for test
//! nodes far from the training set), a temperature-scaling baseline, and
//! validation-driven hyperparameter search.
//!
//! Class-centroid-level calibration is a training-time concern (a reduced
//! final-layer decay coefficient in `ModelConfig`); everything here is
//! training-free and leaves the model untouched.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcnmodel::{predict, ForwardCache, ModelParams, Predictions};
use crate::graphdata::{partition_by_train_adjacency, Graph, SplitMasks};
use crate::metrics;
use crate::numerics::{matmul, softmax_rows, DenseMatrix};

/// Blending coefficients and the test-node partition they apply to.
/// Nodes in `v_first` have a labeled training node among their 1-hop
/// neighbors and get `alpha`; the rest (`v_second`) get `beta`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationPlan {
    pub alpha: f64,
    pub beta: f64,
    pub v_first: Vec<usize>,
    pub v_second: Vec<usize>,
}

impl CalibrationPlan {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidInput(format!("{name} = {v} outside [0,1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureModel {
    pub t: f64,
}

/// Result of node-level calibration: blended final aggregates and the
/// probabilities recomputed from them.
#[derive(Debug, Clone, PartialEq)]
pub struct CalibratedOutput {
    pub adjusted_aggregate: DenseMatrix,
    pub logits: DenseMatrix,
    pub probs: DenseMatrix,
    pub predictions: Predictions,
    /// Number of test nodes whose argmax moved relative to the input.
    pub label_flips: usize,
}

/// Blend each calibrated node's final aggregate toward its predicted class
/// centroid (the corresponding column of W^(K)):
/// h~ = coeff * W_col + (1 - coeff) * h. Rows outside the plan's partition
/// are untouched, as are the model parameters.
pub fn scar_node_level(
    cache: &ForwardCache,
    params: &ModelParams,
    preds: &Predictions,
    plan: &CalibrationPlan,
    test_set: &[usize],
) -> Result<CalibratedOutput> {
    plan.validate()?;
    let test: BTreeSet<usize> = test_set.iter().copied().collect();
    let covered: BTreeSet<usize> = plan
        .v_first
        .iter()
        .chain(plan.v_second.iter())
        .copied()
        .collect();
    if covered.len() != plan.v_first.len() + plan.v_second.len() {
        return Err(Error::InvalidInput(
            "calibration partition sets overlap".into(),
        ));
    }
    if covered != test {
        return Err(Error::InvalidInput(
            "calibration partition does not cover exactly the test set".into(),
        ));
    }

    let w = params.final_layer();
    let mut adjusted = cache.final_aggregate().clone();
    for (nodes, coeff) in [(&plan.v_first, plan.alpha), (&plan.v_second, plan.beta)] {
        if coeff == 0.0 {
            continue;
        }
        for &t in nodes.iter() {
            let class = preds.labels[t];
            let row = adjusted.row_mut(t);
            for (r, x) in row.iter_mut().enumerate() {
                *x = coeff * w.get(r, class) + (1.0 - coeff) * *x;
            }
        }
    }

    let logits = matmul(&adjusted, w)?;
    let probs = if plan.alpha == 0.0 && plan.beta == 0.0 {
        // identity blend: bitwise-unchanged probabilities
        cache.probs.clone()
    } else {
        softmax_rows(&logits)
    };
    let new_cache_probs = probs.clone();
    let predictions = predict(&ForwardCache {
        aggregates: vec![adjusted.clone()],
        pre_activations: vec![logits.clone()],
        dropout_masks: None,
        logits: logits.clone(),
        probs: new_cache_probs,
    });
    let label_flips = test_set
        .iter()
        .filter(|&&t| predictions.labels[t] != preds.labels[t])
        .count();
    Ok(CalibratedOutput {
        adjusted_aggregate: adjusted,
        logits,
        probs,
        predictions,
        label_flips,
    })
}

/// Default grid spanning every operating point reported for the method.
pub fn default_blend_grid() -> Vec<f64> {
    vec![0.0, 1e-6, 5e-6, 1e-5, 5e-5, 1e-4, 5e-4, 1e-3, 5e-3]
}

/// Evaluate every candidate (alpha, beta) with beta > alpha, plus the (0, 0)
/// identity, by blending the validation nodes (partitioned by the same
/// 1-hop rule) and scoring validation ECE. Ties break toward the smaller
/// pair lexicographically.
pub fn search_alpha_beta(
    cache: &ForwardCache,
    params: &ModelParams,
    preds: &Predictions,
    graph: &Graph,
    splits: &SplitMasks,
    grid: &[f64],
    ece_bins: usize,
) -> Result<CalibrationPlan> {
    if grid.is_empty() {
        return Err(Error::InvalidInput("empty alpha/beta grid".into()));
    }
    if splits.valid.is_empty() {
        return Err(Error::InvalidInput("empty validation set".into()));
    }
    let (val_first, _) = partition_by_train_adjacency(graph, &splits.train, &splits.valid);

    let mut candidates: Vec<(f64, f64)> = vec![(0.0, 0.0)];
    for &a in grid {
        for &b in grid {
            if b > a {
                candidates.push((a, b));
            }
        }
    }
    candidates.sort_by(|x, y| x.partial_cmp(y).unwrap());
    candidates.dedup();

    let w = params.final_layer();
    let mut best: Option<((f64, f64), f64)> = None;
    for &(alpha, beta) in &candidates {
        let val_ece = blended_validation_ece(
            cache, w, preds, graph, &splits.valid, &val_first, alpha, beta, ece_bins,
        )?;
        let better = match &best {
            None => true,
            Some((_, e)) => val_ece < *e,
        };
        if better {
            best = Some(((alpha, beta), val_ece));
        }
    }
    let ((alpha, beta), _) = best.unwrap();
    let (v_first, v_second) = partition_by_train_adjacency(graph, &splits.train, &splits.test);
    Ok(CalibrationPlan {
        alpha,
        beta,
        v_first,
        v_second,
    })
}

/// Validation ECE after blending the validation nodes with the given
/// coefficients. Only the validation rows are touched.
#[allow(clippy::too_many_arguments)]
fn blended_validation_ece(
    cache: &ForwardCache,
    w: &DenseMatrix,
    preds: &Predictions,
    graph: &Graph,
    valid: &[usize],
    val_first: &[usize],
    alpha: f64,
    beta: f64,
    ece_bins: usize,
) -> Result<f64> {
    let h = cache.final_aggregate();
    let first: BTreeSet<usize> = val_first.iter().copied().collect();
    let mut confidences = Vec::with_capacity(valid.len());
    let mut correct = Vec::with_capacity(valid.len());
    for &v in valid {
        let coeff = if first.contains(&v) { alpha } else { beta };
        let class = preds.labels[v];
        let hv = h.row(v);
        // blended logits for this node only: z_j = h~ . W_{:,j}
        let mut logits = vec![0.0f64; w.cols];
        for (j, z) in logits.iter_mut().enumerate() {
            let mut acc = 0.0;
            for r in 0..w.rows {
                let blended = coeff * w.get(r, class) + (1.0 - coeff) * hv[r];
                acc += blended * w.get(r, j);
            }
            *z = acc;
        }
        let row = DenseMatrix::from_vec(1, w.cols, logits)?;
        let probs = softmax_rows(&row);
        let mut best = 0usize;
        let mut best_p = probs.data[0];
        for (j, &p) in probs.data.iter().enumerate().skip(1) {
            if p > best_p {
                best = j;
                best_p = p;
            }
        }
        confidences.push(best_p);
        correct.push(best == graph.labels[v]);
    }
    Ok(metrics::ece(&confidences, &correct, ece_bins)?.ece)
}

/// Fit the temperature-scaling baseline: T minimizing validation NLL of
/// softmax(z / T), found by golden-section search on [0.05, 20].
pub fn fit_temperature(
    val_logits: &DenseMatrix,
    val_labels: &[usize],
) -> Result<TemperatureModel> {
    if val_logits.rows == 0 {
        return Err(Error::InvalidInput(
            "temperature fit needs at least one validation node".into(),
        ));
    }
    if val_logits.rows != val_labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} logit rows vs {} labels",
            val_logits.rows,
            val_labels.len()
        )));
    }
    let mask: Vec<usize> = (0..val_logits.rows).collect();
    let objective = |t: f64| -> f64 {
        let probs = softmax_rows(&val_logits.map(|z| z / t));
        crate::numerics::cross_entropy(&probs, val_labels, &mask)
            .map(|(l, _)| l)
            .unwrap_or(f64::INFINITY)
    };

    let inv_phi = (5.0f64.sqrt() - 1.0) / 2.0;
    let mut lo = 0.05f64;
    let mut hi = 20.0f64;
    let mut x1 = hi - inv_phi * (hi - lo);
    let mut x2 = lo + inv_phi * (hi - lo);
    let mut f1 = objective(x1);
    let mut f2 = objective(x2);
    while hi - lo > 1e-4 {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - inv_phi * (hi - lo);
            f1 = objective(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + inv_phi * (hi - lo);
            f2 = objective(x2);
        }
    }
    Ok(TemperatureModel {
        t: 0.5 * (lo + hi),
    })
}

/// softmax(z / T). The per-row argmax is unchanged for any T > 0.
pub fn apply_temperature(logits: &DenseMatrix, t: f64) -> Result<DenseMatrix> {
    if !(t > 0.0) {
        return Err(Error::InvalidInput(format!("temperature must be > 0, got {t}")));
    }
    Ok(softmax_rows(&logits.map(|z| z / t)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gcnmodel::{forward, Mode, ModelConfig, ModelParams};
    use crate::graphdata::{
        generate_csbm, make_splits, normalize_adjacency, partition_test_nodes, SyntheticSpec,
    };
    use crate::numerics::SeededRng;
    use rand::RngCore;

    fn fixture() -> (
        Graph,
        SplitMasks,
        ModelParams,
        ForwardCache,
        Predictions,
    ) {
        let spec = SyntheticSpec {
            classes: 2,
            nodes_per_class: 20,
            intra_edge_prob: 0.3,
            inter_edge_prob: 0.05,
            feature_dim: 4,
            class_mean_separation: 2.5,
            feature_noise_std: 1.0,
            seed: 21,
        };
        let graph = generate_csbm(&spec).unwrap();
        let adj = normalize_adjacency(&graph.adjacency).unwrap();
        let splits = make_splits(&graph, 5, 10, 12, 21).unwrap();
        let config = ModelConfig {
            hidden_dim: 6,
            dropout_rate: 0.0,
            per_layer_decay: vec![5e-4, 1e-4],
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&config, graph.d, graph.c, &SeededRng::new(21));
        let cache = forward(&params, &graph, &adj, Mode::Eval, 0.0, None).unwrap();
        let preds = predict(&cache);
        (graph, splits, params, cache, preds)
    }

    fn plan_for(graph: &Graph, splits: &SplitMasks, alpha: f64, beta: f64) -> CalibrationPlan {
        let (v_first, v_second) = partition_test_nodes(graph, splits);
        CalibrationPlan {
            alpha,
            beta,
            v_first,
            v_second,
        }
    }

    #[test]
    fn zero_blend_is_bitwise_identity() {
        let (graph, splits, params, cache, preds) = fixture();
        let plan = plan_for(&graph, &splits, 0.0, 0.0);
        let out = scar_node_level(&cache, &params, &preds, &plan, &splits.test).unwrap();
        assert_eq!(out.probs, cache.probs);
        assert_eq!(out.label_flips, 0);
    }

    #[test]
    fn full_blend_gives_gram_column_logits() {
        let (graph, splits, params, cache, preds) = fixture();
        let plan = plan_for(&graph, &splits, 1.0, 1.0);
        let out = scar_node_level(&cache, &params, &preds, &plan, &splits.test).unwrap();
        let w = params.final_layer();
        let gram = matmul(&w.transpose(), w).unwrap();
        for &t in &splits.test {
            let class = preds.labels[t];
            for j in 0..graph.c {
                assert!(
                    (out.logits.get(t, j) - gram.get(class, j)).abs() < 1e-12,
                    "node {t} class {j}"
                );
            }
        }
    }

    #[test]
    fn orthogonal_centroid_margin_algebra() {
        // 2 classes, orthogonal equal-norm centroids, margin 0.5, ||W1||^2=4
        let w = DenseMatrix::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap();
        let params = ModelParams {
            weights: vec![w.clone()],
        };
        // choose h so that z = W^T h has margin z1 - z2 = 0.5
        // z = (2 h0, 2 h1); pick h = (0.5, 0.25): z = (1.0, 0.5)
        let h = DenseMatrix::from_rows(&[vec![0.5, 0.25]]).unwrap();
        let logits = matmul(&h, &w).unwrap();
        let probs = softmax_rows(&logits);
        let cache = ForwardCache {
            aggregates: vec![h],
            pre_activations: vec![logits.clone()],
            dropout_masks: None,
            logits,
            probs,
        };
        let preds = predict(&cache);
        assert_eq!(preds.labels[0], 0);
        let alpha = 0.1;
        let plan = CalibrationPlan {
            alpha,
            beta: alpha,
            v_first: vec![0],
            v_second: vec![],
        };
        let out = scar_node_level(&cache, &params, &preds, &plan, &[0]).unwrap();
        let margin = out.logits.get(0, 0) - out.logits.get(0, 1);
        // (1 - alpha) * 0.5 + alpha * ||W_{:,0}||^2 = 0.45 + 0.4
        assert!((margin - 0.85).abs() < 1e-12, "margin {margin}");
    }

    #[test]
    fn blending_never_mutates_inputs_or_non_test_rows() {
        let (graph, splits, params, cache, preds) = fixture();
        let params_before = params.clone();
        let cache_before = cache.clone();
        let plan = plan_for(&graph, &splits, 0.3, 0.6);
        let out = scar_node_level(&cache, &params, &preds, &plan, &splits.test).unwrap();
        assert_eq!(params, params_before);
        assert_eq!(cache, cache_before);
        let test: BTreeSet<usize> = splits.test.iter().copied().collect();
        for v in 0..graph.n {
            if !test.contains(&v) {
                assert_eq!(
                    out.adjusted_aggregate.row(v),
                    cache.final_aggregate().row(v)
                );
            }
        }
    }

    #[test]
    fn monotone_approach_to_centroid() {
        let (graph, splits, params, cache, preds) = fixture();
        let w = params.final_layer();
        let t = splits.test[0];
        let class = preds.labels[t];
        let centroid: Vec<f64> = (0..w.rows).map(|r| w.get(r, class)).collect();
        let mut prev = f64::INFINITY;
        for i in 0..=10 {
            let alpha = i as f64 / 10.0;
            let plan = plan_for(&graph, &splits, alpha, alpha);
            let out = scar_node_level(&cache, &params, &preds, &plan, &splits.test).unwrap();
            let dist: f64 = out
                .adjusted_aggregate
                .row(t)
                .iter()
                .zip(&centroid)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            assert!(dist <= prev + 1e-12, "alpha {alpha}: {dist} > {prev}");
            prev = dist;
        }
    }

    #[test]
    fn partition_must_cover_test_set() {
        let (graph, splits, params, cache, preds) = fixture();
        let mut plan = plan_for(&graph, &splits, 0.1, 0.2);
        plan.v_second.pop();
        assert!(scar_node_level(&cache, &params, &preds, &plan, &splits.test).is_err());
        // a non-test node in the partition is also rejected
        let mut plan = plan_for(&graph, &splits, 0.1, 0.2);
        plan.v_first.push(splits.train[0]);
        assert!(scar_node_level(&cache, &params, &preds, &plan, &splits.test).is_err());
    }

    #[test]
    fn search_degenerate_grid_returns_identity() {
        let (graph, splits, params, cache, preds) = fixture();
        let plan =
            search_alpha_beta(&cache, &params, &preds, &graph, &splits, &[0.0], 10).unwrap();
        assert_eq!((plan.alpha, plan.beta), (0.0, 0.0));
    }

    #[test]
    fn search_never_worse_than_identity() {
        let (graph, splits, params, cache, preds) = fixture();
        let grid = default_blend_grid();
        let plan =
            search_alpha_beta(&cache, &params, &preds, &graph, &splits, &grid, 10).unwrap();
        let (val_first, _) = partition_by_train_adjacency(&graph, &splits.train, &splits.valid);
        let w = params.final_layer();
        let chosen = blended_validation_ece(
            &cache,
            w,
            &preds,
            &graph,
            &splits.valid,
            &val_first,
            plan.alpha,
            plan.beta,
            10,
        )
        .unwrap();
        let identity = blended_validation_ece(
            &cache,
            w,
            &preds,
            &graph,
            &splits.valid,
            &val_first,
            0.0,
            0.0,
            10,
        )
        .unwrap();
        assert!(chosen <= identity + 1e-15);
    }

    #[test]
    fn temperature_identity_at_one() {
        let z = DenseMatrix::from_rows(&[vec![0.4, -1.2, 2.0]]).unwrap();
        assert_eq!(apply_temperature(&z, 1.0).unwrap(), softmax_rows(&z));
    }

    #[test]
    fn temperature_large_t_flattens() {
        let z = DenseMatrix::from_rows(&[vec![3.0, 0.0]]).unwrap();
        let p10 = apply_temperature(&z, 10.0).unwrap();
        let p100 = apply_temperature(&z, 100.0).unwrap();
        assert!(p100.data[0] < p10.data[0]);
        assert!((p100.data[0] - 0.5).abs() < 0.01);
    }

    #[test]
    fn temperature_analytic_half() {
        let z = DenseMatrix::from_rows(&[vec![2.0, 0.0]]).unwrap();
        let p = apply_temperature(&z, 0.5).unwrap();
        let e4 = 4.0f64.exp();
        assert!((p.data[0] - e4 / (e4 + 1.0)).abs() < 1e-12);
        assert!((p.data[1] - 1.0 / (e4 + 1.0)).abs() < 1e-12);
    }

    #[test]
    fn temperature_rejects_nonpositive() {
        let z = DenseMatrix::from_rows(&[vec![1.0, 0.0]]).unwrap();
        assert!(apply_temperature(&z, 0.0).is_err());
        assert!(apply_temperature(&z, -1.0).is_err());
    }

    fn synthetic_logits(seed: u64, n: usize, c: usize, scale: f64) -> (DenseMatrix, Vec<usize>) {
        // construct logits whose argmax is correct with a probability tied
        // to the margin, giving a non-trivial NLL landscape
        let mut rng = SeededRng::new(seed);
        let mut logits = DenseMatrix::zeros(n, c);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = (rng.next_u64() % c as u64) as usize;
            for j in 0..c {
                let base = if j == label { 1.5 } else { 0.0 };
                logits.set(i, j, scale * (base + 0.8 * rng.standard_normal()));
            }
            labels.push(label);
        }
        (logits, labels)
    }

    #[test]
    fn temperature_reparameterization() {
        let (logits, labels) = synthetic_logits(5, 400, 4, 1.0);
        let t1 = fit_temperature(&logits, &labels).unwrap().t;
        let halved = logits.map(|z| z / 2.0);
        let t2 = fit_temperature(&halved, &labels).unwrap().t;
        assert!((t2 - 0.5 * t1).abs() < 1e-2, "t1 {t1}, t2 {t2}");
    }

    #[test]
    fn temperature_underconfident_model_gets_t_below_one() {
        // shrink logits so the true-class gap is too small: the model is
        // under-confident and the NLL-optimal temperature is < 1
        let (logits, labels) = synthetic_logits(6, 400, 4, 1.0);
        let t_star = fit_temperature(&logits, &labels).unwrap().t;
        let shrunk = logits.map(|z| z * t_star / 3.0);
        let t = fit_temperature(&shrunk, &labels).unwrap().t;
        assert!(t < 1.0, "fitted T = {t}");
    }

    #[test]
    fn temperature_already_optimal_gives_one() {
        let (logits, labels) = synthetic_logits(7, 500, 4, 1.0);
        let t_star = fit_temperature(&logits, &labels).unwrap().t;
        let rescaled = logits.map(|z| z / t_star);
        let t = fit_temperature(&rescaled, &labels).unwrap().t;
        assert!((t - 1.0).abs() < 1e-3, "fitted T = {t}");
    }
}
