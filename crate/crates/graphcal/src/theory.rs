//! Numerical certification of the method's theory at desk scale: the
//! temperature-equivalent single-node update rule, the closed-form
//! final-layer weights, centroid-distance monotonicity under reduced
//! final-layer decay, and the logit decomposition into intra-/inter-class
//! similarity sums.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gcnmodel::{predict, train, ModelConfig};
use crate::graphdata::{Graph, NormalizedAdjacency, SplitMasks};
use crate::metrics;
use crate::numerics::{matmul, softmax_rows, DenseMatrix};

/// Evidence from one single-node update check: the formula-side quantities
/// and the residual against the explicitly updated softmax.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremOneCheck {
    pub tau: f64,
    pub b: Vec<f64>,
    pub psi: Vec<Vec<f64>>,
    pub s_formula: Vec<f64>,
    pub s_direct: Vec<f64>,
    pub max_abs_residual: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClosedFormCheck {
    pub w_optimized: DenseMatrix,
    pub w_closed: DenseMatrix,
    pub relative_residual: f64,
    pub grad_norm_at_optimum: f64,
    pub grad_norm_at_closed: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidSweepResult {
    pub lambdas: Vec<f64>,
    pub mean_centroid_distance: Vec<f64>,
    pub test_accuracy: Vec<f64>,
    pub test_ece: Vec<f64>,
}

fn softmax_vec(z: &[f64]) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = z.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|&e| e / sum).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Column i of `w` dotted with `h`.
fn col_dot(w: &DenseMatrix, i: usize, h: &[f64]) -> f64 {
    (0..w.rows).map(|r| w.get(r, i) * h[r]).sum()
}

/// Check the single-node SGD update in two independent ways: explicitly
/// applying W' = (1 - eta*lambda) W - eta (s - y) h and evaluating the next
/// softmax, versus the temperature form built from tau = 1/(1 - eta*lambda),
/// b_i = W_{:,i}^T h', and pairwise factors psi.
pub fn verify_theorem1(
    w: &DenseMatrix,
    h: &[f64],
    h_next: &[f64],
    label: usize,
    eta: f64,
    lambda_final: f64,
) -> Result<TheoremOneCheck> {
    let c = w.cols;
    if h.len() != w.rows || h_next.len() != w.rows {
        return Err(Error::DimensionMismatch(format!(
            "representation length {} vs {} weight rows",
            h.len(),
            w.rows
        )));
    }
    if label >= c {
        return Err(Error::InvalidInput(format!("label {label} >= {c}")));
    }
    if eta * lambda_final >= 1.0 {
        return Err(Error::InvalidInput(format!(
            "eta * lambda = {} >= 1: tau undefined",
            eta * lambda_final
        )));
    }

    // current probabilities from z = W^T h
    let z: Vec<f64> = (0..c).map(|i| col_dot(w, i, h)).collect();
    let s = softmax_vec(&z);

    // direct route: apply the update, evaluate softmax(W'^T h')
    let mut w_next = w.clone();
    for i in 0..c {
        let coeff = s[i] - if i == label { 1.0 } else { 0.0 };
        for r in 0..w.rows {
            let v = (1.0 - eta * lambda_final) * w.get(r, i) - eta * coeff * h[r];
            w_next.set(r, i, v);
        }
    }
    let z_next: Vec<f64> = (0..c).map(|i| col_dot(&w_next, i, h_next)).collect();
    let s_direct = softmax_vec(&z_next);

    // formula route
    let tau = 1.0 / (1.0 - eta * lambda_final);
    let b: Vec<f64> = (0..c).map(|i| col_dot(w, i, h_next)).collect();
    let hh = dot(h, h_next);
    let y = |i: usize| if i == label { 1.0 } else { 0.0 };
    let mut psi = vec![vec![0.0f64; c]; c];
    for i in 0..c {
        for j in 0..c {
            psi[i][j] = (eta * (s[i] - y(i) - s[j] + y(j)) * hh).exp();
        }
    }
    let mut s_formula = vec![0.0f64; c];
    for i in 0..c {
        let num = (b[i] / tau).exp();
        let mut denom = num;
        for j in 0..c {
            if j != i {
                denom += (b[j] / tau).exp() * psi[i][j];
            }
        }
        s_formula[i] = num / denom;
    }

    let max_abs_residual = s_formula
        .iter()
        .zip(&s_direct)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    Ok(TheoremOneCheck {
        tau,
        b,
        psi,
        s_formula,
        s_direct,
        max_abs_residual,
    })
}

/// Gradient of the frozen-representation final-layer objective
/// sum_v CE_v + lambda/2 ||W||_F^2 (sum convention, matching the
/// closed-form fixed point).
fn frozen_gradient(
    w: &DenseMatrix,
    h: &DenseMatrix,
    labels: &[usize],
    mask: &[usize],
    lambda: f64,
) -> (DenseMatrix, DenseMatrix) {
    let logits = matmul(h, w).expect("dims validated by caller");
    let probs = softmax_rows(&logits);
    let mut grad = w.clone();
    grad.scale(lambda);
    for &v in mask {
        let s = probs.row(v);
        let hv = h.row(v);
        for i in 0..w.cols {
            let y = if i == labels[v] { 1.0 } else { 0.0 };
            let coeff = s[i] - y;
            for (r, &hr) in hv.iter().enumerate() {
                grad.data[r * w.cols + i] += coeff * hr;
            }
        }
    }
    (grad, probs)
}

/// The closed-form expression for W built from converged probabilities:
/// column i = (1/lambda) * sum_v (y_{v,i} - s_{v,i}) h_v.
pub fn closed_form_weights(
    h: &DenseMatrix,
    probs: &DenseMatrix,
    labels: &[usize],
    mask: &[usize],
    lambda: f64,
) -> DenseMatrix {
    let c = probs.cols;
    let mut w = DenseMatrix::zeros(h.cols, c);
    for i in 0..c {
        for &v in mask {
            let y = if i == labels[v] { 1.0 } else { 0.0 };
            let coeff = (y - probs.get(v, i)) / lambda;
            let hv = h.row(v);
            for (r, &hr) in hv.iter().enumerate() {
                w.data[r * c + i] += coeff * hr;
            }
        }
    }
    w
}

/// Optimize the frozen-representation convex problem to stationarity, then
/// compare the optimizer's W against the closed-form expression evaluated at
/// the converged probabilities (a fixed-point self-consistency check).
pub fn verify_closed_form(
    h_fixed: &DenseMatrix,
    labels: &[usize],
    mask: &[usize],
    c: usize,
    lambda_final: f64,
    tol_grad: f64,
    max_iters: usize,
) -> Result<ClosedFormCheck> {
    if lambda_final <= 0.0 {
        return Err(Error::InvalidInput("lambda must be > 0".into()));
    }
    if mask.is_empty() {
        return Err(Error::InvalidInput("empty training mask".into()));
    }
    let mut w = DenseMatrix::zeros(h_fixed.cols, c);
    // conservative Lipschitz bound for the gradient: lambda + sum ||h_v||^2
    let lipschitz: f64 =
        lambda_final + mask.iter().map(|&v| dot(h_fixed.row(v), h_fixed.row(v))).sum::<f64>();
    let step = 1.0 / lipschitz;

    let mut iterations = 0;
    let mut grad_norm = f64::INFINITY;
    let mut probs = DenseMatrix::zeros(0, 0);
    while iterations < max_iters {
        let (grad, p) = frozen_gradient(&w, h_fixed, labels, mask, lambda_final);
        probs = p;
        grad_norm = grad.frobenius_norm();
        if grad_norm < tol_grad {
            break;
        }
        w.add_scaled(&grad, -step);
        iterations += 1;
    }
    if grad_norm >= tol_grad {
        return Err(Error::Numerical(format!(
            "frozen final-layer optimization stalled at gradient norm {grad_norm} after {max_iters} iterations"
        )));
    }

    let w_closed = closed_form_weights(h_fixed, &probs, labels, mask, lambda_final);
    let diff = {
        let mut d = w.clone();
        d.add_scaled(&w_closed, -1.0);
        d.frobenius_norm()
    };
    let relative_residual = diff / w.frobenius_norm();
    let (grad_at_closed, _) = frozen_gradient(&w_closed, h_fixed, labels, mask, lambda_final);
    Ok(ClosedFormCheck {
        grad_norm_at_optimum: grad_norm,
        grad_norm_at_closed: grad_at_closed.frobenius_norm(),
        w_optimized: w,
        w_closed,
        relative_residual,
        iterations,
    })
}

/// Mean pairwise Euclidean distance between the columns of the final-layer
/// weight matrix.
pub fn mean_pairwise_centroid_distance(w: &DenseMatrix) -> f64 {
    let c = w.cols;
    if c < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..c {
        for j in (i + 1)..c {
            let d: f64 = (0..w.rows)
                .map(|r| (w.get(r, i) - w.get(r, j)).powi(2))
                .sum::<f64>()
                .sqrt();
            total += d;
            pairs += 1;
        }
    }
    total / pairs as f64
}

/// Train one model per final-layer decay value (identical seed and earlier
/// layer decays) and record centroid spread, test accuracy and test ECE.
pub fn centroid_distance_sweep(
    graph: &Graph,
    adj: &NormalizedAdjacency,
    splits: &SplitMasks,
    base_config: &ModelConfig,
    lambda_list: &[f64],
    ece_bins: usize,
) -> Result<CentroidSweepResult> {
    if lambda_list.iter().any(|&l| l <= 0.0) {
        return Err(Error::InvalidInput("sweep lambdas must be > 0".into()));
    }
    let mut result = CentroidSweepResult {
        lambdas: lambda_list.to_vec(),
        mean_centroid_distance: Vec::new(),
        test_accuracy: Vec::new(),
        test_ece: Vec::new(),
    };
    for &lambda in lambda_list {
        let mut config = base_config.clone();
        *config.per_layer_decay.last_mut().unwrap() = lambda;
        let (params, cache, _) = train(graph, adj, splits, &config)?;
        let preds = predict(&cache);
        let acc = metrics::accuracy(&preds.labels, &graph.labels, &splits.test)?;
        let confidences: Vec<f64> = splits.test.iter().map(|&v| preds.confidence[v]).collect();
        let correct: Vec<bool> = splits
            .test
            .iter()
            .map(|&v| preds.labels[v] == graph.labels[v])
            .collect();
        let ece = metrics::ece(&confidences, &correct, ece_bins)?.ece;
        result
            .mean_centroid_distance
            .push(mean_pairwise_centroid_distance(params.final_layer()));
        result.test_accuracy.push(acc);
        result.test_ece.push(ece);
    }
    Ok(result)
}

/// Check the logit decomposition: with W built from the closed form, the
/// logit W_{:,i}^T h_t must equal (1/lambda) * [intra-class inner-product
/// sum minus inter-class inner-product sum], class by class.
pub fn verify_logit_decomposition(
    h_train: &DenseMatrix,
    s_train: &DenseMatrix,
    labels: &[usize],
    lambda_final: f64,
    h_test: &[f64],
) -> Result<f64> {
    if h_test.len() != h_train.cols {
        return Err(Error::DimensionMismatch(format!(
            "test representation length {} vs {} columns",
            h_test.len(),
            h_train.cols
        )));
    }
    let mask: Vec<usize> = (0..h_train.rows).collect();
    let w = closed_form_weights(h_train, s_train, labels, &mask, lambda_final);
    let c = s_train.cols;
    let mut max_dev = 0.0f64;
    for i in 0..c {
        let via_w = col_dot(&w, i, h_test);
        // direct route through per-node inner products
        let mut intra = 0.0;
        let mut inter = 0.0;
        for &v in &mask {
            let sim = dot(h_train.row(v), h_test);
            if labels[v] == i {
                intra += (1.0 - s_train.get(v, i)) * sim;
            } else {
                inter += s_train.get(v, i) * sim;
            }
        }
        let direct = (intra - inter) / lambda_final;
        max_dev = max_dev.max((via_w - direct).abs());
    }
    Ok(max_dev)
}
