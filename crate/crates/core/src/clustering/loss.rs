//! Neighbour-consistency objective with an entropy penalty on the mean assignment.

use ndarray::{Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, Axis};

use super::ClusterError;

/// Tolerance for accepting a vector as a probability distribution.
pub const DIST_TOL: f64 = 1e-6;

fn check_distribution(p: ArrayView1<f64>) -> Result<(), ClusterError> {
    let sum: f64 = p.sum();
    if p.iter().any(|&v| !(v >= -DIST_TOL) || !v.is_finite()) || (sum - 1.0).abs() > DIST_TOL {
        return Err(ClusterError::NotADistribution(format!("entries sum to {sum}")));
    }
    Ok(())
}

fn xlogx(v: f64) -> f64 {
    if v > 0.0 {
        v * v.ln()
    } else {
        0.0
    }
}

/// `Σ p ln p` with `0 ln 0 = 0`; lies in `[−ln C, 0]`.
pub fn entropy_regularizer(mean_probs: ArrayView1<f64>) -> Result<f64, ClusterError> {
    check_distribution(mean_probs)?;
    Ok(mean_probs.iter().map(|&v| xlogx(v)).sum())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FuscLoss {
    pub total: f64,
    pub consistency: f64,
    pub entropy: f64,
}

/// Switches that select the variant of the objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossOptions {
    pub lambda: f64,
    pub eps: f64,
    /// Divide the neighbour sum by the neighbour count.
    pub average_neighbors: bool,
    /// Let gradients reach the neighbour predictions.
    pub neighbor_grad: bool,
}

impl LossOptions {
    pub fn new(lambda: f64, eps: f64) -> Self {
        LossOptions { lambda, eps, average_neighbors: false, neighbor_grad: true }
    }
}

fn value(anchor: ArrayView2<f64>, neighbors: ArrayView3<f64>, opts: &LossOptions) -> FuscLoss {
    let (b, k, _) = neighbors.dim();
    let scale = if opts.average_neighbors { 1.0 / k as f64 } else { 1.0 };
    let mut consistency = 0.0;
    for i in 0..b {
        let p = anchor.row(i);
        for j in 0..k {
            let s = p.dot(&neighbors.slice(ndarray::s![i, j, ..]));
            consistency -= s.max(opts.eps).ln();
        }
    }
    consistency *= scale / b as f64;
    let mean = anchor.mean_axis(Axis(0)).expect("nonempty batch");
    let entropy = opts.lambda * mean.iter().map(|&v| xlogx(v)).sum::<f64>();
    FuscLoss { total: consistency + entropy, consistency, entropy }
}

fn check_shapes(anchor: (usize, usize), neighbors: (usize, usize, usize)) -> Result<(), ClusterError> {
    let (b, c) = anchor;
    if b == 0 || neighbors.1 == 0 || neighbors.0 != b || neighbors.2 != c {
        return Err(ClusterError::DimensionMismatch(format!(
            "anchors {anchor:?} and neighbours {neighbors:?} do not align"
        )));
    }
    Ok(())
}

/// Loss on probability inputs: `anchor` is B×C, `neighbors` is B×K′×C.
pub fn fusc_loss(
    anchor: ArrayView2<f64>,
    neighbors: ArrayView3<f64>,
    lambda: f64,
    eps: f64,
) -> Result<FuscLoss, ClusterError> {
    fusc_loss_with(anchor, neighbors, &LossOptions::new(lambda, eps))
}

pub fn fusc_loss_with(
    anchor: ArrayView2<f64>,
    neighbors: ArrayView3<f64>,
    opts: &LossOptions,
) -> Result<FuscLoss, ClusterError> {
    check_shapes(anchor.dim(), neighbors.dim())?;
    for row in anchor.rows() {
        check_distribution(row)?;
    }
    for row in neighbors.lanes(Axis(2)) {
        check_distribution(row)?;
    }
    Ok(value(anchor, neighbors, opts))
}

pub fn softmax_rows(logits: ArrayView2<f64>) -> Array2<f64> {
    let mut out = logits.to_owned();
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

/// Value and logit gradients.
#[derive(Clone, Debug)]
pub struct FuscGrad {
    pub loss: FuscLoss,
    pub grad_anchor: Array2<f64>,
    pub grad_neighbors: Array3<f64>,
}

/// Loss evaluated on pre-softmax logits, with gradients for both inputs.
pub fn fusc_loss_logits(
    anchor_logits: ArrayView2<f64>,
    neighbor_logits: ArrayView3<f64>,
    opts: &LossOptions,
) -> Result<FuscGrad, ClusterError> {
    check_shapes(anchor_logits.dim(), neighbor_logits.dim())?;
    let (b, k, c) = neighbor_logits.dim();
    let p = softmax_rows(anchor_logits);
    let flat = neighbor_logits.to_shape((b * k, c)).expect("contiguous reshape");
    let q = softmax_rows(flat.view()).into_shape_with_order((b, k, c)).expect("same size");
    let loss = value(p.view(), q.view(), opts);

    let scale = if opts.average_neighbors { 1.0 / k as f64 } else { 1.0 } / b as f64;
    let mut gp = Array2::<f64>::zeros((b, c));
    let mut gq = Array3::<f64>::zeros((b, k, c));
    for i in 0..b {
        for j in 0..k {
            let qi = q.slice(ndarray::s![i, j, ..]);
            let s = p.row(i).dot(&qi);
            if s > opts.eps {
                gp.row_mut(i).scaled_add(-scale / s, &qi);
                if opts.neighbor_grad {
                    gq.slice_mut(ndarray::s![i, j, ..]).scaled_add(-scale / s, &p.row(i));
                }
            }
        }
    }
    let mean: Array1<f64> = p.mean_axis(Axis(0)).expect("nonempty");
    let dmean = mean.mapv(|v| opts.lambda * (v.max(f64::MIN_POSITIVE).ln() + 1.0) / b as f64);
    gp += &dmean.view().insert_axis(Axis(0));

    let grad_anchor = softmax_backward(p.view(), gp.view());
    let q2 = q.to_shape((b * k, c)).expect("contiguous");
    let gq2 = gq.to_shape((b * k, c)).expect("contiguous");
    let grad_neighbors = softmax_backward(q2.view(), gq2.view()).into_shape_with_order((b, k, c)).expect("same size");
    Ok(FuscGrad { loss, grad_anchor, grad_neighbors })
}

/// `dL/dz = p ⊙ (g − ⟨g, p⟩)` row-wise.
pub fn softmax_backward(p: ArrayView2<f64>, g: ArrayView2<f64>) -> Array2<f64> {
    let mut out = Array2::zeros(p.dim());
    for ((pr, gr), mut o) in p.rows().into_iter().zip(g.rows()).zip(out.rows_mut()) {
        let dot = pr.dot(&gr);
        o.assign(&(&pr * &(&gr - dot)));
    }
    out
}
