//! Representation-learning objectives with analytic gradients.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use super::SslError;

/// Value and gradients of the contrastive objective.
#[derive(Clone, Debug)]
pub struct ContrastiveOutput {
    pub loss: f64,
    pub grad_a: Array2<f64>,
    pub grad_b: Array2<f64>,
}

/// Normalized-temperature cross-entropy over in-batch negatives.
///
/// Rows of `z_a` and `z_b` are the two views of the same `B` images. Each of
/// the `2B` projections is an anchor whose positive is its partner view and
/// whose candidates are the other `2B − 1` projections; similarities are
/// cosines divided by `temperature`. Returns the mean anchor loss.
pub fn contrastive_loss(z_a: ArrayView2<f64>, z_b: ArrayView2<f64>, temperature: f64) -> Result<f64, SslError> {
    contrastive_loss_grad(z_a, z_b, temperature).map(|o| o.loss)
}

pub fn contrastive_loss_grad(
    z_a: ArrayView2<f64>,
    z_b: ArrayView2<f64>,
    temperature: f64,
) -> Result<ContrastiveOutput, SslError> {
    let b = z_a.nrows();
    if b < 2 {
        return Err(SslError::BatchTooSmall(b));
    }
    if z_a.dim() != z_b.dim() {
        return Err(SslError::DimensionMismatch(format!(
            "views have shapes {:?} and {:?}",
            z_a.dim(),
            z_b.dim()
        )));
    }
    if !(temperature > 0.0) {
        return Err(SslError::InvalidConfig(format!("temperature {temperature} must be positive")));
    }
    let n = 2 * b;
    let z = ndarray::concatenate(Axis(0), &[z_a, z_b]).expect("equal widths");
    let norms: Array1<f64> = z.map_axis(Axis(1), |r| r.dot(&r).sqrt().max(1e-12));
    let u = &z / &norms.view().insert_axis(Axis(1));
    let sim = u.dot(&u.t()) / temperature;

    // g[i][j] = dL/dsim[i][j]
    let mut g = Array2::<f64>::zeros((n, n));
    let mut loss = 0.0;
    for i in 0..n {
        let pos = (i + b) % n;
        let row = sim.row(i);
        let max = (0..n).filter(|&j| j != i).map(|j| row[j]).fold(f64::NEG_INFINITY, f64::max);
        let denom: f64 = (0..n).filter(|&j| j != i).map(|j| (row[j] - max).exp()).sum();
        let lse = max + denom.ln();
        loss += lse - row[pos];
        for j in (0..n).filter(|&j| j != i) {
            g[[i, j]] = (row[j] - lse).exp() / n as f64;
        }
        g[[i, pos]] -= 1.0 / n as f64;
    }
    loss /= n as f64;

    let sym = &g + &g.t();
    let du = sym.dot(&u) / temperature;
    let mut dz = Array2::<f64>::zeros((n, z.ncols()));
    for i in 0..n {
        let ui = u.row(i);
        let dui = du.row(i);
        let proj = ui.dot(&dui);
        let row = (&dui - &(&ui * proj)) / norms[i];
        dz.row_mut(i).assign(&row);
    }
    let grad_b = dz.slice(ndarray::s![b.., ..]).to_owned();
    let grad_a = dz.slice(ndarray::s![..b, ..]).to_owned();
    Ok(ContrastiveOutput { loss, grad_a, grad_b })
}

fn softmax_rows(logits: ArrayView2<f64>, shift: Option<&Array1<f64>>, temperature: f64) -> Array2<f64> {
    let mut out = logits.to_owned();
    if let Some(c) = shift {
        out -= &c.view().insert_axis(Axis(0));
    }
    out /= temperature;
    for mut row in out.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let s = row.sum();
        row /= s;
    }
    out
}

#[derive(Clone, Debug)]
pub struct DistillationOutput {
    pub loss: f64,
    /// Gradient w.r.t. the student logits; the teacher receives none.
    pub grad_student: Array2<f64>,
}

/// Cross-entropy between the centred, sharpened teacher softmax and the
/// student softmax, averaged over the batch.
pub fn self_distillation_loss(
    student_logits: ArrayView2<f64>,
    teacher_logits: ArrayView2<f64>,
    center: &Array1<f64>,
    teacher_temp: f64,
    student_temp: f64,
) -> Result<DistillationOutput, SslError> {
    if !(teacher_temp > 0.0 && student_temp > 0.0) {
        return Err(SslError::InvalidConfig("temperatures must be positive".into()));
    }
    if student_logits.dim() != teacher_logits.dim() || center.len() != student_logits.ncols() {
        return Err(SslError::DimensionMismatch("student/teacher/center widths differ".into()));
    }
    let bsz = student_logits.nrows().max(1) as f64;
    let target = softmax_rows(teacher_logits, Some(center), teacher_temp);
    let student = softmax_rows(student_logits, None, student_temp);
    let mut loss = 0.0;
    for (t_row, s_row) in target.rows().into_iter().zip(student.rows()) {
        for (&t, &s) in t_row.iter().zip(s_row.iter()) {
            if t > 0.0 {
                loss -= t * s.max(f64::MIN_POSITIVE).ln();
            }
        }
    }
    let grad_student = (&student - &target) / (student_temp * bsz);
    Ok(DistillationOutput { loss: loss / bsz, grad_student })
}

/// `center ← m·center + (1−m)·mean(teacher_logits)`.
pub fn update_center(center: &mut Array1<f64>, teacher_logits: ArrayView2<f64>, momentum: f64) {
    if let Some(mean) = teacher_logits.mean_axis(Axis(0)) {
        *center = &*center * momentum + &(mean * (1.0 - momentum));
    }
}

/// Shannon entropy (nats) of each row's softmax at `temperature`, averaged.
pub fn mean_softmax_entropy(logits: ArrayView2<f64>, temperature: f64) -> f64 {
    let p = softmax_rows(logits, None, temperature);
    let n = p.nrows().max(1) as f64;
    -p.iter().filter(|&&v| v > 0.0).map(|&v| v * v.ln()).sum::<f64>() / n
}
