//! Training objectives: masked prediction loss, sharpened/centered
//! probability projections, classification loss, centering state.
//!
//! Each operation exists twice: a plain-array form implementing the
//! documented contract, and a graph-builder form the trainer uses so
//! gradients flow through the student path only. Teacher-side inputs are
//! always plain arrays entering the graph as stop-gradient constants.
//!
//! Sum-vs-mean convention: losses are means over masked patches (and over
//! clips in a batch), so magnitudes are invariant to mask count and batch
//! size.

use ndarray::{Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};

/// Guard for l2 row normalization: rows with norm below this are scaled
/// by `1/eps` instead of exploding. `max(norm, eps)` keeps well-scaled
/// inputs bit-exact, unlike adding eps to the norm.
pub const NORM_EPS: f64 = 1e-6;
/// Probabilities are clamped to this floor inside logs. `max(p, eps)`
/// rather than `p + eps` so healthy probabilities stay exact.
pub const LOG_EPS: f64 = 1e-7;

/// Running center of teacher logits (EMA of their batch mean).
#[derive(Debug, Clone, PartialEq)]
pub struct CenterState {
    pub c: Array1<f64>,
    pub momentum: f64,
}

impl CenterState {
    pub fn new(k: usize, momentum: f64) -> Self {
        CenterState {
            c: Array1::zeros(k),
            momentum,
        }
    }

    pub fn k(&self) -> usize {
        self.c.len()
    }
}

fn l2_normalize_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.outer_iter_mut() {
        let norm = row.iter().map(|&v| v * v).sum::<f64>().sqrt();
        let denom = norm.max(NORM_EPS);
        row.mapv_inplace(|v| v / denom);
    }
    out
}

/// Mean over rows of the squared error between l2-normalized predictions
/// and l2-normalized targets. Targets carry no gradient by contract.
pub fn pred_loss(z_hat_m: &Array2<f64>, z_m: &Array2<f64>) -> Result<f64> {
    if z_hat_m.nrows() == 0 {
        return Err(Error::InvalidArg("prediction loss over zero rows".into()));
    }
    if z_hat_m.raw_dim() != z_m.raw_dim() {
        return Err(Error::Shape(format!(
            "prediction {:?} vs target {:?}",
            z_hat_m.shape(),
            z_m.shape()
        )));
    }
    let a = l2_normalize_rows(z_hat_m);
    let b = l2_normalize_rows(z_m);
    let n = a.nrows() as f64;
    let mut acc = 0.0;
    for (ra, rb) in a.outer_iter().zip(b.outer_iter()) {
        acc += ra
            .iter()
            .zip(rb.iter())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum::<f64>();
    }
    Ok(acc / n)
}

/// Graph form of [`pred_loss`]: `z_hat_m` is a live node, targets are a
/// plain array entering as a constant.
pub fn pred_loss_on(g: &mut Graph, z_hat_m: NodeId, z_m: &Array2<f64>) -> NodeId {
    let n = z_m.nrows() as f64;
    let targets = g.constant(l2_normalize_rows(z_m));
    let norm = g.l2_normalize_rows(z_hat_m, NORM_EPS);
    let diff = g.sub(norm, targets);
    let sq = g.mul(diff, diff);
    let total = g.sum_all(sq);
    g.scale(total, 1.0 / n)
}

/// Row-wise `softmax(logits / tau_s)`.
pub fn student_probs(logits: &Array2<f64>, tau_s: f64) -> Result<Array2<f64>> {
    if !(tau_s > 0.0) {
        return Err(Error::InvalidArg(format!(
            "student temperature must be positive, got {tau_s}"
        )));
    }
    Ok(softmax_rows(&logits.mapv(|v| v / tau_s)))
}

/// Row-wise `softmax((logits - C) / tau_t)`. Teacher side: no gradient.
pub fn teacher_probs(logits: &Array2<f64>, tau_t: f64, center: &CenterState) -> Result<Array2<f64>> {
    if !(tau_t > 0.0) {
        return Err(Error::InvalidArg(format!(
            "teacher temperature must be positive, got {tau_t}"
        )));
    }
    if logits.ncols() != center.k() {
        return Err(Error::Shape(format!(
            "logits K={} vs center K={}",
            logits.ncols(),
            center.k()
        )));
    }
    let mut shifted = logits.clone();
    for mut row in shifted.outer_iter_mut() {
        for (v, c) in row.iter_mut().zip(center.c.iter()) {
            *v = (*v - c) / tau_t;
        }
    }
    Ok(softmax_rows(&shifted))
}

fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        row.mapv_inplace(|v| {
            let e = (v - max).exp();
            denom += e;
            e
        });
        row.mapv_inplace(|v| v / denom);
    }
    out
}

/// Cross-entropy between target distribution rows `p` and predicted rows
/// `p_hat`: mean over rows of `-sum_k p * ln(max(p_hat, eps))`.
pub fn cls_loss(p_hat: &Array2<f64>, p: &Array2<f64>) -> Result<f64> {
    if p_hat.raw_dim() != p.raw_dim() {
        return Err(Error::Shape(format!(
            "predicted {:?} vs target {:?}",
            p_hat.shape(),
            p.shape()
        )));
    }
    if p_hat.nrows() == 0 {
        return Err(Error::InvalidArg("classification loss over zero rows".into()));
    }
    for probs in [p_hat, p] {
        if probs.iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArg("negative probabilities".into()));
        }
        for row in probs.outer_iter() {
            let s: f64 = row.sum();
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidArg(format!(
                    "probability row sums to {s}, not 1"
                )));
            }
        }
    }
    let n = p.nrows() as f64;
    let mut acc = 0.0;
    for (tr, pr) in p.outer_iter().zip(p_hat.outer_iter()) {
        for (&t, &q) in tr.iter().zip(pr.iter()) {
            acc -= t * q.max(LOG_EPS).ln();
        }
    }
    Ok(acc / n)
}

/// Graph form of the classification path: student logits go through
/// temperature softmax and log inside the graph; teacher probabilities
/// enter as constants.
pub fn cls_loss_on(
    g: &mut Graph,
    student_logits: NodeId,
    teacher_probs: &Array2<f64>,
    tau_s: f64,
) -> NodeId {
    let n = teacher_probs.nrows() as f64;
    let scaled = g.scale(student_logits, 1.0 / tau_s);
    let p_hat = g.softmax_rows(scaled);
    let log_p = g.log_clamped(p_hat, LOG_EPS);
    let targets = g.constant(teacher_probs.clone());
    let prod = g.mul(targets, log_p);
    let total = g.sum_all(prod);
    g.scale(total, -1.0 / n)
}

/// `(1 - alpha) * l_cls + alpha * l_pred`.
pub fn total_loss(l_cls: f64, l_pred: f64, alpha: f64) -> Result<f64> {
    validate_alpha(alpha)?;
    Ok((1.0 - alpha) * l_cls + alpha * l_pred)
}

pub fn validate_alpha(alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidArg(format!(
            "loss weight alpha must be in [0, 1], got {alpha}"
        )));
    }
    Ok(())
}

/// Graph combination of the two loss nodes with weight `alpha`.
pub fn total_loss_on(g: &mut Graph, l_cls: NodeId, l_pred: NodeId, alpha: f64) -> NodeId {
    let a = g.scale(l_cls, 1.0 - alpha);
    let b = g.scale(l_pred, alpha);
    g.add(a, b)
}

/// EMA centering update from the current batch of teacher logits (all
/// masked tokens pooled): `C' = m*C + (1-m)*mean(logits)`.
pub fn update_center(state: &CenterState, teacher_logits: &Array2<f64>) -> Result<CenterState> {
    if teacher_logits.nrows() == 0 {
        return Err(Error::InvalidArg("center update over zero rows".into()));
    }
    if teacher_logits.ncols() != state.k() {
        return Err(Error::Shape(format!(
            "logits K={} vs center K={}",
            teacher_logits.ncols(),
            state.k()
        )));
    }
    let mean = teacher_logits.mean_axis(Axis(0)).expect("nonempty");
    let m = state.momentum;
    Ok(CenterState {
        c: state.c.mapv(|c| c * m) + mean.mapv(|v| v * (1.0 - m)),
        momentum: m,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn pred_loss_identity_orthogonal_antipodal() {
        let z = array![[0.3, 0.4], [1.0, -2.0]];
        assert_abs_diff_eq!(pred_loss(&z, &z).unwrap(), 0.0, epsilon = 1e-15);

        // Orthogonal unit vectors: ||a - b||^2 = 2 exactly.
        let a = array![[1.0, 0.0]];
        let b = array![[0.0, 1.0]];
        assert_abs_diff_eq!(pred_loss(&a, &b).unwrap(), 2.0, epsilon = 1e-12);

        // Antipodal after normalization: 4 exactly.
        let a = array![[2.0, 0.0]];
        let b = array![[-1.0, 0.0]];
        assert_abs_diff_eq!(pred_loss(&a, &b).unwrap(), 4.0, epsilon = 1e-12);

        assert!(pred_loss(&Array2::zeros((0, 2)), &Array2::zeros((0, 2))).is_err());
        assert!(pred_loss(&a, &Array2::zeros((2, 2))).is_err());
    }

    #[test]
    fn pred_loss_graph_matches_plain() {
        let mut r = crate::rng::stream(1, "obj", &[]);
        let z_hat = Array2::from_shape_fn((5, 8), |_| r.gen_range(-1.0..1.0));
        let z = Array2::from_shape_fn((5, 8), |_| r.gen_range(-1.0..1.0));
        let plain = pred_loss(&z_hat, &z).unwrap();
        let mut g = Graph::new();
        let zh = g.leaf(z_hat.clone());
        let loss = pred_loss_on(&mut g, zh, &z);
        assert_abs_diff_eq!(g.scalar(loss), plain, epsilon = 1e-12);
    }

    #[test]
    fn student_probs_cases() {
        let logits = Array2::from_elem((3, 4), 0.7);
        let p = student_probs(&logits, 0.1).unwrap();
        for row in p.outer_iter() {
            for &v in row {
                assert_abs_diff_eq!(v, 0.25, epsilon = 1e-12);
            }
        }

        // Scalar softmax oracle: softmax(1, 0) on logits (0.1, 0)/0.1.
        let logits = array![[0.1, 0.0]];
        let p = student_probs(&logits, 0.1).unwrap();
        let e = 1.0f64.exp();
        let oracle = e / (e + 1.0);
        assert_abs_diff_eq!(p[[0, 0]], oracle, epsilon = 1e-9);
        assert_abs_diff_eq!(p[[0, 0]], 0.73106, epsilon = 1e-5);
        assert_abs_diff_eq!(p[[0, 1]], 0.26894, epsilon = 1e-5);

        // Shift invariance per row.
        let logits = array![[0.3, -0.2, 1.1], [2.0, 0.0, -1.0]];
        let shifted = logits.mapv(|v| v + 5.0);
        let a = student_probs(&logits, 0.1).unwrap();
        let b = student_probs(&shifted, 0.1).unwrap();
        for (x, y) in a.iter().zip(b.iter()) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-12);
        }

        assert!(student_probs(&logits, 0.0).is_err());
        assert!(student_probs(&logits, -1.0).is_err());
    }

    #[test]
    fn teacher_probs_cases() {
        // logits == C rows: centering cancels, uniform output.
        let mut center = CenterState::new(4, 0.9);
        center.c = Array1::from_vec(vec![0.5, -0.2, 1.0, 0.3]);
        let logits = Array2::from_shape_fn((3, 4), |(_, j)| center.c[j]);
        let p = teacher_probs(&logits, 0.07, &center).unwrap();
        for &v in p.iter() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-9);
        }

        // C = 0, equal logits: uniform.
        let center0 = CenterState::new(4, 0.9);
        let logits = Array2::from_elem((2, 4), 3.3);
        let p = teacher_probs(&logits, 0.04, &center0).unwrap();
        for &v in p.iter() {
            assert_abs_diff_eq!(v, 0.25, epsilon = 1e-9);
        }

        // Scalar softmax oracle at tau_t = 0.07.
        let center2 = CenterState::new(2, 0.9);
        let logits = array![[0.07, 0.0]];
        let p = teacher_probs(&logits, 0.07, &center2).unwrap();
        let e = 1.0f64.exp();
        assert_abs_diff_eq!(p[[0, 0]], e / (e + 1.0), epsilon = 1e-9);

        assert!(teacher_probs(&logits, 0.0, &center2).is_err());
        assert!(teacher_probs(&logits, 0.07, &CenterState::new(3, 0.9)).is_err());
    }

    #[test]
    fn cls_loss_cases() {
        // Perfect one-hot match: ~0.
        let p = array![[0.0, 1.0, 0.0]];
        let p_hat = array![[1e-9, 1.0 - 2e-9, 1e-9]];
        assert!(cls_loss(&p_hat, &p).unwrap() < 1e-8);

        // Uniform vs uniform over K=4: ln 4.
        let u = Array2::from_elem((6, 4), 0.25);
        assert_abs_diff_eq!(cls_loss(&u, &u).unwrap(), 4.0f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(cls_loss(&u, &u).unwrap(), 1.386294, epsilon = 1e-6);

        // One-hot target vs uniform over K=2048: ln 2048 = 11 ln 2.
        let k = 2048;
        let mut p = Array2::zeros((1, k));
        p[[0, 77]] = 1.0;
        let p_hat = Array2::from_elem((1, k), 1.0 / k as f64);
        let loss = cls_loss(&p_hat, &p).unwrap();
        assert_abs_diff_eq!(loss, 11.0 * 2.0f64.ln(), epsilon = 1e-9);
        assert_abs_diff_eq!(loss, 7.624619, epsilon = 1e-6);

        // Negative probabilities rejected.
        let bad = array![[1.2, -0.2]];
        let ok = array![[0.5, 0.5]];
        assert!(cls_loss(&bad, &ok).is_err());
        assert!(cls_loss(&ok, &bad).is_err());
        // Row sums off by more than 1e-5 rejected.
        let off = array![[0.6, 0.5]];
        assert!(cls_loss(&off, &ok).is_err());
    }

    #[test]
    fn cls_loss_equals_entropy_on_self() {
        let mut r = crate::rng::stream(2, "obj", &[]);
        let mut p = Array2::from_shape_fn((4, 6), |_| r.gen_range(0.01..1.0));
        for mut row in p.outer_iter_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let loss = cls_loss(&p, &p).unwrap();
        let entropy: f64 = p
            .outer_iter()
            .map(|row| -row.iter().map(|&v| v * v.ln()).sum::<f64>())
            .sum::<f64>()
            / p.nrows() as f64;
        assert_abs_diff_eq!(loss, entropy, epsilon = 1e-12);
        assert!(loss >= 0.0);

        // Exactly zero only for one-hot rows.
        let onehot = array![[1.0, 0.0, 0.0]];
        assert_abs_diff_eq!(cls_loss(&onehot, &onehot).unwrap(), 0.0, epsilon = 1e-15);
    }

    #[test]
    fn cls_loss_graph_matches_plain() {
        let mut r = crate::rng::stream(3, "obj", &[]);
        let logits = Array2::from_shape_fn((5, 7), |_| r.gen_range(-1.0..1.0));
        let tau_s = 0.1;
        let mut targets = Array2::from_shape_fn((5, 7), |_| r.gen_range(0.01..1.0));
        for mut row in targets.outer_iter_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let plain = cls_loss(&student_probs(&logits, tau_s).unwrap(), &targets).unwrap();
        let mut g = Graph::new();
        let l = g.leaf(logits.clone());
        let loss = cls_loss_on(&mut g, l, &targets, tau_s);
        assert_abs_diff_eq!(g.scalar(loss), plain, epsilon = 1e-12);
    }

    #[test]
    fn total_loss_cases() {
        assert_abs_diff_eq!(total_loss(2.0, 4.0, 1.0).unwrap(), 4.0, epsilon = 1e-15);
        assert_abs_diff_eq!(total_loss(2.0, 4.0, 0.0).unwrap(), 2.0, epsilon = 1e-15);
        assert_abs_diff_eq!(total_loss(2.0, 4.0, 0.5).unwrap(), 3.0, epsilon = 1e-15);
        assert!(total_loss(1.0, 1.0, 1.5).is_err());
        assert!(total_loss(1.0, 1.0, -0.1).is_err());

        // Linearity: value at 0.5 is the average of the endpoint values.
        let l0 = total_loss(1.7, 0.3, 0.0).unwrap();
        let l1 = total_loss(1.7, 0.3, 1.0).unwrap();
        let lh = total_loss(1.7, 0.3, 0.5).unwrap();
        assert_abs_diff_eq!(lh, 0.5 * (l0 + l1), epsilon = 1e-15);
    }

    #[test]
    fn update_center_cases() {
        let k = 3;
        let logits = array![[1.0, 2.0, 3.0], [3.0, 4.0, 5.0]];
        let mean = array![2.0, 3.0, 4.0];

        let state = CenterState {
            c: Array1::from_vec(vec![10.0, 10.0, 10.0]),
            momentum: 0.0,
        };
        let next = update_center(&state, &logits).unwrap();
        for (a, b) in next.c.iter().zip(mean.iter()) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }

        let frozen = CenterState {
            c: Array1::from_vec(vec![10.0, 10.0, 10.0]),
            momentum: 1.0,
        };
        assert_eq!(update_center(&frozen, &logits).unwrap().c, frozen.c);

        let zero = CenterState::new(k, 0.9);
        let next = update_center(&zero, &logits).unwrap();
        for (&a, &b) in next.c.iter().zip(mean.iter()) {
            assert_abs_diff_eq!(a, 0.1 * b, epsilon = 1e-12);
        }

        assert!(update_center(&zero, &Array2::zeros((0, k))).is_err());
        assert!(update_center(&zero, &Array2::zeros((2, 5))).is_err());
    }

    #[test]
    fn stop_gradient_side_gets_exact_zero() {
        // Teacher-path inputs enter as constants: backward never assigns
        // them a gradient.
        let mut r = crate::rng::stream(4, "obj", &[]);
        let z_hat = Array2::from_shape_fn((3, 4), |_| r.gen_range(-1.0..1.0));
        let z = Array2::from_shape_fn((3, 4), |_| r.gen_range(-1.0..1.0));
        let mut g = Graph::new();
        let zh = g.leaf(z_hat);
        let targets_probe = g.constant(z.clone());
        // Build the loss against the constant's value.
        let norm_t = g.l2_normalize_rows(targets_probe, NORM_EPS);
        let norm_p = g.l2_normalize_rows(zh, NORM_EPS);
        let diff = g.sub(norm_p, norm_t);
        let sq = g.mul(diff, diff);
        let loss = g.sum_all(sq);
        let grads = g.backward(loss);
        assert!(grads.get_opt(targets_probe).is_none());
        let zero = grads.get(targets_probe, (3, 4));
        assert!(zero.iter().all(|&v| v == 0.0));
        assert!(grads.get_opt(zh).is_some());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn probability_rows_sum_to_one(
            rows in 1usize..6,
            cols in 2usize..20,
            seed in 0u64..500,
            tau in prop::sample::select(vec![0.04, 0.07, 0.1, 1.0]),
        ) {
            // Head logits are bounded by the weight-norm gain (unit-norm
            // rows on both sides), so +-1.5 covers the reachable domain
            // without hitting exp underflow at the sharpest temperature.
            let mut r = crate::rng::stream(seed, "obj-prop", &[]);
            let logits = Array2::from_shape_fn((rows, cols), |_| r.gen_range(-1.5..1.5));
            let sp = student_probs(&logits, tau).unwrap();
            let center = CenterState::new(cols, 0.9);
            let tp = teacher_probs(&logits, tau, &center).unwrap();
            for p in [sp, tp] {
                for row in p.outer_iter() {
                    prop_assert!((row.sum() - 1.0).abs() < 1e-6);
                    prop_assert!(row.iter().all(|&v| v > 0.0));
                }
            }
        }

        #[test]
        fn total_loss_linear_in_alpha(
            l_cls in -5.0f64..5.0,
            l_pred in -5.0f64..5.0,
            alpha in 0.0f64..=1.0,
        ) {
            let v = total_loss(l_cls, l_pred, alpha).unwrap();
            let expected = (1.0 - alpha).mul_add(l_cls, alpha * l_pred);
            prop_assert!((v - expected).abs() < 1e-12);
        }
    }

    /// Finite-difference check of the two loss gradients w.r.t. the
    /// student-path inputs.
    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut r = crate::rng::stream(5, "obj-fd", &[]);
        let z_hat = Array2::from_shape_fn((3, 5), |_| r.gen_range(-1.0..1.0));
        let z = Array2::from_shape_fn((3, 5), |_| r.gen_range(-1.0..1.0));
        let logits = Array2::from_shape_fn((3, 6), |_| r.gen_range(-0.5..0.5));
        let mut targets = Array2::from_shape_fn((3, 6), |_| r.gen_range(0.01..1.0));
        for mut row in targets.outer_iter_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        let alpha = 0.5;
        let tau_s = 0.1;

        let eval = |zh: &Array2<f64>, lg: &Array2<f64>| -> f64 {
            let mut g = Graph::new();
            let a = g.constant(zh.clone());
            let b = g.constant(lg.clone());
            let lp = pred_loss_on(&mut g, a, &z);
            let lc = cls_loss_on(&mut g, b, &targets, tau_s);
            let t = total_loss_on(&mut g, lc, lp, alpha);
            g.scalar(t)
        };

        let mut g = Graph::new();
        let zh = g.leaf(z_hat.clone());
        let lg = g.leaf(logits.clone());
        let lp = pred_loss_on(&mut g, zh, &z);
        let lc = cls_loss_on(&mut g, lg, &targets, tau_s);
        let t = total_loss_on(&mut g, lc, lp, alpha);
        let grads = g.backward(t);
        let dzh = grads.get(zh, (3, 5));
        let dlg = grads.get(lg, (3, 6));

        let h = 1e-5;
        for r0 in 0..3 {
            for c0 in 0..5 {
                let mut plus = z_hat.clone();
                plus[[r0, c0]] += h;
                let mut minus = z_hat.clone();
                minus[[r0, c0]] -= h;
                let fd = (eval(&plus, &logits) - eval(&minus, &logits)) / (2.0 * h);
                let a = dzh[[r0, c0]];
                let denom = a.abs().max(fd.abs()).max(1e-4);
                assert!((a - fd).abs() / denom < 1e-4, "pred ({r0},{c0}): {a} vs {fd}");
            }
            for c0 in 0..6 {
                let mut plus = logits.clone();
                plus[[r0, c0]] += h;
                let mut minus = logits.clone();
                minus[[r0, c0]] -= h;
                let fd = (eval(&z_hat, &plus) - eval(&z_hat, &minus)) / (2.0 * h);
                let a = dlg[[r0, c0]];
                let denom = a.abs().max(fd.abs()).max(1e-4);
                assert!((a - fd).abs() / denom < 1e-4, "cls ({r0},{c0}): {a} vs {fd}");
            }
        }
    }
}
