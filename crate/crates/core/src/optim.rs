//! Decoupled-weight-decay adaptive-moment optimizer.
//!
//! Moments are stored positionally in the trainable-parameter order the
//! model's `for_each` traversal defines, which keeps stepping, EMA and
//! checkpointing aligned without string lookups on the hot path.
//! Weight decay applies to weight matrices only; biases, norm scales,
//! positional tables, the mask token and head gains are excluded.

use ndarray::Array2;

use crate::error::{Error, Result};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

const DECAY_SUFFIXES: [&str; 13] = [
    "patch_w", ".wq", ".wk", ".wv", ".wo", "ffn_w1", "ffn_w2", "in_w", "out_w", ".w1", ".w2",
    ".w3", "wn_v",
];

/// Whether decoupled weight decay applies to a parameter with this name.
pub fn weight_decay_applies(name: &str) -> bool {
    DECAY_SUFFIXES.iter().any(|s| name.ends_with(s))
}

pub struct AdamW {
    pub weight_decay: f64,
    pub step_count: u64,
    /// First/second moment per parameter, in canonical order.
    pub moments: Vec<(Array2<f64>, Array2<f64>)>,
    decay_mask: Vec<bool>,
}

impl AdamW {
    /// `params`: (name, shape) of every trainable parameter, in the
    /// order later `step` calls will visit them.
    pub fn new(params: &[(String, (usize, usize))], weight_decay: f64) -> Self {
        AdamW {
            weight_decay,
            step_count: 0,
            moments: params
                .iter()
                .map(|(_, s)| (Array2::zeros(*s), Array2::zeros(*s)))
                .collect(),
            decay_mask: params.iter().map(|(n, _)| weight_decay_applies(n)).collect(),
        }
    }

    /// Advance the shared step counter. Call once per optimization step,
    /// before the per-parameter updates.
    pub fn begin_step(&mut self) {
        self.step_count += 1;
    }

    /// Update one parameter by its position in the construction order.
    pub fn update_param(
        &mut self,
        idx: usize,
        p: &mut Array2<f64>,
        g: &Array2<f64>,
        lr: f64,
    ) -> Result<()> {
        let (m, v) = self
            .moments
            .get_mut(idx)
            .ok_or_else(|| Error::Shape(format!("parameter index {idx} out of range")))?;
        if p.raw_dim() != g.raw_dim() || p.raw_dim() != m.raw_dim() {
            return Err(Error::Shape(format!(
                "param {:?} vs grad {:?} vs moment {:?}",
                p.shape(),
                g.shape(),
                m.shape()
            )));
        }
        let t = self.step_count as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let decay = self.decay_mask[idx];
        let wd = self.weight_decay;
        ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + EPS);
            if decay {
                *p -= lr * wd * *p;
            }
        });
        Ok(())
    }

    /// One update over all parameters in construction order.
    pub fn step(
        &mut self,
        params: &mut [&mut Array2<f64>],
        grads: &[Array2<f64>],
        lr: f64,
    ) -> Result<()> {
        if params.len() != self.moments.len() || grads.len() != self.moments.len() {
            return Err(Error::Shape(format!(
                "optimizer built for {} parameters, got {} params / {} grads",
                self.moments.len(),
                params.len(),
                grads.len()
            )));
        }
        self.begin_step();
        for (idx, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update_param(idx, p, g, lr)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn converges_on_quadratic() {
        // Minimize (x - 3)^2 elementwise.
        let mut x = array![[0.0, 10.0]];
        let mut opt = AdamW::new(&[("q.w0".into(), (1, 2))], 0.0);
        for _ in 0..2000 {
            let g = x.mapv(|v| 2.0 * (v - 3.0));
            let mut refs = [&mut x];
            opt.step(&mut refs, &[g], 0.05).unwrap();
        }
        for &v in x.iter() {
            assert!((v - 3.0).abs() < 1e-3, "{v}");
        }
    }

    #[test]
    fn zero_gradient_and_zero_decay_leave_params_exact() {
        let init = array![[1.5, -2.5], [0.25, 4.0]];
        let mut x = init.clone();
        let mut opt = AdamW::new(&[("h.w1".into(), (2, 2))], 0.0);
        for _ in 0..10 {
            let g = Array2::zeros((2, 2));
            let mut refs = [&mut x];
            opt.step(&mut refs, &[g], 0.1).unwrap();
        }
        assert_eq!(x, init);
    }

    #[test]
    fn first_step_is_signed_lr() {
        // With a constant gradient, the bias-corrected first update is
        // exactly lr * sign(g) up to the eps term.
        let mut x = array![[0.0, 0.0]];
        let g = array![[0.4, -0.2]];
        let mut opt = AdamW::new(&[("e.wq".into(), (1, 2))], 0.0);
        let mut refs = [&mut x];
        opt.step(&mut refs, &[g], 0.01).unwrap();
        assert!((x[[0, 0]] + 0.01).abs() < 1e-6, "{}", x[[0, 0]]);
        assert!((x[[0, 1]] - 0.01).abs() < 1e-6, "{}", x[[0, 1]]);
    }

    #[test]
    fn decay_mask_follows_names() {
        assert!(weight_decay_applies("student.patch_w"));
        assert!(weight_decay_applies("student.blocks.0.wq"));
        assert!(weight_decay_applies("predictor.out_w"));
        assert!(weight_decay_applies("student_head.w2"));
        assert!(weight_decay_applies("student_head.wn_v"));
        assert!(!weight_decay_applies("student.patch_b"));
        assert!(!weight_decay_applies("student.pos"));
        assert!(!weight_decay_applies("predictor.mask_token"));
        assert!(!weight_decay_applies("student.blocks.0.ln1.gamma"));
        assert!(!weight_decay_applies("student_head.wn_g"));
        assert!(!weight_decay_applies("student.blocks.1.bq"));

        // Decay shrinks a decayed parameter with zero gradient, but not
        // an excluded one.
        let mut w = array![[1.0]];
        let mut b = array![[1.0]];
        let mut opt = AdamW::new(
            &[("x.wq".into(), (1, 1)), ("x.bq".into(), (1, 1))],
            0.1,
        );
        let zeros = [Array2::zeros((1, 1)), Array2::zeros((1, 1))];
        let mut refs = [&mut w, &mut b];
        opt.step(&mut refs, &zeros, 0.5).unwrap();
        assert!(w[[0, 0]] < 1.0);
        assert_eq!(b[[0, 0]], 1.0);
    }

    #[test]
    fn rejects_mismatched_lengths() {
        let mut x = array![[0.0]];
        let mut opt = AdamW::new(&[("a.w1".into(), (1, 1))], 0.0);
        let mut refs = [&mut x];
        assert!(opt.step(&mut refs, &[], 0.1).is_err());
    }
}
