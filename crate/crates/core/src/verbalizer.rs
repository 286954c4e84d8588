//! Learned linear map from next-unit logits to task class logits.

use ndarray::{Array1, Array2, ArrayView1, ArrayViewD, ArrayViewMutD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::prompts::TaskSpec;
use crate::ulm::{softmax, ForwardOutput};
use crate::{Error, Real, Result};

/// Fully connected read-out for one task: `weight · logits + bias`.
#[derive(Clone, Debug, PartialEq)]
pub struct Verbalizer<F> {
    pub task_id: String,
    /// `C × V`.
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Verbalizer<F> {
    /// Uniform `±1/sqrt(V)` weights, zero bias.
    pub fn new(task: &TaskSpec, vocab_size: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = 1.0 / (vocab_size as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((task.classes.len(), vocab_size), || {
            F::from_f64(rng.random_range(-a..a))
        });
        Self {
            task_id: task.id(),
            weight,
            bias: Array1::zeros(task.classes.len()),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            task_id: self.task_id.clone(),
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    /// Class logits from one row of next-unit logits.
    pub fn classify_logits(&self, unit_logits: ArrayView1<F>) -> Result<Array1<F>> {
        if unit_logits.len() != self.weight.ncols() {
            return Err(Error::Dimension(format!(
                "verbalizer expects {} unit logits, got {}",
                self.weight.ncols(),
                unit_logits.len()
            )));
        }
        Ok(self.weight.dot(&unit_logits) + &self.bias)
    }

    /// Class logits read out at the last real position of `out`.
    pub fn classify(&self, out: &ForwardOutput<F>) -> Result<Array1<F>> {
        if out.next_unit_logits.nrows() == 0 {
            return Err(Error::Invalid("forward output has no real positions".into()));
        }
        self.classify_logits(out.last_logits())
    }

    /// Accumulates weight/bias gradients into `grad` and returns dL/d(unit logits).
    pub fn backward(&self, unit_logits: ArrayView1<F>, d_class: ArrayView1<F>, grad: &mut Verbalizer<F>) -> Array1<F> {
        for (mut row, &dc) in grad.weight.rows_mut().into_iter().zip(d_class.iter()) {
            row.scaled_add(dc, &unit_logits);
        }
        grad.bias += &d_class;
        self.weight.t().dot(&d_class)
    }

    pub fn visit<'a>(&'a self, f: &mut dyn FnMut(String, ArrayViewD<'a, F>)) {
        f(format!("verbalizer.{}.weight", self.task_id), self.weight.view().into_dyn());
        f(format!("verbalizer.{}.bias", self.task_id), self.bias.view().into_dyn());
    }

    pub fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(String, ArrayViewMutD<'a, F>)) {
        f(format!("verbalizer.{}.weight", self.task_id), self.weight.view_mut().into_dyn());
        f(format!("verbalizer.{}.bias", self.task_id), self.bias.view_mut().into_dyn());
    }
}

/// Softmax probabilities and the argmax class (lowest index wins ties).
pub fn predict_class<F: Real>(class_logits: ArrayView1<F>) -> (usize, Array1<F>) {
    let probs = softmax(class_logits);
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    (best, probs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use ndarray::array;
    use proptest::prelude::*;

    fn task() -> TaskSpec {
        TaskSpec::new("AD", "zh", &["hc", "ad"])
    }

    #[test]
    fn bias_only_read_out() {
        let mut vb = Verbalizer::<f64>::new(&task(), 5, 0);
        vb.weight.fill(0.0);
        vb.bias = array![0.3, -0.2];
        let out = vb.classify_logits(array![1.0, 7.0, -3.0, 2.0, 0.0].view()).unwrap();
        assert_eq!(out, array![0.3, -0.2]);
    }

    #[test]
    fn selector_row_copies_unit_logit() {
        let mut vb = Verbalizer::<f64>::new(&task(), 5, 0);
        vb.weight.fill(0.0);
        vb.weight[[0, 3]] = 1.0;
        let logits = array![0.1, 0.2, 0.3, -4.5, 0.5];
        assert_eq!(vb.classify_logits(logits.view()).unwrap()[0], -4.5);
    }

    #[test]
    fn matches_double_loop() {
        let vb = Verbalizer::<f64>::new(&task(), 7, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = Array1::from_shape_simple_fn(7, || rng.random_range(-3.0..3.0));
        let got = vb.classify_logits(logits.view()).unwrap();
        for c in 0..2 {
            let mut acc = vb.bias[c];
            for v in 0..7 {
                acc += vb.weight[[c, v]] * logits[v];
            }
            assert!((acc - got[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_width_rejected() {
        let vb = Verbalizer::<f64>::new(&task(), 7, 9);
        assert!(vb.classify_logits(array![1.0, 2.0].view()).is_err());
    }

    #[test]
    fn predict_class_edges() {
        let (c, p) = predict_class(array![0.0f64, 0.0].view());
        assert_eq!(c, 0);
        assert_eq!(p, array![0.5, 0.5]);
        let (c, p) = predict_class(array![10.0f64, -10.0].view());
        assert_eq!(c, 0);
        assert!(p[0] >= 0.9999);
    }

    proptest! {
        #[test]
        fn probabilities_are_shift_invariant(xs in prop::collection::vec(-50.0f64..50.0, 2..6), c in -100.0f64..100.0) {
            let a = Array1::from(xs.clone());
            let b = a.mapv(|v| v + c);
            let (ca, pa) = predict_class(a.view());
            let (cb, pb) = predict_class(b.view());
            prop_assert!((pa.sum() - 1.0).abs() < 1e-6);
            prop_assert_eq!(ca, cb);
            for (x, y) in pa.iter().zip(pb.iter()) {
                prop_assert!((x - y).abs() < 1e-9);
            }
        }

        #[test]
        fn classify_is_linear_without_bias(alpha in -4.0f64..4.0, seed in 0u64..1000) {
            let vb = Verbalizer::<f64>::new(&task(), 6, seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 1);
            let x = Array1::from_shape_simple_fn(6, || rng.random_range(-2.0..2.0));
            let lhs = vb.classify_logits(x.mapv(|v| alpha * v).view()).unwrap();
            let rhs = vb.classify_logits(x.view()).unwrap() * alpha;
            for (l, r) in lhs.iter().zip(rhs.iter()) {
                prop_assert!((l - r).abs() < 1e-9);
            }
        }
    }
}
