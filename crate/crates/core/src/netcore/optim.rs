use super::model::ExtractorParams;
use crate::error::{Error, Result};

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<ExtractorParams>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Result<Self> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::input(format!("learning rate must be > 0, got {lr}")));
        }
        if !(momentum >= 0.0) || !(weight_decay >= 0.0) {
            return Err(Error::input("momentum and weight decay must be >= 0"));
        }
        Ok(Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: None,
        })
    }

    /// `v <- momentum * v + g + weight_decay * w`, then `w <- w - lr * v`.
    ///
    /// Parameters are left untouched if the update would be non-finite.
    pub fn step(&mut self, params: &mut ExtractorParams, grads: &ExtractorParams) -> Result<()> {
        let velocity = self
            .velocity
            .get_or_insert_with(|| ExtractorParams::zeros(params.anchors_per_cell()));
        let mut next_v = velocity.clone();
        let mut next_w = params.clone();
        let blocks = next_v
            .blocks_mut()
            .into_iter()
            .zip(next_w.blocks_mut())
            .zip(grads.blocks());
        for ((v, w), g) in blocks {
            for ((vi, wi), gi) in v.data_mut().iter_mut().zip(w.data_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= self.lr * *vi;
            }
        }
        if !next_w.all_finite() {
            return Err(Error::numeric("optimizer step produced non-finite weights"));
        }
        *velocity = next_v;
        *params = next_w;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ExtractorParams {
        let mut p = ExtractorParams::zeros(1);
        p.set_flat(0, value);
        p
    }

    #[test]
    fn zero_gradient_no_decay_is_noop() {
        let p0 = ExtractorParams::init(2, 3);
        let mut p = p0.clone();
        let mut opt = Sgd::new(0.1, 0.9, 0.0).unwrap();
        opt.step(&mut p, &ExtractorParams::zeros(2)).unwrap();
        assert_eq!(p, p0);
    }

    #[test]
    fn one_step_arithmetic() {
        let mut p = single(1.0);
        let mut opt = Sgd::new(0.1, 0.0, 0.0).unwrap();
        opt.step(&mut p, &single(1.0)).unwrap();
        assert!((p.get_flat(0) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn momentum_two_steps() {
        let mut p = single(1.0);
        let mut opt = Sgd::new(0.1, 0.9, 0.0).unwrap();
        opt.step(&mut p, &single(1.0)).unwrap();
        opt.step(&mut p, &single(1.0)).unwrap();
        assert!((p.get_flat(0) - 0.71).abs() < 1e-12);
    }

    #[test]
    fn weight_decay_pulls_toward_zero() {
        let mut p = single(2.0);
        let mut opt = Sgd::new(0.5, 0.0, 0.1).unwrap();
        opt.step(&mut p, &single(0.0)).unwrap();
        assert!((p.get_flat(0) - 1.9).abs() < 1e-15);
    }

    #[test]
    fn rejects_bad_lr_and_nonfinite_update() {
        assert!(Sgd::new(0.0, 0.9, 0.0).is_err());
        let mut p = single(1.0);
        let mut opt = Sgd::new(0.1, 0.0, 0.0).unwrap();
        let err = opt.step(&mut p, &single(f64::INFINITY)).unwrap_err();
        assert!(matches!(err, Error::Numeric(_)));
        assert_eq!(p.get_flat(0), 1.0);
    }
}
