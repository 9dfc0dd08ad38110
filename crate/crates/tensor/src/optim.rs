use crate::{Scalar, Tensor};

/// Adam with bias correction. Moment buffers are keyed by slot position,
/// so callers must pass parameters in a stable order.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    pub fn reset(&mut self) {
        self.step = 0;
        self.m.clear();
        self.v.clear();
    }

    /// One update. `grads[i]` belongs to `params[i]`; `None` means no
    /// gradient reached that slot and it is treated as zero.
    pub fn step(&mut self, params: &mut [&mut Tensor<T>], grads: &[Option<&Tensor<T>>]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        assert_eq!(self.m.len(), params.len(), "parameter set changed under the optimizer");
        self.step += 1;
        let t = self.step as i32;
        let (b1, b2) = (T::lit(self.beta1), T::lit(self.beta2));
        let bc1 = T::lit(1.0 - self.beta1.powi(t));
        let bc2 = T::lit(1.0 - self.beta2.powi(t));
        let lr = T::lit(self.lr);
        let eps = T::lit(self.eps);
        let one = T::one();
        for (i, p) in params.iter_mut().enumerate() {
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let pd = p.data_mut();
            match grads[i] {
                Some(g) => {
                    assert_eq!(g.len(), pd.len());
                    for (j, &gj) in g.data().iter().enumerate() {
                        m[j] = b1 * m[j] + (one - b1) * gj;
                        v[j] = b2 * v[j] + (one - b2) * gj * gj;
                    }
                }
                None => {
                    for j in 0..pd.len() {
                        m[j] = b1 * m[j];
                        v[j] = b2 * v[j];
                    }
                }
            }
            for j in 0..pd.len() {
                let mh = m[j] / bc1;
                let vh = v[j] / bc2;
                pd[j] = pd[j] - lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}
