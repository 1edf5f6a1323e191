use crate::lm::tensor::Mat;

/// Adam with optional global-norm gradient clipping.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub clip: Option<f64>,
    m: Vec<Mat>,
    v: Vec<Mat>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, clip: Option<f64>) -> Self {
        Self { lr, beta1: 0.9, beta2: 0.999, eps: 1e-8, clip, m: Vec::new(), v: Vec::new(), t: 0 }
    }

    pub fn step(&mut self, params: Vec<&mut Mat>, grads: &mut [Mat]) {
        assert_eq!(params.len(), grads.len());
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| Mat::zeros(g.rows(), g.cols())).collect();
            self.v = self.m.clone();
        }
        if let Some(c) = self.clip {
            let total: f64 = grads.iter().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
            if total > c {
                grads.iter_mut().for_each(|g| g.scale_assign(c / total));
            }
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in params.into_iter().zip(grads.iter()).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut()).zip(v.data_mut())
            {
                *mv = self.beta1 * *mv + (1.0 - self.beta1) * gv;
                *vv = self.beta2 * *vv + (1.0 - self.beta2) * gv * gv;
                *pv -= self.lr * (*mv / bc1) / ((*vv / bc2).sqrt() + self.eps);
            }
        }
    }
}
