use crate::{AutodiffError, ParamSet, Real, Result};

pub trait Optimizer<T: Real> {
    /// Applies one update from the accumulated gradients, then clears them.
    fn step(&mut self, params: &mut ParamSet<T>) -> Result<()>;
}

#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Adam with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub cfg: AdamConfig,
    t: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

fn moment_buffers<T: Real>(params: &ParamSet<T>) -> Vec<Vec<T>> {
    params
        .iter()
        .map(|p| vec![T::zero(); p.value.numel()])
        .collect()
}

fn check_grads<T: Real>(params: &ParamSet<T>, state_len: usize) -> Result<()> {
    if params.len() != state_len {
        return Err(AutodiffError::Validation(format!(
            "optimizer tracks {state_len} parameters, set has {}",
            params.len()
        )));
    }
    for p in params.iter().filter(|p| p.requires_grad) {
        if p.grad.is_none() {
            return Err(AutodiffError::MissingGradient(p.name.clone()));
        }
    }
    Ok(())
}

impl<T: Real> Adam<T> {
    pub fn new(params: &ParamSet<T>, cfg: AdamConfig) -> Self {
        Self {
            cfg,
            t: 0,
            m: moment_buffers(params),
            v: moment_buffers(params),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

impl<T: Real> Optimizer<T> for Adam<T> {
    fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        check_grads(params, self.m.len())?;
        self.t += 1;
        let c = |v: f64| T::from_f64_lossy(v);
        let (b1, b2) = (c(self.cfg.beta1), c(self.cfg.beta2));
        let bc1 = c(1.0 - self.cfg.beta1.powi(self.t as i32));
        let bc2 = c(1.0 - self.cfg.beta2.powi(self.t as i32));
        let (lr, eps) = (c(self.cfg.lr), c(self.cfg.eps));
        for (i, p) in params.iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            let g = p.grad.take().expect("checked above");
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((x, &gi), mi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *mi = b1 * *mi + (T::one() - b1) * gi;
                *vi = b2 * *vi + (T::one() - b2) * gi * gi;
                let m_hat = *mi / bc1;
                let v_hat = *vi / bc2;
                *x -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RmsPropConfig {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
}

impl RmsPropConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            decay: 0.99,
            eps: 1e-8,
        }
    }
}

/// RMSprop: `v <- decay v + (1 - decay) g^2`, `x <- x - lr g / (sqrt(v) + eps)`.
#[derive(Debug, Clone)]
pub struct RmsProp<T> {
    pub cfg: RmsPropConfig,
    t: u64,
    v: Vec<Vec<T>>,
}

impl<T: Real> RmsProp<T> {
    pub fn new(params: &ParamSet<T>, cfg: RmsPropConfig) -> Self {
        Self {
            cfg,
            t: 0,
            v: moment_buffers(params),
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

impl<T: Real> Optimizer<T> for RmsProp<T> {
    fn step(&mut self, params: &mut ParamSet<T>) -> Result<()> {
        check_grads(params, self.v.len())?;
        self.t += 1;
        let c = |v: f64| T::from_f64_lossy(v);
        let (decay, lr, eps) = (c(self.cfg.decay), c(self.cfg.lr), c(self.cfg.eps));
        for (i, p) in params.iter_mut().enumerate() {
            if !p.requires_grad {
                continue;
            }
            let g = p.grad.take().expect("checked above");
            for ((x, &gi), vi) in p
                .value
                .data_mut()
                .iter_mut()
                .zip(g.data())
                .zip(self.v[i].iter_mut())
            {
                *vi = decay * *vi + (T::one() - decay) * gi * gi;
                *x -= lr * gi / (vi.sqrt() + eps);
            }
        }
        Ok(())
    }
}
