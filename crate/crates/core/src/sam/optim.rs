use super::params::SamParams;
use super::SamConfig;

/// Step schedule: the base rate times `lr_decay` for every completed
/// `lr_step_epochs` block.
pub fn learning_rate(cfg: &SamConfig, epoch: usize) -> f64 {
    cfg.learning_rate * cfg.lr_decay.powi((epoch / cfg.lr_step_epochs) as i32)
}

/// Classical momentum with coupled weight decay:
/// `v = m v + (g + wd w)`, `w = w - lr v`.
#[derive(Clone, Debug)]
pub struct SgdMomentum {
    velocity: SamParams,
}

impl SgdMomentum {
    pub fn new(params: &SamParams) -> Self {
        SgdMomentum { velocity: params.zeros_like() }
    }

    pub fn velocity(&self) -> &SamParams {
        &self.velocity
    }

    pub fn step(&mut self, params: &mut SamParams, grads: &SamParams, epoch: usize) {
        let cfg = &params.config;
        let (m, wd, lr) = (cfg.momentum, cfg.weight_decay, learning_rate(cfg, epoch));
        for ((p, g), v) in params.layers.iter_mut().zip(&grads.layers).zip(&mut self.velocity.layers) {
            let pairs = p.weight.iter_mut().zip(&g.weight).zip(v.weight.iter_mut());
            let biases = p.bias.iter_mut().zip(&g.bias).zip(v.bias.iter_mut());
            for ((w, &gw), vw) in pairs.chain(biases) {
                *vw = m * *vw + (gw + wd * *w);
                *w -= lr * *vw;
            }
        }
    }
}
