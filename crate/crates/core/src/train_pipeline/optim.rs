use crate::recon_net::{CascadeModel, Gradients};

/// Adam with L2 weight decay added to the gradient (the classic coupled
/// form). Tensors without a gradient in a step are left untouched, moments
/// and step count included.
#[derive(Clone, Debug)]
pub struct Adam {
    pub learning_rate: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    pub weight_decay: f32,
    slots: Vec<Option<Moments>>,
}

#[derive(Clone, Debug)]
struct Moments {
    m: Vec<f32>,
    v: Vec<f32>,
    step: i32,
}

impl Adam {
    pub fn new(learning_rate: f64, weight_decay: f64) -> Self {
        Adam {
            learning_rate: learning_rate as f32,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: weight_decay as f32,
            slots: Vec::new(),
        }
    }

    /// Steps taken so far for tensor `index`.
    pub fn steps(&self, index: usize) -> usize {
        self.slots
            .get(index)
            .and_then(|s| s.as_ref())
            .map_or(0, |s| s.step as usize)
    }

    pub fn step(&mut self, model: &mut CascadeModel<f32>, grads: &Gradients<f32>) {
        if self.slots.len() < model.tensor_count() {
            self.slots.resize(model.tensor_count(), None);
        }
        for (i, g) in grads.computed() {
            let p = model.param_mut(i);
            let s = self.slots[i].get_or_insert_with(|| Moments {
                m: vec![0.0; p.len()],
                v: vec![0.0; p.len()],
                step: 0,
            });
            s.step += 1;
            let bc1 = 1.0 - self.beta1.powi(s.step);
            let bc2 = 1.0 - self.beta2.powi(s.step);
            let step_size = self.learning_rate / bc1;
            let bc2_sqrt = bc2.sqrt();
            for (((p, &g), m), v) in p.iter_mut().zip(g).zip(&mut s.m).zip(&mut s.v) {
                let g = g + self.weight_decay * *p;
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                let denom = v.sqrt() / bc2_sqrt + self.eps;
                *p -= step_size * *m / denom;
            }
        }
    }
}
