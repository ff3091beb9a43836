//! Small fully connected Q-network with manual forward/backward passes
//! and an Adam optimizer. Two hidden ReLU layers feed a linear output
//! head with one unit per action.

use crate::rng::StreamRng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error("input width {got} does not match network input {want}")]
    InputWidth { got: usize, want: usize },
    #[error("flat parameter vector has {got} values, network has {want}")]
    ParamCount { got: usize, want: usize },
    #[error("layer widths in serialized network ({got:?}) do not match ({want:?})")]
    LayerMismatch { got: Vec<usize>, want: Vec<usize> },
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
}

/// One dense layer stored row-major: `w[out * n_in + in]`.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct Dense {
    n_in: usize,
    n_out: usize,
    w: Vec<f64>,
    b: Vec<f64>,
}

impl Dense {
    fn forward(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.n_out {
            let row = &self.w[o * self.n_in..(o + 1) * self.n_in];
            let mut acc = self.b[o];
            for (wi, xi) in row.iter().zip(x) {
                acc += wi * xi;
            }
            out.push(acc);
        }
    }
}

/// Cached activations from a forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// input plus each layer's post-activation output
    acts: Vec<Vec<f64>>,
    /// pre-activation values per layer
    pre: Vec<Vec<f64>>,
}

/// Gradient with the same flat layout as `flat_params`.
#[derive(Debug, Clone)]
pub struct Gradient(pub Vec<f64>);

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QNetwork {
    layers: Vec<Dense>,
    widths: Vec<usize>,
}

impl QNetwork {
    /// He-style uniform init on [-sqrt(6/fan_in), sqrt(6/fan_in)],
    /// deterministic per seed. `widths` runs input -> hidden.. -> output.
    pub fn new(widths: &[usize], seed: u64) -> Self {
        assert!(widths.len() >= 2, "need at least input and output widths");
        let mut rng = StreamRng::new(seed, "net.init", 0);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for win in widths.windows(2) {
            let (n_in, n_out) = (win[0], win[1]);
            let bound = (6.0 / n_in as f64).sqrt();
            let w = (0..n_in * n_out)
                .map(|_| (2.0 * rng.next_f64() - 1.0) * bound)
                .collect();
            layers.push(Dense {
                n_in,
                n_out,
                w,
                b: vec![0.0; n_out],
            });
        }
        Self {
            layers,
            widths: widths.to_vec(),
        }
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Q-values for every action.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        Ok(self.forward_cached(x)?.acts.last().unwrap().clone())
    }

    pub fn forward_cached(&self, x: &[f64]) -> Result<ForwardCache, NetError> {
        if x.len() != self.widths[0] {
            return Err(NetError::InputWidth {
                got: x.len(),
                want: self.widths[0],
            });
        }
        let mut acts = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut buf = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            layer.forward(acts.last().unwrap(), &mut buf);
            pre.push(buf.clone());
            if i + 1 < self.layers.len() {
                for v in &mut buf {
                    *v = v.max(0.0);
                }
            }
            acts.push(buf.clone());
        }
        Ok(ForwardCache { acts, pre })
    }

    /// Gradient of 0.5 * (q[action] - target)^2 with respect to all
    /// parameters, given the cache from `forward_cached`.
    pub fn backward(&self, cache: &ForwardCache, action: usize, target: f64) -> Gradient {
        let q = cache.acts.last().unwrap();
        let err = q[action] - target;
        let n_layers = self.layers.len();
        // delta on the output layer: only the chosen action carries error
        let mut delta = vec![0.0; self.layers[n_layers - 1].n_out];
        delta[action] = err;

        let mut grad = vec![0.0; self.n_params()];
        // parameter offsets per layer, front to back
        let mut offsets = Vec::with_capacity(n_layers);
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.w.len() + l.b.len();
        }

        for li in (0..n_layers).rev() {
            let layer = &self.layers[li];
            let input = &cache.acts[li];
            let base = offsets[li];
            for o in 0..layer.n_out {
                let d = delta[o];
                let row = base + o * layer.n_in;
                for i in 0..layer.n_in {
                    grad[row + i] = d * input[i];
                }
                grad[base + layer.w.len() + o] = d;
            }
            if li > 0 {
                let mut prev = vec![0.0; layer.n_in];
                for o in 0..layer.n_out {
                    let d = delta[o];
                    if d == 0.0 {
                        continue;
                    }
                    let row = &layer.w[o * layer.n_in..(o + 1) * layer.n_in];
                    for (p, wi) in prev.iter_mut().zip(row) {
                        *p += d * wi;
                    }
                }
                // ReLU gate on the previous layer's pre-activations
                for (p, &z) in prev.iter_mut().zip(&cache.pre[li - 1]) {
                    if z <= 0.0 {
                        *p = 0.0;
                    }
                }
                delta = prev;
            }
        }
        Gradient(grad)
    }

    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
        out
    }

    pub fn set_flat_params(&mut self, params: &[f64]) -> Result<(), NetError> {
        if params.len() != self.n_params() {
            return Err(NetError::ParamCount {
                got: params.len(),
                want: self.n_params(),
            });
        }
        let mut off = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&params[off..off + nw]);
            off += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&params[off..off + nb]);
            off += nb;
        }
        Ok(())
    }

    /// Copy all parameters from `other` (hard target sync).
    pub fn copy_from(&mut self, other: &QNetwork) -> Result<(), NetError> {
        if self.widths != other.widths {
            return Err(NetError::LayerMismatch {
                got: other.widths.clone(),
                want: self.widths.clone(),
            });
        }
        self.layers = other.layers.clone();
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("network serializes")
    }

    pub fn from_json(s: &str, want_widths: &[usize]) -> Result<Self, NetError> {
        let net: QNetwork =
            serde_json::from_str(s).map_err(|_| NetError::NonFinite("serialized network"))?;
        if net.widths != want_widths {
            return Err(NetError::LayerMismatch {
                got: net.widths,
                want: want_widths.to_vec(),
            });
        }
        Ok(net)
    }
}

/// Adam state for one network's flat parameter vector.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
            t: 0,
        }
    }

    pub fn step(&mut self, net: &mut QNetwork, grad: &Gradient) -> Result<(), NetError> {
        if grad.0.len() != self.m.len() {
            return Err(NetError::ParamCount {
                got: grad.0.len(),
                want: self.m.len(),
            });
        }
        self.t += 1;
        let b1t = 1.0 - self.beta1.powi(self.t as i32);
        let b2t = 1.0 - self.beta2.powi(self.t as i32);
        let mut params = net.flat_params();
        for i in 0..params.len() {
            let g = grad.0[i];
            if !g.is_finite() {
                return Err(NetError::NonFinite("gradient"));
            }
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / b1t;
            let vh = self.v[i] / b2t;
            params[i] -= self.lr * mh / (vh.sqrt() + self.eps);
        }
        net.set_flat_params(&params)
    }
}
