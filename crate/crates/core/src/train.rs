//! Shared optimization plumbing: Adam and deterministic chunked gradient
//! accumulation.

use rayon::prelude::*;

use crate::difftape::{self, ParamVector, Tape, TapeBuffers, Val};
use crate::Result;

/// Adam hyperparameters. Defaults follow the fine-tuning recipe
/// (lr 1e-4, betas (0.9, 0.99), eps 1e-15).
#[derive(Clone, Copy, Debug, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-15,
        }
    }
}

/// Adam with bias correction over a dense parameter vector.
pub struct Adam {
    pub cfg: AdamConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl Adam {
    pub fn new(cfg: AdamConfig, n: usize) -> Adam {
        Adam {
            cfg,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Zero the moment estimates (a fresh optimizer without reallocation).
    pub fn reset(&mut self) {
        self.m.iter_mut().for_each(|x| *x = 0.0);
        self.v.iter_mut().for_each(|x| *x = 0.0);
        self.t = 0;
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64]) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grad.len(), self.m.len());
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            let mh = self.m[i] / bc1;
            let vh = self.v[i] / bc2;
            params[i] -= c.lr * mh / (vh.sqrt() + c.eps);
        }
    }
}

/// Deterministic data-parallel gradient accumulation.
///
/// Work items are split into `k` contiguous chunks; each chunk builds one
/// graph (in sum form, with any normalization folded into constants by the
/// builder) on its own tape, and per-chunk gradients are reduced in fixed
/// chunk order. For a given `k` the result is bit-identical regardless of
/// thread scheduling; `k = 1` additionally removes any dependence on the
/// chunk count itself.
pub struct GradRunner {
    bufs: Vec<TapeBuffers>,
    grads: Vec<Vec<f64>>,
    losses: Vec<f64>,
}

impl GradRunner {
    pub fn new(k: usize) -> GradRunner {
        let k = k.max(1);
        GradRunner {
            bufs: (0..k).map(|_| TapeBuffers::new()).collect(),
            grads: Vec::new(),
            losses: vec![0.0; k],
        }
    }

    pub fn chunk_count(&self) -> usize {
        self.bufs.len()
    }

    /// Accumulate the gradient of `sum_chunks build(chunk)` into `grad`
    /// (zeroed here) and return the summed loss.
    pub fn run<C, F>(
        &mut self,
        params: &ParamVector,
        items: &[C],
        build: F,
        grad: &mut [f64],
    ) -> Result<f64>
    where
        C: Sync,
        F: Fn(&mut Tape, &[C]) -> Val + Sync,
    {
        let k = self.bufs.len();
        let n = params.len();
        grad.iter_mut().for_each(|g| *g = 0.0);
        if self.grads.len() != k || self.grads.first().map_or(true, |g| g.len() != n) {
            self.grads = (0..k).map(|_| vec![0.0; n]).collect();
        }

        // Contiguous chunk ranges; first `rem` chunks get one extra item.
        let base = items.len() / k;
        let rem = items.len() % k;
        let ranges: Vec<(usize, usize)> = (0..k)
            .scan(0usize, |at, i| {
                let len = base + usize::from(i < rem);
                let r = (*at, *at + len);
                *at += len;
                Some(r)
            })
            .collect();

        let results: Vec<Result<()>> = self
            .bufs
            .par_iter_mut()
            .zip(self.grads.par_iter_mut())
            .zip(self.losses.par_iter_mut())
            .zip(ranges.par_iter())
            .map(|(((buf, g), loss), &(lo, hi))| {
                g.iter_mut().for_each(|x| *x = 0.0);
                *loss = 0.0;
                if lo < hi {
                    *loss = difftape::grad_with(buf, params, g, |t| build(t, &items[lo..hi]))?;
                }
                Ok(())
            })
            .collect();
        for r in results {
            r?;
        }

        let mut total = 0.0;
        for i in 0..k {
            total += self.losses[i];
            let g = &self.grads[i];
            for (o, x) in grad.iter_mut().zip(g) {
                *o += x;
            }
        }
        Ok(total)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::difftape::ParamLayout;
    use std::sync::Arc;

    fn pv(values: Vec<f64>) -> ParamVector {
        let mut b = ParamLayout::builder();
        b.push("p", values.len());
        ParamVector {
            values,
            layout: Arc::new(b.build()),
        }
    }

    #[test]
    fn adam_descends_a_quadratic() {
        let mut p = pv(vec![2.0, -3.0]);
        let mut adam = Adam::new(
            AdamConfig {
                lr: 0.05,
                ..AdamConfig::default()
            },
            2,
        );
        let mut buf = TapeBuffers::new();
        let mut g = vec![0.0; 2];
        for _ in 0..400 {
            g.iter_mut().for_each(|x| *x = 0.0);
            difftape::grad_with(&mut buf, &p, &mut g, |t| {
                let x = t.param_slice(0, 2);
                t.dot(x, x)
            })
            .unwrap();
            adam.step(&mut p.values, &g);
        }
        assert!(p.values[0].abs() < 1e-2 && p.values[1].abs() < 1e-2, "{:?}", p.values);
    }

    #[test]
    fn chunked_gradients_match_single_chunk() {
        let items: Vec<f64> = (0..23).map(|i| 0.1 * i as f64 - 1.0).collect();
        let p = pv(vec![0.7, -0.2]);
        let build = |t: &mut Tape, chunk: &[f64]| {
            // sum_i (a*x_i + b)^2 in sum form
            let mut terms = Vec::new();
            for &x in chunk {
                let ab = t.param_slice(0, 2);
                let a = t.view(ab, 0, 1);
                let b = t.view(ab, 1, 1);
                let ax = t.scale(a, x);
                let r = t.add(ax, b);
                terms.push(t.mul(r, r));
            }
            let all = t.concat(&terms);
            t.sum(all)
        };
        let mut g1 = vec![0.0; 2];
        let mut g4 = vec![0.0; 2];
        let l1 = GradRunner::new(1).run(&p, &items, build, &mut g1).unwrap();
        let l4 = GradRunner::new(4).run(&p, &items, build, &mut g4).unwrap();
        assert!((l1 - l4).abs() < 1e-12 * l1.abs().max(1.0));
        for i in 0..2 {
            assert!((g1[i] - g4[i]).abs() < 1e-12 * g1[i].abs().max(1.0));
        }
    }

    #[test]
    fn same_chunk_count_is_bit_identical() {
        let items: Vec<f64> = (0..37).map(|i| (i as f64).sin()).collect();
        let p = pv(vec![0.3, 0.9, -0.4]);
        let build = |t: &mut Tape, chunk: &[f64]| {
            let mut terms = Vec::new();
            for &x in chunk {
                let w = t.param_slice(0, 3);
                let c = t.constant(&[x, x * x, 1.0]);
                let d = t.dot(w, c);
                let s = t.sigmoid(d);
                terms.push(s);
            }
            let all = t.concat(&terms);
            t.sum(all)
        };
        let mut runner = GradRunner::new(3);
        let mut ga = vec![0.0; 3];
        let mut gb = vec![0.0; 3];
        let la = runner.run(&p, &items, build, &mut ga).unwrap();
        let lb = runner.run(&p, &items, build, &mut gb).unwrap();
        assert_eq!(la.to_bits(), lb.to_bits());
        for (a, b) in ga.iter().zip(&gb) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }
}
