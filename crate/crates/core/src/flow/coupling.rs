use super::mlp::{Mlp, MlpCache};
use super::spline::{raw_param_count, SplineParams};
use crate::stats::Rng;

/// One spline coupling transform. Masked (`true`) coordinates pass through
/// unchanged and feed the conditioner, which emits spline parameters for every
/// unmasked coordinate.
///
/// `inverse` is the density direction (data toward latent) and uses the
/// closed-form spline; `forward` is the sampling direction and root-solves.
#[derive(Debug, Clone)]
pub struct CouplingLayer {
    mask: Vec<bool>,
    pass: Vec<usize>,
    transformed: Vec<usize>,
    conditioner: Mlp,
    bins: usize,
    tail_bound: f64,
}

impl CouplingLayer {
    pub fn new(mask: Vec<bool>, hidden: &[usize], bins: usize, tail_bound: f64, rng: &mut Rng) -> Self {
        let (pass, transformed) = split(&mask);
        let mut sizes = Vec::with_capacity(hidden.len() + 2);
        sizes.push(pass.len());
        sizes.extend_from_slice(hidden);
        sizes.push(transformed.len() * raw_param_count(bins));
        Self {
            mask,
            pass,
            transformed,
            conditioner: Mlp::new(sizes, rng),
            bins,
            tail_bound,
        }
    }

    pub fn from_parts(mask: Vec<bool>, conditioner: Mlp, bins: usize, tail_bound: f64) -> Option<Self> {
        let (pass, transformed) = split(&mask);
        if conditioner.input_dim() != pass.len()
            || conditioner.output_dim() != transformed.len() * raw_param_count(bins)
        {
            return None;
        }
        Some(Self {
            mask,
            pass,
            transformed,
            conditioner,
            bins,
            tail_bound,
        })
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn conditioner(&self) -> &Mlp {
        &self.conditioner
    }

    pub fn params(&self) -> &[f64] {
        self.conditioner.params()
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        self.conditioner.params_mut()
    }

    /// Spline parameters for each transformed coordinate given the layer input.
    pub fn spline_params(&self, input: &[f64]) -> Vec<SplineParams> {
        let cond_in: Vec<f64> = self.pass.iter().map(|&i| input[i]).collect();
        let raw = self.conditioner.forward(&cond_in, &mut MlpCache::default());
        self.splines_from_raw(&raw)
    }

    fn splines_from_raw(&self, raw: &[f64]) -> Vec<SplineParams> {
        let per = raw_param_count(self.bins);
        raw.chunks_exact(per)
            .map(|r| SplineParams::from_unnormalized(r, self.bins, self.tail_bound))
            .collect()
    }

    /// Sampling direction; writes the image into `out` and returns `ln|det J|`.
    pub fn forward(&self, input: &[f64], out: &mut [f64]) -> f64 {
        out.copy_from_slice(input);
        let mut ld = 0.0;
        for (p, &i) in self.spline_params(input).iter().zip(&self.transformed) {
            let (y, l) = p.inverse_unchecked(input[i]);
            out[i] = y;
            ld += l;
        }
        ld
    }

    /// Density direction; writes the image into `out` and returns `ln|det J|`.
    pub fn inverse(&self, input: &[f64], out: &mut [f64]) -> f64 {
        out.copy_from_slice(input);
        let mut ld = 0.0;
        for (p, &i) in self.spline_params(input).iter().zip(&self.transformed) {
            let (y, l) = p.forward_unchecked(input[i]);
            out[i] = y;
            ld += l;
        }
        ld
    }

    /// Backpropagates through the density direction evaluated at `input`.
    ///
    /// `grad_out` is `dL/d(output)` and `grad_logdet` is `dL/d(ln|det J|)`.
    /// Parameter gradients are accumulated into `grad_params`; the return value
    /// is `dL/d(input)`.
    pub fn backward_inverse(
        &self,
        input: &[f64],
        grad_out: &[f64],
        grad_logdet: f64,
        grad_params: &mut [f64],
    ) -> Vec<f64> {
        let cond_in: Vec<f64> = self.pass.iter().map(|&i| input[i]).collect();
        let mut cache = MlpCache::default();
        let raw = self.conditioner.forward(&cond_in, &mut cache);
        let splines = self.splines_from_raw(&raw);
        let per = raw_param_count(self.bins);

        let mut grad_in = grad_out.to_vec();
        let mut grad_raw = vec![0.0; raw.len()];
        for (j, (p, &i)) in splines.iter().zip(&self.transformed).enumerate() {
            grad_in[i] = p.backward(
                input[i],
                grad_out[i],
                grad_logdet,
                &mut grad_raw[j * per..(j + 1) * per],
            );
        }
        let grad_cond = self.conditioner.backward(&cache, &grad_raw, grad_params);
        for (g, &i) in grad_cond.iter().zip(&self.pass) {
            grad_in[i] += g;
        }
        grad_in
    }
}

fn split(mask: &[bool]) -> (Vec<usize>, Vec<usize>) {
    let pass = (0..mask.len()).filter(|&i| mask[i]).collect();
    let transformed = (0..mask.len()).filter(|&i| !mask[i]).collect();
    (pass, transformed)
}

/// Alternating even/odd pass-through masks. One-dimensional flows transform
/// their only coordinate in every layer.
pub fn alternating_mask(dim: usize, layer: usize) -> Vec<bool> {
    if dim == 1 {
        return vec![false];
    }
    (0..dim).map(|i| (i + layer) % 2 == 0).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::rng_from_seed;
    use rand::Rng as _;

    fn random_layer(dim: usize, seed: u64) -> CouplingLayer {
        let mut rng = rng_from_seed(seed);
        let mut layer = CouplingLayer::new(alternating_mask(dim, 0), &[6, 6], 4, 3.0, &mut rng);
        for p in layer.params_mut() {
            *p = rng.random_range(-0.7..0.7);
        }
        layer
    }

    #[test]
    fn masked_coordinates_pass_through() {
        let layer = random_layer(4, 2);
        let x = [0.5, -1.2, 2.0, 0.1];
        let mut y = [0.0; 4];
        layer.inverse(&x, &mut y);
        assert_eq!(y[0], x[0]);
        assert_eq!(y[2], x[2]);
        assert_ne!(y[1], x[1]);
    }

    #[test]
    fn layer_round_trip() {
        let layer = random_layer(3, 9);
        let mut rng = rng_from_seed(1);
        for _ in 0..500 {
            let x: Vec<f64> = (0..3).map(|_| rng.random_range(-3.5..3.5)).collect();
            let mut y = vec![0.0; 3];
            let mut back = vec![0.0; 3];
            let l1 = layer.inverse(&x, &mut y);
            let l2 = layer.forward(&y, &mut back);
            for (a, b) in x.iter().zip(&back) {
                assert!((a - b).abs() < 1e-9);
            }
            assert!((l1 + l2).abs() < 1e-9);
        }
    }

    #[test]
    fn masks_alternate() {
        assert_eq!(alternating_mask(3, 0), vec![true, false, true]);
        assert_eq!(alternating_mask(3, 1), vec![false, true, false]);
        assert_eq!(alternating_mask(1, 5), vec![false]);
    }
}
