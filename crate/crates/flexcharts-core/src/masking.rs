//! Channel option grids, prefix masks, and the two width selectors.
//!
//! A stage with `F_max` output channels simulates any narrower width `f`
//! by zeroing channels `f..F_max`. The masked forward pass never
//! materializes the per-option sum: the K masks collapse into one
//! length-`F_max` coefficient vector which multiplies the activation
//! once. Selector weights stay differentiable, so the same coefficient
//! vector carries gradients back to the architecture parameters.

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{ops, Graph, Tensor};
use rand_chacha::rand_core::RngCore;
use serde::{Deserialize, Serialize};

/// Strictly increasing candidate channel counts for one stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelOptions {
    values: Vec<usize>,
}

impl ChannelOptions {
    pub fn new(values: Vec<usize>) -> Result<ChannelOptions> {
        if values.is_empty() {
            return Err(Error::InvalidArg("channel options must be non-empty".into()));
        }
        if values[0] < 1 {
            return Err(Error::InvalidArg("channel options must be >= 1".into()));
        }
        if values.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::InvalidArg(format!(
                "channel options must be strictly increasing, got {values:?}"
            )));
        }
        Ok(ChannelOptions { values })
    }

    pub fn values(&self) -> &[usize] {
        &self.values
    }

    pub fn k(&self) -> usize {
        self.values.len()
    }

    pub fn max(&self) -> usize {
        *self.values.last().unwrap()
    }

    pub fn min(&self) -> usize {
        self.values[0]
    }

    /// Option values as f64, for selector math.
    pub fn grid(&self) -> Vec<f64> {
        self.values.iter().map(|&v| v as f64).collect()
    }
}

/// Prefix mask: `f_k` leading ones, `f_max - f_k` trailing zeros.
pub fn make_mask(f_max: usize, f_k: usize) -> Result<Vec<f64>> {
    if f_k < 1 || f_k > f_max {
        return Err(Error::InvalidArg(format!(
            "mask width {f_k} out of range 1..={f_max}"
        )));
    }
    let mut m = vec![0.0; f_max];
    m[..f_k].fill(1.0);
    Ok(m)
}

/// The K prefix masks of one stage.
#[derive(Debug, Clone)]
pub struct MaskBank {
    f_max: usize,
    options: ChannelOptions,
    masks: Vec<Vec<f64>>,
}

impl MaskBank {
    pub fn new(f_max: usize, options: ChannelOptions) -> Result<MaskBank> {
        if options.max() > f_max {
            return Err(Error::InvalidArg(format!(
                "largest option {} exceeds kernel channels {f_max}",
                options.max()
            )));
        }
        let masks = options
            .values()
            .iter()
            .map(|&f| make_mask(f_max, f))
            .collect::<Result<Vec<_>>>()?;
        Ok(MaskBank {
            f_max,
            options,
            masks,
        })
    }

    pub fn f_max(&self) -> usize {
        self.f_max
    }

    pub fn options(&self) -> &ChannelOptions {
        &self.options
    }

    pub fn k(&self) -> usize {
        self.masks.len()
    }

    pub fn mask(&self, k: usize) -> &[f64] {
        &self.masks[k]
    }
}

/// Collapses the weighted mask sum into one per-channel coefficient
/// vector: coeff[c] = sum of weights of every option that keeps channel c.
pub fn mask_coefficients(weights: &[f64], bank: &MaskBank) -> Vec<f64> {
    debug_assert_eq!(weights.len(), bank.k());
    let mut coeff = vec![0.0; bank.f_max];
    // Prefix masks: channel c is kept by option k iff f_k > c. Walk the
    // options from widest to narrowest, carrying the running weight sum.
    let mut acc = 0.0;
    let mut c_hi = bank.f_max;
    for k in (0..bank.k()).rev() {
        let f_k = bank.options.values()[k];
        for c in f_k..c_hi {
            coeff[c] = acc;
        }
        acc += weights[k];
        c_hi = f_k.min(c_hi);
    }
    for c in 0..c_hi {
        coeff[c] = acc;
    }
    coeff
}

/// Per-option trainable weights pushed through a tempered softmax.
#[derive(Debug, Clone)]
pub struct GumbelSelector {
    pub alphas: Tensor,
    pub temperature: f64,
    pub noise_enabled: bool,
}

impl GumbelSelector {
    pub fn new(k: usize) -> GumbelSelector {
        GumbelSelector {
            alphas: Tensor::zeros(vec![k]).trainable(),
            temperature: 1.0,
            noise_enabled: true,
        }
    }
}

/// A Gaussian bump over channel counts; only the mean trains.
#[derive(Debug, Clone)]
pub struct GaussianSelector {
    pub mu: Tensor,
    pub sigma: f64,
    /// Divide the sampled bump by its sum before it weights activations.
    /// Kept switchable for ablation; the cost model always normalizes.
    pub normalize: bool,
}

impl GaussianSelector {
    pub fn new(mu0: f64, sigma: f64) -> Result<GaussianSelector> {
        if sigma <= 0.0 {
            return Err(Error::InvalidArg(format!("sigma must be positive, got {sigma}")));
        }
        Ok(GaussianSelector {
            mu: Tensor::from_vec(vec![1], vec![mu0])?.trainable(),
            sigma,
            normalize: true,
        })
    }

    pub fn mu_value(&self) -> f64 {
        self.mu.item()
    }

    /// Raw bump values alpha_k = exp(-((f_k - mu)/sigma)^2 / 2), no graph.
    pub fn raw_alpha(&self, options: &ChannelOptions) -> Vec<f64> {
        gaussian_raw_alpha(self.mu_value(), self.sigma, options)
    }
}

pub fn gaussian_raw_alpha(mu: f64, sigma: f64, options: &ChannelOptions) -> Vec<f64> {
    options
        .grid()
        .iter()
        .map(|&f| (-0.5 * ((f - mu) / sigma).powi(2)).exp())
        .collect()
}

/// Either selector family; a stage owns exactly one.
#[derive(Debug, Clone)]
pub enum Selector {
    Gumbel(GumbelSelector),
    Gaussian(GaussianSelector),
}

impl Selector {
    /// Differentiable weights used by the masked forward pass.
    ///
    /// Gumbel: softmax((alpha + G)/tau), with noise drawn only when both
    /// the selector and the caller enable it. Gaussian: the bump on the
    /// option grid, normalized unless ablated away.
    pub fn forward_weights(
        &self,
        g: &mut Graph,
        options: &ChannelOptions,
        tau: f64,
        noise: bool,
        rng_stream: &mut impl RngCore,
    ) -> Result<Tensor> {
        match self {
            Selector::Gumbel(sel) => {
                let draws;
                let noise_slice = if noise && sel.noise_enabled {
                    draws = (0..options.k())
                        .map(|_| rng::gumbel(rng_stream))
                        .collect::<Vec<f64>>();
                    Some(draws.as_slice())
                } else {
                    None
                };
                ops::gumbel_softmax(g, &sel.alphas, tau, noise_slice)
            }
            Selector::Gaussian(sel) => {
                let raw = ops::gaussian_alpha(g, &sel.mu, &options.grid(), sel.sigma)?;
                if sel.normalize {
                    ops::normalize_sum(g, &raw)
                } else {
                    Ok(raw)
                }
            }
        }
    }

    /// Differentiable weights that always sum to one; feeds the cost model.
    pub fn normalized_weights(&self, g: &mut Graph, options: &ChannelOptions, tau: f64) -> Result<Tensor> {
        match self {
            Selector::Gumbel(sel) => ops::gumbel_softmax(g, &sel.alphas, tau, None),
            Selector::Gaussian(sel) => {
                let raw = ops::gaussian_alpha(g, &sel.mu, &options.grid(), sel.sigma)?;
                ops::normalize_sum(g, &raw)
            }
        }
    }

    /// Noise-free normalized weights as plain values, for reporting.
    pub fn eval_weights(&self, options: &ChannelOptions, tau: f64) -> Vec<f64> {
        let mut g = Graph::new();
        self.normalized_weights(&mut g, options, tau)
            .expect("eval weights on valid selector")
            .to_vec()
    }

    pub fn arch_param(&self) -> &Tensor {
        match self {
            Selector::Gumbel(sel) => &sel.alphas,
            Selector::Gaussian(sel) => &sel.mu,
        }
    }
}

/// Picks the final channel count: the option with maximal weight for the
/// Gumbel form, the option nearest mu for the Gaussian form. Ties break
/// toward the smaller count.
pub fn selector_finalize(selector: &Selector, options: &ChannelOptions) -> usize {
    match selector {
        Selector::Gumbel(sel) => {
            let alphas = sel.alphas.to_vec();
            let mut best = 0;
            for k in 1..alphas.len() {
                if alphas[k] > alphas[best] {
                    best = k;
                }
            }
            options.values()[best]
        }
        Selector::Gaussian(sel) => {
            let mu = sel.mu_value();
            let mut best = 0;
            let mut best_dist = (options.values()[0] as f64 - mu).abs();
            for (k, &f) in options.values().iter().enumerate().skip(1) {
                let d = (f as f64 - mu).abs();
                if d < best_dist {
                    best = k;
                    best_dist = d;
                }
            }
            options.values()[best]
        }
    }
}

/// Applies the collapsed mask coefficients to an activation
/// [B, F_max, H, W]; differentiable in both the activation and the
/// selector weights.
pub fn masked_forward(g: &mut Graph, y: &Tensor, weights: &Tensor, bank: &MaskBank) -> Result<Tensor> {
    let ys = y.shape();
    if ys.len() != 4 {
        return Err(Error::shape(
            "masked_forward",
            format!("expected 4-d activation, got {:?}", ys),
        ));
    }
    let (b, f, h, w) = (ys[0], ys[1], ys[2], ys[3]);
    if f != bank.f_max() {
        return Err(Error::shape(
            "masked_forward",
            format!("activation channel axis is {f} but mask bank covers {}", bank.f_max()),
        ));
    }
    if weights.numel() != bank.k() {
        return Err(Error::shape(
            "masked_forward",
            format!("{} weights for {} masks", weights.numel(), bank.k()),
        ));
    }

    let coeff = mask_coefficients(&weights.data(), bank);
    let hw = h * w;
    let mut out_data = vec![0.0; b * f * hw];
    {
        let yd = y.data();
        for bi in 0..b {
            for fi in 0..f {
                let c = coeff[fi];
                let base = (bi * f + fi) * hw;
                for i in 0..hw {
                    out_data[base + i] = yd[base + i] * c;
                }
            }
        }
    }
    let out = Tensor::from_vec(ys.clone(), out_data)?;
    crate::tensor::check_finite("masked_forward", &out)?;

    if y.requires_grad() || weights.requires_grad() {
        let (yh, wh, oh) = (y.clone(), weights.clone(), out.clone());
        let options: Vec<usize> = bank.options().values().to_vec();
        g.record(
            vec![y.clone(), weights.clone()],
            out.clone(),
            Box::new(move || {
                let go = oh.inner_grad();
                let go = go.as_ref().expect("masked_forward backward without output grad");
                if yh.requires_grad() {
                    yh.with_grad_mut(|dy| {
                        for bi in 0..b {
                            for fi in 0..f {
                                let c = coeff[fi];
                                let base = (bi * f + fi) * hw;
                                for i in 0..hw {
                                    dy[base + i] += go[base + i] * c;
                                }
                            }
                        }
                    });
                }
                if wh.requires_grad() {
                    // Per-channel sensitivity s[c] = sum_{b,hw} y * dout,
                    // then dw_k = sum of s over the channels mask k keeps.
                    let yd = yh.data();
                    let mut s = vec![0.0; f];
                    for bi in 0..b {
                        for fi in 0..f {
                            let base = (bi * f + fi) * hw;
                            let mut acc = 0.0;
                            for i in 0..hw {
                                acc += yd[base + i] * go[base + i];
                            }
                            s[fi] += acc;
                        }
                    }
                    let mut prefix = vec![0.0; f + 1];
                    for c in 0..f {
                        prefix[c + 1] = prefix[c] + s[c];
                    }
                    let dw: Vec<f64> = options.iter().map(|&f_k| prefix[f_k]).collect();
                    wh.accumulate_grad(&dw);
                }
            }),
        );
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RunRng;

    #[test]
    fn make_mask_cases() {
        assert_eq!(make_mask(4, 2).unwrap(), vec![1.0, 1.0, 0.0, 0.0]);
        assert_eq!(make_mask(3, 3).unwrap(), vec![1.0, 1.0, 1.0]);
        assert!(make_mask(4, 5).is_err());
        assert!(make_mask(4, 0).is_err());
    }

    #[test]
    fn options_must_increase() {
        assert!(ChannelOptions::new(vec![8, 8]).is_err());
        assert!(ChannelOptions::new(vec![8, 4]).is_err());
        assert!(ChannelOptions::new(vec![]).is_err());
        assert!(ChannelOptions::new(vec![0, 4]).is_err());
        let o = ChannelOptions::new(vec![4, 8, 12]).unwrap();
        assert_eq!(o.k(), 3);
        assert_eq!(o.max(), 12);
    }

    #[test]
    fn coefficients_from_weighted_masks() {
        let bank = MaskBank::new(2, ChannelOptions::new(vec![1, 2]).unwrap()).unwrap();
        let coeff = mask_coefficients(&[0.25, 0.75], &bank);
        assert_eq!(coeff, vec![1.0, 0.75]);
    }

    #[test]
    fn coefficient_vector_matches_explicit_mask_sum() {
        // Oracle: direct per-mask summation.
        let options = ChannelOptions::new(vec![2, 3, 5, 8]).unwrap();
        let bank = MaskBank::new(8, options).unwrap();
        let weights = [0.1, 0.2, 0.3, 0.4];
        let mut expect = vec![0.0; 8];
        for (k, &wk) in weights.iter().enumerate() {
            for (c, e) in expect.iter_mut().enumerate() {
                *e += wk * bank.mask(k)[c];
            }
        }
        let got = mask_coefficients(&weights, &bank);
        for (a, b) in got.iter().zip(&expect) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn masked_forward_identity_and_zero() {
        let mut g = Graph::new();
        let y = Tensor::from_vec(vec![1, 2, 1, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        // Single option f_1 = F_max with weight 1: identity.
        let bank = MaskBank::new(2, ChannelOptions::new(vec![2]).unwrap()).unwrap();
        let w = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
        let out = masked_forward(&mut g, &y, &w, &bank).unwrap();
        assert_eq!(out.to_vec(), y.to_vec());
        // All-zero weights: zero tensor.
        let bank = MaskBank::new(2, ChannelOptions::new(vec![1, 2]).unwrap()).unwrap();
        let w = Tensor::zeros(vec![2]);
        let out = masked_forward(&mut g, &y, &w, &bank).unwrap();
        assert_eq!(out.to_vec(), vec![0.0; 4]);
    }

    #[test]
    fn masked_forward_channel_mismatch() {
        let mut g = Graph::new();
        let y = Tensor::zeros(vec![1, 3, 1, 1]);
        let bank = MaskBank::new(2, ChannelOptions::new(vec![1, 2]).unwrap()).unwrap();
        let w = Tensor::from_vec(vec![2], vec![0.5, 0.5]).unwrap();
        assert!(masked_forward(&mut g, &y, &w, &bank).is_err());
    }

    #[test]
    fn gumbel_noise_split_is_even() {
        let sel = GumbelSelector::new(2);
        let options = ChannelOptions::new(vec![8, 16]).unwrap();
        let selector = Selector::Gumbel(sel);
        let mut rng = RunRng::new(3);
        let mut first_wins = 0;
        let draws = 10_000;
        for _ in 0..draws {
            let mut g = Graph::new();
            let w = selector
                .forward_weights(&mut g, &options, 1.0, true, &mut rng.gumbel)
                .unwrap()
                .to_vec();
            if w[0] > w[1] {
                first_wins += 1;
            }
        }
        let frac = first_wins as f64 / draws as f64;
        assert!((frac - 0.5).abs() < 0.03, "argmax split {frac}");
    }

    #[test]
    fn finalize_gumbel_argmax_and_ties() {
        let options = ChannelOptions::new(vec![16, 32, 48]).unwrap();
        let sel = GumbelSelector::new(3);
        *sel.alphas.data_mut() = vec![0.1, 0.9, 0.3];
        assert_eq!(selector_finalize(&Selector::Gumbel(sel.clone()), &options), 32);
        // Tie breaks toward the smaller channel count.
        *sel.alphas.data_mut() = vec![0.9, 0.9, 0.3];
        assert_eq!(selector_finalize(&Selector::Gumbel(sel), &options), 16);
    }

    #[test]
    fn finalize_gaussian_nearest_and_midpoint() {
        let options = ChannelOptions::new(vec![16, 24, 32, 40, 48]).unwrap();
        let sel = GaussianSelector::new(37.2, 8.0).unwrap();
        assert_eq!(selector_finalize(&Selector::Gaussian(sel), &options), 40);
        let options = ChannelOptions::new(vec![32, 40]).unwrap();
        let sel = GaussianSelector::new(36.0, 8.0).unwrap();
        assert_eq!(selector_finalize(&Selector::Gaussian(sel), &options), 32);
    }

    #[test]
    fn finalize_gaussian_ignores_sigma() {
        let options = ChannelOptions::new(vec![8, 16, 24, 32]).unwrap();
        for sigma in [0.5, 4.0, 64.0] {
            let sel = GaussianSelector::new(21.0, sigma).unwrap();
            assert_eq!(selector_finalize(&Selector::Gaussian(sel), &options), 24);
        }
    }

    #[test]
    fn gaussian_edge_alpha_decays() {
        // Raw alpha at a range edge 3 sigma away must be below exp(-4).
        let options = ChannelOptions::new(vec![8, 16, 24, 32, 40]).unwrap();
        let sel = GaussianSelector::new(24.0, 5.0).unwrap();
        let raw = sel.raw_alpha(&options);
        assert!(raw[0] < (-4.0f64).exp());
        assert!(raw[4] < (-4.0f64).exp());
    }
}
