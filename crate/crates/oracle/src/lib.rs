//! Brute-force reference evaluators.
//!
//! Everything here is plain `f64`, written for clarity rather than speed,
//! and shares no code with `deco-core`. Parameter groups use the same flat
//! layout as the core models: a dense layer with `n` inputs and `m` outputs
//! stores `m x n` row-major weights followed by `m` biases.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Act {
    Relu,
    Tanh,
}

impl Act {
    fn apply(self, v: f64) -> f64 {
        match self {
            Act::Relu => v.max(0.0),
            Act::Tanh => v.tanh(),
        }
    }

    fn derivative(self, pre: f64) -> f64 {
        match self {
            Act::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Act::Tanh => 1.0 - pre.tanh().powi(2),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Dense {
    w: Vec<Vec<f64>>,
    b: Vec<f64>,
}

/// Fully connected network: dense layers with `act` between them.
#[derive(Clone, Debug, PartialEq)]
pub struct OracleMlp {
    layers: Vec<Dense>,
    act: Act,
}

impl OracleMlp {
    /// `widths` lists every layer width from input to logits.
    pub fn from_groups(widths: &[usize], groups: &[Vec<f64>], act: Act) -> Self {
        assert_eq!(groups.len() + 1, widths.len(), "one group per dense layer");
        let layers = groups
            .iter()
            .enumerate()
            .map(|(l, g)| {
                let (n, m) = (widths[l], widths[l + 1]);
                assert_eq!(g.len(), m * n + m, "group {l} size");
                Dense { w: (0..m).map(|o| g[o * n..(o + 1) * n].to_vec()).collect(), b: g[m * n..].to_vec() }
            })
            .collect();
        Self { layers, act }
    }

    pub fn groups(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(|d| d.w.iter().flatten().chain(&d.b).copied().collect()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.groups().iter().map(Vec::len).sum()
    }

    /// Pre-activations of every layer.
    fn pre_activations(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut out = Vec::new();
        let mut h = x.to_vec();
        for (l, d) in self.layers.iter().enumerate() {
            let z: Vec<f64> =
                d.w.iter().zip(&d.b).map(|(row, b)| b + row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>()).collect();
            h = if l + 1 < self.layers.len() { z.iter().map(|&v| self.act.apply(v)).collect() } else { z.clone() };
            out.push(z);
        }
        out
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.pre_activations(x).pop().expect("at least one layer")
    }

    /// Encoder output: the input of the last dense layer.
    pub fn features(&self, x: &[f64]) -> Vec<f64> {
        let pre = self.pre_activations(x);
        if pre.len() < 2 {
            return x.to_vec();
        }
        pre[pre.len() - 2].iter().map(|&v| self.act.apply(v)).collect()
    }

    /// `Σ w_i · (ln Σ_c exp z_c − z_y)` over the batch.
    pub fn weighted_ce(&self, xs: &[Vec<f64>], ys: &[usize], ws: &[f64]) -> f64 {
        xs.iter()
            .zip(ys)
            .zip(ws)
            .map(|((x, &y), &w)| {
                let z = self.logits(x);
                w * (z.iter().map(|v| v.exp()).sum::<f64>().ln() - z[y])
            })
            .sum()
    }

    /// Analytic parameter gradient of [`Self::weighted_ce`], by the chain
    /// rule layer by layer.
    pub fn param_gradient(&self, xs: &[Vec<f64>], ys: &[usize], ws: &[f64]) -> Vec<Vec<f64>> {
        let mut grads: Vec<Dense> = self
            .layers
            .iter()
            .map(|d| Dense { w: vec![vec![0.0; d.w[0].len()]; d.w.len()], b: vec![0.0; d.b.len()] })
            .collect();
        for ((x, &y), &w) in xs.iter().zip(ys).zip(ws) {
            let pre = self.pre_activations(x);
            let inputs: Vec<Vec<f64>> = (0..self.layers.len())
                .map(|l| if l == 0 { x.clone() } else { pre[l - 1].iter().map(|&v| self.act.apply(v)).collect() })
                .collect();
            let z = &pre[pre.len() - 1];
            let total: f64 = z.iter().map(|v| v.exp()).sum();
            let mut delta: Vec<f64> =
                z.iter().enumerate().map(|(c, v)| w * (v.exp() / total - if c == y { 1.0 } else { 0.0 })).collect();
            for l in (0..self.layers.len()).rev() {
                for (o, &d) in delta.iter().enumerate() {
                    grads[l].b[o] += d;
                    for (i, &a) in inputs[l].iter().enumerate() {
                        grads[l].w[o][i] += d * a;
                    }
                }
                if l > 0 {
                    delta = (0..inputs[l].len())
                        .map(|i| {
                            let back: f64 = delta.iter().enumerate().map(|(o, &d)| d * self.layers[l].w[o][i]).sum();
                            back * self.act.derivative(pre[l - 1][i])
                        })
                        .collect();
                }
            }
        }
        grads.iter().map(|d| d.w.iter().flatten().chain(&d.b).copied().collect()).collect()
    }
}

/// Central finite differences of `f` at `x`, coordinate by coordinate.
pub fn central_fd(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// `Σ_groups (1 − cos)`; a group with a zero-norm side contributes 1.
pub fn cosine_distance(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(ga, gb)| {
            let na = ga.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nb = gb.iter().map(|v| v * v).sum::<f64>().sqrt();
            if na == 0.0 || nb == 0.0 {
                1.0
            } else {
                1.0 - ga.iter().zip(gb).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
            }
        })
        .sum()
}

/// Finite-difference gradient of [`cosine_distance`] w.r.t. its first argument.
pub fn cosine_distance_grad_fd(a: &[Vec<f64>], b: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
    let sizes: Vec<usize> = a.iter().map(Vec::len).collect();
    let flat: Vec<f64> = a.iter().flatten().copied().collect();
    let g = central_fd(&flat, h, |p| cosine_distance(&regroup(p, &sizes), b));
    regroup(&g, &sizes)
}

pub fn regroup(flat: &[f64], sizes: &[usize]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(sizes.len());
    let mut at = 0;
    for &n in sizes {
        out.push(flat[at..at + n].to_vec());
        at += n;
    }
    out
}

/// Gradient-matching objective as a function of the synthetic images.
pub struct MatchingProblem<'a> {
    pub model: &'a OracleMlp,
    pub syn_labels: &'a [usize],
    pub real: &'a [Vec<f64>],
    pub real_labels: &'a [usize],
    pub real_weights: &'a [f64],
}

impl MatchingProblem<'_> {
    /// `D(∇θ L(S), ∇θ L(real))` with unit weights on the synthetic side.
    pub fn distance(&self, syn: &[Vec<f64>]) -> f64 {
        let ones = vec![1.0; syn.len()];
        let g_syn = self.model.param_gradient(syn, self.syn_labels, &ones);
        let g_real = self.model.param_gradient(self.real, self.real_labels, self.real_weights);
        cosine_distance(&g_syn, &g_real)
    }

    /// Pixelwise central differences of [`Self::distance`].
    pub fn distance_grad_fd(&self, syn: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
        let dim = syn.first().map_or(0, Vec::len);
        let flat: Vec<f64> = syn.iter().flatten().copied().collect();
        let g = central_fd(&flat, h, |p| self.distance(&regroup(p, &vec![dim; syn.len()])));
        regroup(&g, &vec![dim; syn.len()])
    }
}

/// Contrastive class-purity loss with explicit anchor, positive and
/// negative index lists.
pub struct ContrastiveProblem<'a> {
    pub model: &'a OracleMlp,
    pub anchors: &'a [usize],
    pub positives: &'a [Vec<usize>],
    pub negatives: &'a [Vec<usize>],
    pub tau: f64,
    pub normalize: bool,
}

impl ContrastiveProblem<'_> {
    /// `Σ_i [ln Σ_n exp(z_i·z_n/τ) − mean_p z_i·z_p/τ]`.
    pub fn loss(&self, images: &[Vec<f64>]) -> f64 {
        let z: Vec<Vec<f64>> = images
            .iter()
            .map(|x| {
                let f = self.model.features(x);
                if self.normalize {
                    let n = f.iter().map(|v| v * v).sum::<f64>().sqrt();
                    f.iter().map(|v| v / n).collect()
                } else {
                    f
                }
            })
            .collect();
        let sim = |a: usize, b: usize| z[a].iter().zip(&z[b]).map(|(x, y)| x * y).sum::<f64>() / self.tau;
        self.anchors
            .iter()
            .enumerate()
            .map(|(k, &i)| {
                let lse = self.negatives[k].iter().map(|&n| sim(i, n).exp()).sum::<f64>().ln();
                let pos = &self.positives[k];
                let mean_pos = pos.iter().map(|&p| sim(i, p)).sum::<f64>() / pos.len() as f64;
                lse - mean_pos
            })
            .sum()
    }

    /// Central differences of [`Self::loss`] w.r.t. each anchor image, in
    /// anchor order.
    pub fn anchor_grad_fd(&self, images: &[Vec<f64>], h: f64) -> Vec<Vec<f64>> {
        self.anchors
            .iter()
            .map(|&i| {
                let mut probe = images.to_vec();
                central_fd(&images[i], h, |x| {
                    probe[i] = x.to_vec();
                    self.loss(&probe)
                })
            })
            .collect()
    }
}
