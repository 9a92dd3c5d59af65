//! Graph-WaveNet-style forecaster with spatial gated addition (SGA) and an
//! adaptive adjacency inferred from encoder embeddings.
//!
//! Layout is channels-last, `x: [B, N, L, C]`. The input is left-padded to
//! the receptive field, lifted to width `D`, then passed through a stack of
//! ST layers:
//!
//! ```text
//! h ─ SGA ─ tanh(conv_a) ⊙ σ(conv_b) ─┬─ SGA ─ diffusion GCN ─ (+ residual) ─ next layer
//!                                     └─ last step ─ FC ─ skip_l
//! ŷ = FC(ReLU(FC(ReLU(skip_1 ++ … ++ skip_L))))
//! ```
//!
//! SGA is `h + c·e` with the gate `c = σ(FC2(ReLU(FC1(h ++ e))))`. The
//! adaptive adjacency is `softmax(ReLU(r1 r2ᵀ))` with `r_i = FC(ReLU(FC(e)))`,
//! recomputed from the embeddings of whichever roads are in the batch.

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Tensor, Var};
use crate::encoder::road_seed;
use crate::error::{Error, Result};
use crate::nn::{linear, Bound, Init, ParamSet};

/// Architecture sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    /// Residual width `D`; must equal the encoder dimension when SGA is on.
    pub hidden: usize,
    pub skip: usize,
    pub end: usize,
    pub layers: usize,
    /// Dilations cycle through this list across layers.
    pub dilations: Vec<usize>,
    pub kernel: usize,
    pub diffusion_order: usize,
    /// Hidden width of the SGA gate and adaptive-adjacency MLPs.
    pub gate_hidden: usize,
    pub input_len: usize,
    pub horizon: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            hidden: 32,
            skip: 64,
            end: 128,
            layers: 8,
            dilations: vec![1, 2],
            kernel: 2,
            diffusion_order: 2,
            gate_hidden: 128,
            input_len: 12,
            horizon: 12,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.hidden,
            self.skip,
            self.end,
            self.layers,
            self.kernel,
            self.gate_hidden,
            self.input_len,
            self.horizon,
        ];
        if positive.contains(&0) || self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::Config("backbone sizes and dilations must be positive".into()));
        }
        if self.kernel < 2 {
            return Err(Error::Config("temporal kernel must span at least 2 steps".into()));
        }
        Ok(())
    }

    pub fn dilation(&self, layer: usize) -> usize {
        self.dilations[layer % self.dilations.len()]
    }

    /// Steps consumed by the whole TCN stack plus one.
    pub fn receptive_field(&self) -> usize {
        1 + (0..self.layers).map(|l| self.dilation(l) * (self.kernel - 1)).sum::<usize>()
    }
}

/// Ablation switches.
///
/// The default is the full model; [`Flags::PLAIN`] is the unmodified backbone.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Flags {
    pub sga: bool,
    pub adaptive: bool,
    pub decoupling: bool,
}

impl Default for Flags {
    fn default() -> Self {
        Self::ALL_ON
    }
}

impl Flags {
    pub const ALL_ON: Flags = Flags { sga: true, adaptive: true, decoupling: true };
    pub const PLAIN: Flags = Flags { sga: false, adaptive: false, decoupling: false };

    /// Whether the forward pass consumes encoder embeddings.
    pub fn needs_embeddings(self) -> bool {
        self.sga || self.adaptive
    }

    /// The eight flag combinations, all-off first.
    pub fn grid() -> Vec<Flags> {
        (0..8).map(|i| Flags { sga: i & 1 != 0, adaptive: i & 2 != 0, decoupling: i & 4 != 0 }).collect()
    }

    pub fn label(self) -> String {
        let on = |b: bool| if b { "on" } else { "off" };
        format!("sga={} adp={} dec={}", on(self.sga), on(self.adaptive), on(self.decoupling))
    }
}

/// Row-normalized forward and backward transition matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Supports {
    pub forward: Tensor,
    pub backward: Tensor,
}

fn row_normalize(n: usize, get: impl Fn(usize, usize) -> f64) -> Tensor {
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        let total: f64 = (0..n).map(|j| get(i, j)).sum();
        if total > 0.0 {
            for j in 0..n {
                data[i * n + j] = get(i, j) / total;
            }
        } else {
            // isolated road: diffuse onto itself
            data[i * n + i] = 1.0;
        }
    }
    Tensor::new(vec![n, n], data).expect("n > 0")
}

impl Supports {
    /// From a row-major `n × n` weighted adjacency.
    pub fn from_adjacency(adj: &[f64], n: usize) -> Result<Self> {
        if n == 0 || adj.len() != n * n {
            return Err(Error::invalid(format!("adjacency has {} cells, expected {n}×{n}", adj.len())));
        }
        Ok(Self { forward: row_normalize(n, |i, j| adj[i * n + j]), backward: row_normalize(n, |i, j| adj[j * n + i]) })
    }

    pub fn num_roads(&self) -> usize {
        self.forward.shape()[0]
    }
}

/// `h + c·e` per road and timestep; `h: [B, N, T, D]`, `e: [N, D]`.
pub fn sga(tape: &mut Tape, p: &Bound, prefix: &str, h: Var, e: Var) -> Result<Var> {
    let sh = tape.shape(h).to_vec();
    let se = tape.shape(e).to_vec();
    if sh.len() != 4 || se != [sh[1], sh[3]] {
        return Err(Error::invalid(format!("sga expects h [B,N,T,D] and e [N,D], got {sh:?} and {se:?}")));
    }
    let (b, n, t, d) = (sh[0], sh[1], sh[2], sh[3]);
    // FC1(h ++ e) = h·W_h + e·W_e + b1
    let ah = tape.matmul(h, p.var(&format!("{prefix}.fc1_h.weight")))?;
    let ae = tape.matmul(e, p.var(&format!("{prefix}.fc1_e.weight")))?;
    let k = tape.shape(ae)[1];
    let ae = tape.reshape(ae, &[1, n, 1, k])?;
    let ae = tape.broadcast(ae, &[b, n, t, k])?;
    let a = tape.add(ah, ae)?;
    let a = tape.add_bias(a, p.var(&format!("{prefix}.fc1.bias")))?;
    let a = tape.relu(a)?;
    let c = linear(tape, p, &format!("{prefix}.fc2"), a)?;
    let c = tape.sigmoid(c)?;
    let c = tape.broadcast(c, &[b, n, t, d])?;
    let eb = tape.reshape(e, &[1, n, 1, d])?;
    let eb = tape.broadcast(eb, &[b, n, t, d])?;
    let ce = tape.mul(c, eb)?;
    Ok(tape.add(h, ce)?)
}

/// Gated dilated causal convolution, `[B, N, T, D] → [B, N, T - dilation·(kernel-1), D]`.
pub fn gated_tcn(tape: &mut Tape, p: &Bound, prefix: &str, h: Var, dilation: usize) -> Result<Var> {
    let conv = |tape: &mut Tape, branch: &str| -> Result<Var> {
        Ok(tape.conv1d(
            h,
            p.var(&format!("{prefix}.{branch}.weight")),
            Some(p.var(&format!("{prefix}.{branch}.bias"))),
            1,
            dilation,
        )?)
    };
    let f = conv(tape, "filter")?;
    let g = conv(tape, "gate")?;
    let f = tape.tanh(f)?;
    let g = tape.sigmoid(g)?;
    Ok(tape.mul(f, g)?)
}

/// `h·W0 + Σ_s Σ_{k=1..K} P_s^k h W_{s,k} + b` over named supports.
pub fn diffusion_gcn(
    tape: &mut Tape,
    p: &Bound,
    prefix: &str,
    h: Var,
    supports: &[(&str, Var)],
    order: usize,
) -> Result<Var> {
    let n = tape.shape(h).get(1).copied().unwrap_or(0);
    for (name, s) in supports {
        if tape.shape(*s) != [n, n] {
            return Err(Error::invalid(format!("support {name} does not match {n} roads")));
        }
    }
    let mut z = tape.matmul(h, p.var(&format!("{prefix}.w0")))?;
    for (name, s) in supports {
        let mut x = h;
        for k in 1..=order {
            x = tape.graph_prop(*s, x)?;
            let term = tape.matmul(x, p.var(&format!("{prefix}.{name}{k}")))?;
            z = tape.add(z, term)?;
        }
    }
    Ok(tape.add_bias(z, p.var(&format!("{prefix}.bias")))?)
}

/// Row-wise `softmax(ReLU(r1 r2ᵀ))` of already-inferred node vectors.
pub fn adjacency_from_nodes(tape: &mut Tape, r1: Var, r2: Var) -> Result<Var> {
    let r2t = tape.transpose(r2)?;
    let scores = tape.matmul(r1, r2t)?;
    let scores = tape.relu(scores)?;
    Ok(tape.softmax(scores, 1)?)
}

/// `A_adp` from embeddings `e: [N, D_e]` via two separate MLPs.
pub fn infer_adaptive_adjacency(tape: &mut Tape, p: &Bound, e: Var) -> Result<Var> {
    let mut nodes = [e; 2];
    for (i, r) in nodes.iter_mut().enumerate() {
        let h = linear(tape, p, &format!("adp.r{}.fc1", i + 1), e)?;
        let h = tape.relu(h)?;
        *r = linear(tape, p, &format!("adp.r{}.fc2", i + 1), h)?;
    }
    adjacency_from_nodes(tape, nodes[0], nodes[1])
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone {
    pub cfg: BackboneConfig,
    pub flags: Flags,
    pub in_channels: usize,
    pub embed_dim: usize,
    pub params: ParamSet,
}

impl Backbone {
    /// Shared parameters come from `model_seed`; SGA and adaptive-adjacency
    /// parameters from an independent stream, so disabling both yields
    /// exactly the plain backbone.
    pub fn new(cfg: BackboneConfig, flags: Flags, embed_dim: usize, model_seed: u64) -> Result<Self> {
        cfg.validate()?;
        if flags.sga && embed_dim != cfg.hidden {
            return Err(Error::Config(format!(
                "SGA adds embeddings to activations: encoder dim {embed_dim} must equal hidden {}",
                cfg.hidden
            )));
        }
        let in_channels = 1 + flags.decoupling as usize;
        let d = cfg.hidden;
        let mut params = ParamSet::new();
        let mut init = Init::new(model_seed);
        init.linear(&mut params, "start", in_channels, d);
        let gcn_bound = 1.0 / ((d * (1 + 3 * cfg.diffusion_order)) as f64).sqrt();
        for l in 0..cfg.layers {
            let pre = format!("layer{l}");
            init.conv(&mut params, &format!("{pre}.tcn.filter"), cfg.kernel, d, d);
            init.conv(&mut params, &format!("{pre}.tcn.gate"), cfg.kernel, d, d);
            init.linear(&mut params, &format!("{pre}.skip"), d, cfg.skip);
            params.insert(format!("{pre}.gcn.w0"), init.uniform(&[d, d], gcn_bound));
            for name in ["fwd", "bwd"] {
                for k in 1..=cfg.diffusion_order {
                    params.insert(format!("{pre}.gcn.{name}{k}"), init.uniform(&[d, d], gcn_bound));
                }
            }
            params.insert(format!("{pre}.gcn.bias"), init.uniform(&[d], gcn_bound));
        }
        init.linear(&mut params, "end1", cfg.layers * cfg.skip, cfg.end);
        init.linear(&mut params, "end2", cfg.end, cfg.horizon);

        let mut extra = Init::new(road_seed(model_seed, "spatial-extensions"));
        if flags.sga {
            for l in 0..cfg.layers {
                for pos in ["sga_tcn", "sga_gcn"] {
                    let pre = format!("layer{l}.{pos}");
                    let bound = 1.0 / ((2 * d) as f64).sqrt();
                    params.insert(format!("{pre}.fc1_h.weight"), extra.uniform(&[d, cfg.gate_hidden], bound));
                    params.insert(format!("{pre}.fc1_e.weight"), extra.uniform(&[d, cfg.gate_hidden], bound));
                    params.insert(format!("{pre}.fc1.bias"), extra.uniform(&[cfg.gate_hidden], bound));
                    extra.linear(&mut params, &format!("{pre}.fc2"), cfg.gate_hidden, 1);
                }
            }
        }
        if flags.adaptive {
            for r in ["r1", "r2"] {
                extra.linear(&mut params, &format!("adp.{r}.fc1"), embed_dim, cfg.gate_hidden);
                extra.linear(&mut params, &format!("adp.{r}.fc2"), cfg.gate_hidden, embed_dim);
            }
            for l in 0..cfg.layers {
                for k in 1..=cfg.diffusion_order {
                    params.insert(format!("layer{l}.gcn.adp{k}"), extra.uniform(&[d, d], gcn_bound));
                }
            }
        }
        Ok(Self { cfg, flags, in_channels, embed_dim, params })
    }

    /// Forecasts `[B, N, horizon]` in the scaled target domain.
    ///
    /// `embeddings: [N, D_e]` are required when SGA or the adaptive
    /// adjacency is on and ignored otherwise.
    pub fn forward(
        &self,
        tape: &mut Tape,
        p: &Bound,
        x: Var,
        supports: &Supports,
        embeddings: Option<Var>,
    ) -> Result<Var> {
        let sx = tape.shape(x).to_vec();
        if sx.len() != 4 || sx[3] != self.in_channels {
            return Err(Error::invalid(format!("backbone input must be [B, N, L, {}], got {sx:?}", self.in_channels)));
        }
        let (b, n) = (sx[0], sx[1]);
        if supports.num_roads() != n {
            return Err(Error::invalid(format!("supports cover {} roads, batch has {n}", supports.num_roads())));
        }
        let e = if self.flags.needs_embeddings() {
            let e = embeddings.ok_or_else(|| Error::invalid("embeddings required for SGA / adaptive adjacency"))?;
            if tape.shape(e) != [n, self.embed_dim] {
                return Err(Error::invalid(format!(
                    "embeddings {:?} do not cover the {n} roads in the batch",
                    tape.shape(e)
                )));
            }
            Some(e)
        } else {
            None
        };

        let rf = self.cfg.receptive_field();
        let x = if sx[2] < rf {
            let pad = tape.constant(Tensor::zeros(&[b, n, rf - sx[2], self.in_channels]))?;
            tape.concat(&[pad, x], 2)?
        } else {
            x
        };
        let mut h = linear(tape, p, "start", x)?;

        let fwd = tape.constant(supports.forward.clone())?;
        let bwd = tape.constant(supports.backward.clone())?;
        let mut sup = vec![("fwd", fwd), ("bwd", bwd)];
        if self.flags.adaptive {
            let a = infer_adaptive_adjacency(tape, p, e.expect("checked above"))?;
            sup.push(("adp", a));
        }

        let mut skips = Vec::with_capacity(self.cfg.layers);
        for l in 0..self.cfg.layers {
            let pre = format!("layer{l}");
            let residual = h;
            let mut z = h;
            if self.flags.sga {
                z = sga(tape, p, &format!("{pre}.sga_tcn"), z, e.expect("checked above"))?;
            }
            z = gated_tcn(tape, p, &format!("{pre}.tcn"), z, self.cfg.dilation(l))?;
            let t = tape.shape(z)[2];
            let last = tape.slice(z, 2, t - 1, 1)?;
            let last = tape.reshape(last, &[b, n, self.cfg.hidden])?;
            skips.push(linear(tape, p, &format!("{pre}.skip"), last)?);
            if self.flags.sga {
                z = sga(tape, p, &format!("{pre}.sga_gcn"), z, e.expect("checked above"))?;
            }
            z = diffusion_gcn(tape, p, &format!("{pre}.gcn"), z, &sup, self.cfg.diffusion_order)?;
            let rt = tape.shape(residual)[2];
            let cropped = tape.slice(residual, 2, rt - t, t)?;
            h = tape.add(z, cropped)?;
        }
        let s = tape.concat(&skips, 2)?;
        let s = tape.relu(s)?;
        let s = linear(tape, p, "end1", s)?;
        let s = tape.relu(s)?;
        linear(tape, p, "end2", s)
    }

    /// Forward pass on plain tensors with frozen parameters.
    pub fn predict(&self, inputs: &Tensor, supports: &Supports, embeddings: Option<&Tensor>) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape, false)?;
        let x = tape.constant(inputs.clone())?;
        let e = match embeddings {
            Some(t) if self.flags.needs_embeddings() => Some(tape.constant(t.clone())?),
            _ => None,
        };
        let y = self.forward(&mut tape, &p, x, supports, e)?;
        Ok(tape.value(y).clone())
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn small() -> BackboneConfig {
        BackboneConfig { hidden: 4, skip: 3, end: 5, layers: 4, gate_hidden: 6, ..Default::default() }
    }

    fn sga_params(d: usize, hidden: usize, seed: u64) -> ParamSet {
        let mut ps = ParamSet::new();
        ps.insert("g.fc1_h.weight", random(&[d, hidden], seed));
        ps.insert("g.fc1_e.weight", random(&[d, hidden], seed + 1));
        ps.insert("g.fc1.bias", random(&[hidden], seed + 2));
        ps.insert("g.fc2.weight", random(&[hidden, 1], seed + 3));
        ps.insert("g.fc2.bias", random(&[1], seed + 4));
        ps
    }

    fn run_sga(ps: &ParamSet, h: &Tensor, e: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape, false).unwrap();
        let (hv, ev) = (tape.constant(h.clone()).unwrap(), tape.constant(e.clone()).unwrap());
        let out = sga(&mut tape, &p, "g", hv, ev).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn sga_zero_embedding_is_identity() {
        let h = random(&[2, 3, 4, 5], 1);
        let out = run_sga(&sga_params(5, 7, 2), &h, &Tensor::zeros(&[3, 5]));
        assert_eq!(out.data(), h.data());
    }

    #[test]
    fn sga_zero_gate_is_half() {
        let mut ps = sga_params(3, 4, 0);
        for (name, shape) in
            [("g.fc1_h.weight", vec![3, 4]), ("g.fc1_e.weight", vec![3, 4]), ("g.fc2.weight", vec![4, 1])]
        {
            ps.insert(name, Tensor::zeros(&shape));
        }
        ps.insert("g.fc1.bias", Tensor::zeros(&[4]));
        ps.insert("g.fc2.bias", Tensor::zeros(&[1]));
        let h = random(&[1, 2, 3, 3], 4);
        let e = random(&[2, 3], 5);
        let out = run_sga(&ps, &h, &e);
        for bi in 0..2 {
            for t in 0..3 {
                for d in 0..3 {
                    assert_eq!(out.get(&[0, bi, t, d]), h.get(&[0, bi, t, d]) + 0.5 * e.get(&[bi, d]));
                }
            }
        }
    }

    #[test]
    fn sga_saturated_gate_adds_embedding() {
        let mut ps = sga_params(2, 3, 0);
        ps.insert("g.fc2.bias", Tensor::vector(vec![1e3]));
        ps.insert("g.fc2.weight", Tensor::zeros(&[3, 1]));
        let h = random(&[1, 2, 2, 2], 1);
        let e = random(&[2, 2], 2);
        let out = run_sga(&ps, &h, &e);
        assert!((out.get(&[0, 1, 1, 0]) - (h.get(&[0, 1, 1, 0]) + e.get(&[1, 0]))).abs() < 1e-12);
    }

    #[test]
    fn tcn_length_and_zero_kernels() {
        let mut ps = ParamSet::new();
        for b in ["filter", "gate"] {
            ps.insert(format!("t.{b}.weight"), Tensor::zeros(&[2, 3, 3]));
            ps.insert(format!("t.{b}.bias"), Tensor::zeros(&[3]));
        }
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape, false).unwrap();
        let h = tape.constant(random(&[1, 2, 12, 3], 0)).unwrap();
        let out = gated_tcn(&mut tape, &p, "t", h, 1).unwrap();
        assert_eq!(tape.shape(out), [1, 2, 11, 3]);
        assert!(tape.value(out).data().iter().all(|&v| v == 0.0));
        let out2 = gated_tcn(&mut tape, &p, "t", h, 2).unwrap();
        assert_eq!(tape.shape(out2)[2], 10);
        let short = tape.constant(random(&[1, 2, 1, 3], 0)).unwrap();
        assert!(gated_tcn(&mut tape, &p, "t", short, 1).is_err());
    }

    #[test]
    fn gcn_identity_support_and_line_graph_oracle() {
        // identity support, K = 1: Z = H·W0 + H·W1
        let mut ps = ParamSet::new();
        ps.insert("g.w0", random(&[2, 2], 1));
        ps.insert("g.s1", random(&[2, 2], 2));
        ps.insert("g.bias", Tensor::zeros(&[2]));
        let h = random(&[1, 3, 1, 2], 3);
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape, false).unwrap();
        let hv = tape.constant(h.clone()).unwrap();
        let eye = tape.constant(Tensor::identity(3)).unwrap();
        let z = diffusion_gcn(&mut tape, &p, "g", hv, &[("s", eye)], 1).unwrap();
        let (w0, w1) = (ps.expect("g.w0"), ps.expect("g.s1"));
        for i in 0..3 {
            for j in 0..2 {
                let expected: f64 = (0..2).map(|k| h.get(&[0, i, 0, k]) * (w0.get(&[k, j]) + w1.get(&[k, j]))).sum();
                assert!((tape.value(z).get(&[0, i, 0, j]) - expected).abs() < 1e-12);
            }
        }

        // 3-node line graph, K = 2, D = 1, dense matrix powers
        let adj = [1.0, 1.0, 0.0, 1.0, 1.0, 1.0, 0.0, 1.0, 1.0];
        let sup = Supports::from_adjacency(&adj, 3).unwrap();
        let mut ps = ParamSet::new();
        for (name, v) in [("g.w0", 0.5), ("g.fwd1", -1.0), ("g.fwd2", 2.0), ("g.bias", 0.25)] {
            ps.insert(
                name,
                if name == "g.bias" { Tensor::vector(vec![v]) } else { Tensor::new(vec![1, 1], vec![v]).unwrap() },
            );
        }
        let x = [1.0, -2.0, 4.0];
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape, false).unwrap();
        let hv = tape.constant(Tensor::new(vec![1, 3, 1, 1], x.to_vec()).unwrap()).unwrap();
        let pf = tape.constant(sup.forward.clone()).unwrap();
        let z = diffusion_gcn(&mut tape, &p, "g", hv, &[("fwd", pf)], 2).unwrap();
        let pm = [[0.5, 0.5, 0.0], [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0], [0.0, 0.5, 0.5]];
        let mv = |v: [f64; 3]| -> [f64; 3] { [0, 1, 2].map(|i| (0..3).map(|j| pm[i][j] * v[j]).sum()) };
        let (p1, p2) = (mv(x), mv(mv(x)));
        for i in 0..3 {
            let expected = 0.5 * x[i] - p1[i] + 2.0 * p2[i] + 0.25;
            assert!((tape.value(z).data()[i] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn gcn_zero_weights_and_mismatch() {
        let mut ps = ParamSet::new();
        ps.insert("g.w0", Tensor::zeros(&[2, 2]));
        ps.insert("g.s1", Tensor::zeros(&[2, 2]));
        ps.insert("g.bias", Tensor::zeros(&[2]));
        let mut tape = Tape::new();
        let p = ps.bind(&mut tape, false).unwrap();
        let h = tape.constant(random(&[2, 3, 2, 2], 0)).unwrap();
        let s = tape.constant(random(&[3, 3], 1)).unwrap();
        let z = diffusion_gcn(&mut tape, &p, "g", h, &[("s", s)], 1).unwrap();
        assert!(tape.value(z).data().iter().all(|&v| v == 0.0));
        let bad = tape.constant(random(&[2, 2], 1)).unwrap();
        assert!(diffusion_gcn(&mut tape, &p, "g", h, &[("s", bad)], 1).is_err());
    }

    #[test]
    fn adaptive_adjacency_cases() {
        let mut tape = Tape::new();
        let eye = tape.constant(Tensor::identity(2)).unwrap();
        let a = adjacency_from_nodes(&mut tape, eye, eye).unwrap();
        let e1 = std::f64::consts::E;
        let v = tape.value(a).data().to_vec();
        assert!((v[0] - e1 / (e1 + 1.0)).abs() < 1e-12 && (v[1] - 1.0 / (e1 + 1.0)).abs() < 1e-12);
        assert!((v[0] - 0.7311).abs() < 1e-4 && (v[1] - 0.2689).abs() < 1e-4);

        let model = Backbone::new(small(), Flags { adaptive: true, ..Flags::PLAIN }, 4, 0).unwrap();
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, false).unwrap();
        let same = tape.constant(Tensor::new(vec![5, 4], [0.3, -0.2, 0.9, 0.1].repeat(5)).unwrap()).unwrap();
        let a = infer_adaptive_adjacency(&mut tape, &p, same).unwrap();
        assert!(tape.value(a).data().iter().all(|&x| (x - 0.2).abs() < 1e-12));
        let rand_e = tape.constant(random(&[6, 4], 9)).unwrap();
        let a = infer_adaptive_adjacency(&mut tape, &p, rand_e).unwrap();
        for row in tape.value(a).data().chunks(6) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn transition_rows_sum_to_one() {
        let adj = [1.0, 0.5, 0.0, 0.0, 1.0, 0.2, 0.3, 0.0, 1.0];
        let s = Supports::from_adjacency(&adj, 3).unwrap();
        for m in [&s.forward, &s.backward] {
            for row in m.data().chunks(3) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
        assert!((s.backward.get(&[0, 2]) - 0.3 / 1.3).abs() < 1e-12);
        let isolated = Supports::from_adjacency(&[0.0; 4], 2).unwrap();
        assert_eq!(isolated.forward, Tensor::identity(2));
    }

    #[test]
    fn output_shape_and_flags_off_is_plain() {
        let cfg = BackboneConfig { hidden: 4, skip: 3, end: 5, layers: 8, gate_hidden: 6, ..Default::default() };
        let sup = Supports::from_adjacency(&[1.0; 25], 5).unwrap();
        let x = random(&[4, 5, 12, 1], 3);
        let e = random(&[5, 4], 4);
        let plain = Backbone::new(cfg.clone(), Flags::PLAIN, 4, 11).unwrap();
        let y = plain.predict(&x, &sup, None).unwrap();
        assert_eq!(y.shape(), [4, 5, 12]);
        assert_eq!(plain.predict(&x, &sup, Some(&e)).unwrap(), y);
        // shared parameters do not depend on which extensions are enabled
        let full = Backbone::new(cfg, Flags { sga: true, adaptive: true, decoupling: false }, 4, 11).unwrap();
        for (name, t) in plain.params.iter() {
            assert_eq!(full.params.expect(name), t, "{name}");
        }
        assert!(plain.params.names().all(|n| !n.contains("sga") && !n.starts_with("adp") && !n.contains(".adp")));
        let yf = full.predict(&x, &sup, Some(&e)).unwrap();
        assert_ne!(yf, y);
        assert!(full.predict(&x, &sup, None).is_err());
    }

    #[test]
    fn adaptive_off_leaves_inference_parameters_untouched() {
        let cfg = small();
        let model = Backbone::new(cfg, Flags { sga: true, adaptive: false, decoupling: true }, 4, 0).unwrap();
        let sup = Supports::from_adjacency(&[1.0; 9], 3).unwrap();
        let mut tape = Tape::new();
        let p = model.params.bind(&mut tape, true).unwrap();
        let x = tape.constant(random(&[2, 3, 12, 2], 1)).unwrap();
        let e = tape.constant(random(&[3, 4], 2)).unwrap();
        let y = model.forward(&mut tape, &p, x, &sup, Some(e)).unwrap();
        let loss = tape.mean(y).unwrap();
        let mut g = tape.backward_scalar(loss).unwrap();
        let grads = p.collect(&mut g);
        assert!(grads.keys().all(|k| !k.starts_with("adp")));
        assert!(grads.iter().filter(|(k, _)| k.contains("sga")).any(|(_, t)| t.data().iter().any(|&v| v != 0.0)));
    }

    #[test]
    fn road_permutation_equivariance() {
        let model = Backbone::new(small(), Flags::ALL_ON, 4, 3).unwrap();
        let adj = [1.0, 0.4, 0.0, 0.4, 1.0, 0.7, 0.0, 0.7, 1.0];
        let x = random(&[2, 3, 12, 2], 5);
        let e = random(&[3, 4], 6);
        let y = model.predict(&x, &Supports::from_adjacency(&adj, 3).unwrap(), Some(&e)).unwrap();
        let perm = [2usize, 0, 1];
        let padj: Vec<f64> = (0..9).map(|c| adj[perm[c / 3] * 3 + perm[c % 3]]).collect();
        let px = Tensor::new(
            vec![2, 3, 12, 2],
            (0..2)
                .flat_map(|b| perm.iter().flat_map(move |&r| (0..24).map(move |i| (b, r, i))))
                .map(|(b, r, i)| x.data()[(b * 3 + r) * 24 + i])
                .collect(),
        )
        .unwrap();
        let pe =
            Tensor::new(vec![3, 4], perm.iter().flat_map(|&r| e.data()[r * 4..r * 4 + 4].to_vec()).collect()).unwrap();
        let py = model.predict(&px, &Supports::from_adjacency(&padj, 3).unwrap(), Some(&pe)).unwrap();
        for b in 0..2 {
            for (i, &r) in perm.iter().enumerate() {
                for h in 0..12 {
                    assert!((py.get(&[b, i, h]) - y.get(&[b, r, h])).abs() < 1e-12);
                }
            }
        }
    }
}
