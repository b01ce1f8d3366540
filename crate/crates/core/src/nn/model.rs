use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gemm, time_embed, Architecture, ModelSpec, NnError, TIME_EMBED_DIM};

/// Initial bias of the last gate layer; sigmoid(4) ≈ 0.98.
const GATE_BIAS_INIT: f64 = 4.0;

/// Affine map stored as a `fan_in × fan_out` row-major weight block plus an
/// optional bias, both at offsets into the flat parameter vector.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Linear {
    w: usize,
    b: Option<usize>,
    fan_in: usize,
    fan_out: usize,
}

impl Linear {
    fn alloc(offset: &mut usize, fan_in: usize, fan_out: usize, bias: bool) -> Self {
        let w = *offset;
        *offset += fan_in * fan_out;
        let b = bias.then(|| {
            let b = *offset;
            *offset += fan_out;
            b
        });
        Self { w, b, fan_in, fan_out }
    }

    fn weights<'a>(&self, p: &'a [f64]) -> &'a [f64] {
        &p[self.w..self.w + self.fan_in * self.fan_out]
    }

    fn forward(&self, p: &[f64], x: &[f64], batch: usize) -> Vec<f64> {
        let mut out = vec![0.0; batch * self.fan_out];
        let beta = match self.b {
            Some(b) => {
                let bias = &p[b..b + self.fan_out];
                for row in out.chunks_mut(self.fan_out) {
                    row.copy_from_slice(bias);
                }
                1.0
            }
            None => 0.0,
        };
        gemm(batch, self.fan_in, self.fan_out, 1.0, x, false, self.weights(p), false, beta, &mut out);
        out
    }

    /// Linear part only: dx · W restricted to the first `rows` input rows.
    fn tangent(&self, p: &[f64], dx: &[f64], rows: usize, batch: usize) -> Vec<f64> {
        let mut out = vec![0.0; batch * self.fan_out];
        let w = &self.weights(p)[..rows * self.fan_out];
        gemm(batch, rows, self.fan_out, 1.0, dx, false, w, false, 0.0, &mut out);
        out
    }

    /// Accumulates parameter gradients and optionally returns dL/dx.
    fn backward(
        &self,
        p: &[f64],
        grad: &mut [f64],
        x: &[f64],
        dout: &[f64],
        batch: usize,
        need_dx: bool,
    ) -> Option<Vec<f64>> {
        let gw = &mut grad[self.w..self.w + self.fan_in * self.fan_out];
        gemm(self.fan_in, batch, self.fan_out, 1.0, x, true, dout, false, 1.0, gw);
        if let Some(b) = self.b {
            let gb = &mut grad[b..b + self.fan_out];
            for row in dout.chunks(self.fan_out) {
                for (g, d) in gb.iter_mut().zip(row) {
                    *g += d;
                }
            }
        }
        need_dx.then(|| {
            let mut dx = vec![0.0; batch * self.fan_in];
            gemm(batch, self.fan_out, self.fan_in, 1.0, dout, false, self.weights(p), true, 0.0, &mut dx);
            dx
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
struct GatedLayer {
    main: Linear,
    gate_hidden: Vec<Linear>,
    gate_out: Linear,
    hyper_bias: Linear,
}

#[derive(Clone, Debug, PartialEq)]
enum Body {
    Mlp(Vec<Linear>),
    ConcatSquash(Vec<GatedLayer>),
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    body: Body,
    out: Linear,
    count: usize,
}

impl Layout {
    fn build(arch: &Architecture, d: usize) -> Self {
        let e = TIME_EMBED_DIM;
        let mut off = 0;
        match *arch {
            Architecture::Mlp { depth, width } => {
                let mut hidden = Vec::with_capacity(depth);
                for l in 0..depth {
                    let fan_in = if l == 0 { d + e } else { width };
                    hidden.push(Linear::alloc(&mut off, fan_in, width, true));
                }
                let out = Linear::alloc(&mut off, width, d, true);
                Self {
                    body: Body::Mlp(hidden),
                    out,
                    count: off,
                }
            }
            Architecture::ConcatSquash {
                depth,
                width,
                gate_depth,
                gate_width,
            } => {
                let mut hidden = Vec::with_capacity(depth);
                for l in 0..depth {
                    let fan_in = if l == 0 { d } else { width };
                    let main = Linear::alloc(&mut off, fan_in, width, true);
                    let gate_hidden = (0..gate_depth)
                        .map(|g| {
                            let gin = if g == 0 { e } else { gate_width };
                            Linear::alloc(&mut off, gin, gate_width, true)
                        })
                        .collect();
                    let gate_out = Linear::alloc(&mut off, gate_width, width, true);
                    let hyper_bias = Linear::alloc(&mut off, e, width, false);
                    hidden.push(GatedLayer {
                        main,
                        gate_hidden,
                        gate_out,
                        hyper_bias,
                    });
                }
                let out = Linear::alloc(&mut off, width, d, true);
                Self {
                    body: Body::ConcatSquash(hidden),
                    out,
                    count: off,
                }
            }
        }
    }

    /// Every affine block in allocation order, with a flag for "last gate layer".
    fn linears(&self) -> Vec<(Linear, bool)> {
        let mut all = Vec::new();
        match &self.body {
            Body::Mlp(h) => all.extend(h.iter().map(|l| (*l, false))),
            Body::ConcatSquash(h) => {
                for g in h {
                    all.push((g.main, false));
                    all.extend(g.gate_hidden.iter().map(|l| (*l, false)));
                    all.push((g.gate_out, true));
                    all.push((g.hyper_bias, false));
                }
            }
        }
        all.push((self.out, false));
        all
    }
}

#[derive(Clone, Debug)]
struct GateCache {
    pres: Vec<Vec<f64>>,
    posts: Vec<Vec<f64>>,
    sig: Vec<f64>,
}

#[derive(Clone, Debug)]
struct HiddenCache {
    /// Main affine output before gating (ConcatSquash only).
    z: Vec<f64>,
    gate: Option<GateCache>,
    pre: Vec<f64>,
    post: Vec<f64>,
}

/// Intermediate values of a batched forward pass, reused by
/// [`VectorFieldModel::backward`] and [`VectorFieldModel::jvp_cached`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    batch: usize,
    emb: Vec<f64>,
    first_input: Vec<f64>,
    hidden: Vec<HiddenCache>,
    output: Vec<f64>,
}

impl ForwardCache {
    pub fn batch(&self) -> usize {
        self.batch
    }

    /// `batch × input_dim` outputs, row-major.
    pub fn output(&self) -> &[f64] {
        &self.output
    }

    pub fn into_output(self) -> Vec<f64> {
        self.output
    }
}

/// Parameters and layout of u^θ(x, t).
#[derive(Clone, Debug, PartialEq)]
pub struct VectorFieldModel {
    spec: ModelSpec,
    layout: Layout,
    params: Vec<f64>,
}

impl VectorFieldModel {
    /// Glorot-uniform weights, zero biases, gate output bias at
    /// [`GATE_BIAS_INIT`]; the output layer is zeroed if `spec.zero_output`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, NnError> {
        spec.architecture.validate()?;
        if spec.input_dim == 0 {
            return Err(NnError::InvalidArchitecture("input_dim must be positive".into()));
        }
        let layout = Layout::build(&spec.architecture, spec.input_dim);
        let mut params = vec![0.0; layout.count];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (lin, is_gate_out) in layout.linears() {
            let limit = (6.0 / (lin.fan_in + lin.fan_out) as f64).sqrt();
            for w in &mut params[lin.w..lin.w + lin.fan_in * lin.fan_out] {
                *w = rng.gen_range(-limit..limit);
            }
            if let (Some(b), true) = (lin.b, is_gate_out) {
                params[b..b + lin.fan_out].fill(GATE_BIAS_INIT);
            }
        }
        if spec.zero_output {
            let out = layout.out;
            params[out.w..out.w + out.fan_in * out.fan_out].fill(0.0);
            if let Some(b) = out.b {
                params[b..b + out.fan_out].fill(0.0);
            }
        }
        Ok(Self { spec, layout, params })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<f64>) -> Result<Self, NnError> {
        spec.architecture.validate()?;
        let layout = Layout::build(&spec.architecture, spec.input_dim);
        if params.len() != layout.count {
            return Err(NnError::DimMismatch {
                expected: layout.count,
                found: params.len(),
            });
        }
        Ok(Self { spec, layout, params })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn input_dim(&self) -> usize {
        self.spec.input_dim
    }

    pub fn param_count(&self) -> usize {
        self.layout.count
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    /// Zeroes the output layer so that u ≡ 0.
    pub fn zero_output_layer(&mut self) {
        let out = self.layout.out;
        self.params[out.w..out.w + out.fan_in * out.fan_out].fill(0.0);
        if let Some(b) = out.b {
            self.params[b..b + out.fan_out].fill(0.0);
        }
    }

    fn check_batch(&self, xs: &[f64], ts: &[f64]) -> Result<usize, NnError> {
        let d = self.spec.input_dim;
        if xs.len() != ts.len() * d {
            return Err(NnError::DimMismatch {
                expected: ts.len() * d,
                found: xs.len(),
            });
        }
        Ok(ts.len())
    }

    /// u(x, t) for a single point.
    pub fn forward(&self, x: &[f64], t: f64) -> Result<Vec<f64>, NnError> {
        self.forward_batch(x, &[t])
    }

    /// u(xᵢ, tᵢ) for a row-major batch.
    pub fn forward_batch(&self, xs: &[f64], ts: &[f64]) -> Result<Vec<f64>, NnError> {
        Ok(self.forward_cached(xs, ts)?.output)
    }

    pub fn forward_cached(&self, xs: &[f64], ts: &[f64]) -> Result<ForwardCache, NnError> {
        let batch = self.check_batch(xs, ts)?;
        let d = self.spec.input_dim;
        let act = self.spec.activation;
        let p = &self.params;

        let mut emb = Vec::with_capacity(batch * TIME_EMBED_DIM);
        for &t in ts {
            emb.extend_from_slice(&time_embed(t));
        }

        let first_input = match self.layout.body {
            Body::Mlp(_) => {
                let mut cat = Vec::with_capacity(batch * (d + TIME_EMBED_DIM));
                for (x, e) in xs.chunks(d).zip(emb.chunks(TIME_EMBED_DIM)) {
                    cat.extend_from_slice(x);
                    cat.extend_from_slice(e);
                }
                cat
            }
            Body::ConcatSquash(_) => xs.to_vec(),
        };

        let mut hidden: Vec<HiddenCache> = Vec::new();
        match &self.layout.body {
            Body::Mlp(layers) => {
                for lin in layers {
                    let input = hidden.last().map_or(&first_input, |h| &h.post);
                    let pre = lin.forward(p, input, batch);
                    let post = pre.iter().map(|&y| act.apply(y)).collect();
                    hidden.push(HiddenCache {
                        z: Vec::new(),
                        gate: None,
                        pre,
                        post,
                    });
                }
            }
            Body::ConcatSquash(layers) => {
                for layer in layers {
                    let input = hidden.last().map_or(&first_input, |h| &h.post);
                    let z = layer.main.forward(p, input, batch);

                    let mut pres = Vec::with_capacity(layer.gate_hidden.len());
                    let mut posts: Vec<Vec<f64>> = Vec::with_capacity(layer.gate_hidden.len());
                    for g in &layer.gate_hidden {
                        let gin = posts.last().unwrap_or(&emb);
                        let gp = g.forward(p, gin, batch);
                        posts.push(gp.iter().map(|&y| act.apply(y)).collect());
                        pres.push(gp);
                    }
                    let logits = layer.gate_out.forward(p, posts.last().expect("gate depth >= 1"), batch);
                    let sig: Vec<f64> = logits.iter().map(|&v| sigmoid(v)).collect();
                    let shift = layer.hyper_bias.forward(p, &emb, batch);

                    let pre: Vec<f64> = z
                        .iter()
                        .zip(&sig)
                        .zip(&shift)
                        .map(|((z, s), b)| z * s + b)
                        .collect();
                    let post = pre.iter().map(|&y| act.apply(y)).collect();
                    hidden.push(HiddenCache {
                        z,
                        gate: Some(GateCache { pres, posts, sig }),
                        pre,
                        post,
                    });
                }
            }
        }

        let last = &hidden.last().expect("depth >= 1").post;
        let output = self.layout.out.forward(p, last, batch);
        Ok(ForwardCache {
            batch,
            emb,
            first_input,
            hidden,
            output,
        })
    }

    /// Reverse-mode gradient of a scalar loss with respect to all
    /// parameters, given dL/d(output) for the cached batch.
    pub fn backward(&self, cache: &ForwardCache, dout: &[f64]) -> Vec<f64> {
        let batch = cache.batch;
        assert_eq!(dout.len(), batch * self.spec.input_dim, "dout shape");
        let act = self.spec.activation;
        let p = &self.params;
        let mut grad = vec![0.0; self.layout.count];

        let last = &cache.hidden.last().expect("depth >= 1").post;
        let mut dh = self
            .layout
            .out
            .backward(p, &mut grad, last, dout, batch, true)
            .expect("dx requested");

        let n_layers = cache.hidden.len();
        for l in (0..n_layers).rev() {
            let hc = &cache.hidden[l];
            let input = if l == 0 { &cache.first_input } else { &cache.hidden[l - 1].post };
            let dpre: Vec<f64> = dh
                .iter()
                .zip(hc.pre.iter().zip(&hc.post))
                .map(|(g, (&y, &a))| g * act.derivative(y, a))
                .collect();
            let need_dx = l > 0;
            let next = match &self.layout.body {
                Body::Mlp(layers) => layers[l].backward(p, &mut grad, input, &dpre, batch, need_dx),
                Body::ConcatSquash(layers) => {
                    let layer = &layers[l];
                    let gc = hc.gate.as_ref().expect("gated layer cache");
                    let dz: Vec<f64> = dpre.iter().zip(&gc.sig).map(|(g, s)| g * s).collect();
                    let dlogits: Vec<f64> = dpre
                        .iter()
                        .zip(&hc.z)
                        .zip(&gc.sig)
                        .map(|((g, z), s)| g * z * s * (1.0 - s))
                        .collect();
                    layer.hyper_bias.backward(p, &mut grad, &cache.emb, &dpre, batch, false);

                    let gate_last = gc.posts.last().expect("gate depth >= 1");
                    let mut dg = layer
                        .gate_out
                        .backward(p, &mut grad, gate_last, &dlogits, batch, true)
                        .expect("dx requested");
                    for g in (0..layer.gate_hidden.len()).rev() {
                        let dgp: Vec<f64> = dg
                            .iter()
                            .zip(gc.pres[g].iter().zip(&gc.posts[g]))
                            .map(|(d, (&y, &a))| d * act.derivative(y, a))
                            .collect();
                        let gin = if g == 0 { &cache.emb } else { &gc.posts[g - 1] };
                        match layer.gate_hidden[g].backward(p, &mut grad, gin, &dgp, batch, g > 0) {
                            Some(v) => dg = v,
                            None => break,
                        }
                    }
                    layer.main.backward(p, &mut grad, input, &dz, batch, need_dx)
                }
            };
            match next {
                Some(v) => dh = v,
                None => break,
            }
        }
        grad
    }

    /// Forward-mode directional derivative (∂u/∂x)·d at time `t` held fixed.
    pub fn jvp(&self, x: &[f64], t: f64, direction: &[f64]) -> Result<Vec<f64>, NnError> {
        let cache = self.forward_cached(x, &[t])?;
        if direction.len() != self.spec.input_dim {
            return Err(NnError::DimMismatch {
                expected: self.spec.input_dim,
                found: direction.len(),
            });
        }
        Ok(self.jvp_cached(&cache, direction))
    }

    /// Batched Jacobian-vector products at the cached points, one tangent row per sample.
    pub fn jvp_cached(&self, cache: &ForwardCache, dxs: &[f64]) -> Vec<f64> {
        let batch = cache.batch;
        let d = self.spec.input_dim;
        assert_eq!(dxs.len(), batch * d, "tangent shape");
        let act = self.spec.activation;
        let p = &self.params;

        let mut dh = dxs.to_vec();
        let mut rows = d;
        for (l, hc) in cache.hidden.iter().enumerate() {
            let dpost: Vec<f64> = match &self.layout.body {
                Body::Mlp(layers) => {
                    let dz = layers[l].tangent(p, &dh, rows, batch);
                    dz.iter()
                        .zip(hc.pre.iter().zip(&hc.post))
                        .map(|(v, (&y, &a))| v * act.derivative(y, a))
                        .collect()
                }
                Body::ConcatSquash(layers) => {
                    let dz = layers[l].main.tangent(p, &dh, rows, batch);
                    let sig = &hc.gate.as_ref().expect("gated layer cache").sig;
                    dz.iter()
                        .zip(sig)
                        .zip(hc.pre.iter().zip(&hc.post))
                        .map(|((v, s), (&y, &a))| v * s * act.derivative(y, a))
                        .collect()
                }
            };
            rows = match &self.layout.body {
                Body::Mlp(layers) => layers[l].fan_out,
                Body::ConcatSquash(layers) => layers[l].main.fan_out,
            };
            dh = dpost;
        }
        self.layout.out.tangent(p, &dh, rows, batch)
    }

    /// Exact divergence tr(∂u/∂x) at each cached point, from `input_dim`
    /// forward-mode passes along the coordinate axes.
    pub fn divergence_exact_cached(&self, cache: &ForwardCache) -> Vec<f64> {
        let batch = cache.batch;
        let d = self.spec.input_dim;
        let mut div = vec![0.0; batch];
        let mut dx = vec![0.0; batch * d];
        for i in 0..d {
            dx.fill(0.0);
            for b in 0..batch {
                dx[b * d + i] = 1.0;
            }
            let jv = self.jvp_cached(cache, &dx);
            for b in 0..batch {
                div[b] += jv[b * d + i];
            }
        }
        div
    }

    /// Probe-averaged divergence estimate (1/P) Σ εᵀ (∂u/∂x) ε, one probe
    /// matrix of `batch × input_dim` entries per probe.
    pub fn divergence_probes_cached(&self, cache: &ForwardCache, probes: &[Vec<f64>]) -> Vec<f64> {
        let batch = cache.batch;
        let d = self.spec.input_dim;
        let mut div = vec![0.0; batch];
        if probes.is_empty() {
            return div;
        }
        for eps in probes {
            let jv = self.jvp_cached(cache, eps);
            for b in 0..batch {
                let row = b * d..(b + 1) * d;
                div[b] += eps[row.clone()].iter().zip(&jv[row]).map(|(e, j)| e * j).sum::<f64>();
            }
        }
        let inv = 1.0 / probes.len() as f64;
        div.iter_mut().for_each(|v| *v *= inv);
        div
    }
}

#[inline]
fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;

    fn spec(architecture: Architecture, d: usize) -> ModelSpec {
        ModelSpec {
            architecture,
            input_dim: d,
            activation: Activation::Tanh,
            zero_output: false,
        }
    }

    fn small_cs() -> Architecture {
        Architecture::ConcatSquash {
            depth: 2,
            width: 7,
            gate_depth: 2,
            gate_width: 5,
        }
    }

    fn small_mlp() -> Architecture {
        Architecture::Mlp { depth: 3, width: 6 }
    }

    #[test]
    fn parameter_count_matches_layout() {
        for arch in [
            small_cs(),
            small_mlp(),
            Architecture::mlp_default(),
            Architecture::concat_squash_default(),
        ] {
            for d in [1, 2, 4, 30] {
                let m = VectorFieldModel::new(spec(arch, d), 0).unwrap();
                // Brute force: sum of block sizes, and blocks tile the vector.
                let mut blocks: Vec<(usize, usize)> = Vec::new();
                for (lin, _) in m.layout.linears() {
                    blocks.push((lin.w, lin.fan_in * lin.fan_out));
                    if let Some(b) = lin.b {
                        blocks.push((b, lin.fan_out));
                    }
                }
                blocks.sort();
                let mut next = 0;
                for (start, len) in &blocks {
                    assert_eq!(*start, next);
                    next += len;
                }
                assert_eq!(next, m.param_count());
                assert_eq!(arch.parameter_count(d), m.param_count());
            }
        }
    }

    #[test]
    fn zero_output_layer_gives_zero_field() {
        for arch in [small_cs(), small_mlp()] {
            let mut s = spec(arch, 3);
            s.zero_output = true;
            let m = VectorFieldModel::new(s, 4).unwrap();
            for t in [0.0, 0.5, 0.999] {
                assert_eq!(m.forward(&[0.3, -1.0, 2.0], t).unwrap(), vec![0.0; 3]);
            }
        }
    }

    #[test]
    fn rejects_wrong_dimension() {
        let m = VectorFieldModel::new(spec(small_mlp(), 3), 0).unwrap();
        assert!(matches!(
            m.forward(&[1.0, 2.0], 0.0),
            Err(NnError::DimMismatch { expected: 3, found: 2 })
        ));
        assert!(VectorFieldModel::from_params(spec(small_mlp(), 3), vec![0.0; 5]).is_err());
    }

    #[test]
    fn gated_layer_with_unit_gate_is_linear() {
        // One gated layer with W = I, b = 0, gate saturated at 1 and no
        // hyper-bias reproduces its input before the activation.
        let arch = Architecture::ConcatSquash {
            depth: 1,
            width: 2,
            gate_depth: 1,
            gate_width: 3,
        };
        let mut m = VectorFieldModel::new(spec(arch, 2), 1).unwrap();
        let Body::ConcatSquash(layers) = m.layout.body.clone() else { unreachable!() };
        let layer = &layers[0];
        let p = m.params_mut();
        p[layer.main.w..layer.main.w + 4].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        p[layer.main.b.unwrap()..layer.main.b.unwrap() + 2].fill(0.0);
        let go = layer.gate_out;
        p[go.w..go.w + go.fan_in * go.fan_out].fill(0.0);
        p[go.b.unwrap()..go.b.unwrap() + 2].fill(800.0);
        let hb = layer.hyper_bias;
        p[hb.w..hb.w + hb.fan_in * hb.fan_out].fill(0.0);
        let cache = m.forward_cached(&[0.25, -0.5], &[0.3]).unwrap();
        assert_eq!(cache.hidden[0].pre, vec![0.25, -0.5]);
    }

    #[test]
    fn jvp_of_linear_readout() {
        // With a single hidden layer and zero first-layer weights the field is
        // constant in x, so every directional derivative vanishes.
        let mut m = VectorFieldModel::new(spec(Architecture::Mlp { depth: 1, width: 4 }, 2), 3).unwrap();
        let first = match &m.layout.body {
            Body::Mlp(l) => l[0],
            _ => unreachable!(),
        };
        m.params_mut()[first.w..first.w + 2 * 4].fill(0.0);
        assert_eq!(m.jvp(&[0.1, 0.2], 0.4, &[1.0, -1.0]).unwrap(), vec![0.0, 0.0]);
        let m = VectorFieldModel::new(spec(small_cs(), 2), 3).unwrap();
        assert_eq!(m.jvp(&[0.1, 0.2], 0.4, &[0.0, 0.0]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let m = VectorFieldModel::new(spec(small_cs(), 3), 2).unwrap();
        let cache = m.forward_cached(&[0.1, 0.2, 0.3, 1.0, 1.0, 1.0], &[0.2, 0.9]).unwrap();
        let g = m.backward(&cache, &[0.0; 6]);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn initialization_is_deterministic() {
        let a = VectorFieldModel::new(spec(small_cs(), 3), 17).unwrap();
        let b = VectorFieldModel::new(spec(small_cs(), 3), 17).unwrap();
        let c = VectorFieldModel::new(spec(small_cs(), 3), 18).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
