use std::collections::HashMap;

use crate::autodiff::{Graph, NodeId};
use crate::error::{shape_err, Error, Result};
use crate::patches::{slice_patches, PatchGeometry};
use crate::perturbed::PerturbedConfig;
use crate::rng::{derive_seed, gaussian_sample, RngStream};
use crate::tensor::Tensor;
use crate::topk::{hard_topk_indices, indicator_from_indices};

#[cfg(feature = "sinkhorn")]
use crate::sinkhorn::SinkhornConfig;

use super::config::{Aggregation, ModelConfig};

pub const NORMALIZE_EPS: f32 = 1e-5;
const SCORER_WIDTH: usize = 8;
const FEATURE_WIDTH: usize = 16;
const HEADS: usize = 2;
const INIT_TAG: u64 = 0x1a17;

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: &str, t: Tensor) {
        match self.index.get(name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.to_string(), self.entries.len());
                self.entries.push((name.to_string(), t));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }
}

/// Parameter group of a name: scorer (θ), feature net (φ) or
/// aggregation (ψ).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Group {
    Scorer,
    Feature,
    Aggregation,
}

pub fn group_of(name: &str) -> Group {
    if name.starts_with("scorer.") {
        Group::Scorer
    } else if name.starts_with("feature.") {
        Group::Feature
    } else {
        Group::Aggregation
    }
}

/// How the forward pass turns scores into an indicator matrix.
#[derive(Clone, Debug, PartialEq)]
pub enum Selection {
    Hard,
    Perturbed(PerturbedConfig),
    #[cfg(feature = "sinkhorn")]
    Sinkhorn(SinkhornConfig),
}

/// Node ids of one recorded forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: NodeId,
    /// Raw scores, flattened to `N`.
    pub scores: NodeId,
    pub normalized: NodeId,
    /// `N×K` indicator (constant for hard selection).
    pub y: NodeId,
    /// Graph leaf for each parameter, in store order.
    pub params: Vec<NodeId>,
    pub sinkhorn_converged: bool,
}

/// Plain-value result of a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub logits: Tensor,
    /// `grid_h×grid_w` raw scores.
    pub scores: Tensor,
    pub y: Tensor,
}

impl Prediction {
    pub fn class(&self) -> usize {
        argmax(self.logits.data())
    }
}

pub fn argmax(v: &[f32]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Average pooling of an `H×W×C` image by an integer factor.
pub fn downscale(image: &Tensor, factor: usize) -> Result<Tensor> {
    let [h, w, c] = image.shape()[..] else {
        return shape_err(format!("downscale expects H×W×C, got {:?}", image.shape()));
    };
    if factor == 0 || h % factor != 0 || w % factor != 0 {
        return shape_err(format!("factor {factor} does not divide {h}×{w}"));
    }
    let (oh, ow) = (h / factor, w / factor);
    let d = image.data();
    let inv = 1.0 / (factor * factor) as f32;
    let mut out = vec![0.0f32; oh * ow * c];
    for y in 0..h {
        for x in 0..w {
            let o = ((y / factor) * ow + x / factor) * c;
            for ch in 0..c {
                out[o + ch] += d[(y * w + x) * c + ch];
            }
        }
    }
    out.iter_mut().for_each(|v| *v *= inv);
    Tensor::new(vec![oh, ow, c], out)
}

fn he_init(rng: &mut RngStream, shape: &[usize], fan_in: usize, gain: f32) -> Tensor {
    let std = gain * (1.0 / fan_in as f32).sqrt();
    gaussian_sample(rng, shape).scale(std)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    cfg: ModelConfig,
    geom: PatchGeometry,
    params: ParamStore,
}

impl Model {
    /// Randomly initialized model.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let geom = cfg.geometry()?;
        let cin = cfg.input_channels();
        let d = cfg.hidden;
        let sq2 = std::f32::consts::SQRT_2;
        let mut rng = RngStream::new(derive_seed(seed, INIT_TAG));
        let mut p = ParamStore::default();
        let conv = |p: &mut ParamStore, rng: &mut RngStream, name: &str, ci: usize, co: usize, gain: f32| {
            p.insert(&format!("{name}.w"), he_init(rng, &[3, 3, ci, co], 9 * ci, gain));
            p.insert(&format!("{name}.b"), Tensor::zeros(&[co]));
        };
        conv(&mut p, &mut rng, "scorer.conv1", cfg.channels, SCORER_WIDTH, sq2);
        conv(&mut p, &mut rng, "scorer.conv2", SCORER_WIDTH, 1, 1.0);
        conv(&mut p, &mut rng, "feature.conv1", cin, FEATURE_WIDTH, sq2);
        conv(&mut p, &mut rng, "feature.conv2", FEATURE_WIDTH, FEATURE_WIDTH, sq2);
        let flat = (cfg.patch / 2) * (cfg.patch / 2) * FEATURE_WIDTH;
        p.insert("feature.dense.w", he_init(&mut rng, &[flat, d], flat, sq2));
        p.insert("feature.dense.b", Tensor::zeros(&[d]));
        if cfg.aggregation == Aggregation::Attention {
            let dh = d / HEADS;
            p.insert("agg.pos", Tensor::zeros(&[cfg.k, d]));
            for h in 0..HEADS {
                for m in ["q", "k", "v"] {
                    p.insert(&format!("agg.head{h}.{m}"), he_init(&mut rng, &[d, dh], d, 1.0));
                }
                p.insert(&format!("agg.head{h}.o"), he_init(&mut rng, &[dh, d], d, 1.0));
            }
            p.insert("agg.ffn1.w", he_init(&mut rng, &[d, 2 * d], d, sq2));
            p.insert("agg.ffn1.b", Tensor::zeros(&[2 * d]));
            p.insert("agg.ffn2.w", he_init(&mut rng, &[2 * d, d], 2 * d, 1.0));
            p.insert("agg.ffn2.b", Tensor::zeros(&[d]));
        }
        p.insert("agg.out.w", he_init(&mut rng, &[d, cfg.classes], d, 1.0));
        p.insert("agg.out.b", Tensor::zeros(&[cfg.classes]));
        Ok(Self {
            cfg: cfg.clone(),
            geom,
            params: p,
        })
    }

    /// Model from explicit parameters; every expected tensor must be
    /// present with the expected shape.
    pub fn from_params(cfg: &ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::init(cfg, 0)?;
        if params.len() != reference.params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, got {}",
                reference.params.len(),
                params.len()
            )));
        }
        for (name, t) in reference.params.iter() {
            match params.get(name) {
                Some(p) if p.shape() == t.shape() => {}
                Some(p) => {
                    return shape_err(format!("{name}: expected {:?}, got {:?}", t.shape(), p.shape()));
                }
                None => return Err(Error::Config(format!("missing parameter {name}"))),
            }
        }
        Ok(Self {
            cfg: cfg.clone(),
            geom: reference.geom,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Patch grid over the network input.
    pub fn geometry(&self) -> &PatchGeometry {
        &self.geom
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    /// Feature-net input: the image with coordinate planes appended if
    /// configured. The scorer always sees the plain image.
    pub fn prepare_input(&self, image: &Tensor) -> Result<Tensor> {
        let c = &self.cfg;
        image.expect_shape(&[c.image_h, c.image_w, c.channels])?;
        if !c.coord_channels {
            return Ok(image.clone());
        }
        let cin = c.input_channels();
        let mut out = Vec::with_capacity(c.image_h * c.image_w * cin);
        let rows = (c.image_h.max(2) - 1) as f32;
        let cols = (c.image_w.max(2) - 1) as f32;
        for (i, px) in image.data().chunks_exact(c.channels).enumerate() {
            out.extend_from_slice(px);
            out.push((i / c.image_w) as f32 / rows);
            out.push((i % c.image_w) as f32 / cols);
        }
        Tensor::new(vec![c.image_h, c.image_w, cin], out)
    }

    /// Records the forward pass. Parameters become differentiable leaves
    /// when `trainable`; the scorer never is under hard selection.
    pub fn build(&self, g: &mut Graph, image: &Tensor, selection: &Selection, trainable: bool) -> Result<Forward> {
        let x = self.prepare_input(image)?;
        let hard = matches!(selection, Selection::Hard);
        let params: Vec<NodeId> = self
            .params
            .iter()
            .map(|(name, t)| {
                if trainable && !(hard && group_of(name) == Group::Scorer) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect();
        let p = |name: &str| params[self.params.position(name).expect("parameter registered at init")];

        let scores = self.scorer(g, image, &p)?;
        let normalized = g.normalize_scores(scores, NORMALIZE_EPS)?;
        let k = self.cfg.k;
        let mut sinkhorn_converged = true;
        let (y, patches) = match selection {
            Selection::Hard => {
                let idx = hard_topk_indices(g.value(normalized).data(), k)?;
                let patches = slice_patches(&x, idx.as_slice(), &self.geom)?;
                let y = indicator_from_indices(&idx, self.geom.num_patches())?.into_tensor();
                (g.constant(y), g.constant(patches))
            }
            Selection::Perturbed(pcfg) => {
                let y = g.perturbed_topk(normalized, k, pcfg)?;
                let img = g.constant(x);
                (y, g.extract_patches(img, y, &self.geom)?)
            }
            #[cfg(feature = "sinkhorn")]
            Selection::Sinkhorn(scfg) => {
                let (mass, converged) = g.sinkhorn_topk(normalized, k, scfg)?;
                sinkhorn_converged = converged;
                let picks = hard_topk_indices(g.value(mass).data(), k)?;
                let y = g.scatter_select(mass, picks.as_slice())?;
                let img = g.constant(x);
                (y, g.extract_patches(img, y, &self.geom)?)
            }
        };
        let h = self.features(g, patches, &p)?;
        let logits = self.aggregate(g, h, &p, true)?;
        Ok(Forward {
            logits,
            scores,
            normalized,
            y,
            params,
            sinkhorn_converged,
        })
    }

    fn scorer(&self, g: &mut Graph, x: &Tensor, p: &impl Fn(&str) -> NodeId) -> Result<NodeId> {
        let small = downscale(x, self.cfg.scorer_downscale)?;
        let shape = small.shape().to_vec();
        let inp = g.constant(small.reshape(&[1, shape[0], shape[1], shape[2]])?);
        let h = g.conv2d(inp, p("scorer.conv1.w"), p("scorer.conv1.b"), 1)?;
        let h = g.relu(h);
        let h = g.conv2d(h, p("scorer.conv2.w"), p("scorer.conv2.b"), 1)?;
        let pooled = g.max_pool_grid(h, self.geom.grid_h, self.geom.grid_w)?;
        g.reshape(pooled, &[self.geom.num_patches()])
    }

    /// `K×P×P×C` patches to `K×D_h` embeddings with shared weights.
    fn features(&self, g: &mut Graph, patches: NodeId, p: &impl Fn(&str) -> NodeId) -> Result<NodeId> {
        let k = g.value(patches).shape()[0];
        let half = self.cfg.patch / 2;
        let h = g.conv2d(patches, p("feature.conv1.w"), p("feature.conv1.b"), 1)?;
        let h = g.relu(h);
        let h = g.conv2d(h, p("feature.conv2.w"), p("feature.conv2.b"), 1)?;
        let h = g.relu(h);
        let h = g.max_pool_grid(h, half, half)?;
        let h = g.reshape(h, &[k, half * half * FEATURE_WIDTH])?;
        let h = g.linear(h, p("feature.dense.w"), Some(p("feature.dense.b")))?;
        Ok(g.relu(h))
    }

    /// `K×D_h` embeddings to `D_o` logits.
    fn aggregate(&self, g: &mut Graph, h: NodeId, p: &impl Fn(&str) -> NodeId, positional: bool) -> Result<NodeId> {
        let d = self.cfg.hidden;
        let pooled = match self.cfg.aggregation {
            Aggregation::Mean => g.mean_rows(h)?,
            Aggregation::Max => g.max_rows(h)?,
            Aggregation::Attention => {
                let out = self.attention(g, h, p, positional)?;
                g.mean_rows(out)?
            }
        };
        let pooled = g.reshape(pooled, &[1, d])?;
        let logits = g.linear(pooled, p("agg.out.w"), Some(p("agg.out.b")))?;
        g.reshape(logits, &[self.cfg.classes])
    }

    /// One self-attention layer with residual connections and a
    /// feed-forward block, applied to the `K`-sequence.
    fn attention(&self, g: &mut Graph, h: NodeId, p: &impl Fn(&str) -> NodeId, positional: bool) -> Result<NodeId> {
        let x = if positional { g.add(h, p("agg.pos"))? } else { h };
        let inv_sqrt = 1.0 / ((self.cfg.hidden / HEADS) as f32).sqrt();
        let mut acc = x;
        for head in 0..HEADS {
            let q = g.matmul(x, p(&format!("agg.head{head}.q")))?;
            let k = g.matmul(x, p(&format!("agg.head{head}.k")))?;
            let v = g.matmul(x, p(&format!("agg.head{head}.v")))?;
            let kt = g.transpose(k)?;
            let logits = g.matmul(q, kt)?;
            let logits = g.scale(logits, inv_sqrt);
            let a = g.softmax_rows(logits)?;
            let o = g.matmul(a, v)?;
            let o = g.matmul(o, p(&format!("agg.head{head}.o")))?;
            acc = g.add(acc, o)?;
        }
        let f = g.linear(acc, p("agg.ffn1.w"), Some(p("agg.ffn1.b")))?;
        let f = g.relu(f);
        let f = g.linear(f, p("agg.ffn2.w"), Some(p("agg.ffn2.b")))?;
        g.add(acc, f)
    }

    /// Forward pass without gradient tracking.
    pub fn forward(&self, image: &Tensor, selection: &Selection) -> Result<Prediction> {
        let mut g = Graph::new();
        let f = self.build(&mut g, image, selection, false)?;
        Ok(Prediction {
            logits: g.value(f.logits).clone(),
            scores: g.value(f.scores).reshape(&[self.geom.grid_h, self.geom.grid_w])?,
            y: g.value(f.y).clone(),
        })
    }

    /// Inference with hard Top-K.
    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        self.forward(image, &Selection::Hard)
    }

    /// `grid_h×grid_w` score grid for an image.
    pub fn score_grid(&self, image: &Tensor) -> Result<Tensor> {
        let c = &self.cfg;
        image.expect_shape(&[c.image_h, c.image_w, c.channels])?;
        let mut g = Graph::new();
        let ids: Vec<NodeId> = self.params.iter().map(|(_, t)| g.constant(t.clone())).collect();
        let p = |name: &str| ids[self.params.position(name).unwrap()];
        let s = self.scorer(&mut g, image, &p)?;
        g.value(s).reshape(&[self.geom.grid_h, self.geom.grid_w])
    }

    /// `D_h` embedding of one `P×P×C_in` patch.
    pub fn embed(&self, patch: &Tensor) -> Result<Tensor> {
        let [ph, pw, c] = self.geom.patch_shape();
        patch.expect_shape(&[ph, pw, c])?;
        let mut g = Graph::new();
        let ids: Vec<NodeId> = self.params.iter().map(|(_, t)| g.constant(t.clone())).collect();
        let p = |name: &str| ids[self.params.position(name).unwrap()];
        let inp = g.constant(patch.reshape(&[1, ph, pw, c])?);
        let h = self.features(&mut g, inp, &p)?;
        g.value(h).reshape(&[self.cfg.hidden])
    }

    /// Logits from a `K×D_h` embedding matrix.
    pub fn aggregate_embeddings(&self, h: &Tensor, positional: bool) -> Result<Tensor> {
        h.expect_shape(&[self.cfg.k, self.cfg.hidden])?;
        let mut g = Graph::new();
        let ids: Vec<NodeId> = self.params.iter().map(|(_, t)| g.constant(t.clone())).collect();
        let p = |name: &str| ids[self.params.position(name).unwrap()];
        let hn = g.constant(h.clone());
        let out = self.aggregate(&mut g, hn, &p, positional)?;
        Ok(g.value(out).clone())
    }

    /// Attention block output (`K×D_h`) before pooling; attention models
    /// only.
    pub fn attention_outputs(&self, h: &Tensor, positional: bool) -> Result<Tensor> {
        if self.cfg.aggregation != Aggregation::Attention {
            return Err(Error::Config("model has no attention block".into()));
        }
        let mut g = Graph::new();
        let ids: Vec<NodeId> = self.params.iter().map(|(_, t)| g.constant(t.clone())).collect();
        let p = |name: &str| ids[self.params.position(name).unwrap()];
        let hn = g.constant(h.clone());
        let out = self.attention(&mut g, hn, &p, positional)?;
        Ok(g.value(out).clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::relative_error;

    fn tiny(k: usize, aggregation: Aggregation) -> ModelConfig {
        ModelConfig {
            image_h: 16,
            image_w: 16,
            channels: 1,
            patch: 8,
            stride: 8,
            coord_channels: false,
            k,
            aggregation,
            hidden: 8,
            classes: 3,
            scorer_downscale: 2,
        }
    }

    fn image(seed: u64) -> Tensor {
        gaussian_sample(&mut RngStream::new(seed), &[16, 16, 1]).map(|v| (0.5 + 0.3 * v).clamp(0.0, 1.0))
    }

    type Objective = dyn Fn(&Model, &mut Graph, &dyn Fn(&str) -> NodeId) -> NodeId;

    fn eval(model: &Model, objective: &Objective) -> f64 {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = model.params.iter().map(|(_, t)| g.constant(t.clone())).collect();
        let p = |n: &str| ids[model.params.position(n).unwrap()];
        let out = objective(model, &mut g, &p);
        g.value(out).item() as f64
    }

    /// Relative error between the backward sweep and central differences
    /// wrt parameter `name`, plus the fraction of coordinates compared.
    ///
    /// Along a single coordinate these networks are piecewise linear, so
    /// the two one-sided differences agree unless a ReLU or max-pool kink
    /// lies within the step; such coordinates are left out.
    fn check_param(model: &Model, name: &str, objective: &Objective) -> (f64, f64) {
        let h = 3e-3f32;
        let pos = model.params.position(name).unwrap();
        let x0 = model.params.get(name).unwrap().clone();
        let mut g = Graph::new();
        let ids: Vec<NodeId> = model
            .params
            .iter()
            .map(|(n, t)| if n == name { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect();
        let p = |n: &str| ids[model.params.position(n).unwrap()];
        let out = objective(model, &mut g, &p);
        let analytic = g.backward(out).unwrap().get_or_zeros(ids[pos], &x0);

        let f0 = eval(model, objective);
        let mut m = model.clone();
        let (mut a, mut n) = (Vec::new(), Vec::new());
        for i in 0..x0.numel() {
            let at = |m: &mut Model, v: f32| {
                let mut t = x0.clone();
                t.data_mut()[i] = v;
                m.params.insert(name, t);
                eval(m, objective)
            };
            let orig = x0.data()[i];
            let (up, down) = (orig + h, orig - h);
            let plus = (at(&mut m, up) - f0) / (up as f64 - orig as f64);
            let minus = (f0 - at(&mut m, down)) / (orig as f64 - down as f64);
            if (plus - minus).abs() <= 3e-3 * plus.abs().max(minus.abs()).max(1.0) {
                a.push(analytic.data()[i]);
                n.push((0.5 * (plus + minus)) as f32);
            }
        }
        let kept = a.len() as f64 / x0.numel() as f64;
        (relative_error(&Tensor::vector(a), &Tensor::vector(n)), kept)
    }

    fn weighted_sum(g: &mut Graph, x: NodeId, seed: u64) -> NodeId {
        let w = gaussian_sample(&mut RngStream::new(seed), g.value(x).shape());
        let w = g.constant(w);
        let p = g.mul(x, w).unwrap();
        g.sum(p)
    }

    #[test]
    fn scorer_gradients_match_finite_differences() {
        let model = Model::init(&tiny(2, Aggregation::Mean), 1).unwrap();
        let x = image(2);
        let objective = move |m: &Model, g: &mut Graph, p: &dyn Fn(&str) -> NodeId| {
            let s = m.scorer(g, &x, &p).unwrap();
            weighted_sum(g, s, 3)
        };
        for name in ["scorer.conv1.w", "scorer.conv1.b", "scorer.conv2.w", "scorer.conv2.b"] {
            let (err, kept) = check_param(&model, name, &objective);
            assert!(err <= 1e-3 && kept >= 0.5, "{name}: error {err}, {kept} of coordinates compared");
        }
    }

    #[test]
    fn feature_gradients_match_finite_differences() {
        let model = Model::init(&tiny(2, Aggregation::Mean), 4).unwrap();
        let patches = Tensor::stack(&[image(5), image(6)])
            .unwrap()
            .reshape(&[2, 16, 16, 1])
            .unwrap();
        let patches = Tensor::new(
            vec![2, 8, 8, 1],
            patches.data().iter().step_by(4).copied().take(128).collect(),
        )
        .unwrap();
        let objective = move |m: &Model, g: &mut Graph, p: &dyn Fn(&str) -> NodeId| {
            let inp = g.constant(patches.clone());
            let h = m.features(g, inp, &p).unwrap();
            weighted_sum(g, h, 7)
        };
        for name in ["feature.conv1.w", "feature.conv2.b", "feature.dense.w", "feature.dense.b"] {
            let (err, kept) = check_param(&model, name, &objective);
            assert!(err <= 1e-3 && kept >= 0.5, "{name}: error {err}, {kept} of coordinates compared");
        }
    }

    #[test]
    fn shared_feature_net_maps_identical_patches_identically() {
        let model = Model::init(&tiny(2, Aggregation::Mean), 8).unwrap();
        let patch = Tensor::new(vec![8, 8, 1], image(9).data()[..64].to_vec()).unwrap();
        let a = model.embed(&patch).unwrap();
        assert_eq!(a.shape(), &[8]);
        assert_eq!(a, model.embed(&patch).unwrap());
    }

    #[test]
    fn zero_final_scorer_layer_gives_constant_grid() {
        let mut model = Model::init(&tiny(2, Aggregation::Mean), 10).unwrap();
        model.params.insert("scorer.conv2.w", Tensor::zeros(&[3, 3, SCORER_WIDTH, 1]));
        let grid = model.score_grid(&Tensor::zeros(&[16, 16, 1])).unwrap();
        assert_eq!(grid.shape(), &[2, 2]);
        assert!(grid.data().iter().all(|&v| v == grid.data()[0]));
    }

    #[test]
    fn aggregation_symmetries() {
        let h = gaussian_sample(&mut RngStream::new(11), &[3, 8]).map(f32::abs);
        let swapped = Tensor::stack(&[h.index_axis0(2), h.index_axis0(0), h.index_axis0(1)]).unwrap();
        for agg in [Aggregation::Mean, Aggregation::Max] {
            let m = Model::init(&tiny(3, agg), 12).unwrap();
            let a = m.aggregate_embeddings(&h, true).unwrap();
            assert!(a.max_abs_diff(&m.aggregate_embeddings(&swapped, true).unwrap()) < 1e-6);
        }

        // Without positional encoding attention is permutation equivariant.
        let m = Model::init(&tiny(3, Aggregation::Attention), 13).unwrap();
        let out = m.attention_outputs(&h, false).unwrap();
        let out_swapped = m.attention_outputs(&swapped, false).unwrap();
        for (dst, src) in [(0, 2), (1, 0), (2, 1)] {
            assert!(out_swapped.index_axis0(dst).max_abs_diff(&out.index_axis0(src)) < 1e-5);
        }

        // Identical rows: mean and max pooling coincide.
        let row = h.index_axis0(0);
        let same = Tensor::stack(&[row.clone(), row.clone(), row]).unwrap();
        let mean = Model::init(&tiny(3, Aggregation::Mean), 14).unwrap();
        let max = Model::from_params(&tiny(3, Aggregation::Max), mean.params.clone()).unwrap();
        assert_eq!(
            mean.aggregate_embeddings(&same, true).unwrap(),
            max.aggregate_embeddings(&same, true).unwrap()
        );
    }

    #[test]
    fn hard_and_zero_sigma_selection_give_identical_logits() {
        for agg in [Aggregation::Mean, Aggregation::Max, Aggregation::Attention] {
            let model = Model::init(&tiny(2, agg), 15).unwrap();
            let x = image(16);
            let hard = model.forward(&x, &Selection::Hard).unwrap();
            let zero = model
                .forward(&x, &Selection::Perturbed(PerturbedConfig { n: 100, sigma: 0.0, seed: 1 }))
                .unwrap();
            assert_eq!(hard.logits, zero.logits);
            assert_eq!(hard.y, zero.y);
        }
    }

    #[test]
    fn selecting_every_patch_ignores_the_scorer_under_mean_pooling() {
        let a = Model::init(&tiny(4, Aggregation::Mean), 17).unwrap();
        let mut b = a.clone();
        for name in ["scorer.conv1.w", "scorer.conv2.w"] {
            let t = b.params.get(name).unwrap().map(|v| -3.0 * v);
            b.params.insert(name, t);
        }
        let x = image(18);
        assert_ne!(a.score_grid(&x).unwrap(), b.score_grid(&x).unwrap());
        assert!(a.predict(&x).unwrap().logits.max_abs_diff(&b.predict(&x).unwrap().logits) < 1e-6);
    }

    #[test]
    fn perturbed_selection_reaches_every_parameter_group() {
        let model = Model::init(&tiny(2, Aggregation::Attention), 19).unwrap();
        let mut g = Graph::new();
        let sel = Selection::Perturbed(PerturbedConfig { n: 200, sigma: 0.5, seed: 2 });
        let f = model.build(&mut g, &image(20), &sel, true).unwrap();
        let loss = g.cross_entropy(f.logits, 1).unwrap();
        let grads = g.backward(loss).unwrap();
        let mut norms = [0.0f64; 3];
        for ((name, t), &id) in model.params.iter().zip(&f.params) {
            let slot = match group_of(name) {
                Group::Scorer => 0,
                Group::Feature => 1,
                Group::Aggregation => 2,
            };
            norms[slot] += grads.get_or_zeros(id, t).norm().powi(2);
        }
        assert!(norms.iter().all(|&n| n > 0.0), "{norms:?}");
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let cfg = tiny(2, Aggregation::Attention);
        assert_eq!(Model::init(&cfg, 3).unwrap(), Model::init(&cfg, 3).unwrap());
        assert_ne!(Model::init(&cfg, 3).unwrap(), Model::init(&cfg, 4).unwrap());
    }

    #[test]
    fn coordinate_planes_reach_only_the_feature_net() {
        let cfg = ModelConfig {
            coord_channels: true,
            ..tiny(2, Aggregation::Mean)
        };
        let model = Model::init(&cfg, 1).unwrap();
        assert_eq!(model.params().get("scorer.conv1.w").unwrap().shape()[2], 1);
        assert_eq!(model.params().get("feature.conv1.w").unwrap().shape()[2], 3);
        let img = Tensor::new(vec![16, 16, 1], (0..256).map(|i| (i % 7) as f32).collect()).unwrap();
        let plain = Model::from_params(&tiny(2, Aggregation::Mean), {
            let mut p = Model::init(&tiny(2, Aggregation::Mean), 1).unwrap().params().clone();
            for name in ["scorer.conv1.w", "scorer.conv1.b", "scorer.conv2.w", "scorer.conv2.b"] {
                p.insert(name, model.params().get(name).unwrap().clone());
            }
            p
        })
        .unwrap();
        assert_eq!(model.score_grid(&img).unwrap(), plain.score_grid(&img).unwrap());
        assert_eq!(model.predict(&img).unwrap().scores, plain.score_grid(&img).unwrap());
    }
}
