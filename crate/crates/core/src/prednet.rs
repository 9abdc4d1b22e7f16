//! Scoring network over propagated embeddings.
//!
//! A linear projection head maps each combined node embedding from the
//! input width down to the output width. A projected user `u` and item `v`
//! are then scored by one of three heads:
//!
//! * `inner`: `u · v`
//! * `mlp`: `w_out · M(u ‖ v) + b_out`
//! * `combined`: `w_out · (T_u(u) ⊙ T_v(v) ‖ M(u ‖ v)) + b_out`
//!
//! where `T_u`, `T_v` are the representation towers and `M` the matching
//! layers. All layers are affine unless the leaky-relu ablation is on, in
//! which case it follows every layer except the one producing the score.
//! Forward and backward passes work on row batches.

use std::io::Write;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{Activation, Matching, RunConfig};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"LTHP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `out × in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn zeros(input: usize, output: usize) -> Self {
        Linear { weight: Array2::zeros((output, input)), bias: Array1::zeros(output) }
    }

    fn init<R: Rng>(input: usize, output: usize, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f64).sqrt();
        let weight = Array2::from_shape_simple_fn((output, input), || rng.gen_range(-bound..=bound));
        Linear { weight, bias: Array1::zeros(output) }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }

    /// Rows of `x` mapped through `W x + b`.
    pub fn forward(&self, x: &Array2<f64>) -> Array2<f64> {
        x.dot(&self.weight.t()) + &self.bias
    }
}

/// Network shape and head; fixed for the life of a parameter set.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden: usize,
    pub output_dim: usize,
    pub rl_depth: usize,
    pub ml_depth: usize,
    pub matching: Matching,
    pub activation: Activation,
    pub shared_towers: bool,
}

impl From<&RunConfig> for Architecture {
    fn from(c: &RunConfig) -> Self {
        Architecture {
            input_dim: c.input_dim,
            hidden: c.hidden,
            output_dim: c.output_dim,
            rl_depth: c.rl_depth,
            ml_depth: c.ml_depth,
            matching: c.matching,
            activation: c.activation,
            shared_towers: c.shared_towers,
        }
    }
}

impl Architecture {
    fn uses_towers(&self) -> bool {
        self.matching == Matching::Combined
    }

    fn uses_matching(&self) -> bool {
        self.matching != Matching::Inner
    }

    fn tower_width(&self) -> usize {
        if self.rl_depth > 0 {
            self.hidden
        } else {
            self.output_dim
        }
    }

    fn matching_width(&self) -> usize {
        if self.ml_depth > 0 {
            self.hidden
        } else {
            2 * self.output_dim
        }
    }

    fn fusion_width(&self) -> usize {
        match self.matching {
            Matching::Inner => 0,
            Matching::Mlp => self.matching_width(),
            Matching::Combined => self.tower_width() + self.matching_width(),
        }
    }

    /// `(input, output)` of every layer per block, in parameter order.
    fn layer_dims(&self) -> Blocks<Vec<(usize, usize)>> {
        let chain = |first: usize, depth: usize| -> Vec<(usize, usize)> {
            (0..depth).map(|k| (if k == 0 { first } else { self.hidden }, self.hidden)).collect()
        };
        let tower = if self.uses_towers() { chain(self.output_dim, self.rl_depth) } else { Vec::new() };
        Blocks {
            projection: vec![(self.input_dim, self.hidden), (self.hidden, self.output_dim)],
            item_tower: if self.shared_towers { Vec::new() } else { tower.clone() },
            user_tower: tower,
            matching: if self.uses_matching() { chain(2 * self.output_dim, self.ml_depth) } else { Vec::new() },
            fusion: if self.uses_matching() { vec![(self.fusion_width(), 1)] } else { Vec::new() },
        }
    }
}

struct Blocks<T> {
    projection: T,
    user_tower: T,
    item_tower: T,
    matching: T,
    fusion: T,
}

/// All trainable tensors. Also used to hold gradients and optimizer moments.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictiveParams {
    pub arch: Architecture,
    pub projection: Vec<Linear>,
    pub user_tower: Vec<Linear>,
    /// Empty when the towers share weights.
    pub item_tower: Vec<Linear>,
    pub matching: Vec<Linear>,
    /// Absent for the inner-product head.
    pub fusion: Option<Linear>,
}

pub type Gradients = PredictiveParams;

impl PredictiveParams {
    fn build(arch: Architecture, mut make: impl FnMut(usize, usize) -> Linear) -> Result<Self> {
        if arch.input_dim == 0 || arch.hidden == 0 || arch.output_dim == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        let dims = arch.layer_dims();
        let mut block = |d: &[(usize, usize)]| d.iter().map(|&(i, o)| make(i, o)).collect::<Vec<_>>();
        let projection = block(&dims.projection);
        let user_tower = block(&dims.user_tower);
        let item_tower = block(&dims.item_tower);
        let matching = block(&dims.matching);
        let fusion = block(&dims.fusion).pop();
        Ok(PredictiveParams { arch, projection, user_tower, item_tower, matching, fusion })
    }

    /// Weights uniform on `±1/sqrt(fan_in)`, biases zero.
    pub fn init(arch: Architecture, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(arch, |i, o| Linear::init(i, o, &mut rng))
    }

    pub fn zeros(arch: Architecture) -> Result<Self> {
        Self::build(arch, Linear::zeros)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.arch).expect("architecture already validated")
    }

    fn item_tower(&self) -> &[Linear] {
        if self.arch.shared_towers {
            &self.user_tower
        } else {
            &self.item_tower
        }
    }

    pub fn named_linears(&self) -> Vec<(String, &Linear)> {
        let mut out = Vec::new();
        for (prefix, block) in [
            ("projection", &self.projection),
            ("user_tower", &self.user_tower),
            ("item_tower", &self.item_tower),
            ("matching", &self.matching),
        ] {
            out.extend(block.iter().enumerate().map(|(k, l)| (format!("{prefix}.{k}"), l)));
        }
        if let Some(f) = &self.fusion {
            out.push(("fusion".to_string(), f));
        }
        out
    }

    fn linears_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        self.projection
            .iter_mut()
            .chain(self.user_tower.iter_mut())
            .chain(self.item_tower.iter_mut())
            .chain(self.matching.iter_mut())
            .chain(self.fusion.iter_mut())
    }

    /// Every tensor as a flat slice, weights before biases, in a fixed order.
    pub fn slices(&self) -> Vec<&[f64]> {
        self.named_linears()
            .into_iter()
            .flat_map(|(_, l)| [l.weight.as_slice().unwrap(), l.bias.as_slice().unwrap()])
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.linears_mut()
            .flat_map(|l| [l.weight.as_slice_mut().unwrap(), l.bias.as_slice_mut().unwrap()])
            .collect()
    }

    pub fn num_scalars(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    /// `‖Θ‖²` over every tensor, biases included.
    pub fn squared_norm(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|x| x.is_finite()))
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, scale: f64, other: &Self) {
        for (a, b) in self.slices_mut().into_iter().zip(other.slices()) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += scale * y);
        }
    }

    /// Projects a batch of combined embeddings.
    pub fn project(&self, x: &Array2<f64>, dropout: &mut Dropout) -> Result<(Array2<f64>, ProjectionCache)> {
        if x.ncols() != self.arch.input_dim {
            return Err(Error::Dimension { expected: self.arch.input_dim, actual: x.ncols() });
        }
        let act_last = self.arch.matching != Matching::Inner;
        let (p, cache) = stack_forward(&self.projection, x.clone(), act_last, self.arch.activation, dropout);
        Ok((p, ProjectionCache(cache)))
    }

    /// Gradient of the projection head given the gradient at its output.
    /// The propagated embeddings are constants, so nothing flows further.
    pub fn project_backward(&self, cache: &ProjectionCache, d_out: Array2<f64>, grads: &mut Gradients) {
        stack_backward(&self.projection, &cache.0, d_out, &mut grads.projection, self.arch.activation, false);
    }

    /// Scores rows of projected users against rows of projected items.
    pub fn score(&self, u: &Array2<f64>, v: &Array2<f64>, dropout: &mut Dropout) -> Result<(Array1<f64>, ScoreCache)> {
        let out = self.arch.output_dim;
        if u.ncols() != out || v.ncols() != out {
            return Err(Error::Dimension { expected: out, actual: if u.ncols() != out { u.ncols() } else { v.ncols() } });
        }
        if u.nrows() != v.nrows() {
            return Err(Error::Shape(format!("{} user rows vs {} item rows", u.nrows(), v.nrows())));
        }
        let act = self.arch.activation;
        let mut cache = ScoreCache { u: u.clone(), v: v.clone(), ..Default::default() };
        let scores = match self.arch.matching {
            Matching::Inner => (u * v).sum_axis(Axis(1)),
            variant => {
                let mut parts = Vec::new();
                if variant == Matching::Combined {
                    let (hu, cu) = stack_forward(&self.user_tower, u.clone(), true, act, dropout);
                    let (hv, cv) = stack_forward(self.item_tower(), v.clone(), true, act, dropout);
                    parts.push(&hu * &hv);
                    cache.towers = Some(TowerCache { user: cu, item: cv, hu, hv });
                }
                let joined = concatenate(Axis(1), &[u.view(), v.view()]).expect("same row count");
                let (hml, cm) = stack_forward(&self.matching, joined, true, act, dropout);
                cache.matching = Some(cm);
                parts.push(hml);
                let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
                let z = concatenate(Axis(1), &views).expect("same row count");
                let fusion = self.fusion.as_ref().expect("fusion layer present for learned heads");
                let y = fusion.forward(&z).column(0).to_owned();
                cache.fused = Some(z);
                y
            }
        };
        if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
            return Err(Error::NonFinite(format!("score of batch row {i}")));
        }
        Ok((scores, cache))
    }

    /// Backpropagates `d_scores` through the head; returns gradients at the
    /// projected user and item rows.
    pub fn score_backward(&self, cache: &ScoreCache, d_scores: &Array1<f64>, grads: &mut Gradients) -> Result<(Array2<f64>, Array2<f64>)> {
        let b = cache.u.nrows();
        if d_scores.len() != b {
            return Err(Error::Shape(format!("{} upstream gradients for {b} rows", d_scores.len())));
        }
        let d_col = d_scores.view().insert_axis(Axis(1));
        if self.arch.matching == Matching::Inner {
            return Ok((&cache.v * &d_col, &cache.u * &d_col));
        }
        let act = self.arch.activation;
        let out = self.arch.output_dim;
        let z = cache.fused.as_ref().expect("fused cache for learned heads");
        let fusion = self.fusion.as_ref().unwrap();
        let gf = grads.fusion.as_mut().unwrap();
        gf.weight.row_mut(0).scaled_add(1.0, &d_scores.dot(z));
        gf.bias[0] += d_scores.sum();
        let dz = d_col.dot(&fusion.weight);

        let rl_width = if self.arch.matching == Matching::Combined { self.arch.tower_width() } else { 0 };
        let mut du = Array2::zeros((b, out));
        let mut dv = Array2::zeros((b, out));

        let d_ml = dz.slice(s![.., rl_width..]).to_owned();
        let d_joined = stack_backward(&self.matching, cache.matching.as_ref().unwrap(), d_ml, &mut grads.matching, act, true)
            .expect("input gradient requested");
        du += &d_joined.slice(s![.., ..out]);
        dv += &d_joined.slice(s![.., out..]);

        if let Some(t) = &cache.towers {
            let d_rl = dz.slice(s![.., ..rl_width]);
            let dhu = &d_rl * &t.hv;
            let dhv = &d_rl * &t.hu;
            du += &stack_backward(&self.user_tower, &t.user, dhu, &mut grads.user_tower, act, true).unwrap();
            let item_grads = if self.arch.shared_towers { &mut grads.user_tower } else { &mut grads.item_tower };
            dv += &stack_backward(self.item_tower(), &t.item, dhv, item_grads, act, true).unwrap();
        }
        Ok((du, dv))
    }

    /// Score of one combined-embedding pair, without dropout.
    pub fn score_pair(&self, user: ArrayView1<f64>, item: ArrayView1<f64>) -> Result<f64> {
        let x = ndarray::stack(Axis(0), &[user, item]).map_err(|e| Error::Shape(e.to_string()))?;
        let (p, _) = self.project(&x, &mut Dropout::off())?;
        let (s, _) = self.score(&p.slice(s![0..1, ..]).to_owned(), &p.slice(s![1..2, ..]).to_owned(), &mut Dropout::off())?;
        Ok(s[0])
    }

    /// Writes a checkpoint: magic, version, then per tensor its name,
    /// rank, dims and row-major values.
    pub fn save<W: Write>(&self, mut out: W) -> Result<()> {
        let mut buf = Vec::new();
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for (name, l) in self.named_linears() {
            write_tensor(&mut buf, &format!("{name}.weight"), l.weight.shape(), l.weight.as_slice().unwrap());
            write_tensor(&mut buf, &format!("{name}.bias"), l.bias.shape(), l.bias.as_slice().unwrap());
        }
        out.write_all(&buf)?;
        Ok(())
    }

    /// Reads a checkpoint written for the same architecture.
    pub fn load(bytes: &[u8], arch: Architecture) -> Result<Self> {
        let tensors = read_checkpoint(bytes)?;
        let mut params = Self::zeros(arch)?;
        let expected: Vec<(String, Vec<usize>)> = params
            .named_linears()
            .into_iter()
            .flat_map(|(n, l)| [(format!("{n}.weight"), l.weight.shape().to_vec()), (format!("{n}.bias"), l.bias.shape().to_vec())])
            .collect();
        if tensors.len() != expected.len() {
            return Err(Error::Shape(format!("checkpoint has {} tensors, architecture needs {}", tensors.len(), expected.len())));
        }
        for ((t, (name, dims)), slot) in tensors.iter().zip(&expected).zip(params.slices_mut()) {
            if &t.name != name || &t.dims != dims {
                return Err(Error::Shape(format!("checkpoint tensor {} {:?}, expected {name} {dims:?}", t.name, t.dims)));
            }
            slot.copy_from_slice(&t.values);
        }
        Ok(params)
    }
}

/// A tensor as stored in a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

fn write_tensor(buf: &mut Vec<u8>, name: &str, dims: &[usize], values: &[f64]) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

/// Parses every tensor of a checkpoint file.
pub fn read_checkpoint(bytes: &[u8]) -> Result<Vec<NamedTensor>> {
    struct Reader<'a> {
        bytes: &'a [u8],
        pos: usize,
    }
    impl<'a> Reader<'a> {
        fn fail(&self, at: usize, message: String) -> Error {
            Error::Format { what: "checkpoint", offset: at as u64, message }
        }
        fn take(&mut self, n: usize) -> Result<&'a [u8]> {
            if self.bytes.len() - self.pos < n {
                return Err(self.fail(self.pos, format!("truncated: needed {n} bytes")));
            }
            self.pos += n;
            Ok(&self.bytes[self.pos - n..self.pos])
        }
        fn u32(&mut self) -> Result<u32> {
            Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
        }
        fn u64(&mut self) -> Result<u64> {
            Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
        }
    }

    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(r.fail(0, "bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(r.fail(4, format!("unsupported version {version}")));
    }
    let mut tensors = Vec::new();
    while r.pos < bytes.len() {
        let start = r.pos;
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| r.fail(start + 4, "name is not UTF-8".into()))?;
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.u64()? as usize);
        }
        let len = dims
            .iter()
            .try_fold(8usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| r.fail(start, "tensor too large".into()))?;
        let values = r.take(len)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.push(NamedTensor { name, dims, values });
    }
    Ok(tensors)
}

/// Inverted dropout on hidden activations; `rate == 0` disables it.
pub struct Dropout<'a> {
    rate: f64,
    rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Dropout<'a> {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn new(rate: f64, rng: &'a mut ChaCha8Rng) -> Self {
        Dropout { rate, rng: Some(rng) }
    }

    fn mask(&mut self, rows: usize, cols: usize) -> Option<Array2<f64>> {
        let rng = self.rng.as_mut()?;
        if self.rate == 0.0 {
            return None;
        }
        let keep = 1.0 / (1.0 - self.rate);
        let rate = self.rate;
        Some(Array2::from_shape_simple_fn((rows, cols), || if rng.gen::<f64>() < rate { 0.0 } else { keep }))
    }
}

#[derive(Debug, Clone, Default)]
struct StackCache {
    inputs: Vec<Array2<f64>>,
    /// Pre-activation values where a non-identity activation was applied.
    pre: Vec<Option<Array2<f64>>>,
    masks: Vec<Option<Array2<f64>>>,
}

#[derive(Debug, Clone)]
pub struct ProjectionCache(StackCache);

#[derive(Debug, Clone, Default)]
struct TowerCache {
    user: StackCache,
    item: StackCache,
    hu: Array2<f64>,
    hv: Array2<f64>,
}

/// Intermediate values of a scoring pass, needed for the backward pass.
#[derive(Debug, Clone, Default)]
pub struct ScoreCache {
    u: Array2<f64>,
    v: Array2<f64>,
    towers: Option<TowerCache>,
    matching: Option<StackCache>,
    fused: Option<Array2<f64>>,
}

fn stack_forward(layers: &[Linear], mut h: Array2<f64>, act_last: bool, act: Activation, dropout: &mut Dropout) -> (Array2<f64>, StackCache) {
    let mut cache = StackCache::default();
    for (k, layer) in layers.iter().enumerate() {
        let z = layer.forward(&h);
        cache.inputs.push(h);
        let activated = k + 1 < layers.len() || act_last;
        if !activated {
            cache.pre.push(None);
            cache.masks.push(None);
            h = z;
            continue;
        }
        h = match act {
            Activation::None => {
                cache.pre.push(None);
                z
            }
            _ => {
                let a = z.mapv(|x| act.apply(x));
                cache.pre.push(Some(z));
                a
            }
        };
        let mask = dropout.mask(h.nrows(), h.ncols());
        if let Some(m) = &mask {
            h *= m;
        }
        cache.masks.push(mask);
    }
    (h, cache)
}

fn stack_backward(
    layers: &[Linear],
    cache: &StackCache,
    mut d: Array2<f64>,
    grads: &mut [Linear],
    act: Activation,
    need_input: bool,
) -> Option<Array2<f64>> {
    for k in (0..layers.len()).rev() {
        if let Some(m) = &cache.masks[k] {
            d *= m;
        }
        if let Some(z) = &cache.pre[k] {
            d.zip_mut_with(z, |g, &x| *g *= act.derivative(x));
        }
        grads[k].weight += &d.t().dot(&cache.inputs[k]);
        grads[k].bias += &d.sum_axis(Axis(0));
        if k > 0 || need_input {
            d = d.dot(&layers[k].weight);
        }
    }
    need_input.then_some(d)
}
