//! Miniature vision transformer.
//!
//! Parameters live in a [`ParamStore`] owned outside any tape. Each step
//! binds them onto a fresh tape once and every forward pass of that step
//! reads the same bound leaves.

use indexmap::IndexMap;
use rand::RngCore;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{uniform01, Purpose, StreamKey};
use crate::tensor::{Real, Tape, Tensor, Var};

const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", default, deny_unknown_fields)]
pub struct VitConfig {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub classes: usize,
    pub class_token: bool,
}

impl Default for VitConfig {
    fn default() -> Self {
        VitConfig {
            image_size: 32,
            patch_size: 4,
            channels: 3,
            dim: 96,
            depth: 4,
            heads: 4,
            mlp_ratio: 4.0,
            classes: 10,
            class_token: true,
        }
    }
}

impl VitConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image-size", self.image_size),
            ("patch-size", self.patch_size),
            ("channels", self.channels),
            ("dim", self.dim),
            ("heads", self.heads),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.image_size % self.patch_size != 0 {
            return Err(Error::Config(format!(
                "image-size {} is not divisible by patch-size {}",
                self.image_size, self.patch_size
            )));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dim {} is not divisible by heads {}",
                self.dim, self.heads
            )));
        }
        if !(self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return Err(Error::Config("mlp-ratio must give a positive hidden width".into()));
        }
        Ok(())
    }

    pub fn num_patches(&self) -> usize {
        let side = self.image_size / self.patch_size;
        side * side
    }

    /// Sequence length of the unmasked input, class token included.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + usize::from(self.class_token)
    }

    pub fn hidden_dim(&self) -> usize {
        (self.dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn patch_features(&self) -> usize {
        self.channels * self.patch_size * self.patch_size
    }
}

/// Dropout and drop-path settings for one forward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DropSpec {
    pub dropout: f64,
    pub drop_path: f64,
    pub stream: StreamKey,
    /// `false` is evaluation mode: both drops become identity maps.
    pub enabled: bool,
}

impl DropSpec {
    pub fn eval() -> Self {
        DropSpec {
            dropout: 0.0,
            drop_path: 0.0,
            stream: StreamKey::new(0, Purpose::Probe, 0),
            enabled: false,
        }
    }

    pub fn train(dropout: f64, drop_path: f64, stream: StreamKey) -> Result<Self> {
        check_probability("dropout", dropout)?;
        check_probability("drop-path", drop_path)?;
        Ok(DropSpec {
            dropout,
            drop_path,
            stream,
            enabled: true,
        })
    }
}

pub(crate) fn check_probability(what: &'static str, p: f64) -> Result<()> {
    if (0.0..1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::Range {
            what,
            value: p,
            range: "[0, 1)",
        })
    }
}

/// Inverted dropout: each element survives with probability `1 - p` and is
/// rescaled by `1 / (1 - p)`.
pub fn apply_dropout<T: Real, R: RngCore + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    p: f64,
    rng: &mut R,
    enabled: bool,
) -> Result<Var> {
    check_probability("dropout", p)?;
    if !enabled || p == 0.0 {
        return Ok(x);
    }
    let keep = T::lit(1.0 / (1.0 - p));
    let n = tape.value(x).len();
    let mask = (0..n)
        .map(|_| if uniform01(rng) >= p { keep } else { T::zero() })
        .collect();
    tape.mul_const(x, mask, 1)
}

/// Stochastic depth on a residual branch output `[n, ...]`: each sample's
/// whole branch is zeroed with probability `p`, survivors are rescaled by
/// `1 / (1 - p)`.
pub fn apply_drop_path<T: Real, R: RngCore + ?Sized>(
    tape: &mut Tape<T>,
    x: Var,
    p: f64,
    rng: &mut R,
    enabled: bool,
) -> Result<Var> {
    check_probability("drop-path", p)?;
    if !enabled || p == 0.0 {
        return Ok(x);
    }
    let n = tape.shape(x)[0];
    let keep = T::lit(1.0 / (1.0 - p));
    let mask = (0..n)
        .map(|_| if uniform01(rng) >= p { keep } else { T::zero() })
        .collect();
    let block = tape.value(x).len() / n;
    tape.mul_const(x, mask, block)
}

/// Parameter tensors keyed by stable names, in a fixed iteration order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    params: IndexMap<String, Tensor<T>>,
}

/// Tape handles of a bound [`ParamStore`], in store order.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Handles recorded elsewhere, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}

impl<T: Real> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Contract(format!("duplicate parameter {name}")));
        }
        self.params.insert(name, tensor);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor<T>> {
        self.params.values()
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.values_mut()
    }

    pub fn num_scalars(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&mut self) {
        for t in self.params.values_mut() {
            t.zero_grad();
        }
    }

    /// Records every parameter as a gradient-tracking leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound {
            vars: self.params.values().map(|t| tape.leaf(t, true)).collect(),
        }
    }

    /// Adds the tape gradients of the bound leaves into the stored tensors.
    pub fn pull_grads(&mut self, tape: &Tape<T>, bound: &Bound) {
        for (t, &v) in self.params.values_mut().zip(&bound.vars) {
            if let Some(g) = tape.grad(v) {
                t.accumulate_grad(g);
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }
}

/// Which positional slots survive in a token sequence.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TokenPositions {
    /// Every patch, in order.
    All,
    /// Per-sample original patch indices of the kept tokens.
    Kept(Vec<Vec<usize>>),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Init {
    Normal,
    Zeros,
    Ones,
}

struct BlockIds {
    norm1_w: usize,
    norm1_b: usize,
    qkv_w: usize,
    proj_w: usize,
    proj_b: usize,
    norm2_w: usize,
    norm2_b: usize,
    fc1_w: usize,
    fc1_b: usize,
    fc2_w: usize,
    fc2_b: usize,
}

struct ParamIds {
    patch_w: usize,
    patch_b: usize,
    pos: usize,
    cls: Option<usize>,
    mask_token: usize,
    blocks: Vec<BlockIds>,
    norm_w: usize,
    norm_b: usize,
    head_w: usize,
    head_b: usize,
}

struct ParamDef {
    name: String,
    shape: Vec<usize>,
    init: Init,
    decay: bool,
}

/// The transformer: configuration plus the parameter layout derived from it.
pub struct Vit {
    config: VitConfig,
    defs: Vec<ParamDef>,
    ids: ParamIds,
}

impl Vit {
    pub fn new(config: VitConfig) -> Result<Self> {
        config.validate()?;
        let mut defs = Vec::new();
        let mut add = |name: String, shape: Vec<usize>, init: Init, decay: bool| {
            defs.push(ParamDef {
                name,
                shape,
                init,
                decay,
            });
            defs.len() - 1
        };
        let (d, h, c) = (config.dim, config.hidden_dim(), config.classes);
        let patch_w = add(
            "patch_embed.weight".into(),
            vec![config.patch_features(), d],
            Init::Normal,
            true,
        );
        let patch_b = add("patch_embed.bias".into(), vec![d], Init::Zeros, false);
        let pos = add(
            "pos_embed".into(),
            vec![config.num_patches(), d],
            Init::Normal,
            false,
        );
        let cls = config
            .class_token
            .then(|| add("cls_token".into(), vec![d], Init::Normal, false));
        let mask_token = add("mask_token".into(), vec![d], Init::Normal, false);
        let mut blocks = Vec::with_capacity(config.depth);
        for i in 0..config.depth {
            let p = |s: &str| format!("blocks.{i}.{s}");
            blocks.push(BlockIds {
                norm1_w: add(p("norm1.weight"), vec![d], Init::Ones, false),
                norm1_b: add(p("norm1.bias"), vec![d], Init::Zeros, false),
                qkv_w: add(p("attn.qkv.weight"), vec![d, 3 * d], Init::Normal, true),
                proj_w: add(p("attn.proj.weight"), vec![d, d], Init::Normal, true),
                proj_b: add(p("attn.proj.bias"), vec![d], Init::Zeros, false),
                norm2_w: add(p("norm2.weight"), vec![d], Init::Ones, false),
                norm2_b: add(p("norm2.bias"), vec![d], Init::Zeros, false),
                fc1_w: add(p("mlp.fc1.weight"), vec![d, h], Init::Normal, true),
                fc1_b: add(p("mlp.fc1.bias"), vec![h], Init::Zeros, false),
                fc2_w: add(p("mlp.fc2.weight"), vec![h, d], Init::Normal, true),
                fc2_b: add(p("mlp.fc2.bias"), vec![d], Init::Zeros, false),
            });
        }
        let norm_w = add("norm.weight".into(), vec![d], Init::Ones, false);
        let norm_b = add("norm.bias".into(), vec![d], Init::Zeros, false);
        let head_w = add("head.weight".into(), vec![d, c], Init::Normal, true);
        let head_b = add("head.bias".into(), vec![c], Init::Zeros, false);
        Ok(Vit {
            config,
            defs,
            ids: ParamIds {
                patch_w,
                patch_b,
                pos,
                cls,
                mask_token,
                blocks,
                norm_w,
                norm_b,
                head_w,
                head_b,
            },
        })
    }

    pub fn config(&self) -> &VitConfig {
        &self.config
    }

    /// Fresh parameters: weights and embeddings from `N(0, 0.02²)`, norm
    /// scales one, biases zero.
    pub fn init_params<T: Real>(&self, seed: u64) -> ParamStore<T> {
        self.init_params_with_std(seed, 0.02)
    }

    pub fn init_params_with_std<T: Real>(&self, seed: u64, std: f64) -> ParamStore<T> {
        let mut store = ParamStore::new();
        let normal = Normal::new(0.0, std).expect("std is finite");
        for (i, def) in self.defs.iter().enumerate() {
            let mut rng = StreamKey::new(seed, Purpose::Init, i as u64).rng();
            let t = match def.init {
                Init::Normal => {
                    Tensor::from_fn(&def.shape, |_| T::lit(normal.sample(&mut rng)))
                }
                Init::Zeros => Tensor::zeros(&def.shape),
                Init::Ones => Tensor::full(&def.shape, T::one()),
            };
            store
                .insert(def.name.clone(), t)
                .expect("layout names are unique");
        }
        store
    }

    /// Per-parameter weight-decay flags in store order (projection matrices
    /// decay; biases, norms, embeddings and tokens do not).
    pub fn decay_mask(&self) -> Vec<bool> {
        self.defs.iter().map(|d| d.decay).collect()
    }

    /// Checks that `store` has exactly this model's names and shapes, in order.
    pub fn check_store<T: Real>(&self, store: &ParamStore<T>) -> Result<()> {
        if store.len() != self.defs.len() {
            return Err(Error::Format(format!(
                "expected {} parameters, found {}",
                self.defs.len(),
                store.len()
            )));
        }
        for (def, (name, t)) in self.defs.iter().zip(store.iter()) {
            if def.name != name || def.shape != t.shape() {
                return Err(Error::Format(format!(
                    "parameter {name} {:?} does not match expected {} {:?}",
                    t.shape(),
                    def.name,
                    def.shape
                )));
            }
        }
        Ok(())
    }

    pub fn mask_token_var(&self, bound: &Bound) -> Var {
        bound.vars[self.ids.mask_token]
    }

    fn images_check<T: Real>(&self, tape: &Tape<T>, images: Var) -> Result<()> {
        let c = &self.config;
        let want = [c.channels, c.image_size, c.image_size];
        let s = tape.shape(images);
        if s.len() != 4 || s[1..] != want {
            return Err(Error::Config(format!(
                "images have shape {s:?}, model expects [N, {}, {}, {}]",
                want[0], want[1], want[2]
            )));
        }
        Ok(())
    }

    /// Flatten patches and project: `[N, C, H, W] -> [N, P, D]`.
    pub fn project_patches<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        images: Var,
    ) -> Result<Var> {
        self.images_check(tape, images)?;
        let patches = tape.patchify(images, self.config.patch_size)?;
        let v = &bound.vars;
        tape.linear(patches, v[self.ids.patch_w], Some(v[self.ids.patch_b]))
    }

    /// Adds the positional embedding to a full `[N, P, D]` patch sequence.
    pub fn add_positions<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        tokens: Var,
    ) -> Result<Var> {
        tape.add_broadcast(tokens, bound.vars[self.ids.pos])
    }

    /// Prepends the class token when the model has one.
    pub fn prepend_class<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        tokens: Var,
    ) -> Result<Var> {
        match self.ids.cls {
            Some(cls) => tape.prepend_token(tokens, bound.vars[cls]),
            None => Ok(tokens),
        }
    }

    /// Projection, positional embedding, class token: `[N, C, H, W] -> [N, T, D]`.
    pub fn patch_embed<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        images: Var,
    ) -> Result<Var> {
        let x = self.project_patches(tape, bound, images)?;
        let x = self.add_positions(tape, bound, x)?;
        self.prepend_class(tape, bound, x)
    }

    /// Transformer body, pooling and classifier head on an embedded token
    /// sequence `[N, T', D]`, where `positions` names the patches that survive.
    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        tokens: Var,
        positions: &TokenPositions,
        drop: &DropSpec,
    ) -> Result<Var> {
        let c = &self.config;
        let shape = tape.shape(tokens).to_vec();
        if shape.len() != 3 || shape[2] != c.dim {
            return Err(Error::shape("vit_forward", &shape, &[c.dim]));
        }
        let (n, t) = (shape[0], shape[1]);
        let patch_tokens = t.checked_sub(usize::from(c.class_token)).unwrap_or(0);
        if patch_tokens == 0 {
            return Err(Error::Contract("vit_forward needs at least one patch token".into()));
        }
        match positions {
            TokenPositions::All if patch_tokens != c.num_patches() => {
                return Err(Error::shape("vit_forward", &shape, &[n, c.num_tokens(), c.dim]));
            }
            TokenPositions::Kept(kept) => {
                if kept.len() != n || kept.iter().any(|k| k.len() != patch_tokens) {
                    return Err(Error::Contract(
                        "token positions do not match the token sequence".into(),
                    ));
                }
                let limit = c.num_patches();
                if let Some(&bad) = kept.iter().flatten().find(|&&i| i >= limit) {
                    return Err(Error::Index {
                        index: bad,
                        len: limit,
                    });
                }
            }
            _ => {}
        }
        check_probability("dropout", drop.dropout)?;
        check_probability("drop-path", drop.drop_path)?;

        let v = &bound.vars;
        let (heads, dh, d) = (c.heads, c.head_dim(), c.dim);
        let inv_sqrt = T::lit(1.0 / (dh as f64).sqrt());
        let mut rng = drop.stream.rng();
        let on = drop.enabled;
        let mut x = tokens;
        for b in &self.ids.blocks {
            let h = tape.layer_norm(x, v[b.norm1_w], v[b.norm1_b], LN_EPS)?;
            let qkv = tape.linear(h, v[b.qkv_w], None)?;
            let q = tape.heads_split(qkv, 0, heads, dh)?;
            let k = tape.heads_split(qkv, d, heads, dh)?;
            let val = tape.heads_split(qkv, 2 * d, heads, dh)?;
            let scores = tape.batch_matmul(q, k, true)?;
            let scores = tape.scale(scores, inv_sqrt);
            let attn = tape.softmax(scores)?;
            let o = tape.batch_matmul(attn, val, false)?;
            let o = tape.heads_merge(o, heads)?;
            let o = tape.linear(o, v[b.proj_w], Some(v[b.proj_b]))?;
            let o = apply_dropout(tape, o, drop.dropout, &mut rng, on)?;
            let o = apply_drop_path(tape, o, drop.drop_path, &mut rng, on)?;
            x = tape.add(x, o)?;

            let h = tape.layer_norm(x, v[b.norm2_w], v[b.norm2_b], LN_EPS)?;
            let h = tape.linear(h, v[b.fc1_w], Some(v[b.fc1_b]))?;
            let h = tape.gelu(h);
            let h = apply_dropout(tape, h, drop.dropout, &mut rng, on)?;
            let h = tape.linear(h, v[b.fc2_w], Some(v[b.fc2_b]))?;
            let h = apply_dropout(tape, h, drop.dropout, &mut rng, on)?;
            let h = apply_drop_path(tape, h, drop.drop_path, &mut rng, on)?;
            x = tape.add(x, h)?;
        }
        let x = tape.layer_norm(x, v[self.ids.norm_w], v[self.ids.norm_b], LN_EPS)?;
        let pooled = if c.class_token {
            tape.select_token(x, 0)?
        } else {
            tape.mean_tokens(x)?
        };
        tape.linear(pooled, v[self.ids.head_w], Some(v[self.ids.head_b]))
    }

    /// Full evaluation-mode pass from images to logits.
    pub fn predict<T: Real>(&self, params: &ParamStore<T>, images: &Tensor<T>) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.leaf(images, false);
        let tokens = self.patch_embed(&mut tape, &bound, x)?;
        let logits = self.forward(&mut tape, &bound, tokens, &TokenPositions::All, &DropSpec::eval())?;
        Ok(tape.value(logits).to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Purpose;

    fn tiny(depth: usize, class_token: bool) -> Vit {
        Vit::new(VitConfig {
            image_size: 8,
            patch_size: 4,
            channels: 3,
            dim: 8,
            depth,
            heads: 2,
            mlp_ratio: 2.0,
            classes: 3,
            class_token,
        })
        .unwrap()
    }

    fn image_batch(n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = StreamKey::new(seed, Purpose::Test, 0).rng();
        Tensor::from_fn(&[n, 3, 8, 8], |_| uniform01(&mut rng) * 2.0 - 1.0)
    }

    #[test]
    fn config_validation() {
        let mut c = VitConfig::default();
        assert!(c.validate().is_ok());
        assert_eq!(c.num_tokens(), 65);
        c.patch_size = 5;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
        let mut c = VitConfig::default();
        c.heads = 5;
        assert!(c.validate().is_err());
    }

    #[test]
    fn token_count_for_32px_patch8() {
        let c = VitConfig {
            patch_size: 8,
            ..VitConfig::default()
        };
        let vit = Vit::new(c).unwrap();
        let params = vit.init_params::<f64>(0);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.leaf(&Tensor::zeros(&[2, 3, 32, 32]), false);
        let tokens = vit.patch_embed(&mut tape, &bound, x).unwrap();
        assert_eq!(tape.shape(tokens), &[2, 17, 96]);
    }

    #[test]
    fn zero_image_gives_bias_tokens() {
        let vit = tiny(1, false);
        let mut params = vit.init_params::<f64>(3);
        params.get_mut("pos_embed").unwrap().data_mut().fill(0.0);
        let bias: Vec<f64> = (0..8).map(|i| i as f64 * 0.1 - 0.3).collect();
        params
            .get_mut("patch_embed.bias")
            .unwrap()
            .data_mut()
            .copy_from_slice(&bias);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.leaf(&Tensor::zeros(&[2, 3, 8, 8]), false);
        let tokens = vit.patch_embed(&mut tape, &bound, x).unwrap();
        for row in tape.value(tokens).chunks(8) {
            assert_eq!(row, bias.as_slice());
        }
    }

    #[test]
    fn patch_tokens_match_direct_projection() {
        let vit = tiny(1, true);
        let params = vit.init_params::<f64>(4);
        let images = image_batch(2, 9);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.leaf(&images, false);
        let tokens = vit.patch_embed(&mut tape, &bound, x).unwrap();
        let got = tape.value(tokens);

        let w = params.get("patch_embed.weight").unwrap().data();
        let b = params.get("patch_embed.bias").unwrap().data();
        let pos = params.get("pos_embed").unwrap().data();
        let cls = params.get("cls_token").unwrap().data();
        let (p, d, img) = (4, 8, images.data());
        for s in 0..2 {
            assert_eq!(&got[s * 5 * d..s * 5 * d + d], cls);
            for py in 0..2 {
                for px in 0..2 {
                    let t = py * 2 + px;
                    // flatten channel-major, then rows, then columns
                    let mut flat = Vec::new();
                    for c in 0..3 {
                        for dy in 0..p {
                            for dx in 0..p {
                                flat.push(img[((s * 3 + c) * 8 + py * p + dy) * 8 + px * p + dx]);
                            }
                        }
                    }
                    for j in 0..d {
                        let mut want = b[j] + pos[t * d + j];
                        for (f, &fv) in flat.iter().enumerate() {
                            want += fv * w[f * d + j];
                        }
                        let have = got[(s * 5 + 1 + t) * d + j];
                        assert!((have - want).abs() < 1e-10, "{have} vs {want}");
                    }
                }
            }
        }
    }

    #[test]
    fn depth_zero_is_head_of_pooled_tokens() {
        for class_token in [true, false] {
            let vit = tiny(0, class_token);
            let params = vit.init_params::<f64>(1);
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let x = tape.leaf(&image_batch(3, 2), false);
            let tokens = vit.patch_embed(&mut tape, &bound, x).unwrap();
            let logits = vit
                .forward(&mut tape, &bound, tokens, &TokenPositions::All, &DropSpec::eval())
                .unwrap();
            let normed = tape
                .layer_norm(tokens, bound.vars[vit.ids.norm_w], bound.vars[vit.ids.norm_b], LN_EPS)
                .unwrap();
            let pooled = if class_token {
                tape.select_token(normed, 0).unwrap()
            } else {
                tape.mean_tokens(normed).unwrap()
            };
            let want = tape
                .linear(pooled, bound.vars[vit.ids.head_w], Some(bound.vars[vit.ids.head_b]))
                .unwrap();
            assert_eq!(tape.value(logits), tape.value(want));
        }
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let vit = tiny(2, true);
        let params = vit.init_params::<f32>(7);
        let images = image_batch(4, 3).cast::<f32>();
        let a = vit.predict(&params, &images).unwrap();
        let b = vit.predict(&params, &images).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn forward_rejects_out_of_range_positions() {
        let vit = tiny(1, true);
        let params = vit.init_params::<f64>(0);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = tape.leaf(&image_batch(1, 0), false);
        let tokens = vit.project_patches(&mut tape, &bound, x).unwrap();
        let kept = tape.gather_tokens(tokens, &[vec![0, 1]]).unwrap();
        let kept = vit.prepend_class(&mut tape, &bound, kept).unwrap();
        let err = vit
            .forward(
                &mut tape,
                &bound,
                kept,
                &TokenPositions::Kept(vec![vec![0, 9]]),
                &DropSpec::eval(),
            )
            .unwrap_err();
        assert!(matches!(err, Error::Index { index: 9, len: 4 }));
    }

    #[test]
    fn dropout_identity_cases_and_range() {
        let mut tape = Tape::<f32>::new();
        let x = tape.leaf(&Tensor::full(&[10], 1.0), true);
        let mut rng = StreamKey::new(0, Purpose::Test, 0).rng();
        assert_eq!(apply_dropout(&mut tape, x, 0.0, &mut rng, true).unwrap(), x);
        assert_eq!(apply_dropout(&mut tape, x, 0.7, &mut rng, false).unwrap(), x);
        assert!(matches!(
            apply_dropout(&mut tape, x, 1.0, &mut rng, true),
            Err(Error::Range { .. })
        ));
        assert_eq!(apply_drop_path(&mut tape, x, 0.0, &mut rng, true).unwrap(), x);
        assert!(apply_drop_path(&mut tape, x, 1.5, &mut rng, false).is_err());
    }

    #[test]
    fn dropout_keep_fraction_and_scaling() {
        let n = 100_000;
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::full(&[n], 1.0), true);
        let mut rng = StreamKey::new(11, Purpose::Test, 0).rng();
        let y = apply_dropout(&mut tape, x, 0.5, &mut rng, true).unwrap();
        let vals = tape.value(y);
        let kept = vals.iter().filter(|&&v| v != 0.0).count();
        assert!(vals.iter().all(|&v| v == 0.0 || v == 2.0));
        let frac = kept as f64 / n as f64;
        assert!((frac - 0.5).abs() <= 0.01, "{frac}");
    }

    #[test]
    fn drop_path_fraction_and_zero_gradient() {
        let n = 10_000;
        let mut tape = Tape::<f64>::new();
        let x = tape.leaf(&Tensor::full(&[n, 3], 1.0), true);
        let mut rng = StreamKey::new(12, Purpose::Test, 0).rng();
        let y = apply_drop_path(&mut tape, x, 0.3, &mut rng, true).unwrap();
        let vals = tape.value(y).to_vec();
        let dropped = vals.chunks(3).filter(|r| r.iter().all(|&v| v == 0.0)).count();
        let frac = dropped as f64 / n as f64;
        assert!((frac - 0.3).abs() <= 0.02, "{frac}");
        // whole samples are dropped together
        assert!(vals.chunks(3).all(|r| r[0] == r[1] && r[1] == r[2]));

        let s = tape.sum(y);
        tape.backward(s).unwrap();
        let g = tape.grad(x).unwrap();
        for (row, grow) in vals.chunks(3).zip(g.chunks(3)) {
            if row[0] == 0.0 {
                assert!(grow.iter().all(|&v| v == 0.0));
            } else {
                assert!(grow.iter().all(|&v| (v - 1.0 / 0.7).abs() < 1e-12));
            }
        }
    }

    #[test]
    fn store_check_and_decay_mask() {
        let vit = tiny(2, true);
        let params = vit.init_params::<f32>(0);
        vit.check_store(&params).unwrap();
        let mask = vit.decay_mask();
        assert_eq!(mask.len(), params.len());
        for ((name, _), decay) in params.iter().zip(&mask) {
            assert_eq!(*decay, name.ends_with("weight") && !name.contains("norm"), "{name}");
        }
        let other = tiny(1, true).init_params::<f32>(0);
        assert!(vit.check_store(&other).is_err());
    }
}
