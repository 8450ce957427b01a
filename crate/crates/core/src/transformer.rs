//! Phase transformer Q-network.
//!
//! Tokens are the class token, the phase token (a linear embedding of the
//! acquisition indicator) and the `c` image patches. After position
//! embedding they pass through pre-norm transformer layers; the final class
//! token column is mapped by a two-layer head to one Q-value per action slot.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{load_checkpoint, save_checkpoint, Tape, Tensor, Var};
use crate::env::Observation;
use crate::error::{size_err, Error, Result};
use crate::kspace::{PhaseIndicator, RealImage};
use crate::num::Scalar;

/// Checkpoint arrays by name.
pub type NamedTensors<T> = Vec<(String, Tensor<T>)>;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;
const CONFIG_KEY: &str = "meta.config";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PTConfig {
    /// Image height `F`.
    pub image_rows: usize,
    /// Image width, equal to the phase count `P`.
    pub image_cols: usize,
    pub patch_rows: usize,
    pub patch_cols: usize,
    /// Token width `d`; also the transformer MLP output width.
    pub embed_dim: usize,
    /// Hidden width of the layer MLPs and of the head.
    pub hidden_dim: usize,
    pub layers: usize,
    pub heads: usize,
    /// Pre-selected phase count `L`; the head emits `P - L` values.
    pub preselect: usize,
    /// When false the phase token is a constant and the network ignores `b̄`.
    pub phase_token: bool,
}

impl PTConfig {
    /// 64x64 input, 8x8 patches, d = 64, two layers of four heads.
    pub fn desk() -> Self {
        Self {
            image_rows: 64,
            image_cols: 64,
            patch_rows: 8,
            patch_cols: 8,
            embed_dim: 64,
            hidden_dim: 128,
            layers: 2,
            heads: 4,
            preselect: 6,
            phase_token: true,
        }
    }

    /// 640x368 input with 16x16 patches (920 tokens), d = 512,
    /// hidden 1024, four layers.
    pub fn paper_scale() -> Self {
        Self {
            image_rows: 640,
            image_cols: 368,
            patch_rows: 16,
            patch_cols: 16,
            embed_dim: 512,
            hidden_dim: 1024,
            layers: 4,
            heads: 8,
            preselect: 30,
            phase_token: true,
        }
    }

    pub fn phases(&self) -> usize {
        self.image_cols
    }

    /// Patch count `c`.
    pub fn patches(&self) -> usize {
        (self.image_rows / self.patch_rows) * (self.image_cols / self.patch_cols)
    }

    pub fn tokens(&self) -> usize {
        self.patches() + 2
    }

    pub fn patch_len(&self) -> usize {
        self.patch_rows * self.patch_cols
    }

    /// `d_output`, tied to `d` by the residual connections.
    pub fn output_dim(&self) -> usize {
        self.embed_dim
    }

    /// Action slots, `P - L`.
    pub fn actions(&self) -> usize {
        self.image_cols - self.preselect
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        let c = |m: String| Err(Error::Config(m));
        if self.patch_rows == 0 || self.patch_cols == 0 {
            return c("patch size must be positive".into());
        }
        if !self.image_rows.is_multiple_of(self.patch_rows) || !self.image_cols.is_multiple_of(self.patch_cols) {
            return c(format!(
                "{}x{} image is not divisible into {}x{} patches",
                self.image_rows, self.image_cols, self.patch_rows, self.patch_cols
            ));
        }
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.heads == 0 {
            return c("embed_dim, hidden_dim and heads must be positive".into());
        }
        if !self.embed_dim.is_multiple_of(self.heads) {
            return c(format!(
                "embed_dim {} is not divisible by {} heads",
                self.embed_dim, self.heads
            ));
        }
        if self.preselect >= self.image_cols {
            return c("preselect must leave at least one action".into());
        }
        Ok(())
    }

    /// Closed-form learnable parameter count.
    pub fn parameter_count(&self) -> usize {
        let (d, h, p, a) = (
            self.embed_dim,
            self.hidden_dim,
            self.phases(),
            self.actions(),
        );
        let embed = self.patch_len() * d + d + p * d + d + d + self.tokens() * d;
        let layer = 4 * d + 4 * (d * d + d) + (d * h + h) + (h * d + d);
        let head = d * h + h + h * a + a;
        embed + self.layers * layer + head
    }

    fn to_meta<T: Scalar>(self) -> Tensor<T> {
        let v = [
            self.image_rows,
            self.image_cols,
            self.patch_rows,
            self.patch_cols,
            self.embed_dim,
            self.hidden_dim,
            self.layers,
            self.heads,
            self.preselect,
            self.phase_token as usize,
        ];
        Tensor::new(&[v.len()], v.iter().map(|&x| T::of(x as f64)).collect()).expect("meta shape")
    }

    fn from_meta<T: Scalar>(t: &Tensor<T>) -> Result<Self> {
        let v: Vec<usize> = t.data().iter().map(|x| x.as_f64() as usize).collect();
        if v.len() != 10 {
            return Err(Error::Format(
                "malformed network configuration record".into(),
            ));
        }
        let cfg = Self {
            image_rows: v[0],
            image_cols: v[1],
            patch_rows: v[2],
            patch_cols: v[3],
            embed_dim: v[4],
            hidden_dim: v[5],
            layers: v[6],
            heads: v[7],
            preselect: v[8],
            phase_token: v[9] != 0,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<T> {
    pub ln1_gamma: Tensor<T>,
    pub ln1_beta: Tensor<T>,
    pub wq: Tensor<T>,
    pub bq: Tensor<T>,
    pub wk: Tensor<T>,
    pub bk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bv: Tensor<T>,
    pub wo: Tensor<T>,
    pub bo: Tensor<T>,
    pub ln2_gamma: Tensor<T>,
    pub ln2_beta: Tensor<T>,
    pub mlp_w1: Tensor<T>,
    pub mlp_b1: Tensor<T>,
    pub mlp_w2: Tensor<T>,
    pub mlp_b2: Tensor<T>,
}

const LAYER_NAMES: [&str; 16] = [
    "ln1.gamma",
    "ln1.beta",
    "attn.wq",
    "attn.bq",
    "attn.wk",
    "attn.bk",
    "attn.wv",
    "attn.bv",
    "attn.wo",
    "attn.bo",
    "ln2.gamma",
    "ln2.beta",
    "mlp.w1",
    "mlp.b1",
    "mlp.w2",
    "mlp.b2",
];

impl<T: Scalar> LayerParams<T> {
    fn init(d: usize, h: usize, rng: &mut ChaCha8Rng) -> Self {
        let w =
            |r: usize, c: usize, rng: &mut ChaCha8Rng| Tensor::trunc_normal(&[r, c], INIT_STD, rng);
        Self {
            ln1_gamma: Tensor::filled(&[d], T::one()),
            ln1_beta: Tensor::zeros(&[d]),
            wq: w(d, d, rng),
            bq: Tensor::zeros(&[d]),
            wk: w(d, d, rng),
            bk: Tensor::zeros(&[d]),
            wv: w(d, d, rng),
            bv: Tensor::zeros(&[d]),
            wo: w(d, d, rng),
            bo: Tensor::zeros(&[d]),
            ln2_gamma: Tensor::filled(&[d], T::one()),
            ln2_beta: Tensor::zeros(&[d]),
            mlp_w1: w(d, h, rng),
            mlp_b1: Tensor::zeros(&[h]),
            mlp_w2: w(h, d, rng),
            mlp_b2: Tensor::zeros(&[d]),
        }
    }

    fn tensors(&self) -> [&Tensor<T>; 16] {
        [
            &self.ln1_gamma,
            &self.ln1_beta,
            &self.wq,
            &self.bq,
            &self.wk,
            &self.bk,
            &self.wv,
            &self.bv,
            &self.wo,
            &self.bo,
            &self.ln2_gamma,
            &self.ln2_beta,
            &self.mlp_w1,
            &self.mlp_b1,
            &self.mlp_w2,
            &self.mlp_b2,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 16] {
        [
            &mut self.ln1_gamma,
            &mut self.ln1_beta,
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.bk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln2_gamma,
            &mut self.ln2_beta,
            &mut self.mlp_w1,
            &mut self.mlp_b1,
            &mut self.mlp_w2,
            &mut self.mlp_b2,
        ]
    }
}

/// All learnable parameters of the Q-network.
#[derive(Clone, Debug, PartialEq)]
pub struct PTParams<T> {
    pub patch_w: Tensor<T>,
    pub patch_b: Tensor<T>,
    pub phase_w: Tensor<T>,
    pub phase_b: Tensor<T>,
    pub class_token: Tensor<T>,
    pub pos_embed: Tensor<T>,
    pub layers: Vec<LayerParams<T>>,
    pub head_w1: Tensor<T>,
    pub head_b1: Tensor<T>,
    pub head_w2: Tensor<T>,
    pub head_b2: Tensor<T>,
}

impl<T: Scalar> PTParams<T> {
    pub fn init(cfg: &PTConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h) = (cfg.embed_dim, cfg.hidden_dim);
        let patch_w = Tensor::trunc_normal(&[cfg.patch_len(), d], INIT_STD, &mut rng);
        let phase_w = Tensor::trunc_normal(&[cfg.phases(), d], INIT_STD, &mut rng);
        let class_token = Tensor::trunc_normal(&[d], INIT_STD, &mut rng);
        let pos_embed = Tensor::trunc_normal(&[cfg.tokens(), d], INIT_STD, &mut rng);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams::init(d, h, &mut rng))
            .collect();
        let head_w1 = Tensor::trunc_normal(&[d, h], INIT_STD, &mut rng);
        let head_w2 = Tensor::trunc_normal(&[h, cfg.actions()], INIT_STD, &mut rng);
        Ok(Self {
            patch_w,
            patch_b: Tensor::zeros(&[d]),
            phase_w,
            phase_b: Tensor::zeros(&[d]),
            class_token,
            pos_embed,
            layers,
            head_w1,
            head_b1: Tensor::zeros(&[h]),
            head_w2,
            head_b2: Tensor::zeros(&[cfg.actions()]),
        })
    }

    /// Every parameter with its checkpoint name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<T>)> {
        let mut out: Vec<(String, &Tensor<T>)> = vec![
            ("embed.patch.w".into(), &self.patch_w),
            ("embed.patch.b".into(), &self.patch_b),
            ("embed.phase.w".into(), &self.phase_w),
            ("embed.phase.b".into(), &self.phase_b),
            ("embed.class".into(), &self.class_token),
            ("embed.pos".into(), &self.pos_embed),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, t) in LAYER_NAMES.iter().zip(l.tensors()) {
                out.push((format!("layer{}.{}", i, name), t));
            }
        }
        out.push(("head.w1".into(), &self.head_w1));
        out.push(("head.b1".into(), &self.head_b1));
        out.push(("head.w2".into(), &self.head_w2));
        out.push(("head.b2".into(), &self.head_b2));
        out
    }

    /// Same order as [`PTParams::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut out: Vec<&mut Tensor<T>> = vec![
            &mut self.patch_w,
            &mut self.patch_b,
            &mut self.phase_w,
            &mut self.phase_b,
            &mut self.class_token,
            &mut self.pos_embed,
        ];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out.push(&mut self.head_w1);
        out.push(&mut self.head_b1);
        out.push(&mut self.head_w2);
        out.push(&mut self.head_b2);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.named_tensors().iter().map(|(_, t)| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.named_tensors().iter().all(|(_, t)| t.is_finite())
    }

    /// Rebuilds parameters from named arrays, checking every shape against `cfg`.
    pub fn from_named(cfg: &PTConfig, arrays: &[(String, Tensor<T>)]) -> Result<Self> {
        let mut p = Self::init(cfg, 0)?;
        let expected: Vec<(String, Vec<usize>)> = p
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.shape().to_vec()))
            .collect();
        for ((name, shape), slot) in expected.iter().zip(p.tensors_mut()) {
            let (_, t) = arrays
                .iter()
                .find(|(n, _)| n == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {}", name)))?;
            if t.shape() != &shape[..] {
                return Err(Error::Config(format!(
                    "{} has shape {:?}, network expects {:?}",
                    name,
                    t.shape(),
                    shape
                )));
            }
            *slot = t.clone();
        }
        Ok(p)
    }
}

/// Splits an image into `c` row-major patches, each flattened row-major.
pub fn patchify<T: Scalar>(img: &RealImage<T>, cfg: &PTConfig) -> Result<Vec<T>> {
    cfg.validate()?;
    if (img.rows(), img.cols()) != (cfg.image_rows, cfg.image_cols) {
        return Err(size_err(format!(
            "{}x{} image for a {}x{} network",
            img.rows(),
            img.cols(),
            cfg.image_rows,
            cfg.image_cols
        )));
    }
    let (ph, pw) = (cfg.patch_rows, cfg.patch_cols);
    let mut out = Vec::with_capacity(img.data().len());
    for br in 0..cfg.image_rows / ph {
        for bc in 0..cfg.image_cols / pw {
            for r in 0..ph {
                let start = (br * ph + r) * cfg.image_cols + bc * pw;
                out.extend_from_slice(&img.data()[start..start + pw]);
            }
        }
    }
    Ok(out)
}

/// Inverse of [`patchify`].
pub fn unpatchify<T: Scalar>(tokens: &[T], cfg: &PTConfig) -> Result<RealImage<T>> {
    let (ph, pw) = (cfg.patch_rows, cfg.patch_cols);
    if tokens.len() != cfg.image_rows * cfg.image_cols {
        return Err(size_err("token buffer does not cover the image"));
    }
    let mut data = vec![T::zero(); tokens.len()];
    let mut it = tokens.chunks_exact(pw);
    for br in 0..cfg.image_rows / ph {
        for bc in 0..cfg.image_cols / pw {
            for r in 0..ph {
                let start = (br * ph + r) * cfg.image_cols + bc * pw;
                data[start..start + pw].copy_from_slice(it.next().unwrap());
            }
        }
    }
    RealImage::new(cfg.image_rows, cfg.image_cols, data)
}

/// Tape handles of one transformer layer's parameters.
#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub ln1: (Var, Var),
    pub q: (Var, Var),
    pub k: (Var, Var),
    pub v: (Var, Var),
    pub o: (Var, Var),
    pub ln2: (Var, Var),
    pub mlp1: (Var, Var),
    pub mlp2: (Var, Var),
}

/// Parameters placed on a tape as leaves. `all` follows
/// [`PTParams::named_tensors`] order.
#[derive(Clone, Debug)]
pub struct BoundParams {
    pub all: Vec<Var>,
    pub patch: (Var, Var),
    pub phase: (Var, Var),
    pub class_token: Var,
    pub pos_embed: Var,
    pub layers: Vec<LayerVars>,
    pub head1: (Var, Var),
    pub head2: (Var, Var),
}

impl<T: Scalar> PTParams<T> {
    pub fn bind(&self, tape: &mut Tape<T>) -> BoundParams {
        let all: Vec<Var> = self
            .named_tensors()
            .into_iter()
            .map(|(_, t)| tape.tensor(t))
            .collect();
        let mut it = all.iter().copied();
        let mut next = || it.next().expect("parameter layout");
        let patch = (next(), next());
        let phase = (next(), next());
        let class_token = next();
        let pos_embed = next();
        let layers = (0..self.layers.len())
            .map(|_| LayerVars {
                ln1: (next(), next()),
                q: (next(), next()),
                k: (next(), next()),
                v: (next(), next()),
                o: (next(), next()),
                ln2: (next(), next()),
                mlp1: (next(), next()),
                mlp2: (next(), next()),
            })
            .collect();
        let head1 = (next(), next());
        let head2 = (next(), next());
        BoundParams {
            all,
            patch,
            phase,
            class_token,
            pos_embed,
            layers,
            head1,
            head2,
        }
    }
}

/// Token matrix of shape `(c + 2) x d`: class, phase, then patch tokens,
/// each with its position vector added.
pub fn embed<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &PTConfig,
    image: &RealImage<T>,
    indicator: &PhaseIndicator,
) -> Result<Var> {
    if indicator.len() != cfg.phases() {
        return Err(size_err(format!(
            "indicator of length {} for {} phases",
            indicator.len(),
            cfg.phases()
        )));
    }
    let tokens = patchify(image, cfg)?;
    let patches = tape.input(cfg.patches(), cfg.patch_len(), tokens)?;
    let patch_emb = tape.linear(patches, bound.patch.0, bound.patch.1)?;
    let phase_emb = if cfg.phase_token {
        let b = tape.input(1, cfg.phases(), indicator.as_scalars())?;
        tape.linear(b, bound.phase.0, bound.phase.1)?
    } else {
        tape.input(1, cfg.embed_dim, vec![T::zero(); cfg.embed_dim])?
    };
    let x = tape.concat_rows(&[bound.class_token, phase_emb, patch_emb])?;
    tape.add(x, bound.pos_embed)
}

/// `x + MSA(LN(x))`, then `+ MLP(LN(.))`.
pub fn transformer_layer<T: Scalar>(
    tape: &mut Tape<T>,
    x: Var,
    lv: &LayerVars,
    cfg: &PTConfig,
) -> Result<Var> {
    let eps = T::of(LN_EPS);
    let h = tape.layer_norm(x, lv.ln1.0, lv.ln1.1, eps)?;
    let attn = multi_head_attention(tape, h, lv, cfg)?;
    let x = tape.add(x, attn)?;
    let h = tape.layer_norm(x, lv.ln2.0, lv.ln2.1, eps)?;
    let h = tape.linear(h, lv.mlp1.0, lv.mlp1.1)?;
    let h = tape.gelu(h);
    let h = tape.linear(h, lv.mlp2.0, lv.mlp2.1)?;
    tape.add(x, h)
}

fn multi_head_attention<T: Scalar>(
    tape: &mut Tape<T>,
    h: Var,
    lv: &LayerVars,
    cfg: &PTConfig,
) -> Result<Var> {
    let q = tape.linear(h, lv.q.0, lv.q.1)?;
    let k = tape.linear(h, lv.k.0, lv.k.1)?;
    let v = tape.linear(h, lv.v.0, lv.v.1)?;
    let hd = cfg.head_dim();
    let scale = T::one() / T::of(hd as f64).sqrt();
    let mut outs = Vec::with_capacity(cfg.heads);
    for head in 0..cfg.heads {
        let qh = tape.slice_cols(q, head * hd, hd)?;
        let kh = tape.slice_cols(k, head * hd, hd)?;
        let vh = tape.slice_cols(v, head * hd, hd)?;
        let scores = tape.matmul_nt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let weights = tape.softmax_rows(scores);
        outs.push(tape.matmul(weights, vh)?);
    }
    let cat = if outs.len() == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    tape.linear(cat, lv.o.0, lv.o.1)
}

/// Full network on a tape; returns a `1 x (P - L)` node of Q-values.
pub fn forward_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    cfg: &PTConfig,
    image: &RealImage<T>,
    indicator: &PhaseIndicator,
) -> Result<Var> {
    let mut x = embed(tape, bound, cfg, image, indicator)?;
    for lv in &bound.layers {
        x = transformer_layer(tape, x, lv, cfg)?;
    }
    let f0 = tape.slice_rows(x, 0, 1)?;
    let h = tape.linear(f0, bound.head1.0, bound.head1.1)?;
    let h = tape.gelu(h);
    tape.linear(h, bound.head2.0, bound.head2.1)
}

/// Configuration plus parameters: a usable Q-function.
#[derive(Clone, Debug, PartialEq)]
pub struct PhaseTransformer<T> {
    pub cfg: PTConfig,
    pub params: PTParams<T>,
}

impl<T: Scalar> PhaseTransformer<T> {
    pub fn new(cfg: PTConfig, seed: u64) -> Result<Self> {
        Ok(Self {
            params: PTParams::init(&cfg, seed)?,
            cfg,
        })
    }

    /// Q-values for every action slot.
    pub fn forward(&self, image: &RealImage<T>, indicator: &PhaseIndicator) -> Result<Vec<T>> {
        let mut tape = Tape::inference();
        let bound = self.params.bind(&mut tape);
        let q = forward_on_tape(&mut tape, &bound, &self.cfg, image, indicator)?;
        Ok(tape.value(q).to_vec())
    }

    pub fn q_values(&self, obs: &Observation<T>) -> Result<Vec<T>> {
        self.forward(&obs.image, &obs.indicator)
    }

    pub fn checkpoint_arrays(&self) -> (Tensor<T>, Vec<(String, &Tensor<T>)>) {
        (self.cfg.to_meta(), self.params.named_tensors())
    }

    /// Writes a `PTW1` file holding the configuration record, the
    /// parameters and any `extra` arrays.
    pub fn save(&self, path: impl AsRef<Path>, extra: &[(String, Tensor<T>)]) -> Result<()> {
        let meta = self.cfg.to_meta();
        let mut arrays = vec![(CONFIG_KEY.to_string(), &meta)];
        arrays.extend(self.params.named_tensors());
        arrays.extend(extra.iter().map(|(n, t)| (n.clone(), t)));
        save_checkpoint(path, &arrays)
    }

    /// Loads a network and returns the arrays that are not parameters.
    pub fn load(path: impl AsRef<Path>) -> Result<(Self, NamedTensors<T>)> {
        let arrays = load_checkpoint::<T>(path)?;
        Self::from_arrays(arrays)
    }

    pub fn from_arrays(
        arrays: Vec<(String, Tensor<T>)>,
    ) -> Result<(Self, NamedTensors<T>)> {
        let meta = arrays
            .iter()
            .find(|(n, _)| n == CONFIG_KEY)
            .ok_or_else(|| Error::Format("checkpoint lacks the network configuration".into()))?;
        let cfg = PTConfig::from_meta(&meta.1)?;
        let params = PTParams::from_named(&cfg, &arrays)?;
        let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
        let extra = arrays
            .into_iter()
            .filter(|(n, _)| n != CONFIG_KEY && !names.contains(n))
            .collect();
        Ok((Self { cfg, params }, extra))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny(phase_token: bool) -> PTConfig {
        PTConfig {
            image_rows: 8,
            image_cols: 8,
            patch_rows: 4,
            patch_cols: 2,
            embed_dim: 8,
            hidden_dim: 12,
            layers: 2,
            heads: 2,
            preselect: 2,
            phase_token,
        }
    }

    fn random_image(rows: usize, cols: usize, seed: u64) -> RealImage<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        RealImage::new(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random::<f32>()).collect(),
        )
        .unwrap()
    }

    #[test]
    fn patch_counts() {
        assert_eq!(PTConfig::paper_scale().patches(), 920);
        assert_eq!(PTConfig::paper_scale().actions(), 338);
        assert_eq!(PTConfig::paper_scale().parameter_count(), 10_075_986);
        assert_eq!(PTConfig::desk().patches(), 64);
        let bad = PTConfig {
            patch_rows: 7,
            ..PTConfig::desk()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
        let heads = PTConfig {
            heads: 3,
            ..PTConfig::desk()
        };
        assert!(heads.validate().is_err());
    }

    #[test]
    fn patchify_is_lossless() {
        let cfg = tiny(true);
        let img = random_image(8, 8, 1);
        let tokens = patchify(&img, &cfg).unwrap();
        assert_eq!(tokens.len(), 64);
        // first patch: rows 0..4, cols 0..2
        assert_eq!(
            &tokens[0..4],
            &[img.get(0, 0), img.get(0, 1), img.get(1, 0), img.get(1, 1)]
        );
        // second patch starts at column 2
        assert_eq!(tokens[8], img.get(0, 2));
        assert_eq!(unpatchify(&tokens, &cfg).unwrap(), img);
        assert!(patchify(&random_image(8, 6, 1), &cfg).is_err());
    }

    #[test]
    fn parameter_count_matches_shapes() {
        for cfg in [tiny(true), PTConfig::desk()] {
            let p = PTParams::<f32>::init(&cfg, 0).unwrap();
            assert_eq!(p.parameter_count(), cfg.parameter_count());
        }
    }

    #[test]
    fn embedding_layout() {
        let cfg = tiny(true);
        let params = PTParams::<f64>::init(&cfg, 3).unwrap();
        let img = RealImage::zeros(8, 8);
        let b = PhaseIndicator::zeros(8);
        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let x = embed(&mut tape, &bound, &cfg, &img, &b).unwrap();
        assert_eq!(tape.shape(x), (cfg.tokens(), 8));
        let v = tape.value(x);
        let pos = params.pos_embed.data();
        for j in 0..8 {
            assert_eq!(v[j], params.class_token.data()[j] + pos[j]);
            // zero image and zero indicator: bias (zero) plus position
            assert_eq!(v[8 + j], pos[8 + j]);
            assert_eq!(v[16 + j], pos[16 + j]);
        }
    }

    #[test]
    fn indicator_only_changes_phase_column() {
        let cfg = tiny(true);
        let params = PTParams::<f32>::init(&cfg, 4).unwrap();
        let img = random_image(8, 8, 2);
        let b1 = PhaseIndicator::from_phases(8, &[3, 4]).unwrap();
        let b2 = b1.set_indicator(6).unwrap();
        let run = |b: &PhaseIndicator| {
            let mut tape = Tape::inference();
            let bound = params.bind(&mut tape);
            let x = embed(&mut tape, &bound, &cfg, &img, b).unwrap();
            tape.value(x).to_vec()
        };
        let (e1, e2) = (run(&b1), run(&b2));
        for tok in 0..cfg.tokens() {
            let same = e1[tok * 8..(tok + 1) * 8] == e2[tok * 8..(tok + 1) * 8];
            assert_eq!(same, tok != 1, "token {tok}");
        }
    }

    #[test]
    fn hand_computed_attention() {
        // One head, d = 2, three tokens, identity projections and no biases.
        let cfg = PTConfig {
            image_rows: 2,
            image_cols: 2,
            patch_rows: 2,
            patch_cols: 2,
            embed_dim: 2,
            hidden_dim: 2,
            layers: 1,
            heads: 1,
            preselect: 1,
            phase_token: true,
        };
        let mut tape = Tape::<f64>::new();
        let eye = || vec![1.0, 0.0, 0.0, 1.0];
        let mut var = |r: usize, c: usize, v: Vec<f64>| tape.input(r, c, v).unwrap();
        let lv = LayerVars {
            ln1: (var(1, 2, vec![1.0; 2]), var(1, 2, vec![0.0; 2])),
            q: (var(2, 2, eye()), var(1, 2, vec![0.0; 2])),
            k: (var(2, 2, eye()), var(1, 2, vec![0.0; 2])),
            v: (var(2, 2, eye()), var(1, 2, vec![0.0; 2])),
            o: (var(2, 2, eye()), var(1, 2, vec![0.0; 2])),
            ln2: (var(1, 2, vec![1.0; 2]), var(1, 2, vec![0.0; 2])),
            mlp1: (var(2, 2, eye()), var(1, 2, vec![0.0; 2])),
            mlp2: (var(2, 2, eye()), var(1, 2, vec![0.0; 2])),
        };
        let xs = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        let h = tape.input(3, 2, xs.to_vec()).unwrap();
        let out = multi_head_attention(&mut tape, h, &lv, &cfg).unwrap();

        let mut expected = vec![0.0; 6];
        for i in 0..3 {
            let s: Vec<f64> = (0..3)
                .map(|j| (xs[2 * i] * xs[2 * j] + xs[2 * i + 1] * xs[2 * j + 1]) / 2f64.sqrt())
                .collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for j in 0..3 {
                let w = s[j].exp() / z;
                expected[2 * i] += w * xs[2 * j];
                expected[2 * i + 1] += w * xs[2 * j + 1];
            }
        }
        for (a, b) in tape.value(out).iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_shapes_and_determinism() {
        let cfg = PTConfig::desk();
        let net = PhaseTransformer::<f32>::new(cfg, 11).unwrap();
        let img = random_image(64, 64, 3);
        let b = PhaseIndicator::from_phases(64, &[29, 30, 31, 32, 33, 34]).unwrap();
        let q1 = net.forward(&img, &b).unwrap();
        let q2 = net.forward(&img, &b).unwrap();
        assert_eq!(q1.len(), 58);
        assert_eq!(
            q1.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            q2.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn stack_preserves_shape() {
        let cfg = PTConfig {
            layers: 4,
            ..tiny(true)
        };
        let params = PTParams::<f32>::init(&cfg, 1).unwrap();
        let mut tape = Tape::inference();
        let bound = params.bind(&mut tape);
        let img = random_image(8, 8, 0);
        let mut x = embed(&mut tape, &bound, &cfg, &img, &PhaseIndicator::zeros(8)).unwrap();
        for lv in &bound.layers {
            x = transformer_layer(&mut tape, x, lv, &cfg).unwrap();
            assert_eq!(tape.shape(x), (cfg.tokens(), cfg.embed_dim));
        }
    }

    #[test]
    fn phase_token_ablation() {
        let img = random_image(8, 8, 5);
        let b1 = PhaseIndicator::from_phases(8, &[3, 4]).unwrap();
        let b2 = b1.set_indicator(0).unwrap();
        let off = PhaseTransformer::<f32>::new(tiny(false), 9).unwrap();
        assert_eq!(
            off.forward(&img, &b1).unwrap(),
            off.forward(&img, &b2).unwrap()
        );
        let on = PhaseTransformer::<f32>::new(tiny(true), 9).unwrap();
        assert_ne!(
            on.forward(&img, &b1).unwrap(),
            on.forward(&img, &b2).unwrap()
        );
    }

    #[test]
    fn every_parameter_group_gets_gradient() {
        let cfg = tiny(true);
        let params = PTParams::<f64>::init(&cfg, 2).unwrap();
        let mut hits = vec![0usize; params.named_tensors().len()];
        for trial in 0..5 {
            let img = RealImage::new(8, 8, {
                let mut rng = ChaCha8Rng::seed_from_u64(trial);
                (0..64).map(|_| rng.random::<f64>()).collect()
            })
            .unwrap();
            let b = PhaseIndicator::from_phases(8, &[3, 4, trial as usize % 3]).unwrap();
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let q = forward_on_tape(&mut tape, &bound, &cfg, &img, &b).unwrap();
            let picks: Vec<Var> = (0..cfg.actions())
                .map(|i| tape.pick(q, i).unwrap())
                .collect();
            let losses: Vec<Var> = picks
                .iter()
                .map(|&p| tape.smooth_l1(p, 0.3).unwrap())
                .collect();
            let loss = tape.sum(&losses).unwrap();
            let grads = tape.backward(loss).unwrap();
            for (i, v) in bound.all.iter().enumerate() {
                if grads.get(*v).is_some_and(|g| g.iter().any(|x| *x != 0.0)) {
                    hits[i] += 1;
                }
            }
        }
        let names = params.named_tensors();
        for (i, h) in hits.iter().enumerate() {
            assert!(*h > 0, "{} never received gradient", names[i].0);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("net.ptw");
        let net = PhaseTransformer::<f32>::new(tiny(true), 5).unwrap();
        let extra = vec![(
            "meta.episode".to_string(),
            Tensor::new(&[1], vec![12.0]).unwrap(),
        )];
        net.save(&path, &extra).unwrap();
        let (back, rest) = PhaseTransformer::<f32>::load(&path).unwrap();
        assert_eq!(back, net);
        assert_eq!(rest, extra);

        let other = PTConfig {
            embed_dim: 4,
            ..tiny(true)
        };
        let arrays: Vec<(String, Tensor<f32>)> = net
            .params
            .named_tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        assert!(matches!(
            PTParams::from_named(&other, &arrays),
            Err(Error::Config(_))
        ));
    }

    proptest::proptest! {
        #[test]
        fn patchify_round_trip(br in 1usize..4, bc in 1usize..4, ph in 1usize..5, pw in 1usize..5, seed in 0u64..1000) {
            let cfg = PTConfig {
                image_rows: br * ph,
                image_cols: bc * pw,
                patch_rows: ph,
                patch_cols: pw,
                embed_dim: 4,
                hidden_dim: 4,
                layers: 1,
                heads: 1,
                preselect: 0,
                phase_token: true,
            };
            let img = random_image(cfg.image_rows, cfg.image_cols, seed);
            let tokens = patchify(&img, &cfg).unwrap();
            proptest::prop_assert_eq!(tokens.len(), cfg.patches() * cfg.patch_len());
            proptest::prop_assert_eq!(unpatchify(&tokens, &cfg).unwrap(), img);
        }
    }
}
