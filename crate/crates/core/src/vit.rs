//! Vision Transformer encoder: patch embedding with a class token and learned
//! positions, a stack of pre-norm attention/MLP blocks, and a final norm
//! whose class-token row is the image representation.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the truncated-normal initializer.
pub const INIT_STD: f64 = 0.02;

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub patch_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_width: usize,
    pub num_attributes: usize,
}

impl ModelConfig {
    /// ViT-Large at 224×224 with 16×16 patches.
    pub fn vit_large(num_attributes: usize) -> Self {
        ModelConfig {
            image_height: 224,
            image_width: 224,
            channels: 3,
            patch_size: 16,
            dim: 1024,
            depth: 24,
            heads: 16,
            mlp_width: 4096,
            num_attributes,
        }
    }

    /// The small configuration used for gradient checks.
    pub fn tiny(num_attributes: usize) -> Self {
        ModelConfig {
            image_height: 16,
            image_width: 16,
            channels: 3,
            patch_size: 8,
            dim: 8,
            depth: 2,
            heads: 2,
            mlp_width: 32,
            num_attributes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_height", self.image_height),
            ("image_width", self.image_width),
            ("channels", self.channels),
            ("patch_size", self.patch_size),
            ("dim", self.dim),
            ("heads", self.heads),
            ("mlp_width", self.mlp_width),
            ("num_attributes", self.num_attributes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if !self.image_height.is_multiple_of(self.patch_size)
            || !self.image_width.is_multiple_of(self.patch_size)
        {
            return Err(Error::Config(format!(
                "image {}x{} is not divisible into {}-pixel patches",
                self.image_height, self.image_width, self.patch_size
            )));
        }
        if !self.dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }

    /// Patch grid as (rows, cols).
    pub fn grid(&self) -> (usize, usize) {
        (
            self.image_height / self.patch_size,
            self.image_width / self.patch_size,
        )
    }

    pub fn num_patches(&self) -> usize {
        let (r, c) = self.grid();
        r * c
    }

    /// Token count including the class token.
    pub fn seq_len(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        self.patch_size * self.patch_size * self.channels
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.image_height, self.image_width, self.channels]
    }

    /// Closed-form parameter count.
    pub fn param_count(&self) -> usize {
        let (d, mlp, m) = (self.dim, self.mlp_width, self.num_attributes);
        let per_layer = 4 * d + 3 * (d * d + d) + (d * d + d) + (d * mlp + mlp) + (mlp * d + d);
        (self.patch_dim() + 1) * d
            + d
            + self.seq_len() * d
            + self.depth * per_layer
            + 2 * d
            + (d * m + m)
    }
}

macro_rules! param_struct {
    ($(#[$meta:meta])* $name:ident { $($field:ident),* $(,)? }) => {
        $(#[$meta])*
        #[derive(Clone, Debug, PartialEq)]
        pub struct $name<T> {
            $(pub $field: T,)*
        }

        impl<T> $name<T> {
            /// Applies `f` to every field in declaration order.
            pub fn map<'s, U>(&'s self, prefix: &str, f: &mut impl FnMut(&str, &'s T) -> U) -> $name<U> {
                $name {
                    $($field: f(&format!("{prefix}{}", stringify!($field)), &self.$field),)*
                }
            }

            fn visit<'s>(&'s self, prefix: &str, out: &mut Vec<(String, &'s T)>) {
                $(out.push((format!("{prefix}{}", stringify!($field)), &self.$field));)*
            }

            fn visit_mut<'s>(&'s mut self, prefix: &str, out: &mut Vec<(String, &'s mut T)>) {
                $(out.push((format!("{prefix}{}", stringify!($field)), &mut self.$field));)*
            }
        }
    };
}

param_struct!(
    /// Parameters of one encoder block. Weight matrices are stored `[in × out]`.
    LayerParams {
        norm1_gain,
        norm1_bias,
        q_weight,
        q_bias,
        k_weight,
        k_bias,
        v_weight,
        v_bias,
        out_weight,
        out_bias,
        norm2_gain,
        norm2_bias,
        mlp_in_weight,
        mlp_in_bias,
        mlp_out_weight,
        mlp_out_bias,
    }
);

param_struct!(
    /// Parameters before the block stack.
    EmbedParams {
        patch_weight,
        patch_bias,
        class_token,
        pos_embed,
    }
);

param_struct!(
    /// Final norm and attribute regression head.
    HeadParams {
        final_norm_gain,
        final_norm_bias,
        head_weight,
        head_bias,
    }
);

/// Every learnable parameter of the model, generic over the leaf type so the
/// same structure holds tensors, tape handles, or shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct VitParams<T> {
    pub embed: EmbedParams<T>,
    pub layers: Vec<LayerParams<T>>,
    pub head: HeadParams<T>,
}

pub type VitWeights = VitParams<Tensor>;

impl<T> VitParams<T> {
    /// Applies `f` to every parameter in canonical order.
    pub fn map<'s, U>(&'s self, f: &mut impl FnMut(&str, &'s T) -> U) -> VitParams<U> {
        VitParams {
            embed: self.embed.map("", f),
            layers: self
                .layers
                .iter()
                .enumerate()
                .map(|(i, l)| l.map(&format!("layers.{i}."), f))
                .collect(),
            head: self.head.map("", f),
        }
    }

    /// Parameters with their names, in canonical order.
    pub fn named(&self) -> Vec<(String, &T)> {
        let mut out = Vec::new();
        self.embed.visit("", &mut out);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&format!("layers.{i}."), &mut out);
        }
        self.head.visit("", &mut out);
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut T)> {
        let mut out = Vec::new();
        self.embed.visit_mut("", &mut out);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&format!("layers.{i}."), &mut out);
        }
        self.head.visit_mut("", &mut out);
        out
    }

    /// Rebuilds the structure of `self` from values given in canonical order.
    pub fn rebuild<U>(&self, values: Vec<U>) -> Result<VitParams<U>> {
        let expected = self.named().len();
        if values.len() != expected {
            return Err(Error::Contract(format!(
                "expected {expected} parameter blocks, got {}",
                values.len()
            )));
        }
        let mut it = values.into_iter();
        Ok(self.map(&mut |_, _| it.next().expect("length checked")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    TruncNormal,
    Zeros,
    Ones,
}

/// Shape and initializer of every parameter for `cfg`.
pub fn layout(cfg: &ModelConfig) -> VitParams<(Vec<usize>, Init)> {
    use Init::*;
    let (d, mlp) = (cfg.dim, cfg.mlp_width);
    let layer = LayerParams {
        norm1_gain: (vec![d], Ones),
        norm1_bias: (vec![d], Zeros),
        q_weight: (vec![d, d], TruncNormal),
        q_bias: (vec![d], Zeros),
        k_weight: (vec![d, d], TruncNormal),
        k_bias: (vec![d], Zeros),
        v_weight: (vec![d, d], TruncNormal),
        v_bias: (vec![d], Zeros),
        out_weight: (vec![d, d], TruncNormal),
        out_bias: (vec![d], Zeros),
        norm2_gain: (vec![d], Ones),
        norm2_bias: (vec![d], Zeros),
        mlp_in_weight: (vec![d, mlp], TruncNormal),
        mlp_in_bias: (vec![mlp], Zeros),
        mlp_out_weight: (vec![mlp, d], TruncNormal),
        mlp_out_bias: (vec![d], Zeros),
    };
    VitParams {
        embed: EmbedParams {
            patch_weight: (vec![cfg.patch_dim(), d], TruncNormal),
            patch_bias: (vec![d], Zeros),
            class_token: (vec![d], TruncNormal),
            pos_embed: (vec![cfg.seq_len(), d], TruncNormal),
        },
        layers: vec![layer; cfg.depth],
        head: HeadParams {
            final_norm_gain: (vec![d], Ones),
            final_norm_bias: (vec![d], Zeros),
            head_weight: (vec![d, cfg.num_attributes], TruncNormal),
            head_bias: (vec![cfg.num_attributes], Zeros),
        },
    }
}

/// Normal sample rejected outside ±2σ.
pub fn trunc_normal<R: Rng>(rng: &mut R, std: f64) -> Scalar {
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= 2.0 {
            return (z * std) as Scalar;
        }
    }
}

impl VitWeights {
    /// Seeded initialization: truncated normal (σ = 0.02) for projections,
    /// class token and positions; zeros for biases; unit norm gains.
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(layout(cfg).map(&mut |_, (shape, init)| match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::TruncNormal => {
                let n = shape.iter().product();
                let data = (0..n).map(|_| trunc_normal(&mut rng, INIT_STD)).collect();
                Tensor::new(shape, data).expect("layout shape")
            }
        }))
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.numel()).sum()
    }

    /// Checks that every parameter has the shape `cfg` prescribes.
    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let want = layout(cfg);
        let want = want.named();
        let have = self.named();
        if want.len() != have.len() {
            return Err(Error::Config(format!(
                "expected {} parameter blocks, found {}",
                want.len(),
                have.len()
            )));
        }
        for ((name, (shape, _)), (_, t)) in want.iter().zip(&have) {
            if t.shape() != &shape[..] {
                return Err(Error::Config(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }
}

/// Splits an `H×W×C` image into `N` row-major patches, each flattened
/// pixel-row by pixel-row with channels innermost.
pub fn patchify(image: &Tensor, patch: usize) -> Result<Tensor> {
    let (h, w, c) = match image.shape() {
        &[h, w, c] => (h, w, c),
        s => return Err(Error::dim("patchify", s, &[0, 0, 0])),
    };
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(Error::Config(format!(
            "image {h}x{w} is not divisible into {patch}-pixel patches"
        )));
    }
    let (gh, gw) = (h / patch, w / patch);
    let row_len = patch * c;
    let mut out = Vec::with_capacity(image.numel());
    let src = image.data();
    for py in 0..gh {
        for px in 0..gw {
            for dy in 0..patch {
                let start = ((py * patch + dy) * w + px * patch) * c;
                out.extend_from_slice(&src[start..start + row_len]);
            }
        }
    }
    Tensor::new(&[gh * gw, patch * patch * c], out)
}

/// Inverse of [`patchify`].
pub fn unpatchify(patches: &Tensor, patch: usize, h: usize, w: usize, c: usize) -> Result<Tensor> {
    let (gh, gw) = (h / patch, w / patch);
    if patches.shape() != [gh * gw, patch * patch * c] {
        return Err(Error::dim(
            "unpatchify",
            patches.shape(),
            &[gh * gw, patch * patch * c],
        ));
    }
    let mut out = vec![0.0; h * w * c];
    let row_len = patch * c;
    for (i, p) in patches.data().chunks(patch * patch * c).enumerate() {
        let (py, px) = (i / gw, i % gw);
        for dy in 0..patch {
            let start = ((py * patch + dy) * w + px * patch) * c;
            out[start..start + row_len].copy_from_slice(&p[dy * row_len..(dy + 1) * row_len]);
        }
    }
    Tensor::new(&[h, w, c], out)
}

/// `[x_class; patches·E + b] + E_pos`, class token at index 0.
pub fn embed_sequence(tape: &mut Tape<'_>, patches: Var, embed: &EmbedParams<Var>) -> Result<Var> {
    let proj = tape.matmul(patches, embed.patch_weight)?;
    let proj = tape.add_row(proj, embed.patch_bias)?;
    let seq = tape.concat_rows(&[embed.class_token, proj])?;
    tape.add(seq, embed.pos_embed)
}

/// Multi-head scaled dot-product self-attention over `x: [T×D]`.
///
/// Returns the projected output and one `[T×T]` probability matrix per head.
pub fn multi_head_attention(
    tape: &mut Tape<'_>,
    x: Var,
    layer: &LayerParams<Var>,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let d = tape.shape(x)[1];
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(Error::Config(format!(
            "dim {d} is not divisible by {heads} heads"
        )));
    }
    let dk = d / heads;
    let q = tape.matmul(x, layer.q_weight)?;
    let q = tape.add_row(q, layer.q_bias)?;
    let k = tape.matmul(x, layer.k_weight)?;
    let k = tape.add_row(k, layer.k_bias)?;
    let v = tape.matmul(x, layer.v_weight)?;
    let v = tape.add_row(v, layer.v_bias)?;
    let scale = 1.0 / (dk as Scalar).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax_rows(scores)?;
        outs.push(tape.matmul(attn, vh)?);
        probs.push(attn);
    }
    let cat = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    let out = tape.matmul(cat, layer.out_weight)?;
    Ok((tape.add_row(out, layer.out_bias)?, probs))
}

/// One pre-norm block: `z' = MHA(Norm(x)) + x`, `out = MLP(Norm(z')) + z'`.
pub fn encoder_block(
    tape: &mut Tape<'_>,
    x: Var,
    layer: &LayerParams<Var>,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let h = tape.layer_norm(x, layer.norm1_gain, layer.norm1_bias, LAYER_NORM_EPS)?;
    let (attn_out, probs) = multi_head_attention(tape, h, layer, heads)?;
    let mid = tape.add(attn_out, x)?;
    let h = tape.layer_norm(mid, layer.norm2_gain, layer.norm2_bias, LAYER_NORM_EPS)?;
    let h = tape.matmul(h, layer.mlp_in_weight)?;
    let h = tape.add_row(h, layer.mlp_in_bias)?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, layer.mlp_out_weight)?;
    let h = tape.add_row(h, layer.mlp_out_bias)?;
    Ok((tape.add(h, mid)?, probs))
}

/// Attention probabilities of every layer plus the final token states.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderTrace {
    /// One `[heads × T × T]` tensor per layer.
    pub attention: Vec<Tensor>,
    /// `[T × D]` token states after the last block, before the final norm.
    pub tokens: Tensor,
    /// Patch grid (rows, cols).
    pub grid: (usize, usize),
}

impl EncoderTrace {
    /// `[L, heads, T, T]`.
    pub fn shape(&self) -> Vec<usize> {
        let mut s = vec![self.attention.len()];
        if let Some(a) = self.attention.first() {
            s.extend_from_slice(a.shape());
        }
        s
    }

    fn stack_heads(tape: &Tape<'_>, probs: &[Var]) -> Tensor {
        let t = tape.shape(probs[0])[0];
        let data = probs
            .iter()
            .flat_map(|p| tape.value(*p).data().iter().copied())
            .collect();
        Tensor::new(&[probs.len(), t, t], data).expect("attention shape")
    }
}

/// Result of recording an encoder pass on a tape.
pub struct EncodedVars {
    /// Final-normed class token, `[D]`.
    pub repr: Var,
    pub trace: EncoderTrace,
}

fn check_image(cfg: &ModelConfig, image: &Tensor) -> Result<()> {
    if image.shape() != cfg.image_shape() {
        return Err(Error::dim("encode", image.shape(), &cfg.image_shape()));
    }
    Ok(())
}

/// Records the full encoder on `tape`.
pub fn encode_on_tape(
    tape: &mut Tape<'_>,
    cfg: &ModelConfig,
    vars: &VitParams<Var>,
    image: &Tensor,
) -> Result<EncodedVars> {
    check_image(cfg, image)?;
    let patches = tape.constant(patchify(image, cfg.patch_size)?);
    let mut z = embed_sequence(tape, patches, &vars.embed)?;
    let mut attention = Vec::with_capacity(vars.layers.len());
    for layer in &vars.layers {
        let (out, probs) = encoder_block(tape, z, layer, cfg.heads)?;
        attention.push(EncoderTrace::stack_heads(tape, &probs));
        z = out;
    }
    let tokens = tape.value(z).clone();
    let normed = tape.layer_norm(
        z,
        vars.head.final_norm_gain,
        vars.head.final_norm_bias,
        LAYER_NORM_EPS,
    )?;
    let repr = tape.row(normed, 0)?;
    Ok(EncodedVars {
        repr,
        trace: EncoderTrace {
            attention,
            tokens,
            grid: cfg.grid(),
        },
    })
}

/// Attribute head `repr·W_head + b` on a `[D]` representation, giving `[M]`.
pub fn apply_head(tape: &mut Tape<'_>, repr: Var, head: &HeadParams<Var>) -> Result<Var> {
    let d = tape.shape(repr)[0];
    let x = tape.reshape(repr, &[1, d])?;
    let y = tape.matmul(x, head.head_weight)?;
    let y = tape.add_row(y, head.head_bias)?;
    let m = tape.shape(y)[1];
    tape.reshape(y, &[m])
}

/// A configured model and its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Vit {
    pub config: ModelConfig,
    pub weights: VitWeights,
}

impl Vit {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let weights = VitWeights::init(&config, seed)?;
        Ok(Vit { config, weights })
    }

    pub fn from_weights(config: ModelConfig, weights: VitWeights) -> Result<Self> {
        config.validate()?;
        weights.check_shapes(&config)?;
        Ok(Vit { config, weights })
    }

    /// Registers every weight on `tape` as a borrowed trainable leaf.
    pub fn bind<'w>(&'w self, tape: &mut Tape<'w>) -> VitParams<Var> {
        self.weights.map(&mut |_, t| tape.param(t))
    }

    /// Inference pass returning the image representation `[D]` and the
    /// attention trace. Each stage runs on its own short-lived tape, so
    /// memory stays bounded by one block's activations.
    pub fn encode(&self, image: &Tensor) -> Result<(Tensor, EncoderTrace)> {
        check_image(&self.config, image)?;
        let mut z = {
            let mut tape = Tape::new();
            let embed = self.weights.embed.map("", &mut |_, t| tape.constant_ref(t));
            let patches = tape.constant(patchify(image, self.config.patch_size)?);
            let z = embed_sequence(&mut tape, patches, &embed)?;
            tape.value(z).clone()
        };
        let mut attention = Vec::with_capacity(self.config.depth);
        for layer in &self.weights.layers {
            let mut tape = Tape::new();
            let lv = layer.map("", &mut |_, t| tape.constant_ref(t));
            let x = tape.constant(z);
            let (out, probs) = encoder_block(&mut tape, x, &lv, self.config.heads)?;
            attention.push(EncoderTrace::stack_heads(&tape, &probs));
            z = tape.value(out).clone();
        }
        let mut tape = Tape::new();
        let head = &self.weights.head;
        let x = tape.constant(z.clone());
        let gain = tape.constant_ref(&head.final_norm_gain);
        let bias = tape.constant_ref(&head.final_norm_bias);
        let normed = tape.layer_norm(x, gain, bias, LAYER_NORM_EPS)?;
        let repr = tape.row(normed, 0)?;
        Ok((
            tape.value(repr).clone(),
            EncoderTrace {
                attention,
                tokens: z,
                grid: self.config.grid(),
            },
        ))
    }
}
