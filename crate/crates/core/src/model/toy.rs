//! Desk-scale promptable backbone.
//!
//! Encoder: patch embedding, fixed 2-D sinusoidal positions and a stack of
//! pre-norm transformer blocks followed by a projection neck. Prompt encoder:
//! random Fourier features of the coordinates plus learned type embeddings
//! (positive point, negative point, box top-left, box bottom-right). Mask
//! decoder: two-way attention between prompt tokens and image tokens, then a
//! hypernetwork head mixing bilinearly upsampled coarse maps with a
//! full-resolution pixel branch.

use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use candle_core::{DType, Device, Tensor, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::lora::{linear, lora_linear_forward, LoraAdapter, LoraConfig};
use super::params::ParamStore;
use super::{ImageEmbedding, ModelConfig, PromptGroup, PromptableModel};
use crate::maskcore::Polarity;
use crate::raster::RgbImage;
use crate::{Error, Result};

static NEXT_MODEL_ID: AtomicU64 = AtomicU64::new(1);

const LN_EPS: f64 = 1e-5;
const PIXEL_MEAN: f32 = 0.5;
const PIXEL_STD: f32 = 0.25;
const PROMPT_MAPS: usize = 3;
/// Click maps use a Gaussian of width `input_size / CLICK_SIGMA_DIV`.
const CLICK_SIGMA_DIV: f32 = 12.0;

#[derive(Debug)]
pub struct ToyBackbone {
    config: ModelConfig,
    params: ParamStore,
    dtype: DType,
    seed: u64,
    lora_injected: bool,
    id: u64,
    encode_calls: AtomicUsize,
    decode_calls: AtomicUsize,
    /// `input × grid` bilinear interpolation matrix.
    upsample: Tensor,
}

fn sinusoidal_2d(grid: usize, dim: usize) -> Vec<f64> {
    // Half the channels encode the row, half the column.
    let quarter = dim / 4;
    let mut out = vec![0.0; grid * grid * dim];
    for r in 0..grid {
        for c in 0..grid {
            let base = (r * grid + c) * dim;
            for k in 0..quarter {
                let freq = 1.0 / 100f64.powf(k as f64 / quarter as f64);
                out[base + k] = (r as f64 * freq).sin();
                out[base + quarter + k] = (r as f64 * freq).cos();
                out[base + 2 * quarter + k] = (c as f64 * freq).sin();
                out[base + 3 * quarter + k] = (c as f64 * freq).cos();
            }
        }
    }
    out
}

fn upsample_matrix(src: usize, dst: usize) -> Vec<f64> {
    let mut m = vec![0.0; dst * src];
    let scale = src as f64 / dst as f64;
    for i in 0..dst {
        let x = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
        let x0 = x.floor() as usize;
        let x1 = (x0 + 1).min(src - 1);
        let f = x - x0 as f64;
        m[i * src + x0] += 1.0 - f;
        m[i * src + x1] += f;
    }
    m
}

fn softmax_last(x: &Tensor) -> Result<Tensor> {
    // Shift-invariance makes the detached max exact for gradients too.
    let m = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&m)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

impl ToyBackbone {
    /// Randomly initialised base model without adapters.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        Self::with_dtype(config, seed, DType::F32)
    }

    pub fn with_dtype(config: ModelConfig, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config, seed, dtype)?;
        Self::from_parts(config, params, dtype, seed, false)
    }

    pub(crate) fn from_parts(
        config: ModelConfig,
        params: ParamStore,
        dtype: DType,
        seed: u64,
        lora_injected: bool,
    ) -> Result<Self> {
        let grid = config.grid();
        let upsample = Tensor::from_vec(
            upsample_matrix(grid, config.input_size),
            (config.input_size, grid),
            &Device::Cpu,
        )?
        .to_dtype(dtype)?;
        Ok(Self {
            config,
            params,
            dtype,
            seed,
            lora_injected,
            id: NEXT_MODEL_ID.fetch_add(1, Ordering::Relaxed),
            encode_calls: AtomicUsize::new(0),
            decode_calls: AtomicUsize::new(0),
            upsample,
        })
    }

    /// Independent copy with its own parameter storage.
    pub fn try_clone(&self) -> Result<Self> {
        Self::from_parts(
            self.config.clone(),
            self.params.deep_clone()?,
            self.dtype,
            self.seed,
            self.lora_injected,
        )
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn lora_injected(&self) -> bool {
        self.lora_injected
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn encode_calls(&self) -> usize {
        self.encode_calls.load(Ordering::Relaxed)
    }

    pub fn decode_calls(&self) -> usize {
        self.decode_calls.load(Ordering::Relaxed)
    }

    fn p(&self, name: &str) -> Result<Tensor> {
        self.params.get(name)
    }

    /// Linear projection `prefix.w`/`prefix.b`, with the adapter path when
    /// `prefix.lora_a` exists.
    fn proj(&self, prefix: &str, x: &Tensor) -> Result<Tensor> {
        let w = self.p(&format!("{prefix}.w"))?;
        let b = self.p(&format!("{prefix}.b"))?;
        let a_name = format!("{prefix}.lora_a");
        if self.params.contains(&a_name) {
            let adapter = LoraAdapter {
                a: self.p(&a_name)?,
                b: self.p(&format!("{prefix}.lora_b"))?,
                rank: self.config.lora.rank,
                alpha: self.config.lora.alpha,
            };
            lora_linear_forward(&adapter, &w, Some(&b), x)
        } else {
            linear(x, &w, Some(&b))
        }
    }

    fn layer_norm(&self, prefix: &str, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + LN_EPS)?.sqrt()?)?;
        Ok(normed
            .broadcast_mul(&self.p(&format!("{prefix}.g"))?)?
            .broadcast_add(&self.p(&format!("{prefix}.b"))?)?)
    }

    fn mlp(&self, prefix: &str, x: &Tensor) -> Result<Tensor> {
        let h = self.proj(&format!("{prefix}.fc1"), x)?.gelu()?;
        self.proj(&format!("{prefix}.fc2"), &h)
    }

    fn attention(&self, prefix: &str, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<Tensor> {
        let heads = self.config.num_heads;
        let dim = self.config.embed_dim;
        let dh = dim / heads;
        let split = |t: Tensor| -> Result<Tensor> {
            let n = t.dims2()?.0;
            Ok(t.reshape((n, heads, dh))?.transpose(0, 1)?.contiguous()?)
        };
        let q = split(self.proj(&format!("{prefix}.q"), q)?)?;
        let k = split(self.proj(&format!("{prefix}.k"), k)?)?;
        let v = split(self.proj(&format!("{prefix}.v"), v)?)?;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (dh as f64).sqrt()))?;
        let out = softmax_last(&scores)?.matmul(&v)?;
        let n = out.dim(1)?;
        let out = out.transpose(0, 1)?.contiguous()?.reshape((n, dim))?;
        self.proj(&format!("{prefix}.o"), &out)
    }

    fn patchify(&self, image: &RgbImage) -> Result<(Tensor, Tensor)> {
        let s = self.config.input_size;
        if image.dims() != (s, s) {
            return Err(Error::shape((s, s), image.dims()));
        }
        let p = self.config.patch_size;
        let g = self.config.grid();
        let norm = |v: f32| (v - PIXEL_MEAN) / PIXEL_STD;
        let mut patches = Vec::with_capacity(g * g * p * p * 3);
        for gr in 0..g {
            for gc in 0..g {
                for r in 0..p {
                    for c in 0..p {
                        let px = image.pixel(gr * p + r, gc * p + c);
                        patches.extend(px.iter().map(|&v| norm(v)));
                    }
                }
            }
        }
        let pixels: Vec<f32> = image.data().iter().map(|&v| norm(v)).collect();
        let patches = Tensor::from_vec(patches, (g * g, p * p * 3), &Device::Cpu)?.to_dtype(self.dtype)?;
        let pixels = Tensor::from_vec(pixels, (s * s, 3), &Device::Cpu)?.to_dtype(self.dtype)?;
        Ok((patches, pixels))
    }

    /// Per-pixel click and box maps: positive clicks, negative clicks, box interior.
    fn prompt_maps(&self, prompts: &PromptGroup) -> Result<Tensor> {
        let s = self.config.input_size;
        let sigma = s as f32 / CLICK_SIGMA_DIV;
        let inv = 1.0 / (2.0 * sigma * sigma);
        let mut maps = vec![0f32; s * s * PROMPT_MAPS];
        for r in 0..s {
            for c in 0..s {
                let cell = &mut maps[(r * s + c) * PROMPT_MAPS..][..PROMPT_MAPS];
                for p in &prompts.points {
                    let (dr, dc) = (r as f32 - p.row as f32, c as f32 - p.col as f32);
                    let v = (-(dr * dr + dc * dc) * inv).exp();
                    let ch = match p.polarity {
                        Polarity::Positive => 0,
                        Polarity::Negative => 1,
                    };
                    cell[ch] = cell[ch].max(v);
                }
                if prompts
                    .boxes
                    .iter()
                    .any(|b| (b.row_min..=b.row_max).contains(&r) && (b.col_min..=b.col_max).contains(&c))
                {
                    cell[2] = 1.0;
                }
            }
        }
        Ok(Tensor::from_vec(maps, (s * s, PROMPT_MAPS), &Device::Cpu)?.to_dtype(self.dtype)?)
    }

    /// Random Fourier features of `(row, col)` pairs already scaled to `[0, 1]`.
    fn fourier(&self, coords: &[(f64, f64)]) -> Result<Tensor> {
        let n = coords.len();
        let flat: Vec<f64> = coords
            .iter()
            .flat_map(|&(r, c)| [2.0 * r - 1.0, 2.0 * c - 1.0])
            .collect();
        let xy = Tensor::from_vec(flat, (n, 2), &Device::Cpu)?.to_dtype(self.dtype)?;
        let proj = (xy.matmul(&self.p("pe.gauss")?)? * (2.0 * std::f64::consts::PI))?;
        Ok(Tensor::cat(&[proj.sin()?, proj.cos()?], 1)?)
    }

    fn grid_pe(&self) -> Result<Tensor> {
        let g = self.config.grid();
        let coords: Vec<(f64, f64)> = (0..g * g)
            .map(|i| {
                (
                    ((i / g) as f64 + 0.5) / g as f64,
                    ((i % g) as f64 + 0.5) / g as f64,
                )
            })
            .collect();
        self.fourier(&coords)
    }

    /// Sparse prompt tokens: one per point, two per box (corner order
    /// top-left, bottom-right).
    pub fn encode_prompts(&self, prompts: &PromptGroup) -> Result<Option<Tensor>> {
        let s = self.config.input_size;
        let scale = |v: usize| (v as f64 + 0.5) / s as f64;
        let mut coords = Vec::new();
        let mut kinds = Vec::new();
        for p in &prompts.points {
            if p.row >= s || p.col >= s {
                return Err(Error::OutOfRange(format!(
                    "point ({}, {}) outside {s}x{s} model input",
                    p.row, p.col
                )));
            }
            coords.push((scale(p.row), scale(p.col)));
            kinds.push(match p.polarity {
                Polarity::Positive => "pe.point_pos",
                Polarity::Negative => "pe.point_neg",
            });
        }
        for b in &prompts.boxes {
            if b.row_max >= s || b.col_max >= s || b.row_min > b.row_max || b.col_min > b.col_max {
                return Err(Error::OutOfRange(format!(
                    "box {b:?} outside {s}x{s} model input"
                )));
            }
            coords.push((scale(b.row_min), scale(b.col_min)));
            kinds.push("pe.box_tl");
            coords.push((scale(b.row_max), scale(b.col_max)));
            kinds.push("pe.box_br");
        }
        if coords.is_empty() {
            return Ok(None);
        }
        let pe = self.fourier(&coords)?;
        let types = kinds.iter().map(|k| self.p(k)).collect::<Result<Vec<_>>>()?;
        let types = Tensor::stack(&types, 0)?;
        Ok(Some((pe + types)?))
    }

    fn encode(&self, image: &RgbImage) -> Result<ImageEmbedding> {
        let (patches, pixels) = self.patchify(image)?;
        let mut x = linear(&patches, &self.p("enc.patch.w")?, Some(&self.p("enc.patch.b")?))?
            .broadcast_add(&self.p("enc.pos")?)?;
        for i in 0..self.config.encoder_depth {
            let pre = format!("enc.blocks.{i}");
            let h = self.layer_norm(&format!("{pre}.ln1"), &x)?;
            x = (x + self.attention(&format!("{pre}.attn"), &h, &h, &h)?)?;
            let h = self.layer_norm(&format!("{pre}.ln2"), &x)?;
            x = (x + self.mlp(&format!("{pre}.mlp"), &h)?)?;
        }
        let x = self.proj("enc.neck", &x)?;
        let features = self.layer_norm("enc.neck_ln", &x)?;
        Ok(ImageEmbedding {
            model_id: self.id,
            image_hash: image.content_hash(),
            grid: self.config.grid(),
            features,
            pixels,
        })
    }

    fn decode(&self, emb: &ImageEmbedding, prompts: &PromptGroup) -> Result<Tensor> {
        if emb.model_id != self.id {
            return Err(Error::Model(format!(
                "embedding from model {} passed to model {}",
                emb.model_id, self.id
            )));
        }
        let d = self.config.embed_dim;
        let g = self.config.grid();
        let s = self.config.input_size;
        let kp = self.config.pixel_channels;
        if emb.features.dims2()? != (g * g, d) {
            return Err(Error::Model(format!(
                "embedding shape {:?} does not match model grid {g}x{g}x{d}",
                emb.features.dims()
            )));
        }

        let mask_token = self.p("dec.mask_token")?;
        let tokens = match self.encode_prompts(prompts)? {
            Some(sparse) => Tensor::cat(&[&mask_token, &sparse], 0)?,
            None => mask_token,
        };
        let qpe = tokens.clone();
        let kpe = self.grid_pe()?;
        let mut q = tokens;
        let mut k = emb.features.clone();

        for j in 0..self.config.decoder_depth {
            let pre = format!("dec.blocks.{j}");
            q = if j == 0 {
                self.attention(&format!("{pre}.self_attn"), &q, &q, &q)?
            } else {
                let qq = (&q + &qpe)?;
                (&q + self.attention(&format!("{pre}.self_attn"), &qq, &qq, &q)?)?
            };
            q = self.layer_norm(&format!("{pre}.norm1"), &q)?;
            let kk = (&k + &kpe)?;
            q = (&q + self.attention(&format!("{pre}.t2i"), &(&q + &qpe)?, &kk, &k)?)?;
            q = self.layer_norm(&format!("{pre}.norm2"), &q)?;
            q = (&q + self.mlp(&format!("{pre}.mlp"), &q)?)?;
            q = self.layer_norm(&format!("{pre}.norm3"), &q)?;
            let qq = (&q + &qpe)?;
            k = (&k + self.attention(&format!("{pre}.i2t"), &(&k + &kpe)?, &qq, &q)?)?;
            k = self.layer_norm(&format!("{pre}.norm4"), &k)?;
        }
        let kk = (&k + &kpe)?;
        q = (&q + self.attention("dec.final_attn", &(&q + &qpe)?, &kk, &k)?)?;
        q = self.layer_norm("dec.final_norm", &q)?;

        let out_token = q.narrow(0, 0, 1)?;
        let hyper = self.mlp("dec.hyper", &out_token)?;
        let c = self.config.embed_dim / 4;
        let hyper = hyper.reshape((kp + 1, c))?;
        let coarse = self.proj("dec.coarse", &k)?; // (g², c)
        let maps = coarse.matmul(&hyper.t()?)?; // (g², kp+1)
        let maps = maps.t()?.contiguous()?.reshape((kp + 1, g, g))?;
        let up = self
            .upsample
            .unsqueeze(0)?
            .broadcast_as((kp + 1, s, g))?
            .contiguous()?;
        let up_t = up.transpose(1, 2)?.contiguous()?;
        let maps = up.matmul(&maps)?.matmul(&up_t)?; // (kp+1, s, s)

        let dense = Tensor::cat(&[&emb.pixels, &self.prompt_maps(prompts)?], 1)?;
        let pix = self.mlp("dec.pix", &dense)?; // (s², kp)
        let pix = pix.t()?.contiguous()?.reshape((kp, s, s))?;
        let base = maps.narrow(0, 0, 1)?.squeeze(0)?;
        let mixed = (maps.narrow(0, 1, kp)? * pix)?.sum(0)?;
        let logits = (base + mixed)?.broadcast_add(&self.p("dec.out_bias")?)?;
        Ok(logits)
    }
}

impl PromptableModel for ToyBackbone {
    fn input_size(&self) -> usize {
        self.config.input_size
    }

    fn encode_image(&self, image: &RgbImage) -> Result<ImageEmbedding> {
        self.encode_calls.fetch_add(1, Ordering::Relaxed);
        self.encode(image)
    }

    fn decode_mask(&self, embedding: &ImageEmbedding, prompts: &PromptGroup) -> Result<Tensor> {
        self.decode_calls.fetch_add(1, Ordering::Relaxed);
        self.decode(embedding, prompts)
    }
}

fn init_params(cfg: &ModelConfig, seed: u64, dtype: DType) -> Result<ParamStore> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut ps = ParamStore::new();
    let d = cfg.embed_dim;
    let p = cfg.patch_size;
    let g = cfg.grid();
    let kp = cfg.pixel_channels;

    let linear_init =
        |ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, d_out: usize, d_in: usize| -> Result<()> {
            ps.insert_normal(
                &format!("{name}.w"),
                &[d_out, d_in],
                1.0 / (d_in as f64).sqrt(),
                dtype,
                true,
                rng,
            )?;
            ps.insert_const(&format!("{name}.b"), &[d_out], 0.0, dtype, true)
        };
    let norm_init = |ps: &mut ParamStore, name: &str| -> Result<()> {
        ps.insert_const(&format!("{name}.g"), &[d], 1.0, dtype, true)?;
        ps.insert_const(&format!("{name}.b"), &[d], 0.0, dtype, true)
    };
    let attn_init = |ps: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str| -> Result<()> {
        for proj in ["q", "k", "v", "o"] {
            linear_init(ps, rng, &format!("{name}.{proj}"), d, d)?;
        }
        Ok(())
    };

    linear_init(&mut ps, &mut rng, "enc.patch", d, 3 * p * p)?;
    let pos = Tensor::from_vec(sinusoidal_2d(g, d), (g * g, d), &Device::Cpu)?.to_dtype(dtype)?;
    ps.insert("enc.pos", pos, true)?;
    for i in 0..cfg.encoder_depth {
        let pre = format!("enc.blocks.{i}");
        norm_init(&mut ps, &format!("{pre}.ln1"))?;
        attn_init(&mut ps, &mut rng, &format!("{pre}.attn"))?;
        norm_init(&mut ps, &format!("{pre}.ln2"))?;
        linear_init(&mut ps, &mut rng, &format!("{pre}.mlp.fc1"), cfg.mlp_dim, d)?;
        linear_init(&mut ps, &mut rng, &format!("{pre}.mlp.fc2"), d, cfg.mlp_dim)?;
    }
    linear_init(&mut ps, &mut rng, "enc.neck", d, d)?;
    norm_init(&mut ps, "enc.neck_ln")?;

    // Fourier projection is a fixed buffer, never trained.
    ps.insert_normal("pe.gauss", &[2, d / 2], 1.0, dtype, false, &mut rng)?;
    for name in ["pe.point_pos", "pe.point_neg", "pe.box_tl", "pe.box_br"] {
        ps.insert_normal(name, &[d], 1.0, dtype, true, &mut rng)?;
    }

    ps.insert_normal("dec.mask_token", &[1, d], 1.0, dtype, true, &mut rng)?;
    for j in 0..cfg.decoder_depth {
        let pre = format!("dec.blocks.{j}");
        attn_init(&mut ps, &mut rng, &format!("{pre}.self_attn"))?;
        norm_init(&mut ps, &format!("{pre}.norm1"))?;
        attn_init(&mut ps, &mut rng, &format!("{pre}.t2i"))?;
        norm_init(&mut ps, &format!("{pre}.norm2"))?;
        linear_init(
            &mut ps,
            &mut rng,
            &format!("{pre}.mlp.fc1"),
            cfg.decoder_mlp_dim,
            d,
        )?;
        linear_init(
            &mut ps,
            &mut rng,
            &format!("{pre}.mlp.fc2"),
            d,
            cfg.decoder_mlp_dim,
        )?;
        norm_init(&mut ps, &format!("{pre}.norm3"))?;
        attn_init(&mut ps, &mut rng, &format!("{pre}.i2t"))?;
        norm_init(&mut ps, &format!("{pre}.norm4"))?;
    }
    attn_init(&mut ps, &mut rng, "dec.final_attn")?;
    norm_init(&mut ps, "dec.final_norm")?;
    let c = d / 4;
    linear_init(&mut ps, &mut rng, "dec.hyper.fc1", d, d)?;
    linear_init(&mut ps, &mut rng, "dec.hyper.fc2", (kp + 1) * c, d)?;
    linear_init(&mut ps, &mut rng, "dec.coarse", c, d)?;
    linear_init(
        &mut ps,
        &mut rng,
        "dec.pix.fc1",
        cfg.pixel_hidden,
        3 + PROMPT_MAPS,
    )?;
    linear_init(&mut ps, &mut rng, "dec.pix.fc2", kp, cfg.pixel_hidden)?;
    ps.insert_const("dec.out_bias", &[1], 0.0, dtype, true)?;
    Ok(ps)
}

/// Freezes the image encoder and attaches low-rank adapters to the target
/// attention projections of every encoder block. Prompt encoder and mask
/// decoder stay trainable. Adapters start with `B = 0`, so the model's output
/// is unchanged by injection.
pub fn inject_lora(mut model: ToyBackbone, cfg: &LoraConfig) -> Result<ToyBackbone> {
    if model.lora_injected {
        return Err(Error::Config("model already carries lora adapters".into()));
    }
    let mut config = model.config.clone();
    config.lora = cfg.clone();
    config.validate()?;
    for i in 0..config.encoder_depth {
        for t in &cfg.targets {
            let prefix = format!("enc.blocks.{i}.attn.{t}");
            if !model.params.contains(&format!("{prefix}.w")) {
                return Err(Error::Config(format!("unknown lora target {prefix}")));
            }
        }
    }

    let names: Vec<String> = model
        .params
        .names()
        .filter(|n| n.starts_with("enc."))
        .cloned()
        .collect();
    for n in names {
        model.params.set_trainable(&n, false);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(model.seed ^ 0x4c6f_5241);
    let d = config.embed_dim;
    let r = cfg.rank;
    for i in 0..config.encoder_depth {
        for t in &cfg.targets {
            let prefix = format!("enc.blocks.{i}.attn.{t}");
            model.params.insert_normal(
                &format!("{prefix}.lora_a"),
                &[r, d],
                1.0 / r as f64,
                model.dtype,
                true,
                &mut rng,
            )?;
            model
                .params
                .insert_const(&format!("{prefix}.lora_b"), &[d, r], 0.0, model.dtype, true)?;
        }
    }
    model.config = config;
    model.lora_injected = true;
    Ok(model)
}
