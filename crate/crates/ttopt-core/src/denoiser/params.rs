//! Base parameter containers, initialization, flat visitors, and the
//! checkpoint file format (fixed header + little-endian f32 blobs in
//! declaration order).

use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use std::io::{Read, Write};
use std::path::Path;

use super::{DenoiserConfig, DenoiserError, NoiseSchedule};
use crate::tokenizer::fnv1a64;

#[derive(Debug, Clone)]
pub struct LnParams {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct AttnParams {
    pub wq: Array2<f64>,
    pub wk: Array2<f64>,
    pub wv: Array2<f64>,
    pub wo: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct MlpParams {
    pub w1: Array2<f64>,
    pub w2: Array2<f64>,
}

#[derive(Debug, Clone)]
pub struct BlockParams {
    pub ln1: LnParams,
    pub self_attn: AttnParams,
    pub ln2: LnParams,
    pub cross_attn: AttnParams,
    pub ln3: LnParams,
    pub mlp: MlpParams,
}

/// All base weights. Visitor order is declaration order and defines the
/// serialization layout.
#[derive(Debug, Clone)]
pub struct Params {
    pub text_embed: Array2<f64>,
    pub text_pos: Array2<f64>,
    pub ln_text: LnParams,
    pub latent_pos: Array2<f64>,
    pub time_proj: Array2<f64>,
    pub blocks: Vec<BlockParams>,
    pub ln_out: LnParams,
    pub w_out: Array2<f64>,
}

impl LnParams {
    fn unit(d: usize) -> Self {
        LnParams { gamma: Array1::ones(d), beta: Array1::zeros(d) }
    }

    fn zeros(d: usize) -> Self {
        LnParams { gamma: Array1::zeros(d), beta: Array1::zeros(d) }
    }
}

impl Params {
    /// Random initialization: projection weights at std `1/sqrt(fan_in)`,
    /// embeddings at std 1 (layer norms rescale them downstream).
    pub fn init(cfg: &DenoiserConfig, seed: u64) -> Self {
        let d = cfg.dim;
        let n = cfg.latent_cells();
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut gauss = |shape: (usize, usize), std: f64| -> Array2<f64> {
            let dist = Normal::new(0.0, std).unwrap();
            Array2::from_shape_fn(shape, |_| dist.sample(&mut rng))
        };
        let proj_std = 1.0 / (d as f64).sqrt();
        let blocks = (0..cfg.blocks)
            .map(|_| BlockParams {
                ln1: LnParams::unit(d),
                self_attn: AttnParams {
                    wq: gauss((d, d), proj_std),
                    wk: gauss((d, d), proj_std),
                    wv: gauss((d, d), proj_std),
                    wo: gauss((d, d), proj_std),
                },
                ln2: LnParams::unit(d),
                cross_attn: AttnParams {
                    wq: gauss((d, d), proj_std),
                    wk: gauss((d, d), proj_std),
                    wv: gauss((d, d), proj_std),
                    wo: gauss((d, d), proj_std),
                },
                ln3: LnParams::unit(d),
                mlp: MlpParams {
                    w1: gauss((d, 4 * d), proj_std),
                    w2: gauss((4 * d, d), 1.0 / (4.0 * d as f64).sqrt()),
                },
            })
            .collect();
        Params {
            text_embed: gauss((cfg.vocab, d), 1.0),
            text_pos: gauss((cfg.text_len, d), 1.0),
            ln_text: LnParams::unit(d),
            latent_pos: gauss((n, d), 1.0),
            time_proj: gauss((d, d), proj_std),
            blocks,
            ln_out: LnParams::unit(d),
            w_out: gauss((d, d), proj_std),
        }
    }

    /// All-zero mirror, used as a gradient container.
    pub fn zeros_like(cfg: &DenoiserConfig) -> Self {
        let d = cfg.dim;
        let n = cfg.latent_cells();
        let z2 = |shape: (usize, usize)| Array2::<f64>::zeros(shape);
        let blocks = (0..cfg.blocks)
            .map(|_| BlockParams {
                ln1: LnParams::zeros(d),
                self_attn: AttnParams { wq: z2((d, d)), wk: z2((d, d)), wv: z2((d, d)), wo: z2((d, d)) },
                ln2: LnParams::zeros(d),
                cross_attn: AttnParams { wq: z2((d, d)), wk: z2((d, d)), wv: z2((d, d)), wo: z2((d, d)) },
                ln3: LnParams::zeros(d),
                mlp: MlpParams { w1: z2((d, 4 * d)), w2: z2((4 * d, d)) },
            })
            .collect();
        Params {
            text_embed: z2((cfg.vocab, d)),
            text_pos: z2((cfg.text_len, d)),
            ln_text: LnParams::zeros(d),
            latent_pos: z2((n, d)),
            time_proj: z2((d, d)),
            blocks,
            ln_out: LnParams::zeros(d),
            w_out: z2((d, d)),
        }
    }

    /// Visit every parameter slice in declaration order.
    pub fn for_each(&self, f: &mut dyn FnMut(&[f64])) {
        let ln = |ln: &LnParams, f: &mut dyn FnMut(&[f64])| {
            f(ln.gamma.as_slice().unwrap());
            f(ln.beta.as_slice().unwrap());
        };
        f(self.text_embed.as_slice().unwrap());
        f(self.text_pos.as_slice().unwrap());
        ln(&self.ln_text, f);
        f(self.latent_pos.as_slice().unwrap());
        f(self.time_proj.as_slice().unwrap());
        for b in &self.blocks {
            ln(&b.ln1, f);
            f(b.self_attn.wq.as_slice().unwrap());
            f(b.self_attn.wk.as_slice().unwrap());
            f(b.self_attn.wv.as_slice().unwrap());
            f(b.self_attn.wo.as_slice().unwrap());
            ln(&b.ln2, f);
            f(b.cross_attn.wq.as_slice().unwrap());
            f(b.cross_attn.wk.as_slice().unwrap());
            f(b.cross_attn.wv.as_slice().unwrap());
            f(b.cross_attn.wo.as_slice().unwrap());
            ln(&b.ln3, f);
            f(b.mlp.w1.as_slice().unwrap());
            f(b.mlp.w2.as_slice().unwrap());
        }
        ln(&self.ln_out, f);
        f(self.w_out.as_slice().unwrap());
    }

    /// Mutable visitor, same order as [`Params::for_each`].
    pub fn for_each_mut(&mut self, f: &mut dyn FnMut(&mut [f64])) {
        let ln = |ln: &mut LnParams, f: &mut dyn FnMut(&mut [f64])| {
            f(ln.gamma.as_slice_mut().unwrap());
            f(ln.beta.as_slice_mut().unwrap());
        };
        f(self.text_embed.as_slice_mut().unwrap());
        f(self.text_pos.as_slice_mut().unwrap());
        ln(&mut self.ln_text, f);
        f(self.latent_pos.as_slice_mut().unwrap());
        f(self.time_proj.as_slice_mut().unwrap());
        for b in &mut self.blocks {
            ln(&mut b.ln1, f);
            f(b.self_attn.wq.as_slice_mut().unwrap());
            f(b.self_attn.wk.as_slice_mut().unwrap());
            f(b.self_attn.wv.as_slice_mut().unwrap());
            f(b.self_attn.wo.as_slice_mut().unwrap());
            ln(&mut b.ln2, f);
            f(b.cross_attn.wq.as_slice_mut().unwrap());
            f(b.cross_attn.wk.as_slice_mut().unwrap());
            f(b.cross_attn.wv.as_slice_mut().unwrap());
            f(b.cross_attn.wo.as_slice_mut().unwrap());
            ln(&mut b.ln3, f);
            f(b.mlp.w1.as_slice_mut().unwrap());
            f(b.mlp.w2.as_slice_mut().unwrap());
        }
        ln(&mut self.ln_out, f);
        f(self.w_out.as_slice_mut().unwrap());
    }

    /// Total scalar count.
    pub fn len(&self) -> usize {
        let mut n = 0;
        self.for_each(&mut |s| n += s.len());
        n
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bit-level hash of every parameter, for immutability checks.
    pub fn checksum(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        self.for_each(&mut |s| {
            for v in s {
                h ^= fnv1a64(&v.to_le_bytes());
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        });
        h
    }
}

const CKPT_MAGIC: &[u8; 8] = b"TTOPCKPT";
const CKPT_VERSION: u32 = 1;

/// Write config header plus parameters as little-endian f32.
pub fn save_checkpoint(cfg: &DenoiserConfig, params: &Params, path: &Path) -> Result<(), DenoiserError> {
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    file.write_all(CKPT_MAGIC)?;
    file.write_all(&CKPT_VERSION.to_le_bytes())?;
    let (tau, h, w) = cfg.latent_dims;
    let fields = [
        tau as u32,
        h as u32,
        w as u32,
        cfg.dim as u32,
        cfg.blocks as u32,
        cfg.heads as u32,
        cfg.text_len as u32,
        cfg.vocab as u32,
        cfg.sampler_steps as u32,
        cfg.schedule as u32,
    ];
    for v in fields {
        file.write_all(&v.to_le_bytes())?;
    }
    file.write_all(&cfg.seed.to_le_bytes())?;
    let mut io_err = None;
    params.for_each(&mut |s| {
        if io_err.is_some() {
            return;
        }
        for &v in s {
            if let Err(e) = file.write_all(&(v as f32).to_le_bytes()) {
                io_err = Some(e);
                return;
            }
        }
    });
    match io_err {
        Some(e) => Err(e.into()),
        None => Ok(()),
    }
}

/// Read a checkpoint back into `(config, params)`.
pub fn load_checkpoint(path: &Path) -> Result<(DenoiserConfig, Params), DenoiserError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    file.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(DenoiserError::BadCheckpoint("magic mismatch".into()));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |file: &mut dyn Read| -> Result<u32, DenoiserError> {
        file.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = read_u32(&mut file)?;
    if version != CKPT_VERSION {
        return Err(DenoiserError::BadCheckpoint(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut fields = [0u32; 10];
    for f in &mut fields {
        *f = read_u32(&mut file)?;
    }
    let mut seedbuf = [0u8; 8];
    file.read_exact(&mut seedbuf)?;
    let schedule = match fields[9] {
        0 => NoiseSchedule::RectifiedLinear,
        other => {
            return Err(DenoiserError::BadCheckpoint(format!("unknown schedule {other}")))
        }
    };
    let cfg = DenoiserConfig {
        latent_dims: (fields[0] as usize, fields[1] as usize, fields[2] as usize),
        dim: fields[3] as usize,
        blocks: fields[4] as usize,
        heads: fields[5] as usize,
        text_len: fields[6] as usize,
        vocab: fields[7] as usize,
        sampler_steps: fields[8] as usize,
        schedule,
        seed: u64::from_le_bytes(seedbuf),
    };
    cfg.validate()?;
    let mut params = Params::zeros_like(&cfg);
    let mut read_err: Option<DenoiserError> = None;
    params.for_each_mut(&mut |s| {
        if read_err.is_some() {
            return;
        }
        let mut f32buf = [0u8; 4];
        for v in s.iter_mut() {
            match file.read_exact(&mut f32buf) {
                Ok(()) => *v = f32::from_le_bytes(f32buf) as f64,
                Err(e) => {
                    read_err = Some(e.into());
                    return;
                }
            }
        }
    });
    if let Some(e) = read_err {
        return Err(e);
    }
    let mut trailing = Vec::new();
    file.read_to_end(&mut trailing)?;
    if !trailing.is_empty() {
        return Err(DenoiserError::BadCheckpoint(format!(
            "{} trailing bytes",
            trailing.len()
        )));
    }
    Ok((cfg, params))
}
