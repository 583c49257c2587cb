//! Entropy model definition: hyperparameters, parameter registration,
//! deterministic initialization, and the versioned checkpoint container.

use std::io::Write;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha20Rng;

use crate::error::{LoccError, Result};
use crate::tensor::{ParamId, ParamStore, Tensor};

pub const OCCUPANCY_VOCAB: usize = 256; // symbol 0 is ancestor padding / mask
pub const HEAD_CLASSES: usize = 255; // coded symbols 1..=255

const CKPT_MAGIC: &[u8; 8] = b"LOCCKPT\x01";

/// Model hyperparameters. Serialized into the checkpoint preamble; a
/// mismatch between checkpoint and bitstream digest is a hard decode error.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    /// Feature width d.
    pub embed_dim: usize,
    /// Attention layers N.
    pub layers: usize,
    /// Attention heads H.
    pub heads: usize,
    /// Feed-forward hidden width.
    pub ffn_dim: usize,
    /// Graph neighbors k.
    pub knn: usize,
    /// Ancestor generations G.
    pub ancestors: usize,
    pub ancestor_dim: usize,
    pub octant_dim: usize,
    pub level_dim: usize,
    /// Largest octree depth the level embedding covers.
    pub max_depth: usize,
    /// Baseline variant whose backbone consumes masked current-level
    /// symbols and must rerun per stage.
    pub fully_causal: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 128,
            layers: 3,
            heads: 4,
            ffn_dim: 256,
            knn: 8,
            ancestors: 3,
            ancestor_dim: 32,
            octant_dim: 16,
            level_dim: 16,
            max_depth: 21,
            fully_causal: false,
        }
    }
}

impl ModelConfig {
    /// Small configuration for tests and quick experiments.
    pub fn tiny() -> Self {
        Self {
            embed_dim: 16,
            layers: 1,
            heads: 2,
            ffn_dim: 32,
            knn: 4,
            ancestors: 3,
            ancestor_dim: 8,
            octant_dim: 4,
            level_dim: 4,
            max_depth: 21,
            fully_causal: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.embed_dim % self.heads != 0 {
            return Err(LoccError::ConfigMismatch(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            )));
        }
        if self.knn < 1 || self.ancestors < 1 || self.max_depth < 1 {
            return Err(LoccError::ConfigMismatch("knn/ancestors/max_depth".into()));
        }
        Ok(())
    }

    pub fn token_dim(&self) -> usize {
        let base = self.ancestors * self.ancestor_dim + self.octant_dim + self.level_dim;
        if self.fully_causal {
            base + self.ancestor_dim
        } else {
            base
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for v in [
            self.embed_dim,
            self.layers,
            self.heads,
            self.ffn_dim,
            self.knn,
            self.ancestors,
            self.ancestor_dim,
            self.octant_dim,
            self.level_dim,
            self.max_depth,
        ] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        out.push(self.fully_causal as u8);
        out
    }

    fn from_bytes(r: &mut ByteReader) -> Result<Self> {
        let mut vals = [0usize; 10];
        for v in &mut vals {
            *v = r.u32()? as usize;
        }
        let fully_causal = r.u8()? != 0;
        let cfg = Self {
            embed_dim: vals[0],
            layers: vals[1],
            heads: vals[2],
            ffn_dim: vals[3],
            knn: vals[4],
            ancestors: vals[5],
            ancestor_dim: vals[6],
            octant_dim: vals[7],
            level_dim: vals[8],
            max_depth: vals[9],
            fully_causal,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct MlpIds {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
pub struct AttnLayerIds {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub bk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ffn_w1: ParamId,
    pub ffn_b1: ParamId,
    pub ffn_w2: ParamId,
    pub ffn_b2: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

#[derive(Debug, Clone)]
pub struct ModelIds {
    pub anc_table: ParamId,
    pub oct_table: ParamId,
    pub lvl_table: ParamId,
    /// Masked current-symbol channel, fully-causal baseline only.
    pub cur_table: Option<ParamId>,
    pub token_mlp: MlpIds,
    pub coord_mlp: MlpIds,
    pub edge_mlp: MlpIds,
    pub gate_w: ParamId,
    pub gate_b: ParamId,
    pub aggr_mlp: MlpIds,
    pub attn: Vec<AttnLayerIds>,
    pub sib_table: ParamId,
    pub ssm_wa: ParamId,
    pub ssm_ba: ParamId,
    pub ssm_wb: ParamId,
    pub ssm_bb: ParamId,
    pub ssm_wo: ParamId,
    pub ssm_bo: ParamId,
    pub head: MlpIds,
}

/// The full learned model: backbone + stage-scalable predictor.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    pub ids: ModelIds,
}

struct Builder<'r> {
    store: ParamStore,
    rng: &'r mut ChaCha20Rng,
}

impl<'r> Builder<'r> {
    fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> (ParamId, ParamId) {
        let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| self.rng.gen_range(-s..s))
            .collect();
        let w = self
            .store
            .add(&format!("{name}.w"), Tensor::from_vec(&[fan_in, fan_out], data));
        let b = self
            .store
            .add(&format!("{name}.b"), Tensor::zeros(&[1, fan_out]));
        (w, b)
    }

    fn mlp(&mut self, name: &str, fan_in: usize, hidden: usize, fan_out: usize) -> MlpIds {
        let (w1, b1) = self.linear(&format!("{name}.l1"), fan_in, hidden);
        let (w2, b2) = self.linear(&format!("{name}.l2"), hidden, fan_out);
        MlpIds { w1, b1, w2, b2 }
    }

    fn table(&mut self, name: &str, rows: usize, dim: usize) -> ParamId {
        let data = (0..rows * dim).map(|_| self.rng.gen_range(-0.1..0.1)).collect();
        self.store.add(name, Tensor::from_vec(&[rows, dim], data))
    }

    fn norm(&mut self, name: &str, dim: usize) -> (ParamId, ParamId) {
        let g = self
            .store
            .add(&format!("{name}.gain"), Tensor::from_vec(&[1, dim], vec![1.0; dim]));
        let b = self.store.add(&format!("{name}.bias"), Tensor::zeros(&[1, dim]));
        (g, b)
    }
}

impl Model {
    /// Deterministic seeded initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut b = Builder {
            store: ParamStore::new(),
            rng: &mut rng,
        };
        let d = config.embed_dim;

        let anc_table = b.table("backbone.anc_table", OCCUPANCY_VOCAB, config.ancestor_dim);
        let oct_table = b.table("backbone.oct_table", 8, config.octant_dim);
        let lvl_table = b.table("backbone.lvl_table", config.max_depth + 1, config.level_dim);
        let cur_table = if config.fully_causal {
            Some(b.table("backbone.cur_table", OCCUPANCY_VOCAB, config.ancestor_dim))
        } else {
            None
        };
        let token_mlp = b.mlp("backbone.token_mlp", config.token_dim(), d, d);
        let coord_mlp = b.mlp("backbone.coord_mlp", 3, d, d);
        let edge_mlp = b.mlp("backbone.edge_mlp", 2 * d, d, d);
        let (gate_w, gate_b) = b.linear("backbone.gate", d, d);
        let aggr_mlp = b.mlp("backbone.aggr_mlp", d, d, d);

        let mut attn = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let p = format!("backbone.attn{i}");
            let (wq, bq) = b.linear(&format!("{p}.q"), d, d);
            let (wk, bk) = b.linear(&format!("{p}.k"), d, d);
            let (wv, bv) = b.linear(&format!("{p}.v"), d, d);
            let (wo, bo) = b.linear(&format!("{p}.o"), d, d);
            let (ln1_gain, ln1_bias) = b.norm(&format!("{p}.ln1"), d);
            let (ffn_w1, ffn_b1) = b.linear(&format!("{p}.ffn1"), d, config.ffn_dim);
            let (ffn_w2, ffn_b2) = b.linear(&format!("{p}.ffn2"), config.ffn_dim, d);
            let (ln2_gain, ln2_bias) = b.norm(&format!("{p}.ln2"), d);
            attn.push(AttnLayerIds {
                wq,
                bq,
                wk,
                bk,
                wv,
                bv,
                wo,
                bo,
                ln1_gain,
                ln1_bias,
                ffn_w1,
                ffn_b1,
                ffn_w2,
                ffn_b2,
                ln2_gain,
                ln2_bias,
            });
        }

        let sib_table = b.table("predictor.sib_table", OCCUPANCY_VOCAB, d);
        let (ssm_wa, ssm_ba) = b.linear("predictor.ssm.a", d, d);
        let (ssm_wb, ssm_bb) = b.linear("predictor.ssm.b", d, d);
        let (ssm_wo, ssm_bo) = b.linear("predictor.ssm.o", d, d);
        let head = b.mlp("predictor.head", d, d, HEAD_CLASSES);

        // bias the retention gate toward remembering early in training
        {
            let store = &mut b.store;
            for v in &mut store.value_mut(ssm_ba).data {
                *v = 1.0;
            }
        }

        Ok(Self {
            config,
            params: b.store,
            ids: ModelIds {
                anc_table,
                oct_table,
                lvl_table,
                cur_table,
                token_mlp,
                coord_mlp,
                edge_mlp,
                gate_w,
                gate_b,
                aggr_mlp,
                attn,
                sib_table,
                ssm_wa,
                ssm_ba,
                ssm_wb,
                ssm_bb,
                ssm_wo,
                ssm_bo,
                head,
            },
        })
    }

    /// Serialize config preamble + all parameters (without digest footer).
    fn body_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CKPT_MAGIC);
        out.extend_from_slice(&self.config.to_bytes());
        out.extend_from_slice(&(self.params.len() as u32).to_le_bytes());
        for id in self.params.ids() {
            let name = self.params.name(id).as_bytes();
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name);
            let t = self.params.value(id);
            out.push(t.shape.len() as u8);
            for &dim in &t.shape {
                out.extend_from_slice(&(dim as u32).to_le_bytes());
            }
            for &v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// 64-bit digest over config preamble and weights. Transmitted in the
    /// bitstream header; any weight or config change flips it.
    pub fn digest(&self) -> u64 {
        fnv1a64(&self.body_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let body = self.body_bytes();
        let digest = fnv1a64(&body);
        let mut f = std::fs::File::create(path)?;
        f.write_all(&body)?;
        f.write_all(&digest.to_le_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        if bytes.len() < CKPT_MAGIC.len() + 8 {
            return Err(LoccError::Truncation("checkpoint too short".into()));
        }
        let (body, footer) = bytes.split_at(bytes.len() - 8);
        let stored = u64::from_le_bytes(footer.try_into().unwrap());
        if fnv1a64(body) != stored {
            return Err(LoccError::ConfigMismatch(
                "checkpoint digest mismatch (corrupt file?)".into(),
            ));
        }
        let mut r = ByteReader { buf: body, pos: 0 };
        if r.take(CKPT_MAGIC.len())? != CKPT_MAGIC {
            return Err(LoccError::ConfigMismatch("bad checkpoint magic".into()));
        }
        let config = ModelConfig::from_bytes(&mut r)?;
        // rebuild the parameter skeleton, then overwrite values from file
        let mut model = Model::new(config, 0)?;
        let count = r.u32()? as usize;
        if count != model.params.len() {
            return Err(LoccError::ConfigMismatch(format!(
                "checkpoint has {count} parameters, model expects {}",
                model.params.len()
            )));
        }
        for id in model.params.ids().collect::<Vec<_>>() {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| LoccError::Format("bad parameter name".into()))?;
            if name != model.params.name(id) {
                return Err(LoccError::ConfigMismatch(format!(
                    "parameter order mismatch: {name} vs {}",
                    model.params.name(id)
                )));
            }
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            if shape != model.params.value(id).shape {
                return Err(LoccError::ConfigMismatch(format!("shape mismatch for {name}")));
            }
            let n: usize = shape.iter().product();
            let dst = model.params.value_mut(id);
            for k in 0..n {
                dst.data[k] = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
            }
        }
        Ok(model)
    }
}

/// Invocation counters for the post-causal accounting invariants.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct RunCounters {
    pub backbone_invocations: u64,
    pub predictor_invocations: u64,
}

pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(LoccError::Truncation("checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
