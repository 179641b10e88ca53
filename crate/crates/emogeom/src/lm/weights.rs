use std::collections::BTreeMap;
use std::path::Path;

use emogeom_core::record::Precision;
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;

use super::config::ModelConfig;
use super::numeric::{quantize_int8_rows, Numeric};
use crate::error::{Error, Result};

/// Dense layer `y = x W^T + b` with `W` stored row-major as `out × in`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Vec<f32>,
    pub bias: Option<Vec<f32>>,
    pub out_dim: usize,
    pub in_dim: usize,
}

impl Linear {
    pub fn new(weight: Vec<f32>, bias: Option<Vec<f32>>, out_dim: usize, in_dim: usize) -> Result<Self> {
        if weight.len() != out_dim * in_dim || bias.as_ref().is_some_and(|b| b.len() != out_dim) {
            return Err(Error::Model(format!("linear layer of shape {out_dim}x{in_dim} has wrong sizes")));
        }
        Ok(Self {
            weight,
            bias,
            out_dim,
            in_dim,
        })
    }

    /// `x` holds `rows` inputs of width `in_dim`.
    pub fn forward(&self, x: &[f32], rows: usize) -> Vec<f32> {
        debug_assert_eq!(x.len(), rows * self.in_dim);
        let mut y = vec![0.0f32; rows * self.out_dim];
        if let Some(b) = &self.bias {
            for r in y.chunks_exact_mut(self.out_dim) {
                r.copy_from_slice(b);
            }
        }
        let beta = if self.bias.is_some() { 1.0 } else { 0.0 };
        matmul_transposed(x, &self.weight, &mut y, rows, self.in_dim, self.out_dim, beta);
        y
    }
}

/// `c = a · bᵀ + beta·c` for `a: m×k`, `b: n×k`, `c: m×n`, all row-major.
pub fn matmul_transposed(a: &[f32], b: &[f32], c: &mut [f32], m: usize, k: usize, n: usize, beta: f32) {
    // SAFETY: slice lengths cover the strided extents given to sgemm.
    assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Debug, Clone)]
pub struct Block {
    pub attn_norm: Vec<f32>,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub mlp_norm: Vec<f32>,
    pub gate: Linear,
    pub up: Linear,
    pub down: Linear,
}

#[derive(Debug, Clone)]
pub struct Weights {
    pub embed: Vec<f32>,
    pub blocks: Vec<Block>,
    pub final_norm: Vec<f32>,
    /// `None` when the output head is tied to the embedding.
    pub lm_head: Option<Linear>,
}

impl Weights {
    pub fn lm_head_matrix(&self) -> &[f32] {
        self.lm_head.as_ref().map(|l| l.weight.as_slice()).unwrap_or(&self.embed)
    }

    /// Converts to the run precision in place.
    pub fn cast(&mut self, precision: Precision) {
        let num = Numeric(precision);
        for b in &mut self.blocks {
            for l in [&mut b.q, &mut b.k, &mut b.v, &mut b.o, &mut b.gate, &mut b.up, &mut b.down] {
                if precision == Precision::Int8 {
                    quantize_int8_rows(&mut l.weight, l.in_dim);
                }
                num.round(&mut l.weight);
                if let Some(bias) = &mut l.bias {
                    num.round(bias);
                }
            }
            num.round(&mut b.attn_norm);
            num.round(&mut b.mlp_norm);
        }
        num.round(&mut self.embed);
        num.round(&mut self.final_norm);
        if let Some(h) = &mut self.lm_head {
            num.round(&mut h.weight);
        }
    }

    pub fn parameter_count(&self) -> usize {
        let lin = |l: &Linear| l.weight.len() + l.bias.as_ref().map_or(0, Vec::len);
        self.embed.len()
            + self.final_norm.len()
            + self.lm_head.as_ref().map_or(0, lin)
            + self
                .blocks
                .iter()
                .map(|b| {
                    b.attn_norm.len()
                        + b.mlp_norm.len()
                        + [&b.q, &b.k, &b.v, &b.o, &b.gate, &b.up, &b.down].into_iter().map(lin).sum::<usize>()
                })
                .sum::<usize>()
    }

    /// Reads `model.safetensors` or the shards listed in
    /// `model.safetensors.index.json`.
    pub fn load_hf_dir(dir: &Path, cfg: &ModelConfig) -> Result<Self> {
        let single = dir.join("model.safetensors");
        let files: Vec<std::path::PathBuf> = if single.exists() {
            vec![single]
        } else {
            let index = dir.join("model.safetensors.index.json");
            let text = std::fs::read_to_string(&index).map_err(|e| Error::io(&index, e))?;
            let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::parse(&index, e))?;
            let mut names: Vec<String> = v["weight_map"]
                .as_object()
                .ok_or_else(|| Error::parse(&index, "missing weight_map"))?
                .values()
                .filter_map(|s| s.as_str().map(String::from))
                .collect();
            names.sort();
            names.dedup();
            names.into_iter().map(|n| dir.join(n)).collect()
        };
        let mut tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)> = BTreeMap::new();
        for f in &files {
            let bytes = std::fs::read(f).map_err(|e| Error::io(f, e))?;
            let st = SafeTensors::deserialize(&bytes).map_err(|e| Error::parse(f, e))?;
            for (name, view) in st.tensors() {
                let data = to_f32(&view).map_err(|m| Error::parse(f, format!("{name}: {m}")))?;
                tensors.insert(name, (view.shape().to_vec(), data));
            }
        }
        Self::from_named(tensors, cfg)
    }

    fn from_named(mut t: BTreeMap<String, (Vec<usize>, Vec<f32>)>, cfg: &ModelConfig) -> Result<Self> {
        let mut take = |name: &str, shape: &[usize]| -> Result<Vec<f32>> {
            let (s, data) = t.remove(name).ok_or_else(|| Error::Model(format!("checkpoint lacks tensor {name}")))?;
            if s != shape {
                return Err(Error::Model(format!("tensor {name} has shape {s:?}, expected {shape:?}")));
            }
            Ok(data)
        };
        let (d, qd, kvd, ff) = (cfg.hidden_size, cfg.q_dim(), cfg.kv_dim(), cfg.intermediate_size);
        let embed = take("model.embed_tokens.weight", &[cfg.vocab_size, d])?;
        let mut blocks = Vec::with_capacity(cfg.num_layers);
        for i in 0..cfg.num_layers {
            let p = format!("model.layers.{i}");
            let mut lin = |name: &str, out: usize, inp: usize, bias: bool| -> Result<Linear> {
                let w = take(&format!("{p}.{name}.weight"), &[out, inp])?;
                let b = if bias { Some(take(&format!("{p}.{name}.bias"), &[out])?) } else { None };
                Linear::new(w, b, out, inp)
            };
            let ab = cfg.attention_bias;
            let q = lin("self_attn.q_proj", qd, d, ab)?;
            let k = lin("self_attn.k_proj", kvd, d, ab)?;
            let v = lin("self_attn.v_proj", kvd, d, ab)?;
            let o = lin("self_attn.o_proj", d, qd, false)?;
            let gate = lin("mlp.gate_proj", ff, d, false)?;
            let up = lin("mlp.up_proj", ff, d, false)?;
            let down = lin("mlp.down_proj", d, ff, false)?;
            blocks.push(Block {
                attn_norm: take(&format!("{p}.input_layernorm.weight"), &[d])?,
                q,
                k,
                v,
                o,
                mlp_norm: take(&format!("{p}.post_attention_layernorm.weight"), &[d])?,
                gate,
                up,
                down,
            });
        }
        let final_norm = take("model.norm.weight", &[d])?;
        let lm_head = if cfg.tie_word_embeddings {
            None
        } else {
            Some(Linear::new(take("lm_head.weight", &[cfg.vocab_size, d])?, None, cfg.vocab_size, d)?)
        };
        Ok(Self {
            embed,
            blocks,
            final_norm,
            lm_head,
        })
    }

    /// Writes the hub tensor layout as f32 safetensors.
    pub fn save_safetensors(&self, path: &Path, cfg: &ModelConfig) -> Result<()> {
        let mut named: Vec<(String, Vec<usize>, &[f32])> = vec![
            ("model.embed_tokens.weight".into(), vec![cfg.vocab_size, cfg.hidden_size], &self.embed),
            ("model.norm.weight".into(), vec![cfg.hidden_size], &self.final_norm),
        ];
        if let Some(h) = &self.lm_head {
            named.push(("lm_head.weight".into(), vec![h.out_dim, h.in_dim], &h.weight));
        }
        for (i, b) in self.blocks.iter().enumerate() {
            let p = format!("model.layers.{i}");
            named.push((format!("{p}.input_layernorm.weight"), vec![b.attn_norm.len()], &b.attn_norm));
            named.push((format!("{p}.post_attention_layernorm.weight"), vec![b.mlp_norm.len()], &b.mlp_norm));
            for (n, l) in [
                ("self_attn.q_proj", &b.q),
                ("self_attn.k_proj", &b.k),
                ("self_attn.v_proj", &b.v),
                ("self_attn.o_proj", &b.o),
                ("mlp.gate_proj", &b.gate),
                ("mlp.up_proj", &b.up),
                ("mlp.down_proj", &b.down),
            ] {
                named.push((format!("{p}.{n}.weight"), vec![l.out_dim, l.in_dim], &l.weight));
                if let Some(bias) = &l.bias {
                    named.push((format!("{p}.{n}.bias"), vec![l.out_dim], bias));
                }
            }
        }
        let bytes: Vec<(String, Vec<usize>, Vec<u8>)> = named
            .into_iter()
            .map(|(n, s, d)| (n, s, d.iter().flat_map(|x| x.to_le_bytes()).collect()))
            .collect();
        let views: Vec<(String, TensorView)> = bytes
            .iter()
            .map(|(n, s, b)| Ok((n.clone(), TensorView::new(Dtype::F32, s.clone(), b).map_err(|e| Error::Model(e.to_string()))?)))
            .collect::<Result<_>>()?;
        safetensors::serialize_to_file(views, None, path).map_err(|e| Error::parse(path, e))
    }
}

fn to_f32(view: &TensorView) -> std::result::Result<Vec<f32>, String> {
    let b = view.data();
    Ok(match view.dtype() {
        Dtype::F32 => b.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect(),
        Dtype::F16 => b.chunks_exact(2).map(|c| half::f16::from_le_bytes([c[0], c[1]]).to_f32()).collect(),
        Dtype::BF16 => b.chunks_exact(2).map(|c| half::bf16::from_le_bytes([c[0], c[1]]).to_f32()).collect(),
        other => return Err(format!("unsupported dtype {other:?}")),
    })
}
