//! Two execution engines over the same checkpoint.
//!
//! `HiddenStates` mirrors a hub causal-LM forward pass with
//! `output_hidden_states`: fused projections, norm weights applied after
//! normalization, and a hidden-state list whose last entry is taken after
//! the final norm. `NamedHook` mirrors a hooked-transformer port: norm
//! weights folded into the following projections, per-head attention
//! weights, and named hook points where activations can be read or
//! modified.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::config::ModelConfig;
use super::numeric::Numeric;
use super::weights::{matmul_transposed, Block, Linear, Weights};

#[derive(Debug, Clone, Default)]
pub struct KvCache {
    /// Per layer, `len × kv_dim` keys after rotary embedding.
    k: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    len: usize,
}

impl KvCache {
    pub fn new(n_layers: usize) -> Self {
        Self {
            k: vec![Vec::new(); n_layers],
            v: vec![Vec::new(); n_layers],
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum HookName {
    Embed,
    ResidPre(usize),
    AttnOut(usize),
    ResidMid(usize),
    MlpOut(usize),
    ResidPost(usize),
    LnFinal,
}

impl fmt::Display for HookName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Embed => write!(f, "hook_embed"),
            Self::ResidPre(l) => write!(f, "blocks.{l}.hook_resid_pre"),
            Self::AttnOut(l) => write!(f, "blocks.{l}.hook_attn_out"),
            Self::ResidMid(l) => write!(f, "blocks.{l}.hook_resid_mid"),
            Self::MlpOut(l) => write!(f, "blocks.{l}.hook_mlp_out"),
            Self::ResidPost(l) => write!(f, "blocks.{l}.hook_resid_post"),
            Self::LnFinal => write!(f, "ln_final.hook_normalized"),
        }
    }
}

impl FromStr for HookName {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "hook_embed" => return Ok(Self::Embed),
            "ln_final.hook_normalized" => return Ok(Self::LnFinal),
            _ => {}
        }
        let rest = s.strip_prefix("blocks.").ok_or_else(|| format!("unknown hook '{s}'"))?;
        let (layer, point) = rest.split_once('.').ok_or_else(|| format!("unknown hook '{s}'"))?;
        let l: usize = layer.parse().map_err(|_| format!("bad layer in hook '{s}'"))?;
        Ok(match point {
            "hook_resid_pre" => Self::ResidPre(l),
            "hook_attn_out" => Self::AttnOut(l),
            "hook_resid_mid" => Self::ResidMid(l),
            "hook_mlp_out" => Self::MlpOut(l),
            "hook_resid_post" => Self::ResidPost(l),
            _ => return Err(format!("unknown hook '{s}'")),
        })
    }
}

/// Adds `vector` to the hook's activation at every absolute position
/// `>= from_position`.
#[derive(Debug, Clone)]
pub struct Addition {
    pub hook: HookName,
    pub vector: Vec<f32>,
    pub from_position: usize,
}

#[derive(Debug, Clone, Default)]
pub struct Hooks {
    pub capture: Vec<HookName>,
    pub add: Vec<Addition>,
}

/// Activations captured during one forward call, each `tokens × d_model`.
pub type HookCache = BTreeMap<HookName, Vec<f32>>;

struct FoldedBlock {
    /// Per query head, `head_dim × d_model`, norm weight folded in.
    w_q: Vec<Vec<f32>>,
    b_q: Vec<Vec<f32>>,
    /// Per kv head.
    w_k: Vec<Vec<f32>>,
    b_k: Vec<Vec<f32>>,
    w_v: Vec<Vec<f32>>,
    b_v: Vec<Vec<f32>>,
    /// Per query head, `d_model × head_dim`.
    w_o: Vec<Vec<f32>>,
    gate: Linear,
    up: Linear,
    down: Linear,
}

pub struct Folded {
    blocks: Vec<FoldedBlock>,
    /// `vocab × d_model` with the final norm folded in.
    unembed: Vec<f32>,
}

fn fold_columns(w: &[f32], in_dim: usize, scale: &[f32], num: Numeric) -> Vec<f32> {
    let mut out: Vec<f32> = w.chunks_exact(in_dim).flat_map(|row| row.iter().zip(scale).map(|(a, s)| a * s)).collect();
    num.round(&mut out);
    out
}

fn split_rows(w: &[f32], in_dim: usize, rows_per: usize) -> Vec<Vec<f32>> {
    w.chunks_exact(rows_per * in_dim).map(<[f32]>::to_vec).collect()
}

impl Folded {
    pub fn new(cfg: &ModelConfig, w: &Weights, num: Numeric) -> Self {
        let d = cfg.hidden_size;
        let hd = cfg.head_dim;
        let blocks = w
            .blocks
            .iter()
            .map(|b: &Block| {
                let fold = |l: &Linear, norm: &[f32]| fold_columns(&l.weight, l.in_dim, norm, num);
                let bias = |l: &Linear, heads: usize| match &l.bias {
                    Some(b) => b.chunks_exact(hd).map(<[f32]>::to_vec).collect(),
                    None => vec![vec![0.0; hd]; heads],
                };
                let w_o = (0..cfg.num_heads)
                    .map(|h| {
                        (0..d)
                            .flat_map(|r| b.o.weight[r * cfg.q_dim() + h * hd..r * cfg.q_dim() + (h + 1) * hd].iter().copied())
                            .collect()
                    })
                    .collect();
                let folded_lin = |l: &Linear, norm: &[f32]| Linear {
                    weight: fold(l, norm),
                    bias: None,
                    out_dim: l.out_dim,
                    in_dim: l.in_dim,
                };
                FoldedBlock {
                    w_q: split_rows(&fold(&b.q, &b.attn_norm), d, hd),
                    b_q: bias(&b.q, cfg.num_heads),
                    w_k: split_rows(&fold(&b.k, &b.attn_norm), d, hd),
                    b_k: bias(&b.k, cfg.num_kv_heads),
                    w_v: split_rows(&fold(&b.v, &b.attn_norm), d, hd),
                    b_v: bias(&b.v, cfg.num_kv_heads),
                    w_o,
                    gate: folded_lin(&b.gate, &b.mlp_norm),
                    up: folded_lin(&b.up, &b.mlp_norm),
                    down: b.down.clone(),
                }
            })
            .collect();
        Self {
            blocks,
            unembed: fold_columns(w.lm_head_matrix(), d, &w.final_norm, num),
        }
    }
}

pub(crate) struct Kernels<'a> {
    pub cfg: &'a ModelConfig,
    pub num: Numeric,
    pub inv_freq: &'a [f64],
}

impl Kernels<'_> {
    /// `x / rms(x)` per row, rounded, optionally times `weight` (rounded).
    fn rms_norm(&self, x: &[f32], weight: Option<&[f32]>) -> Vec<f32> {
        let d = self.cfg.hidden_size;
        let mut out = Vec::with_capacity(x.len());
        for row in x.chunks_exact(d) {
            let ms = row.iter().map(|v| v * v).sum::<f32>() / d as f32;
            let inv = 1.0 / (ms + self.cfg.rms_norm_eps).sqrt();
            let start = out.len();
            out.extend(row.iter().map(|v| self.num.round1(v * inv)));
            if let Some(w) = weight {
                for (o, w) in out[start..].iter_mut().zip(w) {
                    *o = self.num.round1(*o * w);
                }
            }
        }
        out
    }

    fn rope(&self, x: &mut [f32], width: usize, first_pos: usize) {
        let hd = self.cfg.head_dim;
        let half = hd / 2;
        for (t, row) in x.chunks_exact_mut(width).enumerate() {
            let pos = (first_pos + t) as f64;
            let (cos, sin): (Vec<f32>, Vec<f32>) = self
                .inv_freq
                .iter()
                .map(|f| {
                    let a = (pos * f) as f32;
                    (self.num.round1(a.cos()), self.num.round1(a.sin()))
                })
                .unzip();
            for head in row.chunks_exact_mut(hd) {
                for i in 0..half {
                    let (a, b) = (head[i], head[i + half]);
                    head[i] = self.num.round1(self.num.round1(a * cos[i]) - self.num.round1(b * sin[i]));
                    head[i + half] = self.num.round1(self.num.round1(b * cos[i]) + self.num.round1(a * sin[i]));
                }
            }
        }
    }

    fn silu_mul(&self, gate: &[f32], up: &[f32]) -> Vec<f32> {
        gate.iter()
            .zip(up)
            .map(|(&g, &u)| {
                let s = self.num.round1(g / (1.0 + (-g).exp()));
                self.num.round1(s * u)
            })
            .collect()
    }

    fn add_into(&self, acc: &mut [f32], x: &[f32]) {
        for (a, b) in acc.iter_mut().zip(x) {
            *a = self.num.round1(*a + b);
        }
    }

    /// Causal attention for one head over cached keys/values. `q` holds the
    /// `t` new queries; returns `t × head_dim`.
    fn attend(&self, q: &[f32], keys: &[f32], values: &[f32], kv_width: usize, kv_off: usize, first_pos: usize, scale_by_mul: bool) -> Vec<f32> {
        let hd = self.cfg.head_dim;
        let scale = (hd as f32).sqrt();
        let mut out = vec![0.0f32; q.len()];
        for (t, qrow) in q.chunks_exact(hd).enumerate() {
            let upto = first_pos + t + 1;
            let mut scores: Vec<f32> = (0..upto)
                .map(|j| {
                    let k = &keys[j * kv_width + kv_off..j * kv_width + kv_off + hd];
                    let s = self.num.round1(qrow.iter().zip(k).map(|(a, b)| a * b).sum::<f32>());
                    self.num.round1(if scale_by_mul { s * (1.0 / scale) } else { s / scale })
                })
                .collect();
            let m = scores.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let mut z = 0.0f32;
            for s in scores.iter_mut() {
                *s = (*s - m).exp();
                z += *s;
            }
            scores.iter_mut().for_each(|s| *s = self.num.round1(*s / z));
            let o = &mut out[t * hd..(t + 1) * hd];
            for (j, p) in scores.iter().enumerate() {
                let v = &values[j * kv_width + kv_off..j * kv_width + kv_off + hd];
                for (a, b) in o.iter_mut().zip(v) {
                    *a += p * b;
                }
            }
            self.num.round(o);
        }
        out
    }

    fn embed(&self, w: &Weights, tokens: &[u32]) -> Vec<f32> {
        let d = self.cfg.hidden_size;
        tokens
            .iter()
            .flat_map(|&t| {
                let t = (t as usize).min(self.cfg.vocab_size - 1);
                w.embed[t * d..(t + 1) * d].iter().copied()
            })
            .collect()
    }

    fn logits(&self, unembed: &[f32], last: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0f32; self.cfg.vocab_size];
        matmul_transposed(last, unembed, &mut out, 1, self.cfg.hidden_size, self.cfg.vocab_size, 0.0);
        self.num.round(&mut out);
        out
    }

    fn lin(&self, l: &Linear, x: &[f32], rows: usize) -> Vec<f32> {
        let mut y = l.forward(x, rows);
        self.num.round(&mut y);
        y
    }
}

pub(crate) struct HiddenOutput {
    pub last_logits: Vec<f32>,
    /// `n_layers + 1` entries of `tokens × d_model`; entry 0 is the
    /// embedding output and the last entry is taken after the final norm.
    pub hidden_states: Option<Vec<Vec<f32>>>,
}

pub(crate) fn forward_hidden(k: &Kernels, w: &Weights, tokens: &[u32], cache: &mut KvCache, keep_states: bool) -> HiddenOutput {
    let cfg = k.cfg;
    let (d, t, p0) = (cfg.hidden_size, tokens.len(), cache.len);
    let group = cfg.num_heads / cfg.num_kv_heads;
    let mut h = k.embed(w, tokens);
    let mut states = keep_states.then(|| vec![h.clone()]);
    for (l, b) in w.blocks.iter().enumerate() {
        let x = k.rms_norm(&h, Some(&b.attn_norm));
        let mut q = k.lin(&b.q, &x, t);
        let mut kk = k.lin(&b.k, &x, t);
        let v = k.lin(&b.v, &x, t);
        k.rope(&mut q, cfg.q_dim(), p0);
        k.rope(&mut kk, cfg.kv_dim(), p0);
        cache.k[l].extend_from_slice(&kk);
        cache.v[l].extend_from_slice(&v);
        let hd = cfg.head_dim;
        let mut attn = vec![0.0f32; t * cfg.q_dim()];
        for head in 0..cfg.num_heads {
            let qh: Vec<f32> = q.chunks_exact(cfg.q_dim()).flat_map(|r| r[head * hd..(head + 1) * hd].iter().copied()).collect();
            let z = k.attend(&qh, &cache.k[l], &cache.v[l], cfg.kv_dim(), (head / group) * hd, p0, true);
            for (r, zr) in z.chunks_exact(hd).enumerate() {
                attn[r * cfg.q_dim() + head * hd..r * cfg.q_dim() + (head + 1) * hd].copy_from_slice(zr);
            }
        }
        let o = k.lin(&b.o, &attn, t);
        k.add_into(&mut h, &o);
        let x = k.rms_norm(&h, Some(&b.mlp_norm));
        let act = k.silu_mul(&k.lin(&b.gate, &x, t), &k.lin(&b.up, &x, t));
        let m = k.lin(&b.down, &act, t);
        k.add_into(&mut h, &m);
        if let Some(s) = states.as_mut() {
            s.push(h.clone());
        }
    }
    cache.len += t;
    let normed = k.rms_norm(&h, Some(&w.final_norm));
    if let Some(s) = states.as_mut() {
        *s.last_mut().expect("at least one block") = normed.clone();
    }
    HiddenOutput {
        last_logits: k.logits(w.lm_head_matrix(), &normed[(t - 1) * d..]),
        hidden_states: states,
    }
}

pub(crate) fn forward_named(k: &Kernels, f: &Folded, w: &Weights, tokens: &[u32], cache: &mut KvCache, hooks: &Hooks) -> (Vec<f32>, HookCache) {
    let cfg = k.cfg;
    let (d, t, p0, hd) = (cfg.hidden_size, tokens.len(), cache.len, cfg.head_dim);
    let group = cfg.num_heads / cfg.num_kv_heads;
    let mut captured = HookCache::new();
    let mut point = |name: HookName, x: &mut Vec<f32>| {
        for a in hooks.add.iter().filter(|a| a.hook == name) {
            for (r, row) in x.chunks_exact_mut(d).enumerate() {
                if p0 + r >= a.from_position {
                    for (v, s) in row.iter_mut().zip(&a.vector) {
                        *v = k.num.round1(*v + s);
                    }
                }
            }
        }
        if hooks.capture.contains(&name) {
            captured.insert(name, x.clone());
        }
    };

    let mut h = k.embed(w, tokens);
    point(HookName::Embed, &mut h);
    for (l, b) in f.blocks.iter().enumerate() {
        point(HookName::ResidPre(l), &mut h);
        let x = k.rms_norm(&h, None);
        let per_head = |ws: &[Vec<f32>], bs: &[Vec<f32>], rope: bool| -> Vec<Vec<f32>> {
            ws.iter()
                .zip(bs)
                .map(|(wh, bh)| {
                    let mut y = vec![0.0f32; t * hd];
                    for r in y.chunks_exact_mut(hd) {
                        r.copy_from_slice(bh);
                    }
                    matmul_transposed(&x, wh, &mut y, t, d, hd, 1.0);
                    k.num.round(&mut y);
                    if rope {
                        k.rope(&mut y, hd, p0);
                    }
                    y
                })
                .collect()
        };
        let q = per_head(&b.w_q, &b.b_q, true);
        let kh = per_head(&b.w_k, &b.b_k, true);
        let vh = per_head(&b.w_v, &b.b_v, false);
        for r in 0..t {
            for g in 0..cfg.num_kv_heads {
                cache.k[l].extend_from_slice(&kh[g][r * hd..(r + 1) * hd]);
                cache.v[l].extend_from_slice(&vh[g][r * hd..(r + 1) * hd]);
            }
        }
        let mut attn_out = vec![0.0f32; t * d];
        for (head, qh) in q.iter().enumerate() {
            let z = k.attend(qh, &cache.k[l], &cache.v[l], cfg.kv_dim(), (head / group) * hd, p0, false);
            matmul_transposed(&z, &b.w_o[head], &mut attn_out, t, hd, d, 1.0);
        }
        k.num.round(&mut attn_out);
        point(HookName::AttnOut(l), &mut attn_out);
        k.add_into(&mut h, &attn_out);
        point(HookName::ResidMid(l), &mut h);
        let x = k.rms_norm(&h, None);
        let act = k.silu_mul(&k.lin(&b.gate, &x, t), &k.lin(&b.up, &x, t));
        let mut m = k.lin(&b.down, &act, t);
        point(HookName::MlpOut(l), &mut m);
        k.add_into(&mut h, &m);
        point(HookName::ResidPost(l), &mut h);
    }
    cache.len += t;
    let mut normed = k.rms_norm(&h, None);
    point(HookName::LnFinal, &mut normed);
    (k.logits(&f.unembed, &normed[(t - 1) * d..]), captured)
}
