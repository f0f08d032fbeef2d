use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AttentionMask, BlockInput, MaskKind, ModelConfig, ScaleModel};
use crate::error::{bail, Result};
use crate::numerics::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::tokenizer::ScaleSchedule;

const INIT_STD: f32 = 0.02;

#[derive(Clone, Debug, PartialEq)]
struct LayerIds {
    ln1_g: ParamId,
    ln1_b: ParamId,
    qkv_w: ParamId,
    qkv_b: ParamId,
    out_w: ParamId,
    out_b: ParamId,
    ln2_g: ParamId,
    ln2_b: ParamId,
    fc1_w: ParamId,
    fc1_b: ParamId,
    fc2_w: ParamId,
    fc2_b: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
struct Ids {
    class_emb: ParamId,
    in_w: ParamId,
    in_b: ParamId,
    pos: BTreeMap<usize, (ParamId, ParamId)>,
    layers: Vec<LayerIds>,
    lnf_g: ParamId,
    lnf_b: ParamId,
    head_w: ParamId,
    head_b: ParamId,
}

impl Ids {
    fn resolve(config: &ModelConfig, store: &ParamStore) -> Result<Self> {
        let id = |n: &str| store.id(n);
        let mut pos = BTreeMap::new();
        for &s in config.schedule.sides() {
            pos.insert(s, (id(&format!("pos.s{s}"))?, id(&format!("lvl.s{s}"))?));
        }
        let layers = (0..config.depth)
            .map(|l| {
                let p = |n: &str| store.id(&format!("blk{l}.{n}"));
                Ok(LayerIds {
                    ln1_g: p("ln1.g")?,
                    ln1_b: p("ln1.b")?,
                    qkv_w: p("attn.qkv.w")?,
                    qkv_b: p("attn.qkv.b")?,
                    out_w: p("attn.out.w")?,
                    out_b: p("attn.out.b")?,
                    ln2_g: p("ln2.g")?,
                    ln2_b: p("ln2.b")?,
                    fc1_w: p("mlp.fc1.w")?,
                    fc1_b: p("mlp.fc1.b")?,
                    fc2_w: p("mlp.fc2.w")?,
                    fc2_b: p("mlp.fc2.b")?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            class_emb: id("class_emb")?,
            in_w: id("in_proj.w")?,
            in_b: id("in_proj.b")?,
            pos,
            layers,
            lnf_g: id("ln_f.g")?,
            lnf_b: id("ln_f.b")?,
            head_w: id("head.w")?,
            head_b: id("head.b")?,
        })
    }
}

/// Pre-LN decoder over concatenated scale blocks.
///
/// Block inputs: the first schedule scale is a run of start tokens taken
/// from the class embedding; every later block is a linear projection of its
/// conditioning features plus the class embedding. Each block then adds its
/// own 2-D positional table and scale embedding.
#[derive(Clone, Debug, PartialEq)]
pub struct Transformer {
    config: ModelConfig,
    params: ParamStore,
    ids: Ids,
}

impl Transformer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.dim;
        let h = config.mlp_ratio * d;
        let resid_std = INIT_STD / (2.0 * config.depth as f32).sqrt();
        let mut store = ParamStore::new();
        let mut put = |name: &str, t: Tensor| store.insert(name, t).map(|_| ());
        put("class_emb", Tensor::randn(&[config.num_classes + 1, d], INIT_STD, &mut rng))?;
        let in_std = 1.0 / (config.feat_dim as f32).sqrt();
        put("in_proj.w", Tensor::randn(&[config.feat_dim, d], in_std, &mut rng))?;
        put("in_proj.b", Tensor::zeros(&[d]))?;
        for &s in config.schedule.sides() {
            put(&format!("pos.s{s}"), Tensor::randn(&[s * s, d], INIT_STD, &mut rng))?;
            put(&format!("lvl.s{s}"), Tensor::randn(&[d], INIT_STD, &mut rng))?;
        }
        for l in 0..config.depth {
            let n = |x: &str| format!("blk{l}.{x}");
            put(&n("ln1.g"), Tensor::full(&[d], 1.0))?;
            put(&n("ln1.b"), Tensor::zeros(&[d]))?;
            put(&n("attn.qkv.w"), Tensor::randn(&[d, 3 * d], INIT_STD, &mut rng))?;
            put(&n("attn.qkv.b"), Tensor::zeros(&[3 * d]))?;
            put(&n("attn.out.w"), Tensor::randn(&[d, d], resid_std, &mut rng))?;
            put(&n("attn.out.b"), Tensor::zeros(&[d]))?;
            put(&n("ln2.g"), Tensor::full(&[d], 1.0))?;
            put(&n("ln2.b"), Tensor::zeros(&[d]))?;
            put(&n("mlp.fc1.w"), Tensor::randn(&[d, h], INIT_STD, &mut rng))?;
            put(&n("mlp.fc1.b"), Tensor::zeros(&[h]))?;
            put(&n("mlp.fc2.w"), Tensor::randn(&[h, d], resid_std, &mut rng))?;
            put(&n("mlp.fc2.b"), Tensor::zeros(&[d]))?;
        }
        put("ln_f.g", Tensor::full(&[d], 1.0))?;
        put("ln_f.b", Tensor::zeros(&[d]))?;
        put("head.w", Tensor::randn(&[d, config.vocab], INIT_STD, &mut rng))?;
        put("head.b", Tensor::zeros(&[config.vocab]))?;
        Self::from_params(config, store)
    }

    /// Wraps an existing parameter set; every expected tensor must be
    /// present with its configured shape.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let ids = Ids::resolve(&config, &params)?;
        let model = Self { config, params, ids };
        let reference = model.expected_shapes();
        for (name, t) in model.params.iter() {
            match reference.get(name) {
                Some(shape) if shape.as_slice() == t.shape() => {}
                Some(shape) => bail!(Validation, "parameter {} has shape {:?}, expected {:?}", name, t.shape(), shape),
                None => bail!(Validation, "unexpected parameter {}", name),
            }
        }
        Ok(model)
    }

    fn expected_shapes(&self) -> BTreeMap<String, Vec<usize>> {
        let c = &self.config;
        let d = c.dim;
        let h = c.mlp_ratio * d;
        let mut m = BTreeMap::new();
        m.insert("class_emb".to_string(), vec![c.num_classes + 1, d]);
        m.insert("in_proj.w".to_string(), vec![c.feat_dim, d]);
        m.insert("in_proj.b".to_string(), vec![d]);
        for &s in c.schedule.sides() {
            m.insert(format!("pos.s{s}"), vec![s * s, d]);
            m.insert(format!("lvl.s{s}"), vec![d]);
        }
        for l in 0..c.depth {
            for (n, shape) in [
                ("ln1.g", vec![d]),
                ("ln1.b", vec![d]),
                ("attn.qkv.w", vec![d, 3 * d]),
                ("attn.qkv.b", vec![3 * d]),
                ("attn.out.w", vec![d, d]),
                ("attn.out.b", vec![d]),
                ("ln2.g", vec![d]),
                ("ln2.b", vec![d]),
                ("mlp.fc1.w", vec![d, h]),
                ("mlp.fc1.b", vec![h]),
                ("mlp.fc2.w", vec![h, d]),
                ("mlp.fc2.b", vec![d]),
            ] {
                m.insert(format!("blk{l}.{n}"), shape);
            }
        }
        m.insert("ln_f.g".to_string(), vec![d]);
        m.insert("ln_f.b".to_string(), vec![d]);
        m.insert("head.w".to_string(), vec![d, c.vocab]);
        m.insert("head.b".to_string(), vec![c.vocab]);
        m
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

    pub fn into_params(self) -> ParamStore {
        self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.numel()
    }

    /// Sets the output projection to zero so every position predicts the
    /// uniform distribution.
    pub fn zero_head(&mut self) {
        for id in [self.ids.head_w, self.ids.head_b] {
            self.params.get_mut(id).data_mut().fill(0.0);
        }
    }

    /// Copy of this network restricted to the sides of `schedule`.
    pub fn restricted(&self, schedule: ScaleSchedule) -> Result<Self> {
        let config = self.config.with_schedule(schedule)?;
        let keep = |name: &str| {
            let side = name
                .strip_prefix("pos.s")
                .or_else(|| name.strip_prefix("lvl.s"))
                .and_then(|s| s.parse::<usize>().ok());
            side.is_none_or(|s| config.schedule.position(s).is_some())
        };
        let mut store = ParamStore::new();
        for (name, t) in self.params.iter().filter(|(n, _)| keep(n)) {
            store.insert(name, Tensor::new(t.shape(), t.data().to_vec())?)?;
        }
        Self::from_params(config, store)
    }

    /// Records the forward pass on `tape` and returns the `[L×V]` logits.
    pub fn forward(&self, tape: &mut Tape, blocks: &[BlockInput], class: usize, mask: &AttentionMask) -> Result<Var> {
        let c = &self.config;
        if class > c.num_classes {
            bail!(Index, "class label {} outside 0..={}", class, c.num_classes);
        }
        if blocks.is_empty() {
            bail!(Shape, "forward needs at least one block");
        }
        let total: usize = blocks.iter().map(|b| b.side * b.side).sum();
        if mask.len() != total {
            bail!(Shape, "mask covers {} positions, blocks hold {}", mask.len(), total);
        }
        let p = |tape: &mut Tape, id| tape.param(&self.params, id);
        let first_side = c.schedule.side(0);

        let table = p(tape, self.ids.class_emb);
        let cls = tape.gather_rows(table, &[class])?;
        let in_w = p(tape, self.ids.in_w);
        let in_b = p(tape, self.ids.in_b);
        let mut parts = Vec::with_capacity(blocks.len());
        for b in blocks {
            let n = b.side * b.side;
            let Some(&(pos_id, lvl_id)) = self.ids.pos.get(&b.side) else {
                bail!(Validation, "side {} is not in the model schedule {}", b.side, c.schedule);
            };
            let x = if b.side == first_side {
                tape.gather_rows(table, &vec![class; n])?
            } else {
                if b.features.shape() != [n, c.feat_dim] {
                    bail!(Shape, "side {} block expects [{}, {}] features, got {:?}", b.side, n, c.feat_dim, b.features.shape());
                }
                let f = tape.constant(b.features.clone());
                let x = tape.matmul(f, in_w)?;
                let x = tape.add_row(x, in_b)?;
                tape.add_row(x, cls)?
            };
            let pos = p(tape, pos_id);
            let x = tape.add(x, pos)?;
            let lvl = p(tape, lvl_id);
            parts.push(tape.add_row(x, lvl)?);
        }
        let mut h = if parts.len() == 1 { parts[0] } else { tape.concat_rows(&parts)? };

        let d = c.dim;
        let dh = c.head_dim();
        let inv_sqrt = 1.0 / (dh as f32).sqrt();
        let raw_mask = mask.raw();
        for l in &self.ids.layers {
            let (g, bb) = (p(tape, l.ln1_g), p(tape, l.ln1_b));
            let a = tape.layer_norm(h, g, bb)?;
            let (w, bias) = (p(tape, l.qkv_w), p(tape, l.qkv_b));
            let qkv = tape.matmul(a, w)?;
            let qkv = tape.add_row(qkv, bias)?;
            let mut heads = Vec::with_capacity(c.heads);
            for i in 0..c.heads {
                let q = tape.slice_cols(qkv, i * dh, dh)?;
                let k = tape.slice_cols(qkv, d + i * dh, dh)?;
                let v = tape.slice_cols(qkv, 2 * d + i * dh, dh)?;
                let kt = tape.transpose(k)?;
                let s = tape.matmul(q, kt)?;
                let s = tape.scale(s, inv_sqrt);
                let att = tape.masked_softmax(s, raw_mask.clone())?;
                heads.push(tape.matmul(att, v)?);
            }
            let o = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
            let (w, bias) = (p(tape, l.out_w), p(tape, l.out_b));
            let o = tape.matmul(o, w)?;
            let o = tape.add_row(o, bias)?;
            h = tape.add(h, o)?;

            let (g, bb) = (p(tape, l.ln2_g), p(tape, l.ln2_b));
            let a = tape.layer_norm(h, g, bb)?;
            let (w1, b1) = (p(tape, l.fc1_w), p(tape, l.fc1_b));
            let f = tape.matmul(a, w1)?;
            let f = tape.add_row(f, b1)?;
            let f = tape.gelu(f);
            let (w2, b2) = (p(tape, l.fc2_w), p(tape, l.fc2_b));
            let f = tape.matmul(f, w2)?;
            let f = tape.add_row(f, b2)?;
            h = tape.add(h, f)?;
        }
        let (g, bb) = (p(tape, self.ids.lnf_g), p(tape, self.ids.lnf_b));
        let h = tape.layer_norm(h, g, bb)?;
        let (w, bias) = (p(tape, self.ids.head_w), p(tape, self.ids.head_b));
        let out = tape.matmul(h, w)?;
        tape.add_row(out, bias)
    }
}

impl ScaleModel for Transformer {
    fn vocab(&self) -> usize {
        self.config.vocab
    }

    fn null_class(&self) -> usize {
        self.config.null_class()
    }

    fn schedule(&self) -> &ScaleSchedule {
        &self.config.schedule
    }

    fn mask_kind(&self) -> MaskKind {
        self.config.mask
    }

    fn logits(&self, blocks: &[BlockInput], class: usize, mask: &AttentionMask) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, blocks, class, mask)?;
        let v = tape.value(out);
        Tensor::new(v.shape(), v.data().to_vec())
    }
}
