//! Toy pre-LN transformer backbone with AdaptFormer / LoRA adapter
//! insertion.
//!
//! The backbone patchifies small square "images" into tokens, runs
//! `depth` attention + FFN blocks, mean-pools, and classifies. Adapters
//! attach per block: AdaptFormer as a bottleneck branch parallel to the
//! FFN (ReLU between down/up projections, scaled by s), LoRA as low-rank
//! additive updates to the query and value projections. During
//! quantization-aware training the adapter weights pass through
//! [`Tape::fake_quant`]; frozen backbone weights never receive updates.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::ckpt::AdapterKind;
use crate::codebook::Codebook;
use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape, Tensor};

/// Backbone geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    pub depth: usize,
    pub dim: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    /// Image side length in pixels.
    pub image: usize,
    /// Patch side length; must divide `image`.
    pub patch: usize,
    pub classes: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig { depth: 2, dim: 64, heads: 4, mlp_ratio: 2, image: 8, patch: 2, classes: 4 }
    }
}

impl BackboneConfig {
    pub fn tokens(&self) -> usize {
        let side = self.image / self.patch;
        side * side
    }

    pub fn patch_dim(&self) -> usize {
        self.patch * self.patch
    }

    pub fn ffn_dim(&self) -> usize {
        self.mlp_ratio * self.dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || self.image % self.patch != 0 {
            return Err(Error::ShapeMismatch(format!(
                "patch {} must divide image {}",
                self.patch, self.image
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::ShapeMismatch(format!(
                "heads {} must divide dim {}",
                self.heads, self.dim
            )));
        }
        Ok(())
    }
}

/// Frozen weights of one transformer block.
#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub ln1_g: Tensor,
    pub ln1_b: Tensor,
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub ln2_g: Tensor,
    pub ln2_b: Tensor,
    pub fc1: Tensor,
    pub fc2: Tensor,
}

/// The toy backbone plus classification head.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyBackbone {
    pub cfg: BackboneConfig,
    pub embed: Tensor,
    pub pos: Tensor,
    pub blocks: Vec<Block>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
    pub head_w: Tensor,
    pub head_b: Tensor,
}

fn randn(rows: usize, cols: usize, std: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng) * std)
        .collect();
    Tensor::from_vec(rows, cols, data)
}

fn ones(cols: usize) -> Tensor {
    Tensor::from_vec(1, cols, vec![1.0; cols])
}

impl ToyBackbone {
    /// Random initialization, deterministic under `seed`.
    pub fn init(cfg: BackboneConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = cfg.dim;
        let f = cfg.ffn_dim();
        const STD: f64 = 0.02;
        let blocks = (0..cfg.depth)
            .map(|_| Block {
                ln1_g: ones(d),
                ln1_b: Tensor::zeros(1, d),
                wq: randn(d, d, STD, &mut rng),
                wk: randn(d, d, STD, &mut rng),
                wv: randn(d, d, STD, &mut rng),
                wo: randn(d, d, STD, &mut rng),
                ln2_g: ones(d),
                ln2_b: Tensor::zeros(1, d),
                fc1: randn(d, f, STD, &mut rng),
                fc2: randn(f, d, STD, &mut rng),
            })
            .collect();
        Ok(ToyBackbone {
            embed: randn(cfg.patch_dim(), d, STD, &mut rng),
            pos: randn(cfg.tokens(), d, STD, &mut rng),
            blocks,
            lnf_g: ones(d),
            lnf_b: Tensor::zeros(1, d),
            head_w: randn(d, cfg.classes, STD, &mut rng),
            head_b: Tensor::zeros(1, cfg.classes),
            cfg,
        })
    }

    /// All tensors with stable names, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = vec![
            ("embed".into(), &self.embed),
            ("pos".into(), &self.pos),
        ];
        for (i, b) in self.blocks.iter().enumerate() {
            for (suffix, t) in [
                ("ln1_g", &b.ln1_g),
                ("ln1_b", &b.ln1_b),
                ("wq", &b.wq),
                ("wk", &b.wk),
                ("wv", &b.wv),
                ("wo", &b.wo),
                ("ln2_g", &b.ln2_g),
                ("ln2_b", &b.ln2_b),
                ("fc1", &b.fc1),
                ("fc2", &b.fc2),
            ] {
                out.push((format!("block{i}.{suffix}"), t));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out.push(("head.weight".into(), &self.head_w));
        out.push(("head.bias".into(), &self.head_b));
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = vec![
            ("embed".into(), &mut self.embed),
            ("pos".into(), &mut self.pos),
        ];
        for (i, b) in self.blocks.iter_mut().enumerate() {
            for (suffix, t) in [
                ("ln1_g", &mut b.ln1_g),
                ("ln1_b", &mut b.ln1_b),
                ("wq", &mut b.wq),
                ("wk", &mut b.wk),
                ("wv", &mut b.wv),
                ("wo", &mut b.wo),
                ("ln2_g", &mut b.ln2_g),
                ("ln2_b", &mut b.ln2_b),
                ("fc1", &mut b.fc1),
                ("fc2", &mut b.fc2),
            ] {
                out.push((format!("block{i}.{suffix}"), t));
            }
        }
        out.push(("lnf_g".into(), &mut self.lnf_g));
        out.push(("lnf_b".into(), &mut self.lnf_b));
        out.push(("head.weight".into(), &mut self.head_w));
        out.push(("head.bias".into(), &mut self.head_b));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Adapter weights, one entry per backbone block.
#[derive(Debug, Clone, PartialEq)]
pub enum Adapters {
    AdaptFormer(Vec<AdaptFormerPair>),
    Lora(Vec<LoraPair>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdaptFormerPair {
    /// d × h down projection.
    pub down: Tensor,
    /// h × d up projection.
    pub up: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraPair {
    pub a_q: Tensor,
    pub b_q: Tensor,
    pub a_v: Tensor,
    pub b_v: Tensor,
}

impl Adapters {
    /// Standard adapter init: down/A matrices N(0, 0.02²), up/B zero, so
    /// the adapter branch starts inert. Zero matrices take the
    /// degenerate pass-through in the quantizer until the first nonzero
    /// update.
    pub fn init(kind: AdapterKind, dim: usize, hidden: usize, depth: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        const STD: f64 = 0.02;
        match kind {
            AdapterKind::AdaptFormer => Adapters::AdaptFormer(
                (0..depth)
                    .map(|_| AdaptFormerPair {
                        down: randn(dim, hidden, STD, &mut rng),
                        up: Tensor::zeros(hidden, dim),
                    })
                    .collect(),
            ),
            AdapterKind::Lora => Adapters::Lora(
                (0..depth)
                    .map(|_| LoraPair {
                        a_q: randn(dim, hidden, STD, &mut rng),
                        b_q: Tensor::zeros(hidden, dim),
                        a_v: randn(dim, hidden, STD, &mut rng),
                        b_v: Tensor::zeros(hidden, dim),
                    })
                    .collect(),
            ),
        }
    }

    pub fn kind(&self) -> AdapterKind {
        match self {
            Adapters::AdaptFormer(_) => AdapterKind::AdaptFormer,
            Adapters::Lora(_) => AdapterKind::Lora,
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        match self {
            Adapters::AdaptFormer(pairs) => {
                for (i, p) in pairs.iter().enumerate() {
                    out.push((format!("block{i}.adapter.down"), &p.down));
                    out.push((format!("block{i}.adapter.up"), &p.up));
                }
            }
            Adapters::Lora(pairs) => {
                for (i, p) in pairs.iter().enumerate() {
                    out.push((format!("block{i}.lora.a_q"), &p.a_q));
                    out.push((format!("block{i}.lora.b_q"), &p.b_q));
                    out.push((format!("block{i}.lora.a_v"), &p.a_v));
                    out.push((format!("block{i}.lora.b_v"), &p.b_v));
                }
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        match self {
            Adapters::AdaptFormer(pairs) => {
                for (i, p) in pairs.iter_mut().enumerate() {
                    out.push((format!("block{i}.adapter.down"), &mut p.down));
                    out.push((format!("block{i}.adapter.up"), &mut p.up));
                }
            }
            Adapters::Lora(pairs) => {
                for (i, p) in pairs.iter_mut().enumerate() {
                    out.push((format!("block{i}.lora.a_q"), &mut p.a_q));
                    out.push((format!("block{i}.lora.b_q"), &mut p.b_q));
                    out.push((format!("block{i}.lora.a_v"), &mut p.a_v));
                    out.push((format!("block{i}.lora.b_v"), &mut p.b_v));
                }
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Which parameters train.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Everything updates (pre-training and the full fine-tuning
    /// baseline).
    Full,
    /// Adapters and head update; backbone frozen.
    Adapter,
    /// Head only (linear probe).
    HeadOnly,
}

/// Handles into one recorded forward pass.
pub struct Graph {
    pub logits: NodeId,
    pub loss: Option<NodeId>,
    /// Trainable leaves by parameter name.
    pub leaves: Vec<(String, NodeId)>,
}

/// Records a full forward pass on `tape`.
///
/// `patches` is the patchified batch, shape (batch·tokens × patch_dim).
/// When `quant` is set, every adapter weight leaf passes through the
/// fake quantizer before use.
pub fn build_forward(
    tape: &mut Tape,
    backbone: &ToyBackbone,
    adapters: Option<(&Adapters, f64)>,
    quant: Option<(&Codebook, usize)>,
    regime: Regime,
    patches: Tensor,
    labels: Option<&[usize]>,
) -> Result<Graph> {
    let cfg = &backbone.cfg;
    let tokens = cfg.tokens();
    assert_eq!(patches.rows % tokens, 0, "patch rows must tile into images");
    let batch = patches.rows / tokens;
    let backbone_trainable = regime == Regime::Full;
    let adapter_trainable = matches!(regime, Regime::Full | Regime::Adapter);

    let mut leaves: Vec<(String, NodeId)> = Vec::new();
    let leaf = |tape: &mut Tape,
                    leaves: &mut Vec<(String, NodeId)>,
                    name: String,
                    value: &Tensor,
                    trainable: bool| {
        let id = tape.leaf(value.clone(), trainable);
        if trainable {
            leaves.push((name, id));
        }
        id
    };

    // Adapter weights, fake-quantized when requested.
    let mut adapter_nodes: Vec<Vec<NodeId>> = Vec::new();
    if let Some((ad, _)) = adapters {
        for (name, tensor) in ad.named() {
            let id = leaf(tape, &mut leaves, name, tensor, adapter_trainable);
            let used = match quant {
                Some((cb, blocks)) => tape.fake_quant(id, cb, blocks)?,
                None => id,
            };
            match adapter_nodes.last_mut() {
                Some(block) if block.len() < ad.kind().matrices_per_layer() as usize => {
                    block.push(used)
                }
                _ => adapter_nodes.push(vec![used]),
            }
        }
    }

    let input = tape.leaf(patches, false);
    let embed = leaf(tape, &mut leaves, "embed".into(), &backbone.embed, backbone_trainable);
    let pos = leaf(tape, &mut leaves, "pos".into(), &backbone.pos, backbone_trainable);
    let mut h = tape.matmul(input, embed);
    h = tape.add_tiled(h, pos, batch);

    for (i, block) in backbone.blocks.iter().enumerate() {
        let b = |tape: &mut Tape, leaves: &mut Vec<(String, NodeId)>, suffix: &str, t: &Tensor| {
            leaf(tape, leaves, format!("block{i}.{suffix}"), t, backbone_trainable)
        };
        let ln1_g = b(tape, &mut leaves, "ln1_g", &block.ln1_g);
        let ln1_b = b(tape, &mut leaves, "ln1_b", &block.ln1_b);
        let wq = b(tape, &mut leaves, "wq", &block.wq);
        let wk = b(tape, &mut leaves, "wk", &block.wk);
        let wv = b(tape, &mut leaves, "wv", &block.wv);
        let wo = b(tape, &mut leaves, "wo", &block.wo);

        let a_in = tape.layer_norm(h, ln1_g, ln1_b);
        let mut q = tape.matmul(a_in, wq);
        let mut v = tape.matmul(a_in, wv);
        if let (Some((Adapters::Lora(_), s)), Some(nodes)) =
            (adapters.map(|(a, s)| (a, s)), adapter_nodes.get(i))
        {
            let [a_q, b_q, a_v, b_v] = nodes[..] else {
                return Err(Error::ShapeMismatch("lora adapter arity".into()));
            };
            let dq = tape.matmul(a_in, a_q);
            let dq = tape.matmul(dq, b_q);
            let dq = tape.scale(dq, s);
            q = tape.add(q, dq);
            let dv = tape.matmul(a_in, a_v);
            let dv = tape.matmul(dv, b_v);
            let dv = tape.scale(dv, s);
            v = tape.add(v, dv);
        }
        let k = tape.matmul(a_in, wk);
        let attn = tape.attention(q, k, v, cfg.heads, tokens);
        let projected = tape.matmul(attn, wo);
        h = tape.add(h, projected);

        let ln2_g = b(tape, &mut leaves, "ln2_g", &block.ln2_g);
        let ln2_b = b(tape, &mut leaves, "ln2_b", &block.ln2_b);
        let fc1 = b(tape, &mut leaves, "fc1", &block.fc1);
        let fc2 = b(tape, &mut leaves, "fc2", &block.fc2);
        let f_in = tape.layer_norm(h, ln2_g, ln2_b);
        let f = tape.matmul(f_in, fc1);
        let f = tape.relu(f);
        let f = tape.matmul(f, fc2);
        let mut out = tape.add(h, f);
        if let (Some((Adapters::AdaptFormer(_), s)), Some(nodes)) =
            (adapters.map(|(a, s)| (a, s)), adapter_nodes.get(i))
        {
            let [down, up] = nodes[..] else {
                return Err(Error::ShapeMismatch("adaptformer adapter arity".into()));
            };
            // The bottleneck reads the same input the FFN sub-block sees.
            let branch = tape.matmul(h, down);
            let branch = tape.relu(branch);
            let branch = tape.matmul(branch, up);
            let branch = tape.scale(branch, s);
            out = tape.add(out, branch);
        }
        h = out;
    }

    let lnf_g = leaf(tape, &mut leaves, "lnf_g".into(), &backbone.lnf_g, backbone_trainable);
    let lnf_b = leaf(tape, &mut leaves, "lnf_b".into(), &backbone.lnf_b, backbone_trainable);
    h = tape.layer_norm(h, lnf_g, lnf_b);
    let pooled = tape.mean_pool_groups(h, tokens);
    let head_w = leaf(tape, &mut leaves, "head.weight".into(), &backbone.head_w, true);
    let head_b = leaf(tape, &mut leaves, "head.bias".into(), &backbone.head_b, true);
    let logits = tape.matmul(pooled, head_w);
    let logits = tape.add_bias_row(logits, head_b);

    let loss = match labels {
        Some(labels) => Some(tape.cross_entropy(logits, labels.to_vec())),
        None => None,
    };
    Ok(Graph { logits, loss, leaves })
}

/// Flattens a batch of square images into patch rows, batch-major then
/// token-major, pixels row-major within each patch.
pub fn patchify(images: &[Vec<f64>], cfg: &BackboneConfig) -> Tensor {
    let side = cfg.image / cfg.patch;
    let tokens = cfg.tokens();
    let pd = cfg.patch_dim();
    let mut out = Tensor::zeros(images.len() * tokens, pd);
    for (s, img) in images.iter().enumerate() {
        assert_eq!(img.len(), cfg.image * cfg.image, "image size mismatch");
        for ty in 0..side {
            for tx in 0..side {
                let row = out.row_mut(s * tokens + ty * side + tx);
                for py in 0..cfg.patch {
                    for px in 0..cfg.patch {
                        let y = ty * cfg.patch + py;
                        let x = tx * cfg.patch + px;
                        row[py * cfg.patch + px] = img[y * cfg.image + x];
                    }
                }
            }
        }
    }
    out
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    assert_eq!(logits.rows, labels.len());
    let mut correct = 0usize;
    for (r, &label) in labels.iter().enumerate() {
        let row = logits.row(r);
        let mut best = 0usize;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    correct as f64 / labels.len().max(1) as f64
}

/// AdaptFormer layer output on plain tensors:
/// `x + FFN(x) + s * relu(x · down) · up`, where FFN is the frozen
/// sub-block (layer norm, two FC layers with ReLU between).
pub fn forward_adaptformer(x: &Tensor, block: &Block, pair: &AdaptFormerPair, s: f64) -> Tensor {
    let normed = ln_rows(x, &block.ln2_g, &block.ln2_b);
    let ffn = normed.matmul(&block.fc1).relu().matmul(&block.fc2);
    let branch = x.matmul(&pair.down).relu().matmul(&pair.up).scale(s);
    x.add(&ffn).add(&branch)
}

/// LoRA query/value projections on plain tensors:
/// `(x·Wq + s·x·Aq·Bq, x·Wv + s·x·Av·Bv)`.
pub fn forward_lora_qv(
    x: &Tensor,
    wq: &Tensor,
    wv: &Tensor,
    pair: &LoraPair,
    s: f64,
) -> (Tensor, Tensor) {
    let q = x.matmul(wq).add(&x.matmul(&pair.a_q).matmul(&pair.b_q).scale(s));
    let v = x.matmul(wv).add(&x.matmul(&pair.a_v).matmul(&pair.b_v).scale(s));
    (q, v)
}

/// Absorbs a LoRA update into the frozen weight: `W + s·A·B`.
pub fn merge_lora(w: &Tensor, a: &Tensor, b: &Tensor, s: f64) -> Tensor {
    w.add(&a.matmul(b).scale(s))
}

/// Backbone copy with LoRA updates merged into every block's query and
/// value weights.
pub fn merged_backbone(backbone: &ToyBackbone, pairs: &[LoraPair], s: f64) -> ToyBackbone {
    let mut merged = backbone.clone();
    for (block, pair) in merged.blocks.iter_mut().zip(pairs) {
        block.wq = merge_lora(&block.wq, &pair.a_q, &pair.b_q, s);
        block.wv = merge_lora(&block.wv, &pair.a_v, &pair.b_v, s);
    }
    merged
}

fn ln_rows(x: &Tensor, gamma: &Tensor, beta: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(x.rows, x.cols);
    let n = x.cols as f64;
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let is = 1.0 / (var + 1e-5).sqrt();
        let o = out.row_mut(r);
        for c in 0..x.cols {
            o[c] = gamma.data[c] * (row[c] - mean) * is + beta.data[c];
        }
    }
    out
}

/// Mutable lookup of a parameter by name across adapters (first) and the
/// backbone. Trainers use this to route gradients back to their owners.
pub fn param_mut<'a>(
    backbone: &'a mut ToyBackbone,
    adapters: Option<&'a mut Adapters>,
    name: &str,
) -> Option<&'a mut Tensor> {
    if let Some(ad) = adapters {
        if let Some((_, t)) = ad.named_mut().into_iter().find(|(n, _)| n == name) {
            return Some(t);
        }
    }
    backbone.named_mut().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
}

/// A trained model bundle: backbone, optional adapters, and the names of
/// the tensors that were tuned (the targets for parameter-noise probes).
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub backbone: ToyBackbone,
    pub adapters: Option<Adapters>,
    pub scale: f64,
    pub tuned: Vec<String>,
}

impl TrainedModel {
    /// Mutable lookup across backbone and adapter tensors.
    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        if let Some(ad) = &mut self.adapters {
            for (n, t) in ad.named_mut() {
                if n == name {
                    return Some(t);
                }
            }
        }
        self.backbone.named_mut().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        if let Some(ad) = &self.adapters {
            for (n, t) in ad.named() {
                if n == name {
                    return Some(t);
                }
            }
        }
        self.backbone.named().into_iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Returns a copy with i.i.d. Gaussian noise added to every tuned
    /// tensor, scaled per tensor by `sigma_ratio` times that tensor's own
    /// population std. Deterministic under `seed`; the original model is
    /// untouched.
    pub fn add_parameter_noise(&self, sigma_ratio: f64, seed: u64) -> TrainedModel {
        let mut copy = self.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tuned = copy.tuned.clone();
        for name in &tuned {
            let tensor = copy.tensor_mut(name).expect("tuned tensor exists");
            let (_, std) = tensor.mean_std();
            let noise_std = sigma_ratio * std;
            for v in tensor.data.iter_mut() {
                let n: f64 = <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
                *v += noise_std * n;
            }
        }
        copy
    }
}
