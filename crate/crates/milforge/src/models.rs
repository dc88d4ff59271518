//! The MIL heads: max-pooling, attention, gated attention, and the
//! attention variants with instance-level clustering. A head maps one
//! feature bag to class probabilities plus per-class attention weights.

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::features::FeatureBag;
use crate::matrix::Matrix;
use rand::Rng;
use std::io::{Read, Write};
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Variant {
    MaxPool,
    Attention,
    Gated,
    AttentionCluster,
    GatedCluster,
}

impl Variant {
    pub fn gated(self) -> bool {
        matches!(self, Variant::Gated | Variant::GatedCluster)
    }

    pub fn clustered(self) -> bool {
        matches!(self, Variant::AttentionCluster | Variant::GatedCluster)
    }

    pub fn has_attention(self) -> bool {
        !matches!(self, Variant::MaxPool)
    }

    pub fn parse(s: &str) -> Result<Variant> {
        match s {
            "maxpool" => Ok(Variant::MaxPool),
            "attn" => Ok(Variant::Attention),
            "gated" => Ok(Variant::Gated),
            "attn-cluster" => Ok(Variant::AttentionCluster),
            "gated-cluster" => Ok(Variant::GatedCluster),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected maxpool|attn|gated|attn-cluster|gated-cluster)"
            ))),
        }
    }

    pub fn cli_tag(self) -> &'static str {
        match self {
            Variant::MaxPool => "maxpool",
            Variant::Attention => "attn",
            Variant::Gated => "gated",
            Variant::AttentionCluster => "attn-cluster",
            Variant::GatedCluster => "gated-cluster",
        }
    }

    /// Reporting label used in the aggregate table.
    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Gated => "Gated-Attention",
            Variant::Attention => "Attention",
            Variant::GatedCluster => "Gated-attention with clustering",
            Variant::AttentionCluster => "Attention with clustering",
            Variant::MaxPool => "Max-pooling MIL",
        }
    }

    /// Reporting order for aggregate tables.
    pub fn all() -> [Variant; 5] {
        [
            Variant::Gated,
            Variant::Attention,
            Variant::GatedCluster,
            Variant::AttentionCluster,
            Variant::MaxPool,
        ]
    }

    fn tag_byte(self) -> u8 {
        match self {
            Variant::MaxPool => 0,
            Variant::Attention => 1,
            Variant::Gated => 2,
            Variant::AttentionCluster => 3,
            Variant::GatedCluster => 4,
        }
    }

    fn from_tag_byte(b: u8) -> Result<Variant> {
        match b {
            0 => Ok(Variant::MaxPool),
            1 => Ok(Variant::Attention),
            2 => Ok(Variant::Gated),
            3 => Ok(Variant::AttentionCluster),
            4 => Ok(Variant::GatedCluster),
            other => Err(Error::Format(format!("unknown variant tag {other}"))),
        }
    }
}

/// Architecture hyperparameters. Defaults follow the 512/256 backbone;
/// tests shrink them for finite-difference checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub variant: Variant,
    pub d_in: usize,
    /// Width of the compressed instance representation h_k.
    pub inner_dim: usize,
    /// Hidden width of the attention backbone.
    pub attn_dim: usize,
    pub n_classes: usize,
}

impl ModelSpec {
    pub fn new(variant: Variant, d_in: usize, n_classes: usize) -> Self {
        ModelSpec {
            variant,
            d_in,
            inner_dim: 512,
            attn_dim: 256,
            n_classes,
        }
    }

    /// The compression layer exists only when the input dimension differs
    /// from the backbone width.
    pub fn compressed(&self) -> bool {
        self.d_in != self.inner_dim
    }
}

/// All trainable tensors of one head, in a fixed named order.
#[derive(Debug, Clone, PartialEq)]
pub struct MilModelParams {
    pub spec: ModelSpec,
    pub seed: u64,
    names: Vec<String>,
    tensors: Vec<Matrix>,
}

impl MilModelParams {
    /// Seeded Xavier-uniform initialization. Clustering heads draw their
    /// instance-classifier tensors after all shared tensors, so a
    /// clustering head and its plain counterpart share initial weights.
    pub fn init<R: Rng>(spec: ModelSpec, seed: u64, rng: &mut R) -> Self {
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        let weight = |names: &mut Vec<String>, tensors: &mut Vec<Matrix>, name: &str, r, c, rng: &mut R| {
            names.push(name.to_string());
            tensors.push(Matrix::glorot(r, c, rng));
        };
        let bias = |names: &mut Vec<String>, tensors: &mut Vec<Matrix>, name: &str, c| {
            names.push(name.to_string());
            tensors.push(Matrix::zeros(1, c));
        };

        if spec.compressed() {
            weight(&mut names, &mut tensors, "w1", spec.d_in, spec.inner_dim, rng);
            bias(&mut names, &mut tensors, "b1", spec.inner_dim);
        }
        if spec.variant.has_attention() {
            weight(&mut names, &mut tensors, "v", spec.inner_dim, spec.attn_dim, rng);
            bias(&mut names, &mut tensors, "bv", spec.attn_dim);
            if spec.variant.gated() {
                weight(&mut names, &mut tensors, "u", spec.inner_dim, spec.attn_dim, rng);
                bias(&mut names, &mut tensors, "bu", spec.attn_dim);
            }
            weight(&mut names, &mut tensors, "wattn", spec.attn_dim, spec.n_classes, rng);
            for c in 0..spec.n_classes {
                weight(&mut names, &mut tensors, &format!("wslide{c}"), spec.inner_dim, 1, rng);
                bias(&mut names, &mut tensors, &format!("bslide{c}"), 1);
            }
        } else {
            weight(&mut names, &mut tensors, "winst", spec.inner_dim, spec.n_classes, rng);
            bias(&mut names, &mut tensors, "binst", spec.n_classes);
        }
        if spec.variant.clustered() {
            for c in 0..spec.n_classes {
                weight(&mut names, &mut tensors, &format!("wic{c}"), spec.inner_dim, 2, rng);
                bias(&mut names, &mut tensors, &format!("bic{c}"), 2);
            }
        }
        MilModelParams { spec, seed, names, tensors }
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Matrix] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Matrix] {
        &mut self.tensors
    }

    pub fn set_tensors(&mut self, tensors: Vec<Matrix>) -> Result<()> {
        if tensors.len() != self.tensors.len() {
            return Err(Error::Contract("tensor count mismatch".into()));
        }
        for (t, old) in tensors.iter().zip(&self.tensors) {
            if t.shape() != old.shape() {
                return Err(Error::shape("set_tensors", t.shape(), old.shape()));
            }
        }
        self.tensors = tensors;
        Ok(())
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.tensors.iter().map(|t| t.shape()).collect()
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    fn index(&self, name: &str) -> usize {
        self.names
            .iter()
            .position(|n| n == name)
            .unwrap_or_else(|| panic!("missing tensor {name}"))
    }
}

/// Per-class attention vectors and bag representations for one bag.
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// attention[c][k]: weight of instance k in class c's pooling.
    pub attention: Vec<Vec<f64>>,
    /// M x inner bag representations z_c.
    pub bag_reprs: Matrix,
    pub probs: Vec<f64>,
    pub predicted: usize,
}

#[derive(Debug, Clone)]
pub struct MaxPoolOutput {
    pub probs: Vec<f64>,
    pub predicted: usize,
    /// Instance whose class probability decided the slide prediction.
    pub max_instance: usize,
}

/// Top/bottom attended instances and their pseudolabel logits.
#[derive(Debug, Clone)]
pub struct InstancePseudoBatch {
    pub top: Vec<usize>,
    pub bottom: Vec<usize>,
    /// 1 for the top group, 0 for the bottom group, in [top..bottom] order.
    pub pseudolabels: Vec<u8>,
    /// 2B x 2 instance logits, rows in [top..bottom] order.
    pub logits: Matrix,
    /// Set when K < 2 forced a zero-loss skip.
    pub skipped: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct LossConfig {
    /// Weight on the slide cross-entropy term (clustering variants).
    pub c1: f64,
    /// Weight on the instance-clustering term.
    pub c2: f64,
    /// Instances taken from each end of the attention ranking.
    pub b: usize,
    pub dropout_p: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            c1: 0.7,
            c2: 0.3,
            b: 8,
            dropout_p: 0.25,
        }
    }
}

/// Recorded forward pass with handles into the tape.
pub struct ForwardGraph {
    pub tape: Tape,
    pub param_vars: Vec<Var>,
    /// Dropout-adjusted instance representations (K x inner).
    pub h: Var,
    /// M x K attention matrix (attention variants).
    pub attn: Option<Var>,
    pub logits: Var,
    pub probs_var: Var,
    pub probs: Vec<f64>,
    pub predicted: usize,
    pub max_instance: Option<usize>,
}

pub struct LossGraph {
    pub forward: ForwardGraph,
    pub loss: Var,
    pub loss_value: f64,
    pub pseudo: Option<InstancePseudoBatch>,
}

impl MilModelParams {
    /// Run the head forward. `training` enables dropout; eval mode is
    /// bit-deterministic.
    pub fn forward<R: Rng>(
        &self,
        bag: &FeatureBag,
        dropout_p: f64,
        training: bool,
        rng: &mut R,
    ) -> Result<ForwardGraph> {
        let k = bag.num_instances();
        if k == 0 {
            return Err(Error::EmptyBag);
        }
        if bag.dim() != self.spec.d_in {
            return Err(Error::Dimension(format!(
                "bag dimension {} does not match model d_in {}",
                bag.dim(),
                self.spec.d_in
            )));
        }
        let mut tape = Tape::new();
        let param_vars: Vec<Var> = self
            .tensors
            .iter()
            .map(|t| tape.input(t.clone()))
            .collect();
        let pv = |name: &str| param_vars[self.index(name)];

        let x = tape.input(bag.embeddings.clone());
        let h_raw = if self.spec.compressed() {
            let lin = tape.matmul(x, pv("w1"))?;
            let lin = tape.add_row_broadcast(lin, pv("b1"))?;
            tape.relu(lin)
        } else {
            x
        };
        let h = tape.dropout(h_raw, dropout_p, training, rng)?;

        if self.spec.variant.has_attention() {
            let t_lin = tape.matmul(h, pv("v"))?;
            let t_lin = tape.add_row_broadcast(t_lin, pv("bv"))?;
            let t_act = tape.tanh_elem(t_lin);
            let branch = if self.spec.variant.gated() {
                let g_lin = tape.matmul(h, pv("u"))?;
                let g_lin = tape.add_row_broadcast(g_lin, pv("bu"))?;
                let g_act = tape.sigm_elem(g_lin);
                tape.elem_mul(t_act, g_act)?
            } else {
                t_act
            };
            let scores = tape.matmul(branch, pv("wattn"))?; // K x M
            let scores_t = tape.transpose(scores); // M x K
            let attn = tape.softmax_rows(scores_t); // rows sum to 1 per class
            let z = tape.matmul(attn, h)?; // M x inner

            let mut logit_parts = Vec::with_capacity(self.spec.n_classes);
            for c in 0..self.spec.n_classes {
                let zc = tape.row_select(z, c)?;
                let lc = tape.matmul(zc, pv(&format!("wslide{c}")))?;
                let lc = tape.add(lc, pv(&format!("bslide{c}")))?;
                logit_parts.push(lc);
            }
            let logits = tape.concat_scalars(&logit_parts)?;
            let probs_var = tape.softmax_rows(logits);
            let probs = tape.value(probs_var).data.clone();
            let predicted = argmax(&probs);
            Ok(ForwardGraph {
                tape,
                param_vars,
                h,
                attn: Some(attn),
                logits,
                probs_var,
                probs,
                predicted,
                max_instance: None,
            })
        } else {
            let lin = tape.matmul(h, pv("winst"))?;
            let inst_logits = tape.add_row_broadcast(lin, pv("binst"))?; // K x M
            let inst_probs = tape.softmax_rows(inst_logits);
            // locate the single highest instance-class probability
            let pvals = tape.value(inst_probs);
            let mut best = (0usize, 0usize, f64::NEG_INFINITY);
            for r in 0..pvals.rows {
                for c in 0..pvals.cols {
                    let v = pvals.at(r, c);
                    if v > best.2 {
                        best = (r, c, v);
                    }
                }
            }
            let (k_star, m_star, _) = best;
            let logits = tape.row_select(inst_logits, k_star)?;
            let probs_var = tape.row_select(inst_probs, k_star)?;
            let probs = tape.value(probs_var).data.clone();
            Ok(ForwardGraph {
                tape,
                param_vars,
                h,
                attn: None,
                logits,
                probs_var,
                probs,
                predicted: m_star,
                max_instance: Some(k_star),
            })
        }
    }

    /// Cross-entropy slide loss, plus the weighted instance-clustering term
    /// for the clustering variants.
    pub fn loss_graph<R: Rng>(
        &self,
        bag: &FeatureBag,
        cfg: &LossConfig,
        training: bool,
        rng: &mut R,
    ) -> Result<LossGraph> {
        let label = bag
            .label
            .ok_or_else(|| Error::Contract("bag has no label".into()))?;
        if label >= self.spec.n_classes {
            return Err(Error::Contract(format!(
                "label {label} out of {} classes",
                self.spec.n_classes
            )));
        }
        let mut fwd = self.forward(bag, cfg.dropout_p, training, rng)?;
        let ce = fwd.tape.cross_entropy_logits(fwd.logits, label)?;

        let (loss, pseudo) = if self.spec.variant.clustered() {
            let scaled_ce = fwd.tape.scale(ce, cfg.c1);
            if cfg.c2 != 0.0 {
                let (cl_loss, batch) = self.clustering_term(&mut fwd, label, cfg.b)?;
                match cl_loss {
                    Some(cl) => {
                        let scaled_cl = fwd.tape.scale(cl, cfg.c2);
                        (fwd.tape.add(scaled_ce, scaled_cl)?, Some(batch))
                    }
                    None => (scaled_ce, Some(batch)),
                }
            } else {
                (scaled_ce, None)
            }
        } else {
            (ce, None)
        };
        let loss_value = fwd.tape.value(loss).data[0];
        Ok(LossGraph {
            forward: fwd,
            loss,
            loss_value,
            pseudo,
        })
    }

    /// Smooth-hinge separation between the B most and B least attended
    /// instances of the true class. K < 2 yields a zero-loss skip.
    fn clustering_term(
        &self,
        fwd: &mut ForwardGraph,
        label: usize,
        b: usize,
    ) -> Result<(Option<Var>, InstancePseudoBatch)> {
        let attn_var = fwd
            .attn
            .ok_or_else(|| Error::Contract("clustering requires an attention head".into()))?;
        let weights: Vec<f64> = fwd.tape.value(attn_var).row(label).to_vec();
        let k = weights.len();
        if k < 2 {
            log::warn!("bag with K={k}: clustering skipped");
            return Ok((
                None,
                InstancePseudoBatch {
                    top: vec![],
                    bottom: vec![],
                    pseudolabels: vec![],
                    logits: Matrix::zeros(0, 2),
                    skipped: true,
                },
            ));
        }
        let b_eff = b.min(k / 2).max(1);
        let mut order: Vec<usize> = (0..k).collect();
        order.sort_by(|&i, &j| {
            weights[j]
                .partial_cmp(&weights[i])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(i.cmp(&j))
        });
        let top: Vec<usize> = order[..b_eff].to_vec();
        let bottom: Vec<usize> = order[k - b_eff..].to_vec();
        let idx: Vec<usize> = top.iter().chain(bottom.iter()).cloned().collect();

        let g = fwd.tape.gather_rows(fwd.h, &idx)?;
        let wic = fwd.param_vars[self.index(&format!("wic{label}"))];
        let bic = fwd.param_vars[self.index(&format!("bic{label}"))];
        let lin = fwd.tape.matmul(g, wic)?;
        let inst_logits = fwd.tape.add_row_broadcast(lin, bic)?; // 2B x 2
        // signed margin: (logit_1 - logit_0) * (+1 for top, -1 for bottom)
        let diff_w = fwd.tape.input(Matrix::from_rows(&[vec![-1.0], vec![1.0]]));
        let diff = fwd.tape.matmul(inst_logits, diff_w)?;
        let mut signs = vec![1.0; b_eff];
        signs.extend(vec![-1.0; b_eff]);
        let sign_m = fwd.tape.input(Matrix::from_vec(2 * b_eff, 1, signs));
        let margins = fwd.tape.elem_mul(diff, sign_m)?;
        let hinge = fwd.tape.smooth_hinge_elem(margins);
        let total = fwd.tape.sum(hinge);
        let mean = fwd.tape.scale(total, 1.0 / (2.0 * b_eff as f64));

        let mut pseudolabels = vec![1u8; b_eff];
        pseudolabels.extend(vec![0u8; b_eff]);
        let batch = InstancePseudoBatch {
            top,
            bottom,
            pseudolabels,
            logits: fwd.tape.value(inst_logits).clone(),
            skipped: false,
        };
        Ok((Some(mean), batch))
    }

    /// Gradient of the recorded loss w.r.t. every parameter tensor.
    pub fn param_grads(&self, graph: &LossGraph) -> Result<Vec<Matrix>> {
        let grads: Gradients = graph.forward.tape.backward(graph.loss)?;
        Ok(self
            .tensors
            .iter()
            .zip(&graph.forward.param_vars)
            .map(|(t, &v)| grads.get(v, t.shape()))
            .collect())
    }

    /// Eval-mode attention output. Errors for the max-pooling head.
    pub fn attention_output(&self, bag: &FeatureBag) -> Result<AttentionOutput> {
        if !self.spec.variant.has_attention() {
            return Err(Error::Contract(
                "max-pooling head has no attention output".into(),
            ));
        }
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let fwd = self.forward(bag, 0.0, false, &mut rng)?;
        let attn_var = fwd.attn.expect("attention head");
        let attn_m = fwd.tape.value(attn_var);
        let attention = (0..self.spec.n_classes)
            .map(|c| attn_m.row(c).to_vec())
            .collect();
        // recompute z from the eval-mode graph
        let h = fwd.tape.value(fwd.h);
        let bag_reprs = attn_m.matmul(h)?;
        Ok(AttentionOutput {
            attention,
            bag_reprs,
            probs: fwd.probs.clone(),
            predicted: fwd.predicted,
        })
    }

    pub fn maxpool_output(&self, bag: &FeatureBag) -> Result<MaxPoolOutput> {
        if self.spec.variant.has_attention() {
            return Err(Error::Contract("not a max-pooling head".into()));
        }
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let fwd = self.forward(bag, 0.0, false, &mut rng)?;
        Ok(MaxPoolOutput {
            probs: fwd.probs.clone(),
            predicted: fwd.predicted,
            max_instance: fwd.max_instance.expect("maxpool head"),
        })
    }

    /// Eval-mode class probabilities for any variant.
    pub fn predict(&self, bag: &FeatureBag) -> Result<(Vec<f64>, usize)> {
        let mut rng = rand::rngs::mock::StepRng::new(0, 1);
        let fwd = self.forward(bag, 0.0, false, &mut rng)?;
        Ok((fwd.probs.clone(), fwd.predicted))
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

// ---- checkpoint format ----

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MILC";
pub const CHECKPOINT_VERSION: u16 = 1;

pub fn encode_checkpoint(model: &MilModelParams) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.push(model.spec.variant.tag_byte());
    buf.extend_from_slice(&(model.spec.d_in as u32).to_le_bytes());
    buf.extend_from_slice(&(model.spec.inner_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(model.spec.attn_dim as u32).to_le_bytes());
    buf.extend_from_slice(&(model.spec.n_classes as u16).to_le_bytes());
    buf.extend_from_slice(&model.seed.to_le_bytes());
    buf.extend_from_slice(&(model.tensors.len() as u16).to_le_bytes());
    for (name, t) in model.names.iter().zip(&model.tensors) {
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rows as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols as u32).to_le_bytes());
    }
    let payload_start = buf.len();
    for t in &model.tensors {
        for &v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf[payload_start..]);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn decode_checkpoint(data: &[u8]) -> Result<MilModelParams> {
    let need = |pos: usize, n: usize| -> Result<()> {
        if pos + n > data.len() {
            Err(Error::Format(format!(
                "truncated checkpoint at offset {pos} (need {n} bytes)"
            )))
        } else {
            Ok(())
        }
    };
    let mut pos = 0usize;
    macro_rules! take {
        ($n:expr) => {{
            need(pos, $n)?;
            let s = &data[pos..pos + $n];
            pos += $n;
            s
        }};
    }
    let magic = take!(4);
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!("bad checkpoint magic {magic:02x?}")));
    }
    let version = u16::from_le_bytes(take!(2).try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let variant = Variant::from_tag_byte(take!(1)[0])?;
    let d_in = u32::from_le_bytes(take!(4).try_into().unwrap()) as usize;
    let inner_dim = u32::from_le_bytes(take!(4).try_into().unwrap()) as usize;
    let attn_dim = u32::from_le_bytes(take!(4).try_into().unwrap()) as usize;
    let n_classes = u16::from_le_bytes(take!(2).try_into().unwrap()) as usize;
    let seed = u64::from_le_bytes(take!(8).try_into().unwrap());
    let n_tensors = u16::from_le_bytes(take!(2).try_into().unwrap()) as usize;
    if d_in == 0 || inner_dim == 0 || n_classes == 0 || n_tensors == 0 || n_tensors > 1024 {
        return Err(Error::Format("degenerate checkpoint header".into()));
    }
    let mut names = Vec::with_capacity(n_tensors);
    let mut shapes = Vec::with_capacity(n_tensors);
    let mut total = 0usize;
    for _ in 0..n_tensors {
        let name_len = u16::from_le_bytes(take!(2).try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take!(name_len))
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rows = u32::from_le_bytes(take!(4).try_into().unwrap()) as usize;
        let cols = u32::from_le_bytes(take!(4).try_into().unwrap()) as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Format("tensor shape overflow".into()))?;
        total = total
            .checked_add(n)
            .ok_or_else(|| Error::Format("tensor shape overflow".into()))?;
        names.push(name);
        shapes.push((rows, cols));
    }
    let payload_len = total
        .checked_mul(8)
        .ok_or_else(|| Error::Format("payload overflow".into()))?;
    let payload = take!(payload_len);
    let stored_crc = u32::from_le_bytes(take!(4).try_into().unwrap());
    let crc = crc32fast::hash(payload);
    if crc != stored_crc {
        return Err(Error::Format(format!(
            "checkpoint checksum mismatch: computed {crc:08x}, stored {stored_crc:08x}"
        )));
    }
    if pos != data.len() {
        return Err(Error::Format("trailing bytes after checkpoint checksum".into()));
    }
    let mut tensors = Vec::with_capacity(n_tensors);
    let mut off = 0usize;
    for &(r, c) in &shapes {
        let n = r * c;
        let mut vals = Vec::with_capacity(n);
        for chunk in payload[off * 8..(off + n) * 8].chunks_exact(8) {
            vals.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        off += n;
        tensors.push(Matrix::from_vec(r, c, vals));
    }
    Ok(MilModelParams {
        spec: ModelSpec {
            variant,
            d_in,
            inner_dim,
            attn_dim,
            n_classes,
        },
        seed,
        names,
        tensors,
    })
}

pub fn save_checkpoint(model: &MilModelParams, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_checkpoint(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<MilModelParams> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    decode_checkpoint(&data)
}
