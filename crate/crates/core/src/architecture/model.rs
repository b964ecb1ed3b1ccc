use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::ModelConfig;
use crate::error::{Error, Result};
use crate::numerics::{he_uniform, BatchStats, Graph, ParamId, ParamStore, Tensor, UpsampleMode, Var};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvLayer {
    weight: ParamId,
    bias: ParamId,
    pad: usize,
}

impl ConvLayer {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), he_uniform(rng, &[cout, cin, k], cin * k), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[cout]), true);
        ConvLayer { weight, bias, pad: (k - 1) / 2 }
    }

    pub(crate) fn apply(&self, store: &ParamStore, g: &mut Graph, x: Var) -> Result<Var> {
        let w = store.bind(g, self.weight)?;
        let b = store.bind(g, self.bias)?;
        g.conv1d(x, w, b, self.pad)
    }
}

#[derive(Clone, Copy, Debug)]
struct NormLayer {
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

impl NormLayer {
    fn new(store: &mut ParamStore, name: &str, c: usize) -> Self {
        NormLayer {
            gamma: store.add(format!("{name}.gamma"), Tensor::full(&[c], 1.0), true),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[c]), true),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[c]), false),
            running_var: store.add(format!("{name}.running_var"), Tensor::full(&[c], 1.0), false),
        }
    }

    fn apply(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        x: Var,
        mode: Mode,
        pending: &mut Vec<(NormLayer, BatchStats)>,
    ) -> Result<Var> {
        let gamma = store.bind(g, self.gamma)?;
        let beta = store.bind(g, self.beta)?;
        match mode {
            Mode::Train => {
                let (y, stats) = g.batchnorm1d(x, gamma, beta, None)?;
                if let Some(s) = stats {
                    pending.push((*self, s));
                }
                Ok(y)
            }
            Mode::Eval => {
                let rm = store.get(self.running_mean).data();
                let rv = store.get(self.running_var).data();
                Ok(g.batchnorm1d(x, gamma, beta, Some((rm, rv)))?.0)
            }
        }
    }
}

/// conv → norm → relu → conv → norm → relu
#[derive(Clone, Debug)]
struct DoubleConv {
    conv1: ConvLayer,
    norm1: NormLayer,
    conv2: ConvLayer,
    norm2: NormLayer,
}

impl DoubleConv {
    fn new<R: Rng>(store: &mut ParamStore, rng: &mut R, name: &str, cin: usize, cout: usize, k: usize) -> Self {
        DoubleConv {
            conv1: ConvLayer::new(store, rng, &format!("{name}.conv1"), cin, cout, k),
            norm1: NormLayer::new(store, &format!("{name}.bn1"), cout),
            conv2: ConvLayer::new(store, rng, &format!("{name}.conv2"), cout, cout, k),
            norm2: NormLayer::new(store, &format!("{name}.bn2"), cout),
        }
    }

    /// Applies the block to each sequence of a batch; training-mode
    /// normalization statistics are shared across the batch.
    fn apply(
        &self,
        store: &ParamStore,
        g: &mut Graph,
        xs: &[Var],
        mode: Mode,
        pending: &mut Vec<(NormLayer, BatchStats)>,
    ) -> Result<Vec<Var>> {
        let h = xs.iter().map(|&x| self.conv1.apply(store, g, x)).collect::<Result<Vec<_>>>()?;
        let h = norm_relu(&self.norm1, store, g, &h, mode, pending)?;
        let h = h.iter().map(|&x| self.conv2.apply(store, g, x)).collect::<Result<Vec<_>>>()?;
        norm_relu(&self.norm2, store, g, &h, mode, pending)
    }
}

/// Normalizes the sequences of a batch jointly, then applies ReLU.
fn norm_relu(
    norm: &NormLayer,
    store: &ParamStore,
    g: &mut Graph,
    xs: &[Var],
    mode: Mode,
    pending: &mut Vec<(NormLayer, BatchStats)>,
) -> Result<Vec<Var>> {
    if xs.len() == 1 || mode == Mode::Eval {
        return xs
            .iter()
            .map(|&x| {
                let y = norm.apply(store, g, x, mode, pending)?;
                g.relu(y)
            })
            .collect();
    }
    let lens: Vec<usize> = xs.iter().map(|&x| g.shape(x)[1]).collect();
    let joined = g.concat_cols(xs)?;
    let y = norm.apply(store, g, joined, mode, pending)?;
    let y = g.relu(y)?;
    let mut start = 0;
    let mut out = Vec::with_capacity(xs.len());
    for len in lens {
        out.push(g.slice_cols(y, start, len)?);
        start += len;
    }
    Ok(out)
}

/// Per-decoder linear projections to class probabilities.
#[derive(Clone, Debug)]
pub struct Heads {
    store: ParamStore,
    layers: Vec<ConvLayer>,
    num_classes: usize,
    upsample_mode: UpsampleMode,
}

impl Heads {
    pub fn new(cfg: &ModelConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Heads::with_rng(cfg, &mut rng)
    }

    fn with_rng<R: Rng>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let mut store = ParamStore::new();
        let layers = cfg
            .decoder_channels
            .iter()
            .enumerate()
            .map(|(u, &c)| ConvLayer::new(&mut store, rng, &format!("head.{u}"), c, cfg.num_classes, 1))
            .collect();
        Heads {
            store,
            layers,
            num_classes: cfg.num_classes,
            upsample_mode: cfg.upsample_mode,
        }
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Fills `out.p` with softmaxed per-layer predictions upsampled to the
    /// input length.
    pub fn attach(&self, g: &mut Graph, out: &mut DecoderOutputs) -> Result<()> {
        if out.z.len() != self.layers.len() {
            return Err(Error::Shape(format!(
                "{} decoder outputs for {} heads",
                out.z.len(),
                self.layers.len()
            )));
        }
        out.p.clear();
        for (layer, &z) in self.layers.iter().zip(&out.z) {
            let logits = layer.apply(&self.store, g, z)?;
            let p = g.softmax(logits)?;
            let p = g.upsample1d(p, out.t_padded, self.upsample_mode)?;
            let p = if out.t_padded != out.t_in {
                g.slice_cols(p, 0, out.t_in)?
            } else {
                p
            };
            out.p.push(p);
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ActivityHead {
    store: ParamStore,
    fc1: ConvLayer,
    fc2: ConvLayer,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct DecoderOutputs {
    /// Decoder features `[channels × ⌈T/2^(depth-u)⌉]`, coarsest first.
    pub z: Vec<Var>,
    /// Class probabilities `[classes × t_in]` per decoder layer (empty until heads run).
    pub p: Vec<Var>,
    /// Final encoder feature `[channels × ⌈T/2^depth⌉]`.
    pub f_en: Var,
    /// Length of the caller's input.
    pub t_in: usize,
    /// Length after edge padding to the minimum the network accepts.
    pub t_padded: usize,
}

/// The encoder / pyramid-pooling bottleneck / decoder network plus its heads.
#[derive(Clone, Debug)]
pub struct Model {
    cfg: ModelConfig,
    store: ParamStore,
    encoder: Vec<DoubleConv>,
    tpp_collapse: ConvLayer,
    bottleneck: ConvLayer,
    decoder: Vec<DoubleConv>,
    pub heads: Heads,
    activity: Option<ActivityHead>,
}

impl Model {
    /// Builds and initializes every parameter deterministically from `seed`.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let k = cfg.kernel;
        let mut encoder = Vec::with_capacity(cfg.depth + 1);
        let mut cin = cfg.input_dim;
        for (u, &c) in cfg.encoder_channels.iter().enumerate() {
            encoder.push(DoubleConv::new(&mut store, &mut rng, &format!("enc.{u}"), cin, c, k));
            cin = c;
        }
        let en = cfg.encoder_channels[cfg.depth];
        let tpp_collapse = ConvLayer::new(&mut store, &mut rng, "tpp.collapse", en, 1, 1);
        let bc = cfg.bottleneck_channels();
        let bottleneck = ConvLayer::new(&mut store, &mut rng, "bottleneck", bc, bc, 3);
        let mut decoder = Vec::with_capacity(cfg.depth);
        let mut prev = bc;
        for u in 1..=cfg.depth {
            let skip = if cfg.skip_connections { cfg.encoder_channels[cfg.depth - u] } else { 0 };
            let out = cfg.decoder_channels[u - 1];
            decoder.push(DoubleConv::new(&mut store, &mut rng, &format!("dec.{}", u - 1), prev + skip, out, k));
            prev = out;
        }
        let heads = Heads::with_rng(&cfg, &mut rng);
        let activity = (cfg.num_activities > 0).then(|| {
            let mut st = ParamStore::new();
            let fc1 = ConvLayer::new(&mut st, &mut rng, "activity.fc1", en, cfg.activity_hidden, 1);
            let fc2 = ConvLayer::new(&mut st, &mut rng, "activity.fc2", cfg.activity_hidden, cfg.num_activities, 1);
            ActivityHead { store: st, fc1, fc2 }
        });
        Ok(Model {
            cfg,
            store,
            encoder,
            tpp_collapse,
            bottleneck,
            decoder,
            heads,
            activity,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Backbone parameters (encoder, bottleneck, decoder) and norm buffers.
    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn activity_params(&self) -> Option<&ParamStore> {
        self.activity.as_ref().map(|a| &a.store)
    }

    pub fn activity_params_mut(&mut self) -> Option<&mut ParamStore> {
        self.activity.as_mut().map(|a| &mut a.store)
    }

    /// Trainable scalars across backbone, heads and activity head.
    pub fn num_parameters(&self) -> usize {
        self.store.num_trainable()
            + self.heads.params().num_trainable()
            + self.activity.as_ref().map_or(0, |a| a.store.num_trainable())
    }

    /// Every stored tensor (backbone, heads, activity head) in a fixed order.
    pub fn all_stores(&self) -> Vec<&ParamStore> {
        let mut v = vec![&self.store, self.heads.params()];
        if let Some(a) = &self.activity {
            v.push(&a.store);
        }
        v
    }

    pub(crate) fn all_stores_mut(&mut self) -> Vec<&mut ParamStore> {
        let mut v = vec![&mut self.store, &mut self.heads.store];
        if let Some(a) = &mut self.activity {
            v.push(&mut a.store);
        }
        v
    }

    fn input_var(&self, g: &mut Graph, v: &Tensor) -> Result<(Var, usize, usize)> {
        let shape = v.shape();
        if shape.len() != 2 || shape[1] != self.cfg.input_dim {
            return Err(Error::Shape(format!(
                "expected features [T x {}], got {:?}",
                self.cfg.input_dim, shape
            )));
        }
        let t_in = shape[0];
        if t_in == 0 {
            return Err(Error::Shape("empty video".into()));
        }
        v.ensure_finite("input features")?;
        let min = self.cfg.min_len();
        let t_padded = t_in.max(min);
        let mut x = v.transpose();
        if t_padded > t_in {
            let f = self.cfg.input_dim;
            let mut data = vec![0.0; f * t_padded];
            for c in 0..f {
                let row = &x.data()[c * t_in..(c + 1) * t_in];
                let dst = &mut data[c * t_padded..(c + 1) * t_padded];
                dst[..t_in].copy_from_slice(row);
                let last = row[t_in - 1];
                dst[t_in..].iter_mut().for_each(|d| *d = last);
            }
            x = Tensor::new(vec![f, t_padded], data)?;
        }
        Ok((g.constant(x)?, t_in, t_padded))
    }

    /// Encoder features per level, each holding one entry per sequence.
    fn encode(
        &self,
        g: &mut Graph,
        xs: &[Var],
        mode: Mode,
        pending: &mut Vec<(NormLayer, BatchStats)>,
    ) -> Result<Vec<Vec<Var>>> {
        let mut feats = Vec::with_capacity(self.cfg.depth + 1);
        let mut h = self.encoder[0].apply(&self.store, g, xs, mode, pending)?;
        feats.push(h.clone());
        for layer in &self.encoder[1..] {
            let pooled = h.iter().map(|&x| g.maxpool1d_ceil(x, 2)).collect::<Result<Vec<_>>>()?;
            h = layer.apply(&self.store, g, &pooled, mode, pending)?;
            feats.push(h.clone());
        }
        Ok(feats)
    }

    /// Temporal pyramid pooling: per window, max-pool to `max(1, ⌊T/w⌋)`,
    /// collapse channels with a shared kernel-1 convolution, upsample back and
    /// concatenate behind the input channels.
    pub fn tpp_bottleneck(&self, g: &mut Graph, f_en: Var) -> Result<Var> {
        let t_en = g.shape(f_en)[1];
        let mut parts = vec![f_en];
        for &w in &self.cfg.tpp_windows {
            let n = (t_en / w).max(1);
            let pooled = g.maxpool1d(f_en, w, n)?;
            let collapsed = self.tpp_collapse.apply(&self.store, g, pooled)?;
            parts.push(g.upsample1d(collapsed, t_en, self.cfg.upsample_mode)?);
        }
        if parts.len() == 1 {
            return Ok(f_en);
        }
        g.concat(&parts)
    }

    #[allow(clippy::type_complexity)]
    fn run(
        &self,
        g: &mut Graph,
        vs: &[&Tensor],
        mode: Mode,
    ) -> Result<(Vec<DecoderOutputs>, Vec<(NormLayer, BatchStats)>)> {
        if vs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut xs = Vec::with_capacity(vs.len());
        let mut lens = Vec::with_capacity(vs.len());
        for v in vs {
            let (x, t_in, t_padded) = self.input_var(g, v)?;
            xs.push(x);
            lens.push((t_in, t_padded));
        }
        let mut pending = Vec::new();
        let enc = self.encode(g, &xs, mode, &mut pending)?;
        let depth = self.cfg.depth;
        let mut d = Vec::with_capacity(vs.len());
        for &f_en in &enc[depth] {
            let pooled = self.tpp_bottleneck(g, f_en)?;
            d.push(self.bottleneck.apply(&self.store, g, pooled)?);
        }
        let mut z: Vec<Vec<Var>> = vec![Vec::with_capacity(depth); vs.len()];
        for u in 1..=depth {
            let mut inputs = Vec::with_capacity(vs.len());
            for (n, &dn) in d.iter().enumerate() {
                let skip = enc[depth - u][n];
                let len = g.shape(skip)[1];
                let up = g.upsample1d(dn, len, self.cfg.upsample_mode)?;
                inputs.push(if self.cfg.skip_connections { g.concat(&[up, skip])? } else { up });
            }
            d = self.decoder[u - 1].apply(&self.store, g, &inputs, mode, &mut pending)?;
            for (zn, &dn) in z.iter_mut().zip(&d) {
                zn.push(dn);
            }
        }
        let outs = z
            .into_iter()
            .enumerate()
            .map(|(n, z)| DecoderOutputs {
                z,
                p: Vec::new(),
                f_en: enc[depth][n],
                t_in: lens[n].0,
                t_padded: lens[n].1,
            })
            .collect();
        Ok((outs, pending))
    }

    fn commit_stats(&mut self, pending: Vec<(NormLayer, BatchStats)>) {
        for (norm, stats) in pending {
            let rm = self.store.get_mut(norm.running_mean);
            for (r, m) in rm.data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = self.store.get_mut(norm.running_var);
            for (r, v) in rv.data_mut().iter_mut().zip(&stats.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }

    /// Decoder features only; heads are not applied. Train mode updates the
    /// running normalization statistics.
    pub fn features(&mut self, g: &mut Graph, v: &Tensor, mode: Mode) -> Result<DecoderOutputs> {
        Ok(self.features_batch(g, &[v], mode)?.remove(0))
    }

    /// Decoder features for several sequences in one graph. In train mode the
    /// normalization statistics are computed over the whole batch.
    pub fn features_batch(&mut self, g: &mut Graph, vs: &[&Tensor], mode: Mode) -> Result<Vec<DecoderOutputs>> {
        let (outs, pending) = self.run(g, vs, mode)?;
        self.commit_stats(pending);
        Ok(outs)
    }

    /// Eval-mode decoder features.
    pub fn features_eval(&self, g: &mut Graph, v: &Tensor) -> Result<DecoderOutputs> {
        Ok(self.run(g, &[v], Mode::Eval)?.0.remove(0))
    }

    /// Full forward pass through backbone and owned heads.
    pub fn forward(&mut self, g: &mut Graph, v: &Tensor, mode: Mode) -> Result<DecoderOutputs> {
        Ok(self.forward_batch(g, &[v], mode)?.remove(0))
    }

    /// Batched [`Model::forward`].
    pub fn forward_batch(&mut self, g: &mut Graph, vs: &[&Tensor], mode: Mode) -> Result<Vec<DecoderOutputs>> {
        let mut outs = self.features_batch(g, vs, mode)?;
        for out in &mut outs {
            self.heads.attach(g, out)?;
        }
        Ok(outs)
    }

    /// Eval-mode forward pass through backbone and owned heads.
    pub fn forward_eval(&self, g: &mut Graph, v: &Tensor) -> Result<DecoderOutputs> {
        let mut out = self.features_eval(g, v)?;
        self.heads.attach(g, &mut out)?;
        Ok(out)
    }

    /// Video-level activity probabilities `[activities × 1]` from the
    /// temporally max-pooled final encoder feature.
    pub fn activity_probs(&mut self, g: &mut Graph, v: &Tensor, mode: Mode) -> Result<Var> {
        Ok(self.activity_probs_batch(g, &[v], mode)?.remove(0))
    }

    /// Batched [`Model::activity_probs`].
    pub fn activity_probs_batch(&mut self, g: &mut Graph, vs: &[&Tensor], mode: Mode) -> Result<Vec<Var>> {
        let (p, pending) = self.activity_run(g, vs, mode)?;
        self.commit_stats(pending);
        Ok(p)
    }

    pub fn activity_probs_eval(&self, g: &mut Graph, v: &Tensor) -> Result<Var> {
        Ok(self.activity_run(g, &[v], Mode::Eval)?.0.remove(0))
    }

    #[allow(clippy::type_complexity)]
    fn activity_run(
        &self,
        g: &mut Graph,
        vs: &[&Tensor],
        mode: Mode,
    ) -> Result<(Vec<Var>, Vec<(NormLayer, BatchStats)>)> {
        if self.activity.is_none() {
            return Err(Error::Config("activity head is disabled (num_activities = 0)".into()));
        }
        if vs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let xs = vs
            .iter()
            .map(|v| Ok(self.input_var(g, v)?.0))
            .collect::<Result<Vec<_>>>()?;
        let mut pending = Vec::new();
        let enc = self.encode(g, &xs, mode, &mut pending)?;
        let p = enc[self.cfg.depth]
            .iter()
            .map(|&f| self.activity_from_encoder(g, f))
            .collect::<Result<Vec<_>>>()?;
        Ok((p, pending))
    }

    /// Applies the activity MLP to an encoder feature `[channels × t]`.
    pub fn activity_from_encoder(&self, g: &mut Graph, f_en: Var) -> Result<Var> {
        let head = self
            .activity
            .as_ref()
            .ok_or_else(|| Error::Config("activity head is disabled (num_activities = 0)".into()))?;
        let h = g.max_cols(f_en)?;
        let h = head.fc1.apply(&head.store, g, h)?;
        let h = g.relu(h)?;
        let logits = head.fc2.apply(&head.store, g, h)?;
        g.softmax(logits)
    }
}
