//! The same-resolution plate restoration network.
//!
//! Data flow for a `3 x H x W` input with width `C` and shuffle factor `r`:
//!
//! ```text
//! SFE:   5x5 conv (3->C) = psfe
//!        3x3 conv + ReLU -> PU(r) -> 3x3 conv + ReLU -> PS(r) -> 3x3 aggregation conv
//!        + psfe
//! RCB x num_rcb:
//!        residual units (3x3 conv, ReLU, 3x3 conv, + skip) chained, outputs concatenated
//!        -> 1x1 fusion -> attention gate -> + block input
//! FM:    concat(all RCB outputs) -> 1x1 -> 3x3, + SFE output (long skip)
//! Recon: 1x1 (C -> C r^2) -> PS(r) -> recon blocks (3x3, ReLU, 3x3, ReLU)
//!        -> PU(r) -> 3x3 (C r^2 -> 3) -> sigmoid
//! ```
//!
//! The residual concatenation block is a reconstruction of the MPRNet design
//! (whose code was never released): residual units, concatenation, 1x1 fusion
//! and an attention gate.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::nn::Conv2d;
use crate::params::{load_checkpoint, save_checkpoint, ParamStore};
use crate::pixelops::ImageTensor;
use crate::tensor::Tensor;

/// Which attention gate the residual concatenation blocks use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    /// PixelShuffle two-fold attention (the proposed module).
    #[default]
    Pltfam,
    /// Pooling/interpolation two-fold attention (baseline).
    Tfam,
    None,
}

impl std::fmt::Display for AttentionKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttentionKind::Pltfam => "pltfam",
            AttentionKind::Tfam => "tfam",
            AttentionKind::None => "none",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub channels: usize,
    pub num_rcb: usize,
    pub units_per_rcb: usize,
    pub shuffle_factor: usize,
    pub attention: AttentionKind,
    pub recon_blocks: usize,
    /// Share one set of weights across all reconstruction blocks.
    pub tie_recon_weights: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 64,
            num_rcb: 4,
            units_per_rcb: 3,
            shuffle_factor: 2,
            attention: AttentionKind::Pltfam,
            recon_blocks: 7,
            tie_recon_weights: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let r = self.shuffle_factor;
        let c = self.channels;
        let fail = |m: String| Err(Error::config(m));
        if r == 0 {
            return fail("shuffle_factor must be positive".into());
        }
        if c == 0 || !c.is_multiple_of(4) {
            return fail(format!("channels must be a positive multiple of 4, got {c}"));
        }
        if !c.is_multiple_of(r * r) {
            return fail(format!("channels {c} not divisible by shuffle_factor^2 = {}", r * r));
        }
        if self.num_rcb == 0 {
            return fail("num_rcb must be positive".into());
        }
        if self.units_per_rcb == 0 {
            return fail("units_per_rcb must be positive".into());
        }
        if self.recon_blocks == 0 {
            return fail("recon_blocks must be positive".into());
        }
        if self.attention == AttentionKind::Pltfam && !(c / (r * r)).is_multiple_of(2) {
            return fail(format!(
                "PLTFAM splits the {} channels left after PS({r}) into halves; that count must be even",
                c / (r * r)
            ));
        }
        Ok(())
    }

    /// Inputs must be divisible by `r²` in both spatial dimensions.
    pub fn check_input(&self, c: usize, h: usize, w: usize) -> Result<()> {
        let rr = self.shuffle_factor * self.shuffle_factor;
        if c != 3 {
            return Err(Error::shape(format!("network input needs 3 channels, got {c}")));
        }
        if !h.is_multiple_of(rr) || !w.is_multiple_of(rr) {
            return Err(Error::shape(format!(
                "input {h}x{w} not divisible by r^2 = {rr}"
            )));
        }
        if self.attention == AttentionKind::Tfam && (!h.is_multiple_of(2) || !w.is_multiple_of(2)) {
            return Err(Error::shape(format!("TFAM needs even input dims, got {h}x{w}")));
        }
        Ok(())
    }
}

/// Shallow feature extractor with the PU/PS autoencoder.
#[derive(Clone, Debug)]
pub struct Sfe {
    r: usize,
    psfe: Conv2d,
    conv: Conv2d,
    bottleneck: Conv2d,
    aggregate: Conv2d,
}

impl Sfe {
    fn new(store: &mut ParamStore, c: usize, r: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            r,
            psfe: Conv2d::new(store, "sfe.psfe", 3, c, 5, rng),
            conv: Conv2d::new(store, "sfe.conv", c, c, 3, rng),
            bottleneck: Conv2d::new(store, "sfe.bottleneck", c * r * r, c * r * r, 3, rng),
            aggregate: Conv2d::new(store, "sfe.aggregate", c, c, 3, rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let psfe = self.psfe.forward(g, x)?;
        let f = self.conv.forward(g, psfe)?;
        let f = g.relu(f);
        let squeezed = g.pixel_unshuffle(f, self.r)?;
        let b = self.bottleneck.forward(g, squeezed)?;
        let b = g.relu(b);
        let expanded = g.pixel_shuffle(b, self.r)?;
        let agg = self.aggregate.forward(g, expanded)?;
        g.add(agg, psfe)
    }
}

/// PixelShuffle two-fold attention: channel unit and positional unit both
/// work at `r`-times finer resolution via PS, return via PU, and their sum
/// drives a 3x3 + 1x1 sigmoid head.
#[derive(Clone, Debug)]
pub struct Pltfam {
    r: usize,
    ca_left: Conv2d,
    ca_right: Conv2d,
    pos: Conv2d,
    head3: Conv2d,
    head1: Conv2d,
}

impl Pltfam {
    fn new(store: &mut ParamStore, name: &str, c: usize, r: usize, rng: &mut ChaCha8Rng) -> Self {
        let fine = c / (r * r);
        let half = fine / 2;
        Self {
            r,
            ca_left: Conv2d::new(store, &format!("{name}.ca_left"), half, half, 3, rng),
            ca_right: Conv2d::new(store, &format!("{name}.ca_right"), half, half, 3, rng),
            pos: Conv2d::new(store, &format!("{name}.pos"), fine, fine, 3, rng),
            head3: Conv2d::new(store, &format!("{name}.head3"), c, c, 3, rng),
            head1: Conv2d::new(store, &format!("{name}.head1"), c, c, 1, rng),
        }
    }

    /// Returns `(mask, gated output)`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let fine = g.pixel_shuffle(x, self.r)?;
        let half = g.shape(fine)[1] / 2;
        let left = g.narrow(fine, 0, half)?;
        let right = g.narrow(fine, half, half)?;
        let left = self.ca_left.forward(g, left)?;
        let right = self.ca_right.forward(g, right)?;
        let joined = g.concat(&[left, right])?;
        let ca = g.pixel_unshuffle(joined, self.r)?;

        let pos = self.pos.forward(g, fine)?;
        let pos = g.pixel_unshuffle(pos, self.r)?;

        let sum = g.add(ca, pos)?;
        let mask = mask_head(g, &self.head3, &self.head1, sum)?;
        let out = g.mul(x, mask)?;
        Ok((mask, out))
    }

    pub fn head(&self) -> (&Conv2d, &Conv2d) {
        (&self.head3, &self.head1)
    }
}

/// Baseline two-fold attention: global avg+max pooling through a shared
/// channel bottleneck, and a 2x avg-pool / bilinear-upsample positional unit.
#[derive(Clone, Debug)]
pub struct Tfam {
    fc1: Conv2d,
    fc2: Conv2d,
    pos: Conv2d,
    head3: Conv2d,
    head1: Conv2d,
}

impl Tfam {
    /// Channel bottleneck reduction ratio.
    pub const REDUCTION: usize = 4;

    fn new(store: &mut ParamStore, name: &str, c: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = (c / Self::REDUCTION).max(1);
        Self {
            fc1: Conv2d::new(store, &format!("{name}.fc1"), c, hidden, 1, rng),
            fc2: Conv2d::new(store, &format!("{name}.fc2"), hidden, c, 1, rng),
            pos: Conv2d::new(store, &format!("{name}.pos"), c, c, 3, rng),
            head3: Conv2d::new(store, &format!("{name}.head3"), c, c, 3, rng),
            head1: Conv2d::new(store, &format!("{name}.head1"), c, c, 1, rng),
        }
    }

    fn bottleneck(&self, g: &mut Graph, v: Var) -> Result<Var> {
        let h = self.fc1.forward(g, v)?;
        let h = g.relu(h);
        self.fc2.forward(g, h)
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, Var)> {
        let avg = g.global_avg_pool(x);
        let max = g.global_max_pool(x);
        let a = self.bottleneck(g, avg)?;
        let m = self.bottleneck(g, max)?;
        let weights = g.add(a, m)?;
        let weights = g.sigmoid(weights);
        let ca = g.scale_channels(x, weights)?;

        let down = g.avg_pool2(x)?;
        let pos = self.pos.forward(g, down)?;
        let pos = g.upsample2(pos);

        let sum = g.add(ca, pos)?;
        let mask = mask_head(g, &self.head3, &self.head1, sum)?;
        let out = g.mul(x, mask)?;
        Ok((mask, out))
    }
}

fn mask_head(g: &mut Graph, head3: &Conv2d, head1: &Conv2d, x: Var) -> Result<Var> {
    let h = head3.forward(g, x)?;
    let h = head1.forward(g, h)?;
    Ok(g.sigmoid(h))
}

#[derive(Clone, Debug)]
pub enum Attention {
    Pltfam(Pltfam),
    Tfam(Tfam),
    None,
}

impl Attention {
    /// Returns the optional mask and the gated features.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Option<Var>, Var)> {
        match self {
            Attention::Pltfam(m) => m.forward(g, x).map(|(mask, out)| (Some(mask), out)),
            Attention::Tfam(m) => m.forward(g, x).map(|(mask, out)| (Some(mask), out)),
            Attention::None => Ok((None, x)),
        }
    }
}

#[derive(Clone, Debug)]
struct ResidualUnit {
    conv1: Conv2d,
    conv2: Conv2d,
}

/// Residual concatenation block.
#[derive(Clone, Debug)]
pub struct Rcb {
    units: Vec<ResidualUnit>,
    fuse: Conv2d,
    attention: Attention,
}

impl Rcb {
    fn new(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let c = cfg.channels;
        let units = (0..cfg.units_per_rcb)
            .map(|u| ResidualUnit {
                conv1: Conv2d::new(store, &format!("{name}.unit{u}.conv1"), c, c, 3, rng),
                conv2: Conv2d::new(store, &format!("{name}.unit{u}.conv2"), c, c, 3, rng),
            })
            .collect();
        let fuse = Conv2d::new(store, &format!("{name}.fuse"), c * cfg.units_per_rcb, c, 1, rng);
        let attention = match cfg.attention {
            AttentionKind::Pltfam => Attention::Pltfam(Pltfam::new(
                store,
                &format!("{name}.pltfam"),
                c,
                cfg.shuffle_factor,
                rng,
            )),
            AttentionKind::Tfam => Attention::Tfam(Tfam::new(store, &format!("{name}.tfam"), c, rng)),
            AttentionKind::None => Attention::None,
        };
        Self {
            units,
            fuse,
            attention,
        }
    }

    /// Returns `(output, attention mask)`.
    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<(Var, Option<Var>)> {
        let mut h = x;
        let mut outs = Vec::with_capacity(self.units.len());
        for unit in &self.units {
            let t = unit.conv1.forward(g, h)?;
            let t = g.relu(t);
            let t = unit.conv2.forward(g, t)?;
            h = g.add(t, h)?;
            outs.push(h);
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs)? };
        let fused = self.fuse.forward(g, cat)?;
        let (mask, gated) = self.attention.forward(g, fused)?;
        Ok((g.add(gated, x)?, mask))
    }

    pub fn attention(&self) -> &Attention {
        &self.attention
    }
}

#[derive(Clone, Debug)]
struct ReconBlock {
    conv1: Conv2d,
    conv2: Conv2d,
}

/// Reconstruction head: fine-scale recurrent blocks bracketed by PS/PU.
#[derive(Clone, Debug)]
pub struct Reconstruction {
    r: usize,
    entry: Conv2d,
    blocks: Vec<ReconBlock>,
    exit: Conv2d,
}

impl Reconstruction {
    fn new(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Self {
        let (c, r) = (cfg.channels, cfg.shuffle_factor);
        let entry = Conv2d::new(store, "recon.entry", c, c * r * r, 1, rng);
        let distinct = if cfg.tie_recon_weights { 1 } else { cfg.recon_blocks };
        let distinct: Vec<ReconBlock> = (0..distinct)
            .map(|b| ReconBlock {
                conv1: Conv2d::new(store, &format!("recon.block{b}.conv1"), c, c, 3, rng),
                conv2: Conv2d::new(store, &format!("recon.block{b}.conv2"), c, c, 3, rng),
            })
            .collect();
        let blocks = (0..cfg.recon_blocks)
            .map(|b| distinct[b % distinct.len()].clone())
            .collect();
        let exit = Conv2d::new(store, "recon.exit", c * r * r, 3, 3, rng);
        Self {
            r,
            entry,
            blocks,
            exit,
        }
    }

    pub fn forward(&self, g: &mut Graph, features: Var) -> Result<Var> {
        let e = self.entry.forward(g, features)?;
        let mut p = g.pixel_shuffle(e, self.r)?;
        for block in &self.blocks {
            let t = block.conv1.forward(g, p)?;
            let t = g.relu(t);
            let t = block.conv2.forward(g, t)?;
            p = g.relu(t);
        }
        let q = g.pixel_unshuffle(p, self.r)?;
        let out = self.exit.forward(g, q)?;
        Ok(g.sigmoid(out))
    }
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub sr: Var,
    pub masks: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct NetworkOutput {
    pub sr: ImageTensor,
    pub attention_masks: Vec<ImageTensor>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct NetworkRecord {
    kind: String,
    seed: u64,
    model: ModelConfig,
}

#[derive(Clone, Debug)]
pub struct Network {
    cfg: ModelConfig,
    seed: u64,
    store: ParamStore,
    sfe: Sfe,
    rcbs: Vec<Rcb>,
    fm_fuse: Conv2d,
    fm_conv: Conv2d,
    recon: Reconstruction,
}

impl Network {
    pub const CHECKPOINT_KIND: &'static str = "sr-network";

    /// Build with seeded He-uniform kernels and zero biases. The last conv
    /// of every residual branch (unit `conv2`, RCB `fuse`, FM `conv`) and the
    /// reconstruction exit start at zero: each residual block is the
    /// identity and the output is a uniform 0.5 at initialisation.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = cfg.channels;
        let sfe = Sfe::new(&mut store, c, cfg.shuffle_factor, &mut rng);
        let rcbs: Vec<Rcb> = (0..cfg.num_rcb)
            .map(|i| Rcb::new(&mut store, &format!("rcb{i}"), &cfg, &mut rng))
            .collect();
        let fm_fuse = Conv2d::new(&mut store, "fm.fuse", c * cfg.num_rcb, c, 1, &mut rng);
        let fm_conv = Conv2d::new(&mut store, "fm.conv", c, c, 3, &mut rng);
        let recon = Reconstruction::new(&mut store, &cfg, &mut rng);
        let branch_ends = rcbs
            .iter()
            .flat_map(|r: &Rcb| r.units.iter().map(|u| &u.conv2).chain([&r.fuse]))
            .chain([&fm_conv, &recon.exit])
            .map(Conv2d::weight)
            .collect::<Vec<_>>();
        for id in branch_ends {
            store.get_mut(id).data_mut().fill(0.0);
        }
        Ok(Self {
            cfg,
            seed,
            store,
            sfe,
            rcbs,
            fm_fuse,
            fm_conv,
            recon,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn sfe(&self) -> &Sfe {
        &self.sfe
    }

    pub fn rcbs(&self) -> &[Rcb] {
        &self.rcbs
    }

    pub fn reconstruction(&self) -> &Reconstruction {
        &self.recon
    }

    /// Record a full forward pass of a `[n, 3, H, W]` batch onto `g`.
    pub fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<ForwardVars> {
        let [_, c, h, w] = g.shape(x);
        self.cfg.check_input(c, h, w)?;
        let shallow = self.sfe.forward(g, x)?;
        let mut h = shallow;
        let mut outs = Vec::with_capacity(self.rcbs.len());
        let mut masks = Vec::new();
        for rcb in &self.rcbs {
            let (out, mask) = rcb.forward(g, h)?;
            masks.extend(mask);
            outs.push(out);
            h = out;
        }
        let cat = if outs.len() == 1 { outs[0] } else { g.concat(&outs)? };
        let fm = self.fm_fuse.forward(g, cat)?;
        let fm = self.fm_conv.forward(g, fm)?;
        let trunk = g.add(fm, shallow)?;
        let sr = self.recon.forward(g, trunk)?;
        Ok(ForwardVars { sr, masks })
    }

    /// Inference on one image.
    pub fn forward(&self, x: &ImageTensor) -> Result<NetworkOutput> {
        let mut g = Graph::new(&self.store);
        let xi = g.input(Tensor::from_image(x));
        let vars = self.forward_graph(&mut g, xi)?;
        let sr = g.value(vars.sr).image(0)?;
        let attention_masks = vars
            .masks
            .iter()
            .map(|&m| g.value(m).image(0))
            .collect::<Result<_>>()?;
        Ok(NetworkOutput { sr, attention_masks })
    }

    pub fn enhance(&self, x: &ImageTensor) -> Result<ImageTensor> {
        Ok(self.forward(x)?.sr)
    }

    pub fn config_json(&self) -> String {
        serde_json::to_string(&NetworkRecord {
            kind: Self::CHECKPOINT_KIND.into(),
            seed: self.seed,
            model: self.cfg.clone(),
        })
        .expect("config serialises")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(path, &self.config_json(), &self.store)
    }

    /// Rebuild from the stored config and verify every parameter shape.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (json, stored) = load_checkpoint(path)?;
        Self::from_parts(&json, &stored).map_err(|e| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }

    fn from_parts(json: &str, stored: &ParamStore) -> Result<Self> {
        let record: NetworkRecord = serde_json::from_str(json)?;
        if record.kind != Self::CHECKPOINT_KIND {
            return Err(Error::config(format!(
                "checkpoint kind {:?} is not {:?}",
                record.kind,
                Self::CHECKPOINT_KIND
            )));
        }
        let mut net = Self::new(record.model, record.seed)?;
        net.store.load_from(stored)?;
        Ok(net)
    }
}

/// A restoration model as stored in a checkpoint: the network, or the
/// identity map used as the no-super-resolution reference.
#[derive(Clone, Debug)]
pub enum SrModel {
    Network(Box<Network>),
    Identity,
}

impl SrModel {
    pub const IDENTITY_KIND: &'static str = "identity";

    pub fn enhance(&self, x: &ImageTensor) -> Result<ImageTensor> {
        match self {
            SrModel::Network(net) => net.enhance(x),
            SrModel::Identity => Ok(x.clone()),
        }
    }

    pub fn describe(&self) -> String {
        match self {
            SrModel::Network(net) => format!(
                "network(C={}, rcb={}, attention={}, params={})",
                net.config().channels,
                net.config().num_rcb,
                net.config().attention,
                net.num_params()
            ),
            SrModel::Identity => "identity".into(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        match self {
            SrModel::Network(net) => net.save(path),
            SrModel::Identity => save_checkpoint(
                path,
                &format!(r#"{{"kind":"{}"}}"#, Self::IDENTITY_KIND),
                &ParamStore::new(),
            ),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let (json, stored) = load_checkpoint(path)?;
        let wrap = |e: Error| Error::Checkpoint {
            path: path.to_path_buf(),
            message: e.to_string(),
        };
        let value: serde_json::Value = serde_json::from_str(&json).map_err(|e| wrap(e.into()))?;
        match value.get("kind").and_then(|k| k.as_str()) {
            Some(Self::IDENTITY_KIND) => Ok(SrModel::Identity),
            Some(Network::CHECKPOINT_KIND) => Network::from_parts(&json, &stored)
                .map(|n| SrModel::Network(Box::new(n)))
                .map_err(wrap),
            other => Err(wrap(Error::config(format!("unknown checkpoint kind {other:?}")))),
        }
    }
}
