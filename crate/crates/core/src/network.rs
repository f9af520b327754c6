//! The assembled U-shaped network: LAM encoder pyramid, PHFA skip gating and
//! RT decoder, with toggles that swap each module for a plain fallback.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{grid_to_tokens, tokens_to_grid};
use crate::blocks::{
    conv_block_forward, lam_block_forward, patch_embed, patch_expand, patch_merge, phfa_forward,
    rt_block_forward, ConvBlockParams, LamBlockParams, PatchEmbed, PatchExpand, PatchMerge,
    PhfaParams, RtBlockParams, PATCH, SIZE_MULTIPLE,
};
use crate::error::{cfg_err, dim_err, Result};
use crate::params::{Bound, Linear, ParamBuilder, ParamStore};
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const STAGES: usize = 4;

/// Which of the three modules are active; a disabled module is replaced by
/// its fallback (conv block, identity skip, conv block).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Toggles {
    pub lam: bool,
    pub phfa: bool,
    pub rt: bool,
}

impl Toggles {
    pub const ALL: Toggles = Toggles {
        lam: true,
        phfa: true,
        rt: true,
    };
    pub const NONE: Toggles = Toggles {
        lam: false,
        phfa: false,
        rt: false,
    };

    /// `"LAM+PHFA+RT"` style label; `"none"` when everything is off.
    pub fn label(&self) -> String {
        let parts: Vec<&str> = [(self.lam, "LAM"), (self.phfa, "PHFA"), (self.rt, "RT")]
            .iter()
            .filter(|(on, _)| *on)
            .map(|(_, n)| *n)
            .collect();
        if parts.is_empty() {
            String::from("none")
        } else {
            parts.join("+")
        }
    }

    /// The seven nonempty subsets, singles first and the full set last.
    pub fn nonempty_subsets() -> [Toggles; 7] {
        let t = |lam, phfa, rt| Toggles { lam, phfa, rt };
        [
            t(true, false, false),
            t(false, true, false),
            t(false, false, true),
            t(true, true, false),
            t(true, false, true),
            t(false, true, true),
            t(true, true, true),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetConfig {
    pub img_channels: usize,
    pub num_classes: usize,
    pub stage_channels: [usize; STAGES],
    pub stage_depths: [usize; STAGES],
    /// Decoder reduction ratios, shallowest stage first.
    pub reduction_ratios: [usize; STAGES],
    /// Query/key width is `C / attn_divisor`.
    pub attn_divisor: usize,
    /// FRN layer-norm depth 1..=3; 0 replaces the FRN by a plain MLP.
    pub frn_depth: usize,
    pub toggles: Toggles,
    pub seed: u64,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            img_channels: 1,
            num_classes: 4,
            stage_channels: [16, 32, 64, 128],
            stage_depths: [1, 1, 1, 1],
            reduction_ratios: [8, 4, 2, 1],
            attn_divisor: 2,
            frn_depth: 3,
            toggles: Toggles::ALL,
            seed: 0,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.img_channels == 0 {
            return Err(cfg_err!("img_channels must be >= 1"));
        }
        if self.num_classes < 2 || self.num_classes > 256 {
            return Err(cfg_err!(
                "num_classes must be in 2..=256, got {}",
                self.num_classes
            ));
        }
        let c = &self.stage_channels;
        if c[0] < 2 || !c[0].is_multiple_of(2) {
            return Err(cfg_err!(
                "stage_channels[0] must be even and >= 2, got {}",
                c[0]
            ));
        }
        for i in 1..STAGES {
            if c[i] != 2 * c[i - 1] {
                return Err(cfg_err!(
                    "stage_channels[{}] must be 2 * stage_channels[{}], got {:?}",
                    i,
                    i - 1,
                    c
                ));
            }
        }
        if self.stage_depths.contains(&0) {
            return Err(cfg_err!(
                "stage_depths must all be >= 1, got {:?}",
                self.stage_depths
            ));
        }
        if self.reduction_ratios.contains(&0) {
            return Err(cfg_err!(
                "reduction_ratios must all be >= 1, got {:?}",
                self.reduction_ratios
            ));
        }
        if self.attn_divisor == 0 || c[0] / self.attn_divisor == 0 {
            return Err(cfg_err!(
                "attn_divisor {} leaves no query width for {} channels",
                self.attn_divisor,
                c[0]
            ));
        }
        if self.frn_depth > 3 {
            return Err(cfg_err!(
                "frn_depth must be 0 (MLP) or 1..=3, got {}",
                self.frn_depth
            ));
        }
        Ok(())
    }

    fn attn_dim(&self, c: usize) -> usize {
        c / self.attn_divisor
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderBlock {
    Lam(LamBlockParams),
    Conv(ConvBlockParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecoderBlock {
    Rt(RtBlockParams),
    Conv(ConvBlockParams),
}

/// Parameter layout of the network. Holds ids only, so the same layout runs
/// over stores of any precision.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Net {
    pub config: NetConfig,
    pub embed: PatchEmbed,
    /// `merges[i]` goes from stage `i` to stage `i + 1`.
    pub merges: Vec<PatchMerge>,
    pub encoder: Vec<Vec<EncoderBlock>>,
    pub phfa: Option<PhfaParams>,
    pub decoder: Vec<Vec<DecoderBlock>>,
    /// `expands[i]` goes from stage `i + 1` to stage `i`.
    pub expands: Vec<PatchExpand>,
    /// `fuse[i]` projects the concatenated `2C_i` skip and upsampled features to `C_i`.
    pub fuse: Vec<Linear>,
    pub final_expand: PatchExpand,
    pub head: Linear,
}

/// A network layout together with its parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub net: Net,
    pub params: ParamStore,
}

/// Attention maps recorded during a forward pass, by layer name.
#[derive(Debug, Clone)]
pub struct AttentionMap {
    pub layer: String,
    /// LAM: `N × C` gate. RT: `N × M` softmax weights.
    pub var: Var,
    /// Spatial grid of the layer's tokens.
    pub grid: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct Trace {
    /// `K × H × W` logits.
    pub logits: Var,
    pub attention: Vec<AttentionMap>,
}

impl Net {
    /// Register every parameter in `store`, initialized deterministically from `config.seed`.
    pub fn build(config: &NetConfig, store: &mut ParamStore) -> Result<Net> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut b = ParamBuilder::new(store, &mut rng);
        let c = config.stage_channels;
        let t = config.toggles;

        let embed = PatchEmbed::init(&mut b.scope("embed"), config.img_channels, c[0]);
        let mut encoder = Vec::with_capacity(STAGES);
        let mut merges = Vec::with_capacity(STAGES - 1);
        for s in 0..STAGES {
            if s > 0 {
                merges.push(PatchMerge::init(
                    &mut b.scope(&format!("merge{s}")),
                    c[s - 1],
                ));
            }
            let mut blocks = Vec::with_capacity(config.stage_depths[s]);
            for j in 0..config.stage_depths[s] {
                let mut sb = b.scope(&format!("enc{}.block{j}", s + 1));
                blocks.push(if t.lam {
                    EncoderBlock::Lam(LamBlockParams::init(
                        &mut sb,
                        c[s],
                        config.attn_dim(c[s]),
                        config.frn_depth,
                    )?)
                } else {
                    EncoderBlock::Conv(ConvBlockParams::init(&mut sb, c[s]))
                });
            }
            encoder.push(blocks);
        }

        let phfa = t.phfa.then(|| PhfaParams::init(&mut b.scope("phfa"), &c));

        let mut decoder = Vec::with_capacity(STAGES);
        let mut expands = Vec::with_capacity(STAGES - 1);
        let mut fuse = Vec::with_capacity(STAGES - 1);
        for s in 0..STAGES {
            if s < STAGES - 1 {
                expands.push(PatchExpand::init(
                    &mut b.scope(&format!("expand{}", s + 1)),
                    c[s + 1],
                ));
                fuse.push(b.linear(&format!("fuse{}", s + 1), 2 * c[s], c[s], true));
            }
            let mut blocks = Vec::with_capacity(config.stage_depths[s]);
            for j in 0..config.stage_depths[s] {
                let mut sb = b.scope(&format!("dec{}.block{j}", s + 1));
                blocks.push(if t.rt {
                    let r = config.reduction_ratios[s];
                    DecoderBlock::Rt(RtBlockParams::init(
                        &mut sb,
                        c[s],
                        config.attn_dim(c[s]),
                        r,
                        config.frn_depth,
                    )?)
                } else {
                    DecoderBlock::Conv(ConvBlockParams::init(&mut sb, c[s]))
                });
            }
            decoder.push(blocks);
        }

        let final_expand = PatchExpand::init_final(&mut b.scope("final_expand"), c[0], PATCH);
        let head = b.linear("head", c[0], config.num_classes, true);
        Ok(Net {
            config: config.clone(),
            embed,
            merges,
            encoder,
            phfa,
            decoder,
            expands,
            fuse,
            final_expand,
            head,
        })
    }

    /// Names of the layers whose attention maps [`Net::forward_sample`] records.
    pub fn attention_layers(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (s, blocks) in self.encoder.iter().enumerate() {
            for (j, b) in blocks.iter().enumerate() {
                if matches!(b, EncoderBlock::Lam(_)) {
                    names.push(format!("enc{}.block{j}", s + 1));
                }
            }
        }
        for (s, blocks) in self.decoder.iter().enumerate().rev() {
            for (j, b) in blocks.iter().enumerate() {
                if matches!(b, DecoderBlock::Rt(_)) {
                    names.push(format!("dec{}.block{j}", s + 1));
                }
            }
        }
        names
    }

    fn check_image(&self, shape: &[usize]) -> Result<()> {
        if shape.len() != 3 || shape[0] != self.config.img_channels {
            return Err(dim_err!(
                "expected a {} x H x W image, got {:?}",
                self.config.img_channels,
                shape
            ));
        }
        if !shape[1].is_multiple_of(SIZE_MULTIPLE) || !shape[2].is_multiple_of(SIZE_MULTIPLE) {
            return Err(cfg_err!(
                "image {}x{} is not a multiple of {} on both sides",
                shape[1],
                shape[2],
                SIZE_MULTIPLE
            ));
        }
        Ok(())
    }

    /// One `C_img × H × W` image to `K × H × W` logits.
    pub fn forward_sample<T: Real>(
        &self,
        tape: &mut Tape<'_, T>,
        p: &Bound,
        img: Var,
    ) -> Result<Trace> {
        let shape = tape.shape(img).to_vec();
        self.check_image(&shape)?;
        let (h, w) = (shape[1], shape[2]);
        let grid = |s: usize| (h / (PATCH << s), w / (PATCH << s));
        let mut attention = Vec::new();

        let mut x = patch_embed(tape, p, img, &self.embed)?;
        let mut skips = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            if s > 0 {
                x = patch_merge(tape, p, x, &self.merges[s - 1], grid(s - 1))?;
            }
            for (j, blk) in self.encoder[s].iter().enumerate() {
                x = match blk {
                    EncoderBlock::Lam(lam) => {
                        let o = lam_block_forward(tape, p, x, lam, grid(s))?;
                        let layer = format!("enc{}.block{j}", s + 1);
                        attention.push(AttentionMap {
                            layer,
                            var: o.attention,
                            grid: grid(s),
                        });
                        o.out
                    }
                    EncoderBlock::Conv(cb) => conv_block_forward(tape, p, x, cb, grid(s))?,
                };
            }
            skips.push(tokens_to_grid(tape, x, grid(s))?);
        }

        if let Some(ph) = &self.phfa {
            skips = phfa_forward(tape, p, &skips, ph)?.features;
        }

        let mut y = grid_to_tokens(tape, skips[STAGES - 1])?;
        for s in (0..STAGES).rev() {
            if s < STAGES - 1 {
                y = patch_expand(tape, p, y, &self.expands[s], grid(s + 1))?;
                let skip = grid_to_tokens(tape, skips[s])?;
                let cat = tape.concat(&[y, skip], 1)?;
                y = self.fuse[s].forward(tape, p, cat)?;
            }
            for (j, blk) in self.decoder[s].iter().enumerate() {
                y = match blk {
                    DecoderBlock::Rt(rt) => {
                        let o = rt_block_forward(tape, p, y, rt, grid(s))?;
                        let layer = format!("dec{}.block{j}", s + 1);
                        attention.push(AttentionMap {
                            layer,
                            var: o.attention,
                            grid: grid(s),
                        });
                        o.out
                    }
                    DecoderBlock::Conv(cb) => conv_block_forward(tape, p, y, cb, grid(s))?,
                };
            }
        }

        let y = patch_expand(tape, p, y, &self.final_expand, grid(0))?;
        let y = self.head.forward(tape, p, y)?;
        let logits = tokens_to_grid(tape, y, (h, w))?;
        Ok(Trace { logits, attention })
    }

    /// `B × C_img × H × W` images to `B × K × H × W` logits on one tape.
    pub fn forward<T: Real>(&self, tape: &mut Tape<'_, T>, p: &Bound, images: Var) -> Result<Var> {
        let s = tape.shape(images).to_vec();
        if s.len() != 4 {
            return Err(dim_err!("expected B x C x H x W images, got {:?}", s));
        }
        let mut outs = Vec::with_capacity(s[0]);
        for b in 0..s[0] {
            let img = tape.slice(images, 0, b, 1)?;
            let img = tape.reshape(img, &s[1..])?;
            let logits = self.forward_sample(tape, p, img)?.logits;
            let k = tape.shape(logits).to_vec();
            outs.push(tape.reshape(logits, &[1, k[0], k[1], k[2]])?);
        }
        tape.concat(&outs, 0)
    }
}

impl Model {
    pub fn build(config: &NetConfig) -> Result<Model> {
        let mut params = ParamStore::new();
        let net = Net::build(config, &mut params)?;
        Ok(Model { net, params })
    }

    pub fn config(&self) -> &NetConfig {
        &self.net.config
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    /// Logits `B × K × H × W` for a batch, without recording gradients.
    pub fn predict(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.bind(&mut tape);
        let x = tape.constant(images.clone());
        let y = self.net.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }
}
